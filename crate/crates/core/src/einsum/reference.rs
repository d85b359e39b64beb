//! Direct nested-loop evaluation over the whole index space of an expression.
//! This is the correctness oracle for every decomposed execution, so it is
//! kept deliberately naive and shares no code with the chunk kernels.

use std::collections::BTreeMap;

use super::{EinGraph, EinSumExpr, ScalarOp, VertexId};
use crate::error::{Error, Result};
use crate::tensor::{for_each_index, Tensor};

/// Evaluates one expression on whole tensors. Division by zero gives
/// [`Error::Poisoned`] naming `<expression>`; graph evaluation renames it.
pub fn eval_expr_reference(expr: &EinSumExpr, inputs: &[&Tensor]) -> Result<Tensor> {
    let distinct = expr.distinct_labels();
    let mut extent = vec![0usize; distinct.len()];
    for (slot, ls) in expr.all_input_labels().iter().enumerate() {
        for (pos, l) in ls.iter().enumerate() {
            let u = distinct
                .iter()
                .position(|d| d == l)
                .expect("label of an operand");
            extent[u] = inputs[slot].bound()[pos];
        }
    }
    let position_in = |ls: &[String]| -> Vec<usize> {
        ls.iter()
            .map(|l| distinct.iter().position(|d| d == l).expect("known label"))
            .collect()
    };
    let operand_pos: Vec<Vec<usize>> = expr
        .all_input_labels()
        .iter()
        .map(|ls| position_in(ls))
        .collect();
    let out_pos = position_in(expr.out_labels());
    let out_bound: Vec<usize> = out_pos.iter().map(|&p| extent[p]).collect();

    let mut acc: Vec<Option<f64>> = vec![None; out_bound.iter().product()];
    let mut out_tensor = Tensor::zeros(out_bound.clone());
    let mut poisoned = false;

    for_each_index(&extent, |u| {
        if poisoned {
            return;
        }
        let gather = |slot: usize| -> f64 {
            let idx: Vec<usize> = operand_pos[slot].iter().map(|&p| u[p]).collect();
            inputs[slot].get(&idx)
        };
        let value = match expr.op() {
            ScalarOp::Join(j) => match j.apply(gather(0), gather(1)) {
                Some(v) => v,
                None => {
                    poisoned = true;
                    return;
                }
            },
            ScalarOp::Map(m) => m.apply(gather(0)),
        };
        let oidx: Vec<usize> = out_pos.iter().map(|&p| u[p]).collect();
        let mut off = 0;
        for (i, b) in oidx.iter().zip(&out_bound) {
            off = off * b + i;
        }
        acc[off] = Some(match (acc[off], expr.agg()) {
            (None, _) => value,
            (Some(prev), Some(agg)) => agg.combine(prev, value),
            (Some(_), None) => unreachable!("element-wise expression visits each output once"),
        });
    });
    if poisoned {
        return Err(Error::Poisoned {
            vertex: "<expression>".into(),
        });
    }
    for (dst, v) in out_tensor.values_mut().iter_mut().zip(acc) {
        *dst = v.expect("every output element receives a value");
    }
    Ok(out_tensor)
}

/// Evaluates every vertex of `graph` in topological order.
pub fn eval_reference(
    graph: &EinGraph,
    inputs: &BTreeMap<VertexId, Tensor>,
) -> Result<BTreeMap<VertexId, Tensor>> {
    let mut values: BTreeMap<VertexId, Tensor> = BTreeMap::new();
    for &v in graph.topo_order() {
        let vx = graph.vertex(v);
        match &vx.expr {
            None => {
                let t = inputs.get(&v).ok_or_else(|| {
                    Error::Plan(format!("no tensor supplied for input `{}`", vx.name))
                })?;
                if *t.bound() != vx.bound {
                    return Err(Error::Shape(format!(
                        "input `{}` expects bound {}, got {}",
                        vx.name,
                        vx.bound,
                        t.bound()
                    )));
                }
                values.insert(v, t.clone());
            }
            Some(expr) => {
                let args: Vec<&Tensor> = vx.inputs.iter().map(|u| &values[u]).collect();
                let out = eval_expr_reference(expr, &args).map_err(|e| match e {
                    Error::Poisoned { .. } => Error::Poisoned {
                        vertex: vx.name.clone(),
                    },
                    e => e,
                })?;
                values.insert(v, out);
            }
        }
    }
    Ok(values)
}

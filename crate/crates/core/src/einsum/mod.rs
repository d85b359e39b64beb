//! Extended einsum expressions: a join of labeled operands under a scalar
//! function, followed by an associative, commutative aggregation over the
//! labels that do not reach the output.

mod graph;
mod parse;
mod reference;

pub use graph::{softmax_macro, topo_sort, EinGraph, GraphBuilder, Vertex, VertexId};
pub use parse::parse_eingraph;
pub use reference::{eval_expr_reference, eval_reference};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Bound;

pub type Label = String;

/// Scalar function applied to a pair of joined values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JoinOp {
    Mul,
    Add,
    Sub,
    Div,
    /// `(x - y)^2`
    SqDiff,
    /// `|x - y|`
    AbsDiff,
}

impl JoinOp {
    /// `None` signals a poisoned value (division by zero).
    #[inline]
    pub fn apply(self, x: f64, y: f64) -> Option<f64> {
        Some(match self {
            JoinOp::Mul => x * y,
            JoinOp::Add => x + y,
            JoinOp::Sub => x - y,
            JoinOp::Div => {
                if y == 0.0 {
                    return None;
                }
                x / y
            }
            JoinOp::SqDiff => (x - y) * (x - y),
            JoinOp::AbsDiff => (x - y).abs(),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            JoinOp::Mul => "mul",
            JoinOp::Add => "add",
            JoinOp::Sub => "sub",
            JoinOp::Div => "div",
            JoinOp::SqDiff => "sqdiff",
            JoinOp::AbsDiff => "absdiff",
        }
    }
}

impl FromStr for JoinOp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "mul" => JoinOp::Mul,
            "add" => JoinOp::Add,
            "sub" => JoinOp::Sub,
            "div" => JoinOp::Div,
            "sqdiff" => JoinOp::SqDiff,
            "absdiff" => JoinOp::AbsDiff,
            _ => return Err(format!("unknown join op `{s}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggOp {
    Sum,
    Max,
}

impl AggOp {
    #[inline]
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            AggOp::Sum => a + b,
            AggOp::Max => a.max(b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AggOp::Sum => "sum",
            AggOp::Max => "max",
        }
    }
}

impl FromStr for AggOp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(AggOp::Sum),
            "max" => Ok(AggOp::Max),
            _ => Err(format!("unknown aggregation `{s}`")),
        }
    }
}

/// Elementwise function of a unary expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapOp {
    Relu,
    Exp,
    Neg,
    Scale(f64),
    Identity,
}

impl MapOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            MapOp::Relu => x.max(0.0),
            MapOp::Exp => x.exp(),
            MapOp::Neg => -x,
            MapOp::Scale(c) => c * x,
            MapOp::Identity => x,
        }
    }
}

impl fmt::Display for MapOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapOp::Relu => write!(f, "relu"),
            MapOp::Exp => write!(f, "exp"),
            MapOp::Neg => write!(f, "neg"),
            // `{:?}` keeps enough digits to round-trip the constant
            MapOp::Scale(c) => write!(f, "scale({c:?})"),
            MapOp::Identity => write!(f, "identity"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarOp {
    Join(JoinOp),
    Map(MapOp),
}

impl ScalarOp {
    pub fn arity(self) -> usize {
        match self {
            ScalarOp::Join(_) => 2,
            ScalarOp::Map(_) => 1,
        }
    }
}

/// One einsum: output labels, one or two operand label lists, the scalar
/// function, and an optional aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct EinSumExpr {
    out: Vec<Label>,
    inputs: Vec<Vec<Label>>,
    op: ScalarOp,
    agg: Option<AggOp>,
}

fn labels(ls: &[&str]) -> Vec<Label> {
    ls.iter().map(|s| s.to_string()).collect()
}

fn check_distinct(tensor: &str, ls: &[Label]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for l in ls {
        if !seen.insert(l) {
            return Err(Error::RepeatedLabel {
                tensor: tensor.to_string(),
                label: l.clone(),
            });
        }
    }
    Ok(())
}

impl EinSumExpr {
    pub fn new(
        out: Vec<Label>,
        inputs: Vec<Vec<Label>>,
        op: ScalarOp,
        agg: Option<AggOp>,
    ) -> Result<Self> {
        if inputs.len() != op.arity() {
            return Err(Error::InvalidExpr(format!(
                "operator expects {} operand(s), got {}",
                op.arity(),
                inputs.len()
            )));
        }
        check_distinct("output", &out)?;
        for (slot, ls) in inputs.iter().enumerate() {
            check_distinct(&format!("operand {slot}"), ls)?;
        }
        let expr = Self {
            out,
            inputs,
            op,
            agg,
        };
        let distinct = expr.distinct_labels();
        for l in &expr.out {
            if !distinct.contains(l) {
                return Err(Error::InvalidExpr(format!(
                    "output label `{l}` appears in no operand (broadcasts are not supported)"
                )));
            }
        }
        let has_agg = !expr.agg_labels().is_empty();
        match (has_agg, expr.agg.is_some()) {
            (true, false) => Err(Error::InvalidExpr(format!(
                "labels {:?} are aggregated but no aggregation operator was given",
                expr.agg_labels()
            ))),
            (false, true) => Err(Error::InvalidExpr(
                "aggregation operator given but no labels are aggregated".into(),
            )),
            _ => Ok(expr),
        }
    }

    /// Convenience constructor for binary expressions.
    pub fn binary(
        out: &[&str],
        lx: &[&str],
        ly: &[&str],
        op: JoinOp,
        agg: Option<AggOp>,
    ) -> Result<Self> {
        Self::new(
            labels(out),
            vec![labels(lx), labels(ly)],
            ScalarOp::Join(op),
            agg,
        )
    }

    pub fn unary(out: &[&str], lx: &[&str], op: MapOp, agg: Option<AggOp>) -> Result<Self> {
        Self::new(labels(out), vec![labels(lx)], ScalarOp::Map(op), agg)
    }

    /// `Z[i,k] = sum[j] mul(X[i,j], Y[j,k])`
    pub fn matmul() -> Self {
        Self::binary(
            &["i", "k"],
            &["i", "j"],
            &["j", "k"],
            JoinOp::Mul,
            Some(AggOp::Sum),
        )
        .expect("matmul is well formed")
    }

    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    pub fn op(&self) -> ScalarOp {
        self.op
    }

    pub fn agg(&self) -> Option<AggOp> {
        self.agg
    }

    pub fn out_labels(&self) -> &[Label] {
        &self.out
    }

    pub fn input_labels(&self, slot: usize) -> &[Label] {
        &self.inputs[slot]
    }

    pub fn all_input_labels(&self) -> &[Vec<Label>] {
        &self.inputs
    }

    /// Concatenation of the operand label lists (`lX` then `lY`).
    pub fn xy_labels(&self) -> Vec<Label> {
        self.inputs.iter().flatten().cloned().collect()
    }

    /// Concatenation with duplicates removed, keeping first occurrences.
    pub fn distinct_labels(&self) -> Vec<Label> {
        let mut out: Vec<Label> = Vec::new();
        for l in self.inputs.iter().flatten() {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }

    /// Labels that appear in the operands but not in the output.
    pub fn agg_labels(&self) -> Vec<Label> {
        self.distinct_labels()
            .into_iter()
            .filter(|l| !self.out.contains(l))
            .collect()
    }

    /// Concatenated operand bounds, checking that shared labels agree.
    pub fn xy_bound(&self, input_bounds: &[&Bound]) -> Result<Bound> {
        if input_bounds.len() != self.arity() {
            return Err(Error::InvalidExpr(format!(
                "expected {} operand bound(s), got {}",
                self.arity(),
                input_bounds.len()
            )));
        }
        let mut entries = Vec::new();
        for (slot, (ls, b)) in self.inputs.iter().zip(input_bounds).enumerate() {
            if ls.len() != b.rank() {
                return Err(Error::Shape(format!(
                    "operand {slot} has {} labels but its tensor has rank {}",
                    ls.len(),
                    b.rank()
                )));
            }
            entries.extend_from_slice(b);
        }
        let xy = self.xy_labels();
        for i in 0..xy.len() {
            for j in 0..i {
                if xy[i] == xy[j] && entries[i] != entries[j] {
                    return Err(Error::BoundMismatch {
                        label: xy[i].clone(),
                        left: entries[j],
                        right: entries[i],
                    });
                }
            }
        }
        Ok(Bound::new(entries))
    }

    /// Output bound `b_XY[lZ; lXY]`.
    pub fn output_bound(&self, input_bounds: &[&Bound]) -> Result<Bound> {
        let bxy = self.xy_bound(input_bounds)?;
        project_bound(&bxy, &self.out, &self.xy_labels())
    }

    /// Renders the right-hand side of the statement in graph-text syntax.
    pub fn render_rhs(&self, input_names: &[&str]) -> String {
        let operand =
            |slot: usize| format!("{}[{}]", input_names[slot], self.inputs[slot].join(","));
        let mut s = String::new();
        if let Some(agg) = self.agg {
            s.push_str(&format!("{}[{}] ", agg.name(), self.agg_labels().join(",")));
        }
        match self.op {
            ScalarOp::Join(j) => {
                s.push_str(&format!("{}({}, {})", j.name(), operand(0), operand(1)))
            }
            ScalarOp::Map(m) => s.push_str(&format!("map {m}({})", operand(0))),
        }
        s
    }

    pub fn render(&self, out_name: &str, input_names: &[&str]) -> String {
        format!(
            "{out_name}[{}] = {}",
            self.out.join(","),
            self.render_rhs(input_names)
        )
    }
}

/// `values[l1; l2]`: for every label of `l1`, the entry of `values` at the
/// first position where that label occurs in `l2`.
pub fn project<T: Copy>(values: &[T], l1: &[Label], l2: &[Label]) -> Result<Vec<T>> {
    if values.len() != l2.len() {
        return Err(Error::Shape(format!(
            "{} values for {} labels",
            values.len(),
            l2.len()
        )));
    }
    l1.iter()
        .map(|l| {
            l2.iter()
                .position(|m| m == l)
                .map(|j| values[j])
                .ok_or_else(|| Error::UnknownLabel(l.clone()))
        })
        .collect()
}

pub fn project_bound(b: &Bound, l1: &[Label], l2: &[Label]) -> Result<Bound> {
    project(b, l1, l2).map(Bound::new)
}

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use super::{AggOp, EinSumExpr, JoinOp, Label, MapOp};
use crate::error::{Error, Result};
use crate::tensor::Bound;

pub type VertexId = usize;

/// A vertex is the triple (bound, einsum, inputs); `expr` is `None` exactly
/// for graph inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: VertexId,
    pub name: String,
    pub bound: Bound,
    pub expr: Option<EinSumExpr>,
    pub inputs: Vec<VertexId>,
}

impl Vertex {
    pub fn is_input(&self) -> bool {
        self.expr.is_none()
    }
}

/// Validated, acyclic graph of einsum expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct EinGraph {
    vertices: Vec<Vertex>,
    outputs: Vec<VertexId>,
    order: Vec<VertexId>,
}

/// Kahn's algorithm with ties broken by ascending id. On failure returns one
/// cycle as a list of vertex ids.
pub fn topo_sort(inputs_of: &[Vec<usize>]) -> std::result::Result<Vec<usize>, Vec<usize>> {
    let n = inputs_of.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (v, ins) in inputs_of.iter().enumerate() {
        for &u in ins {
            indegree[v] += 1;
            consumers[u].push(v);
        }
    }
    let mut heap: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = heap.pop() {
        order.push(v);
        for &w in &consumers[v] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                heap.push(Reverse(w));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every remaining vertex has an unprocessed input; walking inputs must revisit.
    let start = (0..n).find(|&v| indegree[v] > 0).expect("cycle exists");
    let mut pos = BTreeMap::new();
    let mut path = Vec::new();
    let mut v = start;
    loop {
        if let Some(&p) = pos.get(&v) {
            let mut cycle: Vec<usize> = path[p..].to_vec();
            cycle.reverse();
            return Err(cycle);
        }
        pos.insert(v, path.len());
        path.push(v);
        v = *inputs_of[v]
            .iter()
            .find(|&&u| indegree[u] > 0)
            .expect("vertex on a cycle has a pending input");
    }
}

impl EinGraph {
    /// Builds a graph from vertices given in id order. Bounds of non-input
    /// vertices are inferred; a supplied bound that disagrees is an error.
    pub fn new(vertices: Vec<Vertex>, outputs: Vec<VertexId>) -> Result<Self> {
        for (i, v) in vertices.iter().enumerate() {
            if v.id != i {
                return Err(Error::Structure(format!(
                    "vertex `{}` has id {} at position {i}",
                    v.name, v.id
                )));
            }
            if let Some(expr) = &v.expr {
                if v.inputs.len() != expr.arity() {
                    return Err(Error::Structure(format!(
                        "vertex `{}` has {} inputs for an arity-{} expression",
                        v.name,
                        v.inputs.len(),
                        expr.arity()
                    )));
                }
            } else if !v.inputs.is_empty() {
                return Err(Error::Structure(format!(
                    "input vertex `{}` lists inputs",
                    v.name
                )));
            }
            if let Some(&bad) = v.inputs.iter().find(|&&u| u >= vertices.len()) {
                return Err(Error::Structure(format!(
                    "vertex `{}` refers to missing vertex {bad}",
                    v.name
                )));
            }
        }
        let inputs_of: Vec<Vec<usize>> = vertices.iter().map(|v| v.inputs.clone()).collect();
        let order = topo_sort(&inputs_of).map_err(|cycle| {
            Error::Cycle(cycle.iter().map(|&v| vertices[v].name.clone()).collect())
        })?;

        let mut vertices = vertices;
        for &v in &order {
            let Some(expr) = vertices[v].expr.clone() else {
                continue;
            };
            let bounds: Vec<Bound> = vertices[v]
                .inputs
                .iter()
                .map(|&u| vertices[u].bound.clone())
                .collect();
            let refs: Vec<&Bound> = bounds.iter().collect();
            let inferred = expr.output_bound(&refs).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("`{}`: {m}", vertices[v].name)),
                other => other,
            })?;
            let declared = &vertices[v].bound;
            if declared.rank() > 0 && *declared != inferred {
                return Err(Error::Shape(format!(
                    "`{}` declared with bound {declared} but inferred {inferred}",
                    vertices[v].name
                )));
            }
            vertices[v].bound = inferred;
        }
        for v in &vertices {
            if v.is_input() && v.bound.contains(&0) {
                return Err(Error::Shape(format!(
                    "input `{}` has a zero extent",
                    v.name
                )));
            }
        }
        if let Some(&bad) = outputs.iter().find(|&&o| o >= vertices.len()) {
            return Err(Error::Structure(format!(
                "output refers to missing vertex {bad}"
            )));
        }
        let mut graph = Self {
            vertices,
            outputs,
            order,
        };
        if graph.outputs.is_empty() {
            graph.outputs = (0..graph.vertices.len())
                .filter(|&v| graph.consumers(v).is_empty() && !graph.vertices[v].is_input())
                .collect();
        }
        Ok(graph)
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn vertex(&self, id: VertexId) -> &Vertex {
        &self.vertices[id]
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn outputs(&self) -> &[VertexId] {
        &self.outputs
    }

    pub fn is_output(&self, v: VertexId) -> bool {
        self.outputs.contains(&v)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Vertex> {
        self.vertices.iter().filter(|v| v.is_input())
    }

    pub fn by_name(&self, name: &str) -> Option<VertexId> {
        self.vertices.iter().position(|v| v.name == name)
    }

    /// Topological order, ties broken by ascending id.
    pub fn topo_order(&self) -> &[VertexId] {
        &self.order
    }

    /// `(consumer, slot)` pairs reading `v`, ordered by consumer id then slot.
    pub fn consumers(&self, v: VertexId) -> Vec<(VertexId, usize)> {
        let mut out = Vec::new();
        for w in &self.vertices {
            for (slot, &u) in w.inputs.iter().enumerate() {
                if u == v {
                    out.push((w.id, slot));
                }
            }
        }
        out
    }

    /// Bound of every operand of `v`, concatenated (`b_XY`).
    pub fn xy_bound(&self, v: VertexId) -> Result<Bound> {
        let vx = &self.vertices[v];
        let expr = vx
            .expr
            .as_ref()
            .ok_or_else(|| Error::Plan(format!("`{}` is an input", vx.name)))?;
        let bounds: Vec<&Bound> = vx.inputs.iter().map(|&u| &self.vertices[u].bound).collect();
        expr.xy_bound(&bounds)
    }

    /// Graph text that parses back to an identical graph.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            match &v.expr {
                None => s.push_str(&format!("input {} : {}\n", v.name, v.bound)),
                Some(e) => {
                    let names: Vec<&str> = v
                        .inputs
                        .iter()
                        .map(|&u| self.vertices[u].name.as_str())
                        .collect();
                    s.push_str(&e.render(&v.name, &names));
                    s.push('\n');
                }
            }
        }
        for &o in &self.outputs {
            s.push_str(&format!("output {}\n", self.vertices[o].name));
        }
        s
    }
}

/// Incremental graph construction; vertices may only reference earlier ones.
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    vertices: Vec<Vertex>,
    outputs: Vec<VertexId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if self.vertices.iter().any(|v| v.name == name) {
            return Err(Error::Structure(format!("tensor `{name}` defined twice")));
        }
        Ok(())
    }

    pub fn input(&mut self, name: &str, bound: impl Into<Bound>) -> Result<VertexId> {
        self.check_name(name)?;
        let id = self.vertices.len();
        self.vertices.push(Vertex {
            id,
            name: name.to_string(),
            bound: bound.into(),
            expr: None,
            inputs: Vec::new(),
        });
        Ok(id)
    }

    pub fn einsum(
        &mut self,
        name: &str,
        expr: EinSumExpr,
        inputs: &[VertexId],
    ) -> Result<VertexId> {
        self.check_name(name)?;
        if inputs.len() != expr.arity() {
            return Err(Error::Structure(format!(
                "`{name}` needs {} inputs, got {}",
                expr.arity(),
                inputs.len()
            )));
        }
        let mut bounds = Vec::new();
        for &u in inputs {
            let v = self
                .vertices
                .get(u)
                .ok_or_else(|| Error::UndeclaredInput(format!("#{u}")))?;
            bounds.push(v.bound.clone());
        }
        let refs: Vec<&Bound> = bounds.iter().collect();
        let bound = expr.output_bound(&refs)?;
        let id = self.vertices.len();
        self.vertices.push(Vertex {
            id,
            name: name.to_string(),
            bound,
            expr: Some(expr),
            inputs: inputs.to_vec(),
        });
        Ok(id)
    }

    pub fn rank(&self, v: VertexId) -> usize {
        self.vertices[v].bound.rank()
    }

    pub fn output(&mut self, v: VertexId) -> &mut Self {
        if !self.outputs.contains(&v) {
            self.outputs.push(v);
        }
        self
    }

    pub fn build(self) -> Result<EinGraph> {
        EinGraph::new(self.vertices, self.outputs)
    }
}

/// Appends a numerically stable softmax over the last dimension of `input`:
/// a max, a shifted difference, an exponential, a sum and a division. The
/// intermediates are named `{name}.max`, `{name}.shift`, `{name}.exp` and
/// `{name}.sum`; the result is `{name}`.
pub fn softmax_macro(b: &mut GraphBuilder, input: VertexId, name: &str) -> Result<VertexId> {
    let rank = b.rank(input);
    if rank == 0 {
        return Err(Error::InvalidExpr("softmax of a rank-0 tensor".into()));
    }
    let all: Vec<Label> = (0..rank).map(|i| format!("i{i}")).collect();
    let all_refs: Vec<&str> = all.iter().map(String::as_str).collect();
    let batch = &all_refs[..rank - 1];

    let max = b.einsum(
        &format!("{name}.max"),
        EinSumExpr::unary(batch, &all_refs, MapOp::Identity, Some(AggOp::Max))?,
        &[input],
    )?;
    let shift = b.einsum(
        &format!("{name}.shift"),
        EinSumExpr::binary(&all_refs, &all_refs, batch, JoinOp::Sub, None)?,
        &[input, max],
    )?;
    let exp = b.einsum(
        &format!("{name}.exp"),
        EinSumExpr::unary(&all_refs, &all_refs, MapOp::Exp, None)?,
        &[shift],
    )?;
    let sum = b.einsum(
        &format!("{name}.sum"),
        EinSumExpr::unary(batch, &all_refs, MapOp::Identity, Some(AggOp::Sum))?,
        &[exp],
    )?;
    b.einsum(
        name,
        EinSumExpr::binary(&all_refs, &all_refs, batch, JoinOp::Div, None)?,
        &[exp, sum],
    )
}

//! Fine-grained dataflow graph. Every expression of a TaskGraph becomes one
//! join-kernel vertex per join tuple; each edge out of an expression gets a
//! set of refinement vertices, one per consumer chunk, that fuse aggregation
//! with repartitioning. Graph inputs become one vertex per stored chunk.
//!
//! Vertex ids are assigned in creation order and every dependency precedes
//! its consumer, so id order is a topological order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::einsum::{project, AggOp, VertexId};
use crate::error::{Error, Result};
use crate::optimizer::TaskGraph;
use crate::relation::KernelSpec;
use crate::tensor::{all_indices, Bound, Partition};

pub type ExecId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecKind {
    InputChunk,
    JoinKernel,
    Refinement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecVertex {
    pub id: ExecId,
    pub kind: ExecKind,
    /// Graph vertex whose tensor coordinates `offset` refers to: the input for
    /// input chunks, the expression for join kernels, the producer for
    /// refinements.
    pub tensor: VertexId,
    pub key: Vec<usize>,
    pub offset: Vec<usize>,
    pub extent: Bound,
    pub fp: u64,
    pub sz: u64,
    pub deps: Vec<ExecId>,
    /// Refinement set this vertex belongs to (refinements only).
    pub edge: Option<usize>,
}

impl ExecVertex {
    fn overlaps(&self, offset: &[usize], extent: &[usize]) -> Option<u64> {
        let mut vol = 1u64;
        for d in 0..offset.len() {
            let lo = self.offset[d].max(offset[d]);
            let hi = (self.offset[d] + self.extent[d]).min(offset[d] + extent[d]);
            if hi <= lo {
                return None;
            }
            vol *= (hi - lo) as u64;
        }
        Some(vol)
    }
}

/// Where a refinement set delivers its chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTarget {
    Consumer { vertex: VertexId, slot: usize },
    Output,
}

/// Refinement vertices forming one consumer-side relation of a producer.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRefinements {
    pub producer: VertexId,
    pub target: EdgeTarget,
    pub partition: Partition,
    /// Combine for overlapping contributions; `None` when nothing overlaps.
    pub agg: Option<AggOp>,
    /// In lexicographic key order.
    pub refinements: Vec<ExecId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputGroup {
    pub vertex: VertexId,
    pub partition: Partition,
    /// In lexicographic key order.
    pub chunks: Vec<ExecId>,
}

/// The vertex sets of one expression: its join kernels and the refinements
/// on its out-edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EinsumGroup {
    pub vertex: VertexId,
    pub name: String,
    pub spec: KernelSpec,
    /// Join kernels in lexicographic key order.
    pub joins: Vec<ExecId>,
    /// Refinement sets (indices into [`ExecGraph::edges`]) leaving this expression.
    pub out_edges: Vec<usize>,
    /// Refinement sets repartitioning graph inputs for this expression.
    pub input_edges: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecGraph {
    vertices: Vec<ExecVertex>,
    consumers: Vec<Vec<ExecId>>,
    inputs: Vec<InputGroup>,
    einsums: Vec<EinsumGroup>,
    edges: Vec<EdgeRefinements>,
}

impl ExecGraph {
    pub fn vertices(&self) -> &[ExecVertex] {
        &self.vertices
    }

    pub fn vertex(&self, id: ExecId) -> &ExecVertex {
        &self.vertices[id]
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn inputs(&self) -> &[InputGroup] {
        &self.inputs
    }

    /// Expression groups in topological order.
    pub fn einsums(&self) -> &[EinsumGroup] {
        &self.einsums
    }

    pub fn einsum(&self, v: VertexId) -> Option<&EinsumGroup> {
        self.einsums.iter().find(|g| g.vertex == v)
    }

    pub fn edges(&self) -> &[EdgeRefinements] {
        &self.edges
    }

    /// Refinement sets that deliver graph outputs.
    pub fn output_edges(&self) -> impl Iterator<Item = (usize, &EdgeRefinements)> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.target == EdgeTarget::Output)
    }

    /// Distinct vertices that list `id` as a dependency, ascending.
    pub fn consumers_of(&self, id: ExecId) -> &[ExecId] {
        &self.consumers[id]
    }

    /// `E[u, v]`.
    pub fn has_edge(&self, u: ExecId, v: ExecId) -> bool {
        self.vertices[v].deps.contains(&u)
    }

    /// All refinement vertices of an expression's out-edges (`V2`).
    pub fn refinements_of(&self, g: &EinsumGroup) -> Vec<ExecId> {
        g.out_edges
            .iter()
            .flat_map(|&e| self.edges[e].refinements.iter().copied())
            .collect()
    }
}

/// `(fp, sz)` of one vertex.
pub fn vertex_stats(v: &ExecVertex) -> (u64, u64) {
    (v.fp, v.sz)
}

struct Builder {
    vertices: Vec<ExecVertex>,
    edges: Vec<EdgeRefinements>,
}

impl Builder {
    fn push(&mut self, mut v: ExecVertex) -> ExecId {
        v.id = self.vertices.len();
        self.vertices.push(v);
        self.vertices.len() - 1
    }

    /// One refinement per chunk of `partition` over `bound`, each depending
    /// on the `sources` (in order) whose regions intersect it.
    fn refine(
        &mut self,
        producer: VertexId,
        target: EdgeTarget,
        partition: &Partition,
        bound: &Bound,
        agg: Option<AggOp>,
        sources: &[ExecId],
    ) -> Result<usize> {
        let c = partition.chunk_bound(bound)?;
        let edge = self.edges.len();
        let mut ids = Vec::new();
        for q in all_indices(partition) {
            let offset: Vec<usize> = q.iter().zip(c.iter()).map(|(k, c)| k * c).collect();
            let mut deps = Vec::new();
            // overlap volume and multiplicity per distinct source region
            let mut regions: BTreeMap<Vec<usize>, (u64, u64)> = BTreeMap::new();
            for &s in sources {
                let sv = &self.vertices[s];
                if let Some(vol) = sv.overlaps(&offset, &c) {
                    deps.push(s);
                    let e = regions.entry(sv.offset.clone()).or_insert((vol, 0));
                    e.1 += 1;
                }
            }
            if deps.is_empty() {
                return Err(Error::Consistency(format!(
                    "refinement chunk {q:?} has no sources"
                )));
            }
            let fp = regions
                .values()
                .map(|&(vol, k)| k.saturating_sub(1).max(1) * vol)
                .sum();
            let id = self.push(ExecVertex {
                id: 0,
                kind: ExecKind::Refinement,
                tensor: producer,
                key: q,
                offset,
                extent: c.clone(),
                fp,
                sz: c.volume() as u64,
                deps,
                edge: Some(edge),
            });
            ids.push(id);
        }
        self.edges.push(EdgeRefinements {
            producer,
            target,
            partition: partition.clone(),
            agg,
            refinements: ids,
        });
        Ok(edge)
    }
}

fn key_map(b: &Builder, ids: &[ExecId]) -> BTreeMap<Vec<usize>, ExecId> {
    ids.iter()
        .map(|&i| (b.vertices[i].key.clone(), i))
        .collect()
}

/// Expands every vertex of a labeled graph into kernel calls and refinements.
pub fn explode(tg: &TaskGraph) -> Result<ExecGraph> {
    let graph = tg.graph();
    let mut b = Builder {
        vertices: Vec::new(),
        edges: Vec::new(),
    };
    let mut inputs = Vec::new();
    let mut einsums = Vec::new();
    // chunk sources per graph vertex: input chunks or join kernels
    let mut produced: BTreeMap<VertexId, Vec<ExecId>> = BTreeMap::new();
    // refinement set feeding each (consumer, slot)
    let mut feeds: BTreeMap<(VertexId, usize), usize> = BTreeMap::new();

    for &v in graph.topo_order() {
        let vx = graph.vertex(v);
        let plan = tg.plan(v);
        let Some(expr) = &vx.expr else {
            let part = &plan.out_partition;
            let c = part.chunk_bound(&vx.bound)?;
            let chunks: Vec<ExecId> = all_indices(part)
                .into_iter()
                .map(|k| {
                    let offset = k.iter().zip(c.iter()).map(|(k, c)| k * c).collect();
                    b.push(ExecVertex {
                        id: 0,
                        kind: ExecKind::InputChunk,
                        tensor: v,
                        key: k,
                        offset,
                        extent: c.clone(),
                        fp: 0,
                        sz: c.volume() as u64,
                        deps: Vec::new(),
                        edge: None,
                    })
                })
                .collect();
            produced.insert(v, chunks.clone());
            inputs.push(InputGroup {
                vertex: v,
                partition: part.clone(),
                chunks,
            });
            continue;
        };
        let d = plan
            .d
            .as_ref()
            .ok_or_else(|| Error::Plan(format!("`{}` has no partition vector", vx.name)))?;
        let b_xy = graph.xy_bound(v)?;
        let spec = KernelSpec::new(expr, &b_xy, d)?;
        let lxy = expr.xy_labels();
        let distinct = spec.distinct_labels().to_vec();

        // operand chunk sources, keyed by the chunk key in the required partition
        let mut input_edges = Vec::new();
        let mut slot_sources: Vec<BTreeMap<Vec<usize>, ExecId>> = Vec::new();
        for (slot, &u) in vx.inputs.iter().enumerate() {
            let need = tg.required_partition(v, slot);
            let sources = if let Some(&e) = feeds.get(&(v, slot)) {
                key_map(&b, &b.edges[e].refinements)
            } else if tg.plan(u).out_partition == need {
                key_map(&b, &produced[&u])
            } else {
                let e = b.refine(
                    u,
                    EdgeTarget::Consumer { vertex: v, slot },
                    &need,
                    &graph.vertex(u).bound,
                    None,
                    &produced[&u],
                )?;
                input_edges.push(e);
                key_map(&b, &b.edges[e].refinements)
            };
            slot_sources.push(sources);
        }

        let part_u = Partition::new(project(d, &distinct, &lxy)?);
        let cz = spec.out_bound();
        let mut joins = Vec::new();
        for k in all_indices(&part_u) {
            let mut deps = Vec::new();
            for (slot, sources) in slot_sources.iter().enumerate() {
                let kk = project(&k, spec.input_labels(slot), &distinct)?;
                deps.push(*sources.get(&kk).ok_or(Error::IncompleteRelation(kk))?);
            }
            let kz = project(&k, expr.out_labels(), &distinct)?;
            let offset = kz.iter().zip(cz.iter()).map(|(k, c)| k * c).collect();
            joins.push(b.push(ExecVertex {
                id: 0,
                kind: ExecKind::JoinKernel,
                tensor: v,
                key: k,
                offset,
                extent: cz.clone(),
                fp: spec.flops(),
                sz: cz.volume() as u64,
                deps,
                edge: None,
            }));
        }
        produced.insert(v, joins.clone());

        let mut out_edges = Vec::new();
        let mut targets: Vec<(EdgeTarget, Partition)> = graph
            .consumers(v)
            .into_iter()
            .map(|(w, slot)| {
                (
                    EdgeTarget::Consumer { vertex: w, slot },
                    tg.required_partition(w, slot),
                )
            })
            .collect();
        if graph.is_output(v) {
            targets.push((EdgeTarget::Output, plan.out_partition.clone()));
        }
        for (target, part) in targets {
            let e = b.refine(v, target, &part, &vx.bound, expr.agg(), &joins)?;
            if let EdgeTarget::Consumer { vertex, slot } = target {
                feeds.insert((vertex, slot), e);
            }
            out_edges.push(e);
        }
        einsums.push(EinsumGroup {
            vertex: v,
            name: vx.name.clone(),
            spec,
            joins,
            out_edges,
            input_edges,
        });
    }

    let mut consumers = vec![BTreeSet::new(); b.vertices.len()];
    for v in &b.vertices {
        for &u in &v.deps {
            consumers[u].insert(v.id);
        }
    }
    Ok(ExecGraph {
        vertices: b.vertices,
        consumers: consumers
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect(),
        inputs,
        einsums,
        edges: b.edges,
    })
}

/// One connected component of the lineage between join tuples and
/// consumer tuples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinGroup {
    pub joins: Vec<ExecId>,
    pub refinements: Vec<ExecId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinGroupPartition {
    pub groups: Vec<JoinGroup>,
}

/// Connected components of the bipartite graph linking each join in `v1` to
/// the refinements in `v2` that depend on it. Groups are ordered by their
/// smallest join id; members ascend.
pub fn group_lineage(exec: &ExecGraph, v1: &[ExecId], v2: &[ExecId]) -> JoinGroupPartition {
    let n1 = v1.len();
    let mut parent: Vec<usize> = (0..n1 + v2.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let pos1: BTreeMap<ExecId, usize> = v1.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    for (j, &r) in v2.iter().enumerate() {
        for dep in &exec.vertex(r).deps {
            if let Some(&i) = pos1.get(dep) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, n1 + j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut comps: BTreeMap<usize, JoinGroup> = BTreeMap::new();
    for i in 0..n1 + v2.len() {
        let root = find(&mut parent, i);
        let g = comps.entry(root).or_insert(JoinGroup {
            joins: Vec::new(),
            refinements: Vec::new(),
        });
        if i < n1 {
            g.joins.push(v1[i]);
        } else {
            g.refinements.push(v2[i - n1]);
        }
    }
    let mut groups: Vec<JoinGroup> = comps.into_values().collect();
    for g in &mut groups {
        g.joins.sort_unstable();
        g.refinements.sort_unstable();
    }
    groups.sort_by_key(|g| (g.joins.first().copied(), g.refinements.first().copied()));
    JoinGroupPartition { groups }
}

/// Join groups between producer `v` and the refinements feeding `consumer`.
pub fn compute_join_groups(
    exec: &ExecGraph,
    v: VertexId,
    consumer: EdgeTarget,
) -> Result<JoinGroupPartition> {
    let g = exec
        .einsum(v)
        .ok_or_else(|| Error::Plan(format!("vertex {v} is not an expression")))?;
    let e = g
        .out_edges
        .iter()
        .map(|&e| &exec.edges()[e])
        .find(|e| e.target == consumer)
        .ok_or_else(|| Error::Plan(format!("vertex {v} does not feed {consumer:?}")))?;
    Ok(group_lineage(exec, &g.joins, &e.refinements))
}

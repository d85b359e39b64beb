//! Greedy placement of ExecGraph vertices on `L` machines, minimizing the
//! most expensive site: `alpha * fp` of the work placed there plus the
//! values crossing machine boundaries in or out of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::execgraph::{group_lineage, EinsumGroup, ExecGraph, ExecId};
use crate::par;

pub const DEFAULT_ALPHA: f64 = 0.01;

/// Machine of every vertex, `None` while unplaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub machines: usize,
    pub alpha: f64,
    pub assignment: Vec<Option<usize>>,
}

impl Placement {
    pub fn empty(n: usize, machines: usize, alpha: f64) -> Self {
        Placement {
            machines,
            alpha,
            assignment: vec![None; n],
        }
    }

    pub fn machine(&self, v: ExecId) -> Option<usize> {
        self.assignment[v]
    }

    pub fn is_complete(&self) -> bool {
        self.assignment.iter().all(Option::is_some)
    }

    /// Machine of every vertex; errors if any vertex is unplaced.
    pub fn complete(&self) -> Result<Vec<usize>> {
        self.assignment
            .iter()
            .enumerate()
            .map(|(v, m)| m.ok_or_else(|| Error::Plan(format!("exec vertex {v} is unplaced"))))
            .collect()
    }
}

/// Work and boundary traffic charged to one machine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteLoad {
    pub fp: u64,
    pub traffic: u64,
}

impl SiteLoad {
    pub fn cost(&self, alpha: f64) -> f64 {
        alpha * self.fp as f64 + self.traffic as f64
    }
}

/// Per-machine loads of a (possibly partial) placement. Edges to unplaced
/// vertices are not charged.
pub fn site_loads(p: &Placement, exec: &ExecGraph) -> Vec<SiteLoad> {
    let mut loads = vec![SiteLoad::default(); p.machines];
    for v in exec.vertices() {
        let Some(l) = p.machine(v.id) else { continue };
        loads[l].fp += v.fp;
        for &w in exec.consumers_of(v.id) {
            if matches!(p.machine(w), Some(m) if m != l) {
                loads[l].traffic += v.sz;
            }
        }
        let mut deps = v.deps.clone();
        deps.sort_unstable();
        deps.dedup();
        for u in deps {
            if matches!(p.machine(u), Some(m) if m != l) {
                loads[l].traffic += exec.vertex(u).sz;
            }
        }
    }
    loads
}

/// Cost of the most expensive site.
pub fn placement_cost(p: &Placement, exec: &ExecGraph) -> f64 {
    site_loads(p, exec)
        .iter()
        .map(|s| s.cost(p.alpha))
        .fold(0.0, f64::max)
}

/// Candidate machine vectors for `num_joins` joins: for each power-of-two
/// width, every aligned block of `width` machines, joins dealt round-robin
/// across the block. Blocks that would run past `l` are skipped.
pub fn enumerate_placements(l: usize, num_joins: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut width = 1;
    while width <= l {
        if width > num_joins {
            break;
        }
        let mut start = 0;
        while start + width <= l {
            out.push((0..num_joins).map(|j| start + j % width).collect());
            start += width;
        }
        width *= 2;
    }
    out
}

/// A partial placement with incrementally maintained site loads.
#[derive(Debug, Clone)]
pub struct PlacementState<'a> {
    exec: &'a ExecGraph,
    placement: Placement,
    loads: Vec<SiteLoad>,
}

impl<'a> PlacementState<'a> {
    pub fn new(exec: &'a ExecGraph, machines: usize, alpha: f64) -> Self {
        PlacementState {
            exec,
            placement: Placement::empty(exec.len(), machines, alpha),
            loads: vec![SiteLoad::default(); machines],
        }
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn into_placement(self) -> Placement {
        self.placement
    }

    pub fn cost(&self) -> f64 {
        let a = self.placement.alpha;
        self.loads.iter().map(|s| s.cost(a)).fold(0.0, f64::max)
    }

    /// Places `v` on `l`, charging both ends of every edge to an already
    /// placed neighbour on another machine.
    pub fn place(&mut self, v: ExecId, l: usize) {
        debug_assert!(
            self.placement.assignment[v].is_none(),
            "vertex {v} placed twice"
        );
        let vx = self.exec.vertex(v);
        self.loads[l].fp += vx.fp;
        let mut deps = vx.deps.clone();
        deps.sort_unstable();
        deps.dedup();
        for u in deps {
            if let Some(m) = self.placement.assignment[u] {
                if m != l {
                    let sz = self.exec.vertex(u).sz;
                    self.loads[l].traffic += sz;
                    self.loads[m].traffic += sz;
                }
            }
        }
        for &w in self.exec.consumers_of(v) {
            if let Some(m) = self.placement.assignment[w] {
                if m != l {
                    self.loads[l].traffic += vx.sz;
                    self.loads[m].traffic += vx.sz;
                }
            }
        }
        self.placement.assignment[v] = Some(l);
    }

    /// Machines hosting at least one dependency of `v`, ascending; every
    /// machine when `v` has no placed dependency.
    fn dep_sites(&self, v: ExecId) -> Vec<usize> {
        let mut sites: Vec<usize> = self
            .exec
            .vertex(v)
            .deps
            .iter()
            .filter_map(|&u| self.placement.assignment[u])
            .collect();
        sites.sort_unstable();
        sites.dedup();
        if sites.is_empty() {
            (0..self.placement.machines).collect()
        } else {
            sites
        }
    }

    /// Puts `v` on the cheapest machine among those hosting one of its
    /// dependencies, ties to the lowest id.
    pub fn place_greedy(&mut self, v: ExecId) {
        let mut best: Option<(f64, usize)> = None;
        for l in self.dep_sites(v) {
            let mut trial = self.clone();
            trial.place(v, l);
            let c = trial.cost();
            if best.is_none_or(|(b, _)| c < b) {
                best = Some((c, l));
            }
        }
        let (_, l) = best.expect("at least one machine");
        self.place(v, l);
    }
}

/// Tries every enumerated assignment of the joins `g1`, greedily placing the
/// refinements `g2` after each, and keeps the cheapest (first on ties).
pub fn do_assign<'a>(
    state: &PlacementState<'a>,
    g1: &[ExecId],
    g2: &[ExecId],
) -> PlacementState<'a> {
    let candidates = enumerate_placements(state.placement.machines, g1.len().max(1));
    let trials = par::map(&candidates, |assign| {
        let mut s = state.clone();
        for (&v, &l) in g1.iter().zip(assign) {
            s.place(v, l);
        }
        for &r in g2 {
            s.place_greedy(r);
        }
        s
    });
    let mut best: Option<PlacementState<'a>> = None;
    for t in trials {
        if best.as_ref().is_none_or(|b| t.cost() < b.cost()) {
            best = Some(t);
        }
    }
    best.expect("at least one candidate")
}

/// Places one expression: its joins and out-edge refinements, one join
/// group at a time.
pub fn handle_new_einsum<'a>(state: PlacementState<'a>, g: &EinsumGroup) -> PlacementState<'a> {
    let exec = state.exec;
    let groups = group_lineage(exec, &g.joins, &exec.refinements_of(g));
    let mut state = state;
    for grp in &groups.groups {
        state = do_assign(&state, &grp.joins, &grp.refinements);
    }
    state
}

/// Input chunks round-robin (lexicographic key order, restarting at machine
/// 0 for each input), then expressions in topological order.
pub fn place_all(exec: &ExecGraph, machines: usize, alpha: f64) -> Result<Placement> {
    if machines == 0 {
        return Err(Error::Plan("need at least one machine".into()));
    }
    let mut state = PlacementState::new(exec, machines, alpha);
    for inp in exec.inputs() {
        for (i, &c) in inp.chunks.iter().enumerate() {
            state.place(c, i % machines);
        }
    }
    for g in exec.einsums() {
        for &e in &g.input_edges {
            for &r in &exec.edges()[e].refinements {
                state.place_greedy(r);
            }
        }
        state = handle_new_einsum(state, g);
    }
    let p = state.into_placement();
    p.complete()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::einsum::parse_eingraph;
    use crate::execgraph::{explode, ExecKind};
    use crate::optimizer::optimize_dag;

    fn exec_for(text: &str, p: u64) -> ExecGraph {
        explode(&optimize_dag(&parse_eingraph(text).unwrap(), p).unwrap()).unwrap()
    }

    const MM: &str = "input X : [8,8]\ninput Y : [8,8]\nZ[i,k] = sum[j] mul(X[i,j], Y[j,k])\n";

    #[test]
    fn aligned_block_enumeration() {
        let got = enumerate_placements(4, 8);
        let want: Vec<Vec<usize>> = [
            "00000000", "11111111", "22222222", "33333333", "01010101", "23232323", "01230123",
        ]
        .iter()
        .map(|s| s.bytes().map(|b| (b - b'0') as usize).collect())
        .collect();
        assert_eq!(got, want);
        assert_eq!(enumerate_placements(1, 5), vec![vec![0; 5]]);
        assert_eq!(enumerate_placements(2, 1), vec![vec![0], vec![1]]);
        for l in [1, 2, 4, 8, 16] {
            assert!(enumerate_placements(l, 64).len() < 2 * l);
        }
        assert_eq!(enumerate_placements(3, 4).len(), 4);
    }

    #[test]
    fn single_machine_costs_only_work() {
        let ex = exec_for(MM, 8);
        let p = place_all(&ex, 1, 0.5).unwrap();
        let fp: u64 = ex.vertices().iter().map(|v| v.fp).sum();
        assert_eq!(placement_cost(&p, &ex), 0.5 * fp as f64);
    }

    #[test]
    fn cross_edge_charged_to_both_sites() {
        let ex = exec_for("input X : [2]\nY[i] = map exp(X[i])\n", 1);
        // input chunk, join, identity refinement
        assert_eq!(ex.len(), 3);
        let mut p = Placement::empty(3, 2, 0.0);
        p.assignment = vec![Some(0), Some(1), Some(1)];
        let loads = site_loads(&p, &ex);
        assert_eq!(loads[0].traffic, 2);
        assert_eq!(loads[1].traffic, 2);
        assert_eq!(placement_cost(&p, &ex), 2.0);
    }

    #[test]
    fn incremental_and_direct_costs_agree() {
        let ex = exec_for(MM, 16);
        for l in [1, 2, 4] {
            let p = place_all(&ex, l, DEFAULT_ALPHA).unwrap();
            let mut state = PlacementState::new(&ex, l, DEFAULT_ALPHA);
            // place in reverse order: a different summation order
            for v in (0..ex.len()).rev() {
                state.place(v, p.machine(v).unwrap());
            }
            assert_eq!(state.cost(), placement_cost(&p, &ex));
        }
    }

    #[test]
    fn inputs_round_robin() {
        let ex = exec_for(MM, 4);
        let p = place_all(&ex, 4, DEFAULT_ALPHA).unwrap();
        for inp in ex.inputs() {
            for (i, &c) in inp.chunks.iter().enumerate() {
                assert_eq!(p.machine(c), Some(i % 4));
            }
        }
    }

    #[test]
    fn every_vertex_placed_once() {
        let ex = explode(&optimize_dag(&crate::bundled::graph("attention").unwrap(), 8).unwrap())
            .unwrap();
        let p = place_all(&ex, 4, DEFAULT_ALPHA).unwrap();
        assert!(p.is_complete());
        assert!(p.assignment.iter().all(|m| m.unwrap() < 4));
    }

    #[test]
    fn refinements_sit_with_a_dependency() {
        let ex = exec_for(MM, 8);
        let p = place_all(&ex, 4, DEFAULT_ALPHA).unwrap();
        for v in ex
            .vertices()
            .iter()
            .filter(|v| v.kind == ExecKind::Refinement)
        {
            let m = p.machine(v.id);
            assert!(v.deps.iter().any(|&u| p.machine(u) == m));
        }
    }

    #[test]
    fn first_minimal_candidate_wins_ties() {
        // 2 symmetric joins and no refinements: all candidates tie except by
        // traffic from inputs; the state starts empty so all cost the same.
        let ex = exec_for("input X : [4]\nY[i] = map exp(X[i])\n", 2);
        let g = &ex.einsums()[0];
        let state = PlacementState::new(&ex, 2, 0.0);
        let out = do_assign(&state, &g.joins, &[]);
        // candidate <00> is first among the minimal ones
        assert_eq!(out.placement().machine(g.joins[0]), Some(0));
        assert_eq!(out.placement().machine(g.joins[1]), Some(0));
    }

    #[test]
    fn uniform_joins_spread_under_positive_alpha() {
        // 8 independent joins, no edges charged: only work matters
        let ex = exec_for("input X : [8]\nY[i] = map exp(X[i])\n", 8);
        let g = &ex.einsums()[0];
        let state = PlacementState::new(&ex, 4, 1.0);
        let out = do_assign(&state, &g.joins, &[]);
        let got: Vec<usize> = g
            .joins
            .iter()
            .map(|&j| out.placement().machine(j).unwrap())
            .collect();
        assert_eq!(got, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn group_placement_no_worse_than_one_machine() {
        let text = "input X : [8,8]\ninput Y : [8,8]\ninput W : [8,8]\n\
                    Z[i,k] = sum[j] mul(X[i,j], Y[j,k])\nU[i,k] = sum[j] mul(Z[i,j], W[j,k])\n";
        let ex = exec_for(text, 16);
        let p = place_all(&ex, 2, DEFAULT_ALPHA).unwrap();
        let mut one = Placement::empty(ex.len(), 2, DEFAULT_ALPHA);
        one.assignment = vec![Some(0); ex.len()];
        // compare against the all-on-one-machine baseline with the same input layout
        for inp in ex.inputs() {
            for (i, &c) in inp.chunks.iter().enumerate() {
                one.assignment[c] = Some(i % 2);
            }
        }
        assert!(placement_cost(&p, &ex) <= placement_cost(&one, &ex));
    }

    #[test]
    fn attention_balance() {
        let ex = explode(&optimize_dag(&crate::bundled::graph("attention").unwrap(), 8).unwrap())
            .unwrap();
        let p = place_all(&ex, 4, DEFAULT_ALPHA).unwrap();
        let loads = site_loads(&p, &ex);
        let max = loads.iter().map(|s| s.fp).max().unwrap() as f64;
        let mean = loads.iter().map(|s| s.fp).sum::<u64>() as f64 / 4.0;
        assert!(max <= 2.0 * mean, "max {max} mean {mean}");
    }
}

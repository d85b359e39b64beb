//! Simulated cluster. Each machine owns the vertices placed on it, runs them
//! once their inputs are resident, and pushes the pieces other machines need.
//! A piece is the whole output of a vertex, or for refinements only the
//! block overlapping the consumer chunk; each piece crosses to a given
//! machine at most once.
//!
//! Refinements fold their dependencies in the fixed order of their dependency
//! list (lexicographic producer keys), consuming whatever prefix has arrived.
//! Results therefore do not depend on message interleaving, and the
//! round-based and threaded schedulers produce identical tensors.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::cost::{cost_agg, cost_join, cost_repart, CostUnits};
use crate::einsum::{AggOp, VertexId};
use crate::error::{Error, Result};
use crate::execgraph::{EdgeTarget, ExecGraph, ExecId, ExecKind};
use crate::optimizer::TaskGraph;
use crate::placement::Placement;
use crate::relation::{assemble, KernelSpec, TensorRelation};
use crate::tensor::{for_each_index, Bound, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// All machines stepped in turn; messages delivered the next round.
    #[default]
    Sequential,
    /// One thread per machine exchanging messages over channels.
    Concurrent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    /// Every kernel and refinement output is rounded through `f32`.
    F32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub scheduler: Scheduler,
    pub precision: Precision,
    /// Test hook: perturbs the first join kernel of this expression.
    pub corrupt: Option<VertexId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineReport {
    pub id: usize,
    pub fp: u64,
    pub sent: u64,
    pub received: u64,
    pub executed: u64,
}

/// Measured transfers, by what received them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    /// Operand chunks shipped to the join kernels of an expression.
    Join { vertex: VertexId },
    /// Pieces shipped to the refinements of one refinement set.
    Edge { edge: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub per_machine: Vec<MachineReport>,
    pub total_transferred: u64,
    /// Largest `alpha * fp + sent + received` over machines.
    pub max_site_cost: f64,
    /// Scheduling rounds; only meaningful for the sequential scheduler.
    pub rounds: Option<u64>,
    pub transfers: BTreeMap<Bucket, u64>,
    /// Assembled graph outputs by vertex id.
    pub outputs: BTreeMap<VertexId, Tensor>,
}

/// `(destination, key, offset, extent)` of a piece to push.
type Outgoing = (usize, PieceKey, Vec<usize>, Bound);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct PieceKey {
    src: ExecId,
    /// Index of the first consumer (smallest id) needing this piece on the
    /// destination; fixes the piece's region.
    region_of: ExecId,
}

/// Static routing shared by all machines.
struct Routes<'a> {
    exec: &'a ExecGraph,
    machine: Vec<usize>,
    specs: BTreeMap<VertexId, &'a KernelSpec>,
    names: BTreeMap<VertexId, String>,
    /// Per vertex, the piece key for each dependency (None when local).
    needs: Vec<Vec<Option<PieceKey>>>,
    /// Per vertex, the pieces to push.
    sends: Vec<Vec<Outgoing>>,
    /// Transfer accounting: size and bucket of every piece per destination.
    ledger: BTreeMap<(usize, PieceKey), (u64, Bucket)>,
    agg: Vec<Option<AggOp>>,
    cfg: RunConfig,
}

fn piece_region(exec: &ExecGraph, u: ExecId, v: ExecId) -> (Vec<usize>, Bound) {
    let (uv, vv) = (exec.vertex(u), exec.vertex(v));
    if vv.kind != ExecKind::Refinement {
        return (uv.offset.clone(), uv.extent.clone());
    }
    let mut off = Vec::with_capacity(uv.offset.len());
    let mut ext = Vec::with_capacity(uv.offset.len());
    for d in 0..uv.offset.len() {
        let lo = uv.offset[d].max(vv.offset[d]);
        let hi = (uv.offset[d] + uv.extent[d]).min(vv.offset[d] + vv.extent[d]);
        off.push(lo);
        ext.push(hi - lo);
    }
    (off, Bound::new(ext))
}

fn bucket_of(exec: &ExecGraph, v: ExecId) -> Bucket {
    let vx = exec.vertex(v);
    match vx.edge {
        Some(edge) => Bucket::Edge { edge },
        None => Bucket::Join { vertex: vx.tensor },
    }
}

impl<'a> Routes<'a> {
    fn new(exec: &'a ExecGraph, placement: &Placement, cfg: RunConfig) -> Result<Self> {
        let machine = placement.complete()?;
        if machine.len() != exec.len() {
            return Err(Error::Plan(format!(
                "placement covers {} vertices, graph has {}",
                machine.len(),
                exec.len()
            )));
        }
        if let Some(&m) = machine.iter().find(|&&m| m >= placement.machines) {
            return Err(Error::Plan(format!("machine {m} out of range")));
        }
        let specs = exec.einsums().iter().map(|g| (g.vertex, &g.spec)).collect();
        let names = exec
            .einsums()
            .iter()
            .map(|g| (g.vertex, g.name.clone()))
            .collect();
        let mut needs = vec![Vec::new(); exec.len()];
        let mut sends: Vec<Vec<Outgoing>> = vec![Vec::new(); exec.len()];
        let mut ledger = BTreeMap::new();
        // (dest, src, region) -> key, so identical pieces are shipped once
        let mut seen: BTreeMap<(usize, ExecId, Vec<usize>, Bound), PieceKey> = BTreeMap::new();
        for v in exec.vertices() {
            let lv = machine[v.id];
            for &u in &v.deps {
                if machine[u] == lv {
                    needs[v.id].push(None);
                    continue;
                }
                let (off, ext) = piece_region(exec, u, v.id);
                let key = *seen
                    .entry((lv, u, off.clone(), ext.clone()))
                    .or_insert_with(|| {
                        let key = PieceKey {
                            src: u,
                            region_of: v.id,
                        };
                        sends[u].push((lv, key, off, ext.clone()));
                        ledger.insert((lv, key), (ext.volume() as u64, bucket_of(exec, v.id)));
                        key
                    });
                needs[v.id].push(Some(key));
            }
        }
        let agg = exec
            .vertices()
            .iter()
            .map(|v| v.edge.and_then(|e| exec.edges()[e].agg))
            .collect();
        Ok(Routes {
            exec,
            machine,
            specs,
            names,
            needs,
            sends,
            ledger,
            agg,
            cfg,
        })
    }
}

struct Partial {
    acc: Tensor,
    set: Vec<bool>,
    folded: usize,
}

enum Msg {
    Piece(PieceKey, Tensor),
    Abort,
}

struct Machine<'r, 'a> {
    id: usize,
    routes: &'r Routes<'a>,
    outputs: BTreeMap<ExecId, Tensor>,
    cache: BTreeMap<PieceKey, Tensor>,
    pending: BTreeSet<ExecId>,
    partial: BTreeMap<ExecId, Partial>,
    report: MachineReport,
}

impl<'r, 'a> Machine<'r, 'a> {
    fn new(id: usize, routes: &'r Routes<'a>, inputs: &BTreeMap<ExecId, Tensor>) -> Self {
        let mut outputs = BTreeMap::new();
        let mut pending = BTreeSet::new();
        for v in routes.exec.vertices() {
            if routes.machine[v.id] != id {
                continue;
            }
            if v.kind == ExecKind::InputChunk {
                outputs.insert(v.id, inputs[&v.id].clone());
            }
            pending.insert(v.id);
        }
        Machine {
            id,
            routes,
            outputs,
            cache: BTreeMap::new(),
            pending,
            partial: BTreeMap::new(),
            report: MachineReport {
                id,
                fp: 0,
                sent: 0,
                received: 0,
                executed: 0,
            },
        }
    }

    fn done(&self) -> bool {
        self.pending.is_empty()
    }

    fn deliver(&mut self, key: PieceKey, t: Tensor) {
        self.report.received += t.len() as u64;
        self.cache.insert(key, t);
    }

    /// The piece of dependency `i` of `v`, if resident.
    fn piece(&self, v: ExecId, i: usize) -> Option<Tensor> {
        let exec = self.routes.exec;
        let u = exec.vertex(v).deps[i];
        match self.routes.needs[v][i] {
            Some(key) => self.cache.get(&key).cloned(),
            None => {
                let out = self.outputs.get(&u)?;
                let (off, ext) = piece_region(exec, u, v);
                let uo = &exec.vertex(u).offset;
                let local: Vec<usize> = off.iter().zip(uo).map(|(a, b)| a - b).collect();
                if ext == *out.bound() {
                    Some(out.clone())
                } else {
                    Some(out.block(&local, &ext))
                }
            }
        }
    }

    fn finish(&mut self, v: ExecId, mut t: Tensor, out: &mut Vec<(usize, Msg)>) {
        if self.routes.cfg.precision == Precision::F32 {
            for x in t.values_mut() {
                *x = *x as f32 as f64;
            }
        }
        let vx = self.routes.exec.vertex(v);
        for (dest, key, off, ext) in &self.routes.sends[v] {
            let local: Vec<usize> = off.iter().zip(&vx.offset).map(|(a, b)| a - b).collect();
            let piece = if *ext == *t.bound() {
                t.clone()
            } else {
                t.block(&local, ext)
            };
            self.report.sent += piece.len() as u64;
            out.push((*dest, Msg::Piece(*key, piece)));
        }
        self.report.fp += vx.fp;
        self.report.executed += 1;
        self.outputs.insert(v, t);
        self.pending.remove(&v);
    }

    /// Advances `v` as far as resident data allows. Returns whether anything
    /// happened.
    fn advance(&mut self, v: ExecId, out: &mut Vec<(usize, Msg)>) -> Result<bool> {
        let exec = self.routes.exec;
        let vx = exec.vertex(v);
        match vx.kind {
            ExecKind::InputChunk => {
                let t = self.outputs.remove(&v).expect("input chunk resident");
                self.finish(v, t, out);
                Ok(true)
            }
            ExecKind::JoinKernel => {
                let mut args = Vec::with_capacity(vx.deps.len());
                for i in 0..vx.deps.len() {
                    match self.piece(v, i) {
                        Some(t) => args.push(t),
                        None => return Ok(false),
                    }
                }
                let spec = self.routes.specs[&vx.tensor];
                let refs: Vec<&Tensor> = args.iter().collect();
                let mut t = spec.eval(&refs).map_err(|e| match e {
                    Error::Poisoned { .. } => Error::Poisoned {
                        vertex: self.routes.names[&vx.tensor].clone(),
                    },
                    other => other,
                })?;
                if self.routes.cfg.corrupt == Some(vx.tensor) && self.is_first_join(v) {
                    t.values_mut()[0] += 1.0;
                }
                self.finish(v, t, out);
                Ok(true)
            }
            ExecKind::Refinement => {
                let agg = self.routes.agg[v];
                let start = self.partial.get(&v).map_or(0, |p| p.folded);
                let mut folded = start;
                while folded < vx.deps.len() {
                    let Some(piece) = self.piece(v, folded) else {
                        break;
                    };
                    let (off, _) = piece_region(exec, vx.deps[folded], v);
                    let base: Vec<usize> = off.iter().zip(&vx.offset).map(|(a, b)| a - b).collect();
                    let p = self.partial.entry(v).or_insert_with(|| Partial {
                        acc: Tensor::zeros(vx.extent.clone()),
                        set: vec![false; vx.extent.volume()],
                        folded: 0,
                    });
                    fold_into(p, &base, &piece, agg)?;
                    p.folded += 1;
                    folded = p.folded;
                }
                if folded == vx.deps.len() {
                    let p = self
                        .partial
                        .remove(&v)
                        .expect("at least one dependency folded");
                    if p.set.iter().any(|s| !s) {
                        return Err(Error::Consistency(format!(
                            "refinement {v} left elements unset"
                        )));
                    }
                    self.finish(v, p.acc, out);
                    return Ok(true);
                }
                Ok(folded > start)
            }
        }
    }

    fn is_first_join(&self, v: ExecId) -> bool {
        let t = self.routes.exec.vertex(v).tensor;
        self.routes
            .exec
            .einsum(t)
            .is_some_and(|g| g.joins.first() == Some(&v))
    }

    /// Runs everything runnable, in id order, until nothing moves.
    fn step(&mut self) -> Result<Vec<(usize, Msg)>> {
        let mut out = Vec::new();
        loop {
            let mut moved = false;
            let ids: Vec<ExecId> = self.pending.iter().copied().collect();
            for v in ids {
                moved |= self.advance(v, &mut out)?;
            }
            if !moved {
                return Ok(out);
            }
        }
    }
}

fn fold_into(p: &mut Partial, base: &[usize], piece: &Tensor, agg: Option<AggOp>) -> Result<()> {
    let bound = p.acc.bound().clone();
    let strides = crate::tensor::strides(&bound);
    let mut err = None;
    let values = piece.values();
    let mut i = 0;
    for_each_index(piece.bound(), |local| {
        let off: usize = local
            .iter()
            .zip(base)
            .zip(&strides)
            .map(|((l, b), s)| (l + b) * s)
            .sum();
        let v = values[i];
        i += 1;
        if p.set[off] {
            match agg {
                Some(op) => {
                    let a = p.acc.values()[off];
                    p.acc.values_mut()[off] = op.combine(a, v);
                }
                None => {
                    err = Some(Error::Consistency(
                        "overlapping pieces without an aggregation".into(),
                    ))
                }
            }
        } else {
            p.acc.values_mut()[off] = v;
            p.set[off] = true;
        }
    });
    err.map_or(Ok(()), Err)
}

enum Fail {
    Aborted,
    Failed(Error),
}

fn prepare_inputs(
    exec: &ExecGraph,
    inputs: &BTreeMap<VertexId, TensorRelation>,
) -> Result<BTreeMap<ExecId, Tensor>> {
    let mut chunks = BTreeMap::new();
    for g in exec.inputs() {
        let r = inputs.get(&g.vertex).ok_or_else(|| {
            Error::Plan(format!(
                "no relation supplied for input vertex {}",
                g.vertex
            ))
        })?;
        if *r.part() != g.partition {
            return Err(Error::Plan(format!(
                "input vertex {} chunked {}, plan stores it {}",
                g.vertex,
                r.part(),
                g.partition
            )));
        }
        for &c in &g.chunks {
            let key = &exec.vertex(c).key;
            let t = r
                .get(key)
                .ok_or_else(|| Error::IncompleteRelation(key.clone()))?;
            chunks.insert(c, t.clone());
        }
    }
    Ok(chunks)
}

/// Runs a placed ExecGraph over chunked inputs.
pub fn execute(
    exec: &ExecGraph,
    placement: &Placement,
    inputs: &BTreeMap<VertexId, TensorRelation>,
    cfg: &RunConfig,
) -> Result<RunReport> {
    let routes = Routes::new(exec, placement, cfg.clone())?;
    let chunks = prepare_inputs(exec, inputs)?;
    let l = placement.machines;
    let (machines, rounds) = match cfg.scheduler {
        Scheduler::Sequential => run_sequential(&routes, &chunks, l)?,
        Scheduler::Concurrent => (run_concurrent(&routes, &chunks, l)?, 0),
    };

    let executed: u64 = machines.iter().map(|m| m.report.executed).sum();
    if executed != exec.len() as u64 {
        return Err(Error::Consistency(format!(
            "{executed} executions for {} vertices",
            exec.len()
        )));
    }
    let per_machine: Vec<MachineReport> = machines.iter().map(|m| m.report).collect();
    let sent: u64 = per_machine.iter().map(|m| m.sent).sum();
    let received: u64 = per_machine.iter().map(|m| m.received).sum();
    if sent != received {
        return Err(Error::Consistency(format!(
            "sent {sent} values but received {received}"
        )));
    }
    let mut transfers: BTreeMap<Bucket, u64> = exec
        .einsums()
        .iter()
        .map(|g| (Bucket::Join { vertex: g.vertex }, 0))
        .chain((0..exec.edges().len()).map(|edge| (Bucket::Edge { edge }, 0)))
        .collect();
    for &(size, bucket) in routes.ledger.values() {
        *transfers.entry(bucket).or_default() += size;
    }

    let mut all_outputs: BTreeMap<ExecId, Tensor> = BTreeMap::new();
    for m in machines {
        all_outputs.extend(m.outputs);
    }
    let mut outputs = BTreeMap::new();
    for (_, e) in exec.output_edges() {
        let chunks = e
            .refinements
            .iter()
            .map(|&r| (exec.vertex(r).key.clone(), all_outputs[&r].clone()))
            .collect();
        let c = exec.vertex(e.refinements[0]).extent.clone();
        let rel = TensorRelation::from_chunks(e.partition.clone(), c, chunks)?;
        outputs.insert(e.producer, assemble(&rel)?);
    }
    let max_site_cost = per_machine
        .iter()
        .map(|m| placement.alpha * m.fp as f64 + (m.sent + m.received) as f64)
        .fold(0.0, f64::max);
    Ok(RunReport {
        per_machine,
        total_transferred: sent,
        max_site_cost,
        rounds: (cfg.scheduler == Scheduler::Sequential).then_some(rounds),
        transfers,
        outputs,
    })
}

fn run_sequential<'r, 'a>(
    routes: &'r Routes<'a>,
    chunks: &BTreeMap<ExecId, Tensor>,
    l: usize,
) -> Result<(Vec<Machine<'r, 'a>>, u64)> {
    let mut machines: Vec<Machine> = (0..l).map(|i| Machine::new(i, routes, chunks)).collect();
    let mut inbox: Vec<Vec<(PieceKey, Tensor)>> = vec![Vec::new(); l];
    let mut rounds = 0;
    while machines.iter().any(|m| !m.done()) {
        rounds += 1;
        let mut next: Vec<Vec<(PieceKey, Tensor)>> = vec![Vec::new(); l];
        let mut progressed = false;
        for m in machines.iter_mut() {
            for (k, t) in inbox[m.id].drain(..) {
                m.deliver(k, t);
                progressed = true;
            }
            let before = m.pending.len();
            let out = m.step()?;
            progressed |= m.pending.len() != before || !out.is_empty();
            for (dest, msg) in out {
                if let Msg::Piece(k, t) = msg {
                    next[dest].push((k, t));
                }
            }
        }
        inbox = next;
        if !progressed && inbox.iter().all(Vec::is_empty) {
            return Err(Error::Consistency("no machine can make progress".into()));
        }
    }
    Ok((machines, rounds))
}

fn run_concurrent<'r, 'a>(
    routes: &'r Routes<'a>,
    chunks: &BTreeMap<ExecId, Tensor>,
    l: usize,
) -> Result<Vec<Machine<'r, 'a>>> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..l).map(|_| mpsc::channel::<Msg>()).unzip();
    let results: Vec<std::result::Result<Machine, Fail>> = thread::scope(|s| {
        let handles: Vec<_> = rxs
            .into_iter()
            .enumerate()
            .map(|(id, rx)| {
                let txs = txs.clone();
                s.spawn(move || {
                    let mut m = Machine::new(id, routes, chunks);
                    let abort_all = |txs: &[mpsc::Sender<Msg>]| {
                        for (d, tx) in txs.iter().enumerate() {
                            if d != id {
                                let _ = tx.send(Msg::Abort);
                            }
                        }
                    };
                    loop {
                        let out = match m.step() {
                            Ok(out) => out,
                            Err(e) => {
                                abort_all(&txs);
                                return Err(Fail::Failed(e));
                            }
                        };
                        for (dest, msg) in out {
                            // a peer that already stopped no longer needs data
                            let _ = txs[dest].send(msg);
                        }
                        if m.done() {
                            return Ok(m);
                        }
                        match rx.recv() {
                            Ok(Msg::Piece(k, t)) => m.deliver(k, t),
                            Ok(Msg::Abort) => return Err(Fail::Aborted),
                            Err(_) => {
                                return Err(Fail::Failed(Error::Consistency(format!(
                                    "machine {id} starved"
                                ))))
                            }
                        }
                        while let Ok(msg) = rx.try_recv() {
                            match msg {
                                Msg::Piece(k, t) => m.deliver(k, t),
                                Msg::Abort => return Err(Fail::Aborted),
                            }
                        }
                    }
                })
            })
            .collect();
        drop(txs);
        handles
            .into_iter()
            .map(|h| h.join().expect("machine thread panicked"))
            .collect()
    });
    let mut machines = Vec::with_capacity(l);
    let mut first_err = None;
    for r in results {
        match r {
            Ok(m) => machines.push(m),
            Err(Fail::Failed(e)) => {
                first_err.get_or_insert(e);
            }
            Err(Fail::Aborted) => {}
        }
    }
    match first_err {
        Some(e) => Err(e),
        None if machines.len() == l => Ok(machines),
        None => Err(Error::Consistency(
            "machines aborted without a cause".into(),
        )),
    }
}

/// One measured transfer total against its cost-model bound.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub bucket: Bucket,
    pub label: String,
    pub measured: u64,
    pub bound: CostUnits,
}

impl AuditEntry {
    pub fn ok(&self) -> bool {
        self.measured <= self.bound.get()
    }
}

/// Compares measured transfers with the cost model: joins of each expression
/// against `cost_join`, each refinement set against the producer's
/// `cost_agg` plus the edge's `cost_repart`. The edge bound assumes every
/// refinement shares a machine with one of its partial results, which
/// [`place_all`](crate::placement::place_all) guarantees.
pub fn audit(tg: &TaskGraph, exec: &ExecGraph, report: &RunReport) -> Result<Vec<AuditEntry>> {
    let graph = tg.graph();
    let mut out = Vec::new();
    for g in exec.einsums() {
        let vx = graph.vertex(g.vertex);
        let expr = vx.expr.as_ref().expect("expression");
        let d = tg.plan(g.vertex).d.as_ref().expect("labeled");
        let b_xy = graph.xy_bound(g.vertex)?;
        let bucket = Bucket::Join { vertex: g.vertex };
        out.push(AuditEntry {
            bucket,
            label: format!("join {}", vx.name),
            measured: report.transfers.get(&bucket).copied().unwrap_or(0),
            bound: cost_join(expr, &b_xy, d)?,
        });
    }
    for (i, e) in exec.edges().iter().enumerate() {
        let producer = graph.vertex(e.producer);
        let have = &tg.plan(e.producer).out_partition;
        let mut bound = cost_repart(&e.partition, have, &producer.bound)?;
        if let Some(expr) = &producer.expr {
            let d = tg.plan(e.producer).d.as_ref().expect("labeled");
            bound += cost_agg(expr, &graph.xy_bound(e.producer)?, d)?;
        }
        let target = match e.target {
            EdgeTarget::Consumer { vertex, slot } => {
                format!("{}#{slot}", graph.vertex(vertex).name)
            }
            EdgeTarget::Output => "output".to_string(),
        };
        let bucket = Bucket::Edge { edge: i };
        out.push(AuditEntry {
            bucket,
            label: format!("{} -> {target}", producer.name),
            measured: report.transfers.get(&bucket).copied().unwrap_or(0),
            bound,
        });
    }
    Ok(out)
}

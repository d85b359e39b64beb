//! Composition of every stage: parse, optimize, explode, place, execute, and
//! check the result against direct evaluation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostUnits;
use crate::einsum::{eval_reference, parse_eingraph, EinGraph, VertexId};
use crate::error::{Error, Result};
use crate::execgraph::{explode, ExecGraph};
use crate::optimizer::{optimize_dag, TaskGraph};
use crate::placement::{place_all, Placement, DEFAULT_ALPHA};
use crate::relation::{chunk, TensorRelation};
use crate::runtime::{audit, execute, AuditEntry, Bucket, Precision, RunConfig, RunReport};
use crate::tensor::Tensor;

/// Relative error allowed for 64-bit runs.
pub const TOLERANCE_F64: f64 = 1e-10;
/// Relative error allowed when intermediate results are rounded to 32 bits.
pub const TOLERANCE_F32: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub p: u64,
    pub machines: usize,
    pub alpha: f64,
    pub run: RunConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            p: 4,
            machines: 4,
            alpha: DEFAULT_ALPHA,
            run: RunConfig::default(),
        }
    }
}

/// Deterministic inputs for every graph input: uniform in `[-1, 1)`, or
/// small integers in `[-3, 3]` when `integer` is set.
pub fn random_inputs(graph: &EinGraph, seed: u64, integer: bool) -> BTreeMap<VertexId, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph
        .inputs()
        .map(|v| {
            let t = Tensor::from_fn(v.bound.clone(), |_| {
                if integer {
                    rng.gen_range(-3i32..=3) as f64
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            });
            (v.id, t)
        })
        .collect()
}

/// Chunks each input as the TaskGraph stores it.
pub fn chunk_inputs(
    tg: &TaskGraph,
    inputs: &BTreeMap<VertexId, Tensor>,
) -> Result<BTreeMap<VertexId, TensorRelation>> {
    tg.graph()
        .inputs()
        .map(|v| {
            let t = inputs
                .get(&v.id)
                .ok_or_else(|| Error::Plan(format!("no tensor supplied for input `{}`", v.name)))?;
            Ok((v.id, chunk(t, &tg.plan(v.id).out_partition)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub max_rel_error: f64,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares every graph output with direct evaluation.
pub fn verify(
    graph: &EinGraph,
    inputs: &BTreeMap<VertexId, Tensor>,
    report: &RunReport,
    precision: Precision,
) -> Result<Verification> {
    let reference = eval_reference(graph, inputs)?;
    let tolerance = match precision {
        Precision::F64 => TOLERANCE_F64,
        Precision::F32 => TOLERANCE_F32,
    };
    let (mut rel, mut abs) = (0.0_f64, 0.0_f64);
    for &o in graph.outputs() {
        let got = report.outputs.get(&o).ok_or_else(|| {
            Error::Consistency(format!("output `{}` missing", graph.vertex(o).name))
        })?;
        let want = &reference[&o];
        let shape = || {
            Error::Consistency(format!(
                "output `{}` has the wrong shape",
                graph.vertex(o).name
            ))
        };
        rel = rel.max(got.max_rel_error(want).ok_or_else(shape)?);
        abs = abs.max(got.max_abs_diff(want).ok_or_else(shape)?);
    }
    let passed = rel <= tolerance && !rel.is_nan();
    Ok(Verification {
        max_rel_error: rel,
        max_abs_diff: abs,
        tolerance,
        passed,
    })
}

/// Predicted and measured communication of one expression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub vertex: VertexId,
    pub name: String,
    pub predicted_join: CostUnits,
    pub measured_join: u64,
    /// Aggregation plus repartition bound summed over the out-edges.
    pub predicted_out: CostUnits,
    pub measured_out: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub task_graph: TaskGraph,
    pub exec: ExecGraph,
    pub placement: Placement,
    pub report: RunReport,
    pub audit: Vec<AuditEntry>,
    pub stages: Vec<StageCost>,
    pub verification: Verification,
}

impl PipelineRun {
    pub fn audit_ok(&self) -> bool {
        self.audit.iter().all(AuditEntry::ok)
    }
}

fn stage_costs(exec: &ExecGraph, audit: &[AuditEntry]) -> Vec<StageCost> {
    let by_bucket: BTreeMap<Bucket, &AuditEntry> = audit.iter().map(|a| (a.bucket, a)).collect();
    exec.einsums()
        .iter()
        .map(|g| {
            let j = by_bucket[&Bucket::Join { vertex: g.vertex }];
            let outs: Vec<&AuditEntry> = g
                .out_edges
                .iter()
                .map(|&e| by_bucket[&Bucket::Edge { edge: e }])
                .collect();
            StageCost {
                vertex: g.vertex,
                name: g.name.clone(),
                predicted_join: j.bound,
                measured_join: j.measured,
                predicted_out: outs.iter().map(|a| a.bound).sum(),
                measured_out: outs.iter().map(|a| a.measured).sum(),
            }
        })
        .collect()
}

/// Optimizes, explodes, places, and runs `graph` on `inputs`.
pub fn run_graph(
    graph: &EinGraph,
    cfg: &PipelineConfig,
    inputs: &BTreeMap<VertexId, Tensor>,
) -> Result<PipelineRun> {
    let tg = optimize_dag(graph, cfg.p)?;
    let exec = explode(&tg)?;
    let placement = place_all(&exec, cfg.machines, cfg.alpha)?;
    let report = execute(&exec, &placement, &chunk_inputs(&tg, inputs)?, &cfg.run)?;
    let audit = audit(&tg, &exec, &report)?;
    let stages = stage_costs(&exec, &audit);
    let verification = verify(graph, inputs, &report, cfg.run.precision)?;
    Ok(PipelineRun {
        task_graph: tg,
        exec,
        placement,
        report,
        audit,
        stages,
        verification,
    })
}

/// [`run_graph`] on graph text, with seeded random inputs when none are given.
pub fn run_end_to_end(
    text: &str,
    cfg: &PipelineConfig,
    inputs: Option<&BTreeMap<VertexId, Tensor>>,
    seed: u64,
) -> Result<PipelineRun> {
    let graph = parse_eingraph(text)?;
    let generated;
    let inputs = match inputs {
        Some(i) => i,
        None => {
            generated = random_inputs(&graph, seed, false);
            &generated
        }
    };
    run_graph(&graph, cfg, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::runtime::Scheduler;

    #[test]
    fn inputs_are_seeded() {
        let g = bundled::graph("matmul").unwrap();
        assert_eq!(random_inputs(&g, 7, false), random_inputs(&g, 7, false));
        assert_ne!(random_inputs(&g, 7, false), random_inputs(&g, 8, false));
        let ints = random_inputs(&g, 1, true);
        assert!(ints
            .values()
            .all(|t| t.values().iter().all(|x| x.fract() == 0.0)));
    }

    #[test]
    fn ffnn_matches_reference() {
        let cfg = PipelineConfig {
            p: 4,
            machines: 4,
            ..Default::default()
        };
        let run = run_end_to_end(bundled::FFNN, &cfg, None, 3).unwrap();
        assert!(run.verification.passed, "{:?}", run.verification);
        assert!(run.audit_ok());
    }

    #[test]
    fn degenerate_single_machine() {
        let cfg = PipelineConfig {
            p: 1,
            machines: 1,
            ..Default::default()
        };
        let g = bundled::graph("matmul").unwrap();
        let inputs = random_inputs(&g, 0, true);
        let run = run_graph(&g, &cfg, &inputs).unwrap();
        assert_eq!(run.report.total_transferred, 0);
        assert_eq!(run.verification.max_abs_diff, 0.0);
    }

    #[test]
    fn corrupted_kernel_fails_verification() {
        let g = bundled::graph("matmul").unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.run.corrupt = g.by_name("Z");
        let run = run_graph(&g, &cfg, &random_inputs(&g, 0, false)).unwrap();
        assert!(!run.verification.passed);
    }

    #[test]
    fn schedulers_agree() {
        let g = bundled::graph("attention").unwrap();
        let inputs = random_inputs(&g, 5, false);
        let mut cfg = PipelineConfig {
            p: 8,
            machines: 4,
            ..Default::default()
        };
        let a = run_graph(&g, &cfg, &inputs).unwrap();
        cfg.run.scheduler = Scheduler::Concurrent;
        let b = run_graph(&g, &cfg, &inputs).unwrap();
        assert_eq!(a.report.outputs, b.report.outputs);
        assert_eq!(a.report.total_transferred, b.report.total_transferred);
        assert_eq!(a.report.per_machine, b.report.per_machine);
        assert!(a.verification.passed && b.verification.passed);
    }

    #[test]
    fn f32_mode_is_close_but_rounded() {
        let g = bundled::graph("ffnn").unwrap();
        let inputs = random_inputs(&g, 2, false);
        let mut cfg = PipelineConfig::default();
        cfg.run.precision = Precision::F32;
        let run = run_graph(&g, &cfg, &inputs).unwrap();
        assert!(run.verification.passed, "{:?}", run.verification);
        assert!(run.verification.max_abs_diff > 0.0);
    }

    #[test]
    fn poisoned_division_names_vertex() {
        let text = "input X : [4]\ninput Y : [4]\nQ[i] = div(X[i], Y[i])\n";
        let g = parse_eingraph(text).unwrap();
        let mut inputs = random_inputs(&g, 0, false);
        inputs.insert(1, Tensor::zeros([4]));
        for scheduler in [Scheduler::Sequential, Scheduler::Concurrent] {
            let mut cfg = PipelineConfig {
                p: 2,
                machines: 2,
                ..Default::default()
            };
            cfg.run.scheduler = scheduler;
            let err = run_graph(&g, &cfg, &inputs).unwrap_err();
            assert_eq!(err, Error::Poisoned { vertex: "Q".into() });
        }
    }
}

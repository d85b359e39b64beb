//! Versioned JSON documents for TaskGraphs, placed ExecGraphs, and run
//! reports. Field order is fixed by the struct definitions and maps are
//! ordered, so emitting the same value twice gives the same bytes.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cost::CostUnits;
use crate::einsum::{parse_eingraph, VertexId};
use crate::error::{Error, Result};
use crate::execgraph::{ExecGraph, ExecKind};
use crate::optimizer::{CostReport, TaskGraph, VertexPlan};
use crate::pipeline::{PipelineRun, StageCost, Verification};
use crate::placement::Placement;
use crate::runtime::{AuditEntry, MachineReport};
use crate::tensor::{Bound, Partition, Tensor};

pub const TASK_GRAPH_SCHEMA: &str = "eindecomp/task-graph/v1";
pub const EXEC_GRAPH_SCHEMA: &str = "eindecomp/exec-graph/v1";
pub const RUN_REPORT_SCHEMA: &str = "eindecomp/run-report/v1";
pub const COST_REPORT_SCHEMA: &str = "eindecomp/cost-report/v1";

/// Bytes per value in the reports.
pub const BYTES_PER_VALUE: u64 = 8;

pub fn to_json<T: Serialize>(doc: &T) -> Result<String> {
    serde_json::to_string_pretty(doc).map_err(|e| Error::Plan(format!("cannot encode JSON: {e}")))
}

/// Parses a document and checks its `schema` field.
pub fn from_json<T: DeserializeOwned + Versioned>(text: &str) -> Result<T> {
    let doc: T = serde_json::from_str(text)
        .map_err(|e| Error::Plan(format!("malformed JSON document: {e}")))?;
    if doc.schema() != T::SCHEMA {
        return Err(Error::Plan(format!(
            "expected schema `{}`, found `{}`",
            T::SCHEMA,
            doc.schema()
        )));
    }
    Ok(doc)
}

pub trait Versioned {
    const SCHEMA: &'static str;
    fn schema(&self) -> &str;
}

macro_rules! versioned {
    ($t:ty, $s:expr) => {
        impl Versioned for $t {
            const SCHEMA: &'static str = $s;
            fn schema(&self) -> &str {
                &self.schema
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskVertexDoc {
    pub id: VertexId,
    pub name: String,
    /// Statement text; `None` for inputs.
    pub einsum: Option<String>,
    pub inputs: Vec<VertexId>,
    pub bound: Bound,
    pub d: Option<Partition>,
    pub out_partition: Partition,
    pub p: u64,
    pub input_choice: Vec<Option<Partition>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGraphDoc {
    pub schema: String,
    pub p: u64,
    pub vertices: Vec<TaskVertexDoc>,
    pub outputs: Vec<VertexId>,
    pub predicted_cost: CostUnits,
}
versioned!(TaskGraphDoc, TASK_GRAPH_SCHEMA);

impl TaskGraphDoc {
    pub fn new(tg: &TaskGraph) -> Self {
        let g = tg.graph();
        let vertices = g
            .vertices()
            .iter()
            .map(|v| {
                let plan = tg.plan(v.id);
                let names: Vec<&str> = v
                    .inputs
                    .iter()
                    .map(|&u| g.vertex(u).name.as_str())
                    .collect();
                TaskVertexDoc {
                    id: v.id,
                    name: v.name.clone(),
                    einsum: v.expr.as_ref().map(|e| e.render(&v.name, &names)),
                    inputs: v.inputs.clone(),
                    bound: v.bound.clone(),
                    d: plan.d.clone(),
                    out_partition: plan.out_partition.clone(),
                    p: plan.p,
                    input_choice: plan.input_choice.clone(),
                }
            })
            .collect();
        TaskGraphDoc {
            schema: TASK_GRAPH_SCHEMA.into(),
            p: tg.p(),
            vertices,
            outputs: g.outputs().to_vec(),
            predicted_cost: tg.predicted_cost(),
        }
    }

    /// Rebuilds the TaskGraph, re-validating every vector.
    pub fn to_task_graph(&self) -> Result<TaskGraph> {
        let mut text = String::new();
        for v in &self.vertices {
            match &v.einsum {
                None => text.push_str(&format!("input {} : {}\n", v.name, v.bound)),
                Some(s) => {
                    text.push_str(s);
                    text.push('\n');
                }
            }
        }
        for &o in &self.outputs {
            let v = self
                .vertices
                .get(o)
                .ok_or_else(|| Error::Plan(format!("output id {o} out of range")))?;
            text.push_str(&format!("output {}\n", v.name));
        }
        let graph = parse_eingraph(&text)?;
        for (v, doc) in graph.vertices().iter().zip(&self.vertices) {
            if v.id != doc.id || v.inputs != doc.inputs || v.bound != doc.bound {
                return Err(Error::Plan(format!(
                    "vertex `{}` does not match its statement",
                    doc.name
                )));
            }
        }
        let plans = self
            .vertices
            .iter()
            .map(|v| VertexPlan {
                d: v.d.clone(),
                out_partition: v.out_partition.clone(),
                p: v.p,
                input_choice: v.input_choice.clone(),
            })
            .collect();
        TaskGraph::new(graph, self.p, plans, self.predicted_cost)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecVertexDoc {
    pub id: usize,
    pub kind: ExecKind,
    pub tensor: String,
    pub key: Vec<usize>,
    pub fp: u64,
    pub sz: u64,
    pub deps: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecGraphDoc {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machines: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub vertices: Vec<ExecVertexDoc>,
}
versioned!(ExecGraphDoc, EXEC_GRAPH_SCHEMA);

impl ExecGraphDoc {
    pub fn new(tg: &TaskGraph, exec: &ExecGraph, placement: Option<&Placement>) -> Self {
        let vertices = exec
            .vertices()
            .iter()
            .map(|v| ExecVertexDoc {
                id: v.id,
                kind: v.kind,
                tensor: tg.graph().vertex(v.tensor).name.clone(),
                key: v.key.clone(),
                fp: v.fp,
                sz: v.sz,
                deps: v.deps.clone(),
                machine: placement.and_then(|p| p.machine(v.id)),
            })
            .collect();
        ExecGraphDoc {
            schema: EXEC_GRAPH_SCHEMA.into(),
            machines: placement.map(|p| p.machines),
            alpha: placement.map(|p| p.alpha),
            vertices,
        }
    }

    /// The placement recorded in the document, if any.
    pub fn placement(&self) -> Option<Placement> {
        Some(Placement {
            machines: self.machines?,
            alpha: self.alpha?,
            assignment: self.vertices.iter().map(|v| v.machine).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub transferred: u64,
    pub transferred_bytes: u64,
    pub fp: u64,
    pub predicted_cost: CostUnits,
    pub predicted_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReportDoc {
    pub schema: String,
    pub machines: usize,
    pub p: u64,
    pub per_machine: Vec<MachineReport>,
    pub totals: Totals,
    pub max_site_cost: f64,
    pub rounds: Option<u64>,
    pub stages: Vec<StageCost>,
    pub audit: Vec<AuditEntry>,
    pub verified: Verification,
    pub outputs: BTreeMap<String, Tensor>,
}
versioned!(RunReportDoc, RUN_REPORT_SCHEMA);

impl RunReportDoc {
    pub fn new(run: &PipelineRun) -> Self {
        let r = &run.report;
        let g = run.task_graph.graph();
        let predicted = run.task_graph.predicted_cost();
        RunReportDoc {
            schema: RUN_REPORT_SCHEMA.into(),
            machines: run.placement.machines,
            p: run.task_graph.p(),
            per_machine: r.per_machine.clone(),
            totals: Totals {
                transferred: r.total_transferred,
                transferred_bytes: r.total_transferred * BYTES_PER_VALUE,
                fp: r.per_machine.iter().map(|m| m.fp).sum(),
                predicted_cost: predicted,
                predicted_bytes: predicted.get().saturating_mul(BYTES_PER_VALUE),
            },
            max_site_cost: r.max_site_cost,
            rounds: r.rounds,
            stages: run.stages.clone(),
            audit: run.audit.clone(),
            verified: run.verification.clone(),
            outputs: r
                .outputs
                .iter()
                .map(|(&v, t)| (g.vertex(v).name.clone(), t.clone()))
                .collect(),
        }
    }
}

/// A labeling together with its itemized costs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReportDoc {
    pub schema: String,
    pub task_graph: TaskGraphDoc,
    pub report: CostReport,
    pub total_bytes: u64,
}
versioned!(CostReportDoc, COST_REPORT_SCHEMA);

impl CostReportDoc {
    pub fn new(tg: &TaskGraph) -> Result<Self> {
        let report = tg.cost_report()?;
        Ok(CostReportDoc {
            schema: COST_REPORT_SCHEMA.into(),
            task_graph: TaskGraphDoc::new(tg),
            total_bytes: report.total.get().saturating_mul(BYTES_PER_VALUE),
            report,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::execgraph::explode;
    use crate::optimizer::optimize_dag;
    use crate::pipeline::{run_end_to_end, PipelineConfig};
    use crate::placement::place_all;

    #[test]
    fn task_graph_round_trip() {
        for (name, _) in bundled::ALL {
            let tg = optimize_dag(&bundled::graph(name).unwrap(), 8).unwrap();
            let doc = TaskGraphDoc::new(&tg);
            let text = to_json(&doc).unwrap();
            let back: TaskGraphDoc = from_json(&text).unwrap();
            assert_eq!(back, doc);
            assert_eq!(back.to_task_graph().unwrap(), tg, "{name}");
            assert_eq!(to_json(&back).unwrap(), text);
        }
    }

    #[test]
    fn exec_graph_round_trip() {
        let tg = optimize_dag(&bundled::graph("ffnn").unwrap(), 4).unwrap();
        let exec = explode(&tg).unwrap();
        let bare = ExecGraphDoc::new(&tg, &exec, None);
        assert!(!to_json(&bare).unwrap().contains("machine"));
        assert_eq!(bare.placement(), None);
        let p = place_all(&exec, 2, 0.01).unwrap();
        let doc = ExecGraphDoc::new(&tg, &exec, Some(&p));
        let back: ExecGraphDoc = from_json(&to_json(&doc).unwrap()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.placement(), Some(p));
    }

    #[test]
    fn run_report_round_trip() {
        let cfg = PipelineConfig {
            p: 4,
            machines: 2,
            ..Default::default()
        };
        let run = run_end_to_end(bundled::SOFTMAX, &cfg, None, 9).unwrap();
        let doc = RunReportDoc::new(&run);
        assert_eq!(doc.totals.transferred_bytes, 8 * doc.totals.transferred);
        let back: RunReportDoc = from_json(&to_json(&doc).unwrap()).unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn cost_report_round_trip() {
        let tg = optimize_dag(&bundled::graph("attention").unwrap(), 4).unwrap();
        let doc = CostReportDoc::new(&tg).unwrap();
        let back: CostReportDoc = from_json(&to_json(&doc).unwrap()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.task_graph.to_task_graph().unwrap(), tg);
    }

    #[test]
    fn wrong_schema_rejected() {
        let tg = optimize_dag(&bundled::graph("matmul").unwrap(), 2).unwrap();
        let mut doc = TaskGraphDoc::new(&tg);
        doc.schema = "something/else".into();
        let err = from_json::<TaskGraphDoc>(&to_json(&doc).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Plan(_)));
    }

    #[test]
    fn tampered_vector_rejected() {
        let tg = optimize_dag(&bundled::graph("matmul").unwrap(), 8).unwrap();
        let mut doc = TaskGraphDoc::new(&tg);
        let z = doc.vertices.iter_mut().find(|v| v.d.is_some()).unwrap();
        z.d = Some(Partition::from([3usize, 1, 1, 1]));
        assert!(doc.to_task_graph().is_err());
    }
}

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use eindecomp::bundled;
use eindecomp::doc::{
    self, CostReportDoc, ExecGraphDoc, RunReportDoc, TaskGraphDoc, BYTES_PER_VALUE,
};
use eindecomp::einsum::{parse_eingraph, EinGraph};
use eindecomp::execgraph::{explode, ExecKind};
use eindecomp::optimizer::{assign, optimize_dag, TaskGraph};
use eindecomp::partition::{count_partitionings, fallback_p, viable};
use eindecomp::pipeline::{random_inputs, run_graph, PipelineConfig};
use eindecomp::placement::{enumerate_placements, place_all, site_loads, DEFAULT_ALPHA};
use eindecomp::runtime::{Precision, RunConfig, Scheduler};
use eindecomp::Partition;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] eindecomp::Error),
    #[error("{0}")]
    Io(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(_) | CliError::Io(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Decompose EinSum graphs into placed, chunked tensor-relational dataflow.
#[derive(Debug, Parser)]
#[command(name = "eindecomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cost hand-picked partition vectors.
    Cost(CostArgs),
    /// Choose a partition vector for every expression.
    Optimize(PlanArgs),
    /// Expand the optimized graph into kernel calls and refinements.
    Explode(PlanArgs),
    /// Place the exploded graph on machines.
    Place(PlaceArgs),
    /// Run the full pipeline on random inputs.
    Run(RunArgs),
    /// List viable partition vectors or count partitionings.
    Enumerate(EnumerateArgs),
}

#[derive(Debug, Args)]
struct GraphArgs {
    /// Graph file, `-` for stdin, or `builtin:NAME`.
    #[arg(long)]
    graph: String,
    /// Write the JSON artifact here (`-` for stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Partition vector for one expression, as NAME=d1,d2,...
    #[arg(long = "assign", value_name = "NAME=D", value_parser = parse_assignment, required = true)]
    assign: Vec<(String, Partition)>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Target kernel calls per expression; rounded down to a power of two.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    procs: u64,
}

#[derive(Debug, Args)]
struct PlaceArgs {
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    machines: u64,
    /// Weight of local work against transferred values.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Sequential,
    Concurrent,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    place: PlaceArgs,
    /// Compare outputs with direct evaluation; exit 3 on mismatch.
    #[arg(long)]
    check: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw small integer inputs instead of uniform reals.
    #[arg(long)]
    integer: bool,
    #[arg(long, value_enum, default_value_t = SchedulerArg::Sequential)]
    scheduler: SchedulerArg,
    /// Test hook: perturb one kernel output of the named expression.
    #[arg(long, hide = true, value_name = "NAME")]
    corrupt: Option<String>,
}

#[derive(Debug, Args)]
struct EnumerateArgs {
    #[arg(long)]
    graph: Option<String>,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    procs: u64,
    /// Only this expression.
    #[arg(long)]
    vertex: Option<String>,
    /// Count the ways to put BALLS balls into BUCKETS buckets.
    #[arg(long, requires = "buckets")]
    balls: Option<u32>,
    #[arg(long, requires = "balls")]
    buckets: Option<u32>,
    /// List candidate machine vectors for this many machines.
    #[arg(long, requires = "joins")]
    machines: Option<usize>,
    #[arg(long, requires = "machines")]
    joins: Option<usize>,
}

fn parse_assignment(s: &str) -> Result<(String, Partition), String> {
    let (name, d) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=d1,d2,..., got `{s}`"))?;
    let d = d.trim().trim_start_matches('[').trim_end_matches(']');
    let entries = d
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad entry `{x}`: {e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((name.trim().to_string(), Partition::new(entries)))
}

fn load_graph(source: &str) -> CliResult<EinGraph> {
    let text = if let Some(name) = source.strip_prefix("builtin:") {
        bundled::get(name)
            .ok_or_else(|| {
                let names: Vec<&str> = bundled::ALL.iter().map(|(n, _)| *n).collect();
                CliError::Usage(format!(
                    "unknown builtin `{name}`; choose from {}",
                    names.join(", ")
                ))
            })?
            .to_string()
    } else if source == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| CliError::Io(format!("stdin: {e}")))?;
        s
    } else {
        std::fs::read_to_string(source).map_err(|e| CliError::Io(format!("{source}: {e}")))?
    };
    Ok(parse_eingraph(&text)?)
}

fn emit<T: serde::Serialize>(out: &Option<PathBuf>, doc: &T) -> CliResult {
    let Some(path) = out else { return Ok(()) };
    let json = doc::to_json(doc)?;
    if path.as_os_str() == "-" {
        println!("{json}");
    } else {
        std::fs::write(path, json + "\n")
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Human-readable text goes to stderr when stdout carries JSON.
fn report(args: &GraphArgs, line: impl Display) {
    if args.out.as_ref().is_some_and(|p| p.as_os_str() == "-") {
        eprintln!("{line}");
    } else {
        println!("{line}");
    }
}

fn values(n: u64) -> String {
    format!("{n} values ({} bytes)", n.saturating_mul(BYTES_PER_VALUE))
}

fn rounded_p(args: &GraphArgs, p: u64) -> u64 {
    let r = 1u64 << (63 - p.leading_zeros());
    if r != p {
        report(args, format!("note: p = {p} rounded down to {r}"));
    }
    r
}

fn plan(args: &PlanArgs) -> CliResult<TaskGraph> {
    let g = load_graph(&args.graph.graph)?;
    let p = rounded_p(&args.graph, args.procs);
    Ok(optimize_dag(&g, p)?)
}

fn print_costs(args: &GraphArgs, tg: &TaskGraph) -> CliResult {
    let g = tg.graph();
    let r = tg.cost_report()?;
    for v in &r.vertices {
        let vx = g.vertex(v.id);
        let d = tg.plan(v.id).d.as_ref().expect("labeled");
        report(
            args,
            format!(
                "{:<8} d = {:<16} join {:>12}  agg {:>12}",
                vx.name,
                d.to_string(),
                v.join,
                v.agg
            ),
        );
    }
    for e in r.edges.iter().filter(|e| e.repart.get() > 0) {
        let note = if e.tracked { "" } else { "  (not optimized)" };
        report(
            args,
            format!(
                "{:<8} -> {:<8} repart {:>12}{note}",
                g.vertex(e.producer).name,
                g.vertex(e.consumer).name,
                e.repart
            ),
        );
    }
    report(args, format!("predicted {}", values(r.predicted.get())));
    if r.untracked.get() > 0 {
        report(args, format!("untracked {}", values(r.untracked.get())));
    }
    report(args, format!("total     {}", values(r.total.get())));
    Ok(())
}

fn cmd_cost(args: &CostArgs) -> CliResult {
    let g = load_graph(&args.graph.graph)?;
    let ds: BTreeMap<String, Partition> = args.assign.iter().cloned().collect();
    if ds.len() != args.assign.len() {
        return Err(CliError::Usage("an expression was assigned twice".into()));
    }
    let tg = assign(g, &ds)?;
    print_costs(&args.graph, &tg)?;
    emit(&args.graph.out, &CostReportDoc::new(&tg)?)
}

fn cmd_optimize(args: &PlanArgs) -> CliResult {
    let tg = plan(args)?;
    print_costs(&args.graph, &tg)?;
    emit(&args.graph.out, &TaskGraphDoc::new(&tg))
}

fn cmd_explode(args: &PlanArgs) -> CliResult {
    let tg = plan(args)?;
    let exec = explode(&tg)?;
    let count = |k: ExecKind| exec.vertices().iter().filter(|v| v.kind == k).count();
    report(
        &args.graph,
        format!(
            "{} vertices: {} input chunks, {} kernel calls, {} refinements",
            exec.len(),
            count(ExecKind::InputChunk),
            count(ExecKind::JoinKernel),
            count(ExecKind::Refinement)
        ),
    );
    emit(&args.graph.out, &ExecGraphDoc::new(&tg, &exec, None))
}

fn cmd_place(args: &PlaceArgs) -> CliResult {
    let tg = plan(&args.plan)?;
    let exec = explode(&tg)?;
    let placement = place_all(&exec, args.machines as usize, args.alpha)?;
    let out = &args.plan.graph;
    let loads = site_loads(&placement, &exec);
    for (l, s) in loads.iter().enumerate() {
        report(
            out,
            format!(
                "machine {l:>3}: fp {:>12}  traffic {:>10}  cost {:.2}",
                s.fp,
                s.traffic,
                s.cost(args.alpha)
            ),
        );
    }
    let max = loads.iter().map(|s| s.cost(args.alpha)).fold(0.0, f64::max);
    report(out, format!("max site cost {max:.2}"));
    emit(&out.out, &ExecGraphDoc::new(&tg, &exec, Some(&placement)))
}

fn cmd_run(args: &RunArgs) -> CliResult {
    let out = &args.place.plan.graph;
    let g = load_graph(&out.graph)?;
    let p = rounded_p(out, args.place.plan.procs);
    let corrupt = match &args.corrupt {
        Some(name) => Some(
            g.by_name(name)
                .ok_or_else(|| CliError::Usage(format!("no vertex named `{name}`")))?,
        ),
        None => None,
    };
    let cfg = PipelineConfig {
        p,
        machines: args.place.machines as usize,
        alpha: args.place.alpha,
        run: RunConfig {
            scheduler: match args.scheduler {
                SchedulerArg::Sequential => Scheduler::Sequential,
                SchedulerArg::Concurrent => Scheduler::Concurrent,
            },
            precision: match args.precision {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            },
            corrupt,
        },
    };
    let inputs = random_inputs(&g, args.seed, args.integer);
    let run = run_graph(&g, &cfg, &inputs)?;
    for m in &run.report.per_machine {
        report(
            out,
            format!(
                "machine {:>3}: fp {:>12}  sent {:>10}  received {:>10}  executed {}",
                m.id, m.fp, m.sent, m.received, m.executed
            ),
        );
    }
    for s in &run.stages {
        report(
            out,
            format!(
                "{:<8} join {:>10} / {:<10} out {:>10} / {:<10}",
                s.name, s.measured_join, s.predicted_join, s.measured_out, s.predicted_out
            ),
        );
    }
    report(
        out,
        format!("transferred {}", values(run.report.total_transferred)),
    );
    report(
        out,
        format!(
            "predicted   {}",
            values(run.task_graph.predicted_cost().get())
        ),
    );
    report(
        out,
        format!("max site cost {:.2}", run.report.max_site_cost),
    );
    let violations: Vec<_> = run.audit.iter().filter(|a| !a.ok()).collect();
    for a in &violations {
        report(
            out,
            format!(
                "bound exceeded: {} measured {} > {}",
                a.label, a.measured, a.bound
            ),
        );
    }
    let v = &run.verification;
    report(
        out,
        format!(
            "max abs diff {:.3e}, max rel error {:.3e} (tolerance {:.0e})",
            v.max_abs_diff, v.max_rel_error, v.tolerance
        ),
    );
    emit(&out.out, &RunReportDoc::new(&run))?;
    if args.check && !v.passed {
        return Err(CliError::Verification(format!(
            "max abs diff {:.3e}, max rel error {:.3e}",
            v.max_abs_diff, v.max_rel_error
        )));
    }
    if args.check && !violations.is_empty() {
        return Err(CliError::Verification(format!(
            "{} transfer bounds exceeded",
            violations.len()
        )));
    }
    Ok(())
}

fn cmd_enumerate(args: &EnumerateArgs) -> CliResult {
    let mut did = false;
    if let (Some(n), Some(d)) = (args.balls, args.buckets) {
        println!("{}", count_partitionings(n, d));
        did = true;
    }
    if let (Some(l), Some(j)) = (args.machines, args.joins) {
        if l == 0 {
            return Err(CliError::Usage("--machines must be at least 1".into()));
        }
        for v in enumerate_placements(l, j) {
            println!(
                "{}",
                v.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(" ")
            );
        }
        did = true;
    }
    let Some(source) = &args.graph else {
        return if did {
            Ok(())
        } else {
            Err(CliError::Usage(
                "give --graph, --balls/--buckets, or --machines/--joins".into(),
            ))
        };
    };
    let g = load_graph(source)?;
    let p = 1u64 << (63 - args.procs.leading_zeros());
    if let Some(name) = &args.vertex {
        let v = g
            .by_name(name)
            .ok_or_else(|| CliError::Usage(format!("no vertex named `{name}`")))?;
        if g.vertex(v).is_input() {
            return Err(CliError::Usage(format!("`{name}` is an input")));
        }
    }
    for vx in g.vertices() {
        let Some(expr) = &vx.expr else { continue };
        if args.vertex.as_ref().is_some_and(|n| *n != vx.name) {
            continue;
        }
        let b_xy = g.xy_bound(vx.id)?;
        let p_v = fallback_p(expr, p, &b_xy)?;
        let set = viable(expr, p_v, &b_xy)?;
        let note = if p_v != p {
            format!(" (fell back to p = {p_v})")
        } else {
            String::new()
        };
        println!("{}: {} viable at p = {p}{note}", vx.name, set.len());
        for d in &set.vectors {
            println!("  {d}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Cost(a) => cmd_cost(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Explode(a) => cmd_explode(a),
        Command::Place(a) => cmd_place(a),
        Command::Run(a) => cmd_run(a),
        Command::Enumerate(a) => cmd_enumerate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

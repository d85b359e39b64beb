use std::io::Write;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const MM8000: &str =
    "input X : [8000,8000]\ninput Y : [8000,8000]\nZ[i,k] = sum[j] mul(X[i,j], Y[j,k])\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eindecomp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_stdin(args: &[&str], input: &str) -> Output {
    let mut child = bin()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn cost_of_large_matmuls() {
    let o = run_stdin(
        &[
            "cost",
            "--graph",
            "-",
            "--assign",
            "Z=4,4,4,4",
            "--out",
            "-",
        ],
        MM8000,
    );
    let doc = json(&o);
    assert_eq!(doc["schema"], "eindecomp/cost-report/v1");
    assert_eq!(doc["report"]["total"], 704_000_000u64);
    assert_eq!(doc["total_bytes"], 8 * 704_000_000u64);
    let o = run_stdin(
        &["cost", "--graph", "-", "--assign", "Z=[1,64,64,1]"],
        MM8000,
    );
    assert!(stdout(&o).contains("4160000000 values (33280000000 bytes)"));
}

#[test]
fn cost_all_ones_is_input_size() {
    let o = run(&[
        "cost",
        "--graph",
        "builtin:matmul",
        "--assign",
        "Z=1,1,1,1",
        "--out",
        "-",
    ]);
    let doc = json(&o);
    let v = &doc["report"]["vertices"][0];
    assert_eq!(v["agg"], 0);
    // each operand read once
    let inputs: u64 = doc["task_graph"]["vertices"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|v| v["einsum"].is_null())
        .map(|v| {
            v["bound"]
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_u64().unwrap())
                .product::<u64>()
        })
        .sum();
    assert_eq!(v["join"], inputs);
}

#[test]
fn cost_rejects_bad_vectors() {
    for d in ["Z=3,1,1,1", "Z=1,2,4,1", "Z=1,1,1", "W=1,1,1,1"] {
        let o = run(&["cost", "--graph", "builtin:matmul", "--assign", d]);
        assert_eq!(o.status.code(), Some(2), "{d}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn optimize_emits_task_graph() {
    let doc = json(&run(&[
        "optimize",
        "--graph",
        "builtin:matmul",
        "--procs",
        "8",
        "--out",
        "-",
    ]));
    assert_eq!(doc["schema"], "eindecomp/task-graph/v1");
    let z = doc["vertices"]
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["name"] == "Z")
        .unwrap();
    let d: Vec<u64> = z["d"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .collect();
    assert_eq!(d[0] * d[1] * d[3], 8);
    assert!(doc["predicted_cost"].as_u64().unwrap() > 0);

    let doc = json(&run(&[
        "optimize",
        "--graph",
        "builtin:attention",
        "--procs",
        "1",
        "--out",
        "-",
    ]));
    for v in doc["vertices"].as_array().unwrap() {
        if let Some(d) = v["d"].as_array() {
            assert!(d.iter().all(|x| x == 1));
        }
    }
}

#[test]
fn artifacts_written_to_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exec.json");
    let p = path.to_str().unwrap();
    let o = run(&[
        "place",
        "--graph",
        "builtin:ffnn",
        "--procs",
        "4",
        "--machines",
        "2",
        "--out",
        p,
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("max site cost"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(doc["schema"], "eindecomp/exec-graph/v1");
    assert!(doc["vertices"]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v["machine"].as_u64().unwrap() < 2));

    let doc = json(&run(&["explode", "--graph", "builtin:ffnn", "--out", "-"]));
    assert!(doc["vertices"]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v.get("machine").is_none()));
}

#[test]
fn run_check_passes() {
    let o = run(&[
        "run",
        "--graph",
        "builtin:ffnn",
        "--procs",
        "4",
        "--machines",
        "4",
        "--check",
        "--out",
        "-",
    ]);
    let doc = json(&o);
    assert_eq!(doc["schema"], "eindecomp/run-report/v1");
    assert_eq!(doc["verified"]["passed"], true);
    let sent: u64 = doc["per_machine"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["sent"].as_u64().unwrap())
        .sum();
    assert_eq!(sent, doc["totals"]["transferred"].as_u64().unwrap());
}

#[test]
fn corrupted_kernel_exits_3() {
    let o = run(&[
        "run",
        "--graph",
        "builtin:matmul",
        "--check",
        "--corrupt",
        "Z",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("max abs diff"));
    // without --check the mismatch is only reported
    let o = run(&["run", "--graph", "builtin:matmul", "--corrupt", "Z"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn one_machine_moves_nothing() {
    let doc = json(&run(&[
        "run",
        "--graph",
        "builtin:softmax",
        "--machines",
        "1",
        "--out",
        "-",
    ]));
    assert_eq!(doc["totals"]["transferred"], 0);
}

#[test]
fn schedulers_and_precisions() {
    let base = [
        "run",
        "--graph",
        "builtin:attention",
        "--procs",
        "8",
        "--machines",
        "4",
        "--seed",
        "3",
        "--out",
        "-",
    ];
    let a = json(&run(&base));
    let b = json(&run(&[&base[..], &["--scheduler", "concurrent"]].concat()));
    assert_eq!(a["outputs"], b["outputs"]);
    assert_eq!(a["totals"], b["totals"]);
    let f = json(&run(
        &[&base[..], &["--precision", "f32", "--check"]].concat()
    ));
    assert_eq!(f["verified"]["passed"], true);
    assert_ne!(f["outputs"], a["outputs"]);
}

#[test]
fn enumerate_listings() {
    let o = run(&["enumerate", "--graph", "builtin:matmul", "--procs", "8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("Z: 10 viable"));
    assert_eq!(text.lines().filter(|l| l.starts_with("  [")).count(), 10);

    let o = run(&["enumerate", "--graph", "builtin:matmul", "--procs", "1"]);
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("  [")).count(),
        1
    );

    assert_eq!(
        stdout(&run(&["enumerate", "--balls", "10", "--buckets", "6"])).trim(),
        "3003"
    );
    let o = run(&["enumerate", "--machines", "4", "--joins", "8"]);
    assert_eq!(stdout(&o).lines().count(), 7);
}

#[test]
fn procs_rounded_down() {
    let o = run(&["optimize", "--graph", "builtin:matmul", "--procs", "6"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("rounded down to 4"));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["run"]).status.code(), Some(1));
    assert_eq!(
        run(&["optimize", "--graph", "builtin:matmul", "--procs", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["enumerate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(
        run_stdin(&["optimize", "--graph", "-"], "Z[i] = bogus(")
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["optimize", "--graph", "/nonexistent/g.eg"])
            .status
            .code(),
        Some(2)
    );
    let cyclic = "A[i] = map exp(B[i])\nB[i] = map exp(A[i])\n";
    assert_eq!(
        run_stdin(&["optimize", "--graph", "-"], cyclic)
            .status
            .code(),
        Some(2)
    );
}

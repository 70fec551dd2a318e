//! Acceptance suite AC-1 through AC-9. Runs without the libtest harness so
//! each criterion prints exactly one PASS/FAIL line; exits nonzero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use epiwane::harness::{execute, parse_config, parse_config_str, RunOptions, Subcommand};
use epiwane::verify::{
    ac1_flln_oracle, ac2_rate, ac3_fclt, ac4_exactness, ac5_coupling, ac6_quarantine, ac7_solver, ac8_covariance,
    AcceptanceResult, VerifyPlan,
};

fn reference_plan() -> VerifyPlan {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    parse_config(&path)
        .expect("reference config parses")
        .verify_plan()
        .expect("reference plan")
}

struct Outcome {
    id: &'static str,
    pass: bool,
    line: String,
}

fn timed(id: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Result<AcceptanceResult, String>) -> Outcome {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    match result {
        Ok(r) => {
            let in_time = budget.is_none_or(|b| elapsed < b);
            let budget_note = match budget {
                Some(b) if !in_time => format!(" (runtime {:.1}s exceeds {:.0}s)", elapsed.as_secs_f64(), b.as_secs_f64()),
                Some(b) => format!(" [{:.1}s < {:.0}s]", elapsed.as_secs_f64(), b.as_secs_f64()),
                None => format!(" [{:.1}s]", elapsed.as_secs_f64()),
            };
            let pass = r.pass && in_time;
            let summary = r.line();
            let body = summary.split_once(": ").map_or(summary.as_str(), |x| x.1);
            Outcome {
                id,
                pass,
                line: format!("{id} {}: {body}{budget_note}", if pass { "PASS" } else { "FAIL" }),
            }
        }
        Err(e) => Outcome {
            id,
            pass: false,
            line: format!("{id} FAIL: error: {e}"),
        },
    }
}

const SMALL: &str = r#"{
    "profile": {"family": "sis_gradual", "lambda_base": 2.0, "duration": {"law": "exponential", "rate": 1.0}, "waning_rate": 1.0},
    "initial": {"p_infected": 0.2},
    "horizon": 2.0,
    "dt": 0.02,
    "seed": 5,
    "assignment": "bernoulli",
    "population_sizes": [50, 100, 200],
    "replicates": 12,
    "fclt": {"n": 100, "replicates": 12, "agents": 200, "paths": 40, "dt": 0.1, "probes": [1.0, 2.0]},
    "verify": {"coupling_n": 60, "coupling_replicates": 4, "quarantine_replicates": 4, "exactness_replicates": 500}
}"#;

const ORDER: [Subcommand; 6] = [
    Subcommand::Simulate,
    Subcommand::Flln,
    Subcommand::Fclt,
    Subcommand::Ensemble,
    Subcommand::Compare,
    Subcommand::Verify,
];

fn run_all(dir: &Path, threads: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let cfg = parse_config_str(SMALL).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        out: Some(dir.to_path_buf()),
        seed: None,
        threads: Some(threads),
    };
    for cmd in ORDER {
        execute(cmd, &cfg, &opts).map_err(|e| format!("{cmd:?}: {e}"))?;
    }
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path: PathBuf = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

/// Every subcommand twice at one thread (byte-identical artifacts), then
/// at four threads (same artifacts again).
fn ac9_reproducibility() -> Result<AcceptanceResult, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_all(&tmp.path().join("a"), 1)?;
    let b = run_all(&tmp.path().join("b"), 1)?;
    let c = run_all(&tmp.path().join("c"), 4)?;
    let differing = |x: &BTreeMap<String, Vec<u8>>, y: &BTreeMap<String, Vec<u8>>| -> Vec<String> {
        let mut names: Vec<String> = x.keys().chain(y.keys()).cloned().collect();
        names.sort();
        names.dedup();
        names.into_iter().filter(|n| x.get(n) != y.get(n)).collect()
    };
    let same_threads = differing(&a, &b);
    let across_threads = differing(&a, &c);
    let pass = same_threads.is_empty() && across_threads.is_empty() && !a.is_empty();
    Ok(AcceptanceResult {
        id: "AC-9".into(),
        pass,
        summary: format!(
            "{} artifacts from {} subcommands; differing at threads=1: {:?}; differing at threads=4: {:?}",
            a.len(),
            ORDER.len(),
            same_threads,
            across_threads
        ),
        metrics: Vec::new(),
    })
}

fn main() -> ExitCode {
    // libtest-style flags (e.g. `--nocapture`, filters) are ignored.
    let plan = reference_plan();
    let err = |e: epiwane::verify::VerifyError| e.to_string();
    let secs = Duration::from_secs;
    let outcomes = vec![
        timed("AC-1", Some(secs(10)), || ac1_flln_oracle(&plan.solver).map_err(err)),
        timed("AC-2", Some(secs(600)), || ac2_rate(&plan).map(|r| r.0).map_err(err)),
        timed("AC-3", Some(secs(1200)), || ac3_fclt(&plan).map(|r| r.0).map_err(err)),
        timed("AC-4", Some(secs(60)), || ac4_exactness(plan.exactness_replicates, 4).map_err(err)),
        timed("AC-5", None, || ac5_coupling(&plan).map(|r| r.0).map_err(err)),
        timed("AC-6", None, || ac6_quarantine(&plan).map(|r| r.0).map_err(err)),
        timed("AC-7", None, || ac7_solver(&plan).map_err(err)),
        timed("AC-8", None, || ac8_covariance(&plan).map_err(err)),
        timed("AC-9", None, ac9_reproducibility),
    ];
    println!();
    println!("acceptance criteria:");
    for o in &outcomes {
        println!("{}", o.line);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}

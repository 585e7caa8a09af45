//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! `NDC_ACCEPTANCE_ONLY=1,4,12` restricts the run to the listed criteria.
//! The experiment criteria train with `configs/desk-small.toml` and take
//! several minutes on one core.

mod experiments;
mod gradients;
mod oracles;

use std::process::ExitCode;
use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "gradient suite", gradients::run),
    (2, "decode oracle", oracles::decode),
    (3, "assignment and matching oracles", oracles::assignment_and_matching),
    (4, "bilinear sampler", oracles::bilinear),
    (5, "metric golden cases", oracles::metrics),
    (6, "end-to-end synthetic detection", experiments::detection),
    (7, "detection converges before classification", experiments::convergence),
    (8, "decoupled pipeline vs joint baseline", experiments::strategy),
    (9, "detector capacity", experiments::capacity),
    (10, "joint dataset training", experiments::datasets),
    (11, "probe trajectory", experiments::probe_trajectory),
    (12, "determinism", experiments::determinism),
];

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("NDC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {status} {name}: {} [{:.1}s]",
            outcome.detail,
            t.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

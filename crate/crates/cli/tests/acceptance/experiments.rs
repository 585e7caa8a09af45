//! Experiment criteria, run in-process with the desk configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use ndc_cli::commands::STRATEGIES;
use ndc_cli::{config, run, Command, RunConfig};

use crate::Outcome;

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk-small.toml")
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temp dir")).path()
}

fn quoted(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn cfg(out: &str, extra: &[String]) -> RunConfig {
    let mut overrides = vec![format!("out={}", quoted(&scratch().join(out)))];
    overrides.extend_from_slice(extra);
    config::load(Some(&desk_config()), &overrides).expect("desk config loads")
}

fn exec(command: Command, out: &str, extra: &[String]) -> Result<PathBuf, String> {
    run(command, &cfg(out, extra), false).map_err(|e| format!("{} failed: {e}", command.name()))
}

fn read_csv(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let header = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            header.iter().map(str::to_string).zip(rec.iter().map(str::to_string)).collect()
        })
        .collect()
}

fn field(row: &HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or(f64::NAN)
}

fn row<'a>(rows: &'a [HashMap<String, String>], key: &str, value: &str) -> &'a HashMap<String, String> {
    rows.iter().find(|r| r[key] == value).unwrap_or_else(|| panic!("no row {key}={value}"))
}

/// Shared synthetic split, written once.
fn data() -> Result<&'static Path, String> {
    static DATA: OnceLock<Result<PathBuf, String>> = OnceLock::new();
    DATA.get_or_init(|| exec(Command::GenData, "data", &[]))
        .as_deref()
        .map_err(Clone::clone)
}

fn train_det(out: &str) -> Result<PathBuf, String> {
    let data = data()?;
    exec(
        Command::TrainDet,
        out,
        &[
            format!("data.train={}", quoted(&data.join("train"))),
            format!("data.test={}", quoted(&data.join("test"))),
        ],
    )
}

fn outcome(result: Result<Outcome, String>) -> Outcome {
    result.unwrap_or_else(|e| Outcome::new(false, e))
}

pub fn detection() -> Outcome {
    outcome((|| {
        let t = Instant::now();
        let dir = train_det("det")?;
        let secs = t.elapsed().as_secs_f64();
        let s = &read_csv(&dir.join("summary.csv"))[0];
        let f1 = field(s, "f1");
        Ok(Outcome::new(
            f1 >= 0.95 && secs < 600.0,
            format!(
                "test F1 {f1:.4} (precision {:.3}, recall {:.3}) in {secs:.0}s, need >= 0.95 within 600s",
                field(s, "precision"),
                field(s, "recall")
            ),
        ))
    })())
}

fn dynamics() -> Result<&'static Path, String> {
    static DIR: OnceLock<Result<PathBuf, String>> = OnceLock::new();
    DIR.get_or_init(|| exec(Command::Dynamics, "dynamics", &[]))
        .as_deref()
        .map_err(Clone::clone)
}

pub fn convergence() -> Outcome {
    outcome((|| {
        let rows = read_csv(&dynamics()?.join("summary.csv"));
        let m = row(&rows, "run", "median");
        let (d, c) = (field(m, "detection_epochs"), field(m, "classification_epochs"));
        let per_run: Vec<String> = rows
            .iter()
            .filter(|r| r["run"] != "median")
            .map(|r| format!("{}:{}/{}", r["run"], r["detection_epochs"], r["classification_epochs"]))
            .collect();
        Ok(Outcome::new(
            c > d,
            format!(
                "median epochs to 95% of final: detection {d}, classification {c}, ratio {:.2} ({})",
                field(m, "ratio"),
                per_run.join(" ")
            ),
        ))
    })())
}

pub fn strategy() -> Outcome {
    outcome((|| {
        let dir = exec(Command::AblateStrategy, "strategy", &[])?;
        let rows = read_csv(&dir.join("summary.csv"));
        let avg: Vec<f64> = STRATEGIES.iter().map(|s| field(row(&rows, "strategy", s), "average_f1")).collect();
        let (linear, e2e) = (avg[0], avg[2]);
        Ok(Outcome::new(
            linear >= e2e,
            format!(
                "median average F1: linear {linear:.4}, full {:.4}, end_to_end {e2e:.4}, linear minus end_to_end {:+.4}",
                avg[1],
                linear - e2e
            ),
        ))
    })())
}

pub fn capacity() -> Outcome {
    outcome((|| {
        let dir = exec(Command::AblateCapacity, "capacity", &[])?;
        let rows = read_csv(&dir.join("summary.csv"));
        let (w1, w4) = (row(&rows, "width", "1"), row(&rows, "width", "4"));
        let (f1, f4) = (field(w1, "detection_f1"), field(w4, "detection_f1"));
        Ok(Outcome::new(
            (f1 - f4).abs() <= 0.02,
            format!(
                "median detection F1: width 1 ({} params) {f1:.4}, width 4 ({} params) {f4:.4}, gap {:.4} <= 0.02",
                w1["params"],
                w4["params"],
                (f1 - f4).abs()
            ),
        ))
    })())
}

pub fn datasets() -> Outcome {
    outcome((|| {
        let dir = exec(Command::AblateDatasets, "datasets", &[])?;
        let rows = read_csv(&dir.join("summary.csv"));
        let sep = field(row(&rows, "setting", "separated"), "detection_f1");
        let joint = field(row(&rows, "setting", "joint"), "detection_f1");
        Ok(Outcome::new(
            joint >= sep,
            format!("median small-test detection F1: separated {sep:.4}, joint {joint:.4}"),
        ))
    })())
}

pub fn probe_trajectory() -> Outcome {
    outcome((|| {
        let dir = dynamics()?;
        let epochs = cfg("unused", &[]).joint.epochs;
        let rows = read_csv(&dir.join("probe_trajectory.csv"));
        let listed: Vec<usize> = rows.iter().filter_map(|r| r["epoch"].parse().ok()).collect();
        let complete = listed == (0..=epochs).collect::<Vec<_>>();
        let probed = rows.iter().all(|r| field(r, "probe_f1").is_finite());
        let s = &read_csv(&dir.join("probe_summary.csv"))[0];
        Ok(Outcome::new(
            complete && probed,
            format!(
                "{} rows for epochs 0..={epochs}, probe F1 {:.4} -> min {:.4} at epoch {} -> final {:.4}",
                rows.len(),
                field(s, "initial_probe_f1"),
                field(s, "min_probe_f1"),
                s["min_epoch"],
                field(s, "final_probe_f1")
            ),
        ))
    })())
}

pub fn determinism() -> Outcome {
    outcome((|| {
        let a = train_det("det-a")?;
        let b = train_det("det-b")?;
        let files = ["metrics.csv", "summary.csv", "checkpoints/detector.json"];
        let differ: Vec<&str> = files
            .iter()
            .copied()
            .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
            .collect();
        Ok(Outcome::new(
            differ.is_empty(),
            if differ.is_empty() {
                format!("two train-det runs agree byte for byte on {}", files.join(", "))
            } else {
                format!("outputs differ: {}", differ.join(", "))
            },
        ))
    })())
}

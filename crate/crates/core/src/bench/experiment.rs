use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optimizers::{run_with, state_footprint, RunOptions, RunRecord};
use crate::problems::{CountingOracle, LossOracle};
use crate::tensor::ParamSet;

pub const CSV_HEADER: [&str; 5] = ["step", "loss", "fd_scalar_abs", "est_norm", "wall_ms"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_loss: f64,
    pub best_loss: f64,
    pub total_evals: u64,
    pub footprint_elements: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
    pub final_params: ParamSet,
}

/// Runs the configured experiment in memory. The starting point is zero.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let opt = config.optimizer_config()?;
    let oracle = CountingOracle::new(config.problem.build()?);
    let mut x = ParamSet::zeros(&oracle.dims());
    let initial_loss = oracle.expected_loss(&x);
    let records = run_with(
        &oracle,
        &mut x,
        &opt,
        config.algo,
        RunOptions {
            eval_every: config.eval_every,
            record_timing: config.record_timing,
        },
    )?;
    let final_loss = records.last().map_or(initial_loss, |r| r.loss);
    let best_loss = records.iter().map(|r| r.loss).fold(initial_loss, f64::min);
    let footprint = state_footprint(&opt.shapes(&x.dims())?).for_algorithm(config.algo);
    Ok(ExperimentOutput {
        records,
        summary: Summary {
            final_loss,
            best_loss,
            total_evals: oracle.count(),
            footprint_elements: footprint,
            seed: opt.base_seed.0,
        },
        final_params: x,
    })
}

pub fn summary_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    csv_path.with_file_name(format!("{stem}.summary.json"))
}

pub fn records_to_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in records {
        w.write_record(&[
            r.step.to_string(),
            r.loss.to_string(),
            r.fd_scalar_abs.to_string(),
            r.est_norm.to_string(),
            r.wall_ms.to_string(),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| Error::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Runs the experiment and writes the CSV and the JSON summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary> {
    let out = execute(config)?;
    let csv_path = Path::new(&config.output_path);
    write_atomic(csv_path, &records_to_csv(&out.records)?)?;
    let mut json = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    json.push('\n');
    write_atomic(&summary_path(csv_path), json.as_bytes())?;
    Ok(out.summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::config::{parse_config, ConfigOverrides};

    fn config(dir: &Path, algo: &str, steps: u64) -> ExperimentConfig {
        let flags = ConfigOverrides {
            algo: Some(algo.into()),
            steps: Some(steps),
            problem: Some("quadratic".into()),
            out: Some(dir.join("out.csv").to_string_lossy().into_owned()),
            ..ConfigOverrides::default()
        };
        let mut c = parse_config(None, &flags).unwrap();
        c.problem.shapes = vec![(6, 5)];
        c
    }

    #[test]
    fn zero_steps_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "lozo", 0);
        let s = run_experiment(&c).unwrap();
        assert_eq!(s.total_evals, 0);
        let text = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
        assert_eq!(text, "step,loss,fd_scalar_abs,est_norm,wall_ms\n");
        assert!(dir.path().join("out.summary.json").exists());
    }

    #[test]
    fn eval_count_contract() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), "lozo", 1000);
        c.eval_every = 100;
        let s = run_experiment(&c).unwrap();
        assert_eq!(s.total_evals, 2000);
        assert_eq!(s.footprint_elements, 0);
        let m = run_experiment(&config(dir.path(), "lozo-m", 10)).unwrap();
        assert_eq!(m.footprint_elements, 6 * 2);
    }

    #[test]
    fn byte_identical_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "zo-sgd", 50);
        run_experiment(&c).unwrap();
        let a = std::fs::read(dir.path().join("out.csv")).unwrap();
        let sa = std::fs::read(dir.path().join("out.summary.json")).unwrap();
        run_experiment(&c).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("out.csv")).unwrap());
        assert_eq!(sa, std::fs::read(dir.path().join("out.summary.json")).unwrap());
        assert!(!a.contains(&b'\r'));
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 51);
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), "lozo", 1);
        c.output_path = dir.path().join("missing/dir/out.csv").to_string_lossy().into_owned();
        assert!(matches!(run_experiment(&c), Err(Error::Io(_))));
    }
}

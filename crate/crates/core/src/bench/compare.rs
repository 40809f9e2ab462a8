use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::optimizers::{Algorithm, Optimizer, OptimizerConfig};
use crate::problems::{BoxedOracle, LossOracle, ProblemKind, ProblemSpec};
use crate::rng::Seed;
use crate::tensor::ParamSet;

/// Number of trailing loss records averaged when testing the target.
pub const TRAILING_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CompareEntry {
    pub label: String,
    pub algo: Algorithm,
    pub config: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub algo: Algorithm,
    /// Cumulative loss evaluations at the first record whose trailing mean
    /// reaches the target.
    pub evals_to_target: Option<u64>,
    pub final_loss: f64,
    /// The run stopped on a non-finite loss.
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompareOptions {
    pub eval_every: u64,
    /// Stop a run as soon as it reaches the target.
    pub stop_at_target: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            eval_every: 1,
            stop_at_target: false,
        }
    }
}

fn run_entry(oracle: &BoxedOracle, entry: &CompareEntry, target: f64, opts: CompareOptions) -> Result<ComparisonRow> {
    let mut x = ParamSet::zeros(&oracle.dims());
    let mut opt = Optimizer::new(entry.algo, entry.config.clone(), &x.dims())?;
    let per_step = entry.algo.evals_per_step();
    let mut window = VecDeque::with_capacity(TRAILING_WINDOW);
    let mut reached = None;
    let mut final_loss = oracle.expected_loss(&x);
    let mut diverged = false;
    for t in 0..entry.config.total_steps {
        if opt.step(oracle, &mut x).is_err() {
            diverged = true;
            final_loss = f64::INFINITY;
            break;
        }
        let done = t + 1;
        if done % opts.eval_every != 0 && done != entry.config.total_steps {
            continue;
        }
        final_loss = oracle.expected_loss(&x);
        if !final_loss.is_finite() {
            diverged = true;
            break;
        }
        if window.len() == TRAILING_WINDOW {
            window.pop_front();
        }
        window.push_back(final_loss);
        if reached.is_none()
            && window.len() == TRAILING_WINDOW
            && window.iter().sum::<f64>() / TRAILING_WINDOW as f64 <= target
        {
            reached = Some(done * per_step);
            if opts.stop_at_target {
                break;
            }
        }
    }
    Ok(ComparisonRow {
        label: entry.label.clone(),
        algo: entry.algo,
        evals_to_target: reached,
        final_loss,
        diverged,
    })
}

/// Runs every entry on the same problem. Independent runs execute in parallel;
/// each run is sequential and the rows come back in input order.
pub fn compare_algorithms(
    problem: &ProblemSpec,
    entries: &[CompareEntry],
    target_loss: f64,
    opts: CompareOptions,
) -> Result<Vec<ComparisonRow>> {
    let oracle = problem.build()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(entries.len().max(1));
    if workers <= 1 {
        return entries.iter().map(|e| run_entry(&oracle, e, target_loss, opts)).collect();
    }
    let chunk = entries.len().div_ceil(workers);
    let oracle = &oracle;
    std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|e| run_entry(oracle, e, target_loss, opts))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut rows = Vec::with_capacity(entries.len());
        for h in handles {
            rows.extend(h.join().expect("comparison worker panicked")?);
        }
        Ok(rows)
    })
}

pub fn format_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("label\talgo\tevals_to_target\tfinal_loss\n");
    for r in rows {
        let evals = match (r.evals_to_target, r.diverged) {
            (Some(e), _) => e.to_string(),
            (None, true) => "diverged".into(),
            (None, false) => "not reached".into(),
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.label, r.algo, evals, r.final_loss);
    }
    out
}

/// Setup of the planted low-rank LOZO-vs-RGE comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedComparison {
    pub shape: (usize, usize),
    pub true_rank: usize,
    pub noise_scale: f64,
    pub num_samples: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Learning-rate grid shared by both algorithms.
    pub grid: Vec<f64>,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Target as a multiple of the problem's optimal loss.
    pub target_factor: f64,
    pub rank: usize,
    pub nu: u64,
}

impl Default for PlantedComparison {
    fn default() -> Self {
        Self {
            shape: (32, 32),
            true_rank: 2,
            noise_scale: 0.1,
            num_samples: 4,
            batch_size: 64,
            seeds: (0..10).collect(),
            grid: vec![5e-4, 1e-3, 2e-3],
            max_steps: 15_000,
            eval_every: 10,
            target_factor: 1.2,
            rank: 2,
            nu: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub lozo_evals: Option<u64>,
    pub rge_evals: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedOutcome {
    pub lozo_alpha: f64,
    pub rge_alpha: f64,
    pub seeds: Vec<SeedOutcome>,
    /// Seeds where LOZO reached the target with strictly fewer evaluations.
    pub lozo_wins: usize,
}

fn median_evals(v: &[Option<u64>]) -> f64 {
    let mut xs: Vec<f64> = v.iter().map(|e| e.map_or(f64::INFINITY, |e| e as f64)).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl PlantedComparison {
    pub fn problem(&self, seed: u64) -> ProblemSpec {
        ProblemSpec {
            kind: ProblemKind::PlantedLowRank,
            shapes: vec![self.shape],
            data_seed: Seed(seed),
            noise_scale: self.noise_scale,
            true_rank: self.true_rank,
            num_samples: self.num_samples,
            batch_size: self.batch_size,
        }
    }

    /// Each algorithm gets the grid point with the lowest median
    /// evaluations-to-target over seeds; the two are then compared per seed.
    pub fn run(&self) -> Result<PlantedOutcome> {
        let mut table: Vec<Vec<(Option<u64>, Option<u64>)>> = Vec::new();
        for &seed in &self.seeds {
            let problem = self.problem(seed);
            let target = self.target_factor * problem.build()?.optimal_loss().unwrap_or(0.0);
            let mut entries = Vec::new();
            for algo in [Algorithm::Lozo, Algorithm::ZoSgd] {
                for &alpha in &self.grid {
                    entries.push(CompareEntry {
                        label: format!("{algo}@{alpha}"),
                        algo,
                        config: OptimizerConfig {
                            alpha,
                            nu: self.nu,
                            ranks: vec![self.rank],
                            total_steps: self.max_steps,
                            base_seed: Seed(seed),
                            ..OptimizerConfig::default()
                        },
                    });
                }
            }
            let rows = compare_algorithms(
                &problem,
                &entries,
                target,
                CompareOptions {
                    eval_every: self.eval_every,
                    stop_at_target: true,
                },
            )?;
            let g = self.grid.len();
            table.push((0..g).map(|i| (rows[i].evals_to_target, rows[g + i].evals_to_target)).collect());
        }
        let pick = |which: fn(&(Option<u64>, Option<u64>)) -> Option<u64>| {
            (0..self.grid.len())
                .min_by(|&a, &b| {
                    let ma = median_evals(&table.iter().map(|row| which(&row[a])).collect::<Vec<_>>());
                    let mb = median_evals(&table.iter().map(|row| which(&row[b])).collect::<Vec<_>>());
                    ma.total_cmp(&mb)
                })
                .unwrap_or(0)
        };
        let li = pick(|p| p.0);
        let ri = pick(|p| p.1);
        let seeds: Vec<SeedOutcome> = self
            .seeds
            .iter()
            .zip(&table)
            .map(|(&seed, row)| SeedOutcome {
                seed,
                lozo_evals: row[li].0,
                rge_evals: row[ri].1,
            })
            .collect();
        let lozo_wins = seeds
            .iter()
            .filter(|s| match (s.lozo_evals, s.rge_evals) {
                (Some(l), Some(r)) => l < r,
                (Some(_), None) => true,
                _ => false,
            })
            .count();
        Ok(PlantedOutcome {
            lozo_alpha: self.grid[li],
            rge_alpha: self.grid[ri],
            seeds,
            lozo_wins,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(label: &str, algo: Algorithm, alpha: f64) -> CompareEntry {
        CompareEntry {
            label: label.into(),
            algo,
            config: OptimizerConfig {
                alpha,
                nu: 5,
                total_steps: 400,
                base_seed: Seed(1),
                ..OptimizerConfig::default()
            },
        }
    }

    fn problem() -> ProblemSpec {
        ProblemSpec {
            kind: ProblemKind::Quadratic,
            shapes: vec![(4, 4)],
            noise_scale: 0.0,
            ..ProblemSpec::default()
        }
    }

    #[test]
    fn single_and_identical_rows() {
        let rows = compare_algorithms(&problem(), &[entry("a", Algorithm::Lozo, 0.02)], 0.5, CompareOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        let e = entry("a", Algorithm::Lozo, 0.02);
        let rows = compare_algorithms(&problem(), &[e.clone(), e], 0.5, CompareOptions::default()).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert!(rows[0].evals_to_target.is_some());
        assert_eq!(rows[0].evals_to_target.unwrap() % 2, 0);
    }

    #[test]
    fn unreachable_and_diverged() {
        let rows = compare_algorithms(
            &problem(),
            &[entry("slow", Algorithm::ZoSgd, 0.0), entry("wild", Algorithm::ZoSgd, 1e12)],
            1e-9,
            CompareOptions::default(),
        )
        .unwrap();
        assert_eq!(rows[0].evals_to_target, None);
        assert!(!rows[0].diverged);
        assert!(rows[1].final_loss > 1e10);

        let nan_beyond: BoxedOracle = Box::new(crate::problems::FnOracle::new(vec![(4, 4)], 1, |x: &ParamSet, _| {
            if x.norm() > 10.0 {
                f64::NAN
            } else {
                -x.layer(0).as_slice().iter().sum::<f64>()
            }
        }));
        let row = run_entry(&nan_beyond, &entry("wild", Algorithm::ZoSgd, 1.0), -1e9, CompareOptions::default()).unwrap();
        assert!(row.diverged);
        let table = format_table(&[rows[0].clone(), row]);
        assert!(table.contains("not reached") && table.contains("diverged"));
    }

    #[test]
    fn early_stop_keeps_evals() {
        let e = entry("a", Algorithm::Lozo, 0.02);
        let full = compare_algorithms(&problem(), &[e.clone()], 0.5, CompareOptions::default()).unwrap();
        let stop = compare_algorithms(
            &problem(),
            &[e],
            0.5,
            CompareOptions {
                eval_every: 1,
                stop_at_target: true,
            },
        )
        .unwrap();
        assert_eq!(full[0].evals_to_target, stop[0].evals_to_target);
    }

    #[test]
    fn median_handles_unreached() {
        assert_eq!(median_evals(&[Some(4), None, Some(2)]), 4.0);
        assert_eq!(median_evals(&[Some(4), Some(2)]), 3.0);
        assert!(median_evals(&[None, None]).is_infinite());
    }
}

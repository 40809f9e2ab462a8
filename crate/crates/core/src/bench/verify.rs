use std::fmt;
use std::time::Instant;

use clap::ValueEnum;

use super::compare::{compare_algorithms, CompareEntry, CompareOptions, PlantedComparison};
use super::config::{parse_config, ConfigOverrides};
use super::experiment::run_experiment;
use crate::error::Result;
use crate::estimators::{cge, lge, lge_from_scalar, lge_scalar, rge, EstimatorConfig};
use crate::optimizers::{
    lge_sgd_step, lozo_step, project_momentum, run, state_footprint, zo_sgd_direction, Algorithm, LozoState,
    OptimizerConfig,
};
use crate::problems::{gradient_check, gradient_rank_profile, FnOracle, LossOracle, ProblemKind, ProblemSpec};
use crate::rng::{sample_gaussian, sample_v, PerturbationSketch, SamplerKind, Seed};
use crate::subspace::{least_squares_projection, run_subspace_method};
use crate::tensor::{numeric_rank, LayerShape, Matrix, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Fast,
    Full,
}

/// Deliberate defects used to confirm that the checks can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Mutation {
    #[default]
    None,
    /// Drop the `1/r` factor from the low-rank estimate.
    DropRankScaling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    AtMost,
    AtLeast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub measured: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.relation {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
        };
        write!(
            f,
            "{:<4} {:<22} measured {:<12.4e} {op} {:<10.3e} ({:.1}s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.seconds,
            self.detail
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub level: Level,
    pub checks: Vec<CheckReport>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

struct Outcome {
    measured: f64,
    relation: Relation,
    threshold: f64,
    detail: String,
}

fn at_most(measured: f64, threshold: f64, detail: impl Into<String>) -> Outcome {
    Outcome {
        measured,
        relation: Relation::AtMost,
        threshold,
        detail: detail.into(),
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<Outcome>) -> CheckReport {
    let start = Instant::now();
    let res = f();
    let seconds = start.elapsed().as_secs_f64();
    match res {
        Ok(o) => {
            let passed = match o.relation {
                Relation::AtMost => o.measured <= o.threshold,
                Relation::AtLeast => o.measured >= o.threshold,
            };
            CheckReport {
                name,
                measured: o.measured,
                relation: o.relation,
                threshold: o.threshold,
                passed,
                detail: o.detail,
                seconds,
            }
        }
        Err(e) => CheckReport {
            name,
            measured: f64::NAN,
            relation: Relation::AtMost,
            threshold: f64::NAN,
            passed: false,
            detail: format!("error: {e}"),
            seconds,
        },
    }
}

fn spec(kind: ProblemKind, shapes: Vec<(usize, usize)>, seed: u64) -> ProblemSpec {
    ProblemSpec {
        kind,
        shapes,
        data_seed: Seed(seed),
        true_rank: 2,
        num_samples: 4,
        batch_size: 4,
        ..ProblemSpec::default()
    }
}

fn small_problems() -> Vec<ProblemSpec> {
    vec![
        spec(ProblemKind::Quadratic, vec![(8, 6), (5, 7)], 1),
        spec(ProblemKind::PlantedLowRank, vec![(10, 8)], 2),
        spec(ProblemKind::Logistic, vec![(3, 9)], 3),
        spec(ProblemKind::TinyMlp, vec![(6, 4), (3, 6)], 4),
    ]
}

fn random_point(dims: &[(usize, usize)], seed: u64, scale: f64) -> ParamSet {
    ParamSet::new(
        dims.iter()
            .enumerate()
            .map(|(l, &(m, n))| sample_gaussian(Seed(seed.wrapping_mul(7919).wrapping_add(l as u64)), m, n).scaled(scale))
            .collect(),
    )
}

fn sketch_for(x: &ParamSet, r: usize, t: u64, kind: SamplerKind) -> Result<PerturbationSketch> {
    let shapes: Vec<LayerShape> = x
        .dims()
        .iter()
        .map(|&(m, n)| LayerShape::new(m, n, r.min(m).min(n)))
        .collect::<Result<_>>()?;
    Ok(PerturbationSketch::derived(Seed(0xC0FFEE), &shapes, t, t, kind))
}

/// Monte Carlo mean of the low-rank estimate against the analytic gradient.
pub fn check_unbiasedness(samples: u64, mutation: Mutation) -> Result<(f64, f64)> {
    let q = spec(ProblemKind::Quadratic, vec![(8, 6)], 11).build()?;
    let mut x = random_point(&[(8, 6)], 5, 1.0);
    let grad = q.analytic_grad(&x, 0).expect("quadratic has a gradient");
    let mut acc = x.zeros_like();
    for t in 0..samples {
        let sk = sketch_for(&x, 2, t, SamplerKind::StandardNormal)?;
        let fd = lge_scalar(&q, &mut x, &sk, 1e-6, 0)?;
        let mut g = lge_from_scalar(&sk, fd.c)?;
        if mutation == Mutation::DropRankScaling {
            g.scale(2.0);
        }
        acc.add_scaled(&g, 1.0)?;
    }
    acc.scale(1.0 / samples as f64);
    let mut diff = acc;
    diff.add_scaled(&grad, -1.0)?;
    let tol = 0.05f64.max(4.0 / (samples as f64).sqrt());
    Ok((diff.norm() / grad.norm(), tol))
}

/// Largest `numeric_rank − r` over `evals` estimates across problems and samplers.
pub fn check_estimate_ranks(evals: usize) -> Result<(usize, usize)> {
    let problems = small_problems();
    let mut violations = 0;
    let mut done = 0;
    let mut i = 0u64;
    while done < evals {
        for p in &problems {
            let oracle = p.build()?;
            for kind in SamplerKind::ALL {
                if done >= evals {
                    break;
                }
                let r = 1 + (i % 3) as usize;
                let mut x = random_point(&oracle.dims(), i, 0.5);
                let sk = sketch_for(&x, r, i, kind)?;
                let cfg = EstimatorConfig::new(1e-3, sk_ranks(&sk), kind)?;
                let g = lge(&oracle, &mut x, &sk, &cfg, (i as usize) % oracle.num_samples())?;
                for (l, layer) in g.layers().iter().enumerate() {
                    if numeric_rank(layer, 1e-10) > sk.layers()[l].shape.r {
                        violations += 1;
                    }
                }
                done += 1;
                i += 1;
            }
        }
    }
    Ok((violations, done))
}

fn sk_ranks(sk: &PerturbationSketch) -> Vec<usize> {
    sk.layers().iter().map(|l| l.shape.r).collect()
}

/// Counts periods whose accumulated update exceeds rank `r`.
pub fn check_period_ranks(seeds: u64, periods: u64) -> Result<(usize, usize)> {
    let q = spec(ProblemKind::Quadratic, vec![(16, 12), (9, 10)], 21).build()?;
    let mut violations = 0;
    let mut checked = 0;
    for nu in [10u64, 50] {
        for seed in 0..seeds {
            let cfg = OptimizerConfig {
                alpha: 2e-3,
                nu,
                ranks: vec![2],
                total_steps: nu * periods,
                base_seed: Seed(seed),
                ..OptimizerConfig::default()
            };
            let mut x = random_point(&q.dims(), seed + 100, 0.3);
            let mut state = LozoState::new();
            let mut anchor = x.clone();
            for t in 1..=cfg.total_steps {
                lozo_step(&mut x, &mut state, &q, &cfg)?;
                if t % nu == 0 {
                    for l in 0..x.num_layers() {
                        let mut d = x.layer(l).clone();
                        d.add_scaled(anchor.layer(l), -1.0)?;
                        if numeric_rank(&d, 1e-8) > 2 {
                            violations += 1;
                        }
                        checked += 1;
                    }
                    anchor = x.clone();
                }
            }
        }
    }
    Ok((violations, checked))
}

/// Max-abs gap between LOZO and the subspace method at period boundaries.
pub fn check_equivalence(kind: SamplerKind) -> Result<f64> {
    let q = spec(ProblemKind::Quadratic, vec![(16, 16)], 31).build()?;
    let (nu, periods) = (10u64, 5u64);
    let cfg = OptimizerConfig {
        alpha: 0.01,
        nu,
        ranks: vec![2],
        total_steps: nu * periods,
        base_seed: Seed(77),
        v_kind: kind,
        ..OptimizerConfig::default()
    };
    let x0 = ParamSet::zeros(&q.dims());
    let reference = run_subspace_method(&q, &x0, &cfg, periods)?;
    let mut x = x0;
    let mut state = LozoState::new();
    let mut worst: f64 = 0.0;
    for t in 1..=cfg.total_steps {
        lozo_step(&mut x, &mut state, &q, &cfg)?;
        if t % nu == 0 {
            worst = worst.max(x.max_abs_diff(&reference[(t / nu) as usize]));
        }
    }
    Ok(worst)
}

/// Worst `‖X_after − X_before‖ / (1 + ‖X_before‖)` over `calls` estimator calls.
pub fn check_restore(calls: u64) -> Result<f64> {
    let problems = small_problems();
    let mut worst: f64 = 0.0;
    for i in 0..calls {
        let p = &problems[(i % problems.len() as u64) as usize];
        let oracle = p.build()?;
        let scale = [0.1, 1.0, 10.0][(i % 3) as usize];
        let mut x = random_point(&oracle.dims(), i + 1000, scale);
        let before = x.clone();
        let kind = SamplerKind::ALL[(i % 3) as usize];
        let sk = sketch_for(&x, 2, i, kind)?;
        lge_scalar(&oracle, &mut x, &sk, 1e-3, (i as usize) % oracle.num_samples())?;
        let mut d = x;
        d.add_scaled(&before, -1.0)?;
        worst = worst.max(d.norm() / (1.0 + before.norm()));
    }
    Ok(worst)
}

/// Closed-form vs direct least-squares projection with exactly orthogonal samplers.
pub fn check_projection(trials: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..trials {
        let n = 8 + (i as usize * 7) % 57;
        let r = 1 + (i as usize) % 8.min(n);
        let m = 3 + (i as usize) % 9;
        let kind = if i % 2 == 0 {
            SamplerKind::HaarScaled
        } else {
            SamplerKind::RandomCoordinate
        };
        let v_old = sample_v(Seed(2 * i + 1), n, r, kind)?;
        let v_new = sample_v(Seed(2 * i + 2), n, r, kind)?;
        let nm = sample_gaussian(Seed(10_000 + i), m, r);
        let closed = project_momentum(&nm, &v_old, &v_new, n)?;
        let direct = least_squares_projection(&nm, &v_old, &v_new)?.value;
        worst = worst.max(closed.max_abs_diff(&direct));
    }
    Ok(worst)
}

/// Returns `|ratio − Σmr/Σmn|` plus the 2048×2048 example's ratio.
pub fn check_footprint() -> Result<(f64, f64)> {
    let shapes = vec![
        LayerShape::new(768, 768, 2)?,
        LayerShape::new(3072, 768, 4)?,
        LayerShape::new(768, 3072, 4)?,
        LayerShape::new(50, 768, 1)?,
    ];
    let f = state_footprint(&shapes);
    let mr: usize = shapes.iter().map(|s| s.m * s.r).sum();
    let mn: usize = shapes.iter().map(|s| s.m * s.n).sum();
    let gap = (f.momentum_ratio() - mr as f64 / mn as f64).abs() + (f.lozo + f.zo_sgd) as f64;
    let big = state_footprint(&[LayerShape::new(2048, 2048, 2)?]);
    Ok((gap, big.momentum_ratio()))
}

/// Number of steps at which LOZO with `ν = 1` and the eager recursion disagree.
pub fn check_nu_one(steps: u64) -> Result<usize> {
    let q = spec(ProblemKind::Quadratic, vec![(12, 10), (4, 6)], 41).build()?;
    let cfg = OptimizerConfig {
        alpha: 0.005,
        nu: 1,
        ranks: vec![2],
        total_steps: steps,
        base_seed: Seed(5),
        ..OptimizerConfig::default()
    };
    let mut a = ParamSet::zeros(&q.dims());
    let mut b = a.clone();
    let mut state = LozoState::new();
    let mut mismatches = 0;
    for t in 0..steps {
        lozo_step(&mut a, &mut state, &q, &cfg)?;
        lge_sgd_step(&mut b, &q, &cfg, t)?;
        if a != b {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Worst CGE relative error on a quadratic over several `ε ≤ 1e-2`.
pub fn check_cge() -> Result<f64> {
    let q = spec(ProblemKind::Quadratic, vec![(6, 5), (3, 4)], 51).build()?;
    let mut worst: f64 = 0.0;
    for (i, eps) in [1e-2, 1e-3, 1e-4, 1e-5].into_iter().enumerate() {
        let mut x = random_point(&q.dims(), 60 + i as u64, 1.0);
        let grad = q.analytic_grad(&x, 1).expect("quadratic has a gradient");
        let est = cge(&q, &mut x, eps, 1)?;
        let mut d = est;
        d.add_scaled(&grad, -1.0)?;
        worst = worst.max(d.norm() / grad.norm());
    }
    Ok(worst)
}

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

/// Worst ulp distance between RGE on a linear loss and `⟨C, Z⟩ Z`.
pub fn check_rge_linear(trials: u64) -> Result<u64> {
    let dims = [(5usize, 4usize), (3, 3)];
    let mut worst = 0;
    for i in 0..trials {
        let c = random_point(&dims, 500 + i, 1.0);
        let cc = c.clone();
        let loss = FnOracle::new(dims.to_vec(), 1, move |x: &ParamSet, _| cc.dot(x));
        let z = zo_sgd_direction(&dims, Seed(900 + i), i);
        let mut x = ParamSet::zeros(&dims);
        let eps = 2f64.powi(-10);
        let g = rge(&loss, &mut x, &z, eps, 0)?;
        let s = c.dot(&z);
        for (gl, zl) in g.layers().iter().zip(z.layers()) {
            for (a, b) in gl.as_slice().iter().zip(zl.as_slice()) {
                worst = worst.max(ulps(*a, s * b));
            }
        }
    }
    Ok(worst)
}

/// Config round trip plus two identical runs compared byte for byte.
pub fn check_determinism() -> Result<bool> {
    let dir = tempfile::tempdir()?;
    let mut configs = Vec::new();
    for algo in ["zo-sgd", "lozo", "lozo-m"] {
        let flags = ConfigOverrides {
            algo: Some(algo.into()),
            steps: Some(60),
            nu: Some(7),
            problem: Some("planted-low-rank".into()),
            out: Some(dir.path().join(format!("{algo}.csv")).to_string_lossy().into_owned()),
            ..ConfigOverrides::default()
        };
        configs.push(parse_config(None, &flags)?);
    }
    let mut ok = true;
    for c in &configs {
        let again = parse_config(Some(&c.to_json()), &ConfigOverrides::default())?;
        ok &= &again == c;
        run_experiment(c)?;
        let first = std::fs::read(&c.output_path)?;
        run_experiment(&again)?;
        ok &= first == std::fs::read(&c.output_path)?;
    }
    Ok(ok)
}

/// Worst relative error of analytic gradients against central differences.
pub fn check_gradients() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in small_problems() {
        let o = p.build()?;
        for k in 0..5 {
            let x = random_point(&o.dims(), 300 + k, 0.5);
            if let Some(e) = gradient_check(&o, &x, k as usize % o.num_samples(), 1e-6)? {
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}

/// Touches the remaining public entry points once; returns how many ran.
pub fn check_api_smoke() -> Result<usize> {
    let mut count = 0;
    for p in small_problems() {
        let o = p.build()?;
        let x = ParamSet::zeros(&o.dims());
        gradient_rank_profile(&o, &random_point(&o.dims(), 3, 0.5), 0, 1)?;
        for algo in Algorithm::ALL {
            let cfg = OptimizerConfig {
                alpha: 1e-3,
                nu: 3,
                total_steps: 6,
                ranks: vec![1],
                ..OptimizerConfig::default()
            };
            let mut y = x.clone();
            run(&o, &mut y, &cfg, algo)?;
            count += 1;
        }
    }
    let rows = compare_algorithms(
        &spec(ProblemKind::Quadratic, vec![(4, 4)], 0),
        &[CompareEntry {
            label: "lozo".into(),
            algo: Algorithm::Lozo,
            config: OptimizerConfig {
                total_steps: 20,
                ..OptimizerConfig::default()
            },
        }],
        0.0,
        CompareOptions::default(),
    )?;
    count += rows.len();
    let n = Matrix::zeros(3, 2);
    let v = sample_v(Seed(1), 6, 2, SamplerKind::HaarScaled)?;
    least_squares_projection(&n, &v, &v)?;
    count += 1;
    Ok(count)
}

pub fn verify_suite(level: Level) -> VerifyReport {
    verify_suite_with(level, Mutation::None)
}

pub fn verify_suite_with(level: Level, mutation: Mutation) -> VerifyReport {
    let full = level == Level::Full;
    let mut checks = vec![
        timed("unbiasedness", || {
            let n = 100_000;
            let (err, tol) = check_unbiasedness(n, mutation)?;
            Ok(at_most(err, tol, format!("relative error of the mean over {n} sketches")))
        }),
        timed("estimate-rank", || {
            let (v, n) = check_estimate_ranks(if full { 1000 } else { 300 })?;
            Ok(at_most(v as f64, 0.0, format!("violations over {n} estimates")))
        }),
        timed("period-rank", || {
            let (v, n) = check_period_ranks(if full { 5 } else { 2 }, 4)?;
            Ok(at_most(v as f64, 0.0, format!("violations over {n} layer-periods")))
        }),
        timed("equivalence", || {
            let kinds: &[SamplerKind] = if full { &SamplerKind::ALL } else { &[SamplerKind::StandardNormal] };
            let mut worst: f64 = 0.0;
            for &k in kinds {
                worst = worst.max(check_equivalence(k)?);
            }
            Ok(at_most(worst, 1e-8, "max-abs gap to the subspace method"))
        }),
        timed("restore", || {
            let n = if full { 10_000 } else { 2_000 };
            Ok(at_most(check_restore(n)?, 1e-12, format!("worst relative drift over {n} calls")))
        }),
        timed("projection", || {
            Ok(at_most(check_projection(100)?, 1e-10, "closed form vs normal equations"))
        }),
        timed("footprint", || {
            let (gap, ratio) = check_footprint()?;
            Ok(at_most(gap, 0.0, format!("2048x2048 r=2 ratio {ratio:.3e}")))
        }),
        timed("nu-one", || {
            Ok(at_most(check_nu_one(200)? as f64, 0.0, "mismatching steps out of 200"))
        }),
        timed("cge", || Ok(at_most(check_cge()?, 1e-9, "relative error, eps 1e-2..1e-5"))),
        timed("rge-linear", || {
            Ok(at_most(check_rge_linear(20)? as f64, 8.0, "ulps from <C,Z>Z"))
        }),
        timed("gradient-check", || {
            Ok(at_most(check_gradients()?, 1e-5, "analytic vs central differences"))
        }),
        timed("determinism", || {
            let ok = check_determinism()?;
            Ok(at_most(if ok { 0.0 } else { 1.0 }, 0.0, "config round trip and byte-identical CSV"))
        }),
        timed("api-smoke", || {
            let n = check_api_smoke()?;
            Ok(Outcome {
                measured: n as f64,
                relation: Relation::AtLeast,
                threshold: 14.0,
                detail: "entry points exercised".into(),
            })
        }),
    ];
    if full {
        checks.push(timed("lozo-vs-rge", || {
            let out = PlantedComparison::default().run()?;
            Ok(Outcome {
                measured: out.lozo_wins as f64,
                relation: Relation::AtLeast,
                threshold: 7.0,
                detail: format!(
                    "seeds where LOZO (alpha {}) beat RGE (alpha {}) to 1.2x optimum",
                    out.lozo_alpha, out.rge_alpha
                ),
            })
        }));
    }
    VerifyReport { level, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ulps_counts_neighbours() {
        assert_eq!(ulps(1.0, 1.0), 0);
        assert_eq!(ulps(1.0, f64::from_bits(1.0f64.to_bits() + 3)), 3);
        assert_eq!(ulps(-0.0, 0.0), 0);
        assert_eq!(ulps(f64::from_bits(1), -f64::from_bits(1)), 2);
    }

    #[test]
    fn mutation_breaks_unbiasedness() {
        let (err, tol) = check_unbiasedness(20_000, Mutation::DropRankScaling).unwrap();
        assert!(err > tol, "{err} <= {tol}");
    }

    #[test]
    fn fast_suite_passes() {
        let report = verify_suite(Level::Fast);
        assert!(report.all_passed(), "{report}");
    }
}

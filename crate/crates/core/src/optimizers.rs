//! Zeroth-order optimizers: ZO-SGD with the full-size randomized estimator,
//! LOZO (low-rank estimator with lazily resampled `V`) and LOZO-M (LOZO with
//! low-rank momentum projected across subspaces).
//!
//! All randomness is replayed from seeds: a step never keeps a full-size
//! perturbation around once it returns.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{check_epsilon, lge_scalar, StoredFactors};
use crate::problems::LossOracle;
use crate::rng::{derive_seed, sample_gaussian, sample_index, sample_v, PerturbationSketch};
use crate::rng::{LayerSketch, SamplerKind, Seed, Stream};
use crate::tensor::{add_scaled_outer, LayerShape, Matrix, ParamSet};

pub const DEFAULT_RANK: usize = 2;
pub const DEFAULT_NU: u64 = 50;
pub const DEFAULT_BETA: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[serde(alias = "rge")]
    ZoSgd,
    Lozo,
    LozoM,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::ZoSgd, Algorithm::Lozo, Algorithm::LozoM];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ZoSgd => "zo-sgd",
            Algorithm::Lozo => "lozo",
            Algorithm::LozoM => "lozo-m",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zo-sgd" | "rge" => Some(Algorithm::ZoSgd),
            "lozo" => Some(Algorithm::Lozo),
            "lozo-m" => Some(Algorithm::LozoM),
            _ => None,
        }
    }

    /// Loss evaluations per step; every algorithm here uses one central difference.
    pub fn evals_per_step(self) -> u64 {
        2
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Learning rate `α`.
    pub alpha: f64,
    pub epsilon: f64,
    /// Resampling interval `ν` for `V`.
    pub nu: u64,
    /// Per-layer ranks. A single entry applies to every layer.
    pub ranks: Vec<usize>,
    pub beta: f64,
    pub total_steps: u64,
    pub base_seed: Seed,
    pub v_kind: SamplerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            epsilon: crate::estimators::DEFAULT_EPSILON,
            nu: DEFAULT_NU,
            ranks: vec![DEFAULT_RANK],
            beta: DEFAULT_BETA,
            total_steps: 1000,
            base_seed: Seed(0),
            v_kind: SamplerKind::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0 and finite, got {}", self.alpha)));
        }
        check_epsilon(self.epsilon)?;
        if self.nu == 0 {
            return Err(Error::invalid("nu must be at least 1"));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::invalid(format!("ranks must be positive, got {:?}", self.ranks)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must be in [0, 1), got {}", self.beta)));
        }
        Ok(())
    }

    /// Layer shapes with ranks resolved against the given dimensions.
    pub fn shapes(&self, dims: &[(usize, usize)]) -> Result<Vec<LayerShape>> {
        let ranks: Vec<usize> = match self.ranks.as_slice() {
            [r] => vec![*r; dims.len()],
            rs if rs.len() == dims.len() => rs.to_vec(),
            rs => {
                return Err(Error::dims(
                    "optimizer ranks",
                    format!("1 or {} entries", dims.len()),
                    rs.len(),
                ))
            }
        };
        dims.iter()
            .zip(ranks)
            .map(|(&(m, n), r)| LayerShape::new(m, n, r))
            .collect()
    }
}

/// Step and period counters plus the seeds of the current and previous `V`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LozoState {
    pub t: u64,
    pub k: u64,
    pub v_seeds: Vec<Seed>,
    pub prev_v_seeds: Option<Vec<Seed>>,
}

impl LozoState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rotates the `V` seeds when `t mod ν = 0`. Returns whether it did.
    fn advance_period(&mut self, config: &OptimizerConfig, num_layers: usize) -> bool {
        if self.t % config.nu != 0 {
            return false;
        }
        self.k = self.t / config.nu;
        let fresh: Vec<Seed> = (0..num_layers)
            .map(|l| derive_seed(config.base_seed, Stream::V, l, self.k))
            .collect();
        let old = std::mem::replace(&mut self.v_seeds, fresh);
        self.prev_v_seeds = (!old.is_empty()).then_some(old);
        true
    }

    fn sketch(&self, config: &OptimizerConfig, shapes: &[LayerShape]) -> PerturbationSketch {
        PerturbationSketch::new(
            shapes
                .iter()
                .enumerate()
                .map(|(l, &shape)| LayerSketch {
                    seed_u: derive_seed(config.base_seed, Stream::U, l, self.t),
                    seed_v: self.v_seeds[l],
                    shape,
                    v_kind: config.v_kind,
                })
                .collect(),
        )
    }
}

/// Low-rank momentum `N_ℓ ∈ R^{m_ℓ × r_ℓ}`; the full momentum is `N_ℓ V_ℓᵀ / r_ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub n: Vec<Matrix>,
    pub beta: f64,
}

impl MomentumState {
    pub fn zeros(shapes: &[LayerShape], beta: f64) -> Self {
        Self {
            n: shapes.iter().map(|s| Matrix::zeros(s.m, s.r)).collect(),
            beta,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.n.iter().map(Matrix::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub t: u64,
    /// Finite-difference scalar `c`.
    pub c: f64,
    /// Frobenius norm of the update direction (before the learning rate).
    pub est_norm: f64,
}

fn abort(t: u64) -> impl FnOnce(Error) -> Error {
    move |e| Error::StepAborted {
        step: t,
        source: Box::new(e),
    }
}

fn check_step(config: &OptimizerConfig, t: u64) -> Result<()> {
    if t >= config.total_steps {
        return Err(Error::invalid(format!(
            "step {t} is past the budget of {} steps",
            config.total_steps
        )));
    }
    Ok(())
}

/// `‖U Vᵀ‖_F` from the two `r × r` Gram matrices.
fn outer_norm(u: &Matrix, v: &Matrix) -> Result<f64> {
    let gu = u.t_matmul(u)?;
    let gv = v.t_matmul(v)?;
    Ok(gu.frobenius_dot(&gv).max(0.0).sqrt())
}

fn z_layer(base: Seed, t: u64, l: usize, dims: (usize, usize)) -> Matrix {
    sample_gaussian(derive_seed(base, Stream::Z, l, t), dims.0, dims.1)
}

/// `X += scale · Z_t`, regenerating each layer of `Z` from its seed.
fn add_z(x: &mut ParamSet, base: Seed, t: u64, scale: f64) -> Result<()> {
    for (l, layer) in x.layers_mut().iter_mut().enumerate() {
        let z = z_layer(base, t, l, (layer.rows(), layer.cols()));
        layer.add_scaled(&z, scale)?;
    }
    Ok(())
}

/// The full-size direction `Z_t` used by [`zo_sgd_step`] at step `t`.
pub fn zo_sgd_direction(dims: &[(usize, usize)], base: Seed, t: u64) -> ParamSet {
    ParamSet::new(
        dims.iter()
            .enumerate()
            .map(|(l, &d)| z_layer(base, t, l, d))
            .collect(),
    )
}

/// One ZO-SGD step `X ← X − α c Z_t` with in-place seed replay of `Z_t`.
pub fn zo_sgd_step<L: LossOracle + ?Sized>(
    x: &mut ParamSet,
    loss: &L,
    config: &OptimizerConfig,
    t: u64,
) -> Result<StepReport> {
    check_step(config, t)?;
    let eps = config.epsilon;
    let base = config.base_seed;
    let xi = sample_index(base, t, loss.num_samples());
    let eval = |x: &ParamSet, what: &str| -> Result<f64> {
        let v = loss.eval(x, xi);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss {
                value: v,
                context: format!("at X {what} εZ (sample {xi})"),
            })
        }
    };

    add_z(x, base, t, eps).map_err(abort(t))?;
    let plus = eval(x, "+");
    if let Err(e) = plus {
        add_z(x, base, t, -eps)?;
        return Err(abort(t)(e));
    }
    add_z(x, base, t, -2.0 * eps)?;
    let minus = eval(x, "−");
    add_z(x, base, t, eps)?;
    let (plus, minus) = (plus?, minus.map_err(abort(t))?);
    let c = (plus - minus) / (2.0 * eps);
    if !c.is_finite() {
        return Err(abort(t)(Error::NonFiniteLoss {
            value: c,
            context: "finite difference overflowed".into(),
        }));
    }

    let mut z_sq = 0.0;
    for (l, layer) in x.layers_mut().iter_mut().enumerate() {
        let z = z_layer(base, t, l, (layer.rows(), layer.cols()));
        z_sq += z.frobenius_dot(&z);
        layer.add_scaled(&z, -config.alpha * c)?;
    }
    Ok(StepReport {
        t,
        c,
        est_norm: c.abs() * z_sq.sqrt(),
    })
}

/// One LOZO step: lazily rotate `V`, draw fresh `U`, then
/// `X_ℓ ← X_ℓ − α c U_ℓ V_ℓᵀ / r_ℓ`. Exactly two loss evaluations.
///
/// On error `X` and `state` are left as they were.
pub fn lozo_step<L: LossOracle + ?Sized>(
    x: &mut ParamSet,
    state: &mut LozoState,
    loss: &L,
    config: &OptimizerConfig,
) -> Result<StepReport> {
    let t = state.t;
    check_step(config, t)?;
    let shapes = config.shapes(&x.dims())?;
    let mut next = state.clone();
    next.advance_period(config, shapes.len());
    let sketch = next.sketch(config, &shapes);
    let xi = sample_index(config.base_seed, t, loss.num_samples());
    let fd = lge_scalar(loss, x, &sketch, config.epsilon, xi).map_err(abort(t))?;

    let mut est_sq = 0.0;
    for (l, layer) in x.layers_mut().iter_mut().enumerate() {
        let r = shapes[l].r as f64;
        let (u, v) = sketch.regenerate(l)?;
        est_sq += (fd.c / r * outer_norm(&u, &v)?).powi(2);
        add_scaled_outer(layer, &u, &v, -config.alpha * fd.c / r)?;
    }
    next.t += 1;
    *state = next;
    Ok(StepReport {
        t,
        c: fd.c,
        est_norm: est_sq.sqrt(),
    })
}

/// The plain low-rank recursion with fresh `U_t`, `V_t` every step,
/// materialized eagerly. `V_t` is drawn from the `V` stream with counter `t`.
pub fn lge_sgd_step<L: LossOracle + ?Sized>(
    x: &mut ParamSet,
    loss: &L,
    config: &OptimizerConfig,
    t: u64,
) -> Result<StepReport> {
    check_step(config, t)?;
    let shapes = config.shapes(&x.dims())?;
    let base = config.base_seed;
    let factors = shapes
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let u = sample_gaussian(derive_seed(base, Stream::U, l, t), s.m, s.r);
            let v = sample_v(derive_seed(base, Stream::V, l, t), s.n, s.r, config.v_kind)?;
            Ok((u, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let factors = StoredFactors::new(factors)?;
    let xi = sample_index(base, t, loss.num_samples());
    let fd = lge_scalar(loss, x, &factors, config.epsilon, xi).map_err(abort(t))?;
    let mut est_sq = 0.0;
    for (l, layer) in x.layers_mut().iter_mut().enumerate() {
        let r = shapes[l].r as f64;
        let (u, v) = factors.layer(l);
        est_sq += (fd.c / r * outer_norm(u, v)?).powi(2);
        add_scaled_outer(layer, u, v, -config.alpha * fd.c / r)?;
    }
    Ok(StepReport {
        t,
        c: fd.c,
        est_norm: est_sq.sqrt(),
    })
}

/// `Ñ = N (V_oldᵀ V_new) / n`, the least-squares transfer of `N V_oldᵀ`
/// onto the row space of `V_newᵀ` when `V_newᵀ V_new = n I`.
pub fn project_momentum(n_mat: &Matrix, v_old: &Matrix, v_new: &Matrix, n: usize) -> Result<Matrix> {
    if v_old.rows() != n || v_new.rows() != n || v_old.cols() != v_new.cols() {
        return Err(Error::dims(
            "project_momentum",
            format!("V_old, V_new of shape {n}x{}", n_mat.cols()),
            format!(
                "{}x{} and {}x{}",
                v_old.rows(),
                v_old.cols(),
                v_new.rows(),
                v_new.cols()
            ),
        ));
    }
    let mut p = n_mat.matmul(&v_old.t_matmul(v_new)?)?;
    p.scale(1.0 / n as f64);
    Ok(p)
}

/// One LOZO-M step. At a resample boundary the momentum is first projected
/// onto the new subspace; then `N ← β N + (1 − β) c U` and
/// `X_ℓ ← X_ℓ − α N_ℓ V_ℓᵀ / r_ℓ`.
///
/// On error `X`, `state` and `mom` are left as they were.
pub fn lozo_m_step<L: LossOracle + ?Sized>(
    x: &mut ParamSet,
    state: &mut LozoState,
    mom: &mut MomentumState,
    loss: &L,
    config: &OptimizerConfig,
) -> Result<StepReport> {
    let t = state.t;
    check_step(config, t)?;
    let shapes = config.shapes(&x.dims())?;
    if mom.n.len() != shapes.len()
        || mom.n.iter().zip(&shapes).any(|(n, s)| n.rows() != s.m || n.cols() != s.r)
    {
        return Err(Error::dims(
            "momentum",
            format!("{:?}", shapes.iter().map(|s| (s.m, s.r)).collect::<Vec<_>>()),
            format!("{:?}", mom.n.iter().map(|n| (n.rows(), n.cols())).collect::<Vec<_>>()),
        ));
    }
    let mut next = state.clone();
    let rotated = next.advance_period(config, shapes.len());
    let mut n_next = mom.n.clone();
    if rotated {
        if let Some(prev) = &next.prev_v_seeds {
            for (l, s) in shapes.iter().enumerate() {
                let v_old = sample_v(prev[l], s.n, s.r, config.v_kind)?;
                let v_new = sample_v(next.v_seeds[l], s.n, s.r, config.v_kind)?;
                n_next[l] = project_momentum(&n_next[l], &v_old, &v_new, s.n)?;
            }
        }
    }

    let sketch = next.sketch(config, &shapes);
    let xi = sample_index(config.base_seed, t, loss.num_samples());
    let fd = lge_scalar(loss, x, &sketch, config.epsilon, xi).map_err(abort(t))?;

    let beta = mom.beta;
    let mut est_sq = 0.0;
    for (l, layer) in x.layers_mut().iter_mut().enumerate() {
        let r = shapes[l].r as f64;
        let (u, v) = sketch.regenerate(l)?;
        let n_l = &mut n_next[l];
        n_l.scale(beta);
        n_l.add_scaled(&u, (1.0 - beta) * fd.c)?;
        est_sq += (outer_norm(n_l, &v)? / r).powi(2);
        add_scaled_outer(layer, n_l, &v, -config.alpha / r)?;
    }
    next.t += 1;
    *state = next;
    mom.n = n_next;
    Ok(StepReport {
        t,
        c: fd.c,
        est_norm: est_sq.sqrt(),
    })
}

/// Owns the per-algorithm state so callers can step without matching on the algorithm.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub algo: Algorithm,
    pub config: OptimizerConfig,
    pub state: LozoState,
    pub momentum: Option<MomentumState>,
}

impl Optimizer {
    pub fn new(algo: Algorithm, config: OptimizerConfig, dims: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes(dims)?;
        let momentum = (algo == Algorithm::LozoM).then(|| MomentumState::zeros(&shapes, config.beta));
        Ok(Self {
            algo,
            config,
            state: LozoState::new(),
            momentum,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.state.t
    }

    pub fn step<L: LossOracle + ?Sized>(&mut self, loss: &L, x: &mut ParamSet) -> Result<StepReport> {
        match self.algo {
            Algorithm::ZoSgd => {
                let report = zo_sgd_step(x, loss, &self.config, self.state.t)?;
                self.state.t += 1;
                Ok(report)
            }
            Algorithm::Lozo => lozo_step(x, &mut self.state, loss, &self.config),
            Algorithm::LozoM => {
                let mom = self.momentum.as_mut().expect("LOZO-M optimizer owns momentum");
                lozo_m_step(x, &mut self.state, mom, loss, &self.config)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Number of steps completed.
    pub step: u64,
    /// Expected loss `f(X)` after the step.
    pub loss: f64,
    pub fd_scalar_abs: f64,
    pub est_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Record after every `eval_every` steps and after the final step.
    pub eval_every: u64,
    /// Fill `wall_ms`; otherwise it is 0 so that records are reproducible.
    pub record_timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            eval_every: 1,
            record_timing: false,
        }
    }
}

/// Runs `config.total_steps` steps of `algo` from `x`, updating it in place.
pub fn run<L: LossOracle + ?Sized>(
    loss: &L,
    x: &mut ParamSet,
    config: &OptimizerConfig,
    algo: Algorithm,
) -> Result<Vec<RunRecord>> {
    run_with(loss, x, config, algo, RunOptions::default())
}

pub fn run_with<L: LossOracle + ?Sized>(
    loss: &L,
    x: &mut ParamSet,
    config: &OptimizerConfig,
    algo: Algorithm,
    options: RunOptions,
) -> Result<Vec<RunRecord>> {
    if options.eval_every == 0 {
        return Err(Error::invalid("eval_every must be at least 1"));
    }
    if x.dims() != loss.dims() {
        return Err(Error::dims(
            "run parameters",
            format!("{:?}", loss.dims()),
            format!("{:?}", x.dims()),
        ));
    }
    let mut opt = Optimizer::new(algo, config.clone(), &x.dims())?;
    let start = Instant::now();
    let mut records = Vec::new();
    for _ in 0..config.total_steps {
        let report = opt.step(loss, x)?;
        let done = report.t + 1;
        if done % options.eval_every == 0 || done == config.total_steps {
            records.push(RunRecord {
                step: done,
                loss: loss.expected_loss(x),
                fd_scalar_abs: report.c.abs(),
                est_norm: report.est_norm,
                wall_ms: if options.record_timing {
                    start.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                },
            });
        }
    }
    Ok(records)
}

/// Optimizer-state sizes in matrix elements (seeds and counters excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub zo_sgd: usize,
    /// ZO-SGD with a full-size momentum buffer, for comparison.
    pub zo_sgd_momentum: usize,
    pub lozo: usize,
    pub lozo_m: usize,
}

impl Footprint {
    pub fn for_algorithm(&self, algo: Algorithm) -> usize {
        match algo {
            Algorithm::ZoSgd => self.zo_sgd,
            Algorithm::Lozo => self.lozo,
            Algorithm::LozoM => self.lozo_m,
        }
    }

    /// LOZO-M state relative to full-size momentum.
    pub fn momentum_ratio(&self) -> f64 {
        self.lozo_m as f64 / self.zo_sgd_momentum as f64
    }
}

pub fn state_footprint(shapes: &[LayerShape]) -> Footprint {
    Footprint {
        zo_sgd: 0,
        zo_sgd_momentum: shapes.iter().map(|s| s.m * s.n).sum(),
        lozo: 0,
        lozo_m: shapes.iter().map(|s| s.m * s.r).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{FnOracle, PlantedLowRank, Quadratic};
    use crate::tensor::numeric_rank;

    fn half_sq(dims: Vec<(usize, usize)>) -> FnOracle<impl Fn(&ParamSet, usize) -> f64> {
        FnOracle::new(dims, 1, |x: &ParamSet, _| 0.5 * x.norm().powi(2))
    }

    fn config(alpha: f64, nu: u64, r: usize, steps: u64, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            alpha,
            nu,
            ranks: vec![r],
            total_steps: steps,
            base_seed: Seed(seed),
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zo_sgd_one_step_closed_form() {
        let loss = half_sq(vec![(1, 1)]);
        let cfg = config(0.1, 1, 1, 1, 3);
        let mut x = ParamSet::new(vec![Matrix::from_rows(&[[1.0]])]);
        let z = zo_sgd_direction(&[(1, 1)], cfg.base_seed, 0).layer(0).get(0, 0);
        zo_sgd_step(&mut x, &loss, &cfg, 0).unwrap();
        assert!((x.layer(0).get(0, 0) - (1.0 - 0.1 * z * z)).abs() < 1e-10);
    }

    #[test]
    fn zero_learning_rate_leaves_x() {
        let q = Quadratic::generate(&[(4, 3)], Seed(1), 0.1, 4);
        let x0 = ParamSet::zeros(&[(4, 3)]);
        for algo in Algorithm::ALL {
            let mut x = x0.clone();
            run(&q, &mut x, &config(0.0, 3, 2, 10, 1), algo).unwrap();
            assert!(x.max_abs_diff(&x0) <= 1e-14, "{algo}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let q = Quadratic::generate(&[(5, 4), (3, 3)], Seed(2), 0.2, 4);
        for algo in Algorithm::ALL {
            let cfg = config(0.01, 4, 2, 30, 9);
            let (mut a, mut b) = (ParamSet::zeros(&q.dims()), ParamSet::zeros(&q.dims()));
            let ra = run(&q, &mut a, &cfg, algo).unwrap();
            let rb = run(&q, &mut b, &cfg, algo).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_run() {
        let q = Quadratic::generate(&[(2, 2)], Seed(0), 0.0, 1);
        let mut x = ParamSet::zeros(&[(2, 2)]);
        assert!(run(&q, &mut x, &config(0.1, 1, 1, 0, 0), Algorithm::Lozo)
            .unwrap()
            .is_empty());
        assert_eq!(x, ParamSet::zeros(&[(2, 2)]));
    }

    #[test]
    fn v_seeds_rotate_only_on_period_boundaries() {
        let q = Quadratic::generate(&[(4, 4)], Seed(0), 0.0, 1);
        let cfg = config(0.01, 3, 2, 10, 5);
        let mut x = ParamSet::zeros(&[(4, 4)]);
        let mut state = LozoState::new();
        let mut seen = Vec::new();
        for t in 0..10 {
            lozo_step(&mut x, &mut state, &q, &cfg).unwrap();
            assert_eq!(state.k, t / 3);
            seen.push(state.v_seeds.clone());
        }
        for t in 1..10 {
            assert_eq!(seen[t] != seen[t - 1], t % 3 == 0, "t = {t}");
        }
    }

    #[test]
    fn flat_loss_leaves_x() {
        let loss = FnOracle::new(vec![(3, 3)], 1, |_: &ParamSet, _| 1.0);
        let x0 = ParamSet::new(vec![sample_gaussian(Seed(1), 3, 3)]);
        let mut x = x0.clone();
        run(&loss, &mut x, &config(0.5, 2, 2, 5, 0), Algorithm::Lozo).unwrap();
        assert!(x.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn nu_one_matches_eager_recursion_bit_exactly() {
        let q = Quadratic::generate(&[(6, 5), (3, 4)], Seed(3), 0.3, 4);
        let cfg = config(0.02, 1, 2, 50, 11);
        let mut a = ParamSet::zeros(&q.dims());
        let mut b = a.clone();
        let mut state = LozoState::new();
        for t in 0..50 {
            lozo_step(&mut a, &mut state, &q, &cfg).unwrap();
            lge_sgd_step(&mut b, &q, &cfg, t).unwrap();
            assert_eq!(a, b, "t = {t}");
        }
    }

    #[test]
    fn period_updates_have_rank_at_most_r() {
        let q = Quadratic::generate(&[(10, 8)], Seed(4), 0.2, 4);
        let cfg = config(0.01, 5, 2, 40, 2);
        let mut x = ParamSet::zeros(&[(10, 8)]);
        let mut state = LozoState::new();
        let mut anchor = x.clone();
        for t in 1..=40u64 {
            lozo_step(&mut x, &mut state, &q, &cfg).unwrap();
            if t % 5 == 0 {
                let mut d = x.clone();
                d.add_scaled(&anchor, -1.0).unwrap();
                assert!(numeric_rank(d.layer(0), 1e-8) <= 2);
                anchor = x.clone();
            }
        }
    }

    #[test]
    fn projection_examples() {
        let n = Matrix::from_rows(&[[1.0], [1.0]]);
        let s = 2f64.sqrt();
        let v_old = Matrix::from_rows(&[[s], [0.0]]);
        let v_new = Matrix::from_rows(&[[0.0], [s]]);
        assert_eq!(project_momentum(&n, &v_old, &v_new, 2).unwrap(), Matrix::zeros(2, 1));

        let v = sample_v(Seed(3), 16, 3, SamplerKind::RandomCoordinate).unwrap();
        let n = sample_gaussian(Seed(4), 5, 3);
        assert_eq!(project_momentum(&n, &v, &v, 16).unwrap(), n);
        assert!(project_momentum(&n, &v, &v, 15).is_err());
    }

    #[test]
    fn momentum_with_beta_zero_matches_lozo() {
        let q = Quadratic::generate(&[(6, 6)], Seed(5), 0.2, 4);
        let mut cfg = config(0.02, 4, 2, 20, 8);
        cfg.beta = 0.0;
        let (mut a, mut b) = (ParamSet::zeros(&[(6, 6)]), ParamSet::zeros(&[(6, 6)]));
        run(&q, &mut a, &cfg, Algorithm::Lozo).unwrap();
        run(&q, &mut b, &cfg, Algorithm::LozoM).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn first_momentum_step_is_scaled_lozo_step() {
        let q = Quadratic::generate(&[(5, 4)], Seed(6), 0.2, 4);
        let cfg = config(0.05, 10, 2, 1, 1);
        let mut a = ParamSet::zeros(&[(5, 4)]);
        let mut b = a.clone();
        let ra = lozo_step(&mut a, &mut LozoState::new(), &q, &cfg).unwrap();
        let shapes = cfg.shapes(&b.dims()).unwrap();
        let mut mom = MomentumState::zeros(&shapes, 0.9);
        let rb = lozo_m_step(&mut b, &mut LozoState::new(), &mut mom, &q, &cfg).unwrap();
        assert_eq!(ra.c, rb.c);
        let mut da = a.clone();
        da.scale(0.1);
        assert!(da.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn momentum_matches_ema_with_fixed_v() {
        let q = Quadratic::generate(&[(6, 5)], Seed(7), 0.3, 4);
        let steps = 25;
        let cfg = config(0.03, steps, 2, steps, 4);
        let beta = cfg.beta;
        let shapes = cfg.shapes(&q.dims()).unwrap();
        let mut x = ParamSet::zeros(&q.dims());
        let mut state = LozoState::new();
        let mut mom = MomentumState::zeros(&shapes, beta);
        let mut history: Vec<(f64, Matrix)> = Vec::new();
        for t in 0..steps {
            let rep = lozo_m_step(&mut x, &mut state, &mut mom, &q, &cfg).unwrap();
            let u = sample_gaussian(derive_seed(cfg.base_seed, Stream::U, 0, t), 6, 2);
            history.push((rep.c, u));
            let mut ema = Matrix::zeros(6, 2);
            for (s, (c, u)) in history.iter().enumerate() {
                ema.add_scaled(u, (1.0 - beta) * beta.powi((t as usize - s) as i32) * c).unwrap();
            }
            let rel = ema.max_abs_diff(&mom.n[0]) / ema.max_abs();
            assert!(rel < 1e-12, "t = {t}: {rel}");
        }
    }

    #[test]
    fn non_finite_loss_aborts_and_restores() {
        let loss = FnOracle::new(vec![(3, 3)], 1, |x: &ParamSet, _| {
            if x.layer(0).get(0, 0) > 1.5 {
                f64::NAN
            } else {
                x.norm()
            }
        });
        let x0 = ParamSet::new(vec![Matrix::from_fn(3, 3, |i, j| if i + j == 0 { 1.5 } else { 0.1 })]);
        for algo in Algorithm::ALL {
            let mut opt = Optimizer::new(algo, config(0.1, 2, 1, 5, 0), &[(3, 3)]).unwrap();
            let mut x = x0.clone();
            let mut failed = false;
            for _ in 0..5 {
                match opt.step(&loss, &mut x) {
                    Ok(_) => {}
                    Err(Error::StepAborted { step, source }) => {
                        assert!(matches!(*source, Error::NonFiniteLoss { .. }));
                        assert_eq!(step, opt.steps_taken());
                        failed = true;
                        break;
                    }
                    Err(e) => panic!("{e}"),
                }
            }
            assert!(failed, "{algo}");
        }
        // A single aborted step restores X.
        let mut x = x0.clone();
        let cfg = config(0.1, 1, 1, 1, 0);
        let before = x.clone();
        if lozo_step(&mut x, &mut LozoState::new(), &loss, &cfg).is_err() {
            assert!(x.max_abs_diff(&before) < 1e-12);
        }
    }

    #[test]
    fn footprint_examples() {
        let f = state_footprint(&[LayerShape::new(2048, 2048, 2).unwrap()]);
        assert_eq!(f.lozo_m, 4096);
        assert_eq!(f.zo_sgd_momentum, 4_194_304);
        assert_eq!(f.lozo, 0);
        let shapes = [
            LayerShape::new(768, 768, 4).unwrap(),
            LayerShape::new(3072, 768, 4).unwrap(),
        ];
        let f = state_footprint(&shapes);
        assert_eq!(f.lozo_m, 768 * 4 + 3072 * 4);
        assert!(f.lozo_m > 0);
    }

    #[test]
    fn config_validation() {
        assert!(config(0.1, 0, 2, 1, 0).validate().is_err());
        let mut c = config(0.1, 1, 2, 1, 0);
        c.beta = 1.0;
        assert!(c.validate().is_err());
        c.beta = 0.5;
        c.ranks = vec![2, 3];
        assert!(c.shapes(&[(4, 4)]).is_err());
        assert_eq!(c.shapes(&[(4, 4), (5, 5)]).unwrap()[1].r, 3);
        assert!(Optimizer::new(Algorithm::Lozo, config(0.1, 1, 5, 1, 0), &[(4, 4)]).is_err());
    }

    #[test]
    fn lozo_converges_on_strongly_convex_quadratic() {
        let q = Quadratic::generate(&[(8, 8)], Seed(12), 0.0, 1);
        let cfg = config(0.01, 50, 2, 50_000, 3);
        let mut x = ParamSet::zeros(&[(8, 8)]);
        let rec = run_with(&q, &mut x, &cfg, Algorithm::Lozo, RunOptions { eval_every: 1000, record_timing: false }).unwrap();
        let gap = rec.last().unwrap().loss - q.optimal_loss().unwrap();
        assert!(gap <= 1e-3, "gap {gap}");
    }

    #[test]
    fn planted_problem_loss_decreases() {
        let p = PlantedLowRank::generate((16, 16), 2, Seed(1), 0.05, 8, 8);
        let cfg = config(0.001, 50, 2, 2000, 0);
        let mut x = ParamSet::zeros(&[(16, 16)]);
        let start = p.expected_loss(&x);
        let rec = run(&p, &mut x, &cfg, Algorithm::Lozo).unwrap();
        assert!(rec.last().unwrap().loss < 0.5 * start);
    }
}

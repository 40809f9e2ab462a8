//! Loss oracles and the desk-scale synthetic problems used to exercise the
//! estimators and optimizers.
//!
//! Every problem has a finite set of minibatches `ξ ∈ 0..num_samples`, so the
//! expected loss `f(X) = E_ξ F(X; ξ)` is an exact finite average.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::cge_capped;
use crate::rng::{derive_seed, rng_from, sample_gaussian, Seed, Stream};
use crate::tensor::{cholesky, cholesky_solve, dot, top_singular_values, Matrix, ParamSet};

/// A stochastic loss `F(X; ξ)` over a finite sample set.
pub trait LossOracle {
    /// Layer dimensions `(m_ℓ, n_ℓ)` of the parameter set this loss expects.
    fn dims(&self) -> Vec<(usize, usize)>;

    fn num_samples(&self) -> usize;

    /// `F(X; ξ)`. Must be deterministic given `(X, ξ)`.
    fn eval(&self, x: &ParamSet, xi: usize) -> f64;

    fn analytic_grad(&self, _x: &ParamSet, _xi: usize) -> Option<ParamSet> {
        None
    }

    /// `f(X)`, the average of `F(X; ξ)` over all samples.
    fn expected_loss(&self, x: &ParamSet) -> f64 {
        let n = self.num_samples();
        (0..n).map(|xi| self.eval(x, xi)).sum::<f64>() / n as f64
    }

    /// `∇f(X)` when analytic gradients are available.
    fn expected_grad(&self, x: &ParamSet) -> Option<ParamSet> {
        let n = self.num_samples();
        let mut acc = x.zeros_like();
        for xi in 0..n {
            acc.add_scaled(&self.analytic_grad(x, xi)?, 1.0).ok()?;
        }
        acc.scale(1.0 / n as f64);
        Some(acc)
    }

    /// `min_X f(X)` when known in closed form.
    fn optimal_loss(&self) -> Option<f64> {
        None
    }
}

impl<L: LossOracle + ?Sized> LossOracle for &L {
    fn dims(&self) -> Vec<(usize, usize)> {
        (**self).dims()
    }
    fn num_samples(&self) -> usize {
        (**self).num_samples()
    }
    fn eval(&self, x: &ParamSet, xi: usize) -> f64 {
        (**self).eval(x, xi)
    }
    fn analytic_grad(&self, x: &ParamSet, xi: usize) -> Option<ParamSet> {
        (**self).analytic_grad(x, xi)
    }
    fn expected_loss(&self, x: &ParamSet) -> f64 {
        (**self).expected_loss(x)
    }
    fn expected_grad(&self, x: &ParamSet) -> Option<ParamSet> {
        (**self).expected_grad(x)
    }
    fn optimal_loss(&self) -> Option<f64> {
        (**self).optimal_loss()
    }
}

pub type BoxedOracle = Box<dyn LossOracle + Send + Sync>;

impl LossOracle for BoxedOracle {
    fn dims(&self) -> Vec<(usize, usize)> {
        (**self).dims()
    }
    fn num_samples(&self) -> usize {
        (**self).num_samples()
    }
    fn eval(&self, x: &ParamSet, xi: usize) -> f64 {
        (**self).eval(x, xi)
    }
    fn analytic_grad(&self, x: &ParamSet, xi: usize) -> Option<ParamSet> {
        (**self).analytic_grad(x, xi)
    }
    fn expected_loss(&self, x: &ParamSet) -> f64 {
        (**self).expected_loss(x)
    }
    fn expected_grad(&self, x: &ParamSet) -> Option<ParamSet> {
        (**self).expected_grad(x)
    }
    fn optimal_loss(&self) -> Option<f64> {
        (**self).optimal_loss()
    }
}

/// Wraps a closure `(X, ξ) → F`.
pub struct FnOracle<F> {
    dims: Vec<(usize, usize)>,
    num_samples: usize,
    f: F,
}

impl<F: Fn(&ParamSet, usize) -> f64> FnOracle<F> {
    pub fn new(dims: Vec<(usize, usize)>, num_samples: usize, f: F) -> Self {
        Self {
            dims,
            num_samples,
            f,
        }
    }
}

impl<F: Fn(&ParamSet, usize) -> f64> LossOracle for FnOracle<F> {
    fn dims(&self) -> Vec<(usize, usize)> {
        self.dims.clone()
    }
    fn num_samples(&self) -> usize {
        self.num_samples
    }
    fn eval(&self, x: &ParamSet, xi: usize) -> f64 {
        (self.f)(x, xi)
    }
}

/// Counts calls to [`LossOracle::eval`].
pub struct CountingOracle<L> {
    inner: L,
    count: AtomicU64,
}

impl<L> CountingOracle<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &L {
        &self.inner
    }
}

impl<L: LossOracle> LossOracle for CountingOracle<L> {
    fn dims(&self) -> Vec<(usize, usize)> {
        self.inner.dims()
    }
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }
    fn eval(&self, x: &ParamSet, xi: usize) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(x, xi)
    }
    fn analytic_grad(&self, x: &ParamSet, xi: usize) -> Option<ParamSet> {
        self.inner.analytic_grad(x, xi)
    }
    // Bookkeeping evaluations are not counted.
    fn expected_loss(&self, x: &ParamSet) -> f64 {
        self.inner.expected_loss(x)
    }
    fn expected_grad(&self, x: &ParamSet) -> Option<ParamSet> {
        self.inner.expected_grad(x)
    }
    fn optimal_loss(&self) -> Option<f64> {
        self.inner.optimal_loss()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Quadratic,
    #[default]
    PlantedLowRank,
    Logistic,
    TinyMlp,
}

fn default_shapes() -> Vec<(usize, usize)> {
    vec![(32, 32)]
}
fn default_true_rank() -> usize {
    2
}
fn default_noise() -> f64 {
    0.1
}
fn default_num_samples() -> usize {
    16
}
fn default_batch_size() -> usize {
    8
}

/// Serializable description of a synthetic problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default)]
    pub kind: ProblemKind,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<(usize, usize)>,
    #[serde(default)]
    pub data_seed: Seed,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    /// Planted gradient rank `p` (planted-low-rank only).
    #[serde(default = "default_true_rank")]
    pub true_rank: usize,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            kind: ProblemKind::PlantedLowRank,
            shapes: default_shapes(),
            data_seed: Seed(0),
            noise_scale: default_noise(),
            true_rank: default_true_rank(),
            num_samples: default_num_samples(),
            batch_size: default_batch_size(),
        }
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.shapes.iter().any(|&(m, n)| m == 0 || n == 0) {
            return Err(Error::Config(format!("invalid shapes {:?}", self.shapes)));
        }
        if self.num_samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("num_samples and batch_size must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        match self.kind {
            ProblemKind::Quadratic => {}
            ProblemKind::PlantedLowRank | ProblemKind::Logistic => {
                if self.shapes.len() != 1 {
                    return Err(Error::Config(format!(
                        "{:?} takes exactly one layer shape, got {}",
                        self.kind,
                        self.shapes.len()
                    )));
                }
                if self.kind == ProblemKind::PlantedLowRank {
                    let (m, n) = self.shapes[0];
                    if self.true_rank == 0 || self.true_rank > m.min(n) {
                        return Err(Error::Config(format!(
                            "true_rank {} outside 1..={}",
                            self.true_rank,
                            m.min(n)
                        )));
                    }
                }
            }
            ProblemKind::TinyMlp => {
                if self.shapes.len() != 2 || self.shapes[1].1 != self.shapes[0].0 {
                    return Err(Error::Config(format!(
                        "tiny-mlp takes shapes [[hidden, in], [out, hidden]], got {:?}",
                        self.shapes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<BoxedOracle> {
        self.validate()?;
        let (s, b) = (self.num_samples, self.batch_size);
        Ok(match self.kind {
            ProblemKind::Quadratic => Box::new(Quadratic::generate(
                &self.shapes,
                self.data_seed,
                self.noise_scale,
                s,
            )),
            ProblemKind::PlantedLowRank => Box::new(PlantedLowRank::generate(
                self.shapes[0],
                self.true_rank,
                self.data_seed,
                self.noise_scale,
                s,
                b,
            )),
            ProblemKind::Logistic => {
                Box::new(Logistic::generate(self.shapes[0], self.data_seed, s, b))
            }
            ProblemKind::TinyMlp => Box::new(TinyMlp::generate(
                self.shapes[0],
                self.shapes[1],
                self.data_seed,
                s,
                b,
            )),
        })
    }
}

fn data_matrix(seed: Seed, tag: usize, counter: u64, rows: usize, cols: usize) -> Matrix {
    sample_gaussian(derive_seed(seed, Stream::Data, tag, counter), rows, cols)
}

/// `F(X; ξ) = Σ_ℓ ½‖X_ℓ − A_ℓ‖²_F + ⟨G_{ξ,ℓ}, X_ℓ⟩` with `Σ_ξ G_ξ = 0`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    targets: Vec<Matrix>,
    noise: Vec<Vec<Matrix>>,
}

pub fn make_quadratic(shapes: &[(usize, usize)], data_seed: Seed, noise_scale: f64) -> Quadratic {
    Quadratic::generate(shapes, data_seed, noise_scale, default_num_samples())
}

impl Quadratic {
    pub fn generate(
        shapes: &[(usize, usize)],
        data_seed: Seed,
        noise_scale: f64,
        num_samples: usize,
    ) -> Self {
        let targets = shapes
            .iter()
            .enumerate()
            .map(|(l, &(m, n))| data_matrix(data_seed, l, 0, m, n))
            .collect();
        let mut noise: Vec<Vec<Matrix>> = (0..num_samples)
            .map(|xi| {
                shapes
                    .iter()
                    .enumerate()
                    .map(|(l, &(m, n))| {
                        data_matrix(data_seed, l, 1 + xi as u64, m, n).scaled(noise_scale)
                    })
                    .collect()
            })
            .collect();
        // Mean-center so the noise averages to zero across samples.
        for l in 0..shapes.len() {
            let mut mean = Matrix::zeros(shapes[l].0, shapes[l].1);
            for sample in &noise {
                mean.add_scaled(&sample[l], 1.0 / num_samples as f64).unwrap();
            }
            for sample in &mut noise {
                sample[l].add_scaled(&mean, -1.0).unwrap();
            }
        }
        Self { targets, noise }
    }

    pub fn from_parts(targets: Vec<Matrix>, noise: Vec<Vec<Matrix>>) -> Self {
        Self { targets, noise }
    }

    /// The minimizer `A` of the expected loss.
    pub fn minimizer(&self) -> ParamSet {
        ParamSet::new(self.targets.clone())
    }
}

impl LossOracle for Quadratic {
    fn dims(&self) -> Vec<(usize, usize)> {
        self.targets.iter().map(|a| (a.rows(), a.cols())).collect()
    }

    fn num_samples(&self) -> usize {
        self.noise.len().max(1)
    }

    fn eval(&self, x: &ParamSet, xi: usize) -> f64 {
        let mut total = 0.0;
        for (l, a) in self.targets.iter().enumerate() {
            let xl = x.layer(l);
            let mut sq = 0.0;
            for (p, q) in xl.as_slice().iter().zip(a.as_slice()) {
                sq += (p - q) * (p - q);
            }
            total += 0.5 * sq;
            if let Some(sample) = self.noise.get(xi) {
                total += sample[l].frobenius_dot(xl);
            }
        }
        total
    }

    fn analytic_grad(&self, x: &ParamSet, xi: usize) -> Option<ParamSet> {
        let mut g = x.clone();
        for (l, a) in self.targets.iter().enumerate() {
            g.layer_mut(l).add_scaled(a, -1.0).ok()?;
            if let Some(sample) = self.noise.get(xi) {
                g.layer_mut(l).add_scaled(&sample[l], 1.0).ok()?;
            }
        }
        Some(g)
    }

    fn optimal_loss(&self) -> Option<f64> {
        Some(self.expected_loss(&self.minimizer()))
    }
}

/// Bilinear regression `F(X; ξ) = ½ Σ_{i∈ξ} (a_iᵀ X b_i − y_i)²` whose left
/// features `a_i` all lie in a fixed `p`-dimensional subspace, so every
/// gradient `Σ res_i a_i b_iᵀ` has rank at most `p`.
#[derive(Clone, Debug)]
pub struct PlantedLowRank {
    m: usize,
    n: usize,
    true_rank: usize,
    /// `basis` is `m × p`; `a_i = basis · w_i`.
    basis: Matrix,
    batches: Vec<Vec<BilinearSample>>,
    optimum: Option<f64>,
}

#[derive(Clone, Debug)]
struct BilinearSample {
    w: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    y: f64,
}

pub fn make_planted_low_rank(shape: (usize, usize), true_rank: usize, data_seed: Seed) -> PlantedLowRank {
    PlantedLowRank::generate(
        shape,
        true_rank,
        data_seed,
        default_noise(),
        default_num_samples(),
        default_batch_size(),
    )
}

impl PlantedLowRank {
    pub fn generate(
        (m, n): (usize, usize),
        true_rank: usize,
        data_seed: Seed,
        noise_scale: f64,
        num_samples: usize,
        batch_size: usize,
    ) -> Self {
        let p = true_rank;
        let basis = data_matrix(data_seed, 0, 0, m, p).scaled(1.0 / (m as f64).sqrt());
        let x_star = data_matrix(data_seed, 1, 0, m, n);
        let batches = (0..num_samples)
            .map(|xi| {
                let w = data_matrix(data_seed, 2, xi as u64, batch_size, p);
                let b = data_matrix(data_seed, 3, xi as u64, batch_size, n)
                    .scaled(1.0 / (n as f64).sqrt());
                let eps = data_matrix(data_seed, 4, xi as u64, batch_size, 1);
                (0..batch_size)
                    .map(|i| {
                        let w_i = w.row(i).to_vec();
                        let a_i: Vec<f64> = (0..m).map(|r| dot(basis.row(r), &w_i)).collect();
                        let b_i = b.row(i).to_vec();
                        let y = bilinear(&a_i, &x_star, &b_i) + noise_scale * eps.get(i, 0);
                        BilinearSample {
                            w: w_i,
                            a: a_i,
                            b: b_i,
                            y,
                        }
                    })
                    .collect()
            })
            .collect();
        let mut out = Self {
            m,
            n,
            true_rank: p,
            basis,
            batches,
            optimum: None,
        };
        out.optimum = out.solve_optimum();
        out
    }

    /// Builds the problem from explicit `(a, b, y)` triples, one batch per entry.
    pub fn from_triples(m: usize, n: usize, batches: Vec<Vec<(Vec<f64>, Vec<f64>, f64)>>) -> Self {
        let basis = Matrix::identity(m);
        let batches = batches
            .into_iter()
            .map(|batch| {
                batch
                    .into_iter()
                    .map(|(a, b, y)| BilinearSample {
                        w: a.clone(),
                        a,
                        b,
                        y,
                    })
                    .collect()
            })
            .collect();
        let mut out = Self {
            m,
            n,
            true_rank: m.min(n),
            basis,
            batches,
            optimum: None,
        };
        out.optimum = out.solve_optimum();
        out
    }

    pub fn true_rank(&self) -> usize {
        self.true_rank
    }

    /// Exact `min_X f(X)` by least squares in the reduced variable `W = basisᵀ X`.
    fn solve_optimum(&self) -> Option<f64> {
        let p = self.basis.cols();
        let dim = p * self.n;
        let mut gram = Matrix::zeros(dim, dim);
        let mut rhs = vec![0.0; dim];
        let mut feat = vec![0.0; dim];
        for s in self.batches.iter().flatten() {
            for (i, wi) in s.w.iter().enumerate() {
                for (j, bj) in s.b.iter().enumerate() {
                    feat[i * self.n + j] = wi * bj;
                }
            }
            for r in 0..dim {
                if feat[r] == 0.0 {
                    continue;
                }
                rhs[r] += feat[r] * s.y;
                for c in 0..dim {
                    let v = gram.get(r, c) + feat[r] * feat[c];
                    gram.set(r, c, v);
                }
            }
        }
        let l = cholesky(&gram)?;
        let theta = cholesky_solve(&l, &rhs);
        let mut total = 0.0;
        for s in self.batches.iter().flatten() {
            let mut pred = 0.0;
            for (i, wi) in s.w.iter().enumerate() {
                for (j, bj) in s.b.iter().enumerate() {
                    pred += theta[i * self.n + j] * wi * bj;
                }
            }
            total += 0.5 * (pred - s.y) * (pred - s.y);
        }
        Some(total / self.batches.len() as f64)
    }
}

fn bilinear(a: &[f64], x: &Matrix, b: &[f64]) -> f64 {
    a.iter()
        .enumerate()
        .filter(|(_, &ai)| ai != 0.0)
        .map(|(i, &ai)| ai * dot(x.row(i), b))
        .sum()
}

impl LossOracle for PlantedLowRank {
    fn dims(&self) -> Vec<(usize, usize)> {
        vec![(self.m, self.n)]
    }

    fn num_samples(&self) -> usize {
        self.batches.len()
    }

    fn eval(&self, x: &ParamSet, xi: usize) -> f64 {
        let x = x.layer(0);
        self.batches[xi]
            .iter()
            .map(|s| {
                let r = bilinear(&s.a, x, &s.b) - s.y;
                0.5 * r * r
            })
            .sum()
    }

    fn analytic_grad(&self, x: &ParamSet, xi: usize) -> Option<ParamSet> {
        let xl = x.layer(0);
        let mut g = Matrix::zeros(self.m, self.n);
        for s in &self.batches[xi] {
            let res = bilinear(&s.a, xl, &s.b) - s.y;
            for (i, &ai) in s.a.iter().enumerate() {
                let coef = res * ai;
                if coef == 0.0 {
                    continue;
                }
                for (j, &bj) in s.b.iter().enumerate() {
                    let v = g.get(i, j) + coef * bj;
                    g.set(i, j, v);
                }
            }
        }
        Some(ParamSet::new(vec![g]))
    }

    fn optimal_loss(&self) -> Option<f64> {
        self.optimum
    }
}

/// Multi-label logistic regression: `m` binary tasks over `n` features drawn
/// from a Gaussian mixture; loss is the mean cross-entropy over the batch and tasks.
#[derive(Clone, Debug)]
pub struct Logistic {
    m: usize,
    n: usize,
    /// Per batch: `(features, labels)` with labels in `{0, 1}^m`.
    batches: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

pub fn make_logistic(shape: (usize, usize), data_seed: Seed) -> Logistic {
    Logistic::generate(shape, data_seed, default_num_samples(), default_batch_size())
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    pub fn generate((m, n): (usize, usize), data_seed: Seed, num_samples: usize, batch_size: usize) -> Self {
        use rand::Rng;
        let means = data_matrix(data_seed, 0, 0, m, n).scaled(1.0 / (n as f64).sqrt());
        let mut rng = rng_from(derive_seed(data_seed, Stream::Data, 1, 0));
        let batches = (0..num_samples)
            .map(|xi| {
                let noise = data_matrix(data_seed, 2, xi as u64, batch_size, n);
                (0..batch_size)
                    .map(|i| {
                        let labels: Vec<f64> =
                            (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
                        let mut x = noise.row(i).to_vec();
                        for (task, &y) in labels.iter().enumerate() {
                            let sign = 2.0 * y - 1.0;
                            for (xj, mu) in x.iter_mut().zip(means.row(task)) {
                                *xj += sign * mu;
                            }
                        }
                        (x, labels)
                    })
                    .collect()
            })
            .collect();
        Self { m, n, batches }
    }

    pub fn from_data(m: usize, n: usize, batches: Vec<Vec<(Vec<f64>, Vec<f64>)>>) -> Self {
        Self { m, n, batches }
    }
}

impl LossOracle for Logistic {
    fn dims(&self) -> Vec<(usize, usize)> {
        vec![(self.m, self.n)]
    }

    fn num_samples(&self) -> usize {
        self.batches.len()
    }

    fn eval(&self, x: &ParamSet, xi: usize) -> f64 {
        let w = x.layer(0);
        let batch = &self.batches[xi];
        let mut total = 0.0;
        for (feat, labels) in batch {
            for (task, &y) in labels.iter().enumerate() {
                let z = dot(w.row(task), feat);
                total += softplus(z) - y * z;
            }
        }
        total / (batch.len() * self.m) as f64
    }

    fn analytic_grad(&self, x: &ParamSet, xi: usize) -> Option<ParamSet> {
        let w = x.layer(0);
        let batch = &self.batches[xi];
        let scale = 1.0 / (batch.len() * self.m) as f64;
        let mut g = Matrix::zeros(self.m, self.n);
        for (feat, labels) in batch {
            for (task, &y) in labels.iter().enumerate() {
                let coef = (sigmoid(dot(w.row(task), feat)) - y) * scale;
                for (j, &fj) in feat.iter().enumerate() {
                    let v = g.get(task, j) + coef * fj;
                    g.set(task, j, v);
                }
            }
        }
        Some(ParamSet::new(vec![g]))
    }
}

/// Two-layer tanh network `W₂ tanh(W₁ x)` with a squared-error head.
/// Forward-only: no analytic gradient.
#[derive(Clone, Debug)]
pub struct TinyMlp {
    hidden: usize,
    input: usize,
    output: usize,
    batches: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

pub fn make_tiny_mlp(first: (usize, usize), second: (usize, usize), data_seed: Seed) -> TinyMlp {
    TinyMlp::generate(first, second, data_seed, default_num_samples(), default_batch_size())
}

impl TinyMlp {
    /// `first = (hidden, input)`, `second = (output, hidden)`. Targets come
    /// from a random teacher network of the same architecture.
    pub fn generate(
        first: (usize, usize),
        second: (usize, usize),
        data_seed: Seed,
        num_samples: usize,
        batch_size: usize,
    ) -> Self {
        let (hidden, input) = first;
        let output = second.0;
        let teacher = ParamSet::new(vec![
            data_matrix(data_seed, 0, 0, hidden, input).scaled(1.0 / (input as f64).sqrt()),
            data_matrix(data_seed, 1, 0, output, hidden).scaled(1.0 / (hidden as f64).sqrt()),
        ]);
        let batches = (0..num_samples)
            .map(|xi| {
                let feats = data_matrix(data_seed, 2, xi as u64, batch_size, input);
                (0..batch_size)
                    .map(|i| {
                        let x = feats.row(i).to_vec();
                        let y = mlp_forward(&teacher, &x);
                        (x, y)
                    })
                    .collect()
            })
            .collect();
        Self {
            hidden,
            input,
            output,
            batches,
        }
    }

    pub fn from_data(
        first: (usize, usize),
        output: usize,
        batches: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    ) -> Self {
        Self {
            hidden: first.0,
            input: first.1,
            output,
            batches,
        }
    }
}

fn mlp_forward(w: &ParamSet, x: &[f64]) -> Vec<f64> {
    let w1 = w.layer(0);
    let w2 = w.layer(1);
    let h: Vec<f64> = (0..w1.rows()).map(|i| dot(w1.row(i), x).tanh()).collect();
    (0..w2.rows()).map(|o| dot(w2.row(o), &h)).collect()
}

impl LossOracle for TinyMlp {
    fn dims(&self) -> Vec<(usize, usize)> {
        vec![(self.hidden, self.input), (self.output, self.hidden)]
    }

    fn num_samples(&self) -> usize {
        self.batches.len()
    }

    fn eval(&self, x: &ParamSet, xi: usize) -> f64 {
        let batch = &self.batches[xi];
        let total: f64 = batch
            .iter()
            .map(|(feat, target)| {
                mlp_forward(x, feat)
                    .iter()
                    .zip(target)
                    .map(|(p, t)| 0.5 * (p - t) * (p - t))
                    .sum::<f64>()
            })
            .sum();
        total / batch.len() as f64
    }
}

/// Analytic gradient when available, otherwise central differences with step `1e-6`.
pub fn true_gradient<L: LossOracle + ?Sized>(oracle: &L, x: &ParamSet, xi: usize) -> Result<ParamSet> {
    if let Some(g) = oracle.analytic_grad(x, xi) {
        return Ok(g);
    }
    let mut probe = x.clone();
    cge_capped(oracle, &mut probe, 1e-6, xi, usize::MAX)
}

/// Relative error `‖g_analytic − g_fd‖ / max(‖g_analytic‖, 1e-12)` against
/// central differences with the given step. `None` if the oracle has no
/// analytic gradient.
pub fn gradient_check<L: LossOracle + ?Sized>(
    oracle: &L,
    x: &ParamSet,
    xi: usize,
    step: f64,
) -> Result<Option<f64>> {
    let Some(analytic) = oracle.analytic_grad(x, xi) else {
        return Ok(None);
    };
    let mut probe = x.clone();
    let fd = cge_capped(oracle, &mut probe, step, xi, usize::MAX)?;
    let mut diff = analytic.clone();
    diff.add_scaled(&fd, -1.0)?;
    Ok(Some(diff.norm() / analytic.norm().max(1e-12)))
}

/// Top-`k` singular values of each layer's true gradient at `(X, ξ)`.
pub fn gradient_rank_profile<L: LossOracle + ?Sized>(
    oracle: &L,
    x: &ParamSet,
    xi: usize,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let g = true_gradient(oracle, x, xi)?;
    g.layers()
        .iter()
        .map(|layer| top_singular_values(layer, k.min(layer.rows().min(layer.cols()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_gaussian;
    use crate::tensor::numeric_rank;

    fn random_point(dims: &[(usize, usize)], seed: u64, scale: f64) -> ParamSet {
        ParamSet::new(
            dims.iter()
                .enumerate()
                .map(|(l, &(m, n))| sample_gaussian(Seed(seed * 31 + l as u64), m, n).scaled(scale))
                .collect(),
        )
    }

    #[test]
    fn quadratic_minimizer_and_gradient() {
        let q = Quadratic::generate(&[(3, 4), (2, 2)], Seed(5), 0.0, 4);
        let a = q.minimizer();
        assert_eq!(q.eval(&a, 0), 0.0);
        assert_eq!(q.analytic_grad(&a, 2).unwrap(), a.zeros_like());

        let delta = random_point(&q.dims(), 9, 1.0);
        let mut x = a.clone();
        x.add_scaled(&delta, 1.0).unwrap();
        let g = q.analytic_grad(&x, 1).unwrap();
        assert!(g.max_abs_diff(&delta) < 1e-14);
    }

    #[test]
    fn quadratic_noise_is_mean_centered() {
        let q = Quadratic::generate(&[(4, 3)], Seed(2), 0.7, 10);
        let x = random_point(&q.dims(), 3, 1.0);
        let mean = q.expected_grad(&x).unwrap();
        let mut expect = x.clone();
        expect.add_scaled(&q.minimizer(), -1.0).unwrap();
        assert!(mean.max_abs_diff(&expect) < 1e-12);
        assert!(q.optimal_loss().unwrap().abs() < 1e-12);
    }

    #[test]
    fn planted_zero_residual_and_single_triple() {
        let a = vec![1.0, -2.0, 0.5];
        let b = vec![0.3, 0.0, 1.0, 2.0];
        let x = random_point(&[(3, 4)], 4, 1.0);
        let y = bilinear(&a, x.layer(0), &b);
        let p = PlantedLowRank::from_triples(3, 4, vec![vec![(a.clone(), b.clone(), y)]]);
        assert!(p.analytic_grad(&x, 0).unwrap().norm() < 1e-14);

        let p = PlantedLowRank::from_triples(3, 4, vec![vec![(a, b, y + 1.0)]]);
        let g = p.analytic_grad(&x, 0).unwrap();
        assert_eq!(numeric_rank(g.layer(0), 1e-10), 1);
    }

    #[test]
    fn planted_rank_bound_along_trajectory() {
        let p = PlantedLowRank::generate((32, 32), 3, Seed(1), 0.1, 4, 8);
        let mut x = ParamSet::zeros(&[(32, 32)]);
        for step in 0..20 {
            for xi in 0..4 {
                let g = p.analytic_grad(&x, xi).unwrap();
                assert!(numeric_rank(g.layer(0), 1e-10) <= 3);
            }
            x.add_scaled(&random_point(&[(32, 32)], step, 0.3), 1.0).unwrap();
        }
        let prof = gradient_rank_profile(&p, &x, 0, 5).unwrap();
        assert!(prof[0][3] <= 1e-10 * prof[0][0]);
    }

    #[test]
    fn planted_optimum_is_a_lower_bound() {
        let p = PlantedLowRank::generate((8, 6), 2, Seed(3), 0.2, 8, 8);
        let fstar = p.optimal_loss().unwrap();
        assert!(fstar > 0.0);
        for s in 0..5 {
            let x = random_point(&[(8, 6)], s, 1.0);
            assert!(p.expected_loss(&x) >= fstar);
        }
    }

    #[test]
    fn logistic_zero_weights_is_ln2() {
        let l = Logistic::generate((3, 5), Seed(1), 4, 6);
        let x = ParamSet::zeros(&[(3, 5)]);
        for xi in 0..4 {
            assert!((l.eval(&x, xi) - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_separable_data_small_loss() {
        let batch = vec![
            (vec![1.0, 0.0], vec![1.0]),
            (vec![-1.0, 0.0], vec![0.0]),
            (vec![2.0, 0.5], vec![1.0]),
            (vec![-2.0, -0.5], vec![0.0]),
        ];
        let l = Logistic::from_data(1, 2, vec![batch]);
        let w = ParamSet::new(vec![Matrix::from_rows(&[[20.0, 0.0]])]);
        assert!(l.eval(&w, 0) <= 1e-3);
    }

    #[test]
    fn analytic_gradients_pass_finite_difference_check() {
        let oracles: Vec<BoxedOracle> = vec![
            Box::new(Quadratic::generate(&[(4, 3), (2, 5)], Seed(1), 0.5, 4)),
            Box::new(PlantedLowRank::generate((6, 5), 2, Seed(2), 0.1, 4, 4)),
            Box::new(Logistic::generate((3, 4), Seed(3), 4, 5)),
        ];
        for (i, o) in oracles.iter().enumerate() {
            for point in 0..20 {
                let x = random_point(&o.dims(), point, 0.5);
                let err = gradient_check(o, &x, point as usize % o.num_samples(), 1e-6)
                    .unwrap()
                    .unwrap();
                assert!(err <= 1e-5, "oracle {i} point {point}: {err}");
            }
        }
    }

    #[test]
    fn mlp_zero_and_symmetry() {
        let batch = vec![(vec![1.0, -1.0, 0.5], vec![0.0, 0.0])];
        let mlp = TinyMlp::from_data((4, 3), 2, vec![batch]);
        assert_eq!(mlp.eval(&ParamSet::zeros(&[(4, 3), (2, 4)]), 0), 0.0);

        let mlp = TinyMlp::generate((5, 3), (2, 5), Seed(4), 3, 4);
        let w = random_point(&mlp.dims(), 8, 0.7);
        let perm = [3usize, 0, 4, 1, 2];
        let w1 = Matrix::from_fn(5, 3, |i, j| w.layer(0).get(perm[i], j));
        let w2 = Matrix::from_fn(2, 5, |i, j| w.layer(1).get(i, perm[j]));
        let permuted = ParamSet::new(vec![w1, w2]);
        for xi in 0..3 {
            assert!((mlp.eval(&w, xi) - mlp.eval(&permuted, xi)).abs() < 1e-12);
        }
        assert!(mlp.analytic_grad(&w, 0).is_none());
        // Rank profile falls back to finite differences.
        let prof = gradient_rank_profile(&mlp, &w, 0, 2).unwrap();
        assert_eq!(prof.len(), 2);
    }

    #[test]
    fn quadratic_full_rank_spectrum() {
        let q = Quadratic::generate(&[(8, 8)], Seed(6), 0.0, 1);
        let x = ParamSet::zeros(&[(8, 8)]);
        let prof = gradient_rank_profile(&q, &x, 0, 8).unwrap();
        let direct = top_singular_values(q.minimizer().layer(0), 8).unwrap();
        for (a, b) in prof[0].iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(prof[0][7] > 1e-3 * prof[0][0]);
    }

    #[test]
    fn zero_gradient_profile() {
        let q = Quadratic::generate(&[(3, 3)], Seed(6), 0.0, 1);
        let prof = gradient_rank_profile(&q, &q.minimizer(), 0, 3).unwrap();
        assert_eq!(prof[0], vec![0.0; 3]);
    }

    #[test]
    fn spec_build_and_validation() {
        let mut spec = ProblemSpec::default();
        let o = spec.build().unwrap();
        assert_eq!(o.dims(), vec![(32, 32)]);
        assert!(o.optimal_loss().is_some());
        spec.true_rank = 40;
        assert!(spec.build().is_err());
        let spec = ProblemSpec {
            kind: ProblemKind::TinyMlp,
            shapes: vec![(4, 3), (2, 5)],
            ..ProblemSpec::default()
        };
        assert!(spec.build().is_err());
        let json = r#"{"kind":"quadratic","shapes":[[4,4]],"bogus":1}"#;
        let err = serde_json::from_str::<ProblemSpec>(json).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn problems_are_deterministic() {
        let spec = ProblemSpec {
            kind: ProblemKind::Logistic,
            shapes: vec![(3, 6)],
            ..ProblemSpec::default()
        };
        let a = spec.build().unwrap();
        let b = spec.build().unwrap();
        let x = random_point(&[(3, 6)], 1, 0.3);
        for xi in 0..a.num_samples() {
            assert_eq!(a.eval(&x, xi).to_bits(), b.eval(&x, xi).to_bits());
        }
    }

    #[test]
    fn counting_oracle_counts_evals_only() {
        let c = CountingOracle::new(Quadratic::generate(&[(2, 2)], Seed(0), 0.1, 3));
        let x = ParamSet::zeros(&[(2, 2)]);
        c.eval(&x, 0);
        c.expected_loss(&x);
        assert_eq!(c.count(), 1);
        c.reset();
        assert_eq!(c.count(), 0);
    }
}

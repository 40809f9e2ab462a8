//! Reference implementation of the ZO subspace method and a direct
//! least-squares momentum projection.
//!
//! These exist to check the optimizers. They draw randomness from the same
//! seed streams as LOZO but do their own arithmetic: the iterate is kept as
//! `X̃ + B Vᵀ` and perturbations are applied to `B`, never to `X` in place.

use crate::error::{Error, Result};
use crate::optimizers::OptimizerConfig;
use crate::problems::LossOracle;
use crate::rng::{derive_seed, sample_gaussian, sample_index, sample_v, Stream};
use crate::tensor::{cholesky, cholesky_solve, singular_values, Matrix, ParamSet};

/// Outer iterate `X̃^{(k)}` and inner variable `B^{(k,s)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceState {
    pub x_tilde: ParamSet,
    pub b: Vec<Matrix>,
    /// Inner step size per layer, `γ_ℓ = α / r_ℓ` for the matching LOZO run.
    pub gamma: Vec<f64>,
    pub s: u64,
}

impl SubspaceState {
    pub fn new(x0: ParamSet, ranks: &[usize], gamma: Vec<f64>) -> Result<Self> {
        if ranks.len() != x0.num_layers() || gamma.len() != x0.num_layers() {
            return Err(Error::dims(
                "SubspaceState",
                format!("{} ranks and step sizes", x0.num_layers()),
                format!("{} and {}", ranks.len(), gamma.len()),
            ));
        }
        let b = x0
            .layers()
            .iter()
            .zip(ranks)
            .map(|(x, &r)| Matrix::zeros(x.rows(), r))
            .collect();
        Ok(Self {
            x_tilde: x0,
            b,
            gamma,
            s: 0,
        })
    }

    /// `X̃ + B Vᵀ` with `B ± εU` substituted for `B` when `shift` is given.
    fn compose(&self, v: &[Matrix], shift: Option<(&[Matrix], f64)>) -> Result<ParamSet> {
        let mut layers = Vec::with_capacity(self.b.len());
        for (l, x) in self.x_tilde.layers().iter().enumerate() {
            let mut b = self.b[l].clone();
            if let Some((u, eps)) = shift {
                b.add_scaled(&u[l], eps)?;
            }
            let mut y = x.clone();
            y.add_scaled(&b.matmul_t(&v[l])?, 1.0)?;
            layers.push(y);
        }
        Ok(ParamSet::new(layers))
    }

    /// The current full iterate `X̃ + B Vᵀ`.
    pub fn current(&self, v: &[Matrix]) -> Result<ParamSet> {
        self.compose(v, None)
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            value: v,
            context: what.to_string(),
        })
    }
}

/// `B ← B − γ ĝ_B` with
/// `ĝ_B = [F(X̃ + (B+εU)Vᵀ; ξ) − F(X̃ + (B−εU)Vᵀ; ξ)] / 2ε · U`.
pub fn subspace_inner_step<L: LossOracle + ?Sized>(
    state: &mut SubspaceState,
    v: &[Matrix],
    u: &[Matrix],
    loss: &L,
    epsilon: f64,
    xi: usize,
) -> Result<f64> {
    let plus = finite(
        loss.eval(&state.compose(v, Some((u, epsilon)))?, xi),
        "subspace inner step, + side",
    )?;
    let minus = finite(
        loss.eval(&state.compose(v, Some((u, -epsilon)))?, xi),
        "subspace inner step, − side",
    )?;
    let c = (plus - minus) / (2.0 * epsilon);
    for (l, b) in state.b.iter_mut().enumerate() {
        b.add_scaled(&u[l], -state.gamma[l] * c)?;
    }
    state.s += 1;
    Ok(c)
}

/// `X̃ ← X̃ + B Vᵀ`, then `B ← 0`.
pub fn subspace_outer_step(state: &mut SubspaceState, v: &[Matrix]) -> Result<()> {
    for (l, b) in state.b.iter_mut().enumerate() {
        let delta = b.matmul_t(&v[l])?;
        state.x_tilde.layer_mut(l).add_scaled(&delta, 1.0)?;
        b.fill(0.0);
    }
    state.s = 0;
    Ok(())
}

/// Runs `periods` outer iterations of `ν` inner steps each, drawing `U`, `V`
/// and `ξ` exactly as a LOZO run with `config` would. Returns `X̃^{(k)}` for
/// `k = 0..=periods`.
pub fn run_subspace_method<L: LossOracle + ?Sized>(
    loss: &L,
    x0: &ParamSet,
    config: &OptimizerConfig,
    periods: u64,
) -> Result<Vec<ParamSet>> {
    let shapes = config.shapes(&x0.dims())?;
    let ranks: Vec<usize> = shapes.iter().map(|s| s.r).collect();
    let gamma = ranks.iter().map(|&r| config.alpha / r as f64).collect();
    let mut state = SubspaceState::new(x0.clone(), &ranks, gamma)?;
    let base = config.base_seed;
    let mut out = vec![x0.clone()];
    for k in 0..periods {
        let v: Vec<Matrix> = shapes
            .iter()
            .enumerate()
            .map(|(l, s)| sample_v(derive_seed(base, Stream::V, l, k), s.n, s.r, config.v_kind))
            .collect::<Result<_>>()?;
        for s in 0..config.nu {
            let t = k * config.nu + s;
            let u: Vec<Matrix> = shapes
                .iter()
                .enumerate()
                .map(|(l, sh)| sample_gaussian(derive_seed(base, Stream::U, l, t), sh.m, sh.r))
                .collect();
            let xi = sample_index(base, t, loss.num_samples());
            subspace_inner_step(&mut state, &v, &u, loss, config.epsilon, xi)?;
        }
        subspace_outer_step(&mut state, &v)?;
        out.push(state.x_tilde.clone());
    }
    Ok(out)
}

/// Solution of the momentum transfer problem `min_Ñ ‖N V_oldᵀ − Ñ V_newᵀ‖_F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub value: Matrix,
    /// The normal equations were singular or ill-conditioned and a
    /// minimum-norm pseudo-inverse solution was returned instead.
    pub used_pseudo_inverse: bool,
}

/// Largest condition number of `V_newᵀ V_new` solved by Cholesky.
pub const PROJECTION_MAX_CONDITION: f64 = 1e12;

/// Solves `Ñ (V_newᵀ V_new) = N (V_oldᵀ V_new)` directly, with no
/// orthogonality assumption on `V_new`.
pub fn least_squares_projection(n_mat: &Matrix, v_old: &Matrix, v_new: &Matrix) -> Result<Projection> {
    if v_old.rows() != v_new.rows() || n_mat.cols() != v_old.cols() {
        return Err(Error::dims(
            "least_squares_projection",
            format!("V_old with {} rows and {} columns", v_new.rows(), n_mat.cols()),
            format!("{}x{}", v_old.rows(), v_old.cols()),
        ));
    }
    let r_new = v_new.cols();
    let mut gram = Matrix::zeros(r_new, r_new);
    let mut cross = Matrix::zeros(v_old.cols(), r_new);
    for i in 0..v_new.rows() {
        let (o, w) = (v_old.row(i), v_new.row(i));
        for a in 0..r_new {
            for b in 0..r_new {
                gram.set(a, b, gram.get(a, b) + w[a] * w[b]);
            }
            for b in 0..o.len() {
                cross.set(b, a, cross.get(b, a) + o[b] * w[a]);
            }
        }
    }
    let rhs = n_mat.matmul(&cross)?;

    let sv = singular_values(&gram);
    let cond = sv[0] / sv[sv.len() - 1];
    if cond.is_finite() && cond <= PROJECTION_MAX_CONDITION {
        if let Some(l) = cholesky(&gram) {
            let mut value = Matrix::zeros(rhs.rows(), r_new);
            for i in 0..rhs.rows() {
                let row = cholesky_solve(&l, rhs.row(i));
                for (j, x) in row.into_iter().enumerate() {
                    value.set(i, j, x);
                }
            }
            return Ok(Projection {
                value,
                used_pseudo_inverse: false,
            });
        }
    }
    let pinv = symmetric_pseudo_inverse(&gram);
    Ok(Projection {
        value: rhs.matmul(&pinv)?,
        used_pseudo_inverse: true,
    })
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns)`.
fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut a = a.clone();
    let mut q = Matrix::identity(n);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off <= 1e-30 * a.frobenius_norm().powi(2).max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apr = a.get(p, r);
                if apr == 0.0 {
                    continue;
                }
                let theta = (a.get(r, r) - a.get(p, p)) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akr) = (a.get(k, p), a.get(k, r));
                    a.set(k, p, c * akp - s * akr);
                    a.set(k, r, s * akp + c * akr);
                }
                for k in 0..n {
                    let (apk, ark) = (a.get(p, k), a.get(r, k));
                    a.set(p, k, c * apk - s * ark);
                    a.set(r, k, s * apk + c * ark);
                }
                for k in 0..n {
                    let (qkp, qkr) = (q.get(k, p), q.get(k, r));
                    q.set(k, p, c * qkp - s * qkr);
                    q.set(k, r, s * qkp + c * qkr);
                }
            }
        }
    }
    ((0..n).map(|i| a.get(i, i)).collect(), q)
}

fn symmetric_pseudo_inverse(a: &Matrix) -> Matrix {
    let (vals, vecs) = symmetric_eigen(a);
    let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        if lam.abs() <= top * 1e-12 || lam == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, out.get(i, j) + vecs.get(i, k) * vecs.get(j, k) / lam);
            }
        }
    }
    out
}

/// Residual `‖N V_oldᵀ − Ñ V_newᵀ‖_F` of a candidate projection.
pub fn projection_residual(n_mat: &Matrix, v_old: &Matrix, v_new: &Matrix, candidate: &Matrix) -> Result<f64> {
    let mut res = n_mat.matmul_t(v_old)?;
    res.add_scaled(&candidate.matmul_t(v_new)?, -1.0)?;
    Ok(res.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::{lozo_step, project_momentum, LozoState};
    use crate::problems::{FnOracle, Quadratic};
    use crate::rng::{SamplerKind, Seed};

    fn cfg(alpha: f64, nu: u64, r: usize, steps: u64, seed: u64, kind: SamplerKind) -> OptimizerConfig {
        OptimizerConfig {
            alpha,
            nu,
            ranks: vec![r],
            total_steps: steps,
            base_seed: Seed(seed),
            v_kind: kind,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_gamma_and_zero_b() {
        let q = Quadratic::generate(&[(4, 3)], Seed(0), 0.1, 2);
        let x0 = ParamSet::new(vec![sample_gaussian(Seed(1), 4, 3)]);
        let mut st = SubspaceState::new(x0.clone(), &[2], vec![0.0]).unwrap();
        let v = vec![sample_gaussian(Seed(2), 3, 2)];
        let u = vec![sample_gaussian(Seed(3), 4, 2)];
        subspace_inner_step(&mut st, &v, &u, &q, 1e-3, 0).unwrap();
        assert_eq!(st.b[0], Matrix::zeros(4, 2));
        subspace_outer_step(&mut st, &v).unwrap();
        assert_eq!(st.x_tilde, x0);
    }

    #[test]
    fn linear_loss_gradient_in_b() {
        let c = sample_gaussian(Seed(7), 4, 3);
        let cc = c.clone();
        let loss = FnOracle::new(vec![(4, 3)], 1, move |x: &ParamSet, _| cc.frobenius_dot(x.layer(0)));
        let mut st = SubspaceState::new(ParamSet::zeros(&[(4, 3)]), &[2], vec![1.0]).unwrap();
        let v = vec![sample_gaussian(Seed(2), 3, 2)];
        let u = vec![sample_gaussian(Seed(3), 4, 2)];
        let got = subspace_inner_step(&mut st, &v, &u, &loss, 1e-3, 0).unwrap();
        let expect = c.frobenius_dot(&u[0].matmul_t(&v[0]).unwrap());
        assert!((got - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        let mut b = u[0].clone();
        b.scale(-got);
        assert!(st.b[0].max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn one_inner_step_matches_one_lozo_step() {
        let q = Quadratic::generate(&[(6, 5)], Seed(3), 0.3, 4);
        let c = cfg(0.05, 10, 2, 1, 4, SamplerKind::StandardNormal);
        let x0 = ParamSet::new(vec![sample_gaussian(Seed(9), 6, 5)]);
        let mut x = x0.clone();
        lozo_step(&mut x, &mut LozoState::new(), &q, &c).unwrap();

        let v = vec![sample_v(derive_seed(c.base_seed, Stream::V, 0, 0), 5, 2, c.v_kind).unwrap()];
        let u = vec![sample_gaussian(derive_seed(c.base_seed, Stream::U, 0, 0), 6, 2)];
        let mut st = SubspaceState::new(x0, &[2], vec![c.alpha / 2.0]).unwrap();
        let xi = sample_index(c.base_seed, 0, q.num_samples());
        subspace_inner_step(&mut st, &v, &u, &q, c.epsilon, xi).unwrap();
        assert!(st.current(&v).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn outer_step_rank_bound() {
        let q = Quadratic::generate(&[(8, 7)], Seed(1), 0.2, 4);
        let c = cfg(0.02, 5, 2, 15, 2, SamplerKind::HaarScaled);
        let x0 = ParamSet::zeros(&[(8, 7)]);
        let traj = run_subspace_method(&q, &x0, &c, 3).unwrap();
        for w in traj.windows(2) {
            let mut d = w[1].clone();
            d.add_scaled(&w[0], -1.0).unwrap();
            assert!(crate::tensor::numeric_rank(d.layer(0), 1e-10) <= 2);
        }
    }

    #[test]
    fn matches_lozo_for_every_sampler() {
        let q = Quadratic::generate(&[(8, 6), (4, 5)], Seed(5), 0.2, 4);
        for kind in SamplerKind::ALL {
            let c = cfg(0.01, 6, 2, 24, 13, kind);
            let x0 = ParamSet::zeros(&q.dims());
            let traj = run_subspace_method(&q, &x0, &c, 4).unwrap();
            let mut x = x0.clone();
            let mut state = LozoState::new();
            for t in 0..24u64 {
                lozo_step(&mut x, &mut state, &q, &c).unwrap();
                if (t + 1) % 6 == 0 {
                    let k = ((t + 1) / 6) as usize;
                    let diff = x.max_abs_diff(&traj[k]);
                    assert!(diff <= 1e-8, "{kind:?} period {k}: {diff}");
                }
            }
        }
    }

    #[test]
    fn projection_identity_and_zero() {
        let v = sample_gaussian(Seed(1), 9, 3);
        let n = sample_gaussian(Seed(2), 5, 3);
        let p = least_squares_projection(&n, &v, &v).unwrap();
        assert!(!p.used_pseudo_inverse);
        assert!(p.value.max_abs_diff(&n) < 1e-12);
        let z = least_squares_projection(&Matrix::zeros(5, 3), &v, &sample_gaussian(Seed(3), 9, 3)).unwrap();
        assert!(z.value.max_abs() < 1e-15);
    }

    #[test]
    fn projection_matches_closed_form_for_haar() {
        let v_old = sample_v(Seed(10), 16, 3, SamplerKind::HaarScaled).unwrap();
        let v_new = sample_v(Seed(11), 16, 3, SamplerKind::HaarScaled).unwrap();
        let n = sample_gaussian(Seed(12), 7, 3);
        let ls = least_squares_projection(&n, &v_old, &v_new).unwrap();
        let closed = project_momentum(&n, &v_old, &v_new, 16).unwrap();
        assert!(ls.value.max_abs_diff(&closed) < 1e-10);
    }

    #[test]
    fn projection_is_first_order_optimal() {
        let v_old = sample_gaussian(Seed(20), 12, 3);
        let v_new = sample_gaussian(Seed(21), 12, 3);
        let n = sample_gaussian(Seed(22), 6, 3);
        let best = least_squares_projection(&n, &v_old, &v_new).unwrap().value;
        let r0 = projection_residual(&n, &v_old, &v_new, &best).unwrap();
        for k in 0..100 {
            let mut d = sample_gaussian(Seed(100 + k), 6, 3);
            d.scale(1e-3 / d.frobenius_norm());
            let mut cand = best.clone();
            cand.add_scaled(&d, 1.0).unwrap();
            assert!(projection_residual(&n, &v_old, &v_new, &cand).unwrap() > r0);
        }
    }

    #[test]
    fn rank_deficient_projection_uses_pseudo_inverse() {
        let col = sample_gaussian(Seed(1), 8, 1);
        let v_new = Matrix::from_fn(8, 2, |i, _| col.get(i, 0));
        let v_old = sample_gaussian(Seed(2), 8, 2);
        let n = sample_gaussian(Seed(3), 4, 2);
        let p = least_squares_projection(&n, &v_old, &v_new).unwrap();
        assert!(p.used_pseudo_inverse);
        assert!(p.value.is_finite());
        // Minimum-norm: both columns carry the same weight.
        for i in 0..4 {
            assert!((p.value.get(i, 0) - p.value.get(i, 1)).abs() < 1e-10);
        }
        let r = projection_residual(&n, &v_old, &v_new, &p.value).unwrap();
        let mut other = p.value.clone();
        other.add_scaled(&Matrix::from_fn(4, 2, |_, j| if j == 0 { 1e-3 } else { -1e-3 }), 1.0).unwrap();
        assert!((projection_residual(&n, &v_old, &v_new, &other).unwrap() - r).abs() < 1e-9);
        assert!(other.frobenius_norm() > p.value.frobenius_norm());
    }

    #[test]
    fn eigen_reconstructs() {
        let g = sample_gaussian(Seed(4), 5, 5);
        let a = g.t_matmul(&g).unwrap();
        let (vals, vecs) = symmetric_eigen(&a);
        let back = vecs.matmul(&Matrix::from_diag(&vals)).unwrap().matmul_t(&vecs).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-10 * a.max_abs());
    }

    #[test]
    fn random_coordinate_minimization_converges() {
        // Separable quadratic Σ w_i (x_i − b_i)²; exact minimization along one
        // random coordinate per step.
        use rand::Rng;
        let d = 20;
        let w: Vec<f64> = (1..=d).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = |x: &[f64]| x.iter().zip(&w).zip(&b).map(|((x, w), b)| w * (x - b).powi(2)).sum::<f64>();
        let mut x = vec![0.0; d];
        let mut rng = crate::rng::rng_from(Seed(1));
        let f0 = f(&x);
        for _ in 0..400 {
            let i = rng.random_range(0..d);
            // Minimize along e_i from three evaluations of the 1-D quadratic.
            let h = 1.0;
            let mut probe = x.clone();
            let f_mid = f(&probe);
            probe[i] = x[i] + h;
            let f_plus = f(&probe);
            probe[i] = x[i] - h;
            let f_minus = f(&probe);
            let curv = (f_plus - 2.0 * f_mid + f_minus) / (h * h);
            let slope = (f_plus - f_minus) / (2.0 * h);
            x[i] -= slope / curv;
        }
        assert!(f(&x) < 1e-12 * f0);
    }
}

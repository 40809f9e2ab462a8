//! Zeroth-order gradient estimators: coordinate-wise (CGE), randomized
//! full-size (RGE) and low-rank (LGE), plus the in-place perturbation
//! primitive the low-rank estimator and the optimizers are built on.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::problems::LossOracle;
use crate::rng::{PerturbationSketch, SamplerKind};
use crate::tensor::{add_scaled_outer, LayerShape, Matrix, ParamSet};

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// CGE refuses to run above this many coordinates unless asked explicitly.
pub const DEFAULT_CGE_MAX_DIM: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub epsilon: f64,
    pub ranks: Vec<usize>,
    pub v_kind: SamplerKind,
}

impl EstimatorConfig {
    pub fn new(epsilon: f64, ranks: Vec<usize>, v_kind: SamplerKind) -> Result<Self> {
        check_epsilon(epsilon)?;
        if ranks.contains(&0) {
            return Err(Error::invalid("ranks must be positive"));
        }
        Ok(Self {
            epsilon,
            ranks,
            v_kind,
        })
    }
}

/// `c = (F₊ − F₋) / 2ε` together with the two loss values it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDifference {
    pub c: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
}

/// Per-layer low-rank factors `(U_ℓ, V_ℓ)`, either replayed from seeds or stored.
pub trait LowRankPerturbation {
    fn num_layers(&self) -> usize;
    fn shape(&self, layer: usize) -> LayerShape;
    fn factors(&self, layer: usize) -> Result<(Cow<'_, Matrix>, Cow<'_, Matrix>)>;

    fn check_conforms(&self, x: &ParamSet) -> Result<()> {
        if self.num_layers() != x.num_layers() {
            return Err(Error::dims("perturbation layers", x.num_layers(), self.num_layers()));
        }
        for (l, layer) in x.layers().iter().enumerate() {
            let s = self.shape(l);
            if s.m != layer.rows() || s.n != layer.cols() {
                return Err(Error::dims(
                    "perturbation layer shape",
                    format!("layer {l}: {}x{}", layer.rows(), layer.cols()),
                    format!("{}x{}", s.m, s.n),
                ));
            }
        }
        Ok(())
    }

    fn ranks(&self) -> Vec<usize> {
        (0..self.num_layers()).map(|l| self.shape(l).r).collect()
    }
}

impl LowRankPerturbation for PerturbationSketch {
    fn num_layers(&self) -> usize {
        PerturbationSketch::num_layers(self)
    }

    fn shape(&self, layer: usize) -> LayerShape {
        self.layers()[layer].shape
    }

    fn factors(&self, layer: usize) -> Result<(Cow<'_, Matrix>, Cow<'_, Matrix>)> {
        let (u, v) = self.regenerate(layer)?;
        Ok((Cow::Owned(u), Cow::Owned(v)))
    }
}

/// Factors held in memory, for callers that sample eagerly or need specific values.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredFactors {
    factors: Vec<(Matrix, Matrix)>,
    shapes: Vec<LayerShape>,
}

impl StoredFactors {
    pub fn new(factors: Vec<(Matrix, Matrix)>) -> Result<Self> {
        let mut shapes = Vec::with_capacity(factors.len());
        for (l, (u, v)) in factors.iter().enumerate() {
            if u.cols() != v.cols() {
                return Err(Error::dims(
                    "StoredFactors",
                    format!("layer {l}: U and V with equal column counts"),
                    format!("{} vs {}", u.cols(), v.cols()),
                ));
            }
            shapes.push(LayerShape {
                m: u.rows(),
                n: v.rows(),
                r: u.cols(),
            });
        }
        Ok(Self { factors, shapes })
    }

    /// Materializes every factor of a sketch.
    pub fn from_sketch(sketch: &PerturbationSketch) -> Result<Self> {
        let factors = (0..sketch.num_layers())
            .map(|l| sketch.regenerate(l))
            .collect::<Result<Vec<_>>>()?;
        Self::new(factors)
    }

    pub fn layer(&self, l: usize) -> (&Matrix, &Matrix) {
        let (u, v) = &self.factors[l];
        (u, v)
    }
}

impl LowRankPerturbation for StoredFactors {
    fn num_layers(&self) -> usize {
        self.factors.len()
    }

    fn shape(&self, layer: usize) -> LayerShape {
        self.shapes[layer]
    }

    fn factors(&self, layer: usize) -> Result<(Cow<'_, Matrix>, Cow<'_, Matrix>)> {
        let (u, v) = self
            .factors
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        Ok((Cow::Borrowed(u), Cow::Borrowed(v)))
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    Ok(())
}

fn checked_eval<L: LossOracle + ?Sized>(
    loss: &L,
    x: &ParamSet,
    xi: usize,
    context: impl FnOnce() -> String,
) -> Result<f64> {
    let v = loss.eval(x, xi);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            value: v,
            context: context(),
        })
    }
}

/// `X_ℓ += scale · U_ℓ V_ℓᵀ` for every layer. Factors are regenerated from
/// the sketch one layer at a time and dropped immediately.
pub fn perturb_in_place<P: LowRankPerturbation + ?Sized>(
    x: &mut ParamSet,
    scale: f64,
    sketch: &P,
) -> Result<()> {
    sketch.check_conforms(x)?;
    if scale == 0.0 {
        return Ok(());
    }
    for (l, layer) in x.layers_mut().iter_mut().enumerate() {
        let (u, v) = sketch.factors(l)?;
        add_scaled_outer(layer, &u, &v, scale)?;
    }
    Ok(())
}

/// Finite-difference scalar of the low-rank estimator, using the
/// perturb(+ε) / perturb(−2ε) / perturb(+ε) sequence. `x` is restored on
/// every path, including errors.
pub fn lge_scalar<L: LossOracle + ?Sized, P: LowRankPerturbation + ?Sized>(
    loss: &L,
    x: &mut ParamSet,
    sketch: &P,
    epsilon: f64,
    xi: usize,
) -> Result<FiniteDifference> {
    check_epsilon(epsilon)?;
    sketch.check_conforms(x)?;

    perturb_in_place(x, epsilon, sketch)?;
    let loss_plus = match checked_eval(loss, x, xi, || format!("at X + εUVᵀ (sample {xi})")) {
        Ok(v) => v,
        Err(e) => {
            perturb_in_place(x, -epsilon, sketch)?;
            return Err(e);
        }
    };
    perturb_in_place(x, -2.0 * epsilon, sketch)?;
    let minus = checked_eval(loss, x, xi, || format!("at X − εUVᵀ (sample {xi})"));
    perturb_in_place(x, epsilon, sketch)?;
    let loss_minus = minus?;

    let c = (loss_plus - loss_minus) / (2.0 * epsilon);
    if !c.is_finite() {
        return Err(Error::NonFiniteLoss {
            value: c,
            context: "finite difference overflowed".into(),
        });
    }
    Ok(FiniteDifference {
        c,
        loss_plus,
        loss_minus,
    })
}

/// `{c · U_ℓ V_ℓᵀ / r_ℓ}` for a known finite-difference scalar.
pub fn lge_from_scalar<P: LowRankPerturbation + ?Sized>(sketch: &P, c: f64) -> Result<ParamSet> {
    let mut layers = Vec::with_capacity(sketch.num_layers());
    for l in 0..sketch.num_layers() {
        let s = sketch.shape(l);
        let (u, v) = sketch.factors(l)?;
        let mut g = Matrix::zeros(s.m, s.n);
        add_scaled_outer(&mut g, &u, &v, c / s.r as f64)?;
        layers.push(g);
    }
    Ok(ParamSet::new(layers))
}

/// Low-rank gradient estimate. Layer `ℓ` is `c · U_ℓ V_ℓᵀ / r_ℓ`, so its rank
/// never exceeds `r_ℓ`. Exactly two loss evaluations.
pub fn lge<L: LossOracle + ?Sized, P: LowRankPerturbation + ?Sized>(
    loss: &L,
    x: &mut ParamSet,
    sketch: &P,
    config: &EstimatorConfig,
    xi: usize,
) -> Result<ParamSet> {
    let sketch_ranks = sketch.ranks();
    if sketch_ranks != config.ranks {
        return Err(Error::dims(
            "lge ranks",
            format!("{:?}", config.ranks),
            format!("{sketch_ranks:?}"),
        ));
    }
    let fd = lge_scalar(loss, x, sketch, config.epsilon, xi)?;
    lge_from_scalar(sketch, fd.c)
}

/// Randomized full-size estimate `(F(X+εZ) − F(X−εZ)) / 2ε · Z`. Two evaluations.
pub fn rge<L: LossOracle + ?Sized>(
    loss: &L,
    x: &mut ParamSet,
    z: &ParamSet,
    epsilon: f64,
    xi: usize,
) -> Result<ParamSet> {
    let c = rge_scalar(loss, x, z, epsilon, xi)?;
    let mut g = z.clone();
    g.scale(c);
    Ok(g)
}

pub(crate) fn rge_scalar<L: LossOracle + ?Sized>(
    loss: &L,
    x: &mut ParamSet,
    z: &ParamSet,
    epsilon: f64,
    xi: usize,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    if !x.conforms(z) {
        return Err(Error::dims("rge", format!("{:?}", x.dims()), format!("{:?}", z.dims())));
    }
    x.add_scaled(z, epsilon)?;
    let plus = checked_eval(loss, x, xi, || format!("at X + εZ (sample {xi})"));
    let plus = match plus {
        Ok(v) => v,
        Err(e) => {
            x.add_scaled(z, -epsilon)?;
            return Err(e);
        }
    };
    x.add_scaled(z, -2.0 * epsilon)?;
    let minus = checked_eval(loss, x, xi, || format!("at X − εZ (sample {xi})"));
    x.add_scaled(z, epsilon)?;
    Ok((plus - minus?) / (2.0 * epsilon))
}

/// Coordinate-wise central differences: `2d` evaluations.
pub fn cge<L: LossOracle + ?Sized>(
    loss: &L,
    x: &mut ParamSet,
    epsilon: f64,
    xi: usize,
) -> Result<ParamSet> {
    cge_capped(loss, x, epsilon, xi, DEFAULT_CGE_MAX_DIM)
}

/// [`cge`] with an explicit cap on the number of coordinates.
pub fn cge_capped<L: LossOracle + ?Sized>(
    loss: &L,
    x: &mut ParamSet,
    epsilon: f64,
    xi: usize,
    max_dim: usize,
) -> Result<ParamSet> {
    check_epsilon(epsilon)?;
    let d = x.num_elements();
    if d > max_dim {
        return Err(Error::invalid(format!(
            "cge over {d} coordinates exceeds the cap of {max_dim}"
        )));
    }
    let mut grad = x.zeros_like();
    for l in 0..x.num_layers() {
        for idx in 0..x.layer(l).len() {
            let orig = x.layer(l).as_slice()[idx];
            let cols = x.layer(l).cols();
            let coord = || format!("at layer {l} entry ({}, {})", idx / cols, idx % cols);

            x.layer_mut(l).as_mut_slice()[idx] = orig + epsilon;
            let plus = checked_eval(loss, x, xi, coord);
            x.layer_mut(l).as_mut_slice()[idx] = orig - epsilon;
            let minus = checked_eval(loss, x, xi, coord);
            x.layer_mut(l).as_mut_slice()[idx] = orig;

            grad.layer_mut(l).as_mut_slice()[idx] = (plus? - minus?) / (2.0 * epsilon);
        }
    }
    Ok(grad)
}

//! Seeded, replayable sampling of perturbation factors.
//!
//! Every random matrix in the library is a pure function of a [`Seed`] and
//! the requested shape. Per-use seeds are derived from a base seed by
//! SplitMix64 hashing of `(base, stream, layer, counter)`, so the optimizer
//! never stores generator state: it stores (or recomputes) seeds and replays
//! the matrices whenever it needs them.
//!
//! Each seed initialises a ChaCha8 stream (`rand_chacha::ChaCha8Rng::seed_from_u64`).
//! Gaussian entries come from `rand_distr::StandardNormal`, a ziggurat sampler
//! with fixed precomputed tables, drawn in row-major order.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{thin_qr, LayerShape, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// Distribution used for the right factor `V`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// i.i.d. `N(0, 1)` entries.
    #[default]
    #[serde(rename = "normal")]
    StandardNormal,
    /// `√n · Q`, `Q` the orthonormal factor of a Gaussian draw (Haar on the Stiefel manifold).
    #[serde(rename = "haar")]
    HaarScaled,
    /// Columns `√n · e_j` for distinct uniformly chosen `j`.
    #[serde(rename = "coordinate")]
    RandomCoordinate,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::StandardNormal => "normal",
            SamplerKind::HaarScaled => "haar",
            SamplerKind::RandomCoordinate => "coordinate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(SamplerKind::StandardNormal),
            "haar" => Some(SamplerKind::HaarScaled),
            "coordinate" => Some(SamplerKind::RandomCoordinate),
            _ => None,
        }
    }

    pub const ALL: [SamplerKind; 3] = [
        SamplerKind::StandardNormal,
        SamplerKind::HaarScaled,
        SamplerKind::RandomCoordinate,
    ];
}

/// Independent seed streams derived from one base seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Left factors `U`, counter = step `t`.
    U,
    /// Right factors `V`, counter = period `k`.
    V,
    /// Full-size Gaussian directions `Z` for RGE, counter = step `t`.
    Z,
    /// Minibatch index `ξ`, counter = step `t`.
    Sample,
    /// Problem data generation.
    Data,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::U => 0x5555_0000_0000_0001,
            Stream::V => 0x5555_0000_0000_0002,
            Stream::Z => 0x5555_0000_0000_0003,
            Stream::Sample => 0x5555_0000_0000_0004,
            Stream::Data => 0x5555_0000_0000_0005,
        }
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `(base, stream, layer, counter)` into a fresh seed.
pub fn derive_seed(base: Seed, stream: Stream, layer: usize, counter: u64) -> Seed {
    let mut h = splitmix64(base.0 ^ stream.tag());
    h = splitmix64(h ^ (layer as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    h = splitmix64(h ^ counter);
    Seed(h)
}

/// Minibatch index used at step `t`.
pub fn sample_index(base: Seed, t: u64, num_samples: usize) -> usize {
    (derive_seed(base, Stream::Sample, 0, t).0 % num_samples.max(1) as u64) as usize
}

pub(crate) fn rng_from(seed: Seed) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.0)
}

/// `rows × cols` matrix of i.i.d. standard normals.
pub fn sample_gaussian(seed: Seed, rows: usize, cols: usize) -> Matrix {
    let mut rng = rng_from(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Samples the `n × r` right factor `V` from `kind`.
pub fn sample_v(seed: Seed, n: usize, r: usize, kind: SamplerKind) -> Result<Matrix> {
    if r == 0 || n == 0 {
        return Err(Error::invalid(format!("sample_v: n = {n}, r = {r} must be positive")));
    }
    if r > n {
        return Err(Error::invalid(format!("sample_v: rank {r} exceeds n = {n}")));
    }
    let scale = (n as f64).sqrt();
    match kind {
        SamplerKind::StandardNormal => Ok(sample_gaussian(seed, n, r)),
        SamplerKind::HaarScaled => {
            let g = sample_gaussian(seed, n, r);
            let (mut q, _) = thin_qr(&g)?;
            q.scale(scale);
            Ok(q)
        }
        SamplerKind::RandomCoordinate => {
            let mut rng = rng_from(seed);
            let picks = index::sample(&mut rng, n, r);
            let mut v = Matrix::zeros(n, r);
            for (col, row) in picks.iter().enumerate() {
                v.set(row, col, scale);
            }
            Ok(v)
        }
    }
}

/// Seeds for one layer's perturbation `U Vᵀ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSketch {
    pub seed_u: Seed,
    pub seed_v: Seed,
    pub shape: LayerShape,
    pub v_kind: SamplerKind,
}

impl LayerSketch {
    /// Regenerates `(U, V)`; `U` is always Gaussian.
    pub fn regenerate(&self) -> Result<(Matrix, Matrix)> {
        let u = sample_gaussian(self.seed_u, self.shape.m, self.shape.r);
        let v = sample_v(self.seed_v, self.shape.n, self.shape.r, self.v_kind)?;
        Ok((u, v))
    }
}

/// Implicit low-rank perturbation `{U_ℓ V_ℓᵀ}`: seeds only, no matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbationSketch {
    layers: Vec<LayerSketch>,
}

impl PerturbationSketch {
    pub fn new(layers: Vec<LayerSketch>) -> Self {
        Self { layers }
    }

    /// Sketch whose seeds are derived from `(base, layer, t)` for `U` and
    /// `(base, layer, k)` for `V`.
    pub fn derived(base: Seed, shapes: &[LayerShape], t: u64, k: u64, v_kind: SamplerKind) -> Self {
        Self {
            layers: shapes
                .iter()
                .enumerate()
                .map(|(l, &shape)| LayerSketch {
                    seed_u: derive_seed(base, Stream::U, l, t),
                    seed_v: derive_seed(base, Stream::V, l, k),
                    shape,
                    v_kind,
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerSketch] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn regenerate(&self, layer: usize) -> Result<(Matrix, Matrix)> {
        self.layers
            .get(layer)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "layer {layer} out of range for sketch with {} layers",
                    self.layers.len()
                ))
            })?
            .regenerate()
    }
}

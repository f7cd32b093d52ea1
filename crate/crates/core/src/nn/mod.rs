//! Parameterized networks: the progressive and style-based generators, the
//! patch critic shared by both, the inversion encoder and the latent
//! discriminator, plus the parameter containers and layers they are built from.
//!
//! All convolution and dense weights are stored standard-normal and scaled at
//! runtime by `gain / sqrt(fan_in)` (equalized learning rate).

pub mod checkpoint;
pub mod critic;
pub mod encoder;
pub mod latent_disc;
pub mod progan;
pub mod stylegan;

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Real, Tensor};

pub use checkpoint::{AnyGenerator, Checkpoint};
pub use critic::PatchCritic;
pub use encoder::Encoder;
pub use latent_disc::LatentDisc;
pub use progan::ProGanGenerator;
pub use stylegan::StyleGanGenerator;

pub const LATENT_DIM: usize = 512;
pub const NUM_STAGES: usize = 5;
pub const NUM_STYLES: usize = 15;
pub const LRELU_SLOPE: Real = 0.2;
const PIXEL_NORM_EPS: Real = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    ProGan,
    StyleGan,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progan" => Ok(Arch::ProGan),
            "stylegan" => Ok(Arch::StyleGan),
            _ => Err(Error::Param(format!("unknown architecture {s:?} (progan|stylegan)"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::ProGan => "progan",
            Arch::StyleGan => "stylegan",
        })
    }
}

/// Static network geometry shared by every network of one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub arch: Arch,
    /// Generator/encoder channel base `c`; stage widths are `8c, 8c, 4c, 2c, c`.
    pub channels: usize,
    /// Critic channel base; widths `c, 2c, 4c, 8c, 8c` from full resolution down.
    pub critic_channels: usize,
    /// Stage-5 volume shape, each extent divisible by 32.
    pub full_shape: [usize; 3],
}

impl NetConfig {
    pub fn new(arch: Arch, channels: usize, full_shape: [usize; 3]) -> Result<Self> {
        let cfg = Self {
            arch,
            channels,
            critic_channels: channels,
            full_shape,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_critic_channels(mut self, critic_channels: usize) -> Result<Self> {
        self.critic_channels = critic_channels;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.critic_channels == 0 {
            return Err(Error::Param("channel base must be >= 1".into()));
        }
        if self.full_shape.iter().any(|&d| d == 0 || d % 32 != 0) {
            return Err(Error::Param(format!(
                "full shape {:?} must be divisible by 32",
                self.full_shape
            )));
        }
        Ok(())
    }

    /// Feature width of generator stage `block` (0 is the dense/constant input).
    pub fn stage_channels(&self, block: usize) -> usize {
        let c = self.channels;
        [8 * c, 8 * c, 8 * c, 4 * c, 2 * c, c][block]
    }

    /// Spatial shape emitted at `stage` (1..=5); stage 0 is the 1/32 base grid.
    pub fn resolution(&self, stage: usize) -> [usize; 3] {
        let f = 1 << (NUM_STAGES - stage);
        self.full_shape.map(|d| d / f)
    }

    pub fn base_grid(&self) -> [usize; 3] {
        self.full_shape.map(|d| d / 32)
    }
}

/// Current growth stage and blend weight of the newest block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: usize,
    /// 1 means the newest block is fully faded in.
    pub fade_alpha: f64,
}

impl StageState {
    pub fn new(stage: usize, fade_alpha: f64) -> Result<Self> {
        let s = Self { stage, fade_alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn full() -> Self {
        Self {
            stage: NUM_STAGES,
            fade_alpha: 1.0,
        }
    }

    pub fn stable(stage: usize) -> Self {
        Self {
            stage,
            fade_alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_STAGES).contains(&self.stage) {
            return Err(Error::Param(format!("stage {} outside 1..=5", self.stage)));
        }
        if !(0.0..=1.0).contains(&self.fade_alpha) {
            return Err(Error::Param(format!("fade alpha {} outside [0,1]", self.fade_alpha)));
        }
        Ok(())
    }

    /// Whether the previous stage's path still contributes.
    pub fn fading(&self) -> bool {
        self.stage > 1 && self.fade_alpha < 1.0
    }
}

/// Seed for per-layer noise maps; the same seed reproduces the same maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Seeded(u64),
    Zero,
}

// ---------------------------------------------------------------------------
// Parameter storage

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Multiplier applied to the optimizer learning rate for this tensor.
    pub lr_mult: Real,
}

/// Named tensors of one network, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add_with_lr(name, value, 1.0)
    }

    pub fn add_with_lr(&mut self, name: impl Into<String>, value: Tensor, lr_mult: Real) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            lr_mult,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Wrap every tensor in a graph leaf; `trainable` leaves receive gradients.
    pub fn bind(&self, trainable: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| {
                    if trainable {
                        Var::param(e.value.clone())
                    } else {
                        Var::constant(e.value.clone())
                    }
                })
                .collect(),
        }
    }

    /// Copy values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// Graph leaves for one forward pass, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id]
    }
}

// ---------------------------------------------------------------------------
// Layers

pub const GAIN_RELU: Real = std::f64::consts::SQRT_2 as Real;

/// Fully connected layer on `[B, in]` inputs; weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    /// Runtime weight multiplier (equalized learning rate).
    pub scale: Real,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: Real,
        bias_init: Real,
        lr_mult: Real,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add_with_lr(format!("{name}.weight"), Tensor::randn(&[in_dim, out_dim], rng), lr_mult);
        let bias = ps.add_with_lr(format!("{name}.bias"), Tensor::full(&[out_dim], bias_init), lr_mult);
        Self {
            weight,
            bias,
            scale: gain / (in_dim as Real).sqrt(),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.matmul(&p[self.weight]).scale(self.scale).add(&p[self.bias])
    }

    /// Effective `[out, in]` matrix (stored weight times runtime scale).
    pub fn effective_matrix(&self, ps: &ParamSet) -> Tensor {
        crate::tensor::transpose2d(ps.get(self.weight)).map(|v| v * self.scale)
    }
}

/// Cubic-kernel 3D convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub scale: Real,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: Real,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            Tensor::randn(&[out_ch, in_ch, kernel, kernel, kernel], rng),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            scale: gain / ((in_ch * kernel.pow(3)) as Real).sqrt(),
            geom: ConvGeom {
                kernel,
                stride,
                pad: kernel / 2,
            },
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.conv3d(&p[self.weight], self.geom)
            .scale(self.scale)
            .add(&p[self.bias].reshape(&[1, self.out_ch, 1, 1, 1]))
    }
}

/// Normalize each voxel's feature vector to unit mean square.
pub fn pixel_norm(x: &Var) -> Var {
    let inv = x.square().mean_channels().add_scalar(PIXEL_NORM_EPS).powf(-0.5);
    x.mul(&inv)
}

/// `alpha * new + (1 - alpha) * old`.
pub fn blend(new: &Var, old: &Var, alpha: f64) -> Var {
    if alpha >= 1.0 {
        return new.clone();
    }
    if alpha <= 0.0 {
        return old.clone();
    }
    new.scale(alpha as Real).add(&old.scale((1.0 - alpha) as Real))
}

/// Layer kinds, for architecture introspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv,
    StridedConv,
    ModulatedConv,
    Noise,
    PixelNorm,
    Swish,
    LeakyRelu,
    Sigmoid,
    Upsample,
    AvgPool,
}

/// Shared interface of both generator families.
pub trait Generator {
    fn config(&self) -> &NetConfig;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// `z: [B, 512]` to volumes `[B, 1, d1, d2, d3] / 2^(5 - stage)` in (0, 1).
    fn generate(&self, p: &Bound, z: &Var, stage: StageState, noise: NoiseMode) -> Result<Var>;
}

/// Wasserstein critic interface; the patch critic is the production one and
/// tests plug in closed-form fixtures.
pub trait Critic {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Per-sample realness scores `[B]`.
    fn score(&self, p: &Bound, x: &Var, stage: StageState) -> Result<Var>;

    /// Penultimate-layer features `[B, ...]` of full-resolution inputs.
    fn features(&self, p: &Bound, x: &Var) -> Result<Var>;
}

pub(crate) fn check_latent(z: &Var, dim: usize) -> Result<usize> {
    let s = z.shape();
    if s.len() != 2 || s[1] != dim {
        return Err(Error::Shape(format!("latent batch must be [B, {dim}], got {s:?}")));
    }
    if !z.value().all_finite() {
        return Err(Error::NonFinite("latent code".into()));
    }
    Ok(s[0])
}

pub(crate) fn check_volume_batch(x: &Var, shape: [usize; 3], what: &str) -> Result<usize> {
    let s = x.shape();
    if s.len() != 5 || s[1] != 1 || s[2..] != shape {
        return Err(Error::Shape(format!(
            "{what} expects [B, 1, {}, {}, {}], got {s:?}",
            shape[0], shape[1], shape[2]
        )));
    }
    Ok(s[0])
}

/// Deterministic parameter-initialization stream for a named network.
pub fn init_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_resolution_ladder() {
        let cfg = NetConfig::new(Arch::ProGan, 4, [32, 64, 64]).unwrap();
        assert_eq!(cfg.resolution(1), [2, 4, 4]);
        assert_eq!(cfg.resolution(5), [32, 64, 64]);
        assert_eq!(cfg.base_grid(), [1, 2, 2]);
        assert!(NetConfig::new(Arch::ProGan, 4, [30, 64, 64]).is_err());
        let full = NetConfig::new(Arch::ProGan, 16, [32, 288, 224]).unwrap();
        assert_eq!(full.base_grid(), [1, 9, 7]);
        assert_eq!(full.resolution(1), [2, 18, 14]);
        assert_eq!(8 * 16 * full.base_grid().iter().product::<usize>(), 8064);
    }

    #[test]
    fn stage_validation() {
        assert!(StageState::new(0, 1.0).is_err());
        assert!(StageState::new(6, 1.0).is_err());
        assert!(StageState::new(3, 1.5).is_err());
        assert!(!StageState::new(1, 0.0).unwrap().fading());
        assert!(StageState::new(2, 0.5).unwrap().fading());
    }

    #[test]
    fn equalized_scale_is_storage_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let conv = Conv::new(&mut ps, "c", 2, 3, 3, 1, GAIN_RELU, &mut rng);
        let x = Var::constant(Tensor::randn(&[1, 2, 4, 4, 4], &mut rng));
        let a = conv.forward(&ps.bind(false), &x);
        let k = 7.5;
        let mut ps2 = ps.clone();
        *ps2.get_mut(conv.weight) = ps.get(conv.weight).map(|v| v * k);
        let conv2 = Conv { scale: conv.scale / k, ..conv.clone() };
        let b = conv2.forward(&ps2.bind(false), &x);
        assert!(a.value().max_abs_diff(b.value()) < 1e-6 * (1.0 + a.value().data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64))));
    }

    #[test]
    fn pixel_norm_gives_unit_mean_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Var::constant(Tensor::randn(&[2, 5, 2, 2, 2], &mut rng).map(|v| v * 3.0));
        let y = pixel_norm(&x);
        let ms = y.square().mean_channels();
        assert!(ms.value().data().iter().all(|v| (v - 1.0).abs() < 1e-4));
    }
}

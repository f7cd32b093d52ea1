//! Style-based generator: a six-layer mapping network `z -> w`, fifteen
//! learned affine maps turning `w` into per-convolution styles, and a
//! synthesis network of weight-demodulated convolutions with per-layer noise
//! starting from a learned constant on the 1/32 grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    blend, check_latent, init_rng, Bound, Conv, Dense, Generator, LayerKind, NetConfig, NoiseMode,
    ParamId, ParamSet, StageState, GAIN_RELU, LATENT_DIM, LRELU_SLOPE, NUM_STAGES, NUM_STYLES,
};
use crate::autograd::{no_grad, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Real, Tensor};

pub const MAPPING_LAYERS: usize = 6;
pub const MAPPING_LR_MULT: Real = 0.02;
const DEMOD_EPS: Real = 1e-8;

/// Convolution whose input channels are scaled by a per-sample style and
/// whose output channels are renormalized to unit expected magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct ModConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub noise_strength: ParamId,
    pub scale: Real,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ModConv {
    fn new(ps: &mut ParamSet, name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::randn(&[out_ch, in_ch, 3, 3, 3], rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        let noise_strength = ps.add(format!("{name}.noise_strength"), Tensor::zeros(&[1]));
        Self {
            weight,
            bias,
            noise_strength,
            scale: 1.0 / ((in_ch * 27) as Real).sqrt(),
            in_ch,
            out_ch,
        }
    }

    /// Modulated, demodulated convolution of `x: [B, in, ...]` with styles
    /// `s: [B, in]`; no bias, noise or activation.
    pub fn modulated(&self, p: &Bound, x: &Var, s: &Var) -> Var {
        let b = x.shape()[0];
        let geom = ConvGeom {
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let w = &p[self.weight];
        let y = x
            .mul(&s.reshape(&[b, self.in_ch, 1, 1, 1]))
            .conv3d(w, geom)
            .scale(self.scale);
        let wsq = w
            .square()
            .sum_to(&[self.out_ch, self.in_ch, 1, 1, 1])
            .reshape(&[self.out_ch, self.in_ch])
            .scale(self.scale * self.scale);
        let d = s
            .square()
            .matmul(&wsq.transpose())
            .add_scalar(DEMOD_EPS)
            .powf(-0.5);
        y.mul(&d.reshape(&[b, self.out_ch, 1, 1, 1]))
    }

    fn forward(&self, p: &Bound, x: &Var, s: &Var, noise: Option<Tensor>) -> Var {
        let mut y = self.modulated(p, x, s);
        if let Some(n) = noise {
            let strength = p[self.noise_strength].reshape(&[1, 1, 1, 1, 1]);
            y = y.add(&Var::constant(n).mul(&strength));
        }
        y.add(&p[self.bias].reshape(&[1, self.out_ch, 1, 1, 1]))
            .leaky_relu(LRELU_SLOPE)
    }
}

#[derive(Clone, Debug)]
pub struct StyleGanGenerator {
    cfg: NetConfig,
    params: ParamSet,
    mapping: Vec<Dense>,
    affines: Vec<Dense>,
    convs: Vec<ModConv>,
    constant: ParamId,
    to_image: Vec<Conv>,
}

impl StyleGanGenerator {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed, 2);
        let mut ps = ParamSet::new();
        let mapping = (0..MAPPING_LAYERS)
            .map(|i| {
                Dense::new(
                    &mut ps,
                    &format!("mapping{i}"),
                    LATENT_DIM,
                    LATENT_DIM,
                    GAIN_RELU,
                    0.0,
                    MAPPING_LR_MULT,
                    &mut rng,
                )
            })
            .collect();
        let [g0, g1, g2] = cfg.base_grid();
        let constant = ps.add(
            "constant",
            Tensor::randn(&[1, cfg.stage_channels(0), g0, g1, g2], &mut rng),
        );
        let mut affines = Vec::with_capacity(NUM_STYLES);
        let mut convs = Vec::with_capacity(NUM_STYLES);
        let mut to_image = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            let (cin, cout) = (cfg.stage_channels(s - 1), cfg.stage_channels(s));
            for j in 0..3 {
                let k = 3 * (s - 1) + j;
                let input = if j == 0 { cin } else { cout };
                affines.push(Dense::new(
                    &mut ps,
                    &format!("affine{k}"),
                    LATENT_DIM,
                    input,
                    1.0,
                    1.0,
                    1.0,
                    &mut rng,
                ));
                convs.push(ModConv::new(&mut ps, &format!("conv{k}"), input, cout, &mut rng));
            }
            to_image.push(Conv::new(&mut ps, &format!("to_image{s}"), cout, 1, 1, 1, 1.0, &mut rng));
        }
        Ok(Self {
            cfg,
            params: ps,
            mapping,
            affines,
            convs,
            constant,
            to_image,
        })
    }

    /// Mapping network `z -> w`.
    pub fn map(&self, p: &Bound, z: &Var) -> Result<Var> {
        check_latent(z, LATENT_DIM)?;
        let mut h = z.clone();
        for layer in &self.mapping {
            h = layer.forward(p, &h).leaky_relu(LRELU_SLOPE);
        }
        Ok(h)
    }

    pub fn mapping_layers(&self) -> &[Dense] {
        &self.mapping
    }

    pub fn mod_convs(&self) -> &[ModConv] {
        &self.convs
    }

    pub fn affines(&self) -> &[Dense] {
        &self.affines
    }

    /// Row-concatenation of the fifteen effective affine maps, `[sum widths, 512]`.
    pub fn affine_matrix(&self) -> Tensor {
        let mats: Vec<Tensor> = self.affines.iter().map(|a| a.effective_matrix(&self.params)).collect();
        let rows: usize = mats.iter().map(|m| m.shape()[0]).sum();
        let mut data = Vec::with_capacity(rows * LATENT_DIM);
        for m in &mats {
            data.extend_from_slice(m.data());
        }
        Tensor::new(&[rows, LATENT_DIM], data)
    }

    /// Synthesis from one `[B, 512]` style latent per demodulated convolution.
    pub fn synthesize(&self, p: &Bound, ws: &[Var], stage: StageState, noise: NoiseMode) -> Result<Var> {
        stage.validate()?;
        if ws.len() != NUM_STYLES {
            return Err(Error::Param(format!("expected {NUM_STYLES} style codes, got {}", ws.len())));
        }
        let b = check_latent(&ws[0], LATENT_DIM)?;
        for w in ws {
            if check_latent(w, LATENT_DIM)? != b {
                return Err(Error::Shape("style codes have different batch sizes".into()));
            }
        }
        if p.vars().len() != self.params.len() {
            return Err(Error::Param("bound parameters belong to another network".into()));
        }
        let [g0, g1, g2] = self.cfg.base_grid();
        let mut h = p[self.constant].broadcast_to(&[b, self.cfg.stage_channels(0), g0, g1, g2]);
        for s in 1..stage.stage {
            h = self.block(p, ws, s, &h, noise);
        }
        let s = stage.stage;
        if stage.fading() && stage.fade_alpha <= 0.0 {
            return Ok(self.image(p, s - 1, &h).upsample2());
        }
        let new = self.image(p, s, &self.block(p, ws, s, &h, noise));
        if stage.fading() {
            let old = self.image(p, s - 1, &h).upsample2();
            return Ok(blend(&new, &old, stage.fade_alpha));
        }
        Ok(new)
    }

    /// Mean of `Phi(z)` over `n` standard-normal draws.
    pub fn estimate_w_bar(&self, n: usize, seed: u64) -> Result<Vec<f32>> {
        if n == 0 {
            return Err(Error::Param("w_bar needs at least one sample".into()));
        }
        let _ng = no_grad();
        let p = self.params.bind(false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0f64; LATENT_DIM];
        let mut done = 0;
        while done < n {
            let b = (n - done).min(500);
            let z = Var::constant(Tensor::randn(&[b, LATENT_DIM], &mut rng));
            let w = self.map(&p, &z)?;
            for row in w.value().data().chunks(LATENT_DIM) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            done += b;
        }
        Ok(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
    }

    fn block(&self, p: &Bound, ws: &[Var], s: usize, h: &Var, noise: NoiseMode) -> Var {
        let k0 = 3 * (s - 1);
        let mut h = self.layer(p, ws, k0, h, noise).upsample2();
        for k in k0 + 1..k0 + 3 {
            h = self.layer(p, ws, k, &h, noise);
        }
        h
    }

    fn layer(&self, p: &Bound, ws: &[Var], k: usize, h: &Var, noise: NoiseMode) -> Var {
        let style = self.affines[k].forward(p, &ws[k]);
        let n = match noise {
            NoiseMode::Zero => None,
            NoiseMode::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let mut shape = h.shape().to_vec();
                shape[1] = 1;
                Some(Tensor::randn(&shape, &mut rng))
            }
        };
        self.convs[k].forward(p, h, &style, n)
    }

    fn image(&self, p: &Bound, s: usize, h: &Var) -> Var {
        self.to_image[s - 1].forward(p, h).sigmoid()
    }

    pub fn layer_inventory(&self) -> Vec<LayerKind> {
        let mut inv = vec![];
        for _ in 0..MAPPING_LAYERS {
            inv.extend([LayerKind::Dense, LayerKind::LeakyRelu]);
        }
        for k in 0..NUM_STYLES {
            inv.extend([LayerKind::Dense, LayerKind::ModulatedConv, LayerKind::Noise, LayerKind::LeakyRelu]);
            if k % 3 == 0 {
                inv.push(LayerKind::Upsample);
            }
        }
        inv.extend([LayerKind::Conv, LayerKind::Sigmoid]);
        inv
    }
}

impl Generator for StyleGanGenerator {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn generate(&self, p: &Bound, z: &Var, stage: StageState, noise: NoiseMode) -> Result<Var> {
        let w = self.map(p, z)?;
        let ws = vec![w; NUM_STYLES];
        self.synthesize(p, &ws, stage, noise)
    }
}

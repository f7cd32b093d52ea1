//! Progressive-growing generator: a dense projection of `z` onto the 1/32
//! grid followed by five upsample + double-convolution blocks, each with its
//! own sigmoid `toImage` head used for fade-in.

use super::{
    blend, check_latent, init_rng, pixel_norm, Bound, Conv, Dense, Generator, LayerKind, NetConfig,
    NoiseMode, ParamSet, StageState, GAIN_RELU, LATENT_DIM, NUM_STAGES,
};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ProGanGenerator {
    cfg: NetConfig,
    params: ParamSet,
    dense: Dense,
    blocks: Vec<[Conv; 2]>,
    to_image: Vec<Conv>,
}

impl ProGanGenerator {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed, 1);
        let mut ps = ParamSet::new();
        let base: usize = cfg.base_grid().iter().product();
        let dense = Dense::new(
            &mut ps,
            "dense",
            LATENT_DIM,
            cfg.stage_channels(0) * base,
            1.0,
            0.0,
            1.0,
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(NUM_STAGES);
        let mut to_image = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            let (cin, cout) = (cfg.stage_channels(s - 1), cfg.stage_channels(s));
            let c1 = Conv::new(&mut ps, &format!("block{s}.conv1"), cin, cout, 3, 1, GAIN_RELU, &mut rng);
            let c2 = Conv::new(&mut ps, &format!("block{s}.conv2"), cout, cout, 3, 1, GAIN_RELU, &mut rng);
            blocks.push([c1, c2]);
            to_image.push(Conv::new(&mut ps, &format!("to_image{s}"), cout, 1, 1, 1, 1.0, &mut rng));
        }
        Ok(Self {
            cfg,
            params: ps,
            dense,
            blocks,
            to_image,
        })
    }

    /// The first linear layer as an `[out, 512]` matrix, the semantic
    /// direction source for this architecture.
    pub fn first_linear_matrix(&self) -> Tensor {
        self.dense.effective_matrix(&self.params)
    }

    fn block(&self, p: &Bound, s: usize, h: &Var) -> Var {
        let [c1, c2] = &self.blocks[s - 1];
        let h = h.upsample2();
        let h = pixel_norm(&c1.forward(p, &h).swish());
        pixel_norm(&c2.forward(p, &h).swish())
    }

    fn image(&self, p: &Bound, s: usize, h: &Var) -> Var {
        self.to_image[s - 1].forward(p, h).sigmoid()
    }

    pub fn layer_inventory(&self) -> Vec<LayerKind> {
        let mut inv = vec![LayerKind::Dense];
        for _ in 0..NUM_STAGES {
            inv.push(LayerKind::Upsample);
            for _ in 0..2 {
                inv.extend([LayerKind::Conv, LayerKind::Swish, LayerKind::PixelNorm]);
            }
        }
        inv.extend([LayerKind::Conv, LayerKind::Sigmoid]);
        inv
    }
}

impl Generator for ProGanGenerator {
    fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn generate(&self, p: &Bound, z: &Var, stage: StageState, _noise: NoiseMode) -> Result<Var> {
        stage.validate()?;
        let b = check_latent(z, LATENT_DIM)?;
        if p.vars().len() != self.params.len() {
            return Err(Error::Param("bound parameters belong to another network".into()));
        }
        let [g0, g1, g2] = self.cfg.base_grid();
        let mut h = self
            .dense
            .forward(p, z)
            .reshape(&[b, self.cfg.stage_channels(0), g0, g1, g2]);
        for s in 1..stage.stage {
            h = self.block(p, s, &h);
        }
        let s = stage.stage;
        if stage.fading() && stage.fade_alpha <= 0.0 {
            return Ok(self.image(p, s - 1, &h).upsample2());
        }
        let new = self.image(p, s, &self.block(p, s, &h));
        if stage.fading() {
            let old = self.image(p, s - 1, &h).upsample2();
            return Ok(blend(&new, &old, stage.fade_alpha));
        }
        Ok(new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::no_grad;
    use crate::nn::Arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ProGanGenerator {
        ProGanGenerator::new(NetConfig::new(Arch::ProGan, 2, [32, 32, 32]).unwrap(), 3).unwrap()
    }

    fn z(b: usize, seed: u64) -> Var {
        Var::constant(Tensor::randn(&[b, LATENT_DIM], &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[test]
    fn shapes_follow_the_ladder() {
        let g = small();
        let p = g.params().bind(false);
        let _ng = no_grad();
        for s in 1..=5 {
            let out = g.generate(&p, &z(2, 0), StageState::stable(s), NoiseMode::Zero).unwrap();
            let r = g.config().resolution(s);
            assert_eq!(out.shape(), &[2, 1, r[0], r[1], r[2]]);
            assert!(out.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn fade_zero_is_upsampled_previous_stage() {
        let g = small();
        let p = g.params().bind(false);
        let zz = z(1, 1);
        for s in 2..=5 {
            let prev = g.generate(&p, &zz, StageState::stable(s - 1), NoiseMode::Zero).unwrap();
            let faded = g.generate(&p, &zz, StageState::new(s, 0.0).unwrap(), NoiseMode::Zero).unwrap();
            let up = crate::tensor::upsample2(prev.value());
            assert!(faded.value().max_abs_diff(&up) <= 1e-6);
            let near = g.generate(&p, &zz, StageState::new(s, 1e-4).unwrap(), NoiseMode::Zero).unwrap();
            assert!(near.value().max_abs_diff(&up) < 1e-3);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = small();
        let p = g.params().bind(false);
        assert!(g.generate(&p, &z(1, 0), StageState { stage: 0, fade_alpha: 1.0 }, NoiseMode::Zero).is_err());
        let bad = Var::constant(Tensor::full(&[1, LATENT_DIM], f32::NAN as crate::Real));
        assert!(g.generate(&p, &bad, StageState::full(), NoiseMode::Zero).is_err());
        let wrong = Var::constant(Tensor::zeros(&[1, 10]));
        assert!(g.generate(&p, &wrong, StageState::full(), NoiseMode::Zero).is_err());
    }

    #[test]
    fn first_linear_has_latent_columns() {
        let g = small();
        let a = g.first_linear_matrix();
        assert_eq!(a.shape(), &[16, LATENT_DIM]);
    }

    #[test]
    fn inventory_has_pixel_norm() {
        assert!(small().layer_inventory().contains(&LayerKind::PixelNorm));
    }
}

//! Patch critic shared by both generator families: a `fromImage` layer per
//! stage, five stride-2 convolutions (widths `c, 2c, 4c, 8c, 8c`) and a final
//! single-channel convolution producing a map of unbounded patch scores.

use super::{
    blend, check_volume_batch, init_rng, Bound, Conv, Critic, LayerKind, NetConfig, ParamSet,
    StageState, GAIN_RELU, LRELU_SLOPE, NUM_STAGES,
};
use crate::autograd::Var;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct PatchCritic {
    cfg: NetConfig,
    params: ParamSet,
    from_image: Vec<Conv>,
    blocks: Vec<Conv>,
    out: Conv,
}

impl PatchCritic {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed, 3);
        let mut ps = ParamSet::new();
        let mut from_image = Vec::with_capacity(NUM_STAGES);
        let mut blocks = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            from_image.push(Conv::new(
                &mut ps,
                &format!("from_image{s}"),
                1,
                Self::width(&cfg, s),
                1,
                1,
                GAIN_RELU,
                &mut rng,
            ));
        }
        for s in 1..=NUM_STAGES {
            blocks.push(Conv::new(
                &mut ps,
                &format!("block{s}"),
                Self::width(&cfg, s),
                Self::width(&cfg, s - 1),
                3,
                2,
                GAIN_RELU,
                &mut rng,
            ));
        }
        let out = Conv::new(&mut ps, "out", Self::width(&cfg, 0), 1, 3, 1, 1.0, &mut rng);
        Ok(Self {
            cfg,
            params: ps,
            from_image,
            blocks,
            out,
        })
    }

    /// Input width of the block consuming stage-`s` resolution; stage 0 is
    /// the 1/32 grid after the last block.
    fn width(cfg: &NetConfig, s: usize) -> usize {
        let c = cfg.critic_channels;
        [8 * c, 8 * c, 8 * c, 4 * c, 2 * c, c][s]
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn output_layer(&self) -> &Conv {
        &self.out
    }

    pub fn blocks(&self) -> &[Conv] {
        &self.blocks
    }

    fn from_image(&self, p: &Bound, s: usize, x: &Var) -> Var {
        self.from_image[s - 1].forward(p, x).leaky_relu(LRELU_SLOPE)
    }

    fn block(&self, p: &Bound, s: usize, h: &Var) -> Var {
        self.blocks[s - 1].forward(p, h).leaky_relu(LRELU_SLOPE)
    }

    /// Output of the last strided convolution, `[B, 8c, d/32 ...]`.
    fn trunk(&self, p: &Bound, x: &Var, stage: StageState) -> Result<Var> {
        stage.validate()?;
        check_volume_batch(x, self.cfg.resolution(stage.stage), "critic at this stage")?;
        if p.vars().len() != self.params.len() {
            return Err(Error::Param("bound parameters belong to another network".into()));
        }
        let s = stage.stage;
        let mut h = if stage.fading() && stage.fade_alpha <= 0.0 {
            self.from_image(p, s - 1, &x.avgpool2())
        } else {
            let new = self.block(p, s, &self.from_image(p, s, x));
            if stage.fading() {
                let old = self.from_image(p, s - 1, &x.avgpool2());
                blend(&new, &old, stage.fade_alpha)
            } else {
                new
            }
        };
        for k in (1..s).rev() {
            h = self.block(p, k, &h);
        }
        Ok(h)
    }

    /// Patch score map `[B, 1, d/32 ...]`.
    pub fn score_map(&self, p: &Bound, x: &Var, stage: StageState) -> Result<Var> {
        Ok(self.out.forward(p, &self.trunk(p, x, stage)?))
    }

    pub fn layer_inventory(&self) -> Vec<LayerKind> {
        let mut inv = vec![LayerKind::Conv, LayerKind::LeakyRelu];
        for _ in 0..NUM_STAGES {
            inv.extend([LayerKind::StridedConv, LayerKind::LeakyRelu]);
        }
        inv.push(LayerKind::Conv);
        inv
    }
}

impl Critic for PatchCritic {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn score(&self, p: &Bound, x: &Var, stage: StageState) -> Result<Var> {
        Ok(self.score_map(p, x, stage)?.mean_per_sample())
    }

    fn features(&self, p: &Bound, x: &Var) -> Result<Var> {
        self.trunk(p, x, StageState::full())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad, no_grad};
    use crate::nn::Arch;
    use crate::tensor::{Real, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, &mut rng).map(|v| crate::autograd::sigmoid(v))
    }

    #[test]
    fn accepts_exactly_the_stage_shape() {
        let cfg = NetConfig::new(Arch::ProGan, 2, [32, 32, 32]).unwrap();
        let f = PatchCritic::new(cfg, 0).unwrap();
        let p = f.params().bind(false);
        let _ng = no_grad();
        for s in 1..=5 {
            let r = cfg.resolution(s);
            let x = Var::constant(input(&[2, 1, r[0], r[1], r[2]], 1));
            let map = f.score_map(&p, &x, StageState::stable(s)).unwrap();
            assert_eq!(map.shape(), &[2, 1, 1, 1, 1]);
            assert_eq!(f.score(&p, &x, StageState::stable(s)).unwrap().shape(), &[2]);
            let other = if s == 5 { cfg.resolution(4) } else { cfg.full_shape };
            let bad = Var::constant(input(&[1, 1, other[0], other[1], other[2]], 2));
            assert!(f.score(&p, &bad, StageState::stable(s)).is_err());
        }
    }

    #[test]
    fn doubling_output_layer_doubles_scores() {
        let cfg = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let mut f = PatchCritic::new(cfg, 0).unwrap();
        let x = Var::constant(input(&[2, 1, 32, 32, 32], 3));
        let a = f.score(&f.params().bind(false), &x, StageState::full()).unwrap();
        let (w, b) = (f.out.weight, f.out.bias);
        *f.params_mut().get_mut(b) = Tensor::full(&[1], 0.3);
        let a_bias = f.score(&f.params().bind(false), &x, StageState::full()).unwrap();
        let dw = f.params().get(w).map(|v| v * 2.0);
        *f.params_mut().get_mut(w) = dw;
        *f.params_mut().get_mut(b) = Tensor::full(&[1], 0.6);
        let b2 = f.score(&f.params().bind(false), &x, StageState::full()).unwrap();
        for ((x1, x2), _) in a_bias.value().data().iter().zip(b2.value().data()).zip(a.value().data()) {
            assert!((2.0 * x1 - x2).abs() < 1e-5);
        }
    }

    #[test]
    fn paper_stage_one_input_gradient_matches_fd() {
        let cfg = NetConfig::new(Arch::ProGan, 1, [32, 288, 224]).unwrap();
        let f = PatchCritic::new(cfg, 7).unwrap();
        let p = f.params().bind(false);
        let r = cfg.resolution(1);
        assert_eq!(r, [2, 18, 14]);
        let x0 = input(&[1, 1, r[0], r[1], r[2]], 4);
        let x = Var::param(x0.clone());
        let s = f.score(&p, &x, StageState::stable(1)).unwrap().sum();
        let g = grad(&s, &[x])[0].clone();
        let eval = |t: Tensor| -> f64 {
            let _ng = no_grad();
            f.score(&p, &Var::constant(t), StageState::stable(1)).unwrap().item()
        };
        let h: Real = if cfg!(feature = "f64") { 1e-6 } else { 1e-2 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Directional derivative along a random direction checks every entry at once.
        let dir = Tensor::randn(x0.shape(), &mut rng);
        let norm = dir.data().iter().map(|v| v * v).sum::<Real>().sqrt();
        let dir = dir.map(|v| v / norm);
        let shift = |sgn: Real| {
            Tensor::new(
                x0.shape(),
                x0.data().iter().zip(dir.data()).map(|(a, d)| a + sgn * h * d).collect(),
            )
        };
        let fd = (eval(shift(1.0)) - eval(shift(-1.0))) / (2.0 * h as f64);
        let an: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3), "fd {fd} analytic {an}");
    }

    #[test]
    fn fade_zero_uses_previous_path() {
        let cfg = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let f = PatchCritic::new(cfg, 0).unwrap();
        let p = f.params().bind(false);
        let x = input(&[1, 1, 16, 16, 16], 5);
        let pooled = crate::tensor::sumpool2(&x).map(|v| v * 0.125);
        let a = f.score(&p, &Var::constant(x), StageState::new(4, 0.0).unwrap()).unwrap();
        let b = f.score(&p, &Var::constant(pooled), StageState::stable(3)).unwrap();
        assert!(a.value().max_abs_diff(b.value()) < 1e-6);
    }
}

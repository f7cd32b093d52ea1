//! Inversion encoder `E: X -> R^512`, mirroring the generator: full-resolution
//! `fromImage`, five double-convolution + average-pool blocks and a dense
//! projection. The style variant appends two LReLU dense layers. No pixel
//! feature normalization anywhere.

use super::{
    check_volume_batch, init_rng, Arch, Bound, Conv, Dense, LayerKind, NetConfig, ParamSet,
    GAIN_RELU, LATENT_DIM, LRELU_SLOPE, NUM_STAGES,
};
use crate::autograd::Var;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: NetConfig,
    params: ParamSet,
    from_image: Conv,
    blocks: Vec<[Conv; 2]>,
    dense: Dense,
    head: Vec<Dense>,
}

impl Encoder {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed, 4);
        let mut ps = ParamSet::new();
        let from_image = Conv::new(&mut ps, "from_image", 1, cfg.stage_channels(NUM_STAGES), 1, 1, GAIN_RELU, &mut rng);
        let mut blocks = Vec::with_capacity(NUM_STAGES);
        for s in (1..=NUM_STAGES).rev() {
            let (cin, cout) = (cfg.stage_channels(s), cfg.stage_channels(s - 1));
            let c1 = Conv::new(&mut ps, &format!("block{s}.conv1"), cin, cin, 3, 1, GAIN_RELU, &mut rng);
            let c2 = Conv::new(&mut ps, &format!("block{s}.conv2"), cin, cout, 3, 1, GAIN_RELU, &mut rng);
            blocks.push([c1, c2]);
        }
        let flat = cfg.stage_channels(0) * cfg.base_grid().iter().product::<usize>();
        let dense = Dense::new(&mut ps, "dense", flat, LATENT_DIM, 1.0, 0.0, 1.0, &mut rng);
        let head = match cfg.arch {
            Arch::ProGan => vec![],
            Arch::StyleGan => (0..2)
                .map(|i| {
                    Dense::new(&mut ps, &format!("head{i}"), LATENT_DIM, LATENT_DIM, GAIN_RELU, 0.0, 1.0, &mut rng)
                })
                .collect(),
        };
        Ok(Self {
            cfg,
            params: ps,
            from_image,
            blocks,
            dense,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Codes `[B, 512]` for full-resolution volumes `[B, 1, d1, d2, d3]`.
    pub fn encode(&self, p: &Bound, x: &Var) -> Result<Var> {
        let b = check_volume_batch(x, self.cfg.full_shape, "encoder")?;
        if p.vars().len() != self.params.len() {
            return Err(Error::Param("bound parameters belong to another network".into()));
        }
        let mut h = self.from_image.forward(p, x).swish();
        for [c1, c2] in &self.blocks {
            h = c1.forward(p, &h).swish();
            h = c2.forward(p, &h).swish().avgpool2();
        }
        let flat = h.value().len() / b;
        let mut code = self.dense.forward(p, &h.reshape(&[b, flat]));
        for layer in &self.head {
            code = layer.forward(p, &code).leaky_relu(LRELU_SLOPE);
        }
        Ok(code)
    }

    pub fn layer_inventory(&self) -> Vec<LayerKind> {
        let mut inv = vec![LayerKind::Conv, LayerKind::Swish];
        for _ in 0..NUM_STAGES {
            inv.extend([
                LayerKind::Conv,
                LayerKind::Swish,
                LayerKind::Conv,
                LayerKind::Swish,
                LayerKind::AvgPool,
            ]);
        }
        inv.push(LayerKind::Dense);
        for _ in &self.head {
            inv.extend([LayerKind::Dense, LayerKind::LeakyRelu]);
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::no_grad;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encodes_to_512_deterministically() {
        for arch in [Arch::ProGan, Arch::StyleGan] {
            let e = Encoder::new(NetConfig::new(arch, 1, [32, 32, 32]).unwrap(), 0).unwrap();
            let p = e.params().bind(false);
            let _ng = no_grad();
            let x = Var::constant(Tensor::randn(&[2, 1, 32, 32, 32], &mut ChaCha8Rng::seed_from_u64(1)));
            let a = e.encode(&p, &x).unwrap();
            let b = e.encode(&p, &x).unwrap();
            assert_eq!(a.shape(), &[2, LATENT_DIM]);
            assert_eq!(a.value(), b.value());
            let bad = Var::constant(Tensor::zeros(&[1, 1, 16, 32, 32]));
            assert!(e.encode(&p, &bad).is_err());
        }
    }

    #[test]
    fn inventory_has_no_pixel_norm() {
        let pro = Encoder::new(NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap(), 0).unwrap();
        assert!(!pro.layer_inventory().contains(&LayerKind::PixelNorm));
        assert!(!pro.layer_inventory().contains(&LayerKind::LeakyRelu));
        let sty = Encoder::new(NetConfig::new(Arch::StyleGan, 1, [32, 32, 32]).unwrap(), 0).unwrap();
        let inv = sty.layer_inventory();
        assert_eq!(inv.iter().filter(|k| **k == LayerKind::Dense).count(), 3);
        assert!(!inv.contains(&LayerKind::PixelNorm));
    }
}

//! Latent discriminator `D_W: R^512 -> (0, 1)` separating mapped codes from
//! encoder outputs during style-based inversion.

use super::{init_rng, Bound, Dense, ParamSet, GAIN_RELU, LATENT_DIM, LRELU_SLOPE};
use crate::autograd::Var;
use crate::error::{Error, Result};

const WIDTHS: [usize; 4] = [LATENT_DIM, 256, 128, 1];

#[derive(Clone, Debug)]
pub struct LatentDisc {
    params: ParamSet,
    layers: Vec<Dense>,
}

impl LatentDisc {
    pub fn new(seed: u64) -> Self {
        let mut rng = init_rng(seed, 5);
        let mut ps = ParamSet::new();
        let layers = (0..3)
            .map(|i| {
                let gain = if i == 2 { 1.0 } else { GAIN_RELU };
                Dense::new(&mut ps, &format!("dense{i}"), WIDTHS[i], WIDTHS[i + 1], gain, 0.0, 1.0, &mut rng)
            })
            .collect::<Vec<Dense>>();
        // A zero head makes the untrained discriminator exactly indifferent (0.5).
        let head = layers[2].weight;
        *ps.get_mut(head) = crate::tensor::Tensor::zeros(&[WIDTHS[2], 1]);
        Self { params: ps, layers }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Pre-sigmoid scores `[B]`.
    pub fn logits(&self, p: &Bound, codes: &Var) -> Result<Var> {
        super::check_latent(codes, LATENT_DIM)?;
        if p.vars().len() != self.params.len() {
            return Err(Error::Param("bound parameters belong to another network".into()));
        }
        let b = codes.shape()[0];
        let mut h = codes.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h);
            if i < 2 {
                h = h.leaky_relu(LRELU_SLOPE);
            }
        }
        Ok(h.reshape(&[b]))
    }

    /// Probabilities `[B]` that each code came from the mapping network.
    pub fn prob(&self, p: &Bound, codes: &Var) -> Result<Var> {
        Ok(self.logits(p, codes)?.sigmoid())
    }

    /// Binary cross-entropy with mapped codes labeled real.
    pub fn bce_loss(&self, p: &Bound, real: &Var, fake: &Var) -> Result<Var> {
        let lr = self.logits(p, real)?;
        let lf = self.logits(p, fake)?;
        // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
        Ok(lr.neg().softplus().mean().add(&lf.softplus().mean()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad, no_grad};
    use crate::optim::{Adam, AdamConfig};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codes(n: usize, shift: f32, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(&[n, LATENT_DIM], rng).map(|v| v + shift as crate::Real)
    }

    #[test]
    fn untrained_outputs_are_centered_and_open() {
        let d = LatentDisc::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _ng = no_grad();
        let p = d.params().bind(false);
        let out = d.prob(&p, &Var::constant(codes(1000, 0.0, &mut rng))).unwrap();
        let mean = out.value().mean();
        assert!((0.4..=0.6).contains(&mean), "mean {mean}");
        let big = d.prob(&p, &Var::constant(codes(4, 0.0, &mut rng).map(|v| v * 100.0))).unwrap();
        assert!(big.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn separates_shifted_clusters() {
        let mut d = LatentDisc::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut opt = Adam::new(d.params(), AdamConfig { lr: 1e-3, ..AdamConfig::default() });
        for _ in 0..50 {
            let p = d.params().bind(true);
            let real = Var::constant(codes(32, 5.0, &mut rng));
            let fake = Var::constant(codes(32, -5.0, &mut rng));
            let loss = d.bce_loss(&p, &real, &fake).unwrap();
            let g = grad(&loss, p.vars());
            opt.step(d.params_mut(), &g).unwrap();
        }
        let _ng = no_grad();
        let p = d.params().bind(false);
        let pos = d.prob(&p, &Var::constant(codes(200, 5.0, &mut rng))).unwrap();
        let neg = d.prob(&p, &Var::constant(codes(200, -5.0, &mut rng))).unwrap();
        let auc = crate::metrics::auc(pos.value().data(), neg.value().data());
        assert!(auc >= 0.99, "auc {auc}");
    }
}

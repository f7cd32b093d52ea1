//! Hybrid GAN inversion: an encoder trained against the frozen generator and
//! critic supplies an initial code, which per-image Adam refinement improves.
//!
//! Progressive codes live in the Gaussian latent `z`; style-based codes live in
//! the mapped space `w` and are broadcast to all fifteen style inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::error::{Error, Result};
use crate::nn::{
    AnyGenerator, Arch, Bound, Checkpoint, Critic, Encoder, Generator, LatentDisc, NoiseMode, ParamSet,
    StageState, LATENT_DIM, NUM_STYLES,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dist: f64,
    pub perc: f64,
    pub latent: f64,
}

impl LossWeights {
    pub const PROGAN: Self = Self { dist: 1.0, perc: 1.0, latent: 1.0 };
    pub const STYLEGAN: Self = Self { dist: 5.0, perc: 1.0, latent: 0.04 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub encoder_lr: f64,
    pub encoder_betas: (f64, f64),
    pub encoder_steps: usize,
    pub encoder_batch: usize,
    pub refine_steps: usize,
    pub refine_lr: f64,
    pub progan_weights: LossWeights,
    pub style_weights: LossWeights,
    /// Seed of the pinned synthesis noise used for every reconstruction.
    pub noise_seed: u64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 3e-3,
            encoder_betas: (0.5, 0.9),
            encoder_steps: 300,
            encoder_batch: 4,
            refine_steps: 100,
            refine_lr: 7e-3,
            progan_weights: LossWeights::PROGAN,
            style_weights: LossWeights::STYLEGAN,
            noise_seed: 0,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [("encoder_lr", self.encoder_lr), ("refine_lr", self.refine_lr)];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.encoder_betas.0) || !(0.0..1.0).contains(&self.encoder_betas.1) {
            return Err(Error::Param(format!("betas {:?} outside [0,1)", self.encoder_betas)));
        }
        if self.encoder_batch == 0 {
            return Err(Error::Param("encoder batch must be >= 1".into()));
        }
        for w in [self.progan_weights, self.style_weights] {
            if w.dist < 0.0 || w.perc < 0.0 || w.latent < 0.0 {
                return Err(Error::Param("loss weights must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn weights(&self, arch: Arch) -> LossWeights {
        match arch {
            Arch::ProGan => self.progan_weights,
            Arch::StyleGan => self.style_weights,
        }
    }

    pub fn noise(&self) -> NoiseMode {
        NoiseMode::Seeded(self.noise_seed)
    }
}

// ---------------------------------------------------------------------------
// Loss terms

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Per-sample `0.5 * mean((x - recon)^2)`, `[B]`.
pub fn loss_dist_per_sample(x: &Var, recon: &Var) -> Result<Var> {
    same_shape(x, recon, "distortion inputs")?;
    Ok(x.sub(recon).square().mean_per_sample().scale(0.5))
}

/// Half mean squared voxel error, averaged over the batch.
pub fn loss_dist(x: &Var, recon: &Var) -> Result<Var> {
    Ok(loss_dist_per_sample(x, recon)?.mean())
}

/// Half mean squared error between penultimate critic features.
pub fn loss_perc(f: &dyn Critic, fp: &Bound, x: &Var, recon: &Var) -> Result<Var> {
    same_shape(x, recon, "perceptual inputs")?;
    let (fx, fr) = (f.features(fp, x)?, f.features(fp, recon)?);
    Ok(fx.sub(&fr).square().mean_per_sample().scale(0.5).mean())
}

/// `sum(code^2) / 1024` per code, averaged over the batch.
pub fn loss_latent(code: &Var) -> Var {
    code.square().sum_per_sample().scale(1.0 / (2 * LATENT_DIM) as Real).mean()
}

/// `-log D_W(code)` from discriminator logits, averaged over the batch.
pub fn loss_latent_style_from_logits(logits: &Var) -> Var {
    logits.neg().softplus().mean()
}

pub fn loss_latent_style(d: &LatentDisc, dp: &Bound, code: &Var) -> Result<Var> {
    Ok(loss_latent_style_from_logits(&d.logits(dp, code)?))
}

/// Full-resolution generation from inversion codes `[B, 512]`.
pub fn decode(gen: &AnyGenerator, gp: &Bound, code: &Var, noise: NoiseMode) -> Result<Var> {
    match gen {
        AnyGenerator::ProGan(g) => g.generate(gp, code, StageState::full(), noise),
        AnyGenerator::StyleGan(g) => {
            let ws = vec![code.clone(); NUM_STYLES];
            g.synthesize(gp, &ws, StageState::full(), noise)
        }
    }
}

/// Decode codes to volumes without tracking gradients.
pub fn reconstruct(gen: &AnyGenerator, codes: &Tensor, noise: NoiseMode) -> Result<Vec<Volume>> {
    let _ng = no_grad();
    let gp = gen.params().bind(false);
    let x = decode(gen, &gp, &Var::constant(codes.clone()), noise)?;
    Ok(Volume::from_batch_tensor(x.value(), crate::volume::DEFAULT_SPACING_UM))
}

// ---------------------------------------------------------------------------
// Encoder training

pub struct EncoderLoss {
    pub total: Var,
    pub dist: f64,
    pub perc: f64,
    pub latent: f64,
}

/// Weighted encoder objective on one batch; `disc` is required for the
/// style-based architecture and ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn encoder_objective(
    gen: &AnyGenerator,
    gp: &Bound,
    f: &dyn Critic,
    fp: &Bound,
    enc: &Encoder,
    ep: &Bound,
    disc: Option<(&LatentDisc, &Bound)>,
    x: &Var,
    cfg: &InversionConfig,
) -> Result<(EncoderLoss, Var)> {
    let code = enc.encode(ep, x)?;
    let recon = decode(gen, gp, &code, cfg.noise())?;
    let dist = loss_dist(x, &recon)?;
    let perc = loss_perc(f, fp, x, &recon)?;
    let latent = match gen.arch() {
        Arch::ProGan => loss_latent(&code),
        Arch::StyleGan => {
            let (d, dp) = disc.ok_or_else(|| Error::Param("style inversion needs a latent discriminator".into()))?;
            loss_latent_style(d, dp, &code)?
        }
    };
    let w = cfg.weights(gen.arch());
    let total = dist
        .scale(w.dist as Real)
        .add(&perc.scale(w.perc as Real))
        .add(&latent.scale(w.latent as Real));
    if !total.value().all_finite() {
        return Err(Error::NonFinite("encoder objective".into()));
    }
    let out = EncoderLoss {
        dist: dist.item(),
        perc: perc.item(),
        latent: latent.item(),
        total,
    };
    Ok((out, code))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderRecord {
    pub step: usize,
    pub total: f64,
    pub dist: f64,
    pub perc: f64,
    pub latent: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_loss: Option<f64>,
}

pub struct EncoderTraining {
    pub encoder: Encoder,
    pub latent_disc: Option<LatentDisc>,
    pub history: Vec<EncoderRecord>,
    /// Latent-discriminator forward passes made during training.
    pub disc_evaluations: usize,
}

/// Train a fresh encoder (and, for the style architecture, a latent
/// discriminator in 1:1 alternation) against a frozen generator and critic.
pub fn train_encoder(gen: &AnyGenerator, f: &dyn Critic, corpus: &[Volume], cfg: &InversionConfig) -> Result<EncoderTraining> {
    cfg.validate()?;
    let net = *gen.config();
    if corpus.is_empty() {
        return Err(Error::Param("encoder training needs a non-empty corpus".into()));
    }
    if let Some(v) = corpus.iter().find(|v| v.shape() != net.full_shape) {
        return Err(Error::Shape(format!("corpus volume {:?} does not match model {:?}", v.shape(), net.full_shape)));
    }
    let mut enc = Encoder::new(net, cfg.seed)?;
    let mut disc = (net.arch == Arch::StyleGan).then(|| LatentDisc::new(cfg.seed));
    let adam = AdamConfig {
        lr: cfg.encoder_lr,
        beta1: cfg.encoder_betas.0,
        beta2: cfg.encoder_betas.1,
        eps: 1e-8,
        clip_norm: None,
    };
    let mut opt_e = Adam::new(enc.params(), adam);
    let mut opt_d = disc.as_ref().map(|d| Adam::new(d.params(), adam));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe4c0_de);
    let gp = gen.params().bind(false);
    let fp = f.params().bind(false);
    let mut history = Vec::with_capacity(cfg.encoder_steps);
    let mut disc_evals = 0;
    for step in 0..cfg.encoder_steps {
        let picks: Vec<&Volume> = (0..cfg.encoder_batch)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect();
        let x = Var::constant(Volume::batch_tensor(&picks));
        let mut disc_loss = None;
        if let (Some(d), Some(opt)) = (disc.as_mut(), opt_d.as_mut()) {
            let style = gen.as_style().expect("style discriminator implies style generator");
            let (real, fake) = {
                let _ng = no_grad();
                let z = Var::constant(Tensor::randn(&[cfg.encoder_batch, LATENT_DIM], &mut rng));
                let ep = enc.params().bind(false);
                (style.map(&gp, &z)?.detach(), enc.encode(&ep, &x)?.detach())
            };
            let dp = d.params().bind(true);
            let l = d.bce_loss(&dp, &real, &fake)?;
            disc_evals += 2;
            let g = grad(&l, dp.vars());
            opt.step(d.params_mut(), &g)?;
            disc_loss = Some(l.item());
        }
        let ep = enc.params().bind(true);
        let dbound = disc.as_ref().map(|d| (d, d.params().bind(false)));
        let (l, _) = encoder_objective(gen, &gp, f, &fp, &enc, &ep, dbound.as_ref().map(|(d, p)| (*d, p)), &x, cfg)
            .map_err(|e| Error::Diverged { step, reason: e.to_string() })?;
        if dbound.is_some() {
            disc_evals += 1;
        }
        let g = grad(&l.total, ep.vars());
        opt_e.step(enc.params_mut(), &g).map_err(|e| Error::Diverged { step, reason: e.to_string() })?;
        history.push(EncoderRecord {
            step,
            total: l.total.item(),
            dist: l.dist,
            perc: l.perc,
            latent: l.latent,
            disc_loss,
        });
    }
    Ok(EncoderTraining {
        encoder: enc,
        latent_disc: disc,
        history,
        disc_evaluations: disc_evals,
    })
}

/// Encoder codes `[B, 512]` for full-resolution volumes.
pub fn encode_volumes(enc: &Encoder, vols: &[&Volume]) -> Result<Tensor> {
    let _ng = no_grad();
    let ep = enc.params().bind(false);
    Ok(enc.encode(&ep, &Var::constant(Volume::batch_tensor(vols)))?.value().clone())
}

/// Per-volume `ℓ_dist(x, G(E(x)))`.
pub fn encoder_distortion(gen: &AnyGenerator, enc: &Encoder, vols: &[&Volume], noise: NoiseMode) -> Result<Vec<f64>> {
    let codes = encode_volumes(enc, vols)?;
    let _ng = no_grad();
    let gp = gen.params().bind(false);
    let x = Var::constant(Volume::batch_tensor(vols));
    let recon = decode(gen, &gp, &Var::constant(codes), noise)?;
    Ok(to_f64(loss_dist_per_sample(&x, &recon)?.value()))
}

// ---------------------------------------------------------------------------
// Refinement

#[derive(Clone, Debug)]
pub struct Refinement {
    /// Returned codes `[B, 512]`.
    pub codes: Tensor,
    pub init_objective: Vec<f64>,
    pub objective: Vec<f64>,
    pub init_dist: Vec<f64>,
    pub dist: Vec<f64>,
    /// Iterate index each returned code came from (0 = the initial code).
    pub best_step: Vec<usize>,
    /// Per-sample objective at every evaluated iterate.
    pub trace: Vec<Vec<f64>>,
    /// Adam updates actually applied.
    pub updates: usize,
    /// Set when a non-finite objective cut the run short.
    pub warning: bool,
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Per-sample refinement objective and distortion for `code`.
#[allow(clippy::too_many_arguments)]
pub fn refine_objective(
    gen: &AnyGenerator,
    gp: &Bound,
    f: &dyn Critic,
    fp: &Bound,
    target: &Var,
    target_feat: &Var,
    code: &Var,
    noise: NoiseMode,
) -> Result<(Var, Var)> {
    let recon = decode(gen, gp, code, noise)?;
    let dist = loss_dist_per_sample(target, &recon)?;
    let perc = f.features(fp, &recon)?.sub(target_feat).square().mean_per_sample();
    let obj = match gen.arch() {
        Arch::ProGan => {
            let mse = target.sub(&recon).square().mean_per_sample();
            let norm = code.square().sum_per_sample().scale(1.0 / LATENT_DIM as Real);
            mse.add(&perc).add(&norm)
        }
        Arch::StyleGan => perc,
    };
    Ok((obj, dist))
}

/// Adam-refine `init` codes for `targets`, returning for each sample the
/// lowest-objective iterate whose distortion does not exceed the initial one.
pub fn refine(
    gen: &AnyGenerator,
    f: &dyn Critic,
    targets: &[&Volume],
    init: &Tensor,
    steps: usize,
    lr: f64,
    noise: NoiseMode,
) -> Result<Refinement> {
    let b = targets.len();
    if init.shape() != [b, LATENT_DIM] {
        return Err(Error::Shape(format!("initial codes {:?} for {b} targets", init.shape())));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Param(format!("refinement lr must be positive, got {lr}")));
    }
    if !init.all_finite() {
        return Err(Error::NonFinite("initial code".into()));
    }
    let gp = gen.params().bind(false);
    let fp = f.params().bind(false);
    let target = Var::constant(Volume::batch_tensor(targets));
    let target_feat = {
        let _ng = no_grad();
        f.features(&fp, &target)?.detach()
    };
    let mut ps = ParamSet::new();
    let id = ps.add("code", init.clone());
    let mut opt = Adam::new(&ps, AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None });
    let mut best = init.clone();
    let mut best_obj = vec![f64::INFINITY; b];
    let mut best_dist = vec![0.0; b];
    let mut best_step = vec![0; b];
    let mut init_obj = Vec::new();
    let mut init_dist = Vec::new();
    let mut trace = Vec::with_capacity(steps + 1);
    let mut warning = false;
    let mut updates = 0;
    for k in 0..=steps {
        let code = Var::param(ps.get(id).clone());
        let (obj, dist) = refine_objective(gen, &gp, f, &fp, &target, &target_feat, &code, noise)?;
        let (o, d) = (to_f64(obj.value()), to_f64(dist.value()));
        if k == 0 {
            if o.iter().chain(&d).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("refinement objective at the initial code".into()));
            }
            init_obj = o.clone();
            init_dist = d.clone();
        }
        if o.iter().chain(&d).any(|v| !v.is_finite()) {
            log::warn!("non-finite refinement objective at step {k}; returning best iterate");
            warning = true;
            break;
        }
        for i in 0..b {
            if d[i] <= init_dist[i] && o[i] < best_obj[i] {
                best_obj[i] = o[i];
                best_dist[i] = d[i];
                best_step[i] = k;
                let row = &ps.get(id).data()[i * LATENT_DIM..(i + 1) * LATENT_DIM];
                best.data_mut()[i * LATENT_DIM..(i + 1) * LATENT_DIM].copy_from_slice(row);
            }
        }
        trace.push(o);
        if k == steps {
            break;
        }
        let g = grad(&obj.sum(), std::slice::from_ref(&code));
        if opt.step(&mut ps, &g).is_err() {
            log::warn!("non-finite refinement gradient at step {k}; returning best iterate");
            warning = true;
            break;
        }
        updates += 1;
    }
    Ok(Refinement {
        codes: best,
        init_objective: init_obj,
        objective: best_obj,
        init_dist,
        dist: best_dist,
        best_step,
        trace,
        updates,
        warning,
    })
}

/// Encoder initialization followed by refinement, using the checkpoint's encoder.
pub fn invert(ck: &Checkpoint, targets: &[&Volume], cfg: &InversionConfig) -> Result<Refinement> {
    let enc = ck
        .encoder
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no trained encoder".into()))?;
    let init = encode_volumes(enc, targets)?;
    refine(&ck.generator, &ck.critic, targets, &init, cfg.refine_steps, cfg.refine_lr, cfg.noise())
}

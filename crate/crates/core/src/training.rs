//! Wasserstein training with a two-sided gradient penalty and drift term,
//! run under the progressive stage schedule: one generator update followed by
//! `n_critic` critic updates, linear fade-in over the first half of stages
//! 2–5, per-stage learning-rate decay and a held-out validation watch.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, grad_with, no_grad, Var};
use crate::error::{Error, Result};
use crate::nn::{
    Bound, Checkpoint, Critic, Generator, NetConfig, NoiseMode, StageState, LATENT_DIM, NUM_STAGES,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{self, Real, Tensor};
use crate::volume::Volume;

/// Samples drawn for the mean mapped latent stored with style-based checkpoints.
pub const W_BAR_SAMPLES: usize = 10_000;
const NORM_EPS: Real = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Gradient-penalty weight.
    pub p1: f64,
    /// Drift-penalty weight.
    pub p2: f64,
    pub lr_g: f64,
    pub lr_c: f64,
    pub betas: (f64, f64),
    pub eps_g: f64,
    pub eps_c: f64,
    pub n_critic: usize,
    pub grad_clip_norm: f64,
    /// Real samples shown to the critic per stage.
    pub stage_samples: [u64; NUM_STAGES],
    /// Generator steps per stage; overrides `stage_samples` when set.
    pub steps_per_stage: Option<usize>,
    pub lr_decay_per_stage: f64,
    pub batch_per_stage: [usize; NUM_STAGES],
    pub map_lr_mult: f64,
    pub val_fraction: f64,
    /// Generator steps between validation checks (0 disables them).
    pub val_every: usize,
    /// Generator steps between periodic checkpoints (0 disables them).
    pub checkpoint_every: usize,
    /// Validation loss diverges when `|val - train| > factor * max(|train|, 1e-3)`.
    pub val_divergence_factor: f64,
    /// Consecutive diverging checks before warning (and optionally stopping).
    pub val_patience: usize,
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p1: 10.0,
            p2: 1e-3,
            lr_g: 4e-3,
            lr_c: 4e-3,
            betas: (0.0, 0.98),
            eps_g: 1e-7,
            eps_c: 5e-5,
            n_critic: 5,
            grad_clip_norm: 2.0,
            stage_samples: [180_000, 360_000, 360_000, 360_000, 360_000],
            steps_per_stage: None,
            lr_decay_per_stage: 0.85,
            batch_per_stage: [24, 24, 12, 6, 3],
            map_lr_mult: 0.02,
            val_fraction: 0.10,
            val_every: 50,
            checkpoint_every: 0,
            val_divergence_factor: 3.0,
            val_patience: 3,
            early_stop: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small-corpus preset: fixed generator steps per stage.
    pub fn desk(steps_per_stage: usize) -> Self {
        Self {
            steps_per_stage: Some(steps_per_stage),
            val_every: (steps_per_stage / 4).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_g", self.lr_g),
            ("lr_c", self.lr_c),
            ("eps_g", self.eps_g),
            ("eps_c", self.eps_c),
            ("grad_clip_norm", self.grad_clip_norm),
            ("lr_decay_per_stage", self.lr_decay_per_stage),
            ("map_lr_mult", self.map_lr_mult),
            ("val_divergence_factor", self.val_divergence_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.p1 < 0.0 || self.p2 < 0.0 {
            return Err(Error::Param("penalty weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Param(format!("betas {:?} outside [0,1)", self.betas)));
        }
        if self.n_critic == 0 || self.batch_per_stage.contains(&0) {
            return Err(Error::Param("n_critic and batch sizes must be >= 1".into()));
        }
        if self.steps_per_stage == Some(0) || (self.steps_per_stage.is_none() && self.stage_samples.contains(&0)) {
            return Err(Error::Param("every stage needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Param(format!("val_fraction {} outside [0,1)", self.val_fraction)));
        }
        Ok(())
    }

    /// Generator steps in `stage` (1-based).
    pub fn steps_for_stage(&self, stage: usize) -> usize {
        match self.steps_per_stage {
            Some(n) => n,
            None => {
                let per_step = (self.batch_per_stage[stage - 1] * self.n_critic) as u64;
                self.stage_samples[stage - 1].div_ceil(per_step) as usize
            }
        }
    }

    /// Learning rate after entering `stage`.
    pub fn lr_at_stage(&self, base: f64, stage: usize) -> f64 {
        base * self.lr_decay_per_stage.powi(stage as i32 - 1)
    }

    /// Fade weight at generator step `step` (0-based) of `stage`.
    pub fn fade_at(&self, stage: usize, step: usize) -> f64 {
        if stage == 1 {
            return 1.0;
        }
        let half = (self.steps_for_stage(stage) / 2).max(1);
        (step as f64 / half as f64).min(1.0)
    }
}

// ---------------------------------------------------------------------------
// Objectives

/// Terms of the critic objective, each averaged over the batch.
pub struct CriticLoss {
    pub total: Var,
    pub fake_score: f64,
    pub real_score: f64,
    pub gradient_penalty: f64,
    pub drift: f64,
    /// Mean `|‖∇f(x̃)‖ - 1|` over the interpolates.
    pub lipschitz_gap: f64,
}

/// Batch mean of `f(G(z)) - f(x) + p1 (‖∇f(x̃)‖ - 1)² + p2 f(x)²` with
/// `x̃ = u x + (1 - u) G(z)` and one `u` per sample.
pub fn critic_loss<C: Critic + ?Sized>(
    f: &C,
    fp: &Bound,
    real: &Tensor,
    fake: &Tensor,
    u: &[Real],
    stage: StageState,
    p1: f64,
    p2: f64,
) -> Result<CriticLoss> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "real batch {:?} and fake batch {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    let b = real.shape()[0];
    if u.len() != b {
        return Err(Error::Shape(format!("{} interpolation weights for batch {b}", u.len())));
    }
    let fr = f.score(fp, &Var::constant(real.clone()), stage)?;
    let ff = f.score(fp, &Var::constant(fake.clone()), stage)?;
    let mut total = ff.sub(&fr);
    let mut gp_mean = 0.0;
    let mut gap = 0.0;
    if p1 > 0.0 {
        let per = real.len() / b;
        let mixed = Tensor::from_fn(real.shape(), |i| {
            let w = u[i / per];
            w * real.data()[i] + (1.0 - w) * fake.data()[i]
        });
        let xt = Var::param(mixed);
        let st = f.score(fp, &xt, stage)?;
        let g = grad_with(&[st], None, std::slice::from_ref(&xt), true)
            .pop()
            .flatten()
            .unwrap_or_else(|| Var::constant(Tensor::zeros(xt.shape())));
        let norm = g.square().sum_per_sample().add_scalar(NORM_EPS).sqrt();
        let gp = norm.add_scalar(-1.0).square();
        gp_mean = gp.value().mean();
        gap = norm.value().data().iter().map(|&n| (n as f64 - 1.0).abs()).sum::<f64>() / b as f64;
        total = total.add(&gp.scale(p1 as Real));
    }
    let drift = fr.square();
    if p2 > 0.0 {
        total = total.add(&drift.scale(p2 as Real));
    }
    let total = total.mean();
    if !total.value().all_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    Ok(CriticLoss {
        fake_score: ff.value().mean(),
        real_score: fr.value().mean(),
        gradient_penalty: gp_mean,
        drift: drift.value().mean(),
        lipschitz_gap: gap,
        total,
    })
}

/// `-mean f(G(z))` for a generated batch that stays attached to its graph.
pub fn generator_loss<C: Critic + ?Sized>(f: &C, fp: &Bound, fake: &Var, stage: StageState) -> Result<Var> {
    let loss = f.score(fp, fake, stage)?.mean().neg();
    if !loss.value().all_finite() {
        return Err(Error::NonFinite("generator loss".into()));
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: usize,
    pub fade: f64,
    pub loss_c: f64,
    pub loss_g: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss_c: Option<f64>,
}

/// Receives metrics and checkpoints as training proceeds.
pub trait TrainSink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()>;
    /// Persist `ck` under `tag`; returns where it went, if anywhere.
    fn checkpoint(&mut self, ck: &Checkpoint, tag: &str) -> Result<Option<PathBuf>>;
}

/// Keeps everything in memory.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<(String, Checkpoint)>,
}

impl TrainSink for MemorySink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, ck: &Checkpoint, tag: &str) -> Result<Option<PathBuf>> {
        self.checkpoints.push((tag.to_string(), ck.clone()));
        Ok(None)
    }
}

/// Writes `metrics.jsonl` and `checkpoints/<tag>/` under one directory.
pub struct DirSink {
    dir: PathBuf,
    log: File,
}

impl DirSink {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("metrics.jsonl");
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir, log })
    }
}

impl TrainSink for DirSink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))
    }

    fn checkpoint(&mut self, ck: &Checkpoint, tag: &str) -> Result<Option<PathBuf>> {
        let path = self.dir.join("checkpoints").join(tag);
        ck.save(&path)?;
        Ok(Some(path))
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub generator_steps: u64,
    pub critic_steps: u64,
    /// Real volumes shown to the critic.
    pub samples_seen: u64,
    pub checkpoints: Vec<String>,
    pub early_stopped: bool,
    pub validation_warnings: usize,
}

/// Split indices into (train, validation) deterministically.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a11);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if fraction > 0.0 && n >= 2 { n_val.max(1) } else { n_val };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Average-pool full-resolution volumes down to `stage`.
pub fn downsample_to_stage(vols: &[&Volume], stage: usize) -> Tensor {
    let mut t = Volume::batch_tensor(vols);
    for _ in stage..NUM_STAGES {
        t = tensor::sumpool2(&t).map(|v| v * 0.125);
    }
    t
}

fn batch_of(pool: &[Tensor], idx: &[usize]) -> Tensor {
    let items: Vec<Tensor> = idx.iter().map(|&i| pool[i].clone()).collect();
    Tensor::stack_batch(&items)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

struct Trainer<'a, S: TrainSink> {
    cfg: &'a TrainConfig,
    ck: Checkpoint,
    sink: &'a mut S,
    rng: ChaCha8Rng,
    opt_g: Adam,
    opt_c: Adam,
    gen_steps: u64,
    critic_steps: u64,
    samples: u64,
    tags: Vec<String>,
    warn_streak: usize,
    warnings: usize,
}

impl<S: TrainSink> Trainer<'_, S> {
    fn noise(&mut self) -> NoiseMode {
        NoiseMode::Seeded(self.rng.random())
    }

    fn fakes(&mut self, b: usize, stage: StageState) -> Result<Tensor> {
        let z = Var::constant(normal(&[b, LATENT_DIM], &mut self.rng));
        let noise = self.noise();
        let _ng = no_grad();
        let gp = self.ck.generator.params().bind(false);
        Ok(self.ck.generator.generate(&gp, &z, stage, noise)?.value().clone())
    }

    fn uniforms(&mut self, b: usize) -> Vec<Real> {
        (0..b).map(|_| self.rng.random::<f64>() as Real).collect()
    }

    fn generator_step(&mut self, b: usize, stage: StageState) -> Result<f64> {
        let z = Var::constant(normal(&[b, LATENT_DIM], &mut self.rng));
        let noise = self.noise();
        let gp = self.ck.generator.params().bind(true);
        let fp = self.ck.critic.params().bind(false);
        let fake = self.ck.generator.generate(&gp, &z, stage, noise)?;
        let loss = generator_loss(&self.ck.critic, &fp, &fake, stage)?;
        let g = grad(&loss, gp.vars());
        self.opt_g.step(self.ck.generator.params_mut(), &g)?;
        self.gen_steps += 1;
        Ok(loss.item())
    }

    fn critic_step(&mut self, pool: &[Tensor], train: &[usize], b: usize, stage: StageState) -> Result<f64> {
        let picks: Vec<usize> = (0..b).map(|_| train[self.rng.random_range(0..train.len())]).collect();
        let real = batch_of(pool, &picks);
        let fake = self.fakes(b, stage)?;
        let u = self.uniforms(b);
        let fp = self.ck.critic.params().bind(true);
        let l = critic_loss(&self.ck.critic, &fp, &real, &fake, &u, stage, self.cfg.p1, self.cfg.p2)?;
        let g = grad(&l.total, fp.vars());
        self.opt_c.step(self.ck.critic.params_mut(), &g)?;
        self.critic_steps += 1;
        self.samples += b as u64;
        Ok(l.total.item())
    }

    fn validation_loss(&mut self, pool: &[Tensor], val: &[usize], b: usize, stage: StageState) -> Result<f64> {
        let picks: Vec<usize> = (0..b.min(val.len())).map(|i| val[i % val.len()]).collect();
        let real = batch_of(pool, &picks);
        let fake = self.fakes(picks.len(), stage)?;
        let u = self.uniforms(picks.len());
        let fp = self.ck.critic.params().bind(false);
        let l = critic_loss(&self.ck.critic, &fp, &real, &fake, &u, stage, self.cfg.p1, self.cfg.p2)?;
        Ok(l.total.item())
    }

    fn save(&mut self, tag: String) -> Result<()> {
        self.sink.checkpoint(&self.ck, &tag)?;
        self.tags.push(tag);
        Ok(())
    }

    fn halt(&mut self, err: Error) -> Error {
        let step = self.gen_steps as usize;
        let reason = err.to_string();
        // Updates are applied only after finite losses and gradients, so the
        // current parameters are the last good ones.
        if let Err(e) = self.sink.checkpoint(&self.ck, "last-good") {
            log::error!("could not save last good checkpoint: {e}");
        }
        Error::Diverged { step, reason }
    }
}

/// Train a fresh model of shape `net` on `corpus` (full-resolution volumes).
pub fn train<S: TrainSink>(corpus: &[Volume], net: NetConfig, cfg: &TrainConfig, sink: &mut S) -> Result<TrainReport> {
    let ck = Checkpoint::new(net, cfg.seed)?;
    train_from(corpus, ck, cfg, sink)
}

/// Continue training `ck` from its recorded stage through stage 5.
pub fn train_from<S: TrainSink>(corpus: &[Volume], mut ck: Checkpoint, cfg: &TrainConfig, sink: &mut S) -> Result<TrainReport> {
    cfg.validate()?;
    let net = ck.cfg;
    if let Some(v) = corpus.iter().find(|v| v.shape() != net.full_shape) {
        return Err(Error::Shape(format!(
            "corpus volume {:?} does not match model shape {:?}",
            v.shape(),
            net.full_shape
        )));
    }
    let (train_idx, val_idx) = split_validation(corpus.len(), cfg.val_fraction, cfg.seed);
    let start = ck.stage.stage;
    let max_batch = cfg.batch_per_stage[start - 1..].iter().copied().max().unwrap_or(1);
    if train_idx.len() < max_batch {
        return Err(Error::Param(format!(
            "training split has {} volumes, smaller than one batch ({max_batch})",
            train_idx.len()
        )));
    }
    for e in ck.generator.params_mut().entries_mut() {
        if e.name.starts_with("mapping") {
            e.lr_mult = cfg.map_lr_mult as Real;
        }
    }
    let adam = |lr, eps| AdamConfig {
        lr,
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps,
        clip_norm: Some(cfg.grad_clip_norm),
    };
    let opt_g = Adam::new(ck.generator.params(), adam(cfg.lr_g, cfg.eps_g));
    let opt_c = Adam::new(ck.critic.params(), adam(cfg.lr_c, cfg.eps_c));
    let mut t = Trainer {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        ck,
        sink,
        opt_g,
        opt_c,
        gen_steps: 0,
        critic_steps: 0,
        samples: 0,
        tags: Vec::new(),
        warn_streak: 0,
        warnings: 0,
    };
    let refs: Vec<&Volume> = corpus.iter().collect();
    let mut early = false;
    'stages: for s in start..=NUM_STAGES {
        let pooled = downsample_to_stage(&refs, s);
        let pool: Vec<Tensor> = (0..corpus.len()).map(|i| pooled.batch_item(i)).collect();
        let b = cfg.batch_per_stage[s - 1];
        let (lr_g, lr_c) = (cfg.lr_at_stage(cfg.lr_g, s), cfg.lr_at_stage(cfg.lr_c, s));
        t.opt_g.set_lr(lr_g);
        t.opt_c.set_lr(lr_c);
        let steps = cfg.steps_for_stage(s);
        for i in 0..steps {
            let stage = StageState::new(s, cfg.fade_at(s, i))?;
            t.ck.stage = stage;
            let loss_g = match t.generator_step(b, stage) {
                Ok(l) => l,
                Err(e) => return Err(t.halt(e)),
            };
            let mut loss_c = 0.0;
            for _ in 0..cfg.n_critic {
                loss_c = match t.critic_step(&pool, &train_idx, b, stage) {
                    Ok(l) => l,
                    Err(e) => return Err(t.halt(e)),
                };
            }
            t.ck.step += 1;
            let val_loss_c = if cfg.val_every > 0 && !val_idx.is_empty() && (i + 1) % cfg.val_every == 0 {
                let v = match t.validation_loss(&pool, &val_idx, b, stage) {
                    Ok(v) => v,
                    Err(e) => return Err(t.halt(e)),
                };
                if (v - loss_c).abs() > cfg.val_divergence_factor * loss_c.abs().max(1e-3) {
                    t.warn_streak += 1;
                    if t.warn_streak >= cfg.val_patience {
                        t.warnings += 1;
                        log::warn!("validation critic loss {v:.4} diverges from training loss {loss_c:.4} at step {}", t.ck.step);
                        if cfg.early_stop {
                            early = true;
                        }
                    }
                } else {
                    t.warn_streak = 0;
                }
                Some(v)
            } else {
                None
            };
            t.sink.metrics(&MetricsRecord {
                step: t.ck.step,
                stage: s,
                fade: stage.fade_alpha,
                loss_c,
                loss_g,
                lr: lr_g,
                val_loss_c,
            })?;
            if cfg.checkpoint_every > 0 && t.ck.step % cfg.checkpoint_every as u64 == 0 {
                t.save(format!("step{:07}", t.ck.step))?;
            }
            if early {
                break 'stages;
            }
        }
        t.ck.stage = StageState::stable(s);
        if s == NUM_STAGES {
            finalize(&mut t.ck)?;
        }
        t.save(format!("stage{s}"))?;
    }
    Ok(TrainReport {
        generator_steps: t.gen_steps,
        critic_steps: t.critic_steps,
        samples_seen: t.samples,
        checkpoints: t.tags,
        early_stopped: early,
        validation_warnings: t.warnings,
        checkpoint: t.ck,
    })
}

/// Attach the mean mapped latent to style-based checkpoints.
pub fn finalize(ck: &mut Checkpoint) -> Result<()> {
    if let Some(g) = ck.generator.as_style() {
        ck.w_bar = Some((g.estimate_w_bar(W_BAR_SAMPLES, ck.seed)?, W_BAR_SAMPLES));
    }
    Ok(())
}

/// Mean `|‖∇f(x̃)‖ - 1|` over interpolates of the given batches.
pub fn lipschitz_gap<C: Critic + ?Sized>(f: &C, real: &Tensor, fake: &Tensor, stage: StageState, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<Real> = (0..real.shape()[0]).map(|_| rng.random::<f64>() as Real).collect();
    let fp = f.params().bind(false);
    Ok(critic_loss(f, &fp, real, fake, &u, stage, 1.0, 0.0)?.lipschitz_gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, ParamSet};
    use crate::volume::{phantom_corpus, PhantomSpec};

    /// `f(x) = mean(x)`.
    struct MeanCritic(ParamSet);
    impl Critic for MeanCritic {
        fn params(&self) -> &ParamSet {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.0
        }
        fn score(&self, _: &Bound, x: &Var, _: StageState) -> Result<Var> {
            Ok(x.mean_per_sample())
        }
        fn features(&self, _: &Bound, x: &Var) -> Result<Var> {
            Ok(x.clone())
        }
    }

    /// `f ≡ c`.
    struct ConstCritic(ParamSet, Real);
    impl Critic for ConstCritic {
        fn params(&self) -> &ParamSet {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.0
        }
        fn score(&self, _: &Bound, x: &Var, _: StageState) -> Result<Var> {
            Ok(x.mean_per_sample().scale(0.0).add_scalar(self.1))
        }
        fn features(&self, _: &Bound, x: &Var) -> Result<Var> {
            Ok(x.clone())
        }
    }

    fn vol(vals: &[Real]) -> Tensor {
        Tensor::new(&[1, 1, 1, 2, 2], vals.to_vec())
    }

    #[test]
    fn mean_critic_closed_form() {
        let f = MeanCritic(ParamSet::new());
        let p = f.params().bind(false);
        let real = vol(&[0.2, 0.4, 0.6, 0.8]);
        let fake = vol(&[0.1, 0.1, 0.3, 0.5]);
        let (p1, p2) = (10.0, 1e-3);
        let l = critic_loss(&f, &p, &real, &fake, &[0.3], StageState::stable(1), p1, p2).unwrap();
        let (fr, ff) = (0.5f64, 0.25f64);
        // ∇ mean(x) = 1/4 everywhere, so ‖∇‖ = sqrt(4)/4 = 1/2.
        let want = ff - fr + p1 * (0.5f64 - 1.0).powi(2) + p2 * fr * fr;
        assert!((l.total.item() - want).abs() < 1e-6, "{} vs {want}", l.total.item());
    }

    #[test]
    fn trivial_cases() {
        let zero = ConstCritic(ParamSet::new(), 0.0);
        let p = zero.params().bind(false);
        let real = vol(&[0.2, 0.4, 0.6, 0.8]);
        let fake = vol(&[0.9, 0.1, 0.3, 0.5]);
        let l = critic_loss(&zero, &p, &real, &fake, &[0.5], StageState::stable(1), 0.0, 1e-3).unwrap();
        assert_eq!(l.total.item(), 0.0);
        let f = MeanCritic(ParamSet::new());
        let l = critic_loss(&f, &p, &real, &fake, &[0.5], StageState::stable(1), 0.0, 0.0).unwrap();
        assert!((l.total.item() - (0.45 - 0.5)).abs() < 1e-7);
        let c = ConstCritic(ParamSet::new(), 2.5);
        let g = generator_loss(&c, &p, &Var::constant(fake), StageState::stable(1)).unwrap();
        assert_eq!(g.item(), -2.5);
    }

    #[test]
    fn penalty_vanishes_at_unit_gradient() {
        // mean over 1 voxel has gradient exactly 1.
        let f = MeanCritic(ParamSet::new());
        let p = f.params().bind(false);
        let real = Tensor::new(&[1, 1, 1, 1, 1], vec![0.7]);
        let fake = Tensor::new(&[1, 1, 1, 1, 1], vec![0.2]);
        let l = critic_loss(&f, &p, &real, &fake, &[0.4], StageState::stable(1), 10.0, 0.0).unwrap();
        assert!(l.gradient_penalty.abs() < 1e-9);
        assert!(l.lipschitz_gap < 1e-6);
    }

    #[test]
    fn generator_gradient_matches_fd_on_two_parameter_toy() {
        // G(z) = sigmoid(a z + b) per voxel, scored by a real patch critic at stage 1.
        let cfg = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let critic = crate::nn::PatchCritic::new(cfg, 4).unwrap();
        let fp = critic.params().bind(false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[2, 1, 2, 2, 2], &mut rng);
        let loss_at = |a: Real, b: Real, track: bool| {
            let (va, vb) = if track {
                (Var::param(Tensor::full(&[1], a)), Var::param(Tensor::full(&[1], b)))
            } else {
                (Var::constant(Tensor::full(&[1], a)), Var::constant(Tensor::full(&[1], b)))
            };
            let x = Var::constant(z.clone()).mul(&va).add(&vb).sigmoid();
            (generator_loss(&critic, &fp, &x, StageState::stable(1)).unwrap(), va, vb)
        };
        let (a0, b0) = (0.8 as Real, -0.3 as Real);
        let (l, va, vb) = loss_at(a0, b0, true);
        let g = grad(&l, &[va, vb]);
        let h: Real = if cfg!(feature = "f64") { 1e-6 } else { 1e-2 };
        let fd_a = (loss_at(a0 + h, b0, false).0.item() - loss_at(a0 - h, b0, false).0.item()) / (2.0 * h as f64);
        let fd_b = (loss_at(a0, b0 + h, false).0.item() - loss_at(a0, b0 - h, false).0.item()) / (2.0 * h as f64);
        for (an, fd) in [(g[0].item() as f64, fd_a), (g[1].item() as f64, fd_b)] {
            assert!((an - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "analytic {an} fd {fd}");
        }
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.steps_for_stage(1), 1500);
        assert_eq!(cfg.steps_for_stage(5), 24_000);
        assert!((cfg.lr_at_stage(cfg.lr_g, 3) - cfg.lr_g * 0.85 * 0.85).abs() < 1e-9);
        let desk = TrainConfig::desk(10);
        assert_eq!(desk.fade_at(1, 0), 1.0);
        assert_eq!(desk.fade_at(2, 0), 0.0);
        assert_eq!(desk.fade_at(2, 4), 0.8);
        assert_eq!(desk.fade_at(2, 5), 1.0);
        assert_eq!(desk.fade_at(2, 9), 1.0);
    }

    #[test]
    fn validation_split_is_disjoint() {
        let (tr, va) = split_validation(50, 0.1, 3);
        assert_eq!(va.len(), 5);
        assert_eq!(tr.len(), 45);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    fn tiny_corpus(n: usize) -> Vec<Volume> {
        phantom_corpus(n, &PhantomSpec::default(), [32, 32, 32], 1).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_per_stage: [4, 4, 2, 2, 1],
            val_every: 2,
            checkpoint_every: 5,
            ..TrainConfig::desk(4)
        }
    }

    #[test]
    fn smoke_run_counts_and_checkpoints() {
        let corpus = tiny_corpus(12);
        let net = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let mut sink = MemorySink::default();
        let rep = train(&corpus, net, &tiny_cfg(), &mut sink).unwrap();
        assert_eq!(rep.generator_steps, 20);
        assert_eq!(rep.critic_steps, 5 * rep.generator_steps);
        assert!(sink.records.iter().all(|r| r.loss_c.is_finite() && r.loss_g.is_finite()));
        let tags: Vec<&str> = sink.checkpoints.iter().map(|(t, _)| t.as_str()).collect();
        assert!(tags.contains(&"stage5") && tags.contains(&"step0000005"));
        assert!(tags.len() >= 5);
        let s3 = sink.records.iter().find(|r| r.stage == 3).unwrap();
        assert!((s3.lr - 4e-3 * 0.85 * 0.85).abs() < 1e-9);
        assert!(sink.records.iter().any(|r| r.val_loss_c.is_some()));
        assert_eq!(rep.checkpoint.stage, StageState::full());
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let corpus = tiny_corpus(12);
        let net = NetConfig::new(Arch::StyleGan, 1, [32, 32, 32]).unwrap();
        let cfg = TrainConfig { steps_per_stage: Some(2), ..tiny_cfg() };
        let run = || {
            let mut sink = MemorySink::default();
            train(&corpus, net, &cfg, &mut sink).unwrap();
            sink.records
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_small_corpus_and_bad_shapes() {
        let net = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let mut sink = MemorySink::default();
        assert!(train(&tiny_corpus(3), net, &tiny_cfg(), &mut sink).is_err());
        let wrong = phantom_corpus(12, &PhantomSpec::default(), [32, 32, 64], 1).unwrap();
        assert!(matches!(train(&wrong, net, &tiny_cfg(), &mut sink), Err(Error::Shape(_))));
    }

    #[test]
    fn divergence_halts_with_last_good_checkpoint() {
        let corpus = tiny_corpus(12);
        let net = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let mut ck = Checkpoint::new(net, 0).unwrap();
        let id = ck.critic.params().find("out.bias").unwrap();
        *ck.critic.params_mut().get_mut(id) = Tensor::full(&[1], Real::INFINITY);
        let mut sink = MemorySink::default();
        let err = train_from(&corpus, ck, &tiny_cfg(), &mut sink).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
        assert_eq!(sink.checkpoints.last().unwrap().0, "last-good");
    }
}

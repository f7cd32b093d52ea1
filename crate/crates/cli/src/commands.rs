//! Subcommand implementations.

use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;
use voxgan::inversion::{self, InversionConfig};
use voxgan::latent::{self, TruncationConfig, DEFAULT_PSI, DEFAULT_TRUNCATION};
use voxgan::metrics::{self, FeatureExtractor, FeatureSet, DEFAULT_K, REALISM_CAP};
use voxgan::nn::{Arch, Checkpoint, NetConfig};
use voxgan::preprocess::{self, PreprocessConfig};
use voxgan::training::{self, DirSink, TrainConfig};
use voxgan::volume::{phantom_corpus, read_corpus, read_volume, write_volume, write_volume_with, PhantomSpec};
use voxgan::{Tensor, Volume};

use crate::cli::*;
use crate::codes::CodeFile;
use crate::service::{self, AppState};
use crate::store::VolumeStore;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Preprocess(a) => preprocess_cmd(a),
        Command::Train(a) => train(a),
        Command::TrainEncoder(a) => train_encoder(a),
        Command::Invert(a) => invert(a),
        Command::Generate(a) => generate(a),
        Command::Transition(a) => transition(a),
        Command::Mix(a) => mix(a),
        Command::Directions(a) => directions(a),
        Command::Edit(a) => edit(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Serve(a) => serve(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn load_corpus(dir: &Path) -> Result<Vec<Volume>> {
    let vols = read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    ensure!(!vols.is_empty(), "no volumes in {}", dir.display());
    Ok(vols)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn label(ck: &Path) -> String {
    ck.display().to_string()
}

fn phantom(a: PhantomArgs) -> Result<()> {
    create_dir(&a.out)?;
    let vols = phantom_corpus(a.count, &PhantomSpec::default(), a.shape, a.seed)?;
    for (i, v) in vols.iter().enumerate() {
        write_volume_with(v, a.out.join(format!("phantom_{i:04}.vgan")), "phantom")?;
    }
    println!("wrote {} phantoms of shape {:?} to {}", vols.len(), a.shape, a.out.display());
    Ok(())
}

fn preprocess_cmd(a: PreprocessArgs) -> Result<()> {
    let mut cfg: PreprocessConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PreprocessConfig::default(),
    };
    if let Some(t) = a.target_shape {
        cfg.target_shape = t;
    }
    if let Some(c) = a.clip {
        cfg.dct_clip = c;
    }
    if let Some(f) = a.subsample {
        cfg.subsample_factor = f;
    }
    if let Some(n) = a.stacks {
        cfg.n_stacks = n;
    }
    if let Some(d) = a.stack_depth {
        cfg.stack_depth = d;
    }
    if let Some(n) = a.aug_per_stack {
        cfg.aug_per_stack = n;
    }
    cfg.validate()?;
    let paths = voxgan::volume::list_volumes(&a.input)?;
    ensure!(!paths.is_empty(), "no volumes in {}", a.input.display());
    let mut vols = paths.iter().map(read_volume).collect::<voxgan::Result<Vec<_>>>()?;
    if a.normalize {
        preprocess::normalize_corpus(&mut vols);
    }
    create_dir(&a.out)?;
    let mut n = 0;
    for (i, (path, v)) in paths.iter().zip(&vols).enumerate() {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("scan{i}"));
        for (j, s) in preprocess::preprocess_volume(v, &cfg, a.seed, i as u64)?.iter().enumerate() {
            write_volume_with(s, a.out.join(format!("{stem}_{j:02}.vgan")), &format!("preprocess:{stem}"))?;
            n += 1;
        }
    }
    println!("wrote {n} stacks to {}", a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.data)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(s) = a.steps_per_stage {
        cfg.steps_per_stage = Some(s);
        cfg.val_every = (s / 4).max(1);
    }
    if let Some(b) = a.batch {
        cfg.batch_per_stage = [b; 5];
    }
    if let Some(n) = a.n_critic {
        cfg.n_critic = n;
    }
    let net = NetConfig::new(a.arch, a.channels, corpus[0].shape())?
        .with_critic_channels(a.critic_channels.unwrap_or(a.channels))?;
    create_dir(&a.out)?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut sink = DirSink::new(&a.out)?;
    let report = training::train(&corpus, net, &cfg, &mut sink)?;
    let fin = a.out.join("final");
    report.checkpoint.save(&fin)?;
    println!(
        "trained {} generator / {} critic steps; final checkpoint at {}{}",
        report.generator_steps,
        report.critic_steps,
        fin.display(),
        if report.early_stopped { " (early stop)" } else { "" }
    );
    Ok(())
}

fn train_encoder(a: TrainEncoderArgs) -> Result<()> {
    let mut ck = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.data)?;
    let mut cfg = InversionConfig { seed: a.seed, ..InversionConfig::default() };
    if let Some(s) = a.steps {
        cfg.encoder_steps = s;
    }
    if let Some(b) = a.batch {
        cfg.encoder_batch = b;
    }
    let r = inversion::train_encoder(&ck.generator, &ck.critic, &corpus, &cfg)?;
    let last = r.history.last().map(|h| h.total).unwrap_or(f64::NAN);
    ck.encoder = Some(r.encoder);
    ck.latent_disc = r.latent_disc;
    let out = a.out.unwrap_or(a.checkpoint);
    ck.save(&out)?;
    println!("trained encoder for {} steps (final objective {last:.5}); saved to {}", cfg.encoder_steps, out.display());
    Ok(())
}

fn invert(a: InvertArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if let Some(arch) = a.arch {
        ensure!(arch == ck.cfg.arch, "checkpoint is {}, --arch says {arch}", ck.cfg.arch);
    }
    let x = read_volume(&a.input)?;
    let cfg = InversionConfig { refine_steps: a.steps, ..InversionConfig::default() };
    let r = inversion::invert(&ck, &[&x], &cfg)?;
    let mut code = CodeFile::new(ck.cfg.arch, r.codes.data(), &label(&a.checkpoint), "invert");
    code.objective = Some(r.objective[0]);
    code.write(&a.out)?;
    if let Some(p) = &a.reconstruction {
        write_volume(&latent::generate_each(&ck.generator, &r.codes, cfg.noise())?[0], p)?;
    }
    println!(
        "objective {:.6} -> {:.6}, distortion {:.6} -> {:.6}{}",
        r.init_objective[0],
        r.objective[0],
        r.init_dist[0],
        r.dist[0],
        if r.warning { " (stopped early: non-finite objective)" } else { "" }
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    ensure!(a.count >= 1, "count must be at least 1");
    let tc = match (ck.cfg.arch, a.truncation, a.psi) {
        (Arch::ProGan, t, None) => TruncationConfig::truncnorm(t.unwrap_or(DEFAULT_TRUNCATION)),
        (Arch::StyleGan, None, p) => {
            let w_bar = match (&ck.w_bar, ck.generator.as_style()) {
                (Some((w, _)), _) => w.clone(),
                (None, Some(g)) => g.estimate_w_bar(training::W_BAR_SAMPLES, ck.seed)?,
                (None, None) => unreachable!("style arch has a style generator"),
            };
            TruncationConfig::psi(p.unwrap_or(DEFAULT_PSI), w_bar)
        }
        (Arch::ProGan, _, Some(_)) => bail!("--psi applies to style-based checkpoints"),
        (Arch::StyleGan, Some(_), _) => bail!("--truncation applies to progressive checkpoints"),
    };
    let codes = latent::sample_truncated(&tc, &ck.generator, a.count, a.seed)?;
    let noise = InversionConfig::default().noise();
    let vols = latent::generate_each(&ck.generator, &codes, noise)?;
    create_dir(&a.out)?;
    for (i, v) in vols.iter().enumerate() {
        write_volume_with(v, a.out.join(format!("sample_{i:04}.vgan")), &format!("generate:{}", label(&a.checkpoint)))?;
        CodeFile::new(ck.cfg.arch, codes.batch_item(i).data(), &label(&a.checkpoint), "generate")
            .write(&a.out.join(format!("sample_{i:04}.json")))?;
    }
    println!("wrote {} samples to {}", vols.len(), a.out.display());
    Ok(())
}

fn read_code(path: &Path, arch: Arch) -> Result<Vec<voxgan::Real>> {
    let c = CodeFile::read(path)?;
    c.check_arch(arch)?;
    Ok(c.values())
}

fn transition(a: TransitionArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (c1, c2) = (read_code(&a.code_a, ck.cfg.arch)?, read_code(&a.code_b, ck.cfg.arch)?);
    let alphas = latent::transition_alphas(a.steps)?;
    let vols = latent::transition(&ck.generator, &c1, &c2, &alphas, InversionConfig::default().noise())?;
    create_dir(&a.out)?;
    for (i, (alpha, v)) in alphas.iter().zip(&vols).enumerate() {
        write_volume_with(v, a.out.join(format!("frame_{i:02}.vgan")), &format!("transition alpha={alpha}"))?;
    }
    println!("wrote {} frames (alpha {:?}) to {}", vols.len(), alphas, a.out.display());
    Ok(())
}

fn mix(a: MixArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let g = ck.generator.as_style().context("style mixing needs a style-based checkpoint")?;
    let (s, t) = (read_code(&a.source, Arch::StyleGan)?, read_code(&a.target, Arch::StyleGan)?);
    let v = latent::style_mix(g, &s, &t, a.boundary, InversionConfig::default().noise())?;
    write_volume_with(&v, &a.out, &format!("mix boundary={}", a.boundary))?;
    println!("wrote mix at boundary {} to {}", a.boundary, a.out.display());
    Ok(())
}

fn directions(a: DirectionsArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if let Some(arch) = a.arch {
        ensure!(arch == ck.cfg.arch, "checkpoint is {}, --arch says {arch}", ck.cfg.arch);
    }
    let d = latent::generator_directions(&ck.generator, a.k, ck.seed)?;
    let text = serde_json::to_string_pretty(&d)?;
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn edit(a: EditArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    ensure!(a.direction_index >= 1, "direction index is 1-based");
    let d = latent::generator_directions(&ck.generator, a.direction_index.max(4), ck.seed)?;
    let x = read_volume(&a.input)?;
    let cfg = InversionConfig { refine_steps: a.steps, ..InversionConfig::default() };
    let (e, _) = latent::edit(&ck, &x, d.direction(a.direction_index - 1)?, a.strength, &cfg)?;
    create_dir(&a.out)?;
    write_volume_with(&e.edited, a.out.join("edited.vgan"), "edit")?;
    write_volume_with(&e.reconstruction, a.out.join("reconstruction.vgan"), "edit")?;
    write_volume_with(&e.residual, a.out.join("residual.vgan"), "edit residual")?;
    CodeFile::new(ck.cfg.arch, &e.code, &label(&a.checkpoint), "invert").write(&a.out.join("code.json"))?;
    println!("edit MSE vs reconstruction {:.3e}; outputs in {}", e.edited.mse(&e.reconstruction), a.out.display());
    Ok(())
}

fn metrics_cmd(a: MetricsArgs) -> Result<()> {
    let real = load_corpus(&a.real)?;
    let gen = load_corpus(&a.generated)?;
    let shape = real[0].shape();
    ensure!(
        real.iter().chain(&gen).all(|v| v.shape() == shape),
        "all volumes must share one shape"
    );
    let (ex, acc) = metrics::reference_toy_extractor(shape, a.extractor_phantoms, a.seed)?;
    let fr = FeatureSet::new(ex.kind(), ex.extract(&real)?)?;
    let fg = FeatureSet::new(ex.kind(), ex.extract(&gen)?)?;
    let k = if a.k == 0 { DEFAULT_K } else { a.k };
    let fid = metrics::fid(&fr, &fg)?;
    let (precision, recall) = metrics::precision_recall(&fr, &fg, k)?;
    let realism: Vec<f64> = fg
        .rows
        .iter()
        .map(|r| metrics::realism(&fr, r, k, REALISM_CAP))
        .collect::<voxgan::Result<_>>()?;
    let mean_realism = realism.iter().sum::<f64>() / realism.len() as f64;
    let out = json!({
        "extractor": ex.kind(),
        "extractor_train_accuracy": acc,
        "n_real": real.len(),
        "n_generated": gen.len(),
        "k": k,
        "fid": fid,
        "precision": precision,
        "recall": recall,
        "realism_mean": mean_realism,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cks = AppState::load_checkpoints(&a.checkpoint_dir)?;
    ensure!(!cks.is_empty(), "no checkpoints under {}", a.checkpoint_dir.display());
    let store = VolumeStore::open(&a.store_dir).with_context(|| format!("opening store {}", a.store_dir.display()))?;
    let state = Arc::new(AppState::new(cks, store, InversionConfig::default(), a.workers));
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad host/port")?;
    let names = state.checkpoint_names();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, addr, |bound| {
        println!("serving {names:?} on http://{bound}");
    }))?;
    Ok(())
}

/// Stack code rows (used by tests and scripts).
pub fn codes_tensor(codes: &[CodeFile]) -> Tensor {
    let data = codes.iter().flat_map(|c| c.values()).collect();
    Tensor::new(&[codes.len(), voxgan::nn::LATENT_DIM], data)
}

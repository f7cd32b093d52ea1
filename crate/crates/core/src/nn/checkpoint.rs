//! Checkpoint directories: a `manifest.json` describing the model plus one
//! little-endian `f32` blob per parameter tensor, named `<network>.<path>.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Arch, Bound, Critic, Encoder, Generator, LatentDisc, NetConfig, NoiseMode, ParamSet, PatchCritic,
    ProGanGenerator, StageState, StyleGanGenerator,
};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

/// Either generator family behind one type.
#[derive(Clone, Debug)]
pub enum AnyGenerator {
    ProGan(ProGanGenerator),
    StyleGan(StyleGanGenerator),
}

impl AnyGenerator {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        Ok(match cfg.arch {
            Arch::ProGan => AnyGenerator::ProGan(ProGanGenerator::new(cfg, seed)?),
            Arch::StyleGan => AnyGenerator::StyleGan(StyleGanGenerator::new(cfg, seed)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            AnyGenerator::ProGan(_) => Arch::ProGan,
            AnyGenerator::StyleGan(_) => Arch::StyleGan,
        }
    }

    pub fn as_style(&self) -> Option<&StyleGanGenerator> {
        match self {
            AnyGenerator::StyleGan(g) => Some(g),
            AnyGenerator::ProGan(_) => None,
        }
    }

    /// The matrix whose top right-singular vectors are the semantic directions:
    /// the first dense layer (progressive) or the stacked style affines.
    pub fn direction_matrix(&self) -> Tensor {
        match self {
            AnyGenerator::ProGan(g) => g.first_linear_matrix(),
            AnyGenerator::StyleGan(g) => g.affine_matrix(),
        }
    }
}

impl Generator for AnyGenerator {
    fn config(&self) -> &NetConfig {
        match self {
            AnyGenerator::ProGan(g) => g.config(),
            AnyGenerator::StyleGan(g) => g.config(),
        }
    }

    fn params(&self) -> &ParamSet {
        match self {
            AnyGenerator::ProGan(g) => g.params(),
            AnyGenerator::StyleGan(g) => g.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            AnyGenerator::ProGan(g) => g.params_mut(),
            AnyGenerator::StyleGan(g) => g.params_mut(),
        }
    }

    fn generate(&self, p: &Bound, z: &Var, stage: StageState, noise: NoiseMode) -> Result<Var> {
        match self {
            AnyGenerator::ProGan(g) => g.generate(p, z, stage, noise),
            AnyGenerator::StyleGan(g) => g.generate(p, z, stage, noise),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub network: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: Arch,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_channels: Option<usize>,
    pub full_shape: [usize; 3],
    pub stage: usize,
    pub fade_alpha: f64,
    pub step: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_bar: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_bar_samples: Option<usize>,
    pub tensors: Vec<TensorRecord>,
}

/// Every network of one model together with its growth state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: NetConfig,
    pub stage: StageState,
    pub step: u64,
    pub seed: u64,
    pub generator: AnyGenerator,
    pub critic: PatchCritic,
    pub encoder: Option<Encoder>,
    pub latent_disc: Option<LatentDisc>,
    /// Mean mapped latent and the number of draws it was estimated from.
    pub w_bar: Option<(Vec<f32>, usize)>,
}

impl Checkpoint {
    /// Freshly initialized generator and critic at stage 1.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            cfg,
            stage: StageState::stable(1),
            step: 0,
            seed,
            generator: AnyGenerator::new(cfg, seed)?,
            critic: PatchCritic::new(cfg, seed)?,
            encoder: None,
            latent_disc: None,
            w_bar: None,
        })
    }

    fn networks(&self) -> Vec<(&'static str, &ParamSet)> {
        let mut nets = vec![("generator", self.generator.params()), ("critic", self.critic.params())];
        if let Some(e) = &self.encoder {
            nets.push(("encoder", e.params()));
        }
        if let Some(d) = &self.latent_disc {
            nets.push(("latent_disc", d.params()));
        }
        nets
    }

    pub fn manifest(&self) -> Manifest {
        let tensors = self
            .networks()
            .into_iter()
            .flat_map(|(net, ps)| {
                ps.entries().iter().map(move |e| TensorRecord {
                    network: net.to_string(),
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    file: format!("{net}.{}.bin", e.name),
                })
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            architecture: self.cfg.arch,
            channels: self.cfg.channels,
            critic_channels: (self.cfg.critic_channels != self.cfg.channels).then_some(self.cfg.critic_channels),
            full_shape: self.cfg.full_shape,
            stage: self.stage.stage,
            fade_alpha: self.stage.fade_alpha,
            step: self.step,
            seed: self.seed,
            w_bar: self.w_bar.as_ref().map(|w| w.0.clone()),
            w_bar_samples: self.w_bar.as_ref().map(|w| w.1),
            tensors,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        for ((_, ps), chunk) in self.networks().iter().zip(group_records(&manifest.tensors)) {
            for (entry, rec) in ps.entries().iter().zip(chunk) {
                let bytes: Vec<u8> = entry.value.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                let path = dir.join(&rec.file);
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let cfg = NetConfig::new(m.architecture, m.channels, m.full_shape)?
            .with_critic_channels(m.critic_channels.unwrap_or(m.channels))?;
        let mut ck = Self::new(cfg, m.seed)?;
        ck.stage = StageState::new(m.stage, m.fade_alpha)?;
        ck.step = m.step;
        ck.w_bar = match (m.w_bar, m.w_bar_samples) {
            (Some(w), Some(n)) => Some((w, n)),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("w_bar and its sample count must appear together".into())),
        };
        let has = |net: &str| m.tensors.iter().any(|r| r.network == net);
        if has("encoder") {
            ck.encoder = Some(Encoder::new(cfg, m.seed)?);
        }
        if has("latent_disc") {
            ck.latent_disc = Some(LatentDisc::new(m.seed));
        }
        for rec in &m.tensors {
            let ps = match rec.network.as_str() {
                "generator" => ck.generator.params_mut(),
                "critic" => ck.critic.params_mut(),
                "encoder" => ck.encoder.as_mut().expect("created above").params_mut(),
                "latent_disc" => ck.latent_disc.as_mut().expect("created above").params_mut(),
                other => return Err(Error::Checkpoint(format!("unknown network {other:?}"))),
            };
            let id = ps
                .find(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: unknown tensor {}", rec.network, rec.name)))?;
            if ps.get(id).shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}.{}: shape {:?} does not match architecture {:?}",
                    rec.network,
                    rec.name,
                    rec.shape,
                    ps.get(id).shape()
                )));
            }
            if rec.file.contains('/') || rec.file.contains('\\') || rec.file.contains("..") {
                return Err(Error::Checkpoint(format!("illegal blob name {:?}", rec.file)));
            }
            let path = dir.join(&rec.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let n = ps.get(id).len();
            if bytes.len() != 4 * n {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {} bytes, found {}",
                    rec.file,
                    4 * n,
                    bytes.len()
                )));
            }
            let data: Vec<Real> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                .collect();
            *ps.get_mut(id) = Tensor::new(&rec.shape, data);
        }
        let counts = ck.networks().iter().map(|(n, ps)| (n.to_string(), ps.len())).collect::<Vec<_>>();
        for (net, want) in counts {
            let got = m.tensors.iter().filter(|r| r.network == net).count();
            if got != want {
                return Err(Error::Checkpoint(format!("{net}: manifest lists {got} of {want} tensors")));
            }
        }
        Ok(ck)
    }
}

fn group_records(records: &[TensorRecord]) -> Vec<Vec<&TensorRecord>> {
    let mut groups: Vec<Vec<&TensorRecord>> = Vec::new();
    for r in records {
        match groups.last_mut() {
            Some(g) if g[0].network == r.network => g.push(r),
            _ => groups.push(vec![r]),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::ProGan, Arch::StyleGan] {
            let cfg = NetConfig::new(arch, 1, [32, 32, 32]).unwrap().with_critic_channels(2).unwrap();
            let mut ck = Checkpoint::new(cfg, 11).unwrap();
            ck.stage = StageState::new(3, 0.25).unwrap();
            ck.step = 42;
            ck.encoder = Some(Encoder::new(cfg, 99).unwrap());
            if arch == Arch::StyleGan {
                ck.latent_disc = Some(LatentDisc::new(98));
                ck.w_bar = Some((vec![0.5; 512], 10));
            }
            let path = dir.path().join(arch.to_string());
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back.cfg, cfg);
            assert_eq!(back.stage, ck.stage);
            assert_eq!(back.step, 42);
            assert_eq!(back.w_bar, ck.w_bar);
            // Blobs are f32, so compare at storage precision.
            let same = |a: &ParamSet, b: &ParamSet| {
                a.entries().iter().zip(b.entries()).all(|(x, y)| {
                    x.name == y.name
                        && x.value.data().iter().zip(y.value.data()).all(|(u, v)| *u as f32 == *v as f32)
                })
            };
            assert!(same(back.generator.params(), ck.generator.params()));
            assert!(same(back.critic.params(), ck.critic.params()));
            assert!(same(back.encoder.as_ref().unwrap().params(), ck.encoder.as_ref().unwrap().params()));
            assert_eq!(back.latent_disc.is_some(), arch == Arch::StyleGan);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        Checkpoint::new(cfg, 0).unwrap().save(dir.path()).unwrap();
        let blob = dir.path().join("critic.out.bias.bin");
        fs::write(&blob, [0u8; 3]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn manifest_names_layer_paths() {
        let cfg = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let m = Checkpoint::new(cfg, 0).unwrap().manifest();
        assert!(m.tensors.iter().any(|r| r.file == "generator.block3.conv1.weight.bin"));
        assert!(m.w_bar.is_none());
    }
}

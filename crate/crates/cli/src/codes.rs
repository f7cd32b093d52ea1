//! Latent code files: a JSON object holding the 512 values plus provenance
//! (a bare JSON array of 512 numbers is accepted on input).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use voxgan::nn::{Arch, LATENT_DIM};
use voxgan::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeSpace {
    /// Gaussian input latent of the progressive generator.
    Z,
    /// Mapped style latent of the style-based generator.
    W,
}

impl CodeSpace {
    pub fn of(arch: Arch) -> Self {
        match arch {
            Arch::ProGan => CodeSpace::Z,
            Arch::StyleGan => CodeSpace::W,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<CodeSpace>,
    pub code: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// What produced the code (`generate`, `invert`, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyCode {
    Bare(Vec<f32>),
    File(CodeFile),
}

impl CodeFile {
    pub fn new(arch: Arch, code: &[Real], checkpoint: &str, source: &str) -> Self {
        Self {
            arch: Some(arch),
            space: Some(CodeSpace::of(arch)),
            code: code.iter().map(|&v| v as f32).collect(),
            checkpoint: Some(checkpoint.to_string()),
            source: Some(source.to_string()),
            objective: None,
        }
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let file = match serde_json::from_str::<AnyCode>(text).context("code file is not valid JSON")? {
            AnyCode::Bare(code) => CodeFile {
                arch: None,
                space: None,
                code,
                checkpoint: None,
                source: None,
                objective: None,
            },
            AnyCode::File(f) => f,
        };
        if file.code.len() != LATENT_DIM {
            bail!("code has {} values, expected {LATENT_DIM}", file.code.len());
        }
        if file.code.iter().any(|v| !v.is_finite()) {
            bail!("code contains non-finite values");
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    /// Fail when the file declares an architecture other than `arch`.
    pub fn check_arch(&self, arch: Arch) -> anyhow::Result<()> {
        match self.arch {
            Some(a) if a != arch => bail!("code was produced for {a}, checkpoint is {arch}"),
            _ => Ok(()),
        }
    }

    pub fn values(&self) -> Vec<Real> {
        self.code.iter().map(|&v| v as Real).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_bare_arrays() {
        let code: Vec<Real> = (0..LATENT_DIM).map(|i| i as Real * 1e-3).collect();
        let f = CodeFile::new(Arch::StyleGan, &code, "ck", "generate");
        let back = CodeFile::parse(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.space, Some(CodeSpace::W));
        let bare = CodeFile::parse(&serde_json::to_string(&vec![0.5f32; LATENT_DIM]).unwrap()).unwrap();
        assert_eq!(bare.code.len(), LATENT_DIM);
        assert!(bare.check_arch(Arch::ProGan).is_ok());
        assert!(back.check_arch(Arch::ProGan).is_err());
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(CodeFile::parse("[1, 2, 3]").is_err());
        assert!(CodeFile::parse("{\"code\": []}").is_err());
        assert!(CodeFile::parse("not json").is_err());
    }
}

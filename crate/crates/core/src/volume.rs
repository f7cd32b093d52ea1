//! Volume container, the `.vgan` file format, corpus listing and the
//! procedural bone phantom used in place of patient scans.
//!
//! A `.vgan` file is a single JSON header line, a `\n`, then the voxel
//! buffer as little-endian `f32` in `(d1, d2, d3)` row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Voxel size after factor-2 subsampling of 60.7 µm scans.
pub const DEFAULT_SPACING_UM: f64 = 121.4;

pub const FILE_EXTENSION: &str = "vgan";

/// A 3D gray-scale voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
    pub spacing_um: f64,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::with_spacing(shape, data, DEFAULT_SPACING_UM)
    }

    pub fn with_spacing(shape: [usize; 3], data: Vec<f32>, spacing_um: f64) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invariant(format!("volume shape {shape:?} has a zero extent")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} voxels for shape {shape:?}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel value {v}")));
        }
        Ok(Self {
            shape,
            data,
            spacing_um,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
            spacing_um: DEFAULT_SPACING_UM,
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut v = Self::zeros(shape);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    v.data[(z * shape[1] + y) * shape[2] + x] = f(z, y, x);
                }
            }
        }
        v
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Voxelwise `self - other`.
    pub fn residual(&self, other: &Volume) -> Result<Volume> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            shape: self.shape,
            data,
            spacing_um: self.spacing_um,
        })
    }

    pub fn mse(&self, other: &Volume) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// As a `[1, 1, d1, d2, d3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.shape;
        Tensor::new(&[1, 1, d, h, w], self.data.iter().map(|&v| v as Real).collect())
    }

    /// Stack volumes of equal shape into a `[B, 1, d1, d2, d3]` batch.
    pub fn batch_tensor(volumes: &[&Volume]) -> Tensor {
        assert!(!volumes.is_empty(), "empty batch");
        let [d, h, w] = volumes[0].shape;
        let mut data = Vec::with_capacity(volumes.len() * d * h * w);
        for v in volumes {
            assert_eq!(v.shape, volumes[0].shape, "batch volumes differ in shape");
            data.extend(v.data.iter().map(|&x| x as Real));
        }
        Tensor::new(&[volumes.len(), 1, d, h, w], data)
    }

    /// Split a `[B, 1, d1, d2, d3]` tensor into volumes.
    pub fn from_batch_tensor(t: &Tensor, spacing_um: f64) -> Vec<Volume> {
        let s = t.shape();
        assert!(s.len() == 5 && s[1] == 1, "expected [B,1,D,H,W], got {s:?}");
        let shape = [s[2], s[3], s[4]];
        let per: usize = shape.iter().product();
        (0..s[0])
            .map(|b| Volume {
                shape,
                data: t.data()[b * per..(b + 1) * per].iter().map(|&v| v as f32).collect(),
                spacing_um,
            })
            .collect()
    }

    /// Axial slice `z` as a row-major `d2 x d3` image.
    pub fn axial_slice(&self, z: usize) -> Vec<f32> {
        let plane = self.shape[1] * self.shape[2];
        self.data[z * plane..(z + 1) * plane].to_vec()
    }
}

/// JSON header line of a `.vgan` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing_um: f64,
    pub dtype: String,
    pub provenance: String,
}

pub const DTYPE_TAG: &str = "f32le";

/// Serialize to the `.vgan` byte layout.
pub fn encode_volume(v: &Volume, provenance: &str) -> Vec<u8> {
    let header = VolumeHeader {
        shape: v.shape,
        spacing_um: v.spacing_um,
        dtype: DTYPE_TAG.to_string(),
        provenance: provenance.to_string(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(v.data.len() * 4);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parse the `.vgan` byte layout.
pub fn decode_volume(bytes: &[u8]) -> Result<(Volume, VolumeHeader)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let header: VolumeHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.dtype != DTYPE_TAG {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    if header.shape.iter().any(|&d| d == 0) {
        return Err(Error::Invariant(format!("header shape {:?} has a zero extent", header.shape)));
    }
    let payload = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, header shape {:?} needs {}",
            payload.len(),
            header.shape,
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let v = Volume::with_spacing(header.shape, data, header.spacing_um)?;
    Ok((v, header))
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_volume_with(v, path, "generated")
}

pub fn write_volume_with(v: &Volume, path: impl AsRef<Path>, provenance: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_volume(v, provenance))
        .map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_volume_with_header(path).map(|(v, _)| v)
}

pub fn read_volume_with_header(path: impl AsRef<Path>) -> Result<(Volume, VolumeHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// All `.vgan` files directly inside `dir`, sorted by name.
pub fn list_volumes(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == FILE_EXTENSION))
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<Volume>> {
    list_volumes(dir)?.iter().map(read_volume).collect()
}

// ---------------------------------------------------------------------------
// Phantoms

/// Parameters of a synthetic distal-radius-like volume: a bright annular
/// cortical shell around a speckled trabecular interior, over noisy background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Outer shell radius as a fraction of half the smaller cross-section extent.
    pub outer_radius_frac: f64,
    /// Shell thickness as a fraction of the outer radius.
    pub cortical_thickness_frac: f64,
    /// Fraction of the interior occupied by trabecular structure.
    pub trabecular_density: f64,
    /// Correlation length of the trabecular pattern in voxels.
    pub trabecular_scale_vox: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            outer_radius_frac: 0.7,
            cortical_thickness_frac: 0.15,
            trabecular_density: 0.4,
            trabecular_scale_vox: 3,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

pub const BACKGROUND_LEVEL: f32 = 0.08;
pub const TRABECULAR_LEVEL: f32 = 0.45;
pub const CORTICAL_LEVEL: f32 = 0.85;

/// Region of a phantom voxel, from its cross-sectional radius.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomRegion {
    Background,
    Shell,
    Interior,
}

impl PhantomSpec {
    fn validate(&self, shape: [usize; 3]) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if !(self.outer_radius_frac > 0.0 && self.outer_radius_frac < 1.0) {
            return bad(format!("outer_radius_frac {} not in (0,1)", self.outer_radius_frac));
        }
        if !(self.cortical_thickness_frac > 0.0 && self.cortical_thickness_frac < 0.5) {
            return bad(format!(
                "cortical_thickness_frac {} not in (0,0.5)",
                self.cortical_thickness_frac
            ));
        }
        if !(0.0..=1.0).contains(&self.trabecular_density) {
            return bad(format!("trabecular_density {} not in [0,1]", self.trabecular_density));
        }
        if self.trabecular_scale_vox == 0 {
            return bad("trabecular_scale_vox must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invariant(format!("shape {shape:?} has a zero extent")));
        }
        let half = shape[1].min(shape[2]) as f64 / 2.0;
        let outer = self.outer_radius(shape);
        // one voxel of background margin, and a shell at least one voxel thick
        if outer > half - 1.0 || outer * self.cortical_thickness_frac < 1.0 {
            return bad(format!(
                "shell of radius {outer:.2} does not fit a {}x{} cross-section",
                shape[1], shape[2]
            ));
        }
        Ok(())
    }

    fn outer_radius(&self, shape: [usize; 3]) -> f64 {
        self.outer_radius_frac * shape[1].min(shape[2]) as f64 / 2.0
    }

    /// Region of voxel `(y, x)` in every axial slice.
    pub fn region(&self, shape: [usize; 3], y: usize, x: usize) -> PhantomRegion {
        let outer = self.outer_radius(shape);
        let inner = outer * (1.0 - self.cortical_thickness_frac);
        let cy = (shape[1] as f64 - 1.0) / 2.0;
        let cx = (shape[2] as f64 - 1.0) / 2.0;
        let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        if r > outer {
            PhantomRegion::Background
        } else if r >= inner {
            PhantomRegion::Shell
        } else {
            PhantomRegion::Interior
        }
    }
}

/// Deterministic phantom for `spec` at `shape`.
pub fn make_phantom(spec: &PhantomSpec, shape: [usize; 3]) -> Result<Volume> {
    spec.validate(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = shape;

    // Smooth random field: Gaussian lattice samples, trilinearly interpolated.
    let s = spec.trabecular_scale_vox;
    let lattice = [d / s + 2, h / s + 2, w / s + 2];
    let coarse: Vec<f64> = (0..lattice.iter().product::<usize>())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let field_at = |z: usize, y: usize, x: usize| -> f64 {
        let p = [z as f64 / s as f64, y as f64 / s as f64, x as f64 / s as f64];
        let i = [p[0] as usize, p[1] as usize, p[2] as usize];
        let f = [p[0] - i[0] as f64, p[1] - i[1] as f64, p[2] - i[2] as f64];
        let mut acc = 0.0;
        for c in 0..8 {
            let o = [c >> 2 & 1, c >> 1 & 1, c & 1];
            let wgt: f64 = (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
            let idx = ((i[0] + o[0]) * lattice[1] + i[1] + o[1]) * lattice[2] + i[2] + o[2];
            acc += wgt * coarse[idx];
        }
        acc
    };

    let regions: Vec<PhantomRegion> = (0..h * w)
        .map(|i| spec.region(shape, i / w, i % w))
        .collect();

    let mut field = Vec::new();
    for z in 0..d {
        for (i, r) in regions.iter().enumerate() {
            if *r == PhantomRegion::Interior {
                field.push(field_at(z, i / w, i % w));
            }
        }
    }
    // Rank threshold: exactly the top `density` fraction of interior voxels,
    // so raising the density only ever adds trabecular voxels.
    let threshold = {
        let mut sorted = field.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite field"));
        let k = ((1.0 - spec.trabecular_density) * sorted.len() as f64).round() as usize;
        if k >= sorted.len() {
            f64::INFINITY
        } else {
            sorted[k]
        }
    };

    let mut data = vec![0f32; d * h * w];
    let mut fi = 0;
    for z in 0..d {
        for (i, r) in regions.iter().enumerate() {
            let base = match r {
                PhantomRegion::Background => BACKGROUND_LEVEL,
                PhantomRegion::Shell => CORTICAL_LEVEL,
                PhantomRegion::Interior => {
                    let v = field[fi];
                    fi += 1;
                    if v >= threshold {
                        TRABECULAR_LEVEL
                    } else {
                        BACKGROUND_LEVEL
                    }
                }
            };
            data[z * h * w + i] = base;
        }
    }
    for v in &mut data {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + (n * spec.noise_sigma) as f32).clamp(0.0, 1.0);
    }
    Volume::new(shape, data)
}

/// A corpus of `n` phantoms whose parameters are jittered around `base`.
/// Phantom `i` depends only on `(seed, i)`.
pub fn phantom_corpus(n: usize, base: &PhantomSpec, shape: [usize; 3], seed: u64) -> Result<Vec<Volume>> {
    (0..n)
        .map(|i| {
            let spec = jittered_spec(base, seed, i as u64);
            make_phantom(&spec, shape)
        })
        .collect()
}

pub fn jittered_spec(base: &PhantomSpec, seed: u64, index: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut j = |lo: f64, hi: f64| rng.random_range(lo..hi);
    PhantomSpec {
        outer_radius_frac: (base.outer_radius_frac * j(0.85, 1.1)).min(0.9),
        cortical_thickness_frac: (base.cortical_thickness_frac * j(0.7, 1.4)).clamp(0.05, 0.45),
        trabecular_density: (base.trabecular_density + j(-0.15, 0.15)).clamp(0.0, 1.0),
        trabecular_scale_vox: base.trabecular_scale_vox,
        noise_sigma: base.noise_sigma,
        seed: seed.wrapping_mul(31).wrapping_add(index),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_volume_payload_is_32_bytes() {
        let v = Volume::zeros([2, 2, 2]);
        let bytes = encode_volume(&v, "phantom");
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 32);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Volume::from_fn([4, 8, 8], |_, _, _| rng.random::<f32>() * 3.0 - 1.0);
        let path = dir.path().join("a.vgan");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn payload_mismatch_is_a_format_error() {
        let mut bytes = encode_volume(&Volume::zeros([2, 2, 2]), "phantom");
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_volume(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn zero_extent_header_is_an_invariant_error() {
        let mut bytes = br#"{"shape":[0,2,2],"spacing_um":1.0,"dtype":"f32le","provenance":"x"}"#.to_vec();
        bytes.push(b'\n');
        assert!(matches!(decode_volume(&bytes), Err(Error::Invariant(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(read_volume("/nonexistent/x.vgan"), Err(Error::Io { .. })));
    }

    #[test]
    fn phantom_is_deterministic() {
        let spec = PhantomSpec { seed: 42, ..Default::default() };
        let a = make_phantom(&spec, [8, 32, 32]).unwrap();
        let b = make_phantom(&spec, [8, 32, 32]).unwrap();
        assert_eq!(a, b);
        assert!(a.in_unit_range());
    }

    fn masked_mean(v: &Volume, mask: impl Fn(usize, usize) -> bool) -> f64 {
        let [d, h, w] = v.shape();
        let (mut s, mut n) = (0.0, 0usize);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if mask(y, x) {
                        s += v.get(z, y, x) as f64;
                        n += 1;
                    }
                }
            }
        }
        s / n as f64
    }

    #[test]
    fn shell_is_brighter_than_background() {
        let spec = PhantomSpec { seed: 3, ..Default::default() };
        let shape = [8, 32, 32];
        let v = make_phantom(&spec, shape).unwrap();
        let shell = masked_mean(&v, |y, x| spec.region(shape, y, x) == PhantomRegion::Shell);
        let bg = masked_mean(&v, |y, x| spec.region(shape, y, x) == PhantomRegion::Background);
        assert!(shell > bg + 0.5);
    }

    #[test]
    fn thicker_shell_raises_shell_mask_mean() {
        let shape = [8, 48, 48];
        let thick = PhantomSpec { cortical_thickness_frac: 0.3, seed: 7, ..Default::default() };
        let thin = PhantomSpec { cortical_thickness_frac: 0.1, ..thick.clone() };
        let mask = |y, x| thick.region(shape, y, x) == PhantomRegion::Shell;
        let a = masked_mean(&make_phantom(&thick, shape).unwrap(), mask);
        let b = masked_mean(&make_phantom(&thin, shape).unwrap(), mask);
        assert!(a > b, "{a} <= {b}");
    }

    #[test]
    fn empty_interior_matches_background_statistics() {
        let shape = [16, 48, 48];
        let spec = PhantomSpec { trabecular_density: 0.0, noise_sigma: 0.03, seed: 5, ..Default::default() };
        let v = make_phantom(&spec, shape).unwrap();
        let collect = |want: PhantomRegion| -> Vec<f64> {
            let mut out = Vec::new();
            for z in 0..shape[0] {
                for y in 0..shape[1] {
                    for x in 0..shape[2] {
                        if spec.region(shape, y, x) == want {
                            out.push(v.get(z, y, x) as f64);
                        }
                    }
                }
            }
            out
        };
        let (a, b) = (collect(PhantomRegion::Interior), collect(PhantomRegion::Background));
        let stats = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            let var = s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
            (m, var / s.len() as f64)
        };
        let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
        let t = (ma - mb) / (va + vb).sqrt();
        assert!(t.abs() < 4.0, "Welch t = {t}");
    }

    #[test]
    fn shell_that_does_not_fit_is_rejected() {
        let spec = PhantomSpec { outer_radius_frac: 0.99, ..Default::default() };
        assert!(matches!(make_phantom(&spec, [4, 16, 16]), Err(Error::Param(_))));
        let thin = PhantomSpec { cortical_thickness_frac: 0.01, ..Default::default() };
        assert!(make_phantom(&thin, [4, 16, 16]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn round_trip_arbitrary_finite(
                shape in (1usize..4, 1usize..5, 1usize..5),
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = [shape.0, shape.1, shape.2];
                let v = Volume::from_fn(s, |_, _, _| (rng.random::<f64>() * 2e6 - 1e6) as f32);
                let (back, header) = decode_volume(&encode_volume(&v, "real")).unwrap();
                prop_assert_eq!(back, v);
                prop_assert_eq!(header.provenance, "real");
            }

            #[test]
            fn interior_mean_monotone_in_density(seed in 0u64..1000, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                let shape = [4, 24, 24];
                let a = PhantomSpec { trabecular_density: lo, seed, ..Default::default() };
                let b = PhantomSpec { trabecular_density: hi, ..a.clone() };
                let interior = |y, x| a.region(shape, y, x) == PhantomRegion::Interior;
                let ma = masked_mean(&make_phantom(&a, shape).unwrap(), interior);
                let mb = masked_mean(&make_phantom(&b, shape).unwrap(), interior);
                prop_assert!(mb >= ma - 1e-9);
            }
        }
    }
}

//! Scan preprocessing: constant-size crop/pad with mirrored padding, cosine
//! coefficient clipping to synthesize noise for the padded margins, block
//! subsampling, overlapping slice stacks and rotation/zoom augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustdct::DctPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Spatial reduction factor of the generators (five factor-2 stages).
pub const GENERATOR_DIVISOR: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_shape: [usize; 3],
    pub dct_clip: f64,
    pub subsample_factor: usize,
    pub stack_depth: usize,
    pub n_stacks: usize,
    pub rot_range_deg: (f64, f64),
    pub zoom_range: (f64, f64),
    /// Augmented copies drawn per stack; 0 keeps the stacks unaugmented.
    pub aug_per_stack: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_shape: [168, 576, 448],
            dct_clip: 1000.0,
            subsample_factor: 2,
            stack_depth: 32,
            n_stacks: 4,
            rot_range_deg: (-10.0, 10.0),
            zoom_range: (1.0, 1.15),
            aug_per_stack: 1,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.subsample_factor;
        if f == 0 || self.n_stacks == 0 || self.stack_depth == 0 {
            return Err(Error::Param("subsample factor, stack count and depth must be >= 1".into()));
        }
        if self.target_shape.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Param(format!(
                "target shape {:?} not divisible by subsample factor {f}",
                self.target_shape
            )));
        }
        let sub = self.target_shape.map(|d| d / f);
        if self.stack_depth > sub[0] {
            return Err(Error::Param(format!(
                "stack depth {} exceeds subsampled depth {}",
                self.stack_depth, sub[0]
            )));
        }
        for d in [self.stack_depth, sub[1], sub[2]] {
            if d % GENERATOR_DIVISOR != 0 {
                return Err(Error::Param(format!(
                    "stack shape {:?} not divisible by {GENERATOR_DIVISOR}",
                    self.stack_shape()
                )));
            }
        }
        if !(self.dct_clip > 0.0) {
            return Err(Error::Param(format!("dct clip {} must be > 0", self.dct_clip)));
        }
        let (lo, hi) = self.zoom_range;
        if lo < 1.0 || hi < lo {
            return Err(Error::Param(format!("zoom range {:?} must satisfy 1 <= lo <= hi", self.zoom_range)));
        }
        if self.rot_range_deg.1 < self.rot_range_deg.0 {
            return Err(Error::Param("rotation range is reversed".into()));
        }
        Ok(())
    }

    /// Shape of every volume the pipeline emits.
    pub fn stack_shape(&self) -> [usize; 3] {
        let f = self.subsample_factor.max(1);
        [self.stack_depth, self.target_shape[1] / f, self.target_shape[2] / f]
    }
}

/// Reflect index `i` into `[0, n)` without repeating the edge sample,
/// tiling the reflection when `i` lies more than one extent outside.
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Per-axis source index for each target position, and whether it is padding.
fn axis_map(n: usize, t: usize) -> Vec<(usize, bool)> {
    if n >= t {
        let start = (n - t) / 2;
        (0..t).map(|i| (start + i, false)).collect()
    } else {
        let before = (t - n) / 2;
        (0..t)
            .map(|i| {
                let s = i as isize - before as isize;
                (mirror_index(s, n), s < 0 || s >= n as isize)
            })
            .collect()
    }
}

/// Center-crop or mirror-pad to `target`, also returning the padding mask.
pub fn pad_or_crop_with_mask(v: &Volume, target: [usize; 3]) -> Result<(Volume, Vec<bool>)> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::Param(format!("target shape {target:?} has a zero extent")));
    }
    let s = v.shape();
    let maps = [axis_map(s[0], target[0]), axis_map(s[1], target[1]), axis_map(s[2], target[2])];
    let n: usize = target.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for &(sz, pz) in &maps[0] {
        for &(sy, py) in &maps[1] {
            let row = v.index(sz, sy, 0);
            for &(sx, px) in &maps[2] {
                data.push(v.data()[row + sx]);
                mask.push(pz || py || px);
            }
        }
    }
    Ok((Volume::with_spacing(target, data, v.spacing_um)?, mask))
}

pub fn pad_or_crop(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    pad_or_crop_with_mask(v, target).map(|(v, _)| v)
}

/// Apply `f` to every line of `data` (shape `shape`) along `axis`.
fn for_each_line(data: &mut [f64], shape: [usize; 3], axis: usize, mut f: impl FnMut(&mut [f64])) {
    let n = shape[axis];
    let strides = [shape[1] * shape[2], shape[2], 1];
    let stride = strides[axis];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let mut buf = vec![0.0; n];
    for i in 0..shape[others[0]] {
        for j in 0..shape[others[1]] {
            let base = i * strides[others[0]] + j * strides[others[1]];
            for (k, b) in buf.iter_mut().enumerate() {
                *b = data[base + k * stride];
            }
            f(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                data[base + k * stride] = *b;
            }
        }
    }
}

/// Separable orthonormal type-II cosine transform of a 3D grid.
pub fn dct3d(data: &mut [f64], shape: [usize; 3]) {
    let mut planner = DctPlanner::new();
    for axis in 0..3 {
        let n = shape[axis];
        let dct = planner.plan_dct2(n);
        let (s0, s) = ((1.0 / n as f64).sqrt(), (2.0 / n as f64).sqrt());
        for_each_line(data, shape, axis, |line| {
            dct.process_dct2(line);
            line[0] *= s0;
            for v in &mut line[1..] {
                *v *= s;
            }
        });
    }
}

/// Inverse of [`dct3d`] (orthonormal type-III).
pub fn idct3d(data: &mut [f64], shape: [usize; 3]) {
    let mut planner = DctPlanner::new();
    for axis in 0..3 {
        let n = shape[axis];
        let dct = planner.plan_dct3(n);
        let (s0, s) = (2.0 * (1.0 / n as f64).sqrt(), (2.0 / n as f64).sqrt());
        for_each_line(data, shape, axis, |line| {
            line[0] *= s0;
            for v in &mut line[1..] {
                *v *= s;
            }
            dct.process_dct3(line);
        });
    }
}

/// `IDCT(clamp(DCT(v), -clip, clip))`: keeps the fine texture of the volume
/// while flattening its dominant structures.
pub fn dct_clip_noise(v: &Volume, clip: f64) -> Result<Volume> {
    if !(clip > 0.0) {
        return Err(Error::Param(format!("clip {clip} must be > 0")));
    }
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("dct_clip_noise input".into()));
    }
    let shape = v.shape();
    let mut buf: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    dct3d(&mut buf, shape);
    for c in &mut buf {
        *c = c.clamp(-clip, clip);
    }
    idct3d(&mut buf, shape);
    Volume::with_spacing(shape, buf.into_iter().map(|x| x as f32).collect(), v.spacing_um)
}

/// Voxelwise select: `noise` where `pad_mask` is set, `padded` elsewhere.
pub fn composite_padded_regions(padded: &Volume, noise: &Volume, pad_mask: &[bool]) -> Result<Volume> {
    if padded.shape() != noise.shape() || pad_mask.len() != padded.len() {
        return Err(Error::Shape(format!(
            "padded {:?}, noise {:?}, mask of {}",
            padded.shape(),
            noise.shape(),
            pad_mask.len()
        )));
    }
    let data = padded
        .data()
        .iter()
        .zip(noise.data())
        .zip(pad_mask)
        .map(|((&p, &n), &m)| if m { n } else { p })
        .collect();
    Volume::with_spacing(padded.shape(), data, padded.spacing_um)
}

/// Block-average downsampling by `factor` on every axis.
pub fn subsample(v: &Volume, factor: usize) -> Result<Volume> {
    let s = v.shape();
    if factor == 0 || s.iter().any(|d| d % factor != 0) {
        return Err(Error::Param(format!("shape {s:?} not divisible by factor {factor}")));
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let o = s.map(|d| d / factor);
    let mut acc = vec![0f64; o.iter().product()];
    for z in 0..s[0] {
        for y in 0..s[1] {
            let row = v.index(z, y, 0);
            let orow = ((z / factor) * o[1] + y / factor) * o[2];
            for x in 0..s[2] {
                acc[orow + x / factor] += v.data()[row + x] as f64;
            }
        }
    }
    let norm = (factor * factor * factor) as f64;
    Volume::with_spacing(
        o,
        acc.into_iter().map(|a| (a / norm) as f32).collect(),
        v.spacing_um * factor as f64,
    )
}

/// Start slices of `n_stacks` stacks evenly spread over `[0, depth - stack_depth]`.
pub fn stack_offsets(depth: usize, stack_depth: usize, n_stacks: usize) -> Result<Vec<usize>> {
    if stack_depth == 0 || stack_depth > depth {
        return Err(Error::Param(format!("stack depth {stack_depth} vs volume depth {depth}")));
    }
    if n_stacks == 0 {
        return Err(Error::Param("need at least one stack".into()));
    }
    let span = (depth - stack_depth) as f64;
    Ok((0..n_stacks)
        .map(|i| {
            if n_stacks == 1 {
                0
            } else {
                (span * i as f64 / (n_stacks - 1) as f64).round() as usize
            }
        })
        .collect())
}

pub fn split_stacks(v: &Volume, stack_depth: usize, n_stacks: usize) -> Result<Vec<Volume>> {
    let s = v.shape();
    let plane = s[1] * s[2];
    stack_offsets(s[0], stack_depth, n_stacks)?
        .into_iter()
        .map(|off| {
            let data = v.data()[off * plane..(off + stack_depth) * plane].to_vec();
            Volume::with_spacing([stack_depth, s[1], s[2]], data, v.spacing_um)
        })
        .collect()
}

/// Rotate every axial slice by `angle_deg` about its center, then zoom in
/// by `zoom` about the center. Both resamplings are fused into a single
/// bilinear lookup with mirrored out-of-bounds samples.
pub fn augment(v: &Volume, angle_deg: f64, zoom: f64) -> Result<Volume> {
    if !(zoom >= 1.0) || !zoom.is_finite() {
        return Err(Error::Param(format!("zoom {zoom} must be >= 1")));
    }
    if !angle_deg.is_finite() {
        return Err(Error::Param("angle must be finite".into()));
    }
    let [d, h, w] = v.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    // Source coordinates are identical for every slice.
    let taps: Vec<[(usize, f64); 4]> = (0..h * w)
        .map(|i| {
            let (py, px) = ((i / w) as f64, (i % w) as f64);
            let (dy, dx) = ((py - cy) / zoom, (px - cx) / zoom);
            // inverse rotation of the zoomed offset
            let sy = cy + cos * dy + sin * dx;
            let sx = cx - sin * dy + cos * dx;
            let (fy, fx) = (sy.floor(), sx.floor());
            let (ty, tx) = (sy - fy, sx - fx);
            let (y0, x0) = (fy as isize, fx as isize);
            let idx = |yy: isize, xx: isize| mirror_index(yy, h) * w + mirror_index(xx, w);
            [
                (idx(y0, x0), (1.0 - ty) * (1.0 - tx)),
                (idx(y0, x0 + 1), (1.0 - ty) * tx),
                (idx(y0 + 1, x0), ty * (1.0 - tx)),
                (idx(y0 + 1, x0 + 1), ty * tx),
            ]
        })
        .collect();
    let plane = h * w;
    let mut out = vec![0f32; d * plane];
    for z in 0..d {
        let src = &v.data()[z * plane..(z + 1) * plane];
        for (o, t) in out[z * plane..(z + 1) * plane].iter_mut().zip(&taps) {
            *o = t.iter().map(|&(i, wt)| wt * src[i] as f64).sum::<f64>() as f32;
        }
    }
    Volume::with_spacing(v.shape(), out, v.spacing_um)
}

/// Draw an augmentation from the stream keyed by `(seed, item)`, so the
/// result does not depend on processing order or worker count.
pub fn random_augment(v: &Volume, cfg: &PreprocessConfig, seed: u64, item: u64) -> Result<Volume> {
    let mut rng = item_rng(seed, item);
    let (alo, ahi) = cfg.rot_range_deg;
    let (zlo, zhi) = cfg.zoom_range;
    let angle = if ahi > alo { rng.random_range(alo..ahi) } else { alo };
    let zoom = if zhi > zlo { rng.random_range(zlo..zhi) } else { zlo };
    augment(v, angle, zoom)
}

pub fn item_rng(seed: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item);
    rng
}

/// Full pipeline for one scan. Returns `n_stacks * max(1, aug_per_stack)`
/// volumes of shape `cfg.stack_shape()`, clamped to `[0, 1]`.
pub fn preprocess_volume(v: &Volume, cfg: &PreprocessConfig, seed: u64, volume_id: u64) -> Result<Vec<Volume>> {
    cfg.validate()?;
    let (padded, mask) = pad_or_crop_with_mask(v, cfg.target_shape)?;
    let filled = if mask.iter().any(|&m| m) {
        let noise = dct_clip_noise(&padded, cfg.dct_clip)?;
        composite_padded_regions(&padded, &noise, &mask)?
    } else {
        padded
    };
    drop(mask);
    let sub = subsample(&filled, cfg.subsample_factor)?;
    drop(filled);
    let stacks = split_stacks(&sub, cfg.stack_depth, cfg.n_stacks)?;
    let mut out = Vec::new();
    for (si, stack) in stacks.into_iter().enumerate() {
        if cfg.aug_per_stack == 0 {
            out.push(stack.clamp_unit());
            continue;
        }
        for a in 0..cfg.aug_per_stack {
            let item = (volume_id << 20) | ((si as u64) << 10) | a as u64;
            out.push(random_augment(&stack, cfg, seed, item)?.clamp_unit());
        }
    }
    Ok(out)
}

/// Linear rescale of raw intensities to `[0, 1]` by corpus-wide min/max.
pub fn normalize_corpus(volumes: &mut [Volume]) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for v in volumes.iter() {
        for &x in v.data() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in volumes.iter_mut() {
        for x in v.data_mut() {
            *x = (*x - lo) / span;
        }
    }
}

//! Distribution metrics over feature clouds: Fréchet distance, k-NN
//! precision/recall and per-sample realism, plus the feature-extractor
//! interface and a small trainable 3D classifier used as the in-tree extractor.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::error::{Error, Result};
use crate::nn::{init_rng, Bound, Conv, Dense, ParamSet, GAIN_RELU, LRELU_SLOPE};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};
use crate::volume::{make_phantom, PhantomSpec, Volume};

/// Neighbour rank used by precision/recall and realism.
pub const DEFAULT_K: usize = 3;
pub const REALISM_CAP: f64 = 1e6;
const EIG_CLAMP_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// 2D network applied to two random axial slices per volume.
    Inc2d,
    /// 3D residual network on whole volumes.
    Res3d,
    /// 3D motion-grade classifier on whole volumes.
    Vgs3d,
    /// In-tree trainable stand-in.
    Toy3d,
}

impl FromStr for ExtractorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inc2d" => Ok(Self::Inc2d),
            "res3d" => Ok(Self::Res3d),
            "vgs3d" => Ok(Self::Vgs3d),
            "toy3d" => Ok(Self::Toy3d),
            _ => Err(Error::Param(format!("unknown extractor {s:?}"))),
        }
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Inc2d => "inc2d",
            Self::Res3d => "res3d",
            Self::Vgs3d => "vgs3d",
            Self::Toy3d => "toy3d",
        })
    }
}

/// Whole-volume feature extractor.
pub trait FeatureExtractor {
    fn kind(&self) -> ExtractorKind;
    fn dim(&self) -> usize;
    fn extract(&self, volumes: &[Volume]) -> Result<Vec<Vec<f64>>>;
}

/// 2D extractor fed with axial slices `[height, width]`.
pub trait SliceExtractor {
    fn dim(&self) -> usize;
    fn extract_slice(&self, slice: &[f32], height: usize, width: usize) -> Result<Vec<f64>>;
}

/// Row-major feature matrix from one extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub extractor: ExtractorKind,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub sample_ids: Vec<String>,
}

impl FeatureSet {
    pub fn new(extractor: ExtractorKind, rows: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::with_ids(extractor, rows, ids)
    }

    pub fn with_ids(extractor: ExtractorKind, rows: Vec<Vec<f64>>, sample_ids: Vec<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("feature rows have different lengths".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature entry".into()));
        }
        if sample_ids.len() != rows.len() {
            return Err(Error::Shape("one sample id per row required".into()));
        }
        Ok(Self {
            extractor,
            dim,
            rows,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.rows.len(), self.dim);
        let mut mean = DVector::zeros(d);
        for r in &self.rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &self.rows {
            let c = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(a, m)| a - m));
            cov.syger(1.0, &c, &c, 1.0);
        }
        cov.fill_upper_triangle_with_lower_triangle();
        (mean, cov / (n as f64 - 1.0))
    }
}

fn check_pair(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.extractor != b.extractor {
        return Err(Error::Param(format!(
            "feature sets come from different extractors ({} vs {})",
            a.extractor, b.extractor
        )));
    }
    if a.dim != b.dim {
        return Err(Error::Shape(format!("feature dims differ ({} vs {})", a.dim, b.dim)));
    }
    Ok(())
}

/// Eigenvalues/vectors of a symmetric matrix with tiny negative eigenvalues
/// clamped to zero.
fn psd_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    let top = e.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    for v in e.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIG_CLAMP_TOL * top.max(1.0) {
                log::warn!("clamping negative eigenvalue {v:e} in matrix square root");
            }
            *v = 0.0;
        }
    }
    e
}

/// Fréchet distance between Gaussian fits of two feature clouds.
pub fn fid(real: &FeatureSet, generated: &FeatureSet) -> Result<f64> {
    check_pair(real, generated)?;
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Param("FID needs at least two samples per set".into()));
    }
    let (mr, cr) = real.mean_cov();
    let (mg, cg) = generated.mean_cov();
    // Tr sqrt(Cr Cg) = Tr sqrt(S Cg S) with S = sqrt(Cr), which is symmetric PSD.
    let er = psd_eigen(cr.clone());
    let sqrt_r = &er.eigenvectors
        * DMatrix::from_diagonal(&er.eigenvalues.map(f64::sqrt))
        * er.eigenvectors.transpose();
    let inner = psd_eigen(&sqrt_r * &cg * &sqrt_r);
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = (mr - mg).norm_squared() + cr.trace() + cg.trace() - 2.0 * tr_sqrt;
    Ok(if d < 0.0 && d > -EIG_CLAMP_TOL { 0.0 } else { d })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-NN manifold of one feature cloud: each point with the distance to its
/// k-th nearest other point.
#[derive(Clone, Debug)]
pub struct KnnManifold<'a> {
    pub points: &'a [Vec<f64>],
    pub radii: Vec<f64>,
}

impl<'a> KnnManifold<'a> {
    pub fn new(set: &'a FeatureSet, k: usize) -> Result<Self> {
        let n = set.len();
        if k == 0 || k >= n {
            return Err(Error::Param(format!("k = {k} needs 1 <= k < N = {n}")));
        }
        let radii = (0..n)
            .map(|i| {
                let mut d: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| dist(&set.rows[i], &set.rows[j]))
                    .collect();
                d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
                d[k - 1]
            })
            .collect();
        Ok(Self {
            points: &set.rows,
            radii,
        })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.points.iter().zip(&self.radii).any(|(p, &r)| dist(p, x) <= r)
    }

    /// `max_r radius_r / |x - r|`, capped at `cap` when `x` coincides with a point.
    pub fn realism(&self, x: &[f64], cap: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.radii)
            .map(|(p, &r)| {
                let d = dist(p, x);
                if d == 0.0 {
                    if r > 0.0 {
                        cap
                    } else {
                        0.0
                    }
                } else {
                    (r / d).min(cap)
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Fraction of generated samples inside the real manifold and of real samples
/// inside the generated manifold.
pub fn precision_recall(real: &FeatureSet, generated: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    check_pair(real, generated)?;
    let mr = KnnManifold::new(real, k)?;
    let mg = KnnManifold::new(generated, k)?;
    let frac = |m: &KnnManifold, pts: &[Vec<f64>]| pts.iter().filter(|x| m.contains(x)).count() as f64 / pts.len() as f64;
    Ok((frac(&mr, &generated.rows), frac(&mg, &real.rows)))
}

/// Realism score of one generated feature vector against the real manifold.
pub fn realism(real: &FeatureSet, phi_g: &[f64], k: usize, cap: f64) -> Result<f64> {
    if phi_g.len() != real.dim {
        return Err(Error::Shape(format!("feature has dim {}, set has {}", phi_g.len(), real.dim)));
    }
    Ok(KnnManifold::new(real, k)?.realism(phi_g, cap))
}

/// Histogram of realism scores over `bins` equal-width bins on `[0, hi]`;
/// values above `hi` fall in the last bin.
pub fn histogram(values: &[f64], bins: usize, hi: f64) -> Vec<usize> {
    let mut h = vec![0; bins.max(1)];
    for &v in values {
        let i = ((v / hi) * bins as f64).floor();
        let i = if i.is_finite() { (i.max(0.0) as usize).min(h.len() - 1) } else { h.len() - 1 };
        h[i] += 1;
    }
    h
}

/// Area under the ROC curve for scores of positives vs negatives (ties count half).
pub fn auc(pos: &[Real], neg: &[Real]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Two distinct axial slice indices for volume `index`, reproducible from `seed`.
pub fn axial_slice_positions(depth: usize, seed: u64, index: u64) -> Result<[usize; 2]> {
    if depth < 2 {
        return Err(Error::Param(format!("two distinct axial slices need depth >= 2, got {depth}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let picks = sample(&mut rng, depth, 2);
    Ok([picks.index(0), picks.index(1)])
}

/// Features of two random axial slices per volume (two rows per volume).
pub fn extract_slice_features(ex: &dyn SliceExtractor, volumes: &[Volume], seed: u64) -> Result<FeatureSet> {
    let mut rows = Vec::with_capacity(2 * volumes.len());
    let mut ids = Vec::with_capacity(2 * volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let [d, h, w] = v.shape();
        for z in axial_slice_positions(d, seed, i as u64)? {
            rows.push(ex.extract_slice(&v.data()[z * h * w..(z + 1) * h * w], h, w)?);
            ids.push(format!("{i}:{z}"));
        }
    }
    FeatureSet::with_ids(ExtractorKind::Inc2d, rows, ids)
}

pub fn extract_features(ex: &dyn FeatureExtractor, volumes: &[Volume]) -> Result<FeatureSet> {
    FeatureSet::new(ex.kind(), ex.extract(volumes)?)
}

// ---------------------------------------------------------------------------
// Toy extractor

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub classes: usize,
    /// Width of the penultimate (feature) layer.
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            hidden: 32,
            epochs: 8,
            batch: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

const TOY_WIDTHS: [usize; 4] = [1, 4, 8, 16];

/// Small strided 3D classifier; its features are the penultimate activations.
#[derive(Clone, Debug)]
pub struct ToyExtractor {
    cfg: ToyConfig,
    params: ParamSet,
    convs: Vec<Conv>,
    hidden: Dense,
    head: Dense,
}

impl ToyExtractor {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.hidden == 0 || cfg.batch == 0 {
            return Err(Error::Param("toy extractor needs >= 2 classes, hidden >= 1, batch >= 1".into()));
        }
        let mut rng = init_rng(cfg.seed, 6);
        let mut ps = ParamSet::new();
        let convs = (0..3)
            .map(|i| {
                Conv::new(&mut ps, &format!("conv{i}"), TOY_WIDTHS[i], TOY_WIDTHS[i + 1], 3, 2, GAIN_RELU, &mut rng)
            })
            .collect();
        let hidden = Dense::new(&mut ps, "hidden", TOY_WIDTHS[3], cfg.hidden, GAIN_RELU, 0.0, 1.0, &mut rng);
        let head = Dense::new(&mut ps, "head", cfg.hidden, cfg.classes, 1.0, 0.0, 1.0, &mut rng);
        Ok(Self {
            cfg,
            params: ps,
            convs,
            hidden,
            head,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    fn features_var(&self, p: &Bound, x: &Var) -> Var {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(p, &h).leaky_relu(LRELU_SLOPE);
        }
        let (b, c) = (h.shape()[0], h.shape()[1]);
        let n: usize = h.shape()[2..].iter().product();
        let pooled = h.reshape(&[b, c, n]).sum_to(&[b, c, 1]).reshape(&[b, c]).scale(1.0 / n as Real);
        self.hidden.forward(p, &pooled).leaky_relu(LRELU_SLOPE)
    }

    fn logits(&self, p: &Bound, x: &Var) -> Var {
        self.head.forward(p, &self.features_var(p, x))
    }

    fn batch(volumes: &[&Volume]) -> Result<Var> {
        Ok(Var::constant(Volume::batch_tensor(volumes)))
    }

    pub fn predict(&self, volumes: &[Volume]) -> Result<Vec<usize>> {
        let _ng = no_grad();
        let p = self.params.bind(false);
        let mut out = Vec::with_capacity(volumes.len());
        for chunk in volumes.chunks(self.cfg.batch) {
            let refs: Vec<&Volume> = chunk.iter().collect();
            let l = self.logits(&p, &Self::batch(&refs)?);
            for row in l.value().data().chunks(self.cfg.classes) {
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(i, _)| i);
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, volumes: &[Volume], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(volumes)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }

    /// Mean cross-entropy of a labeled batch.
    fn loss(&self, p: &Bound, x: &Var, labels: &[usize]) -> Var {
        let l = self.logits(p, x);
        let (b, k) = (labels.len(), self.cfg.classes);
        let maxes = Tensor::from_fn(&[b, 1], |i| {
            l.value().data()[i * k..(i + 1) * k].iter().cloned().fold(Real::MIN, Real::max)
        });
        let shifted = l.sub(&Var::constant(maxes));
        let lse = shifted.exp().sum_to(&[b, 1]).ln();
        let onehot = Tensor::from_fn(&[b, k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 });
        let picked = shifted.mul(&Var::constant(onehot)).sum_to(&[b, 1]);
        lse.sub(&picked).mean()
    }
}

impl FeatureExtractor for ToyExtractor {
    fn kind(&self) -> ExtractorKind {
        ExtractorKind::Toy3d
    }

    fn dim(&self) -> usize {
        self.cfg.hidden
    }

    fn extract(&self, volumes: &[Volume]) -> Result<Vec<Vec<f64>>> {
        let _ng = no_grad();
        let p = self.params.bind(false);
        let mut rows = Vec::with_capacity(volumes.len());
        for chunk in volumes.chunks(self.cfg.batch) {
            let refs: Vec<&Volume> = chunk.iter().collect();
            let f = self.features_var(&p, &Self::batch(&refs)?);
            rows.extend(
                f.value()
                    .data()
                    .chunks(self.cfg.hidden)
                    .map(|r| r.iter().map(|&v| v as f64).collect::<Vec<f64>>()),
            );
        }
        Ok(rows)
    }
}

/// Train a toy classifier on labeled volumes; returns it with the final
/// training accuracy.
pub fn train_toy_extractor(volumes: &[Volume], labels: &[usize], cfg: ToyConfig) -> Result<(ToyExtractor, f64)> {
    if volumes.len() != labels.len() || volumes.is_empty() {
        return Err(Error::Param("need one label per volume and at least one volume".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::Param(format!("label {bad} outside 0..{}", cfg.classes)));
    }
    let mut counts = vec![0usize; cfg.classes];
    for &l in labels {
        counts[l] += 1;
    }
    let min_frac = *counts.iter().min().unwrap_or(&0) as f64 / labels.len() as f64;
    if min_frac < 0.5 / cfg.classes as f64 {
        log::warn!("imbalanced toy-extractor labels: class counts {counts:?}");
    }
    let mut model = ToyExtractor::new(cfg)?;
    let mut opt = Adam::new(&model.params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&Volume> = chunk.iter().map(|&i| &volumes[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let p = model.params.bind(true);
            let loss = model.loss(&p, &ToyExtractor::batch(&refs)?, &ys);
            if !loss.value().all_finite() {
                return Err(Error::NonFinite("toy extractor loss".into()));
            }
            let g = grad(&loss, p.vars());
            opt.step(&mut model.params, &g)?;
        }
    }
    let acc = model.accuracy(volumes, labels)?;
    Ok((model, acc))
}

/// Toy extractor trained to tell thin-shell from thick-shell phantoms of
/// `shape`; a deterministic stand-in feature space for desk-scale FID.
pub fn reference_toy_extractor(shape: [usize; 3], n: usize, seed: u64) -> Result<(ToyExtractor, f64)> {
    if n < 2 {
        return Err(Error::Param("reference extractor needs at least two phantoms".into()));
    }
    let mut vols = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let label = (i % 2) as usize;
        let spec = PhantomSpec {
            cortical_thickness_frac: if label == 0 { 0.12 } else { 0.35 },
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i),
            ..PhantomSpec::default()
        };
        vols.push(make_phantom(&spec, shape)?);
        labels.push(label);
    }
    train_toy_extractor(&vols, &labels, ToyConfig { seed, ..ToyConfig::default() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gaussian(n: usize, d: usize, mean: &[f64], sd: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, sd).unwrap();
        let rows = (0..n)
            .map(|_| (0..d).map(|j| mean[j] + nd.sample(&mut rng)).collect())
            .collect();
        FeatureSet::new(ExtractorKind::Toy3d, rows).unwrap()
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let a = gaussian(500, 6, &[0.0; 6], 1.0, 1);
        let b = gaussian(400, 6, &[0.3; 6], 1.5, 2);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_closed_forms() {
        let a = gaussian(100_000, 4, &[0.0; 4], 1.0, 3);
        let b = gaussian(100_000, 4, &[1.0, 0.0, 0.0, 0.0], 1.0, 4);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 0.05);
        let c = gaussian(100_000, 1, &[0.0], 1.0, 5);
        let d = gaussian(100_000, 1, &[0.0], 2.0, 6);
        assert!((fid(&c, &d).unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn fid_errors() {
        let a = gaussian(1, 2, &[0.0; 2], 1.0, 1);
        let b = gaussian(5, 2, &[0.0; 2], 1.0, 1);
        assert!(fid(&a, &b).is_err());
        let mut c = b.clone();
        c.extractor = ExtractorKind::Res3d;
        assert!(fid(&b, &c).is_err());
    }

    #[test]
    fn precision_recall_cases() {
        let a = gaussian(60, 3, &[0.0; 3], 1.0, 7);
        assert_eq!(precision_recall(&a, &a, 3).unwrap(), (1.0, 1.0));
        let far = gaussian(60, 3, &[1000.0; 3], 1.0, 8);
        assert_eq!(precision_recall(&a, &far, 3).unwrap(), (0.0, 0.0));
        let sub = FeatureSet::new(ExtractorKind::Toy3d, a.rows[..20].to_vec()).unwrap();
        assert_eq!(precision_recall(&a, &sub, 3).unwrap().0, 1.0);
        let b = gaussian(50, 3, &[0.5; 3], 1.0, 9);
        let (p, r) = precision_recall(&a, &b, 3).unwrap();
        let (p2, r2) = precision_recall(&b, &a, 3).unwrap();
        assert_eq!((p, r), (r2, p2));
        assert!(precision_recall(&a, &b, 60).is_err());
    }

    #[test]
    fn realism_cases() {
        let a = gaussian(50, 3, &[0.0; 3], 1.0, 10);
        assert_eq!(realism(&a, &a.rows[4], 3, REALISM_CAP).unwrap(), REALISM_CAP);
        let m = KnnManifold::new(&a, 3).unwrap();
        let inside: Vec<f64> = a.rows[0].iter().map(|v| v + 1e-3).collect();
        assert!(m.realism(&inside, REALISM_CAP) >= 1.0);
        let rmax = m.radii.iter().cloned().fold(0.0, f64::max);
        let far: Vec<f64> = vec![10.0 * rmax + 10.0; 3];
        assert!(m.realism(&far, REALISM_CAP) <= 0.1);
        // Scale covariance.
        let scaled = FeatureSet::new(
            ExtractorKind::Toy3d,
            a.rows.iter().map(|r| r.iter().map(|v| v * 3.0).collect()).collect(),
        )
        .unwrap();
        let x = vec![0.2, -0.1, 0.4];
        let x3: Vec<f64> = x.iter().map(|v| v * 3.0).collect();
        let r1 = realism(&a, &x, 3, REALISM_CAP).unwrap();
        let r3 = realism(&scaled, &x3, 3, REALISM_CAP).unwrap();
        assert!((r1 - r3).abs() < 1e-9 * r1.max(1.0));
    }

    #[test]
    fn slice_positions_distinct_and_reproducible() {
        for i in 0..50 {
            let [a, b] = axial_slice_positions(5, 1, i).unwrap();
            assert_ne!(a, b);
            assert!(a < 5 && b < 5);
            assert_eq!(axial_slice_positions(5, 1, i).unwrap(), [a, b]);
        }
        assert!(axial_slice_positions(1, 0, 0).is_err());
    }

    struct MeanSlice;
    impl SliceExtractor for MeanSlice {
        fn dim(&self) -> usize {
            1
        }
        fn extract_slice(&self, s: &[f32], _: usize, _: usize) -> Result<Vec<f64>> {
            Ok(vec![s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64])
        }
    }

    #[test]
    fn slice_path_takes_two_slices_per_volume() {
        let vols: Vec<Volume> = (0..3).map(|i| Volume::from_fn([4, 2, 2], |z, _, _| (z + i) as f32 * 0.1)).collect();
        let fs = extract_slice_features(&MeanSlice, &vols, 3).unwrap();
        assert_eq!(fs.len(), 6);
        assert_eq!(fs.extractor, ExtractorKind::Inc2d);
    }

    #[test]
    fn auc_basic() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc(&[1.0], &[1.0]), 0.5);
    }

    #[test]
    fn toy_extractor_separates_shell_thickness() {
        let shape = [16, 32, 32];
        let mut vols = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200u64 {
            let label = (i % 2) as usize;
            let spec = PhantomSpec {
                cortical_thickness_frac: if label == 0 { 0.12 } else { 0.35 },
                seed: i,
                ..PhantomSpec::default()
            };
            vols.push(make_phantom(&spec, shape).unwrap());
            labels.push(label);
        }
        let cfg = ToyConfig { epochs: 10, ..ToyConfig::default() };
        let (model, _) = train_toy_extractor(&vols[..150], &labels[..150], cfg).unwrap();
        let acc = model.accuracy(&vols[150..], &labels[150..]).unwrap();
        assert!(acc >= 0.9, "held-out accuracy {acc}");
        let f1 = model.extract(&vols[..4]).unwrap();
        let f2 = model.extract(&vols[..4]).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1[0].len(), cfg.hidden);
    }
}

//! Latent-space operations: truncated sampling, linear transitions between
//! codes, style mixing across the fifteen style inputs, closed-form semantic
//! directions and direction-based editing of inverted volumes.
//!
//! Codes live in the inversion space: `z` for the progressive generator and
//! the mapped `w` (broadcast to every style input) for the style-based one.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{Error, Result};
use crate::inversion::{self, InversionConfig, Refinement};
use crate::nn::{AnyGenerator, Arch, Bound, Checkpoint, Generator, NoiseMode, StageState, StyleGanGenerator, LATENT_DIM, NUM_STYLES};
use crate::tensor::{Real, Tensor};
use crate::volume::Volume;

/// Eigenvalue gap below which directions are treated as one eigenspace.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Truncation level of the progressive generator's default sampler.
pub const DEFAULT_TRUNCATION: f64 = 1.8;
/// ψ of the style-based generator's default sampler.
pub const DEFAULT_PSI: f64 = 0.8;
/// Editing strength used for attribute manipulation.
pub const DEFAULT_STRENGTH: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    /// Each coordinate of `z` drawn from `N(0,1)` conditioned on `|v| <= level`.
    ProganTruncnorm,
    /// `w̄ + ψ (Φ(z) - w̄)`.
    StyleganPsi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    pub mode: TruncationMode,
    /// Truncation bound, or ψ for the style mode.
    pub level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_bar: Option<Vec<f32>>,
}

impl TruncationConfig {
    pub fn truncnorm(level: f64) -> Self {
        Self { mode: TruncationMode::ProganTruncnorm, level, w_bar: None }
    }

    pub fn psi(psi: f64, w_bar: Vec<f32>) -> Self {
        Self { mode: TruncationMode::StyleganPsi, level: psi, w_bar: Some(w_bar) }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TruncationMode::ProganTruncnorm if !(self.level > 0.0 && self.level.is_finite()) => {
                Err(Error::Param(format!("truncation level must be positive, got {}", self.level)))
            }
            TruncationMode::StyleganPsi if !(0.0..=1.0).contains(&self.level) => {
                Err(Error::Param(format!("psi must lie in [0, 1], got {}", self.level)))
            }
            TruncationMode::StyleganPsi => match &self.w_bar {
                None => Err(Error::Param("psi truncation needs the mean mapped latent".into())),
                Some(w) if w.len() != LATENT_DIM => {
                    Err(Error::Shape(format!("mean latent has {} entries, expected {LATENT_DIM}", w.len())))
                }
                Some(_) => Ok(()),
            },
            TruncationMode::ProganTruncnorm => Ok(()),
        }
    }
}

/// `[n, dim]` standard-normal draws conditioned on `|v| <= level` (rejection).
pub fn truncnorm<R: Rng + ?Sized>(n: usize, dim: usize, level: f64, rng: &mut R) -> Result<Tensor> {
    if !(level > 0.0 && level.is_finite()) {
        return Err(Error::Param(format!("truncation level must be positive, got {level}")));
    }
    Ok(Tensor::from_fn(&[n, dim], |_| loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= level {
            break v as Real;
        }
    }))
}

/// `w̄ + ψ (w - w̄)` row-wise, exact at ψ ∈ {0, 1}.
pub fn apply_psi(w: &Tensor, w_bar: &[f32], psi: f64) -> Tensor {
    if psi == 1.0 {
        return w.clone();
    }
    let d = w_bar.len();
    Tensor::from_fn(w.shape(), |i| {
        let m = w_bar[i % d] as f64;
        if psi == 0.0 {
            m as Real
        } else {
            (m + psi * (w.data()[i] as f64 - m)) as Real
        }
    })
}

/// `count` codes in the inversion space of `gen`.
pub fn sample_truncated(cfg: &TruncationConfig, gen: &AnyGenerator, count: usize, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match (cfg.mode, gen) {
        (TruncationMode::ProganTruncnorm, AnyGenerator::ProGan(_)) => truncnorm(count, LATENT_DIM, cfg.level, &mut rng),
        (TruncationMode::StyleganPsi, AnyGenerator::StyleGan(g)) => {
            let z = Tensor::randn(&[count, LATENT_DIM], &mut rng);
            let _ng = no_grad();
            let w = g.map(&g_params(g), &Var::constant(z))?;
            Ok(apply_psi(w.value(), cfg.w_bar.as_deref().unwrap_or_default(), cfg.level))
        }
        (mode, g) => Err(Error::Param(format!("{mode:?} truncation does not apply to {} generators", g.arch()))),
    }
}

fn g_params(g: &StyleGanGenerator) -> Bound {
    g.params().bind(false)
}

/// Decode each code row separately (batch of one, so results do not depend
/// on how many codes are decoded together).
pub fn generate_each(gen: &AnyGenerator, codes: &Tensor, noise: NoiseMode) -> Result<Vec<Volume>> {
    if codes.ndim() != 2 || codes.shape()[1] != LATENT_DIM {
        return Err(Error::Shape(format!("codes must be [n, {LATENT_DIM}], got {:?}", codes.shape())));
    }
    (0..codes.shape()[0])
        .map(|i| Ok(inversion::reconstruct(gen, &codes.batch_item(i), noise)?.remove(0)))
        .collect()
}

fn check_code(code: &[Real], what: &str) -> Result<()> {
    if code.len() != LATENT_DIM {
        return Err(Error::Shape(format!("{what} has {} entries, expected {LATENT_DIM}", code.len())));
    }
    if code.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// `G(α c1 + (1 - α) c2)` for each α, in order.
pub fn transition(gen: &AnyGenerator, c1: &[Real], c2: &[Real], alphas: &[f64], noise: NoiseMode) -> Result<Vec<Volume>> {
    check_code(c1, "first code")?;
    check_code(c2, "second code")?;
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Param(format!("transition weight {a} outside [0, 1]")));
    }
    let codes: Vec<Real> = alphas
        .iter()
        .flat_map(|&a| {
            let (a, b) = (a as Real, (1.0 - a) as Real);
            c1.iter().zip(c2).map(move |(x, y)| a * x + b * y)
        })
        .collect();
    generate_each(gen, &Tensor::new(&[alphas.len(), LATENT_DIM], codes), noise)
}

/// Interior weights `i / (steps + 1)`, ascending; the endpoints are plain
/// generations of the two codes.
pub fn transition_alphas(steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Param("a transition needs at least one step".into()));
    }
    Ok((1..=steps).map(|i| i as f64 / (steps + 1) as f64).collect())
}

/// Source styles for the first `a` style inputs, target styles for the rest.
pub fn style_mix(g: &StyleGanGenerator, w_s: &[Real], w_t: &[Real], a: usize, noise: NoiseMode) -> Result<Volume> {
    if a > NUM_STYLES {
        return Err(Error::Param(format!("mixing boundary {a} outside 0..={NUM_STYLES}")));
    }
    check_code(w_s, "source style")?;
    check_code(w_t, "target style")?;
    let src = Var::constant(Tensor::new(&[1, LATENT_DIM], w_s.to_vec()));
    let tgt = Var::constant(Tensor::new(&[1, LATENT_DIM], w_t.to_vec()));
    let ws: Vec<Var> = (0..NUM_STYLES).map(|k| if k < a { src.clone() } else { tgt.clone() }).collect();
    let _ng = no_grad();
    let x = g.synthesize(&g_params(g), &ws, StageState::full(), noise)?;
    Ok(Volume::from_batch_tensor(x.value(), crate::volume::DEFAULT_SPACING_UM).remove(0))
}

// ---------------------------------------------------------------------------
// Semantic directions

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSource {
    ProganFirstLinear,
    StyleganConcat15,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    /// Unit-norm, mutually orthogonal directions.
    pub directions: Vec<Vec<f64>>,
    /// Matching eigenvalues of `AᵀA`, descending.
    pub eigenvalues: Vec<f64>,
    pub source: DirectionSource,
}

impl DirectionSet {
    pub fn direction(&self, index: usize) -> Result<&[f64]> {
        self.directions
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Param(format!("direction {index} of {}", self.directions.len())))
    }
}

fn sign_normalize(v: &mut DVector<f64>) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            *v *= -1.0;
        }
    }
}

/// Leading `k` eigenvectors of `AᵀA` for `a: [m, n]`. Inside near-degenerate
/// eigenspaces the basis is drawn by projecting seeded Gaussian vectors and
/// orthogonalizing them in order; each direction's first non-zero component
/// is positive.
pub fn find_directions(a: &Tensor, k: usize, seed: u64) -> Result<DirectionSet> {
    if a.ndim() != 2 {
        return Err(Error::Shape(format!("direction matrix must be 2-D, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if k == 0 || k > n {
        return Err(Error::Param(format!("k = {k} outside 1..={n}")));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("direction matrix".into()));
    }
    let am = DMatrix::from_row_iterator(m, n, a.data().iter().map(|&v| v as f64));
    let ata = am.transpose() * &am;
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vecs: Vec<DVector<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut start = 0;
    while start < k {
        let mut end = start + 1;
        while end < n && vals[end - 1] - vals[end] < TIE_TOLERANCE {
            end += 1;
        }
        let take = end.min(k) - start;
        if end - start == 1 {
            let mut v = vecs[start].clone();
            sign_normalize(&mut v);
            out.push(v);
        } else {
            let basis = &vecs[start..end];
            let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(take);
            while chosen.len() < take {
                let r = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mut v = basis.iter().fold(DVector::zeros(n), |acc, b| acc + b * b.dot(&r));
                for _ in 0..2 {
                    for c in &chosen {
                        v -= c * c.dot(&v);
                    }
                }
                let norm = v.norm();
                if norm > 1e-8 {
                    v /= norm;
                    sign_normalize(&mut v);
                    chosen.push(v);
                }
            }
            out.extend(chosen);
        }
        start = end;
    }
    out.truncate(k);
    // Rayleigh quotients equal the eigenvalues up to rounding; keep the ordering exact.
    let mut eigenvalues: Vec<f64> = out.iter().map(|v| (&am * v).norm_squared()).collect();
    for i in 1..eigenvalues.len() {
        if eigenvalues[i] > eigenvalues[i - 1] {
            eigenvalues[i] = eigenvalues[i - 1];
        }
    }
    Ok(DirectionSet {
        directions: out.into_iter().map(|v| v.iter().copied().collect()).collect(),
        eigenvalues,
        source: DirectionSource::External,
    })
}

/// Directions of a trained generator's first linear map (progressive) or
/// stacked style affines (style-based).
pub fn generator_directions(gen: &AnyGenerator, k: usize, seed: u64) -> Result<DirectionSet> {
    let mut set = find_directions(&gen.direction_matrix(), k, seed)?;
    set.source = match gen.arch() {
        Arch::ProGan => DirectionSource::ProganFirstLinear,
        Arch::StyleGan => DirectionSource::StyleganConcat15,
    };
    Ok(set)
}

// ---------------------------------------------------------------------------
// Editing

#[derive(Clone, Debug)]
pub struct Edit {
    pub code: Vec<Real>,
    pub edited_code: Vec<Real>,
    pub reconstruction: Volume,
    pub edited: Volume,
    /// `edited - reconstruction`.
    pub residual: Volume,
}

/// `G(code + strength n)` next to `G(code)`.
pub fn edit_code(gen: &AnyGenerator, code: &[Real], direction: &[f64], strength: f64, noise: NoiseMode) -> Result<Edit> {
    check_code(code, "code")?;
    if direction.len() != LATENT_DIM {
        return Err(Error::Shape(format!("direction has {} entries, expected {LATENT_DIM}", direction.len())));
    }
    if !strength.is_finite() {
        return Err(Error::Param("edit strength must be finite".into()));
    }
    let edited_code: Vec<Real> = code
        .iter()
        .zip(direction)
        .map(|(&c, &d)| c + (strength * d) as Real)
        .collect();
    let both = Tensor::new(&[2, LATENT_DIM], code.iter().chain(&edited_code).copied().collect());
    let mut vols = generate_each(gen, &both, noise)?;
    let edited = vols.pop().expect("two volumes");
    let reconstruction = vols.pop().expect("two volumes");
    Ok(Edit {
        code: code.to_vec(),
        edited_code,
        residual: edited.residual(&reconstruction)?,
        reconstruction,
        edited,
    })
}

/// Invert `x` with the checkpoint's encoder plus refinement, then edit.
pub fn edit(ck: &Checkpoint, x: &Volume, direction: &[f64], strength: f64, cfg: &InversionConfig) -> Result<(Edit, Refinement)> {
    let inv = inversion::invert(ck, &[x], cfg)?;
    let e = edit_code(&ck.generator, inv.codes.data(), direction, strength, cfg.noise())?;
    Ok((e, inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use proptest::prelude::*;

    fn rand_matrix(m: usize, n: usize, seed: u64) -> Tensor {
        Tensor::randn(&[m, n], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn power_iteration(a: &Tensor, iters: usize) -> DVector<f64> {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let am = DMatrix::from_row_iterator(m, n, a.data().iter().map(|&v| v as f64));
        let ata = am.transpose() * &am;
        let mut v = DVector::from_element(n, 1.0).normalize();
        for _ in 0..iters {
            v = (&ata * &v).normalize();
        }
        v
    }

    #[test]
    fn truncnorm_bounds_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = truncnorm(200, LATENT_DIM, 1.8, &mut rng).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.8));
        let mean = t.mean();
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(var < 1.0);
        assert!(truncnorm(1, 1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn psi_endpoints_are_exact() {
        let w = rand_matrix(3, LATENT_DIM, 1);
        let w_bar: Vec<f32> = (0..LATENT_DIM).map(|i| i as f32 * 0.01).collect();
        assert_eq!(apply_psi(&w, &w_bar, 1.0), w);
        let collapsed = apply_psi(&w, &w_bar, 0.0);
        for row in collapsed.data().chunks(LATENT_DIM) {
            assert!(row.iter().zip(&w_bar).all(|(a, b)| *a == *b as Real));
        }
    }

    #[test]
    fn sampler_rejects_mismatched_modes() {
        let cfg = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let g = AnyGenerator::new(cfg, 0).unwrap();
        assert!(sample_truncated(&TruncationConfig::psi(0.5, vec![0.0; LATENT_DIM]), &g, 1, 0).is_err());
        assert!(sample_truncated(&TruncationConfig { mode: TruncationMode::StyleganPsi, level: 0.5, w_bar: None }, &g, 1, 0).is_err());
        let z = sample_truncated(&TruncationConfig::truncnorm(1.0), &g, 4, 0).unwrap();
        assert_eq!(z.shape(), &[4, LATENT_DIM]);
    }

    #[test]
    fn diagonal_case() {
        let mut a = Tensor::zeros(&[2, LATENT_DIM]);
        a.data_mut()[0] = 3.0;
        a.data_mut()[LATENT_DIM + 1] = 1.0;
        let d = find_directions(&a, 2, 0).unwrap();
        assert!((d.directions[0][0] - 1.0).abs() < 1e-12);
        assert!((d.eigenvalues[0] - 9.0).abs() < 1e-9);
        assert!((d.eigenvalues[1] - 1.0).abs() < 1e-9);
    }

    fn assert_orthonormal(d: &DirectionSet) {
        for (i, u) in d.directions.iter().enumerate() {
            for (j, v) in d.directions.iter().enumerate() {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() <= 1e-6, "<n{i}, n{j}> = {dot}");
            }
            let first = u.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn identity_ties_are_deterministic() {
        let id = Tensor::from_fn(&[LATENT_DIM, LATENT_DIM], |i| if i / LATENT_DIM == i % LATENT_DIM { 1.0 } else { 0.0 });
        let a = find_directions(&id, 4, 7).unwrap();
        assert_orthonormal(&a);
        assert!(a.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-9));
        assert_eq!(a, find_directions(&id, 4, 7).unwrap());
        assert_ne!(a.directions, find_directions(&id, 4, 8).unwrap().directions);
    }

    #[test]
    fn matches_power_iteration() {
        let a = rand_matrix(64, LATENT_DIM, 3);
        let d = find_directions(&a, 4, 0).unwrap();
        let v = power_iteration(&a, 3000);
        let dot: f64 = d.directions[0].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-6, "{dot}");
        assert_orthonormal(&d);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn directions_are_orthonormal_and_sorted(seed in 0u64..1000, k in 1usize..6) {
            let a = rand_matrix(16, LATENT_DIM, seed);
            let d = find_directions(&a, k, seed).unwrap();
            prop_assert_eq!(d.directions.len(), k);
            for w in d.eigenvalues.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            for (u, lam) in d.directions.iter().zip(&d.eigenvalues) {
                let n: f64 = u.iter().map(|x| x * x).sum();
                prop_assert!((n - 1.0).abs() < 1e-6);
                prop_assert!(*lam >= 0.0);
            }
        }
    }

    fn style() -> (AnyGenerator, Vec<Real>, Vec<Real>) {
        let cfg = NetConfig::new(Arch::StyleGan, 1, [32, 32, 32]).unwrap();
        let g = AnyGenerator::new(cfg, 3).unwrap();
        let w = sample_truncated(&TruncationConfig::psi(1.0, vec![0.0; LATENT_DIM]), &g, 2, 1).unwrap();
        let (a, b) = w.data().split_at(LATENT_DIM);
        (g, a.to_vec(), b.to_vec())
    }

    #[test]
    fn style_mixing_endpoints() {
        let (g, ws, wt) = style();
        let sg = g.as_style().unwrap();
        let noise = NoiseMode::Seeded(5);
        let pure = |w: &[Real]| generate_each(&g, &Tensor::new(&[1, LATENT_DIM], w.to_vec()), noise).unwrap().remove(0);
        assert_eq!(style_mix(sg, &ws, &wt, 15, noise).unwrap(), pure(&ws));
        assert_eq!(style_mix(sg, &ws, &wt, 0, noise).unwrap(), pure(&wt));
        let same = style_mix(sg, &ws, &ws, 0, noise).unwrap();
        for a in [3, 7, 12] {
            assert_eq!(style_mix(sg, &ws, &ws, a, noise).unwrap(), same);
        }
        assert_ne!(style_mix(sg, &ws, &wt, 7, noise).unwrap(), pure(&ws));
        assert!(style_mix(sg, &ws, &wt, 16, noise).is_err());
    }

    #[test]
    fn transition_endpoints() {
        let (g, a, b) = style();
        let noise = NoiseMode::Seeded(1);
        let out = transition(&g, &a, &b, &[1.0, 0.5, 0.0], noise).unwrap();
        let ga = generate_each(&g, &Tensor::new(&[1, LATENT_DIM], a.clone()), noise).unwrap().remove(0);
        let gb = generate_each(&g, &Tensor::new(&[1, LATENT_DIM], b.clone()), noise).unwrap().remove(0);
        assert_eq!(out[0], ga);
        assert_eq!(out[2], gb);
        let degenerate = transition(&g, &a, &a, &[0.5], noise).unwrap();
        assert_eq!(degenerate[0], ga);
        assert!(transition(&g, &a, &b, &[1.5], noise).is_err());
        assert_eq!(transition_alphas(3).unwrap(), vec![0.25, 0.5, 0.75]);
        assert_eq!(transition_alphas(1).unwrap(), vec![0.5]);
    }

    #[test]
    fn edit_strength_zero_and_residual_sign() {
        let cfg = NetConfig::new(Arch::ProGan, 1, [32, 32, 32]).unwrap();
        let g = AnyGenerator::new(cfg, 2).unwrap();
        let z = sample_truncated(&TruncationConfig::truncnorm(1.8), &g, 1, 4).unwrap();
        let dirs = generator_directions(&g, 2, 0).unwrap();
        assert_eq!(dirs.source, DirectionSource::ProganFirstLinear);
        let n = dirs.direction(0).unwrap();
        let e0 = edit_code(&g, z.data(), n, 0.0, NoiseMode::Zero).unwrap();
        assert_eq!(e0.edited, e0.reconstruction);
        assert!(e0.residual.data().iter().all(|&v| v == 0.0));
        let e4 = edit_code(&g, z.data(), n, 4.0, NoiseMode::Zero).unwrap();
        assert!(e4.edited.mse(&e4.reconstruction) > 0.0);
        assert!(e4.edited.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let back = e4.reconstruction.residual(&e4.edited).unwrap();
        assert!(back.data().iter().zip(e4.residual.data()).all(|(a, b)| *a == -*b));
    }
}

//! Dense n-dimensional tensors and the raw numeric kernels used by the
//! autodiff layer: broadcasting arithmetic, reductions, 2D matrix products,
//! strided 3D convolution (with its two adjoints) and factor-2 resampling.
//!
//! Layout is always row-major and contiguous. Volumetric batches use
//! `[batch, channel, depth, height, width]`.

use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar type of every tensor. `f32` unless the `f64` feature is enabled.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = rng.sample(StandardNormal);
            v as Real
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of sample `index` along the leading axis, keeping a batch dim of 1.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let per = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(&shape, self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Concatenate along the leading axis.
    pub fn stack_batch(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let inner = &items[0].shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut batch = 0;
        for t in items {
            assert_eq!(&t.shape[1..], inner, "stack_batch inner shape mismatch");
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(inner);
        Tensor::new(&shape, data)
    }
}

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out_shape[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walk every index of `out_shape`, calling `f(out_linear, offset_a, offset_b)`.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut lin = 0;
    while lin < total {
        for j in 0..inner {
            f(lin + j, oa + j * ia, ob + j * ib);
        }
        lin += inner;
        // advance the odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor {
            shape: a.shape.clone(),
            data,
        };
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", a.shape, b.shape));
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = vec![0.0; numel(&out_shape)];
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
        data[o] = f(a.data[ia], b.data[ib]);
    });
    Tensor {
        shape: out_shape,
        data,
    }
}

/// Sum `t` down to `shape`, which must broadcast to `t.shape()`.
pub fn sum_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let out_of = broadcast_shape(shape, &t.shape);
    assert_eq!(
        out_of.as_deref(),
        Some(t.shape.as_slice()),
        "cannot sum {:?} to {shape:?}",
        t.shape
    );
    let st = broadcast_strides(&t.shape, &t.shape);
    let sr = broadcast_strides(shape, &t.shape);
    let mut acc = vec![0f64; numel(shape)];
    for_each_broadcast(&t.shape, &st, &sr, |_, it, ir| {
        acc[ir] += t.data[it] as f64;
    });
    Tensor::new(shape, acc.into_iter().map(|v| v as Real).collect())
}

pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let zero = Tensor::zeros(shape);
    broadcast_binary(&zero, t, |_, y| y)
}

// ---------------------------------------------------------------------------
// Matrix products

#[cfg(not(feature = "f64"))]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

#[cfg(feature = "f64")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// `c = op(a) @ op(b) + beta * c` on row-major buffers; `ta`/`tb` transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    ta: bool,
    b: &[Real],
    tb: bool,
    beta: Real,
    c: &mut [Real],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe buffers whose lengths were checked above.
    unsafe {
        gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.ndim(), 2);
    assert_eq!(b.ndim(), 2);
    let (m, k) = (a.shape[0], a.shape[1]);
    assert_eq!(b.shape[0], k, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let n = b.shape[1];
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out.data);
    out
}

pub fn transpose2d(a: &Tensor) -> Tensor {
    assert_eq!(a.ndim(), 2);
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

// ---------------------------------------------------------------------------
// 3D convolution

/// Static geometry of a cubic-kernel 3D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        [self.out_len(s[0]), self.out_len(s[1]), self.out_len(s[2])]
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

/// Unfold one sample `[ci, d, h, w]` into `[ci*k^3, od*oh*ow]`.
fn im2col(x: &[Real], ci: usize, sp: [usize; 3], g: ConvGeom, osp: [usize; 3], col: &mut [Real]) {
    let k = g.kernel;
    let [d, h, w] = sp;
    let [od, oh, ow] = osp;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..ci {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let mut o = 0;
                    for zd in 0..od {
                        let id = (zd * g.stride + kd) as isize - g.pad as isize;
                        for zh in 0..oh {
                            let ih = (zh * g.stride + kh) as isize - g.pad as isize;
                            let out = &mut dst[o..o + ow];
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                out.fill(0.0);
                            } else {
                                let base = (id as usize * h + ih as usize) * w;
                                let src = &xc[base..base + w];
                                for (zw, v) in out.iter_mut().enumerate() {
                                    let iw = (zw * g.stride + kw) as isize - g.pad as isize;
                                    *v = if iw < 0 || iw >= w as isize {
                                        0.0
                                    } else {
                                        src[iw as usize]
                                    };
                                }
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a sample.
fn col2im(col: &[Real], ci: usize, sp: [usize; 3], g: ConvGeom, osp: [usize; 3], x: &mut [Real]) {
    let k = g.kernel;
    let [d, h, w] = sp;
    let [od, oh, ow] = osp;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..ci {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &col[row * plane..(row + 1) * plane];
                    let mut o = 0;
                    for zd in 0..od {
                        let id = (zd * g.stride + kd) as isize - g.pad as isize;
                        for zh in 0..oh {
                            let ih = (zh * g.stride + kh) as isize - g.pad as isize;
                            if id >= 0 && id < d as isize && ih >= 0 && ih < h as isize {
                                let base = (id as usize * h + ih as usize) * w;
                                for zw in 0..ow {
                                    let iw = (zw * g.stride + kw) as isize - g.pad as isize;
                                    if iw >= 0 && iw < w as isize {
                                        xc[base + iw as usize] += src[o + zw];
                                    }
                                }
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_conv(x_shape: &[usize], w_shape: &[usize], g: ConvGeom) {
    assert_eq!(x_shape.len(), 5, "conv3d input must be [B,C,D,H,W], got {x_shape:?}");
    assert_eq!(w_shape.len(), 5, "conv3d weight must be [Co,Ci,k,k,k]");
    assert_eq!(x_shape[1], w_shape[1], "conv3d channel mismatch {x_shape:?} vs {w_shape:?}");
    assert!(w_shape[2] == g.kernel && w_shape[3] == g.kernel && w_shape[4] == g.kernel);
    for &n in &x_shape[2..] {
        assert!(n + 2 * g.pad >= g.kernel, "conv3d input {x_shape:?} smaller than kernel");
    }
}

/// `y[b, o] = sum_i w[o, i] * x[b, i]` (cross-correlation), zero padded.
pub fn conv3d(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    check_conv(&x.shape, &w.shape, g);
    let (b, ci, co) = (x.shape[0], x.shape[1], w.shape[0]);
    let sp = spatial(&x.shape);
    let osp = g.out_spatial(sp);
    let kk = ci * g.kernel.pow(3);
    let plane = osp.iter().product::<usize>();
    let in_per = ci * sp.iter().product::<usize>();
    let mut out = Tensor::zeros(&[b, co, osp[0], osp[1], osp[2]]);
    let mut col = vec![0.0; kk * plane];
    for n in 0..b {
        im2col(&x.data[n * in_per..(n + 1) * in_per], ci, sp, g, osp, &mut col);
        let dst = &mut out.data[n * co * plane..(n + 1) * co * plane];
        gemm(co, kk, plane, &w.data, false, &col, false, 0.0, dst);
    }
    out
}

/// Gradient of `conv3d` with respect to its input (a transposed convolution).
pub fn conv3d_input_grad(gy: &Tensor, w: &Tensor, g: ConvGeom, in_shape: &[usize]) -> Tensor {
    check_conv(in_shape, &w.shape, g);
    let (b, ci, co) = (in_shape[0], in_shape[1], w.shape[0]);
    let sp = spatial(in_shape);
    let osp = g.out_spatial(sp);
    assert_eq!(gy.shape, [b, co, osp[0], osp[1], osp[2]], "conv3d_input_grad shape");
    let kk = ci * g.kernel.pow(3);
    let plane = osp.iter().product::<usize>();
    let in_per = ci * sp.iter().product::<usize>();
    let mut out = Tensor::zeros(in_shape);
    let mut col = vec![0.0; kk * plane];
    for n in 0..b {
        let src = &gy.data[n * co * plane..(n + 1) * co * plane];
        gemm(kk, co, plane, &w.data, true, src, false, 0.0, &mut col);
        col2im(&col, ci, sp, g, osp, &mut out.data[n * in_per..(n + 1) * in_per]);
    }
    out
}

/// Gradient of `conv3d` with respect to its weight.
pub fn conv3d_weight_grad(x: &Tensor, gy: &Tensor, g: ConvGeom, w_shape: &[usize]) -> Tensor {
    check_conv(&x.shape, w_shape, g);
    let (b, ci, co) = (x.shape[0], x.shape[1], w_shape[0]);
    let sp = spatial(&x.shape);
    let osp = g.out_spatial(sp);
    assert_eq!(gy.shape, [b, co, osp[0], osp[1], osp[2]], "conv3d_weight_grad shape");
    let kk = ci * g.kernel.pow(3);
    let plane = osp.iter().product::<usize>();
    let in_per = ci * sp.iter().product::<usize>();
    let mut out = Tensor::zeros(w_shape);
    let mut col = vec![0.0; kk * plane];
    for n in 0..b {
        im2col(&x.data[n * in_per..(n + 1) * in_per], ci, sp, g, osp, &mut col);
        let src = &gy.data[n * co * plane..(n + 1) * co * plane];
        gemm(co, plane, kk, src, false, &col, true, 1.0, &mut out.data);
    }
    out
}

// ---------------------------------------------------------------------------
// Factor-2 resampling over the three trailing axes

/// Nearest-neighbour upsampling by 2 along depth, height and width.
pub fn upsample2(x: &Tensor) -> Tensor {
    assert_eq!(x.ndim(), 5);
    let [b, c, d, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4]];
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; b * c * d2 * h2 * w2];
    for bc in 0..b * c {
        let src = &x.data[bc * d * h * w..(bc + 1) * d * h * w];
        let dst = &mut out[bc * d2 * h2 * w2..(bc + 1) * d2 * h2 * w2];
        for z in 0..d2 {
            for y in 0..h2 {
                let srow = &src[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                let drow = &mut dst[(z * h2 + y) * w2..(z * h2 + y + 1) * w2];
                for (i, v) in drow.iter_mut().enumerate() {
                    *v = srow[i / 2];
                }
            }
        }
    }
    Tensor::new(&[b, c, d2, h2, w2], out)
}

/// Sum over non-overlapping 2x2x2 blocks; the adjoint of [`upsample2`].
pub fn sumpool2(x: &Tensor) -> Tensor {
    assert_eq!(x.ndim(), 5);
    let [b, c, d, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4]];
    assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "sumpool2 needs even dims, got {:?}", x.shape);
    let (d2, h2, w2) = (d / 2, h / 2, w / 2);
    let mut out = vec![0.0; b * c * d2 * h2 * w2];
    for bc in 0..b * c {
        let src = &x.data[bc * d * h * w..(bc + 1) * d * h * w];
        let dst = &mut out[bc * d2 * h2 * w2..(bc + 1) * d2 * h2 * w2];
        for z in 0..d {
            for y in 0..h {
                let srow = &src[(z * h + y) * w..(z * h + y + 1) * w];
                let drow = &mut dst[((z / 2) * h2 + y / 2) * w2..((z / 2) * h2 + y / 2 + 1) * w2];
                for (i, v) in srow.iter().enumerate() {
                    drow[i / 2] += *v;
                }
            }
        }
    }
    Tensor::new(&[b, c, d2, h2, w2], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution used as the oracle for the im2col path.
    fn conv_naive(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let s = x.shape();
        let (b, ci, co) = (s[0], s[1], w.shape()[0]);
        let sp = [s[2], s[3], s[4]];
        let o = g.out_spatial(sp);
        let k = g.kernel;
        let mut out = Tensor::zeros(&[b, co, o[0], o[1], o[2]]);
        for n in 0..b {
            for oc in 0..co {
                for z in 0..o[0] {
                    for y in 0..o[1] {
                        for xx in 0..o[2] {
                            let mut acc = 0.0f64;
                            for ic in 0..ci {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let id = (z * g.stride + kd) as isize - g.pad as isize;
                                            let ih = (y * g.stride + kh) as isize - g.pad as isize;
                                            let iw = (xx * g.stride + kw) as isize - g.pad as isize;
                                            if id < 0 || ih < 0 || iw < 0 {
                                                continue;
                                            }
                                            let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                            if id >= sp[0] || ih >= sp[1] || iw >= sp[2] {
                                                continue;
                                            }
                                            let xv = x.data()[(((n * ci + ic) * sp[0] + id) * sp[1] + ih) * sp[2] + iw];
                                            let wv = w.data()[(((oc * ci + ic) * k + kd) * k + kh) * k + kw];
                                            acc += xv as f64 * wv as f64;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((n * co + oc) * o[0] + z) * o[1] + y) * o[2] + xx] = acc as Real;
                        }
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn conv_matches_naive_and_adjoints_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let g = ConvGeom { kernel: 3, stride, pad };
            let x = Tensor::randn(&[2, 3, 4, 6, 5], &mut rng);
            let w = Tensor::randn(&[2, 3, 3, 3, 3], &mut rng);
            let y = conv3d(&x, &w, g);
            assert!(y.max_abs_diff(&conv_naive(&x, &w, g)) < 1e-4);

            // <conv(x,w), gy> == <x, input_grad(gy)> == <w, weight_grad(x, gy)>
            let gy = Tensor::randn(y.shape(), &mut rng);
            let lhs = dot(&y, &gy);
            let gx = conv3d_input_grad(&gy, &w, g, x.shape());
            let gw = conv3d_weight_grad(&x, &gy, g, w.shape());
            assert!((lhs - dot(&x, &gx)).abs() < 1e-3 * (1.0 + lhs.abs()));
            assert!((lhs - dot(&w, &gw)).abs() < 1e-3 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn upsample_and_sumpool_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 2, 2, 3, 4], &mut rng);
        let y = Tensor::randn(&[2, 2, 4, 6, 8], &mut rng);
        let lhs = dot(&upsample2(&x), &y);
        let rhs = dot(&x, &sumpool2(&y));
        assert!((lhs - rhs).abs() < 1e-3);
        assert_eq!(upsample2(&x).data()[1], x.data()[0]);
    }

    #[test]
    fn broadcasting_and_sum_to() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(&[3], vec![10., 20., 30.]);
        let c = broadcast_binary(&a, &b, |x, y| x + y);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let col = Tensor::new(&[2, 1], vec![1., 2.]);
        let d = broadcast_binary(&a, &col, |x, y| x * y);
        assert_eq!(d.data(), &[1., 2., 3., 8., 10., 12.]);
        assert_eq!(sum_to(&a, &[1, 3]).data(), &[5., 7., 9.]);
        assert_eq!(sum_to(&a, &[2, 1]).data(), &[6., 15.]);
        assert_eq!(sum_to(&a, &[]).data(), &[21.]);
        assert_eq!(broadcast_to(&b, &[2, 3]).data(), &[10., 20., 30., 10., 20., 30.]);
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(&[3, 1], vec![1., 0., -1.]);
        assert_eq!(matmul(&a, &b).data(), &[-2., -2.]);
        assert_eq!(transpose2d(&a).data(), &[1., 4., 2., 5., 3., 6.]);
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, a.data(), false, a.data(), true, 0.0, &mut c);
        assert_eq!(c, vec![14., 32., 32., 77.]);
    }
}

//! Reverse-mode automatic differentiation with support for higher-order
//! gradients.
//!
//! Every backward rule is written in terms of [`Var`] operations, so when
//! [`grad`] runs with `create_graph = true` the gradients are themselves
//! differentiable. This is what the two-sided gradient penalty needs: the
//! critic loss contains `||d f / d x||`, and its parameter gradient
//! differentiates through that backward pass.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{self, ConvGeom, Real, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

trait Backward {
    /// Gradients for each parent given the output gradient `g`. Entries for
    /// parents whose `needed` flag is false may be `None`.
    fn backward(&self, g: &Var, parents: &[Var], out: &Var, needed: &[bool]) -> Vec<Option<Var>>;
}

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

/// A tensor-valued node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents: Vec::new(),
            op: None,
        }))
    }

    /// A value that gradients never flow into.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    fn from_op(value: Tensor, parents: Vec<Var>, op: impl Backward + 'static) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if !track {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad: true,
            parents,
            op: Some(Box::new(op)),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element variable as `f64`.
    pub fn item(&self) -> f64 {
        self.0.value.item() as f64
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    // -- elementwise arithmetic (broadcasting) --------------------------------

    pub fn add(&self, other: &Var) -> Var {
        let v = tensor::broadcast_binary(self.value(), other.value(), |a, b| a + b);
        Var::from_op(v, vec![self.clone(), other.clone()], AddOp)
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = tensor::broadcast_binary(self.value(), other.value(), |a, b| a - b);
        Var::from_op(v, vec![self.clone(), other.clone()], SubOp)
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = tensor::broadcast_binary(self.value(), other.value(), |a, b| a * b);
        Var::from_op(v, vec![self.clone(), other.clone()], MulOp)
    }

    pub fn scale(&self, c: Real) -> Var {
        let v = self.value().map(|a| a * c);
        Var::from_op(v, vec![self.clone()], ScaleOp(c))
    }

    pub fn add_scalar(&self, c: Real) -> Var {
        let v = self.value().map(|a| a + c);
        Var::from_op(v, vec![self.clone()], AddScalarOp)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn powf(&self, p: Real) -> Var {
        let v = self.value().map(|a| a.powf(p));
        Var::from_op(v, vec![self.clone()], PowOp(p))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Var {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Var {
        let v = self.value().map(|a| a.exp());
        Var::from_op(v, vec![self.clone()], ExpOp)
    }

    pub fn ln(&self) -> Var {
        let v = self.value().map(|a| a.ln());
        Var::from_op(v, vec![self.clone()], LnOp)
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(sigmoid);
        Var::from_op(v, vec![self.clone()], SigmoidOp)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Var {
        let v = self
            .value()
            .map(|a| if a > 0.0 { a + (-a).exp().ln_1p() } else { a.exp().ln_1p() });
        Var::from_op(v, vec![self.clone()], SoftplusOp)
    }

    pub fn leaky_relu(&self, slope: Real) -> Var {
        let v = self.value().map(|a| if a >= 0.0 { a } else { a * slope });
        Var::from_op(v, vec![self.clone()], LeakyReluOp(slope))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self) -> Var {
        self.mul(&self.sigmoid())
    }

    // -- shape and reductions --------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value().clone().reshape(shape);
        let from = self.shape().to_vec();
        Var::from_op(v, vec![self.clone()], ReshapeOp(from))
    }

    /// Sum down to `shape` (which must broadcast back to `self.shape()`).
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        let v = tensor::sum_to(self.value(), shape);
        let from = self.shape().to_vec();
        Var::from_op(v, vec![self.clone()], SumToOp(from))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let v = tensor::broadcast_to(self.value(), shape);
        let from = self.shape().to_vec();
        Var::from_op(v, vec![self.clone()], BroadcastToOp(from))
    }

    /// Sum of all entries, as a rank-0 variable.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as Real;
        self.sum().scale(1.0 / n)
    }

    /// Per-sample sum over every axis but the first: `[B, ...] -> [B]`.
    pub fn sum_per_sample(&self) -> Var {
        let b = self.shape()[0];
        let mut keep = vec![1; self.shape().len()];
        keep[0] = b;
        self.sum_to(&keep).reshape(&[b])
    }

    /// Per-sample mean over every axis but the first: `[B, ...] -> [B]`.
    pub fn mean_per_sample(&self) -> Var {
        let per = tensor::numel(&self.shape()[1..]) as Real;
        self.sum_per_sample().scale(1.0 / per)
    }

    /// Mean over the channel axis of `[B, C, ...]`, keeping it as size 1.
    pub fn mean_channels(&self) -> Var {
        let mut shape = self.shape().to_vec();
        let c = shape[1] as Real;
        shape[1] = 1;
        self.sum_to(&shape).scale(1.0 / c)
    }

    // -- linear algebra ----------------------------------------------------------

    pub fn matmul(&self, other: &Var) -> Var {
        let v = tensor::matmul(self.value(), other.value());
        Var::from_op(v, vec![self.clone(), other.clone()], MatMulOp)
    }

    pub fn transpose(&self) -> Var {
        let v = tensor::transpose2d(self.value());
        Var::from_op(v, vec![self.clone()], TransposeOp)
    }

    pub fn conv3d(&self, weight: &Var, geom: ConvGeom) -> Var {
        let v = tensor::conv3d(self.value(), weight.value(), geom);
        Var::from_op(v, vec![self.clone(), weight.clone()], ConvOp(geom))
    }

    fn conv3d_input_grad(gy: &Var, weight: &Var, geom: ConvGeom, in_shape: &[usize]) -> Var {
        let v = tensor::conv3d_input_grad(gy.value(), weight.value(), geom, in_shape);
        Var::from_op(v, vec![gy.clone(), weight.clone()], ConvInputGradOp(geom))
    }

    fn conv3d_weight_grad(x: &Var, gy: &Var, geom: ConvGeom, w_shape: &[usize]) -> Var {
        let v = tensor::conv3d_weight_grad(x.value(), gy.value(), geom, w_shape);
        Var::from_op(v, vec![x.clone(), gy.clone()], ConvWeightGradOp(geom))
    }

    pub fn upsample2(&self) -> Var {
        let v = tensor::upsample2(self.value());
        Var::from_op(v, vec![self.clone()], UpsampleOp)
    }

    pub fn sumpool2(&self) -> Var {
        let v = tensor::sumpool2(self.value());
        Var::from_op(v, vec![self.clone()], SumPoolOp)
    }

    /// Mean over non-overlapping 2x2x2 blocks.
    pub fn avgpool2(&self) -> Var {
        self.sumpool2().scale(0.125)
    }
}

pub fn sigmoid(a: Real) -> Real {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Backward rules

struct AddOp;
impl Backward for AddOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, need: &[bool]) -> Vec<Option<Var>> {
        vec![
            need[0].then(|| g.sum_to(p[0].shape())),
            need[1].then(|| g.sum_to(p[1].shape())),
        ]
    }
}

struct SubOp;
impl Backward for SubOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, need: &[bool]) -> Vec<Option<Var>> {
        vec![
            need[0].then(|| g.sum_to(p[0].shape())),
            need[1].then(|| g.neg().sum_to(p[1].shape())),
        ]
    }
}

struct MulOp;
impl Backward for MulOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, need: &[bool]) -> Vec<Option<Var>> {
        vec![
            need[0].then(|| g.mul(&p[1]).sum_to(p[0].shape())),
            need[1].then(|| g.mul(&p[0]).sum_to(p[1].shape())),
        ]
    }
}

struct ScaleOp(Real);
impl Backward for ScaleOp {
    fn backward(&self, g: &Var, _: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.scale(self.0))]
    }
}

struct AddScalarOp;
impl Backward for AddScalarOp {
    fn backward(&self, g: &Var, _: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

struct PowOp(Real);
impl Backward for PowOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let p_ = self.0;
        vec![Some(g.mul(&p[0].powf(p_ - 1.0)).scale(p_))]
    }
}

struct ExpOp;
impl Backward for ExpOp {
    fn backward(&self, g: &Var, _: &[Var], out: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.mul(out))]
    }
}

struct LnOp;
impl Backward for LnOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.mul(&p[0].powf(-1.0)))]
    }
}

struct SigmoidOp;
impl Backward for SigmoidOp {
    fn backward(&self, g: &Var, _: &[Var], out: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let one_minus = out.neg().add_scalar(1.0);
        vec![Some(g.mul(out).mul(&one_minus))]
    }
}

struct SoftplusOp;
impl Backward for SoftplusOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.mul(&p[0].sigmoid()))]
    }
}

/// The slope mask is piecewise constant, so its own derivative is zero and
/// treating it as a constant is exact at every order.
struct LeakyReluOp(Real);
impl Backward for LeakyReluOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let slope = self.0;
        let mask = Var::constant(p[0].value().map(|a| if a >= 0.0 { 1.0 } else { slope }));
        vec![Some(g.mul(&mask))]
    }
}

struct ReshapeOp(Vec<usize>);
impl Backward for ReshapeOp {
    fn backward(&self, g: &Var, _: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.reshape(&self.0))]
    }
}

struct SumToOp(Vec<usize>);
impl Backward for SumToOp {
    fn backward(&self, g: &Var, _: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_to(&self.0))]
    }
}

struct BroadcastToOp(Vec<usize>);
impl Backward for BroadcastToOp {
    fn backward(&self, g: &Var, _: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.sum_to(&self.0))]
    }
}

struct MatMulOp;
impl Backward for MatMulOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, need: &[bool]) -> Vec<Option<Var>> {
        vec![
            need[0].then(|| g.matmul(&p[1].transpose())),
            need[1].then(|| p[0].transpose().matmul(g)),
        ]
    }
}

struct TransposeOp;
impl Backward for TransposeOp {
    fn backward(&self, g: &Var, _: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.transpose())]
    }
}

struct ConvOp(ConvGeom);
impl Backward for ConvOp {
    fn backward(&self, g: &Var, p: &[Var], _: &Var, need: &[bool]) -> Vec<Option<Var>> {
        let (x, w) = (&p[0], &p[1]);
        vec![
            need[0].then(|| Var::conv3d_input_grad(g, w, self.0, x.shape())),
            need[1].then(|| Var::conv3d_weight_grad(x, g, self.0, w.shape())),
        ]
    }
}

/// Parents `(gy, w)`; value `conv^T(gy, w)` is bilinear in both.
struct ConvInputGradOp(ConvGeom);
impl Backward for ConvInputGradOp {
    fn backward(&self, u: &Var, p: &[Var], _: &Var, need: &[bool]) -> Vec<Option<Var>> {
        let (gy, w) = (&p[0], &p[1]);
        vec![
            need[0].then(|| u.conv3d(w, self.0)),
            need[1].then(|| Var::conv3d_weight_grad(u, gy, self.0, w.shape())),
        ]
    }
}

/// Parents `(x, gy)`; value `dW(x, gy)` is bilinear in both.
struct ConvWeightGradOp(ConvGeom);
impl Backward for ConvWeightGradOp {
    fn backward(&self, v: &Var, p: &[Var], _: &Var, need: &[bool]) -> Vec<Option<Var>> {
        let (x, gy) = (&p[0], &p[1]);
        vec![
            need[0].then(|| Var::conv3d_input_grad(gy, v, self.0, x.shape())),
            need[1].then(|| x.conv3d(v, self.0)),
        ]
    }
}

struct UpsampleOp;
impl Backward for UpsampleOp {
    fn backward(&self, g: &Var, _: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.sumpool2())]
    }
}

struct SumPoolOp;
impl Backward for SumPoolOp {
    fn backward(&self, g: &Var, _: &[Var], _: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.upsample2())]
    }
}

// ---------------------------------------------------------------------------
// Gradient engine

/// Gradients of `sum_i <seeds_i, outputs_i>` with respect to `inputs`.
///
/// `seeds` defaults to all-ones tensors. With `create_graph` the returned
/// gradients carry their own graph and can be differentiated again.
/// Inputs that do not influence the outputs get `None`.
pub fn grad_with(
    outputs: &[Var],
    seeds: Option<&[Var]>,
    inputs: &[Var],
    create_graph: bool,
) -> Vec<Option<Var>> {
    let _guard = (!create_graph).then(no_grad);

    // Iterative post-order DFS gives parents before children.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<usize, bool> = HashMap::new();
    let mut stack: Vec<(Var, bool)> = outputs.iter().map(|o| (o.clone(), false)).collect();
    while let Some((v, expanded)) = stack.pop() {
        if !v.0.requires_grad {
            continue;
        }
        if expanded {
            order.push(v);
            continue;
        }
        if visited.insert(v.0.id, true).is_some() {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.0.requires_grad && !visited.contains_key(&p.0.id) {
                stack.push((p.clone(), false));
            }
        }
    }

    // A node is needed when some requested input lies beneath it.
    let input_ids: HashMap<usize, usize> =
        inputs.iter().enumerate().map(|(i, v)| (v.0.id, i)).collect();
    let mut needed: HashMap<usize, bool> = HashMap::new();
    for v in &order {
        let n = input_ids.contains_key(&v.0.id)
            || v.0.parents.iter().any(|p| *needed.get(&p.0.id).unwrap_or(&false));
        needed.insert(v.0.id, n);
    }

    let mut grads: HashMap<usize, Var> = HashMap::new();
    for (i, o) in outputs.iter().enumerate() {
        if !o.0.requires_grad {
            continue;
        }
        let seed = match seeds {
            Some(s) => s[i].clone(),
            None => Var::constant(Tensor::ones(o.shape())),
        };
        accumulate(&mut grads, o.0.id, seed);
    }

    for v in order.iter().rev() {
        if !needed[&v.0.id] {
            continue;
        }
        let Some(op) = &v.0.op else { continue };
        let Some(g) = grads.get(&v.0.id).cloned() else { continue };
        if !input_ids.contains_key(&v.0.id) {
            grads.remove(&v.0.id);
        }
        let need: Vec<bool> = v
            .0
            .parents
            .iter()
            .map(|p| p.0.requires_grad && *needed.get(&p.0.id).unwrap_or(&false))
            .collect();
        let pg = op.backward(&g, &v.0.parents, v, &need);
        for ((p, gp), n) in v.0.parents.iter().zip(pg).zip(&need) {
            if let (true, Some(gp)) = (*n, gp) {
                accumulate(&mut grads, p.0.id, gp);
            }
        }
    }

    inputs.iter().map(|v| grads.get(&v.0.id).cloned()).collect()
}

fn accumulate(grads: &mut HashMap<usize, Var>, id: usize, g: Var) {
    let next = match grads.remove(&id) {
        Some(prev) => prev.add(&g),
        None => g,
    };
    grads.insert(id, next);
}

/// First-order gradients of a scalar `loss` as plain tensors; inputs that do
/// not reach the loss get zeros.
pub fn grad(loss: &Var, inputs: &[Var]) -> Vec<Tensor> {
    grad_with(std::slice::from_ref(loss), None, inputs, false)
        .into_iter()
        .zip(inputs)
        .map(|(g, v)| match g {
            Some(g) => g.value().clone(),
            None => Tensor::zeros(v.shape()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.iter().map(|&v| v as Real).collect())
    }

    /// Central differences of a scalar function of one tensor.
    fn fd(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h as Real;
                let mut m = x.clone();
                m.data_mut()[i] -= h as Real;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[Real], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let err = (*x as f64 - y).abs() / (1.0 + y.abs());
            assert!(err < tol, "analytic {x} vs numeric {y}");
        }
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x0 = t(&[2, 3], &[0.3, -0.7, 1.2, 0.5, -1.5, 0.9]);
        let f = |x: &Var| -> Var {
            let b = Var::constant(t(&[3], &[0.5, -1.0, 2.0]));
            x.swish().mul(&b).add(&x.sigmoid().ln()).add(&x.leaky_relu(0.2).square())
                .add(&x.softplus().sqrt()).sum()
        };
        let x = Var::param(x0.clone());
        let g = grad(&f(&x), &[x.clone()]);
        let num = fd(&|v| f(&Var::constant(v.clone())).item(), &x0, 1e-3);
        assert_close(g[0].data(), &num, 2e-3);
    }

    #[test]
    fn conv_chain_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::randn(&[1, 2, 4, 4, 4], &mut rng);
        let w0 = Tensor::randn(&[3, 2, 3, 3, 3], &mut rng).map(|v| v * 0.2);
        let geom = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let f = |x: &Var, w: &Var| -> Var {
            x.conv3d(w, geom).leaky_relu(0.2).upsample2().avgpool2().square().mean()
        };
        let (x, w) = (Var::param(x0.clone()), Var::param(w0.clone()));
        let g = grad(&f(&x, &w), &[x.clone(), w.clone()]);
        let wc = Var::constant(w0.clone());
        let nx = fd(&|v| f(&Var::constant(v.clone()), &wc).item(), &x0, 1e-2);
        assert_close(g[0].data(), &nx, 2e-3);
        let xc = Var::constant(x0.clone());
        let nw = fd(&|v| f(&xc, &Var::constant(v.clone())).item(), &w0, 1e-2);
        assert_close(g[1].data(), &nw, 2e-3);
    }

    #[cfg(feature = "f64")]
    const FD_H: f64 = 1e-6;
    #[cfg(not(feature = "f64"))]
    const FD_H: f64 = 1e-2;

    /// Gradient of a gradient norm: the structure of the gradient penalty.
    #[test]
    fn second_order_through_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(&[1, 1, 4, 4, 4], &mut rng);
        let w0 = Tensor::randn(&[2, 1, 3, 3, 3], &mut rng).map(|v| v * 0.3);
        let w1 = Tensor::randn(&[1, 2, 3, 3, 3], &mut rng).map(|v| v * 0.3);
        let geom = ConvGeom { kernel: 3, stride: 1, pad: 1 };
        let penalty = |w: &Var| -> Var {
            let x = Var::param(x0.clone());
            let w1 = Var::constant(w1.clone());
            let score = x.conv3d(w, geom).swish().conv3d(&w1, geom).mean();
            let gx = grad_with(&[score], None, &[x], true)[0].clone().unwrap();
            gx.square().sum().add_scalar(1e-12).sqrt().add_scalar(-1.0).square()
        };
        let w = Var::param(w0.clone());
        let g = grad(&penalty(&w), &[w.clone()]);
        let num = fd(&|v| penalty(&Var::constant(v.clone())).item(), &w0, FD_H);
        assert_close(g[0].data(), &num, 3e-3);
    }

    #[test]
    fn unreachable_input_has_no_gradient() {
        let a = Var::param(Tensor::ones(&[2]));
        let b = Var::param(Tensor::ones(&[2]));
        let out = a.square().sum();
        let g = grad_with(&[out], None, &[a, b], false);
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }

    #[test]
    fn no_grad_records_nothing() {
        let a = Var::param(Tensor::ones(&[2]));
        let _g = no_grad();
        assert!(!a.square().requires_grad());
    }

    #[test]
    fn matmul_gradients() {
        let a0 = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b0 = t(&[3, 2], &[0.5, -1., 2., 0., 1., 1.]);
        let (a, b) = (Var::param(a0.clone()), Var::param(b0.clone()));
        let g = grad(&a.matmul(&b).square().sum(), &[a.clone(), b.clone()]);
        let bc = Var::constant(b0.clone());
        let na = fd(&|v| Var::constant(v.clone()).matmul(&bc).square().sum().item(), &a0, 1e-2);
        assert_close(g[0].data(), &na, 1e-3);
    }
}

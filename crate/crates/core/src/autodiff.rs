//! Reverse-mode automatic differentiation over f64 `ndarray` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse to accumulate gradients. Values are immutable once
//! recorded, so a [`Tensor`] is just a cheap handle (tape + node id).
//!
//! Everything runs in f64. The finite-difference checks in the test suites
//! rely on that.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

pub type Arr = ArrayD<f64>;

/// Context handed to a node's backward function.
pub struct BackCtx<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a Arr,
    /// Parent values, in the order they were passed at construction.
    pub parents: Vec<&'a Arr>,
    /// This node's forward value.
    pub out: &'a Arr,
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Arr>>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires_grad: bool,
}

#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

/// Handle to a node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

/// Gradients produced by a backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Arr> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arr, parents: Vec<usize>, back: Option<BackFn>, requires_grad: bool) -> Tensor {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite value recorded on tape");
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    /// Record a differentiable leaf (a parameter).
    pub fn leaf(&self, value: Arr) -> Tensor {
        self.push(value, vec![], None, true)
    }

    /// Record a non-differentiable constant (inputs, targets, tables).
    pub fn constant(&self, value: Arr) -> Tensor {
        self.push(value, vec![], None, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    /// Backpropagate from `loss` (any shape; seeded with ones) and return all
    /// accumulated gradients.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        let nodes = self.inner.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Arr>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Arr::from_elem(nodes[loss.id].value.raw_dim(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.back.is_none() {
                continue;
            }
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let ctx = BackCtx {
                grad: &grad,
                parents: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                out: &node.value,
            };
            let parent_grads = (node.back.as_ref().unwrap())(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if !nodes[*pid].requires_grad {
                        continue;
                    }
                    match &mut grads[*pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_to(a: &Arr, shape: &[usize]) -> Arr {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned()
}

/// Sum `grad` down to `shape` (undo broadcasting).
pub fn reduce_to_shape(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn binary_elemwise(
    a: &Tensor,
    b: &Tensor,
    fwd: impl Fn(f64, f64) -> f64,
    back: impl Fn(&BackCtx) -> Vec<Option<Arr>> + 'static,
) -> Tensor {
    let tape = a.tape.clone();
    let (va, vb) = (a.value(), b.value());
    let shape = broadcast_shape(va.shape(), vb.shape());
    let ba = broadcast_to(&va, &shape);
    let bb = broadcast_to(&vb, &shape);
    let mut out = ba;
    out.zip_mut_with(&bb, |x, &y| *x = fwd(*x, y));
    let rg = a.requires_grad() || b.requires_grad();
    tape.push(out, vec![a.id, b.id], Some(Box::new(back)), rg)
}

fn unary_elemwise(
    a: &Tensor,
    fwd: impl Fn(f64) -> f64,
    // grad wrt input given (x, y, gout)
    dback: impl Fn(f64, f64, f64) -> f64 + 'static,
) -> Tensor {
    let tape = a.tape.clone();
    let out = a.value().mapv(fwd);
    let rg = a.requires_grad();
    tape.push(
        out,
        vec![a.id],
        Some(Box::new(move |ctx| {
            let x = ctx.parents[0];
            let mut g = ctx.grad.clone();
            ndarray::Zip::from(&mut g).and(x).and(ctx.out).for_each(|gi, &xi, &yi| {
                *gi = dback(xi, yi, *gi);
            });
            vec![Some(g)]
        })),
        rg,
    )
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Arr {
        self.tape.inner.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow()[self.id].requires_grad
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_elemwise(self, other, |x, y| x + y, |ctx| {
            let sa = ctx.parents[0].shape().to_vec();
            let sb = ctx.parents[1].shape().to_vec();
            vec![
                Some(reduce_to_shape(ctx.grad, &sa)),
                Some(reduce_to_shape(ctx.grad, &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_elemwise(self, other, |x, y| x - y, |ctx| {
            let sa = ctx.parents[0].shape().to_vec();
            let sb = ctx.parents[1].shape().to_vec();
            vec![
                Some(reduce_to_shape(ctx.grad, &sa)),
                Some(reduce_to_shape(&-ctx.grad.clone(), &sb)),
            ]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_elemwise(self, other, |x, y| x * y, |ctx| {
            let a = ctx.parents[0];
            let b = ctx.parents[1];
            let shape = ctx.grad.shape().to_vec();
            let ab = broadcast_to(a, &shape);
            let bb = broadcast_to(b, &shape);
            vec![
                Some(reduce_to_shape(&(ctx.grad * &bb), a.shape())),
                Some(reduce_to_shape(&(ctx.grad * &ab), b.shape())),
            ]
        })
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary_elemwise(self, other, |x, y| x / y, |ctx| {
            let a = ctx.parents[0];
            let b = ctx.parents[1];
            let shape = ctx.grad.shape().to_vec();
            let ab = broadcast_to(a, &shape);
            let bb = broadcast_to(b, &shape);
            let ga = ctx.grad / &bb;
            let gb = -(ctx.grad * &ab) / (&bb * &bb);
            vec![
                Some(reduce_to_shape(&ga, a.shape())),
                Some(reduce_to_shape(&gb, b.shape())),
            ]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary_elemwise(self, move |x| c * x, move |_x, _y, g| c * g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary_elemwise(self, move |x| x + c, |_x, _y, g| g)
    }

    pub fn relu(&self) -> Tensor {
        unary_elemwise(self, |x| x.max(0.0), |x, _y, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_elemwise(
            self,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_x, y, g| g * y * (1.0 - y),
        )
    }

    pub fn tanh(&self) -> Tensor {
        unary_elemwise(self, |x| x.tanh(), |_x, y, g| g * (1.0 - y * y))
    }

    pub fn sqrt(&self) -> Tensor {
        unary_elemwise(self, |x| x.sqrt(), |_x, y, g| g * 0.5 / y)
    }

    pub fn exp(&self) -> Tensor {
        unary_elemwise(self, |x| x.exp(), |_x, y, g| g * y)
    }

    /// Numerically stable log(1 + e^x).
    pub fn softplus(&self) -> Tensor {
        unary_elemwise(
            self,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _y, g| g / (1.0 + (-x).exp()),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        let inner = self
            .add(&self.mul(self).mul(self).scale(0.044715))
            .scale(C);
        self.scale(0.5).mul(&inner.tanh().add_scalar(1.0))
    }

    pub fn sum(&self) -> Tensor {
        let tape = self.tape.clone();
        let v = self.value();
        let out = Arr::from_elem(IxDyn(&[]), v.sum());
        let rg = self.requires_grad();
        tape.push(
            out,
            vec![self.id],
            Some(Box::new(|ctx| {
                let g = ctx.grad.iter().next().copied().unwrap();
                vec![Some(Arr::from_elem(ctx.parents[0].raw_dim(), g))]
            })),
            rg,
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        let tape = self.tape.clone();
        let v = self.value();
        let mut out = v.clone();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        for &ax in &sorted {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let rg = self.requires_grad();
        tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |ctx| {
                vec![Some(broadcast_to(ctx.grad, ctx.parents[0].shape()))]
            })),
            rg,
        )
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let tape = self.tape.clone();
        let v = self.value();
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape element mismatch");
        let out = v
            .to_shape(IxDyn(shape))
            .expect("reshape")
            .to_owned();
        let rg = self.requires_grad();
        tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |ctx| {
                let pshape = ctx.parents[0].shape().to_vec();
                vec![Some(
                    ctx.grad
                        .to_shape(IxDyn(&pshape))
                        .expect("reshape grad")
                        .to_owned(),
                )]
            })),
            rg,
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let tape = self.tape.clone();
        let v = self.value();
        let out = v
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let axes_owned = axes.to_vec();
        let rg = self.requires_grad();
        tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |ctx| {
                let mut inv = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inv[a] = i;
                }
                vec![Some(
                    ctx.grad
                        .clone()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned(),
                )]
            })),
            rg,
        )
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty());
        let tape = tensors[0].tape.clone();
        let values: Vec<Arr> = tensors.iter().map(|t| t.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat");
        let rg = tensors.iter().any(|t| t.requires_grad());
        let parents = tensors.iter().map(|t| t.id).collect();
        tape.push(
            out,
            parents,
            Some(Box::new(move |ctx| {
                let mut offset = 0usize;
                let mut grads = Vec::with_capacity(ctx.parents.len());
                for p in &ctx.parents {
                    let d = p.shape()[axis];
                    let g = ctx
                        .grad
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + d))
                        .to_owned();
                    grads.push(Some(g));
                    offset += d;
                }
                grads
            })),
            rg,
        )
    }

    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let tape = self.tape.clone();
        let v = self.value();
        let out = v
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        let rg = self.requires_grad();
        tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |ctx| {
                let mut g = Arr::zeros(ctx.parents[0].raw_dim());
                g.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                    .assign(ctx.grad);
                vec![Some(g)]
            })),
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let tape = self.tape.clone();
        let v = self.value();
        let last = v.ndim() - 1;
        let mut out = v.clone();
        for mut row in out.lanes_mut(Axis(last)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let rg = self.requires_grad();
        tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |ctx| {
                let y = ctx.out;
                let gy = ctx.grad * y;
                let s = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let g = &gy - &(y * &s.broadcast(y.raw_dim()).unwrap());
                vec![Some(g)]
            })),
            rg,
        )
    }

    /// Batched matrix multiply: (..., m, k) x (..., k, n) with numpy-style
    /// broadcasting of the leading dims.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let tape = self.tape.clone();
        let va = self.value();
        let vb = other.value();
        let out = matmul_fwd(&va, &vb);
        let rg = self.requires_grad() || other.requires_grad();
        tape.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(|ctx| {
                let (da, db) = matmul_back(ctx.parents[0], ctx.parents[1], ctx.grad);
                vec![Some(da), Some(db)]
            })),
            rg,
        )
    }

    /// Fused scaled-dot-product attention: softmax(scale * q kᵀ) v with
    /// `self` = q [B, H, T, D] and k, v [B, H, S, D]. The T x S probability
    /// matrix never lands on the tape; backward recomputes it per
    /// (batch, head) slice, trading compute for memory.
    pub fn scaled_attention(&self, k: &Tensor, v: &Tensor, scale: f64) -> Tensor {
        let tape = self.tape.clone();
        let out = attention_fwd(&self.value(), &k.value(), &v.value(), scale);
        let rg = self.requires_grad() || k.requires_grad() || v.requires_grad();
        tape.push(
            out,
            vec![self.id, k.id, v.id],
            Some(Box::new(move |ctx| {
                let (dq, dk, dv) =
                    attention_back(ctx.parents[0], ctx.parents[1], ctx.parents[2], ctx.grad, scale);
                vec![Some(dq), Some(dk), Some(dv)]
            })),
            rg,
        )
    }

    /// 2D convolution. `x`: [N, Cin, H, W]. Weight: [Cout, Cin/groups, kh, kw]
    /// for shared kernels or [N, Cout, Cin/groups, kh, kw] for per-sample
    /// kernels.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
        let tape = self.tape.clone();
        let x = self.value();
        let w = weight.value();
        let out = conv2d_fwd(&x, &w, stride, pad, groups);
        let rg = self.requires_grad() || weight.requires_grad();
        tape.push(
            out,
            vec![self.id, weight.id],
            Some(Box::new(move |ctx| {
                let (dx, dw) = conv2d_back(ctx.parents[0], ctx.parents[1], ctx.grad, stride, pad, groups);
                vec![Some(dx), Some(dw)]
            })),
            rg,
        )
    }

    /// Depthwise 1D convolution with per-sample kernels.
    /// `x`: [B, C, L], `w`: [B, C, K], zero padding `pad`.
    pub fn conv1d_depthwise(&self, weight: &Tensor, pad: usize) -> Tensor {
        let tape = self.tape.clone();
        let x = self.value();
        let w = weight.value();
        let out = conv1d_dw_fwd(&x, &w, pad);
        let rg = self.requires_grad() || weight.requires_grad();
        tape.push(
            out,
            vec![self.id, weight.id],
            Some(Box::new(move |ctx| {
                let (dx, dw) = conv1d_dw_back(ctx.parents[0], ctx.parents[1], ctx.grad, pad);
                vec![Some(dx), Some(dw)]
            })),
            rg,
        )
    }

    /// Bilinear upsampling by an exact factor of two (align_corners = false).
    pub fn upsample2(&self) -> Tensor {
        let tape = self.tape.clone();
        let x = self.value();
        let out = upsample2_fwd(&x);
        let rg = self.requires_grad();
        tape.push(
            out,
            vec![self.id],
            Some(Box::new(|ctx| vec![Some(upsample2_back(ctx.parents[0], ctx.grad))]),),
            rg,
        )
    }

    /// Global max pool over spatial dims: [N, C, H, W] -> [N, C].
    pub fn max_spatial(&self) -> Tensor {
        let tape = self.tape.clone();
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let mut out = Arr::zeros(IxDyn(&[n, c]));
        for i in 0..n {
            for j in 0..c {
                let mut m = f64::NEG_INFINITY;
                for y in 0..h {
                    for z in 0..w {
                        m = m.max(x[[i, j, y, z]]);
                    }
                }
                out[[i, j]] = m;
            }
        }
        let rg = self.requires_grad();
        tape.push(
            out,
            vec![self.id],
            Some(Box::new(|ctx| {
                let x = ctx.parents[0];
                let (n, c, h, w) = dims4(x);
                let mut g = Arr::zeros(x.raw_dim());
                for i in 0..n {
                    for j in 0..c {
                        // first occurrence of the max, scan order
                        let (mut by, mut bz, mut m) = (0usize, 0usize, f64::NEG_INFINITY);
                        for y in 0..h {
                            for z in 0..w {
                                if x[[i, j, y, z]] > m {
                                    m = x[[i, j, y, z]];
                                    by = y;
                                    bz = z;
                                }
                            }
                        }
                        g[[i, j, by, bz]] = ctx.grad[[i, j]];
                    }
                }
                vec![Some(g)]
            })),
            rg,
        )
    }

    /// Global average pool over spatial dims: [N, C, H, W] -> [N, C].
    pub fn mean_spatial(&self) -> Tensor {
        let s = self.shape();
        self.mean_axes(&[2, 3]).reshape(&[s[0], s[1]])
    }
}

fn dims4(a: &Arr) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

fn attn_slice2<'a>(x: &'a Arr, b: usize, h: usize) -> ndarray::ArrayView2<'a, f64> {
    x.slice(ndarray::s![b, h, .., ..])
        .into_dimensionality::<Ix2>()
        .unwrap()
}

/// Row-softmax of scale * q kᵀ for one (batch, head) slice.
fn attn_probs(q: &ndarray::ArrayView2<f64>, k: &ndarray::ArrayView2<f64>, scale: f64) -> ndarray::Array2<f64> {
    let mut s = q.dot(&k.t());
    s.mapv_inplace(|x| x * scale);
    for mut row in s.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    s
}

fn attention_fwd(q: &Arr, k: &Arr, v: &Arr, scale: f64) -> Arr {
    let (b, h, t, d) = dims4(q);
    let (bk, hk, s, dk) = dims4(k);
    assert_eq!((b, h, d), (bk, hk, dk), "attention q/k shape mismatch");
    assert_eq!(v.shape(), k.shape(), "attention k/v shape mismatch");
    let mut out = Arr::zeros(IxDyn(&[b, h, t, d]));
    let _ = s;
    for bi in 0..b {
        for hi in 0..h {
            let p = attn_probs(&attn_slice2(q, bi, hi), &attn_slice2(k, bi, hi), scale);
            let o = p.dot(&attn_slice2(v, bi, hi));
            out.slice_mut(ndarray::s![bi, hi, .., ..]).assign(&o);
        }
    }
    out
}

fn attention_back(q: &Arr, k: &Arr, v: &Arr, gout: &Arr, scale: f64) -> (Arr, Arr, Arr) {
    let (b, h, _t, _d) = dims4(q);
    let mut dq = Arr::zeros(q.raw_dim());
    let mut dk = Arr::zeros(k.raw_dim());
    let mut dv = Arr::zeros(v.raw_dim());
    for bi in 0..b {
        for hi in 0..h {
            let q2 = attn_slice2(q, bi, hi);
            let k2 = attn_slice2(k, bi, hi);
            let v2 = attn_slice2(v, bi, hi);
            let g2 = attn_slice2(gout, bi, hi);
            let p = attn_probs(&q2, &k2, scale);
            dv.slice_mut(ndarray::s![bi, hi, .., ..]).assign(&p.t().dot(&g2));
            let dp = g2.dot(&v2.t()); // [T, S]
            // softmax backward: dS = P ∘ (dP − rowsum(dP ∘ P))
            let rowsum = (&dp * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = &p * &(&dp - &rowsum);
            dq.slice_mut(ndarray::s![bi, hi, .., ..])
                .assign(&ds.dot(&k2).mapv(|x| x * scale));
            dk.slice_mut(ndarray::s![bi, hi, .., ..])
                .assign(&ds.t().dot(&q2).mapv(|x| x * scale));
        }
    }
    (dq, dk, dv)
}

fn matmul_fwd(a: &Arr, b: &Arr) -> Arr {
    assert!(a.ndim() >= 2 && b.ndim() >= 2);
    let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (k2, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    assert_eq!(k, k2, "matmul inner dim: {:?} x {:?}", a.shape(), b.shape());
    let la = &a.shape()[..a.ndim() - 2];
    let lb = &b.shape()[..b.ndim() - 2];
    let batch = broadcast_shape(la, lb);
    let nb: usize = batch.iter().product();
    let af = expand_batched(a, &batch, m, k);
    let bf = expand_batched(b, &batch, k, n);
    let mut out = Arr::zeros(IxDyn(&[nb, m, n]));
    for i in 0..nb {
        let av = af.index_axis(Axis(0), i);
        let bv = bf.index_axis(Axis(0), i);
        let av2 = av.into_dimensionality::<Ix2>().unwrap();
        let bv2 = bv.into_dimensionality::<Ix2>().unwrap();
        out.index_axis_mut(Axis(0), i).assign(&av2.dot(&bv2));
    }
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    out.to_shape(IxDyn(&shape)).unwrap().to_owned()
}

/// Broadcast leading dims to `batch` and flatten to [prod(batch), r, c].
fn expand_batched(a: &Arr, batch: &[usize], r: usize, c: usize) -> Arr {
    let mut full = batch.to_vec();
    full.push(r);
    full.push(c);
    let nb: usize = batch.iter().product();
    broadcast_to(a, &full)
        .to_shape(IxDyn(&[nb, r, c]))
        .unwrap()
        .to_owned()
}

fn matmul_back(a: &Arr, b: &Arr, g: &Arr) -> (Arr, Arr) {
    let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (_, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    let la = &a.shape()[..a.ndim() - 2];
    let lb = &b.shape()[..b.ndim() - 2];
    let batch = broadcast_shape(la, lb);
    let nb: usize = batch.iter().product();
    let af = expand_batched(a, &batch, m, k);
    let bf = expand_batched(b, &batch, k, n);
    let gf = g.to_shape(IxDyn(&[nb, m, n])).unwrap().to_owned();
    let mut da = Arr::zeros(IxDyn(&[nb, m, k]));
    let mut db = Arr::zeros(IxDyn(&[nb, k, n]));
    for i in 0..nb {
        let av = af.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
        let bv = bf.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
        let gv = gf.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
        da.index_axis_mut(Axis(0), i).assign(&gv.dot(&bv.t()));
        db.index_axis_mut(Axis(0), i).assign(&av.t().dot(&gv));
    }
    let mut da_shape = batch.clone();
    da_shape.push(m);
    da_shape.push(k);
    let mut db_shape = batch;
    db_shape.push(k);
    db_shape.push(n);
    let da = da.to_shape(IxDyn(&da_shape)).unwrap().to_owned();
    let db = db.to_shape(IxDyn(&db_shape)).unwrap().to_owned();
    (reduce_to_shape(&da, a.shape()), reduce_to_shape(&db, b.shape()))
}

fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// im2col for one sample and one channel group.
/// Result: [cg * kh * kw, ho * wo].
fn im2col(
    x: &ndarray::ArrayView3<f64>, // [cg, H, W] slice of one sample's group channels
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<f64> {
    let (cg, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut col = ndarray::Array2::<f64>::zeros((cg * kh * kw, ho * wo));
    for c in 0..cg {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &ndarray::Array2<f64>,
    cg: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut dx = ndarray::Array3::<f64>::zeros((cg, h, w));
    for c in 0..cg {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = (c * kh + dy) * kw + dxk;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dxk) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    dx
}

fn conv_weight_dims(w: &Arr) -> (bool, usize, usize, usize, usize) {
    match w.ndim() {
        4 => (false, w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]),
        5 => (true, w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]),
        _ => panic!("conv weight must be 4-d or 5-d, got {:?}", w.shape()),
    }
}

fn conv2d_fwd(x: &Arr, w: &Arr, stride: usize, pad: usize, groups: usize) -> Arr {
    let (n, cin, h, wd) = dims4(x);
    let (per_sample, cout, cing, kh, kw) = conv_weight_dims(w);
    assert_eq!(cin, cing * groups, "conv channel mismatch");
    assert_eq!(cout % groups, 0);
    if per_sample {
        assert_eq!(w.shape()[0], n, "per-sample weight batch mismatch");
    }
    let coutg = cout / groups;
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let mut out = Arr::zeros(IxDyn(&[n, cout, ho, wo]));
    for i in 0..n {
        for g in 0..groups {
            let xg = x
                .slice(ndarray::s![i, g * cing..(g + 1) * cing, .., ..])
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let col = im2col(&xg, kh, kw, stride, pad);
            let wmat = if per_sample {
                w.slice(ndarray::s![i, g * coutg..(g + 1) * coutg, .., .., ..])
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned()
                    .into_shape_with_order((coutg, cing * kh * kw))
                    .unwrap()
            } else {
                w.slice(ndarray::s![g * coutg..(g + 1) * coutg, .., .., ..])
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned()
                    .into_shape_with_order((coutg, cing * kh * kw))
                    .unwrap()
            };
            let res = wmat.dot(&col); // [coutg, ho*wo]
            let res3 = ndarray::Array3::from_shape_vec((coutg, ho, wo), res.iter().cloned().collect()).unwrap();
            out.slice_mut(ndarray::s![i, g * coutg..(g + 1) * coutg, .., ..])
                .assign(&res3);
        }
    }
    out
}

fn conv2d_back(x: &Arr, w: &Arr, gout: &Arr, stride: usize, pad: usize, groups: usize) -> (Arr, Arr) {
    let (n, cin, h, wd) = dims4(x);
    let (per_sample, cout, cing, kh, kw) = conv_weight_dims(w);
    let coutg = cout / groups;
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let _ = cin;
    let mut dx = Arr::zeros(x.raw_dim());
    let mut dw = Arr::zeros(w.raw_dim());
    for i in 0..n {
        for g in 0..groups {
            let xg = x
                .slice(ndarray::s![i, g * cing..(g + 1) * cing, .., ..])
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let col = im2col(&xg, kh, kw, stride, pad);
            let gmat = gout
                .slice(ndarray::s![i, g * coutg..(g + 1) * coutg, .., ..])
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .to_owned()
                .into_shape_with_order((coutg, ho * wo))
                .unwrap();
            let wmat = if per_sample {
                w.slice(ndarray::s![i, g * coutg..(g + 1) * coutg, .., .., ..])
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned()
                    .into_shape_with_order((coutg, cing * kh * kw))
                    .unwrap()
            } else {
                w.slice(ndarray::s![g * coutg..(g + 1) * coutg, .., .., ..])
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned()
                    .into_shape_with_order((coutg, cing * kh * kw))
                    .unwrap()
            };
            // weight gradient
            let dwmat = gmat.dot(&col.t()); // [coutg, cing*kh*kw]
            let dw4 = ndarray::Array4::from_shape_vec(
                (coutg, cing, kh, kw),
                dwmat.iter().cloned().collect(),
            )
            .unwrap();
            if per_sample {
                dw.slice_mut(ndarray::s![i, g * coutg..(g + 1) * coutg, .., .., ..])
                    .assign(&dw4);
            } else {
                let mut slot = dw.slice_mut(ndarray::s![g * coutg..(g + 1) * coutg, .., .., ..]);
                slot += &dw4;
            }
            // input gradient
            let dcol = wmat.t().dot(&gmat); // [cing*kh*kw, ho*wo]
            let dxg = col2im(&dcol, cing, h, wd, kh, kw, stride, pad);
            let mut slot = dx.slice_mut(ndarray::s![i, g * cing..(g + 1) * cing, .., ..]);
            slot += &dxg;
        }
    }
    (dx, dw)
}

fn conv1d_dw_fwd(x: &Arr, w: &Arr, pad: usize) -> Arr {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[2];
    assert_eq!(w.shape()[0], b);
    assert_eq!(w.shape()[1], c);
    let lo = l + 2 * pad - k + 1;
    let mut out = Arr::zeros(IxDyn(&[b, c, lo]));
    for i in 0..b {
        for j in 0..c {
            for o in 0..lo {
                let mut acc = 0.0;
                for t in 0..k {
                    let idx = o as isize + t as isize - pad as isize;
                    if idx >= 0 && (idx as usize) < l {
                        acc += x[[i, j, idx as usize]] * w[[i, j, t]];
                    }
                }
                out[[i, j, o]] = acc;
            }
        }
    }
    out
}

fn conv1d_dw_back(x: &Arr, w: &Arr, g: &Arr, pad: usize) -> (Arr, Arr) {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[2];
    let lo = g.shape()[2];
    let mut dx = Arr::zeros(x.raw_dim());
    let mut dw = Arr::zeros(w.raw_dim());
    for i in 0..b {
        for j in 0..c {
            for o in 0..lo {
                let go = g[[i, j, o]];
                for t in 0..k {
                    let idx = o as isize + t as isize - pad as isize;
                    if idx >= 0 && (idx as usize) < l {
                        dx[[i, j, idx as usize]] += go * w[[i, j, t]];
                        dw[[i, j, t]] += go * x[[i, j, idx as usize]];
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Bilinear x2 interpolation weights for one output index (align_corners=false).
fn up2_src(o: usize, n: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    let src = src.clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let f = src - i0 as f64;
    (i0, i1, f)
}

fn upsample2_fwd(x: &Arr) -> Arr {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Arr::zeros(IxDyn(&[n, c, ho, wo]));
    for i in 0..n {
        for j in 0..c {
            for oy in 0..ho {
                let (y0, y1, fy) = up2_src(oy, h);
                for ox in 0..wo {
                    let (x0, x1, fx) = up2_src(ox, w);
                    out[[i, j, oy, ox]] = (1.0 - fy) * (1.0 - fx) * x[[i, j, y0, x0]]
                        + (1.0 - fy) * fx * x[[i, j, y0, x1]]
                        + fy * (1.0 - fx) * x[[i, j, y1, x0]]
                        + fy * fx * x[[i, j, y1, x1]];
                }
            }
        }
    }
    out
}

fn upsample2_back(x: &Arr, g: &Arr) -> Arr {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = Arr::zeros(x.raw_dim());
    for i in 0..n {
        for j in 0..c {
            for oy in 0..ho {
                let (y0, y1, fy) = up2_src(oy, h);
                for ox in 0..wo {
                    let (x0, x1, fx) = up2_src(ox, w);
                    let go = g[[i, j, oy, ox]];
                    dx[[i, j, y0, x0]] += (1.0 - fy) * (1.0 - fx) * go;
                    dx[[i, j, y0, x1]] += (1.0 - fy) * fx * go;
                    dx[[i, j, y1, x0]] += fy * (1.0 - fx) * go;
                    dx[[i, j, y1, x1]] += fy * fx * go;
                }
            }
        }
    }
    dx
}

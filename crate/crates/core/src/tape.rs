//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Define-by-run: every op records a node with its parents and a local
//! vector-Jacobian closure. [`Tape::backward`] walks the tape once in
//! reverse creation order, which is already a topological order. Recorded
//! tensors are never mutated; each op allocates its output.
//!
//! A tape lives on one thread and is dropped (or reset) after use.
//! Gradients flow only into subgraphs reachable from a [`Tape::leaf`];
//! [`Tape::constant`] inputs are skipped during the reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::tensor::{broadcast_shapes, broadcast_strides, reduce_to_shape, strides_of, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(0);

/// Handle to a node on a specific tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    needs_grad: bool,
    backward: Option<BackFn>,
}

/// Recording tape. One forward graph per tape; gradients are computed by
/// [`Tape::backward`] and read back with [`Tape::grad`].
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    swept: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            swept: false,
        }
    }

    /// Differentiable input: participates in gradient accumulation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], true, None)
    }

    /// Non-differentiable input: the reverse sweep prunes anything that
    /// depends only on constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        &self.nodes[v.idx]
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        needs_grad: bool,
        backward: Option<BackFn>,
    ) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward,
        });
        Var { tape: self.id, idx }
    }

    fn record(&mut self, value: Tensor, parents: Vec<Var>, make: impl FnOnce() -> BackFn) -> Var {
        let needs_grad = parents.iter().any(|p| self.node(*p).needs_grad);
        let backward = needs_grad.then(make);
        self.push(value, parents, needs_grad, backward)
    }

    /// Reverse sweep from a scalar loss. Populates per-leaf gradients;
    /// every recorded node is visited at most once.
    ///
    /// Panics if the loss is not a single element, or on a second call
    /// without [`Tape::reset_grads`] in between.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(loss.tape, self.id, "Var belongs to a different tape");
        assert!(
            !self.swept,
            "backward called twice without reset_grads()"
        );
        let loss_val = &self.nodes[loss.idx].value;
        assert_eq!(
            loss_val.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            loss_val.shape()
        );
        self.swept = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.idx] = Some(Tensor::ones(loss_val.shape()));

        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].backward {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), self.nodes[i].parents.len());
                let parents = self.nodes[i].parents.clone();
                for (p, c) in parents.into_iter().zip(contribs) {
                    if !self.nodes[p.idx].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(c.shape(), self.nodes[p.idx].value.shape());
                    self.grads[p.idx] = Some(match self.grads[p.idx].take() {
                        Some(acc) => acc.add(&c),
                        None => c,
                    });
                }
            }
            self.grads[i] = Some(g);
        }
    }

    /// Clears gradients so another root can be swept on the same graph.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.swept = false;
    }

    /// Gradient of the last swept loss w.r.t. `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Like [`Tape::grad`] but zero-filled for untouched leaves.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _, _, g_ab| g_ab)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x - y,
            |_, _, _, (ga, gb)| (ga, gb.map(|v| -v)),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x * y,
            |ax, bx, _, (ga, gb)| (ga.mul(&bx), gb.mul(&ax)),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x / y,
            |_ax, bx, out, (ga, gb)| {
                let da = ga.zip3(&bx, |g, b| g / b);
                let db = gb.zip3_pair(&out, &bx, |g, y, b| -g * y / b);
                (da, db)
            },
        )
    }

    /// Shared plumbing for broadcasting binaries. `grad` receives the
    /// broadcast-expanded operands, the output, and the upstream gradient
    /// already duplicated per side; it returns per-side gradients at the
    /// broadcast (output) shape, which are then reduced to operand shapes.
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        grad: fn(Tensor, Tensor, Tensor, (Tensor, Tensor)) -> (Tensor, Tensor),
    ) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out_shape = broadcast_shapes(av.shape(), bv.shape()).unwrap_or_else(|| {
            panic!(
                "shape mismatch: {:?} vs {:?} not broadcast-compatible",
                av.shape(),
                bv.shape()
            )
        });
        let ax = expand(&av, &out_shape);
        let bx = expand(&bv, &out_shape);
        let out = ax.zip3(&bx, f);
        let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
        let out_clone = out.clone();
        self.record(out, vec![a, b], move || {
            Box::new(move |g: &Tensor| {
                let (da, db) = grad(ax.clone(), bx.clone(), out_clone.clone(), (g.clone(), g.clone()));
                vec![
                    Tensor::from_vec(&a_shape, reduce_to_shape(da.data(), da.shape(), &a_shape)),
                    Tensor::from_vec(&b_shape, reduce_to_shape(db.data(), db.shape(), &b_shape)),
                ]
            })
        })
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _, g| g.map(|v| -v))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, out, g| g.mul(&out))
    }

    /// Natural log; input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Var {
        for &v in self.value(a).data() {
            assert!(v > 0.0, "log of non-positive value {v}");
        }
        self.unary(a, f64::ln, |ax, _, g| g.zip3(&ax, |gv, av| gv / av))
    }

    /// Square root; input must be strictly positive.
    pub fn sqrt(&mut self, a: Var) -> Var {
        for &v in self.value(a).data() {
            assert!(v > 0.0, "sqrt of non-positive value {v}");
        }
        self.unary(a, f64::sqrt, |_, out, g| g.zip3(&out, |gv, y| gv / (2.0 * y)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |ax, _, g| g.zip3(&ax, |gv, av| 2.0 * av * gv))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, out, g| g.zip3(&out, |gv, y| gv * y * (1.0 - y)),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { 0.0 },
            |ax, _, g| g.zip3(&ax, |gv, av| if av > 0.0 { gv } else { 0.0 }),
        )
    }

    fn unary(
        &mut self,
        a: Var,
        f: fn(f64) -> f64,
        grad: fn(Tensor, Tensor, &Tensor) -> Tensor,
    ) -> Var {
        let av = self.value(a).clone();
        let out = av.map(f);
        let out_clone = out.clone();
        self.record(out, vec![a], move || {
            Box::new(move |g: &Tensor| vec![grad(av.clone(), out_clone.clone(), g)])
        })
    }

    // ── scalar-constant ops ─────────────────────────────────────────────

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.record(out, vec![a], move || Box::new(move |g: &Tensor| vec![g.scale(c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.record(out, vec![a], || Box::new(|g: &Tensor| vec![g.clone()]))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (m, k) = dims2(av.shape(), "matmul lhs");
        let (k2, n) = dims2(bv.shape(), "matmul rhs");
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let out = Tensor::from_vec(&[m, n], mm(av.data(), bv.data(), m, k, n));
        self.record(out, vec![a, b], move || {
            Box::new(move |g: &Tensor| {
                // dA = G . B^T ; dB = A^T . G
                let da = mm_nt(g.data(), bv.data(), m, n, k);
                let db = mm_tn(av.data(), g.data(), m, k, n);
                vec![Tensor::from_vec(&[m, k], da), Tensor::from_vec(&[k, n], db)]
            })
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let (r, c) = dims2(av.shape(), "transpose");
        let out = Tensor::from_vec(&[c, r], transpose_raw(av.data(), r, c));
        self.record(out, vec![a], move || {
            Box::new(move |g: &Tensor| {
                vec![Tensor::from_vec(&[r, c], transpose_raw(g.data(), c, r))]
            })
        })
    }

    // ── softmax ─────────────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let av = self.value(a).clone();
        let shape = av.shape().to_vec();
        assert!(axis < shape.len(), "softmax axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = lane_dims(&shape, axis);
        let mut out = av.data().to_vec();
        for_each_lane(outer, len, inner, |lane, _| {
            let mut mx = f64::NEG_INFINITY;
            for &i in lane {
                mx = mx.max(out[i]);
            }
            let mut denom = 0.0;
            for &i in lane {
                out[i] = (out[i] - mx).exp();
                denom += out[i];
            }
            for &i in lane {
                out[i] /= denom;
            }
        });
        let out = Tensor::from_vec(&shape, out);
        let y = out.clone();
        self.record(out, vec![a], move || {
            Box::new(move |g: &Tensor| {
                // dx_i = y_i * (g_i - sum_j g_j y_j) per lane
                let mut dx = vec![0.0; g.numel()];
                let (outer, len, inner) = lane_dims(y.shape(), axis);
                for_each_lane(outer, len, inner, |lane, _| {
                    let mut dot = 0.0;
                    for &i in lane {
                        dot += g.data()[i] * y.data()[i];
                    }
                    for &i in lane {
                        dx[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                });
                vec![Tensor::from_vec(y.shape(), dx)]
            })
        })
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum. `axis: None` reduces everything to shape `[1]`; `Some(k)`
    /// keeps axis `k` with extent 1 so the result broadcasts back.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Var {
        self.reduce(a, axis, false)
    }

    /// Mean with the same axis semantics as [`Tape::sum`].
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Var {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, average: bool) -> Var {
        let av = self.value(a).clone();
        let shape = av.shape().to_vec();
        match axis {
            None => {
                let n = av.numel() as f64;
                let total = av.sum();
                let out = Tensor::scalar(if average { total / n } else { total });
                self.record(out, vec![a], move || {
                    Box::new(move |g: &Tensor| {
                        let gv = g.item() * if average { 1.0 / n } else { 1.0 };
                        vec![Tensor::full(&shape, gv)]
                    })
                })
            }
            Some(axis) => {
                assert!(axis < shape.len(), "reduce axis {axis} out of range for {shape:?}");
                let (outer, len, inner) = lane_dims(&shape, axis);
                let mut out_shape = shape.clone();
                out_shape[axis] = 1;
                let mut data = vec![0.0; outer * inner];
                for_each_lane(outer, len, inner, |lane, out_idx| {
                    let mut s = 0.0;
                    for &i in lane {
                        s += av.data()[i];
                    }
                    data[out_idx] = if average { s / len as f64 } else { s };
                });
                let out = Tensor::from_vec(&out_shape, data);
                self.record(out, vec![a], move || {
                    Box::new(move |g: &Tensor| {
                        let mut dx = vec![0.0; shape.iter().product()];
                        let (outer, len, inner) = lane_dims(&shape, axis);
                        for_each_lane(outer, len, inner, |lane, out_idx| {
                            let gv = g.data()[out_idx] * if average { 1.0 / len as f64 } else { 1.0 };
                            for &i in lane {
                                dx[i] = gv;
                            }
                        });
                        vec![Tensor::from_vec(&shape, dx)]
                    })
                })
            }
        }
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a).clone();
        let old_shape = av.shape().to_vec();
        let out = av.reshape(shape);
        self.record(out, vec![a], move || {
            Box::new(move |g: &Tensor| vec![g.reshape(&old_shape)])
        })
    }

    /// Flat-index gather: `out[i] = a[idx[i]]`, result shape `[idx.len()]`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let av = self.value(a).clone();
        let numel = av.numel();
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| {
                assert!(i < numel, "gather index {i} out of range ({numel} elements)");
                av.data()[i]
            })
            .collect();
        let out = Tensor::from_vec(&[idx.len()], data);
        let src_shape = av.shape().to_vec();
        self.record(out, vec![a], move || {
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; src_shape.iter().product()];
                for (o, &i) in idx.iter().enumerate() {
                    dx[i] += g.data()[o];
                }
                vec![Tensor::from_vec(&src_shape, dx)]
            })
        })
    }

    // ── composites ──────────────────────────────────────────────────────

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// RMS normalization along `axis`: `x / sqrt(mean(x^2, axis) + eps)`.
    pub fn rms_norm(&mut self, a: Var, axis: usize, eps: f64) -> Var {
        let sq = self.square(a);
        let ms = self.mean(sq, Some(axis));
        let stable = self.add_scalar(ms, eps);
        let denom = self.sqrt(stable);
        self.div(a, denom)
    }

    /// Sum of elementwise products of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p, None)
    }
}

fn dims2(shape: &[usize], what: &str) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "{what} expects rank 2, got {shape:?}");
    (shape[0], shape[1])
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Calls `f` with the flat indices of each lane along the reduce axis and
/// the lane's compact index in the reduced output.
fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&[usize], usize)) {
    let mut lane = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = o * len * inner + j * inner + i;
            }
            f(&lane, o * inner + i);
        }
    }
}

/// Materializes `t` broadcast to `out_shape`.
fn expand(t: &Tensor, out_shape: &[usize]) -> Tensor {
    if t.shape() == out_shape {
        return t.clone();
    }
    let bstrides = broadcast_strides(t.shape(), out_shape);
    let ostrides = strides_of(out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];
    for (flat, slot) in data.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..out_shape.len() {
            let coord = rem / ostrides[d];
            rem %= ostrides[d];
            src += coord * bstrides[d];
        }
        *slot = t.data()[src];
    }
    Tensor::from_vec(out_shape, data)
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += av * row[j];
            }
        }
    }
    c
}

/// `a[m,n] . b[k,n]^T -> [m,k]`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut s = 0.0;
            for p in 0..n {
                s += a[i * n + p] * b[j * n + p];
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// `a[m,k]^T . g[m,n] -> [k,n]`.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &g[i * n..(i + 1) * n];
            let out = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                out[j] += av * row[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

// Tensor helpers only the tape needs.
impl Tensor {
    fn zip3(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        Tensor::from_vec(
            self.shape(),
            self.data()
                .iter()
                .zip(other.data().iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    fn zip3_pair(&self, x: &Tensor, y: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        Tensor::from_vec(
            self.shape(),
            self.data()
                .iter()
                .zip(x.data().iter())
                .zip(y.data().iter())
                .map(|((&a, &b), &c)| f(a, b, c))
                .collect(),
        )
    }
}

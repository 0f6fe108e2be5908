//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus whatever it needs for the backward pass. Calling
//! [`Graph::backward`] on a scalar (1×1) node walks the tape in reverse and
//! accumulates gradients into every node that depends on a parameter leaf.
//!
//! Token matrices are processed in batches: `B` samples of `n` tokens are
//! stacked into a `(B·n)×d` matrix. Row-wise operations (projections,
//! LayerNorm, FFN) are batch-agnostic; attention takes the block size `n`
//! so that tokens only attend within their own sample.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    SumSq(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
    PowerNorm {
        x: Var,
        scale: Vec<f64>,
        energy: Vec<f64>,
    },
    StraightThrough(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `softmax(q·kᵀ·scale)·v` for a single head; returns the output and the
/// attention weights.
pub fn attention_head(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    scale: f64,
) -> (Mat, Mat) {
    let scores = q.dot(&k.t()) * scale;
    let probs = softmax_rows(&scores);
    (probs.dot(&v), probs)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced on tape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that does not receive gradients (data, noise, positional codes).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// `a + 1·row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        assert!(rr == 1 && cr == ca, "add_row: {ra}x{ca} + {rr}x{cr}");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Row-major reshape (element order preserved).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count mismatch");
        let data: Vec<f64> = src.iter().cloned().collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("reshape");
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Sum of squared entries, as a 1×1 node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|v| v * v).sum::<f64>();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), s), Op::SumSq(a), ng)
    }

    /// Per-row standardization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.dim();
        assert_eq!(self.shape(gain), (1, d), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, d), "layer_norm bias shape");
        let mut xhat = Mat::zeros((rows, d));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(xhat.row_mut(r))
                .and(&row)
                .for_each(|h, &v| *h = (v - mean) * is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Block-diagonal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(B·block)×d`; each consecutive group of `block` rows
    /// forms one sample and each of the `heads` column slices of width
    /// `d/heads` one head. Scores are scaled by `1/√(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, block: usize, heads: usize) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(self.shape(k), (rows, d), "attention: k shape");
        assert_eq!(self.shape(v), (rows, d), "attention: v shape");
        assert!(block > 0 && rows % block == 0, "attention: block size");
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide d");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros((rows, d));
        let mut probs = Vec::with_capacity(rows / block * heads);
        for b in 0..rows / block {
            let r = b * block..(b + 1) * block;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let (o, p) = attention_head(
                    qv.slice(s![r.clone(), c.clone()]),
                    kv.slice(s![r.clone(), c.clone()]),
                    vv.slice(s![r.clone(), c.clone()]),
                    scale,
                );
                out.slice_mut(s![r.clone(), c]).assign(&o);
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                block,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Scales each row of `x` (read as `c/2` complex symbols in interleaved
    /// re/im order) to unit mean squared symbol magnitude.
    pub fn power_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert!(cols % 2 == 0, "power_norm: odd row length");
        let n_sym = (cols / 2) as f64;
        let mut value = xv.clone();
        let mut scale = Vec::with_capacity(rows);
        let mut energy = Vec::with_capacity(rows);
        for mut row in value.rows_mut() {
            let e = row.iter().map(|v| v * v).sum::<f64>();
            assert!(e > 0.0, "power_norm: zero vector");
            let c = (n_sym / e).sqrt();
            row.mapv_inplace(|v| v * c);
            scale.push(c);
            energy.push(e);
        }
        let ng = self.ng(x);
        self.push(value, Op::PowerNorm { x, scale, energy }, ng)
    }

    /// Replaces the forward value of `x` with `value` while passing the
    /// gradient through unchanged (straight-through estimator).
    pub fn straight_through(&mut self, x: Var, value: Mat) -> Var {
        assert_eq!(self.shape(x), value.dim(), "straight_through shape");
        let ng = self.ng(x);
        self.push(value, Op::StraightThrough(x), ng)
    }

    /// Gradient of `v` after [`Graph::backward`], if it received one.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be 1x1");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                let data: Vec<f64> = g.iter().cloned().collect();
                self.accumulate(grads, *a, Mat::from_shape_vec((r, c), data).expect("reshape"));
            }
            Op::SumSq(a) => {
                let ga = self.value(*a) * (2.0 * g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*gain) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gain, gg);
                }
                if self.ng(*bias) {
                    self.accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let d = xhat.ncols() as f64;
                    let dxhat = g * self.value(*gain);
                    let mut gx = Mat::zeros(xhat.dim());
                    for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let k = inv_std[r] / d;
                        Zip::from(&mut out)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = k * (d * a - sum_dh - b * sum_dh_xh));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                block,
                heads,
                probs,
            } => {
                let (rows, d) = self.shape(*q);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = Mat::zeros((rows, d));
                let mut gk = Mat::zeros((rows, d));
                let mut gv = Mat::zeros((rows, d));
                for b in 0..rows / block {
                    let r = b * block..(b + 1) * block;
                    for h in 0..*heads {
                        let c = h * dh..(h + 1) * dh;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![r.clone(), c.clone()]);
                        gv.slice_mut(s![r.clone(), c.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(s![r.clone(), c.clone()]).t());
                        let mut ds = p * &dp;
                        let row_dot = ds.sum_axis(Axis(1));
                        Zip::from(ds.rows_mut())
                            .and(p.rows())
                            .and(&row_dot)
                            .for_each(|mut dsr, pr, &rd| {
                                Zip::from(&mut dsr).and(&pr).for_each(|x, &pv| *x -= pv * rd)
                            });
                        ds *= scale;
                        gq.slice_mut(s![r.clone(), c.clone()])
                            .assign(&ds.dot(&kv.slice(s![r.clone(), c.clone()])));
                        gk.slice_mut(s![r.clone(), c.clone()])
                            .assign(&ds.t().dot(&qv.slice(s![r.clone(), c])));
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::PowerNorm { x, scale, energy } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.dim());
                for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let proj = gr.dot(&xr) / energy[r];
                    let c = scale[r];
                    Zip::from(&mut out)
                        .and(&gr)
                        .and(&xr)
                        .for_each(|o, &gi, &xi| *o = c * (gi - xi * proj));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::StraightThrough(x) => self.accumulate(grads, *x, g.clone()),
        }
    }
}

//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; [`Var`] is an
//! index into that list. Construction order is topological by construction, so
//! [`Tape::backward`] is a single reverse sweep accumulating adjoints. One
//! tape lives for one sample's forward/backward and is then dropped.
//!
//! Two kinds of leaves exist: constants (inputs, targets, frozen-teacher
//! outputs — no gradient is kept) and parameters, tagged with the [`ParamId`]
//! of the weight they were loaded from so the optimizer can route gradients
//! back. Loss primitives that mix logits with fixed targets are fused single
//! nodes with hand-written adjoints; each derivation is noted on the op.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};

use crate::kernels;

/// Dynamic-rank `f64` tensor — the only value type on the tape.
pub type Arr = ArrayD<f64>;

/// Stable identity of a trainable weight within a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Direction of a KL divergence between a tape-computed distribution `p` and a
/// fixed reference `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(p ‖ q)`: the live distribution leads.
    LiveFirst,
    /// `KL(q ‖ p)`: the fixed reference leads.
    FixedFirst,
}

/// Denominator convention for the overlap (Dice) loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceKind {
    /// `1 - (2Σpt + ε) / (Σp + Σt + ε)` — the usual form for hard targets.
    Linear,
    /// `1 - (2Σpt + ε) / (Σp² + Σt² + ε)` — exactly zero *and* stationary at
    /// `p == t`, which makes it the right form against soft targets.
    Squared,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        /// im2col of the input, kept from the forward pass for the adjoint.
        cols: ndarray::Array2<f64>,
    },
    BilinearUp(Var),
    Reshape(Var),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    BceElem {
        logits: Var,
        targets: Arr,
    },
    BceMeanRows {
        logits: Var,
        targets: Arr,
    },
    DiceRows {
        logits: Var,
        targets: Arr,
        kind: DiceKind,
        eps: f64,
    },
    FocalElem {
        logits: Var,
        targets: Arr,
        gamma: f64,
    },
    BernoulliKlElem {
        logits: Var,
        reference: Arr,
    },
    SoftmaxKlRows {
        logits: Var,
        reference: Arr,
        direction: KlDirection,
    },
    SoftmaxCeRows {
        logits: Var,
        labels: Vec<usize>,
    },
    CosineDistRows {
        x: Var,
        reference: Arr,
    },
}

struct Node {
    op: Op,
    val: Arr,
    pid: Option<ParamId>,
}

/// Adjoints from one [`Tape::backward`] sweep.
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Arr> {
        self.by_node[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const PROB_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, val: Arr) -> Var {
        self.nodes.push(Node {
            op,
            val,
            pid: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value of a node (the forward result).
    pub fn val(&self, v: Var) -> &Arr {
        &self.nodes[v.0].val
    }

    /// A leaf with no gradient: inputs, targets, frozen-teacher values.
    pub fn constant(&mut self, a: Arr) -> Var {
        self.push(Op::Leaf, a)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    /// A trainable leaf, tagged with the parameter it was loaded from.
    pub fn param(&mut self, id: ParamId, a: Arr) -> Var {
        let v = self.push(Op::Leaf, a);
        self.nodes[v.0].pid = Some(id);
        v
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "add: shape mismatch");
        let v = self.val(a) + self.val(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "sub: shape mismatch");
        let v = self.val(a) - self.val(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "mul: shape mismatch");
        let v = self.val(a) * self.val(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    /// Sum a list of same-shape vars (left fold — order is fixed).
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.val(a));
        let bv = as2(self.val(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims differ");
        let v = av.dot(&bv).into_dyn();
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        // standard-layout copy so downstream reshapes stay cheap and valid
        let v = as2(self.val(a)).t().as_standard_layout().into_owned().into_dyn();
        self.push(Op::Transpose(a), v)
    }

    /// `[m, n] + [n]` row-broadcast (bias add).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = as2(self.val(a));
        let bv = self.val(bias);
        assert_eq!(bv.ndim(), 1);
        assert_eq!(av.ncols(), bv.len(), "add_row: bias length mismatch");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&av + &b1).into_dyn();
        self.push(Op::AddRow(a, bias), v)
    }

    /// `x·Wᵀ + b` for row-major activations `[m, d_in]`, weight `[d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let wt = self.transpose(w);
        let xw = self.matmul(x, wt);
        self.add_row(xw, b)
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(kernels::sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = as2(self.val(a));
        let mut v = x.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|t| (t - m).exp());
            let s = row.sum();
            row.mapv_inplace(|t| t / s);
        }
        self.push(Op::SoftmaxRows(a), v.into_dyn())
    }

    /// Per-row layer normalisation with affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = as2(self.val(x));
        let g = self.val(gamma);
        let b = self.val(beta);
        assert_eq!(g.ndim(), 1);
        assert_eq!(b.ndim(), 1);
        assert_eq!(xv.ncols(), g.len());
        assert_eq!(xv.ncols(), b.len());
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, t) in row.iter_mut().enumerate() {
                *t = (*t - mu) * inv * g[j] + b[j];
            }
        }
        self.push(Op::LayerNormRows { x, gamma, beta, eps }, out.into_dyn())
    }

    // ---- structured ops ----

    /// 2-D convolution: `x [C,H,W]`, `w [O,C,kh,kw]`, `b [O]` → `[O,oh,ow]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.val(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let wv = self.val(w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bv = self.val(b);
        let (o, c, kh, kw) = wv.dim();
        assert_eq!(c, xv.dim().0, "conv2d: channel mismatch");
        assert_eq!(bv.len(), o);
        let (_, h, wdt) = xv.dim();
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(wdt, kw, stride, pad);
        let cols = kernels::im2col(&xv, kh, kw, stride, pad);
        let wmat = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
        let mut y = wmat.dot(&cols); // [O, oh*ow]
        for (oi, mut row) in y.rows_mut().into_iter().enumerate() {
            row += bv[oi];
        }
        let y = y.into_shape_with_order((o, oh, ow)).unwrap().into_dyn();
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            y,
        )
    }

    /// Bilinear resize of `[C,h,w]` to `[C,out_h,out_w]` (half-pixel centers).
    pub fn bilinear_up(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.val(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (_, h, w) = xv.dim();
        let plan = kernels::bilinear_plan(h, w, out_h, out_w);
        let y = kernels::bilinear_apply(&plan, &xv, out_h, out_w).into_dyn();
        self.push(Op::BilinearUp(x), y)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .val(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(Op::Reshape(x), v)
    }

    /// Gather rows of a 2-D value (duplicates allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = as2(self.val(x));
        let n = xv.nrows();
        for &i in idx {
            assert!(i < n, "select_rows: index {i} out of range {n}");
        }
        let v = xv.select(Axis(0), idx).into_dyn();
        self.push(
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            v,
        )
    }

    /// Contiguous column slice of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = as2(self.val(x));
        assert!(start + len <= xv.ncols(), "slice_cols out of range");
        let v = xv
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned()
            .into_dyn();
        self.push(Op::SliceCols { x, start, len }, v)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|&p| self.val(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            v,
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = ndarray::arr0(self.val(x).sum()).into_dyn();
        self.push(Op::SumAll(x), v)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.val(x).len() as f64;
        let v = ndarray::arr0(self.val(x).sum() / n).into_dyn();
        self.push(Op::MeanAll(x), v)
    }

    // ---- fused loss primitives ----
    //
    // Targets and references are fixed arrays (no gradient flows into them);
    // gradients are taken with respect to the logits/embeddings only.

    /// Elementwise binary cross-entropy on logits; adjoint `σ(x) - t`.
    pub fn bce_elem(&mut self, logits: Var, targets: Arr) -> Var {
        assert_eq!(self.val(logits).shape(), targets.shape());
        let v = ndarray::Zip::from(self.val(logits))
            .and(&targets)
            .map_collect(|&x, &t| kernels::bce_with_logits(x, t));
        self.push(Op::BceElem { logits, targets }, v)
    }

    /// Per-row mean binary cross-entropy: `[k, n]` logits → `[k]`.
    pub fn bce_mean_rows(&mut self, logits: Var, targets: Arr) -> Var {
        assert_eq!(self.val(logits).shape(), targets.shape());
        let x = as2(self.val(logits));
        let t = as2(&targets);
        let n = x.ncols() as f64;
        let v = ndarray::Array1::from_iter(
            x.rows()
                .into_iter()
                .zip(t.rows())
                .map(|(xr, tr)| {
                    xr.iter()
                        .zip(tr.iter())
                        .map(|(&xi, &ti)| kernels::bce_with_logits(xi, ti))
                        .sum::<f64>()
                        / n
                }),
        )
        .into_dyn();
        self.push(Op::BceMeanRows { logits, targets }, v)
    }

    /// Per-row overlap (Dice) loss on logits: `[k, n]` → `[k]`.
    ///
    /// With `p = σ(x)`, `N = 2Σpt + ε` and `D` per [`DiceKind`], the value is
    /// `1 - N/D` and the adjoint w.r.t. `x_i` is
    /// `-(∂N/∂p_i·D - N·∂D/∂p_i)/D² · p_i(1-p_i)`,
    /// where `∂N/∂p_i = 2t_i` and `∂D/∂p_i` is `1` (linear) or `2p_i` (squared).
    pub fn dice_rows(&mut self, logits: Var, targets: Arr, kind: DiceKind, eps: f64) -> Var {
        assert_eq!(self.val(logits).shape(), targets.shape());
        let x = as2(self.val(logits));
        let t = as2(&targets);
        let v = ndarray::Array1::from_iter(x.rows().into_iter().zip(t.rows()).map(|(xr, tr)| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (&xi, &ti) in xr.iter().zip(tr.iter()) {
                let p = kernels::sigmoid(xi);
                num += 2.0 * p * ti;
                den += match kind {
                    DiceKind::Linear => p + ti,
                    DiceKind::Squared => p * p + ti * ti,
                };
            }
            1.0 - (num + eps) / (den + eps)
        }))
        .into_dyn();
        self.push(
            Op::DiceRows {
                logits,
                targets,
                kind,
                eps,
            },
            v,
        )
    }

    /// Elementwise focal binary cross-entropy on logits:
    /// `-[t(1-p)^γ ln p + (1-t) p^γ ln(1-p)]`, `p = σ(x)`.
    ///
    /// Adjoint: for the `t=1` part `p(1-p)^γ(γ ln p) - (1-p)^{γ+1}` … assembled
    /// per element from both halves (`ln` terms evaluated via log-sigmoid so
    /// extreme logits stay finite).
    pub fn focal_elem(&mut self, logits: Var, targets: Arr, gamma: f64) -> Var {
        assert_eq!(self.val(logits).shape(), targets.shape());
        let v = ndarray::Zip::from(self.val(logits))
            .and(&targets)
            .map_collect(|&x, &t| {
                let p = kernels::sigmoid(x);
                let lp = kernels::log_sigmoid(x);
                let lq = kernels::log_sigmoid(-x);
                -(t * (1.0 - p).powf(gamma) * lp + (1.0 - t) * p.powf(gamma) * lq)
            });
        self.push(
            Op::FocalElem {
                logits,
                targets,
                gamma,
            },
            v,
        )
    }

    /// Elementwise `KL(r ‖ σ(x))` for a fixed reference probability `r`.
    ///
    /// Value `r ln(r/s) + (1-r) ln((1-r)/(1-s))`; adjoint on the logit is
    /// simply `s - r`.
    pub fn bernoulli_kl_elem(&mut self, logits: Var, reference: Arr) -> Var {
        assert_eq!(self.val(logits).shape(), reference.shape());
        let v = ndarray::Zip::from(self.val(logits))
            .and(&reference)
            .map_collect(|&x, &r| {
                let ls = kernels::log_sigmoid(x);
                let l1s = kernels::log_sigmoid(-x);
                let ent = ent_bit(r) + ent_bit(1.0 - r);
                ent - r * ls - (1.0 - r) * l1s
            });
        self.push(Op::BernoulliKlElem { logits, reference }, v)
    }

    /// Per-row KL between `softmax(logits)` and a fixed row-stochastic
    /// reference: `[k, n]` → `[k]`.
    ///
    /// Adjoints on the logits: live-first `p ⊙ (s - KL_row)` with
    /// `s = ln p - ln r`; fixed-first `p - r`.
    pub fn softmax_kl_rows(&mut self, logits: Var, reference: Arr, direction: KlDirection) -> Var {
        assert_eq!(self.val(logits).shape(), reference.shape());
        let x = as2(self.val(logits));
        let r = as2(&reference);
        let v = ndarray::Array1::from_iter(x.rows().into_iter().zip(r.rows()).map(|(xr, rr)| {
            let lp = log_softmax_row(xr);
            match direction {
                KlDirection::LiveFirst => lp
                    .iter()
                    .zip(rr.iter())
                    .map(|(&l, &ri)| l.exp() * (l - ri.max(PROB_EPS).ln()))
                    .sum::<f64>(),
                KlDirection::FixedFirst => lp
                    .iter()
                    .zip(rr.iter())
                    .map(|(&l, &ri)| {
                        if ri <= 0.0 {
                            0.0
                        } else {
                            ri * (ri.ln() - l)
                        }
                    })
                    .sum::<f64>(),
            }
        }))
        .into_dyn();
        self.push(
            Op::SoftmaxKlRows {
                logits,
                reference,
                direction,
            },
            v,
        )
    }

    /// Per-row softmax cross-entropy against integer labels: `[k, n]` → `[k]`.
    /// Adjoint `p - onehot`.
    pub fn softmax_ce_rows(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let x = as2(self.val(logits));
        assert_eq!(x.nrows(), labels.len());
        for &l in &labels {
            assert!(l < x.ncols(), "softmax_ce_rows: label out of range");
        }
        let v = ndarray::Array1::from_iter(
            x.rows()
                .into_iter()
                .zip(labels.iter())
                .map(|(xr, &l)| -log_softmax_row(xr)[l]),
        )
        .into_dyn();
        self.push(Op::SoftmaxCeRows { logits, labels }, v)
    }

    /// Per-row cosine distance `1 - cos(x_i, r_i)` to fixed reference rows:
    /// `[k, d]` → `[k]`.
    ///
    /// Adjoint `-(r/(‖x‖‖r‖) - cos·x/‖x‖²)`, norms clamped away from zero.
    pub fn cosine_dist_rows(&mut self, x: Var, reference: Arr) -> Var {
        assert_eq!(self.val(x).shape(), reference.shape());
        let xv = as2(self.val(x));
        let rv = as2(&reference);
        let v = ndarray::Array1::from_iter(xv.rows().into_iter().zip(rv.rows()).map(|(xr, rr)| {
            let nx = xr.dot(&xr).sqrt().max(PROB_EPS);
            let nr = rr.dot(&rr).sqrt().max(PROB_EPS);
            1.0 - xr.dot(&rr) / (nx * nr)
        }))
        .into_dyn();
        self.push(Op::CosineDistRows { x, reference }, v)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Returns an adjoint per reached node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.val(root).ndim(),
            0,
            "backward root must be a scalar (0-d) value"
        );
        let mut g: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(ndarray::arr0(1.0).into_dyn());

        for i in (0..self.nodes.len()).rev() {
            let gy = match g[i].take() {
                Some(gy) => gy,
                None => continue,
            };
            self.pull(i, &gy, &mut g);
            g[i] = Some(gy);
        }
        Grads { by_node: g }
    }

    /// Iterate `(param, gradient)` pairs found by a backward sweep.
    pub fn param_grads<'a>(&'a self, grads: &'a Grads) -> BTreeMap<ParamId, &'a Arr> {
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(ga)) = (node.pid, grads.by_node[i].as_ref()) {
                // A parameter may legitimately appear as several leaves (e.g.
                // re-bound per block); accumulate if so.
                out.entry(pid)
                    .and_modify(|_e: &mut &Arr| {
                        unreachable!("parameter {pid:?} bound to multiple tape leaves")
                    })
                    .or_insert(ga);
            }
        }
        out
    }

    /// Propagate the adjoint of node `i` into its inputs.
    fn pull(&self, i: usize, gy: &Arr, g: &mut [Option<Arr>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(g, *a, gy.clone());
                acc(g, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(g, *a, gy.clone());
                acc(g, *b, gy * -1.0);
            }
            Op::Mul(a, b) => {
                acc(g, *a, gy * self.val(*b));
                acc(g, *b, gy * self.val(*a));
            }
            Op::Scale(a, c) => acc(g, *a, gy * *c),
            Op::MatMul(a, b) => {
                let gyv = as2(gy);
                let av = as2(self.val(*a));
                let bv = as2(self.val(*b));
                acc(g, *a, gyv.dot(&bv.t()).into_dyn());
                acc(g, *b, av.t().dot(&gyv).into_dyn());
            }
            Op::Transpose(a) => {
                acc(g, *a, as2(gy).t().as_standard_layout().into_owned().into_dyn())
            }
            Op::AddRow(a, bias) => {
                acc(g, *a, gy.clone());
                acc(g, *bias, as2(gy).sum_axis(Axis(0)).into_dyn());
            }
            Op::Relu(a) => {
                let mask = self.nodes[i].val.mapv(|y| if y > 0.0 { 1.0 } else { 0.0 });
                acc(g, *a, gy * &mask);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].val;
                acc(g, *a, gy * &(y * &y.mapv(|t| 1.0 - t)));
            }
            Op::SoftmaxRows(a) => {
                let y = as2(&self.nodes[i].val);
                let gyv = as2(gy);
                let mut gx = y.to_owned();
                for ((mut gxr, yr), gr) in
                    gx.rows_mut().into_iter().zip(y.rows()).zip(gyv.rows())
                {
                    let dot = yr.dot(&gr);
                    for (j, v) in gxr.iter_mut().enumerate() {
                        *v = yr[j] * (gr[j] - dot);
                    }
                }
                acc(g, *a, gx.into_dyn());
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = as2(self.val(*x));
                let gv = self.val(*gamma);
                let gyv = as2(gy);
                let n = xv.ncols() as f64;
                let mut gx = xv.to_owned();
                let mut ggamma = ndarray::Array1::<f64>::zeros(xv.ncols());
                let mut gbeta = ndarray::Array1::<f64>::zeros(xv.ncols());
                for (r, xr) in xv.rows().into_iter().enumerate() {
                    let mu = xr.sum() / n;
                    let var = xr.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = gyv.row(r);
                    // xhat and the two row means of the gamma-scaled adjoint.
                    let xhat: Vec<f64> = xr.iter().map(|t| (t - mu) * inv).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(0..)
                        .map(|(t, j): (&f64, usize)| t * gv[j])
                        .collect();
                    let m1 = dxhat.iter().sum::<f64>() / n;
                    let m2 = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n;
                    for j in 0..xv.ncols() {
                        gx[[r, j]] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        ggamma[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                    }
                }
                acc(g, *x, gx.into_dyn());
                acc(g, *gamma, ggamma.into_dyn());
                acc(g, *beta, gbeta.into_dyn());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let wv = self.val(*w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (o, c, kh, kw) = wv.dim();
                let xv = self.val(*x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (_, h, wdt) = xv.dim();
                let gyv = gy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (oo, oh, ow) = gyv.dim();
                debug_assert_eq!(o, oo);
                let gym = gyv.to_shape((o, oh * ow)).unwrap().to_owned();
                // dW = dY · colsᵀ ; db = row sums ; dX = col2im(Wᵀ · dY).
                let gw = gym.dot(&cols.t());
                acc(
                    g,
                    *w,
                    gw.into_shape_with_order((o, c, kh, kw)).unwrap().into_dyn(),
                );
                acc(g, *b, gym.sum_axis(Axis(1)).into_dyn());
                let wmat = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
                let gcols = wmat.t().dot(&gym);
                acc(
                    g,
                    *x,
                    kernels::col2im(&gcols.view(), c, h, wdt, kh, kw, *stride, *pad).into_dyn(),
                );
            }
            Op::BilinearUp(x) => {
                let xv = self.val(*x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (_, h, w) = xv.dim();
                let gyv = gy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (_, oh, ow) = gyv.dim();
                let plan = kernels::bilinear_plan(h, w, oh, ow);
                acc(g, *x, kernels::bilinear_apply_t(&plan, &gyv, h, w).into_dyn());
            }
            Op::Reshape(x) => {
                let shape = self.val(*x).shape().to_vec();
                acc(
                    g,
                    *x,
                    gy.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .unwrap(),
                );
            }
            Op::SelectRows { x, idx } => {
                let xv = as2(self.val(*x));
                let gyv = as2(gy);
                let mut gx = ndarray::Array2::<f64>::zeros(xv.dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(i);
                    row += &gyv.row(k);
                }
                acc(g, *x, gx.into_dyn());
            }
            Op::SliceCols { x, start, len } => {
                let xv = as2(self.val(*x));
                let gyv = as2(gy);
                let mut gx = ndarray::Array2::<f64>::zeros(xv.dim());
                gx.slice_axis_mut(Axis(1), Slice::from(*start..start + len))
                    .assign(&gyv);
                acc(g, *x, gx.into_dyn());
            }
            Op::Concat { parts, axis } => {
                let mut off = 0;
                for &p in parts {
                    let extent = self.val(p).shape()[*axis];
                    let gp = gy
                        .slice_axis(Axis(*axis), Slice::from(off..off + extent))
                        .to_owned();
                    acc(g, p, gp);
                    off += extent;
                }
            }
            Op::SumAll(x) => {
                let s = gy.first().copied().unwrap();
                acc(g, *x, Arr::from_elem(self.val(*x).raw_dim(), s));
            }
            Op::MeanAll(x) => {
                let n = self.val(*x).len() as f64;
                let s = gy.first().copied().unwrap() / n;
                acc(g, *x, Arr::from_elem(self.val(*x).raw_dim(), s));
            }
            Op::BceElem { logits, targets } => {
                let gx = ndarray::Zip::from(self.val(*logits))
                    .and(targets)
                    .and(gy)
                    .map_collect(|&x, &t, &gg| gg * (kernels::sigmoid(x) - t));
                acc(g, *logits, gx);
            }
            Op::BceMeanRows { logits, targets } => {
                let x = as2(self.val(*logits));
                let t = as2(targets);
                let n = x.ncols() as f64;
                let gyv = gy.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = x.to_owned();
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let c = gyv[r] / n;
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = c * (kernels::sigmoid(x[[r, j]]) - t[[r, j]]);
                    }
                }
                acc(g, *logits, gx.into_dyn());
            }
            Op::DiceRows {
                logits,
                targets,
                kind,
                eps,
            } => {
                let x = as2(self.val(*logits));
                let t = as2(targets);
                let gyv = gy.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = x.to_owned();
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    let probs: Vec<f64> =
                        x.row(r).iter().map(|&xi| kernels::sigmoid(xi)).collect();
                    for (j, &p) in probs.iter().enumerate() {
                        let ti = t[[r, j]];
                        num += 2.0 * p * ti;
                        den += match kind {
                            DiceKind::Linear => p + ti,
                            DiceKind::Squared => p * p + ti * ti,
                        };
                    }
                    let num = num + eps;
                    let den = den + eps;
                    for (j, v) in row.iter_mut().enumerate() {
                        let p = probs[j];
                        let ti = t[[r, j]];
                        let dnum = 2.0 * ti;
                        let dden = match kind {
                            DiceKind::Linear => 1.0,
                            DiceKind::Squared => 2.0 * p,
                        };
                        let dl_dp = -(dnum * den - num * dden) / (den * den);
                        *v = gyv[r] * dl_dp * p * (1.0 - p);
                    }
                }
                acc(g, *logits, gx.into_dyn());
            }
            Op::FocalElem {
                logits,
                targets,
                gamma,
            } => {
                let gx = ndarray::Zip::from(self.val(*logits))
                    .and(targets)
                    .and(gy)
                    .map_collect(|&x, &t, &gg| {
                        let p = kernels::sigmoid(x);
                        let lp = kernels::log_sigmoid(x);
                        let lq = kernels::log_sigmoid(-x);
                        let q = 1.0 - p;
                        // d/dx of the t=1 half: γ p q^γ ln p - q^{γ+1};
                        // of the t=0 half: -γ q p^γ ln(1-p) + p^{γ+1}.
                        let d1 = gamma * p * q.powf(*gamma) * lp - q.powf(gamma + 1.0);
                        let d0 = -gamma * q * p.powf(*gamma) * lq + p.powf(gamma + 1.0);
                        gg * (t * d1 + (1.0 - t) * d0)
                    });
                acc(g, *logits, gx);
            }
            Op::BernoulliKlElem { logits, reference } => {
                let gx = ndarray::Zip::from(self.val(*logits))
                    .and(reference)
                    .and(gy)
                    .map_collect(|&x, &r, &gg| gg * (kernels::sigmoid(x) - r));
                acc(g, *logits, gx);
            }
            Op::SoftmaxKlRows {
                logits,
                reference,
                direction,
            } => {
                let x = as2(self.val(*logits));
                let r = as2(reference);
                let gyv = gy.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = x.to_owned();
                for (k, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let lp = log_softmax_row(x.row(k));
                    match direction {
                        KlDirection::LiveFirst => {
                            let s: Vec<f64> = lp
                                .iter()
                                .zip(r.row(k).iter())
                                .map(|(&l, &ri)| l - ri.max(PROB_EPS).ln())
                                .collect();
                            let kl: f64 =
                                lp.iter().zip(s.iter()).map(|(&l, &si)| l.exp() * si).sum();
                            for (j, v) in row.iter_mut().enumerate() {
                                *v = gyv[k] * lp[j].exp() * (s[j] - kl);
                            }
                        }
                        KlDirection::FixedFirst => {
                            for (j, v) in row.iter_mut().enumerate() {
                                *v = gyv[k] * (lp[j].exp() - r[[k, j]]);
                            }
                        }
                    }
                }
                acc(g, *logits, gx.into_dyn());
            }
            Op::SoftmaxCeRows { logits, labels } => {
                let x = as2(self.val(*logits));
                let gyv = gy.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = x.to_owned();
                for (k, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let lp = log_softmax_row(x.row(k));
                    for (j, v) in row.iter_mut().enumerate() {
                        let onehot = if j == labels[k] { 1.0 } else { 0.0 };
                        *v = gyv[k] * (lp[j].exp() - onehot);
                    }
                }
                acc(g, *logits, gx.into_dyn());
            }
            Op::CosineDistRows { x, reference } => {
                let xv = as2(self.val(*x));
                let rv = as2(reference);
                let gyv = gy.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = xv.to_owned();
                for (k, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let xr = xv.row(k);
                    let rr = rv.row(k);
                    let nx = xr.dot(&xr).sqrt().max(PROB_EPS);
                    let nr = rr.dot(&rr).sqrt().max(PROB_EPS);
                    let cos = xr.dot(&rr) / (nx * nr);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = gyv[k] * -(rr[j] / (nx * nr) - cos * xr[j] / (nx * nx));
                    }
                }
                acc(g, *x, gx.into_dyn());
            }
        }
    }
}

/// `0·ln 0 = 0` convention for entropy terms.
fn ent_bit(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r.ln()
    }
}

fn log_softmax_row(xr: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = xr.iter().map(|&t| (t - m).exp()).sum::<f64>().ln() + m;
    xr.iter().map(|&t| t - lse).collect()
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a 2-d value")
}

fn acc(g: &mut [Option<Arr>], v: Var, delta: Arr) {
    match &mut g[v.0] {
        Some(a) => *a += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Finite-difference verification helpers used across the test suite.
pub mod check {
    use super::{Arr, Tape, Var};

    /// Central-difference gradient of `f` at `x0`, elementwise.
    pub fn finite_diff<F: FnMut(&Arr) -> f64>(mut f: F, x0: &Arr, eps: f64) -> Arr {
        let mut g = Arr::zeros(x0.raw_dim());
        let mut x = x0.clone();
        for i in 0..x0.len() {
            let orig = x.as_slice_mut().unwrap()[i];
            x.as_slice_mut().unwrap()[i] = orig + eps;
            let fp = f(&x);
            x.as_slice_mut().unwrap()[i] = orig - eps;
            let fm = f(&x);
            x.as_slice_mut().unwrap()[i] = orig;
            g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    /// Build a scalar-rooted graph from one input leaf and compare the tape
    /// gradient against central differences. `build` must be deterministic.
    ///
    /// Tolerance is on `|a-b| / max(1, |a|, |b|)` per element.
    pub fn gradcheck<B>(build: B, x0: &Arr, eps: f64, tol: f64)
    where
        B: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let root = build(&mut tape, x);
        assert_eq!(tape.val(root).ndim(), 0, "gradcheck root must be scalar");
        let grads = tape.backward(root);
        let analytic = grads
            .wrt(x)
            .cloned()
            .unwrap_or_else(|| Arr::zeros(x0.raw_dim()));

        let numeric = finite_diff(
            |xv| {
                let mut t = Tape::new();
                let xi = t.constant(xv.clone());
                let r = build(&mut t, xi);
                *t.val(r).first().unwrap()
            },
            x0,
            eps,
        );

        for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let denom = 1.0_f64.max(a.abs()).max(n.abs());
            assert!(
                ((a - n) / denom).abs() <= tol,
                "gradcheck mismatch at flat index {i}: analytic {a:.9e} vs numeric {n:.9e}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::check::gradcheck;
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr0, arr1, arr2, Array};
    use rand::RngExt;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut r = crate::rng::derive(seed, "tape-test", 0);
        Array::from_shape_fn(IxDyn(shape), |_| r.random_range(-1.5..1.5))
    }

    fn rand_probs(shape: &[usize], seed: u64) -> Arr {
        randn(shape, seed).mapv(|x| kernels::sigmoid(1.3 * x))
    }

    #[test]
    fn forward_values_small_cases() {
        let mut t = Tape::new();
        let a = t.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.constant(arr2(&[[0.5, -1.0], [2.0, 0.0]]).into_dyn());
        let c = t.matmul(a, b);
        assert_eq!(
            t.val(c).clone(),
            arr2(&[[4.5, -1.0], [9.5, -3.0]]).into_dyn()
        );

        let s = t.softmax_rows(a);
        let row0 = as2(t.val(s)).row(0).to_owned();
        let e = (1.0f64).exp() / ((1.0f64).exp() + (2.0f64).exp());
        assert_abs_diff_eq!(row0[0], e, epsilon = 1e-12);
        assert_abs_diff_eq!(row0.sum(), 1.0, epsilon = 1e-12);

        // BCE at logit 0 vs target 1 is ln 2; focal with γ=2 scales by (1-p)^γ.
        let l = t.constant(arr1(&[0.0]).into_dyn());
        let bce = t.bce_elem(l, arr1(&[1.0]).into_dyn());
        assert_abs_diff_eq!(t.val(bce)[0], std::f64::consts::LN_2, epsilon = 1e-12);
        let foc = t.focal_elem(l, arr1(&[1.0]).into_dyn(), 2.0);
        assert_abs_diff_eq!(t.val(foc)[0], 0.25 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn bernoulli_kl_zero_at_match_and_value() {
        let mut t = Tape::new();
        // σ(0.4) as reference against logit 0.4: exact match ⇒ KL = 0.
        let l = t.constant(arr1(&[0.4]).into_dyn());
        let r = arr1(&[kernels::sigmoid(0.4)]).into_dyn();
        let kl = t.bernoulli_kl_elem(l, r);
        assert_abs_diff_eq!(t.val(kl)[0], 0.0, epsilon = 1e-14);

        // Hand value: r = 0.9 vs s = σ(0) = 0.5.
        let l2 = t.constant(arr1(&[0.0]).into_dyn());
        let kl2 = t.bernoulli_kl_elem(l2, arr1(&[0.9]).into_dyn());
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert_abs_diff_eq!(t.val(kl2)[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn dice_squared_is_zero_and_flat_at_equality() {
        // Soft target equal to the prediction: squared-denominator form is 0
        // with zero gradient; linear form is neither.
        let logits = randn(&[2, 6], 5);
        let probs = logits.mapv(kernels::sigmoid);

        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let d = t.dice_rows(l, probs.clone(), DiceKind::Squared, 1e-6);
        let s = t.sum_all(d);
        assert_abs_diff_eq!(*t.val(s).first().unwrap(), 0.0, epsilon = 1e-9);
        let g = t.backward(s);
        let gl = g.wrt(l).unwrap();
        assert!(gl.iter().all(|&v| v.abs() < 1e-9));

        let mut t2 = Tape::new();
        let l2 = t2.constant(logits);
        let d2 = t2.dice_rows(l2, probs, DiceKind::Linear, 1e-6);
        let s2 = t2.sum_all(d2);
        assert!(t.val(s).first().unwrap().abs() < *t2.val(s2).first().unwrap());
    }

    #[test]
    fn gradcheck_arithmetic_and_linear_algebra() {
        let w = randn(&[3, 4], 11);
        let x0 = randn(&[2, 3], 12);

        gradcheck(
            |t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w);
                let y = t.relu(y);
                t.sum_all(y)
            },
            &x0,
            1e-5,
            1e-6,
        );

        // Through the weight side of a matmul plus transpose.
        let a = randn(&[2, 4], 13);
        gradcheck(
            |t, x| {
                let a = t.constant(a.clone());
                let xt = t.transpose(x);
                let y = t.matmul(xt, a);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            &x0,
            1e-5,
            1e-6,
        );

        let bias = randn(&[4], 14);
        gradcheck(
            |t, x| {
                let w = t.constant(w.clone());
                let b = t.constant(bias.clone());
                let y = t.matmul(x, w);
                let y = t.add_row(y, b);
                let y = t.sigmoid(y);
                t.mean_all(y)
            },
            &x0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_softmax_layernorm() {
        let x0 = randn(&[3, 5], 21);
        let coef = randn(&[3, 5], 22);
        gradcheck(
            |t, x| {
                let y = t.softmax_rows(x);
                let c = t.constant(coef.clone());
                let z = t.mul(y, c);
                t.sum_all(z)
            },
            &x0,
            1e-5,
            1e-6,
        );

        let gamma = randn(&[5], 23).mapv(|v| 1.0 + 0.3 * v);
        let beta = randn(&[5], 24);
        gradcheck(
            |t, x| {
                let gm = t.constant(gamma.clone());
                let bt = t.constant(beta.clone());
                let y = t.layer_norm_rows(x, gm, bt, 1e-5);
                let c = t.constant(coef.clone());
                let z = t.mul(y, c);
                t.sum_all(z)
            },
            &x0,
            1e-5,
            1e-5,
        );

        // And through gamma/beta themselves.
        let xfix = randn(&[3, 5], 25);
        gradcheck(
            |t, g| {
                let x = t.constant(xfix.clone());
                let bt = t.constant(beta.clone());
                let y = t.layer_norm_rows(x, g, bt, 1e-5);
                t.sum_all(y)
            },
            &gamma.clone(),
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_conv_bilinear() {
        let x0 = randn(&[2, 6, 5], 31);
        let w = randn(&[3, 2, 3, 3], 32) * 0.5;
        let b = randn(&[3], 33);
        gradcheck(
            |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(x, wv, bv, 2, 1);
                let y = t.relu(y);
                t.sum_all(y)
            },
            &x0,
            1e-5,
            1e-6,
        );
        // Weight-side conv gradient.
        gradcheck(
            |t, wv| {
                let x = t.constant(x0.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(x, wv, bv, 2, 1);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            &w.clone(),
            1e-5,
            1e-6,
        );

        let coef = randn(&[2, 7, 9], 34);
        gradcheck(
            |t, x| {
                let y = t.bilinear_up(x, 7, 9);
                let c = t.constant(coef.clone());
                let z = t.mul(y, c);
                t.sum_all(z)
            },
            &x0.clone(),
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_structural_ops() {
        let x0 = randn(&[4, 3], 41);
        gradcheck(
            |t, x| {
                let sel = t.select_rows(x, &[2, 0, 2]);
                let y = t.mul(sel, sel);
                t.sum_all(y)
            },
            &x0,
            1e-5,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let sl = t.slice_cols(x, 1, 2);
                let y = t.sigmoid(sl);
                t.sum_all(y)
            },
            &x0,
            1e-5,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let other = t.constant(randn(&[2, 3], 42));
                let cat = t.concat(&[x, other], 0);
                let y = t.mul(cat, cat);
                t.mean_all(y)
            },
            &x0,
            1e-5,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let r = t.reshape(x, &[2, 6]);
                let y = t.relu(r);
                t.sum_all(y)
            },
            &x0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_fused_losses() {
        let x0 = randn(&[3, 7], 51);
        let targets = rand_probs(&[3, 7], 52).mapv(|p| if p > 0.5 { 1.0 } else { 0.0 });
        let soft = rand_probs(&[3, 7], 53);

        gradcheck(
            |t, x| {
                let v = t.bce_elem(x, targets.clone());
                t.sum_all(v)
            },
            &x0,
            1e-5,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let v = t.bce_mean_rows(x, soft.clone());
                t.sum_all(v)
            },
            &x0,
            1e-5,
            1e-6,
        );
        for kind in [DiceKind::Linear, DiceKind::Squared] {
            gradcheck(
                |t, x| {
                    let v = t.dice_rows(x, targets.clone(), kind, 1.0);
                    t.sum_all(v)
                },
                &x0,
                1e-5,
                1e-6,
            );
        }
        gradcheck(
            |t, x| {
                let v = t.focal_elem(x, targets.clone(), 2.0);
                t.sum_all(v)
            },
            &x0,
            1e-5,
            1e-6,
        );
        gradcheck(
            |t, x| {
                let v = t.bernoulli_kl_elem(x, soft.clone());
                t.sum_all(v)
            },
            &x0,
            1e-5,
            1e-6,
        );

        // Row-stochastic references for the softmax KLs.
        let mut refp = rand_probs(&[3, 7], 54);
        for mut row in as2_mut(&mut refp).rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        for dir in [KlDirection::LiveFirst, KlDirection::FixedFirst] {
            gradcheck(
                |t, x| {
                    let v = t.softmax_kl_rows(x, refp.clone(), dir);
                    t.sum_all(v)
                },
                &x0,
                1e-5,
                1e-6,
            );
        }
        gradcheck(
            |t, x| {
                let v = t.softmax_ce_rows(x, vec![0, 3, 6]);
                t.sum_all(v)
            },
            &x0,
            1e-5,
            1e-6,
        );

        let emb = randn(&[4, 6], 55);
        let target_emb = randn(&[4, 6], 56);
        gradcheck(
            |t, x| {
                let v = t.cosine_dist_rows(x, target_emb.clone());
                t.sum_all(v)
            },
            &emb,
            1e-5,
            1e-6,
        );
    }

    fn as2_mut(a: &mut Arr) -> ndarray::ArrayViewMut2<'_, f64> {
        a.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap()
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = sum(x ⊙ x) via two uses of the same var: dy/dx = 2x.
        let x0 = randn(&[3, 3], 61);
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let y = t.mul(x, x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        let gx = g.wrt(x).unwrap();
        for (a, b) in gx.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-12);
        }
    }

    #[test]
    fn param_leaves_route_gradients_constants_do_not() {
        let mut t = Tape::new();
        let p = t.param(ParamId(7), arr1(&[1.0, -2.0]).into_dyn());
        let c = t.constant(arr1(&[3.0, 5.0]).into_dyn());
        let y = t.mul(p, c);
        let s = t.sum_all(y);
        let g = t.backward(s);
        let pg = t.param_grads(&g);
        assert_eq!(pg.len(), 1);
        assert_eq!(
            pg.get(&ParamId(7)).unwrap().as_slice().unwrap(),
            &[3.0, 5.0]
        );
        // Constants accumulate adjoints but expose no parameter id.
        assert!(g.wrt(c).is_some());
    }

    #[test]
    fn backward_root_scalar_seed() {
        let mut t = Tape::new();
        let x = t.constant(arr0(2.0).into_dyn());
        let y = t.scale(x, 3.0);
        let g = t.backward(y);
        assert_abs_diff_eq!(*g.wrt(x).unwrap().first().unwrap(), 3.0, epsilon = 1e-15);
    }
}

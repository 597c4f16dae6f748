//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Sequences of a
//! batch are stacked row-wise: sample `b`, position `t` lives in row
//! `b * len + t`. Attention operations take an [`AttnLayout`] that says how
//! rows map to samples and which keys each query may see.

use std::borrow::Cow;
use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Row layout of a batched attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Number of real queries per sample; later query rows are all zero.
    pub q_lens: Vec<usize>,
    /// Number of valid keys per sample; later keys are padding.
    pub key_lens: Vec<usize>,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
}

impl AttnLayout {
    fn visible(&self, b: usize, i: usize) -> usize {
        let lim = self.key_lens[b];
        if self.causal {
            lim.min(i + 1)
        } else {
            lim
        }
    }
}

/// Soft targets of the copy-aware output layer, dense per output row.
#[derive(Debug, Clone)]
pub struct CopyTargets {
    /// Target mass on vocabulary entries, `[rows, vocab]`.
    pub vocab: Mat,
    /// Target mass on source positions, `[rows, src_len]`.
    pub copy: Mat,
    /// Loss weight per row; zero on padding.
    pub weights: Vec<f64>,
    /// Vocabulary entry excluded from the generation softmax.
    pub pad_id: usize,
}

enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Dropout(NodeId, Mat),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather(NodeId, Vec<usize>),
    AttnProbs(NodeId, NodeId, Rc<AttnLayout>),
    AttnApply(NodeId, NodeId, Rc<AttnLayout>),
    HeadMean(NodeId, Rc<AttnLayout>),
    CopyLoss {
        logits: NodeId,
        gate: NodeId,
        copy: NodeId,
        targets: Rc<CopyTargets>,
        softmax: Mat,
        gate_prob: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
}

pub const LN_EPS: f64 = 1e-5;

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Graph<'a> {
    /// A graph without dropout, used for evaluation and gradient checks.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            dropout: None,
        }
    }

    pub fn with_dropout(rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            dropout: (rate > 0.0).then_some((rate, rng)),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input)
    }

    /// A parameter leaf; `index` addresses the gradient slot.
    pub fn param(&mut self, index: usize, value: &'a Mat) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(index),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `x + bias` with a `[1, n]` bias broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let v = self.value(x) + self.value(bias);
        self.push(v, Op::AddRow(x, bias))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Inverted dropout; identity when the graph has no dropout.
    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let shape = self.nodes[x.0].value.raw_dim();
        let keep = 1.0 / (1.0 - rate);
        let mask = Mat::from_shape_simple_fn(shape, || {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let v = self.value(x) * &mask;
        self.push(v, Op::Dropout(x, mask))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / cols;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|e| (e - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::Gather(table, ids))
    }

    /// Per-head attention weights `softmax(Q K^T / sqrt(d_k))` with masked
    /// keys at zero. Output row `(b * heads + h) * q_len + i`.
    pub fn attn_probs(&mut self, q: NodeId, k: NodeId, layout: Rc<AttnLayout>) -> NodeId {
        let v = attn_probs_value(self.value(q).view(), self.value(k).view(), &layout);
        self.push(v, Op::AttnProbs(q, k, layout))
    }

    /// Weighted sum of value rows per head, heads concatenated on columns.
    pub fn attn_apply(&mut self, p: NodeId, v: NodeId, layout: Rc<AttnLayout>) -> NodeId {
        let out = attn_apply_value(self.value(p).view(), self.value(v).view(), &layout);
        self.push(out, Op::AttnApply(p, v, layout))
    }

    /// Attention weights averaged over heads, `[batch * q_len, k_len]`.
    pub fn head_mean(&mut self, p: NodeId, layout: Rc<AttnLayout>) -> NodeId {
        let pv = self.value(p);
        let (tq, h) = (layout.q_len, layout.heads);
        let mut out = Mat::zeros((layout.batch * tq, layout.k_len));
        for b in 0..layout.batch {
            let mut dst = out.slice_mut(s![b * tq..(b + 1) * tq, ..]);
            for head in 0..h {
                let r0 = (b * h + head) * tq;
                dst.scaled_add(1.0 / h as f64, &pv.slice(s![r0..r0 + tq, ..]));
            }
        }
        self.push(out, Op::HeadMean(p, layout))
    }

    /// Label-smoothed cross entropy of the mixed generate/copy distribution
    /// `[g * softmax(logits), (1 - g) * copy]` against soft targets, where
    /// `g = sigmoid(gate)`. Returns a `[1, 1]` node.
    pub fn copy_loss(
        &mut self,
        logits: NodeId,
        gate: NodeId,
        copy: NodeId,
        targets: Rc<CopyTargets>,
    ) -> NodeId {
        let z = self.value(logits);
        let u = self.value(gate);
        let a = self.value(copy);
        let softmax = masked_softmax_rows(z, targets.pad_id);
        let mut total = 0.0;
        let mut gate_prob = Vec::with_capacity(z.nrows());
        for r in 0..z.nrows() {
            let ur = u[[r, 0]];
            gate_prob.push(sigmoid(ur));
            let w = targets.weights[r];
            if w == 0.0 {
                continue;
            }
            let log_g = -softplus(-ur);
            let log_1mg = -softplus(ur);
            let zr = z.row(r);
            let lse = log_sum_exp_except(zr, targets.pad_id);
            let mut row = 0.0;
            for (v, &q) in targets.vocab.row(r).iter().enumerate() {
                if q != 0.0 {
                    row -= q * (log_g + zr[v] - lse);
                }
            }
            for (j, &q) in targets.copy.row(r).iter().enumerate() {
                if q != 0.0 {
                    row -= q * (log_1mg + a[[r, j]].ln());
                }
            }
            total += w * row;
        }
        let v = Mat::from_elem((1, 1), total);
        self.push(
            v,
            Op::CopyLoss {
                logits,
                gate,
                copy,
                targets,
                softmax,
                gate_prob,
            },
        )
    }

    /// Gradients of scalar node `loss` with respect to every parameter
    /// node, accumulated into `param_grads` by parameter index.
    pub fn backward(&self, loss: NodeId, param_grads: &mut [Mat]) {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.value(loss).raw_dim()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut acc = |id: NodeId, delta: Mat| match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p] += &g,
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(x, bias) => {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, g);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*x))
                        .for_each(|d, &xv| {
                            if xv <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*x, d);
                }
                Op::Dropout(x, mask) => acc(*x, g * mask),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gain);
                    let cols = dxhat.ncols() as f64;
                    let mut dx = Mat::zeros(dxhat.raw_dim());
                    for r in 0..dx.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.sum() / cols;
                        let m2 = dh.dot(&xh) / cols;
                        let mut out = dx.row_mut(r);
                        for c in 0..out.len() {
                            out[c] = inv_std[r] * (dh[c] - m1 - xh[c] * m2);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Gather(table, ids) => {
                    let mut d = Mat::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(*table, d);
                }
                Op::AttnProbs(q, k, layout) => {
                    let (dq, dk) = attn_probs_backward(
                        &g,
                        node.value.view(),
                        self.value(*q).view(),
                        self.value(*k).view(),
                        layout,
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                }
                Op::AttnApply(p, v, layout) => {
                    let (dp, dv) = attn_apply_backward(
                        &g,
                        self.value(*p).view(),
                        self.value(*v).view(),
                        layout,
                    );
                    acc(*p, dp);
                    acc(*v, dv);
                }
                Op::HeadMean(p, layout) => {
                    let (tq, h) = (layout.q_len, layout.heads);
                    let mut d = Mat::zeros(self.value(*p).raw_dim());
                    for b in 0..layout.batch {
                        let src = g.slice(s![b * tq..(b + 1) * tq, ..]);
                        for head in 0..h {
                            let r0 = (b * h + head) * tq;
                            d.slice_mut(s![r0..r0 + tq, ..])
                                .scaled_add(1.0 / h as f64, &src);
                        }
                    }
                    acc(*p, d);
                }
                Op::CopyLoss {
                    logits,
                    gate,
                    copy,
                    targets,
                    softmax,
                    gate_prob,
                } => {
                    let scale = g[[0, 0]];
                    let a = self.value(*copy);
                    let rows = softmax.nrows();
                    let mut dz = Mat::zeros(softmax.raw_dim());
                    let mut du = Mat::zeros((rows, 1));
                    let mut da = Mat::zeros(a.raw_dim());
                    for r in 0..rows {
                        let w = targets.weights[r] * scale;
                        if w == 0.0 {
                            continue;
                        }
                        let qv = targets.vocab.row(r);
                        let qc = targets.copy.row(r);
                        let mass_v: f64 = qv.sum();
                        let mass_c: f64 = qc.sum();
                        let gp = gate_prob[r];
                        du[[r, 0]] = w * (-mass_v * (1.0 - gp) + mass_c * gp);
                        let mut dzr = dz.row_mut(r);
                        for v in 0..dzr.len() {
                            dzr[v] = w * (mass_v * softmax[[r, v]] - qv[v]);
                        }
                        for (j, &q) in qc.iter().enumerate() {
                            if q != 0.0 {
                                da[[r, j]] = -w * q / a[[r, j]];
                            }
                        }
                    }
                    acc(*logits, dz);
                    acc(*gate, du);
                    acc(*copy, da);
                }
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp_except(row: ndarray::ArrayView1<f64>, skip: usize) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != skip)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + sum.ln()
}

/// Row softmax with column `skip` forced to zero probability.
pub fn masked_softmax_rows(z: &Mat, skip: usize) -> Mat {
    let mut out = Mat::zeros(z.raw_dim());
    for (r, row) in z.rows().into_iter().enumerate() {
        let lse = log_sum_exp_except(row, skip);
        let mut o = out.row_mut(r);
        for (v, &zv) in row.iter().enumerate() {
            o[v] = if v == skip { 0.0 } else { (zv - lse).exp() };
        }
    }
    out
}

fn softmax_prefix_inplace(mut row: ndarray::ArrayViewMut1<f64>, visible: usize) {
    let max = row
        .iter()
        .take(visible)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (j, e) in row.iter_mut().enumerate() {
        if j < visible {
            *e = (*e - max).exp();
            sum += *e;
        } else {
            *e = 0.0;
        }
    }
    for e in row.iter_mut().take(visible) {
        *e /= sum;
    }
}

/// Rows `0..n` of sample `b` restricted to head `h`'s columns.
fn head_block<'a>(
    m: ArrayView2<'a, f64>,
    b: usize,
    len: usize,
    n: usize,
    h: usize,
    dk: usize,
) -> ArrayView2<'a, f64> {
    m.slice_move(s![b * len..b * len + n, h * dk..(h + 1) * dk])
}

fn head_block_mut<'a>(
    m: ArrayViewMut2<'a, f64>,
    b: usize,
    len: usize,
    n: usize,
    h: usize,
    dk: usize,
) -> ArrayViewMut2<'a, f64> {
    m.slice_move(s![b * len..b * len + n, h * dk..(h + 1) * dk])
}

// The kernels below touch only the `q_lens[b] x key_lens[b]` corner of each
// block; everything outside it is identically zero.

pub fn attn_probs_value(q: ArrayView2<f64>, k: ArrayView2<f64>, layout: &AttnLayout) -> Mat {
    let (tq, tk, heads) = (layout.q_len, layout.k_len, layout.heads);
    let dk = q.ncols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Mat::zeros((layout.batch * heads * tq, tk));
    for b in 0..layout.batch {
        let (qn, kn) = (layout.q_lens[b], layout.key_lens[b]);
        for h in 0..heads {
            let qb = head_block(q, b, tq, qn, h, dk);
            let kb = head_block(k, b, tk, kn, h, dk);
            let r0 = (b * heads + h) * tq;
            let mut block = out.slice_mut(s![r0..r0 + qn, ..kn]);
            ndarray::linalg::general_mat_mul(scale, &qb, &kb.t(), 0.0, &mut block);
            for (i, row) in block.rows_mut().into_iter().enumerate() {
                softmax_prefix_inplace(row, layout.visible(b, i));
            }
        }
    }
    out
}

fn attn_probs_backward(
    g: &Mat,
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    layout: &AttnLayout,
) -> (Mat, Mat) {
    let (tq, tk, heads) = (layout.q_len, layout.k_len, layout.heads);
    let dk = q.ncols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Mat::zeros(q.raw_dim());
    let mut dkm = Mat::zeros(k.raw_dim());
    for b in 0..layout.batch {
        let (qn, kn) = (layout.q_lens[b], layout.key_lens[b]);
        for h in 0..heads {
            let r0 = (b * heads + h) * tq;
            let pb = p.slice(s![r0..r0 + qn, ..kn]);
            let gb = g.slice(s![r0..r0 + qn, ..kn]);
            // softmax backward: dS = P * (dP - rowsum(dP * P))
            let mut ds = &gb * &pb;
            let dots: Vec<f64> = ds.rows().into_iter().map(|r| r.sum()).collect();
            Zip::indexed(&mut ds).and(&pb).for_each(|(i, _), d, &pv| {
                *d -= pv * dots[i];
            });
            let qb = head_block(q, b, tq, qn, h, dk);
            let kb = head_block(k, b, tk, kn, h, dk);
            let mut dqb = head_block_mut(dq.view_mut(), b, tq, qn, h, dk);
            ndarray::linalg::general_mat_mul(scale, &ds, &kb, 1.0, &mut dqb);
            let mut dkb = head_block_mut(dkm.view_mut(), b, tk, kn, h, dk);
            ndarray::linalg::general_mat_mul(scale, &ds.t(), &qb, 1.0, &mut dkb);
        }
    }
    (dq, dkm)
}

pub fn attn_apply_value(p: ArrayView2<f64>, v: ArrayView2<f64>, layout: &AttnLayout) -> Mat {
    let (tq, tk, heads) = (layout.q_len, layout.k_len, layout.heads);
    let dk = v.ncols() / heads;
    let mut out = Mat::zeros((layout.batch * tq, v.ncols()));
    for b in 0..layout.batch {
        let (qn, kn) = (layout.q_lens[b], layout.key_lens[b]);
        for h in 0..heads {
            let r0 = (b * heads + h) * tq;
            let pb = p.slice(s![r0..r0 + qn, ..kn]);
            let vb = head_block(v, b, tk, kn, h, dk);
            let mut ob = head_block_mut(out.view_mut(), b, tq, qn, h, dk);
            ndarray::linalg::general_mat_mul(1.0, &pb, &vb, 0.0, &mut ob);
        }
    }
    out
}

fn attn_apply_backward(
    g: &Mat,
    p: ArrayView2<f64>,
    v: ArrayView2<f64>,
    layout: &AttnLayout,
) -> (Mat, Mat) {
    let (tq, tk, heads) = (layout.q_len, layout.k_len, layout.heads);
    let dk = v.ncols() / heads;
    let mut dp = Mat::zeros(p.raw_dim());
    let mut dv = Mat::zeros(v.raw_dim());
    for b in 0..layout.batch {
        let (qn, kn) = (layout.q_lens[b], layout.key_lens[b]);
        for h in 0..heads {
            let r0 = (b * heads + h) * tq;
            let gb = head_block(g.view(), b, tq, qn, h, dk);
            let vb = head_block(v, b, tk, kn, h, dk);
            let pb = p.slice(s![r0..r0 + qn, ..kn]);
            let mut dpb = dp.slice_mut(s![r0..r0 + qn, ..kn]);
            ndarray::linalg::general_mat_mul(1.0, &gb, &vb.t(), 0.0, &mut dpb);
            let mut dvb = head_block_mut(dv.view_mut(), b, tk, kn, h, dk);
            ndarray::linalg::general_mat_mul(1.0, &pb.t(), &gb, 1.0, &mut dvb);
        }
    }
    (dp, dv)
}

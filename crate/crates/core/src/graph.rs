//! Eager computation graph. Building a node computes its value immediately;
//! [`Graph::backward`] then walks the recorded ops in reverse and accumulates
//! exact analytic gradients. Nodes that no gradient-requiring leaf feeds into
//! are skipped, and a scaled-sum term with weight exactly 0 contributes no
//! backward work at all, so a joint loss with zeroed trade-off weights steps
//! bit-identically to the decoupled losses.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    ConvOffset {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        past: usize,
        future: usize,
    },
    Relu {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxTemp {
        x: NodeId,
        tau: f64,
    },
    /// Mean over frames of cross-entropy against integer labels.
    MeanCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// Mean over frames of `tau^2 * KL(P || Q)` with `P = softmax(p/tau)`
    /// (the target) and `Q = softmax(q/tau)`. Gradients flow into both.
    SoftKl {
        q_logits: NodeId,
        p_logits: NodeId,
        tau: f64,
    },
    /// Mean over frames of the squared L2 gap between `pred[t]` and the
    /// average of `target[t+offset .. t+offset+count]`. Frames past the end
    /// either count as zeros with a fixed divisor (`clip = false`) or are
    /// dropped with the divisor shrunk to the valid count (`clip = true`).
    WindowMse {
        pred: NodeId,
        target: NodeId,
        offset: usize,
        count: usize,
        clip: bool,
    },
    /// Weighted sum of scalar nodes.
    ScaledSum {
        terms: Vec<(NodeId, f64)>,
    },
    /// Fixed linear functional of a tensor; scalarizes outputs for checks.
    DotConst {
        x: NodeId,
        coeffs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, t: Tensor, needs_grad: bool) -> NodeId {
        self.push(Op::Leaf, t, needs_grad)
    }

    pub fn conv_offset(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        past: usize,
        future: usize,
    ) -> Result<NodeId> {
        let value = ops::conv1d_offset(
            self.value(x),
            self.value(w),
            self.value(b),
            past,
            future,
        )?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::ConvOffset { x, w, b, past, future }, value, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::relu(self.value(x));
        let ng = self.needs(x);
        self.push(Op::Relu { x }, value, ng)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, value, ng))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::concat_cols(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols { a, b }, value, ng))
    }

    pub fn softmax_temp(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        let value = ops::softmax_temp(self.value(x), tau)?;
        let ng = self.needs(x);
        Ok(self.push(Op::SoftmaxTemp { x, tau }, value, ng))
    }

    pub fn mean_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dims()[0] != labels.len() {
            return Err(Error::Shape {
                op: "loss_cls",
                what: "logits",
                expected: format!("[{}, classes]", labels.len()),
                got: lv.dims().to_vec(),
            });
        }
        let c = lv.dims()[1];
        for (frame, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::LabelRange {
                    frame,
                    label: l,
                    max: c - 1,
                });
            }
        }
        let t_len = labels.len();
        let mut scratch = vec![0.0f64; c];
        let mut total = 0.0f64;
        for (t, &l) in labels.iter().enumerate() {
            ops::log_softmax_row(lv.row(t), 1.0, &mut scratch);
            total -= scratch[l];
        }
        let value = Tensor::scalar(total / t_len as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Op::MeanCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
            ng,
        ))
    }

    pub fn soft_kl(&mut self, q_logits: NodeId, p_logits: NodeId, tau: f64) -> Result<NodeId> {
        if !(tau > 0.0) {
            return Err(Error::Invalid {
                op: "loss_logit_kd",
                msg: format!("temperature must be positive, got {tau}"),
            });
        }
        let q = self.value(q_logits);
        let p = self.value(p_logits);
        if q.dims() != p.dims() || q.rank() != 2 {
            return Err(Error::Shape {
                op: "loss_logit_kd",
                what: "teacher logits",
                expected: format!("{:?} to match student logits", q.dims()),
                got: p.dims().to_vec(),
            });
        }
        let (t_len, c) = (q.dims()[0], q.dims()[1]);
        let mut lp = vec![0.0f64; c];
        let mut lq = vec![0.0f64; c];
        let mut total = 0.0f64;
        for t in 0..t_len {
            ops::log_softmax_row(p.row(t), tau, &mut lp);
            ops::log_softmax_row(q.row(t), tau, &mut lq);
            let mut kl = 0.0f64;
            for i in 0..c {
                kl += lp[i].exp() * (lp[i] - lq[i]);
            }
            total += tau * tau * kl;
        }
        let value = Tensor::scalar(total / t_len as f64);
        let ng = self.needs(q_logits) || self.needs(p_logits);
        Ok(self.push(
            Op::SoftKl {
                q_logits,
                p_logits,
                tau,
            },
            value,
            ng,
        ))
    }

    pub fn window_mse(
        &mut self,
        pred: NodeId,
        target: NodeId,
        offset: usize,
        count: usize,
        clip: bool,
    ) -> Result<NodeId> {
        let pv = self.value(pred);
        let tv = self.value(target);
        if pv.rank() != 2 || pv.dims() != tv.dims() {
            return Err(Error::Shape {
                op: "window_mse",
                what: "target",
                expected: format!("{:?} to match prediction channels", pv.dims()),
                got: tv.dims().to_vec(),
            });
        }
        if count == 0 {
            return Err(Error::Invalid {
                op: "window_mse",
                msg: "window must cover at least one frame".into(),
            });
        }
        let (t_len, c) = (pv.dims()[0], pv.dims()[1]);
        let mut total = 0.0f64;
        let mut mean = vec![0.0f64; c];
        for t in 0..t_len {
            window_mean(tv, t, offset, count, clip, &mut mean);
            let prow = pv.row(t);
            let mut acc = 0.0f64;
            for i in 0..c {
                let d = prow[i] - mean[i];
                acc += d * d;
            }
            total += acc;
        }
        let value = Tensor::scalar(total / t_len as f64);
        let ng = self.needs(pred) || self.needs(target);
        Ok(self.push(
            Op::WindowMse {
                pred,
                target,
                offset,
                count,
                clip,
            },
            value,
            ng,
        ))
    }

    pub fn scaled_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0f64;
        let mut ng = false;
        for &(id, w) in terms {
            let v = self.value(id);
            if !v.is_scalar() {
                return Err(Error::Shape {
                    op: "scaled_sum",
                    what: "term",
                    expected: "scalar".into(),
                    got: v.dims().to_vec(),
                });
            }
            total += w * v.data()[0];
            if w != 0.0 {
                ng |= self.needs(id);
            }
        }
        Ok(self.push(
            Op::ScaledSum {
                terms: terms.to_vec(),
            },
            Tensor::scalar(total),
            ng,
        ))
    }

    pub fn dot_const(&mut self, x: NodeId, coeffs: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if coeffs.len() != v.len() {
            return Err(Error::Shape {
                op: "dot_const",
                what: "coeffs",
                expected: format!("{} values", v.len()),
                got: vec![coeffs.len()],
            });
        }
        let total: f64 = v.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        let ng = self.needs(x);
        Ok(self.push(Op::DotConst { x, coeffs }, Tensor::scalar(total), ng))
    }

    /// Reverse pass from a scalar root. Gradients of earlier backward calls
    /// on this graph are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got dims {:?}", self.value(root).dims()),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn add_scaled(&mut self, id: NodeId, src: &[f64], scale: f64) {
        if !self.nodes[id.0].needs_grad || scale == 0.0 {
            return;
        }
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        debug_assert_eq!(slot.len(), src.len());
        for (d, s) in slot.iter_mut().zip(src) {
            *d += scale * s;
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        // The op is cheap to describe; clone the small metadata out so the
        // node table can be borrowed for values.
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            &Op::ConvOffset { x, w, b, past, future } => {
                let gt = Tensor::from_vec(self.nodes[idx].value.dims(), g.to_vec())?;
                let (dx, dw, db) = ops::conv1d_offset_backward(
                    &gt,
                    self.value(x),
                    self.value(w),
                    past,
                    future,
                )?;
                self.add_scaled(x, dx.data(), 1.0);
                self.add_scaled(w, dw.data(), 1.0);
                self.add_scaled(b, db.data(), 1.0);
                Ok(())
            }
            &Op::Relu { x } => {
                let gt = Tensor::from_vec(self.nodes[idx].value.dims(), g.to_vec())?;
                let dx = ops::relu_backward(&gt, self.value(x));
                self.add_scaled(x, dx.data(), 1.0);
                Ok(())
            }
            &Op::Linear { x, w, b } => {
                let gt = Tensor::from_vec(self.nodes[idx].value.dims(), g.to_vec())?;
                let (dx, dw, db) = ops::linear_backward(&gt, self.value(x), self.value(w))?;
                self.add_scaled(x, dx.data(), 1.0);
                self.add_scaled(w, dw.data(), 1.0);
                self.add_scaled(b, db.data(), 1.0);
                Ok(())
            }
            &Op::ConcatCols { a, b } => {
                let ca = self.value(a).dims()[1];
                let cb = self.value(b).dims()[1];
                let gt = Tensor::from_vec(self.nodes[idx].value.dims(), g.to_vec())?;
                let (da, db) = ops::concat_cols_backward(&gt, ca, cb);
                self.add_scaled(a, da.data(), 1.0);
                self.add_scaled(b, db.data(), 1.0);
                Ok(())
            }
            &Op::SoftmaxTemp { x, tau } => {
                let gt = Tensor::from_vec(self.nodes[idx].value.dims(), g.to_vec())?;
                let dx = ops::softmax_temp_backward(&gt, &self.nodes[idx].value, tau);
                self.add_scaled(x, dx.data(), 1.0);
                Ok(())
            }
            Op::MeanCrossEntropy { logits, labels } => {
                let (logits, labels) = (*logits, labels.clone());
                let lv = self.value(logits);
                let (t_len, c) = (lv.dims()[0], lv.dims()[1]);
                let mut dx = vec![0.0f64; t_len * c];
                let mut p = vec![0.0f64; c];
                for (t, &l) in labels.iter().enumerate() {
                    ops::softmax_row(lv.row(t), 1.0, &mut p);
                    for i in 0..c {
                        dx[t * c + i] = (p[i] - if i == l { 1.0 } else { 0.0 }) / t_len as f64;
                    }
                }
                self.add_scaled(logits, &dx, g[0]);
                Ok(())
            }
            &Op::SoftKl { q_logits, p_logits, tau } => {
                let qv = self.value(q_logits);
                let pv = self.value(p_logits);
                let (t_len, c) = (qv.dims()[0], qv.dims()[1]);
                let mut lq = vec![0.0f64; c];
                let mut lp = vec![0.0f64; c];
                let mut dq = vec![0.0f64; t_len * c];
                let mut dp = vec![0.0f64; t_len * c];
                let scale = tau / t_len as f64;
                for t in 0..t_len {
                    ops::log_softmax_row(pv.row(t), tau, &mut lp);
                    ops::log_softmax_row(qv.row(t), tau, &mut lq);
                    let mut kl = 0.0f64;
                    for i in 0..c {
                        kl += lp[i].exp() * (lp[i] - lq[i]);
                    }
                    for i in 0..c {
                        let pi = lp[i].exp();
                        let qi = lq[i].exp();
                        dq[t * c + i] = scale * (qi - pi);
                        dp[t * c + i] = scale * pi * (lp[i] - lq[i] - kl);
                    }
                }
                self.add_scaled(q_logits, &dq, g[0]);
                self.add_scaled(p_logits, &dp, g[0]);
                Ok(())
            }
            &Op::WindowMse { pred, target, offset, count, clip } => {
                let pv = self.value(pred);
                let tv = self.value(target);
                let (t_len, c) = (pv.dims()[0], pv.dims()[1]);
                let norm = 2.0 / t_len as f64;
                let mut dpred = vec![0.0f64; t_len * c];
                let mut dtarget = vec![0.0f64; t_len * c];
                let mut mean = vec![0.0f64; c];
                for t in 0..t_len {
                    let (lo, hi, div) = window_bounds(t, t_len, offset, count, clip);
                    window_mean(tv, t, offset, count, clip, &mut mean);
                    let prow = pv.row(t);
                    for i in 0..c {
                        let d = norm * (prow[i] - mean[i]);
                        dpred[t * c + i] += d;
                        for u in lo..hi {
                            dtarget[u * c + i] -= d / div;
                        }
                    }
                }
                self.add_scaled(pred, &dpred, g[0]);
                self.add_scaled(target, &dtarget, g[0]);
                Ok(())
            }
            Op::ScaledSum { terms } => {
                let terms = terms.clone();
                for (id, w) in terms {
                    if w != 0.0 {
                        self.add_scaled(id, &[w], g[0]);
                    }
                }
                Ok(())
            }
            Op::DotConst { x, coeffs } => {
                let (x, coeffs) = (*x, coeffs.clone());
                self.add_scaled(x, &coeffs, g[0]);
                Ok(())
            }
        }
    }
}

fn window_bounds(t: usize, t_len: usize, offset: usize, count: usize, clip: bool) -> (usize, usize, f64) {
    let lo = (t + offset).min(t_len);
    let hi = (t + offset + count).min(t_len);
    let div = if clip {
        ((hi - lo) as f64).max(1.0)
    } else {
        count as f64
    };
    (lo, hi, div)
}

fn window_mean(target: &Tensor, t: usize, offset: usize, count: usize, clip: bool, out: &mut [f64]) {
    let t_len = target.dims()[0];
    let (lo, hi, div) = window_bounds(t, t_len, offset, count, clip);
    out.fill(0.0);
    for u in lo..hi {
        for (o, &v) in out.iter_mut().zip(target.row(u)) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= div;
    }
}

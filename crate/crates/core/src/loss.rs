//! Training objectives: per-frame classification, softened logit matching,
//! auxiliary-feature matching with receptive alignment, the joint loss, and
//! the future-feature prediction target of the anticipation baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::TraceIds;

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Hyper {
    /// Softmax temperature for logit distillation.
    pub tau: f64,
    /// Weight of the logit-distillation term.
    pub lambda: f64,
    /// Weight of the auxiliary-feature term.
    pub alpha: f64,
    pub lr: f64,
    /// 1-based epoch at which the learning rate drops once.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Hyper {
        Hyper {
            tau: 5.0,
            lambda: 0.4,
            alpha: 0.01,
            lr: 5e-4,
            lr_decay_epoch: 30,
            lr_decay_factor: 0.1,
            epochs: 40,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Invalid {
                op: "hyper",
                msg: format!("tau must be positive, got {}", self.tau),
            });
        }
        if self.epochs == 0 {
            return Err(Error::Invalid {
                op: "hyper",
                msg: "epochs must be at least 1".into(),
            });
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Invalid {
                op: "hyper",
                msg: format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor),
            });
        }
        if self.lr < 0.0 {
            return Err(Error::Invalid {
                op: "hyper",
                msg: format!("lr must be non-negative, got {}", self.lr),
            });
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch: the initial rate before the decay
    /// epoch, decayed at and after it.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Hyper {
        self.seed = seed;
        self
    }
}

/// Which softened distribution the KL term treats as the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlTarget {
    Teacher,
    Student,
}

/// How feature windows hanging past the end of the sequence are handled:
/// missing frames read as zero with the divisor fixed, or the window shrinks
/// to the valid frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowOverflow {
    ZeroPad,
    Clip,
}

/// Which student features the non-final feature-matching terms supervise.
/// The final layer always uses auxiliary features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NonFinalSource {
    Aux,
    Main,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DistillOptions {
    pub kl_target: KlTarget,
    pub overflow: WindowOverflow,
    pub nonfinal_source: NonFinalSource,
}

impl Default for DistillOptions {
    fn default() -> DistillOptions {
        DistillOptions {
            kl_target: KlTarget::Teacher,
            overflow: WindowOverflow::ZeroPad,
            nonfinal_source: NonFinalSource::Aux,
        }
    }
}

/// Mean over frames of cross-entropy between the softmaxed logits and the
/// integer labels.
pub fn loss_cls(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.mean_cross_entropy(logits, labels)
}

/// Mean over frames of `tau^2 * KL(target || other)` on temperature-softened
/// logits. Gradients flow into both logit sets.
pub fn loss_logit_kd(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_logits: NodeId,
    tau: f64,
    target: KlTarget,
) -> Result<NodeId> {
    match target {
        KlTarget::Teacher => g.soft_kl(student_logits, teacher_logits, tau),
        KlTarget::Student => g.soft_kl(teacher_logits, student_logits, tau),
    }
}

/// Feature-matching loss between a learner trace and a teacher trace: per
/// frame the squared L2 gap summed over channels, averaged over frames and
/// added up across layers. The final layer is compared frame to frame; every
/// earlier layer is compared against the teacher features averaged over
/// `[t, t+p]`, which aligns the receptive spans of the two stacks. `p` comes
/// from [`crate::receptive::alignment_window`]. Summing (not averaging) the
/// channel gaps is what makes the default trade-off weight land the term
/// near the classification losses at production widths.
pub fn loss_an(
    g: &mut Graph,
    learner: &TraceIds,
    teacher: &TraceIds,
    p: u32,
    opts: &DistillOptions,
) -> Result<NodeId> {
    let layers = teacher.main.len();
    let learner_feats = kd_features(learner, opts);
    if learner_feats.len() != layers {
        return Err(Error::Invalid {
            op: "loss_an",
            msg: format!(
                "learner has {} feature layers, teacher has {layers}",
                learner_feats.len()
            ),
        });
    }
    let clip = opts.overflow == WindowOverflow::Clip;
    let mut terms = Vec::with_capacity(layers);
    for l in 0..layers {
        let count = if l + 1 == layers { 1 } else { p as usize + 1 };
        let t = g.window_mse(learner_feats[l], teacher.main[l], 0, count, clip)?;
        terms.push((t, 1.0));
    }
    g.scaled_sum(&terms)
}

/// Features the distillation terms read from the learner: mapped auxiliary
/// nodes when it has them, main features otherwise (a teacher acting as the
/// learner in a chained path has no auxiliary branch).
fn kd_features<'t>(trace: &'t TraceIds, opts: &DistillOptions) -> Vec<NodeId> {
    if trace.aux_mapped.is_empty() {
        return trace.main.clone();
    }
    let layers = trace.aux_mapped.len();
    (0..layers)
        .map(|l| {
            if l + 1 < layers && opts.nonfinal_source == NonFinalSource::Main {
                trace.main[l]
            } else {
                trace.aux_mapped[l]
            }
        })
        .collect()
}

/// The four joint-loss components plus their weighted total.
pub struct LossNodes {
    pub total: NodeId,
    pub cls_student: NodeId,
    pub cls_teacher: NodeId,
    pub logit_kd: NodeId,
    pub an: NodeId,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.value(self.total).data()[0],
            cls_student: g.value(self.cls_student).data()[0],
            cls_teacher: g.value(self.cls_teacher).data()[0],
            logit_kd: g.value(self.logit_kd).data()[0],
            an: g.value(self.an).data()[0],
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossValues {
    pub total: f64,
    pub cls_student: f64,
    pub cls_teacher: f64,
    pub logit_kd: f64,
    pub an: f64,
}

/// Joint objective: both classification losses plus the weighted logit and
/// feature distillation terms.
pub fn loss_total(
    g: &mut Graph,
    learner: &TraceIds,
    teacher: &TraceIds,
    labels: &[usize],
    hyper: &Hyper,
    p: u32,
    opts: &DistillOptions,
) -> Result<LossNodes> {
    let cls_student = loss_cls(g, learner.logits, labels)?;
    let cls_teacher = loss_cls(g, teacher.logits, labels)?;
    let logit_kd = loss_logit_kd(g, learner.logits, teacher.logits, hyper.tau, opts.kl_target)?;
    let an = loss_an(g, learner, teacher, p, opts)?;
    let total = g.scaled_sum(&[
        (cls_student, 1.0),
        (cls_teacher, 1.0),
        (logit_kd, hyper.lambda),
        (an, hyper.alpha),
    ])?;
    Ok(LossNodes {
        total,
        cls_student,
        cls_teacher,
        logit_kd,
        an,
    })
}

/// Anticipation target: squared L2 gap between each predicted feature row
/// and the average of the next `horizon` input rows, averaged over frames.
pub fn loss_predict(
    g: &mut Graph,
    predicted: NodeId,
    input: NodeId,
    horizon: usize,
    overflow: WindowOverflow,
) -> Result<NodeId> {
    if horizon == 0 {
        return Err(Error::Invalid {
            op: "loss_predict",
            msg: "prediction horizon must be at least 1".into(),
        });
    }
    g.window_mse(predicted, input, 1, horizon, overflow == WindowOverflow::Clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let len = dims.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    #[test]
    fn lr_schedule() {
        let h = Hyper {
            lr: 1.0,
            lr_decay_epoch: 3,
            lr_decay_factor: 0.1,
            ..Hyper::default()
        };
        assert_eq!(h.lr_at(1), 1.0);
        assert_eq!(h.lr_at(2), 1.0);
        assert_eq!(h.lr_at(3), 0.1);
        assert_eq!(h.lr_at(10), 0.1);
    }

    #[test]
    fn cls_saturated_and_uniform() {
        let mut g = Graph::new();
        // +1e3 on the true class each frame -> essentially zero loss.
        let mut hot = Tensor::zeros(&[3, 4]);
        for (t, &l) in [1usize, 0, 3].iter().enumerate() {
            hot.data_mut()[t * 4 + l] = 1e3;
        }
        let id = g.leaf(hot, false);
        let l = loss_cls(&mut g, id, &[1, 0, 3]).unwrap();
        assert!(g.value(l).data()[0] <= 1e-6);

        let uni = g.leaf(Tensor::zeros(&[5, 4]), false);
        let l = loss_cls(&mut g, uni, &[0, 1, 2, 3, 0]).unwrap();
        assert!((g.value(l).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cls_hand_computed_three_frames() {
        // T=3, M=1: binary logits, worked by hand per frame.
        let logits = Tensor::from_vec(&[3, 2], vec![2.0, 0.0, -1.0, 1.0, 0.5, 0.5]).unwrap();
        let labels = [0usize, 1, 0];
        let mut want = 0.0f64;
        for (t, &l) in labels.iter().enumerate() {
            let row = [logits.data()[t * 2], logits.data()[t * 2 + 1]];
            let z = row[0].exp() + row[1].exp();
            want -= (row[l].exp() / z).ln();
        }
        want /= 3.0;
        let mut g = Graph::new();
        let id = g.leaf(logits, false);
        let l = loss_cls(&mut g, id, &labels).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn kd_zero_when_equal_and_matches_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = rand_tensor(&mut rng, &[5, 3]);
        let mut g = Graph::new();
        let a = g.leaf(y.clone(), false);
        let b = g.leaf(y, false);
        let l = loss_logit_kd(&mut g, a, b, 5.0, KlTarget::Teacher).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);

        // Two classes, tau = 5, y_T = [5, 0], y_S = [0, 5]:
        // P = softmax([1, 0]), Q = softmax([0, 1]), KL = P0 - P1 = (e-1)/(e+1).
        let e = std::f64::consts::E;
        let want = 25.0 * (e - 1.0) / (e + 1.0);
        let mut g = Graph::new();
        let ys = g.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 5.0]).unwrap(), false);
        let yt = g.leaf(Tensor::from_vec(&[1, 2], vec![5.0, 0.0]).unwrap(), false);
        let l = loss_logit_kd(&mut g, ys, yt, 5.0, KlTarget::Teacher).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn kd_uniform_teacher_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tau = 3.0;
        let (t_len, c) = (4usize, 5usize);
        let ys = rand_tensor(&mut rng, &[t_len, c]);
        let yt = Tensor::zeros(&[t_len, c]);
        // KL to uniform target: -ln(C) - mean_i log_softmax(y_S/tau)_i per frame.
        let mut want = 0.0f64;
        for t in 0..t_len {
            let row = ys.row(t);
            let mut ls = vec![0.0f64; c];
            crate::ops::log_softmax_row(row, tau, &mut ls);
            let mean_ls: f64 = ls.iter().sum::<f64>() / c as f64;
            want += tau * tau * (-(c as f64).ln() - mean_ls);
        }
        want /= t_len as f64;
        let mut g = Graph::new();
        let a = g.leaf(ys, false);
        let b = g.leaf(yt, false);
        let l = loss_logit_kd(&mut g, a, b, tau, KlTarget::Teacher).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn kd_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ys = rand_tensor(&mut rng, &[4, 3]);
        let yt = rand_tensor(&mut rng, &[4, 3]);
        let mut ys_shift = ys.clone();
        let mut yt_shift = yt.clone();
        for t in 0..4 {
            for i in 0..3 {
                ys_shift.data_mut()[t * 3 + i] += 2.5 * (t as f64 + 1.0);
                yt_shift.data_mut()[t * 3 + i] -= 1.25 * (t as f64 + 1.0);
            }
        }
        let mut g = Graph::new();
        let (a, b) = (g.leaf(ys, false), g.leaf(yt, false));
        let l0 = loss_logit_kd(&mut g, a, b, 2.0, KlTarget::Teacher).unwrap();
        let (a2, b2) = (g.leaf(ys_shift, false), g.leaf(yt_shift, false));
        let l1 = loss_logit_kd(&mut g, a2, b2, 2.0, KlTarget::Teacher).unwrap();
        assert!((g.value(l0).data()[0] - g.value(l1).data()[0]).abs() < 1e-9);
    }

    #[test]
    fn kd_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 4]), false);
        assert!(loss_logit_kd(&mut g, a, b, 1.0, KlTarget::Teacher).is_err());
    }

    fn fake_traces(
        g: &mut Graph,
        aux: &[Tensor],
        teach: &[Tensor],
    ) -> (TraceIds, TraceIds) {
        let aux_ids: Vec<NodeId> = aux.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let teach_ids: Vec<NodeId> = teach.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let dummy_logits = g.leaf(Tensor::zeros(&[aux[0].dims()[0], 2]), false);
        (
            TraceIds {
                main: aux_ids.clone(),
                aux: aux_ids.clone(),
                aux_mapped: aux_ids,
                logits: dummy_logits,
            },
            TraceIds {
                main: teach_ids,
                aux: Vec::new(),
                aux_mapped: Vec::new(),
                logits: dummy_logits,
            },
        )
    }

    #[test]
    fn an_zero_when_matched_and_plain_mse_at_p0() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f1 = rand_tensor(&mut rng, &[6, 3]);
        let f2 = rand_tensor(&mut rng, &[6, 3]);
        let mut g = Graph::new();
        let (s, t) = fake_traces(&mut g, &[f1.clone(), f2.clone()], &[f1.clone(), f2.clone()]);
        let l = loss_an(&mut g, &s, &t, 0, &DistillOptions::default()).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-15);

        // p = 0 reduces to the per-frame squared gap on both layers.
        let g1 = rand_tensor(&mut rng, &[6, 3]);
        let g2 = rand_tensor(&mut rng, &[6, 3]);
        let mut g = Graph::new();
        let (s, t) = fake_traces(&mut g, &[f1.clone(), f2.clone()], &[g1.clone(), g2.clone()]);
        let l = loss_an(&mut g, &s, &t, 0, &DistillOptions::default()).unwrap();
        let gap = |a: &Tensor, b: &Tensor| -> f64 {
            let mut acc = 0.0;
            for (x, y) in a.data().iter().zip(b.data()) {
                acc += (x - y) * (x - y);
            }
            acc / a.rows() as f64
        };
        let want = gap(&f1, &g1) + gap(&f2, &g2);
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn an_matches_window_oracle() {
        // Loop oracle that materializes each averaged window explicitly.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (t_len, c, p) = (6usize, 2usize, 2u32);
        let a1 = rand_tensor(&mut rng, &[t_len, c]);
        let a2 = rand_tensor(&mut rng, &[t_len, c]);
        let g1 = rand_tensor(&mut rng, &[t_len, c]);
        let g2 = rand_tensor(&mut rng, &[t_len, c]);

        let mut want = 0.0f64;
        for t in 0..t_len {
            // layer 1: windowed target
            for ch in 0..c {
                let mut m = 0.0;
                for u in t..=(t + p as usize) {
                    if u < t_len {
                        m += g1.data()[u * c + ch];
                    }
                }
                m /= (p + 1) as f64;
                let d = a1.data()[t * c + ch] - m;
                want += d * d / t_len as f64;
            }
            // layer 2: frame-aligned
            for ch in 0..c {
                let d = a2.data()[t * c + ch] - g2.data()[t * c + ch];
                want += d * d / t_len as f64;
            }
        }

        let mut g = Graph::new();
        let (s, t) = fake_traces(&mut g, &[a1, a2], &[g1, g2]);
        let l = loss_an(&mut g, &s, &t, p, &DistillOptions::default()).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn an_scaling_is_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let f = rand_tensor(&mut rng, &[5, 3]);
        let tgt = rand_tensor(&mut rng, &[5, 3]);
        let s = 3.0f64;
        // a' = g + s*(a - g) scales the loss by s^2.
        let mut scaled = f.clone();
        for (v, (&a, &gv)) in scaled.data_mut().iter_mut().zip(f.data().iter().zip(tgt.data())) {
            *v = gv + s * (a - gv);
        }
        let mut g = Graph::new();
        let (tr, te) = fake_traces(&mut g, &[f], &[tgt.clone()]);
        let l0 = loss_an(&mut g, &tr, &te, 0, &DistillOptions::default()).unwrap();
        let (tr2, te2) = fake_traces(&mut g, &[scaled], &[tgt]);
        let l1 = loss_an(&mut g, &tr2, &te2, 0, &DistillOptions::default()).unwrap();
        let (v0, v1) = (g.value(l0).data()[0], g.value(l1).data()[0]);
        assert!((v1 - s * s * v0).abs() < 1e-9 * v0.max(1.0));
    }

    #[test]
    fn an_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let a = vec![Tensor::zeros(&[4, 3])];
        let t = vec![Tensor::zeros(&[4, 5])];
        let (tr, te) = {
            let aux: Vec<NodeId> = a.iter().map(|x| g.leaf(x.clone(), false)).collect();
            let main: Vec<NodeId> = t.iter().map(|x| g.leaf(x.clone(), false)).collect();
            let lg = g.leaf(Tensor::zeros(&[4, 2]), false);
            (
                TraceIds { main: aux.clone(), aux: aux.clone(), aux_mapped: aux, logits: lg },
                TraceIds { main, aux: Vec::new(), aux_mapped: Vec::new(), logits: lg },
            )
        };
        assert!(loss_an(&mut g, &tr, &te, 0, &DistillOptions::default()).is_err());
    }

    #[test]
    fn total_is_linear_in_weights() {
        // Verify the arithmetic of the weighted sum directly.
        let mut g = Graph::new();
        let parts = [1.0, 2.0, 0.5, 10.0];
        let ids: Vec<NodeId> = parts.iter().map(|&v| g.leaf(Tensor::scalar(v), false)).collect();
        let total = g
            .scaled_sum(&[(ids[0], 1.0), (ids[1], 1.0), (ids[2], 0.4), (ids[3], 0.01)])
            .unwrap();
        assert!((g.value(total).data()[0] - 3.3).abs() < 1e-12);
    }

    #[test]
    fn predict_constant_sequence_and_p1() {
        // Constant sequence, prediction equal to the constant: zero loss on
        // interior frames; tail windows clipped.
        let c = 0.7f64;
        let x = Tensor::from_vec(&[5, 2], vec![c; 10]).unwrap();
        let mut g = Graph::new();
        let xh = g.leaf(x.clone(), false);
        let xi = g.leaf(x.clone(), false);
        let l = loss_predict(&mut g, xh, xi, 3, WindowOverflow::Clip).unwrap();
        // Last frame has no future frames at all: clipped window stays zero,
        // leaving a squared gap of c^2 per channel on that one frame.
        let want = 2.0 * c * c / 5.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);

        // P = 1 reduces to mse(x_hat[t], x[t+1]) with zero-padded tail.
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let xh = rand_tensor(&mut rng, &[4, 2]);
        let xi = rand_tensor(&mut rng, &[4, 2]);
        let mut g = Graph::new();
        let (a, b) = (g.leaf(xh.clone(), false), g.leaf(xi.clone(), false));
        let l = loss_predict(&mut g, a, b, 1, WindowOverflow::ZeroPad).unwrap();
        let mut want = 0.0;
        for t in 0..4 {
            for ch in 0..2 {
                let nxt = if t + 1 < 4 { xi.data()[(t + 1) * 2 + ch] } else { 0.0 };
                let d = xh.data()[t * 2 + ch] - nxt;
                want += d * d / 4.0;
            }
        }
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn predict_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let (t_len, d, p) = (5usize, 2usize, 3usize);
        let xh = rand_tensor(&mut rng, &[t_len, d]);
        let xi = rand_tensor(&mut rng, &[t_len, d]);
        let mut want = 0.0f64;
        for t in 0..t_len {
            for ch in 0..d {
                let mut m = 0.0;
                for i in 1..=p {
                    if t + i < t_len {
                        m += xi.data()[(t + i) * d + ch];
                    }
                }
                m /= p as f64;
                let diff = xh.data()[t * d + ch] - m;
                want += diff * diff / t_len as f64;
            }
        }
        let mut g = Graph::new();
        let (a, b) = (g.leaf(xh, false), g.leaf(xi, false));
        let l = loss_predict(&mut g, a, b, p, WindowOverflow::ZeroPad).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn predict_rejects_zero_horizon() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]), false);
        let b = g.leaf(Tensor::zeros(&[2, 2]), false);
        assert!(loss_predict(&mut g, a, b, 0, WindowOverflow::ZeroPad).is_err());
    }
}

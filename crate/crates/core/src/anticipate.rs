//! Anticipation-and-classify baseline: a causal conv head predicts the
//! average of the next `horizon` input frames, the prediction is
//! concatenated onto the current frame, and the student architecture
//! classifies the widened input. Trained jointly under classification plus
//! the prediction target.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::checkpoint::{RawCheckpoint, ROLE_TAG_ANTICIPATION};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::loss::{self, Hyper, WindowOverflow};
use crate::metrics::{self, Metric};
use crate::model::{init_params, insert_params, student_forward_ids, ModelSpec, ParamSet, Role};
use crate::ops;
use crate::seeds;
use crate::synth::{Sequence, SequenceSet};
use crate::tensor::Tensor;
use crate::train::{EpochRecord, TrainLog, EARLY_STOP_MIN_DELTA_POINTS, EARLY_STOP_PATIENCE};

#[derive(Clone, Copy, Debug)]
pub struct AnticipationSpec {
    /// Dimensionality of the raw input frames.
    pub feature_dim: usize,
    /// How many future frames the prediction head is supervised to average.
    pub horizon: usize,
    /// The classifier network; its input is the concatenation of prediction
    /// and frame, hence twice `feature_dim` wide.
    pub base: ModelSpec,
}

impl AnticipationSpec {
    pub fn from_student(student: &ModelSpec, horizon: usize) -> Result<AnticipationSpec> {
        if horizon == 0 {
            return Err(Error::Invalid {
                op: "anticipation",
                msg: "prediction horizon must be at least 1".into(),
            });
        }
        if student.role != Role::Student {
            return Err(Error::Role {
                expected: "S".into(),
                got: student.role.describe(),
            });
        }
        let base = ModelSpec {
            input_dim: 2 * student.input_dim,
            ..*student
        };
        Ok(AnticipationSpec {
            feature_dim: student.input_dim,
            horizon,
            base,
        })
    }
}

/// Base parameters plus the causal predictor head `predictor.weight`
/// (`[D, D, past+1]`, no activation) and `predictor.bias`.
pub fn init_anticipation_params(spec: &AnticipationSpec, seed: u64) -> Result<ParamSet> {
    let mut params = init_params(&spec.base, seed)?;
    let d = spec.feature_dim;
    let k = spec.base.past_extent + 1;
    use rand::{Rng, SeedableRng};
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(seeds::derive(seed, "predictor-init", 0));
    let mut w = Tensor::zeros(&[d, d, k]);
    let a = 1.0 / ((d * k) as f64).sqrt();
    for v in w.data_mut() {
        *v = rng.gen_range(-a..a);
    }
    params.insert("predictor.weight", w);
    params.insert("predictor.bias", Tensor::zeros(&[d]));
    Ok(params)
}

/// Forward pass: returns the classifier logits node and the predicted
/// feature rows node.
pub fn anticipation_forward_ids(
    g: &mut Graph,
    ids: &BTreeMap<String, NodeId>,
    spec: &AnticipationSpec,
    x: NodeId,
) -> Result<(crate::model::TraceIds, NodeId)> {
    let w = *ids.get("predictor.weight").ok_or_else(|| Error::Invalid {
        op: "anticipation",
        msg: "missing predictor.weight".into(),
    })?;
    let b = *ids.get("predictor.bias").ok_or_else(|| Error::Invalid {
        op: "anticipation",
        msg: "missing predictor.bias".into(),
    })?;
    let x_hat = g.conv_offset(x, w, b, spec.base.past_extent, 0)?;
    let widened = g.concat_cols(x_hat, x)?;
    let trace = student_forward_ids(g, ids, &spec.base, widened)?;
    Ok((trace, x_hat))
}

#[derive(Clone, Debug)]
pub struct AnticipationCheckpoint {
    pub spec: AnticipationSpec,
    pub params: ParamSet,
}

impl AnticipationCheckpoint {
    pub fn new(spec: AnticipationSpec, mut params: ParamSet) -> AnticipationCheckpoint {
        params.quantize_f32();
        AnticipationCheckpoint { spec, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        RawCheckpoint {
            role_tag: ROLE_TAG_ANTICIPATION,
            layers: self.spec.base.layers as u32,
            past_extent: self.spec.base.past_extent as u32,
            k: self.spec.horizon as u32,
            channels: self.spec.base.channels as u32,
            input_dim: self.spec.feature_dim as u32,
            num_classes: self.spec.base.num_classes as u32,
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
        .to_bytes()
    }

    pub fn from_raw(raw: RawCheckpoint) -> Result<AnticipationCheckpoint> {
        if raw.role_tag != ROLE_TAG_ANTICIPATION {
            return Err(Error::Role {
                expected: "anticipation checkpoint".into(),
                got: format!("role tag {}", raw.role_tag),
            });
        }
        let mut params = ParamSet::new();
        for (name, t) in raw.tensors {
            params.insert(&name, t);
        }
        let aux_channels = params
            .get("layer1.aux.weight")
            .map(|t| t.dims()[0])
            .unwrap_or(raw.channels as usize);
        let base = ModelSpec {
            role: Role::Student,
            layers: raw.layers as usize,
            past_extent: raw.past_extent as usize,
            channels: raw.channels as usize,
            aux_channels,
            input_dim: 2 * raw.input_dim as usize,
            num_classes: raw.num_classes as usize,
        };
        base.validate()?;
        Ok(AnticipationCheckpoint {
            spec: AnticipationSpec {
                feature_dim: raw.input_dim as usize,
                horizon: raw.k as usize,
                base,
            },
            params,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Per-frame class probabilities over one sequence.
pub fn anticipation_scores(ckpt: &AnticipationCheckpoint, seq: &Sequence) -> Result<Vec<f64>> {
    let x = seq.features_tensor(ckpt.spec.feature_dim);
    let mut g = Graph::new();
    let ids = insert_params(&mut g, &ckpt.params, false);
    let xid = g.leaf(x, false);
    let (trace, _) = anticipation_forward_ids(&mut g, &ids, &ckpt.spec, xid)?;
    let probs = ops::softmax_temp(g.value(trace.logits), 1.0)?;
    Ok(probs.data().to_vec())
}

pub struct AnticipationOutcome {
    pub checkpoint: AnticipationCheckpoint,
    pub log: TrainLog,
}

/// Train the baseline under `L_cls + L_predict`. The prediction term is
/// reported in the `loss_an` slot of the log records.
pub fn train_anticipation(
    student: &ModelSpec,
    data: &SequenceSet,
    hyper: &Hyper,
    horizon: usize,
    overflow: WindowOverflow,
) -> Result<AnticipationOutcome> {
    hyper.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = AnticipationSpec::from_student(student, horizon)?;
    let mut params = init_anticipation_params(&spec, hyper.seed)?;

    let n = data.sequences.len();
    let (train_idx, hold_idx) = crate::train::holdout_split(n);
    let holdout: Vec<&Sequence> = hold_idx.iter().map(|&i| &data.sequences[i]).collect();

    let mut opt = AdamState::new();
    let mut log = TrainLog::default();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut order = train_idx;

    for epoch in 1..=hyper.epochs {
        let lr = hyper.lr_at(epoch);
        let adam = AdamHyper::with_lr(lr);
        crate::train::shuffled(&mut order, seeds::derive(hyper.seed, "epoch-shuffle", epoch as u64));

        let mut cls_sum = 0.0;
        let mut pred_sum = 0.0;
        for &si in &order {
            let seq = &data.sequences[si];
            let x = seq.features_tensor(data.feature_dim);
            let labels = seq.labels_usize();
            let mut g = Graph::new();
            let ids = insert_params(&mut g, &params, true);
            let xid = g.leaf(x, false);
            let (trace, x_hat) = anticipation_forward_ids(&mut g, &ids, &spec, xid)?;
            let cls = loss::loss_cls(&mut g, trace.logits, &labels)?;
            let pred = loss::loss_predict(&mut g, x_hat, xid, horizon, overflow)?;
            let total = g.scaled_sum(&[(cls, 1.0), (pred, 1.0)])?;
            g.backward(total)?;
            cls_sum += g.value(cls).data()[0];
            pred_sum += g.value(pred).data()[0];
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, &id) in &ids {
                if let Some(gr) = g.grad(id) {
                    grads.insert(name.clone(), gr.to_vec());
                }
            }
            drop(g);
            adam_step(params.inner_mut(), &grads, &mut opt, &adam)?;
        }

        let interim = AnticipationCheckpoint {
            spec,
            params: params.clone(),
        };
        let metric = 100.0 * eval_map(&interim, &holdout, data.num_classes)?;
        let steps = order.len().max(1) as f64;
        log.records.push(EpochRecord {
            stage: format!("anticipation:P{horizon}"),
            epoch,
            lr,
            loss_cls_s: cls_sum / steps,
            loss_cls_t: 0.0,
            loss_l: 0.0,
            loss_an: pred_sum / steps,
            holdout_metric: metric,
        });
        if metric > best + EARLY_STOP_MIN_DELTA_POINTS {
            best = metric;
            stale = 0;
        } else {
            stale += 1;
            if stale >= EARLY_STOP_PATIENCE {
                break;
            }
        }
    }

    Ok(AnticipationOutcome {
        checkpoint: AnticipationCheckpoint::new(spec, params),
        log,
    })
}

fn eval_map(
    ckpt: &AnticipationCheckpoint,
    seqs: &[&Sequence],
    num_classes: usize,
) -> Result<f64> {
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for seq in seqs {
        flat.extend(anticipation_scores(ckpt, seq)?);
        labels.extend(seq.labels_usize());
    }
    Ok(metrics::evaluate(&flat, &labels, num_classes, Metric::Map)?.map)
}

/// Test mAP (percent) of the baseline over a whole set.
pub fn eval_anticipation(ckpt: &AnticipationCheckpoint, data: &SequenceSet) -> Result<f64> {
    let refs: Vec<&Sequence> = data.sequences.iter().collect();
    Ok(100.0 * eval_map(ckpt, &refs, data.num_classes)?)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepPoint {
    pub horizon: usize,
    pub map_pct: f64,
}

/// Train and evaluate the baseline over a set of horizons.
pub fn sweep(
    student: &ModelSpec,
    train: &SequenceSet,
    test: &SequenceSet,
    hyper: &Hyper,
    horizons: &[usize],
) -> Result<Vec<SweepPoint>> {
    let runs = crate::par::map_indexed(horizons.len(), |i| -> Result<SweepPoint> {
        let out = train_anticipation(student, train, hyper, horizons[i], WindowOverflow::ZeroPad)?;
        Ok(SweepPoint {
            horizon: horizons[i],
            map_pct: eval_anticipation(&out.checkpoint, test)?,
        })
    });
    runs.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CurveShape {
    RiseThenFall,
    Plateau,
    Irregular,
}

/// Classify the mAP-versus-horizon curve within a points tolerance: rising
/// (weakly) to its peak and then either genuinely falling, or flat overall.
pub fn curve_shape(points: &[SweepPoint], tol: f64) -> CurveShape {
    if points.len() < 2 {
        return CurveShape::Plateau;
    }
    let values: Vec<f64> = points.iter().map(|p| p.map_pct).collect();
    let peak = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let rising = values[..=peak].windows(2).all(|w| w[1] >= w[0] - tol);
    let no_rebound = values[peak..].windows(2).all(|w| w[1] <= w[0] + tol);
    if !(rising && no_rebound) {
        return CurveShape::Irregular;
    }
    if *values.last().unwrap() <= values[peak] - tol {
        CurveShape::RiseThenFall
    } else {
        CurveShape::Plateau
    }
}

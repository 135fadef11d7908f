//! Training orchestration: single-model training under the classification
//! loss, joint two-model distillation stages, and multi-stage paths in both
//! directions (student visiting progressively stronger teachers, or
//! knowledge walked down a teacher chain).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{self, DistillOptions, Hyper, LossValues};
use crate::metrics::{self, Metric};
use crate::model::{
    init_params, insert_params, student_forward_ids, teacher_forward_ids, ModelSpec, ParamSet,
    Role, TraceIds,
};
use crate::receptive::alignment_window;
use crate::seeds;
use crate::synth::{Sequence, SequenceSet};

/// Early-stop plateau settings: stop after this many epochs without the
/// holdout metric improving by at least the delta (in mAP points).
pub const EARLY_STOP_PATIENCE: usize = 5;
pub const EARLY_STOP_MIN_DELTA_POINTS: f64 = 0.05;

/// Fraction of the training sequences held out for the per-epoch metric.
const HOLDOUT_FRAC_PERCENT: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelId {
    S,
    T(u32),
}

impl ModelId {
    pub fn describe(&self) -> String {
        match self {
            ModelId::S => "S".to_string(),
            ModelId::T(k) => format!("T{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathDirection {
    /// Starts at the student, which visits each listed teacher in turn.
    Curriculum,
    /// Knowledge flows down a chain of models ending at the student.
    Takd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdPath {
    pub nodes: Vec<ModelId>,
    pub direction: PathDirection,
}

/// Parse notations like `S>T1>T2>T3>T4` (curriculum) or `T4>T2>S` (chained).
pub fn parse_path(input: &str) -> Result<KdPath> {
    let err = |position: usize, msg: String| Error::Path {
        input: input.to_string(),
        position,
        msg,
    };
    let tokens: Vec<&str> = input.split('>').map(str::trim).collect();
    let mut nodes = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        if *tok == "S" {
            nodes.push(ModelId::S);
        } else if let Some(k) = tok.strip_prefix('T') {
            let k: u32 = k
                .parse()
                .map_err(|_| err(i, format!("unknown model name `{tok}`")))?;
            if k == 0 {
                return Err(err(i, "teacher index must be at least 1".into()));
            }
            nodes.push(ModelId::T(k));
        } else {
            return Err(err(i, format!("unknown model name `{tok}`")));
        }
    }
    if nodes.len() < 2 {
        return Err(err(0, "a path needs at least two models".into()));
    }
    let direction = if nodes[0] == ModelId::S {
        for (i, n) in nodes.iter().enumerate().skip(1) {
            if *n == ModelId::S {
                return Err(err(i, "curriculum paths list the student only first".into()));
            }
        }
        PathDirection::Curriculum
    } else if *nodes.last().unwrap() == ModelId::S {
        for (i, n) in nodes.iter().enumerate().take(nodes.len() - 1) {
            if *n == ModelId::S {
                return Err(err(i, "chained paths list the student only last".into()));
            }
        }
        PathDirection::Takd
    } else {
        return Err(err(
            nodes.len() - 1,
            "path must either start or end with S".into(),
        ));
    };
    Ok(KdPath { nodes, direction })
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls_s: f64,
    pub loss_cls_t: f64,
    pub loss_l: f64,
    pub loss_an: f64,
    /// Holdout mAP in points.
    pub holdout_metric: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(
                &json!({
                    "stage": r.stage,
                    "epoch": r.epoch,
                    "lr": r.lr,
                    "loss_cls_s": r.loss_cls_s,
                    "loss_cls_t": r.loss_cls_t,
                    "loss_l": r.loss_l,
                    "loss_an": r.loss_an,
                    "holdout_metric": r.holdout_metric,
                })
                .to_string(),
            );
            out.push('\n');
        }
        out
    }

    pub fn final_holdout(&self) -> Option<f64> {
        self.records.last().map(|r| r.holdout_metric)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

pub struct DistillOutcome {
    pub learner: Checkpoint,
    pub teacher: Checkpoint,
    pub log: TrainLog,
}

fn forward_ids(
    g: &mut Graph,
    ids: &BTreeMap<String, crate::graph::NodeId>,
    spec: &ModelSpec,
    x: crate::graph::NodeId,
) -> Result<TraceIds> {
    match spec.role {
        Role::Student => student_forward_ids(g, ids, spec, x),
        Role::Teacher(_) => teacher_forward_ids(g, ids, spec, x),
    }
}

/// mAP (fraction) of `spec`/`params` over the given sequences.
fn eval_map(
    spec: &ModelSpec,
    params: &ParamSet,
    seqs: &[&Sequence],
    feature_dim: usize,
    num_classes: usize,
) -> Result<f64> {
    let width = num_classes + 1;
    let per_seq = crate::par::map_indexed(seqs.len(), |i| -> Result<(Vec<f64>, Vec<usize>)> {
        let seq = seqs[i];
        let x = seq.features_tensor(feature_dim);
        let trace = crate::model::forward(params, spec, &x)?;
        let probs = crate::ops::softmax_temp(&trace.logits, 1.0)?;
        Ok((probs.data().to_vec(), seq.labels_usize()))
    });
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for r in per_seq {
        let (s, l) = r?;
        flat.extend(s);
        labels.extend(l);
    }
    debug_assert_eq!(flat.len(), labels.len() * width);
    Ok(metrics::evaluate(&flat, &labels, num_classes, Metric::Map)?.map)
}

pub(crate) fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), (0..n).collect());
    }
    let hold = ((n * HOLDOUT_FRAC_PERCENT) / 100).max(1);
    let cut = n - hold;
    ((0..cut).collect(), (cut..n).collect())
}

pub(crate) fn shuffled(order: &mut [usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

struct Job<'a> {
    stage: String,
    learner_spec: ModelSpec,
    learner: ParamSet,
    teacher: Option<(ModelSpec, ParamSet)>,
    data: &'a SequenceSet,
    hyper: &'a Hyper,
    opts: DistillOptions,
}

fn check_compatible(learner: &ModelSpec, teacher: &ModelSpec) -> Result<()> {
    if learner.input_dim != teacher.input_dim
        || learner.num_classes != teacher.num_classes
        || learner.channels != teacher.channels
    {
        return Err(Error::Invalid {
            op: "distill",
            msg: format!(
                "incompatible specs: learner D={} M={} C={}, teacher D={} M={} C={}",
                learner.input_dim,
                learner.num_classes,
                learner.channels,
                teacher.input_dim,
                teacher.num_classes,
                teacher.channels
            ),
        });
    }
    let (lk, tk) = (learner.future_per_layer(), teacher.future_per_layer());
    if tk <= lk {
        return Err(Error::Invalid {
            op: "distill",
            msg: format!("teacher must see further ahead than the learner (T{tk} vs {lk})"),
        });
    }
    Ok(())
}

/// Shared loop for both plain training and joint distillation.
fn run_job(job: Job<'_>) -> Result<(ParamSet, Option<ParamSet>, TrainLog)> {
    let Job {
        stage,
        learner_spec,
        mut learner,
        teacher,
        data,
        hyper,
        opts,
    } = job;
    hyper.validate()?;
    learner_spec.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (teacher_spec, mut teacher_params) = match teacher {
        Some((s, p)) => {
            check_compatible(&learner_spec, &s)?;
            (Some(s), Some(p))
        }
        None => (None, None),
    };
    // Receptive alignment window for the feature terms: the per-layer future
    // advantage of the teacher over the learner.
    let p = teacher_spec
        .as_ref()
        .map(|t| alignment_window(t.future_per_layer() - learner_spec.future_per_layer()))
        .unwrap_or(0);

    let (train_idx, hold_idx) = holdout_split(data.sequences.len());
    let holdout: Vec<&Sequence> = hold_idx.iter().map(|&i| &data.sequences[i]).collect();

    let adam_base = AdamHyper::with_lr(hyper.lr);
    let mut learner_opt = AdamState::new();
    let mut teacher_opt = AdamState::new();
    let mut log = TrainLog::default();
    let mut best_metric = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut order = train_idx.clone();

    for epoch in 1..=hyper.epochs {
        let lr = hyper.lr_at(epoch);
        let adam = AdamHyper { lr, ..adam_base };
        shuffled(&mut order, seeds::derive(hyper.seed, "epoch-shuffle", epoch as u64));

        let mut sums = LossValues::default();
        for &si in &order {
            let seq = &data.sequences[si];
            let x = seq.features_tensor(data.feature_dim);
            let labels = seq.labels_usize();

            let mut g = Graph::new();
            let learner_ids = insert_params(&mut g, &learner, true);
            let xid = g.leaf(x, false);
            let ltrace = forward_ids(&mut g, &learner_ids, &learner_spec, xid)?;

            let vals;
            let teacher_ids;
            match (&teacher_spec, &teacher_params) {
                (Some(tspec), Some(tparams)) => {
                    let tids = insert_params(&mut g, tparams, true);
                    let ttrace = forward_ids(&mut g, &tids, tspec, xid)?;
                    let nodes =
                        loss::loss_total(&mut g, &ltrace, &ttrace, &labels, hyper, p, &opts)?;
                    g.backward(nodes.total)?;
                    vals = nodes.values(&g);
                    teacher_ids = Some(tids);
                }
                _ => {
                    let cls = loss::loss_cls(&mut g, ltrace.logits, &labels)?;
                    g.backward(cls)?;
                    vals = LossValues {
                        total: g.value(cls).data()[0],
                        cls_student: g.value(cls).data()[0],
                        ..LossValues::default()
                    };
                    teacher_ids = None;
                }
            }
            sums.cls_student += vals.cls_student;
            sums.cls_teacher += vals.cls_teacher;
            sums.logit_kd += vals.logit_kd;
            sums.an += vals.an;

            let collect = |ids: &BTreeMap<String, crate::graph::NodeId>| {
                let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for (name, &id) in ids {
                    if let Some(gr) = g.grad(id) {
                        grads.insert(name.clone(), gr.to_vec());
                    }
                }
                grads
            };
            let lgrads = collect(&learner_ids);
            let tgrads = teacher_ids.as_ref().map(&collect);
            drop(g);

            adam_step(learner.inner_mut(), &lgrads, &mut learner_opt, &adam)?;
            if let (Some(tp), Some(tg)) = (teacher_params.as_mut(), tgrads) {
                adam_step(tp.inner_mut(), &tg, &mut teacher_opt, &adam)?;
            }
        }

        let steps = order.len().max(1) as f64;
        let metric = 100.0
            * eval_map(
                &learner_spec,
                &learner,
                &holdout,
                data.feature_dim,
                data.num_classes,
            )?;
        log.records.push(EpochRecord {
            stage: stage.clone(),
            epoch,
            lr,
            loss_cls_s: sums.cls_student / steps,
            loss_cls_t: sums.cls_teacher / steps,
            loss_l: sums.logit_kd / steps,
            loss_an: sums.an / steps,
            holdout_metric: metric,
        });

        if metric > best_metric + EARLY_STOP_MIN_DELTA_POINTS {
            best_metric = metric;
            stale = 0;
        } else {
            stale += 1;
            if stale >= EARLY_STOP_PATIENCE {
                break;
            }
        }
    }

    Ok((learner, teacher_params.take().map(|p| p), log))
}

/// Train a model from scratch under the classification loss alone.
pub fn train_single(spec: &ModelSpec, data: &SequenceSet, hyper: &Hyper) -> Result<TrainOutcome> {
    let params = init_params(spec, hyper.seed)?;
    train_single_from(&Checkpoint::new(*spec, params), data, hyper)
}

/// Continue classification-only training from an existing checkpoint.
pub fn train_single_from(
    start: &Checkpoint,
    data: &SequenceSet,
    hyper: &Hyper,
) -> Result<TrainOutcome> {
    let (params, _, log) = run_job(Job {
        stage: format!("pretrain:{}", start.spec.role.describe()),
        learner_spec: start.spec,
        learner: start.params.clone(),
        teacher: None,
        data,
        hyper,
        opts: DistillOptions::default(),
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(start.spec, params),
        log,
    })
}

/// One joint distillation stage between an arbitrary learner and a stronger
/// teacher; both models update. Used directly by chained paths, and via
/// [`distill_stage`] for the student.
pub fn distill_pair(
    learner: &Checkpoint,
    teacher: &Checkpoint,
    data: &SequenceSet,
    hyper: &Hyper,
    opts: &DistillOptions,
) -> Result<DistillOutcome> {
    if !matches!(teacher.spec.role, Role::Teacher(_)) {
        return Err(Error::Role {
            expected: "T1..T4".into(),
            got: teacher.spec.role.describe(),
        });
    }
    let stage = format!(
        "distill:{}<{}",
        learner.spec.role.describe(),
        teacher.spec.role.describe()
    );
    let (lparams, tparams, log) = run_job(Job {
        stage,
        learner_spec: learner.spec,
        learner: learner.params.clone(),
        teacher: Some((teacher.spec, teacher.params.clone())),
        data,
        hyper,
        opts: *opts,
    })?;
    Ok(DistillOutcome {
        learner: Checkpoint::new(learner.spec, lparams),
        teacher: Checkpoint::new(teacher.spec, tparams.expect("teacher participated")),
        log,
    })
}

/// Joint distillation stage with the student as the learner.
pub fn distill_stage(
    student: &Checkpoint,
    teacher: &Checkpoint,
    data: &SequenceSet,
    hyper: &Hyper,
    opts: &DistillOptions,
) -> Result<DistillOutcome> {
    if student.spec.role != Role::Student {
        return Err(Error::Role {
            expected: "S".into(),
            got: student.spec.role.describe(),
        });
    }
    distill_pair(student, teacher, data, hyper, opts)
}

/// Architecture family shared by one experiment: desk-scale defaults with
/// the data's dimensions filled in.
#[derive(Clone, Copy, Debug)]
pub struct ModelFamily {
    pub layers: usize,
    pub past_extent: usize,
    pub channels: usize,
    pub aux_channels: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelFamily {
    pub fn for_data(data: &SequenceSet) -> ModelFamily {
        let s = ModelSpec::student(data.feature_dim, data.num_classes);
        ModelFamily {
            layers: s.layers,
            past_extent: s.past_extent,
            channels: s.channels,
            aux_channels: s.aux_channels,
            input_dim: s.input_dim,
            num_classes: s.num_classes,
        }
    }

    pub fn spec(&self, id: ModelId) -> ModelSpec {
        ModelSpec {
            role: match id {
                ModelId::S => Role::Student,
                ModelId::T(k) => Role::Teacher(k),
            },
            layers: self.layers,
            past_extent: self.past_extent,
            channels: self.channels,
            aux_channels: self.aux_channels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }
}

/// Lazily trained base checkpoints, keyed by model name. Stage `i+1` of a
/// path reads only the saved learner and the pretrained teacher from here.
#[derive(Default)]
pub struct Pretrained {
    pub models: BTreeMap<String, Checkpoint>,
    pub logs: BTreeMap<String, TrainLog>,
}

impl Pretrained {
    pub fn ensure(
        &mut self,
        id: ModelId,
        family: &ModelFamily,
        data: &SequenceSet,
        hyper: &Hyper,
    ) -> Result<&Checkpoint> {
        let key = id.describe();
        if !self.models.contains_key(&key) {
            let outcome = train_single(&family.spec(id), data, hyper)?;
            self.logs.insert(key.clone(), outcome.log);
            self.models.insert(key.clone(), outcome.checkpoint);
        }
        Ok(&self.models[&key])
    }
}

pub struct PathOutcome {
    pub student: Checkpoint,
    pub stage_logs: Vec<TrainLog>,
}

/// Run a whole distillation path. Curriculum direction: the student from the
/// previous stage meets each pretrained teacher in order. Chained direction:
/// each link distills the previous product into the next model, ending at
/// the student.
pub fn run_path(
    path: &KdPath,
    family: &ModelFamily,
    data: &SequenceSet,
    hyper: &Hyper,
    opts: &DistillOptions,
    base: &mut Pretrained,
) -> Result<PathOutcome> {
    let mut stage_logs = Vec::new();
    match path.direction {
        PathDirection::Curriculum => {
            let mut student = base.ensure(ModelId::S, family, data, hyper)?.clone();
            for &node in &path.nodes[1..] {
                let teacher = base.ensure(node, family, data, hyper)?.clone();
                let out = distill_stage(&student, &teacher, data, hyper, opts)?;
                student = out.learner;
                stage_logs.push(out.log);
            }
            Ok(PathOutcome {
                student,
                stage_logs,
            })
        }
        PathDirection::Takd => {
            let mut product = base.ensure(path.nodes[0], family, data, hyper)?.clone();
            for &node in &path.nodes[1..] {
                let learner = base.ensure(node, family, data, hyper)?.clone();
                let out = distill_pair(&learner, &product, data, hyper, opts)?;
                product = out.learner;
                stage_logs.push(out.log);
            }
            Ok(PathOutcome {
                student: product,
                stage_logs,
            })
        }
    }
}

/// Fraction of the baseline-to-teacher gap a distilled result recovers, in
/// percent.
pub fn gap_reduction(baseline: f64, distilled: f64, teacher: f64) -> Result<f64> {
    if teacher <= baseline {
        return Err(Error::Invalid {
            op: "gap_reduction",
            msg: format!("teacher ({teacher}) must exceed the baseline ({baseline})"),
        });
    }
    Ok(100.0 * (distilled - baseline) / (teacher - baseline))
}

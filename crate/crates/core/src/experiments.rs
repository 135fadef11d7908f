//! Multi-seed benchmark driver: pretrains the whole model family, runs the
//! distillation variants and the anticipation sweep, and collects the
//! windowed-posterior ceilings. Independent runs fan out across the thread
//! pool; each run is single-threaded and deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::anticipate::{self, AnticipationCheckpoint, SweepPoint};
use crate::checkpoint::{Checkpoint, RawCheckpoint, ROLE_TAG_ANTICIPATION};
use crate::error::Result;
use crate::loss::{DistillOptions, Hyper};
use crate::metrics::{self, EvalReport, Metric};
use crate::model;
use crate::oracle;
use crate::par;
use crate::synth::{GenConfig, GeneratedData, SequenceSet};
use crate::train::{self, KdPath, ModelFamily, ModelId, Pretrained, TrainLog};

/// Any model the evaluator understands.
pub enum AnyModel {
    Plain(Checkpoint),
    Anticipation(AnticipationCheckpoint),
}

impl AnyModel {
    pub fn describe(&self) -> String {
        match self {
            AnyModel::Plain(c) => c.spec.role.describe(),
            AnyModel::Anticipation(a) => format!("anticipation:P{}", a.spec.horizon),
        }
    }

    /// Future frames the model can see per output: 0 for causal models.
    pub fn future_extent(&self) -> usize {
        match self {
            AnyModel::Plain(c) => c.spec.future_extent(),
            AnyModel::Anticipation(_) => 0,
        }
    }
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    let raw = RawCheckpoint::from_bytes(&std::fs::read(path)?)?;
    if raw.role_tag == ROLE_TAG_ANTICIPATION {
        Ok(AnyModel::Anticipation(AnticipationCheckpoint::from_raw(raw)?))
    } else {
        Ok(AnyModel::Plain(Checkpoint::from_raw(raw)?))
    }
}

/// Per-frame class probabilities for every sequence, concatenated, plus the
/// matching labels.
pub fn model_scores(model: &AnyModel, data: &SequenceSet) -> Result<(Vec<f64>, Vec<usize>)> {
    let per_seq = par::map_indexed(data.sequences.len(), |i| -> Result<Vec<f64>> {
        let seq = &data.sequences[i];
        match model {
            AnyModel::Plain(c) => {
                let x = seq.features_tensor(data.feature_dim);
                let trace = model::forward(&c.params, &c.spec, &x)?;
                Ok(crate::ops::softmax_temp(&trace.logits, 1.0)?.data().to_vec())
            }
            AnyModel::Anticipation(a) => anticipate::anticipation_scores(a, seq),
        }
    });
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for (r, seq) in per_seq.into_iter().zip(&data.sequences) {
        flat.extend(r?);
        labels.extend(seq.labels_usize());
    }
    Ok((flat, labels))
}

/// Evaluate a model on a labeled set; optionally adds the portion-wise
/// breakdown with the given number of bins.
pub fn evaluate_model(
    model: &AnyModel,
    data: &SequenceSet,
    metric: Metric,
    portions: Option<usize>,
) -> Result<EvalReport> {
    let (scores, labels) = model_scores(model, data)?;
    let mut report = metrics::evaluate(&scores, &labels, data.num_classes, metric)?;
    if let Some(bins) = portions {
        report.portions = Some(metrics::portion_eval(
            &scores,
            &labels,
            data.num_classes,
            bins,
            false,
        )?);
    }
    Ok(report)
}

fn test_map(ckpt: &Checkpoint, test: &SequenceSet) -> Result<f64> {
    Ok(evaluate_model(&AnyModel::Plain(ckpt.clone()), test, Metric::Map, None)?.headline())
}

/// Everything one seed of the benchmark produces, as test mAP percentages.
#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// S, T1..T4 after classification-only training.
    pub base_map: BTreeMap<String, f64>,
    /// Direct `S>T4` stage with the logit term only (alpha = 0).
    pub logit_only_map: f64,
    /// Direct `S>T4` stage with both distillation terms.
    pub direct_map: f64,
    /// Full curriculum `S>T1>T2>T3>T4`.
    pub curriculum_map: f64,
    /// Anticipation baseline over the horizon sweep.
    pub anticipation: Vec<SweepPoint>,
}

impl SeedOutcome {
    pub fn best_anticipation(&self) -> f64 {
        self.anticipation
            .iter()
            .map(|p| p.map_pct)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkArtifacts {
    pub per_seed: Vec<SeedOutcome>,
    /// `(future window, oracle test mAP percent)`, window 0 first.
    pub oracle_windows: Vec<(usize, f64)>,
}

impl BenchmarkArtifacts {
    pub fn mean_base(&self, name: &str) -> f64 {
        let s: f64 = self.per_seed.iter().map(|o| o.base_map[name]).sum();
        s / self.per_seed.len() as f64
    }

    pub fn oracle_at(&self, window: usize) -> Option<f64> {
        self.oracle_windows
            .iter()
            .find(|(w, _)| *w == window)
            .map(|(_, m)| *m)
    }
}

/// Hyperparameters used by the desk-scale benchmark runs: paper defaults
/// with the epoch budget cut down to what a laptop-class CPU finishes in
/// minutes.
pub fn desk_hyper(seed: u64) -> Hyper {
    Hyper {
        epochs: 6,
        ..Hyper::default()
    }
    .with_seed(seed)
}

/// Horizons the anticipation sweep covers.
pub const SWEEP_HORIZONS: [usize; 6] = [1, 2, 3, 4, 5, 6];

/// Windows at which the posterior ceilings are computed: the future extents
/// of S and T1..T4.
pub const ORACLE_WINDOWS: [usize; 5] = [0, 2, 4, 6, 8];

fn run_seed(
    data: &GeneratedData,
    family: &ModelFamily,
    hyper: &Hyper,
    opts: &DistillOptions,
) -> Result<SeedOutcome> {
    let mut base = Pretrained::default();
    for id in [ModelId::S, ModelId::T(1), ModelId::T(2), ModelId::T(3), ModelId::T(4)] {
        base.ensure(id, family, &data.train, hyper)?;
    }
    let mut base_map = BTreeMap::new();
    for (name, ckpt) in &base.models {
        base_map.insert(name.clone(), test_map(ckpt, &data.test)?);
    }

    let logit_only_hyper = Hyper { alpha: 0.0, ..*hyper };
    let s = base.models["S"].clone();
    let t4 = base.models["T4"].clone();
    let logit_only = train::distill_stage(&s, &t4, &data.train, &logit_only_hyper, opts)?;
    let logit_only_map = test_map(&logit_only.learner, &data.test)?;

    let direct = train::distill_stage(&s, &t4, &data.train, hyper, opts)?;
    let direct_map = test_map(&direct.learner, &data.test)?;

    let path = KdPath {
        nodes: vec![ModelId::S, ModelId::T(1), ModelId::T(2), ModelId::T(3), ModelId::T(4)],
        direction: train::PathDirection::Curriculum,
    };
    let curriculum = train::run_path(&path, family, &data.train, hyper, opts, &mut base)?;
    let curriculum_map = test_map(&curriculum.student, &data.test)?;

    let anticipation = anticipate::sweep(
        &family.spec(ModelId::S),
        &data.train,
        &data.test,
        hyper,
        &SWEEP_HORIZONS,
    )?;

    Ok(SeedOutcome {
        seed: hyper.seed,
        base_map,
        logit_only_map,
        direct_map,
        curriculum_map,
        anticipation,
    })
}

/// Run the whole benchmark grid over a list of seeds. The dataset is fixed;
/// seeds vary initialization and batching.
pub fn run_benchmark(
    cfg: &GenConfig,
    data: &GeneratedData,
    seeds: &[u64],
    opts: &DistillOptions,
) -> Result<BenchmarkArtifacts> {
    let family = ModelFamily::for_data(&data.train);
    let per_seed = par::map_indexed(seeds.len(), |i| {
        run_seed(data, &family, &desk_hyper(seeds[i]), opts)
    });
    let oracle_windows = par::map_indexed(ORACLE_WINDOWS.len(), |i| -> Result<(usize, f64)> {
        let w = ORACLE_WINDOWS[i];
        let run = oracle::bayes_oracle(cfg, &data.test, w)?;
        Ok((w, 100.0 * run.report.map))
    });
    let mut seeds_out = Vec::new();
    for s in per_seed {
        seeds_out.push(s?);
    }
    let mut windows = Vec::new();
    for w in oracle_windows {
        windows.push(w?);
    }
    Ok(BenchmarkArtifacts {
        per_seed: seeds_out,
        oracle_windows: windows,
    })
}

/// Stage logs from a path run flattened into one log.
pub fn concat_logs(logs: &[TrainLog]) -> TrainLog {
    TrainLog {
        records: logs.iter().flat_map(|l| l.records.clone()).collect(),
    }
}

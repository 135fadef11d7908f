//! Per-frame ranking metrics: average precision, calibrated average
//! precision, their class means, and the portion-wise early/late breakdown.

use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::par;

/// Indices of `scores` sorted by descending score, ties broken by original
/// index so rankings are deterministic.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

fn ap_walk(scores: &[f64], positives: &[bool], omega: Option<f64>) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Shape {
            op: "average_precision",
            what: "positives",
            expected: format!("{} flags", scores.len()),
            got: vec![positives.len()],
        });
    }
    let p = positives.iter().filter(|&&b| b).count();
    if p == 0 {
        return Err(Error::Invalid {
            op: "average_precision",
            msg: "needs at least one positive frame".into(),
        });
    }
    if let Some(w) = omega {
        if !(w > 0.0) {
            return Err(Error::Invalid {
                op: "calibrated_ap",
                msg: format!("omega must be positive, got {w}"),
            });
        }
    }
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut acc = 0.0f64;
    for i in ranked_indices(scores) {
        if positives[i] {
            tp += 1.0;
            let prec = match omega {
                Some(w) => tp / (tp + fp / w),
                None => tp / (tp + fp),
            };
            acc += prec;
        } else {
            fp += 1.0;
        }
    }
    Ok(acc / p as f64)
}

/// Area-free average precision over a ranked frame list: mean of the
/// precision at each true-positive rank.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    ap_walk(scores, positives, None)
}

/// Average precision with false positives discounted by the
/// background-to-positive ratio `omega`; equals plain AP at `omega = 1`.
pub fn calibrated_ap(scores: &[f64], positives: &[bool], omega: f64) -> Result<f64> {
    ap_walk(scores, positives, Some(omega))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Metric {
    #[serde(rename = "map")]
    Map,
    #[serde(rename = "mcap")]
    McAp,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassEval {
    pub class: usize,
    pub ap: f64,
    pub cap: f64,
    pub omega: f64,
    pub positives: usize,
}

/// Evaluation summary. All AP values are fractions in [0, 1]; the JSON/CSV
/// emitters report percentages.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub per_class: Vec<ClassEval>,
    pub map: f64,
    pub mcap: f64,
    pub frames: usize,
    /// Classes with no ground-truth frames, excluded from the means.
    pub skipped_classes: Vec<usize>,
    /// Portion-wise mcAP (fractions), when requested.
    pub portions: Option<Vec<f64>>,
}

impl EvalReport {
    /// Headline value in percent, according to the requested metric.
    pub fn headline(&self) -> f64 {
        100.0 * match self.metric {
            Metric::Map => self.map,
            Metric::McAp => self.mcap,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "metric": match self.metric { Metric::Map => "map", Metric::McAp => "mcap" },
            "frames": self.frames,
            "map_pct": 100.0 * self.map,
            "mcap_pct": 100.0 * self.mcap,
            "omega_scope": "per-class: (background + other-class frames) / class frames",
            "classes": self.per_class.iter().map(|c| json!({
                "class": c.class,
                "ap_pct": 100.0 * c.ap,
                "cap_pct": 100.0 * c.cap,
                "omega": c.omega,
                "positives": c.positives,
            })).collect::<Vec<_>>(),
            "skipped_classes": self.skipped_classes,
            "portions_mcap_pct": self.portions.as_ref().map(|p| {
                p.iter().map(|v| 100.0 * v).collect::<Vec<_>>()
            }),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,class_or_bin,ap_pct,cap_pct,omega,positives\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "class,{},{:.4},{:.4},{:.6},{}\n",
                c.class,
                100.0 * c.ap,
                100.0 * c.cap,
                c.omega,
                c.positives
            ));
        }
        out.push_str(&format!("mean,map,{:.4},,,\n", 100.0 * self.map));
        out.push_str(&format!("mean,mcap,,{:.4},,\n", 100.0 * self.mcap));
        if let Some(portions) = &self.portions {
            for (b, v) in portions.iter().enumerate() {
                out.push_str(&format!("portion,{b},,{:.4},,\n", 100.0 * v));
            }
        }
        out
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    for (frame, &l) in labels.iter().enumerate() {
        if l > num_classes {
            return Err(Error::LabelRange {
                frame,
                label: l,
                max: num_classes,
            });
        }
    }
    Ok(())
}

/// Per-class AP and calibrated AP over concatenated frames.
///
/// `frame_scores` is row-major `[frames, num_classes + 1]` with column 0 the
/// background score; `labels` holds 0 for background and `m` for class `m`.
/// Per class, `omega` is the ratio of all other frames (background plus
/// other classes) to the class's own frames.
pub fn evaluate(
    frame_scores: &[f64],
    labels: &[usize],
    num_classes: usize,
    metric: Metric,
) -> Result<EvalReport> {
    let width = num_classes + 1;
    if labels.is_empty() || frame_scores.len() != labels.len() * width {
        return Err(Error::Shape {
            op: "evaluate",
            what: "frame_scores",
            expected: format!("{} x {width} values", labels.len()),
            got: vec![frame_scores.len()],
        });
    }
    check_labels(labels, num_classes)?;
    let frames = labels.len();
    if labels.iter().all(|&l| l == 0) {
        return Err(Error::Invalid {
            op: "evaluate",
            msg: "no action frames in ground truth".into(),
        });
    }

    let evals = par::map_indexed(num_classes, |ci| -> Result<Option<ClassEval>> {
        let class = ci + 1;
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let pos_count = positives.iter().filter(|&&b| b).count();
        if pos_count == 0 {
            return Ok(None);
        }
        let scores: Vec<f64> = (0..frames)
            .map(|t| frame_scores[t * width + class])
            .collect();
        let omega = (frames - pos_count) as f64 / pos_count as f64;
        let ap = average_precision(&scores, &positives)?;
        let cap = calibrated_ap(&scores, &positives, omega)?;
        Ok(Some(ClassEval {
            class,
            ap,
            cap,
            omega,
            positives: pos_count,
        }))
    });

    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for (ci, e) in evals.into_iter().enumerate() {
        match e? {
            Some(c) => per_class.push(c),
            None => skipped.push(ci + 1),
        }
    }
    let n = per_class.len() as f64;
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / n;
    let mcap = per_class.iter().map(|c| c.cap).sum::<f64>() / n;
    Ok(EvalReport {
        metric,
        per_class,
        map,
        mcap,
        frames,
        skipped_classes: skipped,
        portions: None,
    })
}

/// Maximal runs of a constant nonzero label: `(start, end_exclusive, class)`.
pub fn instances(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        if labels[t] == 0 {
            t += 1;
            continue;
        }
        let class = labels[t];
        let start = t;
        while t < labels.len() && labels[t] == class {
            t += 1;
        }
        out.push((start, t, class));
    }
    out
}

/// mcAP restricted to action frames in each relative-position bin of their
/// instance. Frame `j` of an `n`-frame instance lands in bin
/// `j * bins / n`. Per class and bin, the evaluated set is that bin's class
/// frames plus all background frames; action frames outside the bin are
/// excluded entirely unless `include_other_bins` keeps them as negatives.
pub fn portion_eval(
    frame_scores: &[f64],
    labels: &[usize],
    num_classes: usize,
    bins: usize,
    include_other_bins: bool,
) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::Invalid {
            op: "portion_eval",
            msg: "bins must be at least 1".into(),
        });
    }
    let width = num_classes + 1;
    if labels.is_empty() || frame_scores.len() != labels.len() * width {
        return Err(Error::Shape {
            op: "portion_eval",
            what: "frame_scores",
            expected: format!("{} x {width} values", labels.len()),
            got: vec![frame_scores.len()],
        });
    }
    check_labels(labels, num_classes)?;
    let runs = instances(labels);
    if runs.is_empty() {
        return Err(Error::Invalid {
            op: "portion_eval",
            msg: "labels contain no action instance".into(),
        });
    }

    // Bin index per frame; usize::MAX marks background.
    let mut frame_bin = vec![usize::MAX; labels.len()];
    for &(start, end, _) in &runs {
        let n = end - start;
        for j in 0..n {
            frame_bin[start + j] = j * bins / n;
        }
    }

    let out = par::map_indexed(bins, |b| -> Result<f64> {
        let mut caps = Vec::new();
        for class in 1..=num_classes {
            let mut scores = Vec::new();
            let mut positives = Vec::new();
            for (t, &l) in labels.iter().enumerate() {
                let keep = if l == 0 {
                    true
                } else if l == class && frame_bin[t] == b {
                    true
                } else {
                    include_other_bins
                };
                if keep {
                    scores.push(frame_scores[t * width + class]);
                    positives.push(l == class && frame_bin[t] == b);
                }
            }
            let pos = positives.iter().filter(|&&p| p).count();
            if pos == 0 {
                continue;
            }
            let omega = (scores.len() - pos) as f64 / pos as f64;
            caps.push(calibrated_ap(&scores, &positives, omega)?);
        }
        if caps.is_empty() {
            Ok(0.0)
        } else {
            Ok(caps.iter().sum::<f64>() / caps.len() as f64)
        }
    });
    out.into_iter().collect()
}

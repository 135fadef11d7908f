//! Exact per-frame class posterior for the synthetic generator, with the
//! backward pass truncated at a configurable future window. Window 0 is pure
//! filtering (the ceiling for any online model); a window covering the rest
//! of the sequence is full smoothing (the offline ceiling). Every model
//! trained on the benchmark is information-bounded by the posterior with a
//! window matching its receptive future extent.

use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, Metric};
use crate::par;
use crate::synth::{prototypes, GenConfig, Sequence, SequenceSet};

/// The generator's latent chain in dense form: state 0 is background, then
/// `ambiguity_len + 1` phases per class (onset phases emit the group
/// prototype, the final phase the class prototype).
pub struct Chain {
    protos: Vec<Vec<f64>>,
    class_of: Vec<usize>,
    num_classes: usize,
    steady: usize,
    qb: f64,
    qa: f64,
    sigma: f64,
}

impl Chain {
    pub fn from_config(cfg: &GenConfig) -> Result<Chain> {
        cfg.validate()?;
        let p = prototypes(cfg);
        let steady = cfg.ambiguity_len;
        let mut protos = vec![p.background.clone()];
        let mut class_of = vec![0usize];
        for class in 1..=cfg.num_classes {
            for phase in 0..=steady {
                protos.push(if phase < steady {
                    p.group[cfg.group_of(class)].clone()
                } else {
                    p.class[class - 1].clone()
                });
                class_of.push(class);
            }
        }
        Ok(Chain {
            protos,
            class_of,
            num_classes: cfg.num_classes,
            steady,
            qb: 1.0 / cfg.mean_background_len,
            qa: 1.0 / cfg.mean_action_len,
            sigma: cfg.noise_sigma,
        })
    }

    pub fn num_states(&self) -> usize {
        self.protos.len()
    }

    fn state(&self, class: usize, phase: usize) -> usize {
        1 + (class - 1) * (self.steady + 1) + phase
    }

    /// Per-state emission weights for one frame, scaled so the best state
    /// has weight 1.
    fn emission_weights(&self, x: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut best = f64::NEG_INFINITY;
        for (s, proto) in self.protos.iter().enumerate() {
            let mut d2 = 0.0;
            for (a, b) in x.iter().zip(proto) {
                let d = a - b;
                d2 += d * d;
            }
            out[s] = -d2 * inv;
            best = best.max(out[s]);
        }
        for v in out.iter_mut() {
            *v = (*v - best).exp();
        }
    }

    /// `dst[s] = sum_{s'} A[s', s] src[s']` — push mass one step forward.
    fn step_forward(&self, src: &[f64], dst: &mut [f64]) {
        let action_mass: f64 = src[1..].iter().sum();
        dst[0] = (1.0 - self.qb) * src[0] + self.qa * action_mass;
        let enter = self.qb * src[0] / self.num_classes as f64;
        let stay = 1.0 - self.qa;
        for class in 1..=self.num_classes {
            if self.steady == 0 {
                let s = self.state(class, 0);
                dst[s] = enter + stay * src[s];
            } else {
                dst[self.state(class, 0)] = enter;
                for phase in 1..self.steady {
                    dst[self.state(class, phase)] = stay * src[self.state(class, phase - 1)];
                }
                dst[self.state(class, self.steady)] = stay
                    * (src[self.state(class, self.steady - 1)]
                        + src[self.state(class, self.steady)]);
            }
        }
    }

    /// `dst[s] = sum_{s'} A[s, s'] w[s']` — pull evidence one step backward.
    fn step_backward(&self, w: &[f64], dst: &mut [f64]) {
        let mut first_phase_mass = 0.0;
        for class in 1..=self.num_classes {
            first_phase_mass += w[self.state(class, 0)];
        }
        dst[0] = (1.0 - self.qb) * w[0] + self.qb * first_phase_mass / self.num_classes as f64;
        let stay = 1.0 - self.qa;
        for class in 1..=self.num_classes {
            for phase in 0..=self.steady {
                let next = w[self.state(class, (phase + 1).min(self.steady))];
                dst[self.state(class, phase)] = self.qa * w[0] + stay * next;
            }
        }
    }

    /// Per-frame class posteriors `[T, num_classes + 1]` given evidence up
    /// to `t + window` at each frame `t`.
    pub fn posterior_scores(&self, seq: &Sequence, feature_dim: usize, window: usize) -> Vec<f64> {
        let t_len = seq.len();
        let s_n = self.num_states();
        let xs = seq.features_tensor(feature_dim);

        let mut emis = vec![0.0f64; t_len * s_n];
        for t in 0..t_len {
            let row = xs.row(t);
            self.emission_weights(row, &mut emis[t * s_n..(t + 1) * s_n]);
        }

        // Forward pass, normalized per frame. The chain starts in background.
        let mut alpha = vec![0.0f64; t_len * s_n];
        let mut scratch = vec![0.0f64; s_n];
        for t in 0..t_len {
            let (done, rest) = alpha.split_at_mut(t * s_n);
            let a = &mut rest[..s_n];
            let e = &emis[t * s_n..(t + 1) * s_n];
            if t == 0 {
                a[0] = e[0];
            } else {
                self.step_forward(&done[(t - 1) * s_n..t * s_n], &mut scratch);
                for s in 0..s_n {
                    a[s] = scratch[s] * e[s];
                }
            }
            let z: f64 = a.iter().sum();
            for v in a.iter_mut() {
                *v /= z;
            }
        }

        // Posterior at t: alpha_t combined with a backward pass truncated at
        // t + window.
        let width = self.num_classes + 1;
        let mut out = vec![0.0f64; t_len * width];
        let mut beta = vec![0.0f64; s_n];
        let mut next = vec![0.0f64; s_n];
        let mut weighted = vec![0.0f64; s_n];
        for t in 0..t_len {
            let horizon = (t + window).min(t_len - 1);
            beta.fill(1.0);
            let mut u = horizon;
            while u > t {
                let e = &emis[u * s_n..(u + 1) * s_n];
                for s in 0..s_n {
                    weighted[s] = e[s] * beta[s];
                }
                self.step_backward(&weighted, &mut next);
                std::mem::swap(&mut beta, &mut next);
                let z: f64 = beta.iter().sum();
                for v in beta.iter_mut() {
                    *v /= z;
                }
                u -= 1;
            }
            let a = &alpha[t * s_n..(t + 1) * s_n];
            let mut post: f64 = 0.0;
            for s in 0..s_n {
                weighted[s] = a[s] * beta[s];
                post += weighted[s];
            }
            let row = &mut out[t * width..(t + 1) * width];
            row.fill(0.0);
            for s in 0..s_n {
                row[self.class_of[s]] += weighted[s] / post;
            }
        }
        out
    }
}

pub struct OracleRun {
    /// Per-sequence posterior scores `[T, M + 1]`.
    pub scores: Vec<Vec<f64>>,
    pub report: EvalReport,
}

/// Exact windowed posterior over every sequence in `data`, evaluated with
/// the per-frame metrics. Rejects data whose provenance does not match the
/// config.
pub fn bayes_oracle(cfg: &GenConfig, data: &SequenceSet, window: usize) -> Result<OracleRun> {
    let hash = cfg.hash();
    if data.provenance != hash {
        return Err(Error::Provenance {
            expected: hash,
            got: data.provenance.clone(),
        });
    }
    if data.sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chain = Chain::from_config(cfg)?;
    let scores = par::map_indexed(data.sequences.len(), |i| {
        chain.posterior_scores(&data.sequences[i], data.feature_dim, window)
    });
    let mut flat = Vec::with_capacity(data.total_frames() * (data.num_classes + 1));
    let mut labels = Vec::with_capacity(data.total_frames());
    for (seq, s) in data.sequences.iter().zip(&scores) {
        flat.extend_from_slice(s);
        labels.extend(seq.labels_usize());
    }
    let report = metrics::evaluate(&flat, &labels, data.num_classes, Metric::Map)?;
    Ok(OracleRun { scores, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    fn quick_cfg() -> GenConfig {
        GenConfig {
            num_classes: 4,
            feature_dim: 8,
            ambiguity_len: 3,
            confusion_groups: vec![vec![1, 2], vec![3, 4]],
            mean_background_len: 10.0,
            mean_action_len: 12.0,
            noise_sigma: 1.2,
            prototype_separation: 1.0,
            seq_len: 96,
            train_sequences: 2,
            test_sequences: 10,
            seed: 33,
        }
    }

    #[test]
    fn posteriors_are_distributions() {
        let cfg = quick_cfg();
        let data = generate(&cfg).unwrap();
        let chain = Chain::from_config(&cfg).unwrap();
        for w in [0usize, 3, 16] {
            let scores = chain.posterior_scores(&data.test.sequences[0], cfg.feature_dim, w);
            let width = cfg.num_classes + 1;
            for t in 0..data.test.sequences[0].len() {
                let s: f64 = scores[t * width..(t + 1) * width].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "w={w} t={t} sum={s}");
                assert!(scores[t * width..(t + 1) * width].iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn no_ambiguity_low_noise_filtering_is_near_perfect() {
        let mut cfg = quick_cfg();
        cfg.ambiguity_len = 0;
        cfg.noise_sigma = 0.05;
        let data = generate(&cfg).unwrap();
        let run = bayes_oracle(&cfg, &data.test, 0).unwrap();
        assert!(
            run.report.map >= 0.99,
            "filtering mAP = {}",
            run.report.map
        );
    }

    #[test]
    fn map_non_decreasing_in_window() {
        let cfg = quick_cfg();
        let data = generate(&cfg).unwrap();
        let mut last = 0.0f64;
        for w in [0usize, 2, 4, 8] {
            let run = bayes_oracle(&cfg, &data.test, w).unwrap();
            assert!(
                run.report.map >= last - 0.003,
                "w={w}: {} < {last}",
                run.report.map
            );
            last = run.report.map;
        }
    }

    #[test]
    fn provenance_mismatch_rejected() {
        let cfg = quick_cfg();
        let data = generate(&cfg).unwrap();
        let mut other = cfg.clone();
        other.seed = 99;
        assert!(matches!(
            bayes_oracle(&other, &data.test, 0),
            Err(Error::Provenance { .. })
        ));
    }

    #[test]
    fn state_count_stays_small() {
        let cfg = GenConfig::default_benchmark();
        let chain = Chain::from_config(&cfg).unwrap();
        assert!(chain.num_states() <= cfg.num_classes * (cfg.ambiguity_len + 2));
    }
}

//! Seeded synthetic streaming-action benchmark.
//!
//! A hidden Markov chain alternates background and action segments with
//! geometric lengths. For the first `ambiguity_len` frames of an action the
//! emission prototype is shared by the class's whole confusion group, so an
//! online observer cannot tell group members apart at the onset; the frames
//! only become unambiguous once the class's own prototype starts emitting.
//! That is the information gap the offset teachers (and the windowed Bayes
//! posterior in [`crate::oracle`]) get to exploit.
//!
//! Dataset files: magic `PKDS`, u32 version (1), u32 class count, u32
//! feature dim, u32 sequence count; per sequence a u32 frame count, `T*D`
//! little-endian f32 features, then `T` u16 labels. A JSON sidecar carries
//! the generator config and its hash.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::par;
use crate::seeds;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PKDS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Frames at each action onset emitted from the confusion-group
    /// prototype instead of the class prototype.
    pub ambiguity_len: usize,
    /// Partition of `1..=num_classes`.
    pub confusion_groups: Vec<Vec<usize>>,
    pub mean_background_len: f64,
    pub mean_action_len: f64,
    pub noise_sigma: f64,
    pub prototype_separation: f64,
    pub seq_len: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub seed: u64,
}

impl GenConfig {
    /// The benchmark configuration every trend experiment runs on. Noise and
    /// ambiguity are set so that the exact filtering posterior lands in the
    /// 60-80% mAP band and an 8-frame future window buys several points.
    pub fn default_benchmark() -> GenConfig {
        GenConfig {
            num_classes: 6,
            feature_dim: 16,
            ambiguity_len: 8,
            confusion_groups: vec![vec![1, 2], vec![3, 4], vec![5, 6]],
            mean_background_len: 20.0,
            mean_action_len: 24.0,
            noise_sigma: 0.95,
            prototype_separation: 1.0,
            seq_len: 256,
            train_sequences: 200,
            test_sequences: 60,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Error::Invalid { op: "gen_config", msg };
        if self.num_classes == 0 || self.feature_dim == 0 || self.seq_len == 0 {
            return Err(invalid("classes, feature dim, and T must be positive".into()));
        }
        if self.train_sequences == 0 || self.test_sequences == 0 {
            return Err(invalid("train and test counts must be positive".into()));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(invalid(format!("noise_sigma must be positive, got {}", self.noise_sigma)));
        }
        if !(self.mean_background_len >= 1.0 && self.mean_action_len >= 1.0) {
            return Err(invalid("mean segment lengths must be at least 1 frame".into()));
        }
        if (self.ambiguity_len as f64) >= self.mean_action_len {
            return Err(invalid(format!(
                "ambiguity_len {} must be shorter than the mean action length {}",
                self.ambiguity_len, self.mean_action_len
            )));
        }
        let mut seen = vec![false; self.num_classes + 1];
        for group in &self.confusion_groups {
            for &c in group {
                if c == 0 || c > self.num_classes || seen[c] {
                    return Err(invalid(format!(
                        "confusion groups must partition 1..={}, class {c} repeated or out of range",
                        self.num_classes
                    )));
                }
                seen[c] = true;
            }
        }
        if seen[1..].iter().any(|&s| !s) {
            return Err(invalid("every class must belong to exactly one confusion group".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON encoding; doubles as dataset provenance.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex(&h.finalize())
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.confusion_groups
            .iter()
            .position(|g| g.contains(&class))
            .expect("validated partition")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// Row-major `[T, D]`, stored at file precision.
    pub features: Vec<f32>,
    pub labels: Vec<u16>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features_tensor(&self, feature_dim: usize) -> Tensor {
        let data = self.features.iter().map(|&v| f64::from(v)).collect();
        Tensor::from_vec(&[self.len(), feature_dim], data).expect("stored shape is consistent")
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSet {
    pub sequences: Vec<Sequence>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Hash of the generating config; empty for data of unknown origin.
    pub provenance: String,
}

impl SequenceSet {
    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u32).to_le_bytes());
        for seq in &self.sequences {
            out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
            for v in &seq.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for l in &seq.labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SequenceSet> {
        let fmt = |what: &str, msg: &str| Error::Format {
            format: "PKDS",
            what: what.to_string(),
            msg: msg.to_string(),
        };
        let mut r = Reader::new(bytes, "PKDS");
        if r.take(4)? != MAGIC {
            return Err(fmt("header", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt("header", &format!("unsupported version {version}")));
        }
        let num_classes = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut sequences = Vec::with_capacity(count);
        for si in 0..count {
            let t = r.u32()? as usize;
            if t == 0 {
                return Err(fmt(&format!("sequence {si}"), "empty sequence"));
            }
            let mut features = Vec::with_capacity(t * feature_dim);
            for _ in 0..t * feature_dim {
                features.push(r.f32()?);
            }
            let mut labels = Vec::with_capacity(t);
            for f in 0..t {
                let l = r.u16()?;
                if l as usize > num_classes {
                    return Err(fmt(
                        &format!("sequence {si} frame {f}"),
                        &format!("label {l} exceeds class count {num_classes}"),
                    ));
                }
                labels.push(l);
            }
            sequences.push(Sequence { features, labels });
        }
        if !r.done() {
            return Err(fmt("trailer", "unexpected trailing bytes"));
        }
        Ok(SequenceSet {
            sequences,
            num_classes,
            feature_dim,
            provenance: String::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SequenceSet> {
        let mut set = SequenceSet::from_bytes(&fs::read(path)?)?;
        // Pick up provenance from the sidecar when it exists.
        if let Ok(side) = Sidecar::load(&sidecar_path(path)) {
            set.provenance = side.hash;
        }
        Ok(set)
    }
}

/// `foo.pkds` -> `foo.pkds.json`.
pub fn sidecar_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: GenConfig,
    pub hash: String,
    pub split: String,
}

impl Sidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Sidecar> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub struct GeneratedData {
    pub train: SequenceSet,
    pub test: SequenceSet,
}

/// Emission prototypes: index 0 is the background (origin); then one per
/// confusion group, then one per class. Directions are seeded unit vectors
/// scaled to `prototype_separation`.
pub struct Prototypes {
    pub background: Vec<f64>,
    pub group: Vec<Vec<f64>>,
    pub class: Vec<Vec<f64>>,
}

pub fn prototypes(cfg: &GenConfig) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "prototypes", 0));
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..cfg.feature_dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x *= cfg.prototype_separation / norm;
        }
        v
    };
    let group = (0..cfg.confusion_groups.len()).map(|_| draw(&mut rng)).collect();
    let class = (0..cfg.num_classes).map(|_| draw(&mut rng)).collect();
    Prototypes {
        background: vec![0.0; cfg.feature_dim],
        group,
        class,
    }
}

/// One standard normal draw (Box-Muller on the ChaCha stream).
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Markov chain state: background, or (class, phase) with phases
/// `0..ambiguity_len` emitting the group prototype and the final phase the
/// class prototype.
#[derive(Clone, Copy, PartialEq, Eq)]
enum ChainState {
    Background,
    Action { class: usize, phase: usize },
}

fn generate_sequence(cfg: &GenConfig, protos: &Prototypes, global_index: u64) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "sequence", global_index));
    let qb = 1.0 / cfg.mean_background_len;
    let qa = 1.0 / cfg.mean_action_len;
    let steady = cfg.ambiguity_len;
    let d = cfg.feature_dim;

    let mut state = ChainState::Background;
    let mut features = Vec::with_capacity(cfg.seq_len * d);
    let mut labels = Vec::with_capacity(cfg.seq_len);
    for _ in 0..cfg.seq_len {
        let (proto, label): (&[f64], u16) = match state {
            ChainState::Background => (&protos.background, 0),
            ChainState::Action { class, phase } => {
                let p = if phase < steady {
                    &protos.group[cfg.group_of(class)]
                } else {
                    &protos.class[class - 1]
                };
                (p, class as u16)
            }
        };
        for i in 0..d {
            features.push((proto[i] + cfg.noise_sigma * gaussian(&mut rng)) as f32);
        }
        labels.push(label);

        state = match state {
            ChainState::Background => {
                if rng.gen::<f64>() < qb {
                    ChainState::Action {
                        class: rng.gen_range(1..=cfg.num_classes),
                        phase: 0,
                    }
                } else {
                    ChainState::Background
                }
            }
            ChainState::Action { class, phase } => {
                if rng.gen::<f64>() < qa {
                    ChainState::Background
                } else {
                    ChainState::Action {
                        class,
                        phase: (phase + 1).min(steady),
                    }
                }
            }
        };
    }
    Sequence { features, labels }
}

/// Generate the train and test splits. Sequences are seeded by their global
/// index, so the splits are disjoint by construction and each sequence is
/// reproducible in isolation.
pub fn generate(cfg: &GenConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let hash = cfg.hash();
    let total = cfg.train_sequences + cfg.test_sequences;
    let mut all = par::map_indexed(total, |i| generate_sequence(cfg, &protos, i as u64));
    let test_seqs = all.split_off(cfg.train_sequences);
    let make = |sequences: Vec<Sequence>| SequenceSet {
        sequences,
        num_classes: cfg.num_classes,
        feature_dim: cfg.feature_dim,
        provenance: hash.clone(),
    };
    Ok(GeneratedData {
        train: make(all),
        test: make(test_seqs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::instances;

    fn tiny_cfg() -> GenConfig {
        GenConfig {
            num_classes: 4,
            feature_dim: 6,
            ambiguity_len: 3,
            confusion_groups: vec![vec![1, 2], vec![3, 4]],
            mean_background_len: 8.0,
            mean_action_len: 10.0,
            noise_sigma: 0.5,
            prototype_separation: 1.0,
            seq_len: 64,
            train_sequences: 6,
            test_sequences: 3,
            seed: 5,
        }
    }

    #[test]
    fn deterministic_bytes_and_disjoint_splits() {
        let cfg = tiny_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train.to_bytes(), b.train.to_bytes());
        assert_eq!(a.test.to_bytes(), b.test.to_bytes());
        assert_ne!(a.train.sequences[0], a.test.sequences[0]);
        assert_eq!(a.train.provenance, cfg.hash());
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = tiny_cfg();
        let mut cfg2 = cfg.clone();
        cfg2.seed = 6;
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg2).unwrap();
        assert_ne!(a.train.to_bytes(), b.train.to_bytes());
        assert_ne!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn noiseless_unambiguous_data_is_nearest_prototype_separable() {
        let mut cfg = tiny_cfg();
        cfg.ambiguity_len = 0;
        cfg.noise_sigma = 1e-9;
        let data = generate(&cfg).unwrap();
        let protos = prototypes(&cfg);
        for seq in data.train.sequences.iter().chain(&data.test.sequences) {
            for (t, &label) in seq.labels.iter().enumerate() {
                let x: Vec<f64> = (0..cfg.feature_dim)
                    .map(|i| f64::from(seq.features[t * cfg.feature_dim + i]))
                    .collect();
                let dist = |p: &[f64]| -> f64 {
                    x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                let mut best = (0usize, dist(&protos.background));
                for c in 1..=cfg.num_classes {
                    let d = dist(&protos.class[c - 1]);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                assert_eq!(best.0, label as usize);
            }
        }
    }

    #[test]
    fn onset_frames_follow_partition_statistics() {
        let mut cfg = tiny_cfg();
        cfg.train_sequences = 40;
        cfg.ambiguity_len = 4;
        let data = generate(&cfg).unwrap();
        let mut onset_frames = 0usize;
        let mut onset_in_multi_group = 0usize;
        for seq in &data.train.sequences {
            let labels = seq.labels_usize();
            for (start, end, class) in instances(&labels) {
                let onset = cfg.ambiguity_len.min(end - start);
                onset_frames += onset;
                if cfg.confusion_groups[cfg.group_of(class)].len() > 1 {
                    onset_in_multi_group += onset;
                }
            }
        }
        // Every class sits in a two-member group here.
        assert!(onset_frames > 0);
        assert_eq!(onset_in_multi_group, onset_frames);

        // With a singleton group the fraction tracks the class distribution.
        let mut cfg2 = cfg.clone();
        cfg2.num_classes = 3;
        cfg2.confusion_groups = vec![vec![1, 2], vec![3]];
        let data2 = generate(&cfg2).unwrap();
        let (mut onset, mut multi) = (0usize, 0usize);
        for seq in &data2.train.sequences {
            let labels = seq.labels_usize();
            for (start, end, class) in instances(&labels) {
                let o = cfg2.ambiguity_len.min(end - start);
                onset += o;
                if cfg2.confusion_groups[cfg2.group_of(class)].len() > 1 {
                    multi += o;
                }
            }
        }
        let frac = multi as f64 / onset as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.1, "frac={frac}");
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut cfg = tiny_cfg();
        cfg.ambiguity_len = 10;
        assert!(generate(&cfg).is_err());
        let mut cfg = tiny_cfg();
        cfg.confusion_groups = vec![vec![1, 2], vec![3]];
        assert!(generate(&cfg).is_err());
        let mut cfg = tiny_cfg();
        cfg.noise_sigma = 0.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn pkds_roundtrip_bit_exact() {
        let cfg = tiny_cfg();
        let data = generate(&cfg).unwrap();
        let bytes = data.train.to_bytes();
        let loaded = SequenceSet::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.sequences, data.train.sequences);
    }

    #[test]
    fn pkds_rejects_corruption() {
        let cfg = tiny_cfg();
        let data = generate(&cfg).unwrap();
        let bytes = data.test.to_bytes();
        assert!(SequenceSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes;
        bad[2] = b'X';
        assert!(SequenceSet::from_bytes(&bad).is_err());
    }
}

//! The online student and the offline teacher family.
//!
//! Both are stacks of offset convolutions with relu, topped by a per-frame
//! linear classifier. Student layers reach `past_extent` frames back and zero
//! ahead; a teacher with index `k` reaches `k` frames ahead per layer. The
//! student carries a second, auxiliary branch per layer whose output is
//! concatenated onto the main features before the next layer and the
//! classifier; the auxiliary features are what feature-level distillation
//! supervises.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::receptive::LayerGeom;
use crate::seeds;
use crate::tensor::Tensor;

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_PAST_EXTENT: usize = 4;
/// Desk-scale channel width; production-scale would be 512.
pub const DEFAULT_CHANNELS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Student,
    Teacher(u32),
}

impl Role {
    pub fn describe(&self) -> String {
        match self {
            Role::Student => "S".to_string(),
            Role::Teacher(k) => format!("T{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub role: Role,
    pub layers: usize,
    pub past_extent: usize,
    pub channels: usize,
    /// Width of the auxiliary branch; equals `channels` unless overridden.
    /// When it differs, a pointwise mapping conv lifts auxiliary features to
    /// the teacher width for distillation.
    pub aux_channels: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn student(input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            role: Role::Student,
            layers: DEFAULT_LAYERS,
            past_extent: DEFAULT_PAST_EXTENT,
            channels: DEFAULT_CHANNELS,
            aux_channels: DEFAULT_CHANNELS,
            input_dim,
            num_classes,
        }
    }

    pub fn teacher(k: u32, input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            role: Role::Teacher(k),
            ..ModelSpec::student(input_dim, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Invalid {
                op: "model_spec",
                msg: format!("layers, channels, input_dim, num_classes must be positive: {self:?}"),
            });
        }
        if let Role::Teacher(k) = self.role {
            if k == 0 {
                return Err(Error::Invalid {
                    op: "model_spec",
                    msg: "teacher index k must be at least 1".into(),
                });
            }
        }
        if self.role == Role::Student && self.aux_channels == 0 {
            return Err(Error::Invalid {
                op: "model_spec",
                msg: "student needs at least one auxiliary channel".into(),
            });
        }
        Ok(())
    }

    /// Future taps per layer: 0 for the student, `k` for teacher `k`.
    pub fn future_per_layer(&self) -> u32 {
        match self.role {
            Role::Student => 0,
            Role::Teacher(k) => k,
        }
    }

    /// Total future reach of the output: `layers * future_per_layer`.
    pub fn future_extent(&self) -> usize {
        self.layers * self.future_per_layer() as usize
    }

    pub fn layer_geoms(&self) -> Vec<LayerGeom> {
        vec![LayerGeom::new(self.past_extent as u32, self.future_per_layer()); self.layers]
    }

    /// Channel width flowing out of layer `l` (1-based): the concatenated
    /// main+aux width for the student, plain width for teachers.
    pub fn layer_out_width(&self) -> usize {
        match self.role {
            Role::Student => self.channels + self.aux_channels,
            Role::Teacher(_) => self.channels,
        }
    }

    pub fn layer_in_width(&self, layer: usize) -> usize {
        if layer == 1 {
            self.input_dim
        } else {
            self.layer_out_width()
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.past_extent + self.future_per_layer() as usize + 1
    }

    fn needs_width_map(&self) -> bool {
        self.role == Role::Student && self.aux_channels != self.channels
    }
}

/// Named map from parameter path to tensor. Iteration order is the sorted
/// name order, which every consumer (optimizer, checkpoints, init) relies on
/// for determinism.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Invalid {
            op: "param_set",
            msg: format!("missing parameter `{name}`"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn inner(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn inner_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    /// Round every tensor through f32, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.quantize_f32();
        }
    }

    /// Order-sensitive FNV digest over the exact bit patterns; cheap way to
    /// assert parameter equality or inequality in tests.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Architectural order of parameter names for `spec`, with shapes.
fn param_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let k = spec.kernel_size();
    let mut out = Vec::new();
    for l in 1..=spec.layers {
        let din = spec.layer_in_width(l);
        match spec.role {
            Role::Student => {
                out.push((format!("layer{l}.main.weight"), vec![spec.channels, din, k]));
                out.push((format!("layer{l}.main.bias"), vec![spec.channels]));
                out.push((format!("layer{l}.aux.weight"), vec![spec.aux_channels, din, k]));
                out.push((format!("layer{l}.aux.bias"), vec![spec.aux_channels]));
                if spec.needs_width_map() {
                    out.push((format!("layer{l}.map.weight"), vec![spec.channels, spec.aux_channels, 1]));
                    out.push((format!("layer{l}.map.bias"), vec![spec.channels]));
                }
            }
            Role::Teacher(_) => {
                out.push((format!("layer{l}.conv.weight"), vec![spec.channels, din, k]));
                out.push((format!("layer{l}.conv.bias"), vec![spec.channels]));
            }
        }
    }
    out.push((
        "classifier.weight".to_string(),
        vec![spec.num_classes + 1, spec.layer_out_width()],
    ));
    out.push(("classifier.bias".to_string(), vec![spec.num_classes + 1]));
    out
}

/// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero.
/// Tensors are filled in architectural order, so the draw for one tensor
/// never depends on map iteration order.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "param-init", 0));
    let mut params = ParamSet::new();
    for (name, dims) in param_layout(spec) {
        let mut t = Tensor::zeros(&dims);
        if name.ends_with(".weight") {
            let fan_in: usize = dims[1..].iter().product();
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-a..a);
            }
        }
        params.insert(&name, t);
    }
    Ok(params)
}

/// Node handles for one model's forward pass inside a graph.
pub struct TraceIds {
    /// Post-relu main features per layer (`h^l` for the student, `g^l` for a
    /// teacher).
    pub main: Vec<NodeId>,
    /// Post-relu auxiliary features per layer; empty for teachers.
    pub aux: Vec<NodeId>,
    /// Auxiliary features lifted to teacher width (identical to `aux` when
    /// no width map is configured).
    pub aux_mapped: Vec<NodeId>,
    pub logits: NodeId,
}

/// Owned copy of a forward pass: per-layer features plus logits.
pub struct ForwardTrace {
    pub main: Vec<Tensor>,
    pub aux: Vec<Tensor>,
    pub logits: Tensor,
}

pub type ParamIds = BTreeMap<String, NodeId>;

/// Add every parameter tensor as a graph leaf.
pub fn insert_params(g: &mut Graph, params: &ParamSet, needs_grad: bool) -> ParamIds {
    params
        .iter()
        .map(|(name, t)| (name.clone(), g.leaf(t.clone(), needs_grad)))
        .collect()
}

fn pid(ids: &ParamIds, name: &str) -> Result<NodeId> {
    ids.get(name).copied().ok_or_else(|| Error::Invalid {
        op: "forward",
        msg: format!("missing parameter `{name}`"),
    })
}

pub fn student_forward_ids(
    g: &mut Graph,
    ids: &ParamIds,
    spec: &ModelSpec,
    x: NodeId,
) -> Result<TraceIds> {
    if spec.role != Role::Student {
        return Err(Error::Role {
            expected: "S".into(),
            got: spec.role.describe(),
        });
    }
    let past = spec.past_extent;
    let mut z = x;
    let mut main = Vec::with_capacity(spec.layers);
    let mut aux = Vec::with_capacity(spec.layers);
    let mut aux_mapped = Vec::with_capacity(spec.layers);
    for l in 1..=spec.layers {
        let hc = g.conv_offset(
            z,
            pid(ids, &format!("layer{l}.main.weight"))?,
            pid(ids, &format!("layer{l}.main.bias"))?,
            past,
            0,
        )?;
        let h = g.relu(hc);
        let ac = g.conv_offset(
            z,
            pid(ids, &format!("layer{l}.aux.weight"))?,
            pid(ids, &format!("layer{l}.aux.bias"))?,
            past,
            0,
        )?;
        let a = g.relu(ac);
        let am = if spec.needs_width_map() {
            g.conv_offset(
                a,
                pid(ids, &format!("layer{l}.map.weight"))?,
                pid(ids, &format!("layer{l}.map.bias"))?,
                0,
                0,
            )?
        } else {
            a
        };
        z = g.concat_cols(h, a)?;
        main.push(h);
        aux.push(a);
        aux_mapped.push(am);
    }
    let logits = g.linear(z, pid(ids, "classifier.weight")?, pid(ids, "classifier.bias")?)?;
    Ok(TraceIds {
        main,
        aux,
        aux_mapped,
        logits,
    })
}

pub fn teacher_forward_ids(
    g: &mut Graph,
    ids: &ParamIds,
    spec: &ModelSpec,
    x: NodeId,
) -> Result<TraceIds> {
    let k = match spec.role {
        Role::Teacher(k) => k as usize,
        Role::Student => {
            return Err(Error::Role {
                expected: "T1..T4".into(),
                got: "S".into(),
            })
        }
    };
    let past = spec.past_extent;
    let mut z = x;
    let mut main = Vec::with_capacity(spec.layers);
    for l in 1..=spec.layers {
        let c = g.conv_offset(
            z,
            pid(ids, &format!("layer{l}.conv.weight"))?,
            pid(ids, &format!("layer{l}.conv.bias"))?,
            past,
            k,
        )?;
        z = g.relu(c);
        main.push(z);
    }
    let logits = g.linear(z, pid(ids, "classifier.weight")?, pid(ids, "classifier.bias")?)?;
    Ok(TraceIds {
        main,
        aux: Vec::new(),
        aux_mapped: Vec::new(),
        logits,
    })
}

fn extract_trace(g: &Graph, ids: TraceIds) -> ForwardTrace {
    ForwardTrace {
        main: ids.main.iter().map(|&id| g.value(id).clone()).collect(),
        aux: ids.aux.iter().map(|&id| g.value(id).clone()).collect(),
        logits: g.value(ids.logits).clone(),
    }
}

pub fn student_forward(params: &ParamSet, spec: &ModelSpec, x: &Tensor) -> Result<ForwardTrace> {
    x.ensure_finite("student input")?;
    let mut g = Graph::new();
    let ids = insert_params(&mut g, params, false);
    let xid = g.leaf(x.clone(), false);
    let trace = student_forward_ids(&mut g, &ids, spec, xid)?;
    Ok(extract_trace(&g, trace))
}

pub fn teacher_forward(params: &ParamSet, spec: &ModelSpec, x: &Tensor) -> Result<ForwardTrace> {
    x.ensure_finite("teacher input")?;
    let mut g = Graph::new();
    let ids = insert_params(&mut g, params, false);
    let xid = g.leaf(x.clone(), false);
    let trace = teacher_forward_ids(&mut g, &ids, spec, xid)?;
    Ok(extract_trace(&g, trace))
}

/// Forward for whichever role the spec declares.
pub fn forward(params: &ParamSet, spec: &ModelSpec, x: &Tensor) -> Result<ForwardTrace> {
    match spec.role {
        Role::Student => student_forward(params, spec, x),
        Role::Teacher(_) => teacher_forward(params, spec, x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[t, d], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = ModelSpec::student(16, 5);
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        let c = init_params(&spec, 8).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn student_param_count_matches_hand_formula() {
        // Independent count: per layer two conv branches of C out-channels
        // over (in * K) inputs plus biases; classifier over 2C.
        let (layers, c, d, m, k) = (2usize, 32usize, 16usize, 5usize, 5usize);
        let spec = ModelSpec {
            role: Role::Student,
            layers,
            past_extent: 4,
            channels: c,
            aux_channels: c,
            input_dim: d,
            num_classes: m,
        };
        let mut want = 0;
        for l in 1..=layers {
            let din = if l == 1 { d } else { 2 * c };
            want += 2 * (c * din * k + c);
        }
        want += (m + 1) * 2 * c + (m + 1);
        assert_eq!(init_params(&spec, 0).unwrap().num_values(), want);
        assert_eq!(want, 26118);
    }

    #[test]
    fn param_count_formula_random_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let layers = rng.gen_range(1..=3);
            let c = rng.gen_range(1..=12);
            let d = rng.gen_range(1..=10);
            let m = rng.gen_range(1..=6);
            let student = ModelSpec {
                role: Role::Student,
                layers,
                past_extent: rng.gen_range(0..=4),
                channels: c,
                aux_channels: c,
                input_dim: d,
                num_classes: m,
            };
            let k = student.kernel_size();
            let mut want = 0;
            for l in 1..=layers {
                let din = if l == 1 { d } else { 2 * c };
                want += 2 * (c * din * k + c);
            }
            want += (m + 1) * 2 * c + (m + 1);
            assert_eq!(init_params(&student, 1).unwrap().num_values(), want);

            let kk = rng.gen_range(1..=4);
            let teacher = ModelSpec {
                role: Role::Teacher(kk),
                ..student
            };
            let k = teacher.kernel_size();
            let mut want = 0;
            for l in 1..=layers {
                let din = if l == 1 { d } else { c };
                want += c * din * k + c;
            }
            want += (m + 1) * c + (m + 1);
            assert_eq!(init_params(&teacher, 1).unwrap().num_values(), want);
        }
    }

    #[test]
    fn student_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ModelSpec {
            channels: 6,
            aux_channels: 6,
            ..ModelSpec::student(4, 3)
        };
        let params = init_params(&spec, 5).unwrap();
        let x = rand_input(&mut rng, 12, 4);
        let base = student_forward(&params, &spec, &x).unwrap();
        for cut in [0usize, 3, 7, 10] {
            let mut xp = x.clone();
            for t in cut + 1..12 {
                for i in 0..4 {
                    xp.data_mut()[t * 4 + i] = rng.gen_range(-9.0..9.0);
                }
            }
            let out = student_forward(&params, &spec, &xp).unwrap();
            for t in 0..=cut {
                assert_eq!(out.logits.row(t), base.logits.row(t));
                for l in 0..spec.layers {
                    assert_eq!(out.main[l].row(t), base.main[l].row(t));
                    assert_eq!(out.aux[l].row(t), base.aux[l].row(t));
                }
            }
        }
    }

    #[test]
    fn teacher_locality_matches_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 1..=4u32 {
            let spec = ModelSpec {
                channels: 6,
                ..ModelSpec::teacher(k, 4, 3)
            };
            let params = init_params(&spec, 11).unwrap();
            let t_len = 24usize;
            let x = rand_input(&mut rng, t_len, 4);
            let base = teacher_forward(&params, &spec, &x).unwrap();
            let t0 = 10usize;
            let (lo, hi) = crate::receptive::receptive_field(&spec.layer_geoms(), t0 as i64);
            // Perturbing any frame outside [lo, hi] leaves row t0 bit-identical.
            for s in 0..t_len {
                if (s as i64) >= lo && (s as i64) <= hi {
                    continue;
                }
                let mut xp = x.clone();
                for i in 0..4 {
                    xp.data_mut()[s * 4 + i] += 5.0;
                }
                let out = teacher_forward(&params, &spec, &xp).unwrap();
                assert_eq!(out.logits.row(t0), base.logits.row(t0), "k={k} s={s}");
            }
            // ...and at least one frame inside does change it.
            let mut xp = x.clone();
            for i in 0..4 {
                xp.data_mut()[t0 * 4 + i] += 5.0;
            }
            let out = teacher_forward(&params, &spec, &xp).unwrap();
            assert_ne!(out.logits.row(t0), base.logits.row(t0));
        }
    }

    #[test]
    fn teacher_zero_input_zero_bias_gives_zero_logits() {
        let spec = ModelSpec {
            channels: 5,
            ..ModelSpec::teacher(2, 3, 2)
        };
        let params = init_params(&spec, 1).unwrap();
        let x = Tensor::zeros(&[6, 3]);
        let out = teacher_forward(&params, &spec, &x).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn student_matches_straight_line_reimplementation() {
        // Duplicate of the layer recurrence with plain nested loops reading
        // the ParamSet directly; no shared conv code.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = ModelSpec {
            channels: 5,
            aux_channels: 5,
            ..ModelSpec::student(3, 2)
        };
        let params = init_params(&spec, 23).unwrap();
        let t_len = 20usize;
        let x = rand_input(&mut rng, t_len, 3);
        let got = student_forward(&params, &spec, &x).unwrap();

        let conv_branch = |z: &[Vec<f64>], w: &Tensor, b: &Tensor, past: usize| -> Vec<Vec<f64>> {
            let din = z[0].len();
            let dout = b.len();
            let k = w.dims()[2];
            let mut out = vec![vec![0.0f64; dout]; z.len()];
            for t in 0..z.len() {
                for o in 0..dout {
                    let mut acc = b.data()[o];
                    for j in 0..k {
                        let s = t as i64 + j as i64 - past as i64;
                        if s < 0 || s >= z.len() as i64 {
                            continue;
                        }
                        for i in 0..din {
                            acc += w.data()[o * din * k + i * k + j] * z[s as usize][i];
                        }
                    }
                    out[t][o] = acc.max(0.0);
                }
            }
            out
        };

        let mut z: Vec<Vec<f64>> = (0..t_len).map(|t| x.row(t).to_vec()).collect();
        for l in 1..=spec.layers {
            let h = conv_branch(
                &z,
                params.get(&format!("layer{l}.main.weight")).unwrap(),
                params.get(&format!("layer{l}.main.bias")).unwrap(),
                spec.past_extent,
            );
            let a = conv_branch(
                &z,
                params.get(&format!("layer{l}.aux.weight")).unwrap(),
                params.get(&format!("layer{l}.aux.bias")).unwrap(),
                spec.past_extent,
            );
            z = (0..t_len)
                .map(|t| h[t].iter().chain(a[t].iter()).copied().collect())
                .collect();
        }
        let cw = params.get("classifier.weight").unwrap();
        let cb = params.get("classifier.bias").unwrap();
        for t in 0..t_len {
            for o in 0..spec.num_classes + 1 {
                let mut acc = cb.data()[o];
                for i in 0..z[t].len() {
                    acc += cw.data()[o * z[t].len() + i] * z[t][i];
                }
                assert!(
                    (acc - got.logits.row(t)[o]).abs() < 1e-10,
                    "t={t} o={o}: {acc} vs {}",
                    got.logits.row(t)[o]
                );
            }
        }
    }

    #[test]
    fn shift_equivariance_away_from_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let spec = ModelSpec {
            channels: 4,
            aux_channels: 4,
            ..ModelSpec::student(3, 2)
        };
        let params = init_params(&spec, 31).unwrap();
        let t_len = 30usize;
        let shift = 3usize;
        let x = rand_input(&mut rng, t_len, 3);
        // Shifted copy: row t of xs equals row t-shift of x.
        let mut xs = Tensor::zeros(&[t_len, 3]);
        for t in shift..t_len {
            xs.data_mut()[t * 3..(t + 1) * 3].copy_from_slice(x.row(t - shift));
        }
        let a = student_forward(&params, &spec, &x).unwrap();
        let b = student_forward(&params, &spec, &xs).unwrap();
        // Frames whose receptive field [t-8, t] stays inside both sequences.
        let total_past = spec.layers * spec.past_extent;
        for t in total_past..t_len - shift {
            let d: f64 = a
                .logits
                .row(t)
                .iter()
                .zip(b.logits.row(t + shift))
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max);
            assert!(d < 1e-12, "t={t} diff={d}");
        }
    }

    #[test]
    fn forward_rejects_mismatched_input_width() {
        let spec = ModelSpec::student(8, 3);
        let params = init_params(&spec, 0).unwrap();
        let x = Tensor::zeros(&[4, 7]);
        assert!(student_forward(&params, &spec, &x).is_err());
    }

    #[test]
    fn single_frame_input_keeps_shape() {
        let spec = ModelSpec {
            channels: 4,
            aux_channels: 4,
            ..ModelSpec::student(5, 3)
        };
        let params = init_params(&spec, 2).unwrap();
        let x = Tensor::zeros(&[1, 5]);
        let out = student_forward(&params, &spec, &x).unwrap();
        assert_eq!(out.logits.dims(), &[1, 4]);
    }
}

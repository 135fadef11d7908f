//! Constant-work per-frame inference for student checkpoints. A session
//! keeps one ring of the last `past_extent` rows per layer input (f32, the
//! checkpoint precision), so its footprint never grows with the stream and
//! cold-start zeros reproduce the batch zero-padding exactly.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Role};

struct Ring {
    width: usize,
    rows: usize,
    data: Vec<f32>,
}

impl Ring {
    fn new(rows: usize, width: usize) -> Ring {
        Ring {
            width,
            rows,
            data: vec![0.0; rows * width],
        }
    }

    /// Row for absolute frame `idx`, valid for the last `rows` frames before
    /// the current one. Negative indices are the zero padding.
    fn row(&self, idx: i64) -> Option<&[f32]> {
        if idx < 0 || self.rows == 0 {
            return None;
        }
        let slot = (idx as usize) % self.rows;
        Some(&self.data[slot * self.width..(slot + 1) * self.width])
    }

    fn push(&mut self, idx: u64, row: &[f64]) {
        if self.rows == 0 {
            return;
        }
        let slot = (idx as usize) % self.rows;
        for (d, &v) in self.data[slot * self.width..(slot + 1) * self.width]
            .iter_mut()
            .zip(row)
        {
            *d = v as f32;
        }
    }

    fn clear(&mut self) {
        self.data.fill(0.0);
    }

    fn bytes(&self) -> usize {
        self.data.len() * 4
    }
}

/// One layer's weights flattened to `[out][tap][in]` for contiguous inner
/// products.
struct ConvWeights {
    out_width: usize,
    in_width: usize,
    taps: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl ConvWeights {
    fn from_params(spec_k: usize, w: &crate::tensor::Tensor, b: &crate::tensor::Tensor) -> ConvWeights {
        let (out_width, in_width, taps) = (w.dims()[0], w.dims()[1], w.dims()[2]);
        debug_assert_eq!(taps, spec_k);
        let mut flat = vec![0.0f64; out_width * taps * in_width];
        for o in 0..out_width {
            for i in 0..in_width {
                for j in 0..taps {
                    flat[(o * taps + j) * in_width + i] = w.data()[o * in_width * taps + i * taps + j];
                }
            }
        }
        ConvWeights {
            out_width,
            in_width,
            taps,
            w: flat,
            b: b.data().to_vec(),
        }
    }
}

struct Layer {
    main: ConvWeights,
    aux: ConvWeights,
}

/// Streaming state over a student checkpoint. Push frames one at a time and
/// get the same logits the batch forward would produce for that row.
pub struct StreamSession {
    spec: ModelSpec,
    layers: Vec<Layer>,
    cls_w: Vec<f64>,
    cls_b: Vec<f64>,
    /// Ring `l` buffers the input rows of layer `l+1`.
    rings: Vec<Ring>,
    frames_seen: u64,
    scratch: Vec<Vec<f64>>,
}

impl StreamSession {
    /// Teachers are offline by construction and refused here.
    pub fn create(ckpt: &Checkpoint) -> Result<StreamSession> {
        if ckpt.spec.role != Role::Student {
            return Err(Error::Role {
                expected: "S".into(),
                got: ckpt.spec.role.describe(),
            });
        }
        let spec = ckpt.spec;
        spec.validate()?;
        let k = spec.kernel_size();
        let mut layers = Vec::with_capacity(spec.layers);
        let mut rings = Vec::with_capacity(spec.layers);
        for l in 1..=spec.layers {
            let main = ConvWeights::from_params(
                k,
                ckpt.params.get(&format!("layer{l}.main.weight"))?,
                ckpt.params.get(&format!("layer{l}.main.bias"))?,
            );
            let aux = ConvWeights::from_params(
                k,
                ckpt.params.get(&format!("layer{l}.aux.weight"))?,
                ckpt.params.get(&format!("layer{l}.aux.bias"))?,
            );
            rings.push(Ring::new(spec.past_extent, spec.layer_in_width(l)));
            layers.push(Layer { main, aux });
        }
        let cls_w = ckpt.params.get("classifier.weight")?.data().to_vec();
        let cls_b = ckpt.params.get("classifier.bias")?.data().to_vec();
        let scratch = (1..=spec.layers)
            .map(|l| vec![0.0f64; spec.layer_in_width(l)])
            .collect();
        Ok(StreamSession {
            spec,
            layers,
            cls_w,
            cls_b,
            rings,
            frames_seen: 0,
            scratch,
        })
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    /// Ring memory in bytes: `past_extent` f32 rows per layer input.
    pub fn buffer_bytes(&self) -> usize {
        self.rings.iter().map(Ring::bytes).sum()
    }

    /// Equivalent to a fresh session over the same checkpoint.
    pub fn reset(&mut self) {
        for r in &mut self.rings {
            r.clear();
        }
        self.frames_seen = 0;
    }

    /// Feed one frame, get the logits for it.
    pub fn push_frame(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Shape {
                op: "push_frame",
                what: "frame",
                expected: format!("{} values", self.spec.input_dim),
                got: vec![x.len()],
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "streamed frame".into(),
            });
        }
        let t = self.frames_seen as i64;
        let past = self.spec.past_extent as i64;

        // current[l] is this frame's input row for layer l+1, in f64.
        let mut current: Vec<f64> = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let ring = &self.rings[li];
            let width = layer.main.out_width + layer.aux.out_width;
            let mut z = vec![0.0f64; width];
            z[..layer.main.out_width].copy_from_slice(&layer.main.b);
            z[layer.main.out_width..].copy_from_slice(&layer.aux.b);
            // Taps run over frames t-past .. t, oldest first, matching the
            // batch kernel's accumulation order.
            for j in 0..=past {
                let s = t - past + j;
                if s < 0 {
                    continue;
                }
                let row_buf;
                let row: &[f64] = if s == t {
                    &current
                } else {
                    let src = ring.row(s).expect("within ring span");
                    row_buf = &mut self.scratch[li];
                    for (d, &v) in row_buf.iter_mut().zip(src) {
                        *d = f64::from(v);
                    }
                    row_buf
                };
                let tap = j as usize;
                for (o, acc) in z[..layer.main.out_width].iter_mut().enumerate() {
                    let wrow = &layer.main.w
                        [(o * layer.main.taps + tap) * layer.main.in_width..][..layer.main.in_width];
                    let mut dot = 0.0;
                    for i in 0..layer.main.in_width {
                        dot += wrow[i] * row[i];
                    }
                    *acc += dot;
                }
                for (o, acc) in z[layer.main.out_width..].iter_mut().enumerate() {
                    let wrow = &layer.aux.w
                        [(o * layer.aux.taps + tap) * layer.aux.in_width..][..layer.aux.in_width];
                    let mut dot = 0.0;
                    for i in 0..layer.aux.in_width {
                        dot += wrow[i] * row[i];
                    }
                    *acc += dot;
                }
            }
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            self.rings[li].push(self.frames_seen, &current);
            current = z;
        }

        let width = current.len();
        let classes = self.cls_b.len();
        let mut logits = vec![0.0f64; classes];
        for (o, out) in logits.iter_mut().enumerate() {
            let wrow = &self.cls_w[o * width..(o + 1) * width];
            let mut acc = self.cls_b[o];
            for i in 0..width {
                acc += wrow[i] * current[i];
            }
            *out = acc;
        }
        self.frames_seen += 1;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, student_forward, ModelSpec};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ckpt(seed: u64, d: usize, c: usize) -> Checkpoint {
        let spec = ModelSpec {
            channels: c,
            aux_channels: c,
            ..ModelSpec::student(d, 4)
        };
        Checkpoint::new(spec, init_params(&spec, seed).unwrap())
    }

    fn stream_all(session: &mut StreamSession, x: &Tensor) -> Vec<Vec<f64>> {
        (0..x.dims()[0])
            .map(|t| session.push_frame(x.row(t)).unwrap())
            .collect()
    }

    #[test]
    fn matches_batch_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..5u64 {
            let ckpt = random_ckpt(trial, 5, 6);
            let t_len = 40;
            let data = (0..t_len * 5).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let x = Tensor::from_vec(&[t_len, 5], data).unwrap();
            let batch = student_forward(&ckpt.params, &ckpt.spec, &x).unwrap();
            let mut session = StreamSession::create(&ckpt).unwrap();
            let streamed = stream_all(&mut session, &x);
            for t in 0..t_len {
                for (a, b) in streamed[t].iter().zip(batch.logits.row(t)) {
                    assert!((a - b).abs() < 1e-5, "trial {trial} t={t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn first_zero_frame_matches_batch_single_frame() {
        let ckpt = random_ckpt(9, 4, 5);
        let mut session = StreamSession::create(&ckpt).unwrap();
        let out = session.push_frame(&[0.0; 4]).unwrap();
        let x = Tensor::zeros(&[1, 4]);
        let batch = student_forward(&ckpt.params, &ckpt.spec, &x).unwrap();
        for (a, b) in out.iter().zip(batch.logits.row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_teacher_and_bad_frames() {
        let spec = ModelSpec::teacher(2, 4, 3);
        let ckpt = Checkpoint::new(spec, init_params(&spec, 0).unwrap());
        assert!(matches!(StreamSession::create(&ckpt), Err(Error::Role { .. })));

        let ckpt = random_ckpt(2, 4, 5);
        let mut session = StreamSession::create(&ckpt).unwrap();
        assert!(session.push_frame(&[0.0; 3]).is_err());
        assert!(session.push_frame(&[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn reset_equals_fresh_session_and_fuzz_replay() {
        let ckpt = random_ckpt(5, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut session = StreamSession::create(&ckpt).unwrap();
        // Fresh reset is a no-op.
        session.reset();
        assert_eq!(session.frames_seen(), 0);

        // Interleaved reset/push fuzz against a replay through the batch
        // forward of every post-reset suffix.
        let mut suffix: Vec<Vec<f64>> = Vec::new();
        let mut outputs: Vec<Vec<f64>> = Vec::new();
        for op in 0..1000 {
            if rng.gen_bool(0.05) {
                session.reset();
                suffix.clear();
                outputs.clear();
                continue;
            }
            let frame: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            suffix.push(frame.clone());
            outputs.push(session.push_frame(&frame).unwrap());
            if op % 97 == 0 {
                let flat: Vec<f64> = suffix.iter().flatten().copied().collect();
                let x = Tensor::from_vec(&[suffix.len(), 3], flat).unwrap();
                let batch = student_forward(&ckpt.params, &ckpt.spec, &x).unwrap();
                for t in 0..suffix.len() {
                    for (a, b) in outputs[t].iter().zip(batch.logits.row(t)) {
                        assert!((a - b).abs() < 1e-5, "op={op} t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn buffer_accounting_and_no_growth() {
        let ckpt = random_ckpt(3, 16, 32);
        let mut session = StreamSession::create(&ckpt).unwrap();
        // past_extent rows of the input (D wide) plus one ring of 2C per
        // later layer, 4 bytes per value.
        let spec = ckpt.spec;
        let want = spec.past_extent * spec.input_dim * 4
            + (spec.layers - 1) * spec.past_extent * 2 * spec.channels * 4;
        assert_eq!(session.buffer_bytes(), want);
        assert_eq!(want, 1280);
        let before = session.buffer_bytes();
        for t in 0..500 {
            let frame: Vec<f64> = (0..16).map(|i| ((t * 16 + i) as f64).sin()).collect();
            session.push_frame(&frame).unwrap();
        }
        assert_eq!(session.buffer_bytes(), before);
        assert_eq!(session.frames_seen(), 500);
    }

    #[test]
    fn sessions_do_not_interfere() {
        let ckpt = random_ckpt(8, 4, 6);
        let mut a = StreamSession::create(&ckpt).unwrap();
        let mut b = StreamSession::create(&ckpt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        // Feed b garbage, then check a still matches a fresh session.
        for f in &frames {
            b.push_frame(f).unwrap();
        }
        let got: Vec<Vec<f64>> = frames.iter().map(|f| a.push_frame(f).unwrap()).collect();
        let mut fresh = StreamSession::create(&ckpt).unwrap();
        let want: Vec<Vec<f64>> = frames.iter().map(|f| fresh.push_frame(f).unwrap()).collect();
        assert_eq!(got, want);
    }
}

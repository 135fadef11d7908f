//! Receptive-field calculus for stacks of offset convolutions. Intervals are
//! closed, in frame units, and may extend past the sequence ends.

use crate::error::{Error, Result};

/// Per-layer kernel extent around the output frame: `past` frames back,
/// `future` frames ahead. Kernel size is `past + future + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeom {
    pub past: u32,
    pub future: u32,
}

impl LayerGeom {
    pub fn new(past: u32, future: u32) -> LayerGeom {
        LayerGeom { past, future }
    }

    pub fn kernel_size(&self) -> usize {
        self.past as usize + self.future as usize + 1
    }
}

/// Input interval `[lo, hi]` that can influence the stack's output at `t`.
/// An empty layer list is the identity map.
pub fn receptive_field(layers: &[LayerGeom], t: i64) -> (i64, i64) {
    let past: i64 = layers.iter().map(|l| i64::from(l.past)).sum();
    let future: i64 = layers.iter().map(|l| i64::from(l.future)).sum();
    (t - past, t + future)
}

/// Union of [`receptive_field`] over output frames `t_lo..=t_hi`.
pub fn set_receptive_field(layers: &[LayerGeom], t_lo: i64, t_hi: i64) -> Result<(i64, i64)> {
    if t_lo > t_hi {
        return Err(Error::Invalid {
            op: "set_receptive_field",
            msg: format!("interval [{t_lo}, {t_hi}] is empty"),
        });
    }
    let (lo, _) = receptive_field(layers, t_lo);
    let (_, hi) = receptive_field(layers, t_hi);
    Ok((lo, hi))
}

/// Number of future frames a learner feature must average over so that its
/// supervision target covers the same receptive span as the teacher's final
/// feature. Teachers with `k` future taps per layer need a window of `k`.
pub fn alignment_window(teacher_future_per_layer: u32) -> u32 {
    teacher_future_per_layer
}

//! Forward and backward kernels. Each forward has a matching hand-derived
//! backward; `gradcheck` exercises every pair. All accumulation runs in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 1-D convolution over frames with a kernel reaching `past` frames back and
/// `future` frames ahead of the output frame. `future = 0` is the causal
/// case. Frames outside the sequence read as zero.
///
/// Shapes: input `[T, din]`, weight `[dout, din, K]` with `K = past+future+1`,
/// bias `[dout]`; output `[T, dout]`. Kernel tap `j` (0-based) multiplies the
/// input frame `t + j - past`.
pub fn conv1d_offset(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    past: usize,
    future: usize,
) -> Result<Tensor> {
    let (t_len, din, dout, k) = conv_shapes(input, weight, bias, past, future)?;
    let x = input.data();
    let b = bias.data();

    // [dout][K][din] copy of the weight so the innermost loop is contiguous.
    let wt = transpose_oik_to_okoi(weight.data(), dout, din, k);

    let mut out = vec![0.0f64; t_len * dout];
    for t in 0..t_len {
        let s_lo = t.saturating_sub(past);
        let s_hi = (t + future).min(t_len - 1);
        let orow = &mut out[t * dout..(t + 1) * dout];
        orow.copy_from_slice(b);
        for s in s_lo..=s_hi {
            let j = s + past - t;
            let xrow = &x[s * din..(s + 1) * din];
            for (o, acc) in orow.iter_mut().enumerate() {
                let wrow = &wt[(o * k + j) * din..(o * k + j + 1) * din];
                let mut dot = 0.0f64;
                for i in 0..din {
                    dot += wrow[i] * xrow[i];
                }
                *acc += dot;
            }
        }
    }
    Tensor::from_vec(&[t_len, dout], out)
}

/// Gradients of [`conv1d_offset`] w.r.t. input, weight, and bias.
pub fn conv1d_offset_backward(
    gout: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    past: usize,
    future: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t_len, din, dout, k) = conv_shapes(input, weight, &Tensor::zeros(&[weight.dims()[0]]), past, future)?;
    if gout.dims() != [t_len, dout] {
        return Err(Error::Shape {
            op: "conv1d_offset_backward",
            what: "gout",
            expected: format!("[{t_len}, {dout}]"),
            got: gout.dims().to_vec(),
        });
    }
    let x = input.data();
    let g = gout.data();

    let mut dbias = vec![0.0f64; dout];
    for t in 0..t_len {
        for o in 0..dout {
            dbias[o] += g[t * dout + o];
        }
    }

    // Accumulate weight grads in [dout][K][din] order, transpose back at the end.
    let mut dwt = vec![0.0f64; dout * k * din];
    // [K][din][dout] copy for the input-grad pass.
    let w_jio = transpose_oik_to_jio(weight.data(), dout, din, k);
    let mut dx = vec![0.0f64; t_len * din];

    for t in 0..t_len {
        let grow = &g[t * dout..(t + 1) * dout];
        let s_lo = t.saturating_sub(past);
        let s_hi = (t + future).min(t_len - 1);
        for s in s_lo..=s_hi {
            let j = s + past - t;
            let xrow = &x[s * din..(s + 1) * din];
            let dxrow = &mut dx[s * din..(s + 1) * din];
            for (o, &go) in grow.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let dwrow = &mut dwt[(o * k + j) * din..(o * k + j + 1) * din];
                for i in 0..din {
                    dwrow[i] += go * xrow[i];
                }
            }
            for i in 0..din {
                let wrow = &w_jio[(j * din + i) * dout..(j * din + i + 1) * dout];
                let mut acc = 0.0f64;
                for o in 0..dout {
                    acc += grow[o] * wrow[o];
                }
                dxrow[i] += acc;
            }
        }
    }

    let mut dw = vec![0.0f64; dout * din * k];
    for o in 0..dout {
        for j in 0..k {
            for i in 0..din {
                dw[o * din * k + i * k + j] = dwt[(o * k + j) * din + i];
            }
        }
    }

    Ok((
        Tensor::from_vec(&[t_len, din], dx)?,
        Tensor::from_vec(weight.dims(), dw)?,
        Tensor::from_vec(&[dout], dbias)?,
    ))
}

fn conv_shapes(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    past: usize,
    future: usize,
) -> Result<(usize, usize, usize, usize)> {
    if input.rank() != 2 {
        return Err(Error::Shape {
            op: "conv1d_offset",
            what: "input",
            expected: "[T, din]".into(),
            got: input.dims().to_vec(),
        });
    }
    if weight.rank() != 3 {
        return Err(Error::Shape {
            op: "conv1d_offset",
            what: "weight",
            expected: "[dout, din, K]".into(),
            got: weight.dims().to_vec(),
        });
    }
    let (t_len, din) = (input.dims()[0], input.dims()[1]);
    let (dout, wdin, k) = (weight.dims()[0], weight.dims()[1], weight.dims()[2]);
    if wdin != din {
        return Err(Error::Shape {
            op: "conv1d_offset",
            what: "weight",
            expected: format!("[dout, {din}, K] to match input width din={din}"),
            got: weight.dims().to_vec(),
        });
    }
    if k != past + future + 1 {
        return Err(Error::Invalid {
            op: "conv1d_offset",
            msg: format!("kernel size K={k} must equal past+future+1 = {}", past + future + 1),
        });
    }
    if bias.dims() != [dout] {
        return Err(Error::Shape {
            op: "conv1d_offset",
            what: "bias",
            expected: format!("[{dout}] to match weight dout"),
            got: bias.dims().to_vec(),
        });
    }
    Ok((t_len, din, dout, k))
}

fn transpose_oik_to_okoi(w: &[f64], dout: usize, din: usize, k: usize) -> Vec<f64> {
    let mut wt = vec![0.0f64; w.len()];
    for o in 0..dout {
        for i in 0..din {
            for j in 0..k {
                wt[(o * k + j) * din + i] = w[o * din * k + i * k + j];
            }
        }
    }
    wt
}

fn transpose_oik_to_jio(w: &[f64], dout: usize, din: usize, k: usize) -> Vec<f64> {
    let mut wt = vec![0.0f64; w.len()];
    for o in 0..dout {
        for i in 0..din {
            for j in 0..k {
                wt[(j * din + i) * dout + o] = w[o * din * k + i * k + j];
            }
        }
    }
    wt
}

/// Elementwise `max(x, 0)`. The subgradient at exactly 0 is taken as 0.
pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.clear_grad();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(gout: &Tensor, x: &Tensor) -> Tensor {
    debug_assert_eq!(gout.dims(), x.dims());
    let mut dx = gout.clone();
    dx.clear_grad();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Per-frame affine map: input `[T, din]`, weight `[dout, din]`, bias `[dout]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (t_len, din) = linear_shapes(x, weight, bias)?;
    let dout = weight.dims()[0];
    let xv = x.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![0.0f64; t_len * dout];
    for t in 0..t_len {
        let xrow = &xv[t * din..(t + 1) * din];
        let orow = &mut out[t * dout..(t + 1) * dout];
        for o in 0..dout {
            let wrow = &w[o * din..(o + 1) * din];
            let mut acc = b[o];
            for i in 0..din {
                acc += wrow[i] * xrow[i];
            }
            orow[o] = acc;
        }
    }
    Tensor::from_vec(&[t_len, dout], out)
}

pub fn linear_backward(
    gout: &Tensor,
    x: &Tensor,
    weight: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t_len, din) = (x.dims()[0], x.dims()[1]);
    let dout = weight.dims()[0];
    debug_assert_eq!(gout.dims(), [t_len, dout]);
    let g = gout.data();
    let xv = x.data();
    let w = weight.data();
    let mut dx = vec![0.0f64; t_len * din];
    let mut dw = vec![0.0f64; dout * din];
    let mut db = vec![0.0f64; dout];
    for t in 0..t_len {
        let grow = &g[t * dout..(t + 1) * dout];
        let xrow = &xv[t * din..(t + 1) * din];
        let dxrow = &mut dx[t * din..(t + 1) * din];
        for (o, &go) in grow.iter().enumerate() {
            db[o] += go;
            if go == 0.0 {
                continue;
            }
            let wrow = &w[o * din..(o + 1) * din];
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dwrow[i] += go * xrow[i];
                dxrow[i] += go * wrow[i];
            }
        }
    }
    Ok((
        Tensor::from_vec(&[t_len, din], dx)?,
        Tensor::from_vec(&[dout, din], dw)?,
        Tensor::from_vec(&[dout], db)?,
    ))
}

fn linear_shapes(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 || weight.rank() != 2 {
        return Err(Error::Shape {
            op: "linear",
            what: "input/weight",
            expected: "rank-2 tensors".into(),
            got: x.dims().to_vec(),
        });
    }
    let (t_len, din) = (x.dims()[0], x.dims()[1]);
    if weight.dims()[1] != din {
        return Err(Error::Shape {
            op: "linear",
            what: "weight",
            expected: format!("[dout, {din}]"),
            got: weight.dims().to_vec(),
        });
    }
    if bias.dims() != [weight.dims()[0]] {
        return Err(Error::Shape {
            op: "linear",
            what: "bias",
            expected: format!("[{}]", weight.dims()[0]),
            got: bias.dims().to_vec(),
        });
    }
    Ok((t_len, din))
}

/// Concatenate two `[T, ·]` tensors along the channel axis.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dims()[0] != b.dims()[0] {
        return Err(Error::Shape {
            op: "concat_cols",
            what: "inputs",
            expected: format!("matching frame counts, left has {:?}", a.dims()),
            got: b.dims().to_vec(),
        });
    }
    let (t_len, ca, cb) = (a.dims()[0], a.dims()[1], b.dims()[1]);
    let mut out = vec![0.0f64; t_len * (ca + cb)];
    for t in 0..t_len {
        out[t * (ca + cb)..t * (ca + cb) + ca].copy_from_slice(a.row(t));
        out[t * (ca + cb) + ca..(t + 1) * (ca + cb)].copy_from_slice(b.row(t));
    }
    Tensor::from_vec(&[t_len, ca + cb], out)
}

pub fn concat_cols_backward(gout: &Tensor, ca: usize, cb: usize) -> (Tensor, Tensor) {
    let t_len = gout.dims()[0];
    debug_assert_eq!(gout.dims()[1], ca + cb);
    let g = gout.data();
    let mut da = vec![0.0f64; t_len * ca];
    let mut db = vec![0.0f64; t_len * cb];
    for t in 0..t_len {
        da[t * ca..(t + 1) * ca].copy_from_slice(&g[t * (ca + cb)..t * (ca + cb) + ca]);
        db[t * cb..(t + 1) * cb].copy_from_slice(&g[t * (ca + cb) + ca..(t + 1) * (ca + cb)]);
    }
    (
        Tensor::from_vec(&[t_len, ca], da).unwrap(),
        Tensor::from_vec(&[t_len, cb], db).unwrap(),
    )
}

/// Row-wise temperature softmax: each output row is `softmax(row / tau)` and
/// sums to 1.
pub fn softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Invalid {
            op: "softmax_temp",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    if logits.rank() != 2 {
        return Err(Error::Shape {
            op: "softmax_temp",
            what: "logits",
            expected: "[T, classes]".into(),
            got: logits.dims().to_vec(),
        });
    }
    let (t_len, c) = (logits.dims()[0], logits.dims()[1]);
    let mut out = vec![0.0f64; t_len * c];
    for t in 0..t_len {
        let row = logits.row(t);
        let orow = &mut out[t * c..(t + 1) * c];
        softmax_row(row, tau, orow);
    }
    Tensor::from_vec(&[t_len, c], out)
}

pub(crate) fn softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - m) / tau).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// `log softmax(row / tau)` written into `out`.
pub(crate) fn log_softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0f64;
    for &v in row {
        z += ((v - m) / tau).exp();
    }
    let lz = z.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m) / tau - lz;
    }
}

pub fn softmax_temp_backward(gout: &Tensor, probs: &Tensor, tau: f64) -> Tensor {
    debug_assert_eq!(gout.dims(), probs.dims());
    let (t_len, c) = (probs.dims()[0], probs.dims()[1]);
    let mut dx = vec![0.0f64; t_len * c];
    for t in 0..t_len {
        let g = &gout.data()[t * c..(t + 1) * c];
        let p = probs.row(t);
        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
        for i in 0..c {
            dx[t * c + i] = p[i] * (g[i] - dot) / tau;
        }
    }
    Tensor::from_vec(&[t_len, c], dx).unwrap()
}

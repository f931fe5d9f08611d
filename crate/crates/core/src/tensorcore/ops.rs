//! Differentiable primitives.
//!
//! Each primitive is a pure forward function plus a [`Function`] impl that the
//! tape uses for the backward pass. Batched variants treat the leading axis as
//! the batch.

use rand::Rng as _;

use super::gemm::{gemm, View};
use super::ArrayF;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A recorded primitive: recomputable forward and vector-Jacobian product.
pub trait Function: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF>;

    /// Gradient for every input with `needs[i] == true`; `None` elsewhere.
    fn backward(
        &self,
        inputs: &[&ArrayF],
        output: &ArrayF,
        grad_output: &ArrayF,
        needs: &[bool],
    ) -> Vec<Option<ArrayF>>;
}

fn expect_inputs(name: &str, inputs: &[&ArrayF], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Contract(format!(
            "{name} takes {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- conv1d

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    steps: usize,
    c_in: usize,
    taps: usize,
    c_out: usize,
    steps_out: usize,
    batched: bool,
}

fn conv_dims(input: &ArrayF, kernels: &ArrayF, bias: &ArrayF) -> Result<ConvDims> {
    let (batch, steps, c_in, batched) = match *input.shape() {
        [t, c] => (1, t, c, false),
        [b, t, c] => (b, t, c, true),
        ref s => {
            return Err(Error::Dimension(format!(
                "conv1d input must be [T x C] or [B x T x C], got {s:?}"
            )))
        }
    };
    let [taps, k_in, c_out] = *kernels.shape() else {
        return Err(Error::Dimension(format!(
            "conv1d kernels must be [K x C_in x C_out], got {:?}",
            kernels.shape()
        )));
    };
    if k_in != c_in {
        return Err(Error::Dimension(format!(
            "conv1d kernels expect {k_in} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Dimension(format!(
            "conv1d bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    if taps == 0 || taps > steps {
        return Err(Error::Config(format!(
            "kernel size {taps} invalid for sequence length {steps}"
        )));
    }
    Ok(ConvDims {
        batch,
        steps,
        c_in,
        taps,
        c_out,
        steps_out: steps - taps + 1,
        batched,
    })
}

impl ConvDims {
    /// Overlapping window matrix of one sample: row t = input[t..t+K, :].
    fn windows(&self) -> View {
        View {
            rows: self.steps_out,
            cols: self.taps * self.c_in,
            row_stride: self.c_in,
            col_stride: 1,
        }
    }
}

/// Valid (unpadded, stride 1) cross-correlation.
/// `out[t, o] = bias[o] + sum_{k, c} input[t + k, c] * kernels[k, c, o]`.
pub fn conv1d(input: &ArrayF, kernels: &ArrayF, bias: &ArrayF) -> Result<ArrayF> {
    let d = conv_dims(input, kernels, bias)?;
    let out_w = d.steps_out * d.c_out;
    let in_w = d.steps * d.c_in;
    let mut out = Vec::with_capacity(d.batch * out_w);
    for _ in 0..d.batch * d.steps_out {
        out.extend_from_slice(bias.data());
    }
    let kv = View::row_major(d.taps * d.c_in, d.c_out);
    for b in 0..d.batch {
        gemm(
            &input.data()[b * in_w..(b + 1) * in_w],
            d.windows(),
            kernels.data(),
            kv,
            1.0,
            &mut out[b * out_w..(b + 1) * out_w],
            View::row_major(d.steps_out, d.c_out),
        );
    }
    let shape = if d.batched {
        vec![d.batch, d.steps_out, d.c_out]
    } else {
        vec![d.steps_out, d.c_out]
    };
    Ok(ArrayF::from_parts(shape, out))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Conv1d;

impl Function for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        expect_inputs("conv1d", inputs, 3)?;
        conv1d(inputs[0], inputs[1], inputs[2])
    }

    fn backward(
        &self,
        inputs: &[&ArrayF],
        _output: &ArrayF,
        grad_output: &ArrayF,
        needs: &[bool],
    ) -> Vec<Option<ArrayF>> {
        let (input, kernels, bias) = (inputs[0], inputs[1], inputs[2]);
        let d = conv_dims(input, kernels, bias).expect("shapes validated in forward");
        let out_w = d.steps_out * d.c_out;
        let in_w = d.steps * d.c_in;
        let kc = d.taps * d.c_in;
        let gout = grad_output.data();
        let dout_view = View::row_major(d.steps_out, d.c_out);

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; input.len()];
            let mut dwin = vec![0.0; d.steps_out * kc];
            let wt = View::row_major(kc, d.c_out).transposed();
            for b in 0..d.batch {
                gemm(
                    &gout[b * out_w..(b + 1) * out_w],
                    dout_view,
                    kernels.data(),
                    wt,
                    0.0,
                    &mut dwin,
                    View::row_major(d.steps_out, kc),
                );
                let dxb = &mut dx[b * in_w..(b + 1) * in_w];
                for t in 0..d.steps_out {
                    let dst = &mut dxb[t * d.c_in..t * d.c_in + kc];
                    for (a, g) in dst.iter_mut().zip(&dwin[t * kc..(t + 1) * kc]) {
                        *a += g;
                    }
                }
            }
            ArrayF::from_parts(input.shape().to_vec(), dx)
        });
        let dk = needs[1].then(|| {
            let mut dk = vec![0.0; kernels.len()];
            for b in 0..d.batch {
                gemm(
                    &input.data()[b * in_w..(b + 1) * in_w],
                    d.windows().transposed(),
                    &gout[b * out_w..(b + 1) * out_w],
                    dout_view,
                    1.0,
                    &mut dk,
                    View::row_major(kc, d.c_out),
                );
            }
            ArrayF::from_parts(kernels.shape().to_vec(), dk)
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; d.c_out];
            for row in gout.chunks_exact(d.c_out) {
                for (a, g) in db.iter_mut().zip(row) {
                    *a += g;
                }
            }
            ArrayF::from_parts(vec![d.c_out], db)
        });
        vec![dx, dk, db]
    }
}

// ----------------------------------------------------------------- dense

fn dense_dims(input: &ArrayF, w: &ArrayF, b: &ArrayF) -> Result<(usize, usize, usize, bool)> {
    let (batch, d_in, batched) = match *input.shape() {
        [d] => (1, d, false),
        [n, d] => (n, d, true),
        ref s => {
            return Err(Error::Dimension(format!(
                "dense input must be [D] or [B x D], got {s:?}"
            )))
        }
    };
    let [w_in, d_out] = *w.shape() else {
        return Err(Error::Dimension(format!(
            "dense weight must be [D_in x D_out], got {:?}",
            w.shape()
        )));
    };
    if w_in != d_in {
        return Err(Error::Dimension(format!(
            "dense weight expects {w_in} inputs, got {d_in}"
        )));
    }
    if b.shape() != [d_out] {
        return Err(Error::Dimension(format!(
            "dense bias must be [{d_out}], got {:?}",
            b.shape()
        )));
    }
    Ok((batch, d_in, d_out, batched))
}

/// `out = input * w + b`.
pub fn dense(input: &ArrayF, w: &ArrayF, b: &ArrayF) -> Result<ArrayF> {
    let (batch, d_in, d_out, batched) = dense_dims(input, w, b)?;
    let mut out = Vec::with_capacity(batch * d_out);
    for _ in 0..batch {
        out.extend_from_slice(b.data());
    }
    gemm(
        input.data(),
        View::row_major(batch, d_in),
        w.data(),
        View::row_major(d_in, d_out),
        1.0,
        &mut out,
        View::row_major(batch, d_out),
    );
    let shape = if batched {
        vec![batch, d_out]
    } else {
        vec![d_out]
    };
    Ok(ArrayF::from_parts(shape, out))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Dense;

impl Function for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        expect_inputs("dense", inputs, 3)?;
        dense(inputs[0], inputs[1], inputs[2])
    }

    fn backward(
        &self,
        inputs: &[&ArrayF],
        _output: &ArrayF,
        grad_output: &ArrayF,
        needs: &[bool],
    ) -> Vec<Option<ArrayF>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (batch, d_in, d_out, _) = dense_dims(x, w, b).expect("validated in forward");
        let g = grad_output.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.len()];
            gemm(
                g,
                View::row_major(batch, d_out),
                w.data(),
                View::row_major(d_in, d_out).transposed(),
                0.0,
                &mut dx,
                View::row_major(batch, d_in),
            );
            ArrayF::from_parts(x.shape().to_vec(), dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; w.len()];
            gemm(
                x.data(),
                View::row_major(batch, d_in).transposed(),
                g,
                View::row_major(batch, d_out),
                0.0,
                &mut dw,
                View::row_major(d_in, d_out),
            );
            ArrayF::from_parts(w.shape().to_vec(), dw)
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; d_out];
            for row in g.chunks_exact(d_out) {
                for (a, v) in db.iter_mut().zip(row) {
                    *a += v;
                }
            }
            ArrayF::from_parts(vec![d_out], db)
        });
        vec![dx, dw, db]
    }
}

// ------------------------------------------------------------------ relu

pub fn relu(input: &ArrayF) -> ArrayF {
    ArrayF::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Relu;

impl Function for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        expect_inputs("relu", inputs, 1)?;
        Ok(relu(inputs[0]))
    }

    fn backward(
        &self,
        inputs: &[&ArrayF],
        _output: &ArrayF,
        grad_output: &ArrayF,
        _needs: &[bool],
    ) -> Vec<Option<ArrayF>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad_output.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(ArrayF::from_parts(inputs[0].shape().to_vec(), g))]
    }
}

// --------------------------------------------------------------- dropout

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout scale factors: 0 with probability `rate`, else 1/(1-rate).
/// `None` means identity (evaluation mode or zero rate).
pub fn dropout_mask(len: usize, rate: f64, training: bool, rng: &mut Rng) -> Result<Option<Vec<f64>>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    ))
}

pub fn dropout(input: &ArrayF, rate: f64, training: bool, rng: &mut Rng) -> Result<ArrayF> {
    let mask = dropout_mask(input.len(), rate, training, rng)?;
    Ok(Dropout { mask }.apply(input))
}

/// Dropout with a fixed, pre-drawn mask so the tape can replay it.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub mask: Option<Vec<f64>>,
}

impl Dropout {
    fn apply(&self, x: &ArrayF) -> ArrayF {
        match &self.mask {
            None => x.clone(),
            Some(m) => ArrayF::from_parts(
                x.shape().to_vec(),
                x.data().iter().zip(m).map(|(a, b)| a * b).collect(),
            ),
        }
    }
}

impl Function for Dropout {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        expect_inputs("dropout", inputs, 1)?;
        if let Some(m) = &self.mask {
            if m.len() != inputs[0].len() {
                return Err(Error::Dimension("dropout mask length".into()));
            }
        }
        Ok(self.apply(inputs[0]))
    }

    fn backward(
        &self,
        _inputs: &[&ArrayF],
        _output: &ArrayF,
        grad_output: &ArrayF,
        _needs: &[bool],
    ) -> Vec<Option<ArrayF>> {
        vec![Some(self.apply(grad_output))]
    }
}

// ------------------------------------------------------- global max pool

fn pool_dims(input: &ArrayF) -> Result<(usize, usize, usize, bool)> {
    let (batch, steps, chans, batched) = match *input.shape() {
        [t, c] => (1, t, c, false),
        [b, t, c] => (b, t, c, true),
        ref s => {
            return Err(Error::Dimension(format!(
                "global max pool input must be [T x C] or [B x T x C], got {s:?}"
            )))
        }
    };
    if steps == 0 {
        return Err(Error::EmptyInput("global max pool over zero time steps".into()));
    }
    Ok((batch, steps, chans, batched))
}

/// First index of the maximum over time for every (sample, channel).
fn argmax_over_time(input: &ArrayF, batch: usize, steps: usize, chans: usize) -> Vec<usize> {
    let x = input.data();
    let mut idx = vec![0usize; batch * chans];
    for b in 0..batch {
        let base = b * steps * chans;
        for c in 0..chans {
            let mut best = 0;
            let mut best_v = x[base + c];
            for t in 1..steps {
                let v = x[base + t * chans + c];
                if v > best_v {
                    best_v = v;
                    best = t;
                }
            }
            idx[b * chans + c] = best;
        }
    }
    idx
}

pub fn global_max_pool(input: &ArrayF) -> Result<ArrayF> {
    let (batch, steps, chans, batched) = pool_dims(input)?;
    let idx = argmax_over_time(input, batch, steps, chans);
    let x = input.data();
    let out = idx
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let (b, c) = (i / chans, i % chans);
            x[b * steps * chans + t * chans + c]
        })
        .collect();
    let shape = if batched { vec![batch, chans] } else { vec![chans] };
    Ok(ArrayF::from_parts(shape, out))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalMaxPool;

impl Function for GlobalMaxPool {
    fn name(&self) -> &'static str {
        "global_max_pool"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        expect_inputs("global_max_pool", inputs, 1)?;
        global_max_pool(inputs[0])
    }

    fn backward(
        &self,
        inputs: &[&ArrayF],
        _output: &ArrayF,
        grad_output: &ArrayF,
        _needs: &[bool],
    ) -> Vec<Option<ArrayF>> {
        let x = inputs[0];
        let (batch, steps, chans, _) = pool_dims(x).expect("validated in forward");
        let idx = argmax_over_time(x, batch, steps, chans);
        let mut dx = vec![0.0; x.len()];
        for (i, (&t, &g)) in idx.iter().zip(grad_output.data()).enumerate() {
            let (b, c) = (i / chans, i % chans);
            dx[b * steps * chans + t * chans + c] += g;
        }
        vec![Some(ArrayF::from_parts(x.shape().to_vec(), dx))]
    }
}

// ------------------------------------------------- softmax cross-entropy

fn logits_dims(logits: &ArrayF) -> Result<(usize, usize)> {
    let (b, c) = match *logits.shape() {
        [c] => (1, c),
        [b, c] => (b, c),
        ref s => {
            return Err(Error::Dimension(format!(
                "logits must be [C] or [B x C], got {s:?}"
            )))
        }
    };
    if b == 0 || c == 0 {
        return Err(Error::EmptyInput("empty logits".into()));
    }
    Ok((b, c))
}

/// Row-wise softmax of a `[B x C]` (or `[C]`) array.
pub fn softmax_rows(logits: &ArrayF) -> Result<ArrayF> {
    let (_, c) = logits_dims(logits)?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    Ok(ArrayF::from_parts(logits.shape().to_vec(), out))
}

/// Mean over the batch of `-log softmax(logits)[label]`, with its gradient
/// `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &ArrayF, labels: &[usize]) -> Result<(f64, ArrayF)> {
    let (b, c) = logits_dims(logits)?;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!("label {bad} outside 0..{c}")));
    }
    let mut grad = softmax_rows(logits)?.into_data();
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
        grad[i * c + l] -= 1.0;
    }
    let inv = 1.0 / b as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, ArrayF::from_parts(logits.shape().to_vec(), grad)))
}

#[derive(Debug, Clone)]
pub struct SoftmaxCrossEntropy {
    pub labels: Vec<usize>,
}

impl Function for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        expect_inputs("softmax_cross_entropy", inputs, 1)?;
        let (loss, _) = softmax_cross_entropy(inputs[0], &self.labels)?;
        Ok(ArrayF::scalar(loss))
    }

    fn backward(
        &self,
        inputs: &[&ArrayF],
        _output: &ArrayF,
        grad_output: &ArrayF,
        _needs: &[bool],
    ) -> Vec<Option<ArrayF>> {
        let (_, grad) = softmax_cross_entropy(inputs[0], &self.labels).expect("validated in forward");
        let s = grad_output.data()[0];
        let g = grad.data().iter().map(|v| v * s).collect();
        vec![Some(ArrayF::from_parts(inputs[0].shape().to_vec(), g))]
    }
}

// ------------------------------------------------------------------- sum

#[derive(Debug, Clone, Copy, Default)]
pub struct Sum;

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        expect_inputs("sum", inputs, 1)?;
        Ok(ArrayF::scalar(inputs[0].data().iter().sum()))
    }

    fn backward(
        &self,
        inputs: &[&ArrayF],
        _output: &ArrayF,
        grad_output: &ArrayF,
        _needs: &[bool],
    ) -> Vec<Option<ArrayF>> {
        vec![Some(ArrayF::full(inputs[0].shape(), grad_output.data()[0]))]
    }
}

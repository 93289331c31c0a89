//! Fused multi-head attention kernel for stacked sequences.
//!
//! Tokens attend to the tokens of their own sequence through one softmax, and
//! (when visible) to that sequence's prompt slots through a second, separate
//! softmax. A prompt block of zeros therefore contributes exactly nothing,
//! which keeps the "prompt channel off" backbone a bitwise special case.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub prompt_len: usize,
    pub width: usize,
}

impl AttentionLayout {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Cached softmax probabilities, laid out `[batch][head][query][key]`.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub token_probs: Vec<f64>,
    pub prompt_probs: Option<Vec<f64>>,
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Scores and probabilities for one (batch, head) pair against `keys`.
#[allow(clippy::too_many_arguments)]
fn head_probs(
    lay: &AttentionLayout,
    q: &[f64],
    keys: &[f64],
    b: usize,
    h: usize,
    key_rows: usize,
    out: &mut [f64],
) {
    let (d, dh, t) = (lay.width, lay.head_dim(), lay.seq);
    let scale = lay.scale();
    for i in 0..t {
        let qrow = &q[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
        let row = &mut out[i * key_rows..(i + 1) * key_rows];
        for (j, s) in row.iter_mut().enumerate() {
            let krow = &keys[(b * key_rows + j) * d + h * dh..(b * key_rows + j) * d + (h + 1) * dh];
            *s = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
        }
        softmax_in_place(row);
    }
}

fn accumulate_values(
    lay: &AttentionLayout,
    probs: &[f64],
    values: &[f64],
    b: usize,
    h: usize,
    key_rows: usize,
    out: &mut [f64],
) {
    let (d, dh, t) = (lay.width, lay.head_dim(), lay.seq);
    for i in 0..t {
        let orow = (b * t + i) * d + h * dh;
        for j in 0..key_rows {
            let p = probs[i * key_rows + j];
            let vrow = (b * key_rows + j) * d + h * dh;
            for c in 0..dh {
                out[orow + c] += p * values[vrow + c];
            }
        }
    }
}

pub fn forward(
    lay: &AttentionLayout,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    prompt: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, AttentionCache) {
    let (t, l, nh) = (lay.seq, lay.prompt_len, lay.heads);
    let mut out = vec![0.0; lay.batch * t * lay.width];
    let mut token_probs = vec![0.0; lay.batch * nh * t * t];
    let mut prompt_probs = prompt.map(|_| vec![0.0; lay.batch * nh * t * l]);
    for b in 0..lay.batch {
        for h in 0..nh {
            let tp = &mut token_probs[(b * nh + h) * t * t..(b * nh + h + 1) * t * t];
            head_probs(lay, q, k, b, h, t, tp);
            accumulate_values(lay, tp, v, b, h, t, &mut out);
            if let (Some((pk, pv)), Some(pp)) = (prompt, prompt_probs.as_mut()) {
                let pp = &mut pp[(b * nh + h) * t * l..(b * nh + h + 1) * t * l];
                head_probs(lay, q, pk, b, h, l, pp);
                accumulate_values(lay, pp, pv, b, h, l, &mut out);
            }
        }
    }
    (
        out,
        AttentionCache {
            token_probs,
            prompt_probs,
        },
    )
}

/// Gradients for one softmax channel: accumulates into dq, dkeys, dvalues.
#[allow(clippy::too_many_arguments)]
fn channel_backward(
    lay: &AttentionLayout,
    probs: &[f64],
    d_out: &[f64],
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    key_rows: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let (d, dh, t, nh) = (lay.width, lay.head_dim(), lay.seq, lay.heads);
    let scale = lay.scale();
    let mut dp = vec![0.0; key_rows];
    for b in 0..lay.batch {
        for h in 0..nh {
            let pb = &probs[(b * nh + h) * t * key_rows..(b * nh + h + 1) * t * key_rows];
            for i in 0..t {
                let orow = (b * t + i) * d + h * dh;
                let prow = &pb[i * key_rows..(i + 1) * key_rows];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vrow = (b * key_rows + j) * d + h * dh;
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += d_out[orow + c] * values[vrow + c];
                        dv[vrow + c] += prow[j] * d_out[orow + c];
                    }
                    *dpj = acc;
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
                for j in 0..key_rows {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (b * key_rows + j) * d + h * dh;
                    for c in 0..dh {
                        dq[orow + c] += ds * keys[krow + c];
                        dk[krow + c] += ds * q[orow + c];
                    }
                }
            }
        }
    }
}

pub struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dpk: Option<Vec<f64>>,
    pub dpv: Option<Vec<f64>>,
}

pub fn backward(
    lay: &AttentionLayout,
    cache: &AttentionCache,
    d_out: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    prompt: Option<(&[f64], &[f64])>,
) -> AttentionGrads {
    let n = q.len();
    let mut dq = vec![0.0; n];
    let mut dk = vec![0.0; n];
    let mut dv = vec![0.0; n];
    channel_backward(
        lay,
        &cache.token_probs,
        d_out,
        q,
        k,
        v,
        lay.seq,
        &mut dq,
        &mut dk,
        &mut dv,
    );
    let (mut dpk, mut dpv) = (None, None);
    if let (Some((pk, pv)), Some(pp)) = (prompt, cache.prompt_probs.as_ref()) {
        let mut gk = vec![0.0; pk.len()];
        let mut gv = vec![0.0; pv.len()];
        channel_backward(
            lay,
            pp,
            d_out,
            q,
            pk,
            pv,
            lay.prompt_len,
            &mut dq,
            &mut gk,
            &mut gv,
        );
        dpk = Some(gk);
        dpv = Some(gv);
    }
    AttentionGrads {
        dq,
        dk,
        dv,
        dpk,
        dpv,
    }
}

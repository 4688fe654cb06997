//! Connectionist temporal classification: loss with an explicit gradient,
//! and greedy decoding.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::data::text::{decode_ids, BLANK};
use crate::error::{invalid, shape_err, Result};

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Frames needed to emit `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let z = logsumexp(row);
    row.iter().map(|v| v - z).collect()
}

/// Negative log-likelihood of `target` under per-frame logits `[T, V]`
/// (row-major) and its gradient with respect to the logits.
pub fn ctc_host(logits: &[f64], t: usize, v: usize, target: &[u32]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != t * v || t == 0 {
        return Err(shape_err!(
            "ctc expects {t}x{v} logits, got {}",
            logits.len()
        ));
    }
    if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k as usize >= v) {
        return Err(invalid!(
            "ctc target label {bad} is blank or outside vocabulary {v}"
        ));
    }
    if min_frames(target) > t {
        return Err(invalid!(
            "ctc target of length {} needs {} frames, only {t} available",
            target.len(),
            min_frames(target)
        ));
    }
    let lp: Vec<Vec<f64>> = logits.chunks_exact(v).map(log_softmax).collect();
    // Extended label sequence with blanks: -, l1, -, l2, ..., -.
    let ext: Vec<u32> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&k| [k, BLANK]))
        .collect();
    let s = ext.len();
    let skip = |i: usize| i >= 2 && ext[i] != BLANK && ext[i] != ext[i - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![ninf; s]; t];
    alpha[0][0] = lp[0][ext[0] as usize];
    if s > 1 {
        alpha[0][1] = lp[0][ext[1] as usize];
    }
    for k in 1..t {
        for i in 0..s {
            let mut c = vec![alpha[k - 1][i]];
            if i >= 1 {
                c.push(alpha[k - 1][i - 1]);
            }
            if skip(i) {
                c.push(alpha[k - 1][i - 2]);
            }
            alpha[k][i] = logsumexp(&c) + lp[k][ext[i] as usize];
        }
    }
    let mut beta = vec![vec![ninf; s]; t];
    beta[t - 1][s - 1] = lp[t - 1][ext[s - 1] as usize];
    if s > 1 {
        beta[t - 1][s - 2] = lp[t - 1][ext[s - 2] as usize];
    }
    for k in (0..t - 1).rev() {
        for i in 0..s {
            let mut c = vec![beta[k + 1][i]];
            if i + 1 < s {
                c.push(beta[k + 1][i + 1]);
            }
            if i + 2 < s && skip(i + 2) {
                c.push(beta[k + 1][i + 2]);
            }
            beta[k][i] = logsumexp(&c) + lp[k][ext[i] as usize];
        }
    }
    let tail: Vec<f64> = alpha[t - 1][s.saturating_sub(2)..].to_vec();
    let log_p = logsumexp(&tail);
    if !log_p.is_finite() {
        return Err(invalid!("ctc target has zero probability"));
    }

    let mut grad = vec![0.0; t * v];
    for k in 0..t {
        let mut occ = vec![ninf; v];
        for i in 0..s {
            let c = ext[i] as usize;
            // alpha and beta both include the frame-k emission.
            occ[c] = logsumexp(&[occ[c], alpha[k][i] + beta[k][i] - lp[k][c]]);
        }
        for c in 0..v {
            grad[k * v + c] = lp[k][c].exp() - (occ[c] - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

struct CtcOp {
    targets: Vec<Vec<u32>>,
}

impl CtcOp {
    fn host(&self, logits: &Tensor) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
        let (b, t, v) = logits.dims3()?;
        let x: Vec<f64> = logits
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let mut losses = Vec::with_capacity(b);
        let mut grads = Vec::with_capacity(b * t * v);
        for (i, target) in self.targets.iter().enumerate() {
            let (l, g) = ctc_host(&x[i * t * v..(i + 1) * t * v], t, v, target)
                .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            losses.push(l);
            grads.extend(g);
        }
        Ok((losses, grads))
    }
}

impl CustomOp1 for CtcOp {
    fn name(&self) -> &'static str {
        "ctc-loss"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.shape().dims3()?;
        let Some((a, e)) = l.contiguous_offsets() else {
            candle_core::bail!("ctc-loss expects contiguous logits")
        };
        let t = match s {
            CpuStorage::F32(x) => Tensor::from_slice(&x[a..e], dims, &candle_core::Device::Cpu)?,
            CpuStorage::F64(x) => Tensor::from_slice(&x[a..e], dims, &candle_core::Device::Cpu)?,
            _ => candle_core::bail!("ctc-loss supports f32/f64"),
        };
        let (losses, _) = self.host(&t)?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(losses.iter().map(|&v| v as f32).collect()),
            _ => CpuStorage::F64(losses),
        };
        Ok((out, Shape::from(dims.0)))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (b, t, v) = arg.dims3()?;
        let (_, g) = self.host(&arg.detach())?;
        let g = Tensor::from_vec(g, (b, t, v), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(g.broadcast_mul(&grad.reshape((b, 1, 1))?)?))
    }
}

/// Per-utterance CTC losses `[B]` for logits `[B, T, V]`.
pub fn ctc_loss(logits: &Tensor, targets: &[&[u32]]) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    if targets.len() != b {
        return Err(shape_err!(
            "{b} logit sequences but {} targets",
            targets.len()
        ));
    }
    for tg in targets {
        if let Some(&bad) = tg.iter().find(|&&k| k == BLANK || k as usize >= v) {
            return Err(invalid!(
                "ctc target label {bad} is blank or outside vocabulary {v}"
            ));
        }
        if min_frames(tg) > t {
            return Err(invalid!(
                "ctc target of length {} needs {} frames, only {t} available",
                tg.len(),
                min_frames(tg)
            ));
        }
    }
    let op = CtcOp {
        targets: targets.iter().map(|t| t.to_vec()).collect(),
    };
    Ok(logits.contiguous()?.apply_op1(op)?)
}

/// Per-frame argmax ids of `[T, V]` logits.
pub fn frame_argmax(logits: &[f64], v: usize) -> Vec<u32> {
    logits
        .chunks_exact(v)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Collapses repeats and drops blanks.
pub fn collapse(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Greedy transcription of `[T, V]` logits.
pub fn greedy_decode(logits: &[f64], v: usize) -> String {
    decode_ids(&collapse(&frame_argmax(logits, v)))
}

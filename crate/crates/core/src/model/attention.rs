//! Multi-head scaled dot-product attention with optional per-head QK norm.

use crate::error::{dim_err, Result};
use crate::tensor::{
    entropy, matmul, matmul_nt, matmul_tn, rms_norm_backward, rms_norm_with_stats, scale,
    softmax, softmax_backward, Saved, Tensor,
};

/// Per-forward attention telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    /// Pre-softmax scores, `[heads, Sq, Skv]`.
    pub logits: Tensor,
    /// Post-softmax weights, `[heads, Sq, Skv]`.
    pub weights: Tensor,
    /// Row entropies in nats, `[heads, Sq]`.
    pub entropy: Tensor,
    pub max_abs_logit: f64,
}

impl AttentionState {
    pub fn min_entropy(&self) -> f64 {
        self.entropy.data().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Largest `max - min` over all logit rows.
    pub fn max_logit_range(&self) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..self.logits.rows() {
            let r = self.logits.row(i);
            let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
            best = best.max(hi - lo);
        }
        best
    }
}

/// `sqrt(head_dim) * max|q_gain| * max|k_gain|`: no logit can exceed this
/// once queries and keys are RMS-normalized.
pub fn qk_logit_bound(head_dim: usize, q_gain: &Tensor, k_gain: &Tensor) -> f64 {
    (head_dim as f64).sqrt() * q_gain.max_abs() * k_gain.max_abs()
}

#[derive(Debug, Clone)]
struct HeadCache {
    q_raw: Tensor,
    k_raw: Tensor,
    q_rms: Vec<f64>,
    k_rms: Vec<f64>,
    qn: Tensor,
    kn: Tensor,
    v: Tensor,
    probs: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct AttendCache {
    heads: Saved<Vec<HeadCache>>,
}

pub(crate) fn head_cols(t: &Tensor, h: usize, hd: usize) -> Result<Tensor> {
    t.slice_cols(h * hd, (h + 1) * hd)
}

pub(crate) fn write_cols(dst: &mut Tensor, start: usize, src: &Tensor) {
    let w = src.cols();
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + w].copy_from_slice(src.row(i));
    }
}

fn gain_row(g: &Tensor, h: usize) -> Result<Tensor> {
    Tensor::new(&[g.cols()], g.row(h).to_vec())
}

/// Attention over already-projected `q` (`Sq × w`), `k`, `v` (`Skv × w`).
/// With `qk_gains`, each head's query and key rows are RMS-normalized over the
/// head dimension and scaled by that head's gains before the dot product.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    num_heads: usize,
    qk_gains: Option<(&Tensor, &Tensor)>,
    retain: bool,
) -> Result<(Tensor, AttentionState, AttendCache)> {
    let (sq, w) = q.dims2()?;
    let (skv, wk) = k.dims2()?;
    if wk != w || v.shape() != [skv, w] {
        return Err(dim_err!("attention q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()));
    }
    if sq == 0 || skv == 0 {
        return Err(dim_err!("attention needs at least one query and one key"));
    }
    if num_heads == 0 || w % num_heads != 0 {
        return Err(dim_err!("width {w} not divisible into {num_heads} heads"));
    }
    let hd = w / num_heads;
    if let Some((qg, kg)) = qk_gains {
        if qg.shape() != [num_heads, hd] || kg.shape() != [num_heads, hd] {
            return Err(dim_err!("qk gains must be [{num_heads}, {hd}]"));
        }
    }
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor::zeros(&[sq, w]);
    let mut logits = Vec::with_capacity(num_heads * sq * skv);
    let mut weights = Vec::with_capacity(num_heads * sq * skv);
    let mut ent = Vec::with_capacity(num_heads * sq);
    let mut caches = Vec::new();
    for h in 0..num_heads {
        let q_raw = head_cols(q, h, hd)?;
        let k_raw = head_cols(k, h, hd)?;
        let vh = head_cols(v, h, hd)?;
        let (qn, q_rms, kn, k_rms) = match qk_gains {
            Some((qg, kg)) => {
                let (qn, qr) = rms_norm_with_stats(&q_raw, &gain_row(qg, h)?)?;
                let (kn, kr) = rms_norm_with_stats(&k_raw, &gain_row(kg, h)?)?;
                (qn, qr, kn, kr)
            }
            None => (q_raw.clone(), Vec::new(), k_raw.clone(), Vec::new()),
        };
        let scores = scale(&matmul_nt(&qn, &kn)?, inv_sqrt);
        let probs = softmax(&scores)?;
        let oh = matmul(&probs, &vh)?;
        write_cols(&mut out, h * hd, &oh);
        for i in 0..sq {
            ent.push(entropy(probs.row(i)));
        }
        logits.extend_from_slice(scores.data());
        weights.extend_from_slice(probs.data());
        if retain {
            caches.push(HeadCache { q_raw, k_raw, q_rms, k_rms, qn, kn, v: vh, probs });
        }
    }
    let logits = Tensor::new(&[num_heads, sq, skv], logits)?;
    let state = AttentionState {
        max_abs_logit: logits.max_abs(),
        logits,
        weights: Tensor::new(&[num_heads, sq, skv], weights)?,
        entropy: Tensor::new(&[num_heads, sq], ent)?,
    };
    Ok((out, state, AttendCache { heads: Saved::keep(caches, retain) }))
}

pub struct AttendGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    pub dq_gain: Option<Tensor>,
    pub dk_gain: Option<Tensor>,
}

pub fn attend_backward(
    dout: &Tensor,
    cache: &AttendCache,
    qk_gains: Option<(&Tensor, &Tensor)>,
) -> Result<AttendGrads> {
    let heads = cache.heads.get("attention heads")?;
    let num_heads = heads.len();
    let (sq, w) = dout.dims2()?;
    let hd = w / num_heads;
    let skv = heads[0].v.rows();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut dq = Tensor::zeros(&[sq, w]);
    let mut dk = Tensor::zeros(&[skv, w]);
    let mut dv = Tensor::zeros(&[skv, w]);
    let mut dqg = qk_gains.map(|_| Tensor::zeros(&[num_heads, hd]));
    let mut dkg = qk_gains.map(|_| Tensor::zeros(&[num_heads, hd]));
    for (h, hc) in heads.iter().enumerate() {
        let doh = head_cols(dout, h, hd)?;
        let dprobs = matmul_nt(&doh, &hc.v)?;
        write_cols(&mut dv, h * hd, &matmul_tn(&hc.probs, &doh)?);
        let dscores = scale(&softmax_backward(&hc.probs, &dprobs)?, inv_sqrt);
        let dqn = matmul(&dscores, &hc.kn)?;
        let dkn = matmul_tn(&dscores, &hc.qn)?;
        let (dqh, dkh) = match qk_gains {
            Some((qg, kg)) => {
                let (dqh, dg) = rms_norm_backward(&hc.q_raw, &gain_row(qg, h)?, &hc.q_rms, &dqn)?;
                dqg.as_mut().unwrap().row_mut(h).copy_from_slice(dg.data());
                let (dkh, dg) = rms_norm_backward(&hc.k_raw, &gain_row(kg, h)?, &hc.k_rms, &dkn)?;
                dkg.as_mut().unwrap().row_mut(h).copy_from_slice(dg.data());
                (dqh, dkh)
            }
            None => (dqn, dkn),
        };
        write_cols(&mut dq, h * hd, &dqh);
        write_cols(&mut dk, h * hd, &dkh);
    }
    Ok(AttendGrads { dq, dk, dv, dq_gain: dqg, dk_gain: dkg })
}

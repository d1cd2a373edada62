//! Multi-head attention pooling: a learned probe token cross-attends over the
//! encoder tokens, followed by a residual MLP sublayer and a final norm.
//! The probe path has no QK norm.

use super::attention::{attend, attend_backward, AttendCache, AttentionState};
use super::config::VitConfig;
use super::params::HeadParams;
use crate::error::Result;
use crate::tensor::{
    add_row_vector, gelu, gelu_backward, matmul, matmul_backward, rms_norm_backward,
    rms_norm_with_stats, Saved, Tensor,
};

#[derive(Debug, Clone, Default)]
pub struct HeadCache {
    tokens: Saved<Tensor>,
    attend: AttendCache,
    heads_out: Saved<Tensor>,
    attn_out: Saved<Tensor>,
    attn_rms: Saved<Vec<f64>>,
    normed: Saved<Tensor>,
    pre_act: Saved<Tensor>,
    act: Saved<Tensor>,
    residual: Saved<Tensor>,
    final_rms: Saved<Vec<f64>>,
}

/// Pooled representation, `1 × width`.
pub fn map_head_forward(
    tokens: &Tensor,
    hp: &HeadParams,
    cfg: &VitConfig,
    retain: bool,
) -> Result<(Tensor, AttentionState, HeadCache)> {
    let q = matmul(&hp.probe, &hp.w_q)?;
    let k = matmul(tokens, &hp.w_k)?;
    let v = matmul(tokens, &hp.w_v)?;
    let (o, state, ac) = attend(&q, &k, &v, cfg.num_heads, None, retain)?;
    let a = matmul(&o, &hp.w_o)?;
    let (n, a_rms) = rms_norm_with_stats(&a, &hp.mlp_gain)?;
    let pre = add_row_vector(&matmul(&n, &hp.w_mlp_in)?, &hp.b_mlp_in)?;
    let act = gelu(&pre);
    let mut r = add_row_vector(&matmul(&act, &hp.w_mlp_out)?, &hp.b_mlp_out)?;
    r.add_assign(&a)?;
    let (pooled, f_rms) = rms_norm_with_stats(&r, &hp.final_gain)?;
    let cache = HeadCache {
        tokens: Saved::keep(tokens.clone(), retain),
        attend: ac,
        heads_out: Saved::keep(o, retain),
        attn_out: Saved::keep(a, retain),
        attn_rms: Saved::keep(a_rms, retain),
        normed: Saved::keep(n, retain),
        pre_act: Saved::keep(pre, retain),
        act: Saved::keep(act, retain),
        residual: Saved::keep(r, retain),
        final_rms: Saved::keep(f_rms, retain),
    };
    Ok((pooled, state, cache))
}

/// Pooled `[width]` vector for `S × width` tokens.
pub fn map_head(tokens: &Tensor, hp: &HeadParams, cfg: &VitConfig) -> Result<Tensor> {
    let (pooled, _, _) = map_head_forward(tokens, hp, cfg, false)?;
    pooled.reshape(&[cfg.width])
}

/// Accumulates head gradients (classifier excluded) into `grads` and returns
/// the token gradient.
pub fn map_head_backward(
    dpooled: &Tensor,
    hp: &HeadParams,
    cache: &HeadCache,
    grads: &mut HeadParams,
) -> Result<Tensor> {
    let r = cache.residual.get("head residual")?;
    let (dr, dg) = rms_norm_backward(r, &hp.final_gain, cache.final_rms.get("head final rms")?, dpooled)?;
    grads.final_gain.add_assign(&dg)?;
    grads.b_mlp_out.add_assign(&dr.sum_rows())?;
    let (dact, dw_out) = matmul_backward(cache.act.get("head act")?, &hp.w_mlp_out, &dr)?;
    grads.w_mlp_out.add_assign(&dw_out)?;
    let dpre = gelu_backward(cache.pre_act.get("head pre-act")?, &dact)?;
    grads.b_mlp_in.add_assign(&dpre.sum_rows())?;
    let (dn, dw_in) = matmul_backward(cache.normed.get("head normed")?, &hp.w_mlp_in, &dpre)?;
    grads.w_mlp_in.add_assign(&dw_in)?;
    let a = cache.attn_out.get("head attention out")?;
    let (da_norm, dgain) = rms_norm_backward(a, &hp.mlp_gain, cache.attn_rms.get("head rms")?, &dn)?;
    grads.mlp_gain.add_assign(&dgain)?;
    let mut da = dr;
    da.add_assign(&da_norm)?;
    let (d_o, dw_o) = matmul_backward(cache.heads_out.get("head heads")?, &hp.w_o, &da)?;
    grads.w_o.add_assign(&dw_o)?;
    let g = attend_backward(&d_o, &cache.attend, None)?;
    let (dprobe, dw_q) = matmul_backward(&hp.probe, &hp.w_q, &g.dq)?;
    grads.probe.add_assign(&dprobe)?;
    grads.w_q.add_assign(&dw_q)?;
    let tokens = cache.tokens.get("head tokens")?;
    let (mut dtok, dw_k) = matmul_backward(tokens, &hp.w_k, &g.dk)?;
    grads.w_k.add_assign(&dw_k)?;
    let (dtok_v, dw_v) = matmul_backward(tokens, &hp.w_v, &g.dv)?;
    grads.w_v.add_assign(&dw_v)?;
    dtok.add_assign(&dtok_v)?;
    Ok(dtok)
}

//! Encoder blocks: the parallel form (one shared pre-norm feeding attention and
//! MLP, summed into a single residual), its fused-projection equivalent, and
//! the sequential form kept for A/B comparisons.

use super::attention::{attend, attend_backward, AttendCache, AttentionState};
use super::config::VitConfig;
use super::params::BlockParams;
use crate::error::{Error, Result};
use crate::tensor::{
    add_row_vector, concat_cols, concat_rows, gelu, gelu_backward, matmul, matmul_backward,
    rms_norm_backward, rms_norm_with_stats, Saved, Tensor,
};

fn qk_gains<'a>(bp: &'a BlockParams, cfg: &VitConfig) -> Result<Option<(&'a Tensor, &'a Tensor)>> {
    if !cfg.qk_norm {
        return Ok(None);
    }
    match (&bp.q_gain, &bp.k_gain) {
        (Some(q), Some(k)) => Ok(Some((q, k))),
        _ => Err(Error::Contract("qk_norm is on but the block has no q/k gains".into())),
    }
}

#[derive(Debug, Clone, Default)]
pub struct AttnSublayerCache {
    input: Saved<Tensor>,
    heads_out: Saved<Tensor>,
    attend: AttendCache,
}

/// `x · w_qkv` split into q, k, v, attended per head, then projected by
/// `w_attn_out`. No pre-norm is applied here.
pub fn attention_sublayer(
    x: &Tensor,
    bp: &BlockParams,
    cfg: &VitConfig,
    retain: bool,
) -> Result<(Tensor, AttentionState, AttnSublayerCache)> {
    let w = cfg.width;
    let qkv = matmul(x, &bp.w_qkv)?;
    let q = qkv.slice_cols(0, w)?;
    let k = qkv.slice_cols(w, 2 * w)?;
    let v = qkv.slice_cols(2 * w, 3 * w)?;
    let (o, state, ac) = attend(&q, &k, &v, cfg.num_heads, qk_gains(bp, cfg)?, retain)?;
    let out = matmul(&o, &bp.w_attn_out)?;
    let cache = AttnSublayerCache {
        input: Saved::keep(x.clone(), retain),
        heads_out: Saved::keep(o, retain),
        attend: ac,
    };
    Ok((out, state, cache))
}

fn attention_sublayer_backward(
    dout: &Tensor,
    bp: &BlockParams,
    cfg: &VitConfig,
    cache: &AttnSublayerCache,
    grads: &mut BlockParams,
) -> Result<Tensor> {
    let o = cache.heads_out.get("attention heads output")?;
    let x = cache.input.get("attention input")?;
    let (d_o, dw_ao) = matmul_backward(o, &bp.w_attn_out, dout)?;
    grads.w_attn_out.add_assign(&dw_ao)?;
    let g = attend_backward(&d_o, &cache.attend, qk_gains(bp, cfg)?)?;
    if let (Some(dst), Some(src)) = (grads.q_gain.as_mut(), g.dq_gain.as_ref()) {
        dst.add_assign(src)?;
    }
    if let (Some(dst), Some(src)) = (grads.k_gain.as_mut(), g.dk_gain.as_ref()) {
        dst.add_assign(src)?;
    }
    let dqkv = concat_cols(&[&g.dq, &g.dk, &g.dv])?;
    let (dx, dw_qkv) = matmul_backward(x, &bp.w_qkv, &dqkv)?;
    grads.w_qkv.add_assign(&dw_qkv)?;
    Ok(dx)
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    input: Saved<Tensor>,
    pre_act: Saved<Tensor>,
    act: Saved<Tensor>,
}

/// `gelu(x · w_in + b_in) · w_out`; the out-bias is the block's residual bias
/// and is added by the caller.
pub fn mlp_sublayer(x: &Tensor, bp: &BlockParams, retain: bool) -> Result<(Tensor, MlpCache)> {
    let pre = add_row_vector(&matmul(x, &bp.w_mlp_in)?, &bp.b_mlp_in)?;
    let act = gelu(&pre);
    let out = matmul(&act, &bp.w_mlp_out)?;
    let cache = MlpCache {
        input: Saved::keep(x.clone(), retain),
        pre_act: Saved::keep(pre, retain),
        act: Saved::keep(act, retain),
    };
    Ok((out, cache))
}

fn mlp_sublayer_backward(
    dout: &Tensor,
    bp: &BlockParams,
    cache: &MlpCache,
    grads: &mut BlockParams,
) -> Result<Tensor> {
    let act = cache.act.get("mlp activation")?;
    let (dact, dw_out) = matmul_backward(act, &bp.w_mlp_out, dout)?;
    grads.w_mlp_out.add_assign(&dw_out)?;
    let dpre = gelu_backward(cache.pre_act.get("mlp pre-activation")?, &dact)?;
    grads.b_mlp_in.add_assign(&dpre.sum_rows())?;
    let (dx, dw_in) = matmul_backward(cache.input.get("mlp input")?, &bp.w_mlp_in, &dpre)?;
    grads.w_mlp_in.add_assign(&dw_in)?;
    Ok(dx)
}

#[derive(Debug, Clone)]
pub enum BlockCache {
    Parallel {
        x: Saved<Tensor>,
        rms: Saved<Vec<f64>>,
        attn: AttnSublayerCache,
        mlp: MlpCache,
    },
    Sequential {
        x: Saved<Tensor>,
        rms1: Saved<Vec<f64>>,
        x1: Saved<Tensor>,
        rms2: Saved<Vec<f64>>,
        attn: AttnSublayerCache,
        mlp: MlpCache,
    },
}

/// One encoder block. Parallel form: `y' = norm(x)`,
/// `y = x + mlp(y') + attn(y') + b_out`. Sequential form:
/// `x1 = x + attn(norm(x))`, `y = x1 + mlp(norm2(x1)) + b_out`.
pub fn block_forward(
    x: &Tensor,
    bp: &BlockParams,
    cfg: &VitConfig,
    retain: bool,
) -> Result<(Tensor, AttentionState, BlockCache)> {
    if cfg.parallel_block {
        let (n, rms) = rms_norm_with_stats(x, &bp.ln_gain)?;
        let (a, state, attn) = attention_sublayer(&n, bp, cfg, retain)?;
        let (m, mlp) = mlp_sublayer(&n, bp, retain)?;
        let mut y = x.clone();
        y.add_assign(&m)?;
        y.add_assign(&a)?;
        let y = add_row_vector(&y, &bp.b_out)?;
        let cache = BlockCache::Parallel {
            x: Saved::keep(x.clone(), retain),
            rms: Saved::keep(rms, retain),
            attn,
            mlp,
        };
        Ok((y, state, cache))
    } else {
        let gain2 = bp
            .ln2_gain
            .as_ref()
            .ok_or_else(|| Error::Contract("sequential block needs a second norm gain".into()))?;
        let (n1, rms1) = rms_norm_with_stats(x, &bp.ln_gain)?;
        let (a, state, attn) = attention_sublayer(&n1, bp, cfg, retain)?;
        let mut x1 = x.clone();
        x1.add_assign(&a)?;
        let (n2, rms2) = rms_norm_with_stats(&x1, gain2)?;
        let (m, mlp) = mlp_sublayer(&n2, bp, retain)?;
        let mut y = x1.clone();
        y.add_assign(&m)?;
        let y = add_row_vector(&y, &bp.b_out)?;
        let cache = BlockCache::Sequential {
            x: Saved::keep(x.clone(), retain),
            rms1: Saved::keep(rms1, retain),
            x1: Saved::keep(x1, retain),
            rms2: Saved::keep(rms2, retain),
            attn,
            mlp,
        };
        Ok((y, state, cache))
    }
}

/// Input gradient and parameter gradients of [`block_forward`].
pub fn block_backward(
    dy: &Tensor,
    bp: &BlockParams,
    cfg: &VitConfig,
    cache: &BlockCache,
) -> Result<(Tensor, BlockParams)> {
    let mut grads = bp.zeros_like();
    grads.b_out.add_assign(&dy.sum_rows())?;
    let dx = match cache {
        BlockCache::Parallel { x, rms, attn, mlp } => {
            let mut dn = mlp_sublayer_backward(dy, bp, mlp, &mut grads)?;
            dn.add_assign(&attention_sublayer_backward(dy, bp, cfg, attn, &mut grads)?)?;
            let (dx_norm, dg) =
                rms_norm_backward(x.get("block input")?, &bp.ln_gain, rms.get("block rms")?, &dn)?;
            grads.ln_gain.add_assign(&dg)?;
            let mut dx = dy.clone();
            dx.add_assign(&dx_norm)?;
            dx
        }
        BlockCache::Sequential { x, rms1, x1, rms2, attn, mlp } => {
            let gain2 = bp.ln2_gain.as_ref().expect("sequential cache implies norm2");
            let dn2 = mlp_sublayer_backward(dy, bp, mlp, &mut grads)?;
            let (dx1_norm, dg2) =
                rms_norm_backward(x1.get("block mid")?, gain2, rms2.get("block rms2")?, &dn2)?;
            grads.ln2_gain.as_mut().unwrap().add_assign(&dg2)?;
            let mut dx1 = dy.clone();
            dx1.add_assign(&dx1_norm)?;
            let dn1 = attention_sublayer_backward(&dx1, bp, cfg, attn, &mut grads)?;
            let (dx_norm, dg1) =
                rms_norm_backward(x.get("block input")?, &bp.ln_gain, rms1.get("block rms")?, &dn1)?;
            grads.ln_gain.add_assign(&dg1)?;
            let mut dx = dx1;
            dx.add_assign(&dx_norm)?;
            dx
        }
    };
    Ok((dx, grads))
}

/// Attention branch applied directly to `x` (no pre-norm).
pub fn qk_attention(x: &Tensor, bp: &BlockParams, cfg: &VitConfig) -> Result<(Tensor, AttentionState)> {
    attention_sublayer(x, bp, cfg, false).map(|(y, s, _)| (y, s))
}

pub fn parallel_block(x: &Tensor, bp: &BlockParams, cfg: &VitConfig) -> Result<Tensor> {
    block_forward(x, bp, cfg, false).map(|(y, _, _)| y)
}

/// `[w_qkv | w_mlp_in]`, shape `width × (3·width + mlp_dim)`.
pub fn fused_in_kernel(bp: &BlockParams) -> Result<Tensor> {
    concat_cols(&[&bp.w_qkv, &bp.w_mlp_in])
}

/// `[w_attn_out ; w_mlp_out]`, shape `(width + mlp_dim) × width`.
pub fn fused_out_kernel(bp: &BlockParams) -> Result<Tensor> {
    concat_rows(&[&bp.w_attn_out, &bp.w_mlp_out])
}

/// The parallel block computed with the two fused projections: one matmul
/// for QKV plus MLP-in, one for attention-out plus MLP-out.
pub fn fused_forward(x: &Tensor, bp: &BlockParams, cfg: &VitConfig) -> Result<Tensor> {
    if !cfg.parallel_block {
        return Err(Error::Contract("fused_forward requires the parallel block form".into()));
    }
    let w = cfg.width;
    let (n, _) = rms_norm_with_stats(x, &bp.ln_gain)?;
    let z = matmul(&n, &fused_in_kernel(bp)?)?;
    let q = z.slice_cols(0, w)?;
    let k = z.slice_cols(w, 2 * w)?;
    let v = z.slice_cols(2 * w, 3 * w)?;
    let (o, _, _) = attend(&q, &k, &v, cfg.num_heads, qk_gains(bp, cfg)?, false)?;
    let hidden = gelu(&add_row_vector(&z.slice_cols(3 * w, 3 * w + cfg.mlp_dim)?, &bp.b_mlp_in)?);
    let u = concat_cols(&[&o, &hidden])?;
    let mut y = matmul(&u, &fused_out_kernel(bp)?)?;
    y.add_assign(x)?;
    add_row_vector(&y, &bp.b_out)
}

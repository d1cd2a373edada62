//! Parallel-block ViT with QK normalization.

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod head;
pub mod loss;
pub mod params;

pub use attention::{attend, attend_backward, qk_logit_bound, AttendCache, AttendGrads, AttentionState};
pub use block::{
    block_backward, block_forward, fused_forward, fused_in_kernel, fused_out_kernel, parallel_block, qk_attention, BlockCache,
};
pub use config::VitConfig;
pub use embed::{embed, interpolate_pos_embed, patchify};
pub use head::map_head;
pub use loss::{sigmoid_xent, sigmoid_xent_backward};
pub use params::{init_params, param_specs, parameter_count, BlockParams, ParamBreakdown, ParamSpec, VitParams};

use crate::error::{dim_err, Result};
use crate::tensor::{add_row_vector, matmul, matmul_backward, Tensor};
use head::{map_head_backward, map_head_forward, HeadCache};

/// How encoder blocks are executed. The replicated runner calls the block
/// directly; the sharded runner in `shard` distributes it over a mesh.
pub trait BlockRunner {
    type Cache;

    fn forward(
        &self,
        x: &Tensor,
        bp: &BlockParams,
        cfg: &VitConfig,
        retain: bool,
    ) -> Result<(Tensor, AttentionState, Self::Cache)>;

    fn backward(
        &self,
        dy: &Tensor,
        bp: &BlockParams,
        cfg: &VitConfig,
        cache: &Self::Cache,
    ) -> Result<(Tensor, BlockParams)>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Replicated;

impl BlockRunner for Replicated {
    type Cache = BlockCache;

    fn forward(
        &self,
        x: &Tensor,
        bp: &BlockParams,
        cfg: &VitConfig,
        retain: bool,
    ) -> Result<(Tensor, AttentionState, BlockCache)> {
        block_forward(x, bp, cfg, retain)
    }

    fn backward(
        &self,
        dy: &Tensor,
        bp: &BlockParams,
        cfg: &VitConfig,
        cache: &BlockCache,
    ) -> Result<(Tensor, BlockParams)> {
        block_backward(dy, bp, cfg, cache)
    }
}

/// Attention telemetry of one encoder block, merged over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnStats {
    pub max_abs_logit: f64,
    pub min_entropy: f64,
    pub max_logit_range: f64,
    pub seq_len: usize,
    /// QK-norm logit bound for the gains used; `None` without QK norm.
    pub logit_bound: Option<f64>,
}

impl AttnStats {
    pub fn from_state(state: &AttentionState, bound: Option<f64>) -> Self {
        AttnStats {
            max_abs_logit: state.max_abs_logit,
            min_entropy: state.min_entropy(),
            max_logit_range: state.max_logit_range(),
            seq_len: state.logits.cols(),
            logit_bound: bound,
        }
    }

    pub fn merge(&mut self, other: &AttnStats) {
        self.max_abs_logit = self.max_abs_logit.max(other.max_abs_logit);
        self.min_entropy = self.min_entropy.min(other.min_entropy);
        self.max_logit_range = self.max_logit_range.max(other.max_logit_range);
    }

    pub fn bound_holds(&self) -> bool {
        self.logit_bound.map_or(true, |b| self.max_abs_logit <= b)
    }
}

/// Per-block attention telemetry for a batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchStats {
    pub blocks: Vec<AttnStats>,
}

impl BatchStats {
    pub fn max_abs_logit(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, s| m.max(s.max_abs_logit))
    }

    pub fn min_entropy(&self) -> f64 {
        self.blocks.iter().fold(f64::INFINITY, |m, s| m.min(s.min_entropy))
    }

    /// Largest per-block bound, `None` without QK norm.
    pub fn logit_bound(&self) -> Option<f64> {
        self.blocks.iter().filter_map(|s| s.logit_bound).reduce(f64::max)
    }

    pub fn bound_holds(&self) -> bool {
        self.blocks.iter().all(AttnStats::bound_holds)
    }

    fn absorb(&mut self, per_block: Vec<AttnStats>) {
        if self.blocks.is_empty() {
            self.blocks = per_block;
        } else {
            for (a, b) in self.blocks.iter_mut().zip(&per_block) {
                a.merge(b);
            }
        }
    }
}

fn block_bound(bp: &BlockParams, cfg: &VitConfig) -> Option<f64> {
    match (cfg.qk_norm, &bp.q_gain, &bp.k_gain) {
        (true, Some(q), Some(k)) => Some(qk_logit_bound(cfg.head_dim(), q, k)),
        _ => None,
    }
}

pub struct ImageCache<C> {
    patches: Tensor,
    blocks: Vec<C>,
    head: HeadCache,
    pooled: Tensor,
}

/// Logits (`1 × num_classes`) for one image.
pub fn forward_image<R: BlockRunner>(
    params: &VitParams,
    image: &Tensor,
    cfg: &VitConfig,
    runner: &R,
    retain: bool,
) -> Result<(Tensor, Vec<AttnStats>, ImageCache<R::Cache>)> {
    let patches = patchify(image, cfg)?;
    let mut x = embed::embed_patches(&patches, &params.embed)?;
    let mut stats = Vec::with_capacity(params.blocks.len());
    let mut caches = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let (y, state, cache) = runner.forward(&x, bp, cfg, retain)?;
        stats.push(AttnStats::from_state(&state, block_bound(bp, cfg)));
        caches.push(cache);
        x = y;
    }
    let (pooled, _, head) = map_head_forward(&x, &params.head, cfg, retain)?;
    let logits = add_row_vector(&matmul(&pooled, &params.head.classifier)?, &params.head.classifier_bias)?;
    Ok((logits, stats, ImageCache { patches, blocks: caches, head, pooled }))
}

pub fn backward_image<R: BlockRunner>(
    dlogits: &Tensor,
    params: &VitParams,
    cfg: &VitConfig,
    runner: &R,
    cache: &ImageCache<R::Cache>,
    grads: &mut VitParams,
) -> Result<()> {
    let (dpooled, dc) = matmul_backward(&cache.pooled, &params.head.classifier, dlogits)?;
    grads.head.classifier.add_assign(&dc)?;
    grads.head.classifier_bias.add_assign(&dlogits.sum_rows())?;
    let mut dx = map_head_backward(&dpooled, &params.head, &cache.head, &mut grads.head)?;
    for (i, bp) in params.blocks.iter().enumerate().rev() {
        let (dprev, g) = runner.backward(&dx, bp, cfg, &cache.blocks[i])?;
        grads.blocks[i] = add_block_grads(&grads.blocks[i], &g)?;
        dx = dprev;
    }
    embed::embed_backward(&cache.patches, &dx, &mut grads.embed)
}

fn add_block_grads(a: &BlockParams, b: &BlockParams) -> Result<BlockParams> {
    let mut out = a.clone();
    let add = |x: &mut Tensor, y: &Tensor| x.add_assign(y);
    add(&mut out.ln_gain, &b.ln_gain)?;
    if let (Some(x), Some(y)) = (out.ln2_gain.as_mut(), b.ln2_gain.as_ref()) {
        add(x, y)?;
    }
    add(&mut out.w_qkv, &b.w_qkv)?;
    if let (Some(x), Some(y)) = (out.q_gain.as_mut(), b.q_gain.as_ref()) {
        add(x, y)?;
    }
    if let (Some(x), Some(y)) = (out.k_gain.as_mut(), b.k_gain.as_ref()) {
        add(x, y)?;
    }
    add(&mut out.w_attn_out, &b.w_attn_out)?;
    add(&mut out.w_mlp_in, &b.w_mlp_in)?;
    add(&mut out.b_mlp_in, &b.b_mlp_in)?;
    add(&mut out.w_mlp_out, &b.w_mlp_out)?;
    add(&mut out.b_out, &b.b_out)?;
    Ok(out)
}

/// Logits for a batch of images, `B × num_classes`.
pub fn predict_batch<R: BlockRunner>(
    params: &VitParams,
    images: &[Tensor],
    cfg: &VitConfig,
    runner: &R,
) -> Result<(Tensor, BatchStats)> {
    let mut rows = Vec::with_capacity(images.len() * cfg.num_classes);
    let mut stats = BatchStats::default();
    for img in images {
        let (logits, s, _) = forward_image(params, img, cfg, runner, false)?;
        rows.extend_from_slice(logits.data());
        stats.absorb(s);
    }
    Ok((Tensor::new(&[images.len(), cfg.num_classes], rows)?, stats))
}

/// Batch loss without gradients.
pub fn batch_loss<R: BlockRunner>(
    params: &VitParams,
    images: &[Tensor],
    labels: &Tensor,
    cfg: &VitConfig,
    runner: &R,
) -> Result<f64> {
    let (logits, _) = predict_batch(params, images, cfg, runner)?;
    sigmoid_xent(&logits, labels)
}

/// Batch loss, its gradient for every parameter, and attention telemetry.
pub fn loss_and_grads<R: BlockRunner>(
    params: &VitParams,
    images: &[Tensor],
    labels: &Tensor,
    cfg: &VitConfig,
    runner: &R,
) -> Result<(f64, VitParams, BatchStats)> {
    if labels.shape() != [images.len(), cfg.num_classes] {
        return Err(dim_err!(
            "labels {:?} for {} images of {} classes",
            labels.shape(),
            images.len(),
            cfg.num_classes
        ));
    }
    let mut logits = Vec::with_capacity(images.len());
    let mut caches = Vec::with_capacity(images.len());
    let mut stats = BatchStats::default();
    for img in images {
        let (l, s, c) = forward_image(params, img, cfg, runner, true)?;
        logits.extend_from_slice(l.data());
        caches.push(c);
        stats.absorb(s);
    }
    let logits = Tensor::new(&[images.len(), cfg.num_classes], logits)?;
    let loss = sigmoid_xent(&logits, labels)?;
    let dlogits = sigmoid_xent_backward(&logits, labels)?;
    let mut grads = params.zeros_like();
    for (i, cache) in caches.iter().enumerate() {
        let d = dlogits.slice_rows(i, i + 1)?;
        backward_image(&d, params, cfg, runner, cache, &mut grads)?;
    }
    Ok((loss, grads, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopMode {
    Forward,
    Train,
}

/// Model FLOPs per token under the `2N` (forward) / `6N` (train) convention,
/// with `N` the body parameter count (embedding plus encoder blocks).
pub fn flops_per_token(cfg: &VitConfig, mode: FlopMode) -> f64 {
    let n = ParamBreakdown::of(cfg).body() as f64;
    match mode {
        FlopMode::Forward => 2.0 * n,
        FlopMode::Train => 6.0 * n,
    }
}

/// Attention score and value-mixing FLOPs per token (`QKᵀ` and `PV`), which
/// the parameter-based count leaves out.
pub fn attention_flops_per_token(cfg: &VitConfig, mode: FlopMode) -> f64 {
    let fwd = 4.0 * cfg.tokens() as f64 * cfg.width as f64 * cfg.depth as f64;
    match mode {
        FlopMode::Forward => fwd,
        FlopMode::Train => 3.0 * fwd,
    }
}

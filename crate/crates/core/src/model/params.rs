//! The parameter set and its canonical naming.
//!
//! The bias policy is structural: the QKV projection and every normalization
//! simply have no bias tensor. The attention out-projection and the MLP
//! out-projection share one residual bias (`block{i}.out.bias`), which is the
//! sum their two biases would form once the projections are fused.

use super::config::VitConfig;
use crate::error::{dim_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Gain,
    Bias,
}

/// Which side of the frozen-feature boundary a tensor lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Body,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub part: Part,
    /// Fan-in used for the truncated-normal init.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

pub fn role_of(name: &str) -> Role {
    if name.ends_with(".gain") {
        Role::Gain
    } else if name.ends_with(".bias") {
        Role::Bias
    } else {
        Role::Weight
    }
}

pub fn part_of(name: &str) -> Part {
    if name.starts_with("head.") {
        Part::Head
    } else {
        Part::Body
    }
}

/// Every parameter tensor of `cfg`, in canonical order, without allocating.
pub fn param_specs(cfg: &VitConfig) -> Vec<ParamSpec> {
    let w = cfg.width;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize| {
        out.push(ParamSpec {
            role: role_of(&name),
            part: part_of(&name),
            name,
            shape,
            fan_in,
        });
    };
    push("embed.patch.kernel".into(), vec![cfg.patch_dim(), w], cfg.patch_dim());
    push("embed.patch.bias".into(), vec![w], 1);
    push("embed.pos.embedding".into(), vec![cfg.tokens(), w], w);
    for i in 0..cfg.depth {
        let p = format!("block{i}");
        push(format!("{p}.norm.gain"), vec![w], 1);
        if !cfg.parallel_block {
            push(format!("{p}.norm2.gain"), vec![w], 1);
        }
        push(format!("{p}.qkv.kernel"), vec![w, 3 * w], w);
        if cfg.qk_norm {
            push(format!("{p}.q_norm.gain"), vec![cfg.num_heads, cfg.head_dim()], 1);
            push(format!("{p}.k_norm.gain"), vec![cfg.num_heads, cfg.head_dim()], 1);
        }
        push(format!("{p}.attn_out.kernel"), vec![w, w], w);
        push(format!("{p}.mlp_in.kernel"), vec![w, cfg.mlp_dim], w);
        push(format!("{p}.mlp_in.bias"), vec![cfg.mlp_dim], 1);
        push(format!("{p}.mlp_out.kernel"), vec![cfg.mlp_dim, w], cfg.mlp_dim);
        push(format!("{p}.out.bias"), vec![w], 1);
    }
    push("head.probe.embedding".into(), vec![1, w], w);
    push("head.query.kernel".into(), vec![w, w], w);
    push("head.key.kernel".into(), vec![w, w], w);
    push("head.value.kernel".into(), vec![w, w], w);
    push("head.attn_out.kernel".into(), vec![w, w], w);
    push("head.norm.gain".into(), vec![w], 1);
    push("head.mlp_in.kernel".into(), vec![w, cfg.mlp_dim], w);
    push("head.mlp_in.bias".into(), vec![cfg.mlp_dim], 1);
    push("head.mlp_out.kernel".into(), vec![cfg.mlp_dim, w], cfg.mlp_dim);
    push("head.mlp_out.bias".into(), vec![w], 1);
    push("head.final_norm.gain".into(), vec![w], 1);
    push("head.classifier.kernel".into(), vec![w, cfg.num_classes], w);
    push("head.classifier.bias".into(), vec![cfg.num_classes], 1);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    pub patch_kernel: Tensor,
    pub patch_bias: Tensor,
    pub pos_embed: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln_gain: Tensor,
    /// Second pre-norm; only the sequential block form has one.
    pub ln2_gain: Option<Tensor>,
    pub w_qkv: Tensor,
    /// Per-head query/key norm gains, `[heads, head_dim]`; present iff QK norm is on.
    pub q_gain: Option<Tensor>,
    pub k_gain: Option<Tensor>,
    pub w_attn_out: Tensor,
    pub w_mlp_in: Tensor,
    pub b_mlp_in: Tensor,
    pub w_mlp_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub probe: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub mlp_gain: Tensor,
    pub w_mlp_in: Tensor,
    pub b_mlp_in: Tensor,
    pub w_mlp_out: Tensor,
    pub b_mlp_out: Tensor,
    pub final_gain: Tensor,
    pub classifier: Tensor,
    pub classifier_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitParams {
    pub embed: EmbedParams,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
}

/// FNV-1a, used to key per-tensor init streams by name.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Initial value of one tensor: gains 1, biases 0, classifier kernel 0,
/// everything else truncated normal with std `1/sqrt(fan_in)`.
pub fn init_tensor(spec: &ParamSpec, rng: &Rng) -> Tensor {
    match spec.role {
        Role::Gain => Tensor::full(&spec.shape, 1.0),
        Role::Bias => Tensor::zeros(&spec.shape),
        Role::Weight if spec.name == "head.classifier.kernel" => Tensor::zeros(&spec.shape),
        Role::Weight => {
            let mut stream = rng.fork(name_key(&spec.name));
            Tensor::truncated_normal(&spec.shape, 1.0 / (spec.fan_in as f64).sqrt(), &mut stream)
        }
    }
}

impl VitParams {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.patch.kernel".into(), &self.embed.patch_kernel),
            ("embed.patch.bias".into(), &self.embed.patch_bias),
            ("embed.pos.embedding".into(), &self.embed.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            out.push((format!("{p}.norm.gain"), &b.ln_gain));
            if let Some(g) = &b.ln2_gain {
                out.push((format!("{p}.norm2.gain"), g));
            }
            out.push((format!("{p}.qkv.kernel"), &b.w_qkv));
            if let Some(g) = &b.q_gain {
                out.push((format!("{p}.q_norm.gain"), g));
            }
            if let Some(g) = &b.k_gain {
                out.push((format!("{p}.k_norm.gain"), g));
            }
            out.push((format!("{p}.attn_out.kernel"), &b.w_attn_out));
            out.push((format!("{p}.mlp_in.kernel"), &b.w_mlp_in));
            out.push((format!("{p}.mlp_in.bias"), &b.b_mlp_in));
            out.push((format!("{p}.mlp_out.kernel"), &b.w_mlp_out));
            out.push((format!("{p}.out.bias"), &b.b_out));
        }
        let h = &self.head;
        out.extend([
            ("head.probe.embedding".into(), &h.probe),
            ("head.query.kernel".into(), &h.w_q),
            ("head.key.kernel".into(), &h.w_k),
            ("head.value.kernel".into(), &h.w_v),
            ("head.attn_out.kernel".into(), &h.w_o),
            ("head.norm.gain".into(), &h.mlp_gain),
            ("head.mlp_in.kernel".into(), &h.w_mlp_in),
            ("head.mlp_in.bias".into(), &h.b_mlp_in),
            ("head.mlp_out.kernel".into(), &h.w_mlp_out),
            ("head.mlp_out.bias".into(), &h.b_mlp_out),
            ("head.final_norm.gain".into(), &h.final_gain),
            ("head.classifier.kernel".into(), &h.classifier),
            ("head.classifier.bias".into(), &h.classifier_bias),
        ]);
        out
    }

    /// Mutable counterpart of [`VitParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.patch.kernel".into(), &mut self.embed.patch_kernel),
            ("embed.patch.bias".into(), &mut self.embed.patch_bias),
            ("embed.pos.embedding".into(), &mut self.embed.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            out.push((format!("{p}.norm.gain"), &mut b.ln_gain));
            if let Some(g) = &mut b.ln2_gain {
                out.push((format!("{p}.norm2.gain"), g));
            }
            out.push((format!("{p}.qkv.kernel"), &mut b.w_qkv));
            if let Some(g) = &mut b.q_gain {
                out.push((format!("{p}.q_norm.gain"), g));
            }
            if let Some(g) = &mut b.k_gain {
                out.push((format!("{p}.k_norm.gain"), g));
            }
            out.push((format!("{p}.attn_out.kernel"), &mut b.w_attn_out));
            out.push((format!("{p}.mlp_in.kernel"), &mut b.w_mlp_in));
            out.push((format!("{p}.mlp_in.bias"), &mut b.b_mlp_in));
            out.push((format!("{p}.mlp_out.kernel"), &mut b.w_mlp_out));
            out.push((format!("{p}.out.bias"), &mut b.b_out));
        }
        let h = &mut self.head;
        out.extend([
            ("head.probe.embedding".into(), &mut h.probe),
            ("head.query.kernel".into(), &mut h.w_q),
            ("head.key.kernel".into(), &mut h.w_k),
            ("head.value.kernel".into(), &mut h.w_v),
            ("head.attn_out.kernel".into(), &mut h.w_o),
            ("head.norm.gain".into(), &mut h.mlp_gain),
            ("head.mlp_in.kernel".into(), &mut h.w_mlp_in),
            ("head.mlp_in.bias".into(), &mut h.b_mlp_in),
            ("head.mlp_out.kernel".into(), &mut h.w_mlp_out),
            ("head.mlp_out.bias".into(), &mut h.b_mlp_out),
            ("head.final_norm.gain".into(), &mut h.final_gain),
            ("head.classifier.kernel".into(), &mut h.classifier),
            ("head.classifier.bias".into(), &mut h.classifier_bias),
        ]);
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Builds a parameter set from `param_specs(cfg)` with `make` supplying
    /// each tensor.
    pub fn build(cfg: &VitConfig, mut make: impl FnMut(&ParamSpec) -> Tensor) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        let mut tensors = std::collections::HashMap::new();
        for s in &specs {
            let t = make(s);
            if t.shape() != s.shape.as_slice() {
                return Err(dim_err!("{} built with shape {:?}, expected {:?}", s.name, t.shape(), s.shape));
            }
            tensors.insert(s.name.clone(), t);
        }
        let mut take = |n: &str| tensors.remove(n).expect("name in param_specs");
        let embed = EmbedParams {
            patch_kernel: take("embed.patch.kernel"),
            patch_bias: take("embed.patch.bias"),
            pos_embed: take("embed.pos.embedding"),
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("block{i}");
            blocks.push(BlockParams {
                ln_gain: take(&format!("{p}.norm.gain")),
                ln2_gain: (!cfg.parallel_block).then(|| take(&format!("{p}.norm2.gain"))),
                w_qkv: take(&format!("{p}.qkv.kernel")),
                q_gain: cfg.qk_norm.then(|| take(&format!("{p}.q_norm.gain"))),
                k_gain: cfg.qk_norm.then(|| take(&format!("{p}.k_norm.gain"))),
                w_attn_out: take(&format!("{p}.attn_out.kernel")),
                w_mlp_in: take(&format!("{p}.mlp_in.kernel")),
                b_mlp_in: take(&format!("{p}.mlp_in.bias")),
                w_mlp_out: take(&format!("{p}.mlp_out.kernel")),
                b_out: take(&format!("{p}.out.bias")),
            });
        }
        let head = HeadParams {
            probe: take("head.probe.embedding"),
            w_q: take("head.query.kernel"),
            w_k: take("head.key.kernel"),
            w_v: take("head.value.kernel"),
            w_o: take("head.attn_out.kernel"),
            mlp_gain: take("head.norm.gain"),
            w_mlp_in: take("head.mlp_in.kernel"),
            b_mlp_in: take("head.mlp_in.bias"),
            w_mlp_out: take("head.mlp_out.kernel"),
            b_mlp_out: take("head.mlp_out.bias"),
            final_gain: take("head.final_norm.gain"),
            classifier: take("head.classifier.kernel"),
            classifier_bias: take("head.classifier.bias"),
        };
        Ok(VitParams { embed, blocks, head })
    }

    pub fn zeros(cfg: &VitConfig) -> Result<Self> {
        Self::build(cfg, |s| Tensor::zeros(&s.shape))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    /// Elementwise `self += c * other` over matching tensors.
    pub fn axpy(&mut self, c: f64, other: &VitParams) -> Result<()> {
        let others = other.named();
        let mine = self.named_mut();
        if mine.len() != others.len() {
            return Err(dim_err!("parameter sets differ in tensor count"));
        }
        for ((_, t), (_, o)) in mine.into_iter().zip(others) {
            t.axpy(c, o)?;
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sum_sq()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

impl BlockParams {
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        BlockParams {
            ln_gain: z(&self.ln_gain),
            ln2_gain: self.ln2_gain.as_ref().map(z),
            w_qkv: z(&self.w_qkv),
            q_gain: self.q_gain.as_ref().map(z),
            k_gain: self.k_gain.as_ref().map(z),
            w_attn_out: z(&self.w_attn_out),
            w_mlp_in: z(&self.w_mlp_in),
            b_mlp_in: z(&self.b_mlp_in),
            w_mlp_out: z(&self.w_mlp_out),
            b_out: z(&self.b_out),
        }
    }
}

/// Fresh parameters for `cfg`. Each tensor draws from its own stream keyed by
/// its name, so configs that differ only in optional tensors share the rest.
pub fn init_params(cfg: &VitConfig, rng: &Rng) -> Result<VitParams> {
    VitParams::build(cfg, |s| init_tensor(s, rng))
}

/// Exact number of scalars in the parameter set of `cfg`.
pub fn parameter_count(cfg: &VitConfig) -> u64 {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Parameter count split by where the tensors live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: u64,
    pub blocks: u64,
    pub pooling_head: u64,
    pub classifier: u64,
}

impl ParamBreakdown {
    pub fn of(cfg: &VitConfig) -> Self {
        let mut b = ParamBreakdown { embedding: 0, blocks: 0, pooling_head: 0, classifier: 0 };
        for s in param_specs(cfg) {
            let n = s.numel();
            if s.name.starts_with("embed.") {
                b.embedding += n;
            } else if s.name.starts_with("block") {
                b.blocks += n;
            } else if s.name.starts_with("head.classifier.") {
                b.classifier += n;
            } else {
                b.pooling_head += n;
            }
        }
        b
    }

    pub fn total(&self) -> u64 {
        self.embedding + self.blocks + self.pooling_head + self.classifier
    }

    /// Embedding plus encoder blocks: the weight-decay "body".
    pub fn body(&self) -> u64 {
        self.embedding + self.blocks
    }
}

//! Per-layer sharding plan and the forward-pass simulation built on it.

use std::fmt::Write as _;

use super::matrix::ShardMode;
use super::matvec::{choose_sharding, linear_comm_floats, round_durations, schedule_linear};
use super::store::{check_prefetch, layer_chunks_for, schedule_prefetch, ShardPolicy};
use crate::error::Result;
use crate::mesh::{mfu, MeshConfig, Timeline};
use crate::model::{flops_per_token, FlopMode, VitConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    /// 0 embedding, `1..=depth` blocks, `depth + 1` head.
    pub layer: usize,
    pub name: String,
    /// Which dense layers the linear fuses.
    pub fuses: &'static str,
    pub mode: ShardMode,
    pub m: usize,
    pub n: usize,
    /// Vectors the linear is applied to per example.
    pub tokens: usize,
    /// Floats each device sends for this linear over `tokens` vectors.
    pub comm_floats: u64,
    /// Predicted overlapped duration.
    pub makespan: f64,
}

fn linear(layer: usize, name: String, fuses: &'static str, m: usize, n: usize, tokens: usize, mesh: &MeshConfig) -> LayerPlan {
    let k = mesh.k;
    let mut mode = choose_sharding(m, n);
    let extent = if mode == ShardMode::Row { m } else { n };
    if extent % k != 0 || (mode == ShardMode::Column && m % k != 0) {
        log::warn!("{name}: extent {extent} not divisible by k = {k}; kept replicated");
        mode = ShardMode::Replicated;
    }
    let makespan = match mode {
        ShardMode::Replicated => mesh.compute_time(2.0 * (m * n * tokens) as f64),
        _ => {
            let (t_m, t_c) = round_durations(mode, m, n, tokens, mesh);
            crate::mesh::overlapped_closed_form(k, t_m, t_c)
        }
    };
    LayerPlan {
        layer,
        name,
        fuses,
        mode,
        m,
        n,
        tokens,
        comm_floats: linear_comm_floats(mode, m, n, k) * tokens as u64,
        makespan,
    }
}

/// Every linear of one forward over a single example of `tokens` patches,
/// with its mode from `choose_sharding`. Block linears are the fused
/// projections; a sequential block keeps its four linears separate.
pub fn sharding_plan(cfg: &VitConfig, mesh: &MeshConfig, tokens: usize) -> Result<Vec<LayerPlan>> {
    cfg.validate()?;
    mesh.validate()?;
    let (w, mlp) = (cfg.width, cfg.mlp_dim);
    let mut out = vec![linear(0, "embed.patch".into(), "patch", w, cfg.patch_dim(), tokens, mesh)];
    for b in 0..cfg.depth {
        let l = b + 1;
        if cfg.parallel_block {
            out.push(linear(l, format!("block{b}.in_proj"), "qkv+mlp_in", 3 * w + mlp, w, tokens, mesh));
            out.push(linear(l, format!("block{b}.out_proj"), "attn_out+mlp_out", w, w + mlp, tokens, mesh));
        } else {
            out.push(linear(l, format!("block{b}.qkv"), "qkv", 3 * w, w, tokens, mesh));
            out.push(linear(l, format!("block{b}.attn_out"), "attn_out", w, w, tokens, mesh));
            out.push(linear(l, format!("block{b}.mlp_in"), "mlp_in", mlp, w, tokens, mesh));
            out.push(linear(l, format!("block{b}.mlp_out"), "mlp_out", w, mlp, tokens, mesh));
        }
    }
    let h = cfg.depth + 1;
    for (name, fuses, m, n, s) in [
        ("head.query", "query", w, w, 1),
        ("head.key", "key", w, w, tokens),
        ("head.value", "value", w, w, tokens),
        ("head.attn_out", "attn_out", w, w, 1),
        ("head.mlp_in", "mlp_in", mlp, w, 1),
        ("head.mlp_out", "mlp_out", w, mlp, 1),
        ("head.classifier", "classifier", cfg.num_classes, w, 1),
    ] {
        out.push(linear(h, name.into(), fuses, m, n, s, mesh));
    }
    Ok(out)
}

pub fn plan_csv(plan: &[LayerPlan]) -> String {
    let mut s = String::from("layer,name,fuses,mode,m,n,tokens,comm_floats,makespan\n");
    for p in plan {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            p.layer,
            p.name,
            p.fuses,
            p.mode.as_str(),
            p.m,
            p.n,
            p.tokens,
            p.comm_floats,
            p.makespan
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub plan: Vec<LayerPlan>,
    pub timeline: Timeline,
    /// Model-axis floats sent per device for one example.
    pub model_comm_floats: u64,
    /// Data-axis parameter-gather floats sent per device.
    pub param_comm_floats: f64,
    pub overlapped_makespan: f64,
    pub non_overlapped_makespan: f64,
    /// Training throughput per device, taking a step as three forwards.
    pub tokens_per_sec_per_device: f64,
    pub mfu: f64,
}

/// Attention-core FLOPs per device for layer `l` (not part of any linear).
fn attention_flops(cfg: &VitConfig, l: usize, tokens: usize, k: usize) -> f64 {
    if l == 0 {
        0.0
    } else if l <= cfg.depth {
        4.0 * (tokens * tokens * cfg.width) as f64 / k as f64
    } else {
        4.0 * (tokens * cfg.width) as f64 / k as f64
    }
}

/// One example's forward over every data row of the mesh: each layer's
/// linears run back to back on the model rings (compute overlapped with the
/// ring transfers), with the attention core between them, while the next
/// layer's sharded weights are prefetched over the data rings.
pub fn simulate(cfg: &VitConfig, mesh: &MeshConfig, tokens: usize, policy: ShardPolicy) -> Result<SimulationReport> {
    let plan = sharding_plan(cfg, mesh, tokens)?;
    let layers = cfg.depth + 2;
    let attn: Vec<f64> = (0..layers).map(|l| mesh.compute_time(attention_flops(cfg, l, tokens, mesh.k))).collect();
    let mut layer_time = attn.clone();
    for p in &plan {
        layer_time[p.layer] += p.makespan;
    }
    let chunks = layer_chunks_for(cfg, mesh, policy);
    let mut tl = Timeline::new();
    let starts = schedule_prefetch(&chunks, &layer_time, mesh, &mut tl, false)?;
    for r in 0..mesh.t {
        let ring = mesh.model_ring(r);
        let mut at = starts.clone();
        for (i, p) in plan.iter().enumerate() {
            let l = p.layer;
            // Accumulated layer ends can land an ulp past the predicted start
            // of the next layer.
            if l > 0 && (i == 0 || plan[i - 1].layer != l) {
                at[l] = at[l].max(at[l - 1]);
            }
            let tag = format!("layer{l}:{}", p.name);
            // The attention core sits between a block's two projections and
            // after the head's key/value projections.
            let attn_here = (l >= 1 && l <= cfg.depth && (p.name.ends_with("out_proj") || p.name.ends_with("attn_out")))
                || p.name == "head.attn_out";
            if attn_here && attn[l] > 0.0 {
                for c in 0..mesh.k {
                    tl.compute(ring.member(c), at[l], at[l] + attn[l], attn[l] * mesh.device_flops, format!("layer{l}:attention"));
                }
                at[l] += attn[l];
            }
            at[l] = schedule_linear(p.mode, p.m, p.n, p.tokens, mesh, &ring, &mut tl, at[l], &tag);
        }
    }
    tl.validate()?;
    check_prefetch(&tl)?;
    let serial_linears: f64 = plan
        .iter()
        .map(|p| match p.mode {
            ShardMode::Replicated => p.makespan,
            _ => {
                let (t_m, t_c) = round_durations(p.mode, p.m, p.n, p.tokens, mesh);
                mesh.k as f64 * t_m + (mesh.k - 1) as f64 * t_c
            }
        })
        .sum();
    let gather_floats: f64 = chunks.iter().map(|c| (mesh.t - 1) as f64 * c).sum();
    let non_overlapped = serial_linears + attn.iter().sum::<f64>() + mesh.comm_time(gather_floats);
    let makespan = tl.makespan();
    let tps = tokens as f64 / (3.0 * makespan * mesh.k as f64);
    Ok(SimulationReport {
        model_comm_floats: plan.iter().map(|p| p.comm_floats).sum(),
        param_comm_floats: gather_floats,
        overlapped_makespan: makespan,
        non_overlapped_makespan: non_overlapped,
        tokens_per_sec_per_device: tps,
        mfu: mfu(cfg, tps, mesh.device_flops)?,
        plan,
        timeline: tl,
    })
}

/// Forward FLOPs of the linears for one example; used by reports.
pub fn linear_flops(cfg: &VitConfig, tokens: usize) -> f64 {
    flops_per_token(cfg, FlopMode::Forward) * tokens as f64
}

//! QK-norm on/off comparison across learning rates.

use super::task::SyntheticTask;
use super::train::{train_with_lr, RunStatus, Telemetry, TrainConfig};
use crate::error::Result;
use crate::model::{init_params, VitConfig, VitParams};
use crate::rng::Rng;

/// Multiplies the query and key columns of every block's QKV kernel by
/// `factor`. Without QK norm the logits grow by `factor²`; with it they
/// do not move.
pub fn prescale_qk(params: &mut VitParams, factor: f64) {
    for b in &mut params.blocks {
        let cols = b.w_qkv.cols();
        let qk = 2 * cols / 3;
        for r in 0..b.w_qkv.rows() {
            for v in &mut b.w_qkv.row_mut(r)[..qk] {
                *v *= factor;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub qk_norm: bool,
    pub lr: f64,
    pub status: RunStatus,
    pub final_loss: f64,
    /// Largest attention logit seen over the run.
    pub max_abs_logit: f64,
    /// Largest logit bound over the run; `None` without QK norm.
    pub logit_bound: Option<f64>,
    /// True if every step respected the bound (always true without QK norm).
    pub bound_held: bool,
    pub telemetry: Telemetry,
}

/// Trains each learning rate with and without QK norm from the same seed
/// and constant learning rate. Both arms draw identical initial weights for
/// every shared tensor.
pub fn ablate_qk_norm(
    base: &VitConfig,
    task: &SyntheticTask,
    tcfg: &TrainConfig,
    lrs: &[f64],
    steps: usize,
    prescale: f64,
) -> Result<Vec<AblationArm>> {
    let mut out = Vec::with_capacity(2 * lrs.len());
    for &lr in lrs {
        for qk_norm in [true, false] {
            let cfg = VitConfig { qk_norm, ..base.clone() };
            let mut params = init_params(&cfg, &Rng::new(tcfg.seed))?;
            prescale_qk(&mut params, prescale);
            let o = train_with_lr(params, &cfg, task, tcfg, steps, |_| Ok(lr))?;
            let recs = o.telemetry.records().to_vec();
            out.push(AblationArm {
                qk_norm,
                lr,
                status: o.status,
                final_loss: recs.last().map_or(f64::NAN, |r| r.loss),
                max_abs_logit: recs.iter().fold(0.0, |m, r| m.max(r.max_abs_logit)),
                logit_bound: recs.iter().filter_map(|r| r.logit_bound).reduce(f64::max),
                bound_held: recs.iter().all(|r| r.bound_holds),
                telemetry: o.telemetry,
            });
        }
    }
    Ok(out)
}

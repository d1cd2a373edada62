//! SGD training loop with decoupled weight decay and attention telemetry.

use std::fmt::Write as _;

use super::schedule::Schedule;
use super::task::SyntheticTask;
use crate::error::{Error, Result};
use crate::model::params::{part_of, role_of, Part, Role};
use crate::model::{loss_and_grads, BlockRunner, Replicated, VitConfig, VitParams};
use crate::shard::ShardedRunner;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Replicated,
    /// Encoder blocks run on a model ring of `k` devices.
    Sharded(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub seed: u64,
    /// Decay rate for head weights.
    pub wd_head: f64,
    /// Decay rate for body weights.
    pub wd_body: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch: 8, seed: 0, wd_head: 3.0, wd_body: 0.03, execution: Execution::Replicated }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        for (name, v) in [("wd_head", self.wd_head), ("wd_body", self.wd_body)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.execution == Execution::Sharded(0) {
            return Err(Error::Config("sharded execution needs k >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub max_abs_logit: f64,
    pub min_entropy: f64,
    pub grad_norm: f64,
    pub logit_bound: Option<f64>,
    pub bound_holds: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Telemetry {
    records: Vec<StepRecord>,
}

pub const TELEMETRY_HEADER: &str = "step,loss,lr,max_abs_logit,min_entropy,grad_norm";

impl Telemetry {
    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::State(format!("telemetry step {} after {}", r.step, last.step)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TELEMETRY_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.loss, r.lr, r.max_abs_logit, r.min_entropy, r.grad_norm);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: VitParams,
    pub telemetry: Telemetry,
    pub status: RunStatus,
}

/// Names of decayed head weights, decayed body weights, and undecayed
/// gains and biases.
pub fn weight_decay_groups(params: &VitParams) -> (Vec<String>, Vec<String>, Vec<String>) {
    let (mut head, mut body, mut none) = (Vec::new(), Vec::new(), Vec::new());
    for (name, _) in params.named() {
        match (role_of(&name), part_of(&name)) {
            (Role::Weight, Part::Head) => head.push(name),
            (Role::Weight, Part::Body) => body.push(name),
            _ => none.push(name),
        }
    }
    (head, body, none)
}

/// `p ← p − lr·g − lr·wd·p`, with `wd` zero for gains and biases.
pub fn sgd_update(params: &mut VitParams, grads: &VitParams, lr: f64, tcfg: &TrainConfig) -> Result<()> {
    let g = grads.named();
    let p = params.named_mut();
    if g.len() != p.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", g.len(), p.len())));
    }
    for ((name, t), (gname, gt)) in p.into_iter().zip(g) {
        if name != gname || t.shape() != gt.shape() {
            return Err(Error::Contract(format!("gradient {gname} does not match parameter {name}")));
        }
        let wd = match (role_of(&name), part_of(&name)) {
            (Role::Weight, Part::Head) => tcfg.wd_head,
            (Role::Weight, Part::Body) => tcfg.wd_body,
            _ => 0.0,
        };
        let decay = lr * wd;
        for (x, &d) in t.data_mut().iter_mut().zip(gt.data()) {
            *x -= lr * d + decay * *x;
        }
    }
    Ok(())
}

/// Runs `steps` updates with the learning rate from `schedule`.
pub fn train(
    params: VitParams,
    cfg: &VitConfig,
    task: &SyntheticTask,
    tcfg: &TrainConfig,
    schedule: &Schedule,
    steps: usize,
) -> Result<TrainOutcome> {
    if steps > schedule.total {
        return Err(Error::Config(format!("{steps} steps exceed schedule total {}", schedule.total)));
    }
    train_with_lr(params, cfg, task, tcfg, steps, |s| schedule.lr_at(s))
}

/// Runs `steps` updates with an arbitrary learning-rate function.
pub fn train_with_lr(
    params: VitParams,
    cfg: &VitConfig,
    task: &SyntheticTask,
    tcfg: &TrainConfig,
    steps: usize,
    lr_at: impl Fn(usize) -> Result<f64>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    cfg.validate()?;
    if task.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!(
            "task has {} classes, model {}",
            task.num_classes(),
            cfg.num_classes
        )));
    }
    match tcfg.execution {
        Execution::Replicated => run(params, cfg, task, tcfg, steps, &lr_at, &Replicated),
        Execution::Sharded(k) => run(params, cfg, task, tcfg, steps, &lr_at, &ShardedRunner::new(k)),
    }
}

fn run<R: BlockRunner>(
    mut params: VitParams,
    cfg: &VitConfig,
    task: &SyntheticTask,
    tcfg: &TrainConfig,
    steps: usize,
    lr_at: &impl Fn(usize) -> Result<f64>,
    runner: &R,
) -> Result<TrainOutcome> {
    let mut telemetry = Telemetry::default();
    for step in 0..steps {
        let lr = lr_at(step)?;
        let (images, labels) = task.batch(step, tcfg.batch)?;
        let (loss, grads, stats) = match loss_and_grads(&params, &images, &labels, cfg, runner) {
            Ok(v) => v,
            Err(Error::NonFinite(msg) | Error::Degenerate(msg)) => {
                log::warn!("step {step}: {msg}");
                return Ok(TrainOutcome { params, telemetry, status: RunStatus::Diverged { step } });
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grads.sum_sq().sqrt();
        telemetry.push(StepRecord {
            step,
            loss,
            lr,
            max_abs_logit: stats.max_abs_logit(),
            min_entropy: stats.min_entropy(),
            grad_norm,
            logit_bound: stats.logit_bound(),
            bound_holds: stats.bound_holds(),
        })?;
        if !loss.is_finite() || !grad_norm.is_finite() {
            log::warn!("step {step}: loss {loss}, gradient norm {grad_norm}");
            return Ok(TrainOutcome { params, telemetry, status: RunStatus::Diverged { step } });
        }
        sgd_update(&mut params, &grads, lr, tcfg)?;
        if !params.is_finite() {
            log::warn!("step {step}: parameters became non-finite");
            return Ok(TrainOutcome { params, telemetry, status: RunStatus::Diverged { step } });
        }
    }
    Ok(TrainOutcome { params, telemetry, status: RunStatus::Completed })
}

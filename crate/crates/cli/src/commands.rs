use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use meshvit::mesh::MeshConfig;
use meshvit::model::checkpoint::write_checkpoint;
use meshvit::model::config::REFERENCE_PARAMS_M;
use meshvit::model::{attention_flops_per_token, flops_per_token, init_params, FlopMode, ParamBreakdown, VitConfig};
use meshvit::shard::{plan_csv, simulate as run_simulation, ShardPolicy};
use meshvit::trainer::{
    ablate_qk_norm, train as run_training, Execution, RunStatus, Schedule, SyntheticTask, TrainConfig,
};
use meshvit::verify::{self, Fault, Scope, VerifyOptions};
use meshvit::{Error, Result, Rng};

use crate::settings::Settings;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

pub const INSPECT_DEFAULTS: &[(&str, &str)] = &[("preset", "vit_22b")];
pub const VERIFY_DEFAULTS: &[(&str, &str)] = &[("scope", "all"), ("seed", "0")];
pub const SIMULATE_DEFAULTS: &[(&str, &str)] = &[
    ("preset", "vit_22b"),
    ("t", "2"),
    ("k", "4"),
    ("link_bandwidth", "2.5e10"),
    ("device_flops", "2.75e14"),
    ("bytes_per_float", "2"),
    ("shard_threshold", "1048576"),
];
pub const TRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("preset", "tiny"),
    ("seed", "0"),
    ("steps", "100"),
    ("batch", "8"),
    ("lr", "0.1"),
    ("warmup", "10"),
    ("cooldown", "20"),
    ("wd_head", "3"),
    ("wd_body", "0.03"),
    ("execution", "replicated"),
    ("k", "2"),
    ("noise", "0.5"),
    ("ablate_qk", "false"),
    ("ablate_lrs", "0,0.01,0.1"),
    ("prescale", "100"),
];
pub const SCHEDULE_DEFAULTS: &[(&str, &str)] =
    &[("lr", "0.001"), ("warmup", "10000"), ("cooldown", "30000"), ("total", "177000"), ("stride", "1000")];

/// Model from `preset` plus any explicit dimension keys. Returns the preset
/// name when no dimension was overridden.
fn model_config(s: &Settings) -> Result<(VitConfig, Option<String>)> {
    let preset: String = s.require("preset")?;
    let mut cfg = if preset == "tiny" {
        VitConfig { num_classes: 2, ..VitConfig::tiny(32, 2, 64, 4) }
    } else {
        VitConfig::preset(&preset)?
    };
    let mut overridden = false;
    for (key, slot) in [
        ("width", &mut cfg.width),
        ("depth", &mut cfg.depth),
        ("mlp", &mut cfg.mlp_dim),
        ("heads", &mut cfg.num_heads),
        ("patch", &mut cfg.patch),
        ("image", &mut cfg.image),
        ("channels", &mut cfg.channels),
        ("classes", &mut cfg.num_classes),
    ] {
        if let Some(v) = s.get(key)? {
            *slot = v;
            overridden = true;
        }
    }
    for (key, slot) in [("qk_norm", &mut cfg.qk_norm), ("parallel_block", &mut cfg.parallel_block)] {
        if let Some(v) = s.get(key)? {
            *slot = v;
            overridden = true;
        }
    }
    cfg.validate()?;
    Ok((cfg, (!overridden).then_some(preset)))
}

fn out_dir(s: &Settings) -> Result<Option<PathBuf>> {
    match s.raw("out") {
        None => Ok(None),
        Some(p) => {
            let dir = PathBuf::from(p);
            fs::create_dir_all(&dir)?;
            Ok(Some(dir))
        }
    }
}

fn emit(dir: &Option<PathBuf>, file: &str, text: &str) -> Result<()> {
    if let Some(d) = dir {
        fs::write(d.join(file), text)?;
    }
    Ok(())
}

pub fn inspect(s: &Settings) -> Result<u8> {
    let (cfg, preset) = model_config(s)?;
    let b = ParamBreakdown::of(&cfg);
    let (w, mlp) = (cfg.width, cfg.mlp_dim);
    let mut r = String::new();
    let _ = writeln!(r, "model = {}", preset.as_deref().unwrap_or("custom"));
    let _ = writeln!(
        r,
        "dims = width {} depth {} mlp {} heads {} patch {} image {} classes {}",
        w, cfg.depth, mlp, cfg.num_heads, cfg.patch, cfg.image, cfg.num_classes
    );
    let _ = writeln!(r, "params = {}", b.total());
    let _ = writeln!(r, "params_m = {:.1}", b.total() as f64 / 1e6);
    let _ = writeln!(r, "params_embedding = {}", b.embedding);
    let _ = writeln!(r, "params_blocks = {}", b.blocks);
    let _ = writeln!(r, "params_pooling_head = {}", b.pooling_head);
    let _ = writeln!(r, "params_classifier = {}", b.classifier);
    let _ = writeln!(r, "flops_per_token_forward = {}", flops_per_token(&cfg, FlopMode::Forward));
    let _ = writeln!(r, "flops_per_token_train = {}", flops_per_token(&cfg, FlopMode::Train));
    let _ = writeln!(r, "attention_flops_per_token_forward = {}", attention_flops_per_token(&cfg, FlopMode::Forward));
    if cfg.parallel_block {
        let _ = writeln!(r, "fused_in_proj = {}x{}", w, 3 * w + mlp);
        let _ = writeln!(r, "fused_out_proj = {}x{}", w + mlp, w);
    }
    if let Some((_, reference)) = preset.as_ref().and_then(|p| REFERENCE_PARAMS_M.iter().find(|(n, _)| n == p)) {
        let delta = 100.0 * (b.total() as f64 / 1e6 - reference) / reference;
        let verdict = if delta.abs() <= 2.0 { "PASS" } else { "FAIL" };
        let _ = writeln!(r, "reference_params_m = {reference}");
        let _ = writeln!(r, "delta_pct = {delta:+.2}");
        let _ = writeln!(r, "reference_check = {verdict} (tolerance 2%)");
    }
    print!("{r}");
    emit(&out_dir(s)?, "inspect.txt", &r)?;
    Ok(EXIT_OK)
}

pub fn verify(s: &Settings, fault: &str) -> Result<u8> {
    let opts = VerifyOptions {
        scope: s.require::<String>("scope")?.parse::<Scope>()?,
        seed: s.require("seed")?,
        fault: fault.parse::<Fault>()?,
        threads: VerifyOptions::threads_from_env(),
    };
    let report = verify::run(&opts)?;
    let csv = report.to_csv();
    print!("{csv}");
    emit(&out_dir(s)?, "verify.csv", &csv)?;
    for f in report.failures() {
        eprintln!("FAIL {}.{}: {}", f.scope.as_str(), f.name, f.failure.as_deref().unwrap_or(""));
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFY })
}

pub fn simulate(s: &Settings) -> Result<u8> {
    let (cfg, preset) = model_config(s)?;
    let mesh = MeshConfig {
        t: s.require("t")?,
        k: s.require("k")?,
        bytes_per_float: s.require("bytes_per_float")?,
        link_bandwidth: s.require("link_bandwidth")?,
        device_flops: s.require("device_flops")?,
    };
    mesh.validate()?;
    let tokens = s.get("tokens")?.unwrap_or(cfg.tokens());
    if tokens == 0 {
        return Err(Error::Config("tokens must be positive".into()));
    }
    let policy = ShardPolicy { threshold: s.require("shard_threshold")? };
    let rep = run_simulation(&cfg, &mesh, tokens, policy)?;
    let mut summary = String::new();
    let _ = writeln!(summary, "model = {}", preset.as_deref().unwrap_or("custom"));
    let _ = writeln!(summary, "mesh = {}x{}", mesh.t, mesh.k);
    let _ = writeln!(summary, "tokens = {tokens}");
    let _ = writeln!(summary, "linears = {}", rep.plan.len());
    let _ = writeln!(summary, "model_comm_floats_per_device = {}", rep.model_comm_floats);
    let _ = writeln!(summary, "model_comm_bytes_per_device = {}", rep.model_comm_floats * mesh.bytes_per_float as u64);
    let _ = writeln!(summary, "param_comm_floats_per_device = {}", rep.param_comm_floats);
    let _ = writeln!(summary, "overlapped_makespan = {}", rep.overlapped_makespan);
    let _ = writeln!(summary, "non_overlapped_makespan = {}", rep.non_overlapped_makespan);
    let _ = writeln!(summary, "tokens_per_sec_per_device = {}", rep.tokens_per_sec_per_device);
    let _ = writeln!(summary, "mfu = {}", rep.mfu);
    print!("{summary}");
    let dir = out_dir(s)?;
    emit(&dir, "summary.txt", &summary)?;
    emit(&dir, "plan.csv", &plan_csv(&rep.plan))?;
    emit(&dir, "timeline.csv", &rep.timeline.to_csv())?;
    Ok(EXIT_OK)
}

fn schedule_from(s: &Settings, steps: usize) -> Result<Schedule> {
    let warmup: usize = s.require("warmup")?;
    let cooldown: usize = s.require("cooldown")?;
    let total = s.get("total")?.unwrap_or(steps.max(warmup + cooldown));
    Schedule::new(s.require("lr")?, warmup, cooldown, total)
}

pub fn train(s: &Settings) -> Result<u8> {
    let (cfg, _) = model_config(s)?;
    let steps: usize = s.require("steps")?;
    let seed: u64 = s.require("seed")?;
    let execution = match s.require::<String>("execution")?.as_str() {
        "replicated" => Execution::Replicated,
        "sharded" => Execution::Sharded(s.require("k")?),
        other => return Err(Error::Config(format!("unknown execution `{other}`"))),
    };
    let tcfg = TrainConfig {
        batch: s.require("batch")?,
        seed,
        wd_head: s.require("wd_head")?,
        wd_body: s.require("wd_body")?,
        execution,
    };
    tcfg.validate()?;
    let schedule = schedule_from(s, steps)?;
    let task = SyntheticTask::new(&cfg, seed, s.require("noise")?)?;
    let dir = out_dir(s)?;
    if s.require::<bool>("ablate_qk")? {
        return ablation(s, &cfg, &task, &tcfg, steps, &dir);
    }
    let params = init_params(&cfg, &Rng::new(seed))?;
    let out = run_training(params, &cfg, &task, &tcfg, &schedule, steps)?;
    let csv = out.telemetry.to_csv();
    let (status, code) = match out.status {
        RunStatus::Completed => ("completed".to_string(), EXIT_OK),
        RunStatus::Diverged { step } => (format!("diverged at step {step}"), EXIT_DIVERGED),
    };
    let mut manifest = s.echo();
    let _ = writeln!(manifest, "status = {status}");
    let _ = writeln!(manifest, "steps_recorded = {}", out.telemetry.len());
    if let Some(r) = out.telemetry.records().last() {
        let _ = writeln!(manifest, "final_loss = {}", r.loss);
    }
    let bound_held = out.telemetry.records().iter().all(|r| r.bound_holds);
    let _ = writeln!(manifest, "logit_bound_held = {bound_held}");
    match &dir {
        Some(d) => {
            fs::write(d.join("telemetry.csv"), &csv)?;
            fs::write(d.join("manifest.txt"), &manifest)?;
            write_checkpoint(&out.params, &cfg, &d.join("checkpoint"))?;
            print!("{manifest}");
        }
        None => print!("{csv}"),
    }
    if code == EXIT_DIVERGED {
        eprintln!("training {status}");
    }
    Ok(code)
}

fn ablation(
    s: &Settings,
    cfg: &VitConfig,
    task: &SyntheticTask,
    tcfg: &TrainConfig,
    steps: usize,
    dir: &Option<PathBuf>,
) -> Result<u8> {
    let lrs = s.list_f64("ablate_lrs")?;
    let arms = ablate_qk_norm(cfg, task, tcfg, &lrs, steps, s.require("prescale")?)?;
    let mut csv = String::from("lr,qk_norm,status,final_loss,max_abs_logit,logit_bound,bound_held\n");
    let mut report = String::new();
    let mut ok = true;
    for pair in arms.chunks(2) {
        let (on, off) = (&pair[0], &pair[1]);
        for a in pair {
            let status = match a.status {
                RunStatus::Completed => "completed".to_string(),
                RunStatus::Diverged { step } => format!("diverged@{step}"),
            };
            let bound = a.logit_bound.map_or("none".to_string(), |b| b.to_string());
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                a.lr, a.qk_norm, status, a.final_loss, a.max_abs_logit, bound, a.bound_held
            );
            let arm = if a.qk_norm { "on" } else { "off" };
            emit(dir, &format!("ablation_lr{}_{arm}.csv", a.lr), &a.telemetry.to_csv())?;
        }
        ok &= on.bound_held;
        let bound = on.logit_bound.unwrap_or(f64::NAN);
        let _ = writeln!(
            report,
            "lr {}: on-arm bound {} (max logit {} <= {}); off-arm max logit {} {} the on-arm bound",
            on.lr,
            if on.bound_held { "PASS" } else { "FAIL" },
            on.max_abs_logit,
            bound,
            off.max_abs_logit,
            if off.max_abs_logit > bound { "exceeds" } else { "stays within" }
        );
    }
    print!("{report}");
    emit(dir, "ablation.csv", &csv)?;
    emit(dir, "ablation.txt", &report)?;
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
}

pub fn schedule(s: &Settings) -> Result<u8> {
    let sched = schedule_from(s, 0)?;
    let stride: usize = s.require("stride")?;
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut csv = String::with_capacity(32 * (sched.total / stride + 2));
    csv.push_str("step,lr\n");
    let mut step = 0;
    while step <= sched.total {
        let _ = writeln!(csv, "{step},{}", sched.lr_at(step)?);
        step += stride;
    }
    if sched.total % stride != 0 {
        let _ = writeln!(csv, "{},{}", sched.total, sched.lr_at(sched.total)?);
    }
    match out_dir(s)? {
        Some(d) => fs::write(d.join("schedule.csv"), &csv)?,
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

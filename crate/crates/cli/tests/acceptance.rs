//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use meshvit::gradcheck::{numeric_grad, rel_err, weighted_sum, FD_STEP};
use meshvit::mesh::{mfu, non_overlapped_makespan, overlapped_closed_form, schedule_overlapped, MeshConfig};
use meshvit::model::attention::{attend, attend_backward};
use meshvit::model::head::{map_head_backward, map_head_forward};
use meshvit::model::{
    batch_loss, block_backward, block_forward, fused_forward, init_params, loss_and_grads, parallel_block,
    param_specs, parameter_count, qk_attention, qk_logit_bound, sigmoid_xent, sigmoid_xent_backward, BlockParams,
    Replicated, VitConfig, VitParams,
};
use meshvit::shard::block::{block_comm_formula, ShardedBlock};
use meshvit::shard::{
    choose_sharding, linear_comm_floats, sharded_block_forward, sharded_matvec, ShardMode, ShardedMatrix,
    ShardedVector, VectorSpace,
};
use meshvit::tensor::*;
use meshvit::trainer::{ablate_qk_norm, train, Execution, RunStatus, Schedule, SyntheticTask, TrainConfig};
use meshvit::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.data().iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dense(a: &Tensor, x: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let b = x.shape()[1];
    let mut out = vec![0.0; m * b];
    for i in 0..m {
        for j in 0..b {
            out[i * b + j] = (0..n).map(|l| a.data()[i * n + l] * x.data()[l * b + j]).sum();
        }
    }
    Tensor::new(&[m, b], out).unwrap()
}

fn random_block(cfg: &VitConfig, seed: u64) -> BlockParams {
    let mut rng = Rng::new(seed);
    let mut b = init_params(cfg, &rng.fork(1)).unwrap().blocks.remove(0);
    for t in [b.q_gain.as_mut(), b.k_gain.as_mut()].into_iter().flatten() {
        *t = Tensor::from_fn(t.shape(), |_| rng.uniform_range(-2.0, 2.0));
    }
    b.ln_gain = Tensor::from_fn(b.ln_gain.shape(), |_| rng.uniform_range(0.5, 1.5));
    b.b_mlp_in = Tensor::randn(b.b_mlp_in.shape(), 0.1, &mut rng);
    b.b_out = Tensor::randn(b.b_out.shape(), 0.1, &mut rng);
    b
}

fn c1_param_counts() -> Outcome {
    let cases = [("vit_g", VitConfig::vit_g(), 1843.0), ("vit_e", VitConfig::vit_e(), 3926.0), ("vit_22b", VitConfig::vit_22b(), 21743.0)];
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, cfg, reference) in cases {
        let m = parameter_count(&cfg) as f64 / 1e6;
        let delta = (m - reference) / reference;
        ok &= delta.abs() <= 0.02;
        detail.push(format!("{name} {m:.1}M vs {reference}M ({:+.2}%)", 100.0 * delta));
    }
    let detail = detail.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c2_mfu() -> Outcome {
    let v = mfu(&VitConfig::vit_22b(), 1150.0, 2.75e14).map_err(|e| e.to_string())?;
    ensure!((0.534..=0.564).contains(&v), "mfu {v:.4} outside [0.534, 0.564]");
    Ok(format!("mfu {v:.4}"))
}

fn c3_sharded_equivalence() -> Outcome {
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for k in [1, 2, 4, 8] {
        let mesh = MeshConfig::new(1, k);
        for mode in [ShardMode::Row, ShardMode::Column] {
            for case in 0..200 {
                let m = k * (1 + rng.below(6) as usize);
                let n = k * (1 + rng.below(6) as usize);
                let b = 1 + rng.below(3) as usize;
                let a = Tensor::randn(&[m, n], 1.0, &mut rng);
                let x = Tensor::randn(&[n, b], 1.0, &mut rng);
                let sa = ShardedMatrix::shard(&a, mode, k).map_err(|e| e.to_string())?;
                let sx = ShardedVector::split(&x, k, VectorSpace::Input).map_err(|e| e.to_string())?;
                let (y, _) = sharded_matvec(&sa, &sx, &mesh).map_err(|e| e.to_string())?;
                let e = rel(&y.concat().unwrap(), &dense(&a, &x));
                worst = worst.max(e);
                ensure!(e <= 1e-12, "k={k} {mode:?} case {case}: rel err {e:e}");
            }
        }
    }
    let mut worst_block: f64 = 0.0;
    for k in [1, 2, 4, 8] {
        for case in 0..12 {
            let heads = k * (1 + rng.below(2) as usize);
            let width = heads * (2 + 2 * rng.below(3) as usize);
            let mlp = k * (2 + rng.below(8) as usize);
            let cfg = VitConfig { qk_norm: rng.below(2) == 0, ..VitConfig::tiny(width, 1, mlp, heads) };
            let bp = random_block(&cfg, rng.next_u64());
            let x = Tensor::randn(&[cfg.tokens(), width], 1.0, &mut rng);
            let want = fused_forward(&x, &bp, &cfg).map_err(|e| e.to_string())?;
            let blk = ShardedBlock::new(&bp, &cfg, k).map_err(|e| e.to_string())?;
            let xs = ShardedVector::split(&transpose(&x).unwrap(), k, VectorSpace::Input).unwrap();
            let (y, _) = sharded_block_forward(&xs, &blk, &MeshConfig::new(1, k)).map_err(|e| e.to_string())?;
            let e = rel(&transpose(&y.concat().unwrap()).unwrap(), &want);
            worst_block = worst_block.max(e);
            ensure!(e <= 1e-9, "block k={k} case {case}: rel err {e:e}");
        }
    }
    Ok(format!("1600 matvec cases max rel err {worst:.1e}, 48 blocks max {worst_block:.1e}"))
}

fn c4_volumes() -> Outcome {
    let mut checked = 0;
    for k in [1, 2, 3, 4, 8] {
        let mesh = MeshConfig::new(1, k);
        for km in 1..6 {
            for kn in 1..6 {
                let (m, n) = (km * k, kn * k);
                let a = Tensor::from_fn(&[m, n], |i| i as f64);
                let x = Tensor::from_fn(&[n, 1], |i| 1.0 + i as f64);
                let sx = ShardedVector::split(&x, k, VectorSpace::Input).unwrap();
                for (mode, want) in [(ShardMode::Row, (k - 1) * (n / k)), (ShardMode::Column, (k - 1) * (m / k))] {
                    let sa = ShardedMatrix::shard(&a, mode, k).unwrap();
                    let (_, rep) = sharded_matvec(&sa, &sx, &mesh).map_err(|e| e.to_string())?;
                    ensure!(
                        rep.per_device_comm_floats == want as u64,
                        "k={k} {m}x{n} {mode:?}: {} floats, expected {want}",
                        rep.per_device_comm_floats
                    );
                    ensure!(linear_comm_floats(mode, m, n, k) == want as u64, "formula mismatch {m}x{n} k={k}");
                    checked += 1;
                }
                ensure!((choose_sharding(m, n) == ShardMode::Column) == (m < n), "chooser wrong for {m}x{n}");
            }
        }
    }
    for k in [2, 4] {
        let cfg = VitConfig::tiny(16, 1, 32, 4);
        let blk = ShardedBlock::new(&random_block(&cfg, k as u64), &cfg, k).unwrap();
        let x = Tensor::randn(&[cfg.tokens(), 16], 1.0, &mut Rng::new(k as u64));
        let xs = ShardedVector::split(&transpose(&x).unwrap(), k, VectorSpace::Input).unwrap();
        let (_, rep) = sharded_block_forward(&xs, &blk, &MeshConfig::new(1, k)).map_err(|e| e.to_string())?;
        ensure!(rep.linear_comm_floats == block_comm_formula(16, 32, k, cfg.tokens()), "block volume k={k}");
    }
    Ok(format!("{checked} matvec volumes exact, chooser exact"))
}

fn c5_overlap() -> Outcome {
    let mut rng = Rng::new(5);
    for case in 0..1000 {
        let k = 1 + rng.below(8) as usize;
        let zero_comm = rng.below(5) == 0;
        let uniform = rng.below(2) == 0;
        let (m0, c0) = (rng.uniform_range(0.01, 5.0), rng.uniform_range(0.01, 5.0));
        let compute: Vec<f64> = (0..k).map(|_| if uniform { m0 } else { rng.uniform_range(0.01, 5.0) }).collect();
        let comm: Vec<f64> = (1..k)
            .map(|_| if zero_comm { 0.0 } else if uniform { c0 } else { rng.uniform_range(0.01, 5.0) })
            .collect();
        let over = schedule_overlapped(&compute, &comm).map_err(|e| e.to_string())?;
        let serial = non_overlapped_makespan(&compute, &comm).map_err(|e| e.to_string())?;
        if uniform {
            let tc = if zero_comm { 0.0 } else { c0 };
            let closed = m0 + (k - 1) as f64 * tc.max(m0);
            ensure!((over - closed).abs() <= 1e-12 * closed, "case {case}: {over} vs closed form {closed}");
            ensure!(overlapped_closed_form(k, m0, tc) == closed || (overlapped_closed_form(k, m0, tc) - closed).abs() <= 1e-12 * closed, "closed form fn case {case}");
        }
        ensure!(over <= serial * (1.0 + 1e-12), "case {case}: overlapped {over} > serial {serial}");
        let equal = (serial - over).abs() <= 1e-12 * serial;
        ensure!(equal == (k == 1 || zero_comm), "case {case}: equality {equal} with k={k} zero_comm={zero_comm}");
    }
    Ok("1000 cases".into())
}

fn c6_qk_invariants() -> Outcome {
    // (a) scale invariance
    let cfg = VitConfig::tiny(16, 1, 32, 2);
    let b = random_block(&cfg, 10);
    let x = Tensor::randn(&[6, 16], 1.0, &mut Rng::new(11));
    let (base, _) = qk_attention(&x, &b, &cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for cols in [0..16, 16..32] {
        let mut s = b.clone();
        for r in 0..16 {
            for v in &mut s.w_qkv.row_mut(r)[cols.clone()] {
                *v *= 1000.0;
            }
        }
        let (out, _) = qk_attention(&x, &s, &cfg).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&out, &base);
        worst = worst.max(d);
        ensure!(d <= 1e-9, "x1000 on columns {cols:?} changed output by {d:e}");
    }
    // (b, c) bound and entropy floor on fuzzed forwards
    let mut rng = Rng::new(12);
    for case in 0..10_000 {
        let heads = 1 + rng.below(3) as usize;
        let hd = [1, 2, 4, 8][rng.below(4) as usize];
        let s = 1 + rng.below(6) as usize;
        let w = heads * hd;
        let sc = rng.uniform_range(0.01, 1e3);
        let q = Tensor::randn(&[s, w], sc, &mut rng);
        let k = Tensor::randn(&[s, w], sc, &mut rng);
        let v = Tensor::randn(&[s, w], 1.0, &mut rng);
        let qg = Tensor::from_fn(&[heads, hd], |_| rng.uniform_range(-4.0, 4.0));
        let kg = Tensor::from_fn(&[heads, hd], |_| rng.uniform_range(-4.0, 4.0));
        let (_, st, _) = attend(&q, &k, &v, heads, Some((&qg, &kg)), false).map_err(|e| e.to_string())?;
        let bound = qk_logit_bound(hd, &qg, &kg);
        ensure!(st.max_abs_logit <= bound * (1.0 + 1e-12), "fuzz case {case}: {} > {bound}", st.max_abs_logit);
        let floor = (s as f64).ln() - st.max_logit_range();
        ensure!(st.min_entropy() >= floor - 1e-9, "fuzz case {case}: entropy {} < {floor}", st.min_entropy());
    }
    // (b) during toy training
    let tcfg_cfg = VitConfig { num_classes: 2, ..VitConfig::tiny(32, 2, 64, 4) };
    let mut steps = 0;
    for (seed, lr) in [(1u64, 0.01), (2, 0.1), (3, 0.3)] {
        let task = SyntheticTask::two_class(&tcfg_cfg, seed, 0.5).map_err(|e| e.to_string())?;
        let tcfg = TrainConfig { batch: 4, seed, ..TrainConfig::default() };
        let sched = Schedule::new(lr, 5, 5, 30).unwrap();
        let p = init_params(&tcfg_cfg, &Rng::new(seed)).unwrap();
        let out = train(p, &tcfg_cfg, &task, &tcfg, &sched, 30).map_err(|e| e.to_string())?;
        for r in out.telemetry.records() {
            ensure!(r.bound_holds, "training seed {seed} step {}: logit {} above bound {:?}", r.step, r.max_abs_logit, r.logit_bound);
            steps += 1;
        }
    }
    // prescaled ablation: the unnormalized arm exceeds the normalized bound
    let task = SyntheticTask::two_class(&tcfg_cfg, 4, 0.5).unwrap();
    let tcfg = TrainConfig { batch: 2, seed: 4, ..TrainConfig::default() };
    let arms = ablate_qk_norm(&tcfg_cfg, &task, &tcfg, &[0.0, 0.01], 5, 100.0).map_err(|e| e.to_string())?;
    for pair in arms.chunks(2) {
        let (on, off) = (&pair[0], &pair[1]);
        ensure!(on.qk_norm && !off.qk_norm, "arm order");
        ensure!(on.bound_held, "on-arm bound failed at lr {}", on.lr);
        let bound = on.logit_bound.unwrap_or(f64::NAN);
        ensure!(off.max_abs_logit > bound, "off-arm {} did not exceed {bound} at lr {}", off.max_abs_logit, off.lr);
    }
    Ok(format!("x1000 max diff {worst:.1e}, 10000 fuzzed forwards, {steps} training steps, ablation exceedance reported"))
}

fn c7_fusion() -> Outcome {
    let mut rng = Rng::new(7);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let heads = 1 + rng.below(3) as usize;
        let hd = 1 + rng.below(4) as usize;
        let mlp = 1 + rng.below(24) as usize;
        let s = 1 + rng.below(5) as usize;
        let cfg = VitConfig { qk_norm: rng.below(2) == 0, ..VitConfig::tiny(heads * hd, 1, mlp, heads) };
        let b = random_block(&cfg, rng.next_u64());
        let x = Tensor::randn(&[s, cfg.width], 1.0, &mut rng);
        let f = fused_forward(&x, &b, &cfg).map_err(|e| e.to_string())?;
        let p = parallel_block(&x, &b, &cfg).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&f, &p) / p.max_abs().max(1.0);
        worst = worst.max(d);
        ensure!(d <= 1e-9, "case {case}: fused differs by {d:e}");
    }
    for qk in [false, true] {
        let cfg = VitConfig { qk_norm: qk, ..VitConfig::tiny(8, 1, 16, 2) };
        let mut b = random_block(&cfg, 6);
        let mut zero = vec![&mut b.w_attn_out, &mut b.w_mlp_out, &mut b.b_out];
        if !qk {
            zero.extend([&mut b.w_qkv, &mut b.w_mlp_in, &mut b.b_mlp_in]);
        }
        for t in zero {
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        ensure!(parallel_block(&x, &b, &cfg).unwrap() == x, "zero block not identity (qk_norm={qk})");
        ensure!(fused_forward(&x, &b, &cfg).unwrap() == x, "zero fused block not identity (qk_norm={qk})");
    }
    Ok(format!("200 configs max rel diff {worst:.1e}, zero blocks exact"))
}

fn random_params(cfg: &VitConfig, seed: u64) -> VitParams {
    let mut rng = Rng::new(seed);
    VitParams::build(cfg, |s| {
        let base = if s.name.ends_with(".gain") { 1.0 } else { 0.0 };
        let std = 0.5 / (s.fan_in as f64).sqrt().max(1.0) + 0.1;
        Tensor::from_fn(&s.shape, |_| base + std * rng.normal())
    })
    .unwrap()
}

struct Checker {
    worst_primitive: f64,
    worst_e2e: f64,
    count: usize,
}

impl Checker {
    fn check(&mut self, name: &str, a: &Tensor, n: &Tensor, e2e: bool) -> Result<(), String> {
        let e = rel_err(a, n);
        let tol = if e2e { 1e-4 } else { 1e-5 };
        if e2e {
            self.worst_e2e = self.worst_e2e.max(e);
        } else {
            self.worst_primitive = self.worst_primitive.max(e);
        }
        self.count += 1;
        ensure!(e <= tol, "{name}: rel err {e:e} > {tol:e}");
        Ok(())
    }
}

fn c8_gradients() -> Outcome {
    let s = |e: meshvit::Error| e.to_string();
    let mut c = Checker { worst_primitive: 0.0, worst_e2e: 0.0, count: 0 };
    let mut rng = Rng::new(8);
    let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let (da, db) = matmul_backward(&a, &b, &w).map_err(s)?;
    c.check("matmul da", &da, &numeric_grad(&a, FD_STEP, |a| Ok(weighted_sum(&matmul(a, &b)?, &w))).map_err(s)?, false)?;
    c.check("matmul db", &db, &numeric_grad(&b, FD_STEP, |b| Ok(weighted_sum(&matmul(&a, b)?, &w))).map_err(s)?, false)?;

    let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let g = Tensor::randn(&[6], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let (_, stats) = rms_norm_with_stats(&x, &g).map_err(s)?;
    let (dx, dg) = rms_norm_backward(&x, &g, &stats, &w).map_err(s)?;
    c.check("rms_norm dx", &dx, &numeric_grad(&x, FD_STEP, |x| Ok(weighted_sum(&rms_norm(x, &g)?, &w))).map_err(s)?, false)?;
    c.check("rms_norm dgain", &dg, &numeric_grad(&g, FD_STEP, |g| Ok(weighted_sum(&rms_norm(&x, g)?, &w))).map_err(s)?, false)?;

    let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let y = softmax(&x).map_err(s)?;
    c.check("softmax", &softmax_backward(&y, &w).map_err(s)?, &numeric_grad(&x, FD_STEP, |x| Ok(weighted_sum(&softmax(x)?, &w))).map_err(s)?, false)?;
    c.check("gelu", &gelu_backward(&x, &w).map_err(s)?, &numeric_grad(&x, FD_STEP, |x| Ok(weighted_sum(&gelu(x), &w))).map_err(s)?, false)?;
    c.check("scale", &scale_backward(&w, -2.5), &numeric_grad(&x, FD_STEP, |x| Ok(weighted_sum(&scale(x, -2.5), &w))).map_err(s)?, false)?;
    let wt = Tensor::randn(&[5, 3], 1.0, &mut rng);
    c.check("transpose", &transpose_backward(&wt).map_err(s)?, &numeric_grad(&x, FD_STEP, |x| Ok(weighted_sum(&transpose(x)?, &wt))).map_err(s)?, false)?;
    let idx = [2, 0, 2, 1];
    let wg = Tensor::randn(&[4, 5], 1.0, &mut rng);
    c.check("gather_rows", &gather_rows_backward(&wg, &idx, 3).map_err(s)?, &numeric_grad(&x, FD_STEP, |x| Ok(weighted_sum(&gather_rows(x, &idx)?, &wg))).map_err(s)?, false)?;

    let logits = Tensor::randn(&[3, 5], 2.0, &mut rng);
    let labels = Tensor::from_fn(&[3, 5], |_| rng.below(2) as f64);
    c.check("sigmoid_xent", &sigmoid_xent_backward(&logits, &labels).map_err(s)?, &numeric_grad(&logits, FD_STEP, |l| sigmoid_xent(l, &labels)).map_err(s)?, false)?;

    let (sq, skv, w, heads) = (3, 4, 8, 2);
    let q = Tensor::randn(&[sq, w], 1.0, &mut rng);
    let k = Tensor::randn(&[skv, w], 1.0, &mut rng);
    let v = Tensor::randn(&[skv, w], 1.0, &mut rng);
    let qg = Tensor::randn(&[heads, w / heads], 1.0, &mut rng);
    let kg = Tensor::randn(&[heads, w / heads], 1.0, &mut rng);
    let up = Tensor::randn(&[sq, w], 1.0, &mut rng);
    for gains in [None, Some((&qg, &kg))] {
        let (_, _, cache) = attend(&q, &k, &v, heads, gains, true).map_err(s)?;
        let gr = attend_backward(&up, &cache, gains).map_err(s)?;
        let f = |q: &Tensor, k: &Tensor, v: &Tensor, qg: &Tensor, kg: &Tensor| {
            let gains = gains.map(|_| (qg, kg));
            Ok(weighted_sum(&attend(q, k, v, heads, gains, false)?.0, &up))
        };
        c.check("attend dq", &gr.dq, &numeric_grad(&q, FD_STEP, |t| f(t, &k, &v, &qg, &kg)).map_err(s)?, false)?;
        c.check("attend dk", &gr.dk, &numeric_grad(&k, FD_STEP, |t| f(&q, t, &v, &qg, &kg)).map_err(s)?, false)?;
        c.check("attend dv", &gr.dv, &numeric_grad(&v, FD_STEP, |t| f(&q, &k, t, &qg, &kg)).map_err(s)?, false)?;
        if let (Some(dqg), Some(dkg)) = (gr.dq_gain.as_ref(), gr.dk_gain.as_ref()) {
            c.check("attend dq_gain", dqg, &numeric_grad(&qg, FD_STEP, |t| f(&q, &k, &v, t, &kg)).map_err(s)?, false)?;
            c.check("attend dk_gain", dkg, &numeric_grad(&kg, FD_STEP, |t| f(&q, &k, &v, &qg, t)).map_err(s)?, false)?;
        }
    }

    for parallel in [true, false] {
        let cfg = VitConfig { parallel_block: parallel, ..VitConfig::tiny(8, 1, 16, 2) };
        let params = random_params(&cfg, 7);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let up = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let (_, _, cache) = block_forward(&x, &params.blocks[0], &cfg, true).map_err(s)?;
        let (dx, grads) = block_backward(&up, &params.blocks[0], &cfg, &cache).map_err(s)?;
        let nx = numeric_grad(&x, FD_STEP, |x| Ok(weighted_sum(&block_forward(x, &params.blocks[0], &cfg, false)?.0, &up))).map_err(s)?;
        c.check("block dx", &dx, &nx, false)?;
        let mut gp = params.zeros_like();
        gp.blocks[0] = grads;
        for (name, t) in params.named().into_iter().filter(|(n, _)| n.starts_with("block0.")) {
            let n = numeric_grad(t, FD_STEP, |t| {
                let mut p = params.clone();
                *p.get_mut(&name).unwrap() = t.clone();
                Ok(weighted_sum(&block_forward(&x, &p.blocks[0], &cfg, false)?.0, &up))
            })
            .map_err(s)?;
            c.check(&name, gp.get(&name).unwrap(), &n, false)?;
        }
    }

    let cfg = VitConfig::tiny(8, 1, 16, 2);
    let params = random_params(&cfg, 9);
    let tokens = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let up = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let (_, _, cache) = map_head_forward(&tokens, &params.head, &cfg, true).map_err(s)?;
    let mut hg = params.zeros_like();
    let dtok = map_head_backward(&up, &params.head, &cache, &mut hg.head).map_err(s)?;
    let f = |p: &VitParams, t: &Tensor| Ok(weighted_sum(&map_head_forward(t, &p.head, &cfg, false)?.0, &up));
    c.check("head dtokens", &dtok, &numeric_grad(&tokens, FD_STEP, |t| f(&params, t)).map_err(s)?, false)?;
    for (name, t) in params.named() {
        if !name.starts_with("head.") || name.starts_with("head.classifier") {
            continue;
        }
        let n = numeric_grad(t, FD_STEP, |t| {
            let mut p = params.clone();
            *p.get_mut(&name).unwrap() = t.clone();
            f(&p, &tokens)
        })
        .map_err(s)?;
        c.check(&name, hg.get(&name).unwrap(), &n, false)?;
    }

    let cfg = VitConfig { num_classes: 5, ..VitConfig::tiny(16, 2, 32, 2) };
    let params = random_params(&cfg, 11);
    let images: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[8, 8, 3], 1.0, &mut rng)).collect();
    let labels = Tensor::from_fn(&[2, 5], |i| (i % 3 == 0) as u8 as f64);
    let (_, grads, _) = loss_and_grads(&params, &images, &labels, &cfg, &Replicated).map_err(s)?;
    for spec in param_specs(&cfg) {
        let t = params.get(&spec.name).unwrap();
        let n = numeric_grad(t, FD_STEP, |t| {
            let mut p = params.clone();
            *p.get_mut(&spec.name).unwrap() = t.clone();
            batch_loss(&p, &images, &labels, &cfg, &Replicated)
        })
        .map_err(s)?;
        c.check(&spec.name, grads.get(&spec.name).unwrap(), &n, true)?;
    }
    Ok(format!(
        "{} checks, primitives max {:.1e}, end-to-end max {:.1e}",
        c.count, c.worst_primitive, c.worst_e2e
    ))
}

fn c9_schedule() -> Outcome {
    let s = Schedule::new(1e-3, 10_000, 30_000, 177_000).map_err(|e| e.to_string())?;
    let at_peak = s.lr_at(10_000).map_err(|e| e.to_string())?;
    ensure!(at_peak == 1e-3, "lr_at(10000) = {at_peak}");
    let last = s.lr_at(177_000).map_err(|e| e.to_string())?;
    ensure!(last == 0.0, "lr_at(177000) = {last}");
    // Independent formulas for the phases at the joints.
    let warm = |t: f64| 1e-3 * t / 10_000.0;
    let main = |t: f64| 1e-3 * (10_000.0 / t).sqrt();
    let j1 = (warm(10_000.0) - main(10_000.0)).abs();
    let j1_impl = (s.warmup_value(10_000) - s.main_value(10_000)).abs();
    let j2_impl = (s.main_value(147_000) - s.cooldown_value(147_000)).abs();
    ensure!(j1 <= 1e-15 && j1_impl <= 1e-15, "warmup joint gap {j1_impl:e}");
    ensure!(j2_impl <= 1e-15, "cooldown joint gap {j2_impl:e}");
    ensure!((s.lr_at(147_000).unwrap() - main(147_000.0)).abs() <= 1e-15, "cooldown start value");
    Ok(format!("joint gaps {j1_impl:.1e}, {j2_impl:.1e}"))
}

fn c10_sharded_training() -> Outcome {
    let cfg = VitConfig { num_classes: 2, ..VitConfig::tiny(32, 2, 64, 4) };
    let task = SyntheticTask::two_class(&cfg, 21, 0.5).map_err(|e| e.to_string())?;
    let sched = Schedule::new(0.1, 10, 20, 100).unwrap();
    let p = init_params(&cfg, &Rng::new(21)).unwrap();
    let base = TrainConfig { batch: 2, seed: 21, ..TrainConfig::default() };
    let rep = train(p.clone(), &cfg, &task, &base, &sched, 100).map_err(|e| e.to_string())?;
    ensure!(rep.status == RunStatus::Completed && rep.telemetry.len() == 100, "replicated run incomplete");
    let mut worst: f64 = 0.0;
    for k in [1, 2, 4] {
        let tcfg = TrainConfig { execution: Execution::Sharded(k), ..base };
        let sh = train(p.clone(), &cfg, &task, &tcfg, &sched, 100).map_err(|e| e.to_string())?;
        ensure!(sh.telemetry.len() == 100, "k={k}: {} steps recorded", sh.telemetry.len());
        for (a, b) in rep.telemetry.records().iter().zip(sh.telemetry.records()) {
            let d = (a.loss - b.loss).abs();
            worst = worst.max(d);
            ensure!(d <= 1e-8, "k={k} step {}: {} vs {}", a.step, a.loss, b.loss);
        }
    }
    Ok(format!("max per-step loss diff {worst:.1e}"))
}

fn run_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_meshvit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(status.status.success(), "{args:?} exited with {}", status.status);
    Ok(())
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let commands: [&[&str]; 4] = [
        &["inspect", "--preset", "vit_22b"],
        &["simulate", "--preset", "vit_g", "--k", "4", "--t", "2"],
        &["train", "--steps", "30", "--seed", "7"],
        &["train", "--steps", "3", "--ablate-qk"],
    ];
    let mut files = 0;
    for (i, args) in commands.iter().enumerate() {
        let a = tmp.path().join(format!("{i}a"));
        let b = tmp.path().join(format!("{i}b"));
        run_cli(args, &a)?;
        run_cli(args, &b)?;
        let (ca, cb) = (dir_contents(&a), dir_contents(&b));
        ensure!(!ca.is_empty(), "{args:?} wrote no files");
        ensure!(ca.len() == cb.len(), "{args:?}: different file sets");
        for ((na, da), (nb, db)) in ca.iter().zip(&cb) {
            ensure!(na == nb && da == db, "{args:?}: {na} differs between runs");
        }
        files += ca.len();
    }
    Ok(format!("{files} files byte-identical across repeated runs"))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("parameter counts within 2%", Duration::from_secs(1), c1_param_counts),
        ("MFU bracket", Duration::from_secs(1), c2_mfu),
        ("sharded equivalence", Duration::from_secs(60), c3_sharded_equivalence),
        ("communication volumes", Duration::MAX, c4_volumes),
        ("overlap model", Duration::MAX, c5_overlap),
        ("QK-norm invariants", Duration::MAX, c6_qk_invariants),
        ("fusion equivalence", Duration::MAX, c7_fusion),
        ("gradient correctness", Duration::from_secs(120), c8_gradients),
        ("schedule", Duration::MAX, c9_schedule),
        ("sharded vs replicated training", Duration::from_secs(120), c10_sharded_training),
        ("determinism", Duration::MAX, c11_determinism),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > *limit => Err(format!("{d}; took {elapsed:.2?}, limit {limit:?}")),
            r => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {status} [{:.2?}] {name}: {detail}", i + 1, elapsed);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

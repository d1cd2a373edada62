//! Invariant suites runnable outside the test harness, with a
//! machine-readable report.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradcheck::{numeric_grad, rel_err, weighted_sum, FD_STEP};
use crate::mesh::{
    mfu, non_overlapped_makespan, overlapped_closed_form, ring_all_gather, ring_reduce_scatter, schedule_overlapped,
    MeshConfig, TPU_V4_PEAK_FLOPS,
};
use crate::model::{
    fused_forward, init_params, parallel_block, parameter_count, qk_attention, BlockParams, VitConfig,
};
use crate::rng::Rng;
use crate::shard::{
    choose_sharding, col_sharded_matvec, col_sharded_matvec_sign_flipped, linear_comm_floats, row_sharded_matvec,
    sharded_block_forward, ShardMode, ShardedBlock, ShardedMatrix, ShardedVector, VectorSpace,
};
use crate::tensor::{matmul, rms_norm, rms_norm_backward, rms_norm_with_stats, softmax, transpose, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Tensor,
    Model,
    Shard,
    Mesh,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Tensor => "tensor",
            Scope::Model => "model",
            Scope::Shard => "shard",
            Scope::Mesh => "mesh",
        }
    }

    fn includes(self, s: Scope) -> bool {
        self == Scope::All || self == s
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "tensor" => Ok(Scope::Tensor),
            "model" => Ok(Scope::Model),
            "shard" => Ok(Scope::Shard),
            "mesh" => Ok(Scope::Mesh),
            other => Err(Error::Config(format!("unknown verify scope `{other}`"))),
        }
    }
}

/// Deliberate defects used to show the suites catch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negates one device's partial products in the column-sharded matvec.
    ColSignFlip,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "col-sign-flip" => Ok(Fault::ColSignFlip),
            other => Err(Error::Config(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub scope: Scope,
    pub seed: u64,
    pub fault: Fault,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { scope: Scope::All, seed: 0, fault: Fault::None, threads: 0 }
    }
}

impl VerifyOptions {
    /// Thread cap from `MESHVIT_THREADS`, if set to a positive integer.
    pub fn threads_from_env() -> usize {
        std::env::var("MESHVIT_THREADS").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub scope: Scope,
    pub name: &'static str,
    pub cases: usize,
    /// `None` on success, otherwise the first counterexample.
    pub failure: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(PropertyResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    /// `scope,property,status,cases,detail`, one row per property.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,property,status,cases,detail\n");
        for r in &self.results {
            let detail = r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let status = if r.passed() { "pass" } else { "fail" };
            let _ = writeln!(s, "{},{},{},{},{}", r.scope.as_str(), r.name, status, r.cases, detail);
        }
        s
    }
}

struct Ctx {
    seed: u64,
    fault: Fault,
}

impl Ctx {
    fn rng(&self, name: &str) -> Rng {
        let h = name.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
        Rng::new(self.seed).fork(h)
    }
}

/// Cases run, or a description of the first failure.
type Check = fn(&Ctx) -> std::result::Result<usize, String>;

const PROPERTIES: &[(Scope, &str, Check)] = &[
    (Scope::Tensor, "matmul_matches_naive", tensor_matmul),
    (Scope::Tensor, "softmax_rows_sum_to_one", tensor_softmax),
    (Scope::Tensor, "rms_norm_unit_rms", tensor_rms_norm),
    (Scope::Tensor, "rms_norm_backward_fd", tensor_rms_norm_fd),
    (Scope::Model, "param_count_hand_sum", model_param_count),
    (Scope::Model, "qk_norm_scale_invariance", model_scale_invariance),
    (Scope::Model, "logit_bound_and_entropy_floor", model_logit_bound),
    (Scope::Model, "fused_equals_parallel_block", model_fusion),
    (Scope::Model, "zero_block_is_identity", model_zero_block),
    (Scope::Shard, "row_matvec_matches_dense", shard_row),
    (Scope::Shard, "col_matvec_matches_dense", shard_col),
    (Scope::Shard, "comm_volume_exact", shard_volume),
    (Scope::Shard, "choose_sharding_min_extent", shard_chooser),
    (Scope::Shard, "sharded_block_matches_fused", shard_block),
    (Scope::Mesh, "all_gather_concatenates", mesh_all_gather),
    (Scope::Mesh, "reduce_scatter_sums", mesh_reduce_scatter),
    (Scope::Mesh, "overlap_closed_form", mesh_overlap),
    (Scope::Mesh, "mfu_vit_22b_bracket", mesh_mfu),
];

/// Runs every property in `opts.scope`. Properties run in parallel; the
/// report lists them in a fixed order regardless of thread count.
pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let ctx = Ctx { seed: opts.seed, fault: opts.fault };
    let selected: Vec<_> = PROPERTIES.iter().filter(|(s, _, _)| opts.scope.includes(*s)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        selected
            .par_iter()
            .map(|(scope, name, check)| {
                let (cases, failure) = match check(&ctx) {
                    Ok(n) => (n, None),
                    Err(msg) => (0, Some(msg)),
                };
                PropertyResult { scope: *scope, name, cases, failure }
            })
            .collect()
    });
    Ok(VerifyReport { results })
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let p = b.cols();
    Tensor::from_fn(&[m, p], |idx| {
        let (i, j) = (idx / p, idx % p);
        (0..n).map(|l| a.at(i, l) * b.at(l, j)).sum()
    })
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.max_abs().max(1e-300);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn tensor_matmul(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("matmul");
    let cases = 50;
    for c in 0..cases {
        let (m, n, p) = (1 + rng.below(9) as usize, 1 + rng.below(9) as usize, 1 + rng.below(9) as usize);
        let a = Tensor::randn(&[m, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, p], 1.0, &mut rng);
        let got = matmul(&a, &b).map_err(fail)?;
        if got != naive(&a, &b) {
            return Err(format!("case {c}: {m}x{n}x{p} differs from triple loop"));
        }
    }
    Ok(cases)
}

fn tensor_softmax(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("softmax");
    let cases = 50;
    for c in 0..cases {
        let x = Tensor::randn(&[4, 1 + rng.below(16) as usize], 30.0, &mut rng);
        let y = softmax(&x).map_err(fail)?;
        for i in 0..y.rows() {
            let s: f64 = y.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-12 || y.row(i).iter().any(|&v| v < 0.0) {
                return Err(format!("case {c} row {i}: sum {s}"));
            }
        }
    }
    Ok(cases)
}

fn tensor_rms_norm(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("rms_norm");
    let cases = 50;
    for c in 0..cases {
        let w = 1 + rng.below(32) as usize;
        let x = Tensor::randn(&[3, w], 5.0, &mut rng);
        let y = rms_norm(&x, &Tensor::full(&[w], 1.0)).map_err(fail)?;
        for i in 0..3 {
            let r = (y.row(i).iter().map(|v| v * v).sum::<f64>() / w as f64).sqrt();
            if (r - 1.0).abs() > 1e-12 {
                return Err(format!("case {c} row {i}: rms {r}"));
            }
        }
    }
    Ok(cases)
}

fn tensor_rms_norm_fd(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("rms_norm_fd");
    let cases = 5;
    for c in 0..cases {
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let g = Tensor::randn(&[6], 1.0, &mut rng);
        let up = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let (_, stats) = rms_norm_with_stats(&x, &g).map_err(fail)?;
        let (dx, dg) = rms_norm_backward(&x, &g, &stats, &up).map_err(fail)?;
        let nx = numeric_grad(&x, FD_STEP, |x| Ok(weighted_sum(&rms_norm(x, &g)?, &up))).map_err(fail)?;
        let ng = numeric_grad(&g, FD_STEP, |g| Ok(weighted_sum(&rms_norm(&x, g)?, &up))).map_err(fail)?;
        let e = rel_err(&dx, &nx).max(rel_err(&dg, &ng));
        if e > 1e-5 {
            return Err(format!("case {c}: relative error {e:e}"));
        }
    }
    Ok(cases)
}

fn random_tiny(rng: &mut Rng) -> VitConfig {
    let heads = [1, 2, 4][rng.below(3) as usize];
    let hd = [2, 4, 8][rng.below(3) as usize];
    VitConfig::tiny(heads * hd, 1, 4 * heads * (1 + rng.below(4) as usize), heads)
}

/// Block with randomized gains so the bound is not the trivial all-ones case.
fn random_block(cfg: &VitConfig, rng: &mut Rng) -> std::result::Result<BlockParams, String> {
    let stream = rng.next_u64();
    let mut p = init_params(cfg, &rng.fork(stream)).map_err(fail)?;
    let mut b = p.blocks.remove(0);
    for g in [b.q_gain.as_mut(), b.k_gain.as_mut()].into_iter().flatten() {
        *g = Tensor::from_fn(g.shape(), |_| rng.uniform_range(-3.0, 3.0));
    }
    b.ln_gain = Tensor::from_fn(b.ln_gain.shape(), |_| rng.uniform_range(0.5, 2.0));
    Ok(b)
}

fn model_param_count(_: &Ctx) -> std::result::Result<usize, String> {
    let (w, d, mlp, heads) = (16usize, 1usize, 64usize, 2usize);
    let cfg = VitConfig::tiny(w, d, mlp, heads);
    let hd = w / heads;
    let (pd, s, c) = (cfg.patch_dim(), cfg.tokens(), cfg.num_classes);
    let embed = pd * w + w + s * w;
    let block = w + w * 3 * w + 2 * heads * hd + w * w + w * mlp + mlp + mlp * w + w;
    let head = w + 3 * w * w + w * w + w + w * mlp + mlp + mlp * w + w + w + w * c + c;
    let want = (embed + d * block + head) as u64;
    let got = parameter_count(&cfg);
    if got != want {
        return Err(format!("parameter_count {got}, hand sum {want}"));
    }
    Ok(1)
}

fn scale_qk_cols(b: &BlockParams, w: usize, which: usize, factor: f64) -> BlockParams {
    let mut s = b.clone();
    for r in 0..s.w_qkv.rows() {
        for v in &mut s.w_qkv.row_mut(r)[which * w..(which + 1) * w] {
            *v *= factor;
        }
    }
    s
}

fn model_scale_invariance(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("scale_invariance");
    let cases = 40;
    for c in 0..cases {
        let cfg = random_tiny(&mut rng);
        let b = random_block(&cfg, &mut rng)?;
        let x = Tensor::randn(&[1 + rng.below(6) as usize, cfg.width], 1.0, &mut rng);
        let (base, _) = qk_attention(&x, &b, &cfg).map_err(fail)?;
        for which in [0, 1] {
            let (scaled, _) = qk_attention(&x, &scale_qk_cols(&b, cfg.width, which, 1000.0), &cfg).map_err(fail)?;
            let d = scaled.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if d > 1e-9 {
                return Err(format!("case {c}: scaling {} changed outputs by {d:e}", ["Q", "K"][which]));
            }
        }
    }
    Ok(cases)
}

fn model_logit_bound(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("logit_bound");
    let cases = 2000;
    for c in 0..cases {
        let cfg = random_tiny(&mut rng);
        let b = random_block(&cfg, &mut rng)?;
        let s = 1 + rng.below(8) as usize;
        let x = Tensor::randn(&[s, cfg.width], rng.uniform_range(0.1, 100.0), &mut rng);
        let (_, st) = qk_attention(&x, &b, &cfg).map_err(fail)?;
        let (q, k) = (b.q_gain.as_ref(), b.k_gain.as_ref());
        let bound = crate::model::qk_logit_bound(cfg.head_dim(), q.ok_or("no q gain")?, k.ok_or("no k gain")?);
        if st.max_abs_logit > bound * (1.0 + 1e-12) {
            return Err(format!("case {c}: logit {} > bound {bound}", st.max_abs_logit));
        }
        let floor = (s as f64).ln() - st.max_logit_range();
        if st.min_entropy() < floor - 1e-9 {
            return Err(format!("case {c}: entropy {} < floor {floor}", st.min_entropy()));
        }
    }
    Ok(cases)
}

fn model_fusion(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("fusion");
    let cases = 40;
    for c in 0..cases {
        let mut cfg = random_tiny(&mut rng);
        cfg.qk_norm = rng.below(2) == 0;
        let b = random_block(&cfg, &mut rng)?;
        let x = Tensor::randn(&[1 + rng.below(6) as usize, cfg.width], 1.0, &mut rng);
        let a = fused_forward(&x, &b, &cfg).map_err(fail)?;
        let p = parallel_block(&x, &b, &cfg).map_err(fail)?;
        let d = max_rel(&a, &p);
        if d > 1e-9 {
            return Err(format!("case {c}: relative difference {d:e}"));
        }
    }
    Ok(cases)
}

fn model_zero_block(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("zero_block");
    let cases = 10;
    for c in 0..cases {
        let cfg = random_tiny(&mut rng);
        let mut b = random_block(&cfg, &mut rng)?;
        for t in [&mut b.w_attn_out, &mut b.w_mlp_out, &mut b.b_out] {
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::randn(&[3, cfg.width], 1.0, &mut rng);
        if fused_forward(&x, &b, &cfg).map_err(fail)? != x || parallel_block(&x, &b, &cfg).map_err(fail)? != x {
            return Err(format!("case {c}: zero block changed its input"));
        }
    }
    Ok(cases)
}

fn matvec_cases(ctx: &Ctx, mode: ShardMode) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng(mode.as_str());
    let per_k = 50;
    for k in [1, 2, 4, 8] {
        let mesh = MeshConfig::new(1, k);
        for c in 0..per_k {
            let (m, n, b) = (k * (1 + rng.below(4) as usize), k * (1 + rng.below(4) as usize), 1 + rng.below(3) as usize);
            let a = Tensor::randn(&[m, n], 1.0, &mut rng);
            let x = Tensor::randn(&[n, b], 1.0, &mut rng);
            let sa = ShardedMatrix::shard(&a, mode, k).map_err(fail)?;
            let sx = ShardedVector::split(&x, k, VectorSpace::Input).map_err(fail)?;
            let (y, _) = match (mode, ctx.fault) {
                (ShardMode::Row, _) => row_sharded_matvec(&sa, &sx, &mesh),
                (_, Fault::ColSignFlip) => col_sharded_matvec_sign_flipped(&sa, &sx, &mesh),
                _ => col_sharded_matvec(&sa, &sx, &mesh),
            }
            .map_err(fail)?;
            let got = y.concat().map_err(fail)?;
            let d = max_rel(&got, &naive(&a, &x));
            if d > 1e-12 {
                return Err(format!("k={k} case {c} ({m}x{n}): relative error {d:e}"));
            }
        }
    }
    Ok(4 * per_k)
}

fn shard_row(ctx: &Ctx) -> std::result::Result<usize, String> {
    matvec_cases(ctx, ShardMode::Row)
}

fn shard_col(ctx: &Ctx) -> std::result::Result<usize, String> {
    matvec_cases(ctx, ShardMode::Column)
}

fn shard_volume(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("volume");
    let mut cases = 0;
    for k in [1, 2, 4, 8] {
        let mesh = MeshConfig::new(1, k);
        for _ in 0..10 {
            let (m, n) = (k * (1 + rng.below(5) as usize), k * (1 + rng.below(5) as usize));
            let a = Tensor::randn(&[m, n], 1.0, &mut rng);
            let x = ShardedVector::split(&Tensor::randn(&[n], 1.0, &mut rng), k, VectorSpace::Input).map_err(fail)?;
            for mode in [ShardMode::Row, ShardMode::Column] {
                let sa = ShardedMatrix::shard(&a, mode, k).map_err(fail)?;
                let (_, rep) = match mode {
                    ShardMode::Row => row_sharded_matvec(&sa, &x, &mesh),
                    _ => col_sharded_matvec(&sa, &x, &mesh),
                }
                .map_err(fail)?;
                let want = match mode {
                    ShardMode::Row => (k as u64 - 1) * (n / k) as u64,
                    _ => (k as u64 - 1) * (m / k) as u64,
                };
                if rep.per_device_comm_floats != want || linear_comm_floats(mode, m, n, k) != want {
                    return Err(format!("{} k={k} {m}x{n}: sent {} want {want}", mode.as_str(), rep.per_device_comm_floats));
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

fn shard_chooser(_: &Ctx) -> std::result::Result<usize, String> {
    let mut cases = 0;
    for m in 1..=16 {
        for n in 1..=16 {
            let want = if m < n { ShardMode::Column } else { ShardMode::Row };
            if choose_sharding(m, n) != want {
                return Err(format!("{m}x{n}: chose {}", choose_sharding(m, n).as_str()));
            }
            cases += 1;
        }
    }
    Ok(cases)
}

fn shard_block(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("sharded_block");
    let mut cases = 0;
    for k in [1, 2, 4] {
        let mesh = MeshConfig::new(1, k);
        for c in 0..8 {
            let heads = k * (1 + rng.below(2) as usize);
            let cfg = VitConfig::tiny(heads * 4, 1, 4 * k * (1 + rng.below(3) as usize), heads);
            let b = random_block(&cfg, &mut rng)?;
            let x = Tensor::randn(&[1 + rng.below(5) as usize, cfg.width], 1.0, &mut rng);
            let sb = ShardedBlock::new(&b, &cfg, k).map_err(fail)?;
            let xs = ShardedVector::split(&transpose(&x).map_err(fail)?, k, VectorSpace::Input).map_err(fail)?;
            let (y, _) = sharded_block_forward(&xs, &sb, &mesh).map_err(fail)?;
            let y = transpose(&y.concat().map_err(fail)?).map_err(fail)?;
            let d = max_rel(&y, &fused_forward(&x, &b, &cfg).map_err(fail)?);
            if d > 1e-9 {
                return Err(format!("k={k} case {c}: relative error {d:e}"));
            }
            cases += 1;
        }
    }
    Ok(cases)
}

fn mesh_all_gather(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("all_gather");
    let mut cases = 0;
    for k in [1, 2, 3, 4, 8] {
        let chunks: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[3, 2], 1.0, &mut rng)).collect();
        let (out, rep) = ring_all_gather(&chunks, &MeshConfig::new(1, k)).map_err(fail)?;
        let want: Vec<f64> = chunks.iter().flat_map(|c| c.data().to_vec()).collect();
        for (i, o) in out.iter().enumerate() {
            if o.data() != want.as_slice() {
                return Err(format!("k={k}: device {i} does not hold the concatenation"));
            }
        }
        if rep.per_device_comm_floats != (k as u64 - 1) * 6 {
            return Err(format!("k={k}: sent {}", rep.per_device_comm_floats));
        }
        cases += 1;
    }
    Ok(cases)
}

fn mesh_reduce_scatter(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("reduce_scatter");
    let mut cases = 0;
    for k in [1, 2, 3, 4, 8] {
        let partials: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[2 * k, 2], 1.0, &mut rng)).collect();
        let (out, _) = ring_reduce_scatter(&partials, &MeshConfig::new(1, k)).map_err(fail)?;
        for (i, o) in out.iter().enumerate() {
            for (r, v) in o.data().iter().enumerate() {
                let idx = i * 4 + r;
                let want: f64 = partials.iter().map(|p| p.data()[idx]).sum();
                if (v - want).abs() > 1e-12 * want.abs().max(1.0) {
                    return Err(format!("k={k}: device {i} element {r}: {v} vs {want}"));
                }
            }
        }
        cases += 1;
    }
    Ok(cases)
}

fn mesh_overlap(ctx: &Ctx) -> std::result::Result<usize, String> {
    let mut rng = ctx.rng("overlap");
    let cases = 1000;
    for c in 0..cases {
        let k = 1 + rng.below(8) as usize;
        let t_m = rng.uniform_range(0.0, 5.0);
        let t_c = if rng.below(5) == 0 { 0.0 } else { rng.uniform_range(0.0, 5.0) };
        let compute = vec![t_m; k];
        let comm = vec![t_c; k - 1];
        let over = schedule_overlapped(&compute, &comm).map_err(fail)?;
        let serial = non_overlapped_makespan(&compute, &comm).map_err(fail)?;
        let closed = overlapped_closed_form(k, t_m, t_c);
        if (over - closed).abs() > 1e-12 * closed.max(1.0) {
            return Err(format!("case {c}: schedule {over} vs closed form {closed}"));
        }
        if over > serial + 1e-12 * serial.max(1.0) {
            return Err(format!("case {c}: overlapped {over} > serial {serial}"));
        }
        let equal = (over - serial).abs() <= 1e-12 * serial.max(1.0);
        let trivial = k == 1 || t_c == 0.0 || t_m == 0.0;
        if equal != trivial {
            return Err(format!("case {c}: k={k} t_m={t_m} t_c={t_c} equality {equal}"));
        }
    }
    Ok(cases)
}

fn mesh_mfu(_: &Ctx) -> std::result::Result<usize, String> {
    let v = mfu(&VitConfig::vit_22b(), 1150.0, TPU_V4_PEAK_FLOPS).map_err(fail)?;
    if !(0.534..=0.564).contains(&v) {
        return Err(format!("mfu {v}"));
    }
    Ok(1)
}

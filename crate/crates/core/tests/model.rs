//! Model-level behavior against hand-written oracles.

use meshvit::model::attention::attend;
use meshvit::model::checkpoint::{read_checkpoint, write_checkpoint};
use meshvit::model::params::{init_tensor, param_specs, ParamSpec, Part, Role};
use meshvit::model::{
    flops_per_token, fused_forward, fused_in_kernel, init_params, map_head, parallel_block, parameter_count,
    qk_attention, qk_logit_bound, BlockParams, FlopMode, ParamBreakdown, VitConfig, VitParams,
};
use meshvit::{Rng, Tensor};
use proptest::prelude::*;

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn row_rms(r: &[f64]) -> f64 {
    (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()
}

/// `x·W` by explicit loops over row-major storage.
fn mm(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let (n, p) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| (0..p).map(|j| (0..n).map(|l| r[l] * w.data()[l * p + j]).sum()).collect())
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Parallel block evaluated branch by branch, one head at a time.
fn block_oracle(x: &Tensor, b: &BlockParams, cfg: &VitConfig) -> Vec<Vec<f64>> {
    let (w, h) = (cfg.width, cfg.num_heads);
    let hd = w / h;
    let n: Vec<Vec<f64>> = rows(x)
        .iter()
        .map(|r| {
            let s = row_rms(r);
            r.iter().zip(b.ln_gain.data()).map(|(v, g)| g * v / s).collect()
        })
        .collect();
    let qkv = mm(&n, &b.w_qkv);
    let s = n.len();
    let mut heads = vec![vec![0.0; w]; s];
    for head in 0..h {
        let slice = |r: &Vec<f64>, off: usize| r[off + head * hd..off + (head + 1) * hd].to_vec();
        let normed = |v: Vec<f64>, g: &Option<Tensor>| match (cfg.qk_norm, g) {
            (true, Some(g)) => {
                let r = row_rms(&v);
                v.iter().enumerate().map(|(d, x)| g.data()[head * hd + d] * x / r).collect()
            }
            _ => v,
        };
        let q: Vec<Vec<f64>> = qkv.iter().map(|r| normed(slice(r, 0), &b.q_gain)).collect();
        let k: Vec<Vec<f64>> = qkv.iter().map(|r| normed(slice(r, w), &b.k_gain)).collect();
        let v: Vec<Vec<f64>> = qkv.iter().map(|r| slice(r, 2 * w)).collect();
        for i in 0..s {
            let logits: Vec<f64> =
                (0..s).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..hd {
                heads[i][head * hd + d] = (0..s).map(|j| e[j] / z * v[j][d]).sum();
            }
        }
    }
    let attn = mm(&heads, &b.w_attn_out);
    let hidden: Vec<Vec<f64>> = mm(&n, &b.w_mlp_in)
        .iter()
        .map(|r| r.iter().zip(b.b_mlp_in.data()).map(|(v, c)| gelu(v + c)).collect())
        .collect();
    let mlp = mm(&hidden, &b.w_mlp_out);
    rows(x)
        .iter()
        .enumerate()
        .map(|(i, r)| (0..w).map(|d| r[d] + attn[i][d] + mlp[i][d] + b.b_out.data()[d]).collect())
        .collect()
}

fn random_block(cfg: &VitConfig, seed: u64) -> BlockParams {
    let mut rng = Rng::new(seed);
    let mut p = init_params(cfg, &rng.fork(1)).unwrap();
    let mut b = p.blocks.remove(0);
    for t in [b.q_gain.as_mut(), b.k_gain.as_mut()].into_iter().flatten() {
        *t = Tensor::from_fn(t.shape(), |_| rng.uniform_range(-2.0, 2.0));
    }
    b.ln_gain = Tensor::from_fn(b.ln_gain.shape(), |_| rng.uniform_range(0.5, 1.5));
    b.b_mlp_in = Tensor::randn(b.b_mlp_in.shape(), 0.1, &mut rng);
    b.b_out = Tensor::randn(b.b_out.shape(), 0.1, &mut rng);
    b
}

fn max_abs_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    rows(a).iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn parallel_block_matches_branch_oracle() {
    for (seed, qk) in [(1, true), (2, false), (3, true)] {
        let cfg = VitConfig { qk_norm: qk, ..VitConfig::tiny(16, 1, 32, 4) };
        let b = random_block(&cfg, seed);
        let x = Tensor::randn(&[5, 16], 1.0, &mut Rng::new(seed + 10));
        let y = parallel_block(&x, &b, &cfg).unwrap();
        let d = max_abs_diff(&y, &block_oracle(&x, &b, &cfg));
        assert!(d <= 1e-12, "seed {seed}: {d:e}");
    }
}

#[test]
fn fused_matches_parallel_width32() {
    let cfg = VitConfig::tiny(32, 1, 64, 4);
    let b = random_block(&cfg, 4);
    let x = Tensor::randn(&[4, 32], 1.0, &mut Rng::new(5));
    let a = fused_forward(&x, &b, &cfg).unwrap();
    let p = parallel_block(&x, &b, &cfg).unwrap();
    let d = max_abs_diff(&a, &rows(&p));
    assert!(d <= 1e-9, "{d:e}");
    assert_eq!(fused_in_kernel(&b).unwrap().cols(), 3 * 32 + 64);
    let big = VitConfig::vit_22b();
    assert_eq!(3 * big.width + big.mlp_dim, 43008);
}

#[test]
fn sequential_form_rejects_fusion() {
    let cfg = VitConfig { parallel_block: false, ..VitConfig::tiny(8, 1, 16, 2) };
    let p = init_params(&cfg, &Rng::new(0)).unwrap();
    assert!(fused_forward(&Tensor::zeros(&[2, 8]), &p.blocks[0], &cfg).is_err());
}

#[test]
fn zero_block_is_exact_identity() {
    // Without QK norm every weight can be zero; with it, zero queries have no
    // RMS, so only the output side is zeroed.
    for qk in [false, true] {
        let cfg = VitConfig { qk_norm: qk, ..VitConfig::tiny(8, 1, 16, 2) };
        let mut b = random_block(&cfg, 6);
        let mut zero = vec![&mut b.w_attn_out, &mut b.w_mlp_out, &mut b.b_out];
        let mut rest = vec![&mut b.w_qkv, &mut b.w_mlp_in, &mut b.b_mlp_in];
        if !qk {
            zero.append(&mut rest);
        }
        for t in zero {
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::randn(&[3, 8], 1.0, &mut Rng::new(7));
        assert_eq!(parallel_block(&x, &b, &cfg).unwrap(), x);
        assert_eq!(fused_forward(&x, &b, &cfg).unwrap(), x);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = Rng::new(8);
    let q = Tensor::randn(&[1, 8], 100.0, &mut rng);
    let k = Tensor::randn(&[1, 8], 100.0, &mut rng);
    let v = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let (o, st, _) = attend(&q, &k, &v, 2, None, false).unwrap();
    assert_eq!(o, v);
    assert_eq!(st.min_entropy(), 0.0);
}

#[test]
fn unit_gains_bound_logits_by_sqrt_head_dim() {
    let mut rng = Rng::new(9);
    let g = Tensor::full(&[1, 64], 1.0);
    assert_eq!(qk_logit_bound(64, &g, &g), 8.0);
    for _ in 0..20 {
        let q = Tensor::randn(&[6, 64], 50.0, &mut rng);
        let k = Tensor::randn(&[6, 64], 0.01, &mut rng);
        let v = Tensor::randn(&[6, 64], 1.0, &mut rng);
        let (_, st, _) = attend(&q, &k, &v, 1, Some((&g, &g)), false).unwrap();
        assert!(st.max_abs_logit <= 8.0 + 1e-12);
    }
}

#[test]
fn qk_scale_invariance_x1000() {
    let cfg = VitConfig::tiny(16, 1, 32, 2);
    let b = random_block(&cfg, 10);
    let x = Tensor::randn(&[6, 16], 1.0, &mut Rng::new(11));
    let (base, _) = qk_attention(&x, &b, &cfg).unwrap();
    for cols in [0..16, 16..32] {
        let mut s = b.clone();
        for r in 0..16 {
            for v in &mut s.w_qkv.row_mut(r)[cols.clone()] {
                *v *= 1000.0;
            }
        }
        let (out, _) = qk_attention(&x, &s, &cfg).unwrap();
        let d = max_abs_diff(&out, &rows(&base));
        assert!(d <= 1e-9, "{cols:?}: {d:e}");
        let unnormed = VitConfig { qk_norm: false, ..cfg.clone() };
        let (a, _) = qk_attention(&x, &b, &unnormed).unwrap();
        let (c, _) = qk_attention(&x, &s, &unnormed).unwrap();
        assert!(max_abs_diff(&a, &rows(&c)) > 1e-6);
    }
}

#[test]
fn logit_bound_and_entropy_floor_fuzz() {
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
        let (_, st, _) = attend(&q, &k, &v, heads, Some((&qg, &kg)), false).unwrap();
        let bound = qk_logit_bound(hd, &qg, &kg);
        assert!(st.max_abs_logit <= bound * (1.0 + 1e-12), "case {case}");
        let floor = (s as f64).ln() - st.max_logit_range();
        assert!(st.min_entropy() >= floor - 1e-9, "case {case}: {} < {floor}", st.min_entropy());
        for i in 0..st.logits.rows() {
            let r = st.logits.row(i);
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|l| (l - mx).exp()).sum();
            let p: Vec<f64> = r.iter().map(|l| (l - mx).exp() / z).collect();
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

fn zero_head(cfg: &VitConfig) -> VitParams {
    let mut p = init_params(cfg, &Rng::new(13)).unwrap();
    let w = cfg.width;
    let h = &mut p.head;
    h.w_q = Tensor::zeros(&[w, w]);
    h.w_k = Tensor::zeros(&[w, w]);
    h.w_v = Tensor::eye(w);
    h.w_o = Tensor::eye(w);
    h.w_mlp_in = Tensor::zeros(h.w_mlp_in.shape());
    h.w_mlp_out = Tensor::zeros(h.w_mlp_out.shape());
    p
}

#[test]
fn map_head_hand_computation() {
    let cfg = VitConfig::tiny(4, 1, 8, 2);
    let p = zero_head(&cfg);
    let tokens = Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 3.0, 0.0, -1.0, 2.0]).unwrap();
    // Zero queries give uniform weights; identity value and output paths
    // pass the token mean; the MLP adds gelu(0)·0 + 0; a final RMS norm.
    let mean = [2.0, 1.0, 1.0, 3.0];
    let r = row_rms(&mean);
    let got = map_head(&tokens, &p.head, &cfg).unwrap();
    for d in 0..4 {
        assert!((got.data()[d] - mean[d] / r).abs() <= 1e-15);
    }
}

#[test]
fn map_head_single_token_and_symmetry() {
    let cfg = VitConfig::tiny(8, 1, 16, 2);
    let p = init_params(&cfg, &Rng::new(14)).unwrap();
    let mut rng = Rng::new(15);
    let t = Tensor::randn(&[1, 8], 1.0, &mut rng);
    assert_eq!(map_head(&t, &p.head, &cfg).unwrap(), map_head(&t, &p.head, &cfg).unwrap());
    let a = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let b = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let ab = meshvit::tensor::concat_rows(&[&a, &a, &b]).unwrap();
    let ba = meshvit::tensor::concat_rows(&[&a, &b, &a]).unwrap();
    let (x, y) = (map_head(&ab, &p.head, &cfg).unwrap(), map_head(&ba, &p.head, &cfg).unwrap());
    assert!(x.data().iter().zip(y.data()).all(|(u, v)| (u - v).abs() <= 1e-12));
}

#[test]
fn fresh_gains_are_one_and_init_std_matches() {
    let cfg = VitConfig::tiny(16, 2, 32, 2);
    let p = init_params(&cfg, &Rng::new(16)).unwrap();
    for (name, t) in p.named() {
        if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }
    let spec = ParamSpec {
        name: "block0.attn_out.kernel".into(),
        shape: vec![6144, 6144],
        role: Role::Weight,
        part: Part::Body,
        fan_in: 6144,
    };
    let t = init_tensor(&spec, &Rng::new(17));
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let std = (t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let want = 1.0 / 6144f64.sqrt();
    assert!((std / want - 1.0).abs() <= 0.02, "std {std} vs {want}");
}

#[test]
fn checkpoint_round_trip() {
    let cfg = VitConfig::tiny(8, 2, 16, 2);
    let p = init_params(&cfg, &Rng::new(18)).unwrap();
    let dir = std::env::temp_dir().join(format!("meshvit-ckpt-{}", std::process::id()));
    write_checkpoint(&p, &cfg, &dir).unwrap();
    assert_eq!(read_checkpoint(&cfg, &dir).unwrap(), p);
    let other = VitConfig { depth: 1, ..cfg };
    assert!(read_checkpoint(&other, &dir).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn preset_counts_equal_tensor_sums() {
    for (cfg, want) in [
        (VitConfig::vit_g(), 1_930_673_072u64),
        (VitConfig::vit_e(), 3_926_620_208),
        (VitConfig::vit_22b(), 22_388_206_896),
    ] {
        let sum: u64 = param_specs(&cfg).iter().map(ParamSpec::numel).sum();
        assert_eq!(parameter_count(&cfg), sum);
        assert_eq!(ParamBreakdown::of(&cfg).total(), sum);
        assert_eq!(sum, want);
    }
}

#[test]
fn flops_conventions() {
    let cfg = VitConfig::vit_22b();
    let f = flops_per_token(&cfg, FlopMode::Forward);
    assert_eq!(flops_per_token(&cfg, FlopMode::Train), 3.0 * f);
    let train = flops_per_token(&cfg, FlopMode::Train);
    assert!((train / 1.30e11 - 1.0).abs() < 0.01, "{train}");
    let emb = 2.0 * ParamBreakdown::of(&cfg).embedding as f64;
    let deep = VitConfig { depth: 96, ..cfg.clone() };
    let blocks = |c: &VitConfig| flops_per_token(c, FlopMode::Forward) - emb;
    assert_eq!(blocks(&deep), 2.0 * blocks(&cfg));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn fusion_equivalence_random_configs(
        heads in 1usize..4,
        hd in 1usize..5,
        mlp in 1usize..24,
        s in 1usize..6,
        qk in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = VitConfig { qk_norm: qk, ..VitConfig::tiny(heads * hd, 1, mlp, heads) };
        let b = random_block(&cfg, seed);
        let x = Tensor::randn(&[s, cfg.width], 1.0, &mut Rng::new(seed ^ 1));
        let a = fused_forward(&x, &b, &cfg).unwrap();
        let p = parallel_block(&x, &b, &cfg).unwrap();
        let scale = p.max_abs().max(1.0);
        prop_assert!(max_abs_diff(&a, &rows(&p)) <= 1e-9 * scale);
    }
}

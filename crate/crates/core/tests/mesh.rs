//! Collectives, the overlap model, MFU and the full simulation against
//! independent oracles.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use meshvit::mesh::{
    mfu, non_overlapped_makespan, overlapped_closed_form, ring_all_gather, ring_reduce_scatter, schedule_overlapped,
    EventKind, MeshConfig, TPU_V4_PEAK_FLOPS,
};
use meshvit::model::VitConfig;
use meshvit::shard::{linear_comm_floats, simulate, ShardMode, ShardPolicy};
use meshvit::{Rng, Tensor};

#[test]
fn all_gather_is_concatenation_k8() {
    let mut rng = Rng::new(1);
    let chunks: Vec<Tensor> = (0..8).map(|_| Tensor::randn(&[5], 1.0, &mut rng)).collect();
    let (out, rep) = ring_all_gather(&chunks, &MeshConfig::new(1, 8)).unwrap();
    let mut want = Vec::new();
    for c in &chunks {
        want.extend_from_slice(c.data());
    }
    for o in &out {
        assert_eq!(o.data(), want.as_slice());
    }
    assert_eq!(rep.per_device_comm_floats, 7 * 5);
    assert_eq!(rep.total_sent, rep.total_received);
}

#[test]
fn reduce_scatter_is_dense_sum_k4() {
    let mut rng = Rng::new(2);
    let partials: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[12, 3], 1.0, &mut rng)).collect();
    let (out, rep) = ring_reduce_scatter(&partials, &MeshConfig::new(1, 4)).unwrap();
    let mut dense = vec![0.0; 36];
    for p in &partials {
        for (d, v) in dense.iter_mut().zip(p.data()) {
            *d += v;
        }
    }
    for (i, o) in out.iter().enumerate() {
        for (j, v) in o.data().iter().enumerate() {
            let want = dense[i * 9 + j];
            assert!((v - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
    assert_eq!(rep.per_device_comm_floats, 3 * 9);
    assert_eq!(rep.total_sent, rep.total_received);
}

#[test]
fn collective_volumes_for_all_k() {
    for k in [1, 2, 3, 4, 8] {
        let mesh = MeshConfig::new(1, k);
        let chunks: Vec<Tensor> = (0..k).map(|i| Tensor::full(&[4], i as f64)).collect();
        let (_, ag) = ring_all_gather(&chunks, &mesh).unwrap();
        assert_eq!(ag.per_device_comm_floats, (k as u64 - 1) * 4);
        let partials: Vec<Tensor> = (0..k).map(|_| Tensor::full(&[4 * k], 1.0)).collect();
        let (_, rs) = ring_reduce_scatter(&partials, &mesh).unwrap();
        assert_eq!(rs.per_device_comm_floats, (k as u64 - 1) * 4);
        assert_eq!(ag.total_sent, ag.total_received);
        assert_eq!(rs.total_sent, rs.total_received);
    }
}

/// Discrete-event run of the pipelined linear: one compute unit and one
/// link. Compute `j + 1` waits for compute `j` and transfer `j`; transfer
/// `j` starts with compute `j + 1`.
fn event_oracle(compute: &[f64], comm: &[f64]) -> f64 {
    #[derive(PartialEq, PartialOrd)]
    struct T(f64);
    impl Eq for T {}
    impl Ord for T {
        fn cmp(&self, o: &Self) -> std::cmp::Ordering {
            self.0.partial_cmp(&o.0).unwrap()
        }
    }
    let k = compute.len();
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((T(compute[0]), 0usize, 'm')));
    let mut done_m = vec![f64::NAN; k];
    let mut done_c = vec![f64::NAN; k.saturating_sub(1)];
    let mut last = 0.0;
    while let Some(Reverse((T(t), j, kind))) = heap.pop() {
        last = t;
        match kind {
            'm' => done_m[j] = t,
            _ => done_c[j - 1] = t,
        }
        // Round j + 1 can begin once compute j and the transfer issued with
        // compute j (if any) have both completed.
        let next = j + 1;
        let prev_comm_ok = j == 0 || !done_c[j - 1].is_nan();
        if next < k && !done_m[j].is_nan() && prev_comm_ok {
            heap.push(Reverse((T(t + compute[next]), next, 'm')));
            heap.push(Reverse((T(t + comm[next - 1]), next, 'c')));
        }
    }
    last
}

#[test]
fn overlap_examples() {
    assert_eq!(schedule_overlapped(&[3.0], &[]).unwrap(), 3.0);
    let (m, c) = ([3.0; 4], [2.0; 3]);
    assert_eq!(schedule_overlapped(&m, &c).unwrap(), 12.0);
    assert_eq!(non_overlapped_makespan(&m, &c).unwrap(), 18.0);
    assert_eq!(event_oracle(&m, &c), 12.0);
    let z = [0.0; 3];
    assert_eq!(schedule_overlapped(&m, &z).unwrap(), 12.0);
    assert_eq!(non_overlapped_makespan(&m, &z).unwrap(), 12.0);
    assert!(schedule_overlapped(&m, &[1.0, -1.0, 1.0]).is_err());
    assert!(schedule_overlapped(&m, &[1.0]).is_err());
}

#[test]
fn overlap_randomized_against_event_oracle() {
    let mut rng = Rng::new(3);
    for case in 0..1000 {
        let k = 1 + rng.below(8) as usize;
        let zero_comm = rng.below(6) == 0;
        let uniform = rng.below(2) == 0;
        let (m0, c0) = (rng.uniform_range(0.01, 5.0), rng.uniform_range(0.01, 5.0));
        let compute: Vec<f64> = (0..k).map(|_| if uniform { m0 } else { rng.uniform_range(0.01, 5.0) }).collect();
        let comm: Vec<f64> = (1..k)
            .map(|_| if zero_comm { 0.0 } else if uniform { c0 } else { rng.uniform_range(0.01, 5.0) })
            .collect();
        let over = schedule_overlapped(&compute, &comm).unwrap();
        let serial = non_overlapped_makespan(&compute, &comm).unwrap();
        let oracle = event_oracle(&compute, &comm);
        assert!((over - oracle).abs() <= 1e-12 * oracle, "case {case}: {over} vs {oracle}");
        if uniform {
            let closed = overlapped_closed_form(k, m0, if zero_comm { 0.0 } else { c0 });
            assert!((over - closed).abs() <= 1e-12 * closed, "case {case}");
        }
        assert!(over <= serial * (1.0 + 1e-12), "case {case}");
        let equal = (serial - over).abs() <= 1e-12 * serial;
        assert_eq!(equal, k == 1 || zero_comm, "case {case}: k={k} {over} vs {serial}");
    }
}

#[test]
fn mfu_values() {
    let cfg = VitConfig::vit_22b();
    let v = mfu(&cfg, 1150.0, TPU_V4_PEAK_FLOPS).unwrap();
    assert!((0.534..=0.564).contains(&v), "{v}");
    assert!((v - 0.549).abs() <= 0.015);
    let oracle: f64 = 6.0 * 21.743e9 * 1150.0 / 2.75e14;
    assert!((oracle - 0.5455).abs() < 1e-3);
    assert!((v - oracle).abs() < 0.005, "{v} vs {oracle}");
    assert_eq!(mfu(&cfg, 2300.0, TPU_V4_PEAK_FLOPS).unwrap(), 2.0 * v);
    assert!(mfu(&cfg, 0.0, TPU_V4_PEAK_FLOPS).is_err());
    assert!(mfu(&cfg, 1.0, -1.0).is_err());
}

#[test]
fn simulation_timelines_valid_for_presets() {
    for cfg in [VitConfig::vit_g(), VitConfig::vit_e(), VitConfig::vit_22b()] {
        for (t, k) in [(1, 1), (1, 4), (2, 2), (2, 8), (4, 4)] {
            for bw in [1e8, 2.5e10, 1e13] {
                let mesh = MeshConfig { link_bandwidth: bw, device_flops: 2.75e14, ..MeshConfig::new(t, k) };
                let rep = simulate(&cfg, &mesh, cfg.tokens(), ShardPolicy::default()).unwrap();
                rep.timeline.validate().unwrap();
                let formula: u64 = rep
                    .plan
                    .iter()
                    .map(|p| linear_comm_floats(p.mode, p.m, p.n, k) * p.tokens as u64)
                    .sum();
                assert_eq!(rep.model_comm_floats, formula);
                assert!(rep.overlapped_makespan <= rep.non_overlapped_makespan * (1.0 + 1e-12));
                let sent = rep.timeline.total(EventKind::Send);
                assert_eq!(sent, rep.timeline.total(EventKind::Recv));
                if t == 1 && k == 1 {
                    assert_eq!(rep.timeline.comm_event_count(), 0);
                }
                for p in &rep.plan {
                    if p.mode == ShardMode::Replicated {
                        assert_eq!(p.comm_floats, 0);
                    }
                }
            }
        }
    }
}

#[test]
fn simulation_is_deterministic() {
    let cfg = VitConfig::vit_g();
    let mesh = MeshConfig { link_bandwidth: 1e9, device_flops: 1e12, ..MeshConfig::new(2, 4) };
    let a = simulate(&cfg, &mesh, cfg.tokens(), ShardPolicy::default()).unwrap();
    let b = simulate(&cfg, &mesh, cfg.tokens(), ShardPolicy::default()).unwrap();
    assert_eq!(a.timeline.to_csv(), b.timeline.to_csv());
    assert_eq!(a.overlapped_makespan.to_bits(), b.overlapped_makespan.to_bits());
}

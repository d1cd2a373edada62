//! Row- and column-sharded `y = A·x` with compute overlapped on the ring.
//!
//! Row mode gathers the input: in round `j` device `i` multiplies by the
//! chunk it received `j` rounds ago (`x_{i−j}`) while forwarding it.
//! Column mode scatters the output: device `i` first computes the partial
//! that leaves first (`y_{i−1,i}`) and its own block last, each partial
//! overlapping the transfer of the previous accumulator.

use super::matrix::{ShardMode, ShardedMatrix, ShardedVector, VectorSpace};
use crate::error::{dim_err, Error, Result};
use crate::mesh::collective::{all_gather_at, leading_block, reduce_scatter_at};
use crate::mesh::{CollectiveReport, MeshConfig, Ring, Timeline};
use crate::tensor::Tensor;

/// Column when the output space is strictly smaller, row otherwise.
pub fn choose_sharding(m: usize, n: usize) -> ShardMode {
    if m < n {
        ShardMode::Column
    } else {
        ShardMode::Row
    }
}

/// Floats each device sends for one input vector.
pub fn linear_comm_floats(mode: ShardMode, m: usize, n: usize, k: usize) -> u64 {
    let k = k.max(1);
    match mode {
        ShardMode::Replicated => 0,
        ShardMode::Row => ((k - 1) * (n / k)) as u64,
        ShardMode::Column => ((k - 1) * (m / k)) as u64,
    }
}

/// Per-round durations `(t_m, t_c)` of a sharded linear over `batch` columns.
pub fn round_durations(mode: ShardMode, m: usize, n: usize, batch: usize, mesh: &MeshConfig) -> (f64, f64) {
    let k = mesh.k.max(1);
    let flops = 2.0 * (m / k) as f64 * (n / k) as f64 * batch as f64;
    let floats = match mode {
        ShardMode::Replicated => 0.0,
        ShardMode::Row => (n / k * batch) as f64,
        ShardMode::Column => (m / k * batch) as f64,
    };
    (mesh.compute_time(flops), mesh.comm_time(floats))
}

/// `(compute starts, transfer starts, end)` for one sharded linear on `k`
/// devices starting at `start`.
fn round_starts(mode: ShardMode, k: usize, t_m: f64, t_c: f64, start: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let step = t_m.max(t_c);
    // Accumulated, so a round never starts before the previous one's events
    // end even after rounding.
    let mut compute = Vec::with_capacity(k);
    let mut t = start;
    for j in 0..k {
        compute.push(t);
        t += if j == 0 && mode != ShardMode::Row { t_m } else { step };
    }
    // A column linear's last reduce-scatter round runs beside its last
    // compute round.
    let end = match mode {
        ShardMode::Column if k > 1 => compute[k - 1] + step,
        _ => compute[k - 1] + t_m,
    };
    let comm = match mode {
        ShardMode::Row => compute[..k - 1].to_vec(),
        _ => compute[1..].to_vec(),
    };
    (compute, comm, end)
}

/// Timing-only schedule of a sharded linear: emits exactly the events the
/// numeric matvec would and returns the end time. Replicated linears are a
/// single local matmul per device.
#[allow(clippy::too_many_arguments)]
pub fn schedule_linear(
    mode: ShardMode,
    m: usize,
    n: usize,
    batch: usize,
    mesh: &MeshConfig,
    ring: &Ring,
    timeline: &mut Timeline,
    start: f64,
    tag: &str,
) -> f64 {
    let k = ring.len();
    if mode == ShardMode::Replicated {
        let t = mesh.compute_time(2.0 * m as f64 * n as f64 * batch as f64);
        for i in 0..k {
            timeline.compute(ring.member(i), start, start + t, 2.0 * (m * n * batch) as f64, format!("{tag}/mm"));
        }
        return start + t;
    }
    let (t_m, t_c) = round_durations(mode, m, n, batch, mesh);
    let flops = 2.0 * (m / k) as f64 * (n / k) as f64 * batch as f64;
    let (cs, ms, end) = round_starts(mode, k, t_m, t_c, start);
    let floats = match mode {
        ShardMode::Row => (n / k * batch) as f64,
        _ => (m / k * batch) as f64,
    };
    for i in 0..k {
        for (j, &s) in cs.iter().enumerate() {
            let c = compute_chunk(mode, i, j, k);
            timeline.compute(ring.member(i), s, s + t_m, flops, format!("{tag}/mm/c{c}"));
        }
        for (r, &s) in ms.iter().enumerate() {
            let (kind, id) = match mode {
                ShardMode::Row => ("ag", format!("c{}", (i + k - r) % k)),
                _ => ("rs", format!("b{}", (i + 2 * k - r - 1) % k)),
            };
            timeline.transfer(ring.member(i), ring.member(ring.next(i)), s, s + t_c, floats, format!("{tag}/{kind}/r{r}/{id}"));
        }
    }
    end
}

/// Block index device `i` works on in compute round `j`.
fn compute_chunk(mode: ShardMode, i: usize, j: usize, k: usize) -> usize {
    match mode {
        ShardMode::Row => (i + k - j) % k,
        _ => (i + 2 * k - 1 - j) % k,
    }
}

/// `y[r, t] += Σ_l a[r, col0 + l]·x[l, t]`, ascending `l` per output.
fn accumulate(y: &mut Tensor, a: &Tensor, row0: usize, col0: usize, x: &Tensor) {
    let (xr, b) = (x.rows(), x.cols());
    let rows = y.rows();
    let ac = a.cols();
    let ad = a.data();
    let xd = x.data();
    let yd = y.data_mut();
    for r in 0..rows {
        let arow = &ad[(row0 + r) * ac + col0..(row0 + r) * ac + col0 + xr];
        let yrow = &mut yd[r * b..(r + 1) * b];
        for (l, &arl) in arow.iter().enumerate() {
            for (yv, xv) in yrow.iter_mut().zip(&xd[l * b..(l + 1) * b]) {
                *yv += arl * xv;
            }
        }
    }
}

fn check_operands(a: &ShardedMatrix, x: &ShardedVector, ring: &Ring) -> Result<()> {
    let k = ring.len();
    if a.k() != k || x.k() != k {
        return Err(dim_err!("matrix over {} and vector over {} devices on a ring of {k}", a.k(), x.k()));
    }
    if x.space() != VectorSpace::Input {
        return Err(Error::Contract("matvec input must be distributed in input space".into()));
    }
    let (_, n) = a.full_shape();
    if x.len() != n {
        return Err(dim_err!("matrix has {n} columns, vector has length {}", x.len()));
    }
    Ok(())
}

fn overlapped_report(mut rep: CollectiveReport, start: f64, end: f64, per_device: u64) -> CollectiveReport {
    rep.makespan = end - start;
    rep.overlapped = rep.rounds > 0;
    rep.per_device_comm_floats = per_device;
    rep
}

#[allow(clippy::too_many_arguments)]
pub fn row_sharded_matvec_on(
    a: &ShardedMatrix,
    x: &ShardedVector,
    mesh: &MeshConfig,
    ring: &Ring,
    timeline: &mut Timeline,
    start: f64,
    tag: &str,
) -> Result<(ShardedVector, CollectiveReport)> {
    a.expect_mode(ShardMode::Row)?;
    check_operands(a, x, ring)?;
    let k = ring.len();
    let (m, n) = a.full_shape();
    let batch = x.batch();
    let (t_m, t_c) = round_durations(ShardMode::Row, m, n, batch, mesh);
    let (cs, ms, end) = round_starts(ShardMode::Row, k, t_m, t_c, start);
    let (gathered, rep) = all_gather_at(ring, x.blocks(), mesh, timeline, &ms, tag)?;
    let flops = 2.0 * (m / k) as f64 * (n / k) as f64 * batch as f64;
    let mut out = Vec::with_capacity(k);
    for (i, full) in gathered.iter().enumerate() {
        let mut y = Tensor::zeros(&[m / k, batch]);
        for (j, &s) in cs.iter().enumerate() {
            let c = compute_chunk(ShardMode::Row, i, j, k);
            let xc = leading_block(full, c, k)?;
            accumulate(&mut y, a.block(i), 0, c * n / k, &xc);
            timeline.compute(ring.member(i), s, s + t_m, flops, format!("{tag}/mm/c{c}"));
        }
        out.push(y);
    }
    let per = linear_comm_floats(ShardMode::Row, m, n, k) * batch as u64;
    Ok((ShardedVector::from_blocks(out, VectorSpace::Output)?, overlapped_report(rep, start, end, per)))
}

#[allow(clippy::too_many_arguments)]
pub fn col_sharded_matvec_on(
    a: &ShardedMatrix,
    x: &ShardedVector,
    mesh: &MeshConfig,
    ring: &Ring,
    timeline: &mut Timeline,
    start: f64,
    tag: &str,
) -> Result<(ShardedVector, CollectiveReport)> {
    col_matvec_impl(a, x, mesh, ring, timeline, start, tag, false)
}

#[allow(clippy::too_many_arguments)]
fn col_matvec_impl(
    a: &ShardedMatrix,
    x: &ShardedVector,
    mesh: &MeshConfig,
    ring: &Ring,
    timeline: &mut Timeline,
    start: f64,
    tag: &str,
    flip: bool,
) -> Result<(ShardedVector, CollectiveReport)> {
    a.expect_mode(ShardMode::Column)?;
    check_operands(a, x, ring)?;
    let k = ring.len();
    let (m, n) = a.full_shape();
    if m % k != 0 {
        return Err(dim_err!("output length {m} not divisible by k = {k}"));
    }
    let batch = x.batch();
    let (t_m, t_c) = round_durations(ShardMode::Column, m, n, batch, mesh);
    let (cs, ms, end) = round_starts(ShardMode::Column, k, t_m, t_c, start);
    let flops = 2.0 * (m / k) as f64 * (n / k) as f64 * batch as f64;
    let mut partials = Vec::with_capacity(k);
    for i in 0..k {
        let mut p = Tensor::zeros(&[m, batch]);
        for (j, &s) in cs.iter().enumerate() {
            let b = compute_chunk(ShardMode::Column, i, j, k);
            let mut y = Tensor::zeros(&[m / k, batch]);
            accumulate(&mut y, a.block(i), b * m / k, 0, x.block(i));
            p.data_mut()[b * (m / k) * batch..(b + 1) * (m / k) * batch].copy_from_slice(y.data());
            timeline.compute(ring.member(i), s, s + t_m, flops, format!("{tag}/mm/c{b}"));
        }
        if flip && i == 0 {
            p = p.map(|v| -v);
        }
        partials.push(p);
    }
    let (out, rep) = reduce_scatter_at(ring, &partials, mesh, timeline, &ms, tag)?;
    let per = linear_comm_floats(ShardMode::Column, m, n, k) * batch as u64;
    Ok((ShardedVector::from_blocks(out, VectorSpace::Output)?, overlapped_report(rep, start, end, per)))
}

fn standalone(
    f: impl FnOnce(&Ring, &mut Timeline) -> Result<(ShardedVector, CollectiveReport)>,
    mesh: &MeshConfig,
) -> Result<(ShardedVector, CollectiveReport)> {
    mesh.validate()?;
    let mut tl = Timeline::new();
    let (y, mut rep) = f(&mesh.model_ring(0), &mut tl)?;
    tl.validate()?;
    rep.total_sent = tl.total(crate::mesh::EventKind::Send);
    rep.total_received = tl.total(crate::mesh::EventKind::Recv);
    Ok((y, rep))
}

/// `y = A·x` with `A` row-sharded on the model ring of row 0.
pub fn row_sharded_matvec(a: &ShardedMatrix, x: &ShardedVector, mesh: &MeshConfig) -> Result<(ShardedVector, CollectiveReport)> {
    standalone(|ring, tl| row_sharded_matvec_on(a, x, mesh, ring, tl, 0.0, "row"), mesh)
}

/// `y = A·x` with `A` column-sharded on the model ring of row 0.
pub fn col_sharded_matvec(a: &ShardedMatrix, x: &ShardedVector, mesh: &MeshConfig) -> Result<(ShardedVector, CollectiveReport)> {
    standalone(|ring, tl| col_sharded_matvec_on(a, x, mesh, ring, tl, 0.0, "column"), mesh)
}

/// Column matvec with device 0's partial products negated. Exists so the
/// verification suites can prove they catch a broken kernel.
#[doc(hidden)]
pub fn col_sharded_matvec_sign_flipped(
    a: &ShardedMatrix,
    x: &ShardedVector,
    mesh: &MeshConfig,
) -> Result<(ShardedVector, CollectiveReport)> {
    standalone(|ring, tl| col_matvec_impl(a, x, mesh, ring, tl, 0.0, "column", true), mesh)
}

/// Dispatch on the matrix's mode; replicated matrices multiply locally.
pub fn sharded_matvec(a: &ShardedMatrix, x: &ShardedVector, mesh: &MeshConfig) -> Result<(ShardedVector, CollectiveReport)> {
    match a.mode() {
        ShardMode::Row => row_sharded_matvec(a, x, mesh),
        ShardMode::Column => col_sharded_matvec(a, x, mesh),
        ShardMode::Replicated => Err(Error::Contract("replicated matrices need no sharded matvec".into())),
    }
}

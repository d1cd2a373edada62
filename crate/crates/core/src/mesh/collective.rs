//! Unidirectional ring collectives (position `i` sends to `i + 1 mod k`).
//!
//! Data movement is simulated for real: each device only ever reads chunks it
//! owns or has received, so a wrong schedule fails rather than silently
//! producing the right answer.

use super::timeline::{DeviceId, Timeline};
use super::MeshConfig;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ring {
    members: Vec<DeviceId>,
}

impl Ring {
    pub fn new(members: Vec<DeviceId>) -> Self {
        Ring { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, pos: usize) -> DeviceId {
        self.members[pos]
    }

    pub fn next(&self, pos: usize) -> usize {
        (pos + 1) % self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveReport {
    /// Floats sent by each device (identical across the ring).
    pub per_device_comm_floats: u64,
    pub rounds: usize,
    pub makespan: f64,
    pub overlapped: bool,
    pub total_sent: f64,
    pub total_received: f64,
}

fn check_equal_shapes(parts: &[Tensor], what: &str) -> Result<()> {
    let Some(first) = parts.first() else {
        return Err(dim_err!("{what}: no inputs"));
    };
    if let Some(bad) = parts.iter().find(|p| p.shape() != first.shape()) {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", first.shape(), bad.shape()));
    }
    Ok(())
}

fn concat_leading(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    shape[0] *= parts.len();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

/// Block `b` of `k` equal blocks along the leading axis.
pub(crate) fn leading_block(t: &Tensor, b: usize, k: usize) -> Result<Tensor> {
    let lead = t.shape().first().copied().unwrap_or(1);
    if lead % k != 0 {
        return Err(dim_err!("leading extent {lead} not divisible by {k}"));
    }
    let len = t.len() / k;
    let mut shape = t.shape().to_vec();
    shape[0] = lead / k;
    Tensor::new(&shape, t.data()[b * len..(b + 1) * len].to_vec())
}

/// Back-to-back rounds, accumulated so rounding never makes them overlap.
fn uniform_starts(k: usize, start: f64, dur: f64) -> Vec<f64> {
    let mut t = start;
    (0..k.saturating_sub(1))
        .map(|_| {
            let s = t;
            t += dur;
            s
        })
        .collect()
}

/// All-gather on `ring`, starting at `start`: every position ends with all
/// chunks concatenated (leading axis) in ring-position order. In round `r`,
/// position `i` forwards the chunk that originated at `i − r`.
pub fn all_gather_on(
    ring: &Ring,
    chunks: &[Tensor],
    mesh: &MeshConfig,
    timeline: &mut Timeline,
    start: f64,
    tag: &str,
) -> Result<(Vec<Tensor>, CollectiveReport)> {
    let dur = chunks.first().map_or(0.0, |c| mesh.comm_time(c.len() as f64));
    let starts = uniform_starts(ring.len(), start, dur);
    all_gather_at(ring, chunks, mesh, timeline, &starts, tag)
}

/// All-gather whose round `r` starts at `starts[r]`; callers interleaving
/// compute choose the round boundaries.
pub(crate) fn all_gather_at(
    ring: &Ring,
    chunks: &[Tensor],
    mesh: &MeshConfig,
    timeline: &mut Timeline,
    starts: &[f64],
    tag: &str,
) -> Result<(Vec<Tensor>, CollectiveReport)> {
    let k = ring.len();
    if starts.len() + 1 != k.max(1) {
        return Err(Error::Contract(format!("{} round starts for a ring of {k}", starts.len())));
    }
    let start = starts.first().copied().unwrap_or(0.0);
    if chunks.len() != k {
        return Err(dim_err!("{} chunks for a ring of {k}", chunks.len()));
    }
    check_equal_shapes(chunks, "all_gather")?;
    let c = chunks[0].len();
    let dur = mesh.comm_time(c as f64);
    // held[i][j]: chunk j as held by position i.
    let mut held: Vec<Vec<Option<Tensor>>> = (0..k)
        .map(|i| (0..k).map(|j| (i == j).then(|| chunks[j].clone())).collect())
        .collect();
    for r in 0..k.saturating_sub(1) {
        let t0 = starts[r];
        let mut inbound = Vec::with_capacity(k);
        for i in 0..k {
            let j = (i + k - r) % k;
            let chunk = held[i][j]
                .clone()
                .ok_or_else(|| Error::Contract(format!("position {i} forwards chunk {j} it does not hold")))?;
            timeline.transfer(ring.member(i), ring.member(ring.next(i)), t0, t0 + dur, c as f64, format!("{tag}/ag/r{r}/c{j}"));
            inbound.push((ring.next(i), j, chunk));
        }
        for (dst, j, chunk) in inbound {
            held[dst][j] = Some(chunk);
        }
    }
    let mut out = Vec::with_capacity(k);
    for (i, h) in held.iter().enumerate() {
        let parts: Vec<&Tensor> = h
            .iter()
            .enumerate()
            .map(|(j, c)| c.as_ref().ok_or_else(|| Error::Contract(format!("position {i} missing chunk {j}"))))
            .collect::<Result<_>>()?;
        out.push(concat_leading(&parts)?);
    }
    let per = ((k - 1) * c) as u64;
    Ok((
        out,
        CollectiveReport {
            per_device_comm_floats: per,
            rounds: k - 1,
            makespan: starts.last().map_or(0.0, |s| s + dur - start),
            overlapped: false,
            total_sent: (per * k as u64) as f64,
            total_received: (per * k as u64) as f64,
        },
    ))
}

/// Reduce-scatter on `ring`: position `i` ends with `Σ_j partials_j[block i]`.
/// The accumulator for block `b` starts at position `b + 1` and travels the
/// ring, so the sum is taken in ascending ring position starting after `b`
/// and finishing with `b`'s own contribution.
pub fn reduce_scatter_on(
    ring: &Ring,
    partials: &[Tensor],
    mesh: &MeshConfig,
    timeline: &mut Timeline,
    start: f64,
    tag: &str,
) -> Result<(Vec<Tensor>, CollectiveReport)> {
    let k = ring.len().max(1);
    let dur = partials.first().map_or(0.0, |p| mesh.comm_time((p.len() / k) as f64));
    let starts = uniform_starts(ring.len(), start, dur);
    reduce_scatter_at(ring, partials, mesh, timeline, &starts, tag)
}

pub(crate) fn reduce_scatter_at(
    ring: &Ring,
    partials: &[Tensor],
    mesh: &MeshConfig,
    timeline: &mut Timeline,
    starts: &[f64],
    tag: &str,
) -> Result<(Vec<Tensor>, CollectiveReport)> {
    let k = ring.len();
    if starts.len() + 1 != k.max(1) {
        return Err(Error::Contract(format!("{} round starts for a ring of {k}", starts.len())));
    }
    let start = starts.first().copied().unwrap_or(0.0);
    if partials.len() != k {
        return Err(dim_err!("{} partials for a ring of {k}", partials.len()));
    }
    check_equal_shapes(partials, "reduce_scatter")?;
    let blocks: Vec<Vec<Tensor>> = partials
        .iter()
        .map(|p| (0..k).map(|b| leading_block(p, b, k)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let c = blocks[0][0].len();
    let dur = mesh.comm_time(c as f64);
    // outgoing[i]: (block id, accumulator) position i sends next round.
    let mut outgoing: Vec<(usize, Tensor)> =
        (0..k).map(|i| { let b = (i + k - 1) % k; (b, blocks[i][b].clone()) }).collect();
    let mut result: Vec<Option<Tensor>> = vec![None; k];
    if k == 1 {
        result[0] = Some(blocks[0][0].clone());
    }
    for r in 0..k.saturating_sub(1) {
        let t0 = starts[r];
        let mut next_out = outgoing.clone();
        for (i, (b, acc)) in outgoing.iter().enumerate() {
            let dst = ring.next(i);
            timeline.transfer(ring.member(i), ring.member(dst), t0, t0 + dur, c as f64, format!("{tag}/rs/r{r}/b{b}"));
            let mut sum = acc.clone();
            sum.add_assign(&blocks[dst][*b])?;
            if *b == dst {
                result[dst] = Some(sum);
            } else {
                next_out[dst] = (*b, sum);
            }
        }
        outgoing = next_out;
    }
    let out = result
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::Contract(format!("position {i} never received its block"))))
        .collect::<Result<Vec<_>>>()?;
    let per = ((k - 1) * c) as u64;
    Ok((
        out,
        CollectiveReport {
            per_device_comm_floats: per,
            rounds: k - 1,
            makespan: starts.last().map_or(0.0, |s| s + dur - start),
            overlapped: false,
            total_sent: (per * k as u64) as f64,
            total_received: (per * k as u64) as f64,
        },
    ))
}

/// Timing-only all-gather of `chunk_floats` per position; emits the same
/// transfer events as the numeric collective and returns the end time.
pub fn schedule_all_gather(
    ring: &Ring,
    chunk_floats: f64,
    mesh: &MeshConfig,
    timeline: &mut Timeline,
    start: f64,
    tag: &str,
) -> f64 {
    let k = ring.len();
    let dur = mesh.comm_time(chunk_floats);
    let starts = uniform_starts(k, start, dur);
    for (r, &t0) in starts.iter().enumerate() {
        for i in 0..k {
            let j = (i + k - r) % k;
            timeline.transfer(ring.member(i), ring.member(ring.next(i)), t0, t0 + dur, chunk_floats, format!("{tag}/ag/r{r}/c{j}"));
        }
    }
    starts.last().map_or(start, |s| s + dur)
}

fn measured(report: &mut CollectiveReport, timeline: &Timeline) {
    report.total_sent = timeline.total(super::EventKind::Send);
    report.total_received = timeline.total(super::EventKind::Recv);
}

/// All-gather of `k` equal chunks over the model axis of row 0.
pub fn ring_all_gather(chunks: &[Tensor], mesh: &MeshConfig) -> Result<(Vec<Tensor>, CollectiveReport)> {
    mesh.validate()?;
    if chunks.len() != mesh.k {
        return Err(dim_err!("{} chunks for model axis k = {}", chunks.len(), mesh.k));
    }
    let mut tl = Timeline::new();
    let (out, mut rep) = all_gather_on(&mesh.model_ring(0), chunks, mesh, &mut tl, 0.0, "all_gather")?;
    tl.validate()?;
    measured(&mut rep, &tl);
    Ok((out, rep))
}

/// Reduce-scatter of `k` equal partials over the model axis of row 0.
pub fn ring_reduce_scatter(partials: &[Tensor], mesh: &MeshConfig) -> Result<(Vec<Tensor>, CollectiveReport)> {
    mesh.validate()?;
    if partials.len() != mesh.k {
        return Err(dim_err!("{} partials for model axis k = {}", partials.len(), mesh.k));
    }
    let mut tl = Timeline::new();
    let (out, mut rep) = reduce_scatter_on(&mesh.model_ring(0), partials, mesh, &mut tl, 0.0, "reduce_scatter")?;
    tl.validate()?;
    measured(&mut rep, &tl);
    Ok((out, rep))
}

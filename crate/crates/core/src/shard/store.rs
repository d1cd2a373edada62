//! Parameter sharding over the data axis.
//!
//! Tensors at or above a size threshold are split flat into `t` equal chunks
//! (the last zero-padded), one per device of a data ring. Before a layer runs
//! its weights are all-gathered; gradients are reduce-scattered back to the
//! owners. The forward prefetches: the gather for layer `l + 1` starts as
//! soon as layer `l` starts computing.

use crate::error::{Error, Result};
use crate::mesh::collective::{all_gather_on, reduce_scatter_on, schedule_all_gather};
use crate::mesh::{EventKind, MeshConfig, Ring, Timeline};
use crate::model::{VitConfig, VitParams};
use crate::tensor::Tensor;

pub const DEFAULT_SHARD_THRESHOLD: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardPolicy {
    /// Tensors with at least this many floats are sharded.
    pub threshold: usize,
}

impl Default for ShardPolicy {
    fn default() -> Self {
        ShardPolicy { threshold: DEFAULT_SHARD_THRESHOLD }
    }
}

impl ShardPolicy {
    pub fn shards(&self, numel: usize) -> bool {
        numel >= self.threshold
    }
}

/// Layer a parameter belongs to: 0 is the embedding, `1..=depth` the
/// blocks, `depth + 1` the head.
pub fn layer_of(name: &str, depth: usize) -> usize {
    if name.starts_with("embed.") {
        0
    } else if let Some(rest) = name.strip_prefix("block") {
        rest.split('.').next().and_then(|i| i.parse::<usize>().ok()).map_or(depth + 1, |i| i + 1)
    } else {
        depth + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stored {
    name: String,
    shape: Vec<usize>,
    layer: usize,
    /// `t` flat chunks if sharded, otherwise the single full tensor.
    parts: Vec<Tensor>,
    sharded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedParamStore {
    t: usize,
    depth: usize,
    policy: ShardPolicy,
    entries: Vec<Stored>,
}

fn flat_chunks(t: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let c = t.len().div_ceil(parts);
    (0..parts)
        .map(|i| {
            let mut chunk = vec![0.0; c];
            let lo = (i * c).min(t.len());
            let hi = ((i + 1) * c).min(t.len());
            chunk[..hi - lo].copy_from_slice(&t.data()[lo..hi]);
            Tensor::new(&[c], chunk)
        })
        .collect()
}

/// Gradients held by their owners after the reduce-scatter.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedGradients {
    /// Per tensor: `t` owner chunks if sharded, else the single summed tensor.
    pub parts: Vec<(String, Vec<Tensor>)>,
    pub comm_floats_per_device: u64,
}

impl ShardedParamStore {
    pub fn new(params: &VitParams, cfg: &VitConfig, mesh: &MeshConfig, policy: ShardPolicy) -> Result<Self> {
        mesh.validate()?;
        let t = mesh.t;
        let entries = params
            .named()
            .into_iter()
            .map(|(name, tensor)| {
                let sharded = t > 1 && policy.shards(tensor.len());
                Ok(Stored {
                    layer: layer_of(&name, cfg.depth),
                    shape: tensor.shape().to_vec(),
                    parts: if sharded { flat_chunks(tensor, t)? } else { vec![tensor.clone()] },
                    sharded,
                    name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if t > 1 && !entries.iter().any(|e| e.sharded) {
            log::warn!("no tensor reaches the shard threshold of {} floats; parameters stay replicated", policy.threshold);
        }
        Ok(ShardedParamStore { t, depth: cfg.depth, policy, entries })
    }

    pub fn policy(&self) -> ShardPolicy {
        self.policy
    }

    pub fn is_sharded(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name && e.sharded)
    }

    pub fn sharded_names(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| e.sharded).map(|e| e.name.as_str()).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.depth + 2
    }

    /// Floats resident on one data-axis device.
    pub fn floats_per_device(&self) -> usize {
        self.entries.iter().map(|e| e.parts[0].len()).sum()
    }

    /// Floats each device must receive to gather layer `layer`.
    pub fn gather_floats(&self, layer: usize) -> usize {
        self.entries.iter().filter(|e| e.sharded && e.layer == layer).map(|e| (self.t - 1) * e.parts[0].len()).sum()
    }

    fn entry(&self, name: &str) -> Result<&Stored> {
        self.entries.iter().find(|e| e.name == name).ok_or_else(|| Error::Contract(format!("no parameter `{name}`")))
    }

    /// Full tensor as seen by every device after the data-axis all-gather.
    pub fn gather(&self, name: &str, timeline: &mut Timeline, ring: &Ring, start: f64) -> Result<(Tensor, f64)> {
        let e = self.entry(name)?;
        if !e.sharded {
            return Ok((e.parts[0].clone(), start));
        }
        let mesh = MeshConfig::new(self.t, 1);
        let (full, rep) = all_gather_on(ring, &e.parts, &mesh, timeline, start, &format!("gather/{name}"))?;
        let numel: usize = e.shape.iter().product();
        let data = full[0].data()[..numel].to_vec();
        Ok((Tensor::new(&e.shape, data)?, start + rep.makespan))
    }

    /// Every parameter gathered; equals the original parameters bit-for-bit.
    pub fn gather_all(&self, cfg: &VitConfig) -> Result<VitParams> {
        let ring = MeshConfig::new(self.t, 1).data_ring(0);
        let mut tl = Timeline::new();
        let mut out = VitParams::zeros(cfg)?;
        let mut at = 0.0;
        for e in &self.entries {
            let (full, end) = self.gather(&e.name, &mut tl, &ring, at)?;
            at = end;
            *out.get_mut(&e.name).ok_or_else(|| Error::Contract(format!("no parameter `{}`", e.name)))? = full;
        }
        tl.validate()?;
        Ok(out)
    }

    /// Reduce-scatters per-replica gradients (one `VitParams` per data-axis
    /// device) so each owner ends with the summed gradient of its chunks.
    /// Replicated tensors are summed in replica order and not costed.
    pub fn scatter_gradients(&self, grads: &[VitParams]) -> Result<OwnedGradients> {
        if grads.len() != self.t {
            return Err(Error::Contract(format!("{} gradient replicas for t = {}", grads.len(), self.t)));
        }
        let ring = MeshConfig::new(self.t, 1).data_ring(0);
        let mesh = MeshConfig::new(self.t, 1);
        let mut tl = Timeline::new();
        let mut parts = Vec::with_capacity(self.entries.len());
        let mut comm = 0;
        let mut at = 0.0;
        for e in &self.entries {
            let per: Vec<&Tensor> = grads
                .iter()
                .map(|g| g.get(&e.name).ok_or_else(|| Error::Contract(format!("gradient missing `{}`", e.name))))
                .collect::<Result<_>>()?;
            if e.sharded {
                let padded: Vec<Tensor> = per
                    .iter()
                    .map(|g| {
                        let chunks = flat_chunks(g, self.t)?;
                        let data: Vec<f64> = chunks.iter().flat_map(|c| c.data().iter().copied()).collect();
                        Tensor::new(&[data.len()], data)
                    })
                    .collect::<Result<_>>()?;
                let (owned, rep) = reduce_scatter_on(&ring, &padded, &mesh, &mut tl, at, &format!("scatter/{}", e.name))?;
                at += rep.makespan;
                comm += rep.per_device_comm_floats;
                parts.push((e.name.clone(), owned));
            } else {
                let mut sum = per[0].clone();
                for g in &per[1..] {
                    sum.add_assign(g)?;
                }
                parts.push((e.name.clone(), vec![sum]));
            }
        }
        Ok(OwnedGradients { parts, comm_floats_per_device: comm })
    }

    /// Applies `update(param, grad)` chunk-wise on the owners.
    pub fn apply(&mut self, grads: &OwnedGradients, mut update: impl FnMut(&str, &mut Tensor, &Tensor)) -> Result<()> {
        for (e, (name, g)) in self.entries.iter_mut().zip(&grads.parts) {
            if &e.name != name || e.parts.len() != g.len() {
                return Err(Error::Contract(format!("gradient `{name}` does not match stored `{}`", e.name)));
            }
            for (p, gp) in e.parts.iter_mut().zip(g) {
                update(name, p, gp);
            }
        }
        Ok(())
    }

    /// Per-device gather chunk of each layer when every model column keeps
    /// a `1/k` slice of the sharded tensors.
    pub fn layer_chunks(&self, k: usize) -> Vec<f64> {
        (0..self.num_layers())
            .map(|l| {
                self.entries.iter().filter(|e| e.sharded && e.layer == l).map(|e| e.parts[0].len() as f64).sum::<f64>()
                    / k as f64
            })
            .collect()
    }

    /// The prefetched forward of `schedule_prefetch` for this store.
    pub fn prefetch_schedule(
        &self,
        layer_time: &[f64],
        mesh: &MeshConfig,
        timeline: &mut Timeline,
        emit_compute: bool,
    ) -> Result<Vec<f64>> {
        schedule_prefetch(&self.layer_chunks(mesh.k), layer_time, mesh, timeline, emit_compute)
    }
}

/// Per-layer, per-device gather chunk (floats) for a model that was never
/// materialized: layer membership and sizes come from the parameter specs.
pub fn layer_chunks_for(cfg: &VitConfig, mesh: &MeshConfig, policy: ShardPolicy) -> Vec<f64> {
    let mut out = vec![0.0; cfg.depth + 2];
    if mesh.t > 1 {
        for spec in crate::model::param_specs(cfg) {
            if policy.shards(spec.numel() as usize) {
                out[layer_of(&spec.name, cfg.depth)] += spec.numel().div_ceil(mesh.t as u64) as f64 / mesh.k as f64;
            }
        }
    }
    out
}

/// Simulates one forward with weight prefetch on every data ring of `mesh`.
/// Layer `l` starts once layer `l − 1` has finished and its own weights have
/// arrived, and runs for `layer_time[l]`. The gather of layer `l + 1` starts
/// when layer `l` starts, or when the previous gather ends if that is later.
/// With `emit_compute`, each device records a `layer{l}:compute` event.
/// Returns the layer start times.
pub fn schedule_prefetch(
    layer_chunk: &[f64],
    layer_time: &[f64],
    mesh: &MeshConfig,
    timeline: &mut Timeline,
    emit_compute: bool,
) -> Result<Vec<f64>> {
    let layers = layer_chunk.len();
    if layer_time.len() != layers {
        return Err(Error::Contract(format!("{} layer durations for {layers} layers", layer_time.len())));
    }
    let rings: Vec<Ring> = (0..mesh.k).map(|c| mesh.data_ring(c)).collect();
    let gather = |l: usize, at: f64, tl: &mut Timeline| -> f64 {
        if layer_chunk[l] == 0.0 || mesh.t == 1 {
            return at;
        }
        rings
            .iter()
            .map(|r| schedule_all_gather(r, layer_chunk[l], mesh, tl, at, &format!("layer{l}:gather")))
            .fold(at, f64::max)
    };
    let mut starts = Vec::with_capacity(layers);
    let mut ready = gather(0, 0.0, timeline);
    let mut free = 0.0;
    for (l, &dur) in layer_time.iter().enumerate() {
        let s = f64::max(free, ready);
        starts.push(s);
        if emit_compute {
            for r in 0..mesh.t {
                for c in 0..mesh.k {
                    let dev = crate::mesh::DeviceId { row: r, col: c };
                    timeline.compute(dev, s, s + dur, dur * mesh.device_flops, format!("layer{l}:compute"));
                }
            }
        }
        free = s + dur;
        if l + 1 < layers {
            ready = gather(l + 1, f64::max(s, ready), timeline);
        }
    }
    Ok(starts)
}

fn layer_tag(tag: &str) -> Option<usize> {
    tag.strip_prefix("layer")?.split(':').next()?.parse().ok()
}

/// Prefetch legality: on every device, no compute event of layer `l` starts
/// before that device has received the last piece of layer `l`'s weights.
pub fn check_prefetch(timeline: &Timeline) -> Result<()> {
    for (id, d) in timeline.devices() {
        let mut arrival: std::collections::BTreeMap<usize, f64> = Default::default();
        for e in d.events.iter().filter(|e| e.kind == EventKind::Recv && e.tag.contains(":gather")) {
            if let Some(l) = layer_tag(&e.tag) {
                let a = arrival.entry(l).or_insert(f64::NEG_INFINITY);
                *a = a.max(e.end);
            }
        }
        for e in d.events.iter().filter(|e| e.kind == EventKind::Compute) {
            if let Some(l) = layer_tag(&e.tag) {
                if let Some(&a) = arrival.get(&l) {
                    if e.start < a {
                        return Err(Error::Contract(format!(
                            "device {id:?} computes `{}` at {} before its weights arrive at {a}",
                            e.tag, e.start
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Pairs `(l, gather of l + 1)` overlapping in time on some device.
pub fn prefetch_overlaps(timeline: &Timeline) -> Vec<usize> {
    let mut out = std::collections::BTreeSet::new();
    for (_, d) in timeline.devices() {
        for c in d.events.iter().filter(|e| e.kind == EventKind::Compute) {
            let Some(l) = layer_tag(&c.tag) else { continue };
            let next = format!("layer{}:gather", l + 1);
            if d.events.iter().any(|g| g.kind != EventKind::Compute && g.tag.starts_with(&next) && g.start < c.end && c.start < g.end) {
                out.insert(l);
            }
        }
    }
    out.into_iter().collect()
}

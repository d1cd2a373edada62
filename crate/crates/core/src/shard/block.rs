//! The parallel encoder block executed over the model ring.
//!
//! Layout: the fused in-projection (QKV plus MLP-in, `m = 3w + mlp`, `n = w`)
//! is row-sharded with its rows permuted so device `i` holds the query, key
//! and value rows of heads block `i` followed by MLP-in rows block `i`.
//! Attention is then local to each device. The fused out-projection
//! (attention-out plus MLP-out, `m = w`, `n = w + mlp`) is column-sharded
//! with matching column order, so its input chunk is what the device just
//! produced. Activations stay split by width between blocks.
//!
//! The pre-norm needs one scalar per token from every device; the partial
//! sums of squares are exchanged with a ring all-gather.

use std::cell::Cell;

use super::matrix::{ShardMode, ShardedMatrix, ShardedVector, VectorSpace};
use super::matvec::{col_sharded_matvec_on, linear_comm_floats, row_sharded_matvec_on};
use crate::error::{dim_err, Error, Result};
use crate::mesh::collective::all_gather_on;
use crate::mesh::{MeshConfig, Ring, Timeline};
use crate::model::{
    attend, attend_backward, fused_in_kernel, fused_out_kernel, AttendCache, AttentionState, BlockParams,
    BlockRunner, VitConfig,
};
use crate::tensor::{
    add_row_vector, concat_cols, concat_rows, gather_rows, gelu, gelu_backward, matmul_nt, transpose, Tensor,
};

/// Original row indices of the fused in-projection `Aᵀ` in device order.
pub fn in_proj_order(w: usize, mlp: usize, k: usize) -> Vec<usize> {
    let (wb, mb) = (w / k, mlp / k);
    (0..k)
        .flat_map(|i| {
            (0..3)
                .flat_map(move |s| (s * w + i * wb)..(s * w + (i + 1) * wb))
                .chain((3 * w + i * mb)..(3 * w + (i + 1) * mb))
        })
        .collect()
}

/// Original column indices of the fused out-projection in device order.
pub fn out_proj_order(w: usize, mlp: usize, k: usize) -> Vec<usize> {
    let (wb, mb) = (w / k, mlp / k);
    (0..k).flat_map(|i| (i * wb..(i + 1) * wb).chain((w + i * mb)..(w + (i + 1) * mb))).collect()
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (pos, &orig) in perm.iter().enumerate() {
        inv[orig] = pos;
    }
    inv
}

fn permute_cols(a: &Tensor, order: &[usize]) -> Result<Tensor> {
    transpose(&gather_rows(&transpose(a)?, order)?)
}

fn split_vec(v: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    let n = v.len();
    if n % k != 0 {
        return Err(dim_err!("length {n} not divisible by k = {k}"));
    }
    (0..k).map(|i| Tensor::new(&[n / k], v.data()[i * n / k..(i + 1) * n / k].to_vec())).collect()
}

fn join_vec(parts: &[Tensor]) -> Result<Tensor> {
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&[data.len()], data)
}

/// Per-row sums of a feature-major block, i.e. sums over tokens.
fn sum_over_tokens(t: &Tensor) -> Result<Tensor> {
    Tensor::new(&[t.rows()], (0..t.rows()).map(|r| t.row(r).iter().sum()).collect())
}

/// Block parameters distributed over `k` devices.
#[derive(Debug, Clone)]
pub struct ShardedBlock {
    k: usize,
    width: usize,
    mlp: usize,
    heads: usize,
    ln_gain: Vec<Tensor>,
    in_proj: ShardedMatrix,
    qk_gains: Option<(Vec<Tensor>, Vec<Tensor>)>,
    b_mlp_in: Vec<Tensor>,
    out_proj: ShardedMatrix,
    b_out: Vec<Tensor>,
}

impl ShardedBlock {
    pub fn new(bp: &BlockParams, cfg: &VitConfig, k: usize) -> Result<Self> {
        if !cfg.parallel_block {
            return Err(Error::Contract("sharded execution requires the parallel block form".into()));
        }
        let (w, mlp, heads) = (cfg.width, cfg.mlp_dim, cfg.num_heads);
        if k == 0 || w % k != 0 || mlp % k != 0 || heads % k != 0 {
            return Err(dim_err!("width {w}, mlp {mlp} and heads {heads} must all divide by k = {k}"));
        }
        let a_in = gather_rows(&transpose(&fused_in_kernel(bp)?)?, &in_proj_order(w, mlp, k))?;
        let a_out = permute_cols(&transpose(&fused_out_kernel(bp)?)?, &out_proj_order(w, mlp, k))?;
        let qk_gains = if cfg.qk_norm {
            match (&bp.q_gain, &bp.k_gain) {
                (Some(q), Some(g)) => {
                    let hb = heads / k;
                    let split = |t: &Tensor| -> Result<Vec<Tensor>> {
                        (0..k).map(|i| t.slice_rows(i * hb, (i + 1) * hb)).collect()
                    };
                    Some((split(q)?, split(g)?))
                }
                _ => return Err(Error::Contract("qk_norm is on but the block has no q/k gains".into())),
            }
        } else {
            None
        };
        Ok(ShardedBlock {
            k,
            width: w,
            mlp,
            heads,
            ln_gain: split_vec(&bp.ln_gain, k)?,
            in_proj: ShardedMatrix::shard(&a_in, ShardMode::Row, k)?,
            qk_gains,
            b_mlp_in: split_vec(&bp.b_mlp_in, k)?,
            out_proj: ShardedMatrix::shard(&a_out, ShardMode::Column, k)?,
            b_out: split_vec(&bp.b_out, k)?,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn in_proj(&self) -> &ShardedMatrix {
        &self.in_proj
    }

    pub fn out_proj(&self) -> &ShardedMatrix {
        &self.out_proj
    }

    /// Reassembles dense block parameters; inverse of `new`.
    pub fn to_params(&self) -> Result<BlockParams> {
        let (w, mlp, k) = (self.width, self.mlp, self.k);
        let a_in = gather_rows(&self.in_proj.assemble()?, &inverse(&in_proj_order(w, mlp, k)))?;
        let a_out = permute_cols(&self.out_proj.assemble()?, &inverse(&out_proj_order(w, mlp, k)))?;
        let (q_gain, k_gain) = match &self.qk_gains {
            Some((q, g)) => (
                Some(concat_rows(&q.iter().collect::<Vec<_>>())?),
                Some(concat_rows(&g.iter().collect::<Vec<_>>())?),
            ),
            None => (None, None),
        };
        dense_params(&a_in, &a_out, w, self.ln_gain.clone(), q_gain, k_gain, &self.b_mlp_in, &self.b_out)
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_params(
    a_in: &Tensor,
    a_out: &Tensor,
    w: usize,
    ln_gain: Vec<Tensor>,
    q_gain: Option<Tensor>,
    k_gain: Option<Tensor>,
    b_mlp_in: &[Tensor],
    b_out: &[Tensor],
) -> Result<BlockParams> {
    let w_in = transpose(a_in)?;
    let w_out = transpose(a_out)?;
    Ok(BlockParams {
        ln_gain: join_vec(&ln_gain)?,
        ln2_gain: None,
        w_qkv: w_in.slice_cols(0, 3 * w)?,
        q_gain,
        k_gain,
        w_attn_out: w_out.slice_rows(0, w)?,
        w_mlp_in: w_in.slice_cols(3 * w, w_in.cols())?,
        b_mlp_in: join_vec(b_mlp_in)?,
        w_mlp_out: w_out.slice_rows(w, w_out.rows())?,
        b_out: join_vec(b_out)?,
    })
}

/// Communication and memory accounting for one sharded block pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockReport {
    /// Floats each device sends for the two sharded linears.
    pub linear_comm_floats: u64,
    /// Floats each device sends exchanging per-token norm statistics.
    pub norm_comm_floats: u64,
    pub makespan: f64,
    /// Linear-output floats resident on one device.
    pub activation_floats_per_device: usize,
    /// Linear-output floats of the unsharded block.
    pub unsharded_activation_floats: usize,
}

/// Per-device state retained by the forward for the backward.
#[derive(Debug, Clone)]
pub struct ShardedBlockCache {
    block: ShardedBlock,
    x: ShardedVector,
    /// Normalized input blocks; after the gather every device holds all.
    n: ShardedVector,
    rms: Vec<f64>,
    attend: Vec<AttendCache>,
    /// MLP pre-activations (bias included), `[S, mlp/k]` per device.
    mlp_pre: Vec<Tensor>,
    /// Out-projection inputs, `[(w + mlp)/k, S]` per device.
    u: ShardedVector,
}

/// Exchanges one scalar per token from every device; all devices sum the
/// contributions in ring order so they agree bit-for-bit.
fn token_all_sum(
    partials: Vec<Tensor>,
    mesh: &MeshConfig,
    ring: &Ring,
    tl: &mut Timeline,
    start: f64,
    tag: &str,
) -> Result<(Vec<f64>, u64, f64)> {
    let s = partials[0].len();
    let partials: Vec<Tensor> = partials.into_iter().map(|p| p.reshape(&[1, s])).collect::<Result<_>>()?;
    let (gathered, rep) = all_gather_on(ring, &partials, mesh, tl, start, tag)?;
    let g = &gathered[0];
    let sums = (0..s).map(|t| (0..ring.len()).map(|j| g.at(j, t)).sum()).collect();
    Ok((sums, rep.per_device_comm_floats, start + rep.makespan))
}

fn attention_flops(s: usize, w: usize, k: usize) -> f64 {
    4.0 * (s * s) as f64 * (w / k) as f64
}

fn forward_impl(
    x: &ShardedVector,
    blk: &ShardedBlock,
    mesh: &MeshConfig,
    ring: &Ring,
    tl: &mut Timeline,
    retain: bool,
) -> Result<(ShardedVector, Vec<AttentionState>, BlockReport, Option<ShardedBlockCache>)> {
    let k = blk.k;
    if ring.len() != k || x.k() != k {
        return Err(dim_err!("block over {k} devices, ring of {}, input over {}", ring.len(), x.k()));
    }
    let (w, mlp) = (blk.width, blk.mlp);
    if x.len() != w {
        return Err(dim_err!("input width {} for a block of width {w}", x.len()));
    }
    let s = x.batch();
    let ss: Vec<Tensor> = x
        .blocks()
        .iter()
        .map(|b| {
            let bt = transpose(b)?;
            Tensor::new(&[s], (0..s).map(|t| bt.row(t).iter().map(|v| v * v).sum()).collect())
        })
        .collect::<Result<_>>()?;
    let (sum_sq, norm_comm, t1) = token_all_sum(ss, mesh, ring, tl, 0.0, "norm/stats")?;
    let rms: Vec<f64> = sum_sq.iter().map(|v| (v / w as f64).sqrt()).collect();
    if let Some(t) = rms.iter().position(|r| *r == 0.0) {
        return Err(Error::Degenerate(format!("rms_norm row {t} is all zeros")));
    }
    let n_blocks: Vec<Tensor> = x
        .blocks()
        .iter()
        .zip(&blk.ln_gain)
        .map(|(xb, g)| {
            let mut nb = xb.clone();
            for l in 0..nb.rows() {
                let gl = g.data()[l];
                for (v, r) in nb.row_mut(l).iter_mut().zip(&rms) {
                    *v = gl * (*v / r);
                }
            }
            nb
        })
        .collect();
    let n = ShardedVector::from_blocks(n_blocks, VectorSpace::Input)?;
    let (h, in_rep) = row_sharded_matvec_on(&blk.in_proj, &n, mesh, ring, tl, t1, "in_proj")?;
    let t2 = t1 + in_rep.makespan;
    let t3 = t2 + mesh.compute_time(attention_flops(s, w, k));
    let (wb, mb, hb) = (w / k, mlp / k, blk.heads / k);
    let mut states = Vec::with_capacity(k);
    let mut caches = Vec::with_capacity(k);
    let mut mlp_pre = Vec::with_capacity(k);
    let mut u_blocks = Vec::with_capacity(k);
    for i in 0..k {
        let ht = transpose(h.block(i))?;
        let gains = blk.qk_gains.as_ref().map(|(q, g)| (&q[i], &g[i]));
        let (o, state, cache) = attend(
            &ht.slice_cols(0, wb)?,
            &ht.slice_cols(wb, 2 * wb)?,
            &ht.slice_cols(2 * wb, 3 * wb)?,
            hb,
            gains,
            retain,
        )?;
        tl.compute(ring.member(i), t2, t3, attention_flops(s, w, k), "attention");
        let pre = add_row_vector(&ht.slice_cols(3 * wb, 3 * wb + mb)?, &blk.b_mlp_in[i])?;
        u_blocks.push(transpose(&concat_cols(&[&o, &gelu(&pre)])?)?);
        states.push(state);
        caches.push(cache);
        mlp_pre.push(pre);
    }
    let u = ShardedVector::from_blocks(u_blocks, VectorSpace::Input)?;
    let (y, out_rep) = col_sharded_matvec_on(&blk.out_proj, &u, mesh, ring, tl, t3, "out_proj")?;
    let mut out = Vec::with_capacity(k);
    for (j, yb) in y.blocks().iter().enumerate() {
        let mut yb = yb.clone();
        yb.add_assign(x.block(j))?;
        for l in 0..yb.rows() {
            let b = blk.b_out[j].data()[l];
            for v in yb.row_mut(l) {
                *v += b;
            }
        }
        out.push(yb);
    }
    let report = BlockReport {
        linear_comm_floats: in_rep.per_device_comm_floats + out_rep.per_device_comm_floats,
        norm_comm_floats: norm_comm,
        makespan: t3 + out_rep.makespan,
        activation_floats_per_device: ((3 * w + mlp) / k) * s + (w / k) * s,
        unsharded_activation_floats: (3 * w + mlp) * s + w * s,
    };
    let cache = retain.then(|| ShardedBlockCache {
        block: blk.clone(),
        x: x.clone(),
        n,
        rms,
        attend: caches,
        mlp_pre,
        u,
    });
    Ok((ShardedVector::from_blocks(out, VectorSpace::Input)?, states, report, cache))
}

/// Concatenates per-device attention states (heads blocks in device order).
pub fn merge_states(states: &[AttentionState]) -> Result<AttentionState> {
    let cat = |f: &dyn Fn(&AttentionState) -> &Tensor| -> Result<Tensor> {
        let first = f(&states[0]);
        let mut shape = first.shape().to_vec();
        shape[0] *= states.len();
        Tensor::new(&shape, states.iter().flat_map(|s| f(s).data().iter().copied()).collect())
    };
    Ok(AttentionState {
        logits: cat(&|s| &s.logits)?,
        weights: cat(&|s| &s.weights)?,
        entropy: cat(&|s| &s.entropy)?,
        max_abs_logit: states.iter().fold(0.0, |m, s| m.max(s.max_abs_logit)),
    })
}

/// The parallel block on the model ring of row 0. `x` holds width blocks of
/// shape `(w/k, S)`, tokens as columns; so does the result.
pub fn sharded_block_forward(
    x: &ShardedVector,
    blk: &ShardedBlock,
    mesh: &MeshConfig,
) -> Result<(ShardedVector, BlockReport)> {
    sharded_block_forward_timed(x, blk, mesh).map(|(y, r, _)| (y, r))
}

/// As `sharded_block_forward`, also returning the event timeline.
pub fn sharded_block_forward_timed(
    x: &ShardedVector,
    blk: &ShardedBlock,
    mesh: &MeshConfig,
) -> Result<(ShardedVector, BlockReport, Timeline)> {
    mesh.validate()?;
    let mut tl = Timeline::new();
    let (y, _, report, _) = forward_impl(x, blk, mesh, &mesh.model_ring(0), &mut tl, false)?;
    tl.validate()?;
    Ok((y, report, tl))
}

/// Gradients of the sharded block. Each linear's backward runs as the
/// transposed sharded matvec: the column-sharded out-projection becomes a
/// row-sharded product (gathering `dy`), the row-sharded in-projection a
/// column-sharded one (scatter-reducing `dn`). Returns the input gradient
/// and dense parameter gradients.
pub fn sharded_block_backward(
    dy: &ShardedVector,
    cache: &ShardedBlockCache,
    mesh: &MeshConfig,
) -> Result<(ShardedVector, BlockParams, BlockReport)> {
    let blk = &cache.block;
    let k = blk.k;
    let ring = mesh.model_ring(0);
    if ring.len() != k || dy.k() != k {
        return Err(dim_err!("backward over {} devices for a block over {k}", dy.k()));
    }
    let (w, mlp) = (blk.width, blk.mlp);
    let (wb, hb) = (w / k, blk.heads / k);
    let s = dy.batch();
    let mut tl = Timeline::new();
    let dy_in = ShardedVector::from_blocks(dy.blocks().to_vec(), VectorSpace::Input)?;

    let db_out: Vec<Tensor> = dy.blocks().iter().map(sum_over_tokens).collect::<Result<_>>()?;
    let out_t = transposed(&blk.out_proj)?;
    let (du, out_rep) = row_sharded_matvec_on(&out_t, &dy_in, mesh, &ring, &mut tl, 0.0, "out_proj/bwd")?;
    let dy_full = dy.concat()?;
    let mut d_out_blocks = Vec::with_capacity(k);
    let mut dh_blocks = Vec::with_capacity(k);
    let mut db_mlp = Vec::with_capacity(k);
    let mut dq_gain = Vec::with_capacity(k);
    let mut dk_gain = Vec::with_capacity(k);
    for i in 0..k {
        d_out_blocks.push(matmul_nt(&dy_full, cache.u.block(i))?);
        let dut = transpose(du.block(i))?;
        let d_hidden = dut.slice_cols(wb, dut.cols())?;
        let d_pre = gelu_backward(&cache.mlp_pre[i], &d_hidden)?;
        db_mlp.push(d_pre.sum_rows());
        let gains = blk.qk_gains.as_ref().map(|(q, g)| (&q[i], &g[i]));
        let ag = attend_backward(&dut.slice_cols(0, wb)?, &cache.attend[i], gains)?;
        if let (Some(a), Some(b)) = (ag.dq_gain, ag.dk_gain) {
            dq_gain.push(a);
            dk_gain.push(b);
        }
        dh_blocks.push(transpose(&concat_cols(&[&ag.dq, &ag.dk, &ag.dv, &d_pre])?)?);
    }
    debug_assert!(dq_gain.is_empty() || dq_gain[0].rows() == hb);
    let dh = ShardedVector::from_blocks(dh_blocks, VectorSpace::Input)?;
    let n_full = cache.n.concat()?;
    let d_in_blocks: Vec<Tensor> = dh.blocks().iter().map(|b| matmul_nt(b, &n_full)).collect::<Result<_>>()?;
    let in_t = transposed(&blk.in_proj)?;
    let t1 = out_rep.makespan;
    let (dn, in_rep) = col_sharded_matvec_on(&in_t, &dh, mesh, &ring, &mut tl, t1, "in_proj/bwd")?;

    // rms-norm backward: one more scalar per token from every device.
    let partial_dots: Vec<Tensor> = (0..k)
        .map(|j| {
            let (xb, dnb, g) = (cache.x.block(j), dn.block(j), &blk.ln_gain[j]);
            let mut c = vec![0.0; s];
            for l in 0..xb.rows() {
                let gl = g.data()[l];
                for (t, cv) in c.iter_mut().enumerate() {
                    *cv += gl * dnb.at(l, t) * xb.at(l, t);
                }
            }
            Tensor::new(&[s], c)
        })
        .collect::<Result<_>>()?;
    let t2 = t1 + in_rep.makespan;
    let (dots, norm_comm, t3) = token_all_sum(partial_dots, mesh, &ring, &mut tl, t2, "norm/stats/bwd")?;
    let mut dx = Vec::with_capacity(k);
    let mut d_ln = Vec::with_capacity(k);
    for j in 0..k {
        let (xb, dnb, g) = (cache.x.block(j), dn.block(j), &blk.ln_gain[j]);
        let mut dxb = Tensor::zeros(xb.shape());
        let mut dg = vec![0.0; xb.rows()];
        for l in 0..xb.rows() {
            let gl = g.data()[l];
            for t in 0..s {
                let r = cache.rms[t];
                let (xv, dv) = (xb.at(l, t), dnb.at(l, t));
                dg[l] += dv * xv / r;
                dxb.row_mut(l)[t] = gl * dv / r - xv * dots[t] / (w as f64 * r * r * r) + dy.block(j).at(l, t);
            }
        }
        dx.push(dxb);
        d_ln.push(Tensor::new(&[xb.rows()], dg)?);
    }
    tl.validate()?;

    let d_in = gather_rows(&concat_rows(&d_in_blocks.iter().collect::<Vec<_>>())?, &inverse(&in_proj_order(w, mlp, k)))?;
    let d_out = permute_cols(&concat_cols(&d_out_blocks.iter().collect::<Vec<_>>())?, &inverse(&out_proj_order(w, mlp, k)))?;
    let cat = |v: &[Tensor]| concat_rows(&v.iter().collect::<Vec<_>>());
    let (dqg, dkg) = if blk.qk_gains.is_some() { (Some(cat(&dq_gain)?), Some(cat(&dk_gain)?)) } else { (None, None) };
    let grads = dense_params(&d_in, &d_out, w, d_ln, dqg, dkg, &db_mlp, &db_out)?;
    let report = BlockReport {
        linear_comm_floats: out_rep.per_device_comm_floats + in_rep.per_device_comm_floats,
        norm_comm_floats: norm_comm,
        makespan: t3,
        activation_floats_per_device: 0,
        unsharded_activation_floats: 0,
    };
    Ok((ShardedVector::from_blocks(dx, VectorSpace::Input)?, grads, report))
}

/// `Aᵀ` for a row- or column-sharded `A`: row blocks become column blocks
/// and vice versa, with no data movement.
pub fn transposed(a: &ShardedMatrix) -> Result<ShardedMatrix> {
    let mode = match a.mode() {
        ShardMode::Row => ShardMode::Column,
        ShardMode::Column => ShardMode::Row,
        ShardMode::Replicated => ShardMode::Replicated,
    };
    let blocks = a.blocks().iter().map(transpose).collect::<Result<Vec<_>>>()?;
    let (m, n) = a.full_shape();
    ShardedMatrix::from_blocks((n, m), mode, blocks)
}

/// Per-device linear comm of one sharded block forward over `s` tokens.
pub fn block_comm_formula(w: usize, mlp: usize, k: usize, s: usize) -> u64 {
    (linear_comm_floats(ShardMode::Row, 3 * w + mlp, w, k) + linear_comm_floats(ShardMode::Column, w, w + mlp, k))
        * s as u64
}

/// Executes encoder blocks over a `k`-device model ring. Activations enter
/// and leave dense; parameters are sharded on every call.
#[derive(Debug, Default)]
pub struct ShardedRunner {
    mesh: MeshConfig,
    comm: Cell<u64>,
}

impl ShardedRunner {
    pub fn new(k: usize) -> Self {
        ShardedRunner { mesh: MeshConfig::new(1, k), comm: Cell::new(0) }
    }

    pub fn with_mesh(mesh: MeshConfig) -> Self {
        ShardedRunner { mesh, comm: Cell::new(0) }
    }

    pub fn k(&self) -> usize {
        self.mesh.k
    }

    /// Floats sent per device by all passes so far.
    pub fn comm_floats(&self) -> u64 {
        self.comm.get()
    }

    fn shard_tokens(&self, x: &Tensor) -> Result<ShardedVector> {
        ShardedVector::split(&transpose(x)?, self.mesh.k, VectorSpace::Input)
    }
}

impl BlockRunner for ShardedRunner {
    type Cache = Option<ShardedBlockCache>;

    fn forward(
        &self,
        x: &Tensor,
        bp: &BlockParams,
        cfg: &VitConfig,
        retain: bool,
    ) -> Result<(Tensor, AttentionState, Option<ShardedBlockCache>)> {
        let blk = ShardedBlock::new(bp, cfg, self.mesh.k)?;
        let xs = self.shard_tokens(x)?;
        let mut tl = Timeline::new();
        let (y, states, report, cache) = forward_impl(&xs, &blk, &self.mesh, &self.mesh.model_ring(0), &mut tl, retain)?;
        self.comm.set(self.comm.get() + report.linear_comm_floats + report.norm_comm_floats);
        Ok((transpose(&y.concat()?)?, merge_states(&states)?, cache))
    }

    fn backward(
        &self,
        dy: &Tensor,
        _bp: &BlockParams,
        _cfg: &VitConfig,
        cache: &Option<ShardedBlockCache>,
    ) -> Result<(Tensor, BlockParams)> {
        let cache = cache.as_ref().ok_or_else(|| Error::State("sharded block activations were not retained".into()))?;
        let (dx, grads, report) = sharded_block_backward(&self.shard_tokens(dy)?, cache, &self.mesh)?;
        self.comm.set(self.comm.get() + report.linear_comm_floats + report.norm_comm_floats);
        Ok((transpose(&dx.concat()?)?, grads))
    }
}

//! Distributed single-query decoding over a sequence-sharded KV cache.
//!
//! [`tree_decode`] computes a local `(o, lse)` partial on every worker, then
//! allreduces the max of `lse`, rescales to a numerator/denominator pair and
//! allreduces their sum. [`ring_decode`] is the ring-attention baseline that
//! rotates K/V chunks around all workers.
//!
//! Both run numerically and through the cluster model. The communication
//! plan depends only on shapes, so [`model_decode`] produces the same cost
//! report without touching data.

use std::ops::Range;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::attention::{attention_chunk_partial, chunk_ranges, chunk_sizes, SoftmaxPartial};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::reduction::{Phase, ReductionSchedule, Round, Strategy, Tier, Transfer, TransferOp};
use crate::sim::{p2p_cost, simulate_schedule, simulate_schedule_traced, Algo, ComputeModel, CostAccount, MemoryTracker, Topology};

#[derive(Debug, Clone, PartialEq)]
pub struct KvShard {
    pub worker: usize,
    /// Key positions held, as a range of the full sequence.
    pub range: Range<usize>,
    pub k: Tensor,
    pub v: Tensor,
}

/// K/V cache split into contiguous, ordered chunks, one per worker.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedKvCache {
    pub shards: Vec<KvShard>,
    pub seq_len: usize,
}

impl ShardedKvCache {
    pub fn workers(&self) -> usize {
        self.shards.len()
    }

    pub fn chunk_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(|s| s.range.len()).collect()
    }

    pub fn reassemble(&self) -> Result<(Tensor, Tensor)> {
        let ks: Vec<Tensor> = self.shards.iter().map(|s| s.k.clone()).collect();
        let vs: Vec<Tensor> = self.shards.iter().map(|s| s.v.clone()).collect();
        Ok((Tensor::concat_axis2(&ks)?, Tensor::concat_axis2(&vs)?))
    }

    fn dims(&self) -> Result<(usize, usize, usize)> {
        let first = self.shards.first().ok_or_else(|| Error::arg("empty KV cache"))?;
        let [b, h, _, d] = first.k.dims4()?;
        Ok((b, h, d))
    }
}

/// Splits `k`, `v` (`[b, h, N, d_h]`) into `p` contiguous chunks; the first
/// `N % p` chunks hold one extra position.
pub fn shard_kv(k: &Tensor, v: &Tensor, p: usize) -> Result<ShardedKvCache> {
    if k.shape() != v.shape() {
        return Err(Error::shape(format!("k {:?} and v {:?} differ", k.shape(), v.shape())));
    }
    let [_, _, n, _] = k.dims4()?;
    if p == 0 || p > n {
        return Err(Error::arg(format!("cannot shard {n} positions over {p} workers")));
    }
    let shards = chunk_ranges(n, p)
        .into_iter()
        .enumerate()
        .map(|(worker, range)| {
            Ok(KvShard { worker, k: k.slice_axis2(range.start, range.end)?, v: v.slice_axis2(range.start, range.end)?, range })
        })
        .collect::<Result<_>>()?;
    Ok(ShardedKvCache { shards, seq_len: n })
}

/// How simulated workers execute their local work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Sequential,
    /// Workers run on the rayon pool between round barriers. Results are
    /// bitwise identical to `Sequential`.
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub allreduce: Strategy,
    pub exec: ExecMode,
    pub compute: ComputeModel,
    /// Multiplier on `q . k`.
    pub scale: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { allreduce: Strategy::Hierarchical, exec: ExecMode::Sequential, compute: ComputeModel::default(), scale: 1.0 }
    }
}

/// Problem extents of one decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeShape {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
}

impl DecodeShape {
    /// `d = heads * head_dim`.
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// One collective issued by a decode.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveRecord {
    pub label: &'static str,
    pub strategy: Option<Strategy>,
    pub payload_elems: usize,
    pub reduce_rounds: usize,
    pub rounds: usize,
    pub cost: CostAccount,
}

/// Whether local compute can hide one K/V chunk exchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapReport {
    pub feasible: bool,
    /// `compute_s / transfer_s`; infinite when there is nothing to transfer.
    pub ratio: f64,
    pub compute_s: f64,
    pub transfer_s: f64,
}

/// Compares the time to attend over one worker's chunk (`t` positions,
/// hidden size `d`) against the time to send that chunk's K and V to a
/// neighbour (intra-node when nodes have more than one GPU).
pub fn overlap_feasibility(topology: &Topology, b: u64, t: u64, d: u64, compute: &ComputeModel) -> OverlapReport {
    let elems = 2 * b * t * d;
    let compute_s = compute.time_s(elems);
    if elems == 0 {
        return OverlapReport { feasible: true, ratio: f64::INFINITY, compute_s, transfer_s: 0.0 };
    }
    let link = if topology.gpus_per_node > 1 { &topology.intra } else { &topology.inter };
    let transfer_s = p2p_cost(elems, link, topology.element_bytes);
    let ratio = compute_s / transfer_s;
    OverlapReport { feasible: ratio >= 1.0, ratio, compute_s, transfer_s }
}

/// Everything about a decode except its numeric output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeReport {
    pub algo: Algo,
    pub cost: CostAccount,
    /// Communication volume in the closed-form convention: tree reports the
    /// per-worker allreduce volume (aggregate / p), ring reports one
    /// rotation summed over all workers.
    pub comm_volume: Ratio<u64>,
    pub collectives: Vec<CollectiveRecord>,
    pub overlap: OverlapReport,
    /// Modelled local attention time on the busiest worker (not part of `cost.sim_time_s`).
    pub compute_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub output: Tensor,
    pub report: DecodeReport,
}

struct TreePlan {
    max_sched: ReductionSchedule,
    sum_sched: ReductionSchedule,
    memory: MemoryTracker,
}

fn plan_tree(shape: &DecodeShape, sizes: &[usize], topo: &Topology, strategy: Strategy) -> TreePlan {
    let (b, h, d) = (shape.batch as u64, shape.heads as u64, shape.hidden() as u64);
    let rows = shape.batch * shape.heads;
    let max_sched = ReductionSchedule::allreduce(strategy, topo.nodes, topo.gpus_per_node, rows);
    let sum_sched = ReductionSchedule::allreduce(strategy, topo.nodes, topo.gpus_per_node, rows * shape.head_dim + rows);

    let mut memory = MemoryTracker::new(sizes.len());
    for (w, &t) in sizes.iter().enumerate() {
        memory.alloc(w, "kv", 2 * b * t as u64 * d);
        memory.alloc(w, "q", b * d);
        // local kernel output
        memory.alloc(w, "o", b * d);
        memory.alloc(w, "lse", b * h);
        // max allreduce buffer
        memory.alloc(w, "m", b * h);
        // n = o * exp(lse - m), d = exp(lse - m), both in place
        memory.rename(w, "o", "num");
        memory.rename(w, "lse", "den");
        // sum allreduce and the final n / d are in place as well
    }
    TreePlan { max_sched, sum_sched, memory }
}

fn collective(label: &'static str, sched: &ReductionSchedule, topo: &Topology) -> Result<CollectiveRecord> {
    Ok(CollectiveRecord {
        label,
        strategy: sched.strategy,
        payload_elems: sched.payload_len,
        reduce_rounds: sched.reduce_rounds(),
        rounds: sched.round_count(),
        cost: simulate_schedule(sched, topo)?,
    })
}

fn tree_report(shape: &DecodeShape, sizes: &[usize], topo: &Topology, opts: &DecodeOptions) -> Result<(TreePlan, DecodeReport)> {
    let plan = plan_tree(shape, sizes, topo, opts.allreduce);
    let collectives = vec![collective("max(lse)", &plan.max_sched, topo)?, collective("sum(n, d)", &plan.sum_sched, topo)?];
    let mut cost = CostAccount::default();
    for c in &collectives {
        cost.then(&c.cost);
    }
    cost.peak_elems_per_worker = plan.memory.peak_max();
    let p = sizes.len() as u64;
    let comm_volume = Ratio::new(cost.elems_total(), p);
    let report = DecodeReport {
        algo: Algo::Tree,
        cost,
        comm_volume,
        collectives,
        overlap: overlap_for(shape, sizes, topo, opts),
        compute_s: compute_for(shape, sizes, opts),
    };
    Ok((plan, report))
}

fn overlap_for(shape: &DecodeShape, sizes: &[usize], topo: &Topology, opts: &DecodeOptions) -> OverlapReport {
    let t = sizes.iter().copied().max().unwrap_or(0) as u64;
    overlap_feasibility(topo, shape.batch as u64, t, shape.hidden() as u64, &opts.compute)
}

fn compute_for(shape: &DecodeShape, sizes: &[usize], opts: &DecodeOptions) -> f64 {
    let t = sizes.iter().copied().max().unwrap_or(0) as u64;
    opts.compute.time_s(2 * shape.batch as u64 * t * shape.hidden() as u64)
}

struct RingPlan {
    sched: ReductionSchedule,
    memory: MemoryTracker,
}

/// Round `r` (1-based) forwards, from worker `w`, the chunk that started on
/// worker `(w - r + 1) mod p`.
fn plan_ring(shape: &DecodeShape, sizes: &[usize]) -> Result<RingPlan> {
    let p = sizes.len();
    let (b, d) = (shape.batch as u64, shape.hidden() as u64);
    let chunk_elems = |t: usize| 2 * shape.batch * t * shape.hidden();
    let t_max = sizes.iter().copied().max().unwrap_or(0);
    let rounds = (1..p)
        .map(|r| Round {
            phase: Phase::Reduce,
            tier: Tier::Flat,
            transfers: (0..p)
                .map(|w| Transfer {
                    src: w,
                    dst: (w + 1) % p,
                    segment: 0..chunk_elems(sizes[(w + p + 1 - r) % p]),
                    op: TransferOp::Overwrite,
                })
                .collect(),
        })
        .collect();
    let sched = ReductionSchedule::from_rounds(p, chunk_elems(t_max), rounds)?;

    let mut memory = MemoryTracker::new(p);
    for (w, &t) in sizes.iter().enumerate() {
        memory.alloc(w, "kv", 2 * b * t as u64 * d);
        memory.alloc(w, "q", b * d);
        memory.alloc(w, "o", b * d);
        if p > 1 {
            // receive buffer, reused by every rotation (send-recv-replace)
            memory.alloc(w, "kv_recv", 2 * b * t_max as u64 * d);
        }
    }
    Ok(RingPlan { sched, memory })
}

fn ring_report(shape: &DecodeShape, sizes: &[usize], topo: &Topology, opts: &DecodeOptions) -> Result<DecodeReport> {
    let plan = plan_ring(shape, sizes)?;
    let (mut cost, trace) = simulate_schedule_traced(&plan.sched, topo)?;
    cost.peak_elems_per_worker = plan.memory.peak_max();
    let per_rotation = trace.first().map_or(0, |rc| rc.elems_intra + rc.elems_inter);
    Ok(DecodeReport {
        algo: Algo::Ring,
        cost,
        comm_volume: Ratio::from(per_rotation),
        collectives: vec![CollectiveRecord {
            label: "kv rotation",
            strategy: None,
            payload_elems: plan.sched.payload_len,
            reduce_rounds: plan.sched.reduce_rounds(),
            rounds: plan.sched.round_count(),
            cost,
        }],
        overlap: overlap_for(shape, sizes, topo, opts),
        compute_s: compute_for(shape, sizes, opts),
    })
}

fn check_topology(shape: &DecodeShape, topo: &Topology) -> Result<Vec<usize>> {
    topo.validate()?;
    let p = topo.workers();
    if p > shape.seq_len {
        return Err(Error::arg(format!("{p} workers but only {} positions", shape.seq_len)));
    }
    Ok(chunk_sizes(shape.seq_len, p))
}

/// Cost report of a decode without running the numerics.
pub fn model_decode(algo: Algo, shape: &DecodeShape, topo: &Topology, opts: &DecodeOptions) -> Result<DecodeReport> {
    let sizes = check_topology(shape, topo)?;
    match algo {
        Algo::Tree => Ok(tree_report(shape, &sizes, topo, opts)?.1),
        Algo::Ring => ring_report(shape, &sizes, topo, opts),
    }
}

fn check_inputs(q: &Tensor, cache: &ShardedKvCache, topo: &Topology) -> Result<DecodeShape> {
    let (b, h, d) = cache.dims()?;
    let [qb, qh, nq, qd] = q.dims4()?;
    if (qb, qh, qd) != (b, h, d) {
        return Err(Error::shape(format!("query {:?} does not match cache [{b}, {h}, *, {d}]", q.shape())));
    }
    if nq != 1 {
        return Err(Error::shape(format!("decoding takes a single query row, got {nq}")));
    }
    if cache.workers() != topo.workers() {
        return Err(Error::arg(format!(
            "cache has {} shards but the topology has {} workers",
            cache.workers(),
            topo.workers()
        )));
    }
    Ok(DecodeShape { batch: b, heads: h, seq_len: cache.seq_len, head_dim: d })
}

fn local_partials(q: &Tensor, cache: &ShardedKvCache, opts: &DecodeOptions) -> Result<Vec<SoftmaxPartial>> {
    let run = |s: &KvShard| attention_chunk_partial(q, &s.k, &s.v, opts.scale);
    match opts.exec {
        ExecMode::Sequential => cache.shards.iter().map(run).collect(),
        ExecMode::Threaded => cache.shards.par_iter().map(run).collect(),
    }
}

fn run_allreduce<F>(sched: &ReductionSchedule, bufs: &mut [Vec<f64>], exec: ExecMode, f: F) -> Result<()>
where
    F: Fn(&f64, &f64) -> f64 + Sync,
{
    match exec {
        ExecMode::Sequential => sched.execute(bufs, f),
        ExecMode::Threaded => sched.execute_parallel(bufs, f),
    }
}

/// Tree decoding of one query over a sharded cache.
pub fn tree_decode(q: &Tensor, cache: &ShardedKvCache, topo: &Topology, opts: &DecodeOptions) -> Result<DecodeResult> {
    let shape = check_inputs(q, cache, topo)?;
    let sizes = cache.chunk_sizes();
    let (plan, report) = tree_report(&shape, &sizes, topo, opts)?;
    let dt = q.dtype();
    let rows = shape.batch * shape.heads;
    let d = shape.head_dim;

    let partials = local_partials(q, cache, opts)?;

    let mut m_bufs: Vec<Vec<f64>> = partials.iter().map(|p| p.lse.data().to_vec()).collect();
    run_allreduce(&plan.max_sched, &mut m_bufs, opts.exec, |a, b| a.max(*b))?;

    let mut nd_bufs = partials
        .iter()
        .zip(&m_bufs)
        .map(|(p, m)| {
            let (mut num, den) = p.numerator_denominator(m)?;
            num.extend(den);
            Ok(num)
        })
        .collect::<Result<Vec<_>>>()?;
    run_allreduce(&plan.sum_sched, &mut nd_bufs, opts.exec, |a, b| dt.round(a + b))?;

    let (num, den) = nd_bufs[0].split_at(rows * d);
    let mut output = Tensor::zeros(vec![shape.batch, shape.heads, 1, d], dt);
    for (row, (dst, src)) in output.data_mut().chunks_mut(d).zip(num.chunks(d)).enumerate() {
        for (o, &x) in dst.iter_mut().zip(src) {
            *o = dt.round(x / den[row]);
        }
    }
    Ok(DecodeResult { output, report })
}

/// Ring-attention decoding: `p - 1` rotations of K/V chunks, each folded
/// into the worker's running partial. Worker 0's result is returned.
pub fn ring_decode(q: &Tensor, cache: &ShardedKvCache, topo: &Topology, opts: &DecodeOptions) -> Result<DecodeResult> {
    let shape = check_inputs(q, cache, topo)?;
    let sizes = cache.chunk_sizes();
    let report = ring_report(&shape, &sizes, topo, opts)?;
    let p = cache.workers();

    let fold = |w: usize| -> Result<SoftmaxPartial> {
        let own = &cache.shards[w];
        let mut acc = attention_chunk_partial(q, &own.k, &own.v, opts.scale)?;
        for r in 1..p {
            let origin = &cache.shards[(w + p - r) % p];
            acc = acc.merge(&attention_chunk_partial(q, &origin.k, &origin.v, opts.scale)?)?;
        }
        Ok(acc)
    };
    let finals: Vec<SoftmaxPartial> = match opts.exec {
        ExecMode::Sequential => (0..p).map(fold).collect::<Result<_>>()?,
        ExecMode::Threaded => (0..p).into_par_iter().map(fold).collect::<Result<_>>()?,
    };
    let output = finals.into_iter().next().expect("at least one worker").o;
    Ok(DecodeResult { output, report })
}

pub fn decode(algo: Algo, q: &Tensor, cache: &ShardedKvCache, topo: &Topology, opts: &DecodeOptions) -> Result<DecodeResult> {
    match algo {
        Algo::Tree => tree_decode(q, cache, topo, opts),
        Algo::Ring => ring_decode(q, cache, topo, opts),
    }
}

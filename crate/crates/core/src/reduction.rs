//! Associative reductions over `p` participants as explicit schedules.
//!
//! A [`ReductionSchedule`] is plain data: synchronous rounds of
//! point-to-point transfers, each moving a contiguous segment of a
//! participant's buffer and either combining it into the receiver or
//! overwriting the receiver's copy. The same schedule drives numeric
//! execution ([`ReductionSchedule::execute`]) and the cost simulator.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::chunk_ranges;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Binary tree reduce to participant 0 (plus mirrored broadcast for allreduce).
    TreeBinary,
    /// Reduce-scatter followed by allgather around a ring.
    Ring,
    /// Intra-node ring, inter-node binary tree, then the mirrored phases.
    Hierarchical,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tree" | "tree_binary" => Ok(Strategy::TreeBinary),
            "ring" => Ok(Strategy::Ring),
            "hier" | "hierarchical" => Ok(Strategy::Hierarchical),
            other => Err(Error::arg(format!("unknown allreduce strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::TreeBinary => "tree",
            Strategy::Ring => "ring",
            Strategy::Hierarchical => "hier",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Reduce,
    Broadcast,
}

/// Which group of participants a round runs over. Only meaningful for
/// hierarchical schedules; flat schedules use `Flat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Flat,
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferOp {
    /// `dst[seg] = combine(left, right)`; the received segment is the left
    /// operand iff `received_left`.
    Combine { received_left: bool },
    /// `dst[seg] = src[seg]`.
    Overwrite,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub src: usize,
    pub dst: usize,
    pub segment: Range<usize>,
    pub op: TransferOp,
}

impl Transfer {
    pub fn elems(&self) -> usize {
        self.segment.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Round {
    pub phase: Phase,
    pub tier: Tier,
    pub transfers: Vec<Transfer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReductionSchedule {
    /// `None` for hand-built schedules.
    pub strategy: Option<Strategy>,
    pub participants: usize,
    /// Elements in each participant's buffer.
    pub payload_len: usize,
    pub rounds: Vec<Round>,
}

/// ceil(log2(p)), with 0 for p <= 1.
pub fn ceil_log2(p: usize) -> usize {
    if p <= 1 {
        0
    } else {
        (usize::BITS - (p - 1).leading_zeros()) as usize
    }
}

/// Binary-tree reduce rounds over `members`, rooted at `members[0]`.
/// Round `r` pairs position `i` (a multiple of `2^(r+1)`) with `i + 2^r`;
/// an unpaired position carries its value forward.
fn tree_reduce_rounds(members: &[usize], segment: &Range<usize>) -> Vec<Vec<Transfer>> {
    let mut rounds = Vec::new();
    let mut stride = 1;
    while stride < members.len() {
        let transfers = (0..members.len())
            .step_by(2 * stride)
            .filter(|i| i + stride < members.len())
            .map(|i| Transfer {
                src: members[i + stride],
                dst: members[i],
                segment: segment.clone(),
                op: TransferOp::Combine { received_left: false },
            })
            .collect();
        rounds.push(transfers);
        stride *= 2;
    }
    rounds
}

fn mirror_as_broadcast(reduce: &[Vec<Transfer>]) -> Vec<Vec<Transfer>> {
    reduce
        .iter()
        .rev()
        .map(|round| {
            round
                .iter()
                .map(|t| Transfer { src: t.dst, dst: t.src, segment: t.segment.clone(), op: TransferOp::Overwrite })
                .collect()
        })
        .collect()
}

/// Ring reduce-scatter over `ring`, splitting `segments` evenly. After it,
/// ring position `i` holds the reduced segment `(i + 1) % g`.
fn ring_reduce_scatter(ring: &[usize], segments: &[Range<usize>]) -> Vec<Vec<Transfer>> {
    let g = ring.len();
    (0..g.saturating_sub(1))
        .map(|r| {
            (0..g)
                .map(|i| Transfer {
                    src: ring[i],
                    dst: ring[(i + 1) % g],
                    segment: segments[(i + g - r) % g].clone(),
                    op: TransferOp::Combine { received_left: true },
                })
                .collect()
        })
        .collect()
}

fn ring_allgather(ring: &[usize], segments: &[Range<usize>]) -> Vec<Vec<Transfer>> {
    let g = ring.len();
    (0..g.saturating_sub(1))
        .map(|r| {
            (0..g)
                .map(|i| Transfer {
                    src: ring[i],
                    dst: ring[(i + 1) % g],
                    segment: segments[(i + 1 + g - r) % g].clone(),
                    op: TransferOp::Overwrite,
                })
                .collect()
        })
        .collect()
}

fn tag(rounds: Vec<Vec<Transfer>>, phase: Phase, tier: Tier) -> impl Iterator<Item = Round> {
    rounds.into_iter().map(move |transfers| Round { phase, tier, transfers })
}

/// Merges per-group round lists that run concurrently into shared rounds.
fn zip_rounds(groups: Vec<Vec<Vec<Transfer>>>) -> Vec<Vec<Transfer>> {
    let depth = groups.iter().map(Vec::len).max().unwrap_or(0);
    (0..depth)
        .map(|r| groups.iter().filter_map(|g| g.get(r)).flatten().cloned().collect())
        .collect()
}

impl ReductionSchedule {
    /// Binary-tree reduce to participant 0; no broadcast.
    pub fn tree_reduce(p: usize, payload_len: usize) -> Self {
        let members: Vec<usize> = (0..p).collect();
        let rounds = tag(tree_reduce_rounds(&members, &(0..payload_len)), Phase::Reduce, Tier::Flat).collect();
        ReductionSchedule { strategy: Some(Strategy::TreeBinary), participants: p, payload_len, rounds }
    }

    /// Binary-tree reduce followed by the mirrored broadcast.
    pub fn tree_allreduce(p: usize, payload_len: usize) -> Self {
        let members: Vec<usize> = (0..p).collect();
        let reduce = tree_reduce_rounds(&members, &(0..payload_len));
        let bcast = mirror_as_broadcast(&reduce);
        let rounds = tag(reduce, Phase::Reduce, Tier::Flat)
            .chain(tag(bcast, Phase::Broadcast, Tier::Flat))
            .collect();
        ReductionSchedule { strategy: Some(Strategy::TreeBinary), participants: p, payload_len, rounds }
    }

    /// Bandwidth-optimal ring: `p - 1` reduce-scatter rounds and `p - 1`
    /// allgather rounds, each moving one of `p` near-equal segments.
    pub fn ring_allreduce(p: usize, payload_len: usize) -> Self {
        let ring: Vec<usize> = (0..p).collect();
        let segs = chunk_ranges(payload_len, p);
        let rounds = tag(ring_reduce_scatter(&ring, &segs), Phase::Reduce, Tier::Flat)
            .chain(tag(ring_allgather(&ring, &segs), Phase::Broadcast, Tier::Flat))
            .collect();
        ReductionSchedule { strategy: Some(Strategy::Ring), participants: p, payload_len, rounds }
    }

    /// Two-tier allreduce over `nodes x gpus_per_node` participants placed
    /// contiguously (participant `w` lives on node `w / gpus_per_node`).
    ///
    /// 1. ring reduce-scatter inside each node (`g - 1` rounds);
    /// 2. for each local rank, a binary tree across nodes on the segment that
    ///    rank owns (`ceil(log2(nodes))` rounds, all local ranks in parallel);
    /// 3. the mirrored tree broadcast;
    /// 4. ring allgather inside each node.
    pub fn hierarchical_allreduce(nodes: usize, gpus_per_node: usize, payload_len: usize) -> Self {
        let g = gpus_per_node;
        let segs = chunk_ranges(payload_len, g);
        let node_rings: Vec<Vec<usize>> = (0..nodes).map(|n| (n * g..(n + 1) * g).collect()).collect();

        let intra_rs = zip_rounds(node_rings.iter().map(|r| ring_reduce_scatter(r, &segs)).collect());
        let inter_trees: Vec<Vec<Vec<Transfer>>> = (0..g)
            .map(|l| {
                let members: Vec<usize> = (0..nodes).map(|n| n * g + l).collect();
                tree_reduce_rounds(&members, &segs[(l + 1) % g])
            })
            .collect();
        let inter_reduce = zip_rounds(inter_trees);
        let inter_bcast = mirror_as_broadcast(&inter_reduce);
        let intra_ag = zip_rounds(node_rings.iter().map(|r| ring_allgather(r, &segs)).collect());

        let rounds = tag(intra_rs, Phase::Reduce, Tier::Intra)
            .chain(tag(inter_reduce, Phase::Reduce, Tier::Inter))
            .chain(tag(inter_bcast, Phase::Broadcast, Tier::Inter))
            .chain(tag(intra_ag, Phase::Broadcast, Tier::Intra))
            .collect();
        ReductionSchedule {
            strategy: Some(Strategy::Hierarchical),
            participants: nodes * g,
            payload_len,
            rounds,
        }
    }

    pub fn allreduce(strategy: Strategy, nodes: usize, gpus_per_node: usize, payload_len: usize) -> Self {
        let p = nodes * gpus_per_node;
        match strategy {
            Strategy::TreeBinary => Self::tree_allreduce(p, payload_len),
            Strategy::Ring => Self::ring_allreduce(p, payload_len),
            Strategy::Hierarchical => Self::hierarchical_allreduce(nodes, gpus_per_node, payload_len),
        }
    }

    /// A hand-built schedule, validated against `participants` and `payload_len`.
    pub fn from_rounds(participants: usize, payload_len: usize, rounds: Vec<Round>) -> Result<Self> {
        let s = ReductionSchedule { strategy: None, participants, payload_len, rounds };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.rounds.iter().flat_map(|r| &r.transfers) {
            for idx in [t.src, t.dst] {
                if idx >= self.participants {
                    return Err(Error::ParticipantOutOfRange { index: idx, participants: self.participants });
                }
            }
            if t.segment.end > self.payload_len || t.segment.start > t.segment.end {
                return Err(Error::arg(format!(
                    "segment {:?} outside payload of {}",
                    t.segment, self.payload_len
                )));
            }
        }
        Ok(())
    }

    pub fn round_count(&self) -> usize {
        self.rounds.len()
    }

    pub fn count_rounds(&self, phase: Phase, tier: Option<Tier>) -> usize {
        self.rounds
            .iter()
            .filter(|r| r.phase == phase && tier.map_or(true, |t| r.tier == t))
            .count()
    }

    pub fn reduce_rounds(&self) -> usize {
        self.count_rounds(Phase::Reduce, None)
    }

    /// Elements moved by every transfer, summed.
    pub fn total_elems(&self) -> usize {
        self.rounds.iter().flat_map(|r| &r.transfers).map(Transfer::elems).sum()
    }

    /// Runs the schedule over per-participant buffers. All sends in a round
    /// read the buffers as they were at the start of that round.
    pub fn execute<T, F>(&self, buffers: &mut [Vec<T>], combine: F) -> Result<()>
    where
        T: Clone,
        F: Fn(&T, &T) -> T,
    {
        self.check_buffers(buffers)?;
        for round in &self.rounds {
            let payloads: Vec<Vec<T>> =
                round.transfers.iter().map(|t| buffers[t.src][t.segment.clone()].to_vec()).collect();
            for (t, payload) in round.transfers.iter().zip(payloads) {
                apply(t, &payload, &mut buffers[t.dst], &combine);
            }
        }
        Ok(())
    }

    /// Same as [`execute`](Self::execute) but evaluates the transfers of each
    /// round on the rayon pool. Operand order is fixed by the schedule, so
    /// the result is bitwise identical to sequential execution.
    pub fn execute_parallel<T, F>(&self, buffers: &mut [Vec<T>], combine: F) -> Result<()>
    where
        T: Clone + Send + Sync,
        F: Fn(&T, &T) -> T + Sync,
    {
        self.check_buffers(buffers)?;
        for round in &self.rounds {
            let snapshot: &[Vec<T>] = buffers;
            let results: Vec<Vec<T>> = round
                .transfers
                .par_iter()
                .map(|t| {
                    let mut seg = snapshot[t.dst][t.segment.clone()].to_vec();
                    let payload = &snapshot[t.src][t.segment.clone()];
                    apply_segment(t.op, payload, &mut seg, &combine);
                    seg
                })
                .collect();
            for (t, seg) in round.transfers.iter().zip(results) {
                buffers[t.dst][t.segment.clone()].clone_from_slice(&seg);
            }
        }
        Ok(())
    }

    fn check_buffers<T>(&self, buffers: &[Vec<T>]) -> Result<()> {
        if buffers.len() != self.participants {
            return Err(Error::arg(format!(
                "{} buffers for a schedule over {} participants",
                buffers.len(),
                self.participants
            )));
        }
        if let Some(b) = buffers.iter().find(|b| b.len() != self.payload_len) {
            return Err(Error::arg(format!("buffer of {} elements, schedule expects {}", b.len(), self.payload_len)));
        }
        self.validate()
    }
}

fn apply<T: Clone, F: Fn(&T, &T) -> T>(t: &Transfer, payload: &[T], dst: &mut [T], combine: &F) {
    apply_segment(t.op, payload, &mut dst[t.segment.clone()], combine);
}

fn apply_segment<T: Clone, F: Fn(&T, &T) -> T>(op: TransferOp, payload: &[T], dst: &mut [T], combine: &F) {
    match op {
        TransferOp::Overwrite => dst.clone_from_slice(payload),
        TransferOp::Combine { received_left } => {
            for (d, r) in dst.iter_mut().zip(payload) {
                *d = if received_left { combine(r, d) } else { combine(d, r) };
            }
        }
    }
}

/// Outcome of a scalar reduction: the value and the rounds executed.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduced<T> {
    pub value: T,
    pub rounds: usize,
}

fn singleton_buffers<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    items.iter().map(|x| vec![x.clone()]).collect()
}

/// Folds `items` with a fixed binary tree (neighbours paired, halving each
/// round, lower index on the left). Empty input gives `identity` in 0 rounds.
pub fn tree_reduce<T: Clone, F: Fn(&T, &T) -> T>(items: &[T], combine: F, identity: T) -> Reduced<T> {
    if items.is_empty() {
        return Reduced { value: identity, rounds: 0 };
    }
    let sched = ReductionSchedule::tree_reduce(items.len(), 1);
    let mut bufs = singleton_buffers(items);
    sched.execute(&mut bufs, combine).expect("schedule built for these buffers");
    Reduced { value: bufs.swap_remove(0).swap_remove(0), rounds: sched.round_count() }
}

/// Ring allreduce of one value per participant; returns participant 0's
/// result and the `2(p - 1)` rounds executed.
pub fn ring_allreduce<T: Clone, F: Fn(&T, &T) -> T>(items: &[T], combine: F, identity: T) -> Reduced<T> {
    if items.is_empty() {
        return Reduced { value: identity, rounds: 0 };
    }
    let sched = ReductionSchedule::ring_allreduce(items.len(), 1);
    let mut bufs = singleton_buffers(items);
    sched.execute(&mut bufs, combine).expect("schedule built for these buffers");
    Reduced { value: bufs.swap_remove(0).swap_remove(0), rounds: sched.round_count() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalReduced<T> {
    pub value: T,
    /// Intra-node rounds in the reduce phase (`g - 1`).
    pub rounds_intra: usize,
    /// Inter-node rounds in the reduce phase (`ceil(log2(nodes))`).
    pub rounds_inter: usize,
    /// Every round including the broadcast phases.
    pub rounds_total: usize,
}

pub fn hierarchical_allreduce<T: Clone, F: Fn(&T, &T) -> T>(
    items: &[T],
    combine: F,
    identity: T,
    nodes: usize,
    gpus_per_node: usize,
) -> Result<HierarchicalReduced<T>> {
    if nodes * gpus_per_node != items.len() {
        return Err(Error::arg(format!(
            "{} participants do not match a {nodes} x {gpus_per_node} topology",
            items.len()
        )));
    }
    if items.is_empty() {
        return Ok(HierarchicalReduced { value: identity, rounds_intra: 0, rounds_inter: 0, rounds_total: 0 });
    }
    let sched = ReductionSchedule::hierarchical_allreduce(nodes, gpus_per_node, 1);
    let mut bufs = singleton_buffers(items);
    sched.execute(&mut bufs, combine)?;
    Ok(HierarchicalReduced {
        value: bufs.swap_remove(0).swap_remove(0),
        rounds_intra: sched.count_rounds(Phase::Reduce, Some(Tier::Intra)),
        rounds_inter: sched.count_rounds(Phase::Reduce, Some(Tier::Inter)),
        rounds_total: sched.round_count(),
    })
}

/// Work per participant and communication rounds for reducing `n` items
/// over `p` participants: `(ceil(n / p), ceil(log2(p)))`.
pub fn complexity_model(n: usize, p: usize) -> Result<(usize, usize)> {
    if p == 0 || p > n {
        return Err(Error::arg(format!("need 1 <= p <= N, got p = {p}, N = {n}")));
    }
    Ok((n.div_ceil(p), ceil_log2(p)))
}

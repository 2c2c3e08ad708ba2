//! Two-tier GPU cluster model.
//!
//! Point-to-point transfers cost `latency + bytes / bandwidth` on either
//! the intra-node or the inter-node link class. Schedules run in
//! synchronous rounds whose duration is the slowest transfer in the round.

use std::collections::BTreeMap;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduction::ReductionSchedule;

/// Latency/bandwidth of one link class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Seconds per message.
    pub latency_s: f64,
    /// Bytes per second.
    pub bandwidth_bps: f64,
}

impl LinkParams {
    pub fn new(latency_s: f64, bandwidth_bps: f64) -> Result<Self> {
        let l = LinkParams { latency_s, bandwidth_bps };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latency_s >= 0.0) || !self.latency_s.is_finite() {
            return Err(Error::Config(format!("latency must be >= 0, got {}", self.latency_s)));
        }
        if !(self.bandwidth_bps > 0.0) {
            return Err(Error::Config(format!("bandwidth must be > 0, got {}", self.bandwidth_bps)));
        }
        Ok(())
    }
}

/// NVLink 4.0, 900 GB/s per GPU.
pub const DEFAULT_INTRA_BW_BPS: f64 = 900e9;
/// One 400 Gb/s InfiniBand NDR port per GPU.
pub const DEFAULT_INTER_BW_BPS: f64 = 400e9 / 8.0;
/// Modelling defaults; not measured values.
pub const DEFAULT_INTRA_LAT_S: f64 = 5e-6;
pub const DEFAULT_INTER_LAT_S: f64 = 25e-6;
pub const DEFAULT_GPUS_PER_NODE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Topology {
    pub nodes: usize,
    pub gpus_per_node: usize,
    pub intra: LinkParams,
    pub inter: LinkParams,
    /// Bytes per tensor element on the wire.
    pub element_bytes: u64,
}

impl Default for Topology {
    /// One DGX-H100-like node: 8 GPUs, NVLink inside, NDR InfiniBand out, bf16.
    fn default() -> Self {
        Topology {
            nodes: 1,
            gpus_per_node: DEFAULT_GPUS_PER_NODE,
            intra: LinkParams { latency_s: DEFAULT_INTRA_LAT_S, bandwidth_bps: DEFAULT_INTRA_BW_BPS },
            inter: LinkParams { latency_s: DEFAULT_INTER_LAT_S, bandwidth_bps: DEFAULT_INTER_BW_BPS },
            element_bytes: 2,
        }
    }
}

impl Topology {
    /// Default link parameters with the given shape.
    pub fn with_shape(nodes: usize, gpus_per_node: usize) -> Result<Self> {
        let t = Topology { nodes, gpus_per_node, ..Topology::default() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.gpus_per_node == 0 {
            return Err(Error::Config(format!(
                "topology needs at least one worker ({} nodes x {} gpus)",
                self.nodes, self.gpus_per_node
            )));
        }
        if self.element_bytes == 0 {
            return Err(Error::Config("element_bytes must be positive".into()));
        }
        self.intra.validate()?;
        self.inter.validate()
    }

    pub fn workers(&self) -> usize {
        self.nodes * self.gpus_per_node
    }

    /// Contiguous placement: workers `0..g` on node 0, and so on.
    pub fn node_of(&self, worker: usize) -> usize {
        worker / self.gpus_per_node
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    pub fn link(&self, src: usize, dst: usize) -> &LinkParams {
        if self.same_node(src, dst) {
            &self.intra
        } else {
            &self.inter
        }
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let cfg: TopologyConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.into_topology()
    }

    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_config_str(&text)
    }

    /// Serialises in the config-file format accepted by [`from_config_str`](Self::from_config_str).
    pub fn to_config_string(&self) -> String {
        format!(
            "nodes = {}\ngpus_per_node = {}\nintra_bw_Bps = {:e}\ninter_bw_Bps = {:e}\nintra_lat_s = {:e}\ninter_lat_s = {:e}\nelement_bytes = {}\n",
            self.nodes,
            self.gpus_per_node,
            self.intra.bandwidth_bps,
            self.inter.bandwidth_bps,
            self.intra.latency_s,
            self.inter.latency_s,
            self.element_bytes
        )
    }
}

/// On-disk topology description: `key = value` lines, `#` comments.
/// Every key is optional and falls back to [`Topology::default`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyConfig {
    nodes: Option<usize>,
    gpus_per_node: Option<usize>,
    #[serde(rename = "intra_bw_Bps")]
    intra_bw_bps: Option<f64>,
    #[serde(rename = "inter_bw_Bps")]
    inter_bw_bps: Option<f64>,
    intra_lat_s: Option<f64>,
    inter_lat_s: Option<f64>,
    element_bytes: Option<u64>,
}

impl TopologyConfig {
    fn into_topology(self) -> Result<Topology> {
        let d = Topology::default();
        let t = Topology {
            nodes: self.nodes.unwrap_or(d.nodes),
            gpus_per_node: self.gpus_per_node.unwrap_or(d.gpus_per_node),
            intra: LinkParams {
                latency_s: self.intra_lat_s.unwrap_or(d.intra.latency_s),
                bandwidth_bps: self.intra_bw_bps.unwrap_or(d.intra.bandwidth_bps),
            },
            inter: LinkParams {
                latency_s: self.inter_lat_s.unwrap_or(d.inter.latency_s),
                bandwidth_bps: self.inter_bw_bps.unwrap_or(d.inter.bandwidth_bps),
            },
            element_bytes: self.element_bytes.unwrap_or(d.element_bytes),
        };
        t.validate()?;
        Ok(t)
    }
}

/// Counters for one simulated run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostAccount {
    pub elems_sent_intra: u64,
    pub elems_sent_inter: u64,
    pub rounds: u64,
    pub sim_time_s: f64,
    /// High-water mark of live buffer elements on the busiest worker.
    pub peak_elems_per_worker: u64,
}

impl CostAccount {
    pub fn elems_total(&self) -> u64 {
        self.elems_sent_intra + self.elems_sent_inter
    }

    /// Accounts for `other` running after `self`.
    pub fn then(&mut self, other: &CostAccount) {
        self.elems_sent_intra += other.elems_sent_intra;
        self.elems_sent_inter += other.elems_sent_inter;
        self.rounds += other.rounds;
        self.sim_time_s += other.sim_time_s;
        self.peak_elems_per_worker = self.peak_elems_per_worker.max(other.peak_elems_per_worker);
    }
}

/// `latency + elems * element_bytes / bandwidth`.
pub fn p2p_cost(elems: u64, link: &LinkParams, element_bytes: u64) -> f64 {
    link.latency_s + (elems * element_bytes) as f64 / link.bandwidth_bps
}

/// Cost of one synchronous round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundCost {
    pub duration_s: f64,
    pub elems_intra: u64,
    pub elems_inter: u64,
}

/// Runs a schedule through the round model. The returned account has no
/// memory information (`peak_elems_per_worker = 0`).
pub fn simulate_schedule(schedule: &ReductionSchedule, topology: &Topology) -> Result<CostAccount> {
    Ok(simulate_schedule_traced(schedule, topology)?.0)
}

pub fn simulate_schedule_traced(schedule: &ReductionSchedule, topology: &Topology) -> Result<(CostAccount, Vec<RoundCost>)> {
    if schedule.participants > topology.workers() {
        return Err(Error::arg(format!(
            "schedule over {} participants exceeds {} workers",
            schedule.participants,
            topology.workers()
        )));
    }
    schedule.validate()?;
    let mut acct = CostAccount::default();
    let mut trace = Vec::with_capacity(schedule.rounds.len());
    for round in &schedule.rounds {
        let mut rc = RoundCost { duration_s: 0.0, elems_intra: 0, elems_inter: 0 };
        for t in &round.transfers {
            let elems = t.elems() as u64;
            let cost = p2p_cost(elems, topology.link(t.src, t.dst), topology.element_bytes);
            rc.duration_s = rc.duration_s.max(cost);
            if topology.same_node(t.src, t.dst) {
                rc.elems_intra += elems;
            } else {
                rc.elems_inter += elems;
            }
        }
        acct.elems_sent_intra += rc.elems_intra;
        acct.elems_sent_inter += rc.elems_inter;
        acct.sim_time_s += rc.duration_s;
        acct.rounds += 1;
        trace.push(rc);
    }
    Ok((acct, trace))
}

/// Live simulated buffers per worker, with a high-water mark.
#[derive(Debug, Clone, Default)]
pub struct MemoryTracker {
    live: Vec<BTreeMap<&'static str, u64>>,
    current: Vec<u64>,
    peak: Vec<u64>,
}

impl MemoryTracker {
    pub fn new(workers: usize) -> Self {
        MemoryTracker { live: vec![BTreeMap::new(); workers], current: vec![0; workers], peak: vec![0; workers] }
    }

    /// Allocates (or resizes) buffer `name` on `worker`.
    pub fn alloc(&mut self, worker: usize, name: &'static str, elems: u64) {
        let old = self.live[worker].insert(name, elems).unwrap_or(0);
        self.current[worker] = self.current[worker] - old + elems;
        self.peak[worker] = self.peak[worker].max(self.current[worker]);
    }

    pub fn free(&mut self, worker: usize, name: &'static str) {
        if let Some(e) = self.live[worker].remove(name) {
            self.current[worker] -= e;
        }
    }

    /// Reuses buffer `from` as `to` without changing its size.
    pub fn rename(&mut self, worker: usize, from: &'static str, to: &'static str) {
        if let Some(e) = self.live[worker].remove(from) {
            self.live[worker].insert(to, e);
        }
    }

    pub fn live_elems(&self, worker: usize) -> u64 {
        self.current[worker]
    }

    pub fn peak(&self, worker: usize) -> u64 {
        self.peak[worker]
    }

    pub fn peak_max(&self) -> u64 {
        self.peak.iter().copied().max().unwrap_or(0)
    }
}

/// The two distributed decoding algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Tree,
    Ring,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Tree => "tree",
            Algo::Ring => "ring",
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(Algo::Tree),
            "ring" => Ok(Algo::Ring),
            other => Err(Error::arg(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Closed-form peak live elements per worker for one decoding step, with
/// `t` keys per worker and `d = d_h * n_h`:
///
/// - ring: `4btd + 2bd` (own K/V chunk, neighbour's chunk, query, output)
/// - tree: `2btd + 2bd + 2bn_h` (own chunk, query, numerator, denominator, max)
pub fn peak_memory_formula(algo: Algo, b: u64, t: u64, d: u64, n_h: u64) -> u64 {
    match algo {
        Algo::Ring => 4 * b * t * d + 2 * b * d,
        Algo::Tree => 2 * b * t * d + 2 * b * d + 2 * b * n_h,
    }
}

/// Closed-form communication volume in elements.
///
/// - ring: `2btd * p`, one rotation of K/V chunks summed over all `p`
///   workers (`t` may be fractional, `t = N / p`);
/// - tree: `2 (p - 1) / p * (bd + 2bn_h)`, the per-worker allreduce volume
///   for the numerator, denominator and max.
pub fn comm_volume_formula(algo: Algo, b: u64, t: Ratio<u64>, d: u64, n_h: u64, p: u64) -> Ratio<u64> {
    match algo {
        Algo::Ring => t * (2 * b * d * p),
        Algo::Tree => Ratio::new(2 * (p - 1), p) * (b * d + 2 * b * n_h),
    }
}

/// Ring volume over a full pass of `p - 1` rotations.
pub fn ring_total_volume(b: u64, t: Ratio<u64>, d: u64, p: u64) -> Ratio<u64> {
    comm_volume_formula(Algo::Ring, b, t, d, 0, p) * (p.saturating_sub(1))
}

/// Local attention compute time modelled as K/V streaming throughput.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeModel {
    /// K/V elements consumed per second by one worker's attention kernel.
    pub kv_elems_per_s: f64,
}

impl Default for ComputeModel {
    /// Calibrated so one worker's share of a 640k-token, d = 2048 context
    /// split 8 ways (2 * 80000 * 2048 K/V elements) takes 1e-5 s.
    fn default() -> Self {
        ComputeModel { kv_elems_per_s: 3.2768e13 }
    }
}

impl ComputeModel {
    pub fn time_s(&self, kv_elems: u64) -> f64 {
        kv_elems as f64 / self.kv_elems_per_s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduction::{Phase, Round, Tier, Transfer, TransferOp};

    fn one_round(transfers: Vec<Transfer>, p: usize, len: usize) -> ReductionSchedule {
        ReductionSchedule::from_rounds(p, len, vec![Round { phase: Phase::Reduce, tier: Tier::Flat, transfers }]).unwrap()
    }

    fn xfer(src: usize, dst: usize, elems: usize) -> Transfer {
        Transfer { src, dst, segment: 0..elems, op: TransferOp::Overwrite }
    }

    #[test]
    fn p2p_examples() {
        let link = LinkParams::new(1e-5, 1e9).unwrap();
        assert_eq!(p2p_cost(0, &link, 2), 1e-5);
        assert!((p2p_cost(500_000, &link, 2) - 1.01e-3).abs() < 1e-15);
        let no_lat = LinkParams::new(0.0, 1e9).unwrap();
        assert_eq!(p2p_cost(2000, &no_lat, 4), 2.0 * p2p_cost(1000, &no_lat, 4));
        assert!(LinkParams::new(-1.0, 1.0).is_err());
        assert!(LinkParams::new(0.0, 0.0).is_err());
    }

    #[test]
    fn single_and_parallel_transfers() {
        let topo = Topology::default();
        let acct = simulate_schedule(&one_round(vec![xfer(0, 1, 100)], 8, 100), &topo).unwrap();
        assert_eq!(acct.sim_time_s, p2p_cost(100, &topo.intra, 2));
        assert_eq!((acct.elems_sent_intra, acct.elems_sent_inter, acct.rounds), (100, 0, 1));

        let sched = one_round(vec![xfer(0, 1, 10), xfer(2, 3, 1000)], 8, 1000);
        let acct = simulate_schedule(&sched, &topo).unwrap();
        assert_eq!(acct.sim_time_s, p2p_cost(1000, &topo.intra, 2));

        let two = Topology::with_shape(2, 8).unwrap();
        let acct = simulate_schedule(&one_round(vec![xfer(7, 8, 50)], 16, 50), &two).unwrap();
        assert_eq!((acct.elems_sent_intra, acct.elems_sent_inter), (0, 50));
        assert_eq!(acct.sim_time_s, p2p_cost(50, &two.inter, 2));

        assert!(simulate_schedule(&one_round(vec![xfer(0, 1, 1)], 16, 1), &topo).is_err());
    }

    #[test]
    fn tree_schedule_time() {
        let topo = Topology::default();
        let s = 4096;
        let acct = simulate_schedule(&ReductionSchedule::tree_reduce(8, s), &topo).unwrap();
        let expect = 3.0 * p2p_cost(s as u64, &topo.intra, 2);
        assert!((acct.sim_time_s - expect).abs() <= 1e-18);
        assert_eq!(acct.rounds, 3);
    }

    #[test]
    fn formulas() {
        assert_eq!(peak_memory_formula(Algo::Ring, 1, 2, 4, 1), 40);
        assert_eq!(peak_memory_formula(Algo::Tree, 1, 2, 4, 1), 26);
        let gap = |d| peak_memory_formula(Algo::Ring, 1, 1000, d, 16) - peak_memory_formula(Algo::Tree, 1, 1000, d, 16);
        let ratio = gap(4096) as f64 / gap(2048) as f64;
        assert!((1.99..=2.01).contains(&ratio), "{ratio}");

        let r = comm_volume_formula(Algo::Ring, 1, Ratio::from(1000), 2048, 16, 8);
        assert_eq!(r, Ratio::from(32_768_000));
        let t = comm_volume_formula(Algo::Tree, 1, Ratio::from(1000), 2048, 16, 8);
        assert_eq!(t, Ratio::from(3640));
        assert_eq!(comm_volume_formula(Algo::Tree, 1, Ratio::from(5), 2048, 16, 1), Ratio::from(0));
        assert_eq!(
            comm_volume_formula(Algo::Tree, 1, Ratio::from(5), 64, 4, 8),
            comm_volume_formula(Algo::Tree, 1, Ratio::from(500), 64, 4, 8)
        );
        assert_eq!(ring_total_volume(1, Ratio::from(10), 4, 4), Ratio::from(2 * 10 * 4 * 4 * 3));
    }

    #[test]
    fn config_parsing() {
        let t = Topology::from_config_str(
            "# two nodes\nnodes = 2\ngpus_per_node = 4\nintra_bw_Bps = 1e11\ninter_bw_Bps = 1e10\nintra_lat_s = 1e-6\ninter_lat_s = 2e-5\nelement_bytes = 4\n",
        )
        .unwrap();
        assert_eq!((t.nodes, t.gpus_per_node, t.element_bytes), (2, 4, 4));
        assert_eq!(t.inter.bandwidth_bps, 1e10);
        assert_eq!(Topology::from_config_str(&t.to_config_string()).unwrap(), t);
        assert_eq!(Topology::from_config_str("").unwrap(), Topology::default());
        assert!(Topology::from_config_str("bogus = 1").is_err());
        assert!(Topology::from_config_str("nodes = 0").is_err());
        assert!(Topology::from_config_str("inter_bw_Bps = -5").is_err());
    }

    #[test]
    fn default_topology_values() {
        let t = Topology::default();
        assert_eq!(t.intra.bandwidth_bps, 900e9);
        assert_eq!(t.inter.bandwidth_bps, 50e9);
        assert_eq!(t.gpus_per_node, 8);
        assert_eq!(t.element_bytes, 2);
    }

    #[test]
    fn memory_tracker() {
        let mut m = MemoryTracker::new(2);
        m.alloc(0, "a", 10);
        m.alloc(0, "b", 5);
        m.free(0, "a");
        m.alloc(0, "c", 7);
        m.rename(0, "c", "d");
        assert_eq!(m.live_elems(0), 12);
        assert_eq!(m.peak(0), 15);
        assert_eq!(m.peak_max(), 15);
        assert_eq!(m.peak(1), 0);
    }
}

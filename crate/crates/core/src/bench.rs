//! Parameter sweeps over sequence length and cluster size, emitting one
//! record per `(algo, N, p)` cell, plus the tree-vs-ring comparison report.
//!
//! Times are modelled by the cluster simulator, never measured.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_naive, AttentionInput};
use crate::decode::{decode, model_decode, shard_kv, DecodeOptions, DecodeShape};
use crate::error::{Error, Result};
use crate::numerics::{seeded_random_tensor, DType, Tensor};
use crate::reduction::Strategy;
use crate::sim::{Algo, Topology};

/// Column order of the CSV output.
pub const CSV_HEADER: &str = "algo,N,p,nodes,sim_time_s,elems_intra,elems_inter,peak_elems,rounds,max_abs_err";

/// Cells with more K elements than this skip the numeric check.
pub const DEFAULT_NUMERIC_LIMIT: usize = 1 << 22;

/// Relative tolerance (max abs error over max abs reference) per dtype.
pub fn relative_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-10,
        DType::F32 => 1e-4,
        DType::Bf16 => 2e-2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub seq_lens: Vec<usize>,
    /// Interpret `seq_lens` as positions per worker (`N = seq_len * p`).
    pub per_device: bool,
    /// `(nodes, gpus_per_node)` pairs.
    pub cluster_sizes: Vec<(usize, usize)>,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub dtype: DType,
    pub algorithms: Vec<Algo>,
    pub allreduce: Strategy,
    pub seed: u64,
    /// Link parameters; the shape fields are replaced per cell and
    /// `element_bytes` follows `dtype`.
    pub links: Topology,
    pub numeric_limit: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            seq_lens: vec![8192],
            per_device: false,
            cluster_sizes: vec![(1, 8)],
            batch: 1,
            heads: 16,
            head_dim: 128,
            dtype: DType::Bf16,
            algorithms: vec![Algo::Tree, Algo::Ring],
            allreduce: Strategy::Hierarchical,
            seed: 0,
            links: Topology::default(),
            numeric_limit: DEFAULT_NUMERIC_LIMIT,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_lens.is_empty() || self.cluster_sizes.is_empty() || self.algorithms.is_empty() {
            return Err(Error::arg("sweep needs at least one sequence length, cluster size and algorithm"));
        }
        if self.batch == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::arg("batch, heads and head_dim must be positive"));
        }
        if self.seq_lens.contains(&0) || self.cluster_sizes.iter().any(|&(n, g)| n == 0 || g == 0) {
            return Err(Error::arg("sequence lengths and cluster sizes must be positive"));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &(nodes, gpus) in &self.cluster_sizes {
            for &len in &self.seq_lens {
                let p = nodes * gpus;
                let n = if self.per_device { len * p } else { len };
                for &algo in &self.algorithms {
                    cells.push(Cell { index: cells.len(), algo, n, nodes, gpus });
                }
            }
        }
        cells
    }

    /// One-line description embedded in every output.
    pub fn metadata(&self) -> String {
        format!(
            "sim_time_s is modelled by the cluster simulator, not measured; seed={} dtype={} batch={} heads={} head_dim={} allreduce={} per_device={} intra_bw_Bps={:e} inter_bw_Bps={:e} intra_lat_s={:e} inter_lat_s={:e} element_bytes={}",
            self.seed,
            self.dtype,
            self.batch,
            self.heads,
            self.head_dim,
            self.allreduce,
            self.per_device,
            self.links.intra.bandwidth_bps,
            self.links.inter.bandwidth_bps,
            self.links.intra.latency_s,
            self.links.inter.latency_s,
            self.dtype.element_bytes(),
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    index: usize,
    algo: Algo,
    n: usize,
    nodes: usize,
    gpus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub algo: Algo,
    #[serde(rename = "N")]
    pub n: usize,
    pub p: usize,
    pub nodes: usize,
    pub sim_time_s: f64,
    pub elems_intra: u64,
    pub elems_inter: u64,
    pub peak_elems: u64,
    pub rounds: u64,
    /// `None` when the cell was too large for the numeric check.
    pub max_abs_err: Option<f64>,
}

/// Outcome of a sweep: records plus the cells whose numeric error exceeded
/// the dtype tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<BenchRecord>,
    pub failures: Vec<String>,
}

fn cell_seed(base: u64, cell: &Cell) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(cell.index as u64 * 7919 + 1)
}

/// Decode inputs for one cell, with q and k scaled so that `q . k` has unit variance.
pub fn cell_inputs(shape: &DecodeShape, dtype: DType, seed: u64) -> Result<(Tensor, Tensor, Tensor)> {
    let DecodeShape { batch: b, heads: h, seq_len: n, head_dim: d } = *shape;
    let qk_scale = (d as f64).powf(-0.25);
    Ok((
        seeded_random_tensor(&[b, h, 1, d], seed, qk_scale)?.with_dtype(dtype),
        seeded_random_tensor(&[b, h, n, d], seed.wrapping_add(1), qk_scale)?.with_dtype(dtype),
        seeded_random_tensor(&[b, h, n, d], seed.wrapping_add(2), 1.0)?.with_dtype(dtype),
    ))
}

fn run_cell(spec: &SweepSpec, cell: &Cell) -> Result<(BenchRecord, Option<String>)> {
    let topo = Topology {
        nodes: cell.nodes,
        gpus_per_node: cell.gpus,
        element_bytes: spec.dtype.element_bytes(),
        ..spec.links
    };
    let p = topo.workers();
    let shape = DecodeShape { batch: spec.batch, heads: spec.heads, seq_len: cell.n, head_dim: spec.head_dim };
    let opts = DecodeOptions { allreduce: spec.allreduce, ..Default::default() };

    let numel = shape.batch * shape.heads * shape.seq_len * shape.head_dim;
    let (report, err, failure) = if numel <= spec.numeric_limit {
        let (q, k, v) = cell_inputs(&shape, spec.dtype, cell_seed(spec.seed, cell))?;
        let reference = attention_naive(&AttentionInput::new(
            q.with_dtype(DType::F64),
            k.with_dtype(DType::F64),
            v.with_dtype(DType::F64),
        ))?;
        let cache = shard_kv(&k, &v, p)?;
        let run = decode(cell.algo, &q, &cache, &topo, &opts)?;
        let err = run.output.max_abs_diff(&reference)?;
        let tol = relative_tolerance(spec.dtype) * reference.max_abs().max(f64::MIN_POSITIVE);
        let failure = (!(err <= tol)).then(|| {
            format!("{} N={} p={} nodes={}: max_abs_err {err:e} exceeds {tol:e}", cell.algo, cell.n, p, cell.nodes)
        });
        (run.report, Some(err), failure)
    } else {
        (model_decode(cell.algo, &shape, &topo, &opts)?, None, None)
    };
    let c = report.cost;
    Ok((
        BenchRecord {
            algo: cell.algo,
            n: cell.n,
            p,
            nodes: cell.nodes,
            sim_time_s: c.sim_time_s,
            elems_intra: c.elems_sent_intra,
            elems_inter: c.elems_sent_inter,
            peak_elems: c.peak_elems_per_worker,
            rounds: c.rounds,
            max_abs_err: err,
        },
        failure,
    ))
}

/// Runs every cell (in parallel) and returns records in cell order.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let results = spec.cells().par_iter().map(|c| run_cell(spec, c)).collect::<Result<Vec<_>>>()?;
    let (records, failures): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(SweepOutcome { records, failures: failures.into_iter().flatten().collect() })
}

/// CSV with a leading `# ...` metadata comment, then [`CSV_HEADER`].
pub fn write_csv<W: Write>(records: &[BenchRecord], metadata: &str, out: W) -> std::io::Result<()> {
    let mut out = out;
    writeln!(out, "# {metadata}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    w.flush()
}

pub fn write_json<W: Write>(records: &[BenchRecord], mut out: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut out, records)?;
    writeln!(out)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

/// Parses bench output (CSV or JSON, detected from the first non-blank character).
pub fn parse_records(text: &str) -> std::result::Result<Vec<BenchRecord>, ParseError> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| ParseError { line: e.line(), message: e.to_string() });
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| csv_error(&e, 1))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        let line = text.lines().position(|l| !l.starts_with('#')).map_or(1, |i| i + 1);
        return Err(ParseError { line, message: format!("unexpected header `{}`", headers.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(|e: csv::Error| csv_error(&e, 0))?);
    }
    Ok(out)
}

fn csv_error(e: &csv::Error, fallback: usize) -> ParseError {
    let line = e.position().map_or(fallback, |p| p.line() as usize);
    ParseError { line, message: e.to_string() }
}

/// One tree-vs-ring comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub n: usize,
    pub p: usize,
    pub nodes: usize,
    /// ring time / tree time.
    pub speedup: f64,
    /// ring elements / tree elements; `None` when tree sent nothing.
    pub volume_ratio: Option<f64>,
    /// ring peak / tree peak.
    pub memory_ratio: f64,
}

impl ComparisonRow {
    pub fn tree_wins(&self) -> bool {
        self.speedup >= 1.0
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 && den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Pairs tree and ring records by `(N, p, nodes)`. Cells missing either
/// algorithm are skipped.
pub fn compare(records: &[BenchRecord]) -> Vec<ComparisonRow> {
    let mut cells: BTreeMap<(usize, usize, usize), (Option<&BenchRecord>, Option<&BenchRecord>)> = BTreeMap::new();
    for r in records {
        let slot = cells.entry((r.n, r.p, r.nodes)).or_default();
        match r.algo {
            Algo::Tree => slot.0 = Some(r),
            Algo::Ring => slot.1 = Some(r),
        }
    }
    cells
        .into_iter()
        .filter_map(|((n, p, nodes), pair)| match pair {
            (Some(t), Some(r)) => {
                let (te, re) = ((t.elems_intra + t.elems_inter) as f64, (r.elems_intra + r.elems_inter) as f64);
                Some(ComparisonRow {
                    n,
                    p,
                    nodes,
                    speedup: ratio(r.sim_time_s, t.sim_time_s),
                    volume_ratio: (te > 0.0).then(|| re / te),
                    memory_ratio: ratio(r.peak_elems as f64, t.peak_elems as f64),
                })
            }
            _ => None,
        })
        .collect()
}

pub fn render_report<W: Write>(rows: &[ComparisonRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "# modelled times (cluster simulator), not measurements")?;
    writeln!(out, "{:>10} {:>6} {:>6} {:>12} {:>14} {:>12}  note", "N", "p", "nodes", "speedup", "volume_ratio", "mem_ratio")?;
    for r in rows {
        let vol = r.volume_ratio.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let note = if r.tree_wins() { "" } else { "TREE-SLOWER" };
        writeln!(
            out,
            "{:>10} {:>6} {:>6} {:>12.2} {:>14} {:>12.4}  {note}",
            r.n, r.p, r.nodes, r.speedup, vol, r.memory_ratio
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SweepSpec {
        SweepSpec {
            seq_lens: vec![64],
            cluster_sizes: vec![(1, 4), (2, 2)],
            heads: 2,
            head_dim: 4,
            dtype: DType::F64,
            ..Default::default()
        }
    }

    #[test]
    fn one_record_per_cell() {
        let spec = SweepSpec { seq_lens: vec![8192], cluster_sizes: vec![(1, 8)], numeric_limit: 0, ..Default::default() };
        let out = run_sweep(&spec).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.records.iter().all(|r| r.max_abs_err.is_none()));
    }

    #[test]
    fn numeric_check_within_tolerance() {
        let out = run_sweep(&small_spec()).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert!(out.records.iter().all(|r| r.max_abs_err.unwrap() < 1e-10));
    }

    #[test]
    fn csv_round_trip() {
        let recs = run_sweep(&small_spec()).unwrap().records;
        let mut buf = Vec::new();
        write_csv(&recs, "meta", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap() == CSV_HEADER);
        let parsed = parse_records(&text).unwrap();
        assert_eq!(parsed, recs);
        let mut json = Vec::new();
        write_json(&recs, &mut json).unwrap();
        assert_eq!(parse_records(std::str::from_utf8(&json).unwrap()).unwrap(), recs);
    }

    #[test]
    fn malformed_input_reports_line() {
        let text = format!("# m\n{CSV_HEADER}\ntree,8,2,1,0.1,1,0,5,2,\nring,8,oops,1,0.1,1,0,5,2,\n");
        let err = parse_records(&text).unwrap_err();
        assert_eq!(err.line, 4, "{err}");
        let err = parse_records("# m\nalgo,N\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn report_rows() {
        let rec = |algo, t: f64, e, m| BenchRecord {
            algo,
            n: 16,
            p: 1,
            nodes: 1,
            sim_time_s: t,
            elems_intra: e,
            elems_inter: 0,
            peak_elems: m,
            rounds: 0,
            max_abs_err: None,
        };
        let rows = compare(&[rec(Algo::Tree, 0.0, 0, 10), rec(Algo::Ring, 0.0, 0, 12)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].speedup, 1.0);
        assert_eq!(rows[0].volume_ratio, None);
        assert!((rows[0].memory_ratio - 1.2).abs() < 1e-12);
        let mut out = Vec::new();
        render_report(&rows, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().contains("1.00"));
    }
}

//! C ABI for `tree-attn`.
//!
//! Conventions:
//! - every fallible function returns a [`TaStatus`]; on failure the message
//!   is kept per thread and read with [`ta_last_error_message`];
//! - tensors are dense row-major `double` arrays in `[batch, heads, seq, head_dim]`
//!   order, rounded to the requested dtype on entry;
//! - handles ([`TaTopology`], [`TaDecodeResult`]) are opaque and owned by the
//!   caller until passed to their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tree_attn::attention::{attention_naive, AttentionInput};
use tree_attn::decode::{decode, shard_kv, DecodeOptions, DecodeResult};
use tree_attn::energy::energy;
use tree_attn::reduction::Strategy;
use tree_attn::sim::{comm_volume_formula, peak_memory_formula, Algo, LinkParams, Topology};
use tree_attn::{DType, Error, Ratio, Tensor};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    InvalidData = 4,
    Overflow = 5,
    NoKeysAttended = 6,
    Config = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaDtype {
    F64 = 0,
    F32 = 1,
    Bf16 = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaAlgo {
    Tree = 0,
    Ring = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaStrategy {
    TreeBinary = 0,
    Ring = 1,
    Hierarchical = 2,
}

/// Cost summary of one decode.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TaCost {
    pub elems_sent_intra: u64,
    pub elems_sent_inter: u64,
    pub rounds: u64,
    pub peak_elems_per_worker: u64,
    /// Modelled communication time in seconds.
    pub sim_time_s: f64,
    /// Modelled local attention time on the busiest worker.
    pub compute_s: f64,
    /// Closed-form communication volume as `numer / denom`.
    pub comm_volume_numer: u64,
    pub comm_volume_denom: u64,
    pub overlap_ratio: f64,
    pub overlap_feasible: bool,
}

/// Opaque cluster topology.
pub struct TaTopology(Topology);

/// Opaque decode output plus its cost report.
pub struct TaDecodeResult(DecodeResult);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> TaStatus {
    match err {
        Error::InvalidData(_) => TaStatus::InvalidData,
        Error::Shape(_) => TaStatus::Shape,
        Error::InvalidArgument(_) | Error::ParticipantOutOfRange { .. } => TaStatus::InvalidArgument,
        Error::Overflow { .. } => TaStatus::Overflow,
        Error::NoKeysAttended { .. } => TaStatus::NoKeysAttended,
        Error::Config(_) => TaStatus::Config,
    }
}

struct Failure(TaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            TaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(TaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(TaStatus::InvalidArgument, msg.into())
}

fn dtype(d: TaDtype) -> DType {
    match d {
        TaDtype::F64 => DType::F64,
        TaDtype::F32 => DType::F32,
        TaDtype::Bf16 => DType::Bf16,
    }
}

fn algo(a: TaAlgo) -> Algo {
    match a {
        TaAlgo::Tree => Algo::Tree,
        TaAlgo::Ring => Algo::Ring,
    }
}

fn strategy(s: TaStrategy) -> Strategy {
    match s {
        TaStrategy::TreeBinary => Strategy::TreeBinary,
        TaStrategy::Ring => Strategy::Ring,
        TaStrategy::Hierarchical => Strategy::Hierarchical,
    }
}

fn numel(shape: &[usize]) -> Result<usize, Failure> {
    shape
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| invalid("tensor size overflows"))
}

unsafe fn read_tensor(ptr: *const f64, shape: &[usize], dt: DType, what: &str) -> Result<Tensor, Failure> {
    let len = numel(shape)?;
    let data = if len == 0 {
        Vec::new()
    } else if ptr.is_null() {
        return Err(null(what));
    } else {
        std::slice::from_raw_parts(ptr, len).to_vec()
    };
    Ok(Tensor::new(shape.to_vec(), data, dt)?)
}

unsafe fn write_out(src: &[f64], out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if src.len() > out_len {
        return Err(Failure(TaStatus::BufferTooSmall, format!("need {} elements, buffer holds {out_len}", src.len())));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// including the terminator; pass `buf = NULL` to query it.
#[no_mangle]
pub unsafe extern "C" fn ta_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Creates a `nodes x gpus_per_node` topology with the default link parameters.
#[no_mangle]
pub unsafe extern "C" fn ta_topology_new(nodes: usize, gpus_per_node: usize, out: *mut *mut TaTopology) -> TaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let topo = Topology::with_shape(nodes, gpus_per_node)?;
        *out = Box::into_raw(Box::new(TaTopology(topo)));
        Ok(())
    })
}

/// Reads a topology from a `key = value` config file.
#[no_mangle]
pub unsafe extern "C" fn ta_topology_from_config(path: *const c_char, out: *mut *mut TaTopology) -> TaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let topo = Topology::from_config_file(path)?;
        *out = Box::into_raw(Box::new(TaTopology(topo)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ta_topology_set_links(
    topo: *mut TaTopology,
    intra_latency_s: f64,
    intra_bandwidth_bps: f64,
    inter_latency_s: f64,
    inter_bandwidth_bps: f64,
) -> TaStatus {
    guard(|| {
        let topo = topo.as_mut().ok_or_else(|| null("topology"))?;
        topo.0.intra = LinkParams::new(intra_latency_s, intra_bandwidth_bps)?;
        topo.0.inter = LinkParams::new(inter_latency_s, inter_bandwidth_bps)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ta_topology_set_element_bytes(topo: *mut TaTopology, element_bytes: u64) -> TaStatus {
    guard(|| {
        let topo = topo.as_mut().ok_or_else(|| null("topology"))?;
        if element_bytes == 0 {
            return Err(invalid("element_bytes must be positive"));
        }
        topo.0.element_bytes = element_bytes;
        Ok(())
    })
}

/// Number of workers, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ta_topology_workers(topo: *const TaTopology) -> usize {
    topo.as_ref().map_or(0, |t| t.0.workers())
}

#[no_mangle]
pub unsafe extern "C" fn ta_topology_free(topo: *mut TaTopology) {
    if !topo.is_null() {
        drop(Box::from_raw(topo));
    }
}

/// Decodes one query (`q`: `[batch, heads, 1, head_dim]`) against K/V
/// (`[batch, heads, seq_len, head_dim]`) sharded over the topology's workers.
#[no_mangle]
pub unsafe extern "C" fn ta_decode(
    algorithm: TaAlgo,
    allreduce: TaStrategy,
    element_type: TaDtype,
    topo: *const TaTopology,
    q: *const f64,
    k: *const f64,
    v: *const f64,
    batch: usize,
    heads: usize,
    seq_len: usize,
    head_dim: usize,
    scale: f64,
    out: *mut *mut TaDecodeResult,
) -> TaStatus {
    guard(|| {
        let topo = topo.as_ref().ok_or_else(|| null("topology"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !scale.is_finite() {
            return Err(invalid("scale must be finite"));
        }
        let dt = dtype(element_type);
        let q = read_tensor(q, &[batch, heads, 1, head_dim], dt, "q")?;
        let k = read_tensor(k, &[batch, heads, seq_len, head_dim], dt, "k")?;
        let v = read_tensor(v, &[batch, heads, seq_len, head_dim], dt, "v")?;
        let cache = shard_kv(&k, &v, topo.0.workers())?;
        let opts = DecodeOptions { allreduce: strategy(allreduce), scale, ..Default::default() };
        let result = decode(algo(algorithm), &q, &cache, &topo.0, &opts)?;
        *out = Box::into_raw(Box::new(TaDecodeResult(result)));
        Ok(())
    })
}

/// Number of output elements (`batch * heads * head_dim`), or 0 for null.
#[no_mangle]
pub unsafe extern "C" fn ta_decode_result_output_len(res: *const TaDecodeResult) -> usize {
    res.as_ref().map_or(0, |r| r.0.output.len())
}

#[no_mangle]
pub unsafe extern "C" fn ta_decode_result_copy_output(res: *const TaDecodeResult, out: *mut f64, out_len: usize) -> TaStatus {
    guard(|| {
        let res = res.as_ref().ok_or_else(|| null("result"))?;
        write_out(res.0.output.data(), out, out_len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn ta_decode_result_cost(res: *const TaDecodeResult, out: *mut TaCost) -> TaStatus {
    guard(|| {
        let res = res.as_ref().ok_or_else(|| null("result"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = &res.0.report;
        *out = TaCost {
            elems_sent_intra: r.cost.elems_sent_intra,
            elems_sent_inter: r.cost.elems_sent_inter,
            rounds: r.cost.rounds,
            peak_elems_per_worker: r.cost.peak_elems_per_worker,
            sim_time_s: r.cost.sim_time_s,
            compute_s: r.compute_s,
            comm_volume_numer: *r.comm_volume.numer(),
            comm_volume_denom: *r.comm_volume.denom(),
            overlap_ratio: r.overlap.ratio,
            overlap_feasible: r.overlap.feasible,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ta_decode_result_free(res: *mut TaDecodeResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Single-device softmax attention. `out` receives `[batch, heads, n_q, head_dim]`.
#[no_mangle]
pub unsafe extern "C" fn ta_attention_naive(
    element_type: TaDtype,
    q: *const f64,
    k: *const f64,
    v: *const f64,
    batch: usize,
    heads: usize,
    n_q: usize,
    seq_len: usize,
    head_dim: usize,
    causal: bool,
    scale: f64,
    out: *mut f64,
    out_len: usize,
) -> TaStatus {
    guard(|| {
        let dt = dtype(element_type);
        let input = AttentionInput::new(
            read_tensor(q, &[batch, heads, n_q, head_dim], dt, "q")?,
            read_tensor(k, &[batch, heads, seq_len, head_dim], dt, "k")?,
            read_tensor(v, &[batch, heads, seq_len, head_dim], dt, "v")?,
        )
        .causal(causal)
        .with_scale(scale);
        write_out(attention_naive(&input)?.data(), out, out_len)
    })
}

/// Energy `log sum_a exp(q . k_a + zeta . v_a)` per query row. `zeta` has
/// the shape of `q`; `out` receives `[batch, heads, n_q]`.
#[no_mangle]
pub unsafe extern "C" fn ta_energy(
    q: *const f64,
    k: *const f64,
    v: *const f64,
    zeta: *const f64,
    batch: usize,
    heads: usize,
    n_q: usize,
    seq_len: usize,
    head_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> TaStatus {
    guard(|| {
        let dt = DType::F64;
        let q_shape = [batch, heads, n_q, head_dim];
        let kv_shape = [batch, heads, seq_len, head_dim];
        let eval = energy(
            &read_tensor(q, &q_shape, dt, "q")?,
            &read_tensor(k, &kv_shape, dt, "k")?,
            &read_tensor(v, &kv_shape, dt, "v")?,
            &read_tensor(zeta, &q_shape, dt, "zeta")?,
        )?;
        write_out(eval.value.data(), out, out_len)
    })
}

/// Closed-form peak live elements per worker.
#[no_mangle]
pub extern "C" fn ta_peak_memory_formula(algorithm: TaAlgo, batch: u64, t: u64, hidden: u64, heads: u64) -> u64 {
    peak_memory_formula(algo(algorithm), batch, t, hidden, heads)
}

/// Closed-form communication volume with `t = seq_len / workers`, written
/// as an exact fraction.
#[no_mangle]
pub unsafe extern "C" fn ta_comm_volume_formula(
    algorithm: TaAlgo,
    batch: u64,
    seq_len: u64,
    hidden: u64,
    heads: u64,
    workers: u64,
    numer: *mut u64,
    denom: *mut u64,
) -> TaStatus {
    guard(|| {
        if numer.is_null() || denom.is_null() {
            return Err(null("numer/denom"));
        }
        if workers == 0 {
            return Err(invalid("workers must be positive"));
        }
        let v = comm_volume_formula(algo(algorithm), batch, Ratio::new(seq_len, workers), hidden, heads, workers);
        *numer = *v.numer();
        *denom = *v.denom();
        Ok(())
    })
}

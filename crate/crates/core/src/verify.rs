//! Randomised property suites behind `tree-attn verify`.
//!
//! Every suite draws its cases from a ChaCha stream keyed by the run seed
//! and the suite index, so a report is reproducible from the seed alone.

use std::io::Write;

use num_rational::Ratio;
use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::attention::{attention_naive, attention_online, attention_partitioned, chunk_sizes, AttentionInput};
use crate::decode::{decode, model_decode, overlap_feasibility, shard_kv, DecodeOptions, DecodeShape, ExecMode};
use crate::energy::{
    energy, energy_forward_parallel, energy_grad_parallel, energy_masked, gamma_log_likelihood, grad_energy_wrt_source,
    grad_shifted_energy, Mask,
};
use crate::numerics::{logsumexp, lse_combine, seeded_random_tensor, seeded_rng, unit_f64, DType, Tensor};
use crate::reduction::{ceil_log2, hierarchical_allreduce, ring_allreduce, tree_reduce, ReductionSchedule, Strategy};
use crate::sim::{comm_volume_formula, peak_memory_formula, ring_total_volume, Algo, ComputeModel, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Multiplier on the number of cases per suite.
    pub grid_size: usize,
    /// Negative control: perturb and swap the operands of the reduction combiner.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, grid_size: 1, inject_fault: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// `Err` carries the failing case's parameters.
    pub outcome: std::result::Result<(), String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

type CaseResult = std::result::Result<(), String>;

struct Ctx {
    rng: ChaCha8Rng,
    cases: usize,
    fault: bool,
}

impl Ctx {
    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.rng.next_u64() % (hi - lo + 1) as u64) as usize
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * unit_f64(&mut self.rng)
    }

    fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn tensor(&mut self, shape: &[usize], scale: f64) -> CaseResultT<Tensor> {
        seeded_random_tensor(shape, self.next_seed(), scale).map_err(|e| e.to_string())
    }
}

type CaseResultT<T> = std::result::Result<T, String>;

fn ok<T>(r: crate::Result<T>) -> CaseResultT<T> {
    r.map_err(|e| e.to_string())
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> CaseResult {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(got: &Tensor, want: &Tensor) -> CaseResultT<f64> {
    Ok(ok(got.max_abs_diff(want))? / want.max_abs().max(1.0))
}

struct Suite {
    name: &'static str,
    base_cases: usize,
    run: fn(&mut Ctx) -> CaseResult,
}

const SUITES: &[Suite] = &[
    Suite { name: "lse-associativity", base_cases: 500, run: lse_associativity },
    Suite { name: "dtype-rounding", base_cases: 1000, run: dtype_rounding },
    Suite { name: "attention-equivalence", base_cases: 60, run: attention_equivalence },
    Suite { name: "partition-invariance", base_cases: 60, run: partition_invariance },
    Suite { name: "gradient-identity", base_cases: 40, run: gradient_identity },
    Suite { name: "gamma-stationarity", base_cases: 20, run: gamma_stationarity },
    Suite { name: "parallel-energy", base_cases: 40, run: parallel_energy },
    Suite { name: "schedule-equivalence", base_cases: 60, run: schedule_equivalence },
    Suite { name: "decode-exactness", base_cases: 30, run: decode_exactness },
    Suite { name: "volume-formulas", base_cases: 60, run: volume_formulas },
    Suite { name: "memory-formulas", base_cases: 60, run: memory_formulas },
    Suite { name: "safe-softmax-invariance", base_cases: 40, run: safe_softmax },
    Suite { name: "overlap-feasibility", base_cases: 1, run: overlap },
];

/// Names of all suites in execution order.
pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.name).collect()
}

pub fn run_suites(opts: &VerifyOptions) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut ctx = Ctx {
                rng: seeded_rng(seed),
                cases: s.base_cases * opts.grid_size.max(1),
                fault: opts.inject_fault,
            };
            let cases = ctx.cases;
            let outcome = (s.run)(&mut ctx).map_err(|e| format!("suite seed {seed}: {e}"));
            SuiteResult { name: s.name, cases, outcome }
        })
        .collect()
}

/// Runs every suite, prints one line per suite, and returns the exit code.
pub fn run_verify<W: Write>(opts: &VerifyOptions, mut out: W) -> std::io::Result<i32> {
    let results = run_suites(opts);
    let mut failed = 0;
    for r in &results {
        match &r.outcome {
            Ok(()) => writeln!(out, "PASS {:<24} cases={}", r.name, r.cases)?,
            Err(msg) => {
                failed += 1;
                writeln!(out, "FAIL {:<24} cases={} {msg}", r.name, r.cases)?
            }
        }
    }
    writeln!(out, "{} suites, {} passed, {} failed (seed {})", results.len(), results.len() - failed, failed, opts.seed)?;
    Ok(if failed == 0 { 0 } else { 1 })
}

fn for_cases(ctx: &mut Ctx, mut case: impl FnMut(&mut Ctx, usize) -> CaseResult) -> CaseResult {
    for i in 0..ctx.cases {
        case(ctx, i).map_err(|e| format!("case {i}: {e}"))?;
    }
    Ok(())
}

fn lse_associativity(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let (a, b, x) = (c.uniform(-50.0, 50.0), c.uniform(-50.0, 50.0), c.uniform(-50.0, 50.0));
        let l = ok(lse_combine(ok(lse_combine(a, b))?, x))?;
        let r = ok(lse_combine(a, ok(lse_combine(b, x))?))?;
        let s = ok(lse_combine(b, a))? - ok(lse_combine(a, b))?;
        let id = ok(lse_combine(a, f64::NEG_INFINITY))?;
        check((l - r).abs() <= 1e-12 * l.abs().max(1.0) && s == 0.0 && id == a, || {
            format!("a={a} b={b} c={x}: (ab)c={l} a(bc)={r}")
        })
    })
}

fn dtype_rounding(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let x = c.uniform(-1.0, 1.0) * 10f64.powf(c.uniform(-30.0, 30.0));
        let y = x + c.uniform(0.0, 1.0) * x.abs();
        for (dt, eps) in [(DType::F32, 2f64.powi(-24)), (DType::Bf16, 2f64.powi(-8))] {
            let rx = dt.round(x);
            check(dt.round(rx) == rx, || format!("{dt} x={x}: not idempotent"))?;
            check(rx <= dt.round(y), || format!("{dt} x={x} y={y}: not monotone"))?;
            let normal = x.abs() >= f32::MIN_POSITIVE as f64;
            check(!normal || (rx - x).abs() <= eps * x.abs(), || format!("{dt} x={x}: rounding error too large"))?;
        }
        Ok(())
    })
}

fn random_input(c: &mut Ctx, max_n: usize, max_d: usize) -> CaseResultT<(AttentionInput, String)> {
    let (b, h, nq, n, d) = (c.range(1, 2), c.range(1, 3), c.range(1, 4), c.range(1, max_n), c.range(1, max_d));
    let causal = c.range(0, 1) == 1 && nq <= n;
    let input = AttentionInput::new(c.tensor(&[b, h, nq, d], 1.0)?, c.tensor(&[b, h, n, d], 1.0)?, c.tensor(&[b, h, n, d], 1.0)?)
        .causal(causal);
    Ok((input, format!("b={b} h={h} nq={nq} n={n} d={d} causal={causal}")))
}

fn random_sizes(c: &mut Ctx, n: usize) -> Vec<usize> {
    let parts = c.range(1, n.min(8));
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| c.range(0, n)).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut sizes: Vec<usize> = cuts.iter().map(|&x| std::mem::replace(&mut prev, x)).zip(cuts.iter()).map(|(a, b)| b - a).collect();
    sizes.push(n - prev);
    sizes
}

fn attention_equivalence(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let (input, params) = random_input(c, 40, 8)?;
        let naive = ok(attention_naive(&input))?;
        let err = rel_err(&ok(attention_online(&input))?, &naive)?;
        check(err <= 1e-10, || format!("{params}: online vs naive {err:e}"))?;
        if !input.causal {
            let sizes = random_sizes(c, input.k.shape()[2]);
            let err = rel_err(&ok(attention_partitioned(&input, &sizes))?, &naive)?;
            check(err <= 1e-10, || format!("{params} sizes={sizes:?}: partitioned vs naive {err:e}"))?;
        }
        Ok(())
    })
}

fn partition_invariance(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let (input, params) = random_input(c, 64, 8)?;
        let input = input.causal(false);
        let n = input.k.shape()[2];
        let (s1, s2) = (random_sizes(c, n), chunk_sizes(n, c.range(1, n)));
        let (a, b) = (ok(attention_partitioned(&input, &s1))?, ok(attention_partitioned(&input, &s2))?);
        let err = rel_err(&a, &b)?;
        check(err <= 1e-12, || format!("{params} {s1:?} vs {s2:?}: {err:e}"))
    })
}

fn energy_inputs(c: &mut Ctx, square: bool) -> CaseResultT<(Tensor, Tensor, Tensor, String)> {
    let (b, h, n, d) = (c.range(1, 2), c.range(1, 2), c.range(1, 24), c.range(1, 8));
    let nq = if square { n } else { c.range(1, 3) };
    let params = format!("b={b} h={h} nq={nq} n={n} d={d}");
    Ok((c.tensor(&[b, h, nq, d], 0.7)?, c.tensor(&[b, h, n, d], 0.7)?, c.tensor(&[b, h, n, d], 1.0)?, params))
}

/// Central difference of `f` along coordinate `j` of `x`.
fn central_diff(x: &Tensor, j: usize, h: f64, f: impl Fn(&Tensor) -> CaseResultT<f64>) -> CaseResultT<f64> {
    let (mut plus, mut minus) = (x.clone(), x.clone());
    plus.data_mut()[j] += h;
    minus.data_mut()[j] -= h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

fn gradient_identity(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let (q, k, v, params) = energy_inputs(c, false)?;
        let zero = Tensor::zeros(q.shape().to_vec(), DType::F64);
        let grad = ok(grad_energy_wrt_source(&q, &k, &v, &zero, Mask::Full))?;
        let att = ok(attention_naive(&AttentionInput::new(q.clone(), k.clone(), v.clone())))?;
        let err = ok(grad.max_abs_diff(&att))?;
        check(err <= 1e-12, || format!("{params}: grad vs attention {err:e}"))?;

        let zeta = c.tensor(q.shape(), 0.5)?;
        let grad = ok(grad_energy_wrt_source(&q, &k, &v, &zeta, Mask::Full))?;
        let total = |z: &Tensor| ok(energy(&q, &k, &v, z)).map(|e| e.value.data().iter().sum::<f64>());
        for _ in 0..3 {
            let j = c.range(0, q.len() - 1);
            let fd = central_diff(&zeta, j, 1e-5, total)?;
            let g = grad.data()[j];
            let rel = (fd - g).abs() / g.abs().max(1e-3);
            check(rel <= 1e-6, || format!("{params} coord {j}: analytic {g} vs fd {fd}"))?;
        }
        Ok(())
    })
}

fn gamma_stationarity(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let (q, k, v, params) = energy_inputs(c, true)?;
        let zeta = Tensor::zeros(q.shape().to_vec(), DType::F64);
        let z = ok(attention_naive(&AttentionInput::new(q.clone(), k.clone(), v.clone()).causal(true)))?;
        for _ in 0..3 {
            let j = c.range(0, q.len() - 1);
            let dz = central_diff(&zeta, j, 1e-5, |x| ok(gamma_log_likelihood(x, &z, &q, &k, &v)))?;
            let dzz = central_diff(&z, j, 1e-5, |x| ok(gamma_log_likelihood(&zeta, x, &q, &k, &v)))?;
            check(dz.abs() <= 1e-8 && dzz.abs() <= 1e-8, || {
                format!("{params} coord {j}: dGamma/dzeta={dz:e} dGamma/dz={dzz:e}")
            })?;
        }
        Ok(())
    })
}

fn parallel_energy(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let (q, k, v, params) = energy_inputs(c, false)?;
        let p = c.range(1, k.shape()[2]);
        let zeta = c.tensor(q.shape(), 0.5)?;
        let seq = ok(energy(&q, &k, &v, &zeta))?;
        let par = ok(energy_forward_parallel(&q, &k, &v, &zeta, p))?;
        let err = ok(par.value.max_abs_diff(&seq.value))?;
        check(err <= 1e-12 * seq.value.max_abs().max(1.0), || format!("{params} p={p}: forward {err:e}"))?;
        let zero = Tensor::zeros(q.shape().to_vec(), DType::F64);
        let saved = ok(energy_forward_parallel(&q, &k, &v, &zero, p))?;
        let g = ok(energy_grad_parallel(&q, &k, &v, &saved, p))?;
        let want = ok(grad_energy_wrt_source(&q, &k, &v, &zero, Mask::Full))?;
        let err = ok(g.max_abs_diff(&want))?;
        check(err <= 1e-12, || format!("{params} p={p}: gradient {err:e}"))
    })
}

fn schedule_equivalence(ctx: &mut Ctx) -> CaseResult {
    let fault = ctx.fault;
    let combine = move |a: &f64, b: &f64| {
        if fault {
            lse_combine(*b, *a).unwrap_or(f64::NAN) + 1e-9 * a.abs()
        } else {
            lse_combine(*a, *b).unwrap_or(f64::NAN)
        }
    };
    for_cases(ctx, |c, _| {
        let (nodes, g) = (c.range(1, 5), c.range(1, 8));
        let p = nodes * g;
        let xs: Vec<f64> = (0..p).map(|_| c.uniform(-20.0, 20.0)).collect();
        let want = ok(logsumexp(&xs))?;
        let params = format!("nodes={nodes} g={g}");
        let close = |x: f64| (x - want).abs() <= 1e-12 * want.abs().max(1.0);

        let t = tree_reduce(&xs, combine, f64::NEG_INFINITY);
        check(close(t.value) && t.rounds == ceil_log2(p), || format!("{params}: tree {} vs {want} in {} rounds", t.value, t.rounds))?;
        let r = ring_allreduce(&xs, combine, f64::NEG_INFINITY);
        check(close(r.value) && r.rounds == 2 * (p - 1), || format!("{params}: ring {} vs {want} in {} rounds", r.value, r.rounds))?;
        let h = ok(hierarchical_allreduce(&xs, combine, f64::NEG_INFINITY, nodes, g))?;
        check(close(h.value) && h.rounds_intra == g - 1 && h.rounds_inter == ceil_log2(nodes), || {
            format!("{params}: hier {} vs {want}, intra {} inter {}", h.value, h.rounds_intra, h.rounds_inter)
        })?;

        for strategy in [Strategy::TreeBinary, Strategy::Ring, Strategy::Hierarchical] {
            let len = c.range(1, 12);
            let sched = ReductionSchedule::allreduce(strategy, nodes, g, len);
            let bufs: Vec<Vec<f64>> = (0..p).map(|_| (0..len).map(|_| c.uniform(-5.0, 5.0)).collect()).collect();
            let (mut a, mut b) = (bufs.clone(), bufs.clone());
            ok(sched.execute(&mut a, combine))?;
            ok(sched.execute_parallel(&mut b, combine))?;
            check(a == b, || format!("{params} {strategy}: parallel execution differs"))?;
            for j in 0..len {
                let col: Vec<f64> = bufs.iter().map(|x| x[j]).collect();
                let want = ok(logsumexp(&col))?;
                check(a.iter().all(|x| (x[j] - want).abs() <= 1e-12 * want.abs().max(1.0)), || {
                    format!("{params} {strategy} len={len}: element {j} disagrees")
                })?;
            }
        }
        Ok(())
    })
}

fn random_topology(c: &mut Ctx, max_p: usize) -> Topology {
    loop {
        let (nodes, g) = (c.range(1, 4), c.range(1, 8));
        if nodes * g <= max_p {
            return Topology::with_shape(nodes, g).expect("positive shape");
        }
    }
}

fn decode_exactness(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let topo = random_topology(c, 16);
        let p = topo.workers();
        let (b, h, d, n) = (c.range(1, 2), c.range(1, 4), c.range(1, 8), c.range(p, 96));
        let params = format!("nodes={} g={} b={b} h={h} d={d} n={n}", topo.nodes, topo.gpus_per_node);
        let (q, k, v) = (c.tensor(&[b, h, 1, d], 1.0)?, c.tensor(&[b, h, n, d], 1.0)?, c.tensor(&[b, h, n, d], 1.0)?);
        let want = ok(attention_naive(&AttentionInput::new(q.clone(), k.clone(), v.clone())))?;
        let cache = ok(shard_kv(&k, &v, p))?;
        let strategy = [Strategy::TreeBinary, Strategy::Ring, Strategy::Hierarchical][c.range(0, 2)];
        for algo in [Algo::Tree, Algo::Ring] {
            let opts = DecodeOptions { allreduce: strategy, ..Default::default() };
            let seq = ok(decode(algo, &q, &cache, &topo, &opts))?;
            let err = rel_err(&seq.output, &want)?;
            check(err <= 1e-10, || format!("{params} {algo} {strategy}: {err:e}"))?;
            let thr = ok(decode(algo, &q, &cache, &topo, &DecodeOptions { exec: ExecMode::Threaded, ..opts }))?;
            check(thr == seq, || format!("{params} {algo}: threaded run differs"))?;
        }
        Ok(())
    })
}

fn random_shape(c: &mut Ctx, p: usize) -> DecodeShape {
    DecodeShape { batch: c.range(1, 3), heads: c.range(1, 16), seq_len: c.range(p, 4096), head_dim: c.range(1, 128) }
}

fn volume_formulas(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let topo = random_topology(c, 32);
        let p = topo.workers() as u64;
        let shape = random_shape(c, p as usize);
        let (b, d, nh, n) = (shape.batch as u64, shape.hidden() as u64, shape.heads as u64, shape.seq_len as u64);
        let params = format!("nodes={} g={} {shape:?}", topo.nodes, topo.gpus_per_node);
        for strategy in [Strategy::TreeBinary, Strategy::Ring, Strategy::Hierarchical] {
            let opts = DecodeOptions { allreduce: strategy, ..Default::default() };
            let tree = ok(model_decode(Algo::Tree, &shape, &topo, &opts))?;
            let per_worker = Ratio::new(tree.cost.elems_total(), p);
            let want = comm_volume_formula(Algo::Tree, b, Ratio::new(n, p), d, nh, p);
            check(per_worker == want, || format!("{params} {strategy}: tree {per_worker} vs {want}"))?;
        }
        let ring = ok(model_decode(Algo::Ring, &shape, &topo, &DecodeOptions::default()))?;
        let want = ring_total_volume(b, Ratio::new(n, p), d, p);
        check(Ratio::from(ring.cost.elems_total()) == want, || format!("{params}: ring {} vs {want}", ring.cost.elems_total()))
    })
}

fn memory_formulas(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let topo = random_topology(c, 32);
        let p = topo.workers();
        let shape = random_shape(c, p);
        let t = shape.seq_len.div_ceil(p) as u64;
        let (b, d, nh) = (shape.batch as u64, shape.hidden() as u64, shape.heads as u64);
        let params = format!("nodes={} g={} {shape:?}", topo.nodes, topo.gpus_per_node);
        let opts = DecodeOptions::default();
        let tree = ok(model_decode(Algo::Tree, &shape, &topo, &opts))?.cost.peak_elems_per_worker;
        let want = peak_memory_formula(Algo::Tree, b, t, d, nh);
        check(tree == want, || format!("{params}: tree peak {tree} vs {want}"))?;
        if p >= 2 {
            let ring = ok(model_decode(Algo::Ring, &shape, &topo, &opts))?.cost.peak_elems_per_worker;
            let want = peak_memory_formula(Algo::Ring, b, t, d, nh);
            check(ring == want, || format!("{params}: ring peak {ring} vs {want}"))?;
        }
        Ok(())
    })
}

fn safe_softmax(ctx: &mut Ctx) -> CaseResult {
    for_cases(ctx, |c, _| {
        let (q, k, v, params) = energy_inputs(c, false)?;
        let zeta = c.tensor(q.shape(), 0.5)?;
        let [b, h, nq, _] = ok(q.dims4())?;
        let shift = c.tensor(&[b, h, nq], 30.0)?;
        let shifted = ok(grad_shifted_energy(&q, &k, &v, &zeta, &shift))?;
        let plain = ok(grad_energy_wrt_source(&q, &k, &v, &zeta, Mask::Full))?;
        let err = ok(shifted.max_abs_diff(&plain))?;
        check(err <= 1e-12, || format!("{params}: shifted vs plain gradient {err:e}"))?;
        let masked = ok(energy_masked(&q, &k, &v, &zeta, Mask::Full))?;
        let full = ok(energy(&q, &k, &v, &zeta))?;
        check(masked == full, || format!("{params}: full mask differs from unmasked"))
    })
}

fn overlap(_ctx: &mut Ctx) -> CaseResult {
    let compute = ComputeModel::default();
    let topo = Topology { element_bytes: DType::Bf16.element_bytes(), ..Topology::default() };
    let r = overlap_feasibility(&topo, 1, 640_000 / 8, 2048, &compute);
    check(!r.feasible && r.ratio <= 0.1, || format!("N=640000 p=8 d=2048: ratio {}", r.ratio))?;
    let mut fast = topo;
    fast.intra.bandwidth_bps *= 1000.0;
    let r = overlap_feasibility(&fast, 1, 640_000 / 8, 2048, &compute);
    check(r.feasible, || format!("1000x bandwidth: ratio {}", r.ratio))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let mut out = Vec::new();
        let code = run_verify(&VerifyOptions::default(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(code, 0, "{text}");
        assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    }

    #[test]
    fn injected_fault_fails() {
        let results = run_suites(&VerifyOptions { inject_fault: true, ..Default::default() });
        let bad: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
        assert_eq!(bad, ["schedule-equivalence"]);
        assert!(results.iter().find(|r| !r.passed()).unwrap().outcome.as_ref().unwrap_err().contains("seed"));
    }
}

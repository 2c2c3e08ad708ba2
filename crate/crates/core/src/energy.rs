//! The attention energy `F(zeta) = log sum_a exp(q . k_a + zeta . v_a)`.
//!
//! `F` is the cumulant-generating function of the attention distribution
//! over values: its gradient with respect to the source `zeta` at zero is
//! the attention output, and higher derivatives of `exp(F)` give higher
//! moments. This module evaluates `F` sequentially and as a chunked tree
//! reduction, and differentiates it both analytically and through the
//! chunked path.
//!
//! Scores here carry no scale factor (`q . k`, not `q . k / sqrt(d)`); pass
//! pre-scaled queries if a scale is wanted.

use crate::attention::{check_qkv, chunk_ranges, dot};
use crate::error::{Error, Result};
use crate::numerics::{logsumexp_unchecked, lse_combine_unchecked, DType, Tensor};
use crate::reduction::tree_reduce;

/// Which keys each query row sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    Full,
    /// Row `i` of `N_q` sees keys `0..=i + (N - N_q)`.
    Causal,
}

impl Mask {
    fn visible(self, i: usize, nq: usize, n: usize) -> usize {
        match self {
            Mask::Full => n,
            Mask::Causal => (i + 1 + n.saturating_sub(nq)).min(n),
        }
    }
}

/// Energy per query row, with the two pieces kept for the gradient pass:
/// the global max `m` of the exponents and the shifted logsumexp
/// `shifted_lse = log sum exp(r - m)`. `value = shifted_lse + m`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEval {
    pub value: Tensor,
    pub m: Tensor,
    pub shifted_lse: Tensor,
}

/// Selects one query row of a `[b, h, n_q, d]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowIndex {
    pub batch: usize,
    pub head: usize,
    pub query: usize,
}

fn check_source(q: &Tensor, zeta: &Tensor) -> Result<()> {
    if zeta.shape() != q.shape() {
        return Err(Error::shape(format!(
            "source {:?} must match query shape {:?}",
            zeta.shape(),
            q.shape()
        )));
    }
    Ok(())
}

/// Exponents `q . k_a + zeta . v_a` for one row over `vis` keys.
fn exponents(q: &[f64], zeta: &[f64], keys: &[f64], vals: &[f64], dt: DType) -> Vec<f64> {
    let d = q.len();
    if d == 0 {
        return Vec::new();
    }
    keys.chunks_exact(d)
        .zip(vals.chunks_exact(d))
        .map(|(k, v)| dt.accum().round(dot(q, k, dt) + dot(zeta, v, dt)))
        .collect()
}

/// `(m, shifted_lse)` of a row of exponents.
fn split_lse(r: &[f64], dt: DType) -> (f64, f64) {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return (m, f64::NEG_INFINITY);
    }
    let at = dt.accum();
    let s = r.iter().fold(0.0, |acc, &x| at.round(acc + at.round(at.round(x - m).exp())));
    (m, at.round(s.ln()))
}

/// `F` per row over all keys (the decoding form).
pub fn energy(q: &Tensor, k: &Tensor, v: &Tensor, zeta: &Tensor) -> Result<EnergyEval> {
    energy_masked(q, k, v, zeta, Mask::Full)
}

pub fn energy_masked(q: &Tensor, k: &Tensor, v: &Tensor, zeta: &Tensor, mask: Mask) -> Result<EnergyEval> {
    let (b, h, nq, n, _) = check_qkv(q, k, v)?;
    check_source(q, zeta)?;
    let dt = q.dtype();
    let mut value = Tensor::zeros(vec![b, h, nq], dt);
    let mut m_out = Tensor::zeros(vec![b, h, nq], dt);
    let mut o_out = Tensor::zeros(vec![b, h, nq], dt);
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..nq {
                let vis = mask.visible(i, nq, n);
                let r = exponents(q.row(bi, hi, i), zeta.row(bi, hi, i), k.rows(bi, hi, 0, vis), v.rows(bi, hi, 0, vis), dt);
                let (m, o) = split_lse(&r, dt);
                let row = (bi * h + hi) * nq + i;
                m_out.data_mut()[row] = dt.round(m);
                o_out.data_mut()[row] = dt.round(o);
                value.data_mut()[row] = dt.round(o + m);
            }
        }
    }
    Ok(EnergyEval { value, m: m_out, shifted_lse: o_out })
}

/// `Z(zeta) = exp(F(zeta))` per row. Fails rather than returning infinity.
pub fn partition_with_source(q: &Tensor, k: &Tensor, v: &Tensor, zeta: &Tensor) -> Result<Tensor> {
    let eval = energy(q, k, v, zeta)?;
    let mut z = eval.value;
    for x in z.data_mut() {
        let e = x.exp();
        if !e.is_finite() {
            return Err(Error::Overflow { log_z: *x });
        }
        *x = e;
    }
    Ok(z)
}

/// `sum_i sum_h F_{i,h}` with causal truncation, summed over the batch.
/// Each head is an independent single-head energy.
pub fn energy_total_causal(q: &Tensor, k: &Tensor, v: &Tensor, zeta: &Tensor) -> Result<f64> {
    let (_, _, nq, n, _) = check_qkv(q, k, v)?;
    if nq != n {
        return Err(Error::shape(format!("causal total energy needs one query per key (N_q = {nq}, N = {n})")));
    }
    Ok(energy_masked(q, k, v, zeta, Mask::Causal)?.value.data().iter().sum())
}

/// Analytic `dF/dzeta`: `sum_a exp(r_a - F) v_a` per row.
pub fn grad_energy_wrt_source(q: &Tensor, k: &Tensor, v: &Tensor, zeta: &Tensor, mask: Mask) -> Result<Tensor> {
    let (b, h, nq, n, d) = check_qkv(q, k, v)?;
    check_source(q, zeta)?;
    let dt = q.dtype();
    let mut out = Tensor::zeros(vec![b, h, nq, d], dt);
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..nq {
                let vis = mask.visible(i, nq, n);
                let vals = v.rows(bi, hi, 0, vis);
                let r = exponents(q.row(bi, hi, i), zeta.row(bi, hi, i), k.rows(bi, hi, 0, vis), vals, dt);
                let (m, o) = split_lse(&r, dt);
                let f = dt.round(o + m);
                weighted_value_sum(&r, f, vals, dt, out.row_mut(bi, hi, i));
            }
        }
    }
    Ok(out)
}

/// Gradient of the shifted energy `F_s = log sum exp(r_a - s)` for an
/// arbitrary per-row shift `s` (shape `[b, h, n_q]`), evaluated through its
/// own logsumexp. Mathematically identical to the unshifted gradient.
pub fn grad_shifted_energy(q: &Tensor, k: &Tensor, v: &Tensor, zeta: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, h, nq, n, d) = check_qkv(q, k, v)?;
    check_source(q, zeta)?;
    if shift.shape() != [b, h, nq] {
        return Err(Error::shape("shift must be [b, h, n_q]"));
    }
    let dt = q.dtype();
    let mut out = Tensor::zeros(vec![b, h, nq, d], dt);
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..nq {
                let s = shift.data()[(bi * h + hi) * nq + i];
                let vals = v.rows(bi, hi, 0, n);
                let r: Vec<f64> = exponents(q.row(bi, hi, i), zeta.row(bi, hi, i), k.rows(bi, hi, 0, n), vals, dt)
                    .into_iter()
                    .map(|x| dt.accum().round(x - s))
                    .collect();
                let f_shifted = logsumexp_unchecked(&r);
                weighted_value_sum(&r, f_shifted, vals, dt, out.row_mut(bi, hi, i));
            }
        }
    }
    Ok(out)
}

/// `out = sum_a exp(r_a - f) v_a`.
fn weighted_value_sum(r: &[f64], f: f64, vals: &[f64], dt: DType, out: &mut [f64]) {
    let at = dt.accum();
    let d = out.len();
    out.iter_mut().for_each(|x| *x = 0.0);
    for (&ra, va) in r.iter().zip(vals.chunks_exact(d.max(1))) {
        let w = at.round(at.round(ra - f).exp());
        for (acc, &x) in out.iter_mut().zip(va) {
            *acc = at.round(*acc + at.round(w * x));
        }
    }
    out.iter_mut().for_each(|x| *x = dt.round(*x));
}

fn check_chunks(n: usize, p: usize) -> Result<()> {
    if p < 1 || p > n {
        return Err(Error::arg(format!("chunk count p = {p} must satisfy 1 <= p <= N = {n}")));
    }
    Ok(())
}

/// Chunked energy forward pass for single-query decoding rows:
///
/// 1. split keys/values into `p` contiguous chunks;
/// 2. each chunk computes its exponents `r = q . k + zeta . v`;
/// 3. `m` = tree max-reduce of the chunk maxima;
/// 4. each chunk shifts by `m` and takes its local logsumexp;
/// 5. `shifted_lse` = tree logsumexp-reduce of the chunk results.
pub fn energy_forward_parallel(q: &Tensor, k: &Tensor, v: &Tensor, zeta: &Tensor, p: usize) -> Result<EnergyEval> {
    let (b, h, nq, n, _) = check_qkv(q, k, v)?;
    check_source(q, zeta)?;
    check_chunks(n, p)?;
    let dt = q.dtype();
    let ranges = chunk_ranges(n, p);
    let mut value = Tensor::zeros(vec![b, h, nq], dt);
    let mut m_out = Tensor::zeros(vec![b, h, nq], dt);
    let mut o_out = Tensor::zeros(vec![b, h, nq], dt);
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..nq {
                let (qr, zr) = (q.row(bi, hi, i), zeta.row(bi, hi, i));
                let local: Vec<Vec<f64>> = ranges
                    .iter()
                    .map(|rg| exponents(qr, zr, k.rows(bi, hi, rg.start, rg.end), v.rows(bi, hi, rg.start, rg.end), dt))
                    .collect();
                let local_max: Vec<f64> =
                    local.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
                let m = tree_reduce(&local_max, |a: &f64, b: &f64| a.max(*b), f64::NEG_INFINITY).value;
                let local_lse: Vec<f64> = local
                    .iter()
                    .map(|r| {
                        let shifted: Vec<f64> = r.iter().map(|&x| dt.accum().round(x - m)).collect();
                        let (lm, lo) = split_lse(&shifted, dt);
                        dt.round(lm + lo)
                    })
                    .collect();
                let o = tree_reduce(&local_lse, |a: &f64, b: &f64| dt.round(lse_combine_unchecked(*a, *b)), f64::NEG_INFINITY)
                    .value;
                let row = (bi * h + hi) * nq + i;
                m_out.data_mut()[row] = dt.round(m);
                o_out.data_mut()[row] = dt.round(o);
                value.data_mut()[row] = dt.round(o + m);
            }
        }
    }
    Ok(EnergyEval { value, m: m_out, shifted_lse: o_out })
}

/// Chunked `dF/dzeta` at `zeta = 0` from a saved forward pass, without
/// materialising `zeta`: each chunk computes `r = q . k - m` and
/// `R = exp(r - shifted_lse) v`, and the chunk sums are tree-reduced.
pub fn energy_grad_parallel(q: &Tensor, k: &Tensor, v: &Tensor, saved: &EnergyEval, p: usize) -> Result<Tensor> {
    let (b, h, nq, n, d) = check_qkv(q, k, v)?;
    check_chunks(n, p)?;
    for t in [&saved.value, &saved.m, &saved.shifted_lse] {
        if t.shape() != [b, h, nq] {
            return Err(Error::shape(format!("saved energy {:?} does not match queries [{b}, {h}, {nq}]", t.shape())));
        }
    }
    let dt = q.dtype();
    let ranges = chunk_ranges(n, p);
    let mut out = Tensor::zeros(vec![b, h, nq, d], dt);
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..nq {
                let row = (bi * h + hi) * nq + i;
                let (m, o) = (saved.m.data()[row], saved.shifted_lse.data()[row]);
                let qr = q.row(bi, hi, i);
                let local: Vec<Vec<f64>> = ranges
                    .iter()
                    .map(|rg| {
                        let at = dt.accum();
                        let mut acc = vec![0.0; d];
                        for a in rg.clone() {
                            let r = at.round(dot(qr, k.row(bi, hi, a), dt) - m);
                            let w = at.round(at.round(r - o).exp());
                            for (s, &x) in acc.iter_mut().zip(v.row(bi, hi, a)) {
                                *s = at.round(*s + at.round(w * x));
                            }
                        }
                        acc.into_iter().map(|x| dt.round(x)).collect::<Vec<f64>>()
                    })
                    .collect();
                let z = tree_reduce(
                    &local,
                    |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| dt.round(x + y)).collect(),
                    vec![0.0; d],
                )
                .value;
                out.row_mut(bi, hi, i).copy_from_slice(&z);
            }
        }
    }
    Ok(out)
}

/// Log-likelihood `sum_{i,A} z_{i,A} zeta_{i,A} - sum_i F_i(zeta)`, with
/// causal `F_i` summed over heads and batch. `F` enters once per position.
pub fn gamma_log_likelihood(zeta: &Tensor, z: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<f64> {
    if z.shape() != zeta.shape() {
        return Err(Error::shape(format!("z {:?} and zeta {:?} differ", z.shape(), zeta.shape())));
    }
    let coupling: f64 = z.data().iter().zip(zeta.data()).map(|(a, b)| a * b).sum();
    Ok(coupling - energy_total_causal(q, k, v, zeta)?)
}

/// First or second moment of the values under the attention distribution
/// `P_a = softmax(q . k)_a` of one query row: `order == 1` gives
/// `sum_a P_a v_{a,A}`, `order == 2` gives `sum_a P_a v_{a,A1} v_{a,A2}`.
pub fn moment_via_source(q: &Tensor, k: &Tensor, v: &Tensor, row: RowIndex, order: usize, coords: &[usize]) -> Result<f64> {
    let (b, h, nq, n, d) = check_qkv(q, k, v)?;
    if !(1..=2).contains(&order) {
        return Err(Error::arg(format!("moment order must be 1 or 2, got {order}")));
    }
    if coords.len() != order || coords.iter().any(|&c| c >= d) {
        return Err(Error::arg(format!("order {order} needs {order} coordinates below {d}, got {coords:?}")));
    }
    if row.batch >= b || row.head >= h || row.query >= nq {
        return Err(Error::arg(format!("row {row:?} out of range")));
    }
    let dt = q.dtype();
    let qr = q.row(row.batch, row.head, row.query);
    let scores: Vec<f64> = (0..n).map(|a| dot(qr, k.row(row.batch, row.head, a), dt)).collect();
    let f = logsumexp_unchecked(&scores);
    Ok((0..n)
        .map(|a| {
            let va = v.row(row.batch, row.head, a);
            (scores[a] - f).exp() * coords.iter().map(|&c| va[c]).product::<f64>()
        })
        .sum())
}

/// Attention probabilities `P_a` of one row (zeta = 0), for normalisation checks.
pub fn attention_probabilities(q: &Tensor, k: &Tensor, row: RowIndex) -> Result<Vec<f64>> {
    let [_, _, n, _] = k.dims4()?;
    let qr = q.row(row.batch, row.head, row.query);
    let scores: Vec<f64> = (0..n).map(|a| dot(qr, k.row(row.batch, row.head, a), DType::F64)).collect();
    let f = logsumexp_unchecked(&scores);
    Ok(scores.iter().map(|s| (s - f).exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_naive, AttentionInput};
    use crate::numerics::{logsumexp, seeded_random_tensor};

    struct Case {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        zeta: Tensor,
    }

    fn case(b: usize, h: usize, nq: usize, n: usize, d: usize, seed: u64) -> Case {
        Case {
            q: seeded_random_tensor(&[b, h, nq, d], seed, 1.0).unwrap(),
            k: seeded_random_tensor(&[b, h, n, d], seed + 1, 1.0).unwrap(),
            v: seeded_random_tensor(&[b, h, n, d], seed + 2, 1.0).unwrap(),
            zeta: seeded_random_tensor(&[b, h, nq, d], seed + 3, 0.3).unwrap(),
        }
    }

    fn zeros_like(t: &Tensor) -> Tensor {
        Tensor::zeros(t.shape().to_vec(), t.dtype())
    }

    #[test]
    fn energy_trivial_values() {
        let c = case(1, 1, 1, 8, 4, 1);
        let z0 = zeros_like(&c.q);
        let e = energy(&zeros_like(&c.q), &c.k, &c.v, &z0).unwrap();
        assert!((e.value.data()[0] - 8f64.ln()).abs() < 1e-15);

        let e = energy(&c.q, &c.k, &c.v, &z0).unwrap();
        let scores: Vec<f64> = (0..8).map(|a| dot(c.q.data(), c.k.row(0, 0, a), DType::F64)).collect();
        assert!((e.value.data()[0] - logsumexp(&scores).unwrap()).abs() < 1e-12);
        assert_eq!(e.value.data()[0], e.shifted_lse.data()[0] + e.m.data()[0]);
    }

    #[test]
    fn energy_shift_identity() {
        // An extra coordinate with q = 1 and k_a = 3 for every key adds
        // exactly 3 to every exponent.
        let c = case(1, 1, 1, 6, 3, 9);
        let mut qd = Vec::new();
        let mut kd = Vec::new();
        let mut vd = Vec::new();
        for a in 0..6 {
            kd.extend_from_slice(c.k.row(0, 0, a));
            kd.push(3.0);
            vd.extend_from_slice(c.v.row(0, 0, a));
            vd.push(0.0);
        }
        qd.extend_from_slice(c.q.data());
        qd.push(1.0);
        let q2 = Tensor::from_f64(vec![1, 1, 1, 4], qd).unwrap();
        let k2 = Tensor::from_f64(vec![1, 1, 6, 4], kd).unwrap();
        let v2 = Tensor::from_f64(vec![1, 1, 6, 4], vd).unwrap();
        let base = energy(&c.q, &c.k, &c.v, &c.zeta).unwrap().value.data()[0];
        let mut z2 = c.zeta.data().to_vec();
        z2.push(0.0);
        let shifted = energy(&q2, &k2, &v2, &Tensor::from_f64(vec![1, 1, 1, 4], z2).unwrap()).unwrap();
        assert!((shifted.value.data()[0] - base - 3.0).abs() < 1e-12);
    }

    #[test]
    fn partition_function() {
        let c = case(1, 1, 1, 5, 2, 3);
        let z0 = zeros_like(&c.q);
        let z = partition_with_source(&zeros_like(&c.q), &c.k, &c.v, &z0).unwrap();
        assert!((z.data()[0] - 5.0).abs() < 1e-12);

        let one = case(1, 1, 1, 1, 3, 4);
        let z = partition_with_source(&one.q, &one.k, &one.v, &one.zeta).unwrap();
        let expect = (dot(one.q.data(), one.k.data(), DType::F64) + dot(one.zeta.data(), one.v.data(), DType::F64)).exp();
        assert!((z.data()[0] - expect).abs() <= 1e-12 * expect);

        let e = energy(&c.q, &c.k, &c.v, &c.zeta).unwrap();
        let z = partition_with_source(&c.q, &c.k, &c.v, &c.zeta).unwrap();
        assert!((z.data()[0].ln() - e.value.data()[0]).abs() < 1e-12);

        let huge = Tensor::from_f64(vec![1, 1, 1, 1], vec![1000.0]).unwrap();
        let k = Tensor::from_f64(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let err = partition_with_source(&huge, &k, &k, &zeros_like(&huge)).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
    }

    #[test]
    fn causal_total() {
        let c = case(1, 1, 1, 1, 3, 5);
        let t = energy_total_causal(&c.q, &c.k, &c.v, &c.zeta).unwrap();
        let expect = dot(c.q.data(), c.k.data(), DType::F64) + dot(c.zeta.data(), c.v.data(), DType::F64);
        assert!((t - expect).abs() < 1e-12);

        let c = case(1, 1, 4, 4, 3, 6);
        let z = zeros_like(&c.q);
        let t = energy_total_causal(&z, &c.k, &c.v, &z).unwrap();
        assert!((t - 24f64.ln()).abs() < 1e-12);

        let c = case(1, 2, 5, 5, 3, 7);
        let both = energy_total_causal(&c.q, &c.k, &c.v, &c.zeta).unwrap();
        let per_head: f64 = (0..2)
            .map(|h| {
                energy_total_causal(&c.q.head(h).unwrap(), &c.k.head(h).unwrap(), &c.v.head(h).unwrap(), &c.zeta.head(h).unwrap())
                    .unwrap()
            })
            .sum();
        assert!((both - per_head).abs() < 1e-12);

        let c = case(1, 1, 2, 5, 3, 8);
        assert!(energy_total_causal(&c.q, &c.k, &c.v, &c.zeta).is_err());
    }

    #[test]
    fn gradient_at_zero_is_attention() {
        let c = case(2, 2, 1, 9, 4, 11);
        let z0 = zeros_like(&c.q);
        let g = grad_energy_wrt_source(&c.q, &c.k, &c.v, &z0, Mask::Full).unwrap();
        let att = attention_naive(&AttentionInput::new(c.q.clone(), c.k.clone(), c.v.clone())).unwrap();
        assert!(g.max_abs_diff(&att).unwrap() < 1e-12);

        let g = grad_energy_wrt_source(&z0, &c.k, &c.v, &z0, Mask::Full).unwrap();
        for c0 in 0..4 {
            let mean = (0..9).map(|a| c.v.row(0, 0, a)[c0]).sum::<f64>() / 9.0;
            assert!((g.row(0, 0, 0)[c0] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn parallel_forward_and_grad() {
        let c = case(1, 2, 1, 16, 4, 12);
        let seq = energy(&c.q, &c.k, &c.v, &c.zeta).unwrap();
        let p1 = energy_forward_parallel(&c.q, &c.k, &c.v, &c.zeta, 1).unwrap();
        assert_eq!(p1, seq);
        for p in [2, 3, 7, 16] {
            let e = energy_forward_parallel(&c.q, &c.k, &c.v, &c.zeta, p).unwrap();
            assert!(e.value.max_abs_diff(&seq.value).unwrap() < 1e-12, "p = {p}");
        }
        assert!(energy_forward_parallel(&c.q, &c.k, &c.v, &c.zeta, 17).is_err());
        assert!(energy_forward_parallel(&c.q, &c.k, &c.v, &c.zeta, 0).is_err());

        let z0 = zeros_like(&c.q);
        let att = attention_naive(&AttentionInput::new(c.q.clone(), c.k.clone(), c.v.clone())).unwrap();
        let grads: Vec<Tensor> = [1, 2, 4]
            .iter()
            .map(|&p| {
                let saved = energy_forward_parallel(&c.q, &c.k, &c.v, &z0, p).unwrap();
                energy_grad_parallel(&c.q, &c.k, &c.v, &saved, p).unwrap()
            })
            .collect();
        for g in &grads {
            assert!(g.max_abs_diff(&att).unwrap() < 1e-12);
            assert!(g.max_abs_diff(&grads[0]).unwrap() < 1e-12);
        }

        let one = case(1, 1, 1, 1, 3, 2);
        let z0 = zeros_like(&one.q);
        let saved = energy_forward_parallel(&one.q, &one.k, &one.v, &z0, 1).unwrap();
        let g = energy_grad_parallel(&one.q, &one.k, &one.v, &saved, 1).unwrap();
        assert!(g.max_abs_diff(&one.v).unwrap() < 1e-15);

        let bad = EnergyEval { value: Tensor::zeros(vec![1, 1, 2], DType::F64), ..saved.clone() };
        assert!(energy_grad_parallel(&one.q, &one.k, &one.v, &bad, 1).is_err());
    }

    #[test]
    fn gamma_at_zero_source() {
        let c = case(1, 2, 6, 6, 3, 13);
        let z0 = zeros_like(&c.q);
        let g = gamma_log_likelihood(&z0, &c.v.slice_axis2(0, 6).unwrap(), &c.q, &c.k, &c.v).unwrap();
        let f = energy_total_causal(&c.q, &c.k, &c.v, &z0).unwrap();
        assert!((g + f).abs() < 1e-12);
        assert!(gamma_log_likelihood(&z0, &Tensor::zeros(vec![1, 2, 5, 3], DType::F64), &c.q, &c.k, &c.v).is_err());
    }

    #[test]
    fn moments() {
        let c = case(1, 1, 1, 7, 3, 14);
        let row = RowIndex { batch: 0, head: 0, query: 0 };
        let att = attention_naive(&AttentionInput::new(c.q.clone(), c.k.clone(), c.v.clone())).unwrap();
        for a in 0..3 {
            let m1 = moment_via_source(&c.q, &c.k, &c.v, row, 1, &[a]).unwrap();
            assert!((m1 - att.data()[a]).abs() < 1e-12);
        }
        let vconst = Tensor::from_f64(vec![1, 1, 7, 3], [0.5, -2.0, 1.5].repeat(7)).unwrap();
        let m2 = moment_via_source(&c.q, &c.k, &vconst, row, 2, &[0, 1]).unwrap();
        assert!((m2 - (-1.0)).abs() < 1e-12);

        assert!(moment_via_source(&c.q, &c.k, &c.v, row, 3, &[0, 0, 0]).is_err());
        assert!(moment_via_source(&c.q, &c.k, &c.v, row, 1, &[0, 1]).is_err());

        let p = attention_probabilities(&c.q, &c.k, row).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_gradient_matches() {
        let c = case(1, 2, 3, 10, 4, 15);
        let shift = Tensor::from_f64(vec![1, 2, 3], vec![5.0, -3.0, 0.25, 100.0, -40.0, 1.0]).unwrap();
        let g = grad_energy_wrt_source(&c.q, &c.k, &c.v, &c.zeta, Mask::Full).unwrap();
        let gs = grad_shifted_energy(&c.q, &c.k, &c.v, &c.zeta, &shift).unwrap();
        assert!(g.max_abs_diff(&gs).unwrap() < 1e-12);
    }
}

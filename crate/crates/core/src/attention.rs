//! Exact single-device attention: naive, online (streaming), and chunked
//! partials with an associative combiner.
//!
//! Tensors are `[batch, heads, rows, head_dim]`. Every arithmetic step is
//! rounded to the query's dtype so low-precision runs see the same rounding
//! pattern regardless of which form is used.

use crate::error::{Error, Result};
use crate::numerics::{DType, Tensor};

/// Inputs to one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionInput {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Query row `j` of `N_q` attends keys `0..=j + (N - N_q)` (end-aligned).
    pub causal: bool,
    /// Multiplier applied to `q . k`. Defaults to 1.
    pub scale: f64,
}

impl AttentionInput {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Self {
        AttentionInput { q, k, v, causal: false, scale: 1.0 }
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Returns `(b, heads, n_q, n, d_h)` after checking shapes agree.
    pub fn dims(&self) -> Result<(usize, usize, usize, usize, usize)> {
        check_qkv(&self.q, &self.k, &self.v)
    }

    /// Number of keys query row `j` may attend.
    fn visible(&self, j: usize, n_q: usize, n: usize) -> usize {
        if self.causal {
            (j + 1 + n.saturating_sub(n_q)).min(n)
        } else {
            n
        }
    }
}

pub(crate) fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let [b, h, nq, d] = q.dims4()?;
    let [kb, kh, n, kd] = k.dims4()?;
    if k.shape() != v.shape() {
        return Err(Error::shape(format!("k {:?} and v {:?} differ", k.shape(), v.shape())));
    }
    if (kb, kh, kd) != (b, h, d) {
        return Err(Error::shape(format!(
            "q {:?} incompatible with k/v {:?}",
            q.shape(),
            k.shape()
        )));
    }
    Ok((b, h, nq, n, d))
}

/// Per-row associative softmax state over one chunk of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPartial {
    /// Max scaled score, `[b, h, n_q]`, at accumulation precision.
    pub m: Tensor,
    /// logsumexp of scaled scores, `[b, h, n_q]`, at accumulation precision.
    pub lse: Tensor,
    /// Output normalised by the chunk's own denominator, `[b, h, n_q, d_h]`.
    pub o: Tensor,
}

impl SoftmaxPartial {
    /// The identity element: no keys.
    pub fn empty(b: usize, h: usize, nq: usize, d: usize, dtype: DType) -> Self {
        SoftmaxPartial {
            m: Tensor::filled(vec![b, h, nq], f64::NEG_INFINITY, dtype.accum()),
            lse: Tensor::filled(vec![b, h, nq], f64::NEG_INFINITY, dtype.accum()),
            o: Tensor::zeros(vec![b, h, nq, d], dtype),
        }
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let [b, h, nq, d] = self.o.dims4()?;
        if self.m.shape() != [b, h, nq] || self.lse.shape() != [b, h, nq] {
            return Err(Error::shape("partial m/lse do not match o"));
        }
        Ok((b, h, nq, d))
    }

    /// Rescales to an unnormalised numerator/denominator pair relative to a
    /// shared shift `m_shared` (one value per row): `n = o * exp(lse - m)`,
    /// `d = exp(lse - m)`. This is the payload the decode allreduce carries.
    pub fn numerator_denominator(&self, m_shared: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (_, _, _, d) = self.dims()?;
        if m_shared.len() != self.lse.len() {
            return Err(Error::shape("shared max has wrong length"));
        }
        let dt = self.o.dtype();
        let mut num = Vec::with_capacity(self.o.len());
        let mut den = Vec::with_capacity(self.lse.len());
        for (row, (&lse, &m)) in self.lse.data().iter().zip(m_shared).enumerate() {
            let w = if lse == f64::NEG_INFINITY { 0.0 } else { dt.accum().round((lse - m).exp()) };
            den.push(dt.round(w));
            num.extend(self.o.data()[row * d..(row + 1) * d].iter().map(|&x| dt.round(x * w)));
        }
        Ok((num, den))
    }

    /// Online merge of two partials over disjoint key sets; `self` is the
    /// left operand.
    pub fn merge(&self, other: &SoftmaxPartial) -> Result<SoftmaxPartial> {
        let dims = self.dims()?;
        if other.dims()? != dims {
            return Err(Error::shape("merging partials of different shapes"));
        }
        let (_, _, _, d) = dims;
        let dt = self.o.dtype();
        let at = dt.accum();
        let mut out = self.clone();
        for row in 0..self.lse.len() {
            let (la, lb) = (self.lse.data()[row], other.lse.data()[row]);
            let mm = self.m.data()[row].max(other.m.data()[row]);
            out.m.data_mut()[row] = mm;
            let top = la.max(lb);
            if top == f64::NEG_INFINITY {
                continue;
            }
            let wa = at.round(at.round(la - top).exp());
            let wb = at.round(at.round(lb - top).exp());
            let total = at.round(wa + wb);
            out.lse.data_mut()[row] = at.round(top + at.round(total.ln()));
            let oa = &self.o.data()[row * d..(row + 1) * d];
            let ob = &other.o.data()[row * d..(row + 1) * d];
            for (dst, (&xa, &xb)) in out.o.data_mut()[row * d..(row + 1) * d].iter_mut().zip(oa.iter().zip(ob)) {
                let n = at.round(at.round(xa * wa) + at.round(xb * wb));
                *dst = dt.round(n / total);
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64], dt: DType) -> f64 {
    if dt == DType::F64 {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let at = dt.accum();
    a.iter().zip(b).fold(0.0, |acc, (x, y)| at.round(acc + at.round(x * y)))
}

/// `(m, lse, o)` for one query row over `t` contiguous keys/values.
fn row_partial(q: &[f64], keys: &[f64], vals: &[f64], scale: f64, dt: DType, o: &mut [f64]) -> (f64, f64) {
    let at = dt.accum();
    let d = q.len();
    let t = if d == 0 { 0 } else { keys.len() / d };
    o.iter_mut().for_each(|x| *x = 0.0);
    if t == 0 {
        return (f64::NEG_INFINITY, f64::NEG_INFINITY);
    }
    let scores: Vec<f64> = keys
        .chunks_exact(d)
        .map(|k| at.round(scale * dot(q, k, dt)))
        .collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut den = 0.0;
    for (s, v) in scores.iter().zip(vals.chunks_exact(d)) {
        let w = at.round(at.round(s - m).exp());
        den = at.round(den + w);
        for (acc, &x) in o.iter_mut().zip(v) {
            *acc = at.round(*acc + at.round(w * x));
        }
    }
    for x in o.iter_mut() {
        *x = dt.round(*x / den);
    }
    (m, at.round(m + at.round(den.ln())))
}

/// Softmax-weighted average of values, evaluated row by row with max
/// subtraction.
pub fn attention_naive(input: &AttentionInput) -> Result<Tensor> {
    let (b, h, nq, n, d) = input.dims()?;
    let dt = input.q.dtype();
    let mut out = Tensor::zeros(vec![b, h, nq, d], dt);
    for bi in 0..b {
        for hi in 0..h {
            for j in 0..nq {
                let vis = input.visible(j, nq, n);
                let keys = input.k.rows(bi, hi, 0, vis);
                let vals = input.v.rows(bi, hi, 0, vis);
                let q = input.q.row(bi, hi, j);
                row_partial(q, keys, vals, input.scale, dt, out.row_mut(bi, hi, j));
            }
        }
    }
    Ok(out)
}

/// Streaming attention: one key at a time, keeping a running max `m`, a
/// running denominator `den` and a running numerator vector, each rescaled
/// by `exp(m_old - m_new)` when the max grows. Returns numerator / den.
pub fn attention_online(input: &AttentionInput) -> Result<Tensor> {
    let (b, h, nq, n, d) = input.dims()?;
    let dt = input.q.dtype();
    let at = dt.accum();
    let mut out = Tensor::zeros(vec![b, h, nq, d], dt);
    let mut num = vec![0.0; d];
    for bi in 0..b {
        for hi in 0..h {
            for j in 0..nq {
                let q = input.q.row(bi, hi, j);
                let mut m = f64::NEG_INFINITY;
                let mut den = 0.0;
                num.iter_mut().for_each(|x| *x = 0.0);
                for a in 0..input.visible(j, nq, n) {
                    let s = at.round(input.scale * dot(q, input.k.row(bi, hi, a), dt));
                    let m_new = m.max(s);
                    let decay = if m == f64::NEG_INFINITY { 0.0 } else { at.round(at.round(m - m_new).exp()) };
                    let w = at.round(at.round(s - m_new).exp());
                    den = at.round(at.round(den * decay) + w);
                    for (acc, &x) in num.iter_mut().zip(input.v.row(bi, hi, a)) {
                        *acc = at.round(at.round(*acc * decay) + at.round(w * x));
                    }
                    m = m_new;
                }
                for (dst, &x) in out.row_mut(bi, hi, j).iter_mut().zip(&num) {
                    *dst = dt.round(x / den);
                }
            }
        }
    }
    Ok(out)
}

/// Exact local attention over one chunk of keys, returning the chunk's
/// normalised output and its logsumexp. An empty chunk gives the identity
/// partial `(-inf, -inf, 0)`.
pub fn attention_chunk_partial(q: &Tensor, k_chunk: &Tensor, v_chunk: &Tensor, scale: f64) -> Result<SoftmaxPartial> {
    let (b, h, nq, t, d) = check_qkv(q, k_chunk, v_chunk)?;
    let dt = q.dtype();
    let mut part = SoftmaxPartial::empty(b, h, nq, d, dt);
    if t == 0 {
        return Ok(part);
    }
    for bi in 0..b {
        for hi in 0..h {
            for j in 0..nq {
                let row = (bi * h + hi) * nq + j;
                let (m, lse) = row_partial(
                    q.row(bi, hi, j),
                    k_chunk.rows(bi, hi, 0, t),
                    v_chunk.rows(bi, hi, 0, t),
                    scale,
                    dt,
                    part.o.row_mut(bi, hi, j),
                );
                part.m.data_mut()[row] = m;
                part.lse.data_mut()[row] = lse;
            }
        }
    }
    Ok(part)
}

/// Combines partials over disjoint key chunks into the exact attention
/// output. The shared shift is the max of the partials' `lse` values; the
/// result is `sum(o * exp(lse - m)) / sum(exp(lse - m))`.
pub fn combine_partials(parts: &[SoftmaxPartial]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::NoKeysAttended { row: 0 })?;
    let (b, h, nq, d) = first.dims()?;
    for p in parts {
        if p.dims()? != (b, h, nq, d) {
            return Err(Error::shape("partials disagree on shape"));
        }
    }
    let dt = first.o.dtype();
    let at = dt.accum();
    let rows = b * h * nq;
    let mut out = Tensor::zeros(vec![b, h, nq, d], dt);
    for row in 0..rows {
        let m = parts.iter().map(|p| p.lse.data()[row]).fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::NoKeysAttended { row });
        }
        let mut den = 0.0;
        let dst = &mut out.data_mut()[row * d..(row + 1) * d];
        for p in parts {
            let lse = p.lse.data()[row];
            if lse == f64::NEG_INFINITY {
                continue;
            }
            let w = at.round(at.round(lse - m).exp());
            den = at.round(den + w);
            for (acc, &x) in dst.iter_mut().zip(&p.o.data()[row * d..(row + 1) * d]) {
                *acc = at.round(*acc + at.round(x * w));
            }
        }
        for x in dst.iter_mut() {
            *x = dt.round(*x / den);
        }
    }
    Ok(out)
}

/// Chunk extents for splitting `n` items over `p` parts: the first `n % p`
/// chunks get `ceil(n / p)`, the rest `floor(n / p)`.
pub fn chunk_sizes(n: usize, p: usize) -> Vec<usize> {
    if p == 0 {
        return Vec::new();
    }
    let (base, extra) = (n / p, n % p);
    (0..p).map(|i| base + usize::from(i < extra)).collect()
}

/// Half-open ranges matching [`chunk_sizes`].
pub fn chunk_ranges(n: usize, p: usize) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    chunk_sizes(n, p)
        .into_iter()
        .map(|len| {
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Attention computed as chunk partials over the given chunk extents, then
/// combined. Non-causal only.
pub fn attention_partitioned(input: &AttentionInput, sizes: &[usize]) -> Result<Tensor> {
    let (_, _, _, n, _) = input.dims()?;
    if input.causal {
        return Err(Error::arg("partitioned attention is defined for the non-causal case"));
    }
    if sizes.iter().sum::<usize>() != n {
        return Err(Error::arg(format!("chunk sizes {sizes:?} do not cover {n} keys")));
    }
    let mut start = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &len in sizes {
        let k = input.k.slice_axis2(start, start + len)?;
        let v = input.v.slice_axis2(start, start + len)?;
        parts.push(attention_chunk_partial(&input.q, &k, &v, input.scale)?);
        start += len;
    }
    combine_partials(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{logsumexp, seeded_random_tensor};

    fn rand4(shape: [usize; 4], seed: u64) -> Tensor {
        seeded_random_tensor(&shape, seed, 1.0).unwrap()
    }

    fn input(b: usize, h: usize, nq: usize, n: usize, d: usize, seed: u64) -> AttentionInput {
        AttentionInput::new(
            rand4([b, h, nq, d], seed),
            rand4([b, h, n, d], seed + 1000),
            rand4([b, h, n, d], seed + 2000),
        )
    }

    /// Independent reference: plain loops, softmax materialised per row.
    fn oracle(inp: &AttentionInput) -> Vec<f64> {
        let [b, h, nq, d] = inp.q.dims4().unwrap();
        let n = inp.k.shape()[2];
        let mut out = Vec::new();
        for bi in 0..b {
            for hi in 0..h {
                for j in 0..nq {
                    let vis = if inp.causal { j + 1 + (n - nq) } else { n };
                    let s: Vec<f64> = (0..vis)
                        .map(|a| {
                            let q = inp.q.row(bi, hi, j);
                            let k = inp.k.row(bi, hi, a);
                            inp.scale * (0..d).map(|x| q[x] * k[x]).sum::<f64>()
                        })
                        .collect();
                    let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..d {
                        out.push((0..vis).map(|a| e[a] / z * inp.v.row(bi, hi, a)[c]).sum());
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn naive_matches_rowwise_oracle() {
        let inp = input(1, 2, 3, 16, 4, 7);
        let got = attention_naive(&inp).unwrap();
        assert!(max_diff(got.data(), &oracle(&inp)) < 1e-12);
        let causal = input(1, 2, 16, 16, 4, 7).causal(true);
        assert!(max_diff(attention_naive(&causal).unwrap().data(), &oracle(&causal)) < 1e-12);
    }

    #[test]
    fn single_key_returns_value() {
        let inp = input(1, 1, 1, 1, 5, 3);
        for out in [attention_naive(&inp).unwrap(), attention_online(&inp).unwrap()] {
            assert!(out.max_abs_diff(&inp.v).unwrap() < 1e-15);
        }
        let part = attention_chunk_partial(&inp.q, &inp.k, &inp.v, 1.0).unwrap();
        assert_eq!(part.o.data(), inp.v.data());
        let s = dot(inp.q.data(), inp.k.data(), DType::F64);
        assert_eq!(part.lse.data()[0], s);
        assert_eq!(part.m.data()[0], s);
    }

    #[test]
    fn zero_query_gives_mean() {
        let mut inp = input(1, 1, 1, 4, 3, 9);
        inp.q = Tensor::zeros(vec![1, 1, 1, 3], DType::F64);
        let out = attention_naive(&inp).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|a| inp.v.row(0, 0, a)[c]).sum::<f64>() / 4.0;
            assert!((out.data()[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn online_matches_naive_over_seeds() {
        for seed in 0..20 {
            let inp = input(2, 2, 3, 11, 4, seed).causal(seed % 2 == 0);
            let a = attention_naive(&inp).unwrap();
            let b = attention_online(&inp).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn large_scores_stay_finite() {
        // q . k_0 = 300 dominates; exp(300)*N would still fit f64 but
        // exp(800) would not, so also try a bigger spike.
        for spike in [300.0, 800.0] {
            let q = Tensor::from_f64(vec![1, 1, 1, 1], vec![1.0]).unwrap();
            let k = Tensor::from_f64(vec![1, 1, 3, 1], vec![spike, 0.0, -1.0]).unwrap();
            let v = Tensor::from_f64(vec![1, 1, 3, 1], vec![2.0, 5.0, 7.0]).unwrap();
            let inp = AttentionInput::new(q, k, v);
            let a = attention_naive(&inp).unwrap();
            let b = attention_online(&inp).unwrap();
            assert!(a.all_finite() && b.all_finite());
            assert!((a.data()[0] - 2.0).abs() < 1e-12);
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn chunk_partial_over_whole_sequence() {
        let inp = input(1, 2, 1, 12, 4, 21);
        let part = attention_chunk_partial(&inp.q, &inp.k, &inp.v, 1.0).unwrap();
        assert!(part.o.max_abs_diff(&attention_naive(&inp).unwrap()).unwrap() < 1e-12);
        for h in 0..2 {
            let scores: Vec<f64> = (0..12)
                .map(|a| inp.q.row(0, h, 0).iter().zip(inp.k.row(0, h, a)).map(|(x, y)| x * y).sum())
                .collect();
            assert!((part.lse.data()[h] - logsumexp(&scores).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_chunk_is_identity() {
        let inp = input(1, 1, 1, 4, 3, 1);
        let k0 = inp.k.slice_axis2(0, 0).unwrap();
        let part = attention_chunk_partial(&inp.q, &k0, &k0, 1.0).unwrap();
        assert_eq!(part.m.data(), &[f64::NEG_INFINITY]);
        assert_eq!(part.lse.data(), &[f64::NEG_INFINITY]);
        assert_eq!(part.o.data(), &[0.0; 3]);
        assert!(matches!(combine_partials(&[part.clone(), part]), Err(Error::NoKeysAttended { .. })));
        assert!(combine_partials(&[]).is_err());
    }

    #[test]
    fn combine_single_part_is_exact() {
        let inp = input(1, 2, 1, 9, 4, 4);
        let part = attention_chunk_partial(&inp.q, &inp.k, &inp.v, 1.0).unwrap();
        assert_eq!(combine_partials(&[part.clone()]).unwrap(), part.o);
    }

    #[test]
    fn partition_invariance() {
        let inp = input(1, 2, 1, 8, 4, 13);
        let reference = attention_naive(&inp).unwrap();
        let halves = attention_partitioned(&inp, &[4, 4]).unwrap();
        assert!(halves.max_abs_diff(&reference).unwrap() < 1e-12);
        let outs: Vec<Tensor> = [vec![1, 7], vec![4, 4], vec![2, 2, 2, 2]]
            .iter()
            .map(|s| attention_partitioned(&inp, s).unwrap())
            .collect();
        for o in &outs[1..] {
            assert!(o.max_abs_diff(&outs[0]).unwrap() < 1e-12);
        }
    }

    #[test]
    fn merge_agrees_with_combine() {
        let inp = input(2, 2, 1, 10, 3, 8);
        let parts: Vec<SoftmaxPartial> = chunk_ranges(10, 3)
            .into_iter()
            .map(|r| {
                let k = inp.k.slice_axis2(r.start, r.end).unwrap();
                let v = inp.v.slice_axis2(r.start, r.end).unwrap();
                attention_chunk_partial(&inp.q, &k, &v, 1.0).unwrap()
            })
            .collect();
        let merged = parts[0].merge(&parts[1]).unwrap().merge(&parts[2]).unwrap();
        let combined = combine_partials(&parts).unwrap();
        assert!(merged.o.max_abs_diff(&combined).unwrap() < 1e-12);
        let empty = SoftmaxPartial::empty(2, 2, 1, 3, DType::F64);
        assert_eq!(empty.merge(&parts[0]).unwrap().o, parts[0].o);
    }

    #[test]
    fn shape_errors() {
        let inp = input(1, 1, 1, 4, 3, 1);
        let bad_v = rand4([1, 1, 5, 3], 2);
        assert!(attention_naive(&AttentionInput::new(inp.q.clone(), inp.k.clone(), bad_v)).is_err());
        let bad_q = rand4([1, 2, 1, 3], 2);
        assert!(attention_online(&AttentionInput::new(bad_q, inp.k.clone(), inp.v.clone())).is_err());
        assert!(attention_partitioned(&inp, &[1, 1]).is_err());
    }

    #[test]
    fn chunk_rule() {
        assert_eq!(chunk_sizes(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(chunk_sizes(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(chunk_ranges(10, 4)[2], 6..8);
    }
}

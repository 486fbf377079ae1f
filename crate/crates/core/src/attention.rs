//! Multi-head attention in self, causal-self and cross configurations, with
//! a projected key/value cache for step-wise decoding.
//!
//! Row-vector convention throughout: `Q = queries_src * W_Q`. Heads are
//! contiguous column blocks of width `d_head = d_model / n_heads`, and the
//! logit scale is `1/sqrt(d_head)`.

use crate::error::{Result, VifError};
use crate::tensor::{self, gemm, softmax_in_place, Precision, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, n_heads: usize) -> Result<Self> {
        let p = AttentionParams { w_q, w_k, w_v, w_o, n_heads };
        p.validate()?;
        Ok(p)
    }

    pub fn init(d_model: usize, n_heads: usize, precision: Precision, rng: &mut Rng) -> Result<Self> {
        Self::new(
            Tensor::init_weight(d_model, d_model, precision, rng),
            Tensor::init_weight(d_model, d_model, precision, rng),
            Tensor::init_weight(d_model, d_model, precision, rng),
            Tensor::init_weight(d_model, d_model, precision, rng),
            n_heads,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(VifError::invalid(format!(
                "d_model {d} is not divisible by n_heads {}",
                self.n_heads
            )));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [d, d] {
                return Err(VifError::shape("AttentionParams", format!("expected [{d}, {d}], got {:?}", w.shape())));
            }
            if w.precision() != self.w_q.precision() {
                return Err(VifError::Precision("AttentionParams"));
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn precision(&self) -> Precision {
        self.w_q.precision()
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            w_q: self.w_q.zeros_like(),
            w_k: self.w_k.zeros_like(),
            w_v: self.w_v.zeros_like(),
            w_o: self.w_o.zeros_like(),
            n_heads: self.n_heads,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ]
    }
}

/// Activations saved by [`attend_fwd`] for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub q_src: Tensor,
    pub kv_src: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per head, `[n_queries x n_keys]` attention weights.
    pub probs: Vec<Vec<f64>>,
    /// Concatenated per-head context before the output projection.
    pub ctx: Tensor,
    pub causal: bool,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub d_q_src: Tensor,
    pub d_kv_src: Tensor,
    pub params: AttentionParams,
}

pub fn attend(queries_src: &Tensor, kv_src: &Tensor, params: &AttentionParams, causal: bool) -> Result<Tensor> {
    attend_fwd(queries_src, kv_src, params, causal).map(|(out, _)| out)
}

pub fn attend_fwd(
    queries_src: &Tensor,
    kv_src: &Tensor,
    params: &AttentionParams,
    causal: bool,
) -> Result<(Tensor, AttentionCache)> {
    let d = params.d_model();
    let (nq, dq) = queries_src.dims2();
    let (nk, dk) = kv_src.dims2();
    if dq != d || dk != d {
        return Err(VifError::shape(
            "attend",
            format!("query width {dq}, kv width {dk}, d_model {d}"),
        ));
    }
    if causal && nq != nk {
        return Err(VifError::invalid(format!(
            "causal attention needs as many queries as keys ({nq} vs {nk})"
        )));
    }
    let q = tensor::matmul(queries_src, &params.w_q)?;
    let k = tensor::matmul(kv_src, &params.w_k)?;
    let v = tensor::matmul(kv_src, &params.w_v)?;

    let (h, dh) = (params.n_heads, params.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; nq * d];
    let mut probs = Vec::with_capacity(h);
    for head in 0..h {
        let off = head * dh;
        let mut s = vec![0.0; nq * nk];
        gemm(nq, dh, nk, &q.data()[off..], (d, 1), &k.data()[off..], (1, d), &mut s, nk, false);
        for i in 0..nq {
            let row = &mut s[i * nk..(i + 1) * nk];
            let visible = if causal { i + 1 } else { nk };
            for x in row[..visible].iter_mut() {
                *x *= scale;
            }
            softmax_in_place(&mut row[..visible]);
            for x in row[visible..].iter_mut() {
                *x = 0.0;
            }
        }
        gemm(nq, nk, dh, &s, (nk, 1), &v.data()[off..], (d, 1), &mut ctx[off..], d, false);
        probs.push(s);
    }
    let ctx = Tensor::finish("attend", vec![nq, d], ctx, params.precision())?;
    let out = tensor::matmul(&ctx, &params.w_o)?;
    let cache = AttentionCache {
        q_src: queries_src.clone(),
        kv_src: kv_src.clone(),
        q,
        k,
        v,
        probs,
        ctx,
        causal,
    };
    Ok((out, cache))
}

pub fn attend_backward(cache: &AttentionCache, params: &AttentionParams, d_out: &Tensor) -> Result<AttentionGrads> {
    let d = params.d_model();
    let (nq, nk) = (cache.q.rows(), cache.k.rows());
    if d_out.shape() != [nq, d] {
        return Err(VifError::shape("attend_backward", format!("d_out {:?}, expected [{nq}, {d}]", d_out.shape())));
    }
    let (h, dh) = (params.n_heads, params.d_head());
    let scale = 1.0 / (dh as f64).sqrt();

    let d_w_o = tensor::matmul_tn(&cache.ctx, d_out)?;
    let d_ctx = tensor::matmul_nt(d_out, &params.w_o)?;

    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut dp = vec![0.0; nq * nk];
    for head in 0..h {
        let off = head * dh;
        let p = &cache.probs[head];
        // dP = dCtx_h * V_h^T
        gemm(nq, dh, nk, &d_ctx.data()[off..], (d, 1), &cache.v.data()[off..], (1, d), &mut dp, nk, false);
        // dV_h = P^T * dCtx_h
        gemm(nk, nq, dh, p, (1, nk), &d_ctx.data()[off..], (d, 1), &mut dv[off..], d, false);
        // dS = P o (dP - rowdot(P, dP)), folded with the logit scale.
        for i in 0..nq {
            let pr = &p[i * nk..(i + 1) * nk];
            let dr = &mut dp[i * nk..(i + 1) * nk];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        gemm(nq, nk, dh, &dp, (nk, 1), &cache.k.data()[off..], (d, 1), &mut dq[off..], d, false);
        gemm(nk, nq, dh, &dp, (1, nk), &cache.q.data()[off..], (d, 1), &mut dk[off..], d, false);
    }
    let prec = params.precision();
    let dq = Tensor::finish("attend_backward", vec![nq, d], dq, prec)?;
    let dk = Tensor::finish("attend_backward", vec![nk, d], dk, prec)?;
    let dv = Tensor::finish("attend_backward", vec![nk, d], dv, prec)?;

    let grads = AttentionParams {
        w_q: tensor::matmul_tn(&cache.q_src, &dq)?,
        w_k: tensor::matmul_tn(&cache.kv_src, &dk)?,
        w_v: tensor::matmul_tn(&cache.kv_src, &dv)?,
        w_o: d_w_o,
        n_heads: h,
    };
    let d_q_src = tensor::matmul_nt(&dq, &params.w_q)?;
    let d_kv_src = tensor::add(&tensor::matmul_nt(&dk, &params.w_k)?, &tensor::matmul_nt(&dv, &params.w_v)?)?;
    Ok(AttentionGrads { d_q_src, d_kv_src, params: grads })
}

/// Projected keys and values of a key/value source, appendable row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    d_model: usize,
    precision: Precision,
}

impl KvCache {
    pub fn empty(d_model: usize, precision: Precision) -> Self {
        KvCache { keys: Vec::new(), values: Vec::new(), d_model, precision }
    }

    /// Projects every row of `kv_src` through `W_K` / `W_V`.
    pub fn project(kv_src: &Tensor, params: &AttentionParams) -> Result<Self> {
        if kv_src.cols() != params.d_model() {
            return Err(VifError::shape(
                "KvCache::project",
                format!("kv width {}, d_model {}", kv_src.cols(), params.d_model()),
            ));
        }
        let k = tensor::matmul(kv_src, &params.w_k)?;
        let v = tensor::matmul(kv_src, &params.w_v)?;
        Ok(KvCache {
            keys: k.data().to_vec(),
            values: v.data().to_vec(),
            d_model: params.d_model(),
            precision: params.precision(),
        })
    }

    /// Appends the projection of one more source row.
    pub fn push(&mut self, kv_row: &Tensor, params: &AttentionParams) -> Result<()> {
        if params.d_model() != self.d_model || kv_row.shape() != [1, self.d_model] {
            return Err(VifError::shape("KvCache::push", format!("row {:?}, cache width {}", kv_row.shape(), self.d_model)));
        }
        self.keys.extend_from_slice(tensor::matmul(kv_row, &params.w_k)?.data());
        self.values.extend_from_slice(tensor::matmul(kv_row, &params.w_v)?.data());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn keys(&self) -> Tensor {
        Tensor::from_parts_unchecked(vec![self.len(), self.d_model], self.keys.clone(), self.precision)
    }

    pub fn values(&self) -> Tensor {
        Tensor::from_parts_unchecked(vec![self.len(), self.d_model], self.values.clone(), self.precision)
    }
}

/// One query row against every cached key. Returns the output row and the
/// per-head attention weights.
pub fn attend_incremental_with_weights(
    query_src: &Tensor,
    cache: &KvCache,
    params: &AttentionParams,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let d = params.d_model();
    if cache.is_empty() {
        return Err(VifError::invalid("attend_incremental on an empty cache"));
    }
    if cache.d_model != d || query_src.shape() != [1, d] {
        return Err(VifError::shape(
            "attend_incremental",
            format!("query {:?}, cache width {}, d_model {d}", query_src.shape(), cache.d_model),
        ));
    }
    let q = tensor::matmul(query_src, &params.w_q)?;
    let n = cache.len();
    let (h, dh) = (params.n_heads, params.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; d];
    let mut weights = Vec::with_capacity(h);
    for head in 0..h {
        let off = head * dh;
        let mut s = vec![0.0; n];
        gemm(1, dh, n, &q.data()[off..], (d, 1), &cache.keys[off..], (1, d), &mut s, n, false);
        for x in s.iter_mut() {
            *x *= scale;
        }
        softmax_in_place(&mut s);
        gemm(1, n, dh, &s, (n, 1), &cache.values[off..], (d, 1), &mut ctx[off..], d, false);
        weights.push(s);
    }
    let ctx = Tensor::finish("attend_incremental", vec![1, d], ctx, params.precision())?;
    Ok((tensor::matmul(&ctx, &params.w_o)?, weights))
}

pub fn attend_incremental(query_src: &Tensor, cache: &KvCache, params: &AttentionParams) -> Result<Tensor> {
    attend_incremental_with_weights(query_src, cache, params).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const F64: Precision = Precision::F64;

    /// One head at a time with explicit loops.
    fn oracle(qs: &Tensor, kvs: &Tensor, p: &AttentionParams, causal: bool) -> Tensor {
        let (nq, d) = qs.dims2();
        let nk = kvs.rows();
        let proj = |x: &Tensor, w: &Tensor| {
            let mut out = vec![vec![0.0; d]; x.rows()];
            for i in 0..x.rows() {
                for j in 0..d {
                    for l in 0..d {
                        out[i][j] += x.at(i, l) * w.at(l, j);
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(qs, &p.w_q), proj(kvs, &p.w_k), proj(kvs, &p.w_v));
        let dh = p.d_head();
        let mut ctx = vec![vec![0.0; d]; nq];
        for h in 0..p.n_heads {
            for i in 0..nq {
                let limit = if causal { i + 1 } else { nk };
                let logits: Vec<f64> = (0..limit)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    let w = (l - m).exp() / z;
                    for c in 0..dh {
                        ctx[i][h * dh + c] += w * v[j][h * dh + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; nq * d];
        for i in 0..nq {
            for j in 0..d {
                for l in 0..d {
                    out[i * d + j] += ctx[i][l] * p.w_o.at(l, j);
                }
            }
        }
        Tensor::new(&[nq, d], out, F64).unwrap()
    }

    #[test]
    fn matches_per_head_loop_oracle() {
        let mut rng = Rng::new(11);
        let p = AttentionParams::init(8, 2, F64, &mut rng).unwrap();
        let qs = Tensor::uniform(&[3, 8], 1.0, F64, &mut rng);
        let kvs = Tensor::uniform(&[5, 8], 1.0, F64, &mut rng);
        let out = attend(&qs, &kvs, &p, false).unwrap();
        assert!(out.max_abs_diff(&oracle(&qs, &kvs, &p, false)) < 1e-10);

        let xs = Tensor::uniform(&[4, 8], 1.0, F64, &mut rng);
        let out = attend(&xs, &xs, &p, true).unwrap();
        assert!(out.max_abs_diff(&oracle(&xs, &xs, &p, true)) < 1e-10);
    }

    #[test]
    fn single_key_gets_all_weight() {
        let mut rng = Rng::new(12);
        let p = AttentionParams::init(8, 4, F64, &mut rng).unwrap();
        let qs = Tensor::uniform(&[3, 8], 5.0, F64, &mut rng);
        let kv = Tensor::uniform(&[1, 8], 5.0, F64, &mut rng);
        let (_, cache) = attend_fwd(&qs, &kv, &p, false).unwrap();
        for head in &cache.probs {
            assert!(head.iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn zero_query_weights_give_mean_of_values() {
        let mut rng = Rng::new(13);
        let mut p = AttentionParams::init(8, 2, F64, &mut rng).unwrap();
        p.w_q = Tensor::zeros(&[8, 8], F64);
        let qs = Tensor::uniform(&[2, 8], 1.0, F64, &mut rng);
        let kvs = Tensor::uniform(&[4, 8], 1.0, F64, &mut rng);
        let out = attend(&qs, &kvs, &p, false).unwrap();
        let v = tensor::matmul(&kvs, &p.w_v).unwrap();
        let mut mean = vec![0.0; 8];
        for i in 0..4 {
            for j in 0..8 {
                mean[j] += v.at(i, j) / 4.0;
            }
        }
        let expect = tensor::matmul(&Tensor::row_vector(&mean, F64).unwrap(), &p.w_o).unwrap();
        for i in 0..2 {
            for j in 0..8 {
                assert!((out.at(i, j) - expect.at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_weights_on_future_are_exactly_zero() {
        let mut rng = Rng::new(14);
        let p = AttentionParams::init(8, 2, F64, &mut rng).unwrap();
        let xs = Tensor::uniform(&[5, 8], 1.0, F64, &mut rng);
        let (_, cache) = attend_fwd(&xs, &xs, &p, true).unwrap();
        for head in &cache.probs {
            for i in 0..5 {
                for j in i + 1..5 {
                    assert_eq!(head[i * 5 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = Rng::new(15);
        let p = AttentionParams::init(8, 2, F64, &mut rng).unwrap();
        let a = Tensor::zeros(&[2, 8], F64);
        let b = Tensor::zeros(&[3, 8], F64);
        assert!(attend(&a, &b, &p, true).is_err());
        assert!(attend(&Tensor::zeros(&[2, 6], F64), &b, &p, false).is_err());
        assert!(AttentionParams::init(6, 4, F64, &mut rng).is_err());
        let q = Tensor::zeros(&[1, 8], F64);
        assert!(attend_incremental(&q, &KvCache::empty(8, F64), &p).is_err());
    }

    #[test]
    fn incremental_single_row_cache() {
        let mut rng = Rng::new(16);
        let p = AttentionParams::init(8, 2, F64, &mut rng).unwrap();
        let kv = Tensor::uniform(&[1, 8], 1.0, F64, &mut rng);
        let cache = KvCache::project(&kv, &p).unwrap();
        let q = Tensor::uniform(&[1, 8], 1.0, F64, &mut rng);
        let (_, w) = attend_incremental_with_weights(&q, &cache, &p).unwrap();
        assert!(w.iter().all(|h| h == &[1.0]));
    }
}

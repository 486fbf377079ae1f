//! The vision inference former.
//!
//! Three stages run on top of the decoder's final hidden state `h`:
//!
//! 1. refinement: `refined = Norm_r(z_v + SelfAttn(z_v))` over the visual
//!    tokens, skipped entirely when `enable_self_attn` is off;
//! 2. retrieval: `z_h = CrossAttn(query = h, keys/values = refined)`, with no
//!    residual onto `h`;
//! 3. fusion: `h_fused = Norm_f(z_h + h)`, which replaces `h` in front of the
//!    output projection.
//!
//! Refinement depends only on the image, so [`build_cache`] runs it once and
//! keeps the projected keys and values for every decoding step.

use crate::attention::{self, AttentionCache, AttentionParams, KvCache};
use crate::error::{Result, VifError};
use crate::tensor::{self, LayerNormCache, Precision, Rng, Tensor, LN_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct VifParams {
    pub self_attn: AttentionParams,
    pub refine_gamma: Tensor,
    pub refine_beta: Tensor,
    pub cross_attn: AttentionParams,
    pub fusion_gamma: Tensor,
    pub fusion_beta: Tensor,
    pub enable_self_attn: bool,
}

impl VifParams {
    pub fn init(
        d_model: usize,
        n_heads: usize,
        enable_self_attn: bool,
        precision: Precision,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(VifParams {
            self_attn: AttentionParams::init(d_model, n_heads, precision, rng)?,
            refine_gamma: Tensor::ones(&[d_model], precision),
            refine_beta: Tensor::zeros(&[d_model], precision),
            cross_attn: AttentionParams::init(d_model, n_heads, precision, rng)?,
            fusion_gamma: Tensor::ones(&[d_model], precision),
            fusion_beta: Tensor::zeros(&[d_model], precision),
            enable_self_attn,
        })
    }

    pub fn d_model(&self) -> usize {
        self.cross_attn.d_model()
    }

    pub fn precision(&self) -> Precision {
        self.cross_attn.precision()
    }

    pub fn validate(&self) -> Result<()> {
        self.self_attn.validate()?;
        self.cross_attn.validate()?;
        let d = self.d_model();
        if self.self_attn.d_model() != d {
            return Err(VifError::shape("VifParams", "self and cross attention widths differ"));
        }
        for (name, t) in self.named_tensors() {
            if t.precision() != self.precision() {
                return Err(VifError::Precision("VifParams"));
            }
            if (name.contains("gamma") || name.contains("beta"))
                && t.shape() != [d] {
                    return Err(VifError::shape("VifParams", format!("{name} has shape {:?}", t.shape())));
                }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        VifParams {
            self_attn: self.self_attn.zeros_like(),
            refine_gamma: self.refine_gamma.zeros_like(),
            refine_beta: self.refine_beta.zeros_like(),
            cross_attn: self.cross_attn.zeros_like(),
            fusion_gamma: self.fusion_gamma.zeros_like(),
            fusion_beta: self.fusion_beta.zeros_like(),
            enable_self_attn: self.enable_self_attn,
        }
    }

    /// Every parameter tensor under a stable `vif.`-prefixed name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::with_capacity(12);
        for (n, t) in self.self_attn.tensors() {
            out.push((format!("vif.self_attn.{n}"), t));
        }
        out.push(("vif.refine_norm.gamma".into(), &self.refine_gamma));
        out.push(("vif.refine_norm.beta".into(), &self.refine_beta));
        for (n, t) in self.cross_attn.tensors() {
            out.push((format!("vif.cross_attn.{n}"), t));
        }
        out.push(("vif.fusion_norm.gamma".into(), &self.fusion_gamma));
        out.push(("vif.fusion_norm.beta".into(), &self.fusion_beta));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::with_capacity(12);
        for (n, t) in self.self_attn.tensors_mut() {
            out.push((format!("vif.self_attn.{n}"), t));
        }
        out.push(("vif.refine_norm.gamma".into(), &mut self.refine_gamma));
        out.push(("vif.refine_norm.beta".into(), &mut self.refine_beta));
        for (n, t) in self.cross_attn.tensors_mut() {
            out.push((format!("vif.cross_attn.{n}"), t));
        }
        out.push(("vif.fusion_norm.gamma".into(), &mut self.fusion_gamma));
        out.push(("vif.fusion_norm.beta".into(), &mut self.fusion_beta));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Per-image refined visual tokens plus their cross-attention keys/values.
/// Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCache {
    refined: Tensor,
    kv: KvCache,
}

impl VisualCache {
    pub fn refined(&self) -> &Tensor {
        &self.refined
    }

    pub fn keys(&self) -> Tensor {
        self.kv.keys()
    }

    pub fn values(&self) -> Tensor {
        self.kv.values()
    }

    pub fn n_visual(&self) -> usize {
        self.kv.len()
    }
}

/// One decoding step through the former.
#[derive(Clone, Debug)]
pub struct StepState {
    pub h: Tensor,
    pub z_h: Tensor,
    pub h_fused: Tensor,
    /// Per-head cross-attention weights over the visual tokens.
    pub weights: Vec<Vec<f64>>,
}

fn check_width(op: &'static str, x: &Tensor, params: &VifParams) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != params.d_model() {
        return Err(VifError::shape(op, format!("input {:?}, d_model {}", x.shape(), params.d_model())));
    }
    Ok(())
}

pub fn refine_visual(z_v: &Tensor, params: &VifParams) -> Result<Tensor> {
    check_width("refine_visual", z_v, params)?;
    if !params.enable_self_attn {
        return Ok(z_v.clone());
    }
    let attended = attention::attend(z_v, z_v, &params.self_attn, false)?;
    tensor::layer_norm(
        &tensor::add(z_v, &attended)?,
        &params.refine_gamma,
        &params.refine_beta,
        LN_EPS,
    )
}

pub fn build_cache(z_v: &Tensor, params: &VifParams) -> Result<VisualCache> {
    let refined = refine_visual(z_v, params)?;
    let kv = KvCache::project(&refined, &params.cross_attn)?;
    Ok(VisualCache { refined, kv })
}

pub fn retrieve(h: &Tensor, cache: &VisualCache, params: &VifParams) -> Result<Tensor> {
    retrieve_with_weights(h, cache, params).map(|(z, _)| z)
}

pub fn retrieve_with_weights(
    h: &Tensor,
    cache: &VisualCache,
    params: &VifParams,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    check_width("retrieve", h, params)?;
    if cache.kv.d_model() != params.d_model() {
        return Err(VifError::shape(
            "retrieve",
            format!("cache width {} but params width {}", cache.kv.d_model(), params.d_model()),
        ));
    }
    attention::attend_incremental_with_weights(h, &cache.kv, &params.cross_attn)
}

pub fn fuse(z_h: &Tensor, h: &Tensor, params: &VifParams) -> Result<Tensor> {
    check_width("fuse", h, params)?;
    tensor::layer_norm(&tensor::add(z_h, h)?, &params.fusion_gamma, &params.fusion_beta, LN_EPS)
}

pub fn vif_step(h: &Tensor, cache: &VisualCache, params: &VifParams) -> Result<StepState> {
    let (z_h, weights) = retrieve_with_weights(h, cache, params)?;
    let h_fused = fuse(&z_h, h, params)?;
    Ok(StepState { h: h.clone(), z_h, h_fused, weights })
}

/// Saved activations for a batched (teacher-forced) pass over many query rows.
#[derive(Clone, Debug)]
pub struct VifTape {
    refine: Option<(AttentionCache, LayerNormCache)>,
    cross: AttentionCache,
    fuse: LayerNormCache,
    pub z_h: Tensor,
}

/// All query rows at once: returns fused states `[n x d]`.
pub fn forward_batch(z_v: &Tensor, h: &Tensor, params: &VifParams) -> Result<(Tensor, VifTape)> {
    check_width("vif::forward_batch", z_v, params)?;
    check_width("vif::forward_batch", h, params)?;
    let (refined, refine) = if params.enable_self_attn {
        let (att, att_cache) = attention::attend_fwd(z_v, z_v, &params.self_attn, false)?;
        let (r, ln) = tensor::layer_norm_fwd(
            &tensor::add(z_v, &att)?,
            &params.refine_gamma,
            &params.refine_beta,
            LN_EPS,
        )?;
        (r, Some((att_cache, ln)))
    } else {
        (z_v.clone(), None)
    };
    let (z_h, cross) = attention::attend_fwd(h, &refined, &params.cross_attn, false)?;
    let (fused, fuse) = tensor::layer_norm_fwd(
        &tensor::add(&z_h, h)?,
        &params.fusion_gamma,
        &params.fusion_beta,
        LN_EPS,
    )?;
    Ok((fused, VifTape { refine, cross, fuse, z_h }))
}

/// Returns `(d_z_v, d_h, param grads)`.
pub fn backward_batch(
    tape: &VifTape,
    params: &VifParams,
    d_fused: &Tensor,
) -> Result<(Tensor, Tensor, VifParams)> {
    let mut grads = params.zeros_like();
    let (d_sum, dg, db) = tensor::layer_norm_backward(&tape.fuse, &params.fusion_gamma, d_fused)?;
    grads.fusion_gamma = dg;
    grads.fusion_beta = db;
    let cross = attention::attend_backward(&tape.cross, &params.cross_attn, &d_sum)?;
    grads.cross_attn = cross.params;
    let d_h = tensor::add(&d_sum, &cross.d_q_src)?;
    let d_refined = cross.d_kv_src;
    let d_z_v = match &tape.refine {
        None => d_refined,
        Some((att_cache, ln)) => {
            let (d_pre, dg, db) = tensor::layer_norm_backward(ln, &params.refine_gamma, &d_refined)?;
            grads.refine_gamma = dg;
            grads.refine_beta = db;
            let att = attention::attend_backward(att_cache, &params.self_attn, &d_pre)?;
            grads.self_attn = att.params;
            tensor::add(&tensor::add(&d_pre, &att.d_q_src)?, &att.d_kv_src)?
        }
    };
    Ok((d_z_v, d_h, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    const F64: Precision = Precision::F64;

    fn setup(seed: u64, nv: usize, d: usize) -> (VifParams, Tensor, Rng) {
        let mut rng = Rng::new(seed);
        let p = VifParams::init(d, 4, true, F64, &mut rng).unwrap();
        let z = Tensor::uniform(&[nv, d], 1.0, F64, &mut rng);
        (p, z, rng)
    }

    #[test]
    fn disabled_self_attention_is_identity() {
        let (mut p, z, _) = setup(1, 6, 16);
        p.enable_self_attn = false;
        assert!(refine_visual(&z, &p).unwrap().bit_eq(&z));
        assert!(build_cache(&z, &p).unwrap().refined().bit_eq(&z));
    }

    #[test]
    fn single_visual_token_refinement() {
        let (p, z, _) = setup(2, 1, 16);
        let value_path = tensor::matmul(&tensor::matmul(&z, &p.self_attn.w_v).unwrap(), &p.self_attn.w_o).unwrap();
        let expect = tensor::layer_norm(
            &tensor::add(&z, &value_path).unwrap(),
            &p.refine_gamma,
            &p.refine_beta,
            LN_EPS,
        )
        .unwrap();
        assert!(refine_visual(&z, &p).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn cache_build_is_idempotent() {
        let (p, z, _) = setup(3, 6, 16);
        let a = build_cache(&z, &p).unwrap();
        let b = build_cache(&z, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.refined().bit_eq(&refine_visual(&z, &p).unwrap()));
    }

    #[test]
    fn single_token_retrieval_ignores_query() {
        let (p, z, mut rng) = setup(4, 1, 16);
        let cache = build_cache(&z, &p).unwrap();
        let expect = tensor::matmul(&tensor::matmul(cache.refined(), &p.cross_attn.w_v).unwrap(), &p.cross_attn.w_o).unwrap();
        for _ in 0..3 {
            let h = Tensor::uniform(&[1, 16], 3.0, F64, &mut rng);
            assert!(retrieve(&h, &cache, &p).unwrap().max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn zero_query_projection_retrieves_mean() {
        let (mut p, z, mut rng) = setup(5, 6, 16);
        p.cross_attn.w_q = Tensor::zeros(&[16, 16], F64);
        let cache = build_cache(&z, &p).unwrap();
        let v = tensor::matmul(cache.refined(), &p.cross_attn.w_v).unwrap();
        let mean: Vec<f64> = (0..16).map(|j| (0..6).map(|i| v.at(i, j)).sum::<f64>() / 6.0).collect();
        let expect = tensor::matmul(&Tensor::row_vector(&mean, F64).unwrap(), &p.cross_attn.w_o).unwrap();
        let h = Tensor::uniform(&[1, 16], 1.0, F64, &mut rng);
        assert!(retrieve(&h, &cache, &p).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn fuse_examples() {
        let (p, _, mut rng) = setup(6, 2, 16);
        let h = Tensor::uniform(&[1, 16], 1.0, F64, &mut rng);
        let zero = Tensor::zeros(&[1, 16], F64);
        let ln = tensor::layer_norm(&h, &p.fusion_gamma, &p.fusion_beta, LN_EPS).unwrap();
        assert!(fuse(&zero, &h, &p).unwrap().bit_eq(&ln));
        let doubled = fuse(&h, &h, &p).unwrap();
        let quarter_eps = tensor::layer_norm(&h, &p.fusion_gamma, &p.fusion_beta, LN_EPS / 4.0).unwrap();
        assert!(doubled.max_abs_diff(&quarter_eps) < 1e-12);
        assert!(fuse(&Tensor::zeros(&[1, 8], F64), &h, &p).is_err());
    }

    #[test]
    fn step_is_retrieve_then_fuse() {
        let (p, z, mut rng) = setup(7, 6, 16);
        let cache = build_cache(&z, &p).unwrap();
        let h = Tensor::uniform(&[1, 16], 1.0, F64, &mut rng);
        let st = vif_step(&h, &cache, &p).unwrap();
        let zh = retrieve(&h, &cache, &p).unwrap();
        assert!(st.z_h.bit_eq(&zh));
        assert!(st.h_fused.bit_eq(&fuse(&zh, &h, &p).unwrap()));
    }

    #[test]
    fn retrieval_rejects_mismatched_cache() {
        let (p, z, _) = setup(8, 4, 16);
        let cache = build_cache(&z, &p).unwrap();
        let mut rng = Rng::new(9);
        let other = VifParams::init(8, 4, true, F64, &mut rng).unwrap();
        let h = Tensor::zeros(&[1, 8], F64);
        assert!(retrieve(&h, &cache, &other).is_err());
    }
}

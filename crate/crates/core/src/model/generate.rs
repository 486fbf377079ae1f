//! Greedy step-wise decoding with per-layer key/value caches.

use super::{visual_tokens, ModelParams};
use crate::attention::{self, KvCache};
use crate::error::{Result, VifError};
use crate::synthgrid::{GridImage, EOS};
use crate::tensor::{self, argmax, Tensor, LN_EPS};
use crate::vif::{self, StepState, VifParams, VisualCache};

/// How the next-token distribution is formed from the decoder state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// `softmax(h W_o)`.
    Baseline,
    /// `softmax(Norm(z_h + h) W_o)` with `z_h` retrieved by the former.
    Vif,
    /// Goes through the VIF entry point but forces `h' = h`. Diagnostic only.
    Passthrough,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "vif" => Ok(Mode::Vif),
            "passthrough" => Ok(Mode::Passthrough),
            other => Err(VifError::invalid(format!("unknown mode `{other}` (baseline | vif | passthrough)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Vif => "vif",
            Mode::Passthrough => "passthrough",
        }
    }
}

/// Whether the refined visual cache is built once per image or rebuilt at
/// every step. The second exists to check and benchmark the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualCacheStrategy {
    BuildOnce,
    RecomputeEachStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationConfig {
    pub mode: Mode,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub cache: VisualCacheStrategy,
    /// When false, decoding always runs `max_new_tokens` steps (benchmarks).
    pub stop_at_eos: bool,
}

impl GenerationConfig {
    pub fn new(mode: Mode, max_new_tokens: usize) -> Self {
        GenerationConfig { mode, max_new_tokens, seed: 0, cache: VisualCacheStrategy::BuildOnce, stop_at_eos: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub token: usize,
    pub h: Vec<f64>,
    /// Former output; absent outside VIF mode.
    pub z_h: Option<Vec<f64>>,
    pub h_fused: Vec<f64>,
    pub probs: Vec<f64>,
    /// Per-head cross-attention weights over the visual tokens (VIF mode).
    pub cross_weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodingTrace {
    pub image: GridImage,
    pub prompt: Vec<usize>,
    pub n_visual: usize,
    pub steps: Vec<StepRecord>,
}

impl DecodingTrace {
    pub fn tokens(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.token).collect()
    }

    /// Generated tokens up to (not including) EOS.
    pub fn content_tokens(&self) -> Vec<usize> {
        self.tokens().into_iter().take_while(|&t| t != EOS).collect()
    }

    /// Equality down to the bit pattern of every recorded float.
    pub fn bit_eq(&self, other: &DecodingTrace) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.image == other.image
            && self.prompt == other.prompt
            && self.n_visual == other.n_visual
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.token == b.token
                    && same(&a.h, &b.h)
                    && same(&a.h_fused, &b.h_fused)
                    && same(&a.probs, &b.probs)
                    && match (&a.z_h, &b.z_h) {
                        (None, None) => true,
                        (Some(x), Some(y)) => same(x, y),
                        _ => false,
                    }
                    && a.cross_weights.len() == b.cross_weights.len()
                    && a.cross_weights.iter().zip(&b.cross_weights).all(|(x, y)| same(x, y))
            })
    }
}

/// Incremental decoder: one input row per call, caching each layer's
/// projected keys and values.
pub struct DecoderState<'a> {
    params: &'a ModelParams,
    caches: Vec<KvCache>,
    pos: usize,
}

impl<'a> DecoderState<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let d = params.config.d_model;
        DecoderState {
            params,
            caches: params.blocks.iter().map(|_| KvCache::empty(d, params.precision())).collect(),
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one embedding row (without position) and returns the final-norm
    /// hidden state at that position.
    pub fn step(&mut self, z_row: &Tensor) -> Result<Tensor> {
        let p = self.params;
        if self.pos >= p.config.max_seq_len {
            return Err(VifError::invalid(format!(
                "sequence exceeds max_seq_len {}",
                p.config.max_seq_len
            )));
        }
        let mut x = tensor::add(z_row, &tensor::slice_rows(&p.pos_embed, self.pos, self.pos + 1)?)?;
        for (b, cache) in p.blocks.iter().zip(self.caches.iter_mut()) {
            let a = tensor::layer_norm(&x, &b.ln1_gamma, &b.ln1_beta, LN_EPS)?;
            cache.push(&a, &b.attn)?;
            let x1 = tensor::add(&x, &attention::attend_incremental(&a, cache, &b.attn)?)?;
            let u = tensor::layer_norm(&x1, &b.ln2_gamma, &b.ln2_beta, LN_EPS)?;
            let ff = tensor::gelu(&tensor::add_bias(&tensor::matmul(&u, &b.ff_w1)?, &b.ff_b1)?)?;
            let f = tensor::add_bias(&tensor::matmul(&ff, &b.ff_w2)?, &b.ff_b2)?;
            x = tensor::add(&x1, &f)?;
        }
        self.pos += 1;
        tensor::layer_norm(&x, &p.final_gamma, &p.final_beta, LN_EPS)
    }
}

/// Next-token distribution from a final hidden state `h` (`[1 x d_model]`).
/// VIF mode needs the former and its visual cache.
pub fn next_dist(
    h: &Tensor,
    params: &ModelParams,
    mode: Mode,
    vif: Option<(&VifParams, &VisualCache)>,
) -> Result<(Vec<f64>, Option<StepState>)> {
    let (fused, state) = match mode {
        Mode::Baseline | Mode::Passthrough => (h.clone(), None),
        Mode::Vif => {
            let (vp, cache) = vif.ok_or_else(|| VifError::invalid("VIF mode requires a visual cache"))?;
            let st = vif::vif_step(h, cache, vp)?;
            (st.h_fused.clone(), Some(st))
        }
    };
    let probs = tensor::softmax_rows(&tensor::matmul(&fused, &params.w_o)?)?;
    Ok((probs.data().to_vec(), state))
}

/// Greedy decoding until EOS or `max_new_tokens`.
pub fn generate(
    image: &GridImage,
    prompt: &[usize],
    params: &ModelParams,
    vif_params: Option<&VifParams>,
    config: &GenerationConfig,
) -> Result<DecodingTrace> {
    if prompt.is_empty() {
        return Err(VifError::invalid("prompt must not be empty"));
    }
    if config.max_new_tokens == 0 {
        return Err(VifError::invalid("max_new_tokens must be at least 1"));
    }
    let vif_params = match config.mode {
        Mode::Vif => Some(vif_params.ok_or_else(|| VifError::invalid("VIF mode requires VIF parameters"))?),
        _ => None,
    };
    let z_v = visual_tokens(image, params)?;
    let z = super::embed_sequence(&z_v, prompt, params)?;
    let mut cache = match vif_params {
        Some(vp) => Some(vif::build_cache(&z_v, vp)?),
        None => None,
    };

    let mut state = DecoderState::new(params);
    let mut h = None;
    for i in 0..z.rows() {
        h = Some(state.step(&tensor::slice_rows(&z, i, i + 1)?)?);
    }
    let mut h = h.expect("non-empty prefix");

    let mut steps = Vec::new();
    loop {
        if config.cache == VisualCacheStrategy::RecomputeEachStep {
            if let Some(vp) = vif_params {
                cache = Some(vif::build_cache(&z_v, vp)?);
            }
        }
        let (probs, st) = next_dist(&h, params, config.mode, vif_params.zip(cache.as_ref()))?;
        let token = argmax(&probs);
        let (z_h, h_fused, cross_weights) = match st {
            Some(st) => (Some(st.z_h.data().to_vec()), st.h_fused.data().to_vec(), st.weights),
            None => (None, h.data().to_vec(), Vec::new()),
        };
        steps.push(StepRecord { token, h: h.data().to_vec(), z_h, h_fused, probs, cross_weights });
        if (config.stop_at_eos && token == EOS) || steps.len() == config.max_new_tokens {
            break;
        }
        h = state.step(&tensor::gather_rows(&params.tok_embed, &[token])?)?;
    }
    Ok(DecodingTrace { image: image.clone(), prompt: prompt.to_vec(), n_visual: z_v.rows(), steps })
}

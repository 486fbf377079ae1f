//! Full-sequence (teacher-forced) forward pass and its hand-written backward.

use super::{image_index, DecoderBlock, ModelParams};
use crate::attention::{self, AttentionCache};
use crate::error::{Result, VifError};
use crate::synthgrid::{TaskSample, PAD};
use crate::tensor::{self, LayerNormCache, Tensor, LN_EPS};
use crate::vif::{self, VifParams};

/// `[Z_v ; E_t(text)]`: connector outputs followed by text embeddings.
pub fn embed_sequence(z_v: &Tensor, text: &[usize], params: &ModelParams) -> Result<Tensor> {
    if text.is_empty() {
        return Ok(z_v.clone());
    }
    if let Some(&bad) = text.iter().find(|&&t| t >= params.config.vocab_size) {
        return Err(VifError::invalid(format!("token id {bad} outside vocabulary")));
    }
    tensor::concat_rows(z_v, &tensor::gather_rows(&params.tok_embed, text)?)
}

fn positions(len: usize, params: &ModelParams) -> Result<Tensor> {
    if len > params.config.max_seq_len {
        return Err(VifError::invalid(format!(
            "sequence of {len} exceeds max_seq_len {}",
            params.config.max_seq_len
        )));
    }
    tensor::slice_rows(&params.pos_embed, 0, len)
}

struct BlockTape {
    x_in: Tensor,
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
}

fn block_forward(x: &Tensor, b: &DecoderBlock) -> Result<(Tensor, BlockTape)> {
    let (a, ln1) = tensor::layer_norm_fwd(x, &b.ln1_gamma, &b.ln1_beta, LN_EPS)?;
    let (att, attn) = attention::attend_fwd(&a, &a, &b.attn, true)?;
    let x1 = tensor::add(x, &att)?;
    let (u, ln2) = tensor::layer_norm_fwd(&x1, &b.ln2_gamma, &b.ln2_beta, LN_EPS)?;
    let ff_pre = tensor::add_bias(&tensor::matmul(&u, &b.ff_w1)?, &b.ff_b1)?;
    let ff_act = tensor::gelu(&ff_pre)?;
    let f = tensor::add_bias(&tensor::matmul(&ff_act, &b.ff_w2)?, &b.ff_b2)?;
    let x2 = tensor::add(&x1, &f)?;
    Ok((x2, BlockTape { x_in: x.clone(), ln1, attn, ln2, ln2_out: u, ff_pre, ff_act }))
}

fn block_backward(tape: &BlockTape, b: &DecoderBlock, g: &mut DecoderBlock, dx2: &Tensor) -> Result<Tensor> {
    // Feed-forward branch.
    g.ff_w2.axpy(1.0, &tensor::matmul_tn(&tape.ff_act, dx2)?)?;
    g.ff_b2.axpy(1.0, &tensor::sum_rows(dx2)?)?;
    let d_act = tensor::matmul_nt(dx2, &b.ff_w2)?;
    let d_pre = tensor::gelu_backward(&tape.ff_pre, &d_act)?;
    g.ff_w1.axpy(1.0, &tensor::matmul_tn(&tape.ln2_out, &d_pre)?)?;
    g.ff_b1.axpy(1.0, &tensor::sum_rows(&d_pre)?)?;
    let du = tensor::matmul_nt(&d_pre, &b.ff_w1)?;
    let (dx1_ln, dg2, db2) = tensor::layer_norm_backward(&tape.ln2, &b.ln2_gamma, &du)?;
    g.ln2_gamma.axpy(1.0, &dg2)?;
    g.ln2_beta.axpy(1.0, &db2)?;
    let dx1 = tensor::add(dx2, &dx1_ln)?;

    // Attention branch.
    let att = attention::attend_backward(&tape.attn, &b.attn, &dx1)?;
    for ((_, acc), (_, d)) in g.attn.tensors_mut().into_iter().zip(att.params.tensors()) {
        acc.axpy(1.0, d)?;
    }
    let da = tensor::add(&att.d_q_src, &att.d_kv_src)?;
    let (dx_ln, dg1, db1) = tensor::layer_norm_backward(&tape.ln1, &b.ln1_gamma, &da)?;
    g.ln1_gamma.axpy(1.0, &dg1)?;
    g.ln1_beta.axpy(1.0, &db1)?;
    debug_assert_eq!(tape.x_in.shape(), dx_ln.shape());
    tensor::add(&dx1, &dx_ln)
}

/// Decoder hidden states (after the final norm) for every position of `z`.
/// Position embeddings are added here.
pub fn forward(z: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut x = tensor::add(z, &positions(z.rows(), params)?)?;
    for b in &params.blocks {
        x = block_forward(&x, b)?.0;
    }
    tensor::layer_norm(&x, &params.final_gamma, &params.final_beta, LN_EPS)
}

/// Mean next-token negative log-likelihood of `logits` (one row per step)
/// against `targets`, skipping PAD targets.
pub fn ntp_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (sum, n) = nll_sum(logits, targets, None)?;
    if n == 0 {
        return Err(VifError::invalid("every target is PAD"));
    }
    Ok(sum / n as f64)
}

/// Sum of per-token NLL and the number of unmasked tokens; optionally writes
/// `d(sum)/d(logits)` into `grad`.
fn nll_sum(logits: &Tensor, targets: &[usize], grad: Option<&mut Vec<f64>>) -> Result<(f64, usize)> {
    let (m, v) = logits.dims2();
    if m != targets.len() {
        return Err(VifError::shape("ntp_loss", format!("{m} logit rows for {} targets", targets.len())));
    }
    let mut probs = logits.data().to_vec();
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(VifError::invalid(format!("target {t} outside vocabulary of {v}")));
        }
        let row = &mut probs[i * v..(i + 1) * v];
        if t == PAD {
            row.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        sum += lse - row[t];
        n += 1;
        for x in row.iter_mut() {
            *x = (*x - lse).exp();
        }
        row[t] -= 1.0;
    }
    if let Some(g) = grad {
        *g = probs;
    }
    Ok((sum, n))
}

/// Summed NLL over a sample's target tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSum {
    pub nll: f64,
    pub tokens: usize,
}

impl LossSum {
    pub fn mean(&self) -> f64 {
        self.nll / self.tokens.max(1) as f64
    }
}

impl std::ops::AddAssign for LossSum {
    fn add_assign(&mut self, rhs: LossSum) {
        self.nll += rhs.nll;
        self.tokens += rhs.tokens;
    }
}

/// Gradient buffers shaped like the parameters they belong to.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub model: ModelParams,
    pub vif: Option<VifParams>,
    /// Stop backpropagation at the former and head; trunk slots stay zero.
    pub trunk_frozen: bool,
}

impl Gradients {
    pub fn zeros(params: &ModelParams, vif: Option<&VifParams>) -> Self {
        Gradients { model: params.zeros_like(), vif: vif.map(VifParams::zeros_like), trunk_frozen: false }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.model.named_tensors();
        if let Some(v) = &self.vif {
            out.extend(v.named_tensors());
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.model.named_tensors_mut();
        if let Some(v) = &mut self.vif {
            out.extend(v.named_tensors_mut());
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.named_tensors_mut() {
            let p = t.precision();
            t.data_mut().iter_mut().for_each(|x| *x = p.round(*x * s));
        }
    }
}

/// Teacher-forced pass over one sample. With `vif` set, every predicting
/// position goes through the former before the output projection.
///
/// Returns the summed NLL over target tokens; when `grads` is given the
/// gradient of that sum is accumulated into it.
pub fn loss_and_grads(
    params: &ModelParams,
    vif: Option<&VifParams>,
    sample: &TaskSample,
    grads: Option<&mut Gradients>,
) -> Result<LossSum> {
    let idx = image_index(&sample.image, params)?;
    let v = super::encode_image(&sample.image, params)?;
    let z_v = super::connect(&v, params)?;
    let n_v = z_v.rows();
    let n_p = sample.prompt.len();
    let n_t = sample.targets.len();
    if n_p == 0 || n_t == 0 {
        return Err(VifError::invalid("sample needs a prompt and targets"));
    }
    let mut text = sample.prompt.clone();
    text.extend_from_slice(&sample.targets[..n_t - 1]);
    let z = embed_sequence(&z_v, &text, params)?;
    let len = z.rows();

    let mut x = tensor::add(&z, &positions(len, params)?)?;
    let mut tapes = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, tape) = block_forward(&x, b)?;
        tapes.push(tape);
        x = next;
    }
    let (h_all, ln_f) = tensor::layer_norm_fwd(&x, &params.final_gamma, &params.final_beta, LN_EPS)?;
    let first = n_v + n_p - 1;
    let h = tensor::slice_rows(&h_all, first, first + n_t)?;
    let (h_out, vif_tape) = match vif {
        Some(vp) => {
            let (fused, tape) = vif::forward_batch(&z_v, &h, vp)?;
            (fused, Some(tape))
        }
        None => (h.clone(), None),
    };
    let logits = tensor::matmul(&h_out, &params.w_o)?;
    let mut d_logits = Vec::new();
    let want_grad = grads.is_some();
    let (nll, tokens) = nll_sum(&logits, &sample.targets, want_grad.then_some(&mut d_logits))?;
    let loss = LossSum { nll, tokens };
    let Some(g) = grads else {
        return Ok(loss);
    };

    let prec = params.precision();
    let d_logits = Tensor::finish("ntp_loss", vec![n_t, params.config.vocab_size], d_logits, prec)?;
    g.model.w_o.axpy(1.0, &tensor::matmul_tn(&h_out, &d_logits)?)?;
    let d_h_out = tensor::matmul_nt(&d_logits, &params.w_o)?;
    let (d_h, d_z_v_vif) = match (vif, &vif_tape) {
        (Some(vp), Some(tape)) => {
            let (dzv, dh, gv) = vif::backward_batch(tape, vp, &d_h_out)?;
            let acc = g
                .vif
                .as_mut()
                .ok_or_else(|| VifError::invalid("gradient buffers lack VIF slots"))?;
            for ((_, a), (_, d)) in acc.named_tensors_mut().into_iter().zip(gv.named_tensors()) {
                a.axpy(1.0, d)?;
            }
            (dh, Some(dzv))
        }
        _ => (d_h_out, None),
    };
    if g.trunk_frozen {
        return Ok(loss);
    }

    let d = params.config.d_model;
    let mut dh_all = vec![0.0; len * d];
    dh_all[first * d..(first + n_t) * d].copy_from_slice(d_h.data());
    let dh_all = Tensor::finish("loss_and_grads", vec![len, d], dh_all, prec)?;
    let (mut dx, dgf, dbf) = tensor::layer_norm_backward(&ln_f, &params.final_gamma, &dh_all)?;
    g.model.final_gamma.axpy(1.0, &dgf)?;
    g.model.final_beta.axpy(1.0, &dbf)?;
    for ((b, tape), gb) in params.blocks.iter().zip(&tapes).zip(g.model.blocks.iter_mut()).rev() {
        dx = block_backward(tape, b, gb, &dx)?;
    }

    // Positions and embeddings.
    let dpos = g.model.pos_embed.data_mut();
    for (o, v) in dpos[..len * d].iter_mut().zip(dx.data()) {
        *o = prec.round(*o + v);
    }
    let d_text = tensor::slice_rows(&dx, n_v, len)?;
    tensor::scatter_add_rows(&mut g.model.tok_embed, &text, &d_text)?;
    let mut d_z_v = tensor::slice_rows(&dx, 0, n_v)?;
    if let Some(extra) = d_z_v_vif {
        d_z_v = tensor::add(&d_z_v, &extra)?;
    }
    g.model.connector_w.axpy(1.0, &tensor::matmul_tn(&v, &d_z_v)?)?;
    g.model.connector_b.axpy(1.0, &tensor::sum_rows(&d_z_v)?)?;
    let d_v = tensor::matmul_nt(&d_z_v, &params.connector_w)?;
    tensor::scatter_add_rows(&mut g.model.symbol_embed, &idx.symbols, &d_v)?;
    tensor::scatter_add_rows(&mut g.model.grid_row, &idx.rows, &d_v)?;
    tensor::scatter_add_rows(&mut g.model.grid_col, &idx.cols, &d_v)?;
    Ok(loss)
}

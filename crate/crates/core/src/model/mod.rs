//! Toy decoder-only multimodal language model.
//!
//! Pipeline: a table-lookup vision stub turns grid cells into `d_vision`
//! features, an affine connector maps them to `d_model`, the result is
//! prepended to the text embeddings, and a small pre-norm causal decoder
//! produces the hidden state fed to the output projection (optionally
//! through the vision inference former).

mod checkpoint;
mod forward;
mod generate;

pub use checkpoint::Checkpoint;
pub use forward::{embed_sequence, forward, loss_and_grads, ntp_loss, Gradients, LossSum};
pub use generate::{
    generate, next_dist, DecoderState, DecodingTrace, GenerationConfig, Mode, StepRecord, VisualCacheStrategy,
};

use crate::attention::AttentionParams;
use crate::error::{Result, VifError};
use crate::synthgrid::{self, GridImage};
use crate::tensor::{self, Precision, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_symbols: usize,
    pub vocab_size: usize,
    pub max_grid_side: usize,
    pub d_vision: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_symbols: 16,
            vocab_size: synthgrid::vocab_size_for(16),
            max_grid_side: 8,
            d_vision: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_seq_len: 512,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_symbols", self.n_symbols),
            ("max_grid_side", self.max_grid_side),
            ("d_vision", self.d_vision),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(VifError::Config(format!("model.{name} must be positive")));
        }
        if self.vocab_size < synthgrid::vocab_size_for(self.n_symbols) {
            return Err(VifError::Config(format!(
                "vocab_size {} cannot hold {} symbols plus specials",
                self.vocab_size, self.n_symbols
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(VifError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(VifError::Config("d_model must be at least 2".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: AttentionParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

impl DecoderBlock {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (d, f, p) = (cfg.d_model, cfg.d_ff(), cfg.precision);
        Ok(DecoderBlock {
            ln1_gamma: Tensor::ones(&[d], p),
            ln1_beta: Tensor::zeros(&[d], p),
            attn: AttentionParams::init(d, cfg.n_heads, p, rng)?,
            ln2_gamma: Tensor::ones(&[d], p),
            ln2_beta: Tensor::zeros(&[d], p),
            ff_w1: Tensor::init_weight(d, f, p, rng),
            ff_b1: Tensor::uniform(&[f], 1.0 / (d as f64).sqrt(), p, rng),
            ff_w2: Tensor::init_weight(f, d, p, rng),
            ff_b2: Tensor::uniform(&[d], 1.0 / (f as f64).sqrt(), p, rng),
        })
    }

    fn zeros_like(&self) -> Self {
        DecoderBlock {
            ln1_gamma: self.ln1_gamma.zeros_like(),
            ln1_beta: self.ln1_beta.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2_gamma: self.ln2_gamma.zeros_like(),
            ln2_beta: self.ln2_beta.zeros_like(),
            ff_w1: self.ff_w1.zeros_like(),
            ff_b1: self.ff_b1.zeros_like(),
            ff_w2: self.ff_w2.zeros_like(),
            ff_b2: self.ff_b2.zeros_like(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Vision stub: one row per grid symbol.
    pub symbol_embed: Tensor,
    /// Vision stub 2-D position: `grid_row[r] + grid_col[c]`.
    pub grid_row: Tensor,
    pub grid_col: Tensor,
    pub connector_w: Tensor,
    pub connector_b: Tensor,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<DecoderBlock>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    /// Output projection `[d_model x vocab]`.
    pub w_o: Tensor,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (dv, d, p) = (cfg.d_vision, cfg.d_model, cfg.precision);
        let vb = 1.0 / (dv as f64).sqrt();
        let db = 1.0 / (d as f64).sqrt();
        let symbol_embed = Tensor::uniform(&[cfg.n_symbols, dv], vb, p, rng);
        let grid_row = Tensor::uniform(&[cfg.max_grid_side, dv], vb, p, rng);
        let grid_col = Tensor::uniform(&[cfg.max_grid_side, dv], vb, p, rng);
        let connector_w = Tensor::init_weight(dv, d, p, rng);
        let connector_b = Tensor::uniform(&[d], vb, p, rng);
        let tok_embed = Tensor::uniform(&[cfg.vocab_size, d], db, p, rng);
        let pos_embed = Tensor::uniform(&[cfg.max_seq_len, d], db, p, rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| DecoderBlock::init(cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            config: *cfg,
            symbol_embed,
            grid_row,
            grid_col,
            connector_w,
            connector_b,
            tok_embed,
            pos_embed,
            blocks,
            final_gamma: Tensor::ones(&[d], p),
            final_beta: Tensor::zeros(&[d], p),
            w_o: Tensor::init_weight(d, cfg.vocab_size, p, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config,
            symbol_embed: self.symbol_embed.zeros_like(),
            grid_row: self.grid_row.zeros_like(),
            grid_col: self.grid_col.zeros_like(),
            connector_w: self.connector_w.zeros_like(),
            connector_b: self.connector_b.zeros_like(),
            tok_embed: self.tok_embed.zeros_like(),
            pos_embed: self.pos_embed.zeros_like(),
            blocks: self.blocks.iter().map(DecoderBlock::zeros_like).collect(),
            final_gamma: self.final_gamma.zeros_like(),
            final_beta: self.final_beta.zeros_like(),
            w_o: self.w_o.zeros_like(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("vision.symbol_embed".into(), &self.symbol_embed),
            ("vision.grid_row".into(), &self.grid_row),
            ("vision.grid_col".into(), &self.grid_col),
            ("connector.w".into(), &self.connector_w),
            ("connector.b".into(), &self.connector_b),
            ("decoder.tok_embed".into(), &self.tok_embed),
            ("decoder.pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = format!("decoder.block{i}");
            out.push((format!("{pre}.ln1.gamma"), &b.ln1_gamma));
            out.push((format!("{pre}.ln1.beta"), &b.ln1_beta));
            for (n, t) in b.attn.tensors() {
                out.push((format!("{pre}.attn.{n}"), t));
            }
            out.push((format!("{pre}.ln2.gamma"), &b.ln2_gamma));
            out.push((format!("{pre}.ln2.beta"), &b.ln2_beta));
            out.push((format!("{pre}.ff.w1"), &b.ff_w1));
            out.push((format!("{pre}.ff.b1"), &b.ff_b1));
            out.push((format!("{pre}.ff.w2"), &b.ff_w2));
            out.push((format!("{pre}.ff.b2"), &b.ff_b2));
        }
        out.push(("decoder.final_norm.gamma".into(), &self.final_gamma));
        out.push(("decoder.final_norm.beta".into(), &self.final_beta));
        out.push(("head.w_o".into(), &self.w_o));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("vision.symbol_embed".into(), &mut self.symbol_embed),
            ("vision.grid_row".into(), &mut self.grid_row),
            ("vision.grid_col".into(), &mut self.grid_col),
            ("connector.w".into(), &mut self.connector_w),
            ("connector.b".into(), &mut self.connector_b),
            ("decoder.tok_embed".into(), &mut self.tok_embed),
            ("decoder.pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let pre = format!("decoder.block{i}");
            out.push((format!("{pre}.ln1.gamma"), &mut b.ln1_gamma));
            out.push((format!("{pre}.ln1.beta"), &mut b.ln1_beta));
            for (n, t) in b.attn.tensors_mut() {
                out.push((format!("{pre}.attn.{n}"), t));
            }
            out.push((format!("{pre}.ln2.gamma"), &mut b.ln2_gamma));
            out.push((format!("{pre}.ln2.beta"), &mut b.ln2_beta));
            out.push((format!("{pre}.ff.w1"), &mut b.ff_w1));
            out.push((format!("{pre}.ff.b1"), &mut b.ff_b1));
            out.push((format!("{pre}.ff.w2"), &mut b.ff_w2));
            out.push((format!("{pre}.ff.b2"), &mut b.ff_b2));
        }
        out.push(("decoder.final_norm.gamma".into(), &mut self.final_gamma));
        out.push(("decoder.final_norm.beta".into(), &mut self.final_beta));
        out.push(("head.w_o".into(), &mut self.w_o));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn precision(&self) -> Precision {
        self.config.precision
    }

    /// Vision-stub 2-D position feature of cell `(r, c)`.
    pub fn grid_position(&self, r: usize, c: usize) -> Result<Tensor> {
        tensor::add(
            &tensor::slice_rows(&self.grid_row, r, r + 1)?,
            &tensor::slice_rows(&self.grid_col, c, c + 1)?,
        )
    }
}

/// Lookup indices used by [`encode_image`], kept so gradients can be
/// scattered back into the three tables.
pub(crate) struct ImageIndex {
    pub symbols: Vec<usize>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

pub(crate) fn image_index(image: &GridImage, params: &ModelParams) -> Result<ImageIndex> {
    let cfg = &params.config;
    if image.side > cfg.max_grid_side {
        return Err(VifError::invalid(format!(
            "grid side {} exceeds max_grid_side {}",
            image.side, cfg.max_grid_side
        )));
    }
    if image.cells.len() != image.side * image.side {
        return Err(VifError::invalid("grid cell count does not match its side"));
    }
    if let Some(&bad) = image.cells.iter().find(|&&c| c >= cfg.n_symbols) {
        return Err(VifError::invalid(format!("unknown symbol id {bad}")));
    }
    let n = image.cells.len();
    Ok(ImageIndex {
        symbols: image.cells.clone(),
        rows: (0..n).map(|i| i / image.side).collect(),
        cols: (0..n).map(|i| i % image.side).collect(),
    })
}

/// Vision stub: row `i` is `symbol_embed[cell_i] + grid_row[r_i] + grid_col[c_i]`.
pub fn encode_image(image: &GridImage, params: &ModelParams) -> Result<Tensor> {
    let idx = image_index(image, params)?;
    tensor::add(
        &tensor::add(
            &tensor::gather_rows(&params.symbol_embed, &idx.symbols)?,
            &tensor::gather_rows(&params.grid_row, &idx.rows)?,
        )?,
        &tensor::gather_rows(&params.grid_col, &idx.cols)?,
    )
}

/// Affine connector from vision features to the decoder width.
pub fn connect(v: &Tensor, params: &ModelParams) -> Result<Tensor> {
    tensor::add_bias(&tensor::matmul(v, &params.connector_w)?, &params.connector_b)
}

pub fn visual_tokens(image: &GridImage, params: &ModelParams) -> Result<Tensor> {
    connect(&encode_image(image, params)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        let cfg = ModelConfig {
            n_symbols: 5,
            vocab_size: 9,
            max_grid_side: 3,
            d_vision: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_seq_len: 32,
            precision: Precision::F64,
        };
        ModelParams::init(&cfg, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn one_cell_image() {
        let p = small();
        let img = GridImage::new(1, vec![3], 5).unwrap();
        let v = encode_image(&img, &p).unwrap();
        let expect = tensor::add(
            &tensor::slice_rows(&p.symbol_embed, 3, 4).unwrap(),
            &p.grid_position(0, 0).unwrap(),
        )
        .unwrap();
        assert!(v.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn images_differing_in_one_cell_differ_in_one_row() {
        let p = small();
        let a = GridImage::new(3, vec![0, 1, 2, 3, 4, 0, 1, 2, 3], 5).unwrap();
        let mut b = a.clone();
        b.cells[5] = 4;
        let (va, vb) = (encode_image(&a, &p).unwrap(), encode_image(&b, &p).unwrap());
        let differing: Vec<usize> = (0..9).filter(|&i| va.row(i) != vb.row(i)).collect();
        assert_eq!(differing, vec![5]);
    }

    #[test]
    fn three_by_three_matches_lookup() {
        let p = small();
        let img = GridImage::new(3, vec![4, 0, 2, 1, 1, 3, 0, 2, 4], 5).unwrap();
        let v = encode_image(&img, &p).unwrap();
        for i in 0..9 {
            let (r, c) = (i / 3, i % 3);
            for j in 0..6 {
                let expect = p.symbol_embed.at(img.cells[i], j) + p.grid_row.at(r, j) + p.grid_col.at(c, j);
                assert_eq!(v.at(i, j), expect);
            }
        }
        let bad = GridImage { side: 1, cells: vec![7] };
        assert!(encode_image(&bad, &p).is_err());
    }

    #[test]
    fn connector_examples() {
        let mut p = small();
        let mut rng = Rng::new(2);
        let v = Tensor::uniform(&[4, 6], 1.0, Precision::F64, &mut rng);
        let expect = tensor::add_bias(&tensor::matmul(&v, &p.connector_w).unwrap(), &p.connector_b).unwrap();
        assert!(connect(&v, &p).unwrap().max_abs_diff(&expect) < 1e-12);
        p.connector_w = p.connector_w.zeros_like();
        p.connector_b = p.connector_b.zeros_like();
        assert_eq!(connect(&v, &p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn square_identity_connector_preserves_input() {
        let mut p = small();
        p.config.d_vision = 8;
        p.connector_w = Tensor::identity(8, Precision::F64);
        p.connector_b = Tensor::zeros(&[8], Precision::F64);
        let mut rng = Rng::new(3);
        let v = Tensor::uniform(&[3, 8], 1.0, Precision::F64, &mut rng);
        assert!(connect(&v, &p).unwrap().bit_eq(&v));
    }

    #[test]
    fn names_are_unique() {
        let p = small();
        let names: std::collections::HashSet<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), p.named_tensors().len());
    }
}

//! Run configuration: a TOML file with `[task]`, `[model]`, `[vif]`,
//! `[stage1]`, `[stage2]`, `[analysis]` and `[bench]` sections. Every key is
//! optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::analysis::{BenchOptions, TokenRepr};
use crate::error::{Result, VifError};
use crate::model::ModelConfig;
use crate::pipeline::ExperimentSpec;
use crate::synthgrid::{vocab_size_for, TaskSpec};
use crate::tensor::Precision;
use crate::trainer::{StageSpec, Trainable};

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub vif: VifSection,
    #[serde(default)]
    pub stage1: StageSection,
    #[serde(default)]
    pub stage2: StageSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub bench: BenchSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config deserializes")
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub side: usize,
    pub n_symbols: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection { side: 8, n_symbols: 16, n_train: 3000, n_eval: 64 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_vision: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub precision: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_vision: m.d_vision,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_mult: m.ffn_mult,
            max_seq_len: m.max_seq_len,
            precision: "f32".into(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VifSection {
    pub n_heads: usize,
    pub enable_self_attn: bool,
}

impl Default for VifSection {
    fn default() -> Self {
        VifSection { n_heads: 4, enable_self_attn: true }
    }
}

/// Unset keys fall back to per-stage defaults (see [`RunConfig::stages`]).
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub trainable: Option<String>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub base_lr: Option<f64>,
    pub vif_lr_mult: Option<f64>,
    pub batch_size: Option<usize>,
    pub grad_accum: Option<usize>,
    pub warmup_ratio: Option<f64>,
}

impl StageSection {
    fn resolve(&self, mut base: StageSpec) -> Result<StageSpec> {
        if let Some(t) = &self.trainable {
            base.trainable = Trainable::parse(t)?;
        }
        base.epochs = self.epochs.unwrap_or(base.epochs);
        base.max_steps = self.max_steps.or(base.max_steps);
        base.base_lr = self.base_lr.unwrap_or(base.base_lr);
        base.vif_lr_mult = self.vif_lr_mult.unwrap_or(base.vif_lr_mult);
        base.batch_size = self.batch_size.unwrap_or(base.batch_size);
        base.grad_accum = self.grad_accum.unwrap_or(base.grad_accum);
        base.warmup_ratio = self.warmup_ratio.unwrap_or(base.warmup_ratio);
        base.validate()?;
        Ok(base)
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub savgol_window: usize,
    pub savgol_order: usize,
    /// `input` (embedding rows) or `output` (output-projection columns).
    pub repr: String,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { savgol_window: 11, savgol_order: 3, repr: "input".into() }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub samples: usize,
    pub steps: usize,
    pub warmups: usize,
    pub reps: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { samples: 4, steps: 32, warmups: 3, reps: 7 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VifError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| VifError::Config(e.to_string()))?;
        cfg.experiment()?;
        cfg.bench_options()?;
        Ok(cfg)
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.model.precision.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(VifError::Config(format!("model.precision `{other}` (f32 | f64)"))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            n_symbols: self.task.n_symbols,
            vocab_size: vocab_size_for(self.task.n_symbols),
            max_grid_side: self.task.side,
            d_vision: m.d_vision,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_mult: m.ffn_mult,
            max_seq_len: m.max_seq_len,
            precision: self.precision()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Warm-up then full fine-tuning, with any overrides applied.
    pub fn stages(&self) -> Result<Vec<StageSpec>> {
        // one pass over the default 3000 samples at batch 8: 1/8 warm-up, rest full
        let mut warm = StageSpec::warmup(3e-3);
        warm.max_steps = Some(46);
        warm.epochs = 10;
        let mut full = StageSpec::full(3e-3);
        full.max_steps = Some(328);
        full.epochs = 10;
        full.vif_lr_mult = 1.0;
        Ok(vec![self.stage1.resolve(warm)?, self.stage2.resolve(full)?])
    }

    pub fn experiment(&self) -> Result<ExperimentSpec> {
        let spec = ExperimentSpec {
            task: TaskSpec { side: self.task.side, n_symbols: self.task.n_symbols, n_samples: self.task.n_train },
            n_eval: self.task.n_eval,
            model: self.model_config()?,
            vif_heads: self.vif.n_heads,
            vif_self_attn: self.vif.enable_self_attn,
            stages: self.stages()?,
            seed: self.seed,
            savgol_window: self.analysis.savgol_window,
            savgol_order: self.analysis.savgol_order,
            repr: TokenRepr::parse(&self.analysis.repr).map_err(|e| VifError::Config(e.to_string()))?,
        };
        if spec.savgol_window.is_multiple_of(2) || spec.savgol_order >= spec.savgol_window {
            return Err(VifError::Config("analysis.savgol_window must be odd and exceed savgol_order".into()));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn bench_options(&self) -> Result<BenchOptions> {
        if self.bench.warmups < 3 || self.bench.reps == 0 || self.bench.samples == 0 || self.bench.steps == 0 {
            return Err(VifError::Config("bench needs samples, steps, reps >= 1 and warmups >= 3".into()));
        }
        Ok(BenchOptions { warmups: self.bench.warmups, reps: self.bench.reps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.task.side, 8);
        assert_eq!(c.stages().unwrap()[0].trainable, Trainable::VifAndHead);
        assert_eq!(c.stages().unwrap()[1].vif_lr_mult, 1.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[task]\nsides = 3").is_err());
        assert!(RunConfig::parse("[stage1]\nlr = 0.1").is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse("seed = 9\n[task]\nside = 2\nn_symbols = 4\n[stage2]\nbase_lr = 0.5\nmax_steps = 3\n").unwrap();
        let s = c.stages().unwrap();
        assert_eq!(s[1].base_lr, 0.5);
        assert_eq!(s[1].max_steps, Some(3));
        assert_eq!(s[0].base_lr, 3e-3);
        assert_eq!(c.model_config().unwrap().vocab_size, 8);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("[model]\nprecision = \"f16\"").is_err());
        assert!(RunConfig::parse("[model]\nn_heads = 5").is_err());
        assert!(RunConfig::parse("[stage1]\nwarmup_ratio = 1.5").is_err());
        assert!(RunConfig::parse("[analysis]\nsavgol_window = 4").is_err());
    }
}

//! End-to-end experiment: data, staged training, greedy evaluation and the
//! consistency diagnostics, for one arm (baseline or former variant).

use crate::analysis::{consistency_curve, decay_slope, ConsistencyCurve, DecaySlope, TokenRepr};
use crate::error::{Result, VifError};
use crate::model::{generate, DecodingTrace, GenerationConfig, Mode, ModelConfig, ModelParams};
use crate::synthgrid::{gen_dataset, per_position_accuracy, TaskSample, TaskSpec};
use crate::tensor::Rng;
use crate::trainer::{evaluate_loss, train_stage, StageSpec, TrainLog};
use crate::vif::VifParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Vif,
    /// Former without its visual self-attention sub-layer.
    VifNoSelfAttn,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Vif => "vif",
            Arm::VifNoSelfAttn => "vif_no_self_attn",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Arm::Baseline => Mode::Baseline,
            Arm::Vif | Arm::VifNoSelfAttn => Mode::Vif,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    /// `n_samples` is the training-set size.
    pub task: TaskSpec,
    pub n_eval: usize,
    pub model: ModelConfig,
    pub vif_heads: usize,
    /// When false the `Vif` arm also drops the visual self-attention.
    pub vif_self_attn: bool,
    pub stages: Vec<StageSpec>,
    pub seed: u64,
    pub savgol_window: usize,
    pub savgol_order: usize,
    pub repr: TokenRepr,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        if self.task.n_samples == 0 || self.n_eval == 0 {
            return Err(VifError::Config("task needs training and evaluation samples".into()));
        }
        if self.task.side > self.model.max_grid_side || self.task.n_symbols > self.model.n_symbols {
            return Err(VifError::Config("task grid exceeds the model's grid side or alphabet".into()));
        }
        let seq = self.task.side * self.task.side * 2 + 2;
        if seq > self.model.max_seq_len {
            return Err(VifError::Config(format!(
                "sequences of {seq} positions exceed max_seq_len {}",
                self.model.max_seq_len
            )));
        }
        if self.vif_heads == 0 || !self.model.d_model.is_multiple_of(self.vif_heads) {
            return Err(VifError::Config(format!("vif heads {} must divide d_model", self.vif_heads)));
        }
        Ok(())
    }

    pub fn datasets(&self) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
        let root = Rng::new(self.seed);
        let train = gen_dataset(&self.task, self.model.vocab_size, root.derive_seed("data.train"))?;
        let eval_spec = TaskSpec { n_samples: self.n_eval, ..self.task };
        let eval = gen_dataset(&eval_spec, self.model.vocab_size, root.derive_seed("data.eval"))?;
        Ok((train, eval))
    }

    /// Decoder initialization is shared by every arm; the former draws from
    /// its own stream.
    pub fn init(&self, arm: Arm) -> Result<(ModelParams, Option<VifParams>)> {
        let root = Rng::new(self.seed);
        let model = ModelParams::init(&self.model, &mut root.fork("init.model"))?;
        let vif = match arm {
            Arm::Baseline => None,
            Arm::Vif | Arm::VifNoSelfAttn => Some(VifParams::init(
                self.model.d_model,
                self.vif_heads,
                arm == Arm::Vif && self.vif_self_attn,
                self.model.precision,
                &mut root.fork("init.vif"),
            )?),
        };
        Ok((model, vif))
    }

    pub fn stage_seed(&self, index: usize) -> u64 {
        Rng::new(self.seed).derive_seed(&format!("stage{index}"))
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub traces: Vec<DecodingTrace>,
    pub accuracy: Vec<f64>,
    pub curve: ConsistencyCurve,
    pub slope: Option<DecaySlope>,
    pub eval_loss: f64,
}

impl Evaluation {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }

    /// Mean accuracy over the last quarter of cell positions.
    pub fn last_quartile_accuracy(&self) -> f64 {
        let n = self.accuracy.len();
        let start = n - n.div_ceil(4);
        let tail = &self.accuracy[start..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub fn evaluate(
    spec: &ExperimentSpec,
    arm: Arm,
    model: &ModelParams,
    vif: Option<&VifParams>,
    samples: &[TaskSample],
) -> Result<Evaluation> {
    let gen_cfg = GenerationConfig::new(arm.mode(), spec.task.side * spec.task.side + 1);
    let traces = samples
        .iter()
        .map(|s| generate(&s.image, &s.prompt, model, vif, &gen_cfg))
        .collect::<Result<Vec<_>>>()?;
    let generated: Vec<Vec<usize>> = traces.iter().map(DecodingTrace::tokens).collect();
    let accuracy = per_position_accuracy(&generated, samples)?;
    let mut curve = consistency_curve(&traces, model, spec.repr, spec.savgol_window, spec.savgol_order)?;
    curve.meta.push(("mode".into(), arm.as_str().into()));
    curve.meta.push(("seed".into(), spec.seed.to_string()));
    let slope = if curve.points.len() >= 2 { Some(decay_slope(&curve)?) } else { None };
    let eval_loss = evaluate_loss(model, vif, samples)?;
    Ok(Evaluation { traces, accuracy, curve, slope, eval_loss })
}

#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub model: ModelParams,
    pub vif: Option<VifParams>,
    pub log: TrainLog,
    pub eval: Evaluation,
}

/// Trains one arm through every stage and evaluates it.
pub fn run_arm(spec: &ExperimentSpec, arm: Arm, train: &[TaskSample], eval: &[TaskSample]) -> Result<ArmOutcome> {
    spec.validate()?;
    let (mut model, mut vif) = spec.init(arm)?;
    let mut log = TrainLog::default();
    for (i, stage) in spec.stages.iter().enumerate() {
        log.extend(train_stage(&mut model, vif.as_mut(), train, stage, spec.stage_seed(i))?);
    }
    let eval = evaluate(spec, arm, &model, vif.as_ref(), eval)?;
    Ok(ArmOutcome { arm, model, vif, log, eval })
}

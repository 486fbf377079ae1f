//! Staged optimization: a warm-up stage that trains only the former and the
//! output head, then full fine-tuning. Adam (no weight decay) under a
//! linear-warmup cosine schedule.

mod gradcheck;

pub use gradcheck::{
    analytic_grads, finite_difference_check, grad_check_all, relative_error, GradCheckOptions, GradCheckReport, TensorCheck,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, VifError};
use crate::model::{loss_and_grads, Gradients, LossSum, ModelParams};
use crate::synthgrid::TaskSample;
use crate::tensor::{Rng, Tensor};
use crate::vif::VifParams;

/// Learning rate at `step` of `total_steps`: linear ramp from 0 to `base_lr`
/// over the first `ceil(warmup_ratio * total_steps)` steps, then a half
/// cosine down to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(VifError::invalid("cosine_lr needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(VifError::invalid(format!("step {step} beyond total_steps {total_steps}")));
    }
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(VifError::invalid(format!("warmup_ratio {warmup_ratio} outside [0, 1)")));
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps.saturating_sub(1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moments per named parameter plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update. `lr_for` maps a parameter name to its
/// learning rate, or `None` for a frozen parameter, which is left untouched
/// together with its moments.
pub fn adam_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &[(String, &Tensor)],
    state: &mut OptimState,
    lr_for: &dyn Fn(&str) -> Option<f64>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(VifError::shape("adam_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((name, p), (gname, g)) in params.into_iter().zip(grads) {
        if &name != gname || p.shape() != g.shape() {
            return Err(VifError::shape(
                "adam_step",
                format!("{name} {:?} paired with {gname} {:?}", p.shape(), g.shape()),
            ));
        }
        let Some(lr) = lr_for(&name) else { continue };
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let prec = p.precision();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *w = prec.round(*w - update);
        }
    }
    Ok(())
}

/// Which parameters a stage may update.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    /// Warm-up: the former (`vif.*`) and the output head (`head.*`).
    VifAndHead,
    All,
    /// Parameters whose name starts with any of the prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::VifAndHead => name.starts_with("vif.") || name.starts_with("head."),
            Trainable::All => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vif+head" => Ok(Trainable::VifAndHead),
            "all" => Ok(Trainable::All),
            other => Ok(Trainable::Prefixes(
                other.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub name: String,
    pub trainable: Trainable,
    pub epochs: usize,
    pub base_lr: f64,
    /// Multiplier on `base_lr` for `vif.*` parameters.
    pub vif_lr_mult: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_ratio: f64,
    /// Caps the number of optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl StageSpec {
    pub fn warmup(base_lr: f64) -> Self {
        StageSpec {
            name: "warmup".into(),
            trainable: Trainable::VifAndHead,
            epochs: 1,
            base_lr,
            vif_lr_mult: 1.0,
            batch_size: 8,
            grad_accum: 1,
            warmup_ratio: 0.03,
            max_steps: None,
        }
    }

    pub fn full(base_lr: f64) -> Self {
        StageSpec { name: "full".into(), trainable: Trainable::All, vif_lr_mult: 2.0, ..Self::warmup(base_lr) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(VifError::Config(format!("stage {}: epochs, batch_size and grad_accum must be positive", self.name)));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.vif_lr_mult >= 0.0) {
            return Err(VifError::Config(format!("stage {}: learning rates must be finite and non-negative", self.name)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(VifError::Config(format!("stage {}: warmup_ratio must lie in [0, 1)", self.name)));
        }
        Ok(())
    }

    /// Optimizer steps this stage will take on `n_samples` samples.
    pub fn total_steps(&self, n_samples: usize) -> usize {
        let per_step = self.batch_size * self.grad_accum;
        let steps = (n_samples * self.epochs).div_ceil(per_step);
        self.max_steps.map_or(steps, |m| steps.min(m))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,lr,loss\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.9e},{:.9}", r.step, r.stage, r.lr, r.loss).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
    }

    /// Mean loss of the first and last `n` logged steps.
    pub fn head_tail_loss(&self, n: usize) -> Option<(f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = n.clamp(1, self.rows.len());
        let mean = |rs: &[LogRow]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.rows[..n]), mean(&self.rows[self.rows.len() - n..])))
    }
}

/// Runs one stage over `dataset`. Parameters outside the stage's mask are
/// never written.
pub fn train_stage(
    model: &mut ModelParams,
    mut vif: Option<&mut VifParams>,
    dataset: &[TaskSample],
    stage: &StageSpec,
    seed: u64,
) -> Result<TrainLog> {
    stage.validate()?;
    if dataset.is_empty() {
        return Err(VifError::invalid("training on an empty dataset"));
    }
    let mut names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(v) = vif.as_deref() {
        names.extend(v.named_tensors().into_iter().map(|(n, _)| n));
    }
    if !names.iter().any(|n| stage.trainable.allows(n)) {
        return Err(VifError::invalid(format!("stage {} has no trainable parameters", stage.name)));
    }
    // Skip backprop into the trunk when nothing below the head can change.
    let trunk_frozen = model
        .named_tensors()
        .iter()
        .all(|(n, _)| n.starts_with("head.") || !stage.trainable.allows(n));

    let total = stage.total_steps(dataset.len());
    let mut rng = Rng::new(seed).fork("trainer").fork(&stage.name);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut state = OptimState::default();
    let adam = AdamConfig::default();
    let mut log = TrainLog::default();

    for step in 0..total {
        let mut grads = Gradients::zeros(model, vif.as_deref());
        grads.trunk_frozen = trunk_frozen;
        let mut loss = LossSum::default();
        for _ in 0..stage.batch_size * stage.grad_accum {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let sample = &dataset[order[cursor]];
            cursor += 1;
            loss += loss_and_grads(model, vif.as_deref(), sample, Some(&mut grads))?;
        }
        if !loss.nll.is_finite() {
            return Err(VifError::Contract(format!("non-finite loss at step {step} of {}", stage.name)));
        }
        grads.scale(1.0 / loss.tokens.max(1) as f64);

        let lr = cosine_lr(step, total, stage.base_lr, stage.warmup_ratio)?;
        let lr_for = |name: &str| -> Option<f64> {
            if !stage.trainable.allows(name) {
                None
            } else if name.starts_with("vif.") {
                Some(lr * stage.vif_lr_mult)
            } else {
                Some(lr)
            }
        };
        let mut params = model.named_tensors_mut();
        if let Some(v) = vif.as_deref_mut() {
            params.extend(v.named_tensors_mut());
        }
        adam_step(params, &grads.named_tensors(), &mut state, &lr_for, &adam)?;
        log.rows.push(LogRow { step, stage: stage.name.clone(), lr, loss: loss.mean() });
    }
    Ok(log)
}

/// Mean per-token loss over a dataset without touching any parameter.
pub fn evaluate_loss(model: &ModelParams, vif: Option<&VifParams>, dataset: &[TaskSample]) -> Result<f64> {
    let mut loss = LossSum::default();
    for s in dataset {
        loss += loss_and_grads(model, vif, s, None)?;
    }
    Ok(loss.mean())
}

//! Central finite-difference checks of the hand-written backward passes.

use crate::error::{Result, VifError};
use crate::model::{loss_and_grads, Gradients, ModelParams};
use crate::synthgrid::TaskSample;
use crate::tensor::{Precision, Rng, Tensor};
use crate::vif::VifParams;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, as a fraction of the largest
    /// analytic magnitude within the tensor. Keeps near-zero entries from
    /// turning roundoff into large ratios.
    pub rel_floor: f64,
    /// Absolute denominator floor. Central differences of an f64 loss of
    /// magnitude ~10 carry roundoff near `1e-10`; entries below this floor
    /// are effectively held to an absolute tolerance.
    pub abs_floor: f64,
    /// Check at most this many coordinates per tensor (chosen by `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, rel_floor: 1e-3, abs_floor: 1e-5, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn get(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("tensor,checked,max_rel_err,index,analytic,numeric\n");
        for t in &self.tensors {
            out.push_str(&format!(
                "{},{},{:.3e},{},{:.6e},{:.6e}\n",
                t.name, t.checked, t.max_rel_err, t.worst_index, t.analytic, t.numeric
            ));
        }
        out
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` (one gradient per tensor yielded by `access`, same
/// order) against central differences of `loss`. `access` must yield the
/// parameters in a fixed order; each is perturbed in place and restored.
pub fn finite_difference_check<P, A, L>(
    params: &mut P,
    access: A,
    loss: L,
    analytic: &[(String, Tensor)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    A: Fn(&mut P) -> Vec<(String, &mut Tensor)>,
    L: Fn(&P) -> Result<f64>,
{
    if !(opts.step > 0.0) {
        return Err(VifError::invalid("finite-difference step must be positive"));
    }
    let shapes: Vec<(String, Vec<usize>, Precision)> =
        access(params).into_iter().map(|(n, t)| (n, t.shape().to_vec(), t.precision())).collect();
    if shapes.len() != analytic.len() {
        return Err(VifError::shape("gradcheck", format!("{} tensors, {} gradients", shapes.len(), analytic.len())));
    }
    if shapes.iter().any(|(_, _, p)| *p != Precision::F64) {
        return Err(VifError::Precision("finite-difference checks need f64 parameters"));
    }
    let mut rng = Rng::new(opts.seed).fork("gradcheck");
    let mut report = GradCheckReport::default();
    for (ti, ((name, shape, _), (gname, grad))) in shapes.iter().zip(analytic).enumerate() {
        if name != gname || shape.as_slice() != grad.shape() {
            return Err(VifError::shape("gradcheck", format!("{name} {shape:?} vs {gname} {:?}", grad.shape())));
        }
        let len = grad.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if let Some(m) = opts.max_coords {
            if m < len {
                rng.shuffle(&mut coords);
                coords.truncate(m);
                coords.sort_unstable();
            }
        }
        let floor = (opts.rel_floor * grad.max_abs()).max(opts.abs_floor);
        let mut check = TensorCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &j in &coords {
            let orig = access(params)[ti].1.data()[j];
            access(params)[ti].1.data_mut()[j] = orig + opts.step;
            let plus = loss(params);
            access(params)[ti].1.data_mut()[j] = orig - opts.step;
            let minus = loss(params);
            access(params)[ti].1.data_mut()[j] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(VifError::NonFinite("gradcheck loss"));
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[j];
            let err = relative_error(a, numeric, floor);
            if j == coords[0] || err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.tensors.push(check);
    }
    Ok(report)
}

struct Pair<'a> {
    model: &'a mut ModelParams,
    vif: Option<&'a mut VifParams>,
}

fn pair_tensors<'b>(p: &'b mut Pair<'_>) -> Vec<(String, &'b mut Tensor)> {
    let mut out = p.model.named_tensors_mut();
    if let Some(v) = p.vif.as_deref_mut() {
        out.extend(v.named_tensors_mut());
    }
    out
}

/// Analytic gradients of the summed loss of `sample`, as owned tensors.
pub fn analytic_grads(model: &ModelParams, vif: Option<&VifParams>, sample: &TaskSample) -> Result<Vec<(String, Tensor)>> {
    let mut g = Gradients::zeros(model, vif);
    loss_and_grads(model, vif, sample, Some(&mut g))?;
    Ok(g.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect())
}

/// Checks every parameter of the decoder (and the former, when given)
/// against central differences of the summed next-token loss on `sample`.
/// Pass `analytic` to check a gradient other than the model's own.
pub fn grad_check_all(
    model: &mut ModelParams,
    vif: Option<&mut VifParams>,
    sample: &TaskSample,
    analytic: Option<&[(String, Tensor)]>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if model.precision() != Precision::F64 {
        return Err(VifError::Precision("gradcheck requires an f64 model"));
    }
    let owned;
    let analytic = match analytic {
        Some(a) => a,
        None => {
            owned = analytic_grads(model, vif.as_deref(), sample)?;
            &owned
        }
    };
    let mut pair = Pair { model, vif };
    finite_difference_check(
        &mut pair,
        pair_tensors,
        |p: &Pair<'_>| Ok(loss_and_grads(p.model, p.vif.as_deref(), sample, None)?.nll),
        analytic,
        opts,
    )
}

//! Loss/gradient evaluation and the central-difference gradient checker.

use rand::seq::index::sample;
use serde::Serialize;

use super::params::{Gradients, ParamStore, Tag};
use crate::error::{PdmlError, Result};
use crate::rng::{rng_from_seed, PdmlRng};
use crate::Scalar;

/// A differentiable scalar program over a parameter store.
///
/// Implementations draw any Monte-Carlo noise from `rng`; the caller controls
/// the generator state so that repeated evaluations see the same noise.
pub trait Objective<F: Scalar> {
    /// Returns the loss and, when `grads` is given, adds the analytic gradient
    /// into it.
    fn evaluate(
        &self,
        params: &ParamStore<F>,
        rng: &mut PdmlRng,
        grads: Option<&mut Gradients<F>>,
    ) -> Result<F>;

    /// Which side of each non-differentiable point (ReLU gate, hinge) the
    /// objective sits on at `params`. `None` for smooth objectives.
    fn branch_signature(&self, _params: &ParamStore<F>) -> Result<Option<Vec<bool>>> {
        Ok(None)
    }
}

impl<F, T> Objective<F> for T
where
    F: Scalar,
    T: Fn(&ParamStore<F>, &mut PdmlRng, Option<&mut Gradients<F>>) -> Result<F>,
{
    fn evaluate(
        &self,
        params: &ParamStore<F>,
        rng: &mut PdmlRng,
        grads: Option<&mut Gradients<F>>,
    ) -> Result<F> {
        self(params, rng, grads)
    }
}

/// Evaluates `objective` from a copy of `rng` and accumulates the gradient
/// into the store. Fails on the first non-finite value.
pub fn eval_loss_and_grads<F: Scalar>(
    objective: &impl Objective<F>,
    params: &mut ParamStore<F>,
    rng: &PdmlRng,
) -> Result<F> {
    let mut grads = Gradients::zeros_like(params);
    let loss = objective.evaluate(params, &mut rng.clone(), Some(&mut grads))?;
    if !loss.is_finite() {
        return Err(PdmlError::Numeric(format!("loss is {loss}")));
    }
    check_finite(params, &grads)?;
    params.accumulate(&grads);
    Ok(loss)
}

pub(crate) fn check_finite<F: Scalar>(params: &ParamStore<F>, grads: &Gradients<F>) -> Result<()> {
    for (entry, buf) in params.entries().iter().zip(&grads.bufs) {
        if let Some(i) = buf.iter().position(|g| !g.is_finite()) {
            return Err(PdmlError::Numeric(format!(
                "gradient of {}[{i}] is {}",
                entry.name, buf[i]
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TagCheck {
    pub tag: Tag,
    pub checked: usize,
    /// Drawn coordinates whose probe interval crossed a branch point.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tags: Vec<TagCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn failing_tags(&self, tolerance: f64) -> Vec<Tag> {
        self.tags
            .iter()
            .filter(|t| !(t.max_rel_error < tolerance))
            .map(|t| t.tag)
            .collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares analytic gradients against central differences.
///
/// Coordinates are drawn without replacement from each routing tag until
/// `coords_per_tag` have been checked or the tag is exhausted. A coordinate
/// whose `+-eps` probe changes the objective's branch signature is skipped and
/// counted, since the central difference straddles a kink there. Every probe
/// restarts from the same `rng` state so Monte-Carlo noise is frozen.
pub fn finite_diff_check(
    objective: &impl Objective<f64>,
    params: &ParamStore<f64>,
    rng: &PdmlRng,
    eps: f64,
    coords_per_tag: usize,
    sample_seed: u64,
) -> Result<GradCheckReport> {
    let mut analytic = Gradients::zeros_like(params);
    objective.evaluate(params, &mut rng.clone(), Some(&mut analytic))?;
    let base = objective.branch_signature(params)?;

    let mut probe = params.clone();
    let mut picker = rng_from_seed(sample_seed);
    let mut tags = Vec::new();
    for tag in Tag::ALL {
        let coords: Vec<(usize, usize)> = params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.tag == tag)
            .flat_map(|(id, e)| (0..e.value.len()).map(move |i| (id, i)))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let order = sample(&mut picker, coords.len(), coords.len()).into_vec();

        let mut check = TagCheck {
            tag,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for k in order {
            if check.checked == coords_per_tag {
                break;
            }
            let (id, i) = coords[k];
            let original = probe.value(id)[i];
            let mut side = |delta: f64| -> Result<(f64, bool)> {
                probe.value_mut(id)[i] = original + delta;
                let value = objective.evaluate(&probe, &mut rng.clone(), None)?;
                let same = base.is_none() || objective.branch_signature(&probe)? == base;
                Ok((value, same))
            };
            let (plus, plus_smooth) = side(eps)?;
            let (minus, minus_smooth) = side(-eps)?;
            probe.value_mut(id)[i] = original;
            if !(plus_smooth && minus_smooth) {
                check.skipped += 1;
                continue;
            }

            check.checked += 1;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.get(id)[i], numeric);
            if !(err <= check.max_rel_error) {
                check.max_rel_error = err;
                check.worst = Some((params.entry(id).name.clone(), i));
            }
        }
        tags.push(check);
    }
    let max_rel_error = tags.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        tags,
        max_rel_error,
    })
}

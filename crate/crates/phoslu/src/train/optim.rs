//! Adam optimizer, learning-rate schedule, gradient clipping, and a
//! finite-difference gradient checker.
//!
//! The optimizer keeps first/second moment estimates in the same tensor
//! layout as the model parameters, so a step is a single zipped walk over
//! the named tensor list.  The gradient checker probes a sampled subset of
//! coordinates per tensor with central differences and compares against the
//! analytic gradient under a relative-error criterion with an absolute
//! floor, which is the standard way to keep tiny gradients from producing
//! spurious relative blow-ups.

use ndarray::Zip;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, ModelParams};

use super::TrainError;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Moment accumulators and step counter for Adam.
pub struct OptimizerState {
    /// Number of completed update steps.
    pub step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl OptimizerState {
    /// Fresh state (zero moments) shaped like `params`.
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            step: 0,
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
        }
    }

    /// Read access to the first-moment estimate (used by tests).
    #[cfg(test)]
    fn first_moment(&self) -> &ModelParams {
        &self.m
    }
}

/// One Adam update with bias correction.
///
/// Refuses to apply a non-finite gradient (parameters are left untouched),
/// and reports which tensor went non-finite if the update itself degenerates.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    if let Some(name) = grads.first_non_finite() {
        return Err(TrainError::NonFiniteGrad(name));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((_, mut p), (_, g)), ((_, mut m), (_, mut v))) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()))
    {
        Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(
            |p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            },
        );
    }
    if let Some(name) = params.first_non_finite() {
        return Err(TrainError::NonFiniteParam(name));
    }
    state.step = t;
    Ok(())
}

/// Scales the gradient in place so its global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.tensors() {
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, mut g) in grads.tensors_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Linear warmup to a peak learning rate followed by linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    /// Learning rate at the end of warmup.
    pub peak_lr: f64,
    /// Steps spent ramping up from zero.
    pub warmup_steps: u64,
    /// Step at which the rate reaches zero.
    pub max_steps: u64,
}

impl Schedule {
    /// Builds a schedule whose warmup length is `warmup_fraction` of
    /// `max_steps`, rounded to the nearest step.
    pub fn new(peak_lr: f64, warmup_fraction: f64, max_steps: u64) -> Self {
        let warmup_steps = (warmup_fraction * max_steps as f64).round() as u64;
        Self {
            peak_lr,
            warmup_steps,
            max_steps,
        }
    }

    /// Learning rate at a given (zero-based) step count.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.max_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let remaining = (self.max_steps - step) as f64;
        let decay_span = (self.max_steps - self.warmup_steps) as f64;
        self.peak_lr * remaining / decay_span
    }
}

/// Outcome of probing one tensor in a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    /// Tensor name as reported by the parameter container.
    pub tensor: String,
    /// Largest relative error seen across probed coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates probed.
    pub checked: usize,
    /// Whether every probed coordinate stayed within tolerance.
    pub pass: bool,
}

/// Per-tensor results of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// One entry per parameter tensor, in canonical order.
    pub entries: Vec<GradCheckEntry>,
    /// Relative-error threshold each coordinate must meet.
    pub tolerance: f64,
}

impl GradCheckReport {
    /// True when every tensor passed.
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    /// Largest relative error across all tensors.
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Central-difference check of `analytic` against `loss_fn`.
///
/// For each tensor, up to `coords_per_tensor` coordinates are sampled
/// without replacement; each is perturbed by `±epsilon` and the two-sided
/// slope is compared to the analytic entry.  The relative error uses a
/// denominator floored at `1e-4` so near-zero gradients are judged on an
/// absolute scale.  `params` is restored exactly after every probe.
pub fn grad_check<F: FnMut(&ModelParams) -> f64>(
    params: &mut ModelParams,
    analytic: &ModelParams,
    mut loss_fn: F,
    coords_per_tensor: usize,
    epsilon: f64,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut entries = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = params.tensors()[ti].1.len();
        let take = coords_per_tensor.min(len);
        let mut coords = index::sample(rng, len, take).into_vec();
        coords.sort_unstable();
        let mut max_rel = 0.0f64;
        for &ci in &coords {
            let a = analytic.tensors()[ti]
                .1
                .as_slice()
                .expect("gradient tensors are contiguous")[ci];
            let original = {
                let mut ts = params.tensors_mut();
                let slice = ts[ti].1.as_slice_mut().expect("parameter tensors are contiguous");
                let orig = slice[ci];
                slice[ci] = orig + epsilon;
                orig
            };
            let loss_plus = loss_fn(params);
            {
                let mut ts = params.tensors_mut();
                ts[ti].1.as_slice_mut().unwrap()[ci] = original - epsilon;
            }
            let loss_minus = loss_fn(params);
            {
                let mut ts = params.tensors_mut();
                ts[ti].1.as_slice_mut().unwrap()[ci] = original;
            }
            let fd = (loss_plus - loss_minus) / (2.0 * epsilon);
            let rel = (fd - a).abs() / f64::max(1e-4, f64::max(fd.abs(), a.abs()));
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            tensor: name.clone(),
            max_rel_err: max_rel,
            checked: coords.len(),
            pass: max_rel <= tolerance,
        });
    }
    GradCheckReport { entries, tolerance }
}

//! Central finite-difference check of the analytic gradient of the total loss.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Image, ImageStore};
use crate::error::Result;
use crate::losses::{total_loss, total_loss_with_grad, AnchorLabels, LossWeights, TripletOutputs};
use ndarray::{Array2, ArrayView2};

use crate::model::{forward_batch, forward_batch_with_gate, ModelParams};
use crate::sampler::TripletSampler;
use crate::trainer::{batch_images, stream_rng, TrainConfig, STREAM_INIT, STREAM_SAMPLER};

/// Above this many scalars only a random subsample is checked.
pub const FULL_CHECK_LIMIT: usize = 5_000;
pub const SUBSAMPLE_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor holding the worst coordinate.
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest |analytic - numeric| over the checked coordinates.
    pub max_abs_err: f64,
    pub checked: usize,
}

/// A fixed triplet batch in double precision.
pub struct GradCheckProblem<'a> {
    pub params: ModelParams<f64>,
    /// 3N images: anchors, same-view partners, same-action partners.
    pub images: Vec<&'a Image>,
    pub labels: AnchorLabels,
    pub weights: LossWeights,
    pub stop_gradient_pv: bool,
}

impl GradCheckProblem<'_> {
    /// View probabilities the gate sees at `params`, when they are to be held fixed.
    fn frozen_gate(&self) -> Result<Option<Array2<f64>>> {
        if !self.stop_gradient_pv {
            return Ok(None);
        }
        Ok(Some(forward_batch(&self.params, &self.images, true)?.p_v))
    }

    /// Total loss at `params`. With `gate_pv`, the gate ignores the live view
    /// probabilities, which is the function a stop-gradient backward pass
    /// differentiates.
    pub fn loss_at(
        &self,
        params: &ModelParams<f64>,
        gate_pv: Option<ArrayView2<'_, f64>>,
    ) -> Result<f64> {
        let trace = forward_batch_with_gate(params, &self.images, self.stop_gradient_pv, gate_pv)?;
        let out = TripletOutputs::from_trace(&trace)?;
        Ok(total_loss(&out, &self.labels, &self.weights)?.total)
    }

    pub fn analytic(&self) -> Result<ModelParams<f64>> {
        let trace = forward_batch(&self.params, &self.images, self.stop_gradient_pv)?;
        let (_, up) = total_loss_with_grad(&trace, &self.labels, &self.weights)?;
        Ok(trace.backward(&self.params, &up))
    }
}

/// Compare `analytic` against `(L(θ+ε) − L(θ−ε)) / 2ε` coordinate by coordinate.
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn compare_gradients<R: Rng + ?Sized>(
    problem: &GradCheckProblem<'_>,
    analytic: &ModelParams<f64>,
    epsilon: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let total = problem.params.num_scalars();
    let mut coords: Vec<usize> = if total > FULL_CHECK_LIMIT {
        index::sample(rng, total, SUBSAMPLE_SIZE).into_vec()
    } else {
        (0..total).collect()
    };
    coords.sort_unstable();

    // Map flat coordinates to (tensor, offset).
    let mut bounds = Vec::new();
    let mut start = 0;
    for t in problem.params.tensors() {
        bounds.push((start, start + t.data.len()));
        start += t.data.len();
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        max_abs_err: 0.0,
        checked: coords.len(),
    };
    let frozen = problem.frozen_gate()?;
    let gate = frozen.as_ref().map(|g| g.view());
    let mut probe = problem.params.clone();
    for flat in coords {
        let ti = bounds
            .iter()
            .position(|&(lo, hi)| flat >= lo && flat < hi)
            .expect("coordinate in range");
        let off = flat - bounds[ti].0;
        let orig = probe.tensors()[ti].data[off];

        probe.tensors_mut()[ti].data[off] = orig + epsilon;
        let plus = problem.loss_at(&probe, gate)?;
        probe.tensors_mut()[ti].data[off] = orig - epsilon;
        let minus = problem.loss_at(&probe, gate)?;
        probe.tensors_mut()[ti].data[off] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let exact = analytic.tensors()[ti].data[off];
        let abs = (exact - numeric).abs();
        let rel = abs / exact.abs().max(numeric.abs()).max(1e-8);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst_parameter.is_empty() {
            report.max_rel_err = rel;
            report.worst_parameter = problem.params.tensors()[ti].name.clone();
            report.worst_index = off;
            report.analytic = exact;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

pub fn gradient_check<R: Rng + ?Sized>(
    problem: &GradCheckProblem<'_>,
    epsilon: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let analytic = problem.analytic()?;
    compare_gradients(problem, &analytic, epsilon, rng)
}

/// The batch and double-precision parameters a training run with `config`
/// would start from, without augmentation.
pub struct GradCheckSetup {
    pub images: Vec<Image>,
    pub labels: AnchorLabels,
    pub params: ModelParams<f64>,
}

impl GradCheckSetup {
    pub fn new(
        config: &TrainConfig,
        manifest: &DatasetManifest,
        store: &ImageStore,
    ) -> Result<Self> {
        config.validate()?;
        let ls = &manifest.label_space;
        let params = ModelParams::<f64>::init(
            config.model_dims(ls.num_actions(), ls.num_views()),
            config.gate.query_init(),
            &mut stream_rng(config.seed, STREAM_INIT),
        )?;
        let sampler = TripletSampler::new(manifest)?.balance_actions(config.balance_actions);
        let batch = sampler.batch(
            config.batch_size,
            &mut stream_rng(config.seed, STREAM_SAMPLER),
        )?;
        let plain = TrainConfig {
            augment: false,
            ..config.clone()
        };
        let (images, labels) = batch_images(
            &batch,
            store,
            &plain,
            &mut stream_rng(config.seed, STREAM_SAMPLER),
        )?;
        Ok(Self {
            images,
            labels,
            params,
        })
    }

    pub fn problem(&self, weights: LossWeights, stop_gradient_pv: bool) -> GradCheckProblem<'_> {
        GradCheckProblem {
            params: self.params.clone(),
            images: self.images.iter().collect(),
            labels: self.labels.clone(),
            weights,
            stop_gradient_pv,
        }
    }
}

//! Momentum-SGD training over triplet batches with best-epoch selection.

mod checkpoint;
mod config;
mod gradcheck;
mod sgd;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, DatasetManifest, Image, ImageStore};
use crate::error::{Error, Result};
use crate::evaluator::predict_logits;
use crate::evaluator::topk_accuracy;
use crate::losses::{total_loss_with_grad, AnchorLabels, LossBreakdown};
use crate::model::{forward_batch, ModelParams};
use crate::sampler::{TripletBatch, TripletSampler};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{GateMode, TrainConfig};
pub use gradcheck::{
    compare_gradients, gradient_check, GradCheckProblem, GradCheckReport, GradCheckSetup,
    FULL_CHECK_LIMIT, SUBSAMPLE_SIZE,
};
pub use sgd::{sgd_update, SgdStep};

/// Independent RNG streams derived from the run seed.
pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_SAMPLER: u64 = 1;
pub(crate) const STREAM_AUGMENT: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub l_ace: f64,
    pub l_vce: f64,
    pub l_ac: f64,
    pub l_vc: f64,
    pub total: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    /// Seconds since training started; the only field that varies between reruns.
    pub wall_time_s: f64,
}

impl EpochMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.lr,
            self.l_ace,
            self.l_vce,
            self.l_ac,
            self.l_vc,
            self.total,
            self.val_top1,
            self.val_top5,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

pub fn write_metrics_log(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut file, m)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation top-1 (earliest on ties).
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Resolve a triplet batch into its 3N images (anchors, same-view, same-action)
/// and the anchor labels, augmenting each image independently when enabled.
pub(crate) fn batch_images(
    batch: &TripletBatch,
    store: &ImageStore,
    config: &TrainConfig,
    aug_rng: &mut ChaCha8Rng,
) -> Result<(Vec<Image>, AnchorLabels)> {
    let n = batch.triplets.len();
    let mut images = Vec::with_capacity(3 * n);
    let members = [
        |t: &crate::sampler::Triplet| t.anchor.source_id.clone(),
        |t: &crate::sampler::Triplet| t.same_view.source_id.clone(),
        |t: &crate::sampler::Triplet| t.same_action.source_id.clone(),
    ];
    for member in members {
        for t in &batch.triplets {
            let img = store.get(&member(t))?;
            images.push(if config.augment {
                augment(img, &config.augmentation, aug_rng)
            } else {
                img.clone()
            });
        }
    }
    let labels = AnchorLabels {
        actions: batch.triplets.iter().map(|t| t.anchor.action_id).collect(),
        views: batch.triplets.iter().map(|t| t.anchor.view_id).collect(),
    };
    Ok((images, labels))
}

/// Validation top-1 and top-5 (top-k capped at the number of actions).
pub(crate) fn validation_scores(
    params: &ModelParams<f32>,
    manifest: &DatasetManifest,
    store: &ImageStore,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let logits = predict_logits(params, manifest, store, batch_size)?;
    let labels: Vec<usize> = manifest.entries.iter().map(|e| e.action_id).collect();
    let k5 = 5.min(params.dims().num_actions);
    Ok((
        topk_accuracy(logits.view(), &labels, 1)?,
        topk_accuracy(logits.view(), &labels, k5)?,
    ))
}

/// Train on `train`, select the epoch with the best top-1 on `val`.
pub fn train(
    config: &TrainConfig,
    train: &DatasetManifest,
    val: &DatasetManifest,
    store: &ImageStore,
) -> Result<TrainOutcome> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::EmptyEval);
    }
    if train.label_space != val.label_space {
        return Err(Error::LabelSpace(
            "train and validation manifests use different label spaces".into(),
        ));
    }
    let sampler = TripletSampler::new(train)?.balance_actions(config.balance_actions);
    let label_space = train.label_space.clone();
    let dims = config.model_dims(label_space.num_actions(), label_space.num_views());

    let mut params = ModelParams::<f32>::init(
        dims,
        config.gate.query_init(),
        &mut stream_rng(config.seed, STREAM_INIT),
    )?;
    let mut velocity = params.zeros_like();
    let mut sampler_rng = stream_rng(config.seed, STREAM_SAMPLER);
    let mut aug_rng = stream_rng(config.seed, STREAM_AUGMENT);
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(config.batch_size));

    let started = Instant::now();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;
    let mut global_step = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let step = SgdStep {
            lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            freeze_queries: config.gate == GateMode::Identity,
        };
        let mut sums = LossBreakdown::default();
        for _ in 0..steps {
            let batch = sampler.batch(config.batch_size, &mut sampler_rng)?;
            let (images, labels) = batch_images(&batch, store, config, &mut aug_rng)?;
            let refs: Vec<&Image> = images.iter().collect();
            let trace = forward_batch(&params, &refs, config.stop_gradient_pv)?;
            let (loss, up) = total_loss_with_grad(&trace, &labels, &config.loss_weights)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    step: global_step,
                    loss: loss.total,
                });
            }
            let grads = trace.backward(&params, &up);
            sgd_update(&mut params, &mut velocity, &grads, &step);
            sums.l_ace += loss.l_ace;
            sums.l_vce += loss.l_vce;
            sums.l_ac += loss.l_ac;
            sums.l_vc += loss.l_vc;
            sums.total += loss.total;
            global_step += 1;
        }
        if !params.is_finite() {
            return Err(Error::Diverged {
                step: global_step,
                loss: f64::NAN,
            });
        }

        let (val_top1, val_top5) = validation_scores(&params, val, store, config.eval_batch_size)?;
        let n = steps as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            l_ace: sums.l_ace / n,
            l_vce: sums.l_vce / n,
            l_ac: sums.l_ac / n,
            l_vc: sums.l_vc / n,
            total: sums.total / n,
            val_top1,
            val_top5,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} lr {lr:.5} loss {:.4} (ace {:.4} vce {:.4} ac {:.4} vc {:.4}) val top1 {val_top1:.2}",
            m.total,
            m.l_ace,
            m.l_vce,
            m.l_ac,
            m.l_vc
        );
        metrics.push(m);
        if best.as_ref().is_none_or(|(_, top1, _)| val_top1 > *top1) {
            best = Some((epoch, val_top1, params.clone()));
        }
    }

    let (epoch, val_top1, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            label_space,
            config: config.clone(),
            params,
            epoch,
            val_top1,
        },
        metrics,
    })
}

/// An untrained checkpoint (epoch 0, no validation score) for probing and tests.
pub fn initial_checkpoint(
    config: &TrainConfig,
    label_space: &crate::dataset::LabelSpace,
) -> Result<Checkpoint> {
    config.validate()?;
    let dims = config.model_dims(label_space.num_actions(), label_space.num_views());
    let params = ModelParams::<f32>::init(
        dims,
        config.gate.query_init(),
        &mut stream_rng(config.seed, STREAM_INIT),
    )?;
    Ok(Checkpoint {
        label_space: label_space.clone(),
        config: config.clone(),
        params,
        epoch: 0,
        val_top1: 0.0,
    })
}

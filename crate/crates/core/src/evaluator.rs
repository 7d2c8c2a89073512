//! Top-k accuracy, confusion matrices, leave-one-camera-out rounds and
//! cross-dataset inference.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{split_loco, DatasetManifest, Image, ImageStore};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelParams, Scalar};
use crate::trainer::{save_checkpoint, train, write_metrics_log, Checkpoint, TrainConfig};

/// Action logits for every manifest entry, in manifest order. Images whose size
/// differs from the model input are resized; nothing is augmented.
pub fn predict_logits(
    params: &ModelParams<f32>,
    manifest: &DatasetManifest,
    store: &ImageStore,
    batch_size: usize,
) -> Result<Array2<f32>> {
    if manifest.is_empty() {
        return Err(Error::EmptyEval);
    }
    let size = params.dims().input_size;
    let num_actions = params.dims().num_actions;
    let mut logits = Array2::zeros((manifest.len(), num_actions));
    for (chunk_index, chunk) in manifest.entries.chunks(batch_size.max(1)).enumerate() {
        let images = chunk
            .iter()
            .map(|e| {
                let img = store.get(&e.source_id)?;
                Ok(if img.height() == size && img.width() == size {
                    Cow::Borrowed(img)
                } else {
                    Cow::Owned(img.resized(size))
                })
            })
            .collect::<Result<Vec<Cow<'_, Image>>>>()?;
        let refs: Vec<&Image> = images.iter().map(|c| c.as_ref()).collect();
        let trace = forward_batch(params, &refs, false)?;
        let start = chunk_index * batch_size.max(1);
        logits
            .slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&trace.z_a);
    }
    Ok(logits)
}

/// Zero-based rank of `label` in `row`: the number of classes scoring higher,
/// counting equal scores at lower indices as higher.
fn rank_of<T: Scalar>(row: ArrayView1<'_, T>, label: usize) -> usize {
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > target || (x == target && j < label))
        .count()
}

/// Highest-scoring class; ties go to the lower index.
pub fn argmax<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

fn check_batch<T>(logits: &ArrayView2<'_, T>, labels: &[usize]) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(Error::EmptyEval);
    }
    if logits.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let classes = logits.ncols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

/// Percentage of rows whose true label is among the `k` largest logits.
pub fn topk_accuracy<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    check_batch(&logits, labels)?;
    if k == 0 || k > logits.ncols() {
        return Err(Error::config(format!(
            "k = {k} must lie in 1..={}",
            logits.ncols()
        )));
    }
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| rank_of(*row, label) < k)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// `A x A` counts; entry `(r, c)` is the number of samples of class `r`
/// predicted as `c`.
pub fn confusion_matrix(
    predictions: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<Array2<u64>> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&p, &t) in predictions.iter().zip(truth) {
        for label in [p, t] {
            if label >= num_classes {
                return Err(Error::Label {
                    label,
                    classes: num_classes,
                });
            }
        }
        m[[t, p]] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Only classes that some foreign class maps to compete.
    Restricted,
    /// Every checkpoint class competes.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    /// k actually used for the second score (5, or fewer when fewer classes compete).
    pub top5_k: usize,
    /// Rows are ground truth, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub n_samples: usize,
    /// `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    /// Samples excluded because their class maps to DROP.
    pub dropped: usize,
    pub ranking: Option<Ranking>,
}

impl EvalReport {
    /// Build a report from logits whose columns are all eligible classes.
    pub fn from_logits<T: Scalar>(
        logits: ArrayView2<'_, T>,
        labels: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self> {
        let eligible = logits.ncols();
        Self::build(logits, labels, class_names, eligible)
    }

    fn build<T: Scalar>(
        logits: ArrayView2<'_, T>,
        labels: &[usize],
        class_names: Vec<String>,
        eligible: usize,
    ) -> Result<Self> {
        check_batch(&logits, labels)?;
        if class_names.len() != logits.ncols() {
            return Err(Error::shape(format!(
                "{} class names for {} logit columns",
                class_names.len(),
                logits.ncols()
            )));
        }
        let k5 = 5.min(eligible);
        let top1 = topk_accuracy(logits, labels, 1)?;
        let top5 = topk_accuracy(logits, labels, k5)?;
        let predictions: Vec<usize> = logits.rows().into_iter().map(argmax).collect();
        let confusion = confusion_matrix(&predictions, labels, logits.ncols())?;
        let per_class_accuracy = confusion
            .rows()
            .into_iter()
            .enumerate()
            .map(|(r, row)| {
                let total: u64 = row.sum();
                (total > 0).then(|| 100.0 * row[r] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            top1,
            top5,
            top5_k: k5,
            confusion: confusion.rows().into_iter().map(|r| r.to_vec()).collect(),
            n_samples: labels.len(),
            per_class_accuracy,
            class_names,
            dropped: 0,
            ranking: None,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    /// Row-major CSV with a header row of class names; the first column holds
    /// the ground-truth class name.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("truth");
        for name in &self.class_names {
            out.push(',');
            out.push_str(&csv_field(name));
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(&csv_field(name));
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub(crate) fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// Score a checkpoint on a manifest that shares its action classes.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    store: &ImageStore,
) -> Result<EvalReport> {
    let ours = checkpoint.label_space.actions();
    let theirs = manifest.label_space.actions();
    if ours.len() != theirs.len() {
        return Err(Error::LabelSpace(format!(
            "checkpoint has {} action classes, dataset has {}; supply a label map",
            ours.len(),
            theirs.len()
        )));
    }
    if ours != theirs {
        log::warn!("action names differ between checkpoint and dataset; matching by index");
    }
    let logits = predict_logits(
        &checkpoint.params,
        manifest,
        store,
        checkpoint.config.eval_batch_size,
    )?;
    let labels: Vec<usize> = manifest.entries.iter().map(|e| e.action_id).collect();
    EvalReport::from_logits(logits.view(), &labels, ours.to_vec())
}

/// Maps each foreign action class to a checkpoint action class, or drops it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    targets: Vec<Option<usize>>,
    num_targets: usize,
}

/// On-disk form: foreign class name to checkpoint class name or `"DROP"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelMapFile {
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub authoritative: bool,
    pub map: BTreeMap<String, String>,
}

pub const DROP: &str = "DROP";

impl LabelMap {
    pub fn new(targets: Vec<Option<usize>>, num_targets: usize) -> Result<Self> {
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= num_targets) {
            return Err(Error::LabelMap(format!(
                "target {t} outside the {num_targets} checkpoint classes"
            )));
        }
        if targets.iter().all(Option::is_none) {
            return Err(Error::LabelMap("every class is dropped".into()));
        }
        Ok(Self {
            targets,
            num_targets,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            targets: (0..n).map(Some).collect(),
            num_targets: n,
        }
    }

    /// Resolve a name-based map. Every foreign class must appear.
    pub fn from_names(
        file: &LabelMapFile,
        foreign: &[String],
        checkpoint: &[String],
    ) -> Result<Self> {
        if let Some(unknown) = file.map.keys().find(|k| !foreign.contains(k)) {
            log::warn!("label map entry {unknown:?} matches no dataset class");
        }
        let targets = foreign
            .iter()
            .map(|name| {
                let target = file
                    .map
                    .get(name)
                    .ok_or_else(|| Error::LabelMap(format!("class {name:?} is not mapped")))?;
                if target == DROP {
                    return Ok(None);
                }
                checkpoint
                    .iter()
                    .position(|c| c == target)
                    .map(Some)
                    .ok_or_else(|| {
                        Error::LabelMap(format!("target {target:?} is not a checkpoint class"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(targets, checkpoint.len())
    }

    pub fn load(path: &Path, foreign: &[String], checkpoint: &[String]) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let file: LabelMapFile = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::LabelMap(format!("{}: {e}", path.display())))?;
        Self::from_names(&file, foreign, checkpoint)
    }

    pub fn num_sources(&self) -> usize {
        self.targets.len()
    }

    pub fn target(&self, source: usize) -> Result<Option<usize>> {
        self.targets
            .get(source)
            .copied()
            .ok_or_else(|| Error::LabelMap(format!("class {source} is not mapped")))
    }

    /// Checkpoint classes reached by at least one foreign class.
    pub fn reachable(&self) -> Vec<bool> {
        let mut out = vec![false; self.num_targets];
        for t in self.targets.iter().flatten() {
            out[*t] = true;
        }
        out
    }
}

/// Score a checkpoint on a dataset with different action classes.
pub fn cross_dataset_eval(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    store: &ImageStore,
    map: &LabelMap,
    ranking: Ranking,
) -> Result<EvalReport> {
    let classes = checkpoint.label_space.num_actions();
    if map.num_targets != classes {
        return Err(Error::LabelMap(format!(
            "map targets {} classes, checkpoint has {classes}",
            map.num_targets
        )));
    }
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for entry in &manifest.entries {
        match map.target(entry.action_id)? {
            Some(t) => {
                kept.push(entry.clone());
                labels.push(t);
            }
            None => dropped += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyEval);
    }
    let subset = manifest.subset(kept);
    let mut logits = predict_logits(
        &checkpoint.params,
        &subset,
        store,
        checkpoint.config.eval_batch_size,
    )?;
    let eligible = match ranking {
        Ranking::Full => classes,
        Ranking::Restricted => {
            let reachable = map.reachable();
            for mut row in logits.rows_mut() {
                for (x, &ok) in row.iter_mut().zip(&reachable) {
                    if !ok {
                        *x = f32::NEG_INFINITY;
                    }
                }
            }
            reachable.iter().filter(|&&r| r).count()
        }
    };
    let mut report = EvalReport::build(
        logits.view(),
        &labels,
        checkpoint.label_space.actions().to_vec(),
        eligible,
    )?;
    report.dropped = dropped;
    report.ranking = Some(ranking);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub test_view: usize,
    pub view_name: String,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocoReport {
    /// One fold per view, in label-space order.
    pub folds: Vec<FoldReport>,
    pub mean_top1: f64,
    pub mean_top5: f64,
}

impl LocoReport {
    pub fn from_folds(folds: Vec<FoldReport>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_top1 = folds.iter().map(|f| f.report.top1).sum::<f64>() / n;
        let mean_top5 = folds.iter().map(|f| f.report.top5).sum::<f64>() / n;
        Self {
            folds,
            mean_top1,
            mean_top5,
        }
    }

    pub fn fold(&self, view_name: &str) -> Option<&FoldReport> {
        self.folds.iter().find(|f| f.view_name == view_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocoOptions {
    pub val_fraction: f64,
    /// Seed of the train/validation split; training uses the config seed.
    pub split_seed: u64,
}

impl Default for LocoOptions {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            split_seed: 0,
        }
    }
}

pub fn fold_dir_name(view_name: &str) -> String {
    format!("fold_{view_name}")
}

/// Train and test one leave-one-camera-out fold. Artifacts go to `fold_dir` when given.
pub fn run_fold(
    manifest: &DatasetManifest,
    store: &ImageStore,
    config: &TrainConfig,
    options: &LocoOptions,
    test_view: usize,
    fold_dir: Option<&Path>,
) -> Result<FoldReport> {
    let split = split_loco(
        manifest,
        test_view,
        options.val_fraction,
        options.split_seed,
    )?;
    let outcome = train(config, &split.train, &split.val, store)?;
    let report = evaluate(&outcome.checkpoint, &split.test, store)?;
    if let Some(dir) = fold_dir {
        save_checkpoint(&outcome.checkpoint, &dir.join("checkpoint.bin"))?;
        write_metrics_log(&outcome.metrics, &dir.join("metrics.log"))?;
        report.write_json(&dir.join("report.json"))?;
        report.write_confusion_csv(&dir.join("confusion.csv"))?;
    }
    Ok(FoldReport {
        test_view,
        view_name: manifest.label_space.views()[test_view].clone(),
        best_epoch: outcome.checkpoint.epoch,
        best_val_top1: outcome.checkpoint.val_top1,
        report,
    })
}

/// Hold out each view in turn. With `run_dir`, writes
/// `fold_<view>/{checkpoint.bin, metrics.log, report.json, confusion.csv}` and
/// `summary.json`.
pub fn run_loco(
    manifest: &DatasetManifest,
    store: &ImageStore,
    config: &TrainConfig,
    options: &LocoOptions,
    run_dir: Option<&Path>,
) -> Result<LocoReport> {
    let views = manifest.label_space.views();
    let mut folds = Vec::with_capacity(views.len());
    for (v, name) in views.iter().enumerate() {
        log::info!("fold {}/{}: holding out view {name}", v + 1, views.len());
        let dir = run_dir.map(|d| d.join(fold_dir_name(name)));
        folds.push(run_fold(
            manifest,
            store,
            config,
            options,
            v,
            dir.as_deref(),
        )?);
    }
    let report = LocoReport::from_folds(folds);
    if let Some(dir) = run_dir {
        write_json(&report, &dir.join("summary.json"))?;
    }
    Ok(report)
}

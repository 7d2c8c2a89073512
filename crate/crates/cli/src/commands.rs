use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use dbmnet::config::DataSource;
use dbmnet::dataset::{
    export_directory, load_images, load_manifest, split_loco, synth_generate, LocoSplit,
};
use dbmnet::evaluator::{cross_dataset_eval, evaluate, run_loco, LabelMap, LocoOptions, Ranking};
use dbmnet::probe::{export_embeddings, extract_features, probe_view_drop, Stage};
use dbmnet::trainer::{
    gradient_check, load_checkpoint, save_checkpoint, train as train_model, write_metrics_log,
    GradCheckReport, GradCheckSetup, FORMAT_VERSION,
};
use dbmnet::{DatasetManifest, Error, ImageStore, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::failure::{Failure, NUMERIC};
use crate::ConfigArgs;

type CmdResult = Result<(), Failure>;

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

fn resolve(args: &ConfigArgs, default_preset: &str) -> Result<RunConfig, Failure> {
    let mut overrides = Vec::new();
    if let Some(p) = &args.preset {
        overrides.push(format!("preset={p:?}"));
    }
    overrides.extend(args.overrides.iter().cloned());
    Ok(match &args.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::from_preset(
            args.preset.as_deref().unwrap_or(default_preset),
            &args.overrides,
        )?,
    })
}

/// Record of what produced a directory's contents.
#[derive(Serialize)]
struct Inputs {
    command: String,
    dbmnet_version: &'static str,
    checkpoint_format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    paths: BTreeMap<String, String>,
}

impl Inputs {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            dbmnet_version: env!("CARGO_PKG_VERSION"),
            checkpoint_format_version: FORMAT_VERSION,
            config_sha256: None,
            seed: None,
            paths: BTreeMap::new(),
        }
    }

    fn with_config(mut self, config: &RunConfig) -> Result<Self, Failure> {
        let text = config.to_toml_string()?;
        self.config_sha256 = Some(format!("{:x}", Sha256::digest(text.as_bytes())));
        self.seed = Some(config.train.seed);
        Ok(self)
    }

    fn path(mut self, key: &str, path: &Path) -> Self {
        self.paths
            .insert(key.to_owned(), path.display().to_string());
        self
    }

    fn write(&self, dir: &Path) -> CmdResult {
        std::fs::create_dir_all(dir)?;
        let mut bytes = serde_json::to_vec_pretty(self).map_err(Error::from)?;
        bytes.push(b'\n');
        std::fs::write(dir.join("inputs.json"), bytes)?;
        Ok(())
    }
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> CmdResult {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Echo the resolved configuration and the input record into `dir`.
fn record_run(config: &RunConfig, command: &str, dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    let mut inputs = Inputs::new(command).with_config(config)?;
    if let Some(p) = &config.data.path {
        inputs = inputs.path("data", p);
    }
    inputs.write(dir)
}

fn load_data(config: &RunConfig) -> Result<(DatasetManifest, ImageStore), Failure> {
    let size = config.train.input_size;
    match config.data.source {
        DataSource::Synthetic => {
            let (manifest, mut store) = synth_generate(&config.synth)?;
            store.resize_all(size);
            Ok((manifest, store))
        }
        DataSource::Directory => {
            let root = config.data.path.as_deref().expect("validated");
            let manifest = load_manifest(root)?;
            if manifest.skipped > 0 {
                log::warn!(
                    "skipped {} unreadable files under {}",
                    manifest.skipped,
                    root.display()
                );
            }
            let store = load_images(&manifest, size)?;
            Ok((manifest, store))
        }
    }
}

fn test_view(config: &RunConfig, manifest: &DatasetManifest) -> Result<usize, Failure> {
    let ls = &manifest.label_space;
    match &config.data.test_view {
        None => Ok(ls.num_views() - 1),
        Some(name) => ls.view_index(name).ok_or_else(|| {
            Error::Config(format!(
                "data.test_view: unknown view {name:?} (available: {})",
                ls.views().join(", ")
            ))
            .into()
        }),
    }
}

fn configured_split(config: &RunConfig, manifest: &DatasetManifest) -> Result<LocoSplit, Failure> {
    let view = test_view(config, manifest)?;
    Ok(split_loco(
        manifest,
        view,
        config.data.val_fraction,
        config.data.split_seed,
    )?)
}

pub fn synth(args: &ConfigArgs, out: &Path) -> CmdResult {
    let config = resolve(args, "desk")?;
    let (manifest, store) = synth_generate(&config.synth)?;
    let written = export_directory(&manifest, &store, out)?;
    let mut inputs = Inputs::new("synth").with_config(&config)?;
    inputs.seed = Some(config.synth.seed);
    inputs.write(out)?;
    std::fs::write(out.join("config.toml"), config.to_toml_string()?)?;
    println!("wrote {written} images to {}", out.display());
    Ok(())
}

pub fn train(args: &ConfigArgs) -> CmdResult {
    let config = resolve(args, "desk")?;
    let (manifest, store) = load_data(&config)?;
    let split = configured_split(&config, &manifest)?;
    let dir = config.run_dir();
    record_run(&config, "train", &dir)?;

    let outcome = train_model(&config.train, &split.train, &split.val, &store)?;
    save_checkpoint(&outcome.checkpoint, &dir.join("checkpoint.bin"))?;
    write_metrics_log(&outcome.metrics, &dir.join("metrics.log"))?;
    let report = evaluate(&outcome.checkpoint, &split.test, &store)?;
    report.write_json(&dir.join("report.json"))?;
    report.write_confusion_csv(&dir.join("confusion.csv"))?;
    println!(
        "best epoch {} (val top1 {:.2}); held-out view {}: top1 {:.2} top{} {:.2} -> {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_top1,
        manifest.label_space.views()[split.test_view],
        report.top1,
        report.top5_k,
        report.top5,
        dir.display()
    );
    Ok(())
}

pub fn eval(
    checkpoint_path: &Path,
    data: &Path,
    view: Option<&str>,
    label_map: Option<&Path>,
    ranking: Ranking,
    out: Option<&Path>,
) -> CmdResult {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let mut manifest = load_manifest(data)?;
    if let Some(name) = view {
        let v = manifest
            .label_space
            .view_index(name)
            .ok_or_else(|| Error::LabelSpace(format!("dataset has no view {name:?}")))?;
        manifest = manifest.filter_view(v);
    }
    let store = load_images(&manifest, checkpoint.params.dims().input_size)?;
    let report = match label_map {
        Some(path) => {
            let map = LabelMap::load(
                path,
                manifest.label_space.actions(),
                checkpoint.label_space.actions(),
            )?;
            cross_dataset_eval(&checkpoint, &manifest, &store, &map, ranking)?
        }
        None => evaluate(&checkpoint, &manifest, &store)?,
    };
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sibling(checkpoint_path, "eval"));
    report.write_json(&dir.join("report.json"))?;
    report.write_confusion_csv(&dir.join("confusion.csv"))?;
    let mut inputs = Inputs::new("eval")
        .path("checkpoint", checkpoint_path)
        .path("data", data);
    if let Some(p) = label_map {
        inputs = inputs.path("label_map", p);
    }
    inputs.write(&dir)?;
    println!(
        "{} samples ({} dropped): top1 {:.2} top{} {:.2} -> {}",
        report.n_samples,
        report.dropped,
        report.top1,
        report.top5_k,
        report.top5,
        dir.display()
    );
    Ok(())
}

fn sibling(file: &Path, name: &str) -> PathBuf {
    file.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn loco(args: &ConfigArgs) -> CmdResult {
    let config = resolve(args, "desk")?;
    let (manifest, store) = load_data(&config)?;
    let dir = config.run_dir();
    record_run(&config, "loco", &dir)?;
    let options = LocoOptions {
        val_fraction: config.data.val_fraction,
        split_seed: config.data.split_seed,
    };
    let report = run_loco(&manifest, &store, &config.train, &options, Some(&dir))?;
    for fold in &report.folds {
        println!(
            "{}: top1 {:.2} top{} {:.2}",
            fold.view_name, fold.report.top1, fold.report.top5_k, fold.report.top5
        );
    }
    println!(
        "mean: top1 {:.2} top5 {:.2} -> {}",
        report.mean_top1,
        report.mean_top5,
        dir.display()
    );
    Ok(())
}

pub fn probe(
    checkpoint_path: &Path,
    args: &ConfigArgs,
    dirs: Option<(PathBuf, PathBuf)>,
    out: Option<&Path>,
) -> CmdResult {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let size = checkpoint.params.dims().input_size;
    let mut inputs = Inputs::new("probe").path("checkpoint", checkpoint_path);
    let (train, val, store) = match dirs {
        Some((train_dir, val_dir)) => {
            let train = load_manifest(&train_dir)?;
            let val = load_manifest(&val_dir)?;
            if train.label_space != val.label_space {
                return Err(Error::LabelSpace(
                    "training and validation directories have different labels".into(),
                )
                .into());
            }
            let mut store = load_images(&train, size)?;
            for (id, image) in load_images(&val, size)?.iter_sorted() {
                store.insert(id.clone(), image.clone());
            }
            inputs = inputs.path("train", &train_dir).path("val", &val_dir);
            (train, val, store)
        }
        None => {
            let config = resolve(args, "desk")?;
            inputs = inputs.with_config(&config)?;
            let (manifest, mut store) = load_data(&config)?;
            store.resize_all(size);
            let split = configured_split(&config, &manifest)?;
            (split.train, split.val, store)
        }
    };
    if train.label_space.num_views() != checkpoint.label_space.num_views() {
        return Err(Error::LabelSpace(format!(
            "checkpoint knows {} views, dataset has {}",
            checkpoint.label_space.num_views(),
            train.label_space.num_views()
        ))
        .into());
    }

    let result = probe_view_drop(&checkpoint, &train, &val, &store)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sibling(checkpoint_path, "probe"));
    write_json(&result, &dir.join("probe.json"))?;
    for (part, manifest) in [("train", &train), ("val", &val)] {
        for (stage, tag) in [(Stage::Pre, "pre"), (Stage::Post, "post")] {
            let features = extract_features(&checkpoint, manifest, &store, stage)?;
            export_embeddings(&features, &dir.join(format!("embeddings_{part}_{tag}.csv")))?;
        }
    }
    inputs.write(&dir)?;
    println!(
        "view accuracy before gate {:.2}, after gate {:.2}, drop {:.2} points -> {}",
        result.acc_pre,
        result.acc_post,
        result.drop,
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GradCheckRecord {
    stop_gradient_pv: bool,
    report: GradCheckReport,
}

#[derive(Serialize)]
struct GradCheckSummary {
    epsilon: f64,
    threshold: f64,
    passed: bool,
    runs: Vec<GradCheckRecord>,
}

pub fn gradcheck(args: &ConfigArgs, epsilon: f64, out: Option<&Path>) -> CmdResult {
    let config = resolve(args, "tiny")?;
    let (manifest, store) = load_data(&config)?;
    let setup = GradCheckSetup::new(&config.train, &manifest, &store)?;
    let mut runs = Vec::new();
    for stop in [false, true] {
        let problem = setup.problem(config.train.loss_weights, stop);
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let report = gradient_check(&problem, epsilon, &mut rng)?;
        println!(
            "stop_gradient_pv={stop}: max relative error {:.3e} at {}[{}] over {} parameters",
            report.max_rel_err, report.worst_parameter, report.worst_index, report.checked
        );
        runs.push(GradCheckRecord {
            stop_gradient_pv: stop,
            report,
        });
    }
    let passed = runs
        .iter()
        .all(|r| r.report.max_rel_err < GRADCHECK_THRESHOLD);
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.run_dir());
    record_run(&config, "gradcheck", &dir)?;
    write_json(
        &GradCheckSummary {
            epsilon,
            threshold: GRADCHECK_THRESHOLD,
            passed,
            runs,
        },
        &dir.join("gradcheck.json"),
    )?;
    if passed {
        Ok(())
    } else {
        Err(Failure::new(
            NUMERIC,
            "GradientMismatch",
            format!("max relative error is not below {GRADCHECK_THRESHOLD}"),
        ))
    }
}

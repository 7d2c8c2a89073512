//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! `cargo test --test acceptance -- 1 3 8` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dbmnet::dataset::{split_loco, synth_generate, LocoSplit};
use dbmnet::evaluator::{self, confusion_matrix, topk_accuracy, EvalReport};
use dbmnet::losses::{
    cross_entropy, total_loss, triplet_action, triplet_view, AnchorLabels, LossWeights,
    TripletOutputs,
};
use dbmnet::model::{action_logits, disentangle, forward, softmax, view_logits, ModelParams};
use dbmnet::probe::probe_view_drop;
use dbmnet::sampler::TripletSampler;
use dbmnet::trainer::{self, GateMode, GradCheckSetup, TrainConfig};
use dbmnet::{DatasetManifest, Image, ImageStore, ModelDims, RunConfig};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: dbmnet::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| format!("{}: {e}", e.kind()))
}

fn synthetic(
    preset: &str,
) -> std::result::Result<(RunConfig, DatasetManifest, ImageStore), String> {
    let run = lib(RunConfig::from_preset(preset, &[]))?;
    let (manifest, mut store) = lib(synth_generate(&run.synth))?;
    store.resize_all(run.train.input_size);
    Ok((run, manifest, store))
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let (run, manifest, store) = synthetic("tiny")?;
    let setup = lib(GradCheckSetup::new(&run.train, &manifest, &store))?;
    let mut parts = Vec::new();
    for stop in [false, true] {
        let problem = setup.problem(run.train.loss_weights, stop);
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        let report = lib(trainer::gradient_check(&problem, 1e-5, &mut rng))?;
        let total = problem.params.num_scalars();
        ensure(report.checked == total || report.checked >= 500, || {
            format!("only {} of {total} parameters checked", report.checked)
        })?;
        ensure(report.max_rel_err < 1e-4, || {
            format!(
                "stop_gradient_pv={stop}: max rel err {:.3e} at {}[{}]",
                report.max_rel_err, report.worst_parameter, report.worst_index
            )
        })?;
        parts.push(format!(
            "stop={stop} max_rel_err={:.2e} over {}/{total}",
            report.max_rel_err, report.checked
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} in {secs:.1} s", parts.join(", ")))
}

fn criterion_2() -> Check {
    let (run, manifest, _) = synthetic("desk")?;
    let config = TrainConfig {
        gate: GateMode::Identity,
        ..run.train.clone()
    };
    let ckpt = lib(trainer::initial_checkpoint(&config, &manifest.label_space))?;
    let size = config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let pixels = (0..3 * size * size).map(|_| rng.random::<f32>()).collect();
        let image = lib(Image::new(size, size, pixels))?;
        let out = lib(forward(&image, &ckpt.params, false))?;
        let same = out
            .f
            .iter()
            .zip(out.f_hat.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("input {i}: f_hat differs from f"))?;
    }

    let (tiny, manifest, store_tiny) = synthetic("tiny")?;
    let config = TrainConfig {
        gate: GateMode::Identity,
        ..tiny.train
    };
    let ckpt = lib(trainer::initial_checkpoint(&config, &manifest.label_space))?;
    let split = lib(split_loco(&manifest, 2, 0.2, 0))?;
    let vd = lib(probe_view_drop(
        &ckpt,
        &split.train,
        &split.val,
        &store_tiny,
    ))?;
    ensure(vd.drop == 0.0 && vd.acc_pre == vd.acc_post, || {
        format!("probe drop {} ({} -> {})", vd.drop, vd.acc_pre, vd.acc_post)
    })?;
    Ok(format!(
        "f_hat == f bitwise on 1000 inputs; untrained identity probe drop {} ({:.2} -> {:.2})",
        vd.drop, vd.acc_pre, vd.acc_post
    ))
}

/// Four-term fixture with D = 2, two actions and two views. Expected values were
/// computed once by hand (plain scalar arithmetic, no library code).
const FIXTURE_TERMS: [f64; 4] = [
    0.17639518032065848,
    1.867786029386266,
    0.23970244836467247,
    1.914213562373095,
];

fn fixture_params() -> std::result::Result<ModelParams<f64>, String> {
    let dims = ModelDims {
        input_size: 1,
        channels: vec![2],
        num_actions: 2,
        num_views: 2,
    };
    let mut p = lib(ModelParams::<f64>::zeros(dims))?;
    let mut set = |name: &str, values: &[f64]| -> std::result::Result<(), String> {
        let t = p
            .tensor_mut(name)
            .ok_or_else(|| format!("no tensor {name}"))?;
        ensure(t.data.len() == values.len(), || format!("{name} size"))?;
        t.data.iter_mut().zip(values).for_each(|(d, v)| *d = *v);
        Ok(())
    };
    set("view_head.weight", &[0.5, -0.5, 0.25, 0.0])?;
    set("view_head.bias", &[0.1, -0.1])?;
    set("queries", &[1.0, 0.5, 0.2, 1.5])?;
    set("action_head.weight", &[1.0, -1.0, 0.5, 0.5])?;
    set("action_head.bias", &[0.0, 0.2])?;
    Ok(p)
}

fn criterion_3() -> Check {
    let same = array![[0.3f64, -1.2, 4.0], [2.0, 0.5, -0.1]];
    let ta = lib(triplet_action(same.view(), same.view(), same.view(), 1.0))?;
    let tv = lib(triplet_view(same.view(), same.view(), same.view(), 1.0))?;
    ensure(ta == 1.0 && tv == 1.0, || {
        format!("equal embeddings gave {ta}, {tv}")
    })?;

    let a = array![[0.0f64, 0.0]];
    let far = array![[3.0f64, 4.0]];
    let sat_a = lib(triplet_action(a.view(), a.view(), far.view(), 1.0))?;
    let two = array![[2.0f64, 0.0]];
    let sat_v = lib(triplet_view(a.view(), a.view(), two.view(), 1.0))?;
    ensure(sat_a == 0.0 && sat_v == 0.0, || {
        format!("satisfied margins gave {sat_a}, {sat_v}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_ce = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..12);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-20.0..20.0)).collect();
        let y = rng.random_range(0..k);
        let naive = -(z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
        let got = lib(cross_entropy(Array1::from(z).view(), y))?;
        worst_ce = worst_ce.max((got - naive).abs());
    }
    ensure(worst_ce < 1e-10, || {
        format!("cross-entropy off by {worst_ce:e}")
    })?;
    let ln2 = lib(cross_entropy(array![0.0f64, 0.0].view(), 0))?;
    ensure((ln2 - std::f64::consts::LN_2).abs() < 1e-12, || {
        format!("uniform CE {ln2}")
    })?;

    let params = fixture_params()?;
    let f = array![[1.0, 2.0], [0.0, 1.0], [1.0, 1.5]];
    let mut f_hat = Array2::<f64>::zeros((3, 2));
    let mut z_a = Array2::<f64>::zeros((3, 2));
    let mut z_v = Array2::<f64>::zeros((3, 2));
    for i in 0..3 {
        let zv = lib(view_logits(f.row(i), &params))?;
        let fh = lib(disentangle(
            f.row(i),
            softmax(zv.view()).view(),
            params.queries(),
        ))?;
        z_a.row_mut(i)
            .assign(&lib(action_logits(fh.view(), &params))?);
        f_hat.row_mut(i).assign(&fh);
        z_v.row_mut(i).assign(&zv);
    }
    let r = |m: &Array2<f64>, i: usize| m.slice(ndarray::s![i..i + 1, ..]).to_owned();
    let (f0, f1, f2) = (r(&f, 0), r(&f, 1), r(&f, 2));
    let (h0, h1, h2) = (r(&f_hat, 0), r(&f_hat, 1), r(&f_hat, 2));
    let (za, zv) = (r(&z_a, 0), r(&z_v, 0));
    let out = TripletOutputs {
        f: [f0.view(), f1.view(), f2.view()],
        f_hat: [h0.view(), h1.view(), h2.view()],
        anchor_z_a: za.view(),
        anchor_z_v: zv.view(),
    };
    let labels = AnchorLabels {
        actions: vec![0],
        views: vec![1],
    };
    let b = lib(total_loss(&out, &labels, &LossWeights::default()))?;
    let got = [b.l_ace, b.l_vce, b.l_ac, b.l_vc];
    let expected_total: f64 = FIXTURE_TERMS.iter().sum();
    let worst = got
        .iter()
        .zip(FIXTURE_TERMS)
        .map(|(g, e)| (g - e).abs())
        .fold((b.total - expected_total).abs(), f64::max);
    ensure(worst < 1e-9, || {
        format!("fixture terms {got:?} total {} off by {worst:e}", b.total)
    })?;
    Ok(format!(
        "hinges exact, CE max err {worst_ce:.1e}, fixture total {:.12} (err {worst:.1e})",
        b.total
    ))
}

fn criterion_4() -> Check {
    let (_, grid, _) = synthetic("desk")?;
    let sampler = lib(TripletSampler::new(&grid))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = lib(sampler.batch(10_000, &mut rng))?;
    let mut violations = 0;
    for t in &batch.triplets {
        let member = |e: &dbmnet::Entry| grid.entries.iter().any(|g| g == e);
        let ok = member(&t.anchor)
            && member(&t.same_view)
            && member(&t.same_action)
            && t.same_view.view_id == t.anchor.view_id
            && t.same_view.action_id != t.anchor.action_id
            && t.same_action.action_id == t.anchor.action_id
            && t.same_action.view_id != t.anchor.view_id;
        violations += usize::from(!ok);
    }
    ensure(batch.triplets.len() == 10_000 && violations == 0, || {
        format!(
            "{violations} violations in {} triplets",
            batch.triplets.len()
        )
    })?;

    let small = RunConfig::from_preset("tiny", &["synth.per_cell=4".into()]);
    let (small, _) = lib(small.and_then(|r| synth_generate(&r.synth)))?;
    ensure(small.len() == 48, || {
        format!("manifest has {} entries", small.len())
    })?;
    let sampler = lib(TripletSampler::new(&small))?;
    let draws = 100_000usize;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for _ in 0..draws {
        let t = sampler.sample(&mut rng);
        let id = small
            .entries
            .iter()
            .find(|e| **e == t.anchor)
            .map(|e| e.source_id.as_str())
            .ok_or("anchor outside the manifest")?;
        *counts.entry(id).or_default() += 1;
    }
    let p = 1.0 / 48.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst = small
        .entries
        .iter()
        .map(|e| (*counts.get(e.source_id.as_str()).unwrap_or(&0) as f64 - mean).abs() / sigma)
        .fold(0.0, f64::max);
    ensure(worst <= 5.0, || {
        format!("anchor frequency {worst:.2} sigma from uniform")
    })?;
    Ok(format!(
        "0 violations in 10000 triplets; anchor counts within {worst:.2} sigma on 48 entries"
    ))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dbmnet")
}

fn run_cli(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "dbmnet {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    })
}

fn strip_wall_time(text: &str) -> std::result::Result<String, String> {
    let mut out = String::new();
    for line in text.lines() {
        let mut v: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(line).map_err(|e| e.to_string())?;
        v.remove("wall_time_s");
        out.push_str(&serde_json::to_string(&v).map_err(|e| e.to_string())?);
        out.push('\n');
    }
    Ok(out)
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Every file identical, except that metrics logs are compared without wall time.
fn same_tree(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let (fa, fb) = (files(a), files(b));
    ensure(fa == fb, || format!("file lists differ: {fa:?} vs {fb:?}"))?;
    for rel in &fa {
        let (x, y) = (
            std::fs::read(a.join(rel)).map_err(|e| e.to_string())?,
            std::fs::read(b.join(rel)).map_err(|e| e.to_string())?,
        );
        let equal = if rel.file_name().is_some_and(|n| n == "metrics.log") {
            strip_wall_time(&String::from_utf8_lossy(&x))?
                == strip_wall_time(&String::from_utf8_lossy(&y))?
        } else {
            x == y
        };
        ensure(equal, || format!("{} differs between runs", rel.display()))?;
    }
    Ok(fa.len())
}

/// Run `args` into `<tmp>/runs`, move the result aside, run again and compare.
fn run_twice(tmp: &Path, args: &[&str]) -> std::result::Result<(PathBuf, usize), String> {
    let runs = tmp.join("runs");
    let first = tmp.join("first");
    let out = format!("output_dir=\"{}\"", runs.display());
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--set", &out]);
    run_cli(&full)?;
    std::fs::rename(&runs, &first).map_err(|e| e.to_string())?;
    run_cli(&full)?;
    let n = same_tree(&first, &runs)?;
    Ok((runs, n))
}

fn criterion_5() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (runs, n) = run_twice(
        tmp.path(),
        &[
            "loco",
            "--preset",
            "tiny",
            "--set",
            "synth.views=4",
            "--set",
            "name=\"loco\"",
        ],
    )?;
    let run_dir = runs.join("loco");
    let summary: serde_json::Value = serde_json::from_slice(
        &std::fs::read(run_dir.join("summary.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let folds = summary["folds"].as_array().ok_or("summary has no folds")?;
    ensure(folds.len() == 4, || format!("{} folds", folds.len()))?;

    let run = lib(RunConfig::from_preset("tiny", &["synth.views=4".into()]))?;
    let (manifest, _) = lib(synth_generate(&run.synth))?;
    let mut seen = vec![0usize; manifest.len()];
    for (v, fold) in folds.iter().enumerate() {
        let dir = run_dir.join(format!("fold_{}", manifest.label_space.views()[v]));
        ensure(dir.join("report.json").is_file(), || {
            format!("missing {}", dir.display())
        })?;
        let split: LocoSplit = lib(split_loco(
            &manifest,
            v,
            run.data.val_fraction,
            run.data.split_seed,
        ))?;
        ensure(split.test.entries.iter().all(|e| e.view_id == v), || {
            format!("fold {v} test set holds another view")
        })?;
        ensure(
            split
                .train
                .entries
                .iter()
                .chain(&split.val.entries)
                .all(|e| e.view_id != v),
            || format!("fold {v} trains on its test view"),
        )?;
        let reported = fold["report"]["n_samples"].as_u64().unwrap_or(0) as usize;
        ensure(reported == split.test.len(), || {
            format!(
                "fold {v} report has {reported} samples, split has {}",
                split.test.len()
            )
        })?;
        for e in &split.test.entries {
            let i = manifest
                .entries
                .iter()
                .position(|m| m == e)
                .ok_or("unknown entry")?;
            seen[i] += 1;
        }
    }
    ensure(seen.iter().all(|&c| c == 1), || {
        "test sets do not partition the manifest".into()
    })?;
    Ok(format!(
        "4 folds partition {} entries, views disjoint; rerun identical over {n} files",
        manifest.len()
    ))
}

struct AblationRun {
    seed: u64,
    full_top1: f64,
    plain_top1: f64,
    checkpoint: trainer::Checkpoint,
    split: LocoSplit,
}

const ABLATION_FOLD: &str = "view02";

fn ablation() -> std::result::Result<(Vec<AblationRun>, ImageStore, f64), String> {
    let start = Instant::now();
    let (run, manifest, store) = synthetic("desk")?;
    let fold = manifest
        .label_space
        .view_index(ABLATION_FOLD)
        .ok_or("fold view missing")?;
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let split = lib(split_loco(
            &manifest,
            fold,
            run.data.val_fraction,
            run.data.split_seed,
        ))?;
        let full_cfg = TrainConfig {
            seed,
            ..run.train.clone()
        };
        let plain_cfg = TrainConfig {
            seed,
            gate: GateMode::Identity,
            loss_weights: LossWeights::cross_entropy_only(),
            ..run.train.clone()
        };
        let full = lib(trainer::train(&full_cfg, &split.train, &split.val, &store))?;
        let plain = lib(trainer::train(&plain_cfg, &split.train, &split.val, &store))?;
        let full_top1 = lib(evaluator::evaluate(&full.checkpoint, &split.test, &store))?.top1;
        let plain_top1 = lib(evaluator::evaluate(&plain.checkpoint, &split.test, &store))?.top1;
        eprintln!("  ablation seed {seed}: full {full_top1:.2} plain {plain_top1:.2}");
        runs.push(AblationRun {
            seed,
            full_top1,
            plain_top1,
            checkpoint: full.checkpoint,
            split,
        });
    }
    Ok((runs, store, start.elapsed().as_secs_f64()))
}

fn criterion_6(ab: &(Vec<AblationRun>, ImageStore, f64)) -> Check {
    let (runs, _, secs) = ab;
    let n = runs.len() as f64;
    let full = runs.iter().map(|r| r.full_top1).sum::<f64>() / n;
    let plain = runs.iter().map(|r| r.plain_top1).sum::<f64>() / n;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("s{} {:.2}/{:.2}", r.seed, r.full_top1, r.plain_top1))
        .collect();
    let detail = format!(
        "fold {ABLATION_FOLD} mean top1 full {full:.2} vs plain {plain:.2} (margin {:.2}; {}) in {:.0} s",
        full - plain,
        per_seed.join(", "),
        secs
    );
    if full - plain >= 5.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(ab: &(Vec<AblationRun>, ImageStore, f64)) -> Check {
    let (runs, store, _) = ab;
    let mut parts = Vec::new();
    let mut ok = true;
    for r in runs {
        let d = lib(probe_view_drop(
            &r.checkpoint,
            &r.split.train,
            &r.split.val,
            store,
        ))?;
        ok &= d.acc_pre - d.acc_post >= 10.0;
        parts.push(format!("s{} {:.2} -> {:.2}", r.seed, d.acc_pre, d.acc_post));
    }
    let detail = format!("view probe on full models: {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Check {
    let perfect = array![
        [3.0, 1.0, 0.0],
        [0.0, 2.0, 1.0],
        [0.0, 0.0, 5.0],
        [4.0, 0.0, 1.0]
    ];
    let labels = [0, 1, 2, 0];
    ensure(
        lib(topk_accuracy(perfect.view(), &labels, 1))? == 100.0,
        || "all-correct top1 != 100".into(),
    )?;

    let second = array![
        [5.0, 4.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 9.0, 8.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0, 0.0, 2.0],
    ];
    let labels = [1, 3, 0];
    let (t1, t5) = (
        lib(topk_accuracy(second.view(), &labels, 1))?,
        lib(topk_accuracy(second.view(), &labels, 5))?,
    );
    ensure(t1 == 0.0 && t5 == 100.0, || {
        format!("second-ranked gave {t1}/{t5}")
    })?;

    // Descending scores put class j at rank j+1, so the label picks the rank.
    let row = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
    let six = Array2::from_shape_fn((6, 6), |(_, j)| row[j]);
    let labels = [0, 0, 1, 2, 5, 5];
    let (t1, t5) = (
        lib(topk_accuracy(six.view(), &labels, 1))?,
        lib(topk_accuracy(six.view(), &labels, 5))?,
    );
    ensure(t1 == 100.0 / 3.0 && t5 == 200.0 / 3.0, || {
        format!("ranks {{1,1,2,3,6,6}} gave {t1}/{t5}")
    })?;

    let truth = [0, 1, 1, 2, 2, 2];
    let diag = lib(confusion_matrix(&truth, &truth, 3))?;
    ensure(diag == array![[1, 0, 0], [0, 2, 0], [0, 0, 3]], || {
        format!("perfect confusion {diag:?}")
    })?;
    let col0 = lib(confusion_matrix(&[0; 6], &truth, 3))?;
    ensure(col0 == array![[1, 0, 0], [2, 0, 0], [3, 0, 0]], || {
        format!("all-zero confusion {col0:?}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let a = rng.random_range(2..12usize);
        let n = rng.random_range(1..40usize);
        let logits = Array2::from_shape_fn((n, a), |_| (rng.random_range(-3..3) as f64) * 0.5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..a)).collect();
        let names = (0..a).map(|c| format!("c{c}")).collect();
        let report = lib(EvalReport::from_logits(logits.view(), &labels, names))?;
        ensure(report.top5 >= report.top1, || {
            format!("report {i}: top5 {} < top1 {}", report.top5, report.top1)
        })?;
    }
    Ok("top-k and confusion fixtures exact; top5 >= top1 on 1000 random reports".into())
}

fn criterion_9() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (runs, n) = run_twice(
        tmp.path(),
        &["train", "--preset", "tiny", "--set", "name=\"repro\""],
    )?;
    let dir = runs.join("repro");
    for f in ["checkpoint.bin", "metrics.log"] {
        ensure(dir.join(f).is_file(), || format!("train wrote no {f}"))?;
    }
    Ok(format!(
        "two train runs: checkpoint bitwise equal, metrics equal without wall time ({n} files)"
    ))
}

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);

    let mut results: Vec<(u32, &str, Check, f64)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &dyn Fn() -> Check| {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} {tag} [{name}] {detail} ({secs:.1} s)");
        results.push((n, name, outcome, secs));
    };

    if run(1) {
        record(1, "gradient oracle", &criterion_1);
    }
    if run(2) {
        record(2, "identity gate", &criterion_2);
    }
    if run(3) {
        record(3, "loss oracles", &criterion_3);
    }
    if run(4) {
        record(4, "sampler", &criterion_4);
    }
    if run(5) {
        record(5, "LOCO shape", &criterion_5);
    }
    if run(6) || run(7) {
        match ablation() {
            Ok(ab) => {
                if run(6) {
                    record(6, "ablation direction", &|| criterion_6(&ab));
                }
                if run(7) {
                    record(7, "probe direction", &|| criterion_7(&ab));
                }
            }
            Err(e) => {
                for (n, name) in [(6, "ablation direction"), (7, "probe direction")] {
                    if run(n) {
                        record(n, name, &|| Err(e.clone()));
                    }
                }
            }
        }
    }
    if run(8) {
        record(8, "metrics", &criterion_8);
    }
    if run(9) {
        record(9, "reproducibility", &criterion_9);
    }

    let failed: Vec<u32> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" (criteria {failed:?})")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

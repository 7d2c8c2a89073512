use std::collections::BTreeMap;
use std::sync::OnceLock;

use dbmnet::dataset::{split_loco, synth_generate, Origin};
use dbmnet::evaluator::{
    cross_dataset_eval, evaluate, run_loco, LabelMap, LabelMapFile, LocoOptions, Ranking,
};
use dbmnet::probe::{extract_features, probe_view_drop, Stage};
use dbmnet::trainer::{self, Checkpoint, TrainConfig};
use dbmnet::{DatasetManifest, Error, ImageStore, LabelSpace, RunConfig};

struct Fixture {
    manifest: DatasetManifest,
    store: ImageStore,
    checkpoint: Checkpoint,
}

/// Tiny synthetic data and a model trained on views 0 and 1.
fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let run = RunConfig::from_preset("tiny", &["synth.per_cell=10".into()]).unwrap();
        let (manifest, mut store) = synth_generate(&run.synth).unwrap();
        store.resize_all(run.train.input_size);
        let config = TrainConfig {
            epochs: 15,
            batch_size: 8,
            lr_drop_epochs: vec![10],
            augment: false,
            ..run.train
        };
        let split = split_loco(&manifest, 2, 0.2, 0).unwrap();
        let outcome = trainer::train(&config, &split.train, &split.val, &store).unwrap();
        Fixture {
            manifest,
            store,
            checkpoint: outcome.checkpoint,
        }
    })
}

/// The same entries under a different action vocabulary.
fn renamed(
    manifest: &DatasetManifest,
    names: &[&str],
    ids: impl Fn(usize) -> usize,
) -> DatasetManifest {
    let space = LabelSpace::new(
        names.iter().map(|s| s.to_string()).collect(),
        manifest.label_space.views().to_vec(),
    )
    .unwrap();
    let entries = manifest
        .entries
        .iter()
        .map(|e| dbmnet::Entry {
            action_id: ids(e.action_id),
            ..e.clone()
        })
        .collect();
    DatasetManifest::new(space, entries, Origin::Synthetic).unwrap()
}

#[test]
fn converged_run_fits_its_training_views() {
    let fx = fixture();
    let split = split_loco(&fx.manifest, 2, 0.2, 0).unwrap();
    let report = evaluate(&fx.checkpoint, &split.train, &fx.store).unwrap();
    assert!(report.top1 > 90.0, "train top1 {}", report.top1);
    assert!(report.top5 >= report.top1);
}

#[test]
fn permuted_label_map_matches_unmapped_run() {
    let fx = fixture();
    let base = evaluate(&fx.checkpoint, &fx.manifest, &fx.store).unwrap();

    // Foreign ids are a permutation of the checkpoint's; the map inverts it by name.
    let perm = [2, 0, 3, 1];
    let names = ["c", "a", "d", "b"];
    let foreign = renamed(&fx.manifest, &names, |a| perm[a]);
    let file = LabelMapFile {
        description: String::new(),
        authoritative: true,
        map: (0..4)
            .map(|a| {
                let ours = fx.checkpoint.label_space.actions()[a].clone();
                (names[perm[a]].to_string(), ours)
            })
            .collect(),
    };
    let map = LabelMap::from_names(
        &file,
        foreign.label_space.actions(),
        fx.checkpoint.label_space.actions(),
    )
    .unwrap();
    for ranking in [Ranking::Restricted, Ranking::Full] {
        let mapped =
            cross_dataset_eval(&fx.checkpoint, &foreign, &fx.store, &map, ranking).unwrap();
        assert_eq!(mapped.top1, base.top1);
        assert_eq!(mapped.top5, base.top5);
        assert_eq!(mapped.confusion, base.confusion);
    }
}

#[test]
fn identity_map_equals_evaluate() {
    let fx = fixture();
    let base = evaluate(&fx.checkpoint, &fx.manifest, &fx.store).unwrap();
    let map = LabelMap::identity(4);
    let mapped = cross_dataset_eval(
        &fx.checkpoint,
        &fx.manifest,
        &fx.store,
        &map,
        Ranking::Restricted,
    )
    .unwrap();
    assert_eq!(mapped.top1, base.top1);
    assert_eq!(mapped.confusion, base.confusion);
    assert_eq!(mapped.n_samples, base.n_samples);
}

#[test]
fn collapsing_two_classes_merges_their_rows() {
    let fx = fixture();
    let base = evaluate(&fx.checkpoint, &fx.manifest, &fx.store).unwrap();
    let map = LabelMap::new(vec![Some(0), Some(1), Some(2), Some(2)], 4).unwrap();
    let merged =
        cross_dataset_eval(&fx.checkpoint, &fx.manifest, &fx.store, &map, Ranking::Full).unwrap();
    let expected: Vec<u64> = (0..4)
        .map(|j| base.confusion[2][j] + base.confusion[3][j])
        .collect();
    assert_eq!(merged.confusion[2], expected);
    assert_eq!(merged.confusion[3], vec![0; 4]);
    assert_eq!(merged.confusion[..2], base.confusion[..2]);
    assert_eq!(merged.n_samples, base.n_samples);
}

#[test]
fn dropped_class_leaves_the_count() {
    let fx = fixture();
    let map = LabelMap::new(vec![Some(0), Some(1), Some(2), None], 4).unwrap();
    let report = cross_dataset_eval(
        &fx.checkpoint,
        &fx.manifest,
        &fx.store,
        &map,
        Ranking::Restricted,
    )
    .unwrap();
    let class3 = fx
        .manifest
        .entries
        .iter()
        .filter(|e| e.action_id == 3)
        .count();
    assert_eq!(report.n_samples, fx.manifest.len() - class3);
    assert_eq!(report.dropped, class3);
    assert_eq!(report.top5_k, 3);
}

#[test]
fn unmapped_class_and_mismatched_space_are_errors() {
    let fx = fixture();
    let foreign = renamed(&fx.manifest, &["w", "x", "y", "z"], |a| a);
    let file = LabelMapFile {
        description: String::new(),
        authoritative: false,
        map: BTreeMap::from([("w".into(), "00".into()), ("x".into(), "DROP".into())]),
    };
    let err = LabelMap::from_names(
        &file,
        foreign.label_space.actions(),
        fx.checkpoint.label_space.actions(),
    );
    assert!(matches!(err, Err(Error::LabelMap(_))));

    let run = RunConfig::from_preset("tiny", &["synth.actions=5".into()]).unwrap();
    let (five, _) = synth_generate(&run.synth).unwrap();
    assert!(matches!(
        evaluate(&fx.checkpoint, &five, &fx.store),
        Err(Error::LabelSpace(_))
    ));
}

#[test]
fn empty_manifest_is_empty_eval() {
    let fx = fixture();
    let empty = fx.manifest.subset(Vec::new());
    assert!(matches!(
        evaluate(&fx.checkpoint, &empty, &fx.store),
        Err(Error::EmptyEval)
    ));
}

#[test]
fn features_and_probe_are_deterministic() {
    let fx = fixture();
    for stage in [Stage::Pre, Stage::Post] {
        let a = extract_features(&fx.checkpoint, &fx.manifest, &fx.store, stage).unwrap();
        let b = extract_features(&fx.checkpoint, &fx.manifest, &fx.store, stage).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.view_ids, b.view_ids);
    }
    let split = split_loco(&fx.manifest, 2, 0.2, 0).unwrap();
    let first = probe_view_drop(&fx.checkpoint, &split.train, &split.val, &fx.store).unwrap();
    let again = probe_view_drop(&fx.checkpoint, &split.train, &split.val, &fx.store).unwrap();
    assert_eq!(first, again);
    assert_eq!(first.drop, first.acc_pre - first.acc_post);
}

#[test]
fn loco_rerun_gives_identical_report() {
    let run = RunConfig::from_preset("tiny", &["synth.views=4".into()]).unwrap();
    let (manifest, mut store) = synth_generate(&run.synth).unwrap();
    store.resize_all(run.train.input_size);
    let options = LocoOptions::default();
    let first = run_loco(&manifest, &store, &run.train, &options, None).unwrap();
    let again = run_loco(&manifest, &store, &run.train, &options, None).unwrap();
    assert_eq!(first, again);
    assert_eq!(first.folds.len(), 4);
    let total: usize = first.folds.iter().map(|f| f.report.n_samples).sum();
    assert_eq!(total, manifest.len());
    for (v, fold) in first.folds.iter().enumerate() {
        assert_eq!(fold.test_view, v);
    }
}

//! How much view information survives the gate: nearest-centroid view
//! classification on features before and after it.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Image, ImageStore};
use crate::error::{Error, Result};
use crate::model::forward_batch;
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Backbone features `f`.
    Pre,
    /// Gated features `f_hat`.
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Array2<f64>,
    pub action_ids: Vec<usize>,
    pub view_ids: Vec<usize>,
    pub stage: Stage,
}

impl FeatureMatrix {
    pub fn new(
        rows: Array2<f64>,
        action_ids: Vec<usize>,
        view_ids: Vec<usize>,
        stage: Stage,
    ) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyEval);
        }
        if action_ids.len() != rows.nrows() || view_ids.len() != rows.nrows() {
            return Err(Error::shape("label vectors must have one entry per row"));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::shape("feature matrix has non-finite entries"));
        }
        Ok(Self {
            rows,
            action_ids,
            view_ids,
            stage,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Features of every manifest entry, in manifest order, without augmentation.
pub fn extract_features(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    store: &ImageStore,
    stage: Stage,
) -> Result<FeatureMatrix> {
    if manifest.is_empty() {
        return Err(Error::EmptyEval);
    }
    let params = &checkpoint.params;
    let size = params.dims().input_size;
    let batch = checkpoint.config.eval_batch_size.max(1);
    let mut rows = Array2::zeros((manifest.len(), params.dims().feature_dim()));
    for (ci, chunk) in manifest.entries.chunks(batch).enumerate() {
        let owned: Vec<Option<Image>> = chunk
            .iter()
            .map(|e| {
                let img = store.get(&e.source_id)?;
                Ok((img.height() != size || img.width() != size).then(|| img.resized(size)))
            })
            .collect::<Result<_>>()?;
        let refs = chunk
            .iter()
            .zip(&owned)
            .map(|(e, o)| match o {
                Some(img) => Ok(img),
                None => store.get(&e.source_id),
            })
            .collect::<Result<Vec<&Image>>>()?;
        let trace = forward_batch(params, &refs, false)?;
        let source = match stage {
            Stage::Pre => &trace.f,
            Stage::Post => &trace.f_hat,
        };
        let start = ci * batch;
        rows.slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&source.mapv(f64::from));
    }
    FeatureMatrix::new(
        rows,
        manifest.entries.iter().map(|e| e.action_id).collect(),
        manifest.entries.iter().map(|e| e.view_id).collect(),
        stage,
    )
}

/// Nearest-class-mean classifier under Euclidean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MdcModel {
    pub centroids: Array2<f64>,
    /// Class id of each centroid row, ascending.
    pub class_ids: Vec<usize>,
}

impl MdcModel {
    /// One centroid per class in `0..num_classes`; every class needs a row.
    pub fn fit(rows: &Array2<f64>, labels: &[usize], num_classes: usize) -> Result<Self> {
        let class_ids: Vec<usize> = (0..num_classes).collect();
        Self::fit_classes(rows, labels, &class_ids)
    }

    /// One centroid per id in `class_ids` (ascending, distinct). Every listed
    /// class needs a row and every label must be listed.
    pub fn fit_classes(rows: &Array2<f64>, labels: &[usize], class_ids: &[usize]) -> Result<Self> {
        if rows.nrows() != labels.len() {
            return Err(Error::shape("one label per row required"));
        }
        if class_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::shape("class ids must be ascending and distinct"));
        }
        let k = class_ids.len();
        let mut sums = Array2::<f64>::zeros((k, rows.ncols()));
        let mut counts = vec![0usize; k];
        for (row, &label) in rows.axis_iter(Axis(0)).zip(labels) {
            let slot = class_ids.binary_search(&label).map_err(|_| Error::Label {
                label,
                classes: class_ids.last().map_or(0, |&c| c + 1),
            })?;
            let mut s = sums.row_mut(slot);
            s += &row;
            counts[slot] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass(class_ids[empty]));
        }
        for (mut s, &c) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
            s /= c as f64;
        }
        Ok(Self {
            centroids: sums,
            class_ids: class_ids.to_vec(),
        })
    }

    /// Closest centroid; ties go to the lower class id.
    pub fn predict_one(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (centroid, &id) in self.centroids.axis_iter(Axis(0)).zip(&self.class_ids) {
            let d2: f64 = centroid
                .iter()
                .zip(row.iter())
                .map(|(c, x)| (c - x) * (c - x))
                .sum();
            if d2 < best.0 {
                best = (d2, id);
            }
        }
        best.1
    }

    pub fn predict(&self, rows: &Array2<f64>) -> Vec<usize> {
        rows.axis_iter(Axis(0))
            .map(|r| self.predict_one(r))
            .collect()
    }

    /// Percentage of rows classified as their label.
    pub fn accuracy(&self, rows: &Array2<f64>, labels: &[usize]) -> Result<f64> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyEval);
        }
        let hits = self
            .predict(rows)
            .iter()
            .zip(labels)
            .filter(|(p, t)| p == t)
            .count();
        Ok(100.0 * hits as f64 / rows.nrows() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewDrop {
    pub acc_pre: f64,
    pub acc_post: f64,
    /// `acc_pre - acc_post`, in accuracy points.
    pub drop: f64,
}

/// Fit a view classifier on training features of each stage and score it on the
/// validation features of the same stage. Only views present in `train` get a
/// centroid, so a held-out camera does not count as an empty class.
pub fn probe_view_drop(
    checkpoint: &Checkpoint,
    train: &DatasetManifest,
    val: &DatasetManifest,
    store: &ImageStore,
) -> Result<ViewDrop> {
    let views: Vec<usize> = train.views_present().into_iter().collect();
    let mut acc = [0.0; 2];
    for (slot, stage) in [Stage::Pre, Stage::Post].into_iter().enumerate() {
        let fit_on = extract_features(checkpoint, train, store, stage)?;
        let score_on = extract_features(checkpoint, val, store, stage)?;
        let mdc = MdcModel::fit_classes(&fit_on.rows, &fit_on.view_ids, &views)?;
        acc[slot] = mdc.accuracy(&score_on.rows, &score_on.view_ids)?;
    }
    Ok(ViewDrop {
        acc_pre: acc[0],
        acc_post: acc[1],
        drop: acc[0] - acc[1],
    })
}

/// Header: `action_id,view_id,f0,...,f{D-1}`.
pub fn embedding_header(dim: usize) -> String {
    let mut h = String::from("action_id,view_id");
    for i in 0..dim {
        write!(h, ",f{i}").expect("writing to a String");
    }
    h
}

/// One CSV row per sample. Values use the shortest representation that
/// parses back to the same f64.
pub fn export_embeddings(features: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut out = embedding_header(features.dim());
    out.push('\n');
    for ((row, a), v) in features
        .rows
        .axis_iter(Axis(0))
        .zip(&features.action_ids)
        .zip(&features.view_ids)
    {
        write!(out, "{a},{v}").expect("writing to a String");
        for x in row {
            write!(out, ",{x}").expect("writing to a String");
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn nearest_centroid_geometry() {
        let rows = array![[0.0, 0.0], [10.0, 0.0]];
        let mdc = MdcModel::fit(&rows, &[0, 1], 2).unwrap();
        assert_eq!(mdc.predict_one(array![1.0, 0.0].view()), 0);
        assert_eq!(mdc.accuracy(&rows, &[0, 1]).unwrap(), 100.0);
    }

    #[test]
    fn centroids_are_class_means() {
        let rows = array![[0.0, 2.0], [2.0, 4.0], [9.0, 9.0]];
        let mdc = MdcModel::fit(&rows, &[0, 0, 1], 2).unwrap();
        assert_eq!(mdc.centroids, array![[1.0, 3.0], [9.0, 9.0]]);
    }

    #[test]
    fn bisector_tie_goes_to_lower_id() {
        // Centroids at (0,0), (4,0), (0,4): (2,2) is equidistant from all three,
        // (2,-1) is equidistant from classes 0 and 1 only.
        let rows = array![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let mdc = MdcModel::fit(&rows, &[0, 1, 2], 3).unwrap();
        assert_eq!(mdc.predict_one(array![2.0, 2.0].view()), 0);
        assert_eq!(mdc.predict_one(array![2.0, -1.0].view()), 0);
        assert_eq!(mdc.predict_one(array![4.0, 2.0].view()), 1);
        assert_eq!(mdc.predict_one(array![2.0, 4.0].view()), 2);
        let fit = MdcModel::fit(&array![[4.0, 0.0], [0.0, 4.0]], &[1, 2], 3);
        assert!(matches!(fit, Err(Error::EmptyClass(0))));
    }

    #[test]
    fn subset_of_classes_keeps_their_ids() {
        let rows = array![[4.0, 0.0], [0.0, 4.0], [0.0, 6.0]];
        let mdc = MdcModel::fit_classes(&rows, &[1, 3, 3], &[1, 3]).unwrap();
        assert_eq!(mdc.class_ids, vec![1, 3]);
        assert_eq!(mdc.centroids.row(1).to_vec(), vec![0.0, 5.0]);
        assert_eq!(mdc.predict_one(array![3.0, 0.0].view()), 1);
        let unlisted = MdcModel::fit_classes(&rows, &[1, 2, 3], &[1, 3]);
        assert!(matches!(unlisted, Err(Error::Label { label: 2, .. })));
        let empty = MdcModel::fit_classes(&rows, &[1, 1, 1], &[1, 3]);
        assert!(matches!(empty, Err(Error::EmptyClass(3))));
    }

    #[test]
    fn embedding_round_trip() {
        let rows = array![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 7.0, -0.0]];
        let fm = FeatureMatrix::new(rows.clone(), vec![4, 1], vec![0, 2], Stage::Pre).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        export_embeddings(&fm, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "action_id,view_id,f0,f1,f2");
        let parsed: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(parsed.len(), 2);
        assert!(parsed.iter().all(|r| r.len() == 5));
        assert_eq!(parsed[0][0], 4.0);
        assert_eq!(parsed[1][1], 2.0);
        for (r, row) in parsed.iter().enumerate() {
            for d in 0..3 {
                assert!((row[d + 2] - rows[[r, d]]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn feature_matrix_invariants() {
        assert!(FeatureMatrix::new(Array2::zeros((0, 3)), vec![], vec![], Stage::Pre).is_err());
        assert!(FeatureMatrix::new(array![[f64::NAN]], vec![0], vec![0], Stage::Post).is_err());
    }

    proptest! {
        #[test]
        fn isometry_invariance(
            points in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            queries in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
            angle in 0.0f64..std::f64::consts::TAU,
            shift in (-50.0f64..50.0, -50.0f64..50.0),
        ) {
            let n = points.len();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let to_rows = |pts: &[(f64, f64)]| {
                Array2::from_shape_fn((pts.len(), 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 })
            };
            let (c, s) = (angle.cos(), angle.sin());
            let moved = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
                pts.iter().map(|&(x, y)| (c * x - s * y + shift.0, s * x + c * y + shift.1)).collect()
            };
            let a = MdcModel::fit(&to_rows(&points), &labels, 3).unwrap();
            let b = MdcModel::fit(&to_rows(&moved(&points)), &labels, 3).unwrap();
            let qa = a.predict(&to_rows(&queries));
            let qb = b.predict(&to_rows(&moved(&queries)));
            // Rounding may flip exact ties; require agreement away from ties.
            for ((pa, pb), q) in qa.iter().zip(&qb).zip(&queries) {
                if pa != pb {
                    let row = array![q.0, q.1];
                    let d = |k: usize| a.centroids.row(k).iter().zip(row.iter()).map(|(c, x)| (c - x).powi(2)).sum::<f64>();
                    prop_assert!((d(*pa) - d(*pb)).abs() < 1e-9 * (1.0 + d(*pa)));
                }
            }
        }
    }
}

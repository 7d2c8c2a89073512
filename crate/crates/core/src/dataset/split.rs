use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetManifest;
use crate::error::{Error, Result};

/// One leave-one-camera-out fold.
#[derive(Debug, Clone)]
pub struct LocoSplit {
    pub test_view: usize,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Hold out `test_view` entirely; split the remaining views into train/val with a
/// per-(action, view) stratified shuffle.
///
/// Each cell of `n` entries sends `round(n * val_fraction)` entries (at most
/// `n - 1`) to validation. Entries keep their manifest order within each part.
pub fn split_loco(
    manifest: &DatasetManifest,
    test_view: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<LocoSplit> {
    let num_views = manifest.label_space.num_views();
    if test_view >= num_views {
        return Err(Error::Label {
            label: test_view,
            classes: num_views,
        });
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let present = manifest.views_present();
    if !present.contains(&test_view) {
        return Err(Error::EmptyFold {
            view: test_view,
            reason: "held-out view has no samples".into(),
        });
    }
    if let Some(missing) = (0..num_views).find(|v| !present.contains(v)) {
        return Err(Error::EmptyFold {
            view: test_view,
            reason: format!("training view {missing} has no samples"),
        });
    }

    let num_actions = manifest.label_space.num_actions();
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); num_actions * num_views];
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.view_id != test_view {
            cells[e.action_id * num_views + e.view_id].push(i);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; manifest.len()];
    for cell in &mut cells {
        if cell.is_empty() {
            continue;
        }
        let n = cell.len();
        let val_count = ((n as f64 * val_fraction).round() as usize).min(n - 1);
        cell.shuffle(&mut rng);
        for &i in &cell[..val_count] {
            is_val[i] = true;
        }
    }

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.view_id == test_view {
            test.push(e.clone());
        } else if is_val[i] {
            val.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    Ok(LocoSplit {
        test_view,
        train: manifest.subset(train),
        val: manifest.subset(val),
        test: manifest.subset(test),
    })
}

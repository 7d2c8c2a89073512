//! Triplet batch construction.
//!
//! A triplet is an anchor, a sample from the same view showing a different
//! action, and a sample of the same action from a different view. Anchors are
//! drawn with replacement; the two partners are drawn uniformly from their
//! candidate sets.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetManifest, Entry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: Entry,
    pub same_view: Entry,
    pub same_action: Entry,
}

impl Triplet {
    pub fn is_valid(&self) -> bool {
        self.same_view.view_id == self.anchor.view_id
            && self.same_view.action_id != self.anchor.action_id
            && self.same_action.action_id == self.anchor.action_id
            && self.same_action.view_id != self.anchor.view_id
    }
}

#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    /// Sampler state after this batch was emitted.
    pub rng_checkpoint: ChaCha8Rng,
}

/// Why a manifest cannot produce triplets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleabilityDiagnostic {
    /// Views holding fewer than two distinct actions.
    pub views: Vec<usize>,
    /// Actions appearing in fewer than two distinct views.
    pub actions: Vec<usize>,
    /// The populated (action, view) cells behind each violation.
    pub cells: Vec<(usize, usize)>,
}

impl fmt::Display for SampleabilityDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "views with <2 actions: {:?}; actions with <2 views: {:?}; cells: {:?}",
            self.views, self.actions, self.cells
        )
    }
}

/// Every populated view must hold at least two actions and every populated
/// action must appear in at least two views.
pub fn validate_sampleability(manifest: &DatasetManifest) -> Result<(), SampleabilityDiagnostic> {
    let counts = manifest.cell_counts();
    let num_views = manifest.label_space.num_views();
    let mut diag = SampleabilityDiagnostic::default();
    let mut cells = BTreeSet::new();

    for v in 0..num_views {
        let actions: Vec<usize> = counts
            .iter()
            .enumerate()
            .filter(|(_, row)| row[v] > 0)
            .map(|(a, _)| a)
            .collect();
        if actions.len() == 1 {
            diag.views.push(v);
            cells.extend(actions.iter().map(|&a| (a, v)));
        }
    }
    for (a, row) in counts.iter().enumerate() {
        let views: Vec<usize> = (0..num_views).filter(|&v| row[v] > 0).collect();
        if views.len() == 1 {
            diag.actions.push(a);
            cells.extend(views.iter().map(|&v| (a, v)));
        }
    }
    if diag.views.is_empty() && diag.actions.is_empty() {
        Ok(())
    } else {
        diag.cells = cells.into_iter().collect();
        Err(diag)
    }
}

/// Precomputed candidate lists for drawing triplets from one manifest.
#[derive(Debug, Clone)]
pub struct TripletSampler<'m> {
    manifest: &'m DatasetManifest,
    num_views: usize,
    /// Indexed by `action * num_views + view`: entries with that view and another action.
    same_view: Vec<Vec<usize>>,
    /// Indexed by `action * num_views + view`: entries with that action and another view.
    same_action: Vec<Vec<usize>>,
    /// Entry indices grouped by action, for class-balanced anchors.
    by_action: Vec<Vec<usize>>,
    balance_actions: bool,
}

impl<'m> TripletSampler<'m> {
    pub fn new(manifest: &'m DatasetManifest) -> Result<Self> {
        validate_sampleability(manifest).map_err(Error::Unsampleable)?;
        let num_actions = manifest.label_space.num_actions();
        let num_views = manifest.label_space.num_views();
        let counts = manifest.cell_counts();

        let mut same_view = vec![Vec::new(); num_actions * num_views];
        let mut same_action = vec![Vec::new(); num_actions * num_views];
        let mut by_action = vec![Vec::new(); num_actions];
        for (i, e) in manifest.entries.iter().enumerate() {
            by_action[e.action_id].push(i);
            for a in 0..num_actions {
                if a != e.action_id && counts[a][e.view_id] > 0 {
                    same_view[a * num_views + e.view_id].push(i);
                }
            }
            for v in 0..num_views {
                if v != e.view_id && counts[e.action_id][v] > 0 {
                    same_action[e.action_id * num_views + v].push(i);
                }
            }
        }
        by_action.retain(|v| !v.is_empty());
        Ok(Self {
            manifest,
            num_views,
            same_view,
            same_action,
            by_action,
            balance_actions: false,
        })
    }

    /// Draw anchors by first picking an action uniformly, then an entry within it.
    pub fn balance_actions(mut self, on: bool) -> Self {
        self.balance_actions = on;
        self
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Triplet {
        let entries = &self.manifest.entries;
        let anchor = if self.balance_actions {
            let group = &self.by_action[rng.random_range(0..self.by_action.len())];
            group[rng.random_range(0..group.len())]
        } else {
            rng.random_range(0..entries.len())
        };
        let a = &entries[anchor];
        let cell = a.action_id * self.num_views + a.view_id;
        let sv = &self.same_view[cell];
        let sa = &self.same_action[cell];
        Triplet {
            anchor: a.clone(),
            same_view: entries[sv[rng.random_range(0..sv.len())]].clone(),
            same_action: entries[sa[rng.random_range(0..sa.len())]].clone(),
        }
    }

    pub fn batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<TripletBatch> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        let triplets = (0..batch_size).map(|_| self.sample(rng)).collect();
        Ok(TripletBatch {
            triplets,
            rng_checkpoint: rng.clone(),
        })
    }
}

/// Build one batch of `batch_size` triplets. Deterministic given `rng`.
pub fn build_triplet_batch(
    manifest: &DatasetManifest,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TripletBatch> {
    TripletSampler::new(manifest)?.batch(batch_size, rng)
}

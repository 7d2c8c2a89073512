//! Labeled multi-view samples, dataset ingestion and leave-one-camera-out splits.
//!
//! A dataset is a [`DatasetManifest`] (labels and source ids) paired with an
//! [`ImageStore`] holding the decoded pixels. Manifests are cheap to clone and
//! to subset; the store is shared read-only between all subsets.

mod augment;
mod directory;
mod split;
mod synth;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentConfig};
pub use directory::{export_directory, load_images, load_manifest, IMAGE_EXTENSIONS};
pub use split::{split_loco, LocoSplit};
pub use synth::{synth_generate, SynthConfig};

/// Ordered action and view names. Index `i` always refers to the same name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    actions: Vec<String>,
    views: Vec<String>,
}

impl LabelSpace {
    pub fn new(actions: Vec<String>, views: Vec<String>) -> Result<Self> {
        if actions.len() < 2 {
            return Err(Error::config(format!(
                "label space needs at least 2 actions, got {}",
                actions.len()
            )));
        }
        if views.len() < 2 {
            return Err(Error::config(format!(
                "label space needs at least 2 views, got {}",
                views.len()
            )));
        }
        for (kind, names) in [("action", &actions), ("view", &views)] {
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::config(format!(
                    "duplicate {kind} names in label space"
                )));
            }
        }
        Ok(Self { actions, views })
    }

    /// Label space with zero-padded numeric names (`"00"`, `"01"`, ...) for actions
    /// and `"view00"`, ... for views, so lexicographic and numeric order agree.
    pub fn numbered(num_actions: usize, num_views: usize) -> Result<Self> {
        Self::new(
            (0..num_actions).map(|a| format!("{a:02}")).collect(),
            (0..num_views).map(|v| format!("view{v:02}")).collect(),
        )
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn views(&self) -> &[String] {
        &self.views
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == name)
    }

    pub fn view_index(&self, name: &str) -> Option<usize> {
        self.views.iter().position(|v| v == name)
    }
}

/// An RGB image in channel-major (3 x H x W) layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resize to `size x size`; returns a copy when already that size.
    pub fn resized(&self, size: usize) -> Image {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let mut src = image::Rgb32FImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in src.enumerate_pixels_mut() {
            for c in 0..Self::CHANNELS {
                px[c] = self.get(c, y as usize, x as usize);
            }
        }
        let dst = image::imageops::resize(
            &src,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut out = Image::zeros(size, size);
        for (x, y, px) in dst.enumerate_pixels() {
            for c in 0..Self::CHANNELS {
                out.set(c, y as usize, x as usize, px[c]);
            }
        }
        out
    }
}

/// One manifest row: where the pixels live and what they show.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entry {
    pub source_id: String,
    pub action_id: usize,
    pub view_id: usize,
}

/// A sample with its pixels resolved.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub image: &'a Image,
    pub action_id: usize,
    pub view_id: usize,
    pub source_id: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Directory { root: PathBuf },
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub label_space: LabelSpace,
    pub entries: Vec<Entry>,
    pub origin: Origin,
    /// Files that were found but could not be read.
    pub skipped: usize,
}

impl DatasetManifest {
    pub fn new(label_space: LabelSpace, entries: Vec<Entry>, origin: Origin) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::MalformedLayout("manifest has no entries".into()));
        }
        let manifest = Self {
            label_space,
            entries,
            origin,
            skipped: 0,
        };
        manifest.check_labels()?;
        Ok(manifest)
    }

    fn check_labels(&self) -> Result<()> {
        let (a, v) = (self.label_space.num_actions(), self.label_space.num_views());
        for e in &self.entries {
            if e.action_id >= a {
                return Err(Error::Label {
                    label: e.action_id,
                    classes: a,
                });
            }
            if e.view_id >= v {
                return Err(Error::Label {
                    label: e.view_id,
                    classes: v,
                });
            }
        }
        Ok(())
    }

    /// A manifest over the same label space holding only `entries`.
    /// Subsets may be empty.
    pub fn subset(&self, entries: Vec<Entry>) -> Self {
        Self {
            label_space: self.label_space.clone(),
            entries,
            origin: self.origin.clone(),
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry count per (action, view) cell, indexed `[action][view]`.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let mut counts =
            vec![vec![0usize; self.label_space.num_views()]; self.label_space.num_actions()];
        for e in &self.entries {
            counts[e.action_id][e.view_id] += 1;
        }
        counts
    }

    pub fn views_present(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.view_id).collect()
    }

    /// Keep only the entries of one view.
    pub fn filter_view(&self, view: usize) -> Self {
        self.subset(
            self.entries
                .iter()
                .filter(|e| e.view_id == view)
                .cloned()
                .collect(),
        )
    }
}

/// Decoded images keyed by source id. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: HashMap<String, Image>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source_id: String, image: Image) {
        self.images.insert(source_id, image);
    }

    pub fn get(&self, source_id: &str) -> Result<&Image> {
        self.images
            .get(source_id)
            .ok_or_else(|| Error::NotFound(PathBuf::from(source_id)))
    }

    pub fn sample<'a>(&'a self, entry: &'a Entry) -> Result<Sample<'a>> {
        Ok(Sample {
            image: self.get(&entry.source_id)?,
            action_id: entry.action_id,
            view_id: entry.view_id,
            source_id: &entry.source_id,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Iterate images in source-id order.
    /// Resize every image to `size x size` in place.
    pub fn resize_all(&mut self, size: usize) {
        for image in self.images.values_mut() {
            if image.height() != size || image.width() != size {
                *image = image.resized(size);
            }
        }
    }

    pub fn iter_sorted(&self) -> impl Iterator<Item = (&String, &Image)> {
        let mut keys: Vec<&String> = self.images.keys().collect();
        keys.sort();
        keys.into_iter().map(move |k| (k, &self.images[k]))
    }
}

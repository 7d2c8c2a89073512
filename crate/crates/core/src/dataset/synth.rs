//! Controlled synthetic multi-view dataset.
//!
//! Each action is a bright Gaussian blob at a fixed angle on a circle around the
//! image centre plus horizontal stripes whose frequency encodes the action. Each
//! view applies its own rotation, translation and colour cast to that canonical
//! picture, so action and view are separable but superimposed signals.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Entry, Image, ImageStore, LabelSpace, Origin};
use crate::error::{Error, Result};

const COLOR_CASTS: [[f32; 3]; 6] = [
    [1.0, 0.8, 0.8],
    [0.8, 1.0, 0.8],
    [0.8, 0.8, 1.0],
    [1.0, 1.0, 0.8],
    [1.0, 0.8, 1.0],
    [0.8, 1.0, 1.0],
];

const BLOB_RADIUS: f64 = 0.3;
const BLOB_SIGMA: f64 = 0.12;
const BLOB_WEIGHT: f64 = 0.8;
const STRIPE_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub actions: usize,
    pub views: usize,
    pub per_cell: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            actions: 6,
            views: 4,
            per_cell: 200,
            image_size: 32,
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actions < 2 {
            return Err(Error::config("synth.actions must be >= 2"));
        }
        if self.views < 2 {
            return Err(Error::config("synth.views must be >= 2"));
        }
        if self.per_cell < 1 {
            return Err(Error::config("synth.per_cell must be >= 1"));
        }
        if self.image_size < 8 {
            return Err(Error::config("synth.image_size must be >= 8"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("synth.noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// The view colour cast, cycling through a fixed palette.
pub fn color_cast(view: usize) -> [f32; 3] {
    COLOR_CASTS[view % COLOR_CASTS.len()]
}

/// Noise-free grey-level rendering of `action` in the canonical frame at (x, y).
fn canonical_intensity(action: usize, num_actions: usize, size: f64, x: f64, y: f64) -> f64 {
    let center = (size - 1.0) / 2.0;
    let theta = 2.0 * PI * action as f64 / num_actions as f64;
    let bx = center + BLOB_RADIUS * size * theta.cos();
    let by = center + BLOB_RADIUS * size * theta.sin();
    let sigma = BLOB_SIGMA * size;
    let d2 = (x - bx).powi(2) + (y - by).powi(2);
    let blob = (-d2 / (2.0 * sigma * sigma)).exp();
    let stripe = 0.5 * (1.0 + (2.0 * PI * (action + 1) as f64 * y / size).sin());
    BLOB_WEIGHT * blob + STRIPE_WEIGHT * stripe
}

/// Noise-free rendering of one (action, view) cell.
pub fn render_clean(action: usize, view: usize, config: &SynthConfig) -> Image {
    let s = config.image_size;
    let size = s as f64;
    let center = (size - 1.0) / 2.0;
    let angle = 0.5 * PI * view as f64 / config.views as f64;
    let (sin, cos) = angle.sin_cos();
    let tx = (view % 2) as f64 * 0.1 * size;
    let ty = (view / 2) as f64 * 0.1 * size;
    let cast = color_cast(view);

    let mut image = Image::zeros(s, s);
    for y in 0..s {
        for x in 0..s {
            // Invert the view transform: q = R(p - c) + c + t  =>  p = R^T(q - c - t) + c.
            let qx = x as f64 - center - tx;
            let qy = y as f64 - center - ty;
            let px = cos * qx + sin * qy + center;
            let py = -sin * qx + cos * qy + center;
            let g = canonical_intensity(action, config.actions, size, px, py) as f32;
            for (c, k) in cast.iter().enumerate() {
                image.set(c, y, x, g * k);
            }
        }
    }
    image
}

/// Generate the full (action x view x per_cell) grid. Pure function of `config`.
pub fn synth_generate(config: &SynthConfig) -> Result<(DatasetManifest, ImageStore)> {
    config.validate()?;
    let label_space = LabelSpace::numbered(config.actions, config.views)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0f32, config.noise_sigma as f32)
        .map_err(|e| Error::config(format!("synth.noise_sigma: {e}")))?;

    let mut entries = Vec::with_capacity(config.actions * config.views * config.per_cell);
    let mut store = ImageStore::new();
    for action in 0..config.actions {
        for view in 0..config.views {
            let clean = render_clean(action, view, config);
            for i in 0..config.per_cell {
                let mut image = clean.clone();
                if config.noise_sigma > 0.0 {
                    for v in image.data_mut() {
                        *v += noise.sample(&mut rng);
                    }
                }
                image.clamp_unit();
                let source_id = format!(
                    "synth/{}/{}/{i:05}",
                    label_space.views()[view],
                    label_space.actions()[action]
                );
                store.insert(source_id.clone(), image);
                entries.push(Entry {
                    source_id,
                    action_id: action,
                    view_id: view,
                });
            }
        }
    }
    let manifest = DatasetManifest::new(label_space, entries, Origin::Synthetic)?;
    Ok((manifest, store))
}

//! On-disk layout `root/<view>/<action>/<image files>`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageReader, RgbImage};

use super::{DatasetManifest, Entry, Image, ImageStore, LabelSpace, Origin};
use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push((
                entry.file_name().to_string_lossy().into_owned(),
                entry.path(),
            ));
        }
    }
    out.sort();
    Ok(out)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn readable(path: &Path) -> bool {
    ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(image::ImageError::from)
        .and_then(|r| r.into_dimensions())
        .is_ok()
}

/// Scan a dataset directory. View and action names are taken from directory
/// names and sorted lexicographically. Image headers are probed; unreadable
/// files are skipped and counted in [`DatasetManifest::skipped`].
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let views = sorted_subdirs(root)?;
    if views.is_empty() {
        return Err(Error::MalformedLayout(format!(
            "{} contains no view directories",
            root.display()
        )));
    }

    let mut per_view = Vec::with_capacity(views.len());
    let mut action_names = BTreeSet::new();
    for (view_name, view_path) in &views {
        let actions = sorted_subdirs(view_path)?;
        if actions.is_empty() {
            return Err(Error::MalformedLayout(format!(
                "view directory {view_name} has no action subdirectories"
            )));
        }
        action_names.extend(actions.iter().map(|(name, _)| name.clone()));
        per_view.push(actions);
    }

    let label_space = LabelSpace::new(
        action_names.into_iter().collect(),
        views.iter().map(|(name, _)| name.clone()).collect(),
    )
    .map_err(|e| Error::MalformedLayout(e.to_string()))?;

    let mut entries = Vec::new();
    let mut skipped = 0;
    for (view_id, actions) in per_view.iter().enumerate() {
        for (action_name, action_path) in actions {
            let action_id = label_space
                .action_index(action_name)
                .expect("action collected above");
            let mut files: Vec<PathBuf> = fs::read_dir(action_path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_file(p))
                .collect();
            files.sort();
            for file in files {
                if !readable(&file) {
                    log::warn!("skipping unreadable image {}", file.display());
                    skipped += 1;
                    continue;
                }
                entries.push(Entry {
                    source_id: file.to_string_lossy().into_owned(),
                    action_id,
                    view_id,
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::MalformedLayout(format!(
            "{} contains no readable images",
            root.display()
        )));
    }
    let mut manifest = DatasetManifest::new(
        label_space,
        entries,
        Origin::Directory {
            root: root.to_path_buf(),
        },
    )?;
    manifest.skipped = skipped;
    Ok(manifest)
}

fn decode(path: &Path, size: usize) -> Result<Image> {
    let rgb = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()?
        .to_rgb8();
    let rgb = if rgb.width() as usize != size || rgb.height() as usize != size {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    } else {
        rgb
    };
    let mut image = Image::zeros(size, size);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            image.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    Ok(image)
}

/// Decode every manifest entry to a 3 x size x size image (bilinear resize).
pub fn load_images(manifest: &DatasetManifest, size: usize) -> Result<ImageStore> {
    let mut store = ImageStore::new();
    for entry in &manifest.entries {
        let image = decode(Path::new(&entry.source_id), size)?;
        store.insert(entry.source_id.clone(), image);
    }
    Ok(store)
}

/// Write a dataset as 8-bit PNGs in the directory layout. Returns the number of
/// files written.
pub fn export_directory(
    manifest: &DatasetManifest,
    store: &ImageStore,
    root: &Path,
) -> Result<usize> {
    let ls = &manifest.label_space;
    let mut counters = manifest.cell_counts();
    for row in &mut counters {
        row.iter_mut().for_each(|n| *n = 0);
    }
    for entry in &manifest.entries {
        let image = store.get(&entry.source_id)?;
        let dir = root
            .join(&ls.views()[entry.view_id])
            .join(&ls.actions()[entry.action_id]);
        fs::create_dir_all(&dir)?;
        let index = &mut counters[entry.action_id][entry.view_id];
        let path = dir.join(format!("{:05}.png", *index));
        *index += 1;

        let mut rgb = RgbImage::new(image.width() as u32, image.height() as u32);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = image.get(c, y as usize, x as usize);
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        rgb.save(&path)?;
    }
    Ok(manifest.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, shade: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(4, 6, image::Rgb([shade, 0, 255 - shade]))
            .save(path)
            .unwrap();
    }

    fn fixture(root: &Path, skip: Option<(&str, &str)>) {
        for view in ["D1", "D2"] {
            for action in ["0", "1"] {
                fs::create_dir_all(root.join(view).join(action)).unwrap();
                if skip == Some((view, action)) {
                    continue;
                }
                for i in 0..3 {
                    write_png(
                        &root.join(view).join(action).join(format!("{i}.png")),
                        40 * i,
                    );
                }
            }
        }
    }

    #[test]
    fn counts_entries_and_infers_labels() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), None);
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.len(), 12);
        assert_eq!(m.label_space.num_actions(), 2);
        assert_eq!(m.label_space.views(), ["D1", "D2"]);
        assert_eq!(m.skipped, 0);
    }

    #[test]
    fn missing_cell_still_loads() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), Some(("D2", "1")));
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.cell_counts()[1][1], 0);
        assert_eq!(m.cell_counts()[0][1], 3);
    }

    #[test]
    fn degenerate_layouts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(Error::MalformedLayout(_))
        ));
        fs::create_dir_all(dir.path().join("D1")).unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(Error::MalformedLayout(_))
        ));
        assert!(matches!(
            load_manifest(&dir.path().join("nope")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn unreadable_files_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), None);
        fs::write(dir.path().join("D1/0/broken.png"), b"not a png").unwrap();
        fs::write(dir.path().join("D1/0/notes.txt"), b"ignored").unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.len(), 12);
        assert_eq!(m.skipped, 1);
    }

    #[test]
    fn decode_resizes_to_square() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), None);
        let m = load_manifest(dir.path()).unwrap();
        let store = load_images(&m, 8).unwrap();
        let img = store.get(&m.entries[0].source_id).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

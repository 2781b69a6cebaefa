//! Directory loader for real image corpora.
//!
//! Expected layout: `root/class_<id>/session_<s>/<name>.png` (or `.pgm`),
//! 8-bit grayscale. Color inputs are reduced by channel average, anything
//! not 64×64 is resampled, and intensities are scaled to [0, 1].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::resize::resize_area;
use super::{DatasetSplit, Image, IMAGE_SIZE};
use crate::error::{AmclError, Result};

/// Which capture session feeds the training set.
#[derive(Debug, Clone, Copy)]
pub struct DirectoryLayout {
    pub train_session: u8,
}

impl Default for DirectoryLayout {
    fn default() -> Self {
        DirectoryLayout { train_session: 1 }
    }
}

impl DirectoryLayout {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.train_session) {
            return Err(AmclError::InvalidConfig(format!(
                "train_session must be 1 or 2, got {}",
                self.train_session
            )));
        }
        Ok(())
    }
}

fn decode_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| AmclError::Dataset(format!(
        "unreadable image file {}: {e}",
        path.display()
    )))?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut gray = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let p = rgb.get_pixel(x as u32, y as u32);
            gray[[y, x]] =
                ((p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).clamp(0.0, 1.0);
        }
    }
    Ok(gray)
}

fn parse_numbered_dir(path: &Path, prefix: &str) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    let rest = name.strip_prefix(prefix)?;
    rest.parse().ok()
}

fn sorted_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| AmclError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                Some(ref ext) if ext == "png" || ext == "pgm"
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Load a `class_<id>/session_<s>` tree into a session split.
///
/// Class ids are remapped to contiguous labels in ascending id order. Every
/// class must appear in both sessions; a class present only in the test
/// session would make verification against enrolled identities impossible.
pub fn load_image_directory(root: &Path, layout: &DirectoryLayout) -> Result<DatasetSplit> {
    layout.validate()?;
    let mut class_dirs: BTreeMap<usize, PathBuf> = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| AmclError::io(root, e))?;
    for entry in entries {
        let path = entry.map_err(|e| AmclError::io(root, e))?.path();
        if path.is_dir() {
            if let Some(id) = parse_numbered_dir(&path, "class_") {
                class_dirs.insert(id, path);
            }
        }
    }
    if class_dirs.is_empty() {
        return Err(AmclError::Dataset(format!(
            "no classes found under {} (expected class_<id>/session_<s>/*.png)",
            root.display()
        )));
    }

    let test_session = if layout.train_session == 1 { 2 } else { 1 };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, (raw_id, class_dir)) in class_dirs.iter().enumerate() {
        let _ = raw_id;
        for session in [1u8, 2u8] {
            let session_dir = class_dir.join(format!("session_{session}"));
            if !session_dir.is_dir() {
                let hint = if session == test_session && !class_dir.join(format!("session_{test_session}")).is_dir() && class_dir.join(format!("session_{}", layout.train_session)).is_dir() {
                    "class has no test-session images"
                } else if session == layout.train_session {
                    "class is present only in the test session"
                } else {
                    "missing session"
                };
                return Err(AmclError::Dataset(format!(
                    "{hint}: {}",
                    session_dir.display()
                )));
            }
            let files = sorted_image_files(&session_dir)?;
            if files.is_empty() {
                return Err(AmclError::Dataset(format!(
                    "missing session: no png/pgm files in {}",
                    session_dir.display()
                )));
            }
            for file in files {
                let gray = decode_gray(&file)?;
                let pixels = resize_area(&gray, IMAGE_SIZE, IMAGE_SIZE);
                let img = Image::new(pixels, label, session)?;
                if session == layout.train_session {
                    train.push(img);
                } else {
                    test.push(img);
                }
            }
        }
    }

    let split = DatasetSplit {
        train,
        test,
        num_classes: class_dirs.len(),
    };
    split.validate()?;
    Ok(split)
}

/// Write a split back out in loader layout (8-bit grayscale PNG).
pub fn save_image_directory(split: &DatasetSplit, root: &Path) -> Result<()> {
    let mut counters: BTreeMap<(usize, u8), usize> = BTreeMap::new();
    for img in split.train.iter().chain(&split.test) {
        let dir = root
            .join(format!("class_{:03}", img.class_id))
            .join(format!("session_{}", img.session_id));
        fs::create_dir_all(&dir).map_err(|e| AmclError::io(&dir, e))?;
        let idx = counters.entry((img.class_id, img.session_id)).or_insert(0);
        let path = dir.join(format!("img_{idx:03}.png"));
        *idx += 1;
        let mut buf = image::GrayImage::new(IMAGE_SIZE as u32, IMAGE_SIZE as u32);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let v = (img.pixels[[y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
                buf.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        buf.save(&path)
            .map_err(|e| AmclError::Dataset(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic_dataset, SyntheticVeinConfig};

    fn write_png(path: &Path, side: u32, f: impl Fn(u32, u32) -> u8) {
        let mut img = image::GrayImage::new(side, side);
        for y in 0..side {
            for x in 0..side {
                img.put_pixel(x, y, image::Luma([f(x, y)]));
            }
        }
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        img.save(path).unwrap();
    }

    #[test]
    fn loads_two_classes_two_sessions() {
        let dir = tempfile::tempdir().unwrap();
        for class in 0..2 {
            for session in 1..=2 {
                for i in 0..3 {
                    write_png(
                        &dir.path()
                            .join(format!("class_{class}/session_{session}/im{i}.png")),
                        64,
                        |x, _| (x * 4) as u8,
                    );
                }
            }
        }
        let split = load_image_directory(dir.path(), &DirectoryLayout::default()).unwrap();
        assert_eq!(split.train.len(), 6);
        assert_eq!(split.test.len(), 6);
        assert_eq!(split.num_classes, 2);
    }

    #[test]
    fn empty_directory_reports_no_classes() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_image_directory(dir.path(), &DirectoryLayout::default()).unwrap_err();
        assert!(err.to_string().contains("no classes found"));
    }

    #[test]
    fn class_only_in_session_two_is_named() {
        let dir = tempfile::tempdir().unwrap();
        for session in 1..=2 {
            write_png(
                &dir.path().join(format!("class_0/session_{session}/a.png")),
                64,
                |_, _| 128,
            );
        }
        write_png(&dir.path().join("class_1/session_2/a.png"), 64, |_, _| 128);
        let err = load_image_directory(dir.path(), &DirectoryLayout::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class_1"), "error should name the path: {msg}");
        assert!(msg.contains("only in the test session"), "got: {msg}");
    }

    #[test]
    fn oversized_input_is_resampled_into_range() {
        let dir = tempfile::tempdir().unwrap();
        for class in 0..2 {
            for session in 1..=2 {
                write_png(
                    &dir.path()
                        .join(format!("class_{class}/session_{session}/a.png")),
                    200,
                    |x, y| if (x / 25 + y / 25) % 2 == 0 { 0 } else { 255 },
                );
            }
        }
        let split = load_image_directory(dir.path(), &DirectoryLayout::default()).unwrap();
        let img = &split.train[0];
        assert_eq!(img.pixels.dim(), (64, 64));
        assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        // The checkerboard keeps its contrast after resampling.
        let mean = img.pixels.sum() / 4096.0;
        assert!((mean - 0.5).abs() < 0.05);
    }

    #[test]
    fn synthetic_split_roundtrips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticVeinConfig {
            num_classes: 3,
            images_per_class_per_session: 2,
            seed: 5,
            ..Default::default()
        };
        let split = generate_synthetic_dataset(&cfg).unwrap();
        save_image_directory(&split, dir.path()).unwrap();
        let loaded = load_image_directory(dir.path(), &DirectoryLayout::default()).unwrap();
        assert_eq!(loaded.train.len(), split.train.len());
        assert_eq!(loaded.test.len(), split.test.len());
        // 8-bit quantization bounds the roundtrip error.
        let d = loaded.train[0]
            .pixels
            .iter()
            .zip(split.train[0].pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(d <= 0.5 / 255.0 + 1e-9, "max deviation {d}");
    }

    #[test]
    fn train_session_flag_flips_the_split() {
        let dir = tempfile::tempdir().unwrap();
        for class in 0..2 {
            write_png(&dir.path().join(format!("class_{class}/session_1/a.png")), 64, |_, _| 10);
            write_png(&dir.path().join(format!("class_{class}/session_2/a.png")), 64, |_, _| 240);
        }
        let flipped =
            load_image_directory(dir.path(), &DirectoryLayout { train_session: 2 }).unwrap();
        assert!(flipped.train.iter().all(|i| i.session_id == 2));
        assert!(flipped.test.iter().all(|i| i.session_id == 1));
    }
}

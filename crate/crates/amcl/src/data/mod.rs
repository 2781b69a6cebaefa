//! Grayscale 64×64 image corpora with session-based train/test splits.
//!
//! Session 1 is the training session and session 2 the test session by
//! default (the capture sessions differ by a global illumination change, so
//! this split models temporal domain shift). The convention can be flipped
//! via [`DirectoryLayout`] or the pipeline config.

pub mod loader;
pub mod resize;
pub mod synthetic;

use ndarray::Array2;

use crate::error::{AmclError, Result};

pub use loader::{load_image_directory, DirectoryLayout};
pub use synthetic::{generate_synthetic_dataset, SyntheticVeinConfig};

/// Side length of every image in the pipeline.
pub const IMAGE_SIZE: usize = 64;

/// A grayscale image with identity and capture-session labels.
#[derive(Debug, Clone)]
pub struct Image {
    /// 64×64 intensities in [0, 1].
    pub pixels: Array2<f64>,
    /// Identity label, contiguous from 0.
    pub class_id: usize,
    /// Capture session, 1 or 2.
    pub session_id: u8,
}

impl Image {
    pub fn new(pixels: Array2<f64>, class_id: usize, session_id: u8) -> Result<Self> {
        let img = Image {
            pixels,
            class_id,
            session_id,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.dim() != (IMAGE_SIZE, IMAGE_SIZE) {
            return Err(AmclError::ShapeMismatch(format!(
                "image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {:?}",
                self.pixels.dim()
            )));
        }
        if !self.pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(AmclError::Dataset(format!(
                "image intensities outside [0,1] (class {}, session {})",
                self.class_id, self.session_id
            )));
        }
        if !(1..=2).contains(&self.session_id) {
            return Err(AmclError::Dataset(format!(
                "session_id must be 1 or 2, got {}",
                self.session_id
            )));
        }
        Ok(())
    }
}

/// A session split: session `train_session` images in `train`, the rest in
/// `test`.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Image>,
    pub test: Vec<Image>,
    pub num_classes: usize,
}

impl DatasetSplit {
    /// Check split invariants: equal class sets on both sides, disjoint
    /// session sets, contiguous labels below `num_classes`.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(AmclError::Dataset(
                "a split needs at least 2 classes".into(),
            ));
        }
        for img in self.train.iter().chain(&self.test) {
            img.validate()?;
            if img.class_id >= self.num_classes {
                return Err(AmclError::Dataset(format!(
                    "class_id {} out of range (num_classes {})",
                    img.class_id, self.num_classes
                )));
            }
        }
        let sessions_train: std::collections::BTreeSet<u8> =
            self.train.iter().map(|i| i.session_id).collect();
        let sessions_test: std::collections::BTreeSet<u8> =
            self.test.iter().map(|i| i.session_id).collect();
        if sessions_train.intersection(&sessions_test).next().is_some() {
            return Err(AmclError::Dataset(
                "train and test share a capture session".into(),
            ));
        }
        let classes = |imgs: &[Image]| -> std::collections::BTreeSet<usize> {
            imgs.iter().map(|i| i.class_id).collect()
        };
        if classes(&self.train) != classes(&self.test) {
            return Err(AmclError::Dataset(
                "train and test class sets differ".into(),
            ));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "{} classes, {} train / {} test images",
            self.num_classes,
            self.train.len(),
            self.test.len()
        )
    }
}

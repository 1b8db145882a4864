use std::path::{Path, PathBuf};

use crate::error::{validation, Result};
use crate::model::ImageTensor;

use super::record::{ImageKind, ImageRef};

/// Resolves image references against a root directory: synthetic scenes live at
/// `<root>/images/<ref>.ppm`, file references are paths relative to the root.
#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ImageStore { root: root.into() }
    }

    pub fn path_of(&self, r: &ImageRef) -> PathBuf {
        match r.kind {
            ImageKind::Synthetic => self.root.join("images").join(format!("{}.ppm", r.reference)),
            ImageKind::File => self.root.join(Path::new(&r.reference)),
        }
    }

    /// RGB8 pixels; the decoded size must match the size stated in the reference.
    pub fn load_rgb(&self, r: &ImageRef) -> Result<Vec<u8>> {
        let img = image::open(self.path_of(r))?.to_rgb8();
        if img.dimensions() != (r.width, r.height) {
            return Err(validation(format!(
                "image {} is {}x{}, records say {}x{}",
                r.reference,
                img.width(),
                img.height(),
                r.width,
                r.height
            )));
        }
        Ok(img.into_raw())
    }

    pub fn load_tensor(&self, r: &ImageRef, side: usize) -> Result<ImageTensor> {
        ImageTensor::from_rgb8(&self.load_rgb(r)?, r.width, r.height, side)
    }
}

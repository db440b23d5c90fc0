//! Image/mask pairs under `images/` and `masks/`, matched by file stem.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::raster::{read_raster, save_image, save_mask, RasterKind};
use crate::train::Sample;

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// `(image, mask)` in stem order.
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub num_classes: usize,
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if out.insert(stem.clone(), path).is_some() {
            return Err(Error::Dataset(format!("stem `{stem}` appears twice in {}", dir.display())));
        }
    }
    Ok(out)
}

impl DatasetManifest {
    /// Pairs every image with its mask; any unmatched stem is an error.
    pub fn scan(root: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let images = stems(&root.join(IMAGE_DIR), &["ppm", "pgm"])?;
        let masks = stems(&root.join(MASK_DIR), &["pgm"])?;
        if let Some(s) = images.keys().find(|s| !masks.contains_key(*s)) {
            return Err(Error::Dataset(format!("image `{s}` has no mask")));
        }
        if let Some(s) = masks.keys().find(|s| !images.contains_key(*s)) {
            return Err(Error::Dataset(format!("mask `{s}` has no image")));
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pairs = images.into_iter().map(|(s, img)| (img, masks[&s].clone())).collect();
        Ok(DatasetManifest { root, pairs, num_classes })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reads every pair, checking sizes and label range.
    pub fn load(&self) -> Result<Vec<Sample>> {
        self.pairs
            .iter()
            .map(|(img, mask)| {
                let image = read_raster(img)?;
                let m = read_raster(mask)?;
                if m.kind != RasterKind::Gray {
                    return Err(Error::Dataset(format!("{}: masks must be P5", mask.display())));
                }
                if (image.width, image.height) != (m.width, m.height) {
                    return Err(Error::Dataset(format!(
                        "{}: image {}x{} but mask {}x{}",
                        img.display(),
                        image.height,
                        image.width,
                        m.height,
                        m.width
                    )));
                }
                if let Some(&label) = m.pixels.iter().find(|&&l| l as usize >= self.num_classes) {
                    return Err(Error::LabelOutOfRange { label: label as usize, classes: self.num_classes });
                }
                Ok(Sample { image: image.to_image(), mask: m.pixels, height: m.height, width: m.width })
            })
            .collect()
    }

    /// Writes samples as `images/NNNN.ppm` and `masks/NNNN.pgm`.
    pub fn write(root: impl AsRef<Path>, samples: &[Sample], num_classes: usize) -> Result<Self> {
        let root = root.as_ref();
        fs::create_dir_all(root.join(IMAGE_DIR))?;
        fs::create_dir_all(root.join(MASK_DIR))?;
        for (i, s) in samples.iter().enumerate() {
            save_image(root.join(IMAGE_DIR).join(format!("{i:04}.ppm")), &s.image)?;
            save_mask(root.join(MASK_DIR).join(format!("{i:04}.pgm")), &s.mask, s.height, s.width)?;
        }
        Self::scan(root, num_classes)
    }
}

//! Dataset directories and class statistics.
//!
//! A dataset directory holds `imageA.png`, `maskA.png` (labeled source),
//! `imageB.png`, `maskB.png` (target) and a key-value `manifest.txt`.

use std::path::{Path, PathBuf};

use crate::kv::KeyValues;
use crate::pngio::{load_image, load_mask, save_image, save_mask};
use crate::raster::{Class, LabelMask, RasterImage};
use crate::synth::{SynthConfig, SynthPair};
use crate::{CoreError, Result};

pub const SOURCE_IMAGE: &str = "imageA.png";
pub const SOURCE_MASK: &str = "maskA.png";
pub const TARGET_IMAGE: &str = "imageB.png";
pub const TARGET_MASK: &str = "maskB.png";
pub const MANIFEST: &str = "manifest.txt";

/// Pipeline stage requesting data; only evaluation may see target labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Adapt,
    Finetune,
    Predict,
    Eval,
}

/// Writes a synthetic pair and its generating configuration.
pub fn write_synth_dataset(dir: &Path, cfg: &SynthConfig, pair: &SynthPair) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_image(&dir.join(SOURCE_IMAGE), &pair.a.image)?;
    save_mask(&dir.join(SOURCE_MASK), &pair.a.mask)?;
    save_image(&dir.join(TARGET_IMAGE), &pair.b.image)?;
    save_mask(&dir.join(TARGET_MASK), &pair.b.mask)?;
    std::fs::write(dir.join(MANIFEST), cfg.to_kv().to_text())?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        for name in [SOURCE_IMAGE, SOURCE_MASK, TARGET_IMAGE] {
            if !root.join(name).is_file() {
                return Err(CoreError::invalid(format!("dataset {} lacks {name}", root.display())));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Result<Option<KeyValues>> {
        let path = self.root.join(MANIFEST);
        if !path.is_file() {
            return Ok(None);
        }
        KeyValues::parse(&std::fs::read_to_string(path)?).map(Some)
    }

    pub fn source_image(&self) -> Result<RasterImage> {
        load_image(&self.root.join(SOURCE_IMAGE))
    }

    pub fn source_mask(&self) -> Result<LabelMask> {
        let mask = load_mask(&self.root.join(SOURCE_MASK))?;
        let img = self.source_image()?;
        if (mask.height(), mask.width()) != (img.height(), img.width()) {
            return Err(CoreError::invalid(format!(
                "{SOURCE_MASK} is {}x{} but {SOURCE_IMAGE} is {}x{}",
                mask.height(),
                mask.width(),
                img.height(),
                img.width()
            )));
        }
        Ok(mask)
    }

    pub fn target_image(&self) -> Result<RasterImage> {
        load_image(&self.root.join(TARGET_IMAGE))
    }

    /// Target labels, refused for every stage but evaluation.
    pub fn target_mask(&self, stage: Stage) -> Result<LabelMask> {
        if stage != Stage::Eval {
            return Err(CoreError::TargetMaskForbidden(format!("{stage:?} stage")));
        }
        load_mask(&self.root.join(TARGET_MASK))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    /// Pixel share per class id, in percent.
    pub percent: [f64; Class::COUNT],
    pub patches: usize,
    pub pixels: u64,
}

impl DatasetStats {
    pub fn to_text(&self) -> String {
        let mut out = format!("patches {}\npixels {}\n", self.patches, self.pixels);
        for class in Class::ALL {
            out += &format!("{} {:.2}%\n", class.name(), self.percent[class.id() as usize]);
        }
        out
    }
}

pub fn dataset_stats(masks: &[LabelMask]) -> Result<DatasetStats> {
    if masks.is_empty() {
        return Err(CoreError::invalid("dataset statistics need at least one mask"));
    }
    let mut counts = [0u64; Class::COUNT];
    for m in masks {
        for &id in m.ids() {
            counts[id as usize] += 1;
        }
    }
    let pixels: u64 = counts.iter().sum();
    Ok(DatasetStats {
        percent: counts.map(|c| 100.0 * c as f64 / pixels.max(1) as f64),
        patches: masks.len(),
        pixels,
    })
}

//! Adaptation back-ends behind one trait, selected by name.

use std::io::Write;

use crate::adversary::{train_colormapgan_logged, GanTrainConfig};
use crate::baselines::{GrayWorld, HistogramMatch};
use crate::colormap::ColorMap;
use crate::raster::RasterImage;
use crate::tiling::tile;
use crate::{CoreError, Result};

/// A per-color recoloring.
pub trait ColorTransform {
    fn map_color(&self, rgb: [u8; 3]) -> [u8; 3];

    fn transform_image(&self, image: &RasterImage) -> RasterImage {
        image.map_pixels(|p| self.map_color(p))
    }
}

impl ColorTransform for ColorMap {
    fn map_color(&self, rgb: [u8; 3]) -> [u8; 3] {
        ColorMap::map_color(self, rgb)
    }

    fn transform_image(&self, image: &RasterImage) -> RasterImage {
        ColorMap::transform_image(self, image)
    }
}

impl ColorTransform for HistogramMatch {
    fn map_color(&self, rgb: [u8; 3]) -> [u8; 3] {
        HistogramMatch::map_color(self, rgb)
    }
}

impl ColorTransform for GrayWorld {
    fn map_color(&self, rgb: [u8; 3]) -> [u8; 3] {
        GrayWorld::map_color(self, rgb)
    }
}

/// Settings shared by every back-end; each reads what it needs.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSettings {
    pub gan: GanTrainConfig,
    /// Side of the adversarial training patches.
    pub patch_size: usize,
    pub overlap: usize,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        AdaptSettings {
            gan: GanTrainConfig::default(),
            patch_size: 256,
            overlap: 32,
        }
    }
}

/// A named file produced by fitting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub file_name: String,
    pub bytes: Vec<u8>,
}

pub trait AdaptationMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;

    /// Fits on labeled-source and unlabeled-target images.
    fn fit(
        &self,
        source: &[RasterImage],
        target: &[RasterImage],
        settings: &AdaptSettings,
        log: &mut dyn Write,
    ) -> Result<Box<dyn FittedAdaptation>>;
}

pub trait FittedAdaptation {
    /// Source image as the segmenter should see it during fine-tuning.
    fn recolor_source(&self, image: &RasterImage) -> Result<RasterImage>;

    /// Target image as the segmenter should see it at prediction time.
    fn prepare_target(&self, image: &RasterImage) -> Result<RasterImage> {
        Ok(image.clone())
    }

    fn artifacts(&self) -> Vec<Artifact>;
}

struct ColorMapGan;
struct FittedColorMap(ColorMap);

impl AdaptationMethod for ColorMapGan {
    fn name(&self) -> &'static str {
        "colormapgan"
    }

    fn summary(&self) -> &'static str {
        "per-color affine map trained against a PatchGAN critic"
    }

    fn fit(
        &self,
        source: &[RasterImage],
        target: &[RasterImage],
        settings: &AdaptSettings,
        log: &mut dyn Write,
    ) -> Result<Box<dyn FittedAdaptation>> {
        let patches = |images: &[RasterImage]| -> Result<Vec<RasterImage>> {
            let mut out = Vec::new();
            for img in images {
                out.extend(tile(img, settings.patch_size, settings.overlap)?.1);
            }
            Ok(out)
        };
        let outcome = train_colormapgan_logged(&patches(source)?, &patches(target)?, &settings.gan, log)?;
        Ok(Box::new(FittedColorMap(outcome.map)))
    }
}

impl FittedAdaptation for FittedColorMap {
    fn recolor_source(&self, image: &RasterImage) -> Result<RasterImage> {
        Ok(self.0.transform_image(image))
    }

    fn artifacts(&self) -> Vec<Artifact> {
        vec![Artifact {
            file_name: "colormap.cmap".into(),
            bytes: self.0.to_bytes(),
        }]
    }
}

struct HistMatch;

impl AdaptationMethod for HistMatch {
    fn name(&self) -> &'static str {
        "histmatch"
    }

    fn summary(&self) -> &'static str {
        "per-channel histogram matching to the pooled target"
    }

    fn fit(
        &self,
        source: &[RasterImage],
        target: &[RasterImage],
        _: &AdaptSettings,
        _: &mut dyn Write,
    ) -> Result<Box<dyn FittedAdaptation>> {
        Ok(Box::new(HistogramMatch::fit(source, target)?))
    }
}

impl FittedAdaptation for HistogramMatch {
    fn recolor_source(&self, image: &RasterImage) -> Result<RasterImage> {
        Ok(self.transform_image(image))
    }

    fn artifacts(&self) -> Vec<Artifact> {
        vec![Artifact {
            file_name: "levels.csv".into(),
            bytes: self.to_csv().into_bytes(),
        }]
    }
}

/// Gray world standardizes both domains, each image with its own gains.
struct GrayWorldMethod;
struct FittedGrayWorld;

impl AdaptationMethod for GrayWorldMethod {
    fn name(&self) -> &'static str {
        "grayworld"
    }

    fn summary(&self) -> &'static str {
        "gray-world correction of source and target images"
    }

    fn fit(
        &self,
        _: &[RasterImage],
        _: &[RasterImage],
        _: &AdaptSettings,
        _: &mut dyn Write,
    ) -> Result<Box<dyn FittedAdaptation>> {
        Ok(Box::new(FittedGrayWorld))
    }
}

impl FittedAdaptation for FittedGrayWorld {
    fn recolor_source(&self, image: &RasterImage) -> Result<RasterImage> {
        Ok(GrayWorld::fit(image)?.transform_image(image))
    }

    fn prepare_target(&self, image: &RasterImage) -> Result<RasterImage> {
        self.recolor_source(image)
    }

    fn artifacts(&self) -> Vec<Artifact> {
        Vec::new()
    }
}

struct NoAdaptation;
struct Passthrough;

impl AdaptationMethod for NoAdaptation {
    fn name(&self) -> &'static str {
        "none"
    }

    fn summary(&self) -> &'static str {
        "images pass through unchanged"
    }

    fn fit(
        &self,
        _: &[RasterImage],
        _: &[RasterImage],
        _: &AdaptSettings,
        _: &mut dyn Write,
    ) -> Result<Box<dyn FittedAdaptation>> {
        Ok(Box::new(Passthrough))
    }
}

impl FittedAdaptation for Passthrough {
    fn recolor_source(&self, image: &RasterImage) -> Result<RasterImage> {
        Ok(image.clone())
    }

    fn artifacts(&self) -> Vec<Artifact> {
        Vec::new()
    }
}

/// Adaptation methods by name.
pub struct Registry {
    methods: Vec<Box<dyn AdaptationMethod>>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry { methods: Vec::new() }
    }

    /// colormapgan, histmatch, grayworld and none.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(ColorMapGan));
        r.register(Box::new(HistMatch));
        r.register(Box::new(GrayWorldMethod));
        r.register(Box::new(NoAdaptation));
        r
    }

    /// Adds a method, replacing any existing one of the same name.
    pub fn register(&mut self, method: Box<dyn AdaptationMethod>) {
        self.methods.retain(|m| m.name() != method.name());
        self.methods.push(method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn AdaptationMethod> {
        self.methods
            .iter()
            .find(|m| m.name() == name)
            .map(|m| m.as_ref())
            .ok_or_else(|| CoreError::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.iter().map(|m| m.name()).collect()
    }
}

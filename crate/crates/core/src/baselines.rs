//! Classical color alignment: per-channel histogram matching and gray world.

use crate::raster::RasterImage;
use crate::{CoreError, Result};

/// Pixel counts per 8-bit level for one channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelHistogram {
    pub counts: [u64; 256],
}

impl ChannelHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Cumulative counts; `cumulative()[v]` counts levels `<= v`.
    pub fn cumulative(&self) -> [u64; 256] {
        let mut out = [0u64; 256];
        let mut acc = 0;
        for (o, c) in out.iter_mut().zip(&self.counts) {
            acc += c;
            *o = acc;
        }
        out
    }

    pub fn cdf(&self) -> [f64; 256] {
        let total = self.total().max(1) as f64;
        self.cumulative().map(|c| c as f64 / total)
    }
}

/// Histograms of the three channels pooled over every image of the set.
pub fn channel_histograms(images: &[RasterImage]) -> [ChannelHistogram; 3] {
    let mut counts = [[0u64; 256]; 3];
    for img in images {
        for px in img.pixels() {
            for c in 0..3 {
                counts[c][px[c] as usize] += 1;
            }
        }
    }
    counts.map(|counts| ChannelHistogram { counts })
}

/// Kolmogorov-Smirnov distance between two channel histograms.
pub fn ks_distance(a: &ChannelHistogram, b: &ChannelHistogram) -> f64 {
    a.cdf()
        .iter()
        .zip(b.cdf().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Per-channel level remapping fitted by CDF matching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistogramMatch {
    pub levels: [[u8; 256]; 3],
}

impl HistogramMatch {
    /// Level `v` maps to the smallest target level whose CDF reaches the
    /// source CDF at `v`. Comparisons are exact integer cross-products.
    pub fn fit(source: &[RasterImage], target: &[RasterImage]) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(CoreError::invalid(
                "histogram matching needs non-empty source and target sets",
            ));
        }
        let hs = channel_histograms(source);
        let ht = channel_histograms(target);
        let mut levels = [[0u8; 256]; 3];
        for c in 0..3 {
            let (cs, ct) = (hs[c].cumulative(), ht[c].cumulative());
            let (ns, nt) = (cs[255] as u128, ct[255] as u128);
            let mut u = 0usize;
            for v in 0..256 {
                // source CDFs are non-decreasing, so the search resumes at u
                while u < 255 && (ct[u] as u128) * ns < (cs[v] as u128) * nt {
                    u += 1;
                }
                levels[c][v] = u as u8;
            }
        }
        Ok(HistogramMatch { levels })
    }

    pub fn map_color(&self, rgb: [u8; 3]) -> [u8; 3] {
        [0, 1, 2].map(|c| self.levels[c][rgb[c] as usize])
    }

    pub fn transform_image(&self, image: &RasterImage) -> RasterImage {
        image.map_pixels(|p| self.map_color(p))
    }

    /// Three lines of 256 comma-separated levels (red, green, blue).
    pub fn to_csv(&self) -> String {
        self.levels
            .iter()
            .map(|row| row.iter().map(u8::to_string).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != 3 {
            return Err(CoreError::invalid(format!(
                "level map needs 3 rows, got {}",
                rows.len()
            )));
        }
        let mut levels = [[0u8; 256]; 3];
        for (c, row) in rows.iter().enumerate() {
            let values: Vec<u8> = row
                .split(',')
                .map(|v| v.trim().parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CoreError::invalid(format!("level map row {c}: {e}")))?;
            if values.len() != 256 {
                return Err(CoreError::invalid(format!(
                    "level map row {c} has {} entries",
                    values.len()
                )));
            }
            levels[c].copy_from_slice(&values);
        }
        Ok(HistogramMatch { levels })
    }
}

/// Fits the level map and recolors every source image with it.
pub fn histogram_match(source: &[RasterImage], target: &[RasterImage]) -> Result<(HistogramMatch, Vec<RasterImage>)> {
    let fit = HistogramMatch::fit(source, target)?;
    let recolored = source.iter().map(|img| fit.transform_image(img)).collect();
    Ok((fit, recolored))
}

/// Gray-world channel gains: each channel is scaled so its mean equals the
/// mean of the three channel means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrayWorld {
    pub gains: [f64; 3],
}

impl GrayWorld {
    pub fn fit(image: &RasterImage) -> Result<Self> {
        let means = image.channel_means();
        if let Some(c) = means.iter().position(|&m| m == 0.0) {
            return Err(CoreError::invalid(format!(
                "channel {c} has mean 0; gray-world gain undefined"
            )));
        }
        let gray = means.iter().sum::<f64>() / 3.0;
        Ok(GrayWorld {
            gains: means.map(|m| gray / m),
        })
    }

    pub fn map_color(&self, rgb: [u8; 3]) -> [u8; 3] {
        [0, 1, 2].map(|c| (rgb[c] as f64 * self.gains[c]).round_ties_even().clamp(0.0, 255.0) as u8)
    }

    pub fn transform_image(&self, image: &RasterImage) -> RasterImage {
        image.map_pixels(|p| self.map_color(p))
    }
}

/// Corrects `image` with its own gray-world gains.
pub fn gray_world(image: &RasterImage) -> Result<(RasterImage, [f64; 3])> {
    let fit = GrayWorld::fit(image)?;
    Ok((fit.transform_image(image), fit.gains))
}

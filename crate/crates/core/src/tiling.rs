//! Decomposition of a raster into fixed-size overlapping patches and back.

use cmgan_nn::Tensor;

use crate::raster::{LabelMask, RasterImage};
use crate::{CoreError, Result};

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_OVERLAP: usize = 32;

/// Patch origins covering a `height x width` raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    height: usize,
    width: usize,
    size: usize,
    overlap: usize,
    origins: Vec<(usize, usize)>,
}

/// Origins along one axis: multiples of the stride, the last clamped so the
/// final patch ends exactly at the edge.
pub fn axis_origins(extent: usize, size: usize, overlap: usize) -> Vec<usize> {
    let stride = size - overlap;
    let last = extent - size;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

impl TileGrid {
    pub fn new(height: usize, width: usize, size: usize, overlap: usize) -> Result<Self> {
        if size == 0 {
            return Err(CoreError::invalid("patch size must be positive"));
        }
        if overlap >= size {
            return Err(CoreError::invalid(format!(
                "overlap {overlap} must be smaller than patch size {size}"
            )));
        }
        if size > height || size > width {
            return Err(CoreError::invalid(format!(
                "raster {height}x{width} is smaller than patch size {size}"
            )));
        }
        let rows = axis_origins(height, size, overlap);
        let cols = axis_origins(width, size, overlap);
        let origins = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
        Ok(TileGrid {
            height,
            width,
            size,
            overlap,
            origins,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    /// `(row, col)` origins in row-major patch order.
    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        if (height, width) != (self.height, self.width) {
            return Err(CoreError::invalid(format!(
                "raster {height}x{width} does not match grid {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn check_patches(&self, count: usize, mut dims: impl Iterator<Item = (usize, usize)>) -> Result<()> {
        if count != self.origins.len() {
            return Err(CoreError::invalid(format!(
                "grid has {} patches, got {count}",
                self.origins.len()
            )));
        }
        if let Some((h, w)) = dims.find(|&d| d != (self.size, self.size)) {
            return Err(CoreError::invalid(format!(
                "patch {h}x{w} does not match grid size {}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn extract(&self, image: &RasterImage) -> Result<Vec<RasterImage>> {
        self.check_extent(image.height(), image.width())?;
        Ok(self
            .origins
            .iter()
            .map(|&(r, c)| image.crop(r, c, self.size, self.size))
            .collect())
    }

    pub fn extract_mask(&self, mask: &LabelMask) -> Result<Vec<LabelMask>> {
        self.check_extent(mask.height(), mask.width())?;
        Ok(self
            .origins
            .iter()
            .map(|&(r, c)| mask.crop(r, c, self.size, self.size))
            .collect())
    }
}

/// Splits `image` into a grid of `size x size` patches overlapping by `overlap`.
pub fn tile(image: &RasterImage, size: usize, overlap: usize) -> Result<(TileGrid, Vec<RasterImage>)> {
    let grid = TileGrid::new(image.height(), image.width(), size, overlap)?;
    let patches = grid.extract(image)?;
    Ok((grid, patches))
}

/// Reassembles patches, requiring overlapping pixels to agree exactly.
pub fn stitch_image(grid: &TileGrid, patches: &[RasterImage]) -> Result<RasterImage> {
    grid.check_patches(patches.len(), patches.iter().map(|p| (p.height(), p.width())))?;
    let mut out = RasterImage::filled(grid.height, grid.width, [0, 0, 0]);
    let mut written = vec![false; grid.height * grid.width];
    for (&(r0, c0), patch) in grid.origins.iter().zip(patches) {
        for r in 0..grid.size {
            for c in 0..grid.size {
                let (row, col) = (r0 + r, c0 + c);
                let px = patch.pixel(r, c);
                let slot = row * grid.width + col;
                if written[slot] {
                    if out.pixel(row, col) != px {
                        return Err(CoreError::Conflict {
                            what: "overlapping patches disagree",
                            row,
                            col,
                        });
                    }
                } else {
                    out.set_pixel(row, col, px);
                    written[slot] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Averages per-pixel scores over every covering patch.
///
/// Each patch is `(channels, size, size)`; the result is `(channels, height, width)`.
pub fn stitch_scores(grid: &TileGrid, patches: &[Tensor]) -> Result<Tensor> {
    let channels = match patches.first().map(|p| p.shape()) {
        Some(&[c, _, _]) => c,
        _ => return Err(CoreError::invalid("score patches must be (channels, size, size)")),
    };
    if let Some(bad) = patches
        .iter()
        .find(|p| p.shape().len() != 3 || p.shape()[0] != channels)
    {
        return Err(CoreError::invalid(format!(
            "score patch shape {:?} is inconsistent",
            bad.shape()
        )));
    }
    grid.check_patches(patches.len(), patches.iter().map(|p| (p.shape()[1], p.shape()[2])))?;
    let (h, w, s) = (grid.height, grid.width, grid.size);
    let mut sums = vec![0.0; channels * h * w];
    let mut counts = vec![0u32; h * w];
    for (&(r0, c0), patch) in grid.origins.iter().zip(patches) {
        for r in 0..s {
            for c in 0..s {
                counts[(r0 + r) * w + c0 + c] += 1;
            }
        }
        for ch in 0..channels {
            for r in 0..s {
                let src = &patch.data()[(ch * s + r) * s..(ch * s + r + 1) * s];
                let dst = &mut sums[(ch * h + r0 + r) * w + c0..(ch * h + r0 + r) * w + c0 + s];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
    for ch in 0..channels {
        for (i, &n) in counts.iter().enumerate() {
            sums[ch * h * w + i] /= n as f64;
        }
    }
    Ok(Tensor::from_vec(&[channels, h, w], sums)?)
}

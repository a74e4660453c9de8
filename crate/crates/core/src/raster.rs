//! 8-bit RGB rasters and per-pixel class masks.

use crate::{CoreError, Result};

/// Semantic classes; the discriminant is the id stored in mask files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Building = 1,
    Road = 2,
    Tree = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Background, Class::Building, Class::Road, Class::Tree];
    pub const FOREGROUND: [Class; 3] = [Class::Building, Class::Road, Class::Tree];
    pub const COUNT: usize = 4;

    pub fn from_id(id: u8) -> Option<Class> {
        Class::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Building => "building",
            Class::Road => "road",
            Class::Tree => "tree",
        }
    }

    /// Legend color used for rendered masks.
    pub fn legend(self) -> [u8; 3] {
        match self {
            Class::Background => [0, 0, 0],
            Class::Building => [255, 0, 0],
            Class::Road => [255, 255, 255],
            Class::Tree => [0, 255, 0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::invalid(format!("image extent {height}x{width} is empty")));
        }
        if data.len() != height * width * 3 {
            return Err(CoreError::invalid(format!(
                "{height}x{width} RGB image needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(RasterImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data).expect("non-empty extent")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self::new(height, width, data).expect("non-empty extent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Applies `f` to every pixel color.
    pub fn map_pixels(&self, mut f: impl FnMut([u8; 3]) -> [u8; 3]) -> RasterImage {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.pixels() {
            data.extend_from_slice(&f(p));
        }
        RasterImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> RasterImage {
        assert!(
            row + height <= self.height && col + width <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(height * width * 3);
        for r in row..row + height {
            let start = (r * self.width + col) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        RasterImage { height, width, data }
    }

    /// Per-channel mean sample value.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for p in self.pixels() {
            for c in 0..3 {
                sums[c] += p[c] as u64;
            }
        }
        sums.map(|s| s as f64 / self.pixel_count() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::invalid(format!("mask extent {height}x{width} is empty")));
        }
        if data.len() != height * width {
            return Err(CoreError::invalid(format!(
                "{height}x{width} mask needs {} ids, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&id| Class::from_id(id).is_none()) {
            return Err(CoreError::invalid(format!(
                "class id {} at row {}, col {} is outside 0..=3",
                data[pos],
                pos / width,
                pos % width
            )));
        }
        Ok(LabelMask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: Class) -> Self {
        Self::new(height, width, vec![class.id(); height * width]).expect("non-empty extent")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Class) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c).id());
            }
        }
        LabelMask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Raw class ids, row-major.
    pub fn ids(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Class {
        Class::from_id(self.data[row * self.width + col]).expect("validated id")
    }

    pub fn set(&mut self, row: usize, col: usize, class: Class) {
        self.data[row * self.width + col] = class.id();
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> LabelMask {
        assert!(
            row + height <= self.height && col + width <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        LabelMask { height, width, data }
    }

    /// Rendering with the class legend colors.
    pub fn colorize(&self) -> RasterImage {
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &id in &self.data {
            data.extend_from_slice(&Class::from_id(id).expect("validated id").legend());
        }
        RasterImage::new(self.height, self.width, data).expect("same extent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_ids_and_extents() {
        assert!(LabelMask::new(1, 2, vec![0, 4]).is_err());
        assert!(RasterImage::new(0, 3, vec![]).is_err());
        assert!(RasterImage::new(1, 1, vec![1, 2]).is_err());
    }

    #[test]
    fn all_tree_mask_renders_green() {
        let m = LabelMask::filled(3, 2, Class::Tree);
        assert!(m.colorize().pixels().all(|p| p == [0, 255, 0]));
    }

    #[test]
    fn crop_picks_window() {
        let img = RasterImage::from_fn(4, 4, |r, c| [r as u8, c as u8, 0]);
        let sub = img.crop(1, 2, 2, 2);
        assert_eq!(sub.pixel(0, 0), [1, 2, 0]);
        assert_eq!(sub.pixel(1, 1), [2, 3, 0]);
    }
}

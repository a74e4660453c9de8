//! Sparse per-color affine lookup table: the generator.
//!
//! Every 24-bit color owns a scale `w` and a shift `k` (one per channel). A
//! pixel with color `c` and normalized value `x` maps to
//! `clamp(x * w[c] + k[c], -1, 1)`. Colors without an entry use the identity
//! `w = 1, k = 0`, so an empty map reproduces its input exactly.

use rustc_hash::FxHashMap;
use std::io::Write;
use std::path::Path;

use cmgan_nn::{adam_update, AdamConfig, Tensor};

use crate::raster::RasterImage;
use crate::{CoreError, Result};

pub const COLOR_COUNT: u32 = 1 << 24;

/// `r * 65536 + g * 256 + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ColorIndex(u32);

impl ColorIndex {
    pub fn from_rgb([r, g, b]: [u8; 3]) -> Self {
        ColorIndex(((r as u32) << 16) | ((g as u32) << 8) | b as u32)
    }

    pub fn from_components(r: u32, g: u32, b: u32) -> Result<Self> {
        if r > 255 || g > 255 || b > 255 {
            return Err(CoreError::invalid(format!(
                "color component out of range in ({r}, {g}, {b})"
            )));
        }
        Ok(ColorIndex(r * 65536 + g * 256 + b))
    }

    pub fn from_raw(value: u32) -> Result<Self> {
        if value >= COLOR_COUNT {
            return Err(CoreError::invalid(format!("color index {value} exceeds 24 bits")));
        }
        Ok(ColorIndex(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }

    pub fn rgb(self) -> [u8; 3] {
        [(self.0 >> 16) as u8, (self.0 >> 8) as u8, self.0 as u8]
    }
}

pub fn normalize_value(v: u8) -> f64 {
    (v as f64 - 127.5) / 127.5
}

/// Inverse of [`normalize_value`] with flooring; `p` must lie in `[-1, 1]`.
pub fn denormalize_value(p: f64) -> u8 {
    debug_assert!((-1.0..=1.0).contains(&p));
    (p * 127.5 + 127.5).floor() as u8
}

/// 8-bit image to a `(1, 3, height, width)` tensor with values in `[-1, 1]`.
pub fn normalize(image: &RasterImage) -> Tensor {
    let n = image.pixel_count();
    let mut data = vec![0.0; 3 * n];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = normalize_value(px[c]);
        }
    }
    Tensor::from_vec(&[1, 3, image.height(), image.width()], data).expect("3 planes")
}

/// `(1, 3, height, width)` tensor in `[-1, 1]` back to an 8-bit image.
pub fn denormalize(patch: &Tensor) -> Result<RasterImage> {
    let Some([1, 3, h, w]) = patch.dims4() else {
        return Err(CoreError::invalid(format!(
            "expected a (1, 3, h, w) patch, got {:?}",
            patch.shape()
        )));
    };
    let n = h * w;
    let mut data = vec![0u8; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let p = patch.data()[c * n + i];
            if !(-1.0..=1.0).contains(&p) {
                return Err(CoreError::invalid(format!(
                    "value {p} at channel {c}, row {}, col {} is outside [-1, 1]",
                    i / w,
                    i % w
                )));
            }
            data[3 * i + c] = denormalize_value(p);
        }
    }
    RasterImage::new(h, w, data)
}

/// Scale and shift for one color, in normalized units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: [1.0; 3],
        shift: [0.0; 3],
    };

    fn is_finite(&self) -> bool {
        self.scale.iter().chain(&self.shift).all(|v| v.is_finite())
    }

    #[inline]
    fn pre_clamp(&self, x: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|c| x[c] * self.scale[c] + self.shift[c])
    }

    /// Clamped normalized output for normalized input `x`.
    #[inline]
    pub fn eval(&self, x: [f64; 3]) -> [f64; 3] {
        self.pre_clamp(x).map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn map_rgb(&self, rgb: [u8; 3]) -> [u8; 3] {
        self.eval(rgb.map(normalize_value)).map(denormalize_value)
    }
}

impl Default for Affine {
    fn default() -> Self {
        Affine::IDENTITY
    }
}

/// Distinct colors of a patch and, per pixel, the slot of its color.
#[derive(Clone, Debug)]
pub struct ColorGroups {
    /// Ascending, duplicate free.
    pub distinct: Vec<ColorIndex>,
    pub slot_of_pixel: Vec<u32>,
}

/// Groups pixels by color with a three-pass radix sort, linear in pixel count.
pub fn group_colors(image: &RasterImage) -> ColorGroups {
    let codes: Vec<u32> = image.pixels().map(|p| ColorIndex::from_rgb(p).0).collect();
    let n = codes.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut scratch = vec![0u32; n];
    for shift in [0u32, 8, 16] {
        let mut counts = [0usize; 257];
        for &i in &order {
            counts[((codes[i as usize] >> shift) & 0xff) as usize + 1] += 1;
        }
        for d in 0..256 {
            counts[d + 1] += counts[d];
        }
        for &i in &order {
            let digit = ((codes[i as usize] >> shift) & 0xff) as usize;
            scratch[counts[digit]] = i;
            counts[digit] += 1;
        }
        std::mem::swap(&mut order, &mut scratch);
    }
    let mut distinct = Vec::new();
    let mut slot_of_pixel = vec![0u32; n];
    for &i in &order {
        let code = codes[i as usize];
        if distinct.last().map(|c: &ColorIndex| c.0) != Some(code) {
            distinct.push(ColorIndex(code));
        }
        slot_of_pixel[i as usize] = (distinct.len() - 1) as u32;
    }
    ColorGroups {
        distinct,
        slot_of_pixel,
    }
}

/// Sorted distinct color indices present in `patch`.
pub fn touched_indices(patch: &RasterImage) -> Vec<ColorIndex> {
    group_colors(patch).distinct
}

/// Gradient of a scalar loss with respect to the entries a patch touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGrad {
    pub indices: Vec<ColorIndex>,
    /// `[dw_r, dw_g, dw_b, dk_r, dk_g, dk_b]` per index.
    pub grads: Vec<[f64; 6]>,
}

/// Forward result of [`ColorMap::apply`] plus what its backward pass needs.
#[derive(Clone, Debug)]
pub struct ApplyTrace {
    output: Tensor,
    groups: ColorGroups,
    inputs: Vec<[f64; 3]>,
    affines: Vec<Affine>,
}

impl ApplyTrace {
    /// Clamped normalized output, `(1, 3, height, width)`.
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn touched(&self) -> &[ColorIndex] {
        &self.groups.distinct
    }

    /// Chains `grad_output` (same shape as the output) back onto the scale
    /// and shift of every touched color. Elements clamped from outside
    /// `[-1, 1]` pass no gradient.
    pub fn backward(&self, grad_output: &Tensor) -> Result<SparseGrad> {
        if grad_output.shape() != self.output.shape() {
            return Err(CoreError::invalid(format!(
                "gradient shape {:?} does not match output {:?}",
                grad_output.shape(),
                self.output.shape()
            )));
        }
        let slots = self.groups.distinct.len();
        let n = self.groups.slot_of_pixel.len();
        let mut sums = vec![[0.0f64; 3]; slots];
        let g = grad_output.data();
        for (i, &slot) in self.groups.slot_of_pixel.iter().enumerate() {
            let s = &mut sums[slot as usize];
            s[0] += g[i];
            s[1] += g[n + i];
            s[2] += g[2 * n + i];
        }
        let grads = sums
            .iter()
            .enumerate()
            .map(|(slot, sum)| {
                let x = self.inputs[slot];
                let pre = self.affines[slot].pre_clamp(x);
                let mut out = [0.0; 6];
                for c in 0..3 {
                    if (-1.0..=1.0).contains(&pre[c]) {
                        out[c] = x[c] * sum[c];
                        out[3 + c] = sum[c];
                    }
                }
                out
            })
            .collect();
        Ok(SparseGrad {
            indices: self.groups.distinct.clone(),
            grads,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColorMap {
    entries: FxHashMap<ColorIndex, Affine>,
}

const MAGIC: &[u8; 4] = b"CMAP";
const FORMAT_VERSION: u16 = 1;
const ENTRY_BYTES: usize = 4 + 6 * 4;
const HEADER_BYTES: usize = 4 + 2 + 4;

impl ColorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: ColorIndex) -> Affine {
        self.entries.get(&index).copied().unwrap_or_default()
    }

    pub fn contains(&self, index: ColorIndex) -> bool {
        self.entries.contains_key(&index)
    }

    pub fn insert(&mut self, index: ColorIndex, affine: Affine) -> Result<()> {
        if !affine.is_finite() {
            return Err(CoreError::invalid(format!("non-finite entry for color {}", index.0)));
        }
        self.entries.insert(index, affine);
        Ok(())
    }

    /// Entries in ascending index order.
    pub fn entries_sorted(&self) -> Vec<(ColorIndex, Affine)> {
        let mut out: Vec<_> = self.entries.iter().map(|(k, v)| (*k, *v)).collect();
        out.sort_unstable_by_key(|(k, _)| *k);
        out
    }

    pub fn map_color(&self, rgb: [u8; 3]) -> [u8; 3] {
        self.get(ColorIndex::from_rgb(rgb)).map_rgb(rgb)
    }

    /// Recolors a whole image; the result depends only on each pixel's color.
    pub fn transform_image(&self, image: &RasterImage) -> RasterImage {
        if self.entries.is_empty() {
            return image.clone();
        }
        image.map_pixels(|p| self.map_color(p))
    }

    /// Differentiable forward pass over one patch.
    pub fn apply(&self, patch: &RasterImage) -> ApplyTrace {
        let groups = group_colors(patch);
        let inputs: Vec<[f64; 3]> = groups.distinct.iter().map(|c| c.rgb().map(normalize_value)).collect();
        let affines: Vec<Affine> = groups.distinct.iter().map(|&c| self.get(c)).collect();
        let outputs: Vec<[f64; 3]> = affines.iter().zip(&inputs).map(|(a, &x)| a.eval(x)).collect();
        let n = patch.pixel_count();
        let mut data = vec![0.0; 3 * n];
        for (i, &slot) in groups.slot_of_pixel.iter().enumerate() {
            let o = outputs[slot as usize];
            data[i] = o[0];
            data[n + i] = o[1];
            data[2 * n + i] = o[2];
        }
        let output = Tensor::from_vec(&[1, 3, patch.height(), patch.width()], data).expect("3 planes");
        ApplyTrace {
            output,
            groups,
            inputs,
            affines,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries_sorted();
        let mut out = Vec::with_capacity(HEADER_BYTES + entries.len() * ENTRY_BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (index, a) in entries {
            out.extend_from_slice(&index.0.to_le_bytes());
            for v in a.scale.iter().chain(&a.shift) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: String| CoreError::ColorMapFormat { offset, reason };
        if bytes.len() < HEADER_BYTES {
            return Err(fail(bytes.len(), format!("header needs {HEADER_BYTES} bytes")));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic, expected \"CMAP\"".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let expected = HEADER_BYTES + count * ENTRY_BYTES;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                format!("{count} entries need {expected} bytes, payload has {}", bytes.len()),
            ));
        }
        let mut map = ColorMap::new();
        let mut previous: Option<u32> = None;
        for (i, rec) in bytes[HEADER_BYTES..].chunks_exact(ENTRY_BYTES).enumerate() {
            let offset = HEADER_BYTES + i * ENTRY_BYTES;
            let raw = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes"));
            if raw >= COLOR_COUNT {
                return Err(fail(offset, format!("color index {raw} exceeds 24 bits")));
            }
            match previous {
                Some(p) if p == raw => return Err(fail(offset, format!("duplicate color index {raw}"))),
                Some(p) if p > raw => return Err(fail(offset, format!("color index {raw} out of order"))),
                _ => {}
            }
            previous = Some(raw);
            let f = |j: usize| f32::from_le_bytes(rec[4 + 4 * j..8 + 4 * j].try_into().expect("4 bytes")) as f64;
            let affine = Affine {
                scale: [f(0), f(1), f(2)],
                shift: [f(3), f(4), f(5)],
            };
            if !affine.is_finite() {
                return Err(fail(offset, format!("non-finite values for color index {raw}")));
            }
            map.entries.insert(ColorIndex(raw), affine);
        }
        Ok(map)
    }

    pub fn write_to(&self, mut sink: impl Write) -> Result<()> {
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    m: [f64; 6],
    v: [f64; 6],
    t: u64,
}

/// Adam over the touched entries of a [`ColorMap`].
///
/// Each entry keeps its own step count, so bias correction starts fresh the
/// first time a color is seen.
#[derive(Clone, Debug)]
pub struct ColorMapAdam {
    config: AdamConfig,
    moments: FxHashMap<ColorIndex, Moments>,
}

impl ColorMapAdam {
    pub fn new(config: AdamConfig) -> Self {
        ColorMapAdam {
            config,
            moments: FxHashMap::default(),
        }
    }

    pub fn step(&mut self, map: &mut ColorMap, grad: &SparseGrad) {
        for (&index, g) in grad.indices.iter().zip(&grad.grads) {
            if !map.contains(index) && g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let state = self.moments.entry(index).or_default();
            state.t += 1;
            let correction = self.config.bias_correction(state.t);
            let entry = map.entries.entry(index).or_default();
            let values = entry.scale.iter_mut().chain(entry.shift.iter_mut());
            for (j, (value, &gj)) in values.zip(g.iter()).enumerate() {
                adam_update(value, &mut state.m[j], &mut state.v[j], gj, correction, &self.config);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_index_formula() {
        assert_eq!(ColorIndex::from_rgb([0, 0, 0]).value(), 0);
        assert_eq!(ColorIndex::from_rgb([255, 255, 255]).value(), 16_777_215);
        assert_eq!(ColorIndex::from_rgb([1, 2, 3]).value(), 66_051);
        assert_eq!(ColorIndex::from_components(1, 2, 3).unwrap().rgb(), [1, 2, 3]);
        assert!(ColorIndex::from_components(256, 0, 0).is_err());
        assert!(ColorIndex::from_raw(COLOR_COUNT).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_value(0), -1.0);
        assert_eq!(normalize_value(255), 1.0);
        assert!((normalize_value(127) - (127.0 / 127.5 - 1.0)).abs() < 1e-15);
        assert_eq!(denormalize_value(-1.0), 0);
        assert_eq!(denormalize_value(1.0), 255);
        assert_eq!(denormalize_value(0.0), 127);
        for v in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_value(v)), v);
        }
    }

    #[test]
    fn denormalize_rejects_out_of_range() {
        let t = Tensor::from_vec(&[1, 3, 1, 1], vec![0.0, 1.2, 0.0]).unwrap();
        assert!(denormalize(&t).is_err());
    }

    #[test]
    fn default_map_is_identity() {
        let img = RasterImage::from_fn(5, 7, |r, c| [(r * 50) as u8, (c * 36) as u8, (r * c) as u8]);
        let map = ColorMap::new();
        let trace = map.apply(&img);
        assert_eq!(trace.output(), &normalize(&img));
        assert_eq!(denormalize(trace.output()).unwrap(), img);
        let mut one = ColorMap::new();
        one.insert(ColorIndex::from_rgb([200, 1, 1]), Affine::IDENTITY).unwrap();
        assert_eq!(one.transform_image(&img), img);
    }

    #[test]
    fn constant_entry_and_clamp() {
        let color = [10, 20, 30];
        let mut map = ColorMap::new();
        map.insert(
            ColorIndex::from_rgb(color),
            Affine {
                scale: [0.0; 3],
                shift: [0.5; 3],
            },
        )
        .unwrap();
        let img = RasterImage::filled(2, 2, color);
        let trace = map.apply(&img);
        assert!(trace.output().data().iter().all(|&v| v == 0.5));

        // channel 0 pushed to 1.7: clamps and passes no gradient
        let mut map = ColorMap::new();
        let x = normalize_value(10);
        map.insert(
            ColorIndex::from_rgb(color),
            Affine {
                scale: [1.0; 3],
                shift: [1.7 - x, 0.0, 0.0],
            },
        )
        .unwrap();
        let trace = map.apply(&img);
        assert_eq!(trace.output().data()[0], 1.0);
        let grad = trace.backward(&Tensor::full(&[1, 3, 2, 2], 1.0)).unwrap();
        assert_eq!(grad.grads[0][0], 0.0);
        assert_eq!(grad.grads[0][3], 0.0);
        assert_eq!(grad.grads[0][4], 4.0);
    }

    #[test]
    fn single_entry_changes_only_its_color() {
        let target = [10, 20, 30];
        let img = RasterImage::from_fn(6, 6, |r, c| {
            if (r + c) % 3 == 0 {
                target
            } else {
                [r as u8, c as u8, 99]
            }
        });
        let mut map = ColorMap::new();
        map.insert(
            ColorIndex::from_rgb(target),
            Affine {
                scale: [1.0; 3],
                shift: [0.3, -0.2, 0.1],
            },
        )
        .unwrap();
        let out = map.transform_image(&img);
        let mapped = map.map_color(target);
        assert_ne!(mapped, target);
        for r in 0..6 {
            for c in 0..6 {
                let expect = if img.pixel(r, c) == target {
                    mapped
                } else {
                    img.pixel(r, c)
                };
                assert_eq!(out.pixel(r, c), expect);
            }
        }
    }

    #[test]
    fn touched_indices_counts() {
        assert_eq!(touched_indices(&RasterImage::filled(4, 4, [3, 3, 3])).len(), 1);
        let img = RasterImage::new(2, 2, vec![9, 0, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0]).unwrap();
        let idx = touched_indices(&img);
        assert_eq!(
            idx.iter().map(|c| c.value()).collect::<Vec<_>>(),
            vec![1, 256, 65536, 9 * 65536]
        );
    }

    #[test]
    fn group_slots_point_at_pixel_colors() {
        let img = RasterImage::from_fn(9, 11, |r, c| [(r * 7 % 3) as u8, (c % 4) as u8, 200]);
        let groups = group_colors(&img);
        assert!(groups.distinct.windows(2).all(|w| w[0] < w[1]));
        for (i, px) in img.pixels().enumerate() {
            assert_eq!(
                groups.distinct[groups.slot_of_pixel[i] as usize],
                ColorIndex::from_rgb(px)
            );
        }
    }

    #[test]
    fn empty_map_payload_is_header_only() {
        let bytes = ColorMap::new().to_bytes();
        assert_eq!(bytes, b"CMAP\x01\x00\x00\x00\x00\x00");
        assert!(ColorMap::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn one_entry_round_trips() {
        let mut map = ColorMap::new();
        map.insert(
            ColorIndex::from_rgb([1, 2, 3]),
            Affine {
                scale: [1.5, 0.25, -2.0],
                shift: [0.125, -0.5, 0.0],
            },
        )
        .unwrap();
        let back = ColorMap::from_bytes(&map.to_bytes()).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn payload_validation() {
        let mut map = ColorMap::new();
        map.insert(ColorIndex::from_rgb([0, 0, 7]), Affine::IDENTITY).unwrap();
        let bytes = map.to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            ColorMap::from_bytes(&bad_magic),
            Err(CoreError::ColorMapFormat { offset: 0, .. })
        ));
        assert!(ColorMap::from_bytes(&bytes[..bytes.len() - 3]).is_err());

        let mut dup = bytes.clone();
        dup[6..10].copy_from_slice(&2u32.to_le_bytes());
        dup.extend_from_slice(&bytes[10..]);
        let err = ColorMap::from_bytes(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate color index 7"), "{err}");
        assert!(err.contains("byte 38"), "{err}");
    }

    #[test]
    fn adam_skips_untouched_and_zero_gradient_colors() {
        let mut map = ColorMap::new();
        let mut opt = ColorMapAdam::new(AdamConfig::new(0.01, 0.5, 0.999));
        let a = ColorIndex::from_rgb([1, 1, 1]);
        let b = ColorIndex::from_rgb([2, 2, 2]);
        opt.step(
            &mut map,
            &SparseGrad {
                indices: vec![a, b],
                grads: vec![[1.0; 6], [0.0; 6]],
            },
        );
        assert!(map.contains(a));
        assert!(!map.contains(b));
        let e = map.get(a);
        assert!((e.scale[0] - 0.99).abs() < 1e-9 && (e.shift[2] + 0.01).abs() < 1e-9);
    }
}

//! Synthetic paired scenes: one geometry, two color domains.
//!
//! A scene is drawn as roads (full-length horizontal or vertical bands),
//! then trees (discs), then buildings (rectangles) over background. Each
//! domain paints the shared mask with its own per-class base colors passed
//! through a per-channel affine `scale * c + offset`, rounded half to even,
//! plus uniform integer noise in `[-noise, noise]`, then clamped to 8 bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kv::{triple, KeyValues};
use crate::raster::{Class, LabelMask, RasterImage};
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    /// Base color per class, indexed by class id.
    pub colors: [[u8; 3]; 4],
    pub scale: [f64; 3],
    pub offset: [f64; 3],
    pub noise: u8,
}

impl DomainStyle {
    pub const DEFAULT_COLORS: [[u8; 3]; 4] = [
        [150, 140, 110], // background: dry soil
        [100, 130, 175], // building: blue-grey roofs
        [130, 130, 130], // road: asphalt
        [60, 110, 60],   // tree
    ];

    pub fn plain(noise: u8) -> Self {
        DomainStyle {
            colors: Self::DEFAULT_COLORS,
            scale: [1.0; 3],
            offset: [0.0; 3],
            noise,
        }
    }

    pub fn shifted(scale: [f64; 3], offset: [f64; 3], noise: u8) -> Self {
        DomainStyle {
            scale,
            offset,
            ..Self::plain(noise)
        }
    }

    /// Noise-free color of `class` in this domain.
    pub fn class_color(&self, class: Class) -> [u8; 3] {
        self.affine(self.colors[class.id() as usize])
    }

    fn exact(&self, rgb: [u8; 3]) -> [f64; 3] {
        [0, 1, 2].map(|c| self.scale[c] * rgb[c] as f64 + self.offset[c])
    }

    /// `clamp(round(scale * rgb + offset))`.
    pub fn affine(&self, rgb: [u8; 3]) -> [u8; 3] {
        self.exact(rgb).map(|v| v.round_ties_even().clamp(0.0, 255.0) as u8)
    }

    fn validate(&self, name: &str) -> Result<()> {
        for class in Class::ALL {
            let v = self.exact(self.colors[class.id() as usize]);
            if v.iter().any(|x| !(0.0..=255.0).contains(x)) {
                return Err(CoreError::invalid(format!(
                    "{name}: {} color maps to {v:?}, outside [0, 255] before clamping",
                    class.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub buildings: usize,
    pub building_size: (usize, usize),
    pub roads: usize,
    pub road_width: (usize, usize),
    pub trees: usize,
    pub tree_radius: (usize, usize),
    pub domain_a: DomainStyle,
    pub domain_b: DomainStyle,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 256,
            width: 256,
            buildings: 24,
            building_size: (8, 28),
            roads: 5,
            road_width: (4, 9),
            trees: 30,
            tree_radius: (3, 10),
            domain_a: DomainStyle::plain(2),
            domain_b: DomainStyle::shifted([1.2, 1.0, 0.8], [10.0, 0.0, -10.0], 2),
            seed: 0,
        }
    }
}

fn range_ok((lo, hi): (usize, usize)) -> bool {
    lo >= 1 && lo <= hi
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 {
            return Err(CoreError::invalid("height: scene extent must be positive"));
        }
        if self.width == 0 {
            return Err(CoreError::invalid("width: scene extent must be positive"));
        }
        for (name, r) in [
            ("building", self.building_size),
            ("road", self.road_width),
            ("tree", self.tree_radius),
        ] {
            if !range_ok(r) {
                return Err(CoreError::invalid(format!(
                    "{name}_min/{name}_max: need 1 <= min <= max, got {r:?}"
                )));
            }
        }
        self.domain_a.validate("a")?;
        self.domain_b.validate("b")
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = SynthConfig::default();
        let style = |prefix: &str, def: &DomainStyle| -> Result<DomainStyle> {
            let mut colors = def.colors;
            for class in Class::ALL {
                colors[class.id() as usize] =
                    kv.get_triple_or(&format!("{prefix}.{}", class.name()), colors[class.id() as usize])?;
            }
            Ok(DomainStyle {
                colors,
                scale: kv.get_triple_or(&format!("{prefix}.scale"), def.scale)?,
                offset: kv.get_triple_or(&format!("{prefix}.offset"), def.offset)?,
                noise: kv.get_or(&format!("{prefix}.noise"), def.noise)?,
            })
        };
        let cfg = SynthConfig {
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            buildings: kv.get_or("buildings", d.buildings)?,
            building_size: (
                kv.get_or("building_min", d.building_size.0)?,
                kv.get_or("building_max", d.building_size.1)?,
            ),
            roads: kv.get_or("roads", d.roads)?,
            road_width: (
                kv.get_or("road_min", d.road_width.0)?,
                kv.get_or("road_max", d.road_width.1)?,
            ),
            trees: kv.get_or("trees", d.trees)?,
            tree_radius: (
                kv.get_or("tree_min", d.tree_radius.0)?,
                kv.get_or("tree_max", d.tree_radius.1)?,
            ),
            domain_a: style("a", &d.domain_a)?,
            domain_b: style("b", &d.domain_b)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("buildings", self.buildings);
        kv.set("building_min", self.building_size.0);
        kv.set("building_max", self.building_size.1);
        kv.set("roads", self.roads);
        kv.set("road_min", self.road_width.0);
        kv.set("road_max", self.road_width.1);
        kv.set("trees", self.trees);
        kv.set("tree_min", self.tree_radius.0);
        kv.set("tree_max", self.tree_radius.1);
        kv.set("seed", self.seed);
        for (prefix, style) in [("a", &self.domain_a), ("b", &self.domain_b)] {
            for class in Class::ALL {
                kv.set(
                    format!("{prefix}.{}", class.name()),
                    triple(style.colors[class.id() as usize]),
                );
            }
            kv.set(format!("{prefix}.scale"), triple(style.scale));
            kv.set(format!("{prefix}.offset"), triple(style.offset));
            kv.set(format!("{prefix}.noise"), style.noise);
        }
        kv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDomain {
    pub image: RasterImage,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub a: SynthDomain,
    pub b: SynthDomain,
}

fn draw_geometry(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> LabelMask {
    let (h, w) = (cfg.height, cfg.width);
    let mut mask = LabelMask::filled(h, w, Class::Background);
    for _ in 0..cfg.roads {
        let width = rng.random_range(cfg.road_width.0..=cfg.road_width.1);
        let horizontal = rng.random_bool(0.5);
        let extent = if horizontal { h } else { w };
        let start = rng.random_range(0..extent);
        for a in start..(start + width).min(extent) {
            for b in 0..(if horizontal { w } else { h }) {
                let (r, c) = if horizontal { (a, b) } else { (b, a) };
                mask.set(r, c, Class::Road);
            }
        }
    }
    for _ in 0..cfg.trees {
        let radius = rng.random_range(cfg.tree_radius.0..=cfg.tree_radius.1) as isize;
        let (cr, cc) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
        for r in (cr - radius).max(0)..(cr + radius + 1).min(h as isize) {
            for c in (cc - radius).max(0)..(cc + radius + 1).min(w as isize) {
                if (r - cr).pow(2) + (c - cc).pow(2) <= radius * radius {
                    mask.set(r as usize, c as usize, Class::Tree);
                }
            }
        }
    }
    for _ in 0..cfg.buildings {
        let bh = rng.random_range(cfg.building_size.0..=cfg.building_size.1);
        let bw = rng.random_range(cfg.building_size.0..=cfg.building_size.1);
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        for r in r0..(r0 + bh).min(h) {
            for c in c0..(c0 + bw).min(w) {
                mask.set(r, c, Class::Building);
            }
        }
    }
    mask
}

fn paint(mask: &LabelMask, style: &DomainStyle, rng: &mut ChaCha8Rng) -> RasterImage {
    let palette = Class::ALL.map(|c| style.class_color(c));
    let noise = style.noise as i32;
    RasterImage::from_fn(mask.height(), mask.width(), |r, c| {
        let base = palette[mask.get(r, c).id() as usize];
        if noise == 0 {
            return base;
        }
        base.map(|v| (v as i32 + rng.random_range(-noise..=noise)).clamp(0, 255) as u8)
    })
}

/// Generates both domains of a scene; the masks are identical.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        rng
    };
    let mask = draw_geometry(cfg, &mut stream(1));
    let a = paint(&mask, &cfg.domain_a, &mut stream(2));
    let b = paint(&mask, &cfg.domain_b, &mut stream(3));
    Ok(SynthPair {
        a: SynthDomain {
            image: a,
            mask: mask.clone(),
        },
        b: SynthDomain { image: b, mask },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_zero_noise_domains_identical() {
        let cfg = SynthConfig {
            domain_a: DomainStyle::plain(0),
            domain_b: DomainStyle::plain(0),
            ..Default::default()
        };
        let pair = synth_generate(&cfg).unwrap();
        assert_eq!(pair.a.image, pair.b.image);
    }

    #[test]
    fn masks_shared_and_deterministic() {
        let cfg = SynthConfig {
            seed: 9,
            ..Default::default()
        };
        let pair = synth_generate(&cfg).unwrap();
        assert_eq!(pair.a.mask, pair.b.mask);
        assert_eq!(pair, synth_generate(&cfg).unwrap());
        let ids = pair.a.mask.ids();
        for class in Class::ALL {
            assert!(ids.contains(&class.id()), "{class:?} missing from default scene");
        }
    }

    #[test]
    fn noiseless_shift_is_exact_affine() {
        let (a, b) = ([1.2, 1.0, 0.8], [10.0, 0.0, -10.0]);
        let cfg = SynthConfig {
            domain_a: DomainStyle::plain(0),
            domain_b: DomainStyle::shifted(a, b, 0),
            ..Default::default()
        };
        let pair = synth_generate(&cfg).unwrap();
        for (pa, pb) in pair.a.image.pixels().zip(pair.b.image.pixels()) {
            let expect = [0, 1, 2].map(|c| (a[c] * pa[c] as f64 + b[c]).round_ties_even().clamp(0.0, 255.0) as u8);
            assert_eq!(pb, expect);
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let err = synth_generate(&SynthConfig {
            width: 0,
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("width"));
        let mut bad = SynthConfig::default();
        bad.domain_b.offset = [200.0, 0.0, 0.0];
        assert!(synth_generate(&bad).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = SynthConfig {
            seed: 77,
            height: 64,
            ..Default::default()
        };
        assert_eq!(SynthConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}

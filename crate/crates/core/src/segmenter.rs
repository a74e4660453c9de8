//! Encoder-decoder segmenter with leaky-ReLU activations and no batch
//! normalization, trained with per-class sigmoid cross entropy.

use std::io::Write;

use cmgan_nn::checkpoint::Checkpoint;
use cmgan_nn::{ops, Adam, AdamConfig, Gradients, Graph, Parameter, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colormap::normalize_value;
use crate::raster::{Class, LabelMask, RasterImage};
use crate::tiling::{stitch_scores, TileGrid};
use crate::{CoreError, Result};

/// Score channels, in order: building, road, tree, background.
pub const SCORE_CHANNELS: usize = 4;
const BACKGROUND_CHANNEL: usize = 3;

/// Score channel carrying `class`.
pub fn channel_of(class: Class) -> usize {
    match class {
        Class::Background => BACKGROUND_CHANNEL,
        c => c.id() as usize - 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegNetConfig {
    /// Number of down/up levels.
    pub depth: usize,
    /// Channels at full resolution; doubled per level.
    pub width: usize,
    pub slope: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            depth: 3,
            width: 16,
            slope: 0.2,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(CoreError::invalid("segmenter depth and width must be at least 1"));
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return Err(CoreError::invalid(format!("leaky slope {} outside [0, 1)", self.slope)));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn extent_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegNetConfig,
    params: Vec<Parameter>,
}

impl SegNet {
    /// He-initialized weights, zero biases.
    pub fn new<R: Rng>(config: SegNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let gain = 2.0 / (1.0 + config.slope * config.slope);
        let mut params = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            let std = (gain / (cin * k * k) as f64).sqrt();
            params.push(Parameter::normal(
                format!("{name}.weight"),
                &[cout, cin, k, k],
                std,
                rng,
            ));
            params.push(Parameter::zeros(format!("{name}.bias"), &[cout]));
        };
        let ch = |level: usize| config.width << level;
        conv("enc0.a".into(), 3, ch(0), 3);
        conv("enc0.b".into(), ch(0), ch(0), 3);
        for l in 1..=config.depth {
            conv(format!("enc{l}.a"), ch(l - 1), ch(l), 3);
            conv(format!("enc{l}.b"), ch(l), ch(l), 3);
        }
        for l in (1..=config.depth).rev() {
            conv(format!("dec{l}.up"), ch(l), ch(l - 1), 3);
            conv(format!("dec{l}.merge"), 2 * ch(l - 1), ch(l - 1), 3);
        }
        conv("head".into(), ch(0), SCORE_CHANNELS, 1);
        Ok(SegNet { config, params })
    }

    pub fn config(&self) -> SegNetConfig {
        self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Records the forward pass of a normalized `(n, 3, h, w)` batch; the
    /// resulting scores are `(n, 4, h, w)` logits.
    pub fn forward(&self, g: &mut Graph, input: Var, track: bool) -> Result<SegPass> {
        let [_, c, h, w] = g
            .value(input)
            .dims4()
            .ok_or_else(|| CoreError::invalid("segmenter input must be (n, 3, h, w)"))?;
        let m = self.config.extent_multiple();
        if c != 3 || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(CoreError::invalid(format!(
                "segmenter input {:?}: need 3 channels and sides divisible by {m}",
                g.value(input).shape()
            )));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p, track)).collect();
        let mut p = params.chunks(2);
        let slope = self.config.slope;
        let mut conv = |g: &mut Graph, x: Var, activate: bool| -> Result<Var> {
            let wb = p.next().expect("conv parameters");
            let pad = g.value(wb[0]).shape()[2] / 2;
            let y = ops::conv2d(g, x, wb[0], wb[1], 1, pad)?;
            Ok(if activate { ops::leaky_relu(g, y, slope) } else { y })
        };

        let mut x = conv(g, input, true)?;
        x = conv(g, x, true)?;
        let mut skips = vec![x];
        for _ in 1..=self.config.depth {
            x = ops::avg_pool2(g, x)?;
            x = conv(g, x, true)?;
            x = conv(g, x, true)?;
            skips.push(x);
        }
        skips.pop();
        while let Some(skip) = skips.pop() {
            x = ops::upsample2(g, x)?;
            x = conv(g, x, true)?;
            x = ops::concat_channels(g, x, skip)?;
            x = conv(g, x, true)?;
        }
        let scores = conv(g, x, false)?;
        Ok(SegPass { scores, params })
    }

    pub fn accumulate(&mut self, grads: &Gradients, pass: &SegPass) {
        for (&var, p) in pass.params.iter().zip(&mut self.params) {
            grads.accumulate_into(var, p);
        }
    }

    /// Logits `(4, h, w)` for one image.
    pub fn scores(&self, image: &RasterImage) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image_batch(&[image])?);
        let pass = self.forward(&mut g, x, false)?;
        let (h, w) = (image.height(), image.width());
        Ok(g.value(pass.scores).clone().reshape(&[SCORE_CHANNELS, h, w])?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
            .with_meta("model", "segnet")
            .with_meta("depth", self.config.depth)
            .with_meta("width", self.config.width)
            .with_meta("slope", self.config.slope)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model: String = ck.meta_value("model")?;
        if model != "segnet" {
            return Err(CoreError::invalid(format!("checkpoint holds a {model}, not a segnet")));
        }
        let config = SegNetConfig {
            depth: ck.meta_value("depth")?,
            width: ck.meta_value("width")?,
            slope: ck.meta_value("slope")?,
        };
        let mut net = SegNet::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.restore_into(&mut net.params)?;
        Ok(net)
    }
}

/// Handles recorded by [`SegNet::forward`].
#[derive(Clone, Debug)]
pub struct SegPass {
    pub scores: Var,
    params: Vec<Var>,
}

/// Stacks equally sized images into a normalized `(n, 3, h, w)` tensor.
pub fn image_batch(images: &[&RasterImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| CoreError::invalid("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(CoreError::invalid(format!(
                "batch mixes {}x{} and {h}x{w} images",
                img.height(),
                img.width()
            )));
        }
        for c in 0..3 {
            data.extend(img.data().iter().skip(c).step_by(3).map(|&v| normalize_value(v)));
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data)?)
}

/// One-hot targets and loss weights for a batch of masks, `(n, 4, h, w)`.
/// The background channel carries zero weight; background pixels remain
/// negatives for the three foreground channels.
pub fn loss_targets(masks: &[&LabelMask]) -> Result<(Tensor, Tensor)> {
    let first = masks.first().ok_or_else(|| CoreError::invalid("empty mask batch"))?;
    let plane = first.height() * first.width();
    let mut targets = vec![0.0; masks.len() * SCORE_CHANNELS * plane];
    let mut weights = vec![0.0; targets.len()];
    for (n, m) in masks.iter().enumerate() {
        if m.height() * m.width() != plane || m.height() != first.height() {
            return Err(CoreError::invalid("mask batch mixes extents"));
        }
        let base = n * SCORE_CHANNELS * plane;
        weights[base..base + BACKGROUND_CHANNEL * plane].fill(1.0);
        for (i, &id) in m.ids().iter().enumerate() {
            if id != Class::Background.id() {
                targets[base + (id as usize - 1) * plane + i] = 1.0;
            }
        }
    }
    let shape = [masks.len(), SCORE_CHANNELS, first.height(), first.width()];
    Ok((Tensor::from_vec(&shape, targets)?, Tensor::from_vec(&shape, weights)?))
}

/// Mean sigmoid cross entropy over pixels and the three foreground channels.
pub fn seg_loss_on(g: &mut Graph, scores: Var, masks: &[&LabelMask]) -> Result<Var> {
    let (targets, weights) = loss_targets(masks)?;
    if g.value(scores).shape() != targets.shape() {
        return Err(CoreError::invalid(format!(
            "scores {:?} do not match masks {:?}",
            g.value(scores).shape(),
            targets.shape()
        )));
    }
    let normalizer = (targets.len() / SCORE_CHANNELS * BACKGROUND_CHANNEL) as f64;
    Ok(ops::sigmoid_bce(g, scores, &targets, &weights, normalizer)?)
}

/// [`seg_loss_on`] for a single `(4, h, w)` score tensor.
pub fn seg_loss(scores: &Tensor, mask: &LabelMask) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(
        scores
            .clone()
            .reshape(&[1, SCORE_CHANNELS, mask.height(), mask.width()])?,
    );
    let loss = seg_loss_on(&mut g, s, &[mask])?;
    Ok(g.value(loss).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// A flip followed by `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: Flip,
    pub quarter_turns: u8,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: Flip::None,
        quarter_turns: 0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let flip = [Flip::None, Flip::Horizontal, Flip::Vertical][rng.random_range(0..3)];
        AugmentDraw {
            flip,
            quarter_turns: rng.random_range(0..4),
        }
    }

    /// Output extent and, per output pixel, the flat index of its source.
    pub fn source_indices(&self, height: usize, width: usize) -> (usize, usize, Vec<usize>) {
        let (mut h, mut w) = (height, width);
        let mut idx: Vec<usize> = (0..h * w).collect();
        idx = match self.flip {
            Flip::None => idx,
            Flip::Horizontal => (0..h * w).map(|i| idx[(i / w) * w + (w - 1 - i % w)]).collect(),
            Flip::Vertical => (0..h * w).map(|i| idx[(h - 1 - i / w) * w + i % w]).collect(),
        };
        for _ in 0..self.quarter_turns % 4 {
            // new[r][c] = old[c][w - 1 - r]; the new extent is w x h
            idx = (0..h * w)
                .map(|i| {
                    let (r, c) = (i / h, i % h);
                    idx[c * w + (w - 1 - r)]
                })
                .collect();
            std::mem::swap(&mut h, &mut w);
        }
        (h, w, idx)
    }
}

/// Applies the same flip and rotation to an image and its mask.
pub fn augment(image: &RasterImage, mask: &LabelMask, draw: AugmentDraw) -> Result<(RasterImage, LabelMask)> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(CoreError::invalid(format!(
            "image is {}x{} but mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let (h, w, idx) = draw.source_indices(image.height(), image.width());
    let src = image.data();
    let data = idx
        .iter()
        .flat_map(|&i| [src[3 * i], src[3 * i + 1], src[3 * i + 2]])
        .collect();
    let ids = idx.iter().map(|&i| mask.ids()[i]).collect();
    Ok((RasterImage::new(h, w, data)?, LabelMask::new(h, w, ids)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Emit a log line every this many iterations; 0 disables logging.
    pub log_every: usize,
}

impl SegTrainConfig {
    /// Initial training schedule.
    pub fn initial(seed: u64) -> Self {
        SegTrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            iterations: 2500,
            seed,
            log_every: 0,
        }
    }

    /// Fine-tuning schedule: the initial one with a 750-iteration budget.
    pub fn finetune(seed: u64) -> Self {
        SegTrainConfig {
            iterations: 750,
            ..Self::initial(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch size must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(CoreError::invalid("iteration budget must be at least 1"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(CoreError::invalid(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Trains `net` in place on `(patch, mask)` pairs and returns the per-iteration
/// batch losses.
pub fn train_segmenter(
    data: &[(RasterImage, LabelMask)],
    net: &mut SegNet,
    cfg: &SegTrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::invalid("segmenter training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&net.params, AdamConfig::new(cfg.lr, cfg.beta1, cfg.beta2));
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let batch: Vec<(RasterImage, LabelMask)> = (0..cfg.batch_size)
            .map(|_| {
                let (img, mask) = &data[rng.random_range(0..data.len())];
                augment(img, mask, AugmentDraw::sample(&mut rng))
            })
            .collect::<Result<_>>()?;
        let images: Vec<&RasterImage> = batch.iter().map(|(i, _)| i).collect();
        let masks: Vec<&LabelMask> = batch.iter().map(|(_, m)| m).collect();

        let mut g = Graph::new();
        let x = g.constant(image_batch(&images)?);
        let pass = net.forward(&mut g, x, true)?;
        let loss = seg_loss_on(&mut g, pass.scores, &masks)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        net.accumulate(&grads, &pass);
        opt.step(&mut net.params);
        history.push(value);
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            writeln!(log, "iter {it} seg_loss {value:.6}")?;
        }
    }
    Ok(history)
}

/// Continues training an already trained `net` on recolored patches paired
/// with their original masks.
pub fn finetune(
    net: &mut SegNet,
    fake_data: &[(RasterImage, LabelMask)],
    cfg: &SegTrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<f64>> {
    train_segmenter(fake_data, net, cfg, log)
}

/// Foreground argmax when its sigmoid exceeds 0.5, else background.
pub fn decide(probs: &Tensor) -> Result<LabelMask> {
    let shape = probs.shape();
    if shape.len() != 3 || shape[0] != SCORE_CHANNELS {
        return Err(CoreError::invalid(format!(
            "expected (4, h, w) probabilities, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let p = probs.data();
    let ids = (0..plane)
        .map(|i| {
            let mut best = Class::Building;
            for class in Class::FOREGROUND {
                if p[channel_of(class) * plane + i] > p[channel_of(best) * plane + i] {
                    best = class;
                }
            }
            if p[channel_of(best) * plane + i] > 0.5 {
                best.id()
            } else {
                Class::Background.id()
            }
        })
        .collect();
    LabelMask::new(h, w, ids)
}

/// Labels a whole image: per-patch sigmoid scores averaged over overlaps.
pub fn predict(net: &SegNet, image: &RasterImage, grid: &TileGrid) -> Result<LabelMask> {
    let patches = grid.extract(image)?;
    let probs = patches
        .iter()
        .map(|p| {
            let mut s = net.scores(p)?;
            s.data_mut().iter_mut().for_each(|z| *z = ops::sigmoid(*z));
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    decide(&stitch_scores(grid, &probs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SegNet {
        let cfg = SegNetConfig {
            depth: 1,
            width: 2,
            slope: 0.2,
        };
        SegNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn scene(n: usize) -> (RasterImage, LabelMask) {
        let mask = LabelMask::from_fn(n, n, |r, c| Class::ALL[(r / 2 + c / 3) % 4]);
        let image = RasterImage::from_fn(n, n, |r, c| {
            Class::ALL[(r / 2 + c / 3) % 4].legend().map(|v| v / 2 + 40)
        });
        (image, mask)
    }

    #[test]
    fn output_matches_input_extent() {
        let net = small();
        let (img, _) = scene(8);
        assert_eq!(net.scores(&img).unwrap().shape(), &[4, 8, 8]);
        let err = net.scores(&RasterImage::filled(5, 8, [0; 3])).unwrap_err();
        assert!(err.to_string().contains("divisible by 2"));
    }

    #[test]
    fn seg_loss_examples() {
        let mask = LabelMask::new(1, 2, vec![1, 0]).unwrap();
        // true channel +50, everything else -50
        let mut s = Tensor::full(&[4, 1, 2], -50.0);
        s.data_mut()[0] = 50.0;
        assert!(seg_loss(&s, &mask).unwrap() < 1e-8);

        let one = LabelMask::new(1, 1, vec![2]).unwrap();
        let mut s = Tensor::full(&[4, 1, 1], -50.0);
        s.data_mut()[1] = 0.0;
        let expected = std::f64::consts::LN_2 / 3.0;
        assert!((seg_loss(&s, &one).unwrap() - expected).abs() < 1e-12);

        let bg = LabelMask::filled(2, 2, Class::Background);
        assert!(seg_loss(&Tensor::full(&[4, 2, 2], -50.0), &bg).unwrap() < 1e-8);
        // the background channel is never scored
        assert!(seg_loss(&Tensor::full(&[4, 2, 2], -50.0).tap_bg(1e3), &bg).unwrap() < 1e-8);
    }

    trait TapBg {
        fn tap_bg(self, v: f64) -> Self;
    }
    impl TapBg for Tensor {
        fn tap_bg(mut self, v: f64) -> Self {
            let plane = self.len() / 4;
            self.data_mut()[3 * plane..].fill(v);
            self
        }
    }

    #[test]
    fn augment_identity_and_involution() {
        let (img, mask) = scene(6);
        assert_eq!(
            augment(&img, &mask, AugmentDraw::IDENTITY).unwrap(),
            (img.clone(), mask.clone())
        );
        let h = AugmentDraw {
            flip: Flip::Horizontal,
            quarter_turns: 0,
        };
        let (i1, m1) = augment(&img, &mask, h).unwrap();
        assert_eq!(augment(&i1, &m1, h).unwrap(), (img, mask));
    }

    #[test]
    fn rotation_is_counter_clockwise() {
        let img = RasterImage::from_fn(2, 3, |r, c| [(r * 3 + c) as u8; 3]);
        let mask = LabelMask::filled(2, 3, Class::Road);
        let turn = AugmentDraw {
            flip: Flip::None,
            quarter_turns: 1,
        };
        let (out, m) = augment(&img, &mask, turn).unwrap();
        assert_eq!((out.height(), out.width()), (3, 2));
        assert_eq!((m.height(), m.width()), (3, 2));
        // top-left goes to bottom-left, top-right to top-left
        assert_eq!(out.pixel(2, 0), [0; 3]);
        assert_eq!(out.pixel(0, 0), [2; 3]);
        let four = AugmentDraw {
            flip: Flip::Vertical,
            quarter_turns: 4,
        };
        let v = AugmentDraw {
            flip: Flip::Vertical,
            quarter_turns: 0,
        };
        assert_eq!(augment(&img, &mask, four).unwrap(), augment(&img, &mask, v).unwrap());
    }

    #[test]
    fn train_validation() {
        let mut net = small();
        let data = vec![scene(8)];
        let mut cfg = SegTrainConfig::initial(0);
        cfg.iterations = 0;
        assert!(train_segmenter(&data, &mut net, &cfg, &mut std::io::sink()).is_err());
        cfg.iterations = 1;
        assert!(train_segmenter(&[], &mut net, &cfg, &mut std::io::sink()).is_err());
        assert_eq!(SegTrainConfig::finetune(0).iterations, 750);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = vec![scene(8), scene(8)];
        let mut cfg = SegTrainConfig::initial(9);
        cfg.iterations = 3;
        cfg.batch_size = 2;
        let run = || {
            let mut net = small();
            train_segmenter(&data, &mut net, &cfg, &mut std::io::sink()).unwrap();
            net.to_checkpoint().payload()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decision_rule() {
        let mut p = Tensor::full(&[4, 1, 3], 0.1);
        p.data_mut()[0] = 0.9; // pixel 0: building
        p.data_mut()[3 + 1] = 0.6; // pixel 1: road
        p.data_mut()[6 + 1] = 0.7; // pixel 1: tree beats road
        p.data_mut()[9 + 2] = 0.99; // pixel 2: only background high
        assert_eq!(decide(&p).unwrap().ids(), &[1, 3, 0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small();
        let ck = net.to_checkpoint();
        let back = SegNet::from_checkpoint(&ck).unwrap();
        assert_eq!(back.to_checkpoint().payload(), ck.payload());
        assert_eq!(back.config(), net.config());
    }
}

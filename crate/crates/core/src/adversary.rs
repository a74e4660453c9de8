//! PatchGAN discriminator, least-squares objectives and the adversarial
//! training loop that fits a [`ColorMap`].

use std::io::Write;

use cmgan_nn::checkpoint::Checkpoint;
use cmgan_nn::{ops, Adam, AdamConfig, Gradients, Graph, Parameter, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colormap::{normalize, ColorMap, ColorMapAdam};
use crate::raster::RasterImage;
use crate::{CoreError, Result};

const KERNEL: usize = 4;
const PAD: usize = 1;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// Depth of the first block; later blocks use 2x, 4x and 8x.
    pub base_width: usize,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_width: 64,
            slope: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    stride: usize,
    norm: bool,
    activate: bool,
}

const BLOCKS: [Block; 5] = [
    Block {
        stride: 2,
        norm: false,
        activate: true,
    },
    Block {
        stride: 2,
        norm: true,
        activate: true,
    },
    Block {
        stride: 2,
        norm: true,
        activate: true,
    },
    Block {
        stride: 1,
        norm: true,
        activate: true,
    },
    Block {
        stride: 1,
        norm: false,
        activate: false,
    },
];

/// Fully convolutional critic producing a grid of local real/fake scores.
///
/// Blocks: 4x4 convolutions of depth `b, 2b, 4b, 8b, 1` with strides
/// `2, 2, 2, 1, 1` and padding 1; instance norm on blocks two to four;
/// leaky ReLU after every block but the last.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: Vec<Parameter>,
}

impl Discriminator {
    pub fn new<R: Rng>(config: DiscriminatorConfig, rng: &mut R) -> Self {
        let b = config.base_width;
        let widths = [3, b, 2 * b, 4 * b, 8 * b, 1];
        let mut params = Vec::new();
        for (i, block) in BLOCKS.iter().enumerate() {
            let (cin, cout) = (widths[i], widths[i + 1]);
            params.push(Parameter::normal(
                format!("d{i}.weight"),
                &[cout, cin, KERNEL, KERNEL],
                INIT_STD,
                rng,
            ));
            params.push(Parameter::zeros(format!("d{i}.bias"), &[cout]));
            if block.norm {
                params.push(Parameter::filled(format!("d{i}.gain"), &[cout], 1.0));
                params.push(Parameter::zeros(format!("d{i}.offset"), &[cout]));
            }
        }
        Discriminator { config, params }
    }

    pub fn config(&self) -> DiscriminatorConfig {
        self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Score-map extent for a square input of side `n`, if every block fits.
    pub fn output_extent(n: usize) -> Option<usize> {
        BLOCKS
            .iter()
            .try_fold(n, |e, b| ops::conv_output_extent(e, KERNEL, b.stride, PAD))
    }

    /// Smallest input side the block stack accepts.
    pub fn min_input_extent() -> usize {
        (1..)
            .find(|&n| Self::output_extent(n).is_some())
            .expect("some extent fits")
    }

    /// Records the forward pass. With `track` false no parameter gradients
    /// are produced.
    pub fn forward(&self, g: &mut Graph, input: Var, track: bool) -> Result<DiscriminatorPass> {
        let [_, c, h, w] = g
            .value(input)
            .dims4()
            .ok_or_else(|| CoreError::invalid("discriminator input must be (n, 3, h, w)"))?;
        let min = Self::min_input_extent();
        if c != 3 || h < min || w < min {
            return Err(CoreError::invalid(format!(
                "discriminator input {:?} is too small: need 3 channels and at least {min}x{min}",
                g.value(input).shape()
            )));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p, track)).collect();
        let mut p = params.iter().copied();
        let mut x = input;
        for block in BLOCKS {
            let (weight, bias) = (p.next().expect("weight"), p.next().expect("bias"));
            x = ops::conv2d(g, x, weight, bias, block.stride, PAD)?;
            if block.norm {
                let (gain, offset) = (p.next().expect("gain"), p.next().expect("offset"));
                x = ops::instance_norm(g, x, gain, offset)?;
            }
            if block.activate {
                x = ops::leaky_relu(g, x, self.config.slope);
            }
        }
        let score = ops::mean_per_sample(g, x);
        Ok(DiscriminatorPass { map: x, score, params })
    }

    /// Adds the gradients of a tracked pass into the parameters.
    pub fn accumulate(&mut self, grads: &Gradients, pass: &DiscriminatorPass) {
        for (&var, p) in pass.params.iter().zip(&mut self.params) {
            grads.accumulate_into(var, p);
        }
    }

    /// Score map `(h, w)` and its mean for one normalized `(1, 3, h, w)` patch.
    pub fn discriminate(&self, patch: &Tensor) -> Result<(Tensor, f64)> {
        let mut g = Graph::new();
        let x = g.constant(patch.clone());
        let pass = self.forward(&mut g, x, false)?;
        let score = pass.score;
        let map = g.value(pass.map);
        let [_, _, h, w] = map.dims4().expect("4-d map");
        Ok((map.clone().reshape(&[h, w])?, g.value(score).data()[0]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
            .with_meta("model", "patchgan")
            .with_meta("base_width", self.config.base_width)
            .with_meta("slope", self.config.slope)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = DiscriminatorConfig {
            base_width: ck.meta_value("base_width")?,
            slope: ck.meta_value("slope")?,
        };
        let mut d = Discriminator::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        ck.restore_into(&mut d.params)?;
        Ok(d)
    }
}

/// Handles recorded by [`Discriminator::forward`].
#[derive(Clone, Debug)]
pub struct DiscriminatorPass {
    /// Score map, `(n, 1, h, w)`.
    pub map: Var,
    /// Per-sample mean score, `(n)`.
    pub score: Var,
    params: Vec<Var>,
}

/// Least-squares critic loss: real scores pulled to 1, fake scores to 0.
pub fn d_loss(real: &[f64], fake: &[f64]) -> f64 {
    mean_square_to(real, 1.0) + mean_square_to(fake, 0.0)
}

/// Least-squares generator loss: fake scores pulled to 1.
pub fn g_loss(fake: &[f64]) -> f64 {
    mean_square_to(fake, 1.0)
}

fn mean_square_to(scores: &[f64], target: f64) -> f64 {
    assert!(!scores.is_empty(), "score set must be non-empty");
    scores.iter().map(|s| (s - target) * (s - target)).sum::<f64>() / scores.len() as f64
}

/// [`d_loss`] on a graph; `is_real[i]` labels `scores[i]`.
pub fn d_loss_on(g: &mut Graph, scores: Var, is_real: &[bool]) -> Result<Var> {
    let n_real = is_real.iter().filter(|r| **r).count();
    let n_fake = is_real.len() - n_real;
    if n_real == 0 || n_fake == 0 {
        return Err(CoreError::invalid("d_loss needs both real and fake scores"));
    }
    let targets: Vec<f64> = is_real.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    let weights: Vec<f64> = is_real
        .iter()
        .map(|&r| if r { 1.0 / n_real as f64 } else { 1.0 / n_fake as f64 })
        .collect();
    let n = is_real.len();
    Ok(ops::weighted_square_error(
        g,
        scores,
        &Tensor::from_vec(&[n], targets)?,
        &Tensor::from_vec(&[n], weights)?,
    )?)
}

/// [`g_loss`] on a graph.
pub fn g_loss_on(g: &mut Graph, fake_scores: Var) -> Var {
    ops::square_error(g, fake_scores, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanTrainConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Emit a log line every this many iterations; 0 disables logging.
    pub log_every: usize,
    pub discriminator: DiscriminatorConfig,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            lr_generator: 0.0005,
            lr_discriminator: 0.0001,
            iterations: 8000,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            log_every: 100,
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl GanTrainConfig {
    /// One source and one target patch are drawn per iteration.
    pub const PATCHES_PER_ITERATION: usize = 1;

    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.lr_generator > 0.0 && self.lr_discriminator > 0.0;
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !rates_ok || !betas_ok || self.discriminator.base_width == 0 {
            return Err(CoreError::invalid(format!("invalid GAN configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

impl LossRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iter {} d_loss {:.6} g_loss {:.6}",
            self.iteration, self.d_loss, self.g_loss
        )
    }
}

#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub map: ColorMap,
    pub discriminator: Discriminator,
    pub history: Vec<LossRecord>,
}

pub fn train_colormapgan(source: &[RasterImage], target: &[RasterImage], cfg: &GanTrainConfig) -> Result<GanOutcome> {
    train_colormapgan_logged(source, target, cfg, &mut std::io::sink())
}

/// Fits a color map so recolored `source` patches score as `target` patches.
///
/// Each iteration draws one patch per domain (uniformly, with replacement),
/// updates the color entries touched by the source patch against the current
/// critic, and updates the critic on the same real/fake pair.
pub fn train_colormapgan_logged(
    source: &[RasterImage],
    target: &[RasterImage],
    cfg: &GanTrainConfig,
    log: &mut dyn Write,
) -> Result<GanOutcome> {
    if source.is_empty() || target.is_empty() {
        return Err(CoreError::invalid(
            "ColorMapGAN needs at least one source and one target patch",
        ));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc = Discriminator::new(cfg.discriminator, &mut rng);
    let mut disc_opt = Adam::new(
        disc.params(),
        AdamConfig::new(cfg.lr_discriminator, cfg.beta1, cfg.beta2),
    );
    let mut map = ColorMap::new();
    let mut map_opt = ColorMapAdam::new(AdamConfig::new(cfg.lr_generator, cfg.beta1, cfg.beta2));
    let mut history = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let src = &source[rng.random_range(0..source.len())];
        let tgt = &target[rng.random_range(0..target.len())];
        if (src.height(), src.width()) != (tgt.height(), tgt.width()) {
            return Err(CoreError::invalid(format!(
                "source patch {}x{} and target patch {}x{} differ in extent",
                src.height(),
                src.width(),
                tgt.height(),
                tgt.width()
            )));
        }
        let trace = map.apply(src);
        let fake = trace.output();

        // generator: push D(G(x)) towards 1 through the frozen critic
        let mut g = Graph::new();
        let fake_var = g.leaf(fake.clone());
        let pass = disc.forward(&mut g, fake_var, false)?;
        let loss_g = g_loss_on(&mut g, pass.score);
        let g_value = g.value(loss_g).data()[0];
        let grads = g.backward(loss_g)?;
        let upstream = grads.get(fake_var).expect("leaf gradient");
        let map_grad = trace.backward(upstream)?;
        drop(g);

        // critic: target patch is real, the recolored source patch fake
        let mut batch = normalize(tgt).into_data();
        batch.extend_from_slice(fake.data());
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 3, src.height(), src.width()], batch)?);
        let pass = disc.forward(&mut g, x, true)?;
        let loss_d = d_loss_on(&mut g, pass.score, &[true, false])?;
        let d_value = g.value(loss_d).data()[0];
        let grads = g.backward(loss_d)?;
        disc.accumulate(&grads, &pass);
        drop(g);

        map_opt.step(&mut map, &map_grad);
        disc_opt.step(disc.params_mut());

        let record = LossRecord {
            iteration,
            d_loss: d_value,
            g_loss: g_value,
        };
        if cfg.log_every > 0 && iteration % cfg.log_every == 0 {
            writeln!(log, "{}", record.log_line())?;
        }
        history.push(record);
    }
    Ok(GanOutcome {
        map,
        discriminator: disc,
        history,
    })
}

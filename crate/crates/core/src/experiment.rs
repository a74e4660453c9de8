//! The four-step adaptation workflow: train on the source, adapt colors,
//! fine-tune on recolored source tiles, label the target.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{AdaptSettings, AdaptationMethod, FittedAdaptation};
use crate::adversary::GanTrainConfig;
use crate::kv::KeyValues;
use crate::metrics::{format_table, iou, IouReport};
use crate::raster::{LabelMask, RasterImage};
use crate::segmenter::{finetune, predict, train_segmenter, SegNet, SegNetConfig, SegTrainConfig};
use crate::synth::SynthPair;
use crate::tiling::TileGrid;
use crate::{CoreError, Result};

/// Workflow steps; each draws its seed from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Synth = 0,
    Train = 1,
    Adapt = 2,
    Finetune = 3,
    Oracle = 4,
}

impl Step {
    pub fn name(self) -> &'static str {
        match self {
            Step::Synth => "synth",
            Step::Train => "train",
            Step::Adapt => "adapt",
            Step::Finetune => "finetune",
            Step::Oracle => "oracle",
        }
    }
}

/// `master + step + run`.
pub fn step_seed(master: u64, step: Step, run: u64) -> u64 {
    master.wrapping_add(step as u64).wrapping_add(run)
}

/// One line recording the seed a step ran with.
pub fn audit_line(master: u64, step: Step, run: u64) -> String {
    format!(
        "audit step={} master_seed={master} run={run} seed={}",
        step.name(),
        step_seed(master, step, run)
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub method: String,
    pub net: SegNetConfig,
    /// Segmenter training patch side and overlap.
    pub seg_patch: usize,
    pub seg_overlap: usize,
    /// Overlap of the prediction grid; its patch side is `seg_patch`.
    pub predict_overlap: usize,
    pub train: SegTrainConfig,
    pub finetune: SegTrainConfig,
    pub adapt: AdaptSettings,
    pub runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            method: "colormapgan".into(),
            net: SegNetConfig {
                depth: 2,
                width: 8,
                slope: 0.2,
            },
            seg_patch: 16,
            seg_overlap: 8,
            predict_overlap: 4,
            train: SegTrainConfig::initial(0),
            finetune: SegTrainConfig::finetune(0),
            adapt: AdaptSettings {
                gan: GanTrainConfig::default(),
                patch_size: 64,
                overlap: 32,
            },
            runs: 20,
        }
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = RunConfig::default();
        let seg = |prefix: &str, def: &SegTrainConfig| -> Result<SegTrainConfig> {
            Ok(SegTrainConfig {
                lr: kv.get_or(&format!("{prefix}.lr"), def.lr)?,
                beta1: kv.get_or(&format!("{prefix}.beta1"), def.beta1)?,
                beta2: kv.get_or(&format!("{prefix}.beta2"), def.beta2)?,
                batch_size: kv.get_or(&format!("{prefix}.batch"), def.batch_size)?,
                iterations: kv.get_or(&format!("{prefix}.iters"), def.iterations)?,
                seed: def.seed,
                log_every: kv.get_or(&format!("{prefix}.log_every"), def.log_every)?,
            })
        };
        let g = &d.adapt.gan;
        let cfg = RunConfig {
            seed: kv.get_or("seed", d.seed)?,
            method: kv.get_or("method", d.method.clone())?,
            net: SegNetConfig {
                depth: kv.get_or("seg.depth", d.net.depth)?,
                width: kv.get_or("seg.width", d.net.width)?,
                slope: kv.get_or("seg.slope", d.net.slope)?,
            },
            seg_patch: kv.get_or("seg.patch", d.seg_patch)?,
            seg_overlap: kv.get_or("seg.overlap", d.seg_overlap)?,
            predict_overlap: kv.get_or("predict.overlap", d.predict_overlap)?,
            train: seg("train", &d.train)?,
            finetune: seg("finetune", &d.finetune)?,
            adapt: AdaptSettings {
                gan: GanTrainConfig {
                    lr_generator: kv.get_or("gan.lr_g", g.lr_generator)?,
                    lr_discriminator: kv.get_or("gan.lr_d", g.lr_discriminator)?,
                    iterations: kv.get_or("gan.iters", g.iterations)?,
                    beta1: kv.get_or("gan.beta1", g.beta1)?,
                    beta2: kv.get_or("gan.beta2", g.beta2)?,
                    seed: g.seed,
                    log_every: kv.get_or("gan.log_every", g.log_every)?,
                    discriminator: crate::adversary::DiscriminatorConfig {
                        base_width: kv.get_or("gan.width", g.discriminator.base_width)?,
                        slope: kv.get_or("gan.slope", g.discriminator.slope)?,
                    },
                },
                patch_size: kv.get_or("gan.patch", d.adapt.patch_size)?,
                overlap: kv.get_or("gan.overlap", d.adapt.overlap)?,
            },
            runs: kv.get_or("runs", d.runs)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("method", &self.method);
        kv.set("runs", self.runs);
        kv.set("seg.depth", self.net.depth);
        kv.set("seg.width", self.net.width);
        kv.set("seg.slope", self.net.slope);
        kv.set("seg.patch", self.seg_patch);
        kv.set("seg.overlap", self.seg_overlap);
        kv.set("predict.overlap", self.predict_overlap);
        for (prefix, t) in [("train", &self.train), ("finetune", &self.finetune)] {
            kv.set(format!("{prefix}.lr"), t.lr);
            kv.set(format!("{prefix}.beta1"), t.beta1);
            kv.set(format!("{prefix}.beta2"), t.beta2);
            kv.set(format!("{prefix}.batch"), t.batch_size);
            kv.set(format!("{prefix}.iters"), t.iterations);
            kv.set(format!("{prefix}.log_every"), t.log_every);
        }
        let g = &self.adapt.gan;
        kv.set("gan.lr_g", g.lr_generator);
        kv.set("gan.lr_d", g.lr_discriminator);
        kv.set("gan.iters", g.iterations);
        kv.set("gan.beta1", g.beta1);
        kv.set("gan.beta2", g.beta2);
        kv.set("gan.log_every", g.log_every);
        kv.set("gan.width", g.discriminator.base_width);
        kv.set("gan.slope", g.discriminator.slope);
        kv.set("gan.patch", self.adapt.patch_size);
        kv.set("gan.overlap", self.adapt.overlap);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        if !self.seg_patch.is_multiple_of(self.net.extent_multiple()) {
            return Err(CoreError::invalid(format!(
                "seg.patch {} must be a multiple of {}",
                self.seg_patch,
                self.net.extent_multiple()
            )));
        }
        if self.seg_overlap >= self.seg_patch || self.predict_overlap >= self.seg_patch {
            return Err(CoreError::invalid(
                "seg.overlap and predict.overlap must be smaller than seg.patch",
            ));
        }
        if self.adapt.overlap >= self.adapt.patch_size {
            return Err(CoreError::invalid("gan.overlap must be smaller than gan.patch"));
        }
        if self.runs == 0 {
            return Err(CoreError::invalid("runs must be at least 1"));
        }
        Ok(())
    }

    pub fn predict_grid(&self, height: usize, width: usize) -> Result<TileGrid> {
        TileGrid::new(height, width, self.seg_patch, self.predict_overlap)
    }
}

/// Tiles an image and its mask on the same grid.
pub fn patch_pairs(
    image: &RasterImage,
    mask: &LabelMask,
    size: usize,
    overlap: usize,
) -> Result<Vec<(RasterImage, LabelMask)>> {
    let grid = TileGrid::new(image.height(), image.width(), size, overlap)?;
    Ok(grid.extract(image)?.into_iter().zip(grid.extract_mask(mask)?).collect())
}

/// Fresh segmenter trained on one labeled image. `step` is
/// [`Step::Train`] for the source model and [`Step::Oracle`] for a model
/// trained on labeled target data.
pub fn train_initial(
    cfg: &RunConfig,
    image: &RasterImage,
    mask: &LabelMask,
    step: Step,
    log: &mut dyn Write,
) -> Result<SegNet> {
    let seed = step_seed(cfg.seed, step, 0);
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(1);
    let mut net = SegNet::new(cfg.net, &mut init)?;
    let data = patch_pairs(image, mask, cfg.seg_patch, cfg.seg_overlap)?;
    let train = SegTrainConfig {
        seed,
        ..cfg.train.clone()
    };
    train_segmenter(&data, &mut net, &train, log)?;
    Ok(net)
}

/// Fits the adaptation method on unlabeled images from both domains.
pub fn fit_adaptation(
    cfg: &RunConfig,
    method: &dyn AdaptationMethod,
    source: &[RasterImage],
    target: &[RasterImage],
    log: &mut dyn Write,
) -> Result<Box<dyn FittedAdaptation>> {
    let mut settings = cfg.adapt.clone();
    settings.gan.seed = step_seed(cfg.seed, Step::Adapt, 0);
    method.fit(source, target, &settings, log)
}

/// Fine-tunes a copy of `net` on recolored source tiles with the source
/// mask; run `run` of a repetition uses its own seed.
pub fn finetune_run(
    cfg: &RunConfig,
    net: &SegNet,
    recolored: &RasterImage,
    mask: &LabelMask,
    run: u64,
    log: &mut dyn Write,
) -> Result<SegNet> {
    let mut net = net.clone();
    let data = patch_pairs(recolored, mask, cfg.seg_patch, cfg.seg_overlap)?;
    let ft = SegTrainConfig {
        seed: step_seed(cfg.seed, Step::Finetune, run),
        ..cfg.finetune.clone()
    };
    finetune(&mut net, &data, &ft, log)?;
    Ok(net)
}

pub fn predict_image(cfg: &RunConfig, net: &SegNet, image: &RasterImage) -> Result<LabelMask> {
    predict(net, image, &cfg.predict_grid(image.height(), image.width())?)
}

/// Everything one source-to-target comparison produces.
#[derive(Debug)]
pub struct ShiftExperiment {
    pub baseline: IouReport,
    pub adapted: IouReport,
    pub oracle: IouReport,
    pub artifacts: Vec<crate::adapt::Artifact>,
    pub source_checkpoint: Vec<u8>,
    pub adapted_checkpoint: Vec<u8>,
    pub oracle_checkpoint: Vec<u8>,
}

impl ShiftExperiment {
    pub fn report(&self, method: &str) -> String {
        format_table(&[
            ("none", &self.baseline),
            (method, &self.adapted),
            ("oracle", &self.oracle),
        ])
    }
}

/// Source training, no-adaptation evaluation, adaptation with fine-tuning,
/// and a target-trained reference model, all on one synthetic pair. The
/// target mask is used for evaluation and the reference model only.
pub fn run_shift_experiment(
    cfg: &RunConfig,
    method: &dyn AdaptationMethod,
    pair: &SynthPair,
    log: &mut dyn Write,
) -> Result<ShiftExperiment> {
    let (source, target) = (&pair.a, &pair.b);
    writeln!(log, "{}", audit_line(cfg.seed, Step::Train, 0))?;
    let net = train_initial(cfg, &source.image, &source.mask, Step::Train, log)?;
    let baseline = iou(&predict_image(cfg, &net, &target.image)?, &target.mask)?;

    writeln!(log, "{}", audit_line(cfg.seed, Step::Adapt, 0))?;
    let fitted = fit_adaptation(
        cfg,
        method,
        std::slice::from_ref(&source.image),
        std::slice::from_ref(&target.image),
        log,
    )?;
    writeln!(log, "{}", audit_line(cfg.seed, Step::Finetune, 0))?;
    let recolored = fitted.recolor_source(&source.image)?;
    let tuned = finetune_run(cfg, &net, &recolored, &source.mask, 0, log)?;
    let prepared = fitted.prepare_target(&target.image)?;
    let adapted = iou(&predict_image(cfg, &tuned, &prepared)?, &target.mask)?;

    writeln!(log, "{}", audit_line(cfg.seed, Step::Oracle, 0))?;
    let oracle_net = train_initial(cfg, &target.image, &target.mask, Step::Oracle, log)?;
    let oracle = iou(&predict_image(cfg, &oracle_net, &target.image)?, &target.mask)?;

    Ok(ShiftExperiment {
        baseline,
        adapted,
        oracle,
        artifacts: fitted.artifacts(),
        source_checkpoint: net.to_checkpoint().payload(),
        adapted_checkpoint: tuned.to_checkpoint().payload(),
        oracle_checkpoint: oracle_net.to_checkpoint().payload(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_follow_master_step_run() {
        assert_eq!(step_seed(100, Step::Finetune, 4), 107);
        assert_eq!(
            audit_line(5, Step::Adapt, 0),
            "audit step=adapt master_seed=5 run=0 seed=7"
        );
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        cfg.train.iterations = 17;
        cfg.adapt.gan.discriminator.base_width = 8;
        cfg.method = "histmatch".into();
        assert_eq!(RunConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn validation_names_field() {
        let mut kv = KeyValues::new();
        kv.set("seg.patch", 18);
        let err = RunConfig::from_kv(&kv).unwrap_err().to_string();
        assert!(err.contains("seg.patch"), "{err}");
        let mut kv = KeyValues::new();
        kv.set("runs", 0);
        assert!(RunConfig::from_kv(&kv).is_err());
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cmgan_core::adapt::Registry;
use cmgan_core::dataset::{dataset_stats, write_synth_dataset, Dataset, Stage};
use cmgan_core::experiment::{
    audit_line, finetune_run, fit_adaptation, predict_image, step_seed, train_initial, RunConfig, Step,
};
use cmgan_core::metrics::{format_csv, format_table, iou, majority_vote, mean_iou_over_runs};
use cmgan_core::pngio::{load_image, load_mask, save_image, save_mask, save_mask_colorized};
use cmgan_core::raster::LabelMask;
use cmgan_core::segmenter::SegNet;
use cmgan_core::synth::synth_generate;
use cmgan_core::CoreError;
use cmgan_nn::checkpoint::{payload_path, Checkpoint};

use crate::settings::{load, ItersKey};
use crate::Common;

pub const SEGMENTER: &str = "segmenter.ckpt";
pub const FINETUNED: &str = "finetuned.ckpt";
pub const SOURCE_RECOLORED: &str = "source_recolored.png";
pub const TARGET_PREPARED: &str = "target_prepared.png";

fn out_dir(common: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

fn require(path: &Path) -> anyhow::Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CoreError::MissingArtifact(path.to_path_buf()).into())
    }
}

/// Prints the audit line and appends it to `audit.txt` in `out`.
fn audit(out: &Path, run: &RunConfig, step: Step, index: u64) -> anyhow::Result<()> {
    let line = audit_line(run.seed, step, index);
    println!("{line}");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("audit.txt"))?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn load_net(model: &Path) -> anyhow::Result<SegNet> {
    require(model)?;
    require(&payload_path(model))?;
    let ck = Checkpoint::load(model).map_err(CoreError::from)?;
    Ok(SegNet::from_checkpoint(&ck)?)
}

fn save_net(net: &SegNet, path: &Path) -> anyhow::Result<()> {
    net.to_checkpoint().save(path).map_err(CoreError::from)?;
    Ok(())
}

pub fn synth(common: &Common) -> anyhow::Result<()> {
    let settings = load(common, ItersKey::None)?;
    let mut cfg = settings.synth;
    cfg.seed = step_seed(settings.run.seed, Step::Synth, 0);
    let pair = synth_generate(&cfg)?;
    let out = out_dir(common)?;
    write_synth_dataset(out, &cfg, &pair)?;
    fs::write(out.join("stats.txt"), dataset_stats(&[pair.a.mask])?.to_text())?;
    audit(out, &settings.run, Step::Synth, 0)
}

pub fn train(common: &Common, data: &Path) -> anyhow::Result<()> {
    let run = load(common, ItersKey::Train)?.run;
    let ds = Dataset::open(data)?;
    let out = out_dir(common)?;
    audit(out, &run, Step::Train, 0)?;
    let net = train_initial(
        &run,
        &ds.source_image()?,
        &ds.source_mask()?,
        Step::Train,
        &mut std::io::stderr(),
    )?;
    save_net(&net, &out.join(SEGMENTER))
}

pub fn adapt(common: &Common, data: &Path) -> anyhow::Result<()> {
    let run = load(common, ItersKey::Gan)?.run;
    let registry = Registry::builtin();
    let method = registry.get(&run.method)?;
    let ds = Dataset::open(data)?;
    let (source, target) = (ds.source_image()?, ds.target_image()?);
    let out = out_dir(common)?;
    audit(out, &run, Step::Adapt, 0)?;
    let fitted = fit_adaptation(
        &run,
        method,
        std::slice::from_ref(&source),
        std::slice::from_ref(&target),
        &mut std::io::stderr(),
    )?;
    for artifact in fitted.artifacts() {
        fs::write(out.join(&artifact.file_name), &artifact.bytes)?;
    }
    save_image(&out.join(SOURCE_RECOLORED), &fitted.recolor_source(&source)?)?;
    save_image(&out.join(TARGET_PREPARED), &fitted.prepare_target(&target)?)?;
    fs::write(out.join("method.txt"), format!("{}\n", method.name()))?;
    Ok(())
}

pub fn finetune(common: &Common, data: &Path, model: &Path, adapted: &Path) -> anyhow::Result<()> {
    let run = load(common, ItersKey::Finetune)?.run;
    let net = load_net(model)?;
    let recolored = load_image(&require(&adapted.join(SOURCE_RECOLORED))?)?;
    let mask = Dataset::open(data)?.source_mask()?;
    let out = out_dir(common)?;
    audit(out, &run, Step::Finetune, 0)?;
    let tuned = finetune_run(&run, &net, &recolored, &mask, 0, &mut std::io::stderr())?;
    save_net(&tuned, &out.join(FINETUNED))
}

pub fn predict(common: &Common, model: &Path, image: &Path) -> anyhow::Result<()> {
    let run = load(common, ItersKey::None)?.run;
    let net = load_net(model)?;
    let image = load_image(&require(image)?)?;
    let mask = predict_image(&run, &net, &image)?;
    let out = out_dir(common)?;
    save_mask(&out.join("prediction.png"), &mask)?;
    save_mask_colorized(&out.join("prediction_color.png"), &mask)?;
    Ok(())
}

pub fn eval(common: &Common, pred: &Path, data: Option<&Path>, truth: Option<&Path>) -> anyhow::Result<()> {
    load(common, ItersKey::None)?;
    let prediction = load_mask(&require(pred)?)?;
    let truth: LabelMask = match (truth, data) {
        (Some(t), _) => load_mask(&require(t)?)?,
        (None, Some(d)) => Dataset::open(d)?.target_mask(Stage::Eval)?,
        (None, None) => return Err(CoreError::invalid("eval needs --truth or --data").into()),
    };
    let report = iou(&prediction, &truth)?;
    let out = out_dir(common)?;
    let table = format_table(&[("prediction", &report)]);
    fs::write(out.join("iou.txt"), &table)?;
    fs::write(out.join("iou.csv"), format_csv(&[("prediction", &report)]))?;
    print!("{table}");
    Ok(())
}

pub fn repeat(common: &Common, data: &Path, model: &Path, adapted: &Path, runs: Option<usize>) -> anyhow::Result<()> {
    let mut run = load(common, ItersKey::Finetune)?.run;
    if let Some(n) = runs {
        run.runs = n;
    }
    if run.runs == 0 {
        return Err(CoreError::invalid("runs must be at least 1").into());
    }
    let net = load_net(model)?;
    let recolored = load_image(&require(&adapted.join(SOURCE_RECOLORED))?)?;
    let target = load_image(&require(&adapted.join(TARGET_PREPARED))?)?;
    let ds = Dataset::open(data)?;
    let mask = ds.source_mask()?;
    let truth = ds.target_mask(Stage::Eval)?;
    let out = out_dir(common)?;

    let mut reports = Vec::new();
    let mut predictions = Vec::new();
    for i in 0..run.runs as u64 {
        audit(out, &run, Step::Finetune, i)?;
        let tuned = finetune_run(&run, &net, &recolored, &mask, i, &mut std::io::stderr())?;
        let pred = predict_image(&run, &tuned, &target)?;
        reports.push(iou(&pred, &truth)?);
        predictions.push(pred);
    }
    let summary = mean_iou_over_runs(&reports)?;
    let vote = majority_vote(&predictions)?;
    let vote_report = iou(&vote, &truth)?;

    let names: Vec<String> = (0..reports.len()).map(|i| format!("run{i}")).collect();
    let rows: Vec<(&str, _)> = names.iter().map(String::as_str).zip(&reports).collect();
    fs::write(out.join("runs.csv"), format_csv(&rows))?;
    let [b, r, t] = summary.class_mean;
    let text = format!(
        "runs {}\nmean building {:.2}\nmean road {:.2}\nmean tree {:.2}\nmean Overall {:.2}\nstd Overall {:.2}\n\n{}",
        summary.runs,
        b * 100.0,
        r * 100.0,
        t * 100.0,
        summary.overall_mean * 100.0,
        summary.overall_std * 100.0,
        format_table(&[("majority vote", &vote_report)])
    );
    fs::write(out.join("summary.txt"), &text)?;
    save_mask(&out.join("vote.png"), &vote)?;
    save_mask_colorized(&out.join("vote_color.png"), &vote)?;
    print!("{text}");
    Ok(())
}

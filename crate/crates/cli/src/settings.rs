//! Layered configuration: defaults, file, `--set`, flags.

use std::collections::BTreeSet;

use anyhow::Context;
use cmgan_core::experiment::RunConfig;
use cmgan_core::kv::KeyValues;
use cmgan_core::synth::SynthConfig;
use cmgan_core::CoreError;

use crate::Common;

pub struct Settings {
    pub run: RunConfig,
    pub synth: SynthConfig,
}

/// Key that `--iters` sets for a subcommand.
#[derive(Clone, Copy)]
pub enum ItersKey {
    None,
    Train,
    Gan,
    Finetune,
}

fn known_keys() -> BTreeSet<String> {
    let mut keys: BTreeSet<String> = RunConfig::default().to_kv().keys().map(String::from).collect();
    keys.extend(SynthConfig::default().to_kv().keys().map(String::from));
    keys
}

pub fn load(common: &Common, iters: ItersKey) -> anyhow::Result<Settings> {
    let mut kv = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::new(),
    };
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CoreError::invalid(format!("--set expects KEY=VALUE, got {item:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    if let Some(method) = &common.method {
        kv.set("method", method);
    }
    if let Some(n) = common.iters {
        match iters {
            ItersKey::None => {}
            ItersKey::Train => kv.set("train.iters", n),
            ItersKey::Gan => kv.set("gan.iters", n),
            ItersKey::Finetune => kv.set("finetune.iters", n),
        }
    }
    let known = known_keys();
    if let Some(bad) = kv.keys().find(|k| !known.contains(*k)) {
        return Err(CoreError::invalid(format!("unknown configuration key {bad:?}")).into());
    }
    Ok(Settings {
        run: RunConfig::from_kv(&kv)?,
        synth: SynthConfig::from_kv(&kv)?,
    })
}

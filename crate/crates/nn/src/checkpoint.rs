//! Parameter persistence.
//!
//! A checkpoint is a plain-text manifest plus a sibling `<manifest>.bin`
//! holding every parameter as little-endian `f32` in manifest order.
//!
//! ```text
//! cmgan-checkpoint 1
//! meta depth 3
//! param enc0.conv0.weight 16 3 3 3
//! param enc0.conv0.bias 16
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::{NnError, Parameter, Result, Tensor};

const HEADER: &str = "cmgan-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            params: params
                .into_iter()
                .map(|p| (p.name().to_string(), p.value().clone()))
                .collect(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| NnError::Checkpoint(format!("missing meta key {key:?}")))?;
        raw.parse()
            .map_err(|_| NnError::Checkpoint(format!("meta key {key:?} has unparsable value {raw:?}")))
    }

    /// Copies stored values into `params`, matched by position and name.
    pub fn restore_into(&self, params: &mut [Parameter]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} parameters, checkpoint holds {}",
                params.len(),
                self.params.len()
            )));
        }
        for (p, (name, value)) in params.iter_mut().zip(&self.params) {
            if p.name() != name || p.shape() != value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {} {:?} does not match stored {name} {:?}",
                    p.name(),
                    p.shape(),
                    value.shape()
                )));
            }
            p.set_value(value.clone());
        }
        Ok(())
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.params {
            let _ = write!(out, "param {name}");
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
        }
        out
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for (_, t) in &self.params {
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn parse(manifest: &str, payload: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            _ => return Err(NnError::Checkpoint("missing manifest header".into())),
        }
        let mut ck = Checkpoint::default();
        let mut offset = 0usize;
        for (lineno, line) in lines {
            let mut parts = line.split_whitespace();
            let bad = |what: &str| NnError::Checkpoint(format!("manifest line {}: {what}", lineno + 1));
            match parts.next() {
                None => continue,
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad("meta without key"))?;
                    let value = parts.collect::<Vec<_>>().join(" ");
                    ck.meta.insert(key.to_string(), value);
                }
                Some("param") => {
                    let name = parts.next().ok_or_else(|| bad("param without name"))?;
                    let shape = parts
                        .map(|d| d.parse::<usize>().map_err(|_| bad("bad extent")))
                        .collect::<Result<Vec<_>>>()?;
                    let count: usize = shape.iter().product();
                    let end = offset + 4 * count;
                    if end > payload.len() {
                        return Err(bad(&format!(
                            "payload truncated: need {end} bytes, have {}",
                            payload.len()
                        )));
                    }
                    let data = payload[offset..end]
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                        .collect();
                    offset = end;
                    ck.params.push((name.to_string(), Tensor::from_vec(&shape, data)?));
                }
                Some(other) => return Err(bad(&format!("unknown record {other:?}"))),
            }
        }
        if offset != payload.len() {
            return Err(NnError::Checkpoint(format!(
                "{} trailing payload bytes",
                payload.len() - offset
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        fs::write(manifest_path, self.manifest_text())?;
        fs::write(payload_path(manifest_path), self.payload())?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(manifest_path)?;
        let payload = fs::read(payload_path(manifest_path))?;
        Self::parse(&manifest, &payload)
    }
}

/// Location of the binary payload that accompanies a manifest.
pub fn payload_path(manifest_path: &Path) -> PathBuf {
    let mut s = manifest_path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

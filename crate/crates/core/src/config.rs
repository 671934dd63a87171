//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known to the configuration it is applied to; lists are comma-separated.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataset::DatasetConfig;
use crate::diffusion::{DenoiserConfig, SampleOptions};
use crate::error::{Error, Result};
use crate::providers::ProviderConfig;
use crate::trainer::TrainConfig;

/// Parse `key = value` lines. Duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

/// A configuration that can be set and listed key by key.
pub trait KeyValue {
    /// Set `key`; `Ok(false)` when the key is not one of ours.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    fn entries(&self) -> Vec<(String, String)>;
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

/// Enums are spelled as their serde names.
fn named<T: DeserializeOwned>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("{key}: unknown value {v:?}")))
}

fn name_of<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Apply every entry to the first config that knows its key.
pub fn apply(map: &BTreeMap<String, String>, targets: &mut [&mut dyn KeyValue]) -> Result<()> {
    for (k, v) in map {
        let mut known = false;
        for t in targets.iter_mut() {
            if t.set(k, v)? {
                known = true;
                break;
            }
        }
        if !known {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
    }
    Ok(())
}

/// `key = value` lines for a set of configs, in a stable order.
pub fn render(sources: &[&dyn KeyValue]) -> String {
    sources
        .iter()
        .flat_map(|s| s.entries())
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

impl KeyValue for ProviderConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let slot = match key {
            "embedder" => &mut self.embedder,
            "segmenter" => &mut self.segmenter,
            "unifier" => &mut self.unifier,
            _ => return Ok(false),
        };
        *slot = value.parse()?;
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("embedder".into(), self.embedder.to_string()),
            ("segmenter".into(), self.segmenter.to_string()),
            ("unifier".into(), self.unifier.to_string()),
        ]
    }
}

impl KeyValue for DatasetConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "groups" => self.groups = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "candidates_per_pair" => self.candidates_per_pair = num(key, v)?,
            "pairs_per_group" => self.pairs_per_group = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "test_fraction" => self.test_fraction = num(key, v)?,
            "grey" => self.grey = num(key, v)?,
            "selected_classes" => self.selected_classes = list(key, v)?,
            "failure_rate" => self.failure_rate = num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("groups".into(), self.groups.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("candidates_per_pair".into(), self.candidates_per_pair.to_string()),
            ("pairs_per_group".into(), self.pairs_per_group.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("test_fraction".into(), self.test_fraction.to_string()),
            ("grey".into(), self.grey.to_string()),
            ("selected_classes".into(), join(&self.selected_classes)),
            ("failure_rate".into(), self.failure_rate.to_string()),
        ]
    }
}

impl KeyValue for DenoiserConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "channels" => self.channels = num(key, v)?,
            "widths" => self.widths = list(key, v)?,
            "time_dim" => self.time_dim = num(key, v)?,
            "text_dim" => self.text_dim = num(key, v)?,
            "ssm_inner" => self.ssm_inner = num(key, v)?,
            "ssm_state" => self.ssm_state = num(key, v)?,
            "timesteps" => self.timesteps = num(key, v)?,
            "latent" => self.latent = named(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("channels".into(), self.channels.to_string()),
            ("widths".into(), join(&self.widths)),
            ("time_dim".into(), self.time_dim.to_string()),
            ("text_dim".into(), self.text_dim.to_string()),
            ("ssm_inner".into(), self.ssm_inner.to_string()),
            ("ssm_state".into(), self.ssm_state.to_string()),
            ("timesteps".into(), self.timesteps.to_string()),
            ("latent".into(), name_of(&self.latent)),
        ]
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "lambda_es" => self.lambda_es = num(key, v)?,
            "lambda_sam" => self.lambda_sam = num(key, v)?,
            "drop_fraction" => self.drop_fraction = num(key, v)?,
            "drop_mode" => self.drop_mode = named(key, v)?,
            "liu_fraction" => self.liu_fraction = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "model_seed" => self.model_seed = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "sam_normalize_by_mask" => self.sam_normalize_by_mask = flag(key, v)?,
            _ => return self.model.set(key, v),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut e = vec![
            ("steps".into(), self.steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("lambda_es".into(), self.lambda_es.to_string()),
            ("lambda_sam".into(), self.lambda_sam.to_string()),
            ("drop_fraction".into(), self.drop_fraction.to_string()),
            ("drop_mode".into(), name_of(&self.drop_mode)),
            ("liu_fraction".into(), self.liu_fraction.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("model_seed".into(), self.model_seed.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("sam_normalize_by_mask".into(), self.sam_normalize_by_mask.to_string()),
        ];
        e.extend(self.model.entries());
        e
    }
}

impl KeyValue for SampleOptions {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "sample_steps" => self.steps = num(key, v)?,
            "guidance_scale" => self.guidance_scale = num(key, v)?,
            "eta" => self.eta = num(key, v)?,
            "sample_mode" => self.mode = named(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("sample_steps".into(), self.steps.to_string()),
            ("guidance_scale".into(), self.guidance_scale.to_string()),
            ("eta".into(), self.eta.to_string()),
            ("sample_mode".into(), name_of(&self.mode)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{LatentKind, SampleMode};
    use crate::trainer::DropMode;

    #[test]
    fn rendered_config_parses_back_to_itself() {
        let mut t = TrainConfig {
            learning_rate: 3e-3,
            drop_mode: DropMode::Both,
            ..TrainConfig::default()
        };
        t.model.latent = LatentKind::Downsample2;
        t.model.widths = vec![4, 8];
        let mut s = SampleOptions::default();
        s.mode = SampleMode::Free;
        let p = ProviderConfig::default();
        let text = render(&[&t, &s, &p]);
        let (mut t2, mut s2, mut p2) = (TrainConfig::default(), SampleOptions::default(), ProviderConfig::default());
        apply(&parse_kv(&text).unwrap(), &mut [&mut t2, &mut s2, &mut p2]).unwrap();
        assert_eq!((t2, s2, p2), (t, s, p));

        let mut d = DatasetConfig::default();
        let text = render(&[&d]);
        d.groups = 1;
        apply(&parse_kv(&text).unwrap(), &mut [&mut d]).unwrap();
        assert_eq!(d, DatasetConfig::default());
    }

    #[test]
    fn bad_files_are_rejected() {
        let mut t = TrainConfig::default();
        for bad in ["stepz = 3", "steps 3", "steps = x", "steps = 1\nsteps = 2", "drop_mode = sometimes"] {
            let r = parse_kv(bad).and_then(|m| apply(&m, &mut [&mut t]));
            assert!(matches!(r, Err(Error::Config(_))), "{bad}");
        }
        let m = parse_kv("# comment\n\n steps = 7 \n").unwrap();
        apply(&m, &mut [&mut t]).unwrap();
        assert_eq!(t.steps, 7);
    }
}

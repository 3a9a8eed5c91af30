//! Flat `key = value` experiment files with command-line overrides.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are skipped.
//! Unknown keys and unparsable values are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{OdmError, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `(train, val, test)` fractions for synthetic or unsplit data.
    pub split: (f64, f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: (0.7, 0.1, 0.2),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "lr",
    "batch",
    "lambda",
    "epochs",
    "grad_clip",
    "seed",
    "occlusion",
    "noise_std",
    "val_every",
    "split",
    "steps",
    "schedule",
    "init_seed",
    "model_dim",
    "heads",
    "encoder_layers",
    "decoder_layers",
    "masking_block_layers",
    "dropout",
    "offset_clamp",
    "spatial_dim",
    "ffn_dim",
    "fusion",
    "attention",
    "conditioning",
    "spatial_residual",
    "masking_block",
    "modalities",
    "intention.layers",
    "intention.heads",
    "intention.model_dim",
    "intention.ffn_dim",
    "intention.pooling",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| OdmError::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(OdmError::config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

fn parse_split(value: &str) -> Result<(f64, f64, f64)> {
    let parts = value
        .split(',')
        .map(|p| parse::<f64>("split", p.trim()))
        .collect::<Result<Vec<_>>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(OdmError::config(
            "split needs three comma-separated fractions",
        )),
    }
}

/// `key = value` pairs of a config text, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| OdmError::Parse {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Split a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| OdmError::argument(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        let d = &mut m.denoiser;
        let it = &mut m.intention;
        match key {
            "lr" => t.lr = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "occlusion" => t.occlusion = parse(key, value)?,
            "noise_std" => t.noise_std = parse(key, value)?,
            "val_every" => t.val_every = parse(key, value)?,
            "split" => self.split = parse_split(value)?,
            "steps" => m.steps = parse(key, value)?,
            "schedule" => m.schedule = parse(key, value)?,
            "init_seed" => m.init_seed = parse(key, value)?,
            "model_dim" => d.model_dim = parse(key, value)?,
            "heads" => d.heads = parse(key, value)?,
            "encoder_layers" => d.encoder_layers = parse(key, value)?,
            "decoder_layers" => d.decoder_layers = parse(key, value)?,
            "masking_block_layers" => d.masking_block_layers = parse(key, value)?,
            "dropout" => d.dropout = parse(key, value)?,
            "offset_clamp" => d.offset_clamp = parse(key, value)?,
            "spatial_dim" => d.spatial_dim = parse(key, value)?,
            "ffn_dim" => d.ffn_dim = parse(key, value)?,
            "fusion" => d.fusion = parse(key, value)?,
            "attention" => d.attention = parse(key, value)?,
            "conditioning" => d.conditioning = parse(key, value)?,
            "spatial_residual" => d.spatial_residual = parse(key, value)?,
            "masking_block" => d.masking_block = parse_bool(key, value)?,
            "modalities" => d.modalities = parse(key, value)?,
            "intention.layers" => it.layers = parse(key, value)?,
            "intention.heads" => it.heads = parse(key, value)?,
            "intention.model_dim" => it.model_dim = parse(key, value)?,
            "intention.ffn_dim" => it.ffn_dim = parse(key, value)?,
            "intention.pooling" => it.pooling = parse(key, value)?,
            _ => return Err(OdmError::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        let m = &self.model;
        let d = &m.denoiser;
        let it = &m.intention;
        Ok(match key {
            "lr" => format!("{:e}", t.lr),
            "batch" => t.batch.to_string(),
            "lambda" => t.lambda.to_string(),
            "epochs" => t.epochs.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "seed" => t.seed.to_string(),
            "occlusion" => t.occlusion.to_string(),
            "noise_std" => t.noise_std.to_string(),
            "val_every" => t.val_every.to_string(),
            "split" => format!("{},{},{}", self.split.0, self.split.1, self.split.2),
            "steps" => m.steps.to_string(),
            "schedule" => m.schedule.to_string(),
            "init_seed" => m.init_seed.to_string(),
            "model_dim" => d.model_dim.to_string(),
            "heads" => d.heads.to_string(),
            "encoder_layers" => d.encoder_layers.to_string(),
            "decoder_layers" => d.decoder_layers.to_string(),
            "masking_block_layers" => d.masking_block_layers.to_string(),
            "dropout" => d.dropout.to_string(),
            "offset_clamp" => d.offset_clamp.to_string(),
            "spatial_dim" => d.spatial_dim.to_string(),
            "ffn_dim" => d.ffn_dim.to_string(),
            "fusion" => d.fusion.to_string(),
            "attention" => d.attention.to_string(),
            "conditioning" => d.conditioning.to_string(),
            "spatial_residual" => d.spatial_residual.to_string(),
            "masking_block" => d.masking_block.to_string(),
            "modalities" => d.modalities.to_string(),
            "intention.layers" => it.layers.to_string(),
            "intention.heads" => it.heads.to_string(),
            "intention.model_dim" => it.model_dim.to_string(),
            "intention.ffn_dim" => it.ffn_dim.to_string(),
            "intention.pooling" => it.pooling.to_string(),
            _ => return Err(OdmError::config(format!("unknown config key {key:?}"))),
        })
    }

    pub fn apply_pairs<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k.as_ref(), v.as_ref())?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| OdmError::io(p, e))?;
            cfg.apply_pairs(&parse_pairs(&text)?)?;
        }
        cfg.apply_pairs(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.denoiser.validate()?;
        self.model.intention.validate()?;
        if self.model.steps == 0 {
            return Err(OdmError::config("steps must be at least 1"));
        }
        Ok(())
    }

    /// Every key with its current value, one `key = value` per line. The
    /// output parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("fusion", "average").unwrap();
        cfg.set("modalities", "BC").unwrap();
        cfg.set("lr", "3e-4").unwrap();
        cfg.set("schedule", "linear").unwrap();
        let mut back = RunConfig::default();
        back.apply_pairs(&parse_pairs(&cfg.to_text()).unwrap())
            .unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(OdmError::Config(_))));
        assert!(cfg.set("batch", "x").is_err());
        assert!(matches!(
            parse_pairs("a = 1\nbroken"),
            Err(OdmError::Parse { line: 2, .. })
        ));
        assert!(parse_override("epochs").is_err());
        assert_eq!(
            parse_pairs("# c\n\nepochs = 3 # tail").unwrap(),
            vec![("epochs".into(), "3".into())]
        );
    }
}

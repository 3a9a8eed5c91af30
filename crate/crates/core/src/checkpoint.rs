//! Versioned JSON checkpoint container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::NormalizationStats;
use crate::diffusion::NoiseSchedule;
use crate::error::{OdmError, Result};
use crate::model::{ModelConfig, OdmModel};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format_version: u32,
    config: ModelConfig,
    schedule: NoiseSchedule,
    stats: NormalizationStats,
    params: Vec<NamedTensor>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Write `model` to `path`; parameters are stored as `f64`.
pub fn save<S: Scalar>(model: &OdmModel<S>, path: &Path) -> Result<()> {
    let container = Container {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        schedule: model.schedule.clone(),
        stats: model.stats.clone(),
        params: model
            .params
            .iter()
            .map(|(name, m)| NamedTensor {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                data: m.to_f64_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&container).map_err(|e| OdmError::Serde {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| OdmError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| OdmError::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<OdmModel<S>> {
    let text = fs::read_to_string(path).map_err(|e| OdmError::io(path, e))?;
    let serde_err = |e: serde_json::Error| OdmError::Serde {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_str(&text).map_err(serde_err)?;
    if probe.format_version != FORMAT_VERSION {
        return Err(OdmError::Version {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let c: Container = serde_json::from_str(&text).map_err(serde_err)?;
    let mut model = OdmModel::<S>::new(c.config, c.stats)?;
    if c.schedule.steps() != model.schedule.steps() {
        return Err(OdmError::config(
            "checkpoint schedule does not match its config",
        ));
    }
    model.schedule = c.schedule;
    let entries = c
        .params
        .into_iter()
        .map(|t| {
            let data = t.data.into_iter().map(S::lit).collect();
            Ok((t.name, Mat::from_vec(t.rows, t.cols, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    model.params.load_named(entries)?;
    Ok(model)
}

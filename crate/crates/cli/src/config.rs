//! Run configuration: a preset expanded into full model and training
//! settings, overlaid with an optional JSON file, then with flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use csls::model::ModelConfig;
use csls::trainkit::compare::ChiSquareMethod;
use csls::trainkit::train::{Preset, TrainConfig, DEFAULT_SEED};
use csls::NormalizeMode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds the split, parameter initialisation and batch order.
    pub seed: u64,
    /// Train, valid and test fractions.
    pub split: [f64; 3],
    /// Token limit used by `stats`.
    pub limit: usize,
    pub chi_square: ChiSquareMethod,
    /// (p, k_cap) cells for `sweep`.
    pub grid: Vec<(usize, usize)>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::PaperScale => ModelConfig::paper_scale(),
        };
        Self {
            preset,
            seed: DEFAULT_SEED,
            split: [0.8, 0.1, 0.1],
            limit: csls::tokenize::DEFAULT_MAX_LEN,
            chi_square: ChiSquareMethod::Pearson,
            grid: csls::trainkit::default_grid(),
            model,
            train: TrainConfig::for_preset(preset),
        }
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub mode: Option<NormalizeMode>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset defaults, then the file, then flags. The preset is taken from the
/// flag if given, else from the file, else desk.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let patch = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let v: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            if !v.is_object() {
                bail!("config {} must be a JSON object", path.display());
            }
            Some(v)
        }
        None => None,
    };
    let file_preset = patch
        .as_ref()
        .and_then(|v| v.get("preset"))
        .map(|p| serde_json::from_value::<Preset>(p.clone()))
        .transpose()
        .context("config field `preset`")?;
    let preset = flags.preset.or(file_preset).unwrap_or_default();

    let mut value = serde_json::to_value(RunConfig::for_preset(preset))?;
    if let Some(p) = patch {
        merge(&mut value, p);
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid config")?;
    cfg.preset = preset;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = flags.mode {
        cfg.model.preprocess.mode = mode;
    }
    cfg.train.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

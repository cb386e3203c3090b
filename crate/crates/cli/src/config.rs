use std::fs;
use std::path::Path;

use advpit::data::GenConfig;
use advpit::dsp::StftConfig;
use advpit::models::SeparatorConfig;
use advpit::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Project estimates so they sum to the mix before scoring.
    pub mixture_consistency: bool,
    /// Mixes per separator forward pass.
    pub chunk: usize,
}

/// Everything a run needs, serialized next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub splits: SplitCounts,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 1 s mixes at 8 kHz, up to four reverberant sources, tiny separator.
    Desk,
    /// Two dry sources in disjoint frequency bands, tiny separator.
    DeskDisjoint2,
    /// 10 s mixes at 16 kHz and the full-width separator.
    Paper,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let eval = EvalSettings {
            mixture_consistency: true,
            chunk: 16,
        };
        let desk_splits = SplitCounts {
            train: 2000,
            val: 200,
            test: 200,
        };
        match p {
            Preset::Desk => Self {
                gen: GenConfig::desk(),
                splits: desk_splits,
                train: TrainConfig::desk(4),
                eval,
            },
            Preset::DeskDisjoint2 => Self {
                gen: GenConfig::disjoint_bands(2),
                splits: desk_splits,
                train: TrainConfig::desk(2),
                eval,
            },
            Preset::Paper => Self {
                gen: GenConfig {
                    sample_rate: 16_000,
                    duration: 10.0,
                    ..GenConfig::desk()
                },
                splits: SplitCounts {
                    train: 20_000,
                    val: 1000,
                    test: 1000,
                },
                train: TrainConfig::paper(4),
                eval,
            },
        }
    }

    /// Reads a JSON config, or starts from `preset` when `path` is `None`,
    /// then applies `key=value` overrides.
    pub fn resolve(path: Option<&Path>, preset: Preset, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| CliError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::ConfigParse(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::preset(preset)).expect("presets serialize"),
        };
        let mut value = base;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sep: &SeparatorConfig = &self.train.separator;
        self.gen
            .validate(sep.min_len())
            .map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        check_rate(&sep.stft, self.gen.sample_rate)?;
        if self.gen.k_max > sep.k {
            return Err(CliError::ConfigInvalid(format!(
                "gen.k_max = {} exceeds separator K = {}",
                self.gen.k_max, sep.k
            )));
        }
        if self.eval.chunk == 0 {
            return Err(CliError::ConfigInvalid("eval.chunk must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

pub fn check_rate(stft: &StftConfig, rate: u32) -> Result<()> {
    if stft.sample_rate != rate {
        return Err(CliError::ConfigInvalid(format!(
            "audio is at {rate} Hz but the separator expects {} Hz",
            stft.sample_rate
        )));
    }
    Ok(())
}

/// Applies one `dotted.path=value` override. The value is parsed as JSON and
/// falls back to a plain string. Every path segment must already exist.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::ConfigParse(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for seg in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::UnknownKey(path.to_string()))?;
    }
    *node = value;
    Ok(())
}

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fusediff_core::sampler::DEFAULT_SAMPLING_STEPS;
use fusediff_core::{DenoiserConfig, MetricConfig, SamplerKind, SamplerPlan, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FUSEDIFF_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const RESOLVED_FILE: &str = "resolved_config.json";

/// A bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub kind: SamplerKind,
    /// Respaced length; `None` means 25 for DDIM and T for DDPM.
    pub steps: Option<usize>,
    pub eta: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            kind: SamplerKind::Ddim,
            steps: None,
            eta: 0.0,
        }
    }
}

impl SamplerSettings {
    pub fn plan(&self, diffusion_steps: usize) -> anyhow::Result<SamplerPlan> {
        match self.kind {
            SamplerKind::Ddim => {
                let n = self.steps.unwrap_or(DEFAULT_SAMPLING_STEPS);
                SamplerPlan::ddim(diffusion_steps, n, self.eta).map_err(|e| usage(e.to_string()))
            }
            SamplerKind::Ddpm => {
                if let Some(n) = self.steps.filter(|&n| n != diffusion_steps) {
                    return Err(usage(format!("ddpm walks all {diffusion_steps} steps; got --steps {n}")));
                }
                if self.eta != 0.0 {
                    return Err(usage("--eta only applies to the ddim sampler"));
                }
                Ok(SamplerPlan::ddpm(diffusion_steps))
            }
        }
    }
}

/// Everything a command may need, loaded from one JSON file and then
/// overridden from the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSettings,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            model: DenoiserConfig {
                base_channels: 16,
                ..DenoiserConfig::default()
            },
            train: TrainConfig::default(),
            sampler: SamplerSettings::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Logs the resolved config and writes it to `path`.
    pub fn record(&self, path: &Path) -> anyhow::Result<()> {
        let text = self.to_json();
        log::info!("resolved config:\n{text}");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1e-3, "lrr": 2}}"#).unwrap_err();
        assert!(err.to_string().contains("lrr"));
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": {}}"#).is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"sampler": {"steps": 10}}"#).unwrap();
        assert_eq!(c.sampler.steps, Some(10));
        assert_eq!(c.train, TrainConfig::default());
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sampler_plans() {
        let s = SamplerSettings::default();
        assert_eq!(s.plan(500).unwrap().tau.len(), 25);
        let full = SamplerSettings { steps: Some(500), ..s.clone() };
        assert_eq!(full.plan(500).unwrap().tau.len(), 500);
        let ddpm = SamplerSettings { kind: SamplerKind::Ddpm, ..s.clone() };
        assert_eq!(ddpm.plan(500).unwrap().kind, SamplerKind::Ddpm);
        let bad = SamplerSettings { kind: SamplerKind::Ddpm, steps: Some(25), ..s };
        assert!(bad.plan(500).unwrap_err().downcast_ref::<UsageError>().is_some());
    }
}

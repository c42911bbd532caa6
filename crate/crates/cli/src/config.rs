//! TOML run configuration shared by the pipeline commands.
//!
//! One file describes a full experiment: the simulated channels, the
//! preprocessing and attack parameters, the fusion method, and the
//! evaluation schedule. Individual commands read only the sections they
//! need.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use screamfuse::fusion::AggregationFn;
use screamfuse::sim::{ChannelModel, SimConfig};
use screamfuse::sweep::{FusionPlan, SweepPlan};
use screamfuse::trace::ChannelMeta;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [39.0, 35.0, 32.0];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub preprocessing: PreprocessingSection,
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub fusion: FusionSection,
    pub evaluation: Option<EvaluationSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub n_samples: u32,
    pub n_plaintexts: usize,
    pub time_diversity: u32,
    /// 16-byte key as 32 hex characters.
    pub key: String,
    pub leak_sample_indices: Option<Vec<u32>>,
    pub channels: Vec<ChannelSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub label: String,
    pub frequency_hz: f64,
    pub gain: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub distortion_seed: u64,
    #[serde(default)]
    pub distortion_strength: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessingSection {
    pub n_per_byte: usize,
    pub share_pois: bool,
}

impl Default for PreprocessingSection {
    fn default() -> Self {
        PreprocessingSection {
            n_per_byte: 1,
            share_pois: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub n_profiling: usize,
    pub n_attack: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    /// "decision" or "data".
    pub method: String,
    /// "avg", "max", or "prod" (decision fusion only).
    pub aggregation: String,
    pub sign_correct: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            method: "decision".to_string(),
            aggregation: "avg".to_string(),
            sign_correct: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub repeats: usize,
    pub trace_grid: Vec<usize>,
    pub thresholds: Option<Vec<f64>>,
    pub greedy_limit_order: Option<usize>,
}

fn invalid(msg: String) -> anyhow::Error {
    screamfuse::Error::Invalid(msg).into()
}

pub fn parse_key_hex(hex: &str) -> Result<[u8; 16]> {
    let hex = hex.trim();
    if hex.len() != 32 {
        bail!(invalid(format!(
            "key must be 32 hex characters (16 bytes), got {} characters",
            hex.len()
        )));
    }
    let mut key = [0u8; 16];
    for (i, slot) in key.iter_mut().enumerate() {
        *slot = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| invalid(format!("key: invalid hex at byte {i}")))?;
    }
    Ok(key)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        let sim = &self.simulation;
        if sim.channels.is_empty() {
            bail!(invalid("simulation.channels must not be empty".to_string()));
        }
        for (i, c) in sim.channels.iter().enumerate() {
            let field = |name: &str| format!("simulation.channels[{i}].{name}");
            if c.label.is_empty() {
                bail!(invalid(format!("{} must not be empty", field("label"))));
            }
            if !(c.frequency_hz > 0.0) {
                bail!(invalid(format!("{} must be > 0", field("frequency_hz"))));
            }
            if !(c.noise_std >= 0.0) {
                bail!(invalid(format!("{} must be >= 0", field("noise_std"))));
            }
            if !(0.0..=1.0).contains(&c.distortion_strength) {
                bail!(invalid(format!(
                    "{} must be in [0, 1]",
                    field("distortion_strength")
                )));
            }
            if !c.gain.is_finite() {
                bail!(invalid(format!("{} must be finite", field("gain"))));
            }
        }
        let mut labels: Vec<&str> = sim.channels.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != sim.channels.len() {
            bail!(invalid(
                "simulation.channels labels must be unique".to_string()
            ));
        }
        if sim.n_samples == 0 {
            bail!(invalid("simulation.n_samples must be > 0".to_string()));
        }
        if sim.n_plaintexts == 0 {
            bail!(invalid("simulation.n_plaintexts must be > 0".to_string()));
        }
        if sim.time_diversity == 0 {
            bail!(invalid("simulation.time_diversity must be >= 1".to_string()));
        }
        parse_key_hex(&sim.key).map_err(|e| invalid(format!("simulation.key: {e}")))?;

        if self.preprocessing.n_per_byte == 0 {
            bail!(invalid("preprocessing.n_per_byte must be >= 1".to_string()));
        }
        if let Some(attack) = &self.attack {
            if attack.n_profiling == 0 {
                bail!(invalid("attack.n_profiling must be > 0".to_string()));
            }
            if attack.n_attack == 0 {
                bail!(invalid("attack.n_attack must be > 0".to_string()));
            }
        }
        match self.fusion.method.as_str() {
            "decision" | "data" => {}
            other => bail!(invalid(format!(
                "fusion.method must be 'decision' or 'data', got '{other}'"
            ))),
        }
        self.aggregation()
            .map_err(|e| invalid(format!("fusion.aggregation: {e}")))?;
        if let Some(eval) = &self.evaluation {
            if eval.repeats == 0 {
                bail!(invalid("evaluation.repeats must be >= 1".to_string()));
            }
            if eval.trace_grid.is_empty() {
                bail!(invalid("evaluation.trace_grid must not be empty".to_string()));
            }
            if !eval.trace_grid.windows(2).all(|w| w[0] < w[1]) {
                bail!(invalid(
                    "evaluation.trace_grid must be strictly increasing".to_string()
                ));
            }
            if let Some(thresholds) = &eval.thresholds {
                if !thresholds.windows(2).all(|w| w[0] > w[1]) {
                    bail!(invalid(
                        "evaluation.thresholds must be strictly decreasing".to_string()
                    ));
                }
            }
            if eval.greedy_limit_order == Some(0) {
                bail!(invalid(
                    "evaluation.greedy_limit_order must be >= 1".to_string()
                ));
            }
        }
        Ok(())
    }

    pub fn key(&self) -> Result<[u8; 16]> {
        parse_key_hex(&self.simulation.key)
    }

    pub fn aggregation(&self) -> Result<AggregationFn> {
        Ok(self.fusion.aggregation.parse::<AggregationFn>()?)
    }

    pub fn sim_config(&self, seed: u64) -> Result<SimConfig> {
        let sim = &self.simulation;
        let channels = sim
            .channels
            .iter()
            .map(|c| ChannelModel {
                meta: ChannelMeta::new(c.frequency_hz, c.label.clone()),
                gain: c.gain,
                noise_std: c.noise_std,
                distortion_seed: c.distortion_seed,
                distortion_strength: c.distortion_strength,
            })
            .collect();
        Ok(SimConfig {
            channels,
            n_plaintexts: sim.n_plaintexts,
            time_diversity: sim.time_diversity,
            n_samples: sim.n_samples,
            leak_sample_indices: sim
                .leak_sample_indices
                .clone()
                .unwrap_or_else(SimConfig::default_leak_indices),
            key: self.key()?,
            master_seed: seed,
        })
    }

    pub fn fusion_plan(&self) -> Result<FusionPlan> {
        Ok(match self.fusion.method.as_str() {
            "data" => FusionPlan::Data {
                sign_correct: self.fusion.sign_correct,
            },
            _ => FusionPlan::Decision {
                aggregation: self.aggregation()?,
            },
        })
    }

    pub fn sweep_plan(&self, seed: u64, thresholds: Option<Vec<f64>>) -> Result<SweepPlan> {
        let attack = self.attack.as_ref().ok_or_else(|| {
            invalid("config needs an [attack] section for sweeps".to_string())
        })?;
        let eval = self.evaluation.as_ref().ok_or_else(|| {
            invalid("config needs an [evaluation] section for sweeps".to_string())
        })?;
        let plan = SweepPlan {
            sim: self.sim_config(seed)?,
            n_profiling: attack.n_profiling,
            n_attack: attack.n_attack,
            n_per_byte: self.preprocessing.n_per_byte,
            share_pois: self.preprocessing.share_pois,
            repeats: eval.repeats,
            trace_grid: eval.trace_grid.clone(),
            thresholds: thresholds
                .or_else(|| eval.thresholds.clone())
                .unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec()),
            fusion: self.fusion_plan()?,
        };
        plan.validate()?;
        Ok(plan)
    }
}

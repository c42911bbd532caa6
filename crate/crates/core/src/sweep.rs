//! Seeded Monte-Carlo evaluation harness.
//!
//! A sweep repeats the whole chain — simulate, average time diversity,
//! select POIs, profile, attack, fuse — over fresh noise seeds and a grid
//! of attack trace counts, then averages guessing entropy per
//! (channel, trace count) and derives min-traces-to-threshold figures.
//!
//! Repeats run in parallel; every repeat derives its own seeds from the
//! master seed and repeat index, so results do not depend on scheduling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::evaluation::{evaluate_scores, min_traces_for_ge, RankMethod};
use crate::fusion::{attack_fused, data_fusion, decision_fusion, AggregationFn};
use crate::preprocess::{select_pois, time_diversity_average, PoiSet};
use crate::profiling::{build_profile, correlation_attack, LeakageProfile, ScoreMatrix};
use crate::rng::{derive, Stream};
use crate::sim::{simulate, SimConfig};
use crate::trace::TraceSet;
use crate::{Error, Result};

const STREAM_REPEAT_SEED: u64 = 0x5357;
const STREAM_SHUFFLE: u64 = 0x5348;

/// How the sweep combines channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionPlan {
    Decision { aggregation: AggregationFn },
    Data { sign_correct: bool },
}

/// Full description of a Monte-Carlo experiment.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    /// Channel models and seed. `n_plaintexts` is overridden with
    /// `n_profiling + n_attack` by the harness.
    pub sim: SimConfig,
    pub n_profiling: usize,
    pub n_attack: usize,
    pub n_per_byte: usize,
    /// Reuse the first channel's POI set for every channel.
    pub share_pois: bool,
    pub repeats: usize,
    /// Attack trace counts to evaluate, strictly increasing.
    pub trace_grid: Vec<usize>,
    /// GE thresholds for the summary, strictly decreasing.
    pub thresholds: Vec<f64>,
    pub fusion: FusionPlan,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be >= 1"));
        }
        if self.n_profiling == 0 || self.n_attack == 0 {
            return Err(Error::invalid(
                "profiling and attack trace counts must be positive",
            ));
        }
        if self.n_per_byte == 0 {
            return Err(Error::invalid("n_per_byte must be >= 1"));
        }
        if self.trace_grid.is_empty() {
            return Err(Error::invalid("trace grid must be non-empty"));
        }
        if !self.trace_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("trace grid must be strictly increasing"));
        }
        if *self.trace_grid.last().unwrap() > self.n_attack {
            return Err(Error::invalid(format!(
                "trace grid maximum {} exceeds n_attack {}",
                self.trace_grid.last().unwrap(),
                self.n_attack
            )));
        }
        if self.trace_grid[0] < 2 {
            return Err(Error::invalid("trace grid points must be >= 2"));
        }
        if !self.thresholds.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::invalid("thresholds must be strictly decreasing"));
        }
        let mut sim = self.sim.clone();
        sim.n_plaintexts = self.n_profiling + self.n_attack;
        sim.validate()
    }
}

/// One attack outcome inside a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub repeat: usize,
    /// Channel label, or the `+`-joined labels of a combination.
    pub labels: String,
    pub n_traces: usize,
    pub ge: f64,
    pub method: RankMethod,
}

/// Aggregated sweep output.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    /// Mean GE per (labels, n_traces), averaged over repeats.
    pub averaged: Vec<(String, usize, f64)>,
    /// `min_traces_for_ge` of each averaged curve at each threshold.
    pub min_traces: Vec<(String, f64, Option<usize>)>,
    pub repeats: usize,
}

struct RepeatOutput {
    records: Vec<SweepRecord>,
}

fn prepared_channel(
    averaged: &TraceSet,
    n_profiling: usize,
    n_per_byte: usize,
    shared_pois: Option<&PoiSet>,
) -> Result<(PoiSet, LeakageProfile, TraceSet)> {
    let profiling = averaged.select(&(0..n_profiling).collect::<Vec<_>>())?;
    let attack_pool = averaged.select(&(n_profiling..averaged.n_traces()).collect::<Vec<_>>())?;
    let pois = match shared_pois {
        Some(p) => p.clone(),
        None => select_pois(&profiling, n_per_byte)?,
    };
    let profile = build_profile(&profiling, &pois)?;
    Ok((pois, profile, attack_pool))
}

fn run_repeat(plan: &SweepPlan, repeat: usize) -> Result<RepeatOutput> {
    let mut sim = plan.sim.clone();
    sim.n_plaintexts = plan.n_profiling + plan.n_attack;
    sim.master_seed = derive(plan.sim.master_seed, &[STREAM_REPEAT_SEED, repeat as u64]);

    let raw_sets = simulate(&sim)?;
    let averaged: Vec<TraceSet> = raw_sets
        .iter()
        .map(time_diversity_average)
        .collect::<Result<_>>()?;

    let shared = if plan.share_pois {
        let profiling =
            averaged[0].select(&(0..plan.n_profiling).collect::<Vec<_>>())?;
        Some(select_pois(&profiling, plan.n_per_byte)?)
    } else {
        None
    };

    let mut channels = Vec::with_capacity(averaged.len());
    for set in &averaged {
        channels.push(prepared_channel(
            set,
            plan.n_profiling,
            plan.n_per_byte,
            shared.as_ref(),
        )?);
    }

    // One attack-order shuffle per repeat, shared by all channels so
    // fused subsets still observe identical plaintext sequences.
    let mut order: Vec<usize> = (0..plan.n_attack).collect();
    Stream::new(plan.sim.master_seed, &[STREAM_SHUFFLE, repeat as u64]).shuffle(&mut order);

    let true_key = sim.key;
    let mut records = Vec::new();
    for &n in &plan.trace_grid {
        let prefix = &order[..n];
        let mut subsets = Vec::with_capacity(channels.len());
        let mut channel_scores: Vec<ScoreMatrix> = Vec::with_capacity(channels.len());
        for (pois, profile, attack_pool) in &channels {
            let subset = attack_pool.select(prefix)?;
            let scores = correlation_attack(&subset, profile, pois)?;
            let eval = evaluate_scores(&scores, &true_key)?;
            records.push(SweepRecord {
                repeat,
                labels: subset.channel.label.clone(),
                n_traces: n,
                ge: eval.guessing_entropy,
                method: eval.method,
            });
            channel_scores.push(scores);
            subsets.push(subset);
        }

        if channels.len() >= 2 {
            let (fused_scores, labels) = match plan.fusion {
                FusionPlan::Decision { aggregation } => {
                    let fused = decision_fusion(&channel_scores, aggregation)?;
                    let labels = fused.provenance.join("+");
                    (fused, labels)
                }
                FusionPlan::Data { sign_correct } => {
                    let fused_set = data_fusion(&subsets, &channels[0].0, sign_correct)?;
                    let labels = fused_set.provenance.join("+");
                    (attack_fused(&fused_set, &channels[0].1)?, labels)
                }
            };
            let eval = evaluate_scores(&fused_scores, &true_key)?;
            records.push(SweepRecord {
                repeat,
                labels,
                n_traces: n,
                ge: eval.guessing_entropy,
                method: eval.method,
            });
        }
    }
    Ok(RepeatOutput { records })
}

/// Runs the whole experiment. Deterministic for a given plan; repeats are
/// evaluated in parallel and reduced in repeat order.
pub fn run_sweep(plan: &SweepPlan) -> Result<SweepResult> {
    plan.validate()?;
    let outputs: Vec<RepeatOutput> = (0..plan.repeats)
        .into_par_iter()
        .map(|r| run_repeat(plan, r))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for out in outputs {
        records.extend(out.records);
    }

    // Stable label order: as first encountered within a repeat.
    let mut label_order: Vec<String> = Vec::new();
    for rec in &records {
        if !label_order.contains(&rec.labels) {
            label_order.push(rec.labels.clone());
        }
    }

    let mut averaged = Vec::new();
    let mut min_traces = Vec::new();
    for label in &label_order {
        let mut curve = Vec::with_capacity(plan.trace_grid.len());
        for &n in &plan.trace_grid {
            let ges: Vec<f64> = records
                .iter()
                .filter(|r| &r.labels == label && r.n_traces == n)
                .map(|r| r.ge)
                .collect();
            let mean = ges.iter().sum::<f64>() / ges.len() as f64;
            averaged.push((label.clone(), n, mean));
            curve.push((n, mean));
        }
        for &threshold in &plan.thresholds {
            min_traces.push((label.clone(), threshold, min_traces_for_ge(&curve, threshold)));
        }
    }

    Ok(SweepResult {
        records,
        averaged,
        min_traces,
        repeats: plan.repeats,
    })
}

/// Writes per-attack rows `repeat,frequency_labels,n_traces,ge,method`.
pub fn write_sweep_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "repeat,frequency_labels,n_traces,ge,method")?;
    for r in &result.records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.repeat,
            r.labels,
            r.n_traces,
            r.ge,
            r.method.name()
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes averaged curves `frequency_labels,n_traces,ge`.
pub fn write_averaged_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frequency_labels,n_traces,ge")?;
    for (labels, n, ge) in &result.averaged {
        writeln!(w, "{labels},{n},{ge}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the summary `frequency_labels,threshold,min_traces`, with
/// `not_reached` where the averaged curve never crosses the threshold.
pub fn write_summary_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frequency_labels,threshold,min_traces")?;
    for (labels, threshold, min_traces) in &result.min_traces {
        match min_traces {
            Some(n) => writeln!(w, "{labels},{threshold},{n}")?,
            None => writeln!(w, "{labels},{threshold},not_reached")?,
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ChannelModel;
    use crate::trace::ChannelMeta;

    fn two_channel_plan(noise_std: f64, repeats: usize) -> SweepPlan {
        SweepPlan {
            sim: SimConfig {
                channels: vec![
                    ChannelModel {
                        meta: ChannelMeta::new(2.464e9, "f2464"),
                        gain: 1.0,
                        noise_std,
                        distortion_seed: 1,
                        distortion_strength: 0.0,
                    },
                    ChannelModel {
                        meta: ChannelMeta::new(2.465e9, "f2465"),
                        gain: 1.0,
                        noise_std,
                        distortion_seed: 2,
                        distortion_strength: 0.0,
                    },
                ],
                n_plaintexts: 0,
                time_diversity: 2,
                n_samples: 64,
                leak_sample_indices: SimConfig::default_leak_indices(),
                key: *b"0123456789abcdef",
                master_seed: 404,
            },
            n_profiling: 1200,
            n_attack: 64,
            n_per_byte: 1,
            share_pois: false,
            repeats,
            trace_grid: vec![16, 64],
            thresholds: vec![39.0, 35.0, 32.0],
            fusion: FusionPlan::Decision {
                aggregation: AggregationFn::Avg,
            },
        }
    }

    #[test]
    fn noiseless_sweep_reaches_ge_zero() {
        let mut plan = two_channel_plan(0.0, 1);
        plan.sim.channels.truncate(1);
        plan.n_profiling = 3000;
        plan.n_attack = 300;
        plan.trace_grid = vec![300];
        let result = run_sweep(&plan).unwrap();
        for rec in &result.records {
            assert_eq!(rec.ge, 0.0, "{rec:?}");
        }
        for (_, _, ge) in &result.averaged {
            assert_eq!(*ge, 0.0);
        }
        for (_, _, min) in &result.min_traces {
            assert_eq!(*min, Some(300));
        }
    }

    #[test]
    fn averaged_equals_mean_of_records() {
        let plan = two_channel_plan(3.0, 3);
        let result = run_sweep(&plan).unwrap();
        for (labels, n, mean) in &result.averaged {
            let ges: Vec<f64> = result
                .records
                .iter()
                .filter(|r| &r.labels == labels && r.n_traces == *n)
                .map(|r| r.ge)
                .collect();
            assert_eq!(ges.len(), plan.repeats);
            let expect = ges.iter().sum::<f64>() / ges.len() as f64;
            assert!((mean - expect).abs() < 1e-12);
        }
        // Fusion rows exist for the pair.
        assert!(result.records.iter().any(|r| r.labels == "f2464+f2465"));
    }

    #[test]
    fn sweep_is_deterministic() {
        let plan = two_channel_plan(2.0, 2);
        let a = run_sweep(&plan).unwrap();
        let b = run_sweep(&plan).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn plan_validation_catches_bad_grids() {
        let mut plan = two_channel_plan(1.0, 1);
        plan.trace_grid = vec![64, 16];
        assert!(plan.validate().is_err());
        plan.trace_grid = vec![16, 128];
        assert!(plan.validate().is_err());
        plan.trace_grid = vec![16, 64];
        plan.thresholds = vec![35.0, 39.0];
        assert!(plan.validate().is_err());
    }
}

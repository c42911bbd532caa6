//! Implementations of the CLI subcommands. Every command writes
//! deterministic artifacts: rerunning with the same inputs and seed
//! produces byte-identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use screamfuse::evaluation::{evaluate_scores, greedy_diversity_search, EvaluationResult};
use screamfuse::fusion::{
    attack_fused, check_fusion_compatibility, data_fusion, decision_fusion,
    write_compatibility_csv, AggregationFn,
};
use screamfuse::preprocess::{
    read_poi_set, select_pois, time_diversity_average, write_poi_set,
};
use screamfuse::profiling::{
    build_profile, correlation_attack, read_profile_csv, read_scores_csv, write_profile_csv,
    write_scores_csv, ScoreMatrix,
};
use screamfuse::sim::simulate;
use screamfuse::sweep::{
    run_sweep, write_averaged_csv, write_summary_csv, write_sweep_csv,
};
use screamfuse::trace::{read_trace_set, write_trace_set, TraceSet};

use crate::config::RunConfig;

fn invalid(msg: String) -> anyhow::Error {
    screamfuse::Error::Invalid(msg).into()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// The key shared by every trace of a keyed set.
fn true_key_of(set: &TraceSet) -> Result<Option<[u8; 16]>> {
    let Some(first) = set.traces.first().and_then(|t| t.key) else {
        return Ok(None);
    };
    for t in &set.traces {
        if t.key != Some(first) {
            bail!(invalid(format!(
                "trace set '{}' mixes different keys",
                set.channel.label
            )));
        }
    }
    Ok(Some(first))
}

fn collapse(set: TraceSet) -> Result<TraceSet> {
    if set.time_diversity > 1 {
        Ok(time_diversity_average(&set)?)
    } else {
        Ok(set)
    }
}

struct EvalRow {
    provenance: String,
    n_traces: usize,
    result: EvaluationResult,
}

fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "provenance,n_traces,method,key_rank,guessing_entropy,estimation_error_bits,per_byte_ranks"
    )?;
    for row in rows {
        let ranks: Vec<String> = row.result.per_byte_ranks.iter().map(u32::to_string).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            row.provenance,
            row.n_traces,
            row.result.method.name(),
            row.result.key_rank,
            row.result.guessing_entropy,
            row.result.estimation_error_bits,
            ranks.join(";")
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_simulate(config: &RunConfig, seed: u64, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let sim = config.sim_config(seed)?;
    let sets = simulate(&sim)?;

    let manifest_path = out_dir.join("manifest.csv");
    let mut manifest = BufWriter::new(File::create(&manifest_path)?);
    writeln!(
        manifest,
        "label,file,frequency_hz,n_traces,n_samples,time_diversity,master_seed"
    )?;
    for set in &sets {
        let file_name = format!("{}.trc", set.channel.label);
        let path = out_dir.join(&file_name);
        write_trace_set(set, &path)?;
        writeln!(
            manifest,
            "{},{},{},{},{},{},{}",
            set.channel.label,
            file_name,
            set.channel.frequency_hz,
            set.n_traces(),
            set.n_samples,
            set.time_diversity,
            seed
        )?;
        println!("wrote {}", path.display());
    }
    manifest.flush()?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}

pub fn cmd_preprocess(traces: &[PathBuf], n_per_byte: usize, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    for input in traces {
        let set = read_trace_set(input)?;
        let averaged = time_diversity_average(&set)?;
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "traces".to_string());
        let avg_path = out_dir.join(format!("{stem}_avg.trc"));
        write_trace_set(&averaged, &avg_path)?;
        println!("wrote {}", avg_path.display());
        if averaged.has_keys() {
            let pois = select_pois(&averaged, n_per_byte)?;
            let poi_path = out_dir.join(format!("{stem}_pois.txt"));
            write_poi_set(&pois, &poi_path)?;
            println!("wrote {}", poi_path.display());
        } else {
            eprintln!(
                "note: {} has no keys; skipping POI selection",
                input.display()
            );
        }
    }
    Ok(())
}

pub fn cmd_profile(traces: &Path, pois: &Path, out: &Path) -> Result<()> {
    let set = collapse(read_trace_set(traces)?)?;
    let pois = read_poi_set(pois)?;
    let profile = build_profile(&set, &pois)?;
    write_profile_csv(&profile, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_attack(traces: &Path, profile_path: &Path, pois: &Path, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let set = collapse(read_trace_set(traces)?)?;
    let profile = read_profile_csv(profile_path)?;
    let pois = read_poi_set(pois)?;
    if profile.channel.label != set.channel.label {
        eprintln!(
            "note: attacking channel '{}' with profile from '{}'",
            set.channel.label, profile.channel.label
        );
    }
    let scores = correlation_attack(&set, &profile, &pois)?;
    let scores_path = out_dir.join("scores.csv");
    write_scores_csv(&scores, &scores_path)?;
    println!("wrote {}", scores_path.display());

    if let Some(key) = true_key_of(&set)? {
        let result = evaluate_scores(&scores, &key)?;
        let eval_path = out_dir.join("eval.csv");
        write_eval_csv(
            &[EvalRow {
                provenance: set.channel.label.clone(),
                n_traces: set.n_traces(),
                result,
            }],
            &eval_path,
        )?;
        println!("wrote {}", eval_path.display());
    } else {
        eprintln!("note: attack set carries no key; skipping evaluation");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_fuse(
    method: &str,
    agg: AggregationFn,
    sign_correct: bool,
    score_files: &[PathBuf],
    trace_files: &[PathBuf],
    pois: Option<&Path>,
    profile: Option<&Path>,
    channel_profiles: &[PathBuf],
    key: Option<[u8; 16]>,
    out_dir: &Path,
) -> Result<()> {
    if !score_files.is_empty() && !trace_files.is_empty() {
        bail!(invalid(
            "pass either --scores or --traces inputs, not both".to_string()
        ));
    }
    ensure_dir(out_dir)?;

    if channel_profiles.len() >= 2 {
        let profiles: Vec<_> = channel_profiles
            .iter()
            .map(|p| read_profile_csv(p))
            .collect::<screamfuse::Result<_>>()?;
        let mut reports = Vec::new();
        for other in &profiles[1..] {
            let report = check_fusion_compatibility(&profiles[0], other)?;
            if !report.all_compatible() {
                eprintln!(
                    "warning: profiles '{}' and '{}' look incompatible on some bytes",
                    report.channel_a, report.channel_b
                );
            } else if report.any_flip() {
                eprintln!(
                    "note: profile '{}' is inverted relative to '{}'; data fusion needs sign correction",
                    report.channel_b, report.channel_a
                );
            }
            reports.push(report);
        }
        let compat_path = out_dir.join("compatibility.csv");
        write_compatibility_csv(&reports, &compat_path)?;
        println!("wrote {}", compat_path.display());
    } else if channel_profiles.len() == 1 {
        bail!(invalid(
            "--channel-profiles needs at least two profile CSVs".to_string()
        ));
    }

    let (fused, n_traces, key) = match method {
        "decision" => {
            if score_files.len() < 2 {
                bail!(invalid(format!(
                    "decision fusion needs at least 2 --scores files, got {}",
                    score_files.len()
                )));
            }
            let matrices: Vec<ScoreMatrix> = score_files
                .iter()
                .map(|p| read_scores_csv(p))
                .collect::<screamfuse::Result<_>>()?;
            let key = key.ok_or_else(|| {
                invalid("--key is required to evaluate decision fusion".to_string())
            })?;
            let fused = decision_fusion(&matrices, agg)?;
            (fused, 0, key)
        }
        "data" => {
            if trace_files.len() < 2 {
                bail!(invalid(format!(
                    "data fusion needs at least 2 --traces files, got {}",
                    trace_files.len()
                )));
            }
            let pois_path = pois.ok_or_else(|| {
                invalid("data fusion needs --pois (POI sidecar of the reference channel)".to_string())
            })?;
            let profile_path = profile.ok_or_else(|| {
                invalid("data fusion needs --profile (reference channel profile CSV)".to_string())
            })?;
            let mut sets: Vec<TraceSet> = Vec::with_capacity(trace_files.len());
            for p in trace_files {
                sets.push(collapse(read_trace_set(p)?)?);
            }
            let pois = read_poi_set(pois_path)?;
            let reference_profile = read_profile_csv(profile_path)?;
            let fused_set = data_fusion(&sets, &pois, sign_correct)?;
            let n_traces = fused_set.n_traces();
            let scores = attack_fused(&fused_set, &reference_profile)?;
            let key = match key {
                Some(k) => k,
                None => true_key_of(&sets[0])?.ok_or_else(|| {
                    invalid("trace sets carry no key; pass --key to evaluate".to_string())
                })?,
            };
            (scores, n_traces, key)
        }
        other => bail!(invalid(format!("unknown fusion method '{other}'"))),
    };

    let degenerate = fused.flags.iter().filter(|f| f.degenerate).count();
    if degenerate > 0 {
        eprintln!(
            "warning: {degenerate}/16 fused byte scores are degenerate; \
             the combined channels look incompatible (inverted or unrelated leakage)"
        );
    }

    let scores_path = out_dir.join("fused_scores.csv");
    write_scores_csv(&fused, &scores_path)?;
    println!("wrote {}", scores_path.display());

    let result = evaluate_scores(&fused, &key[..fused.n_bytes().min(16)])?;
    println!(
        "fused ge: {:.3} (rank method {})",
        result.guessing_entropy,
        result.method.name()
    );
    let eval_path = out_dir.join("fused_eval.csv");
    write_eval_csv(
        &[EvalRow {
            provenance: fused.provenance.join("+"),
            n_traces,
            result,
        }],
        &eval_path,
    )?;
    println!("wrote {}", eval_path.display());
    Ok(())
}

pub fn cmd_rank(scores: &Path, key: &[u8; 16], out: &Path) -> Result<()> {
    let matrix = read_scores_csv(scores)?;
    let truncated_key = &key[..matrix.n_bytes().min(16)];
    let result = evaluate_scores(&matrix, truncated_key)?;
    println!(
        "key rank {} ({} bits, method {})",
        result.key_rank,
        result.guessing_entropy,
        result.method.name()
    );
    write_eval_csv(
        &[EvalRow {
            provenance: matrix.provenance.join("+"),
            n_traces: matrix.n_traces_used,
            result,
        }],
        out,
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_sweep(
    config: &RunConfig,
    seed: u64,
    thresholds: Option<Vec<f64>>,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let plan = config.sweep_plan(seed, thresholds)?;
    let result = run_sweep(&plan)?;

    let sweep_path = out_dir.join("sweep.csv");
    write_sweep_csv(&result, &sweep_path)?;
    println!("wrote {}", sweep_path.display());
    let averaged_path = out_dir.join("sweep_averaged.csv");
    write_averaged_csv(&result, &averaged_path)?;
    println!("wrote {}", averaged_path.display());
    let summary_path = out_dir.join("sweep_summary.csv");
    write_summary_csv(&result, &summary_path)?;
    println!("wrote {}", summary_path.display());

    for (labels, threshold, min_traces) in &result.min_traces {
        match min_traces {
            Some(n) => println!("{labels}: ge < {threshold} from {n} traces"),
            None => println!("{labels}: ge < {threshold} not reached"),
        }
    }
    Ok(())
}

pub fn cmd_greedy(
    config: &RunConfig,
    seed: u64,
    limit_order: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let attack_section = config
        .attack
        .as_ref()
        .ok_or_else(|| invalid("config needs an [attack] section for greedy".to_string()))?;
    let limit = limit_order
        .or_else(|| config.evaluation.as_ref().and_then(|e| e.greedy_limit_order))
        .unwrap_or(4);

    let mut sim = config.sim_config(seed)?;
    if sim.channels.len() < 2 {
        bail!(invalid("greedy search needs at least 2 channels".to_string()));
    }
    sim.n_plaintexts = attack_section.n_profiling + attack_section.n_attack;
    let key = sim.key;

    let sets = simulate(&sim)?;
    let shared_pois = if config.preprocessing.share_pois {
        let averaged = time_diversity_average(&sets[0])?;
        let profiling =
            averaged.select(&(0..attack_section.n_profiling).collect::<Vec<_>>())?;
        Some(select_pois(&profiling, config.preprocessing.n_per_byte)?)
    } else {
        None
    };

    let mut matrices = Vec::with_capacity(sets.len());
    for set in &sets {
        let averaged = time_diversity_average(set)?;
        let profiling =
            averaged.select(&(0..attack_section.n_profiling).collect::<Vec<_>>())?;
        let attack = averaged.select(
            &(attack_section.n_profiling..averaged.n_traces()).collect::<Vec<_>>(),
        )?;
        let pois = match &shared_pois {
            Some(p) => p.clone(),
            None => select_pois(&profiling, config.preprocessing.n_per_byte)?,
        };
        let profile = build_profile(&profiling, &pois)?;
        matrices.push(correlation_attack(&attack, &profile, &pois)?);
    }

    let steps = greedy_diversity_search(&matrices, &key, limit)?;

    let path = out_dir.join("greedy.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "order,added,selection,ge")?;
    for step in &steps {
        writeln!(
            w,
            "{},{},{},{}",
            step.order,
            step.added.as_deref().unwrap_or(""),
            step.selection.join("+"),
            step.ge
        )?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    for step in &steps {
        println!(
            "order {}: ge {:.3} [{}]",
            step.order,
            step.ge,
            step.selection.join("+")
        );
    }
    Ok(())
}

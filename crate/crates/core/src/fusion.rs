//! Channel combination: data fusion (merge normalized POI values, attack
//! once) and decision fusion (attack per channel, aggregate the score
//! vectors).
//!
//! Data fusion assumes the combined sets observed the same executions;
//! leakage adds coherently while noise averages out. It is sensitive to
//! per-channel profile inversion, which the `sign_correct` switch
//! compensates. Decision fusion aggregates per-channel attacks that are
//! each self-consistent, so it needs no inversion handling.

use std::borrow::Borrow;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::preprocess::{zscore, PoiSet};
use crate::profiling::{
    attack_columns, pearson, ByteFlags, LeakageProfile, ScoreMatrix,
};
use crate::trace::TraceSet;
use crate::{Error, Result};

/// Aggregation function for decision fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationFn {
    Avg,
    Max,
    Prod,
}

impl AggregationFn {
    pub const ALL: [AggregationFn; 3] =
        [AggregationFn::Avg, AggregationFn::Max, AggregationFn::Prod];

    pub fn name(&self) -> &'static str {
        match self {
            AggregationFn::Avg => "avg",
            AggregationFn::Max => "max",
            AggregationFn::Prod => "prod",
        }
    }
}

impl std::str::FromStr for AggregationFn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" | "average" => Ok(AggregationFn::Avg),
            "max" | "maximum" => Ok(AggregationFn::Max),
            "prod" | "product" => Ok(AggregationFn::Prod),
            other => Err(Error::invalid(format!(
                "unknown aggregation function '{other}' (expected avg, max, or prod)"
            ))),
        }
    }
}

/// Result of merging several channels' POI values into one virtual
/// channel.
#[derive(Debug, Clone)]
pub struct FusedTraceSet {
    pub plaintexts: Vec<[u8; 16]>,
    /// Sample index behind each merged column.
    pub poi_indices: Vec<usize>,
    /// For each key byte, the column positions of its ranked POIs.
    pub per_byte_cols: Vec<Vec<usize>>,
    /// Merged values, trace-major: `values[trace][column]`.
    pub values: Vec<Vec<f64>>,
    /// Labels of the contributing channels.
    pub provenance: Vec<String>,
    /// Which contributing channels were sign-flipped before merging.
    pub sign_corrections: Vec<bool>,
}

impl FusedTraceSet {
    pub fn n_traces(&self) -> usize {
        self.values.len()
    }
}

/// Merges channels at the POI level: extract POI columns, z-score each
/// channel's columns, optionally flip inverted channels, then average.
///
/// With `sign_correct`, a channel is flipped when its POI columns
/// anti-correlate with the first (reference) channel; on shared
/// executions this estimates the sign of the profile similarity without
/// needing the profiles themselves.
pub fn data_fusion(
    sets: &[TraceSet],
    pois: &PoiSet,
    sign_correct: bool,
) -> Result<FusedTraceSet> {
    if sets.len() < 2 {
        return Err(Error::invalid(format!(
            "data fusion needs at least 2 trace sets, got {}",
            sets.len()
        )));
    }
    let reference = &sets[0];
    let n_traces = reference.n_traces();
    if n_traces < 2 {
        return Err(Error::invalid("data fusion needs at least 2 traces".to_string()));
    }
    for set in sets {
        if set.time_diversity != 1 {
            return Err(Error::invalid(
                "collapse time diversity before data fusion".to_string(),
            ));
        }
        if set.n_traces() != n_traces {
            return Err(Error::mismatch(format!(
                "channel '{}' has {} traces, reference has {n_traces}",
                set.channel.label,
                set.n_traces()
            )));
        }
        for (a, b) in set.traces.iter().zip(&reference.traces) {
            if a.plaintext != b.plaintext {
                return Err(Error::mismatch(format!(
                    "plaintext sequence of channel '{}' differs from the reference",
                    set.channel.label
                )));
            }
        }
        for &idx in &pois.indices {
            if idx >= set.n_samples as usize {
                return Err(Error::invalid(format!(
                    "POI index {idx} out of range for channel '{}'",
                    set.channel.label
                )));
            }
        }
    }

    // Per channel, per column: z-scored POI values across traces.
    let mut normalized: Vec<Vec<Vec<f64>>> = Vec::with_capacity(sets.len());
    for set in sets {
        let mut cols = Vec::with_capacity(pois.indices.len());
        for &idx in &pois.indices {
            let raw: Vec<f64> = set.traces.iter().map(|t| t.samples[idx] as f64).collect();
            let z = zscore(&raw).map_err(|_| {
                Error::degenerate(format!(
                    "constant POI column at sample {idx} in channel '{}'",
                    set.channel.label
                ))
            })?;
            cols.push(z);
        }
        normalized.push(cols);
    }

    let mut sign_corrections = vec![false; sets.len()];
    if sign_correct {
        for s in 1..sets.len() {
            let mut acc = 0.0;
            let mut used = 0usize;
            for (col, ref_col) in normalized[s].iter().zip(&normalized[0]) {
                if let Some(r) = pearson(col, ref_col) {
                    acc += r;
                    used += 1;
                }
            }
            if used > 0 && acc / (used as f64) < 0.0 {
                sign_corrections[s] = true;
                for col in &mut normalized[s] {
                    for v in col.iter_mut() {
                        *v = -*v;
                    }
                }
            }
        }
    }

    let n_cols = pois.indices.len();
    let mut values = vec![vec![0.0f64; n_cols]; n_traces];
    for cols in &normalized {
        for (c, col) in cols.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                values[t][c] += v;
            }
        }
    }
    let k = sets.len() as f64;
    for row in &mut values {
        for v in row.iter_mut() {
            *v /= k;
        }
    }

    let per_byte_cols = pois
        .per_byte
        .iter()
        .map(|ranked| {
            ranked
                .iter()
                .map(|idx| {
                    pois.indices
                        .iter()
                        .position(|i| i == idx)
                        .expect("per-byte POI missing from index union")
                })
                .collect()
        })
        .collect();

    Ok(FusedTraceSet {
        plaintexts: reference.traces.iter().map(|t| t.plaintext).collect(),
        poi_indices: pois.indices.clone(),
        per_byte_cols,
        values,
        provenance: sets.iter().map(|s| s.channel.label.clone()).collect(),
        sign_corrections,
    })
}

/// Profiled correlation attack on a fused set, as if it were a single
/// channel. Pearson scores are invariant to the per-column normalization
/// applied during fusion, so a raw reference-channel profile is a valid
/// model.
pub fn attack_fused(fused: &FusedTraceSet, profile: &LeakageProfile) -> Result<ScoreMatrix> {
    if fused.per_byte_cols.len() != 16 {
        return Err(Error::invalid(format!(
            "fused set covers {} bytes, need 16",
            fused.per_byte_cols.len()
        )));
    }
    for (b, cols) in fused.per_byte_cols.iter().enumerate() {
        if cols.len() != profile.n_pois {
            return Err(Error::mismatch(format!(
                "byte {b} has {} fused POI columns, profile has {}",
                cols.len(),
                profile.n_pois
            )));
        }
    }
    let columns: Vec<Vec<Vec<f64>>> = (0..16)
        .map(|byte| {
            fused.per_byte_cols[byte]
                .iter()
                .map(|&c| fused.values.iter().map(|row| row[c]).collect())
                .collect()
        })
        .collect();
    attack_columns(
        &fused.plaintexts,
        &columns,
        profile,
        vec![fused.provenance.join("+")],
    )
}

/// Min–max normalization of a 256-vector to [0, 1]. Degenerate all-equal
/// vectors map to all 0.5.
fn minmax_normalize(scores: &[f64; 256]) -> ([f64; 256], bool) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in scores {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if hi == lo {
        return ([0.5; 256], true);
    }
    let span = hi - lo;
    let mut out = [0.0; 256];
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - lo) / span;
    }
    (out, false)
}

/// Aggregates per-channel score matrices into one. Every 256-vector is
/// min–max normalized to [0, 1] before aggregation so that negative
/// correlation scores cannot bias MAX or flip PROD.
pub fn decision_fusion<M: std::borrow::Borrow<ScoreMatrix>>(
    scores: &[M],
    agg: AggregationFn,
) -> Result<ScoreMatrix> {
    if scores.len() < 2 {
        return Err(Error::invalid(format!(
            "decision fusion needs at least 2 score matrices, got {}",
            scores.len()
        )));
    }
    let scores: Vec<&ScoreMatrix> = scores.iter().map(Borrow::borrow).collect();
    let n_bytes = scores[0].n_bytes();
    for m in &scores {
        if m.n_bytes() != n_bytes {
            return Err(Error::mismatch(format!(
                "byte coverage differs: {} vs {n_bytes}",
                m.n_bytes()
            )));
        }
    }

    let mut per_byte = Vec::with_capacity(n_bytes);
    let mut flags = Vec::with_capacity(n_bytes);
    for byte in 0..n_bytes {
        let mut fused = match agg {
            AggregationFn::Avg => [0.0f64; 256],
            AggregationFn::Max => [f64::NEG_INFINITY; 256],
            AggregationFn::Prod => [1.0f64; 256],
        };
        let mut imputed = false;
        for m in &scores {
            let (normalized, _) = minmax_normalize(&m.per_byte[byte]);
            imputed |= m.flags[byte].imputed;
            for (f, &v) in fused.iter_mut().zip(&normalized) {
                match agg {
                    AggregationFn::Avg => *f += v,
                    AggregationFn::Max => *f = f.max(v),
                    AggregationFn::Prod => *f *= v,
                }
            }
        }
        if agg == AggregationFn::Avg {
            for f in &mut fused {
                *f /= scores.len() as f64;
            }
        }
        let degenerate = fused.iter().all(|&v| v == fused[0]);
        per_byte.push(fused);
        flags.push(ByteFlags { degenerate, imputed });
    }

    let provenance = scores.iter().flat_map(|m| m.provenance.clone()).collect();
    let n_traces_used = scores.iter().map(|m| m.n_traces_used).max().unwrap_or(0);
    let out = ScoreMatrix {
        per_byte,
        flags,
        provenance,
        n_traces_used,
    };
    out.validate()?;
    Ok(out)
}

/// Per-byte compatibility of two channels for direct data fusion.
#[derive(Debug, Clone)]
pub struct ByteCompatibility {
    pub byte: usize,
    pub similarity: f64,
    /// Inverted profile: flip this channel before merging.
    pub flip: bool,
    /// Profiles too dissimilar for direct combination.
    pub compatible: bool,
}

/// Similarity threshold below which profiles are reported incompatible.
pub const COMPATIBILITY_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct CompatibilityReport {
    pub channel_a: String,
    pub channel_b: String,
    pub per_byte: Vec<ByteCompatibility>,
}

impl CompatibilityReport {
    pub fn any_flip(&self) -> bool {
        self.per_byte.iter().any(|b| b.flip)
    }

    pub fn all_compatible(&self) -> bool {
        self.per_byte.iter().all(|b| b.compatible)
    }
}

/// Checks whether two channels can be directly combined, byte by byte:
/// Pearson similarity of their profiles, a flip recommendation when the
/// similarity is negative, and an incompatibility flag when |similarity|
/// falls below [`COMPATIBILITY_THRESHOLD`].
pub fn check_fusion_compatibility(
    a: &LeakageProfile,
    b: &LeakageProfile,
) -> Result<CompatibilityReport> {
    let mut per_byte = Vec::with_capacity(16);
    for byte in 0..16 {
        let similarity = crate::profiling::profile_similarity(a, b, byte)?;
        per_byte.push(ByteCompatibility {
            byte,
            similarity,
            flip: similarity < 0.0,
            compatible: similarity.abs() >= COMPATIBILITY_THRESHOLD,
        });
    }
    Ok(CompatibilityReport {
        channel_a: a.channel.label.clone(),
        channel_b: b.channel.label.clone(),
        per_byte,
    })
}

/// Writes compatibility rows `channel_a,channel_b,byte,similarity,flip`.
pub fn write_compatibility_csv(reports: &[CompatibilityReport], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "channel_a,channel_b,byte,similarity,flip")?;
    for report in reports {
        for b in &report.per_byte {
            writeln!(
                w,
                "{},{},{},{},{}",
                report.channel_a, report.channel_b, b.byte, b.similarity, b.flip
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

//! Trace conditioning: time-diversity averaging, z-score normalization,
//! and SNR-based POI selection.
//!
//! All statistics use the population (1/N) convention so z-score and SNR
//! are consistent across the crate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::sim::intermediate_value;
use crate::trace::{Trace, TraceSet};
use crate::{Error, Result};

/// Points of interest selected for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiSet {
    /// Distinct union of all per-byte POIs, in byte-then-rank order.
    pub indices: Vec<usize>,
    /// Ranked POI indices per key byte (highest SNR first).
    pub per_byte: Vec<Vec<usize>>,
    /// Per-byte, per-sample SNR curves used for the ranking. Empty when
    /// the set was loaded from a sidecar file.
    pub snr: Vec<Vec<f64>>,
}

impl PoiSet {
    /// Position of byte `b`'s `rank`-th POI inside [`PoiSet::indices`].
    pub fn column_of(&self, byte: usize, rank: usize) -> Option<usize> {
        let idx = *self.per_byte.get(byte)?.get(rank)?;
        self.indices.iter().position(|&i| i == idx)
    }

    pub fn n_per_byte(&self) -> usize {
        self.per_byte.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Collapses time diversity: every consecutive group of `time_diversity`
/// same-plaintext traces is replaced by its sample-wise mean.
pub fn time_diversity_average(set: &TraceSet) -> Result<TraceSet> {
    let tdiv = set.time_diversity as usize;
    if tdiv == 1 {
        let mut out = set.clone();
        out.time_diversity = 1;
        return Ok(out);
    }
    if set.traces.len() % tdiv != 0 {
        return Err(Error::invalid(format!(
            "trace count {} not divisible by time_diversity {tdiv}",
            set.traces.len()
        )));
    }
    let n_samples = set.n_samples as usize;
    let mut traces = Vec::with_capacity(set.traces.len() / tdiv);
    for group in set.traces.chunks(tdiv) {
        let first = &group[0];
        for t in &group[1..] {
            if t.plaintext != first.plaintext {
                return Err(Error::mismatch(
                    "plaintexts differ inside a time-diversity group".to_string(),
                ));
            }
        }
        let mut acc = vec![0.0f64; n_samples];
        for t in group {
            for (a, &s) in acc.iter_mut().zip(&t.samples) {
                *a += s as f64;
            }
        }
        let samples = acc.iter().map(|a| (a / tdiv as f64) as f32).collect();
        traces.push(Trace {
            samples,
            plaintext: first.plaintext,
            key: first.key,
        });
    }
    Ok(TraceSet {
        channel: set.channel.clone(),
        n_samples: set.n_samples,
        time_diversity: 1,
        traces,
    })
}

/// Z-score normalization with population standard deviation: output has
/// mean 0 and std 1.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::degenerate(format!(
            "zscore needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::degenerate("zscore input is constant".to_string()));
    }
    let std = var.sqrt();
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

/// Per-sample SNR for one key byte: variance over intermediate-value
/// classes of the class means, divided by the mean of the class variances.
/// Classes that receive no trace are skipped.
fn byte_snr(set: &TraceSet, byte: usize) -> Vec<f64> {
    let n_samples = set.n_samples as usize;
    // class -> (count, per-sample sum, per-sample sum of squares)
    let mut count = [0usize; 256];
    let mut sum = vec![vec![0.0f64; n_samples]; 256];
    let mut sum_sq = vec![vec![0.0f64; n_samples]; 256];

    for t in &set.traces {
        let key = t.key.expect("profiling set carries keys");
        let iv = intermediate_value(t.plaintext[byte], key[byte]) as usize;
        count[iv] += 1;
        for (j, &s) in t.samples.iter().enumerate() {
            let v = s as f64;
            sum[iv][j] += v;
            sum_sq[iv][j] += v * v;
        }
    }

    let mut snr = vec![0.0f64; n_samples];
    for (j, out) in snr.iter_mut().enumerate() {
        let mut means = Vec::with_capacity(256);
        let mut var_sum = 0.0;
        for iv in 0..256 {
            if count[iv] == 0 {
                continue;
            }
            let c = count[iv] as f64;
            let mean = sum[iv][j] / c;
            means.push(mean);
            var_sum += sum_sq[iv][j] / c - mean * mean;
        }
        if means.len() < 2 {
            continue;
        }
        let k = means.len() as f64;
        let grand = means.iter().sum::<f64>() / k;
        let signal = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / k;
        let noise = var_sum / k;
        *out = if noise > 0.0 {
            signal / noise
        } else if signal > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
    }
    snr
}

/// Selects the `n_per_byte` highest-SNR sample indices for each key byte,
/// ties broken toward the lower index.
pub fn select_pois(profiling: &TraceSet, n_per_byte: usize) -> Result<PoiSet> {
    if !profiling.has_keys() {
        return Err(Error::invalid(
            "POI selection needs a keyed profiling set".to_string(),
        ));
    }
    if profiling.time_diversity != 1 {
        return Err(Error::invalid(
            "collapse time diversity before POI selection".to_string(),
        ));
    }
    let n_samples = profiling.n_samples as usize;
    if n_per_byte == 0 || n_per_byte > n_samples {
        return Err(Error::invalid(format!(
            "n_per_byte must be in 1..={n_samples}, got {n_per_byte}"
        )));
    }

    let mut per_byte = Vec::with_capacity(16);
    let mut snr_curves = Vec::with_capacity(16);
    for byte in 0..16 {
        let snr = byte_snr(profiling, byte);
        let mut order: Vec<usize> = (0..n_samples).collect();
        // Stable sort keeps the lower index first among SNR ties.
        order.sort_by(|&a, &b| snr[b].partial_cmp(&snr[a]).unwrap_or(std::cmp::Ordering::Equal));
        per_byte.push(order[..n_per_byte].to_vec());
        snr_curves.push(snr);
    }

    let mut indices = Vec::new();
    for ranked in &per_byte {
        for &idx in ranked {
            if !indices.contains(&idx) {
                indices.push(idx);
            }
        }
    }

    Ok(PoiSet {
        indices,
        per_byte,
        snr: snr_curves,
    })
}

/// Writes the POI sidecar: one line per byte with the byte index followed
/// by its ranked sample indices.
pub fn write_poi_set(pois: &PoiSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (byte, ranked) in pois.per_byte.iter().enumerate() {
        write!(w, "{byte}")?;
        for idx in ranked {
            write!(w, " {idx}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a POI sidecar written by [`write_poi_set`]. SNR curves are not
/// persisted, so `snr` comes back empty.
pub fn read_poi_set(path: &Path) -> Result<PoiSet> {
    let r = BufReader::new(File::open(path)?);
    let mut per_byte: Vec<(usize, Vec<usize>)> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let byte: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(format!("poi sidecar line {}: bad byte index", lineno + 1)))?;
        let ranked: Vec<usize> = fields
            .map(|f| {
                f.parse().map_err(|_| {
                    Error::parse(format!("poi sidecar line {}: bad sample index", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if ranked.is_empty() {
            return Err(Error::parse(format!(
                "poi sidecar line {}: byte {} has no indices",
                lineno + 1,
                byte
            )));
        }
        per_byte.push((byte, ranked));
    }
    per_byte.sort_by_key(|(b, _)| *b);
    let expected: Vec<usize> = (0..per_byte.len()).collect();
    let got: Vec<usize> = per_byte.iter().map(|(b, _)| *b).collect();
    if got != expected {
        return Err(Error::parse("poi sidecar byte indices must be 0..n".to_string()));
    }
    let per_byte: Vec<Vec<usize>> = per_byte.into_iter().map(|(_, v)| v).collect();
    let mut indices = Vec::new();
    for ranked in &per_byte {
        for &idx in ranked {
            if !indices.contains(&idx) {
                indices.push(idx);
            }
        }
    }
    Ok(PoiSet {
        indices,
        per_byte,
        snr: Vec::new(),
    })
}

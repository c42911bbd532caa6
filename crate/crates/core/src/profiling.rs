//! Leakage profiles and the profiled correlation attack.
//!
//! A profile stores, per key byte and per intermediate value, the mean
//! leakage amplitude at that byte's POIs, learned from a keyed profiling
//! set. The attack correlates profiled means against observed POI samples
//! for each of the 256 key-byte hypotheses; the Pearson coefficient is the
//! hypothesis score.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::preprocess::PoiSet;
use crate::sim::intermediate_value;
use crate::trace::{ChannelMeta, TraceSet};
use crate::{Error, Result};

/// Pearson correlation; `None` when either side has zero variance.
pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Profile of one key byte: per intermediate value, one mean per POI.
#[derive(Debug, Clone, PartialEq)]
pub struct ByteProfile {
    /// 256 rows of `n_pois` means. Rows with `counts == 0` are missing
    /// classes; their stored values are meaningless and must be accessed
    /// through [`ByteProfile::class_mean`].
    pub means: Vec<Vec<f64>>,
    /// Traces contributing to each intermediate-value class.
    pub counts: Vec<u32>,
}

impl ByteProfile {
    /// Mean vector of a covered class, `None` when the class is missing.
    pub fn class_mean(&self, iv: u8) -> Option<&[f64]> {
        (self.counts[iv as usize] > 0).then(|| self.means[iv as usize].as_slice())
    }

    /// Unweighted mean over covered classes, used as the fallback model
    /// value for missing classes.
    pub fn global_mean(&self) -> Vec<f64> {
        let n_pois = self.means.first().map_or(0, Vec::len);
        let mut acc = vec![0.0; n_pois];
        let mut covered = 0usize;
        for (row, &c) in self.means.iter().zip(&self.counts) {
            if c > 0 {
                covered += 1;
                for (a, &m) in acc.iter_mut().zip(row) {
                    *a += m;
                }
            }
        }
        if covered > 0 {
            for a in &mut acc {
                *a /= covered as f64;
            }
        }
        acc
    }

    pub fn covered_classes(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Per-byte leakage profiles of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageProfile {
    pub channel: ChannelMeta,
    pub n_pois: usize,
    pub per_byte: Vec<ByteProfile>,
}

/// Builds per-byte profiles from a keyed, time-diversity-collapsed set.
pub fn build_profile(profiling: &TraceSet, pois: &PoiSet) -> Result<LeakageProfile> {
    if !profiling.has_keys() {
        return Err(Error::invalid("profiling set must carry keys".to_string()));
    }
    if profiling.time_diversity != 1 {
        return Err(Error::invalid(
            "collapse time diversity before profiling".to_string(),
        ));
    }
    if pois.per_byte.len() != 16 {
        return Err(Error::invalid(format!(
            "POI set covers {} bytes, need 16",
            pois.per_byte.len()
        )));
    }
    let n_pois = pois.n_per_byte();
    for (b, ranked) in pois.per_byte.iter().enumerate() {
        if ranked.is_empty() {
            return Err(Error::invalid(format!("no POIs for byte {b}")));
        }
        if ranked.len() != n_pois {
            return Err(Error::invalid(format!(
                "byte {b} has {} POIs, others have {n_pois}",
                ranked.len()
            )));
        }
        for &idx in ranked {
            if idx >= profiling.n_samples as usize {
                return Err(Error::invalid(format!(
                    "POI index {idx} out of range for byte {b}"
                )));
            }
        }
    }

    let mut per_byte = Vec::with_capacity(16);
    for byte in 0..16 {
        let ranked = &pois.per_byte[byte];
        let mut sums = vec![vec![0.0f64; n_pois]; 256];
        let mut counts = vec![0u32; 256];
        for t in &profiling.traces {
            let key = t.key.expect("keyed set");
            let iv = intermediate_value(t.plaintext[byte], key[byte]) as usize;
            counts[iv] += 1;
            for (pos, &idx) in ranked.iter().enumerate() {
                sums[iv][pos] += t.samples[idx] as f64;
            }
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(row, &c)| {
                if c > 0 {
                    row.into_iter().map(|s| s / c as f64).collect()
                } else {
                    row
                }
            })
            .collect();
        per_byte.push(ByteProfile { means, counts });
    }

    Ok(LeakageProfile {
        channel: profiling.channel.clone(),
        n_pois,
        per_byte,
    })
}

/// Pearson correlation between two channels' first-POI class means for a
/// byte, over the intermediate-value classes both profiles cover.
pub fn profile_similarity(a: &LeakageProfile, b: &LeakageProfile, byte: usize) -> Result<f64> {
    let pa = a
        .per_byte
        .get(byte)
        .ok_or_else(|| Error::invalid(format!("byte {byte} out of range")))?;
    let pb = b
        .per_byte
        .get(byte)
        .ok_or_else(|| Error::invalid(format!("byte {byte} out of range")))?;
    let mut xs = Vec::with_capacity(256);
    let mut ys = Vec::with_capacity(256);
    for iv in 0..=255u8 {
        if let (Some(ma), Some(mb)) = (pa.class_mean(iv), pb.class_mean(iv)) {
            xs.push(ma[0]);
            ys.push(mb[0]);
        }
    }
    if xs.len() < 3 {
        return Err(Error::degenerate(format!(
            "only {} shared classes for byte {byte}, need at least 3",
            xs.len()
        )));
    }
    pearson(&xs, &ys).ok_or_else(|| {
        Error::degenerate(format!("zero-variance profile for byte {byte}"))
    })
}

/// Diagnostic flags of one byte's score vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteFlags {
    /// All 256 scores equal; the vector carries no ranking information.
    pub degenerate: bool,
    /// At least one hypothesis used the global-mean fallback for a
    /// missing profile class.
    pub imputed: bool,
}

/// Per-key-byte score vectors produced by an analysis attack or a fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub per_byte: Vec<[f64; 256]>,
    pub flags: Vec<ByteFlags>,
    /// Labels of the channel(s) the scores came from.
    pub provenance: Vec<String>,
    pub n_traces_used: usize,
}

impl ScoreMatrix {
    pub fn n_bytes(&self) -> usize {
        self.per_byte.len()
    }

    /// Checks the structural invariants: finite scores, and all-equal
    /// vectors only where flagged degenerate.
    pub fn validate(&self) -> Result<()> {
        if self.per_byte.len() != self.flags.len() {
            return Err(Error::invalid("flags/scores length mismatch".to_string()));
        }
        for (b, scores) in self.per_byte.iter().enumerate() {
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::invalid(format!("non-finite score for byte {b}")));
            }
            let all_equal = scores.iter().all(|&s| s == scores[0]);
            if all_equal && !self.flags[b].degenerate {
                return Err(Error::invalid(format!(
                    "byte {b} scores all equal but not flagged degenerate"
                )));
            }
        }
        Ok(())
    }
}

/// Scores hypotheses from per-byte observation columns.
///
/// `columns[b][pos]` holds the POI-`pos` observation of every trace for
/// byte `b`. Shared by the plain and the fused attack paths.
pub(crate) fn attack_columns(
    plaintexts: &[[u8; 16]],
    columns: &[Vec<Vec<f64>>],
    profile: &LeakageProfile,
    provenance: Vec<String>,
) -> Result<ScoreMatrix> {
    let n_traces = plaintexts.len();
    if n_traces < 2 {
        return Err(Error::invalid(format!(
            "attack needs at least 2 traces, got {n_traces}"
        )));
    }
    let mut per_byte = Vec::with_capacity(16);
    let mut flags = Vec::with_capacity(16);
    for byte in 0..16 {
        let byte_profile = &profile.per_byte[byte];
        let global = byte_profile.global_mean();
        let obs = &columns[byte];
        let n_pois = obs.len();
        let mut scores = [0.0f64; 256];
        let mut flag = ByteFlags::default();

        // Models per hypothesis, one vector per POI position.
        let mut model = vec![0.0f64; n_traces];
        for k in 0..=255u8 {
            let mut acc = 0.0;
            for (pos, col) in obs.iter().enumerate().take(n_pois) {
                for (i, p) in plaintexts.iter().enumerate() {
                    let iv = intermediate_value(p[byte], k);
                    model[i] = match byte_profile.class_mean(iv) {
                        Some(m) => m[pos],
                        None => {
                            flag.imputed = true;
                            global[pos]
                        }
                    };
                }
                let r = match pearson(&model, col) {
                    Some(r) => r,
                    None => {
                        // Constant model vector: the hypothesis predicts no
                        // variation and cannot explain the data. Constant
                        // observations carry no information either way.
                        let model_const = model.iter().all(|&m| m == model[0]);
                        if model_const {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                };
                acc += r;
            }
            scores[k as usize] = acc / n_pois as f64;
        }
        if scores.iter().all(|&s| s == scores[0]) {
            flag.degenerate = true;
        }
        per_byte.push(scores);
        flags.push(flag);
    }
    let matrix = ScoreMatrix {
        per_byte,
        flags,
        provenance,
        n_traces_used: n_traces,
    };
    matrix.validate()?;
    Ok(matrix)
}

/// Profiled correlation attack of one channel.
///
/// For each byte and each key hypothesis, the profiled means of the
/// predicted intermediate values are correlated with the observed POI
/// samples; POIs beyond the first contribute by averaging their per-POI
/// correlations.
pub fn correlation_attack(
    attack: &TraceSet,
    profile: &LeakageProfile,
    pois: &PoiSet,
) -> Result<ScoreMatrix> {
    if attack.time_diversity != 1 {
        return Err(Error::invalid(
            "collapse time diversity before attacking".to_string(),
        ));
    }
    if pois.per_byte.len() != 16 {
        return Err(Error::invalid(format!(
            "POI set covers {} bytes, need 16",
            pois.per_byte.len()
        )));
    }
    if pois.n_per_byte() != profile.n_pois {
        return Err(Error::mismatch(format!(
            "profile has {} POIs per byte, POI set has {}",
            profile.n_pois,
            pois.n_per_byte()
        )));
    }
    for (b, ranked) in pois.per_byte.iter().enumerate() {
        for &idx in ranked {
            if idx >= attack.n_samples as usize {
                return Err(Error::invalid(format!(
                    "POI index {idx} for byte {b} out of range (traces have {} samples)",
                    attack.n_samples
                )));
            }
        }
    }
    let plaintexts: Vec<[u8; 16]> = attack.traces.iter().map(|t| t.plaintext).collect();
    let columns: Vec<Vec<Vec<f64>>> = (0..16)
        .map(|byte| {
            pois.per_byte[byte]
                .iter()
                .map(|&idx| {
                    attack
                        .traces
                        .iter()
                        .map(|t| t.samples[idx] as f64)
                        .collect()
                })
                .collect()
        })
        .collect();
    attack_columns(
        &plaintexts,
        &columns,
        profile,
        vec![attack.channel.label.clone()],
    )
}

/// Writes score CSV rows `byte,hypothesis,score`.
pub fn write_scores_csv(matrix: &ScoreMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "byte,hypothesis,score")?;
    for (byte, scores) in matrix.per_byte.iter().enumerate() {
        for (k, s) in scores.iter().enumerate() {
            writeln!(w, "{byte},{k},{s}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a score CSV written by [`write_scores_csv`]. Degenerate flags are
/// re-derived from the values; provenance comes from the file stem.
pub fn read_scores_csv(path: &Path) -> Result<ScoreMatrix> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("empty score CSV".to_string()))??;
    if header.trim() != "byte,hypothesis,score" {
        return Err(Error::parse(format!("unexpected score CSV header: {header}")));
    }
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let ctx = || format!("score CSV line {}", lineno + 2);
        let byte: usize = f
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(ctx()))?;
        let hyp: usize = f
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(ctx()))?;
        let score: f64 = f
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(ctx()))?;
        if hyp > 255 {
            return Err(Error::parse(format!("{}: hypothesis {hyp} > 255", ctx())));
        }
        rows.push((byte, hyp, score));
    }
    let n_bytes = rows.iter().map(|&(b, _, _)| b + 1).max().unwrap_or(0);
    if n_bytes == 0 {
        return Err(Error::parse("score CSV has no rows".to_string()));
    }
    let mut per_byte = vec![[f64::NAN; 256]; n_bytes];
    for (b, k, s) in rows {
        per_byte[b][k] = s;
    }
    for (b, scores) in per_byte.iter().enumerate() {
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::parse(format!(
                "score CSV is missing hypotheses for byte {b}"
            )));
        }
    }
    let flags = per_byte
        .iter()
        .map(|scores| ByteFlags {
            degenerate: scores.iter().all(|&s| s == scores[0]),
            imputed: false,
        })
        .collect();
    let provenance = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .into_iter()
        .collect();
    Ok(ScoreMatrix {
        per_byte,
        flags,
        provenance,
        n_traces_used: 0,
    })
}

/// Writes profile CSV rows
/// `label,frequency_hz,byte,iv,poi_pos,mean,count`.
pub fn write_profile_csv(profile: &LeakageProfile, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "label,frequency_hz,byte,iv,poi_pos,mean,count")?;
    for (byte, bp) in profile.per_byte.iter().enumerate() {
        for iv in 0..256 {
            for pos in 0..profile.n_pois {
                writeln!(
                    w,
                    "{},{},{byte},{iv},{pos},{},{}",
                    profile.channel.label,
                    profile.channel.frequency_hz,
                    bp.means[iv][pos],
                    bp.counts[iv]
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a profile CSV written by [`write_profile_csv`].
pub fn read_profile_csv(path: &Path) -> Result<LeakageProfile> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("empty profile CSV".to_string()))??;
    if header.trim() != "label,frequency_hz,byte,iv,poi_pos,mean,count" {
        return Err(Error::parse(format!(
            "unexpected profile CSV header: {header}"
        )));
    }
    let mut channel: Option<ChannelMeta> = None;
    let mut n_pois = 0usize;
    let mut per_byte: Vec<ByteProfile> = (0..16)
        .map(|_| ByteProfile {
            means: vec![Vec::new(); 256],
            counts: vec![0; 256],
        })
        .collect();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let ctx = || Error::parse(format!("profile CSV line {}", lineno + 2));
        if fields.len() != 7 {
            return Err(ctx());
        }
        let label = fields[0].to_string();
        let freq: f64 = fields[1].trim().parse().map_err(|_| ctx())?;
        let byte: usize = fields[2].trim().parse().map_err(|_| ctx())?;
        let iv: usize = fields[3].trim().parse().map_err(|_| ctx())?;
        let pos: usize = fields[4].trim().parse().map_err(|_| ctx())?;
        let mean: f64 = fields[5].trim().parse().map_err(|_| ctx())?;
        let count: u32 = fields[6].trim().parse().map_err(|_| ctx())?;
        if byte >= 16 || iv >= 256 {
            return Err(ctx());
        }
        channel.get_or_insert_with(|| ChannelMeta::new(freq, label));
        n_pois = n_pois.max(pos + 1);
        let bp = &mut per_byte[byte];
        if bp.means[iv].len() <= pos {
            bp.means[iv].resize(pos + 1, 0.0);
        }
        bp.means[iv][pos] = mean;
        bp.counts[iv] = count;
    }
    let channel = channel.ok_or_else(|| Error::parse("profile CSV has no rows".to_string()))?;
    for bp in &mut per_byte {
        for row in &mut bp.means {
            row.resize(n_pois, 0.0);
        }
    }
    Ok(LeakageProfile {
        channel,
        n_pois,
        per_byte,
    })
}

//! Attack metrics: key rank, guessing entropy, min-traces-to-threshold,
//! and the greedy frequency-diversity search.
//!
//! Key rank is 1-indexed (rank 1 = correct first guess, guessing entropy
//! 0) and tie-breaking is pessimistic: candidates scoring equal to the
//! true key are ranked before it. Ranks for up to two bytes are counted
//! exhaustively; the 16-byte rank is estimated by histogram convolution
//! with a sound lower/upper bracket.

use std::borrow::Borrow;

use crate::fusion::{decision_fusion, AggregationFn};
use crate::profiling::ScoreMatrix;
use crate::{Error, Result};

/// How a key rank was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMethod {
    Exhaustive,
    Estimated,
}

impl RankMethod {
    pub fn name(&self) -> &'static str {
        match self {
            RankMethod::Exhaustive => "exhaustive",
            RankMethod::Estimated => "estimated",
        }
    }
}

/// Rank and guessing entropy of one attack.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationResult {
    /// 1-indexed position of the true key among all candidates.
    pub key_rank: u128,
    /// log2 of the key rank.
    pub guessing_entropy: f64,
    /// Pessimistic per-byte rank of each true key byte.
    pub per_byte_ranks: Vec<u32>,
    pub method: RankMethod,
    /// Half-width of the rank bracket in bits; 0 for exhaustive results.
    pub estimation_error_bits: f64,
}

/// Guessing entropy of a key rank: `log2(rank)`.
///
/// Power-of-two ranks return the exact integer bit count.
pub fn guessing_entropy(key_rank: u128) -> Result<f64> {
    if key_rank < 1 {
        return Err(Error::invalid("key rank must be >= 1".to_string()));
    }
    if key_rank.is_power_of_two() {
        Ok(key_rank.trailing_zeros() as f64)
    } else {
        Ok((key_rank as f64).log2())
    }
}

/// Mean guessing entropy over repeated attacks.
pub fn averaged_ge(results: &[EvaluationResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("cannot average an empty result list".to_string()));
    }
    Ok(results.iter().map(|r| r.guessing_entropy).sum::<f64>() / results.len() as f64)
}

/// Smallest grid point whose averaged GE falls below the threshold;
/// `None` when the curve never crosses it. No monotonicity is assumed —
/// the first crossing wins.
pub fn min_traces_for_ge(curve: &[(usize, f64)], threshold: f64) -> Option<usize> {
    curve.iter().find(|(_, ge)| *ge < threshold).map(|(n, _)| *n)
}

/// Per-hypothesis log-probabilities of one byte: min–max normalize, then
/// log-softmax (temperature 1) so byte scores become additive. Degenerate
/// all-equal vectors map to the uniform distribution.
fn log_probs(scores: &[f64; 256]) -> ([f64; 256], bool) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in scores {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if hi == lo {
        return ([-(256f64.ln()); 256], true);
    }
    let span = hi - lo;
    let mut x = [0.0f64; 256];
    for (o, &s) in x.iter_mut().zip(scores) {
        *o = (s - lo) / span;
    }
    // log-sum-exp with the max (1.0 after normalization) factored out.
    let lse = 1.0 + x.iter().map(|v| (v - 1.0).exp()).sum::<f64>().ln();
    for v in x.iter_mut() {
        *v -= lse;
    }
    (x, false)
}

fn check_key_coverage(scores: &ScoreMatrix, true_key: &[u8]) -> Result<()> {
    if scores.n_bytes() == 0 {
        return Err(Error::invalid("score matrix has no bytes".to_string()));
    }
    if true_key.len() != scores.n_bytes() {
        return Err(Error::mismatch(format!(
            "true key has {} bytes, scores cover {}",
            true_key.len(),
            scores.n_bytes()
        )));
    }
    Ok(())
}

/// Pessimistic rank of the true value inside one 256-vector.
fn byte_rank(scores: &[f64; 256], true_value: u8) -> u32 {
    let t = scores[true_value as usize];
    scores.iter().filter(|&&s| s >= t).count() as u32
}

fn per_byte_ranks(scores: &ScoreMatrix, true_key: &[u8]) -> Vec<u32> {
    scores
        .per_byte
        .iter()
        .zip(true_key)
        .map(|(s, &k)| byte_rank(s, k))
        .collect()
}

/// Exhaustive key rank over at most two bytes (key space <= 2^16).
///
/// The combined candidate score is the sum of per-byte log-probabilities;
/// the rank counts every candidate scoring at least as high as the true
/// key, the true key included.
pub fn exhaustive_key_rank(scores: &ScoreMatrix, true_key: &[u8]) -> Result<EvaluationResult> {
    check_key_coverage(scores, true_key)?;
    let n_bytes = scores.n_bytes();
    if n_bytes > 2 {
        return Err(Error::invalid(format!(
            "exhaustive rank supports at most 2 bytes, got {n_bytes}"
        )));
    }
    let lps: Vec<[f64; 256]> = scores.per_byte.iter().map(|s| log_probs(s).0).collect();

    let rank = match n_bytes {
        1 => {
            let t = lps[0][true_key[0] as usize];
            lps[0].iter().filter(|&&s| s >= t).count() as u128
        }
        2 => {
            let t = lps[0][true_key[0] as usize] + lps[1][true_key[1] as usize];
            let mut count = 0u128;
            for &a in &lps[0] {
                for &b in &lps[1] {
                    if a + b >= t {
                        count += 1;
                    }
                }
            }
            count
        }
        _ => unreachable!(),
    };

    Ok(EvaluationResult {
        key_rank: rank,
        guessing_entropy: guessing_entropy(rank)?,
        per_byte_ranks: per_byte_ranks(scores, true_key),
        method: RankMethod::Exhaustive,
        estimation_error_bits: 0.0,
    })
}

/// Number of histogram bins per byte.
pub const RANK_BINS: usize = 2048;

/// Histogram-convolution key-rank estimate.
///
/// Per byte, the 256 log-probabilities are binned twice (floor and ceil
/// of the bin coordinate); convolving the per-byte histograms yields a
/// sound bracket `[kr_lo, kr_up]` on the pessimistic rank. The returned
/// rank is the log-domain midpoint and `estimation_error_bits` its
/// half-width.
pub fn estimate_key_rank(scores: &ScoreMatrix, true_key: &[u8]) -> Result<EvaluationResult> {
    check_key_coverage(scores, true_key)?;
    let n_bytes = scores.n_bytes();
    let byte_lps: Vec<([f64; 256], bool)> = scores.per_byte.iter().map(log_probs).collect();

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (lp, _) in &byte_lps {
        for &v in lp {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }

    let ranks = per_byte_ranks(scores, true_key);
    if hi == lo {
        // Every candidate ties with the true key; pessimistic rank is the
        // full key space.
        let bits = 8.0 * n_bytes as f64;
        let rank = if n_bytes >= 16 {
            u128::MAX
        } else {
            1u128 << (8 * n_bytes)
        };
        return Ok(EvaluationResult {
            key_rank: rank,
            guessing_entropy: bits,
            per_byte_ranks: ranks,
            method: RankMethod::Estimated,
            estimation_error_bits: 0.0,
        });
    }

    let w = (hi - lo) / (RANK_BINS - 1) as f64;
    let mut hists_fl: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_bytes);
    let mut hists_cl: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_bytes);
    let mut t_fl = 0usize;
    let mut t_cl = 0usize;
    for (byte, (lp, degenerate)) in byte_lps.iter().enumerate() {
        let mut fl_counts = vec![0.0f64; RANK_BINS];
        let mut cl_counts = vec![0.0f64; RANK_BINS];
        let bin_of = |v: f64| -> (usize, usize) {
            let q = ((v - lo) / w).clamp(0.0, (RANK_BINS - 1) as f64);
            if *degenerate {
                // All 256 values are identical; snap both bounds to one
                // bin so full ties stay pessimistic.
                let b = q.round() as usize;
                (b, b)
            } else {
                (q.floor() as usize, q.ceil() as usize)
            }
        };
        for &v in lp {
            let (f, c) = bin_of(v);
            fl_counts[f] += 1.0;
            cl_counts[c] += 1.0;
        }
        let (f, c) = bin_of(lp[true_key[byte] as usize]);
        t_fl += f;
        t_cl += c;
        let sparse = |counts: Vec<f64>| -> Vec<(usize, f64)> {
            counts
                .into_iter()
                .enumerate()
                .filter(|&(_, c)| c > 0.0)
                .collect()
        };
        hists_fl.push(sparse(fl_counts));
        hists_cl.push(sparse(cl_counts));
    }

    fn convolve(hists: &[Vec<(usize, f64)>]) -> Vec<f64> {
        let mut acc = vec![1.0f64];
        for hist in hists {
            let max_bin = hist.last().map_or(0, |&(b, _)| b);
            let mut next = vec![0.0f64; acc.len() + max_bin];
            for (i, &a) in acc.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for &(b, c) in hist {
                    next[i + b] += a * c;
                }
            }
            acc = next;
        }
        acc
    }

    let tail = |conv: &[f64], from: usize| -> f64 {
        conv.iter().skip(from).sum()
    };

    let conv_cl = convolve(&hists_cl);
    let conv_fl = convolve(&hists_fl);
    let kr_up = tail(&conv_cl, t_fl).max(1.0);
    let kr_lo = tail(&conv_fl, t_cl).max(1.0);

    let up_bits = kr_up.log2();
    let lo_bits = kr_lo.log2();
    let ge = 0.5 * (up_bits + lo_bits);
    let err = 0.5 * (up_bits - lo_bits);
    let key_rank = (ge.exp2().round() as u128).max(1);

    Ok(EvaluationResult {
        key_rank,
        guessing_entropy: ge,
        per_byte_ranks: ranks,
        method: RankMethod::Estimated,
        estimation_error_bits: err,
    })
}

/// Ranks with the method fitting the byte coverage: exhaustive up to two
/// bytes, histogram estimate beyond.
pub fn evaluate_scores(scores: &ScoreMatrix, true_key: &[u8]) -> Result<EvaluationResult> {
    if scores.n_bytes() <= 2 {
        exhaustive_key_rank(scores, true_key)
    } else {
        estimate_key_rank(scores, true_key)
    }
}

/// One step of the greedy diversity search.
#[derive(Debug, Clone)]
pub struct GreedyStep {
    /// Frequency diversity order: 0 is the best single channel.
    pub order: usize,
    /// Channel added at this step; `None` when no candidate improved on
    /// the previous selection.
    pub added: Option<String>,
    /// Selection after this step, in order of addition.
    pub selection: Vec<String>,
    pub ge: f64,
}

fn matrix_label(m: &ScoreMatrix) -> String {
    m.provenance.join("+")
}

/// Greedy search for the best channel combination at each frequency
/// diversity order.
///
/// Channels are sorted by individual GE; the selection starts with the
/// best one. Each iteration fuses the current selection with every
/// remaining candidate (decision fusion, AVG), appends the one yielding
/// the lowest GE, and repeats up to `limit_order`. Keeping the previous
/// selection is always evaluated as the no-add candidate, so the GE
/// trajectory never increases; a channel is never appended twice.
pub fn greedy_diversity_search<M: Borrow<ScoreMatrix>>(
    channel_scores: &[M],
    true_key: &[u8],
    limit_order: usize,
) -> Result<Vec<GreedyStep>> {
    if channel_scores.len() < 2 {
        return Err(Error::invalid(format!(
            "greedy search needs at least 2 channels, got {}",
            channel_scores.len()
        )));
    }
    if limit_order < 1 {
        return Err(Error::invalid("limit_order must be >= 1".to_string()));
    }

    let mut individual = Vec::with_capacity(channel_scores.len());
    for m in channel_scores {
        individual.push(evaluate_scores(m.borrow(), true_key)?.guessing_entropy);
    }
    let mut order_by_ge: Vec<usize> = (0..channel_scores.len()).collect();
    order_by_ge.sort_by(|&a, &b| {
        individual[a]
            .partial_cmp(&individual[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let best = order_by_ge[0];
    let mut selected = vec![best];
    let mut steps = vec![GreedyStep {
        order: 0,
        added: None,
        selection: vec![matrix_label(channel_scores[best].borrow())],
        ge: individual[best],
    }];

    for order in 1..=limit_order {
        let mut best_ge = steps.last().unwrap().ge;
        let mut best_candidate: Option<usize> = None;
        for &cand in &order_by_ge {
            if selected.contains(&cand) {
                continue;
            }
            let mut pool: Vec<&ScoreMatrix> =
                selected.iter().map(|&i| channel_scores[i].borrow()).collect();
            pool.push(channel_scores[cand].borrow());
            let fused = decision_fusion(&pool, AggregationFn::Avg)?;
            let ge = evaluate_scores(&fused, true_key)?.guessing_entropy;
            if ge < best_ge {
                best_ge = ge;
                best_candidate = Some(cand);
            }
        }
        if let Some(cand) = best_candidate {
            selected.push(cand);
        }
        steps.push(GreedyStep {
            order,
            added: best_candidate.map(|i| matrix_label(channel_scores[i].borrow())),
            selection: selected
                .iter()
                .map(|&i| matrix_label(channel_scores[i].borrow()))
                .collect(),
            ge: best_ge,
        });
    }
    Ok(steps)
}

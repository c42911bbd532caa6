//! Property tests for the cross-module invariants: lossless trace-set
//! round trips, normalization invariances, and fusion symmetry.

use proptest::prelude::*;

use screamfuse::evaluation::{estimate_key_rank, exhaustive_key_rank};
use screamfuse::fusion::{decision_fusion, AggregationFn};
use screamfuse::preprocess::{time_diversity_average, zscore};
use screamfuse::profiling::{ByteFlags, ScoreMatrix};
use screamfuse::trace::{read_trace_set, write_trace_set, ChannelMeta, Trace, TraceSet};

fn arb_trace_set() -> impl Strategy<Value = TraceSet> {
    (
        0usize..6,
        1u32..12,
        any::<bool>(),
        "[a-z]{1,8}",
        1.0e6f64..1.0e10,
    )
        .prop_flat_map(|(n_traces, n_samples, keys, label, freq)| {
            let trace = (
                proptest::collection::vec(-1.0e3f32..1.0e3, n_samples as usize),
                proptest::array::uniform16(any::<u8>()),
                proptest::array::uniform16(any::<u8>()),
            )
                .prop_map(move |(samples, plaintext, key)| Trace {
                    samples,
                    plaintext,
                    key: keys.then_some(key),
                });
            proptest::collection::vec(trace, n_traces).prop_map(move |traces| TraceSet {
                channel: ChannelMeta::new(freq, label.clone()),
                n_samples,
                time_diversity: 1,
                traces,
            })
        })
}

fn arb_score_matrix(n_bytes: usize) -> impl Strategy<Value = ScoreMatrix> {
    proptest::collection::vec(
        proptest::collection::vec(-1.0f64..1.0, 256),
        n_bytes,
    )
    .prop_map(|rows| {
        let per_byte: Vec<[f64; 256]> = rows
            .into_iter()
            .map(|r| {
                let mut a = [0.0f64; 256];
                a.copy_from_slice(&r);
                a
            })
            .collect();
        let flags = per_byte
            .iter()
            .map(|s| ByteFlags {
                degenerate: s.iter().all(|&v| v == s[0]),
                imputed: false,
            })
            .collect();
        ScoreMatrix {
            per_byte,
            flags,
            provenance: vec!["p".to_string()],
            n_traces_used: 0,
        }
    })
}

fn ranking(scores: &[f64; 256]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..256).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
    order
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_set_round_trips_bit_exactly(set in arb_trace_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.trc");
        write_trace_set(&set, &path).unwrap();
        let back = read_trace_set(&path).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn zscore_ignores_positive_affine_maps(
        values in proptest::collection::vec(-100.0f64..100.0, 4..48),
        a in 0.25f64..4.0,
        b in -50.0f64..50.0,
    ) {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo > 0.1);
        let base = zscore(&values).unwrap();
        let mapped: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let moved = zscore(&mapped).unwrap();
        for (x, y) in base.iter().zip(&moved) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let negated: Vec<f64> = values.iter().map(|v| -v).collect();
        let flipped = zscore(&negated).unwrap();
        for (x, y) in base.iter().zip(&flipped) {
            prop_assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn averaging_commutes_with_power_of_two_gain(
        rows in proptest::collection::vec(
            proptest::collection::vec(-1.0e2f32..1.0e2, 4),
            1usize..5,
        ),
        tdiv in 1u32..5,
        exponent in -2i32..4,
    ) {
        let gain = 2.0f32.powi(exponent);
        let traces: Vec<Trace> = rows
            .iter()
            .enumerate()
            .flat_map(|(p, samples)| {
                let samples = samples.clone();
                (0..tdiv).map(move |r| Trace {
                    samples: samples.iter().map(|s| s + r as f32).collect(),
                    plaintext: [p as u8; 16],
                    key: None,
                })
            })
            .collect();
        let set = TraceSet {
            channel: ChannelMeta::new(1e9, "g"),
            n_samples: 4,
            time_diversity: tdiv,
            traces,
        };
        let mut scaled = set.clone();
        for t in &mut scaled.traces {
            for s in &mut t.samples {
                *s *= gain;
            }
        }
        let avg_scaled = time_diversity_average(&scaled).unwrap();
        let mut scaled_avg = time_diversity_average(&set).unwrap();
        for t in &mut scaled_avg.traces {
            for s in &mut t.samples {
                *s *= gain;
            }
        }
        prop_assert_eq!(avg_scaled, scaled_avg);
    }

    #[test]
    fn decision_fusion_is_permutation_symmetric(
        a in arb_score_matrix(2),
        b in arb_score_matrix(2),
        c in arb_score_matrix(2),
    ) {
        for agg in AggregationFn::ALL {
            let abc = decision_fusion(&[&a, &b, &c], agg).unwrap();
            let cab = decision_fusion(&[&c, &a, &b], agg).unwrap();
            for (x, y) in abc.per_byte.iter().zip(&cab.per_byte) {
                for (u, v) in x.iter().zip(y) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn avg_fusion_ranking_ignores_affine_rescaling(
        a in arb_score_matrix(1),
        b in arb_score_matrix(1),
        scale in 0.5f64..8.0,
        shift in -4.0f64..4.0,
    ) {
        let mut rescaled = b.clone();
        for s in rescaled.per_byte[0].iter_mut() {
            *s = scale * *s + shift;
        }
        let base = decision_fusion(&[&a, &b], AggregationFn::Avg).unwrap();
        let moved = decision_fusion(&[&a, &rescaled], AggregationFn::Avg).unwrap();
        prop_assert_eq!(ranking(&base.per_byte[0]), ranking(&moved.per_byte[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimate_stays_inside_its_own_bracket(
        m in arb_score_matrix(2),
        k0 in any::<u8>(),
        k1 in any::<u8>(),
    ) {
        let key = [k0, k1];
        let exact = exhaustive_key_rank(&m, &key).unwrap();
        let est = estimate_key_rank(&m, &key).unwrap();
        let diff = (est.guessing_entropy - exact.guessing_entropy).abs();
        prop_assert!(diff <= est.estimation_error_bits + 1e-9);
    }
}

//! Deterministic multi-channel leakage simulator.
//!
//! Each channel observes the same encryption executions (shared plaintext
//! sequence) through its own gain, profile distortion, and independent
//! Gaussian noise. The leaking intermediate is the first-round AES S-box
//! output `SBOX[p ^ k]`, with Hamming weight as the base leakage model.
//!
//! Noise is addressed by `(channel, trace, sample)` counter streams, so
//! generation is bit-reproducible, channels can be generated in parallel,
//! and adding a channel never changes the noise of existing ones.

use rayon::prelude::*;

use crate::rng::{self, Stream};
use crate::trace::{ChannelMeta, Trace, TraceSet};
use crate::{Error, Result};

/// AES forward S-box.
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab,
    0x76, 0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4,
    0x72, 0xc0, 0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71,
    0xd8, 0x31, 0x15, 0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2,
    0xeb, 0x27, 0xb2, 0x75, 0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6,
    0xb3, 0x29, 0xe3, 0x2f, 0x84, 0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb,
    0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf, 0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45,
    0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8, 0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5,
    0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2, 0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44,
    0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73, 0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a,
    0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb, 0xe0, 0x32, 0x3a, 0x0a, 0x49,
    0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79, 0xe7, 0xc8, 0x37, 0x6d,
    0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08, 0xba, 0x78, 0x25,
    0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a, 0x70, 0x3e,
    0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e, 0xe1,
    0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb,
    0x16,
];

/// First-round attacked intermediate: `SBOX[p ^ k]`.
#[inline]
pub fn intermediate_value(plaintext_byte: u8, key_byte: u8) -> u8 {
    SBOX[(plaintext_byte ^ key_byte) as usize]
}

/// Number of set bits.
#[inline]
pub fn hamming_weight(v: u8) -> u32 {
    v.count_ones()
}

/// Simulator parameters of one frequency channel.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub meta: ChannelMeta,
    /// Leakage scaling. A negative gain produces an inverted profile.
    pub gain: f64,
    /// Gaussian noise standard deviation per raw sample.
    pub noise_std: f64,
    /// Drives the fixed per-channel perturbation of the leakage profile.
    pub distortion_seed: u64,
    /// Blend factor in [0, 1] between the Hamming-weight base profile and
    /// the perturbation.
    pub distortion_strength: f64,
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.distortion_strength) {
            return Err(Error::invalid(format!(
                "distortion_strength must be in [0, 1], got {}",
                self.distortion_strength
            )));
        }
        if !self.gain.is_finite() {
            return Err(Error::invalid("gain must be finite"));
        }
        Ok(())
    }
}

/// Full simulation request: a set of channels observing the same
/// `n_plaintexts` encryptions, each repeated `time_diversity` times.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub channels: Vec<ChannelModel>,
    pub n_plaintexts: usize,
    pub time_diversity: u32,
    pub n_samples: u32,
    /// Sample indices where intermediate-value leakage is embedded; key
    /// byte `b` leaks at `leak_sample_indices[b % len]`.
    pub leak_sample_indices: Vec<u32>,
    pub key: [u8; 16],
    pub master_seed: u64,
}

impl SimConfig {
    /// Default leak placement: byte `b` owns sample `4 * b` of a 64-sample
    /// trace, so POI selection has a real search problem.
    pub fn default_leak_indices() -> Vec<u32> {
        (0..16).map(|b| 4 * b).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("at least one channel required"));
        }
        for c in &self.channels {
            c.validate()?;
        }
        if self.n_plaintexts == 0 {
            return Err(Error::invalid("n_plaintexts must be positive"));
        }
        if self.time_diversity == 0 {
            return Err(Error::invalid("time_diversity must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be positive"));
        }
        if self.leak_sample_indices.is_empty() {
            return Err(Error::invalid("leak_sample_indices must be non-empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &self.leak_sample_indices {
            if i >= self.n_samples {
                return Err(Error::invalid(format!(
                    "leak sample index {i} out of range (n_samples {})",
                    self.n_samples
                )));
            }
            if !seen.insert(i) {
                return Err(Error::invalid(format!("duplicate leak sample index {i}")));
            }
        }
        Ok(())
    }

    /// Plaintext sequence derived from the master seed; shared by every
    /// channel so all frequencies observe the same executions.
    pub fn plaintexts(&self) -> Vec<[u8; 16]> {
        let mut s = Stream::new(self.master_seed, &[STREAM_PLAINTEXT]);
        (0..self.n_plaintexts)
            .map(|_| {
                let mut p = [0u8; 16];
                p.iter_mut().for_each(|b| *b = s.next_byte());
                p
            })
            .collect()
    }
}

const STREAM_PLAINTEXT: u64 = 0x50;
const STREAM_NOISE: u64 = 0x4E;
const STREAM_PERTURB: u64 = 0x44;

/// Deterministic per-intermediate-value expected leakage of a channel:
///
/// `gain * ((1 - strength) * HW(iv) + strength * perturb(iv, seed))`
///
/// where `perturb` is a fixed pseudo-random value in [0, 8] derived from
/// the channel's distortion seed. Identical calls return identical
/// profiles.
pub fn channel_profile(model: &ChannelModel) -> [f64; 256] {
    let mut profile = [0.0; 256];
    for (iv, slot) in profile.iter_mut().enumerate() {
        let base = hamming_weight(iv as u8) as f64;
        let perturb =
            8.0 * rng::unit_f64(rng::derive(model.distortion_seed, &[STREAM_PERTURB, iv as u64]));
        *slot = model.gain
            * ((1.0 - model.distortion_strength) * base + model.distortion_strength * perturb);
    }
    profile
}

fn simulate_channel(
    config: &SimConfig,
    channel_index: usize,
    plaintexts: &[[u8; 16]],
) -> TraceSet {
    let model = &config.channels[channel_index];
    let profile = channel_profile(model);
    let n_samples = config.n_samples as usize;
    let tdiv = config.time_diversity as usize;

    let mut traces = Vec::with_capacity(plaintexts.len() * tdiv);
    for (p_idx, plaintext) in plaintexts.iter().enumerate() {
        // Noiseless leakage template for this plaintext; repetitions only
        // differ in noise.
        let mut leak = vec![0.0f64; n_samples];
        for (b, (&pb, &kb)) in plaintext.iter().zip(config.key.iter()).enumerate() {
            let idx = config.leak_sample_indices[b % config.leak_sample_indices.len()] as usize;
            leak[idx] += profile[intermediate_value(pb, kb) as usize];
        }
        for rep in 0..tdiv {
            let trace_idx = (p_idx * tdiv + rep) as u64;
            let samples = (0..n_samples)
                .map(|j| {
                    let noise = if model.noise_std > 0.0 {
                        model.noise_std
                            * rng::gauss(
                                config.master_seed,
                                &[STREAM_NOISE, channel_index as u64, trace_idx, j as u64],
                            )
                    } else {
                        0.0
                    };
                    (leak[j] + noise) as f32
                })
                .collect();
            traces.push(Trace {
                samples,
                plaintext: *plaintext,
                key: Some(config.key),
            });
        }
    }

    TraceSet {
        channel: model.meta.clone(),
        n_samples: config.n_samples,
        time_diversity: config.time_diversity,
        traces,
    }
}

/// Generates one trace set per channel. Channels are generated in
/// parallel; counter-addressed noise makes the output independent of the
/// schedule.
pub fn simulate(config: &SimConfig) -> Result<Vec<TraceSet>> {
    config.validate()?;
    let plaintexts = config.plaintexts();
    Ok((0..config.channels.len())
        .into_par_iter()
        .map(|c| simulate_channel(config, c, &plaintexts))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rebuilds the AES S-box from first principles (multiplicative
    /// inverse in GF(2^8) with the AES polynomial, then the affine
    /// transform) and checks the packaged table against it.
    #[test]
    fn sbox_matches_algebraic_construction() {
        fn gf_mul(mut a: u8, mut b: u8) -> u8 {
            let mut acc = 0u8;
            while b != 0 {
                if b & 1 != 0 {
                    acc ^= a;
                }
                let hi = a & 0x80 != 0;
                a <<= 1;
                if hi {
                    a ^= 0x1B;
                }
                b >>= 1;
            }
            acc
        }
        fn gf_inv(a: u8) -> u8 {
            if a == 0 {
                return 0;
            }
            // a^254 = a^-1 in GF(2^8)
            let mut result = 1u8;
            let mut base = a;
            let mut exp = 254u32;
            while exp > 0 {
                if exp & 1 == 1 {
                    result = gf_mul(result, base);
                }
                base = gf_mul(base, base);
                exp >>= 1;
            }
            result
        }
        for x in 0..=255u8 {
            let inv = gf_inv(x);
            let mut s = 0u8;
            for bit in 0..8 {
                let b = ((inv >> bit) & 1)
                    ^ ((inv >> ((bit + 4) % 8)) & 1)
                    ^ ((inv >> ((bit + 5) % 8)) & 1)
                    ^ ((inv >> ((bit + 6) % 8)) & 1)
                    ^ ((inv >> ((bit + 7) % 8)) & 1)
                    ^ ((0x63 >> bit) & 1);
                s |= b << bit;
            }
            assert_eq!(SBOX[x as usize], s, "S-box mismatch at {x:#04x}");
        }
    }

    #[test]
    fn intermediate_value_known_entries() {
        assert_eq!(intermediate_value(0x00, 0x00), 0x63);
        assert_eq!(intermediate_value(0x53, 0x00), 0xED);
    }

    #[test]
    fn intermediate_value_is_symmetric() {
        for a in 0..=255u8 {
            for b in [0u8, 1, 17, 128, 255] {
                assert_eq!(intermediate_value(a, b), intermediate_value(b, a));
            }
        }
    }

    #[test]
    fn hamming_weight_edges() {
        assert_eq!(hamming_weight(0x00), 0);
        assert_eq!(hamming_weight(0xFF), 8);
        assert_eq!(hamming_weight(0xAA), 4);
    }

    fn model(label: &str, gain: f64, noise_std: f64, seed: u64, strength: f64) -> ChannelModel {
        ChannelModel {
            meta: ChannelMeta::new(2.464e9, label),
            gain,
            noise_std,
            distortion_seed: seed,
            distortion_strength: strength,
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn undistorted_profile_is_hamming_weight() {
        let p = channel_profile(&model("a", 1.0, 0.0, 1, 0.0));
        for iv in 0..256 {
            assert_eq!(p[iv], hamming_weight(iv as u8) as f64);
        }
    }

    #[test]
    fn negated_gain_inverts_profile() {
        let pos = channel_profile(&model("a", 1.0, 0.0, 1, 0.0));
        let neg = channel_profile(&model("b", -1.0, 0.0, 1, 0.0));
        for iv in 0..256 {
            assert_eq!(neg[iv], -pos[iv]);
        }
        assert!((pearson(&pos, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gain_scaling_preserves_correlation() {
        let a = channel_profile(&model("a", 2.0, 0.0, 42, 0.5));
        let b = channel_profile(&model("b", 4.0, 0.0, 42, 0.5));
        for iv in 0..256 {
            assert!((b[iv] - 2.0 * a[iv]).abs() < 1e-12);
        }
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
    }

    fn base_config(channels: Vec<ChannelModel>) -> SimConfig {
        SimConfig {
            channels,
            n_plaintexts: 4,
            time_diversity: 1,
            n_samples: 64,
            leak_sample_indices: SimConfig::default_leak_indices(),
            key: *b"0123456789abcdef",
            master_seed: 99,
        }
    }

    #[test]
    fn noiseless_trace_equals_profile_value() {
        let cfg = SimConfig {
            n_plaintexts: 1,
            ..base_config(vec![model("a", 1.5, 0.0, 3, 0.25)])
        };
        let sets = simulate(&cfg).unwrap();
        let profile = channel_profile(&cfg.channels[0]);
        let trace = &sets[0].traces[0];
        for b in 0..16 {
            let idx = (4 * b) as usize;
            let iv = intermediate_value(trace.plaintext[b], cfg.key[b]);
            assert_eq!(trace.samples[idx], profile[iv as usize] as f32);
        }
        // Non-leak samples are exactly zero without noise.
        assert_eq!(trace.samples[1], 0.0);
    }

    #[test]
    fn channels_share_plaintext_sequence() {
        let cfg = base_config(vec![
            model("a", 1.0, 0.5, 1, 0.0),
            model("b", 1.0, 0.5, 2, 0.0),
        ]);
        let sets = simulate(&cfg).unwrap();
        for (ta, tb) in sets[0].traces.iter().zip(&sets[1].traces) {
            assert_eq!(ta.plaintext, tb.plaintext);
        }
    }

    #[test]
    fn simulation_is_reproducible() {
        let cfg = base_config(vec![model("a", 1.0, 1.0, 1, 0.1)]);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adding_a_channel_does_not_perturb_existing_noise() {
        let one = base_config(vec![model("a", 1.0, 1.0, 1, 0.0)]);
        let two = base_config(vec![
            model("a", 1.0, 1.0, 1, 0.0),
            model("b", 1.0, 1.0, 2, 0.0),
        ]);
        let sets_one = simulate(&one).unwrap();
        let sets_two = simulate(&two).unwrap();
        assert_eq!(sets_one[0], sets_two[0]);
    }

    #[test]
    fn noise_std_matches_request() {
        let cfg = SimConfig {
            n_plaintexts: 10_000,
            n_samples: 4,
            leak_sample_indices: vec![0],
            ..base_config(vec![model("a", 0.0, 1.0, 1, 0.0)])
        };
        let sets = simulate(&cfg).unwrap();
        for j in 0..4 {
            let vals: Vec<f64> = sets[0].traces.iter().map(|t| t.samples[j] as f64).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            assert!((0.97..=1.03).contains(&std), "sample {j}: std {std}");
        }
    }

    #[test]
    fn cross_channel_noise_is_independent() {
        let cfg = SimConfig {
            n_plaintexts: 10_000,
            n_samples: 2,
            leak_sample_indices: vec![0],
            ..base_config(vec![
                model("a", 0.0, 1.0, 1, 0.0),
                model("b", 0.0, 1.0, 2, 0.0),
            ])
        };
        let sets = simulate(&cfg).unwrap();
        for j in 0..2 {
            let a: Vec<f64> = sets[0].traces.iter().map(|t| t.samples[j] as f64).collect();
            let b: Vec<f64> = sets[1].traces.iter().map(|t| t.samples[j] as f64).collect();
            let r = pearson(&a, &b);
            assert!(r.abs() < 0.03, "sample {j}: cross-channel corr {r}");
        }
    }

    #[test]
    fn gain_sign_flip_negates_noiseless_leakage() {
        let pos = SimConfig {
            ..base_config(vec![model("a", 2.0, 0.0, 5, 0.3)])
        };
        let neg = SimConfig {
            ..base_config(vec![model("a", -2.0, 0.0, 5, 0.3)])
        };
        let sp = simulate(&pos).unwrap();
        let sn = simulate(&neg).unwrap();
        for (tp, tn) in sp[0].traces.iter().zip(&sn[0].traces) {
            for (a, b) in tp.samples.iter().zip(&tn.samples) {
                assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = base_config(vec![model("a", 1.0, -1.0, 1, 0.0)]);
        assert!(matches!(simulate(&cfg), Err(Error::Invalid(_))));
        cfg = base_config(vec![model("a", 1.0, 0.0, 1, 1.5)]);
        assert!(matches!(simulate(&cfg), Err(Error::Invalid(_))));
        cfg = base_config(vec![model("a", 1.0, 0.0, 1, 0.0)]);
        cfg.leak_sample_indices = vec![64];
        assert!(matches!(simulate(&cfg), Err(Error::Invalid(_))));
    }
}

//! Trace, trace-set, and channel metadata types, plus the binary trace-set
//! file format shared by every stage of the attack chain.
//!
//! On-disk layout, little-endian throughout:
//!
//! ```text
//! magic "SCRM" | version u16 = 1 | flags u16 (bit0 = keys present)
//! | n_traces u64 | n_samples u32 | time_diversity u32
//! | frequency_hz f64 | label_len u16 | label bytes
//! then per trace: plaintext 16 bytes | [key 16 bytes if flag] | n_samples x f32
//! ```
//!
//! Samples are stored as 32-bit floats and kept as `f32` in memory so a
//! write/read round trip is bit exact; all statistics downstream are
//! computed in double precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SCRM";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_KEYS: u16 = 0x0001;

/// Identity of one frequency channel. The frequency is a label for
/// provenance and reporting; the analysis chain never dereferences it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMeta {
    pub frequency_hz: f64,
    pub label: String,
}

impl ChannelMeta {
    pub fn new(frequency_hz: f64, label: impl Into<String>) -> Self {
        ChannelMeta {
            frequency_hz,
            label: label.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0) {
            return Err(Error::invalid(format!(
                "frequency_hz must be > 0, got {}",
                self.frequency_hz
            )));
        }
        if self.label.len() > u16::MAX as usize {
            return Err(Error::invalid("label longer than 65535 bytes"));
        }
        Ok(())
    }
}

/// One captured (or simulated) trace: a fixed-length sample vector with the
/// plaintext of the encryption it observed. The key is present in profiling
/// sets and hidden from the attack path in attack sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<f32>,
    pub plaintext: [u8; 16],
    pub key: Option<[u8; 16]>,
}

/// A set of traces from one channel, all sharing a sample count.
///
/// Traces are ordered as consecutive groups of `time_diversity` repetitions
/// of the same plaintext.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub channel: ChannelMeta,
    pub n_samples: u32,
    pub time_diversity: u32,
    pub traces: Vec<Trace>,
}

impl TraceSet {
    pub fn n_traces(&self) -> usize {
        self.traces.len()
    }

    /// True when every trace carries a key.
    pub fn has_keys(&self) -> bool {
        !self.traces.is_empty() && self.traces.iter().all(|t| t.key.is_some())
    }

    /// Checks the structural invariants: positive sample count and time
    /// diversity, uniform trace lengths, uniform key presence.
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be positive"));
        }
        if self.time_diversity == 0 {
            return Err(Error::invalid("time_diversity must be >= 1"));
        }
        for (i, t) in self.traces.iter().enumerate() {
            if t.samples.len() != self.n_samples as usize {
                return Err(Error::invalid(format!(
                    "trace {i} has {} samples, set declares {}",
                    t.samples.len(),
                    self.n_samples
                )));
            }
        }
        let with_keys = self.traces.iter().filter(|t| t.key.is_some()).count();
        if with_keys != 0 && with_keys != self.traces.len() {
            return Err(Error::invalid(
                "key presence must be uniform across a trace set",
            ));
        }
        Ok(())
    }

    /// New set containing the selected trace indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<TraceSet> {
        let mut traces = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = self.traces.get(i).ok_or_else(|| {
                Error::invalid(format!("trace index {i} out of range ({})", self.n_traces()))
            })?;
            traces.push(t.clone());
        }
        Ok(TraceSet {
            channel: self.channel.clone(),
            n_samples: self.n_samples,
            time_diversity: self.time_diversity,
            traces,
        })
    }

    /// Copy of the set with every sample negated. Models a channel whose
    /// leakage profile is inverted relative to this one.
    pub fn negated(&self, label: impl Into<String>) -> TraceSet {
        let mut out = self.clone();
        out.channel.label = label.into();
        for t in &mut out.traces {
            for s in &mut t.samples {
                *s = -*s;
            }
        }
        out
    }
}

/// Writes a trace set in the binary format. The set is validated first;
/// nothing is written if an invariant fails.
pub fn write_trace_set(set: &TraceSet, path: &Path) -> Result<()> {
    set.validate()?;
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);

    let keys = set.has_keys();
    w.write_all(&MAGIC)?;
    w.write_u16::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u16::<LittleEndian>(if keys { FLAG_KEYS } else { 0 })?;
    w.write_u64::<LittleEndian>(set.traces.len() as u64)?;
    w.write_u32::<LittleEndian>(set.n_samples)?;
    w.write_u32::<LittleEndian>(set.time_diversity)?;
    w.write_f64::<LittleEndian>(set.channel.frequency_hz)?;
    w.write_u16::<LittleEndian>(set.channel.label.len() as u16)?;
    w.write_all(set.channel.label.as_bytes())?;

    for t in &set.traces {
        w.write_all(&t.plaintext)?;
        if keys {
            w.write_all(&t.key.expect("validated uniform key presence"))?;
        }
        for &s in &t.samples {
            w.write_f32::<LittleEndian>(s)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

/// Reads a trace set written by [`write_trace_set`].
pub fn read_trace_set(path: &Path) -> Result<TraceSet> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::Truncated("version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let flags = r
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::Truncated("flags"))?;
    if flags & !FLAG_KEYS != 0 {
        return Err(Error::invalid(format!("unknown flag bits {flags:#06x}")));
    }
    let keys = flags & FLAG_KEYS != 0;
    let n_traces = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Truncated("n_traces"))?;
    let n_samples = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Truncated("n_samples"))?;
    let time_diversity = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Truncated("time_diversity"))?;
    let frequency_hz = r
        .read_f64::<LittleEndian>()
        .map_err(|_| Error::Truncated("frequency_hz"))?;
    let label_len = r
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::Truncated("label_len"))?;
    let mut label = vec![0u8; label_len as usize];
    read_exact_or(&mut r, &mut label, "label")?;
    let label =
        String::from_utf8(label).map_err(|_| Error::parse("label is not valid UTF-8"))?;

    let n_traces = usize::try_from(n_traces)
        .map_err(|_| Error::invalid("n_traces does not fit in memory"))?;
    let mut traces = Vec::with_capacity(n_traces.min(1 << 20));
    for _ in 0..n_traces {
        let mut plaintext = [0u8; 16];
        read_exact_or(&mut r, &mut plaintext, "trace plaintext")?;
        let key = if keys {
            let mut k = [0u8; 16];
            read_exact_or(&mut r, &mut k, "trace key")?;
            Some(k)
        } else {
            None
        };
        let mut samples = Vec::with_capacity(n_samples as usize);
        for _ in 0..n_samples {
            samples.push(
                r.read_f32::<LittleEndian>()
                    .map_err(|_| Error::Truncated("trace samples"))?,
            );
        }
        traces.push(Trace {
            samples,
            plaintext,
            key,
        });
    }
    // The declared counts must account for the whole payload.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::invalid("trailing bytes after declared payload"));
    }

    let set = TraceSet {
        channel: ChannelMeta {
            frequency_hz,
            label,
        },
        n_samples,
        time_diversity,
        traces,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use tempfile::tempdir;

    fn random_set(seed: u64, n_traces: usize, n_samples: u32, keys: bool) -> TraceSet {
        let mut s = Stream::new(seed, &[0xBEEF]);
        let traces = (0..n_traces)
            .map(|_| {
                let mut plaintext = [0u8; 16];
                plaintext.iter_mut().for_each(|b| *b = s.next_byte());
                let key = keys.then(|| {
                    let mut k = [0u8; 16];
                    k.iter_mut().for_each(|b| *b = s.next_byte());
                    k
                });
                let samples = (0..n_samples)
                    .map(|_| f32::from_bits((s.next_u64() & 0x3F7F_FFFF) as u32))
                    .collect();
                Trace {
                    samples,
                    plaintext,
                    key,
                }
            })
            .collect();
        TraceSet {
            channel: ChannelMeta::new(2.464e9, format!("ch{seed}")),
            n_samples,
            time_diversity: 1,
            traces,
        }
    }

    #[test]
    fn empty_set_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.trc");
        let set = TraceSet {
            channel: ChannelMeta::new(2.45e9, "empty"),
            n_samples: 8,
            time_diversity: 1,
            traces: vec![],
        };
        write_trace_set(&set, &path).unwrap();
        let back = read_trace_set(&path).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("two.trc");
        let label = "pair";
        let set = TraceSet {
            channel: ChannelMeta::new(2.465e9, label),
            n_samples: 4,
            time_diversity: 1,
            traces: (0..2)
                .map(|i| Trace {
                    samples: vec![i as f32; 4],
                    plaintext: [i as u8; 16],
                    key: None,
                })
                .collect(),
        };
        write_trace_set(&set, &path).unwrap();
        // Expected size computed directly from the field widths of the
        // layout: fixed header fields + label + per-trace payload.
        let header = 4 + 2 + 2 + 8 + 4 + 4 + 8 + 2 + label.len() as u64;
        let per_trace = 16 + 4 * 4;
        let expected = header + 2 * per_trace;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expected);
    }

    #[test]
    fn keyed_set_round_trips_with_flag() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("keyed.trc");
        let set = random_set(7, 5, 16, true);
        write_trace_set(&set, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        assert_eq!(flags & FLAG_KEYS, FLAG_KEYS);

        let back = read_trace_set(&path).unwrap();
        assert_eq!(set, back);
        assert!(back.has_keys());
    }

    #[test]
    fn seeded_random_round_trip() {
        let dir = tempdir().unwrap();
        for seed in 0..4 {
            let path = dir.path().join(format!("s{seed}.trc"));
            let set = random_set(seed, 9, 12, seed % 2 == 0);
            write_trace_set(&set, &path).unwrap();
            assert_eq!(read_trace_set(&path).unwrap(), set);
        }
    }

    #[test]
    fn bad_magic_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.trc");
        std::fs::write(&path, b"NOPE and some more bytes").unwrap();
        match read_trace_set(&path) {
            Err(Error::BadMagic(found)) => assert_eq!(&found, b"NOPE"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v9.trc");
        let mut bytes = b"SCRM".to_vec();
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&0u16.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match read_trace_set(&path) {
            Err(Error::VersionMismatch(9)) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncation_mid_trace_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.trc");
        let set = random_set(3, 4, 8, false);
        write_trace_set(&set, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_trace_set(&path) {
            Err(Error::Truncated(_)) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn mixed_key_presence_rejected_before_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mixed.trc");
        let mut set = random_set(11, 3, 4, true);
        set.traces[1].key = None;
        match write_trace_set(&set, &path) {
            Err(Error::Invalid(_)) => assert!(!path.exists()),
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("extra.trc");
        let set = random_set(5, 2, 4, false);
        write_trace_set(&set, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0xAA);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_trace_set(&path), Err(Error::Invalid(_))));
    }
}

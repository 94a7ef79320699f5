//! Frame-labelled corpora, the `DLC1` container and synthetic tasks.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "DLC1" | version u32 | feature_dim u32 | n_classes u32 | n_utts u32
//! per utterance:
//!   id_len u32 | id bytes (UTF-8) | T u32 | T·feature_dim f64 (row-major) | T label u32
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const CORPUS_MAGIC: [u8; 4] = *b"DLC1";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × feature_dim`, one row per frame.
    pub features: Matrix,
    pub labels: Vec<u32>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames(&self) -> Vec<Vector> {
        self.frames_in(0, self.len())
    }

    pub fn frames_in(&self, start: usize, end: usize) -> Vec<Vector> {
        (start..end)
            .map(|t| Vector::from(self.features.row(t).to_vec()))
            .collect()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validate,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub split: Split,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>, feature_dim: usize, n_classes: usize) -> Result<Corpus> {
        let corpus = Corpus {
            utterances,
            feature_dim,
            n_classes,
            split: Split::Train,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Malformed("corpus has no utterances".into()));
        }
        if self.feature_dim == 0 || self.n_classes == 0 {
            return Err(Error::Malformed("feature_dim and n_classes must be positive".into()));
        }
        for u in &self.utterances {
            if u.features.cols() != self.feature_dim {
                return Err(Error::Malformed(format!(
                    "utterance {:?} has feature dim {}, corpus has {}",
                    u.id,
                    u.features.cols(),
                    self.feature_dim
                )));
            }
            if u.features.rows() != u.labels.len() {
                return Err(Error::Malformed(format!(
                    "utterance {:?} has {} frames but {} labels",
                    u.id,
                    u.features.rows(),
                    u.labels.len()
                )));
            }
            if u.is_empty() {
                return Err(Error::Malformed(format!("utterance {:?} is empty", u.id)));
            }
            if !u.features.is_finite() {
                return Err(Error::Malformed(format!("utterance {:?} has non-finite features", u.id)));
            }
            if let Some((frame, &label)) = u
                .labels
                .iter()
                .enumerate()
                .find(|(_, &l)| l as usize >= self.n_classes)
            {
                return Err(Error::LabelOutOfRange {
                    utterance: u.id.clone(),
                    frame,
                    label,
                    n_classes: self.n_classes,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.utterances.iter().map(Utterance::len).collect()
    }

    /// Round-robin partition by utterance into `k` disjoint shards.
    pub fn shard(&self, k: usize) -> Result<Vec<Corpus>> {
        if k == 0 || k > self.len() {
            return Err(Error::Config(format!(
                "cannot split {} utterances into {k} shards",
                self.len()
            )));
        }
        let mut shards: Vec<Vec<Utterance>> = vec![Vec::new(); k];
        for (i, u) in self.utterances.iter().enumerate() {
            shards[i % k].push(u.clone());
        }
        Ok(shards
            .into_iter()
            .map(|utterances| Corpus {
                utterances,
                feature_dim: self.feature_dim,
                n_classes: self.n_classes,
                split: self.split,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CORPUS_MAGIC);
        put_u32(&mut out, CORPUS_VERSION);
        put_u32(&mut out, self.feature_dim as u32);
        put_u32(&mut out, self.n_classes as u32);
        put_u32(&mut out, self.utterances.len() as u32);
        for u in &self.utterances {
            put_u32(&mut out, u.id.len() as u32);
            out.extend_from_slice(u.id.as_bytes());
            put_u32(&mut out, u.len() as u32);
            for v in u.features.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &l in &u.labels {
                put_u32(&mut out, l);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Corpus> {
        let mut r = ByteReader::new(bytes);
        r.magic(CORPUS_MAGIC)?;
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let feature_dim = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let n_utts = r.u32()? as usize;
        let mut utterances = Vec::with_capacity(n_utts.min(1 << 16));
        for _ in 0..n_utts {
            let id = r.string()?;
            let t = r.u32()? as usize;
            let values = r.f64s(t * feature_dim)?;
            let features = Matrix::from_vec(t, feature_dim, values)?;
            let mut labels = Vec::with_capacity(t);
            for _ in 0..t {
                labels.push(r.u32()?);
            }
            utterances.push(Utterance { id, features, labels });
        }
        if !r.is_done() {
            return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Corpus::new(utterances, feature_dim, n_classes)
    }
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, corpus.to_bytes())?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::from_bytes(&fs::read(path)?)
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Cursor over a byte slice that reports truncation with its offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("four bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::Malformed(format!("invalid UTF-8: {e}")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Delayed echo: one-hot symbols in, the symbol seen `delay` frames ago out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EchoTask {
    pub n_utts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub delay: usize,
}

impl EchoTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("echo vocabulary needs at least 2 symbols".into()));
        }
        if self.min_len <= self.delay || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "echo lengths {}..={} must exceed the delay {}",
                self.min_len, self.max_len, self.delay
            )));
        }
        if self.n_utts == 0 {
            return Err(Error::Config("need at least one utterance".into()));
        }
        Ok(())
    }
}

/// Labels are `symbol[t − delay]`, and `symbol[0]` for `t < delay`.
pub fn generate_delayed_echo<R: Rng + ?Sized>(task: &EchoTask, rng: &mut R) -> Result<Corpus> {
    task.validate()?;
    let utterances = (0..task.n_utts)
        .map(|n| {
            let t_len = rng.gen_range(task.min_len..=task.max_len);
            let symbols: Vec<u32> = (0..t_len).map(|_| rng.gen_range(0..task.vocab as u32)).collect();
            let mut features = Matrix::zeros(t_len, task.vocab);
            for (t, &s) in symbols.iter().enumerate() {
                features[(t, s as usize)] = 1.0;
            }
            let labels = (0..t_len)
                .map(|t| symbols[t.saturating_sub(task.delay)])
                .collect();
            Utterance {
                id: format!("echo-{n:05}"),
                features,
                labels,
            }
        })
        .collect();
    Corpus::new(utterances, task.vocab, task.vocab)
}

/// Context sum: scalar symbol stream in, `(sum of the last `window` symbols) mod n_classes` out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSumTask {
    pub n_utts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_symbols: usize,
    pub window: usize,
    pub n_classes: usize,
}

impl ContextSumTask {
    pub fn validate(&self) -> Result<()> {
        if self.n_symbols < 2 || self.n_classes < 2 || self.window == 0 {
            return Err(Error::Config(
                "context sum needs >= 2 symbols, >= 2 classes and a positive window".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.n_utts == 0 {
            return Err(Error::Config("invalid utterance count or length range".into()));
        }
        Ok(())
    }

    /// Feature value of a symbol, spread evenly over `[-1, 1]`.
    pub fn encode(&self, symbol: u32) -> f64 {
        2.0 * symbol as f64 / (self.n_symbols - 1) as f64 - 1.0
    }
}

/// For `t < window − 1` the sum runs over the frames seen so far.
pub fn generate_context_sum<R: Rng + ?Sized>(task: &ContextSumTask, rng: &mut R) -> Result<Corpus> {
    task.validate()?;
    let utterances = (0..task.n_utts)
        .map(|n| {
            let t_len = rng.gen_range(task.min_len..=task.max_len);
            let symbols: Vec<u32> = (0..t_len).map(|_| rng.gen_range(0..task.n_symbols as u32)).collect();
            let values = symbols.iter().map(|&s| task.encode(s)).collect();
            let features = Matrix::from_vec(t_len, 1, values).expect("one column per frame");
            let mut sum = 0u32;
            let labels = (0..t_len)
                .map(|t| {
                    sum += symbols[t];
                    if t >= task.window {
                        sum -= symbols[t - task.window];
                    }
                    sum % task.n_classes as u32
                })
                .collect();
            Utterance {
                id: format!("ctxsum-{n:05}"),
                features,
                labels,
            }
        })
        .collect();
    Corpus::new(utterances, 1, task.n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn echo(n_utts: usize, delay: usize) -> EchoTask {
        EchoTask {
            n_utts,
            min_len: 40,
            max_len: 60,
            vocab: 8,
            delay,
        }
    }

    fn symbol_at(u: &Utterance, t: usize) -> u32 {
        u.features.row(t).iter().position(|&v| v == 1.0).unwrap() as u32
    }

    #[test]
    fn echo_labels_follow_definition() {
        let c = generate_delayed_echo(&echo(20, 5), &mut rng(1)).unwrap();
        for u in &c.utterances {
            assert!((40..=60).contains(&u.len()));
            for t in 0..u.len() {
                let src = if t >= 5 { t - 5 } else { 0 };
                assert_eq!(u.labels[t], symbol_at(u, src));
            }
        }
    }

    #[test]
    fn zero_delay_is_identity() {
        let c = generate_delayed_echo(&echo(5, 0), &mut rng(2)).unwrap();
        for u in &c.utterances {
            for t in 0..u.len() {
                assert_eq!(u.labels[t], symbol_at(u, t));
            }
        }
    }

    #[test]
    fn echo_histogram_is_uniform() {
        let c = generate_delayed_echo(&echo(200, 5), &mut rng(3)).unwrap();
        let mut counts = [0usize; 8];
        let mut total = 0;
        for u in &c.utterances {
            for &l in &u.labels[5..] {
                counts[l as usize] += 1;
                total += 1;
            }
        }
        for &n in &counts {
            let share = n as f64 / total as f64;
            assert!((share - 0.125).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn echo_rejects_short_utterances() {
        let bad = EchoTask {
            min_len: 5,
            ..echo(3, 5)
        };
        assert!(generate_delayed_echo(&bad, &mut rng(0)).is_err());
        let tiny_vocab = EchoTask { vocab: 1, ..echo(3, 1) };
        assert!(generate_delayed_echo(&tiny_vocab, &mut rng(0)).is_err());
    }

    fn ctx(window: usize, n_classes: usize, n_symbols: usize) -> ContextSumTask {
        ContextSumTask {
            n_utts: 30,
            min_len: 20,
            max_len: 40,
            n_symbols,
            window,
            n_classes,
        }
    }

    fn decode(task: &ContextSumTask, v: f64) -> u32 {
        ((v + 1.0) / 2.0 * (task.n_symbols - 1) as f64).round() as u32
    }

    #[test]
    fn context_sum_window_one_is_framewise() {
        let task = ctx(1, 3, 3);
        let c = generate_context_sum(&task, &mut rng(4)).unwrap();
        for u in &c.utterances {
            for t in 0..u.len() {
                assert_eq!(u.labels[t], decode(&task, u.features[(t, 0)]) % 3);
            }
        }
    }

    #[test]
    fn context_sum_parity_by_recomputation() {
        let task = ctx(2, 2, 2);
        let c = generate_context_sum(&task, &mut rng(5)).unwrap();
        for u in &c.utterances {
            let s: Vec<u32> = (0..u.len()).map(|t| decode(&task, u.features[(t, 0)])).collect();
            assert_eq!(u.labels[0], s[0] % 2);
            for t in 1..u.len() {
                assert_eq!(u.labels[t], (s[t] + s[t - 1]) % 2);
            }
        }
    }

    #[test]
    fn context_sum_histogram() {
        let task = ContextSumTask {
            n_utts: 100,
            ..ctx(4, 4, 4)
        };
        let c = generate_context_sum(&task, &mut rng(6)).unwrap();
        let mut counts = [0usize; 4];
        for u in &c.utterances {
            for &l in &u.labels[3..] {
                counts[l as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for &n in &counts {
            assert!((n as f64 / total as f64 - 0.25).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = generate_delayed_echo(&echo(10, 3), &mut rng(7)).unwrap();
        let b = generate_delayed_echo(&echo(10, 3), &mut rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip() {
        let c = generate_context_sum(&ctx(3, 4, 5), &mut rng(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dlc");
        save_corpus(&c, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let c = generate_delayed_echo(&echo(3, 2), &mut rng(9)).unwrap();
        let bytes = c.to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Corpus::from_bytes(&bad_magic), Err(Error::BadMagic { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(Corpus::from_bytes(&bad_version), Err(Error::UnsupportedVersion(9))));

        assert!(matches!(
            Corpus::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));

        // Last label of the last utterance.
        let mut bad_label = bytes.clone();
        let n = bad_label.len();
        bad_label[n - 4..].copy_from_slice(&8u32.to_le_bytes());
        let last = c.utterances.last().unwrap();
        match Corpus::from_bytes(&bad_label) {
            Err(Error::LabelOutOfRange { utterance, frame, .. }) => {
                assert_eq!(utterance, last.id);
                assert_eq!(frame, last.len() - 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shards_partition_utterances() {
        let c = generate_delayed_echo(&echo(10, 2), &mut rng(10)).unwrap();
        let shards = c.shard(4).unwrap();
        assert_eq!(shards.iter().map(Corpus::len).sum::<usize>(), 10);
        assert_eq!(shards[1].utterances[0], c.utterances[1]);
        assert!(c.shard(11).is_err());
    }
}

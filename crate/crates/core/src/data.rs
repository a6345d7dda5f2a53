//! Datasets: jsonl loading, whitespace tokenization, vocabularies and
//! seeded synthetic classification tasks.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExample {
    text: Option<String>,
    text_a: Option<String>,
    text_b: Option<String>,
    label: usize,
}

/// Token-to-id table built from the training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then training tokens in order of first use.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t);
        }
        for text in texts {
            for tok in text.split_whitespace() {
                if !v.index.contains_key(tok) {
                    v.push(tok);
                }
            }
        }
        v
    }

    fn push(&mut self, tok: &str) {
        self.index.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS] a… ([SEP] b…)`
    pub fn encode(&self, example: &Example) -> Vec<usize> {
        let mut ids = vec![CLS_ID];
        ids.extend(example.text.split_whitespace().map(|t| self.id(t)));
        if let Some(b) = &example.text_b {
            ids.push(SEP_ID);
            ids.extend(b.split_whitespace().map(|t| self.id(t)));
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub vocab: Vocab,
}

impl DatasetHandle {
    pub fn new(train: Vec<Example>, validation: Vec<Example>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::contract("empty train split"));
        }
        if validation.is_empty() {
            return Err(Error::contract("empty validation split"));
        }
        let vocab = Vocab::build(
            train
                .iter()
                .flat_map(|e| std::iter::once(e.text.as_str()).chain(e.text_b.as_deref())),
        );
        Ok(DatasetHandle {
            train,
            validation,
            vocab,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train
            .iter()
            .chain(&self.validation)
            .map(|e| e.label + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn encode_split(&self, examples: &[Example]) -> Vec<Vec<usize>> {
        examples.iter().map(|e| self.vocab.encode(e)).collect()
    }

    /// FNV-1a over every text and label of both splits.
    pub fn corpus_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (tag, split) in [(b"T", &self.train), (b"V", &self.validation)] {
            eat(tag);
            for e in split {
                eat(e.text.as_bytes());
                eat(&[0]);
                if let Some(b) = &e.text_b {
                    eat(b.as_bytes());
                }
                eat(&(e.label as u64).to_le_bytes());
            }
        }
        h
    }
}

/// Reads one example per non-blank line: `text` (or `text_a` + `text_b`)
/// and an integer `label`.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: lineno,
            message: e.to_string(),
        })?;
        let (text, text_b) = match (raw.text, raw.text_a, raw.text_b) {
            (Some(t), None, None) => (t, None),
            (None, Some(a), Some(b)) => (a, Some(b)),
            _ => {
                return Err(Error::Dataset {
                    line: lineno,
                    message: "expected `text` or both `text_a` and `text_b`".into(),
                })
            }
        };
        out.push(Example {
            text,
            text_b,
            label: raw.label,
        });
    }
    if out.is_empty() {
        return Err(Error::contract(format!("{} holds no examples", path.display())));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Loads the two splits and builds the vocabulary from the training one.
pub fn load_dataset(train: &Path, validation: &Path) -> Result<DatasetHandle> {
    DatasetHandle::new(load_jsonl(train)?, load_jsonl(validation)?)
}

/// Padded batches in order, or shuffled by `shuffle_seed`.
pub fn make_batches(
    encoded: &[Vec<usize>],
    labels: &[usize],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if encoded.len() != labels.len() {
        return Err(Error::dim("make_batches", format!("{} inputs, {} labels", encoded.len(), labels.len())));
    }
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| encoded[i].clone()).collect();
            let ls: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            Batch::from_sequences(&seqs, &ls, PAD_ID)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Label 1 iff a planted keyword occurs.
    KeywordSentiment,
    /// Label is the parity of the marker-symbol count.
    Parity,
}

const FILLER_WORDS: usize = 40;
const KEYWORDS: [&str; 4] = ["good", "great", "superb", "lovely"];
const MARKER: &str = "x";
const MIN_LEN: usize = 6;
const MAX_LEN: usize = 14;

fn synth_example(kind: SyntheticKind, label: usize, rng: &mut ChaCha8Rng) -> Example {
    let len = rng.random_range(MIN_LEN..=MAX_LEN);
    let mut words: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..FILLER_WORDS))).collect();
    match kind {
        SyntheticKind::KeywordSentiment => {
            if label == 1 {
                let planted = rng.random_range(1..=2);
                for _ in 0..planted {
                    let pos = rng.random_range(0..words.len());
                    words[pos] = KEYWORDS[rng.random_range(0..KEYWORDS.len())].to_string();
                }
            }
        }
        SyntheticKind::Parity => {
            let mut count = rng.random_range(0..=4usize);
            if count % 2 != label {
                count += 1;
            }
            let mut positions: Vec<usize> = (0..words.len()).collect();
            positions.shuffle(rng);
            for &p in positions.iter().take(count) {
                words[p] = MARKER.to_string();
            }
        }
    }
    Example {
        text: words.join(" "),
        text_b: None,
        label,
    }
}

fn balanced_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(rng);
    labels
}

/// Seeded binary task with balanced labels and text-disjoint splits.
pub fn make_synthetic_task(kind: SyntheticKind, train_size: usize, validation_size: usize, seed: u64) -> Result<DatasetHandle> {
    if train_size == 0 || validation_size == 0 {
        return Err(Error::config("synthetic splits must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut split = |n: usize, rng: &mut ChaCha8Rng| {
        balanced_labels(n, rng)
            .into_iter()
            .map(|label| loop {
                let e = synth_example(kind, label, rng);
                if seen.insert(e.text.clone()) {
                    break e;
                }
            })
            .collect::<Vec<_>>()
    };
    let train = split(train_size, &mut rng);
    let validation = split(validation_size, &mut rng);
    DatasetHandle::new(train, validation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(text: &str, label: usize) -> Example {
        Example {
            text: text.into(),
            text_b: None,
            label,
        }
    }

    #[test]
    fn vocab_maps_unknown_to_unk() {
        let d = DatasetHandle::new(vec![ex("a b", 0)], vec![ex("b zzz", 1)]).unwrap();
        assert_eq!(d.vocab.encode(&d.validation[0]), vec![CLS_ID, 5, UNK_ID]);
        assert_eq!(d.vocab.len(), 6);
    }

    #[test]
    fn pairs_join_with_separator() {
        let d = DatasetHandle::new(vec![ex("a", 0)], vec![ex("a", 0)]).unwrap();
        let pair = Example {
            text: "a".into(),
            text_b: Some("a".into()),
            label: 0,
        };
        assert_eq!(d.vocab.encode(&pair), vec![CLS_ID, 4, SEP_ID, 4]);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"text\":\"a b\",\"label\":0}\n{\"text_a\":\"c\",\"text_b\":\"d\",\"label\":1}\n").unwrap();
        let ex = load_jsonl(&p).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].text_b.as_deref(), Some("d"));
        std::fs::write(&p, "{\"text\":\"a\",\"label\":0}\n{oops\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(Error::Dataset { line: 2, .. })));
        std::fs::write(&p, "\n").unwrap();
        assert!(load_jsonl(&p).is_err());
    }

    #[test]
    fn synthetic_is_balanced_disjoint_and_seeded() {
        for kind in [SyntheticKind::KeywordSentiment, SyntheticKind::Parity] {
            let d = make_synthetic_task(kind, 101, 40, 3).unwrap();
            let ones = d.train.iter().filter(|e| e.label == 1).count();
            assert!((ones as i64 - 50).abs() <= 1);
            let train: HashSet<&str> = d.train.iter().map(|e| e.text.as_str()).collect();
            assert!(d.validation.iter().all(|e| !train.contains(e.text.as_str())));
            assert_eq!(d.corpus_hash(), make_synthetic_task(kind, 101, 40, 3).unwrap().corpus_hash());
        }
    }

    #[test]
    fn synthetic_labels_follow_their_rule() {
        let d = make_synthetic_task(SyntheticKind::KeywordSentiment, 200, 50, 1).unwrap();
        for e in d.train.iter().chain(&d.validation) {
            let has = e.text.split_whitespace().any(|w| KEYWORDS.contains(&w));
            assert_eq!(usize::from(has), e.label);
        }
        let d = make_synthetic_task(SyntheticKind::Parity, 200, 50, 1).unwrap();
        for e in &d.train {
            assert_eq!(e.text.split_whitespace().filter(|w| *w == MARKER).count() % 2, e.label);
        }
    }

    #[test]
    fn parity_with_no_markers_is_zero() {
        let d = make_synthetic_task(SyntheticKind::Parity, 400, 10, 5).unwrap();
        let zero = d.train.iter().find(|e| !e.text.contains(MARKER)).expect("some example without markers");
        assert_eq!(zero.label, 0);
    }

    #[test]
    fn batches_cover_everything_once() {
        let enc: Vec<Vec<usize>> = (0..7).map(|i| vec![CLS_ID, 4 + i]).collect();
        let labels: Vec<usize> = (0..7).map(|i| i % 2).collect();
        let b = make_batches(&enc, &labels, 3, Some(1)).unwrap();
        assert_eq!(b.iter().map(|b| b.batch_size).collect::<Vec<_>>(), vec![3, 3, 1]);
        let mut seen: Vec<usize> = b.iter().flat_map(|b| b.token_ids.chunks(2).map(|c| c[1])).collect();
        seen.sort_unstable();
        assert_eq!(seen, (4..11).collect::<Vec<_>>());
    }
}

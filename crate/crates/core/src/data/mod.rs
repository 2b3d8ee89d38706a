//! Byte-level tokenization, synthetic corpora, calibration windows, cloze
//! items and the deterministic batch stream.

pub mod grammar;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grammar::{topic_of, Language, Style};

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
/// 256 byte values plus BOS and EOS.
pub const VOCAB: usize = 258;

/// `[BOS, bytes...]`.
pub fn tokenize_bytes(text: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    out.extend(text.iter().map(|&b| b as u32));
    out
}

/// Drops specials and maps the remaining ids back to bytes.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// A token stream with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub provenance: String,
    pub style: Style,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Self> {
        let tokens = tokenize_bytes(bytes);
        if tokens.len() < 2 {
            return Err(Error::Empty("corpus has no payload bytes".into()));
        }
        Ok(Corpus { tokens, provenance: provenance.into(), style: Style::File })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Unigram distribution over the full vocabulary.
    pub fn unigram(&self) -> Vec<f64> {
        let mut counts = vec![0.0; VOCAB];
        for &t in &self.tokens {
            counts[t as usize] += 1.0;
        }
        let n = self.tokens.len() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    }
}

fn style_salt(style: Style) -> u64 {
    match style {
        Style::A => 0xA5A5_0001,
        Style::B => 0xB6B6_0002,
        Style::File => 0xF1F1_0003,
    }
}

/// Exactly `n_tokens` ids of `[BOS doc EOS]*` text drawn from the style's language.
pub fn synth_corpus(style: Style, n_tokens: usize, seed: u64) -> Result<Corpus> {
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("n_tokens must be >= 1".into()));
    }
    if style == Style::File {
        return Err(Error::InvalidArgument("file corpora are loaded, not generated".into()));
    }
    let lang = Language::of(style);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ style_salt(style));
    let mut tokens = Vec::with_capacity(n_tokens + 64);
    while tokens.len() < n_tokens {
        tokens.extend(tokenize_bytes(&lang.document(&mut rng)));
        tokens.push(EOS);
    }
    tokens.truncate(n_tokens);
    Ok(Corpus { tokens, provenance: format!("synth:style={style},n={n_tokens},seed={seed}"), style })
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `n_samples` distinct, non-overlapping windows of `seq_len` tokens.
pub fn sample_calibration(corpus: &Corpus, n_samples: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if n_samples == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument("calibration needs n_samples >= 1 and seq_len >= 1".into()));
    }
    let available = corpus.len() / seq_len;
    if available < n_samples {
        return Err(Error::CorpusTooShort(format!(
            "{} tokens hold {available} windows of {seq_len}, {n_samples} requested",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, available, n_samples);
    Ok(picks.iter().map(|w| corpus.tokens[w * seq_len..(w + 1) * seq_len].to_vec()).collect())
}

/// One training batch. `targets[b][t] = inputs[b][t + 1]` in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Corpus offset of each row's first input token.
    pub offsets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    fn from_windows(corpus: &[u32], starts: &[usize], seq: usize) -> Self {
        let mut inputs = Vec::with_capacity(starts.len() * seq);
        let mut targets = Vec::with_capacity(starts.len() * seq);
        for &s in starts {
            inputs.extend_from_slice(&corpus[s..s + seq]);
            targets.extend_from_slice(&corpus[s + 1..s + seq + 1]);
        }
        TokenBatch { inputs, targets, offsets: starts.to_vec(), batch: starts.len(), seq }
    }
}

/// Deterministic, endlessly repeating stream of shuffled batches.
#[derive(Debug, Clone)]
pub struct BatchStream {
    tokens: std::sync::Arc<Vec<u32>>,
    seq: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn windows(corpus_len: usize, seq: usize) -> usize {
        if corpus_len == 0 {
            0
        } else {
            (corpus_len - 1) / seq
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }

    fn shuffled(&self) -> Vec<usize> {
        let n = Self::windows(self.tokens.len(), self.seq);
        let mut order: Vec<usize> = (0..n).map(|w| w * self.seq).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch));
        order.shuffle(&mut rng);
        order
    }
}

impl Iterator for BatchStream {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.order = self.shuffled();
            self.cursor = 0;
        }
        let starts = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        Some(TokenBatch::from_windows(&self.tokens, starts, self.seq))
    }
}

/// Stream of `batch_size x seq_len` batches over non-overlapping windows,
/// reshuffled every epoch. Incomplete trailing batches are dropped.
pub fn build_batches(corpus: &Corpus, seq_len: usize, batch_size: usize, seed: u64) -> Result<BatchStream> {
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("seq_len and batch_size must be >= 1".into()));
    }
    let windows = BatchStream::windows(corpus.len(), seq_len);
    if windows < batch_size {
        return Err(Error::CorpusTooShort(format!(
            "{} tokens give {windows} windows of {seq_len}, batch needs {batch_size}",
            corpus.len()
        )));
    }
    let mut s = BatchStream {
        tokens: std::sync::Arc::new(corpus.tokens.clone()),
        seq: seq_len,
        batch: batch_size,
        seed,
        epoch: 0,
        order: Vec::new(),
        cursor: 0,
    };
    s.order = s.shuffled();
    Ok(s)
}

/// The first `n_batches` batches in corpus order, for evaluation.
pub fn eval_batches(corpus: &Corpus, seq_len: usize, batch_size: usize, n_batches: usize) -> Result<Vec<TokenBatch>> {
    let windows = BatchStream::windows(corpus.len(), seq_len);
    if windows == 0 || seq_len == 0 || batch_size == 0 {
        return Err(Error::CorpusTooShort(format!("{} tokens hold no window of {seq_len}", corpus.len())));
    }
    let starts: Vec<usize> = (0..windows).map(|w| w * seq_len).take(n_batches * batch_size).collect();
    Ok(starts.chunks(batch_size).map(|c| TokenBatch::from_windows(&corpus.tokens, c, seq_len)).collect())
}

/// Two-choice completion item scored by likelihood.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClozeItem {
    pub prefix: String,
    pub cand0: String,
    pub cand1: String,
    pub label: u8,
}

impl ClozeItem {
    pub fn prefix_tokens(&self) -> Vec<u32> {
        tokenize_bytes(self.prefix.as_bytes())
    }

    pub fn candidate_tokens(&self, idx: usize) -> Vec<u32> {
        let c = if idx == 0 { &self.cand0 } else { &self.cand1 };
        c.bytes().map(|b| b as u32).collect()
    }
}

/// Items built from a style's grammar: the prefix is a sentence fragment, the
/// correct candidate is a grammatical next word and the distractor is a same-topic word
/// that never follows the last prefix word. Candidate lengths always differ
/// and the correct one is the shorter in exactly half the items, so a
/// length-only scorer sits at chance.
pub fn synth_cloze_set(style: Style, n_items: usize, seed: u64) -> Result<Vec<ClozeItem>> {
    if n_items == 0 {
        return Err(Error::InvalidArgument("n_items must be >= 1".into()));
    }
    let lang = Language::of(style);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ style_salt(style) ^ 0x000C_102E);
    let mut labels: Vec<u8> = (0..n_items).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let mut shorter: Vec<bool> = (0..n_items).map(|i| i % 2 == 0).collect();
    shorter.shuffle(&mut rng);

    let mut items = Vec::with_capacity(n_items);
    let mut i = 0;
    while items.len() < n_items {
        let n_words = rng.random_range(3..=7);
        let topic = lang.topic(&mut rng);
        let mut ids = vec![lang.start_word(&mut rng, topic)];
        for _ in 1..n_words {
            let prev = *ids.last().unwrap();
            ids.push(lang.next_word(&mut rng, prev));
        }
        let last = *ids.last().unwrap();
        let right = lang.next_word(&mut rng, last);
        let right_len = lang.words[right].len();
        let wrong_pool: Vec<usize> = (0..lang.words.len())
            .filter(|&w| w != last && topic_of(w) == topic_of(last) && !lang.successors[last].contains(&w))
            .filter(|&w| {
                let l = lang.words[w].len();
                if shorter[i] {
                    l > right_len
                } else {
                    l < right_len
                }
            })
            .collect();
        if wrong_pool.is_empty() {
            continue;
        }
        let wrong = wrong_pool[rng.random_range(0..wrong_pool.len())];
        let mut prefix = Vec::new();
        for &id in &ids {
            prefix.extend_from_slice(&lang.words[id]);
            prefix.push(b' ');
        }
        let as_string = |b: &[u8]| String::from_utf8(b.to_vec()).expect("grammar is ascii");
        let right_s = format!("{} ", as_string(&lang.words[right]));
        let wrong_s = format!("{} ", as_string(&lang.words[wrong]));
        let label = labels[i];
        let (cand0, cand1) = if label == 0 { (right_s, wrong_s) } else { (wrong_s, right_s) };
        items.push(ClozeItem { prefix: as_string(&prefix), cand0, cand1, label });
        i += 1;
    }
    Ok(items)
}

pub fn write_cloze_jsonl(items: &[ClozeItem], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_cloze_jsonl(path: &Path) -> Result<Vec<ClozeItem>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ClozeItem = serde_json::from_str(&line)?;
        if item.label > 1 || item.cand0 == item.cand1 {
            return Err(Error::Config(format!("invalid cloze item: {line}")));
        }
        out.push(item);
    }
    Ok(out)
}

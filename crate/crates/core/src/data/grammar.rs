//! Word-level Markov languages used as synthetic corpora.
//!
//! Each style owns a fixed inventory of words spelled from a biased letter
//! range and a sparse word-transition table. The language itself is a pure
//! function of the style; sampling seeds only pick which text is drawn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which synthetic language (or an external file) a corpus comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    A,
    B,
    File,
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Style::A => "a",
            Style::B => "b",
            Style::File => "file",
        })
    }
}

impl std::str::FromStr for Style {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Style::A),
            "b" => Ok(Style::B),
            other => Err(format!("unknown style {other:?} (expected a or b)")),
        }
    }
}

const WORDS_PER_SIDE: usize = 32;
const SUCCESSORS: usize = 4;
const SUCCESSOR_WEIGHTS: [f64; SUCCESSORS] = [0.45, 0.35, 0.12, 0.08];
const HOME_LETTER_BIAS: f64 = 0.95;
const START_WORDS: usize = 8;

/// A sparse word-bigram language over two topics. Word ids `0..32` form the
/// topic spelled mostly with a-m, ids `32..64` the one spelled mostly with
/// n-z. A document stays inside one topic.
#[derive(Debug, Clone)]
pub struct Language {
    pub words: Vec<Vec<u8>>,
    /// `successors[w]` lists the word ids that may follow `w`, most likely first.
    pub successors: Vec<[usize; SUCCESSORS]>,
    /// Sentence-initial words per topic.
    pub starts: [Vec<usize>; 2],
    /// Probability that a document uses topic 0.
    pub low_share: f64,
}

fn letters(home_low: bool) -> (Vec<u8>, Vec<u8>) {
    let low: Vec<u8> = (b'a'..=b'm').collect();
    let high: Vec<u8> = (b'n'..=b'z').collect();
    if home_low {
        (low, high)
    } else {
        (high, low)
    }
}

fn spell(rng: &mut ChaCha8Rng, home: &[u8], away: &[u8]) -> Vec<u8> {
    let len = rng.random_range(2..=5);
    (0..len)
        .map(|_| {
            if rng.random_bool(HOME_LETTER_BIAS) {
                home[rng.random_range(0..home.len())]
            } else {
                away[rng.random_range(0..away.len())]
            }
        })
        .collect()
}

fn inventory(rng: &mut ChaCha8Rng, home_low: bool, n: usize, taken: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let (home, away) = letters(home_low);
    let mut out: Vec<Vec<u8>> = Vec::with_capacity(n);
    while out.len() < n {
        let w = spell(rng, &home, &away);
        // Distinct two-letter prefixes keep words identifiable early.
        let clash = |o: &Vec<u8>| o == &w || (o.len() >= 2 && w.len() >= 2 && o[..2] == w[..2]);
        if !out.iter().any(clash) && !taken.iter().any(clash) {
            out.push(w);
        }
    }
    out
}

pub fn topic_of(word: usize) -> usize {
    usize::from(word >= WORDS_PER_SIDE)
}

impl Language {
    /// The fixed language of a synthetic style. Both styles share words,
    /// transitions and start words; they differ only in how often each
    /// topic appears.
    pub fn of(style: Style) -> Language {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000);
        let mut words = inventory(&mut rng, true, WORDS_PER_SIDE, &[]);
        let high = inventory(&mut rng, false, WORDS_PER_SIDE, &words);
        words.extend(high);
        let n = words.len();
        let successors = (0..n)
            .map(|w| {
                let mut pool: Vec<usize> = (0..n).filter(|&x| x != w && topic_of(x) == topic_of(w)).collect();
                pool.shuffle(&mut rng);
                [pool[0], pool[1], pool[2], pool[3]]
            })
            .collect();
        let mut starts = [(0..WORDS_PER_SIDE).collect::<Vec<_>>(), (WORDS_PER_SIDE..n).collect::<Vec<_>>()];
        for s in starts.iter_mut() {
            s.shuffle(&mut rng);
            s.truncate(START_WORDS);
        }
        let low_share = match style {
            Style::B => 0.05,
            _ => 0.7,
        };
        Language { words, successors, starts, low_share }
    }

    pub fn topic(&self, rng: &mut ChaCha8Rng) -> usize {
        usize::from(!rng.random_bool(self.low_share))
    }

    pub fn next_word(&self, rng: &mut ChaCha8Rng, prev: usize) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in SUCCESSOR_WEIGHTS.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.successors[prev][i];
            }
        }
        self.successors[prev][SUCCESSORS - 1]
    }

    pub fn start_word(&self, rng: &mut ChaCha8Rng, topic: usize) -> usize {
        self.starts[topic][rng.random_range(0..self.starts[topic].len())]
    }

    /// One sentence: 4-10 words, space separated, terminated by ". ".
    /// Returns the bytes and the word ids.
    pub fn sentence(&self, rng: &mut ChaCha8Rng, topic: usize) -> (Vec<u8>, Vec<usize>) {
        let len = rng.random_range(4..=10);
        let mut ids = Vec::with_capacity(len);
        let mut w = self.start_word(rng, topic);
        ids.push(w);
        for _ in 1..len {
            w = self.next_word(rng, w);
            ids.push(w);
        }
        let mut out = Vec::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(b' ');
            }
            out.extend_from_slice(&self.words[id]);
        }
        out.extend_from_slice(b". ");
        (out, ids)
    }

    /// A document of 2-5 sentences on one topic.
    pub fn document(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let topic = self.topic(rng);
        let n = rng.random_range(2..=5);
        let mut out = Vec::new();
        for _ in 0..n {
            out.extend(self.sentence(rng, topic).0);
        }
        out.pop();
        out
    }
}

//! Train/validation token streams, corpus frequencies and a synthetic
//! story generator for offline use.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenizer;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Token counts over train and validation together.
    pub freqs: Vec<u64>,
}

impl Corpus {
    /// Splits `text` so the final `val_fraction` of bytes (cut at a byte
    /// boundary) is held out.
    pub fn from_bytes(text: &[u8], val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        let tokens = tokenizer::encode(text);
        if tokens.len() < 4 {
            return Err(Error::input("corpus needs at least 4 bytes"));
        }
        let n_val = ((tokens.len() as f64 * val_fraction).round() as usize).max(2);
        let split = tokens.len() - n_val;
        let freqs = token_frequencies(&tokens, tokenizer::BYTE_VOCAB);
        let val = tokens[split..].to_vec();
        let mut train = tokens;
        train.truncate(split);
        Ok(Self { train, val, freqs })
    }

    pub fn from_file(path: &Path, val_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, val_fraction)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn token_frequencies(tokens: &[usize], vocab: usize) -> Vec<u64> {
    let mut f = vec![0u64; vocab];
    for &t in tokens {
        if t < vocab {
            f[t] += 1;
        }
    }
    f
}

struct Topic {
    subjects: &'static [&'static str],
    verbs: &'static [&'static str],
    objects: &'static [&'static str],
    tails: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    // work
    Topic {
        subjects: &["the worker", "her boss", "the clerk", "the manager", "a busy employee", "the staff"],
        verbs: &["worked on", "finished", "filed", "scheduled", "reviewed", "delivered"],
        objects: &["the report", "a long shift", "the project", "every task", "the payroll", "the meeting notes"],
        tails: &["at the office", "before the deadline", "for a small salary", "during overtime", "at work all day"],
    },
    // numbers
    Topic {
        subjects: &["the child", "a merchant", "the teacher", "my uncle", "the counter", "a farmer"],
        verbs: &["counted", "added", "sold", "measured", "wrote down", "divided"],
        objects: &["{n} apples", "{n} coins", "{n} and {n}", "{n} sheep", "exactly {n} stones", "{n} pages"],
        tails: &["to get {n}", "in {n} minutes", "for {n} cents", "times {n}", "by {n} percent"],
    },
    // animals
    Topic {
        subjects: &["the fox", "a small rabbit", "the old dog", "a hungry wolf", "the cat", "a brown bear"],
        verbs: &["chased", "sniffed", "hid from", "growled at", "followed", "licked"],
        objects: &["the squirrel", "a bird", "its puppies", "the kitten", "a fish", "the herd of deer"],
        tails: &["in the forest", "near the den", "under the tree", "by the river", "across the meadow"],
    },
    // food
    Topic {
        subjects: &["the cook", "grandma", "the baker", "a hungry boy", "the chef", "mother"],
        verbs: &["baked", "tasted", "boiled", "sliced", "ate", "stirred"],
        objects: &["the bread", "a sweet pie", "hot soup", "fresh cheese", "the butter cake", "some rice"],
        tails: &["in the kitchen", "for dinner", "with sugar and salt", "on the stove", "at breakfast"],
    },
    // weather
    Topic {
        subjects: &["the wind", "a cold storm", "the rain", "thick fog", "the snow", "a warm breeze"],
        verbs: &["covered", "soaked", "swept over", "froze", "blew across", "darkened"],
        objects: &["the hills", "the village roofs", "the grey sky", "the frozen lake", "the valley", "the cloudy coast"],
        tails: &["all winter", "during the thunder", "until the sun came out", "as the clouds gathered", "that rainy night"],
    },
    // music
    Topic {
        subjects: &["the singer", "a young drummer", "the band", "the violinist", "a choir", "the piano teacher"],
        verbs: &["played", "sang", "practiced", "hummed", "composed", "performed"],
        objects: &["a soft melody", "the old song", "loud music", "a happy tune", "the chorus", "every note"],
        tails: &["on stage", "with a guitar", "at the concert", "in perfect rhythm", "for the dancers"],
    },
];

const NAMES: &[&str] = &["Anna", "Tom", "Lily", "Max", "Rosa", "Ben", "Mia", "Sam"];

fn fill_numbers(s: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::with_capacity(s.len() + 8);
    let mut rest = s;
    while let Some(i) = rest.find("{n}") {
        out.push_str(&rest[..i]);
        let n: u32 = if rng.random_bool(0.3) {
            rng.random_range(100..2000)
        } else {
            rng.random_range(2..100)
        };
        out.push_str(&n.to_string());
        rest = &rest[i + 3..];
    }
    out.push_str(rest);
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(topic: &Topic, rng: &mut ChaCha8Rng) -> String {
    let subj = if rng.random_bool(0.2) {
        NAMES.choose(rng).unwrap().to_string()
    } else {
        topic.subjects.choose(rng).unwrap().to_string()
    };
    let raw = format!(
        "{} {} {} {}.",
        subj,
        topic.verbs.choose(rng).unwrap(),
        topic.objects.choose(rng).unwrap(),
        topic.tails.choose(rng).unwrap()
    );
    capitalize(&fill_numbers(&raw, rng))
}

/// Deterministic topic-structured stories of roughly `n_bytes` bytes. Each
/// story opens with "Once upon a time," and stays on one topic, with
/// occasional sentences borrowed from another.
pub fn synthetic_stories(n_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 256);
    while out.len() < n_bytes {
        let main = rng.random_range(0..TOPICS.len());
        out.push_str("Once upon a time, ");
        let first = sentence(&TOPICS[main], &mut rng);
        let mut first = first.chars();
        if let Some(c) = first.next() {
            out.extend(c.to_lowercase());
            out.push_str(first.as_str());
        }
        let n = rng.random_range(3..8);
        for _ in 0..n {
            let t = if rng.random_bool(0.1) {
                rng.random_range(0..TOPICS.len())
            } else {
                main
            };
            out.push(' ');
            out.push_str(&sentence(&TOPICS[t], &mut rng));
        }
        out.push_str(" The end.\n\n");
    }
    out
}

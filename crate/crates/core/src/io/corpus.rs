//! Byte-level text corpora and a deterministic synthetic text generator.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Vocabulary size of byte-level tokenization.
pub const BYTE_VOCAB: usize = 256;

/// A token stream split into a leading training part and a trailing
/// validation part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<usize>,
    split: usize,
}

impl Corpus {
    /// Tokenize `text` byte by byte and hold out the last `validation_fraction`.
    pub fn from_text(text: &str, validation_fraction: f64) -> Result<Self> {
        Self::from_bytes(text.as_bytes(), validation_fraction)
    }

    pub fn from_bytes(bytes: &[u8], validation_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0, 1), got {validation_fraction}"
            )));
        }
        if bytes.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let tokens: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
        let held = (tokens.len() as f64 * validation_fraction).round() as usize;
        Ok(Self {
            split: tokens.len() - held,
            tokens,
        })
    }

    /// Read a file, or every regular file of a directory in name order.
    pub fn load(path: impl AsRef<Path>, validation_fraction: f64) -> Result<Self> {
        let path = path.as_ref();
        let bytes = if path.is_dir() {
            let mut files: Vec<_> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.is_file());
            files.sort();
            let mut all = Vec::new();
            for f in files {
                all.extend(fs::read(f)?);
            }
            all
        } else {
            fs::read(path)?
        };
        Self::from_bytes(&bytes, validation_fraction)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn validation(&self) -> &[usize] {
        &self.tokens[self.split..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Turn byte tokens back into text, replacing invalid UTF-8.
pub fn detokenize(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

const NAMES: &[&str] = &[
    "Anna", "Tom", "Maria", "Oscar", "Lena", "Victor", "Iris", "Paul", "Nora", "Hugo",
];
const DETERMINERS: &[&str] = &[
    "the", "a", "this", "that", "every", "one", "some", "her", "his", "our",
];
const ADJECTIVES: &[&str] = &[
    "small", "old", "quiet", "bright", "cold", "green", "heavy", "narrow", "early", "strange",
    "warm", "broken", "distant", "simple", "careful", "empty",
];
const NOUNS: &[&str] = &[
    "house", "river", "garden", "letter", "window", "road", "teacher", "market", "child", "boat",
    "station", "table", "village", "machine", "story", "door", "field", "bird", "winter", "lamp",
    "bridge", "kitchen", "doctor", "mountain",
];
const VERBS: &[&str] = &[
    "opened",
    "found",
    "watched",
    "carried",
    "painted",
    "followed",
    "remembered",
    "closed",
    "built",
    "visited",
    "cleaned",
    "answered",
    "moved",
    "noticed",
    "kept",
    "sold",
];
const INTRANSITIVE: &[&str] = &[
    "waited", "slept", "laughed", "arrived", "stayed", "worked", "returned",
];
const ADVERBS: &[&str] = &[
    "slowly", "again", "quickly", "today", "alone", "together", "often", "later",
];
const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "beside", "across", "inside", "after", "before",
];
const CONNECTIVES: &[&str] = &["and then", "but", "because", "so", "while"];

/// Skewed pick: low indices are much more frequent than high ones.
fn pick<'a>(rng: &mut Rng, words: &[&'a str]) -> &'a str {
    let u = rng.uniform();
    words[((u * u) * words.len() as f64) as usize % words.len()]
}

fn noun_phrase(rng: &mut Rng, out: &mut String) {
    if rng.uniform() < 0.2 {
        out.push_str(pick(rng, NAMES));
        return;
    }
    out.push_str(pick(rng, DETERMINERS));
    out.push(' ');
    if rng.uniform() < 0.5 {
        out.push_str(pick(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(pick(rng, NOUNS));
}

fn clause(rng: &mut Rng, out: &mut String) {
    noun_phrase(rng, out);
    out.push(' ');
    if rng.uniform() < 0.3 {
        out.push_str(pick(rng, INTRANSITIVE));
    } else {
        out.push_str(pick(rng, VERBS));
        out.push(' ');
        noun_phrase(rng, out);
    }
    if rng.uniform() < 0.35 {
        out.push(' ');
        out.push_str(pick(rng, PREPOSITIONS));
        out.push(' ');
        noun_phrase(rng, out);
    }
    if rng.uniform() < 0.25 {
        out.push(' ');
        out.push_str(pick(rng, ADVERBS));
    }
}

/// Deterministic English-like text of at least `min_bytes` bytes: simple
/// clauses over a small skewed vocabulary, sentences and paragraphs.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let mut out = String::with_capacity(min_bytes + 256);
    let mut in_paragraph = 0;
    while out.len() < min_bytes {
        let start = out.len();
        clause(&mut rng, &mut out);
        if rng.uniform() < 0.3 {
            out.push_str(", ");
            out.push_str(pick(&mut rng, CONNECTIVES));
            out.push(' ');
            clause(&mut rng, &mut out);
        }
        out.push('.');
        // Capitalize the first letter of the sentence.
        if let Some(c) = out[start..].chars().next() {
            let up = c.to_ascii_uppercase();
            out.replace_range(start..start + 1, up.encode_utf8(&mut [0; 4]));
        }
        in_paragraph += 1;
        if in_paragraph >= 3 + rng.below(4) {
            out.push_str("\n\n");
            in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out
}

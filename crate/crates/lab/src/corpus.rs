//! Corpus files and a seeded synthetic text generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const DETERMINERS: &[&str] = &[
    "the", "a", "every", "some", "this", "that", "my", "our", "no", "each",
];
const ADJECTIVES: &[&str] = &[
    "small", "old", "quiet", "bright", "heavy", "green", "early", "distant", "careful", "strange",
    "warm", "narrow", "simple", "broken", "silver", "patient", "hidden", "tired", "sudden",
    "gentle",
];
const NOUNS: &[&str] = &[
    "river", "garden", "teacher", "machine", "window", "letter", "village", "market", "engine",
    "forest", "painter", "bridge", "student", "kitchen", "harbor", "signal", "farmer", "lantern",
    "question", "winter", "station", "doctor", "mountain", "record", "island", "captain",
    "library", "storm", "child", "voice",
];
const VERBS: &[&str] = &[
    "watched",
    "carried",
    "found",
    "opened",
    "followed",
    "repaired",
    "described",
    "answered",
    "crossed",
    "remembered",
    "painted",
    "measured",
    "visited",
    "ignored",
    "moved",
    "built",
    "heard",
    "counted",
];
const INTRANSITIVE: &[&str] = &[
    "slept", "waited", "arrived", "vanished", "laughed", "stopped", "returned", "grew",
];
const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "across", "beside", "toward", "inside", "past",
];
const ADVERBS: &[&str] = &[
    "slowly",
    "again",
    "quickly",
    "quietly",
    "at last",
    "once more",
    "without a word",
];
const CONNECTIVES: &[&str] = &["and", "but", "while", "because", "so", "until"];

/// Picks from a list with weights decaying as 1/(rank + 1), which gives the
/// skewed word frequencies of natural text.
fn zipf<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    let total: f64 = (1..=words.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in words.iter().enumerate() {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return w;
        }
    }
    words[words.len() - 1]
}

fn noun_phrase<R: Rng>(rng: &mut R, out: &mut String) {
    out.push_str(zipf(rng, DETERMINERS));
    out.push(' ');
    if rng.gen_bool(0.4) {
        out.push_str(zipf(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(zipf(rng, NOUNS));
    if rng.gen_bool(0.15) {
        out.push(' ');
        out.push_str(zipf(rng, PREPOSITIONS));
        out.push(' ');
        out.push_str(zipf(rng, DETERMINERS));
        out.push(' ');
        out.push_str(zipf(rng, NOUNS));
    }
}

fn clause<R: Rng>(rng: &mut R, out: &mut String) {
    noun_phrase(rng, out);
    out.push(' ');
    if rng.gen_bool(0.7) {
        out.push_str(zipf(rng, VERBS));
        out.push(' ');
        noun_phrase(rng, out);
    } else {
        out.push_str(zipf(rng, INTRANSITIVE));
    }
    if rng.gen_bool(0.3) {
        out.push(' ');
        out.push_str(ADVERBS.choose(rng).expect("non-empty"));
    }
}

fn sentence<R: Rng>(rng: &mut R, out: &mut String) {
    let start = out.len();
    clause(rng, out);
    if rng.gen_bool(0.35) {
        out.push_str(", ");
        out.push_str(zipf(rng, CONNECTIVES));
        out.push(' ');
        clause(rng, out);
    }
    out[start..start + 1].make_ascii_uppercase();
    out.push_str(if rng.gen_bool(0.9) { ". " } else { "? " });
}

/// Grammatical pseudo-English text of exactly `n_bytes` bytes.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(n_bytes + 256);
    let mut in_paragraph = 0;
    while text.len() < n_bytes {
        sentence(&mut rng, &mut text);
        in_paragraph += 1;
        if in_paragraph >= rng.gen_range(3..8) {
            text.pop();
            text.push('\n');
            in_paragraph = 0;
        }
    }
    text.truncate(n_bytes);
    text.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_length_and_deterministic() {
        let a = synthetic_corpus(10_000, 3);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_corpus(10_000, 3));
        assert_ne!(a, synthetic_corpus(10_000, 4));
        assert!(a.is_ascii());
    }

    #[test]
    fn looks_like_text() {
        let text = String::from_utf8(synthetic_corpus(5_000, 0)).unwrap();
        assert!(text.contains("The ") && text.contains(". "));
        let spaces = text.bytes().filter(|&b| b == b' ').count();
        assert!(spaces > text.len() / 10);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_corpus(Path::new("/nonexistent/corpus.txt")),
            Err(LabError::Io { .. })
        ));
    }
}

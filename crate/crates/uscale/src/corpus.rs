//! A deterministic, text-like byte corpus for desk-scale experiments.
//!
//! Words are built from syllables and drawn from a Zipfian unigram mixed
//! with sparse per-word successor lists, then grouped into capitalized
//! sentences and paragraphs. The result has structure at the character,
//! word and sentence level, so loss keeps falling well past the unigram
//! entropy, and a model that is too small or badly tuned shows it.

use uscale_core::Rng;

const ONSETS: &[&str] = &[
    "", "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "ch", "cl",
    "dr", "gr", "pl", "sh", "st", "th", "tr",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ng"];

pub const DEFAULT_WORDS: usize = 3000;
const SUCCESSORS: usize = 6;

struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=n)
            .map(|k| {
                acc += (k as f64).powf(-s);
                acc
            })
            .collect();
        for c in &mut cdf {
            *c /= acc;
        }
        Self { cdf }
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn make_word(rng: &mut Rng) -> String {
    let syllables = 1 + rng.below(3) + usize::from(rng.uniform() < 0.15);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.below(ONSETS.len())]);
        w.push_str(NUCLEI[rng.below(NUCLEI.len())]);
        w.push_str(CODAS[rng.below(CODAS.len())]);
    }
    w
}

/// At least `min_bytes` bytes of synthetic English-like text.
pub fn synthetic_corpus(min_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::derive(seed, 0x636f_7270);
    let mut words: Vec<String> = Vec::with_capacity(DEFAULT_WORDS);
    while words.len() < DEFAULT_WORDS {
        let w = make_word(&mut rng);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    // frequent words are short
    words.sort_by_key(|w| w.len());
    let unigram = Zipf::new(words.len(), 1.1);
    let successors: Vec<Vec<usize>> = (0..words.len())
        .map(|_| (0..SUCCESSORS).map(|_| unigram.sample(&mut rng)).collect())
        .collect();
    let pick_next = Zipf::new(SUCCESSORS, 1.0);

    let mut out = Vec::with_capacity(min_bytes + 256);
    let mut prev = unigram.sample(&mut rng);
    let mut sentences_in_par = 0;
    while out.len() < min_bytes {
        let len = 4 + rng.below(14);
        for i in 0..len {
            let w = if rng.uniform() < 0.6 {
                successors[prev][pick_next.sample(&mut rng)]
            } else {
                unigram.sample(&mut rng)
            };
            let text = words[w].as_bytes();
            if i == 0 {
                out.push(text[0].to_ascii_uppercase());
                out.extend_from_slice(&text[1..]);
            } else {
                out.push(b' ');
                out.extend_from_slice(text);
            }
            if i + 1 < len && rng.uniform() < 0.06 {
                out.push(b',');
            }
            prev = w;
        }
        out.push(if rng.uniform() < 0.1 { b'?' } else { b'.' });
        sentences_in_par += 1;
        if sentences_in_par >= 3 + rng.below(5) {
            out.extend_from_slice(b"\n\n");
            sentences_in_par = 0;
        } else {
            out.push(b' ');
        }
    }
    out
}

//! Byte-level data pipeline: tokenization, dev split, deterministic and
//! resumable batch iteration, and a synthetic English-like corpus generator
//! for self-contained desk-scale runs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Identity byte -> id mapping; the vocabulary is exactly the 256 byte values.
pub fn tokenize_bytes(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::input(format!("token id {t} exceeds byte range")))
        })
        .collect()
}

/// Hold out the final `dev_frac` of the tokens; the leading remainder is the
/// training split.
pub fn split_dev(tokens: &[usize], dev_frac: f64) -> Result<(&[usize], &[usize])> {
    if !(0.0..1.0).contains(&dev_frac) {
        return Err(Error::input(format!("dev fraction must be in [0,1), got {dev_frac}")));
    }
    let dev_len = (tokens.len() as f64 * dev_frac) as usize;
    let cut = tokens.len() - dev_len;
    Ok((&tokens[..cut], &tokens[cut..]))
}

/// One training example: `n` input tokens and the next-token targets.
pub type Example = (Vec<usize>, Vec<usize>);

/// Deterministic shuffled stream of fixed windows over a token array.
///
/// Windows are laid stride-n so no example crosses the corpus boundary;
/// window w covers inputs `tokens[w*n .. w*n+n]` and targets shifted one.
/// Each epoch reshuffles window order with a stream derived from (seed,
/// epoch), and batch b of the run is a pure function of b, so training can
/// resume from any step without replaying the stream.
#[derive(Debug, Clone)]
pub struct Batches {
    tokens: Vec<usize>,
    n: usize,
    batch_size: usize,
    seed: u64,
    windows: usize,
}

impl Batches {
    pub fn new(tokens: &[usize], n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::input("sequence length and batch size must be positive"));
        }
        if tokens.len() < n + 1 {
            return Err(Error::input(format!(
                "corpus of {} tokens is shorter than seq_len+1 = {}",
                tokens.len(),
                n + 1
            )));
        }
        let windows = (tokens.len() - n - 1) / n + 1;
        if windows < batch_size {
            return Err(Error::input(format!(
                "corpus yields {windows} windows, fewer than batch size {batch_size}"
            )));
        }
        Ok(Self {
            tokens: tokens.to_vec(),
            n,
            batch_size,
            seed,
            windows,
        })
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    /// Complete batches per epoch; the remainder windows of each epoch are
    /// dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.windows / self.batch_size
    }

    fn window(&self, w: usize) -> Example {
        let start = w * self.n;
        (
            self.tokens[start..start + self.n].to_vec(),
            self.tokens[start + 1..start + self.n + 1].to_vec(),
        )
    }

    /// The examples of 0-indexed batch `index` in the run's global order.
    pub fn batch(&self, index: u64) -> Vec<Example> {
        let bpe = self.batches_per_epoch() as u64;
        let epoch = index / bpe;
        let slot = (index % bpe) as usize;
        let mut order: Vec<usize> = (0..self.windows).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order[slot * self.batch_size..(slot + 1) * self.batch_size]
            .iter()
            .map(|&w| self.window(w))
            .collect()
    }
}

const WORDS: &[&str] = &[
    "the", "a", "one", "this", "that", "every", "no", "some", "any", "each", "cat", "dog", "bird",
    "fish", "horse", "mouse", "stone", "river", "tree", "cloud", "house", "garden", "road",
    "mountain", "child", "farmer", "sailor", "teacher", "baker", "king", "runs", "walks", "sees",
    "finds", "takes", "makes", "holds", "follows", "watches", "carries", "builds", "paints",
    "opens", "closes", "remembers", "quickly", "slowly", "quietly", "always", "never", "often",
    "red", "green", "small", "large", "old", "young", "bright", "dark", "heavy",
];

/// Deterministic pseudo-English text of at least `min_bytes` bytes: short
/// sentences of dictionary words, Zipf-weighted so the byte statistics are
/// learnable at desk scale.
pub fn synthetic_corpus(min_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..WORDS.len()).map(|i| 1.0 / (i + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut ChaCha8Rng| {
        let mut x = rng.random::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            x -= w;
            if x <= 0.0 {
                return WORDS[i];
            }
        }
        WORDS[WORDS.len() - 1]
    };
    let mut out = Vec::with_capacity(min_bytes + 128);
    while out.len() < min_bytes {
        let sentence_len = rng.random_range(4..=10);
        for i in 0..sentence_len {
            let word = pick(&mut rng);
            if i == 0 {
                let mut chars = word.chars();
                let first = chars.next().expect("non-empty word");
                out.extend(first.to_ascii_uppercase().to_string().as_bytes());
                out.extend(chars.as_str().as_bytes());
            } else {
                out.push(b' ');
                out.extend(word.as_bytes());
            }
        }
        out.push(b'.');
        if rng.random::<f64>() < 0.2 {
            out.push(b'\n');
        } else {
            out.push(b' ');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_is_identity_on_byte_values() {
        assert_eq!(tokenize_bytes(b"ab"), vec![97, 98]);
        assert_eq!(tokenize_bytes(b""), Vec::<usize>::new());
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bytes: Vec<u8> = (0..4096).map(|_| rng.random()).collect();
        assert_eq!(detokenize(&tokenize_bytes(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn detokenize_rejects_wide_ids() {
        assert!(detokenize(&[256]).is_err());
    }

    #[test]
    fn dev_split_holds_out_final_five_percent() {
        let tokens: Vec<usize> = (0..1000).collect();
        let (train, dev) = split_dev(&tokens, 0.05).unwrap();
        assert_eq!(train.len(), 950);
        assert_eq!(dev.len(), 50);
        assert_eq!(dev[0], 950);
        assert!(split_dev(&tokens, 1.0).is_err());
    }

    #[test]
    fn first_window_is_shift_by_one() {
        let tokens: Vec<usize> = (1..=10).collect();
        let b = Batches::new(&tokens, 4, 1, 0).unwrap();
        assert_eq!(b.windows(), 2);
        let (inputs, targets) = b.window(0);
        assert_eq!(inputs, vec![1, 2, 3, 4]);
        assert_eq!(targets, vec![2, 3, 4, 5]);
        let (inputs, targets) = b.window(1);
        assert_eq!(inputs, vec![5, 6, 7, 8]);
        assert_eq!(targets, vec![6, 7, 8, 9]);
    }

    #[test]
    fn short_corpus_is_rejected() {
        let tokens: Vec<usize> = (0..4).collect();
        assert!(Batches::new(&tokens, 4, 1, 0).is_err());
        assert!(Batches::new(&tokens, 3, 1, 0).is_ok());
    }

    #[test]
    fn same_seed_gives_identical_batch_sequence() {
        let tokens: Vec<usize> = (0..500).map(|i| i % 256).collect();
        let a = Batches::new(&tokens, 8, 4, 9).unwrap();
        let b = Batches::new(&tokens, 8, 4, 9).unwrap();
        for i in 0..20 {
            assert_eq!(a.batch(i), b.batch(i));
        }
        let c = Batches::new(&tokens, 8, 4, 10).unwrap();
        assert!((0..20).any(|i| a.batch(i) != c.batch(i)));
    }

    #[test]
    fn epoch_reshuffles_but_covers_every_window_once() {
        let tokens: Vec<usize> = (0..257).collect();
        let b = Batches::new(&tokens, 8, 2, 1).unwrap();
        let bpe = b.batches_per_epoch() as u64;
        let mut epoch0: Vec<Vec<usize>> = Vec::new();
        for i in 0..bpe {
            for (inputs, _) in b.batch(i) {
                epoch0.push(inputs);
            }
        }
        let mut epoch1: Vec<Vec<usize>> = Vec::new();
        for i in bpe..2 * bpe {
            for (inputs, _) in b.batch(i) {
                epoch1.push(inputs);
            }
        }
        assert_ne!(epoch0, epoch1, "epochs should be differently ordered");
        let mut sorted0 = epoch0.clone();
        sorted0.sort();
        let mut sorted1 = epoch1.clone();
        sorted1.sort();
        assert_eq!(sorted0, sorted1, "same windows visited each epoch");
        assert_eq!(sorted0.len(), (bpe as usize) * 2);
    }

    #[test]
    fn batch_is_random_access_consistent() {
        let tokens: Vec<usize> = (0..300).collect();
        let b = Batches::new(&tokens, 4, 3, 5).unwrap();
        let sequential: Vec<_> = (0..30).map(|i| b.batch(i)).collect();
        assert_eq!(b.batch(17), sequential[17]);
        assert_eq!(b.batch(0), sequential[0]);
        assert_eq!(b.batch(29), sequential[29]);
    }

    #[test]
    fn synthetic_corpus_is_deterministic_text() {
        let a = synthetic_corpus(10_000, 42);
        let b = synthetic_corpus(10_000, 42);
        assert_eq!(a, b);
        assert!(a.len() >= 10_000);
        assert!(a.iter().all(|&c| c.is_ascii()));
        let text = String::from_utf8(a).unwrap();
        assert!(text.contains(". "));
        let c = synthetic_corpus(10_000, 43);
        assert_ne!(text.as_bytes(), c.as_slice());
    }
}

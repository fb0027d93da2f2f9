use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::PromptEmbedding;
use crate::nn::normal;

/// Hash-based toy text encoder.
///
/// Each lowercase word maps to a fixed Gaussian vector seeded by its FNV-1a
/// hash, plus a small positional term. Sequences are `[BOS, words…, PAD…]`
/// truncated or padded to `max_tokens`; the empty prompt is the null
/// embedding used for unconditional passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTextEncoder {
    width: usize,
    max_tokens: usize,
    seed: u64,
    bos: Array1<f64>,
    pad: Array1<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x100_0000_01b3))
}

fn gaussian(seed: u64, width: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (width as f64).sqrt();
    Array1::from_shape_fn(width, |_| scale * normal(&mut rng))
}

impl ToyTextEncoder {
    pub fn new(width: usize, max_tokens: usize, seed: u64) -> Self {
        Self {
            width,
            max_tokens: max_tokens.max(1),
            seed,
            bos: gaussian(seed ^ 0xb0b, width),
            pad: gaussian(seed ^ 0xfad, width),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn words(prompt: &str) -> Vec<String> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn word_vector(&self, word: &str) -> Array1<f64> {
        gaussian(self.seed ^ fnv1a(word.as_bytes()), self.width)
    }

    pub fn encode(&self, prompt: &str) -> PromptEmbedding {
        let words = Self::words(prompt);
        let mut tokens = Array2::zeros((self.max_tokens, self.width));
        tokens.row_mut(0).assign(&self.bos);
        for pos in 1..self.max_tokens {
            let mut row = match words.get(pos - 1) {
                Some(w) => self.word_vector(w),
                None => self.pad.clone(),
            };
            for (j, v) in row.iter_mut().enumerate() {
                *v += 0.1 * ((pos as f64) / (1.0 + j as f64)).sin();
            }
            tokens.row_mut(pos).assign(&row);
        }
        PromptEmbedding::new(tokens).expect("non-empty finite tokens")
    }

    pub fn null(&self) -> PromptEmbedding {
        self.encode("")
    }
}

//! Toy caption handling: tokenisation, FNV-1a hashing and fixed token
//! embeddings.

use rand::Rng;
use rand_distr::StandardNormal;
use voldiff_autodiff::Tensor;

use crate::nn::seeded;

pub const MAX_TOKENS: usize = 16;
pub const EMBED_DIM: usize = 32;
const UNCOND_TOKEN: &str = "<uncond>";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Standard-normal vector seeded by the token's hash.
pub fn token_vector(token: &str, dim: usize) -> Vec<f32> {
    let mut rng = seeded(fnv1a64(token.as_bytes()));
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn positional(pos: usize, dim: usize) -> impl Iterator<Item = f32> {
    (0..dim).map(move |i| {
        let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / dim as f64);
        let a = pos as f64 * freq;
        (if i % 2 == 0 { a.sin() } else { a.cos() }) as f32
    })
}

/// Caption as an `[L, EMBED_DIM]` token matrix, `1 <= L <= MAX_TOKENS`.
/// Token vectors plus sinusoidal positions; an empty caption maps to the
/// unconditional embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub tokens: Vec<String>,
    pub embedding: Tensor<f32>,
}

impl Condition {
    pub fn from_caption(caption: &str) -> Self {
        let mut tokens = tokenize(caption);
        tokens.truncate(MAX_TOKENS);
        if tokens.is_empty() {
            return Self::unconditional();
        }
        Self::build(tokens)
    }

    pub fn unconditional() -> Self {
        Self::build(vec![UNCOND_TOKEN.to_string()])
    }

    fn build(tokens: Vec<String>) -> Self {
        let mut data = Vec::with_capacity(tokens.len() * EMBED_DIM);
        for (pos, tok) in tokens.iter().enumerate() {
            data.extend(token_vector(tok, EMBED_DIM).into_iter().zip(positional(pos, EMBED_DIM)).map(|(a, b)| a + b));
        }
        let embedding = Tensor::new([tokens.len(), EMBED_DIM], data).expect("sized from tokens");
        Condition { tokens, embedding }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

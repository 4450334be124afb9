#![allow(dead_code)]

use std::collections::BTreeSet;

use bearlab::catalog::{Catalog, TokenId, Tokenization, BOS, SEP};
use bearlab::seqmodel::{random_model, BlockKind, SequenceModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Distinct titles over a small alphabet so prefixes collide often.
pub fn random_catalog(rng: &mut ChaCha8Rng, n: usize, alphabet: &str, max_len: usize) -> Catalog {
    let letters: Vec<char> = alphabet.chars().collect();
    let mut titles = BTreeSet::new();
    while titles.len() < n {
        let len = rng.gen_range(1..=max_len);
        let t: String = (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
        titles.insert(t);
    }
    let titles: Vec<String> = titles.into_iter().collect();
    Catalog::build(&titles, Tokenization::Character).expect("distinct non-empty titles")
}

/// BOS followed by a few random titles, each closed by SEP.
pub fn random_prompt(rng: &mut ChaCha8Rng, catalog: &Catalog, items: usize) -> Vec<TokenId> {
    let mut p = vec![BOS];
    for _ in 0..items {
        let i = rng.gen_range(0..catalog.len());
        p.extend_from_slice(catalog.item(i).content());
        p.push(SEP);
    }
    p
}

pub fn model_for(catalog: &Catalog, seed: u64) -> SequenceModel {
    let kind = if seed % 2 == 0 {
        BlockKind::CausalAttention
    } else {
        BlockKind::GatedRecurrent
    };
    random_model(catalog.vocab.len(), seed, kind)
}

/// Random logits matrix `[rows, cols]` with entries in `(-2, 2)`.
pub fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

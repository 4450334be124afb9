//! Seeded synthetic catalogs and interaction logs.
//!
//! Titles are strings over a symbol alphabet. A `collision_rate` share of the
//! items is grouped under shared stems (same leading symbol), the rest start
//! with a symbol of their own. Interactions follow a first-order item
//! transition process with Zipf-weighted successors and popularity restarts.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Interaction, InteractionLog};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub catalog_size: usize,
    pub users: usize,
    pub seq_len: usize,
    /// 1: next item depends on the current one; 0: popularity only.
    pub markov_order: usize,
    pub title_len_min: usize,
    pub title_len_max: usize,
    /// Minimum alphabet size; grown when more distinct leading symbols are
    /// needed.
    pub alphabet_size: usize,
    pub collision_rate: f64,
    pub num_stems: usize,
    pub stem_len: usize,
    pub successors: usize,
    pub successor_zipf: f64,
    pub popularity_zipf: f64,
    pub restart_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            catalog_size: 200,
            users: 2000,
            seq_len: 16,
            markov_order: 1,
            title_len_min: 3,
            title_len_max: 5,
            alphabet_size: 40,
            collision_rate: 0.7,
            num_stems: 14,
            stem_len: 1,
            successors: 12,
            successor_zipf: 1.0,
            popularity_zipf: 1.0,
            restart_prob: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        if self.catalog_size < 10 {
            return bad(format!("catalog_size must be >= 10, got {}", self.catalog_size));
        }
        if self.seq_len < 11 {
            return bad(format!("seq_len must be >= 11, got {}", self.seq_len));
        }
        if self.users == 0 {
            return bad("users must be positive".into());
        }
        if self.markov_order > 1 {
            return bad(format!("markov_order must be 0 or 1, got {}", self.markov_order));
        }
        if self.title_len_min == 0 || self.title_len_max < self.title_len_min {
            return bad("title length range must satisfy 1 <= min <= max".into());
        }
        if self.collision_rate > 0.0 && self.title_len_min <= self.stem_len {
            return bad("title_len_min must exceed stem_len when stems are shared".into());
        }
        if !(0.0..=1.0).contains(&self.collision_rate) || !(0.0..=1.0).contains(&self.restart_prob) {
            return bad("collision_rate and restart_prob must lie in [0, 1]".into());
        }
        if self.stem_len == 0 || self.num_stems == 0 || self.successors == 0 {
            return bad("stem_len, num_stems and successors must be positive".into());
        }
        Ok(())
    }
}

/// Alphabet: ASCII letters and digits, then CJK ideographs as needed.
pub fn alphabet(n: usize) -> Vec<char> {
    let mut out: Vec<char> = ('a'..='z').chain('A'..='Z').chain('0'..='9').collect();
    let mut cp = 0x4E00u32;
    while out.len() < n {
        out.push(char::from_u32(cp).expect("valid ideograph"));
        cp += 1;
    }
    out.truncate(n.max(1));
    out
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s)).collect()
}

fn sample(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn generate_titles(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<String>, HarnessError> {
    let n = spec.catalog_size;
    let grouped = ((spec.collision_rate * n as f64).round() as usize).min(n);
    let unique = n - grouped;
    let groups = if grouped == 0 { 0 } else { spec.num_stems.min(grouped) };
    let symbols = alphabet(spec.alphabet_size.max(unique + groups));
    let mut leads = symbols.clone();
    leads.shuffle(rng);
    let stems: Vec<String> = (0..groups)
        .map(|g| {
            let mut s = String::from(leads[unique + g]);
            for _ in 1..spec.stem_len {
                s.push(symbols[rng.gen_range(0..symbols.len())]);
            }
            s
        })
        .collect();
    let stem_w = zipf_weights(groups, 1.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut titles = vec![String::new(); n];
    let mut seen = HashSet::new();
    for (slot, &item) in order.iter().enumerate() {
        let mut attempts = 0;
        loop {
            let len = rng.gen_range(spec.title_len_min..=spec.title_len_max);
            let mut t = if slot < unique {
                String::from(leads[slot])
            } else {
                stems[sample(rng, &stem_w)].clone()
            };
            while t.chars().count() < len {
                t.push(symbols[rng.gen_range(0..symbols.len())]);
            }
            if seen.insert(t.clone()) {
                titles[item] = t;
                break;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(HarnessError::Validation(
                    "title space too small for the requested catalog".into(),
                ));
            }
        }
    }
    Ok(titles)
}

/// Catalog titles plus an interaction log of `users * seq_len` rows.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<String>, InteractionLog), HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let titles = generate_titles(spec, &mut rng)?;
    let n = spec.catalog_size;

    let mut by_pop: Vec<usize> = (0..n).collect();
    by_pop.shuffle(&mut rng);
    let mut pop = vec![0.0; n];
    for (r, w) in zipf_weights(n, spec.popularity_zipf).into_iter().enumerate() {
        pop[by_pop[r]] = w;
    }
    let m = spec.successors.min(n - 1);
    let succ_w = zipf_weights(m, spec.successor_zipf);
    let successors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.shuffle(&mut rng);
            others.truncate(m);
            others
        })
        .collect();

    let mut rows = Vec::with_capacity(spec.users * spec.seq_len);
    for u in 0..spec.users {
        let base: i64 = rng.gen_range(0..100_000);
        let mut cur = sample(&mut rng, &pop);
        for k in 0..spec.seq_len {
            if k > 0 {
                cur = if spec.markov_order == 0 || rng.gen::<f64>() < spec.restart_prob {
                    sample(&mut rng, &pop)
                } else {
                    successors[cur][sample(&mut rng, &succ_w)]
                };
            }
            let ts = base + 1000 * k as i64 + rng.gen_range(0..1000);
            rows.push(Interaction {
                user: u,
                item: cur,
                timestamp: ts,
            });
        }
    }
    Ok((titles, InteractionLog { rows }))
}

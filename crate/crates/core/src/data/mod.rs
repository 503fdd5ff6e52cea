//! Synthetic memes-like dataset.
//!
//! Labels follow an intersectional generating process: a sample is hateful
//! exactly when its text carries the hate signal AND its image does. Either
//! signal alone is benign. The latent signals are kept as observable metadata
//! so downstream causal estimates can be checked against exact oracles.

mod confounders;
mod io;

pub use confounders::{
    extract_confounders, pick_missing, ConfounderPairs, ConfounderTriple, Provenance, TripleRef,
};
pub use io::{
    read_samples, read_triples, write_samples, write_triples, samples_to_jsonl, triples_to_jsonl,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One synthetic meme: whole-token text plus a set of region feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeSample {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub regions: Vec<Vec<f64>>,
    /// Latent "text carries the hate signal".
    pub t_signal: bool,
    /// Latent "image carries the hate signal".
    pub i_signal: bool,
    /// 1 iff `t_signal && i_signal`.
    pub label: u8,
    /// Links a hateful sample to its original confounder, when one exists.
    pub group_id: Option<u64>,
}

impl MemeSample {
    pub fn is_hateful(&self) -> bool {
        self.label == 1
    }
}

/// Generator configuration. Counts are per-category; see `generate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    /// Groups of (hateful, image-benign confounder sharing the text).
    pub image_benign_groups: usize,
    /// Groups of (hateful, text-benign confounder sharing the image).
    pub text_benign_groups: usize,
    /// Ungrouped samples with only the text signal (t=1, i=0).
    pub lone_text_signal: usize,
    /// Ungrouped samples with only the image signal (t=0, i=1).
    pub lone_image_signal: usize,
    /// Ungrouped fully benign samples (t=0, i=0).
    pub fully_benign: usize,
    pub vocab_size: u32,
    /// Token ids >= this value carry the text signal; ids below are noise.
    /// The two vocabularies are disjoint by construction.
    pub signal_token_start: u32,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub region_dim: usize,
    /// Std of the isotropic noise around each region cluster center.
    pub region_noise_std: f64,
    /// Per-coordinate offset of the signal cluster center from the benign
    /// center at the origin.
    pub region_signal_offset: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            image_benign_groups: 34,
            text_benign_groups: 34,
            lone_text_signal: 24,
            lone_image_signal: 24,
            fully_benign: 24,
            vocab_size: 64,
            signal_token_start: 48,
            min_tokens: 3,
            max_tokens: 8,
            min_regions: 2,
            max_regions: 5,
            region_dim: 16,
            region_noise_std: 0.25,
            region_signal_offset: 3.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.signal_token_start == 0 {
            problems.push("signal vocabulary covers everything; noise vocabulary is empty".into());
        }
        if self.signal_token_start >= self.vocab_size {
            problems.push(format!(
                "signal_token_start {} leaves an empty signal vocabulary (vocab_size {})",
                self.signal_token_start, self.vocab_size
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            problems.push(format!(
                "token count range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            problems.push(format!(
                "region count range {}..={} is invalid",
                self.min_regions, self.max_regions
            ));
        }
        if self.region_dim == 0 {
            problems.push("region_dim must be >= 1".into());
        }
        // cluster separation: centers differ by offset in every coordinate
        let center_distance = self.region_signal_offset * (self.region_dim as f64).sqrt();
        if center_distance < 4.0 * self.region_noise_std {
            problems.push(format!(
                "region cluster centers are {center_distance:.3} apart, need >= 4x noise std ({:.3})",
                4.0 * self.region_noise_std
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems))
        }
    }
}

struct SampleFactory<'a> {
    cfg: &'a GenConfig,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    next_id: u64,
}

impl<'a> SampleFactory<'a> {
    fn new(cfg: &'a GenConfig) -> Self {
        SampleFactory {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            noise: Normal::new(0.0, cfg.region_noise_std).expect("validated std"),
            next_id: 0,
        }
    }

    fn tokens(&mut self, signal: bool) -> Vec<u32> {
        let cfg = self.cfg;
        let n = self.rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let mut toks: Vec<u32> = (0..n)
            .map(|_| {
                if signal && self.rng.random_bool(0.5) {
                    self.rng.random_range(cfg.signal_token_start..cfg.vocab_size)
                } else {
                    self.rng.random_range(0..cfg.signal_token_start)
                }
            })
            .collect();
        if signal && toks.iter().all(|&t| t < cfg.signal_token_start) {
            let pos = self.rng.random_range(0..n);
            toks[pos] = self.rng.random_range(cfg.signal_token_start..cfg.vocab_size);
        }
        toks
    }

    fn regions(&mut self, signal: bool) -> Vec<Vec<f64>> {
        let cfg = self.cfg;
        let n = self.rng.random_range(cfg.min_regions..=cfg.max_regions);
        let mut from_signal_cluster = vec![false; n];
        if signal {
            for flag in from_signal_cluster.iter_mut() {
                *flag = self.rng.random_bool(0.5);
            }
            if !from_signal_cluster.iter().any(|&f| f) {
                let pos = self.rng.random_range(0..n);
                from_signal_cluster[pos] = true;
            }
        }
        from_signal_cluster
            .iter()
            .map(|&hot| {
                let center = if hot { cfg.region_signal_offset } else { 0.0 };
                (0..cfg.region_dim)
                    .map(|_| center + self.noise.sample(&mut self.rng))
                    .collect()
            })
            .collect()
    }

    fn sample(&mut self, t_signal: bool, i_signal: bool, group_id: Option<u64>) -> MemeSample {
        let id = self.next_id;
        self.next_id += 1;
        MemeSample {
            id,
            tokens: self.tokens(t_signal),
            regions: self.regions(i_signal),
            t_signal,
            i_signal,
            label: u8::from(t_signal && i_signal),
            group_id,
        }
    }
}

/// Generate a dataset following the intersectional label rule. Deterministic
/// given the seed; all four (t, i) signal cells are populated per the
/// requested counts.
pub fn generate(cfg: &GenConfig) -> Result<Vec<MemeSample>> {
    cfg.validate()?;
    let mut factory = SampleFactory::new(cfg);
    let mut out = Vec::new();
    let mut group = 0u64;

    for _ in 0..cfg.image_benign_groups {
        let hateful = factory.sample(true, true, Some(group));
        // confounder keeps the hateful sample's text, flips the image
        let mut conf = factory.sample(true, false, Some(group));
        conf.tokens = hateful.tokens.clone();
        out.push(hateful);
        out.push(conf);
        group += 1;
    }
    for _ in 0..cfg.text_benign_groups {
        let hateful = factory.sample(true, true, Some(group));
        // confounder keeps the hateful sample's image, flips the text
        let mut conf = factory.sample(false, true, Some(group));
        conf.regions = hateful.regions.clone();
        out.push(hateful);
        out.push(conf);
        group += 1;
    }
    for _ in 0..cfg.lone_text_signal {
        out.push(factory.sample(true, false, None));
    }
    for _ in 0..cfg.lone_image_signal {
        out.push(factory.sample(false, true, None));
    }
    for _ in 0..cfg.fully_benign {
        out.push(factory.sample(false, false, None));
    }
    Ok(out)
}

/// Deterministic shuffled split into (train, held-out).
pub fn split_dataset(
    samples: &[MemeSample],
    eval_fraction: f64,
    seed: u64,
) -> (Vec<MemeSample>, Vec<MemeSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_eval = ((samples.len() as f64) * eval_fraction).round() as usize;
    let (eval_idx, train_idx) = idx.split_at(n_eval.min(samples.len()));
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
    (pick(train_idx), pick(eval_idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_rule_per_cell() {
        let cfg = GenConfig {
            image_benign_groups: 2,
            text_benign_groups: 2,
            lone_text_signal: 3,
            lone_image_signal: 3,
            fully_benign: 3,
            ..GenConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for s in &data {
            assert_eq!(s.label == 1, s.t_signal && s.i_signal, "sample {}", s.id);
            assert!(!s.tokens.is_empty());
            assert!(!s.regions.is_empty());
        }
        // all four signal cells present
        for (t, i) in [(true, true), (true, false), (false, true), (false, false)] {
            assert!(data.iter().any(|s| s.t_signal == t && s.i_signal == i));
        }
    }

    #[test]
    fn signal_guarantees_hold() {
        let data = generate(&GenConfig::default()).unwrap();
        let cfg = GenConfig::default();
        for s in &data {
            let has_signal_token = s.tokens.iter().any(|&t| t >= cfg.signal_token_start);
            assert_eq!(has_signal_token, s.t_signal, "sample {}", s.id);
            let has_signal_region = s
                .regions
                .iter()
                .any(|r| r.iter().sum::<f64>() / r.len() as f64 > cfg.region_signal_offset / 2.0);
            assert_eq!(has_signal_region, s.i_signal, "sample {}", s.id);
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = GenConfig::default();
        let a = samples_to_jsonl(&generate(&cfg).unwrap()).unwrap();
        let b = samples_to_jsonl(&generate(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_vocab_split_is_a_config_error() {
        let cfg = GenConfig {
            signal_token_start: 64,
            vocab_size: 64,
            ..GenConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config { .. })));
        let cfg = GenConfig {
            signal_token_start: 0,
            ..GenConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn config_error_lists_every_violated_field() {
        let cfg = GenConfig {
            signal_token_start: 0,
            min_tokens: 9,
            max_tokens: 2,
            region_noise_std: 100.0,
            ..GenConfig::default()
        };
        let err = generate(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("noise vocabulary"));
        assert!(msg.contains("token count range"));
        assert!(msg.contains("cluster centers"));
    }

    #[test]
    fn cluster_separation_precondition() {
        let cfg = GenConfig {
            region_signal_offset: 0.1,
            region_noise_std: 0.5,
            ..GenConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config { .. })));
    }
}

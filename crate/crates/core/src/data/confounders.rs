//! Confounder pairing and triple crafting.
//!
//! The dataset yields two kinds of original pairs, matched by group id:
//! (hateful, image-benign) pairs share the text content, (hateful,
//! text-benign) pairs share the image content. Each pair is missing its third
//! member; `pick_missing` completes it k times by borrowing the missing
//! modality's content from unrelated benign donors.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MemeSample;
use crate::error::{Error, Result};

/// Where a confounder's content came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Present in the generated dataset, paired with the hateful sample.
    Original,
    /// Crafted by borrowing the missing modality from a benign donor.
    Picked,
}

/// An original (hateful, confounder) pair sharing one modality's content.
#[derive(Debug, Clone)]
pub struct ConfounderPair {
    pub hateful: MemeSample,
    pub confounder: MemeSample,
}

/// Original pairs extracted from a dataset, keyed by which modality the
/// confounder flipped.
#[derive(Debug, Clone, Default)]
pub struct ConfounderPairs {
    /// Confounder is (T1, I0): benign image, shared text.
    pub image_benign: Vec<ConfounderPair>,
    /// Confounder is (T0, I1): benign text, shared image.
    pub text_benign: Vec<ConfounderPair>,
}

/// A complete (hateful, text-benign, image-benign) analysis triple.
#[derive(Debug, Clone)]
pub struct ConfounderTriple {
    pub hateful: MemeSample,
    pub text_benign: MemeSample,
    pub image_benign: MemeSample,
    pub text_benign_provenance: Provenance,
    pub image_benign_provenance: Provenance,
}

impl ConfounderTriple {
    /// Signal-pattern validity: (1,1) / (0,1) / (1,0) with matching labels.
    pub fn is_valid(&self) -> bool {
        self.hateful.t_signal
            && self.hateful.i_signal
            && self.hateful.label == 1
            && !self.text_benign.t_signal
            && self.text_benign.i_signal
            && self.text_benign.label == 0
            && self.image_benign.t_signal
            && !self.image_benign.i_signal
            && self.image_benign.label == 0
    }
}

/// Serialized form of a triple: sample ids plus provenance flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripleRef {
    pub hateful: u64,
    pub text_benign: u64,
    pub image_benign: u64,
    pub text_benign_provenance: Provenance,
    pub image_benign_provenance: Provenance,
}

impl TripleRef {
    pub fn of(triple: &ConfounderTriple) -> Self {
        TripleRef {
            hateful: triple.hateful.id,
            text_benign: triple.text_benign.id,
            image_benign: triple.image_benign.id,
            text_benign_provenance: triple.text_benign_provenance,
            image_benign_provenance: triple.image_benign_provenance,
        }
    }
}

/// Match hateful samples with their original confounders by group id. Each
/// returned pair's members differ in exactly one modality's latent signal.
pub fn extract_confounders(dataset: &[MemeSample]) -> ConfounderPairs {
    let mut groups: BTreeMap<u64, Vec<&MemeSample>> = BTreeMap::new();
    for s in dataset {
        if let Some(g) = s.group_id {
            groups.entry(g).or_default().push(s);
        }
    }
    let mut pairs = ConfounderPairs::default();
    for members in groups.values() {
        let Some(hateful) = members.iter().find(|s| s.is_hateful()) else {
            continue;
        };
        for other in members.iter().filter(|s| !s.is_hateful()) {
            match (other.t_signal, other.i_signal) {
                (true, false) => pairs.image_benign.push(ConfounderPair {
                    hateful: (*hateful).clone(),
                    confounder: (*other).clone(),
                }),
                (false, true) => pairs.text_benign.push(ConfounderPair {
                    hateful: (*hateful).clone(),
                    confounder: (*other).clone(),
                }),
                // (0,0) or (1,1) members differ in both or neither modality
                _ => {}
            }
        }
    }
    pairs
}

/// Complete every original pair into `k` triples, borrowing the missing
/// modality from `k` distinct benign donors. Picked samples get fresh ids
/// starting after the dataset's maximum id.
pub fn pick_missing(
    pairs: &ConfounderPairs,
    benign_pool: &[MemeSample],
    k: usize,
    seed: u64,
) -> Result<Vec<ConfounderTriple>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = benign_pool
        .iter()
        .map(|s| s.id)
        .chain(pairs.image_benign.iter().map(|p| p.hateful.id.max(p.confounder.id)))
        .chain(pairs.text_benign.iter().map(|p| p.hateful.id.max(p.confounder.id)))
        .max()
        .unwrap_or(0)
        + 1;

    let text_donors: Vec<&MemeSample> = benign_pool.iter().filter(|s| !s.t_signal).collect();
    let image_donors: Vec<&MemeSample> = benign_pool.iter().filter(|s| !s.i_signal).collect();

    let mut triples = Vec::new();

    // image-benign pairs keep the original image confounder and need a
    // picked text-benign member: donor text, hateful sample's image.
    for pair in &pairs.image_benign {
        if text_donors.len() < k {
            return Err(Error::InsufficientPool {
                modality: "text",
                needed: k,
                available: text_donors.len(),
            });
        }
        for di in index::sample(&mut rng, text_donors.len(), k) {
            let donor = text_donors[di];
            let picked = MemeSample {
                id: next_id,
                tokens: donor.tokens.clone(),
                regions: pair.hateful.regions.clone(),
                t_signal: false,
                i_signal: true,
                label: 0,
                group_id: pair.hateful.group_id,
            };
            next_id += 1;
            triples.push(ConfounderTriple {
                hateful: pair.hateful.clone(),
                text_benign: picked,
                image_benign: pair.confounder.clone(),
                text_benign_provenance: Provenance::Picked,
                image_benign_provenance: Provenance::Original,
            });
        }
    }

    // text-benign pairs keep the original text confounder and need a picked
    // image-benign member: hateful sample's text, donor image.
    for pair in &pairs.text_benign {
        if image_donors.len() < k {
            return Err(Error::InsufficientPool {
                modality: "image",
                needed: k,
                available: image_donors.len(),
            });
        }
        for di in index::sample(&mut rng, image_donors.len(), k) {
            let donor = image_donors[di];
            let picked = MemeSample {
                id: next_id,
                tokens: pair.hateful.tokens.clone(),
                regions: donor.regions.clone(),
                t_signal: true,
                i_signal: false,
                label: 0,
                group_id: pair.hateful.group_id,
            };
            next_id += 1;
            triples.push(ConfounderTriple {
                hateful: pair.hateful.clone(),
                text_benign: pair.confounder.clone(),
                image_benign: picked,
                text_benign_provenance: Provenance::Original,
                image_benign_provenance: Provenance::Picked,
            });
        }
    }

    Ok(triples)
}

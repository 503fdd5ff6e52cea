//! Line-delimited JSON serialization for datasets and triple references.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{ConfounderTriple, MemeSample, TripleRef};
use crate::error::{Error, Result};

pub fn samples_to_jsonl(samples: &[MemeSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::Contract(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[MemeSample]) -> Result<()> {
    fs::write(path, samples_to_jsonl(samples)?).map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<MemeSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn triples_to_jsonl(triples: &[ConfounderTriple]) -> Result<String> {
    let mut out = String::new();
    for t in triples {
        let r = TripleRef::of(t);
        out.push_str(&serde_json::to_string(&r).map_err(|e| Error::Contract(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_triples(path: &Path, triples: &[ConfounderTriple]) -> Result<()> {
    fs::write(path, triples_to_jsonl(triples)?).map_err(|e| Error::io(path, e))
}

/// Rehydrate triples from a reference file; every referenced id must exist in
/// `samples` (picked members are stored in the dataset file alongside the
/// generated ones).
pub fn read_triples(path: &Path, samples: &[MemeSample]) -> Result<Vec<ConfounderTriple>> {
    let by_id: BTreeMap<u64, &MemeSample> = samples.iter().map(|s| (s.id, s)).collect();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TripleRef = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
        let fetch = |id: u64| -> Result<MemeSample> {
            by_id
                .get(&id)
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::parse(path, format!("line {}: unknown sample id {id}", i + 1)))
        };
        triples.push(ConfounderTriple {
            hateful: fetch(r.hateful)?,
            text_benign: fetch(r.text_benign)?,
            image_benign: fetch(r.image_benign)?,
            text_benign_provenance: r.text_benign_provenance,
            image_benign_provenance: r.image_benign_provenance,
        });
    }
    Ok(triples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_confounders, generate, pick_missing, GenConfig};

    #[test]
    fn jsonl_roundtrip_preserves_samples_exactly() {
        let dir = std::env::temp_dir().join("memelab-io-test");
        fs::create_dir_all(&dir).unwrap();
        let data = generate(&GenConfig::default()).unwrap();
        let path = dir.join("dataset.jsonl");
        write_samples(&path, &data).unwrap();
        let back = read_samples(&path).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn triple_refs_roundtrip_through_the_dataset_file() {
        let dir = std::env::temp_dir().join("memelab-io-test");
        fs::create_dir_all(&dir).unwrap();
        let data = generate(&GenConfig::default()).unwrap();
        let pairs = extract_confounders(&data);
        let pool: Vec<_> = data.iter().filter(|s| s.group_id.is_none()).cloned().collect();
        let triples = pick_missing(&pairs, &pool, 2, 3).unwrap();

        // picked members live in the dataset file too
        let mut all = data.clone();
        for t in &triples {
            for m in [&t.text_benign, &t.image_benign] {
                if !all.iter().any(|s| s.id == m.id) {
                    all.push(m.clone());
                }
            }
        }
        let dpath = dir.join("with_picked.jsonl");
        let tpath = dir.join("triples.jsonl");
        write_samples(&dpath, &all).unwrap();
        write_triples(&tpath, &triples).unwrap();

        let samples = read_samples(&dpath).unwrap();
        let back = read_triples(&tpath, &samples).unwrap();
        assert_eq!(back.len(), triples.len());
        for (a, b) in triples.iter().zip(&back) {
            assert_eq!(a.hateful, b.hateful);
            assert_eq!(a.text_benign, b.text_benign);
            assert_eq!(a.image_benign, b.image_benign);
        }
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = read_samples(Path::new("/nonexistent/nope.jsonl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/nope.jsonl"));
    }
}

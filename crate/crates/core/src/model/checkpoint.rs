//! Plain-text model checkpoints.
//!
//! Format (line oriented):
//! ```text
//! memelab-checkpoint v1
//! config {json}
//! param <name> <ndim> <dim0> <dim1> ...
//! <numel space-separated decimal values>
//! ...
//! end
//! ```
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save/load cycle reproduces predictions bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const HEADER: &str = "memelab-checkpoint v1";

impl Model {
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        out.push_str("config ");
        out.push_str(&serde_json::to_string(self.config()).expect("config serializes"));
        out.push('\n');
        for p in self.params() {
            write!(out, "param {} {}", p.name, p.value.shape().len()).unwrap();
            for d in p.value.shape() {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
            let mut first = true;
            for v in p.value.data() {
                if !first {
                    out.push(' ');
                }
                write!(out, "{v}").unwrap();
                first = false;
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint_string(text: &str) -> Result<Model> {
        let bad = |msg: String| Error::Parse {
            path: "<string>".into(),
            message: msg,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == HEADER => {}
            other => return Err(bad(format!("bad header {other:?}, expected {HEADER:?}"))),
        }
        let config_line = lines.next().ok_or_else(|| bad("missing config line".into()))?;
        let json = config_line
            .strip_prefix("config ")
            .ok_or_else(|| bad("expected `config {{...}}` line".into()))?;
        let cfg: ModelConfig =
            serde_json::from_str(json).map_err(|e| bad(format!("config: {e}")))?;
        let mut model = Model::new(cfg)?;

        let mut seen = Vec::new();
        loop {
            let line = lines.next().ok_or_else(|| bad("unterminated checkpoint".into()))?;
            if line == "end" {
                break;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("param") {
                return Err(bad(format!("expected `param` line, got {line:?}")));
            }
            let name = parts.next().ok_or_else(|| bad("param line missing name".into()))?;
            let ndim: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("param {name}: bad ndim")))?;
            let dims: Vec<usize> = parts
                .map(|s| s.parse().map_err(|e| bad(format!("param {name}: {e}"))))
                .collect::<Result<_>>()?;
            if dims.len() != ndim {
                return Err(bad(format!("param {name}: expected {ndim} dims, got {}", dims.len())));
            }
            let values_line = lines
                .next()
                .ok_or_else(|| bad(format!("param {name}: missing value line")))?;
            let values: Vec<f64> = values_line
                .split_whitespace()
                .map(|s| s.parse().map_err(|e| bad(format!("param {name}: {e}"))))
                .collect::<Result<_>>()?;
            let tensor = Tensor::new(dims, values)
                .map_err(|e| bad(format!("param {name}: {e}")))?;
            model.set_param(name, tensor)?;
            seen.push(name.to_string());
        }

        let missing: Vec<&str> = model
            .param_names()
            .into_iter()
            .filter(|n| !seen.iter().any(|s| s == n))
            .map(|n| n)
            .collect();
        if !missing.is_empty() {
            return Err(bad(format!("checkpoint missing parameters: {missing:?}")));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_checkpoint_string(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = Model::new(ModelConfig {
            d_model: 16,
            n_heads: 2,
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap();
        let text = model.to_checkpoint_string();
        let back = Model::from_checkpoint_string(&text).unwrap();
        let data = generate(&GenConfig::default()).unwrap();
        for s in data.iter().take(5) {
            let a = model.predict_prob(s).unwrap();
            let b = back.predict_prob(s).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "sample {}", s.id);
        }
        // and the text form is stable
        assert_eq!(text, back.to_checkpoint_string());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        assert!(Model::from_checkpoint_string("not a checkpoint").is_err());
        let model = Model::new(ModelConfig::default()).unwrap();
        let text = model.to_checkpoint_string();
        let truncated = &text[..text.len() / 2];
        assert!(Model::from_checkpoint_string(truncated).is_err());
    }
}

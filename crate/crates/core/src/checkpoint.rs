//! Self-describing checkpoint container.
//!
//! Layout: an ASCII magic line, a little-endian u64 header length, a JSON
//! header, then the array payloads. The header lists every array as
//! (name, shape, dtype) in payload order and carries the manifest needed
//! to rebuild the pipeline: config values, vocabulary, aspect index maps,
//! tokenizer mode, and the padding lengths. Payloads are little-endian
//! 32-bit floats; save→load→save reproduces the bytes exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AspectVocab, Tokenizer, Vocab};
use crate::error::{Error, Result};
use crate::model::{Dims, Model, ModelKind};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"HLSTM-CKPT\n";
const FORMAT_VERSION: u32 = 1;
const LABELS: [&str; 3] = ["positive", "negative", "neutral"];

#[derive(Debug, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: String,
    tokenizer: String,
    word_dim: usize,
    aspect_dim: usize,
    hidden_dim: usize,
    sentence_len: usize,
    review_len: usize,
    vocab: Vec<String>,
    entities: Vec<String>,
    attributes: Vec<String>,
    labels: Vec<String>,
    config: BTreeMap<String, String>,
    arrays: Vec<ArrayInfo>,
}

/// A trained model plus everything needed to run it on new text.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub aspects: AspectVocab,
    pub tokenizer: Tokenizer,
    pub sentence_len: usize,
    pub review_len: usize,
    pub config: BTreeMap<String, String>,
}

fn tokenizer_tag(t: Tokenizer) -> &'static str {
    match t {
        Tokenizer::Simple => "simple",
        Tokenizer::Pretokenized => "pretokenized",
    }
}

fn parse_tokenizer(s: &str) -> Result<Tokenizer> {
    match s {
        "simple" => Ok(Tokenizer::Simple),
        "pretokenized" => Ok(Tokenizer::Pretokenized),
        other => Err(Error::Validation(format!(
            "unknown tokenizer '{}' in checkpoint",
            other
        ))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.model.dims();
        let named = self.model.named_params();
        let arrays: Vec<ArrayInfo> = named
            .iter()
            .map(|(name, t)| ArrayInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.kind().as_str().into(),
            tokenizer: tokenizer_tag(self.tokenizer).into(),
            word_dim: dims.word,
            aspect_dim: dims.aspect,
            hidden_dim: dims.hidden,
            sentence_len: self.sentence_len,
            review_len: self.review_len,
            vocab: self.vocab.tokens().to_vec(),
            entities: self.aspects.entities().to_vec(),
            attributes: self.aspects.attributes().to_vec(),
            labels: LABELS.iter().map(|s| s.to_string()).collect(),
            config: self.config.clone(),
            arrays,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let payload_len: usize = named.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, t) in &named {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: String| Error::Validation(msg);
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_start = MAGIC.len() + 8;
        let payload_start = header_start + header_len;
        if bytes.len() < payload_start {
            return Err(bad("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
            .map_err(|e| bad(format!("bad checkpoint header: {}", e)))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        if header.labels != LABELS {
            return Err(bad("checkpoint label set mismatch".into()));
        }
        let kind = ModelKind::parse(&header.model)?;
        let tokenizer = parse_tokenizer(&header.tokenizer)?;
        let vocab = Vocab::from_tokens(header.vocab)?;
        let aspects = AspectVocab::from_lists(header.entities, header.attributes)?;
        let dims = Dims {
            word: header.word_dim,
            aspect: header.aspect_dim,
            hidden: header.hidden_dim,
        };

        // Read payloads in the declared order.
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut offset = payload_start;
        for info in &header.arrays {
            if info.dtype != "f32" {
                return Err(bad(format!(
                    "array '{}' has unsupported dtype '{}'",
                    info.name, info.dtype
                )));
            }
            let count: usize = info.shape.iter().product();
            let end = offset + count * 4;
            if bytes.len() < end {
                return Err(bad(format!("truncated payload for array '{}'", info.name)));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in bytes[offset..end].chunks_exact(4) {
                let mut b = [0u8; 4];
                b.copy_from_slice(chunk);
                data.push(f32::from_le_bytes(b) as f64);
            }
            let tensor = Tensor::new(&info.shape, data)
                .map_err(|e| bad(format!("array '{}': {}", info.name, e)))?;
            if arrays.insert(info.name.clone(), tensor).is_some() {
                return Err(bad(format!("duplicate array '{}'", info.name)));
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after checkpoint payload".into()));
        }

        let mut model = match kind {
            ModelKind::Hierarchical => Model::Hierarchical(crate::model::ModelParams::zeros(
                dims,
                vocab.len(),
                aspects.n_entities(),
                aspects.n_attributes(),
            )),
            ModelKind::Baseline => Model::Baseline(crate::model::BaselineParams::zeros(
                dims,
                vocab.len(),
                aspects.n_entities(),
                aspects.n_attributes(),
            )),
        };
        let mut missing: Vec<String> = Vec::new();
        let mut mismatched: Vec<String> = Vec::new();
        let mut used = 0usize;
        model.visit_mut(&mut |name, t| match arrays.get(&name) {
            Some(stored) if stored.shape() == t.shape() => {
                *t = stored.clone();
                used += 1;
            }
            Some(_) => mismatched.push(name),
            None => missing.push(name),
        });
        if !missing.is_empty() || !mismatched.is_empty() || used != arrays.len() {
            return Err(bad(format!(
                "checkpoint manifest mismatch: {} missing, {} mismatched, {} unused arrays",
                missing.len(),
                mismatched.len(),
                arrays.len() - used
            )));
        }

        Ok(Checkpoint {
            model,
            vocab,
            aspects,
            tokenizer,
            sentence_len: header.sentence_len,
            review_len: header.review_len,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

//! Datasets on disk: JSONL examples plus a sidecar label map.
//!
//! Each dataset line is one JSON object with `text` (string) and `label`
//! (string); the label map assigns label name -> class index.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenSeq, Vocab};

/// One labeled text, label already resolved to a class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Label name <-> class index mapping. Indices must form 0..C-1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<LabelMap> {
        if names.len() < 2 {
            return Err(Error::Config("label map needs at least 2 classes".into()));
        }
        let mut seen = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if seen.insert(n.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate label name `{n}`")));
            }
        }
        Ok(LabelMap { names })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name_of(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(|s| s.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Reads a `{"name": index, ...}` JSON object; indices must cover
    /// 0..C-1 exactly once.
    pub fn load(path: &Path) -> Result<LabelMap> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let map: HashMap<String, usize> = serde_json::from_str(&raw)
            .map_err(|e| Error::Data(format!("{}: invalid label map: {e}", path.display())))?;
        if map.len() < 2 {
            return Err(Error::Config(format!(
                "{}: label map needs at least 2 classes",
                path.display()
            )));
        }
        let n_labels = map.len();
        let mut names = vec![None; n_labels];
        for (name, idx) in map {
            let slot = names.get_mut(idx).ok_or_else(|| {
                Error::Data(format!(
                    "label `{name}` has index {idx} outside 0..{n_labels}"
                ))
            })?;
            if slot.replace(name).is_some() {
                return Err(Error::Data(format!("label index {idx} assigned twice")));
            }
        }
        LabelMap::new(
            names
                .into_iter()
                .map(|n| n.expect("all slots filled"))
                .collect(),
        )
    }

    /// Serializes back to the `{"name": index}` object with stable ordering.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("{\n");
        for (i, name) in self.names.iter().enumerate() {
            let encoded = serde_json::to_string(name).expect("string serializes");
            out.push_str(&format!("  {encoded}: {i}"));
            out.push_str(if i + 1 < self.names.len() {
                ",\n"
            } else {
                "\n"
            });
        }
        out.push_str("}\n");
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    text: String,
    label: String,
}

/// Loads a JSONL dataset, resolving label names through the map. Malformed
/// lines and unknown labels are reported with their line number.
pub fn load_dataset(path: &Path, labels: &LabelMap) -> Result<Dataset> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut examples = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawExample = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        let label = labels.index_of(&rec.label).ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: unknown label `{}`",
                path.display(),
                lineno + 1,
                rec.label
            ))
        })?;
        examples.push(Example {
            text: rec.text,
            label,
        });
    }
    Ok(Dataset { examples })
}

/// Writes a dataset as JSONL with label names from the map.
pub fn save_dataset(path: &Path, dataset: &Dataset, labels: &LabelMap) -> Result<()> {
    let mut out = String::new();
    for ex in &dataset.examples {
        let name = labels
            .name_of(ex.label)
            .ok_or_else(|| Error::Data(format!("label index {} outside label map", ex.label)))?;
        let rec = RawExample {
            text: ex.text.clone(),
            label: name.to_string(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A dataset with texts already encoded to token sequences.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub items: Vec<(TokenSeq, usize)>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn encode_dataset(vocab: &Vocab, dataset: &Dataset, max_len: usize) -> EncodedDataset {
    EncodedDataset {
        items: dataset
            .examples
            .iter()
            .map(|ex| (vocab.encode(&ex.text, max_len), ex.label))
            .collect(),
    }
}

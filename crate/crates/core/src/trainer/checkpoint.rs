//! Self-describing binary checkpoint format.
//!
//! Layout: magic `ADVC`, version u32, a length-prefixed UTF-8 JSON metadata
//! blob (model config, vocabulary characters, class names), then a tensor
//! count followed by named tensors. Each tensor is `name_len u32, name,
//! ndim u32, dims u32..., data` with row-major little-endian 32-bit floats.
//! All integers are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::vocab::Vocab;
use crate::Float;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    vocab: String,
    class_names: Vec<String>,
}

/// Writes the model, vocabulary and class names to `path`.
pub fn save_checkpoint(model: &Model, vocab: &Vocab, labels: &LabelMap, path: &Path) -> Result<()> {
    if model.vocab_size != vocab.size() {
        return Err(Error::Data(format!(
            "model embeds {} ids but vocab has {}",
            model.vocab_size,
            vocab.size()
        )));
    }
    if model.config.classes != labels.num_classes() {
        return Err(Error::Data(format!(
            "model has {} classes but label map has {}",
            model.config.classes,
            labels.num_classes()
        )));
    }
    let meta = Metadata {
        config: model.config.clone(),
        vocab: vocab.chars().iter().collect(),
        class_names: labels.names().to_vec(),
    };
    let meta_bytes = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);

    let mut tensors: Vec<(String, Vec<usize>, Vec<Float>)> = Vec::new();
    model.params.visit(|name, t| {
        tensors.push((name, t.shape().to_vec(), t.iter().copied().collect()));
    });
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &x in data {
            #[allow(clippy::unnecessary_cast)] // Float -> f32 is a real cast in the f64 build
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated);
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint back. The stored tensors must exactly match the shapes
/// implied by the header config, otherwise the offending tensor is named in
/// the error.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocab, LabelMap)> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMagic { found: magic });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u64()? as usize;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Data(format!("invalid checkpoint metadata: {e}")))?;
    let vocab = Vocab::from_chars(meta.vocab.chars().collect());
    let labels = LabelMap::new(meta.class_names)?;
    if meta.config.classes != labels.num_classes() {
        return Err(Error::Data(format!(
            "config says {} classes but {} class names stored",
            meta.config.classes,
            labels.num_classes()
        )));
    }

    let count = r.u32()? as usize;
    let mut stored: HashMap<String, (Vec<usize>, Vec<Float>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Data(format!("invalid tensor name: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<Float> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect();
        if stored.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Data(format!(
                "duplicate tensor `{name}` in checkpoint"
            )));
        }
    }

    // Build a model with the right shapes and fill every tensor by name.
    let mut model = Model::init(meta.config, vocab.size())?;
    let mut missing = Vec::new();
    let mut shape_err: Option<Error> = None;
    model.params.visit_mut(|name, mut t| {
        if shape_err.is_some() {
            return;
        }
        match stored.remove(&name) {
            None => missing.push(name),
            Some((shape, data)) => {
                if shape != t.shape() {
                    shape_err = Some(Error::CheckpointShape {
                        tensor: name,
                        expected: t.shape().to_vec(),
                        found: shape,
                    });
                    return;
                }
                for (dst, src) in t.iter_mut().zip(data) {
                    *dst = src;
                }
            }
        }
    });
    if let Some(err) = shape_err {
        return Err(err);
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint missing tensors: {missing:?}"
        )));
    }
    if !stored.is_empty() {
        let mut extra: Vec<String> = stored.into_keys().collect();
        extra.sort();
        return Err(Error::Data(format!(
            "checkpoint has unknown tensors: {extra:?}"
        )));
    }
    Ok((model, vocab, labels))
}

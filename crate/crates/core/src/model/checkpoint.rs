//! Checkpoint container: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header (config, vocabulary digest, tensor names and shapes), then
//! every tensor as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{ModelConfig, ModelState};

const MAGIC: &[u8; 8] = b"RDETCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_digest: String,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: model plus the digest of the vocabulary it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub vocab_digest: String,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &ModelState, vocab_digest: &str) -> Result<()> {
    let p = model.params();
    let header = Header {
        config: model.config().clone(),
        vocab_digest: vocab_digest.to_string(),
        tensors: p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(n, t)| TensorEntry { name: n.clone(), rows: t.rows, cols: t.cols })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(8 * p.num_scalars());
    for t in p.tensors() {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut word = [0u8; 8];
    for e in header.tensors {
        let mut data = Vec::with_capacity(e.rows * e.cols);
        for _ in 0..e.rows * e.cols {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        tensors.push((e.name, Matrix::from_vec(e.rows, e.cols, data)));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Parse("trailing bytes after checkpoint tensors".into()));
    }
    Ok(Checkpoint { model: ModelState::from_parts(header.config, tensors)?, vocab_digest: header.vocab_digest })
}

pub fn save_checkpoint(path: &Path, model: &ModelState, vocab_digest: &str) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, model, vocab_digest)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{context_for, decoder_logits, init_parameters, ImageTensor};

    #[test]
    fn round_trip_reproduces_outputs_bit_exactly() {
        let cfg = ModelConfig {
            hidden_dim: 8,
            num_heads: 2,
            image_layers: 1,
            text_layers: 1,
            fusion_layers: 1,
            decoder_layers: 1,
            ffn_mult: 2,
            image_side: 8,
            patch_size: 4,
            vocab_size: 20,
            num_position_tokens: 8,
            max_input_len: 10,
            max_target_len: 10,
            seed: 9,
        };
        let m = init_parameters(&cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, "abc").unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.vocab_digest, "abc");
        assert_eq!(back.model, m);
        let img = ImageTensor::filled(8, 0.4);
        let ids = [0, 7, 1, 12, 13, 14, 15, 2];
        let a = decoder_logits(&context_for(&img, &ids, &m).unwrap(), &[8, 3], &m).unwrap();
        let b = decoder_logits(&context_for(&img, &ids, &back.model).unwrap(), &[8, 3], &back.model).unwrap();
        assert_eq!(a, b);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        buf.push(0);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}

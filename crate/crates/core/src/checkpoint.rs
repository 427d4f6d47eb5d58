//! Binary model files.
//!
//! Layout: `CNMT`, format version (u32 LE), header length (u64 LE), a JSON
//! header with the model configuration, both vocabularies and the ordered
//! parameter names and shapes, then every parameter as f32 LE in header
//! order. Values are stored at f32 precision, so a loaded model equals the
//! saved one up to f32 rounding and re-saving it reproduces the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, SPECIALS};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2Seq};

pub const MAGIC: &[u8; 4] = b"CNMT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// A model with the vocabularies it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_vocab(v: &Vocabulary, side: &str) -> Result<()> {
    let specials_ok = SPECIALS.iter().enumerate().all(|(i, s)| i < v.len() && v.token(i) == *s);
    let unique = (0..v.len()).all(|i| v.id(v.token(i)) == i);
    if !specials_ok || !unique {
        return Err(bad(format!("{side} vocabulary is not a valid token/id bijection")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: Seq2Seq, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Result<Self> {
        if model.src_vocab != src_vocab.len() || model.tgt_vocab != tgt_vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary sizes {}/{} do not match {}/{}",
                model.src_vocab,
                model.tgt_vocab,
                src_vocab.len(),
                tgt_vocab.len()
            )));
        }
        Ok(Self {
            model,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params.iter() {
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing CNMT magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        if header_len > body.len() as u64 {
            return Err(bad("header length exceeds file size"));
        }
        let (json, mut blobs) = body.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        header.config.encoder.validate()?;
        header.config.train.validate()?;
        check_vocab(&header.src_vocab, "source")?;
        check_vocab(&header.tgt_vocab, "target")?;

        let mut model = Seq2Seq::new(header.config, header.src_vocab.len(), header.tgt_vocab.len(), 0)?;
        if header.params.len() != model.params.len() {
            return Err(bad(format!(
                "{} parameters listed, configuration defines {}",
                header.params.len(),
                model.params.len()
            )));
        }
        for (entry, p) in header.params.iter().zip(model.params.iter_mut()) {
            if entry.name != p.name || entry.shape != p.value.shape() {
                return Err(bad(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            if blobs.len() < 4 * n {
                return Err(bad(format!("truncated data for {}", p.name)));
            }
            let (mine, rest) = blobs.split_at(4 * n);
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(mine.chunks_exact(4)) {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value in {}", p.name)));
                }
                *dst = v as f64;
            }
            blobs = rest;
        }
        if !blobs.is_empty() {
            return Err(bad(format!("{} trailing bytes", blobs.len())));
        }
        Ok(Self {
            model,
            src_vocab: header.src_vocab,
            tgt_vocab: header.tgt_vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, VocabPolicy};
    use crate::decoder::DecoderConfig;
    use crate::encoders::{EncoderConfig, EncoderKind};

    fn sample(kind: EncoderKind) -> Checkpoint {
        let sents: Vec<Vec<String>> = vec!["a b c a".split(' ').map(String::from).collect()];
        let src = build_vocab(&sents, VocabPolicy::MinCount(1)).unwrap();
        let tgt = build_vocab(&[vec!["x", "y"]], VocabPolicy::MinCount(1)).unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                kind,
                embed_dim: 4,
                hidden_a: 6,
                hidden_c: 5,
                lstm_hidden: 3,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig { layers: 2, hidden: 5 },
            ..ModelConfig::default()
        };
        let model = Seq2Seq::new(cfg, src.len(), tgt.len(), 4).unwrap();
        Checkpoint::new(model, src, tgt).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for kind in [EncoderKind::Pooling, EncoderKind::Conv, EncoderKind::BiLstm, EncoderKind::UniLstm] {
            let ck = sample(kind);
            let bytes = ck.to_bytes();
            let loaded = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(loaded.to_bytes(), bytes);
            assert_eq!(loaded.model.config, ck.model.config);
            assert_eq!(loaded.src_vocab, ck.src_vocab);
            for (a, b) in loaded.model.params.iter().zip(ck.model.params.iter()) {
                for (x, y) in a.value.data().iter().zip(b.value.data()) {
                    assert_eq!(*x, *y as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = sample(EncoderKind::Conv).to_bytes();
        assert_eq!(&bytes[..4], b"CNMT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let scalars = sample(EncoderKind::Conv).model.params.num_scalars();
        assert_eq!(bytes.len(), 16 + header_len + 4 * scalars);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample(EncoderKind::Pooling).to_bytes();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        let truncated = &bytes[..bytes.len() - 3];
        let mut trailing = bytes.clone();
        trailing.push(0);
        let mut huge_header = bytes.clone();
        huge_header[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        for broken in [&wrong_magic[..], &wrong_version, truncated, &trailing, &huge_header, &bytes[..10]] {
            assert!(matches!(Checkpoint::from_bytes(broken), Err(Error::Checkpoint(_))));
        }
    }

    #[test]
    fn mismatched_vocabulary_is_rejected() {
        let ck = sample(EncoderKind::Pooling);
        assert!(Checkpoint::new(ck.model.clone(), ck.tgt_vocab.clone(), ck.tgt_vocab.clone()).is_err());
    }
}

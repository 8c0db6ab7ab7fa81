//! Binary model checkpoints.
//!
//! The format is a fixed little-endian layout so an implementation in any
//! language can read it byte for byte:
//!
//! ```text
//! magic      8 bytes   "PROTOREL"
//! version    u8        currently 1
//! config     u32 len, then UTF-8 canonical config text
//! vocab      u32 len, then UTF-8 JSON {"mode": "word"|"char", "tokens": [..]}
//! blocks     u32 count, then per block:
//!              name  u16 len, UTF-8 bytes
//!              ndim  u8
//!              dims  ndim x u32
//!              data  product(dims) x f64, raw IEEE-754 bits
//! checksum   32 bytes  SHA-256 over everything before it
//! ```
//!
//! Floats are persisted as raw bit patterns, so a save/load round trip is
//! bitwise lossless by construction and the checksum pins the whole file.

use std::io::{Read, Write};
use std::path::Path;

use protorel::classifier::ClassifierParams;
use protorel::data::{Vocab, VocabMode};
use protorel::encoder::EncoderParams;
use protorel::trainer::{ModelParams, TrainConfig};
use protorel::Tensor;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config;

pub const MAGIC: &[u8; 8] = b"PROTOREL";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u8 },
    #[error("corrupt checkpoint: {reason}")]
    Corrupt { reason: String },
}

/// An in-memory checkpoint: the effective config text, the vocabulary, and
/// every named parameter tensor in serialization order.
#[derive(Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub vocab: Vocab,
    pub blocks: Vec<(String, Tensor)>,
}

#[derive(Deserialize)]
struct VocabDump {
    mode: String,
    tokens: Vec<String>,
}

impl Checkpoint {
    pub fn from_model(cfg: &TrainConfig, vocab: &Vocab, params: &ModelParams) -> Checkpoint {
        Checkpoint {
            config_text: config::render(cfg),
            vocab: vocab.clone(),
            blocks: params
                .named()
                .into_iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);

        let cfg_bytes = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg_bytes);

        let vocab_json = serde_json::json!({
            "mode": self.vocab.mode().to_string(),
            "tokens": self.vocab.stored_tokens(),
        })
        .to_string();
        out.extend_from_slice(&(vocab_json.len() as u32).to_le_bytes());
        out.extend_from_slice(vocab_json.as_bytes());

        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, tensor) in &self.blocks {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(tensor.shape().len() as u8);
            for &dim in tensor.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let corrupt = |reason: &str| CheckpointError::Corrupt {
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 1 + 32 {
            return Err(corrupt("file shorter than the fixed framing"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != checksum {
            return Err(corrupt("checksum mismatch"));
        }

        let mut cursor = Cursor { bytes: body, at: 0 };
        if cursor.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = cursor.u8()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }

        let cfg_len = cursor.u32()? as usize;
        let config_text = String::from_utf8(cursor.take(cfg_len)?.to_vec())
            .map_err(|_| corrupt("config text is not UTF-8"))?;

        let vocab_len = cursor.u32()? as usize;
        let dump: VocabDump = serde_json::from_slice(cursor.take(vocab_len)?)
            .map_err(|e| corrupt(&format!("vocabulary dump does not parse: {e}")))?;
        let mode = match dump.mode.as_str() {
            "word" => VocabMode::Word,
            "char" => VocabMode::Char,
            other => return Err(corrupt(&format!("unknown vocabulary mode {other:?}"))),
        };
        let vocab = Vocab::from_parts(mode, dump.tokens)
            .map_err(|e| corrupt(&format!("vocabulary dump rejected: {e}")))?;

        let block_count = cursor.u32()? as usize;
        let mut blocks = Vec::with_capacity(block_count);
        for _ in 0..block_count {
            let name_len = cursor.u16()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|_| corrupt("block name is not UTF-8"))?;
            let ndim = cursor.u8()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(corrupt(&format!("block {name:?} has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cursor.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(
                    cursor.take(8)?.try_into().expect("8-byte slice"),
                ));
            }
            let tensor = Tensor::new(shape, data)
                .map_err(|e| corrupt(&format!("block {name:?}: {e}")))?;
            blocks.push((name, tensor));
        }
        if cursor.at != body.len() {
            return Err(corrupt("trailing bytes after the last block"));
        }

        Ok(Checkpoint {
            config_text,
            vocab,
            blocks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(&self.to_bytes()).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
        let path = path.as_ref();
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
        Checkpoint::from_bytes(&bytes)
    }

    /// The embedded configuration, reparsed from its canonical text.
    pub fn config(&self) -> Result<TrainConfig, CheckpointError> {
        let cfg = config::parse(&self.config_text, "<checkpoint>").map_err(|e| {
            CheckpointError::Corrupt {
                reason: format!("embedded config does not parse: {e}"),
            }
        })?;
        config::validated(cfg).map_err(|e| CheckpointError::Corrupt {
            reason: format!("embedded config is invalid: {e}"),
        })
    }

    fn block(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Corrupt {
                reason: format!("missing parameter block {name:?}"),
            })
    }

    /// Reassemble the full parameter set, cross-checking every block shape
    /// against the embedded config and vocabulary.
    pub fn to_model(&self) -> Result<ModelParams, CheckpointError> {
        let cfg = self.config()?;
        let shape = cfg.encoder_shape(self.vocab.len());
        let expect = |name: &str, want: &[usize]| -> Result<Tensor, CheckpointError> {
            let t = self.block(name)?;
            if t.shape() != want {
                return Err(CheckpointError::Corrupt {
                    reason: format!(
                        "block {name:?} has shape {:?}, config implies {want:?}",
                        t.shape()
                    ),
                });
            }
            Ok(t.clone())
        };
        let encoder = EncoderParams {
            word: expect("word", &[shape.vocab_size, shape.word_dim])?,
            pos_head: expect("pos_head", &[shape.pos_buckets, shape.pos_dim])?,
            pos_tail: expect("pos_tail", &[shape.pos_buckets, shape.pos_dim])?,
            filters: expect("filters", &[shape.hidden_dim, shape.window * shape.input_dim()])?,
            bias: expect("bias", &[shape.hidden_dim])?,
            shape,
        };
        let classifier = ClassifierParams {
            weight: expect("cls_weight", &[cfg.n_train, cfg.hidden_dim])?,
            bias: expect("cls_bias", &[cfg.n_train])?,
        };
        Ok(ModelParams {
            encoder,
            classifier,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt {
                reason: format!(
                    "truncated: wanted {n} bytes at offset {}, file body has {}",
                    self.at,
                    self.bytes.len()
                ),
            });
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use protorel::data::{seeded_rng, Dataset, Instance, Origin};
    use rand::Rng;

    fn tiny_vocab() -> Vocab {
        let inst = Instance {
            tokens: vec!["a".into(), "b".into(), "c".into()],
            head: (0, 1),
            tail: (2, 3),
            relation: "r".into(),
        };
        let ds = Dataset::from_instances(vec![inst], Origin::Original);
        Vocab::build(&[&ds], VocabMode::Word)
    }

    fn random_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = seeded_rng(seed);
        let mut blocks = Vec::new();
        let count = rng.random_range(1..=6usize);
        for i in 0..count {
            let rank = rng.random_range(1..=2usize);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5usize)).collect();
            let mut t = Tensor::uniform(&shape, -10.0, 10.0, &mut rng);
            // Plant hostile bit patterns: negative zero, subnormal, huge.
            if !t.data().is_empty() {
                t.data_mut()[0] = -0.0;
            }
            if t.len() > 1 {
                t.data_mut()[1] = f64::MIN_POSITIVE / 8.0;
            }
            if t.len() > 2 {
                t.data_mut()[2] = f64::MAX;
            }
            blocks.push((format!("block{i}"), t));
        }
        Checkpoint {
            config_text: config::render(&TrainConfig::default()),
            vocab: tiny_vocab(),
            blocks,
        }
    }

    fn bits(c: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<u64>)> {
        c.blocks
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.bits()))
            .collect()
    }

    #[test]
    fn byte_round_trip_is_bitwise_lossless() {
        for seed in 0..20u64 {
            let ck = random_checkpoint(seed);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(bits(&ck), bits(&back), "seed {seed}");
            assert_eq!(ck.config_text, back.config_text);
            assert_eq!(
                ck.vocab.stored_tokens(),
                back.vocab.stored_tokens()
            );
        }
    }

    #[test]
    fn file_round_trip_is_bitwise_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = random_checkpoint(7);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(bits(&ck), bits(&back));
    }

    #[test]
    fn every_flipped_byte_is_caught() {
        let ck = random_checkpoint(3);
        let bytes = ck.to_bytes();
        // Flipping any single byte must fail the checksum (or, for flips
        // inside the checksum itself, the comparison).
        let step = (bytes.len() / 40).max(1);
        for at in (0..bytes.len()).step_by(step) {
            let mut broken = bytes.clone();
            broken[at] ^= 0x40;
            let err = Checkpoint::from_bytes(&broken).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Corrupt { .. }),
                "flip at {at} gave {err:?}"
            );
        }
    }

    #[test]
    fn wrong_magic_and_version_are_distinct_errors() {
        // A wrong magic with a correct checksum must still be refused.
        let ck = random_checkpoint(1);
        let mut body = ck.to_bytes();
        body.truncate(body.len() - 32);
        body[0] = b'X';
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        assert!(matches!(
            Checkpoint::from_bytes(&body).unwrap_err(),
            CheckpointError::BadMagic
        ));

        let mut body = ck.to_bytes();
        body.truncate(body.len() - 32);
        body[8] = 9;
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        assert!(matches!(
            Checkpoint::from_bytes(&body).unwrap_err(),
            CheckpointError::UnsupportedVersion { found: 9 }
        ));
    }

    #[test]
    fn truncation_is_corruption() {
        let ck = random_checkpoint(2);
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt { .. }));
        let err = Checkpoint::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt { .. }));
    }

    #[test]
    fn model_round_trip_restores_every_parameter() {
        use protorel::encoder::EncoderParams;
        let cfg = TrainConfig {
            n_train: 3,
            max_len: 12,
            word_dim: 4,
            pos_dim: 2,
            hidden_dim: 6,
            ..TrainConfig::default()
        };
        let vocab = tiny_vocab();
        let mut rng = seeded_rng(5);
        let params = ModelParams {
            encoder: EncoderParams::init(cfg.encoder_shape(vocab.len()), &mut rng),
            classifier: ClassifierParams::zeros(cfg.n_train, cfg.hidden_dim),
        };
        let ck = Checkpoint::from_model(&cfg, &vocab, &params);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let model = back.to_model().unwrap();
        for ((n1, t1), (n2, t2)) in params.named().iter().zip(model.named().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.bits(), t2.bits());
        }
        assert_eq!(back.config().unwrap(), cfg);
    }

    #[test]
    fn shape_config_disagreement_is_corruption() {
        let cfg = TrainConfig {
            n_train: 3,
            max_len: 12,
            word_dim: 4,
            pos_dim: 2,
            hidden_dim: 6,
            ..TrainConfig::default()
        };
        let vocab = tiny_vocab();
        let mut rng = seeded_rng(5);
        let params = ModelParams {
            encoder: EncoderParams::init(cfg.encoder_shape(vocab.len()), &mut rng),
            classifier: ClassifierParams::zeros(cfg.n_train, cfg.hidden_dim),
        };
        let mut ck = Checkpoint::from_model(&cfg, &vocab, &params);
        // Claim a different hidden size in the config than the blocks have.
        let mut other = cfg.clone();
        other.hidden_dim = 7;
        ck.config_text = config::render(&other);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let err = back.to_model().unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt { .. }));
    }
}

//! Checkpoint directory: `config.json`, `params.bin`, `optim.bin` (when
//! optimizer moments are kept) and `meta.json`.
//!
//! Tensor files start with `PTNS`, a u32 version and a u64 record count.
//! Each record is a u32 name length, the UTF-8 name, a u32 rank, `rank` u64
//! dims, and the f32 little-endian payload.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainConfig;
use crate::data::DataPosition;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::mechanism::Mechanism;
use crate::model::{Model, ModelConfig, Parameters};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 4] = b"PTNS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    pub mechanism: Mechanism,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

/// Serializable ChaCha position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Validation(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub rng: RngState,
    pub data: DataPosition,
    pub tokens_seen: u64,
    pub cumulative_flops: f64,
    pub adam_t: u64,
    pub tokenizer_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: Parameters<f32>,
    pub optim: Option<AdamState<f32>>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn model(&self) -> Model<f32> {
        Model {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }
}

pub fn encode_tensors(records: &[(&str, &Matrix<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for &(name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt {
                path: self.path.into(),
                reason: format!("truncated at byte {} (wanted {n} more)", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Matrix<f32>)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    let format = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    if r.take(4)? != TENSOR_MAGIC {
        return Err(format("bad tensor-file magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format(format!("unsupported tensor-file version {version}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(format(format!(
                "{name}: rank {rank} tensors are not supported"
            )));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| format(format!("{name}: shape overflow")))?;
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| format(format!("{name}: shape overflow")))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), &ckpt.config)?;
    write(
        &dir.join("params.bin"),
        &encode_tensors(&ckpt.params.iter().collect::<Vec<_>>()),
    )?;
    let optim_path = dir.join("optim.bin");
    match &ckpt.optim {
        Some(state) => {
            let names: Vec<String> = ckpt
                .params
                .names()
                .iter()
                .flat_map(|n| [format!("m.{n}"), format!("v.{n}")])
                .collect();
            let tensors: Vec<&Matrix<f32>> = state
                .m
                .iter()
                .zip(&state.v)
                .flat_map(|(m, v)| [m, v])
                .collect();
            let records: Vec<_> = names.iter().map(String::as_str).zip(tensors).collect();
            write(&optim_path, &encode_tensors(&records))?;
        }
        None if optim_path.exists() => {
            std::fs::remove_file(&optim_path).map_err(|e| Error::io(&optim_path, e))?
        }
        None => {}
    }
    write_json(&dir.join("meta.json"), &ckpt.meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config: CheckpointConfig = read_json(&dir.join("config.json"))?;
    if config.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: dir.join("config.json"),
            reason: format!(
                "checkpoint format version {} (expected {FORMAT_VERSION})",
                config.format_version
            ),
        });
    }
    let params_path = dir.join("params.bin");
    let bytes = std::fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let params = Parameters::from_named(&config.model, decode_tensors(&bytes, &params_path)?)?;
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let optim_path = dir.join("optim.bin");
    let optim = if optim_path.exists() {
        let bytes = std::fs::read(&optim_path).map_err(|e| Error::io(&optim_path, e))?;
        let mut named = decode_tensors(&bytes, &optim_path)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut missing = Vec::new();
        for (name, p) in params.iter() {
            for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}.{name}");
                match named
                    .iter()
                    .position(|(k, t)| *k == key && t.shape() == p.shape())
                {
                    Some(i) => dst.push(named.swap_remove(i).1),
                    None => missing.push(key),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Incompatible(missing));
        }
        Some(AdamState {
            m,
            v,
            t: meta.adam_t,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        params,
        optim,
        meta,
    })
}

/// Hash of the parameter file, used to name a checkpoint in manifests.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let p = dir.join("params.bin");
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Extras;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig::new(11, 16, 1, 2, 6);
        let model = Model::<f32>::init(cfg.clone(), Extras::default(), &mut rng).unwrap();
        rng.next_u64();
        let mut optim = AdamState::new(model.params.tensors());
        optim.m[0].data_mut()[0] = 0.5;
        optim.t = 7;
        Checkpoint {
            config: CheckpointConfig {
                format_version: FORMAT_VERSION,
                model: cfg,
                mechanism: Mechanism::Vanilla,
                train: None,
            },
            params: model.params,
            optim: Some(optim),
            meta: CheckpointMeta {
                step: 7,
                rng: RngState::capture(&rng),
                data: DataPosition { epoch: 1, batch: 3 },
                tokens_seen: 100,
                cumulative_flops: 1e6,
                adam_t: 7,
                tokenizer_hash: Some("abc".into()),
            },
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        save_checkpoint(dir.path(), &ck).unwrap();
        for f in ["config.json", "params.bin", "optim.bin", "meta.json"] {
            assert!(dir.path().join(f).exists());
        }
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ck);
        let mut a = ck.meta.rng.restore().unwrap();
        let mut b = back.meta.rng.restore().unwrap();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corrupt_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        save_checkpoint(dir.path(), &ck).unwrap();
        let p = dir.path().join("params.bin");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Corrupt { .. })
        ));
        std::fs::write(&p, &bytes).unwrap();

        let mut cfg = ck.config.clone();
        cfg.model.d_model = 8;
        cfg.model.n_heads = 1;
        write_json(&dir.path().join("config.json"), &cfg).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Incompatible(list)) => assert!(list.iter().any(|s| s.starts_with("embed"))),
            other => panic!("expected incompatibility, got {other:?}"),
        }
        cfg.model = ck.config.model.clone();
        cfg.format_version = 9;
        write_json(&dir.path().join("config.json"), &cfg).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}

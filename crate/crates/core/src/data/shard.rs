//! Binary token shards: `PSHD`, u32 version, u32 vocab_size, u8 token_width,
//! u64 count, then `count` little-endian ids of `token_width` bytes.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSHD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenShard {
    pub vocab_size: u32,
    pub token_width: u8,
    pub ids: Vec<u32>,
}

pub fn token_width_for(vocab_size: u32) -> u8 {
    if vocab_size as u64 <= 1 << 16 {
        2
    } else {
        4
    }
}

impl TokenShard {
    pub fn new(ids: Vec<u32>, vocab_size: u32) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocab size {vocab_size}"
            )));
        }
        Ok(Self {
            vocab_size,
            token_width: token_width_for(vocab_size),
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let w = self.token_width as usize;
        let mut out = Vec::with_capacity(HEADER_LEN + w * self.ids.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.push(self.token_width);
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for &id in &self.ids {
            if w == 2 {
                out.extend_from_slice(&(id as u16).to_le_bytes());
            } else {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        out
    }

    /// Parse shard bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |reason: String| Error::Format {
            path: path.into(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: format!("file is {} bytes, shorter than the header", bytes.len()),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(format(format!("bad magic {:?}", &bytes[..4])));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        let vocab_size = u32_at(8);
        let token_width = bytes[12];
        if token_width != 2 && token_width != 4 {
            return Err(format(format!("token width {token_width} is not 2 or 4")));
        }
        let count = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        let want = count.checked_mul(token_width as u64);
        if want != Some(payload.len() as u64) {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: format!(
                    "header declares {count} ids of {token_width} bytes but payload is {} bytes",
                    payload.len()
                ),
            });
        }
        let ids: Vec<u32> = if token_width == 2 {
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect()
        } else {
            payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        if let Some((pos, &bad)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab_size) {
            return Err(Error::Validation(format!(
                "{}: token id {bad} at position {pos} out of range for vocab size {vocab_size}",
                path.display()
            )));
        }
        Ok(Self {
            vocab_size,
            token_width,
            ids,
        })
    }
}

pub fn write_shard(path: &Path, ids: &[u32], vocab_size: u32) -> Result<TokenShard> {
    let shard = TokenShard::new(ids.to_vec(), vocab_size)?;
    std::fs::write(path, shard.to_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(shard)
}

pub fn read_shard(path: &Path) -> Result<TokenShard> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TokenShard::from_bytes(&bytes, path)
}

/// Read a shard and check it was encoded for `vocab_size`.
pub fn read_shard_for(path: &Path, vocab_size: usize) -> Result<TokenShard> {
    let shard = read_shard(path)?;
    if shard.vocab_size as usize != vocab_size {
        return Err(Error::Validation(format!(
            "{} was encoded for vocab size {} but the model expects {vocab_size}",
            path.display(),
            shard.vocab_size
        )));
    }
    Ok(shard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::sha256_hex;
    use rand::{Rng, SeedableRng};

    #[test]
    fn small_round_trip_width_two() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        write_shard(&p, &[5, 0, 65535], 65536).unwrap();
        let s = read_shard(&p).unwrap();
        assert_eq!(s.token_width, 2);
        assert_eq!(s.ids, vec![5, 0, 65535]);
        assert_eq!(token_width_for(65537), 4);
    }

    #[test]
    fn header_and_payload_errors() {
        let p = Path::new("x.bin");
        let good = TokenShard::new(vec![1, 2, 3], 10).unwrap().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            TokenShard::from_bytes(&bad, p),
            Err(Error::Format { .. })
        ));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            TokenShard::from_bytes(&bad, p),
            Err(Error::Format { .. })
        ));
        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            TokenShard::from_bytes(truncated, p),
            Err(Error::Corrupt { .. })
        ));
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            TokenShard::from_bytes(&bad, p),
            Err(Error::Validation(_))
        ));
        assert!(TokenShard::new(vec![10], 10).is_err());
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        write_shard(&p, &[1, 2], 300).unwrap();
        assert!(read_shard_for(&p, 300).is_ok());
        assert!(matches!(read_shard_for(&p, 512), Err(Error::Validation(_))));
    }

    #[test]
    fn million_ids_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<u32> = (0..1_000_000)
            .map(|_| rng.random_range(0..70_000))
            .collect();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        write_shard(&a, &ids, 70_000).unwrap();
        let back = read_shard(&a).unwrap();
        assert_eq!(back.token_width, 4);
        write_shard(&b, &back.ids, back.vocab_size).unwrap();
        let ha = sha256_hex(&std::fs::read(&a).unwrap());
        let hb = sha256_hex(&std::fs::read(&b).unwrap());
        assert_eq!(ha, hb);
        assert_eq!(back.ids, ids);
    }
}

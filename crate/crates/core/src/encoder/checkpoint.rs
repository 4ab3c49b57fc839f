//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `TRKCKPT1`, version `u32`, spec hash `u64`,
//! spec JSON length `u32` and bytes, embed dim `u32`, step `u64`, RNG state
//! (56 bytes), parameter count `u64`, parameters as `f32`, then a CRC32 of
//! everything before it.

use std::path::Path;

use super::{EncoderParams, LayerSpec};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRKCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub step: u64,
    pub rng: RngState,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec_json = serde_json::to_vec(self.params.spec()).expect("layer spec serializes");
        let values = self.params.values();
        let mut out = Vec::with_capacity(128 + spec_json.len() + 4 * values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.params.spec().hash().to_le_bytes());
        out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec_json);
        out.extend_from_slice(&(self.params.embed_dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.to_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint image; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let mut r = Reader {
            buf: &bytes[..body_len],
            pos: 8,
        };
        let parse = |r: &mut Reader| -> std::result::Result<_, String> {
            let version = r.u32()?;
            if version != CHECKPOINT_VERSION {
                return Err(format!(
                    "unsupported version {version} (expected {CHECKPOINT_VERSION})"
                ));
            }
            let hash = r.u64()?;
            let spec_len = r.u32()? as usize;
            let spec: LayerSpec = serde_json::from_slice(r.take(spec_len)?)
                .map_err(|e| format!("layer spec: {e}"))?;
            if spec.hash() != hash {
                return Err("stored spec hash does not match stored spec".into());
            }
            let embed_dim = r.u32()? as usize;
            let step = r.u64()?;
            let rng = RngState::from_bytes(r.take(RngState::ENCODED_LEN)?.try_into().unwrap());
            let count = r.u64()? as usize;
            if count.checked_mul(4) != Some(r.buf.len() - r.pos) {
                return Err(format!(
                    "parameter count {count} disagrees with file length"
                ));
            }
            let values = r
                .take(4 * count)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let params = EncoderParams::from_values(spec, values).map_err(|e| e.to_string())?;
            if params.embed_dim() != embed_dim {
                return Err(format!("embed dim {embed_dim} disagrees with spec"));
            }
            Ok(Checkpoint { params, step, rng })
        };
        parse(&mut r).map_err(bad)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and requires the stored network to match `spec`.
    pub fn load_expecting(path: &Path, spec: &LayerSpec) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let (expected, found) = (spec.hash(), ckpt.params.spec().hash());
        if expected != found {
            return Err(Error::SpecMismatch { expected, found });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, Layer};
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn sample() -> Checkpoint {
        let mut r = rng::seeded(5);
        let _: u64 = r.random();
        Checkpoint {
            params: init_params(&LayerSpec::default(), 9).unwrap(),
            step: 1234,
            rng: RngState::capture(&r),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn corrupt_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"TRKGRID v1\n", Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"", Path::new("x")).is_err());
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn spec_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        let other = LayerSpec {
            input_side: 32,
            layers: vec![Layer::FullyConnected { out_dim: 8 }],
        };
        assert!(matches!(
            Checkpoint::load_expecting(&path, &other),
            Err(Error::SpecMismatch { .. })
        ));
        assert!(Checkpoint::load_expecting(&path, &LayerSpec::default()).is_ok());
    }
}

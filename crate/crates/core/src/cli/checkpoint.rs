//! Single-file checkpoint: magic `MTLC`, u16 version, u32-length-prefixed
//! configuration text, then per tensor a u16-length-prefixed name, u8 rank,
//! u32 dims and an f32 payload, all little-endian, closed by a CRC32 of
//! every preceding byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::encoder::ModelParams;
use crate::error::{MtlError, Result};
use crate::io::{read_bytes, write_atomic};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"MTLC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: ModelParams,
}

impl Checkpoint {
    /// Parameters are stored as f32; values are rounded on the way out.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        let cfg_len = u32::try_from(cfg.len()).map_err(|_| MtlError::contract("configuration text too long"))?;
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(cfg);
        for (name, t) in self.params.tensors() {
            let n =
                u16::try_from(name.len()).map_err(|_| MtlError::contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).map_err(|_| MtlError::contract("tensor rank above 255"))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| MtlError::contract("tensor dimension above u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| MtlError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(corrupt(format!(
                "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        let mut r = Reader {
            buf: body,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic bytes".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| corrupt("configuration text is not UTF-8".into()))?;
        let mut tensors = BTreeMap::new();
        while r.pos < body.len() {
            let n = r.u16()? as usize;
            let name =
                String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| corrupt("tensor size overflow".into()))?,
            )?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }
        Ok(Checkpoint {
            config_text,
            params: ModelParams::from_map(tensors),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, path)
    }

    /// Errors unless the stored tensors are exactly the expected set.
    pub fn check_params(&self, shapes: &[(String, Vec<usize>)], path: &Path) -> Result<()> {
        self.params.check_shapes(shapes).map_err(|e| MtlError::Corrupt {
            path: PathBuf::from(path),
            reason: format!("tensors disagree with the stored configuration: {e}"),
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MtlError::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ModelParams::default();
        p.insert("a.w", Tensor::from_rows(&[vec![1.5, -2.0], vec![0.1, 3.0]]).unwrap());
        p.insert("a.b", Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        Checkpoint {
            config_text: "train.epochs = 1\n".into(),
            params: p.round_to_f32(),
        }
    }

    #[test]
    fn round_trip_exact_for_f32_values() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_and_flips_detected() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            let err = Checkpoint::decode(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(err, MtlError::Corrupt { .. }));
        }
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(matches!(
                Checkpoint::decode(&b, Path::new("x")),
                Err(MtlError::Corrupt { .. })
            ));
        }
    }

    #[test]
    fn tensor_set_checked() {
        let c = sample();
        let ok = vec![("a.b".to_string(), vec![3]), ("a.w".to_string(), vec![2, 2])];
        assert!(c.check_params(&ok, Path::new("x")).is_ok());
        let missing = vec![("a.b".to_string(), vec![3])];
        assert!(matches!(
            c.check_params(&missing, Path::new("x")),
            Err(MtlError::Corrupt { .. })
        ));
    }
}

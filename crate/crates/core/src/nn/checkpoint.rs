//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes "MBCKPT1\0"
//! u32      tensor count
//! per tensor:
//!   u16    name length, then UTF-8 name
//!   u8     rank, then rank x u32 dims
//!   f32    raw little-endian values
//! u32      config blob length, then UTF-8 JSON config
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MBCKPT1\0";

/// Ordered name -> tensor pairs plus a JSON config blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
    pub config_json: String,
}

impl Checkpoint {
    pub fn new(config_json: String) -> Self {
        Checkpoint {
            entries: Vec::new(),
            config_json,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("checkpoint missing tensor {name:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::invalid("tensor name too long"));
            }
            if tensor.rank() > u8::MAX as usize {
                return Err(Error::invalid("tensor rank too large"));
            }
            out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&[tensor.rank() as u8])?;
            for &d in tensor.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        let blob = self.config_json.as_bytes();
        out.write_all(&(blob.len() as u32).to_le_bytes())?;
        out.write_all(blob)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut cur = Cursor {
            inner: BufReader::new(File::open(path)?),
            offset: 0,
        };
        let magic = cur.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:02x?}")));
        }
        let count = cur.u32_le()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let at = cur.offset;
            let name_len = cur.u16_le()? as usize;
            let name = String::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32_le()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = cur.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push((name, Tensor::from_vec(shape, data)?));
        }
        let blob_at = cur.offset;
        let blob_len = cur.u32_le()? as usize;
        let config_json = String::from_utf8(cur.take(blob_len)?)
            .map_err(|_| Error::format(blob_at, "config blob is not UTF-8"))?;
        Ok(Checkpoint {
            entries,
            config_json,
        })
    }
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            let got = self.inner.read(&mut buf[filled..])?;
            if got == 0 {
                return Err(Error::format(
                    self.offset + filled as u64,
                    "unexpected end of stream",
                ));
            }
            filled += got;
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u16_le(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("mapbert-checkpoint-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip() {
        let mut rng = Rng::new(8);
        let mut ckpt = Checkpoint::new("{\"bits\":6}".to_string());
        ckpt.push(
            "enc.w",
            Tensor::from_vec(vec![2, 3], (0..6).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
                .unwrap(),
        );
        ckpt.push("enc.b", Tensor::zeros(vec![3]));
        let path = tmp("roundtrip.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.get("enc.b").unwrap().shape(), &[3]);
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn truncation_reports_offset() {
        let mut ckpt = Checkpoint::new("{}".to_string());
        ckpt.push("t", Tensor::full(vec![4], 1.0));
        let path = tmp("trunc.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("unexpected end of stream"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let path = tmp("magic.ckpt");
        std::fs::write(&path, b"WRONGMAGIC").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}

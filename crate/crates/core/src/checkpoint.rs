//! Single-file parameter container shared by both models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "XLCK" | u32 version | u32 len + component tag | u64 len + JSON header
//! u64 parameter count
//! per parameter: u32 len + name | u32 ndim | u64 dims.. | f64 values..
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    /// JSON text: the model config plus the run's config echo.
    pub header: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.params.num_values() * 8);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.component.len() as u32).to_le_bytes());
        b.extend_from_slice(self.component.as_bytes());
        b.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        b.extend_from_slice(self.header.as_bytes());
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let n = r.u32()? as usize;
        let component = r.string(n)?;
        let n = r.u64()? as usize;
        let header = r.string(n)?;
        let count = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            params.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            component,
            header,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> std::result::Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

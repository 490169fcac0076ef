//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "TGRPOVF\0"
//! 8       4   u32     format version (1)
//! 12      4   u32     L = number of layer sizes (input, hidden..., output)
//! 16      4·L u32     layer sizes
//! ..      4   u32     data_dim
//! ..      4   u32     num_conditions
//! ..      8   u64     P = parameter count
//! ..      8·P f64     parameters, layer by layer, weights before biases
//! ```

use std::path::Path;

use super::VelocityField;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TGRPOVF\0";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl VelocityField {
    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.layer_sizes();
        let mut out = Vec::with_capacity(40 + 4 * sizes.len() + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for &s in sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend_from_slice(
            &(crate::flow_model::VelocityModel::data_dim(self) as u32).to_le_bytes(),
        );
        out.extend_from_slice(&(self.num_conditions() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_params() as u64).to_le_bytes());
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_sizes = r.u32()? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::Checkpoint(format!(
                "implausible layer count {n_sizes}"
            )));
        }
        let sizes = (0..n_sizes)
            .map(|_| r.u32().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let data_dim = r.u32()? as usize;
        let num_conditions = r.u32()? as usize;
        let n_params = r.u64()? as usize;
        let raw = r.take(
            n_params
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
        )?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        VelocityField::from_parts(sizes, data_dim, num_conditions, params)
            .ok_or_else(|| Error::Checkpoint("header inconsistent with parameter count".into()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = VelocityField::new(2, 2, &[64, 64], &mut rng::stream(9, &[]));
        let back = VelocityField::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);
        assert!(m
            .params()
            .iter()
            .zip(back.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_layout() {
        let m = VelocityField::zeros(2, 2, &[3]);
        let b = m.to_bytes();
        assert_eq!(&b[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 3);
        let sizes: Vec<u32> = b[16..28]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(sizes, vec![5, 3, 2]);
        assert_eq!(b.len(), 28 + 8 + 8 + 8 * m.num_params());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = VelocityField::zeros(2, 1, &[4]);
        let mut b = m.to_bytes();
        assert!(VelocityField::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(VelocityField::from_bytes(&b).is_err());
        let mut extra = m.to_bytes();
        extra.push(0);
        assert!(VelocityField::from_bytes(&extra).is_err());
    }
}

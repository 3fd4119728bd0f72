//! Named parameter storage and its binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "STVS"
//! version      u32      1
//! tensor_count u32
//! per tensor:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rank       u8
//!   dims       rank x u32
//!   values     product(dims) x f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STVS";
pub const VERSION: u32 = 1;

/// Ordered map of parameter name to tensor. Names are unique and non-empty;
/// every value is finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Invalid("weight name must be non-empty".into()));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Invalid(format!(
                "weight name of {} bytes is too long",
                name.len()
            )));
        }
        if t.rank() > u8::MAX as usize || t.dims().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Invalid(format!(
                "`{name}` dims {:?} do not fit the format",
                t.dims()
            )));
        }
        if !t.all_finite() {
            return Err(Error::Invalid(format!("`{name}` holds non-finite values")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Like [`get`](Self::get) but a missing name is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_parameters() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return format_err(0, format!("bad magic {magic:?}, expected \"STVS\""));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return format_err(at as u64, format!("unsupported version {version}"));
        }
        let count = r.u32("tensor count")?;
        let mut store = WeightStore::new();
        for k in 0..count {
            let entry = r.pos;
            let name_len = r.u16("name length")? as usize;
            if name_len == 0 {
                return format_err(entry as u64, format!("tensor {k} has an empty name"));
            }
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| Error::Format {
                    offset: name_at as u64,
                    msg: format!("name is not UTF-8: {e}"),
                })?
                .to_string();
            let rank_at = r.pos;
            let rank = r.u8("rank")? as usize;
            if rank == 0 {
                return format_err(rank_at as u64, format!("`{name}` has rank 0"));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d_at = r.pos;
                let d = r.u32("dim")? as usize;
                if d == 0 {
                    return format_err(d_at as u64, format!("`{name}` has a zero-sized axis"));
                }
                dims.push(d);
            }
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = match n.filter(|n| n.checked_mul(4).is_some()) {
                Some(n) => n,
                None => {
                    return format_err(rank_at as u64, format!("`{name}` dims {dims:?} overflow"))
                }
            };
            let values_at = r.pos;
            let raw = r.take(n * 4, "tensor values")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return format_err(
                    (values_at + 4 * i) as u64,
                    format!("`{name}` holds a non-finite value"),
                );
            }
            if store.tensors.contains_key(&name) {
                return format_err(entry as u64, format!("duplicate tensor name `{name}`"));
            }
            store.tensors.insert(name, Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return format_err(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            );
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => format_err(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn sample_store() -> WeightStore {
        let mut rng = SeededRng::new(9);
        let mut s = WeightStore::new();
        s.insert(
            "encoder.s1.conv1.kernel",
            rng.uniform_tensor(&[2, 3, 3, 3], 1.0),
        )
        .unwrap();
        s.insert("encoder.s1.conv1.bias", rng.uniform_tensor(&[2], 1.0))
            .unwrap();
        s
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.stvs");
        let s = sample_store();
        save_weights(&s, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, s);
        for (name, t) in s.iter() {
            let b = back.get(name).unwrap();
            assert!(t
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn empty_store_is_header_only() {
        let bytes = WeightStore::new().to_bytes();
        assert_eq!(bytes, b"STVS\x01\x00\x00\x00\x00\x00\x00\x00");
        assert!(WeightStore::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn exact_layout_of_one_tensor() {
        let mut s = WeightStore::new();
        s.insert("ab", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let b = s.to_bytes();
        let mut want = b"STVS".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn corrupted_inputs_report_offsets() {
        let good = sample_store().to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(WeightStore::from_bytes(&bad).unwrap_err()), 0);

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(offset_of(WeightStore::from_bytes(&bad).unwrap_err()), 4);

        let cut = good.len() - 3;
        let off = offset_of(WeightStore::from_bytes(&good[..cut]).unwrap_err());
        assert!(off > 12 && off < cut as u64);

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(
            offset_of(WeightStore::from_bytes(&bad).unwrap_err()),
            good.len() as u64
        );

        assert_eq!(offset_of(WeightStore::from_bytes(b"ST").unwrap_err()), 0);
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = WeightStore::new();
        assert!(s
            .insert("x", Tensor::new(vec![1], vec![f32::NAN]).unwrap())
            .is_err());
        assert!(s.insert("", Tensor::scalar(1.0)).is_err());

        let mut bytes = WeightStore::new().to_bytes();
        bytes[8] = 1;
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(1);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        assert_eq!(offset_of(WeightStore::from_bytes(&bytes).unwrap_err()), 20);
    }

    #[test]
    fn missing_weight_error() {
        assert!(matches!(
            sample_store().require("nope"),
            Err(Error::MissingWeight(_))
        ));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(entries in prop::collection::btree_map("[a-z.]{1,12}", prop::collection::vec(-1e6f32..1e6, 1..20), 0..8)) {
            let mut s = WeightStore::new();
            for (k, v) in entries {
                s.insert(k, Tensor::new(vec![v.len()], v).unwrap()).unwrap();
            }
            prop_assert_eq!(WeightStore::from_bytes(&s.to_bytes()).unwrap(), s);
        }
    }
}

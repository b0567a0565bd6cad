//! Flat self-describing weight container, magic `MLAW1`.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   5 bytes  b"MLAW1"
//! count   u32      number of entries
//! entry:
//!   kind  u8       0 = parameter, 1 = buffer
//!   nlen  u16      name length in bytes
//!   name  [u8]     UTF-8 name
//!   dtype u8       1 = f32, 2 = f64
//!   ndim  u8
//!   dims  ndim x u32
//!   data  dims-product x dtype-width raw little-endian scalars
//! ```
//!
//! Entries are written parameters-first, each group in name order, so a
//! store serializes identically every time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{format_err, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MLAW1";

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

fn write_entry<T: Scalar>(out: &mut Vec<u8>, kind: u8, name: &str, tensor: &Tensor<T>) {
    out.push(kind);
    let name_bytes = name.as_bytes();
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(T::DTYPE.code());
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
}

pub fn save_weights<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    let count = store.param_names().count() + store.buffer_names().count();
    bytes.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, p) in store.iter_params() {
        write_entry(&mut bytes, KIND_PARAM, name, &p.value);
    }
    for (name, b) in store.iter_buffers() {
        write_entry(&mut bytes, KIND_BUFFER, name, b);
    }
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err!(
                "weight file truncated while reading {what} at offset {}",
                self.pos
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
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

struct RawEntry {
    kind: u8,
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_entries(bytes: &[u8]) -> Result<Vec<RawEntry>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(format_err!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        ));
    }
    let count = cur.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let kind = cur.u8("entry kind")?;
        if kind != KIND_PARAM && kind != KIND_BUFFER {
            return Err(format_err!("entry {i}: unknown kind {kind}"));
        }
        let nlen = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(nlen, "name")?)
            .map_err(|_| format_err!("entry {i}: name is not UTF-8"))?
            .to_string();
        let dtype = DType::from_code(cur.u8("dtype")?)
            .ok_or_else(|| format_err!("entry '{name}': unknown dtype code"))?;
        let ndim = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * dtype.byte_width(), "tensor data")?;
        let values: Vec<f64> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::read_le(c) as f64)
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        entries.push(RawEntry {
            kind,
            name,
            shape,
            values,
        });
    }
    if cur.pos != bytes.len() {
        return Err(format_err!(
            "{} trailing bytes after last entry",
            bytes.len() - cur.pos
        ));
    }
    Ok(entries)
}

/// Load weights into a store whose parameter set and shapes are already
/// fixed by the model configuration. The first mismatching entry is named.
pub fn load_weights<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let entries = read_entries(&bytes)?;
    for entry in &entries {
        let expected_shape = match entry.kind {
            KIND_PARAM => store
                .param(&entry.name)
                .map_err(|_| format_err!("entry '{}': not a parameter of this model", entry.name))?
                .value
                .shape()
                .to_vec(),
            _ => store
                .buffer(&entry.name)
                .map_err(|_| format_err!("entry '{}': not a buffer of this model", entry.name))?
                .shape()
                .to_vec(),
        };
        if expected_shape != entry.shape {
            return Err(format_err!(
                "entry '{}': file shape {:?} does not match model shape {:?}",
                entry.name,
                entry.shape,
                expected_shape
            ));
        }
        let tensor =
            Tensor::<T>::from_vec(&entry.shape, entry.values.iter().map(|&v| T::from_f64(v)).collect())?;
        match entry.kind {
            KIND_PARAM => store.set_param_value(&entry.name, tensor)?,
            _ => store.set_buffer(&entry.name, tensor)?,
        }
    }
    // A checkpoint must cover the whole model.
    let loaded: std::collections::BTreeSet<&str> =
        entries.iter().map(|e| e.name.as_str()).collect();
    for name in store.param_names().chain(store.buffer_names()) {
        if !loaded.contains(name) {
            return Err(format_err!("entry '{name}': missing from weight file"));
        }
    }
    Ok(())
}

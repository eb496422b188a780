//! Little-endian binary containers.
//!
//! Weight files (`GFW1`):
//!
//! ```text
//! "GFW1" | u32 layer count
//! per conv layer:
//!   u16 name length | UTF-8 name | u32 x4 kernel dims [out, in, kh, kw]
//!   f32 kernel values | u32 bias length | f32 bias values
//! ```
//!
//! Statistic containers (`GFG1`) hold named arrays of any rank:
//!
//! ```text
//! "GFG1" | u32 entry count
//! per entry:
//!   u16 name length | UTF-8 name | u32 rank | u32 x rank dims | f32 values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ConvParams, Provenance, WeightStore};
use crate::tensor::Kernel;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GFW1";
pub const ARRAYS_MAGIC: &[u8; 4] = b"GFG1";

/// A named dense array stored in a `GFG1` container.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch(format!("array dims {dims:?} need {n} values, got {}", values.len())));
        }
        Ok(Self { name: name.into(), dims, values })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn name(&mut self, s: &str) {
        let len = u16::try_from(s.len()).expect("name shorter than 64 KiB");
        self.u16(len);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f32s(&mut self, vals: &[f64]) {
        for &v in vals {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0, context: "header".into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "file truncated while reading {} (needed {n} bytes at offset {}, {} left)",
                self.context,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{}: name is not valid UTF-8", self.context)))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes =
            n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: absurd element count {n}", self.context)))?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last entry", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_weights(store: &WeightStore) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(WEIGHTS_MAGIC);
    w.u32(store.layers.len());
    for p in &store.layers {
        w.name(&p.name);
        for d in p.kernel.dims() {
            w.u32(d);
        }
        w.f32s(p.kernel.data());
        w.u32(p.bias.len());
        w.f32s(&p.bias);
    }
    w.0
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightStore> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        r.context = format!("layer #{i}");
        let name = r.name()?;
        r.context = format!("layer `{name}`");
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("layer `{name}`: kernel dims {dims:?} overflow")))?;
        let data = r.f32s(n)?;
        let bias_len = r.u32()?;
        let bias = r.f32s(bias_len)?;
        let kernel = Kernel::new(dims[0], dims[1], dims[2], dims[3], data)
            .map_err(|e| Error::Format(format!("layer `{name}`: {e}")))?;
        layers.push(ConvParams { name, kernel, bias });
    }
    r.finish()?;
    Ok(WeightStore { layers, provenance: Provenance::Manual })
}

pub fn encode_arrays(arrays: &[NamedArray]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(ARRAYS_MAGIC);
    w.u32(arrays.len());
    for a in arrays {
        w.name(&a.name);
        w.u32(a.dims.len());
        for &d in &a.dims {
            w.u32(d);
        }
        w.f32s(&a.values);
    }
    w.0
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader::new(bytes);
    r.magic(ARRAYS_MAGIC)?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        r.context = format!("entry #{i}");
        let name = r.name()?;
        r.context = format!("entry `{name}`");
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry `{name}`: dims {dims:?} overflow")))?;
        let values = r.f32s(n)?;
        out.push(NamedArray { name, dims, values });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_arrays(path: impl AsRef<Path>, arrays: &[NamedArray]) -> Result<()> {
    std::fs::write(path, encode_arrays(arrays))?;
    Ok(())
}

pub fn read_arrays(path: impl AsRef<Path>) -> Result<Vec<NamedArray>> {
    decode_arrays(&std::fs::read(path)?)
}

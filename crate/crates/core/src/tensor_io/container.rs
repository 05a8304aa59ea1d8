//! The `GTEN` tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "GTEN"
//! version u8       1
//! dtype   u8       0 = float32
//! rank    u8       1..=4
//! dims    rank x u32
//! payload product(dims) x f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Matrix;

pub const MAGIC: [u8; 4] = *b"GTEN";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::Format(format!(
                "tensor rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if let Some(&d) = shape.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Format(format!("invalid dimension size {d}")));
        }
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "tensor payload",
                format!("{n} values for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn dtype(&self) -> DType {
        DType::F32
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Converts a rank-2 tensor into a [`Matrix`].
    pub fn into_matrix(self) -> Result<Matrix> {
        match self.shape[..] {
            [rows, cols] => Matrix::new(rows, cols, self.data),
            _ => Err(Error::shape(
                "matrix tensor",
                "rank 2",
                format!("{:?}", self.shape),
            )),
        }
    }

    /// Header plus payload size in bytes.
    pub fn encoded_len(&self) -> usize {
        7 + 4 * self.shape.len() + self.dtype().size() * self.data.len()
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
    })
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        let mut rest = bytes;
        while !rest.is_empty() {
            match self.inner.write(rest) {
                Ok(0) => {
                    return Err(Error::Io {
                        offset: self.written,
                        source: std::io::ErrorKind::WriteZero.into(),
                    })
                }
                Ok(n) => {
                    self.written += n as u64;
                    rest = &rest[n..];
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(source) => {
                    return Err(Error::Io {
                        offset: self.written,
                        source,
                    })
                }
            }
        }
        Ok(())
    }
}

/// Serializes `t` and returns the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, sink: W) -> Result<usize> {
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    let mut header = Vec::with_capacity(7 + 4 * t.shape.len());
    header.extend_from_slice(&MAGIC);
    header.push(VERSION);
    header.push(t.dtype() as u8);
    header.push(t.shape.len() as u8);
    for &d in &t.shape {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    w.put(&header)?;

    let mut buf = Vec::with_capacity(4 * 4096);
    for chunk in t.data.chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.put(&buf)?;
    }
    w.inner.flush().map_err(|source| Error::Io {
        offset: w.written,
        source,
    })?;
    Ok(w.written as usize)
}

fn read_up_to<R: Read>(source: &mut R, n: u64, what: &'static str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n.min(1 << 24) as usize);
    source
        .by_ref()
        .take(n)
        .read_to_end(&mut buf)
        .map_err(|e| Error::Io {
            offset: 0,
            source: e,
        })?;
    if (buf.len() as u64) < n {
        return Err(Error::Truncated {
            what,
            expected: n,
            available: buf.len() as u64,
        });
    }
    Ok(buf)
}

/// Reads exactly one container from `source`.
pub fn read_tensor<R: Read>(mut source: R) -> Result<Tensor> {
    let fixed = read_up_to(&mut source, 7, "tensor header")?;
    if fixed[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"GTEN\"",
            String::from_utf8_lossy(&fixed[..4])
        )));
    }
    if fixed[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", fixed[4])));
    }
    let dtype = DType::from_code(fixed[5])?;
    let rank = fixed[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!(
            "rank must be 1..={MAX_RANK}, got {rank}"
        )));
    }
    let dims = read_up_to(&mut source, 4 * rank as u64, "tensor dims")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero-sized dimension in {shape:?}")));
    }
    let n = element_count(&shape)?;
    let payload_len = (n as u64)
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let payload = read_up_to(&mut source, payload_len, "tensor payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn write_tensor_file(t: &Tensor, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    write_tensor(t, BufWriter::new(f))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    read_tensor(BufReader::new(f))
}

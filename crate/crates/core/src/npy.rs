//! NPY v1.0 ingestion and emission.
//!
//! Header parsing and element decoding are delegated to `npyz`; this module
//! enforces the v1.0 magic/version prefix, dispatches on the stored dtype and
//! hands back either a real-valued or an integer-valued n-d array.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{ArrayD, IxDyn, ShapeBuilder};
use npyz::{DType, NpyFile, TypeChar, WriterBuilder};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Array payload decoded from an NPY file.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyArray {
    Real(ArrayD<f64>),
    Int(ArrayD<i64>),
}

impl NpyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            NpyArray::Real(a) => a.shape(),
            NpyArray::Int(a) => a.shape(),
        }
    }
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Read an NPY v1.0 file into memory.
pub fn read_npy(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_npy(&bytes).map_err(|e| match e {
        Error::Format(m) => format_err(path, m),
        other => other,
    })
}

/// Decode an in-memory NPY v1.0 byte buffer.
pub fn decode_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic bytes".into()));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(Error::Format(format!(
            "unsupported NPY version {}.{} (expected 1.0)",
            bytes[6], bytes[7]
        )));
    }
    let file = NpyFile::new(bytes).map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    let shape: Vec<usize> = file.shape().iter().map(|&d| d as usize).collect();
    let fortran = file.order() == npyz::Order::Fortran;
    let ts = match file.dtype() {
        DType::Plain(ts) => ts,
        other => {
            return Err(Error::Format(format!(
                "unsupported structured dtype {}",
                other.descr()
            )))
        }
    };
    let size = ts.size_field();
    let short = |e: std::io::Error| Error::Format(format!("truncated data: {e}"));

    macro_rules! grab {
        ($t:ty, $conv:expr) => {{
            let v: Vec<$t> = file.into_vec::<$t>().map_err(short)?;
            v.into_iter().map($conv).collect::<Vec<_>>()
        }};
    }

    let arr = match (ts.type_char(), size) {
        (TypeChar::Float, 4) => NpyArray::Real(shaped(&shape, fortran, grab!(f32, |x| x as f64))?),
        (TypeChar::Float, 8) => NpyArray::Real(shaped(&shape, fortran, grab!(f64, |x| x))?),
        (TypeChar::Int, 1) => NpyArray::Int(shaped(&shape, fortran, grab!(i8, |x| x as i64))?),
        (TypeChar::Int, 2) => NpyArray::Int(shaped(&shape, fortran, grab!(i16, |x| x as i64))?),
        (TypeChar::Int, 4) => NpyArray::Int(shaped(&shape, fortran, grab!(i32, |x| x as i64))?),
        (TypeChar::Int, 8) => NpyArray::Int(shaped(&shape, fortran, grab!(i64, |x| x))?),
        (TypeChar::Uint, 1) => NpyArray::Int(shaped(&shape, fortran, grab!(u8, |x| x as i64))?),
        (TypeChar::Uint, 2) => NpyArray::Int(shaped(&shape, fortran, grab!(u16, |x| x as i64))?),
        (TypeChar::Uint, 4) => NpyArray::Int(shaped(&shape, fortran, grab!(u32, |x| x as i64))?),
        (TypeChar::Uint, 8) => {
            let v: Vec<u64> = file.into_vec::<u64>().map_err(short)?;
            let v = v
                .into_iter()
                .map(|x| i64::try_from(x).map_err(|_| Error::Data(format!("value {x} overflows i64"))))
                .collect::<Result<Vec<_>>>()?;
            NpyArray::Int(shaped(&shape, fortran, v)?)
        }
        (TypeChar::Bool, 1) => NpyArray::Int(shaped(&shape, fortran, grab!(bool, |x| x as i64))?),
        (c, s) => {
            return Err(Error::Format(format!(
                "unsupported dtype {}{s}",
                c.to_str()
            )))
        }
    };
    Ok(arr)
}

fn shaped<E>(shape: &[usize], fortran: bool, data: Vec<E>) -> Result<ArrayD<E>> {
    let dim = IxDyn(shape);
    let arr = if fortran {
        ArrayD::from_shape_vec(dim.f(), data)
    } else {
        ArrayD::from_shape_vec(dim, data)
    };
    arr.map_err(|e| Error::Format(format!("shape/data mismatch: {e}")))
}

fn write_with<E>(path: &Path, shape: &[usize], data: impl IntoIterator<Item = E>) -> Result<()>
where
    E: npyz::AutoSerialize,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(|e| Error::io(path, e))?;
    w.extend(data).map_err(|e| Error::io(path, e))?;
    w.finish().map_err(|e| Error::io(path, e))
}

/// Write a little-endian `<f4` array in C order.
pub fn write_f32(path: impl AsRef<Path>, shape: &[usize], data: impl IntoIterator<Item = f32>) -> Result<()> {
    write_with(path.as_ref(), shape, data)
}

/// Write a little-endian `<f8` array in C order.
pub fn write_f64(path: impl AsRef<Path>, shape: &[usize], data: impl IntoIterator<Item = f64>) -> Result<()> {
    write_with(path.as_ref(), shape, data)
}

/// Write a little-endian `<u4` array in C order.
pub fn write_u32(path: impl AsRef<Path>, shape: &[usize], data: impl IntoIterator<Item = u32>) -> Result<()> {
    write_with(path.as_ref(), shape, data)
}

//! Tensor container and CSV fallback.
//!
//! Binary layout: magic `PDT1`, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! `rank` little-endian u64 dims, then the row-major payload in
//! little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 4] = b"PDT1";

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn write_payload<T: Scalar, W: Write>(w: &mut W, values: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * T::DTYPE.byte_width());
    match T::DTYPE {
        Dtype::F32 => {
            for v in values {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in values {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path_str(path), e))
}

fn write_header<W: Write>(w: &mut W, dtype: Dtype, dims: &[u64], path: &Path) -> Result<()> {
    let mut head = Vec::with_capacity(6 + dims.len() * 8);
    head.extend_from_slice(MAGIC);
    head.push(dtype.code());
    head.push(dims.len() as u8);
    for d in dims {
        head.extend_from_slice(&d.to_le_bytes());
    }
    w.write_all(&head).map_err(|e| Error::io(path_str(path), e))
}

pub fn write_matrix<T: Scalar>(path: &Path, values: &Array2<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, T::DTYPE, &[values.nrows() as u64, values.ncols() as u64], path)?;
    let flat: Vec<T> = values.iter().copied().collect();
    write_payload(&mut w, &flat, path)?;
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

pub fn write_vector<T: Scalar>(path: &Path, values: &Array1<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, T::DTYPE, &[values.len() as u64], path)?;
    let flat: Vec<T> = values.iter().copied().collect();
    write_payload(&mut w, &flat, path)?;
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

struct RawTensor {
    dims: Vec<u64>,
    data: Vec<f64>,
}

fn read_raw(path: &Path) -> Result<RawTensor> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path_str(path), e))?;
    if &magic != MAGIC {
        return Err(Error::format(path_str(path), "bad magic, expected PDT1"));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(|e| Error::io(path_str(path), e))?;
    let dtype = Dtype::from_code(head[0])
        .ok_or_else(|| Error::format(path_str(path), format!("unknown dtype code {}", head[0])))?;
    let rank = head[1] as usize;
    if rank == 0 || rank > 2 {
        return Err(Error::format(path_str(path), format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d).map_err(|e| Error::io(path_str(path), e))?;
        dims.push(u64::from_le_bytes(d));
    }
    let count: u64 = dims.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path_str(path), e))?;
    let expected = count as usize * dtype.byte_width();
    if payload.len() != expected {
        return Err(Error::format(
            path_str(path),
            format!("payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(count as usize);
    match dtype {
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Ok(RawTensor { dims, data })
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let raw = read_raw(path)?;
    if raw.dims.len() != 2 {
        return Err(Error::format(
            path_str(path),
            format!("expected rank 2, found rank {}", raw.dims.len()),
        ));
    }
    let (rows, cols) = (raw.dims[0] as usize, raw.dims[1] as usize);
    let data: Vec<T> = raw.data.iter().map(|&v| T::from_f64(v)).collect();
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::format(path_str(path), e.to_string()))
}

pub fn read_vector<T: Scalar>(path: &Path) -> Result<Array1<T>> {
    let raw = read_raw(path)?;
    if raw.dims.len() != 1 {
        return Err(Error::format(
            path_str(path),
            format!("expected rank 1, found rank {}", raw.dims.len()),
        ));
    }
    Ok(Array1::from_vec(raw.data.iter().map(|&v| T::from_f64(v)).collect()))
}

pub fn write_matrix_csv<T: Scalar>(path: &Path, values: &Array2<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    for row in values.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{:?}", v.as_f64())).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path_str(path), e))?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))
}

pub fn read_matrix_csv<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(path_str(path), format!("bad number {:?} on line {}", field, lineno + 1))
            })?;
            row.push(T::from_f64(v));
        }
        rows.push(row);
    }
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if ncols == 0 {
        return Err(Error::format(path_str(path), "empty csv matrix"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::format(path_str(path), "ragged csv rows"));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| Error::format(path_str(path), e.to_string()))
}

/// Dispatch on extension: `.pdt` binary container, `.csv` text fallback.
pub fn read_matrix_auto<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_matrix_csv(path),
        _ => read_matrix(path),
    }
}

pub fn write_matrix_auto<T: Scalar>(path: &Path, values: &Array2<T>) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_matrix_csv(path, values),
        _ => write_matrix(path, values),
    }
}

pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path_str(path), e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    serde_json::from_str(&text).map_err(Error::from)
}

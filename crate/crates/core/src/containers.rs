//! Self-describing binary containers: single arrays (`.arr` volumes) and
//! named parameter maps (weight files, checkpoint sections). All integers
//! are little-endian; parameter maps are written in sorted name order so a
//! save/load/save round trip is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{CheckpointError, DataError};
use crate::params::ParamStore;

pub const ARR_MAGIC: &[u8; 8] = b"FSGARR01";
pub const PARAM_MAGIC: &[u8; 8] = b"FSGPAR01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrDtype {
    F64,
    U8,
}

impl ArrDtype {
    fn code(self) -> u8 {
        match self {
            ArrDtype::F64 => 1,
            ArrDtype::U8 => 2,
        }
    }

    fn from_code(code: u8) -> Option<ArrDtype> {
        match code {
            1 => Some(ArrDtype::F64),
            2 => Some(ArrDtype::U8),
            _ => None,
        }
    }
}

pub(crate) fn read_exact_buf<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_bits(u64::from_le_bytes(b)))
}

fn write_dims<W: Write>(w: &mut W, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_dims<R: Read>(r: &mut R) -> std::io::Result<Vec<usize>> {
    let mut nd = [0u8; 1];
    r.read_exact(&mut nd)?;
    let mut dims = Vec::with_capacity(nd[0] as usize);
    for _ in 0..nd[0] {
        dims.push(read_u32(r)? as usize);
    }
    Ok(dims)
}

fn arr_format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_f64_array(path: &Path, arr: &ArrayD<f64>) -> Result<(), DataError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(ARR_MAGIC)?;
    w.write_all(&[ArrDtype::F64.code()])?;
    write_dims(&mut w, arr.shape())?;
    for v in arr.iter() {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

pub fn write_u8_array(path: &Path, arr: &ArrayD<u8>) -> Result<(), DataError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(ARR_MAGIC)?;
    w.write_all(&[ArrDtype::U8.code()])?;
    write_dims(&mut w, arr.shape())?;
    let data: Vec<u8> = arr.iter().copied().collect();
    w.write_all(&data)?;
    Ok(())
}

fn read_arr_header(path: &Path, r: &mut impl Read) -> Result<(ArrDtype, Vec<usize>), DataError> {
    let magic = read_exact_buf(r, 8)?;
    if magic != ARR_MAGIC {
        return Err(arr_format_err(path, "bad magic (not an array container)"));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let dtype = ArrDtype::from_code(code[0])
        .ok_or_else(|| arr_format_err(path, format!("unknown dtype code {}", code[0])))?;
    let dims = read_dims(r)?;
    Ok((dtype, dims))
}

pub fn read_f64_array(path: &Path) -> Result<ArrayD<f64>, DataError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dtype, dims) = read_arr_header(path, &mut r)?;
    if dtype != ArrDtype::F64 {
        return Err(arr_format_err(path, "expected f64 payload"));
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f64(&mut r)?);
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| arr_format_err(path, format!("shape mismatch: {e}")))
}

pub fn read_u8_array(path: &Path) -> Result<ArrayD<u8>, DataError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dtype, dims) = read_arr_header(path, &mut r)?;
    if dtype != ArrDtype::U8 {
        return Err(arr_format_err(path, "expected u8 payload"));
    }
    let n: usize = dims.iter().product();
    let data = read_exact_buf(&mut r, n)?;
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| arr_format_err(path, format!("shape mismatch: {e}")))
}

/// Serialize a parameter map into a writer (sorted by name).
pub fn write_params<W: Write>(w: &mut W, store: &ParamStore) -> Result<(), CheckpointError> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, arr) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_dims(w, arr.shape())?;
        for v in arr.iter() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parse a parameter map from a reader.
pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore, CheckpointError> {
    let magic = read_exact_buf(r, 8)?;
    if magic != PARAM_MAGIC {
        return Err(CheckpointError::Malformed(
            "bad magic (not a parameter map)".into(),
        ));
    }
    let count = read_u64(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Malformed(format!(
                "unreasonable parameter name length {name_len}"
            )));
        }
        let name = String::from_utf8(read_exact_buf(r, name_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("parameter name: {e}")))?;
        let dims = read_dims(r)?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_f64(r)?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| CheckpointError::Malformed(format!("parameter {name}: {e}")))?;
        store.insert(name, arr);
    }
    Ok(store)
}

pub fn write_params_file(path: &Path, store: &ParamStore) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(&mut w, store)
}

pub fn read_params_file(path: &Path) -> Result<ParamStore, CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_params(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_array_round_trip() {
        let dir = std::env::temp_dir().join(format!("fsg-arr-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.arr");
        let arr = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64 * 0.5);
        write_f64_array(&path, &arr).unwrap();
        assert_eq!(read_f64_array(&path).unwrap(), arr);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn u8_array_round_trip_and_type_check() {
        let dir = std::env::temp_dir().join(format!("fsg-arr2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("labels.arr");
        let arr = ArrayD::from_shape_fn(IxDyn(&[3, 5]), |i| ((i[0] + i[1]) % 9) as u8);
        write_u8_array(&path, &arr).unwrap();
        assert_eq!(read_u8_array(&path).unwrap(), arr);
        assert!(read_f64_array(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn param_map_round_trip_is_byte_identical() {
        let mut store = ParamStore::new();
        store.insert("z.w", ArrayD::from_elem(IxDyn(&[2, 2]), 0.1));
        store.insert("a.b", ArrayD::from_elem(IxDyn(&[]), -3.5));
        let mut buf1 = Vec::new();
        write_params(&mut buf1, &store).unwrap();
        let loaded = read_params(&mut buf1.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_params(&mut buf2, &loaded).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn malformed_params_rejected() {
        let garbage = b"NOTMAGIC".to_vec();
        assert!(read_params(&mut garbage.as_slice()).is_err());
    }
}

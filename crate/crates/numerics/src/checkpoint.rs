//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "CBLCKPT1" | meta_len u32 | meta utf8 | version u64 | count u32 |
//!   per tensor: name_len u16 | name utf8 | dtype u8 (1 = f64) |
//!               ndim u8 | dims u32 x ndim | data f64 LE

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NumericsError, Result};
use crate::optim::ParameterSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CBLCKPT1";
const DTYPE_F64: u8 = 1;

pub fn save_named_tensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    version: u64,
    meta: &str,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let meta_bytes = meta.as_bytes();
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(meta_bytes)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(NumericsError::Checkpoint(format!("name too long: {name}")));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[DTYPE_F64])?;
        let dims = t.shape();
        if dims.len() > u8::MAX as usize {
            return Err(NumericsError::Checkpoint(format!("rank too high: {name}")));
        }
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_named_tensors(path: &Path) -> Result<(BTreeMap<String, Tensor>, u64, String)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta = String::from_utf8(meta_bytes)
        .map_err(|_| NumericsError::Checkpoint("meta is not utf8".into()))?;
    let version = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NumericsError::Checkpoint("name is not utf8".into()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported dtype {} for '{name}'",
                dtype[0]
            )));
        }
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok((tensors, version, meta))
}

pub fn save_params(path: &Path, params: &ParameterSet, meta: &str) -> Result<()> {
    let map: BTreeMap<String, Tensor> =
        params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    save_named_tensors(path, &map, params.version(), meta)
}

pub fn load_params(path: &Path) -> Result<(ParameterSet, String)> {
    let (map, version, meta) = load_named_tensors(path)?;
    let mut params = ParameterSet::new();
    for (k, v) in map {
        params.insert(k, v);
    }
    params.set_version(version);
    Ok((params, meta))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = std::env::temp_dir().join("numerics_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        let mut params = ParameterSet::new();
        params.insert("a.w", Tensor::new(vec![2, 3], vec![1., -2., 3.5, 0., 1e-9, 7.]).unwrap());
        params.insert("b", Tensor::from_vec(vec![0.25]));
        params.set_version(42);
        save_params(&path, &params, "k=v\n").unwrap();
        let (loaded, meta) = load_params(&path).unwrap();
        assert_eq!(meta, "k=v\n");
        assert_eq!(loaded.version(), 42);
        assert_eq!(loaded.get("a.w"), params.get("a.w"));
        assert_eq!(loaded.get("b"), params.get("b"));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("numerics_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_params(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}

//! Little-endian binary checkpoints.
//!
//! Layout: magic `NACC`, version `u32`, tensor count `u32`, then per tensor
//! the name length `u32`, UTF-8 name bytes, rank `u32`, one `u64` per
//! dimension and the raw `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NacError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NACC";
pub const VERSION: u32 = 1;

fn format_err(detail: impl Into<String>) -> NacError {
    NacError::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write_tensors<W: Write>(out: &mut W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| format_err("too many tensors"))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u32::try_from(bytes.len()).map_err(|_| format_err("name too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = read_u32(input)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| format_err(e.to_string()))?;
        let rank = read_u32(input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0; n * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = [0; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(format_err("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = store.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(&mut out, &tensors)?;
    out.flush()?;
    Ok(())
}

/// Overwrites every parameter of `store` from the file. Names and shapes
/// must match exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let tensors = read_tensors(&mut input)?;
    if tensors.len() != store.len() {
        return Err(format_err(format!(
            "checkpoint has {} tensors, model {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| format_err(format!("unknown tensor {name}")))?;
        let slot = store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(format_err(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab", &t)]).unwrap();
        assert_eq!(&buf[..4], b"NACC");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..18], b"ab");
        assert_eq!(&buf[18..22], &1u32.to_le_bytes());
        assert_eq!(&buf[22..30], &2u64.to_le_bytes());
        assert_eq!(&buf[30..38], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 46);
    }

    #[test]
    fn round_trip_through_a_file() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap(), ParamKind::Weight);
        store.add("s", Tensor::scalar(0.25), ParamKind::Signature);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nacc");
        save(&store, &path).unwrap();
        let mut other = store.clone();
        other.get_mut(a).data_mut()[4] = 99.0;
        load_into(&mut other, &path).unwrap();
        assert_eq!(other.get(a), store.get(a));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x", &Tensor::scalar(1.0))]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensors(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(read_tensors(&mut &truncated[..]).is_err());
        let mut extra = buf;
        extra.push(0);
        assert!(read_tensors(&mut extra.as_slice()).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nacc");
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]), ParamKind::Weight);
        save(&store, &path).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[3]), ParamKind::Weight);
        assert!(load_into(&mut other, &path).is_err());
    }
}

//! The `CSMX` binary matrix container: named dense sections, each guarded by
//! a CRC32 of its payload, plus optional `<file>.ids` companions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSMX";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Array2<f64>),
    F32(Array2<f32>),
}

impl Payload {
    pub fn dim(&self) -> (usize, usize) {
        match self {
            Payload::F64(a) => a.dim(),
            Payload::F32(a) => a.dim(),
        }
    }

    pub fn to_f64(&self) -> Array2<f64> {
        match self {
            Payload::F64(a) => a.clone(),
            Payload::F32(a) => a.mapv(f64::from),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => 1,
            Payload::F32(_) => 2,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Payload::F64(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Payload::F32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn finite(&self) -> bool {
        match self {
            Payload::F64(a) => a.iter().all(|v| v.is_finite()),
            Payload::F32(a) => a.iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: Payload,
}

impl Section {
    pub fn f64(name: impl Into<String>, data: Array2<f64>) -> Self {
        Self {
            name: name.into(),
            data: Payload::F64(data),
        }
    }
}

pub fn write_sections<W: Write>(mut w: W, sections: &[Section]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(sections.len() as u32).to_le_bytes()).map_err(io)?;
    for s in sections {
        if !s.data.finite() {
            return Err(Error::NonFinite(format!("section `{}` has non-finite values", s.name)));
        }
        let name = s.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidInput(format!("section name too long: {}", s.name)))?;
        let (rows, cols) = s.data.dim();
        let payload = s.data.bytes();
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(rows as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(cols as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&[s.data.dtype()]).map_err(io)?;
        w.write_all(&payload).map_err(io)?;
        w.write_all(&crc32fast::hash(&payload).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn take<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated {what}")))?;
    Ok(b)
}

pub fn read_sections<R: Read>(mut r: R) -> Result<Vec<Section>> {
    let magic: [u8; 4] = take(&mut r, "header")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad container magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(&mut r, "header")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r, "header")?);
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = u16::from_le_bytes(take(&mut r, "section header")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated section name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format(format!("section {i}: name is not UTF-8")))?;
        let rows = u64::from_le_bytes(take(&mut r, "section header")?) as usize;
        let cols = u64::from_le_bytes(take(&mut r, "section header")?) as usize;
        let [dtype] = take::<_, 1>(&mut r, "section header")?;
        let width = match dtype {
            1 => 8,
            2 => 4,
            other => return Err(Error::Format(format!("section `{name}`: unknown dtype {other}"))),
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Format(format!("section `{name}`: size overflow")))?;
        let mut payload = Vec::new();
        (&mut r).take(n as u64).read_to_end(&mut payload).map_err(|e| Error::Format(e.to_string()))?;
        if payload.len() != n {
            return Err(Error::Format(format!("section `{name}`: truncated payload")));
        }
        let crc = u32::from_le_bytes(take(&mut r, "checksum")?);
        if crc != crc32fast::hash(&payload) {
            return Err(Error::Format(format!("section `{name}`: checksum mismatch")));
        }
        let data = if dtype == 1 {
            let v = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Payload::F64(Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Format(e.to_string()))?)
        } else {
            let v = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Payload::F32(Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Format(e.to_string()))?)
        };
        out.push(Section { name, data });
    }
    Ok(out)
}

pub fn save_matrix(path: impl AsRef<Path>, sections: &[Section]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_sections(BufWriter::new(f), sections)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Vec<Section>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_sections(BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Looks up a section by name and widens it to `f64`.
pub fn section(sections: &[Section], name: &str) -> Result<Array2<f64>> {
    sections
        .iter()
        .find(|s| s.name == name)
        .map(|s| s.data.to_f64())
        .ok_or_else(|| Error::Format(format!("missing section `{name}`")))
}

pub fn ids_path(path: impl AsRef<Path>) -> PathBuf {
    let mut p = path.as_ref().as_os_str().to_owned();
    p.push(".ids");
    PathBuf::from(p)
}

/// Saves one matrix section plus its row ids in the `.ids` companion.
pub fn save_labeled(path: impl AsRef<Path>, name: &str, ids: &[String], m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != m.nrows() {
        return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), m.nrows())));
    }
    save_matrix(path, &[Section::f64(name, m.clone())])?;
    crate::data::write_ids(ids_path(path), ids)
}

pub fn load_labeled(path: impl AsRef<Path>, name: &str) -> Result<(Vec<String>, Array2<f64>)> {
    let path = path.as_ref();
    let m = section(&load_matrix(path)?, name)?;
    let ids = crate::data::read_ids(ids_path(path))?;
    if ids.len() != m.nrows() {
        return Err(Error::Format(format!(
            "{}: {} ids for {} rows",
            path.display(),
            ids.len(),
            m.nrows()
        )));
    }
    Ok((ids, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;

    fn roundtrip(sections: &[Section]) -> Vec<Section> {
        let mut buf = Vec::new();
        write_sections(&mut buf, sections).unwrap();
        read_sections(buf.as_slice()).unwrap()
    }

    #[test]
    fn empty_and_scalar() {
        assert!(roundtrip(&[]).is_empty());
        let back = roundtrip(&[Section::f64("x", arr2(&[[3.5]]))]);
        assert_eq!(back[0].data, Payload::F64(arr2(&[[3.5]])));
    }

    #[test]
    fn large_matrix_bit_identical() {
        let mut rng = crate::seed::rng(5);
        let a = Array2::from_shape_simple_fn((100, 200), || rng.random::<f64>() * 1e3 - 500.0);
        let b = Array2::from_shape_simple_fn((3, 4), || rng.random::<f32>());
        let back = roundtrip(&[Section::f64("a", a.clone()), Section { name: "b".into(), data: Payload::F32(b.clone()) }]);
        match (&back[0].data, &back[1].data) {
            (Payload::F64(x), Payload::F32(y)) => {
                assert!(x.iter().zip(a.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
                assert_eq!(y, &b);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(section(&back, "a").unwrap(), a);
        assert!(section(&back, "c").is_err());
    }

    #[test]
    fn corruption_detected() {
        let mut buf = Vec::new();
        write_sections(&mut buf, &[Section::f64("m", arr2(&[[1.0, 2.0]]))]).unwrap();
        let mut flipped = buf.clone();
        let last_payload = buf.len() - 5;
        flipped[last_payload] ^= 1;
        assert!(matches!(read_sections(flipped.as_slice()), Err(Error::Format(m)) if m.contains("checksum")));
        assert!(read_sections(&buf[..buf.len() - 6]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(read_sections(bad.as_slice()).is_err());
        assert!(write_sections(Vec::new(), &[Section::f64("n", arr2(&[[f64::NAN]]))]).is_err());
    }

    #[test]
    fn labeled_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csmx");
        let ids = vec!["a".to_string(), "b".to_string()];
        let m = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        save_labeled(&p, "factors", &ids, &m).unwrap();
        assert_eq!(load_labeled(&p, "factors").unwrap(), (ids.clone(), m.clone()));
        assert!(save_labeled(&p, "factors", &ids[..1], &m).is_err());
    }

    #[test]
    fn ids_companion_name() {
        assert_eq!(ids_path("out/x.csmx"), PathBuf::from("out/x.csmx.ids"));
    }
}

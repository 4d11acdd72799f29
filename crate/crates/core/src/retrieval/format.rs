//! On-disk index containers.
//!
//! Little-endian throughout. Strings are a `u32` byte length followed by UTF-8.
//!
//! Retailer index (`*.ebri`):
//! `magic "EBRIDX\0\0" | version u32 | retailer string | n u64 | dim u32 | timestamp u64 |
//!  n id strings | n·dim f64 row-major | category count u32, category strings |
//!  n category u32 | availability bitmap ⌈n/8⌉ bytes, LSB first`
//!
//! Sidecar (`catalog.ebrs`): `magic "EBRSIDE\0" | version u32 | n u64 | dim u32 |
//!  timestamp u64 | n id strings | n·dim f64`

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"EBRIDX\0\0";
pub const SIDECAR_MAGIC: &[u8; 8] = b"EBRSIDE\0";
pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_EXTENSION: &str = "ebri";
pub const SIDECAR_FILE: &str = "catalog.ebrs";

/// Embeddings of one retailer's products.
#[derive(Debug, Clone, PartialEq)]
pub struct RetailerIndex {
    pub retailer_id: String,
    pub timestamp: u64,
    pub dim: usize,
    pub ids: Vec<String>,
    /// `ids.len() × dim`, row-major.
    pub embeddings: Vec<f64>,
    /// Leaf category per product.
    pub categories: Vec<String>,
    pub available: Vec<bool>,
}

impl RetailerIndex {
    pub fn new(
        retailer_id: impl Into<String>,
        timestamp: u64,
        dim: usize,
        rows: Vec<(String, Vec<f64>, String, bool)>,
    ) -> Result<Self> {
        let mut idx = Self {
            retailer_id: retailer_id.into(),
            timestamp,
            dim,
            ids: Vec::with_capacity(rows.len()),
            embeddings: Vec::with_capacity(rows.len() * dim),
            categories: Vec::with_capacity(rows.len()),
            available: Vec::with_capacity(rows.len()),
        };
        for (id, emb, cat, avail) in rows {
            if emb.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: emb.len(),
                });
            }
            idx.ids.push(id);
            idx.embeddings.extend_from_slice(&emb);
            idx.categories.push(cat);
            idx.available.push(avail);
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.embeddings[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        write_str(w, &self.retailer_id)?;
        w.write_u64::<LE>(self.ids.len() as u64)?;
        w.write_u32::<LE>(self.dim as u32)?;
        w.write_u64::<LE>(self.timestamp)?;
        for id in &self.ids {
            write_str(w, id)?;
        }
        for x in &self.embeddings {
            w.write_f64::<LE>(*x)?;
        }
        // category table in sorted order so the file does not depend on row order
        let table: BTreeMap<&str, u32> = {
            let mut names: Vec<&str> = self.categories.iter().map(String::as_str).collect();
            names.sort_unstable();
            names.dedup();
            names
                .into_iter()
                .enumerate()
                .map(|(i, n)| (n, i as u32))
                .collect()
        };
        w.write_u32::<LE>(table.len() as u32)?;
        for name in table.keys() {
            write_str(w, name)?;
        }
        for c in &self.categories {
            w.write_u32::<LE>(table[c.as_str()])?;
        }
        let mut bits = vec![0u8; self.available.len().div_ceil(8)];
        for (i, a) in self.available.iter().enumerate() {
            if *a {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bits)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        read_index(&mut r).map_err(|e| Error::format(path, e))
    }
}

/// Product-tower embeddings for the whole catalog, used to score keyword-sourced results.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub timestamp: u64,
    pub dim: usize,
    pub ids: Vec<String>,
    pub embeddings: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl Sidecar {
    pub fn new(timestamp: u64, dim: usize, ids: Vec<String>, embeddings: Vec<f64>) -> Result<Self> {
        if embeddings.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                actual: embeddings.len(),
            });
        }
        let positions = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            timestamp,
            dim,
            ids,
            embeddings,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embedding(&self, id: &str) -> Option<&[f64]> {
        self.positions
            .get(id)
            .map(|&p| &self.embeddings[p * self.dim..(p + 1) * self.dim])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        (|| -> std::io::Result<()> {
            w.write_all(SIDECAR_MAGIC)?;
            w.write_u32::<LE>(FORMAT_VERSION)?;
            w.write_u64::<LE>(self.ids.len() as u64)?;
            w.write_u32::<LE>(self.dim as u32)?;
            w.write_u64::<LE>(self.timestamp)?;
            for id in &self.ids {
                write_str(&mut w, id)?;
            }
            for x in &self.embeddings {
                w.write_f64::<LE>(*x)?;
            }
            w.flush()
        })()
        .map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let fmt = |m: String| Error::format(path, m);
        let (timestamp, dim, ids, embeddings) = (|| -> std::result::Result<_, String> {
            check_header(&mut r, SIDECAR_MAGIC)?;
            let n = read_count(&mut r)?;
            let dim = r.read_u32::<LE>().map_err(io_msg)? as usize;
            let timestamp = r.read_u64::<LE>().map_err(io_msg)?;
            let ids = (0..n)
                .map(|_| read_str(&mut r))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let embeddings = read_f64s(&mut r, n * dim)?;
            expect_eof(&mut r)?;
            Ok((timestamp, dim, ids, embeddings))
        })()
        .map_err(fmt)?;
        Sidecar::new(timestamp, dim, ids, embeddings)
    }
}

/// `[A-Za-z0-9_-]+` ids are used verbatim; anything else is hex-encoded behind a `~`.
pub fn index_file_name(retailer_id: &str) -> String {
    let safe = !retailer_id.is_empty()
        && retailer_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if safe {
        format!("{retailer_id}.{INDEX_EXTENSION}")
    } else {
        format!("~{}.{INDEX_EXTENSION}", hex::encode(retailer_id.as_bytes()))
    }
}

fn io_msg(e: std::io::Error) -> String {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        "truncated file".into()
    } else {
        e.to_string()
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::result::Result<String, String> {
    let len = r.read_u32::<LE>().map_err(io_msg)? as usize;
    if len > 1 << 24 {
        return Err(format!("string length {len} exceeds limit"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(io_msg)?;
    String::from_utf8(buf).map_err(|_| "invalid UTF-8 in string".to_string())
}

fn read_count(r: &mut impl Read) -> std::result::Result<usize, String> {
    let n = r.read_u64::<LE>().map_err(io_msg)?;
    if n > u32::MAX as u64 {
        return Err(format!("row count {n} exceeds limit"));
    }
    Ok(n as usize)
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::result::Result<Vec<f64>, String> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out).map_err(io_msg)?;
    Ok(out)
}

fn check_header(r: &mut impl Read, magic: &[u8; 8]) -> std::result::Result<(), String> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(io_msg)?;
    if &m != magic {
        return Err("bad magic".into());
    }
    let v = r.read_u32::<LE>().map_err(io_msg)?;
    if v != FORMAT_VERSION {
        return Err(format!("unsupported format version {v}"));
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read) -> std::result::Result<(), String> {
    let mut b = [0u8; 1];
    match r.read(&mut b).map_err(io_msg)? {
        0 => Ok(()),
        _ => Err("trailing bytes".into()),
    }
}

fn read_index(r: &mut impl Read) -> std::result::Result<RetailerIndex, String> {
    check_header(r, INDEX_MAGIC)?;
    let retailer_id = read_str(r)?;
    let n = read_count(r)?;
    let dim = r.read_u32::<LE>().map_err(io_msg)? as usize;
    let timestamp = r.read_u64::<LE>().map_err(io_msg)?;
    let ids = (0..n)
        .map(|_| read_str(r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let embeddings = read_f64s(r, n * dim)?;
    let table_len = r.read_u32::<LE>().map_err(io_msg)? as usize;
    let table = (0..table_len)
        .map(|_| read_str(r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut categories = Vec::with_capacity(n);
    for _ in 0..n {
        let c = r.read_u32::<LE>().map_err(io_msg)? as usize;
        categories.push(
            table
                .get(c)
                .cloned()
                .ok_or_else(|| format!("category index {c} out of range"))?,
        );
    }
    let mut bits = vec![0u8; n.div_ceil(8)];
    r.read_exact(&mut bits).map_err(io_msg)?;
    let available = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    expect_eof(r)?;
    Ok(RetailerIndex {
        retailer_id,
        timestamp,
        dim,
        ids,
        embeddings,
        categories,
        available,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RetailerIndex {
        RetailerIndex::new(
            "r1",
            42,
            2,
            vec![
                ("a".into(), vec![0.5, -1.0], "Milk".into(), true),
                ("b".into(), vec![1.5, 2.0], "Wine".into(), false),
                ("c".into(), vec![0.0, 0.25], "Milk".into(), true),
            ],
        )
        .unwrap()
    }

    #[test]
    fn index_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r1.ebri");
        let idx = sample();
        idx.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], INDEX_MAGIC);
        assert_eq!(RetailerIndex::read(&path).unwrap(), idx);
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            RetailerIndex::read(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(SIDECAR_FILE);
        let s = Sidecar::new(7, 2, vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.write(&path).unwrap();
        let back = Sidecar::read(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.embedding("b"), Some(&[3.0, 4.0][..]));
        assert!(RetailerIndex::read(&path).is_err());
    }

    #[test]
    fn empty_index_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ebri");
        let idx = RetailerIndex::new("e", 0, 3, vec![]).unwrap();
        idx.write(&path).unwrap();
        assert_eq!(RetailerIndex::read(&path).unwrap(), idx);
    }

    #[test]
    fn file_names() {
        assert_eq!(index_file_name("store_1"), "store_1.ebri");
        assert_eq!(index_file_name("a/b"), "~612f62.ebri");
    }
}

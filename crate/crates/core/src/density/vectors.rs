//! Embedding vector files.
//!
//! Text: a `dim=<d>` header line, then `<sample_id> <v1> ... <vd>` per line.
//! Binary: magic `CIDV`, `u32` version, `u32` dim, `u64` count, then `count`
//! ids as `u32` byte length plus UTF-8, then `count * dim` little-endian
//! `f32` values, row-major.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const BINARY_MAGIC: &[u8; 4] = b"CIDV";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VectorFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Format(String),
}

/// Ids plus a row-major vector table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorTable {
    pub dim: usize,
    pub ids: Vec<String>,
    pub data: Vec<f64>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Self {
        VectorTable {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, id: String, vector: &[f64]) {
        assert_eq!(vector.len(), self.dim, "vector dimension");
        self.ids.push(id);
        self.data.extend_from_slice(vector);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn read_text<R: BufRead>(reader: R) -> Result<VectorTable, VectorFileError> {
    let mut lines = reader.lines().enumerate();
    let dim = loop {
        let Some((i, line)) = lines.next() else {
            return Err(VectorFileError::Format("empty vector file".into()));
        };
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let dim = line
            .strip_prefix("dim=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| VectorFileError::Parse {
                line: i + 1,
                message: format!("expected dim=<n>, got {line:?}"),
            })?;
        break dim;
    };
    let mut table = VectorTable::new(dim);
    let mut row = Vec::with_capacity(dim);
    for (i, line) in lines {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        if id.starts_with('#') {
            continue;
        }
        row.clear();
        for field in fields {
            let v: f64 = field.parse().map_err(|_| VectorFileError::Parse {
                line: i + 1,
                message: format!("bad number {field:?}"),
            })?;
            row.push(v);
        }
        if row.len() != dim {
            return Err(VectorFileError::Parse {
                line: i + 1,
                message: format!("{id}: expected {dim} values, found {}", row.len()),
            });
        }
        table.push(id.to_string(), &row);
    }
    Ok(table)
}

pub fn write_text<W: Write>(table: &VectorTable, mut out: W) -> Result<(), VectorFileError> {
    writeln!(out, "dim={}", table.dim)?;
    for (i, id) in table.ids.iter().enumerate() {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(VectorFileError::Format(format!(
                "id {id:?} cannot be written as text"
            )));
        }
        out.write_all(id.as_bytes())?;
        for v in table.row(i) {
            write!(out, " {v}")?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut reader: R) -> Result<VectorTable, VectorFileError> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(VectorFileError::Format("not a binary vector file".into()));
    }
    let version = reader.read_u32::<LittleEndian>()?;
    if version != BINARY_VERSION {
        return Err(VectorFileError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let dim = reader.read_u32::<LittleEndian>()? as usize;
    let count = reader.read_u64::<LittleEndian>()? as usize;
    if dim == 0 {
        return Err(VectorFileError::Format("dimension 0".into()));
    }
    let mut table = VectorTable::new(dim);
    for _ in 0..count {
        let len = reader.read_u32::<LittleEndian>()? as usize;
        let mut bytes = vec![0u8; len];
        reader.read_exact(&mut bytes)?;
        let id = String::from_utf8(bytes).map_err(|e| VectorFileError::Format(e.to_string()))?;
        table.ids.push(id);
    }
    let mut raw = vec![0f32; count * dim];
    reader.read_f32_into::<LittleEndian>(&mut raw)?;
    table.data = raw.into_iter().map(f64::from).collect();
    Ok(table)
}

/// Values are narrowed to `f32`.
pub fn write_binary<W: Write>(table: &VectorTable, mut out: W) -> Result<(), VectorFileError> {
    out.write_all(BINARY_MAGIC)?;
    out.write_u32::<LittleEndian>(BINARY_VERSION)?;
    out.write_u32::<LittleEndian>(table.dim as u32)?;
    out.write_u64::<LittleEndian>(table.len() as u64)?;
    for id in &table.ids {
        out.write_u32::<LittleEndian>(id.len() as u32)?;
        out.write_all(id.as_bytes())?;
    }
    for v in &table.data {
        out.write_f32::<LittleEndian>(*v as f32)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads either format, sniffing the binary magic.
pub fn read_path(path: &Path) -> Result<VectorTable, VectorFileError> {
    let mut reader = BufReader::new(File::open(path)?);
    let head = reader.fill_buf()?;
    if head.starts_with(BINARY_MAGIC) {
        read_binary(reader)
    } else {
        read_text(reader)
    }
}

pub fn write_path(table: &VectorTable, path: &Path, binary: bool) -> Result<(), VectorFileError> {
    let out = BufWriter::new(File::create(path)?);
    if binary {
        write_binary(table, out)
    } else {
        write_text(table, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_format() {
        let input = "dim=2\nt#0 0.5 -1\n\nt#1 1e-3 2\n";
        let table = read_text(input.as_bytes()).unwrap();
        assert_eq!(table.ids, ["t#0", "t#1"]);
        assert_eq!(table.row(1), [0.001, 2.0]);
        let mut out = Vec::new();
        write_text(&table, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "dim=2\nt#0 0.5 -1\nt#1 0.001 2\n"
        );
    }

    #[test]
    fn text_errors() {
        assert!(matches!(
            read_text("t 1 2\n".as_bytes()),
            Err(VectorFileError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_text("dim=2\na 1\n".as_bytes()),
            Err(VectorFileError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_text("dim=1\na x\n".as_bytes()),
            Err(VectorFileError::Parse { .. })
        ));
        assert!(read_text("".as_bytes()).is_err());
    }

    #[test]
    fn binary_is_sniffed() {
        let dir = tempfile::tempdir().unwrap();
        let mut table = VectorTable::new(3);
        table.push("a b".into(), &[1.0, 0.25, -2.0]);
        let path = dir.path().join("v.bin");
        write_path(&table, &path, true).unwrap();
        assert_eq!(read_path(&path).unwrap(), table);
        // ids with spaces only survive the binary format
        assert!(write_path(&table, &dir.path().join("v.txt"), false).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 4), 0..20)) {
            let mut table = VectorTable::new(4);
            for (i, r) in rows.iter().enumerate() {
                table.push(format!("s#{i}"), r);
            }
            let mut out = Vec::new();
            write_text(&table, &mut out).unwrap();
            prop_assert_eq!(read_text(out.as_slice()).unwrap(), table);
        }
    }
}

//! Dataset files, the binary embedding store, and external vector import.
//!
//! Embedding store layout (little-endian):
//!
//! ```text
//! "NEV1"                 magic
//! u32                    dimension
//! u64                    row count
//! u32 + bytes            fingerprint (UTF-8)
//! per row:
//!   u32 + bytes          id (UTF-8)
//!   f32 x dimension      values
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::evaluation::{DatasetItem, EmbeddingMatrix, GroupedDataset, Role};
use crate::model::{map_eof, read_string, read_u32, read_u64, write_string};

pub const STORE_MAGIC: &[u8; 4] = b"NEV1";

#[derive(Deserialize)]
#[serde(untagged)]
enum Label {
    Text(String),
    Int(i64),
}

impl Label {
    fn into_string(self) -> String {
        match self {
            Label::Text(s) => s,
            Label::Int(i) => i.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Label,
    group: Label,
    #[serde(default)]
    role: Option<String>,
    #[serde(default)]
    text: Option<String>,
}

/// Parses JSON-lines dataset records (`id`, `group`, optional `role` and
/// `text`). Blank lines are skipped; errors carry 1-based line numbers.
pub fn parse_dataset(reader: impl BufRead) -> Result<GroupedDataset> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let id = raw.id.into_string();
        let group = raw.group.into_string();
        if id.is_empty() || group.is_empty() {
            return Err(Error::parse(lineno, "empty id or group"));
        }
        let role = match raw.role {
            None => Role::Both,
            Some(r) => Role::from_str(&r).map_err(|e| Error::parse(lineno, e))?,
        };
        if !seen.insert(id.clone()) {
            return Err(Error::parse(lineno, format!("duplicate id {id:?}")));
        }
        items.push(DatasetItem {
            id,
            group,
            role,
            text: raw.text,
        });
    }
    GroupedDataset::new(items)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<GroupedDataset> {
    parse_dataset(BufReader::new(fs::File::open(path)?))
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &GroupedDataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in ds.items() {
        let mut rec = serde_json::Map::new();
        rec.insert("id".into(), item.id.clone().into());
        rec.insert("group".into(), item.group.clone().into());
        rec.insert("role".into(), item.role.to_string().into());
        if let Some(t) = &item.text {
            rec.insert("text".into(), t.clone().into());
        }
        writeln!(w, "{}", serde_json::Value::Object(rec))?;
    }
    w.flush()?;
    Ok(())
}

/// One text per non-blank line.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn write_embeddings(w: &mut impl Write, matrix: &EmbeddingMatrix) -> Result<()> {
    w.write_all(STORE_MAGIC)?;
    w.write_all(&(matrix.dim() as u32).to_le_bytes())?;
    w.write_all(&(matrix.len() as u64).to_le_bytes())?;
    write_string(w, matrix.fingerprint())?;
    for (i, id) in matrix.ids().iter().enumerate() {
        write_string(w, id)?;
        for &v in matrix.row(i) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<EmbeddingMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| match map_eof(e) {
        Error::Truncated => Error::NotAnEmbeddingStore,
        other => other,
    })?;
    if &magic != STORE_MAGIC {
        return Err(Error::NotAnEmbeddingStore);
    }
    let dim = read_u32(r)? as usize;
    let count = read_u64(r)? as usize;
    let fingerprint = read_string(r)?;
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    let mut rows = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; dim * 4];
    for _ in 0..count {
        ids.push(read_string(r)?);
        r.read_exact(&mut buf).map_err(map_eof)?;
        rows.push(
            buf.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::InvalidDataset(
            "trailing bytes after embedding store rows".into(),
        ));
    }
    let m = if count == 0 {
        EmbeddingMatrix::from_unit_rows(Vec::new(), Vec::new())?
    } else {
        EmbeddingMatrix::from_unit_rows(ids, rows)?
    };
    if !m.is_empty() && m.dim() != dim {
        return Err(Error::InconsistentDimension {
            expected: dim,
            actual: m.dim(),
        });
    }
    Ok(m.with_fingerprint(fingerprint))
}

pub fn save_embeddings(path: impl AsRef<Path>, matrix: &EmbeddingMatrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_embeddings(&mut w, matrix)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    read_embeddings(&mut BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorFormat {
    JsonlVectors,
    CsvVectors,
}

impl FromStr for VectorFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl-vectors" | "jsonl" => Ok(VectorFormat::JsonlVectors),
            "csv-vectors" | "csv" => Ok(VectorFormat::CsvVectors),
            other => Err(Error::InvalidConfig(format!(
                "unknown vector format {other:?}"
            ))),
        }
    }
}

/// Items that were dropped during import.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub rejected: Vec<(String, String)>,
}

#[derive(Deserialize)]
struct VectorRecord {
    id: Label,
    vector: Vec<serde_json::Value>,
}

fn parse_number(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn finish_import(records: Vec<(String, Vec<f64>)>) -> Result<(EmbeddingMatrix, ImportReport)> {
    let mut report = ImportReport::default();
    let mut dim = None;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (id, v) in records {
        let d = *dim.get_or_insert(v.len());
        if v.len() != d {
            return Err(Error::InconsistentDimension {
                expected: d,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            report.rejected.push((id, "non-finite component".into()));
        } else if v.iter().all(|&x| x == 0.0) {
            report.rejected.push((id, "zero vector".into()));
        } else {
            ids.push(id);
            rows.push(v);
        }
    }
    Ok((EmbeddingMatrix::from_rows(ids, rows)?, report))
}

/// Reads externally produced vectors and renormalizes them to unit length.
/// Zero and non-finite vectors are listed in the report instead of failing
/// the import; ragged dimensions fail it.
pub fn import_external(
    path: impl AsRef<Path>,
    format: VectorFormat,
) -> Result<(EmbeddingMatrix, ImportReport)> {
    let file = BufReader::new(fs::File::open(path)?);
    let records = match format {
        VectorFormat::JsonlVectors => {
            let mut out = Vec::new();
            for (i, line) in file.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: VectorRecord =
                    serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
                let id = rec.id.into_string();
                // "NaN" strings and nulls become NaN so they are rejected per item
                let values = rec
                    .vector
                    .iter()
                    .map(|v| parse_number(v).unwrap_or(f64::NAN))
                    .collect();
                out.push((id, values));
            }
            out
        }
        VectorFormat::CsvVectors => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .from_reader(file);
            let mut out = Vec::new();
            for (i, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| Error::parse(i + 1, e.to_string()))?;
                let Some(id) = rec.get(0) else { continue };
                let parsed: Vec<Option<f64>> =
                    rec.iter().skip(1).map(|f| f.trim().parse().ok()).collect();
                if i == 0 && parsed.iter().any(Option::is_none) {
                    continue; // header row
                }
                let values = parsed
                    .into_iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v.ok_or_else(|| {
                            Error::parse(i + 1, format!("column {} is not a number", j + 2))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push((id.trim().to_owned(), values));
            }
            out
        }
    };
    finish_import(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn single_group_dataset() {
        let ds = parse_dataset(Cursor::new(
            "{\"id\":\"a\",\"group\":\"g1\",\"text\":\"x\"}\n{\"id\":\"b\",\"group\":\"g1\"}\n",
        ))
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_groups(), 1);
        assert_eq!(crate::evaluation::count_triplets(&ds), 0);
    }

    #[test]
    fn duplicate_id_names_line() {
        let err = parse_dataset(Cursor::new(
            "{\"id\":\"a\",\"group\":\"g\"}\n\n{\"id\":\"a\",\"group\":\"h\"}\n",
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn roles_and_missing_text() {
        let ds = parse_dataset(Cursor::new(
            "{\"id\":\"d\",\"group\":7,\"role\":\"anchor_only\"}\n{\"id\":\"s\",\"group\":7,\"role\":\"candidate_only\",\"text\":\"t\"}\n",
        ))
        .unwrap();
        assert_eq!(ds.items()[0].role, Role::AnchorOnly);
        assert_eq!(ds.items()[0].text, None);
        assert_eq!(ds.items()[1].group, "7");
        let err = parse_dataset(Cursor::new(
            "{\"id\":\"d\",\"group\":\"g\",\"role\":\"both?\"}\n",
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_dataset(Cursor::new("{\"group\":\"g\"}\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn store_round_trip_and_magic() {
        let m = EmbeddingMatrix::from_rows(
            vec!["x".into(), "y".into()],
            vec![vec![3.0, 4.0, 0.0], vec![0.1, 0.2, 0.3]],
        )
        .unwrap()
        .with_fingerprint("fp");
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &m).unwrap();
        let back = read_embeddings(&mut buf.as_slice()).unwrap();
        assert_eq!(back.ids(), m.ids());
        assert_eq!(back.fingerprint(), "fp");
        for i in 0..2 {
            for (a, b) in back.row(i).iter().zip(m.row(i)) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        buf[1] = b'X';
        assert!(matches!(
            read_embeddings(&mut buf.as_slice()),
            Err(Error::NotAnEmbeddingStore)
        ));
    }

    #[test]
    fn truncated_store() {
        let m = EmbeddingMatrix::from_rows(vec!["x".into()], vec![vec![1.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &m).unwrap();
        let cut = &buf[..buf.len() - 2];
        assert!(matches!(
            read_embeddings(&mut &cut[..]),
            Err(Error::Truncated)
        ));
    }

    #[test]
    fn empty_store() {
        let m = EmbeddingMatrix::from_rows(Vec::new(), Vec::new()).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &m).unwrap();
        let back = read_embeddings(&mut buf.as_slice()).unwrap();
        assert!(back.is_empty());
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn import_jsonl_normalizes() {
        let f = write_tmp("{\"id\":\"a\",\"vector\":[3,4]}\n{\"id\":\"b\",\"vector\":[0,1]}\n");
        let (m, report) = import_external(f.path(), VectorFormat::JsonlVectors).unwrap();
        assert!(report.rejected.is_empty());
        assert_eq!(m.get("a").unwrap(), &[0.6, 0.8]);
        assert_eq!(m.get("b").unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn import_rejects_bad_items_and_ragged_rows() {
        let f = write_tmp("{\"id\":\"a\",\"vector\":[1,\"NaN\"]}\n{\"id\":\"b\",\"vector\":[0,0]}\n{\"id\":\"c\",\"vector\":[1,1]}\n");
        let (m, report) = import_external(f.path(), VectorFormat::JsonlVectors).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(report.rejected.len(), 2);
        assert_eq!(report.rejected[0].0, "a");

        let f = write_tmp("a,1,2,3\nb,1,2,3,4\n");
        let err = import_external(f.path(), VectorFormat::CsvVectors).unwrap_err();
        assert!(matches!(
            err,
            Error::InconsistentDimension {
                expected: 3,
                actual: 4
            }
        ));
    }

    #[test]
    fn import_csv_with_header() {
        let f = write_tmp("id,v1,v2\nq,0,2\n");
        let (m, _) = import_external(f.path(), VectorFormat::CsvVectors).unwrap();
        assert_eq!(m.get("q").unwrap(), &[0.0, 1.0]);
    }
}

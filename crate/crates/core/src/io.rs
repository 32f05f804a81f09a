//! Embedding and feature file formats.
//!
//! * JSON Lines: one `{"id", "modality", "vector"}` record per sample.
//! * `GFB1` binary: the magic bytes `GFB1`, little-endian `u32` row and column
//!   counts, then `rows * cols` little-endian `f32` values in row-major order.
//!   One file per modality; row order is pair order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::rows_to_matrix;
use crate::error::{Error, Result};

pub const GFB_MAGIC: &[u8; 4] = b"GFB1";
const GFB_HEADER_LEN: usize = 12;

/// Encodes a matrix as a `GFB1` byte buffer. Values are narrowed to `f32`.
pub fn encode_gfb(m: &Array2<f64>) -> Result<Vec<u8>> {
    let (rows, cols) = m.dim();
    let rows32 = u32::try_from(rows)
        .map_err(|_| Error::InvalidArgument(format!("{rows} rows do not fit a u32 header")))?;
    let cols32 = u32::try_from(cols)
        .map_err(|_| Error::InvalidArgument(format!("{cols} columns do not fit a u32 header")))?;
    let mut out = Vec::with_capacity(GFB_HEADER_LEN + 4 * rows * cols);
    out.extend_from_slice(GFB_MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a `GFB1` buffer; `origin` only labels error messages.
pub fn decode_gfb(bytes: &[u8], origin: &Path) -> Result<Array2<f64>> {
    if bytes.len() < GFB_HEADER_LEN || &bytes[..4] != GFB_MAGIC {
        return Err(Error::format(origin, "missing GFB1 header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(GFB_HEADER_LEN))
        .ok_or_else(|| Error::format(origin, "header dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "expected {expected} bytes for {rows}x{cols}, found {}",
                bytes.len()
            ),
        ));
    }
    let values: Vec<f64> = bytes[GFB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_gfb(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_atomic(path, &encode_gfb(m)?)
}

pub fn read_gfb(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gfb(&bytes, path)
}

/// One line of an embedding JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub modality: String,
    pub vector: Vec<f64>,
}

/// Writes one record per row of `m`.
pub fn write_embeddings_jsonl(
    path: &Path,
    ids: &[String],
    modality: &str,
    m: &Array2<f64>,
) -> Result<()> {
    if ids.len() != m.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for {} embedding rows",
            ids.len(),
            m.nrows()
        )));
    }
    let mut buf = Vec::new();
    for (id, row) in ids.iter().zip(m.outer_iter()) {
        let rec = EmbeddingRecord {
            id: id.clone(),
            modality: modality.to_owned(),
            vector: row.to_vec(),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_embedding_records(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a single-modality JSONL file into `(ids, modality, matrix)`.
pub fn read_embeddings_jsonl(path: &Path) -> Result<(Vec<String>, String, Array2<f64>)> {
    let records = read_embedding_records(path)?;
    let modality = records
        .first()
        .map(|r| r.modality.clone())
        .ok_or_else(|| Error::format(path, "no records"))?;
    if let Some(r) = records.iter().find(|r| r.modality != modality) {
        return Err(Error::format(
            path,
            format!("mixed modalities '{modality}' and '{}'", r.modality),
        ));
    }
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let m = rows_to_matrix(&rows).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((records.into_iter().map(|r| r.id).collect(), modality, m))
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes `value` as pretty JSON with a trailing newline, atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn gfb_header_layout() {
        let bytes = encode_gfb(&array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(&bytes[..4], b"GFB1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 6 * 4);
    }

    #[test]
    fn gfb_rejects_truncation_and_bad_magic() {
        let mut bytes = encode_gfb(&array![[1.0, 2.0]]).unwrap();
        bytes.pop();
        assert!(decode_gfb(&bytes, Path::new("x")).is_err());
        assert!(decode_gfb(b"GFB2\0\0\0\0\0\0\0\0", Path::new("x")).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m0.jsonl");
        let m = array![[0.1, -0.2], [1.0 / 3.0, 2e-17]];
        let ids = vec!["a".to_string(), "b".to_string()];
        write_embeddings_jsonl(&path, &ids, "m0", &m).unwrap();
        let (ids2, modality, m2) = read_embeddings_jsonl(&path).unwrap();
        assert_eq!(ids2, ids);
        assert_eq!(modality, "m0");
        assert_eq!(m2, m);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"id":"a","modality":"m0","vector":[0.1,-0.2]}"#));
    }

    #[test]
    fn jsonl_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"modality\":\"m0\",\"vector\":[1.0,2.0]}\n{\"id\":\"b\",\"modality\":\"m0\",\"vector\":[1.0]}\n",
        )
        .unwrap();
        assert!(read_embeddings_jsonl(&path).is_err());
    }

    proptest! {
        #[test]
        fn gfb_round_trip_within_f32(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-10.0..10.0));
            let back = decode_gfb(&encode_gfb(&m).unwrap(), Path::new("mem")).unwrap();
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() <= f32::EPSILON as f64 * a.abs().max(1.0));
            }
        }
    }
}

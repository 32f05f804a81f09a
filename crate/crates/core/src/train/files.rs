//! On-disk layout of a generated dataset.
//!
//! ```text
//! DIR/spec.json     generator spec
//! DIR/pairs.jsonl   {"id", "split", "cluster"} per pair, in pair order
//! DIR/m{i}.gfb      modality i features, one row per pair, same order
//! ```
//!
//! Features are stored as `f32`, so a dataset read back from disk differs
//! from the in-memory one by at most `f32` rounding.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::data::{PairedSplit, SyntheticDataset, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::io::{read_gfb, read_json, write_atomic, write_gfb, write_json};

pub const SPEC_FILE: &str = "spec.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";

pub fn feature_file(modality: usize) -> String {
    format!("m{modality}.gfb")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub split: Split,
    pub cluster: usize,
}

/// Writes `data` under `dir` and returns the file names written.
pub fn save_dataset(dir: &Path, data: &SyntheticDataset) -> Result<Vec<String>> {
    let mut rows: Vec<(&str, Split, usize, usize)> = Vec::new();
    for (split, tag) in [(&data.train, Split::Train), (&data.test, Split::Test)] {
        for (r, id) in split.ids.iter().enumerate() {
            rows.push((id, tag, split.clusters[r], r));
        }
    }
    rows.sort_by(|a, b| a.0.cmp(b.0));

    let mut index = Vec::new();
    for &(id, split, cluster, _) in &rows {
        serde_json::to_writer(
            &mut index,
            &PairRecord {
                id: id.to_owned(),
                split,
                cluster,
            },
        )?;
        index.push(b'\n');
    }

    let mut written = vec![SPEC_FILE.to_owned(), PAIRS_FILE.to_owned()];
    write_json(&dir.join(SPEC_FILE), &data.spec)?;
    write_atomic(&dir.join(PAIRS_FILE), &index)?;
    for m in 0..data.train.num_modalities() {
        let d = data.train.features[m].ncols();
        let mut all = Array2::zeros((rows.len(), d));
        for (out, &(_, split, _, r)) in all.outer_iter_mut().zip(&rows) {
            let src = match split {
                Split::Train => &data.train,
                Split::Test => &data.test,
            };
            let mut out = out;
            out.assign(&src.features[m].row(r));
        }
        let name = feature_file(m);
        write_gfb(&dir.join(&name), &all)?;
        written.push(name);
    }
    Ok(written)
}

fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(out)
}

/// Reads a dataset written by [`save_dataset`]. Latent vectors are not stored.
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let spec: SyntheticDatasetSpec = read_json(&dir.join(SPEC_FILE))?;
    let pairs_path = dir.join(PAIRS_FILE);
    let pairs = read_pairs(&pairs_path)?;
    let features = (0..spec.num_modalities())
        .map(|m| {
            let path = dir.join(feature_file(m));
            let f = read_gfb(&path)?;
            if f.nrows() != pairs.len() {
                return Err(Error::format(
                    &path,
                    format!("{} rows for {} pairs", f.nrows(), pairs.len()),
                ));
            }
            if f.ncols() != spec.d_feat[m] {
                return Err(Error::format(
                    &path,
                    format!("{} columns, spec says {}", f.ncols(), spec.d_feat[m]),
                ));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;

    let split = |tag: Split| {
        let rows: Vec<usize> = (0..pairs.len())
            .filter(|&r| pairs[r].split == tag)
            .collect();
        PairedSplit {
            ids: rows.iter().map(|&r| pairs[r].id.clone()).collect(),
            clusters: rows.iter().map(|&r| pairs[r].cluster).collect(),
            features: features.iter().map(|f| f.select(Axis(0), &rows)).collect(),
            latent: None,
        }
    };
    Ok(SyntheticDataset {
        train: split(Split::Train),
        test: split(Split::Test),
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::generate_synthetic;

    #[test]
    fn save_then_load_matches_to_f32_precision() {
        let data = generate_synthetic(&SyntheticDatasetSpec {
            n_pairs: 50,
            d_feat: vec![4, 3, 5],
            ..SyntheticDatasetSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_dataset(dir.path(), &data).unwrap();
        assert_eq!(
            files,
            ["spec.json", "pairs.jsonl", "m0.gfb", "m1.gfb", "m2.gfb"]
        );

        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.spec, data.spec);
        for (a, b) in [(&back.train, &data.train), (&back.test, &data.test)] {
            assert_eq!(a.ids, b.ids);
            assert_eq!(a.clusters, b.clusters);
            assert!(a.latent.is_none());
            for (fa, fb) in a.features.iter().zip(&b.features) {
                let worst = (fa - fb).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
                assert!(worst < 1e-5, "{worst}");
            }
        }
    }

    #[test]
    fn truncated_feature_file_is_a_format_error() {
        let data = generate_synthetic(&SyntheticDatasetSpec {
            n_pairs: 20,
            ..SyntheticDatasetSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let path = dir.path().join("m1.gfb");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}

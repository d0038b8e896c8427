//! Line-oriented embedding files and JSON suite manifests.
//!
//! ```text
//! # optional comments
//! dim=3 classes=2
//! 0,0.25,-1.5,3
//! 1,1e-3,2,0.5
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! write followed by a read reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::model::EmbeddingDataset;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_header(path: &Path, line_no: usize, line: &str) -> Result<(usize, usize)> {
    let mut dim = None;
    let mut classes = None;
    for tok in line.split_whitespace() {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(path, line_no, format!("expected key=value in header, got `{tok}`")))?;
        let n: usize = val
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("`{key}` must be a non-negative integer")))?;
        match key {
            "dim" => dim = Some(n),
            "classes" => classes = Some(n),
            _ => return Err(parse_err(path, line_no, format!("unknown header key `{key}`"))),
        }
    }
    match (dim, classes) {
        (Some(d), Some(c)) if d >= 1 && c >= 2 => Ok((d, c)),
        (Some(_), Some(_)) => Err(parse_err(path, line_no, "need dim >= 1 and classes >= 2")),
        _ => Err(parse_err(path, line_no, "header must be `dim=<d> classes=<C>`")),
    }
}

pub fn parse_embedding_dataset(text: &str, path: &Path) -> Result<EmbeddingDataset> {
    let mut header = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((dim, classes)) = header else {
            header = Some(parse_header(path, line_no, line)?);
            continue;
        };
        let mut fields = line.split(',').map(str::trim);
        let label_tok = fields.next().unwrap_or_default();
        let label: i64 = label_tok
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("label `{label_tok}` is not an integer")))?;
        if label < 0 {
            return Err(parse_err(path, line_no, format!("negative label {label}")));
        }
        if label as usize >= classes {
            return Err(parse_err(path, line_no, format!("label {label} >= classes {classes}")));
        }
        let start = values.len();
        for tok in fields {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("`{tok}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, format!("non-finite value `{tok}`")));
            }
            values.push(v);
        }
        let got = values.len() - start;
        if got != dim {
            return Err(parse_err(path, line_no, format!("expected {dim} values, found {got}")));
        }
        labels.push(label as usize);
    }
    let Some((dim, classes)) = header else {
        return Err(parse_err(path, 1, "missing `dim=<d> classes=<C>` header"));
    };
    let features = DenseMatrix::from_vec(labels.len(), dim, values)?;
    EmbeddingDataset::new(classes, features, labels)
}

pub fn load_embedding_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_embedding_dataset(&text, path)
}

pub fn format_embedding_dataset(ds: &EmbeddingDataset) -> String {
    let mut out = format!("dim={} classes={}\n", ds.dim(), ds.classes());
    for (i, &l) in ds.labels().iter().enumerate() {
        let _ = write!(out, "{l}");
        for v in ds.embedding(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_embedding_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_embedding_dataset(ds)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
}

/// Source file plus target domain files in stream order. Relative paths are
/// resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub source: ManifestEntry,
    pub domains: Vec<ManifestEntry>,
}

pub struct LoadedSuite {
    pub source: EmbeddingDataset,
    pub domains: Vec<(String, EmbeddingDataset)>,
}

impl SuiteManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Manifest {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(&self, base: &Path) -> Result<LoadedSuite> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let source = load_embedding_dataset(resolve(&self.source.path))?;
        let domains = self
            .domains
            .iter()
            .map(|e| Ok((e.name.clone(), load_embedding_dataset(resolve(&e.path))?)))
            .collect::<Result<Vec<_>>>()?;
        if self.domains.is_empty() {
            return Err(Error::config("manifest lists no target domains"));
        }
        Ok(LoadedSuite { source, domains })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.txt")
    }

    #[test]
    fn roundtrip_bit_exact() {
        let vals = vec![0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, -0.0, 5e-324];
        let ds = EmbeddingDataset::new(3, DenseMatrix::from_vec(2, 3, vals).unwrap(), vec![2, 0]).unwrap();
        let back = parse_embedding_dataset(&format_embedding_dataset(&ds), p()).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.features().values().iter().zip(ds.features().values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let ds = parse_embedding_dataset("# hi\n\ndim=2 classes=2\n# mid\n1,0.5,2\n", p()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[1]);
    }

    #[test]
    fn short_row_names_line() {
        let err = parse_embedding_dataset("dim=3 classes=2\n0,1,2,3\n1,1,2\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn negative_and_out_of_range_labels() {
        let err = parse_embedding_dataset("dim=1 classes=2\n-1,0.5\n", p()).unwrap_err();
        assert!(err.to_string().contains("negative label"), "{err}");
        let err = parse_embedding_dataset("dim=1 classes=2\n0,1\n2,0.5\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn bad_header_and_numbers() {
        assert!(matches!(
            parse_embedding_dataset("0,1,2\n", p()).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
        assert!(matches!(
            parse_embedding_dataset("dim=2 classes=2\n0,1,abc\n", p()).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
        assert!(matches!(
            parse_embedding_dataset("dim=1 classes=2\n0,NaN\n", p()).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn missing_file() {
        let err = load_embedding_dataset("/definitely/not/here.txt").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}

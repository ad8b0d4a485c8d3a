//! On-disk datasets: a JSON manifest next to three binary matrix files.
//!
//! Matrix layout (little-endian):
//!
//! ```text
//! "CPTK" | u32 version | u64 rows | u64 cols | payload (row-major)
//! ```
//!
//! Features and scores are `f32`; labels are `u32` with one column. The
//! manifest records shapes, whether the scores are logits or probabilities,
//! an optional temperature and the SHA-256 of every matrix file.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::example::LabeledExample;
use crate::seed::rng_for;
use crate::simplex::ProbabilityVector;
use crate::tempscale::apply_temperature;

pub const MATRIX_MAGIC: &[u8; 4] = b"CPTK";
pub const MATRIX_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const LOCK_NAME: &str = ".cptk.lock";

const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Scalar types a matrix payload can hold.
pub trait Element: Copy + PartialEq + std::fmt::Debug {
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: [u8; 4]) -> Self;
}

impl Element for f32 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: [u8; 4]) -> Self {
        f32::from_le_bytes(bytes)
    }
}

impl Element for u32 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: [u8; 4]) -> Self {
        u32::from_le_bytes(bytes)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape {
                context: "matrix payload",
                expected: rows.saturating_mul(cols),
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    context: "matrix row length",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Parses a matrix file; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MATRIX_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "CPTK".into(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                reason: format!("header truncated at {} bytes", bytes.len()),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MATRIX_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: MATRIX_VERSION,
            });
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .filter(|&n| n == payload.len() as u64);
        if expected.is_none() {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                reason: format!("{rows} x {cols} header but {} payload bytes", payload.len()),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| T::read_le(c.try_into().unwrap()))
            .collect();
        Self::new(rows as usize, cols as usize, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl Matrix<f32> {
    /// Row `i` widened to `f64`.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }
}

/// What the score matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    /// Path relative to the dataset directory.
    pub path: String,
    /// Lowercase hex SHA-256 of the file contents.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub features: FileRef,
    pub scores: FileRef,
    pub labels: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub scores: ScoreKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub files: ManifestFiles,
}

/// A dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: ScoreKind,
    pub temperature: Option<f64>,
    pub class_names: Option<Vec<String>>,
    pub features: Matrix<f32>,
    pub scores: Matrix<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.scores.cols()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    /// Checks shapes, label range, class names and temperature.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.rows() != n || self.scores.rows() != n {
            return Err(Error::Shape {
                context: "row count of features/scores vs labels",
                expected: n,
                found: if self.features.rows() != n {
                    self.features.rows()
                } else {
                    self.scores.rows()
                },
            });
        }
        let k = self.k();
        if k < 2 {
            return Err(Error::invalid("k", format!("{k} classes, need at least 2")));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y as usize >= k) {
            return Err(Error::ClassOutOfRange {
                class: bad as usize,
                k,
            });
        }
        if let Some(names) = &self.class_names {
            if names.len() != k {
                return Err(Error::Shape {
                    context: "class names",
                    expected: k,
                    found: names.len(),
                });
            }
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid(
                    "temperature",
                    format!("{t} must be finite and > 0"),
                ));
            }
        }
        if self.kind == ScoreKind::Probabilities && self.temperature.is_some() {
            return Err(Error::invalid(
                "temperature",
                "only meaningful for stored logits",
            ));
        }
        Ok(())
    }

    /// Class probabilities of row `i`. Logits go through a softmax at
    /// `temperature`, falling back to the manifest value, then to 1.
    pub fn probabilities(&self, i: usize, temperature: Option<f64>) -> Result<ProbabilityVector> {
        let row = self.scores.row_f64(i);
        match self.kind {
            ScoreKind::Probabilities => ProbabilityVector::new(row),
            ScoreKind::Logits => {
                apply_temperature(&row, temperature.or(self.temperature).unwrap_or(1.0))
            }
        }
    }

    /// Labeled examples for the given rows.
    pub fn examples(
        &self,
        rows: &[usize],
        temperature: Option<f64>,
    ) -> Result<Vec<LabeledExample>> {
        rows.iter()
            .map(|&i| {
                LabeledExample::new(
                    self.features.row_f64(i),
                    self.probabilities(i, temperature)?,
                    self.labels[i] as usize,
                )
            })
            .collect()
    }
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Exclusive writer lock on a dataset directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the three matrices and the manifest into `dir` (created if
/// missing). Returns the manifest path.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    data.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _lock = DirLock::acquire(dir)?;

    let labels = Matrix::new(data.labels.len(), 1, data.labels.clone())?;
    let put = |name: &str, bytes: Vec<u8>| -> Result<FileRef> {
        write_atomic(&dir.join(name), &bytes)?;
        Ok(FileRef {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
        })
    };
    let files = ManifestFiles {
        features: put("features.cptk", data.features.to_bytes())?,
        scores: put("scores.cptk", data.scores.to_bytes())?,
        labels: put("labels.cptk", labels.to_bytes())?,
    };
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        name: data.name.clone(),
        n: data.n(),
        k: data.k(),
        d: data.d(),
        scores: data.kind,
        temperature: data.temperature,
        class_names: data.class_names.clone(),
        files,
    };
    let path = dir.join(MANIFEST_NAME);
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            path,
            found: manifest.format_version,
            supported: MANIFEST_VERSION,
        });
    }
    Ok(manifest)
}

fn read_checked<T: Element>(dir: &Path, file: &FileRef) -> Result<Matrix<T>> {
    let rel = Path::new(&file.path);
    if rel.is_absolute()
        || rel
            .components()
            .any(|c| matches!(c, std::path::Component::ParentDir))
    {
        return Err(Error::invalid(
            "manifest",
            format!("file path {:?} leaves the dataset directory", file.path),
        ));
    }
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(&file.sha256) {
        return Err(Error::Checksum {
            path,
            expected: file.sha256.clone(),
            actual,
        });
    }
    Matrix::from_bytes(&bytes, &path)
}

fn expect_shape(
    path: &Path,
    what: &str,
    rows: usize,
    cols: usize,
    want: (usize, usize),
) -> Result<()> {
    if (rows, cols) == want {
        Ok(())
    } else {
        Err(Error::Dimension {
            path: path.to_path_buf(),
            reason: format!(
                "{what} is {rows} x {cols}, manifest says {} x {}",
                want.0, want.1
            ),
        })
    }
}

/// Loads and verifies a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let features: Matrix<f32> = read_checked(dir, &m.files.features)?;
    let scores: Matrix<f32> = read_checked(dir, &m.files.scores)?;
    let labels: Matrix<u32> = read_checked(dir, &m.files.labels)?;
    expect_shape(
        &dir.join(&m.files.features.path),
        "features",
        features.rows(),
        features.cols(),
        (m.n, m.d),
    )?;
    expect_shape(
        &dir.join(&m.files.scores.path),
        "scores",
        scores.rows(),
        scores.cols(),
        (m.n, m.k),
    )?;
    expect_shape(
        &dir.join(&m.files.labels.path),
        "labels",
        labels.rows(),
        labels.cols(),
        (m.n, 1),
    )?;
    let data = Dataset {
        name: m.name,
        kind: m.scores,
        temperature: m.temperature,
        class_names: m.class_names,
        features,
        scores,
        labels: labels.data,
    };
    data.validate()?;
    Ok(data)
}

/// Disjoint index sets covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Errors naming the phase whose fold is empty.
    pub fn require(&self, train: bool, val: bool, test: bool) -> Result<()> {
        if train && self.train.is_empty() {
            return Err(Error::Empty("training fold"));
        }
        if val && self.val.is_empty() {
            return Err(Error::Empty("validation fold"));
        }
        if test && self.test.is_empty() {
            return Err(Error::Empty("test fold"));
        }
        Ok(())
    }
}

/// Seeded shuffle of `0..n`, then `floor(n * f_train)` and `floor(n * f_val)`
/// rows for the first two folds and the remainder for test.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::invalid(
            "fractions",
            format!("{fractions:?} must be finite and >= 0"),
        ));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "fractions",
            format!("{fractions:?} sum to {total}, not 1"),
        ));
    }
    let n_train = (n as f64 * fractions[0]).floor() as usize;
    let n_val = ((n as f64 * fractions[1]).floor() as usize).min(n - n_train);
    split_counts(n, [n_train, n_val], seed)
}

/// Like [`split`] with explicit sizes for the first two folds.
pub fn split_counts(n: usize, counts: [usize; 2], seed: u64) -> Result<Split> {
    if counts[0] + counts[1] > n {
        return Err(Error::invalid(
            "split",
            format!("{} + {} rows requested from {n}", counts[0], counts[1]),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "split", 0));
    let test = idx.split_off(counts[0] + counts[1]);
    let val = idx.split_off(counts[0]);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

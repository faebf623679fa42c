//! Feature files and the stream manifest.
//!
//! CSV files carry a `label,f0,f1,…` header and one row per instance. Binary
//! files start with a 16-byte header: the magic `DFSB`, a format version, the
//! row count and the feature count, each a little-endian `u32`. Every row is
//! then the label as a little-endian `u64` followed by the features as
//! little-endian `f64`.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SessionData, SessionDataset, SessionStream, Split};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MANIFEST_FORMAT: &str = "dfscil-stream/v1";
pub const MANIFEST_NAME: &str = "manifest.toml";
pub const BINARY_MAGIC: [u8; 4] = *b"DFSB";
const BINARY_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    #[default]
    Csv,
    Binary,
}

impl FeatureFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FeatureFormat::Csv => "csv",
            FeatureFormat::Binary => "bin",
        }
    }

    fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => FeatureFormat::Binary,
            _ => FeatureFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSession {
    pub train: String,
    pub test: String,
    /// Training classes of the session, ascending.
    pub classes: Vec<u32>,
}

/// Session 0 is the base session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub input_dim: usize,
    pub way: usize,
    pub shot: usize,
    pub sessions: Vec<ManifestSession>,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn write_features(path: &Path, data: &SessionDataset, format: FeatureFormat) -> Result<()> {
    match format {
        FeatureFormat::Csv => write_csv(path, data),
        FeatureFormat::Binary => write_binary(path, data),
    }
}

/// Read a feature file; the format follows the extension (`.bin` is binary,
/// anything else CSV).
pub fn read_features(path: &Path, split: Split) -> Result<SessionDataset> {
    match FeatureFormat::from_path(path) {
        FeatureFormat::Csv => read_csv(path, split),
        FeatureFormat::Binary => read_binary(path, split),
    }
}

fn write_csv(path: &Path, data: &SessionDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    let mut header = vec!["label".to_string()];
    header.extend((0..data.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io)?;
    let mut record = Vec::with_capacity(data.dim() + 1);
    for (i, &label) in data.labels.iter().enumerate() {
        record.clear();
        record.push(label.to_string());
        // Display for f64 is the shortest string that parses back exactly
        record.extend(data.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(io::Error::other(e))
}

fn read_csv(path: &Path, split: Split) -> Result<SessionDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(path, 0, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.get(0) != Some("label") {
        return Err(parse_err(path, 1, "header must start with `label`"));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(path, 1, format!("expected column `f{j}`, found `{name}`")));
        }
    }
    let dim = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", dim + 1, record.len())));
        }
        let label = record[0]
            .trim()
            .parse::<u32>()
            .map_err(|e| parse_err(path, line, format!("bad label `{}`: {e}", &record[0])))?;
        labels.push(label);
        for (j, field) in record.iter().skip(1).enumerate() {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(path, line, format!("column f{j}: bad value `{field}`: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column f{j}: non-finite value")));
            }
            features.push(v);
        }
    }
    SessionDataset::new(Matrix::new(labels.len(), dim, features)?, labels, split)
}

fn write_binary(path: &Path, data: &SessionDataset) -> Result<()> {
    let rows = u32::try_from(data.len()).map_err(|_| Error::config("too many rows for binary format"))?;
    let cols = u32::try_from(data.dim()).map_err(|_| Error::config("too many columns for binary format"))?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for (i, &label) in data.labels.iter().enumerate() {
        w.write_all(&(label as u64).to_le_bytes())?;
        for v in data.features.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_binary(path: &Path, split: Split) -> Result<SessionDataset> {
    let bytes = fs::read(path)?;
    // for binary files `line` carries the byte offset
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(path, 0, "file shorter than the 16-byte header"));
    }
    if bytes[0..4] != BINARY_MAGIC {
        return Err(parse_err(path, 0, "bad magic"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != BINARY_VERSION {
        return Err(parse_err(path, 4, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let row_len = 8 * (cols + 1);
    let expected = HEADER_LEN + rows * row_len;
    if bytes.len() != expected {
        return Err(parse_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(rows);
    let mut features = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let off = HEADER_LEN + r * row_len;
        let label = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let label = u32::try_from(label).map_err(|_| parse_err(path, off as u64, format!("label {label} out of range")))?;
        labels.push(label);
        for c in 0..cols {
            let o = off + 8 + 8 * c;
            let v = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(parse_err(path, o as u64, "non-finite value"));
            }
            features.push(v);
        }
    }
    SessionDataset::new(Matrix::new(rows, cols, features)?, labels, split)
}

/// Write every split plus `manifest.toml` into `dir`. Refuses to replace an
/// existing manifest unless `force` is set.
pub fn save_stream(stream: &SessionStream, dir: &Path, format: FeatureFormat, force: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST_NAME);
    if manifest_path.exists() && !force {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::AlreadyExists,
            format!("{} already exists (use force to overwrite)", manifest_path.display()),
        )));
    }
    let ext = format.extension();
    let mut sessions = Vec::with_capacity(stream.num_sessions());
    for (t, s) in stream.sessions().enumerate() {
        let train = format!("session{t}_train.{ext}");
        let test = format!("session{t}_test.{ext}");
        write_features(&dir.join(&train), &s.train, format)?;
        write_features(&dir.join(&test), &s.test, format)?;
        sessions.push(ManifestSession {
            train,
            test,
            classes: s.train.classes().into_iter().collect(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        input_dim: stream.input_dim(),
        way: stream.way,
        shot: stream.shot,
        sessions,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Io(io::Error::other(e)))?;
    fs::write(&manifest_path, text)?;
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1);
        parse_err(path, line, e.message().to_string())
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(parse_err(path, 1, format!("unsupported manifest format `{}`", manifest.format)));
    }
    if manifest.sessions.is_empty() {
        return Err(parse_err(path, 1, "manifest lists no sessions"));
    }
    Ok(manifest)
}

/// Load and validate a stream. Relative file names resolve against the
/// manifest's directory.
pub fn load_stream(manifest_path: &Path) -> Result<SessionStream> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut sessions = Vec::with_capacity(manifest.sessions.len());
    for (t, entry) in manifest.sessions.iter().enumerate() {
        let train = read_features(&dir.join(&entry.train), Split::Train)?;
        let test = read_features(&dir.join(&entry.test), Split::Test)?;
        for (what, ds) in [("train", &train), ("test", &test)] {
            if ds.dim() != manifest.input_dim && !ds.is_empty() {
                return Err(Error::Validation {
                    session: t,
                    message: format!("{what} file has {} features, manifest says {}", ds.dim(), manifest.input_dim),
                });
            }
        }
        let classes: Vec<u32> = train.classes().into_iter().collect();
        if classes != entry.classes {
            return Err(Error::Validation {
                session: t,
                message: format!("manifest lists classes {:?}, training file has {classes:?}", entry.classes),
            });
        }
        sessions.push(SessionData { train, test });
    }
    let mut iter = sessions.into_iter();
    let stream = SessionStream {
        base: iter.next().expect("non-empty"),
        novel: iter.collect(),
        way: manifest.way,
        shot: manifest.shot,
    };
    stream.validate()?;
    Ok(stream)
}

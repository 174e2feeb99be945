//! Dataset loaders: IDX (MNIST layout) and headered CSV.

use std::path::{Path, PathBuf};

use sparsefed_core::models::Batch;

use crate::error::{CliError, FormatError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}", path = path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, LoadError> {
    std::fs::read(path).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> FormatError {
        FormatError { path: self.path.to_path_buf(), offset: offset as u64, message: message.into() }
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.fail(self.pos, "truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.fail(self.bytes.len(), format!("truncated data: expected {n} bytes after offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Parses an IDX file with the given magic number. Returns the dimension
/// sizes and the raw unsigned-byte payload.
pub fn parse_idx(bytes: &[u8], magic: u32, path: &Path) -> Result<(Vec<usize>, Vec<u8>), FormatError> {
    let mut c = Cursor { bytes, pos: 0, path };
    let found = c.u32()?;
    if found != magic {
        return Err(c.fail(0, format!("bad magic number {found:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let total = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let total = total.ok_or_else(|| c.fail(4, "dimension sizes overflow"))?;
    let payload = c.take(total)?.to_vec();
    if c.pos != bytes.len() {
        return Err(c.fail(c.pos, "trailing bytes after payload"));
    }
    Ok((dims, payload))
}

/// Loads an image file and a label file in IDX format. Pixels are scaled
/// into `[0, 1]` and flattened row-major; labels pair by position.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Batch, LoadError> {
    let (idims, pixels) = parse_idx(&read(images)?, IDX_IMAGES_MAGIC, images)?;
    let (ldims, raw_labels) = parse_idx(&read(labels)?, IDX_LABELS_MAGIC, labels)?;
    if idims[0] != ldims[0] {
        return Err(FormatError {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {} images", ldims[0], idims[0]),
        }
        .into());
    }
    let dim = idims[1] * idims[2];
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels_vec = raw_labels.iter().map(|&l| l as usize).collect();
    Batch::new(features, labels_vec, dim).map_err(|e| {
        FormatError { path: images.to_path_buf(), offset: 0, message: e.to_string() }.into()
    })
}

/// Loads a CSV dataset with header `feature_0,...,feature_{m-1},label`.
pub fn load_csv(path: &Path) -> Result<Batch, LoadError> {
    let bytes = read(path)?;
    let fail = |offset: u64, message: String| FormatError { path: path.to_path_buf(), offset, message };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header = rdr.headers().map_err(|e| fail(0, e.to_string()))?.clone();
    let m = header.len().saturating_sub(1);
    let expected = (0..m).map(|j| format!("feature_{j}")).chain(["label".to_string()]);
    if header.len() < 2 || !header.iter().eq(expected) {
        return Err(fail(0, "header must be feature_0,...,feature_{m-1},label".into()).into());
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            fail(offset, e.to_string())
        })?;
        let pos = rec.position().expect("records from a reader carry positions");
        let at = |msg: String| fail(pos.byte(), format!("line {}: {msg}", pos.line()));
        for field in rec.iter().take(m) {
            let v: f64 = field.trim().parse().map_err(|_| at(format!("bad feature {field:?}")))?;
            if !v.is_finite() {
                return Err(at(format!("non-finite feature {field:?}")).into());
            }
            features.push(v);
        }
        let l = &rec[m];
        labels.push(l.trim().parse::<usize>().map_err(|_| at(format!("bad label {l:?}")))?);
    }
    Batch::new(features, labels, m).map_err(|e| fail(0, e.to_string()).into())
}

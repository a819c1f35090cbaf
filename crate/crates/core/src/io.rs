//! Matrix files, checkpoints, run manifests and the deconvolution cache.
//!
//! Matrix files start with the magic `CDSRMAT1`. The text form is a header
//! line `# CDSRMAT1 rows cols` followed by comma-separated rows (`NaN` for
//! missing values). The binary form is the magic, rows and cols as `u64`,
//! an encoding byte, a NaN flag byte, then row-major little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deconv::DeconvConfig;
use crate::dynamics::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::observation::{ConvDecoder, HrfFilter};

pub const MATRIX_MAGIC: &[u8; 8] = b"CDSRMAT1";
pub const CHECKPOINT_MAGIC: &str = "CONVDSR1";
const BINARY_HEADER_LEN: usize = 8 + 8 + 8 + 1 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixEncoding {
    Text,
    Binary,
}

impl MatrixEncoding {
    fn code(self) -> u8 {
        match self {
            MatrixEncoding::Text => 0,
            MatrixEncoding::Binary => 1,
        }
    }
}

impl std::str::FromStr for MatrixEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "csv" => Ok(MatrixEncoding::Text),
            "binary" | "bin" => Ok(MatrixEncoding::Binary),
            other => Err(Error::Config(format!("unknown matrix encoding '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatrixFileHeader {
    pub rows: usize,
    pub cols: usize,
    pub encoding: MatrixEncoding,
    pub has_nan: bool,
}

pub fn matrix_to_text(m: &Matrix) -> String {
    let mut out = format!("# CDSRMAT1 {} {}\n", m.rows(), m.cols());
    for t in 0..m.rows() {
        let row: Vec<String> = m
            .row(t)
            .iter()
            .map(|v| if v.is_nan() { "NaN".to_string() } else { format!("{v:?}") })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_text(text: &str) -> Result<Matrix> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty matrix file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "#" || fields[1] != "CDSRMAT1" {
        return Err(Error::Format(format!("bad matrix header '{header}'")));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad dimension '{s}' in matrix header")))
    };
    let (rows, cols) = (parse_dim(fields[2])?, parse_dim(fields[3])?);
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0usize;
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let before = data.len();
        for cell in line.split(',') {
            let cell = cell.trim();
            let v = if cell.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                cell.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: cannot parse '{cell}'", k + 2)))?
            };
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::Format(format!(
                "line {}: expected {cols} values, found {}",
                k + 2,
                data.len() - before
            )));
        }
    }
    if seen != rows {
        return Err(Error::Format(format!("header declares {rows} rows, found {seen}")));
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn matrix_to_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    out.push(MatrixEncoding::Binary.code());
    out.push(u8::from(m.has_nan()));
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn binary_header(bytes: &[u8]) -> Result<MatrixFileHeader> {
    if bytes.len() < BINARY_HEADER_LEN || &bytes[..8] != MATRIX_MAGIC {
        return Err(Error::Format("missing CDSRMAT1 binary header".into()));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (word(8), word(16));
    if bytes[24] != MatrixEncoding::Binary.code() {
        return Err(Error::Format(format!("unsupported encoding byte {}", bytes[24])));
    }
    Ok(MatrixFileHeader {
        rows,
        cols,
        encoding: MatrixEncoding::Binary,
        has_nan: bytes[25] != 0,
    })
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let header = binary_header(bytes)?;
    let n = header
        .rows
        .checked_mul(header.cols)
        .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
    let payload = &bytes[BINARY_HEADER_LEN..];
    if payload.len() != 8 * n {
        return Err(Error::Format(format!(
            "header declares {}x{} values, payload holds {} bytes",
            header.rows,
            header.cols,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(header.rows, header.cols, data)
}

/// Parses either encoding, deciding by the leading bytes.
pub fn matrix_from_any(bytes: &[u8]) -> Result<Matrix> {
    if bytes.starts_with(MATRIX_MAGIC) {
        matrix_from_bytes(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("matrix file is neither text nor binary".into()))?;
        matrix_from_text(text)
    }
}

pub fn write_matrix(path: &Path, m: &Matrix, encoding: MatrixEncoding) -> Result<()> {
    let bytes = match encoding {
        MatrixEncoding::Text => matrix_to_text(m).into_bytes(),
        MatrixEncoding::Binary => matrix_to_bytes(m),
    };
    write_atomic(path, &bytes)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    matrix_from_any(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes through a temporary sibling file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub decoder: ConvDecoder,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("{CHECKPOINT_MAGIC}\n").into_bytes();
        serde_json::to_writer(&mut out, self).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = format!("{CHECKPOINT_MAGIC}\n");
        let body = bytes
            .strip_prefix(head.as_bytes())
            .ok_or_else(|| Error::Format(format!("checkpoint does not start with {CHECKPOINT_MAGIC}")))?;
        let ck: Checkpoint = serde_json::from_slice(body).map_err(|e| Error::Format(format!("checkpoint body: {e}")))?;
        // re-validate shapes through the constructors
        ModelParams::new(
            ck.params.a.clone(),
            ck.params.w1.clone(),
            ck.params.w2.clone(),
            ck.params.h1.clone(),
            ck.params.h2.clone(),
            ck.params.variant,
        )?;
        ConvDecoder::new(
            ck.decoder.b.clone(),
            ck.decoder.j.clone(),
            ck.decoder.hrf.clone(),
            ck.decoder.gamma.clone(),
            ck.decoder.mode,
        )?;
        if ck.decoder.latent_dim() != ck.params.latent_dim() {
            return Err(Error::Format("checkpoint decoder and model disagree on M".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// Run manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Verbatim text of the config the run was started from.
    pub config_snapshot: String,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: BTreeMap<String, String>,
    /// Command-specific facts such as the split index or a cache key.
    pub extra: BTreeMap<String, String>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, config_snapshot: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_snapshot: config_snapshot.to_string(),
            config_hash: sha256_hex(config_snapshot.as_bytes()),
            input_hashes: BTreeMap::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            finished_unix: 0.0,
            outputs: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.input_hashes.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Records an output file with the hash of its current contents.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.outputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Sets the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Deconvolution cache

/// Cache key over the input file contents, the filter taps and the
/// deconvolution settings.
pub fn deconv_cache_key(input: &[u8], filter: &HrfFilter, cfg: &DeconvConfig) -> String {
    let mut h = Sha256::new();
    h.update(input);
    for t in &filter.taps {
        h.update(t.to_le_bytes());
    }
    h.update(format!("{cfg:?}").as_bytes());
    hex::encode(h.finalize())
}

/// Directory holding cached deconvolutions: `$CONVDSR_CACHE` if set,
/// otherwise `.convdsr-cache` next to the input file.
pub fn cache_dir(input_path: &Path) -> PathBuf {
    match std::env::var_os("CONVDSR_CACHE") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => input_path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join(".convdsr-cache"),
    }
}

/// Outcome of a cached deconvolution.
pub struct CachedDeconv {
    pub matrix: Matrix,
    pub hit: bool,
    pub key: String,
}

/// Deconvolves `input_path`, reusing a cached result when the key matches.
pub fn deconvolve_cached(input_path: &Path, filter: &HrfFilter, cfg: &DeconvConfig) -> Result<CachedDeconv> {
    let bytes = fs::read(input_path)?;
    let key = deconv_cache_key(&bytes, filter, cfg);
    let entry = cache_dir(input_path).join(format!("{key}.cdsr"));
    if let Ok(cached) = fs::read(&entry) {
        if let Ok(matrix) = matrix_from_bytes(&cached) {
            return Ok(CachedDeconv { matrix, hit: true, key });
        }
    }
    let x = matrix_from_any(&bytes)?;
    let matrix = crate::deconv::deconvolve_matrix(&x, filter, cfg)?;
    write_matrix(&entry, &matrix, MatrixEncoding::Binary)?;
    Ok(CachedDeconv { matrix, hit: false, key })
}

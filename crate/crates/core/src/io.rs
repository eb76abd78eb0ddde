//! File formats.
//!
//! JSON files carry a `format` tag and a `version`; both are checked on load.
//! Distances and embeddings may also be stored in a binary container:
//!
//! ```text
//! b"DFMK" | version: u32 | C: u32 | s: u32 | row-major f64 payload
//! ```
//!
//! all little-endian. For distances the payload is `C x s x s`; for
//! embeddings it is `C x s x dim`, with `dim` inferred from the payload size.
//! Writes go to a temporary file that is then renamed over the destination.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{DistanceMatrix, DistanceSet};
use crate::sampler::{LogitsEntry, LogitsTable, TargetDistribution};
use crate::scheduler::KoSchedule;

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 4] = b"DFMK";
const HEADER_LEN: usize = 16;

pub const SCHEDULE_FORMAT: &str = "dfmk-schedule";
pub const DISTANCES_FORMAT: &str = "dfmk-distances";
pub const EMBEDDINGS_FORMAT: &str = "dfmk-embeddings";
pub const TARGET_FORMAT: &str = "dfmk-target";
pub const TOKENS_FORMAT: &str = "dfmk-tokens";
pub const LOGITS_FORMAT: &str = "dfmk-logits";
pub const REPORT_FORMAT: &str = "dfmk-report";

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Serializes `body` (which must be a JSON object) with a format header.
pub fn to_tagged_json<T: Serialize>(format: &str, body: &T) -> Result<String> {
    let mut value = serde_json::to_value(body)?;
    let obj = value.as_object_mut().ok_or_else(|| Error::Format("file body must be a JSON object".into()))?;
    obj.insert("format".into(), Value::from(format));
    obj.insert("version".into(), Value::from(FORMAT_VERSION));
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

pub fn from_tagged_json<T: DeserializeOwned>(format: &str, text: &str) -> Result<T> {
    let mut value: Value = serde_json::from_str(text)?;
    let obj = value.as_object_mut().ok_or_else(|| Error::Format("expected a JSON object".into()))?;
    match obj.remove("format") {
        Some(Value::String(f)) if f == format => {}
        other => return Err(Error::Format(format!("expected format {format:?}, found {other:?}"))),
    }
    match obj.remove("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => return Err(Error::Format(format!("unsupported {format} version {other:?}, expected {FORMAT_VERSION}"))),
    }
    Ok(serde_json::from_value(value)?)
}

fn save_tagged<T: Serialize>(path: &Path, format: &str, body: &T) -> Result<()> {
    write_atomic(path, to_tagged_json(format, body)?.as_bytes())
}

fn load_tagged<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    from_tagged_json(format, &fs::read_to_string(path)?)
}

pub fn save_schedule(path: &Path, schedule: &KoSchedule) -> Result<()> {
    save_tagged(path, SCHEDULE_FORMAT, schedule)
}

pub fn load_schedule(path: &Path) -> Result<KoSchedule> {
    let schedule: KoSchedule = load_tagged(path, SCHEDULE_FORMAT)?;
    if schedule.tables.is_empty() {
        return Err(Error::Format("schedule file has no tables".into()));
    }
    for table in &schedule.tables {
        table.validate()?;
    }
    Ok(schedule)
}

#[derive(Serialize, Deserialize)]
struct DistancesBody {
    codebooks: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingsBody {
    codebooks: Vec<Vec<Vec<f64>>>,
}

/// Header and payload of a binary container.
struct Container {
    codebooks: usize,
    size: usize,
    payload: Vec<f64>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Format(format!("truncated header at byte {}: file has {} bytes", bytes.len(), bytes.len())))?;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4-byte slice")))
}

fn parse_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing DFMK magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}, expected {FORMAT_VERSION}")));
    }
    let codebooks = read_u32(bytes, 8)? as usize;
    let size = read_u32(bytes, 12)? as usize;
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(8) {
        let whole = body.len() / 8;
        return Err(Error::Format(format!(
            "truncated payload at byte {}: {} trailing bytes after {whole} values",
            HEADER_LEN + whole * 8,
            body.len() % 8
        )));
    }
    let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(Container { codebooks, size, payload })
}

fn encode_container(codebooks: usize, size: usize, payload: impl Iterator<Item = f64>) -> Result<Vec<u8>> {
    let as_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} does not fit in 32 bits")));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&as_u32(codebooks)?.to_le_bytes());
    out.extend_from_slice(&as_u32(size)?.to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn is_container(bytes: &[u8]) -> bool {
    bytes.starts_with(MAGIC)
}

pub fn save_distances_json(path: &Path, ds: &DistanceSet) -> Result<()> {
    let body = DistancesBody { codebooks: ds.codebooks().iter().map(DistanceMatrix::to_rows).collect() };
    save_tagged(path, DISTANCES_FORMAT, &body)
}

pub fn save_distances_binary(path: &Path, ds: &DistanceSet) -> Result<()> {
    let payload = ds.codebooks().iter().flat_map(|d| d.entries().iter().copied());
    write_atomic(path, &encode_container(ds.num_codebooks(), ds.vocab_size(), payload)?)
}

/// Loads a distance set from JSON or a binary container. Every matrix is
/// checked against the distance axioms.
pub fn load_distances(path: &Path) -> Result<DistanceSet> {
    let bytes = fs::read(path)?;
    if is_container(&bytes) {
        let c = parse_container(&bytes)?;
        let per = c.size * c.size;
        let expected = c.codebooks * per;
        if c.payload.len() != expected {
            return Err(Error::Format(format!(
                "truncated payload at byte {}: expected {expected} values for C = {}, s = {}, found {}",
                HEADER_LEN + c.payload.len() * 8,
                c.codebooks,
                c.size,
                c.payload.len()
            )));
        }
        let mats = c.payload.chunks_exact(per.max(1)).map(|m| DistanceMatrix::new(c.size, m.to_vec())).collect::<Result<_>>()?;
        return DistanceSet::new(mats);
    }
    let body: DistancesBody = from_tagged_json(DISTANCES_FORMAT, std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?)?;
    DistanceSet::new(body.codebooks.iter().map(|rows| DistanceMatrix::from_rows(rows)).collect::<Result<_>>()?)
}

/// Per-codebook token embeddings, `C x s x dim`.
pub type Embeddings = Vec<Vec<Vec<f64>>>;

fn check_embeddings(e: &Embeddings) -> Result<(usize, usize)> {
    let s = e.first().map_or(0, Vec::len);
    let dim = e.first().and_then(|c| c.first()).map_or(0, Vec::len);
    if e.is_empty() || s == 0 || dim == 0 {
        return Err(Error::Format("embeddings must be nonempty".into()));
    }
    for (c, book) in e.iter().enumerate() {
        if book.len() != s {
            return Err(Error::Format(format!("codebook {c} has {} tokens, expected {s}", book.len())));
        }
        if let Some(row) = book.iter().find(|r| r.len() != dim) {
            return Err(Error::Format(format!("codebook {c} has an embedding of dimension {}, expected {dim}", row.len())));
        }
    }
    Ok((s, dim))
}

pub fn save_embeddings_json(path: &Path, e: &Embeddings) -> Result<()> {
    check_embeddings(e)?;
    save_tagged(path, EMBEDDINGS_FORMAT, &EmbeddingsBody { codebooks: e.clone() })
}

pub fn save_embeddings_binary(path: &Path, e: &Embeddings) -> Result<()> {
    let (s, _) = check_embeddings(e)?;
    let payload = e.iter().flatten().flatten().copied();
    write_atomic(path, &encode_container(e.len(), s, payload)?)
}

pub fn load_embeddings(path: &Path) -> Result<Embeddings> {
    let bytes = fs::read(path)?;
    let e = if is_container(&bytes) {
        let c = parse_container(&bytes)?;
        let rows = c.codebooks * c.size;
        if rows == 0 || c.payload.is_empty() || c.payload.len() % rows != 0 {
            return Err(Error::Format(format!(
                "payload of {} values at byte {} is not a whole number of {rows} embeddings",
                c.payload.len(),
                HEADER_LEN
            )));
        }
        let dim = c.payload.len() / rows;
        let flat: Vec<Vec<f64>> = c.payload.chunks_exact(dim).map(<[f64]>::to_vec).collect();
        flat.chunks_exact(c.size).map(<[Vec<f64>]>::to_vec).collect()
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?;
        from_tagged_json::<EmbeddingsBody>(EMBEDDINGS_FORMAT, text)?.codebooks
    };
    check_embeddings(&e)?;
    Ok(e)
}

/// Distances from embeddings, one matrix per codebook.
pub fn distances_from_embeddings(e: &Embeddings, normalize: bool) -> Result<DistanceSet> {
    check_embeddings(e)?;
    DistanceSet::new(e.iter().map(|book| DistanceMatrix::from_embeddings(book, normalize)).collect::<Result<_>>()?)
}

/// Known target distribution, one entry per codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFile {
    pub length: usize,
    pub vocab: usize,
    pub codebooks: Vec<TargetDistribution>,
}

pub fn save_target(path: &Path, target: &TargetFile) -> Result<()> {
    save_tagged(path, TARGET_FORMAT, target)
}

pub fn load_target(path: &Path) -> Result<TargetFile> {
    let target: TargetFile = load_tagged(path, TARGET_FORMAT)?;
    for q in &target.codebooks {
        q.validate(target.length, target.vocab)?;
    }
    Ok(target)
}

/// Token sequence: one row of `C` tokens per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensFile {
    pub tokens: Vec<Vec<usize>>,
}

impl TokensFile {
    pub fn codebooks(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Position-major flat tokens.
    pub fn flat(&self) -> Result<Vec<usize>> {
        let c = self.codebooks();
        if let Some(row) = self.tokens.iter().find(|r| r.len() != c) {
            return Err(Error::SizeMismatch { expected: c, actual: row.len() });
        }
        Ok(self.tokens.concat())
    }

    pub fn from_flat(flat: &[usize], codebooks: usize) -> Self {
        Self { tokens: flat.chunks(codebooks.max(1)).map(<[usize]>::to_vec).collect() }
    }
}

pub fn save_tokens(path: &Path, tokens: &TokensFile) -> Result<()> {
    save_tagged(path, TOKENS_FORMAT, tokens)
}

pub fn load_tokens(path: &Path) -> Result<TokensFile> {
    let tokens: TokensFile = load_tagged(path, TOKENS_FORMAT)?;
    tokens.flat()?;
    Ok(tokens)
}

#[derive(Serialize, Deserialize)]
struct LogitsBody {
    entries: Vec<LogitsEntry>,
}

pub fn save_logits(path: &Path, entries: &[LogitsEntry]) -> Result<()> {
    save_tagged(path, LOGITS_FORMAT, &LogitsBody { entries: entries.to_vec() })
}

pub fn load_logits(path: &Path) -> Result<LogitsTable> {
    LogitsTable::new(load_tagged::<LogitsBody>(path, LOGITS_FORMAT)?.entries)
}

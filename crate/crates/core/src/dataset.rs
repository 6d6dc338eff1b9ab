//! Dataset artifacts: TSV manifests, YAML data configs, stored ZIP archives
//! addressed by byte ranges, frame filtering and frame-budget batching.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::PathBuf;
use std::str::FromStr;

use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::features::Gcmvn;
use crate::transforms::TransformSpec;

/// Default frame ceiling; longer utterances are dropped from training.
pub const DEFAULT_MAX_FRAMES: u64 = 3000;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("malformed manifest header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} columns, found {found}")]
    MalformedRow { line: usize, expected: usize, found: usize },
    #[error("row `{id}`: field `{field}` contains a tab or newline")]
    IllegalCharacter { id: String, field: &'static str },
    #[error("line {line}: {reason}")]
    InvalidField { line: usize, reason: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("duplicate archive entry `{0}`")]
    DuplicateName(String),
    #[error("archive exceeds ZIP limits (4 GiB / 65535 entries): {0}")]
    ArchiveTooLarge(String),
    #[error("bad archive: {0}")]
    BadArchive(String),
    #[error("bad locator `{0}`")]
    BadLocator(String),
    #[error("range {offset}+{length} out of bounds for `{path}` ({size} bytes)")]
    OutOfBounds { path: String, offset: u64, length: u64, size: u64 },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("row `{id}` has {n_frames} frames, more than the batch budget {budget}")]
    RowExceedsBudget { id: String, n_frames: u64, budget: u64 },
    #[error("malformed YAML: {0}")]
    MalformedYaml(String),
    #[error("config key `{key}`: {reason}")]
    SchemaViolation { key: String, reason: String },
}

impl DatasetError {
    fn io(path: &str, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            DatasetError::NotFound(path.to_string())
        } else {
            DatasetError::Io(format!("{path}: {e}"))
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

/// One utterance in a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    /// Plain path, or `archive.zip:offset:length`.
    pub audio: String,
    pub n_frames: u64,
    pub tgt_text: String,
    pub src_text: Option<String>,
    pub speaker: Option<String>,
}

impl ManifestRow {
    pub fn new(id: impl Into<String>, audio: impl Into<String>, n_frames: u64, tgt_text: impl Into<String>) -> Self {
        Self { id: id.into(), audio: audio.into(), n_frames, tgt_text: tgt_text.into(), src_text: None, speaker: None }
    }
}

const REQUIRED_COLUMNS: [&str; 4] = ["id", "audio", "n_frames", "tgt_text"];
const OPTIONAL_COLUMNS: [&str; 2] = ["src_text", "speaker"];

fn has_illegal(s: &str) -> bool {
    s.contains(['\t', '\n', '\r'])
}

/// Serialize rows as TSV. Optional columns appear when any row uses them;
/// rows lacking the value get an empty field, which reads back as `None`.
pub fn write_manifest(rows: &[ManifestRow]) -> Result<String, DatasetError> {
    let with_src = rows.iter().any(|r| r.src_text.is_some());
    let with_speaker = rows.iter().any(|r| r.speaker.is_some());
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    if with_src {
        header.push("src_text");
    }
    if with_speaker {
        header.push("speaker");
    }
    let mut out = header.join("\t");
    out.push('\n');
    let mut seen = HashSet::new();
    for r in rows {
        if r.id.is_empty() {
            return Err(DatasetError::InvalidField { line: seen.len() + 2, reason: "empty id".into() });
        }
        if !seen.insert(r.id.as_str()) {
            return Err(DatasetError::DuplicateId(r.id.clone()));
        }
        if r.n_frames == 0 {
            return Err(DatasetError::InvalidField {
                line: seen.len() + 1,
                reason: format!("row `{}` has n_frames 0", r.id),
            });
        }
        let fields: [(&'static str, Option<&str>); 5] = [
            ("id", Some(&r.id)),
            ("audio", Some(&r.audio)),
            ("tgt_text", Some(&r.tgt_text)),
            ("src_text", r.src_text.as_deref()),
            ("speaker", r.speaker.as_deref()),
        ];
        for (field, value) in fields {
            if value.is_some_and(has_illegal) {
                return Err(DatasetError::IllegalCharacter { id: r.id.clone(), field });
            }
        }
        out.push_str(&r.id);
        out.push('\t');
        out.push_str(&r.audio);
        out.push('\t');
        out.push_str(&r.n_frames.to_string());
        out.push('\t');
        out.push_str(&r.tgt_text);
        if with_src {
            out.push('\t');
            out.push_str(r.src_text.as_deref().unwrap_or(""));
        }
        if with_speaker {
            out.push('\t');
            out.push_str(r.speaker.as_deref().unwrap_or(""));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<Vec<ManifestRow>, DatasetError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DatasetError::MalformedHeader(format!("not UTF-8: {e}")))?;
    let mut lines = text.split('\n');
    let header_line = lines
        .next()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| DatasetError::MalformedHeader("missing header row".into()))?;
    let header: Vec<&str> = header_line.split('\t').collect();
    if header.len() < REQUIRED_COLUMNS.len() || header[..4] != REQUIRED_COLUMNS {
        return Err(DatasetError::MalformedHeader(format!(
            "expected `{}` first, got `{header_line}`",
            REQUIRED_COLUMNS.join("\\t")
        )));
    }
    let optional = &header[4..];
    let mut last_pos = None;
    for col in optional {
        let pos = OPTIONAL_COLUMNS
            .iter()
            .position(|c| c == col)
            .ok_or_else(|| DatasetError::MalformedHeader(format!("unknown column `{col}`")))?;
        if last_pos.is_some_and(|p| p >= pos) {
            return Err(DatasetError::MalformedHeader(format!("column `{col}` out of order or repeated")));
        }
        last_pos = Some(pos);
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    let body: Vec<&str> = lines.collect();
    // A trailing LF leaves one empty string at the end.
    let body = match body.split_last() {
        Some((&"", rest)) => rest,
        _ => &body[..],
    };
    for (i, line) in body.iter().enumerate() {
        let line_no = i + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(DatasetError::MalformedRow { line: line_no, expected: header.len(), found: fields.len() });
        }
        let n_frames: u64 = fields[2].parse().map_err(|_| DatasetError::InvalidField {
            line: line_no,
            reason: format!("n_frames `{}` is not a non-negative integer", fields[2]),
        })?;
        if n_frames == 0 {
            return Err(DatasetError::InvalidField { line: line_no, reason: "n_frames must be >= 1".into() });
        }
        if fields[0].is_empty() {
            return Err(DatasetError::InvalidField { line: line_no, reason: "empty id".into() });
        }
        let mut row = ManifestRow::new(fields[0], fields[1], n_frames, fields[3]);
        for (col, value) in optional.iter().zip(&fields[4..]) {
            let value = (!value.is_empty()).then(|| value.to_string());
            match *col {
                "src_text" => row.src_text = value,
                _ => row.speaker = value,
            }
        }
        if !seen.insert(row.id.clone()) {
            return Err(DatasetError::DuplicateId(row.id));
        }
        rows.push(row);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Filtering and batching

/// Keep rows with `n_frames <= max_frames`, preserving order.
pub fn filter_by_frames(rows: impl IntoIterator<Item = ManifestRow>, max_frames: u64) -> (Vec<ManifestRow>, usize) {
    let mut dropped = 0;
    let kept = rows
        .into_iter()
        .filter(|r| {
            let keep = r.n_frames <= max_frames;
            dropped += usize::from(!keep);
            keep
        })
        .collect();
    (kept, dropped)
}

/// Sort by descending length (ties keep manifest order) and fill batches
/// greedily until the next row would exceed the frame budget.
pub fn bucket_batches(rows: &[ManifestRow], max_frames_per_batch: u64) -> Result<Vec<Vec<&ManifestRow>>, DatasetError> {
    if let Some(r) = rows.iter().find(|r| r.n_frames > max_frames_per_batch) {
        return Err(DatasetError::RowExceedsBudget {
            id: r.id.clone(),
            n_frames: r.n_frames,
            budget: max_frames_per_batch,
        });
    }
    let mut order: Vec<&ManifestRow> = rows.iter().collect();
    order.sort_by_key(|r| std::cmp::Reverse(r.n_frames));
    let mut batches: Vec<Vec<&ManifestRow>> = Vec::new();
    let mut current: Vec<&ManifestRow> = Vec::new();
    let mut used = 0u64;
    for r in order {
        if !current.is_empty() && used + r.n_frames > max_frames_per_batch {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        used += r.n_frames;
        current.push(r);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// ZIP archives (stored entries only)

/// Payload location of one archive entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZipEntry {
    /// Bytes from the archive start to the first payload byte.
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ZipIndex {
    pub entries: BTreeMap<String, ZipEntry>,
}

impl ZipIndex {
    pub fn get(&self, name: &str) -> Option<ZipEntry> {
        self.entries.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `archive:offset:length` locator for an entry.
    pub fn locator(&self, archive: &str, name: &str) -> Option<String> {
        self.get(name)
            .map(|e| Locator::Range { path: archive.to_string(), offset: e.offset, length: e.length }.to_string())
    }
}

const LOCAL_HEADER_SIG: u32 = 0x0403_4b50;
const CENTRAL_HEADER_SIG: u32 = 0x0201_4b50;
const EOCD_SIG: u32 = 0x0605_4b50;
const LOCAL_HEADER_LEN: u64 = 30;
const ZIP_VERSION: u16 = 20;
const FLAG_UTF8: u16 = 1 << 11;
// 1980-01-01 00:00:00 in DOS format keeps archives byte-reproducible.
const DOS_TIME: u16 = 0;
const DOS_DATE: u16 = (1 << 5) | 1;

struct CentralRecord {
    name: String,
    crc: u32,
    size: u32,
    header_offset: u32,
}

/// Streaming writer for method-0 (stored) ZIP archives.
pub struct ZipWriter<W: Write> {
    inner: W,
    position: u64,
    records: Vec<CentralRecord>,
    index: ZipIndex,
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn fits_u32(v: u64, what: &str) -> Result<u32, DatasetError> {
    u32::try_from(v).map_err(|_| DatasetError::ArchiveTooLarge(what.to_string()))
}

impl<W: Write> ZipWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, position: 0, records: Vec::new(), index: ZipIndex::default() }
    }

    fn write_all(&mut self, bytes: &[u8]) -> Result<(), DatasetError> {
        self.inner.write_all(bytes).map_err(|e| DatasetError::Io(e.to_string()))?;
        self.position += bytes.len() as u64;
        Ok(())
    }

    /// Append one stored entry and return where its payload landed.
    pub fn add(&mut self, name: &str, data: &[u8]) -> Result<ZipEntry, DatasetError> {
        if self.index.entries.contains_key(name) {
            return Err(DatasetError::DuplicateName(name.to_string()));
        }
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(DatasetError::BadArchive(format!("invalid entry name length {}", name.len())));
        }
        if self.records.len() >= u16::MAX as usize {
            return Err(DatasetError::ArchiveTooLarge("entry count".into()));
        }
        let header_offset = fits_u32(self.position, "local header offset")?;
        let size = fits_u32(data.len() as u64, name)?;
        let payload_end = self.position + LOCAL_HEADER_LEN + name.len() as u64 + data.len() as u64;
        fits_u32(payload_end, "archive size")?;
        let crc = crc32fast::hash(data);

        let mut header = Vec::with_capacity(LOCAL_HEADER_LEN as usize + name.len());
        put_u32(&mut header, LOCAL_HEADER_SIG);
        put_u16(&mut header, ZIP_VERSION);
        put_u16(&mut header, name_flags(name));
        put_u16(&mut header, 0); // stored
        put_u16(&mut header, DOS_TIME);
        put_u16(&mut header, DOS_DATE);
        put_u32(&mut header, crc);
        put_u32(&mut header, size);
        put_u32(&mut header, size);
        put_u16(&mut header, name.len() as u16);
        put_u16(&mut header, 0);
        header.extend_from_slice(name.as_bytes());
        self.write_all(&header)?;

        let entry = ZipEntry { offset: self.position, length: data.len() as u64 };
        self.write_all(data)?;
        self.records.push(CentralRecord { name: name.to_string(), crc, size, header_offset });
        self.index.entries.insert(name.to_string(), entry);
        Ok(entry)
    }

    /// Write the central directory and return the sink with the index.
    pub fn finish(mut self) -> Result<(W, ZipIndex), DatasetError> {
        let cd_offset = fits_u32(self.position, "central directory offset")?;
        let mut cd = Vec::new();
        for r in &self.records {
            put_u32(&mut cd, CENTRAL_HEADER_SIG);
            put_u16(&mut cd, ZIP_VERSION); // made by: MS-DOS, 2.0
            put_u16(&mut cd, ZIP_VERSION);
            put_u16(&mut cd, name_flags(&r.name));
            put_u16(&mut cd, 0);
            put_u16(&mut cd, DOS_TIME);
            put_u16(&mut cd, DOS_DATE);
            put_u32(&mut cd, r.crc);
            put_u32(&mut cd, r.size);
            put_u32(&mut cd, r.size);
            put_u16(&mut cd, r.name.len() as u16);
            put_u16(&mut cd, 0); // extra
            put_u16(&mut cd, 0); // comment
            put_u16(&mut cd, 0); // disk
            put_u16(&mut cd, 0); // internal attrs
            put_u32(&mut cd, 0); // external attrs
            put_u32(&mut cd, r.header_offset);
            cd.extend_from_slice(r.name.as_bytes());
        }
        let cd_size = fits_u32(cd.len() as u64, "central directory size")?;
        fits_u32(self.position + cd.len() as u64 + 22, "archive size")?;
        let count = self.records.len() as u16;
        put_u32(&mut cd, EOCD_SIG);
        put_u16(&mut cd, 0);
        put_u16(&mut cd, 0);
        put_u16(&mut cd, count);
        put_u16(&mut cd, count);
        put_u32(&mut cd, cd_size);
        put_u32(&mut cd, cd_offset);
        put_u16(&mut cd, 0);
        self.write_all(&cd)?;
        self.inner.flush().map_err(|e| DatasetError::Io(e.to_string()))?;
        Ok((self.inner, self.index))
    }
}

fn name_flags(name: &str) -> u16 {
    if name.is_ascii() {
        0
    } else {
        FLAG_UTF8
    }
}

/// Pack named blobs, in order, into an in-memory stored ZIP.
pub fn pack_zip<N: AsRef<str>, D: AsRef<[u8]>>(files: &[(N, D)]) -> Result<(Vec<u8>, ZipIndex), DatasetError> {
    let mut seen = HashSet::new();
    for (name, _) in files {
        if !seen.insert(name.as_ref()) {
            return Err(DatasetError::DuplicateName(name.as_ref().to_string()));
        }
    }
    let mut w = ZipWriter::new(Vec::new());
    for (name, data) in files {
        w.add(name.as_ref(), data.as_ref())?;
    }
    w.finish()
}

fn le_u16(b: &[u8], at: usize) -> Result<u16, DatasetError> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| DatasetError::BadArchive("truncated record".into()))
}

fn le_u32(b: &[u8], at: usize) -> Result<u32, DatasetError> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| DatasetError::BadArchive("truncated record".into()))
}

/// Rebuild the payload index of a stored ZIP from its central directory.
pub fn read_zip_index(archive: &[u8]) -> Result<ZipIndex, DatasetError> {
    if archive.len() < 22 {
        return Err(DatasetError::BadArchive("too short for an end-of-central-directory record".into()));
    }
    let search_from = archive.len().saturating_sub(22 + u16::MAX as usize);
    let eocd = (search_from..=archive.len() - 22)
        .rev()
        .find(|&i| le_u32(archive, i).ok() == Some(EOCD_SIG))
        .ok_or_else(|| DatasetError::BadArchive("no end-of-central-directory record".into()))?;
    let count = le_u16(archive, eocd + 10)? as usize;
    let cd_offset = le_u32(archive, eocd + 16)? as usize;

    let mut index = ZipIndex::default();
    let mut at = cd_offset;
    for _ in 0..count {
        if le_u32(archive, at)? != CENTRAL_HEADER_SIG {
            return Err(DatasetError::BadArchive(format!("bad central header at {at}")));
        }
        let method = le_u16(archive, at + 10)?;
        let comp_size = le_u32(archive, at + 20)? as u64;
        let name_len = le_u16(archive, at + 28)? as usize;
        let extra_len = le_u16(archive, at + 30)? as usize;
        let comment_len = le_u16(archive, at + 32)? as usize;
        let local = le_u32(archive, at + 42)? as usize;
        let name_bytes = archive
            .get(at + 46..at + 46 + name_len)
            .ok_or_else(|| DatasetError::BadArchive("truncated entry name".into()))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| DatasetError::BadArchive("entry name is not UTF-8".into()))?;
        if method != 0 {
            return Err(DatasetError::BadArchive(format!("entry `{name}` is compressed (method {method})")));
        }
        if le_u32(archive, local)? != LOCAL_HEADER_SIG {
            return Err(DatasetError::BadArchive(format!("bad local header for `{name}`")));
        }
        let local_name_len = le_u16(archive, local + 26)? as u64;
        let local_extra_len = le_u16(archive, local + 28)? as u64;
        let offset = local as u64 + LOCAL_HEADER_LEN + local_name_len + local_extra_len;
        if offset + comp_size > archive.len() as u64 {
            return Err(DatasetError::BadArchive(format!("payload of `{name}` runs past end of archive")));
        }
        if index.entries.insert(name.clone(), ZipEntry { offset, length: comp_size }).is_some() {
            return Err(DatasetError::DuplicateName(name));
        }
        at += 46 + name_len + extra_len + comment_len;
    }
    Ok(index)
}

// ---------------------------------------------------------------------------
// Locators and byte stores

/// Parsed manifest `audio` field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Locator {
    Path(String),
    Range { path: String, offset: u64, length: u64 },
}

impl FromStr for Locator {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(DatasetError::BadLocator(s.to_string()));
        }
        let bad = || DatasetError::BadLocator(s.to_string());
        let is_zip = |p: &str| p.to_ascii_lowercase().ends_with(".zip");
        let parts: Vec<&str> = s.rsplitn(3, ':').collect();
        let decimal = |p: &str| -> Option<u64> {
            (!p.is_empty() && p.bytes().all(|b| b.is_ascii_digit())).then(|| p.parse().ok()).flatten()
        };
        match parts.as_slice() {
            [length, offset, path] => match (decimal(offset), decimal(length)) {
                (Some(offset), Some(length)) if !path.is_empty() => {
                    Ok(Locator::Range { path: path.to_string(), offset, length })
                }
                _ if is_zip(path) || path.is_empty() => Err(bad()),
                _ => Ok(Locator::Path(s.to_string())),
            },
            [_, path] if is_zip(path) => Err(bad()),
            _ => Ok(Locator::Path(s.to_string())),
        }
    }
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locator::Path(p) => f.write_str(p),
            Locator::Range { path, offset, length } => write!(f, "{path}:{offset}:{length}"),
        }
    }
}

/// Readable storage that manifest locators resolve against.
pub trait ByteStore: Sync {
    fn read(&self, path: &str) -> Result<Vec<u8>, DatasetError>;
    fn read_range(&self, path: &str, offset: u64, length: u64) -> Result<Vec<u8>, DatasetError>;
}

/// Files under a root directory; relative locators are joined onto it.
#[derive(Debug, Clone)]
pub struct FsStore {
    pub root: PathBuf,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }
}

impl ByteStore for FsStore {
    fn read(&self, path: &str) -> Result<Vec<u8>, DatasetError> {
        std::fs::read(self.path(path)).map_err(|e| DatasetError::io(path, e))
    }

    fn read_range(&self, path: &str, offset: u64, length: u64) -> Result<Vec<u8>, DatasetError> {
        let mut f = File::open(self.path(path)).map_err(|e| DatasetError::io(path, e))?;
        let size = f.metadata().map_err(|e| DatasetError::io(path, e))?.len();
        check_range(path, offset, length, size)?;
        f.seek(SeekFrom::Start(offset)).map_err(|e| DatasetError::io(path, e))?;
        let mut buf = vec![0u8; length as usize];
        f.read_exact(&mut buf).map_err(|e| DatasetError::io(path, e))?;
        Ok(buf)
    }
}

/// In-memory store, mostly for tests.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    pub files: HashMap<String, Vec<u8>>,
}

impl MemStore {
    pub fn insert(&mut self, path: impl Into<String>, data: Vec<u8>) {
        self.files.insert(path.into(), data);
    }
}

impl ByteStore for MemStore {
    fn read(&self, path: &str) -> Result<Vec<u8>, DatasetError> {
        self.files.get(path).cloned().ok_or_else(|| DatasetError::NotFound(path.to_string()))
    }

    fn read_range(&self, path: &str, offset: u64, length: u64) -> Result<Vec<u8>, DatasetError> {
        let data = self.files.get(path).ok_or_else(|| DatasetError::NotFound(path.to_string()))?;
        check_range(path, offset, length, data.len() as u64)?;
        Ok(data[offset as usize..(offset + length) as usize].to_vec())
    }
}

fn check_range(path: &str, offset: u64, length: u64, size: u64) -> Result<(), DatasetError> {
    match offset.checked_add(length) {
        Some(end) if end <= size => Ok(()),
        _ => Err(DatasetError::OutOfBounds { path: path.to_string(), offset, length, size }),
    }
}

/// Dereference a manifest locator.
pub fn resolve_audio(locator: &str, store: &dyn ByteStore) -> Result<Vec<u8>, DatasetError> {
    match locator.parse::<Locator>()? {
        Locator::Path(p) => store.read(&p),
        Locator::Range { path, offset, length } => store.read_range(&path, offset, length),
    }
}

// ---------------------------------------------------------------------------
// Data config

/// Sidecar YAML describing features, transforms and corpus statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub audio_root: Option<String>,
    pub input_feat_per_channel: usize,
    pub sample_rate: u32,
    /// Split pattern → ordered transform list, in declaration order.
    /// `_name` matches splits containing `name`; `*` is the fallback.
    pub transforms: Vec<(String, Vec<TransformSpec>)>,
    pub gcmvn: Option<Gcmvn>,
    /// Keys this version does not understand, kept verbatim.
    pub extra: Mapping,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            audio_root: None,
            input_feat_per_channel: 80,
            sample_rate: 16000,
            transforms: Vec::new(),
            gcmvn: None,
            extra: Mapping::new(),
        }
    }
}

fn pattern_matches(pattern: &str, split: &str) -> bool {
    match pattern.strip_prefix('_') {
        Some(needle) => split.contains(needle),
        None => pattern == split,
    }
}

impl DataConfig {
    /// First matching split pattern wins; `*` applies only if nothing matched.
    pub fn transforms_for_split(&self, split: &str) -> &[TransformSpec] {
        self.transforms
            .iter()
            .find(|(p, _)| p != "*" && pattern_matches(p, split))
            .or_else(|| self.transforms.iter().find(|(p, _)| p == "*"))
            .map_or(&[], |(_, specs)| specs.as_slice())
    }

    pub fn check_feature_dim(&self, dim: usize) -> Result<(), DatasetError> {
        if dim != self.input_feat_per_channel {
            return Err(DatasetError::SchemaViolation {
                key: "input_feat_per_channel".into(),
                reason: format!("config says {}, features have {dim}", self.input_feat_per_channel),
            });
        }
        Ok(())
    }
}

fn schema(key: &str, reason: impl Into<String>) -> DatasetError {
    DatasetError::SchemaViolation { key: key.to_string(), reason: reason.into() }
}

fn positive_int(key: &str, v: &Value) -> Result<u64, DatasetError> {
    match v.as_u64() {
        Some(n) if n > 0 => Ok(n),
        _ => Err(schema(key, format!("expected a positive integer, got {}", describe(v)))),
    }
}

fn describe(v: &Value) -> String {
    serde_yaml::to_string(v).map(|s| s.trim().to_string()).unwrap_or_else(|_| "?".into())
}

fn parse_transform_entry(key: &str, v: &Value) -> Result<TransformSpec, DatasetError> {
    match v {
        Value::String(name) => Ok(TransformSpec::named(name.clone())),
        Value::Mapping(m) if m.len() == 1 => {
            let (k, params) = m.iter().next().unwrap();
            let name = k.as_str().ok_or_else(|| schema(key, "transform name must be a string"))?;
            Ok(TransformSpec::with_params(name, params.clone()))
        }
        other => Err(schema(key, format!("expected a transform name or {{name: params}}, got {}", describe(other)))),
    }
}

fn parse_transforms(v: &Value) -> Result<Vec<(String, Vec<TransformSpec>)>, DatasetError> {
    let Value::Mapping(m) = v else {
        return Err(schema("transforms", "expected a mapping from split pattern to list"));
    };
    m.iter()
        .map(|(k, list)| {
            let pattern = k.as_str().ok_or_else(|| schema("transforms", "split pattern must be a string"))?;
            let key = format!("transforms.{pattern}");
            let specs = match list {
                Value::Sequence(items) => items.iter().map(|i| parse_transform_entry(&key, i)).collect(),
                Value::Null => Ok(Vec::new()),
                other => Err(schema(&key, format!("expected a list, got {}", describe(other)))),
            }?;
            Ok((pattern.to_string(), specs))
        })
        .collect()
}

fn parse_gcmvn(v: &Value) -> Result<Gcmvn, DatasetError> {
    let list = |field: &str| -> Result<Vec<f64>, DatasetError> {
        let key = format!("gcmvn.{field}");
        match v.get(field) {
            Some(Value::Sequence(items)) => items
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| schema(&key, format!("non-numeric entry {}", describe(x)))))
                .collect(),
            _ => Err(schema(&key, "expected a list of numbers")),
        }
    };
    if !v.is_mapping() {
        return Err(schema("gcmvn", "expected a mapping with `mean` and `std`"));
    }
    let g = Gcmvn { mean: list("mean")?, std: list("std")? };
    if g.mean.len() != g.std.len() {
        return Err(schema("gcmvn", "`mean` and `std` lengths differ"));
    }
    Ok(g)
}

/// Parse a data config. Unknown top-level keys are preserved in
/// [`DataConfig::extra`] and reported in the returned warnings.
pub fn read_data_config(bytes: &[u8]) -> Result<(DataConfig, Vec<String>), DatasetError> {
    let root: Value = serde_yaml::from_slice(bytes).map_err(|e| DatasetError::MalformedYaml(e.to_string()))?;
    let map = match root {
        Value::Mapping(m) => m,
        Value::Null => Mapping::new(),
        other => {
            return Err(DatasetError::MalformedYaml(format!("top level must be a mapping, got {}", describe(&other))))
        }
    };
    let mut cfg = DataConfig::default();
    let mut warnings = Vec::new();
    for (k, v) in map {
        let Some(key) = k.as_str() else {
            return Err(DatasetError::MalformedYaml(format!("non-string key {}", describe(&k))));
        };
        match key {
            "audio_root" => {
                cfg.audio_root = match &v {
                    Value::Null => None,
                    Value::String(s) => Some(s.clone()),
                    other => return Err(schema(key, format!("expected a string, got {}", describe(other)))),
                }
            }
            "input_feat_per_channel" => cfg.input_feat_per_channel = positive_int(key, &v)? as usize,
            "sample_rate" => {
                cfg.sample_rate = u32::try_from(positive_int(key, &v)?).map_err(|_| schema(key, "too large"))?
            }
            "transforms" => cfg.transforms = parse_transforms(&v)?,
            "gcmvn" => cfg.gcmvn = if v.is_null() { None } else { Some(parse_gcmvn(&v)?) },
            _ => {
                warnings.push(format!("unknown key `{key}` preserved"));
                cfg.extra.insert(k, v);
            }
        }
    }
    Ok((cfg, warnings))
}

pub fn write_data_config(cfg: &DataConfig) -> Result<String, DatasetError> {
    let mut m = Mapping::new();
    if let Some(root) = &cfg.audio_root {
        m.insert("audio_root".into(), Value::String(root.clone()));
    }
    m.insert("input_feat_per_channel".into(), Value::from(cfg.input_feat_per_channel as u64));
    m.insert("sample_rate".into(), Value::from(cfg.sample_rate as u64));
    if !cfg.transforms.is_empty() {
        let mut t = Mapping::new();
        for (pattern, specs) in &cfg.transforms {
            let list = specs
                .iter()
                .map(|s| {
                    if s.params.is_null() {
                        Value::String(s.name.clone())
                    } else {
                        let mut one = Mapping::new();
                        one.insert(Value::String(s.name.clone()), s.params.clone());
                        Value::Mapping(one)
                    }
                })
                .collect();
            t.insert(Value::String(pattern.clone()), Value::Sequence(list));
        }
        m.insert("transforms".into(), Value::Mapping(t));
    }
    if let Some(g) = &cfg.gcmvn {
        m.insert("gcmvn".into(), serde_yaml::to_value(g).map_err(|e| DatasetError::MalformedYaml(e.to_string()))?);
    }
    for (k, v) in &cfg.extra {
        m.insert(k.clone(), v.clone());
    }
    serde_yaml::to_string(&Value::Mapping(m)).map_err(|e| DatasetError::MalformedYaml(e.to_string()))
}

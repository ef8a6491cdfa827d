//! Deterministic archive encoding for the data partition.
//!
//! An archive is a concatenation of records, strictly sorted by path bytes:
//!
//! ```text
//! u32 LE path length | path bytes (UTF-8) | u32 LE mode | u64 LE size | content
//! ```
//!
//! No timestamps, owners, or directory records are stored.

use std::fmt;
use std::io::{self, Write};

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Fixed bytes per record, excluding the path and content.
pub const RECORD_FRAMING: u64 = 4 + 4 + 8;

/// Permission bits kept in an archive; everything else in `st_mode` is dropped.
pub const MODE_MASK: u32 = 0o7777;

/// A normalized relative path: `/`-separated, no empty, `.` or `..`
/// components, no leading slash, no NUL.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelPath(String);

impl RelPath {
    pub fn new(path: impl Into<String>) -> Result<Self> {
        let path = path.into();
        let bad = |reason| Error::InvalidPath {
            path: path.clone(),
            reason,
        };
        if path.is_empty() {
            return Err(bad("empty path"));
        }
        if path.starts_with('/') {
            return Err(bad("absolute path"));
        }
        if path.contains('\0') {
            return Err(bad("contains NUL"));
        }
        if path.len() > u32::MAX as usize {
            return Err(bad("path too long"));
        }
        for component in path.split('/') {
            match component {
                "" => return Err(bad("empty component")),
                "." => return Err(bad("'.' component")),
                ".." => return Err(bad("'..' traversal")),
                _ => {}
            }
        }
        Ok(RelPath(path))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn components(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    /// True when `self` names a directory that must contain `other`.
    pub fn is_dir_prefix_of(&self, other: &RelPath) -> bool {
        other.0.len() > self.0.len()
            && other.0.starts_with(&self.0)
            && other.0.as_bytes()[self.0.len()] == b'/'
    }
}

impl fmt::Display for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.0, f)
    }
}

impl Serialize for RelPath {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub path: RelPath,
    pub mode: u32,
    pub content: Vec<u8>,
}

impl ArchiveEntry {
    pub fn size(&self) -> u64 {
        self.content.len() as u64
    }
}

/// Encoded length of one record.
pub fn record_len(path: &RelPath, size: u64) -> u64 {
    RECORD_FRAMING + path.as_str().len() as u64 + size
}

pub fn write_record_header<W: Write + ?Sized>(w: &mut W, path: &RelPath, mode: u32, size: u64) -> io::Result<()> {
    let bytes = path.as_str().as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(mode & MODE_MASK).to_le_bytes())?;
    w.write_all(&size.to_le_bytes())
}

/// Encode entries, which must already be strictly sorted by path.
pub fn encode(entries: &[ArchiveEntry]) -> Result<Vec<u8>> {
    check_sorted(entries.iter().map(|e| &e.path))?;
    let mut out = Vec::new();
    for e in entries {
        write_record_header(&mut out, &e.path, e.mode, e.size()).expect("vec write");
        out.extend_from_slice(&e.content);
    }
    Ok(out)
}

/// Decode and validate a whole archive.
pub fn decode(bytes: &[u8]) -> Result<Vec<ArchiveEntry>> {
    let mut entries = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let path_len = take_u32(&mut rest, "path length")? as usize;
        let path_bytes = take(&mut rest, path_len, "path")?;
        let path = std::str::from_utf8(path_bytes)
            .map_err(|_| Error::Format("archive path is not UTF-8".into()))?;
        let path = RelPath::new(path).map_err(|e| Error::Format(format!("archive entry: {e}")))?;
        let mode = take_u32(&mut rest, "mode")?;
        if mode & !MODE_MASK != 0 {
            return Err(Error::Format(format!("archive entry {path}: mode {mode:o} has non-permission bits")));
        }
        let size = take_u64(&mut rest, "size")?;
        let size = usize::try_from(size).map_err(|_| Error::Format("archive entry too large".into()))?;
        let content = take(&mut rest, size, "content")?.to_vec();
        entries.push(ArchiveEntry { path, mode, content });
    }
    check_sorted(entries.iter().map(|e| &e.path))?;
    Ok(entries)
}

fn check_sorted<'a>(paths: impl Iterator<Item = &'a RelPath>) -> Result<()> {
    let mut prev: Option<&RelPath> = None;
    for p in paths {
        if let Some(q) = prev {
            if q.as_str().as_bytes() >= p.as_str().as_bytes() {
                return Err(Error::Format(format!(
                    "archive entries not strictly sorted: {q} before {p}"
                )));
            }
            if q.is_dir_prefix_of(p) {
                return Err(Error::Format(format!("archive entry {q} is also a directory of {p}")));
            }
        }
        prev = Some(p);
    }
    Ok(())
}

fn take<'a>(rest: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if rest.len() < n {
        return Err(Error::Format(format!("archive truncated reading {what}")));
    }
    let (head, tail) = rest.split_at(n);
    *rest = tail;
    Ok(head)
}

fn take_u32(rest: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(rest, 4, what)?.try_into().unwrap()))
}

fn take_u64(rest: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(rest, 8, what)?.try_into().unwrap()))
}

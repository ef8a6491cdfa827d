//! Mutable pre-seal workspaces and sealing them into images.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::annotations::ProvenanceAnnotation;
use crate::archive::{self, RelPath, MODE_MASK};
use crate::error::{Error, IoContext, Result};
use crate::format::{self, PalletImage, PartitionKind, PartitionWriter};

/// A writable directory whose files become a pallet on [`seal`](Self::seal).
///
/// A staging pallet has no id; identity exists only once sealed. It has a
/// single owner, and sealing consumes it.
#[derive(Debug)]
pub struct StagingPallet {
    root: PathBuf,
    // Present when this staging pallet created its own root and should
    // remove it when dropped.
    _owned: Option<TempDir>,
    pending: BTreeMap<RelPath, u32>,
    deterministic: bool,
    meta: Option<Vec<u8>>,
    warnings: Vec<String>,
}

impl StagingPallet {
    /// Create an empty staging pallet in a fresh, uniquely named
    /// subdirectory of `parent`.
    pub fn create(parent: impl AsRef<Path>, deterministic: bool) -> Result<Self> {
        let parent = parent.as_ref();
        let dir = tempfile::Builder::new()
            .prefix("staging-")
            .tempdir_in(parent)
            .ctx(|| format!("creating staging directory in {}", parent.display()))?;
        Ok(StagingPallet {
            root: dir.path().to_path_buf(),
            _owned: Some(dir),
            pending: BTreeMap::new(),
            deterministic,
            meta: None,
            warnings: Vec::new(),
        })
    }

    /// Wrap files that already exist under `root`. The directory is left in
    /// place when the staging pallet is dropped.
    pub fn adopt(root: impl Into<PathBuf>, files: BTreeMap<RelPath, u32>, deterministic: bool) -> Self {
        StagingPallet {
            root: root.into(),
            _owned: None,
            pending: files.into_iter().map(|(p, m)| (p, m & MODE_MASK)).collect(),
            deterministic,
            meta: None,
            warnings: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// Pending files, sorted by path.
    pub fn pending(&self) -> impl ExactSizeIterator<Item = (&RelPath, u32)> {
        self.pending.iter().map(|(p, &m)| (p, m))
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Non-fatal notes, such as overwritten paths.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Attach an opaque Meta partition to the sealed image.
    pub fn set_meta(&mut self, meta: Vec<u8>) {
        self.meta = Some(meta);
    }

    pub fn add_file(&mut self, rel_path: &str, content: &[u8], mode: u32) -> Result<()> {
        let path = RelPath::new(rel_path)?;
        if let Some(other) = self
            .pending
            .keys()
            .find(|p| p.is_dir_prefix_of(&path) || path.is_dir_prefix_of(p))
        {
            return Err(Error::InvalidPath {
                path: path.to_string(),
                reason: if other.is_dir_prefix_of(&path) {
                    "parent is already a staged file"
                } else {
                    "already a directory of staged files"
                },
            });
        }
        let target = self.disk_path(&path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).ctx(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&target, content).ctx(|| format!("writing {}", target.display()))?;
        if self.pending.insert(path.clone(), mode & MODE_MASK).is_some() {
            log::warn!("staging: overwrote {path}");
            self.warnings.push(format!("overwrote {path}"));
        }
        Ok(())
    }

    fn disk_path(&self, path: &RelPath) -> PathBuf {
        path.components().fold(self.root.clone(), |p, c| p.join(c))
    }

    /// Seal into an image at `out_path`, consuming the staging pallet.
    ///
    /// The data partition lists pending files sorted by path; the image is
    /// written to a temporary file and renamed into place.
    pub fn seal(self, annotation: &ProvenanceAnnotation, out_path: impl AsRef<Path>) -> Result<PalletImage> {
        if self.deterministic && annotation.created_at.is_some() {
            return Err(Error::Validation(
                "deterministic staging requires an annotation without created_at".into(),
            ));
        }
        let encoded = annotation.encode()?;
        let mut parts: Vec<(PartitionKind, PartitionWriter<'_>)> = vec![
            (PartitionKind::DataArchive, Box::new(|w: &mut dyn Write| self.write_archive(w))),
            (
                PartitionKind::Annotations,
                Box::new(|w: &mut dyn Write| w.write_all(&encoded).ctx(|| "writing annotations".into())),
            ),
        ];
        if let Some(meta) = &self.meta {
            parts.push((
                PartitionKind::Meta,
                Box::new(move |w: &mut dyn Write| w.write_all(meta).ctx(|| "writing meta".into())),
            ));
        }
        format::write_image(out_path.as_ref(), parts)
    }

    fn write_archive(&self, w: &mut dyn Write) -> Result<()> {
        for (path, &mode) in &self.pending {
            let disk = self.disk_path(path);
            let file = File::open(&disk).ctx(|| format!("opening staged {}", disk.display()))?;
            let size = file.metadata().ctx(|| format!("stat {}", disk.display()))?.len();
            archive::write_record_header(w, path, mode, size).ctx(|| "writing archive".into())?;
            let copied = io::copy(&mut file.take(size), w).ctx(|| format!("archiving {}", disk.display()))?;
            if copied != size {
                return Err(Error::io(
                    format!("archiving {}", disk.display()),
                    io::Error::new(io::ErrorKind::UnexpectedEof, "file shrank while sealing"),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::PartitionKind;
    use crate::id::PalletId;
    use std::collections::BTreeSet;
    use walkdir::WalkDir;

    fn app() -> ProvenanceAnnotation {
        ProvenanceAnnotation::application("gnuplot-app")
    }

    #[test]
    fn create_is_empty_and_unique() {
        let tmp = tempfile::tempdir().unwrap();
        let a = StagingPallet::create(tmp.path(), true).unwrap();
        let b = StagingPallet::create(tmp.path(), true).unwrap();
        assert_eq!(a.len(), 0);
        assert_ne!(a.root(), b.root());
        assert!(a.root().starts_with(tmp.path()));
    }

    #[test]
    fn create_in_missing_parent_fails() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(StagingPallet::create(tmp.path().join("nope"), true).is_err());
    }

    #[test]
    fn pending_matches_directory_walk() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = StagingPallet::create(tmp.path(), true).unwrap();
        for p in ["z.txt", "a/b.dat", "m/n/o"] {
            s.add_file(p, p.as_bytes(), 0o644).unwrap();
        }
        let listed: Vec<String> = s.pending().map(|(p, _)| p.to_string()).collect();
        let walked: BTreeSet<String> = WalkDir::new(s.root())
            .into_iter()
            .map(|e| e.unwrap())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.path().strip_prefix(s.root()).unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(listed.len(), 3);
        assert_eq!(listed, walked.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn add_file_rejects_traversal_and_conflicts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = StagingPallet::create(tmp.path(), true).unwrap();
        assert!(matches!(s.add_file("../escape", b"x", 0o644), Err(Error::InvalidPath { .. })));
        assert!(s.add_file("/etc/passwd", b"x", 0o644).is_err());
        s.add_file("a", b"x", 0o644).unwrap();
        assert!(s.add_file("a/b", b"x", 0o644).is_err());
        s.add_file("d/e", b"x", 0o644).unwrap();
        assert!(s.add_file("d", b"x", 0o644).is_err());
        assert!(!tmp.path().join("escape").exists());
    }

    #[test]
    fn duplicate_add_overwrites_with_warning() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = StagingPallet::create(tmp.path(), true).unwrap();
        s.add_file("out/plot.png", b"12345678", 0o644).unwrap();
        s.add_file("out/plot.png", b"new", 0o600).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.warnings().len(), 1);
        let img = s.seal(&app(), tmp.path().join("p.pallet")).unwrap();
        let dest = tmp.path().join("x");
        fs::create_dir(&dest).unwrap();
        img.extract(&dest).unwrap();
        assert_eq!(fs::read(dest.join("out/plot.png")).unwrap(), b"new");
    }

    #[test]
    fn empty_seal_is_small_and_valid() {
        let tmp = tempfile::tempdir().unwrap();
        let s = StagingPallet::create(tmp.path(), true).unwrap();
        let img = s.seal(&app(), tmp.path().join("e.pallet")).unwrap();
        assert!(img.verify().unwrap().is_ok());
        let ann_len = app().encode().unwrap().len() as u64;
        assert_eq!(img.file_len(), format::header_len(2) + ann_len);
        assert!(img.file_len() <= 4096);
        assert_eq!(img.read_partition(PartitionKind::DataArchive).unwrap().len(), 0);
    }

    #[test]
    fn seal_removes_owned_root() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = StagingPallet::create(tmp.path(), true).unwrap();
        s.add_file("a", b"1", 0o644).unwrap();
        let root = s.root().to_path_buf();
        s.seal(&app(), tmp.path().join("a.pallet")).unwrap();
        assert!(!root.exists());
    }

    #[test]
    fn deterministic_rejects_timestamp() {
        let tmp = tempfile::tempdir().unwrap();
        let s = StagingPallet::create(tmp.path(), true).unwrap();
        let a = app().with_created_at(chrono::Utc::now());
        assert!(matches!(s.seal(&a, tmp.path().join("t.pallet")), Err(Error::Validation(_))));
        assert!(!tmp.path().join("t.pallet").exists());
    }

    #[test]
    fn failed_seal_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = StagingPallet::create(tmp.path(), true).unwrap();
        s.add_file("gone", b"1", 0o644).unwrap();
        fs::remove_file(s.root().join("gone")).unwrap();
        let out = tmp.path().join("out");
        fs::create_dir(&out).unwrap();
        assert!(s.seal(&app(), out.join("f.pallet")).is_err());
        assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    }

    #[test]
    fn one_mib_payload_size_is_analytic() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = StagingPallet::create(tmp.path(), true).unwrap();
        let payload = vec![7u8; 1 << 20];
        s.add_file("payload.bin", &payload, 0o644).unwrap();
        let img = s.seal(&app(), tmp.path().join("m.pallet")).unwrap();
        let ann = app().encode().unwrap().len() as u64;
        let expected = (1u64 << 20) + format::header_len(2) + archive::RECORD_FRAMING + "payload.bin".len() as u64 + ann;
        assert_eq!(img.file_len(), expected);
        assert!(img.file_len() - (1 << 20) < 2048 + 16);
    }

    #[test]
    fn meta_partition_optional() {
        let tmp = tempfile::tempdir().unwrap();
        let s = StagingPallet::create(tmp.path(), true).unwrap();
        let img = s.seal(&app(), tmp.path().join("a.pallet")).unwrap();
        assert!(matches!(img.read_partition(PartitionKind::Meta), Err(Error::PartitionNotFound(PartitionKind::Meta))));

        let mut s = StagingPallet::create(tmp.path(), true).unwrap();
        s.set_meta(b"{\"tool\":\"x\"}".to_vec());
        let img = s.seal(&app(), tmp.path().join("b.pallet")).unwrap();
        assert_eq!(img.read_partition(PartitionKind::Meta).unwrap(), b"{\"tool\":\"x\"}");
        assert!(img.verify().unwrap().is_ok());
        assert_ne!(img.id(), PalletId::zero());
    }
}

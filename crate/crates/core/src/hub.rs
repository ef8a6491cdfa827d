//! Local content-addressed pallet store.
//!
//! Layout:
//!
//! ```text
//! <root>/objects/<id[0..2]>/<id>.pallet
//! <root>/index.json      canonical JSON array of HubEntry, sorted by id
//! <root>/.lock           advisory lock serializing index updates
//! <root>/.writers        shared by every put in progress
//! ```
//!
//! Objects land by temp-file + rename, so a crashed put leaves either the
//! complete object or nothing but an ignorable temp file. The index is a
//! cache over the objects and is reconciled against them on open.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::annotations::{PalletKind, ProvenanceAnnotation};
use crate::canonical;
use crate::error::{Error, IoContext, Result};
use crate::fault;
use crate::format::{self, PalletImage, VerifyReport};
use crate::id::PalletId;
use crate::staging::StagingPallet;

const OBJECTS: &str = "objects";
const INDEX: &str = "index.json";
const LOCK: &str = ".lock";
const WRITERS: &str = ".writers";
const TEMP_PREFIXES: &[&str] = &[".tmp-", ".seal-", ".incoming-"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubEntry {
    pub id: PalletId,
    pub kind: PalletKind,
    pub node_name: String,
    pub size: u64,
    /// RFC 3339, UTC.
    pub stored_at: String,
}

#[derive(Debug, Clone)]
pub struct Hub {
    root: PathBuf,
}

/// Holds the hub's advisory lock until dropped.
struct LockGuard(File);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

impl Hub {
    /// Create a hub at `root`, or open the hub already there.
    ///
    /// Refuses a non-empty directory that is not a hub.
    pub fn init(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if Self::is_hub(root) {
            return Self::open(root);
        }
        if root.exists() {
            let mut entries = fs::read_dir(root).ctx(|| format!("reading {}", root.display()))?;
            if entries.next().is_some() {
                return Err(Error::Hub(format!(
                    "{} is not empty and is not a pallet hub",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root.join(OBJECTS)).ctx(|| format!("creating hub at {}", root.display()))?;
        File::create(root.join(LOCK)).ctx(|| "creating hub lock".into())?;
        let hub = Hub {
            root: root.to_path_buf(),
        };
        hub.write_index(&BTreeMap::new())?;
        Ok(hub)
    }

    /// Open an existing hub, reconciling the index with the object files.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if !Self::is_hub(root) {
            return Err(Error::Hub(format!("no pallet hub at {}", root.display())));
        }
        let hub = Hub {
            root: root.to_path_buf(),
        };
        hub.reconcile()?;
        Ok(hub)
    }

    pub fn is_hub(root: &Path) -> bool {
        root.join(INDEX).is_file() && root.join(OBJECTS).is_dir()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, id: &PalletId) -> PathBuf {
        let hex = id.to_hex();
        self.root
            .join(OBJECTS)
            .join(&hex[..2])
            .join(format!("{hex}.{}", format::FILE_EXTENSION))
    }

    pub fn contains(&self, id: &PalletId) -> bool {
        self.object_path(id).is_file()
    }

    /// Store a verified image. Re-putting identical bytes is a no-op.
    pub fn put(&self, image: &PalletImage) -> Result<PalletId> {
        let _writing = self.writer_lock()?;
        let report = image.verify()?;
        if !report.is_ok() {
            return Err(Error::Tampered {
                id: image.id(),
                detail: format!("refusing to store unverified image {}", image.path().display()),
            });
        }
        let id = image.id();
        let target = self.object_path(&id);
        let shard = target.parent().expect("object path has a shard dir");
        fs::create_dir_all(shard).ctx(|| format!("creating {}", shard.display()))?;

        if !target.exists() {
            let mut tmp = tempfile::Builder::new()
                .prefix(".tmp-")
                .tempfile_in(shard)
                .ctx(|| format!("creating temporary object in {}", shard.display()))?;
            let mut src = File::open(image.path()).ctx(|| format!("opening {}", image.path().display()))?;
            io::copy(&mut src, tmp.as_file_mut()).ctx(|| "copying object".into())?;
            tmp.as_file().sync_all().ctx(|| "syncing object".into())?;
            // The source may have changed since it was verified; check the copy.
            let copied = format::verify_path(tmp.path())?;
            if !copied.is_ok() || copied.id != Some(id) {
                return Err(Error::Tampered {
                    id,
                    detail: "image changed while being stored".into(),
                });
            }
            fault::point(fault::HUB_PUT_BEFORE_RENAME);
            match tmp.persist_noclobber(&target) {
                Ok(_) => sync_dir(shard),
                Err(e) if e.error.kind() == io::ErrorKind::AlreadyExists => {}
                Err(e) => return Err(Error::io(format!("storing {}", target.display()), e.error)),
            }
        }
        self.check_same_bytes(image.path(), &target, &id)?;
        fault::point(fault::HUB_PUT_BEFORE_INDEX);
        self.index_object(&id, &target)?;
        Ok(id)
    }

    /// Seal `staging` directly into the hub.
    pub fn seal(&self, staging: StagingPallet, annotation: &ProvenanceAnnotation) -> Result<PalletId> {
        let _writing = self.writer_lock()?;
        let incoming = tempfile::Builder::new()
            .prefix(".incoming-")
            .tempdir_in(self.root.join(OBJECTS))
            .ctx(|| "creating hub scratch directory".into())?;
        let image = staging.seal(annotation, incoming.path().join("sealed.pallet"))?;
        self.put(&image)
    }

    fn check_same_bytes(&self, src: &Path, stored: &Path, id: &PalletId) -> Result<()> {
        if src == stored {
            return Ok(());
        }
        let a = fs::read(src).ctx(|| format!("reading {}", src.display()))?;
        let b = fs::read(stored).ctx(|| format!("reading {}", stored.display()))?;
        if a != b {
            return Err(Error::Corruption(format!(
                "stored object {id} differs from an image claiming the same id"
            )));
        }
        Ok(())
    }

    /// Open and verify a stored pallet.
    pub fn get(&self, id: &PalletId) -> Result<PalletImage> {
        let path = self.object_path(id);
        if !path.is_file() {
            return Err(Error::MissingPallet(*id));
        }
        let image = PalletImage::open(&path).map_err(|e| match e {
            Error::Format(msg) => Error::Corruption(format!("stored object {id}: {msg}")),
            other => other,
        })?;
        let report = image.verify()?;
        if !report.is_ok() || image.id() != *id {
            return Err(Error::Corruption(format!(
                "stored object {id} fails verification (computed {})",
                report.computed_id.map(|c| c.to_string()).unwrap_or_default()
            )));
        }
        Ok(image)
    }

    /// Annotation of a stored, verified pallet.
    pub fn annotation(&self, id: &PalletId) -> Result<ProvenanceAnnotation> {
        self.get(id)?.annotation()
    }

    /// Entries sorted by id, optionally restricted to one kind.
    pub fn list(&self, kind: Option<PalletKind>) -> Result<Vec<HubEntry>> {
        Ok(self
            .read_index()?
            .into_values()
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .collect())
    }

    pub fn ids(&self) -> Result<Vec<PalletId>> {
        Ok(self.read_index()?.into_keys().collect())
    }

    /// Recompute every stored object's digests. Returns one report per
    /// object file found on disk, keyed by the id its path claims.
    pub fn verify_all(&self) -> Result<Vec<(PalletId, VerifyReport)>> {
        let mut out = Vec::new();
        for (id, path) in self.scan_objects()? {
            let mut report = format::verify_path(&path)?;
            if report.id != Some(id) {
                report.id_ok = false;
            }
            out.push((id, report));
        }
        Ok(out)
    }

    fn lock_file(&self, name: &str) -> Result<File> {
        OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join(name))
            .ctx(|| format!("opening hub {name}"))
    }

    fn lock(&self) -> Result<LockGuard> {
        let f = self.lock_file(LOCK)?;
        f.lock().ctx(|| "locking hub".into())?;
        Ok(LockGuard(f))
    }

    /// Shared while a put may have temp files on disk.
    fn writer_lock(&self) -> Result<LockGuard> {
        let f = self.lock_file(WRITERS)?;
        f.lock_shared().ctx(|| "locking hub for writing".into())?;
        Ok(LockGuard(f))
    }

    fn read_index(&self) -> Result<BTreeMap<PalletId, HubEntry>> {
        let path = self.root.join(INDEX);
        let bytes = fs::read(&path).ctx(|| format!("reading {}", path.display()))?;
        let rows: Vec<HubEntry> = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Corruption(format!("hub index unreadable: {e}")))?;
        Ok(rows.into_iter().map(|e| (e.id, e)).collect())
    }

    fn write_index(&self, rows: &BTreeMap<PalletId, HubEntry>) -> Result<()> {
        let rows: Vec<&HubEntry> = rows.values().collect();
        let bytes = canonical::to_vec(&rows).map_err(|e| Error::Hub(e.to_string()))?;
        let mut tmp = tempfile::Builder::new()
            .prefix(".tmp-index-")
            .tempfile_in(&self.root)
            .ctx(|| "creating temporary index".into())?;
        tmp.write_all(&bytes).ctx(|| "writing index".into())?;
        tmp.as_file().sync_all().ctx(|| "syncing index".into())?;
        tmp.persist(self.root.join(INDEX))
            .map_err(|e| Error::io("replacing index", e.error))?;
        sync_dir(&self.root);
        Ok(())
    }

    fn index_object(&self, id: &PalletId, path: &Path) -> Result<()> {
        let _guard = self.lock()?;
        let mut rows = self.read_index()?;
        if rows.contains_key(id) {
            return Ok(());
        }
        rows.insert(*id, entry_for(id, path)?);
        self.write_index(&rows)
    }

    /// Every `<id>.pallet` under objects/, sorted by id. Temp files and
    /// anything not named like an object are skipped.
    fn scan_objects(&self) -> Result<Vec<(PalletId, PathBuf)>> {
        let objects = self.root.join(OBJECTS);
        let mut out = Vec::new();
        for shard in fs::read_dir(&objects).ctx(|| format!("reading {}", objects.display()))? {
            let shard = shard.ctx(|| "reading objects".into())?;
            if !shard.file_type().ctx(|| "reading objects".into())?.is_dir() {
                continue;
            }
            for obj in fs::read_dir(shard.path()).ctx(|| "reading shard".into())? {
                let obj = obj.ctx(|| "reading shard".into())?;
                let name = obj.file_name();
                let Some(stem) = name
                    .to_str()
                    .and_then(|n| n.strip_suffix(&format!(".{}", format::FILE_EXTENSION)))
                else {
                    continue;
                };
                if let Ok(id) = stem.parse::<PalletId>() {
                    if shard.file_name().to_str() == Some(&stem[..2]) {
                        out.push((id, obj.path()));
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Drop index rows whose object is gone, index verified objects that a
    /// crash left unindexed, and clear leftover temp files.
    fn reconcile(&self) -> Result<()> {
        let _guard = self.lock()?;
        self.remove_stale_temps()?;
        let rows = self.read_index()?;
        let mut fixed = BTreeMap::new();
        for (id, path) in self.scan_objects()? {
            if let Some(row) = rows.get(&id) {
                fixed.insert(id, row.clone());
                continue;
            }
            let report = format::verify_path(&path)?;
            if report.is_ok() && report.id == Some(id) {
                fixed.insert(id, entry_for(&id, &path)?);
            } else {
                log::warn!("hub: object {id} fails verification; left unindexed");
            }
        }
        if fixed != rows {
            self.write_index(&fixed)?;
        }
        Ok(())
    }

    fn remove_stale_temps(&self) -> Result<()> {
        // Temp files only count as stale when no put is running.
        let f = self.lock_file(WRITERS)?;
        match f.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Ok(()),
            Err(fs::TryLockError::Error(e)) => return Err(Error::io("locking hub writers", e)),
        }
        let _guard = LockGuard(f);
        let is_temp = |p: &Path| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| TEMP_PREFIXES.iter().any(|t| n.starts_with(t)))
        };
        let objects = self.root.join(OBJECTS);
        for entry in walkdir::WalkDir::new(&objects).min_depth(1).max_depth(2) {
            let entry = entry.map_err(|e| Error::Hub(e.to_string()))?;
            if !is_temp(entry.path()) {
                continue;
            }
            let res = if entry.file_type().is_dir() {
                fs::remove_dir_all(entry.path())
            } else {
                fs::remove_file(entry.path())
            };
            match res {
                Ok(()) => log::info!("hub: removed stale {}", entry.path().display()),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(format!("removing {}", entry.path().display()), e)),
            }
        }
        Ok(())
    }
}

fn entry_for(id: &PalletId, path: &Path) -> Result<HubEntry> {
    let image = PalletImage::open(path)?;
    let annotation = image.annotation()?;
    Ok(HubEntry {
        id: *id,
        kind: annotation.kind,
        node_name: annotation.node_name,
        size: image.file_len(),
        stored_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
    })
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

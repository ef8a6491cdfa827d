//! Capturing a node's created files into a staging pallet.
//!
//! [`StagingSnapshot`] walks the output root after the process exits.
//! [`LiveJournal`] records creations as they happen through inotify and must
//! produce the same file set; it exists to cross-check the snapshot and to
//! show that capture can be driven by interception rather than a post-hoc
//! scan.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsStr;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;

use inotify::{EventMask, Inotify, WatchDescriptor, WatchMask, Watches};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::archive::{RelPath, MODE_MASK};
use crate::error::{Error, Result};
use crate::staging::StagingPallet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureKind {
    #[default]
    StagingSnapshot,
    LiveJournal,
}

impl CaptureKind {
    pub fn backend(self) -> Box<dyn CaptureBackend> {
        match self {
            CaptureKind::StagingSnapshot => Box::new(StagingSnapshot),
            CaptureKind::LiveJournal => Box::new(LiveJournal::default()),
        }
    }
}

pub trait CaptureBackend: Send {
    fn name(&self) -> &'static str;

    /// Called once the output root exists and before the command starts.
    fn begin(&mut self, _out_root: &Path) -> Result<()> {
        Ok(())
    }

    /// Called after the command exits. Yields exactly the regular files
    /// under `out_root`; symlinks and other special files are refused.
    fn finish(&mut self, out_root: &Path, deterministic: bool) -> Result<StagingPallet>;
}

/// Post-exit walk of the output root.
#[derive(Debug, Default)]
pub struct StagingSnapshot;

impl CaptureBackend for StagingSnapshot {
    fn name(&self) -> &'static str {
        "staging_snapshot"
    }

    fn finish(&mut self, out_root: &Path, deterministic: bool) -> Result<StagingPallet> {
        let mut files = BTreeMap::new();
        for entry in WalkDir::new(out_root).min_depth(1).follow_links(false) {
            let entry = entry.map_err(|e| Error::Capture(e.to_string()))?;
            if entry.file_type().is_dir() {
                continue;
            }
            let (path, mode) = classify(out_root, entry.path())?;
            files.insert(path, mode);
        }
        Ok(StagingPallet::adopt(out_root, files, deterministic))
    }
}

/// Check that `path` is a readable regular file and return its archive path
/// and mode.
fn classify(out_root: &Path, path: &Path) -> Result<(RelPath, u32)> {
    let rel = path
        .strip_prefix(out_root)
        .map_err(|_| Error::Capture(format!("{} is outside the output root", path.display())))?;
    let rel_str = rel
        .to_str()
        .ok_or_else(|| Error::Capture(format!("non-UTF-8 file name {}", rel.display())))?;
    let meta = fs::symlink_metadata(path).map_err(|e| Error::Capture(format!("{rel_str}: {e}")))?;
    let ft = meta.file_type();
    if ft.is_symlink() {
        return Err(Error::Capture(format!("{rel_str}: symlinks are not captured")));
    }
    if !ft.is_file() {
        return Err(Error::Capture(format!("{rel_str}: not a regular file")));
    }
    fs::File::open(path).map_err(|e| Error::Capture(format!("{rel_str}: unreadable: {e}")))?;
    let rel = RelPath::new(rel_str).map_err(|e| Error::Capture(e.to_string()))?;
    Ok((rel, meta.permissions().mode() & MODE_MASK))
}

const STOP_FILE: &str = "stop";

struct Journal {
    // Paths relative to the output root. Directories are tracked so that a
    // removed or renamed directory can drop everything recorded below it.
    files: BTreeSet<PathBuf>,
    dirs: HashMap<WatchDescriptor, PathBuf>,
    overflowed: bool,
}

/// Live creation journal over inotify.
#[derive(Default)]
pub struct LiveJournal {
    worker: Option<(JoinHandle<std::io::Result<Journal>>, tempfile::TempDir)>,
}

impl LiveJournal {
    const MASK: WatchMask = WatchMask::CREATE
        .union(WatchMask::MOVED_TO)
        .union(WatchMask::MOVED_FROM)
        .union(WatchMask::DELETE)
        .union(WatchMask::DONT_FOLLOW);
}

impl CaptureBackend for LiveJournal {
    fn name(&self) -> &'static str {
        "live_journal"
    }

    fn begin(&mut self, out_root: &Path) -> Result<()> {
        let fail = |e: std::io::Error| Error::Capture(format!("inotify: {e}"));
        let inotify = Inotify::init().map_err(fail)?;
        let control = tempfile::Builder::new()
            .prefix("datapallet-journal-")
            .tempdir()
            .map_err(fail)?;
        let mut watches = inotify.watches();
        let control_wd = watches.add(control.path(), WatchMask::CREATE).map_err(fail)?;
        let mut journal = Journal {
            files: BTreeSet::new(),
            dirs: HashMap::new(),
            overflowed: false,
        };
        journal.watch_tree(&mut watches, out_root, Path::new("")).map_err(fail)?;
        let root = out_root.to_path_buf();
        let handle = std::thread::spawn(move || run_journal(inotify, watches, journal, root, control_wd));
        self.worker = Some((handle, control));
        Ok(())
    }

    fn finish(&mut self, out_root: &Path, deterministic: bool) -> Result<StagingPallet> {
        let (handle, control) = self
            .worker
            .take()
            .ok_or_else(|| Error::Capture("live journal was never started".into()))?;
        // Events from one inotify instance arrive in order, so once the
        // worker sees this file every earlier event has been handled.
        fs::write(control.path().join(STOP_FILE), b"")
            .map_err(|e| Error::Capture(format!("stopping journal: {e}")))?;
        let journal = handle
            .join()
            .map_err(|_| Error::Capture("journal thread panicked".into()))?
            .map_err(|e| Error::Capture(format!("inotify: {e}")))?;
        if journal.overflowed {
            return Err(Error::Capture("inotify queue overflowed; creations were lost".into()));
        }
        let mut files = BTreeMap::new();
        for rel in &journal.files {
            let full = out_root.join(rel);
            match fs::symlink_metadata(&full) {
                Ok(m) if m.is_dir() => continue,
                Ok(_) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(Error::Capture(format!("{}: {e}", rel.display()))),
            }
            let (path, mode) = classify(out_root, &full)?;
            files.insert(path, mode);
        }
        Ok(StagingPallet::adopt(out_root, files, deterministic))
    }
}

fn run_journal(
    mut inotify: Inotify,
    mut watches: Watches,
    mut journal: Journal,
    root: PathBuf,
    control_wd: WatchDescriptor,
) -> std::io::Result<Journal> {
    let mut buffer = vec![0u8; 64 * 1024];
    loop {
        let events: Vec<_> = inotify
            .read_events_blocking(&mut buffer)?
            .map(|e| e.to_owned())
            .collect();
        for event in events {
            if event.wd == control_wd {
                if event.name.as_deref() == Some(OsStr::new(STOP_FILE)) {
                    return Ok(journal);
                }
                continue;
            }
            if event.mask.contains(EventMask::Q_OVERFLOW) {
                journal.overflowed = true;
                continue;
            }
            let (Some(dir), Some(name)) = (journal.dirs.get(&event.wd).cloned(), event.name.as_deref()) else {
                continue;
            };
            let rel = dir.join(name);
            let is_dir = event.mask.contains(EventMask::ISDIR);
            if event.mask.intersects(EventMask::CREATE | EventMask::MOVED_TO) {
                if is_dir {
                    journal.watch_tree(&mut watches, &root.join(&rel), &rel)?;
                } else {
                    journal.files.insert(rel);
                }
            } else if event.mask.intersects(EventMask::DELETE | EventMask::MOVED_FROM) {
                journal.forget(&rel);
            }
        }
    }
}

impl Journal {
    /// Watch `dir` and everything below it, recording files already present.
    /// Anything created between the watch and the scan is seen twice, which
    /// the set absorbs.
    fn watch_tree(&mut self, watches: &mut Watches, dir: &Path, rel: &Path) -> std::io::Result<()> {
        let wd = match watches.add(dir, LiveJournal::MASK | WatchMask::ONLYDIR) {
            Ok(wd) => wd,
            // Removed or replaced before we got to it; its events are moot.
            Err(e) if matches!(e.raw_os_error(), Some(libc::ENOENT) | Some(libc::ENOTDIR)) => return Ok(()),
            Err(e) => return Err(e),
        };
        self.dirs.insert(wd, rel.to_path_buf());
        let entries = match fs::read_dir(dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let child_rel = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                self.watch_tree(watches, &entry.path(), &child_rel)?;
            } else {
                self.files.insert(child_rel);
            }
        }
        Ok(())
    }

    fn forget(&mut self, rel: &Path) {
        self.files.retain(|f| !f.starts_with(rel));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::fs::symlink;

    fn paths(s: &StagingPallet) -> Vec<String> {
        s.pending().map(|(p, _)| p.to_string()).collect()
    }

    #[test]
    fn snapshot_lists_nested_files() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("a")).unwrap();
        fs::create_dir_all(tmp.path().join("empty")).unwrap();
        fs::write(tmp.path().join("a/b.dat"), b"1").unwrap();
        let s = StagingSnapshot.finish(tmp.path(), true).unwrap();
        assert_eq!(paths(&s), vec!["a/b.dat"]);
    }

    #[test]
    fn snapshot_refuses_symlinks() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("real"), b"1").unwrap();
        symlink("real", tmp.path().join("link")).unwrap();
        let err = StagingSnapshot.finish(tmp.path(), true).unwrap_err();
        assert!(err.to_string().contains("link"), "{err}");
    }

    #[test]
    fn journal_matches_snapshot() {
        let tmp = tempfile::tempdir().unwrap();
        let mut j = LiveJournal::default();
        j.begin(tmp.path()).unwrap();
        let root = tmp.path();
        fs::create_dir_all(root.join("x/y/z")).unwrap();
        fs::write(root.join("x/y/z/deep"), b"d").unwrap();
        fs::write(root.join("top"), b"t").unwrap();
        fs::write(root.join("gone"), b"g").unwrap();
        fs::remove_file(root.join("gone")).unwrap();
        fs::write(root.join("tmpname"), b"r").unwrap();
        fs::rename(root.join("tmpname"), root.join("x/renamed")).unwrap();
        fs::create_dir(root.join("d")).unwrap();
        fs::write(root.join("d/f"), b"f").unwrap();
        fs::rename(root.join("d"), root.join("moved")).unwrap();
        let live = j.finish(root, true).unwrap();
        let snap = StagingSnapshot.finish(root, true).unwrap();
        assert_eq!(paths(&live), paths(&snap));
        assert_eq!(paths(&snap), vec!["moved/f", "top", "x/renamed", "x/y/z/deep"]);
    }

    #[test]
    fn journal_requires_begin() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(LiveJournal::default().finish(tmp.path(), true).is_err());
    }
}

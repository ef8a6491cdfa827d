#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use datapallet::{Hub, PalletId, ProvenanceAnnotation, RunOptions, StagingPallet};
use sha2::{Digest, Sha256};
use tempfile::TempDir;
use walkdir::WalkDir;

/// A temp dir the unprivileged run user can traverse.
pub fn scratch() -> TempDir {
    let t = tempfile::tempdir().unwrap();
    fs::set_permissions(t.path(), fs::Permissions::from_mode(0o755)).unwrap();
    t
}

pub struct Env {
    pub tmp: TempDir,
    pub hub: Hub,
    pub opts: RunOptions,
}

impl Env {
    pub fn new() -> Self {
        let tmp = scratch();
        let hub = Hub::init(tmp.path().join("hub")).unwrap();
        let opts = RunOptions::new(tmp.path().join("runs"));
        Env { tmp, hub, opts }
    }

    pub fn seal(&self, annotation: &ProvenanceAnnotation, files: &[(&str, &[u8], u32)]) -> PalletId {
        let mut s = StagingPallet::create(self.tmp.path(), true).unwrap();
        for (p, c, m) in files {
            s.add_file(p, c, *m).unwrap();
        }
        self.hub.seal(s, annotation).unwrap()
    }

    pub fn app(&self, name: &str, script: &str) -> PalletId {
        self.seal(&ProvenanceAnnotation::application(name), &[("run.sh", script.as_bytes(), 0o755)])
    }

    pub fn deck(&self, name: &str, content: &str) -> PalletId {
        self.seal(&ProvenanceAnnotation::input_deck(name), &[("deck.txt", content.as_bytes(), 0o644)])
    }

    /// Extract `id` into a fresh dir and hash its tree.
    pub fn tree_of(&self, id: &PalletId) -> BTreeMap<String, (u32, String)> {
        let dest = self.tmp.path().join(format!("x-{}", rand_suffix()));
        fs::create_dir(&dest).unwrap();
        self.hub.get(id).unwrap().extract(&dest).unwrap();
        let t = tree_hashes(&dest);
        fs::remove_dir_all(&dest).unwrap();
        t
    }
}

fn rand_suffix() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    N.fetch_add(1, Ordering::Relaxed)
}

/// Relative path to (mode, sha256) for every regular file under `root`.
pub fn tree_hashes(root: &Path) -> BTreeMap<String, (u32, String)> {
    let mut out = BTreeMap::new();
    for e in WalkDir::new(root).min_depth(1) {
        let e = e.unwrap();
        if e.file_type().is_file() {
            let rel = e.path().strip_prefix(root).unwrap().to_str().unwrap().to_string();
            let mode = e.metadata().unwrap().permissions().mode() & 0o7777;
            out.insert(rel, (mode, hex::encode(Sha256::digest(fs::read(e.path()).unwrap()))));
        }
    }
    out
}

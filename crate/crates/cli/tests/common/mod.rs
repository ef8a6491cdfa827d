#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_datapallet");

/// A temp dir with a hub path and a run dir, reachable by the unprivileged
/// run user.
pub struct Sandbox {
    pub tmp: TempDir,
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn line(&self) -> &str {
        self.stdout.trim()
    }
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Run {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

impl Sandbox {
    pub fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o755)).unwrap();
        Sandbox { tmp }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    pub fn hub(&self) -> PathBuf {
        self.path("hub")
    }

    pub fn command(&self) -> Command {
        let mut c = Command::new(BIN);
        c.env_remove("DATAPALLET_HUB")
            .env_remove("DATAPALLET_FAULT")
            .current_dir(self.tmp.path())
            .arg("--hub")
            .arg(self.hub());
        c
    }

    pub fn run(&self, args: &[&str]) -> Run {
        self.command().args(args).output().unwrap().into()
    }

    /// Run and require success, returning trimmed stdout.
    pub fn ok(&self, args: &[&str]) -> String {
        let r = self.run(args);
        assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
        r.line().to_string()
    }

    pub fn write(&self, rel: &str, content: &str, mode: u32) -> PathBuf {
        let p = self.path(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, content).unwrap();
        fs::set_permissions(&p, fs::Permissions::from_mode(mode)).unwrap();
        p
    }

    /// Wrap a one-file application and a one-file deck; returns their ids.
    pub fn app_and_deck(&self, tag: &str, script: &str, deck: &str) -> (String, String) {
        self.write(&format!("{tag}-app/run.sh"), script, 0o755);
        self.write(&format!("{tag}-deck/deck.txt"), deck, 0o644);
        let app = self.ok(&["--deterministic", "wrap", &format!("{tag}-app"), "--kind", "application", "--name", &format!("{tag}-app")]);
        let deck = self.ok(&["--deterministic", "wrap", &format!("{tag}-deck"), "--kind", "input_deck", "--name", &format!("{tag}-deck")]);
        (app, deck)
    }

    pub fn runs(&self) -> String {
        self.path("runs").to_str().unwrap().to_string()
    }
}

pub fn is_id(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn object_file(hub: &Path, id: &str) -> PathBuf {
    hub.join("objects").join(&id[..2]).join(format!("{id}.pallet"))
}

//! Running one workflow node: materialize its application, input deck, and
//! input pallets into a workspace, run the command, and seal whatever it
//! created into a new data pallet linked to all of them.
//!
//! Workspace layout, one directory per run:
//!
//! ```text
//! <run-root>/app        application pallet, read-only
//! <run-root>/deck       input deck pallet, read-only
//! <run-root>/in0..inN   input pallets, read-only
//! <run-root>/out        output root; the command's working directory
//! <run-root>/quarantine failed runs move app/deck/in*/out here
//! <run-root>/report.json
//! ```

mod capture;

pub use capture::{CaptureBackend, CaptureKind, LiveJournal, StagingSnapshot};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::annotations::ProvenanceAnnotation;
use crate::canonical;
use crate::error::{Error, IoContext, Result};
use crate::hub::Hub;
use crate::id::PalletId;

/// Marker a command may print on stderr to report its own runtime in
/// nanoseconds, letting the runner separate process spin-up from work.
pub const APP_NANOS_MARKER: &str = "datapallet:app_nanos=";

/// The uid/gid commands run as when the runner itself is root, since
/// permission bits do not restrain root.
pub const UNPRIVILEGED_ID: u32 = 65534;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowNodeSpec {
    pub node_name: String,
    pub application_id: PalletId,
    pub input_deck_id: PalletId,
    #[serde(default)]
    pub input_pallet_ids: Vec<PalletId>,
    /// Argument vector. `{APP}`, `{DECK}`, `{IN:i}` and `{OUT}` expand to
    /// workspace paths anywhere inside an argument.
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token<'a> {
    Lit(&'a str),
    App,
    Deck,
    Out,
    In(usize),
}

fn tokenize(arg: &str) -> Result<Vec<Token<'_>>> {
    let mut out = Vec::new();
    let mut rest = arg;
    while let Some(start) = rest.find('{') {
        if start > 0 {
            out.push(Token::Lit(&rest[..start]));
        }
        let tail = &rest[start..];
        let (tok, len) = if tail.starts_with("{APP}") {
            (Token::App, 5)
        } else if tail.starts_with("{DECK}") {
            (Token::Deck, 6)
        } else if tail.starts_with("{OUT}") {
            (Token::Out, 5)
        } else if let Some(idx) = tail.strip_prefix("{IN:") {
            let end = idx
                .find('}')
                .ok_or_else(|| Error::InvalidSpec(format!("unterminated placeholder in {arg:?}")))?;
            let i = idx[..end]
                .parse::<usize>()
                .map_err(|_| Error::InvalidSpec(format!("bad input index in {arg:?}")))?;
            (Token::In(i), 4 + end + 1)
        } else {
            (Token::Lit("{"), 1)
        };
        out.push(tok);
        rest = &tail[len..];
    }
    if !rest.is_empty() {
        out.push(Token::Lit(rest));
    }
    Ok(out)
}

impl WorkflowNodeSpec {
    pub fn new(
        node_name: impl Into<String>,
        application_id: PalletId,
        input_deck_id: PalletId,
        command: Vec<String>,
    ) -> Self {
        WorkflowNodeSpec {
            node_name: node_name.into(),
            application_id,
            input_deck_id,
            input_pallet_ids: Vec::new(),
            command,
            env: BTreeMap::new(),
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.command.is_empty() {
            return Err(Error::InvalidSpec("command is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.input_pallet_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidSpec(format!("input pallet {id} listed twice")));
            }
        }
        for arg in &self.command {
            for tok in tokenize(arg)? {
                if let Token::In(i) = tok {
                    if i >= self.input_pallet_ids.len() {
                        return Err(Error::InvalidSpec(format!(
                            "{{IN:{i}}} but only {} input pallet(s)",
                            self.input_pallet_ids.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Substitute workspace paths into the command.
    pub fn expand(&self, ws: &Workspace) -> Result<Vec<String>> {
        self.command
            .iter()
            .map(|arg| {
                let mut s = String::new();
                for tok in tokenize(arg)? {
                    let path = match tok {
                        Token::Lit(l) => {
                            s.push_str(l);
                            continue;
                        }
                        Token::App => &ws.app,
                        Token::Deck => &ws.deck,
                        Token::Out => &ws.out,
                        Token::In(i) => ws
                            .inputs
                            .get(i)
                            .ok_or_else(|| Error::InvalidSpec(format!("no input {i}")))?,
                    };
                    s.push_str(
                        path.to_str()
                            .ok_or_else(|| Error::InvalidSpec(format!("non-UTF-8 path {}", path.display())))?,
                    );
                }
                Ok(s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
    pub app: PathBuf,
    pub deck: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
}

impl Workspace {
    fn read_only_dirs(&self) -> impl Iterator<Item = &PathBuf> {
        [&self.app, &self.deck].into_iter().chain(self.inputs.iter())
    }

    pub fn quarantine(&self) -> PathBuf {
        self.root.join("quarantine")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Per-phase timings of one node run, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Workspace creation, pallet extraction, capture setup.
    pub t_prepare: f64,
    /// Process wall time minus the command's self-reported runtime; zero
    /// when the command reports nothing.
    pub t_spawn: f64,
    /// Command runtime.
    pub t_app: f64,
    /// Capture, seal, and storage in the hub.
    pub t_seal: f64,
    /// Post-run checks and workspace removal.
    pub t_teardown: f64,
    pub t_total: f64,
    pub exit_code: i32,
    pub output_id: Option<PalletId>,
    /// Writes detected outside the output root, and similar notes.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunReport {
    fn new() -> Self {
        RunReport {
            t_prepare: 0.0,
            t_spawn: 0.0,
            t_app: 0.0,
            t_seal: 0.0,
            t_teardown: 0.0,
            t_total: 0.0,
            exit_code: -1,
            output_id: None,
            warnings: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        canonical::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Parent directory for per-run roots.
    pub runs_dir: PathBuf,
    pub capture: CaptureKind,
    /// Keep app/deck/in*/out after a successful run.
    pub keep_workspace: bool,
    /// uid/gid for the command. `None` runs it as the current user.
    pub run_as: Option<(u32, u32)>,
}

impl RunOptions {
    pub fn new(runs_dir: impl Into<PathBuf>) -> Self {
        // SAFETY: geteuid has no preconditions and cannot fail.
        let euid = unsafe { libc::geteuid() };
        RunOptions {
            runs_dir: runs_dir.into(),
            capture: CaptureKind::default(),
            keep_workspace: false,
            run_as: (euid == 0).then_some((UNPRIVILEGED_ID, UNPRIVILEGED_ID)),
        }
    }
}

/// Resolve and verify every referenced pallet and lay out a fresh workspace.
pub fn prepare_workspace(spec: &WorkflowNodeSpec, hub: &Hub, opts: &RunOptions) -> Result<Workspace> {
    spec.validate()?;
    let fetch = |id: &PalletId| {
        hub.get(id).map_err(|e| match e {
            Error::Corruption(detail) => Error::Tampered { id: *id, detail },
            other => other,
        })
    };
    let app = fetch(&spec.application_id)?;
    let deck = fetch(&spec.input_deck_id)?;
    let inputs = spec.input_pallet_ids.iter().map(fetch).collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&opts.runs_dir).ctx(|| format!("creating {}", opts.runs_dir.display()))?;
    let prefix = format!("{}-", sanitize(&spec.node_name));
    let root = tempfile::Builder::new()
        .prefix(&prefix)
        .tempdir_in(&opts.runs_dir)
        .ctx(|| format!("creating run directory in {}", opts.runs_dir.display()))?
        .keep();
    set_mode(&root, 0o755)?;
    if let Some((uid, _)) = opts.run_as {
        check_traversable(&root, uid)?;
    }

    let ws = Workspace {
        app: root.join("app"),
        deck: root.join("deck"),
        inputs: (0..inputs.len()).map(|i| root.join(format!("in{i}"))).collect(),
        out: root.join("out"),
        root,
    };
    for (image, dir) in [(&app, &ws.app), (&deck, &ws.deck)]
        .into_iter()
        .chain(inputs.iter().zip(ws.inputs.iter()))
    {
        fs::create_dir(dir).ctx(|| format!("creating {}", dir.display()))?;
        image.extract(dir)?;
        make_read_only(dir)?;
    }
    fs::create_dir(&ws.out).ctx(|| format!("creating {}", ws.out.display()))?;
    set_mode(&ws.out, 0o755)?;
    if let Some((uid, gid)) = opts.run_as {
        std::os::unix::fs::chown(&ws.out, Some(uid), Some(gid))
            .ctx(|| format!("handing {} to uid {uid}", ws.out.display()))?;
    }
    Ok(ws)
}

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(40)
        .collect();
    if s.is_empty() {
        "node".into()
    } else {
        s
    }
}

fn set_mode(path: &Path, mode: u32) -> Result<()> {
    fs::set_permissions(path, fs::Permissions::from_mode(mode)).ctx(|| format!("chmod {}", path.display()))
}

/// Strip every write bit. Files stay readable (and, when owner-executable,
/// executable) by everyone so an unprivileged command can still use them.
fn make_read_only(dir: &Path) -> Result<()> {
    // Children first, so directories lose their write bit last.
    for entry in WalkDir::new(dir).contents_first(true) {
        let entry = entry.map_err(|e| Error::io(format!("walking {}", dir.display()), e.into()))?;
        let mode = if entry.file_type().is_dir() {
            0o555
        } else {
            let m = entry.metadata().map_err(|e| Error::io("stat", e.into()))?.mode() & 0o7777;
            let exec = if m & 0o100 != 0 { 0o111 } else { 0 };
            (m & !0o222 & 0o7555) | 0o444 | exec
        };
        set_mode(entry.path(), mode)?;
    }
    Ok(())
}

fn make_writable(dir: &Path) {
    for entry in WalkDir::new(dir).into_iter().flatten() {
        if entry.file_type().is_dir() {
            let _ = fs::set_permissions(entry.path(), fs::Permissions::from_mode(0o755));
        }
    }
}

fn check_traversable(root: &Path, uid: u32) -> Result<()> {
    for dir in root.ancestors().skip(1) {
        let Ok(meta) = fs::metadata(dir) else { continue };
        let ok = if meta.uid() == uid { meta.mode() & 0o100 != 0 } else { meta.mode() & 0o001 != 0 };
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "{} is not searchable by uid {uid}; place the runs directory under a world-searchable path",
                dir.display()
            )));
        }
    }
    Ok(())
}

/// Content hashes of every file in the read-only parts of the workspace.
fn snapshot_inputs(ws: &Workspace) -> BTreeMap<PathBuf, [u8; 32]> {
    let mut out = BTreeMap::new();
    for dir in ws.read_only_dirs() {
        for entry in WalkDir::new(dir).into_iter().flatten() {
            let digest = if entry.file_type().is_file() {
                match fs::read(entry.path()) {
                    Ok(b) => Sha256::digest(&b).into(),
                    Err(_) => [0xff; 32],
                }
            } else {
                [0; 32]
            };
            out.insert(entry.path().to_path_buf(), digest);
        }
    }
    out
}

fn root_listing(ws: &Workspace) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(&ws.root)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .collect();
    out.sort();
    out
}

fn diff_warnings(
    before: &BTreeMap<PathBuf, [u8; 32]>,
    after: &BTreeMap<PathBuf, [u8; 32]>,
    root_before: &[PathBuf],
    root_after: &[PathBuf],
) -> Vec<String> {
    let mut w = Vec::new();
    for (path, digest) in after {
        match before.get(path) {
            None => w.push(format!("write outside output root: created {}", path.display())),
            Some(d) if d != digest => w.push(format!("write outside output root: modified {}", path.display())),
            _ => {}
        }
    }
    for path in before.keys().filter(|p| !after.contains_key(*p)) {
        w.push(format!("write outside output root: removed {}", path.display()));
    }
    for path in root_after.iter().filter(|p| !root_before.contains(p)) {
        w.push(format!("write outside output root: created {}", path.display()));
    }
    w
}

fn secs(since: Instant) -> f64 {
    since.elapsed().as_secs_f64()
}

/// Run one node and seal its outputs into `hub`.
pub fn run_node(spec: &WorkflowNodeSpec, hub: &Hub, opts: &RunOptions) -> Result<(PalletId, RunReport)> {
    let started = Instant::now();
    let mut report = RunReport::new();

    let ws = prepare_workspace(spec, hub, opts)?;
    let argv = spec.expand(&ws)?;
    let inputs_before = snapshot_inputs(&ws);
    let mut backend = opts.capture.backend();
    if let Err(e) = backend.begin(&ws.out) {
        return Err(fail(&ws, report, started, e));
    }
    report.t_prepare = secs(started);

    let stdout = File::create(ws.root.join("stdout.log")).ctx(|| "creating stdout.log".into())?;
    let stderr_path = ws.root.join("stderr.log");
    let stderr = File::create(&stderr_path).ctx(|| "creating stderr.log".into())?;
    let root_before = root_listing(&ws);

    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(&ws.out)
        .env_clear()
        .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
        .env("LANG", "C")
        .envs(&spec.env)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr);
    if let Some((uid, gid)) = opts.run_as {
        // Done by hand rather than with CommandExt::uid/gid so supplementary
        // groups are dropped too, which must happen before setuid.
        unsafe {
            cmd.pre_exec(move || {
                if libc::setgroups(0, std::ptr::null()) != 0
                    || libc::setgid(gid) != 0
                    || libc::setuid(uid) != 0
                {
                    return Err(io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }

    let spawned = Instant::now();
    let status = match cmd.status() {
        Ok(s) => s,
        Err(e) => {
            let err = Error::io(format!("starting {:?}", argv[0]), e);
            return Err(fail(&ws, report, started, err));
        }
    };
    let wall = secs(spawned);
    report.exit_code = status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0));
    match self_reported_secs(&stderr_path) {
        Some(app) if app <= wall => {
            report.t_app = app;
            report.t_spawn = wall - app;
        }
        _ => report.t_app = wall,
    }

    if !status.success() {
        report.t_total = secs(started);
        let quarantine = quarantine(&ws, &report);
        return Err(Error::NodeFailed {
            report: Box::new(report),
            quarantine,
        });
    }

    let seal_started = Instant::now();
    let sealed = backend.finish(&ws.out, spec.deterministic).and_then(|staging| {
        let mut annotation = ProvenanceAnnotation::data_pallet(
            spec.application_id,
            spec.input_deck_id,
            spec.input_pallet_ids.clone(),
            // The template, not the expansion: workspace paths differ per run.
            ProvenanceAnnotation::render_command(&spec.command),
            spec.node_name.clone(),
        );
        if !spec.deterministic {
            annotation.created_at = Some(Utc::now());
        }
        hub.seal(staging, &annotation)
    });
    let id = match sealed {
        Ok(id) => id,
        Err(e) => return Err(fail(&ws, report, started, e)),
    };
    report.t_seal = secs(seal_started);
    report.output_id = Some(id);

    let teardown = Instant::now();
    report.warnings = diff_warnings(&inputs_before, &snapshot_inputs(&ws), &root_before, &root_listing(&ws));
    for w in &report.warnings {
        log::warn!("{}: {w}", spec.node_name);
    }
    if !opts.keep_workspace {
        for dir in ws.read_only_dirs().chain(std::iter::once(&ws.out)) {
            make_writable(dir);
            fs::remove_dir_all(dir).ctx(|| format!("removing {}", dir.display()))?;
        }
    }
    report.t_teardown = secs(teardown);
    report.t_total = secs(started);
    write_report(&ws, &report)?;
    Ok((id, report))
}

fn self_reported_secs(stderr: &Path) -> Option<f64> {
    let f = File::open(stderr).ok()?;
    BufReader::new(f)
        .lines()
        .map_while(|l| l.ok())
        .filter_map(|l| l.trim().strip_prefix(APP_NANOS_MARKER).and_then(|n| n.trim().parse::<u64>().ok()))
        .last()
        .map(|n| n as f64 / 1e9)
}

fn write_report(ws: &Workspace, report: &RunReport) -> Result<()> {
    let path = ws.report_path();
    fs::write(&path, report.to_json()).ctx(|| format!("writing {}", path.display()))
}

/// Move the workspace under quarantine/ and record the report.
fn quarantine(ws: &Workspace, report: &RunReport) -> PathBuf {
    let q = ws.quarantine();
    let _ = fs::create_dir_all(&q);
    for dir in ws.read_only_dirs().chain(std::iter::once(&ws.out)) {
        if let Some(name) = dir.file_name() {
            let _ = fs::rename(dir, q.join(name));
        }
    }
    let _ = write_report(ws, report);
    q
}

fn fail(ws: &Workspace, mut report: RunReport, started: Instant, err: Error) -> Error {
    report.t_total = secs(started);
    report.warnings.push(err.to_string());
    quarantine(ws, &report);
    err
}

/// Run nodes in order, appending each node's output id to the next node's
/// input pallets. Stops at the first failure.
pub fn chain_nodes(specs: &[WorkflowNodeSpec], hub: &Hub, opts: &RunOptions) -> Result<Vec<PalletId>> {
    let mut produced: Vec<PalletId> = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut spec = spec.clone();
        if let Some(prev) = produced.last() {
            spec.input_pallet_ids.push(*prev);
        }
        let (id, _) = run_node(&spec, hub, opts)?;
        produced.push(id);
    }
    Ok(produced)
}

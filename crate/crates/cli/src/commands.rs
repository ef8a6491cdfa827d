use std::fs;
use std::io::{self, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use datapallet::ancestry::{ancestors, dependents};
use datapallet::bench::{self, SyntheticApp};
use datapallet::format::verify_path;
use datapallet::{
    archive, canonical, run_node, Error, Hub, PalletId, PalletImage, PalletKind, PartitionKind,
    ProvenanceAnnotation, RunOptions, StagingPallet, WorkflowNodeSpec,
};
use serde_json::{json, Value};
use walkdir::WalkDir;

use crate::args::{BenchCommand, Cli, Command, HubCommand, RunArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_GENERAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_INTEGRITY: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingPallet(_) => EXIT_MISSING,
            Error::Decode(_) | Error::PartitionNotFound(_) => EXIT_INTEGRITY,
            e if e.is_integrity() => EXIT_INTEGRITY,
            Error::InvalidId(_)
            | Error::InvalidPath { .. }
            | Error::Validation(_)
            | Error::InvalidSpec(_)
            | Error::Hub(_) => EXIT_USAGE,
            Error::NodeFailed { report, .. } => report.exit_code.clamp(1, 255) as u8,
            _ => EXIT_GENERAL,
        };
        CliError::new(code, e.to_string())
    }
}

type CliResult<T = u8> = Result<T, CliError>;

fn out(text: impl AsRef<str>) {
    let mut stdout = io::stdout().lock();
    let _ = stdout.write_all(text.as_ref().as_bytes());
    if !text.as_ref().ends_with('\n') {
        let _ = stdout.write_all(b"\n");
    }
}

fn json_out(v: &Value) {
    out(canonical::to_string(v).expect("JSON values serialize"));
}

fn parse_id(s: &str) -> CliResult<PalletId> {
    Ok(s.parse::<PalletId>()?)
}

/// Open the hub at `--hub`, creating it when `create` is set.
fn hub(cli: &Cli, create: bool) -> CliResult<Hub> {
    if create {
        Ok(Hub::init(&cli.hub)?)
    } else if Hub::is_hub(&cli.hub) {
        Ok(Hub::open(&cli.hub)?)
    } else {
        Err(CliError::new(EXIT_USAGE, format!("no pallet hub at {}", cli.hub.display())))
    }
}

/// A pallet file path, or the hub object for an id.
fn resolve(cli: &Cli, target: &str) -> CliResult<PathBuf> {
    let path = Path::new(target);
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if PalletId::looks_like_id(target) {
        let id = parse_id(target)?;
        if Hub::is_hub(&cli.hub) {
            let object = Hub::open(&cli.hub)?.object_path(&id);
            if object.is_file() {
                return Ok(object);
            }
        }
        return Err(Error::MissingPallet(id).into());
    }
    Err(CliError::new(EXIT_MISSING, format!("{target}: no such pallet file or id")))
}

/// Open `path` and fail with the integrity code unless it verifies.
fn open_verified(path: &Path) -> CliResult<PalletImage> {
    let report = verify_path(path)?;
    if !report.is_ok() {
        return Err(CliError::new(
            EXIT_INTEGRITY,
            format!("{} failed verification: {}", path.display(), report.detail()),
        ));
    }
    Ok(PalletImage::open(path)?)
}

/// A world-searchable temp dir, so a dropped-privilege command can reach it.
fn scratch() -> CliResult<tempfile::TempDir> {
    let t = tempfile::Builder::new()
        .prefix("datapallet-")
        .tempdir()
        .map_err(|e| CliError::new(EXIT_GENERAL, format!("creating scratch dir: {e}")))?;
    fs::set_permissions(t.path(), fs::Permissions::from_mode(0o755))
        .map_err(|e| CliError::new(EXIT_GENERAL, format!("creating scratch dir: {e}")))?;
    Ok(t)
}

pub fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Wrap { path, kind, name } => wrap(cli, path, kind, name),
        Command::Run(args) => run(cli, args),
        Command::Inspect { target } => inspect(cli, target),
        Command::Verify { target } => verify(cli, target),
        Command::Extract { target, dest } => extract(cli, target, dest),
        Command::Ancestry {
            id,
            depth,
            dot,
            dependents,
        } => ancestry(cli, id, *depth, *dot, *dependents),
        Command::Hub(HubCommand::Init) => hub_init(cli),
        Command::Hub(HubCommand::List { kind }) => hub_list(cli, kind.as_deref()),
        Command::Bench(BenchCommand::Space) => bench_space(cli),
        Command::Bench(BenchCommand::Node {
            trials,
            sleep_ms,
            output_bytes,
            gnuplot,
        }) => bench_node(cli, *trials, *sleep_ms, *output_bytes, *gnuplot),
    }
}

fn stage(path: &Path, staging: &mut StagingPallet) -> CliResult<()> {
    let usage = |msg: String| CliError::new(EXIT_USAGE, msg);
    let meta = fs::symlink_metadata(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let add = |staging: &mut StagingPallet, file: &Path, rel: &Path| -> CliResult<()> {
        let rel = rel
            .to_str()
            .ok_or_else(|| usage(format!("{}: path is not UTF-8", file.display())))?;
        let content = fs::read(file).map_err(|e| usage(format!("{}: {e}", file.display())))?;
        let mode = fs::metadata(file).map_err(|e| usage(format!("{}: {e}", file.display())))?.permissions().mode();
        Ok(staging.add_file(rel, &content, mode)?)
    };
    if meta.is_file() {
        let name = path.file_name().ok_or_else(|| usage(format!("{}: no file name", path.display())))?;
        return add(staging, path, Path::new(name));
    }
    if !meta.is_dir() {
        return Err(usage(format!("{}: not a regular file or directory", path.display())));
    }
    for entry in WalkDir::new(path).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| usage(e.to_string()))?;
        let ft = entry.file_type();
        if ft.is_dir() {
            continue;
        }
        if !ft.is_file() {
            return Err(usage(format!("{}: only regular files can be wrapped", entry.path().display())));
        }
        let rel = entry.path().strip_prefix(path).expect("walk stays under its root");
        add(staging, entry.path(), rel)?;
    }
    Ok(())
}

fn wrap(cli: &Cli, path: &Path, kind: &str, name: &str) -> CliResult {
    let kind: PalletKind = kind.parse()?;
    let mut annotation = match kind {
        PalletKind::Application => ProvenanceAnnotation::application(name),
        PalletKind::InputDeck => ProvenanceAnnotation::input_deck(name),
        PalletKind::DataPallet => {
            return Err(CliError::new(EXIT_USAGE, "data pallets are produced by `run`, not wrapped"));
        }
    };
    if !cli.deterministic {
        annotation = annotation.with_created_at(chrono::Utc::now());
    }
    let mut staging = StagingPallet::create(std::env::temp_dir(), cli.deterministic)?;
    stage(path, &mut staging)?;
    let files = staging.len();
    let hub = hub(cli, true)?;
    let id = hub.seal(staging, &annotation)?;
    if cli.json {
        json_out(&json!({"files": files, "id": id, "kind": kind, "node_name": name}));
    } else {
        out(id.to_hex());
    }
    Ok(EXIT_OK)
}

fn run(cli: &Cli, args: &RunArgs) -> CliResult {
    let app = parse_id(&args.app)?;
    let deck = parse_id(&args.deck)?;
    let inputs = args.inputs.iter().map(|s| parse_id(s)).collect::<CliResult<Vec<_>>>()?;
    let hub = hub(cli, true)?;
    for id in std::iter::once(&app).chain([&deck]).chain(&inputs) {
        if !hub.contains(id) {
            return Err(Error::MissingPallet(*id).into());
        }
    }
    let mut spec = WorkflowNodeSpec::new(&args.name, app, deck, args.argv.clone());
    spec.input_pallet_ids = inputs;
    spec.env = args.env.iter().cloned().collect();
    spec.deterministic = cli.deterministic;

    fs::create_dir_all(&args.run_dir)
        .map_err(|e| CliError::new(EXIT_USAGE, format!("{}: {e}", args.run_dir.display())))?;
    let run_dir = fs::canonicalize(&args.run_dir)
        .map_err(|e| CliError::new(EXIT_USAGE, format!("{}: {e}", args.run_dir.display())))?;
    let mut opts = RunOptions::new(run_dir);
    opts.capture = args.capture.into();
    opts.keep_workspace = args.keep_workspace;

    let write_report = |json: &str| -> CliResult<()> {
        if let Some(p) = &args.report {
            fs::write(p, json).map_err(|e| CliError::new(EXIT_GENERAL, format!("{}: {e}", p.display())))?;
        }
        Ok(())
    };
    match run_node(&spec, &hub, &opts) {
        Ok((id, report)) => {
            let json = report.to_json();
            write_report(&json)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if cli.json {
                out(json);
            } else {
                out(id.to_hex());
                eprintln!(
                    "prepare {:.4}s  spawn {:.4}s  app {:.4}s  seal {:.4}s  teardown {:.4}s  total {:.4}s",
                    report.t_prepare, report.t_spawn, report.t_app, report.t_seal, report.t_teardown, report.t_total
                );
            }
            Ok(EXIT_OK)
        }
        Err(Error::NodeFailed { report, quarantine }) => {
            let json = report.to_json();
            write_report(&json)?;
            if cli.json {
                out(json);
            }
            Err(CliError::new(
                report.exit_code.clamp(1, 255) as u8,
                format!("{} exited with code {}; workspace kept at {}", args.name, report.exit_code, quarantine.display()),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn inspect(cli: &Cli, target: &str) -> CliResult {
    let path = resolve(cli, target)?;
    let image = open_verified(&path)?;
    let annotation = image.annotation()?;
    let annotation_json: Value =
        serde_json::from_slice(&annotation.encode()?).map_err(|e| CliError::new(EXIT_INTEGRITY, e.to_string()))?;
    let entries = archive::decode(&image.read_partition(PartitionKind::DataArchive)?)?;
    let partitions: Vec<Value> = image
        .header()
        .partitions
        .iter()
        .map(|d| json!({"kind": d.kind.to_string(), "length": d.length, "offset": d.offset}))
        .collect();
    if cli.json {
        let files: Vec<Value> = entries
            .iter()
            .map(|e| json!({"mode": format!("{:04o}", e.mode), "path": e.path.as_str(), "size": e.size()}))
            .collect();
        json_out(&json!({
            "annotation": annotation_json,
            "files": files,
            "id": image.id(),
            "partitions": partitions,
            "size": image.file_len(),
            "verified": true,
        }));
        return Ok(EXIT_OK);
    }
    let mut text = format!("id          {}\nstatus      verified\nsize        {} bytes\n", image.id(), image.file_len());
    for d in &image.header().partitions {
        text += &format!("partition   {:<12} offset {:>8}  length {:>10}\n", d.kind.to_string(), d.offset, d.length);
    }
    text += &format!("files       {}\n", entries.len());
    for e in &entries {
        text += &format!("  {:04o} {:>10}  {}\n", e.mode, e.size(), e.path);
    }
    text += "annotation\n";
    let pretty = serde_json::to_string_pretty(&annotation_json).expect("JSON values serialize");
    for line in pretty.lines() {
        text += &format!("  {line}\n");
    }
    out(text);
    Ok(EXIT_OK)
}

fn verify(cli: &Cli, target: &str) -> CliResult {
    let path = resolve(cli, target)?;
    let report = verify_path(&path)?;
    if cli.json {
        json_out(&serde_json::to_value(&report).expect("report serializes"));
    } else if report.is_ok() {
        out(format!("ok {}", report.computed_id.map(|i| i.to_hex()).unwrap_or_default()));
    }
    if report.is_ok() {
        Ok(EXIT_OK)
    } else {
        Err(CliError::new(EXIT_INTEGRITY, format!("{} FAILED: {}", path.display(), report.detail())))
    }
}

fn extract(cli: &Cli, target: &str, dest: &Path) -> CliResult {
    let path = resolve(cli, target)?;
    let image = open_verified(&path)?;
    fs::create_dir_all(dest).map_err(|e| CliError::new(EXIT_USAGE, format!("{}: {e}", dest.display())))?;
    let written = image.extract(dest)?;
    if cli.json {
        json_out(&Value::from(written.iter().map(|p| p.as_str()).collect::<Vec<_>>()));
    } else {
        for p in &written {
            out(p.as_str());
        }
    }
    Ok(EXIT_OK)
}

fn ancestry(cli: &Cli, id: &str, depth: Option<usize>, dot: bool, reverse: bool) -> CliResult {
    let id = parse_id(id)?;
    if !Hub::is_hub(&cli.hub) {
        return Err(Error::MissingPallet(id).into());
    }
    let hub = hub(cli, false)?;
    if reverse {
        if !hub.contains(&id) {
            return Err(Error::MissingPallet(id).into());
        }
        let ids = dependents(&id, &hub)?;
        if cli.json {
            json_out(&serde_json::to_value(&ids).expect("ids serialize"));
        } else {
            for d in ids {
                out(d.to_hex());
            }
        }
        return Ok(EXIT_OK);
    }
    let graph = ancestors(&id, &hub, depth)?;
    for d in graph.diagnostics() {
        eprintln!("warning: {d}");
    }
    if dot {
        out(graph.render_dot());
    } else if cli.json {
        out(graph.to_json());
    } else {
        let mut text = String::from("nodes\n");
        for n in graph.nodes.values() {
            match (&n.kind, &n.node_name, n.resolved) {
                (Some(k), Some(name), true) => text += &format!("  {}  {:<12} {}\n", n.id, k.as_str(), name),
                _ => text += &format!("  {}  (not in hub)\n", n.id),
            }
        }
        text += "edges\n";
        for e in &graph.edges {
            text += &format!("  {} -> {}  {}\n", e.child.short(12), e.parent.short(12), e.link.as_str());
        }
        out(text);
    }
    Ok(EXIT_OK)
}

fn hub_init(cli: &Cli) -> CliResult {
    let hub = hub(cli, true)?;
    if cli.json {
        json_out(&json!({"pallets": hub.ids()?.len(), "root": hub.root()}));
    } else {
        out(format!("hub ready at {}", hub.root().display()));
    }
    Ok(EXIT_OK)
}

fn hub_list(cli: &Cli, kind: Option<&str>) -> CliResult {
    let kind = kind.map(str::parse::<PalletKind>).transpose()?;
    let hub = hub(cli, false)?;
    let entries = hub.list(kind)?;
    if cli.json {
        json_out(&serde_json::to_value(&entries).expect("entries serialize"));
    } else {
        for e in entries {
            out(format!("{}  {:<12} {:>10}  {}", e.id, e.kind.as_str(), e.size, e.node_name));
        }
    }
    Ok(EXIT_OK)
}

fn bench_space(cli: &Cli) -> CliResult {
    let tmp = scratch()?;
    let report = bench::measure_space(tmp.path())?;
    if cli.json {
        json_out(&serde_json::to_value(&report).expect("report serializes"));
    } else {
        out(report.render_text());
    }
    Ok(EXIT_OK)
}

fn bench_node(cli: &Cli, trials: usize, sleep_ms: u64, output_bytes: u64, gnuplot: bool) -> CliResult {
    if trials == 0 {
        return Err(CliError::new(EXIT_USAGE, "--trials must be at least 1"));
    }
    if gnuplot && !bench::gnuplot_available() {
        return Err(CliError::new(EXIT_USAGE, "gnuplot is not on PATH"));
    }
    let tmp = scratch()?;
    let hub = Hub::init(tmp.path().join("hub"))?;
    let spec = if gnuplot {
        bench::install_gnuplot(&hub, tmp.path(), cli.deterministic)?
    } else {
        SyntheticApp {
            sleep_ms,
            output_bytes,
        }
        .install(&hub, tmp.path(), cli.deterministic)?
    };
    let opts = RunOptions::new(tmp.path().join("runs"));
    let report = bench::measure_node(&spec, &hub, &opts, trials)?;
    if cli.json {
        json_out(&serde_json::to_value(&report).expect("report serializes"));
    } else {
        let mut text = report.render_text();
        text += &format!(
            "\nphase additivity (total >= prepare + app + seal, 5% slack): {}\n",
            if report.additivity_ok() { "holds" } else { "VIOLATED" }
        );
        out(text);
    }
    Ok(EXIT_OK)
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use datapallet::runner::CaptureKind;

#[derive(Debug, Parser)]
#[command(name = "datapallet", version, about = "Wrap, run, inspect, and trace data pallets")]
pub struct Cli {
    /// Hub directory.
    #[arg(long, global = true, env = "DATAPALLET_HUB", default_value = "./pallet-hub")]
    pub hub: PathBuf,

    /// Omit timestamps so identical inputs give identical pallet ids.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Print canonical JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Wrap a file or directory as an application or input deck pallet.
    Wrap {
        path: PathBuf,
        /// application or input_deck
        #[arg(long)]
        kind: String,
        #[arg(long)]
        name: String,
    },
    /// Run one workflow node and store its output pallet.
    Run(RunArgs),
    /// Show a pallet's id, partitions, files, and annotation.
    Inspect {
        /// Pallet id in the hub, or path to a pallet file.
        target: String,
    },
    /// Recompute a pallet's digests.
    Verify { target: String },
    /// Write a pallet's files under DEST.
    Extract { target: String, dest: PathBuf },
    /// Show what a pallet was made from, or what was made from it.
    Ancestry {
        id: String,
        /// Stop after this many links from the root.
        #[arg(long)]
        depth: Option<usize>,
        /// Graphviz output.
        #[arg(long, conflicts_with = "dependents")]
        dot: bool,
        /// List pallets that reference ID instead.
        #[arg(long)]
        dependents: bool,
    },
    #[command(subcommand)]
    Hub(HubCommand),
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub app: String,
    #[arg(long)]
    pub deck: String,
    /// Earlier data pallet, mounted as {IN:0}, {IN:1}, ... in order.
    #[arg(long = "input")]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub name: String,
    /// Parent of per-run workspaces.
    #[arg(long, default_value = "./pallet-runs")]
    pub run_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Capture::Snapshot)]
    pub capture: Capture,
    /// Keep the workspace after a successful run.
    #[arg(long)]
    pub keep_workspace: bool,
    /// Extra environment for the command, KEY=VALUE.
    #[arg(long = "env", value_parser = parse_env)]
    pub env: Vec<(String, String)>,
    /// Also write the run report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Command and arguments; {APP}, {DECK}, {IN:i}, {OUT} expand to workspace paths.
    #[arg(last = true, required = true)]
    pub argv: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Capture {
    Snapshot,
    Journal,
}

impl From<Capture> for CaptureKind {
    fn from(c: Capture) -> Self {
        match c {
            Capture::Snapshot => CaptureKind::StagingSnapshot,
            Capture::Journal => CaptureKind::LiveJournal,
        }
    }
}

fn parse_env(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

#[derive(Debug, Subcommand)]
pub enum HubCommand {
    /// Create an empty hub (or open the existing one).
    Init,
    /// List stored pallets.
    List {
        #[arg(long)]
        kind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Sizes of empty and 1 MiB pallets and of annotation streams.
    Space,
    /// Per-phase timings of a node run repeatedly in a scratch hub.
    Node {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Runtime of the synthetic application.
        #[arg(long, default_value_t = 25)]
        sleep_ms: u64,
        /// Size of the synthetic application's output.
        #[arg(long, default_value_t = 100 * 1024)]
        output_bytes: u64,
        /// Plot with a real gnuplot instead of the synthetic application.
        #[arg(long)]
        gnuplot: bool,
    },
}

//! Overhead measurements: image sizes and per-phase node timings, each
//! reported next to the published reference figures they correspond to.
//!
//! Reference figures come from a different format and different hardware.
//! They are printed for comparison and never treated as targets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::os::unix::fs::MetadataExt;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use statrs::statistics::Statistics;
use walkdir::WalkDir;

use crate::annotations::{ExtendedContext, ProvenanceAnnotation};
use crate::error::{Error, IoContext, Result};
use crate::hub::Hub;
use crate::id::PalletId;
use crate::runner::{run_node, RunOptions, RunReport, WorkflowNodeSpec};
use crate::staging::StagingPallet;

pub const MIB: u64 = 1 << 20;

/// Published space overheads: empty container, writeable container,
/// attributes stream.
pub const REF_EMPTY_KB: f64 = 32.2;
pub const REF_WRITEABLE_KB: f64 = 704.5;
pub const REF_ATTRIBUTES_MB: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceReference {
    pub empty_kb: f64,
    pub writeable_kb: f64,
    pub attributes_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceReport {
    pub empty_pallet_bytes: u64,
    pub payload_bytes: u64,
    pub payload_pallet_bytes: u64,
    /// Allocated footprint of a staging directory holding the payload,
    /// minus the payload itself.
    pub writeable_overhead_bytes: u64,
    /// Encoded size of a minimal application annotation.
    pub annotation_stream_bytes: u64,
    /// Encoded size of a data pallet annotation with inputs, extended
    /// contexts, and a timestamp.
    pub rich_annotation_stream_bytes: u64,
    pub reference_values: SpaceReference,
}

fn footprint(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in WalkDir::new(dir) {
        let entry = entry.map_err(|e| Error::io("measuring staging footprint", e.into()))?;
        let meta = entry.metadata().map_err(|e| Error::io("stat", e.into()))?;
        // Some filesystems report no blocks for directories; count apparent
        // size so the footprint is never below the bytes stored.
        total += (meta.blocks() * 512).max(meta.len());
    }
    Ok(total)
}

fn rich_annotation() -> ProvenanceAnnotation {
    let ids: Vec<PalletId> = (0u8..8).map(|i| PalletId::digest(&[i])).collect();
    let mut a = ProvenanceAnnotation::data_pallet(
        PalletId::digest(b"application"),
        PalletId::digest(b"deck"),
        ids,
        "sh /run/app/plot.sh /run/deck/plot.cfg --output /run/out/plot.png",
        "gnuplot-node",
    )
    .with_created_at(chrono::Utc::now());
    for n in 0..2 {
        a = a
            .extend(ExtendedContext {
                application_id: PalletId::digest(&[b'a', n]),
                input_deck_id: PalletId::digest(&[b'd', n]),
                node_name: format!("republish-{n}"),
            })
            .expect("data pallet extends");
    }
    a
}

/// Seal an empty pallet and a 1 MiB pallet under `scratch` and measure them.
pub fn measure_space(scratch: &Path) -> Result<SpaceReport> {
    let minimal = ProvenanceAnnotation::application("bench-empty");
    let empty = StagingPallet::create(scratch, true)?.seal(&minimal, scratch.join("empty.pallet"))?;

    let mut staging = StagingPallet::create(scratch, true)?;
    let payload: Vec<u8> = (0..MIB).map(|i| (i * 31 % 251) as u8).collect();
    staging.add_file("payload.bin", &payload, 0o644)?;
    let writeable = footprint(staging.root())?.saturating_sub(MIB);
    let full = staging.seal(&ProvenanceAnnotation::application("bench-payload"), scratch.join("payload.pallet"))?;

    let report = SpaceReport {
        empty_pallet_bytes: empty.file_len(),
        payload_bytes: MIB,
        payload_pallet_bytes: full.file_len(),
        writeable_overhead_bytes: writeable,
        annotation_stream_bytes: minimal.encode()?.len() as u64,
        rich_annotation_stream_bytes: rich_annotation().encode()?.len() as u64,
        reference_values: SpaceReference {
            empty_kb: REF_EMPTY_KB,
            writeable_kb: REF_WRITEABLE_KB,
            attributes_mb: REF_ATTRIBUTES_MB,
        },
    };
    fs::remove_file(empty.path()).ok();
    fs::remove_file(full.path()).ok();
    Ok(report)
}

impl SpaceReport {
    pub fn render_text(&self) -> String {
        let rows = [
            ("Empty pallet", human(self.empty_pallet_bytes), format!("{REF_EMPTY_KB} KB (empty container)")),
            (
                "Writeable overhead",
                human(self.writeable_overhead_bytes),
                format!("{REF_WRITEABLE_KB} KB (writeable ext3 container; staging dir here)"),
            ),
            (
                "Annotation stream (minimal)",
                human(self.annotation_stream_bytes),
                format!("{REF_ATTRIBUTES_MB} MB (attributes stream)"),
            ),
            ("Annotation stream (rich)", human(self.rich_annotation_stream_bytes), String::new()),
            (
                "1 MiB payload pallet",
                human(self.payload_pallet_bytes),
                format!("+{} B over payload", self.payload_pallet_bytes - self.payload_bytes),
            ),
        ];
        table(&["Space overhead", "Measured", "Published reference"], &rows.map(|(a, b, c)| [a.to_string(), b, c]))
    }
}

fn human(bytes: u64) -> String {
    if bytes >= MIB {
        format!("{:.2} MiB", bytes as f64 / MIB as f64)
    } else if bytes >= 1024 {
        format!("{:.1} KiB ({bytes} B)", bytes as f64 / 1024.0)
    } else {
        format!("{bytes} B")
    }
}

fn table<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let mut widths = header.map(str::len);
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).unwrap();
    };
    line(&mut out, &header.map(String::from));
    line(&mut out, &widths.map(|w| "-".repeat(w)));
    for r in rows {
        line(&mut out, r);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
}

impl PhaseStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        Some(PhaseStats {
            mean: samples.mean(),
            min: samples.min(),
            max: samples.max(),
            stddev: samples.population_std_dev(),
        })
    }
}

/// How a row is computed from the per-trial measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prepare,
    Spawn,
    App,
    Seal,
    Teardown,
    Total,
    Extract,
    /// App plus seal.
    AppAndSeal,
    /// Spawn, app, and seal.
    Container,
}

impl Phase {
    pub const ALL: [Phase; 9] = [
        Phase::Prepare,
        Phase::Spawn,
        Phase::App,
        Phase::Seal,
        Phase::Teardown,
        Phase::Total,
        Phase::Extract,
        Phase::AppAndSeal,
        Phase::Container,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Phase::Prepare => "t_prepare",
            Phase::Spawn => "t_spawn",
            Phase::App => "t_app",
            Phase::Seal => "t_seal",
            Phase::Teardown => "t_teardown",
            Phase::Total => "t_total",
            Phase::Extract => "t_extract",
            Phase::AppAndSeal => "t_app+t_seal",
            Phase::Container => "t_spawn+t_app+t_seal",
        }
    }

    fn sample(self, r: &RunReport, extract: f64) -> f64 {
        match self {
            Phase::Prepare => r.t_prepare,
            Phase::Spawn => r.t_spawn,
            Phase::App => r.t_app,
            Phase::Seal => r.t_seal,
            Phase::Teardown => r.t_teardown,
            Phase::Total => r.t_total,
            Phase::Extract => extract,
            Phase::AppAndSeal => r.t_app + r.t_seal,
            Phase::Container => r.t_spawn + r.t_app + r.t_seal,
        }
    }
}

/// A published timing row and the measured phase standing in for it.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub group: &'static str,
    pub label: &'static str,
    pub phase: Phase,
    pub reference_seconds: f64,
}

/// Workflow node overheads (six rows) then application container
/// overheads (three rows).
pub const REFERENCE_ROWS: [ReferenceRow; 9] = [
    ReferenceRow { group: "node", label: "Mount capture layer (FUSE mount)", phase: Phase::Prepare, reference_seconds: 0.037 },
    ReferenceRow { group: "node", label: "Spin up / tear down application", phase: Phase::Spawn, reference_seconds: 0.498 },
    ReferenceRow { group: "node", label: "Run application and create pallets", phase: Phase::AppAndSeal, reference_seconds: 0.037 },
    ReferenceRow { group: "node", label: "Total application container run", phase: Phase::Container, reference_seconds: 0.535 },
    ReferenceRow { group: "node", label: "Tear down capture layer (FUSE unmount)", phase: Phase::Teardown, reference_seconds: 0.029 },
    ReferenceRow { group: "node", label: "Total workflow node", phase: Phase::Total, reference_seconds: 0.601 },
    ReferenceRow { group: "app", label: "Run application on input data", phase: Phase::App, reference_seconds: 0.0284 },
    ReferenceRow { group: "app", label: "Data pallet creation / storage", phase: Phase::Seal, reference_seconds: 0.00133 },
    ReferenceRow { group: "app", label: "Pull output file from pallet", phase: Phase::Extract, reference_seconds: 0.00725 },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub group: &'static str,
    pub label: &'static str,
    pub phase: &'static str,
    pub measured: Option<PhaseStats>,
    pub reference_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub trials: usize,
    pub failures: usize,
    /// Keyed by phase name; empty when every trial failed.
    pub phases: BTreeMap<&'static str, PhaseStats>,
    pub rows: Vec<TimingRow>,
}

/// Relative slack allowed when checking that the total covers its parts.
pub const ADDITIVITY_EPSILON: f64 = 0.05;

impl TimingReport {
    pub fn phase(&self, p: Phase) -> Option<&PhaseStats> {
        self.phases.get(p.key())
    }

    pub fn rows_for<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a TimingRow> {
        self.rows.iter().filter(move |r| r.group == group)
    }

    /// Mean total is at least the summed means of prepare, app, and seal,
    /// within [`ADDITIVITY_EPSILON`].
    pub fn additivity_ok(&self) -> bool {
        let mean = |p| self.phase(p).map(|s| s.mean).unwrap_or(0.0);
        let parts = mean(Phase::Prepare) + mean(Phase::App) + mean(Phase::Seal);
        mean(Phase::Total) >= parts * (1.0 - ADDITIVITY_EPSILON)
    }

    pub fn render_text(&self) -> String {
        let ms = |s: f64| format!("{:.3} ms", s * 1e3);
        let mut out = format!("trials: {}  failures: {}\n", self.trials, self.failures);
        for (group, title) in [("node", "Workflow node overheads"), ("app", "Application overheads")] {
            let rows: Vec<[String; 6]> = self
                .rows_for(group)
                .map(|r| {
                    let (mean, sd, range) = match &r.measured {
                        Some(s) => (ms(s.mean), ms(s.stddev), format!("{} .. {}", ms(s.min), ms(s.max))),
                        None => ("n/a".into(), "n/a".into(), "n/a".into()),
                    };
                    [r.label.to_string(), r.phase.to_string(), mean, sd, range, format!("{} s", r.reference_seconds)]
                })
                .collect();
            out.push('\n');
            out.push_str(&table(&[title, "Phase", "Mean", "Stddev", "Min .. Max", "Published"], &rows));
        }
        out
    }
}

/// Run `spec` `trials` times in sequence, extracting each output once to
/// time retrieval.
pub fn measure_node(spec: &WorkflowNodeSpec, hub: &Hub, opts: &RunOptions, trials: usize) -> Result<TimingReport> {
    if trials == 0 {
        return Err(Error::InvalidSpec("trials must be at least 1".into()));
    }
    let mut samples: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut failures = 0;
    fs::create_dir_all(&opts.runs_dir).ctx(|| format!("creating {}", opts.runs_dir.display()))?;
    let scratch = tempfile::Builder::new()
        .prefix("bench-extract-")
        .tempdir_in(&opts.runs_dir)
        .ctx(|| "creating extraction scratch".into())?;
    for trial in 0..trials {
        let (id, report) = match run_node(spec, hub, opts) {
            Ok(ok) => ok,
            Err(e) => {
                log::warn!("trial {trial} failed: {e}");
                failures += 1;
                continue;
            }
        };
        let dest = scratch.path().join(trial.to_string());
        fs::create_dir(&dest).ctx(|| "creating extraction dir".into())?;
        let started = Instant::now();
        hub.get(&id)?.extract(&dest)?;
        let extract = started.elapsed().as_secs_f64();
        fs::remove_dir_all(&dest).ok();
        for p in Phase::ALL {
            samples.entry(p.key()).or_default().push(p.sample(&report, extract));
        }
    }
    let phases: BTreeMap<&'static str, PhaseStats> = samples
        .iter()
        .filter_map(|(k, v)| PhaseStats::from_samples(v).map(|s| (*k, s)))
        .collect();
    let rows = REFERENCE_ROWS
        .iter()
        .map(|r| TimingRow {
            group: r.group,
            label: r.label,
            phase: r.phase.key(),
            measured: phases.get(r.phase.key()).copied(),
            reference_seconds: r.reference_seconds,
        })
        .collect();
    Ok(TimingReport {
        trials,
        failures,
        phases,
        rows,
    })
}

/// A bundled stand-in for a plotting application: reads its deck, sleeps,
/// writes a fixed-size output, and reports its own runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticApp {
    pub sleep_ms: u64,
    pub output_bytes: u64,
}

impl Default for SyntheticApp {
    fn default() -> Self {
        SyntheticApp {
            sleep_ms: 25,
            output_bytes: 100 * 1024,
        }
    }
}

const SYNTHETIC_SCRIPT: &str = r#"#!/bin/sh
# Synthetic plotting workload: read the deck, work, write one output file.
start=$(date +%s%N)
. "$1"
cat "$1" > /dev/null
sleep "$SLEEP"
head -c "$BYTES" /dev/zero | tr '\000' 'p' > plot.dat
end=$(date +%s%N)
case "$start$end" in
  *[!0-9]*) ;;
  *) echo "datapallet:app_nanos=$((end - start))" >&2 ;;
esac
"#;

const GNUPLOT_SCRIPT: &str = "#!/bin/sh\nexec gnuplot \"$1\"\n";
const GNUPLOT_DECK: &str = "set terminal png size 640,480\nset output 'plot.png'\nplot sin(x)\n";

impl SyntheticApp {
    /// Wrap the application and its deck into `hub` and return a node spec
    /// that runs them.
    pub fn install(&self, hub: &Hub, scratch: &Path, deterministic: bool) -> Result<WorkflowNodeSpec> {
        let mut app = StagingPallet::create(scratch, true)?;
        app.add_file("synthetic-plot.sh", SYNTHETIC_SCRIPT.as_bytes(), 0o755)?;
        let app_id = hub.seal(app, &ProvenanceAnnotation::application("synthetic-plot"))?;

        let mut deck = StagingPallet::create(scratch, true)?;
        let cfg = format!("SLEEP={:.3}\nBYTES={}\n", self.sleep_ms as f64 / 1e3, self.output_bytes);
        deck.add_file("plot.cfg", cfg.as_bytes(), 0o644)?;
        let deck_id = hub.seal(deck, &ProvenanceAnnotation::input_deck("synthetic-plot-deck"))?;

        let mut spec = WorkflowNodeSpec::new(
            "synthetic-plot",
            app_id,
            deck_id,
            vec!["sh".into(), "{APP}/synthetic-plot.sh".into(), "{DECK}/plot.cfg".into()],
        );
        spec.deterministic = deterministic;
        Ok(spec)
    }
}

/// True when a `gnuplot` executable is on `PATH`.
pub fn gnuplot_available() -> bool {
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|p| p.join("gnuplot").is_file()))
        .unwrap_or(false)
}

/// Wrap a real gnuplot invocation, for hosts that have it.
pub fn install_gnuplot(hub: &Hub, scratch: &Path, deterministic: bool) -> Result<WorkflowNodeSpec> {
    let mut app = StagingPallet::create(scratch, true)?;
    app.add_file("gnuplot.sh", GNUPLOT_SCRIPT.as_bytes(), 0o755)?;
    let app_id = hub.seal(app, &ProvenanceAnnotation::application("gnuplot"))?;
    let mut deck = StagingPallet::create(scratch, true)?;
    deck.add_file("plot.gp", GNUPLOT_DECK.as_bytes(), 0o644)?;
    let deck_id = hub.seal(deck, &ProvenanceAnnotation::input_deck("gnuplot-deck"))?;
    let mut spec = WorkflowNodeSpec::new(
        "gnuplot",
        app_id,
        deck_id,
        vec!["sh".into(), "{APP}/gnuplot.sh".into(), "{DECK}/plot.gp".into()],
    );
    spec.deterministic = deterministic;
    Ok(spec)
}

//! Data pallets: hash-identified, annotation-carrying images for the
//! applications, input decks, and generated data of a workflow.
//!
//! A workflow node runs an application pallet against an input deck pallet
//! (and optionally earlier data pallets). Everything the node creates is
//! sealed into a new data pallet whose annotations name exactly those
//! pallets by id, so provenance travels inside the image itself.
//!
//! The guide under `book/` walks through the concepts; its code samples run
//! as doc tests of this crate.

pub mod ancestry;
pub mod annotations;
pub mod archive;
pub mod bench;
pub mod canonical;
mod error;
pub mod fault;
pub mod format;
pub mod hub;
mod id;
pub mod runner;
pub mod staging;

pub use annotations::{ExtendedContext, Link, PalletKind, ProvenanceAnnotation};
pub use archive::{ArchiveEntry, RelPath};
pub use error::{Error, Result};
pub use format::{PalletImage, PartitionKind, VerifyReport};
pub use hub::{Hub, HubEntry};
pub use id::PalletId;
pub use runner::{chain_nodes, prepare_workspace, run_node, RunOptions, RunReport, WorkflowNodeSpec, Workspace};
pub use staging::StagingPallet;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/format.md")]
    struct Format;
    #[doc = include_str!("../../../book/src/annotations.md")]
    struct Annotations;
    #[doc = include_str!("../../../book/src/annotation-schema.md")]
    struct AnnotationSchema;
    #[doc = include_str!("../../../book/src/runner.md")]
    struct Runner;
    #[doc = include_str!("../../../book/src/hub.md")]
    struct HubChapter;
    #[doc = include_str!("../../../book/src/ancestry.md")]
    struct Ancestry;
    #[doc = include_str!("../../../book/src/bench.md")]
    struct Bench;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}

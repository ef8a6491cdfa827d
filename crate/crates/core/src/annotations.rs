//! Provenance annotations: the JSON record in every pallet's Annotations
//! partition naming the pallets that produced it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::canonical;
use crate::error::{Error, Result};
use crate::id::PalletId;

pub const SCHEMA_VERSION: u32 = 1;

const KNOWN_KEYS: &[&str] = &[
    "schema_version",
    "kind",
    "application_id",
    "input_deck_id",
    "input_pallet_ids",
    "command",
    "node_name",
    "created_at",
    "extended_contexts",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PalletKind {
    Application,
    InputDeck,
    DataPallet,
}

impl PalletKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Application => "application",
            Self::InputDeck => "input_deck",
            Self::DataPallet => "data_pallet",
        }
    }
}

impl fmt::Display for PalletKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PalletKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "application" => Ok(Self::Application),
            "input_deck" | "input-deck" => Ok(Self::InputDeck),
            "data_pallet" | "data-pallet" => Ok(Self::DataPallet),
            _ => Err(Error::Validation(format!("unknown pallet kind {s:?}"))),
        }
    }
}

/// The context of a downstream node that re-published a pallet's data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtendedContext {
    pub application_id: PalletId,
    pub input_deck_id: PalletId,
    pub node_name: String,
}

/// How an annotation refers to another pallet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Application,
    InputDeck,
    InputPallet,
    ExtendedContext,
}

impl Link {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Application => "application",
            Self::InputDeck => "input_deck",
            Self::InputPallet => "input_pallet",
            Self::ExtendedContext => "extended_context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceAnnotation {
    pub schema_version: u32,
    pub kind: PalletKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub application_id: Option<PalletId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_deck_id: Option<PalletId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_pallet_ids: Vec<PalletId>,
    /// The executed command line, shell-quoted. Empty for non-data kinds.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub command: String,
    pub node_name: String,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "ser_time",
        deserialize_with = "de_time"
    )]
    pub created_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extended_contexts: Vec<ExtendedContext>,
    /// Keys this schema version does not know, preserved verbatim.
    #[serde(flatten)]
    pub extras: BTreeMap<String, Value>,
}

fn ser_time<S: Serializer>(t: &Option<DateTime<Utc>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match t {
        Some(t) => s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::AutoSi, true)),
        None => s.serialize_none(),
    }
}

fn de_time<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DateTime<Utc>>, D::Error> {
    let s = String::deserialize(d)?;
    DateTime::parse_from_rfc3339(&s)
        .map(|t| Some(t.with_timezone(&Utc)))
        .map_err(serde::de::Error::custom)
}

impl ProvenanceAnnotation {
    fn base(kind: PalletKind, node_name: impl Into<String>) -> Self {
        ProvenanceAnnotation {
            schema_version: SCHEMA_VERSION,
            kind,
            application_id: None,
            input_deck_id: None,
            input_pallet_ids: Vec::new(),
            command: String::new(),
            node_name: node_name.into(),
            created_at: None,
            extended_contexts: Vec::new(),
            extras: BTreeMap::new(),
        }
    }

    pub fn application(node_name: impl Into<String>) -> Self {
        Self::base(PalletKind::Application, node_name)
    }

    pub fn input_deck(node_name: impl Into<String>) -> Self {
        Self::base(PalletKind::InputDeck, node_name)
    }

    pub fn data_pallet(
        application_id: PalletId,
        input_deck_id: PalletId,
        input_pallet_ids: Vec<PalletId>,
        command: impl Into<String>,
        node_name: impl Into<String>,
    ) -> Self {
        ProvenanceAnnotation {
            application_id: Some(application_id),
            input_deck_id: Some(input_deck_id),
            input_pallet_ids,
            command: command.into(),
            ..Self::base(PalletKind::DataPallet, node_name)
        }
    }

    /// Shell-quote an argument vector for the `command` field.
    pub fn render_command<S: AsRef<str>>(argv: &[S]) -> String {
        shlex::try_join(argv.iter().map(|s| s.as_ref()))
            .unwrap_or_else(|_| argv.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join(" "))
    }

    pub fn with_created_at(mut self, t: DateTime<Utc>) -> Self {
        self.created_at = Some(t);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!("unknown schema_version {}", self.schema_version));
        }
        match self.kind {
            PalletKind::DataPallet => {
                if self.application_id.is_none() {
                    return fail("data_pallet requires application_id".into());
                }
                if self.input_deck_id.is_none() {
                    return fail("data_pallet requires input_deck_id".into());
                }
            }
            PalletKind::Application | PalletKind::InputDeck => {
                if self.application_id.is_some() || self.input_deck_id.is_some() {
                    return fail(format!("{} must not carry application_id or input_deck_id", self.kind));
                }
                if !self.input_pallet_ids.is_empty() {
                    return fail(format!("{} must not carry input_pallet_ids", self.kind));
                }
                if !self.command.is_empty() {
                    return fail(format!("{} must not carry a command", self.kind));
                }
                if !self.extended_contexts.is_empty() {
                    return fail(format!("{} must not carry extended_contexts", self.kind));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for id in &self.input_pallet_ids {
            if !seen.insert(id) {
                return fail(format!("input_pallet_ids lists {id} twice"));
            }
        }
        if let Some(key) = self.extras.keys().find(|k| KNOWN_KEYS.contains(&k.as_str())) {
            return fail(format!("extras shadow schema key {key:?}"));
        }
        Ok(())
    }

    /// Canonical JSON bytes. Equal annotations always encode identically.
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        canonical::to_vec(self).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Parse and validate. Non-canonical input is accepted.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let raw: Value = serde_json::from_slice(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        // Checked first so a future schema gets a clear message instead of
        // whatever field error it would otherwise trip.
        match raw.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::Decode(format!("unknown schema_version {v}"))),
            None => return Err(Error::Decode("missing schema_version".into())),
        }
        let a: Self = serde_json::from_value(raw).map_err(|e| Error::Decode(e.to_string()))?;
        a.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Decode(msg),
            other => other,
        })?;
        Ok(a)
    }

    /// A copy with `ctx` appended to `extended_contexts`. Only data pallets
    /// can be re-published.
    pub fn extend(&self, ctx: ExtendedContext) -> Result<Self> {
        if self.kind != PalletKind::DataPallet {
            return Err(Error::Validation(format!(
                "only data_pallet annotations can be extended, not {}",
                self.kind
            )));
        }
        let mut out = self.clone();
        out.extended_contexts.push(ctx);
        Ok(out)
    }

    /// Every reference this annotation makes, in field order.
    pub fn links(&self) -> Vec<(PalletId, Link)> {
        let mut out = Vec::new();
        out.extend(self.application_id.map(|id| (id, Link::Application)));
        out.extend(self.input_deck_id.map(|id| (id, Link::InputDeck)));
        out.extend(self.input_pallet_ids.iter().map(|&id| (id, Link::InputPallet)));
        for ctx in &self.extended_contexts {
            out.push((ctx.application_id, Link::ExtendedContext));
            out.push((ctx.input_deck_id, Link::ExtendedContext));
        }
        out
    }

    pub fn antecedent_ids(&self) -> BTreeSet<PalletId> {
        self.links().into_iter().map(|(id, _)| id).collect()
    }

    pub fn references(&self, id: &PalletId) -> bool {
        self.links().iter().any(|(other, _)| other == id)
    }

    pub fn summary(&self, id: PalletId) -> AnnotationSummary {
        AnnotationSummary {
            id,
            kind: self.kind,
            node_name: self.node_name.clone(),
            antecedents: self.antecedent_ids().len(),
        }
    }
}

/// One row of a hub listing, derived from an annotation and its pallet id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub id: PalletId,
    pub kind: PalletKind,
    pub node_name: String,
    /// Number of distinct pallets this one references.
    pub antecedents: usize,
}

//! Canonical JSON and the history, command-script and trace file formats.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::activity::ExecutionRecord;
use crate::engine::{LogEntry, ScriptEntry, Session, SessionStatus};
use crate::history::{CompletionStatus, HistoricalInstance, HistoryStore};
use crate::rng::RNG_ALGORITHM;
use crate::value::Value;

pub const HISTORY_SCHEMA_VERSION: u32 = 1;
pub const COMMANDS_SCHEMA_VERSION: u32 = 1;
pub const TRACE_SCHEMA_VERSION: u32 = 1;

fn sorted(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            serde_json::Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        serde_json::Value::Array(items) => serde_json::Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// Pretty-printed JSON with sorted keys, shortest round-trip floats, LF line
/// endings and a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("canonical types serialize to JSON");
    let mut s = serde_json::to_string_pretty(&sorted(v)).expect("JSON values always print");
    s.push('\n');
    s
}

fn digest(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("corrupt {kind} file: {message}")]
    Corrupt { kind: &'static str, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct HistoryRecord {
    digest: String,
    instance: HistoricalInstance,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct HistoryFile {
    schema_version: u32,
    instances: Vec<HistoryRecord>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct VersionProbe {
    schema_version: u32,
}

fn check_version(bytes: &[u8], kind: &'static str, expected: u32) -> Result<(), FormatError> {
    let probe: VersionProbe = serde_json::from_slice(bytes).map_err(|e| FormatError::Corrupt {
        kind,
        message: e.to_string(),
    })?;
    if probe.schema_version != expected {
        return Err(FormatError::Version {
            kind,
            found: probe.schema_version,
            expected,
        });
    }
    Ok(())
}

fn parse<T: DeserializeOwned>(bytes: &[u8], kind: &'static str) -> Result<T, FormatError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| FormatError::Corrupt {
        kind,
        message: e.to_string(),
    })
}

pub fn save_history(store: &HistoryStore) -> String {
    let file = HistoryFile {
        schema_version: HISTORY_SCHEMA_VERSION,
        instances: store
            .instances()
            .iter()
            .map(|i| HistoryRecord {
                digest: digest(&canonical_json(i)),
                instance: i.clone(),
            })
            .collect(),
    };
    canonical_json(&file)
}

/// Loads a history file, verifying every record's digest. Nothing is returned
/// unless the whole file is intact.
pub fn load_history(bytes: &[u8]) -> Result<HistoryStore, FormatError> {
    const KIND: &str = "history";
    check_version(bytes, KIND, HISTORY_SCHEMA_VERSION)?;
    let file: HistoryFile = parse(bytes, KIND)?;
    let mut store = HistoryStore::new();
    for (i, rec) in file.instances.into_iter().enumerate() {
        if digest(&canonical_json(&rec.instance)) != rec.digest {
            return Err(FormatError::Corrupt {
                kind: KIND,
                message: format!("digest mismatch in record {i} ({})", rec.instance.instance_id),
            });
        }
        store.record(rec.instance).map_err(|e| FormatError::Corrupt {
            kind: KIND,
            message: e.to_string(),
        })?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CommandScript {
    pub schema_version: u32,
    pub commands: Vec<ScriptEntry>,
}

impl CommandScript {
    pub fn new(commands: Vec<ScriptEntry>) -> Self {
        CommandScript {
            schema_version: COMMANDS_SCHEMA_VERSION,
            commands,
        }
    }
}

pub fn load_commands(bytes: &[u8]) -> Result<CommandScript, FormatError> {
    check_version(bytes, "commands", COMMANDS_SCHEMA_VERSION)?;
    parse(bytes, "commands")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceMeta {
    pub instance_id: String,
    pub scenario_name: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub rng: String,
    pub status: SessionStatus,
    pub completion_status: Option<CompletionStatus>,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Totals {
    pub steps: u64,
    pub time: u64,
    pub cost: f64,
    pub clock: u64,
}

/// Everything a finished run produced, in canonical form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceExport {
    pub schema_version: u32,
    pub instance: InstanceMeta,
    pub activity_sequence: Vec<String>,
    pub records: Vec<ExecutionRecord>,
    pub final_context: BTreeMap<String, Value>,
    pub totals: Totals,
    pub command_script: Vec<ScriptEntry>,
    pub log: Vec<LogEntry>,
}

impl TraceExport {
    pub fn from_session(s: &Session) -> TraceExport {
        TraceExport {
            schema_version: TRACE_SCHEMA_VERSION,
            instance: InstanceMeta {
                instance_id: s.instance_id().to_owned(),
                scenario_name: s.scenario().name().to_owned(),
                scenario_hash: s.scenario().hash.clone(),
                seed: s.seed(),
                rng: RNG_ALGORITHM.to_owned(),
                status: s.status(),
                completion_status: s.to_historical().map(|h| h.completion_status),
                fault: s.fault().map(ToString::to_string),
            },
            activity_sequence: s.activity_sequence().to_vec(),
            records: s.trace().to_vec(),
            final_context: s.current_snapshot().bindings().clone(),
            totals: Totals {
                steps: s.trace().len() as u64,
                time: s.total_time(),
                cost: s.total_cost(),
                clock: s.clock(),
            },
            command_script: s.command_script().to_vec(),
            log: s.log().to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }
}

pub fn load_trace(bytes: &[u8]) -> Result<TraceExport, FormatError> {
    check_version(bytes, "trace", TRACE_SCHEMA_VERSION)?;
    parse(bytes, "trace")
}

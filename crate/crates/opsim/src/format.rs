//! Versioned input and output documents.
//!
//! Human-edited files (scenario, hardware, pass pipeline, search space,
//! shape sweep) are TOML. Graphs, programs, reports and traces are JSON.
//! Profile databases are CSV with a header line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use opsim_core::engines::{HardwareSpec, ProfileDb, ProfileRecord};
use opsim_core::graph::OperatorGraph;
use opsim_core::passes::{PassPipeline, PassSpec};
use opsim_core::sched::Program;

use crate::{Error, Result};

pub const IR_VERSION: &str = "charon-ir/1";
pub const PASSES_VERSION: &str = "charon-passes/1";
pub const HW_VERSION: &str = "charon-hw/1";
pub const REPORT_VERSION: &str = "charon-report/1";
pub const SPACE_VERSION: &str = "charon-space/1";
pub const SCENARIO_VERSION: &str = "charon-scenario/1";
pub const PROGRAM_VERSION: &str = "charon-program/1";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_version(path: &Path, found: Option<&str>, expected: &str) -> Result<()> {
    match found {
        Some(v) if v == expected => Ok(()),
        Some(v) => Err(Error::parse(path, format!("version `{v}`, expected `{expected}`"))),
        None => Err(Error::parse(path, format!("missing `version = \"{expected}\"`"))),
    }
}

/// Parses a TOML document carrying `version = expected` into `T`.
pub fn load_toml<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = read_text(path)?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let version = table.remove("version");
    check_version(path, version.as_ref().and_then(|v| v.as_str()), expected)?;
    table.try_into().map_err(|e: toml::de::Error| Error::parse(path, e))
}

/// Parses a JSON document carrying `"version": expected` into `T`.
pub fn load_json<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = read_text(path)?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let Some(obj) = value.as_object_mut() else {
        return Err(Error::parse(path, "expected a JSON object"));
    };
    let version = obj.remove("version");
    check_version(path, version.as_ref().and_then(|v| v.as_str()), expected)?;
    serde_json::from_value(value).map_err(|e| Error::parse(path, e))
}

/// A document body with its version tag first.
#[derive(Serialize)]
pub struct Versioned<'a, T: Serialize> {
    pub version: &'a str,
    #[serde(flatten)]
    pub body: &'a T,
}

pub fn to_json<T: Serialize>(version: &str, body: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Versioned { version, body }).map_err(|e| Error::config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn to_toml<T: Serialize>(version: &str, body: &T) -> Result<String> {
    let mut table = toml::Table::try_from(body).map_err(|e| Error::config(e.to_string()))?;
    table.insert("version".into(), toml::Value::String(version.into()));
    toml::to_string(&table).map_err(|e| Error::config(e.to_string()))
}

pub fn load_hw(path: &Path) -> Result<HardwareSpec> {
    let hw: HardwareSpec = load_toml(path, HW_VERSION)?;
    hw.validate().map_err(|e| Error::parse(path, e))?;
    Ok(hw)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PassesFile {
    #[serde(default)]
    pass: Vec<PassSpec>,
}

/// Loads a pass pipeline description; unknown pass names and bad parameters
/// are rejected here rather than at run time.
pub fn load_passes(path: &Path) -> Result<Vec<PassSpec>> {
    let f: PassesFile = load_toml(path, PASSES_VERSION)?;
    PassPipeline::from_specs(&f.pass).map_err(|e| Error::parse(path, e))?;
    Ok(f.pass)
}

pub fn load_ir(path: &Path) -> Result<OperatorGraph> {
    let g: OperatorGraph = load_json(path, IR_VERSION)?;
    g.validate().map_err(|e| Error::parse(path, e))?;
    Ok(g)
}

pub fn ir_to_json(g: &OperatorGraph) -> Result<String> {
    to_json(IR_VERSION, g)
}

pub fn load_program(path: &Path) -> Result<Program> {
    let p: Program = load_json(path, PROGRAM_VERSION)?;
    for g in &p.graphs {
        g.validate().map_err(|e| Error::parse(path, e))?;
    }
    Ok(p)
}

pub fn program_to_json(p: &Program) -> Result<String> {
    to_json(PROGRAM_VERSION, p)
}

pub fn load_profile_db(path: &Path) -> Result<ProfileDb> {
    ProfileDb::from_records(read_csv::<ProfileRecord>(path)?).map_err(|e| Error::parse(path, e))
}

pub fn profile_csv(records: &[ProfileRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::config(e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

/// Reads CSV rows of `T` from a file with a header line.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    rd.deserialize().map(|r| r.map_err(|e| Error::parse(path, e))).collect()
}

/// `p` relative to the directory holding `base`, unless absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

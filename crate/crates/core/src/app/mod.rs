//! Scenario configuration and the experiment runners behind the `edgelam`
//! binary. Runners are pure: they return named artifacts, and
//! [`write_artifacts`] persists them atomically.

pub mod config;
pub mod run;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

pub use config::{DeployMethod, MicroConfig, MigrateSection, OrchestrateSection, Scenario, TparallelConfig};
pub use run::{run_command, run_sweep, verify, Command, Issue, VerifyReport};

use crate::chanpred::ChanError;
use crate::fedft::FedError;
use crate::micro::MicroError;
use crate::netsim::NetError;
use crate::tparallel::TpError;

/// Environment variable consulted for the output directory.
pub const OUT_ENV: &str = "EDGELAM_OUT";

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config: {message}")]
    ConfigParse {
        message: String,
        key: Option<String>,
        suggestion: Option<String>,
    },
    #[error("scenario has no `[{0}]` section")]
    MissingSection(&'static str),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Tp(#[from] TpError),
    #[error(transparent)]
    Micro(#[from] MicroError),
    #[error(transparent)]
    Chan(#[from] ChanError),
}

/// `SomeVariant(..)` debug output to `some-variant`.
fn variant_kebab(debug: &str) -> String {
    let name: String = debug.chars().take_while(|c| c.is_alphanumeric()).collect();
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_uppercase() {
            if i > 0 {
                out.push('-');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

impl AppError {
    /// Stable kebab-case name of the innermost error variant.
    pub fn kind(&self) -> String {
        match self {
            AppError::ConfigParse { key: Some(_), suggestion: Some(_), .. } => "unknown-key".into(),
            AppError::ConfigParse { .. } => "config-parse".into(),
            AppError::MissingSection(_) => "missing-section".into(),
            AppError::Io { .. } => "io".into(),
            AppError::Net(e) => variant_kebab(&format!("{e:?}")),
            AppError::Fed(FedError::Net(e)) | AppError::Tp(TpError::Net(e)) | AppError::Micro(MicroError::Net(e)) => {
                variant_kebab(&format!("{e:?}"))
            }
            AppError::Fed(e) => variant_kebab(&format!("{e:?}")),
            AppError::Tp(e) => variant_kebab(&format!("{e:?}")),
            AppError::Micro(e) => variant_kebab(&format!("{e:?}")),
            AppError::Chan(e) => variant_kebab(&format!("{e:?}")),
        }
    }

    /// Machine-readable record printed on stderr by the binary.
    pub fn record(&self) -> serde_json::Value {
        let mut v = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        if let AppError::ConfigParse { key, suggestion, .. } = self {
            if let Some(k) = key {
                v["key"] = k.clone().into();
            }
            if let Some(s) = suggestion {
                v["suggestion"] = s.clone().into();
            }
        }
        v
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::ConfigParse { .. } | AppError::MissingSection(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    pub name: String,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: &str, bytes: Vec<u8>) -> Self {
        Self { name: name.to_string(), bytes }
    }
}

/// `--out`, then the environment, then the scenario, then `out`.
pub fn resolve_out_dir(cli: Option<&Path>, env: Option<&str>, scenario: &Scenario) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| scenario.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AppError {
    AppError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Writes each artifact through a temporary file in `dir` and renames it
/// into place.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>, AppError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let path = dir.join(&a.name);
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
        tmp.write_all(&a.bytes).map_err(|e| io_err(&path, e))?;
        tmp.persist(&path).map_err(|e| io_err(&path, e.error))?;
        written.push(path);
    }
    Ok(written)
}

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use interlayer::error::Error;
use interlayer::json;
use interlayer::value::FORMAT_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    /// An internal identity check failed; outputs were still written.
    #[error("identity check failed: {0}")]
    Identity(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Identity(_) => "identity-check",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "input-not-found" => 2,
            "identity-check" => 3,
            _ => 1,
        }
    }

    /// Machine-readable error report for stderr.
    pub fn document(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

#[derive(Serialize)]
struct InputRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    tool_version: &'static str,
    command: &'a str,
    config_digest: String,
    config: &'a Value,
    inputs: &'a [InputRecord],
    outputs: Vec<&'a str>,
}

pub const MANIFEST: &str = "manifest.json";

/// Output directory of one command invocation; records inputs and outputs
/// for the manifest.
pub struct Run {
    dir: PathBuf,
    command: String,
    config: Value,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

impl Run {
    pub fn start(dir: &Path, command: &str, config: &Value) -> Result<Self, Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Records an input file by content digest.
    pub fn input(&mut self, path: &Path) -> Result<(), Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(InputRecord {
            path: path.to_path_buf(),
            sha256: json::digest_bytes(&bytes),
        });
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), Error> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), Error> {
        self.text(name, &json::to_string(value)?)
    }

    pub fn finish(mut self) -> Result<(), Error> {
        self.outputs.sort();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            config_digest: json::digest(&self.config)?,
            config: &self.config,
            inputs: &self.inputs,
            outputs: self.outputs.iter().map(String::as_str).collect(),
        };
        let path = self.dir.join(MANIFEST);
        json::write(&path, &manifest)
    }
}

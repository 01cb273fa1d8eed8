//! Output directory writer. Every CSV starts with a `#` line holding the
//! resolved config as JSON; every JSON summary carries it under `config`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub struct OutputDir {
    dir: PathBuf,
    header: String,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let json = serde_json::to_string(cfg).expect("config serializes");
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            header: format!("# config={json}\n"),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(true)
            .from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let body = w
            .into_inner()
            .map_err(|e| CliError::Config(format!("csv buffer: {e}")))?;
        let mut bytes = self.header.clone().into_bytes();
        bytes.extend_from_slice(&body);
        self.write_bytes(name, &bytes)
    }

    /// Writes `{"config": ..., <fields of body>}`.
    pub fn write_summary<T: Serialize>(
        &mut self,
        name: &str,
        cfg: &ExperimentConfig,
        body: &T,
    ) -> Result<(), CliError> {
        let mut value = serde_json::json!({ "config": cfg });
        match serde_json::to_value(body).expect("summary serializes") {
            serde_json::Value::Object(fields) => {
                for (k, v) in fields {
                    value[k] = v;
                }
            }
            other => value["result"] = other,
        }
        let text = serde_json::to_string_pretty(&value).expect("summary serializes");
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }
}

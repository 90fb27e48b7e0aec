use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::workspace::{sha256_file, Workspace};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Version string recorded in the ledger.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the workspace root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LedgerEvent {
    pub stage: String,
    pub seed: u64,
    pub wall_seconds: f64,
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub curves: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, serde_json::Value>,
}

/// Append-only record of the stages run in a workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub code_version: String,
    pub events: Vec<LedgerEvent>,
}

impl RunLedger {
    pub fn load_or_new(path: &Path) -> Result<Self> {
        if path.exists() {
            Ok(serde_json::from_slice(&std::fs::read(path)?)?)
        } else {
            Ok(Self {
                code_version: CODE_VERSION.into(),
                events: Vec::new(),
            })
        }
    }

    /// Appends one event and rewrites the file. Earlier events are kept as
    /// they were.
    pub fn append(path: &Path, event: LedgerEvent) -> Result<()> {
        let mut ledger = Self::load_or_new(path)?;
        ledger.events.push(event);
        std::fs::write(path, serde_json::to_vec_pretty(&ledger)?)?;
        Ok(())
    }

    /// The most recent event of a stage.
    pub fn last(&self, stage: &str) -> Option<&LedgerEvent> {
        self.events.iter().rev().find(|e| e.stage == stage)
    }

    /// Checks that every artifact listed in the latest event of each stage
    /// still hashes to the recorded value.
    pub fn verify(&self, ws: &Workspace) -> Result<()> {
        let mut stages: Vec<&str> = self.events.iter().map(|e| e.stage.as_str()).collect();
        stages.dedup();
        for stage in stages {
            for a in &self
                .last(stage)
                .map(|e| e.artifacts.clone())
                .unwrap_or_default()
            {
                let actual = sha256_file(&ws.root.join(&a.path))?;
                if actual != a.sha256 {
                    return Err(Error::InvalidArgument(format!(
                        "{} changed since {stage}",
                        a.path
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Collects what one stage produced and appends it to the ledger when done.
pub struct StageRecorder<'a> {
    ws: &'a Workspace,
    start: Instant,
    event: LedgerEvent,
}

impl<'a> StageRecorder<'a> {
    pub fn start(ws: &'a Workspace, stage: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let mut event = LedgerEvent {
            stage: stage.into(),
            seed: cfg.seed,
            ..Default::default()
        };
        event
            .values
            .insert("config".into(), serde_json::to_value(cfg)?);
        Ok(Self {
            ws,
            start: Instant::now(),
            event,
        })
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.event.artifacts.push(Artifact {
            path: self.ws.relative(path),
            sha256,
        });
        Ok(())
    }

    pub fn curve(&mut self, name: &str, values: Vec<f64>) {
        self.event.curves.insert(name.into(), values);
    }

    pub fn value(&mut self, name: &str, value: impl Serialize) -> Result<()> {
        self.event
            .values
            .insert(name.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn finish(mut self) -> Result<LedgerEvent> {
        self.event.wall_seconds = self.start.elapsed().as_secs_f64();
        RunLedger::append(&self.ws.ledger(), self.event.clone())?;
        Ok(self.event)
    }
}

//! Content-addressed stage directories.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::PipelineError;

pub type StageResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

/// Marker file written last; a stage directory without it is incomplete.
const COMPLETE: &str = ".complete";

/// Incremental hash over stage name, parameters, and upstream keys.
pub struct KeyBuilder(Sha256);

impl KeyBuilder {
    pub fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"stage\0");
        h.update(stage.as_bytes());
        Self(h)
    }

    pub fn params<P: Serialize>(mut self, p: &P) -> Self {
        let json = serde_json::to_vec(p).expect("stage parameters serialize");
        self.0.update(b"\0params\0");
        self.0.update(&json);
        self
    }

    pub fn upstream(mut self, key: &str) -> Self {
        self.0.update(b"\0up\0");
        self.0.update(key.as_bytes());
        self
    }

    pub fn bytes(mut self, tag: &str, bytes: &[u8]) -> Self {
        self.0.update(b"\0");
        self.0.update(tag.as_bytes());
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn file(self, tag: &str, path: &Path) -> std::io::Result<Self> {
        Ok(self.bytes(tag, &std::fs::read(path)?))
    }

    pub fn finish(self) -> String {
        hex::encode(&self.0.finalize()[..8])
    }
}

/// What happened to a stage in this run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub name: String,
    pub key: String,
    pub dir: PathBuf,
    pub status: StageStatus,
}

/// Run `body` in `stages/<name>-<key>` unless that directory is already
/// complete. Work happens in a `.partial` sibling that is renamed on
/// success and left in place on failure.
pub fn run_stage(
    workdir: &Path,
    name: &str,
    key: String,
    body: impl FnOnce(&Path) -> StageResult,
) -> Result<StageOutput, PipelineError> {
    let dir = workdir.join("stages").join(format!("{name}-{key}"));
    if dir.join(COMPLETE).is_file() {
        log::info!("stage {name}: cached ({})", dir.display());
        return Ok(StageOutput { name: name.into(), key, dir, status: StageStatus::Cached });
    }
    let partial = dir.with_extension("partial");
    let fail = |msg: String| PipelineError::Stage { stage: name.into(), artifact: partial.clone(), msg };
    if partial.exists() {
        std::fs::remove_dir_all(&partial).map_err(|e| fail(e.to_string()))?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| fail(e.to_string()))?;
    }
    std::fs::create_dir_all(&partial).map_err(|e| fail(e.to_string()))?;
    log::info!("stage {name}: running");
    body(&partial).map_err(|e| fail(e.to_string()))?;
    std::fs::write(partial.join(COMPLETE), &key).map_err(|e| fail(e.to_string()))?;
    std::fs::rename(&partial, &dir).map_err(|e| fail(e.to_string()))?;
    Ok(StageOutput { name: name.into(), key, dir, status: StageStatus::Ran })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_depend_on_everything() {
        let a = KeyBuilder::new("x").params(&1).upstream("u").finish();
        assert_eq!(a, KeyBuilder::new("x").params(&1).upstream("u").finish());
        assert_ne!(a, KeyBuilder::new("y").params(&1).upstream("u").finish());
        assert_ne!(a, KeyBuilder::new("x").params(&2).upstream("u").finish());
        assert_ne!(a, KeyBuilder::new("x").params(&1).upstream("v").finish());
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn failure_keeps_partial_and_success_caches() {
        let tmp = tempfile::tempdir().unwrap();
        let err = run_stage(tmp.path(), "s", "k1".into(), |d| {
            std::fs::write(d.join("half"), "x")?;
            Err("boom".into())
        })
        .unwrap_err();
        match err {
            PipelineError::Stage { stage, artifact, msg } => {
                assert_eq!(stage, "s");
                assert!(artifact.join("half").is_file());
                assert!(msg.contains("boom"));
            }
            e => panic!("{e}"),
        }
        let mut calls = 0;
        for _ in 0..2 {
            let out = run_stage(tmp.path(), "s", "k1".into(), |d| {
                calls += 1;
                std::fs::write(d.join("out"), "y")?;
                Ok(())
            })
            .unwrap();
            assert!(out.dir.join("out").is_file());
        }
        assert_eq!(calls, 1);
    }
}

//! Stage graph, on-disk layout and run manifests.
//!
//! Every stage writes into `<out_dir>/<stage>/` and finishes by writing
//! `manifest.json`; a stage directory without a manifest counts as missing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Codebook,
    Cooccur,
    Embed,
    TrainCaptionerBimodal,
    TrainProposals,
    Propose,
    TrainCaptionerVanilla,
    Caption,
    Eval,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Codebook,
        Stage::Cooccur,
        Stage::Embed,
        Stage::TrainCaptionerBimodal,
        Stage::TrainProposals,
        Stage::Propose,
        Stage::TrainCaptionerVanilla,
        Stage::Caption,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Codebook => "codebook",
            Stage::Cooccur => "cooccur",
            Stage::Embed => "embed",
            Stage::TrainCaptionerBimodal => "train-captioner-bimodal",
            Stage::TrainProposals => "train-proposals",
            Stage::Propose => "propose",
            Stage::TrainCaptionerVanilla => "train-captioner-vanilla",
            Stage::Caption => "caption",
            Stage::Eval => "eval",
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn inputs(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Synth => &[],
            Codebook => &[Synth],
            Cooccur => &[Synth, Codebook],
            Embed => &[Cooccur],
            TrainCaptionerBimodal | TrainCaptionerVanilla => &[Synth, Codebook, Embed],
            TrainProposals => &[Synth, Codebook, Embed, TrainCaptionerBimodal],
            Propose => &[
                Synth,
                Codebook,
                Embed,
                TrainCaptionerBimodal,
                TrainProposals,
            ],
            Caption => &[Synth, Codebook, Embed, Propose, TrainCaptionerVanilla],
            Eval => &[Synth, Propose, Caption],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

/// Directory layout of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage(&self, s: Stage) -> PathBuf {
        self.root.join(s.name())
    }

    /// Path of an artifact produced by `s`; errors when the stage has not completed.
    pub fn require(&self, s: Stage, rel: &str) -> Result<PathBuf, PipelineError> {
        let dir = self.stage(s);
        let path = dir.join(rel);
        if !dir.join(MANIFEST_FILE).is_file() || !path.exists() {
            return Err(PipelineError::MissingArtifact {
                stage: s.name(),
                path,
            });
        }
        Ok(path)
    }

    /// Empties the stage directory and returns it.
    pub fn fresh(&self, s: Stage) -> Result<PathBuf, PipelineError> {
        let dir = self.stage(s);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        Ok(dir)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .expect("walk stays under root")
                    .to_path_buf(),
            );
        }
    }
    Ok(())
}

/// Relative path to sha256 hex digest for every file under `dir`.
pub fn hash_tree(dir: &Path, skip: &[&str]) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut out = BTreeMap::new();
    for rel in files {
        let key = rel.to_string_lossy().replace('\\', "/");
        if skip.contains(&key.as_str()) {
            continue;
        }
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        out.insert(key, hex(&Sha256::digest(&bytes)));
    }
    Ok(out)
}

/// One digest for a whole stage directory, manifest included.
pub fn hash_stage(dir: &Path) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    for (name, digest) in hash_tree(dir, &[])? {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update([0]);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    /// Digest of each upstream stage directory.
    pub inputs: BTreeMap<String, String>,
    /// Digest of each file this stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub config: PipelineConfig,
}

pub fn write_manifest(
    run: &RunDir,
    s: Stage,
    cfg: &PipelineConfig,
) -> Result<Manifest, PipelineError> {
    let mut inputs = BTreeMap::new();
    for &i in s.inputs() {
        inputs.insert(i.name().to_string(), hash_stage(&run.stage(i))?);
    }
    let dir = run.stage(s);
    let m = Manifest {
        stage: s.name().to_string(),
        seed: cfg.seed,
        inputs,
        outputs: hash_tree(&dir, &[MANIFEST_FILE])?,
        config: cfg.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

pub fn read_manifest(run: &RunDir, s: Stage) -> Result<Manifest, PipelineError> {
    read_json(&run.require(s, MANIFEST_FILE)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::json(path, e))
}

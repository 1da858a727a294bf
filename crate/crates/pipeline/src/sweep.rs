//! Grid over codebook size and co-occurrence window.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::{write_json, RunDir, Stage};
use crate::config::PipelineConfig;
use crate::error::PipelineError;
use crate::stages::{load_report, run_stage};

pub const SWEEP_DIR: &str = "sweep";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub vocab_size: usize,
    pub window: usize,
    pub proposal_f1: f64,
    pub bleu_gt: Vec<f64>,
    pub bleu_learned: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>11} {:>11} {:>15}",
            "|C|", "S", "proposal F1", "BLEU@4 (gt)", "BLEU@4 (learned)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} {:>6} {:>11.4} {:>11.4} {:>15.4}",
                r.vocab_size,
                r.window,
                r.proposal_f1,
                r.bleu_gt.last().copied().unwrap_or(0.0),
                r.bleu_learned.last().copied().unwrap_or(0.0)
            );
        }
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let key = format!("k{}_s{}", r.vocab_size, r.window);
            let _ = writeln!(s, "{key}.proposal_f1={:.6}", r.proposal_f1);
            for (n, b) in r.bleu_gt.iter().enumerate() {
                let _ = writeln!(s, "{key}.captions_gt.bleu{}={b:.6}", n + 1);
            }
            for (n, b) in r.bleu_learned.iter().enumerate() {
                let _ = writeln!(s, "{key}.captions_learned.bleu{}={b:.6}", n + 1);
            }
        }
        s
    }
}

fn copy_tree(from: &Path, to: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(to).map_err(|e| PipelineError::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| PipelineError::io(from, e))? {
        let path = entry.map_err(|e| PipelineError::io(from, e))?.path();
        let dest = to.join(path.file_name().expect("directory entries have names"));
        if path.is_dir() {
            copy_tree(&path, &dest)?;
        } else {
            fs::copy(&path, &dest).map_err(|e| PipelineError::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn point_dir(base: &Path, vocab_size: usize, window: usize) -> PathBuf {
    base.join(SWEEP_DIR)
        .join(format!("k{vocab_size}_s{window}"))
}

/// Reruns every stage after `synth` for each `(|C|, S)` pair, reusing the
/// base run's dataset. Writes `table.txt`, `table.kv` and `table.json` under
/// `<out_dir>/sweep/`.
pub fn sweep(
    cfg: &PipelineConfig,
    vocab_sizes: &[usize],
    windows: &[usize],
) -> Result<SweepTable, PipelineError> {
    if vocab_sizes.is_empty() || windows.is_empty() {
        return Err(PipelineError::EmptyGrid);
    }
    let base = RunDir::new(&cfg.paths.out_dir);
    let synth_dir = base.require(Stage::Synth, "")?;
    let mut rows = Vec::new();
    for &k in vocab_sizes {
        for &w in windows {
            let mut point = cfg.clone();
            point.codebook.k = k;
            point.cooccur.window = w;
            point.paths.out_dir = point_dir(&cfg.paths.out_dir, k, w);
            let run = RunDir::new(&point.paths.out_dir);
            let dest = run.stage(Stage::Synth);
            if dest.exists() {
                fs::remove_dir_all(&dest).map_err(|e| PipelineError::io(&dest, e))?;
            }
            copy_tree(&synth_dir, &dest)?;
            for s in &Stage::ALL[1..] {
                run_stage(*s, &point)?;
            }
            let report = load_report(&run)?;
            rows.push(SweepRow {
                vocab_size: k,
                window: w,
                proposal_f1: report.proposals.f1,
                bleu_gt: report.bleu_gt,
                bleu_learned: report.bleu_learned,
            });
        }
    }
    let table = SweepTable { rows };
    let dir = cfg.paths.out_dir.join(SWEEP_DIR);
    for (name, text) in [("table.txt", table.to_text()), ("table.kv", table.to_kv())] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))?;
    }
    write_json(&dir.join("table.json"), &table)?;
    Ok(table)
}

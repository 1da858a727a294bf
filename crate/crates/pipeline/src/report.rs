use std::collections::BTreeMap;
use std::fmt::Write;

use dvc_core::eval::{bleu, proposal_prf, tiou, Segment};
use dvc_nn::vocab::tokenize;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::Dataset;
use crate::error::PipelineError;
use crate::stages::{CaptionSet, ProposalSet};

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_KV: &str = "report.kv";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub top_n: usize,
    pub thresholds: Vec<f64>,
    /// Averaged over `thresholds`.
    pub proposals: PrfScores,
    pub proposals_at: Vec<PrfScores>,
    /// BLEU@1..n of captions on ground-truth segments.
    pub bleu_gt: Vec<f64>,
    /// BLEU@1..n of captions on learned proposals, averaged over thresholds.
    pub bleu_learned: Vec<f64>,
}

/// Scores the held-out videos (all videos when nothing was held out).
///
/// Captions of learned proposals are paired with every ground-truth sentence
/// whose segment overlaps the proposal with tIoU at least the threshold;
/// a threshold without pairs scores zero.
pub fn evaluate(
    ds: &Dataset,
    props: &ProposalSet,
    gt_captions: &CaptionSet,
    learned_captions: &CaptionSet,
    cfg: &EvalConfig,
) -> Result<EvalReport, PipelineError> {
    let ids = ds.split.eval_ids();
    let gt = ds.subset(ids);
    let ranked: BTreeMap<String, Vec<Segment>> = ids
        .iter()
        .map(|id| {
            let segs = props
                .proposals
                .get(id)
                .map(|ps| {
                    ps.iter()
                        .map(|p| Segment::new(p.start_s(), p.end_s()))
                        .collect()
                })
                .unwrap_or_default();
            (id.clone(), segs)
        })
        .collect();
    let proposals = score(proposal_prf(&ranked, &gt, &cfg.thresholds)?);
    let proposals_at = cfg
        .thresholds
        .iter()
        .map(|&t| proposal_prf(&ranked, &gt, &[t]).map(score))
        .collect::<Result<Vec<_>, _>>()?;

    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for id in ids {
        let ann = &ds.annotations.videos[id];
        for (seg, reference) in gt_captions
            .get(id)
            .into_iter()
            .flatten()
            .zip(&ann.sentences)
        {
            cands.push(tokenize(&seg.sentence));
            refs.push(tokenize(reference));
        }
    }
    let bleu_gt = corpus_bleu(&cands, &refs, cfg.max_n)?;

    let mut bleu_learned = vec![0.0; cfg.max_n];
    for &t in &cfg.thresholds {
        let (mut cands, mut refs) = (Vec::new(), Vec::new());
        for id in ids {
            let ann = &ds.annotations.videos[id];
            for seg in learned_captions.get(id).into_iter().flatten() {
                let p = Segment::new(seg.start_s, seg.end_s);
                for (ts, reference) in ann.timestamps.iter().zip(&ann.sentences) {
                    if tiou(p, Segment::new(ts[0], ts[1])) >= t {
                        cands.push(tokenize(&seg.sentence));
                        refs.push(tokenize(reference));
                    }
                }
            }
        }
        for (acc, b) in bleu_learned
            .iter_mut()
            .zip(corpus_bleu(&cands, &refs, cfg.max_n)?)
        {
            *acc += b / cfg.thresholds.len() as f64;
        }
    }

    Ok(EvalReport {
        videos: ids.len(),
        top_n: props.top_n,
        thresholds: cfg.thresholds.clone(),
        proposals,
        proposals_at,
        bleu_gt,
        bleu_learned,
    })
}

fn score(p: dvc_core::Prf) -> PrfScores {
    PrfScores {
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
    }
}

fn corpus_bleu(
    cands: &[Vec<String>],
    refs: &[Vec<String>],
    max_n: usize,
) -> Result<Vec<f64>, PipelineError> {
    if cands.is_empty() {
        return Ok(vec![0.0; max_n]);
    }
    Ok(bleu(cands, refs, max_n)?)
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "videos evaluated: {}", self.videos);
        let _ = writeln!(s, "proposals per video: {}", self.top_n);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>9} {:>9} {:>9}",
            "tIoU", "precision", "recall", "F1"
        );
        for (t, p) in self.thresholds.iter().zip(&self.proposals_at) {
            let _ = writeln!(
                s,
                "{:<10.2} {:>9.4} {:>9.4} {:>9.4}",
                t, p.precision, p.recall, p.f1
            );
        }
        let p = &self.proposals;
        let _ = writeln!(
            s,
            "{:<10} {:>9.4} {:>9.4} {:>9.4}",
            "mean", p.precision, p.recall, p.f1
        );
        let _ = writeln!(s);
        let header: String = (1..=self.bleu_gt.len())
            .map(|n| format!(" {:>8}", format!("BLEU@{n}")))
            .collect();
        let _ = writeln!(s, "{:<18}{header}", "captions");
        for (name, row) in [
            ("gt segments", &self.bleu_gt),
            ("learned proposals", &self.bleu_learned),
        ] {
            let cells: String = row.iter().map(|b| format!(" {b:>8.4}")).collect();
            let _ = writeln!(s, "{name:<18}{cells}");
        }
        s
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "videos={}", self.videos);
        let _ = writeln!(s, "top_n={}", self.top_n);
        let p = &self.proposals;
        let _ = writeln!(s, "proposals.precision={:.6}", p.precision);
        let _ = writeln!(s, "proposals.recall={:.6}", p.recall);
        let _ = writeln!(s, "proposals.f1={:.6}", p.f1);
        for (t, p) in self.thresholds.iter().zip(&self.proposals_at) {
            let _ = writeln!(s, "proposals.f1@{t}={:.6}", p.f1);
        }
        for (n, b) in self.bleu_gt.iter().enumerate() {
            let _ = writeln!(s, "captions_gt.bleu{}={b:.6}", n + 1);
        }
        for (n, b) in self.bleu_learned.iter().enumerate() {
            let _ = writeln!(s, "captions_learned.bleu{}={b:.6}", n + 1);
        }
        s
    }
}

/// Parses `key=value` lines, ignoring blanks.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        EvalReport {
            videos: 2,
            top_n: 10,
            thresholds: vec![0.5],
            proposals: PrfScores {
                precision: 0.5,
                recall: 1.0,
                f1: 2.0 / 3.0,
            },
            proposals_at: vec![PrfScores {
                precision: 0.5,
                recall: 1.0,
                f1: 2.0 / 3.0,
            }],
            bleu_gt: vec![1.0, 0.5],
            bleu_learned: vec![0.25, 0.0],
        }
    }

    #[test]
    fn kv_lines_parse_back() {
        let kv = parse_kv(&sample().to_kv());
        assert_eq!(kv["proposals.f1"], "0.666667");
        assert_eq!(kv["proposals.f1@0.5"], "0.666667");
        assert_eq!(kv["captions_gt.bleu2"], "0.500000");
        assert_eq!(kv["captions_learned.bleu1"], "0.250000");
        assert_eq!(kv["top_n"], "10");
    }

    #[test]
    fn text_table_has_every_row() {
        let t = sample().to_text();
        assert!(t.contains("BLEU@2"));
        assert!(t.contains("learned proposals"));
        assert!(t.lines().any(|l| l.starts_with("mean")));
    }
}

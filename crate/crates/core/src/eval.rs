//! Temporal IoU, proposal precision/recall/F1 and corpus BLEU.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::dataset::AnnotationSet;

pub const DEFAULT_TIOU_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth has no events")]
    EmptyGroundTruth,
    #[error("tIoU threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("no thresholds given")]
    NoThresholds,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("max_n must be >= 1")]
    ZeroOrder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
}

impl Segment {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    pub fn length(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Intersection over union of two intervals.
pub fn tiou(a: Segment, b: Segment) -> f64 {
    let inter = (a.end_s.min(b.end_s) - a.start_s.max(b.start_s)).max(0.0);
    let union = a.end_s.max(b.end_s) - a.start_s.min(b.start_s);
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// True positives of one video at one threshold. Proposals are visited in
/// rank order; each takes the unmatched ground-truth event with the highest
/// tIoU (lowest index on ties) if that tIoU reaches the threshold.
pub fn greedy_matches(proposals: &[Segment], gt: &[Segment], threshold: f64) -> usize {
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for p in proposals {
        let mut best: Option<(usize, f64)> = None;
        for (g, seg) in gt.iter().enumerate() {
            if used[g] {
                continue;
            }
            let iou = tiou(*p, *seg);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
    }
    tp
}

/// Precision, recall and F1 per threshold, each averaged over the videos of
/// `gt`, then averaged over thresholds. `proposals` must be ranked by
/// confidence; videos without proposals score zero.
pub fn proposal_prf(
    proposals: &BTreeMap<String, Vec<Segment>>,
    gt: &AnnotationSet,
    thresholds: &[f64],
) -> Result<Prf, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::NoThresholds);
    }
    if let Some(&t) = thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(EvalError::BadThreshold(t));
    }
    let videos: Vec<(&String, Vec<Segment>)> = gt
        .videos
        .iter()
        .filter(|(_, v)| !v.timestamps.is_empty())
        .map(|(id, v)| {
            (
                id,
                v.timestamps
                    .iter()
                    .map(|t| Segment::new(t[0], t[1]))
                    .collect(),
            )
        })
        .collect();
    if videos.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let empty = Vec::new();
    let mut total = Prf::default();
    for &t in thresholds {
        let (mut p_sum, mut r_sum) = (0.0, 0.0);
        for (id, segs) in &videos {
            let props = proposals.get(*id).unwrap_or(&empty);
            let tp = greedy_matches(props, segs, t) as f64;
            if !props.is_empty() {
                p_sum += tp / props.len() as f64;
            }
            r_sum += tp / segs.len() as f64;
        }
        let n = videos.len() as f64;
        let (p, r) = (p_sum / n, r_sum / n);
        total.precision += p;
        total.recall += r;
        total.f1 += harmonic(p, r);
    }
    let m = thresholds.len() as f64;
    Ok(Prf {
        precision: total.precision / m,
        recall: total.recall / m,
        f1: total.f1 / m,
    })
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(|t| t.as_ref()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total candidate n-grams for one sentence pair.
pub fn clipped_ngram_stats<S: AsRef<str>>(
    candidate: &[S],
    reference: &[S],
    n: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Corpus BLEU@1..=max_n with one reference per candidate and no smoothing.
pub fn bleu<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
    max_n: usize,
) -> Result<Vec<f64>, EvalError> {
    if max_n == 0 {
        return Err(EvalError::ZeroOrder);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let (m, t) = clipped_ngram_stats(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if c_len == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        scores.push(if zero {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    Ok(scores)
}

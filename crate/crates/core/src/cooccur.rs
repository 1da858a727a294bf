//! Sparse co-occurrence counts over codebook label sequences.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum CooccurError {
    #[error("label {label} out of range for vocabulary size {k} (video {video})")]
    LabelOutOfRange {
        video: String,
        label: usize,
        k: usize,
    },
    #[error("index ({i}, {j}) out of range for vocabulary size {k}")]
    IndexOutOfRange { i: usize, j: usize, k: usize },
    #[error("window must be >= 1")]
    ZeroWindow,
    #[error("malformed co-occurrence file: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Codebook labels of one video, in clip order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    pub video_id: String,
    pub labels: Vec<usize>,
}

/// One nonzero cell of a co-occurrence matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CooccurrenceEntry {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceMatrix {
    pub k: usize,
    pub window: usize,
    counts: BTreeMap<(usize, usize), u64>,
}

impl CooccurrenceMatrix {
    pub fn empty(k: usize, window: usize) -> Self {
        Self {
            k,
            window,
            counts: BTreeMap::new(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts.get(&(i, j)).copied().unwrap_or(0)
    }

    pub fn nnz(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// `Z_i`, the number of context occurrences around label `i`.
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts
            .range((i, 0)..=(i, usize::MAX))
            .map(|(_, c)| c)
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), u64)> + '_ {
        self.counts.iter().map(|(&ij, &c)| (ij, c))
    }

    /// Nonzero cells in row-major order.
    pub fn entries(&self) -> Vec<CooccurrenceEntry> {
        self.iter()
            .map(|((i, j), c)| CooccurrenceEntry {
                i,
                j,
                value: c as f64,
            })
            .collect()
    }

    fn merge(mut self, other: Self) -> Self {
        for (ij, c) in other.counts {
            *self.counts.entry(ij).or_insert(0) += c;
        }
        self
    }

    /// `P(j | i) = Z_ij / Z_i`, or 0 when row `i` is empty.
    pub fn probability(&self, i: usize, j: usize) -> Result<f64, CooccurError> {
        if i >= self.k || j >= self.k {
            return Err(CooccurError::IndexOutOfRange { i, j, k: self.k });
        }
        let zi = self.row_sum(i);
        if zi == 0 {
            return Ok(0.0);
        }
        Ok(self.get(i, j) as f64 / zi as f64)
    }

    /// Text form: header `k S`, then `i j count` per nonzero cell.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.k, self.window);
        for ((i, j), c) in self.iter() {
            out.push_str(&format!("{i} {j} {c}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CooccurError> {
        let bad = |m: String| CooccurError::Malformed(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let nums = |l: &str| -> Result<Vec<u64>, CooccurError> {
            l.split_whitespace()
                .map(|t| t.parse::<u64>().map_err(|e| bad(format!("{l:?}: {e}"))))
                .collect()
        };
        let h = nums(header)?;
        if h.len() != 2 {
            return Err(bad(format!("header {header:?} must be `k S`")));
        }
        let mut m = Self::empty(h[0] as usize, h[1] as usize);
        for line in lines {
            let v = nums(line)?;
            if v.len() != 3 {
                return Err(bad(format!("line {line:?} must be `i j count`")));
            }
            let (i, j) = (v[0] as usize, v[1] as usize);
            if i >= m.k || j >= m.k {
                return Err(CooccurError::IndexOutOfRange { i, j, k: m.k });
            }
            if v[2] > 0 {
                m.counts.insert((i, j), v[2]);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), CooccurError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CooccurError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn count_one(seq: &LabelSequence, k: usize, window: usize) -> CooccurrenceMatrix {
    let mut m = CooccurrenceMatrix::empty(k, window);
    let labels = &seq.labels;
    for p in 0..labels.len() {
        let end = (p + window).min(labels.len() - 1);
        for q in p + 1..=end {
            *m.counts.entry((labels[p], labels[q])).or_insert(0) += 1;
            *m.counts.entry((labels[q], labels[p])).or_insert(0) += 1;
        }
    }
    m
}

/// Counts every ordered position pair `(p, q)` of the same video with
/// `1 <= |p - q| <= window`.
pub fn count_cooccurrences(
    corpus: &[LabelSequence],
    k: usize,
    window: usize,
) -> Result<CooccurrenceMatrix, CooccurError> {
    if window == 0 {
        return Err(CooccurError::ZeroWindow);
    }
    for seq in corpus {
        if let Some(&label) = seq.labels.iter().find(|&&l| l >= k) {
            return Err(CooccurError::LabelOutOfRange {
                video: seq.video_id.clone(),
                label,
                k,
            });
        }
    }
    Ok(corpus
        .par_iter()
        .filter(|s| !s.labels.is_empty())
        .map(|s| count_one(s, k, window))
        .reduce(
            || CooccurrenceMatrix::empty(k, window),
            CooccurrenceMatrix::merge,
        ))
}

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use dvc_core::codebook::Codebook;
use dvc_core::dataset::{load_annotations, load_feature_dir, save_annotations, save_features};
use dvc_core::semvec::{build_sequence_features, semantic_sequence, EmbeddingParams};
use dvc_core::{AnnotationSet, FeatureSequence};
use dvc_nn::{CaptionSample, ModelInput, Vocabulary};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_json, write_json, RunDir, Stage};
use crate::error::PipelineError;

pub const FEATURES_DIR: &str = "features";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SPLIT_FILE: &str = "split.json";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub valid: Vec<String>,
}

impl Split {
    /// Shuffles the sorted ids with `seed` and holds out
    /// `round(valid_fraction · n)` of them, keeping at least one for training.
    pub fn new(ids: &[String], valid_fraction: f64, seed: u64) -> Self {
        let mut ids = ids.to_vec();
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid =
            ((valid_fraction * ids.len() as f64).round() as usize).min(ids.len().saturating_sub(1));
        let mut valid = ids.split_off(ids.len() - n_valid);
        ids.sort();
        valid.sort();
        Self { train: ids, valid }
    }

    /// Held-out ids, or the training ids when nothing was held out.
    pub fn eval_ids(&self) -> &[String] {
        if self.valid.is_empty() {
            &self.train
        } else {
            &self.valid
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub clip_duration_s: f64,
    pub feature_dim: usize,
    pub num_videos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: BTreeMap<String, FeatureSequence>,
    pub annotations: AnnotationSet,
    pub split: Split,
    pub info: DatasetInfo,
}

impl Dataset {
    pub fn new(
        seqs: Vec<FeatureSequence>,
        annotations: AnnotationSet,
        split: Split,
    ) -> Result<Self, PipelineError> {
        annotations.validate()?;
        let first = seqs
            .first()
            .ok_or_else(|| PipelineError::Config("dataset has no videos".into()))?;
        let info = DatasetInfo {
            clip_duration_s: first.clip_duration_s,
            feature_dim: first.dim(),
            num_videos: seqs.len(),
        };
        let mut videos = BTreeMap::new();
        for seq in seqs {
            if seq.dim() != info.feature_dim {
                return Err(PipelineError::Config(format!(
                    "{} has {} feature columns, expected {}",
                    seq.video_id,
                    seq.dim(),
                    info.feature_dim
                )));
            }
            if annotations.get(&seq.video_id).is_none() {
                return Err(PipelineError::Config(format!(
                    "{} has no annotation",
                    seq.video_id
                )));
            }
            videos.insert(seq.video_id.clone(), seq);
        }
        Ok(Self {
            videos,
            annotations,
            split,
            info,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let fdir = dir.join(FEATURES_DIR);
        fs::create_dir_all(&fdir).map_err(|e| PipelineError::io(&fdir, e))?;
        for (id, seq) in &self.videos {
            save_features(&fdir.join(format!("{id}.dvcf")), seq)?;
        }
        save_annotations(&dir.join(ANNOTATIONS_FILE), &self.annotations)?;
        write_json(&dir.join(SPLIT_FILE), &self.split)?;
        write_json(&dir.join(DATASET_FILE), &self.info)
    }

    pub fn load(run: &RunDir) -> Result<Self, PipelineError> {
        let info: DatasetInfo = read_json(&run.require(Stage::Synth, DATASET_FILE)?)?;
        let seqs = load_feature_dir(
            &run.require(Stage::Synth, FEATURES_DIR)?,
            info.clip_duration_s,
        )?;
        let annotations = load_annotations(&run.require(Stage::Synth, ANNOTATIONS_FILE)?)?;
        let split = read_json(&run.require(Stage::Synth, SPLIT_FILE)?)?;
        Self::new(seqs, annotations, split)
    }

    pub fn subset(&self, ids: &[String]) -> AnnotationSet {
        AnnotationSet {
            videos: ids
                .iter()
                .filter_map(|id| self.annotations.get(id).map(|a| (id.clone(), a.clone())))
                .collect(),
        }
    }

    pub fn sequences<'a>(
        &'a self,
        ids: &'a [String],
    ) -> impl Iterator<Item = &'a FeatureSequence> + 'a {
        ids.iter().filter_map(|id| self.videos.get(id))
    }
}

/// Visual and semantic clip streams of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoStreams {
    pub visual: Array2<f64>,
    pub semantic: Array2<f64>,
    pub clip_duration_s: f64,
    pub duration: f64,
}

pub fn video_streams(
    ds: &Dataset,
    cb: &Codebook,
    emb: &EmbeddingParams,
) -> Result<BTreeMap<String, VideoStreams>, PipelineError> {
    let mut out = BTreeMap::new();
    for (id, seq) in &ds.videos {
        let duration = ds
            .annotations
            .get(id)
            .map_or(seq.duration_s(), |a| a.duration);
        out.insert(
            id.clone(),
            VideoStreams {
                visual: seq.features_f64(),
                semantic: semantic_sequence(emb, cb, seq)?,
                clip_duration_s: seq.clip_duration_s,
                duration,
            },
        );
    }
    Ok(out)
}

/// Clips overlapping `[start, end]`, rounded outward to clip boundaries;
/// never empty.
pub fn clip_range(start: f64, end: f64, clip_duration_s: f64, clips: usize) -> Range<usize> {
    const EPS: f64 = 1e-9;
    let last = clips.saturating_sub(1);
    let a = ((start / clip_duration_s + EPS).floor().max(0.0) as usize).min(last);
    let b = ((end / clip_duration_s - EPS).ceil().max(0.0) as usize).clamp(a + 1, clips.max(1));
    a..b
}

/// How event clips are presented to a captioner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Pair,
    Visual,
    VisualSemantic,
}

pub fn event_input(
    v: &VideoStreams,
    start: f64,
    end: f64,
    mode: InputMode,
) -> Result<ModelInput, PipelineError> {
    let r = clip_range(start, end, v.clip_duration_s, v.visual.nrows());
    let vis = v.visual.slice(s![r.clone(), ..]).to_owned();
    let sem = v.semantic.slice(s![r, ..]).to_owned();
    Ok(match mode {
        InputMode::Pair => ModelInput::Pair {
            visual: vis,
            semantic: sem,
        },
        InputMode::Visual => ModelInput::Single(vis),
        InputMode::VisualSemantic => ModelInput::Single(build_sequence_features(&vis, &sem)?),
    })
}

pub fn input_dims(info: &DatasetInfo, d_emb: usize, mode: InputMode) -> Vec<usize> {
    match mode {
        InputMode::Pair => vec![info.feature_dim, d_emb],
        InputMode::Visual => vec![info.feature_dim],
        InputMode::VisualSemantic => vec![info.feature_dim + d_emb],
    }
}

pub fn build_vocabulary(ds: &Dataset, min_freq: usize) -> Vocabulary {
    let sentences: Vec<&str> = ds
        .split
        .train
        .iter()
        .filter_map(|id| ds.annotations.get(id))
        .flat_map(|a| a.sentences.iter().map(String::as_str))
        .collect();
    Vocabulary::build(&sentences, min_freq)
}

/// One sample per ground-truth event of `ids`, captions cut to `max_tokens`.
pub fn caption_samples(
    ds: &Dataset,
    streams: &BTreeMap<String, VideoStreams>,
    vocab: &Vocabulary,
    ids: &[String],
    mode: InputMode,
    max_tokens: usize,
) -> Result<Vec<CaptionSample>, PipelineError> {
    let mut out = Vec::new();
    for id in ids {
        let (Some(ann), Some(v)) = (ds.annotations.get(id), streams.get(id)) else {
            continue;
        };
        for (start, end, sentence) in ann.events() {
            let mut tokens = vocab.encode(sentence);
            tokens.truncate(max_tokens);
            out.push(CaptionSample {
                input: event_input(v, start, end, mode)?,
                tokens,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outward_rounding() {
        assert_eq!(clip_range(0.0, 4.0, 2.0, 10), 0..2);
        assert_eq!(clip_range(1.0, 4.5, 2.0, 10), 0..3);
        assert_eq!(clip_range(3.9, 4.1, 2.0, 10), 1..3);
        assert_eq!(clip_range(19.5, 25.0, 2.0, 10), 9..10);
        // zero-width interval still yields one clip
        assert_eq!(clip_range(4.0, 4.0, 2.0, 10), 2..3);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ids: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        let a = Split::new(&ids, 0.3, 5);
        assert_eq!(a, Split::new(&ids, 0.3, 5));
        assert_eq!(a.valid.len(), 3);
        assert_eq!(a.train.len(), 7);
        assert!(a.valid.iter().all(|v| !a.train.contains(v)));
        let none = Split::new(&ids, 0.0, 5);
        assert!(none.valid.is_empty());
        assert_eq!(none.eval_ids(), &none.train[..]);
        let one = Split::new(&ids[..1], 0.9, 0);
        assert_eq!(one.train.len(), 1);
    }
}

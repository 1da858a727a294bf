//! Clip-feature sequences, the `DVCF` matrix file format and annotation files.
//!
//! A feature file stores one row per clip:
//!
//! ```text
//! "DVCF" | version: u16 | rows: u32 | cols: u32 | rows*cols f32, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DVCF";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Seconds covered by one clip: 64 frames at 25 fps.
pub const DEFAULT_CLIP_DURATION_S: f64 = 2.56;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file not found: {0}")]
    Missing(PathBuf),
    #[error("{path}: bad magic bytes {found:?}")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("invalid feature sequence: {0}")]
    InvalidSequence(String),
    #[error("malformed annotation file: {0}")]
    Malformed(String),
    #[error("video {video}: event {index} [{start}, {end}] is invalid for duration {duration}")]
    InvalidEvent {
        video: String,
        index: usize,
        start: f64,
        end: f64,
        duration: f64,
    },
    #[error("video {video}: {events} events but {sentences} sentences")]
    CountMismatch {
        video: String,
        events: usize,
        sentences: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path, source: io::Error) -> DatasetError {
    if source.kind() == io::ErrorKind::NotFound {
        DatasetError::Missing(path.to_path_buf())
    } else {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Encodes a matrix in the `DVCF` layout.
pub fn encode_matrix(m: &Array2<f32>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `DVCF` byte buffer. `path` is only used for error messages.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Array2<f32>, DatasetError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DatasetError::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - expected,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked above"))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_matrix(&bytes, path)
}

pub fn write_matrix(path: &Path, m: &Array2<f32>) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, encode_matrix(m)).map_err(|e| io_err(path, e))
}

/// Convenience for persisting `f64` model state through the `f32` file format.
pub fn write_matrix_f64(path: &Path, m: &Array2<f64>) -> Result<(), DatasetError> {
    write_matrix(path, &m.mapv(|v| v as f32))
}

pub fn read_matrix_f64(path: &Path) -> Result<Array2<f64>, DatasetError> {
    Ok(read_matrix(path)?.mapv(f64::from))
}

/// Ordered clip features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub clip_duration_s: f64,
    /// `L x d_vis`, one row per clip.
    pub features: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        clip_duration_s: f64,
        features: Array2<f32>,
    ) -> Result<Self, DatasetError> {
        let seq = Self {
            video_id: video_id.into(),
            clip_duration_s,
            features,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.features.nrows() == 0 {
            return Err(DatasetError::InvalidSequence(format!(
                "{} has no clips",
                self.video_id
            )));
        }
        if self.features.ncols() == 0 {
            return Err(DatasetError::InvalidSequence(format!(
                "{} has zero-dimensional features",
                self.video_id
            )));
        }
        if !(self.clip_duration_s > 0.0 && self.clip_duration_s.is_finite()) {
            return Err(DatasetError::InvalidSequence(format!(
                "{} has clip duration {}",
                self.video_id, self.clip_duration_s
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * self.clip_duration_s
    }

    pub fn clip(&self, i: usize) -> ArrayView1<'_, f32> {
        self.features.row(i)
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

/// Loads a feature file. The video id is the file stem and the clip duration
/// defaults to [`DEFAULT_CLIP_DURATION_S`].
pub fn load_features(path: &Path) -> Result<FeatureSequence, DatasetError> {
    load_features_with_duration(path, DEFAULT_CLIP_DURATION_S)
}

pub fn load_features_with_duration(
    path: &Path,
    clip_duration_s: f64,
) -> Result<FeatureSequence, DatasetError> {
    let features = read_matrix(path)?;
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(video_id, clip_duration_s, features)
}

pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<(), DatasetError> {
    write_matrix(path, &seq.features)
}

/// Loads every `*.dvcf` file of a directory, sorted by video id.
pub fn load_feature_dir(
    dir: &Path,
    clip_duration_s: f64,
) -> Result<Vec<FeatureSequence>, DatasetError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dvcf"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| load_features_with_duration(p, clip_duration_s))
        .collect()
}

/// Ground truth for one video. Field names follow ActivityNet Captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub duration: f64,
    pub timestamps: Vec<[f64; 2]>,
    pub sentences: Vec<String>,
}

impl VideoAnnotation {
    pub fn validate(&self, video: &str) -> Result<(), DatasetError> {
        if self.timestamps.len() != self.sentences.len() {
            return Err(DatasetError::CountMismatch {
                video: video.to_string(),
                events: self.timestamps.len(),
                sentences: self.sentences.len(),
            });
        }
        for (index, &[start, end]) in self.timestamps.iter().enumerate() {
            let ok = start.is_finite()
                && end.is_finite()
                && 0.0 <= start
                && start < end
                && end <= self.duration;
            if !ok {
                return Err(DatasetError::InvalidEvent {
                    video: video.to_string(),
                    index,
                    start,
                    end,
                    duration: self.duration,
                });
            }
        }
        Ok(())
    }

    pub fn events(&self) -> impl Iterator<Item = (f64, f64, &str)> + '_ {
        self.timestamps
            .iter()
            .zip(&self.sentences)
            .map(|(t, s)| (t[0], t[1], s.as_str()))
    }
}

/// Annotations keyed by video id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet {
    pub videos: BTreeMap<String, VideoAnnotation>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.videos.iter().try_for_each(|(id, v)| v.validate(id))
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoAnnotation> {
        self.videos.get(video_id)
    }

    pub fn num_events(&self) -> usize {
        self.videos.values().map(|v| v.timestamps.len()).sum()
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let set: AnnotationSet =
            serde_json::from_str(text).map_err(|e| DatasetError::Malformed(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotations always serialize")
    }
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    AnnotationSet::from_json(&text)
}

pub fn save_annotations(path: &Path, ann: &AnnotationSet) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, ann.to_json()).map_err(|e| io_err(path, e))
}

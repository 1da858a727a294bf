use std::fs;
use std::path::{Path, PathBuf};

use dvc_core::codebook::KMeansParams;
use dvc_core::eval::DEFAULT_TIOU_THRESHOLDS;
use dvc_core::semvec::GloveHyper;
use dvc_core::synth::SynthConfig;
use dvc_nn::proposals::ProposalConfig;
use dvc_nn::{AdamConfig, TrainConfig, TransformerConfig};
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of `*.dvcf` clip features to ingest. Synthetic data is
    /// generated when unset.
    pub features_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Clip duration of ingested features.
    pub clip_duration_s: f64,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            features_dir: None,
            annotations: None,
            out_dir: PathBuf::from("runs/default"),
            clip_duration_s: dvc_core::dataset::DEFAULT_CLIP_DURATION_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of videos held out for validation and evaluation.
    pub valid_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            valid_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        let p = KMeansParams::default();
        Self {
            k: p.k,
            epochs: p.epochs,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CooccurConfig {
    pub window: usize,
}

impl Default for CooccurConfig {
    fn default() -> Self {
        Self {
            window: dvc_core::cooccur::DEFAULT_WINDOW,
        }
    }
}

/// Clip features fed to the single-stream captioner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Visual,
    VisualSemantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub min_word_freq: usize,
    pub vanilla_features: FeatureSet,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            min_word_freq: 1,
            vanilla_features: FeatureSet::VisualSemantic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub max_n: usize,
    /// Learned proposals captioned per video.
    pub caption_proposals: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_TIOU_THRESHOLDS.to_vec(),
            max_n: 4,
            caption_proposals: 10,
        }
    }
}

/// Whole-run configuration. `seed` overrides the seed of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub codebook: CodebookConfig,
    pub cooccur: CooccurConfig,
    pub embed: GloveHyper,
    pub captioner: CaptionerConfig,
    pub proposals: ProposalConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| PipelineError::Toml {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Small settings that run the full pipeline on a synthetic corpus in
    /// seconds.
    pub fn toy(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            paths: PathsConfig {
                out_dir: out_dir.into(),
                ..PathsConfig::default()
            },
            synth: SynthConfig {
                num_videos: 16,
                clips_per_video_range: (8, 12),
                clusters_per_topic: 3,
                feature_dim: 8,
                noise_sigma: 0.3,
                ..SynthConfig::default()
            },
            split: SplitConfig {
                valid_fraction: 0.25,
            },
            codebook: CodebookConfig {
                k: 9,
                epochs: 3,
                batch_size: 64,
            },
            cooccur: CooccurConfig { window: 2 },
            embed: GloveHyper {
                d_emb: 8,
                max_iters: 100,
                ..GloveHyper::default()
            },
            captioner: CaptionerConfig {
                model: TransformerConfig {
                    d_model: 16,
                    num_heads: 2,
                    num_layers: 1,
                    d_ffn: 32,
                    dropout: 0.1,
                    max_len: 12,
                    smoothing: 0.1,
                },
                train: TrainConfig {
                    epochs: 4,
                    batch_size: 8,
                    adam: AdamConfig {
                        lr: 3e-3,
                        ..AdamConfig::default()
                    },
                    patience: 4,
                    max_decode_len: 10,
                    seed: 0,
                },
                ..CaptionerConfig::default()
            },
            proposals: ProposalConfig {
                num_anchors: 4,
                hidden: 16,
                top_n: 20,
                epochs: 5,
                ..ProposalConfig::default()
            },
            eval: EvalConfig {
                caption_proposals: 4,
                ..EvalConfig::default()
            },
            seed: 0,
        }
        .seeded(0)
    }

    /// Copy with every stage seed derived from `seed`.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.embed.seed = seed;
        self.captioner.train.seed = seed;
        self.proposals.seed = seed;
        self
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.codebook.k,
            epochs: self.codebook.epochs,
            batch_size: self.codebook.batch_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.paths.features_dir.is_some() != self.paths.annotations.is_some() {
            return bad("features_dir and annotations must be given together".into());
        }
        if self.paths.features_dir.is_none() {
            self.synth
                .validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if !(self.paths.clip_duration_s > 0.0 && self.paths.clip_duration_s.is_finite()) {
            return bad(format!(
                "clip_duration_s must be > 0, got {}",
                self.paths.clip_duration_s
            ));
        }
        if !(0.0..1.0).contains(&self.split.valid_fraction) {
            return bad(format!(
                "valid_fraction {} outside [0, 1)",
                self.split.valid_fraction
            ));
        }
        if self.codebook.k == 0 || self.codebook.epochs == 0 || self.codebook.batch_size == 0 {
            return bad("codebook k, epochs and batch_size must be >= 1".into());
        }
        if self.cooccur.window == 0 {
            return bad("cooccur window must be >= 1".into());
        }
        self.embed
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.captioner.model.validate()?;
        if self.captioner.train.epochs == 0 || self.captioner.train.batch_size == 0 {
            return bad("captioner epochs and batch_size must be >= 1".into());
        }
        self.proposals.validate()?;
        if self.proposals.top_n == 0 {
            return bad("proposals top_n must be >= 1".into());
        }
        if self.eval.thresholds.is_empty()
            || self
                .eval
                .thresholds
                .iter()
                .any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return bad(format!(
                "tIoU thresholds must lie in (0, 1]: {:?}",
                self.eval.thresholds
            ));
        }
        if self.eval.max_n == 0 {
            return bad("eval max_n must be >= 1".into());
        }
        Ok(())
    }
}

//! Seeded synthetic corpora with planted topic structure.
//!
//! Every video is a chain of topic segments. A segment emits clip features as
//! Gaussian samples around prototypes owned by its topic and is annotated as
//! one event whose sentence is the topic's template. Each segment also draws a
//! binary style that selects half of the topic's prototypes and the last word
//! of the sentence, so captions vary a little but stay predictable from the
//! clips.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationSet, FeatureSequence, VideoAnnotation, DEFAULT_CLIP_DURATION_S};

const STYLE_WORDS: [&str; 2] = ["slowly", "quickly"];

pub const DEFAULT_VOCAB: &[&str] = &[
    "man", "woman", "child", "dog", "player", "chef", "dancer", "worker", "rider", "girl", "boy",
    "team", "runs", "throws", "cuts", "paints", "lifts", "kicks", "washes", "rides", "climbs",
    "plays", "builds", "cleans", "ball", "bread", "wall", "weights", "car", "horse", "rope",
    "guitar", "table", "floor", "bike", "board", "fence", "drum", "boat", "window",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_videos: usize,
    /// Inclusive range of clips per video.
    pub clips_per_video_range: (usize, usize),
    pub num_topics: usize,
    pub clusters_per_topic: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Inclusive range of events (segments) per video.
    pub events_per_video_range: (usize, usize),
    /// Word pool the topic templates are drawn from.
    pub vocab: Vec<String>,
    pub clip_duration_s: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 40,
            clips_per_video_range: (12, 24),
            num_topics: 3,
            clusters_per_topic: 4,
            feature_dim: 16,
            noise_sigma: 0.1,
            events_per_video_range: (2, 4),
            vocab: DEFAULT_VOCAB.iter().map(|s| s.to_string()).collect(),
            clip_duration_s: DEFAULT_CLIP_DURATION_S,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let (cmin, cmax) = self.clips_per_video_range;
        let (emin, emax) = self.events_per_video_range;
        if self.num_videos == 0
            || self.num_topics == 0
            || self.clusters_per_topic == 0
            || self.feature_dim == 0
            || cmin == 0
            || emin == 0
        {
            return bad("all counts must be at least 1".into());
        }
        if cmin > cmax || emin > emax {
            return bad("ranges must satisfy min <= max".into());
        }
        if emax > cmin {
            return bad(format!(
                "up to {emax} events need at least {emax} clips per video, minimum is {cmin}"
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(self.clip_duration_s > 0.0 && self.clip_duration_s.is_finite()) {
            return bad(format!(
                "clip_duration_s must be > 0, got {}",
                self.clip_duration_s
            ));
        }
        let mut distinct = self.vocab.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < 3 * self.num_topics {
            return bad(format!(
                "vocab needs {} distinct words for {} topics, has {}",
                3 * self.num_topics,
                self.num_topics,
                distinct.len()
            ));
        }
        Ok(())
    }
}

/// Output of [`synth_corpus`] with the planted ground truth exposed for tests.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub sequences: Vec<FeatureSequence>,
    pub annotations: AnnotationSet,
    /// One `clusters_per_topic x feature_dim` matrix per topic.
    pub prototypes: Vec<Array2<f32>>,
    /// Topic of every clip, per video.
    pub clip_topics: Vec<Vec<usize>>,
    /// Global prototype index (`topic * clusters_per_topic + local`) of every clip.
    pub clip_prototypes: Vec<Vec<usize>>,
    /// Template sentence (style 0) per topic.
    pub templates: Vec<String>,
}

impl SynthCorpus {
    /// Topic owning a global prototype index.
    pub fn prototype_topic(&self, global: usize) -> usize {
        global / self.prototypes[0].nrows()
    }

    /// All prototypes stacked in global index order.
    pub fn all_prototypes(&self) -> Array2<f32> {
        let views: Vec<_> = self.prototypes.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("prototype shapes agree")
    }
}

struct Template {
    subject: String,
    verb: String,
    object: String,
}

impl Template {
    fn sentence(&self, style: usize) -> String {
        format!(
            "a {} {} the {} {}",
            self.subject, self.verb, self.object, STYLE_WORDS[style]
        )
    }
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let c = cfg.clusters_per_topic;

    let prototypes: Vec<Array2<f32>> = (0..cfg.num_topics)
        .map(|_| Array2::from_shape_simple_fn((c, d), || rng.sample::<f32, _>(StandardNormal)))
        .collect();

    let mut pool = cfg.vocab.clone();
    pool.sort();
    pool.dedup();
    pool.shuffle(&mut rng);
    let templates: Vec<Template> = pool
        .chunks(3)
        .take(cfg.num_topics)
        .map(|w| Template {
            subject: w[0].clone(),
            verb: w[1].clone(),
            object: w[2].clone(),
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let mut sequences = Vec::with_capacity(cfg.num_videos);
    let mut videos = BTreeMap::new();
    let mut clip_topics = Vec::with_capacity(cfg.num_videos);
    let mut clip_prototypes = Vec::with_capacity(cfg.num_videos);

    for v in 0..cfg.num_videos {
        let video_id = format!("v{v:05}");
        let len = rng.random_range(cfg.clips_per_video_range.0..=cfg.clips_per_video_range.1);
        let events = rng.random_range(cfg.events_per_video_range.0..=cfg.events_per_video_range.1);

        let mut cuts = rand::seq::index::sample(&mut rng, len - 1, events - 1)
            .into_iter()
            .map(|i| i + 1)
            .collect::<Vec<_>>();
        cuts.sort_unstable();
        let mut bounds = Vec::with_capacity(events + 1);
        bounds.push(0);
        bounds.extend(cuts);
        bounds.push(len);

        let mut features = Array2::<f32>::zeros((len, d));
        let mut topics = Vec::with_capacity(len);
        let mut protos = Vec::with_capacity(len);
        let mut timestamps = Vec::with_capacity(events);
        let mut sentences = Vec::with_capacity(events);
        let mut prev_topic = None;

        for seg in bounds.windows(2) {
            let topic = loop {
                let t = rng.random_range(0..cfg.num_topics);
                if cfg.num_topics == 1 || Some(t) != prev_topic {
                    break t;
                }
            };
            prev_topic = Some(topic);
            let style = if c >= 2 { rng.random_range(0..2) } else { 0 };
            // Prototypes of the chosen style: local indices with matching parity.
            let owned: Vec<usize> = (0..c).filter(|i| c < 2 || i % 2 == style).collect();

            for clip in seg[0]..seg[1] {
                let local = owned[rng.random_range(0..owned.len())];
                let proto = prototypes[topic].row(local);
                for (j, out) in features.row_mut(clip).iter_mut().enumerate() {
                    let eps = if cfg.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    *out = (f64::from(proto[j]) + eps) as f32;
                }
                topics.push(topic);
                protos.push(topic * c + local);
            }
            timestamps.push([
                seg[0] as f64 * cfg.clip_duration_s,
                seg[1] as f64 * cfg.clip_duration_s,
            ]);
            sentences.push(templates[topic].sentence(style));
        }

        videos.insert(
            video_id.clone(),
            VideoAnnotation {
                duration: len as f64 * cfg.clip_duration_s,
                timestamps,
                sentences,
            },
        );
        sequences.push(FeatureSequence {
            video_id,
            clip_duration_s: cfg.clip_duration_s,
            features,
        });
        clip_topics.push(topics);
        clip_prototypes.push(protos);
    }

    Ok(SynthCorpus {
        sequences,
        annotations: AnnotationSet { videos },
        prototypes,
        clip_topics,
        clip_prototypes,
        templates: templates.iter().map(|t| t.sentence(0)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig::default();
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.annotations, b.annotations);
        let c = synth_corpus(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.sequences, c.sequences);
    }

    #[test]
    fn single_topic_clips_stay_near_prototypes() {
        let cfg = SynthConfig {
            num_topics: 1,
            noise_sigma: 0.05,
            ..Default::default()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        let bound = cfg.noise_sigma * (cfg.feature_dim as f64).sqrt() * 3.0;
        for seq in &corpus.sequences {
            for clip in seq.features.rows() {
                let nearest = corpus.prototypes[0]
                    .rows()
                    .into_iter()
                    .map(|p| {
                        p.iter()
                            .zip(clip)
                            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest <= bound, "{nearest} > {bound}");
            }
        }
    }

    #[test]
    fn zero_noise_single_cluster_is_exact() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            clusters_per_topic: 1,
            ..Default::default()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        for (seq, topics) in corpus.sequences.iter().zip(&corpus.clip_topics) {
            for (clip, &t) in seq.features.rows().into_iter().zip(topics) {
                assert_eq!(clip, corpus.prototypes[t].row(0));
            }
        }
    }

    #[test]
    fn events_cover_video_and_have_sentences() {
        let corpus = synth_corpus(&SynthConfig::default()).unwrap();
        corpus.annotations.validate().unwrap();
        for seq in &corpus.sequences {
            let ann = corpus.annotations.get(&seq.video_id).unwrap();
            assert_eq!(ann.timestamps.len(), ann.sentences.len());
            assert_eq!(ann.timestamps[0][0], 0.0);
            assert!((ann.timestamps.last().unwrap()[1] - seq.duration_s()).abs() < 1e-9);
            for w in ann.timestamps.windows(2) {
                assert_eq!(w[0][1], w[1][0]);
            }
        }
    }

    #[test]
    fn events_align_with_topic_segments() {
        let corpus = synth_corpus(&SynthConfig::default()).unwrap();
        for (seq, topics) in corpus.sequences.iter().zip(&corpus.clip_topics) {
            let ann = corpus.annotations.get(&seq.video_id).unwrap();
            for (ts, sentence) in ann.timestamps.iter().zip(&ann.sentences) {
                let a = (ts[0] / seq.clip_duration_s).round() as usize;
                let b = (ts[1] / seq.clip_duration_s).round() as usize;
                let t = topics[a];
                assert!(topics[a..b].iter().all(|&x| x == t));
                let template = &corpus.templates[t];
                let stem: Vec<_> = template.split(' ').take(5).collect();
                assert!(sentence.starts_with(&stem.join(" ")));
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SynthConfig {
                num_topics: 0,
                ..Default::default()
            },
            SynthConfig {
                noise_sigma: -1.0,
                ..Default::default()
            },
            SynthConfig {
                events_per_video_range: (3, 30),
                ..Default::default()
            },
            SynthConfig {
                vocab: vec!["a".into(); 20],
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(synth_corpus(&cfg).is_err());
        }
    }
}

//! Clip-level data handling for dense video captioning: feature files and
//! annotations, a k-means visual vocabulary, co-occurrence counting, the
//! co-occurrence embedding that yields the per-clip semantic descriptor, and
//! the evaluation metrics shared by the downstream models.

pub mod codebook;
pub mod cooccur;
pub mod dataset;
pub mod eval;
pub mod semvec;
pub mod synth;

pub use codebook::{fit_minibatch_kmeans, Codebook, KMeansParams};
pub use cooccur::{count_cooccurrences, CooccurrenceMatrix, LabelSequence};
pub use dataset::{AnnotationSet, FeatureSequence, VideoAnnotation};
pub use eval::{bleu, proposal_prf, tiou, Prf, Segment};
pub use semvec::{EmbeddingParams, GloveHyper};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};

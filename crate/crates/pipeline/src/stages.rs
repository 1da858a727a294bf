//! One function per pipeline stage. Each reads only the artifacts of its
//! declared input stages and writes a fresh stage directory plus manifest.

use std::collections::BTreeMap;
use std::fs;

use dvc_core::codebook::{fit_minibatch_kmeans, pool_features, Codebook};
use dvc_core::cooccur::{count_cooccurrences, CooccurrenceMatrix};
use dvc_core::dataset::{load_annotations, load_feature_dir};
use dvc_core::semvec::{
    load_embeddings, save_embeddings, train_embeddings, EmbeddingMeta, EmbeddingParams,
};
use dvc_core::synth::synth_corpus;
use dvc_nn::proposals::{
    export_proposals, fit_anchors, load_heads, save_heads, train_proposal_module, Proposal,
    ProposalHeads, ProposalVideo,
};
use dvc_nn::train::decode_all;
use dvc_nn::transformer::{load_model, save_model, ModelManifest};
use dvc_nn::{train_captioner, CaptionModel, Encoded, ModelInput, ModelKind};
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_json, write_json, write_manifest, RunDir, Stage, MANIFEST_FILE};
use crate::config::{FeatureSet, PipelineConfig};
use crate::data::{
    build_vocabulary, caption_samples, event_input, input_dims, video_streams, Dataset, InputMode,
    Split, VideoStreams,
};
use crate::error::PipelineError;
use crate::report::{evaluate, EvalReport, REPORT_KV, REPORT_TXT};

pub const CODEBOOK_DIR: &str = "codebook";
pub const COOCCUR_FILE: &str = "cooccur.txt";
pub const EMBED_DIR: &str = "embeddings";
pub const MODEL_DIR: &str = "model";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const HEADS_DIR: &str = "heads";
pub const PROPOSALS_TXT: &str = "proposals.txt";
pub const PROPOSALS_JSON: &str = "proposals.json";
pub const CAPTIONS_GT: &str = "captions_gt.json";
pub const CAPTIONS_LEARNED: &str = "captions_learned.json";

/// Ranked proposals per video plus the videos that fell short of `top_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub top_n: usize,
    pub proposals: BTreeMap<String, Vec<Proposal>>,
    pub shortfall: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub sentence: String,
}

pub type CaptionSet = BTreeMap<String, Vec<CaptionedSegment>>;

pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let run = RunDir::new(&cfg.paths.out_dir);
    for &input in stage.inputs() {
        run.require(input, MANIFEST_FILE)?;
    }
    match stage {
        Stage::Synth => synth(&run, cfg),
        Stage::Codebook => codebook(&run, cfg),
        Stage::Cooccur => cooccur(&run, cfg),
        Stage::Embed => embed(&run, cfg),
        Stage::TrainCaptionerBimodal => {
            train_caption_stage(&run, cfg, Stage::TrainCaptionerBimodal)
        }
        Stage::TrainProposals => train_proposals(&run, cfg),
        Stage::Propose => propose(&run, cfg),
        Stage::TrainCaptionerVanilla => {
            train_caption_stage(&run, cfg, Stage::TrainCaptionerVanilla)
        }
        Stage::Caption => caption(&run, cfg),
        Stage::Eval => eval(&run, cfg).map(|_| ()),
    }?;
    write_manifest(&run, stage, cfg)?;
    Ok(())
}

/// Every stage in order; returns the evaluation report.
pub fn run_all(cfg: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    for s in Stage::ALL {
        run_stage(s, cfg)?;
    }
    load_report(&RunDir::new(&cfg.paths.out_dir))
}

pub fn load_report(run: &RunDir) -> Result<EvalReport, PipelineError> {
    read_json(&run.require(Stage::Eval, "report.json")?)
}

fn synth(run: &RunDir, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let (seqs, annotations) = match (&cfg.paths.features_dir, &cfg.paths.annotations) {
        (Some(f), Some(a)) => (
            load_feature_dir(f, cfg.paths.clip_duration_s)?,
            load_annotations(a)?,
        ),
        _ => {
            let c = synth_corpus(&cfg.synth).map_err(|e| PipelineError::Config(e.to_string()))?;
            (c.sequences, c.annotations)
        }
    };
    let ids: Vec<String> = seqs.iter().map(|s| s.video_id.clone()).collect();
    let split = Split::new(&ids, cfg.split.valid_fraction, cfg.seed);
    let ds = Dataset::new(seqs, annotations, split)?;
    let dir = run.fresh(Stage::Synth)?;
    ds.save(&dir)
}

fn load_codebook(run: &RunDir) -> Result<Codebook, PipelineError> {
    Ok(Codebook::load(
        &run.require(Stage::Codebook, CODEBOOK_DIR)?,
    )?)
}

fn load_embed(run: &RunDir) -> Result<EmbeddingParams, PipelineError> {
    Ok(load_embeddings(&run.require(Stage::Embed, EMBED_DIR)?)?.0)
}

fn codebook(run: &RunDir, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let ds = Dataset::load(run)?;
    let pooled = pool_features(ds.sequences(&ds.split.train));
    let cb = fit_minibatch_kmeans(pooled.view(), cfg.kmeans_params())?;
    let dir = run.fresh(Stage::Codebook)?;
    cb.save(&dir.join(CODEBOOK_DIR))?;
    Ok(())
}

fn cooccur(run: &RunDir, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let ds = Dataset::load(run)?;
    let cb = load_codebook(run)?;
    let labels = ds
        .sequences(&ds.split.train)
        .map(|s| cb.encode_sequence(s))
        .collect::<Result<Vec<_>, _>>()?;
    let z = count_cooccurrences(&labels, cb.k(), cfg.cooccur.window)?;
    let dir = run.fresh(Stage::Cooccur)?;
    z.save(&dir.join(COOCCUR_FILE))?;
    Ok(())
}

fn embed(run: &RunDir, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let z = CooccurrenceMatrix::load(&run.require(Stage::Cooccur, COOCCUR_FILE)?)?;
    let trained = train_embeddings(&z, &cfg.embed)?;
    let meta = EmbeddingMeta {
        k: z.k,
        d_emb: cfg.embed.d_emb,
        hyper: cfg.embed.clone(),
        final_loss: trained.best_loss,
        iterations: trained.iterations,
    };
    let dir = run.fresh(Stage::Embed)?;
    save_embeddings(&dir.join(EMBED_DIR), &trained.params, &meta)?;
    Ok(())
}

struct Streams {
    ds: Dataset,
    streams: BTreeMap<String, VideoStreams>,
    d_emb: usize,
}

fn load_streams(run: &RunDir) -> Result<Streams, PipelineError> {
    let ds = Dataset::load(run)?;
    let cb = load_codebook(run)?;
    let emb = load_embed(run)?;
    let streams = video_streams(&ds, &cb, &emb)?;
    Ok(Streams {
        ds,
        streams,
        d_emb: emb.d_emb(),
    })
}

fn vanilla_mode(cfg: &PipelineConfig) -> InputMode {
    match cfg.captioner.vanilla_features {
        FeatureSet::Visual => InputMode::Visual,
        FeatureSet::VisualSemantic => InputMode::VisualSemantic,
    }
}

fn train_caption_stage(
    run: &RunDir,
    cfg: &PipelineConfig,
    stage: Stage,
) -> Result<(), PipelineError> {
    let (kind, mode) = if stage == Stage::TrainCaptionerBimodal {
        (ModelKind::Bimodal, InputMode::Pair)
    } else {
        (ModelKind::Vanilla, vanilla_mode(cfg))
    };
    let st = load_streams(run)?;
    let vocab = build_vocabulary(&st.ds, cfg.captioner.min_word_freq);
    let max_tokens = cfg.captioner.model.max_len - 1;
    let train = caption_samples(
        &st.ds,
        &st.streams,
        &vocab,
        &st.ds.split.train,
        mode,
        max_tokens,
    )?;
    let valid = caption_samples(
        &st.ds,
        &st.streams,
        &vocab,
        &st.ds.split.valid,
        mode,
        max_tokens,
    )?;
    let dims = input_dims(&st.ds.info, st.d_emb, mode);
    let mut model = CaptionModel::new(kind, cfg.captioner.model, &dims, vocab.len(), cfg.seed)?;
    let report = train_captioner(&mut model, &train, &valid, &cfg.captioner.train)?;
    let dir = run.fresh(stage)?;
    let manifest = ModelManifest {
        kind,
        config: cfg.captioner.model,
        input_dims: dims,
        vocabulary: vocab,
        seed: cfg.seed,
        best_valid_score: (!valid.is_empty()).then_some(report.best_score),
    };
    save_model(&dir.join(MODEL_DIR), &model, &manifest)?;
    write_json(&dir.join(TRAIN_REPORT), &report)
}

/// Frozen bi-modal encoder outputs over whole videos.
pub fn encode_videos(
    model: &CaptionModel,
    ds: &Dataset,
    streams: &BTreeMap<String, VideoStreams>,
    ids: &[String],
) -> Result<Vec<ProposalVideo>, PipelineError> {
    ids.iter()
        .filter_map(|id| streams.get(id).map(|v| (id, v)))
        .map(|(id, v)| {
            let enc = model.encode(&ModelInput::Pair {
                visual: v.visual.clone(),
                semantic: v.semantic.clone(),
            })?;
            let Encoded::Pair { visual, semantic } = enc else {
                return Err(PipelineError::Config(
                    "proposal heads need a bi-modal encoder".into(),
                ));
            };
            let events = ds
                .annotations
                .get(id)
                .map(|a| a.timestamps.clone())
                .unwrap_or_default();
            Ok(ProposalVideo {
                video_id: id.clone(),
                duration: v.duration,
                clip_duration_s: v.clip_duration_s,
                visual,
                semantic,
                events,
            })
        })
        .collect()
}

fn train_proposals(run: &RunDir, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let st = load_streams(run)?;
    let (model, _) = load_model(&run.require(Stage::TrainCaptionerBimodal, MODEL_DIR)?)?;
    let videos = encode_videos(&model, &st.ds, &st.streams, &st.ds.split.train)?;
    let anchors = fit_anchors(
        &st.ds.subset(&st.ds.split.train),
        cfg.proposals.num_anchors,
        cfg.seed,
    )?;
    let mut heads = ProposalHeads::new(anchors, cfg.proposals.clone(), model.cfg.d_model)?;
    let report = train_proposal_module(&mut heads, &videos)?;
    let dir = run.fresh(Stage::TrainProposals)?;
    save_heads(&dir.join(HEADS_DIR), &heads)?;
    write_json(&dir.join(TRAIN_REPORT), &report)
}

fn propose(run: &RunDir, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let st = load_streams(run)?;
    let (model, _) = load_model(&run.require(Stage::TrainCaptionerBimodal, MODEL_DIR)?)?;
    let heads = load_heads(&run.require(Stage::TrainProposals, HEADS_DIR)?)?;
    let ids: Vec<String> = st.ds.videos.keys().cloned().collect();
    let videos = encode_videos(&model, &st.ds, &st.streams, &ids)?;
    let mut set = ProposalSet {
        top_n: cfg.proposals.top_n,
        proposals: BTreeMap::new(),
        shortfall: Vec::new(),
    };
    for v in &videos {
        let ranked = heads.generate(v, cfg.proposals.top_n)?;
        if ranked.shortfall {
            set.shortfall.push(v.video_id.clone());
        }
        set.proposals.insert(v.video_id.clone(), ranked.proposals);
    }
    let dir = run.fresh(Stage::Propose)?;
    let txt = dir.join(PROPOSALS_TXT);
    fs::write(&txt, export_proposals(&set.proposals)).map_err(|e| PipelineError::io(&txt, e))?;
    write_json(&dir.join(PROPOSALS_JSON), &set)
}

pub fn load_proposals(run: &RunDir) -> Result<ProposalSet, PipelineError> {
    read_json(&run.require(Stage::Propose, PROPOSALS_JSON)?)
}

fn caption(run: &RunDir, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let st = load_streams(run)?;
    let (model, manifest) = load_model(&run.require(Stage::TrainCaptionerVanilla, MODEL_DIR)?)?;
    let mode = if manifest.input_dims[0] == st.ds.info.feature_dim {
        InputMode::Visual
    } else {
        InputMode::VisualSemantic
    };
    let props = load_proposals(run)?;
    let max_len = cfg.captioner.train.max_decode_len;
    let mut gt = CaptionSet::new();
    let mut learned = CaptionSet::new();
    for id in st.ds.split.eval_ids() {
        let v = &st.streams[id];
        let ann = &st.ds.annotations.videos[id];
        let gt_segs: Vec<(f64, f64)> = ann.timestamps.iter().map(|t| (t[0], t[1])).collect();
        let learned_segs: Vec<(f64, f64)> = props
            .proposals
            .get(id)
            .map(|ps| {
                ps.iter()
                    .take(cfg.eval.caption_proposals)
                    .map(|p| (p.start_s(), p.end_s()))
                    .collect()
            })
            .unwrap_or_default();
        for (segs, out) in [(gt_segs, &mut gt), (learned_segs, &mut learned)] {
            let inputs = segs
                .iter()
                .map(|&(a, b)| event_input(v, a, b, mode))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&ModelInput> = inputs.iter().collect();
            let decoded = decode_all(&model, &refs, max_len)?;
            let mut entries = Vec::with_capacity(segs.len());
            for ((a, b), ids) in segs.into_iter().zip(decoded) {
                entries.push(CaptionedSegment {
                    start_s: a,
                    end_s: b,
                    sentence: manifest.vocabulary.decode(&ids)?.join(" "),
                });
            }
            out.insert(id.clone(), entries);
        }
    }
    let dir = run.fresh(Stage::Caption)?;
    write_json(&dir.join(CAPTIONS_GT), &gt)?;
    write_json(&dir.join(CAPTIONS_LEARNED), &learned)
}

fn eval(run: &RunDir, cfg: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    let ds = Dataset::load(run)?;
    let props = load_proposals(run)?;
    let gt: CaptionSet = read_json(&run.require(Stage::Caption, CAPTIONS_GT)?)?;
    let learned: CaptionSet = read_json(&run.require(Stage::Caption, CAPTIONS_LEARNED)?)?;
    let report = evaluate(&ds, &props, &gt, &learned, &cfg.eval)?;
    let dir = run.fresh(Stage::Eval)?;
    write_json(&dir.join("report.json"), &report)?;
    let txt = dir.join(REPORT_TXT);
    fs::write(&txt, report.to_text()).map_err(|e| PipelineError::io(&txt, e))?;
    let kv = dir.join(REPORT_KV);
    fs::write(&kv, report.to_kv()).map_err(|e| PipelineError::io(&kv, e))?;
    Ok(report)
}

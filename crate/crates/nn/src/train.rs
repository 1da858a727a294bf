use dvc_core::eval::bleu;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::layers::Dropout;
use crate::params::{Adam, AdamConfig, Grads};
use crate::tape::Graph;
use crate::transformer::{teacher_forcing, CaptionModel, Encoded, ModelInput};
use crate::vocab::{BOS, EOS};

/// Encoder input and caption token ids (no start or end markers).
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSample {
    pub input: ModelInput,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            adam: AdamConfig::default(),
            patience: 10,
            max_decode_len: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean dropout-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_bleu4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    /// BLEU@4 on the validation set, or training loss without one.
    pub best_score: f64,
}

fn sample_seed(seed: u64, epoch: usize, idx: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (idx as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Loss and parameter gradients for one caption; dropout is active when `rng` is given.
pub fn sample_gradients(
    model: &CaptionModel,
    sample: &CaptionSample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Grads), NnError> {
    let mut g = Graph::new(&model.params);
    let mut drop = match rng {
        Some(r) => Dropout::train(model.cfg.dropout, r),
        None => Dropout::eval(),
    };
    let loss = model.caption_loss(&mut g, &sample.input, &sample.tokens, &mut drop)?;
    Ok((g.scalar(loss), g.backward(loss)))
}

/// Mean eval-mode loss over `samples`.
pub fn mean_loss(model: &CaptionModel, samples: &[CaptionSample]) -> Result<f64, NnError> {
    if samples.is_empty() {
        return Err(NnError::Empty("samples"));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(&model.params);
            let l = model.caption_loss(&mut g, &s.input, &s.tokens, &mut Dropout::eval())?;
            Ok(g.scalar(l))
        })
        .collect::<Result<_, NnError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Argmax decoding from the start token until the end token or `max_len`
/// words; ties go to the lowest id.
pub fn greedy_decode(
    model: &CaptionModel,
    enc: &Encoded,
    max_len: usize,
) -> Result<Vec<usize>, NnError> {
    let limit = max_len.min(model.cfg.max_len.saturating_sub(1));
    let mut tokens = vec![BOS];
    while tokens.len() - 1 < limit {
        let logits = model.decode(&tokens, enc)?;
        let last = logits.row(logits.nrows() - 1);
        let next = argmax(last.iter().copied());
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    tokens.remove(0);
    Ok(tokens)
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Fraction of target positions (end marker included) whose teacher-forced
/// argmax prediction is correct.
pub fn teacher_forced_accuracy(
    model: &CaptionModel,
    samples: &[CaptionSample],
) -> Result<f64, NnError> {
    let counts: Vec<(usize, usize)> = samples
        .par_iter()
        .map(|s| {
            let (inp, target) = teacher_forcing(&s.tokens);
            let enc = model.encode(&s.input)?;
            let logits = model.decode(&inp, &enc)?;
            let hits = target
                .iter()
                .enumerate()
                .filter(|(r, &t)| argmax(logits.row(*r).iter().copied()) == t)
                .count();
            Ok((hits, target.len()))
        })
        .collect::<Result<_, NnError>>()?;
    let (hits, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(NnError::Empty("samples"));
    }
    Ok(hits as f64 / total as f64)
}

/// Greedy captions for every sample.
pub fn decode_all(
    model: &CaptionModel,
    inputs: &[&ModelInput],
    max_len: usize,
) -> Result<Vec<Vec<usize>>, NnError> {
    inputs
        .par_iter()
        .map(|i| greedy_decode(model, &model.encode(i)?, max_len))
        .collect()
}

/// Corpus BLEU@1..4 of greedy captions against the sample captions.
pub fn caption_bleu(
    model: &CaptionModel,
    samples: &[CaptionSample],
    max_len: usize,
) -> Result<Vec<f64>, NnError> {
    let inputs: Vec<&ModelInput> = samples.iter().map(|s| &s.input).collect();
    let hyp = decode_all(model, &inputs, max_len)?;
    let as_words = |v: &Vec<usize>| v.iter().map(usize::to_string).collect::<Vec<_>>();
    let cands: Vec<Vec<String>> = hyp.iter().map(as_words).collect();
    let refs: Vec<Vec<String>> = samples.iter().map(|s| as_words(&s.tokens)).collect();
    Ok(bleu(&cands, &refs, 4)?)
}

/// Adam with teacher forcing on the label-smoothed loss. With a validation
/// set the kept parameters maximise validation BLEU@4 (ties: lower validation
/// loss); without one they minimise eval-mode training loss.
pub fn train_captioner(
    model: &mut CaptionModel,
    train: &[CaptionSample],
    valid: &[CaptionSample],
    cfg: &TrainConfig,
) -> Result<TrainReport, NnError> {
    if train.is_empty() {
        return Err(NnError::Empty("training set"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(NnError::Config("epochs and batch_size must be >= 1".into()));
    }
    let mut opt = Adam::new(cfg.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let initial_loss = mean_loss(model, train)?;
    let mut best: Option<((f64, f64), usize, crate::params::ParamSet)> = None;
    let mut stale = 0;
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let model_ref = &*model;
            let results: Vec<(f64, Grads)> = batch
                .par_iter()
                .map(|&i| {
                    let mut r = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, i));
                    sample_gradients(model_ref, &train[i], Some(&mut r))
                })
                .collect::<Result<_, _>>()?;
            let mut total = Grads::zeros_like(&model.params);
            for (l, gr) in &results {
                loss_sum += l;
                total.accumulate(gr);
            }
            total.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.params, &total);
        }
        let train_loss = loss_sum / train.len() as f64;
        let (score, stats) = if valid.is_empty() {
            let l = mean_loss(model, train)?;
            ((-l, 0.0), (None, None))
        } else {
            let vl = mean_loss(model, valid)?;
            let b4 = caption_bleu(model, valid, cfg.max_decode_len)?[3];
            ((b4, -vl), (Some(vl), Some(b4)))
        };
        epochs.push(EpochStats {
            epoch,
            train_loss,
            valid_loss: stats.0,
            valid_bleu4: stats.1,
        });
        let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s);
        if improved {
            best = Some((score, epoch, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (score, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainReport {
        initial_loss,
        epochs,
        best_epoch,
        best_score: if valid.is_empty() { -score.0 } else { score.0 },
    })
}

//! Encoder–decoder captioners.
//!
//! Every sublayer is pre-normalised and residual: `x + f(LN(x))`, with a
//! final normalisation after each stack. The vanilla model encodes one clip
//! stream; the bi-modal model keeps separate visual and semantic streams
//! that attend to each other, and its decoder attends to both and fuses the
//! two results through a bridge layer on their concatenation.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::layers::{
    causal_mask, positional_encoding, Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
use crate::params::{io_err, json_err, Init, ParamId, ParamSet, ParamStore};
use crate::tape::{Graph, Var};
use crate::vocab::{Vocabulary, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// Longest decoder input, start token included.
    pub max_len: usize,
    pub smoothing: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            num_heads: 4,
            num_layers: 2,
            d_ffn: 256,
            dropout: 0.1,
            max_len: 32,
            smoothing: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.d_model == 0
            || self.num_heads == 0
            || self.num_layers == 0
            || self.d_ffn == 0
            || self.max_len == 0
        {
            return bad(format!("all dimensions must be >= 1: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vanilla,
    Bimodal,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::Bimodal => "bimodal",
        }
    }
}

/// Clip features fed to an encoder: one stream, or visual plus semantic.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Single(Array2<f64>),
    Pair {
        visual: Array2<f64>,
        semantic: Array2<f64>,
    },
}

/// Encoder output values, reusable across decoder calls.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoded {
    Single(Array2<f64>),
    Pair {
        visual: Array2<f64>,
        semantic: Array2<f64>,
    },
}

/// Encoder output inside a graph.
#[derive(Debug, Clone, Copy)]
pub enum Memory {
    Single(Var),
    Pair { visual: Var, semantic: Var },
}

impl Memory {
    pub fn values(&self, g: &Graph) -> Encoded {
        match *self {
            Memory::Single(m) => Encoded::Single(g.value(m).clone()),
            Memory::Pair { visual, semantic } => Encoded::Pair {
                visual: g.value(visual).clone(),
                semantic: g.value(semantic).clone(),
            },
        }
    }

    pub fn constant(g: &mut Graph, enc: &Encoded) -> Self {
        match enc {
            Encoded::Single(m) => Memory::Single(g.constant(m.clone())),
            Encoded::Pair { visual, semantic } => Memory::Pair {
                visual: g.constant(visual.clone()),
                semantic: g.constant(semantic.clone()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln_sa: LayerNorm,
    sa: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// One modality's half of a bi-modal encoder layer.
#[derive(Debug, Clone, Copy)]
struct StreamLayer {
    ln_sa: LayerNorm,
    sa: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln_sa: LayerNorm,
    sa: MultiHeadAttention,
    ln_ca: LayerNorm,
    ca: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct BimodalDecoderLayer {
    ln_sa: LayerNorm,
    sa: MultiHeadAttention,
    ln_ca: LayerNorm,
    ca_semantic: MultiHeadAttention,
    ca_visual: MultiHeadAttention,
    ln_bridge: LayerNorm,
    bridge: Linear,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
enum Arch {
    Vanilla {
        input: Linear,
        enc: Vec<EncoderLayer>,
        enc_ln: LayerNorm,
        dec: Vec<DecoderLayer>,
    },
    Bimodal {
        input_v: Linear,
        input_s: Linear,
        enc: Vec<(StreamLayer, StreamLayer)>,
        enc_ln_v: LayerNorm,
        enc_ln_s: LayerNorm,
        dec: Vec<BimodalDecoderLayer>,
    },
}

#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub kind: ModelKind,
    pub cfg: TransformerConfig,
    /// Feature width per input stream (one for vanilla, visual then semantic for bi-modal).
    pub input_dims: Vec<usize>,
    pub vocab_size: usize,
    pub params: ParamSet,
    arch: Arch,
    embed: ParamId,
    dec_ln: LayerNorm,
    generator: Linear,
}

fn stream_layer(
    s: &mut ParamStore,
    p: &str,
    c: &TransformerConfig,
) -> Result<StreamLayer, NnError> {
    let (d, h) = (c.d_model, c.num_heads);
    Ok(StreamLayer {
        ln_sa: LayerNorm::new(s, &format!("{p}.ln_sa"), d)?,
        sa: MultiHeadAttention::new(s, &format!("{p}.sa"), d, h)?,
        ln_cross: LayerNorm::new(s, &format!("{p}.ln_cross"), d)?,
        cross: MultiHeadAttention::new(s, &format!("{p}.cross"), d, h)?,
        ln_ff: LayerNorm::new(s, &format!("{p}.ln_ff"), d)?,
        ff: FeedForward::new(s, &format!("{p}.ff"), d, c.d_ffn)?,
    })
}

impl CaptionModel {
    /// Freshly initialised model.
    pub fn new(
        kind: ModelKind,
        cfg: TransformerConfig,
        input_dims: &[usize],
        vocab_size: usize,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut params = ParamSet::new();
        let mut store = ParamStore::init(&mut params, seed);
        Self::assemble(kind, cfg, input_dims, vocab_size, &mut store)
            .map(|parts| parts.with_params(params))
    }

    /// Rebinds a model around previously trained parameters.
    pub fn from_params(
        kind: ModelKind,
        cfg: TransformerConfig,
        input_dims: &[usize],
        vocab_size: usize,
        mut params: ParamSet,
    ) -> Result<Self, NnError> {
        let mut store = ParamStore::lookup(&mut params);
        let parts = Self::assemble(kind, cfg, input_dims, vocab_size, &mut store)?;
        Ok(parts.with_params(params))
    }

    fn assemble(
        kind: ModelKind,
        cfg: TransformerConfig,
        input_dims: &[usize],
        vocab_size: usize,
        s: &mut ParamStore,
    ) -> Result<Parts, NnError> {
        cfg.validate()?;
        let want = match kind {
            ModelKind::Vanilla => 1,
            ModelKind::Bimodal => 2,
        };
        if input_dims.len() != want || input_dims.contains(&0) {
            return Err(NnError::Config(format!(
                "{} model needs {want} non-zero input widths, got {input_dims:?}",
                kind.name()
            )));
        }
        if vocab_size < 3 {
            return Err(NnError::Config(format!(
                "vocabulary of {vocab_size} is too small"
            )));
        }
        let (d, h, f) = (cfg.d_model, cfg.num_heads, cfg.d_ffn);
        let arch = match kind {
            ModelKind::Vanilla => {
                let input = Linear::new(s, "in", input_dims[0], d)?;
                let mut enc = Vec::new();
                for l in 0..cfg.num_layers {
                    let p = format!("enc.{l}");
                    enc.push(EncoderLayer {
                        ln_sa: LayerNorm::new(s, &format!("{p}.ln_sa"), d)?,
                        sa: MultiHeadAttention::new(s, &format!("{p}.sa"), d, h)?,
                        ln_ff: LayerNorm::new(s, &format!("{p}.ln_ff"), d)?,
                        ff: FeedForward::new(s, &format!("{p}.ff"), d, f)?,
                    });
                }
                let enc_ln = LayerNorm::new(s, "enc_ln", d)?;
                let mut dec = Vec::new();
                for l in 0..cfg.num_layers {
                    let p = format!("dec.{l}");
                    dec.push(DecoderLayer {
                        ln_sa: LayerNorm::new(s, &format!("{p}.ln_sa"), d)?,
                        sa: MultiHeadAttention::new(s, &format!("{p}.sa"), d, h)?,
                        ln_ca: LayerNorm::new(s, &format!("{p}.ln_ca"), d)?,
                        ca: MultiHeadAttention::new(s, &format!("{p}.ca"), d, h)?,
                        ln_ff: LayerNorm::new(s, &format!("{p}.ln_ff"), d)?,
                        ff: FeedForward::new(s, &format!("{p}.ff"), d, f)?,
                    });
                }
                Arch::Vanilla {
                    input,
                    enc,
                    enc_ln,
                    dec,
                }
            }
            ModelKind::Bimodal => {
                let input_v = Linear::new(s, "in_v", input_dims[0], d)?;
                let input_s = Linear::new(s, "in_s", input_dims[1], d)?;
                let mut enc = Vec::new();
                for l in 0..cfg.num_layers {
                    enc.push((
                        stream_layer(s, &format!("enc.{l}.v"), &cfg)?,
                        stream_layer(s, &format!("enc.{l}.s"), &cfg)?,
                    ));
                }
                let enc_ln_v = LayerNorm::new(s, "enc_ln_v", d)?;
                let enc_ln_s = LayerNorm::new(s, "enc_ln_s", d)?;
                let mut dec = Vec::new();
                for l in 0..cfg.num_layers {
                    let p = format!("dec.{l}");
                    dec.push(BimodalDecoderLayer {
                        ln_sa: LayerNorm::new(s, &format!("{p}.ln_sa"), d)?,
                        sa: MultiHeadAttention::new(s, &format!("{p}.sa"), d, h)?,
                        ln_ca: LayerNorm::new(s, &format!("{p}.ln_ca"), d)?,
                        ca_semantic: MultiHeadAttention::new(s, &format!("{p}.ca_s"), d, h)?,
                        ca_visual: MultiHeadAttention::new(s, &format!("{p}.ca_v"), d, h)?,
                        ln_bridge: LayerNorm::new(s, &format!("{p}.ln_bridge"), 2 * d)?,
                        bridge: Linear::new(s, &format!("{p}.bridge"), 2 * d, d)?,
                        ln_ff: LayerNorm::new(s, &format!("{p}.ln_ff"), d)?,
                        ff: FeedForward::new(s, &format!("{p}.ff"), d, f)?,
                    });
                }
                Arch::Bimodal {
                    input_v,
                    input_s,
                    enc,
                    enc_ln_v,
                    enc_ln_s,
                    dec,
                }
            }
        };
        Ok(Parts {
            kind,
            cfg,
            input_dims: input_dims.to_vec(),
            vocab_size,
            arch,
            embed: s.take("embed", vocab_size, d, Init::Xavier)?,
            dec_ln: LayerNorm::new(s, "dec_ln", d)?,
            generator: Linear::new(s, "generator", d, vocab_size)?,
        })
    }

    /// Width of the bridge input in each bi-modal decoder layer.
    pub fn bridge_width(&self) -> Option<usize> {
        match &self.arch {
            Arch::Bimodal { dec, .. } => Some(dec[0].bridge.d_in(&self.params)),
            Arch::Vanilla { .. } => None,
        }
    }

    fn embed_input(
        &self,
        g: &mut Graph,
        input: Linear,
        x: &Array2<f64>,
        drop: &mut Dropout,
    ) -> Result<Var, NnError> {
        if x.nrows() == 0 {
            return Err(NnError::Empty("encoder input"));
        }
        let want = input.d_in(&self.params);
        if x.ncols() != want {
            return Err(NnError::Shape(format!(
                "input has {} features, model expects {want}",
                x.ncols()
            )));
        }
        let xv = g.constant(x.clone());
        let h = input.forward(g, xv);
        let pe = g.constant(positional_encoding(x.nrows(), self.cfg.d_model));
        let h = g.add(h, pe);
        Ok(drop.apply(g, h))
    }

    fn residual(g: &mut Graph, x: Var, f: Var, drop: &mut Dropout) -> Var {
        let f = drop.apply(g, f);
        g.add(x, f)
    }

    pub fn encode_graph(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        drop: &mut Dropout,
    ) -> Result<Memory, NnError> {
        match (&self.arch, input) {
            (
                Arch::Vanilla {
                    input: lin,
                    enc,
                    enc_ln,
                    ..
                },
                ModelInput::Single(x),
            ) => {
                let mut x = self.embed_input(g, *lin, x, drop)?;
                for layer in enc {
                    let n = layer.ln_sa.forward(g, x);
                    let a = layer.sa.forward(g, n, n, None)?;
                    x = Self::residual(g, x, a, drop);
                    let n = layer.ln_ff.forward(g, x);
                    let f = layer.ff.forward(g, n, drop);
                    x = Self::residual(g, x, f, drop);
                }
                Ok(Memory::Single(enc_ln.forward(g, x)))
            }
            (
                Arch::Bimodal {
                    input_v,
                    input_s,
                    enc,
                    enc_ln_v,
                    enc_ln_s,
                    ..
                },
                ModelInput::Pair { visual, semantic },
            ) => {
                let mut v = self.embed_input(g, *input_v, visual, drop)?;
                let mut s = self.embed_input(g, *input_s, semantic, drop)?;
                for (lv, ls) in enc {
                    let nv = lv.ln_sa.forward(g, v);
                    let av = lv.sa.forward(g, nv, nv, None)?;
                    v = Self::residual(g, v, av, drop);
                    let ns = ls.ln_sa.forward(g, s);
                    let a_s = ls.sa.forward(g, ns, ns, None)?;
                    s = Self::residual(g, s, a_s, drop);

                    let qv = lv.ln_cross.forward(g, v);
                    let qs = ls.ln_cross.forward(g, s);
                    let cv = lv.cross.forward(g, qv, qs, None)?;
                    let cs = ls.cross.forward(g, qs, qv, None)?;
                    v = Self::residual(g, v, cv, drop);
                    s = Self::residual(g, s, cs, drop);

                    let nv = lv.ln_ff.forward(g, v);
                    let fv = lv.ff.forward(g, nv, drop);
                    v = Self::residual(g, v, fv, drop);
                    let ns = ls.ln_ff.forward(g, s);
                    let fs = ls.ff.forward(g, ns, drop);
                    s = Self::residual(g, s, fs, drop);
                }
                Ok(Memory::Pair {
                    visual: enc_ln_v.forward(g, v),
                    semantic: enc_ln_s.forward(g, s),
                })
            }
            _ => Err(NnError::WrongInput(self.kind.name())),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), NnError> {
        if tokens.is_empty() {
            return Err(NnError::Empty("decoder tokens"));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(NnError::TooLong {
                len: tokens.len(),
                max: self.cfg.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(NnError::TokenOutOfRange {
                id,
                size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits (one row per input token) for next-token prediction.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        memory: &Memory,
        drop: &mut Dropout,
    ) -> Result<Var, NnError> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.cfg.d_model;
        let table = g.param(self.embed);
        let e = g.gather_rows(table, tokens);
        let e = g.scale(e, (d as f64).sqrt());
        let pe = g.constant(positional_encoding(n, d));
        let y0 = g.add(e, pe);
        let mut y = drop.apply(g, y0);
        let mask = causal_mask(n);

        match (&self.arch, memory) {
            (Arch::Vanilla { dec, .. }, Memory::Single(mem)) => {
                for layer in dec {
                    let q = layer.ln_sa.forward(g, y);
                    let a = layer.sa.forward(g, q, q, Some(&mask))?;
                    y = Self::residual(g, y, a, drop);
                    let q = layer.ln_ca.forward(g, y);
                    let c = layer.ca.forward(g, q, *mem, None)?;
                    y = Self::residual(g, y, c, drop);
                    let q = layer.ln_ff.forward(g, y);
                    let f = layer.ff.forward(g, q, drop);
                    y = Self::residual(g, y, f, drop);
                }
            }
            (Arch::Bimodal { dec, .. }, Memory::Pair { visual, semantic }) => {
                for layer in dec {
                    let q = layer.ln_sa.forward(g, y);
                    let a = layer.sa.forward(g, q, q, Some(&mask))?;
                    y = Self::residual(g, y, a, drop);
                    let q = layer.ln_ca.forward(g, y);
                    let cs = layer.ca_semantic.forward(g, q, *semantic, None)?;
                    let cv = layer.ca_visual.forward(g, q, *visual, None)?;
                    let cat = g.concat_cols(&[cs, cv]);
                    let nb = layer.ln_bridge.forward(g, cat);
                    let b = layer.bridge.forward(g, nb);
                    let b = g.relu(b);
                    y = Self::residual(g, y, b, drop);
                    let q = layer.ln_ff.forward(g, y);
                    let f = layer.ff.forward(g, q, drop);
                    y = Self::residual(g, y, f, drop);
                }
            }
            _ => return Err(NnError::WrongInput(self.kind.name())),
        }
        let y = self.dec_ln.forward(g, y);
        Ok(self.generator.forward(g, y))
    }

    /// Eval-mode encoding.
    pub fn encode(&self, input: &ModelInput) -> Result<Encoded, NnError> {
        let mut g = Graph::new(&self.params);
        let m = self.encode_graph(&mut g, input, &mut Dropout::eval())?;
        Ok(m.values(&g))
    }

    /// Eval-mode logits for `tokens` given an encoding.
    pub fn decode(&self, tokens: &[usize], enc: &Encoded) -> Result<Array2<f64>, NnError> {
        let mut g = Graph::new(&self.params);
        let m = Memory::constant(&mut g, enc);
        let y = self.decode_graph(&mut g, tokens, &m, &mut Dropout::eval())?;
        Ok(g.value(y).clone())
    }

    /// Label-smoothed loss of one caption under teacher forcing.
    pub fn caption_loss(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        caption: &[usize],
        drop: &mut Dropout,
    ) -> Result<Var, NnError> {
        let (inp, target) = teacher_forcing(caption);
        let mem = self.encode_graph(g, input, drop)?;
        let logits = self.decode_graph(g, &inp, &mem, drop)?;
        label_smoothed_kl_graph(g, logits, &target, self.cfg.smoothing, PAD)
    }
}

struct Parts {
    kind: ModelKind,
    cfg: TransformerConfig,
    input_dims: Vec<usize>,
    vocab_size: usize,
    arch: Arch,
    embed: ParamId,
    dec_ln: LayerNorm,
    generator: Linear,
}

impl Parts {
    fn with_params(self, params: ParamSet) -> CaptionModel {
        CaptionModel {
            kind: self.kind,
            cfg: self.cfg,
            input_dims: self.input_dims,
            vocab_size: self.vocab_size,
            params,
            arch: self.arch,
            embed: self.embed,
            dec_ln: self.dec_ln,
            generator: self.generator,
        }
    }
}

/// Decoder input `[BOS, y…]` and target `[y…, EOS]`.
pub fn teacher_forcing(caption: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inp = Vec::with_capacity(caption.len() + 1);
    inp.push(BOS);
    inp.extend_from_slice(caption);
    let mut target = caption.to_vec();
    target.push(EOS);
    (inp, target)
}

/// Smoothed target rows: 1−γ on the true token, γ/(|V|−2) on every other
/// non-pad token; pad-target rows are all zero.
fn smoothed_targets(
    vocab: usize,
    targets: &[usize],
    gamma: f64,
    pad: usize,
) -> Result<(Array2<f64>, usize), NnError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(NnError::Config(format!("smoothing {gamma} outside [0, 1)")));
    }
    if vocab < 3 {
        return Err(NnError::Config(format!(
            "vocabulary of {vocab} is too small"
        )));
    }
    let off = gamma / (vocab - 2) as f64;
    let mut t = Array2::zeros((targets.len(), vocab));
    let mut live = 0;
    for (r, &y) in targets.iter().enumerate() {
        if y >= vocab {
            return Err(NnError::TokenOutOfRange { id: y, size: vocab });
        }
        if y == pad {
            continue;
        }
        live += 1;
        let mut row = t.row_mut(r);
        row.fill(off);
        row[pad] = 0.0;
        row[y] = 1.0 - gamma;
    }
    if live == 0 {
        return Err(NnError::AllPad);
    }
    Ok((t, live))
}

/// KL(smoothed target ‖ softmax(logits)) averaged over non-pad positions.
pub fn label_smoothed_kl_graph(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    gamma: f64,
    pad: usize,
) -> Result<Var, NnError> {
    let (n, v) = g.value(logits).dim();
    if n != targets.len() {
        return Err(NnError::Shape(format!(
            "{n} logit rows for {} targets",
            targets.len()
        )));
    }
    let (t, live) = smoothed_targets(v, targets, gamma, pad)?;
    let entropy_term: f64 = t.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let logp = g.log_softmax_rows(logits);
    let cross = g.weighted_sum(logp, t.mapv(|p| -p / live as f64));
    let c = g.constant(Array2::from_elem((1, 1), entropy_term / live as f64));
    Ok(g.add(cross, c))
}

pub fn label_smoothed_kl(
    logits: &Array2<f64>,
    targets: &[usize],
    gamma: f64,
    pad: usize,
) -> Result<f64, NnError> {
    let empty = ParamSet::new();
    let mut g = Graph::new(&empty);
    let l = g.constant(logits.clone());
    let loss = label_smoothed_kl_graph(&mut g, l, targets, gamma, pad)?;
    Ok(g.scalar(loss))
}

/// Everything needed to rebuild a saved captioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: ModelKind,
    pub config: TransformerConfig,
    pub input_dims: Vec<usize>,
    pub vocabulary: Vocabulary,
    pub seed: u64,
    pub best_valid_score: Option<f64>,
}

const MODEL_FILE: &str = "model.json";

pub fn save_model(
    dir: &Path,
    model: &CaptionModel,
    manifest: &ModelManifest,
) -> Result<(), NnError> {
    model.params.save(&dir.join("params"))?;
    let path = dir.join(MODEL_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| json_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn load_model(dir: &Path) -> Result<(CaptionModel, ModelManifest), NnError> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: ModelManifest = serde_json::from_str(&text).map_err(|e| json_err(&path, e))?;
    let params = ParamSet::load(&dir.join("params"))?;
    let model =
        CaptionModel::from_params(m.kind, m.config, &m.input_dims, m.vocabulary.len(), params)?;
    Ok((model, m))
}

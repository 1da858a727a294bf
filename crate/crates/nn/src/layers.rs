//! Transformer building blocks, both as graph layers and as plain array
//! functions for inspection.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::NnError;
use crate::params::{Init, ParamId, ParamSet, ParamStore};
use crate::tape::{Graph, Var};

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same angle).
pub fn positional_encoding(n: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d_model), |(pos, c)| {
        let i2 = (c - c % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `allowed[[q, k]]` is true when query q may attend key k (k ≤ q).
pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(q, k)| k <= q)
}

/// Inverted dropout; a no-op without an RNG or at rate 0.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let mask = Array2::from_shape_simple_fn(g.value(x).dim(), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.mul_const(x, mask)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            w: store.take(&format!("{name}.w"), d_in, d_out, Init::Xavier)?,
            b: store.take(&format!("{name}.b"), 1, d_out, Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn d_in(&self, params: &ParamSet) -> usize {
        params.get(self.w).nrows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self, NnError> {
        Ok(Self {
            gamma: store.take(&format!("{name}.gamma"), 1, d, Init::Ones)?,
            beta: store.take(&format!("{name}.beta"), 1, d, Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Scaled dot-product attention of already-projected q, k, v split into
/// `heads` equal column blocks; head outputs are concatenated.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    allowed: Option<&Array2<bool>>,
) -> Result<Var, NnError> {
    let (nq, d) = g.value(q).dim();
    let (nk, dk_all) = g.value(k).dim();
    let (nv, dv_all) = g.value(v).dim();
    if dk_all != d || nv != nk || heads == 0 || d % heads != 0 || dv_all % heads != 0 {
        return Err(NnError::Shape(format!(
            "q {:?}, k {:?}, v {:?}, heads {heads}",
            (nq, d),
            (nk, dk_all),
            (nv, dv_all)
        )));
    }
    if nk == 0 {
        return Err(NnError::Empty("attention keys"));
    }
    let dk = d / heads;
    let dv = dv_all / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dk, dk),
                g.slice_cols(k, h * dk, dk),
                g.slice_cols(v, h * dv, dv),
            )
        };
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores, allowed)?;
        outs.push(g.matmul(probs, vh));
    }
    Ok(if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model)?,
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        memory: Var,
        allowed: Option<&Array2<bool>>,
    ) -> Result<Var, NnError> {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let a = attend(g, q, k, v, self.heads, allowed)?;
        Ok(self.o.forward(g, a))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ffn: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_model, d_ffn)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_ffn, d_model)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        let h = drop.apply(g, h);
        self.l2.forward(g, h)
    }
}

/// softmax(QKᵀ/√d_k)·V with `allowed` masking.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    allowed: Option<&Array2<bool>>,
) -> Result<Array2<f64>, NnError> {
    let empty = ParamSet::new();
    let mut g = Graph::new(&empty);
    let (q, k, v) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let y = attend(&mut g, q, k, v, 1, allowed)?;
    Ok(g.value(y).clone())
}

/// Projection matrices of one attention block, without biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl AttentionWeights {
    pub fn identity(d_model: usize) -> Self {
        let eye = Array2::eye(d_model);
        Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        }
    }
}

/// [head_1, …, head_h]·W⁰ with head_i = Att(Q W_iᵠ, K W_iᴷ, V W_iⱽ); the
/// per-head projections are the column blocks of `wq`, `wk`, `wv`.
pub fn multi_head_attention(
    w: &AttentionWeights,
    heads: usize,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    allowed: Option<&Array2<bool>>,
) -> Result<Array2<f64>, NnError> {
    let d = w.wq.nrows();
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if m.ncols() != d {
            return Err(NnError::Shape(format!(
                "{name} has {} columns, expected {d}",
                m.ncols()
            )));
        }
    }
    if w.wo.nrows() != w.wv.ncols() {
        return Err(NnError::Shape("W⁰ rows must equal value width".into()));
    }
    let empty = ParamSet::new();
    let mut g = Graph::new(&empty);
    let mut c = |a: &Array2<f64>| g.constant(a.clone());
    let (q, k, v) = (c(q), c(k), c(v));
    let (wq, wk, wv, wo) = (c(&w.wq), c(&w.wk), c(&w.wv), c(&w.wo));
    let qp = g.matmul(q, wq);
    let kp = g.matmul(k, wk);
    let vp = g.matmul(v, wv);
    let a = attend(&mut g, qp, kp, vp, heads, allowed)?;
    let y = g.matmul(a, wo);
    Ok(g.value(y).clone())
}

/// max(0, uW₁ + b₁)W₂ + b₂ row by row.
pub fn ffn(
    w1: &Array2<f64>,
    b1: &Array2<f64>,
    w2: &Array2<f64>,
    b2: &Array2<f64>,
    u: &Array2<f64>,
) -> Result<Array2<f64>, NnError> {
    if u.ncols() != w1.nrows()
        || b1.dim() != (1, w1.ncols())
        || w2.nrows() != w1.ncols()
        || b2.dim() != (1, w2.ncols())
    {
        return Err(NnError::Shape(format!(
            "u {:?}, W1 {:?}, b1 {:?}, W2 {:?}, b2 {:?}",
            u.dim(),
            w1.dim(),
            b1.dim(),
            w2.dim(),
            b2.dim()
        )));
    }
    let h = (u.dot(w1) + b1).mapv(|x| x.max(0.0));
    Ok(h.dot(w2) + b2)
}

//! Dense cluster embeddings fitted to log co-occurrence counts by weighted
//! least squares, and the per-clip semantic descriptor built from them.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, CodebookError};
use crate::cooccur::{CooccurrenceEntry, CooccurrenceMatrix};
use crate::dataset::{read_matrix_f64, write_matrix_f64, DatasetError, FeatureSequence};

#[derive(Debug, Error)]
pub enum SemvecError {
    #[error("weight is undefined for negative count {0}")]
    NegativeCount(f64),
    #[error("co-occurrence matrix has no nonzero entries")]
    EmptyMatrix,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("malformed embedding metadata: {0}")]
    BadMetadata(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GloveHyper {
    pub t_max: f64,
    pub alpha: f64,
    pub lr: f64,
    pub max_iters: usize,
    pub early_stop_patience: usize,
    pub d_emb: usize,
    pub seed: u64,
}

impl Default for GloveHyper {
    fn default() -> Self {
        Self {
            t_max: 100.0,
            alpha: 0.75,
            lr: 0.05,
            max_iters: 1500,
            early_stop_patience: 100,
            d_emb: 128,
            seed: 0,
        }
    }
}

impl GloveHyper {
    pub fn validate(&self) -> Result<(), SemvecError> {
        let bad = |m: &str| Err(SemvecError::InvalidHyper(m.into()));
        if !(self.t_max > 0.0) {
            return bad("t_max must be > 0");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.d_emb == 0 {
            return bad("d_emb must be >= 1");
        }
        Ok(())
    }
}

/// Cluster vectors `w`, context vectors `w_tilde` and their biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub w: Array2<f64>,
    pub w_tilde: Array2<f64>,
    pub b: Array1<f64>,
    pub b_tilde: Array1<f64>,
}

impl EmbeddingParams {
    pub fn zeros(k: usize, d_emb: usize) -> Self {
        Self {
            w: Array2::zeros((k, d_emb)),
            w_tilde: Array2::zeros((k, d_emb)),
            b: Array1::zeros(k),
            b_tilde: Array1::zeros(k),
        }
    }

    /// Uniform in `[-0.5 / d_emb, 0.5 / d_emb]`.
    pub fn init(k: usize, d_emb: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 0.5 / d_emb as f64;
        let mut u = || rng.random_range(-r..=r);
        Self {
            w: Array2::from_shape_simple_fn((k, d_emb), &mut u),
            w_tilde: Array2::from_shape_simple_fn((k, d_emb), &mut u),
            b: Array1::from_shape_simple_fn(k, &mut u),
            b_tilde: Array1::from_shape_simple_fn(k, &mut u),
        }
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_emb(&self) -> usize {
        self.w.ncols()
    }

    fn check(&self, entries: &[CooccurrenceEntry]) -> Result<(), SemvecError> {
        let k = self.k();
        if self.w_tilde.dim() != self.w.dim() || self.b.len() != k || self.b_tilde.len() != k {
            return Err(SemvecError::DimensionMismatch(
                "parameter blocks disagree".into(),
            ));
        }
        if let Some(e) = entries.iter().find(|e| e.i >= k || e.j >= k) {
            return Err(SemvecError::DimensionMismatch(format!(
                "entry ({}, {}) outside vocabulary of {k}",
                e.i, e.j
            )));
        }
        Ok(())
    }

    fn residual(&self, e: &CooccurrenceEntry) -> f64 {
        self.w.row(e.i).dot(&self.w_tilde.row(e.j)) + self.b[e.i] + self.b_tilde[e.j] - e.value.ln()
    }

    /// Context and cluster roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            w: self.w_tilde.clone(),
            w_tilde: self.w.clone(),
            b: self.b_tilde.clone(),
            b_tilde: self.b.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w
            .iter()
            .chain(&self.w_tilde)
            .chain(&self.b)
            .chain(&self.b_tilde)
            .all(|v| v.is_finite())
    }

    /// The semantic descriptor of cluster `label`.
    pub fn descriptor(&self, label: usize) -> ArrayView1<'_, f64> {
        self.w.row(label)
    }
}

/// `(t / t_max)^alpha` below `t_max`, 1 otherwise.
pub fn weight(t: f64, t_max: f64, alpha: f64) -> Result<f64, SemvecError> {
    if t < 0.0 || t.is_nan() {
        return Err(SemvecError::NegativeCount(t));
    }
    Ok(if t < t_max {
        (t / t_max).powf(alpha)
    } else {
        1.0
    })
}

/// `J = sum f(Z_ij) (w_i . w~_j + b_i + b~_j - ln Z_ij)^2` over nonzero cells.
pub fn glove_loss_entries(
    p: &EmbeddingParams,
    entries: &[CooccurrenceEntry],
    h: &GloveHyper,
) -> Result<f64, SemvecError> {
    p.check(entries)?;
    let mut j = 0.0;
    for e in entries.iter().filter(|e| e.value > 0.0) {
        let r = p.residual(e);
        j += weight(e.value, h.t_max, h.alpha)? * r * r;
    }
    Ok(j)
}

pub fn glove_loss(
    p: &EmbeddingParams,
    z: &CooccurrenceMatrix,
    h: &GloveHyper,
) -> Result<f64, SemvecError> {
    glove_loss_entries(p, &z.entries(), h)
}

/// Loss and its exact gradient with respect to every parameter block.
pub fn glove_gradient(
    p: &EmbeddingParams,
    entries: &[CooccurrenceEntry],
    h: &GloveHyper,
) -> Result<(f64, EmbeddingParams), SemvecError> {
    p.check(entries)?;
    let mut g = EmbeddingParams::zeros(p.k(), p.d_emb());
    let mut j = 0.0;
    for e in entries.iter().filter(|e| e.value > 0.0) {
        let r = p.residual(e);
        let f = weight(e.value, h.t_max, h.alpha)?;
        j += f * r * r;
        let s = 2.0 * f * r;
        g.w.row_mut(e.i).scaled_add(s, &p.w_tilde.row(e.j));
        g.w_tilde.row_mut(e.j).scaled_add(s, &p.w.row(e.i));
        g.b[e.i] += s;
        g.b_tilde[e.j] += s;
    }
    Ok((j, g))
}

/// Result of [`train_embeddings`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEmbeddings {
    pub params: EmbeddingParams,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Completed passes over the nonzero cells.
    pub iterations: usize,
}

pub fn train_embeddings(
    z: &CooccurrenceMatrix,
    h: &GloveHyper,
) -> Result<TrainedEmbeddings, SemvecError> {
    train_on_entries(z.k, &z.entries(), h)
}

/// Adagrad over shuffled passes of the nonzero cells. Returns the parameters
/// with the lowest loss seen, including the initial ones.
pub fn train_on_entries(
    k: usize,
    entries: &[CooccurrenceEntry],
    h: &GloveHyper,
) -> Result<TrainedEmbeddings, SemvecError> {
    h.validate()?;
    let entries: Vec<CooccurrenceEntry> =
        entries.iter().copied().filter(|e| e.value > 0.0).collect();
    if entries.is_empty() {
        return Err(SemvecError::EmptyMatrix);
    }
    let mut p = EmbeddingParams::init(k, h.d_emb, h.seed);
    p.check(&entries)?;
    let weights: Vec<f64> = entries
        .iter()
        .map(|e| weight(e.value, h.t_max, h.alpha))
        .collect::<Result<_, _>>()?;
    let mut order: Vec<usize> = (0..entries.len()).collect();

    // Adagrad accumulators start at 1.
    let mut acc = EmbeddingParams {
        w: Array2::ones(p.w.dim()),
        w_tilde: Array2::ones(p.w.dim()),
        b: Array1::ones(k),
        b_tilde: Array1::ones(k),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed.wrapping_add(1));
    let initial_loss = glove_loss_entries(&p, &entries, h)?;
    let mut best = (initial_loss, p.clone());
    let mut since_best = 0;
    let mut iterations = 0;
    let d = h.d_emb;
    let mut gw = vec![0.0; d];
    let mut gwt = vec![0.0; d];

    for _ in 0..h.max_iters {
        order.shuffle(&mut rng);
        for &n in &order {
            let e = &entries[n];
            let (i, j) = (e.i, e.j);
            let s = 2.0 * weights[n] * p.residual(e);
            for c in 0..d {
                gw[c] = s * p.w_tilde[[j, c]];
                gwt[c] = s * p.w[[i, c]];
            }
            for c in 0..d {
                acc.w[[i, c]] += gw[c] * gw[c];
                p.w[[i, c]] -= h.lr * gw[c] / acc.w[[i, c]].sqrt();
                acc.w_tilde[[j, c]] += gwt[c] * gwt[c];
                p.w_tilde[[j, c]] -= h.lr * gwt[c] / acc.w_tilde[[j, c]].sqrt();
            }
            acc.b[i] += s * s;
            p.b[i] -= h.lr * s / acc.b[i].sqrt();
            acc.b_tilde[j] += s * s;
            p.b_tilde[j] -= h.lr * s / acc.b_tilde[j].sqrt();
        }
        iterations += 1;
        let loss = glove_loss_entries(&p, &entries, h)?;
        if !loss.is_finite() {
            break;
        }
        if loss < best.0 {
            best = (loss, p.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= h.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainedEmbeddings {
        params: best.1,
        initial_loss,
        best_loss: best.0,
        iterations,
    })
}

/// `w[assign(cb, x)]`
pub fn descriptor_for_clip(
    p: &EmbeddingParams,
    cb: &Codebook,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>, SemvecError> {
    if cb.k() != p.k() {
        return Err(SemvecError::DimensionMismatch(format!(
            "codebook has {} clusters, embeddings have {}",
            cb.k(),
            p.k()
        )));
    }
    Ok(p.descriptor(cb.assign(x)?).to_owned())
}

/// Descriptor of every clip of a sequence, `L x d_emb`.
pub fn semantic_sequence(
    p: &EmbeddingParams,
    cb: &Codebook,
    fs: &FeatureSequence,
) -> Result<Array2<f64>, SemvecError> {
    if cb.k() != p.k() {
        return Err(SemvecError::DimensionMismatch(format!(
            "codebook has {} clusters, embeddings have {}",
            cb.k(),
            p.k()
        )));
    }
    let labels = cb.encode_sequence(fs)?.labels;
    let mut out = Array2::zeros((labels.len(), p.d_emb()));
    for (row, l) in out.rows_mut().into_iter().zip(labels) {
        let mut row = row;
        row.assign(&p.descriptor(l));
    }
    Ok(out)
}

/// `[vis ; sm]`
pub fn build_clip_features(vis: ArrayView1<f64>, sm: ArrayView1<f64>) -> Array1<f64> {
    concatenate(Axis(0), &[vis, sm]).expect("1-D concatenation")
}

/// Row-wise [`build_clip_features`] over a whole sequence.
pub fn build_sequence_features(
    vis: &Array2<f64>,
    sm: &Array2<f64>,
) -> Result<Array2<f64>, SemvecError> {
    if vis.nrows() != sm.nrows() {
        return Err(SemvecError::DimensionMismatch(format!(
            "{} visual rows vs {} semantic rows",
            vis.nrows(),
            sm.nrows()
        )));
    }
    Ok(concatenate(Axis(1), &[vis.view(), sm.view()]).expect("row counts checked"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub k: usize,
    pub d_emb: usize,
    pub hyper: GloveHyper,
    pub final_loss: f64,
    pub iterations: usize,
}

pub fn save_embeddings(
    dir: &Path,
    p: &EmbeddingParams,
    meta: &EmbeddingMeta,
) -> Result<(), SemvecError> {
    fs::create_dir_all(dir)?;
    write_matrix_f64(&dir.join("w.dvcf"), &p.w)?;
    write_matrix_f64(&dir.join("w_tilde.dvcf"), &p.w_tilde)?;
    write_matrix_f64(&dir.join("b.dvcf"), &p.b.clone().insert_axis(Axis(1)))?;
    write_matrix_f64(
        &dir.join("b_tilde.dvcf"),
        &p.b_tilde.clone().insert_axis(Axis(1)),
    )?;
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(dir.join("embed.json"), text)?;
    Ok(())
}

pub fn load_embeddings(dir: &Path) -> Result<(EmbeddingParams, EmbeddingMeta), SemvecError> {
    let column = |name: &str| -> Result<Array1<f64>, SemvecError> {
        let m = read_matrix_f64(&dir.join(name))?;
        if m.ncols() != 1 {
            return Err(SemvecError::DimensionMismatch(format!(
                "{name} must be a column"
            )));
        }
        Ok(m.column(0).to_owned())
    };
    let p = EmbeddingParams {
        w: read_matrix_f64(&dir.join("w.dvcf"))?,
        w_tilde: read_matrix_f64(&dir.join("w_tilde.dvcf"))?,
        b: column("b.dvcf")?,
        b_tilde: column("b_tilde.dvcf")?,
    };
    p.check(&[])?;
    let meta: EmbeddingMeta = serde_json::from_str(&fs::read_to_string(dir.join("embed.json"))?)
        .map_err(|e| SemvecError::BadMetadata(e.to_string()))?;
    if (meta.k, meta.d_emb) != p.w.dim() {
        return Err(SemvecError::BadMetadata(
            "shape disagrees with matrices".into(),
        ));
    }
    Ok((p, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn entry(i: usize, j: usize, value: f64) -> CooccurrenceEntry {
        CooccurrenceEntry { i, j, value }
    }

    #[test]
    fn weight_spot_values() {
        assert_eq!(weight(0.0, 100.0, 0.75).unwrap(), 0.0);
        assert_eq!(weight(100.0, 100.0, 0.75).unwrap(), 1.0);
        assert_eq!(weight(250.0, 100.0, 0.75).unwrap(), 1.0);
        assert!((weight(1.0, 100.0, 0.75).unwrap() - 10f64.powf(-1.5)).abs() < 1e-12);
        assert!(matches!(
            weight(-1.0, 100.0, 0.75),
            Err(SemvecError::NegativeCount(_))
        ));
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        let mut p = EmbeddingParams::zeros(2, 1);
        p.w[[0, 0]] = 1.0;
        p.w_tilde[[1, 0]] = 2.0;
        p.b[0] = 0.5;
        p.b_tilde[1] = 7f64.ln() - 2.5;
        let j = glove_loss_entries(&p, &[entry(0, 1, 7.0)], &GloveHyper::default()).unwrap();
        assert!(j.abs() < 1e-24);
    }

    #[test]
    fn saturated_weight_gives_squared_residual() {
        let mut p = EmbeddingParams::zeros(2, 1);
        p.b[0] = 100f64.ln() + 0.3;
        let j = glove_loss_entries(&p, &[entry(0, 1, 100.0)], &GloveHyper::default()).unwrap();
        assert!((j - 0.09).abs() < 1e-12);
    }

    #[test]
    fn two_pair_hand_sum() {
        let p = EmbeddingParams {
            w: array![[1.0, 0.0], [0.5, 2.0]],
            w_tilde: array![[0.0, 1.0], [1.0, -1.0]],
            b: array![0.1, -0.2],
            b_tilde: array![0.3, 0.0],
        };
        let h = GloveHyper::default();
        // (0,1): 1*1 + 0*(-1) + 0.1 + 0 - ln 10 ; weight (10/100)^0.75
        // (1,0): 0.5*0 + 2*1 - 0.2 + 0.3 - ln 200 ; weight 1
        let r1: f64 = 1.1 - 10f64.ln();
        let r2: f64 = 2.1 - 200f64.ln();
        let expected = 0.1f64.powf(0.75) * r1 * r1 + r2 * r2;
        let j = glove_loss_entries(&p, &[entry(0, 1, 10.0), entry(1, 0, 200.0)], &h).unwrap();
        assert!((j - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_cells_are_skipped() {
        let p = EmbeddingParams::init(3, 4, 1);
        let h = GloveHyper::default();
        let a = glove_loss_entries(&p, &[entry(0, 1, 3.0)], &h).unwrap();
        let b = glove_loss_entries(&p, &[entry(0, 1, 3.0), entry(2, 2, 0.0)], &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_pair_converges_to_log_count() {
        let e = std::f64::consts::E;
        let h = GloveHyper {
            d_emb: 1,
            seed: 3,
            ..Default::default()
        };
        let out = train_on_entries(2, &[entry(0, 1, e), entry(1, 0, e)], &h).unwrap();
        let p = &out.params;
        let r = p.w[[0, 0]] * p.w_tilde[[1, 0]] + p.b[0] + p.b_tilde[1] - 1.0;
        assert!(r.abs() < 1e-2, "residual {r}");
        assert!(out.best_loss <= out.initial_loss);
    }

    #[test]
    fn empty_matrix_rejected() {
        let z = CooccurrenceMatrix::empty(3, 5);
        assert!(matches!(
            train_embeddings(&z, &GloveHyper::default()),
            Err(SemvecError::EmptyMatrix)
        ));
    }

    #[test]
    fn swap_symmetry() {
        let p = EmbeddingParams::init(4, 3, 9);
        let entries = [
            entry(0, 1, 4.0),
            entry(1, 0, 4.0),
            entry(2, 3, 150.0),
            entry(3, 2, 150.0),
        ];
        let h = GloveHyper::default();
        let a = glove_loss_entries(&p, &entries, &h).unwrap();
        let transposed: Vec<_> = entries.iter().map(|e| entry(e.j, e.i, e.value)).collect();
        let b = glove_loss_entries(&p.swapped(), &transposed, &h).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn descriptor_and_concatenation() {
        let cb = Codebook::new(array![[0.0, 0.0], [5.0, 5.0]]).unwrap();
        let mut p = EmbeddingParams::zeros(2, 3);
        p.w.row_mut(1).assign(&array![0.1, 0.2, 0.3]);
        let d = descriptor_for_clip(&p, &cb, array![5.0, 5.0].view()).unwrap();
        assert_eq!(d, array![0.1, 0.2, 0.3]);
        let d2 = descriptor_for_clip(&p, &cb, array![4.0, 4.5].view()).unwrap();
        assert_eq!(d, d2);

        let vis = Array1::<f64>::zeros(1024);
        let sm = Array1::<f64>::from_elem(128, 0.5);
        let v = build_clip_features(vis.view(), sm.view());
        assert_eq!(v.len(), 1152);
        assert!(v.slice(ndarray::s![..1024]).iter().all(|&x| x == 0.0));
        assert_eq!(v.slice(ndarray::s![1024..]), sm);
    }

    #[test]
    fn default_descriptor_width() {
        assert_eq!(GloveHyper::default().d_emb, 128);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = EmbeddingParams::init(5, 4, 2);
        let meta = EmbeddingMeta {
            k: 5,
            d_emb: 4,
            hyper: GloveHyper::default(),
            final_loss: 1.5,
            iterations: 3,
        };
        save_embeddings(dir.path(), &p, &meta).unwrap();
        let (q, m) = load_embeddings(dir.path()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(q.w.mapv(|v| v as f32), p.w.mapv(|v| v as f32));
        assert_eq!(q.b_tilde.len(), 5);
    }
}

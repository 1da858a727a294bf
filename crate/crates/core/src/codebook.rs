//! Visual vocabulary learned with mini-batch k-means.
//!
//! Each batch is assigned with the centers as they were at the start of the
//! batch, then every center moves toward its batch members with a per-center
//! rate of `1 / count`, where `count` accumulates all assignments so far. The
//! per-point sequential form of that rule and the per-center reduction used
//! here give the same result. When a batch covers the whole data set the
//! counts restart every epoch, so each epoch is one Lloyd iteration.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cooccur::LabelSequence;
use crate::dataset::{read_matrix_f64, write_matrix_f64, DatasetError, FeatureSequence};

pub const DEFAULT_K: usize = 1500;
pub const DEFAULT_EPOCHS: usize = 5;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("need at least k={k} samples, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("dimension mismatch: codebook has {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid k-means parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite value in input features")]
    NonFinite,
    #[error("malformed codebook metadata: {0}")]
    BadMetadata(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            epochs: DEFAULT_EPOCHS,
            batch_size: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `k x d_vis`
    pub centers: Array2<f64>,
    pub seed: u64,
    pub epochs: usize,
}

/// Inertia before the first update and after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub initial_inertia: f64,
    pub epoch_inertia: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_all(centers: ArrayView2<f64>, data: ArrayView2<f64>, idx: &[usize]) -> Vec<(usize, f64)> {
    idx.par_iter()
        .map(|&i| nearest(centers, data.row(i)))
        .collect()
}

impl Codebook {
    pub fn new(centers: Array2<f64>) -> Result<Self, CodebookError> {
        if centers.nrows() == 0 || centers.ncols() == 0 {
            return Err(CodebookError::InvalidParams("empty codebook".into()));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(CodebookError::NonFinite);
        }
        Ok(Self {
            centers,
            seed: 0,
            epochs: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    fn check_dim(&self, found: usize) -> Result<(), CodebookError> {
        if found != self.dim() {
            return Err(CodebookError::DimensionMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }

    /// Nearest center by squared Euclidean distance, lowest index on ties.
    pub fn assign(&self, x: ArrayView1<f64>) -> Result<usize, CodebookError> {
        self.check_dim(x.len())?;
        Ok(nearest(self.centers.view(), x).0)
    }

    pub fn assign_f32(&self, x: ArrayView1<f32>) -> Result<usize, CodebookError> {
        self.assign(x.mapv(f64::from).view())
    }

    pub fn encode_sequence(&self, fs: &FeatureSequence) -> Result<LabelSequence, CodebookError> {
        self.check_dim(fs.dim())?;
        let feats = fs.features_f64();
        let labels = feats
            .rows()
            .into_iter()
            .map(|r| nearest(self.centers.view(), r).0)
            .collect();
        Ok(LabelSequence {
            video_id: fs.video_id.clone(),
            labels,
        })
    }

    /// Sum of squared distances from each row of `features` to its nearest center.
    pub fn inertia(&self, features: ArrayView2<f64>) -> Result<f64, CodebookError> {
        self.check_dim(features.ncols())?;
        let idx: Vec<usize> = (0..features.nrows()).collect();
        Ok(assign_all(self.centers.view(), features, &idx)
            .iter()
            .map(|(_, d)| d)
            .sum())
    }

    /// Writes `centers.dvcf` and `codebook.meta` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CodebookError> {
        fs::create_dir_all(dir)?;
        write_matrix_f64(&dir.join("centers.dvcf"), &self.centers)?;
        let meta = format!(
            "k {}\nd_vis {}\nseed {}\nepochs {}\n",
            self.k(),
            self.dim(),
            self.seed,
            self.epochs
        );
        fs::write(dir.join("codebook.meta"), meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CodebookError> {
        let centers = read_matrix_f64(&dir.join("centers.dvcf"))?;
        let meta = fs::read_to_string(dir.join("codebook.meta"))?;
        let field = |name: &str| -> Result<u64, CodebookError> {
            meta.lines()
                .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix(' ')))
                .ok_or_else(|| CodebookError::BadMetadata(format!("missing {name}")))?
                .trim()
                .parse()
                .map_err(|e| CodebookError::BadMetadata(format!("{name}: {e}")))
        };
        let (k, d) = (field("k")? as usize, field("d_vis")? as usize);
        if (k, d) != centers.dim() {
            return Err(CodebookError::BadMetadata(format!(
                "metadata says {k}x{d}, matrix is {:?}",
                centers.dim()
            )));
        }
        let mut cb = Codebook::new(centers)?;
        cb.seed = field("seed")?;
        cb.epochs = field("epochs")? as usize;
        Ok(cb)
    }
}

/// k-means++ seeding on `sample` (row indices into `data`).
fn kmeans_pp(
    data: ArrayView2<f64>,
    sample: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let d = data.ncols();
    let mut centers = Array2::zeros((k, d));
    let first = sample[rng.random_range(0..sample.len())];
    centers.row_mut(0).assign(&data.row(first));
    let mut dist: Vec<f64> = sample
        .iter()
        .map(|&i| sq_dist(data.row(i), centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = sample.len() - 1;
            for (j, w) in dist.iter().enumerate() {
                if u < *w {
                    chosen = j;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..sample.len())
        };
        centers.row_mut(c).assign(&data.row(sample[pick]));
        for (j, &i) in sample.iter().enumerate() {
            dist[j] = dist[j].min(sq_dist(data.row(i), centers.row(c)));
        }
    }
    centers
}

pub fn fit_minibatch_kmeans(
    features: ArrayView2<f64>,
    params: KMeansParams,
) -> Result<Codebook, CodebookError> {
    fit_impl(features, params, false).map(|(cb, _)| cb)
}

/// Same as [`fit_minibatch_kmeans`] but also reports full-data inertia per epoch.
pub fn fit_minibatch_kmeans_traced(
    features: ArrayView2<f64>,
    params: KMeansParams,
) -> Result<(Codebook, FitTrace), CodebookError> {
    fit_impl(features, params, true)
}

fn fit_impl(
    data: ArrayView2<f64>,
    params: KMeansParams,
    trace: bool,
) -> Result<(Codebook, FitTrace), CodebookError> {
    let KMeansParams {
        k,
        epochs,
        batch_size,
        seed,
    } = params;
    if k == 0 || epochs == 0 || batch_size == 0 {
        return Err(CodebookError::InvalidParams(format!(
            "k, epochs and batch_size must be >= 1 (got {k}, {epochs}, {batch_size})"
        )));
    }
    let n = data.nrows();
    if n < k {
        return Err(CodebookError::TooFewSamples { n, k });
    }
    if data.ncols() == 0 {
        return Err(CodebookError::InvalidParams(
            "zero-dimensional features".into(),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CodebookError::NonFinite);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let init_size = n.min((3 * batch_size).max(3 * k));
    let mut centers = kmeans_pp(data, &order[..init_size], k, &mut rng);

    let all: Vec<usize> = (0..n).collect();
    let full_inertia = |c: &Array2<f64>| -> f64 {
        assign_all(c.view(), data, &all)
            .iter()
            .map(|(_, d)| d)
            .sum()
    };
    let mut tr = FitTrace {
        initial_inertia: if trace { full_inertia(&centers) } else { 0.0 },
        epoch_inertia: Vec::new(),
    };

    let full_batch = batch_size >= n;
    let mut counts = vec![0u64; k];
    for _ in 0..epochs {
        if full_batch {
            counts.iter_mut().for_each(|c| *c = 0);
        }
        order.shuffle(&mut rng);
        let mut last_batch: Vec<(usize, usize, f64)> = Vec::new();
        for batch in order.chunks(batch_size) {
            let assigned = assign_all(centers.view(), data, batch);
            let mut sums = Array2::<f64>::zeros(centers.dim());
            let mut members = vec![0u64; k];
            for (&i, &(c, _)) in batch.iter().zip(&assigned) {
                sums.row_mut(c).scaled_add(1.0, &data.row(i));
                members[c] += 1;
            }
            for c in 0..k {
                if members[c] == 0 {
                    continue;
                }
                counts[c] += members[c];
                let eta = 1.0 / counts[c] as f64;
                let target = &sums.row(c) / members[c] as f64;
                let mut row = centers.row_mut(c);
                // c <- c + (m / count) * (mean - c)
                let step = (&target - &row) * (members[c] as f64 * eta);
                row += &step;
            }
            last_batch = batch
                .iter()
                .zip(assigned)
                .map(|(&i, (c, d))| (i, c, d))
                .collect();
        }
        reseed_dead_centers(&mut centers, &mut counts, data, &mut last_batch);
        if trace {
            tr.epoch_inertia.push(full_inertia(&centers));
        }
    }

    Ok((
        Codebook {
            centers,
            seed,
            epochs,
        },
        tr,
    ))
}

/// Moves every center that has never been assigned to the last-batch point
/// farthest from its own center.
fn reseed_dead_centers(
    centers: &mut Array2<f64>,
    counts: &mut [u64],
    data: ArrayView2<f64>,
    last_batch: &mut [(usize, usize, f64)],
) {
    let dead: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    if dead.is_empty() {
        return;
    }
    last_batch.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    for (c, &(i, _, d)) in dead.into_iter().zip(last_batch.iter()) {
        if d <= 0.0 {
            break;
        }
        centers.row_mut(c).assign(&data.row(i));
        counts[c] = 1;
    }
}

/// Row-stacks clips of many sequences into one `f64` matrix.
pub fn pool_features<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Array2<f64> {
    let views: Vec<_> = seqs.into_iter().map(|s| s.features.view()).collect();
    if views.is_empty() {
        return Array2::zeros((0, 0));
    }
    ndarray::concatenate(Axis(0), &views)
        .map(|m| m.mapv(f64::from))
        .unwrap_or_else(|_| Array2::zeros((0, 0)))
}

/// Mean of the rows, used by tests and diagnostics.
pub fn row_mean(m: ArrayView2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(m.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn params(k: usize, epochs: usize, batch_size: usize) -> KMeansParams {
        KMeansParams {
            k,
            epochs,
            batch_size,
            seed: 7,
        }
    }

    /// Plain Lloyd iteration to convergence from a given start.
    fn lloyd(data: ArrayView2<f64>, mut centers: Array2<f64>) -> Array2<f64> {
        for _ in 0..100 {
            let mut sums = Array2::<f64>::zeros(centers.dim());
            let mut n = vec![0.0; centers.nrows()];
            for x in data.rows() {
                let (c, _) = nearest(centers.view(), x);
                sums.row_mut(c).scaled_add(1.0, &x);
                n[c] += 1.0;
            }
            for c in 0..centers.nrows() {
                if n[c] > 0.0 {
                    let m = &sums.row(c) / n[c];
                    centers.row_mut(c).assign(&m);
                }
            }
        }
        centers
    }

    #[test]
    fn two_clusters_full_batch_match_lloyd() {
        let data = array![[0.0], [0.1], [10.0], [10.1]];
        let cb = fit_minibatch_kmeans(data.view(), params(2, 5, 4)).unwrap();
        let mut got: Vec<f64> = cb.centers.column(0).to_vec();
        got.sort_by(f64::total_cmp);
        let mut oracle: Vec<f64> = lloyd(data.view(), array![[0.0], [10.0]]).column(0).to_vec();
        oracle.sort_by(f64::total_cmp);
        assert_eq!(oracle.len(), 2);
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-6, "{got:?} vs {oracle:?}");
        }
        assert!((got[0] - 0.05).abs() < 1e-6 && (got[1] - 10.05).abs() < 1e-6);
    }

    #[test]
    fn exact_cover_has_zero_inertia() {
        let pts = array![[0.0, 1.0], [3.0, -2.0], [5.0, 5.0]];
        let data = ndarray::concatenate(Axis(0), &[pts.view(), pts.view(), pts.view()]).unwrap();
        let cb = fit_minibatch_kmeans(data.view(), params(3, 3, 2)).unwrap();
        assert_eq!(cb.inertia(data.view()).unwrap(), 0.0);
        for c in cb.centers.rows() {
            assert!(pts.rows().into_iter().any(|p| p == c));
        }
    }

    #[test]
    fn single_center_full_batch_one_epoch_is_mean() {
        let data = array![[1.0, 2.0], [3.0, -4.0], [8.0, 5.0], [0.0, 1.0]];
        let cb = fit_minibatch_kmeans(data.view(), params(1, 1, 4)).unwrap();
        let mean = row_mean(data.view());
        for (a, b) in cb.centers.row(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_center_minibatch_is_running_mean() {
        // Every point is visited once per epoch, so after one epoch the
        // running mean over all batches is the global mean too.
        let data = array![[1.0], [2.0], [4.0], [9.0], [-3.0]];
        let cb = fit_minibatch_kmeans(data.view(), params(1, 1, 2)).unwrap();
        assert!((cb.centers[[0, 0]] - 2.6).abs() < 1e-12);
    }

    #[test]
    fn assign_examples() {
        let cb = Codebook::new(array![[0.0], [10.0]]).unwrap();
        assert_eq!(cb.assign(array![2.0].view()).unwrap(), 0);
        let cb = Codebook::new(array![
            [9.0, 9.0],
            [1.0, 0.0],
            [5.0, 5.0],
            [3.0, 3.0],
            [-1.0, 0.0]
        ])
        .unwrap();
        assert_eq!(cb.assign(array![3.0, 3.0].view()).unwrap(), 3);
        // equidistant from 1 and 4
        assert_eq!(cb.assign(array![0.0, 0.0].view()).unwrap(), 1);
        assert!(matches!(
            cb.assign(array![0.0].view()),
            Err(CodebookError::DimensionMismatch {
                expected: 2,
                found: 1
            })
        ));
    }

    #[test]
    fn encode_examples() {
        let cb = Codebook::new(array![[0.5, 0.5]]).unwrap();
        let fs = FeatureSequence::new("v", 1.0, Array2::from_elem((7, 2), 3.0f32)).unwrap();
        assert_eq!(cb.encode_sequence(&fs).unwrap().labels, vec![0; 7]);

        let centers = array![[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let cb = Codebook::new(centers.mapv(f64::from)).unwrap();
        let fs = FeatureSequence::new("v", 1.0, centers).unwrap();
        assert_eq!(cb.encode_sequence(&fs).unwrap().labels, vec![0, 1, 2]);
    }

    #[test]
    fn inertia_examples() {
        let cb = Codebook::new(array![[1.0]]).unwrap();
        assert_eq!(cb.inertia(array![[0.0], [2.0]].view()).unwrap(), 2.0);
        let cb = Codebook::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(cb.inertia(cb.centers.view()).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let data = array![[0.0], [1.0]];
        assert!(matches!(
            fit_minibatch_kmeans(data.view(), params(3, 1, 2)),
            Err(CodebookError::TooFewSamples { n: 2, k: 3 })
        ));
        assert!(matches!(
            fit_minibatch_kmeans(data.view(), params(1, 0, 2)),
            Err(CodebookError::InvalidParams(_))
        ));
        let nan = array![[f64::NAN], [1.0]];
        assert!(matches!(
            fit_minibatch_kmeans(nan.view(), params(1, 1, 2)),
            Err(CodebookError::NonFinite)
        ));
    }

    #[test]
    fn dead_center_is_reseeded() {
        // Two coincident initial centers guarantee one of them starts dead.
        let mut centers = array![[0.0], [0.0]];
        let mut counts = vec![3, 0];
        let data = array![[0.0], [0.5], [7.0]];
        let mut batch = vec![(0, 0, 0.0), (1, 0, 0.25), (2, 0, 49.0)];
        reseed_dead_centers(&mut centers, &mut counts, data.view(), &mut batch);
        assert_eq!(centers[[1, 0]], 7.0);
        assert_eq!(counts, vec![3, 1]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = array![[0.0, 1.0], [0.5, 1.0], [9.0, 2.0], [9.5, 2.5]];
        let cb = fit_minibatch_kmeans(data.view(), params(2, 2, 4)).unwrap();
        cb.save(dir.path()).unwrap();
        let back = Codebook::load(dir.path()).unwrap();
        assert_eq!(back.k(), 2);
        assert_eq!(back.seed, 7);
        assert_eq!(back.epochs, 2);
        let again = tempfile::tempdir().unwrap();
        back.save(again.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join("centers.dvcf")).unwrap(),
            fs::read(again.path().join("centers.dvcf")).unwrap()
        );
    }
}

//! Anchor-based temporal proposals over encoded clip streams.
//!
//! Each modality has parallel head groups with different first-kernel
//! widths; the anchor set is split into contiguous chunks across the groups.
//! A head emits `(offset, length, confidence)` logits per grid cell and
//! anchor, decoded as
//! `center = (t + 0.5 + tanh(o)/2)·clip`, `length = prior·exp(l)`,
//! `confidence = sigmoid(c)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use dvc_core::dataset::AnnotationSet;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::layers::Linear;
use crate::params::{io_err, json_err, Adam, AdamConfig, Grads, ParamSet, ParamStore};
use crate::tape::{sigmoid, Graph, Var};

pub const DEFAULT_KERNEL_SIZES: [usize; 3] = [5, 9, 13];
pub const DEFAULT_NUM_ANCHORS: usize = 10;
/// Largest number of initialisations tried exhaustively by [`fit_anchor_lengths`].
const EXHAUSTIVE_LIMIT: usize = 5000;
const RANDOM_RESTARTS: usize = 10;

/// Prior lengths in seconds, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AnchorSet {
    priors: Vec<f64>,
}

impl TryFrom<Vec<f64>> for AnchorSet {
    type Error = NnError;

    fn try_from(priors: Vec<f64>) -> Result<Self, NnError> {
        Self::new(priors)
    }
}

impl From<AnchorSet> for Vec<f64> {
    fn from(a: AnchorSet) -> Self {
        a.priors
    }
}

impl AnchorSet {
    pub fn new(mut priors: Vec<f64>) -> Result<Self, NnError> {
        if priors.is_empty() || priors.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(NnError::Config(format!(
                "anchor priors must be positive: {priors:?}"
            )));
        }
        priors.sort_by(f64::total_cmp);
        Ok(Self { priors })
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// Anchor whose centred IoU `min(ℓ,p)/max(ℓ,p)` with `length` is largest.
    pub fn best_match(&self, length: f64) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (a, &p) in self.priors.iter().enumerate() {
            let iou = length.min(p) / length.max(p);
            if iou > best.1 {
                best = (a, iou);
            }
        }
        best.0
    }
}

/// Lloyd iterations from `centers` until assignments stop changing.
/// Empty clusters keep their center. Returns centers and inertia.
pub fn lloyd_1d(xs: &[f64], mut centers: Vec<f64>) -> (Vec<f64>, f64) {
    let nearest = |c: &[f64], x: f64| {
        let mut best = (0, f64::INFINITY);
        for (i, &m) in c.iter().enumerate() {
            let d = (x - m) * (x - m);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    };
    let mut assign: Vec<usize> = vec![usize::MAX; xs.len()];
    for _ in 0..1000 {
        let next: Vec<usize> = xs.iter().map(|&x| nearest(&centers, x).0).collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<f64> = xs
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(&x, _)| x)
                .collect();
            if !members.is_empty() {
                *center = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = xs.iter().map(|&x| nearest(&centers, x).1).sum();
    (centers, inertia)
}

fn binomial(n: usize, k: usize) -> usize {
    let mut r: usize = 1;
    for i in 0..k.min(n - k) {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// 1-D k-means over event lengths. Small instances run Lloyd from every
/// k-subset of the distinct lengths; larger ones use seeded k-means++
/// restarts. The lowest-inertia result (first on ties) is kept.
pub fn fit_anchor_lengths(
    lengths: &[f64],
    num_anchors: usize,
    seed: u64,
) -> Result<AnchorSet, NnError> {
    if num_anchors == 0 {
        return Err(NnError::Config("num_anchors must be >= 1".into()));
    }
    if lengths.len() < num_anchors {
        return Err(NnError::TooFewEvents {
            need: num_anchors,
            got: lengths.len(),
        });
    }
    let mut distinct = lengths.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |init: Vec<f64>| {
        let (c, inertia) = lloyd_1d(lengths, init);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((c, inertia));
        }
    };
    if distinct.len() <= num_anchors {
        let mut init = distinct.clone();
        init.resize(num_anchors, *distinct.last().expect("non-empty"));
        consider(init);
    } else if binomial(distinct.len(), num_anchors) <= EXHAUSTIVE_LIMIT {
        for_each_subset(distinct.len(), num_anchors, &mut |idx| {
            consider(idx.iter().map(|&i| distinct[i]).collect())
        });
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..RANDOM_RESTARTS {
            let mut init = vec![lengths[rng.random_range(0..lengths.len())]];
            while init.len() < num_anchors {
                let d: Vec<f64> = lengths
                    .iter()
                    .map(|&x| {
                        init.iter()
                            .map(|&c| (x - c) * (x - c))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                let total: f64 = d.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = lengths.len() - 1;
                for (i, w) in d.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                init.push(lengths[pick]);
            }
            consider(init);
        }
    }
    AnchorSet::new(best.expect("at least one initialisation").0)
}

/// Anchor priors from every ground-truth event length.
pub fn fit_anchors(
    ann: &AnnotationSet,
    num_anchors: usize,
    seed: u64,
) -> Result<AnchorSet, NnError> {
    let lengths: Vec<f64> = ann
        .videos
        .values()
        .flat_map(|v| v.timestamps.iter().map(|t| t[1] - t[0]))
        .collect();
    fit_anchor_lengths(&lengths, num_anchors, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Semantic,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Semantic => "semantic",
        })
    }
}

pub const MODALITIES: [Modality; 2] = [Modality::Visual, Modality::Semantic];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub num_anchors: usize,
    pub kernel_sizes: Vec<usize>,
    pub hidden: usize,
    /// Weight of the confidence loss on unmatched cells.
    pub neg_weight: f64,
    /// Proposals kept per video.
    pub top_n: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            num_anchors: DEFAULT_NUM_ANCHORS,
            kernel_sizes: DEFAULT_KERNEL_SIZES.to_vec(),
            hidden: 64,
            neg_weight: 0.1,
            top_n: 100,
            epochs: 60,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad(format!(
                "kernel sizes must be odd and non-empty: {:?}",
                self.kernel_sizes
            ));
        }
        if self.num_anchors == 0 || self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("num_anchors, hidden, epochs and batch_size must be >= 1".into());
        }
        if !(self.neg_weight >= 0.0) {
            return bad(format!("neg_weight {} must be >= 0", self.neg_weight));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct HeadGroup {
    kernel: usize,
    anchors: Range<usize>,
    conv1: Linear,
    conv2: Linear,
    conv3: Linear,
}

/// Splits `n` anchors into contiguous chunks over `groups`, larger chunks first.
pub fn anchor_chunks(n: usize, groups: usize) -> Vec<Range<usize>> {
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let size = n / groups + usize::from(g < n % groups);
        out.push(start..start + size);
        start += size;
    }
    out
}

#[derive(Debug, Clone)]
pub struct ProposalHeads {
    pub anchors: AnchorSet,
    pub cfg: ProposalConfig,
    pub d_model: usize,
    pub params: ParamSet,
    groups: [Vec<HeadGroup>; 2],
}

/// One decoded grid cell × anchor, before clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPrediction {
    pub cell: usize,
    pub anchor: usize,
    pub center_s: f64,
    pub length_s: f64,
    pub confidence: f64,
}

/// `(center, length, confidence)` of cell `t` with the given prior and logits.
pub fn decode_cell(
    t: usize,
    prior: f64,
    logits: [f64; 3],
    clip_duration_s: f64,
) -> (f64, f64, f64) {
    let [o, l, c] = logits;
    (
        (t as f64 + 0.5 + o.tanh() / 2.0) * clip_duration_s,
        prior * l.exp(),
        sigmoid(c),
    )
}

/// Clips `[center ± length/2]` to `[0, duration]`; `None` when nothing is left.
pub fn clamp_interval(center: f64, length: f64, duration: f64) -> Option<(f64, f64)> {
    let s = (center - length / 2.0).clamp(0.0, duration);
    let e = (center + length / 2.0).clamp(0.0, duration);
    (e > s).then_some((s, e))
}

/// Encoded streams and ground truth of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalVideo {
    pub video_id: String,
    pub duration: f64,
    pub clip_duration_s: f64,
    pub visual: Array2<f64>,
    pub semantic: Array2<f64>,
    pub events: Vec<[f64; 2]>,
}

impl ProposalVideo {
    pub fn stream(&self, m: Modality) -> &Array2<f64> {
        match m {
            Modality::Visual => &self.visual,
            Modality::Semantic => &self.semantic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub video_id: String,
    pub center_s: f64,
    pub length_s: f64,
    pub confidence: f64,
    pub modality: Modality,
}

impl Proposal {
    pub fn start_s(&self) -> f64 {
        self.center_s - self.length_s / 2.0
    }

    pub fn end_s(&self) -> f64 {
        self.center_s + self.length_s / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedProposals {
    pub proposals: Vec<Proposal>,
    /// Fewer than the requested number were available.
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalTrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl ProposalHeads {
    pub fn new(anchors: AnchorSet, cfg: ProposalConfig, d_model: usize) -> Result<Self, NnError> {
        let mut params = ParamSet::new();
        let seed = cfg.seed;
        let groups = Self::assemble(
            &anchors,
            &cfg,
            d_model,
            &mut ParamStore::init(&mut params, seed),
        )?;
        Ok(Self {
            anchors,
            cfg,
            d_model,
            params,
            groups,
        })
    }

    pub fn from_params(
        anchors: AnchorSet,
        cfg: ProposalConfig,
        d_model: usize,
        mut params: ParamSet,
    ) -> Result<Self, NnError> {
        let groups = Self::assemble(
            &anchors,
            &cfg,
            d_model,
            &mut ParamStore::lookup(&mut params),
        )?;
        Ok(Self {
            anchors,
            cfg,
            d_model,
            params,
            groups,
        })
    }

    fn assemble(
        anchors: &AnchorSet,
        cfg: &ProposalConfig,
        d_model: usize,
        s: &mut ParamStore,
    ) -> Result<[Vec<HeadGroup>; 2], NnError> {
        cfg.validate()?;
        if d_model == 0 {
            return Err(NnError::Config("d_model must be >= 1".into()));
        }
        let chunks = anchor_chunks(anchors.len(), cfg.kernel_sizes.len());
        let mut out: [Vec<HeadGroup>; 2] = [Vec::new(), Vec::new()];
        for (mi, m) in MODALITIES.iter().enumerate() {
            for (gi, (&k, range)) in cfg.kernel_sizes.iter().zip(&chunks).enumerate() {
                if range.is_empty() {
                    continue;
                }
                let p = format!("{m}.{gi}");
                out[mi].push(HeadGroup {
                    kernel: k,
                    anchors: range.clone(),
                    conv1: Linear::new(s, &format!("{p}.conv1"), k * d_model, cfg.hidden)?,
                    conv2: Linear::new(s, &format!("{p}.conv2"), cfg.hidden, cfg.hidden)?,
                    conv3: Linear::new(s, &format!("{p}.conv3"), cfg.hidden, 3 * range.len())?,
                });
            }
        }
        Ok(out)
    }

    fn group_logits(&self, g: &mut Graph, m: Modality, stream: Var) -> Vec<(usize, Var)> {
        self.groups[m as usize]
            .iter()
            .enumerate()
            .map(|(gi, grp)| {
                let u = g.unfold(stream, grp.kernel);
                let h = grp.conv1.forward(g, u);
                let h = g.relu(h);
                let h = grp.conv2.forward(g, h);
                let h = g.relu(h);
                (gi, grp.conv3.forward(g, h))
            })
            .collect()
    }

    fn check_stream(&self, stream: &Array2<f64>) -> Result<(), NnError> {
        if stream.nrows() == 0 {
            return Err(NnError::Empty("proposal stream"));
        }
        if stream.ncols() != self.d_model {
            return Err(NnError::Shape(format!(
                "stream width {} but heads expect {}",
                stream.ncols(),
                self.d_model
            )));
        }
        Ok(())
    }

    /// Raw logits, one row per cell, three columns per anchor in anchor order.
    pub fn logits(&self, m: Modality, stream: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_stream(stream)?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(stream.clone());
        let parts: Vec<Var> = self
            .group_logits(&mut g, m, x)
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let all = g.concat_cols(&parts);
        Ok(g.value(all).clone())
    }

    /// Decoded grid of `cells × anchors` predictions, cell-major; no clamping.
    pub fn head_forward(
        &self,
        m: Modality,
        stream: &Array2<f64>,
        clip_duration_s: f64,
    ) -> Result<Vec<GridPrediction>, NnError> {
        let logits = self.logits(m, stream)?;
        let mut out = Vec::with_capacity(logits.nrows() * self.anchors.len());
        for t in 0..logits.nrows() {
            for (a, &prior) in self.anchors.priors().iter().enumerate() {
                let row = logits.row(t);
                let (center_s, length_s, confidence) = decode_cell(
                    t,
                    prior,
                    [row[3 * a], row[3 * a + 1], row[3 * a + 2]],
                    clip_duration_s,
                );
                out.push(GridPrediction {
                    cell: t,
                    anchor: a,
                    center_s,
                    length_s,
                    confidence,
                });
            }
        }
        Ok(out)
    }

    /// Training loss of one video summed over both modalities.
    pub fn video_loss(&self, g: &mut Graph, video: &ProposalVideo) -> Result<Var, NnError> {
        let mut total: Option<Var> = None;
        for m in MODALITIES {
            let stream = video.stream(m);
            self.check_stream(stream)?;
            let x = g.constant(stream.clone());
            let cells = stream.nrows();
            let targets = self.targets(cells, video);
            for (gi, out) in self.group_logits(g, m, x) {
                let grp = &self.groups[m as usize][gi];
                let l = self.group_loss(g, out, grp.anchors.clone(), &targets);
                total = Some(match total {
                    Some(t) => g.add(t, l),
                    None => l,
                });
            }
        }
        Ok(total.expect("at least one head group"))
    }

    /// Matched (cell, anchor) → (offset target, log-length target).
    fn targets(&self, cells: usize, video: &ProposalVideo) -> BTreeMap<(usize, usize), (f64, f64)> {
        let mut out = BTreeMap::new();
        for ev in &video.events {
            let center = (ev[0] + ev[1]) / 2.0;
            let length = ev[1] - ev[0];
            let pos = center / video.clip_duration_s;
            let t = (pos.floor().max(0.0) as usize).min(cells - 1);
            let a = self.anchors.best_match(length);
            let offset = (pos - t as f64 - 0.5).clamp(-0.499, 0.499);
            out.insert((t, a), (offset, (length / self.anchors.priors()[a]).ln()));
        }
        out
    }

    fn group_loss(
        &self,
        g: &mut Graph,
        out: Var,
        anchors: Range<usize>,
        targets: &BTreeMap<(usize, usize), (f64, f64)>,
    ) -> Var {
        let (cells, cols) = g.value(out).dim();
        let mut t_off = Array2::zeros((cells, cols));
        let mut w_off = Array2::zeros((cells, cols));
        let mut t_len = Array2::zeros((cells, cols));
        let mut w_len = Array2::zeros((cells, cols));
        let mut w_conf = Array2::zeros((cells, cols));
        let mut w_pos = Array2::zeros((cells, cols));
        for t in 0..cells {
            for (j, _) in anchors.clone().enumerate() {
                w_conf[[t, 3 * j + 2]] = self.cfg.neg_weight;
            }
        }
        let positives = targets.len().max(1) as f64;
        for (&(t, a), &(off, len)) in targets
            .iter()
            .filter(|((t, a), _)| *t < cells && anchors.contains(a))
        {
            let j = a - anchors.start;
            t_off[[t, 3 * j]] = off;
            w_off[[t, 3 * j]] = 1.0;
            t_len[[t, 3 * j + 1]] = len;
            w_len[[t, 3 * j + 1]] = 1.0;
            w_conf[[t, 3 * j + 2]] = 1.0;
            w_pos[[t, 3 * j + 2]] = 1.0;
        }
        // MSE on tanh(o)/2 and l; BCE(c, y) = softplus(c) − y·c.
        let th = g.tanh(out);
        let half = g.scale(th, 0.5);
        let neg_t_off = g.constant(-t_off);
        let d_off = g.add(half, neg_t_off);
        let sq_off = g.square(d_off);
        let l_off = g.weighted_sum(sq_off, w_off);
        let neg_t_len = g.constant(-t_len);
        let d_len = g.add(out, neg_t_len);
        let sq_len = g.square(d_len);
        let l_len = g.weighted_sum(sq_len, w_len);
        let sp = g.softplus(out);
        let l_sp = g.weighted_sum(sp, w_conf);
        let l_lin = g.weighted_sum(out, -w_pos);
        let a = g.add(l_off, l_len);
        let b = g.add(l_sp, l_lin);
        let s = g.add(a, b);
        g.scale(s, 1.0 / positives)
    }

    pub fn mean_loss(&self, videos: &[ProposalVideo]) -> Result<f64, NnError> {
        let losses: Vec<f64> = videos
            .par_iter()
            .map(|v| {
                let mut g = Graph::new(&self.params);
                let l = self.video_loss(&mut g, v)?;
                Ok(g.scalar(l))
            })
            .collect::<Result<_, NnError>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Ranked proposals: visual contributes ⌈n/2⌉ and semantic ⌊n/2⌋ of their
    /// most confident predictions, merged by confidence (ties: earlier
    /// center, then modality).
    pub fn generate(&self, video: &ProposalVideo, n: usize) -> Result<RankedProposals, NnError> {
        let mut pools: Vec<Vec<Proposal>> = Vec::with_capacity(2);
        for m in MODALITIES {
            let grid = self.head_forward(m, video.stream(m), video.clip_duration_s)?;
            let mut props: Vec<Proposal> = grid
                .iter()
                .filter_map(|p| {
                    let (s, e) = clamp_interval(p.center_s, p.length_s, video.duration)?;
                    Some(Proposal {
                        video_id: video.video_id.clone(),
                        center_s: (s + e) / 2.0,
                        length_s: e - s,
                        confidence: p.confidence,
                        modality: m,
                    })
                })
                .collect();
            props.sort_by(rank_order);
            pools.push(props);
        }
        let quota = [n.div_ceil(2), n / 2];
        let mut take = [quota[0].min(pools[0].len()), quota[1].min(pools[1].len())];
        // a short modality hands its unused quota to the other
        let spare0 = quota[0] - take[0];
        let spare1 = quota[1] - take[1];
        take[1] = (take[1] + spare0).min(pools[1].len());
        take[0] = (take[0] + spare1).min(pools[0].len());
        let mut merged: Vec<Proposal> = pools
            .into_iter()
            .zip(take)
            .flat_map(|(p, k)| p.into_iter().take(k))
            .collect();
        merged.sort_by(rank_order);
        let shortfall = merged.len() < n;
        Ok(RankedProposals {
            proposals: merged,
            shortfall,
        })
    }
}

fn rank_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.center_s.total_cmp(&b.center_s))
        .then(a.modality.cmp(&b.modality))
}

/// Adam over the head parameters only; the encoder streams are constants.
pub fn train_proposal_module(
    heads: &mut ProposalHeads,
    videos: &[ProposalVideo],
) -> Result<ProposalTrainReport, NnError> {
    if videos.iter().all(|v| v.events.is_empty()) {
        return Err(NnError::TooFewEvents { need: 1, got: 0 });
    }
    let cfg = heads.cfg.clone();
    let mut opt = Adam::new(cfg.adam, &heads.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let initial_loss = heads.mean_loss(videos)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let h = &*heads;
            let results: Vec<(f64, Grads)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new(&h.params);
                    let l = h.video_loss(&mut g, &videos[i])?;
                    Ok((g.scalar(l), g.backward(l)))
                })
                .collect::<Result<_, NnError>>()?;
            let mut total = Grads::zeros_like(&heads.params);
            for (l, gr) in &results {
                sum += l;
                total.accumulate(gr);
            }
            total.scale(1.0 / batch.len() as f64);
            opt.step(&mut heads.params, &total);
        }
        epoch_losses.push(sum / videos.len() as f64);
    }
    Ok(ProposalTrainReport {
        initial_loss,
        epoch_losses,
    })
}

/// Everything besides the weights needed to rebuild saved heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsManifest {
    pub anchors: AnchorSet,
    pub config: ProposalConfig,
    pub d_model: usize,
}

const HEADS_FILE: &str = "heads.json";

pub fn save_heads(dir: &Path, heads: &ProposalHeads) -> Result<(), NnError> {
    heads.params.save(&dir.join("params"))?;
    let manifest = HeadsManifest {
        anchors: heads.anchors.clone(),
        config: heads.cfg.clone(),
        d_model: heads.d_model,
    };
    let path = dir.join(HEADS_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| json_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn load_heads(dir: &Path) -> Result<ProposalHeads, NnError> {
    let path = dir.join(HEADS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: HeadsManifest = serde_json::from_str(&text).map_err(|e| json_err(&path, e))?;
    let params = ParamSet::load(&dir.join("params"))?;
    ProposalHeads::from_params(m.anchors, m.config, m.d_model, params)
}

/// `video_id start_s end_s confidence modality`, one line per proposal,
/// videos in id order and proposals in rank order.
pub fn export_proposals(all: &BTreeMap<String, Vec<Proposal>>) -> String {
    let mut out = String::new();
    for props in all.values() {
        for p in props {
            out.push_str(&format!(
                "{} {:.4} {:.4} {:.6} {}\n",
                p.video_id,
                p.start_s(),
                p.end_s(),
                p.confidence,
                p.modality
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_from_two_length_groups() {
        let a = fit_anchor_lengths(&[1.0, 1.0, 9.0, 9.0], 2, 0).unwrap();
        assert_eq!(a.priors(), &[1.0, 9.0]);
        let one = fit_anchor_lengths(&[4.5; 5], 1, 0).unwrap();
        assert_eq!(one.priors(), &[4.5]);
        let many: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 + 0.5).collect();
        let sorted = fit_anchor_lengths(&many, 6, 3).unwrap();
        assert!(sorted.priors().windows(2).all(|w| w[0] <= w[1]));
        assert!(matches!(
            fit_anchor_lengths(&[1.0], 2, 0),
            Err(NnError::TooFewEvents { need: 2, got: 1 })
        ));
    }

    #[test]
    fn subsets_enumerated_once() {
        let mut seen = Vec::new();
        for_each_subset(5, 3, &mut |s| seen.push(s.to_vec()));
        assert_eq!(seen.len(), binomial(5, 3));
        assert_eq!(seen.first().unwrap(), &[0, 1, 2]);
        assert_eq!(seen.last().unwrap(), &[2, 3, 4]);
        let mut one = 0;
        for_each_subset(3, 3, &mut |_| one += 1);
        assert_eq!(one, 1);
    }

    #[test]
    fn zero_logits_decode_to_cell_midpoint_and_prior() {
        let (c, l, p) = decode_cell(3, 7.5, [0.0; 3], 2.0);
        assert_eq!((c, l, p), (7.0, 7.5, 0.5));
        let (c_hi, _, _) = decode_cell(3, 1.0, [50.0, 0.0, 0.0], 2.0);
        let (c_lo, _, _) = decode_cell(3, 1.0, [-50.0, 0.0, 0.0], 2.0);
        assert!(c_hi <= 8.0 && c_lo >= 6.0);
    }

    #[test]
    fn clamping() {
        assert_eq!(clamp_interval(1.0, 4.0, 10.0), Some((0.0, 3.0)));
        assert_eq!(clamp_interval(9.0, 4.0, 10.0), Some((7.0, 10.0)));
        assert_eq!(clamp_interval(12.0, 2.0, 10.0), None);
    }

    #[test]
    fn chunks_cover_anchors() {
        assert_eq!(anchor_chunks(10, 3), vec![0..4, 4..7, 7..10]);
        assert_eq!(anchor_chunks(2, 3), vec![0..1, 1..2, 2..2]);
    }

    #[test]
    fn best_anchor_by_centred_iou() {
        let a = AnchorSet::new(vec![8.0, 2.0, 4.0]).unwrap();
        assert_eq!(a.priors(), &[2.0, 4.0, 8.0]);
        assert_eq!(a.best_match(3.0), 1);
        assert_eq!(a.best_match(1.0), 0);
        assert_eq!(a.best_match(100.0), 2);
        assert!(AnchorSet::new(vec![1.0, 0.0]).is_err());
    }
}

//! Brute-force and finite-difference oracles for the core algorithms.

use std::collections::BTreeMap;

use dvc_core::codebook::{fit_minibatch_kmeans_traced, pool_features};
use dvc_core::cooccur::CooccurrenceEntry;
use dvc_core::dataset::VideoAnnotation;
use dvc_core::eval::greedy_matches;
use dvc_core::semvec::{glove_gradient, glove_loss_entries, EmbeddingParams};
use dvc_core::*;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cooccur_oracle(seqs: &[Vec<usize>], k: usize, s: usize) -> Vec<Vec<u64>> {
    let mut z = vec![vec![0u64; k]; k];
    for seq in seqs {
        for p in 0..seq.len() {
            for q in 0..seq.len() {
                let d = p.abs_diff(q);
                if d >= 1 && d <= s {
                    z[seq[p]][seq[q]] += 1;
                }
            }
        }
    }
    z
}

proptest! {
    #[test]
    fn cooccurrence_matches_double_loop(
        seqs in prop::collection::vec(prop::collection::vec(0usize..7, 1..=20), 1..4),
        s in 1usize..=5,
    ) {
        let corpus: Vec<LabelSequence> = seqs.iter().enumerate()
            .map(|(i, l)| LabelSequence { video_id: format!("v{i}"), labels: l.clone() })
            .collect();
        let z = count_cooccurrences(&corpus, 7, s).unwrap();
        let oracle = cooccur_oracle(&seqs, 7, s);
        for i in 0..7 {
            for j in 0..7 {
                prop_assert_eq!(z.get(i, j), oracle[i][j]);
            }
        }
    }

    #[test]
    fn assign_matches_full_scan(
        centers in prop::collection::vec(prop::collection::vec(-3i32..3, 3), 1..8),
        x in prop::collection::vec(-3i32..3, 3),
    ) {
        // small integer grids force plenty of exact ties
        let k = centers.len();
        let c = Array2::from_shape_fn((k, 3), |(i, j)| centers[i][j] as f64);
        let cb = Codebook::new(c).unwrap();
        let xv = Array1::from_iter(x.iter().map(|&v| v as f64));
        let mut best = 0;
        let mut best_d = i64::MAX;
        for (i, row) in centers.iter().enumerate() {
            let d: i64 = row.iter().zip(&x).map(|(a, b)| ((a - b) as i64).pow(2)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        prop_assert_eq!(cb.assign(xv.view()).unwrap(), best);
    }
}

#[test]
fn full_batch_inertia_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = Array2::from_shape_simple_fn((60, 2), || rng.random_range(-5.0..5.0));
    let (_, trace) = fit_minibatch_kmeans_traced(
        data.view(),
        KMeansParams {
            k: 5,
            epochs: 8,
            batch_size: 60,
            seed: 2,
        },
    )
    .unwrap();
    let mut prev = trace.initial_inertia;
    for &e in &trace.epoch_inertia {
        assert!(e <= prev + 1e-9, "{:?}", trace);
        prev = e;
    }
}

#[test]
fn minibatch_halves_inertia_on_separated_topics() {
    let corpus = synth_corpus(&SynthConfig {
        num_videos: 60,
        num_topics: 3,
        clusters_per_topic: 1,
        feature_dim: 16,
        noise_sigma: 0.5,
        seed: 0,
        ..Default::default()
    })
    .unwrap();
    let data = pool_features(&corpus.sequences);
    let (cb, trace) = fit_minibatch_kmeans_traced(
        data.view(),
        KMeansParams {
            k: 3,
            epochs: 5,
            batch_size: 64,
            seed: 0,
        },
    )
    .unwrap();
    let last = *trace.epoch_inertia.last().unwrap();
    assert!(last <= 0.5 * trace.initial_inertia, "{trace:?}");
    assert_eq!(cb.inertia(data.view()).unwrap(), last);
}

#[test]
fn zero_noise_encoding_is_constant_per_segment() {
    let corpus = synth_corpus(&SynthConfig {
        noise_sigma: 0.0,
        clusters_per_topic: 1,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let cb = Codebook::new(corpus.all_prototypes().mapv(f64::from)).unwrap();
    for (seq, topics) in corpus.sequences.iter().zip(&corpus.clip_topics) {
        let labels = cb.encode_sequence(seq).unwrap().labels;
        assert_eq!(&labels, topics);
        let ann = corpus.annotations.get(&seq.video_id).unwrap();
        for ts in &ann.timestamps {
            let a = (ts[0] / seq.clip_duration_s).round() as usize;
            let b = (ts[1] / seq.clip_duration_s).round() as usize;
            assert!(labels[a..b].iter().all(|&l| l == labels[a]));
        }
        // element-wise agreement with assign
        for (i, l) in labels.iter().enumerate() {
            assert_eq!(cb.assign_f32(seq.clip(i)).unwrap(), *l);
        }
    }
}

fn flat(p: &EmbeddingParams) -> Vec<f64> {
    p.w.iter()
        .chain(&p.w_tilde)
        .chain(&p.b)
        .chain(&p.b_tilde)
        .copied()
        .collect()
}

fn unflat(template: &EmbeddingParams, v: &[f64]) -> EmbeddingParams {
    let mut p = template.clone();
    let mut it = v.iter().copied();
    p.w.iter_mut()
        .chain(p.w_tilde.iter_mut())
        .chain(p.b.iter_mut())
        .chain(p.b_tilde.iter_mut())
        .for_each(|x| *x = it.next().unwrap());
    p
}

#[test]
fn glove_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 5;
    let p = {
        let mut p = EmbeddingParams::init(k, 3, 1);
        p.w.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p.w_tilde.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p
    };
    let entries: Vec<CooccurrenceEntry> = (0..12)
        .map(|_| CooccurrenceEntry {
            i: rng.random_range(0..k),
            j: rng.random_range(0..k),
            value: rng.random_range(1..300) as f64,
        })
        .collect();
    let h = GloveHyper::default();
    let (_, g) = glove_gradient(&p, &entries, &h).unwrap();
    let x = flat(&p);
    let analytic = flat(&g);
    let eps = 1e-6;
    let mut num = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += eps;
        b[i] -= eps;
        let ja = glove_loss_entries(&unflat(&p, &a), &entries, &h).unwrap();
        let jb = glove_loss_entries(&unflat(&p, &b), &entries, &h).unwrap();
        num[i] = (ja - jb) / (2.0 * eps);
    }
    let diff: f64 = analytic
        .iter()
        .zip(&num)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + num.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
}

/// Independent greedy matcher: for each proposal in order, scan the ground
/// truth for the best still-free event.
fn prf_oracle(props: &[(f64, f64)], gt: &[(f64, f64)], thr: f64) -> (f64, f64) {
    let iou = |a: (f64, f64), b: (f64, f64)| {
        let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
        inter / (a.1.max(b.1) - a.0.min(b.0))
    };
    let mut free: Vec<usize> = (0..gt.len()).collect();
    let mut tp = 0.0;
    for &p in props {
        let mut pick: Option<usize> = None;
        for (pos, &g) in free.iter().enumerate() {
            let v = iou(p, gt[g]);
            if v >= thr && pick.is_none_or(|q| v > iou(p, gt[free[q]])) {
                pick = Some(pos);
            }
        }
        if let Some(pos) = pick {
            free.remove(pos);
            tp += 1.0;
        }
    }
    let p = if props.is_empty() {
        0.0
    } else {
        tp / props.len() as f64
    };
    (p, tp / gt.len() as f64)
}

proptest! {
    #[test]
    fn prf_matches_greedy_oracle(
        props in prop::collection::vec((0u8..20, 1u8..10), 0..=5),
        gts in prop::collection::vec((0u8..20, 1u8..10), 1..=3),
        thr in prop::sample::select(vec![0.1, 0.3, 0.5, 0.7, 0.9]),
    ) {
        let p: Vec<(f64, f64)> = props.iter().map(|&(s, l)| (s as f64, (s + l) as f64)).collect();
        let g: Vec<(f64, f64)> = gts.iter().map(|&(s, l)| (s as f64, (s + l) as f64)).collect();
        let mut ann = AnnotationSet::default();
        ann.videos.insert("v".into(), VideoAnnotation {
            duration: 40.0,
            timestamps: g.iter().map(|&(a, b)| [a, b]).collect(),
            sentences: vec!["x".into(); g.len()],
        });
        let map = BTreeMap::from([("v".to_string(), p.iter().map(|&(a, b)| Segment::new(a, b)).collect::<Vec<_>>())]);
        let got = proposal_prf(&map, &ann, &[thr]).unwrap();
        let (op, or) = prf_oracle(&p, &g, thr);
        prop_assert!((got.precision - op).abs() <= 1e-9);
        prop_assert!((got.recall - or).abs() <= 1e-9);
        let f1 = if op + or > 0.0 { 2.0 * op * or / (op + or) } else { 0.0 };
        prop_assert!((got.f1 - f1).abs() <= 1e-9);

        // an extra proposal that overlaps nothing cannot raise precision or move recall
        let mut more = map.clone();
        more.get_mut("v").unwrap().push(Segment::new(100.0, 101.0));
        let worse = proposal_prf(&more, &ann, &[thr]).unwrap();
        prop_assert!(worse.precision <= got.precision + 1e-12);
        prop_assert!((worse.recall - got.recall).abs() <= 1e-12);
        prop_assert_eq!(
            greedy_matches(&more["v"], &g.iter().map(|&(a, b)| Segment::new(a, b)).collect::<Vec<_>>(), thr),
            (or * g.len() as f64).round() as usize
        );
    }
}

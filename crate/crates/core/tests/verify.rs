use nowcast_core::pipeline::{assemble_block, enumerate_samples, fit_normalizer};
use nowcast_core::synth::{render_event, Storm, SynthConfig};
use nowcast_core::verify::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mann–Whitney statistic by explicit pairwise comparison.
fn pairwise_auc(preds: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in preds.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &pj) in preds.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            wins += if pi > pj {
                1.0
            } else if pi == pj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..400);
    let levels = rng.random_range(2..50);
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    labels[0] = 1;
    labels[1] = 0;
    // Coarse quantization forces ties.
    let preds = labels
        .iter()
        .map(|&l| ((rng.random::<f64>() + 0.3 * l as f64) * levels as f64).floor() / levels as f64)
        .collect();
    (preds, labels)
}

#[test]
fn skill_scores_equal_direct_substitution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let m = ConfusionMatrix {
            tp: rng.random_range(0..50),
            fn_: rng.random_range(0..50),
            fp: rng.random_range(0..50),
            tn: rng.random_range(0..50),
        };
        let s = skill_scores(&m);
        let (tp, fn_, fp) = (m.tp as f64, m.fn_ as f64, m.fp as f64);
        assert_eq!(s.pod, (m.tp + m.fn_ > 0).then(|| tp / (tp + fn_)));
        assert_eq!(s.far, (m.tp + m.fp > 0).then(|| fp / (tp + fp)));
        assert_eq!(s.csi, (m.tp + m.fn_ + m.fp > 0).then(|| tp / (tp + fn_ + fp)));
        if let (Some(pod), Some(csi)) = (s.pod, s.csi) {
            assert!(csi <= pod);
        }
        if m.tp > 0 {
            let (pod, far, csi) = (s.pod.unwrap(), s.far.unwrap(), s.csi.unwrap());
            assert!((csi - 1.0 / (1.0 / pod + 1.0 / (1.0 - far) - 1.0)).abs() < 1e-12);
            assert!(csi <= pod.min(1.0 - far) + 1e-15);
        }
    }
}

#[test]
fn confusion_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let (preds, labels) = random_scores(&mut rng);
        let thr = rng.random::<f64>();
        let m = confusion(&preds, &labels, thr).unwrap();
        let count = |want_pred: bool, want_label: u8| {
            preds
                .iter()
                .zip(&labels)
                .filter(|(p, l)| (**p >= thr) == want_pred && **l == want_label)
                .count() as u64
        };
        assert_eq!(m.tp, count(true, 1));
        assert_eq!(m.fn_, count(false, 1));
        assert_eq!(m.fp, count(true, 0));
        assert_eq!(m.tn, count(false, 0));
        assert_eq!(m.total(), preds.len() as u64);
    }
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (preds, labels) = random_scores(&mut rng);
        let (roc, auc) = roc_auc(&preds, &labels).unwrap();
        assert!((auc - pairwise_auc(&preds, &labels)).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&auc));
        assert_eq!(roc.first().unwrap().threshold, f64::INFINITY);
        assert_eq!(roc.last().unwrap().threshold, f64::NEG_INFINITY);
        for w in roc.windows(2) {
            assert!(w[1].threshold < w[0].threshold);
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }
}

#[test]
fn auc_invariant_under_monotone_transform_and_shuffle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (preds, labels) = random_scores(&mut rng);
        let (_, auc) = roc_auc(&preds, &labels).unwrap();
        let warped: Vec<f64> = preds.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
        assert!((roc_auc(&warped, &labels).unwrap().1 - auc).abs() < 1e-12);
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        idx.shuffle(&mut rng);
        let sp: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let sl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        assert!((roc_auc(&sp, &sl).unwrap().1 - auc).abs() < 1e-12);
        assert_eq!(confusion(&sp, &sl, 0.5).unwrap(), confusion(&preds, &labels, 0.5).unwrap());
    }
}

#[test]
fn outcome_maps_and_frames_reconcile_with_global_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut frames = Vec::new();
    let mut cells = Vec::new();
    for frame in 0..6u32 {
        for row in 0..5u32 {
            for col in 0..7u32 {
                preds.push(rng.random::<f64>());
                labels.push(u8::from(rng.random_bool(0.25)));
                frames.push(frame);
                cells.push((row, col));
            }
        }
    }
    let global = confusion(&preds, &labels, 0.5).unwrap();
    let series = per_frame_series(&preds, &labels, &frames, &[0, 1, 2, 3, 4, 5, 6], 0.5).unwrap();
    assert_eq!(series.len(), 7);
    assert_eq!(series[6].scores.csi, None);
    let pooled = series.iter().fold(ConfusionMatrix::default(), |a, f| a + f.matrix);
    assert_eq!(pooled, global);
    for f in 0..6u32 {
        let idx: Vec<usize> = (0..preds.len()).filter(|&i| frames[i] == f).collect();
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let c: Vec<(u32, u32)> = idx.iter().map(|&i| cells[i]).collect();
        let map = outcome_map(&p, &l, &c, f, 0.5).unwrap();
        assert_eq!(map.confusion(), confusion(&p, &l, 0.5).unwrap());
        assert_eq!(map.confusion(), series[f as usize].matrix);
    }
}

fn stationary_event(noise: f64) -> (SynthConfig, nowcast_core::synth::GridSequence) {
    let cfg = SynthConfig {
        ny: 36,
        nx: 36,
        frames: 8,
        noise_dbz: noise,
        ..SynthConfig::default()
    };
    let storm = |y, x, peak| Storm {
        origin: (y, x),
        velocity: (0.0, 0.0),
        peak_dbz: peak,
        horizontal_scale: 4.0,
        vertical_center: 6.0,
        vertical_scale: 4.0,
        start: -100.0,
        growth: 1.0,
        plateau: 1000.0,
        decay: 1.0,
        w_amplitude: 5.0,
        pt_amplitude: 2.0,
    };
    let storms = [storm(10.0, 12.0, 60.0), storm(25.0, 26.0, 50.0)];
    let seq = render_event(&cfg, &storms, &mut ChaCha8Rng::seed_from_u64(0), "still").unwrap();
    (cfg, seq)
}

#[test]
fn persistence_is_perfect_on_stationary_storms() {
    for (noise, floor) in [(0.0, 1.0), (2.0, 0.8)] {
        let (_, seq) = stationary_event(noise);
        let norm = fit_normalizer(&[&seq]).unwrap();
        let samples = enumerate_samples(&seq, 0).unwrap();
        let blocks: Vec<Vec<f32>> = samples.iter().map(|s| assemble_block(&seq, &norm, s.key).unwrap()).collect();
        let preds = persistence_baseline(blocks.iter().map(|b| b.as_slice()), &norm).unwrap();
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let m = confusion(&preds, &labels, 0.5).unwrap();
        assert!(m.tp > 0);
        let csi = skill_scores(&m).csi.unwrap();
        assert!(csi >= floor, "noise {noise}: csi {csi}");
    }
}

#[test]
fn persistence_examples() {
    let (_, seq) = stationary_event(0.0);
    let norm = fit_normalizer(&[&seq]).unwrap();
    let samples = enumerate_samples(&seq, 0).unwrap();
    let storm_cell = samples.iter().find(|s| (s.key.row, s.key.col) == (1, 2)).unwrap();
    let clear_cell = samples.iter().find(|s| (s.key.row, s.key.col) == (4, 1)).unwrap();
    let a = assemble_block(&seq, &norm, storm_cell.key).unwrap();
    let b = assemble_block(&seq, &norm, clear_cell.key).unwrap();
    assert_eq!(persistence_baseline([a.as_slice(), b.as_slice()], &norm).unwrap(), vec![1.0, 0.0]);
}

proptest! {
    #[test]
    fn csi_never_exceeds_pod(tp in 0u64..100, fn_ in 0u64..100, fp in 0u64..100, tn in 0u64..100) {
        let s = skill_scores(&ConfusionMatrix { tp, fn_, fp, tn });
        if let (Some(pod), Some(csi)) = (s.pod, s.csi) {
            prop_assert!(csi <= pod);
        }
        for v in [s.pod, s.far, s.csi].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

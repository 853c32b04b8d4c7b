use super::*;

fn acts(values: &[(f64, f64)]) -> Vec<PrimitiveAction> {
    values.iter().map(|&(x, y)| PrimitiveAction::new(x, y)).collect()
}

fn constant(n: usize, v: f64) -> Vec<PrimitiveAction> {
    acts(&vec![(v, v); n])
}

#[test]
fn window_counts() {
    let cfg = WindowConfig::default();
    assert_eq!(slice_windows(&constant(10, 0.1), &cfg).len(), 7);
    assert_eq!(slice_windows(&constant(4, 0.1), &cfg).len(), 1);
    assert!(slice_windows(&constant(3, 0.1), &cfg).is_empty());
}

#[test]
fn adjacent_windows_overlap_by_three() {
    let cfg = WindowConfig::default();
    let seq = acts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)]);
    let w = slice_windows(&seq, &cfg);
    assert_eq!(w.len(), 2);
    // window 0 steps 0..4, window 1 steps 1..5: steps 1..4 shared
    assert_eq!(&w[0][2..8], &w[1][0..6]);
}

#[test]
fn identical_windows_encode_identically_and_reconstruct() {
    let cfg = WindowConfig {
        epochs: 400,
        ..WindowConfig::default()
    };
    let windows: Vec<Vec<f64>> = vec![vec![0.5, -0.25, 0.5, -0.25, 0.5, -0.25, 0.5, -0.25]; 64];
    let enc = train_window_ae(&windows, &cfg, 1).unwrap();
    assert!(
        *enc.training_loss.last().unwrap() < 1e-4,
        "final loss {}",
        enc.training_loss.last().unwrap()
    );
    let codes: Vec<Vec<f64>> = windows.iter().map(|w| enc.encode(w).unwrap()).collect();
    for c in &codes[1..] {
        for (a, b) in c.iter().zip(&codes[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn training_loss_smoothed_non_increasing() {
    let (corpus, _) = synthetic_regime_corpus(5, 3, 9);
    let cfg = WindowConfig::default();
    let windows: Vec<Vec<f64>> = corpus.iter().flat_map(|a| slice_windows(a, &cfg)).collect();
    let enc = train_window_ae(&windows, &cfg, 3).unwrap();
    let smoothed: Vec<f64> = enc
        .training_loss
        .windows(10)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    for pair in smoothed.windows(2) {
        assert!(pair[1] <= pair[0] * 1.05, "smoothed loss increased: {pair:?}");
    }
}

#[test]
fn training_is_seed_deterministic() {
    let windows: Vec<Vec<f64>> = (0..40)
        .map(|i| (0..8).map(|j| ((i * 8 + j) as f64).sin()).collect())
        .collect();
    let cfg = WindowConfig {
        epochs: 20,
        ..WindowConfig::default()
    };
    let a = train_window_ae(&windows, &cfg, 5).unwrap();
    let b = train_window_ae(&windows, &cfg, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_sequence_has_near_zero_distances() {
    let cfg = WindowConfig {
        epochs: 100,
        ..WindowConfig::default()
    };
    let seq = constant(30, 0.4);
    let windows = slice_windows(&seq, &cfg);
    let enc = train_window_ae(&windows, &cfg, 2).unwrap();
    let d = distance_series(&enc, &windows).unwrap();
    assert_eq!(d.len(), windows.len() - 1);
    assert!(d.iter().all(|v| *v < 1e-6), "distances {d:?}");
}

#[test]
fn identical_adjacent_windows_give_exact_zero() {
    let cfg = WindowConfig::default();
    let windows = vec![vec![0.1; 8], vec![0.1; 8]];
    let enc = train_window_ae(&windows, &cfg, 1).unwrap();
    let d = distance_series(&enc, &windows).unwrap();
    assert_eq!(d, vec![0.0]);
}

#[test]
fn step_change_distance_peaks_near_change_point() {
    let cfg = WindowConfig::default();
    let mut seq = constant(20, 0.0);
    seq.extend(constant(20, 1.0));
    let windows = slice_windows(&seq, &cfg);
    let enc = train_window_ae(&windows, &cfg, 4).unwrap();
    let d = distance_series(&enc, &windows).unwrap();
    let argmax = d
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    // The change is at action 20; the distance index straddling it is the
    // pair of windows around window 17..20.
    let change_window = 20 - cfg.window_size / 2 - 1;
    assert!(
        (argmax as i64 - change_window as i64).abs() <= cfg.window_size as i64 / 2 + 1,
        "argmax {argmax}, expected near {change_window}"
    );
}

#[test]
fn peak_rule_examples() {
    let cfg = WindowConfig::default();
    // flat series
    assert!(find_peaks(&vec![0.3; 30], &cfg).is_empty());
    // single spike
    let mut spike = vec![0.0; 21];
    spike[9] = 1.0;
    assert_eq!(find_peaks(&spike, &cfg), vec![9]);
    // monotone with increments below the margin
    let mono: Vec<f64> = (0..40).map(|i| i as f64 * 0.01).collect();
    assert!(find_peaks(&mono, &cfg).is_empty());
}

#[test]
fn peak_rule_is_idempotent_and_sorted() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = WindowConfig::default();
    for _ in 0..50 {
        let d: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p1 = find_peaks(&d, &cfg);
        let p2 = find_peaks(&d, &cfg);
        assert_eq!(p1, p2);
        assert!(p1.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn tie_goes_to_smaller_index_with_zero_margin() {
    let cfg = WindowConfig {
        peak_margin: 0.0,
        ..WindowConfig::default()
    };
    let mut d = vec![0.0; 15];
    d[6] = 1.0;
    d[8] = 1.0;
    let peaks = find_peaks(&d, &cfg);
    assert_eq!(peaks, vec![6]);
}

#[test]
fn segmentation_tiles_episode() {
    let cfg = WindowConfig::default();
    let seq = constant(25, 0.2);
    // no peaks -> one segment
    let segs = segment_episode(&seq, &[], &cfg, 0);
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].len(), 25);
    // one mid peak -> two segments summing to the episode
    let segs = segment_episode(&seq, &[10], &cfg, 0);
    assert_eq!(segs.len(), 2);
    assert_eq!(segs.iter().map(|s| s.len()).sum::<usize>(), 25);
    assert_eq!(segs[0].end, segs[1].start);
}

#[test]
fn short_trailing_segment_merges_into_predecessor() {
    let cfg = WindowConfig::default();
    let seq = constant(20, 0.2);
    // peak that would cut a length-1 tail at 19
    let segs = segment_episode(&seq, &[16], &cfg, 0);
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].len(), 20);
}

#[test]
fn planted_boundaries_recovered() {
    let (corpus, planted) = synthetic_regime_corpus(50, 5, 42);
    let cfg = WindowConfig::default();
    let (segments, _, _) = segment_corpus(&corpus, &cfg, 7).unwrap();

    let mut recovered = 0usize;
    let mut matched = 0usize;
    for (ep, segs) in segments.iter().enumerate() {
        // tiling invariant
        let mut rebuilt = Vec::new();
        for s in segs {
            assert_eq!(s.start, rebuilt.len());
            rebuilt.extend(s.actions.clone());
        }
        assert_eq!(rebuilt, corpus[ep]);

        for s in segs.iter().skip(1) {
            recovered += 1;
            if planted[ep]
                .iter()
                .any(|&b| (s.start as i64 - b as i64).abs() <= 2)
            {
                matched += 1;
            }
        }
    }
    assert!(recovered > 0, "no cuts recovered at all");
    let precision = matched as f64 / recovered as f64;
    assert!(
        precision >= 0.8,
        "only {matched}/{recovered} cuts near planted boundaries"
    );
}

#[test]
fn empty_corpus_is_usage_error() {
    let cfg = WindowConfig::default();
    assert!(matches!(
        segment_corpus(&[], &cfg, 0),
        Err(Error::Usage(_))
    ));
}

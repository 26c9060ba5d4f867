use std::collections::BTreeSet;

use proptest::prelude::*;
use watchanxiety::data::{export_dataset, generate_synthetic, ingest_dataset, DatasetPaths, IngestOptions, SynthConfig};
use watchanxiety::evaluation::{compute_metrics, plan_lfocv, FoldConfig, ParticipantLabels, PredictionRecord, Stage};
use watchanxiety::nn::{BatchNorm, GlobalAvgPool, Mode, Tensor};
use watchanxiety::recurrence::{embed, rasterize, recurrence_matrix, EmbeddingParams, Threshold};

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        n_participants: 4,
        n_days: 1,
        emas_per_day: 3,
        ..SynthConfig::default()
    }
}

#[test]
fn export_then_ingest_preserves_the_dataset() {
    let ds = generate_synthetic(&small_synth(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    let back = ingest_dataset(&DatasetPaths::in_dir(dir.path()), IngestOptions::default()).unwrap();
    assert_eq!(back.participants.len(), ds.participants.len());
    for (a, b) in ds.participants.iter().zip(&back.participants) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.emas, b.emas);
        assert_eq!(a.probes, b.probes);
        assert_eq!(a.traits, b.traits);
    }
}

fn record(pid: usize, k: usize, label: u8, pred: u8) -> PredictionRecord {
    PredictionRecord {
        window: "w".into(),
        condition: "c".into(),
        participant_id: format!("p{pid}"),
        ema_timestamp: k as f64,
        label,
        tl_probability: None,
        meta_probability: None,
        predicted_class: pred,
        fold_id: 0,
        tl_fold_id: None,
        stage: Stage::Meta,
        model_hash: None,
    }
}

fn labelled_pairs() -> impl Strategy<Value = Vec<(usize, u8, u8)>> {
    prop::collection::vec((0usize..4, 0u8..2, 0u8..2), 4..80).prop_filter("both classes", |v| {
        v.iter().any(|x| x.1 == 0) && v.iter().any(|x| x.1 == 1)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recurrence_matrix_is_symmetric_with_unit_diagonal(series in prop::collection::vec(-50.0f64..50.0, 8..60)) {
        let params = EmbeddingParams::default();
        let pts = embed(&series, &params).unwrap();
        let m = recurrence_matrix(&pts, &params).unwrap().matrix;
        for i in 0..m.n() {
            prop_assert!(m.get(i, i));
            for j in 0..m.n() {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn target_rate_matrix_ignores_rescaling(
        series in prop::collection::vec(-5.0f64..5.0, 10..50),
        scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 8.0]),
    ) {
        // Power-of-two scales keep every distance comparison exact.
        let params = EmbeddingParams { threshold: Threshold::TargetRate { rate: 0.2 }, ..EmbeddingParams::default() };
        let moved: Vec<f64> = series.iter().map(|x| x * scale).collect();
        let a = recurrence_matrix(&embed(&series, &params).unwrap(), &params).unwrap().matrix;
        let b = recurrence_matrix(&embed(&moved, &params).unwrap(), &params).unwrap().matrix;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rasterising_at_full_size_is_the_identity(series in prop::collection::vec(-5.0f64..5.0, 6..30)) {
        let params = EmbeddingParams::default();
        let m = recurrence_matrix(&embed(&series, &params).unwrap(), &params).unwrap().matrix;
        let plot = rasterize::<f64>(&m, m.n());
        for i in 0..m.n() {
            for j in 0..m.n() {
                prop_assert_eq!(plot.pixel(i, j) == 1.0, m.get(i, j));
            }
        }
    }

    #[test]
    fn lfocv_partitions_participants(
        counts in prop::collection::vec((1usize..30, 1usize..30), 8..20),
        seed in any::<u64>(),
    ) {
        let people: Vec<ParticipantLabels> = counts
            .iter()
            .enumerate()
            .map(|(i, &(n0, n1))| ParticipantLabels { participant_id: format!("P{i:02}"), n0, n1 })
            .collect();
        let plan = plan_lfocv(&people, seed, &FoldConfig::default()).unwrap();
        let mut tested = Vec::new();
        for f in &plan.folds {
            let test: BTreeSet<_> = f.test.iter().collect();
            let val: BTreeSet<_> = f.val.iter().collect();
            let train: BTreeSet<_> = f.train.iter().collect();
            prop_assert!(test.is_disjoint(&val) && test.is_disjoint(&train) && val.is_disjoint(&train));
            prop_assert_eq!(test.len() + val.len() + train.len(), people.len());
            tested.extend(f.test.iter().cloned());
        }
        tested.sort();
        let all: Vec<String> = people.iter().map(|p| p.participant_id.clone()).collect();
        prop_assert_eq!(tested, all);
    }

    #[test]
    fn metrics_do_not_depend_on_record_order(pairs in labelled_pairs(), rot in 0usize..80) {
        let recs: Vec<_> = pairs.iter().enumerate().map(|(k, &(p, l, y))| record(p, k, l, y)).collect();
        let mut shuffled = recs.clone();
        let r = rot % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        prop_assert_eq!(compute_metrics(&recs).unwrap(), compute_metrics(&shuffled).unwrap());
    }

    #[test]
    fn swapping_classes_swaps_recall_and_specificity(pairs in labelled_pairs()) {
        let recs: Vec<_> = pairs.iter().enumerate().map(|(k, &(p, l, y))| record(p, k, l, y)).collect();
        let flipped: Vec<_> = pairs.iter().enumerate().map(|(k, &(p, l, y))| record(p, k, 1 - l, 1 - y)).collect();
        let a = compute_metrics(&recs).unwrap();
        let b = compute_metrics(&flipped).unwrap();
        prop_assert!((a.recall - b.specificity).abs() < 1e-12);
        prop_assert!((a.specificity - b.recall).abs() < 1e-12);
        prop_assert!((a.balanced_accuracy - b.balanced_accuracy).abs() < 1e-12);
        prop_assert!((a.weighted_f1 - b.weighted_f1).abs() < 1e-12);
    }

    #[test]
    fn global_average_of_a_constant_map_is_that_constant(c in -10.0f64..10.0, side in 1usize..6) {
        let x = Tensor::new(vec![2, 3, side, side], vec![c; 2 * 3 * side * side]).unwrap();
        let y = GlobalAvgPool::default().forward(&x, false).unwrap();
        prop_assert_eq!(y.shape(), &[2usize, 3][..]);
        for v in y.data() {
            prop_assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_standardises_each_channel_in_training(data in prop::collection::vec(-5.0f64..5.0, 32)) {
        prop_assume!(data.iter().any(|&v| (v - data[0]).abs() > 0.5));
        let mut values = data.clone();
        values.extend(data.iter().map(|v| 3.0 * v - 1.0));
        let x = Tensor::new(vec![4, 2, 2, 4], reorder(&values)).unwrap();
        let y = BatchNorm::new(2).forward(&x, Mode::Train, false).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.sample(n)[ch * 8..(ch + 1) * 8].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

/// Lays out two 32-value channels as `(N=4, C=2, 2, 4)`.
fn reorder(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(64);
    for n in 0..4 {
        for ch in 0..2 {
            out.extend_from_slice(&values[ch * 32 + n * 8..ch * 32 + (n + 1) * 8]);
        }
    }
    out
}

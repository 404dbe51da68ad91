mod common;

use flotapinn::data::{Column, Dataset, Split};
use flotapinn::preprocess::{iqr_filter, quartiles, ColumnStats};
use flotapinn::simulator::{simulate, SimConfig};
use flotapinn::train::{ModelKind, NeuralModel, Preset, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::reference_quartile;

#[test]
fn quartiles_match_order_statistic_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let n = rng.gen_range(2..300);
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let v: Vec<f64> = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let (q1, q3) = quartiles(&v).unwrap();
        assert!((q1 - reference_quartile(&v, 0.25)).abs() <= 1e-12 * scale);
        assert!((q3 - reference_quartile(&v, 0.75)).abs() <= 1e-12 * scale);
    }
}

#[test]
fn filter_finds_injected_outliers() {
    let (mut hit, mut tagged, mut false_pos, mut clean) = (0usize, 0usize, 0usize, 0usize);
    for seed in 0..20 {
        let out = simulate(&SimConfig::desk(seed)).unwrap();
        for split in Split::ALL {
            let nd = out.get(split);
            let rep = iqr_filter(&nd.dataset, &Column::FILTERABLE).unwrap();
            assert_eq!(rep.dataset.len() + rep.removed.len(), nd.dataset.len());
            let mut removed = vec![false; nd.dataset.len()];
            for &r in &rep.removed {
                removed[r] = true;
            }
            for (t, r) in nd.is_outlier().into_iter().zip(removed) {
                match (t, r) {
                    (true, true) => hit += 1,
                    (true, false) => {}
                    (false, true) => false_pos += 1,
                    (false, false) => clean += 1,
                }
                tagged += t as usize;
            }
        }
    }
    let recall = hit as f64 / tagged as f64;
    let fpr = false_pos as f64 / (false_pos + clean) as f64;
    assert!(recall >= 0.9, "recall {recall}");
    assert!(fpr <= 0.05, "false-positive rate {fpr}");
}

#[test]
fn scaled_grade_outliers_clear_the_clean_fence() {
    let (mut outside, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let noisy = simulate(&SimConfig::desk(seed)).unwrap();
        let mut cfg = SimConfig::desk(seed);
        cfg.outlier_rate = 0.0;
        let clean = simulate(&cfg).unwrap();
        for split in Split::ALL {
            let stats = ColumnStats::compute("C_f_conc", &clean.get(split).dataset.column(Column::Cf)).unwrap();
            let nd = noisy.get(split);
            for (&row, &col) in nd.outlier_rows.iter().zip(&nd.outlier_columns) {
                if col == Column::Cf {
                    total += 1;
                    outside += (nd.dataset.records[row].get(Column::Cf) > stats.upper_fence) as usize;
                }
            }
        }
    }
    assert!(total > 50);
    assert!(outside as f64 >= 0.95 * total as f64, "{outside}/{total}");
}

fn mean(d: &Dataset, c: Column) -> f64 {
    let v = d.column(c);
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn test_regime_is_shifted_by_the_configured_amount() {
    let cfg = SimConfig::clean(3);
    let out = simulate(&cfg).unwrap();
    for c in [Column::QFeed, Column::CFeed, Column::Qt, Column::QAir] {
        for split in [Split::Train, Split::Test] {
            let want = cfg.regimes.get(split).signal(c).unwrap();
            let t_mid = 0.5 * (cfg.sizes.get(split) - 1) as f64 * cfg.sample_interval_min;
            let expected = want.baseline + want.drift_per_min * t_mid;
            let got = mean(&out.get(split).dataset, c);
            assert!((got - expected).abs() <= 0.02 * expected, "{c:?} {split:?}: {got} vs {expected}");
        }
    }
}

#[test]
fn training_sees_raw_values() {
    let out = simulate(&SimConfig::desk(2)).unwrap();
    let d = &out.train.dataset;
    let c = TrainConfig::preset(Preset::Desk, ModelKind::DataDriven, 0);
    let m = NeuralModel::init(&c, d).unwrap();
    // the internal standardizer is fitted to the unscaled columns
    let col = Column::QFeed.index();
    assert!((m.input_std.mean[col] - mean(d, Column::QFeed)).abs() < 1e-9 * m.input_std.mean[col]);
    let targets = m.output_std.mean.clone();
    assert!((targets[1] - mean(d, Column::Cf)).abs() < 1e-9 * targets[1]);
}

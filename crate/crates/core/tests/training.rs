use flotapinn::nn::{FROTH_FRACTION_MAX, FROTH_FRACTION_MIN, TOTAL_VOLUME};
use flotapinn::simulator::{simulate, SimConfig};
use flotapinn::train::{train_model, ModelKind, Preset, Splits, TrainConfig, TrainedModel};

fn clean_desk() -> Splits {
    let out = simulate(&SimConfig::clean(0)).unwrap();
    Splits {
        train: out.train.dataset.clone(),
        val: out.val.dataset.clone(),
        test: out.test.dataset.clone(),
    }
}

#[test]
fn datadriven_fit_improves_tenfold() {
    let data = clean_desk();
    let c = TrainConfig::preset(Preset::Desk, ModelKind::DataDriven, 0);
    let (rep, _) = train_model(&c, &data).unwrap();
    let start = rep.initial_train_mse_u.unwrap();
    let at_best = rep.history[rep.best_epoch - 1].train_mse_u;
    let last = rep.history.last().unwrap().train_mse_u;
    assert!(start >= 10.0 * last, "{start} -> {last}");
    assert!(start >= 5.0 * at_best, "{start} -> {at_best}");
    let min_val = rep.history.iter().map(|h| h.val_mse_u).fold(f64::INFINITY, f64::min);
    assert!(rep.best_val_mse_u - min_val <= c.tolerance);
    assert!(rep.steps <= c.max_steps);
}

#[test]
fn decoded_volumes_stay_in_bounds() {
    let data = clean_desk();
    for kind in [ModelKind::PinnBidirectional, ModelKind::PinnUnidirectional, ModelKind::PinnMassBalance] {
        let mut c = TrainConfig::preset(Preset::Desk, kind, 1);
        c.max_steps = 200;
        let (rep, model) = train_model(&c, &data).unwrap();
        let TrainedModel::Neural(m) = model else {
            panic!("neural kind produced a baseline")
        };
        let l = m.lambda().unwrap();
        assert_eq!(Some(l), rep.lambda);
        let frac = l.v_f / TOTAL_VOLUME;
        assert!((FROTH_FRACTION_MIN..=FROTH_FRACTION_MAX).contains(&frac));
        assert!((l.v_f + l.v_p - TOTAL_VOLUME).abs() < 1e-12);
        for h in &rep.history {
            assert!(h.train_loss >= h.train_mse_u);
        }
    }
}

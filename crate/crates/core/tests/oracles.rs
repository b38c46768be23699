mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use tsfound_core::eval::{mase, relative_geomean, smape};
use tsfound_core::tape::{LossSpec, Tape};
use tsfound_core::training::{mse_loss, quantile_loss};

#[test]
fn losses_and_metrics_match_oracles() {
    oracle_agreement(1000, 17).assert();
}

#[test]
fn tape_loss_matches_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let p_o = rng.random_range(1..6);
        let rows = rng.random_range(1..5);
        let batch = [1, rows][rng.random_range(0..2)];
        let levels = vec![0.1, 0.3, 0.5, 0.9];
        let width = levels.len() + 1;
        let pred: Vec<f64> = (0..rows * p_o * width).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets: Vec<f64> = (0..rows * p_o).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let p = tape.input(pred.clone(), rows, p_o * width);
        let spec = LossSpec { patch_len: p_o, quantiles: levels.clone(), batch, point_weight: 1.0, quantile_weight: 1.0 };
        let l = tape.forecast_loss(p, targets.clone(), spec);
        // per-sample mean over its horizon, then mean over samples
        let per_sample = rows / batch * p_o;
        let (mut mse, mut ql) = (0.0, 0.0);
        for s in 0..batch {
            let ts = &targets[s * per_sample..(s + 1) * per_sample];
            let point: Vec<f64> = (0..per_sample).map(|i| pred[(s * per_sample + i) * width]).collect();
            let qs: Vec<Vec<f64>> = (0..per_sample)
                .map(|i| pred[(s * per_sample + i) * width + 1..(s * per_sample + i + 1) * width].to_vec())
                .collect();
            mse += oracle_mse(ts, &point) / batch as f64;
            ql += oracle_ql(ts, &qs, &levels) / batch as f64;
        }
        let terms = tape.loss_terms(l).unwrap();
        assert!((terms.mse - mse).abs() < 1e-12 && (terms.ql - ql).abs() < 1e-12);
        assert!((tape.value(l)[0] - (mse + ql)).abs() < 1e-12);
    }
}

#[test]
fn documented_examples() {
    assert!((mse_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]) - 4.0 / 3.0).abs() < 1e-15);
    // under-prediction at q = 0.9 costs 0.9 per unit, over-prediction 0.1
    assert!((quantile_loss(&[1.0], &[vec![0.0]], &[0.9]) - 0.9).abs() < 1e-15);
    assert!((quantile_loss(&[0.0], &[vec![1.0]], &[0.9]) - 0.1).abs() < 1e-15);
    assert_eq!(smape(&[0.0, 2.0], &[0.0, 2.0]), 0.0);
    assert_eq!(mase(&[1.0], &[1.0], &[5.0, 5.0, 5.0], 1), None);
    let m = |v: &[(&str, f64)]| v.iter().map(|(k, x)| (k.to_string(), Some(*x))).collect::<BTreeMap<_, _>>();
    let g = relative_geomean(&m(&[("a", 0.8), ("b", 0.9), ("c", 1.0)]), &m(&[("a", 1.0), ("b", 1.0), ("c", 1.0)]));
    assert!((g.value.unwrap() - 0.8963).abs() < 1e-4);
}

proptest! {
    #[test]
    fn geomean_ignores_dataset_order(vals in prop::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..8)) {
        let names: Vec<String> = (0..vals.len()).map(|i| format!("d{i:02}")).collect();
        let fwd = |rev: bool| {
            let mut order: Vec<usize> = (0..vals.len()).collect();
            if rev { order.reverse(); }
            let model: BTreeMap<String, Option<f64>> = order.iter().map(|&i| (names[i].clone(), Some(vals[i].0))).collect();
            let base: BTreeMap<String, Option<f64>> = order.iter().map(|&i| (names[i].clone(), Some(vals[i].1))).collect();
            relative_geomean(&model, &base).value.unwrap()
        };
        prop_assert_eq!(fwd(false), fwd(true));
    }

    #[test]
    fn pinball_is_minimized_at_the_quantile(q in 0.05f64..0.95, xs in prop::collection::vec(-5.0f64..5.0, 5..40)) {
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let k = ((q * xs.len() as f64).ceil() as usize).max(1) - 1;
        let cost = |c: f64| xs.iter().map(|&x| oracle_pinball(x, c, q)).sum::<f64>();
        let best = cost(sorted[k]);
        for probe in [-6.0, -1.0, 0.0, 1.0, 6.0, sorted[0], sorted[xs.len() - 1]] {
            prop_assert!(best <= cost(probe) + 1e-9);
        }
    }
}

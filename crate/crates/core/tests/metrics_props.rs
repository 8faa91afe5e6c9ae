use minusformer::metrics::{mae, mape, mase, mse, quantile_loss, rmsp, smape, MetricsReport};
use proptest::prelude::*;

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0..100.0f64, n),
            prop::collection::vec(-100.0..100.0f64, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn smape_is_bounded((y, f) in vec_pair()) {
        if let Ok(s) = smape(&y, &f) {
            prop_assert!((0.0..=2.0 + 1e-12).contains(&s));
        }
    }

    #[test]
    fn quantile_swap_symmetry((y, f) in vec_pair(), q in 0.01..0.99f64) {
        let a = quantile_loss(&y, &f, q).unwrap();
        let b = quantile_loss(&f, &y, 1.0 - q).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn median_quantile_is_half_mae((y, f) in vec_pair()) {
        let q = quantile_loss(&y, &f, 0.5).unwrap();
        prop_assert!((q - 0.5 * mae(&y, &f).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn mse_dominates_mae_squared((y, f) in vec_pair()) {
        let a = mae(&y, &f).unwrap();
        prop_assert!(mse(&y, &f).unwrap() + 1e-9 >= a * a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn scale_free_metrics_ignore_units((y, f) in vec_pair(), k in 0.1..50.0f64) {
        let ys: Vec<f64> = y.iter().map(|v| v * k).collect();
        let fs: Vec<f64> = f.iter().map(|v| v * k).collect();
        let pairs: [(Result<f64, _>, Result<f64, _>); 3] = [
            (mape(&y, &f), mape(&ys, &fs)),
            (smape(&y, &f), smape(&ys, &fs)),
            (rmsp(&y, &f), rmsp(&ys, &fs)),
        ];
        for (a, b) in pairs {
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
        if let (Ok(a), Ok(b)) = (mase(&y, &f, 1), mase(&ys, &fs, 1)) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn report_overall_is_mean_of_mse_and_mae((y, f) in vec_pair()) {
        let r = MetricsReport::compute(&y, &f, 1).unwrap();
        prop_assert_eq!(r.overall, (r.mse + r.mae) / 2.0);
    }
}

//! Forecast accuracy metrics. All functions flatten their inputs and pool
//! over every element.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

fn check_len(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::shape("metrics", &[y.len()], &[yhat.len()]));
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    let mut s = 0.0;
    for (i, (a, b)) in y.iter().zip(yhat).enumerate() {
        if *a == 0.0 {
            return Err(Error::DivisionDomain { metric: "mape", index: i });
        }
        s += (a - b).abs() / a.abs();
    }
    Ok(s / y.len() as f64)
}

pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    let mut s = 0.0;
    for (i, (a, b)) in y.iter().zip(yhat).enumerate() {
        let denom = a.abs() + b.abs();
        if denom == 0.0 {
            return Err(Error::DivisionDomain { metric: "smape", index: i });
        }
        s += (a - b).abs() / denom;
    }
    Ok(2.0 * s / y.len() as f64)
}

/// Median; for an even count, the mean of the two central values.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Root of the median squared relative error.
pub fn rmsp(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    let mut sq = Vec::with_capacity(y.len());
    for (i, (a, b)) in y.iter().zip(yhat).enumerate() {
        if *a == 0.0 {
            return Err(Error::DivisionDomain { metric: "rmsp", index: i });
        }
        sq.push(((a - b) / a).powi(2));
    }
    Ok(median(&mut sq).sqrt())
}

/// Mean absolute error scaled by the in-sample MAE of the `m`-lag naive
/// forecaster on `y`.
pub fn mase(y: &[f64], yhat: &[f64], m: usize) -> Result<f64> {
    check_len(y, yhat)?;
    let n = y.len();
    if m == 0 || n <= m {
        return Err(Error::SeriesTooShort { len: n, m });
    }
    let naive = (m..n).map(|i| (y[i] - y[i - m]).abs()).sum::<f64>() / (n - m) as f64;
    if naive == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(mae(y, yhat)? / naive)
}

/// Pinball loss: over-predictions weigh `1 - q`, under-predictions `q`.
pub fn quantile_loss(y: &[f64], yhat: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidQuantile(q));
    }
    check_len(y, yhat)?;
    let s: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let e = (a - b).abs();
            if b >= a {
                (1.0 - q) * e
            } else {
                q * e
            }
        })
        .sum();
    Ok(s / y.len() as f64)
}

pub fn overall_score(mse: f64, mae: f64) -> f64 {
    (mse + mae) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pointwise {
    pub mse: f64,
    pub mae: f64,
    pub mape: f64,
    pub smape: f64,
    pub rmsp: f64,
}

pub fn pointwise_metrics(y: &[f64], yhat: &[f64]) -> Result<Pointwise> {
    Ok(Pointwise {
        mse: mse(y, yhat)?,
        mae: mae(y, yhat)?,
        mape: mape(y, yhat)?,
        smape: smape(y, yhat)?,
        rmsp: rmsp(y, yhat)?,
    })
}

pub const DEFAULT_QUANTILES: [f64; 3] = [0.25, 0.5, 0.75];

/// Fixed column order of [`MetricsReport::to_csv_row`].
pub const METRICS_COLUMNS: [&str; 11] = [
    "n", "mse", "mae", "rmsp", "mape", "smape", "mase", "q25", "q50", "q75", "overall",
];

/// All metrics for one evaluation. Metrics that are undefined on the given
/// data (a zero target for the percentage metrics, a constant series for
/// MASE) are `None` and serialize as empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub rmsp: Option<f64>,
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub mase: Option<f64>,
    pub mase_m: usize,
    /// Keyed by `q * 100`, e.g. 25 for q = 0.25.
    pub quantile: BTreeMap<u32, f64>,
    pub overall: f64,
}

impl MetricsReport {
    pub fn compute(y: &[f64], yhat: &[f64], mase_m: usize) -> Result<Self> {
        let mse = mse(y, yhat)?;
        let mae = mae(y, yhat)?;
        let mut quantile = BTreeMap::new();
        for q in DEFAULT_QUANTILES {
            quantile.insert((q * 100.0).round() as u32, quantile_loss(y, yhat, q)?);
        }
        Ok(Self {
            n: y.len(),
            mse,
            mae,
            rmsp: rmsp(y, yhat).ok(),
            mape: mape(y, yhat).ok(),
            smape: smape(y, yhat).ok(),
            mase: mase(y, yhat, mase_m).ok(),
            mase_m,
            quantile,
            overall: overall_score(mse, mae),
        })
    }

    pub fn to_csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let q = |k: u32| opt(self.quantile.get(&k).copied());
        vec![
            self.n.to_string(),
            self.mse.to_string(),
            self.mae.to_string(),
            opt(self.rmsp),
            opt(self.mape),
            opt(self.smape),
            opt(self.mase),
            q(25),
            q(50),
            q(75),
            self.overall.to_string(),
        ]
    }

    /// Writes a header plus one row per labelled report. The label column is
    /// omitted when `label_header` is `None`.
    pub fn write_csv(path: &Path, label_header: Option<&str>, rows: &[(String, MetricsReport)]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = label_header.into_iter().collect();
        header.extend(METRICS_COLUMNS);
        w.write_record(&header)?;
        for (label, r) in rows {
            let mut rec: Vec<String> = label_header.map(|_| label.clone()).into_iter().collect();
            rec.extend(r.to_csv_row());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast_is_zero() {
        let y = [1.0, -2.0, 3.5];
        let p = pointwise_metrics(&y, &y).unwrap();
        assert_eq!(p, Pointwise { mse: 0.0, mae: 0.0, mape: 0.0, smape: 0.0, rmsp: 0.0 });
        assert_eq!(mase(&y, &y, 1).unwrap(), 0.0);
    }

    #[test]
    fn single_point_hand_values() {
        let p = pointwise_metrics(&[1.0], &[3.0]).unwrap();
        assert_eq!((p.mse, p.mae, p.mape, p.smape), (4.0, 2.0, 2.0, 1.0));
    }

    #[test]
    fn rmsp_even_median() {
        let r = rmsp(&[2.0, 4.0], &[1.0, 4.0]).unwrap();
        assert!((r - 0.125f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(mape(&[0.0, 1.0], &[1.0, 1.0]), Err(Error::DivisionDomain { metric: "mape", index: 0 })));
        assert!(matches!(smape(&[1.0, 0.0], &[1.0, 0.0]), Err(Error::DivisionDomain { metric: "smape", index: 1 })));
        assert!(matches!(rmsp(&[0.0], &[1.0]), Err(Error::DivisionDomain { .. })));
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mase_cases() {
        assert_eq!(mase(&[1., 2., 3.], &[2., 3., 4.], 1).unwrap(), 1.0);
        assert!(matches!(mase(&[5., 5., 5.], &[1., 2., 3.], 1), Err(Error::ZeroDenominator)));
        assert!(matches!(mase(&[1., 2.], &[1., 2.], 2), Err(Error::SeriesTooShort { .. })));
    }

    #[test]
    fn quantile_cases() {
        assert_eq!(quantile_loss(&[0.0], &[2.0], 0.5).unwrap(), 1.0);
        assert_eq!(quantile_loss(&[2.0], &[0.0], 0.25).unwrap(), 0.5);
        let y = [1.0, 4.0, -2.0];
        let f = [0.0, 5.0, 1.0];
        assert_eq!(quantile_loss(&y, &f, 0.5).unwrap(), 0.5 * mae(&y, &f).unwrap());
        assert!(matches!(quantile_loss(&y, &f, 1.0), Err(Error::InvalidQuantile(_))));
    }

    #[test]
    fn overall_is_mean() {
        assert_eq!(overall_score(0.0, 0.0), 0.0);
        assert!((overall_score(0.289, 0.340) - 0.3145).abs() < 1e-12);
        assert_eq!(overall_score(0.7, 0.7), 0.7);
    }

    #[test]
    fn report_row_has_fixed_width() {
        let r = MetricsReport::compute(&[0.0, 1.0, 2.0], &[0.5, 1.0, 2.5], 1).unwrap();
        assert!(r.mape.is_none());
        assert_eq!(r.to_csv_row().len(), METRICS_COLUMNS.len());
        assert_eq!(r.overall, overall_score(r.mse, r.mae));
    }
}

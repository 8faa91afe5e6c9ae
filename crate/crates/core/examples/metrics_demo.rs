//! All forecast metrics on a toy forecast, including the cases where the
//! percentage metrics are undefined.

use minusformer::metrics::{MetricsReport, METRICS_COLUMNS};

fn main() -> minusformer::Result<()> {
    let y = [10.0, 12.0, 11.5, 13.0, 12.5, 14.0];
    let yhat = [10.4, 11.1, 11.9, 12.6, 13.1, 13.2];
    let with_zero = [0.0, 12.0, 11.5, 13.0, 12.5, 14.0];

    for (name, target) in [("positive", &y), ("zero target", &with_zero)] {
        let r = MetricsReport::compute(target, &yhat, 1)?;
        println!("{name}:");
        for (k, v) in METRICS_COLUMNS.iter().zip(r.to_csv_row()) {
            let v = if v.is_empty() { "undefined".to_string() } else { v };
            println!("  {k:<8} {v}");
        }
    }
    Ok(())
}

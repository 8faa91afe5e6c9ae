//! Train all eight sign/gate variants on a small synthetic task and print
//! one metrics row per variant.
//!
//! cargo run --release --example ablation_grid -- [epochs]

use minusformer::cli::run_ablation;
use minusformer::data::{synth_series, Prepared, SplitSpec, SynthKind, WindowSpec};
use minusformer::model::MinusformerConfig;
use minusformer::train::TrainConfig;

fn main() -> minusformer::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let table = synth_series(SynthKind::TrendSine, 1500, 3, 0.1, 7);
    let data = Prepared::new(&table, WindowSpec::new(48, 12), &SplitSpec::default())?;
    let base = MinusformerConfig::new(48, 12, 3).with_embed_dim(16);
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: epochs,
        ..TrainConfig::default()
    };

    println!("{:<10} {:>9} {:>9} {:>9}", "variant", "mse", "mae", "overall");
    for (label, r) in run_ablation(&base, &tcfg, &data)? {
        println!("{label:<10} {:>9.4} {:>9.4} {:>9.4}", r.mse, r.mae, r.overall);
    }
    Ok(())
}

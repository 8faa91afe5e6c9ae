//! Train a small model on a generated sine mixture and compare it with the
//! last-value baseline.
//!
//! cargo run --example train_synthetic -- [epochs] [lr]

use minusformer::data::{synth_series, Prepared, SplitSpec, SynthKind, WindowSpec};
use minusformer::model::{Minusformer, MinusformerConfig};
use minusformer::train::{naive_last_value_mse, train_loop, TrainConfig};

fn main() -> minusformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let table = synth_series(SynthKind::SineMix, 4000, 3, 0.1, 2024);
    let data = Prepared::new(&table, WindowSpec::new(96, 24), &SplitSpec::default())?;
    let mut cfg = MinusformerConfig::new(96, 24, 3).with_embed_dim(32);
    cfg.n_blocks = 2;
    let mut model = Minusformer::new(cfg)?;

    let train_cfg = TrainConfig {
        learning_rate: lr,
        max_epochs: epochs,
        verbose: true,
        ..TrainConfig::default()
    };
    let report = train_loop(&mut model, &data.train, &data.val, &data.test, &train_cfg)?;
    let naive = naive_last_value_mse(&data.test)?;
    println!("test mse     {:.5}", report.test.mse);
    println!("naive mse    {naive:.5}");
    println!("improvement  {:.1}%", 100.0 * (1.0 - report.test.mse / naive));
    println!("best epoch   {:?}", report.best_epoch);
    println!("wall time    {:.1}s", report.wall_time_secs);
    Ok(())
}

//! Per-block outputs of a briefly trained model on one test window: each
//! block prediction, the running output stream, and a check that the
//! alternating sum reproduces the final forecast.
//!
//! cargo run --release --example decompose_blocks

use minusformer::data::{stack_windows, synth_series, Prepared, SplitSpec, SynthKind, WindowSpec};
use minusformer::model::{export_trace, telescoped_output, BlockOutputKind, Minusformer, MinusformerConfig};
use minusformer::train::{train_loop, TrainConfig};

fn main() -> minusformer::Result<()> {
    let table = synth_series(SynthKind::SineMix, 1200, 2, 0.05, 3);
    let data = Prepared::new(&table, WindowSpec::new(48, 12), &SplitSpec::default())?;
    let mut cfg = MinusformerConfig::new(48, 12, 2).with_embed_dim(16);
    cfg.n_blocks = 4;
    let mut model = Minusformer::new(cfg)?;
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    train_loop(&mut model, &data.train, &data.val, &data.test, &tcfg)?;

    let (x, _) = stack_windows([&data.test[0]]);
    let (pred, trace) = model.forward(&x)?;
    let alt = telescoped_output(&trace);
    println!("max |alternating sum - output stream| = {:.2e}", alt.max_abs_diff(&trace.stream_out));

    let rows = export_trace(&trace, &data.scaler, 0);
    println!("first step of variate 0, original units:");
    for r in rows.iter().filter(|r| r.variate == 0 && r.step == 0) {
        let kind = match r.kind {
            BlockOutputKind::Block => "block",
            BlockOutputKind::Cumulative => "stream",
        };
        println!("  block {} {kind:<6} {:>9.4}", r.block, r.value);
    }
    let final_std = pred.at(&[0, 0, 0]) * data.scaler.std[0] + data.scaler.mean[0];
    println!("  forecast          {final_std:>9.4}");
    Ok(())
}

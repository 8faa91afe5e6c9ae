//! Train, save a checkpoint, load it back and evaluate both copies.
//!
//! cargo run --release --example evaluate_checkpoint

use minusformer::checkpoint::Checkpoint;
use minusformer::data::{synth_series, Prepared, SplitSpec, SynthKind, WindowSpec};
use minusformer::model::{Minusformer, MinusformerConfig};
use minusformer::train::{evaluate_split, train_loop, TrainConfig};

fn main() -> minusformer::Result<()> {
    let table = synth_series(SynthKind::SineMix, 1000, 2, 0.1, 5);
    let data = Prepared::new(&table, WindowSpec::new(32, 8), &SplitSpec::default())?;
    let cfg = MinusformerConfig::new(32, 8, 2).with_embed_dim(16);
    let mut model = Minusformer::new(cfg)?;
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    train_loop(&mut model, &data.train, &data.val, &data.test, &tcfg)?;

    let path = std::env::temp_dir().join("minusformer_example_checkpoint.txt");
    Checkpoint::new(model.clone(), Some(data.scaler.clone())).save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!("saved {} parameters to {}", model.params.numel(), path.display());

    let a = evaluate_split(&model, &data.test, 64)?;
    let b = evaluate_split(&loaded.model, &data.test, 64)?;
    println!("test mse original {} / reloaded {}", a.mse, b.mse);
    println!("identical: {}", a == b);
    Ok(())
}

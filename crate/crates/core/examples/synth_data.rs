//! Generate the three synthetic series kinds and write them as CSV.
//!
//! cargo run --example synth_data -- [out_dir]

use std::path::PathBuf;

use minusformer::data::{synth_series, SynthKind};

fn main() -> minusformer::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_out".into()));
    std::fs::create_dir_all(&dir).map_err(|e| minusformer::Error::Io { path: dir.clone(), source: e })?;
    for kind in [SynthKind::SineMix, SynthKind::TrendSine, SynthKind::RandomWalk] {
        let t = synth_series(kind, 2000, 4, 0.1, 1);
        let path = dir.join(format!("{}.csv", kind.as_str()));
        t.write_csv(&path)?;
        let col = t.column(0);
        let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        println!("{:<12} {} rows x {} cols, v0 in [{lo:.3}, {hi:.3}] -> {}", kind.as_str(), t.len(), t.n_variates(), path.display());
    }
    Ok(())
}

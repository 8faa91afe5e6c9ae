//! Monte-Carlo check of subtractive versus additive aggregation of
//! correlated block errors.
//!
//! cargo run --release --example simulate_variance -- [trials]

use minusformer::ensemble::{simulate_grid, AggregationMode, EnsembleSpec};

fn main() -> minusformer::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let rows = simulate_grid(&[2, 4, 8, 16], &[0.1, 0.5, 0.9], 1.0, 1.0, trials, 2024)?;
    println!("{:>3} {:>4} {:>9} {:>10} {:>10} {:>8} pass", "L", "mu", "mode", "empirical", "analytic", "bound");
    for r in &rows {
        println!(
            "{:>3} {:>4} {:>9} {:>10.5} {:>10.5} {:>8.4} {}",
            r.spec.n_blocks,
            r.spec.mu,
            r.result.mode.as_str(),
            r.result.empirical_var,
            r.result.analytic_var,
            r.result.theorem_bound,
            r.pass
        );
    }

    let spec = EnsembleSpec::new(8, 1.0, 1.0, 0.5)?;
    println!(
        "\nL=8, mu=0.5: subtract {} add {} (approximation {}) bound {}",
        spec.analytic_variance(AggregationMode::Subtract),
        spec.analytic_variance(AggregationMode::Add),
        spec.approx_add_variance(),
        spec.theorem_bound()
    );
    Ok(())
}

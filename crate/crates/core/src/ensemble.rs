//! Monte-Carlo checks of the variance behaviour of alternating-sign block
//! aggregation.
//!
//! Block errors `e_1..e_L` are equicorrelated Gaussians with variance `ν` and
//! pairwise covariance `μ`. With `ℏ = L / 2` blocks per parity class, the
//! subtractive aggregate `(α/ℏ)(Σ_odd e - Σ_even e)` has variance
//! `(2/ℏ) α² (ν - μ)`, strictly below the bound `(4/L) α² (ν + μ)` for
//! `μ > 0`; the additive aggregate `(α/ℏ) Σ e` has variance
//! `(2/ℏ) α² ν + (4 - 2/ℏ) α² μ`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub n_blocks: usize,
    pub alpha: f64,
    pub nu: f64,
    pub mu: f64,
}

impl EnsembleSpec {
    pub fn new(n_blocks: usize, alpha: f64, nu: f64, mu: f64) -> Result<Self> {
        let s = Self {
            n_blocks,
            alpha,
            nu,
            mu,
        };
        s.validate()?;
        Ok(s)
    }

    /// The equicorrelated construction needs `0 <= μ <= ν`; the strict
    /// variance bound additionally needs `0 < μ < ν`, checked by the callers
    /// that assert it.
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::InvalidConfig("n_blocks must be >= 1".into()));
        }
        if !(self.nu > 0.0) {
            return Err(Error::NotPsd(format!("nu must be > 0, got {}", self.nu)));
        }
        if self.mu < 0.0 || self.mu > self.nu {
            return Err(Error::NotPsd(format!(
                "need 0 <= mu <= nu, got mu={} nu={}",
                self.mu, self.nu
            )));
        }
        if self.nu + (self.n_blocks as f64 - 1.0) * self.mu < 0.0 {
            return Err(Error::NotPsd("nu + (L-1) mu < 0".into()));
        }
        Ok(())
    }

    /// `ℏ = floor(L / 2)`.
    pub fn half_count(&self) -> usize {
        self.n_blocks / 2
    }

    /// `+1` for odd `L`, `-1` for even `L`.
    pub fn parity_sign(&self) -> f64 {
        if self.n_blocks % 2 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// `(4/L) α² (ν + μ)`.
    pub fn theorem_bound(&self) -> f64 {
        4.0 / self.n_blocks as f64 * self.alpha.powi(2) * (self.nu + self.mu)
    }

    pub fn analytic_variance(&self, mode: AggregationMode) -> f64 {
        let h = self.half_count() as f64;
        let a2 = self.alpha.powi(2);
        match mode {
            AggregationMode::Subtract => 2.0 / h * a2 * (self.nu - self.mu),
            AggregationMode::Add => 2.0 / h * a2 * self.nu + (4.0 - 2.0 / h) * a2 * self.mu,
        }
    }

    /// Variance of the aggregate without the `1/ℏ` normalization.
    pub fn unnormalized_variance(&self, mode: AggregationMode) -> f64 {
        let h = self.half_count() as f64;
        h * h * self.analytic_variance(mode)
    }

    /// The additive-variance approximation `(4/L) α² ν + 3 α² μ`, reported
    /// alongside the exact value.
    pub fn approx_add_variance(&self) -> f64 {
        let a2 = self.alpha.powi(2);
        4.0 / self.n_blocks as f64 * a2 * self.nu + 3.0 * a2 * self.mu
    }
}

/// Label noise `ε ~ N(0, ξ²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub xi: f64,
}

impl NoiseSpec {
    pub fn new(xi: f64) -> Result<Self> {
        if !(xi >= 0.0) || !xi.is_finite() {
            return Err(Error::InvalidConfig(format!("noise std must be >= 0, got {xi}")));
        }
        Ok(Self { xi })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationMode {
    Subtract,
    Add,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Subtract => "subtract",
            AggregationMode::Add => "add",
        }
    }
}

/// Draws `trials` rows of `L` equicorrelated errors via
/// `e_l = sqrt(μ) z + sqrt(ν - μ) w_l`. Row-major `[trials, L]`.
pub fn sample_block_errors(spec: &EnsembleSpec, trials: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    spec.validate()?;
    let (common, own) = (spec.mu.sqrt(), (spec.nu - spec.mu).sqrt());
    let mut out = Vec::with_capacity(trials * spec.n_blocks);
    for _ in 0..trials {
        let z = rng.normal();
        for _ in 0..spec.n_blocks {
            out.push(common * z + own * rng.normal());
        }
    }
    Ok(out)
}

/// Aggregate of one row of block errors. Blocks are 1-based, so the first
/// block is odd.
pub fn aggregate(spec: &EnsembleSpec, errors: &[f64], mode: AggregationMode) -> f64 {
    let scale = spec.alpha / spec.half_count() as f64;
    let s: f64 = errors
        .iter()
        .enumerate()
        .map(|(l, e)| match mode {
            AggregationMode::Add => *e,
            AggregationMode::Subtract if l % 2 == 0 => *e,
            AggregationMode::Subtract => -*e,
        })
        .sum();
    let sign = match mode {
        AggregationMode::Subtract => spec.parity_sign(),
        AggregationMode::Add => 1.0,
    };
    sign * scale * s
}

/// Mean and unbiased variance via Welford's update.
pub fn mean_variance(xs: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in xs {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, var, n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceResult {
    pub mode: AggregationMode,
    pub trials: usize,
    pub empirical_var: f64,
    pub analytic_var: f64,
    pub theorem_bound: f64,
    /// Standard error of the sample variance of a Gaussian,
    /// `analytic_var * sqrt(2 / (trials - 1))`.
    pub std_error: f64,
}

impl VarianceResult {
    /// `|empirical - analytic| <= k * std_error`.
    pub fn within(&self, k: f64) -> bool {
        (self.empirical_var - self.analytic_var).abs() <= k * self.std_error
    }
}

pub fn aggregate_variance(
    spec: &EnsembleSpec,
    mode: AggregationMode,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<VarianceResult> {
    if spec.n_blocks % 2 == 1 {
        return Err(Error::OddL(spec.n_blocks));
    }
    if trials < 2 {
        return Err(Error::InvalidConfig("need at least 2 trials".into()));
    }
    let errors = sample_block_errors(spec, trials, rng)?;
    let (_, empirical_var, _) =
        mean_variance(errors.chunks(spec.n_blocks).map(|row| aggregate(spec, row, mode)));
    let analytic_var = spec.analytic_variance(mode);
    Ok(VarianceResult {
        mode,
        trials,
        empirical_var,
        analytic_var,
        theorem_bound: spec.theorem_bound(),
        std_error: analytic_var * (2.0 / (trials - 1) as f64).sqrt(),
    })
}

/// One row of the simulation report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationRow {
    pub spec: EnsembleSpec,
    pub result: VarianceResult,
    pub pass: bool,
}

/// Runs both aggregation modes for `spec` with independent streams.
///
/// The subtract row passes when its empirical variance is within 3σ of the
/// closed form, strictly below the bound and strictly below the add-mode
/// empirical variance. The add row passes when it is within 3σ of its closed form.
pub fn simulate_spec(spec: &EnsembleSpec, trials: usize, rng: &SeededRng) -> Result<[SimulationRow; 2]> {
    let sub = aggregate_variance(spec, AggregationMode::Subtract, trials, &mut rng.derive(1))?;
    let add = aggregate_variance(spec, AggregationMode::Add, trials, &mut rng.derive(2))?;
    let strict = spec.mu > 0.0 && spec.mu < spec.nu;
    let sub_pass = strict
        && sub.within(3.0)
        && sub.empirical_var < sub.theorem_bound
        && sub.empirical_var < add.empirical_var;
    Ok([
        SimulationRow {
            spec: *spec,
            result: sub,
            pass: sub_pass,
        },
        SimulationRow {
            spec: *spec,
            result: add,
            pass: add.within(3.0),
        },
    ])
}

pub const DEFAULT_GRID_BLOCKS: [usize; 4] = [2, 4, 8, 16];
pub const DEFAULT_GRID_MU: [f64; 3] = [0.1, 0.5, 0.9];
pub const DEFAULT_TRIALS: usize = 200_000;

/// Both modes over the `L x μ` grid at fixed `α`, `ν`.
pub fn simulate_grid(
    blocks: &[usize],
    mus: &[f64],
    alpha: f64,
    nu: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<SimulationRow>> {
    let root = SeededRng::new(seed);
    let mut rows = Vec::new();
    for (i, &l) in blocks.iter().enumerate() {
        for (j, &mu) in mus.iter().enumerate() {
            let spec = EnsembleSpec::new(l, alpha, nu, mu)?;
            let rng = root.derive((i * mus.len() + j) as u64);
            rows.extend(simulate_spec(&spec, trials, &rng)?);
        }
    }
    Ok(rows)
}

pub const SIMULATION_COLUMNS: [&str; 10] = [
    "L", "alpha", "nu", "mu", "mode", "trials", "empirical_var", "analytic_var", "bound", "pass",
];

pub fn write_simulation_csv(path: &Path, rows: &[SimulationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SIMULATION_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.spec.n_blocks.to_string(),
            r.spec.alpha.to_string(),
            r.spec.nu.to_string(),
            r.spec.mu.to_string(),
            r.result.mode.as_str().to_string(),
            r.result.trials.to_string(),
            r.result.empirical_var.to_string(),
            r.result.analytic_var.to_string(),
            r.result.theorem_bound.to_string(),
            r.pass.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Empirical components of the test-error identity
/// `Var + Bias² + ξ² = E[(Ŷ - Y)²] + 2 E[ε (Ŷ - 𝒴)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasVarianceRecord {
    /// Population variance of the estimates.
    pub variance: f64,
    pub bias_sq: f64,
    pub noise_var: f64,
    /// Mean of `(Ŷ - Y)²` with `Y = 𝒴 + ε`.
    pub mse_vs_observed: f64,
    /// `2 mean(ε (Ŷ - 𝒴))`.
    pub cross_term: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of the cross-term estimator.
    pub cross_std_error: f64,
    pub pass: bool,
}

impl BiasVarianceRecord {
    pub fn residual(&self) -> f64 {
        self.lhs - self.rhs
    }
}

/// Draws label noise per trial and evaluates both sides of the identity;
/// passes when they agree within 3 standard errors of the cross term.
pub fn bias_variance_identity(
    estimates: &[f64],
    truth: f64,
    noise: NoiseSpec,
    rng: &mut SeededRng,
) -> Result<BiasVarianceRecord> {
    let noise_std = noise.xi;
    let n = estimates.len();
    if n < 2 {
        return Err(Error::InvalidConfig("need at least 2 trials".into()));
    }
    let nf = n as f64;
    let mean = estimates.iter().sum::<f64>() / nf;
    let variance = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / nf;
    let bias_sq = (mean - truth).powi(2);
    let noise_var = noise_std * noise_std;

    let mut sq = 0.0;
    let mut cross = Vec::with_capacity(n);
    for &e in estimates {
        let eps = noise_std * rng.normal();
        let observed = truth + eps;
        sq += (e - observed).powi(2);
        cross.push(2.0 * eps * (e - truth));
    }
    let mse_vs_observed = sq / nf;
    let (cross_term, cross_var, _) = mean_variance(cross.iter().copied());
    let cross_std_error = (cross_var / nf).sqrt();
    let lhs = variance + bias_sq + noise_var;
    let rhs = mse_vs_observed + cross_term;
    Ok(BiasVarianceRecord {
        variance,
        bias_sq,
        noise_var,
        mse_vs_observed,
        cross_term,
        lhs,
        rhs,
        cross_std_error,
        pass: (lhs - rhs).abs() <= 3.0 * cross_std_error + 1e-12 * lhs.abs().max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(matches!(EnsembleSpec::new(4, 1.0, 1.0, 1.5), Err(Error::NotPsd(_))));
        assert!(matches!(EnsembleSpec::new(4, 1.0, 0.0, 0.0), Err(Error::NotPsd(_))));
        assert!(matches!(EnsembleSpec::new(4, 1.0, 1.0, -0.1), Err(Error::NotPsd(_))));
        let s = EnsembleSpec::new(5, 1.0, 1.0, 0.5).unwrap();
        assert_eq!((s.half_count(), s.parity_sign()), (2, 1.0));
        assert!(matches!(
            aggregate_variance(&s, AggregationMode::Subtract, 10, &mut SeededRng::new(0)),
            Err(Error::OddL(5))
        ));
    }

    #[test]
    fn closed_forms_for_l8() {
        let s = EnsembleSpec::new(8, 1.0, 1.0, 0.5).unwrap();
        assert!((s.analytic_variance(AggregationMode::Subtract) - 0.25).abs() < 1e-15);
        assert!((s.analytic_variance(AggregationMode::Add) - 2.25).abs() < 1e-15);
        assert!((s.theorem_bound() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn common_factor_limit_gives_equal_rows() {
        let s = EnsembleSpec::new(4, 1.0, 1.0, 1.0).unwrap();
        let e = sample_block_errors(&s, 50, &mut SeededRng::new(3)).unwrap();
        for row in e.chunks(4) {
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn aggregate_signs() {
        let s = EnsembleSpec::new(4, 2.0, 1.0, 0.5).unwrap();
        let e = [1.0, 10.0, 100.0, 1000.0];
        // ℏ = 2, even L flips the sign
        assert_eq!(aggregate(&s, &e, AggregationMode::Subtract), -(1.0 - 10.0 + 100.0 - 1000.0));
        assert_eq!(aggregate(&s, &e, AggregationMode::Add), 1111.0);
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 8.5, 3.25];
        let (m, v, n) = mean_variance(xs);
        let m2 = xs.iter().sum::<f64>() / 5.0;
        let v2 = xs.iter().map(|x| (x - m2).powi(2)).sum::<f64>() / 4.0;
        assert_eq!(n, 5);
        assert!((m - m2).abs() < 1e-14 && (v - v2).abs() < 1e-13);
    }

    #[test]
    fn bias_variance_trivial_cases() {
        let mut rng = SeededRng::new(1);
        let r = bias_variance_identity(&[2.0; 10], 2.0, NoiseSpec::new(0.0).unwrap(), &mut rng).unwrap();
        assert_eq!((r.variance, r.bias_sq, r.noise_var, r.mse_vs_observed, r.cross_term), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(r.pass);
        let r = bias_variance_identity(&[2.5; 10], 2.0, NoiseSpec::new(0.0).unwrap(), &mut rng).unwrap();
        assert_eq!((r.variance, r.bias_sq), (0.0, 0.25));
    }
}

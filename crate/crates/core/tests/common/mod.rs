//! Shared test oracles. Independent of the autodiff code paths they check.
#![allow(dead_code)]

use minusformer::{Graph, Result, Tensor, Var};

/// Max relative error between reverse-mode gradients and central finite
/// differences (step `h`) for every element of every input.
///
/// `f` builds a scalar loss from the given leaves on a fresh graph.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars).expect("forward");
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars).expect("forward");
    let grads = g.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// |a - n| / max(|a|, |n|, 1e-6). The floor keeps near-zero gradients, where
/// central differences are dominated by rounding, from reporting huge ratios.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct cotangent.
pub fn probe_loss(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let w = Tensor::new(
        g.shape(y).to_vec(),
        (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).sin()).collect(),
    )?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

//! Adam optimization under MSE loss with early stopping, plus evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::{stack_windows, Window};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::metrics::MetricsReport;
use crate::model::{invalid, parse_positive, Minusformer};
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor, Var};

/// Mean of squared differences over all elements.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update; `grads` is in `ParamStore` order.
pub fn adam_step(state: &mut AdamState, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, &gi) in grads[k].data().iter().enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 2024,
            verbose: false,
        }
    }
}

pub const TRAIN_KEYS: [&str; 4] = ["lr", "batch_size", "epochs", "patience"];

impl TrainConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), self.learning_rate.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("epochs".into(), self.max_epochs.to_string()),
            ("patience".into(), self.patience.to_string()),
        ]
    }

    /// Sets one key; `Ok(false)` if the key is not a training key. `epochs`
    /// accepts 0.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "lr" => {
                self.learning_rate = match v.parse::<f64>() {
                    Ok(x) if x > 0.0 && x.is_finite() => x,
                    _ => return Err(invalid(key, value)),
                }
            }
            "batch_size" => self.batch_size = parse_positive(key, v)?,
            "epochs" => self.max_epochs = v.parse().map_err(|_| invalid(key, value))?,
            "patience" => self.patience = parse_positive(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Patience-based stopping on validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// New best; snapshot the parameters.
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Eval-mode MSE on the training windows before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub test: MetricsReport,
    pub wall_time_secs: f64,
    pub config: Vec<(String, String)>,
}

impl RunReport {
    pub fn best_val_loss(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best).map(|e| e.val_loss)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// `key=value` header followed by a CSV epoch table.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# minusformer run report\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        let _ = writeln!(s, "initial_train_loss={}", self.initial_train_loss);
        let _ = writeln!(
            s,
            "best_epoch={}",
            self.best_epoch.map(|e| e.to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "stopped_early={}", self.stopped_early);
        let _ = writeln!(s, "wall_time_secs={:.3}", self.wall_time_secs);
        for (k, v) in crate::metrics::METRICS_COLUMNS.iter().zip(self.test.to_csv_row()) {
            let _ = writeln!(s, "test.{k}={v}");
        }
        s.push_str("[epochs]\nepoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Eval-mode predictions for every window, `batch_size` at a time.
pub fn predict_windows(model: &Minusformer, windows: &[Window], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let (x, _) = stack_windows(chunk);
        let pred = model.predict(&x)?;
        let per = pred.len() / chunk.len();
        let shape = pred.shape()[1..].to_vec();
        for c in pred.data().chunks(per) {
            out.push(Tensor::new(shape.clone(), c.to_vec())?);
        }
    }
    Ok(out)
}

/// Flattens `[N][O, D]` tensors variate-major (`d`, then window, then step)
/// so that lagged differences stay within one variate's sequence.
pub fn flatten_variate_major(items: &[&Tensor]) -> Vec<f64> {
    let shape = items[0].shape();
    let (o, d) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(items.len() * o * d);
    for v in 0..d {
        for t in items {
            for s in 0..o {
                out.push(t.at(&[s, v]));
            }
        }
    }
    out
}

/// Pooled metrics over all windows in evaluation mode. MASE uses lag 1.
pub fn evaluate_split(model: &Minusformer, windows: &[Window], batch_size: usize) -> Result<MetricsReport> {
    evaluate_split_with(model, windows, batch_size, 1)
}

/// [`evaluate_split`] with MASE seasonality `mase_m`.
pub fn evaluate_split_with(
    model: &Minusformer,
    windows: &[Window],
    batch_size: usize,
    mase_m: usize,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::EmptySplit("evaluation windows"));
    }
    let preds = predict_windows(model, windows, batch_size)?;
    let y = flatten_variate_major(&windows.iter().map(|w| &w.y).collect::<Vec<_>>());
    let yhat = flatten_variate_major(&preds.iter().collect::<Vec<_>>());
    MetricsReport::compute(&y, &yhat, mase_m)
}

/// MSE of repeating each window's last input row across the horizon.
pub fn naive_last_value_mse(windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::EmptySplit("evaluation windows"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for w in windows {
        let (i, d) = (w.x.shape()[0], w.x.shape()[1]);
        let o = w.y.shape()[0];
        for s in 0..o {
            for v in 0..d {
                sum += (w.y.at(&[s, v]) - w.x.at(&[i - 1, v])).powi(2);
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

fn split_mse(model: &Minusformer, windows: &[Window], batch_size: usize) -> Result<f64> {
    let preds = predict_windows(model, windows, batch_size)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, w) in preds.iter().zip(windows) {
        for (a, b) in p.data().iter().zip(w.y.data()) {
            sum += (a - b).powi(2);
        }
        n += p.len();
    }
    Ok(sum / n as f64)
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut Minusformer,
    adam: &mut AdamState,
    batch: &[&Window],
    lr: f64,
    rng: &mut SeededRng,
) -> Result<f64> {
    let (x, y) = stack_windows(batch.iter().copied());
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let xv = g.constant(x);
    let yv = g.constant(y);
    let out = model.forward_graph(&mut g, &p, xv, true, rng)?;
    let loss = mse_loss(&mut g, out.pred, yv)?;
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    adam_step(adam, &mut model.params, &grads, lr);
    Ok(g.value(loss).item())
}

/// Trains with shuffled mini-batches, stops on validation patience, restores
/// the best-epoch parameters and evaluates the test windows.
pub fn train_loop(
    model: &mut Minusformer,
    train: &[Window],
    val: &[Window],
    test: &[Window],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let started = Instant::now();
    let eval_batch = 256;
    let mut rng = SeededRng::new(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopper::new(cfg.patience.max(1));
    let mut best_params = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let initial_train_loss = split_mse(model, train, eval_batch)?;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Window> = idx.iter().map(|&i| &train[i]).collect();
            let loss = train_step(model, &mut adam, &batch, cfg.learning_rate, &mut rng)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = split_mse(model, val, eval_batch)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Assertion(format!(
                "non-finite loss at epoch {epoch}: train {train_loss}, val {val_loss}"
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if cfg.verbose {
            eprintln!("epoch {epoch:>3}  train {train_loss:.6}  val {val_loss:.6}");
        }
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best_params = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    model.params = best_params;
    let test_report = evaluate_split(model, test, eval_batch)?;
    Ok(RunReport {
        initial_train_loss,
        epochs,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        test: test_report,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: vec![
            ("learning_rate".into(), cfg.learning_rate.to_string()),
            ("batch_size".into(), cfg.batch_size.to_string()),
            ("max_epochs".into(), cfg.max_epochs.to_string()),
            ("patience".into(), cfg.patience.to_string()),
            ("train_seed".into(), cfg.seed.to_string()),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Prepared, SplitSpec, SynthKind, WindowSpec};
    use crate::model::MinusformerConfig;

    #[test]
    fn mse_loss_values_and_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap());
        let t = g.constant(Tensor::new(vec![3], vec![1., 2., 4.]).unwrap());
        let l = mse_loss(&mut g, p, t).unwrap();
        assert!((g.value(l).item() - 1.0 / 3.0).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        let want = [0.0, 0.0, 2.0 * (3.0 - 4.0) / 3.0];
        for (a, b) in grads.get(p).unwrap().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-10);
        }
        let same = mse_loss(&mut g, t, t).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(mse_loss(&mut g, p, bad).is_err());
    }

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = one_param(1.5);
        let mut st = AdamState::new(&s);
        adam_step(&mut st, &mut s, &[Tensor::scalar(0.0)], 1e-3);
        assert_eq!(s.get(s.ids().next().unwrap()).item(), 1.5);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut s = one_param(0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut st, &mut s, &[Tensor::scalar(1.0)], 1e-3);
        let dp = s.get(s.ids().next().unwrap()).item();
        assert!((dp - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-18);
    }

    #[test]
    fn adam_constant_gradient_steps_do_not_grow() {
        let mut s = one_param(0.0);
        let id = s.ids().next().unwrap();
        let mut st = AdamState::new(&s);
        adam_step(&mut st, &mut s, &[Tensor::scalar(0.7)], 1e-3);
        let d1 = s.get(id).item().abs();
        let before = s.get(id).item();
        adam_step(&mut st, &mut s, &[Tensor::scalar(0.7)], 1e-3);
        let d2 = (s.get(id).item() - before).abs();
        assert!(d2 <= d1 * (1.0 + 1e-6));
    }

    #[test]
    fn adam_zero_lr_is_bitwise_noop() {
        let mut s = one_param(-0.123456789);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        adam_step(&mut st, &mut s, &[Tensor::scalar(3.0)], 0.0);
        assert_eq!(s, before);
    }

    #[test]
    fn early_stop_on_increasing_val_loss() {
        for patience in 1..5 {
            let mut es = EarlyStopper::new(patience);
            let mut stopped_at = None;
            for epoch in 1..=20 {
                let val = epoch as f64; // strictly increasing
                if es.observe(epoch, val) == StopDecision::Stop {
                    stopped_at = Some(epoch);
                    break;
                }
            }
            assert_eq!(stopped_at, Some(1 + patience));
            assert_eq!(es.best_epoch(), Some(1));
        }
    }

    #[test]
    fn early_stop_tracks_minimum() {
        let mut es = EarlyStopper::new(3);
        for (e, v) in [5.0, 4.0, 4.5, 3.0, 3.0, 3.5].into_iter().enumerate() {
            es.observe(e + 1, v);
        }
        assert_eq!(es.best_epoch(), Some(4));
        assert_eq!(es.best(), 3.0);
    }

    fn tiny() -> (Minusformer, Prepared) {
        let table = crate::data::synth_series(SynthKind::SineMix, 160, 2, 0.05, 1);
        let data = Prepared::new(&table, WindowSpec::new(12, 4), &SplitSpec::default()).unwrap();
        let mut cfg = MinusformerConfig::new(12, 4, 2).with_embed_dim(8);
        cfg.heads = 2;
        (Minusformer::new(cfg).unwrap(), data)
    }

    #[test]
    fn zero_epochs_evaluates_initial_weights() {
        let (mut m, d) = tiny();
        let init = evaluate_split(&m, &d.test, 7).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let r = train_loop(&mut m, &d.train, &d.val, &d.test, &cfg).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.best_epoch, None);
        assert_eq!(r.test, init);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            max_epochs: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut m, d) = tiny();
            let mut r = train_loop(&mut m, &d.train, &d.val, &d.test, &cfg).unwrap();
            r.wall_time_secs = 0.0;
            r
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_is_batch_invariant() {
        let (m, d) = tiny();
        let a = evaluate_split(&m, &d.test, 1).unwrap();
        let b = evaluate_split(&m, &d.test, 64).unwrap();
        assert!((a.mse - b.mse).abs() < 1e-10);
        assert!((a.mae - b.mae).abs() < 1e-10);
        assert!(matches!(evaluate_split(&m, &[], 4), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn leaked_target_scores_zero() {
        let (_, d) = tiny();
        let y: Vec<&Tensor> = d.test.iter().map(|w| &w.y).collect();
        let flat = flatten_variate_major(&y);
        let r = MetricsReport::compute(&flat, &flat, 1).unwrap();
        assert_eq!((r.mse, r.mae), (0.0, 0.0));
    }

    #[test]
    fn report_text_has_epoch_table() {
        let (mut m, d) = tiny();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let r = train_loop(&mut m, &d.train, &d.val, &d.test, &cfg).unwrap();
        let text = r.to_text();
        assert!(text.contains("[epochs]\nepoch,train_loss,val_loss\n1,"));
        assert!(text.contains("test.mse="));
    }
}

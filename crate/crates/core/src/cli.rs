//! Command-line front end: argument parsing, config files and the six
//! subcommands.
//!
//! ```text
//! minusformer <train|eval|ablate|decompose|simulate|synth>
//!     [--config FILE] [--data CSV] [--out DIR] [--seed N] [--<key> VALUE]...
//! ```
//!
//! Config files are flat `key=value` text; `#` starts a comment. Values are
//! resolved as flag > config file > default. Every run writes `config.txt`
//! to the output directory with the fully resolved settings, seed and
//! version.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::data::{
    fit_scaler, load_csv, make_windows, synth_series, chrono_split, Prepared, ScaleDirection,
    SeriesTable, SplitSpec, SynthKind, WindowSpec,
};
use crate::ensemble::{
    bias_variance_identity, simulate_grid, write_simulation_csv, EnsembleSpec, NoiseSpec,
    SimulationRow, DEFAULT_GRID_BLOCKS, DEFAULT_GRID_MU, DEFAULT_TRIALS,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{
    export_attention, export_trace, invalid, parse_positive, write_attention_table,
    write_block_table, Minusformer, MinusformerConfig, Sign, MODEL_KEYS,
};
use crate::rng::SeededRng;
use crate::train::{evaluate_split_with, train_loop, TrainConfig, TRAIN_KEYS};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Ablate,
    Decompose,
    Simulate,
    Synth,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Decompose => "decompose",
            Command::Simulate => "simulate",
            Command::Synth => "synth",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Command::Train,
            "eval" => Command::Eval,
            "ablate" => Command::Ablate,
            "decompose" => Command::Decompose,
            "simulate" => Command::Simulate,
            "synth" => Command::Synth,
            _ => return Err(invalid("subcommand", s)),
        })
    }
}

/// Keys outside the model and training configs.
pub const RUN_KEYS: [&str; 16] = [
    "train_frac",
    "val_frac",
    "stride",
    "mase_m",
    "checkpoint",
    "sample",
    "kind",
    "length",
    "noise_std",
    "L",
    "alpha",
    "nu",
    "mu",
    "trials",
    "xi",
    "verbose",
];

fn canonical(key: &str) -> &str {
    match key {
        "n_blocks" => "blocks",
        "learning_rate" => "lr",
        "max_epochs" => "epochs",
        "variates" => "n_variates",
        other => other,
    }
}

fn is_known(key: &str) -> bool {
    key == "data" || key == "out" || MODEL_KEYS.contains(&key) || TRAIN_KEYS.contains(&key) || RUN_KEYS.contains(&key)
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    match value.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(invalid(key, value)),
    }
}

/// Fully resolved settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    /// `n_variates` is overwritten by the data unless set explicitly.
    pub model: MinusformerConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub stride: usize,
    pub mase_m: usize,
    pub checkpoint: Option<PathBuf>,
    /// Index of the test window used by `decompose`.
    pub sample: usize,
    pub synth_kind: SynthKind,
    pub synth_len: usize,
    pub noise_std: f64,
    pub sim_blocks: Vec<usize>,
    pub sim_mus: Vec<f64>,
    pub alpha: f64,
    pub nu: f64,
    pub trials: usize,
    pub xi: f64,
    pub explicit_variates: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: MinusformerConfig::new(96, 96, 3),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            stride: 1,
            mase_m: 1,
            checkpoint: None,
            sample: 0,
            synth_kind: SynthKind::SineMix,
            synth_len: 4000,
            noise_std: 0.1,
            sim_blocks: DEFAULT_GRID_BLOCKS.to_vec(),
            sim_mus: DEFAULT_GRID_MU.to_vec(),
            alpha: 1.0,
            nu: 1.0,
            trials: DEFAULT_TRIALS,
            xi: 0.3,
            explicit_variates: false,
        }
    }
}

impl Settings {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            let seed: u64 = value.trim().parse().map_err(|_| invalid(key, value))?;
            self.model.seed = seed;
            self.train.seed = seed;
            return Ok(());
        }
        if key == "n_variates" {
            self.explicit_variates = true;
        }
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        let v = value.trim();
        match key {
            "train_frac" => self.split.train = parse_f64(key, v)?,
            "val_frac" => self.split.val = parse_f64(key, v)?,
            "stride" => self.stride = parse_positive(key, v)?,
            "mase_m" => self.mase_m = parse_positive(key, v)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "sample" => self.sample = v.parse().map_err(|_| invalid(key, value))?,
            "kind" => self.synth_kind = v.parse().map_err(|_| invalid(key, value))?,
            "length" => self.synth_len = parse_positive(key, v)?,
            "noise_std" => {
                self.noise_std = match parse_f64(key, v)? {
                    x if x >= 0.0 => x,
                    _ => return Err(invalid(key, value)),
                }
            }
            "L" => {
                self.sim_blocks = v.split(',').map(|x| parse_positive(key, x)).collect::<Result<_>>()?
            }
            "alpha" => self.alpha = parse_f64(key, v)?,
            "nu" => self.nu = parse_f64(key, v)?,
            "mu" => self.sim_mus = v.split(',').map(|x| parse_f64(key, x)).collect::<Result<_>>()?,
            "trials" => self.trials = parse_positive(key, v)?,
            "xi" => self.xi = NoiseSpec::new(parse_f64(key, v)?).map_err(|_| invalid(key, value))?.xi,
            "verbose" => self.train.verbose = crate::model::parse_bool(key, v)?,
            _ => return Err(Error::UnknownFlag(key.to_string())),
        }
        self.split.test = 1.0 - self.split.train - self.split.val;
        Ok(())
    }

    /// The single spec selected by `--L` and `--mu`, if both grids were
    /// narrowed to one entry.
    pub fn ensemble_spec(&self) -> Result<Option<EnsembleSpec>> {
        match (self.sim_blocks.as_slice(), self.sim_mus.as_slice()) {
            ([l], [mu]) => Ok(Some(EnsembleSpec::new(*l, self.alpha, self.nu, *mu)?)),
            _ => Ok(None),
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_pairs();
        if !self.explicit_variates {
            out.retain(|(k, _)| k != "n_variates");
        }
        out.extend(self.train.to_pairs());
        let list = |v: &[String]| v.join(",");
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("train_frac", self.split.train.to_string());
        push("val_frac", self.split.val.to_string());
        push("stride", self.stride.to_string());
        push("mase_m", self.mase_m.to_string());
        if let Some(c) = &self.checkpoint {
            push("checkpoint", c.display().to_string());
        }
        push("sample", self.sample.to_string());
        push("kind", self.synth_kind.as_str().to_string());
        push("length", self.synth_len.to_string());
        push("noise_std", self.noise_std.to_string());
        push("L", list(&self.sim_blocks.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
        push("alpha", self.alpha.to_string());
        push("nu", self.nu.to_string());
        push("mu", list(&self.sim_mus.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
        push("trials", self.trials.to_string());
        push("xi", self.xi.to_string());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Raw overrides in the order given on the command line.
    pub overrides: Vec<(String, String)>,
    pub settings: Settings,
}

/// Reads a flat `key=value` file. `version` and `command` lines, as written
/// by the config echo, are skipped so an echo can be fed back in.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingConfig(path.display().to_string()))?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| invalid("config line", line))?;
        if matches!(k.trim(), "version" | "command") {
            continue;
        }
        pairs.push((canonical(k.trim()).to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses `argv` without the program name.
pub fn parse_args<S: AsRef<str>>(argv: &[S]) -> Result<RunSpec> {
    let mut args = argv.iter().map(AsRef::as_ref);
    let command = Command::parse(args.next().ok_or_else(|| invalid("subcommand", ""))?)?;
    let mut config_path = None;
    let mut overrides = Vec::new();
    while let Some(flag) = args.next() {
        let name = flag.strip_prefix("--").ok_or_else(|| Error::UnknownFlag(flag.to_string()))?;
        let (name, inline) = match name.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (name, None),
        };
        let key = canonical(name);
        if key != "config" && !is_known(key) {
            return Err(Error::UnknownFlag(flag.to_string()));
        }
        let value = match inline {
            Some(v) => v,
            None => args.next().ok_or_else(|| invalid(key, ""))?.to_string(),
        };
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            overrides.push((key.to_string(), value));
        }
    }

    let mut merged: BTreeMap<String, String> = BTreeMap::new();
    if let Some(p) = &config_path {
        for (k, v) in read_config_file(p)? {
            if !is_known(&k) {
                return Err(Error::UnknownFlag(k));
            }
            merged.insert(k, v);
        }
    }
    for (k, v) in &overrides {
        merged.insert(k.clone(), v.clone());
    }

    let data = merged.remove("data").map(PathBuf::from);
    let out = merged
        .remove("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs").join(command.as_str()));
    let mut settings = Settings::default();
    // seed first so explicit per-part keys could follow; then the fixed
    // key order, which puts pred_len before block_out_len and embed_dim
    // before ffn_dim.
    let order = MODEL_KEYS.iter().chain(TRAIN_KEYS.iter()).chain(RUN_KEYS.iter());
    for key in order {
        if let Some(v) = merged.get(*key) {
            settings.apply(key, v)?;
        }
    }
    Ok(RunSpec {
        command,
        config_path,
        data,
        out,
        overrides,
        settings,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `config.txt`: version, command and every resolved key.
pub fn config_echo(spec: &RunSpec) -> String {
    let mut s = format!("# minusformer {VERSION}\nversion={VERSION}\ncommand={}\n", spec.command.as_str());
    if let Some(d) = &spec.data {
        let _ = writeln!(s, "data={}", d.display());
    }
    for (k, v) in spec.settings.to_pairs() {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

/// Loads `--data` or generates the configured synthetic series.
pub fn load_table(spec: &RunSpec) -> Result<SeriesTable> {
    match &spec.data {
        Some(p) => load_csv(p),
        None => {
            let s = &spec.settings;
            Ok(synth_series(s.synth_kind, s.synth_len, s.model.n_variates, s.noise_std, s.model.seed))
        }
    }
}

fn model_config_for(spec: &RunSpec, table: &SeriesTable) -> Result<MinusformerConfig> {
    let mut cfg = spec.settings.model.clone();
    if spec.settings.explicit_variates && spec.data.is_some() && cfg.n_variates != table.n_variates() {
        return Err(Error::InvalidConfig(format!(
            "n_variates={} but the data has {} columns",
            cfg.n_variates,
            table.n_variates()
        )));
    }
    cfg.n_variates = table.n_variates();
    cfg.validate()?;
    Ok(cfg)
}

fn window_spec(spec: &RunSpec, cfg: &MinusformerConfig) -> WindowSpec {
    let mut w = WindowSpec::new(cfg.input_len, cfg.pred_len);
    w.stride = spec.settings.stride;
    w
}

fn train_fresh(spec: &RunSpec, cfg: MinusformerConfig, data: &Prepared) -> Result<(Minusformer, crate::train::RunReport)> {
    let mut model = Minusformer::new(cfg)?;
    let mut report = train_loop(&mut model, &data.train, &data.val, &data.test, &spec.settings.train)?;
    report.config = spec.settings.to_pairs();
    Ok((model, report))
}

fn run_train(spec: &RunSpec) -> Result<()> {
    let table = load_table(spec)?;
    let cfg = model_config_for(spec, &table)?;
    let data = Prepared::new(&table, window_spec(spec, &cfg), &spec.settings.split)?;
    let (model, report) = train_fresh(spec, cfg, &data)?;
    Checkpoint::new(model, Some(data.scaler.clone())).save(&spec.out.join("checkpoint.txt"))?;
    report.write(&spec.out.join("report.txt"))?;
    MetricsReport::write_csv(&spec.out.join("metrics.csv"), Some("split"), &[("test".into(), report.test)])
}

fn load_checkpoint(spec: &RunSpec) -> Result<Checkpoint> {
    let path = spec
        .settings
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::MissingConfig("checkpoint".into()))?;
    Checkpoint::load(path)
}

/// Splits and windows the table with the checkpoint's scaler when present.
fn prepare_for_checkpoint(spec: &RunSpec, ck: &Checkpoint, table: &SeriesTable) -> Result<Prepared> {
    let cfg = &ck.model.config;
    if cfg.n_variates != table.n_variates() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint expects {} variates, data has {}",
            cfg.n_variates,
            table.n_variates()
        )));
    }
    let window = window_spec(spec, cfg);
    let splits = chrono_split(table.len(), &spec.settings.split)?;
    let scaler = match &ck.scaler {
        Some(s) => s.clone(),
        None => fit_scaler(table, splits.train.clone())?,
    };
    let scaled = scaler.scale_table(table, ScaleDirection::Forward);
    Ok(Prepared {
        train: make_windows(&scaled, &window, splits.train.clone())?,
        val: make_windows(&scaled, &window, splits.val.clone())?,
        test: make_windows(&scaled, &window, splits.test.clone())?,
        scaler,
        splits,
        window,
    })
}

fn run_eval(spec: &RunSpec) -> Result<()> {
    let ck = load_checkpoint(spec)?;
    let table = load_table(spec)?;
    let data = prepare_for_checkpoint(spec, &ck, &table)?;
    let bs = spec.settings.train.batch_size;
    let rows = vec![
        ("val".to_string(), evaluate_split_with(&ck.model, &data.val, bs, spec.settings.mase_m)?),
        ("test".to_string(), evaluate_split_with(&ck.model, &data.test, bs, spec.settings.mase_m)?),
    ];
    MetricsReport::write_csv(&spec.out.join("metrics.csv"), Some("split"), &rows)
}

/// The eight sign/gate variants in a fixed order.
pub fn ablation_grid(base: &MinusformerConfig) -> Vec<MinusformerConfig> {
    let mut out = Vec::with_capacity(8);
    for input_sign in [Sign::Minus, Sign::Plus] {
        for output_sign in [Sign::Minus, Sign::Plus] {
            for gate in [true, false] {
                let mut c = base.clone();
                c.input_sign = input_sign;
                c.output_sign = output_sign;
                c.gate_enabled = gate;
                out.push(c);
            }
        }
    }
    out
}

/// Trains every ablation variant and returns one labelled test report each.
pub fn run_ablation(
    base: &MinusformerConfig,
    train_cfg: &TrainConfig,
    data: &Prepared,
) -> Result<Vec<(String, MetricsReport)>> {
    let mut rows = Vec::with_capacity(8);
    for cfg in ablation_grid(base) {
        let label = cfg.variant_label();
        let mut model = Minusformer::new(cfg)?;
        let report = train_loop(&mut model, &data.train, &data.val, &data.test, train_cfg)?;
        if !report.test.mse.is_finite() {
            return Err(Error::Assertion(format!("{label}: non-finite test mse")));
        }
        rows.push((label, report.test));
    }
    Ok(rows)
}

fn run_ablate(spec: &RunSpec) -> Result<()> {
    let table = load_table(spec)?;
    let cfg = model_config_for(spec, &table)?;
    let data = Prepared::new(&table, window_spec(spec, &cfg), &spec.settings.split)?;
    let rows = run_ablation(&cfg, &spec.settings.train, &data)?;
    MetricsReport::write_csv(&spec.out.join("ablation.csv"), Some("variant"), &rows)
}

fn run_decompose(spec: &RunSpec) -> Result<()> {
    let ck = load_checkpoint(spec)?;
    let table = load_table(spec)?;
    let data = prepare_for_checkpoint(spec, &ck, &table)?;
    let window = data.test.get(spec.settings.sample).ok_or_else(|| {
        invalid("sample", &format!("{} (test split has {} windows)", spec.settings.sample, data.test.len()))
    })?;
    let (_, trace) = ck.model.forward(&crate::data::stack_windows([window]).0)?;
    write_block_table(&spec.out.join("blocks.csv"), &export_trace(&trace, &data.scaler, 0))?;
    write_attention_table(&spec.out.join("attention.csv"), &export_attention(&trace, 0))
}

/// Runs the configured grid plus the bias-variance check.
pub fn run_simulation(settings: &Settings, seed: u64) -> Result<(Vec<SimulationRow>, crate::ensemble::BiasVarianceRecord)> {
    let rows = simulate_grid(&settings.sim_blocks, &settings.sim_mus, settings.alpha, settings.nu, settings.trials, seed)?;
    let mut rng = SeededRng::new(seed).derive(0xb1a5);
    let truth = 1.0;
    let estimates: Vec<f64> = (0..settings.trials).map(|_| truth + 0.2 + 0.5 * rng.normal()).collect();
    let bv = bias_variance_identity(&estimates, truth, NoiseSpec::new(settings.xi)?, &mut rng)?;
    Ok((rows, bv))
}

fn run_simulate(spec: &RunSpec) -> Result<()> {
    let (rows, bv) = run_simulation(&spec.settings, spec.settings.model.seed)?;
    write_simulation_csv(&spec.out.join("simulation.csv"), &rows)?;
    let mut s = String::new();
    let _ = writeln!(s, "trials={}", spec.settings.trials);
    let _ = writeln!(s, "variance={}", bv.variance);
    let _ = writeln!(s, "bias_sq={}", bv.bias_sq);
    let _ = writeln!(s, "noise_var={}", bv.noise_var);
    let _ = writeln!(s, "mse_vs_observed={}", bv.mse_vs_observed);
    let _ = writeln!(s, "cross_term={}", bv.cross_term);
    let _ = writeln!(s, "lhs={}", bv.lhs);
    let _ = writeln!(s, "rhs={}", bv.rhs);
    let _ = writeln!(s, "residual={}", bv.residual());
    let _ = writeln!(s, "cross_std_error={}", bv.cross_std_error);
    let _ = writeln!(s, "pass={}", bv.pass);
    write_text(&spec.out.join("bias_variance.txt"), &s)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Error::Assertion(format!("{failed} simulation rows failed")));
    }
    if !bv.pass {
        return Err(Error::Assertion("bias-variance identity outside tolerance".into()));
    }
    Ok(())
}

fn run_synth(spec: &RunSpec) -> Result<()> {
    let s = &spec.settings;
    synth_series(s.synth_kind, s.synth_len, s.model.n_variates, s.noise_std, s.model.seed)
        .write_csv(&spec.out.join("data.csv"))
}

/// Creates the output directory, writes the config echo and runs the command.
pub fn dispatch(spec: &RunSpec) -> Result<()> {
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    write_text(&spec.out.join("config.txt"), &config_echo(spec))?;
    match spec.command {
        Command::Train => run_train(spec),
        Command::Eval => run_eval(spec),
        Command::Ablate => run_ablate(spec),
        Command::Decompose => run_decompose(spec),
        Command::Simulate => run_simulate(spec),
        Command::Synth => run_synth(spec),
    }
}

/// Process exit code for an error category.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        "cli" => 2,
        "io" => 3,
        "data" => 4,
        "model" => 5,
        "tensor" | "layers" => 6,
        "metrics" => 7,
        "ensemble" => 8,
        _ => 1,
    }
}

pub const USAGE: &str = "usage: minusformer <train|eval|ablate|decompose|simulate|synth> \
[--config FILE] [--data CSV] [--out DIR] [--seed N] [--<key> VALUE]...";

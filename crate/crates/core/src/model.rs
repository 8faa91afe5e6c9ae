//! The Minusformer network.
//!
//! Each block forks its input stream `X_l` into an extracted part
//! (`X̂_{l,1}` from attention, `X̂_{l,2}` from the feed-forward) and a
//! residual `X_{l+1}` that is what remains after subtracting both. The
//! extracted parts are gated into a block prediction `Ô_{l+1}`, and the
//! output stream subtracts its running value: `O_{l+1} = Ô_{l+1} - O_l`,
//! starting from `O_0 = 0`. Unrolled, the final output is the
//! alternating-sign sum of every block prediction.

use std::fmt;
use std::str::FromStr;

use crate::data::ScalerStats;
use crate::error::{Error, Result};
use crate::layers::{
    dropout_apply, feed_forward, gate_apply, layer_norm_apply, linear_apply, AttentionParams,
    Bound, FeedForwardParams, GateParams, LayerNormParams, LinearParams, Mixer, ParamStore,
};
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor, Var};

/// How a stream combines with the block output: `Minus` subtracts, `Plus` adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    fn apply(self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        match self {
            Sign::Plus => g.add(a, b),
            Sign::Minus => g.sub(a, b),
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Sign::Plus => '+',
            Sign::Minus => '-',
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl FromStr for Sign {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "+" | "plus" | "add" => Ok(Sign::Plus),
            "-" | "minus" | "sub" => Ok(Sign::Minus),
            _ => Err(format!("expected + or -, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinusformerConfig {
    pub input_len: usize,
    pub pred_len: usize,
    pub n_variates: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    /// Width of each block prediction; a final linear maps it to `pred_len` when they differ.
    pub block_out_len: usize,
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Multiplier on the attention term of the residual subtraction; 0 or 1.
    pub delta: u8,
    pub gate_enabled: bool,
    pub input_sign: Sign,
    pub output_sign: Sign,
    pub norm_enabled: bool,
    /// With `delta == 0`, also zero the attention branch feeding the output
    /// gate. Off by default: attention still feeds the output stream.
    pub delta_drops_attention_output: bool,
    pub seed: u64,
}

impl MinusformerConfig {
    pub fn new(input_len: usize, pred_len: usize, n_variates: usize) -> Self {
        Self {
            input_len,
            pred_len,
            n_variates,
            embed_dim: 64,
            n_blocks: 2,
            block_out_len: pred_len,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            delta: 1,
            gate_enabled: true,
            input_sign: Sign::Minus,
            output_sign: Sign::Minus,
            norm_enabled: true,
            delta_drops_attention_output: false,
            seed: 2024,
        }
    }

    /// Sets `embed_dim` and the default feed-forward width `4 * embed_dim`.
    pub fn with_embed_dim(mut self, e: usize) -> Self {
        self.embed_dim = e;
        self.ffn_dim = 4 * e;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("pred_len", self.pred_len),
            ("n_variates", self.n_variates),
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("block_out_len", self.block_out_len),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        if self.delta > 1 {
            return Err(Error::InvalidConfig(format!("delta must be 0 or 1, got {}", self.delta)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidRate(self.dropout));
        }
        Ok(())
    }

    /// Short ablation label such as `-X -Y G`.
    pub fn variant_label(&self) -> String {
        format!(
            "{}X {}Y {}",
            self.input_sign,
            self.output_sign,
            if self.gate_enabled { "G" } else { "noG" }
        )
    }
}

/// Keys of the flat `key=value` form of [`MinusformerConfig`], in the order
/// they are applied. `pred_len` also resets `block_out_len` and `embed_dim`
/// resets `ffn_dim` to `4 * embed_dim`; explicit later keys win.
pub const MODEL_KEYS: [&str; 16] = [
    "input_len",
    "pred_len",
    "n_variates",
    "embed_dim",
    "blocks",
    "block_out_len",
    "heads",
    "ffn_dim",
    "dropout",
    "delta",
    "gate",
    "input_sign",
    "output_sign",
    "norm",
    "delta_drops_attention_output",
    "seed",
];

pub(crate) fn invalid(key: &str, value: &str) -> Error {
    Error::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
    }
}

pub(crate) fn parse_positive(key: &str, value: &str) -> Result<usize> {
    match value.trim().parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(invalid(key, value)),
    }
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(invalid(key, value)),
    }
}

impl MinusformerConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let pairs: [(&str, String); 16] = [
            ("input_len", self.input_len.to_string()),
            ("pred_len", self.pred_len.to_string()),
            ("n_variates", self.n_variates.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("blocks", self.n_blocks.to_string()),
            ("block_out_len", self.block_out_len.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("delta", self.delta.to_string()),
            ("gate", self.gate_enabled.to_string()),
            ("input_sign", self.input_sign.to_string()),
            ("output_sign", self.output_sign.to_string()),
            ("norm", self.norm_enabled.to_string()),
            ("delta_drops_attention_output", self.delta_drops_attention_output.to_string()),
            ("seed", self.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one key. Returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "input_len" => self.input_len = parse_positive(key, v)?,
            "pred_len" => {
                self.pred_len = parse_positive(key, v)?;
                self.block_out_len = self.pred_len;
            }
            "n_variates" => self.n_variates = parse_positive(key, v)?,
            "embed_dim" => *self = self.clone().with_embed_dim(parse_positive(key, v)?),
            "blocks" => self.n_blocks = parse_positive(key, v)?,
            "block_out_len" => self.block_out_len = parse_positive(key, v)?,
            "heads" => self.heads = parse_positive(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_positive(key, v)?,
            "dropout" => {
                self.dropout = match v.parse::<f64>() {
                    Ok(r) if (0.0..1.0).contains(&r) => r,
                    _ => return Err(invalid(key, value)),
                }
            }
            "delta" => {
                self.delta = match v {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(invalid(key, value)),
                }
            }
            "gate" => self.gate_enabled = parse_bool(key, v)?,
            "input_sign" => self.input_sign = v.parse().map_err(|_| invalid(key, value))?,
            "output_sign" => self.output_sign = v.parse().map_err(|_| invalid(key, value))?,
            "norm" => self.norm_enabled = parse_bool(key, v)?,
            "delta_drops_attention_output" => self.delta_drops_attention_output = parse_bool(key, v)?,
            "seed" => self.seed = v.parse().map_err(|_| invalid(key, value))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug)]
pub enum OutputHead {
    Gate(GateParams),
    Linear(LinearParams),
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub mixer: Mixer,
    pub norm: LayerNormParams,
    pub ffn: FeedForwardParams,
    /// `E -> E` gate on the residual stream; absent when gates are disabled.
    pub input_gate: Option<GateParams>,
    /// `2E -> H` map from `[X̂_{l,1}, X̂_{l,2}]` to the block prediction.
    pub output_head: OutputHead,
}

/// Graph handles produced by one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub xhat1: Var,
    pub xhat2: Var,
    pub residual_pre_gate: Var,
    pub residual: Var,
    pub ohat: Var,
    pub ostream: Var,
    pub attention: Option<Var>,
}

/// Graph handles of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub embedded: Var,
    pub blocks: Vec<BlockVars>,
    /// `O_L` before the optional final projection, `[B, D, H]`.
    pub stream_out: Var,
    /// Prediction `[B, O, D]` in standardized units.
    pub pred: Var,
}

/// Per-block values of one forward pass. All tensors carry the batch axis.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub xhat1: Tensor,
    pub xhat2: Tensor,
    pub residual_pre_gate: Tensor,
    pub residual: Tensor,
    pub ohat: Tensor,
    pub ostream: Tensor,
    pub attention: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Embedded input stream `X_1`, `[B, D, E]`.
    pub embedded: Tensor,
    pub blocks: Vec<BlockTrace>,
    /// `O_L`, `[B, D, H]`.
    pub stream_out: Tensor,
    /// `[B, O, D]`, standardized.
    pub prediction: Tensor,
}

#[derive(Clone, Debug)]
pub struct Minusformer {
    pub config: MinusformerConfig,
    pub params: ParamStore,
    pub embed: LinearParams,
    pub blocks: Vec<BlockParams>,
    /// `H -> O` projection, present iff `block_out_len != pred_len`.
    pub projection: Option<LinearParams>,
}

impl Minusformer {
    pub fn new(config: MinusformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let mut params = ParamStore::new();
        let (e, h) = (config.embed_dim, config.block_out_len);
        let embed = LinearParams::init(&mut params, "embed", config.input_len, e, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for l in 0..config.n_blocks {
            let name = format!("block{l}");
            let mixer = Mixer::Full(AttentionParams::init(
                &mut params,
                &format!("{name}.attention"),
                e,
                config.heads,
                &mut rng,
            )?);
            let norm = LayerNormParams::init(&mut params, &format!("{name}.norm"), e);
            let ffn = FeedForwardParams::init(
                &mut params,
                &format!("{name}.ffn"),
                e,
                config.ffn_dim,
                &mut rng,
            );
            let (input_gate, output_head) = if config.gate_enabled {
                (
                    Some(GateParams::init(&mut params, &format!("{name}.input_gate"), e, e, &mut rng)),
                    OutputHead::Gate(GateParams::init(
                        &mut params,
                        &format!("{name}.output_gate"),
                        2 * e,
                        h,
                        &mut rng,
                    )),
                )
            } else {
                (
                    None,
                    OutputHead::Linear(LinearParams::init(
                        &mut params,
                        &format!("{name}.output_linear"),
                        2 * e,
                        h,
                        &mut rng,
                    )),
                )
            };
            blocks.push(BlockParams {
                mixer,
                norm,
                ffn,
                input_gate,
                output_head,
            });
        }
        let projection = (h != config.pred_len).then(|| {
            LinearParams::init(&mut params, "projection", h, config.pred_len, &mut rng)
        });
        Ok(Self {
            config,
            params,
            embed,
            blocks,
            projection,
        })
    }

    /// Forward pass on an existing graph. `x` is `[B, I, D]`, standardized.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let embedded = embed_input(g, p, &self.embed, cfg, x)?;
        let batch = g.shape(x)[0];
        let mut stream_x = embedded;
        let mut stream_o = g.constant(Tensor::zeros(&[batch, cfg.n_variates, cfg.block_out_len]));
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for bp in &self.blocks {
            let out = block_forward(g, p, bp, cfg, stream_x, stream_o, training, rng)?;
            stream_x = out.residual;
            stream_o = out.ostream;
            blocks.push(out);
        }
        let mut out = stream_o;
        if let Some(proj) = &self.projection {
            out = linear_apply(g, p, proj, out)?;
        }
        let pred = g.transpose_last(out)?;
        Ok(ForwardVars {
            embedded,
            blocks,
            stream_out: stream_o,
            pred,
        })
    }

    /// Evaluation-mode forward returning the prediction `[B, O, D]` and the trace.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        // eval mode never draws from the rng
        let mut rng = SeededRng::new(0);
        let vars = self.forward_graph(&mut g, &p, xv, false, &mut rng)?;
        let trace = ForwardTrace::from_graph(&g, &vars);
        Ok((trace.prediction.clone(), trace))
    }

    /// Prediction only, evaluation mode.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }
}

impl ForwardTrace {
    pub fn from_graph(g: &Graph, vars: &ForwardVars) -> Self {
        let v = |x: Var| g.value(x).clone();
        Self {
            embedded: v(vars.embedded),
            blocks: vars
                .blocks
                .iter()
                .map(|b| BlockTrace {
                    xhat1: v(b.xhat1),
                    xhat2: v(b.xhat2),
                    residual_pre_gate: v(b.residual_pre_gate),
                    residual: v(b.residual),
                    ohat: v(b.ohat),
                    ostream: v(b.ostream),
                    attention: b.attention.map(v),
                })
                .collect(),
            stream_out: v(vars.stream_out),
            prediction: v(vars.pred),
        }
    }
}

/// `[B, I, D]` -> transpose -> `[B, D, I]` -> linear `I -> E`.
pub fn embed_input(
    g: &mut Graph,
    p: &Bound,
    embed: &LinearParams,
    cfg: &MinusformerConfig,
    x: Var,
) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] != cfg.input_len || s[2] != cfg.n_variates {
        return Err(Error::shape(
            "embed_input",
            s,
            &[0, cfg.input_len, cfg.n_variates],
        ));
    }
    let xt = g.transpose_last(x)?;
    linear_apply(g, p, embed, xt)
}

/// One fork block; `x` is `[B, D, E]`, `o` is `[B, D, H]`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    g: &mut Graph,
    p: &Bound,
    bp: &BlockParams,
    cfg: &MinusformerConfig,
    x: Var,
    o: Var,
    training: bool,
    rng: &mut SeededRng,
) -> Result<BlockVars> {
    let mixed = bp.mixer.forward(g, p, x)?;
    let mut xhat1 = mixed.out;

    let mut r1 = if cfg.delta == 1 {
        let dropped = dropout_apply(g, xhat1, cfg.dropout, training, rng)?;
        cfg.input_sign.apply(g, x, dropped)?
    } else {
        x
    };
    if cfg.delta == 0 && cfg.delta_drops_attention_output {
        xhat1 = g.constant(Tensor::zeros(g.shape(xhat1)));
    }
    if cfg.norm_enabled {
        r1 = layer_norm_apply(g, p, &bp.norm, r1)?;
    }
    let xhat2 = feed_forward(g, p, &bp.ffn, r1)?;
    let r2 = cfg.input_sign.apply(g, r1, xhat2)?;
    let residual = match &bp.input_gate {
        Some(gate) if cfg.gate_enabled => gate_apply(g, p, gate, r2)?,
        _ => r2,
    };

    let both = g.concat_last(&[xhat1, xhat2])?;
    let ohat = match &bp.output_head {
        OutputHead::Gate(gate) => gate_apply(g, p, gate, both)?,
        OutputHead::Linear(lin) => linear_apply(g, p, lin, both)?,
    };
    if g.shape(ohat) != g.shape(o) {
        return Err(Error::shape("block output stream", g.shape(ohat), g.shape(o)));
    }
    let ostream = cfg.output_sign.apply(g, ohat, o)?;
    Ok(BlockVars {
        xhat1,
        xhat2,
        residual_pre_gate: r2,
        residual,
        ohat,
        ostream,
        attention: mixed.weights,
    })
}

/// Alternating-sign sum `Σ_l (-1)^{L-l} Ô_l` of the block predictions.
pub fn telescoped_output(trace: &ForwardTrace) -> Tensor {
    let n = trace.blocks.len();
    let mut acc = Tensor::zeros(trace.blocks[0].ohat.shape());
    for (l, b) in trace.blocks.iter().enumerate() {
        let sign = if (n - 1 - l) % 2 == 0 { 1.0 } else { -1.0 };
        for (a, v) in acc.data_mut().iter_mut().zip(b.ohat.data()) {
            *a += sign * v;
        }
    }
    acc
}

/// Checks `X_1 == Σ_l (X̂_{l,1} + X̂_{l,2}) + X_{L+1}` and returns the max
/// absolute deviation. Only meaningful when every block is a pure subtraction.
pub fn input_decomposition_check(model: &Minusformer, x: &Tensor) -> Result<f64> {
    let cfg = &model.config;
    if cfg.gate_enabled {
        return Err(Error::ConfigNotDecomposable("gates must be disabled"));
    }
    if cfg.norm_enabled {
        return Err(Error::ConfigNotDecomposable("layer norm must be disabled"));
    }
    if cfg.dropout != 0.0 {
        return Err(Error::ConfigNotDecomposable("dropout must be 0"));
    }
    if cfg.delta != 1 {
        return Err(Error::ConfigNotDecomposable("delta must be 1"));
    }
    if cfg.input_sign != Sign::Minus {
        return Err(Error::ConfigNotDecomposable("input sign must be subtraction"));
    }
    let (_, trace) = model.forward(x)?;
    let mut recon = trace.blocks.last().expect("n_blocks >= 1").residual.clone();
    for b in &trace.blocks {
        for ((r, a), f) in recon
            .data_mut()
            .iter_mut()
            .zip(b.xhat1.data())
            .zip(b.xhat2.data())
        {
            *r += a + f;
        }
    }
    Ok(recon.max_abs_diff(&trace.embedded))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockOutputKind {
    /// The block prediction `Ô_l`.
    Block,
    /// The running output stream `O_l`.
    Cumulative,
}

impl BlockOutputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockOutputKind::Block => "block",
            BlockOutputKind::Cumulative => "cumulative",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutputRow {
    /// 1-based block index.
    pub block: usize,
    pub kind: BlockOutputKind,
    pub variate: usize,
    pub step: usize,
    pub value: f64,
}

/// Per-block outputs of batch element `sample` in data units.
///
/// Cumulative rows are fully inverse-scaled (`x * std + mean`). Block rows
/// are increments and are only rescaled (`x * std`), so the alternating sum
/// of the block rows plus the variate mean reproduces the last cumulative row.
pub fn export_trace(trace: &ForwardTrace, scaler: &ScalerStats, sample: usize) -> Vec<BlockOutputRow> {
    let mut rows = Vec::new();
    for (l, b) in trace.blocks.iter().enumerate() {
        let shape = b.ohat.shape();
        let (d, h) = (shape[1], shape[2]);
        for (kind, t) in [
            (BlockOutputKind::Block, &b.ohat),
            (BlockOutputKind::Cumulative, &b.ostream),
        ] {
            for v in 0..d {
                for s in 0..h {
                    let raw = t.at(&[sample, v, s]);
                    let value = match kind {
                        BlockOutputKind::Block => raw * scaler.std[v],
                        BlockOutputKind::Cumulative => raw * scaler.std[v] + scaler.mean[v],
                    };
                    rows.push(BlockOutputRow {
                        block: l + 1,
                        kind,
                        variate: v,
                        step: s,
                        value,
                    });
                }
            }
        }
    }
    rows
}

pub fn write_block_table(path: &std::path::Path, rows: &[BlockOutputRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "kind", "variate", "step", "value"])?;
    for r in rows {
        w.write_record([
            r.block.to_string(),
            r.kind.as_str().to_string(),
            r.variate.to_string(),
            r.step.to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub block: usize,
    pub head: usize,
    pub query_variate: usize,
    pub key_variate: usize,
    pub weight: f64,
}

/// Attention weights of batch element `sample`, one row per (block, head, query, key).
pub fn export_attention(trace: &ForwardTrace, sample: usize) -> Vec<AttentionRow> {
    let mut rows = Vec::new();
    for (l, b) in trace.blocks.iter().enumerate() {
        let Some(w) = &b.attention else { continue };
        let s = w.shape();
        for h in 0..s[1] {
            for q in 0..s[2] {
                for k in 0..s[3] {
                    rows.push(AttentionRow {
                        block: l + 1,
                        head: h,
                        query_variate: q,
                        key_variate: k,
                        weight: w.at(&[sample, h, q, k]),
                    });
                }
            }
        }
    }
    rows
}

pub fn write_attention_table(path: &std::path::Path, rows: &[AttentionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "head", "query_variate", "key_variate", "weight"])?;
    for r in rows {
        w.write_record([
            r.block.to_string(),
            r.head.to_string(),
            r.query_variate.to_string(),
            r.key_variate.to_string(),
            r.weight.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

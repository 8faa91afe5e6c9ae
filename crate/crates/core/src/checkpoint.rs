//! Plain-text checkpoints.
//!
//! ```text
//! minusformer-checkpoint 1
//! [config]
//! input_len=96
//! ...
//! [scaler]
//! fitted_on=0..2800
//! mean=0.1 -0.2 0.05
//! std=1.01 0.98 1.1
//! [tensors]
//! embed.weight 96 32
//! <96*32 values, space separated, row-major>
//! ...
//! ```
//!
//! The `[scaler]` section is optional. Values use Rust's shortest
//! round-trip float formatting, so save followed by load is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::ScalerStats;
use crate::error::{Error, Result};
use crate::model::{Minusformer, MinusformerConfig};
use crate::tensor::Tensor;

pub const MAGIC: &str = "minusformer-checkpoint 1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Minusformer,
    pub scaler: Option<ScalerStats>,
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_floats(line: &str, what: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| bad(format!("{what}: bad number {t:?}"))))
        .collect()
}

impl Checkpoint {
    pub fn new(model: Minusformer, scaler: Option<ScalerStats>) -> Self {
        Self { model, scaler }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\n[config]\n");
        for (k, v) in self.model.config.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        if let Some(sc) = &self.scaler {
            s.push_str("[scaler]\n");
            let _ = writeln!(s, "fitted_on={}..{}", sc.fitted_on.start, sc.fitted_on.end);
            let _ = writeln!(s, "mean={}", join(&sc.mean));
            let _ = writeln!(s, "std={}", join(&sc.std));
        }
        s.push_str("[tensors]\n");
        let params = &self.model.params;
        for id in params.ids() {
            let t = params.get(id);
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{} {}", params.name(id), dims.join(" "));
            let _ = writeln!(s, "{}", join(t.data()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(bad("missing header line"));
        }
        if lines.next().map(str::trim) != Some("[config]") {
            return Err(bad("expected [config]"));
        }
        let mut cfg = MinusformerConfig::new(1, 1, 1);
        let mut section = "";
        for line in lines.by_ref() {
            let line = line.trim();
            if line == "[scaler]" || line == "[tensors]" {
                section = if line == "[scaler]" { "scaler" } else { "tensors" };
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line {line:?}")))?;
            if !cfg.set(k, v)? {
                return Err(bad(format!("unknown config key {k:?}")));
            }
        }
        let mut scaler = None;
        if section == "scaler" {
            let (mut range, mut mean, mut std) = (None, None, None);
            for line in lines.by_ref() {
                let line = line.trim();
                if line == "[tensors]" {
                    section = "tensors";
                    break;
                }
                match line.split_once('=') {
                    Some(("fitted_on", v)) => {
                        let (a, b) = v.split_once("..").ok_or_else(|| bad("bad fitted_on"))?;
                        let a = a.parse().map_err(|_| bad("bad fitted_on"))?;
                        let b = b.parse().map_err(|_| bad("bad fitted_on"))?;
                        range = Some(a..b);
                    }
                    Some(("mean", v)) => mean = Some(parse_floats(v, "scaler mean")?),
                    Some(("std", v)) => std = Some(parse_floats(v, "scaler std")?),
                    _ => return Err(bad(format!("bad scaler line {line:?}"))),
                }
            }
            match (range, mean, std) {
                (Some(fitted_on), Some(mean), Some(std)) if mean.len() == std.len() => {
                    scaler = Some(ScalerStats { mean, std, fitted_on })
                }
                _ => return Err(bad("incomplete scaler section")),
            }
        }
        if section != "tensors" {
            return Err(bad("missing [tensors]"));
        }

        let mut model = Minusformer::new(cfg)?;
        let mut seen = vec![false; model.params.len()];
        while let Some(head) = lines.next() {
            if head.trim().is_empty() {
                continue;
            }
            let mut parts = head.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("empty tensor header"))?;
            let shape = parts
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("{name}: bad dim {d:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let id = model
                .params
                .find(name)
                .ok_or_else(|| bad(format!("unexpected tensor {name:?}")))?;
            let expected = model.params.get(id).shape().to_vec();
            if shape != expected {
                return Err(bad(format!("{name}: shape {shape:?}, model expects {expected:?}")));
            }
            let data = parse_floats(lines.next().unwrap_or(""), name)?;
            *model.params.get_mut(id) = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let id = model.params.ids().nth(i).expect("index in range");
            return Err(bad(format!("missing tensor {:?}", model.params.name(id))));
        }
        Ok(Self { model, scaler })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamStore;
    use crate::model::Sign;

    fn model() -> Minusformer {
        let mut cfg = MinusformerConfig::new(12, 4, 3).with_embed_dim(8);
        cfg.n_blocks = 3;
        cfg.block_out_len = 6;
        cfg.heads = 2;
        cfg.output_sign = Sign::Plus;
        cfg.gate_enabled = false;
        cfg.dropout = 0.25;
        Minusformer::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        // perturb so values differ from the seeded init
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            for (i, v) in m.params.get_mut(id).data_mut().iter_mut().enumerate() {
                *v = *v * 1.000_000_1 + (i as f64) * 1e-17 - 3.3e-300;
            }
        }
        let scaler = ScalerStats { mean: vec![0.1, -2.5e-8, 3.0], std: vec![1.0 / 3.0, 2.0, 7.5], fitted_on: 0..70 };
        let ck = Checkpoint::new(m.clone(), Some(scaler.clone()));
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back.model.config, m.config);
        assert_eq!(back.scaler, Some(scaler));
        let same: fn(&ParamStore, &ParamStore) -> bool = |a, b| {
            a.ids().zip(b.ids()).all(|(x, y)| {
                a.name(x) == b.name(y)
                    && a.get(x).data().iter().zip(b.get(y).data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
        };
        assert!(same(&back.model.params, &m.params));
        assert_eq!(back.to_text(), ck.to_text());
    }

    #[test]
    fn scaler_is_optional() {
        let ck = Checkpoint::new(model(), None);
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert!(back.scaler.is_none());
    }

    #[test]
    fn rejects_corruption() {
        let text = Checkpoint::new(model(), None).to_text();
        assert!(Checkpoint::parse(&text.replacen(MAGIC, "nope", 1)).is_err());
        assert!(Checkpoint::parse(&text.replacen("embed.weight 12 8", "embed.weight 12 9", 1)).is_err());
        let truncated: String = text.lines().take(30).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Checkpoint::parse(&truncated), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::parse(&text.replacen("heads=2", "colour=2", 1)).is_err());
    }
}

//! Text checkpoints of a [`PennModel`] with hex-float parameters.
//!
//! ```text
//! format_version=1
//! mode=probabilistic
//! H=4
//! B=5
//! layer_sizes=20,64,64,6
//! activation=tanh
//! dt=0x1.999999999999ap-4
//! var_min=...
//! var_max=...
//! input_mean=<hex>,<hex>,...
//! input_std=...
//! target_mean=...
//! target_std=...
//! member=0
//! seed=...
//! weights.0=...
//! biases.0=...
//! ...
//! end sha256=<digest of every byte above this line>
//! ```

use std::path::Path;

use penn_mpc_core::nn::{Activation, Dense, Mlp};
use penn_mpc_core::penn::{ModelMode, NormStats, PennConfig, PennModel, VarianceBounds};
use sha2::{Digest, Sha256};

use crate::config::hex_digest;
use crate::error::{Error, Result};
use crate::numfmt::{hex, parse_hex};

pub const FORMAT_VERSION: u32 = 1;

fn hex_list(v: &[f64]) -> String {
    v.iter().map(|&x| hex(x)).collect::<Vec<_>>().join(",")
}

/// Serializes `model`; the same model always yields the same text.
pub fn checkpoint_text(model: &PennModel) -> String {
    let cfg = model.config();
    let norm = model.norm();
    let sizes = cfg.layer_sizes();
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    line("format_version", FORMAT_VERSION.to_string());
    line("mode", cfg.mode.name().into());
    line("H", cfg.history.to_string());
    line("B", cfg.ensemble_size.to_string());
    line("layer_sizes", sizes.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
    line("activation", cfg.activation.name().into());
    line("dt", hex(cfg.dt));
    line("var_min", hex(cfg.var_bounds.min));
    line("var_max", hex(cfg.var_bounds.max));
    line("input_mean", hex_list(&norm.input_mean));
    line("input_std", hex_list(&norm.input_std));
    line("target_mean", hex_list(&norm.target_mean));
    line("target_std", hex_list(&norm.target_std));
    for (i, m) in model.members().iter().enumerate() {
        line("member", i.to_string());
        line("seed", m.seed().to_string());
        for (k, layer) in m.layers().iter().enumerate() {
            line(&format!("weights.{k}"), hex_list(&layer.weights));
            line(&format!("biases.{k}"), hex_list(&layer.biases));
        }
    }
    let digest = hex_digest(&Sha256::digest(s.as_bytes()));
    s.push_str(&format!("end sha256={digest}\n"));
    s
}

pub fn save_checkpoint(path: &Path, model: &PennModel) -> Result<()> {
    std::fs::write(path, checkpoint_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PennModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}

/// Sequential `key=value` reader with line numbers.
struct Lines<'a> {
    path: &'a Path,
    lines: Vec<(u64, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn expect(&mut self, key: &str) -> Result<(u64, &'a str)> {
        let Some(&(no, line)) = self.lines.get(self.pos) else {
            return Err(Error::format(self.path, format!("corrupt checkpoint: missing `{key}`")));
        };
        self.pos += 1;
        match line.split_once('=') {
            Some((k, v)) if k == key => Ok((no, v)),
            _ => Err(Error::parse(self.path, no, format!("expected `{key}=...`, got `{line}`"))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (no, v) = self.expect(key)?;
        v.parse()
            .map_err(|_| Error::parse(self.path, no, format!("invalid value for `{key}`: `{v}`")))
    }

    fn float(&mut self, key: &str) -> Result<f64> {
        let (no, v) = self.expect(key)?;
        parse_hex(v).ok_or_else(|| Error::parse(self.path, no, format!("invalid hex float for `{key}`: `{v}`")))
    }

    fn floats(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let (no, v) = self.expect(key)?;
        let vals = if v.is_empty() {
            Vec::new()
        } else {
            v.split(',')
                .map(|x| parse_hex(x).ok_or_else(|| Error::parse(self.path, no, format!("invalid hex float `{x}` in `{key}`"))))
                .collect::<Result<Vec<_>>>()?
        };
        if vals.len() != len {
            return Err(Error::parse(
                self.path,
                no,
                format!("`{key}` has {} values, expected {len}", vals.len()),
            ));
        }
        Ok(vals)
    }
}

pub fn parse_checkpoint(text: &str, path: &Path) -> Result<PennModel> {
    let body_end = match text.trim_end_matches('\n').rfind('\n') {
        Some(i) => i + 1,
        None => 0,
    };
    let (body, last) = text.split_at(body_end);
    let Some(expected) = last.trim_end().strip_prefix("end sha256=") else {
        return Err(Error::format(path, "corrupt checkpoint: missing end marker (file truncated?)"));
    };
    let digest = hex_digest(&Sha256::digest(body.as_bytes()));
    if digest != expected {
        return Err(Error::format(path, "corrupt checkpoint: checksum mismatch"));
    }

    let mut rd = Lines {
        path,
        lines: body.lines().enumerate().map(|(i, l)| (i as u64 + 1, l)).collect(),
        pos: 0,
    };
    let version: u32 = rd.parsed("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint format_version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let (no, mode) = rd.expect("mode")?;
    let mode = ModelMode::from_name(mode).ok_or_else(|| Error::parse(path, no, format!("unknown mode `{mode}`")))?;
    let history: usize = rd.parsed("H")?;
    let ensemble: usize = rd.parsed("B")?;
    let (no, sizes) = rd.expect("layer_sizes")?;
    let sizes: Vec<usize> = sizes
        .split(',')
        .map(|v| v.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, no, format!("invalid layer_sizes `{sizes}`")))?;
    if sizes.len() < 2 {
        return Err(Error::parse(path, no, "layer_sizes needs at least input and output sizes"));
    }
    let (no, act) = rd.expect("activation")?;
    let activation = Activation::from_name(act).ok_or_else(|| Error::parse(path, no, format!("unknown activation `{act}`")))?;
    let dt = rd.float("dt")?;
    let var_bounds = VarianceBounds {
        min: rd.float("var_min")?,
        max: rd.float("var_max")?,
    };
    let config = PennConfig {
        history,
        ensemble_size: ensemble,
        hidden: sizes[1..sizes.len() - 1].to_vec(),
        activation,
        mode,
        var_bounds,
        dt,
    };
    if config.layer_sizes() != sizes {
        return Err(Error::format(
            path,
            format!("layer_sizes {sizes:?} disagree with H={history} and mode {}", mode.name()),
        ));
    }
    let d = config.input_dim();
    let to3 = |v: Vec<f64>| [v[0], v[1], v[2]];
    let norm = NormStats {
        input_mean: rd.floats("input_mean", d)?,
        input_std: rd.floats("input_std", d)?,
        target_mean: to3(rd.floats("target_mean", 3)?),
        target_std: to3(rd.floats("target_std", 3)?),
    };
    let mut members = Vec::with_capacity(ensemble);
    for i in 0..ensemble {
        let (no, idx) = rd.expect("member")?;
        if idx != i.to_string() {
            return Err(Error::parse(path, no, format!("expected member {i}, got `{idx}`")));
        }
        let seed: u64 = rd.parsed("seed")?;
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (k, w) in sizes.windows(2).enumerate() {
            let weights = rd.floats(&format!("weights.{k}"), w[0] * w[1])?;
            let biases = rd.floats(&format!("biases.{k}"), w[1])?;
            layers.push(Dense {
                in_dim: w[0],
                out_dim: w[1],
                weights,
                biases,
            });
        }
        members.push(Mlp::from_layers(layers, activation, seed).map_err(|e| Error::format(path, e.to_string()))?);
    }
    if let Some(&(no, line)) = rd.lines.get(rd.pos) {
        return Err(Error::parse(path, no, format!("unexpected trailing content `{line}`")));
    }
    PennModel::from_parts(config, members, norm).map_err(|e| Error::format(path, e.to_string()))
}

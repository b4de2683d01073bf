//! Parameter checkpoints.
//!
//! Layout: a newline-delimited text manifest, terminated by a line `end`,
//! followed by every parameter's values as little-endian `f64` in manifest
//! order.
//!
//! ```text
//! dtst-checkpoint v1
//! config blocks 4
//! config selector.k 2
//! param patch.w 16x32
//! end
//! <binary payload>
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::selector::SelectorConfig;
use crate::tensor::Tensor;

const MAGIC: &str = "dtst-checkpoint v1";

fn config_pairs(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    let mut out = vec![
        ("blocks", cfg.num_blocks.to_string()),
        ("embed_dim", cfg.embed_dim.to_string()),
        ("attn_heads", cfg.num_attn_heads.to_string()),
        ("grid_rows", cfg.grid_rows.to_string()),
        ("grid_cols", cfg.grid_cols.to_string()),
        ("patch_dim", cfg.patch_dim.to_string()),
        ("num_identities", cfg.num_identities.to_string()),
    ];
    match &cfg.selector {
        None => out.push(("selector", "none".into())),
        Some(s) => {
            out.push(("selector", "on".into()));
            out.push(("selector.k", s.k.to_string()));
            out.push(("selector.temperature", format!("{:?}", s.temperature)));
            out.push(("selector.heads", s.num_heads.to_string()));
            out.push(("selector.position", s.position.to_string()));
            out.push(("selector.noise", s.noise_enabled.to_string()));
        }
    }
    out
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| fmt_err(format!("bad value {v:?} for {key}")))
}

fn config_from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let get = |k: &str| {
        pairs
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| fmt_err(format!("missing config entry {k}")))
    };
    let selector = match get("selector")? {
        "none" => None,
        "on" => Some(SelectorConfig {
            k: parse_num("selector.k", get("selector.k")?)?,
            temperature: parse_num("selector.temperature", get("selector.temperature")?)?,
            num_heads: parse_num("selector.heads", get("selector.heads")?)?,
            position: get("selector.position")?.parse()?,
            noise_enabled: parse_num("selector.noise", get("selector.noise")?)?,
        }),
        other => return Err(fmt_err(format!("bad selector entry {other:?}"))),
    };
    let cfg = ModelConfig {
        num_blocks: parse_num("blocks", get("blocks")?)?,
        embed_dim: parse_num("embed_dim", get("embed_dim")?)?,
        num_attn_heads: parse_num("attn_heads", get("attn_heads")?)?,
        grid_rows: parse_num("grid_rows", get("grid_rows")?)?,
        grid_cols: parse_num("grid_cols", get("grid_cols")?)?,
        patch_dim: parse_num("patch_dim", get("patch_dim")?)?,
        num_identities: parse_num("num_identities", get("num_identities")?)?,
        selector,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Serialises `model` into checkpoint bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut text = String::new();
    text.push_str(MAGIC);
    text.push('\n');
    for (k, v) in config_pairs(&model.config) {
        text.push_str(&format!("config {k} {v}\n"));
    }
    for (name, t) in model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
        text.push_str(&format!("param {name} {}\n", dims.join("x")));
    }
    text.push_str("end\n");
    let mut bytes = text.into_bytes();
    for (_, t) in model.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Parses checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&c| c == b'\n')
            .ok_or_else(|| fmt_err("truncated manifest"))?;
        pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| fmt_err("manifest is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(fmt_err("missing header line"));
    }
    let mut pairs = Vec::new();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let mut parts = line.splitn(3, ' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("config"), Some(k), Some(v)) => pairs.push((k.to_string(), v.to_string())),
            (Some("param"), Some(name), Some(shape)) => {
                let dims = shape
                    .split('x')
                    .map(|s| parse_num::<usize>(name, s))
                    .collect::<Result<Vec<_>>>()?;
                shapes.push((name.to_string(), dims));
            }
            _ => return Err(fmt_err(format!("unrecognised manifest line {line:?}"))),
        }
    }
    let config = config_from_pairs(&pairs)?;
    let mut payload = &bytes[pos..];
    let mut params = ParamSet::new();
    for (name, dims) in shapes {
        let n: usize = dims.iter().product();
        if payload.len() < n * 8 {
            return Err(fmt_err(format!("payload too short for {name}")));
        }
        let data = payload[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        payload = &payload[n * 8..];
        params.insert(name, Tensor::new(dims, data)?);
    }
    if !payload.is_empty() {
        return Err(fmt_err(format!("{} trailing payload bytes", payload.len())));
    }
    Ok(Model { config, params })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

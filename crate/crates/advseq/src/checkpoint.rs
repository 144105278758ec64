//! Checkpoint serialization. Text format, one logical item per line:
//!
//! ```text
//! advseq-checkpoint v1
//! config <key> <value>          # one line per model-config field
//! param <name> <d0>x<d1>... <hex>[ <hex>...]
//! end
//! ```
//!
//! Parameter values are stored as the hexadecimal bit pattern of each
//! f64 (`u64` big-endian hex), so checkpoints round-trip bit-exactly.
//! Parameters appear in the parameter set's canonical order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::autodiff::Array;
use crate::model::{ArchKind, ModelConfig, ParamSet};

const MAGIC: &str = "advseq-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let cfg = &params.cfg;
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let config_lines = [
        ("vocab_size", cfg.vocab_size.to_string()),
        ("embed_dim", cfg.embed_dim.to_string()),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("num_encoder_layers", cfg.num_encoder_layers.to_string()),
        ("num_decoder_layers", cfg.num_decoder_layers.to_string()),
        ("arch", cfg.arch.to_string()),
        ("max_decode_len", cfg.max_decode_len.to_string()),
        ("max_positions", cfg.max_positions.to_string()),
    ];
    for (k, v) in config_lines {
        writeln!(out, "config {k} {v}").unwrap();
    }
    for (name, arr) in params.entries() {
        let shape = arr
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        write!(out, "param {name} {shape}").unwrap();
        for v in &arr.data {
            write!(out, " {:016x}", v.to_bits()).unwrap();
        }
        out.push('\n');
    }
    out.push_str("end\n");
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    let err = |line: usize, msg: String| CheckpointError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(err(1, format!("expected header {MAGIC:?}"))),
    }

    let mut cfg = ModelConfig::toy_default(0);
    let mut saw_end = false;
    let mut entries: Vec<(String, Array)> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line == "end" {
            saw_end = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("config") => {
                let key = fields.next().ok_or_else(|| err(lineno, "missing config key".into()))?;
                let val = fields.next().ok_or_else(|| err(lineno, "missing config value".into()))?;
                let parse_usize = |v: &str| {
                    v.parse::<usize>().map_err(|e| err(lineno, format!("bad {key}: {e}")))
                };
                match key {
                    "vocab_size" => cfg.vocab_size = parse_usize(val)?,
                    "embed_dim" => cfg.embed_dim = parse_usize(val)?,
                    "hidden_dim" => cfg.hidden_dim = parse_usize(val)?,
                    "num_encoder_layers" => cfg.num_encoder_layers = parse_usize(val)?,
                    "num_decoder_layers" => cfg.num_decoder_layers = parse_usize(val)?,
                    "max_decode_len" => cfg.max_decode_len = parse_usize(val)?,
                    "max_positions" => cfg.max_positions = parse_usize(val)?,
                    "arch" => {
                        cfg.arch = val
                            .parse::<ArchKind>()
                            .map_err(|e| err(lineno, e))?;
                    }
                    other => return Err(err(lineno, format!("unknown config key {other:?}"))),
                }
            }
            Some("param") => {
                let name = fields
                    .next()
                    .ok_or_else(|| err(lineno, "missing parameter name".into()))?
                    .to_string();
                let shape_str =
                    fields.next().ok_or_else(|| err(lineno, "missing shape".into()))?;
                let shape: Vec<usize> = shape_str
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(lineno, format!("bad shape {shape_str:?}: {e}")))?;
                let expected: usize = shape.iter().product();
                let mut data = Vec::with_capacity(expected);
                for h in fields {
                    let bits = u64::from_str_radix(h, 16)
                        .map_err(|e| err(lineno, format!("bad value {h:?}: {e}")))?;
                    data.push(f64::from_bits(bits));
                }
                if data.len() != expected {
                    return Err(err(
                        lineno,
                        format!("param {name}: expected {expected} values, found {}", data.len()),
                    ));
                }
                entries.push((name, Array::new(shape, data)));
            }
            Some(other) => return Err(err(lineno, format!("unknown record {other:?}"))),
            None => {}
        }
    }
    if !saw_end {
        return Err(err(text.lines().count(), "missing end marker".into()));
    }
    ParamSet::from_entries(cfg, entries).map_err(|msg| CheckpointError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    })
}

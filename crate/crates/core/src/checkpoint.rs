//! Model checkpoints.
//!
//! A checkpoint is a UTF-8 text header followed by raw parameters:
//!
//! ```text
//! acol-checkpoint 1
//! layers 784 256 128 10
//! activations relu relu linear
//! head 2 5
//! seed 42
//! epoch 57
//! end
//! <little-endian f64 blocks>
//! ```
//!
//! After the `end\n` line come, for each layer in order, its weights
//! (`fan_in x fan_out`, row-major) and then its bias, every value as an
//! 8-byte little-endian IEEE-754 double.

use std::fs;
use std::path::Path;

use crate::acol::AcolHead;
use crate::error::{Error, Result};
use crate::network::{Activation, DenseLayer, Model};
use crate::numeric::Matrix;

const MAGIC: &str = "acol-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub n_parents: usize,
    pub k: usize,
    pub seed: u64,
    pub epoch: usize,
}

pub fn encode(model: &Model, epoch: usize) -> Vec<u8> {
    let sizes: Vec<String> = model.layer_sizes().iter().map(|s| s.to_string()).collect();
    let acts: Vec<&str> = model.layers.iter().map(|l| l.activation.name()).collect();
    let header = format!(
        "{MAGIC}\nlayers {}\nactivations {}\nhead {} {}\nseed {}\nepoch {epoch}\nend\n",
        sizes.join(" "),
        acts.join(" "),
        model.head.n_parents(),
        model.head.k(),
        model.seed,
    );
    let mut out = header.into_bytes();
    out.reserve(model.parameter_count() * 8);
    for layer in &model.layers {
        for v in layer.weights.data().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_numbers<T: std::str::FromStr>(line: &str, key: &str) -> Result<Vec<T>> {
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected `{key} ...`, found `{line}`")))?;
    rest.split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("bad number `{t}` in `{key}`"))))
        .collect()
}

fn parse_header(text: &str) -> Result<CheckpointHeader> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != 7 || lines[0] != MAGIC || lines[6] != "end" {
        return Err(bad("unrecognized header"));
    }
    let layer_sizes: Vec<usize> = parse_numbers(lines[1], "layers")?;
    let activations = lines[2]
        .strip_prefix("activations ")
        .ok_or_else(|| bad("missing activations"))?
        .split_whitespace()
        .map(|a| Activation::parse(a).ok_or_else(|| bad(format!("unknown activation `{a}`"))))
        .collect::<Result<Vec<_>>>()?;
    let head: Vec<usize> = parse_numbers(lines[3], "head")?;
    let seed: Vec<u64> = parse_numbers(lines[4], "seed")?;
    let epoch: Vec<usize> = parse_numbers(lines[5], "epoch")?;
    if head.len() != 2 || seed.len() != 1 || epoch.len() != 1 {
        return Err(bad("malformed head/seed/epoch line"));
    }
    if layer_sizes.len() < 2 || activations.len() != layer_sizes.len() - 1 {
        return Err(bad("layer and activation counts disagree"));
    }
    Ok(CheckpointHeader {
        layer_sizes,
        activations,
        n_parents: head[0],
        k: head[1],
        seed: seed[0],
        epoch: epoch[0],
    })
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    const END: &[u8] = b"\nend\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .map(|p| p + END.len())
        .ok_or_else(|| bad("header terminator not found"))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let header = parse_header(text)?;
    let head = AcolHead::new(header.n_parents, header.k)?;
    if header.layer_sizes.last() != Some(&head.n()) {
        return Err(bad(format!(
            "head {}x{} does not match {} network outputs",
            header.n_parents,
            header.k,
            header.layer_sizes.last().unwrap_or(&0)
        )));
    }

    let payload = &bytes[split..];
    let expected: usize = header
        .layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum::<usize>()
        * 8;
    if payload.len() != expected {
        return Err(bad(format!(
            "parameter payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let layers = header
        .layer_sizes
        .windows(2)
        .zip(&header.activations)
        .map(|(w, &activation)| {
            let weights: Vec<f64> = values.by_ref().take(w[0] * w[1]).collect();
            let bias: Vec<f64> = values.by_ref().take(w[1]).collect();
            Ok(DenseLayer {
                weights: Matrix::from_vec(w[0], w[1], weights)?,
                bias,
                activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_layers(layers, head, header.seed)?;
    Ok((model, header))
}

pub fn save(model: &Model, epoch: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model, epoch)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, CheckpointHeader)> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Normalization, ValueNetParams, INPUT_DIM};
use crate::error::{CheckpointError, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const ACTIVATION: &str = "tanh";

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    /// SHA-256 of the resolved training configuration.
    pub config_hash: String,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureDoc {
    width: usize,
    depth: usize,
    activation: String,
    input_scale: [f64; INPUT_DIM],
    output_scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResidualDoc {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    w: Vec<f64>,
    opening_weight: Vec<f64>,
    opening_bias: Vec<f64>,
    residual: Vec<ResidualDoc>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    architecture: ArchitectureDoc,
    weights: WeightsDoc,
    metadata: CheckpointMetadata,
}

pub fn save_checkpoint(path: &Path, params: &ValueNetParams, metadata: &CheckpointMetadata) -> Result<()> {
    let l = params.layout();
    let th = params.as_slice();
    let arch = params.arch();
    let doc = CheckpointDoc {
        format_version: FORMAT_VERSION,
        architecture: ArchitectureDoc {
            width: arch.width,
            depth: arch.depth,
            activation: ACTIVATION.into(),
            input_scale: params.normalization().input,
            output_scale: params.normalization().output,
        },
        weights: WeightsDoc {
            w: th[l.w()].to_vec(),
            opening_weight: th[l.opening_weight()].to_vec(),
            opening_bias: th[l.opening_bias()].to_vec(),
            residual: (0..arch.depth)
                .map(|i| ResidualDoc {
                    weight: th[l.layer_weight(i)].to_vec(),
                    bias: th[l.layer_bias(i)].to_vec(),
                })
                .collect(),
            a: th[l.a()].to_vec(),
            b: th[l.b()].to_vec(),
            c: th[l.c()],
        },
        metadata: metadata.clone(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Training(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn shape(what: &str, expected: usize, found: usize) -> std::result::Result<(), CheckpointError> {
    if expected == found {
        Ok(())
    } else {
        Err(CheckpointError::Shape(format!("{what}: expected {expected} values, found {found}")))
    }
}

/// Reads a checkpoint. When `expected` is given the stored architecture must
/// match it.
pub fn load_checkpoint(path: &Path, expected: Option<Architecture>) -> Result<(ValueNetParams, CheckpointMetadata)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&text, expected)?)
}

fn parse(
    text: &str,
    expected: Option<Architecture>,
) -> std::result::Result<(ValueNetParams, CheckpointMetadata), CheckpointError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Corrupt("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let doc: CheckpointDoc = serde_json::from_value(value).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let arch = Architecture {
        width: doc.architecture.width,
        depth: doc.architecture.depth,
    };
    if doc.architecture.activation != ACTIVATION {
        return Err(CheckpointError::Shape(format!(
            "activation {:?}, expected {ACTIVATION:?}",
            doc.architecture.activation
        )));
    }
    if let Some(want) = expected {
        if want != arch {
            return Err(CheckpointError::Shape(format!(
                "checkpoint has width {} depth {}, configuration expects width {} depth {}",
                arch.width, arch.depth, want.width, want.depth
            )));
        }
    }
    let norm = Normalization {
        input: doc.architecture.input_scale,
        output: doc.architecture.output_scale,
    };
    let mut params = ValueNetParams::zeros(arch)
        .and_then(|p| p.with_normalization(norm))
        .map_err(|e| CheckpointError::Shape(e.to_string()))?;
    let l = params.layout();
    let wts = &doc.weights;
    shape("w", l.w().len(), wts.w.len())?;
    shape("opening_weight", l.opening_weight().len(), wts.opening_weight.len())?;
    shape("opening_bias", l.opening_bias().len(), wts.opening_bias.len())?;
    shape("residual layers", arch.depth, wts.residual.len())?;
    shape("a", l.a().len(), wts.a.len())?;
    shape("b", l.b().len(), wts.b.len())?;
    let th = params.as_mut_slice();
    th[l.w()].copy_from_slice(&wts.w);
    th[l.opening_weight()].copy_from_slice(&wts.opening_weight);
    th[l.opening_bias()].copy_from_slice(&wts.opening_bias);
    for (i, layer) in wts.residual.iter().enumerate() {
        shape("residual weight", l.layer_weight(i).len(), layer.weight.len())?;
        shape("residual bias", l.layer_bias(i).len(), layer.bias.len())?;
        th[l.layer_weight(i)].copy_from_slice(&layer.weight);
        th[l.layer_bias(i)].copy_from_slice(&layer.bias);
    }
    th[l.a()].copy_from_slice(&wts.a);
    th[l.b()].copy_from_slice(&wts.b);
    th[l.c()] = wts.c;
    if !params.is_finite() {
        return Err(CheckpointError::Corrupt("non-finite weight".into()));
    }
    Ok((params, doc.metadata))
}

//! JSON file formats: QNN models, spiking models, code arrays.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::qnn::{ActQuantizer, QnnAttention, QnnBlock, QnnLinear, QnnModel};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Pretty JSON with a trailing newline. Floats use the shortest
/// representation that parses back to the same bits.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format("<json>", e))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaFile {
    pub alpha: f64,
}

/// A linear layer on disk. Its input scale is implied by the predecessor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFile {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub alpha_out: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionFile {
    pub heads: usize,
    pub d_k: usize,
    pub kv_bits: u32,
    pub wq: LinearFile,
    pub wk: LinearFile,
    pub wv: LinearFile,
    /// Output projection; `alpha_in` re-quantizes the attention mix.
    pub wo: OutputProjectionFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputProjectionFile {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub alpha_in: f64,
    pub alpha_out: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockFile {
    Linear(LinearFile),
    Attention(AttentionFile),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QnnModelFile {
    pub bits: u32,
    pub input_quant: AlphaFile,
    pub layers: Vec<BlockFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
}

fn linear(f: &LinearFile, inq: ActQuantizer, bits: u32) -> Result<QnnLinear> {
    let mut l = QnnLinear::new(f.weights.clone(), f.bias.clone(), inq, ActQuantizer::new(f.alpha_out, bits)?)?;
    l.binary_scale = f.binary_scale;
    l.validate()?;
    Ok(l)
}

fn linear_file(l: &QnnLinear) -> LinearFile {
    LinearFile {
        weights: l.weights.clone(),
        bias: l.bias.clone(),
        alpha_out: l.out_quant.alpha,
        binary_scale: l.binary_scale,
    }
}

impl QnnModelFile {
    pub fn into_model(self) -> Result<QnnModel> {
        let bits = self.bits;
        let input_quant = ActQuantizer::new(self.input_quant.alpha, bits)?;
        let mut prev = input_quant;
        let mut layers = Vec::with_capacity(self.layers.len());
        for b in &self.layers {
            let block = match b {
                BlockFile::Linear(f) => QnnBlock::Linear(linear(f, prev, bits)?),
                BlockFile::Attention(a) => {
                    let kv = if a.kv_bits == 1 { bits } else { a.kv_bits };
                    let kvq = |f: &LinearFile| -> Result<QnnLinear> {
                        let mut l = QnnLinear::new(
                            f.weights.clone(),
                            f.bias.clone(),
                            prev,
                            ActQuantizer::new(f.alpha_out, kv)?,
                        )?;
                        l.binary_scale = f.binary_scale;
                        Ok(l)
                    };
                    let mq = ActQuantizer::new(a.wo.alpha_in, bits)?;
                    let mut wo = QnnLinear::new(
                        a.wo.weights.clone(),
                        a.wo.bias.clone(),
                        mq,
                        ActQuantizer::new(a.wo.alpha_out, bits)?,
                    )?;
                    wo.binary_scale = a.wo.binary_scale;
                    QnnBlock::Attention(QnnAttention {
                        heads: a.heads,
                        d_k: a.d_k,
                        kv_bits: a.kv_bits,
                        wq: linear(&a.wq, prev, bits)?,
                        wk: kvq(&a.wk)?,
                        wv: kvq(&a.wv)?,
                        wo,
                    })
                }
            };
            prev = block.out_quant();
            layers.push(block);
        }
        let mut m = QnnModel::new(input_quant, layers)?;
        m.seed = self.seed;
        m.dataset = self.dataset;
        Ok(m)
    }

    pub fn from_model(m: &QnnModel) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|b| match b {
                QnnBlock::Linear(l) => BlockFile::Linear(linear_file(l)),
                QnnBlock::Attention(a) => BlockFile::Attention(AttentionFile {
                    heads: a.heads,
                    d_k: a.d_k,
                    kv_bits: a.kv_bits,
                    wq: linear_file(&a.wq),
                    wk: linear_file(&a.wk),
                    wv: linear_file(&a.wv),
                    wo: OutputProjectionFile {
                        weights: a.wo.weights.clone(),
                        bias: a.wo.bias.clone(),
                        alpha_in: a.wo.in_quant.alpha,
                        alpha_out: a.wo.out_quant.alpha,
                        binary_scale: a.wo.binary_scale,
                    },
                }),
            })
            .collect();
        Self {
            bits: m.bits,
            input_quant: AlphaFile {
                alpha: m.input_quant.alpha,
            },
            layers,
            seed: m.seed,
            dataset: m.dataset.clone(),
        }
    }
}

pub fn load_qnn(path: &Path) -> Result<QnnModel> {
    let f: QnnModelFile = read_json(path)?;
    f.into_model().map_err(|e| match e {
        Error::Io { .. } | Error::Format { .. } => e,
        other => Error::format(path, other),
    })
}

pub fn save_qnn(path: &Path, m: &QnnModel) -> Result<()> {
    write_json(path, &QnnModelFile::from_model(m))
}

pub fn load_otters(path: &Path) -> Result<crate::converter::OttersModel> {
    let m: crate::converter::OttersModel = read_json(path)?;
    m.validate().map_err(|e| Error::format(path, e))?;
    Ok(m)
}

/// A JSON array of integer vectors.
pub fn load_codes(path: &Path) -> Result<Vec<Vec<u32>>> {
    read_json(path)
}

//! Seeded random models for verification, demos and benchmarks.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::matrix::Matrix;
use crate::qnn::{ActQuantizer, QnnAttention, QnnBlock, QnnLinear, QnnModel};
use crate::rng::Rng;

/// Random quantized layer with `Normal(0, weight_std)` weights.
///
/// The bias is centered so pre-activations land mostly inside the code range
/// for uniformly random input codes; `clip_rows` neurons get biases that push
/// them below 0 (even rows) or above the top code (odd rows).
pub fn random_linear(
    rng: &mut Rng,
    inputs: usize,
    outputs: usize,
    in_quant: ActQuantizer,
    out_quant: ActQuantizer,
    clip_rows: usize,
) -> Result<QnnLinear> {
    let std = 1.0 / (inputs as f64).sqrt();
    let n = Normal::new(0.0, std).expect("positive std");
    let weights = Matrix::from_fn(outputs, inputs, |_, _| n.sample(rng));
    let top = out_quant.levels() as f64 * out_quant.alpha;
    let in_top = in_quant.levels() as f64 * in_quant.alpha;
    let bias = (0..outputs)
        .map(|j| {
            // Expected pre-activation from a mid-range input.
            let mean: f64 = weights.row(j).iter().map(|w| w * in_top / 2.0).sum();
            let spread: f64 = weights.row(j).iter().map(|w| (w * in_top).powi(2)).sum::<f64>().sqrt();
            if j < clip_rows {
                if j % 2 == 0 {
                    -mean - 4.0 * spread - top
                } else {
                    -mean + 4.0 * spread + 2.0 * top
                }
            } else {
                -mean + rng.random_range(0.1..0.9) * top
            }
        })
        .collect();
    QnnLinear::new(weights, bias, in_quant, out_quant)
}

fn scale(rng: &mut Rng, bits: u32) -> Result<ActQuantizer> {
    ActQuantizer::new(rng.random_range(0.01..1.0), bits)
}

/// Random chain of linear layers with widths `arch`.
pub fn random_mlp(rng: &mut Rng, arch: &[usize], bits: u32) -> Result<QnnModel> {
    let input = scale(rng, bits)?;
    let mut prev = input;
    let mut layers = Vec::with_capacity(arch.len().saturating_sub(1));
    for w in arch.windows(2) {
        let out = scale(rng, bits)?;
        layers.push(QnnBlock::Linear(random_linear(rng, w[0], w[1], prev, out, 0)?));
        prev = out;
    }
    QnnModel::new(input, layers)
}

/// Random single attention block on `dim`-wide tokens.
pub fn random_attention(
    rng: &mut Rng,
    dim: usize,
    heads: usize,
    d_k: usize,
    kv_bits: u32,
    input: ActQuantizer,
) -> Result<QnnAttention> {
    let bits = input.bits;
    let dm = heads * d_k;
    let kvb = if kv_bits == 1 { bits } else { kv_bits };
    let qo = scale(rng, bits)?;
    let wq = random_linear(rng, dim, dm, input, qo, 0)?;
    let ko = scale(rng, kvb)?;
    let wk = random_linear(rng, dim, dm, input, ko, 0)?;
    let vo = scale(rng, kvb)?;
    let wv = random_linear(rng, dim, dm, input, vo, 0)?;
    // The mix is a convex combination of values, so scale its quantizer to them.
    let v_top = wv.out_quant.alpha * wv.out_quant.levels() as f64 * if kv_bits == 1 { 0.5 } else { 1.0 };
    let mq = ActQuantizer::new(v_top / input.levels() as f64 * rng.random_range(0.5..1.0), bits)?;
    let oo = scale(rng, bits)?;
    let wo = random_linear(rng, dm, dim, mq, oo, 0)?;
    let a = QnnAttention {
        heads,
        d_k,
        kv_bits,
        wq,
        wk,
        wv,
        wo,
    };
    a.validate()?;
    Ok(a)
}

/// `linear -> attention -> linear` model.
pub fn random_transformer(
    rng: &mut Rng,
    dim: usize,
    heads: usize,
    d_k: usize,
    kv_bits: u32,
    classes: usize,
    bits: u32,
) -> Result<QnnModel> {
    let input = scale(rng, bits)?;
    let h = scale(rng, bits)?;
    let l1 = random_linear(rng, dim, dim, input, h, 0)?;
    let att = random_attention(rng, dim, heads, d_k, kv_bits, h)?;
    let out = scale(rng, bits)?;
    let l2 = random_linear(rng, dim, classes, att.wo.out_quant, out, 0)?;
    QnnModel::new(input, vec![QnnBlock::Linear(l1), QnnBlock::Attention(att), QnnBlock::Linear(l2)])
}

/// Uniform random codes in `[0, 2^n - 1]`.
pub fn random_codes(rng: &mut Rng, rows: usize, cols: usize, q: &ActQuantizer) -> Vec<Vec<u32>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(0..=q.levels())).collect())
        .collect()
}

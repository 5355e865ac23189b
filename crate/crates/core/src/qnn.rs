//! Quantized reference network: activation quantizer, linear layers, 1-bit
//! weight/activation binarization, the dense attention reference and
//! multiplicative Gaussian noise injection.
//!
//! This module is the ground truth the spiking engine is checked against, so
//! nothing here nudges values near floor boundaries.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{rng_from_seed, Rng};

pub const MAX_BITS: u32 = 16;

/// `x -> alpha * clip(floor(x / alpha), 0, 2^n - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuantizer {
    pub alpha: f64,
    pub bits: u32,
}

impl ActQuantizer {
    pub fn new(alpha: f64, bits: u32) -> Result<Self> {
        let q = Self { alpha, bits };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Domain(format!(
                "quantizer scale must be positive and finite, got {}",
                self.alpha
            )));
        }
        if self.bits == 0 || self.bits > MAX_BITS {
            return Err(Error::Domain(format!(
                "bit width must lie in 1..={MAX_BITS}, got {}",
                self.bits
            )));
        }
        Ok(())
    }

    /// Number of positive levels, `2^n - 1`.
    #[inline]
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    #[inline]
    pub fn code(&self, a: f64) -> u32 {
        let q = (a / self.alpha).floor();
        let top = self.levels();
        if q >= top as f64 {
            top
        } else if q > 0.0 {
            q as u32
        } else {
            0
        }
    }

    #[inline]
    pub fn dequantize(&self, code: u32) -> f64 {
        self.alpha * code as f64
    }

    /// Quantizer whose codes span `[0, 1]`, used for softmax probabilities.
    pub fn unit(bits: u32) -> Result<Self> {
        let levels = ((1u64 << bits.min(MAX_BITS)) - 1) as f64;
        Self::new(1.0 / levels, bits)
    }
}

/// Returns `(value, code)`.
pub fn quantize_act(a: f64, q: &ActQuantizer) -> (f64, u32) {
    let code = q.code(a);
    (q.dequantize(code), code)
}

/// A `{+1, -1}` matrix with one positive scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    signs: Vec<i8>,
    pub scale: f64,
}

impl BinaryMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn sign(&self, r: usize, c: usize) -> i8 {
        self.signs[r * self.cols + c]
    }

    /// `scale * sign` as a dense matrix.
    pub fn reconstruct(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.scale * self.sign(r, c) as f64)
    }

    pub fn signs(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.sign(r, c) as f64)
    }
}

/// Sign binarization with a per-tensor scale of `mean(|W|)`; `sign(0) = +1`.
pub fn binarize_weights(w: &Matrix) -> Result<BinaryMatrix> {
    if w.is_empty() {
        return Err(Error::Shape("cannot binarize an empty matrix".into()));
    }
    let n = w.as_slice().len() as f64;
    let scale = w.as_slice().iter().map(|v| v.abs()).sum::<f64>() / n;
    if !(scale > 0.0) {
        return Err(Error::ZeroScale);
    }
    let signs = w
        .as_slice()
        .iter()
        .map(|&v| if v < 0.0 { -1 } else { 1 })
        .collect();
    Ok(BinaryMatrix {
        rows: w.rows(),
        cols: w.cols(),
        signs,
        scale,
    })
}

/// One quantized fully connected layer, `C_o x C_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct QnnLinear {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub in_quant: ActQuantizer,
    pub out_quant: ActQuantizer,
    /// Set when the weights are 1-bit: every weight is `+s` or `-s`.
    pub binary_scale: Option<f64>,
}

impl QnnLinear {
    pub fn new(
        weights: Matrix,
        bias: Vec<f64>,
        in_quant: ActQuantizer,
        out_quant: ActQuantizer,
    ) -> Result<Self> {
        let l = Self {
            weights,
            bias,
            in_quant,
            out_quant,
            binary_scale: None,
        };
        l.validate()?;
        Ok(l)
    }

    /// Replace the weights by their 1-bit reconstruction `scale * sign(W)`.
    pub fn binarized(mut self) -> Result<Self> {
        let b = binarize_weights(&self.weights)?;
        self.weights = b.reconstruct();
        self.binary_scale = Some(b.scale);
        Ok(self)
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn validate(&self) -> Result<()> {
        self.in_quant.validate()?;
        self.out_quant.validate()?;
        if self.bias.len() != self.weights.rows() {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} outputs",
                self.bias.len(),
                self.weights.rows()
            )));
        }
        if self.weights.as_slice().iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Domain("weights and biases must be finite".into()));
        }
        if let Some(s) = self.binary_scale {
            if !(s > 0.0) {
                return Err(Error::Domain("binary weight scale must be positive".into()));
            }
            if self.weights.as_slice().iter().any(|&w| w != s && w != -s) {
                return Err(Error::Domain(format!(
                    "1-bit layer has a weight outside {{+{s}, -{s}}}"
                )));
            }
        }
        Ok(())
    }

    /// Pre-activations for one input code vector.
    pub fn pre_activations(&self, x_codes: &[u32]) -> Result<Vec<f64>> {
        if x_codes.len() != self.inputs() {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, got {}",
                self.inputs(),
                x_codes.len()
            )));
        }
        let top = self.in_quant.levels();
        if let Some(c) = x_codes.iter().find(|&&c| c > top) {
            return Err(Error::Domain(format!("input code {c} exceeds {top}")));
        }
        let x: Vec<f64> = x_codes.iter().map(|&c| self.in_quant.dequantize(c)).collect();
        Ok((0..self.outputs())
            .map(|j| {
                let dot: f64 = self.weights.row(j).iter().zip(&x).map(|(w, x)| w * x).sum();
                dot + self.bias[j]
            })
            .collect())
    }
}

/// `(pre_acts, out_codes)` for one input code vector.
pub fn qnn_linear_forward(layer: &QnnLinear, x_codes: &[u32]) -> Result<(Vec<f64>, Vec<u32>)> {
    let pre = layer.pre_activations(x_codes)?;
    let codes = pre.iter().map(|&a| layer.out_quant.code(a)).collect();
    Ok((pre, codes))
}

/// Key/value representation inside an attention block.
#[derive(Clone, Debug, PartialEq)]
pub enum KvTensor {
    /// n-bit codes under the projection's output quantizer.
    Codes { codes: Vec<Vec<u32>>, quant: ActQuantizer },
    /// Sign of the projection pre-activations with a mean-magnitude scale.
    Binary(BinaryMatrix),
}

impl KvTensor {
    /// Dense real value at `(token, channel)`.
    pub fn value(&self, s: usize, d: usize) -> f64 {
        match self {
            KvTensor::Codes { codes, quant } => quant.dequantize(codes[s][d]),
            KvTensor::Binary(b) => b.scale * b.sign(s, d) as f64,
        }
    }
}

/// `sum x * kv(r, c)` over `(x, r, c)` terms. Binary tensors accumulate
/// `+/- x` and apply the scale once at the end.
fn kv_dot(kv: &KvTensor, terms: impl Iterator<Item = (f64, usize, usize)>) -> f64 {
    match kv {
        KvTensor::Binary(b) => b.scale * terms.map(|(x, r, c)| x * b.sign(r, c) as f64).sum::<f64>(),
        KvTensor::Codes { .. } => terms.map(|(x, r, c)| x * kv.value(r, c)).sum(),
    }
}

/// Multi-head self-attention with quantized projections.
#[derive(Clone, Debug, PartialEq)]
pub struct QnnAttention {
    pub heads: usize,
    pub d_k: usize,
    pub kv_bits: u32,
    pub wq: QnnLinear,
    pub wk: QnnLinear,
    pub wv: QnnLinear,
    /// `wo.in_quant` re-quantizes the attention output.
    pub wo: QnnLinear,
}

/// Intermediate tensors of one attention forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub q_codes: Vec<Vec<u32>>,
    pub k: KvTensor,
    pub v: KvTensor,
    /// Raw `Q K^T` per head, `[h][S][S]`, before the `1/sqrt(d_k)` scaling.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub probs: Vec<Vec<Vec<f64>>>,
    pub prob_codes: Vec<Vec<Vec<u32>>>,
    /// Probability-weighted values, `[S][h * d_k]`.
    pub mixed: Vec<Vec<f64>>,
    pub mixed_codes: Vec<Vec<u32>>,
    pub out_pre: Vec<Vec<f64>>,
    pub out_codes: Vec<Vec<u32>>,
}

/// Numerically stable softmax in full precision.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl QnnAttention {
    pub fn model_dim(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn prob_quant(&self) -> Result<ActQuantizer> {
        ActQuantizer::unit(self.wq.out_quant.bits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 {
            return Err(Error::Config("attention needs heads >= 1 and d_k >= 1".into()));
        }
        if self.kv_bits != 1 && self.kv_bits != 4 {
            return Err(Error::Config(format!(
                "kv_bits must be 1 or 4, got {}",
                self.kv_bits
            )));
        }
        let dm = self.model_dim();
        for (name, l) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            l.validate()?;
            if l.outputs() != dm {
                return Err(Error::Shape(format!(
                    "{name} must project to heads * d_k = {dm}, got {}",
                    l.outputs()
                )));
            }
            if l.inputs() != self.wq.inputs() || l.in_quant != self.wq.in_quant {
                return Err(Error::Shape(format!("{name} disagrees with wq on its input")));
            }
        }
        self.wo.validate()?;
        if self.wo.inputs() != dm {
            return Err(Error::Shape(format!(
                "wo must take heads * d_k = {dm} inputs, got {}",
                self.wo.inputs()
            )));
        }
        if self.kv_bits != 1
            && (self.wk.out_quant.bits != self.kv_bits || self.wv.out_quant.bits != self.kv_bits)
        {
            return Err(Error::Config(format!(
                "kv_bits = {} requires K/V projections quantized to that width",
                self.kv_bits
            )));
        }
        Ok(())
    }

    fn kv(&self, layer: &QnnLinear, x: &[Vec<u32>]) -> Result<KvTensor> {
        let pre: Vec<Vec<f64>> = x
            .iter()
            .map(|row| layer.pre_activations(row))
            .collect::<Result<_>>()?;
        if self.kv_bits == 1 {
            let m = Matrix::from_rows(pre)?;
            Ok(KvTensor::Binary(binarize_weights(&m)?))
        } else {
            let codes = pre
                .iter()
                .map(|r| r.iter().map(|&a| layer.out_quant.code(a)).collect())
                .collect();
            Ok(KvTensor::Codes {
                codes,
                quant: layer.out_quant,
            })
        }
    }

    /// Dense reference forward pass over a sequence of input code rows.
    pub fn forward(&self, x: &[Vec<u32>]) -> Result<AttentionTrace> {
        self.validate()?;
        let seq = x.len();
        if seq == 0 {
            return Err(Error::Shape("attention needs at least one token".into()));
        }
        let q_codes: Vec<Vec<u32>> = x
            .iter()
            .map(|row| qnn_linear_forward(&self.wq, row).map(|(_, c)| c))
            .collect::<Result<_>>()?;
        let k = self.kv(&self.wk, x)?;
        let v = self.kv(&self.wv, x)?;
        let pq = self.prob_quant()?;
        let inv_sqrt = 1.0 / (self.d_k as f64).sqrt();
        let dm = self.model_dim();

        let mut scores = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        let mut prob_codes = Vec::with_capacity(self.heads);
        let mut mixed = vec![vec![0.0; dm]; seq];
        for h in 0..self.heads {
            let base = h * self.d_k;
            let sc: Vec<Vec<f64>> = (0..seq)
                .map(|s1| {
                    (0..seq)
                        .map(|s2| {
                            kv_dot(&k, (0..self.d_k).map(|d| {
                                (self.wq.out_quant.dequantize(q_codes[s1][base + d]), s2, base + d)
                            }))
                        })
                        .collect()
                })
                .collect();
            let pr: Vec<Vec<f64>> = sc
                .iter()
                .map(|row| softmax(&row.iter().map(|v| v * inv_sqrt).collect::<Vec<_>>()))
                .collect();
            let pc: Vec<Vec<u32>> = pr
                .iter()
                .map(|row| row.iter().map(|&p| pq.code(p)).collect())
                .collect();
            for s in 0..seq {
                for d in 0..self.d_k {
                    mixed[s][base + d] =
                        kv_dot(&v, (0..seq).map(|s2| (pq.dequantize(pc[s][s2]), s2, base + d)));
                }
            }
            scores.push(sc);
            probs.push(pr);
            prob_codes.push(pc);
        }
        let mq = self.wo.in_quant;
        let mixed_codes: Vec<Vec<u32>> = mixed
            .iter()
            .map(|r| r.iter().map(|&a| mq.code(a)).collect())
            .collect();
        let mut out_pre = Vec::with_capacity(seq);
        let mut out_codes = Vec::with_capacity(seq);
        for row in &mixed_codes {
            let (p, c) = qnn_linear_forward(&self.wo, row)?;
            out_pre.push(p);
            out_codes.push(c);
        }
        Ok(AttentionTrace {
            q_codes,
            k,
            v,
            scores,
            probs,
            prob_codes,
            mixed,
            mixed_codes,
            out_pre,
            out_codes,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QnnBlock {
    Linear(QnnLinear),
    Attention(QnnAttention),
}

impl QnnBlock {
    pub fn in_quant(&self) -> ActQuantizer {
        match self {
            QnnBlock::Linear(l) => l.in_quant,
            QnnBlock::Attention(a) => a.wq.in_quant,
        }
    }

    pub fn out_quant(&self) -> ActQuantizer {
        match self {
            QnnBlock::Linear(l) => l.out_quant,
            QnnBlock::Attention(a) => a.wo.out_quant,
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            QnnBlock::Linear(l) => l.inputs(),
            QnnBlock::Attention(a) => a.wq.inputs(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            QnnBlock::Linear(l) => l.outputs(),
            QnnBlock::Attention(a) => a.wo.outputs(),
        }
    }
}

/// Per-block output of a model forward pass; rows are tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutput {
    pub pre: Vec<Vec<f64>>,
    pub codes: Vec<Vec<u32>>,
}

/// A chain of quantized blocks sharing one bit width.
#[derive(Clone, Debug, PartialEq)]
pub struct QnnModel {
    pub bits: u32,
    pub input_quant: ActQuantizer,
    pub layers: Vec<QnnBlock>,
    pub seed: Option<u64>,
    pub dataset: Option<DatasetSpec>,
}

impl QnnModel {
    pub fn new(input_quant: ActQuantizer, layers: Vec<QnnBlock>) -> Result<Self> {
        let m = Self {
            bits: input_quant.bits,
            input_quant,
            layers,
            seed: None,
            dataset: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.input_quant.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let mut prev = self.input_quant;
        let mut width: Option<usize> = None;
        for (i, block) in self.layers.iter().enumerate() {
            match block {
                QnnBlock::Linear(l) => l.validate()?,
                QnnBlock::Attention(a) => a.validate()?,
            }
            if block.in_quant() != prev {
                return Err(Error::Chaining {
                    layer: i,
                    reason: format!(
                        "input quantizer {:?} differs from predecessor's output {:?}",
                        block.in_quant(),
                        prev
                    ),
                });
            }
            if let Some(w) = width {
                if w != block.inputs() {
                    return Err(Error::Shape(format!(
                        "layer {i} expects {} inputs but its predecessor emits {w}",
                        block.inputs()
                    )));
                }
            }
            let q = block.out_quant();
            if q.bits != self.bits {
                return Err(Error::Config(format!(
                    "layer {i} uses {} bits, model uses {}",
                    q.bits, self.bits
                )));
            }
            prev = q;
            width = Some(block.outputs());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, QnnBlock::outputs)
    }

    pub fn has_attention(&self) -> bool {
        self.layers.iter().any(|b| matches!(b, QnnBlock::Attention(_)))
    }

    /// Forward pass over a token sequence; linear blocks act per token.
    pub fn forward(&self, x: &[Vec<u32>]) -> Result<Vec<BlockOutput>> {
        let mut cur: Vec<Vec<u32>> = x.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for block in &self.layers {
            let bo = match block {
                QnnBlock::Linear(l) => {
                    let mut pre = Vec::with_capacity(cur.len());
                    let mut codes = Vec::with_capacity(cur.len());
                    for row in &cur {
                        let (p, c) = qnn_linear_forward(l, row)?;
                        pre.push(p);
                        codes.push(c);
                    }
                    BlockOutput { pre, codes }
                }
                QnnBlock::Attention(a) => {
                    let tr = a.forward(&cur)?;
                    BlockOutput {
                        pre: tr.out_pre,
                        codes: tr.out_codes,
                    }
                }
            };
            cur = bo.codes.clone();
            out.push(bo);
        }
        Ok(out)
    }

    /// Quantize raw real inputs with the input quantizer.
    pub fn encode_input(&self, x: &[f64]) -> Vec<u32> {
        x.iter().map(|&v| self.input_quant.code(v)).collect()
    }
}

/// Which scalar a noise setting perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    Activation,
    DecayOutput,
    Tau,
    Beta,
}

impl std::fmt::Display for NoiseTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseTarget::Activation => "activation",
            NoiseTarget::DecayOutput => "decay_output",
            NoiseTarget::Tau => "tau",
            NoiseTarget::Beta => "beta",
        })
    }
}

impl std::str::FromStr for NoiseTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(Self::Activation),
            "decay_output" => Ok(Self::DecayOutput),
            "tau" => Ok(Self::Tau),
            "beta" => Ok(Self::Beta),
            other => Err(Error::Config(format!("unknown noise target `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: f64,
    pub target: NoiseTarget,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(level: f64, target: NoiseTarget, seed: u64) -> Result<Self> {
        if !(level >= 0.0) || !level.is_finite() {
            return Err(Error::Domain(format!("noise level must be >= 0, got {level}")));
        }
        Ok(Self {
            level,
            target,
            seed,
        })
    }

    pub fn source(&self) -> NoiseSource {
        NoiseSource::new(self.level, rng_from_seed(self.seed))
    }
}

/// Stream of multiplicative factors `1 + eps`, `eps ~ Normal(0, level^2)`.
///
/// A standard normal is drawn for every factor regardless of level, so the
/// stream position depends only on how many factors were taken.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    level: f64,
    rng: Rng,
}

impl NoiseSource {
    pub fn new(level: f64, rng: Rng) -> Self {
        Self { level, rng }
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    #[inline]
    pub fn factor(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        1.0 + self.level * z
    }

    #[inline]
    pub fn perturb(&mut self, p: f64) -> f64 {
        p * self.factor()
    }
}

/// Perturb every value in index order with a fresh stream from `spec.seed`.
pub fn inject_noise(values: &[f64], spec: &NoiseSpec) -> Vec<f64> {
    let mut src = spec.source();
    values.iter().map(|&p| src.perturb(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn q(alpha: f64, bits: u32) -> ActQuantizer {
        ActQuantizer::new(alpha, bits).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_act(0.37, &q(0.1, 4)).1, 3);
        assert!((quantize_act(0.37, &q(0.1, 4)).0 - 0.3).abs() < 1e-15);
        assert_eq!(quantize_act(-1.2, &q(0.7, 4)), (0.0, 0));
        let (v, c) = quantize_act(2.0, &q(0.1, 4));
        assert_eq!(c, 15);
        assert!((v - 1.5).abs() < 1e-15);
    }

    #[test]
    fn quantizer_rejects_bad_scale() {
        assert!(ActQuantizer::new(0.0, 4).is_err());
        assert!(ActQuantizer::new(-0.1, 4).is_err());
        assert!(ActQuantizer::new(0.1, 0).is_err());
    }

    #[test]
    fn identity_layer() {
        let one = q(1.0, 4);
        let l = QnnLinear::new(Matrix::from_rows(vec![vec![1.0]]).unwrap(), vec![0.0], one, one)
            .unwrap();
        assert_eq!(qnn_linear_forward(&l, &[5]).unwrap(), (vec![5.0], vec![5]));
    }

    #[test]
    fn zero_layer() {
        let a = q(0.3, 4);
        let l = QnnLinear::new(Matrix::zeros(3, 4), vec![0.0; 3], a, a).unwrap();
        assert_eq!(qnn_linear_forward(&l, &[1, 2, 3, 15]).unwrap().1, vec![0, 0, 0]);
    }

    #[test]
    fn shape_errors() {
        let a = q(0.3, 4);
        let l = QnnLinear::new(Matrix::zeros(3, 4), vec![0.0; 3], a, a).unwrap();
        assert!(matches!(qnn_linear_forward(&l, &[1, 2]), Err(Error::Shape(_))));
        assert!(QnnLinear::new(Matrix::zeros(3, 4), vec![0.0; 2], a, a).is_err());
        assert!(qnn_linear_forward(&l, &[1, 2, 3, 16]).is_err());
    }

    #[test]
    fn random_layer_matches_naive_matmul() {
        let mut rng = rng_from_seed(42);
        let qin = q(0.07, 4);
        let qout = q(0.11, 4);
        let w = Matrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
        let l = QnnLinear::new(w.clone(), b.clone(), qin, qout).unwrap();
        for _ in 0..50 {
            let x: Vec<u32> = (0..8).map(|_| rng.random_range(0..=15)).collect();
            let (pre, codes) = qnn_linear_forward(&l, &x).unwrap();
            // naive: explicit index loops
            for j in 0..8 {
                let mut acc = 0.0;
                for i in 0..8 {
                    acc += w.get(j, i) * (0.07 * x[i] as f64);
                }
                acc += b[j];
                assert_eq!(pre[j], acc);
                let c = (acc / 0.11).floor().clamp(0.0, 15.0) as u32;
                assert_eq!(codes[j], c);
            }
        }
    }

    #[test]
    fn binarize_examples() {
        let w = Matrix::from_rows(vec![vec![2.0, -2.0], vec![2.0, -2.0]]).unwrap();
        let b = binarize_weights(&w).unwrap();
        assert_eq!(b.scale, 2.0);
        assert_eq!(b.signs().to_rows(), vec![vec![1.0, -1.0], vec![1.0, -1.0]]);

        let w = Matrix::from_rows(vec![vec![0.0, -1.0]]).unwrap();
        assert_eq!(binarize_weights(&w).unwrap().sign(0, 0), 1);

        assert!(matches!(
            binarize_weights(&Matrix::zeros(2, 2)),
            Err(Error::ZeroScale)
        ));
    }

    #[test]
    fn binarize_scale_is_optimal() {
        let mut rng = rng_from_seed(9);
        let w = Matrix::from_fn(6, 5, |_, _| rng.random_range(-3.0..3.0));
        let b = binarize_weights(&w).unwrap();
        let err = |s: f64| -> f64 {
            (0..6)
                .flat_map(|r| (0..5).map(move |c| (r, c)))
                .map(|(r, c)| (w.get(r, c) - s * b.sign(r, c) as f64).powi(2))
                .sum()
        };
        let best = err(b.scale);
        // 1-D scan over candidate scales
        for i in 1..=4000 {
            let s = i as f64 * 1e-3;
            assert!(err(s) >= best - 1e-12, "scale {s} beats mean |W|");
        }
    }

    #[test]
    fn noise_zero_level_is_identity() {
        let xs = vec![1.0, -2.5, 3.25, 0.0];
        let spec = NoiseSpec::new(0.0, NoiseTarget::Activation, 3).unwrap();
        assert_eq!(inject_noise(&xs, &spec), xs);
    }

    #[test]
    fn noise_deterministic() {
        let xs = vec![1.0; 32];
        let spec = NoiseSpec::new(0.2, NoiseTarget::DecayOutput, 77).unwrap();
        assert_eq!(inject_noise(&xs, &spec), inject_noise(&xs, &spec));
        assert!(NoiseSpec::new(-0.1, NoiseTarget::Tau, 0).is_err());
    }

    #[test]
    fn noise_statistics() {
        let xs = vec![1.0; 1_000_000];
        let spec = NoiseSpec::new(0.1, NoiseTarget::Activation, 2024).unwrap();
        let ys = inject_noise(&xs, &spec);
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 1.0).abs() <= 0.001, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() <= 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1.0, 2.0, -3.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantizer_idempotent(a in -10.0f64..10.0, alpha in 0.01f64..1.0, bits in 1u32..8) {
            let qz = q(alpha, bits);
            let (v, c) = quantize_act(a, &qz);
            prop_assert!(c <= qz.levels());
            // (alpha * c) / alpha can round just below c; floor is taken as computed
            let c2 = qz.code(v);
            prop_assert!(c2 == c || (c2 + 1 == c && v / alpha < c as f64));
        }

        #[test]
        fn quantizer_monotone(a in -10.0f64..10.0, d in 0.0f64..5.0, alpha in 0.01f64..1.0) {
            let qz = q(alpha, 4);
            prop_assert!(qz.code(a) <= qz.code(a + d));
        }

        #[test]
        fn binarize_preserves_sign(vals in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            prop_assume!(vals.iter().any(|v| *v != 0.0));
            let m = Matrix::from_rows(vec![vals.clone()]).unwrap();
            let b = binarize_weights(&m).unwrap();
            for (i, v) in vals.iter().enumerate() {
                prop_assert!(b.sign(0, i) as f64 * v >= 0.0);
            }
        }
    }
}

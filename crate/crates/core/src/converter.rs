//! Exact QNN-to-SNN conversion: synapse scales, dynamic threshold schedules,
//! a shared spike-time table and layer windows.

use serde::{Deserialize, Serialize};

use crate::decay::{build_spike_time_table, DecayModel, SpikeTimeTable};
use crate::attention::run_attention_block;
use crate::engine::{run_linear_block, EngineMode, SamplingMode, Sampler};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::qnn::{ActQuantizer, QnnAttention, QnnBlock, QnnLinear, QnnModel, MAX_BITS};
use crate::rng::{derive_seed, substream};

pub const DEFAULT_BOUNDARY_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionConfig {
    pub bits: u32,
    pub sampling_mode: SamplingMode,
    pub boundary_eps: f64,
}

impl ConversionConfig {
    pub fn new(bits: u32) -> Self {
        Self {
            bits,
            sampling_mode: SamplingMode::Ideal,
            boundary_eps: DEFAULT_BOUNDARY_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > MAX_BITS {
            return Err(Error::Config(format!("bits must lie in 1..={MAX_BITS}, got {}", self.bits)));
        }
        if !(self.boundary_eps >= 0.0) {
            return Err(Error::Config("boundary_eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// `T = 2^n - 1`.
pub fn window_for_bits(bits: u32) -> usize {
    (1usize << bits) - 1
}

/// `theta(k) = alpha_out * (T - k)` inside the window, unbounded outside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSchedule {
    pub alpha_out: f64,
    pub window: usize,
}

impl ThresholdSchedule {
    #[inline]
    pub fn theta(&self, k: usize) -> f64 {
        if k < self.window {
            self.alpha_out * (self.window - k) as f64
        } else {
            f64::INFINITY
        }
    }
}

/// A spiking fully connected layer. `gamma[j][i] = w[j][i] * alpha_in * T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OttersLayer {
    pub gamma: Matrix,
    pub bias: Vec<f64>,
    pub alpha_in: f64,
    pub alpha_out: f64,
    /// Position of the layer's active window in the schedule.
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_scale: Option<f64>,
}

impl OttersLayer {
    pub fn inputs(&self) -> usize {
        self.gamma.cols()
    }

    pub fn outputs(&self) -> usize {
        self.gamma.rows()
    }

    pub fn schedule(&self, window: usize) -> ThresholdSchedule {
        ThresholdSchedule {
            alpha_out: self.alpha_out,
            window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_in", self.alpha_in), ("alpha_out", self.alpha_out)] {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {a}")));
            }
        }
        if self.bias.len() != self.gamma.rows() {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} outputs",
                self.bias.len(),
                self.gamma.rows()
            )));
        }
        if self.gamma.as_slice().iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Domain("gamma and bias must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OttersAttention {
    pub heads: usize,
    pub d_k: usize,
    pub kv_bits: u32,
    pub wq: OttersLayer,
    pub wk: OttersLayer,
    pub wv: OttersLayer,
    pub wo: OttersLayer,
}

impl OttersAttention {
    pub fn model_dim(&self) -> usize {
        self.heads * self.d_k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OttersBlock {
    Linear(OttersLayer),
    Attention(OttersAttention),
}

impl OttersBlock {
    pub fn inputs(&self) -> usize {
        match self {
            OttersBlock::Linear(l) => l.inputs(),
            OttersBlock::Attention(a) => a.wq.inputs(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            OttersBlock::Linear(l) => l.outputs(),
            OttersBlock::Attention(a) => a.wo.outputs(),
        }
    }
}

/// Converted spiking model with its single spike-time table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OttersModel {
    pub bits: u32,
    #[serde(rename = "T")]
    pub window: usize,
    pub table: SpikeTimeTable,
    pub decay: DecayModel,
    pub input_alpha: f64,
    pub sampling_mode: SamplingMode,
    pub boundary_eps: f64,
    pub layers: Vec<OttersBlock>,
}

impl OttersModel {
    pub fn input_quant(&self) -> Result<ActQuantizer> {
        ActQuantizer::new(self.input_alpha, self.bits)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, OttersBlock::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, OttersBlock::outputs)
    }

    pub fn has_attention(&self) -> bool {
        self.layers.iter().any(|b| matches!(b, OttersBlock::Attention(_)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > MAX_BITS {
            return Err(Error::Config(format!("bits must lie in 1..={MAX_BITS}")));
        }
        if self.window != window_for_bits(self.bits) {
            return Err(Error::Config(format!(
                "T = {} does not equal 2^{} - 1",
                self.window, self.bits
            )));
        }
        self.table.validate()?;
        if self.table.window != self.window {
            return Err(Error::Config(format!(
                "table built for T = {}, model uses T = {}",
                self.table.window, self.window
            )));
        }
        self.decay.validate()?;
        if !(self.input_alpha > 0.0) || !self.input_alpha.is_finite() {
            return Err(Error::Domain("input_alpha must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let mut prev_alpha = self.input_alpha;
        let mut width = self.layers[0].inputs();
        for (i, b) in self.layers.iter().enumerate() {
            let (first, last) = match b {
                OttersBlock::Linear(l) => {
                    l.validate()?;
                    (l, l)
                }
                OttersBlock::Attention(a) => {
                    if a.heads == 0 || a.d_k == 0 || !(a.kv_bits == 1 || a.kv_bits == 4) {
                        return Err(Error::Config(format!("attention block {i} is malformed")));
                    }
                    for l in [&a.wq, &a.wk, &a.wv, &a.wo] {
                        l.validate()?;
                    }
                    let dm = a.model_dim();
                    if [&a.wq, &a.wk, &a.wv].iter().any(|l| {
                        l.outputs() != dm || l.inputs() != a.wq.inputs() || l.alpha_in != a.wq.alpha_in
                    }) || a.wo.inputs() != dm
                    {
                        return Err(Error::Shape(format!("attention block {i} projections disagree")));
                    }
                    (&a.wq, &a.wo)
                }
            };
            if first.alpha_in != prev_alpha {
                return Err(Error::Chaining {
                    layer: i,
                    reason: format!("alpha_in {} differs from predecessor's {}", first.alpha_in, prev_alpha),
                });
            }
            if b.inputs() != width {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but its predecessor emits {width}",
                    b.inputs()
                )));
            }
            prev_alpha = last.alpha_out;
            width = b.outputs();
        }
        Ok(())
    }
}

/// Map one quantized layer onto a spiking layer for the given table.
pub fn convert_layer(q: &QnnLinear, table: &SpikeTimeTable) -> Result<OttersLayer> {
    q.validate()?;
    let t = q.in_quant.levels() as usize;
    if table.window != t || q.out_quant.levels() as usize != t {
        return Err(Error::Chaining {
            layer: 0,
            reason: format!(
                "table T = {} but quantizers use {} / {} levels",
                table.window,
                q.in_quant.levels(),
                q.out_quant.levels()
            ),
        });
    }
    let scale = q.in_quant.alpha * t as f64;
    Ok(OttersLayer {
        gamma: q.weights.map(|w| w * scale),
        bias: q.bias.clone(),
        alpha_in: q.in_quant.alpha,
        alpha_out: q.out_quant.alpha,
        window: 0,
        binary_scale: q.binary_scale.map(|s| s * scale),
    })
}

fn convert_attention(a: &QnnAttention, table: &SpikeTimeTable, window: &mut usize) -> Result<OttersAttention> {
    let conv = |l: &QnnLinear, w: usize| -> Result<OttersLayer> {
        let mut o = convert_layer(l, table)?;
        o.window = w;
        Ok(o)
    };
    // Q, K and V share one window since they consume the same input spikes;
    // scores and probability-value mixing occupy the next two.
    let start = *window;
    *window += 4;
    Ok(OttersAttention {
        heads: a.heads,
        d_k: a.d_k,
        kv_bits: a.kv_bits,
        wq: conv(&a.wq, start)?,
        wk: conv(&a.wk, start)?,
        wv: conv(&a.wv, start)?,
        wo: conv(&a.wo, start + 3)?,
    })
}

/// Convert a whole model; every layer shares one table built from `decay`.
pub fn convert_model(q: &QnnModel, cfg: &ConversionConfig, decay: &DecayModel) -> Result<OttersModel> {
    cfg.validate()?;
    q.validate()?;
    if q.bits != cfg.bits {
        return Err(Error::Config(format!(
            "model uses {} bits, conversion requested {}",
            q.bits, cfg.bits
        )));
    }
    let window = window_for_bits(cfg.bits);
    let table = build_spike_time_table(decay, window)?;
    let mut next = 0;
    let mut layers = Vec::with_capacity(q.layers.len());
    for (i, b) in q.layers.iter().enumerate() {
        let block = match b {
            QnnBlock::Linear(l) => {
                let mut o = convert_layer(l, &table).map_err(|e| relayer(e, i))?;
                o.window = next;
                next += 1;
                OttersBlock::Linear(o)
            }
            QnnBlock::Attention(a) => {
                OttersBlock::Attention(convert_attention(a, &table, &mut next).map_err(|e| relayer(e, i))?)
            }
        };
        layers.push(block);
    }
    let m = OttersModel {
        bits: cfg.bits,
        window,
        table,
        decay: *decay,
        input_alpha: q.input_quant.alpha,
        sampling_mode: cfg.sampling_mode,
        boundary_eps: cfg.boundary_eps,
        layers,
    };
    m.validate()?;
    Ok(m)
}

fn relayer(e: Error, layer: usize) -> Error {
    match e {
        Error::Chaining { reason, .. } => Error::Chaining { layer, reason },
        other => other,
    }
}

/// One neuron whose SNN code disagrees with the QNN code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub trial: usize,
    pub layer: usize,
    pub token: usize,
    pub neuron: usize,
    pub qnn_code: u32,
    pub snn_code: u32,
    pub pre_activation: f64,
    pub boundary: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub neurons_checked: usize,
    pub mismatches: Vec<Mismatch>,
    /// Neurons whose `a / alpha` lies within `boundary_eps` of an integer.
    pub boundary_flagged: usize,
    /// Largest `|V - a|` over linear-layer neurons.
    pub max_membrane_error: f64,
}

impl EquivalenceReport {
    pub fn mismatch_count(&self) -> usize {
        self.mismatches.len()
    }

    /// Mismatches not explained by a floor-boundary flag.
    pub fn unexplained(&self) -> usize {
        self.mismatches.iter().filter(|m| !m.boundary).count()
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.neurons_checked == 0 {
            0.0
        } else {
            self.boundary_flagged as f64 / self.neurons_checked as f64
        }
    }

    fn merge(&mut self, other: EquivalenceReport) {
        self.trials += other.trials;
        self.neurons_checked += other.neurons_checked;
        self.mismatches.extend(other.mismatches);
        self.boundary_flagged += other.boundary_flagged;
        self.max_membrane_error = self.max_membrane_error.max(other.max_membrane_error);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
    pub mode: SamplingMode,
    pub boundary_eps: f64,
    /// Tokens per random input sequence for models with attention.
    pub sequence_len: usize,
}

impl VerifyConfig {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            seed,
            mode: SamplingMode::Ideal,
            boundary_eps: DEFAULT_BOUNDARY_EPS,
            sequence_len: 4,
        }
    }
}

fn near_boundary(a: f64, alpha: f64, eps: f64) -> bool {
    let r = a / alpha;
    (r - r.round()).abs() <= eps
}

/// Run random input codes through both models, block by block.
///
/// Each spiking block is fed the QNN's input codes for that block, so a
/// disagreement is attributed to the block that produced it.
pub fn verify_equivalence(q: &QnnModel, o: &OttersModel, cfg: &VerifyConfig) -> Result<EquivalenceReport> {
    use rand::Rng as _;
    use rayon::prelude::*;

    q.validate()?;
    o.validate()?;
    if q.layers.len() != o.layers.len() || q.bits != o.bits {
        return Err(Error::Config("QNN and spiking model differ in structure".into()));
    }
    let mode = EngineMode {
        sampling: cfg.mode,
        noise: None,
    };
    let sampler = Sampler::new(o, &mode, None)?;
    let top = q.input_quant.levels();
    let seq = if q.has_attention() { cfg.sequence_len.max(1) } else { 1 };
    let per_trial: Vec<Result<EquivalenceReport>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = substream(derive_seed(cfg.seed, "verify"), &format!("trial/{trial}"));
            let x: Vec<Vec<u32>> = (0..seq)
                .map(|_| (0..q.input_dim()).map(|_| rng.random_range(0..=top)).collect())
                .collect();
            let qo = q.forward(&x)?;
            let mut rep = EquivalenceReport {
                trials: 1,
                ..EquivalenceReport::default()
            };
            let mut input = x;
            for (l, (qb, ob)) in q.layers.iter().zip(&o.layers).enumerate() {
                let (codes, membranes) = match ob {
                    OttersBlock::Linear(ol) => {
                        let r = run_linear_block(ol, &input, o.window, &sampler, None)?;
                        (r.codes, Some(r.membranes))
                    }
                    OttersBlock::Attention(oa) => {
                        let r = run_attention_block(oa, &input, o.window, &sampler, None)?;
                        (r.out_codes, None)
                    }
                };
                let out_q = qb.out_quant();
                let expected = &qo[l];
                for (s, (row_q, row_s)) in expected.codes.iter().zip(&codes).enumerate() {
                    for (j, (&cq, &cs)) in row_q.iter().zip(row_s).enumerate() {
                        let a = expected.pre[s][j];
                        let boundary = near_boundary(a, out_q.alpha, cfg.boundary_eps);
                        rep.neurons_checked += 1;
                        rep.boundary_flagged += boundary as usize;
                        if let Some(m) = &membranes {
                            rep.max_membrane_error = rep.max_membrane_error.max((m[s][j] - a).abs());
                        }
                        if cq != cs {
                            rep.mismatches.push(Mismatch {
                                trial,
                                layer: l,
                                token: s,
                                neuron: j,
                                qnn_code: cq,
                                snn_code: cs,
                                pre_activation: a,
                                boundary,
                            });
                        }
                    }
                }
                input = expected.codes.clone();
            }
            Ok(rep)
        })
        .collect();
    let mut report = EquivalenceReport::default();
    for r in per_trial {
        report.merge(r?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(alpha: f64) -> ActQuantizer {
        ActQuantizer::new(alpha, 4).unwrap()
    }

    #[test]
    fn gamma_substitution() {
        let table = build_spike_time_table(&DecayModel::DEVICE, 15).unwrap();
        let l = QnnLinear::new(Matrix::from_rows(vec![vec![0.5, 0.0]]).unwrap(), vec![0.3], q(0.1), q(0.2)).unwrap();
        let o = convert_layer(&l, &table).unwrap();
        assert!((o.gamma.get(0, 0) - 0.75).abs() < 1e-15);
        assert_eq!(o.gamma.get(0, 1), 0.0);
        assert_eq!(o.bias, vec![0.3]);
        let s = o.schedule(15);
        assert!((s.theta(0) - 3.0).abs() < 1e-15);
        assert!((s.theta(14) - 0.2).abs() < 1e-15);
        assert_eq!(s.theta(15), f64::INFINITY);
    }

    #[test]
    fn threshold_strictly_decreasing() {
        let s = ThresholdSchedule { alpha_out: 0.37, window: 15 };
        assert!((0..14).all(|k| s.theta(k) > s.theta(k + 1)));
    }

    #[test]
    fn window_from_bits() {
        assert_eq!(window_for_bits(4), 15);
        assert_eq!(window_for_bits(1), 1);
    }

    #[test]
    fn table_mismatch_is_chaining_error() {
        let table = build_spike_time_table(&DecayModel::DEVICE, 7).unwrap();
        let l = QnnLinear::new(Matrix::zeros(1, 1), vec![0.0], q(0.1), q(0.1)).unwrap();
        assert!(matches!(convert_layer(&l, &table), Err(Error::Chaining { .. })));
    }

    #[test]
    fn unreachable_decay_propagates() {
        let weak = DecayModel::new(0.5, 1.0, 1.0, 0.0).unwrap();
        let l = QnnLinear::new(Matrix::zeros(1, 1), vec![0.0], q(0.1), q(0.1)).unwrap();
        let m = QnnModel::new(q(0.1), vec![QnnBlock::Linear(l)]).unwrap();
        assert!(matches!(
            convert_model(&m, &ConversionConfig::new(4), &weak),
            Err(Error::Infeasible { k: 0, .. })
        ));
    }

    #[test]
    fn zero_trials_empty_report() {
        let l = QnnLinear::new(Matrix::zeros(2, 2), vec![0.0; 2], q(0.1), q(0.1)).unwrap();
        let m = QnnModel::new(q(0.1), vec![QnnBlock::Linear(l)]).unwrap();
        let o = convert_model(&m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
        let r = verify_equivalence(&m, &o, &VerifyConfig::new(0, 1)).unwrap();
        assert_eq!(r, EquivalenceReport::default());
    }

    #[test]
    fn windows_are_consecutive() {
        let a = QnnLinear::new(Matrix::zeros(3, 2), vec![0.0; 3], q(0.1), q(0.2)).unwrap();
        let b = QnnLinear::new(Matrix::zeros(2, 3), vec![0.0; 2], q(0.2), q(0.3)).unwrap();
        let m = QnnModel::new(q(0.1), vec![QnnBlock::Linear(a), QnnBlock::Linear(b)]).unwrap();
        let o = convert_model(&m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
        let w: Vec<usize> = o
            .layers
            .iter()
            .map(|b| match b {
                OttersBlock::Linear(l) => l.window,
                OttersBlock::Attention(_) => unreachable!(),
            })
            .collect();
        assert_eq!(w, vec![0, 1]);
    }
}

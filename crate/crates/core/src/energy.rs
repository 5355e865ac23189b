//! Analytical energy model for FC layers and attention-score kernels across
//! Otters, full-precision, quantized, rate-coded SNN and traditional TTFS
//! implementations.
//!
//! Constants are in pJ; reports are in mJ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PJ_TO_MJ: f64 = 1e-9;

/// Components of the analog read cost: TFT drive, sampling, ADC, 4-bit LUT.
pub const ANALOG_READ_PARTS: [(&str, f64); 4] = [
    ("tft", 0.00875),
    ("sampling", 1.33e-6),
    ("adc", 0.0053),
    ("lut4", 0.010505),
];

/// Per-operation costs in pJ. Missing fields in a cost file take these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyCostTable {
    pub e_mac_fp32: f64,
    pub e_clamp: f64,
    pub e_mac_4_4_16: f64,
    pub e_mac_1_4_16: f64,
    pub e_acc_4_16_16: f64,
    pub e_acc_2_16_16: f64,
    pub e_acc_1_16_16: f64,
    pub e_acc_4_4_4: f64,
    pub e_cmp: f64,
    pub e_sub: f64,
    pub e_analog_read: f64,
    pub e_leakage_per_cycle: f64,
    pub e_weight_access_per_bit: f64,
    pub e_move_per_bit: f64,
    /// Utilization factor of the dense baselines.
    pub reuse_factor: f64,
    /// Width of a stored threshold value.
    pub threshold_bits: f64,
    /// Width of a binary K/V entry.
    pub binarykv_bits: f64,
    /// Width of weights, activations and K/V in the FP32 baseline.
    pub fp32_bits: f64,
    /// Weight width of the quantized baseline.
    pub qbert_weight_bits: f64,
    /// Weight width of the rate-coded SNN baseline.
    pub snn_weight_bits: f64,
    /// K/V width read by the rate-coded SNN score kernel.
    pub snn_kv_bits: f64,
    /// Weight width read per spike by traditional TTFS.
    pub ttfs_weight_bits: f64,
}

impl Default for EnergyCostTable {
    fn default() -> Self {
        Self {
            e_mac_fp32: 4.6,
            e_clamp: 0.9,
            e_mac_4_4_16: 0.0848,
            e_mac_1_4_16: 0.0663,
            e_acc_4_16_16: 0.0502,
            e_acc_2_16_16: 0.0477,
            e_acc_1_16_16: 0.0429,
            e_acc_4_4_4: 0.0163,
            e_cmp: 0.0502,
            e_sub: 0.0502,
            e_analog_read: 0.0246,
            e_leakage_per_cycle: 0.002,
            e_weight_access_per_bit: 0.0985,
            e_move_per_bit: 0.18,
            reuse_factor: 1.0,
            threshold_bits: 16.0,
            binarykv_bits: 1.0,
            fp32_bits: 32.0,
            qbert_weight_bits: 1.0,
            snn_weight_bits: 1.0,
            snn_kv_bits: 4.0,
            ttfs_weight_bits: 1.0,
        }
    }
}

impl EnergyCostTable {
    pub fn validate(&self) -> Result<()> {
        let v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, x) in v.as_object().into_iter().flatten() {
            let x = x.as_f64().unwrap_or(f64::NAN);
            if !(x >= 0.0) || !x.is_finite() {
                return Err(Error::Config(format!("cost `{k}` must be finite and >= 0, got {x}")));
            }
        }
        Ok(())
    }

    fn access(&self, bits: f64) -> f64 {
        bits * self.e_weight_access_per_bit
    }

    pub fn e_threshold_read(&self) -> f64 {
        self.access(self.threshold_bits)
    }

    pub fn e_binarykv_read(&self) -> f64 {
        self.access(self.binarykv_bits)
    }

    pub fn e_binarykv_write(&self) -> f64 {
        self.access(self.binarykv_bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Otters,
    Fp32,
    Qbert,
    Snn,
    Ttfs,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [Self::Otters, Self::Fp32, Self::Qbert, Self::Snn, Self::Ttfs];

    /// At most one spike per neuron: `s_r * T <= 1`.
    pub fn is_ttfs_family(self) -> bool {
        matches!(self, Self::Otters | Self::Ttfs)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Otters => "otters",
            Self::Fp32 => "fp32",
            Self::Qbert => "qbert",
            Self::Snn => "snn",
            Self::Ttfs => "ttfs",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}` (otters|fp32|qbert|snn|ttfs)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Fc,
    Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    #[serde(rename = "B")]
    pub batch: f64,
    #[serde(rename = "S")]
    pub seq: f64,
    #[serde(rename = "C_i")]
    pub c_in: f64,
    #[serde(rename = "C_o")]
    pub c_out: f64,
    pub h: f64,
    pub d_k: f64,
    #[serde(rename = "T")]
    pub timesteps: f64,
    pub n: u32,
    pub s_r: f64,
    /// FC layers counted per attention block.
    #[serde(default = "default_fc_layers")]
    pub fc_layers: u32,
}

fn default_fc_layers() -> u32 {
    6
}

impl Workload {
    /// BERT-base block: `B=64, S=128, C=768, h=12, d_k=64, T=15, n=4`.
    pub fn bert_base(s_r: f64) -> Self {
        Self {
            batch: 64.0,
            seq: 128.0,
            c_in: 768.0,
            c_out: 768.0,
            h: 12.0,
            d_k: 64.0,
            timesteps: 15.0,
            n: 4,
            s_r,
            fc_layers: default_fc_layers(),
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        for (name, v) in [
            ("B", self.batch),
            ("S", self.seq),
            ("C_i", self.c_in),
            ("C_o", self.c_out),
            ("h", self.h),
            ("d_k", self.d_k),
            ("T", self.timesteps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("workload {name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.s_r) {
            return Err(Error::Config(format!("spike rate must lie in [0, 1], got {}", self.s_r)));
        }
        if kind.is_ttfs_family() && self.s_r * self.timesteps > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "{kind}: s_r * T = {} exceeds one spike per neuron",
                self.s_r * self.timesteps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Compute,
    Data,
    Analog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub category: Category,
    pub mj: f64,
}

/// Itemized energy of one layer application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub model: ModelKind,
    pub layer: LayerKind,
    pub terms: Vec<Term>,
    pub total_mj: f64,
}

impl EnergyReport {
    fn new(model: ModelKind, layer: LayerKind, outer: f64, items: Vec<(&str, Category, f64)>) -> Self {
        let terms: Vec<Term> = items
            .into_iter()
            .map(|(name, category, pj)| Term {
                name: name.to_string(),
                category,
                mj: outer * pj * PJ_TO_MJ,
            })
            .collect();
        let total_mj = terms.iter().map(|t| t.mj).sum();
        Self {
            model,
            layer,
            terms,
            total_mj,
        }
    }

    pub fn category_total(&self, c: Category) -> f64 {
        // Fold from +0 so an empty category is not reported as -0.
        self.terms.iter().filter(|t| t.category == c).fold(0.0, |a, t| a + t.mj)
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.mj)
    }
}

use Category::{Analog, Compute, Data};

fn fc_outer(w: &Workload) -> f64 {
    w.batch * w.seq * w.c_out
}

fn score_outer(w: &Workload) -> f64 {
    w.batch * w.h * w.seq * w.seq
}

pub fn energy_opto_fc(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    w.validate(ModelKind::Otters)?;
    let spikes = w.c_in * w.timesteps * w.s_r;
    Ok(EnergyReport::new(
        ModelKind::Otters,
        LayerKind::Fc,
        fc_outer(w),
        vec![
            ("spike_accumulate", Compute, spikes * c.e_acc_4_16_16),
            ("analog_read", Analog, spikes * c.e_analog_read),
            ("spike_move", Data, spikes * c.e_move_per_bit),
            ("leakage", Data, w.c_in * w.timesteps * c.e_leakage_per_cycle),
            ("threshold_compare", Compute, w.timesteps * c.e_cmp),
            ("threshold_read", Data, w.timesteps * c.e_threshold_read()),
            ("kv_write", Data, c.e_binarykv_write()),
        ],
    ))
}

pub fn energy_opto_score(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    w.validate(ModelKind::Otters)?;
    let spikes = w.d_k * w.timesteps * w.s_r;
    Ok(EnergyReport::new(
        ModelKind::Otters,
        LayerKind::Score,
        score_outer(w),
        vec![
            ("spike_accumulate", Compute, spikes * c.e_acc_4_16_16),
            ("analog_read", Analog, spikes * c.e_analog_read),
            ("spike_move", Data, spikes * c.e_move_per_bit),
            ("kv_read", Data, spikes * c.e_binarykv_read()),
            ("leakage", Data, w.d_k * w.timesteps * c.e_leakage_per_cycle),
            ("threshold_compare", Compute, w.timesteps * c.e_cmp),
            ("threshold_read", Data, w.timesteps * c.e_threshold_read()),
        ],
    ))
}

fn dense_fc(kind: ModelKind, w: &Workload, c: &EnergyCostTable, mac: f64, weight_bits: f64, move_bits: f64, kv_write: f64) -> Result<EnergyReport> {
    w.validate(kind)?;
    let ops = c.reuse_factor * w.c_in;
    Ok(EnergyReport::new(
        kind,
        LayerKind::Fc,
        fc_outer(w),
        vec![
            ("mac", Compute, ops * mac),
            ("weight_read", Data, ops * c.access(weight_bits)),
            ("activation_move", Data, ops * move_bits * c.e_move_per_bit),
            ("leakage", Data, w.c_in * c.e_leakage_per_cycle),
            ("clamp", Compute, 2.0 * c.e_clamp),
            ("kv_write", Data, kv_write),
        ],
    ))
}

fn dense_score(kind: ModelKind, w: &Workload, c: &EnergyCostTable, mac: f64, kv_read: f64, move_bits: f64) -> Result<EnergyReport> {
    w.validate(kind)?;
    let ops = c.reuse_factor * w.d_k;
    Ok(EnergyReport::new(
        kind,
        LayerKind::Score,
        score_outer(w),
        vec![
            ("kv_read", Data, ops * kv_read),
            ("mac", Compute, ops * mac),
            ("activation_move", Data, ops * move_bits * c.e_move_per_bit),
            ("leakage", Data, w.d_k * c.e_leakage_per_cycle),
            ("clamp", Compute, 2.0 * c.e_clamp),
        ],
    ))
}

pub fn energy_fp32_fc(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    dense_fc(ModelKind::Fp32, w, c, c.e_mac_fp32, c.fp32_bits, c.fp32_bits, c.access(c.fp32_bits))
}

pub fn energy_fp32_score(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    dense_score(ModelKind::Fp32, w, c, c.e_mac_fp32, c.access(c.fp32_bits), c.fp32_bits)
}

pub fn energy_qbert_fc(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    let bits = (w.timesteps + 1.0).log2();
    dense_fc(ModelKind::Qbert, w, c, c.e_mac_1_4_16, c.qbert_weight_bits, bits, c.e_binarykv_write())
}

pub fn energy_qbert_score(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    let bits = (w.timesteps + 1.0).log2();
    dense_score(ModelKind::Qbert, w, c, c.e_mac_1_4_16, c.e_binarykv_read(), bits)
}

pub fn energy_snn_fc(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    w.validate(ModelKind::Snn)?;
    let spikes = w.c_in * w.s_r * w.timesteps;
    Ok(EnergyReport::new(
        ModelKind::Snn,
        LayerKind::Fc,
        fc_outer(w),
        vec![
            ("spike_accumulate", Compute, spikes * c.e_acc_1_16_16),
            ("weight_read", Data, spikes * c.access(c.snn_weight_bits)),
            ("spike_move", Data, spikes * c.e_move_per_bit),
            ("leakage", Data, w.c_in * w.timesteps * c.e_leakage_per_cycle),
            ("threshold_compare", Compute, w.timesteps * c.e_cmp),
            ("reset_subtract", Compute, w.timesteps * w.s_r * c.e_sub),
            ("kv_write", Data, c.e_binarykv_write()),
        ],
    ))
}

pub fn energy_snn_score(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    w.validate(ModelKind::Snn)?;
    let spikes = w.d_k * w.s_r * w.timesteps;
    Ok(EnergyReport::new(
        ModelKind::Snn,
        LayerKind::Score,
        score_outer(w),
        vec![
            ("kv_read", Data, spikes * c.access(c.snn_kv_bits)),
            ("spike_accumulate", Compute, spikes * c.e_acc_1_16_16),
            ("spike_move", Data, spikes * c.e_move_per_bit),
            ("leakage", Data, w.d_k * w.timesteps * c.e_leakage_per_cycle),
            ("threshold_compare", Compute, w.timesteps * c.e_cmp),
            ("reset_subtract", Compute, w.timesteps * w.s_r * c.e_sub),
        ],
    ))
}

/// Traditional TTFS: the analog read becomes a digital `T - t` encoding
/// plus a weight multiply, and every spike reads its weight digitally.
/// The multiply-accumulate replaces the separate accumulate.
pub fn energy_ttfs_fc(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    w.validate(ModelKind::Ttfs)?;
    let spikes = w.c_in * w.timesteps * w.s_r;
    Ok(EnergyReport::new(
        ModelKind::Ttfs,
        LayerKind::Fc,
        fc_outer(w),
        vec![
            ("encoding", Compute, spikes * c.e_acc_4_4_4),
            ("mac", Compute, spikes * c.e_mac_1_4_16),
            ("weight_read", Data, spikes * c.access(c.ttfs_weight_bits)),
            ("spike_move", Data, spikes * c.e_move_per_bit),
            ("leakage", Data, w.c_in * w.timesteps * c.e_leakage_per_cycle),
            ("threshold_compare", Compute, w.timesteps * c.e_cmp),
            ("threshold_read", Data, w.timesteps * c.e_threshold_read()),
            ("kv_write", Data, c.e_binarykv_write()),
        ],
    ))
}

/// Score kernel under traditional TTFS; the K/V read is the operand access.
pub fn energy_ttfs_score(w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    w.validate(ModelKind::Ttfs)?;
    let spikes = w.d_k * w.timesteps * w.s_r;
    Ok(EnergyReport::new(
        ModelKind::Ttfs,
        LayerKind::Score,
        score_outer(w),
        vec![
            ("encoding", Compute, spikes * c.e_acc_4_4_4),
            ("mac", Compute, spikes * c.e_mac_1_4_16),
            ("kv_read", Data, spikes * c.e_binarykv_read()),
            ("spike_move", Data, spikes * c.e_move_per_bit),
            ("leakage", Data, w.d_k * w.timesteps * c.e_leakage_per_cycle),
            ("threshold_compare", Compute, w.timesteps * c.e_cmp),
            ("threshold_read", Data, w.timesteps * c.e_threshold_read()),
        ],
    ))
}

pub fn layer_energy(kind: ModelKind, layer: LayerKind, w: &Workload, c: &EnergyCostTable) -> Result<EnergyReport> {
    match (kind, layer) {
        (ModelKind::Otters, LayerKind::Fc) => energy_opto_fc(w, c),
        (ModelKind::Otters, LayerKind::Score) => energy_opto_score(w, c),
        (ModelKind::Fp32, LayerKind::Fc) => energy_fp32_fc(w, c),
        (ModelKind::Fp32, LayerKind::Score) => energy_fp32_score(w, c),
        (ModelKind::Qbert, LayerKind::Fc) => energy_qbert_fc(w, c),
        (ModelKind::Qbert, LayerKind::Score) => energy_qbert_score(w, c),
        (ModelKind::Snn, LayerKind::Fc) => energy_snn_fc(w, c),
        (ModelKind::Snn, LayerKind::Score) => energy_snn_score(w, c),
        (ModelKind::Ttfs, LayerKind::Fc) => energy_ttfs_fc(w, c),
        (ModelKind::Ttfs, LayerKind::Score) => energy_ttfs_score(w, c),
    }
}

/// Energy of one attention block: `fc_layers` FC applications (Q, K, V,
/// output and feed-forward projections) plus the `Q K^T` and `P V` kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub model: ModelKind,
    pub fc: EnergyReport,
    pub score: EnergyReport,
    pub fc_layers: u32,
    pub score_kernels: u32,
    pub fc_total_mj: f64,
    pub score_total_mj: f64,
    pub total_mj: f64,
    pub compute_mj: f64,
    pub data_mj: f64,
    pub analog_mj: f64,
    /// FP32 block energy on the same workload divided by this block's.
    pub ratio_vs_fp32: f64,
    pub reuse_factor: f64,
}

const SCORE_KERNELS: u32 = 2;

fn block_parts(kind: ModelKind, w: &Workload, c: &EnergyCostTable) -> Result<(EnergyReport, EnergyReport, f64)> {
    let fc = layer_energy(kind, LayerKind::Fc, w, c)?;
    let score = layer_energy(kind, LayerKind::Score, w, c)?;
    let total = w.fc_layers as f64 * fc.total_mj + SCORE_KERNELS as f64 * score.total_mj;
    Ok((fc, score, total))
}

pub fn attention_block_total(kind: ModelKind, w: &Workload, c: &EnergyCostTable) -> Result<BlockReport> {
    c.validate()?;
    let (fc, score, total_mj) = block_parts(kind, w, c)?;
    let (_, _, fp32) = block_parts(ModelKind::Fp32, w, c)?;
    let nf = w.fc_layers as f64;
    let ns = SCORE_KERNELS as f64;
    let cat = |k: Category| nf * fc.category_total(k) + ns * score.category_total(k);
    Ok(BlockReport {
        model: kind,
        fc_total_mj: nf * fc.total_mj,
        score_total_mj: ns * score.total_mj,
        compute_mj: cat(Compute),
        data_mj: cat(Data),
        analog_mj: cat(Analog),
        fc,
        score,
        fc_layers: w.fc_layers,
        score_kernels: SCORE_KERNELS,
        total_mj,
        ratio_vs_fp32: fp32 / total_mj,
        reuse_factor: c.reuse_factor,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    SpikeRate,
    ReuseFactor,
}

impl std::str::FromStr for FreeParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s_r" | "spike_rate" => Ok(Self::SpikeRate),
            "reuse_factor" | "gamma" => Ok(Self::ReuseFactor),
            other => Err(Error::Config(format!("unknown free parameter `{other}` (s_r|reuse_factor)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub value: f64,
    pub energy_mj: f64,
    pub iterations: usize,
}

/// Solve `energy(param) = target_mj` by bisection over `[lo, hi]`.
///
/// Energy is non-decreasing in both parameters; a target outside
/// `[energy(lo), energy(hi)]` is infeasible.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    target_mj: f64,
    param: FreeParam,
    (lo, hi): (f64, f64),
    kind: ModelKind,
    layer: LayerKind,
    w: &Workload,
    c: &EnergyCostTable,
) -> Result<Calibration> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("invalid bounds [{lo}, {hi}]")));
    }
    let eval = |x: f64| -> Result<f64> {
        let mut w = w.clone();
        let mut c = c.clone();
        match param {
            FreeParam::SpikeRate => w.s_r = x,
            FreeParam::ReuseFactor => c.reuse_factor = x,
        }
        Ok(layer_energy(kind, layer, &w, &c)?.total_mj)
    };
    let (flo, fhi) = (eval(lo)?, eval(hi)?);
    if target_mj < flo || target_mj > fhi {
        return Err(Error::CalibrationInfeasible {
            target: target_mj,
            lo: flo,
            hi: fhi,
        });
    }
    let (mut a, mut b) = (lo, hi);
    let mut iterations = 0;
    while iterations < 200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if eval(m)? < target_mj {
            a = m;
        } else {
            b = m;
        }
        iterations += 1;
    }
    let value = if (eval(a)? - target_mj).abs() <= (eval(b)? - target_mj).abs() { a } else { b };
    Ok(Calibration {
        value,
        energy_mj: eval(value)?,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_costs() -> EnergyCostTable {
        let v = serde_json::to_value(EnergyCostTable::default()).unwrap();
        let ones: serde_json::Map<String, serde_json::Value> =
            v.as_object().unwrap().keys().map(|k| (k.clone(), 1.0.into())).collect();
        serde_json::from_value(ones.into()).unwrap()
    }

    fn tiny() -> Workload {
        Workload {
            batch: 1.0,
            seq: 1.0,
            c_in: 2.0,
            c_out: 1.0,
            h: 1.0,
            d_k: 2.0,
            timesteps: 2.0,
            n: 1,
            s_r: 0.5,
            fc_layers: 6,
        }
    }

    #[test]
    fn tiny_fc_by_hand() {
        // 2*2*(0.5*(1+1+1) + 1) + 2*(1 + 16) + 1 = 10 + 34 + 1 = 45 pJ
        let mut c = unit_costs();
        c.threshold_bits = 16.0;
        let r = energy_opto_fc(&tiny(), &c).unwrap();
        assert!((r.total_mj - 45e-9).abs() < 1e-20);
    }

    #[test]
    fn zero_spikes_leave_static_terms() {
        let c = EnergyCostTable::default();
        let mut w = Workload::bert_base(0.0);
        w.s_r = 0.0;
        let r = energy_opto_fc(&w, &c).unwrap();
        for t in ["spike_accumulate", "analog_read", "spike_move"] {
            assert_eq!(r.term(t), Some(0.0));
        }
        let outer = 64.0 * 128.0 * 768.0 * 1e-9;
        let want = outer * (768.0 * 15.0 * 0.002 + 15.0 * (0.0502 + 16.0 * 0.0985) + 0.0985);
        assert!((r.total_mj - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn analog_parts_sum_to_read_cost() {
        let s: f64 = ANALOG_READ_PARTS.iter().map(|p| p.1).sum();
        assert!((s - EnergyCostTable::default().e_analog_read).abs() < 1e-4);
    }

    #[test]
    fn qbert_moves_four_bits_at_t15() {
        let c = EnergyCostTable {
            e_mac_1_4_16: 0.0,
            e_weight_access_per_bit: 0.0,
            e_leakage_per_cycle: 0.0,
            e_clamp: 0.0,
            ..Default::default()
        };
        let w = Workload::bert_base(0.0);
        let r = energy_qbert_fc(&w, &c).unwrap();
        let want = 64.0 * 128.0 * 768.0 * 768.0 * 4.0 * 0.18 * 1e-9;
        assert!((r.total_mj - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn fp32_moves_exactly_32_bits() {
        let c = EnergyCostTable::default();
        let r = energy_fp32_fc(&tiny(), &c).unwrap();
        let per_bit = 2.0 * 0.18 * 1e-9;
        assert!((r.term("activation_move").unwrap() - 32.0 * per_bit).abs() < 1e-22);
    }

    #[test]
    fn zero_reuse_leaves_leakage_and_clamp() {
        let c = EnergyCostTable {
            reuse_factor: 0.0,
            ..Default::default()
        };
        let w = tiny();
        let r = energy_fp32_score(&w, &c).unwrap();
        let want = (2.0 * 0.002 + 2.0 * 0.9) * 1e-9;
        assert!((r.total_mj - want).abs() < 1e-22);
    }

    #[test]
    fn score_without_kv_read_mirrors_fc() {
        let c = EnergyCostTable {
            binarykv_bits: 0.0,
            ..Default::default()
        };
        let w = Workload::bert_base(0.05);
        let s = energy_opto_score(&w, &c).unwrap();
        let mut wf = w.clone();
        wf.c_in = w.d_k;
        let f = energy_opto_fc(&wf, &c).unwrap();
        let per_score = s.total_mj / (64.0 * 12.0 * 128.0 * 128.0);
        let per_out = f.total_mj / (64.0 * 128.0 * 768.0);
        assert!((per_score - per_out).abs() <= 1e-12 * per_out);
    }

    #[test]
    fn ttfs_family_rejects_multiple_spikes() {
        let c = EnergyCostTable::default();
        let w = Workload::bert_base(0.1);
        assert!(energy_opto_fc(&w, &c).is_err());
        assert!(energy_ttfs_fc(&w, &c).is_err());
        assert!(energy_snn_fc(&w, &c).is_ok());
    }

    #[test]
    fn cost_file_defaults_fill_missing_fields() {
        let c: EnergyCostTable = serde_json::from_str(r#"{"reuse_factor": 0.5}"#).unwrap();
        assert_eq!(c.reuse_factor, 0.5);
        assert_eq!(c.e_mac_fp32, 4.6);
        assert!(serde_json::from_str::<EnergyCostTable>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn calibrate_round_trip_and_floor() {
        let c = EnergyCostTable::default();
        let w = Workload::bert_base(0.0);
        let cal = calibrate(1.14, FreeParam::SpikeRate, (0.0, 1.0 / 15.0), ModelKind::Otters, LayerKind::Fc, &w, &c).unwrap();
        assert!((cal.energy_mj - 1.14).abs() <= 1e-6);
        assert!(cal.value * 15.0 <= 1.0);
        assert!(matches!(
            calibrate(0.01, FreeParam::SpikeRate, (0.0, 1.0 / 15.0), ModelKind::Otters, LayerKind::Fc, &w, &c),
            Err(Error::CalibrationInfeasible { .. })
        ));
    }
}

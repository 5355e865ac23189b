//! Event-driven time-to-first-spike inference.
//!
//! Layers run on a synchronous schedule: a layer integrates every spike its
//! predecessor emitted during the previous window (its threshold is
//! unbounded meanwhile), then fires in its own window at the first step `k`
//! where `V >= alpha_out * (T - k)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{run_attention_block, OpCounter};
use crate::converter::{OttersBlock, OttersLayer, OttersModel};
use crate::decay::{DecayModel, SpikeTimeTable};
use crate::error::{Error, Result};
use crate::qnn::{NoiseSource, NoiseSpec, NoiseTarget};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// PSP uses the logical level `(T - k) / T`.
    Ideal,
    /// PSP uses the device output `O(t_k)`.
    Physical,
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMode::Ideal => "ideal",
            SamplingMode::Physical => "physical",
        })
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Self::Ideal),
            "physical" => Ok(Self::Physical),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineMode {
    pub sampling: SamplingMode,
    pub noise: Option<NoiseSpec>,
}

impl EngineMode {
    pub fn ideal() -> Self {
        Self {
            sampling: SamplingMode::Ideal,
            noise: None,
        }
    }

    pub fn physical() -> Self {
        Self {
            sampling: SamplingMode::Physical,
            noise: None,
        }
    }

    pub fn with_noise(mut self, spec: NoiseSpec) -> Self {
        self.noise = Some(spec);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(n) = &self.noise {
            if self.sampling != SamplingMode::Physical {
                return Err(Error::Config("noise requires physical sampling".into()));
            }
            if n.target == NoiseTarget::Activation {
                return Err(Error::Config(
                    "activation noise is a training-time option; the engine accepts decay_output, tau or beta".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A spike emitted by `neuron` of `layer` at logical step `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub layer: usize,
    pub neuron: usize,
    pub k: usize,
}

/// Code `q` to spike step `T - q`; `q = 0` is silence.
pub fn encode_ttfs(q: u32, window: usize) -> Result<Option<usize>> {
    if q as usize > window {
        return Err(Error::Domain(format!("code {q} exceeds T = {window}")));
    }
    Ok((q > 0).then(|| window - q as usize))
}

/// Spike step `k` to code `T - k`; silence is 0.
#[inline]
pub fn decode(k: Option<usize>, window: usize) -> u32 {
    k.map_or(0, |k| (window - k) as u32)
}

/// Per-step PSP sampler for one inference run.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampler {
    window: usize,
    mode: SamplingMode,
    /// `O(t_k)` of the (possibly perturbed) device at the table instants.
    values: Vec<f64>,
    /// Device model the samples were taken from.
    pub device: DecayModel,
}

impl Sampler {
    /// Prepare per-step samples. Tau/beta noise perturbs the device once here
    /// with one draw from `noise`.
    pub fn new(model: &OttersModel, mode: &EngineMode, noise: Option<&mut NoiseSource>) -> Result<Self> {
        mode.validate()?;
        let target = mode.noise.map(|n| n.target);
        let mut device = model.decay;
        if let (Some(t @ (NoiseTarget::Tau | NoiseTarget::Beta)), Some(src)) = (target, noise) {
            let p = match t {
                NoiseTarget::Tau => &mut device.tau,
                _ => &mut device.beta,
            };
            *p = src.perturb(*p);
            if !(*p > 0.0) {
                return Err(Error::Infeasible {
                    k: 0,
                    value: *p,
                    reason: format!("perturbed {t} is not positive"),
                });
            }
        }
        Ok(Self::from_parts(&model.table, &device, mode.sampling))
    }

    pub fn from_parts(table: &SpikeTimeTable, device: &DecayModel, mode: SamplingMode) -> Self {
        Self {
            window: table.window,
            mode,
            values: table.times.iter().map(|&t| device.eval_unchecked(t)).collect(),
            device: *device,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    /// Sampled decay level at step `k`.
    #[inline]
    pub fn level(&self, k: usize) -> f64 {
        match self.mode {
            SamplingMode::Ideal => (self.window - k) as f64 / self.window as f64,
            SamplingMode::Physical => self.values[k],
        }
    }

    /// Noise-free contribution of a synapse with scale `gamma` for a spike at `k`.
    #[inline]
    pub fn psp(&self, gamma: f64, k: usize) -> f64 {
        match self.mode {
            SamplingMode::Ideal => gamma * (self.window - k) as f64 / self.window as f64,
            SamplingMode::Physical => gamma * self.values[k],
        }
    }

    /// `alpha * T * level(k)` for every step: the PSP of a unit-weight synapse
    /// fed by a quantizer of scale `alpha`.
    pub fn lut(&self, alpha: f64) -> Vec<f64> {
        (0..self.window)
            .map(|k| match self.mode {
                SamplingMode::Ideal => alpha * (self.window - k) as f64,
                SamplingMode::Physical => alpha * self.window as f64 * self.values[k],
            })
            .collect()
    }
}

/// Single PSP sample without noise.
pub fn sample_psp(gamma: f64, k: usize, table: &SpikeTimeTable, device: &DecayModel, mode: SamplingMode) -> Result<f64> {
    if k >= table.window {
        return Err(Error::Domain(format!("step {k} outside window of {}", table.window)));
    }
    Ok(match mode {
        SamplingMode::Ideal => gamma * (table.window - k) as f64 / table.window as f64,
        SamplingMode::Physical => gamma * device.eval_unchecked(table.times[k]),
    })
}

/// Result of one layer on one token.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRun {
    pub codes: Vec<u32>,
    pub membranes: Vec<f64>,
    pub fired: Vec<Option<usize>>,
    /// Arrivals at neurons that had already fired (always 0 under the
    /// synchronous schedule, kept for trace statistics).
    pub late_drops: usize,
}

/// Run one layer on the complete spike set of its predecessor.
///
/// `in_events` are `(presynaptic neuron, step)`. Per-event decay-output noise
/// is drawn in the order output neuron, step, input neuron.
pub fn run_layer(
    layer: &OttersLayer,
    in_events: &[(usize, usize)],
    sampler: &Sampler,
    noise: Option<&mut NoiseSource>,
) -> Result<LayerRun> {
    let window = sampler.window();
    let mut seen = vec![false; layer.inputs()];
    for &(i, k) in in_events {
        if i >= layer.inputs() {
            return Err(Error::Protocol(format!(
                "event from neuron {i} but layer has {} inputs",
                layer.inputs()
            )));
        }
        if k >= window {
            return Err(Error::Protocol(format!("event step {k} outside window of {window}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Protocol(format!("duplicate spike from presynaptic neuron {i}")));
        }
    }
    let mut events = in_events.to_vec();
    events.sort_unstable_by_key(|&(i, k)| (k, i));

    let schedule = layer.schedule(window);
    let integrate = |j: usize, noise: Option<&mut NoiseSource>| -> f64 {
        let row = layer.gamma.row(j);
        let mut v = layer.bias[j];
        match noise {
            None => {
                for &(i, k) in &events {
                    v += sampler.psp(row[i], k);
                }
            }
            Some(src) => {
                for &(i, k) in &events {
                    v += sampler.psp(row[i], k) * src.factor();
                }
            }
        }
        v
    };
    let membranes: Vec<f64> = match noise {
        None => (0..layer.outputs()).into_par_iter().map(|j| integrate(j, None)).collect(),
        Some(src) => (0..layer.outputs()).map(|j| integrate(j, Some(&mut *src))).collect(),
    };
    let fired: Vec<Option<usize>> = membranes
        .iter()
        .map(|&v| (0..window).find(|&k| v >= schedule.theta(k)))
        .collect();
    Ok(LayerRun {
        codes: fired.iter().map(|&k| decode(k, window)).collect(),
        membranes,
        fired,
        late_drops: 0,
    })
}

/// Encode one code vector as `(neuron, step)` events.
pub fn encode_codes(codes: &[u32], window: usize) -> Result<Vec<(usize, usize)>> {
    let mut ev = Vec::new();
    for (i, &q) in codes.iter().enumerate() {
        if let Some(k) = encode_ttfs(q, window)? {
            ev.push((i, k));
        }
    }
    Ok(ev)
}

/// A linear layer applied to each token of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockRun {
    pub codes: Vec<Vec<u32>>,
    pub membranes: Vec<Vec<f64>>,
    pub fired: Vec<Vec<Option<usize>>>,
    pub late_drops: usize,
}

pub fn run_linear_block(
    layer: &OttersLayer,
    input: &[Vec<u32>],
    window: usize,
    sampler: &Sampler,
    mut noise: Option<&mut NoiseSource>,
) -> Result<BlockRun> {
    let mut out = BlockRun {
        codes: Vec::with_capacity(input.len()),
        membranes: Vec::with_capacity(input.len()),
        fired: Vec::with_capacity(input.len()),
        late_drops: 0,
    };
    for row in input {
        if row.len() != layer.inputs() {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, got {}",
                layer.inputs(),
                row.len()
            )));
        }
        let ev = encode_codes(row, window)?;
        let r = run_layer(layer, &ev, sampler, noise.as_deref_mut())?;
        out.codes.push(r.codes);
        out.membranes.push(r.membranes);
        out.fired.push(r.fired);
        out.late_drops += r.late_drops;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub neurons: usize,
    pub spikes: usize,
    /// Spikes emitted divided by `neurons * T`.
    pub spike_rate: f64,
    pub late_drops: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelRun {
    /// Output codes per token of the last block.
    pub outputs: Vec<Vec<u32>>,
    /// Output codes per block.
    pub block_codes: Vec<Vec<Vec<u32>>>,
    /// Final membrane potentials of linear blocks (empty for attention).
    pub block_membranes: Vec<Vec<Vec<f64>>>,
    /// Every spike, including the encoded input as layer 0.
    pub trace: Vec<SpikeEvent>,
    /// Statistics per spiking layer (input excluded).
    pub stats: Vec<LayerStats>,
    /// Number of sample tables prepared for this run.
    pub tables_built: usize,
    pub ops: OpCounter,
}

impl ModelRun {
    /// Spike rate over all spiking layers.
    pub fn mean_spike_rate(&self, window: usize) -> f64 {
        let n: usize = self.stats.iter().map(|s| s.neurons).sum();
        let s: usize = self.stats.iter().map(|s| s.spikes).sum();
        if n == 0 {
            0.0
        } else {
            s as f64 / (n * window) as f64
        }
    }
}

fn push_events(trace: &mut Vec<SpikeEvent>, layer: usize, fired: &[Vec<Option<usize>>]) -> (usize, usize) {
    let width = fired.first().map_or(0, Vec::len);
    let mut spikes = 0;
    for (s, row) in fired.iter().enumerate() {
        for (j, k) in row.iter().enumerate() {
            if let Some(k) = *k {
                trace.push(SpikeEvent {
                    layer,
                    neuron: s * width + j,
                    k,
                });
                spikes += 1;
            }
        }
    }
    (spikes, fired.len() * width)
}

fn codes_to_fired(codes: &[Vec<u32>], window: usize) -> Vec<Vec<Option<usize>>> {
    codes
        .iter()
        .map(|r| r.iter().map(|&q| (q > 0).then(|| window - q as usize)).collect())
        .collect()
}

fn check_input(model: &OttersModel, input: &[Vec<u32>]) -> Result<()> {
    if input.is_empty() {
        return Err(Error::Shape("input sequence is empty".into()));
    }
    for row in input {
        if row.len() != model.input_dim() {
            return Err(Error::Shape(format!(
                "model expects {} inputs, got {}",
                model.input_dim(),
                row.len()
            )));
        }
        for &q in row {
            encode_ttfs(q, model.window)?;
        }
    }
    Ok(())
}

/// Run a model over one input sequence (one row per token; a single row for
/// MLPs). Neuron indices in the trace are `token * width + neuron`.
pub fn run_model(model: &OttersModel, input: &[Vec<u32>], mode: &EngineMode) -> Result<ModelRun> {
    mode.validate()?;
    check_input(model, input)?;
    let mut src = mode.noise.map(|n| n.source());
    let sampler = Sampler::new(model, mode, src.as_mut())?;
    let psp_noise = match mode.noise.map(|n| n.target) {
        Some(NoiseTarget::DecayOutput) => src,
        _ => None,
    };
    let mut run = run_model_with(model, input, &sampler, psp_noise)?;
    run.tables_built = 1;
    Ok(run)
}

/// Run a model with a prepared sampler, so several inputs can share one
/// (possibly perturbed) device. `psp_noise` perturbs every PSP sample.
/// The returned `tables_built` is 0.
pub fn run_model_with(
    model: &OttersModel,
    input: &[Vec<u32>],
    sampler: &Sampler,
    mut psp_noise: Option<NoiseSource>,
) -> Result<ModelRun> {
    let window = model.window;
    if sampler.window() != window {
        return Err(Error::Shape(format!("sampler window {} differs from model window {window}", sampler.window())));
    }
    check_input(model, input)?;
    let mut trace = Vec::new();
    push_events(&mut trace, 0, &codes_to_fired(input, window));
    let mut stats = Vec::new();
    let mut ops = OpCounter::default();
    let mut block_codes = Vec::with_capacity(model.layers.len());
    let mut block_membranes = Vec::with_capacity(model.layers.len());
    let mut cur = input.to_vec();
    let mut layer_idx = 0;
    let mut record = |trace: &mut Vec<SpikeEvent>, fired: &[Vec<Option<usize>>], late: usize, idx: &mut usize| {
        *idx += 1;
        let (spikes, neurons) = push_events(trace, *idx, fired);
        stats.push(LayerStats {
            layer: *idx,
            neurons,
            spikes,
            spike_rate: if neurons == 0 { 0.0 } else { spikes as f64 / (neurons * window) as f64 },
            late_drops: late,
        });
    };
    for block in &model.layers {
        match block {
            OttersBlock::Linear(l) => {
                let r = run_linear_block(l, &cur, window, sampler, psp_noise.as_mut())?;
                record(&mut trace, &r.fired, r.late_drops, &mut layer_idx);
                block_membranes.push(r.membranes);
                cur = r.codes;
            }
            OttersBlock::Attention(a) => {
                let r = run_attention_block(a, &cur, window, sampler, psp_noise.as_mut())?;
                for codes in [&r.q_codes, &r.k_codes, &r.v_codes] {
                    record(&mut trace, &codes_to_fired(codes, window), 0, &mut layer_idx);
                }
                let flat: Vec<Vec<u32>> = r.prob_codes.iter().flatten().cloned().collect();
                record(&mut trace, &codes_to_fired(&flat, window), 0, &mut layer_idx);
                record(&mut trace, &codes_to_fired(&r.out_codes, window), 0, &mut layer_idx);
                ops.merge(&r.ops);
                block_membranes.push(Vec::new());
                cur = r.out_codes;
            }
        }
        block_codes.push(cur.clone());
    }
    Ok(ModelRun {
        outputs: cur,
        block_codes,
        block_membranes,
        trace,
        stats,
        tables_built: 0,
        ops,
    })
}

/// Trace CSV `layer,neuron,k`, followed by a `# summary` block with
/// `layer,neurons,spikes,s_r,late_drops`.
pub fn write_trace_csv<W: Write>(mut w: W, run: &ModelRun) -> Result<()> {
    let io = |e| Error::io("<trace>", e);
    writeln!(w, "layer,neuron,k").map_err(io)?;
    for e in &run.trace {
        writeln!(w, "{},{},{}", e.layer, e.neuron, e.k).map_err(io)?;
    }
    writeln!(w, "# summary").map_err(io)?;
    writeln!(w, "layer,neurons,spikes,s_r,late_drops").map_err(io)?;
    for s in &run.stats {
        writeln!(w, "{},{},{},{},{}", s.layer, s.neurons, s.spikes, s.spike_rate, s.late_drops).map_err(io)?;
    }
    Ok(())
}

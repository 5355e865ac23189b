//! Noise-robustness sweeps: accuracy of converted models under injected
//! decay-output, tau and beta noise, with repeated seeded trials.
//!
//! Decay-output noise is per read (every PSP sample draws a factor).
//! Tau/beta noise is per device: one draw per trial, shared by every
//! evaluation sample of that trial.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::converter::OttersModel;
use crate::data::DatasetSpec;
use crate::engine::{run_model_with, EngineMode, Sampler};
use crate::error::{Error, Result};
use crate::qnn::{NoiseSource, NoiseSpec, NoiseTarget};
use crate::rng::{derive_seed, rng_from_seed};
use crate::trainer::predict_codes;

fn default_trials() -> usize {
    3
}

fn default_targets() -> Vec<NoiseTarget> {
    vec![NoiseTarget::DecayOutput, NoiseTarget::Tau, NoiseTarget::Beta]
}

/// Model file entry of a sweep spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub path: String,
    /// HAT noise level the model was trained with (0 for the baseline).
    #[serde(default)]
    pub hat_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_targets")]
    pub targets: Vec<NoiseTarget>,
    pub levels: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluation data; the eval split is used.
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("sweep needs at least one trial per level".into()));
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("sweep levels must be a non-empty list of values >= 0".into()));
        }
        if self.targets.is_empty() || self.targets.contains(&NoiseTarget::Activation) {
            return Err(Error::Config("sweep targets must be a non-empty subset of decay_output, tau, beta".into()));
        }
        Ok(())
    }
}

/// A converted model under test.
#[derive(Clone, Debug)]
pub struct NamedModel {
    pub name: String,
    pub hat_level: f64,
    pub model: OttersModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub accuracy: f64,
    /// The perturbed device could not be sampled; accuracy is the
    /// majority-class rate.
    pub failed: bool,
    /// Sample tables prepared for the trial's device.
    pub tables_built: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub model: String,
    pub target: NoiseTarget,
    pub level: f64,
    pub mean: f64,
    /// Unbiased sample standard deviation (0 for a single trial).
    pub std: f64,
    pub n_trials: usize,
    pub failed_trials: usize,
    pub trials: Vec<TrialResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Physical-mode accuracy without noise, per model.
    pub clean: Vec<(String, f64)>,
    pub majority_accuracy: f64,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, model: &str, target: NoiseTarget, level: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.target == target && c.level == level)
    }
}

/// Mean and unbiased sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    // identical trials report their value exactly, free of summation rounding
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn majority_rate(ys: &[usize]) -> f64 {
    if ys.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for &y in ys {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    *counts.values().max().unwrap() as f64 / ys.len() as f64
}

fn encode(model: &OttersModel, xs: &[Vec<f64>]) -> Result<Vec<Vec<u32>>> {
    let q = model.input_quant()?;
    Ok(xs.iter().map(|x| x.iter().map(|&v| q.code(v)).collect()).collect())
}

/// Classification accuracy of a converted model (no noise).
pub fn snn_accuracy(model: &OttersModel, xs: &[Vec<f64>], ys: &[usize], mode: &EngineMode) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} inputs but {} labels", xs.len(), ys.len())));
    }
    if xs.is_empty() {
        return Ok(0.0);
    }
    let sampler = Sampler::new(model, mode, None)?;
    let codes = encode(model, xs)?;
    let correct = codes
        .par_iter()
        .zip(ys.par_iter())
        .map(|(c, &y)| {
            let run = run_model_with(model, std::slice::from_ref(c), &sampler, None)?;
            Ok(usize::from(predict_codes(&run.outputs[0]) == y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / ys.len() as f64)
}

/// One trial: the device is perturbed once from `seed`; decay-output noise
/// gives every sample its own stream `derive_seed(seed, "sample/{i}")`.
fn run_trial(model: &OttersModel, codes: &[Vec<u32>], ys: &[usize], spec: NoiseSpec) -> Result<Option<f64>> {
    let mode = EngineMode::physical().with_noise(spec);
    let mut src = spec.source();
    let sampler = match Sampler::new(model, &mode, Some(&mut src)) {
        Ok(s) => s,
        Err(Error::Infeasible { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut correct = 0usize;
    for (i, (c, &y)) in codes.iter().zip(ys).enumerate() {
        let psp = (spec.target == NoiseTarget::DecayOutput)
            .then(|| NoiseSource::new(spec.level, rng_from_seed(derive_seed(spec.seed, &format!("sample/{i}")))));
        let run = run_model_with(model, std::slice::from_ref(c), &sampler, psp)?;
        correct += usize::from(predict_codes(&run.outputs[0]) == y);
    }
    Ok(Some(correct as f64 / ys.len().max(1) as f64))
}

/// Trial seeds depend on target and trial index only, so every model and
/// level sees the same underlying normal draws, scaled by the level.
pub fn trial_seed(seed: u64, target: NoiseTarget, trial: usize) -> u64 {
    derive_seed(seed, &format!("sweep/{target}/trial/{trial}"))
}

pub fn run_sweep(models: &[NamedModel], cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::Config("sweep needs at least one model".into()));
    }
    let data = cfg.dataset.generate()?;
    let ys = &data.eval_y;
    let majority_accuracy = majority_rate(ys);
    let encoded = models
        .iter()
        .map(|m| encode(&m.model, &data.eval_x))
        .collect::<Result<Vec<_>>>()?;
    let clean = models
        .iter()
        .map(|m| Ok((m.name.clone(), snn_accuracy(&m.model, &data.eval_x, ys, &EngineMode::physical())?)))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for mi in 0..models.len() {
        for &target in &cfg.targets {
            for &level in &cfg.levels {
                for t in 0..cfg.trials {
                    jobs.push((mi, target, level, t));
                }
            }
        }
    }
    let outcomes = jobs
        .par_iter()
        .map(|&(mi, target, level, t)| {
            let seed = trial_seed(cfg.seed, target, t);
            let spec = NoiseSpec::new(level, target, seed)?;
            let acc = run_trial(&models[mi].model, &encoded[mi], ys, spec)?;
            Ok(TrialResult {
                seed,
                accuracy: acc.unwrap_or(majority_accuracy),
                failed: acc.is_none(),
                tables_built: usize::from(acc.is_some()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let cells = outcomes
        .chunks(cfg.trials)
        .zip(jobs.chunks(cfg.trials))
        .map(|(trials, job)| {
            let (mi, target, level, _) = job[0];
            let accs: Vec<f64> = trials.iter().map(|t| t.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            SweepCell {
                model: models[mi].name.clone(),
                target,
                level,
                mean,
                std,
                n_trials: trials.len(),
                failed_trials: trials.iter().filter(|t| t.failed).count(),
                trials: trials.to_vec(),
            }
        })
        .collect();
    Ok(SweepResult {
        clean,
        majority_accuracy,
        cells,
    })
}

/// Merge sweeps of independently trained replicas (for example one per
/// training seed): trials of matching cells are concatenated and the
/// statistics recomputed. Clean accuracies are averaged per model.
pub fn pool_results(results: &[SweepResult]) -> Result<SweepResult> {
    let first = results
        .first()
        .ok_or_else(|| Error::Config("nothing to pool".into()))?;
    let mut cells = Vec::with_capacity(first.cells.len());
    for c in &first.cells {
        let mut trials = Vec::new();
        for r in results {
            let other = r
                .cell(&c.model, c.target, c.level)
                .ok_or_else(|| Error::Config(format!("sweeps disagree: no cell {} {} {}", c.model, c.target, c.level)))?;
            trials.extend(other.trials.iter().cloned());
        }
        let accs: Vec<f64> = trials.iter().map(|t| t.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        cells.push(SweepCell {
            model: c.model.clone(),
            target: c.target,
            level: c.level,
            mean,
            std,
            n_trials: trials.len(),
            failed_trials: trials.iter().filter(|t| t.failed).count(),
            trials,
        });
    }
    let n = results.len() as f64;
    let clean = first
        .clean
        .iter()
        .map(|(name, _)| {
            let sum: f64 = results
                .iter()
                .flat_map(|r| r.clean.iter().filter(|c| &c.0 == name).map(|c| c.1))
                .sum();
            (name.clone(), sum / n)
        })
        .collect();
    Ok(SweepResult {
        clean,
        majority_accuracy: results.iter().map(|r| r.majority_accuracy).sum::<f64>() / n,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatDelta {
    pub model: String,
    pub target: NoiseTarget,
    pub level: f64,
    /// HAT mean minus baseline mean.
    pub delta: f64,
    /// `sqrt((s_hat^2 + s_base^2) / 2)`.
    pub pooled_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatComparison {
    pub baseline: String,
    pub strongest: String,
    pub deltas: Vec<HatDelta>,
    /// Per target: strongest-HAT mean >= baseline mean at the top level.
    pub crossover: Vec<(NoiseTarget, bool)>,
}

impl HatComparison {
    pub fn crossover_holds(&self) -> bool {
        self.crossover.iter().all(|c| c.1)
    }
}

pub fn pooled_std(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

/// Per-level deltas of each HAT model against the baseline. `hat` lists
/// `(name, hat_level)`; the largest level is the strongest model.
pub fn compare_hat(result: &SweepResult, baseline: &str, hat: &[(String, f64)]) -> Result<HatComparison> {
    let strongest = hat
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Config("compare_hat needs at least one HAT model".into()))?;
    let mut deltas = Vec::new();
    let mut crossover = Vec::new();
    let mut targets: Vec<NoiseTarget> = Vec::new();
    for c in result.cells.iter().filter(|c| c.model == baseline) {
        if !targets.contains(&c.target) {
            targets.push(c.target);
        }
        for (name, _) in hat {
            let h = result
                .cell(name, c.target, c.level)
                .ok_or_else(|| Error::Config(format!("no sweep cell for model `{name}` at {} {}", c.target, c.level)))?;
            deltas.push(HatDelta {
                model: name.clone(),
                target: c.target,
                level: c.level,
                delta: h.mean - c.mean,
                pooled_std: pooled_std(h.std, c.std),
            });
        }
    }
    if targets.is_empty() {
        return Err(Error::Config(format!("no sweep cells for baseline `{baseline}`")));
    }
    for t in targets {
        let top = result
            .cells
            .iter()
            .filter(|c| c.model == baseline && c.target == t)
            .map(|c| c.level)
            .fold(f64::NEG_INFINITY, f64::max);
        let d = deltas
            .iter()
            .find(|d| d.model == strongest.0 && d.target == t && d.level == top)
            .map_or(f64::NEG_INFINITY, |d| d.delta);
        crossover.push((t, d >= 0.0));
    }
    Ok(HatComparison {
        baseline: baseline.to_string(),
        strongest: strongest.0.clone(),
        deltas,
        crossover,
    })
}

/// CSV `model,target,level,mean,std,n_trials`.
pub fn write_sweep_csv<W: Write>(mut w: W, r: &SweepResult) -> Result<()> {
    let io = |e| Error::io("<sweep csv>", e);
    writeln!(w, "model,target,level,mean,std,n_trials").map_err(io)?;
    for c in &r.cells {
        writeln!(w, "{},{},{},{},{},{}", c.model, c.target, c.level, c.mean, c.std, c.n_trials).map_err(io)?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Accuracy vs noise level, one panel per target and one series per model.
pub fn sweep_svg(r: &SweepResult) -> String {
    let mut targets: Vec<NoiseTarget> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for c in &r.cells {
        if !targets.contains(&c.target) {
            targets.push(c.target);
        }
        if !models.contains(&c.model.as_str()) {
            models.push(&c.model);
        }
    }
    let (pw, ph, m) = (320.0, 240.0, 40.0);
    let width = pw * targets.len().max(1) as f64;
    let height = ph + 20.0 * models.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#);
    for (ti, t) in targets.iter().enumerate() {
        let x0 = ti as f64 * pw;
        let cells: Vec<&SweepCell> = r.cells.iter().filter(|c| c.target == *t).collect();
        let lmax = cells.iter().map(|c| c.level).fold(0.0, f64::max).max(1e-12);
        let px = |l: f64| x0 + m + (pw - 2.0 * m) * l / lmax;
        let py = |a: f64| ph - m - (ph - 2.0 * m) * a;
        let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle">{t}</text>"#, x0 + pw / 2.0);
        let _ = writeln!(
            s,
            r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
            px(0.0), py(1.0), px(0.0), py(0.0), px(lmax), py(0.0)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">1.0</text>"#, px(0.0) - 4.0, py(1.0) + 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0.0</text>"#, px(0.0) - 4.0, py(0.0) + 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{lmax}</text>"#, px(lmax), py(0.0) + 14.0);
        for (mi, name) in models.iter().enumerate() {
            let pts: Vec<String> = cells
                .iter()
                .filter(|c| c.model == *name)
                .map(|c| format!("{:.2},{:.2}", px(c.level), py(c.mean)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                pts.join(" "),
                PALETTE[mi % PALETTE.len()]
            );
        }
    }
    for (mi, name) in models.iter().enumerate() {
        let y = ph + 14.0 + 20.0 * mi as f64;
        let _ = writeln!(s, r#"<rect x="{m}" y="{}" width="12" height="3" fill="{}"/>"#, y - 4.0, PALETTE[mi % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{name}</text>"#, m + 18.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbiased_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        assert_eq!(mean_std(&[0.925; 3]), (0.925, 0.0));
    }

    #[test]
    fn majority() {
        assert_eq!(majority_rate(&[0, 1, 1, 2]), 0.5);
    }

    fn cell(model: &str, level: f64, mean: f64) -> SweepCell {
        SweepCell {
            model: model.into(),
            target: NoiseTarget::DecayOutput,
            level,
            mean,
            std: 0.0,
            n_trials: 1,
            failed_trials: 0,
            trials: vec![],
        }
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let r = SweepResult {
            clean: vec![],
            majority_accuracy: 0.5,
            cells: vec![cell("a", 0.0, 0.9), cell("a", 0.2, 0.7)],
        };
        let c = compare_hat(&r, "a", &[("a".into(), 0.0)]).unwrap();
        assert!(c.deltas.iter().all(|d| d.delta == 0.0));
        assert!(c.crossover_holds());
    }

    #[test]
    fn crossover_uses_top_level_of_strongest() {
        let r = SweepResult {
            clean: vec![],
            majority_accuracy: 0.5,
            cells: vec![
                cell("base", 0.0, 0.9),
                cell("base", 0.2, 0.6),
                cell("h1", 0.0, 0.88),
                cell("h1", 0.2, 0.5),
                cell("h2", 0.0, 0.85),
                cell("h2", 0.2, 0.7),
            ],
        };
        let c = compare_hat(&r, "base", &[("h1".into(), 0.1), ("h2".into(), 0.2)]).unwrap();
        assert_eq!(c.strongest, "h2");
        assert!(c.crossover_holds());
        let c = compare_hat(&r, "base", &[("h1".into(), 0.3), ("h2".into(), 0.2)]).unwrap();
        assert!(!c.crossover_holds());
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = SweepConfig {
            targets: default_targets(),
            levels: vec![0.0, 0.1],
            trials: 3,
            seed: 0,
            dataset: DatasetSpec::blobs(4, 3, 0),
            models: vec![],
        };
        assert!(cfg.validate().is_ok());
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        cfg.trials = 1;
        cfg.levels = vec![-0.1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_and_svg_render() {
        let r = SweepResult {
            clean: vec![],
            majority_accuracy: 0.5,
            cells: vec![cell("a", 0.0, 0.9), cell("a", 0.2, 0.7)],
        };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("model,target,level,mean,std,n_trials"));
        assert!(text.contains("a,decay_output,0.2,0.7,0,1"));
        assert!(sweep_svg(&r).contains("<polyline"));
    }
}

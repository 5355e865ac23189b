//! rand/1/bin differential evolution over `(i0, tau, beta, i_offset)`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DecayModel, DecaySample};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const MIN_SAMPLES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub min: f64,
    pub max: f64,
}

impl ParamBounds {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub i0: ParamBounds,
    pub tau: ParamBounds,
    pub beta: ParamBounds,
    pub i_offset: ParamBounds,
    pub population: usize,
    pub max_generations: usize,
    pub crossover: f64,
    pub weight: f64,
    /// Stop once the population's SSR spread (max - min) drops to this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            i0: ParamBounds::new(0.1, 500.0),
            tau: ParamBounds::new(1e-3, 100.0),
            beta: ParamBounds::new(0.05, 2.0),
            i_offset: ParamBounds::new(-500.0, 10.0),
            population: 40,
            max_generations: 5000,
            crossover: 0.9,
            weight: 0.7,
            tolerance: 1e-24,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn bounds(&self) -> [ParamBounds; 4] {
        [self.i0, self.tau, self.beta, self.i_offset]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in ["i0", "tau", "beta", "i_offset"].iter().zip(self.bounds()) {
            if !(b.min < b.max) || !b.min.is_finite() || !b.max.is_finite() {
                return Err(Error::Config(format!(
                    "bounds for {name} must satisfy min < max (got [{}, {}])",
                    b.min, b.max
                )));
            }
        }
        if self.tau.min <= 0.0 || self.beta.min <= 0.0 || self.i0.min <= 0.0 {
            return Err(Error::Config(
                "lower bounds of i0, tau and beta must be positive".into(),
            ));
        }
        if self.population < 4 {
            return Err(Error::Config(format!(
                "population must be >= 4, got {}",
                self.population
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return Err(Error::Config("crossover rate must lie in [0, 1]".into()));
        }
        if !(0.0..=2.0).contains(&self.weight) {
            return Err(Error::Config("differential weight must lie in [0, 2]".into()));
        }
        Ok(())
    }

    /// Candidate at the centre of every bound.
    pub fn midpoint(&self) -> DecayModel {
        let [a, b, c, d] = self.bounds().map(|p| p.mid());
        DecayModel {
            i0: a,
            tau: b,
            beta: c,
            i_offset: d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub model: DecayModel,
    pub ssr: f64,
    pub generations: usize,
    pub converged: bool,
}

/// Sum of squared residuals of `model` against `samples`.
pub fn ssr(model: &DecayModel, samples: &[DecaySample]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let r = s.value - model.eval_unchecked(s.t);
            r * r
        })
        .sum()
}

fn to_model(x: &[f64; 4]) -> DecayModel {
    DecayModel {
        i0: x[0],
        tau: x[1],
        beta: x[2],
        i_offset: x[3],
    }
}

fn cost(x: &[f64; 4], samples: &[DecaySample]) -> f64 {
    let v = ssr(&to_model(x), samples);
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Fit the decay model by minimizing the SSR with differential evolution.
///
/// All random draws happen on one thread in a fixed order; only fitness
/// evaluation is parallel, so the result depends on the seed alone.
pub fn fit_decay(samples: &[DecaySample], cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| {
        (a.min(s.value), b.max(s.value))
    });
    if !(hi - lo > 0.0) {
        return Err(Error::Domain(
            "samples span no value range; the curve is unidentifiable".into(),
        ));
    }

    let bounds = cfg.bounds();
    let np = cfg.population;
    let mut rng = rng_from_seed(cfg.seed);

    let mut pop: Vec<[f64; 4]> = (0..np)
        .map(|_| {
            let mut x = [0.0; 4];
            for (d, b) in bounds.iter().enumerate() {
                x[d] = b.min + rng.random::<f64>() * (b.max - b.min);
            }
            x
        })
        .collect();
    let mut fit: Vec<f64> = pop.par_iter().map(|x| cost(x, samples)).collect();

    let mut generations = 0;
    let mut converged = false;
    for _ in 0..cfg.max_generations {
        if spread(&fit) <= cfg.tolerance {
            converged = true;
            break;
        }
        let trials: Vec<[f64; 4]> = (0..np)
            .map(|i| {
                let [r1, r2, r3] = pick_three(&mut rng, np, i);
                let forced = rng.random_range(0..4);
                let mut t = pop[i];
                for d in 0..4 {
                    if d == forced || rng.random::<f64>() < cfg.crossover {
                        let v = pop[r1][d] + cfg.weight * (pop[r2][d] - pop[r3][d]);
                        t[d] = v.clamp(bounds[d].min, bounds[d].max);
                    }
                }
                t
            })
            .collect();
        let trial_fit: Vec<f64> = trials.par_iter().map(|x| cost(x, samples)).collect();
        for i in 0..np {
            if trial_fit[i] <= fit[i] {
                pop[i] = trials[i];
                fit[i] = trial_fit[i];
            }
        }
        generations += 1;
    }
    if !converged && spread(&fit) <= cfg.tolerance {
        converged = true;
    }

    let best = (0..np)
        .min_by(|&a, &b| fit[a].total_cmp(&fit[b]))
        .expect("population is non-empty");
    Ok(FitOutcome {
        model: to_model(&pop[best]),
        ssr: fit[best],
        generations,
        converged,
    })
}

fn spread(fit: &[f64]) -> f64 {
    let (lo, hi) = fit
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    hi - lo
}

fn pick_three(rng: &mut crate::rng::Rng, n: usize, exclude: usize) -> [usize; 3] {
    let mut out = [usize::MAX; 3];
    let mut filled = 0;
    while filled < 3 {
        let c = rng.random_range(0..n);
        if c != exclude && !out[..filled].contains(&c) {
            out[filled] = c;
            filled += 1;
        }
    }
    out
}

/// Noiseless samples of `model`: `t = 0` plus 199 log-spaced instants on
/// `[1e-4, 20]`.
pub fn synthetic_samples(model: &DecayModel) -> Vec<DecaySample> {
    let mut out = vec![DecaySample {
        t: 0.0,
        value: model.eval_unchecked(0.0),
    }];
    let (a, b) = (1e-4f64.ln(), 20f64.ln());
    for i in 0..199 {
        let t = (a + (b - a) * i as f64 / 198.0).exp();
        out.push(DecaySample {
            t,
            value: model.eval_unchecked(t),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::DecayModel;
    use rand_distr::{Distribution, Normal};

    fn test_cfg(seed: u64) -> FitConfig {
        FitConfig {
            i0: ParamBounds::new(1.0, 300.0),
            tau: ParamBounds::new(0.1, 10.0),
            beta: ParamBounds::new(0.1, 1.5),
            i_offset: ParamBounds::new(-300.0, 0.0),
            seed,
            ..FitConfig::default()
        }
    }

    #[test]
    fn too_few_samples() {
        let s = synthetic_samples(&DecayModel::DEVICE);
        match fit_decay(&s[..7], &test_cfg(1)) {
            Err(Error::InsufficientData { needed: 8, got: 7 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_config_rejected() {
        let s = synthetic_samples(&DecayModel::DEVICE);
        let mut cfg = test_cfg(1);
        cfg.population = 3;
        assert!(matches!(fit_decay(&s, &cfg), Err(Error::Config(_))));
        let mut cfg = test_cfg(1);
        cfg.tau = ParamBounds::new(2.0, 2.0);
        assert!(matches!(fit_decay(&s, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn seed_determinism() {
        let s = synthetic_samples(&DecayModel::DEVICE);
        let mut cfg = test_cfg(11);
        cfg.max_generations = 50;
        let a = fit_decay(&s, &cfg).unwrap();
        let b = fit_decay(&s, &cfg).unwrap();
        assert_eq!(a.model.i0.to_bits(), b.model.i0.to_bits());
        assert_eq!(a.model.tau.to_bits(), b.model.tau.to_bits());
        assert_eq!(a.model.beta.to_bits(), b.model.beta.to_bits());
        assert_eq!(a.model.i_offset.to_bits(), b.model.i_offset.to_bits());
        assert_eq!(a.ssr.to_bits(), b.ssr.to_bits());
        assert!(!a.converged);
    }

    #[test]
    fn noisy_fit_beats_midpoint() {
        let mut rng = rng_from_seed(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let s: Vec<_> = synthetic_samples(&DecayModel::DEVICE)
            .into_iter()
            .map(|p| DecaySample {
                t: p.t,
                value: p.value * (1.0 + noise.sample(&mut rng)),
            })
            .collect();
        let cfg = test_cfg(5);
        let out = fit_decay(&s, &cfg).unwrap();
        assert!(out.ssr < ssr(&cfg.midpoint(), &s));
    }

    #[test]
    fn two_seeds_agree_on_noiseless_data() {
        let s = synthetic_samples(&DecayModel::DEVICE);
        let a = fit_decay(&s, &test_cfg(1)).unwrap();
        let b = fit_decay(&s, &test_cfg(2)).unwrap();
        assert!((a.ssr - b.ssr).abs() <= 1e-6, "{} vs {}", a.ssr, b.ssr);
        assert!(a.converged && b.converged);
    }
}

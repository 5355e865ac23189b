//! Stretched-exponential device response: evaluation, inversion, spike-time
//! tables and differential-evolution fitting.
//!
//! The device output after a light pulse is modeled as
//! `O(t) = i0 * exp(-(t / tau)^beta) + i_offset`, a non-increasing curve that
//! starts at `i0 + i_offset` and approaches `i_offset`. A spike-time table
//! picks the physical sample instants `t_k` at which the curve passes through
//! the evenly spaced levels `(T - k) / T`.

mod fit;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fit::{fit_decay, synthetic_samples, FitConfig, FitOutcome, ParamBounds};

/// One measured point of the device response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySample {
    pub t: f64,
    pub value: f64,
}

/// Parameters of the stretched-exponential device response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayModel {
    pub i0: f64,
    pub tau: f64,
    pub beta: f64,
    pub i_offset: f64,
}

impl DecayModel {
    /// Fitted response of the indium-oxide TFT synapse.
    pub const DEVICE: DecayModel = DecayModel {
        i0: 110.989,
        tau: 1.3425,
        beta: 0.495,
        i_offset: -109.989,
    };

    pub fn new(i0: f64, tau: f64, beta: f64, i_offset: f64) -> Result<Self> {
        let m = Self {
            i0,
            tau,
            beta,
            i_offset,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.i0, self.tau, self.beta, self.i_offset]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("decay parameters must be finite".into()));
        }
        if self.i0 <= 0.0 || self.tau <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Domain(format!(
                "decay model requires i0 > 0, tau > 0, beta > 0 (got i0={}, tau={}, beta={})",
                self.i0, self.tau, self.beta
            )));
        }
        Ok(())
    }

    /// Device output at `t = 0`.
    pub fn peak(&self) -> f64 {
        self.i0 + self.i_offset
    }

    /// Rounding slack of `peak()`; values this close above it count as the peak.
    fn peak_slack(&self) -> f64 {
        4.0 * f64::EPSILON * self.i0.abs().max(self.i_offset.abs())
    }

    /// Evaluate without checking the sign of `t`.
    #[inline]
    pub fn eval_unchecked(&self, t: f64) -> f64 {
        self.i0 * (-(t / self.tau).powf(self.beta)).exp() + self.i_offset
    }
}

/// `O(t)`; negative times are a domain error.
pub fn eval_decay(model: &DecayModel, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("decay time must be >= 0, got {t}")));
    }
    Ok(model.eval_unchecked(t))
}

/// Closed-form inverse `t = tau * ln(i0 / (v - i_offset))^(1/beta)`.
///
/// Defined for `i_offset < v <= i0 + i_offset`.
pub fn invert_decay(model: &DecayModel, v: f64) -> Result<f64> {
    let top = model.peak();
    if !(v > model.i_offset && v <= top + model.peak_slack()) {
        return Err(Error::Domain(format!(
            "value {v} is unreachable by the device (reachable range ({}, {top}])",
            model.i_offset
        )));
    }
    let x = (model.i0 / (v - model.i_offset)).ln();
    // v at the very top can round to a ratio marginally below 1.
    if x <= 0.0 {
        return Ok(0.0);
    }
    Ok(model.tau * x.powf(1.0 / model.beta))
}

/// Physical sample instants realizing `O(t_k) = (T - k) / T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeTimeTable {
    #[serde(rename = "T")]
    pub window: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpikeTimeTable {
    /// Logical level `(T - k) / T` for step `k`.
    #[inline]
    pub fn level(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.window;
        if t == 0 {
            return Err(Error::Domain("spike-time table needs T >= 1".into()));
        }
        if self.times.len() != t || self.values.len() != t {
            return Err(Error::Shape(format!(
                "table with T={t} must carry {t} times and values (got {} and {})",
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain("table times must be strictly increasing".into()));
        }
        for (k, &v) in self.values.iter().enumerate() {
            let want = (t - k) as f64 / t as f64;
            if v != want {
                return Err(Error::Domain(format!(
                    "table value at k={k} is {v}, expected {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Build the spike-time table for a window of `window` logical steps.
pub fn build_spike_time_table(model: &DecayModel, window: usize) -> Result<SpikeTimeTable> {
    model.validate()?;
    if window == 0 {
        return Err(Error::Domain("spike-time table needs T >= 1".into()));
    }
    let peak = model.peak();
    let mut times = Vec::with_capacity(window);
    let mut values = Vec::with_capacity(window);
    for k in 0..window {
        let v = (window - k) as f64 / window as f64;
        if v > peak + model.peak_slack() {
            return Err(Error::Infeasible {
                k,
                value: v,
                reason: format!("device peak i0 + i_offset = {peak} is below 1"),
            });
        }
        let t = invert_decay(model, v).map_err(|e| Error::Infeasible {
            k,
            value: v,
            reason: e.to_string(),
        })?;
        times.push(t);
        values.push(v);
    }
    if let Some(k) = times.windows(2).position(|w| !(w[0] < w[1])) {
        return Err(Error::Infeasible {
            k: k + 1,
            value: values[k + 1],
            reason: "sample instants collapse (curve too flat to resolve)".into(),
        });
    }
    Ok(SpikeTimeTable {
        window,
        times,
        values,
    })
}

/// On-disk decay model, with optional provenance of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayModelFile {
    pub i0: f64,
    pub tau: f64,
    pub beta: f64,
    pub i_offset: f64,
    #[serde(default)]
    pub fit_ssr: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DecayModelFile {
    pub fn model(&self) -> Result<DecayModel> {
        DecayModel::new(self.i0, self.tau, self.beta, self.i_offset)
    }

    pub fn from_model(m: &DecayModel, fit_ssr: Option<f64>, seed: Option<u64>) -> Self {
        Self {
            i0: m.i0,
            tau: m.tau,
            beta: m.beta,
            i_offset: m.i_offset,
            fit_ssr,
            seed,
        }
    }
}

/// Read a `t,value` CSV of decay samples.
pub fn read_samples_csv(path: &Path) -> Result<Vec<DecaySample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(file).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(path, reason),
        other => other,
    })
}

pub fn read_samples<R: std::io::Read>(reader: R) -> Result<Vec<DecaySample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::format("<samples>", e))?
        .clone();
    if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "value" {
        return Err(Error::format("<samples>", "expected header `t,value`"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<DecaySample>().enumerate() {
        let s = rec.map_err(|e| Error::format("<samples>", format!("row {}: {e}", i + 2)))?;
        if !(s.t >= 0.0) || !s.value.is_finite() {
            return Err(Error::format(
                "<samples>",
                format!("row {}: t must be >= 0 and value finite", i + 2),
            ));
        }
        if let Some(prev) = out.last().map(|p: &DecaySample| p.t) {
            if !(s.t > prev) {
                return Err(Error::format(
                    "<samples>",
                    format!("row {}: times must be strictly ascending", i + 2),
                ));
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_samples<W: std::io::Write>(writer: W, samples: &[DecaySample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)
            .map_err(|e| Error::format("<samples>", e))?;
    }
    w.flush().map_err(|e| Error::io("<samples>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DEV: DecayModel = DecayModel::DEVICE;

    #[test]
    fn device_starts_at_one() {
        assert!((eval_decay(&DEV, 0.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tends_to_offset() {
        let v = eval_decay(&DEV, 1e9).unwrap();
        assert!((v - DEV.i_offset).abs() < 1e-9);
    }

    #[test]
    fn negative_time_is_domain_error() {
        assert!(matches!(eval_decay(&DEV, -1e-3), Err(Error::Domain(_))));
        assert!(eval_decay(&DEV, f64::NAN).is_err());
    }

    #[test]
    fn half_level_time() {
        // Closed form: tau * ln(i0 / (0.5 - i_offset))^(1/beta).
        let expect = 1.3425 * (110.989f64 / 110.489).ln().powf(1.0 / 0.495);
        let t = invert_decay(&DEV, 0.5).unwrap();
        assert_eq!(t, expect);
        assert!((t - 2.45e-5).abs() < 0.01e-5, "t = {t}");
        assert!((eval_decay(&DEV, t).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invert_top_and_asymptote() {
        assert_eq!(invert_decay(&DEV, 1.0).unwrap(), 0.0);
        assert!(invert_decay(&DEV, DEV.i_offset).is_err());
        assert!(invert_decay(&DEV, 1.0 + 1e-9).is_err());
    }

    #[test]
    fn table_for_t15() {
        let table = build_spike_time_table(&DEV, 15).unwrap();
        assert_eq!(table.times[0], 0.0);
        for k in 0..15 {
            let o = eval_decay(&DEV, table.times[k]).unwrap();
            assert!((o - (15 - k) as f64 / 15.0).abs() <= 1e-9);
        }
        assert!(table.times.windows(2).all(|w| w[0] < w[1]));
        table.validate().unwrap();
    }

    #[test]
    fn table_single_step() {
        let table = build_spike_time_table(&DEV, 1).unwrap();
        assert_eq!(table.times, vec![0.0]);
        assert_eq!(table.values, vec![1.0]);
    }

    #[test]
    fn unreachable_peak_is_infeasible() {
        let m = DecayModel::new(1.0, 1.0, 0.5, -0.5).unwrap();
        match build_spike_time_table(&m, 15) {
            Err(Error::Infeasible { k, .. }) => assert_eq!(k, 0),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let samples = vec![
            DecaySample { t: 0.0, value: 1.0 },
            DecaySample { t: 0.5, value: 0.25 },
        ];
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t,value\n"));
        assert_eq!(read_samples(&buf[..]).unwrap(), samples);

        assert!(read_samples("t,value\n1,0.5\n0.5,0.2\n".as_bytes()).is_err());
        assert!(read_samples("time,v\n0,1\n".as_bytes()).is_err());
        assert!(read_samples("t,value\n-1,1\n".as_bytes()).is_err());
    }

    fn arb_model() -> impl Strategy<Value = DecayModel> {
        (0.5f64..200.0, 0.01f64..10.0, 0.2f64..1.5, -200.0f64..1.0)
            .prop_map(|(i0, tau, beta, off)| DecayModel::new(i0, tau, beta, off).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_value(m in arb_model(), u in 1e-6f64..1.0) {
            // v spans the reachable interval, kept away from the asymptote
            let v = m.i_offset + u * m.i0;
            let t = invert_decay(&m, v).unwrap();
            let back = eval_decay(&m, t).unwrap();
            prop_assert!((back - v).abs() <= 1e-9 * v.abs().max(1.0));
        }

        #[test]
        fn monotone(m in arb_model(), a in 0.0f64..50.0, d in 0.0f64..50.0) {
            let v1 = eval_decay(&m, a).unwrap();
            let v2 = eval_decay(&m, a + d).unwrap();
            prop_assert!(v1 >= v2);
        }

        #[test]
        fn table_consistent(window in 1usize..64, off in -150.0f64..-0.1, tau in 0.1f64..5.0, beta in 0.3f64..1.2) {
            let m = DecayModel::new(1.0 - off, tau, beta, off).unwrap();
            let table = build_spike_time_table(&m, window).unwrap();
            for k in 0..window {
                let o = eval_decay(&m, table.times[k]).unwrap();
                prop_assert!((o - (window - k) as f64 / window as f64).abs() <= 1e-9);
            }
            prop_assert!(table.times.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

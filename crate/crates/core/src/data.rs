//! Seeded synthetic classification sets (Gaussian blobs, two moons).
//!
//! Features are min-max normalized to `[0, 1]` with training-split statistics
//! so they sit inside the range of an unsigned activation quantizer.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Moons,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "moons" => Ok(Self::Moons),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Everything needed to regenerate a toy dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Per-coordinate standard deviation around the class prototype.
    pub spread: f64,
    /// Distance scale between class centers (blobs only).
    pub separation: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn blobs(dim: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Blobs,
            dim,
            classes,
            n_train: 800,
            n_eval: 400,
            spread: 0.6,
            separation: 1.5,
            seed,
        }
    }

    pub fn moons(dim: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Moons,
            dim: dim.max(2),
            classes: 2,
            n_train: 800,
            n_eval: 400,
            spread: 0.15,
            separation: 1.0,
            seed,
        }
    }

    pub fn generate(&self) -> Result<ToyDataset> {
        ToyDataset::generate(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub dim: usize,
    pub classes: usize,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<usize>,
    pub eval_x: Vec<Vec<f64>>,
    pub eval_y: Vec<usize>,
}

impl ToyDataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        if spec.dim == 0 || spec.classes < 2 || spec.n_train == 0 {
            return Err(Error::Config(
                "dataset needs dim >= 1, classes >= 2 and a non-empty training split".into(),
            ));
        }
        if !(spec.spread >= 0.0) {
            return Err(Error::Config("dataset spread must be >= 0".into()));
        }
        let (train_x, train_y, eval_x, eval_y) = match spec.kind {
            DatasetKind::Blobs => {
                let mut crng = substream(spec.seed, "data/centers");
                let centers: Vec<Vec<f64>> = (0..spec.classes)
                    .map(|_| {
                        (0..spec.dim)
                            .map(|_| spec.separation * crng.random_range(-1.0..1.0))
                            .collect()
                    })
                    .collect();
                let (tx, ty) = blobs(spec, &centers, spec.n_train, "data/train");
                let (ex, ey) = blobs(spec, &centers, spec.n_eval, "data/eval");
                (tx, ty, ex, ey)
            }
            DatasetKind::Moons => {
                if spec.classes != 2 || spec.dim < 2 {
                    return Err(Error::Config("moons are 2-class with dim >= 2".into()));
                }
                let (tx, ty) = moons(spec, spec.n_train, "data/train");
                let (ex, ey) = moons(spec, spec.n_eval, "data/eval");
                (tx, ty, ex, ey)
            }
        };
        let mut ds = Self {
            dim: spec.dim,
            classes: spec.classes,
            train_x,
            train_y,
            eval_x,
            eval_y,
        };
        ds.normalize();
        Ok(ds)
    }

    fn normalize(&mut self) {
        for d in 0..self.dim {
            let (lo, hi) = self
                .train_x
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
                    (a.min(x[d]), b.max(x[d]))
                });
            let span = if hi > lo { hi - lo } else { 1.0 };
            for x in self.train_x.iter_mut().chain(self.eval_x.iter_mut()) {
                x[d] = ((x[d] - lo) / span).clamp(0.0, 1.0);
            }
        }
    }
}

fn blobs(
    spec: &DatasetSpec,
    centers: &[Vec<f64>],
    n: usize,
    label: &str,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = substream(spec.seed, label);
    let noise = Normal::new(0.0, spec.spread).expect("spread validated");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        xs.push(centers[c].iter().map(|m| m + noise.sample(&mut rng)).collect());
        ys.push(c);
    }
    (xs, ys)
}

fn moons(spec: &DatasetSpec, n: usize, label: &str) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = substream(spec.seed, label);
    let noise = Normal::new(0.0, spec.spread).expect("spread validated");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let th = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if c == 0 {
            (th.cos(), th.sin())
        } else {
            (1.0 - th.cos(), 0.5 - th.sin())
        };
        let mut p = vec![x + noise.sample(&mut rng), y + noise.sample(&mut rng)];
        p.extend((2..spec.dim).map(|_| noise.sample(&mut rng)));
        xs.push(p);
        ys.push(c);
    }
    (xs, ys)
}

//! Desk-scale training: full-precision MLP teachers and quantized students
//! trained with a clipped straight-through estimator, logits/representation
//! distillation and optional hardware-aware activation noise.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::qnn::{softmax, ActQuantizer, NoiseSource, QnnBlock, QnnLinear, QnnModel};
use crate::rng::{substream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kd_lambda: f64,
    pub hat_noise_level: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            epochs: 40,
            batch_size: 32,
            kd_lambda: 0.0,
            hat_noise_level: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.kd_lambda >= 0.0) {
            return Err(Error::Config("kd_lambda must be >= 0".into()));
        }
        if !(self.hat_noise_level >= 0.0) {
            return Err(Error::Config("hat noise level must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fully connected layer, `weights` is outputs x inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn he(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let n = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        Self {
            weights: Matrix::from_fn(outputs, inputs, |_, _| n.sample(rng)),
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|j| {
                let dot: f64 = self.weights.row(j).iter().zip(x).map(|(w, x)| w * x).sum();
                dot + self.bias[j]
            })
            .collect()
    }
}

/// Full-precision ReLU MLP with a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn init(arch: &[usize], rng: &mut Rng) -> Result<Self> {
        check_arch(arch)?;
        Ok(Self {
            layers: arch.windows(2).map(|w| Dense::he(w[0], w[1], rng)).collect(),
        })
    }

    pub fn arch(&self) -> Vec<usize> {
        let mut a = vec![self.layers[0].weights.cols()];
        a.extend(self.layers.iter().map(|l| l.weights.rows()));
        a
    }

    /// Hidden activations (one per hidden layer) and output logits.
    pub fn forward(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let a = l.affine(&cur);
            if i + 1 == self.layers.len() {
                return (hidden, a);
            }
            cur = a.into_iter().map(|v| v.max(0.0)).collect();
            hidden.push(cur.clone());
        }
        unreachable!("an Mlp has at least one layer")
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.forward(x).1)
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len() as f64
    }
}

fn check_arch(arch: &[usize]) -> Result<()> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(Error::Config(format!(
            "architecture needs at least input and output widths, all positive (got {arch:?})"
        )));
    }
    Ok(())
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class decision on output codes: highest code, ties to the lower index
/// (the earliest spike wins; simultaneous spikes resolve by neuron order).
pub fn predict_codes(codes: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in codes.iter().enumerate() {
        if c > codes[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss_logits: f64,
    pub loss_reps: f64,
    pub accuracy: f64,
}

/// `epoch,split,loss_logits,loss_reps,accuracy`
pub fn write_metrics_csv<W: Write>(w: W, rows: &[EpochMetrics]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::format("<metrics>", e))?;
    }
    wr.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

/// Gradient of the clipped straight-through estimator: identity where
/// `0 <= a / alpha <= 2^n - 1`, zero outside.
#[inline]
pub fn ste_backward(grad_out: f64, a: f64, q: &ActQuantizer) -> f64 {
    let r = a / q.alpha;
    if (0.0..=q.levels() as f64).contains(&r) {
        grad_out
    } else {
        0.0
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    fn new(kind: OptimizerKind, layers: &[Dense]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let shapes: Vec<usize> = layers
                    .iter()
                    .flat_map(|l| [l.weights.as_slice().len(), l.bias.len()])
                    .collect();
                Optimizer::Adam(Adam {
                    m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                    v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                    step: 0,
                })
            }
        }
    }

    fn apply(&mut self, layers: &mut [Dense], grads: &Grads, lr: f64) {
        let params = layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()]);
        let gs = grads
            .w
            .iter()
            .zip(&grads.b)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()]);
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.zip(gs) {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            Optimizer::Adam(st) => {
                st.step += 1;
                let c1 = 1.0 - ADAM_B1.powi(st.step);
                let c2 = 1.0 - ADAM_B2.powi(st.step);
                for (((p, g), m), v) in params.zip(gs).zip(&mut st.m).zip(&mut st.v) {
                    for i in 0..p.len() {
                        m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g[i];
                        v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

pub(crate) struct Grads {
    w: Vec<Matrix>,
    b: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros(layers: &[Dense]) -> Self {
        Self {
            w: layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            b: layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        for m in &mut self.w {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
        for b in &mut self.b {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Accumulate `g (x) x` into layer `l`.
    fn add_outer(&mut self, l: usize, g: &[f64], x: &[f64]) {
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            for (w, &xi) in self.w[l].row_mut(j).iter_mut().zip(x) {
                *w += gj * xi;
            }
            self.b[l][j] += gj;
        }
    }
}

fn back_through(layer: &Dense, g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; layer.weights.cols()];
    for (j, &gj) in g.iter().enumerate() {
        if gj == 0.0 {
            continue;
        }
        for (d, &w) in dx.iter_mut().zip(layer.weights.row(j)) {
            *d += gj * w;
        }
    }
    dx
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[y].max(f64::MIN_POSITIVE).ln();
    let mut g = p;
    g[y] -= 1.0;
    (loss, g)
}

#[derive(Clone, Debug)]
pub struct TrainedTeacher {
    pub model: Mlp,
    pub metrics: Vec<EpochMetrics>,
}

fn teacher_metrics(m: &Mlp, epoch: usize, split: Split, xs: &[Vec<f64>], ys: &[usize]) -> EpochMetrics {
    let loss = if xs.is_empty() {
        0.0
    } else {
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| cross_entropy(&m.forward(x).1, y).0)
            .sum::<f64>()
            / xs.len() as f64
    };
    EpochMetrics {
        epoch,
        split,
        loss_logits: loss,
        loss_reps: 0.0,
        accuracy: m.accuracy(xs, ys),
    }
}

/// Supervised cross-entropy training of a full-precision teacher.
pub fn train_teacher(data: &ToyDataset, arch: &[usize], cfg: &TrainConfig) -> Result<TrainedTeacher> {
    cfg.validate()?;
    check_arch(arch)?;
    if data.train_x.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if arch[0] != data.dim || *arch.last().unwrap() != data.classes {
        return Err(Error::Config(format!(
            "architecture {arch:?} does not match data (dim {}, classes {})",
            data.dim, data.classes
        )));
    }
    let mut init_rng = substream(cfg.seed, "teacher/init");
    let mut shuffle_rng = substream(cfg.seed, "teacher/shuffle");
    let mut model = Mlp::init(arch, &mut init_rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, &model.layers);
    let mut metrics = vec![
        teacher_metrics(&model, 0, Split::Train, &data.train_x, &data.train_y),
        teacher_metrics(&model, 0, Split::Eval, &data.eval_x, &data.eval_y),
    ];
    for epoch in 1..=cfg.epochs {
        for batch in shuffled_batches(data.train_x.len(), cfg.batch_size, &mut shuffle_rng) {
            let mut grads = Grads::zeros(&model.layers);
            for &i in &batch {
                let x = &data.train_x[i];
                let (hidden, logits) = model.forward(x);
                let (loss, mut g) = cross_entropy(&logits, data.train_y[i]);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                for l in (0..model.layers.len()).rev() {
                    let input = if l == 0 { x } else { &hidden[l - 1] };
                    grads.add_outer(l, &g, input);
                    if l > 0 {
                        let dx = back_through(&model.layers[l], &g);
                        g = dx
                            .into_iter()
                            .zip(&hidden[l - 1])
                            .map(|(d, &h)| if h > 0.0 { d } else { 0.0 })
                            .collect();
                    }
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.apply(&mut model.layers, &grads, cfg.learning_rate);
        }
        let tr = teacher_metrics(&model, epoch, Split::Train, &data.train_x, &data.train_y);
        if !tr.loss_logits.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        metrics.push(tr);
        metrics.push(teacher_metrics(&model, epoch, Split::Eval, &data.eval_x, &data.eval_y));
    }
    Ok(TrainedTeacher { model, metrics })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum QuantMode {
    /// `alpha * clip(floor(a / alpha), 0, T)`.
    Floor,
    /// `clip(a, 0, T * alpha)`: the function whose derivative the STE uses.
    #[cfg_attr(not(test), allow(dead_code))]
    Smooth,
}

/// Quantized student network under training.
#[derive(Clone, Debug)]
pub(crate) struct Student {
    pub layers: Vec<Dense>,
    pub input_quant: ActQuantizer,
    pub quants: Vec<ActQuantizer>,
}

pub(crate) struct Tape {
    /// Input to each layer (post-quantization, post-noise).
    xs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    factors: Vec<Vec<f64>>,
    /// Output of each layer (post-quantization, post-noise).
    outs: Vec<Vec<f64>>,
}

impl Student {
    fn forward(&self, x_raw: &[f64], mode: QuantMode, mut noise: Option<&mut NoiseSource>) -> Tape {
        let mut cur: Vec<f64> = x_raw
            .iter()
            .map(|&v| self.input_quant.dequantize(self.input_quant.code(v)))
            .collect();
        let n = self.layers.len();
        let mut tape = Tape {
            xs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            factors: Vec::with_capacity(n),
            outs: Vec::with_capacity(n),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer.affine(&cur);
            let q = &self.quants[l];
            let mut f = vec![1.0; a.len()];
            let out: Vec<f64> = a
                .iter()
                .zip(f.iter_mut())
                .map(|(&v, fi)| {
                    let base = match mode {
                        QuantMode::Floor => q.dequantize(q.code(v)),
                        QuantMode::Smooth => v.clamp(0.0, q.levels() as f64 * q.alpha),
                    };
                    if let Some(src) = noise.as_deref_mut() {
                        *fi = src.factor();
                    }
                    base * *fi
                })
                .collect();
            tape.xs.push(std::mem::replace(&mut cur, out.clone()));
            tape.pre.push(a);
            tape.factors.push(f);
            tape.outs.push(out);
        }
        tape
    }

    fn logits<'a>(&self, tape: &'a Tape) -> &'a [f64] {
        tape.outs.last().expect("student has layers")
    }

    fn to_qnn(&self) -> Result<QnnModel> {
        let mut blocks = Vec::with_capacity(self.layers.len());
        let mut prev = self.input_quant;
        for (l, d) in self.layers.iter().enumerate() {
            blocks.push(QnnBlock::Linear(QnnLinear::new(
                d.weights.clone(),
                d.bias.clone(),
                prev,
                self.quants[l],
            )?));
            prev = self.quants[l];
        }
        QnnModel::new(self.input_quant, blocks)
    }
}

/// Per-sample distillation terms and gradients for a student.
pub(crate) struct KdTerms {
    pub logits: f64,
    pub reps: f64,
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.max(f64::MIN_POSITIVE).ln()))
        .sum()
}

/// Distillation targets of one sample: teacher distribution and hidden reps.
pub(crate) struct Target {
    p: Vec<f64>,
    reps: Vec<Vec<f64>>,
}

fn targets(teacher: &Mlp, xs: &[Vec<f64>]) -> Vec<Target> {
    xs.iter()
        .map(|x| {
            let (reps, logits) = teacher.forward(x);
            Target {
                p: softmax(&logits),
                reps,
            }
        })
        .collect()
}

/// Loss of one sample and, if `grads` is given, its gradient contribution
/// scaled by `weight`.
pub(crate) fn sample_loss(
    s: &Student,
    x: &[f64],
    t: &Target,
    lambda: f64,
    align_reps: bool,
    mode: QuantMode,
    noise: Option<&mut NoiseSource>,
    grads: Option<(&mut Grads, f64)>,
) -> KdTerms {
    let tape = s.forward(x, mode, noise);
    let q = softmax(s.logits(&tape));
    let logits_loss = kl(&t.p, &q);
    let n = s.layers.len();
    let mut reps_loss = 0.0;
    if align_reps {
        for (l, r) in t.reps.iter().enumerate() {
            reps_loss += tape.outs[l]
                .iter()
                .zip(r)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    if let Some((grads, weight)) = grads {
        let mut g: Vec<f64> = q.iter().zip(&t.p).map(|(q, p)| (q - p) * weight).collect();
        for l in (0..n).rev() {
            if l + 1 < n && align_reps && lambda != 0.0 {
                for ((gi, a), b) in g.iter_mut().zip(&tape.outs[l]).zip(&t.reps[l]) {
                    *gi += weight * lambda * 2.0 * (a - b);
                }
            }
            let ga: Vec<f64> = g
                .iter()
                .zip(&tape.factors[l])
                .zip(&tape.pre[l])
                .map(|((g, f), &a)| ste_backward(g * f, a, &s.quants[l]))
                .collect();
            grads.add_outer(l, &ga, &tape.xs[l]);
            if l > 0 {
                g = back_through(&s.layers[l], &ga);
            }
        }
    }
    KdTerms {
        logits: logits_loss,
        reps: reps_loss,
    }
}

#[derive(Clone, Debug)]
pub struct TrainedStudent {
    pub model: QnnModel,
    pub metrics: Vec<EpochMetrics>,
    /// Total loss of every optimizer step, with its two terms.
    pub step_losses: Vec<StepLoss>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub logits: f64,
    pub reps: f64,
    pub total: f64,
}

fn percentile(mut v: Vec<f64>, p: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * p).round() as usize;
    v[idx]
}

/// Initialize the student from the teacher (when shapes agree) and pick
/// activation scales from calibration statistics on the training split.
fn init_student(teacher: &Mlp, data: &ToyDataset, arch: &[usize], bits: u32, seed: u64) -> Result<Student> {
    let levels = ((1u64 << bits) - 1) as f64;
    let input_quant = ActQuantizer::new(1.0 / levels, bits)?;
    let mut layers = if teacher.arch() == arch {
        teacher.layers.clone()
    } else {
        Mlp::init(arch, &mut substream(seed, "student/init"))?.layers
    };
    let float = Mlp {
        layers: layers.clone(),
    };
    let n = layers.len();
    let mut hidden_acts: Vec<Vec<f64>> = vec![Vec::new(); n - 1];
    let mut logits_all = Vec::new();
    for x in &data.train_x {
        let (h, z) = float.forward(x);
        for (l, hl) in h.into_iter().enumerate() {
            hidden_acts[l].extend(hl);
        }
        logits_all.extend(z);
    }
    let mut quants = Vec::with_capacity(n);
    for acts in hidden_acts {
        let top = percentile(acts, 0.999).max(1e-3);
        quants.push(ActQuantizer::new(top / levels, bits)?);
    }
    // Softmax is shift-invariant: move the logits into the unsigned code range.
    let low = percentile(logits_all.clone(), 0.01);
    let high = percentile(logits_all, 0.99);
    for b in &mut layers[n - 1].bias {
        *b -= low;
    }
    quants.push(ActQuantizer::new((high - low).max(1e-3) / levels, bits)?);
    Ok(Student {
        layers,
        input_quant,
        quants,
    })
}

fn student_metrics(
    s: &Student,
    qnn: &QnnModel,
    epoch: usize,
    split: Split,
    xs: &[Vec<f64>],
    ys: &[usize],
    targets: &[Target],
    align: bool,
) -> Result<EpochMetrics> {
    let (mut lg, mut rp) = (0.0, 0.0);
    let mut hits = 0;
    for ((x, &y), t) in xs.iter().zip(ys).zip(targets) {
        let k = sample_loss(s, x, t, 0.0, align, QuantMode::Floor, None, None);
        lg += k.logits;
        rp += k.reps;
        let codes = qnn.forward(&[qnn.encode_input(x)])?;
        if predict_codes(&codes.last().expect("non-empty").codes[0]) == y {
            hits += 1;
        }
    }
    let n = xs.len().max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        split,
        loss_logits: lg / n,
        loss_reps: rp / n,
        accuracy: if xs.is_empty() { 0.0 } else { hits as f64 / n },
    })
}

/// Quantization-aware distillation of an n-bit student from a teacher.
pub fn train_student_qnn(
    teacher: &Mlp,
    data: &ToyDataset,
    arch: &[usize],
    bits: u32,
    cfg: &TrainConfig,
) -> Result<TrainedStudent> {
    let hat = (cfg.hat_noise_level > 0.0).then_some(cfg.hat_noise_level);
    train_student_inner(teacher, data, arch, bits, cfg, hat)
}

pub(crate) fn train_student_inner(
    teacher: &Mlp,
    data: &ToyDataset,
    arch: &[usize],
    bits: u32,
    cfg: &TrainConfig,
    hat: Option<f64>,
) -> Result<TrainedStudent> {
    cfg.validate()?;
    check_arch(arch)?;
    if data.train_x.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let t_arch = teacher.arch();
    let align = t_arch.len() == arch.len() && t_arch[1..arch.len() - 1] == arch[1..arch.len() - 1];
    if cfg.kd_lambda > 0.0 && !align {
        return Err(Error::Config(format!(
            "representation distillation needs matching blocks: teacher {t_arch:?}, student {arch:?}"
        )));
    }
    if arch[0] != data.dim || *arch.last().unwrap() != data.classes {
        return Err(Error::Config(format!(
            "architecture {arch:?} does not match data (dim {}, classes {})",
            data.dim, data.classes
        )));
    }

    let mut student = init_student(teacher, data, arch, bits, cfg.seed)?;
    let train_t = targets(teacher, &data.train_x);
    let eval_t = targets(teacher, &data.eval_x);
    let mut shuffle_rng = substream(cfg.seed, "student/shuffle");
    let mut noise = hat.map(|k| NoiseSource::new(k, substream(cfg.seed, "student/hat")));
    let mut opt = Optimizer::new(cfg.optimizer, &student.layers);

    let qnn = student.to_qnn()?;
    let mut metrics = vec![
        student_metrics(&student, &qnn, 0, Split::Train, &data.train_x, &data.train_y, &train_t, align)?,
        student_metrics(&student, &qnn, 0, Split::Eval, &data.eval_x, &data.eval_y, &eval_t, align)?,
    ];
    let mut step_losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        for batch in shuffled_batches(data.train_x.len(), cfg.batch_size, &mut shuffle_rng) {
            let mut grads = Grads::zeros(&student.layers);
            let w = 1.0 / batch.len() as f64;
            let (mut lg, mut rp) = (0.0, 0.0);
            for &i in &batch {
                let k = sample_loss(
                    &student,
                    &data.train_x[i],
                    &train_t[i],
                    cfg.kd_lambda,
                    align,
                    QuantMode::Floor,
                    noise.as_mut(),
                    Some((&mut grads, w)),
                );
                lg += k.logits * w;
                rp += k.reps * w;
            }
            let total = lg + cfg.kd_lambda * rp;
            if !total.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            step_losses.push(StepLoss {
                logits: lg,
                reps: rp,
                total,
            });
            opt.apply(&mut student.layers, &grads, cfg.learning_rate);
        }
        let qnn = student.to_qnn()?;
        metrics.push(student_metrics(&student, &qnn, epoch, Split::Train, &data.train_x, &data.train_y, &train_t, align)?);
        metrics.push(student_metrics(&student, &qnn, epoch, Split::Eval, &data.eval_x, &data.eval_y, &eval_t, align)?);
    }
    let mut model = student.to_qnn()?;
    model.seed = Some(cfg.seed);
    Ok(TrainedStudent {
        model,
        metrics,
        step_losses,
    })
}

/// Accuracy of a QNN on raw inputs (argmax over output codes).
pub fn qnn_accuracy(model: &QnnModel, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    if xs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (x, &y) in xs.iter().zip(ys) {
        let out = model.forward(&[model.encode_input(x)])?;
        if predict_codes(&out.last().expect("non-empty").codes[0]) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::rng::rng_from_seed;

    fn separable() -> ToyDataset {
        let mut spec = DatasetSpec::blobs(2, 2, 3);
        spec.spread = 0.15;
        spec.separation = 1.0;
        spec.generate().unwrap()
    }

    /// Logistic regression by plain gradient descent, independent of `Mlp`.
    fn logistic_oracle(d: &ToyDataset) -> f64 {
        let mut w = [0.0f64; 3];
        for _ in 0..2000 {
            let mut g = [0.0; 3];
            for (x, &y) in d.train_x.iter().zip(&d.train_y) {
                let z = w[0] * x[0] + w[1] * x[1] + w[2];
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - y as f64;
                g[0] += e * x[0];
                g[1] += e * x[1];
                g[2] += e;
            }
            for i in 0..3 {
                w[i] -= 0.5 * g[i] / d.train_x.len() as f64;
            }
        }
        let hits = d
            .eval_x
            .iter()
            .zip(&d.eval_y)
            .filter(|(x, &y)| ((w[0] * x[0] + w[1] * x[1] + w[2] > 0.0) as usize) == y)
            .count();
        hits as f64 / d.eval_x.len() as f64
    }

    #[test]
    fn teacher_learns_separable_blobs() {
        let d = separable();
        assert!(logistic_oracle(&d) >= 0.95);
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let t = train_teacher(&d, &[2, 8, 2], &cfg).unwrap();
        let last = t.metrics.last().unwrap();
        assert_eq!(last.split, Split::Eval);
        assert!(last.accuracy >= 0.95, "eval accuracy {}", last.accuracy);
    }

    #[test]
    fn zero_epochs_keeps_init() {
        let d = separable();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let t = train_teacher(&d, &[2, 4, 2], &cfg).unwrap();
        let init = Mlp::init(&[2, 4, 2], &mut substream(4, "teacher/init")).unwrap();
        assert_eq!(t.model, init);
        assert_eq!(t.metrics.len(), 2);
    }

    #[test]
    fn teacher_deterministic() {
        let d = separable();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_teacher(&d, &[2, 4, 2], &cfg).unwrap();
        let b = train_teacher(&d, &[2, 4, 2], &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn arch_mismatch_is_config_error() {
        let d = separable();
        assert!(matches!(
            train_teacher(&d, &[3, 4, 2], &TrainConfig::default()),
            Err(Error::Config(_))
        ));
        let t = train_teacher(&d, &[2, 4, 2], &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap();
        let cfg = TrainConfig {
            kd_lambda: 0.5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_student_qnn(&t.model, &d, &[2, 4, 4, 2], 4, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ste_examples() {
        let q = ActQuantizer::new(0.1, 4).unwrap();
        assert_eq!(ste_backward(0.7, 0.55, &q), 0.7);
        assert_eq!(ste_backward(0.7, -0.01, &q), 0.0);
        assert_eq!(ste_backward(0.7, 1.6, &q), 0.0);
        assert_eq!(ste_backward(0.7, 1.5, &q), 0.7);
    }

    #[test]
    fn lambda_zero_total_is_logits() {
        let d = separable();
        let tcfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let t = train_teacher(&d, &[2, 4, 2], &tcfg).unwrap();
        let cfg = TrainConfig { epochs: 2, kd_lambda: 0.0, ..TrainConfig::default() };
        let s = train_student_qnn(&t.model, &d, &[2, 4, 2], 4, &cfg).unwrap();
        assert!(s.step_losses.iter().all(|l| l.total == l.logits));

        let cfg = TrainConfig { epochs: 2, kd_lambda: 0.7, ..TrainConfig::default() };
        let s = train_student_qnn(&t.model, &d, &[2, 4, 2], 4, &cfg).unwrap();
        for l in &s.step_losses {
            assert!((l.total - (l.logits + 0.7 * l.reps)).abs() <= 1e-12);
        }
    }

    #[test]
    fn hat_zero_matches_disabled_path() {
        let d = separable();
        let t = train_teacher(&d, &[2, 4, 2], &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
        let cfg = TrainConfig { epochs: 3, kd_lambda: 0.3, seed: 5, ..TrainConfig::default() };
        let a = train_student_inner(&t.model, &d, &[2, 4, 2], 4, &cfg, Some(0.0)).unwrap();
        let b = train_student_inner(&t.model, &d, &[2, 4, 2], 4, &cfg, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(31);
        let teacher = Mlp::init(&[2, 3, 2], &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = vec![vec![0.3, 0.8], vec![0.9, 0.1], vec![0.55, 0.45]];
        let ts = targets(&teacher, &xs);
        let mut student = Student {
            layers: Mlp::init(&[2, 3, 2], &mut rng).unwrap().layers,
            input_quant: ActQuantizer::new(1.0 / 15.0, 4).unwrap(),
            quants: vec![ActQuantizer::new(0.2, 4).unwrap(), ActQuantizer::new(0.3, 4).unwrap()],
        };
        for b in &mut student.layers[1].bias {
            *b += 1.0;
        }
        let lambda = 0.5;
        let loss = |s: &Student| -> f64 {
            let w = 1.0 / xs.len() as f64;
            xs.iter()
                .zip(&ts)
                .map(|(x, t)| {
                    let k = sample_loss(s, x, t, lambda, true, QuantMode::Smooth, None, None);
                    (k.logits + lambda * k.reps) * w
                })
                .sum()
        };
        let signature = |s: &Student| -> Vec<bool> {
            xs.iter()
                .flat_map(|x| {
                    let tape = s.forward(x, QuantMode::Smooth, None);
                    tape.pre
                        .iter()
                        .zip(&s.quants)
                        .flat_map(|(p, q)| {
                            p.iter()
                                .map(|&a| (0.0..=q.levels() as f64).contains(&(a / q.alpha)))
                                .collect::<Vec<_>>()
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let mut grads = Grads::zeros(&student.layers);
        let w = 1.0 / xs.len() as f64;
        for (x, t) in xs.iter().zip(&ts) {
            sample_loss(&student, x, t, lambda, true, QuantMode::Smooth, None, Some((&mut grads, w)));
        }
        let base_sig = signature(&student);
        let h = 1e-6;
        let mut checked = 0;
        for l in 0..2 {
            let n_w = student.layers[l].weights.as_slice().len();
            for idx in 0..n_w + student.layers[l].bias.len() {
                let analytic = if idx < n_w {
                    grads.w[l].as_slice()[idx]
                } else {
                    grads.b[l][idx - n_w]
                };
                let bump = |s: &mut Student, d: f64| {
                    if idx < n_w {
                        s.layers[l].weights.as_mut_slice()[idx] += d;
                    } else {
                        s.layers[l].bias[idx - n_w] += d;
                    }
                };
                let mut plus = student.clone();
                bump(&mut plus, h);
                let mut minus = student.clone();
                bump(&mut minus, -h);
                if signature(&plus) != base_sig || signature(&minus) != base_sig {
                    continue;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let scale = analytic.abs().max(fd.abs());
                assert!(
                    (analytic - fd).abs() <= 1e-4 * scale + 1e-9,
                    "layer {l} param {idx}: analytic {analytic} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 10, "only {checked} coordinates checked");
    }
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::Serialize;

use otters_core::attention::OpCounter;
use otters_core::converter::{convert_model, verify_equivalence, EquivalenceReport, VerifyConfig, DEFAULT_BOUNDARY_EPS};
use otters_core::data::{DatasetKind, DatasetSpec};
use otters_core::decay::{build_spike_time_table, fit_decay as de_fit, read_samples_csv, synthetic_samples, DecayModelFile, FitConfig};
use otters_core::energy::{self, EnergyReport, FreeParam, LayerKind};
use otters_core::engine::{run_model, write_trace_csv};
use otters_core::io::{load_codes, load_otters, load_qnn, read_json, write_json, QnnModelFile};
use otters_core::rng::{derive_seed, substream};
use otters_core::robustness::{compare_hat, run_sweep, sweep_svg, write_sweep_csv, NamedModel};
use otters_core::synth::{random_codes, random_transformer};
use otters_core::trainer::{train_student_qnn, train_teacher, write_metrics_csv, OptimizerKind, TrainConfig};
use otters_core::{
    ConversionConfig, DecayModel, EnergyCostTable, EngineMode, Error, ModelKind, NoiseSpec, NoiseTarget, RunManifest,
    SamplingMode, SweepConfig, Workload,
};

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Infeasible { .. } | Error::CalibrationInfeasible { .. }) => 3,
            CliError::Core(_) => 2,
            CliError::Mismatch(_) => 4,
        }
    }
}

type Res = std::result::Result<(), CliError>;

/// Honor `OTTERS_THREADS` (0 or unset: all cores).
pub fn configure_threads() -> Res {
    let n = match std::env::var("OTTERS_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("OTTERS_THREADS must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

#[derive(Clone)]
pub struct Ctx {
    argv: Vec<String>,
    seed: u64,
    start: Instant,
}

impl Ctx {
    pub fn new(argv: Vec<String>, seed: u64) -> Self {
        Self {
            argv,
            seed,
            start: Instant::now(),
        }
    }

    /// Write the run manifest next to the first output.
    fn finish(&self, inputs: &[PathBuf], outputs: &[PathBuf]) -> Res {
        let Some(first) = outputs.first() else {
            return Ok(());
        };
        let m = RunManifest::new(
            self.argv.clone(),
            self.seed,
            self.start.elapsed().as_secs_f64(),
            inputs,
            outputs,
        )?;
        write_json(&RunManifest::path_for(first), &m)?;
        Ok(())
    }
}

fn create(path: &Path) -> std::result::Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }))
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Res {
    w.flush().map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_decay(path: Option<&PathBuf>) -> std::result::Result<DecayModel, CliError> {
    match path {
        Some(p) => Ok(read_json::<DecayModelFile>(p)?.model()?),
        None => Ok(DecayModel::DEVICE),
    }
}

// ---------------------------------------------------------------- fit-decay

#[derive(Args, Debug)]
#[command(after_long_help = "Input: CSV with header `t,value`.\nOutput: {\"i0\", \"tau\", \"beta\", \"i_offset\", \"fit_ssr\", \"seed\"}.")]
pub struct FitDecayArgs {
    /// Measured samples (CSV `t,value`).
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    samples: Option<PathBuf>,
    /// Fit 200 noiseless samples of the reference device instead.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 40)]
    population: usize,
    #[arg(long, default_value_t = 5000)]
    max_generations: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn fit_decay(ctx: &Ctx, a: FitDecayArgs) -> Res {
    let (samples, inputs) = match &a.samples {
        Some(p) => (read_samples_csv(p)?, vec![p.clone()]),
        None => (synthetic_samples(&DecayModel::DEVICE), vec![]),
    };
    let cfg = FitConfig {
        population: a.population,
        max_generations: a.max_generations,
        seed: ctx.seed,
        ..FitConfig::default()
    };
    let fit = de_fit(&samples, &cfg)?;
    let m = fit.model;
    println!(
        "i0 = {}\ntau = {}\nbeta = {}\ni_offset = {}\nssr = {:e} after {} generations{}",
        m.i0,
        m.tau,
        m.beta,
        m.i_offset,
        fit.ssr,
        fit.generations,
        if fit.converged { "" } else { " (not converged)" }
    );
    write_json(&a.out, &DecayModelFile::from_model(&m, Some(fit.ssr), Some(ctx.seed)))?;
    ctx.finish(&inputs, &[a.out])
}

// ---------------------------------------------------------------- table

#[derive(Args, Debug)]
#[command(after_long_help = "Input: decay model JSON (default: the reference device).\nOutput: {\"T\", \"times\", \"values\"}.")]
pub struct TableArgs {
    #[arg(long)]
    decay: Option<PathBuf>,
    /// Number of logical steps.
    #[arg(long = "T", default_value_t = 15)]
    window: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn table(ctx: &Ctx, a: TableArgs) -> Res {
    let d = load_decay(a.decay.as_ref())?;
    let t = build_spike_time_table(&d, a.window)?;
    println!("k,t_k,O(t_k)");
    for (k, (tk, v)) in t.times.iter().zip(&t.values).enumerate() {
        println!("{k},{tk},{v}");
    }
    match a.out {
        Some(out) => {
            write_json(&out, &t)?;
            ctx.finish(&a.decay.into_iter().collect::<Vec<_>>(), &[out])
        }
        None => Ok(()),
    }
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
#[command(after_long_help = "Output: QNN model JSON with its seed and dataset recorded.\nMetrics: CSV `epoch,split,loss_logits,loss_reps,accuracy`.")]
pub struct TrainArgs {
    #[arg(long, default_value = "blobs")]
    dataset: String,
    /// Layer widths, input first and classes last.
    #[arg(long, value_delimiter = ',', default_value = "8,16,4")]
    arch: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value_t = 0.0)]
    kd_lambda: f64,
    /// HAT noise level applied to activations during student training.
    #[arg(long, default_value_t = 0.0)]
    hat: f64,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long)]
    out: PathBuf,
    /// Student metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Full-precision teacher JSON.
    #[arg(long)]
    teacher_out: Option<PathBuf>,
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> Res {
    if a.arch.len() < 2 {
        return Err(CliError::Usage("--arch needs at least input and output widths".into()));
    }
    let kind: DatasetKind = a.dataset.parse()?;
    let dim = a.arch[0];
    let classes = *a.arch.last().unwrap();
    let spec = match kind {
        DatasetKind::Blobs => DatasetSpec::blobs(dim, classes, ctx.seed),
        DatasetKind::Moons => DatasetSpec::moons(dim, ctx.seed),
    };
    let data = spec.generate()?;
    let optimizer = match a.optimizer.as_str() {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        o => return Err(CliError::Usage(format!("unknown optimizer `{o}` (adam|sgd)"))),
    };
    let base = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        kd_lambda: a.kd_lambda,
        hat_noise_level: 0.0,
        seed: ctx.seed,
        optimizer,
    };
    let teacher = train_teacher(&data, &a.arch, &base)?;
    let student = train_student_qnn(
        &teacher.model,
        &data,
        &a.arch,
        a.bits,
        &TrainConfig {
            hat_noise_level: a.hat,
            ..base
        },
    )?;
    let t_acc = teacher.model.accuracy(&data.eval_x, &data.eval_y);
    let s_acc = otters_core::trainer::qnn_accuracy(&student.model, &data.eval_x, &data.eval_y)?;
    println!("teacher eval accuracy {t_acc:.4}\nstudent eval accuracy {s_acc:.4} ({}-bit)", a.bits);
    let mut model = student.model;
    model.seed = Some(ctx.seed);
    model.dataset = Some(spec);
    write_json(&a.out, &QnnModelFile::from_model(&model))?;
    let mut outputs = vec![a.out];
    if let Some(p) = a.metrics {
        let mut w = create(&p)?;
        write_metrics_csv(&mut w, &student.metrics)?;
        flush(w, &p)?;
        outputs.push(p);
    }
    if let Some(p) = a.teacher_out {
        write_json(&p, &teacher.model)?;
        outputs.push(p);
    }
    ctx.finish(&[], &outputs)
}

// ---------------------------------------------------------------- convert

#[derive(Args, Debug)]
#[command(after_long_help = "Input: QNN model JSON, optional decay model JSON.\nOutput: Otters model JSON.")]
pub struct ConvertArgs {
    #[arg(long)]
    qnn: PathBuf,
    #[arg(long)]
    decay: Option<PathBuf>,
    /// Default sampling mode recorded in the model.
    #[arg(long, default_value = "physical")]
    mode: SamplingMode,
    #[arg(long, default_value_t = DEFAULT_BOUNDARY_EPS)]
    boundary_eps: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn convert(ctx: &Ctx, a: ConvertArgs) -> Res {
    let q = load_qnn(&a.qnn)?;
    let d = load_decay(a.decay.as_ref())?;
    let cfg = ConversionConfig {
        bits: q.bits,
        sampling_mode: a.mode,
        boundary_eps: a.boundary_eps,
    };
    let o = convert_model(&q, &cfg, &d)?;
    println!("converted {} blocks, T = {}", o.layers.len(), o.window);
    write_json(&a.out, &o)?;
    let mut inputs = vec![a.qnn];
    inputs.extend(a.decay);
    ctx.finish(&inputs, &[a.out])
}

// ---------------------------------------------------------------- run

#[derive(Args, Debug)]
#[command(after_long_help = "Input: Otters model JSON, codes JSON [[int..]..] (rows are tokens; samples for MLPs).\nOutput: codes JSON; optional trace CSV `layer,neuron,k` with a per-layer summary.")]
pub struct RunArgs {
    #[arg(long)]
    snn: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "physical")]
    mode: SamplingMode,
    #[arg(long)]
    noise_target: Option<NoiseTarget>,
    #[arg(long, default_value_t = 0.0)]
    noise_level: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, a: RunArgs) -> Res {
    let o = load_otters(&a.snn)?;
    let input = load_codes(&a.input)?;
    let mut mode = EngineMode {
        sampling: a.mode,
        noise: None,
    };
    if let Some(t) = a.noise_target {
        mode = mode.with_noise(NoiseSpec::new(a.noise_level, t, derive_seed(ctx.seed, "run/noise"))?);
    }
    let r = run_model(&o, &input, &mode)?;
    for s in &r.stats {
        println!("layer {}: {} spikes over {} neurons, s_r = {:.5}", s.layer, s.spikes, s.neurons, s.spike_rate);
    }
    println!("mean s_r = {:.5}", r.mean_spike_rate(o.window));
    write_json(&a.out, &r.outputs)?;
    let mut outputs = vec![a.out];
    if let Some(p) = a.trace {
        let mut w = create(&p)?;
        write_trace_csv(&mut w, &r)?;
        flush(w, &p)?;
        outputs.push(p);
    }
    ctx.finish(&[a.snn, a.input], &outputs)
}

// ---------------------------------------------------------------- verify

#[derive(Args, Debug)]
#[command(after_long_help = "Input: QNN model JSON and its converted Otters model JSON.\nOutput (optional): report JSON with every mismatch.\nExit 4 when a mismatch is not explained by a floor-boundary flag.")]
pub struct VerifyArgs {
    #[arg(long)]
    qnn: PathBuf,
    #[arg(long)]
    snn: PathBuf,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value = "ideal")]
    mode: SamplingMode,
    #[arg(long, default_value_t = DEFAULT_BOUNDARY_EPS)]
    boundary_eps: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn verify(ctx: &Ctx, a: VerifyArgs) -> Res {
    let q = load_qnn(&a.qnn)?;
    let o = load_otters(&a.snn)?;
    let cfg = VerifyConfig {
        mode: a.mode,
        boundary_eps: a.boundary_eps,
        ..VerifyConfig::new(a.trials, ctx.seed)
    };
    let rep: EquivalenceReport = verify_equivalence(&q, &o, &cfg)?;
    println!(
        "{} mismatches ({} unexplained) over {} neurons; {} boundary-flagged ({:.3e}); max membrane error {:e}",
        rep.mismatch_count(),
        rep.unexplained(),
        rep.neurons_checked,
        rep.boundary_flagged,
        rep.flagged_fraction(),
        rep.max_membrane_error
    );
    if let Some(p) = &a.out {
        write_json(p, &rep)?;
        ctx.finish(&[a.qnn.clone(), a.snn.clone()], std::slice::from_ref(p))?;
    }
    if rep.unexplained() > 0 {
        return Err(CliError::Mismatch(format!("{} unexplained mismatches", rep.unexplained())));
    }
    Ok(())
}

// ---------------------------------------------------------------- attention-demo

#[derive(Args, Debug)]
#[command(after_long_help = "Builds a random linear -> attention -> linear model, converts it and compares\nevery block's spiking codes with the QNN reference. Output (optional): summary JSON.")]
pub struct AttentionDemoArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    d_k: usize,
    #[arg(long, default_value_t = 1)]
    kv_bits: u32,
    #[arg(long, default_value_t = 4)]
    seq: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value = "ideal")]
    mode: SamplingMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct DemoSummary {
    mode: SamplingMode,
    kv_bits: u32,
    blocks: usize,
    mismatched_codes: usize,
    ops: OpCounter,
    qnn_output: Vec<Vec<u32>>,
    snn_output: Vec<Vec<u32>>,
}

pub fn attention_demo(ctx: &Ctx, a: AttentionDemoArgs) -> Res {
    let mut rng = substream(ctx.seed, "attention-demo/model");
    let q = random_transformer(&mut rng, a.dim, a.heads, a.d_k, a.kv_bits, a.classes, a.bits)?;
    let o = convert_model(&q, &ConversionConfig::new(a.bits), &DecayModel::DEVICE)?;
    let mut rng = substream(ctx.seed, "attention-demo/input");
    let x = random_codes(&mut rng, a.seq, a.dim, &q.input_quant);
    let reference = q.forward(&x)?;
    let mode = EngineMode {
        sampling: a.mode,
        noise: None,
    };
    let r = run_model(&o, &x, &mode)?;
    let mut mismatched = 0;
    for (b, (qb, sb)) in reference.iter().zip(&r.block_codes).enumerate() {
        let n = qb.codes.iter().flatten().zip(sb.iter().flatten()).filter(|(x, y)| x != y).count();
        println!("block {b}: {n} code mismatches");
        mismatched += n;
    }
    let ops = r.ops;
    println!(
        "kernel ops: {} additions, {} subtractions, {} lookups, {} multiplications, {} scale ops",
        ops.additions, ops.subtractions, ops.lookups, ops.multiplications, ops.scale_ops
    );
    if let Some(p) = &a.out {
        write_json(
            p,
            &DemoSummary {
                mode: a.mode,
                kv_bits: a.kv_bits,
                blocks: o.layers.len(),
                mismatched_codes: mismatched,
                ops,
                qnn_output: reference.last().map(|b| b.codes.clone()).unwrap_or_default(),
                snn_output: r.outputs.clone(),
            },
        )?;
        ctx.finish(&[], std::slice::from_ref(p))?;
    }
    if mismatched > 0 && a.mode == SamplingMode::Ideal {
        return Err(CliError::Mismatch(format!("{mismatched} codes differ from the QNN reference")));
    }
    Ok(())
}

// ---------------------------------------------------------------- energy

#[derive(Args, Debug)]
#[command(after_long_help = "Workload JSON: {\"B\", \"S\", \"C_i\", \"C_o\", \"h\", \"d_k\", \"T\", \"n\", \"s_r\", \"fc_layers\"?}\n(default: BERT-base block, B=64 S=128 C=768 h=12 d_k=64 T=15, with --s-r).\nCosts JSON: any subset of the cost table fields in pJ.\nOutput (optional): JSON with one block report per model.")]
pub struct EnergyArgs {
    /// otters, fp32, qbert, snn, ttfs or all.
    #[arg(long, default_value = "all")]
    model: String,
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Override the workload spike rate.
    #[arg(long)]
    s_r: Option<f64>,
    /// Override the workload timestep count.
    #[arg(long = "T")]
    timesteps: Option<f64>,
    /// Override the number of FC layers per block.
    #[arg(long)]
    fc_layers: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_workload(
    path: Option<&PathBuf>,
    s_r: Option<f64>,
    fc_layers: Option<u32>,
) -> std::result::Result<Workload, CliError> {
    let mut w = match path {
        Some(p) => read_json::<Workload>(p)?,
        None => Workload::bert_base(
            s_r.ok_or_else(|| CliError::Usage("without --workload, --s-r is required".into()))?,
        ),
    };
    if let Some(s) = s_r {
        w.s_r = s;
    }
    if let Some(f) = fc_layers {
        w.fc_layers = f;
    }
    Ok(w)
}

fn load_costs(path: Option<&PathBuf>) -> std::result::Result<EnergyCostTable, CliError> {
    let c = match path {
        Some(p) => read_json::<EnergyCostTable>(p)?,
        None => EnergyCostTable::default(),
    };
    c.validate()?;
    Ok(c)
}

fn kinds(s: &str) -> std::result::Result<Vec<ModelKind>, CliError> {
    if s == "all" {
        Ok(ModelKind::ALL.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

fn print_layer(r: &EnergyReport) {
    for t in &r.terms {
        println!("    {:<18} {:>9} {:>14.6}", t.name, format!("{:?}", t.category).to_lowercase(), t.mj);
    }
    println!("    {:<18} {:>9} {:>14.6}", "total", "", r.total_mj);
}

pub fn energy(ctx: &Ctx, a: EnergyArgs) -> Res {
    let mut w = load_workload(a.workload.as_ref(), a.s_r, a.fc_layers)?;
    if let Some(t) = a.timesteps {
        w.timesteps = t;
    }
    let c = load_costs(a.costs.as_ref())?;
    println!(
        "workload B={} S={} C_i={} C_o={} h={} d_k={} T={} n={} s_r={} fc_layers={}",
        w.batch, w.seq, w.c_in, w.c_out, w.h, w.d_k, w.timesteps, w.n, w.s_r, w.fc_layers
    );
    println!(
        "reuse factor gamma = {}; threshold read = {} bits, binary K/V = {} bits, at {} pJ/bit",
        c.reuse_factor, c.threshold_bits, c.binarykv_bits, c.e_weight_access_per_bit
    );
    let mut reports = Vec::new();
    for kind in kinds(&a.model)? {
        let b = energy::attention_block_total(kind, &w, &c)?;
        println!("\n{kind}  (mJ)");
        println!("  FC layer");
        print_layer(&b.fc);
        println!("  score kernel");
        print_layer(&b.score);
        println!(
            "  block: {} x FC {:.6} + {} x score {:.6} = {:.6}  (compute {:.6}, data {:.6}, analog {:.6}); FP32 / this = {:.3}x",
            b.fc_layers,
            b.fc.total_mj,
            b.score_kernels,
            b.score.total_mj,
            b.total_mj,
            b.compute_mj,
            b.data_mj,
            b.analog_mj,
            b.ratio_vs_fp32
        );
        reports.push(b);
    }
    if let Some(p) = &a.out {
        write_json(p, &reports)?;
        let inputs: Vec<PathBuf> = a.workload.iter().chain(a.costs.iter()).cloned().collect();
        ctx.finish(&inputs, std::slice::from_ref(p))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- calibrate

#[derive(Args, Debug)]
#[command(after_long_help = "Bisection on s_r or the reuse factor so that one layer's energy equals --target (mJ).\nOutput (optional): {\"value\", \"energy_mj\", \"iterations\"}. Exit 3 when the target is out of reach.")]
pub struct CalibrateArgs {
    /// Target energy in mJ.
    #[arg(long)]
    target: f64,
    /// s_r or reuse_factor.
    #[arg(long, default_value = "s_r")]
    param: String,
    #[arg(long, default_value = "otters")]
    model: ModelKind,
    /// fc or score.
    #[arg(long, default_value = "fc")]
    layer: String,
    #[arg(long)]
    lo: Option<f64>,
    #[arg(long)]
    hi: Option<f64>,
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    costs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn calibrate(ctx: &Ctx, a: CalibrateArgs) -> Res {
    let param: FreeParam = a.param.parse()?;
    let layer = match a.layer.as_str() {
        "fc" => LayerKind::Fc,
        "score" => LayerKind::Score,
        o => return Err(CliError::Usage(format!("unknown layer `{o}` (fc|score)"))),
    };
    let kind = a.model;
    let w = load_workload(a.workload.as_ref(), a.workload.is_none().then_some(0.0), None)?;
    let c = load_costs(a.costs.as_ref())?;
    let (dlo, dhi) = match param {
        FreeParam::SpikeRate if kind.is_ttfs_family() => (0.0, 1.0 / w.timesteps),
        FreeParam::SpikeRate => (0.0, 1.0),
        FreeParam::ReuseFactor => (0.0, 10.0),
    };
    let bounds = (a.lo.unwrap_or(dlo), a.hi.unwrap_or(dhi));
    let cal = energy::calibrate(a.target, param, bounds, kind, layer, &w, &c)?;
    match param {
        FreeParam::SpikeRate => println!(
            "{kind} {:?}: s_r = {:.7} (s_r * T = {:.4}, {}) gives {:.6} mJ",
            layer,
            cal.value,
            cal.value * w.timesteps,
            if cal.value * w.timesteps <= 1.0 { "at most one spike per neuron" } else { "more than one spike per neuron" },
            cal.energy_mj
        ),
        FreeParam::ReuseFactor => println!("{kind} {:?}: reuse factor = {:.6} gives {:.6} mJ", layer, cal.value, cal.energy_mj),
    }
    if let Some(p) = &a.out {
        write_json(p, &cal)?;
        let inputs: Vec<PathBuf> = a.workload.iter().chain(a.costs.iter()).cloned().collect();
        ctx.finish(&inputs, std::slice::from_ref(p))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- noise-sweep

#[derive(Args, Debug)]
#[command(after_long_help = "Sweep spec JSON: {\"targets\"?, \"levels\", \"trials\"?, \"seed\"?, \"dataset\", \"models\": [{\"name\", \"path\", \"hat_level\"?}]}.\nModel paths are relative to the spec file. --seed, when given, replaces the spec seed.\nOutputs: CSV `model,target,level,mean,std,n_trials`, optional JSON detail and SVG plot.")]
pub struct NoiseSweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Name of the baseline model for the HAT comparison.
    #[arg(long)]
    baseline: Option<String>,
}

pub fn noise_sweep(ctx: &Ctx, a: NoiseSweepArgs, seed_given: bool) -> Res {
    let mut cfg: SweepConfig = read_json(&a.spec)?;
    if seed_given {
        cfg.seed = ctx.seed;
    }
    let ctx = &Ctx {
        seed: cfg.seed,
        ..ctx.clone()
    };
    let dir = a.spec.parent().unwrap_or(Path::new("."));
    let mut inputs = vec![a.spec.clone()];
    let mut models = Vec::new();
    for m in &cfg.models {
        let p = dir.join(&m.path);
        models.push(NamedModel {
            name: m.name.clone(),
            hat_level: m.hat_level,
            model: load_otters(&p)?,
        });
        inputs.push(p);
    }
    let r = run_sweep(&models, &cfg)?;
    for (name, acc) in &r.clean {
        println!("{name}: clean accuracy {acc:.4}");
    }
    for c in &r.cells {
        println!(
            "{:<12} {:<13} {:<6} {:.4} +/- {:.4}{}",
            c.model,
            c.target.to_string(),
            c.level,
            c.mean,
            c.std,
            if c.failed_trials > 0 { format!("  ({} failed trials)", c.failed_trials) } else { String::new() }
        );
    }
    let mut w = create(&a.csv)?;
    write_sweep_csv(&mut w, &r)?;
    flush(w, &a.csv)?;
    let mut outputs = vec![a.csv.clone()];
    if let Some(p) = &a.json {
        write_json(p, &r)?;
        outputs.push(p.clone());
    }
    if let Some(p) = &a.svg {
        std::fs::write(p, sweep_svg(&r)).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        outputs.push(p.clone());
    }
    if let Some(base) = &a.baseline {
        let hat: Vec<(String, f64)> = models
            .iter()
            .filter(|m| &m.name != base)
            .map(|m| (m.name.clone(), m.hat_level))
            .collect();
        let cmp = compare_hat(&r, base, &hat)?;
        for d in &cmp.deltas {
            println!("delta {} - {base} at {} {}: {:+.4} (pooled std {:.4})", d.model, d.target, d.level, d.delta, d.pooled_std);
        }
        for (t, ok) in &cmp.crossover {
            println!("crossover at top {t} level: {}", if *ok { "holds" } else { "does not hold" });
        }
    }
    ctx.finish(&inputs, &outputs)
}

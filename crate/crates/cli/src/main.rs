//! `otters`: command-line front end for decay fitting, conversion,
//! spiking inference, energy estimation and noise sweeps.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

const SCHEMAS: &str = "\
File formats (JSON unless noted; unknown fields are rejected):
  decay samples (CSV)  header `t,value`, one sample per row
  decay model          {\"i0\", \"tau\", \"beta\", \"i_offset\", \"fit_ssr\"?, \"seed\"?}
  spike-time table     {\"T\", \"times\": [..], \"values\": [..]}
  QNN model            {\"bits\", \"input_quant\": {\"alpha\"}, \"layers\": [block..], \"seed\"?, \"dataset\"?}
                         linear block    {\"type\": \"linear\", \"weights\": [[..]] (outputs x inputs),
                                          \"bias\", \"alpha_out\", \"binary_scale\"?}
                         attention block {\"type\": \"attention\", \"heads\", \"d_k\", \"kv_bits\",
                                          \"wq\", \"wk\", \"wv\": linear, \"wo\": linear + \"alpha_in\"}
  Otters model         {\"bits\", \"T\", \"table\", \"decay\", \"input_alpha\", \"sampling_mode\",
                        \"boundary_eps\", \"layers\": [{\"type\": \"linear\", \"gamma\", \"bias\",
                        \"alpha_in\", \"alpha_out\", \"window\", \"binary_scale\"?} | attention]}
  codes                [[int..]..], one row per token (per sample for MLPs)
  trace (CSV)          `layer,neuron,k`, then `# summary` and `layer,neurons,spikes,s_r,late_drops`
  metrics (CSV)        `epoch,split,loss_logits,loss_reps,accuracy`
  energy workload      {\"B\", \"S\", \"C_i\", \"C_o\", \"h\", \"d_k\", \"T\", \"n\", \"s_r\", \"fc_layers\"?}
  energy costs         any subset of the cost table fields (pJ); missing fields take defaults
  sweep spec           {\"targets\"?: [\"decay_output\"|\"tau\"|\"beta\"], \"levels\": [..], \"trials\"?,
                        \"seed\"?, \"dataset\": {..}, \"models\": [{\"name\", \"path\", \"hat_level\"?}]}
  sweep result (CSV)   `model,target,level,mean,std,n_trials`
  manifest             {\"command\", \"seed\", \"version\", \"duration_s\", \"inputs\", \"outputs\"}
                       written to `<first output>.manifest.json` by every command that writes files

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 infeasible,
4 verification mismatch.
Environment: OTTERS_THREADS caps worker threads (0 or unset = all cores).";

#[derive(Parser, Debug)]
#[command(name = "otters", version, about = "Optoelectronic TTFS spiking network toolkit", after_long_help = SCHEMAS)]
struct Cli {
    /// Root seed; every random stream is derived from it by a fixed label.
    /// Defaults to 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the stretched-exponential decay model by differential evolution.
    FitDecay(FitDecayArgs),
    /// Build the spike-time table for a decay model.
    Table(TableArgs),
    /// Train a teacher MLP and distill a quantized student.
    Train(TrainArgs),
    /// Convert a QNN model into an Otters spiking model.
    Convert(ConvertArgs),
    /// Run spiking inference on input codes.
    Run(RunArgs),
    /// Check QNN/SNN equivalence on random inputs.
    Verify(VerifyArgs),
    /// Convert and run a random attention model against its QNN reference.
    AttentionDemo(AttentionDemoArgs),
    /// Itemized energy report for one or all model kinds.
    Energy(EnergyArgs),
    /// Solve for the spike rate or reuse factor that yields a target energy.
    Calibrate(CalibrateArgs),
    /// Accuracy under injected decay-output, tau and beta noise.
    NoiseSweep(NoiseSweepArgs),
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    let seed_given = cli.seed.is_some();
    let ctx = Ctx::new(argv, cli.seed.unwrap_or(0));
    let res = match cli.command {
        Command::FitDecay(a) => fit_decay(&ctx, a),
        Command::Table(a) => table(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Convert(a) => convert(&ctx, a),
        Command::Run(a) => run(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
        Command::AttentionDemo(a) => attention_demo(&ctx, a),
        Command::Energy(a) => energy(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
        Command::NoiseSweep(a) => noise_sweep(&ctx, a, seed_given),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

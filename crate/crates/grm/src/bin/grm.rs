//! Command-line front end: dataset synthesis, training, evaluation, the
//! bias-ratio sweep, the ablation driver, and the complexity benchmark.
//! Everything here is a thin wrapper over the library; see the crate
//! examples for programmatic use.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use grm::synth::{generate_mix_shift, generate_sp_motif, MixShiftConfig, MotifConfig};
use grm::trainer::{
    complexity_smoke, evaluate, load_dataset, load_trained, run_ablation, run_bias_sweep, train,
    write_ablation_report, write_eval_report, write_sweep_report, write_training_log,
    ExperimentConfig, Method,
};

#[derive(Parser)]
#[command(name = "grm", about = "Invariant-subgraph generation experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Mix,
    Motif,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic distribution-shift benchmark bundle.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        /// Mixing weight of the domain-keyed features (mix benchmark).
        #[arg(long, default_value_t = 0.0)]
        bias_ratio: f64,
        /// Base-motif agreement rate on the training split (motif benchmark).
        #[arg(long, default_value_t = 0.9)]
        b: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model from a JSON experiment config and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step training-log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset bundle and write a report CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train every method over a grid of bias ratios and write a CSV table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated bias ratios, e.g. 0,0.1,0.5,0.9.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated methods (default: GRM,ERM).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Compare the full model against its degenerate variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Time one generation+classification forward+backward per graph size.
    Bench {
        /// Comma-separated node counts, e.g. 50,100,200.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
}

fn run(cli: Cli) -> grm::Result<()> {
    match cli.command {
        Command::Synth {
            kind,
            out,
            bias_ratio,
            b,
            seed,
        } => {
            let ds = match kind {
                SynthKind::Mix => generate_mix_shift(&MixShiftConfig {
                    bias_ratio,
                    seed,
                    ..MixShiftConfig::default()
                })?,
                SynthKind::Motif => generate_sp_motif(&MotifConfig {
                    b,
                    seed,
                    ..MotifConfig::default()
                })?,
            };
            grm::bundle::write_bundle(&ds, &out)?;
            println!(
                "wrote {} examples ({} classes) to {}",
                ds.examples.len(),
                ds.num_classes,
                out.display()
            );
            Ok(())
        }
        Command::Train { config, out, log } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let ds = load_dataset(&cfg.dataset)?;
            let result = train(&cfg, &ds)?;
            let d_x = ds.examples[0].graph.feature_dim();
            grm::trainer::save_trained(&result.trained, &cfg, d_x, ds.num_classes, ds.task, &out)?;
            if let Some(log_path) = log {
                write_training_log(&result.log, log_path)?;
            }
            let (l_s, l_r, l_d) = result.final_epoch_means;
            println!(
                "trained {} for {} epochs; final-epoch means: l_s {:.4} l_r {:.4} l_d {:.4}",
                cfg.method.as_str(),
                cfg.epochs,
                l_s,
                l_r,
                l_d
            );
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let (trained, cfg) = load_trained(&ckpt)?;
            let ds = grm::bundle::read_bundle(&data)?;
            let eval = evaluate(&trained, &ds, &cfg, cfg.seed)?;
            write_eval_report(&eval, cfg.metric, &report)?;
            println!(
                "{}: min {:.4} avg {:.4} over {} test domains",
                cfg.metric.as_str(),
                eval.min,
                eval.avg,
                eval.per_domain.len()
            );
            Ok(())
        }
        Command::Sweep {
            config,
            ratios,
            report,
            methods,
        } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let methods = match methods {
                Some(names) => names
                    .iter()
                    .map(|n| Method::parse(n))
                    .collect::<grm::Result<Vec<_>>>()?,
                None => vec![Method::Grm, Method::Erm],
            };
            let rows = run_bias_sweep(&cfg, &ratios, &methods)?;
            write_sweep_report(&rows, &report)?;
            println!("wrote {} sweep rows to {}", rows.len(), report.display());
            Ok(())
        }
        Command::Ablate { config, report } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let rows = run_ablation(&cfg)?;
            write_ablation_report(&rows, &report)?;
            println!("wrote {} ablation rows to {}", rows.len(), report.display());
            Ok(())
        }
        Command::Bench { sizes } => {
            let report = complexity_smoke(&sizes)?;
            println!("nodes,seconds");
            for row in &report.rows {
                println!("{},{:.6}", row.nodes, row.seconds);
            }
            println!("max doubling ratio: {:.2}", report.max_doubling_ratio);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

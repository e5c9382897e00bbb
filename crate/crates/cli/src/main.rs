use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csft::config::RunConfig;
use csft::pipeline::{self, Ablation, Method};

#[derive(Parser)]
#[command(name = "csft", about = "Causal source-free transformer experiments on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Re-seeds the run (model, batching, augmentation and both domains).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Run directory; overrides `out_dir` from the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    CSftrans,
    Shot,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Comparison,
    TaskEpochs,
    Lambda,
    Families,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source/target splits and the style datasets.
    Generate(Common),
    /// Vendor-side training on the source split.
    TrainSource {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "c-sftrans")]
        method: MethodArg,
    },
    /// Fit head weights on the vendor model and report CIS.
    SelectHeads(Common),
    /// Source-free adaptation of the vendor model on unlabeled target images.
    Adapt(Common),
    /// Accuracy of the vendor and adapted models on the test splits.
    Eval(Common),
    /// Paired method comparison and hyperparameter sweeps over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        which: AblationArg,
    },
    /// Source/target domain gap of the adapted model.
    ADistance(Common),
}

fn resolve(c: &Common) -> csft::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: serde::Serialize>(value: &T) -> csft::Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> csft::Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let files = pipeline::cmd_generate(&resolve(&c)?)?;
            print(&files)
        }
        Command::TrainSource { common, method } => {
            let method = match method {
                MethodArg::CSftrans => Method::CSFTrans,
                MethodArg::Shot => Method::Shot,
            };
            let records = pipeline::cmd_train_source(&resolve(&common)?, method)?;
            match records.last() {
                Some(r) => print(r),
                None => Ok(()),
            }
        }
        Command::SelectHeads(c) => print(&pipeline::cmd_select_heads(&resolve(&c)?)?),
        Command::Adapt(c) => {
            let (records, halted) = pipeline::cmd_adapt(&resolve(&c)?)?;
            if let Some(r) = records.last() {
                print(r)?;
            }
            match halted {
                Some(msg) => Err(csft::Error::Contract(format!("adaptation halted: {msg}"))),
                None => Ok(()),
            }
        }
        Command::Eval(c) => print(&pipeline::cmd_eval(&resolve(&c)?)?),
        Command::Ablate { common, which } => {
            let which: Vec<Ablation> = match which {
                AblationArg::Comparison => vec![Ablation::Comparison],
                AblationArg::TaskEpochs => vec![Ablation::TaskEpochs],
                AblationArg::Lambda => vec![Ablation::Lambda],
                AblationArg::Families => vec![Ablation::Families],
                AblationArg::All => Ablation::ALL.to_vec(),
            };
            for (a, rows) in pipeline::cmd_ablate(&resolve(&common)?, &which)? {
                for r in rows {
                    println!("{},{},{:.6},{:.6}", a.name(), r.setting, r.mean, r.stderr);
                }
            }
            Ok(())
        }
        Command::ADistance(c) => print(&pipeline::cmd_a_distance(&resolve(&c)?)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={}", e.kind(), serde_json::to_string(&message).unwrap_or(message));
            ExitCode::FAILURE
        }
    }
}

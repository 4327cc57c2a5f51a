use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use datadream::config::ExperimentConfig;
use datadream::pipeline::{Pipeline, Stage, StageError, Variant};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "datadream", version, about = "Few-shot dataset synthesis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; defaults are used for missing keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set mixture.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum RegimeArg {
    Dset,
    Cls,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MethodArg {
    Datadream,
    ZeroShot,
    NoisedReal,
}

impl MethodArg {
    fn key(self) -> &'static str {
        match self {
            MethodArg::Datadream => "datadream",
            MethodArg::ZeroShot => "zero_shot",
            MethodArg::NoisedReal => "noised_real",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum AxisArg {
    M,
    K,
}

#[derive(Args, Debug)]
struct VariantArgs {
    /// Source of the synthetic images.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Weight of the real loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Synthetic images per class.
    #[arg(long)]
    per_class: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base generator on its pretraining corpus.
    PretrainGenerator {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastively train the two-tower classifier.
    PretrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Fit generator adapters on the few-shot set.
    Dream {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
    },
    /// Sample a synthetic training set.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Fine-tune classifier adapters on real and synthetic data.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Report test accuracy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArgs,
        /// Evaluate the pretrained classifier without fine-tuning.
        #[arg(long)]
        zero_shot: bool,
    },
    /// Per-class Fréchet distance between synthetic and real images.
    Fid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Accuracy over synthetic-set size (m) or shots (k).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn list<T: ToString>(xs: &[T]) -> String {
    format!("[{}]", xs.iter().map(T::to_string).collect::<Vec<_>>().join(", "))
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::PretrainGenerator { .. } => Stage::PretrainGenerator,
            Command::PretrainClassifier { .. } => Stage::PretrainClassifier,
            Command::Dream { .. } => Stage::Dream,
            Command::Generate { .. } => Stage::Generate,
            Command::TrainClassifier { .. } => Stage::TrainClassifier,
            Command::Evaluate { .. } => Stage::Evaluate,
            Command::Fid { .. } => Stage::Fid,
            Command::Sweep { .. } => Stage::Sweep,
        }
    }

    /// Config file and overrides, with subcommand flags turned into overrides.
    fn resolved(&self) -> (Option<PathBuf>, Vec<String>) {
        let mut extra = Vec::new();
        let variant = |v: &VariantArgs, extra: &mut Vec<String>| {
            if let Some(m) = v.method {
                extra.push(format!("generation.method={}", m.key()));
            }
            if let Some(l) = v.lambda {
                extra.push(format!("mixture.lambda={l:?}"));
            }
            if let Some(n) = v.per_class {
                extra.push(format!("generation.per_class={n}"));
            }
        };
        let common = match self {
            Command::PretrainGenerator { common } | Command::PretrainClassifier { common } => common,
            Command::Dream { common, regime } => {
                if let Some(r) = regime {
                    extra.push(format!("dream.regime={}", if matches!(r, RegimeArg::Dset) { "dset" } else { "cls" }));
                }
                common
            }
            Command::Generate { common, method, per_class } | Command::Fid { common, method, per_class } => {
                if let Some(m) = method {
                    extra.push(format!("generation.method={}", m.key()));
                }
                if let Some(n) = per_class {
                    extra.push(format!("generation.per_class={n}"));
                }
                common
            }
            Command::TrainClassifier { common, variant: v } | Command::Evaluate { common, variant: v, .. } => {
                variant(v, &mut extra);
                common
            }
            Command::Sweep {
                common,
                axis,
                values,
                seeds,
            } => {
                if let Some(a) = axis {
                    extra.push(format!("eval.sweep_axis={}", if matches!(a, AxisArg::M) { "m" } else { "k" }));
                }
                if !values.is_empty() {
                    extra.push(format!("eval.sweep_values={}", list(values)));
                }
                if !seeds.is_empty() {
                    extra.push(format!("eval.sweep_seeds={}", list(seeds)));
                }
                common
            }
        };
        let mut overrides = common.overrides.clone();
        overrides.extend(extra);
        (common.config.clone(), overrides)
    }
}

fn load_config(path: Option<PathBuf>, overrides: &[String]) -> datadream::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(&p, overrides),
        None => {
            let mut cfg = ExperimentConfig::from_toml_str("", overrides)?;
            if let Ok(root) = std::env::var(datadream::config::OUTPUT_ROOT_ENV) {
                if !root.is_empty() {
                    cfg.output_root = root.into();
                }
            }
            Ok(cfg)
        }
    }
}

fn run(command: &Command, cfg: ExperimentConfig) -> Result<(), StageError> {
    let stage = command.stage();
    let mut p = Pipeline::open(cfg)
        .map_err(|source| StageError { stage, source })?
        .with_log(|msg| eprintln!("{msg}"));
    let scope = p.scope();
    let variant = Variant {
        method: p.cfg.generation.method,
        lambda: p.cfg.mixture.lambda,
        per_class: p.cfg.generation.per_class,
    };
    match command {
        Command::PretrainGenerator { .. } => {
            let r = p.pretrain_generator()?;
            println!("{}", r.dir.display());
        }
        Command::PretrainClassifier { .. } => {
            let r = p.pretrain_classifier()?;
            println!("{}", r.dir.display());
        }
        Command::Dream { .. } => {
            let d = p.cfg.dream.clone();
            let r = p.dream(scope, &d)?;
            println!("{}", r.dir.display());
        }
        Command::Generate { .. } => {
            let r = p.generate(scope, variant.method, variant.per_class)?;
            println!("{}", r.dir.display());
        }
        Command::TrainClassifier { .. } => {
            let r = p.train_classifier(scope, variant)?;
            println!("{}", r.dir.display());
        }
        Command::Evaluate { zero_shot, .. } => {
            let rec = p.evaluate(scope, (!zero_shot).then_some(variant))?;
            println!("{}", datadream::classifier::records_table(&[rec]).trim_end());
        }
        Command::Fid { .. } => {
            let report = p.fid(scope, variant.method, variant.per_class)?;
            print!("{}", report.to_csv());
            println!("mean,{}", report.mean());
        }
        Command::Sweep { .. } => {
            let res = p.sweep()?;
            print!("{}", res.to_csv());
            for t in &res.trends {
                println!(
                    "# seed {} {:?} spearman {}",
                    t.seed,
                    t.setting,
                    t.spearman.map_or("undefined".to_string(), |r| format!("{r:.3}"))
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    let (path, overrides) = cli.command.resolved();
    let cfg = match load_config(path, &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: invalid configuration: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(&cli.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

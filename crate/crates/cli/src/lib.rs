//! `nsl`: train, evaluate, fold and probe neural-similarity networks.
//!
//! Every subcommand prints `key=value` lines on success and exits 0. Usage
//! errors print clap's message and exit 2; any other failure prints one
//! line `error kind=<kind> message=<JSON string>` on stderr and exits 1.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use nsl_core::fewshot::Strategy;
use nsl_core::gradcheck::SuiteSize;
use nsl_core::gradflow::FlowMode;
use nsl_core::nn::{PredictorSpec, SimilaritySpec, Variant};
use nsl_core::similarity::SimilarityKind;
use nsl_core::{Error, Result};

use config::{defaults, read_config, EvalRun, FewshotRun, GradflowRun, NetworkChoice, TrainRun, CONFIG_FILE};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "nsl", version, about = "Neural similarity learning experiments", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random choice (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write model.ckpt, metrics.csv and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// small, CNN-4, CNN-9, CNN-10, baselineCNN or baselineCNN++.
        #[arg(long)]
        preset: Option<String>,
        /// Similarity for every convolution: identity, diagonal,
        /// unconstrained, block_diagonal_shared, cholesky_psd, shape_masked,
        /// dns or uns.
        #[arg(long)]
        similarity: Option<String>,
        /// Initialize from a checkpoint, matching tensors by name.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Two-phase schedule: epochs with only similarities trained, then
        /// epochs with everything trained.
        #[arg(long, num_args = 2, value_names = ["PHASE1", "PHASE2"])]
        phases: Option<Vec<usize>>,
        /// Learn kernel shapes of shape-masked layers.
        #[arg(long)]
        learn_shape: bool,
    },
    /// Error rate of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Take data and seed from a training run's directory.
        #[arg(long, conflicts_with = "config")]
        from_run: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient family.
    Gradcheck {
        #[arg(long, default_value = "small", value_parser = ["small", "full"])]
        size: String,
    },
    /// Few-shot episodes with the static, dynamic or meta strategy.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["static", "dynamic", "meta"])]
        strategy: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Meta-training episodes.
        #[arg(long)]
        outer_steps: Option<usize>,
    },
    /// Gradient-flow trajectory of a random least-squares problem.
    Gradflow {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["standard", "nsl"])]
        mode: Option<String>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fold static similarities into plain convolution kernels.
    Fold { input: PathBuf, output: PathBuf },
    /// Numerical checks of global similarity and self-attention.
    AttnDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

fn parse_similarity(s: &str) -> Result<SimilaritySpec> {
    Ok(match s {
        "dns" => SimilaritySpec::Dynamic { predictor: PredictorSpec::new(Variant::Dns) },
        "uns" => SimilaritySpec::Dynamic { predictor: PredictorSpec::new(Variant::Uns) },
        other => SimilaritySpec::Static {
            kind: serde_json::from_value::<SimilarityKind>(serde_json::Value::String(other.to_string()))
                .map_err(|_| Error::Argument(format!("unknown similarity {other:?}")))?,
        },
    })
}

fn load_or_default<T: serde::de::DeserializeOwned>(path: &Option<PathBuf>, fallback: &str) -> Result<T> {
    match path {
        Some(p) => read_config(p),
        None => defaults(fallback),
    }
}

fn enum_value<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| Error::Argument(e.to_string()))
}

fn dispatch(command: Command) -> Result<(Vec<String>, bool)> {
    match command {
        Command::Train { common, epochs, lr, batch_size, preset, similarity, pretrained, phases, learn_shape } => {
            let mut run: TrainRun = load_or_default(&common.config, "{}")?;
            run.seed = common.seed.unwrap_or(run.seed);
            run.output_dir = common.out.unwrap_or(run.output_dir);
            run.train.epochs = epochs.unwrap_or(run.train.epochs);
            run.train.lr = lr.unwrap_or(run.train.lr);
            run.train.batch_size = batch_size.unwrap_or(run.train.batch_size);
            run.train.learn_shape |= learn_shape;
            if preset.is_some() {
                run.network = NetworkChoice { preset, spec: None, similarity: run.network.similarity };
            }
            if let Some(s) = similarity {
                run.network.similarity = Some(parse_similarity(&s)?);
            }
            run.pretrained = pretrained.or(run.pretrained);
            if let Some(p) = phases {
                run.phases = Some([p[0], p[1]]);
            }
            run.train.validate()?;
            Ok((commands::train_cmd(&run)?, true))
        }
        Command::Eval { common, checkpoint, from_run } => {
            let save = common.out.is_some() || common.config.is_some();
            let mut run: EvalRun = match (&common.config, from_run) {
                (Some(p), _) => read_config(p)?,
                (None, Some(dir)) => {
                    let t: TrainRun = read_config(&dir.join(CONFIG_FILE))?;
                    EvalRun { seed: t.seed, output_dir: dir.join("eval"), data: t.data, checkpoint: dir.join("model.ckpt") }
                }
                (None, None) => {
                    let ck = checkpoint.clone().ok_or_else(|| Error::Argument("eval needs --checkpoint, --config or --from-run".into()))?;
                    let mut r: EvalRun = defaults(r#"{"checkpoint": ""}"#)?;
                    r.checkpoint = ck;
                    r
                }
            };
            run.seed = common.seed.unwrap_or(run.seed);
            run.output_dir = common.out.unwrap_or(run.output_dir);
            run.checkpoint = checkpoint.unwrap_or(run.checkpoint);
            Ok((commands::eval_cmd(&run, save)?, true))
        }
        Command::Gradcheck { size } => commands::gradcheck_cmd(size.parse::<SuiteSize>()?),
        Command::Fewshot { common, strategy, episodes, ways, shots, pretrained, outer_steps } => {
            let mut run: FewshotRun = match (&common.config, &strategy) {
                (Some(p), _) => read_config(p)?,
                (None, Some(s)) => defaults(&format!(r#"{{"strategy": "{s}"}}"#))?,
                (None, None) => return Err(Error::Argument("fewshot needs --strategy or --config".into())),
            };
            if let Some(s) = strategy {
                run.strategy = enum_value::<Strategy>(&s)?;
            }
            run.seed = common.seed.unwrap_or(run.seed);
            run.output_dir = common.out.unwrap_or(run.output_dir);
            run.episodes = episodes.unwrap_or(run.episodes);
            run.ways = ways.unwrap_or(run.ways);
            run.shots = shots.unwrap_or(run.shots);
            run.pretrained = pretrained.or(run.pretrained);
            run.meta.outer_steps = outer_steps.unwrap_or(run.meta.outer_steps);
            Ok((commands::fewshot_cmd(&run)?, true))
        }
        Command::Gradflow { common, mode, dt, steps } => {
            let mut run: GradflowRun = load_or_default(&common.config, "{}")?;
            if let Some(m) = mode {
                run.mode = enum_value::<FlowMode>(&m)?;
            }
            run.seed = common.seed.unwrap_or(run.seed);
            run.output_dir = common.out.unwrap_or(run.output_dir);
            run.dt = dt.unwrap_or(run.dt);
            run.steps = steps.unwrap_or(run.steps);
            Ok((commands::gradflow_cmd(&run)?, true))
        }
        Command::Fold { input, output } => Ok((commands::fold_cmd(&input, &output)?, true)),
        Command::AttnDemo { seed, trials } => commands::attn_demo_cmd(seed, trials),
    }
}

/// Run the command line `argv` (program name first), printing results, and
/// return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok((lines, ok)) => {
            for l in &lines {
                println!("{l}");
            }
            if ok {
                0
            } else {
                eprintln!("error kind=check_failed message={}", serde_json::Value::String("one or more checks failed".into()));
                EXIT_FAILURE
            }
        }
        Err(e) => {
            eprintln!("error kind={} message={}", e.kind(), serde_json::Value::String(e.to_string()));
            EXIT_FAILURE
        }
    }
}

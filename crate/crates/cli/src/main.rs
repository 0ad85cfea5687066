//! `mindkit`: data generation, training, decoding, reconstruction,
//! evaluation, reporting and the invariant suite from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mindkit::commands;
use mindkit::pipeline::{PipelineConfig, Stage, Variant, ALL_STAGES};
use mindkit::suite::{registry, SuiteContext};
use mindkit::Error;

#[derive(Parser, Debug)]
#[command(name = "mindkit", version, about = "Two-stage image reconstruction from simulated brain responses")]
struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory shared by every command.
    #[arg(long, short = 'd', global = true, default_value = "mindkit-data")]
    dataset: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes, images, captions and subject seeds.
    GenData(GenData),
    /// Train the autoencoder, the contrastive encoder and the denoiser.
    Train(Train),
    /// Simulate voxel responses and fit per-subject decoders.
    FitDecoders(FitDecoders),
    /// Reconstruct the test items of one subject.
    Reconstruct(Reconstruct),
    /// Score the reconstructions of a run directory.
    Evaluate(Evaluate),
    /// Write per-subject tables, image grids and the variant summary.
    Report(Report),
    /// Run the invariant suite and write check-results.json.
    Check(Check),
    /// Print the effective configuration as JSON.
    ShowConfig,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    voxels: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Autoencoder,
    Encoder,
    Denoiser,
    All,
}

#[derive(Args, Debug)]
struct Train {
    /// Models to train (repeatable); default all.
    #[arg(long, value_enum)]
    stage: Vec<StageArg>,
    /// Epochs for every trained model.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FitDecoders {
    /// Subject seed or index (repeatable); default all.
    #[arg(long)]
    subject: Vec<u64>,
    #[arg(long)]
    keep_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablation {
    WithoutControl,
    WithoutZ,
}

#[derive(Args, Debug)]
struct Reconstruct {
    /// Subject seed or index.
    #[arg(long)]
    subject: u64,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    #[arg(long)]
    t_start_frac: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stage2_stride: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Parallel items; capped by MINDKIT_THREADS.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run directory; default `<dataset>/runs/<subject>/<variant>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args, Debug)]
struct Report {
    /// Output directory; default `<dataset>/report`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Check {
    /// Module or `module.name` to run; default all.
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value = "check-results.json")]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::BadRange(_) | Error::BadFraction(_) | Error::OutOfRange(_) => 2,
        Error::UpstreamMissing { .. } | Error::HashMismatch { .. } | Error::StaleFeatureCache { .. } => 3,
        Error::NonFinite(_) | Error::NonFiniteLoss(_) | Error::SingularSystem => 4,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> mindkit::Result<PipelineConfig> {
    let Some(p) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("config {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("config {}: {e}", p.display())))
}

/// `requested` (0 = default) capped by `MINDKIT_THREADS`.
fn thread_cap(requested: usize) -> mindkit::Result<usize> {
    let cap = match std::env::var("MINDKIT_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Usage(format!("MINDKIT_THREADS must be a positive integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    Ok(match (requested, cap) {
        (0, Some(c)) => c,
        (r, Some(c)) => r.min(c),
        (r, None) => r,
    })
}

fn print_json<T: serde::Serialize>(v: &T) -> mindkit::Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn stages(args: &[StageArg]) -> Vec<Stage> {
    let mut out = Vec::new();
    for a in args {
        let add: &[Stage] = match a {
            StageArg::Autoencoder => &[Stage::Autoencoder],
            StageArg::Encoder => &[Stage::Encoder],
            StageArg::Denoiser => &[Stage::Denoiser],
            StageArg::All => &ALL_STAGES,
        };
        for s in add {
            if !out.contains(s) {
                out.push(*s);
            }
        }
    }
    if out.is_empty() {
        out = ALL_STAGES.to_vec();
    }
    out
}

fn run(cli: Cli) -> mindkit::Result<bool> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let data = cli.dataset.as_path();
    match cli.command {
        Command::GenData(a) => {
            let d = &mut cfg.data;
            d.n_train = a.train.unwrap_or(d.n_train);
            d.n_test = a.test.unwrap_or(d.n_test);
            d.n_subjects = a.subjects.unwrap_or(d.n_subjects);
            d.seed = a.seed.unwrap_or(d.seed);
            d.sim.n_voxels = a.voxels.unwrap_or(d.sim.n_voxels);
            if d.n_train == 0 || d.n_test == 0 || d.n_subjects == 0 {
                return Err(Error::Usage("--train, --test and --subjects must be positive".into()));
            }
            let hash = commands::gen_data(data, &cfg.data)?;
            eprintln!("dataset written to {}", data.display());
            print_json(&serde_json::json!({ "dataset_hash": hash }))?;
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            if let Some(e) = a.epochs {
                t.autoencoder_train.epochs = e;
                t.encoder_train.epochs = e;
                t.denoiser_train.epochs = e;
            }
            t.seed = a.seed.unwrap_or(t.seed);
            print_json(&commands::train(data, &cfg.train, &stages(&a.stage))?)?;
        }
        Command::FitDecoders(a) => {
            cfg.decode.keep_fraction = a.keep_fraction.unwrap_or(cfg.decode.keep_fraction);
            print_json(&commands::fit_decoders(data, &cfg.decode, &a.subject)?)?;
        }
        Command::Reconstruct(a) => {
            let r = &mut cfg.reconstruct;
            r.t_start_frac = a.t_start_frac.unwrap_or(r.t_start_frac);
            r.iterations = a.iterations.unwrap_or(r.iterations);
            r.seed = a.seed.unwrap_or(r.seed);
            r.stride = a.stage2_stride.unwrap_or(r.stride);
            r.threshold = a.threshold.unwrap_or(r.threshold);
            r.lr = a.lr.unwrap_or(r.lr);
            let variant = match a.ablate {
                None => Variant::Full,
                Some(Ablation::WithoutControl) => Variant::WithoutControl,
                Some(Ablation::WithoutZ) => Variant::WithoutZ,
            };
            let jobs = thread_cap(a.jobs.unwrap_or(cfg.jobs))?;
            let out = commands::reconstruct(data, a.subject, variant, &cfg.reconstruct, &cfg.metrics, a.out.as_deref(), jobs)?;
            eprintln!("run written to {}", out.dir.display());
            print_json(&out.metrics.aggregate)?;
        }
        Command::Evaluate(a) => {
            print_json(&commands::evaluate(data, &a.run, &cfg.metrics)?.aggregate)?;
        }
        Command::Report(a) => {
            print_json(&commands::report(data, a.out.as_deref())?)?;
        }
        Command::Check(a) => {
            let summary = data.join("report").join("summary.json");
            let ctx = SuiteContext {
                seed: a.seed,
                trials: a.trials,
                dataset: summary.exists().then(|| data.to_path_buf()),
            };
            let results = registry::run_invariant_suite(a.module.as_deref(), &ctx);
            if results.is_empty() {
                return Err(Error::Usage(format!("no checks match `{}`", a.module.unwrap_or_default())));
            }
            eprint!("{}", registry::summary_table(&results));
            mindkit::store::write_json(&a.out, &results)?;
            return Ok(results.iter().all(|r| r.status != registry::Status::Failed));
        }
        Command::ShowConfig => print_json(&cfg)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

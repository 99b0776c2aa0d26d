use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use r3_core::data::{LabeledImage, Split};
use r3_core::eval::{check_writable, ensemble_accuracy, test_accuracy, Stage};
use r3_core::feedback::{read_jsonl, RatingRecord, RatingServer, Renderer};
use r3_core::pipeline::{self, PipelineConfig, Workspace};
use r3_core::protopnet::ProtoPNet;
use r3_core::reward::Fusion;

#[derive(Parser, Debug)]
#[command(name = "r3", version, about = "Prototype network training with reward-guided prototype repair")]
struct Cli {
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Artifact root directory.
    #[arg(long, global = true, env = "R3_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing artifacts instead of failing.
    #[arg(long, global = true)]
    force: bool,
    /// Repeat for more log output.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or ingest) and augment the dataset.
    SynthGen(SynthArgs),
    /// Train the base model.
    Train(TrainArgs),
    /// Serve the rating API and UI for the base model.
    ServeRatings(ServeArgs),
    /// Rate tasks automatically with the object-mask oracle.
    OracleRate(OracleArgs),
    /// Turn ratings into train/test pairwise comparisons.
    BuildComparisons(ComparisonArgs),
    /// Train the reward model on the comparisons.
    TrainReward(RewardArgs),
    /// Reweigh and reselect prototypes.
    R2(R3Args),
    /// R2 followed by retraining.
    R3(R3Args),
    /// Evaluate one stage's model.
    Eval(EvalArgs),
    /// Accuracy of a logit-averaging ensemble.
    EnsembleEval(EnsembleArgs),
    /// Every step from synth-gen to the three evaluations.
    RunAll,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Read a `<class>/<image>` folder tree instead of generating shapes.
    #[arg(long)]
    folder: Option<PathBuf>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    push_period: Option<usize>,
    #[arg(long)]
    prototypes_per_class: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Built rating UI bundle to serve at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct ComparisonArgs {
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct RewardArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `linear` or `pointwise`.
    #[arg(long)]
    fusion: Option<String>,
}

#[derive(Args, Debug)]
struct R3Args {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda_dist: Option<f64>,
    /// Retraining epochs (r3 only).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    stage: String,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    /// Comma-separated stage names or checkpoint paths.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<String>,
    /// Report file name inside the reports directory.
    #[arg(long, default_value = "ensemble.json")]
    name: String,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    apply_overrides(&mut cfg, &cli.command)?;
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_overrides(cfg: &mut PipelineConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::SynthGen(a) => {
            set(&mut cfg.dataset.num_classes, a.classes);
            set(&mut cfg.dataset.per_class, a.per_class);
            set(&mut cfg.dataset.image_size, a.image_size);
            if let Some(folder) = &a.folder {
                cfg.dataset.source = pipeline::DataSource::Folder;
                cfg.dataset.path = Some(folder.clone());
            }
            if a.no_augment {
                cfg.dataset.augment = false;
            }
        }
        Command::Train(a) => {
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.warmup_epochs, a.warmup_epochs);
            set(&mut cfg.train.push_period, a.push_period);
            set(&mut cfg.model.prototypes_per_class, a.prototypes_per_class);
            set(&mut cfg.model.depth, a.depth);
            // Warm-up cannot outlast training.
            cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(cfg.train.epochs);
        }
        Command::ServeRatings(a) => set(&mut cfg.port, a.port),
        Command::OracleRate(a) => set(&mut cfg.feedback.oracle_ratings, a.n),
        Command::BuildComparisons(a) => set(&mut cfg.feedback.test_fraction, a.test_fraction),
        Command::TrainReward(a) => {
            set(&mut cfg.reward.epochs, a.epochs);
            set(&mut cfg.reward.lr, a.lr);
            set(&mut cfg.reward.batch_size, a.batch_size);
            if let Some(f) = &a.fusion {
                cfg.reward.fusion = match f.as_str() {
                    "linear" => Fusion::Linear,
                    "pointwise" => Fusion::Pointwise { hidden: 16 },
                    other => bail!("--fusion must be `linear` or `pointwise`, got `{other}`"),
                };
            }
        }
        Command::R2(a) | Command::R3(a) => {
            set(&mut cfg.r3.gamma, a.gamma);
            set(&mut cfg.r3.alpha, a.alpha);
            set(&mut cfg.r3.beta, a.beta);
            set(&mut cfg.r3.lambda_dist, a.lambda_dist);
            set(&mut cfg.retrain.epochs, a.epochs);
            cfg.retrain.warmup_epochs = cfg.retrain.warmup_epochs.min(cfg.retrain.epochs);
        }
        _ => {}
    }
    Ok(())
}

#[derive(Serialize)]
struct EnsembleReport {
    models: Vec<String>,
    member_accuracy: Vec<f64>,
    test_accuracy: f64,
}

fn resolve_model(ws: &Workspace, name: &str) -> Result<ProtoPNet> {
    match name.parse::<Stage>() {
        Ok(stage) => Ok(ws.load_model(stage)?),
        Err(_) => {
            let path = Path::new(name);
            if !path.exists() {
                bail!("model `{name}` is neither a stage name nor an existing checkpoint file");
            }
            Ok(ProtoPNet::load(path)?)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ws = Workspace::new(&cfg.output_dir, cli.force);
    match &cli.command {
        Command::PrintConfig => print!("{}", toml::to_string_pretty(&cfg)?),
        Command::SynthGen(_) => {
            pipeline::prepare_data(&ws, &cfg)?;
            println!("{}", ws.dataset_manifest().display());
        }
        Command::Train(_) => {
            let data = ws.load_dataset()?;
            let outcome = pipeline::train_base(&ws, &cfg, &data)?;
            let test: Vec<&LabeledImage> = data.split(Split::Test).collect();
            println!(
                "{}: test accuracy {:.4} (best epoch {})",
                ws.model(Stage::Base).display(),
                test_accuracy(&outcome.model, &test)?,
                outcome.best_epoch
            );
        }
        Command::ServeRatings(a) => {
            let data = ws.load_dataset()?;
            let model = ws.load_model(Stage::Base)?;
            let service = Arc::new(pipeline::feedback_service(&ws, &cfg, &model, &data)?);
            let renderer = Arc::new(Renderer::new(model, &data));
            let server = RatingServer::start(&format!("{}:{}", a.host, cfg.port), service, renderer, a.static_dir.clone())?;
            println!("serving on http://{}", server.addr());
            server.join();
        }
        Command::OracleRate(_) => {
            let data = ws.load_dataset()?;
            let model = ws.load_model(Stage::Base)?;
            let ratings = pipeline::oracle_rate(&ws, &cfg, &model, &data, cfg.feedback.oracle_ratings)?;
            println!("{}: {} ratings", ws.ratings().display(), ratings.len());
        }
        Command::BuildComparisons(_) => {
            if !ws.ratings().exists() {
                bail!("{} does not exist; run `oracle-rate` or `serve-ratings` first", ws.ratings().display());
            }
            let ratings: Vec<RatingRecord> = read_jsonl(&ws.ratings())?;
            let (train, test) = pipeline::comparisons(&ws, &cfg, &ratings)?;
            println!("{} train / {} test comparisons", train.len(), test.len());
        }
        Command::TrainReward(_) => {
            let data = ws.load_dataset()?;
            let model = ws.load_model(Stage::Base)?;
            let (train, test) = ws.load_comparisons()?;
            let (_, curve) = pipeline::reward(&ws, &cfg, &model, &data, &train, &test)?;
            let last = curve.last().context("reward training ran zero epochs")?;
            println!(
                "{}: train accuracy {:.4}, test accuracy {}",
                ws.reward_model().display(),
                last.train_accuracy,
                last.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
        Command::R2(_) => {
            let data = ws.load_dataset()?;
            let (base, net) = (ws.load_model(Stage::Base)?, ws.load_reward()?);
            let (_, changes) = pipeline::r2(&ws, &cfg, &base, &net, &data)?;
            summarise_changes(&ws, Stage::R2, &changes);
        }
        Command::R3(_) => {
            let data = ws.load_dataset()?;
            let (base, net) = (ws.load_model(Stage::Base)?, ws.load_reward()?);
            let (_, changes, _) = pipeline::r3(&ws, &cfg, &base, &net, &data)?;
            summarise_changes(&ws, Stage::R3, &changes);
        }
        Command::Eval(a) => {
            let stage: Stage = a.stage.parse()?;
            let data = ws.load_dataset()?;
            let (model, net) = (ws.load_model(stage)?, ws.load_reward()?);
            let r = pipeline::evaluate(&ws, stage, &model, &net, &data)?;
            println!(
                "{stage}: accuracy {:.4}, mean reward {:.4}, top5 {:.3}, top10 {:.3}",
                r.test_accuracy, r.mean_reward, r.mismatch.top5, r.mismatch.top10
            );
        }
        Command::EnsembleEval(a) => {
            let data = ws.load_dataset()?;
            let models = a.models.iter().map(|m| resolve_model(&ws, m)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ProtoPNet> = models.iter().collect();
            let test: Vec<&LabeledImage> = data.split(Split::Test).collect();
            let report = EnsembleReport {
                models: a.models.clone(),
                member_accuracy: refs.iter().map(|m| test_accuracy(m, &test)).collect::<r3_core::Result<_>>()?,
                test_accuracy: ensemble_accuracy(&refs, &test)?,
            };
            let path = ws.reports_dir().join(&a.name);
            check_writable(&path, ws.force)?;
            std::fs::create_dir_all(ws.reports_dir())?;
            std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
            println!("{}: ensemble accuracy {:.4}", path.display(), report.test_accuracy);
        }
        Command::RunAll => {
            let run = pipeline::run_all(&ws, &cfg)?;
            for r in &run.reports {
                println!(
                    "{}: accuracy {:.4}, mean reward {:.4}, top5 {:.3}, top10 {:.3}, peak in mask {}",
                    r.stage,
                    r.test_accuracy,
                    r.mean_reward,
                    r.mismatch.top5,
                    r.mismatch.top10,
                    r.peak_in_mask.map_or("n/a".into(), |v| format!("{v:.3}"))
                );
            }
        }
    }
    Ok(())
}

fn summarise_changes(ws: &Workspace, stage: Stage, changes: &[r3_core::r3::ChangeEntry]) {
    use r3_core::r3::Action;
    let count = |a: Action| changes.iter().filter(|c| c.action == a).count();
    println!(
        "{}: {} kept, {} reweighed, {} reselected",
        ws.model(stage).display(),
        count(Action::Kept),
        count(Action::Reweighed),
        count(Action::Reselected)
    );
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

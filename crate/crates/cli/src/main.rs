use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use motionseg::ablate::{ablate, parse_axes};
use motionseg::autodiff::Checkpoint;
use motionseg::config::Config;
use motionseg::dataset::{generate_split, Dataset, Split};
use motionseg::eval::evaluate;
use motionseg::model::Model;
use motionseg::train::{train, TrainConfig};
use motionseg::visualize::visualize;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "motionseg", version, about = "Motion-aided box-supervised instance segmentation on synthetic moving shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split.
    GenData(GenData),
    /// Train a model on a generated split.
    Train(TrainCmd),
    /// Evaluate a checkpoint with COCO mask and box AP.
    Eval(EvalCmd),
    /// Train and evaluate ablation variants.
    Ablate(AblateCmd),
    /// Write diagnostic images for one sample.
    Visualize(VisualizeCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML configuration file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Number of samples; defaults to the configured split size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.iterations {
            t.iterations = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Training split; defaults to `train.train_data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Model configuration; defaults to the `config.toml` written next to
    /// the checkpoint by `train`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for `eval.json` and `eval.txt`; defaults to the
    /// checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Comma-separated axes: none, components, fusion, all, det-motion,
    /// mask-motion, pair-flow, det-fusion, mask-fusion.
    #[arg(long, default_value = "none")]
    axes: String,
    /// Training split; defaults to `train.train_data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation split; defaults to `train.val_data`.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct VisualizeCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn gen_data(cmd: &GenData) -> Result<()> {
    let cfg = Config::resolve(cmd.config.config.as_deref())?;
    let (split, n) = match cmd.split {
        SplitArg::Train => (Split::Train, cmd.n.unwrap_or(cfg.data.train_samples)),
        SplitArg::Val => (Split::Val, cmd.n.unwrap_or(cfg.data.val_samples)),
    };
    let summary = generate_split(&cfg.scene, split, n, &cmd.out)?;
    println!("{}: {summary}", cmd.out.display());
    Ok(())
}

fn train_cmd(cmd: &TrainCmd) -> Result<()> {
    let mut cfg = Config::resolve(cmd.config.config.as_deref())?.train;
    if let Some(d) = &cmd.data {
        cfg.train_data = d.clone();
    }
    cmd.overrides.apply(&mut cfg);
    let outcome = train(&cfg, &cmd.out, cmd.resume.as_deref())?;
    if let Some(r) = &outcome.last_report {
        println!("step {}: total {:.4} (detection {:.4}, projection {:.4}, pairwise {:.4})", r.step, r.total, r.detection, r.projection, r.pairwise);
    }
    println!("{} steps; checkpoint {}", outcome.steps, outcome.final_checkpoint.display());
    Ok(())
}

/// Directory holding the training run that produced `checkpoint`.
fn run_dir(checkpoint: &Path) -> PathBuf {
    let dir = checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    if dir.file_name().is_some_and(|n| n == "checkpoints") {
        dir.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        dir
    }
}

fn run_config(checkpoint: &Path, config: Option<&Path>) -> Result<TrainConfig> {
    Ok(match config {
        Some(p) => Config::load(p)?.train,
        None => {
            let p = run_dir(checkpoint).join("config.toml");
            let text = fs::read_to_string(&p).map_err(|e| format!("cannot read model config {} ({e}); pass --config", p.display()))?;
            toml::from_str::<TrainConfig>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
    })
}

fn load_model(checkpoint: &Path, train_cfg: TrainConfig) -> Result<Model> {
    let ck = Checkpoint::load(checkpoint).map_err(|e| format!("{}: {e}", checkpoint.display()))?;
    let mut model = Model::new(train_cfg.model, train_cfg.seed)?;
    model.load_checkpoint(&ck)?;
    Ok(model)
}

fn eval_cmd(cmd: &EvalCmd) -> Result<()> {
    let model = load_model(&cmd.checkpoint, run_config(&cmd.checkpoint, cmd.config.as_deref())?)?;
    let data = Dataset::open(&cmd.data)?;
    let result = evaluate(&model, &data)?;
    let out = cmd.out.clone().unwrap_or_else(|| run_dir(&cmd.checkpoint));
    fs::create_dir_all(&out)?;
    fs::write(out.join("eval.json"), result.to_json())?;
    fs::write(out.join("eval.txt"), format!("{result}\n"))?;
    println!("{result}");
    Ok(())
}

fn ablate_cmd(cmd: &AblateCmd) -> Result<()> {
    let axes = parse_axes(&cmd.axes)?;
    let mut cfg = Config::resolve(cmd.config.config.as_deref())?.train;
    if let Some(d) = &cmd.data {
        cfg.train_data = d.clone();
    }
    cmd.overrides.apply(&mut cfg);
    let eval_data = cmd.eval_data.clone().unwrap_or_else(|| cfg.val_data.clone());
    fs::create_dir_all(&cmd.out)?;
    let table = ablate(&cfg, &axes, &eval_data, &cmd.out, |v| eprintln!("training variant: {v}"))?;
    print!("{table}");
    println!("wrote {}", cmd.out.join("ablation.csv").display());
    Ok(())
}

fn visualize_cmd(cmd: &VisualizeCmd) -> Result<()> {
    let cfg = run_config(&cmd.checkpoint, cmd.config.as_deref())?;
    let params = cfg.supervision.clone();
    let model = load_model(&cmd.checkpoint, cfg)?;
    let data = Dataset::open(&cmd.data)?;
    let sample = data.load(cmd.index)?;
    for p in visualize(&model, &sample, &params, &cmd.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train_cmd(c),
        Command::Eval(c) => eval_cmd(c),
        Command::Ablate(c) => ablate_cmd(c),
        Command::Visualize(c) => visualize_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

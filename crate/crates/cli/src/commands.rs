use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use dmll_core::dataset::{
    compute_stats, load_vocabulary, synthesize_label_sets, DeterminedDataset, FullDataset,
    LabelCountConfig,
};
use dmll_core::io::{read_labels, write_atomic, EmbeddingTable};
use dmll_core::metrics::{class_ap_csv, evaluate, ScoreMatrix};
use dmll_core::oracle::{
    check_expected_loss, check_gradients, check_metrics, check_unbiased, synth_generate_draw,
    SyntheticWorld, WorldShape,
};
use dmll_core::prompt::{
    build_similarity_index, EmbeddingProvider, FileProvider, PromptTemplate, SyntheticProvider,
};
use dmll_core::trainer::{train, PromptSetup, TrainConfig, TrainHistory};
use dmll_core::{generate_determined, LabelVocabulary, LossMode, ModelParams, Weighting};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dmll_core::Error),
    #[error("{0} check failed")]
    CheckFailed(&'static str),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::CheckFailed(_) => "check_failed",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "dmll",
    version,
    about = "Determined multi-label learning pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a full dataset and its determined counterpart.
    Generate(GenerateArgs),
    /// Write an embedding file for every prompt a run can ask for, using the
    /// synthetic provider.
    Embed(EmbedArgs),
    /// Train a model on a determined dataset.
    Train(TrainArgs),
    /// Score a fully labelled dataset with a saved model.
    Eval(EvalArgs),
    /// Run one of the built-in numerical checks.
    Verify(VerifyArgs),
    /// Render a training history as a CSV table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum Source {
    /// Logistic world with informative features.
    World,
    /// Label-count model with uninformative features.
    LabelCounts,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "world")]
    source: Source,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Size of an additional fully labelled held-out draw (world source only).
    #[arg(long, default_value_t = 0)]
    heldout: usize,
    /// Mean label-set size (label-counts source only).
    #[arg(long, default_value_t = 1.38)]
    mean_labels: f64,
    #[arg(long, default_value_t = 2.0)]
    weight_scale: f64,
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    bias_mean: f64,
    #[arg(long, default_value_t = 0.5)]
    bias_std: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("target_source").required(true).args(["targets", "data"])))]
struct EmbedArgs {
    /// Target label file, one label per line.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Take the target labels from a dataset header instead.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Large vocabulary file searched for similar labels.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    provider_seed: u64,
    #[arg(long, default_value_t = 3)]
    sigma: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ProviderKind {
    Synthetic,
    File,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Determined training set (JSON lines).
    #[arg(long)]
    train: PathBuf,
    /// Fully labelled held-out set for per-epoch metrics.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Feature sidecar for instances without inline features.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "synthetic")]
    provider: ProviderKind,
    #[arg(long, required_if_eq("provider", "file"))]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    provider_seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    prompt_update_period: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 5e-2)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    adam_beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    adam_beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_epsilon: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    sigma: usize,
    #[arg(long, default_value = "rc")]
    loss_mode: LossMode,
    #[arg(long, default_value = "corrected")]
    weighting: Weighting,
    #[arg(long, default_value_t = dmll_core::risk::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Let gradients flow through the recovered soft labels.
    #[arg(long)]
    soft_label_gradient: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Fully labelled dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Write per-class average precision here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum Check {
    #[value(name = "eq5", alias = "expected-loss")]
    #[serde(rename = "eq5")]
    ExpectedLoss,
    Unbiased,
    Metrics,
    Grad,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    check: Check,
    /// Largest k for the expected-loss check; number of classes for unbiased.
    #[arg(long)]
    k: Option<usize>,
    /// Feature dimension of the unbiasedness worlds.
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Trials per k (expected loss), random matrices (metrics), model configurations
    /// (grad) or worlds (unbiased).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// `history.json` written by `train`.
    #[arg(long)]
    history: PathBuf,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string(value).expect("serializable output")
    );
}

fn print_config(command: &str, config: &impl Serialize) {
    print_json(&json!({ "command": command, "config": config }));
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable output");
    text.push('\n');
    write_text(path, &text)
}

fn load_sidecar(path: Option<&Path>) -> Result<Option<EmbeddingTable>> {
    Ok(path.map(EmbeddingTable::load).transpose()?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => generate(&args),
        Command::Embed(args) => embed(&args),
        Command::Train(args) => train_command(&args),
        Command::Eval(args) => eval(&args),
        Command::Verify(args) => verify(&args),
        Command::Report(args) => report(&args),
    }
}

fn generate(args: &GenerateArgs) -> Result<()> {
    print_config("generate", args);
    let dir = &args.out_dir;
    let full = match args.source {
        Source::World => {
            let shape = WorldShape {
                weight_scale: args.weight_scale,
                bias_mean: args.bias_mean,
                bias_std: args.bias_std,
            };
            let world = SyntheticWorld::random_with(args.k, args.d, args.seed, shape)?;
            write_json(&dir.join("world.json"), &world)?;
            if args.heldout > 0 {
                let heldout = synth_generate_draw(&world, args.heldout, 1)?;
                write_text(&dir.join("heldout.jsonl"), &heldout.full.to_jsonl())?;
            }
            synth_generate_draw(&world, args.n, 0)?.full
        }
        Source::LabelCounts => synthesize_label_sets(&LabelCountConfig {
            n: args.n,
            k: args.k,
            feature_dim: args.d,
            mean_labels: args.mean_labels,
            seed: args.seed,
        })?,
    };
    let determined = generate_determined(&full, args.seed)?;
    let stats = compute_stats(&determined)?;
    write_text(&dir.join("full.jsonl"), &full.to_jsonl())?;
    write_text(&dir.join("determined.jsonl"), &determined.to_jsonl())?;
    write_json(&dir.join("stats.json"), &stats)?;
    print_json(&stats);
    Ok(())
}

fn embed(args: &EmbedArgs) -> Result<()> {
    print_config("embed", args);
    let names = match (&args.targets, &args.data) {
        (Some(path), _) => read_labels(path)?,
        (None, Some(path)) => load_vocabulary(path)?.names().to_vec(),
        (None, None) => unreachable!("clap requires one target source"),
    };
    let targets = LabelVocabulary::new(names)?;
    let vocabulary = args
        .vocab
        .as_deref()
        .map(read_labels)
        .transpose()?
        .unwrap_or_default();
    let provider = SyntheticProvider::new(args.dim, args.provider_seed)?;
    let template = PromptTemplate::default();
    let index = build_similarity_index(&provider, &template, &targets, &vocabulary, args.sigma)?;

    let none: [&str; 0] = [];
    let mut prompts = Vec::new();
    for label in targets.names().iter().chain(&vocabulary) {
        prompts.push(template.render(label, &none)?);
    }
    for (j, name) in targets.names().iter().enumerate() {
        for lambda in 1..=index.available(j) {
            prompts.push(template.render(name, &index.labels(j, lambda))?);
        }
    }
    let mut table = EmbeddingTable::new(args.dim);
    for prompt in &prompts {
        if table.get(&prompt.text).is_none() {
            let v = provider.embed(prompt)?;
            table.insert(
                prompt.text.clone(),
                v.into_iter().map(|x| x as f32).collect(),
            )?;
        }
    }
    table.save(&args.out)?;
    print_json(&json!({ "prompts": table.len(), "dim": table.dim() }));
    Ok(())
}

fn train_command(args: &TrainArgs) -> Result<()> {
    let config = TrainConfig {
        epochs: args.epochs,
        prompt_update_period: args.prompt_update_period,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        weight_decay: args.weight_decay,
        adam_beta1: args.adam_beta1,
        adam_beta2: args.adam_beta2,
        adam_epsilon: args.adam_epsilon,
        seed: args.seed,
        sigma: args.sigma,
        loss_mode: args.loss_mode,
        weighting: args.weighting,
        epsilon: args.epsilon,
        stop_gradient_on_soft_labels: !args.soft_label_gradient,
    };
    print_config("train", &json!({ "args": args, "train_config": config }));
    config.validate()?;
    let sidecar = load_sidecar(args.features.as_deref())?;
    let data = DeterminedDataset::load(&args.train, sidecar.as_ref())?;
    let heldout = args
        .heldout
        .as_deref()
        .map(|p| FullDataset::load(p, sidecar.as_ref()))
        .transpose()?;
    let vocabulary = args
        .vocab
        .as_deref()
        .map(read_labels)
        .transpose()?
        .unwrap_or_default();
    let provider: Box<dyn EmbeddingProvider> = match args.provider {
        ProviderKind::Synthetic => {
            Box::new(SyntheticProvider::new(args.embed_dim, args.provider_seed)?)
        }
        ProviderKind::File => {
            let path = args
                .embeddings
                .as_deref()
                .expect("clap enforces --embeddings");
            Box::new(FileProvider::new(EmbeddingTable::load(path)?))
        }
    };
    let template = PromptTemplate::default();
    let setup = PromptSetup {
        vocabulary: &vocabulary,
        provider: provider.as_ref(),
        template: &template,
    };
    let out = train(&data, heldout.as_ref(), &setup, &config)?;

    let dir = &args.out_dir;
    out.params.save(&dir.join("model.json"))?;
    write_json(
        &dir.join("prompt.json"),
        &json!({ "state": out.prompt, "index": out.index }),
    )?;
    write_json(&dir.join("history.json"), &out.history)?;
    write_text(&dir.join("history.jsonl"), &out.history.to_jsonl())?;
    write_text(&dir.join("history.csv"), &out.history.to_csv())?;
    let last = out.history.epochs.last().expect("at least one epoch");
    print_json(&json!({
        "epochs": out.history.epochs.len(),
        "final_loss": last.loss,
        "initial_map": out.history.initial_map(),
        "final_map": out.history.final_map(),
        "lambdas": out.prompt.lambdas,
    }));
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    print_config("eval", args);
    let model = ModelParams::load(&args.model)?;
    let sidecar = load_sidecar(args.features.as_deref())?;
    let data = FullDataset::load(&args.data, sidecar.as_ref())?;
    model.check_classes(data.k())?;
    let scores = model.score_all(data.instances().iter().map(|x| x.features.as_slice()))?;
    let report = evaluate(&ScoreMatrix::from_dataset(&data, scores)?)?;
    if let Some(path) = &args.csv {
        write_text(path, &class_ap_csv(&report, data.vocabulary()))?;
    }
    print_json(&json!({
        "map": report.map,
        "one_error": report.one_error,
        "ranking_loss": report.ranking_loss,
        "coverage": report.coverage,
        "instances": report.instances,
        "skipped_classes": report.skipped_classes,
        "empty_truth_instances": report.empty_truth_instances,
        "unrankable_instances": report.unrankable_instances,
    }));
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<()> {
    print_config("verify", args);
    let (name, passed) = match args.check {
        Check::ExpectedLoss => {
            let r = check_expected_loss(
                1,
                args.k.unwrap_or(12),
                args.trials.unwrap_or(100),
                args.seed,
            )?;
            print_json(&r);
            ("eq5", r.passed)
        }
        Check::Unbiased => {
            let worlds = args.trials.unwrap_or(5);
            let required = worlds - worlds / 5;
            let r = check_unbiased(
                args.k.unwrap_or(6),
                args.d,
                args.samples,
                worlds,
                required,
                args.seed,
            )?;
            print_json(&r);
            ("unbiased", r.passed)
        }
        Check::Metrics => {
            let r = check_metrics(
                args.trials.unwrap_or(100),
                8,
                args.k.unwrap_or(6),
                args.seed,
            )?;
            print_json(&r);
            ("metrics", r.passed)
        }
        Check::Grad => {
            let r = check_gradients(args.trials.unwrap_or(20), args.seed)?;
            print_json(&r);
            ("grad", r.passed)
        }
    };
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(name))
    }
}

fn report(args: &ReportArgs) -> Result<()> {
    print_config("report", args);
    let text = fs::read_to_string(&args.history).map_err(|e| dmll_core::Error::Io {
        path: args.history.clone(),
        source: e,
    })?;
    let history: TrainHistory =
        serde_json::from_str(&text).map_err(|e| dmll_core::Error::Format {
            what: "training history",
            message: e.to_string(),
        })?;
    let csv = history.to_csv();
    match &args.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

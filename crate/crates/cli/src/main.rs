//! `dastack`: generate domain-shift data, train adapted base learners, fit
//! the stacked ensemble, run the ablation and evaluate checkpoints.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dastack_core::adapt::Architecture;
use dastack_core::checkpoint::{self, BaseCheckpoint, StackCheckpoint};
use dastack_core::data::{generate_shift_pair, load_csv, Generator};
use dastack_core::stack::{
    evaluate, fit_stack, train_one_base, Classifier, Evaluation, StackReport, StackedModel,
};

use config::{display_name, slot_for, Experiment, ExperimentConfig, FlagOverrides, BASE_TAGS};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(dastack_core::Error),
}

impl From<dastack_core::Error> for CliError {
    fn from(e: dastack_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dastack",
    version,
    about = "Stacked domain-adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target pair as CSV.
    Generate(GenerateArgs),
    /// Train one base learner.
    Train(TrainArgs),
    /// Train the three bases and the meta network.
    Stack(RunArgs),
    /// Compare each base alone with the stacked ensemble.
    Ablate(RunArgs),
    /// Score a checkpoint on a labeled CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Gaussian blobs on a circle (the default).
    #[arg(long, conflicts_with = "moons")]
    blobs: bool,
    /// Two interleaved half circles.
    #[arg(long)]
    moons: bool,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Target rotation in degrees.
    #[arg(long, default_value_t = 30.0)]
    rotate: f64,
    /// Target translation as `dx,dy`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 0.0])]
    translate: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving `source.csv` and `target.csv`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML experiment file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epochs for every network.
    #[arg(long)]
    epochs: Option<usize>,
    /// Weight of the adaptation term for every base.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// mmd, cmmd, lowrank or coral.
    #[arg(long)]
    method: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Base or stack checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled CSV to score.
    #[arg(long)]
    data: PathBuf,
    /// Directory for `eval_metrics.csv` and `eval_confusion.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Stack(a) => cmd_stack(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn experiment(a: &RunArgs) -> Result<Experiment, CliError> {
    let cfg = ExperimentConfig::load_optional(a.config.as_deref())?;
    cfg.resolve(&FlagOverrides {
        seed: a.seed,
        out_dir: a.out.clone(),
        epochs: a.epochs,
        lambda: a.lambda,
    })
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig {
        data: config::DataConfig {
            generator: Some(if a.moons {
                Generator::Moons
            } else {
                Generator::Blobs
            }),
            n_classes: Some(if a.moons { 2 } else { a.classes }),
            n_per_class: Some(a.per_class),
            rotation_deg: Some(a.rotate),
            translation: Some(a.translate.clone()),
            noise_sd: Some(a.noise),
            ..Default::default()
        },
        ..Default::default()
    };
    let (source, target) = generate_shift_pair(&cfg.shift_spec(a.seed))?;
    for (set, name) in [(&source, "source.csv"), (&target, "target.csv")] {
        let mut buf = Vec::new();
        dastack_core::data::write_csv(set, &mut buf)?;
        output::write_atomic(&a.out.join(name), &buf)?;
    }
    log::info!(
        "wrote {} source and {} target rows to {}",
        source.len(),
        target.len(),
        a.out.display()
    );
    Ok(())
}

fn architecture(e: &Experiment) -> Architecture {
    e.stack
        .architecture
        .clone()
        .unwrap_or_else(|| Architecture::desk_scale(e.source.n_features()))
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut e = experiment(&a.run)?;
    let slot = slot_for(&a.method)?;
    let tag = a.method.as_str();
    if tag != BASE_TAGS[slot] {
        e.stack.bases[slot].method = dastack_core::DiscrepancyMethod::from_tag(tag)?;
    }
    let n_classes = e.source.n_classes().max(2);
    let (bl, history) = train_one_base(
        slot,
        &e.stack,
        &architecture(&e),
        n_classes,
        &e.source.subset(&e.plan.source.train),
        &e.target.subset(&e.plan.target.train),
    )?;

    let mut train = e.stack.bases[slot].train;
    train.sgd.seed = dastack_core::stack::base_seed(e.seed, slot);
    let ck = BaseCheckpoint::new(&bl, &train);
    output::write_atomic(
        &e.out_dir.join(format!("base_{tag}.json")),
        checkpoint::to_json(&ck)?.as_bytes(),
    )?;
    output::write_atomic(
        &e.out_dir.join(format!("history_{tag}.csv")),
        output::history_csv(&history).as_bytes(),
    )?;

    if let Some(eval) = test_evaluation(&bl, &e)? {
        let name = display_name(&bl.method);
        let metrics = output::metrics_csv(&[(name, "test", eval.accuracy)], e.seed);
        output::write_atomic(
            &e.out_dir.join(format!("metrics_{tag}.csv")),
            metrics.as_bytes(),
        )?;
        output::write_atomic(
            &e.out_dir.join(format!("confusion_{tag}.csv")),
            output::confusion_csv(&eval).as_bytes(),
        )?;
    }
    Ok(())
}

/// Scores on the target test split, or `None` when the target is unlabeled.
fn test_evaluation<C: Classifier>(
    model: &C,
    e: &Experiment,
) -> Result<Option<Evaluation>, CliError> {
    let test = e.plan.target_test(&e.target);
    if test.labels.is_none() {
        log::warn!("target data has no labels; skipping test evaluation");
        return Ok(None);
    }
    Ok(Some(evaluate(model, &test)?))
}

struct StackRun {
    model: StackedModel,
    report: StackReport,
    /// (name, test accuracy) for each base, then the ensemble.
    scores: Vec<(&'static str, f64)>,
    stack_eval: Option<Evaluation>,
}

fn run_stack(e: &Experiment) -> Result<StackRun, CliError> {
    let (model, report) = fit_stack(&e.source, &e.target, &e.plan, &e.stack)?;
    if report.degenerate_plan {
        log::warn!("degenerate split plan: validation rows equal train rows");
    }
    let mut scores = Vec::new();
    for bl in &model.bases {
        if let Some(ev) = test_evaluation(bl, e)? {
            scores.push((display_name(&bl.method), ev.accuracy));
        }
    }
    let stack_eval = test_evaluation(&model, e)?;
    if let Some(ev) = &stack_eval {
        scores.push(("Stack", ev.accuracy));
    }
    Ok(StackRun {
        model,
        report,
        scores,
        stack_eval,
    })
}

fn cmd_stack(a: &RunArgs) -> Result<(), CliError> {
    let e = experiment(a)?;
    let run = run_stack(&e)?;
    let ck = StackCheckpoint::new(&run.model, &e.stack);
    output::write_atomic(
        &e.out_dir.join("stack.json"),
        checkpoint::to_json(&ck)?.as_bytes(),
    )?;

    let rows: Vec<(&str, &str, f64)> = run
        .scores
        .iter()
        .map(|&(n, acc)| (n, "test", acc))
        .collect();
    output::write_atomic(
        &e.out_dir.join("metrics.csv"),
        output::metrics_csv(&rows, e.seed).as_bytes(),
    )?;
    if let Some(ev) = &run.stack_eval {
        output::write_atomic(
            &e.out_dir.join("confusion.csv"),
            output::confusion_csv(ev).as_bytes(),
        )?;
    }
    let names: Vec<&str> = run
        .model
        .bases
        .iter()
        .map(|b| display_name(&b.method))
        .collect();
    let curves: Vec<(&str, &_)> = names
        .iter()
        .copied()
        .zip(&run.report.base_histories)
        .collect();
    output::write_atomic(
        &e.out_dir.join("curves.csv"),
        output::curves_csv(&curves, &run.report.meta_history).as_bytes(),
    )?;
    Ok(())
}

fn cmd_ablate(a: &RunArgs) -> Result<(), CliError> {
    let e = experiment(a)?;
    let run = run_stack(&e)?;
    if run.stack_eval.is_none() {
        return Err(CliError::Usage(
            "ablation needs a labeled target test split".into(),
        ));
    }
    output::write_atomic(
        &e.out_dir.join("ablation.csv"),
        output::ablation_csv(&run.scores, e.seed).as_bytes(),
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.checkpoint).map_err(|err| {
        CliError::Usage(format!(
            "cannot read checkpoint {}: {err}",
            a.checkpoint.display()
        ))
    })?;
    let set = load_csv(&a.data)?;
    let (name, eval, seed) = if let Ok(ck) = checkpoint::from_json::<StackCheckpoint>(&text) {
        ("Stack", evaluate(&ck.restore()?, &set)?, ck.seed)
    } else {
        let ck: BaseCheckpoint = checkpoint::from_json(&text)?;
        let bl = ck.restore()?;
        (display_name(&bl.method), evaluate(&bl, &set)?, ck.seed)
    };
    println!("{name} accuracy {}", eval.accuracy);
    if let Some(out) = &a.out {
        let metrics = output::metrics_csv(&[(name, "eval", eval.accuracy)], seed);
        output::write_atomic(&out.join("eval_metrics.csv"), metrics.as_bytes())?;
        output::write_atomic(
            &out.join("eval_confusion.csv"),
            output::confusion_csv(&eval).as_bytes(),
        )?;
    }
    Ok(())
}

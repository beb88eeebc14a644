use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prodcat::catalog::{ingest, LabeledExample, Product, Taxonomy};
use prodcat::config::FileConfig;
use prodcat::models::{stable_hash, Classifier, LoadedModel};
use prodcat::pipeline::{build_dictionaries, run_training, TAXONOMY_FILE, TEST_FILE};
use prodcat::synthetic::{generate, AttrSignal, Scenario, SyntheticSpec};
use prodcat::train::{evaluate, f1_lift_report};
use prodcat_serve::{AppState, Batcher, BatcherConfig};

#[derive(Parser)]
#[command(name = "prodcat", version, about = "Product categorization with multi-channel CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build token dictionaries from a labeled corpus.
    BuildDicts(BuildDicts),
    /// Split, train and evaluate; writes a run directory.
    Train(Train),
    /// Score a saved model on a labeled corpus.
    Evaluate(Evaluate),
    /// Per-class f1 lift of run B over run A on the same examples.
    Compare(Compare),
    /// Top-k predictions for every product in a file, one JSON line each.
    Predict(Predict),
    /// Serve a saved model over HTTP with micro-batching.
    Serve(Serve),
    /// Write a synthetic taxonomy, corpus and ground truth.
    GenSynthetic(GenSynthetic),
}

#[derive(Args)]
struct DataArgs {
    /// Labeled corpus, one JSON record per line.
    #[arg(long)]
    data: PathBuf,
    /// Taxonomy file, one `A > B > leaf` path per line.
    #[arg(long)]
    taxonomy: PathBuf,
}

#[derive(Args)]
struct BuildDicts {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Evaluate {
    /// Run directory.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the run's test split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Compare {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Defaults to run A's test split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    min_support: usize,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    model: PathBuf,
    /// Products, one JSON record per line; labels are ignored.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    /// Seconds between queue drains.
    #[arg(long)]
    poll_interval: Option<f64>,
    #[arg(long)]
    max_batch: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct GenSynthetic {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "standard")]
    scenario: Scenario,
    #[arg(long, default_value_t = 50)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    title_overlap: f64,
    #[arg(long, default_value = "strong")]
    attr_signal: AttrSignal,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        Some(p) => FileConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(FileConfig::default()),
    }
}

fn load_labeled(data: &Path, taxonomy: &Taxonomy) -> Result<Vec<LabeledExample>> {
    let report = ingest(data, taxonomy)?;
    for e in report.errors.iter().take(10) {
        log::warn!("{}: {e}", data.display());
    }
    if report.errors.len() > 10 {
        log::warn!("{} more rejected records", report.errors.len() - 10);
    }
    if report.examples.is_empty() {
        bail!("{} has no usable records", data.display());
    }
    Ok(report.examples)
}

fn build_dicts(cmd: BuildDicts) -> Result<()> {
    let cfg = load_config(cmd.config.as_deref())?.run;
    let tax = Taxonomy::load(&cmd.data.taxonomy)?;
    let examples = load_labeled(&cmd.data.data, &tax)?;
    let dicts = build_dictionaries(&cfg.model, &examples, cfg.dictionary_sizes)?;
    std::fs::create_dir_all(&cmd.out).with_context(|| format!("creating {}", cmd.out.display()))?;
    for (name, dict) in &dicts {
        let path = cmd.out.join(format!("dict_{name}.tsv"));
        dict.save(&path)?;
        writeln!(std::io::stdout(), "{}\t{}", path.display(), dict.len())?;
    }
    Ok(())
}

fn train(cmd: Train) -> Result<()> {
    let mut cfg = load_config(cmd.config.as_deref())?.run;
    if let Some(seed) = cmd.seed {
        cfg.set_seed(seed);
    }
    let tax = Taxonomy::load(&cmd.data.taxonomy)?;
    let examples = load_labeled(&cmd.data.data, &tax)?;
    let run = run_training(&cfg, &tax, &examples, Some(&cmd.out))?;
    let summary = serde_json::json!({
        "out": cmd.out,
        "best_epoch": run.best_epoch,
        "test_topk_accuracy": run.test.topk_accuracy,
    });
    writeln!(std::io::stdout(), "{summary}")?;
    Ok(())
}

/// The examples to score: `--data` if given, else the run's test split.
fn eval_examples(run: &Path, data: Option<&Path>) -> Result<Vec<LabeledExample>> {
    let tax = Taxonomy::load(run.join(TAXONOMY_FILE))?;
    let default = run.join(TEST_FILE);
    load_labeled(data.unwrap_or(&default), &tax)
}

fn evaluate_cmd(cmd: Evaluate) -> Result<()> {
    let model = LoadedModel::load(&cmd.model)?;
    let examples = eval_examples(&cmd.model, cmd.data.as_deref())?;
    let report = evaluate(&model, &examples)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &cmd.out {
        std::fs::write(out, format!("{text}\n")).with_context(|| format!("writing {}", out.display()))?;
    }
    writeln!(std::io::stdout(), "{text}")?;
    Ok(())
}

fn compare(cmd: Compare) -> Result<()> {
    let a = LoadedModel::load(&cmd.a)?;
    let b = LoadedModel::load(&cmd.b)?;
    let examples = eval_examples(&cmd.a, cmd.data.as_deref())?;
    let (ra, rb) = (evaluate(&a, &examples)?, evaluate(&b, &examples)?);
    let lift = f1_lift_report(&ra, &rb, cmd.min_support)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "rank\tlabel\tdelta_f1\tsupport")?;
    for (i, (label, delta)) in lift.iter().enumerate() {
        writeln!(out, "{}\t{label}\t{delta:+.4}\t{}", i + 1, ra.per_class[label].support)?;
    }
    writeln!(out, "# top-1: a {:.4}, b {:.4}", ra.top1(), rb.top1())?;
    Ok(())
}

fn predict(cmd: Predict) -> Result<()> {
    let model = LoadedModel::load(&cmd.model)?;
    let file = File::open(&cmd.data).with_context(|| format!("opening {}", cmd.data.display()))?;
    let mut products = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Product =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", cmd.data.display(), n + 1))?;
        products.push(p);
    }
    let refs: Vec<&Product> = products.iter().collect();
    let mut out = BufWriter::new(std::io::stdout().lock());
    for chunk in refs.chunks(256) {
        for (p, preds) in chunk.iter().zip(model.predict_topk_batch(chunk, cmd.k)?) {
            let ranked: Vec<_> = preds
                .iter()
                .map(|x| serde_json::json!({"label": x.label, "probability": x.probability}))
                .collect();
            writeln!(out, "{}", serde_json::json!({"id": p.id, "predictions": ranked}))?;
        }
    }
    Ok(())
}

fn serve(cmd: Serve) -> Result<()> {
    let mut settings = load_config(cmd.config.as_deref())?.serve;
    settings.apply_env(|k| std::env::var(k).ok())?;
    if let Some(s) = cmd.poll_interval {
        settings.poll_interval =
            Duration::try_from_secs_f64(s).map_err(|_| anyhow::anyhow!("invalid --poll-interval {s}"))?;
    }
    if let Some(m) = cmd.max_batch {
        settings.max_batch = m;
        settings.queue_capacity = settings.queue_capacity.max(m);
    }
    if let Some(k) = cmd.k {
        settings.k = k;
    }
    if let Some(b) = cmd.bind {
        settings.bind = b;
    }
    settings.validate()?;
    let model = LoadedModel::load(&cmd.model)?;
    if settings.k > model.num_classes() {
        bail!("k {} exceeds the model's {} classes", settings.k, model.num_classes());
    }
    let model_hash = model.config_hash();
    let batcher_config = BatcherConfig::from(&settings);
    let config_hash = format!("{:016x}", stable_hash(format!("{batcher_config:?}").as_bytes()));
    let batcher = Batcher::start(Arc::new(model), batcher_config)?;
    let state = Arc::new(AppState {
        batcher,
        model_hash,
        config_hash,
    });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&settings.bind)
            .await
            .with_context(|| format!("binding {}", settings.bind))?;
        log::info!("listening on {}", listener.local_addr()?);
        prodcat_serve::serve(listener, Arc::clone(&state), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        state.batcher.shutdown();
        Ok(())
    })
}

fn gen_synthetic(cmd: GenSynthetic) -> Result<()> {
    let spec = SyntheticSpec {
        scenario: cmd.scenario,
        classes: cmd.classes,
        per_class: cmd.per_class,
        title_overlap: cmd.title_overlap,
        attr_signal: cmd.attr_signal,
        seed: cmd.seed,
    };
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    let corpus = generate(&spec)?;
    corpus.write(&cmd.out)?;
    let summary = serde_json::json!({
        "out": cmd.out,
        "products": corpus.examples.len(),
        "classes": corpus.taxonomy.leaves().len(),
    });
    writeln!(std::io::stdout(), "{summary}")?;
    Ok(())
}

/// Bad input caught after argument parsing; exits like a flag error.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use prodcat::Error as E;
    if e.downcast_ref::<Usage>().is_some() {
        return "usage";
    }
    match e.downcast_ref::<prodcat::Error>() {
        Some(E::Io { .. } | E::Stream(_)) => "io",
        Some(E::Taxonomy(_)) => "taxonomy",
        Some(E::InvalidArgument(_)) => "invalid_argument",
        Some(E::Config(_)) => "config",
        Some(E::Shape { .. } | E::IndexOutOfRange { .. }) => "shape",
        Some(E::NonFinite(_)) => "non_finite",
        Some(E::Format { .. } | E::Json(_)) => "format",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "runtime",
    }
}

/// The error and its causes on one line, skipping causes a message already quotes.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if msg.contains(&c) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&c);
    }
    msg.replace('\n', " ")
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::BuildDicts(c) => build_dicts(c),
        Command::Train(c) => train(c),
        Command::Evaluate(c) => evaluate_cmd(c),
        Command::Compare(c) => compare(c),
        Command::Predict(c) => predict(c),
        Command::Serve(c) => serve(c),
        Command::GenSynthetic(c) => gen_synthetic(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": error_kind(&e), "message": one_line(&e)});
            eprintln!("{line}");
            ExitCode::from(if e.downcast_ref::<Usage>().is_some() { 2 } else { 1 })
        }
    }
}

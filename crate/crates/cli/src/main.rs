//! Command-line driver for the EMG intent-classification experiments.
//!
//! Subcommands: `synth` (generate a corpus), `preprocess` (recordings ->
//! windowed task manifest), `train` (pretrain a base model), `eval`
//! (score methods or a checkpoint over a scenario), `ablate`
//! (support-fraction and pretraining-subject ablations), `gradcheck`
//! (gradient oracle suites). Every run except `synth` writes a
//! `manifest.json` capturing the configuration, seeds, and input hashes;
//! `synth` output directories are byte-identical given the same seed, so
//! timing information is never put there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use metaemg_core::harness::{
    self, ablate_pretrain_subjects, ablate_support_fraction, evaluate_methods, gradcheck_report,
    sha256_hex, HarnessConfig, MethodSpec, RunManifest,
};
use metaemg_core::meta::meta_train;
use metaemg_core::synth::{generate_corpus, write_corpus, CorpusConfig};
use metaemg_core::tasks::{
    build_scenario, split_task, DownsampleStrategy, Scenario, ScenarioSplit, SplitManifest, Task,
    TaskConfig,
};
use metaemg_core::{checkpoint, synth};

#[derive(Parser)]
#[command(name = "metaemg", version, about = "EMG intent inferral with meta-learned fast adaptation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus of recordings.
    Synth(SynthArgs),
    /// Cut recordings into support/query tasks and write the split manifest.
    Preprocess(PreprocessArgs),
    /// Pretrain a base model (meta-learned or conventional) on a scenario's
    /// meta-training tasks.
    Train(TrainArgs),
    /// Evaluate methods (or a saved checkpoint) on a scenario's meta-test
    /// tasks.
    Eval(EvalArgs),
    /// Ablations over support fraction or pretraining subject count.
    #[command(subcommand)]
    Ablate(AblateCmd),
    /// Run the gradient-oracle suites and print max relative errors.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of subjects.
    #[arg(long, default_value_t = 5)]
    subjects: usize,
    #[arg(long)]
    seed: u64,
    /// Output directory for recording CSVs and the corpus manifest.
    #[arg(long)]
    out: PathBuf,
    /// Corpus configuration JSON (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SplitArgs {
    /// Corpus directory written by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Assessment scenario.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Held-out subject (subject scenario only).
    #[arg(long)]
    held_out: Option<String>,
    /// Sliding-window stride in milliseconds.
    #[arg(long, default_value_t = 10.0)]
    stride_ms: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Pretraining method: metaemg or conv-pretrain-3/-converged.
    #[arg(long, value_parser = parse_method)]
    method: MethodSpec,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Harness configuration JSON (architecture, learning rates, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of outer (or pretraining) epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the number of inner steps per task.
    #[arg(long)]
    inner_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Methods to evaluate end to end (pretraining included), comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Vec<MethodSpec>,
    /// Score this checkpoint instead of pretraining (first --methods entry
    /// sets the fine-tuning epochs).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
}

#[derive(Subcommand)]
enum AblateCmd {
    /// Downsample each meta-test task's support set.
    Fraction(FractionArgs),
    /// Vary how many subjects the base model is pretrained on.
    Subjects(SubjectsArgs),
}

#[derive(Args)]
struct FractionArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0])]
    fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, required = true)]
    methods: Vec<MethodSpec>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Choose reduced windows uniformly at random instead of a prefix.
    #[arg(long)]
    random_subsample: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
}

#[derive(Args)]
struct SubjectsArgs {
    /// Corpus directory written by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    stride_ms: f64,
    /// Pretraining subject counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
    counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_values_t = [MethodSpec::ConvPretrain3, MethodSpec::MetaEmg])]
    methods: Vec<MethodSpec>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Trials per tiny-net oracle section.
    #[arg(long, default_value_t = 20)]
    trials: usize,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    match s {
        "session" => Ok(Scenario::SessionAdaptation),
        "subject" => Ok(Scenario::SubjectAdaptation),
        other => Err(format!("unknown scenario `{other}` (expected `session` or `subject`)")),
    }
}

fn parse_method(s: &str) -> Result<MethodSpec, String> {
    MethodSpec::from_token(s).ok_or_else(|| {
        let all: Vec<&str> = MethodSpec::ALL.iter().map(|m| m.token()).collect();
        format!("unknown method `{s}` (expected one of {})", all.join(", "))
    })
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Preprocess(args) => cmd_preprocess(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(AblateCmd::Fraction(args)) => cmd_ablate_fraction(args),
        Cmd::Ablate(AblateCmd::Subjects(args)) => cmd_ablate_subjects(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_json_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn harness_config(path: &Option<PathBuf>, epochs: Option<usize>, inner_steps: Option<usize>) -> Result<HarnessConfig> {
    let mut cfg: HarnessConfig = match path {
        None => HarnessConfig::standard(),
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", p.display()))?
        }
    };
    if let Some(e) = epochs {
        cfg.meta.outer_epochs = e;
        cfg.pretrain_epochs = e;
    }
    if let Some(m) = inner_steps {
        cfg.meta.inner_steps = m;
    }
    Ok(cfg)
}

/// Combined hash of a corpus directory: manifest plus every recording file.
fn corpus_hash(dir: &Path) -> Result<String> {
    let manifest = std::fs::read(dir.join("manifest.json"))
        .with_context(|| format!("reading corpus manifest in {}", dir.display()))?;
    let parsed: synth::CorpusManifest = serde_json::from_slice(&manifest)?;
    let mut acc = sha256_hex(&manifest);
    for rec in &parsed.recordings {
        let bytes = std::fs::read(dir.join(&rec.path))
            .with_context(|| format!("reading recording {}", rec.path))?;
        acc = sha256_hex(format!("{acc}:{}:{}", rec.path, sha256_hex(&bytes)).as_bytes());
    }
    Ok(acc)
}

fn load_tasks(corpus: &Path, stride_ms: f64) -> Result<Vec<Task>> {
    let recs = synth::read_corpus(corpus)
        .with_context(|| format!("loading corpus from {}", corpus.display()))?;
    let cfg = TaskConfig::with_stride_ms(stride_ms);
    recs.into_iter()
        .map(|(rec, rep)| split_task(rec, rep, &cfg).map_err(Into::into))
        .collect()
}

fn load_split(args: &SplitArgs) -> Result<ScenarioSplit> {
    let tasks = load_tasks(&args.corpus, args.stride_ms)?;
    Ok(build_scenario(tasks, args.scenario, args.held_out.as_deref())?)
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: serde_json::Value,
    seeds: &[u64],
    input_hashes: BTreeMap<String, String>,
    outputs: &[&str],
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        seeds: seeds.to_vec(),
        input_hashes,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    std::fs::write(out_dir.join("manifest.json"), manifest.to_json()?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config: CorpusConfig = load_json_config(&args.config)?;
    let corpus = generate_corpus(args.subjects, args.seed, &config)?;
    let manifest = write_corpus(&corpus, &args.out)?;
    println!(
        "wrote {} recordings for {} subjects to {}",
        manifest.recordings.len(),
        args.subjects,
        args.out.display()
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let started = Instant::now();
    let split = load_split(&args.split)?;
    std::fs::create_dir_all(&args.out)?;
    let manifest = SplitManifest::of(&split);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(args.out.join("tasks.json"), &json)?;

    let hashes = BTreeMap::from([("corpus".to_string(), corpus_hash(&args.split.corpus)?)]);
    let config = serde_json::json!({
        "scenario": split.scenario,
        "held_out": split.held_out,
        "stride_ms": args.split.stride_ms,
    });
    write_manifest(&args.out, "preprocess", config, &[], hashes, &["tasks.json"], started)?;
    println!(
        "split: {} meta-train tasks, {} meta-test tasks -> {}",
        manifest.meta_train.len(),
        manifest.meta_test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = harness_config(&args.config, args.epochs, args.inner_steps)?;
    let kind = args.method.pretrain_kind();
    if kind == harness::PretrainKind::None {
        bail!("method `{}` has no pretraining stage; use it with `eval`", args.method);
    }
    let split = load_split(&args.split)?;
    std::fs::create_dir_all(&args.out)?;

    let (params, log) = match kind {
        harness::PretrainKind::Meta => {
            let meta_cfg = metaemg_core::meta::MetaConfig {
                seed: metaemg_core::seeds::derive(args.seed, "harness/meta", &[]),
                ..cfg.meta.clone()
            };
            let (p, log) = meta_train(&cfg.net, &split.meta_train, &meta_cfg)?;
            (p, Some(log))
        }
        harness::PretrainKind::Conventional => {
            let p = metaemg_core::meta::conventional_pretrain(
                &cfg.net,
                &split.meta_train,
                &cfg.pretrain_opts(),
                metaemg_core::seeds::derive(args.seed, "harness/pretrain", &[]),
            )?;
            (p, None)
        }
        harness::PretrainKind::None => unreachable!(),
    };

    checkpoint::save(&args.out.join("checkpoint.json"), &params)?;
    let mut outputs = vec!["checkpoint.json"];
    if let Some(log) = &log {
        std::fs::write(args.out.join("trainlog.jsonl"), log.to_jsonl()?)?;
        outputs.push("trainlog.jsonl");
    }

    let hashes = BTreeMap::from([("corpus".to_string(), corpus_hash(&args.split.corpus)?)]);
    let config = serde_json::json!({
        "method": args.method,
        "scenario": split.scenario,
        "held_out": split.held_out,
        "stride_ms": args.split.stride_ms,
        "harness": cfg,
    });
    write_manifest(&args.out, "train", config, &[args.seed], hashes, &outputs, started)?;
    println!("trained {} base model -> {}", args.method, args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = harness_config(&args.config, args.epochs, args.inner_steps)?;
    let split = load_split(&args.split)?;
    std::fs::create_dir_all(&args.out)?;
    let mut hashes = BTreeMap::from([("corpus".to_string(), corpus_hash(&args.split.corpus)?)]);

    let eval = if let Some(ckpt_path) = &args.checkpoint {
        let bytes = std::fs::read(ckpt_path)
            .with_context(|| format!("reading checkpoint {}", ckpt_path.display()))?;
        hashes.insert("checkpoint".to_string(), sha256_hex(&bytes));
        let params = checkpoint::from_bytes(&bytes)?;
        let method = args.methods.first().copied().unwrap_or(MethodSpec::MetaEmg);
        harness::evaluate_checkpoint(&params, method, &split, &args.seeds, &cfg)?
    } else {
        if args.methods.is_empty() {
            bail!("provide --methods or --checkpoint");
        }
        evaluate_methods(&args.methods, &split, &args.seeds, &cfg)?
    };

    std::fs::write(args.out.join("results.csv"), eval.table.csv())?;
    let mut records = serde_json::to_string_pretty(&eval.records)?;
    records.push('\n');
    std::fs::write(args.out.join("records.json"), records)?;

    let config = serde_json::json!({
        "methods": args.methods,
        "checkpoint": args.checkpoint,
        "scenario": split.scenario,
        "held_out": split.held_out,
        "stride_ms": args.split.stride_ms,
        "harness": cfg,
    });
    write_manifest(&args.out, "eval", config, &args.seeds, hashes, &["results.csv", "records.json"], started)?;

    // Human-readable summary: the average row per method.
    for row in eval.table.rows.iter().filter(|r| r.subject_id == harness::AVERAGE_ROW) {
        println!("{:<24} {:6.2}% +- {:.2}", row.method.to_string(), row.mean_accuracy_pct, row.std_accuracy_pct);
    }
    println!("results -> {}", args.out.display());
    Ok(())
}

fn cmd_ablate_fraction(args: FractionArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = harness_config(&args.config, args.epochs, args.inner_steps)?;
    let split = load_split(&args.split)?;
    std::fs::create_dir_all(&args.out)?;
    let strategy = if args.random_subsample {
        DownsampleStrategy::UniformRandom
    } else {
        DownsampleStrategy::Prefix
    };
    let (table, records) =
        ablate_support_fraction(&split, &args.fractions, &args.methods, &args.seeds, &cfg, strategy)?;

    std::fs::write(args.out.join("ablation.csv"), table.csv())?;
    let mut json = serde_json::to_string_pretty(&records)?;
    json.push('\n');
    std::fs::write(args.out.join("records.json"), json)?;

    let hashes = BTreeMap::from([("corpus".to_string(), corpus_hash(&args.split.corpus)?)]);
    let config = serde_json::json!({
        "fractions": args.fractions,
        "methods": args.methods,
        "strategy": strategy,
        "scenario": split.scenario,
        "held_out": split.held_out,
        "stride_ms": args.split.stride_ms,
        "harness": cfg,
    });
    write_manifest(&args.out, "ablate fraction", config, &args.seeds, hashes, &["ablation.csv", "records.json"], started)?;
    for row in &table.rows {
        println!("{:<24} fraction {:4.2}: {:6.2}% +- {:.2}", row.method.to_string(), row.param, row.mean_accuracy_pct, row.std_accuracy_pct);
    }
    Ok(())
}

fn cmd_ablate_subjects(args: SubjectsArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = harness_config(&args.config, args.epochs, args.inner_steps)?;
    let tasks = load_tasks(&args.corpus, args.stride_ms)?;
    std::fs::create_dir_all(&args.out)?;
    let (table, records) = ablate_pretrain_subjects(&tasks, &args.counts, &args.methods, &args.seeds, &cfg)?;

    std::fs::write(args.out.join("ablation.csv"), table.csv())?;
    let mut json = serde_json::to_string_pretty(&records)?;
    json.push('\n');
    std::fs::write(args.out.join("records.json"), json)?;

    let hashes = BTreeMap::from([("corpus".to_string(), corpus_hash(&args.corpus)?)]);
    let config = serde_json::json!({
        "counts": args.counts,
        "methods": args.methods,
        "stride_ms": args.stride_ms,
        "harness": cfg,
    });
    write_manifest(&args.out, "ablate subjects", config, &args.seeds, hashes, &["ablation.csv", "records.json"], started)?;
    for row in &table.rows {
        println!("{:<24} {} subjects: {:6.2}% +- {:.2}", row.method.to_string(), row.param, row.mean_accuracy_pct, row.std_accuracy_pct);
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = gradcheck_report(args.trials)?;
    for line in &report.lines {
        println!(
            "{} {:<75} max rel err {:.3e} (threshold {:.0e})",
            if line.pass { "PASS" } else { "FAIL" },
            line.name,
            line.max_relative_error,
            line.threshold
        );
    }
    if !report.all_pass() {
        bail!("gradient checks failed");
    }
    Ok(())
}

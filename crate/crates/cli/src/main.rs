//! `gazenlu` command-line entry point.

mod data;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gazenlu::corpus::synthetic::SuiteConfig;
use gazenlu::corpus::{
    dataset_to_string, gaze_corpus_to_string, low_resource_split, make_synthetic_suite, Label,
    DATA_SEEDS,
};
use gazenlu::evalkit::{
    reports_to_csv, run_ablations, run_crossval, run_lowresource, sweep_scanpaths, AblationReport,
    EvalReport, Experiment, Protocol, RunValue, SweepReport,
};
use gazenlu::gazegen::{Scanpath, GEN_PREFIX};
use gazenlu::rng::RngState;
use gazenlu::tensor::ParamStore;
use gazenlu::textenc::{tokenize, Vocab};
use gazenlu::trainkit::{
    build_generator, build_joint, encode_examples, encode_gaze, evaluate_metric, log_to_jsonl,
    predict_outputs, pretrain_generator, select_lr, split_gaze_by_sentence, train_joint,
    TrainConfig,
};
use serde_json::{json, Value};

use data::{build_vocab, read_texts, DataArgs, TaskData};
use rundir::RunDir;

/// Learning rate of the gaze pretraining phase when it runs inside another
/// command.
const PRETRAIN_LR: f64 = 1e-3;
const GAZE_DEV_FRACTION: f64 = 0.1;

#[derive(Parser, Debug)]
#[command(
    name = "gazenlu",
    version,
    about = "Scanpath-augmented text classification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a subword vocabulary from text or TSV files.
    BuildVocab(BuildVocabArgs),
    /// Write the synthetic gaze corpus and task datasets.
    MakeSynthetic(MakeSyntheticArgs),
    /// Pretrain the scanpath generator on a gaze corpus.
    PretrainGaze(PretrainArgs),
    /// Train a scanpath-augmented classifier.
    Train(TrainCmdArgs),
    /// Score a trained classifier on a task's test split.
    Evaluate(EvaluateArgs),
    /// Sample scanpaths for sentences.
    Generate(GenerateArgs),
    /// Evaluate over several scanpath counts.
    Sweep(SweepArgs),
    /// Low-resource protocol over training sizes and data seeds.
    Lowresource(LowResourceArgs),
    /// K-fold cross-validation.
    Crossval(CrossvalArgs),
    /// Full, frozen-generator and scratch-generator comparison.
    Ablate(AblateArgs),
    /// Summarize a report file.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Run directory; defaults to `<$GAZENLU_RUNS or runs>/<verb>-<hash>-s<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    /// `key = value` file of training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_scanpaths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    /// straight_through, soft_convolution or relaxed.
    #[arg(long)]
    bridge: Option<String>,
    /// Exclude generator parameters from optimization.
    #[arg(long)]
    freeze_generator: bool,
    /// Do not load or pretrain a generator.
    #[arg(long)]
    scratch: bool,
    /// Text-only control: identity scanpaths.
    #[arg(long)]
    baseline: bool,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some(p) = &self.config {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            c.apply_kv(&p.display().to_string(), &text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            c.set(k.trim(), v.trim())?;
        }
        let flags: [(&str, Option<String>); 11] = [
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("n_scanpaths_train", self.n_scanpaths.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("d_model", self.d_model.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("l_max", self.l_max.map(|v| v.to_string())),
            ("bridge", self.bridge.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        c.freeze_generator |= self.freeze_generator;
        c.pretrained_generator &= !self.scratch;
        c.baseline |= self.baseline;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Text files (one sentence per line) or TSV files with text columns.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 400)]
    vocab_size: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct MakeSyntheticArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    gaze_sentences: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Gaze corpus TSV.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    vocab_size: usize,
    /// Fraction of sentences held out for checkpoint selection.
    #[arg(long, default_value_t = GAZE_DEV_FRACTION)]
    dev_fraction: f64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug, Clone)]
struct GeneratorSource {
    /// Run directory holding a pretrained generator (`generator.ckpt` and
    /// `vocab.txt`). Without it the generator is pretrained in place.
    #[arg(long)]
    generator: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainCmdArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    gen: GeneratorSource,
    /// Low-resource training size; the whole pool minus a dev split if
    /// absent.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = DATA_SEEDS[0])]
    data_seed: u64,
    /// Comma-separated learning rates to select from on the dev split.
    #[arg(long, value_delimiter = ',')]
    lr_grid: Vec<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Scanpaths averaged per instance; the training value if absent.
    #[arg(long)]
    n_scanpaths: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Run directory holding `generator.ckpt` or `joint.ckpt`, plus
    /// `vocab.txt` and `config.txt`.
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    text: Vec<String>,
    /// Text or TSV file of sentences.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scanpaths per sentence.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug, Clone)]
struct ProtocolArgs {
    /// Training size of the low-resource protocol.
    #[arg(long, default_value_t = 200)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DATA_SEEDS)]
    data_seeds: Vec<u64>,
    /// Use k-fold cross-validation instead of the low-resource protocol.
    #[arg(long)]
    folds: Option<usize>,
}

impl ProtocolArgs {
    fn protocol(&self) -> Protocol {
        match self.folds {
            Some(folds) => Protocol::CrossVal { folds },
            None => Protocol::LowResource {
                k: self.k,
                data_seeds: self.data_seeds.clone(),
            },
        }
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    gen: GeneratorSource,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5, 7])]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct LowResourceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    gen: GeneratorSource,
    #[arg(long, value_delimiter = ',', default_values_t = [200usize, 500, 1000])]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DATA_SEEDS)]
    data_seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    gen: GeneratorSource,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    gen: GeneratorSource,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A report JSON written by any evaluation command.
    #[arg(long)]
    input: PathBuf,
    /// Emit a flat `config,metric,run,value` CSV.
    #[arg(long)]
    csv: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    match dispatch(cli.cmd, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}

/// The error and its causes, skipping causes already spelled out by the
/// message above them.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out.push_str(": ");
            out.push_str(&c);
        }
    }
    out
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::BuildVocab(a) => build_vocab_cmd(a, argv),
        Command::MakeSynthetic(a) => make_synthetic_cmd(a, argv),
        Command::PretrainGaze(a) => pretrain_cmd(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Evaluate(a) => evaluate_cmd(a, argv),
        Command::Generate(a) => generate_cmd(a, argv),
        Command::Sweep(a) => sweep_cmd(a, argv),
        Command::Lowresource(a) => lowresource_cmd(a, argv),
        Command::Crossval(a) => crossval_cmd(a, argv),
        Command::Ablate(a) => ablate_cmd(a, argv),
        Command::Report(a) => report_cmd(a),
    }
}

fn build_vocab_cmd(a: BuildVocabArgs, argv: &[String]) -> Result<()> {
    let mut texts = Vec::new();
    for p in &a.corpus {
        texts.extend(read_texts(p)?);
    }
    let vocab = Vocab::build(texts.iter().map(String::as_str), a.vocab_size)?;
    let config = json!({"corpus": a.corpus, "vocab_size": a.vocab_size});
    let run = RunDir::create(a.out.out.as_deref(), "build-vocab", &config, 0)?;
    run.write("vocab.txt", vocab.to_file_string())?;
    run.write_manifest("build-vocab", argv, &config, &["vocab.txt"])?;
    println!(
        "{} tokens -> {}",
        vocab.len(),
        run.file("vocab.txt").display()
    );
    Ok(())
}

fn make_synthetic_cmd(a: MakeSyntheticArgs, argv: &[String]) -> Result<()> {
    let cfg = SuiteConfig {
        seed: a.seed,
        gaze_sentences: a.gaze_sentences,
        train: a.train,
        test: a.test,
        ..SuiteConfig::default()
    };
    let suite = make_synthetic_suite(&cfg)?;
    let config = serde_json::to_value(&cfg)?;
    let run = RunDir::create(a.out.out.as_deref(), "make-synthetic", &config, a.seed)?;
    let mut files = vec!["gaze.tsv".to_string()];
    run.write("gaze.tsv", gaze_corpus_to_string(&suite.gaze)?)?;
    for t in &suite.tasks {
        let name = &t.spec.name;
        run.write(
            &format!("{name}.train.tsv"),
            dataset_to_string(&t.spec, &t.train)?,
        )?;
        run.write(
            &format!("{name}.test.tsv"),
            dataset_to_string(&t.spec, &t.test)?,
        )?;
        run.write_json(&format!("{name}.spec.json"), &t.spec)?;
        files.extend([
            format!("{name}.train.tsv"),
            format!("{name}.test.tsv"),
            format!("{name}.spec.json"),
        ]);
    }
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    run.write_manifest("make-synthetic", argv, &config, &refs)?;
    println!("synthetic suite -> {}", run.path.display());
    Ok(())
}

/// Pretrain on `gaze`, writing checkpoint and log into `run`.
fn pretrain_into(
    run: &RunDir,
    cfg: &TrainConfig,
    vocab: &Vocab,
    gaze: &[gazenlu::corpus::GazeRecord],
    dev_fraction: f64,
) -> Result<ParamStore<f32>> {
    if gaze.is_empty() {
        bail!("pretraining needs a non-empty gaze corpus");
    }
    let (tr, dv) = split_gaze_by_sentence(gaze, dev_fraction)?;
    let train = encode_gaze(&tr, vocab, cfg.max_len)?;
    let dev = encode_gaze(&dv, vocab, cfg.max_len)?;
    let (gen, init) = build_generator(cfg, vocab.len())?;
    let out = pretrain_generator(&gen, init, &train, &dev, cfg)?;
    run.write("generator.ckpt", out.store.to_checkpoint_bytes())?;
    run.write("pretrain_log.jsonl", log_to_jsonl(&out.log))?;
    run.write_json(
        "pretrain_result.json",
        &json!({
            "best_epoch": out.best_epoch,
            "dev_nll": out.best_metric,
            "train_records": tr.len(),
            "dev_records": dv.len(),
            "trainable_params": out.trainable_params,
        }),
    )?;
    Ok(out.store)
}

fn pretrain_cmd(a: PretrainArgs, argv: &[String]) -> Result<()> {
    let cfg = a.train.resolve()?;
    let gaze = gazenlu::corpus::load_gaze_corpus(&a.corpus)?;
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => build_vocab(&gaze, &[], a.vocab_size)?,
    };
    let config = json!({
        "corpus": a.corpus, "vocab": a.vocab, "vocab_size": a.vocab_size,
        "dev_fraction": a.dev_fraction, "train": cfg,
    });
    let run = RunDir::create(a.out.out.as_deref(), "pretrain-gaze", &config, cfg.seed)?;
    run.write("vocab.txt", vocab.to_file_string())?;
    run.write("config.txt", cfg.to_kv())?;
    let store = pretrain_into(&run, &cfg, &vocab, &gaze, a.dev_fraction)?;
    run.write_manifest(
        "pretrain-gaze",
        argv,
        &config,
        &[
            "vocab.txt",
            "config.txt",
            "generator.ckpt",
            "pretrain_log.jsonl",
            "pretrain_result.json",
        ],
    )?;
    println!(
        "generator {} -> {}",
        &store.digest()[..12],
        run.path.display()
    );
    Ok(())
}

/// Task data with the vocabulary of `gen` when one is given.
fn load_task(data: &DataArgs, gen: &GeneratorSource) -> Result<TaskData> {
    let mut d = data.clone();
    if let (Some(dir), None) = (&gen.generator, &d.vocab) {
        d.vocab = Some(dir.join("vocab.txt"));
    }
    d.load()
}

fn load_generator_dir(dir: &Path) -> Result<ParamStore<f32>> {
    for name in ["generator.ckpt", "joint.ckpt"] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(ParamStore::load(&p)?.subset(GEN_PREFIX));
        }
    }
    bail!("no generator.ckpt or joint.ckpt in {}", dir.display())
}

/// The generator a run starts from: loaded, pretrained here, or none.
fn obtain_generator(
    run: &RunDir,
    cfg: &TrainConfig,
    data: &TaskData,
    gen: &GeneratorSource,
) -> Result<Option<ParamStore<f32>>> {
    if !cfg.pretrained_generator || cfg.baseline {
        return Ok(None);
    }
    if let Some(dir) = &gen.generator {
        return Ok(Some(load_generator_dir(dir)?));
    }
    let pcfg = TrainConfig {
        lr: PRETRAIN_LR,
        ..cfg.clone()
    };
    Ok(Some(pretrain_into(
        run,
        &pcfg,
        &data.vocab,
        &data.gaze,
        GAZE_DEV_FRACTION,
    )?))
}

fn base_config(
    verb: &str,
    data: &DataArgs,
    cfg: &TrainConfig,
    gen: &GeneratorSource,
    extra: Value,
) -> Value {
    json!({"verb": verb, "data": data.echo(), "train": cfg, "generator": gen.generator, "args": extra})
}

fn train_cmd(a: TrainCmdArgs, argv: &[String]) -> Result<()> {
    let mut cfg = a.train.resolve()?;
    let data = load_task(&a.data, &a.gen)?;
    let config = base_config(
        "train",
        &a.data,
        &cfg,
        &a.gen,
        json!({"k": a.k, "data_seed": a.data_seed, "lr_grid": a.lr_grid}),
    );
    let run = RunDir::create(a.out.out.as_deref(), "train", &config, cfg.seed)?;
    run.write("vocab.txt", data.vocab.to_file_string())?;
    let generator = obtain_generator(&run, &cfg, &data, &a.gen)?;

    let pool = data.train.len();
    let k = a.k.unwrap_or_else(|| pool - (pool / 10).max(1));
    let split = low_resource_split(pool, k, a.data_seed, data.test.len())?;
    run.write_json("split.json", &split)?;
    let enc = encode_examples(&data.train, &data.vocab, cfg.max_len)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| enc[i].clone()).collect::<Vec<_>>();
    let (train, dev) = (pick(&split.train), pick(&split.dev));
    let test = encode_examples(&data.test, &data.vocab, cfg.max_len)?;

    let fit = |c: &TrainConfig| -> gazenlu::Result<_> {
        let (model, init) = build_joint(c, data.vocab.len(), &data.spec, generator.as_ref())?;
        let out = train_joint(&model, init, &data.spec, &train, &dev, c)?;
        Ok((model, out))
    };
    let mut lr_choice = Value::Null;
    if !a.lr_grid.is_empty() {
        let choice = select_lr(&a.lr_grid, |lr| {
            Ok(fit(&TrainConfig { lr, ..cfg.clone() })?.1.best_metric)
        })?;
        cfg.lr = choice.lr;
        lr_choice = serde_json::to_value(&choice)?;
    }
    let (model, out) = fit(&cfg)?;
    let n = if cfg.baseline {
        1
    } else {
        cfg.n_scanpaths_train
    };
    let test_metric = match evaluate_metric(&model, &out.store, &data.spec, &test, n, cfg.seed) {
        Ok(v) => json!(v),
        Err(gazenlu::Error::Metric(m)) => json!({ "error": m }),
        Err(e) => return Err(e.into()),
    };
    run.write("config.txt", cfg.to_kv())?;
    run.write("joint.ckpt", out.store.to_checkpoint_bytes())?;
    run.write("train_log.jsonl", log_to_jsonl(&out.log))?;
    run.write_json(
        "result.json",
        &json!({
            "task": data.spec.name,
            "metric": data.spec.metric,
            "best_epoch": out.best_epoch,
            "dev_metric": out.best_metric,
            "test_metric": test_metric,
            "lr_selection": lr_choice,
            "trainable_params": out.trainable_params,
            "frozen_params": out.frozen_params,
            "checkpoint_sha256": out.store.digest(),
        }),
    )?;
    let mut files = vec![
        "vocab.txt",
        "split.json",
        "config.txt",
        "joint.ckpt",
        "train_log.jsonl",
        "result.json",
    ];
    if run.file("generator.ckpt").exists() && a.gen.generator.is_none() && generator.is_some() {
        files.extend([
            "generator.ckpt",
            "pretrain_log.jsonl",
            "pretrain_result.json",
        ]);
    }
    run.write_manifest("train", argv, &config, &files)?;
    println!(
        "{} dev {:.4} test {} -> {}",
        data.spec.metric,
        out.best_metric,
        test_metric,
        run.path.display()
    );
    Ok(())
}

fn load_run_config(dir: &Path) -> Result<TrainConfig> {
    let p = dir.join("config.txt");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(TrainConfig::from_kv(&p.display().to_string(), &text)?)
}

fn evaluate_cmd(a: EvaluateArgs, argv: &[String]) -> Result<()> {
    let mut cfg = load_run_config(&a.run)?;
    if let Some(n) = a.n_scanpaths {
        cfg.n_scanpaths_train = n;
    }
    let mut d = a.data.clone();
    d.vocab.get_or_insert_with(|| a.run.join("vocab.txt"));
    let data = d.load()?;
    let ckpt = ParamStore::load(&a.run.join("joint.ckpt"))?;
    let (model, mut store) = build_joint(
        &TrainConfig {
            pretrained_generator: false,
            ..cfg.clone()
        },
        data.vocab.len(),
        &data.spec,
        None,
    )?;
    if store.copy_prefix_from(&ckpt, "")? != store.len() || ckpt.len() != store.len() {
        bail!("checkpoint does not match the model described by config.txt");
    }
    let digest = store.digest();
    let test = encode_examples(&data.test, &data.vocab, cfg.max_len)?;
    let n = if cfg.baseline {
        1
    } else {
        cfg.n_scanpaths_train
    };
    let outputs = predict_outputs(&model, &store, &test, n, cfg.seed)?;
    let gold: Vec<Label> = test.iter().map(|e| e.label).collect();
    let (value, error) = match gazenlu::evalkit::score(data.spec.metric, &outputs, &gold) {
        Ok(v) => (Some(v), None),
        Err(gazenlu::Error::Metric(m)) => (None, Some(m)),
        Err(e) => return Err(e.into()),
    };
    assert_eq!(store.digest(), digest);
    let config = json!({"verb": "evaluate", "run": a.run, "data": a.data.echo(), "n_scanpaths": n});
    let out = RunDir::create(a.out.out.as_deref(), "evaluate", &config, cfg.seed)?;
    let report = EvalReport::new(
        &data.spec.name,
        data.spec.metric,
        gazenlu::evalkit::ReportConfig {
            label: "test".into(),
            protocol: "evaluate".into(),
            k: None,
            n_scanpaths: n,
            freeze_generator: cfg.freeze_generator,
            pretrained_generator: cfg.pretrained_generator,
            baseline: cfg.baseline,
            lr: cfg.lr,
        },
        vec![RunValue {
            run: "test".into(),
            value,
            error,
            best_epoch: 0,
            generator_init: String::new(),
            generator_final: store.subset(GEN_PREFIX).digest(),
        }],
    );
    out.write_json("report.json", &report)?;
    let mut pred = String::from("id\tlabel\toutputs\n");
    for (inst, o) in data.test.iter().zip(&outputs) {
        let cells: Vec<String> = o.iter().map(|v| format!("{v:.6}")).collect();
        pred.push_str(&format!(
            "{}\t{}\t{}\n",
            inst.id,
            inst.label,
            cells.join(",")
        ));
    }
    out.write("predictions.tsv", pred)?;
    out.write_manifest(
        "evaluate",
        argv,
        &config,
        &["report.json", "predictions.tsv"],
    )?;
    match report.mean {
        Some(v) => println!("{} {v:.4} -> {}", data.spec.metric, out.path.display()),
        None => println!(
            "{} undefined ({}) -> {}",
            data.spec.metric,
            report.errors().join("; "),
            out.path.display()
        ),
    }
    Ok(())
}

fn generate_cmd(a: GenerateArgs, argv: &[String]) -> Result<()> {
    let cfg = load_run_config(&a.generator)?;
    let vocab = Vocab::load(&a.generator.join("vocab.txt"))?;
    let loaded = load_generator_dir(&a.generator)?;
    let (gen, mut store) = build_generator(&cfg, vocab.len())?;
    if store.copy_prefix_from(&loaded, GEN_PREFIX)? != store.len() {
        bail!("generator checkpoint does not match config.txt");
    }
    let mut texts = a.text.clone();
    if let Some(p) = &a.data {
        texts.extend(read_texts(p)?);
    }
    if texts.is_empty() {
        bail!("nothing to generate for: pass --text or --data");
    }
    if a.n == 0 {
        bail!("--n must be >= 1");
    }
    let mut lines = String::new();
    let base = RngState::new(a.seed, 0x67656e);
    for (i, t) in texts.iter().enumerate() {
        let enc = tokenize(t, None, &vocab, cfg.max_len)?;
        for j in 0..a.n {
            let (fix, stopped) =
                gen.generate(&store, &enc, base.derive(&[i as u64, j as u64]), None)?;
            let sp = Scanpath::hard(format!("{i}"), fix, stopped);
            lines.push_str(&serde_json::to_string(&sp)?);
            lines.push('\n');
        }
    }
    let config = json!({"verb": "generate", "generator": a.generator, "texts": texts, "n": a.n, "seed": a.seed});
    let run = RunDir::create(a.out.out.as_deref(), "generate", &config, a.seed)?;
    run.write("scanpaths.jsonl", &lines)?;
    run.write_manifest("generate", argv, &config, &["scanpaths.jsonl"])?;
    print!("{lines}");
    Ok(())
}

/// Encoded pool/test sets plus the starting generator of a protocol run.
fn experiment(
    run: &RunDir,
    data: &TaskData,
    cfg: &TrainConfig,
    gen: &GeneratorSource,
    jobs: usize,
    whole_pool: bool,
) -> Result<Experiment> {
    let generator = obtain_generator(run, cfg, data, gen)?;
    let mut pool = encode_examples(&data.train, &data.vocab, cfg.max_len)?;
    let test = encode_examples(&data.test, &data.vocab, cfg.max_len)?;
    if whole_pool {
        pool.extend(test.iter().cloned());
    }
    Ok(Experiment {
        task: data.spec.name.clone(),
        spec: data.spec.clone(),
        vocab_size: data.vocab.len(),
        pool,
        test,
        generator,
        jobs,
    })
}

fn generator_files(run: &RunDir, files: &mut Vec<&'static str>) {
    if run.file("generator.ckpt").exists() {
        files.extend([
            "generator.ckpt",
            "pretrain_log.jsonl",
            "pretrain_result.json",
        ]);
    }
}

fn sweep_cmd(a: SweepArgs, argv: &[String]) -> Result<()> {
    let cfg = a.train.resolve()?;
    let data = load_task(&a.data, &a.gen)?;
    let protocol = a.protocol.protocol();
    let config = base_config(
        "sweep",
        &a.data,
        &cfg,
        &a.gen,
        json!({"protocol": protocol, "counts": a.counts}),
    );
    let run = RunDir::create(a.out.out.as_deref(), "sweep", &config, cfg.seed)?;
    let exp = experiment(
        &run,
        &data,
        &cfg,
        &a.gen,
        a.jobs,
        matches!(protocol, Protocol::CrossVal { .. }),
    )?;
    let report = sweep_scanpaths(&exp, &cfg, &protocol, &a.counts)?;
    run.write_json("sweep.json", &report)?;
    run.write("sweep.csv", report.to_csv())?;
    let mut files = vec!["sweep.json", "sweep.csv"];
    generator_files(&run, &mut files);
    run.write_manifest("sweep", argv, &config, &files)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn lowresource_cmd(a: LowResourceArgs, argv: &[String]) -> Result<()> {
    let cfg = a.train.resolve()?;
    let data = load_task(&a.data, &a.gen)?;
    let config = base_config(
        "lowresource",
        &a.data,
        &cfg,
        &a.gen,
        json!({"ks": a.ks, "data_seeds": a.data_seeds}),
    );
    let run = RunDir::create(a.out.out.as_deref(), "lowresource", &config, cfg.seed)?;
    let exp = experiment(&run, &data, &cfg, &a.gen, a.jobs, false)?;
    let reports = run_lowresource(&exp, &cfg, &a.ks, &a.data_seeds)?;
    run.write_json("reports.json", &reports)?;
    run.write("reports.csv", reports_to_csv(&reports))?;
    let mut files = vec!["reports.json", "reports.csv"];
    generator_files(&run, &mut files);
    run.write_manifest("lowresource", argv, &config, &files)?;
    for r in &reports {
        print_summary(r);
    }
    Ok(())
}

fn crossval_cmd(a: CrossvalArgs, argv: &[String]) -> Result<()> {
    let cfg = a.train.resolve()?;
    let data = load_task(&a.data, &a.gen)?;
    let config = base_config("crossval", &a.data, &cfg, &a.gen, json!({"folds": a.folds}));
    let run = RunDir::create(a.out.out.as_deref(), "crossval", &config, cfg.seed)?;
    let exp = experiment(&run, &data, &cfg, &a.gen, a.jobs, true)?;
    let report = run_crossval(&exp, &cfg, a.folds)?;
    run.write_json("report.json", &report)?;
    run.write("report.csv", report.to_csv())?;
    let mut files = vec!["report.json", "report.csv"];
    generator_files(&run, &mut files);
    run.write_manifest("crossval", argv, &config, &files)?;
    print_summary(&report);
    Ok(())
}

fn ablate_cmd(a: AblateArgs, argv: &[String]) -> Result<()> {
    let cfg = TrainConfig {
        pretrained_generator: true,
        ..a.train.resolve()?
    };
    let data = load_task(&a.data, &a.gen)?;
    let protocol = a.protocol.protocol();
    let config = base_config(
        "ablate",
        &a.data,
        &cfg,
        &a.gen,
        json!({"protocol": protocol}),
    );
    let run = RunDir::create(a.out.out.as_deref(), "ablate", &config, cfg.seed)?;
    let exp = experiment(
        &run,
        &data,
        &cfg,
        &a.gen,
        a.jobs,
        matches!(protocol, Protocol::CrossVal { .. }),
    )?;
    let report = run_ablations(&exp, &cfg, &protocol)?;
    run.write_json("ablation.json", &report)?;
    run.write("ablation.csv", report.to_csv())?;
    let mut files = vec!["ablation.json", "ablation.csv"];
    generator_files(&run, &mut files);
    run.write_manifest("ablate", argv, &config, &files)?;
    for r in &report.configs {
        print_summary(r);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_summary(r: &EvalReport) {
    println!(
        "{}\t{}\t{}\t{} ± {}\t({} runs{})",
        r.task,
        r.config.label,
        r.metric,
        fmt_opt(r.mean),
        fmt_opt(r.stderr),
        r.runs.len(),
        if r.errors().is_empty() {
            String::new()
        } else {
            format!(", {} undefined", r.errors().len())
        }
    );
}

/// Everything a report file can hold, flattened to its evaluation reports.
fn parse_reports(v: Value) -> Result<Vec<EvalReport>> {
    if let Ok(r) = serde_json::from_value::<EvalReport>(v.clone()) {
        return Ok(vec![r]);
    }
    if let Ok(rs) = serde_json::from_value::<Vec<EvalReport>>(v.clone()) {
        return Ok(rs);
    }
    if let Ok(s) = serde_json::from_value::<SweepReport>(v.clone()) {
        return Ok(s.points.into_iter().map(|p| p.report).collect());
    }
    if let Ok(a) = serde_json::from_value::<AblationReport>(v) {
        return Ok(a.configs);
    }
    bail!("not a report file")
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let v: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let reports = parse_reports(v).with_context(|| a.input.display().to_string())?;
    if a.csv {
        print!("{}", reports_to_csv(&reports));
    } else {
        for r in &reports {
            print_summary(r);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verbs_parse() {
        Cli::try_parse_from([
            "gazenlu",
            "pretrain-gaze",
            "--corpus",
            "g.tsv",
            "--out",
            "run1",
        ])
        .unwrap();
        let c = Cli::try_parse_from([
            "gazenlu",
            "train",
            "--task",
            "keyword",
            "--k",
            "200",
            "--data-seed",
            "111",
            "--n-scanpaths",
            "7",
        ])
        .unwrap();
        let Command::Train(t) = c.cmd else { panic!() };
        assert_eq!(t.train.resolve().unwrap().n_scanpaths_train, 7);
        assert_eq!(t.k, Some(200));
        assert!(Cli::try_parse_from(["gazenlu", "fly"]).is_err());
        assert!(Cli::try_parse_from(["gazenlu", "train", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["gazenlu", "pretrain-gaze"]).is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "lr = 0.01\nseed = 5\n").unwrap();
        let args = TrainArgs {
            config: Some(p),
            set: vec!["patience=2".into()],
            lr: Some(0.002),
            scratch: true,
            ..TrainArgs::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(
            (c.lr, c.seed, c.patience, c.pretrained_generator),
            (0.002, 5, 2, false)
        );
    }

    #[test]
    fn unknown_task_is_rejected() {
        let c = Cli::try_parse_from(["gazenlu", "train", "--task", "nope"]).unwrap();
        let Command::Train(t) = c.cmd else { panic!() };
        let err = t.data.load().err().unwrap().to_string();
        assert!(err.contains("unknown task"), "{err}");
    }
}

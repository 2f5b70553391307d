//! `cogpath`: generate data, train, evaluate, ablate and sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cogpath::copnet::CopConfig;
use cogpath::evaluation::{
    ablation_reports, answer_distribution_svg, answer_distribution_from_predictions, eval_reports_csv,
    evaluate, expert_grid_sweep, khot_sweep, predict_samples, routing_heatmap_svg, routing_stats,
    sweep_csv, ScoreVariant, SweepRow, DEFAULT_PAIRS,
};
use cogpath::synthdata::{
    answer_prior, generate_dataset, load_dataset, save_dataset, tv_distance, BiasSpec, DataDims,
    Dataset, DEFAULT_NOISE_SIGMA,
};
use cogpath::training::{
    epoch_log_csv, load_checkpoint, network_from_checkpoint, save_checkpoint, train, Arch, Network,
    TrainConfig,
};
use cogpath::Error;

#[derive(Parser)]
#[command(name = "cogpath", version, about = "Routed-expert debiasing experiments on a synthetic shifted-prior benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one score variant.
    Eval(EvalArgs),
    /// Evaluate every score variant, retraining the broken-causal model.
    Ablate(EvalArgs),
    /// Train expert-count and k-hot grids.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Shared {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    types: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    hidden1: Option<usize>,
    #[arg(long)]
    hidden2: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    model: ModelFlags,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Train the equal-budget monolithic baseline instead.
    #[arg(long)]
    monolithic: bool,
    /// Train the variant whose unimodal branch sees the image.
    #[arg(long)]
    broken_causal: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Expert-count pairs such as `3,3 5,5`.
    #[arg(long, num_args = 1..)]
    pairs: Option<Vec<String>>,
    #[arg(long, num_args = 1..)]
    ks: Option<Vec<usize>>,
    #[arg(long, num_args = 1..)]
    seeds: Option<Vec<u64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenDataConfig {
    seed: u64,
    beta: f64,
    types: usize,
    vocab: usize,
    n_train: usize,
    n_test: usize,
    d_q: usize,
    d_v: usize,
    noise_sigma: f64,
    out: PathBuf,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            beta: 0.9,
            types: 3,
            vocab: 16,
            n_train: 20_000,
            n_test: 5_000,
            d_q: 32,
            d_v: 32,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            out: PathBuf::from("data"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainRunConfig {
    dataset: Option<PathBuf>,
    out: PathBuf,
    train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("run"),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvalConfig {
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    variant: ScoreVariant,
    seed: u64,
    out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            variant: ScoreVariant::ZFinal,
            seed: 0,
            out: PathBuf::from("eval"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepConfig {
    dataset: Option<PathBuf>,
    out: PathBuf,
    train: TrainConfig,
    pairs: Vec<(usize, usize)>,
    ks: Vec<usize>,
    seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("sweep"),
            train: TrainConfig::default(),
            pairs: DEFAULT_PAIRS.to_vec(),
            ks: vec![1, 2, 3],
            seeds: vec![0, 1, 2],
        }
    }
}

/// A user-facing failure: exit code 2.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UserError(msg.into()))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| user(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| user(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Output directory that is removed again if the command fails with a user error.
struct OutDir {
    path: PathBuf,
    created: bool,
}

impl OutDir {
    fn create(path: &Path) -> Result<Self> {
        let created = !path.exists();
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            created,
        })
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

fn guarded(dir: &OutDir, body: impl FnOnce() -> Result<()>) -> Result<()> {
    let result = body();
    if let Err(e) = &result {
        if is_user_error(e) && dir.created {
            let _ = fs::remove_dir_all(&dir.path);
        }
    }
    result
}

fn is_user_error(e: &anyhow::Error) -> bool {
    e.downcast_ref::<UserError>().is_some()
        || e.downcast_ref::<Error>().is_some_and(Error::is_user_error)
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| user(format!("--{flag} is required")))
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(user(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn parse_variant(name: &str) -> Result<ScoreVariant> {
    Ok(name.parse::<ScoreVariant>()?)
}

fn parse_pair(text: &str) -> Result<(usize, usize)> {
    let bad = || user(format!("pair {text:?} must look like N1,N2"));
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn apply_model_flags(cfg: &mut TrainConfig, flags: &ModelFlags) -> Result<()> {
    let m = &mut cfg.model;
    let experts_changed = flags.n1.is_some() || flags.n2.is_some();
    m.n1 = flags.n1.unwrap_or(m.n1);
    m.n2 = flags.n2.unwrap_or(m.n2);
    if experts_changed {
        m.fit_hidden()?;
    }
    m.hidden1 = flags.hidden1.unwrap_or(m.hidden1);
    m.hidden2 = flags.hidden2.unwrap_or(m.hidden2);
    m.k_select = flags.k.unwrap_or(m.k_select);
    cfg.epochs = flags.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = flags.batch.unwrap_or(cfg.batch_size);
    cfg.adam.lr = flags.lr.unwrap_or(cfg.adam.lr);
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: GenDataConfig = load_config(args.shared.config.as_deref())?;
    cfg.seed = args.shared.seed.unwrap_or(cfg.seed);
    cfg.out = args.shared.out.unwrap_or(cfg.out);
    cfg.beta = args.beta.unwrap_or(cfg.beta);
    cfg.types = args.types.unwrap_or(cfg.types);
    cfg.vocab = args.vocab.unwrap_or(cfg.vocab);
    cfg.n_train = args.n_train.unwrap_or(cfg.n_train);
    cfg.n_test = args.n_test.unwrap_or(cfg.n_test);
    let spec = BiasSpec::shifted(cfg.vocab, cfg.types, cfg.beta, cfg.noise_sigma)?;
    spec.validate(cfg.vocab)?;

    let dir = OutDir::create(&cfg.out)?;
    guarded(&dir, || {
        write_json(&dir.join("gen_config.json"), &cfg)?;
        let dims = DataDims {
            d_q: cfg.d_q,
            d_v: cfg.d_v,
        };
        let data = generate_dataset(&spec, dims, cfg.vocab, cfg.n_train, cfg.n_test, cfg.seed)?;
        save_dataset(&dir.path, &data)?;
        println!("type  answers  TV(train, test)");
        for (t, answers) in spec.answers_per_type.iter().enumerate() {
            let train = answer_prior(&data.train, t, cfg.vocab)?;
            let test = answer_prior(&data.test, t, cfg.vocab)?;
            println!("{t:>4}  {:>7}  {:.4}", answers.len(), tv_distance(&train, &test));
        }
        println!(
            "wrote {} train and {} test samples to {}",
            data.train.len(),
            data.test.len(),
            dir.path.display()
        );
        Ok(())
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainRunConfig = load_config(args.shared.config.as_deref())?;
    cfg.out = args.shared.out.unwrap_or(cfg.out);
    cfg.dataset = args.dataset.or(cfg.dataset);
    cfg.train.seed = args.shared.seed.unwrap_or(cfg.train.seed);
    apply_model_flags(&mut cfg.train, &args.model)?;
    if args.monolithic {
        cfg.train.arch = Arch::Monolithic;
    }
    if args.broken_causal {
        cfg.train.model.broken_causal = true;
    }
    cfg.train.validate()?;
    let data = open_dataset(&require(cfg.dataset.clone(), "dataset")?)?;
    cfg.train.check_dataset(&data.meta)?;

    let dir = OutDir::create(&cfg.out)?;
    guarded(&dir, || {
        write_json(&dir.join("config.json"), &cfg)?;
        let outcome = train(cfg.train.clone(), &data)?;
        save_checkpoint(&dir.join("last.ckpt"), &outcome.trainer.checkpoint())?;
        let (best_epoch, best_net) = &outcome.best;
        let mut best = outcome.trainer.checkpoint();
        best.epoch = *best_epoch;
        best.tensors = tensors_of(best_net, &best);
        save_checkpoint(&dir.join("best.ckpt"), &best)?;
        fs::write(
            dir.join("log.csv"),
            epoch_log_csv(&outcome.log, data.meta.bias.num_types),
        )?;
        let last = outcome.log.last().and_then(|r| r.val_acc_overall).unwrap_or(f64::NAN);
        println!(
            "trained {} epochs: final accuracy {last:.4}, best epoch {best_epoch}",
            outcome.trainer.epoch
        );
        Ok(())
    })
}

/// Checkpoint tensors with `net`'s parameters and the Adam moments of `template`.
fn tensors_of(net: &Network, template: &cogpath::training::Checkpoint) -> Vec<cogpath::training::NamedTensor> {
    let mut tensors = template.tensors.clone();
    for (name, p) in net.param_names().iter().zip(net.params()) {
        if let Some(t) = tensors.iter_mut().find(|t| &t.name == name) {
            t.data = p.values().to_vec();
        }
    }
    tensors
}

fn resolve_eval(args: EvalArgs, default_out: &str) -> Result<EvalConfig> {
    let mut cfg: EvalConfig = load_config(args.shared.config.as_deref())?;
    if args.shared.config.is_none() {
        cfg.out = PathBuf::from(default_out);
    }
    cfg.out = args.shared.out.unwrap_or(cfg.out);
    cfg.seed = args.shared.seed.unwrap_or(cfg.seed);
    cfg.checkpoint = args.checkpoint.or(cfg.checkpoint);
    cfg.dataset = args.dataset.or(cfg.dataset);
    if let Some(v) = args.variant {
        cfg.variant = parse_variant(&v)?;
    }
    Ok(cfg)
}

fn load_inputs(cfg: &EvalConfig) -> Result<(cogpath::training::Checkpoint, Network, Dataset)> {
    let ckpt_path = require(cfg.checkpoint.clone(), "checkpoint")?;
    if !ckpt_path.is_file() {
        return Err(user(format!("checkpoint {} does not exist", ckpt_path.display())));
    }
    let ckpt = load_checkpoint(&ckpt_path)?;
    let data = open_dataset(&require(cfg.dataset.clone(), "dataset")?)?;
    let network = network_from_checkpoint(&ckpt)?;
    Ok((ckpt, network, data))
}

fn write_figures(dir: &OutDir, network: &Network, data: &Dataset) -> Result<()> {
    let preds = predict_samples(network, &data.test, ScoreVariant::ZFinal, 0)?;
    let mut dists = Vec::new();
    for t in 0..data.meta.bias.num_types {
        let d = answer_distribution_from_predictions(data, &preds, t)?;
        fs::write(dir.join(&format!("answers_t{t}.svg")), answer_distribution_svg(&d))?;
        dists.push(d);
    }
    write_json(&dir.join("answer_distributions.json"), &dists)?;
    if let Network::Cop(model) = network {
        let stats = routing_stats(model, &data.test, &data.meta)?;
        for t in 0..data.meta.bias.num_types {
            fs::write(dir.join(&format!("routing_t{t}.svg")), routing_heatmap_svg(&stats, t))?;
        }
        write_json(&dir.join("routing.json"), &stats)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = resolve_eval(args, "eval")?;
    let (_, network, data) = load_inputs(&cfg)?;
    let dir = OutDir::create(&cfg.out)?;
    guarded(&dir, || {
        write_json(&dir.join("eval_config.json"), &cfg)?;
        let report = evaluate(&network, &data.test, &data.meta, cfg.variant, cfg.seed)?;
        write_json(&dir.join("eval.json"), &report)?;
        fs::write(dir.join("eval.csv"), eval_reports_csv(std::slice::from_ref(&report)))?;
        write_figures(&dir, &network, &data)?;
        println!("{}: overall {:.4}", report.variant, report.overall);
        for (t, a) in report.per_type.iter().enumerate() {
            println!("  type {t}: {a:.4}");
        }
        Ok(())
    })
}

fn cmd_ablate(args: EvalArgs) -> Result<()> {
    let cfg = resolve_eval(args, "ablate")?;
    let (ckpt, network, data) = load_inputs(&cfg)?;
    if !matches!(network, Network::Cop(_)) {
        return Err(user("ablations need a routed checkpoint"));
    }
    let dir = OutDir::create(&cfg.out)?;
    guarded(&dir, || {
        write_json(&dir.join("ablate_config.json"), &cfg)?;
        let mut broken_cfg = ckpt.config.clone();
        broken_cfg.model.broken_causal = true;
        let broken = train(broken_cfg, &data)?.best.1;
        let reports = ablation_reports(&network, Some(&broken), &data.test, &data.meta, cfg.seed)?;
        write_json(&dir.join("ablation.json"), &reports)?;
        fs::write(dir.join("ablation.csv"), eval_reports_csv(&reports))?;
        for r in &reports {
            println!("{:<10} {:.4}", r.variant.name(), r.overall);
        }
        Ok(())
    })
}

fn print_rows(title: &str, rows: &[SweepRow]) {
    println!("{title}");
    for r in rows {
        println!(
            "  n1={} n2={} k={} h=({}, {}): {:.4} ± {:.4}",
            r.n1, r.n2, r.k, r.hidden1, r.hidden2, r.mean, r.stderr
        );
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg: SweepConfig = load_config(args.shared.config.as_deref())?;
    cfg.out = args.shared.out.unwrap_or(cfg.out);
    cfg.dataset = args.dataset.or(cfg.dataset);
    cfg.train.seed = args.shared.seed.unwrap_or(cfg.train.seed);
    apply_model_flags(&mut cfg.train, &args.model)?;
    let run_grid = args.pairs.is_some() || args.ks.is_none();
    let run_khot = args.ks.is_some() || args.pairs.is_none();
    if let Some(p) = &args.pairs {
        cfg.pairs = p.iter().map(|s| parse_pair(s)).collect::<Result<_>>()?;
    }
    cfg.ks = args.ks.unwrap_or(cfg.ks);
    cfg.seeds = args.seeds.unwrap_or(cfg.seeds);
    if cfg.seeds.is_empty() {
        return Err(user("--seeds needs at least one seed"));
    }
    cfg.train.validate()?;
    let limit = cfg.train.model.n1.min(cfg.train.model.n2);
    if let Some(&k) = cfg.ks.iter().find(|&&k| k == 0 || k > limit) {
        return Err(user(format!("k = {k} must lie in 1..={limit}")));
    }
    for &(n1, n2) in &cfg.pairs {
        let mut m: CopConfig = cfg.train.model.clone();
        m.n1 = n1;
        m.n2 = n2;
        m.fit_hidden()?;
    }
    let data = open_dataset(&require(cfg.dataset.clone(), "dataset")?)?;
    cfg.train.check_dataset(&data.meta)?;

    let dir = OutDir::create(&cfg.out)?;
    guarded(&dir, || {
        write_json(&dir.join("sweep_config.json"), &cfg)?;
        if run_grid {
            let rows = expert_grid_sweep(&cfg.train, &cfg.pairs, &cfg.seeds, &data)?;
            write_json(&dir.join("grid.json"), &rows)?;
            fs::write(dir.join("grid.csv"), sweep_csv(&rows))?;
            print_rows("expert grid", &rows);
        }
        if run_khot {
            let rows = khot_sweep(&cfg.train, &cfg.ks, &cfg.seeds, &data)?;
            write_json(&dir.join("khot.json"), &rows)?;
            fs::write(dir.join("khot.csv"), sweep_csv(&rows))?;
            print_rows("k-hot", &rows);
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_user_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

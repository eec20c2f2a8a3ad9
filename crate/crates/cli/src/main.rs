//! `dcgl`: generate data, train, evaluate and gradient-check from the shell.

mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcgl_core::corpus::{gen_synthetic, DataBundle, DataPaths, SynthConfig};
use dcgl_core::evalkit::{GroupReport, GroupSpec, Side, DEFAULT_KS};
use dcgl_core::gradsuite::{run_gradient_suite, SuiteConfig};
use dcgl_core::trainer::{fit, RunMetrics, TrainConfig, TrainState};
use dcgl_core::Error;
use log::info;

use manifest::{now, sha256_file, RunManifest, BUILD_ID};

#[derive(Parser)]
#[command(name = "dcgl", version, about = "Dual-channel knowledge-aware recommender")]
struct Cli {
    /// Worker threads for ranking and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, history and manifest.
    Train(TrainArgs),
    /// Score a trained run on validation and test splits.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    popularity_exponent: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    semantic_dim: Option<usize>,
    /// Make semantic noise grow as item popularity falls.
    #[arg(long)]
    noise_by_frequency: bool,
    #[arg(long)]
    semantic_scale: Option<f64>,
    #[arg(long)]
    min_interactions: Option<usize>,
    #[arg(long)]
    max_interactions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// One optional flag per config key.
#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    kg_layers: Option<String>,
    #[arg(long)]
    cf_layers: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    lambda_aug: Option<String>,
    #[arg(long)]
    lambda_align: Option<String>,
    #[arg(long)]
    lambda_gate: Option<String>,
    #[arg(long)]
    lambda_reg: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    negatives: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// none, no_llm, no_id, no_aug, no_align, no_freq or cat.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    layer_combine: Option<String>,
    #[arg(long)]
    infonce_denominator: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    transe_batch_size: Option<String>,
    #[arg(long)]
    ssl_chunk: Option<String>,
    #[arg(long)]
    detach_alpha: Option<String>,
    #[arg(long)]
    adapter_mid: Option<String>,
    #[arg(long)]
    early_stop_k: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("dim", &self.dim),
            ("kg_layers", &self.kg_layers),
            ("cf_layers", &self.cf_layers),
            ("learning_rate", &self.learning_rate),
            ("lambda_aug", &self.lambda_aug),
            ("lambda_align", &self.lambda_align),
            ("lambda_gate", &self.lambda_gate),
            ("lambda_reg", &self.lambda_reg),
            ("rho", &self.rho),
            ("mu", &self.mu),
            ("tau", &self.tau),
            ("batch_size", &self.batch_size),
            ("negatives", &self.negatives),
            ("max_epochs", &self.max_epochs),
            ("patience", &self.patience),
            ("seed", &self.seed),
            ("ablation", &self.ablation),
            ("layer_combine", &self.layer_combine),
            ("infonce_denominator", &self.infonce_denominator),
            ("optimizer", &self.optimizer),
            ("transe_batch_size", &self.transe_batch_size),
            ("ssl_chunk", &self.ssl_chunk),
            ("detach_alpha", &self.detach_alpha),
            ("adapter_mid", &self.adapter_mid),
            ("early_stop_k", &self.early_stop_k),
        ]
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` lines; flags and DCGL_SEED take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Users with fewer interactions are dropped before splitting.
    #[arg(long, default_value_t = 10)]
    min_interactions: usize,
    /// Used only when the data directory has no split manifest.
    #[arg(long, default_value_t = 2024)]
    split_seed: u64,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Override the run's data directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the run's config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Repeatable, e.g. `user:0,18,36,72`.
    #[arg(long)]
    groups: Vec<String>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_) => 2,
                Error::NonFinite { .. } => 4,
                Error::Parse { .. }
                | Error::Link { .. }
                | Error::Data(_)
                | Error::Sampling(_)
                | Error::Checkpoint(_)
                | Error::MissingFile(_)
                | Error::Io(_)
                | Error::Json(_) => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        num_users: a.users.unwrap_or(d.num_users),
        num_items: a.items.unwrap_or(d.num_items),
        num_entities: a.entities.unwrap_or(d.num_entities),
        num_relations: a.relations.unwrap_or(d.num_relations),
        popularity_exponent: a.popularity_exponent.unwrap_or(d.popularity_exponent),
        latent_dim: a.latent_dim.unwrap_or(d.latent_dim),
        semantic_dim: a.semantic_dim.unwrap_or(d.semantic_dim),
        semantic_noise_by_frequency: a.noise_by_frequency,
        semantic_scale: a.semantic_scale.unwrap_or(d.semantic_scale),
        min_user_interactions: a.min_interactions.unwrap_or(d.min_user_interactions),
        max_user_interactions: a.max_interactions.unwrap_or(d.max_user_interactions),
        seed: a.seed.unwrap_or(d.seed),
    };
    cfg.validate()?;
    prepare_out(&a.out, a.force)?;
    let data = gen_synthetic(&cfg)?;
    data.write_dir(&a.out)?;
    info!(
        "wrote {} users, {} items, {} interactions, {} triplets to {}",
        data.graph.num_users,
        data.graph.num_items,
        data.graph.edges.len(),
        data.kg.triplets.len(),
        a.out.display()
    );
    Ok(())
}

fn build_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|_| Error::MissingFile(p.clone()))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Ok(seed) = std::env::var("DCGL_SEED") {
        cfg.set("seed", &seed)?;
    }
    for (key, value) in a.flags.pairs() {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_digests(paths: &DataPaths, config: Option<&Path>) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let files = [&paths.interactions, &paths.kg, &paths.embeddings, &paths.id_map, &paths.split];
    for p in files.into_iter().map(|p| p.as_path()).chain(config) {
        if p.exists() {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = build_config(&a)?;
    let paths = DataPaths::in_dir(&a.data);
    let bundle = DataBundle::load(&paths, a.min_interactions, a.split_seed, cfg.ablation.uses_semantic())?;
    prepare_out(&a.out, a.force)?;

    let config_out = a.out.join("config.txt");
    let checkpoint = a.out.join("checkpoint.bin");
    let history = a.out.join("history.jsonl");
    let manifest_path = a.out.join("manifest.json");
    let mut manifest = RunManifest {
        command: std::env::args().collect(),
        config_path: a.config.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash_hex(),
        data_dir: a.data.clone(),
        min_interactions: a.min_interactions,
        split_seed: a.split_seed,
        inputs: input_digests(&paths, a.config.as_deref())?,
        outputs: BTreeMap::from([
            ("config".to_string(), config_out.clone()),
            ("checkpoint".to_string(), checkpoint.clone()),
            ("history".to_string(), history.clone()),
        ]),
        started: now(),
        finished: None,
        status: "running".into(),
        best_epoch: None,
        epochs_run: None,
        build: BUILD_ID.into(),
    };
    std::fs::write(&config_out, cfg.to_text())?;
    manifest.write(&manifest_path)?;
    info!(
        "training {} users, {} items, {} train edges, {} triplets, ablation {}",
        bundle.graph.num_users,
        bundle.graph.num_items,
        bundle.split.train.len(),
        bundle.kg.triplets.len(),
        cfg.ablation.tag()
    );

    let result = fit(&cfg, &bundle);
    manifest.finished = Some(now());
    let res = match result {
        Ok(r) => r,
        Err(e) => {
            manifest.status = format!("failed: {e}");
            manifest.write(&manifest_path)?;
            return Err(e.into());
        }
    };
    res.history.write_jsonl(BufWriter::new(File::create(&history)?))?;
    let mut w = BufWriter::new(File::create(&checkpoint)?);
    res.best.save(&mut w)?;
    w.flush()?;
    manifest.status = if res.stopped_early { "early-stopped".into() } else { "completed".into() };
    manifest.best_epoch = Some(res.best_epoch);
    manifest.epochs_run = Some(res.history.epochs.len());
    manifest.write(&manifest_path)?;
    info!(
        "best epoch {} valid recall@{} {:.4} after {} epochs",
        res.best_epoch,
        cfg.early_stop_k,
        res.best_valid_recall,
        res.history.epochs.len()
    );
    Ok(())
}

fn write_group_table(path: &Path, g: &GroupReport) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "bin\tpopulation\tevaluated")?;
    for k in &g.ks {
        write!(w, "\trecall@{k}")?;
    }
    for k in &g.ks {
        write!(w, "\tndcg@{k}")?;
    }
    writeln!(w)?;
    for r in &g.rows {
        write!(w, "{}\t{}\t{}", r.label, r.population, r.evaluated)?;
        for x in r.recall.iter().chain(&r.ndcg) {
            write!(w, "\t{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let manifest_path = a.run.join("manifest.json");
    let manifest = RunManifest::read(&manifest_path).map_err(|_| Error::MissingFile(manifest_path.clone()))?;
    let config_path = a.config.clone().unwrap_or_else(|| a.run.join("config.txt"));
    let text = std::fs::read_to_string(&config_path).map_err(|_| Error::MissingFile(config_path.clone()))?;
    let cfg = TrainConfig::parse(&text)?;
    let data_dir = a.data.clone().unwrap_or_else(|| manifest.data_dir.clone());
    let bundle = DataBundle::load(
        &DataPaths::in_dir(&data_dir),
        manifest.min_interactions,
        manifest.split_seed,
        cfg.ablation.uses_semantic(),
    )?;
    let ckpt_path = a.run.join("checkpoint.bin");
    let file = File::open(&ckpt_path).map_err(|_| Error::MissingFile(ckpt_path.clone()))?;
    let state = TrainState::load(&cfg, &bundle, std::io::BufReader::new(file))?;

    let ks = a.ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("ks must be positive".into()).into());
    }
    let groups = if a.groups.is_empty() {
        vec![GroupSpec::default_user(), GroupSpec::default_item()]
    } else {
        a.groups.iter().map(|g| GroupSpec::parse(g)).collect::<dcgl_core::Result<Vec<_>>>()?
    };
    let (metrics, gates) = RunMetrics::compute(
        &state,
        &bundle,
        &ks,
        &groups,
        manifest.best_epoch.unwrap_or(0),
        manifest.epochs_run.unwrap_or(0),
    );

    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("metrics.json"), metrics.to_json() + "\n")?;
    let mut seen = BTreeMap::new();
    for g in &metrics.groups {
        let side = match g.side {
            Side::User => "user",
            Side::Item => "item",
        };
        let n = seen.entry(side).or_insert(0usize);
        let name = if *n == 0 { format!("groups_{side}.tsv") } else { format!("groups_{side}_{n}.tsv") };
        *n += 1;
        write_group_table(&out.join(name), g)?;
    }
    let mut w = BufWriter::new(File::create(out.join("gates.tsv"))?);
    gates.write_tsv(&mut w)?;
    w.flush()?;
    for (i, k) in ks.iter().enumerate() {
        println!("test recall@{k} {:.6} ndcg@{k} {:.6}", metrics.test.recall[i], metrics.test.ndcg[i]);
    }
    Ok(())
}

fn cmd_gradcheck(a: GradArgs) -> CliResult<()> {
    let cfg = SuiteConfig { trials: a.trials, seed: a.seed, ..SuiteConfig::default() };
    let reports = run_gradient_suite(&cfg);
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {:<28} max_rel_error {:.3e} trials {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.kernel,
            r.max_rel_error,
            r.trials
        );
        failed += usize::from(!r.pass);
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use dcgl_core::trainer::CONFIG_KEYS;

    #[test]
    fn every_config_key_has_a_flag() {
        let cmd = Cli::command();
        let train = cmd.find_subcommand("train").unwrap();
        for key in CONFIG_KEYS {
            let long = key.replace('_', "-");
            assert!(
                train.get_arguments().any(|a| a.get_long() == Some(long.as_str())),
                "missing --{long}"
            );
        }
        assert_eq!(ConfigFlags::default().pairs().len(), CONFIG_KEYS.len());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}

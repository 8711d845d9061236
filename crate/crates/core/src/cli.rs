//! Command-line entry point and the end-to-end adaptation pipeline.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::costmodel::{self, CostConfig, MAddsTable, DEFAULT_LAMBDA};
use crate::derive::{self, DiscreteArchitecture};
use crate::error::{Error, Result};
use crate::json;
use crate::numerics::{softmax, OptimizerConfig, ParameterBundle};
use crate::paramap::{self, MappingReport, DEFAULT_EPS};
use crate::rng::derive_seed;
use crate::searchloop::{self, LrMode, SearchSchedule};
use crate::searchspace::SearchSpaceConfig;
use crate::supernet::{BlockMode, MaskMode, Supernet, SupernetOptions};
use crate::toytask::{self, DatasetSpec, FinetuneConfig, SyntheticDataset};

pub const THREADS_ENV: &str = "NAS_ADAPT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "nas-adapt",
    version,
    about = "Search, map and fine-tune adapted backbones on a toy task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the bi-level search and write the supernet checkpoint and history
    Search(SearchArgs),
    /// Collapse a searched supernet into a discrete architecture
    Derive(DeriveArgs),
    /// Map source weights onto a derived architecture or a fresh supernet
    Remap(RemapArgs),
    /// Print discrete or expected MAdds as JSON
    Cost(CostArgs),
    /// Check that a mapping preserves the source function
    Verify(VerifyArgs),
    /// Train a discrete network (and its classifier head) on a dataset
    Finetune(FinetuneArgs),
    /// Write a synthetic classification dataset
    GenData(GenDataArgs),
    /// Data, source pre-training, mapping, search, derivation and fine-tuning in one go
    Run(RunArgs),
}

#[derive(Debug, Args, Clone, Copy)]
struct SupernetFlags {
    /// Channel masks: non_overlapping or overlapping
    #[arg(long, default_value = "non_overlapping")]
    mask_mode: MaskMode,
    /// Mixed-block weights: shared or individual
    #[arg(long, default_value = "shared")]
    block_mode: BlockMode,
}

impl From<SupernetFlags> for SupernetOptions {
    fn from(f: SupernetFlags) -> Self {
        SupernetOptions {
            mask_mode: f.mask_mode,
            block_mode: f.block_mode,
        }
    }
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 14)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    warmup: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Weight learning rate (SGD)
    #[arg(long, default_value_t = 0.02)]
    lr_w: f32,
    /// Architecture learning rate (Adam)
    #[arg(long, default_value_t = 3e-4)]
    lr_arch: f32,
    /// Weight learning-rate schedule: constant or cosine
    #[arg(long, default_value = "constant")]
    lr_mode: String,
    /// Start from this supernet checkpoint (e.g. a `remap` output) instead of fresh weights
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    supernet: SupernetFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: PathBuf,
}

#[derive(Debug, Args)]
struct DeriveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["dst_arch", "space"]))]
struct RemapArgs {
    /// Source parameter bundle
    #[arg(long)]
    src: PathBuf,
    /// Source architecture (defaults to the bundle's metadata)
    #[arg(long)]
    src_arch: Option<PathBuf>,
    /// Map onto this discrete architecture
    #[arg(long)]
    dst_arch: Option<PathBuf>,
    /// Map onto a fresh supernet over this search space
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    supernet: SupernetFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("subject").required(true).args(["arch", "ckpt"]))]
struct CostArgs {
    #[arg(long)]
    space: PathBuf,
    /// Discrete architecture JSON
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Supernet checkpoint; reports expected MAdds under its logits
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    src_arch: Option<PathBuf>,
    /// Mapped parameter bundle
    #[arg(long)]
    dst: PathBuf,
    #[arg(long)]
    dst_arch: Option<PathBuf>,
    /// Mapping report written by `remap`
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    arch: PathBuf,
    /// Initial parameters; fresh weights when absent
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss CSV
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 256)]
    n_samples: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Search space (defaults to the built-in desk space)
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f32,
    #[arg(long, default_value_t = 256)]
    n_samples: usize,
    #[arg(long, default_value_t = 4)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 4)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f32,
    #[command(flatten)]
    supernet: SupernetFlags,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code: 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", json::to_sorted_string(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, json::to_sorted_string(value)? + "\n")?;
    Ok(())
}

fn lr_mode(s: &str) -> Result<LrMode> {
    match s {
        "constant" => Ok(LrMode::Constant),
        "cosine" => Ok(LrMode::Cosine),
        _ => Err(Error::param(format!("unknown lr mode `{s}`"))),
    }
}

/// Supernet checkpoints record their options as bundle metadata.
fn save_supernet(net: &Supernet, path: &Path) -> Result<()> {
    let mut params = net.params.clone();
    params.metadata = Some(json::to_sorted_string(&net.options)?);
    params.save(path)
}

fn load_supernet(config: &SearchSpaceConfig, path: &Path, fallback: SupernetOptions) -> Result<Supernet> {
    let params = ParameterBundle::load(path)?;
    let options = match params.metadata.as_deref() {
        Some(m) => serde_json::from_str(m)?,
        None => fallback,
    };
    Supernet::from_params(config, options, params)
}

fn load_arch(explicit: Option<&Path>, bundle: &ParameterBundle) -> Result<DiscreteArchitecture> {
    match explicit {
        Some(p) => DiscreteArchitecture::load(p),
        None => paramap::source_architecture(bundle),
    }
}

#[derive(Serialize)]
struct CostReport {
    total: f64,
    per_block: Vec<f64>,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Search(a) => {
            let config = SearchSpaceConfig::load(&a.space)?;
            let data = SyntheticDataset::load(&a.data)?;
            let options = a.supernet.into();
            let net = match &a.init {
                Some(p) => load_supernet(&config, p, options)?,
                None => Supernet::build(&config, options, derive_seed(a.seed, "supernet"))?,
            };
            let schedule = SearchSchedule {
                total_epochs: a.epochs,
                warmup_epochs: a.warmup,
                batch_size: a.batch_size,
                seed: a.seed,
                weight_opt: OptimizerConfig::sgd(a.lr_w, 0.9, 1e-4),
                arch_opt: OptimizerConfig::adam(a.lr_arch, 1e-3),
                clip_norm: 10.0,
                lr_mode: lr_mode(&a.lr_mode)?,
            };
            let cost = CostConfig::for_source(&config, a.lambda)?;
            let (net, history) = searchloop::search(net, &data, &schedule, &cost)?;
            save_supernet(&net, &a.out)?;
            history.write_csv(&a.history)?;
            let arch = derive::derive_from_supernet(&net)?;
            print_json(&serde_json::json!({
                "steps": history.steps.len(),
                "final": history.steps.last(),
                "derived_madds": costmodel::madds_of_network(&arch),
            }))
        }
        Command::Derive(a) => {
            let config = SearchSpaceConfig::load(&a.space)?;
            let params = ParameterBundle::load(&a.ckpt)?;
            let (alpha, beta) = derive::logits_from_params(&config, &params)?;
            let arch = derive::derive_architecture(&config, &alpha, &beta)?;
            arch.save(&a.out)?;
            print_json(&serde_json::json!({ "madds": costmodel::madds_of_network(&arch) }))
        }
        Command::Remap(a) => {
            let src = ParameterBundle::load(&a.src)?;
            let src_arch = load_arch(a.src_arch.as_deref(), &src)?;
            let report = if let Some(dst) = &a.dst_arch {
                let arch = DiscreteArchitecture::load(dst)?;
                let (params, report) = paramap::map_to_derived(&src_arch, &src, &arch, a.eps, a.seed)?;
                params.save(&a.out)?;
                report
            } else {
                let space = a.space.as_ref().expect("clap enforces a target");
                let config = SearchSpaceConfig::load(space)?;
                let net = Supernet::build(&config, a.supernet.into(), derive_seed(a.seed, "supernet"))?;
                let (net, report) = paramap::map_to_supernet(&src_arch, &src, net, a.eps, a.seed)?;
                save_supernet(&net, &a.out)?;
                report
            };
            fs::write(&a.report, report.to_json()? + "\n")?;
            let counts: std::collections::BTreeMap<String, usize> =
                report.entries.values().fold(Default::default(), |mut m, e| {
                    *m.entry(e.rule.to_string()).or_default() += 1;
                    m
                });
            print_json(&counts)
        }
        Command::Cost(a) => {
            let config = SearchSpaceConfig::load(&a.space)?;
            let (total, per_block) = if let Some(p) = &a.arch {
                costmodel::madds_of_discrete(&DiscreteArchitecture::load(p)?, &config)?
            } else {
                let params = ParameterBundle::load(a.ckpt.as_ref().expect("clap enforces a subject"))?;
                let (alpha, beta) = derive::logits_from_params(&config, &params)?;
                let ap: Vec<Vec<Vec<f32>>> = alpha.iter().map(|b| b.iter().map(|v| softmax(v)).collect()).collect();
                let bp: Vec<Vec<f32>> = beta.iter().map(|v| softmax(v)).collect();
                MAddsTable::build(&config)?.expected(&ap, &bp)?
            };
            print_json(&CostReport { total, per_block })
        }
        Command::Verify(a) => {
            let src = ParameterBundle::load(&a.src)?;
            let dst = ParameterBundle::load(&a.dst)?;
            let src_arch = load_arch(a.src_arch.as_deref(), &src)?;
            let dst_arch = load_arch(a.dst_arch.as_deref(), &dst)?;
            let report = MappingReport::from_json(&fs::read_to_string(&a.report)?)?;
            let p = paramap::verify_function_preservation(
                &src_arch, &src, &dst_arch, &dst, &report, a.samples, a.tol, a.seed,
            )?;
            print_json(&p)?;
            p.ensure()
        }
        Command::Finetune(a) => {
            let arch = DiscreteArchitecture::load(&a.arch)?;
            let data = SyntheticDataset::load(&a.data)?;
            let params = match &a.params {
                Some(p) => ParameterBundle::load(p)?,
                None => derive::instantiate(&arch, derive_seed(a.seed, "scratch"))?,
            };
            let mut cfg = FinetuneConfig::new(a.epochs, a.seed);
            cfg.batch_size = a.batch_size;
            cfg.optimizer.lr = a.lr;
            let result = toytask::finetune(&arch, params, &data, &cfg)?;
            let mut params = result.params;
            let (loss, accuracy) = toytask::evaluate(&arch, &mut params, &data, cfg.batch_size)?;
            params.metadata = Some(arch.to_json()?);
            params.save(&a.out)?;
            if let Some(h) = &a.history {
                write_step_losses(h, &result.step_losses)?;
            }
            print_json(&serde_json::json!({
                "final_loss": result.epoch_losses.last(),
                "eval_loss": loss,
                "accuracy": accuracy,
                "steps": result.step_losses.len(),
            }))
        }
        Command::GenData(a) => {
            let data = toytask::generate(&DatasetSpec::new(a.n_samples, a.classes, a.seed))?;
            data.save(&a.out)?;
            print_json(&serde_json::json!({ "class_counts": data.class_counts() }))
        }
        Command::Run(a) => {
            let config = match &a.space {
                Some(p) => SearchSpaceConfig::load(p)?,
                None => SearchSpaceConfig::desk(),
            };
            let cfg = EndToEnd {
                seed: a.seed,
                lambda: a.lambda,
                n_samples: a.n_samples,
                pretrain_epochs: a.pretrain_epochs,
                search_epochs: a.epochs,
                warmup_epochs: a.warmup,
                finetune_epochs: a.finetune_epochs,
                eps: a.eps,
                options: a.supernet.into(),
            };
            let summary = end_to_end(&config, &cfg, &a.out_dir)?;
            print_json(&summary)
        }
    }
}

fn write_step_losses(path: &Path, losses: &[f32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Settings of [`end_to_end`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndToEnd {
    pub seed: u64,
    pub lambda: f32,
    pub n_samples: usize,
    pub pretrain_epochs: usize,
    pub search_epochs: usize,
    pub warmup_epochs: usize,
    pub finetune_epochs: usize,
    pub eps: f32,
    pub options: SupernetOptions,
}

impl EndToEnd {
    pub fn desk(seed: u64) -> Self {
        EndToEnd {
            seed,
            lambda: DEFAULT_LAMBDA,
            n_samples: 256,
            pretrain_epochs: 4,
            search_epochs: 6,
            warmup_epochs: 3,
            finetune_epochs: 4,
            eps: DEFAULT_EPS,
            options: SupernetOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub source_madds: u64,
    pub derived_madds: u64,
    pub final_loss: f32,
    /// Relative to the output directory.
    pub history_path: String,
}

/// gen-data, source pre-training, mapping onto the supernet, search,
/// derivation, mapping onto the derived network and fine-tuning. Each
/// artifact is written to `out_dir` as soon as it exists.
pub fn end_to_end(config: &SearchSpaceConfig, cfg: &EndToEnd, out_dir: &Path) -> Result<Summary> {
    fs::create_dir_all(out_dir)?;
    let seed = cfg.seed;
    let data = toytask::generate(&DatasetSpec::new(cfg.n_samples, 4, derive_seed(seed, "data")))?;
    data.save(out_dir.join("data.nat"))?;

    let source_arch = DiscreteArchitecture::source(config);
    source_arch.save(out_dir.join("source.json"))?;
    let fresh = derive::instantiate(&source_arch, derive_seed(seed, "source"))?;
    let pre = toytask::finetune(
        &source_arch,
        fresh,
        &data,
        &FinetuneConfig::new(cfg.pretrain_epochs, derive_seed(seed, "pretrain")),
    )?;
    let mut source = pre.params;
    source.metadata = Some(source_arch.to_json()?);
    source.save(out_dir.join("source.nat"))?;

    let net = Supernet::build(config, cfg.options, derive_seed(seed, "supernet"))?;
    let (net, report) =
        paramap::map_to_supernet(&source_arch, &source, net, cfg.eps, derive_seed(seed, "map-supernet"))?;
    fs::write(out_dir.join("supernet_mapping.json"), report.to_json()? + "\n")?;

    let schedule = SearchSchedule {
        total_epochs: cfg.search_epochs,
        warmup_epochs: cfg.warmup_epochs,
        seed: derive_seed(seed, "search"),
        ..SearchSchedule::default()
    };
    let cost = CostConfig::for_source(config, cfg.lambda)?;
    let (net, history) = searchloop::search(net, &data, &schedule, &cost)?;
    save_supernet(&net, &out_dir.join("supernet.nat"))?;
    let history_path = "history.csv".to_string();
    history.write_csv(out_dir.join(&history_path))?;

    let arch = derive::derive_from_supernet(&net)?;
    arch.save(out_dir.join("arch.json"))?;
    let (mapped, report) =
        paramap::map_to_derived(&source_arch, &source, &arch, cfg.eps, derive_seed(seed, "map-derived"))?;
    mapped.save(out_dir.join("mapped.nat"))?;
    fs::write(out_dir.join("derived_mapping.json"), report.to_json()? + "\n")?;

    let tuned = toytask::finetune(
        &arch,
        mapped,
        &data,
        &FinetuneConfig::new(cfg.finetune_epochs, derive_seed(seed, "finetune")),
    )?;
    let mut tuned_params = tuned.params;
    tuned_params.metadata = Some(arch.to_json()?);
    tuned_params.save(out_dir.join("finetuned.nat"))?;

    let summary = Summary {
        source_madds: costmodel::madds_of_network(&source_arch),
        derived_madds: costmodel::madds_of_network(&arch),
        final_loss: tuned.epoch_losses.last().copied().unwrap_or(f32::NAN),
        history_path,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use csmoe::evalx::{self, ComputeProfile, InstrumentedCount, RetrievalTask};
use csmoe::losses::{total_gradient_check, TotalCheckSetup};
use csmoe::model::{init_model, load_checkpoint, CsmoeConfig, EmbeddingStrategy, Modality};
use csmoe::numerics::{tnsr, GradCheckOptions, Tensor};
use csmoe::sampler::{self, EntropyDistanceFitness};
use csmoe::tokenizer::{split_tile, Sentinel};
use csmoe::train::{self, PairedImage, StepLog};

use crate::config::RunConfig;
use crate::{CliError, Command};

/// Configurations above this size are not materialized by `flops` unless asked.
const AUTO_VERIFY_MAX_PARAMS: u64 = 2_000_000;

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Archive CSV: id,lon_min,lat_min,lon_max,lat_max.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Climate class raster (GRID1).
    #[arg(long)]
    pub climate: Option<PathBuf>,
    /// Thematic class raster (GRID1).
    #[arg(long)]
    pub thematic: Option<PathBuf>,
    /// Entries to keep per stratum.
    #[arg(long)]
    pub target: Option<usize>,
    /// Generations per stratum.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub pop: Option<usize>,
    /// Also score a random subset of equal size per stratum.
    #[arg(long)]
    pub baseline: bool,
    /// Selection CSV (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-stratum JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// C×H×W tile (TNSR1).
    #[arg(long)]
    pub input: PathBuf,
    /// Patch side in pixels.
    #[arg(long)]
    pub patch: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Invalid-pixel marker; NaN when absent.
    #[arg(long)]
    pub sentinel: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Directory of `<id>_x.tnsr` / `<id>_y.tnsr` pairs.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Generate this many synthetic pairs (written to --data-dir if given).
    #[arg(long)]
    pub synthesize: Option<usize>,
    /// Receives checkpoint.csmoe, loss.jsonl and val.jsonl.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Total step budget; shapes the learning-rate schedule.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Stop after this many total steps without changing the schedule.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Uniform jitter added to the initialization before checking.
    #[arg(long, default_value_t = 0.2)]
    pub perturb: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Check a seeded random subset above this many parameter elements.
    #[arg(long, default_value_t = 10_000)]
    pub max_elements: usize,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    /// Model checkpoint; needed when queries or gallery are image directories.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image-pair directory or `[N×d]` embedding TNSR1 (ids in `<file>.ids`).
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// CSV `id,labels` with `;`-joined class codes.
    #[arg(long)]
    pub labels: PathBuf,
    /// S1>S1, S1>S2, S2>S1 or S2>S2.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value = "only_cls")]
    pub strategy: EmbeddingStrategy,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Also build the model and run one forward to confirm the counts.
    #[arg(long)]
    pub verify: bool,
}

pub fn default_config(command: Option<&Command>) -> RunConfig {
    match command {
        Some(Command::GradCheck(_) | Command::PretrainToy(_)) => {
            RunConfig { model: CsmoeConfig::miniature(), ..RunConfig::default() }
        }
        _ => RunConfig::default(),
    }
}

pub fn apply_overrides(mut cfg: RunConfig, command: Option<&Command>) -> RunConfig {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
        if v.is_some() {
            slot.clone_from(v);
        }
    }
    match command {
        Some(Command::Sample(a)) => {
            set_path(&mut cfg.paths.archive, &a.archive);
            set_path(&mut cfg.paths.climate, &a.climate);
            set_path(&mut cfg.paths.thematic, &a.thematic);
            set(&mut cfg.sampler.target, &a.target);
            set(&mut cfg.sampler.iters, &a.iters);
            set(&mut cfg.sampler.pop, &a.pop);
            cfg.sampler.baseline |= a.baseline;
        }
        Some(Command::PretrainToy(a)) => {
            set_path(&mut cfg.paths.data_dir, &a.data_dir);
            set_path(&mut cfg.paths.out_dir, &a.out_dir);
            set(&mut cfg.train.epochs, &a.epochs);
            set(&mut cfg.train.batch, &a.batch);
            set(&mut cfg.train.lr, &a.lr);
            if a.max_steps.is_some() {
                cfg.train.max_steps = a.max_steps;
            }
        }
        _ => {}
    }
    cfg
}

pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Sample(a) => sample(&a, cfg),
        Command::SplitTiles(a) => split_tiles(&a),
        Command::PretrainToy(a) => pretrain_toy(&a, cfg),
        Command::GradCheck(a) => grad_check(&a, cfg),
        Command::EvalRetrieval(a) => eval_retrieval(&a, cfg),
        Command::Flops(a) => flops(&a, cfg),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn sample(a: &SampleArgs, cfg: &RunConfig) -> Result<()> {
    let (archive, climate, thematic) = cfg.sampler_inputs()?;
    let entries = sampler::read_archive(archive)?;
    let climate = sampler::read_grid_file(climate)?;
    let thematic = sampler::read_grid_file(thematic)?;
    let (selection, report) =
        sampler::sample_archive(&entries, &climate, &thematic, &cfg.sampler, &EntropyDistanceFitness)?;
    log::info!("selected {} of {} entries across {} strata", selection.len(), entries.len(), report.strata.len());
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            sampler::write_selection(&mut w, &selection)?;
            w.flush()?;
        }
        None => sampler::write_selection(std::io::stdout().lock(), &selection)?,
    }
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn split_tiles(a: &SplitArgs) -> Result<()> {
    let tile = tnsr::load(&a.input)?;
    let sentinel = a.sentinel.map_or(Sentinel::Nan, Sentinel::Value);
    let (patches, report) =
        split_tile(&tile, a.patch, sentinel).with_context(|| format!("--input {}", a.input.display()))?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("tile");
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.out_dir.display())))?;
    for (i, p) in patches.iter().enumerate() {
        tnsr::save(&a.out_dir.join(format!("{stem}_{i:05}.tnsr")), p)?;
    }
    print_json(&report)
}

#[derive(Serialize)]
struct PretrainSummary {
    steps_run: usize,
    step: usize,
    total_steps: usize,
    first_total: Option<f64>,
    last_total: Option<f64>,
    train_pairs: usize,
    val_pairs: usize,
    checkpoint: PathBuf,
}

fn pretrain_toy(a: &PretrainArgs, cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.paths.out_dir.clone().ok_or_else(|| CliError::Usage("missing --out-dir".into()))?;
    let seed = cfg.seed();
    let (mut model, state) = match &a.resume {
        Some(path) => {
            let (model, state, meta) = train::load_training_checkpoint(path)?;
            let want_seed = meta.get("seed").and_then(serde_json::Value::as_u64);
            if want_seed.is_some_and(|s| s != seed) {
                return Err(CliError::Usage(format!(
                    "--resume {}: checkpoint was trained with seed {}, this run uses {seed}",
                    path.display(),
                    want_seed.unwrap_or_default()
                ))
                .into());
            }
            if let Some(t) = meta.get("train") {
                if *t != serde_json::to_value(&cfg.train)? {
                    return Err(CliError::Usage(format!(
                        "--resume {}: trainer settings differ from the checkpoint's {t}",
                        path.display()
                    ))
                    .into());
                }
            }
            if model.config != cfg.model {
                log::warn!("--resume {}: using the checkpoint's model config", path.display());
            }
            (model, Some(state))
        }
        None => (init_model(&cfg.model)?, None),
    };
    let data: Vec<PairedImage> = match (a.synthesize, &cfg.paths.data_dir) {
        (Some(n), dir) => {
            let pairs = train::synthesize(n, &model.config, seed);
            if let Some(d) = dir {
                train::write_pairs(d, &pairs)?;
            }
            pairs
        }
        (None, Some(d)) => train::load_pairs(d)?,
        (None, None) => return Err(CliError::Usage("pass --data-dir or --synthesize N".into()).into()),
    };

    fs::create_dir_all(&out_dir).map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    let open_log = |name: &str| -> Result<BufWriter<File>> {
        let p = out_dir.join(name);
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(a.resume.is_some())
            .truncate(a.resume.is_none())
            .open(&p)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        Ok(BufWriter::new(f))
    };
    let mut loss_log = open_log("loss.jsonl")?;
    let mut on_step = |l: &StepLog| -> csmoe::error::Result<()> {
        let line = serde_json::to_string(l).expect("plain struct");
        writeln!(loss_log, "{line}").map_err(|e| csmoe::error::Error::Data(format!("loss.jsonl: {e}")))
    };
    let outcome = train::pretrain(&mut model, &data, &cfg.train, &cfg.loss, seed, state, a.stop_after, &mut on_step)?;
    loss_log.flush()?;
    let mut val_log = open_log("val.jsonl")?;
    for v in &outcome.validation {
        writeln!(val_log, "{}", serde_json::to_string(v)?)?;
    }
    val_log.flush()?;

    let ck = out_dir.join("checkpoint.csmoe");
    let meta = serde_json::json!({ "seed": seed, "train": cfg.train, "loss": cfg.loss, "val_ids": outcome.val_ids });
    train::save_training_checkpoint(&ck, &model, &outcome.state, meta)?;
    print_json(&PretrainSummary {
        steps_run: outcome.log.len(),
        step: outcome.state.step,
        total_steps: outcome.total_steps,
        first_total: outcome.log.first().map(|l| l.total),
        last_total: outcome.log.last().map(|l| l.total),
        train_pairs: outcome.train_ids.len(),
        val_pairs: outcome.val_ids.len(),
        checkpoint: ck,
    })
}

#[derive(Serialize)]
struct GradCheckSummary {
    passed: bool,
    tolerance: f64,
    max_relative_error: f64,
    checked_elements: usize,
    total_elements: usize,
    step_size: f64,
    per_parameter_errors: BTreeMap<String, f64>,
}

fn grad_check(a: &GradCheckArgs, cfg: &RunConfig) -> Result<()> {
    if a.batch < 2 {
        return Err(CliError::Usage("--batch must be at least 2 for the contrastive term".into()).into());
    }
    let seed = cfg.seed();
    let setup = TotalCheckSetup { batch: a.batch, perturb: a.perturb, seed };
    let opts = GradCheckOptions { max_elements: a.max_elements, seed, ..GradCheckOptions::default() };
    let report = total_gradient_check(&cfg.model, &cfg.loss, setup, opts)?;
    let passed = report.max_relative_error <= a.tolerance;
    print_json(&GradCheckSummary {
        passed,
        tolerance: a.tolerance,
        max_relative_error: report.max_relative_error,
        checked_elements: report.checked_elements,
        total_elements: report.total_elements,
        step_size: report.step_size,
        per_parameter_errors: report.per_parameter_errors,
    })?;
    if !passed {
        return Err(CliError::Check(format!(
            "max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_relative_error, a.tolerance
        ))
        .into());
    }
    Ok(())
}

/// Embeddings and ids from either an image directory or an embedding file.
fn load_side(
    path: &Path,
    flag: &str,
    modality: Modality,
    model: &mut Option<csmoe::model::CsmoeModel>,
    checkpoint: Option<&Path>,
    strategy: EmbeddingStrategy,
) -> Result<(Tensor, Vec<String>)> {
    if path.is_dir() {
        if model.is_none() {
            let ck = checkpoint.ok_or_else(|| {
                CliError::Usage(format!("{flag} {} holds images; --checkpoint is required", path.display()))
            })?;
            *model = Some(load_checkpoint(ck)?.0);
        }
        let m = model.as_ref().expect("loaded above");
        let suffix = format!("_{}.tnsr", modality.suffix());
        let mut files: Vec<(String, PathBuf)> = fs::read_dir(path)
            .map_err(|e| CliError::Data(format!("{flag} {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let id = p.file_name()?.to_str()?.strip_suffix(&suffix)?.to_string();
                Some((id, p))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::Data(format!("{flag} {}: no *{suffix} images", path.display())).into());
        }
        let mut rows = Vec::with_capacity(files.len());
        for (_, p) in &files {
            let img = tnsr::load(p)?;
            rows.push(m.embed_image(&img, modality, strategy).with_context(|| p.display().to_string())?.into_data());
        }
        Ok((Tensor::from_rows(&rows)?, files.into_iter().map(|f| f.0).collect()))
    } else {
        let t = tnsr::load(path)?;
        let (n, _) = t.dims2().with_context(|| format!("{flag} {}", path.display()))?;
        let ids_path = PathBuf::from(format!("{}.ids", path.display()));
        let ids: Vec<String> = match fs::read_to_string(&ids_path) {
            Ok(s) => s.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect(),
            Err(_) => (0..n).map(|i| i.to_string()).collect(),
        };
        if ids.len() != n {
            return Err(CliError::Data(format!("{}: {} ids for {n} embeddings", ids_path.display(), ids.len())).into());
        }
        Ok((t, ids))
    }
}

fn eval_retrieval(a: &RetrievalArgs, _cfg: &RunConfig) -> Result<()> {
    let (q, r) = evalx::parse_task(&a.task).map_err(|e| CliError::Usage(format!("--task: {e}")))?;
    let mut task = RetrievalTask::new(q, r, a.k).map_err(|e| CliError::Usage(format!("--k: {e}")))?;
    task.strategy = a.strategy;
    let (_, labels) = evalx::read_labels(&a.labels)?;
    let mut model = None;
    let ck = a.checkpoint.as_deref();
    let (qe, qids) = load_side(&a.queries, "--queries", q, &mut model, ck, a.strategy)?;
    let (ge, gids) = load_side(&a.gallery, "--gallery", r, &mut model, ck, a.strategy)?;
    let report = evalx::evaluate_retrieval(&task, &qe, &qids, &ge, &gids, &labels)?;
    print_json(&report)
}

#[derive(Serialize)]
struct FlopsReport {
    #[serde(flatten)]
    profile: ComputeProfile,
    instrumented: Option<InstrumentedCount>,
}

fn flops(a: &FlopsArgs, cfg: &RunConfig) -> Result<()> {
    let profile = evalx::profile(&cfg.model)?;
    let instrumented = if a.verify || profile.params <= AUTO_VERIFY_MAX_PARAMS {
        let m = evalx::instrumented_profile(&cfg.model, cfg.seed())?;
        if (m.params, m.flops, m.expert_calls) != (profile.params, profile.flops, profile.expert_calls) {
            return Err(CliError::Check(format!(
                "analytic counts ({} params, {} flops, {} expert calls) disagree with the instrumented run ({}, {}, {})",
                profile.params, profile.flops, profile.expert_calls, m.params, m.flops, m.expert_calls
            ))
            .into());
        }
        Some(m)
    } else {
        None
    };
    eprintln!("{:<24} {:>14} {:>18}", "component", "params", "flops");
    for row in &profile.breakdown {
        eprintln!("{:<24} {:>14} {:>18}", row.component, row.params, row.flops);
    }
    eprintln!("{:<24} {:>14} {:>18}", "total", profile.params, profile.flops);
    eprintln!("c2c {:.2} ({})", profile.c2c, profile.convention);
    print_json(&FlopsReport { profile, instrumented })
}

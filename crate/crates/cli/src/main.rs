//! `vesselseg`: data preparation, training, evaluation and analysis of the
//! vessel segmentation network.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use vesselseg::checkpoint::Checkpoint;
use vesselseg::config::Config;
use vesselseg::datasets::{self, DatasetId, FoldSplit, FundusSample, LabelMask};
use vesselseg::evaluation;
use vesselseg::imageio;
use vesselseg::lerf;
use vesselseg::network::Model;
use vesselseg::training;
use vesselseg::weightmap;

const CACHE_ENV: &str = "VESSELSEG_CACHE";

#[derive(Parser, Debug)]
#[command(name = "vesselseg", version, about = "Retinal vessel segmentation with uncertainty-weighted auxiliary supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resize a dataset into the cache and write its splits.
    Prepare(Common),
    /// Train on one fold.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/last.ckpt` when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test images of a fold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint; writes per-image probability difference maps.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train and evaluate every ablation row.
    Ablate(Common),
    /// Receptive-field table, vessel-width statistics and the chosen layer.
    Lerf(Common),
    /// Render the loss weight map of a label image.
    WeightmapPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        label: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Print the layer table and parameter count of the configured network.
    Describe(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    /// Divide the schedule by the configured reduction factor.
    #[arg(long)]
    reduced_schedule: bool,
}

/// Failure reported as a usage error (exit status 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

impl Common {
    fn resolve(&self, base: Option<Config>) -> anyhow::Result<Config> {
        let mut c = match (&self.config, base) {
            (Some(p), _) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
            (None, Some(b)) => b,
            (None, None) => Config::default(),
        };
        let mut assignments = Vec::new();
        if let Some(d) = self.dataset {
            assignments.push(format!("dataset=\"{d}\""));
        }
        if let Some(r) = &self.root {
            assignments.push(format!("root={}", toml_string(r)));
        }
        if let Some(s) = self.seed {
            assignments.push(format!("seed={s}"));
        }
        if let Some(f) = self.fold {
            assignments.push(format!("fold={f}"));
        }
        if let Ok(cache) = std::env::var(CACHE_ENV) {
            if !cache.is_empty() {
                assignments.push(format!("cache={}", toml_string(Path::new(&cache))));
            }
        }
        assignments.extend(self.overrides.iter().cloned());
        c.apply_overrides(&assignments).map_err(|e| Usage(e.to_string()))?;
        if self.reduced_schedule {
            c.train = c.train.reduced();
        }
        Ok(c)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
    }
}

fn toml_string(p: &Path) -> String {
    let s = p.to_string_lossy();
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Creates `dir` and writes the effective configuration into it.
fn open_out_dir(dir: &Path, config: &Config) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    config.save(&dir.join("config.toml"))?;
    Ok(())
}

fn cache_dir(config: &Config) -> Option<PathBuf> {
    config.data.cache.clone()
}

/// Samples and splits of the configured dataset: the cache when it holds
/// this dataset, otherwise the raw files under `root`.
fn load_data(config: &Config) -> anyhow::Result<(Vec<FundusSample>, Vec<FoldSplit>)> {
    let name = config.data.dataset;
    if let Some(dir) = cache_dir(config) {
        if dir.join("manifest.json").is_file() {
            let (cached, samples, splits) = datasets::load_cached(&dir)?;
            if cached == name {
                log::info!("using prepared data in {}", dir.display());
                return Ok((samples, splits));
            }
            log::warn!("cache {} holds {cached}, not {name}; reading raw files", dir.display());
        }
    }
    let samples = match (name, &config.data.root) {
        (DatasetId::Synthetic, _) => datasets::load_dataset(name, Path::new("."))?,
        (_, Some(root)) => datasets::load_dataset(name, root)?,
        (_, None) => bail!("dataset {name} needs --root or data.root"),
    };
    let splits = datasets::make_splits(name, &samples, config.train.seed)?;
    Ok((samples, splits))
}

fn fold_samples(config: &Config) -> anyhow::Result<(Vec<FundusSample>, Vec<FundusSample>)> {
    let (samples, splits) = load_data(config)?;
    let split = splits
        .iter()
        .find(|s| s.fold_index == config.data.fold)
        .ok_or_else(|| anyhow!("fold {} does not exist ({} folds)", config.data.fold, splits.len()))?;
    let pick = |ids: &[String]| -> Vec<FundusSample> {
        samples.iter().filter(|s| ids.contains(&s.id)).cloned().collect()
    };
    Ok((pick(&split.train_ids), pick(&split.test_ids)))
}

fn prepare(common: &Common) -> anyhow::Result<()> {
    let config = common.resolve(None)?;
    let out = common.out_dir("prepare");
    open_out_dir(&out, &config)?;
    let cache = cache_dir(&config).unwrap_or_else(|| out.join("cache"));
    let name = config.data.dataset;
    let samples = match (name, &config.data.root) {
        (DatasetId::Synthetic, _) => datasets::load_dataset(name, Path::new("."))?,
        (_, Some(root)) => datasets::load_dataset(name, root)?,
        (_, None) => bail!("dataset {name} needs --root or data.root"),
    };
    let splits = datasets::make_splits(name, &samples, config.train.seed)?;
    datasets::save_cached(&cache, name, &samples, &splits)?;
    println!("prepared {} {name} images ({} folds) in {}", samples.len(), splits.len(), cache.display());
    Ok(())
}

fn train(common: &Common, resume: bool) -> anyhow::Result<()> {
    let config = common.resolve(None)?;
    let out = common.out_dir("train");
    open_out_dir(&out, &config)?;
    let (train, test) = fold_samples(&config)?;
    log::info!("training on {} images, evaluating on {}", train.len(), test.len());
    let run = training::fit(&train, &test, &config, &out, resume)?;
    println!(
        "trained {} steps; sigma_main {:.4}, sigma_aux {:.4}; best held-out AUC {}; outputs in {}",
        run.steps,
        run.uncertainty.sigma_main(),
        run.uncertainty.sigma_aux(),
        run.best_auc.map_or("n/a".to_owned(), |a| format!("{a:.4}")),
        out.display()
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, compare: Option<&Path>) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let config = common.resolve(Some(ck.config.clone()))?;
    let out = common.out_dir("eval");
    open_out_dir(&out, &config)?;
    let (_, test) = fold_samples(&config)?;
    let result = evaluation::evaluate(&ck.model, &test, &config)?;
    evaluation::write_eval_outputs(&result, &out)?;
    print!("{}", evaluation::metrics_table(&result));
    if let Some(other) = compare {
        let other = Checkpoint::load(other).with_context(|| format!("loading {}", other.display()))?;
        let second = evaluation::evaluate(&other.model, &test, &config)?;
        let dir = out.join("difference");
        fs::create_dir_all(&dir)?;
        for ((id, a), (_, b)) in result.probs.iter().zip(&second.probs) {
            let d = evaluation::probability_difference_map(a.view(), b.view())?;
            evaluation::save_difference_map(d.view(), &dir.join(format!("{id}.png")))?;
        }
    }
    Ok(())
}

fn ablate(common: &Common) -> anyhow::Result<()> {
    let config = common.resolve(None)?;
    let out = common.out_dir("ablate");
    open_out_dir(&out, &config)?;
    let (train, test) = fold_samples(&config)?;
    let rows = evaluation::run_ablation(&train, &test, &config, &out)?;
    print!("{}", evaluation::ablation_csv(&rows));
    Ok(())
}

fn lerf_report(common: &Common) -> anyhow::Result<()> {
    let config = common.resolve(None)?;
    let out = common.out_dir("lerf");
    open_out_dir(&out, &config)?;
    let (train, _) = fold_samples(&config)?;
    let labels: Vec<&LabelMask> = train.iter().map(|s| &s.label).collect();
    let (chosen, stats) = training::choose_preeminent(&config, &labels)?;
    let spec = config.network.to_spec(Some((chosen.layer_index, chosen.stage)))?;
    let mut report = lerf::format_rf_table(&spec.receptive_fields()?);
    let _ = writeln!(
        report,
        "mean vessel width: {:.3}\nvessel fraction: {:.4}\nwidth <= 3 fraction: {:.4}\npreeminent layer: {} (stage {}, rf {})\ntarget stage: {}",
        stats.mean_width,
        stats.vessel_fraction,
        stats.thin_fraction,
        chosen.layer_index,
        chosen.stage,
        chosen.rf,
        spec.target_stage
    );
    fs::write(out.join("lerf.txt"), &report)?;
    stats.write_histogram(&out.join("width_histogram.csv"))?;
    print!("{report}");
    Ok(())
}

fn weightmap_preview(common: &Common, label: &Path, alpha: Option<f64>, beta: Option<f64>) -> anyhow::Result<()> {
    let mut config = common.resolve(None)?;
    let mut extra = Vec::new();
    if let Some(a) = alpha {
        extra.push(format!("alpha={a:?}"));
    }
    if let Some(b) = beta {
        extra.push(format!("beta={b:?}"));
    }
    config.apply_overrides(&extra).map_err(|e| Usage(e.to_string()))?;
    let out = common.out_dir("weightmap");
    open_out_dir(&out, &config)?;
    let gray = imageio::open(label)?.to_luma8();
    let mask = LabelMask::new(imageio::gray_to_binary(&gray))?;
    let map = weightmap::compute_weight_map(&mask, config.data.alpha, config.data.beta)?;
    let stem = label.file_stem().map_or("label".into(), |s| s.to_string_lossy().into_owned());
    let png = out.join(format!("{stem}_weightmap.png"));
    let csv = out.join(format!("{stem}_weightmap.csv"));
    weightmap::write_preview(&map, &png, &csv)?;
    let max = map.w.iter().copied().fold(0.0f32, f32::max);
    println!("max weight {max:.4}; wrote {} and {}", png.display(), csv.display());
    Ok(())
}

fn describe(common: &Common) -> anyhow::Result<()> {
    let config = common.resolve(None)?;
    let spec = config.network.to_spec(None)?;
    let model = Model::build(spec.clone(), config.train.seed)?;
    let mut report = training::spec_report(&spec)?;
    let _ = writeln!(report, "parameters: {}", model.parameter_count());
    if let Some(out) = &common.out {
        open_out_dir(out, &config)?;
        fs::write(out.join("describe.txt"), &report)?;
    }
    print!("{report}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Prepare(c) => prepare(c),
        Command::Train { common, resume } => train(common, *resume),
        Command::Eval { common, checkpoint, compare } => eval(common, checkpoint, compare.as_deref()),
        Command::Ablate(c) => ablate(c),
        Command::Lerf(c) => lerf_report(c),
        Command::WeightmapPreview { common, label, alpha, beta } => weightmap_preview(common, label, *alpha, *beta),
        Command::Describe(c) => describe(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<Usage>() {
                eprintln!("usage error: {u}");
                return ExitCode::from(2);
            }
            // one line: outermost context followed by the root cause
            let mut msg = e.to_string();
            if let Some(root) = e.chain().last().filter(|r| r.to_string() != msg) {
                msg = format!("{msg}: {root}");
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use neural_pca::eval::{
    corrupt, estimate_mi, interpolate_latents, kappa_grid, lambda_grid, linear_svm_classify, mlp_classify,
    rotation_distance_histogram, Labeled, MiConfig, MlpClassifierConfig, Side, SvmConfig,
};
use neural_pca::pca_block::batch_statistics;
use neural_pca::{train, Dataset, Matrix, MetricsRow, NeuralPcaModel, PcaBlock, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_model, model_container, LatentMeta, LatentSet};
use crate::config::{resolve_seed, RunConfig};
use crate::error::CliError;
use crate::io::{fmt_f64, matrix_table, pgm_grid, write_atomic, Table};

pub const METRICS_HEADER: &[&str] = &["epoch", "iteration", "train_nll", "val_nll", "lr", "skipped"];
pub const ACCURACY_HEADER: &[&str] = &["side", "kappa", "classifier", "test_accuracy", "val_accuracy", "best_epoch"];
pub const MI_HEADER: &[&str] = &["side", "kappa", "mi_nats", "holdout_pairs"];
pub const ROTATION_HEADER: &[&str] = &["bin_start", "bin_end", "count"];
pub const SUMMARY_HEADER: &[&str] = &["variant", "metric", "side", "kappa", "value"];

pub const MODEL_FILE: &str = "model.npca";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "npca", version, about = "Train and evaluate Neural-PCA normalizing flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model.npca, metrics.csv and config.json.
    Train(TrainArgs),
    /// Encode dataset splits into latent codes.
    Extract(ExtractArgs),
    /// Classify latents with leading or trailing dimensions removed.
    Classify(ClassifyArgs),
    /// Estimate mutual information between data and truncated latents.
    Mi(MiArgs),
    /// Draw samples from a trained model.
    Sample(SampleArgs),
    /// Decode a sweep of latents that vary only in one block of dimensions.
    Interpolate(InterpolateArgs),
    /// Histogram of distances between per-batch rotations and the mean rotation.
    AnalyzeRotation(RotationArgs),
    /// Summarize every CSV in a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Falls back to NPCA_SEED, then the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Resume even if the checkpoint was trained with a different config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Val => vec![Split::Val],
            SplitArg::Test => vec![Split::Test],
            SplitArg::All => vec![Split::Train, Split::Val, Split::Test],
        }
    }
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Leading,
    Trailing,
    Both,
}

impl SideArg {
    fn sides(self) -> Vec<Side> {
        match self {
            SideArg::Leading => vec![Side::Leading],
            SideArg::Trailing => vec![Side::Trailing],
            SideArg::Both => vec![Side::Leading, Side::Trailing],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierArg {
    Mlp,
    Svm,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub latents: PathBuf,
    /// Comma-separated removal counts; default 8 evenly spaced from 0 to n−1.
    #[arg(long)]
    pub kappa_grid: Option<String>,
    #[arg(long, value_enum, default_value = "both")]
    pub side: SideArg,
    #[arg(long, value_enum, default_value = "svm")]
    pub classifier: ClassifierArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MiArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub kappa_grid: Option<String>,
    #[arg(long, value_enum, default_value = "both")]
    pub side: SideArg,
    /// Split whose data and latents are paired.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV of samples; image models also get a `.pgm` grid next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlockArg {
    Leading,
    Trailing,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "leading")]
    pub block: BlockArg,
    #[arg(long, default_value_t = 9)]
    pub grid: usize,
    /// Dimensions in the varied block; default max(1, n/8).
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RotationArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Config whose dataset replaces the checkpoint's.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to `<run>/summary.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Classify(a) => cmd_classify(&a),
        Command::Mi(a) => cmd_mi(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::AnalyzeRotation(a) => cmd_rotation(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

pub fn metrics_table(rows: &[MetricsRow]) -> Table {
    let mut t = Table::new(METRICS_HEADER);
    for m in rows {
        t.push(vec![
            m.epoch.to_string(),
            m.iteration.to_string(),
            fmt_f64(m.train_nll),
            m.val_nll.map(fmt_f64).unwrap_or_default(),
            fmt_f64(m.lr),
            m.skipped.to_string(),
        ]);
    }
    t
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set out_dir".into()))?;
    let ds = cfg.dataset.build(cfg.seed)?;
    let model = match &a.resume {
        Some(path) => {
            let (mut m, old) = load_model(path)?;
            if old.hash() != cfg.hash() && !a.force {
                return Err(CliError::Config(format!(
                    "{} was trained with a different config (hash {}); pass --force to resume anyway",
                    path.display(),
                    old.hash()
                )));
            }
            if m.dim() != ds.dim() {
                return Err(CliError::Config(format!(
                    "checkpoint has {} dims, dataset has {}",
                    m.dim(),
                    ds.dim()
                )));
            }
            m.set_train_mode();
            m
        }
        None => neural_pca::build_variant(&cfg.model_spec(ds.dim()))?,
    };
    let outcome = train(model, &cfg.train_config(), &ds.split_x(Split::Train), Some(&ds.split_x(Split::Val)))?;
    for w in &outcome.warnings {
        eprintln!("npca: warning: {w}");
    }
    std::fs::create_dir_all(&out)?;
    let mut stored = cfg.clone();
    stored.out_dir = None;
    model_container(&outcome.model, &stored).save(&out.join(MODEL_FILE))?;
    metrics_table(&outcome.metrics).write(&out.join(METRICS_FILE))?;
    let pretty = serde_json::to_string_pretty(&stored).expect("config serializes");
    write_atomic(&out.join(CONFIG_FILE), pretty.as_bytes())?;
    if let Some(v) = outcome.best_val_nll {
        println!("best validation nll {v:.6} at iteration {}", outcome.best_iteration.unwrap_or(0));
    }
    Ok(())
}

/// Latents of every requested split of `ds`.
pub fn encode_splits(model: &NeuralPcaModel, cfg: &RunConfig, ds: &Dataset, splits: &[Split]) -> Result<LatentSet, CliError> {
    let mut z = Vec::new();
    let mut y = Vec::new();
    for &s in splits {
        z.push(model.forward_frozen(&ds.split_x(s))?.z);
        y.push(ds.split_labels(s));
    }
    Ok(LatentSet {
        meta: LatentMeta {
            variant: model.variant,
            dim: model.dim(),
            n_classes: ds.n_classes,
            config_hash: cfg.hash(),
            data_kind: ds.kind,
            splits: splits.iter().map(|s| split_name(*s).to_string()).collect(),
        },
        z,
        y,
    })
}

fn cmd_extract(a: &ExtractArgs) -> Result<(), CliError> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let ds = cfg.dataset.build(cfg.seed)?;
    encode_splits(&model, &cfg, &ds, &a.split.splits())?
        .container()
        .save(&a.out)
}

pub fn parse_kappas(spec: Option<&str>, n: usize) -> Result<Vec<usize>, CliError> {
    let ks = match spec {
        None => kappa_grid(n, 8),
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Config(format!("bad kappa `{t}`")))
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    if let Some(k) = ks.iter().find(|k| **k >= n) {
        return Err(CliError::Config(format!("kappa {k} must be below the latent dimension {n}")));
    }
    if ks.is_empty() {
        return Err(CliError::Config("empty kappa grid".into()));
    }
    Ok(ks)
}

/// Accuracy table for every side and `κ`.
pub fn classify_table(
    set: &LatentSet,
    kappas: &[usize],
    sides: &[Side],
    classifier: ClassifierArg,
    seed: u64,
) -> Result<Table, CliError> {
    let (zt, yt) = set.split("train")?;
    let (zv, yv) = set.split("val")?;
    let (zs, ys) = set.split("test")?;
    let nc = set.meta.n_classes;
    let mut t = Table::new(ACCURACY_HEADER);
    for &side in sides {
        for &k in kappas {
            let c = |m: &Matrix| corrupt(m, k, side).map(|r| r.data);
            let (a, b, d) = (c(zt)?, c(zv)?, c(zs)?);
            let (train, val, test) = (Labeled::new(&a, yt), Labeled::new(&b, yv), Labeled::new(&d, ys));
            let (name, rep) = match classifier {
                ClassifierArg::Svm => {
                    let cfg = SvmConfig { seed, ..SvmConfig::default() };
                    ("svm", linear_svm_classify(train, val, test, nc, &cfg)?.report)
                }
                ClassifierArg::Mlp => {
                    let cfg = MlpClassifierConfig { seed, ..MlpClassifierConfig::default() };
                    ("mlp", mlp_classify(train, val, test, nc, &cfg)?)
                }
            };
            t.push(vec![
                side.name().into(),
                k.to_string(),
                name.into(),
                fmt_f64(rep.test_accuracy),
                fmt_f64(rep.val_accuracy),
                rep.best_epoch.to_string(),
            ]);
        }
    }
    Ok(t)
}

fn cmd_classify(a: &ClassifyArgs) -> Result<(), CliError> {
    let set = LatentSet::load(&a.latents)?;
    let kappas = parse_kappas(a.kappa_grid.as_deref(), set.meta.dim)?;
    let seed = resolve_seed(a.seed, 0)?;
    classify_table(&set, &kappas, &a.side.sides(), a.classifier, seed)?.write(&a.out)
}

fn cmd_mi(a: &MiArgs) -> Result<(), CliError> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let set = LatentSet::load(&a.latents)?;
    if set.meta.config_hash != cfg.hash() {
        return Err(CliError::Config("latents were not extracted from this checkpoint".into()));
    }
    let split = match a.split {
        SplitArg::All => return Err(CliError::Config("mi needs a single split".into())),
        s => s.splits()[0],
    };
    let ds = cfg.dataset.build(cfg.seed)?;
    let x = ds.split_x(split);
    let (z, _) = set.split(split_name(split))?;
    if z.rows() != x.rows() {
        return Err(CliError::Config("latent rows do not match the data split".into()));
    }
    let kappas = parse_kappas(a.kappa_grid.as_deref(), model.dim())?;
    let mut mi_cfg = MiConfig {
        seed: resolve_seed(a.seed, 0)?,
        ..MiConfig::default()
    };
    if let Some(s) = a.steps {
        mi_cfg.steps = s;
    }
    let mut t = Table::new(MI_HEADER);
    for side in a.side.sides() {
        for &k in &kappas {
            let zk = corrupt(z, k, side)?.data;
            let (est, _) = estimate_mi(&x, &zk, &mi_cfg)?;
            t.push(vec![
                side.name().into(),
                k.to_string(),
                fmt_f64(est.mi),
                est.holdout_pairs.to_string(),
            ]);
        }
    }
    t.write(&a.out)
}

fn image_side(cfg: &RunConfig) -> Result<Option<usize>, CliError> {
    use crate::config::DatasetSpec;
    Ok(match &cfg.dataset {
        DatasetSpec::SyntheticImages { side, .. } => Some(*side),
        DatasetSpec::Idx { pad_to, .. } => Some(*pad_to),
        _ => None,
    })
}

fn write_with_grid(out: &Path, m: &Matrix, prefix: &str, side: Option<usize>, per_row: usize) -> Result<(), CliError> {
    matrix_table(m, prefix).write(out)?;
    if let Some(side) = side {
        write_atomic(&out.with_extension("pgm"), &pgm_grid(m, side, per_row)?)?;
    }
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::Config("count must be positive".into()));
    }
    let (model, cfg) = load_model(&a.ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(resolve_seed(a.seed, cfg.seed)?);
    let x = model.sample(a.count, &mut rng)?;
    let per_row = (a.count as f64).sqrt().ceil() as usize;
    write_with_grid(&a.out, &x, "x", image_side(&cfg)?, per_row)
}

fn cmd_interpolate(a: &InterpolateArgs) -> Result<(), CliError> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let side = match a.block {
        BlockArg::Leading => Side::Leading,
        BlockArg::Trailing => Side::Trailing,
    };
    let size = a
        .block_size
        .unwrap_or_else(|| neural_pca::eval::default_block_size(model.dim()));
    let interp = interpolate_latents(&model, side, size, &lambda_grid(a.grid))?;
    let mut t = Table::new(&["lambda"]);
    let zt = matrix_table(&interp.latents, "z");
    let xt = matrix_table(&interp.outputs, "x");
    t.header.extend(zt.header.iter().cloned());
    t.header.extend(xt.header.iter().cloned());
    for (i, lam) in interp.lambdas.iter().enumerate() {
        let mut row = vec![fmt_f64(*lam)];
        row.extend(zt.rows[i].iter().cloned());
        row.extend(xt.rows[i].iter().cloned());
        t.push(row);
    }
    t.write(&a.out)?;
    if let Some(s) = image_side(&cfg)? {
        write_atomic(&a.out.with_extension("pgm"), &pgm_grid(&interp.outputs, s, a.grid.max(1))?)?;
    }
    println!("output variance {:.6e}", interp.output_variance());
    Ok(())
}

/// Per-batch rotations over one shuffled pass of the training split.
pub fn batch_rotations(model: &NeuralPcaModel, ds: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Matrix>, CliError> {
    let block = model
        .block
        .as_ref()
        .filter(|b| b.rotate)
        .ok_or_else(|| CliError::Config(format!("variant {} has no PCA layer", model.variant)))?;
    let reference = block.stats.as_ref().and_then(|s| s.v_tilde.as_ref());
    let x = ds.split_x(Split::Train);
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
    let mut vs = Vec::new();
    for chunk in idx.chunks_exact(batch_size.max(2)) {
        let h = model.block_inputs(&x.select_rows(chunk))?;
        let (mean, var) = batch_statistics(&h)?;
        let (z, _) = block.normalize_with(&h, &mean, &var)?;
        vs.push(PcaBlock::batch_rotation(&z, reference)?);
    }
    Ok(vs)
}

fn cmd_rotation(a: &RotationArgs) -> Result<(), CliError> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let data_cfg = match &a.dataset {
        Some(p) => RunConfig::load(p)?,
        None => cfg.clone(),
    };
    let ds = data_cfg.dataset.build(data_cfg.seed)?;
    let reference = model
        .block_stats()
        .and_then(|s| s.v_tilde.clone())
        .ok_or_else(|| CliError::Config("checkpoint has no frozen mean rotation".into()))?;
    let vs = batch_rotations(&model, &ds, cfg.optimizer.batch_size, cfg.seed)?;
    let d = rotation_distance_histogram(&vs, &reference)?;
    // Chordal distance between rotations never exceeds 2√n.
    let upper = 2.0 * (model.dim() as f64).sqrt();
    let bins = a.bins.max(1);
    let mut t = Table::new(ROTATION_HEADER);
    for (i, c) in d.histogram(bins, upper).iter().enumerate() {
        let w = upper / bins as f64;
        t.push(vec![fmt_f64(i as f64 * w), fmt_f64((i + 1) as f64 * w), c.to_string()]);
    }
    t.write(&a.out)?;
    println!(
        "batches {} mean {:.6} std {:.6} min {:.6} max {:.6}",
        d.distances.len(),
        d.mean,
        d.std,
        d.min,
        d.max
    );
    Ok(())
}

fn parse_f(s: &str, what: &str) -> Result<f64, CliError> {
    s.parse()
        .map_err(|_| CliError::Config(format!("{what}: not a number `{s}`")))
}

/// Rows of `variant, metric, side, kappa, value` built from the CSVs the
/// other commands write, recognized by their headers.
pub fn report_table(run: &Path) -> Result<Table, CliError> {
    let cfg_path = run.join(CONFIG_FILE);
    let variant = RunConfig::load(&cfg_path)?.variant.to_string();
    let mut files: Vec<PathBuf> = std::fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter(|p| p.file_name().is_some_and(|n| n != "summary.csv"))
        .collect();
    files.sort();
    let mut out = Table::new(SUMMARY_HEADER);
    let mut push = |metric: String, side: &str, kappa: &str, value: String| {
        out.push(vec![variant.clone(), metric, side.into(), kappa.into(), value]);
    };
    for f in files {
        let t = Table::read(&f)?;
        let col = |name: &str| t.column(name).expect("header checked");
        if t.header == METRICS_HEADER {
            if let Some(last) = t.rows.last() {
                push("final_train_nll".into(), "", "", last[col("train_nll")].clone());
            }
            let best = t
                .rows
                .iter()
                .filter(|r| !r[col("val_nll")].is_empty())
                .map(|r| parse_f(&r[col("val_nll")], "val_nll"))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                push("best_val_nll".into(), "", "", fmt_f64(best));
            }
        } else if t.header == ACCURACY_HEADER {
            for r in &t.rows {
                push(
                    format!("{}_accuracy", r[col("classifier")]),
                    &r[col("side")],
                    &r[col("kappa")],
                    r[col("test_accuracy")].clone(),
                );
            }
        } else if t.header == MI_HEADER {
            for r in &t.rows {
                push("mi_nats".into(), &r[col("side")], &r[col("kappa")], r[col("mi_nats")].clone());
            }
        } else if t.header == ROTATION_HEADER {
            let mut total = 0.0;
            let mut weighted = 0.0;
            for r in &t.rows {
                let c = parse_f(&r[col("count")], "count")?;
                let mid = 0.5 * (parse_f(&r[col("bin_start")], "bin_start")? + parse_f(&r[col("bin_end")], "bin_end")?);
                total += c;
                weighted += c * mid;
            }
            push("rotation_batches".into(), "", "", fmt_f64(total));
            if total > 0.0 {
                push("rotation_distance_binned_mean".into(), "", "", fmt_f64(weighted / total));
            }
        }
    }
    Ok(out)
}

fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let t = report_table(&a.run)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("summary.csv"));
    t.write(&out)?;
    for r in &t.rows {
        println!("{}", r.join("\t"));
    }
    Ok(())
}

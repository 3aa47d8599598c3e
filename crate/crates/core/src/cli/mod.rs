//! Config-driven pipeline stages behind the `campseg` binary.
//!
//! Every stage reads the same [`PipelineConfig`] and exchanges data with the
//! other stages through files in the output directory:
//!
//! | stage       | writes                                                  |
//! |-------------|---------------------------------------------------------|
//! | `prepare`   | `patches/<role>/` (GeoTIFF pairs + `manifest.txt`), `scene/` |
//! | `upscale`   | `patches_up/<role>/`, `edsr.ckpt`, `upscale_psnr.csv`    |
//! | `train`     | `best.ckpt`, `last.ckpt`, `epochs.csv`                   |
//! | `infer`     | `pred_<region>.tif`, `truth_<region>.tif`                |
//! | `eval`      | `metrics.csv`                                           |
//! | `vectorize` | `pred_<region>.shp/.shx/.dbf[/.prj]`                     |
//! | `report`    | `report.txt`                                            |

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use self::config::{PipelineConfig, SceneData, SceneSource};
use crate::error::{Error, Result};
use crate::geotiff::{read_geotiff, write_geotiff};
use crate::metrics::{accumulate, write_report, ConfusionCounts, ReportRow};
use crate::nn::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use crate::raster::{GeoTransform, RasterGrid};
use crate::stitch::{binarize, sliding_inference, CheckpointModel};
use crate::synthcamp::degrade;
use crate::tiler::{extract_patches, load_patch_set, save_patch_set, PatchRecord, RegionRole};
use crate::trainer::{read_epoch_csv, train, write_epoch_csv, EpochLog, TrainData};
use crate::upscale::{mean_psnr, train_edsr, upscale, upscale_nearest, UpscaleMethod};
use crate::vectorize::{simplify_or_keep, trace_polygons, write_shapefile};

const ROLES: [RegionRole; 4] = [
    RegionRole::TrainLarge,
    RegionRole::TrainSmall,
    RegionRole::Validation,
    RegionRole::Test,
];

#[derive(Debug, Parser)]
#[command(name = "campseg", version, about = "Building footprint extraction from georeferenced imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model parameters; defaults to `<out>/best.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Segments this GeoTIFF instead of the configured test regions.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Predicted mask; requires `--truth`.
    #[arg(long, requires = "truth")]
    pub mask: Option<PathBuf>,
    #[arg(long, requires = "mask")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct VectorizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Mask to vectorize instead of the predicted test-region masks.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Epoch logs to tabulate (repeatable); defaults to `<out>/epochs.csv`.
    #[arg(long)]
    pub input: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut overlapped patches from every configured region.
    Prepare(Common),
    /// Upscale patch sets (training the super-resolution network if configured).
    Upscale(Common),
    /// Train the configured segmentation model.
    Train(Common),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Segment the test regions with sliding-window inference.
    Infer(InferArgs),
    /// Convert predicted masks to Shapefiles.
    Vectorize(VectorizeArgs),
    /// Tabulate per-epoch validation IoU.
    Report(ReportArgs),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare(c) | Command::Upscale(c) | Command::Train(c) => c,
            Command::Eval(a) => &a.common,
            Command::Infer(a) => &a.common,
            Command::Vectorize(a) => &a.common,
            Command::Report(a) => &a.common,
        }
    }
}

/// Loads the config named by `common`, applies overrides and validates it.
pub fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.command.common())?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match &cli.command {
        Command::Prepare(_) => cmd_prepare(&cfg).map(drop),
        Command::Upscale(_) => cmd_upscale(&cfg),
        Command::Train(_) => cmd_train(&cfg).map(drop),
        Command::Infer(a) => cmd_infer(&cfg, a.checkpoint.as_deref(), a.input.as_deref()).map(drop),
        Command::Eval(a) => match (&a.mask, &a.truth) {
            (Some(m), Some(t)) => cmd_eval_pair(&cfg, m, t).map(drop),
            _ => cmd_eval(&cfg).map(drop),
        },
        Command::Vectorize(a) => match &a.mask {
            Some(m) => cmd_vectorize_mask(&cfg, m, &stem_base(&cfg, m)).map(drop),
            None => cmd_vectorize(&cfg).map(drop),
        },
        Command::Report(a) => cmd_report(&cfg, &a.input).map(drop),
    }
}

/// Sizes the global worker pool from `CAMPSEG_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CAMPSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::ConfigInvalid(format!("CAMPSEG_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::ConfigInvalid(format!("cannot size worker pool: {e}")))
}

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn stem_base(cfg: &PipelineConfig, p: &Path) -> PathBuf {
    let stem = p.file_stem().map_or_else(|| "mask".into(), |s| s.to_string_lossy().into_owned());
    out(cfg, &stem)
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn patch_dir(cfg: &PipelineConfig, upscaled: bool, role: RegionRole) -> PathBuf {
    out(cfg, if upscaled { "patches_up" } else { "patches" }).join(role.as_str())
}

fn load_role_patches(cfg: &PipelineConfig, upscaled: bool, pred: impl Fn(RegionRole) -> bool) -> Result<Vec<PatchRecord>> {
    let mut all = Vec::new();
    for role in ROLES.into_iter().filter(|&r| pred(r)) {
        if cfg.regions_with(|r| r == role).next().is_none() {
            continue;
        }
        let dir = patch_dir(cfg, upscaled, role);
        if !dir.exists() {
            let stage = if upscaled { "upscale" } else { "prepare" };
            return Err(Error::ConfigInvalid(format!(
                "{} is missing; run `campseg {stage}` first",
                dir.display()
            )));
        }
        all.extend(load_patch_set(&dir)?);
    }
    Ok(all)
}

/// Patch counts per role, in [`ROLES`] order.
pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<Vec<(RegionRole, usize)>> {
    let scene = cfg.load_scene()?;
    if cfg.scene.source == SceneSource::Synthcamp {
        let dir = out(cfg, "scene");
        reset_dir(&dir)?;
        write_geotiff(&scene.image, &scene.geo, dir.join("image.tif"))?;
        if let Some(m) = &scene.mask {
            write_geotiff(m, &scene.geo, dir.join("mask.tif"))?;
        }
    }
    let mut counts = Vec::new();
    for role in ROLES {
        let mut patches = Vec::new();
        for region in cfg.regions_with(|r| r == role) {
            patches.extend(extract_patches(&scene.image, &scene.geo, region, &cfg.tile, scene.mask.as_ref())?);
        }
        let dir = patch_dir(cfg, false, role);
        if patches.is_empty() {
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            continue;
        }
        reset_dir(&dir)?;
        save_patch_set(&dir, &patches)?;
        log::info!("prepare: {} {} patches", patches.len(), role);
        counts.push((role, patches.len()));
    }
    Ok(counts)
}

/// Trained super-resolution parameters when the config upscales with `edsr`.
pub fn load_edsr(cfg: &PipelineConfig) -> Result<Option<ModelCheckpoint>> {
    if cfg.upscale.method != UpscaleMethod::Edsr {
        return Ok(None);
    }
    let path = out(cfg, "edsr.ckpt");
    if !path.exists() {
        return Err(Error::ConfigInvalid(format!(
            "{} is missing; run `campseg upscale` first",
            path.display()
        )));
    }
    load_checkpoint(&path).map(Some)
}

fn upscale_image(cfg: &PipelineConfig, image: &RasterGrid, edsr: Option<&ModelCheckpoint>) -> Result<RasterGrid> {
    upscale(
        image,
        cfg.upscale.method,
        cfg.upscale.factor,
        edsr.map(|p| (p, &cfg.upscale.edsr)),
    )
}

/// Trains the super-resolution network when configured, then upscales every patch set.
pub fn cmd_upscale(cfg: &PipelineConfig) -> Result<()> {
    let method = cfg.upscale.method;
    if method == UpscaleMethod::None {
        log::info!("upscale: method is `none`, nothing to do");
        return Ok(());
    }
    let f = cfg.upscale.factor;
    if method == UpscaleMethod::Edsr {
        let pairs = load_role_patches(cfg, false, RegionRole::is_training)?
            .into_iter()
            .map(|p| Ok((degrade(&p.image, f)?, p.image)))
            .collect::<Result<Vec<_>>>()?;
        let (params, losses) = train_edsr(&pairs, &cfg.upscale.edsr, &cfg.upscale.edsr_train(cfg.seed))?;
        log::info!("upscale: edsr final loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
        save_checkpoint(&params, &out(cfg, "edsr.ckpt"))?;
    }
    let edsr = load_edsr(cfg)?;
    // held-out reconstruction quality of every available upscaler
    let held_out = load_role_patches(cfg, false, |r| r == RegionRole::Validation)?;
    if !held_out.is_empty() && held_out[0].image.width() % f == 0 {
        let low: Vec<RasterGrid> = held_out.iter().map(|p| degrade(&p.image, f)).collect::<Result<_>>()?;
        let mut csv = String::from("method,psnr\n");
        let mut methods = vec![UpscaleMethod::Nearest, UpscaleMethod::Bilinear];
        if edsr.is_some() {
            methods.push(UpscaleMethod::Edsr);
        }
        for m in methods {
            let ups: Vec<RasterGrid> = low
                .iter()
                .map(|l| upscale(l, m, f, edsr.as_ref().map(|p| (p, &cfg.upscale.edsr))))
                .collect::<Result<_>>()?;
            let psnr = mean_psnr(held_out.iter().map(|p| &p.image).zip(&ups))?;
            csv.push_str(&format!("{},{psnr:.4}\n", method_name(m)));
        }
        let path = out(cfg, "upscale_psnr.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    for role in ROLES {
        if cfg.regions_with(|r| r == role).next().is_none() {
            continue;
        }
        let patches = load_patch_set(patch_dir(cfg, false, role))?;
        let up = patches
            .into_iter()
            .map(|p| {
                Ok(PatchRecord {
                    image: upscale_image(cfg, &p.image, edsr.as_ref())?,
                    mask: p.mask.as_ref().map(|m| upscale_nearest(m, f)).transpose()?,
                    geo: p.geo.upscaled(f),
                    ..p
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dir = patch_dir(cfg, true, role);
        reset_dir(&dir)?;
        save_patch_set(&dir, &up)?;
    }
    Ok(())
}

fn method_name(m: UpscaleMethod) -> &'static str {
    match m {
        UpscaleMethod::None => "none",
        UpscaleMethod::Nearest => "nearest",
        UpscaleMethod::Bilinear => "bilinear",
        UpscaleMethod::Edsr => "edsr",
    }
}

/// Trains on the prepared (or upscaled) patches; returns the epoch logs.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<Vec<EpochLog>> {
    let upscaled = cfg.upscale.effective_factor() > 1;
    let train_set = load_role_patches(cfg, upscaled, RegionRole::is_training)?;
    let val_set = load_role_patches(cfg, upscaled, |r| r == RegionRole::Validation)?;
    let tc = cfg.train_config();
    let data = TrainData::from_patches(&train_set, &val_set, &tc.augment_ops, tc.seed)?;
    log::info!(
        "train: {} training samples, {} validation samples",
        data.train.len(),
        data.val.len()
    );
    let outcome = train(&cfg.model_spec()?, &data, &tc)?;
    save_checkpoint(&outcome.best, &out(cfg, "best.ckpt"))?;
    save_checkpoint(&outcome.last, &out(cfg, "last.ckpt"))?;
    write_epoch_csv(&outcome.logs, &out(cfg, "epochs.csv"))?;
    Ok(outcome.logs)
}

/// Predicted mask of `image` at the segmentation resolution.
pub fn segment(
    cfg: &PipelineConfig,
    ckpt: &ModelCheckpoint,
    edsr: Option<&ModelCheckpoint>,
    image: &RasterGrid,
) -> Result<RasterGrid> {
    let spec = cfg.model_spec()?;
    let stitch = cfg.stitch_spec()?;
    let input = if cfg.upscale.effective_factor() > 1 {
        upscale_image(cfg, image, edsr)?
    } else {
        image.clone()
    };
    let model = CheckpointModel { spec: &spec, ckpt };
    let logits = sliding_inference(&input, &model, &stitch)?;
    binarize(&logits, stitch.threshold)
}

/// Writes `pred_<name>.tif` (and `truth_<name>.tif` when truth exists); returns the prediction paths.
pub fn cmd_infer(cfg: &PipelineConfig, checkpoint: Option<&Path>, input: Option<&Path>) -> Result<Vec<PathBuf>> {
    let ckpt_path = checkpoint.map_or_else(|| out(cfg, "best.ckpt"), Path::to_path_buf);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let edsr = load_edsr(cfg)?;
    let f = cfg.upscale.effective_factor();
    let mut jobs: Vec<(String, RasterGrid, Option<RasterGrid>, GeoTransform)> = Vec::new();
    match input {
        Some(p) => {
            let (image, geo) = read_geotiff(p)?;
            let name = p.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
            jobs.push((name, image, None, geo));
        }
        None => {
            let scene = cfg.load_scene()?;
            for r in cfg.regions_with(|r| r == RegionRole::Test) {
                let w = r.window;
                let image = scene.image.window(w.col_off, w.row_off, w.width, w.height)?;
                let mask = scene
                    .mask
                    .as_ref()
                    .map(|m| m.window(w.col_off, w.row_off, w.width, w.height))
                    .transpose()?;
                jobs.push((r.name.clone(), image, mask, scene.geo.translated(w.col_off, w.row_off)));
            }
            if jobs.is_empty() {
                return Err(Error::ConfigInvalid("no test regions configured and no --input given".into()));
            }
        }
    }
    let mut written = Vec::new();
    for (name, image, truth, geo) in jobs {
        let pred = segment(cfg, &ckpt, edsr.as_ref(), &image)?;
        let geo = geo.upscaled(f);
        let path = out(cfg, &format!("pred_{name}.tif"));
        write_geotiff(&pred, &geo, &path)?;
        if let Some(t) = truth {
            let t = if f > 1 { upscale_nearest(&t, f)? } else { t };
            write_geotiff(&t, &geo, out(cfg, &format!("truth_{name}.tif")))?;
        }
        written.push(path);
    }
    Ok(written)
}

fn eval_row(cfg: &PipelineConfig, scene: &str, pred: &Path, truth: &Path) -> Result<ReportRow> {
    let (p, _) = read_geotiff(pred)?;
    let (t, _) = read_geotiff(truth)?;
    Ok(ReportRow {
        scene: scene.to_string(),
        model: cfg.model.kind.as_str().to_string(),
        dataset: format!("{}-{}", cfg.scene.name, method_name(cfg.upscale.method)),
        counts: accumulate(&p, &t, ConfusionCounts::default())?,
    })
}

/// Scores every test region's prediction; writes `metrics.csv`.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for r in cfg.regions_with(|r| r == RegionRole::Test) {
        let pred = out(cfg, &format!("pred_{}.tif", r.name));
        let truth = out(cfg, &format!("truth_{}.tif", r.name));
        if !pred.exists() || !truth.exists() {
            return Err(Error::ConfigInvalid(format!(
                "{} or its truth mask is missing; run `campseg infer` first",
                pred.display()
            )));
        }
        rows.push(eval_row(cfg, &r.name, &pred, &truth)?);
    }
    if rows.is_empty() {
        return Err(Error::ConfigInvalid("no test regions to evaluate; pass --mask and --truth".into()));
    }
    write_report(&rows, &out(cfg, "metrics.csv"))?;
    Ok(rows)
}

pub fn cmd_eval_pair(cfg: &PipelineConfig, mask: &Path, truth: &Path) -> Result<ReportRow> {
    let name = mask.file_stem().map_or_else(|| "mask".into(), |s| s.to_string_lossy().into_owned());
    let row = eval_row(cfg, &name, mask, truth)?;
    write_report(std::slice::from_ref(&row), &out(cfg, "metrics.csv"))?;
    Ok(row)
}

/// Vectorizes one mask GeoTIFF into `<base>.shp` etc.; returns the feature count.
pub fn cmd_vectorize_mask(cfg: &PipelineConfig, mask: &Path, base: &Path) -> Result<usize> {
    let (m, geo) = read_geotiff(mask)?;
    let mut features = trace_polygons(&m, &geo)?;
    let tol = cfg.vectorize.simplify_tolerance;
    if tol > 0.0 {
        features = features.iter().map(|f| simplify_or_keep(f, tol)).collect::<Result<_>>()?;
    }
    write_shapefile(&features, geo.crs_text.as_deref(), base)?;
    Ok(features.len())
}

/// Vectorizes every predicted test-region mask; returns the shapefile base paths.
pub fn cmd_vectorize(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut bases = Vec::new();
    for r in cfg.regions_with(|r| r == RegionRole::Test) {
        let mask = out(cfg, &format!("pred_{}.tif", r.name));
        if !mask.exists() {
            return Err(Error::ConfigInvalid(format!(
                "{} is missing; run `campseg infer` first",
                mask.display()
            )));
        }
        let base = out(cfg, &format!("pred_{}", r.name));
        let n = cmd_vectorize_mask(cfg, &mask, &base)?;
        log::info!("vectorize: {n} polygons from {}", mask.display());
        bases.push(base);
    }
    if bases.is_empty() {
        return Err(Error::ConfigInvalid("no test regions to vectorize; pass --mask".into()));
    }
    Ok(bases)
}

/// First epoch with the highest defined validation IoU.
pub fn best_epoch(logs: &[EpochLog]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for l in logs {
        if let Some(v) = l.val_iou {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((l.epoch, v));
            }
        }
    }
    best.map(|(e, _)| e)
}

/// Runs as rows, epochs as columns; `*` marks each run's best epoch.
pub fn format_iou_table(runs: &[(String, Vec<EpochLog>)]) -> String {
    let epochs = runs.iter().flat_map(|(_, l)| l.iter().map(|e| e.epoch)).max().unwrap_or(0);
    let label_w = runs.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);
    let mut s = String::from("validation IoU by epoch (* marks the best epoch of each run)\n");
    s.push_str(&format!("{:<label_w$}", "run"));
    for e in 1..=epochs {
        s.push_str(&format!(" {:>9}", format!("e{e}")));
    }
    s.push('\n');
    for (name, logs) in runs {
        let best = best_epoch(logs);
        s.push_str(&format!("{name:<label_w$}"));
        for e in 1..=epochs {
            let cell = match logs.iter().find(|l| l.epoch == e) {
                None => "-".to_string(),
                Some(l) => {
                    let mark = if Some(e) == best { "*" } else { " " };
                    l.val_iou.map_or_else(|| "nan ".to_string(), |v| format!("{v:.4}{mark}"))
                }
            };
            s.push_str(&format!(" {cell:>9}"));
        }
        s.push('\n');
    }
    for (name, logs) in runs {
        match best_epoch(logs) {
            Some(e) => {
                let v = logs.iter().find(|l| l.epoch == e).and_then(|l| l.val_iou).unwrap_or(f64::NAN);
                s.push_str(&format!("{name}: best epoch {e} of {} (IoU {v:.4})\n", logs.len()));
            }
            None => s.push_str(&format!("{name}: no epoch with a defined IoU\n")),
        }
    }
    s
}

/// Renders `report.txt` from one or more epoch logs; returns the text.
pub fn cmd_report(cfg: &PipelineConfig, inputs: &[PathBuf]) -> Result<String> {
    let mut runs = Vec::new();
    if inputs.is_empty() {
        let path = out(cfg, "epochs.csv");
        runs.push((cfg.model.kind.as_str().to_string(), read_epoch_csv(&path)?));
    } else {
        for p in inputs {
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            runs.push((label, read_epoch_csv(p)?));
        }
    }
    let text = format_iou_table(&runs);
    let path = out(cfg, "report.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(text)
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nucleisam::dataio::{
    apply_crop_regime, load_rgb, make_splits, parse_annotation_xml, synth_generate, CropRegime, ImageSample,
    InstanceMaskSet, RegimeMode, Split, Workspace,
};
use nucleisam::metrics::{evaluate_split, format_comparison_table, EvalItem, TableRow, DEFAULT_THRESHOLD};
use nucleisam::model::{checkpoint_load, PromptableSegmenter, Sam};
use nucleisam::pseudolabel::{boxes_from_instances, pseudolabel_batch, BatchItem, PseudoLabelStore};
use nucleisam::trainer::{finetune, FinetuneOptions, LabelSource, RunResult, TrainConfig, TrainExample};
use nucleisam::{Error, Result};
use serde_json::json;

use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "nucleisam", version, about = "Nuclei segmentation from weak box annotations")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Pipeline settings (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, crop draws and initialisation; for
    /// `finetune` it replaces the configured seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Workspace directory.
    #[arg(long, global = true, env = "NUCLEISAM_WORKDIR", default_value = ".")]
    pub workdir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Copy images and rasterised XML annotations into the workspace and assign splits.
    Ingest {
        /// Training-pool images with `<id>.xml` annotations alongside.
        #[arg(long)]
        images: PathBuf,
        /// Test images with annotations alongside.
        #[arg(long)]
        test_images: Option<PathBuf>,
        /// Whitespace-separated `image_id split` lines for the pool.
        #[arg(long)]
        split_file: Option<PathBuf>,
    },
    /// Derive tight boxes from the instance labels of the train and val splits.
    MakeWeak {
        #[arg(long, default_value = "full")]
        regime: RegimeMode,
    },
    /// Generate box-prompted pseudo-labels for every image with boxes.
    Pseudolabel {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train under the configured freeze policy and evaluate on the test split.
    Finetune {
        /// Initial weights; a fresh model of the configured preset otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "complete")]
        labels: LabelSource,
        #[arg(long)]
        regime: Option<RegimeMode>,
        /// Train every group with box prompts on complete labels.
        #[arg(long)]
        pretrain: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prompt-free evaluation of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison table over finished runs.
    Report {
        /// `run.json` files or run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset into the workspace.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<u32>,
    },
    /// Serve box-prompted segmentation and annotation storage over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
    },
}

/// Runs one command; the returned JSON summary is printed on success.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    let cfg = PipelineConfig::load(cli.global.config.as_deref())?;
    let ws = Workspace::new(&cli.global.workdir);
    let seed = cli.global.seed;
    match cli.command {
        Command::Ingest { images, test_images, split_file } => {
            ingest(&ws, &cfg, &images, test_images.as_deref(), split_file.as_deref())
        }
        Command::MakeWeak { regime } => make_weak(&ws, &cfg, regime, seed.unwrap_or(0)),
        Command::Pseudolabel { checkpoint } => pseudolabel(&ws, &cfg, &checkpoint),
        Command::Finetune { checkpoint, labels, regime, pretrain, out } => {
            let opts = FinetuneArgs { checkpoint, labels, regime, pretrain, out, seed };
            finetune_cmd(&ws, &cfg, opts)
        }
        Command::Evaluate { checkpoint, split, out } => evaluate(&ws, &checkpoint, split, out),
        Command::Report { runs, out } => report(&runs, out.as_deref()),
        Command::Synth { count, size } => synth(&ws, &cfg, count, size, seed.unwrap_or(0)),
        Command::Serve { checkpoint, addr } => {
            let addr = addr.unwrap_or_else(|| cfg.service.addr.clone());
            crate::service::serve_blocking(ws, cfg, checkpoint, &addr)?;
            Ok(json!({"stopped": true}))
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn ingest_dir(ws: &Workspace, dir: &Path, warnings: &mut Vec<String>) -> Result<Vec<String>> {
    let files = image_files(dir)?;
    for (id, path) in &files {
        let pixels = load_rgb(path)?;
        let xml = path.with_extension("xml");
        let doc = fs::read_to_string(&xml).map_err(|e| Error::io(&xml, e))?;
        let parsed = parse_annotation_xml(&doc, id, pixels.height() as usize, pixels.width() as usize)
            .map_err(|e| Error::Config(format!("{}: {e}", xml.display())))?;
        warnings.extend(parsed.warnings.iter().map(|w| format!("{id}: {w}")));
        let sample = ImageSample { image_id: id.clone(), pixels, split: Split::Train };
        ws.save_sample(&sample, Some(&parsed.masks))?;
    }
    Ok(files.into_keys().collect())
}

fn ingest(
    ws: &Workspace,
    cfg: &PipelineConfig,
    images: &Path,
    test_images: Option<&Path>,
    split_file: Option<&Path>,
) -> Result<serde_json::Value> {
    let mut warnings = Vec::new();
    let pool = ingest_dir(ws, images, &mut warnings)?;
    let test = match test_images {
        Some(dir) => ingest_dir(ws, dir, &mut warnings)?,
        None => Vec::new(),
    };
    let text = match split_file {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let train_count = cfg.data.train_count.min(pool.len());
    let splits = make_splits(&pool, &test, train_count, text.as_deref())?;
    ws.save_splits(&splits)?;
    Ok(json!({
        "ingested": pool.len() + test.len(),
        "train": splits.ids(Split::Train).len(),
        "val": splits.ids(Split::Val).len(),
        "test": splits.ids(Split::Test).len(),
        "warnings": warnings,
    }))
}

fn synth(
    ws: &Workspace,
    cfg: &PipelineConfig,
    count: Option<usize>,
    size: Option<u32>,
    seed: u64,
) -> Result<serde_json::Value> {
    let count = count.unwrap_or(cfg.data.synth_count);
    let size = size.unwrap_or(cfg.data.synth_size);
    if count < 3 {
        return Err(Error::InvalidArgument("synth needs at least 3 images".into()));
    }
    let images = synth_generate(count, size, seed)?;
    for img in &images {
        ws.save_sample(&img.sample, Some(&img.masks))?;
    }
    let ids: Vec<String> = images.iter().map(|i| i.sample.image_id.clone()).collect();
    let n_test = (count / 5).max(1);
    let n_val = (count / 5).max(1);
    let (pool, test) = ids.split_at(count - n_test);
    let splits = make_splits(pool, test, pool.len() - n_val, None)?;
    ws.save_splits(&splits)?;
    Ok(json!({
        "images": count,
        "size": size,
        "train": splits.ids(Split::Train).len(),
        "val": splits.ids(Split::Val).len(),
        "test": splits.ids(Split::Test).len(),
    }))
}

fn dims(ws: &Workspace, ids: &[String]) -> Result<Vec<(String, u32, u32)>> {
    ids.iter()
        .map(|id| {
            let (w, h) = ws.image_dimensions(id)?;
            Ok((id.clone(), h, w))
        })
        .collect()
}

/// Loads the regime manifest of `mode`, drawing and saving it first if absent.
fn regime(ws: &Workspace, cfg: &PipelineConfig, mode: RegimeMode, seed: u64) -> Result<CropRegime> {
    let splits = ws.load_splits()?;
    let train = dims(ws, &splits.ids(Split::Train))?;
    let path = ws.regime_path(mode);
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let r = CropRegime::from_manifest(&text)?;
        r.validate(&train)?;
        return Ok(r);
    }
    let r = CropRegime::draw(mode, cfg.data.crop_size, seed, &train)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&path, r.to_manifest()).map_err(|e| Error::io(&path, e))?;
    Ok(r)
}

fn make_weak(ws: &Workspace, cfg: &PipelineConfig, mode: RegimeMode, seed: u64) -> Result<serde_json::Value> {
    let splits = ws.load_splits()?;
    let regime = regime(ws, cfg, mode, seed)?;
    let mut written = Vec::new();
    let mut warnings = Vec::new();
    let train_ids = splits.ids(Split::Train);
    let samples = train_ids
        .iter()
        .map(|id| ws.load_sample(id, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let masks = train_ids.iter().map(|id| ws.load_masks(id)).collect::<Result<Vec<_>>>()?;
    let mut sets: Vec<InstanceMaskSet> =
        apply_crop_regime(&samples, &masks, &regime)?.into_iter().map(|(_, m)| m).collect();
    for id in splits.ids(Split::Val) {
        sets.push(ws.load_masks(&id)?);
    }
    for m in &sets {
        let (ann, w) = boxes_from_instances(m);
        warnings.extend(w);
        ws.save_weak(&ann)?;
        written.push(json!({"image_id": ann.image_id, "boxes": ann.boxes.len()}));
    }
    Ok(json!({"regime": mode.as_str(), "annotations": written, "warnings": warnings}))
}

fn load_model(path: &Path) -> Result<Sam> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    checkpoint_load(path)
}

fn pseudolabel(ws: &Workspace, cfg: &PipelineConfig, checkpoint: &Path) -> Result<serde_json::Value> {
    let model = load_model(checkpoint)?;
    let splits = ws.load_splits()?;
    let ids: Vec<String> = splits
        .iter()
        .filter(|(id, s)| **s != Split::Test && ws.has_weak(id))
        .map(|(id, _)| id.clone())
        .collect();
    if ids.is_empty() {
        return Err(Error::Config("no weak annotations in the workspace; run make-weak first".into()));
    }
    let images = ids.iter().map(|id| ws.load_image(id)).collect::<Result<Vec<_>>>()?;
    let anns = ids.iter().map(|id| ws.load_weak(id)).collect::<Result<Vec<_>>>()?;
    let items: Vec<BatchItem<'_>> = ids
        .iter()
        .zip(&images)
        .zip(&anns)
        .map(|((id, image), ann)| BatchItem { image_id: id, image, annotation: Some(ann) })
        .collect();
    let store = PseudoLabelStore::new(ws.pseudolabel_dir());
    let outcome = pseudolabel_batch(&model, &items, &cfg.pseudolabel, Some(&store));
    if let Some((id, e)) = outcome.failures.first() {
        return Err(Error::InvalidArgument(format!(
            "{} of {} images failed; first {id}: {e}",
            outcome.failures.len(),
            ids.len()
        )));
    }
    Ok(json!({
        "checkpoint_id": model.identifier(),
        "labelled": outcome.labels.len(),
        "dir": store.dir(),
    }))
}

pub struct FinetuneArgs {
    pub checkpoint: Option<PathBuf>,
    pub labels: LabelSource,
    pub regime: Option<RegimeMode>,
    pub pretrain: bool,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn complete_examples(ws: &Workspace, ids: &[String]) -> Result<Vec<TrainExample>> {
    ids.iter()
        .map(|id| {
            let sample = ws.load_sample(id, Split::Train)?;
            Ok(TrainExample::from_instances(&sample, &ws.load_masks(id)?))
        })
        .collect()
}

fn weak_examples(ws: &Workspace, store: &PseudoLabelStore, ids: &[String]) -> Result<Vec<TrainExample>> {
    ids.iter()
        .map(|id| {
            if !store.exists(id) {
                return Err(Error::Config(format!("no pseudo-label for {id}; run pseudolabel first")));
            }
            let label = store.load(id)?;
            Ok(TrainExample::from_mask(id.clone(), ws.load_image(id)?, label.mask))
        })
        .collect()
}

fn finetune_cmd(ws: &Workspace, cfg: &PipelineConfig, args: FinetuneArgs) -> Result<serde_json::Value> {
    let mut train_cfg: TrainConfig = if args.pretrain { cfg.pretrain_config() } else { cfg.train_config() };
    if let Some(seed) = args.seed {
        train_cfg.seeds = vec![seed];
    }
    if args.pretrain && args.labels == LabelSource::Weak {
        return Err(Error::Config("pretraining uses complete labels".into()));
    }
    train_cfg.label_source = args.labels;
    if let Some(r) = args.regime {
        train_cfg.regime = r;
    }
    train_cfg.validate()?;

    let splits = ws.load_splits()?;
    let (train_ids, val_ids, test_ids) =
        (splits.ids(Split::Train), splits.ids(Split::Val), splits.ids(Split::Test));
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::Config("train and val splits must be nonempty".into()));
    }
    let regime = regime(ws, cfg, train_cfg.regime, train_cfg.seeds[0])?;
    let (train, val) = match args.labels {
        LabelSource::Complete => {
            let samples = train_ids
                .iter()
                .map(|id| ws.load_sample(id, Split::Train))
                .collect::<Result<Vec<_>>>()?;
            let masks = train_ids.iter().map(|id| ws.load_masks(id)).collect::<Result<Vec<_>>>()?;
            let train: Vec<TrainExample> = apply_crop_regime(&samples, &masks, &regime)?
                .iter()
                .map(|(s, m)| TrainExample::from_instances(s, m))
                .collect();
            (train, complete_examples(ws, &val_ids)?)
        }
        LabelSource::Weak => {
            let store = PseudoLabelStore::new(ws.pseudolabel_dir());
            let train: Vec<TrainExample> = weak_examples(ws, &store, &train_ids)?
                .into_iter()
                .filter_map(|ex| {
                    let (image, target) = regime.restrict_binary(&ex.image_id, &ex.image, &ex.target)?;
                    Some(TrainExample { image, target, ..ex })
                })
                .collect();
            (train, weak_examples(ws, &store, &val_ids)?)
        }
    };
    let test = complete_examples(ws, &test_ids)?;

    let init = match &args.checkpoint {
        Some(p) => load_model(p)?,
        None => Sam::new(cfg.model_config(), train_cfg.seeds[0])?,
    };
    let name = if args.pretrain {
        "pretrain".to_string()
    } else {
        format!("{}-{}", train_cfg.label_source, train_cfg.regime)
    };
    let out = args.out.unwrap_or_else(|| ws.runs_dir().join(name));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let curve = out.join("curve.jsonl");
    if curve.exists() {
        fs::remove_file(&curve).map_err(|e| Error::io(&curve, e))?;
    }
    fs::write(out.join("config.toml"), train_cfg.to_toml()).map_err(|e| Error::io(&out, e))?;
    let opts = FinetuneOptions {
        test: (!test.is_empty()).then_some(&test[..]),
        checkpoint_dir: Some(out.join("checkpoints")),
        curve_log: Some(curve),
    };
    let output = finetune(&init, &train, &val, &train_cfg, &opts)?;
    write_json(&out.join("run.json"), &output.result)?;
    Ok(json!({
        "out": out,
        "seeds": output.result.seeds.iter().map(|s| json!({
            "seed": s.seed,
            "checkpoint_id": s.checkpoint_id,
            "best_epoch": s.best_epoch,
            "best_val_loss": s.best_val_loss,
        })).collect::<Vec<_>>(),
        "mean": output.result.mean,
    }))
}

fn evaluate(ws: &Workspace, checkpoint: &Path, split: Split, out: Option<PathBuf>) -> Result<serde_json::Value> {
    let model = load_model(checkpoint)?;
    let splits = ws.load_splits()?;
    let ids = splits.ids(split);
    if ids.is_empty() {
        return Err(Error::Config(format!("split {split} is empty")));
    }
    let images = ids.iter().map(|id| ws.load_image(id)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<Option<ndarray::Array2<u8>>> =
        ids.iter().map(|id| ws.load_masks(id).ok().map(|m| m.semantic())).collect();
    let items: Vec<EvalItem<'_>> = ids
        .iter()
        .zip(&images)
        .zip(&gts)
        .map(|((id, image), gt)| EvalItem { image_id: id, image, gt: gt.as_ref() })
        .collect();
    let report = evaluate_split(&model, &items, DEFAULT_THRESHOLD)?;
    let id = model.identifier();
    let out = out.unwrap_or_else(|| ws.runs_dir().join(format!("eval-{id}")));
    let path = out.join(format!("metrics-{split}.json"));
    write_json(&path, &report)?;
    Ok(json!({"checkpoint_id": id, "split": split.as_str(), "report": path, "mean": report.mean}))
}

fn read_run(path: &Path) -> Result<RunResult> {
    let file = if path.is_dir() { path.join("run.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file.display())))
}

/// One row per seed plus a mean row per run.
pub fn report_rows(runs: &[RunResult]) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for run in runs {
        let label = run.config.label_source.to_string();
        let data = run.config.regime.to_string();
        for s in &run.seeds {
            let report = s
                .report
                .as_ref()
                .ok_or_else(|| Error::Config(format!("seed {} of a {label}/{data} run has no test report", s.seed)))?;
            rows.push(TableRow {
                label: label.clone(),
                method: format!("seed {}", s.seed),
                training_data: data.clone(),
                means: report.mean,
            });
        }
        let mean = RunResult::mean_of_seeds(&run.seeds)
            .ok_or_else(|| Error::Config(format!("{label}/{data} run has no seeds")))?;
        rows.push(TableRow { label, method: "mean".into(), training_data: data, means: mean });
    }
    Ok(rows)
}

fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<serde_json::Value> {
    let runs = paths.iter().map(|p| read_run(p)).collect::<Result<Vec<_>>>()?;
    let table = format_comparison_table(&report_rows(&runs)?);
    if let Some(out) = out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(out, &table).map_err(|e| Error::io(out, e))?;
    }
    Ok(json!({"table": table}))
}

/// Error record printed on failure.
pub fn error_record(e: &Error) -> serde_json::Value {
    let mut record = json!({"kind": e.kind(), "message": e.to_string()});
    if let Error::Prompt { index, .. } = e {
        record["box_index"] = json!(index);
    }
    json!({ "error": record })
}

//! Finetuning under a freeze policy with early stopping and seeded repeats.

mod config;
mod early_stop;
mod loss;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::imageops;
use image::RgbImage;
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{LabelSource, TrainConfig};
pub use early_stop::{best_epoch, early_stop_check, EarlyStopper, StopDecision};
pub use loss::{training_loss, CandidateSelection, LossWeights};

use crate::dataio::{ImageSample, InstanceMaskSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, EvalItem, MetricMeans, MetricReport, DEFAULT_THRESHOLD};
use crate::model::checkpoint::{checkpoint_id, serialize};
use crate::model::{checkpoint_save, partition_parameters, resize_nearest, BBox, PromptSet, Sam};
use crate::pseudolabel::boxes_from_instances;
use loss::{objective, target_tensor};

/// One supervised image.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub image_id: String,
    pub image: RgbImage,
    /// Binary foreground target at image resolution.
    pub target: Array2<u8>,
    /// Instance labels, needed only for box-prompted samples.
    pub instances: Option<Array2<u32>>,
}

impl TrainExample {
    pub fn from_instances(sample: &ImageSample, masks: &InstanceMaskSet) -> Self {
        TrainExample {
            image_id: sample.image_id.clone(),
            image: sample.pixels.clone(),
            target: masks.semantic(),
            instances: Some(masks.label_map.clone()),
        }
    }

    pub fn from_mask(image_id: impl Into<String>, image: RgbImage, mask: Array2<u8>) -> Self {
        TrainExample { image_id: image_id.into(), image, target: mask, instances: None }
    }

    fn check(&self) -> Result<()> {
        let dims = (self.image.height() as usize, self.image.width() as usize);
        if self.target.dim() != dims || self.instances.as_ref().is_some_and(|m| m.dim() != dims) {
            return Err(Error::Shape(format!("{}: target does not match the image size", self.image_id)));
        }
        Ok(())
    }
}

/// A prepared image plus its supervision at model resolution.
struct Prepared {
    image: crate::model::PreparedImage,
    target: Array2<u8>,
    /// Box prompts in original coordinates with their instance targets.
    boxes: Vec<(BBox, Array2<u8>)>,
}

fn flip_map<T: Clone>(m: &Array2<T>, h: bool, v: bool) -> Array2<T> {
    match (h, v) {
        (false, false) => m.clone(),
        (true, false) => m.slice(s![.., ..;-1]).to_owned(),
        (false, true) => m.slice(s![..;-1, ..]).to_owned(),
        (true, true) => m.slice(s![..;-1, ..;-1]).to_owned(),
    }
}

/// Chooses up to `k` instance ids: random under `rng`, else evenly spaced.
fn pick_instances(n: u32, k: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<u32> {
    let n = n as usize;
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let take = k.min(n);
    let mut ids: Vec<u32> = match rng {
        Some(rng) => rand::seq::index::sample(rng, n, take).into_iter().map(|i| i as u32 + 1).collect(),
        None => (0..take).map(|i| (i * n / take) as u32 + 1).collect(),
    };
    ids.sort_unstable();
    ids
}

fn prepare(
    model: &Sam,
    ex: &TrainExample,
    flips: (bool, bool),
    boxes_per_image: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Prepared> {
    let (fh, fv) = flips;
    let mut img = ex.image.clone();
    if fh {
        imageops::flip_horizontal_in_place(&mut img);
    }
    if fv {
        imageops::flip_vertical_in_place(&mut img);
    }
    let image = model.prepare(&img)?;
    let r = model.config().input_resolution;
    let target = resize_nearest(flip_map(&ex.target, fh, fv).view(), r, r);
    let mut boxes = Vec::new();
    if boxes_per_image > 0 {
        if let Some(inst) = &ex.instances {
            let masks = InstanceMaskSet::from_labels(ex.image_id.clone(), flip_map(inst, fh, fv));
            let (ann, _) = boxes_from_instances(&masks);
            for id in pick_instances(ann.boxes.len() as u32, boxes_per_image, rng) {
                let one = masks.label_map.mapv(|v| u8::from(v == id));
                boxes.push((ann.boxes[id as usize - 1], resize_nearest(one.view(), r, r)));
            }
        }
    }
    Ok(Prepared { image, target, boxes })
}

/// Objective of a batch and the per-sample segmentation losses.
fn batch_objective(model: &Sam, batch: &[Prepared], weights: &LossWeights) -> Result<(Tensor, Vec<f64>)> {
    let refs: Vec<_> = batch.iter().map(|p| &p.image).collect();
    let (pixels, hfc) = model.batch_tensors(&refs)?;
    let emb = model.encode(&pixels, &hfc)?;
    let dtype = model.dtype();

    let empty: Vec<_> = batch
        .iter()
        .map(|p| model.encode_prompts(&PromptSet::empty(), p.image.original))
        .collect::<Result<_>>()?;
    let (logits, quality) = model.decode(&emb, &empty)?;
    let mut free_terms = Vec::new();
    let mut seg_losses = Vec::new();
    for (b, p) in batch.iter().enumerate() {
        let (t, n_pos) = target_tensor(p.target.view(), dtype)?;
        let (obj, seg, _) = objective(
            &logits.get(b)?,
            &quality.get(b)?,
            &t,
            n_pos,
            weights,
            CandidateSelection::MaxQuality,
        )?;
        free_terms.push(obj);
        seg_losses.push(seg);
    }
    let mut total = (Tensor::stack(&free_terms, 0)?.sum_all()? / batch.len() as f64)?;

    let mut box_embs = Vec::new();
    let mut box_prompts = Vec::new();
    let mut box_targets = Vec::new();
    for (b, p) in batch.iter().enumerate() {
        for (bx, t) in &p.boxes {
            box_embs.push(emb.get(b)?.unsqueeze(0)?);
            box_prompts.push(model.encode_prompts(&PromptSet::single_box(*bx), p.image.original)?);
            box_targets.push(t);
        }
    }
    if !box_prompts.is_empty() {
        let (logits, quality) = model.decode(&Tensor::cat(&box_embs, 0)?, &box_prompts)?;
        let mut terms = Vec::new();
        for (j, t) in box_targets.iter().enumerate() {
            let (t, n_pos) = target_tensor(t.view(), dtype)?;
            let (obj, seg, _) =
                objective(&logits.get(j)?, &quality.get(j)?, &t, n_pos, weights, CandidateSelection::MinLoss)?;
            terms.push(obj);
            seg_losses.push(seg);
        }
        total = (total + (Tensor::stack(&terms, 0)?.sum_all()? / terms.len() as f64)?)?;
    }
    Ok((total, seg_losses))
}

/// Deterministic objective over `examples` (no augmentation, evenly spaced
/// box choice) as a differentiable scalar.
pub fn objective_on(model: &Sam, examples: &[TrainExample], config: &TrainConfig) -> Result<Tensor> {
    let prepared = examples
        .iter()
        .map(|e| prepare(model, e, (false, false), config.box_prompts_per_image, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_objective(model, &prepared, &config.loss_weights)?.0)
}

/// Mean segmentation loss over `examples`, evaluated in batches.
pub fn validation_loss(model: &Sam, examples: &[TrainExample], config: &TrainConfig) -> Result<f64> {
    let mut losses = Vec::new();
    for chunk in examples.chunks(config.batch_size.max(1)) {
        let prepared = chunk
            .iter()
            .map(|e| prepare(model, e, (false, false), config.box_prompts_per_image, None))
            .collect::<Result<Vec<_>>>()?;
        losses.extend(batch_objective(model, &prepared, &config.loss_weights)?.1);
    }
    if losses.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub checkpoint_id: String,
    pub checkpoint_path: Option<PathBuf>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub report: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub seeds: Vec<SeedResult>,
    /// Metric-wise mean of the per-seed means, when evaluated.
    pub mean: Option<MetricMeans>,
    pub curves: Vec<EpochRecord>,
}

impl RunResult {
    pub fn mean_of_seeds(seeds: &[SeedResult]) -> Option<MetricMeans> {
        let means: Vec<MetricMeans> = seeds.iter().filter_map(|s| s.report.as_ref().map(|r| r.mean)).collect();
        (!means.is_empty() && means.len() == seeds.len()).then(|| MetricMeans::average(&means))
    }
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneOptions<'a> {
    /// Evaluate each seed's best model prompt-free on these examples.
    pub test: Option<&'a [TrainExample]>,
    /// Save `seed<k>.safetensors` per seed here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append one JSON record per epoch here.
    pub curve_log: Option<PathBuf>,
}

pub struct FinetuneOutput {
    pub result: RunResult,
    /// Best model per seed, in seed order.
    pub models: Vec<Sam>,
}

fn cosine_lr(base: f64, epoch: usize, max_epochs: usize) -> f64 {
    0.5 * base * (1.0 + (PI * epoch as f64 / max_epochs as f64).cos())
}

fn append_jsonl(path: &Path, record: &EpochRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

/// Trains a copy of `init` per seed and keeps the epoch with the lowest
/// validation loss. `init` itself is not modified.
pub fn finetune(
    init: &Sam,
    train: &[TrainExample],
    val: &[TrainExample],
    config: &TrainConfig,
    options: &FinetuneOptions<'_>,
) -> Result<FinetuneOutput> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    for ex in train.iter().chain(val) {
        ex.check()?;
    }
    if train.iter().all(|e| e.target.iter().all(|&v| v == 0)) {
        return Err(Error::Config("no annotated foreground in any training image".into()));
    }
    let mut seeds = Vec::new();
    let mut models = Vec::new();
    let mut curves = Vec::new();
    for &seed in &config.seeds {
        let (model, seed_result, curve) = train_seed(init, train, val, config, options, seed)?;
        seeds.push(seed_result);
        models.push(model);
        curves.extend(curve);
    }
    let mean = RunResult::mean_of_seeds(&seeds);
    Ok(FinetuneOutput { result: RunResult { config: config.clone(), seeds, mean, curves }, models })
}

fn train_seed(
    init: &Sam,
    train: &[TrainExample],
    val: &[TrainExample],
    config: &TrainConfig,
    options: &FinetuneOptions<'_>,
    seed: u64,
) -> Result<(Sam, SeedResult, Vec<EpochRecord>)> {
    let mut model = init.deep_copy(init.dtype())?;
    let policy = &config.freeze_policy;
    let (trainable, _) = partition_parameters(model.params(), policy)?;
    if config.reinit_trainable {
        let groups: Vec<_> = policy.trainable_groups.iter().copied().collect();
        model.reinitialize(&groups, seed)?;
    }
    let view = model.training_view(policy)?;
    let vars: Vec<Var> = trainable
        .iter()
        .map(|n| model.params().get(n).expect("partition names exist").clone())
        .collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW { lr: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() },
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best: Option<BTreeMap<String, Tensor>> = None;
    let mut curve = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.max_epochs);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut seg = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let flips = if config.augment_flips { (rng.random(), rng.random()) } else { (false, false) };
                batch.push(prepare(&view, &train[i], flips, config.box_prompts_per_image, Some(&mut rng))?);
            }
            let (loss, losses) = batch_objective(&view, &batch, &config.loss_weights)?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                let ids: Vec<&str> = chunk.iter().map(|&i| train[i].image_id.as_str()).collect();
                return Err(Error::Training(format!(
                    "seed {seed}, epoch {epoch}: loss is {value} on batch {ids:?}"
                )));
            }
            opt.backward_step(&loss)?;
            seg.extend(losses);
        }
        let train_loss = seg.iter().sum::<f64>() / seg.len() as f64;
        let val_loss = validation_loss(&model, val, config)?;
        if !val_loss.is_finite() {
            let ids: Vec<&str> = val.iter().map(|e| e.image_id.as_str()).collect();
            return Err(Error::Training(format!(
                "seed {seed}, epoch {epoch}: validation loss is {val_loss} on {ids:?}"
            )));
        }
        let (improved, decision) = stopper.observe(val_loss);
        if improved {
            best = Some(model.params().snapshot(&trainable)?);
        }
        let record = EpochRecord { seed, epoch, learning_rate: lr, train_loss, val_loss };
        log::info!("seed {seed} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr:.2e}");
        if let Some(path) = &options.curve_log {
            append_jsonl(path, &record)?;
        }
        curve.push(record);
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    if let Some(snap) = &best {
        model.params().restore(snap)?;
    }
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one finite epoch");

    let (checkpoint_id, checkpoint_path) = match &options.checkpoint_dir {
        Some(dir) => {
            let path = dir.join(format!("seed{seed}.safetensors"));
            (checkpoint_save(&model, &path)?, Some(path))
        }
        None => (checkpoint_id(&serialize(model.params(), model.config())?), None),
    };
    model.set_checkpoint_id(checkpoint_id.clone());

    let report = match options.test {
        Some(test) => Some(evaluate_examples(&model, test, DEFAULT_THRESHOLD)?),
        None => None,
    };
    let result = SeedResult {
        seed,
        checkpoint_id,
        checkpoint_path,
        best_epoch,
        best_val_loss,
        epochs_run: curve.len(),
        stopped_early,
        report,
    };
    Ok((model, result, curve))
}

/// Prompt-free evaluation of `model` against the examples' targets.
pub fn evaluate_examples(model: &Sam, examples: &[TrainExample], threshold: f32) -> Result<MetricReport> {
    let items: Vec<EvalItem<'_>> = examples
        .iter()
        .map(|e| EvalItem { image_id: &e.image_id, image: &e.image, gt: Some(&e.target) })
        .collect();
    evaluate_split(model, &items, threshold)
}

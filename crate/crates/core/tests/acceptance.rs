//! Acceptance suite: prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use nucleisam::dataio::{load_rgb, parse_annotation_xml, synth_generate, CropRegime, RegimeMode, SynthImage};
use nucleisam::metrics::{adjusted_rand, auc, best_f1, confusion_counts, ConfusionCounts};
use nucleisam::model::{
    extract_hfc, import_external_weights, FreezePolicy, ModelConfig, NameMap, ParamGroup, Preset, PromptSet,
    PromptableSegmenter, Sam,
};
use nucleisam::pseudolabel::{boxes_from_instances, generate_pseudo_mask, PseudoLabelParams};
use nucleisam::trainer::{
    early_stop_check, evaluate_examples, finetune, objective_on, EarlyStopper, FinetuneOptions, StopDecision,
    TrainConfig, TrainExample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::{ari_bruteforce, auc_bruteforce, f1_at, overlap_bruteforce};

const METRIC_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(30);
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const GRAD_PROBES_PER_GROUP: usize = 12;
const HFC_IDENTITY_TOL: f32 = 1e-5;
const HFC_CONSTANT_TOL: f32 = 1e-4;
const PATIENCE: usize = 40;

// Synthetic end-to-end thresholds, fixed from the pilot run.
const PSEUDO_DICE_MIN: f64 = 0.80;
const TEST_DICE_MIN: f64 = 0.75;
const WEAK_GAP_MAX: f64 = 0.05;
const E2E_BUDGET: Duration = Duration::from_secs(20 * 60);

// Published full-scale pseudo-label Dice and its tolerance.
const FULL_PSEUDO_DICE: f64 = 0.883;
const FULL_PSEUDO_TOL: f64 = 0.02;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Verdict;

fn require(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("metric oracle suite", metric_oracles),
        ("dice-iou identity and best_f1 bound", dice_iou_identity),
        ("gradient check", gradient_check),
        ("freeze policy", freeze_policy),
        ("prompt-free equivalence", prompt_free_equivalence),
        ("hfc boundaries", hfc_boundaries),
        ("regime accounting", regime_accounting),
        ("early stopping", early_stopping),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("full-scale pseudo-labels", full_scale),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in checks {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Verdict::Pass(d) => println!("PASS {name} ({secs:.1}s): {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {d}");
            }
            Verdict::Skip(d) => println!("SKIP {name}: {d}"),
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn random_case(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<bool>, Vec<bool>) {
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let density: f64 = rng.random();
    let bits = |rng: &mut ChaCha8Rng| (0..h * w).map(|_| rng.random_bool(density)).collect::<Vec<_>>();
    let a = bits(rng);
    let b = bits(rng);
    (h, w, a, b)
}

fn as_mask(h: usize, w: usize, bits: &[bool]) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |(r, c)| bits[r * w + c] as u8)
}

fn metric_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for case in 0..1000 {
        let (h, w, a, b) = random_case(&mut rng);
        let pred = as_mask(h, w, &a);
        let gt = as_mask(h, w, &b);
        let c = ConfusionCounts::from_masks(pred.view(), gt.view()).unwrap();
        let want = overlap_bruteforce(&a, &b);
        let got = [c.dice(), c.iou(), c.recall(), c.precision()];
        let pv: Vec<u8> = pred.iter().copied().collect();
        let gv: Vec<u8> = gt.iter().copied().collect();
        let mut errs: Vec<(&str, f64)> = ["dice", "iou", "recall", "precision"]
            .into_iter()
            .zip(got.iter().zip(want).map(|(g, w)| (g - w).abs()))
            .collect();
        errs.push(("adj", (adjusted_rand(pred.view(), gt.view()).unwrap() - ari_bruteforce(&pv, &gv)).abs()));

        let probs: Vec<f32> = (0..h * w).map(|_| rng.random_range(0..6) as f32 / 5.0).collect();
        let prob = Array2::from_shape_vec((h, w), probs.clone()).unwrap();
        match (auc(prob.view(), gt.view()).unwrap(), auc_bruteforce(&probs, &gv)) {
            (Some(x), Some(y)) => errs.push(("auc", (x - y).abs())),
            (None, None) => {}
            other => bad.push(format!("case {case}: auc definedness {other:?}")),
        }
        if let Some(bf) = best_f1(prob.view(), gt.view()).unwrap() {
            let want = probs.iter().map(|&t| f1_at(&probs, &gv, t)).fold(0.0, f64::max);
            errs.push(("best_f1", (bf - want).abs()));
        }
        for (name, e) in errs {
            worst = worst.max(e);
            if !(e <= METRIC_TOL) {
                bad.push(format!("case {case}: {name} off by {e:e}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("1000 cases, worst error {worst:.1e}, {:.2}s", elapsed.as_secs_f64());
    if !bad.is_empty() {
        return Verdict::Fail(format!("{detail}; {}", bad[..bad.len().min(3)].join("; ")));
    }
    require(elapsed < METRIC_BUDGET, detail)
}

fn dice_iou_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for case in 0..10_000 {
        let (h, w, a, b) = random_case(&mut rng);
        let gt = as_mask(h, w, &b);
        let c = ConfusionCounts::from_masks(as_mask(h, w, &a).view(), gt.view()).unwrap();
        let (d, j) = (c.dice(), c.iou());
        let err = (d - 2.0 * j / (1.0 + j)).abs();
        worst = worst.max(err);
        if err > 1e-12 {
            return Verdict::Fail(format!("case {case}: dice {d} iou {j}"));
        }
        let probs: Vec<f32> = (0..h * w).map(|_| rng.random()).collect();
        let prob = Array2::from_shape_vec((h, w), probs).unwrap();
        if let Some(bf) = best_f1(prob.view(), gt.view()).unwrap() {
            let at_half = confusion_counts(prob.view(), gt.view(), 0.5).unwrap().dice();
            if bf + 1e-12 < at_half {
                return Verdict::Fail(format!("case {case}: best_f1 {bf} < f1@0.5 {at_half}"));
            }
        }
    }
    Verdict::Pass(format!("10000 cases, worst identity error {worst:.1e}"))
}

fn synth_examples(n: usize, size: u32, seed: u64) -> Vec<TrainExample> {
    synth_generate(n, size, seed)
        .unwrap()
        .iter()
        .map(|s| TrainExample::from_instances(&s.sample, &s.masks))
        .collect()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let model = Sam::with_dtype(ModelConfig::tiny(), 11, DType::F64).unwrap();
    let view = model.training_view(&FreezePolicy::adapter_tuning()).unwrap();
    let data = synth_examples(1, 128, 11);
    let mut cfg = TrainConfig { box_prompts_per_image: 1, seeds: vec![0], ..Default::default() };
    // Drop the quality regression: its target is detached, so finite
    // differences and backprop disagree on it by construction.
    cfg.loss_weights.quality_weight = 0.0;
    let grads = objective_on(&view, &data, &cfg).unwrap().backward().unwrap();
    let eval = || values(&objective_on(&view, &data, &cfg).unwrap())[0];

    let mut probes = Vec::new();
    for group in [ParamGroup::Adapters, ParamGroup::MaskDecoder] {
        let names = model.params().group_names(group);
        let take = GRAD_PROBES_PER_GROUP.min(names.len());
        for k in 0..take {
            let name = names[k * names.len() / take].clone();
            let n = model.params().get(&name).unwrap().as_tensor().elem_count();
            probes.push((group, name, (k * 7919) % n));
        }
    }

    // Adapter gradients are ~1e-7 against a loss of ~3, so forward roundoff
    // divided by 2h dominates below h = 1e-4.
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut nonzero = [0usize; 2];
    for (group, name, idx) in &probes {
        let var = model.params().get(name).unwrap();
        let analytic = grads.get(var.as_tensor()).map(|g| values(g)[*idx]).unwrap_or(0.0);
        let orig = values(var.as_tensor());
        let shape = var.as_tensor().shape().clone();
        let set = |delta: f64| {
            let mut v = orig.clone();
            v[*idx] += delta;
            var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
        };
        set(h);
        let up = eval();
        set(-h);
        let down = eval();
        set(0.0);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(rel);
        if analytic.abs() > 1e-12 {
            nonzero[(*group == ParamGroup::MaskDecoder) as usize] += 1;
        }
        if rel > GRAD_TOL {
            return Verdict::Fail(format!("{name}[{idx}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"));
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{} probes ({} adapter, {} decoder with nonzero gradient), worst rel error {worst:.1e}, {:.0}s",
        probes.len(),
        nonzero[0],
        nonzero[1],
        elapsed.as_secs_f64()
    );
    require(probes.len() >= 20 && nonzero.iter().all(|&n| n > 0) && elapsed < GRAD_BUDGET, detail)
}

fn freeze_policy() -> Verdict {
    let init = Sam::new(ModelConfig::tiny(), 21).unwrap();
    let data = synth_examples(3, 128, 21);
    let cfg = TrainConfig {
        max_epochs: 1,
        patience: 1,
        batch_size: 2,
        seeds: vec![0],
        reinit_trainable: false,
        augment_flips: false,
        ..Default::default()
    };
    let out = finetune(&init, &data[..2], &data[2..], &cfg, &FinetuneOptions::default()).unwrap();
    let trained = &out.models[0];
    let mut changed = std::collections::BTreeMap::new();
    for group in ParamGroup::ALL {
        let n = init
            .params()
            .group_names(group)
            .iter()
            .filter(|n| {
                values(init.params().get(n).unwrap().as_tensor()) != values(trained.params().get(n).unwrap().as_tensor())
            })
            .count();
        changed.insert(group, n);
    }
    let detail = format!("changed tensors per group: {changed:?}");
    require(
        changed[&ParamGroup::EncoderBackbone] == 0
            && changed[&ParamGroup::PromptEncoder] == 0
            && changed[&ParamGroup::Adapters] >= 1
            && changed[&ParamGroup::MaskDecoder] >= 1,
        detail,
    )
}

fn prompt_free_equivalence() -> Verdict {
    let model = Sam::new(ModelConfig::tiny(), 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..10 {
        let (w, h) = (rng.random_range(40..200), rng.random_range(40..200));
        let image = common::noise_image(w, h, 100 + i);
        let a = model.forward_promptless(&image).unwrap();
        let b = model.forward(&image, &PromptSet::default()).unwrap();
        let c = model.segment(&image, &PromptSet::default()).unwrap();
        if a != b || a != c {
            return Verdict::Fail(format!("input {i} ({w}x{h}) differs"));
        }
    }
    Verdict::Pass("10 inputs bit-identical".into())
}

fn hfc_boundaries() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let image = Array3::from_shape_fn((3, 48, 40), |_| rng.random::<f32>());
    let id = extract_hfc(image.view(), 0.0).unwrap();
    let id_err = (&id - &image).iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let zero = extract_hfc(image.view(), 1.0).unwrap();
    let zero_max = zero.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let constant = Array3::from_elem((3, 48, 40), 0.6f32);
    let flat = extract_hfc(constant.view(), 0.25).unwrap();
    let flat_max = flat.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    require(
        id_err <= HFC_IDENTITY_TOL && zero_max == 0.0 && flat_max <= HFC_CONSTANT_TOL,
        format!("tau=0 error {id_err:.1e}, tau=1 max {zero_max:.1e}, constant max {flat_max:.1e}"),
    )
}

fn regime_accounting() -> Verdict {
    let dims: Vec<(String, u32, u32)> = (0..24).map(|i| (format!("tile_{i:02}"), 1000, 1000)).collect();
    let image = image::RgbImage::new(1000, 1000);
    let ones = Array2::<u8>::ones((1000, 1000));
    let mut parts = Vec::new();
    let mut ok = true;
    for (mode, want) in [(RegimeMode::Pct4, 0.04), (RegimeMode::Pct0_5, 0.005)] {
        let regime = CropRegime::draw(mode, 200, 5, &dims).unwrap();
        let fraction = regime.annotated_fraction(&dims);
        let labelled: usize = dims
            .iter()
            .filter_map(|(id, _, _)| regime.restrict_binary(id, &image, &ones))
            .map(|(_, m)| m.iter().map(|&v| v as usize).sum::<usize>())
            .sum();
        let counted = labelled as f64 / (24.0 * 1e6);
        ok &= fraction == want && counted == want;
        parts.push(format!("{mode}: declared {fraction}, counted {counted}"));
    }
    require(ok, parts.join(", "))
}

/// Textbook patience loop: index at which training stops, if any.
fn reference_stop(history: &[f64], patience: usize) -> Option<usize> {
    let mut best = f64::INFINITY;
    let mut wait = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < best {
            best = v;
            wait = 0;
        } else {
            wait += 1;
        }
        if wait >= patience {
            return Some(i);
        }
    }
    None
}

fn early_stopping() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut stops = 0;
    for case in 0..10_000 {
        let len = rng.random_range(0..200);
        let levels = rng.random_range(2..40);
        let history: Vec<f64> = (0..len)
            .map(|_| if rng.random_bool(0.01) { f64::NAN } else { rng.random_range(0..levels) as f64 / 8.0 })
            .collect();
        let want = reference_stop(&history, PATIENCE);
        let mut stopper = EarlyStopper::new(PATIENCE);
        let mut got = None;
        for (i, &v) in history.iter().enumerate() {
            let (_, d) = stopper.observe(v);
            if d != early_stop_check(&history[..=i], PATIENCE) {
                return Verdict::Fail(format!("case {case}: stopper and check disagree at epoch {i}"));
            }
            if d == StopDecision::Stop {
                got = Some(i);
                break;
            }
        }
        if got != want {
            return Verdict::Fail(format!("case {case}: stopped at {got:?}, reference {want:?}"));
        }
        stops += got.is_some() as usize;
    }
    Verdict::Pass(format!("10000 histories, {stops} stopped, patience {PATIENCE}"))
}

fn to_examples(images: &[SynthImage]) -> Vec<TrainExample> {
    images.iter().map(|s| TrainExample::from_instances(&s.sample, &s.masks)).collect()
}

fn synthetic_end_to_end() -> Verdict {
    let start = Instant::now();
    let images = synth_generate(100, 128, 7).unwrap();
    let (pretrain_set, rest) = images.split_at(40);
    let (pretrain_val, rest) = rest.split_at(10);
    let (fresh, test) = rest.split_at(20);
    let test = to_examples(&test[..20]);

    // (a) whole-model training with box prompts on complete labels
    let pre_cfg = TrainConfig {
        max_epochs: 40,
        patience: 8,
        learning_rate: 1e-3,
        batch_size: 4,
        seeds: vec![0],
        freeze_policy: FreezePolicy::all_trainable(),
        reinit_trainable: false,
        box_prompts_per_image: 4,
        ..Default::default()
    };
    let init = Sam::new(ModelConfig::tiny(), 0).unwrap();
    let pre = finetune(&init, &to_examples(pretrain_set), &to_examples(pretrain_val), &pre_cfg, &Default::default())
        .unwrap();
    let pretrained = &pre.models[0];

    // (b) box-prompted pseudo-labels on fresh images
    let params = PseudoLabelParams::default();
    let mut pseudo_dice = 0.0;
    let mut weak = Vec::new();
    for s in fresh {
        let (ann, _) = boxes_from_instances(&s.masks);
        let label = generate_pseudo_mask(pretrained, &s.sample.pixels, &ann, &params).unwrap();
        let gt = s.masks.semantic();
        pseudo_dice += ConfusionCounts::from_masks(label.mask.view(), gt.view()).unwrap().dice();
        weak.push(TrainExample::from_mask(s.sample.image_id.clone(), s.sample.pixels.clone(), label.mask));
    }
    pseudo_dice /= fresh.len() as f64;
    let complete = to_examples(fresh);

    // (c) re-initialised adapters and decoder, backbone frozen
    let ft_cfg = TrainConfig {
        max_epochs: 40,
        patience: 8,
        learning_rate: 1e-3,
        batch_size: 4,
        seeds: vec![0],
        ..Default::default()
    };
    let mut dice = [0.0; 2];
    for (k, set) in [&weak, &complete].into_iter().enumerate() {
        let (train, val) = set.split_at(16);
        let out = finetune(pretrained, train, val, &ft_cfg, &FinetuneOptions::default()).unwrap();
        // (d) prompt-free test evaluation
        dice[k] = evaluate_examples(&out.models[0], &test, 0.5).unwrap().mean.dice;
    }
    let [weak_dice, complete_dice] = dice;
    let elapsed = start.elapsed();
    let detail = format!(
        "pseudo-label dice {pseudo_dice:.4}, test dice weak {weak_dice:.4} complete {complete_dice:.4}, \
         pretrain stopped at epoch {}, {:.0}s",
        pre.result.seeds[0].epochs_run,
        elapsed.as_secs_f64()
    );
    require(
        pseudo_dice >= PSEUDO_DICE_MIN
            && weak_dice >= TEST_DICE_MIN
            && (weak_dice - complete_dice).abs() <= WEAK_GAP_MAX
            && elapsed < E2E_BUDGET,
        detail,
    )
}

/// Needs `NUCLEISAM_FULL_WEIGHTS` (published full-preset weights) and
/// `NUCLEISAM_MONUSEG_TEST` (test tiles with XML annotations alongside).
fn full_scale() -> Verdict {
    let (Ok(weights), Ok(dir)) = (std::env::var("NUCLEISAM_FULL_WEIGHTS"), std::env::var("NUCLEISAM_MONUSEG_TEST"))
    else {
        return Verdict::Skip("set NUCLEISAM_FULL_WEIGHTS and NUCLEISAM_MONUSEG_TEST to run".into());
    };
    let model =
        import_external_weights(Path::new(&weights), ModelConfig::preset(Preset::Full), &NameMap::builtin(), 0).unwrap();
    let mut dices = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if !matches!(path.extension().and_then(|e| e.to_str()), Some("tif" | "tiff" | "png")) {
            continue;
        }
        let image = load_rgb(&path).unwrap();
        let doc = std::fs::read_to_string(path.with_extension("xml")).unwrap();
        let id = path.file_stem().unwrap().to_string_lossy().to_string();
        let parsed = parse_annotation_xml(&doc, &id, image.height() as usize, image.width() as usize).unwrap();
        let (ann, _) = boxes_from_instances(&parsed.masks);
        let label = generate_pseudo_mask(&model, &image, &ann, &PseudoLabelParams::default()).unwrap();
        let gt = parsed.masks.semantic();
        dices.push(ConfusionCounts::from_masks(label.mask.view(), gt.view()).unwrap().dice());
    }
    if dices.is_empty() {
        return Verdict::Fail(format!("no images in {dir}"));
    }
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    require(
        (mean - FULL_PSEUDO_DICE).abs() <= FULL_PSEUDO_TOL,
        format!("{} images, pseudo-label dice {mean:.4}; finetuning rows need a GPU run via the CLI", dices.len()),
    )
}

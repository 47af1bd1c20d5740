mod common;

use std::collections::HashMap;

use candle_core::DType;
use image::RgbImage;
use nucleisam::model::checkpoint::checkpoint_id;
use nucleisam::model::{
    checkpoint_load, checkpoint_save, BBox, PromptSet, PromptableSegmenter, Sam,
};
use nucleisam::Error;

use common::{micro_config, noise_image};

fn params_equal(a: &Sam, b: &Sam) -> bool {
    a.params().len() == b.params().len()
        && a.params().iter().all(|(name, v)| {
            let Some(w) = b.params().get(name) else { return false };
            let x: Vec<f32> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = w.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            x == y
        })
}

#[test]
fn prompt_free_paths_agree() {
    let model = Sam::new(micro_config(), 1).unwrap();
    for i in 0..10 {
        let img = noise_image(20 + 3 * i, 41 - 2 * i, i as u64);
        let a = model.forward_promptless(&img).unwrap();
        let b = model.segment(&img, &PromptSet::empty()).unwrap();
        let emb = model.embed(&img).unwrap();
        let c = model.segment_embedded(&emb, &PromptSet::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn batched_decode_matches_single_image_decode() {
    let model = Sam::new(micro_config(), 2).unwrap();
    let imgs: Vec<RgbImage> = (0..3).map(|i| noise_image(32, 32, 10 + i)).collect();
    let prepared: Vec<_> = imgs.iter().map(|i| model.prepare(i).unwrap()).collect();
    let refs: Vec<_> = prepared.iter().collect();
    let (px, hfc) = model.batch_tensors(&refs).unwrap();
    let emb = model.encode(&px, &hfc).unwrap();
    let prompts: Vec<_> = prepared
        .iter()
        .map(|p| model.encode_prompts(&PromptSet::empty(), p.original).unwrap())
        .collect();
    let (logits, quality) = model.decode(&emb, &prompts).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let single = model.forward_promptless(img).unwrap();
        let l: Vec<f32> = logits.get(i).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let q: Vec<f32> = quality.get(i).unwrap().to_vec1().unwrap();
        for (x, y) in l.iter().zip(single.logits.iter()) {
            assert!((x - y).abs() <= 1e-4, "{x} vs {y}");
        }
        for (x, y) in q.iter().zip(&single.quality_pred) {
            assert!((x - y).abs() <= 1e-4);
        }
    }
}

#[test]
fn output_shape_contract() {
    let cfg = micro_config();
    let r = cfg.input_resolution;
    let model = Sam::new(cfg, 3).unwrap();
    let img = noise_image(50, 17, 3);
    for prompts in [
        PromptSet::empty(),
        PromptSet::single_box(BBox::new(2, 2, 30, 15)),
    ] {
        let out = model.forward(&img, &prompts).unwrap();
        assert_eq!(out.logits.dim(), (3, r, r));
        assert_eq!(out.prob_maps.dim(), (3, r, r));
        assert_eq!(out.quality_pred.len(), 3);
        assert!(out.prob_maps.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(out.best_prob_map(17, 50).dim(), (17, 50));
    }
}

#[test]
fn inference_is_deterministic_and_input_sensitive() {
    let a = Sam::new(micro_config(), 4).unwrap();
    let b = Sam::new(micro_config(), 4).unwrap();
    let img = noise_image(32, 32, 4);
    let other = noise_image(32, 32, 5);
    let x = a.forward_promptless(&img).unwrap();
    assert_eq!(x, a.forward_promptless(&img).unwrap());
    assert_eq!(x, b.forward_promptless(&img).unwrap());
    assert_ne!(x.logits, a.forward_promptless(&other).unwrap().logits);
    assert_ne!(Sam::new(micro_config(), 5).unwrap().forward_promptless(&img).unwrap(), x);
}

#[test]
fn blank_image_gives_finite_output() {
    let model = Sam::new(micro_config(), 6).unwrap();
    let out = model.forward_promptless(&RgbImage::new(32, 32)).unwrap();
    assert!(out.logits.iter().all(|v| v.is_finite()));
    assert!(out.quality_pred.iter().all(|v| v.is_finite()));
}

#[test]
fn out_of_image_box_reports_index() {
    let model = Sam::new(micro_config(), 7).unwrap();
    let img = noise_image(20, 20, 7);
    let prompts = PromptSet { boxes: vec![BBox::new(0, 0, 5, 5), BBox::new(0, 0, 25, 5)], ..Default::default() };
    match model.forward(&img, &prompts) {
        Err(Error::Prompt { index, .. }) => assert_eq!(index, 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.safetensors");
    let model = Sam::new(micro_config(), 8).unwrap();
    let id = checkpoint_save(&model, &path).unwrap();
    assert_eq!(id, checkpoint_id(&std::fs::read(&path).unwrap()));
    let loaded = checkpoint_load(&path).unwrap();
    assert_eq!(loaded.checkpoint_id(), Some(id.as_str()));
    assert_eq!(loaded.config(), model.config());
    assert!(params_equal(&model, &loaded));
    let img = noise_image(24, 24, 8);
    assert_eq!(model.forward_promptless(&img).unwrap(), loaded.forward_promptless(&img).unwrap());
    assert_eq!(loaded.identifier(), id);

    // Same parameters serialise to the same bytes and id.
    let again = dir.path().join("again.safetensors");
    assert_eq!(checkpoint_save(&loaded, &again).unwrap(), id);
}

#[test]
fn checkpoint_missing_parameter_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    checkpoint_save(&Sam::new(micro_config(), 9).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).unwrap();
    let st = safetensors::SafeTensors::deserialize(&bytes).unwrap();
    let mut tensors = st.tensors();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let dropped = tensors.remove(0).0;
    let info: HashMap<String, String> = meta.metadata().clone().unwrap();
    let trimmed = safetensors::serialize(tensors, Some(info)).unwrap();
    let bad = dir.path().join("bad.safetensors");
    std::fs::write(&bad, trimmed).unwrap();
    match checkpoint_load(&bad) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains(&dropped), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("load succeeded"),
    }
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(checkpoint_load(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn double_precision_copy_tracks_single_precision() {
    let model = Sam::new(micro_config(), 10).unwrap();
    let wide = model.deep_copy(DType::F64).unwrap();
    assert_eq!(wide.dtype(), DType::F64);
    let img = noise_image(32, 32, 10);
    let a = model.forward_promptless(&img).unwrap();
    let b = wide.forward_promptless(&img).unwrap();
    for (x, y) in a.logits.iter().zip(b.logits.iter()) {
        assert!((x - y).abs() <= 1e-3 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

use std::collections::BTreeSet;

use nucleisam::dataio::{
    apply_crop_regime, parse_annotation_xml, rasterize_polygon, synth_generate, CropRegime, RegimeMode,
};
use nucleisam::pseudolabel::boxes_from_instances;
use proptest::prelude::*;

/// Crossing-number test: ray from the point towards +x.
fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut odd = false;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        if (y0 > y) != (y1 > y) {
            let xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0);
            if xi > x {
                odd = !odd;
            }
        }
    }
    odd
}

fn polygon() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((-4.0f64..28.0, -4.0f64..28.0), 3..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn scanline_matches_point_in_polygon(poly in polygon()) {
        let (h, w) = (24, 20);
        let mut got = BTreeSet::new();
        rasterize_polygon(&poly, h, w, |r, c| {
            got.insert((r, c));
        });
        for r in 0..h {
            for c in 0..w {
                let want = inside(&poly, c as f64 + 0.5, r as f64 + 0.5);
                prop_assert_eq!(got.contains(&(r, c)), want, "pixel ({}, {})", r, c);
            }
        }
    }

    #[test]
    fn boxes_are_tight_and_contain_their_instance(seed in 0u64..200) {
        let img = synth_generate(1, 64, seed).unwrap().remove(0);
        let (ann, warnings) = boxes_from_instances(&img.masks);
        prop_assert!(warnings.is_empty());
        prop_assert_eq!(ann.boxes.len(), img.masks.instance_count as usize);
        for (k, b) in ann.boxes.iter().enumerate() {
            let id = k as u32 + 1;
            let pix: Vec<(u32, u32)> = img.masks.label_map.indexed_iter()
                .filter(|(_, &v)| v == id)
                .map(|((r, c), _)| (c as u32, r as u32))
                .collect();
            prop_assert!(pix.iter().all(|&(x, y)| b.contains(x, y)));
            // Every side touches the instance.
            prop_assert!(pix.iter().any(|p| p.0 == b.x0));
            prop_assert!(pix.iter().any(|p| p.0 == b.x1));
            prop_assert!(pix.iter().any(|p| p.1 == b.y0));
            prop_assert!(pix.iter().any(|p| p.1 == b.y1));
        }
    }
}

#[test]
fn synthetic_labels_match_ellipse_equation() {
    for img in synth_generate(6, 96, 11).unwrap() {
        let m = &img.masks;
        for ((r, c), &v) in m.label_map.indexed_iter() {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let hits: Vec<u32> = img
                .nuclei
                .iter()
                .enumerate()
                .filter(|(_, e)| {
                    let (s, co) = e.theta.sin_cos();
                    let u = ((x - e.cx) * co + (y - e.cy) * s) / e.a;
                    let w = (-(x - e.cx) * s + (y - e.cy) * co) / e.b;
                    u * u + w * w <= 1.0
                })
                .map(|(k, _)| k as u32 + 1)
                .collect();
            assert!(hits.len() <= 1, "nuclei overlap at ({r}, {c})");
            assert_eq!(v, hits.first().copied().unwrap_or(0), "{} pixel ({r}, {c})", img.sample.image_id);
        }
        assert!(m.areas().iter().all(|&a| a > 0));
    }
}

#[test]
fn polygon_document_rasterises_like_oracle() {
    let doc = r#"<Annotations><Annotation><Regions>
        <Region Id="1"><Vertices>
          <Vertex X="3.2" Y="2.7"/><Vertex X="17.9" Y="5.1"/><Vertex X="9.4" Y="15.8"/>
        </Vertices></Region>
        <Region Id="2"><Vertices>
          <Vertex X="12" Y="12"/><Vertex X="19" Y="12"/><Vertex X="19" Y="19"/><Vertex X="12" Y="19"/>
        </Vertices></Region>
      </Regions></Annotation></Annotations>"#;
    let tri = [(3.2, 2.7), (17.9, 5.1), (9.4, 15.8)];
    let sq = [(12.0, 12.0), (19.0, 12.0), (19.0, 19.0), (12.0, 19.0)];
    let parsed = parse_annotation_xml(doc, "doc", 20, 20).unwrap();
    assert!(parsed.warnings.is_empty());
    for ((r, c), &v) in parsed.masks.label_map.indexed_iter() {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        let want = if inside(&sq, x, y) {
            2
        } else if inside(&tri, x, y) {
            1
        } else {
            0
        };
        assert_eq!(v, want, "({r}, {c})");
    }
}

#[test]
fn crop_regimes_keep_only_the_budgeted_pixels() {
    let imgs = synth_generate(24, 100, 5).unwrap();
    let samples: Vec<_> = imgs.iter().map(|s| s.sample.clone()).collect();
    let masks: Vec<_> = imgs.iter().map(|s| s.masks.clone()).collect();
    let dims: Vec<_> = samples.iter().map(|s| (s.image_id.clone(), 100, 100)).collect();
    for (mode, fraction, kept) in [(RegimeMode::Pct4, 0.04, 24), (RegimeMode::Pct0_5, 0.005, 3)] {
        // 20 px crops on 100 px images: 4% per image, matching the real geometry ratio.
        let regime = CropRegime::draw(mode, 20, 9, &dims).unwrap();
        assert!((regime.annotated_fraction(&dims) - fraction).abs() < 1e-15);
        let again = CropRegime::from_manifest(&regime.to_manifest()).unwrap();
        assert_eq!(again, regime);
        let out = apply_crop_regime(&samples, &masks, &regime).unwrap();
        assert_eq!(out.len(), kept);
        let labelled: usize = out
            .iter()
            .map(|(s, _)| s.pixels.pixels().filter(|p| p.0 != [0, 0, 0]).count())
            .sum();
        let total = 24 * 100 * 100;
        assert!(labelled as f64 / total as f64 <= fraction + 1e-12);
        for (s, m) in &out {
            let c = regime.crops.iter().find(|c| c.image_id == s.image_id).unwrap();
            let orig = imgs.iter().find(|i| i.sample.image_id == s.image_id).unwrap();
            for ((r, col), &v) in m.label_map.indexed_iter() {
                let inside = (c.row0 as usize..(c.row0 + 20) as usize).contains(&r)
                    && (c.col0 as usize..(c.col0 + 20) as usize).contains(&col);
                if !inside {
                    assert_eq!(v, 0);
                } else {
                    assert_eq!(v > 0, orig.masks.label_map[(r, col)] > 0);
                }
            }
            m.validate().unwrap();
        }
    }
    let full = CropRegime::draw(RegimeMode::Full, 20, 9, &dims).unwrap();
    assert_eq!(apply_crop_regime(&samples, &masks, &full).unwrap().len(), 24);
}

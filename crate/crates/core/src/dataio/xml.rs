use ndarray::Array2;
use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};

use super::{relabel_contiguous, InstanceMaskSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedAnnotation {
    pub masks: InstanceMaskSet,
    /// Regions skipped or emptied during rasterisation.
    pub warnings: Vec<String>,
}

/// Parses a Region/Vertices/Vertex polygon document and rasterises it onto a
/// `height × width` label map. Regions get ids in document order and later
/// regions overwrite earlier ones; regions left without pixels are dropped
/// and the remaining ids renumbered contiguously.
pub fn parse_annotation_xml(document: &str, image_id: &str, height: usize, width: usize) -> Result<ParsedAnnotation> {
    let regions = read_regions(document)?;
    let mut labels = Array2::<u32>::zeros((height, width));
    let mut warnings = Vec::new();
    let mut next = 0u32;
    let mut drawn = Vec::new();
    for (i, poly) in regions.iter().enumerate() {
        if poly.len() < 3 {
            warnings.push(format!("region {i}: {} vertices, skipped", poly.len()));
            continue;
        }
        next += 1;
        rasterize_polygon(poly, height, width, |r, c| labels[(r, c)] = next);
        drawn.push((i, next));
    }
    let mut present = vec![false; next as usize + 1];
    for &v in &labels {
        present[v as usize] = true;
    }
    for (i, id) in drawn {
        if !present[id as usize] {
            warnings.push(format!("region {i}: no remaining pixels, dropped"));
        }
    }
    let (label_map, instance_count) = relabel_contiguous(labels);
    for w in &warnings {
        log::warn!("{image_id}: {w}");
    }
    Ok(ParsedAnnotation {
        masks: InstanceMaskSet { image_id: image_id.to_string(), label_map, instance_count },
        warnings,
    })
}

fn attr_f64(e: &BytesStart<'_>, key: &str, pos: u64) -> Result<Option<f64>> {
    for a in e.attributes() {
        let a = a.map_err(|err| Error::Parse { position: pos, message: err.to_string() })?;
        if a.key.into_inner() == key {
            let v = a
                .normalized_value(XmlVersion::Implicit1_0)
                .map_err(|err| Error::Parse { position: pos, message: err.to_string() })?;
            let v = v.trim().parse::<f64>().map_err(|_| Error::Parse {
                position: pos,
                message: format!("attribute {} is not a number: {v:?}", key),
            })?;
            return Ok(Some(v));
        }
    }
    Ok(None)
}

fn read_regions(document: &str) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut reader = Reader::from_str(document);
    let mut regions = Vec::new();
    let mut current: Option<Vec<(f64, f64)>> = None;
    let mut depth = 0usize;
    let mut seen_root = false;
    loop {
        let pos = reader.buffer_position();
        let event = reader
            .read_event()
            .map_err(|e| Error::Parse { position: reader.buffer_position(), message: e.to_string() })?;
        match event {
            Event::Start(e) => {
                depth += 1;
                seen_root = true;
                if e.local_name().into_inner() == "Region" {
                    current = Some(Vec::new());
                } else if e.local_name().into_inner() == "Vertex" {
                    push_vertex(&e, &mut current, pos)?;
                }
            }
            Event::Empty(e) => {
                seen_root = true;
                match e.local_name().into_inner() {
                    "Vertex" => push_vertex(&e, &mut current, pos)?,
                    "Region" => regions.push(Vec::new()),
                    _ => {}
                }
            }
            Event::End(e) => {
                depth = depth.saturating_sub(1);
                if e.local_name().into_inner() == "Region" {
                    regions.push(current.take().unwrap_or_default());
                }
            }
            Event::Eof => {
                if depth != 0 {
                    return Err(Error::Parse { position: pos, message: "unexpected end of document".into() });
                }
                if !seen_root {
                    return Err(Error::Parse { position: pos, message: "document has no root element".into() });
                }
                return Ok(regions);
            }
            _ => {}
        }
    }
}

fn push_vertex(e: &BytesStart<'_>, current: &mut Option<Vec<(f64, f64)>>, pos: u64) -> Result<()> {
    let (Some(x), Some(y)) = (attr_f64(e, "X", pos)?, attr_f64(e, "Y", pos)?) else {
        return Err(Error::Parse { position: pos, message: "Vertex lacks X or Y".into() });
    };
    if let Some(v) = current.as_mut() {
        v.push((x, y));
    }
    Ok(())
}

/// Even-odd scanline fill evaluated at pixel centres `(c + 0.5, r + 0.5)`.
/// Calls `put(row, col)` for every covered pixel inside the image.
pub fn rasterize_polygon(poly: &[(f64, f64)], height: usize, width: usize, mut put: impl FnMut(usize, usize)) {
    let n = poly.len();
    let (ymin, ymax) = poly
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let r0 = ((ymin - 0.5).ceil().max(0.0)) as usize;
    let r1 = ((ymax - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
    if r1 < 0.0 {
        return;
    }
    let mut xs = Vec::new();
    for r in r0..=r1 as usize {
        let yc = r as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            if (y0 > yc) != (y1 > yc) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let c0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let c1 = (pair[1] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            for c in c0..c1 {
                put(r, c);
            }
        }
    }
}

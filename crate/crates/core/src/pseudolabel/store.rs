use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Provenance, PseudoLabel};
use crate::dataio::{load_binary_mask_png, save_binary_mask_png, write_atomic};
use crate::error::{Error, Result};
use crate::model::BBox;

pub const SIDECAR_SCHEMA: &str = "nucleisam.pseudolabel.v1";

/// JSON record stored next to each pseudo-label mask.
///
/// ```json
/// {
///   "schema": "nucleisam.pseudolabel.v1",
///   "image_id": "img_001",
///   "width": 1000, "height": 1000,
///   "mask_file": "img_001.png",
///   "boxes": [[x0, y0, x1, y1], ...],
///   "per_box_confidence": [0.93, ...],
///   "provenance": {
///     "checkpoint_id": "3f2a...",
///     "params": {"expand_ratio": 0.1, "threshold": 0.5},
///     "source": "model"
///   }
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema: String,
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub mask_file: String,
    pub boxes: Vec<BBox>,
    pub per_box_confidence: Vec<f32>,
    pub provenance: Provenance,
}

impl Sidecar {
    pub fn of(label: &PseudoLabel) -> Self {
        Sidecar {
            schema: SIDECAR_SCHEMA.into(),
            image_id: label.image_id.clone(),
            width: label.mask.ncols() as u32,
            height: label.mask.nrows() as u32,
            mask_file: format!("{}.png", label.image_id),
            boxes: label.boxes.clone(),
            per_box_confidence: label.per_box_confidence.clone(),
            provenance: label.provenance.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: Sidecar = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SIDECAR_SCHEMA {
            return Err(Error::InvalidArgument(format!("unsupported sidecar schema {:?}", self.schema)));
        }
        if self.per_box_confidence.len() != self.boxes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} confidences for {} boxes",
                self.per_box_confidence.len(),
                self.boxes.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate(self.width, self.height)
                .map_err(|e| Error::Prompt { index: i, source: Box::new(e) })?;
        }
        Ok(())
    }
}

/// Directory of `<id>.png` masks and `<id>.json` sidecars. Writes to the
/// same image id are serialised; distinct ids proceed concurrently.
#[derive(Debug)]
pub struct PseudoLabelStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl PseudoLabelStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        PseudoLabelStore { dir: dir.into(), locks: Mutex::new(HashMap::new()) }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    fn paths(&self, id: &str) -> Result<(PathBuf, PathBuf)> {
        crate::dataio::Workspace::new(&self.dir).image_path(id)?;
        Ok((self.dir.join(format!("{id}.png")), self.dir.join(format!("{id}.json"))))
    }

    pub fn save(&self, label: &PseudoLabel) -> Result<()> {
        let (png, json) = self.paths(&label.image_id)?;
        let sidecar = Sidecar::of(label);
        sidecar.validate()?;
        let text = serde_json::to_string_pretty(&sidecar)?;
        let lock = self.lock(&label.image_id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        // Mask first, sidecar last: readers never pair a new sidecar with an old mask.
        save_binary_mask_png(&png, &label.mask)?;
        write_atomic(&json, (text + "\n").as_bytes())
    }

    pub fn exists(&self, id: &str) -> bool {
        self.paths(id).is_ok_and(|(p, j)| p.exists() && j.exists())
    }

    pub fn load(&self, id: &str) -> Result<PseudoLabel> {
        let (png, json) = self.paths(id)?;
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar = Sidecar::parse(&text)?;
        let mask = load_binary_mask_png(&png)?;
        if mask.dim() != (sidecar.height as usize, sidecar.width as usize) {
            return Err(Error::Shape(format!(
                "{}: mask is {:?}, sidecar says {}x{}",
                png.display(),
                mask.dim(),
                sidecar.width,
                sidecar.height
            )));
        }
        Ok(PseudoLabel {
            image_id: sidecar.image_id,
            boxes: sidecar.boxes,
            mask,
            per_box_confidence: sidecar.per_box_confidence,
            provenance: sidecar.provenance,
        })
    }

    /// Ids with a stored sidecar, sorted.
    pub fn ids(&self) -> Result<Vec<String>> {
        if !self.dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::PseudoLabelParams;
    use ndarray::array;

    fn label() -> PseudoLabel {
        PseudoLabel {
            image_id: "img_1".into(),
            boxes: vec![BBox::new(0, 0, 1, 1)],
            mask: array![[1, 1, 0], [1, 0, 0]],
            per_box_confidence: vec![0.75],
            provenance: Provenance {
                checkpoint_id: "abc".into(),
                params: PseudoLabelParams::default(),
                source: "model".into(),
            },
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = PseudoLabelStore::new(dir.path());
        store.save(&label()).unwrap();
        assert_eq!(store.load("img_1").unwrap(), label());
        assert_eq!(store.ids().unwrap(), vec!["img_1"]);
        let first = fs::read(dir.path().join("img_1.png")).unwrap();
        store.save(&label()).unwrap();
        assert_eq!(fs::read(dir.path().join("img_1.png")).unwrap(), first);
    }

    #[test]
    fn sidecar_checks() {
        let mut s = Sidecar::of(&label());
        s.per_box_confidence.clear();
        assert!(s.validate().is_err());
        let mut s = Sidecar::of(&label());
        s.schema = "other".into();
        assert!(Sidecar::parse(&serde_json::to_string(&s).unwrap()).is_err());
    }
}

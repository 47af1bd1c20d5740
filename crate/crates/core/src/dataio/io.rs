use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::Array2;

use super::{ImageSample, InstanceMaskSet, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::pseudolabel::WeakAnnotation;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(image::open(path)?)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    Ok(img.save(path)?)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encodes a 0/1 mask as an 8-bit 0/255 grayscale PNG.
pub fn encode_binary_mask_png(mask: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask[(y as usize, x as usize)] > 0 { 255 } else { 0 }]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes a mask image; values above 127 become 1.
pub fn decode_binary_mask_png(bytes: &[u8]) -> Result<Array2<u8>> {
    Ok(luma_to_mask(&image::load_from_memory(bytes)?.to_luma8()))
}

fn luma_to_mask(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(r, c)| u8::from(img.get_pixel(c as u32, r as u32)[0] > 127))
}

/// Writes a 0/1 mask as an 8-bit 0/255 PNG.
pub fn save_binary_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    write_atomic(path, &encode_binary_mask_png(mask)?)
}

/// Reads a mask PNG; values above 127 become 1.
pub fn load_binary_mask_png(path: &Path) -> Result<Array2<u8>> {
    Ok(luma_to_mask(&open(path)?.to_luma8()))
}

/// Writes instance ids as a 16-bit single-channel PNG.
pub fn save_label_map_png(path: &Path, labels: &Array2<u32>) -> Result<()> {
    if let Some(&v) = labels.iter().find(|&&v| v > u16::MAX as u32) {
        return Err(Error::InvalidArgument(format!("instance id {v} does not fit in 16 bits")));
    }
    let (h, w) = labels.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([labels[(y as usize, x as usize)] as u16]));
    ensure_parent(path)?;
    Ok(img.save(path)?)
}

pub fn load_label_map_png(path: &Path) -> Result<Array2<u32>> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] as u32
    }))
}

/// Rejects ids that are empty, hidden, or could escape a directory.
pub(crate) fn check_image_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("invalid image id {id:?}")))
    }
}

/// On-disk layout shared by the CLI and the service.
///
/// ```text
/// images/<id>.png        RGB images
/// labels/<id>.png        16-bit instance label maps
/// splits.tsv             image_id and split per line
/// weak/<id>.json         box annotations
/// pseudolabels/<id>.png  pseudo-label masks (0/255) with <id>.json sidecars
/// regimes/<mode>.toml    crop-regime manifests
/// checkpoints/, runs/    model files and training logs
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        check_image_id(id)?;
        Ok(self.root.join("images").join(format!("{id}.png")))
    }

    pub fn label_path(&self, id: &str) -> Result<PathBuf> {
        check_image_id(id)?;
        Ok(self.root.join("labels").join(format!("{id}.png")))
    }

    pub fn weak_path(&self, id: &str) -> Result<PathBuf> {
        check_image_id(id)?;
        Ok(self.root.join("weak").join(format!("{id}.json")))
    }

    pub fn pseudolabel_dir(&self) -> PathBuf {
        self.root.join("pseudolabels")
    }

    pub fn splits_path(&self) -> PathBuf {
        self.root.join("splits.tsv")
    }

    pub fn regime_path(&self, mode: super::RegimeMode) -> PathBuf {
        self.root.join("regimes").join(format!("{mode}.toml"))
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    /// Ids of ingested images, sorted.
    pub fn image_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("images");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    if check_image_id(stem).is_ok() {
                        ids.push(stem.to_string());
                    }
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// (width, height) read from the image header.
    pub fn image_dimensions(&self, id: &str) -> Result<(u32, u32)> {
        let path = self.image_path(id)?;
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        Ok(image::image_dimensions(&path)?)
    }

    pub fn load_image(&self, id: &str) -> Result<RgbImage> {
        load_rgb(&self.image_path(id)?)
    }

    pub fn load_sample(&self, id: &str, split: Split) -> Result<ImageSample> {
        Ok(ImageSample { image_id: id.to_string(), pixels: self.load_image(id)?, split })
    }

    pub fn load_masks(&self, id: &str) -> Result<InstanceMaskSet> {
        let labels = load_label_map_png(&self.label_path(id)?)?;
        Ok(InstanceMaskSet::from_labels(id, labels))
    }

    pub fn has_labels(&self, id: &str) -> bool {
        self.label_path(id).is_ok_and(|p| p.exists())
    }

    pub fn save_sample(&self, sample: &ImageSample, masks: Option<&InstanceMaskSet>) -> Result<()> {
        save_rgb(&self.image_path(&sample.image_id)?, &sample.pixels)?;
        if let Some(m) = masks {
            save_label_map_png(&self.label_path(&m.image_id)?, &m.label_map)?;
        }
        Ok(())
    }

    pub fn save_splits(&self, splits: &SplitAssignment) -> Result<()> {
        let path = self.splits_path();
        ensure_parent(&path)?;
        fs::write(&path, splits.to_tsv()).map_err(|e| Error::io(&path, e))
    }

    /// Persists box annotations as `weak/<id>.json` (atomic replace).
    pub fn save_weak(&self, annotation: &WeakAnnotation) -> Result<()> {
        let path = self.weak_path(&annotation.image_id)?;
        let text = serde_json::to_string_pretty(annotation)? + "\n";
        write_atomic(&path, text.as_bytes())
    }

    pub fn load_weak(&self, id: &str) -> Result<WeakAnnotation> {
        let path = self.weak_path(id)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ann: WeakAnnotation = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { position: e.column() as u64, message: format!("{}: {e}", path.display()) })?;
        if ann.image_id != id {
            return Err(Error::InvalidArgument(format!("{} holds boxes for {}", path.display(), ann.image_id)));
        }
        Ok(ann)
    }

    pub fn has_weak(&self, id: &str) -> bool {
        self.weak_path(id).is_ok_and(|p| p.exists())
    }

    pub fn load_splits(&self) -> Result<SplitAssignment> {
        let path = self.splits_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        SplitAssignment::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let labels = array![[0u32, 1, 300], [65535, 2, 0]];
        let p = dir.path().join("l.png");
        save_label_map_png(&p, &labels).unwrap();
        assert_eq!(load_label_map_png(&p).unwrap(), labels);
        assert!(save_label_map_png(&p, &array![[70000u32]]).is_err());

        let mask = array![[0u8, 1], [1, 1]];
        let p = dir.path().join("m.png");
        save_binary_mask_png(&p, &mask).unwrap();
        assert_eq!(load_binary_mask_png(&p).unwrap(), mask);
        assert_eq!(open(&p).unwrap().to_luma8().get_pixel(1, 0)[0], 255);
    }

    #[test]
    fn ids_are_sanitised() {
        let ws = Workspace::new("/tmp/x");
        assert!(ws.image_path("../etc/passwd").is_err());
        assert!(ws.image_path(".hidden").is_err());
        assert!(ws.image_path("TCGA-18-5592-01Z-00-DX1").is_ok());
    }
}

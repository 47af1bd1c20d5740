use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use ndarray::Array3;

use super::adapter::Adapter;
use super::config::ModelConfig;
use super::hfc::extract_hfc;
use super::image_encoder::ImageEncoder;
use super::mask_decoder::MaskDecoder;
use super::nn::resize_bilinear;
use super::params::{Builder, FreezePolicy, ParamGroup, ParamStore};
use super::prompt_encoder::{EncodedPrompts, PromptEncoder};
use super::resize::normalize_image;
use super::{PromptSet, PromptableSegmenter, SegmentationOutput};
use crate::error::{Error, Result};

/// Model-ready arrays for one image.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    /// Normalised `[3, R, R]` pixels.
    pub pixels: Array3<f32>,
    /// High-frequency component of `pixels`.
    pub hfc: Array3<f32>,
    /// Original (height, width).
    pub original: (usize, usize),
}

/// Cached image embedding for repeated prompting of the same image.
#[derive(Clone, Debug)]
pub struct SamEmbedding {
    embedding: Tensor,
    original: (usize, usize),
}

impl SamEmbedding {
    pub fn original_size(&self) -> (usize, usize) {
        self.original
    }
}

#[derive(Clone, Debug)]
pub struct Sam {
    config: ModelConfig,
    params: ParamStore,
    encoder: ImageEncoder,
    adapter: Adapter,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    checkpoint_id: Option<String>,
}

struct Modules(ImageEncoder, Adapter, PromptEncoder, MaskDecoder);

fn build_modules(vb: &Builder, config: &ModelConfig) -> Result<Modules> {
    Ok(Modules(
        ImageEncoder::new(&vb.pp("image_encoder"), config)?,
        Adapter::new(&vb.pp("adapter"), config)?,
        PromptEncoder::new(&vb.pp("prompt_encoder"), config)?,
        MaskDecoder::new(&vb.pp("mask_decoder"), config)?,
    ))
}

pub(crate) fn array_to_tensor(a: &Array3<f32>, dtype: DType) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Sam {
    /// Freshly initialised single-precision model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let vb = Builder::create(dtype, seed);
        build_modules(&vb, &config)?;
        Self::from_params(config, vb.finish()?)
    }

    /// Builds the model over existing parameters; every expected entry must
    /// be present with the right shape and no extra entries are allowed.
    /// The result is an inference model: no parameter tracks gradients.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        Self::from_params_detached(config, params, ParamGroup::ALL.into())
    }

    fn from_params_detached(config: ModelConfig, params: ParamStore, detached: BTreeSet<ParamGroup>) -> Result<Self> {
        config.validate()?;
        let vb = Builder::load(params, detached);
        let Modules(encoder, adapter, prompt_encoder, decoder) = build_modules(&vb, &config)?;
        let params = vb.finish()?;
        Ok(Sam { config, params, encoder, adapter, prompt_encoder, decoder, checkpoint_id: None })
    }

    /// A view sharing this model's parameters in which the trainable groups
    /// of `policy` track gradients.
    pub fn training_view(&self, policy: &FreezePolicy) -> Result<Sam> {
        policy.validate()?;
        let mut view = Self::from_params_detached(self.config.clone(), self.params.clone(), policy.frozen_groups.clone())?;
        view.checkpoint_id = self.checkpoint_id.clone();
        Ok(view)
    }

    /// Independent copy (fresh parameter storage), optionally converted.
    pub fn deep_copy(&self, dtype: DType) -> Result<Sam> {
        let mut copy = Self::from_params(self.config.clone(), self.params.deep_copy(dtype)?)?;
        copy.checkpoint_id = self.checkpoint_id.clone();
        Ok(copy)
    }

    /// Overwrites the parameters of `groups` with a fresh seeded initialisation.
    pub fn reinitialize(&self, groups: &[ParamGroup], seed: u64) -> Result<()> {
        let fresh = Self::with_dtype(self.config.clone(), seed, self.dtype())?;
        for (name, var) in self.params.iter() {
            if ParamGroup::of(name).is_some_and(|g| groups.contains(&g)) {
                let src = fresh.params.get(name).expect("same config yields same registry");
                var.set(src.as_tensor())?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn checkpoint_id(&self) -> Option<&str> {
        self.checkpoint_id.as_deref()
    }

    pub fn set_checkpoint_id(&mut self, id: impl Into<String>) {
        self.checkpoint_id = Some(id.into());
    }

    /// Resize, normalise, and extract the high-frequency component.
    pub fn prepare(&self, image: &RgbImage) -> Result<PreparedImage> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::InvalidArgument("image is empty".into()));
        }
        let pixels = normalize_image(image, self.config.input_resolution);
        let hfc = extract_hfc(pixels.view(), self.config.hfc_mask_ratio)?;
        Ok(PreparedImage { pixels, hfc, original: (image.height() as usize, image.width() as usize) })
    }

    /// Stacks prepared images into `[B, 3, R, R]` pixel and HFC tensors.
    pub fn batch_tensors(&self, items: &[&PreparedImage]) -> Result<(Tensor, Tensor)> {
        let pixels = items
            .iter()
            .map(|p| array_to_tensor(&p.pixels, self.dtype()))
            .collect::<Result<Vec<_>>>()?;
        let hfc = items
            .iter()
            .map(|p| array_to_tensor(&p.hfc, self.dtype()))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::cat(&pixels, 0)?, Tensor::cat(&hfc, 0)?))
    }

    /// `[B, 3, R, R]` → `[B, C, g, g]` image embeddings.
    pub fn encode(&self, pixels: &Tensor, hfc: &Tensor) -> Result<Tensor> {
        let r = self.config.input_resolution;
        let (_, c, h, w) = pixels.dims4()?;
        if (c, h, w) != (3, r, r) || hfc.dims() != pixels.dims() {
            return Err(Error::Shape(format!(
                "encoder expects [B, 3, {r}, {r}] pixels and matching HFC, got {:?} and {:?}",
                pixels.dims(),
                hfc.dims()
            )));
        }
        self.encoder.forward(pixels, hfc, &self.adapter)
    }

    /// Validates prompts against the original (height, width) and encodes them.
    pub fn encode_prompts(&self, prompts: &PromptSet, original: (usize, usize)) -> Result<EncodedPrompts> {
        let (h, w) = original;
        prompts.validate(w as u32, h as u32)?;
        let r = self.config.input_resolution as f64;
        self.prompt_encoder.encode(prompts, (r / w as f64, r / h as f64))
    }

    /// Decodes one prompt set per embedding; returns (`[B, n, R, R]` logits,
    /// `[B, n]` predicted quality) for the configured candidate count.
    pub fn decode(&self, embeddings: &Tensor, prompts: &[EncodedPrompts]) -> Result<(Tensor, Tensor)> {
        let b = embeddings.dim(0)?;
        if prompts.len() != b {
            return Err(Error::Shape(format!("{} prompt sets for {b} embeddings", prompts.len())));
        }
        let uniform = prompts.iter().all(|p| p.token_count() == prompts[0].token_count());
        let (masks, quality) = if uniform {
            self.decode_uniform(embeddings, prompts)?
        } else {
            let mut masks = Vec::with_capacity(b);
            let mut quality = Vec::with_capacity(b);
            for (i, p) in prompts.iter().enumerate() {
                let (m, q) = self.decode_uniform(&embeddings.narrow(0, i, 1)?, std::slice::from_ref(p))?;
                masks.push(m);
                quality.push(q);
            }
            (Tensor::cat(&masks, 0)?, Tensor::cat(&quality, 0)?)
        };
        let (start, n) = if self.config.multimask_count == 1 { (0, 1) } else { (1, 3) };
        let masks = masks.narrow(1, start, n)?;
        let quality = quality.narrow(1, start, n)?;
        let r = self.config.input_resolution;
        Ok((resize_bilinear(&masks, r, r)?, quality))
    }

    fn decode_uniform(&self, embeddings: &Tensor, prompts: &[EncodedPrompts]) -> Result<(Tensor, Tensor)> {
        let sparse = if prompts[0].sparse.is_some() {
            let parts: Vec<&Tensor> = prompts.iter().filter_map(|p| p.sparse.as_ref()).collect();
            Some(Tensor::cat(&parts, 0)?)
        } else {
            None
        };
        let dense: Vec<&Tensor> = prompts.iter().map(|p| &p.dense).collect();
        let dense = Tensor::cat(&dense, 0)?;
        let pe = self.prompt_encoder.dense_pe()?;
        self.decoder.forward(embeddings, &pe, sparse.as_ref(), &dense)
    }

    /// Full prompted pass over one image.
    pub fn forward(&self, image: &RgbImage, prompts: &PromptSet) -> Result<SegmentationOutput> {
        prompts.validate(image.width(), image.height())?;
        self.segment(image, prompts)
    }

    /// Same as [`Sam::forward`] with an empty prompt set.
    pub fn forward_promptless(&self, image: &RgbImage) -> Result<SegmentationOutput> {
        self.forward(image, &PromptSet::empty())
    }
}

pub(crate) fn tensors_to_output(logits: &Tensor, quality: &Tensor) -> Result<SegmentationOutput> {
    let logits = logits.to_dtype(DType::F32)?;
    let (n, h, w) = logits.dims3()?;
    let values = logits.flatten_all()?.to_vec1::<f32>()?;
    let logits = Array3::from_shape_vec((n, h, w), values).map_err(|e| Error::Shape(e.to_string()))?;
    let quality = quality.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(SegmentationOutput::from_logits(logits, quality))
}

impl PromptableSegmenter for Sam {
    type Embedding = SamEmbedding;

    fn embed(&self, image: &RgbImage) -> Result<SamEmbedding> {
        let prepared = self.prepare(image)?;
        let (pixels, hfc) = self.batch_tensors(&[&prepared])?;
        Ok(SamEmbedding { embedding: self.encode(&pixels, &hfc)?, original: prepared.original })
    }

    fn segment_embedded(&self, embedding: &SamEmbedding, prompts: &PromptSet) -> Result<SegmentationOutput> {
        let encoded = self.encode_prompts(prompts, embedding.original)?;
        let (logits, quality) = self.decode(&embedding.embedding, &[encoded])?;
        tensors_to_output(&logits.squeeze(0)?, &quality)
    }

    fn identifier(&self) -> String {
        match &self.checkpoint_id {
            Some(id) => id.clone(),
            None => match self.params.fingerprint(&ParamGroup::ALL) {
                Ok(f) => format!("unsaved-{}", &f[..12]),
                Err(_) => "unsaved".into(),
            },
        }
    }
}

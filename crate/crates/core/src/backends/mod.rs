//! Contracts for every external model the pipeline consumes.
//!
//! Real-model adapters implement these traits outside this crate. The
//! [`stub`] module provides seeded deterministic implementations of all of
//! them and [`replay`] answers calls from a recorded fixture file.

use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::diffusion::InversionResult;
use crate::model::DecodeConfig;
use crate::{Error, Result};

pub mod replay;
pub mod stub;
mod thesaurus;

pub use thesaurus::Thesaurus;

pub type Image = RgbImage;

/// Token placed in masked-fill queries.
pub const MASK_TOKEN: &str = "[MASK]";

/// A latent tensor, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "latent shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// A flat vector latent.
    pub fn flat(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// Text conditioning handed to the noise predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning(pub Vec<f64>);

impl Conditioning {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Parameters of a prompt-to-prompt style attention-controlled edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionControl {
    /// Fraction of steps during which source self-attention is injected.
    pub self_replace: f64,
    /// Fraction of steps during which source cross-attention is injected.
    pub cross_replace: f64,
    pub guidance_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillCandidate {
    pub word: String,
    pub score: f64,
}

pub trait CaptionerBackend: Send + Sync {
    fn caption(&self, image: &Image, decode: &DecodeConfig) -> Result<String>;

    fn concurrency_safe(&self) -> bool {
        true
    }
}

pub trait LanguageModelBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;

    /// Per-token log-probabilities of `text`; every value is `<= 0`.
    fn token_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>>;

    fn concurrency_safe(&self) -> bool {
        true
    }
}

pub trait MaskedFillBackend: Send + Sync {
    /// Candidates for the single [`MASK_TOKEN`] in `text`, best first.
    fn fill(&self, text: &str, top_n: usize) -> Result<Vec<FillCandidate>>;

    fn concurrency_safe(&self) -> bool {
        true
    }
}

pub trait SentenceEmbedBackend: Send + Sync {
    /// Unit-norm sentence embedding.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    fn concurrency_safe(&self) -> bool {
        true
    }
}

/// Image and text encoders sharing one embedding space.
pub trait JointEmbedBackend: Send + Sync {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    fn concurrency_safe(&self) -> bool {
        true
    }
}

pub trait DiffusionBackend: Send + Sync {
    fn encode(&self, image: &Image) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Image>;
    fn embed_prompt(&self, caption: &str) -> Result<Conditioning>;

    /// Conditioning of the empty prompt.
    fn null_conditioning(&self) -> Result<Conditioning> {
        self.embed_prompt("")
    }

    /// Noise prediction at diffusion level `step` (1..=K); same shape as `latent`.
    fn predict_noise(&self, latent: &Latent, step: usize, cond: &Conditioning) -> Result<Latent>;

    /// Vector-Jacobian product of `predict_noise` with respect to `cond`:
    /// returns `J^T cotangent`. `None` when the backend cannot differentiate,
    /// in which case callers fall back to finite differences.
    fn noise_vjp(
        &self,
        _latent: &Latent,
        _step: usize,
        _cond: &Conditioning,
        _cotangent: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    /// Regenerates the inverted image under `target` while injecting the
    /// attention maps of the `source` pass according to `control`.
    fn edit_with_attention_control(
        &self,
        inversion: &InversionResult,
        source: &Conditioning,
        target: &Conditioning,
        control: &AttentionControl,
    ) -> Result<Image>;

    fn concurrency_safe(&self) -> bool {
        true
    }
}

pub trait ClassifierBackend: Send + Sync {
    /// Probability vector over [`labels`](Self::labels).
    fn predict(&self, image: &Image) -> Result<Vec<f64>>;
    fn labels(&self) -> &[String];

    fn concurrency_safe(&self) -> bool {
        true
    }
}

/// Every backend a run needs.
#[derive(Clone)]
pub struct Backends {
    pub captioner: Arc<dyn CaptionerBackend>,
    pub language_model: Arc<dyn LanguageModelBackend>,
    pub masked_fill: Arc<dyn MaskedFillBackend>,
    pub sentence_embed: Arc<dyn SentenceEmbedBackend>,
    pub joint_embed: Arc<dyn JointEmbedBackend>,
    pub diffusion: Arc<dyn DiffusionBackend>,
    pub classifier: Arc<dyn ClassifierBackend>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Backends { .. }")
    }
}

/// Builds backends by name: `stub` or `replay:<fixture path>`.
pub fn from_name(name: &str, seed: u64) -> Result<Backends> {
    if name == "stub" {
        return Ok(stub::make_stub_suite(seed));
    }
    if let Some(path) = name.strip_prefix("replay:") {
        let store = Arc::new(replay::ReplayStore::load(Path::new(path))?);
        return Ok(replay::replay_backends(store));
    }
    Err(Error::InvalidArgument(format!("unknown backend `{name}`")))
}

/// Serialises calls into a backend that is not concurrency-safe.
#[derive(Debug, Default)]
pub struct CallGate(Mutex<()>);

impl CallGate {
    pub fn enter(&self, concurrency_safe: bool) -> Option<MutexGuard<'_, ()>> {
        if concurrency_safe {
            None
        } else {
            Some(self.0.lock().unwrap_or_else(|p| p.into_inner()))
        }
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Writes a lossless PNG.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Maps pixel bytes to `[-1, 1]`.
pub fn image_to_unit(img: &Image) -> Vec<f64> {
    img.as_raw().iter().map(|p| *p as f64 / 127.5 - 1.0).collect()
}

/// Inverse of [`image_to_unit`], rounding and clamping to bytes.
pub fn unit_to_image(width: u32, height: u32, data: &[f64]) -> Result<Image> {
    let bytes: Vec<u8> = data
        .iter()
        .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(width, height, bytes).ok_or_else(|| {
        Error::Dimension(format!(
            "{} values do not fill a {width}x{height} RGB image",
            data.len()
        ))
    })
}

struct Serialized<T: ?Sized> {
    inner: Arc<T>,
    gate: CallGate,
}

impl<T: ?Sized> Serialized<T> {
    fn new(inner: Arc<T>) -> Self {
        Self {
            inner,
            gate: CallGate::default(),
        }
    }
}

impl CaptionerBackend for Serialized<dyn CaptionerBackend> {
    fn caption(&self, image: &Image, decode: &DecodeConfig) -> Result<String> {
        let _g = self.gate.enter(false);
        self.inner.caption(image, decode)
    }
}

impl LanguageModelBackend for Serialized<dyn LanguageModelBackend> {
    fn complete(&self, prompt: &str) -> Result<String> {
        let _g = self.gate.enter(false);
        self.inner.complete(prompt)
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        let _g = self.gate.enter(false);
        self.inner.token_logprobs(text)
    }
}

impl MaskedFillBackend for Serialized<dyn MaskedFillBackend> {
    fn fill(&self, text: &str, top_n: usize) -> Result<Vec<FillCandidate>> {
        let _g = self.gate.enter(false);
        self.inner.fill(text, top_n)
    }
}

impl SentenceEmbedBackend for Serialized<dyn SentenceEmbedBackend> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let _g = self.gate.enter(false);
        self.inner.embed(text)
    }
}

impl JointEmbedBackend for Serialized<dyn JointEmbedBackend> {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let _g = self.gate.enter(false);
        self.inner.embed_image(image)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let _g = self.gate.enter(false);
        self.inner.embed_text(text)
    }
}

impl DiffusionBackend for Serialized<dyn DiffusionBackend> {
    fn encode(&self, image: &Image) -> Result<Latent> {
        let _g = self.gate.enter(false);
        self.inner.encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let _g = self.gate.enter(false);
        self.inner.decode(latent)
    }

    fn embed_prompt(&self, caption: &str) -> Result<Conditioning> {
        let _g = self.gate.enter(false);
        self.inner.embed_prompt(caption)
    }

    fn null_conditioning(&self) -> Result<Conditioning> {
        let _g = self.gate.enter(false);
        self.inner.null_conditioning()
    }

    fn predict_noise(&self, latent: &Latent, step: usize, cond: &Conditioning) -> Result<Latent> {
        let _g = self.gate.enter(false);
        self.inner.predict_noise(latent, step, cond)
    }

    fn noise_vjp(&self, latent: &Latent, step: usize, cond: &Conditioning, cotangent: &[f64]) -> Result<Option<Vec<f64>>> {
        let _g = self.gate.enter(false);
        self.inner.noise_vjp(latent, step, cond, cotangent)
    }

    fn edit_with_attention_control(
        &self,
        inversion: &InversionResult,
        source: &Conditioning,
        target: &Conditioning,
        control: &AttentionControl,
    ) -> Result<Image> {
        let _g = self.gate.enter(false);
        self.inner.edit_with_attention_control(inversion, source, target, control)
    }
}

impl ClassifierBackend for Serialized<dyn ClassifierBackend> {
    fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        let _g = self.gate.enter(false);
        self.inner.predict(image)
    }

    fn labels(&self) -> &[String] {
        self.inner.labels()
    }
}

impl Backends {
    /// Wraps every backend that does not declare itself concurrency-safe so
    /// that its calls are serialised.
    pub fn serialized(&self) -> Backends {
        fn wrap<T: ?Sized>(b: &Arc<T>, safe: bool, make: impl FnOnce(Arc<T>) -> Arc<T>) -> Arc<T> {
            if safe {
                b.clone()
            } else {
                make(b.clone())
            }
        }
        Backends {
            captioner: wrap(&self.captioner, self.captioner.concurrency_safe(), |b| Arc::new(Serialized::new(b))),
            language_model: wrap(&self.language_model, self.language_model.concurrency_safe(), |b| Arc::new(Serialized::new(b))),
            masked_fill: wrap(&self.masked_fill, self.masked_fill.concurrency_safe(), |b| Arc::new(Serialized::new(b))),
            sentence_embed: wrap(&self.sentence_embed, self.sentence_embed.concurrency_safe(), |b| Arc::new(Serialized::new(b))),
            joint_embed: wrap(&self.joint_embed, self.joint_embed.concurrency_safe(), |b| Arc::new(Serialized::new(b))),
            diffusion: wrap(&self.diffusion, self.diffusion.concurrency_safe(), |b| Arc::new(Serialized::new(b))),
            classifier: wrap(&self.classifier, self.classifier.concurrency_safe(), |b| Arc::new(Serialized::new(b))),
        }
    }
}

//! Answers backend calls from recorded call/response pairs.
//!
//! A fixture is JSON Lines of `{backend, method, input_digest, output}`
//! where the digest is the SHA-256 of the canonical JSON of the call's
//! inputs. [`Recorder`] wraps live backends and produces such a file.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    AttentionControl, Backends, CaptionerBackend, ClassifierBackend, Conditioning,
    DiffusionBackend, FillCandidate, Image, JointEmbedBackend, LanguageModelBackend, Latent,
    MaskedFillBackend, SentenceEmbedBackend, TokenLogprob,
};
use crate::diffusion::InversionResult;
use crate::model::DecodeConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub backend: String,
    pub method: String,
    pub input_digest: String,
    pub output: Value,
}

/// Serialized form of an image inside a fixture.
#[derive(Serialize, Deserialize)]
struct StoredImage {
    width: u32,
    height: u32,
    rgb: Vec<u8>,
}

fn image_input(img: &Image) -> Value {
    json!({
        "width": img.width(),
        "height": img.height(),
        "sha256": hex::encode(Sha256::digest(img.as_raw())),
    })
}

fn image_output(img: &Image) -> Value {
    serde_json::to_value(StoredImage {
        width: img.width(),
        height: img.height(),
        rgb: img.as_raw().clone(),
    })
    .expect("image serializes")
}

fn image_from_output(v: Value) -> Result<Image> {
    let s: StoredImage = serde_json::from_value(v)?;
    Image::from_raw(s.width, s.height, s.rgb)
        .ok_or_else(|| Error::backend("replay", "stored image has the wrong byte count"))
}

/// SHA-256 of the canonical (sorted-key, compact) JSON of `input`.
pub fn input_digest(input: &Value) -> String {
    let canonical = serde_json::to_string(input).expect("value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Default)]
pub struct ReplayStore {
    entries: HashMap<(String, String, String), Value>,
}

impl ReplayStore {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut store = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(line).map_err(|err| Error::ManifestMalformed {
                line: i + 1,
                reason: err.to_string(),
            })?;
            store.insert(e);
        }
        Ok(store)
    }

    pub fn insert(&mut self, e: ReplayEntry) {
        self.entries
            .insert((e.backend, e.method, e.input_digest), e.output);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, backend: &str, method: &str, input: &Value) -> Result<Value> {
        let digest = input_digest(input);
        self.entries
            .get(&(backend.to_string(), method.to_string(), digest.clone()))
            .cloned()
            .ok_or_else(|| {
                Error::backend(
                    format!("replay:{backend}"),
                    format!("no recorded `{method}` call with input digest {digest}"),
                )
            })
    }

    fn get<T: DeserializeOwned>(&self, backend: &str, method: &str, input: &Value) -> Result<T> {
        Ok(serde_json::from_value(self.lookup(backend, method, input)?)?)
    }
}

struct Replay(Arc<ReplayStore>);

/// Backends that answer every call from `store`.
pub fn replay_backends(store: Arc<ReplayStore>) -> Backends {
    let labels: Vec<String> = store
        .get("classifier", "labels", &Value::Null)
        .unwrap_or_default();
    Backends {
        captioner: Arc::new(Replay(store.clone())),
        language_model: Arc::new(Replay(store.clone())),
        masked_fill: Arc::new(Replay(store.clone())),
        sentence_embed: Arc::new(Replay(store.clone())),
        joint_embed: Arc::new(Replay(store.clone())),
        diffusion: Arc::new(Replay(store.clone())),
        classifier: Arc::new(ReplayClassifier { store, labels }),
    }
}

fn edit_input(
    inversion: &InversionResult,
    source: &Conditioning,
    target: &Conditioning,
    control: &AttentionControl,
) -> Result<Value> {
    let inv = serde_json::to_string(inversion)?;
    Ok(json!({
        "inversion": hex::encode(Sha256::digest(inv.as_bytes())),
        "source": source,
        "target": target,
        "control": control,
    }))
}

impl CaptionerBackend for Replay {
    fn caption(&self, image: &Image, decode: &DecodeConfig) -> Result<String> {
        self.0.get(
            "captioner",
            "caption",
            &json!({"image": image_input(image), "decode": decode}),
        )
    }
}

impl LanguageModelBackend for Replay {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.0.get("language_model", "complete", &json!(prompt))
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        self.0.get("language_model", "token_logprobs", &json!(text))
    }
}

impl MaskedFillBackend for Replay {
    fn fill(&self, text: &str, top_n: usize) -> Result<Vec<FillCandidate>> {
        self.0
            .get("masked_fill", "fill", &json!({"text": text, "top_n": top_n}))
    }
}

impl SentenceEmbedBackend for Replay {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.0.get("sentence_embed", "embed", &json!(text))
    }
}

impl JointEmbedBackend for Replay {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        self.0.get("joint_embed", "embed_image", &image_input(image))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.0.get("joint_embed", "embed_text", &json!(text))
    }
}

impl DiffusionBackend for Replay {
    fn encode(&self, image: &Image) -> Result<Latent> {
        self.0.get("diffusion", "encode", &image_input(image))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        image_from_output(self.0.lookup("diffusion", "decode", &json!(latent))?)
    }

    fn embed_prompt(&self, caption: &str) -> Result<Conditioning> {
        self.0.get("diffusion", "embed_prompt", &json!(caption))
    }

    fn null_conditioning(&self) -> Result<Conditioning> {
        self.0.get("diffusion", "null_conditioning", &Value::Null)
    }

    fn predict_noise(&self, latent: &Latent, step: usize, cond: &Conditioning) -> Result<Latent> {
        self.0.get(
            "diffusion",
            "predict_noise",
            &json!({"latent": latent, "step": step, "cond": cond}),
        )
    }

    fn noise_vjp(
        &self,
        latent: &Latent,
        step: usize,
        cond: &Conditioning,
        cotangent: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        self.0.get(
            "diffusion",
            "noise_vjp",
            &json!({"latent": latent, "step": step, "cond": cond, "cotangent": cotangent}),
        )
    }

    fn edit_with_attention_control(
        &self,
        inversion: &InversionResult,
        source: &Conditioning,
        target: &Conditioning,
        control: &AttentionControl,
    ) -> Result<Image> {
        let input = edit_input(inversion, source, target, control)?;
        image_from_output(self.0.lookup("diffusion", "edit_with_attention_control", &input)?)
    }
}

struct ReplayClassifier {
    store: Arc<ReplayStore>,
    labels: Vec<String>,
}

impl ClassifierBackend for ReplayClassifier {
    fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        self.store.get("classifier", "predict", &image_input(image))
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Shared log of recorded calls.
#[derive(Debug, Default)]
pub struct RecordLog {
    entries: Mutex<Vec<ReplayEntry>>,
}

impl RecordLog {
    fn push(&self, backend: &str, method: &str, input: &Value, output: Value) {
        let entry = ReplayEntry {
            backend: backend.to_string(),
            method: method.to_string(),
            input_digest: input_digest(input),
            output,
        };
        self.entries
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(entry);
    }

    fn record<T: Serialize>(&self, backend: &str, method: &str, input: Value, out: Result<T>) -> Result<T> {
        if let Ok(v) = &out {
            self.push(backend, method, &input, serde_json::to_value(v)?);
        }
        out
    }

    pub fn entries(&self) -> Vec<ReplayEntry> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Writes the log as a fixture, dropping repeated calls.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in self.entries() {
            if seen.insert((e.backend.clone(), e.method.clone(), e.input_digest.clone())) {
                let line = serde_json::to_string(&e)?;
                writeln!(out, "{line}").map_err(|err| Error::io(path, err))?;
            }
        }
        Ok(())
    }

    pub fn to_store(&self) -> ReplayStore {
        let mut store = ReplayStore::default();
        for e in self.entries() {
            store.insert(e);
        }
        store
    }
}

struct Recording {
    inner: Backends,
    log: Arc<RecordLog>,
}

/// Wraps `inner` so every successful call is appended to the returned log.
pub fn recording_backends(inner: Backends) -> (Backends, Arc<RecordLog>) {
    let log = Arc::new(RecordLog::default());
    let labels = inner.classifier.labels().to_vec();
    log.push("classifier", "labels", &Value::Null, json!(labels));
    let rec = Arc::new(Recording {
        inner,
        log: log.clone(),
    });
    let backends = Backends {
        captioner: Arc::new(Rec(rec.clone())),
        language_model: Arc::new(Rec(rec.clone())),
        masked_fill: Arc::new(Rec(rec.clone())),
        sentence_embed: Arc::new(Rec(rec.clone())),
        joint_embed: Arc::new(Rec(rec.clone())),
        diffusion: Arc::new(Rec(rec.clone())),
        classifier: Arc::new(RecClassifier { rec, labels }),
    };
    (backends, log)
}

struct Rec(Arc<Recording>);

impl CaptionerBackend for Rec {
    fn caption(&self, image: &Image, decode: &DecodeConfig) -> Result<String> {
        let input = json!({"image": image_input(image), "decode": decode});
        let out = self.0.inner.captioner.caption(image, decode);
        self.0.log.record("captioner", "caption", input, out)
    }

    fn concurrency_safe(&self) -> bool {
        self.0.inner.captioner.concurrency_safe()
    }
}

impl LanguageModelBackend for Rec {
    fn complete(&self, prompt: &str) -> Result<String> {
        let out = self.0.inner.language_model.complete(prompt);
        self.0.log.record("language_model", "complete", json!(prompt), out)
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        let out = self.0.inner.language_model.token_logprobs(text);
        self.0.log.record("language_model", "token_logprobs", json!(text), out)
    }

    fn concurrency_safe(&self) -> bool {
        self.0.inner.language_model.concurrency_safe()
    }
}

impl MaskedFillBackend for Rec {
    fn fill(&self, text: &str, top_n: usize) -> Result<Vec<FillCandidate>> {
        let out = self.0.inner.masked_fill.fill(text, top_n);
        self.0
            .log
            .record("masked_fill", "fill", json!({"text": text, "top_n": top_n}), out)
    }

    fn concurrency_safe(&self) -> bool {
        self.0.inner.masked_fill.concurrency_safe()
    }
}

impl SentenceEmbedBackend for Rec {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let out = self.0.inner.sentence_embed.embed(text);
        self.0.log.record("sentence_embed", "embed", json!(text), out)
    }

    fn concurrency_safe(&self) -> bool {
        self.0.inner.sentence_embed.concurrency_safe()
    }
}

impl JointEmbedBackend for Rec {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let out = self.0.inner.joint_embed.embed_image(image);
        self.0.log.record("joint_embed", "embed_image", image_input(image), out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let out = self.0.inner.joint_embed.embed_text(text);
        self.0.log.record("joint_embed", "embed_text", json!(text), out)
    }

    fn concurrency_safe(&self) -> bool {
        self.0.inner.joint_embed.concurrency_safe()
    }
}

impl DiffusionBackend for Rec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        let out = self.0.inner.diffusion.encode(image);
        self.0.log.record("diffusion", "encode", image_input(image), out)
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let out = self.0.inner.diffusion.decode(latent)?;
        self.0.log.push("diffusion", "decode", &json!(latent), image_output(&out));
        Ok(out)
    }

    fn embed_prompt(&self, caption: &str) -> Result<Conditioning> {
        let out = self.0.inner.diffusion.embed_prompt(caption);
        self.0.log.record("diffusion", "embed_prompt", json!(caption), out)
    }

    fn null_conditioning(&self) -> Result<Conditioning> {
        let out = self.0.inner.diffusion.null_conditioning();
        self.0.log.record("diffusion", "null_conditioning", Value::Null, out)
    }

    fn predict_noise(&self, latent: &Latent, step: usize, cond: &Conditioning) -> Result<Latent> {
        let input = json!({"latent": latent, "step": step, "cond": cond});
        let out = self.0.inner.diffusion.predict_noise(latent, step, cond);
        self.0.log.record("diffusion", "predict_noise", input, out)
    }

    fn noise_vjp(
        &self,
        latent: &Latent,
        step: usize,
        cond: &Conditioning,
        cotangent: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        let input = json!({"latent": latent, "step": step, "cond": cond, "cotangent": cotangent});
        let out = self.0.inner.diffusion.noise_vjp(latent, step, cond, cotangent);
        self.0.log.record("diffusion", "noise_vjp", input, out)
    }

    fn edit_with_attention_control(
        &self,
        inversion: &InversionResult,
        source: &Conditioning,
        target: &Conditioning,
        control: &AttentionControl,
    ) -> Result<Image> {
        let input = edit_input(inversion, source, target, control)?;
        // The inner backend's own predict_noise calls go unrecorded here;
        // replay answers the edit as a whole.
        let out = self
            .0
            .inner
            .diffusion
            .edit_with_attention_control(inversion, source, target, control)?;
        self.0
            .log
            .push("diffusion", "edit_with_attention_control", &input, image_output(&out));
        Ok(out)
    }

    fn concurrency_safe(&self) -> bool {
        self.0.inner.diffusion.concurrency_safe()
    }
}

struct RecClassifier {
    rec: Arc<Recording>,
    labels: Vec<String>,
}

impl ClassifierBackend for RecClassifier {
    fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        let out = self.rec.inner.classifier.predict(image);
        self.rec.log.record("classifier", "predict", image_input(image), out)
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn concurrency_safe(&self) -> bool {
        self.rec.inner.classifier.concurrency_safe()
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How perturbation types are chosen for each image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    /// Draw a type uniformly at random for each of the N slots.
    Sample,
    /// Cycle through every typed axis.
    #[default]
    Exhaustive,
}

/// Caption decoding settings handed to the captioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub repetition_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            min_words: 20,
            max_words: 100,
            repetition_penalty: 1.0,
        }
    }
}

/// Every tunable of a generation run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Maximum caption perturbations attempted per image.
    pub n_max_perturbations: usize,
    /// Edited span must be less similar than this to the label text.
    pub epsilon_label: f64,
    /// Edited span must be less similar than this to the span it replaces.
    pub epsilon_span: f64,
    /// Minimum directional cosine between the image and caption changes.
    pub tau_image: f64,
    /// Optional floor on cosine(E_I(x), E_I(x')). Off when absent.
    pub image_similarity_threshold: Option<f64>,
    /// Self-attention injection fractions tried for every edit.
    pub f_sweep: Vec<f64>,
    pub cross_replace_steps: f64,
    pub guidance_scale: f64,
    pub inversion_guidance_scale: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub null_text_inner_steps: usize,
    pub null_text_learning_rate: f64,
    pub null_text_early_stop: f64,
    pub decode: DecodeConfig,
    pub k_clusters: usize,
    pub mode: PerturbMode,
    pub seed: u64,
    pub workers: usize,
    /// Backend implementation name; `stub` or `replay:<fixture path>`.
    pub backend: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_max_perturbations: 5,
            epsilon_label: 0.5,
            epsilon_span: 0.7,
            tau_image: 0.2,
            image_similarity_threshold: None,
            f_sweep: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            cross_replace_steps: 0.8,
            guidance_scale: 7.5,
            inversion_guidance_scale: 1.0,
            diffusion_steps: 50,
            beta_start: 0.00085,
            beta_end: 0.012,
            null_text_inner_steps: 10,
            null_text_learning_rate: 1e-2,
            null_text_early_stop: 1e-5,
            decode: DecodeConfig::default(),
            k_clusters: 5,
            mode: PerturbMode::Exhaustive,
            seed: 0,
            workers: 1,
            backend: "stub".to_string(),
        }
    }
}

fn unit_interval(key: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::ConfigInvalid {
            key,
            reason: format!("{v} is outside [0, 1]"),
        });
    }
    Ok(())
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max_perturbations == 0 {
            return Err(Error::ConfigInvalid {
                key: "n_max_perturbations",
                reason: "must be at least 1".into(),
            });
        }
        unit_interval("epsilon_label", self.epsilon_label)?;
        unit_interval("epsilon_span", self.epsilon_span)?;
        // tau gates a cosine, so the whole [-1, 1] range is meaningful.
        if !(-1.0..=1.0).contains(&self.tau_image) {
            return Err(Error::ConfigInvalid {
                key: "tau_image",
                reason: format!("{} is outside [-1, 1]", self.tau_image),
            });
        }
        if let Some(t) = self.image_similarity_threshold {
            unit_interval("image_similarity_threshold", t)?;
        }
        if self.f_sweep.is_empty() {
            return Err(Error::ConfigInvalid {
                key: "f_sweep",
                reason: "must not be empty".into(),
            });
        }
        if let Some(f) = self.f_sweep.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(Error::ConfigInvalid {
                key: "f_sweep",
                reason: format!("{f} is outside (0, 1)"),
            });
        }
        if self.f_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ConfigInvalid {
                key: "f_sweep",
                reason: "values must be strictly increasing".into(),
            });
        }
        unit_interval("cross_replace_steps", self.cross_replace_steps)?;
        if !(self.guidance_scale > 0.0) {
            return Err(Error::ConfigInvalid {
                key: "guidance_scale",
                reason: "must be positive".into(),
            });
        }
        if !(self.inversion_guidance_scale >= 0.0) {
            return Err(Error::ConfigInvalid {
                key: "inversion_guidance_scale",
                reason: "must be non-negative".into(),
            });
        }
        if self.diffusion_steps == 0 {
            return Err(Error::ConfigInvalid {
                key: "diffusion_steps",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::ConfigInvalid {
                key: "beta_start",
                reason: format!(
                    "need 0 < beta_start <= beta_end < 1, got {} and {}",
                    self.beta_start, self.beta_end
                ),
            });
        }
        if !(self.null_text_learning_rate > 0.0) {
            return Err(Error::ConfigInvalid {
                key: "null_text_learning_rate",
                reason: "must be positive".into(),
            });
        }
        if self.decode.beam_size == 0 {
            return Err(Error::ConfigInvalid {
                key: "decode",
                reason: "beam_size must be at least 1".into(),
            });
        }
        if self.decode.min_words > self.decode.max_words {
            return Err(Error::ConfigInvalid {
                key: "decode",
                reason: "min_words exceeds max_words".into(),
            });
        }
        if self.k_clusters == 0 {
            return Err(Error::ConfigInvalid {
                key: "k_clusters",
                reason: "must be at least 1".into(),
            });
        }
        if self.workers == 0 {
            return Err(Error::ConfigInvalid {
                key: "workers",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: PipelineConfig = if text.trim().is_empty() {
            PipelineConfig::default()
        } else {
            serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    /// Top-level keys whose values differ between two configs.
    pub fn diff_keys(&self, other: &PipelineConfig) -> Vec<String> {
        let a = flatten(self);
        let b = flatten(other);
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

fn flatten(config: &PipelineConfig) -> BTreeMap<String, serde_json::Value> {
    match serde_json::to_value(config).expect("config always serializes") {
        serde_json::Value::Object(map) => map.into_iter().collect(),
        _ => unreachable!("config serializes to an object"),
    }
}

/// Reads a JSON config; missing keys take the defaults.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PipelineConfig::from_json_str(&text)
}

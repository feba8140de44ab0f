use rand::Rng;

use super::{keyed_rng, WORLD_SEED};
use crate::backends::{image_to_unit, ClassifierBackend, Image};
use crate::vecops::sq_dist;
use crate::Result;

/// Labels of the stub world, a slice of the ImageNet classes the
/// counterfactual study reports on.
pub const FIXTURE_LABELS: [&str; 10] = [
    "dog sled",
    "howler monkey",
    "seat belt",
    "swimming cap",
    "balance beam",
    "hockey puck",
    "patio",
    "miniskirt",
    "space bar",
    "volleyball",
];

/// Softmax temperature on squared prototype distance.
const TEMPERATURE: f64 = 4.0;

/// The pixel prototype of class `class` for images of `n` unit values.
pub fn class_prototype(class: usize, n: usize) -> Vec<f64> {
    let mut rng = keyed_rng(WORLD_SEED, &[b"prototype", &(class as u64).to_le_bytes(), &(n as u64).to_le_bytes()]);
    (0..n).map(|_| rng.random_range(-0.35..0.35)).collect()
}

/// Nearest-prototype classifier: logits are negative squared distances to
/// each class prototype, scaled by a temperature.
#[derive(Debug, Clone)]
pub struct StubClassifier {
    labels: Vec<String>,
}

impl StubClassifier {
    pub fn new() -> Self {
        Self {
            labels: FIXTURE_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Default for StubClassifier {
    fn default() -> Self {
        Self::new()
    }
}

impl ClassifierBackend for StubClassifier {
    fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        let u = image_to_unit(image);
        let logits: Vec<f64> = (0..self.labels.len())
            .map(|c| -sq_dist(&u, &class_prototype(c, u.len())) / TEMPERATURE)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }
}

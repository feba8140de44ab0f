//! Seeded deterministic stand-ins for every backend contract.
//!
//! Every stub is a pure function of its inputs and the suite seed, except
//! the classifier and the fixture images, which share a fixed world seed so
//! that fixture suites written once stay correctly labelled under any run
//! seed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Backends;

mod captioner;
mod classifier;
mod diffusion;
mod embed;
mod language;
pub mod vocab;

pub use captioner::StubCaptioner;
pub use classifier::{class_prototype, StubClassifier, FIXTURE_LABELS};
pub use diffusion::StubDiffusion;
pub use embed::{StubJointEmbed, StubSentenceEmbed, JOINT_DIM};
pub use language::{StubLanguageModel, StubMaskedFill};

/// Seed of the fixed stub "world": class prototypes and fixture images.
pub const WORLD_SEED: u64 = 0x1A2C_E5EE_D000_0001;

/// One deterministic stub per contract.
pub fn make_stub_suite(seed: u64) -> Backends {
    let joint = Arc::new(StubJointEmbed::new(seed));
    Backends {
        captioner: Arc::new(StubCaptioner::new(seed)),
        language_model: Arc::new(StubLanguageModel::new(seed)),
        masked_fill: Arc::new(StubMaskedFill::new(seed)),
        sentence_embed: Arc::new(StubSentenceEmbed::new(seed)),
        joint_embed: joint.clone(),
        diffusion: Arc::new(StubDiffusion::new(seed, joint)),
        classifier: Arc::new(StubClassifier::new()),
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG keyed by a seed and any number of byte strings.
pub(crate) fn keyed_rng(seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = fnv1a(&seed.to_le_bytes());
    for p in parts {
        h = fnv1a(&[h.to_le_bytes().as_slice(), p, &[0xff]].concat());
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub(crate) fn keyed_uniform(seed: u64, parts: &[&[u8]]) -> f64 {
    keyed_rng(seed, parts).random::<f64>()
}

pub(crate) fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = crate::vecops::normalized(&v) {
            return u;
        }
    }
}

pub(crate) fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

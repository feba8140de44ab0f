use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;

use super::{gaussian_unit, keyed_rng};
use crate::backends::{image_to_unit, Image, JointEmbedBackend, SentenceEmbedBackend, Thesaurus};
use crate::text::normalize_word;
use crate::vecops::{dot, normalized};
use crate::{Error, Result};

/// Width of the stub image/text joint space.
pub const JOINT_DIM: usize = 16;

/// Sentence encoder over the fixture thesaurus. Known phrases get their
/// controlled vectors; other words get a hashed sparse direction on the
/// axes the thesaurus leaves free. Every vector is non-negative, so no
/// two texts have a negative cosine.
#[derive(Debug, Clone)]
pub struct StubSentenceEmbed {
    seed: u64,
    thesaurus: Thesaurus,
}

impl StubSentenceEmbed {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            thesaurus: Thesaurus::builtin(),
        }
    }
}

/// Free axes an unknown word is spread over.
const UNKNOWN_WORD_AXES: usize = 3;

impl StubSentenceEmbed {
    fn unknown_word(&self, word: &str, dim: usize) -> Result<Vec<f64>> {
        let free = self.thesaurus.len()..dim;
        if free.is_empty() {
            return Err(Error::backend("stub-sentence-embed", format!("no free axis for unknown word {word:?}")));
        }
        let mut rng = keyed_rng(self.seed, &[b"word", word.as_bytes()]);
        let mut v = vec![0.0; dim];
        for _ in 0..UNKNOWN_WORD_AXES {
            v[rng.random_range(free.clone())] += rng.random_range(0.5..1.0);
        }
        Ok(normalized(&v).expect("non-zero by construction"))
    }
}

impl SentenceEmbedBackend for StubSentenceEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let words: Vec<String> = text
            .split_whitespace()
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .collect();
        let dim = self.thesaurus.dimension();
        let mut sum = vec![0.0; dim];
        for (phrase, known) in self.thesaurus.segment(&words) {
            let v = if known {
                self.thesaurus.get(&phrase).expect("segmented phrase").to_vec()
            } else {
                self.unknown_word(&phrase, dim)?
            };
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
        normalized(&sum).ok_or_else(|| {
            Error::backend("stub-sentence-embed", format!("nothing to embed in {text:?}"))
        })
    }
}

/// Joint image/text space. Text is a normalised bag of hashed word
/// directions; an image is a fixed orthonormal projection of its pixels.
#[derive(Debug)]
pub struct StubJointEmbed {
    seed: u64,
    projections: Mutex<HashMap<usize, Arc<Vec<Vec<f64>>>>>,
}

impl StubJointEmbed {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            projections: Mutex::new(HashMap::new()),
        }
    }

    /// `JOINT_DIM` orthonormal rows of length `n`.
    pub fn projection(&self, n: usize) -> Result<Arc<Vec<Vec<f64>>>> {
        if n < JOINT_DIM {
            return Err(Error::Dimension(format!(
                "images need at least {JOINT_DIM} values, got {n}"
            )));
        }
        let mut cache = self.projections.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(p) = cache.get(&n) {
            return Ok(p.clone());
        }
        let mut rng = keyed_rng(self.seed, &[b"projection", &(n as u64).to_le_bytes()]);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(JOINT_DIM);
        while rows.len() < JOINT_DIM {
            let mut v = gaussian_unit(&mut rng, n);
            for r in &rows {
                let d = dot(&v, r);
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= d * y;
                }
            }
            if let Some(u) = normalized(&v) {
                rows.push(u);
            }
        }
        let rows = Arc::new(rows);
        cache.insert(n, rows.clone());
        Ok(rows)
    }

    pub fn project(&self, data: &[f64]) -> Result<Vec<f64>> {
        let p = self.projection(data.len())?;
        Ok(p.iter().map(|row| dot(row, data)).collect())
    }

    /// `P^T v` for a joint-space vector `v`.
    pub fn lift(&self, n: usize, v: &[f64]) -> Result<Vec<f64>> {
        let p = self.projection(n)?;
        let mut out = vec![0.0; n];
        for (row, c) in p.iter().zip(v) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += c * r;
            }
        }
        Ok(out)
    }

    pub(crate) fn word_vector(&self, word: &str) -> Vec<f64> {
        gaussian_unit(&mut keyed_rng(self.seed, &[b"joint-word", word.as_bytes()]), JOINT_DIM)
    }
}

impl JointEmbedBackend for StubJointEmbed {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let v = self.project(&image_to_unit(image))?;
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::backend("stub-joint-embed", "image projects to zero"));
        }
        Ok(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; JOINT_DIM];
        for w in text.split_whitespace().map(normalize_word).filter(|w| !w.is_empty()) {
            for (s, x) in sum.iter_mut().zip(self.word_vector(&w)) {
                *s += x;
            }
        }
        normalized(&sum)
            .ok_or_else(|| Error::backend("stub-joint-embed", format!("nothing to embed in {text:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::{cosine, norm};

    #[test]
    fn sentence_vectors_are_unit_and_follow_thesaurus() {
        let e = StubSentenceEmbed::new(5);
        let a = e.embed("Cat").unwrap();
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        let b = e.embed("dog sled").unwrap();
        assert!((cosine(&a, &b).unwrap() - 0.72).abs() < 1e-9);
        assert!(e.embed("  ").is_err());
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        let j = StubJointEmbed::new(1);
        let p = j.projection(48).unwrap();
        for (i, a) in p.iter().enumerate() {
            for (k, b) in p.iter().enumerate() {
                let want = if i == k { 1.0 } else { 0.0 };
                assert!((dot(a, b) - want).abs() < 1e-9);
            }
        }
        let v: Vec<f64> = (0..JOINT_DIM).map(|i| i as f64 - 3.0).collect();
        let back = j.project(&j.lift(48, &v).unwrap()).unwrap();
        for (x, y) in back.iter().zip(&v) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

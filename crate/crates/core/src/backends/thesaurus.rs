use std::collections::HashMap;

use serde::Deserialize;

use crate::text::normalize_word;
use crate::{Error, Result};

const BUILTIN: &str = include_str!("../../data/thesaurus.json");

#[derive(Deserialize)]
struct ThesaurusFile {
    dimension: usize,
    entries: Vec<Entry>,
}

#[derive(Deserialize)]
struct Entry {
    text: String,
    near: Option<String>,
    cos: Option<f64>,
}

/// Fixture word vectors with exactly controlled cosines.
///
/// Entry `i` owns a fresh basis axis `e_i`. A plain entry is `e_i`; an entry
/// declared `near` an earlier one with cosine `c` is `c * v_near +
/// sqrt(1 - c^2) * e_i`, so its cosine with `v_near` is exactly `c`.
#[derive(Debug, Clone)]
pub struct Thesaurus {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
    max_phrase_words: usize,
}

impl Thesaurus {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("builtin thesaurus is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ThesaurusFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if file.entries.len() > file.dimension {
            return Err(Error::InvalidArgument(format!(
                "{} thesaurus entries need at least that many dimensions, have {}",
                file.entries.len(),
                file.dimension
            )));
        }
        let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
        let mut max_phrase_words = 1;
        for (axis, entry) in file.entries.iter().enumerate() {
            let key = normalize_phrase(&entry.text);
            let mut v = vec![0.0; file.dimension];
            match (&entry.near, entry.cos) {
                (Some(near), Some(c)) => {
                    let base = vectors.get(&normalize_phrase(near)).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "thesaurus entry `{}` is near unknown `{near}`",
                            entry.text
                        ))
                    })?;
                    if !(-1.0..=1.0).contains(&c) {
                        return Err(Error::InvalidArgument(format!(
                            "cosine {c} for `{}` outside [-1, 1]",
                            entry.text
                        )));
                    }
                    for (o, b) in v.iter_mut().zip(base) {
                        *o = c * b;
                    }
                    v[axis] = (1.0 - c * c).sqrt();
                }
                (None, None) => v[axis] = 1.0,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "thesaurus entry `{}` needs both `near` and `cos`",
                        entry.text
                    )))
                }
            }
            max_phrase_words = max_phrase_words.max(key.split(' ').count());
            vectors.insert(key, v);
        }
        Ok(Self {
            dimension: file.dimension,
            vectors,
            max_phrase_words,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of entries, which is also the first axis no entry uses.
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, phrase: &str) -> Option<&[f64]> {
        self.vectors.get(&normalize_phrase(phrase)).map(Vec::as_slice)
    }

    /// Splits normalised words into thesaurus phrases (longest match first)
    /// and leftover single words.
    pub fn segment(&self, words: &[String]) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let mut matched = false;
            for len in (1..=self.max_phrase_words.min(words.len() - i)).rev() {
                let phrase = words[i..i + len].join(" ");
                if self.vectors.contains_key(&phrase) {
                    out.push((phrase, true));
                    i += len;
                    matched = true;
                    break;
                }
            }
            if !matched {
                out.push((words[i].clone(), false));
                i += 1;
            }
        }
        out
    }
}

fn normalize_phrase(text: &str) -> String {
    text.split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::cosine;

    #[test]
    fn controlled_cosines_are_exact() {
        let t = Thesaurus::builtin();
        let c = |a: &str, b: &str| cosine(t.get(a).unwrap(), t.get(b).unwrap()).unwrap();
        assert!((c("cat", "dog sled") - 0.72).abs() < 1e-12);
        assert!((c("garden", "dog sled") - 0.05).abs() < 1e-12);
        assert!((c("automobile", "car") - 0.95).abs() < 1e-12);
        assert!((c("pizza", "car") - 0.02).abs() < 1e-12);
    }

    #[test]
    fn segmentation_prefers_longest_phrase() {
        let t = Thesaurus::builtin();
        let words: Vec<String> = ["a", "dog", "sled", "race"].iter().map(|s| s.to_string()).collect();
        let seg = t.segment(&words);
        assert_eq!(seg[1], ("dog sled".to_string(), true));
        assert_eq!(seg.len(), 3);
    }

    #[test]
    fn near_must_reference_earlier_entry() {
        let bad = r#"{"dimension": 4, "entries": [{"text": "a", "near": "b", "cos": 0.5}]}"#;
        assert!(Thesaurus::from_json(bad).is_err());
    }
}

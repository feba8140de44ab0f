use rand::seq::SliceRandom;

use super::vocab::{
    all_words, ADJECTIVES, ADJECTIVE_EXTRAS, BACKGROUNDS, DOMAINS, OBJECTS, OBJECT_EXTRAS,
    SUBJECTS, SUBJECT_EXTRAS, WEATHER,
};
use super::{keyed_rng, keyed_uniform};
use crate::backends::{FillCandidate, LanguageModelBackend, MaskedFillBackend, TokenLogprob, MASK_TOKEN};
use crate::perturbation::{prompt_templates, CAPTION_PLACEHOLDER};
use crate::text::normalize_word;
use crate::{Error, Result};

/// Instruction-following stand-in that recognises the perturbation prompt
/// templates and answers with loosely formatted caption variants.
#[derive(Debug, Clone)]
pub struct StubLanguageModel {
    seed: u64,
}

impl StubLanguageModel {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn variants(&self, template: &str, caption: &str) -> Vec<String> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let mut rng = keyed_rng(self.seed, &[b"variants", template.as_bytes(), caption.as_bytes()]);
        let swap = |pos: usize, with: &str| {
            let mut w: Vec<&str> = words.clone();
            w[pos] = with;
            w.join(" ")
        };
        let mut out = Vec::new();
        let mut alternatives = |list: &[&'static str], extras: &[&'static str], current: &str| {
            let mut alts: Vec<&'static str> = list
                .iter()
                .chain(extras)
                .copied()
                .filter(|w| *w != current)
                .collect();
            alts.shuffle(&mut rng);
            alts
        };
        match template {
            "subject" => {
                if let Some(pos) = find(&words, SUBJECTS) {
                    for alt in alternatives(SUBJECTS, SUBJECT_EXTRAS, words[pos]).iter().take(7) {
                        out.push(swap(pos, alt));
                    }
                }
            }
            "object" => {
                if let Some(pos) = find(&words, OBJECTS) {
                    let alts = alternatives(OBJECTS, OBJECT_EXTRAS, words[pos]);
                    for alt in alts.iter().take(6) {
                        out.push(swap(pos, alt));
                    }
                    if let Some(second) = find(&words[pos + 1..], OBJECTS) {
                        let mut w = words.clone();
                        w[pos] = alts[0];
                        w[pos + 1 + second] = alts[1];
                        out.insert(2, w.join(" "));
                    }
                }
            }
            "adjective" => {
                if let Some(pos) = find(&words, ADJECTIVES) {
                    for alt in alternatives(ADJECTIVES, ADJECTIVE_EXTRAS, words[pos]).iter().take(5) {
                        out.push(swap(pos, alt));
                    }
                    let mut w = words.clone();
                    w.insert(pos + 1, "cheerful");
                    out.push(w.join(" "));
                }
            }
            "background_location" => {
                if let Some(pos) = find(&words, BACKGROUNDS) {
                    for alt in alternatives(BACKGROUNDS, &[], words[pos]).iter().take(5) {
                        out.push(swap(pos, alt));
                    }
                }
                out.push(format!("{} with mountains in the background", caption.trim_end_matches('.')));
            }
            "background_weather" => {
                if let Some(pos) = find(&words, WEATHER) {
                    for alt in alternatives(WEATHER, &[], words[pos]).iter().take(4) {
                        out.push(swap(pos, alt));
                    }
                } else {
                    out.push(format!("{} in the rain", caption.trim_end_matches('.')));
                }
            }
            "domain" => {
                for alt in alternatives(DOMAINS, &[], "photo").iter().take(5) {
                    let article = if alt.starts_with(['a', 'e', 'i', 'o', 'u']) { "An" } else { "A" };
                    out.push(format!("{article} {alt} of {caption}"));
                }
            }
            _ => {}
        }
        out
    }
}

fn find(words: &[&str], list: &[&str]) -> Option<usize> {
    words
        .iter()
        .position(|w| list.contains(&normalize_word(w).as_str()))
}

/// Formats variants the way chat models tend to: a header, a numbered
/// list with quotes, a bullet, and one line that repeats the input.
fn format_listing(caption: &str, variants: &[String]) -> String {
    let mut lines = vec!["Here are some variations of the sentence:".to_string()];
    for (i, v) in variants.iter().enumerate() {
        let line = match i % 3 {
            0 => format!("{}. \"{v}\"", i + 1),
            1 => format!("{}) {v}", i + 1),
            _ => format!("- {v}"),
        };
        lines.push(line);
        if i == 1 {
            lines.push(String::new());
            lines.push(format!("\"{caption}\""));
        }
    }
    lines.join("\n")
}

impl LanguageModelBackend for StubLanguageModel {
    fn complete(&self, prompt: &str) -> Result<String> {
        for template in prompt_templates() {
            let Some((prefix, suffix)) = template.text.split_once(CAPTION_PLACEHOLDER) else {
                continue;
            };
            if prompt.len() >= prefix.len() + suffix.len()
                && prompt.starts_with(prefix)
                && prompt.ends_with(suffix)
            {
                let caption = prompt[prefix.len()..prompt.len() - suffix.len()].trim();
                let variants = self.variants(template.name, caption);
                let shown = if template.name == "domain" {
                    format!("A photo of {caption}")
                } else {
                    caption.to_string()
                };
                return Ok(format_listing(&shown, &variants));
            }
        }
        Ok(String::new())
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        let mut prev = String::from("<s>");
        let mut out = Vec::new();
        for token in text.split_whitespace() {
            let norm = normalize_word(token);
            let u = keyed_uniform(self.seed, &[b"logprob", prev.as_bytes(), norm.as_bytes()]);
            out.push(TokenLogprob {
                token: token.to_string(),
                logprob: (0.02 + 0.6 * u).ln(),
            });
            prev = norm;
        }
        Ok(out)
    }
}

/// Fill-mask stand-in ranking the stub vocabulary by a keyed score.
#[derive(Debug, Clone)]
pub struct StubMaskedFill {
    seed: u64,
}

impl StubMaskedFill {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl MaskedFillBackend for StubMaskedFill {
    fn fill(&self, text: &str, top_n: usize) -> Result<Vec<FillCandidate>> {
        let masks = text.matches(MASK_TOKEN).count();
        if masks != 1 {
            return Err(Error::backend(
                "stub-masked-fill",
                format!("expected exactly one {MASK_TOKEN}, found {masks}"),
            ));
        }
        let mut candidates: Vec<FillCandidate> = all_words()
            .into_iter()
            .map(|w| FillCandidate {
                word: w.to_string(),
                score: keyed_uniform(self.seed, &[b"fill", text.as_bytes(), w.as_bytes()]),
            })
            .collect();
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.word.cmp(&b.word)));
        candidates.truncate(top_n);
        Ok(candidates)
    }
}

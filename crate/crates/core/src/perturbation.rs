//! Typed caption edits from the perturber language model, edited-span
//! extraction, the random masked-word baseline, and collection of a
//! perturbation finetuning dataset.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{LanguageModelBackend, MaskedFillBackend, MASK_TOKEN};
use crate::captioning::Caption;
use crate::gates::GateResult;
use crate::model::PerturbationType;
use crate::text::{changed_regions, normalize_word, words, ChangedRegion, WordSpan};
use crate::{Error, Result};

pub const CAPTION_PLACEHOLDER: &str = "<caption>";

/// Separator between the pieces of a multi-region span.
pub const SPAN_JOINER: &str = "…";

/// An instruction with a single caption placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub ptype: PerturbationType,
    pub text: &'static str,
}

fn template_text(raw: &'static str) -> &'static str {
    raw.trim_end_matches(['\n', '\r'])
}

/// All instruction templates. BACKGROUND has two: one for location and
/// one for weather.
pub fn prompt_templates() -> &'static [PromptTemplate] {
    static TEMPLATES: OnceLock<Vec<PromptTemplate>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        use PerturbationType::*;
        vec![
            PromptTemplate {
                name: "subject",
                ptype: Subject,
                text: template_text(include_str!("../data/prompts/subject.txt")),
            },
            PromptTemplate {
                name: "object",
                ptype: Object,
                text: template_text(include_str!("../data/prompts/object.txt")),
            },
            PromptTemplate {
                name: "background_location",
                ptype: Background,
                text: template_text(include_str!("../data/prompts/background_location.txt")),
            },
            PromptTemplate {
                name: "background_weather",
                ptype: Background,
                text: template_text(include_str!("../data/prompts/background_weather.txt")),
            },
            PromptTemplate {
                name: "adjective",
                ptype: Adjective,
                text: template_text(include_str!("../data/prompts/adjective.txt")),
            },
            PromptTemplate {
                name: "domain",
                ptype: Domain,
                text: template_text(include_str!("../data/prompts/domain.txt")),
            },
        ]
    })
}

pub fn templates_for(ptype: PerturbationType) -> Vec<&'static PromptTemplate> {
    prompt_templates().iter().filter(|t| t.ptype == ptype).collect()
}

impl PromptTemplate {
    pub fn render(&self, caption: &str) -> String {
        self.text.replacen(CAPTION_PLACEHOLDER, caption, 1)
    }

    /// Instruction text with the placeholder (and, for DOMAIN, the
    /// "A photo of" lead-in) removed.
    pub fn instruction(&self) -> &'static str {
        let head = self.text.split(CAPTION_PLACEHOLDER).next().unwrap_or(self.text);
        head.trim_end().trim_end_matches(DOMAIN_LEAD.trim_end()).trim_end()
    }
}

const DOMAIN_LEAD: &str = "A photo of ";

/// The text a variant is compared against. DOMAIN templates present the
/// caption as "A photo of <caption>", so their variants are diffed
/// against that sentence.
pub fn edit_source(caption: &str, ptype: PerturbationType) -> String {
    if ptype == PerturbationType::Domain {
        format!("{DOMAIN_LEAD}{caption}")
    } else {
        caption.to_string()
    }
}

/// Prompts for `ptype` with `caption` substituted, one per template.
pub fn build_prompts(caption: &str, ptype: PerturbationType) -> Result<Vec<String>> {
    if !ptype.is_typed() {
        return Err(Error::Contract(format!("no prompt template for {ptype}")));
    }
    Ok(templates_for(ptype).iter().map(|t| t.render(caption)).collect())
}

/// The first prompt for `ptype`.
pub fn build_prompt(caption: &str, ptype: PerturbationType) -> Result<String> {
    Ok(build_prompts(caption, ptype)?.remove(0))
}

/// Where two captions differ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedEdit {
    pub original_span: WordSpan,
    pub edited_span: WordSpan,
    pub multi_span: bool,
    pub regions: Vec<ChangedRegion>,
}

fn join_spans<'a>(parts: impl Iterator<Item = &'a WordSpan>) -> String {
    parts
        .filter(|s| !s.is_empty())
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(SPAN_JOINER)
}

/// Word-level diff of `original` against `variant`.
///
/// One changed region gives that span pair; several give `multi_span`
/// with spans covering first to last region and texts joined by `…`.
/// An insertion has an empty original span at the insertion point.
pub fn parse_edit(original: &str, variant: &str) -> Result<ParsedEdit> {
    if original.trim().is_empty() || variant.trim().is_empty() {
        return Err(Error::InvalidArgument("parse_edit needs two non-empty texts".into()));
    }
    let regions = changed_regions(original, variant);
    match regions.as_slice() {
        [] => Err(Error::NoEdit),
        [one] => Ok(ParsedEdit {
            original_span: one.original.clone(),
            edited_span: one.edited.clone(),
            multi_span: false,
            regions,
        }),
        [first, .., last] => {
            let original_span = WordSpan {
                start: first.original.start,
                end: last.original.end,
                text: join_spans(regions.iter().map(|r| &r.original)),
            };
            let edited_span = WordSpan {
                start: first.edited.start,
                end: last.edited.end,
                text: join_spans(regions.iter().map(|r| &r.edited)),
            };
            Ok(ParsedEdit {
                original_span,
                edited_span,
                multi_span: true,
                regions,
            })
        }
    }
}

/// A proposed caption edit together with its caption-level gate results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEdit {
    pub id: String,
    pub caption_ref: String,
    pub sample_id: String,
    pub perturbation_type: PerturbationType,
    /// The sentence the spans index into: the caption, or for DOMAIN
    /// edits "A photo of" followed by the caption.
    pub source_text: String,
    pub edited_caption: String,
    pub original_span: WordSpan,
    pub edited_span: WordSpan,
    pub multi_span: bool,
    pub regions: Vec<ChangedRegion>,
    #[serde(default)]
    pub gates: Vec<GateResult>,
}

impl CaptionEdit {
    pub fn from_variant(
        id: impl Into<String>,
        caption: &Caption,
        ptype: PerturbationType,
        variant: &str,
    ) -> Result<Self> {
        let source_text = edit_source(&caption.text, ptype);
        let parsed = parse_edit(&source_text, variant)?;
        Ok(Self {
            id: id.into(),
            caption_ref: caption.id.clone(),
            sample_id: caption.sample_id.clone(),
            perturbation_type: ptype,
            source_text,
            edited_caption: variant.to_string(),
            original_span: parsed.original_span,
            edited_span: parsed.edited_span,
            multi_span: parsed.multi_span,
            regions: parsed.regions,
            gates: Vec::new(),
        })
    }

    pub fn gates_passed(&self) -> bool {
        !self.gates.is_empty() && self.gates.iter().all(|g| g.passed)
    }
}

/// Candidate lines recovered from a free-form model reply.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedVariants {
    pub variants: Vec<String>,
    /// Non-empty lines that were not usable variants.
    pub dropped: usize,
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim_start();
    if let Some(rest) = t.strip_prefix(['-', '*', '•']) {
        return rest.trim_start();
    }
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(['.', ')', ':']) {
            return r.trim_start();
        }
    }
    t
}

fn strip_quotes(s: &str) -> &str {
    s.trim()
        .trim_matches(|c| matches!(c, '"' | '\'' | '“' | '”' | '‘' | '’' | '`'))
        .trim()
}

/// One variant per line. List markers and quotes are stripped; headers
/// (lines ending in ':'), repeats of the source, duplicates, and lines that
/// share fewer than half of the source's words are dropped and counted.
pub fn parse_llm_output(source: &str, output: &str) -> ParsedVariants {
    let source_words: HashSet<String> = words(source).iter().map(|w| normalize_word(w)).collect();
    let source_norm: Vec<String> = words(source).iter().map(|w| normalize_word(w)).collect();
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut out = ParsedVariants::default();
    for raw in output.lines() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = strip_quotes(strip_list_marker(raw));
        if line.is_empty() || line.ends_with(':') {
            out.dropped += 1;
            continue;
        }
        let norm: Vec<String> = words(line).iter().map(|w| normalize_word(w)).collect();
        let shared = source_words.iter().filter(|w| norm.contains(w)).count();
        if norm == source_norm || 2 * shared < source_words.len() || !seen.insert(norm) {
            out.dropped += 1;
            continue;
        }
        out.variants.push(line.to_string());
    }
    out
}

/// Edits proposed for one caption and type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerturbOutcome {
    pub edits: Vec<CaptionEdit>,
    pub dropped: usize,
}

/// Asks the perturber for variants of `caption` along `ptype` and keeps
/// the first `n_max` that parse. With several templates for a type their
/// variants are interleaved. `make_id` maps an ordinal to a record id.
pub fn perturb(
    caption: &Caption,
    ptype: PerturbationType,
    n_max: usize,
    lm: &dyn LanguageModelBackend,
    make_id: &dyn Fn(usize) -> String,
) -> Result<PerturbOutcome> {
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    let source = edit_source(&caption.text, ptype);
    let mut lists = Vec::new();
    let mut dropped = 0;
    for prompt in build_prompts(&caption.text, ptype)? {
        let reply = lm.complete(&prompt)?;
        let parsed = parse_llm_output(&source, &reply);
        dropped += parsed.dropped;
        lists.push(parsed.variants);
    }
    let mut merged = Vec::new();
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for list in &lists {
            if let Some(v) = list.get(i) {
                merged.push(v.clone());
            }
        }
    }
    let mut seen = HashSet::new();
    let mut edits = Vec::new();
    for v in merged {
        if edits.len() == n_max {
            break;
        }
        let key: Vec<String> = words(&v).iter().map(|w| normalize_word(w)).collect();
        if !seen.insert(key) {
            dropped += 1;
            continue;
        }
        match CaptionEdit::from_variant(make_id(edits.len()), caption, ptype, &v) {
            Ok(e) => edits.push(e),
            Err(_) => dropped += 1,
        }
    }
    Ok(PerturbOutcome { edits, dropped })
}

/// A fixed, versioned stop-word list.
#[derive(Debug, Clone)]
pub struct StopWords {
    pub version: String,
    words: HashSet<String>,
}

impl StopWords {
    pub fn builtin() -> &'static StopWords {
        static LIST: OnceLock<StopWords> = OnceLock::new();
        LIST.get_or_init(|| StopWords::parse(include_str!("../data/stopwords.txt")))
    }

    /// One word per line; a leading `# ... version N` comment names the version.
    pub fn parse(text: &str) -> Self {
        let mut version = String::from("unversioned");
        let mut words = HashSet::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.split("version").nth(1) {
                    version = v.trim().to_string();
                }
            } else if !line.is_empty() {
                words.insert(normalize_word(line));
            }
        }
        Self { version, words }
    }

    pub fn from_words<'a>(list: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            version: "custom".into(),
            words: list.into_iter().map(normalize_word).collect(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&normalize_word(word))
    }
}

/// How many fill candidates to request when looking for a replacement.
const FILL_CANDIDATES: usize = 10;

/// Masks one uniformly chosen non-stop-word and substitutes the best fill
/// candidate that differs from it.
pub fn random_perturb(
    id: impl Into<String>,
    caption: &Caption,
    filler: &dyn MaskedFillBackend,
    stop_words: &StopWords,
    seed: u64,
) -> Result<CaptionEdit> {
    let toks = words(&caption.text);
    let eligible: Vec<usize> = (0..toks.len())
        .filter(|&i| {
            let w = normalize_word(toks[i]);
            !w.is_empty() && !stop_words.contains(&w)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let &pos = eligible.choose(&mut rng).ok_or(Error::NoEligibleWord)?;
    let original = normalize_word(toks[pos]);
    let mut masked: Vec<&str> = toks.clone();
    masked[pos] = MASK_TOKEN;
    let candidates = filler.fill(&masked.join(" "), FILL_CANDIDATES)?;
    let replacement = candidates
        .iter()
        .map(|c| c.word.trim())
        .find(|w| {
            let n = normalize_word(w);
            !n.is_empty() && n != original && !w.contains(char::is_whitespace)
        })
        .ok_or_else(|| {
            Error::backend("masked_fill", format!("no candidate differs from `{original}`"))
        })?;
    let mut edited: Vec<&str> = toks.clone();
    edited[pos] = replacement;
    let original_span = WordSpan::new(&toks, pos, pos + 1);
    let edited_span = WordSpan::new(&edited, pos, pos + 1);
    Ok(CaptionEdit {
        id: id.into(),
        caption_ref: caption.id.clone(),
        sample_id: caption.sample_id.clone(),
        perturbation_type: PerturbationType::Random,
        source_text: caption.text.clone(),
        edited_caption: edited.join(" "),
        regions: vec![ChangedRegion {
            original: original_span.clone(),
            edited: edited_span.clone(),
        }],
        original_span,
        edited_span,
        multi_span: false,
        gates: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneTriple {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub counts: BTreeMap<PerturbationType, usize>,
    pub requested: BTreeMap<PerturbationType, usize>,
    /// Failed backend calls, as `(caption index, type, cause)`.
    pub failures: Vec<(usize, PerturbationType, String)>,
}

/// Collects instruction-tuning triples grouped by type, up to each type's
/// quota, and writes them as JSON Lines after a one-line header.
pub fn collect_finetune_dataset(
    captions: &[String],
    lm: &dyn LanguageModelBackend,
    quotas: &BTreeMap<PerturbationType, usize>,
    path: &Path,
) -> Result<FinetuneReport> {
    let mut report = FinetuneReport {
        requested: quotas.clone(),
        ..Default::default()
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut emit = |value: String| -> Result<()> {
        writeln!(file, "{value}").map_err(|e| Error::io(path, e))
    };
    emit(serde_json::to_string(&DatasetHeader {
        format: "lance-perturbation-finetune".into(),
        version: 1,
    })?)?;
    for ptype in PerturbationType::TYPED {
        let quota = quotas.get(&ptype).copied().unwrap_or(0);
        let mut count = 0;
        'captions: for (ci, caption) in captions.iter().enumerate() {
            let source = edit_source(caption, ptype);
            for template in templates_for(ptype) {
                if count == quota {
                    break 'captions;
                }
                let reply = match lm.complete(&template.render(caption)) {
                    Ok(r) => r,
                    Err(e) => {
                        report.failures.push((ci, ptype, e.to_string()));
                        continue;
                    }
                };
                for v in parse_llm_output(&source, &reply).variants {
                    if count == quota {
                        break;
                    }
                    emit(serde_json::to_string(&FinetuneTriple {
                        instruction: template.instruction().to_string(),
                        input: source.clone(),
                        output: v,
                    })?)?;
                    count += 1;
                }
            }
        }
        if quota > 0 || count > 0 {
            report.counts.insert(ptype, count);
        }
    }
    Ok(report)
}

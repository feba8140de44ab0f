//! Word-level text utilities: tokenisation, normalisation, and an LCS diff
//! whose alignment is symmetric under swapping its two inputs.

use serde::{Deserialize, Serialize};

/// Whitespace tokenisation.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lower-cases and strips surrounding punctuation, for comparisons only.
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// A half-open range of word positions together with the words it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl WordSpan {
    pub fn new(words: &[&str], start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            text: words[start..end].join(" "),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }
}

/// One maximal changed region between two aligned word sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangedRegion {
    pub original: WordSpan,
    pub edited: WordSpan,
}

/// Matched index pairs of a longest common subsequence of `a` and `b`.
///
/// When skipping either word keeps the LCS length, the lexicographically
/// smaller word is skipped. The rule depends only on the two words, so the
/// alignment of `(b, a)` is exactly the transpose of that of `(a, b)`.
pub fn lcs_pairs(a: &[String], b: &[String]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix table: table[i][j] = LCS length of a[i..] and b[j..]
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i][j] = if a[i] == b[j] {
                table[i + 1][j + 1] + 1
            } else {
                table[i + 1][j].max(table[i][j + 1])
            };
        }
    }
    let mut pairs = Vec::with_capacity(table[0][0]);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else {
            let skip_a = table[i + 1][j];
            let skip_b = table[i][j + 1];
            if skip_a > skip_b || (skip_a == skip_b && a[i] < b[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
    pairs
}

/// Changed regions between two texts, compared on normalised words.
pub fn changed_regions(original: &str, edited: &str) -> Vec<ChangedRegion> {
    let ow = words(original);
    let ew = words(edited);
    let on: Vec<String> = ow.iter().map(|w| normalize_word(w)).collect();
    let en: Vec<String> = ew.iter().map(|w| normalize_word(w)).collect();
    let pairs = lcs_pairs(&on, &en);

    let mut regions = Vec::new();
    let (mut pi, mut pj) = (0, 0);
    let sentinel = std::iter::once((ow.len(), ew.len()));
    for (i, j) in pairs.into_iter().chain(sentinel) {
        if i > pi || j > pj {
            regions.push(ChangedRegion {
                original: WordSpan::new(&ow, pi, i),
                edited: WordSpan::new(&ew, pj, j),
            });
        }
        pi = i + 1;
        pj = j + 1;
    }
    regions
}

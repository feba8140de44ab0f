use serde::{Deserialize, Serialize};

use crate::backends::{ClassifierBackend, Image, LanguageModelBackend};
use crate::{Error, Result};

/// Which suite a prediction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Original,
    Reconstructed,
    Counterfactual,
}

impl SuiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::Original => "original",
            SuiteKind::Reconstructed => "reconstructed",
            SuiteKind::Counterfactual => "counterfactual",
        }
    }
}

/// Classifier output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Sample id for originals, record id otherwise.
    pub record_id: String,
    pub sample_id: String,
    pub suite: SuiteKind,
    pub classifier: String,
    pub label_id: usize,
    pub probabilities: Vec<f64>,
    pub argmax: usize,
}

impl Prediction {
    pub fn new(
        record_id: impl Into<String>,
        sample_id: impl Into<String>,
        suite: SuiteKind,
        classifier: impl Into<String>,
        label_id: usize,
        probabilities: Vec<f64>,
    ) -> Result<Self> {
        check_simplex(&probabilities)?;
        if label_id >= probabilities.len() {
            return Err(Error::InvalidArgument(format!(
                "label {label_id} outside {} classes",
                probabilities.len()
            )));
        }
        let argmax = ranking(&probabilities)[0];
        Ok(Self {
            record_id: record_id.into(),
            sample_id: sample_id.into(),
            suite,
            classifier: classifier.into(),
            label_id,
            probabilities,
            argmax,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.label_id]
    }

    pub fn correct_at(&self, k: usize) -> bool {
        in_top_k(&self.probabilities, self.label_id, k)
    }

    /// `(class, probability)` pairs of the `k` best classes.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        ranking(&self.probabilities)
            .into_iter()
            .take(k)
            .map(|c| (c, self.probabilities[c]))
            .collect()
    }
}

pub fn predict(
    record_id: &str,
    sample_id: &str,
    suite: SuiteKind,
    classifier_name: &str,
    label_id: usize,
    image: &Image,
    classifier: &dyn ClassifierBackend,
) -> Result<Prediction> {
    let p = classifier.predict(image)?;
    Prediction::new(record_id, sample_id, suite, classifier_name, label_id, p)
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if total > 1.0 + 1e-5 {
        return Err(Error::Contract(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Class indices by descending probability, ties by lower index.
pub fn ranking(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

pub fn in_top_k(p: &[f64], label: usize, k: usize) -> bool {
    let pl = p[label];
    let ahead = p
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > pl || (v == pl && j < label))
        .count();
    ahead < k
}

/// Fraction of samples whose label is among the top `k` classes.
pub fn acc_at_k(predictions: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    for (p, &l) in predictions.iter().zip(labels) {
        if l >= p.len() {
            return Err(Error::InvalidArgument(format!("label {l} outside {} classes", p.len())));
        }
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &l)| in_top_k(p, l, k))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Accuracy of a set of predictions against their own labels.
pub fn accuracy(preds: &[&Prediction], k: usize) -> Result<f64> {
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probabilities.clone()).collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label_id).collect();
    acc_at_k(&probs, &labels, k)
}

/// `acc@k(T') - acc@k(T)`, each suite averaged over its own members.
pub fn delta_acc(
    t_preds: &[Vec<f64>],
    t_labels: &[usize],
    t_prime_preds: &[Vec<f64>],
    t_prime_labels: &[usize],
    k: usize,
) -> Result<f64> {
    Ok(acc_at_k(t_prime_preds, t_prime_labels, k)? - acc_at_k(t_preds, t_labels, k)?)
}

/// Paired variant: mean over counterfactuals of
/// `correct(x') - correct(x)` for each counterfactual and its own source.
pub fn delta_acc_paired(pairs: &[(&Prediction, &Prediction)], k: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no paired predictions".into()));
    }
    let sum: f64 = pairs
        .iter()
        .map(|(orig, cf)| cf.correct_at(k) as i32 as f64 - orig.correct_at(k) as i32 as f64)
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// `|p_orig[label] - p_cf[label]|`.
pub fn delta_confidence(p_orig: &[f64], p_cf: &[f64], label_id: usize) -> Result<f64> {
    match (p_orig.get(label_id), p_cf.get(label_id)) {
        (Some(a), Some(b)) => Ok((a - b).abs()),
        _ => Err(Error::InvalidArgument(format!(
            "label {label_id} outside probability vectors of {} and {}",
            p_orig.len(),
            p_cf.len()
        ))),
    }
}

/// Pooled perplexity: `exp(-mean log p)` over every token of every text.
pub fn perplexity(texts: &[String], lm: &dyn LanguageModelBackend) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in texts {
        for tok in lm.token_logprobs(t)? {
            if !(tok.logprob <= 0.0) {
                return Err(Error::Contract(format!(
                    "log-probability {} for `{}` is positive",
                    tok.logprob, tok.token
                )));
            }
            total += tok.logprob;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no tokens to score".into()));
    }
    Ok((-total / n as f64).exp())
}

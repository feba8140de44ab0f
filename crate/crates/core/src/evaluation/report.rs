use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, delta_acc_paired, delta_confidence, Prediction, SuiteKind};
use crate::edit::CounterfactualRecord;
use crate::model::PerturbationType;
use crate::{Error, Result};

/// How accuracy deltas are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    /// Suite averages: `acc(T') - acc(T)`.
    #[default]
    Suite,
    /// Mean per-counterfactual change against its own source.
    Paired,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub delta_mode: DeltaMode,
    /// Count RANDOM edits in the per-type breakdown.
    pub include_random: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub n: usize,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_acc_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_acc_at_5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeCell {
    pub n: usize,
    pub mean_delta_p: f64,
    pub accuracy: AccuracyCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCell {
    pub label_text: String,
    pub n_original: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_at_1_original: Option<f64>,
    pub n_counterfactual: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_at_1_counterfactual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_delta_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub classifier: String,
    pub delta_mode: DeltaMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<AccuracyCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstructed: Option<AccuracyCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<AccuracyCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_delta_p: Option<f64>,
    /// Types with no records are absent.
    pub per_type: BTreeMap<PerturbationType, TypeCell>,
    pub per_class: BTreeMap<usize, ClassCell>,
    /// Counterfactual predictions without a matching source prediction.
    pub excluded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity_captions: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity_edited: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(preds: &[&Prediction], reference: Option<&AccuracyCell>) -> Result<Option<AccuracyCell>> {
    if preds.is_empty() {
        return Ok(None);
    }
    let a1 = accuracy(preds, 1)?;
    let a5 = accuracy(preds, 5)?;
    Ok(Some(AccuracyCell {
        n: preds.len(),
        acc_at_1: a1,
        acc_at_5: a5,
        delta_acc_at_1: reference.map(|r| a1 - r.acc_at_1),
        delta_acc_at_5: reference.map(|r| a5 - r.acc_at_5),
    }))
}

fn paired_cell(
    pairs: &[(&Prediction, &Prediction)],
) -> Result<Option<AccuracyCell>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let cfs: Vec<&Prediction> = pairs.iter().map(|(_, c)| *c).collect();
    Ok(Some(AccuracyCell {
        n: pairs.len(),
        acc_at_1: accuracy(&cfs, 1)?,
        acc_at_5: accuracy(&cfs, 5)?,
        delta_acc_at_1: Some(delta_acc_paired(pairs, 1)?),
        delta_acc_at_5: Some(delta_acc_paired(pairs, 5)?),
    }))
}

/// Builds the sensitivity report for one classifier.
///
/// `records` supplies the perturbation type of each counterfactual
/// prediction (matched on `record_id`); `labels` names the classes.
pub fn build_report(
    classifier: &str,
    predictions: &[Prediction],
    records: &[CounterfactualRecord],
    labels: &[String],
    options: ReportOptions,
) -> Result<SensitivityReport> {
    let mine: Vec<&Prediction> = predictions.iter().filter(|p| p.classifier == classifier).collect();
    let of = |kind: SuiteKind| -> Vec<&Prediction> {
        mine.iter().copied().filter(|p| p.suite == kind).collect()
    };
    let originals = of(SuiteKind::Original);
    let reconstructed = of(SuiteKind::Reconstructed);
    let counterfactuals = of(SuiteKind::Counterfactual);

    let by_sample: HashMap<&str, &Prediction> =
        originals.iter().map(|p| (p.sample_id.as_str(), *p)).collect();
    let types: HashMap<&str, PerturbationType> = records
        .iter()
        .map(|r| (r.id.as_str(), r.perturbation_type))
        .collect();

    let mut excluded = 0;
    let mut pairs: Vec<(&Prediction, &Prediction)> = Vec::new();
    let mut typed_pairs: BTreeMap<PerturbationType, Vec<(&Prediction, &Prediction)>> = BTreeMap::new();
    for cf in &counterfactuals {
        let Some(orig) = by_sample.get(cf.sample_id.as_str()) else {
            excluded += 1;
            continue;
        };
        if orig.label_id != cf.label_id {
            return Err(Error::Contract(format!(
                "counterfactual {} has label {} but its source has {}",
                cf.record_id, cf.label_id, orig.label_id
            )));
        }
        pairs.push((orig, cf));
        if let Some(&t) = types.get(cf.record_id.as_str()) {
            if t.is_typed() || options.include_random {
                typed_pairs.entry(t).or_default().push((orig, cf));
            }
        }
    }

    let original = cell(&originals, None)?;
    let (reconstructed_cell, counterfactual_cell) = match options.delta_mode {
        DeltaMode::Suite => (
            cell(&reconstructed, original.as_ref())?,
            cell(&counterfactuals, original.as_ref())?,
        ),
        DeltaMode::Paired => {
            let rpairs: Vec<(&Prediction, &Prediction)> = reconstructed
                .iter()
                .filter_map(|r| by_sample.get(r.sample_id.as_str()).map(|o| (*o, *r)))
                .collect();
            (paired_cell(&rpairs)?, paired_cell(&pairs)?)
        }
    };

    let dp = |ps: &[(&Prediction, &Prediction)]| -> Result<Vec<f64>> {
        ps.iter()
            .map(|(o, c)| delta_confidence(&o.probabilities, &c.probabilities, o.label_id))
            .collect()
    };

    let mut per_type = BTreeMap::new();
    for (t, ps) in &typed_pairs {
        let cfs: Vec<&Prediction> = ps.iter().map(|(_, c)| *c).collect();
        let accuracy = match options.delta_mode {
            DeltaMode::Suite => cell(&cfs, original.as_ref())?,
            DeltaMode::Paired => paired_cell(ps)?,
        }
        .expect("bucket is non-empty");
        per_type.insert(
            *t,
            TypeCell {
                n: ps.len(),
                mean_delta_p: mean(&dp(ps)?).expect("bucket is non-empty"),
                accuracy,
            },
        );
    }

    let mut per_class: BTreeMap<usize, ClassCell> = BTreeMap::new();
    let label_text = |id: usize| labels.get(id).cloned().unwrap_or_else(|| format!("class {id}"));
    let mut class_ids: Vec<usize> = originals.iter().map(|p| p.label_id).collect();
    class_ids.extend(counterfactuals.iter().map(|p| p.label_id));
    class_ids.sort_unstable();
    class_ids.dedup();
    for id in class_ids {
        let o: Vec<&Prediction> = originals.iter().copied().filter(|p| p.label_id == id).collect();
        let c: Vec<&Prediction> = counterfactuals.iter().copied().filter(|p| p.label_id == id).collect();
        let cp: Vec<(&Prediction, &Prediction)> =
            pairs.iter().copied().filter(|(o, _)| o.label_id == id).collect();
        per_class.insert(
            id,
            ClassCell {
                label_text: label_text(id),
                n_original: o.len(),
                acc_at_1_original: if o.is_empty() { None } else { Some(accuracy(&o, 1)?) },
                n_counterfactual: c.len(),
                acc_at_1_counterfactual: if c.is_empty() { None } else { Some(accuracy(&c, 1)?) },
                mean_delta_p: mean(&dp(&cp)?),
            },
        );
    }

    Ok(SensitivityReport {
        classifier: classifier.to_string(),
        delta_mode: options.delta_mode,
        original,
        reconstructed: reconstructed_cell,
        counterfactual: counterfactual_cell,
        mean_delta_p: mean(&dp(&pairs)?),
        per_type,
        per_class,
        excluded,
        fid: None,
        perplexity_captions: None,
        perplexity_edited: None,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn with_delta(v: f64, d: Option<f64>) -> String {
    match d {
        Some(d) => format!("{} ({:+.2})", pct(v), 100.0 * d),
        None => pct(v),
    }
}

impl SensitivityReport {
    /// Aligned text in the layout of a results table: accuracy per suite
    /// with signed deltas in parentheses, then the per-type breakdown.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "classifier: {}  (deltas: {:?})", self.classifier, self.delta_mode);
        let _ = writeln!(s, "{:<16} {:>6}  {:<18} {:<18}", "suite", "n", "acc@1", "acc@5");
        for (name, c) in [
            ("original", &self.original),
            ("reconstructed", &self.reconstructed),
            ("counterfactual", &self.counterfactual),
        ] {
            if let Some(c) = c {
                let _ = writeln!(
                    s,
                    "{:<16} {:>6}  {:<18} {:<18}",
                    name,
                    c.n,
                    with_delta(c.acc_at_1, c.delta_acc_at_1),
                    with_delta(c.acc_at_5, c.delta_acc_at_5)
                );
            }
        }
        if let Some(dp) = self.mean_delta_p {
            let _ = writeln!(s, "mean delta p: {dp:.4}");
        }
        if !self.per_type.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<12} {:>6}  {:>12}  {:<18}", "type", "n", "mean dp", "acc@1");
            for (t, c) in &self.per_type {
                let _ = writeln!(
                    s,
                    "{:<12} {:>6}  {:>12.4}  {:<18}",
                    t.as_str(),
                    c.n,
                    c.mean_delta_p,
                    with_delta(c.accuracy.acc_at_1, c.accuracy.delta_acc_at_1)
                );
            }
        }
        if let Some(f) = self.fid {
            let _ = writeln!(s, "fid: {f:.4}");
        }
        if let Some(p) = self.perplexity_captions {
            let _ = writeln!(s, "perplexity (captions): {p:.3}");
        }
        if let Some(p) = self.perplexity_edited {
            let _ = writeln!(s, "perplexity (edited captions): {p:.3}");
        }
        if self.excluded > 0 {
            let _ = writeln!(s, "excluded (no source prediction): {}", self.excluded);
        }
        s
    }

    pub fn per_type_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidArgument(e.to_string());
        w.write_record(["type", "n", "mean_delta_p", "acc_at_1", "delta_acc_at_1", "acc_at_5", "delta_acc_at_5"])
            .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (t, c) in &self.per_type {
            w.write_record([
                t.as_str().to_string(),
                c.n.to_string(),
                c.mean_delta_p.to_string(),
                c.accuracy.acc_at_1.to_string(),
                opt(c.accuracy.delta_acc_at_1),
                c.accuracy.acc_at_5.to_string(),
                opt(c.accuracy.delta_acc_at_5),
            ])
            .map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?)
            .map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn per_class_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidArgument(e.to_string());
        w.write_record([
            "label_id",
            "label_text",
            "n_original",
            "acc_at_1_original",
            "n_counterfactual",
            "acc_at_1_counterfactual",
            "mean_delta_p",
        ])
        .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (id, c) in &self.per_class {
            w.write_record([
                id.to_string(),
                c.label_text.clone(),
                c.n_original.to_string(),
                opt(c.acc_at_1_original),
                c.n_counterfactual.to_string(),
                opt(c.acc_at_1_counterfactual),
                opt(c.mean_delta_p),
            ])
            .map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?)
            .map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

//! Class-level bias discovery: word edits are embedded, clustered per
//! class under the L1 metric, and clusters are ranked by the mean
//! confidence drop of their members.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

mod kmedians;

pub use kmedians::{cluster_edits, coordinate_median, Clustering, MAX_ITERATIONS};

use crate::backends::JointEmbedBackend;
use crate::edit::CounterfactualRecord;
use crate::evaluation::{delta_confidence, Prediction, SuiteKind};
use crate::model::PerturbationType;
use crate::perturbation::SPAN_JOINER;
use crate::vecops::sub;
use crate::{Error, Result};

/// Exemplars listed per cluster.
const EXEMPLARS: usize = 3;

fn span_text(span: &str) -> String {
    span.replace(SPAN_JOINER, " ")
}

/// `E_T(edited span) - E_T(original span)` per record; an empty span
/// contributes the zero vector. Records whose embedding fails are skipped
/// and counted.
pub fn edit_features(
    records: &[&CounterfactualRecord],
    joint: &dyn JointEmbedBackend,
) -> (Vec<(String, Vec<f64>)>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    let embed = |s: &str| -> Result<Option<Vec<f64>>> {
        let t = span_text(s);
        if t.trim().is_empty() {
            Ok(None)
        } else {
            joint.embed_text(&t).map(Some)
        }
    };
    for r in records {
        let pair = embed(&r.original_span).and_then(|o| Ok((o, embed(&r.edited_span)?)));
        match pair {
            Ok((o, e)) => {
                let feature = match (o, e) {
                    (Some(o), Some(e)) => {
                        if r.original_span == r.edited_span {
                            vec![0.0; o.len()]
                        } else {
                            sub(&e, &o)
                        }
                    }
                    (None, Some(e)) => e,
                    (Some(o), None) => o.iter().map(|v| -v).collect(),
                    (None, None) => {
                        skipped += 1;
                        continue;
                    }
                };
                out.push((r.id.clone(), feature));
            }
            Err(e) => {
                log::warn!("no edit feature for {}: {e}", r.id);
                skipped += 1;
            }
        }
    }
    (out, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCluster {
    pub class_label: String,
    pub centroid: Vec<f64>,
    pub members: Vec<String>,
    pub mean_delta_p: f64,
    /// `original -> edited` span strings of the members with the largest
    /// confidence change.
    pub exemplars: Vec<String>,
}

/// Orders clusters by mean Δp (descending), then size (descending), then
/// lowest member id. Means and exemplars are recomputed from `delta_p`.
pub fn rank_clusters(
    mut clusters: Vec<EditCluster>,
    delta_p: &HashMap<String, f64>,
    spans: &HashMap<String, (String, String)>,
) -> Result<Vec<EditCluster>> {
    for c in &mut clusters {
        if c.members.is_empty() {
            return Err(Error::Contract("cluster without members".into()));
        }
        let mut scored = Vec::with_capacity(c.members.len());
        for m in &c.members {
            let dp = *delta_p
                .get(m)
                .ok_or_else(|| Error::UnknownRecord(format!("{m} has no confidence change")))?;
            scored.push((m.clone(), dp));
        }
        c.mean_delta_p = scored.iter().map(|(_, d)| d).sum::<f64>() / scored.len() as f64;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        c.exemplars = scored
            .iter()
            .filter_map(|(m, _)| spans.get(m))
            .take(EXEMPLARS)
            .map(|(o, e)| format!("{} -> {}", if o.is_empty() { "(insert)" } else { o }, e))
            .collect();
        c.members.sort();
    }
    clusters.sort_by(|a, b| {
        b.mean_delta_p
            .total_cmp(&a.mean_delta_p)
            .then(b.members.len().cmp(&a.members.len()))
            .then_with(|| a.members[0].cmp(&b.members[0]))
    });
    Ok(clusters)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub n_edits: usize,
    pub clusters: Vec<EditCluster>,
    /// Why the class has no clusters, when it has none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_reason: Option<String>,
}

impl ClassReport {
    pub fn empty(label: &str, n_edits: usize, reason: impl Into<String>) -> Self {
        Self {
            label: label.to_string(),
            n_edits,
            clusters: Vec::new(),
            empty_reason: Some(reason.into()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("class: {}  ({} edits)\n", self.label, self.n_edits);
        if let Some(r) = &self.empty_reason {
            let _ = writeln!(s, "no clusters: {r}");
            return s;
        }
        for (i, c) in self.clusters.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}. mean delta p {:.4}  ({} edits)",
                i + 1,
                c.mean_delta_p,
                c.members.len()
            );
            for e in &c.exemplars {
                let _ = writeln!(s, "     {e}");
            }
        }
        s
    }
}

/// Per-class clusters of a run's accepted counterfactuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightOptions {
    pub k: usize,
    pub seed: u64,
    /// Restrict to one perturbation type; all types are pooled otherwise.
    pub only_type: Option<PerturbationType>,
}

/// Δp of every counterfactual with a source prediction, for one classifier.
pub fn delta_p_by_record(predictions: &[Prediction], classifier: &str) -> HashMap<String, f64> {
    let originals: HashMap<&str, &Prediction> = predictions
        .iter()
        .filter(|p| p.classifier == classifier && p.suite == SuiteKind::Original)
        .map(|p| (p.sample_id.as_str(), p))
        .collect();
    predictions
        .iter()
        .filter(|p| p.classifier == classifier && p.suite == SuiteKind::Counterfactual)
        .filter_map(|cf| {
            let o = originals.get(cf.sample_id.as_str())?;
            let d = delta_confidence(&o.probabilities, &cf.probabilities, o.label_id).ok()?;
            Some((cf.record_id.clone(), d))
        })
        .collect()
}

/// Builds one report per class among the accepted records that have a
/// Δp. Classes with fewer than `k` edits get an empty report.
pub fn class_reports(
    records: &[CounterfactualRecord],
    delta_p: &HashMap<String, f64>,
    joint: &dyn JointEmbedBackend,
    options: InsightOptions,
) -> Result<Vec<ClassReport>> {
    let mut by_class: BTreeMap<&str, Vec<&CounterfactualRecord>> = BTreeMap::new();
    for r in records {
        if !r.accepted || !delta_p.contains_key(&r.id) {
            continue;
        }
        if options.only_type.is_some_and(|t| t != r.perturbation_type) {
            continue;
        }
        by_class.entry(r.label_text.as_str()).or_default().push(r);
    }
    let spans: HashMap<String, (String, String)> = records
        .iter()
        .map(|r| (r.id.clone(), (r.original_span.clone(), r.edited_span.clone())))
        .collect();
    let mut reports = Vec::new();
    for (label, members) in by_class {
        if members.len() < options.k {
            reports.push(ClassReport::empty(
                label,
                members.len(),
                format!("fewer than {} edits", options.k),
            ));
            continue;
        }
        let (features, _skipped) = edit_features(&members, joint);
        if features.len() < options.k {
            reports.push(ClassReport::empty(label, members.len(), "too few embeddable edits"));
            continue;
        }
        let vectors: Vec<Vec<f64>> = features.iter().map(|(_, f)| f.clone()).collect();
        let clustering = cluster_edits(&vectors, options.k, options.seed)?;
        let clusters: Vec<EditCluster> = (0..options.k)
            .filter_map(|c| {
                let ids: Vec<String> = clustering
                    .members(c)
                    .into_iter()
                    .map(|i| features[i].0.clone())
                    .collect();
                (!ids.is_empty()).then(|| EditCluster {
                    class_label: label.to_string(),
                    centroid: clustering.centroids[c].clone(),
                    members: ids,
                    mean_delta_p: 0.0,
                    exemplars: Vec::new(),
                })
            })
            .collect();
        reports.push(ClassReport {
            label: label.to_string(),
            n_edits: members.len(),
            clusters: rank_clusters(clusters, delta_p, &spans)?,
            empty_reason: None,
        });
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub label: String,
    pub json: String,
    pub text: String,
    pub n_edits: usize,
    pub n_clusters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_mean_delta_p: Option<f64>,
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Writes `<class>.json` and `<class>.txt` per report plus `index.json`.
pub fn write_reports(dir: &Path, reports: &[ClassReport]) -> Result<Vec<IndexEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for r in reports {
        let stem = file_stem(&r.label);
        let json = format!("{stem}.json");
        let text = format!("{stem}.txt");
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write(&json, serde_json::to_string_pretty(r)?)?;
        write(&text, r.to_text())?;
        index.push(IndexEntry {
            label: r.label.clone(),
            json,
            text,
            n_edits: r.n_edits,
            n_clusters: r.clusters.len(),
            top_mean_delta_p: r.clusters.first().map(|c| c.mean_delta_p),
        });
    }
    let p = dir.join("index.json");
    std::fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(p, e))?;
    Ok(index)
}

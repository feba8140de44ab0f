//! Classifier evaluation over original, reconstructed, and counterfactual
//! suites: accuracy@k and its deltas, confidence change, per-type and
//! per-class breakdowns, FID, and caption perplexity.

use std::path::Path;

mod fid;
mod metrics;
mod report;

pub use fid::fid;
pub use metrics::{
    acc_at_k, accuracy, delta_acc, delta_acc_paired, delta_confidence, in_top_k, perplexity,
    predict, ranking, Prediction, SuiteKind,
};
pub use report::{
    build_report, AccuracyCell, ClassCell, DeltaMode, ReportOptions, SensitivityReport, TypeCell,
};

use crate::backends::{load_image, Backends};
use crate::model::RunView;
use crate::Result;

/// Predictions for every image of a run plus the resulting report.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub report: SensitivityReport,
    /// Images that could not be scored, as `(record id, cause)`.
    pub failures: Vec<(String, String)>,
}

/// Scores the original suite, the reconstructions, and the accepted
/// counterfactuals of a run. Predictions already stored in the run for
/// `classifier_name` are reused rather than recomputed.
pub fn evaluate_run(
    view: &RunView,
    out_dir: &Path,
    backends: &Backends,
    classifier_name: &str,
    options: ReportOptions,
) -> Result<Evaluation> {
    let classifier = backends.classifier.as_ref();
    let mut predictions: Vec<Prediction> = Vec::new();
    let mut failures = Vec::new();
    let stored = |id: &str| {
        view.predictions
            .iter()
            .find(|p| p.record_id == id && p.classifier == classifier_name)
            .cloned()
    };
    // Relative suite directories are stored relative to the output directory.
    let suite_dir = out_dir.join(&view.start.suite_dir);
    let mut original_features = Vec::new();
    let mut edited_features = Vec::new();

    let mut score = |record_id: &str, sample_id: &str, suite: SuiteKind, label: usize, path: &Path, features: Option<&mut Vec<Vec<f64>>>| {
        let cached = stored(record_id);
        let result = load_image(path).and_then(|img| {
            if let Some(f) = features {
                f.push(backends.joint_embed.embed_image(&img)?);
            }
            match cached {
                Some(p) => Ok(p),
                None => predict(record_id, sample_id, suite, classifier_name, label, &img, classifier),
            }
        });
        match result {
            Ok(p) => predictions.push(p),
            Err(e) => {
                log::warn!("cannot score {record_id}: {e}");
                failures.push((record_id.to_string(), e.to_string()));
            }
        }
    };

    for s in &view.start.samples {
        score(&s.id, &s.id, SuiteKind::Original, s.label_id, &suite_dir.join(&s.image_path), Some(&mut original_features));
    }
    for r in &view.reconstructions {
        score(&r.id, &r.sample_id, SuiteKind::Reconstructed, r.label_id, &out_dir.join(&r.image_path), None);
    }
    for c in view.counterfactuals.iter().filter(|c| c.accepted) {
        if let Some(path) = &c.image_path {
            score(&c.id, &c.sample_id, SuiteKind::Counterfactual, c.label_id, &out_dir.join(path), Some(&mut edited_features));
        }
    }

    let accepted: Vec<_> = view.counterfactuals.iter().filter(|c| c.accepted).cloned().collect();
    let labels = classifier.labels().to_vec();
    let mut report = build_report(classifier_name, &predictions, &accepted, &labels, options)?;
    report.fid = fid(&original_features, &edited_features).ok();
    let captions: Vec<String> = view.captions.iter().map(|c| c.text.clone()).collect();
    let edited: Vec<String> = accepted.iter().map(|c| c.edited_caption.clone()).collect();
    report.perplexity_captions = perplexity(&captions, backends.language_model.as_ref()).ok();
    report.perplexity_edited = perplexity(&edited, backends.language_model.as_ref()).ok();
    Ok(Evaluation {
        predictions,
        report,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit::CounterfactualRecord;
    use crate::model::PerturbationType;

    fn pred(id: &str, sample: &str, suite: SuiteKind, p_label: f64) -> Prediction {
        Prediction::new(id, sample, suite, "m", 0, vec![p_label, 1.0 - p_label]).unwrap()
    }

    fn record(id: &str, t: PerturbationType) -> CounterfactualRecord {
        CounterfactualRecord {
            id: id.into(),
            sample_id: String::new(),
            edit_ref: String::new(),
            perturbation_type: t,
            label_id: 0,
            label_text: "x".into(),
            caption: String::new(),
            edited_caption: String::new(),
            original_span: String::new(),
            edited_span: String::new(),
            image_path: None,
            f_selected: Some(0.9),
            phi_cosine: None,
            gates: Vec::new(),
            candidates: Vec::new(),
            embeddings: None,
            accepted: true,
        }
    }

    #[test]
    fn per_type_means_and_absent_buckets() {
        let preds = vec![
            pred("a", "a", SuiteKind::Original, 0.9),
            pred("b", "b", SuiteKind::Original, 0.9),
            pred("a1", "a", SuiteKind::Counterfactual, 0.7),
            pred("a2", "a", SuiteKind::Counterfactual, 0.5),
            pred("b1", "b", SuiteKind::Counterfactual, 0.8),
            pred("r1", "b", SuiteKind::Counterfactual, 0.1),
        ];
        let records = vec![
            record("a1", PerturbationType::Background),
            record("a2", PerturbationType::Background),
            record("b1", PerturbationType::Subject),
            record("r1", PerturbationType::Random),
        ];
        let r = build_report("m", &preds, &records, &["x".into(), "y".into()], ReportOptions::default()).unwrap();
        assert!((r.per_type[&PerturbationType::Background].mean_delta_p - 0.3).abs() < 1e-12);
        assert!((r.per_type[&PerturbationType::Subject].mean_delta_p - 0.1).abs() < 1e-12);
        assert!(!r.per_type.contains_key(&PerturbationType::Random));
        assert!(!r.per_type.contains_key(&PerturbationType::Domain));
        let with_random = build_report(
            "m",
            &preds,
            &records,
            &[],
            ReportOptions { include_random: true, ..Default::default() },
        )
        .unwrap();
        assert!(with_random.per_type.contains_key(&PerturbationType::Random));
    }

    #[test]
    fn identical_suites_have_zero_delta() {
        let preds = vec![
            pred("a", "a", SuiteKind::Original, 0.9),
            pred("b", "b", SuiteKind::Original, 0.2),
            pred("ra", "a", SuiteKind::Reconstructed, 0.9),
            pred("rb", "b", SuiteKind::Reconstructed, 0.2),
        ];
        for mode in [DeltaMode::Suite, DeltaMode::Paired] {
            let r = build_report("m", &preds, &[], &[], ReportOptions { delta_mode: mode, include_random: false }).unwrap();
            assert_eq!(r.reconstructed.unwrap().delta_acc_at_1, Some(0.0));
        }
    }

    #[test]
    fn unmatched_counterfactual_is_excluded() {
        let preds = vec![pred("a", "a", SuiteKind::Original, 0.9), pred("z1", "z", SuiteKind::Counterfactual, 0.9)];
        let r = build_report("m", &preds, &[], &[], ReportOptions::default()).unwrap();
        assert_eq!(r.excluded, 1);
        assert!(r.mean_delta_p.is_none());
    }

    #[test]
    fn text_and_csv_render() {
        let preds = vec![
            pred("a", "a", SuiteKind::Original, 0.9),
            pred("a1", "a", SuiteKind::Counterfactual, 0.3),
        ];
        let r = build_report("m", &preds, &[record("a1", PerturbationType::Adjective)], &["x".into()], ReportOptions::default()).unwrap();
        let text = r.to_text();
        assert!(text.contains("counterfactual"));
        assert!(text.contains("(-100.00)"));
        assert!(r.per_type_csv().unwrap().starts_with("type,n,mean_delta_p"));
        assert_eq!(r.per_class_csv().unwrap().lines().count(), 2);
        let json = serde_json::to_string(&r).unwrap();
        let back: SensitivityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}

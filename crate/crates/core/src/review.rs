//! Human review of generated counterfactuals: listing, ratings persisted
//! to the run manifest, Table-5-style aggregates and curated export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::edit::CounterfactualRecord;
use crate::model::{Clock, ManifestWriter, Payload, PerturbationType, RunView, TestSample, TestSuite};
use crate::{Error, Result};

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 5;

/// One rater's judgement of one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub record_id: String,
    pub rater_id: String,
    pub realism: u8,
    pub edit_success: u8,
    pub fidelity: u8,
    pub label_consistent: bool,
    /// Empty when the rater raised no concern.
    #[serde(default)]
    pub ethical_issue: String,
    #[serde(default)]
    pub excluded: bool,
    #[serde(default)]
    pub timestamp: String,
}

impl RatingRecord {
    /// Checks score ranges and ids; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("realism", self.realism),
            ("edit_success", self.edit_success),
            ("fidelity", self.fidelity),
        ] {
            if !(MIN_SCORE..=MAX_SCORE).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{field} must be an integer in [{MIN_SCORE}, {MAX_SCORE}], got {v}"
                )));
            }
        }
        if self.rater_id.trim().is_empty() {
            return Err(Error::InvalidArgument("rater_id must not be empty".into()));
        }
        if self.record_id.trim().is_empty() {
            return Err(Error::InvalidArgument("record_id must not be empty".into()));
        }
        Ok(())
    }

    pub fn flags_ethical_issue(&self) -> bool {
        !self.ethical_issue.trim().is_empty()
    }
}

/// Latest rating per `(record, rater)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingBook {
    ratings: BTreeMap<(String, String), RatingRecord>,
}

impl RatingBook {
    /// Replays ratings in order; later ones overwrite earlier ones.
    pub fn from_ratings<'a>(ratings: impl IntoIterator<Item = &'a RatingRecord>) -> Self {
        let mut book = Self::default();
        for r in ratings {
            book.put(r.clone());
        }
        book
    }

    pub fn put(&mut self, r: RatingRecord) {
        self.ratings.insert((r.record_id.clone(), r.rater_id.clone()), r);
    }

    pub fn iter(&self) -> impl Iterator<Item = &RatingRecord> {
        self.ratings.values()
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn for_record(&self, id: &str) -> Vec<&RatingRecord> {
        self.ratings.values().filter(|r| r.record_id == id).collect()
    }

    pub fn rated_by(&self, record_id: &str, rater: &str) -> bool {
        self.ratings.contains_key(&(record_id.to_string(), rater.to_string()))
    }

    /// Records excluded by at least one rater.
    pub fn excluded(&self) -> BTreeSet<String> {
        self.ratings
            .values()
            .filter(|r| r.excluded)
            .map(|r| r.record_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFilter {
    #[serde(default, rename = "type")]
    pub perturbation_type: Option<PerturbationType>,
    /// Label text or numeric label id.
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub accepted: Option<bool>,
    #[serde(default)]
    pub unrated_by: Option<String>,
}

impl RecordFilter {
    fn matches(&self, r: &CounterfactualRecord, book: &RatingBook) -> bool {
        if self.perturbation_type.is_some_and(|t| t != r.perturbation_type) {
            return false;
        }
        if let Some(c) = &self.class {
            if *c != r.label_text && *c != r.label_id.to_string() {
                return false;
            }
        }
        if self.accepted.is_some_and(|a| a != r.accepted) {
            return false;
        }
        if let Some(rater) = &self.unrated_by {
            if book.rated_by(&r.id, rater) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub id: String,
    pub sample_id: String,
    pub perturbation_type: PerturbationType,
    pub label_id: usize,
    pub label_text: String,
    pub caption: String,
    pub edited_caption: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub n_ratings: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordPage {
    pub items: Vec<RecordSummary>,
    pub total: usize,
    /// Zero-based.
    pub page: usize,
    pub page_size: usize,
}

pub const DEFAULT_PAGE_SIZE: usize = 50;

/// Filtered records in manifest order, one page at a time.
pub fn list_records(
    records: &[CounterfactualRecord],
    book: &RatingBook,
    filter: &RecordFilter,
    page: usize,
    page_size: usize,
) -> Result<RecordPage> {
    if page_size == 0 {
        return Err(Error::InvalidArgument("page_size must be at least 1".into()));
    }
    let matching: Vec<&CounterfactualRecord> = records.iter().filter(|r| filter.matches(r, book)).collect();
    let items = matching
        .iter()
        .skip(page.saturating_mul(page_size))
        .take(page_size)
        .map(|r| RecordSummary {
            id: r.id.clone(),
            sample_id: r.sample_id.clone(),
            perturbation_type: r.perturbation_type,
            label_id: r.label_id,
            label_text: r.label_text.clone(),
            caption: r.caption.clone(),
            edited_caption: r.edited_caption.clone(),
            accepted: r.accepted,
            image_path: r.image_path.clone(),
            n_ratings: book.for_record(&r.id).len(),
        })
        .collect();
    Ok(RecordPage {
        items,
        total: matching.len(),
        page,
        page_size,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub mean: f64,
    pub std: f64,
}

impl AxisStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub n_items: usize,
    pub n_ratings: usize,
    pub realism: AxisStats,
    pub edit_success: AxisStats,
    pub fidelity: AxisStats,
    pub label_consistent_pct: f64,
    pub ethical_flag_pct: f64,
}

/// Ratings summarised per perturbation type and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingAggregate {
    pub per_type: BTreeMap<PerturbationType, GroupAggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<GroupAggregate>,
    /// True when there were no ratings to aggregate.
    pub empty: bool,
}

struct ItemMeans {
    realism: f64,
    edit_success: f64,
    fidelity: f64,
    consistent: f64,
    flagged: f64,
    n: usize,
}

fn item_means(ratings: &[&RatingRecord]) -> ItemMeans {
    let n = ratings.len() as f64;
    let mean = |f: &dyn Fn(&RatingRecord) -> f64| ratings.iter().map(|r| f(r)).sum::<f64>() / n;
    ItemMeans {
        realism: mean(&|r| r.realism as f64),
        edit_success: mean(&|r| r.edit_success as f64),
        fidelity: mean(&|r| r.fidelity as f64),
        consistent: mean(&|r| if r.label_consistent { 1.0 } else { 0.0 }),
        flagged: mean(&|r| if r.flags_ethical_issue() { 1.0 } else { 0.0 }),
        n: ratings.len(),
    }
}

fn group(items: &[&ItemMeans]) -> Option<GroupAggregate> {
    let col = |f: fn(&ItemMeans) -> f64| items.iter().map(|i| f(i)).collect::<Vec<_>>();
    let pct = |f: fn(&ItemMeans) -> f64| 100.0 * col(f).iter().sum::<f64>() / items.len() as f64;
    Some(GroupAggregate {
        n_items: items.len(),
        n_ratings: items.iter().map(|i| i.n).sum(),
        realism: AxisStats::of(&col(|i| i.realism))?,
        edit_success: AxisStats::of(&col(|i| i.edit_success))?,
        fidelity: AxisStats::of(&col(|i| i.fidelity))?,
        label_consistent_pct: pct(|i| i.consistent),
        ethical_flag_pct: pct(|i| i.flagged),
    })
}

/// Scores are first averaged over the raters of each record, then the
/// mean and population std are taken across records. Ratings of records
/// not in `records` are ignored.
pub fn aggregate_ratings(book: &RatingBook, records: &[CounterfactualRecord]) -> RatingAggregate {
    let mut by_item: Vec<(PerturbationType, ItemMeans)> = Vec::new();
    for r in records {
        let rs = book.for_record(&r.id);
        if !rs.is_empty() {
            by_item.push((r.perturbation_type, item_means(&rs)));
        }
    }
    let mut per_type = BTreeMap::new();
    let types: BTreeSet<PerturbationType> = by_item.iter().map(|(t, _)| *t).collect();
    for t in types {
        let items: Vec<&ItemMeans> = by_item.iter().filter(|(x, _)| *x == t).map(|(_, i)| i).collect();
        if let Some(g) = group(&items) {
            per_type.insert(t, g);
        }
    }
    let all: Vec<&ItemMeans> = by_item.iter().map(|(_, i)| i).collect();
    let overall = group(&all);
    RatingAggregate {
        empty: overall.is_none(),
        per_type,
        overall,
    }
}

impl RatingAggregate {
    pub fn to_text(&self) -> String {
        if self.empty {
            return "no ratings\n".to_string();
        }
        let mut s = format!(
            "{:<12} {:>6} {:>12} {:>12} {:>12} {:>9} {:>9}\n",
            "type", "items", "realism", "edit", "fidelity", "label %", "ethics %"
        );
        let row = |s: &mut String, name: &str, g: &GroupAggregate| {
            let cell = |a: AxisStats| format!("{:.2}±{:.2}", a.mean, a.std);
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>12} {:>12} {:>12} {:>9.1} {:>9.1}",
                name,
                g.n_items,
                cell(g.realism),
                cell(g.edit_success),
                cell(g.fidelity),
                g.label_consistent_pct,
                g.ethical_flag_pct
            );
        };
        for (t, g) in &self.per_type {
            row(&mut s, t.as_str(), g);
        }
        if let Some(g) = &self.overall {
            row(&mut s, "overall", g);
        }
        s
    }
}

/// Accepted counterfactuals that no rater excluded, as a suite.
pub fn export_suite(view: &RunView, book: &RatingBook, out_dir: &Path) -> Result<TestSuite> {
    let excluded = book.excluded();
    let members = view
        .counterfactuals
        .iter()
        .filter(|c| c.accepted && !excluded.contains(&c.id))
        .filter_map(|c| {
            let path = c.image_path.as_ref()?;
            let mut s = TestSample::new(c.id.clone(), out_dir.join(path), c.label_id, c.label_text.clone());
            s.origin = Some(c.sample_id.clone());
            Some(s)
        })
        .collect();
    TestSuite::counterfactual(format!("{}-reviewed", view.run_id), view.start.suite_id.clone(), members)
}

/// Full detail for one record, with the related image paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDetail {
    pub record: CounterfactualRecord,
    /// Source image, relative to the suite directory.
    pub original_image: Option<String>,
    /// Relative to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_image: Option<String>,
    pub ratings: Vec<RatingRecord>,
}

/// A run opened for review. Ratings are appended to the run's manifest.
pub struct ReviewStore {
    view: RunView,
    out_dir: PathBuf,
    state: Mutex<(RatingBook, ManifestWriter)>,
}

impl std::fmt::Debug for ReviewStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReviewStore").field("run_id", &self.view.run_id).finish()
    }
}

impl ReviewStore {
    pub fn open(manifest: &Path, clock: Box<dyn Clock>) -> Result<Self> {
        let view = RunView::load(manifest)?;
        let writer = ManifestWriter::open(manifest, view.run_id.clone(), clock)?;
        let book = RatingBook::from_ratings(&view.ratings);
        let out_dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            view,
            out_dir,
            state: Mutex::new((book, writer)),
        })
    }

    pub fn view(&self) -> &RunView {
        &self.view
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Directory holding the source images.
    pub fn suite_dir(&self) -> PathBuf {
        self.out_dir.join(&self.view.start.suite_dir)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, (RatingBook, ManifestWriter)> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn ratings(&self) -> RatingBook {
        self.lock().0.clone()
    }

    pub fn list(&self, filter: &RecordFilter, page: usize, page_size: usize) -> Result<RecordPage> {
        let guard = self.lock();
        list_records(&self.view.counterfactuals, &guard.0, filter, page, page_size)
    }

    pub fn detail(&self, id: &str) -> Result<RecordDetail> {
        let record = self
            .view
            .counterfactual(id)
            .ok_or_else(|| Error::UnknownRecord(id.to_string()))?
            .clone();
        let original_image = self
            .view
            .start
            .samples
            .iter()
            .find(|s| s.id == record.sample_id)
            .map(|s| s.image_path.to_string_lossy().into_owned());
        let reconstruction_image = self
            .view
            .reconstructions
            .iter()
            .find(|r| r.sample_id == record.sample_id)
            .map(|r| r.image_path.clone());
        let ratings = self.lock().0.for_record(id).into_iter().cloned().collect();
        Ok(RecordDetail {
            record,
            original_image,
            reconstruction_image,
            ratings,
        })
    }

    /// Validates and persists a rating; a later rating by the same rater
    /// for the same record replaces the earlier one.
    pub fn submit_rating(&self, rating: RatingRecord) -> Result<String> {
        rating.validate()?;
        if self.view.counterfactual(&rating.record_id).is_none() {
            return Err(Error::UnknownRecord(rating.record_id.clone()));
        }
        let mut guard = self.lock();
        let (book, writer) = &mut *guard;
        let id = writer.append(Payload::Rating(rating.clone()))?;
        book.put(rating);
        Ok(id)
    }

    pub fn aggregate(&self) -> RatingAggregate {
        aggregate_ratings(&self.lock().0, &self.view.counterfactuals)
    }

    pub fn export(&self) -> Result<TestSuite> {
        export_suite(&self.view, &self.lock().0, &self.out_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rating(record: &str, rater: &str, realism: u8) -> RatingRecord {
        RatingRecord {
            record_id: record.into(),
            rater_id: rater.into(),
            realism,
            edit_success: 3,
            fidelity: 4,
            label_consistent: true,
            ethical_issue: String::new(),
            excluded: false,
            timestamp: String::new(),
        }
    }

    fn cf(id: &str, t: PerturbationType) -> CounterfactualRecord {
        CounterfactualRecord {
            id: id.into(),
            sample_id: "s".into(),
            edit_ref: String::new(),
            perturbation_type: t,
            label_id: 0,
            label_text: "dog".into(),
            caption: String::new(),
            edited_caption: String::new(),
            original_span: String::new(),
            edited_span: String::new(),
            image_path: Some(format!("images/{id}.png")),
            f_selected: Some(0.9),
            phi_cosine: Some(0.5),
            gates: Vec::new(),
            candidates: Vec::new(),
            embeddings: None,
            accepted: true,
        }
    }

    #[test]
    fn realism_four_four_five() {
        let records = vec![cf("a", PerturbationType::Subject), cf("b", PerturbationType::Subject), cf("c", PerturbationType::Subject)];
        let book = RatingBook::from_ratings(&[rating("a", "r", 4), rating("b", "r", 4), rating("c", "r", 5)]);
        let agg = aggregate_ratings(&book, &records);
        let g = &agg.per_type[&PerturbationType::Subject];
        assert!((g.realism.mean - 13.0 / 3.0).abs() < 1e-12);
        assert!((g.realism.std - (2.0f64 / 9.0).sqrt()).abs() < 1e-12);
        assert_eq!(format!("{:.2}±{:.2}", g.realism.mean, g.realism.std), "4.33±0.47");
        assert_eq!(g.label_consistent_pct, 100.0);
    }

    #[test]
    fn one_flag_in_fifty_is_two_percent() {
        let records: Vec<_> = (0..50).map(|i| cf(&format!("r{i}"), PerturbationType::Domain)).collect();
        let mut ratings: Vec<_> = (0..50).map(|i| rating(&format!("r{i}"), "x", 3)).collect();
        ratings[7].ethical_issue = "stereotype".into();
        let agg = aggregate_ratings(&RatingBook::from_ratings(&ratings), &records);
        assert!((agg.overall.unwrap().ethical_flag_pct - 2.0).abs() < 1e-12);
    }

    #[test]
    fn resubmission_overwrites() {
        let book = RatingBook::from_ratings(&[rating("a", "r", 1), rating("a", "r", 5)]);
        assert_eq!(book.len(), 1);
        assert_eq!(book.iter().next().unwrap().realism, 5);
    }

    #[test]
    fn out_of_range_names_field() {
        let err = rating("a", "r", 6).validate().unwrap_err();
        assert!(err.to_string().contains("realism"));
    }

    #[test]
    fn pages_of_two_two_one() {
        let records: Vec<_> = (0..5).map(|i| cf(&format!("r{i}"), PerturbationType::Object)).collect();
        let book = RatingBook::default();
        let sizes: Vec<usize> = (0..3)
            .map(|p| list_records(&records, &book, &RecordFilter::default(), p, 2).unwrap().items.len())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn unrated_filter_empties_after_rating_all() {
        let records: Vec<_> = (0..3).map(|i| cf(&format!("r{i}"), PerturbationType::Object)).collect();
        let book = RatingBook::from_ratings(&(0..3).map(|i| rating(&format!("r{i}"), "r1", 3)).collect::<Vec<_>>());
        let filter = RecordFilter {
            unrated_by: Some("r1".into()),
            ..Default::default()
        };
        assert_eq!(list_records(&records, &book, &filter, 0, 10).unwrap().total, 0);
    }

    #[test]
    fn empty_aggregate_is_marked() {
        let agg = aggregate_ratings(&RatingBook::default(), &[]);
        assert!(agg.empty);
        assert_eq!(agg.to_text(), "no ratings\n");
    }
}

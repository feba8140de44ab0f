use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A labelled source image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSample {
    pub id: String,
    pub image_path: PathBuf,
    pub label_id: usize,
    pub label_text: String,
    /// For members of a counterfactual suite: the id of the source sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

impl TestSample {
    pub fn new(
        id: impl Into<String>,
        image_path: impl Into<PathBuf>,
        label_id: usize,
        label_text: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            image_path: image_path.into(),
            label_id,
            label_text: label_text.into(),
            origin: None,
        }
    }
}

/// An ordered, id-unique collection of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub id: String,
    pub samples: Vec<TestSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_suite_id: Option<String>,
}

impl TestSuite {
    pub fn new(id: impl Into<String>, samples: Vec<TestSample>) -> Result<Self> {
        let suite = Self {
            id: id.into(),
            samples,
            source_suite_id: None,
        };
        suite.check_unique()?;
        Ok(suite)
    }

    /// A suite derived from `source`; every member must name its origin.
    pub fn counterfactual(
        id: impl Into<String>,
        source_suite_id: impl Into<String>,
        samples: Vec<TestSample>,
    ) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.origin.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "counterfactual member `{}` has no origin",
                s.id
            )));
        }
        let suite = Self {
            id: id.into(),
            samples,
            source_suite_id: Some(source_suite_id.into()),
        };
        suite.check_unique()?;
        Ok(suite)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sample id `{}` in suite `{}`",
                    s.id, self.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TestSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Loads a directory holding images and a `labels.csv` with rows
    /// `path,label_id,label_text`. Paths are relative to the directory and
    /// the sample id is the file stem.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let labels = dir.join("labels.csv");
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&labels)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", labels.display())))?;
        let mut samples = Vec::new();
        for (row, rec) in reader.deserialize::<(String, usize, String)>().enumerate() {
            let (path, label_id, label_text) = rec.map_err(|e| {
                Error::InvalidArgument(format!("{} row {}: {e}", labels.display(), row + 2))
            })?;
            let image_path = dir.join(&path);
            let id = Path::new(&path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| Error::InvalidArgument(format!("bad image path `{path}`")))?;
            samples.push(TestSample::new(id, image_path, label_id, label_text));
        }
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "suite".to_string());
        Self::new(id, samples)
    }
}

/// The axis along which a caption is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PerturbationType {
    Subject,
    Object,
    Background,
    Adjective,
    Domain,
    /// Random masked-word replacement; only used by the LANCE-R baseline.
    Random,
}

impl PerturbationType {
    /// The five typed axes, in pipeline order.
    pub const TYPED: [PerturbationType; 5] = [
        PerturbationType::Subject,
        PerturbationType::Object,
        PerturbationType::Background,
        PerturbationType::Adjective,
        PerturbationType::Domain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationType::Subject => "SUBJECT",
            PerturbationType::Object => "OBJECT",
            PerturbationType::Background => "BACKGROUND",
            PerturbationType::Adjective => "ADJECTIVE",
            PerturbationType::Domain => "DOMAIN",
            PerturbationType::Random => "RANDOM",
        }
    }

    pub fn is_typed(self) -> bool {
        self != PerturbationType::Random
    }
}

impl fmt::Display for PerturbationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SUBJECT" => Ok(PerturbationType::Subject),
            "OBJECT" => Ok(PerturbationType::Object),
            "BACKGROUND" => Ok(PerturbationType::Background),
            "ADJECTIVE" => Ok(PerturbationType::Adjective),
            "DOMAIN" => Ok(PerturbationType::Domain),
            "RANDOM" => Ok(PerturbationType::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown perturbation type `{other}`"
            ))),
        }
    }
}

/// Builds the deterministic record id `{run_id}-{sample_id}-{type}-{ordinal}`.
pub fn record_id(run_id: &str, sample_id: &str, tag: &str, ordinal: usize) -> String {
    format!("{run_id}-{sample_id}-{tag}-{ordinal}")
}

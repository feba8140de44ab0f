use std::path::Path;

use crate::captioning::Caption;
use crate::diffusion::InversionRef;
use crate::edit::{CounterfactualRecord, ReconstructionRecord};
use crate::evaluation::Prediction;
use crate::model::manifest::{read_manifest, ErrorRecord, ManifestRecord, Payload, RunStart};
use crate::perturbation::CaptionEdit;
use crate::review::RatingRecord;
use crate::{Error, Result};

/// The records of one run, grouped by kind, in manifest order.
#[derive(Debug, Clone)]
pub struct RunView {
    pub run_id: String,
    pub start: RunStart,
    pub captions: Vec<Caption>,
    pub edits: Vec<CaptionEdit>,
    pub inversions: Vec<InversionRef>,
    pub counterfactuals: Vec<CounterfactualRecord>,
    pub reconstructions: Vec<ReconstructionRecord>,
    pub predictions: Vec<Prediction>,
    pub ratings: Vec<RatingRecord>,
    pub errors: Vec<ErrorRecord>,
    /// Samples with a completion marker, in order.
    pub completed: Vec<String>,
}

impl RunView {
    pub fn load(manifest: &Path) -> Result<Self> {
        Self::from_records(read_manifest(manifest)?.records)
    }

    /// Groups records of the first run in the list.
    pub fn from_records(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut iter = records.into_iter();
        let (run_id, start) = loop {
            match iter.next() {
                Some(ManifestRecord {
                    run_id,
                    payload: Payload::Run(start),
                    ..
                }) => break (run_id, start),
                Some(_) => continue,
                None => return Err(Error::Contract("manifest has no run record".into())),
            }
        };
        let mut view = RunView {
            run_id,
            start,
            captions: Vec::new(),
            edits: Vec::new(),
            inversions: Vec::new(),
            counterfactuals: Vec::new(),
            reconstructions: Vec::new(),
            predictions: Vec::new(),
            ratings: Vec::new(),
            errors: Vec::new(),
            completed: Vec::new(),
        };
        for rec in iter {
            if rec.run_id != view.run_id {
                continue;
            }
            match rec.payload {
                Payload::Run(_) => {}
                Payload::Caption(c) => view.captions.push(c),
                Payload::CaptionEdit(e) => view.edits.push(e),
                Payload::Inversion(i) => view.inversions.push(i),
                Payload::Counterfactual(c) => view.counterfactuals.push(c),
                Payload::Reconstruction(r) => view.reconstructions.push(r),
                Payload::Prediction(p) => view.predictions.push(p),
                Payload::Rating(r) => view.ratings.push(r),
                Payload::Error(e) => view.errors.push(e),
                Payload::SampleDone(d) => view.completed.push(d.sample_id),
            }
        }
        Ok(view)
    }

    pub fn counterfactual(&self, id: &str) -> Option<&CounterfactualRecord> {
        self.counterfactuals.iter().find(|c| c.id == id)
    }
}

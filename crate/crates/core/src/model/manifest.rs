//! Append-only JSON-Lines manifest.
//!
//! Each line is an object with exactly the fields `kind`, `run_id`, `ts` and
//! `payload`. Payloads carry a `schema_version`. A line without its trailing
//! newline is the mark of an interrupted write: readers stop before it with a
//! warning and writers truncate it away on reopen.

use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::captioning::Caption;
use crate::diffusion::InversionRef;
use crate::edit::{CounterfactualRecord, ReconstructionRecord};
use crate::evaluation::Prediction;
use crate::model::{PipelineConfig, TestSample};
use crate::perturbation::CaptionEdit;
use crate::review::RatingRecord;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;

/// Snapshot written once at the start of a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStart {
    pub suite_id: String,
    /// Directory the suite was loaded from; sample image paths are
    /// relative to it.
    pub suite_dir: String,
    pub samples: Vec<TestSample>,
    pub baseline: Baseline,
    pub config: PipelineConfig,
}

/// Which caption perturber drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Typed perturbations from the instruction-following language model.
    #[default]
    Lance,
    /// Random masked-word replacement.
    LanceR,
}

/// A failure isolated to one sample or stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub sample_id: String,
    pub stage: String,
    pub cause: String,
}

/// Marks a sample as fully processed; resume restarts after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDone {
    pub sample_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Run(RunStart),
    Caption(Caption),
    CaptionEdit(CaptionEdit),
    Inversion(InversionRef),
    Counterfactual(CounterfactualRecord),
    Reconstruction(ReconstructionRecord),
    Prediction(Prediction),
    Rating(RatingRecord),
    Error(ErrorRecord),
    SampleDone(SampleDone),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Run(_) => "run",
            Payload::Caption(_) => "caption",
            Payload::CaptionEdit(_) => "caption_edit",
            Payload::Inversion(_) => "inversion",
            Payload::Counterfactual(_) => "counterfactual",
            Payload::Reconstruction(_) => "reconstruction",
            Payload::Prediction(_) => "prediction",
            Payload::Rating(_) => "rating",
            Payload::Error(_) => "error",
            Payload::SampleDone(_) => "sample_done",
        }
    }

    /// The natural id of the payload, when it has one.
    pub fn id(&self) -> Option<String> {
        match self {
            Payload::Caption(c) => Some(c.id.clone()),
            Payload::CaptionEdit(e) => Some(e.id.clone()),
            Payload::Inversion(i) => Some(i.id.clone()),
            Payload::Counterfactual(c) => Some(c.id.clone()),
            Payload::Reconstruction(r) => Some(r.id.clone()),
            Payload::Prediction(p) => Some(format!("{}@{}", p.record_id, p.classifier)),
            Payload::Rating(r) => Some(format!("{}@{}", r.record_id, r.rater_id)),
            Payload::Run(_) | Payload::Error(_) | Payload::SampleDone(_) => None,
        }
    }

    fn to_value(&self) -> Result<Value> {
        let v = match self {
            Payload::Run(p) => serde_json::to_value(p),
            Payload::Caption(p) => serde_json::to_value(p),
            Payload::CaptionEdit(p) => serde_json::to_value(p),
            Payload::Inversion(p) => serde_json::to_value(p),
            Payload::Counterfactual(p) => serde_json::to_value(p),
            Payload::Reconstruction(p) => serde_json::to_value(p),
            Payload::Prediction(p) => serde_json::to_value(p),
            Payload::Rating(p) => serde_json::to_value(p),
            Payload::Error(p) => serde_json::to_value(p),
            Payload::SampleDone(p) => serde_json::to_value(p),
        }?;
        let Value::Object(mut map) = v else {
            return Err(Error::Contract(format!("{} payload is not an object", self.kind())));
        };
        map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
        Ok(Value::Object(map))
    }

    fn from_value(kind: &str, value: Value) -> std::result::Result<Self, String> {
        let Value::Object(mut map) = value else {
            return Err("payload is not an object".into());
        };
        match map.remove("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v <= SCHEMA_VERSION => {}
            Some(v) => return Err(format!("unsupported schema_version {v}")),
            None => return Err("payload lacks schema_version".into()),
        }
        let v = Value::Object(map);
        let err = |e: serde_json::Error| e.to_string();
        Ok(match kind {
            "run" => Payload::Run(serde_json::from_value(v).map_err(err)?),
            "caption" => Payload::Caption(serde_json::from_value(v).map_err(err)?),
            "caption_edit" => Payload::CaptionEdit(serde_json::from_value(v).map_err(err)?),
            "inversion" => Payload::Inversion(serde_json::from_value(v).map_err(err)?),
            "counterfactual" => Payload::Counterfactual(serde_json::from_value(v).map_err(err)?),
            "reconstruction" => Payload::Reconstruction(serde_json::from_value(v).map_err(err)?),
            "prediction" => Payload::Prediction(serde_json::from_value(v).map_err(err)?),
            "rating" => Payload::Rating(serde_json::from_value(v).map_err(err)?),
            "error" => Payload::Error(serde_json::from_value(v).map_err(err)?),
            "sample_done" => Payload::SampleDone(serde_json::from_value(v).map_err(err)?),
            other => return Err(format!("unknown record kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub run_id: String,
    pub ts: String,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    kind: String,
    run_id: String,
    ts: String,
    payload: Value,
}

impl ManifestRecord {
    pub fn new(run_id: impl Into<String>, ts: impl Into<String>, payload: Payload) -> Self {
        Self {
            run_id: run_id.into(),
            ts: ts.into(),
            payload,
        }
    }

    pub fn kind(&self) -> &'static str {
        self.payload.kind()
    }

    /// One manifest line, without the newline.
    pub fn to_line(&self) -> Result<String> {
        let wire = WireRecord {
            kind: self.kind().to_string(),
            run_id: self.run_id.clone(),
            ts: self.ts.clone(),
            payload: self.payload.to_value()?,
        };
        Ok(serde_json::to_string(&wire)?)
    }

    pub fn from_line(line: &str) -> std::result::Result<Self, String> {
        let wire: WireRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let payload = Payload::from_value(&wire.kind, wire.payload)?;
        Ok(Self {
            run_id: wire.run_id,
            ts: wire.ts,
            payload,
        })
    }
}

/// Source of record timestamps.
pub trait Clock: Send + Sync {
    /// Timestamp for the record at zero-based position `seq` in the file.
    fn timestamp(&self, seq: u64) -> String;
}

/// Wall-clock timestamps.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn timestamp(&self, _seq: u64) -> String {
        Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

/// Deterministic timestamps: a fixed epoch plus one second per record.
/// Makes manifests byte-reproducible.
#[derive(Debug, Clone, Copy)]
pub struct LogicalClock {
    pub epoch_secs: i64,
}

impl Default for LogicalClock {
    fn default() -> Self {
        // 2023-01-01T00:00:00Z
        Self {
            epoch_secs: 1_672_531_200,
        }
    }
}

impl Clock for LogicalClock {
    fn timestamp(&self, seq: u64) -> String {
        let t = DateTime::<Utc>::from_timestamp(self.epoch_secs + seq as i64, 0)
            .expect("timestamp in range");
        t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }
}

/// Single appender for a manifest file.
pub struct ManifestWriter {
    path: PathBuf,
    file: File,
    run_id: String,
    seq: u64,
    clock: Box<dyn Clock>,
    sync: bool,
}

impl std::fmt::Debug for ManifestWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManifestWriter")
            .field("path", &self.path)
            .field("run_id", &self.run_id)
            .field("seq", &self.seq)
            .finish()
    }
}

impl ManifestWriter {
    /// Opens (creating if needed) for append. An incomplete trailing line
    /// left by a crash is truncated.
    pub fn open(path: &Path, run_id: impl Into<String>, clock: Box<dyn Clock>) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let contents = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let complete = match contents.iter().rposition(|b| *b == b'\n') {
            Some(i) => i + 1,
            None => 0,
        };
        if complete < contents.len() {
            log::warn!(
                "{}: dropping {} bytes of an incomplete trailing record",
                path.display(),
                contents.len() - complete
            );
            file.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        }
        let seq = contents[..complete].iter().filter(|b| **b == b'\n').count() as u64;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            run_id: run_id.into(),
            seq,
            clock,
            sync: true,
        })
    }

    /// Skips the per-record fsync. Records are still flushed.
    pub fn without_sync(mut self) -> Self {
        self.sync = false;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Number of complete records in the file.
    pub fn len(&self) -> u64 {
        self.seq
    }

    pub fn is_empty(&self) -> bool {
        self.seq == 0
    }

    /// Appends a payload stamped with this writer's run id and clock.
    pub fn append(&mut self, payload: Payload) -> Result<String> {
        let record = ManifestRecord::new(
            self.run_id.clone(),
            self.clock.timestamp(self.seq),
            payload,
        );
        self.append_record(&record)
    }

    /// Appends a fully formed record and returns its id.
    pub fn append_record(&mut self, record: &ManifestRecord) -> Result<String> {
        let mut line = record.to_line()?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        if self.sync {
            self.file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        }
        let id = record
            .payload
            .id()
            .unwrap_or_else(|| format!("{}-{}-{}", record.run_id, record.kind(), self.seq));
        self.seq += 1;
        Ok(id)
    }

    /// Truncates the file to its first `records` complete lines.
    pub fn truncate_to(&mut self, records: u64) -> Result<()> {
        let contents = std::fs::read(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut seen = 0u64;
        let mut cut = 0usize;
        if records > 0 {
            for (i, b) in contents.iter().enumerate() {
                if *b == b'\n' {
                    seen += 1;
                    if seen == records {
                        cut = i + 1;
                        break;
                    }
                }
            }
            if seen < records {
                return Err(Error::InvalidArgument(format!(
                    "cannot truncate to {records} records, file has {seen}"
                )));
            }
        }
        self.file
            .set_len(cut as u64)
            .map_err(|e| Error::io(&self.path, e))?;
        self.file
            .seek(SeekFrom::End(0))
            .map_err(|e| Error::io(&self.path, e))?;
        self.seq = records;
        Ok(())
    }
}

/// Result of reading a manifest in full.
#[derive(Debug, Clone, Default)]
pub struct ManifestContents {
    pub records: Vec<ManifestRecord>,
    /// Set when the file ended in an incomplete line that was skipped.
    pub truncated_tail: bool,
    pub warnings: Vec<String>,
}

/// Iterator over the records of a manifest file, in file order.
pub struct ManifestReader {
    lines: std::vec::IntoIter<(usize, String, bool)>,
    warnings: Vec<String>,
    done: bool,
}

impl ManifestReader {
    pub fn open(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text))
    }

    pub fn from_text(text: &str) -> Self {
        let mut lines = Vec::new();
        let mut rest = text;
        let mut number = 0;
        while !rest.is_empty() {
            number += 1;
            match rest.find('\n') {
                Some(i) => {
                    lines.push((number, rest[..i].to_string(), true));
                    rest = &rest[i + 1..];
                }
                None => {
                    lines.push((number, rest.to_string(), false));
                    rest = "";
                }
            }
        }
        Self {
            lines: lines.into_iter(),
            warnings: Vec::new(),
            done: false,
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

impl Iterator for ManifestReader {
    type Item = Result<ManifestRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let (number, line, terminated) = self.lines.next()?;
        if !terminated {
            self.done = true;
            let msg = format!("line {number}: incomplete trailing record ignored");
            log::warn!("{msg}");
            self.warnings.push(msg);
            return None;
        }
        match ManifestRecord::from_line(&line) {
            Ok(r) => Some(Ok(r)),
            Err(reason) => {
                self.done = true;
                Some(Err(Error::ManifestMalformed {
                    line: number,
                    reason,
                }))
            }
        }
    }
}

/// Reads every complete record of a manifest.
pub fn read_manifest(path: &Path) -> Result<ManifestContents> {
    let mut reader = ManifestReader::open(path)?;
    let mut records = Vec::new();
    for r in reader.by_ref() {
        records.push(r?);
    }
    let warnings = reader.warnings().to_vec();
    Ok(ManifestContents {
        records,
        truncated_tail: !warnings.is_empty(),
        warnings,
    })
}

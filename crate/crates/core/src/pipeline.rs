//! The generation loop: caption, perturb, gate, invert, sweep the edit,
//! gate again, and append everything to the run manifest.
//!
//! A run is resumable. Each sample's records are appended as one batch
//! closed by a `sample_done` marker; on restart the manifest is cut back to
//! the last marker and the remaining samples are processed again. With the
//! logical clock and seeded backends the final file does not depend on
//! where the run was interrupted.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{load_image, save_image, Backends, Image};
use crate::captioning::{caption_image, Caption};
use crate::diffusion::{invert, make_schedule, save_inversion, InversionRef, InversionResult, NullTextConfig};
use crate::edit::{reconstruct, sweep_edit, CounterfactualRecord, ReconstructionRecord, NO_PERTURBATION};
use crate::gates::{gate_label_similarity, gate_span_similarity};
use crate::model::{
    read_manifest, record_id, Baseline, Clock, ErrorRecord, LogicalClock, ManifestRecord, ManifestWriter, Payload,
    PerturbMode, PerturbationType, PipelineConfig, RunStart, RunView, SampleDone, SystemClock, TestSample, TestSuite,
};
use crate::perturbation::{perturb, random_perturb, CaptionEdit, StopWords};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const INVERSIONS_DIR: &str = "inversions";

/// Rejection-counter key for failures that are not a gate.
pub const EDIT_ERROR: &str = "edit_error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    /// One second per record from a fixed epoch; reproducible.
    #[default]
    Logical,
    /// Wall-clock time.
    System,
}

impl ClockKind {
    fn make(self) -> Box<dyn Clock> {
        match self {
            ClockKind::Logical => Box::new(LogicalClock::default()),
            ClockKind::System => Box::new(SystemClock),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_id: String,
    pub baseline: Baseline,
    pub clock: ClockKind,
    /// fsync after every record.
    pub sync: bool,
    /// Stop after this many samples have been completed by this call.
    pub max_samples: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            baseline: Baseline::Lance,
            clock: ClockKind::Logical,
            sync: true,
            max_samples: None,
        }
    }
}

/// Where a sample is in the loop, as recoverable from the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Captioned,
    Perturbed,
    Inverted,
    Edited,
    Done,
}

/// Loop state reconstructed from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub run_id: String,
    pub config: PipelineConfig,
    pub cursor: BTreeMap<String, Stage>,
    /// Rejected edits and failed samples keyed by the first failing gate,
    /// [`EDIT_ERROR`], or `error:<stage>`.
    pub rejections: BTreeMap<String, usize>,
}

impl RunState {
    pub fn from_view(view: &RunView) -> Self {
        let mut cursor = BTreeMap::new();
        let mut advance = |id: &str, stage: Stage| {
            let e = cursor.entry(id.to_string()).or_insert(stage);
            if *e < stage {
                *e = stage;
            }
        };
        for c in &view.captions {
            advance(&c.sample_id, Stage::Captioned);
        }
        for e in &view.edits {
            advance(&e.sample_id, Stage::Perturbed);
        }
        for i in &view.inversions {
            advance(&i.sample_id, Stage::Inverted);
        }
        for c in &view.counterfactuals {
            advance(&c.sample_id, Stage::Edited);
        }
        for s in &view.completed {
            advance(s, Stage::Done);
        }
        let mut rejections = BTreeMap::new();
        for e in &view.edits {
            if let Some(g) = e.gates.iter().find(|g| !g.passed) {
                *rejections.entry(g.gate.clone()).or_insert(0) += 1;
            }
        }
        for c in view.counterfactuals.iter().filter(|c| !c.accepted) {
            let key = c
                .gates
                .iter()
                .find(|g| !g.passed)
                .map_or_else(|| EDIT_ERROR.to_string(), |g| g.gate.clone());
            *rejections.entry(key).or_insert(0) += 1;
        }
        for e in &view.errors {
            *rejections.entry(format!("error:{}", e.stage)).or_insert(0) += 1;
        }
        Self {
            run_id: view.run_id.clone(),
            config: view.start.config.clone(),
            cursor,
            rejections,
        }
    }
}

/// Outcome of a (possibly partial) run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub manifest: PathBuf,
    pub samples: usize,
    pub completed: usize,
    /// Samples that failed and were skipped.
    pub skipped: usize,
    pub proposed_edits: usize,
    pub counterfactuals: usize,
    pub accepted: usize,
    pub state: RunState,
    /// The accepted counterfactuals as a suite; image paths are absolute
    /// when the output directory is.
    pub suite: TestSuite,
    /// True when `max_samples` stopped the run early.
    pub interrupted: bool,
}

impl RunSummary {
    pub fn finished(&self) -> bool {
        self.completed == self.samples
    }
}

/// Starts or continues a run of `suite` into `out_dir`.
///
/// An existing manifest is resumed when its run snapshot matches; a
/// differing config is refused with the changed keys.
pub fn run_lance(
    suite: &TestSuite,
    suite_dir: &Path,
    config: &PipelineConfig,
    backends: &Backends,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunSummary> {
    config.validate()?;
    if suite.is_empty() {
        return Err(Error::InvalidArgument(format!("suite `{}` is empty", suite.id)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = RunStart {
        suite_id: suite.id.clone(),
        suite_dir: stored_suite_dir(suite_dir, out_dir),
        samples: suite.samples.iter().map(|s| relative_sample(s, suite_dir)).collect(),
        baseline: options.baseline,
        config: config.clone(),
    };
    execute(out_dir, start, backends, options)
}

/// Continues the run recorded in `out_dir`. The run snapshot supplies the
/// suite; `config` must match it.
pub fn resume(out_dir: &Path, config: &PipelineConfig, backends: &Backends, options: &RunOptions) -> Result<RunSummary> {
    let manifest = out_dir.join(MANIFEST_FILE);
    let view = RunView::load(&manifest)?;
    check_config(&view.start.config, config)?;
    let mut options = options.clone();
    options.run_id = view.run_id.clone();
    options.baseline = view.start.baseline;
    execute(out_dir, view.start, backends, &options)
}

fn check_config(stored: &PipelineConfig, given: &PipelineConfig) -> Result<()> {
    let diff = stored.diff_keys(given);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(diff))
    }
}

fn stored_suite_dir(suite_dir: &Path, out_dir: &Path) -> String {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (s, o) = (abs(suite_dir), abs(out_dir));
    pathdiff::diff_paths(&s, &o)
        .unwrap_or(s)
        .to_string_lossy()
        .into_owned()
}

fn relative_sample(s: &TestSample, suite_dir: &Path) -> TestSample {
    let mut s = s.clone();
    if let Ok(rel) = s.image_path.strip_prefix(suite_dir) {
        s.image_path = rel.to_path_buf();
    }
    s
}

fn execute(out_dir: &Path, start: RunStart, backends: &Backends, options: &RunOptions) -> Result<RunSummary> {
    let manifest = out_dir.join(MANIFEST_FILE);
    let mut writer = ManifestWriter::open(&manifest, options.run_id.clone(), options.clock.make())?;
    if !options.sync {
        writer = writer.without_sync();
    }
    let existing = read_manifest(&manifest)?.records;
    let done = if existing.is_empty() {
        writer.append(Payload::Run(start.clone()))?;
        Vec::new()
    } else {
        let keep = check_existing(&existing, &start, &options.run_id)?;
        if keep < existing.len() {
            log::info!("discarding {} records of an unfinished sample", existing.len() - keep);
            writer.truncate_to(keep as u64)?;
        }
        existing[..keep]
            .iter()
            .filter_map(|r| match &r.payload {
                Payload::SampleDone(d) => Some(d.sample_id.clone()),
                _ => None,
            })
            .collect()
    };

    let pending: Vec<(usize, &TestSample)> = start
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| !done.contains(&s.id))
        .take(options.max_samples.unwrap_or(usize::MAX))
        .collect();
    let interrupted = pending.len() < start.samples.len() - done.len();

    let suite_dir = out_dir.join(&start.suite_dir);
    let ctx = SampleContext {
        run_id: &options.run_id,
        config: &start.config,
        baseline: start.baseline,
        suite_dir: &suite_dir,
        out_dir,
        backends: if start.config.workers > 1 { backends.serialized() } else { backends.clone() },
    };
    let workers = start.config.workers.min(pending.len()).max(1);
    if workers == 1 {
        for (_, sample) in &pending {
            for p in ctx.process(sample) {
                writer.append(p)?;
            }
        }
    } else {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, Vec<Payload>)>();
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (ctx, next, pending) = (&ctx, &next, &pending);
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((_, sample)) = pending.get(i) else { break };
                    if tx.send((i, ctx.process(sample))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // Batches are appended in sample order whatever order they finish in.
            let mut buffered: HashMap<usize, Vec<Payload>> = HashMap::new();
            let mut expect = 0;
            for (i, batch) in rx {
                buffered.insert(i, batch);
                while let Some(batch) = buffered.remove(&expect) {
                    for p in batch {
                        writer.append(p)?;
                    }
                    expect += 1;
                }
            }
            Ok(())
        })?;
    }

    let view = RunView::load(&manifest)?;
    summarize(&view, out_dir, manifest, interrupted)
}

/// Validates an existing manifest against the run about to continue and
/// returns how many leading records belong to completed samples.
fn check_existing(records: &[ManifestRecord], start: &RunStart, run_id: &str) -> Result<usize> {
    let first = &records[0];
    let Payload::Run(stored) = &first.payload else {
        return Err(Error::Contract("manifest does not start with a run record".into()));
    };
    if first.run_id != run_id {
        return Err(Error::Contract(format!(
            "manifest belongs to run `{}`, not `{run_id}`",
            first.run_id
        )));
    }
    check_config(&stored.config, &start.config)?;
    if stored.samples != start.samples || stored.baseline != start.baseline {
        return Err(Error::Contract("manifest was written for a different suite or baseline".into()));
    }
    let keep = records
        .iter()
        .rposition(|r| matches!(r.payload, Payload::SampleDone(_)))
        .map_or(1, |i| i + 1);
    Ok(keep)
}

fn summarize(view: &RunView, out_dir: &Path, manifest: PathBuf, interrupted: bool) -> Result<RunSummary> {
    let failed: std::collections::HashSet<&str> = view.errors.iter().map(|e| e.sample_id.as_str()).collect();
    let members: Vec<TestSample> = view
        .counterfactuals
        .iter()
        .filter(|c| c.accepted)
        .filter_map(|c| {
            let path = c.image_path.as_ref()?;
            let mut s = TestSample::new(c.id.clone(), out_dir.join(path), c.label_id, c.label_text.clone());
            s.origin = Some(c.sample_id.clone());
            Some(s)
        })
        .collect();
    let suite = TestSuite::counterfactual(format!("{}-counterfactual", view.run_id), view.start.suite_id.clone(), members)?;
    let completed = view.completed.len();
    Ok(RunSummary {
        run_id: view.run_id.clone(),
        manifest,
        samples: view.start.samples.len(),
        completed,
        skipped: view.completed.iter().filter(|s| failed.contains(s.as_str())).count(),
        proposed_edits: view.edits.len(),
        counterfactuals: view.counterfactuals.len(),
        accepted: suite.len(),
        state: RunState::from_view(view),
        suite,
        interrupted,
    })
}

/// Seed for a per-sample random choice, independent of processing order.
fn sample_seed(seed: u64, sample_id: &str, ordinal: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update((ordinal as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The perturbation types planned for one sample, with their counts.
pub fn plan_types(mode: PerturbMode, n: usize, seed: u64, sample_id: &str) -> Vec<(PerturbationType, usize)> {
    let types = PerturbationType::TYPED;
    match mode {
        PerturbMode::Exhaustive => {
            let per_type = n.div_ceil(types.len());
            let mut left = n;
            let mut plan = Vec::new();
            for t in types {
                if left == 0 {
                    break;
                }
                let k = per_type.min(left);
                plan.push((t, k));
                left -= k;
            }
            plan
        }
        PerturbMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, sample_id, 0));
            let mut counts: BTreeMap<PerturbationType, usize> = BTreeMap::new();
            for _ in 0..n {
                let t = *types.choose(&mut rng).expect("non-empty");
                *counts.entry(t).or_insert(0) += 1;
            }
            counts.into_iter().collect()
        }
    }
}

struct SampleContext<'a> {
    run_id: &'a str,
    config: &'a PipelineConfig,
    baseline: Baseline,
    suite_dir: &'a Path,
    out_dir: &'a Path,
    backends: Backends,
}

/// Raised inside a sample; becomes an error record.
struct StageError {
    stage: &'static str,
    error: Error,
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

impl SampleContext<'_> {
    /// Every record for one sample, ending with its completion marker.
    /// A failure replaces the sample's records with an error record.
    fn process(&self, sample: &TestSample) -> Vec<Payload> {
        let mut out = match self.try_process(sample) {
            Ok(records) => records,
            Err(StageError { stage, error }) => {
                log::warn!("sample {} skipped at {stage}: {error}", sample.id);
                vec![Payload::Error(ErrorRecord {
                    sample_id: sample.id.clone(),
                    stage: stage.to_string(),
                    cause: error.to_string(),
                })]
            }
        };
        out.push(Payload::SampleDone(SampleDone {
            sample_id: sample.id.clone(),
        }));
        out
    }

    fn id(&self, sample: &TestSample, tag: &str, ordinal: usize) -> String {
        record_id(self.run_id, &sample.id, tag, ordinal)
    }

    fn try_process(&self, sample: &TestSample) -> std::result::Result<Vec<Payload>, StageError> {
        let b = &self.backends;
        let cfg = self.config;
        let mut out = Vec::new();

        let image = load_image(&self.suite_dir.join(&sample.image_path)).at("load")?;
        let caption = caption_image(self.id(sample, "caption", 0), sample.id.clone(), &image, &cfg.decode, b.captioner.as_ref())
            .at("caption")?;
        out.push(Payload::Caption(caption.clone()));

        let mut edits = self.propose(sample, &caption).at("perturb")?;
        for e in &mut edits {
            e.gates = vec![
                gate_label_similarity(e, &sample.label_text, cfg.epsilon_label, b.sentence_embed.as_ref()),
                gate_span_similarity(e, cfg.epsilon_span, b.sentence_embed.as_ref()),
            ];
            out.push(Payload::CaptionEdit(e.clone()));
        }

        let (inversion, source) = self.invert(&image, &caption).at("invert")?;
        let inv_id = self.id(sample, "inversion", 0);
        let inv_rel = format!("{INVERSIONS_DIR}/{}.inv", sample.id);
        save_inversion(&self.out_dir.join(&inv_rel), &inversion).at("invert")?;
        out.push(Payload::Inversion(InversionRef {
            id: inv_id.clone(),
            sample_id: sample.id.clone(),
            path: inv_rel,
            steps: inversion.steps(),
            step_errors: inversion.step_errors.clone(),
        }));

        let recon = reconstruct(&inversion, &source, cfg, b.diffusion.as_ref()).at("reconstruct")?;
        let recon_id = self.id(sample, "reconstruction", 0);
        let recon_rel = self.save(&recon_id, &recon).at("reconstruct")?;
        out.push(Payload::Reconstruction(ReconstructionRecord {
            id: recon_id,
            sample_id: sample.id.clone(),
            label_id: sample.label_id,
            label_text: sample.label_text.clone(),
            perturbation_type: NO_PERTURBATION.to_string(),
            image_path: recon_rel,
            inversion_ref: inv_id,
            inversion_error: inversion.total_error(),
        }));

        let mut ordinals: BTreeMap<PerturbationType, usize> = BTreeMap::new();
        for e in edits.iter().filter(|e| e.gates_passed()) {
            let ordinal = ordinals.entry(e.perturbation_type).or_insert(0);
            let cf_id = self.id(sample, &format!("{}-cf", e.perturbation_type), *ordinal);
            *ordinal += 1;
            let outcome = sweep_edit(&inversion, &image, &caption.text, e, cfg, b.diffusion.as_ref(), b.joint_embed.as_ref())
                .at("edit")?;
            let path = match &outcome.image {
                Some(img) => Some(self.save(&cf_id, img).at("edit")?),
                None => None,
            };
            let record = CounterfactualRecord::from_sweep(cf_id, e, sample.label_id, &sample.label_text, &caption.text, &outcome, path);
            out.push(Payload::Counterfactual(record));
        }
        Ok(out)
    }

    fn propose(&self, sample: &TestSample, caption: &Caption) -> Result<Vec<CaptionEdit>> {
        let cfg = self.config;
        let b = &self.backends;
        match self.baseline {
            Baseline::Lance => {
                let mut edits = Vec::new();
                for (t, n) in plan_types(cfg.mode, cfg.n_max_perturbations, cfg.seed, &sample.id) {
                    let make_id = |i: usize| self.id(sample, t.as_str(), i);
                    let outcome = perturb(caption, t, n, b.language_model.as_ref(), &make_id)?;
                    edits.extend(outcome.edits);
                }
                Ok(edits)
            }
            Baseline::LanceR => {
                let stop = StopWords::builtin();
                let mut edits = Vec::new();
                for i in 0..cfg.n_max_perturbations {
                    let id = self.id(sample, PerturbationType::Random.as_str(), i);
                    let seed = sample_seed(cfg.seed, &sample.id, i + 1);
                    let e = random_perturb(id, caption, b.masked_fill.as_ref(), stop, seed)?;
                    if !edits.iter().any(|x: &CaptionEdit| x.edited_caption == e.edited_caption) {
                        edits.push(e);
                    }
                }
                Ok(edits)
            }
        }
    }

    fn invert(&self, image: &Image, caption: &Caption) -> Result<(InversionResult, crate::backends::Conditioning)> {
        let cfg = self.config;
        let d = self.backends.diffusion.as_ref();
        let schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        let z0 = d.encode(image)?;
        let cond = d.embed_prompt(&caption.text)?;
        let nt = NullTextConfig {
            guidance_scale: cfg.guidance_scale,
            inner_steps: cfg.null_text_inner_steps,
            learning_rate: cfg.null_text_learning_rate,
            early_stop: cfg.null_text_early_stop,
            seed: cfg.seed,
            ..NullTextConfig::default()
        };
        let inv = invert(&z0, &cond, &schedule, d, cfg.inversion_guidance_scale, &nt)?;
        Ok((inv, cond))
    }

    fn save(&self, id: &str, img: &Image) -> Result<String> {
        let rel = format!("{IMAGES_DIR}/{id}.png");
        save_image(&self.out_dir.join(&rel), img)?;
        Ok(rel)
    }
}

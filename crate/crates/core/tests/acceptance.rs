//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `LANCE_BLESS_GOLDEN=1` to rewrite `tests/golden/manifest.jsonl`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use lance_core::backends::stub::{make_stub_suite, StubSentenceEmbed};
use lance_core::backends::{
    AttentionControl, Conditioning, DiffusionBackend, Image, LanguageModelBackend, Latent, TokenLogprob,
};
use lance_core::captioning::Caption;
use lance_core::diffusion::{
    ddim_invert, ddim_sample, ddim_step, make_schedule, optimize_null_text, Direction,
    InversionResult, NullTextConfig, NullTextStep,
};
use lance_core::evaluation::{acc_at_k, delta_acc, evaluate_run, fid, perplexity, ReportOptions};
use lance_core::fixtures::write_fixture_suite;
use lance_core::gates::{directional_similarity, gate_label_similarity, gate_span_similarity};
use lance_core::insights::{cluster_edits, coordinate_median};
use lance_core::model::{DecodeConfig, PerturbationType, PipelineConfig, RunView};
use lance_core::perturbation::CaptionEdit;
use lance_core::pipeline::{resume, run_lance, RunOptions, MANIFEST_FILE};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1

fn correctness(n: usize, hits: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let preds = (0..n)
        .map(|i| if i < hits { vec![0.9, 0.1] } else { vec![0.1, 0.9] })
        .collect();
    (preds, vec![0; n])
}

fn metric_arithmetic() -> Check {
    let (t, tl) = correctness(10_000, 7_986);
    let (tp, tpl) = correctness(10_000, 7_401);
    let a = acc_at_k(&t, &tl, 1).map_err(err)?;
    let b = acc_at_k(&tp, &tpl, 1).map_err(err)?;
    let d = delta_acc(&t, &tl, &tp, &tpl, 1).map_err(err)?;
    ensure!((a - 0.7986).abs() < 1e-12 && (b - 0.7401).abs() < 1e-12, "accuracies {a} and {b}");
    ensure!((d + 0.0585).abs() < 1e-6, "delta acc@1 = {d}");
    let shown = format!("{:.2}{:.1}", 100.0 * b, 100.0 * d);
    ensure!(shown == "74.01-5.8", "displayed as {shown}");
    Ok(format!("acc@1 0.7986 -> 0.7401, delta {d:.6} (shown {shown})"))
}

// 2

fn scheduler() -> Check {
    let s = make_schedule(50, 0.00085, 0.012).map_err(err)?;
    let (b0, b1) = (s.betas[0], s.betas[49]);
    ensure!((b0 - 0.00085).abs() < 1e-12 && (b1 - 0.012).abs() < 1e-12, "endpoints {b0} {b1}");
    ensure!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]), "alpha bar not strictly decreasing");
    Ok(format!("beta_1 = {b0:e}, beta_50 = {b1:e}, alpha_bar strictly decreasing"))
}

// 3, 4: a linear noise predictor `eps(z, k, c) = a z + W c`.

struct LinearToy {
    a: f64,
    w: Vec<Vec<f64>>,
    null: Conditioning,
}

impl LinearToy {
    fn new(latent_dim: usize, cond_dim: usize, a: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..latent_dim)
            .map(|_| (0..cond_dim).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let null = Conditioning((0..cond_dim).map(|_| rng.sample(StandardNormal)).collect());
        Self { a, w, null }
    }
}

impl DiffusionBackend for LinearToy {
    fn encode(&self, _: &Image) -> lance_core::Result<Latent> {
        Err(lance_core::Error::Contract("toy has no image space".into()))
    }

    fn decode(&self, _: &Latent) -> lance_core::Result<Image> {
        Err(lance_core::Error::Contract("toy has no image space".into()))
    }

    fn embed_prompt(&self, _: &str) -> lance_core::Result<Conditioning> {
        Ok(self.null.clone())
    }

    fn predict_noise(&self, z: &Latent, _: usize, c: &Conditioning) -> lance_core::Result<Latent> {
        let data = z
            .data
            .iter()
            .zip(&self.w)
            .map(|(z, row)| self.a * z + row.iter().zip(&c.0).map(|(w, c)| w * c).sum::<f64>())
            .collect();
        Ok(z.with_data(data))
    }

    fn noise_vjp(&self, _: &Latent, _: usize, c: &Conditioning, cot: &[f64]) -> lance_core::Result<Option<Vec<f64>>> {
        let mut out = vec![0.0; c.len()];
        for (row, v) in self.w.iter().zip(cot) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        Ok(Some(out))
    }

    fn edit_with_attention_control(
        &self,
        _: &InversionResult,
        _: &Conditioning,
        _: &Conditioning,
        _: &AttentionControl,
    ) -> lance_core::Result<Image> {
        Err(lance_core::Error::Contract("toy cannot edit".into()))
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn ddim_round_trip() -> Check {
    let s = make_schedule(50, 0.00085, 0.012).map_err(err)?;
    let toy = LinearToy::new(16, 8, 1e-4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0 = Latent::flat(gaussian_vec(&mut rng, 16));
    let cond = Conditioning(gaussian_vec(&mut rng, 8));
    let traj = ddim_invert(&z0, &cond, &s, &toy, 1.0).map_err(err)?;
    let nulls = vec![toy.null.clone(); 50];
    let back = ddim_sample(&traj[50], &cond, &nulls, &s, &toy, 1.0).map_err(err)?;
    let full = max_abs(&back[0].data, &z0.data);
    ensure!(full < 1e-4, "50-step round trip error {full:e}");

    let mut single: f64 = 0.0;
    for k in 1..=50 {
        let eps = Latent::flat(gaussian_vec(&mut rng, 16));
        let down = ddim_step(&z0, &eps, k, &s, Direction::Forward).map_err(err)?;
        let up = ddim_step(&down, &eps, k - 1, &s, Direction::Reverse).map_err(err)?;
        single = single.max(max_abs(&up.data, &z0.data));
    }
    ensure!(single < 1e-10, "single-step error {single:e}");
    Ok(format!("50-step error {full:.2e}, single-step error {single:.2e}"))
}

fn null_text_optimisation() -> Check {
    let s = make_schedule(4, 0.00085, 0.012).map_err(err)?;
    let toy = LinearToy::new(6, 3, 0.01, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z0 = Latent::flat(gaussian_vec(&mut rng, 6));
    let cond = Conditioning(gaussian_vec(&mut rng, 3));
    // a perturbed pivot so no null reproduces it exactly
    let mut traj = ddim_invert(&z0, &cond, &s, &toy, 1.0).map_err(err)?;
    for z in traj.iter_mut().take(4) {
        let bump = gaussian_vec(&mut rng, 6);
        z.data.iter_mut().zip(bump).for_each(|(v, b)| *v += 0.05 * b);
    }
    let config = NullTextConfig {
        guidance_scale: 7.5,
        inner_steps: 4000,
        learning_rate: 0.05,
        early_stop: 0.0,
        ..NullTextConfig::default()
    };
    let result = optimize_null_text(&traj, &cond, &s, &toy, &config).map_err(err)?;
    for (k, h) in result.loss_history.iter().enumerate() {
        ensure!(h.windows(2).all(|w| w[1] <= w[0]), "loss increased at step {}", k + 1);
    }

    let mut z_hat = traj[4].clone();
    let mut worst_gap: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for k in (1..=4).rev() {
        let problem = NullTextStep::new(&toy, &s, k, &z_hat, &traj[k - 1], &cond, 7.5).map_err(err)?;
        let optimised = problem.loss(&result.null_embeddings[k - 1]).map_err(err)?;
        let minimum = ls_minimum(&problem, &traj[k - 1], 3)?;
        worst_gap = worst_gap.max(optimised - minimum);

        let probe = Conditioning(gaussian_vec(&mut rng, 3));
        let (_, analytic) = problem.analytic_gradient(&probe).map_err(err)?.ok_or("no gradient")?;
        let numeric = problem.finite_difference_gradient(&probe, 1e-5, None).map_err(err)?;
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst_grad = worst_grad.max(diff / scale);

        z_hat = problem.step(&result.null_embeddings[k - 1]).map_err(err)?;
    }
    ensure!(worst_gap.abs() < 1e-6, "final loss exceeds the least-squares minimum by {worst_gap:e}");
    ensure!(worst_grad < 1e-5, "gradient relative error {worst_grad:e}");
    Ok(format!(
        "losses non-increasing, gap to LS minimum {worst_gap:.1e}, gradient rel. error {worst_grad:.1e}"
    ))
}

/// Least-squares minimum of one step: the sampled latent is affine in the
/// null, so `S(n) = s0 + M n` and the minimum solves a linear system.
fn ls_minimum(problem: &NullTextStep, target: &Latent, dim: usize) -> Result<f64, String> {
    let zero = Conditioning(vec![0.0; dim]);
    let s0 = problem.step(&zero).map_err(err)?.data;
    let n = s0.len();
    let mut m = DMatrix::zeros(n, dim);
    for j in 0..dim {
        let mut e = zero.clone();
        e.0[j] = 1.0;
        let sj = problem.step(&e).map_err(err)?.data;
        for i in 0..n {
            m[(i, j)] = sj[i] - s0[i];
        }
    }
    let r = DVector::from_iterator(n, target.data.iter().zip(&s0).map(|(t, s)| t - s));
    let x = m.clone().svd(true, true).solve(&r, 1e-14).map_err(|e| e.to_string())?;
    Ok((r - m * x).norm_squared())
}

// 5

fn directional_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 16;
    let z = vec![0.0; dim];
    for i in 0..1000 {
        let a = gaussian_vec(&mut rng, dim);
        let b = gaussian_vec(&mut rng, dim);
        let x = gaussian_vec(&mut rng, dim);
        let c = gaussian_vec(&mut rng, dim);
        let shift = |base: &[f64], d: &[f64], s: f64| -> Vec<f64> { base.iter().zip(d).map(|(p, q)| p + s * q).collect() };

        let par = directional_similarity(&x, &shift(&x, &a, 1.0), &c, &shift(&c, &a, 2.5)).map_err(err)?;
        ensure!((par - 1.0).abs() < 1e-9, "pair {i}: parallel gives {par}");

        let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
        let aa: f64 = a.iter().map(|p| p * p).sum();
        let ortho: Vec<f64> = b.iter().zip(&a).map(|(q, p)| q - dot / aa * p).collect();
        let o = directional_similarity(&z, &a, &z, &ortho).map_err(err)?;
        ensure!(o.abs() < 1e-9, "pair {i}: orthogonal gives {o}");

        let base = directional_similarity(&x, &shift(&x, &a, 1.0), &c, &shift(&c, &b, 1.0)).map_err(err)?;
        let k = rng.random_range(0.01..100.0);
        let scaled = directional_similarity(&x, &shift(&x, &a, k), &c, &shift(&c, &b, 1.0)).map_err(err)?;
        ensure!((base - scaled).abs() < 1e-9, "pair {i}: scaling by {k} moved {base} to {scaled}");

        let flipped = directional_similarity(&shift(&x, &a, 1.0), &x, &c, &shift(&c, &b, 1.0)).map_err(err)?;
        ensure!((base + flipped).abs() < 1e-9, "pair {i}: reversal gives {flipped} for {base}");
    }
    Ok("parallel, orthogonal, scale invariance and antisymmetry hold on 1000 pairs".into())
}

// 6

#[derive(Deserialize)]
struct LabelledEdit {
    label: String,
    caption: String,
    edited: String,
    label_ok: bool,
    span_ok: bool,
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn gate_harness() -> Check {
    let text = std::fs::read_to_string(manifest_dir().join("tests/fixtures/gate_edits.json")).map_err(err)?;
    let cases: Vec<LabelledEdit> = serde_json::from_str(&text).map_err(err)?;
    ensure!(cases.len() == 50, "fixture has {} edits", cases.len());
    let emb = StubSentenceEmbed::new(0);
    let config = PipelineConfig::default();
    let mut edits = Vec::new();
    let mut disagreements = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let cap = Caption::new("c", "s", c.caption.clone(), &DecodeConfig::default()).map_err(err)?;
        let edit = CaptionEdit::from_variant(format!("e{i}"), &cap, PerturbationType::Object, &c.edited).map_err(err)?;
        let l = gate_label_similarity(&edit, &c.label, config.epsilon_label, &emb);
        let s = gate_span_similarity(&edit, config.epsilon_span, &emb);
        if l.passed != c.label_ok || s.passed != c.span_ok {
            disagreements.push(format!(
                "#{i} `{}` -> `{}`: label {:?}/{}, span {:?}/{}",
                c.caption, c.edited, l.score, c.label_ok, s.score, c.span_ok
            ));
        }
        edits.push((edit, c.label.as_str()));
    }
    ensure!(disagreements.is_empty(), "{} disagreements: {}", disagreements.len(), disagreements.join("; "));

    let grid: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
    let mut prev_label: Option<Vec<bool>> = None;
    let mut prev_span: Option<Vec<bool>> = None;
    for &eps in &grid {
        let label: Vec<bool> = edits.iter().map(|(e, l)| gate_label_similarity(e, l, eps, &emb).passed).collect();
        let span: Vec<bool> = edits.iter().map(|(e, _)| gate_span_similarity(e, eps, &emb).passed).collect();
        for (prev, now, name) in [(&prev_label, &label, "label"), (&prev_span, &span, "span")] {
            if let Some(p) = prev {
                ensure!(
                    p.iter().zip(now).all(|(a, b)| !a || *b),
                    "{name} gate: an edit passing below epsilon {eps:.1} fails at it"
                );
            }
        }
        prev_label = Some(label);
        prev_span = Some(span);
    }
    let accepted = cases.iter().filter(|c| c.label_ok && c.span_ok).count();
    Ok(format!("50/50 decisions agree ({accepted} accepted); pass sets grow with epsilon over {} thresholds", grid.len()))
}

// 7

fn fid_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<Vec<f64>> = (0..40).map(|_| gaussian_vec(&mut rng, 4)).collect();
    let same = fid(&a, &a).map_err(err)?;
    ensure!(same.abs() < 1e-8, "identical sets give {same}");

    // symmetric samples with unit variance (unbiased) and means 0 and 1
    let unit: Vec<f64> = {
        let raw: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let m = raw.iter().sum::<f64>() / raw.len() as f64;
        let centred: Vec<f64> = raw.iter().map(|v| v - m).collect();
        let var = centred.iter().map(|v| v * v).sum::<f64>() / (centred.len() - 1) as f64;
        centred.iter().map(|v| v / var.sqrt()).collect()
    };
    let p: Vec<Vec<f64>> = unit.iter().map(|v| vec![*v]).collect();
    let q: Vec<Vec<f64>> = unit.iter().map(|v| vec![*v + 1.0]).collect();
    let shift = fid(&p, &q).map_err(err)?;
    ensure!((shift - 1.0).abs() < 1e-6, "unit mean shift gives {shift}");

    let b: Vec<Vec<f64>> = (0..40).map(|_| gaussian_vec(&mut rng, 4).iter().map(|v| 2.0 * v + 0.5).collect()).collect();
    let ab = fid(&a, &b).map_err(err)?;
    let ba = fid(&b, &a).map_err(err)?;
    ensure!((ab - ba).abs() < 1e-6, "asymmetric: {ab} vs {ba}");

    let rot = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
    let rotate = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
        set.iter()
            .map(|v| (&rot * DVector::from_column_slice(v)).iter().copied().collect())
            .collect()
    };
    let rotated = fid(&rotate(&a), &rotate(&b)).map_err(err)?;
    ensure!((rotated - ab).abs() < 1e-6, "rotation moves {ab} to {rotated}");
    Ok(format!("identical {same:.1e}, unit shift {shift:.9}, symmetric and rotation invariant ({ab:.4})"))
}

// 8

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn partition_cost(points: &[Vec<f64>], mask: u32) -> f64 {
    let mut cost = 0.0;
    for side in [true, false] {
        let members: Vec<&[f64]> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| (mask >> i & 1 == 1) == side)
            .map(|(_, p)| p.as_slice())
            .collect();
        if members.is_empty() {
            return f64::INFINITY;
        }
        let c = coordinate_median(&members);
        cost += members.iter().map(|p| l1(p, &c)).sum::<f64>();
    }
    cost
}

fn kmedians_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut points = Vec::new();
    for centre in [[-5.0, -5.0], [5.0, 5.0]] {
        for _ in 0..6 {
            points.push(vec![centre[0] + rng.random_range(-1.0..1.0), centre[1] + rng.random_range(-1.0..1.0)]);
        }
    }
    let n = points.len();
    // point 0 is fixed on one side, so each partition is seen once
    let best = (0..1u32 << (n - 1))
        .map(|m| m << 1)
        .map(|mask| (partition_cost(&points, mask), mask))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("partitions");
    let oracle: Vec<bool> = (0..n).map(|i| best.1 >> i & 1 == 1).collect();
    let mut iterations = 0;
    for seed in 0..10 {
        let c = cluster_edits(&points, 2, seed).map_err(err)?;
        ensure!(
            c.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12),
            "seed {seed}: inertia rose: {:?}",
            c.inertia_history
        );
        let side: Vec<bool> = c.assignments.iter().map(|&a| a == c.assignments[0]).collect();
        let flipped: Vec<bool> = oracle.iter().map(|o| o == &oracle[0]).collect();
        ensure!(side == flipped, "seed {seed}: partition {:?} differs from brute force", c.assignments);
        ensure!((c.inertia() - best.0).abs() < 1e-9, "seed {seed}: inertia {} vs optimum {}", c.inertia(), best.0);
        iterations = iterations.max(c.iterations);
    }

    let cloud: Vec<Vec<f64>> = (0..9).map(|_| gaussian_vec(&mut rng, 3)).collect();
    let one = cluster_edits(&cloud, 1, 0).map_err(err)?;
    let refs: Vec<&[f64]> = cloud.iter().map(Vec::as_slice).collect();
    // independent median: sort each column
    let expected: Vec<f64> = (0..3)
        .map(|d| {
            let mut col: Vec<f64> = cloud.iter().map(|p| p[d]).collect();
            col.sort_by(f64::total_cmp);
            col[4]
        })
        .collect();
    ensure!(one.centroids[0] == expected, "K=1 centroid {:?} vs median {expected:?}", one.centroids[0]);
    ensure!(coordinate_median(&refs) == expected, "coordinate median disagrees");
    Ok(format!(
        "brute-force optimum over {} partitions recovered for 10 seeds (<= {iterations} iterations); K=1 is the median",
        1u32 << (n - 1)
    ))
}

// 9

struct UniformLm(usize);

impl LanguageModelBackend for UniformLm {
    fn complete(&self, _: &str) -> lance_core::Result<String> {
        Ok(String::new())
    }

    fn token_logprobs(&self, text: &str) -> lance_core::Result<Vec<TokenLogprob>> {
        Ok(text
            .split_whitespace()
            .map(|t| TokenLogprob {
                token: t.to_string(),
                logprob: -(self.0 as f64).ln(),
            })
            .collect())
    }
}

fn perplexity_checks() -> Check {
    let texts: Vec<String> = vec!["a b c".into(), "d e f g h".into(), "i".into()];
    let mut shown = Vec::new();
    for v in [2usize, 100] {
        let p = perplexity(&texts, &UniformLm(v)).map_err(err)?;
        ensure!((p - v as f64).abs() < 1e-9 * v as f64, "V = {v} gives {p}");
        shown.push(format!("V={v}: {p}"));
    }
    Ok(shown.join(", "))
}

// 10

fn golden_path() -> PathBuf {
    manifest_dir().join("tests/golden").join(MANIFEST_FILE)
}

fn generate(suite_dir: &Path, out: &Path, max_samples: Option<usize>) -> Result<(), String> {
    let suite = lance_core::model::TestSuite::load_dir(suite_dir).map_err(err)?;
    let options = RunOptions {
        sync: false,
        max_samples,
        ..RunOptions::default()
    };
    run_lance(&suite, suite_dir, &PipelineConfig::default(), &make_stub_suite(0), out, &options).map_err(err)?;
    Ok(())
}

fn resume_run(out: &Path) -> Result<(), String> {
    let options = RunOptions {
        sync: false,
        ..RunOptions::default()
    };
    resume(out, &PipelineConfig::default(), &make_stub_suite(0), &options).map_err(err)?;
    Ok(())
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn end_to_end() -> Check {
    let root = tempfile::tempdir().map_err(err)?;
    let suite_dir = root.path().join("suite");
    write_fixture_suite(&suite_dir, 10).map_err(err)?;
    let first = root.path().join("first");
    generate(&suite_dir, &first, None)?;
    let manifest = read(&first.join(MANIFEST_FILE))?;

    let golden = golden_path();
    if std::env::var_os("LANCE_BLESS_GOLDEN").is_some() {
        std::fs::create_dir_all(golden.parent().expect("parent")).map_err(err)?;
        std::fs::write(&golden, &manifest).map_err(err)?;
    }
    let expected = read(&golden)?;
    ensure!(manifest == expected, "manifest differs from {}", golden.display());

    let second = root.path().join("second");
    generate(&suite_dir, &second, None)?;
    ensure!(read(&second.join(MANIFEST_FILE))? == expected, "second run differs");

    // clean stop after i samples, then resume
    for i in 0..10 {
        let out = root.path().join(format!("stop{i}"));
        generate(&suite_dir, &out, Some(i))?;
        resume_run(&out)?;
        ensure!(read(&out.join(MANIFEST_FILE))? == expected, "resume after {i} samples differs");
    }
    // hard crash part-way into the next sample: a torn manifest
    let lines: Vec<&str> = expected.lines().collect();
    let boundaries: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.contains("\"kind\":\"sample_done\""))
        .map(|(i, _)| i)
        .collect();
    ensure!(boundaries.len() == 10, "{} sample_done records", boundaries.len());
    for (n, &b) in boundaries.iter().enumerate().take(9) {
        let out = root.path().join(format!("crash{n}"));
        std::fs::create_dir_all(&out).map_err(err)?;
        let mut torn = lines[..=b + 2].join("\n");
        torn.push_str("\n{\"kind\":\"capt");
        std::fs::write(out.join(MANIFEST_FILE), torn).map_err(err)?;
        resume_run(&out)?;
        ensure!(read(&out.join(MANIFEST_FILE))? == expected, "resume after crash in sample {} differs", n + 1);
    }

    let view = RunView::load(&golden).map_err(err)?;
    let mut types: Vec<PerturbationType> = view.counterfactuals.iter().map(|c| c.perturbation_type).collect();
    types.sort();
    types.dedup();
    ensure!(types.len() == 5, "types present: {types:?}");
    let accepted: Vec<_> = view.counterfactuals.iter().filter(|c| c.accepted).collect();
    for c in &accepted {
        ensure!(c.gates.iter().all(|g| g.passed && g.recheck()), "{}: stored gates do not all pass", c.id);
        ensure!(c.revalidate(&view.start.config) == Some(true), "{}: gates do not re-validate", c.id);
    }
    Ok(format!(
        "golden manifest reproduced, 10 clean and 9 torn resumes identical; 5 types, {} accepted records re-validate",
        accepted.len()
    ))
}

// 11

fn reconstruction_control() -> Check {
    let root = tempfile::tempdir().map_err(err)?;
    let suite_dir = root.path().join("suite");
    write_fixture_suite(&suite_dir, 10).map_err(err)?;
    let out = root.path().join("out");
    generate(&suite_dir, &out, None)?;
    let view = RunView::load(&out.join(MANIFEST_FILE)).map_err(err)?;
    let eval = evaluate_run(&view, &out, &make_stub_suite(0), "stub", ReportOptions::default()).map_err(err)?;
    ensure!(eval.failures.is_empty(), "unscored images: {:?}", eval.failures);
    let cell = eval.report.reconstructed.ok_or("no reconstructed suite")?;
    ensure!(cell.n == 10, "{} reconstructions", cell.n);
    let d = cell.delta_acc_at_1.ok_or("no delta")?;
    ensure!(d == 0.0, "reconstruction delta acc@1 = {d}");
    Ok(format!("{} reconstructions, delta acc@1 = {d}", cell.n))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Check); 11] = [
        ("metric arithmetic", 1, metric_arithmetic),
        ("scheduler exactness", 1, scheduler),
        ("DDIM round trip", 5, ddim_round_trip),
        ("null-text optimisation", 30, null_text_optimisation),
        ("directional similarity", 5, directional_properties),
        ("gate harness", 5, gate_harness),
        ("FID", 5, fid_checks),
        ("K-medians", 10, kmedians_checks),
        ("perplexity", 1, perplexity_checks),
        ("end-to-end determinism", 60, end_to_end),
        ("reconstruction control", 10, reconstruction_control),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let mut result = check();
        let elapsed = t.elapsed();
        if result.is_ok() && elapsed > Duration::from_secs(*budget) {
            result = Err(format!("took {elapsed:.2?}, budget {budget} s"));
        }
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use proptest::prelude::*;

use lance_core::backends::stub::make_stub_suite;
use lance_core::backends::{Image, MASK_TOKEN};
use lance_core::captioning::{is_below_minimum, Caption};
use lance_core::diffusion::{ddim_invert, make_schedule, optimize_null_text, NullTextConfig};
use lance_core::edit::{select_largest_passing, SweepCandidate};
use lance_core::evaluation::{acc_at_k, delta_acc, delta_confidence, fid, SuiteKind, Prediction};
use lance_core::fixtures::fixture_image;
use lance_core::gates::{
    directional_similarity, gate_label_similarity, Comparison, GateResult, IMAGE_QUALITY,
};
use lance_core::insights::cluster_edits;
use lance_core::model::{
    DecodeConfig, ErrorRecord, LogicalClock, ManifestWriter, Payload, PerturbationType, PipelineConfig, RunView,
    SampleDone,
};
use lance_core::perturbation::{parse_edit, random_perturb, CaptionEdit, StopWords};
use lance_core::review::{aggregate_ratings, export_suite, RatingBook, RatingRecord};
use lance_core::text::changed_regions;

fn golden() -> &'static RunView {
    static VIEW: OnceLock<RunView> = OnceLock::new();
    VIEW.get_or_init(|| {
        RunView::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/manifest.jsonl")).unwrap()
    })
}

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn probs(classes: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, classes).prop_map(simplex)
}

const WORDS: &[&str] = &["a", "dog", "cat", "on", "the", "red", "sled", "in", "snow", "big"];

fn sentence(max: usize) -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(WORDS), 1..max)
}

/// Longest common subsequence length by the plain quadratic table.
fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { t[i + 1][j + 1] + 1 } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(kinds in prop::collection::vec(0u8..3, 1..20), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = ManifestWriter::open(&path, "r", Box::new(LogicalClock::default())).unwrap().without_sync();
        let mut written = Vec::new();
        for (i, k) in kinds.iter().enumerate() {
            let id = format!("s{i}-{seed}");
            let payload = match k {
                0 => Payload::SampleDone(SampleDone { sample_id: id }),
                1 => Payload::Error(ErrorRecord { sample_id: id, stage: "caption".into(), cause: format!("cause {seed}") }),
                _ => Payload::Prediction(
                    Prediction::new(id.clone(), id, SuiteKind::Original, "stub", 1, simplex(vec![1.0, 2.0, (seed % 7) as f64 + 0.5])).unwrap(),
                ),
            };
            w.append(payload.clone()).unwrap();
            written.push(payload);
        }
        drop(w);
        let contents = lance_core::model::read_manifest(&path).unwrap();
        let read: Vec<Payload> = contents.records.into_iter().map(|r| r.payload).collect();
        prop_assert_eq!(read, written);
    }

    #[test]
    fn config_defaulting_is_idempotent(eps in 0.0f64..=1.0, tau in -1.0f64..=1.0, n in 1usize..10, steps in 1usize..80) {
        let text = format!(r#"{{"epsilon_label": {eps}, "tau_image": {tau}, "n_max_perturbations": {n}, "diffusion_steps": {steps}}}"#);
        let once = PipelineConfig::from_json_str(&text).unwrap();
        let twice = PipelineConfig::from_json_str(&once.to_json_string()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn stubs_honour_their_contracts(seed in any::<u64>(), index in 0usize..40) {
        let b = make_stub_suite(seed);
        let img = fixture_image(index, 8).unwrap();
        let decode = DecodeConfig::default();
        let caption = b.captioner.caption(&img, &decode).unwrap();
        prop_assert!(!caption.trim().is_empty());
        prop_assert_eq!(&caption, &b.captioner.caption(&img, &decode).unwrap());

        for t in b.language_model.token_logprobs(&caption).unwrap() {
            prop_assert!(t.logprob <= 0.0);
        }
        let e = b.sentence_embed.embed(&caption).unwrap();
        prop_assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);

        let masked = format!("a {MASK_TOKEN} on the snow");
        let fills = b.masked_fill.fill(&masked, 8).unwrap();
        prop_assert!(fills.windows(2).all(|w| w[0].score >= w[1].score));

        let p = b.classifier.predict(&img).unwrap();
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);

        let z = b.diffusion.encode(&img).unwrap();
        let back: Image = b.diffusion.decode(&z).unwrap();
        prop_assert_eq!(back.as_raw(), img.as_raw());
        let cond = b.diffusion.embed_prompt(&caption).unwrap();
        prop_assert_eq!(b.diffusion.predict_noise(&z, 3, &cond).unwrap().shape, z.shape.clone());

        let ji = b.joint_embed.embed_image(&img).unwrap();
        let jt = b.joint_embed.embed_text(&caption).unwrap();
        prop_assert_eq!(ji.len(), jt.len());
        prop_assert!(ji.iter().any(|v| *v != 0.0) && jt.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn minimum_length_flag_is_monotone(n in 0usize..200, lo in 0usize..100, extra in 0usize..100) {
        // lowering the minimum never flags an unflagged caption
        if !is_below_minimum(n, lo + extra) {
            prop_assert!(!is_below_minimum(n, lo));
        }
    }

    #[test]
    fn parse_edit_is_symmetric(a in sentence(9), b in sentence(9)) {
        let (a, b) = (a.join(" "), b.join(" "));
        prop_assume!(a != b);
        let fwd = parse_edit(&a, &b).unwrap();
        let rev = parse_edit(&b, &a).unwrap();
        prop_assert_eq!(&fwd.original_span, &rev.edited_span);
        prop_assert_eq!(&fwd.edited_span, &rev.original_span);
        prop_assert_eq!(fwd.multi_span, rev.multi_span);
    }

    #[test]
    fn unchanged_words_form_a_longest_common_subsequence(a in sentence(10), b in sentence(10)) {
        let regions = changed_regions(&a.join(" "), &b.join(" "));
        let mut keep_a = vec![true; a.len()];
        let mut keep_b = vec![true; b.len()];
        for r in &regions {
            keep_a[r.original.start..r.original.end].iter_mut().for_each(|k| *k = false);
            keep_b[r.edited.start..r.edited.end].iter_mut().for_each(|k| *k = false);
        }
        let outside_a: Vec<&str> = a.iter().zip(&keep_a).filter(|(_, k)| **k).map(|(w, _)| *w).collect();
        let outside_b: Vec<&str> = b.iter().zip(&keep_b).filter(|(_, k)| **k).map(|(w, _)| *w).collect();
        prop_assert_eq!(&outside_a, &outside_b);
        prop_assert_eq!(outside_a.len(), lcs_len(&a, &b));
    }

    #[test]
    fn directional_similarity_scales_and_flips(
        di in prop::collection::vec(-5.0f64..5.0, 8),
        dt in prop::collection::vec(-5.0f64..5.0, 8),
        k in 0.01f64..100.0,
    ) {
        prop_assume!(di.iter().map(|v| v * v).sum::<f64>() > 1e-6 && dt.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let z = vec![0.0; 8];
        let base = directional_similarity(&z, &di, &z, &dt).unwrap();
        let scaled: Vec<f64> = dt.iter().map(|v| k * v).collect();
        let neg: Vec<f64> = di.iter().map(|v| -v).collect();
        prop_assert!((directional_similarity(&z, &di, &z, &scaled).unwrap() - base).abs() < 1e-9);
        prop_assert!((directional_similarity(&z, &neg, &z, &dt).unwrap() + base).abs() < 1e-9);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn label_gate_is_monotone_in_epsilon(
        a in sentence(7), b in sentence(7), lo in 0.0f64..1.0, hi in 0.0f64..1.0,
    ) {
        let (a, b) = (a.join(" "), b.join(" "));
        prop_assume!(a != b);
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let cap = Caption::new("c", "s", a, &DecodeConfig::default()).unwrap();
        let Ok(edit) = CaptionEdit::from_variant("e", &cap, PerturbationType::Object, &b) else {
            return Ok(());
        };
        let emb = lance_core::backends::stub::StubSentenceEmbed::new(0);
        let at_lo = gate_label_similarity(&edit, "dog sled", lo, &emb);
        let at_hi = gate_label_similarity(&edit, "dog sled", hi, &emb);
        prop_assert!(!at_lo.passed || at_hi.passed);
        prop_assert_eq!(at_lo.recheck(), at_lo.passed);
        prop_assert_eq!(at_hi.recheck(), at_hi.passed);
    }

    #[test]
    fn largest_passing_f_is_monotone_in_tau(
        phis in prop::collection::vec(-1.0f64..1.0, 6), lo in -1.0f64..1.0, hi in -1.0f64..1.0,
    ) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let cands = |tau: f64| -> Vec<SweepCandidate> {
            phis.iter().enumerate().map(|(i, &phi)| SweepCandidate {
                f: 0.4 + 0.1 * i as f64,
                gates: vec![GateResult::evaluate(IMAGE_QUALITY, phi, tau, Comparison::AtLeast)],
                phi_cosine: Some(phi),
                error: None,
            }).collect()
        };
        let (strict, loose) = (cands(hi), cands(lo));
        let pass = |c: &[SweepCandidate]| c.iter().filter(|c| c.passed()).map(|c| c.f.to_bits()).collect::<BTreeSet<_>>();
        prop_assert!(pass(&strict).is_subset(&pass(&loose)));
        let pick = |c: &[SweepCandidate]| select_largest_passing(c).map(|i| c[i].f);
        prop_assert_eq!(pick(&strict), pick(&cands(hi)));
        if let Some(f) = pick(&strict) {
            prop_assert!(pick(&loose).unwrap() >= f);
        }
    }

    #[test]
    fn accuracy_grows_with_k(preds in prop::collection::vec(probs(6), 1..20), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..preds.len()).map(|i| (seed as usize + i) % 6).collect();
        let accs: Vec<f64> = (1..=6).map(|k| acc_at_k(&preds, &labels, k).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(accs[5], 1.0);
    }

    #[test]
    fn delta_acc_is_antisymmetric(a in prop::collection::vec(probs(4), 1..15), b in prop::collection::vec(probs(4), 1..15)) {
        let la: Vec<usize> = (0..a.len()).map(|i| i % 4).collect();
        let lb: Vec<usize> = (0..b.len()).map(|i| (i + 1) % 4).collect();
        prop_assert_eq!(delta_acc(&a, &la, &a, &la, 1).unwrap(), 0.0);
        let ab = delta_acc(&a, &la, &b, &lb, 2).unwrap();
        let ba = delta_acc(&b, &lb, &a, &la, 2).unwrap();
        prop_assert!((ab + ba).abs() < 1e-12);
    }

    #[test]
    fn delta_confidence_is_a_probability(p in probs(5), q in probs(5), label in 0usize..5) {
        let d = delta_confidence(&p, &q, label).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn fid_is_symmetric(a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..12),
                        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..12)) {
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn kmedians_is_monotone_seeded_and_order_free(
        points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 3..25),
        k in 1usize..4, seed in any::<u64>(), rotate in 0usize..25,
    ) {
        prop_assume!(k <= points.len());
        let c = cluster_edits(&points, k, seed).unwrap();
        prop_assert!(c.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        prop_assert_eq!(&c, &cluster_edits(&points, k, seed).unwrap());
        let mut moved = points.clone();
        moved.rotate_left(rotate % points.len());
        let m = cluster_edits(&moved, k, seed).unwrap();
        prop_assert!((m.inertia() - c.inertia()).abs() < 1e-9, "{} vs {}", m.inertia(), c.inertia());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn null_text_never_worsens_reconstruction(seed in any::<u64>(), steps in 2usize..12) {
        let b = make_stub_suite(seed);
        let img = fixture_image((seed % 10) as usize, 4).unwrap();
        let z0 = b.diffusion.encode(&img).unwrap();
        let cond = b.diffusion.embed_prompt("a dog sled in the snow").unwrap();
        let s = make_schedule(steps, 0.00085, 0.012).unwrap();
        let traj = ddim_invert(&z0, &cond, &s, b.diffusion.as_ref(), 1.0).unwrap();
        let plain = NullTextConfig { inner_steps: 0, ..NullTextConfig::default() };
        let base = optimize_null_text(&traj, &cond, &s, b.diffusion.as_ref(), &plain).unwrap();
        let tuned = optimize_null_text(&traj, &cond, &s, b.diffusion.as_ref(), &NullTextConfig::default()).unwrap();
        prop_assert!(tuned.total_error() <= base.total_error() + 1e-12);
        prop_assert!(tuned.step_errors.iter().all(|e| *e >= 0.0));
        prop_assert_eq!(tuned.trajectory.len(), steps + 1);
    }

    #[test]
    fn aggregates_recompute_from_raw_ratings(
        scores in prop::collection::vec((0usize..12, 0usize..3, 1u8..=5, 1u8..=5, 1u8..=5, any::<bool>()), 1..40),
    ) {
        let view = golden();
        let records: Vec<_> = view.counterfactuals.iter().filter(|c| c.accepted).take(12).cloned().collect();
        let mut book = RatingBook::default();
        for (i, (rec, rater, r, e, f, ex)) in scores.iter().enumerate() {
            book.put(RatingRecord {
                record_id: records[rec % records.len()].id.clone(),
                rater_id: format!("r{rater}"),
                realism: *r,
                edit_success: *e,
                fidelity: *f,
                label_consistent: i % 2 == 0,
                ethical_issue: String::new(),
                excluded: *ex,
                timestamp: String::new(),
            });
        }
        // independent recomputation: last write per (record, rater), mean per item, then across items
        let mut last = std::collections::BTreeMap::new();
        for (rec, rater, r, _, _, ex) in &scores {
            last.insert((records[rec % records.len()].id.clone(), *rater), (*r as f64, *ex));
        }
        let mut per_item: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for ((id, _), (r, _)) in &last {
            per_item.entry(id.clone()).or_default().push(*r);
        }
        let means: Vec<f64> = per_item.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
        let agg = aggregate_ratings(&book, &records);
        let overall = agg.overall.unwrap();
        prop_assert_eq!(overall.n_items, means.len());
        prop_assert!((overall.realism.mean - mean).abs() < 1e-12);
        prop_assert!((overall.realism.std - std).abs() < 1e-12);

        let excluded: BTreeSet<String> = last.iter().filter(|(_, (_, ex))| *ex).map(|((id, _), _)| id.clone()).collect();
        let out = PathBuf::from("/out");
        let a = export_suite(view, &book, &out).unwrap();
        let b = export_suite(view, &book, &out).unwrap();
        prop_assert_eq!(&a, &b);
        let kept: BTreeSet<String> = a.samples.iter().map(|s| s.id.clone()).collect();
        let accepted: BTreeSet<String> = view.counterfactuals.iter().filter(|c| c.accepted).map(|c| c.id.clone()).collect();
        prop_assert_eq!(kept, accepted.difference(&excluded).cloned().collect::<BTreeSet<_>>());
    }
}

#[test]
fn random_perturb_never_picks_a_stop_word() {
    let stop = StopWords::builtin();
    let fill = make_stub_suite(0).masked_fill;
    let captions = [
        "a dog sled is standing in the snow with a man",
        "there is a red car parked on the street next to a tree",
        "an old monkey sitting on a branch of the tall tree",
    ];
    for (ci, text) in captions.iter().enumerate() {
        let cap = Caption::new("c", "s", text.to_string(), &DecodeConfig::default()).unwrap();
        for seed in 0..334u64 {
            let e = random_perturb("e", &cap, fill.as_ref(), stop, seed + 1000 * ci as u64).unwrap();
            let word = lance_core::text::normalize_word(&e.original_span.text);
            assert!(!stop.contains(&word), "seed {seed} chose stop word `{word}`");
        }
    }
}

#[test]
fn accepted_records_pass_every_gate_and_respect_the_size_bound() {
    let view = golden();
    for c in view.counterfactuals.iter().filter(|c| c.accepted) {
        assert!(c.gates.iter().all(|g| g.passed), "{}", c.id);
        let f = c.f_selected.unwrap();
        assert!(view.start.config.f_sweep.contains(&f), "{}: f {f}", c.id);
    }
    let n = view.start.config.n_max_perturbations;
    assert!(view.counterfactuals.len() <= n * view.start.samples.len());
}

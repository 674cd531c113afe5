//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Runs as a plain binary so the verdict lines are always printed; exits
//! non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use etrack_core::analysis::{ablate, attribute, AblationSpec, RelevanceKind};
use etrack_core::baselines::{predict_baseline, BaselineKind};
use etrack_core::corpus::{build_vocab, load_corpus, EntityTrack, Labels, Process, Step, TaskKind};
use etrack_core::crf::{expand_gold, log_partition, viterbi, SurfaceTag, TagLattice, TagSet};
use etrack_core::harness::synthetic::{is_label_verb, synthetic_recipes};
use etrack_core::harness::{evaluate, finetune, Checkpoint, TrainConfig};
use etrack_core::heads::HeadKind;
use etrack_core::metrics::{score_propara, score_recipes, QueryCounts, RecipesGold};
use etrack_core::model::{Model, ModelSpec};
use etrack_core::params::Parameters;
use etrack_core::templating::{TemplateVariant, Templater};
use etrack_core::transformer::{
    forward, ForwardOptions, MaskMode, ModelConfig, Precision, TransformerParams,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and thresholds.
const VITERBI_SCORE_TOL: f64 = 1e-9;
const LOG_Z_TOL: f64 = 1e-8;
const FD_EPS: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Absolute floor for gradients that are structurally zero.
const FD_ABS_FLOOR: f64 = 1e-8;
const CONVEXITY_TOL: f64 = 1e-12;
const ORACLE_REL_TOL: f64 = 1e-6;
const DOC_FIRST_MIN_ACC: f64 = 0.95;
const POST_INDEP_MAX_ACC: f64 = 0.75;
const ABLATION_GAP: f64 = 0.05;
const ATTRIBUTION_MIN_HIT: f64 = 0.80;

const CRF_BUDGET: Duration = Duration::from_secs(60);
const FD_BUDGET: Duration = Duration::from_secs(300);
const LEARNING_BUDGET: Duration = Duration::from_secs(600);

type Verdict = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Verdict {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

// ---------------------------------------------------------------------------
// CRF oracles

fn oracle_allowed(from: usize, to: usize) -> bool {
    // O_B, C, E, M, D, O_A
    match from {
        0 => matches!(to, 0 | 1),
        1..=3 => matches!(to, 2..=4),
        4 | 5 => to == 5,
        _ => false,
    }
}

fn random_lattice(rng: &mut ChaCha8Rng, t: usize, scale: f64) -> TagLattice {
    let pot = Array2::from_shape_simple_fn((t, 6), || rng.random_range(-scale..scale));
    let tr = Array2::from_shape_simple_fn((6, 6), || rng.random_range(-scale..scale));
    TagLattice::new(pot, tr).unwrap()
}

/// Every valid path with its score, by exhaustive enumeration.
fn enumerate(lat: &TagLattice) -> Vec<(Vec<usize>, f64)> {
    let t = lat.potentials.nrows();
    let mut out = Vec::new();
    let total = 6usize.pow(t as u32);
    'paths: for code in 0..total {
        let mut path = Vec::with_capacity(t);
        let mut c = code;
        for _ in 0..t {
            path.push(c % 6);
            c /= 6;
        }
        if path[0] == 5 {
            continue;
        }
        let mut score = lat.potentials[[0, path[0]]];
        for i in 1..t {
            if !oracle_allowed(path[i - 1], path[i]) {
                continue 'paths;
            }
            score += lat.transitions[[path[i - 1], path[i]]] + lat.potentials[[i, path[i]]];
        }
        out.push((path, score));
    }
    out
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_score, mut worst_z) = (0.0f64, 0.0f64);
    let mut path_mismatch = 0;
    for k in 0..1000 {
        let t = 1 + k % 6;
        let lat = random_lattice(&mut rng, t, 3.0);
        let paths = enumerate(&lat);
        let (best_path, best) = paths
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .cloned()
            .expect("some valid path");
        let max = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + paths.iter().map(|p| (p.1 - max).exp()).sum::<f64>().ln();
        let dec = viterbi(&lat);
        worst_score = worst_score.max((dec.score - best).abs());
        worst_z = worst_z.max((log_partition(&lat) - log_z).abs());
        let got: Vec<usize> = dec.path.iter().map(|t| t.index()).collect();
        if got != best_path {
            path_mismatch += 1;
        }
    }
    let el = start.elapsed();
    let msg = format!(
        "CRF oracle: 1000 lattices, max |Δscore| {worst_score:.2e} (tol {VITERBI_SCORE_TOL:e}), max |ΔlogZ| {worst_z:.2e} (tol {LOG_Z_TOL:e}), argmax mismatches {path_mismatch}, {:.1}s",
        el.as_secs_f64()
    );
    check(
        worst_score <= VITERBI_SCORE_TOL
            && worst_z <= LOG_Z_TOL
            && path_mismatch == 0
            && el < CRF_BUDGET,
        msg.clone(),
        msg,
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mask = TagSet::lifecycle();
    let mut bad = 0;
    for k in 0..10_000 {
        let t = 1 + k % 12;
        // wide score range so decodes are pushed toward invalid tags
        let lat = random_lattice(&mut rng, t, 20.0);
        let dec = viterbi(&lat);
        let path: Vec<usize> = dec.path.iter().map(|t| t.index()).collect();
        let oracle_ok = path[0] != 5 && path.windows(2).all(|w| oracle_allowed(w[0], w[1]));
        let surface_ok = expand_gold(&dec.tags).is_ok();
        let created_twice = dec.tags.iter().filter(|&&t| t == SurfaceTag::C).count() > 1;
        if !oracle_ok || !mask.is_valid_path(&dec.path) || !surface_ok || created_twice {
            bad += 1;
        }
    }
    let msg = format!("lifecycle safety: 10000 decodes, {bad} invalid sequences");
    check(bad == 0, msg.clone(), msg)
}

// ---------------------------------------------------------------------------
// Gradients

fn fd_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        max_positions: 40,
        mask_mode: MaskMode::Causal,
        precision: Precision::F64,
        init_std: 0.2,
        ..ModelConfig::default()
    }
}

fn fd_recipe() -> Process {
    Process {
        id: "fd-r".into(),
        task: TaskKind::Recipes,
        steps: [
            "melt the butter in a pan",
            "add the flour and sugar",
            "stir the mixture well",
        ]
        .iter()
        .map(|s| Step::from_text(s))
        .collect(),
        entities: vec![
            EntityTrack::new("butter", Labels::Presence(vec![true, false, true]), None),
            EntityTrack::new("flour", Labels::Presence(vec![false, true, true]), None),
        ],
    }
}

fn fd_propara() -> Process {
    use etrack_core::crf::SurfaceTag::*;
    Process {
        id: "fd-p".into(),
        task: TaskKind::ProPara,
        steps: [
            "water flows into the cloud",
            "the cloud cools and water freezes",
            "ice forms from water",
        ]
        .iter()
        .map(|s| Step::from_text(s))
        .collect(),
        entities: vec![
            EntityTrack::new("water", Labels::Tags(vec![M, E, D]), None),
            EntityTrack::new("ice", Labels::Tags(vec![O, O, C]), None),
        ],
    }
}

/// Checks a sample of coordinates in every tensor, always including the
/// largest-gradient coordinate. Returns the tensor count and any failures.
fn fd_groups(
    p: &Process,
    variant: TemplateVariant,
    head: HeadKind,
    lambda: f64,
) -> (usize, Vec<String>) {
    let vocab = build_vocab(std::slice::from_ref(p), 1);
    let spec = ModelSpec::new(variant, head, p.task).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = Model::init(&fd_model_config(vocab.len()), spec, &mut rng).unwrap();
    model
        .transitions
        .iter_mut()
        .for_each(|x| *x = rng.random_range(-1.0..1.0));
    let tp = Templater::default();
    let loss = |m: &Model| m.loss_and_grad(p, &vocab, &tp, lambda, None).unwrap().loss;
    let grads = model
        .loss_and_grad(p, &vocab, &tp, lambda, None)
        .unwrap()
        .grads;
    let sizes: Vec<usize> = grads.tensors().iter().map(|t| t.data.len()).collect();
    let names: Vec<String> = grads.tensors().iter().map(|t| t.name.clone()).collect();
    let flat: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut failures = Vec::new();
    for (ti, size) in sizes.iter().enumerate() {
        let argmax = (0..*size)
            .max_by(|&a, &b| flat[ti][a].abs().total_cmp(&flat[ti][b].abs()))
            .unwrap();
        let mut coords = vec![argmax];
        coords.extend((0..4).map(|_| rng.random_range(0..*size)));
        for k in coords {
            let mut plus = model.clone();
            plus.tensors_mut()[ti][k] += FD_EPS;
            let mut minus = model.clone();
            minus.tensors_mut()[ti][k] -= FD_EPS;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_EPS);
            let a = flat[ti][k];
            if (fd - a).abs() > FD_REL_TOL * fd.abs().max(a.abs()) + FD_ABS_FLOOR {
                failures.push(format!(
                    "{variant:?}/{head:?} {}[{k}]: fd {fd:.6e} analytic {a:.6e}",
                    names[ti]
                ));
            }
        }
    }
    (sizes.len(), failures)
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let r = fd_recipe();
    let p = fd_propara();
    let runs = [
        (&r, TemplateVariant::DocFirst, HeadKind::Conditioned, 0.5),
        (&r, TemplateVariant::PostCond, HeadKind::Indep, 0.5),
        (&r, TemplateVariant::PostCond, HeadKind::Attn, 0.5),
        (&p, TemplateVariant::SentFirst, HeadKind::Conditioned, 0.5),
        (&p, TemplateVariant::PostCond, HeadKind::Indep, 0.0),
        (&p, TemplateVariant::PostCond, HeadKind::Attn, 0.0),
    ];
    let mut groups = 0;
    let mut failures = Vec::new();
    for (proc_, v, h, l) in runs {
        let (g, f) = fd_groups(proc_, v, h, l);
        groups += g;
        failures.extend(f);
    }
    let el = start.elapsed();
    let msg = format!(
        "gradients: {groups} tensor groups over 6 head/loss paths (ε={FD_EPS:e}, rel tol {FD_REL_TOL:e}), {} failures, {:.1}s{}",
        failures.len(),
        el.as_secs_f64(),
        failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
    );
    check(failures.is_empty() && el < FD_BUDGET, msg.clone(), msg)
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = ModelConfig {
        vocab_size: 30,
        max_positions: 24,
        precision: Precision::F64,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let params = TransformerParams::init(&cfg, &mut rng);
    let mut violations = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=24usize);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(1..30)).collect();
        let i = rng.random_range(0..n - 1);
        let mut edited = ids.clone();
        for slot in edited.iter_mut().skip(i + 1) {
            if rng.random_bool(0.7) {
                *slot = rng.random_range(1..30);
            }
        }
        let j = rng.random_range(i + 1..n);
        edited[j] = (ids[j] % 29) + 1;
        let a = forward(&params, &cfg, &ids, ForwardOptions::default()).unwrap();
        let b = forward(&params, &cfg, &edited, ForwardOptions::default()).unwrap();
        for pos in 0..=i {
            if a.states.row(pos) != b.states.row(pos) || a.logits.row(pos) != b.logits.row(pos) {
                violations += 1;
                break;
            }
        }
    }
    let msg = format!(
        "causality: 100 perturbation trials, {violations} prefixes changed (exact equality)"
    );
    check(violations == 0, msg.clone(), msg)
}

// ---------------------------------------------------------------------------
// Templates, metrics, baselines

fn criterion_5() -> Verdict {
    let golden = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/templates.txt"),
    )
    .map_err(|e| e.to_string())?;
    let mut sections: Vec<(String, Vec<String>)> = Vec::new();
    for line in golden
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
    {
        if let Some(name) = line
            .strip_prefix('[')
            .and_then(|l| l.strip_suffix(']'))
            .filter(|n| !n.contains(' '))
        {
            sections.push((name.to_string(), Vec::new()));
        } else {
            sections
                .last_mut()
                .ok_or("line before section")?
                .1
                .push(line.to_string());
        }
    }
    let p = Process {
        id: "golden".into(),
        task: TaskKind::Recipes,
        steps: ["melt the butter", "add flour", "stir well"]
            .iter()
            .map(|s| Step::from_text(s))
            .collect(),
        entities: vec![
            EntityTrack::new("butter", Labels::Presence(vec![true; 3]), None),
            EntityTrack::new("flour", Labels::Presence(vec![true; 3]), None),
        ],
    };
    let vocab = build_vocab(std::slice::from_ref(&p), 1);
    let (t, m) = (3, 2);
    let mut problems = Vec::new();
    for (name, expected) in &sections {
        let variant: TemplateVariant =
            serde_json::from_value(serde_json::Value::String(name.clone())).unwrap();
        let encs = Templater::default()
            .instances_for_task(&p, variant, &vocab)
            .unwrap();
        let want_count = match variant {
            TemplateVariant::SentFirst | TemplateVariant::SentLast => t * m,
            TemplateVariant::DocFirst | TemplateVariant::DocLast => m,
            TemplateVariant::PostCond => t,
        };
        if encs.len() != want_count || expected.len() != want_count {
            problems.push(format!(
                "{name}: {} instances, expected {want_count}",
                encs.len()
            ));
        }
        for (enc, want) in encs.iter().zip(expected) {
            let got = enc.render(&vocab);
            if &got != want {
                problems.push(format!("{name}: `{got}` != `{want}`"));
            }
            let cls: Vec<usize> = want
                .split(' ')
                .enumerate()
                .filter(|(_, w)| *w == "[CLS]")
                .map(|(i, _)| i)
                .collect();
            let anchors: Vec<usize> = enc.anchors.iter().map(|a| a.position).collect();
            if cls != anchors {
                problems.push(format!(
                    "{name}: anchors {anchors:?} != [CLS] positions {cls:?}"
                ));
            }
        }
    }
    let msg = format!(
        "templates: {} golden variants, {} mismatches{}",
        sections.len(),
        problems.len(),
        problems
            .first()
            .map(|p| format!("; first: {p}"))
            .unwrap_or_default()
    );
    check(sections.len() == 5 && problems.is_empty(), msg.clone(), msg)
}

fn grid(rows: &[&[u8]]) -> Vec<Vec<bool>> {
    rows.iter()
        .map(|r| r.iter().map(|&b| b == 1).collect())
        .collect()
}

fn criterion_6() -> Verdict {
    use etrack_core::crf::SurfaceTag::*;
    let mut problems = Vec::new();
    let g = RecipesGold {
        labels: grid(&[&[0, 1, 1], &[1, 1, 0]]),
        combined: vec![None, None],
    };
    let r = score_recipes(&[g], &[grid(&[&[0, 1, 0], &[1, 1, 1]])]).unwrap();
    let c = r.counts;
    if (c.tp, c.fp, c.fn_) != (3, 1, 1)
        || r.precision != Some(0.75)
        || r.recall != Some(0.75)
        || r.f1 != Some(0.75)
        || r.accuracy != Some(4.0 / 6.0)
    {
        problems.push(format!("hand fixture gave {r:?}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut convexity_worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..5);
        let t = rng.random_range(1..8);
        let mut bits = |p: f64| -> Vec<Vec<bool>> {
            (0..m)
                .map(|_| (0..t).map(|_| rng.random_bool(p)).collect())
                .collect()
        };
        let labels = bits(0.6);
        let combined = bits(0.4);
        let pred = bits(0.5);
        let gold = RecipesGold {
            labels,
            combined: combined.into_iter().map(Some).collect(),
        };
        let r = score_recipes(&[gold], &[pred]).unwrap();
        let c = r.counts;
        let (nu, nc) = (c.uncombined_positive as f64, c.combined_positive as f64);
        if c.uncombined_tp + c.combined_tp != c.tp
            || c.uncombined_positive + c.combined_positive != c.tp + c.fn_
        {
            problems.push(format!("count identity broken: {c:?}"));
        }
        if let Some(rec) = r.recall {
            let lhs = rec * (nu + nc);
            let rhs =
                r.uncombined_recall.unwrap_or(0.0) * nu + r.combined_recall.unwrap_or(0.0) * nc;
            convexity_worst = convexity_worst.max((lhs - rhs).abs());
        }
    }
    if convexity_worst > CONVEXITY_TOL {
        problems.push(format!("convexity residual {convexity_worst:e}"));
    }

    let perfect = score_propara(&[vec![O, C, E, D, O]], &[vec![O, C, E, D, O]]).unwrap();
    if perfect.cat1_by_event.total()
        != (QueryCounts {
            correct: 3,
            total: 3,
        })
        || perfect.cat2_by_event.total()
            != (QueryCounts {
                correct: 2,
                total: 2,
            })
    {
        problems.push(format!("propara perfect fixture gave {perfect:?}"));
    }
    let shifted = score_propara(&[vec![O, C, E, D, O]], &[vec![O, O, C, D, O]]).unwrap();
    if shifted.cat1_by_event.total()
        != (QueryCounts {
            correct: 3,
            total: 3,
        })
        || shifted.cat2_by_event.total()
            != (QueryCounts {
                correct: 1,
                total: 2,
            })
    {
        problems.push(format!("propara shifted fixture gave {shifted:?}"));
    }
    let empty = score_propara(&[vec![E, E, E]], &[vec![E, E, E]]).unwrap();
    if empty.cat1 != Some(1.0) || empty.cat2_by_event.total().total != 0 {
        problems.push(format!("propara empty-event fixture gave {empty:?}"));
    }
    let msg = format!(
        "metrics: hand fixture, 100 convexity grids (max residual {convexity_worst:.1e}, tol {CONVEXITY_TOL:e}), 3 ProPara fixtures; {} problems{}",
        problems.len(),
        problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
    );
    check(problems.is_empty(), msg.clone(), msg)
}

/// Hand-derived baseline grids for the fixture corpus: (exact, first-occ).
fn expected_baselines(id: &str) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let (e, f): (&[&[u8]], &[&[u8]]) = match id {
        "r01" => (&[&[1, 0, 1], &[0, 1, 0]], &[&[1, 1, 1], &[0, 1, 1]]),
        "r02" => (
            &[&[0, 1, 0], &[0, 0, 1], &[0, 1, 0]],
            &[&[0, 1, 1], &[0, 0, 1], &[0, 1, 1]],
        ),
        "r03" => (
            &[&[1, 0, 1], &[1, 0, 0], &[0, 0, 0]],
            &[&[1, 1, 1], &[1, 1, 1], &[0, 0, 0]],
        ),
        "r04" => (&[&[1, 0, 0], &[1, 0, 0]], &[&[1, 1, 1], &[1, 1, 1]]),
        "r05" => (&[&[0, 0, 1], &[0, 1, 1]], &[&[0, 0, 1], &[0, 1, 1]]),
        "r06" => (&[&[1, 0, 1], &[0, 1, 1]], &[&[1, 1, 1], &[0, 1, 1]]),
        "r07" => (&[&[1, 0, 0], &[0, 1, 0]], &[&[1, 1, 1], &[0, 1, 1]]),
        "r08" => (&[&[1, 0, 0], &[0, 1, 1]], &[&[1, 1, 1], &[0, 1, 1]]),
        "r09" => (
            &[&[0, 0, 1, 1], &[0, 0, 0, 0]],
            &[&[0, 0, 1, 1], &[0, 0, 0, 0]],
        ),
        "r10" => (
            &[&[1, 1, 0, 1], &[0, 0, 1, 1]],
            &[&[1, 1, 1, 1], &[0, 0, 1, 1]],
        ),
        other => panic!("unexpected fixture id {other}"),
    };
    (grid(e), grid(f))
}

fn criterion_7() -> Verdict {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/baseline_recipes.jsonl");
    let fixture = load_corpus(&path, TaskKind::Recipes).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for p in &fixture {
        let (want_e, want_f) = expected_baselines(&p.id);
        let e = predict_baseline(BaselineKind::ExactMatch, p, false).unwrap();
        let f = predict_baseline(BaselineKind::FirstOcc, p, false).unwrap();
        if e != want_e {
            problems.push(format!("{} exact {e:?}", p.id));
        }
        if f != want_f {
            problems.push(format!("{} first-occ {f:?}", p.id));
        }
    }
    // corpus-wide properties on a larger synthetic corpus plus the fixture
    let mut all = fixture.clone();
    all.extend(synthetic_recipes(200, 77, false));
    for p in &all {
        let e = predict_baseline(BaselineKind::ExactMatch, p, false).unwrap();
        let f = predict_baseline(BaselineKind::FirstOcc, p, false).unwrap();
        for (er, fr) in e.iter().zip(&f) {
            if fr.windows(2).any(|w| w[0] && !w[1]) {
                problems.push(format!("{}: first-occ not monotone", p.id));
            }
            if er.iter().zip(fr).any(|(&x, &y)| x && !y) {
                problems.push(format!("{}: exact exceeds first-occ", p.id));
            }
        }
        if predict_baseline(BaselineKind::FirstOcc, p, false).unwrap() != f {
            problems.push(format!("{}: nondeterministic", p.id));
        }
    }
    let msg = format!(
        "baselines: {} fixture recipes, {} corpus-wide processes; {} problems{}",
        fixture.len(),
        all.len(),
        problems.len(),
        problems
            .first()
            .map(|p| format!("; first: {p}"))
            .unwrap_or_default()
    );
    check(fixture.len() == 10 && problems.is_empty(), msg.clone(), msg)
}

// ---------------------------------------------------------------------------
// Learning, ablation, attribution

struct Trained {
    doc_first: Checkpoint,
    post_indep: Checkpoint,
    test: Vec<Process>,
    elapsed: Duration,
}

fn learning_config(variant: TemplateVariant, head: HeadKind) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        head,
        epochs: 60,
        learning_rate: 1e-3,
        batch_size: 4,
        lm_lambda: 0.5,
        seed: 0,
        max_len: 64,
        ..TrainConfig::default()
    };
    cfg.model.max_positions = 64;
    cfg.model.precision = Precision::F64;
    cfg
}

fn train_synthetic() -> Trained {
    let start = Instant::now();
    let train = synthetic_recipes(100, 1, false);
    let dev = synthetic_recipes(20, 2, false);
    let test = synthetic_recipes(50, 3, false);
    let doc_first = finetune(
        &learning_config(TemplateVariant::DocFirst, HeadKind::Conditioned),
        &train,
        Some(&dev),
        None,
    )
    .unwrap()
    .checkpoint;
    let post_indep = finetune(
        &learning_config(TemplateVariant::PostCond, HeadKind::Indep),
        &train,
        Some(&dev),
        None,
    )
    .unwrap()
    .checkpoint;
    Trained {
        doc_first,
        post_indep,
        test,
        elapsed: start.elapsed(),
    }
}

fn accuracy(ck: &Checkpoint, corpus: &[Process]) -> f64 {
    let (report, _) = evaluate(&ck.model, &ck.vocab, corpus, &Templater::new(64)).unwrap();
    report.accuracy().unwrap()
}

fn criterion_8(t: &Trained) -> Verdict {
    let doc = accuracy(&t.doc_first, &t.test);
    let post = accuracy(&t.post_indep, &t.test);
    let msg = format!(
        "learning: DocFirst test acc {doc:.4} (need >= {DOC_FIRST_MIN_ACC}), PostCond+indep {post:.4} (need <= {POST_INDEP_MAX_ACC}), {:.1}s",
        t.elapsed.as_secs_f64()
    );
    check(
        doc >= DOC_FIRST_MIN_ACC && post <= POST_INDEP_MAX_ACC && t.elapsed < LEARNING_BUDGET,
        msg.clone(),
        msg,
    )
}

fn criterion_9(t: &Trained) -> Verdict {
    let verbs = ablate(&t.test, AblationSpec::new(true, false).unwrap()).unwrap();
    let others = ablate(&t.test, AblationSpec::new(false, true).unwrap()).unwrap();
    let av = accuracy(&t.doc_first, &verbs);
    let ao = accuracy(&t.doc_first, &others);
    let msg = format!(
        "ablation: DocFirst acc w/o verbs {av:.4}, w/o other entities {ao:.4}, gap {:.4} (need >= {ABLATION_GAP})",
        ao - av
    );
    check(ao - av >= ABLATION_GAP, msg.clone(), msg)
}

/// Closed-form input gradient of a model whose blocks contribute nothing,
/// so `h_p = LN_f(x_p)` and the loss reads only position `p`.
fn linear_pathway_oracle() -> Result<f64, String> {
    let p = fd_recipe();
    let vocab = build_vocab(std::slice::from_ref(&p), 1);
    let spec = ModelSpec::new(
        TemplateVariant::DocFirst,
        HeadKind::Conditioned,
        TaskKind::Recipes,
    )
    .unwrap();
    let mut cfg = fd_model_config(vocab.len());
    cfg.init_std = 0.5;
    let mut model = Model::init(&cfg, spec, &mut ChaCha8Rng::seed_from_u64(909)).unwrap();
    for l in &mut model.encoder.layers {
        l.w_o.fill(0.0);
        l.b_o.fill(0.0);
        l.w_ff2.fill(0.0);
        l.b_ff2.fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(910);
    model
        .encoder
        .lnf_gain
        .iter_mut()
        .for_each(|g| *g = rng.random_range(0.5..1.5));
    let enc = Templater::default()
        .instances_for_task(&p, TemplateVariant::DocFirst, &vocab)
        .unwrap()
        .remove(0);
    let anchor_index = 1;
    let target = 1;
    let attr = attribute(
        &model,
        &enc,
        anchor_index,
        target,
        None,
        RelevanceKind::GradNorm,
    )
    .map_err(|e| e.to_string())?;

    let pos = enc.anchors[anchor_index].position;
    let x: Array1<f64> =
        &model.encoder.token_emb.row(enc.token_ids[pos]) + &model.encoder.pos_emb.row(pos);
    let d = x.len() as f64;
    let mu = x.sum() / d;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    let xhat = x.mapv(|v| (v - mu) * inv);
    let h = &xhat * &model.encoder.lnf_gain + &model.encoder.lnf_bias;
    let z = h.dot(&model.head.w_task);
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Array1<f64> = z.mapv(|v| (v - zmax).exp());
    let mut dz = &e / e.sum();
    dz[target] -= 1.0;
    let dh = model.head.w_task.dot(&dz);
    let g = &dh * &model.encoder.lnf_gain;
    let mg = g.sum() / d;
    let mgx = g.dot(&xhat) / d;
    let dx = (&g - mg - &(&xhat * mgx)) * inv;
    let want_norm = dx.dot(&dx).sqrt();

    let mut worst = 0.0f64;
    for (i, &s) in attr.scores.iter().enumerate() {
        let want = if i == pos { want_norm } else { 0.0 };
        let err = if want == 0.0 {
            s
        } else {
            (s - want).abs() / want
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn criterion_10(t: &Trained) -> Verdict {
    let oracle_err = linear_pathway_oracle()?;
    let ck = &t.doc_first;
    let tp = Templater::new(64);
    let (mut hits, mut total) = (0usize, 0usize);
    for p in &t.test {
        let encs = tp
            .instances_for_task(p, ck.model.spec.variant, &ck.vocab)
            .unwrap();
        for (e, enc) in encs.iter().enumerate() {
            let ent = ck.vocab.ids(&p.entities[e].name_tokens);
            let labels = p.entities[e].labels.presence().unwrap();
            for (ai, a) in enc.anchors.iter().enumerate() {
                let attr = attribute(
                    &ck.model,
                    enc,
                    ai,
                    usize::from(labels[a.step - 1]),
                    None,
                    RelevanceKind::GradNorm,
                )
                .unwrap();
                let verb = &p.steps[a.step - 1].tokens[0];
                debug_assert!(is_label_verb(verb));
                total += 1;
                if let Some(top) = attr.top_content_position(enc, &ent) {
                    if ck.vocab.token(enc.token_ids[top]) == Some(verb.as_str()) {
                        hits += 1;
                    }
                }
            }
        }
    }
    let rate = hits as f64 / total as f64;
    let msg = format!(
        "attribution: linear-pathway max rel err {oracle_err:.2e} (tol {ORACLE_REL_TOL:e}); trained DocFirst top-1 content token is the step verb in {hits}/{total} = {rate:.3} (need >= {ATTRIBUTION_MIN_HIT})"
    );
    check(
        oracle_err < ORACLE_REL_TOL && rate >= ATTRIBUTION_MIN_HIT,
        msg.clone(),
        msg,
    )
}

fn run(n: usize, f: impl FnOnce() -> Verdict) -> bool {
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let what = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {what}"))
    });
    match verdict {
        Ok(m) => {
            println!("[PASS] criterion {n}: {m}");
            true
        }
        Err(m) => {
            println!("[FAIL] criterion {n}: {m}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this suite
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= run(1, criterion_1);
    ok &= run(2, criterion_2);
    ok &= run(3, criterion_3);
    ok &= run(4, criterion_4);
    ok &= run(5, criterion_5);
    ok &= run(6, criterion_6);
    ok &= run(7, criterion_7);
    let trained = catch_unwind(train_synthetic);
    match &trained {
        Ok(t) => {
            ok &= run(8, || criterion_8(t));
            ok &= run(9, || criterion_9(t));
            ok &= run(10, || criterion_10(t));
        }
        Err(_) => {
            for n in 8..=10 {
                println!("[FAIL] criterion {n}: synthetic training panicked");
            }
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}

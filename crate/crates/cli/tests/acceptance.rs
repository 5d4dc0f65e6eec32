//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line with
//! its measured quantities; the run exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use humorlab::corpus::{
    build_keyword_subset, few_shot_sample, generate_synthetic, parse_jsonl, reference_offense, SubsetSpec, SyntheticSpec,
};
use humorlab::diffengine::{relative_error, BatchObjective, Objective};
use humorlab::harness::read_offense_table;
use humorlab::influence::{rank_top_k, z_normalize, DampedHessian, InfluenceEngine, LissaConfig, Method, RankMode};
use humorlab::oracle::{convex_fixture, grad_check, influence_loo_correlation, ConvexSpec, LooOracle, TestPoint};
use humorlab::textmodel::{EncoderConfig, Head, TextModel, Verbalizer, Vocab};
use humorlab::trainer::{labeled, train_head, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HEADS: [Head; 2] = [Head::Classifier, Head::Verbalizer];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
}

fn humorlab(out: &Path, args: &[&str]) -> Duration {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_humorlab"))
        .args(args)
        .arg("--config")
        .arg(config_path())
        .arg("--out")
        .arg(out)
        .stderr(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .status()
        .expect("humorlab runs");
    assert!(status.success(), "humorlab {args:?} failed: {status}");
    start.elapsed()
}

fn pipeline(out: &Path) -> Duration {
    ["synth", "train", "influence", "report"]
        .iter()
        .map(|c| humorlab(out, &[c]))
        .sum()
}

fn ac1_derivatives() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        n_examples: 200,
        vocab_size: 60,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let vocab = Vocab::build(&data, 1, &Verbalizer::default());
    let model = TextModel::new(
        EncoderConfig {
            embed_dim: 8,
            hidden: vec![8],
            attention: true,
            max_len: 48,
        },
        vocab,
        Verbalizer::default(),
    )
    .unwrap();
    let sample = humorlab::corpus::sample_examples(&data, 16, 3);
    let mut worst = (0.0f64, 0.0f64);
    let mut dims = Vec::new();
    for head in HEADS {
        let mut p = model.init_params(1);
        model.set_trainable(&mut p, &["all".to_string()]).unwrap();
        dims.push(p.trainable_dim());
        let r = grad_check(&model, &p, &labeled(&model, &sample, head), head, 1e-5, 11).unwrap();
        worst = (worst.0.max(r.grad_error), worst.1.max(r.hvp_error));
    }
    let pass = worst.0 < 1e-4 && worst.1 < 1e-3 && dims.iter().all(|&d| d <= 5000);
    outcome(
        pass,
        format!("grad error {:.2e} (< 1e-4), HVP error {:.2e} (< 1e-3), trainable {dims:?}", worst.0, worst.1),
    )
}

fn ac2_inverse_hvp() -> Outcome {
    let (mut residual, mut error) = (0.0f64, 0.0f64);
    for head in HEADS {
        let f = convex_fixture(&ConvexSpec::default(), head).unwrap();
        let trained = train_head(&f.model, &f.init, &f.train, &f.cfg, head).unwrap().params;
        let cfg = LissaConfig {
            hvp_batch_size: f.train.len(),
            ..LissaConfig::default()
        };
        let exact = InfluenceEngine::new(&f.model, &trained, &f.train, head, Method::Exact, &cfg).unwrap();
        let lissa = InfluenceEngine::new(&f.model, &trained, &f.train, head, Method::Lissa, &cfg).unwrap();
        let dense = DampedHessian::assemble(exact.objective(), cfg.damping).unwrap();
        for p in TestPoint::from_dataset(&f.model, &f.test, head) {
            let g = exact.test_gradient(&p.seq, p.label).unwrap();
            let x = exact.inverse_hvp(&g).unwrap();
            residual = residual.max(dense.relative_residual(&x, &g));
            error = error.max(relative_error(&lissa.inverse_hvp(&g).unwrap().0, &x.0, 0.0));
        }
    }
    outcome(
        residual < 1e-8 && error < 0.05,
        format!("exact residual {residual:.2e} (< 1e-8), LiSSA relative error {error:.2e} (< 0.05)"),
    )
}

fn ac3_loo() -> Outcome {
    let f = convex_fixture(&ConvexSpec::default(), Head::Classifier).unwrap();
    let oracle = LooOracle::new(&f.model, &f.init, &f.train, &f.cfg, f.head).unwrap();
    let engine =
        InfluenceEngine::new(&f.model, oracle.full_params(), &f.train, f.head, Method::Exact, &LissaConfig::default()).unwrap();
    let points = TestPoint::from_dataset(&f.model, &f.test, f.head);
    let sweeps = oracle.sweep(&points).unwrap();
    let mut min_pearson = f64::INFINITY;
    let mut min_positive = usize::MAX;
    for (p, loo) in points.iter().zip(&sweeps) {
        let r = engine.report(p.id, &p.seq, p.label, RankMode::Helpful).unwrap();
        let c = influence_loo_correlation(&r, loo).unwrap();
        min_pearson = min_pearson.min(c.pearson.unwrap_or(f64::NEG_INFINITY));
        let positive = rank_top_k(&r, 5, RankMode::Helpful)
            .unwrap()
            .iter()
            .filter(|id| loo.iter().any(|l| l.train_id == **id && l.delta > 0.0))
            .count();
        min_positive = min_positive.min(positive);
    }
    outcome(
        points.len() == 5 && f.train.len() == 32 && min_pearson > 0.9 && min_positive >= 4,
        format!(
            "{} tests x {} train: min pearson {min_pearson:.4} (> 0.9), min top-5 helpful with positive delta {min_positive} (>= 4)",
            points.len(),
            f.train.len()
        ),
    )
}

fn ac4_direction(out: &Path) -> Outcome {
    let rows = read_offense_table(&out.join("offense_table.csv")).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for label in ["FT", "PT"] {
        let r = rows.iter().find(|r| r.method == label && r.k == 10).expect("top-10 row");
        let (pos, neg) = (r.mean_offense_pos.unwrap(), r.mean_offense_neg.unwrap());
        pass &= r.n_pos >= 20 && r.n_neg >= 20 && pos > r.reference && neg < r.reference;
        parts.push(format!(
            "{label} top-10 pos {pos:.3} ({}) / neg {neg:.3} ({}) vs reference {:.3}",
            r.n_pos, r.n_neg, r.reference
        ));
    }
    let corpus = parse_jsonl(&std::fs::read_to_string(out.join("corpus.jsonl")).unwrap()).unwrap();
    pass &= corpus.len() == 2000;
    outcome(pass, format!("n = {}; {}", corpus.len(), parts.join("; ")))
}

fn ac5_fewshot(out: &Path) -> Outcome {
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let table = std::fs::read_to_string(out.join("fewshot_table.txt")).unwrap();
    let csv = std::fs::read_to_string(out.join("fewshot.csv")).unwrap();
    let runs = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
    let cell = mean_std_cells(&table);
    let mut pass = runs == 2 * 4 * 5 && cell == 2 * 2 * 4;
    let mut acc = BTreeMap::new();
    for label in ["FT", "PT"] {
        let a = metrics["fewshot"][label]["128"]["accuracy"]["mean"].as_f64().unwrap();
        pass &= a > 0.6;
        acc.insert(label, a);
    }
    let order = if acc["PT"] > acc["FT"] { "PT > FT" } else { "FT >= PT" };
    outcome(
        pass,
        format!(
            "{runs} runs, {cell} mean (std) cells; 128-shot accuracy FT {:.3}, PT {:.3} (> 0.6); ordering {order}",
            acc["FT"], acc["PT"]
        ),
    )
}

/// Counts "0.123 (0.045)" cells in the few-shot text table.
fn mean_std_cells(table: &str) -> usize {
    table
        .split_whitespace()
        .collect::<Vec<_>>()
        .windows(2)
        .filter(|w| {
            w[0].parse::<f64>().is_ok()
                && w[1].starts_with('(')
                && w[1].ends_with(')')
                && w[1][1..w[1].len() - 1].parse::<f64>().is_ok()
        })
        .count()
}

fn ac6_invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let xs: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..7.0)).collect();
    let z = z_normalize(&xs).unwrap().values;
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
    if mean.abs() > 1e-9 || (std - 1.0).abs() > 1e-9 {
        failures.push(format!("z mean {mean:e} std {std}"));
    }

    let f = convex_fixture(&ConvexSpec::default(), Head::Classifier).unwrap();
    let trained = train_head(&f.model, &f.init, &f.train, &f.cfg, f.head).unwrap().params;
    let engine = InfluenceEngine::new(&f.model, &trained, &f.train, f.head, Method::Exact, &LissaConfig::default()).unwrap();
    let p = &TestPoint::from_dataset(&f.model, &f.test, f.head)[0];
    let g = engine.test_gradient(&p.seq, p.label).unwrap();
    let scaled = humorlab::diffengine::GradVector(g.0.iter().map(|x| 2.5 * x).collect());
    for mode in [RankMode::Helpful, RankMode::Harmful, RankMode::Magnitude] {
        let a = engine.report_from_gradient(p.id, p.label, &g, mode).unwrap();
        let b = engine.report_from_gradient(p.id, p.label, &scaled, mode).unwrap();
        let za = z_normalize(&a.scores.iter().map(|s| s.raw).collect::<Vec<_>>()).unwrap().values;
        let shifted: Vec<f64> = a.scores.iter().map(|s| 3.0 * s.raw + 11.0).collect();
        let zs = z_normalize(&shifted).unwrap().values;
        if a.ranking != b.ranking || relative_error(&za, &zs, 1e-12) > 1e-9 {
            failures.push(format!("{mode} ranking not affine invariant"));
        }
    }

    let obj = BatchObjective::new(&f.model, &trained, &labeled(&f.model, &f.train, f.head), f.head).unwrap();
    let theta = obj.theta();
    let all = obj.all();
    let u: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (hu, hv) = (obj.hvp(&theta, &all, &u), obj.hvp(&theta, &all, &v));
    let sym = (dot(&u, &hv) - dot(&v, &hu)).abs() / dot(&u, &hv).abs().max(1e-12);
    let combo: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let lin_expected: Vec<f64> = hu.iter().zip(&hv).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let lin = relative_error(&obj.hvp(&theta, &all, &combo), &lin_expected, 1e-12);
    if sym > 1e-8 || lin > 1e-8 {
        failures.push(format!("HVP symmetry {sym:e} linearity {lin:e}"));
    }

    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train, test) = build_keyword_subset(&data, &SubsetSpec::default()).unwrap();
    let (tp, tn) = train.class_counts();
    let (sp, sn) = test.class_counts();
    let shots = few_shot_sample(&train, 64, 9).unwrap();
    if tp != tn || sp != sn || shots.class_counts() != (32, 32) {
        failures.push(format!("balance train {tp}/{tn} test {sp}/{sn} shots {:?}", shots.class_counts()));
    }

    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 1,
        ..TrainConfig::default()
    };
    let small = few_shot_sample(&train, 32, 1).unwrap();
    let vocab = Vocab::build(&train, 1, &Verbalizer::default());
    let model = TextModel::new(EncoderConfig::default(), vocab, Verbalizer::default()).unwrap();
    let init = model.init_params(4);
    let a = train_head(&model, &init, &small, &cfg, Head::Verbalizer).unwrap();
    let b = train_head(&model, &init, &small, &cfg, Head::Verbalizer).unwrap();
    let same_bits = a.params.values.iter().zip(&b.params.values).all(|(x, y)| x.to_bits() == y.to_bits());
    if !same_bits {
        failures.push("training is not bit-reproducible".into());
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "z-normalization, affine ranking invariance, HVP symmetry/linearity, balance, determinism".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn artifacts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn ac7_determinism(first: &Path, second: &Path) -> Outcome {
    let (a, b) = (artifacts(first), artifacts(second));
    let differing: Vec<_> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let train = parse_jsonl(&std::fs::read_to_string(first.join("train.jsonl")).unwrap()).unwrap();
    let reference = reference_offense(&train).unwrap();
    let rows = read_offense_table(&first.join("offense_table.csv")).unwrap();
    let exact = !rows.is_empty() && rows.iter().all(|r| r.reference.to_bits() == reference.to_bits());
    outcome(
        a.len() == b.len() && differing.is_empty() && exact,
        format!(
            "{} artifacts compared, {} differ; {} offense rows, reference {reference} exact: {exact}",
            a.len(),
            differing.len(),
            rows.len()
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let (first, second) = (dir.path().join("first"), dir.path().join("second"));
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut timed = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        results.push((name, o, start.elapsed()));
    };

    timed("AC1 derivative correctness", &mut ac1_derivatives);
    timed("AC2 inverse-HVP correctness", &mut ac2_inverse_hvp);
    timed("AC3 influence vs leave-one-out", &mut ac3_loo);
    timed("AC4 top-10 offense direction", &mut || {
        pipeline(&first);
        ac4_direction(&first)
    });
    timed("AC7 end-to-end determinism", &mut || {
        pipeline(&second);
        ac7_determinism(&first, &second)
    });
    timed("AC5 few-shot protocol", &mut || {
        humorlab(&first, &["eval"]);
        ac5_fewshot(&first)
    });
    timed("AC6 invariant suite", &mut ac6_invariants);
    results.sort_by_key(|r| r.0);

    for (name, o, t) in &results {
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.as_secs_f64()
        );
    }
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

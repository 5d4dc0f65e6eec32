use humorlab::diffengine::relative_error;
use humorlab::influence::{rank_top_k, DampedHessian, InfluenceEngine, LissaConfig, Method, RankMode};
use humorlab::oracle::{convex_fixture, influence_loo_correlation, ConvexSpec, LooOracle, TestPoint};
use humorlab::textmodel::Head;
use humorlab::trainer::train_head;

#[test]
fn exact_and_lissa_agree_on_convex_heads() {
    for head in [Head::Classifier, Head::Verbalizer] {
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
            assert!(dense.relative_residual(&x, &g) < 1e-8);
            let y = lissa.inverse_hvp(&g).unwrap();
            let err = relative_error(&y.0, &x.0, 0.0);
            assert!(err < 0.05, "{head}: lissa error {err}");

            let a = exact.report(p.id, &p.seq, p.label, RankMode::Helpful).unwrap();
            let b = lissa.report(p.id, &p.seq, p.label, RankMode::Helpful).unwrap();
            let ta = rank_top_k(&a, 10, RankMode::Helpful).unwrap();
            let tb = rank_top_k(&b, 10, RankMode::Helpful).unwrap();
            let overlap = ta.iter().filter(|id| tb.contains(id)).count();
            assert!(overlap >= 9, "{head}: overlap {overlap}");
        }
    }
}

#[test]
fn influence_predicts_leave_one_out() {
    let spec = ConvexSpec::default();
    let f = convex_fixture(&spec, Head::Classifier).unwrap();
    let oracle = LooOracle::new(&f.model, &f.init, &f.train, &f.cfg, f.head).unwrap();
    let engine = InfluenceEngine::new(
        &f.model,
        oracle.full_params(),
        &f.train,
        f.head,
        Method::Exact,
        &LissaConfig::default(),
    )
    .unwrap();
    let points = TestPoint::from_dataset(&f.model, &f.test, f.head);
    let sweeps = oracle.sweep(&points).unwrap();
    assert_eq!(sweeps.len(), 5);
    for (p, loo) in points.iter().zip(&sweeps) {
        assert_eq!(loo.len(), 32);
        let r = engine.report(p.id, &p.seq, p.label, RankMode::Helpful).unwrap();
        let c = influence_loo_correlation(&r, loo).unwrap();
        assert!(c.pearson.unwrap() > 0.9, "test {}: {c:?}", p.id);
        let top = rank_top_k(&r, 5, RankMode::Helpful).unwrap();
        let positive = top
            .iter()
            .filter(|id| loo.iter().find(|l| l.train_id == **id).unwrap().delta > 0.0)
            .count();
        assert!(positive >= 4, "test {}: {positive} of top-5 helpful have positive delta", p.id);
    }
}

#[test]
fn self_influence_is_helpful() {
    let f = convex_fixture(&ConvexSpec::default(), Head::Classifier).unwrap();
    let trained = train_head(&f.model, &f.init, &f.train, &f.cfg, f.head).unwrap().params;
    let engine = InfluenceEngine::new(&f.model, &trained, &f.train, f.head, Method::Exact, &LissaConfig::default()).unwrap();
    for e in &f.train.examples {
        let r = engine.report(e.id, &f.model.encode(&e.text, f.head), e.humor, RankMode::Helpful).unwrap();
        assert!(r.raw(e.id).unwrap() < 0.0);
    }
}

#[test]
fn scaling_test_gradient_scales_raw_scores() {
    let f = convex_fixture(&ConvexSpec::default(), Head::Verbalizer).unwrap();
    let trained = train_head(&f.model, &f.init, &f.train, &f.cfg, f.head).unwrap().params;
    let engine = InfluenceEngine::new(&f.model, &trained, &f.train, f.head, Method::Exact, &LissaConfig::default()).unwrap();
    let p = &TestPoint::from_dataset(&f.model, &f.test, f.head)[0];
    let g = engine.test_gradient(&p.seq, p.label).unwrap();
    let base = engine.report_from_gradient(p.id, p.label, &g, RankMode::Helpful).unwrap();
    let scaled = engine.report_from_gradient(p.id, p.label, &g.scaled(3.5), RankMode::Helpful).unwrap();
    for (a, b) in base.scores.iter().zip(&scaled.scores) {
        assert!((b.raw - 3.5 * a.raw).abs() <= 1e-12 * a.raw.abs().max(1e-12));
        assert!((b.z - a.z).abs() < 1e-9);
    }
    assert_eq!(base.ranking, scaled.ranking);

    let zero = engine.report_from_gradient(p.id, p.label, &g.scaled(0.0), RankMode::Helpful).unwrap();
    assert!(zero.degenerate);
    assert!(zero.scores.iter().all(|s| s.raw == 0.0 && s.z == 0.0));
}

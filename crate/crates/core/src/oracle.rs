//! Ground truth for the influence machinery: leave-one-out retraining,
//! finite-difference derivative checks and influence/LOO correlation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, Dataset, SyntheticSpec};
use crate::diffengine::{relative_error, BatchObjective, Objective, ParamStore};
use crate::error::{Error, Result};
use crate::influence::InfluenceReport;
use crate::stats;
use crate::textmodel::{EncoderConfig, Head, TextModel, TokenSequence, Verbalizer, Vocab};
use crate::trainer::{train_head, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub train_id: u64,
    /// `L(z_test; θ̂ without i) − L(z_test; θ̂)`.
    pub delta: f64,
}

/// A labeled test point identified by id.
#[derive(Debug, Clone)]
pub struct TestPoint {
    pub id: u64,
    pub seq: TokenSequence,
    pub label: u8,
}

impl TestPoint {
    pub fn from_dataset(model: &TextModel, data: &Dataset, head: Head) -> Vec<TestPoint> {
        data.examples
            .iter()
            .map(|e| TestPoint {
                id: e.id,
                seq: model.encode(&e.text, head),
                label: e.humor,
            })
            .collect()
    }
}

pub fn test_loss(model: &TextModel, params: &ParamStore, point: &TestPoint, head: Head) -> Result<f64> {
    let obj = BatchObjective::new(model, params, &[(point.seq.clone(), point.label)], head)?;
    Ok(obj.loss(&obj.theta(), &[0]))
}

/// Leave-one-out retraining from a fixed initialization. The full-data
/// training is done once and shared by every removal.
pub struct LooOracle<'a> {
    model: &'a TextModel,
    init: &'a ParamStore,
    train: &'a Dataset,
    cfg: TrainConfig,
    head: Head,
    full: ParamStore,
}

impl<'a> LooOracle<'a> {
    pub fn new(model: &'a TextModel, init: &'a ParamStore, train: &'a Dataset, cfg: &TrainConfig, head: Head) -> Result<Self> {
        let full = train_head(model, init, train, cfg, head)?.params;
        Ok(Self {
            model,
            init,
            train,
            cfg: cfg.clone(),
            head,
            full,
        })
    }

    pub fn full_params(&self) -> &ParamStore {
        &self.full
    }

    pub fn retrain_without(&self, train_id: u64) -> Result<ParamStore> {
        let reduced = self.train.without(train_id)?;
        Ok(train_head(self.model, self.init, &reduced, &self.cfg, self.head)?.params)
    }

    pub fn loo_delta(&self, train_id: u64, point: &TestPoint) -> Result<LooResult> {
        let without = self.retrain_without(train_id)?;
        Ok(LooResult {
            train_id,
            delta: test_loss(self.model, &without, point, self.head)? - test_loss(self.model, &self.full, point, self.head)?,
        })
    }

    /// One retraining per training example, scored on every test point.
    /// `result[t][i]` is the delta of training example `i` on test point `t`.
    pub fn sweep(&self, points: &[TestPoint]) -> Result<Vec<Vec<LooResult>>> {
        let base: Vec<f64> = points
            .iter()
            .map(|p| test_loss(self.model, &self.full, p, self.head))
            .collect::<Result<_>>()?;
        let per_train: Vec<Vec<f64>> = self
            .train
            .examples
            .par_iter()
            .map(|e| {
                let without = self.retrain_without(e.id)?;
                points
                    .iter()
                    .zip(&base)
                    .map(|(p, b)| Ok(test_loss(self.model, &without, p, self.head)? - b))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok((0..points.len())
            .map(|t| {
                self.train
                    .examples
                    .iter()
                    .zip(&per_train)
                    .map(|(e, d)| LooResult {
                        train_id: e.id,
                        delta: d[t],
                    })
                    .collect()
            })
            .collect())
    }
}

/// `L(z_test; θ̂₋ᵢ) − L(z_test; θ̂)` with both trainings started from `init`.
pub fn loo_delta(
    model: &TextModel,
    init: &ParamStore,
    train: &Dataset,
    train_id: u64,
    point: &TestPoint,
    cfg: &TrainConfig,
    head: Head,
) -> Result<LooResult> {
    if train.get(train_id).is_none() {
        return Err(Error::UnknownId(train_id));
    }
    LooOracle::new(model, init, train, cfg, head)?.loo_delta(train_id, point)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub coordinates: usize,
    pub directions: usize,
    /// Relative error of the analytic gradient against central differences
    /// over the sampled coordinates.
    pub grad_error: f64,
    /// Worst relative error of HVPs against differences of gradients.
    pub hvp_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.grad_error.max(self.hvp_error)
    }
}

pub const CHECK_COORDINATES: usize = 64;
pub const CHECK_DIRECTIONS: usize = 5;

/// Checks `grad` against central differences of `loss` on a random subset
/// of coordinates, and `hvp` against central differences of `grad` along
/// random directions, all at the objective's current point.
pub fn grad_check_objective<O: Objective + ?Sized>(obj: &O, h: f64, seed: u64) -> GradCheckReport {
    let theta = obj.theta();
    let all = obj.all();
    let d = obj.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = if d <= CHECK_COORDINATES {
        (0..d).collect()
    } else {
        let mut c = rand::seq::index::sample(&mut rng, d, CHECK_COORDINATES).into_vec();
        c.sort_unstable();
        c
    };
    let g = obj.grad(&theta, &all);
    let fd: Vec<f64> = coords
        .par_iter()
        .map(|&j| {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            (obj.loss(&up, &all) - obj.loss(&dn, &all)) / (2.0 * h)
        })
        .collect();
    let picked: Vec<f64> = coords.iter().map(|&j| g[j]).collect();
    let grad_error = relative_error(&picked, &fd, 1e-12);

    let mut hvp_error: f64 = 0.0;
    for _ in 0..CHECK_DIRECTIONS {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = obj.hvp(&theta, &all, &v);
        let up: Vec<f64> = theta.iter().zip(&v).map(|(t, x)| t + h * x).collect();
        let dn: Vec<f64> = theta.iter().zip(&v).map(|(t, x)| t - h * x).collect();
        let (gu, gd) = (obj.grad(&up, &all), obj.grad(&dn, &all));
        let fd: Vec<f64> = gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        hvp_error = hvp_error.max(relative_error(&hv, &fd, 1e-12));
    }
    GradCheckReport {
        step: h,
        coordinates: coords.len(),
        directions: CHECK_DIRECTIONS,
        grad_error,
        hvp_error,
    }
}

pub fn grad_check(
    model: &TextModel,
    params: &ParamStore,
    batch: &[(TokenSequence, u8)],
    head: Head,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidSpec("finite-difference step must be positive".into()));
    }
    let obj = BatchObjective::new(model, params, batch, head)?;
    Ok(grad_check_objective(&obj, h, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Set when either side has zero variance.
    pub degenerate: bool,
}

/// Agreement between predicted removal effects `−raw/n` and LOO deltas.
pub fn influence_loo_correlation(report: &InfluenceReport, loo: &[LooResult]) -> Result<Correlation> {
    let n = report.scores.len();
    if n < 3 {
        return Err(Error::InvalidSpec(format!("correlation needs at least 3 examples, got {n}")));
    }
    let deltas: BTreeMap<u64, f64> = loo.iter().map(|r| (r.train_id, r.delta)).collect();
    if deltas.len() != loo.len() || deltas.len() != n {
        return Err(Error::KeyMismatch(format!(
            "{} influence scores vs {} loo results",
            n,
            loo.len()
        )));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for s in &report.scores {
        let d = deltas
            .get(&s.train_id)
            .ok_or_else(|| Error::KeyMismatch(format!("train id {} has no loo result", s.train_id)))?;
        xs.push(-s.raw / n as f64);
        ys.push(*d);
    }
    let pearson = stats::pearson(&xs, &ys);
    let spearman = stats::spearman(&xs, &ys);
    Ok(Correlation {
        pearson,
        spearman,
        degenerate: pearson.is_none(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub damping: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Standard deviation of the first feed-forward pre-activations after
    /// rescaling on the training set.
    pub feature_scale: f64,
    pub seed: u64,
}

impl Default for ConvexSpec {
    fn default() -> Self {
        Self {
            n_train: 32,
            n_test: 5,
            damping: 3e-3,
            embed_dim: 8,
            hidden: 3,
            feature_scale: 1.5,
            seed: 0,
        }
    }
}

/// The convex verification setting: a frozen random encoder whose first
/// feed-forward layer is rescaled to standardized pre-activations, with only
/// the head trainable under an L2 penalty equal to the influence damping.
pub struct ConvexFixture {
    pub model: TextModel,
    pub init: ParamStore,
    pub train: Dataset,
    pub test: Dataset,
    pub cfg: TrainConfig,
    pub head: Head,
}

pub fn convex_fixture(spec: &ConvexSpec, head: Head) -> Result<ConvexFixture> {
    let corpus = generate_synthetic(&SyntheticSpec {
        n_examples: (spec.n_train + spec.n_test).max(64),
        vocab_size: 40,
        setup_templates: 12,
        punchline_templates: 8,
        seed: spec.seed,
        ..SyntheticSpec::default()
    })?;
    let train = Dataset::new(corpus.examples[..spec.n_train].to_vec(), crate::corpus::SplitTag::Train)?;
    let test = Dataset::new(
        corpus.examples[spec.n_train..spec.n_train + spec.n_test].to_vec(),
        crate::corpus::SplitTag::Test,
    )?;
    let vocab = Vocab::build(&corpus, 1, &Verbalizer::default());
    let model = TextModel::new(
        EncoderConfig {
            embed_dim: spec.embed_dim,
            hidden: vec![spec.hidden],
            attention: true,
            max_len: 48,
        },
        vocab,
        Verbalizer::default(),
    )?;
    let mut init = model.init_params(spec.seed);
    standardize_first_layer(&model, &mut init, &train, head, spec.feature_scale)?;
    Ok(ConvexFixture {
        model,
        init,
        train,
        test,
        cfg: TrainConfig::convex(spec.damping, spec.seed),
        head,
    })
}

/// Rewrites `ff.0` so its pre-activations over `data` are centered and
/// whitened, with every unit at standard deviation `scale` and no
/// correlation between units.
pub fn standardize_first_layer(model: &TextModel, params: &mut ParamStore, data: &Dataset, head: Head, scale: f64) -> Result<()> {
    let inputs: Vec<Vec<f64>> = data
        .examples
        .iter()
        .map(|e| model.readout_input(params, &model.encode(&e.text, head), head))
        .collect::<Result<_>>()?;
    let w = params
        .group("ff.0.weight")
        .cloned()
        .ok_or_else(|| Error::Config("model has no feed-forward layer".into()))?;
    let b = params.group("ff.0.bias").cloned().expect("bias follows weight");
    let (units, fan_in) = (w.shape[0], w.shape[1]);
    let weight = DMatrix::from_row_slice(units, fan_in, &params.values[w.offset..w.offset + units * fan_in]);
    let x = DMatrix::from_fn(inputs.len(), fan_in, |i, k| inputs[i][k]);
    let mut pre = &x * weight.transpose();
    let means: Vec<f64> = (0..units).map(|u| pre.column(u).mean()).collect();
    for u in 0..units {
        pre.column_mut(u).add_scalar_mut(-means[u]);
    }
    let cov = pre.transpose() * &pre / inputs.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let min = eig.eigenvalues.min();
    if !(min > 1e-12) {
        return Err(Error::Conditioning { min_eigenvalue: min });
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| scale / l.sqrt()));
    let whiten = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let weight = &whiten * weight;
    let shift = &whiten * DVector::from_vec(means);
    for u in 0..units {
        for k in 0..fan_in {
            params.values[w.offset + u * fan_in + k] = weight[(u, k)];
        }
        params.values[b.offset + u] = -shift[u];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitTag;
    use crate::diffengine::Quadratic;
    use crate::influence::{InfluenceEngine, LissaConfig, Method, RankMode, ScoreEntry};

    fn fixture(n_train: usize) -> ConvexFixture {
        convex_fixture(
            &ConvexSpec {
                n_train,
                n_test: 2,
                ..Default::default()
            },
            Head::Classifier,
        )
        .unwrap()
    }

    fn point(f: &ConvexFixture, i: usize) -> TestPoint {
        TestPoint::from_dataset(&f.model, &f.test, f.head).remove(i)
    }

    #[test]
    fn rerun_is_bit_identical() {
        let f = fixture(12);
        let p = point(&f, 0);
        let a = loo_delta(&f.model, &f.init, &f.train, f.train.examples[3].id, &p, &f.cfg, f.head).unwrap();
        let b = loo_delta(&f.model, &f.init, &f.train, f.train.examples[3].id, &p, &f.cfg, f.head).unwrap();
        assert_eq!(a.delta.to_bits(), b.delta.to_bits());
        let oracle = LooOracle::new(&f.model, &f.init, &f.train, &f.cfg, f.head).unwrap();
        let again = train_head(&f.model, &f.init, &f.train, &f.cfg, f.head).unwrap().params;
        assert_eq!(
            test_loss(&f.model, &again, &p, f.head).unwrap() - test_loss(&f.model, oracle.full_params(), &p, f.head).unwrap(),
            0.0
        );
    }

    #[test]
    fn unknown_id_is_rejected() {
        let f = fixture(8);
        let p = point(&f, 0);
        assert!(matches!(
            loo_delta(&f.model, &f.init, &f.train, 999_999, &p, &f.cfg, f.head),
            Err(Error::UnknownId(999_999))
        ));
    }

    #[test]
    fn removing_a_duplicate_barely_matters() {
        let f = fixture(16);
        let mut examples = f.train.examples.clone();
        let mut twin = examples[0].clone();
        twin.id = 10_000;
        examples.push(twin);
        let train = Dataset::new(examples, SplitTag::Train).unwrap();
        let oracle = LooOracle::new(&f.model, &f.init, &train, &f.cfg, f.head).unwrap();
        let sweep = oracle.sweep(&[point(&f, 0)]).unwrap().remove(0);
        let max = sweep.iter().map(|r| r.delta.abs()).fold(0.0, f64::max);
        let dup = sweep.iter().find(|r| r.train_id == 10_000).unwrap().delta.abs();
        assert!(dup < 0.1 * max, "duplicate {dup} vs max {max}");
    }

    #[test]
    fn removing_sole_positive_hurts_positive_test() {
        let f = fixture(16);
        let pos = f.train.examples.iter().find(|e| e.humor == 1).unwrap().clone();
        let neg = f.train.examples.iter().find(|e| e.humor == 0).unwrap().clone();
        let train = Dataset::new(vec![pos.clone(), neg], SplitTag::Train).unwrap();
        let p = TestPoint {
            id: 77,
            seq: f.model.encode(&pos.text, f.head),
            label: 1,
        };
        let r = loo_delta(&f.model, &f.init, &train, pos.id, &p, &f.cfg, f.head).unwrap();
        assert!(r.delta > 0.0, "{}", r.delta);
    }

    #[test]
    fn quadratic_hvp_is_exact() {
        let q = Quadratic {
            diag: vec![1.0, 2.0, 0.5, 4.0],
            at: vec![0.3, -1.0, 2.0, 0.1],
        };
        let r = grad_check_objective(&q, 1e-5, 0);
        assert!(r.hvp_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 4);
    }

    #[test]
    fn error_versus_step() {
        let f = fixture(8);
        let mut p = f.init.clone();
        f.model.set_trainable(&mut p, &["all".into()]).unwrap();
        let batch = crate::trainer::labeled(&f.model, &f.train, Head::Classifier);
        let at = |h| grad_check(&f.model, &p, &batch, Head::Classifier, h, 3).unwrap();
        let (coarse, fine, tiny) = (at(1e-3), at(1e-5), at(1e-12));
        assert!(coarse.coordinates >= 50);
        assert!(fine.grad_error < 1e-4 && fine.hvp_error < 1e-3, "{fine:?}");
        assert!(fine.grad_error < coarse.grad_error);
        assert!(tiny.worst() > fine.worst());
        assert!(grad_check(&f.model, &p, &batch, Head::Classifier, 0.0, 3).is_err());
    }

    fn report(raw: &[f64]) -> InfluenceReport {
        InfluenceReport {
            test_id: 0,
            test_label: 1,
            scores: raw
                .iter()
                .enumerate()
                .map(|(i, &raw)| ScoreEntry {
                    train_id: i as u64,
                    raw,
                    z: 0.0,
                })
                .collect(),
            ranking: vec![],
            mode: RankMode::Helpful,
            method: Method::Exact,
            degenerate: false,
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn correlation_contracts() {
        let raw = [0.5, -1.0, 2.0, 0.1];
        let loo: Vec<LooResult> = raw
            .iter()
            .enumerate()
            .map(|(i, r)| LooResult {
                train_id: i as u64,
                delta: -3.0 * r / 4.0,
            })
            .collect();
        let c = influence_loo_correlation(&report(&raw), &loo).unwrap();
        assert!((c.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!((c.spearman.unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            influence_loo_correlation(&report(&raw), &loo[..3]),
            Err(Error::KeyMismatch(_))
        ));
        let mut shifted = loo.clone();
        shifted[0].train_id = 42;
        assert!(influence_loo_correlation(&report(&raw), &shifted).is_err());
        let flat: Vec<LooResult> = loo.iter().map(|r| LooResult { delta: 1.0, ..*r }).collect();
        let c = influence_loo_correlation(&report(&raw), &flat).unwrap();
        assert!(c.degenerate && c.pearson.is_none());
    }

    #[test]
    fn shuffled_pairing_loses_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut loo: Vec<LooResult> = raw
            .iter()
            .enumerate()
            .map(|(i, r)| LooResult {
                train_id: i as u64,
                delta: -r / 200.0,
            })
            .collect();
        use rand::seq::SliceRandom;
        let mut deltas: Vec<f64> = loo.iter().map(|r| r.delta).collect();
        deltas.shuffle(&mut rng);
        for (r, d) in loo.iter_mut().zip(deltas) {
            r.delta = d;
        }
        let c = influence_loo_correlation(&report(&raw), &loo).unwrap();
        assert!(c.pearson.unwrap().abs() < 0.5);
    }

    #[test]
    fn convex_influence_tracks_loo() {
        let f = fixture(24);
        let oracle = LooOracle::new(&f.model, &f.init, &f.train, &f.cfg, f.head).unwrap();
        let points = TestPoint::from_dataset(&f.model, &f.test, f.head);
        let sweeps = oracle.sweep(&points).unwrap();
        let engine = InfluenceEngine::new(
            &f.model,
            oracle.full_params(),
            &f.train,
            f.head,
            Method::Exact,
            &LissaConfig::default(),
        )
        .unwrap();
        for (p, loo) in points.iter().zip(&sweeps) {
            let r = engine.report(p.id, &p.seq, p.label, RankMode::Helpful).unwrap();
            let c = influence_loo_correlation(&r, loo).unwrap();
            assert!(c.pearson.unwrap() > 0.9, "{c:?}");
        }
    }
}

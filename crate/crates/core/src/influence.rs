//! Influence of training examples on a test prediction:
//! `I(zᵢ, z_test) = −∇L(z_test)ᵀ (H + λI)⁻¹ ∇L(zᵢ)`, with the inverse-HVP
//! computed by a dense solve or by the LiSSA recursion.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::diffengine::{dense_hessian, dot, norm, BatchObjective, GradVector, Objective, ParamStore};
use crate::error::{Error, Result};
use crate::linalg;
use crate::stats;
use crate::textmodel::{Head, TextModel, TokenSequence};
use crate::trainer::labeled;

/// Largest trainable dimension accepted by the dense solver.
pub const DENSE_LIMIT: usize = 5000;

/// Divergence guard: the recursion aborts once `|h_t| > DIVERGENCE_FACTOR |v|`.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LissaConfig {
    pub damping: f64,
    pub depth: usize,
    pub scale: f64,
    pub repeats: usize,
    pub hvp_batch_size: usize,
    pub seed: u64,
}

impl Default for LissaConfig {
    fn default() -> Self {
        Self {
            damping: 3e-3,
            depth: 1000,
            scale: 25.0,
            repeats: 1,
            hvp_batch_size: 8,
            seed: 0,
        }
    }
}

impl LissaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0) {
            return Err(Error::InvalidSpec("damping must be non-negative".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidSpec("scale must be positive".into()));
        }
        if self.repeats == 0 || self.hvp_batch_size == 0 {
            return Err(Error::InvalidSpec("repeats and hvp_batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Lissa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    /// Most negative raw score first: up-weighting lowers the test loss most.
    Helpful,
    Harmful,
    Magnitude,
}

macro_rules! str_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(Method { "exact" => Method::Exact, "lissa" => Method::Lissa });
str_enum!(RankMode {
    "helpful" => RankMode::Helpful,
    "harmful" => RankMode::Harmful,
    "magnitude" => RankMode::Magnitude,
});

/// Cholesky factor of `H + λI` over the trainable coordinates.
pub struct DampedHessian {
    chol: Cholesky<f64, Dyn>,
    hessian: Vec<f64>,
    damping: f64,
    dim: usize,
}

impl DampedHessian {
    pub fn assemble<O: Objective + ?Sized>(obj: &O, damping: f64) -> Result<Self> {
        let d = obj.dim();
        if d > DENSE_LIMIT {
            return Err(Error::DenseLimit(d));
        }
        let hessian = dense_hessian(obj, &obj.theta(), &obj.all());
        let mut m = linalg::matrix(&hessian, d);
        for i in 0..d {
            m[(i, i)] += damping;
        }
        let chol = m.clone().cholesky().ok_or_else(|| Error::Conditioning {
            min_eigenvalue: linalg::min_eigenvalue(&m),
        })?;
        Ok(Self {
            chol,
            hessian,
            damping,
            dim: d,
        })
    }

    pub fn solve(&self, v: &GradVector) -> Result<GradVector> {
        if v.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: v.len(),
            });
        }
        let x = self.chol.solve(&DVector::from_column_slice(&v.0));
        Ok(GradVector(x.iter().copied().collect()))
    }

    /// `|(H + λI)x − v| / |v|`.
    pub fn relative_residual(&self, x: &GradVector, v: &GradVector) -> f64 {
        let r: Vec<f64> = linalg::damped_matvec(&self.hessian, self.dim, self.damping, &x.0)
            .iter()
            .zip(&v.0)
            .map(|(a, b)| a - b)
            .collect();
        norm(&r) / v.norm().max(f64::MIN_POSITIVE)
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }
}

/// `(H + λI)⁻¹ v` by a dense Cholesky solve, `H` the mean Hessian of `obj`.
pub fn inverse_hvp_exact<O: Objective + ?Sized>(obj: &O, v: &GradVector, damping: f64) -> Result<GradVector> {
    DampedHessian::assemble(obj, damping)?.solve(v)
}

/// LiSSA: `h₀ = v`, `h_{t+1} = v + h_t − ((H_batch + λI) h_t) / σ`, returning
/// `h_T / σ` averaged over the configured repeats.
pub fn inverse_hvp_lissa<O: Objective + ?Sized>(obj: &O, v: &GradVector, cfg: &LissaConfig) -> Result<GradVector> {
    cfg.validate()?;
    let d = obj.dim();
    if v.len() != d {
        return Err(Error::Shape { expected: d, got: v.len() });
    }
    let theta = obj.theta();
    let n = obj.len();
    let all = obj.all();
    let limit = DIVERGENCE_FACTOR * v.norm();
    let mut acc = vec![0.0; d];
    for r in 0..cfg.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
        let mut h = v.0.clone();
        for step in 0..cfg.depth {
            let hv = if cfg.hvp_batch_size >= n {
                obj.hvp(&theta, &all, &h)
            } else {
                let batch = rand::seq::index::sample(&mut rng, n, cfg.hvp_batch_size).into_vec();
                obj.hvp(&theta, &batch, &h)
            };
            for i in 0..d {
                h[i] = v.0[i] + h[i] - (hv[i] + cfg.damping * h[i]) / cfg.scale;
            }
            let hn = norm(&h);
            if !hn.is_finite() || hn > limit {
                return Err(Error::Divergence { step: step + 1, norm: hn });
            }
        }
        for (a, x) in acc.iter_mut().zip(&h) {
            *a += x / cfg.scale;
        }
    }
    Ok(GradVector(acc.into_iter().map(|a| a / cfg.repeats as f64).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZScores {
    pub values: Vec<f64>,
    /// Set when every input was equal; `values` are then all zero.
    pub degenerate: bool,
}

/// `(x − mean) / std` with the population standard deviation.
pub fn z_normalize(scores: &[f64]) -> Result<ZScores> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("z_normalize"));
    }
    let first = scores[0];
    if scores.iter().all(|&s| s == first) {
        return Ok(ZScores {
            values: vec![0.0; scores.len()],
            degenerate: true,
        });
    }
    let mean = stats::mean(scores).expect("non-empty");
    let std = stats::population_std(scores).expect("non-empty");
    Ok(ZScores {
        values: scores.iter().map(|s| (s - mean) / std).collect(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub train_id: u64,
    pub raw: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub test_id: u64,
    pub test_label: u8,
    pub scores: Vec<ScoreEntry>,
    pub ranking: Vec<u64>,
    pub mode: RankMode,
    pub method: Method,
    pub degenerate: bool,
    pub config: serde_json::Value,
}

impl InfluenceReport {
    pub fn raw(&self, train_id: u64) -> Option<f64> {
        self.scores.iter().find(|s| s.train_id == train_id).map(|s| s.raw)
    }
}

fn ordering(mode: RankMode, scores: &[ScoreEntry]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&scores[a], &scores[b]);
        let primary = match mode {
            RankMode::Helpful => x.raw.total_cmp(&y.raw),
            RankMode::Harmful => y.raw.total_cmp(&x.raw),
            RankMode::Magnitude => y.z.abs().total_cmp(&x.z.abs()),
        };
        primary.then(x.train_id.cmp(&y.train_id))
    });
    idx.into_iter().map(|i| scores[i].train_id).collect()
}

/// Top-`k` training ids under `mode`; ties go to the smaller id.
pub fn rank_top_k(report: &InfluenceReport, k: usize, mode: RankMode) -> Result<Vec<u64>> {
    if k == 0 {
        return Err(Error::InvalidSpec("k must be positive".into()));
    }
    if k > report.scores.len() {
        return Err(Error::Bound {
            k,
            available: report.scores.len(),
        });
    }
    let mut ids = ordering(mode, &report.scores);
    ids.truncate(k);
    Ok(ids)
}

enum Solver {
    Exact(DampedHessian),
    Lissa(LissaConfig),
}

/// Scores every training example against arbitrary test examples, reusing
/// the per-example training gradients (and, for the exact method, the
/// factorized Hessian) across test examples.
pub struct InfluenceEngine<'a> {
    model: &'a TextModel,
    params: &'a ParamStore,
    head: Head,
    method: Method,
    cfg: LissaConfig,
    train_ids: Vec<u64>,
    objective: BatchObjective<'a>,
    train_grads: Vec<Vec<f64>>,
    solver: Solver,
}

impl<'a> InfluenceEngine<'a> {
    pub fn new(model: &'a TextModel, params: &'a ParamStore, train: &Dataset, head: Head, method: Method, cfg: &LissaConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyInput("influence: training set"));
        }
        let batch = labeled(model, train, head);
        let objective = BatchObjective::new(model, params, &batch, head)?;
        let theta = objective.theta();
        let train_grads: Vec<Vec<f64>> = (0..objective.len())
            .into_par_iter()
            .map(|i| objective.grad(&theta, &[i]))
            .collect();
        let solver = match method {
            Method::Exact => Solver::Exact(DampedHessian::assemble(&objective, cfg.damping)?),
            Method::Lissa => Solver::Lissa(cfg.clone()),
        };
        Ok(Self {
            model,
            params,
            head,
            method,
            cfg: cfg.clone(),
            train_ids: train.examples.iter().map(|e| e.id).collect(),
            objective,
            train_grads,
            solver,
        })
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn objective(&self) -> &BatchObjective<'a> {
        &self.objective
    }

    pub fn test_gradient(&self, seq: &TokenSequence, label: u8) -> Result<GradVector> {
        let obj = BatchObjective::new(self.model, self.params, &[(seq.clone(), label)], self.head)?;
        Ok(GradVector(obj.grad(&obj.theta(), &[0])))
    }

    pub fn inverse_hvp(&self, v: &GradVector) -> Result<GradVector> {
        match &self.solver {
            Solver::Exact(h) => h.solve(v),
            Solver::Lissa(cfg) => inverse_hvp_lissa(&self.objective, v, cfg),
        }
    }

    /// Raw scores `−s_testᵀ ∇L(zᵢ)` in training order.
    pub fn raw_scores(&self, test_grad: &GradVector) -> Result<Vec<f64>> {
        let s_test = self.inverse_hvp(test_grad)?;
        Ok(self.train_grads.par_iter().map(|g| -dot(&s_test.0, g)).collect())
    }

    pub fn report_from_gradient(&self, test_id: u64, test_label: u8, test_grad: &GradVector, mode: RankMode) -> Result<InfluenceReport> {
        let raw = self.raw_scores(test_grad)?;
        let z = z_normalize(&raw)?;
        let scores: Vec<ScoreEntry> = self
            .train_ids
            .iter()
            .zip(raw.iter().zip(&z.values))
            .map(|(&train_id, (&raw, &z))| ScoreEntry { train_id, raw, z })
            .collect();
        let ranking = ordering(mode, &scores);
        Ok(InfluenceReport {
            test_id,
            test_label,
            scores,
            ranking,
            mode,
            method: self.method,
            degenerate: z.degenerate,
            config: serde_json::json!({
                "head": self.head,
                "lissa": self.cfg,
                "trainable_dim": self.dim(),
            }),
        })
    }

    pub fn report(&self, test_id: u64, seq: &TokenSequence, label: u8, mode: RankMode) -> Result<InfluenceReport> {
        let g = self.test_gradient(seq, label)?;
        self.report_from_gradient(test_id, label, &g, mode)
    }
}

/// One-shot scoring of every training example for a single test example.
#[allow(clippy::too_many_arguments)]
pub fn influence_scores_for_test(
    model: &TextModel,
    params: &ParamStore,
    train: &Dataset,
    test_id: u64,
    z_test: (&TokenSequence, u8),
    head: Head,
    method: Method,
    cfg: &LissaConfig,
    mode: RankMode,
) -> Result<InfluenceReport> {
    InfluenceEngine::new(model, params, train, head, method, cfg)?.report(test_id, z_test.0, z_test.1, mode)
}

//! Masked-token pretraining, supervised head training, evaluation and
//! multi-seed aggregation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{few_shot_sample, Dataset};
use crate::diffengine::{dense_hessian, norm, BatchObjective, Objective, ParamStore};
use crate::error::{Error, Result};
use crate::linalg;
use crate::stats;
use crate::textmodel::vocab::MASK;
use crate::textmodel::{Head, TextModel, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
    /// Full-batch damped Newton with backtracking; for small convex problems.
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub train_batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Trainable group selectors; `head` expands to the active head's
    /// parameters (`cls` or `verbalizer`).
    pub trainable: Vec<String>,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// L2 penalty `wd/2 |θ|²` on trainable coordinates.
    pub weight_decay: f64,
    pub newton_iters: usize,
    pub newton_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            train_batch_size: 16,
            eval_batch_size: 8,
            epochs: 3,
            seed: 0,
            trainable: vec!["ff".into(), "head".into()],
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            newton_iters: 100,
            newton_tol: 1e-10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidSpec("batch sizes must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidSpec("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidSpec(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Convex verification setup: only the head is trainable, the
    /// optimum is found by Newton's method under an L2 penalty `damping`.
    pub fn convex(damping: f64, seed: u64) -> Self {
        Self {
            trainable: vec!["head".into()],
            optimizer: Optimizer::Newton,
            weight_decay: damping,
            seed,
            ..Self::default()
        }
    }

    pub fn selectors(&self, head: Head) -> Vec<String> {
        expand_selectors(&self.trainable, head)
    }
}

/// Resolves the `head` selector to the parameter group of `head`.
pub fn expand_selectors(selectors: &[String], head: Head) -> Vec<String> {
    selectors
        .iter()
        .map(|s| match (s.as_str(), head) {
            ("head", Head::Classifier) => "cls".to_string(),
            ("head", Head::Verbalizer) => "verbalizer".to_string(),
            _ => s.clone(),
        })
        .collect()
}

/// Parameters after training with the loss recorded before the first update
/// and after every epoch (or Newton iteration).
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ParamStore,
    pub losses: Vec<f64>,
}

pub fn labeled(model: &TextModel, data: &Dataset, head: Head) -> Vec<(TokenSequence, u8)> {
    data.examples.iter().map(|e| (model.encode(&e.text, head), e.humor)).collect()
}

/// `params` with the trainable mask `cfg` asks for under `head`.
pub fn masked_params(model: &TextModel, params: &ParamStore, cfg: &TrainConfig, head: Head) -> Result<ParamStore> {
    let mut p = params.clone();
    model.set_trainable(&mut p, &cfg.selectors(head))?;
    Ok(p)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(d: usize) -> Self {
        Self {
            m: vec![0.0; d],
            v: vec![0.0; d],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

fn penalized_grad(obj: &dyn Objective, theta: &[f64], subset: &[usize], wd: f64) -> Vec<f64> {
    let mut g = obj.grad(theta, subset);
    if wd > 0.0 {
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += wd * t;
        }
    }
    g
}

fn penalized_loss(obj: &dyn Objective, theta: &[f64], subset: &[usize], wd: f64) -> f64 {
    obj.loss(theta, subset) + 0.5 * wd * theta.iter().map(|t| t * t).sum::<f64>()
}

/// First-order mini-batch minimization (or Newton for `Optimizer::Newton`) of
/// the penalized mean loss. Returns the final point and the loss trace.
fn minimize(obj: &dyn Objective, cfg: &TrainConfig) -> (Vec<f64>, Vec<f64>) {
    let all = obj.all();
    let wd = cfg.weight_decay;
    let mut theta = obj.theta();
    let mut losses = vec![penalized_loss(obj, &theta, &all, wd)];
    match cfg.optimizer {
        Optimizer::Newton => {
            let d = obj.dim();
            for _ in 0..cfg.newton_iters {
                let g = penalized_grad(obj, &theta, &all, wd);
                if norm(&g) < cfg.newton_tol {
                    break;
                }
                let h = dense_hessian(obj, &theta, &all);
                // Levenberg fallback when the penalized Hessian is singular.
                let mut jitter = 0.0;
                let step = loop {
                    match linalg::solve_damped(&h, d, wd + jitter, &g) {
                        Ok(s) => break s,
                        Err(_) => jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 },
                    }
                };
                let f0 = *losses.last().expect("non-empty");
                let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
                let mut t = 1.0;
                let mut accepted = None;
                for _ in 0..40 {
                    let cand: Vec<f64> = theta.iter().zip(&step).map(|(x, s)| x - t * s).collect();
                    let f = penalized_loss(obj, &cand, &all, wd);
                    if f <= f0 - 1e-4 * t * slope {
                        accepted = Some((cand, f));
                        break;
                    }
                    t *= 0.5;
                }
                let Some((cand, f)) = accepted else { break };
                theta = cand;
                losses.push(f);
            }
        }
        Optimizer::Adam | Optimizer::Sgd => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut adam = Adam::new(obj.dim());
            let mut order = all.clone();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.train_batch_size) {
                    let g = penalized_grad(obj, &theta, batch, wd);
                    if cfg.optimizer == Optimizer::Adam {
                        adam.step(&mut theta, &g, cfg);
                    } else {
                        for (t, gi) in theta.iter_mut().zip(&g) {
                            *t -= cfg.learning_rate * gi;
                        }
                    }
                }
                losses.push(penalized_loss(obj, &theta, &all, wd));
            }
        }
    }
    (theta, losses)
}

/// Trains the parameters selected by `cfg.trainable` to minimize the mean
/// cross-entropy of `head` on `train`.
pub fn train_head(model: &TextModel, params: &ParamStore, train: &Dataset, cfg: &TrainConfig, head: Head) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("train_head"));
    }
    let mut p = masked_params(model, params, cfg, head)?;
    let batch = labeled(model, train, head);
    let obj = BatchObjective::new(model, &p, &batch, head)?;
    let (theta, losses) = minimize(&obj, cfg);
    p.set_trainable_values(&theta);
    Ok(Trained { params: p, losses })
}

fn mask_tokens(seq: &TokenSequence, fraction: f64, rng: &mut ChaCha8Rng) -> Option<(Vec<u32>, Vec<(usize, u32)>)> {
    let mut toks = seq.tokens().to_vec();
    if toks.len() < 2 {
        return None;
    }
    let mut targets: Vec<(usize, u32)> = (1..toks.len())
        .filter(|_| rng.random_bool(fraction))
        .map(|i| (i, toks[i]))
        .collect();
    if targets.is_empty() {
        let i = rng.random_range(1..toks.len());
        targets.push((i, toks[i]));
    }
    for &(i, _) in &targets {
        toks[i] = MASK;
    }
    Some((toks, targets))
}

/// Masked-token pretraining of embeddings, attention, feed-forward stack and
/// MLM head. `losses[0]` is the held-fixed masked loss before training; one
/// entry follows per epoch on the same masking.
pub fn pretrain_mlm(model: &TextModel, params: &ParamStore, data: &Dataset, cfg: &TrainConfig, mask_fraction: f64) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("pretrain_mlm"));
    }
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::InvalidSpec(format!("mask_fraction {mask_fraction} outside (0, 1)")));
    }
    let mut p = params.clone();
    let encoder_groups: Vec<String> = ["embed", "attn", "ff", "mlm"]
        .iter()
        .filter(|s| p.groups.iter().any(|g| g.name == **s || g.name.starts_with(&format!("{s}."))))
        .map(|s| s.to_string())
        .collect();
    model.set_trainable(&mut p, &encoder_groups)?;
    let seqs: Vec<TokenSequence> = data.examples.iter().map(|e| model.encode_plain(&e.text)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let eval_items: Vec<_> = seqs.iter().filter_map(|s| mask_tokens(s, mask_fraction, &mut eval_rng)).collect();
    if eval_items.is_empty() {
        return Err(Error::EmptyInput("pretrain_mlm: no maskable tokens"));
    }
    let eval_loss = |p: &ParamStore| -> Result<f64> {
        let obj = BatchObjective::masked_lm(model, p, eval_items.clone())?;
        Ok(obj.loss(&obj.theta(), &obj.all()))
    };
    let mut losses = vec![eval_loss(&p)?];
    let mut adam = Adam::new(p.trainable_dim());
    let mut theta = p.trainable_values();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.train_batch_size) {
            let items: Vec<_> = chunk.iter().filter_map(|&i| mask_tokens(&seqs[i], mask_fraction, &mut rng)).collect();
            if items.is_empty() {
                continue;
            }
            p.set_trainable_values(&theta);
            let obj = BatchObjective::masked_lm(model, &p, items)?;
            let g = penalized_grad(&obj, &theta, &obj.all(), cfg.weight_decay);
            match cfg.optimizer {
                Optimizer::Sgd => theta.iter_mut().zip(&g).for_each(|(t, gi)| *t -= cfg.learning_rate * gi),
                _ => adam.step(&mut theta, &g, cfg),
            }
        }
        p.set_trainable_values(&theta);
        losses.push(eval_loss(&p)?);
    }
    p.set_trainable_values(&theta);
    Ok(Trained { params: p, losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub f1: f64,
}

/// Accuracy and positive-class F1; F1 is 0 when there are no true positives.
pub fn scores_from_predictions(predicted: &[u8], gold: &[u8]) -> Result<Scores> {
    if gold.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    assert_eq!(predicted.len(), gold.len());
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in predicted.iter().zip(gold) {
        correct += (p == g) as usize;
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(Scores {
        accuracy: correct as f64 / gold.len() as f64,
        f1,
    })
}

pub fn evaluate(model: &TextModel, params: &ParamStore, test: &Dataset, head: Head) -> Result<Scores> {
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let predicted = test
        .examples
        .par_iter()
        .map(|e| model.predict(params, &model.encode(&e.text, head), head))
        .collect::<Result<Vec<u8>>>()?;
    let gold: Vec<u8> = test.examples.iter().map(|e| e.humor).collect();
    scores_from_predictions(&predicted, &gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample (n - 1) standard deviation.
    pub std: f64,
}

impl Aggregate {
    pub fn of(xs: &[f64]) -> Option<Self> {
        Some(Self {
            mean: stats::mean(xs)?,
            std: stats::sample_std(xs)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub runs: Vec<SeedScores>,
    pub accuracy: Aggregate,
    pub f1: Aggregate,
}

impl RunMetrics {
    pub fn from_runs(runs: Vec<SeedScores>) -> Result<Self> {
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|r| r.f1).collect();
        Ok(Self {
            accuracy: Aggregate::of(&acc).ok_or(Error::EmptyInput("repeat_runs"))?,
            f1: Aggregate::of(&f1).ok_or(Error::EmptyInput("repeat_runs"))?,
            runs,
        })
    }
}

/// One few-shot (or full-data) experiment: sample, train, evaluate.
pub struct FewShotProtocol<'a> {
    pub model: &'a TextModel,
    /// Starting point, typically the pretrained encoder.
    pub init: &'a ParamStore,
    pub pool: &'a Dataset,
    pub test: &'a Dataset,
    /// `None` trains on the whole pool.
    pub shots: Option<usize>,
    pub head: Head,
}

impl FewShotProtocol<'_> {
    pub fn run_seed(&self, cfg_base: &TrainConfig, seed: u64) -> Result<SeedScores> {
        let sample = match self.shots {
            Some(n) => few_shot_sample(self.pool, n, seed)?,
            None => self.pool.clone(),
        };
        let mut init = self.init.clone();
        if self.head == Head::Classifier {
            self.model.reinit_classifier(&mut init, seed);
        }
        let cfg = TrainConfig {
            seed,
            ..cfg_base.clone()
        };
        let trained = train_head(self.model, &init, &sample, &cfg, self.head)?;
        let s = evaluate(self.model, &trained.params, self.test, self.head)?;
        Ok(SeedScores {
            seed,
            accuracy: s.accuracy,
            f1: s.f1,
        })
    }
}

/// Runs `protocol` once per seed (fresh sample and head each time) and
/// aggregates mean and sample standard deviation.
pub fn repeat_runs(cfg_base: &TrainConfig, seeds: &[u64], protocol: &FewShotProtocol<'_>) -> Result<RunMetrics> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("repeat_runs"));
    }
    let runs = seeds
        .iter()
        .map(|&s| protocol.run_seed(cfg_base, s))
        .collect::<Result<Vec<_>>>()?;
    RunMetrics::from_runs(runs)
}

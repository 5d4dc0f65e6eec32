//! Losses, exact gradients and exact Hessian-vector products over the
//! trainable coordinates of a [`ParamStore`].

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textmodel::encoder::{LossHead, Readout};
use crate::textmodel::scalar::{Dual, Scalar};
use crate::textmodel::{Head, TextModel, TokenSequence};

/// A named span of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Flat parameter vector with named groups and a trainable mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub groups: Vec<GroupSpec>,
    mask: Vec<bool>,
    trainable: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StoreDescriptor {
    groups: Vec<GroupSpec>,
    /// Half-open index ranges of trainable coordinates.
    trainable: Vec<(usize, usize)>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl ParamStore {
    pub fn new(values: Vec<f64>, groups: Vec<GroupSpec>) -> Self {
        let n = values.len();
        Self {
            values,
            groups,
            mask: vec![true; n],
            trainable: (0..n).collect(),
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.values.len() {
            return Err(Error::Shape {
                expected: self.values.len(),
                got: mask.len(),
            });
        }
        self.trainable = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        self.mask = mask;
        Ok(())
    }

    /// Indices of trainable coordinates, ascending.
    pub fn trainable_indices(&self) -> &[usize] {
        &self.trainable
    }

    pub fn trainable_dim(&self) -> usize {
        self.trainable.len()
    }

    pub fn trainable_values(&self) -> Vec<f64> {
        self.trainable.iter().map(|&i| self.values[i]).collect()
    }

    pub fn set_trainable_values(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.trainable.len());
        for (&i, &t) in self.trainable.iter().zip(theta) {
            self.values[i] = t;
        }
    }

    pub fn group(&self, name: &str) -> Option<&GroupSpec> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_values(&self, name: &str) -> Option<&[f64]> {
        self.group(name).map(|g| &self.values[g.offset..g.offset + g.len])
    }

    fn mask_ranges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &i in &self.trainable {
            match out.last_mut() {
                Some((_, end)) if *end == i => *end += 1,
                _ => out.push((i, i + 1)),
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn descriptor(&self, meta: serde_json::Value) -> serde_json::Value {
        serde_json::to_value(StoreDescriptor {
            groups: self.groups.clone(),
            trainable: self.mask_ranges(),
            meta,
        })
        .expect("descriptor serializes")
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (groups,
    /// trainable ranges, caller metadata).
    pub fn save(&self, stem: &Path, meta: serde_json::Value) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        crate::harness::io::write_atomic(&bin, &self.to_bytes())?;
        let mut text = serde_json::to_string_pretty(&self.descriptor(meta))?;
        text.push('\n');
        crate::harness::io::write_atomic(&json, text.as_bytes())
    }

    /// Returns the store and the metadata saved with it.
    pub fn load(stem: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let desc: StoreDescriptor = serde_json::from_str(&text)?;
        Self::from_parts(&bytes, desc.groups, &desc.trainable).map(|s| (s, desc.meta))
    }

    fn from_parts(bytes: &[u8], groups: Vec<GroupSpec>, ranges: &[(usize, usize)]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Serde("parameter file length not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let expected = groups.last().map_or(0, |g| g.offset + g.len);
        if expected != values.len() {
            return Err(Error::Shape {
                expected,
                got: values.len(),
            });
        }
        let mut store = ParamStore::new(values, groups);
        let mut mask = vec![false; store.values.len()];
        for &(a, b) in ranges {
            if a > b || b > mask.len() {
                return Err(Error::Serde(format!("bad trainable range {a}..{b}")));
            }
            mask[a..b].iter_mut().for_each(|m| *m = true);
        }
        store.set_mask(mask)?;
        Ok(store)
    }
}

/// A vector over trainable coordinates only.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(d: usize) -> Self {
        GradVector(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, k: f64) -> GradVector {
        GradVector(self.0.iter().map(|x| x * k).collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Relative error `|a - b| / max(|a|, |b|, floor)` in the 2-norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// A twice-differentiable mean loss over a finite set of examples, viewed
/// as a function of the trainable coordinates.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    /// The point of expansion (current trainable values).
    fn theta(&self) -> Vec<f64>;
    fn loss(&self, theta: &[f64], subset: &[usize]) -> f64;
    fn grad(&self, theta: &[f64], subset: &[usize]) -> Vec<f64>;
    fn hvp(&self, theta: &[f64], subset: &[usize], v: &[f64]) -> Vec<f64>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

struct Prepared {
    toks: Vec<u32>,
    readouts: Vec<Readout>,
}

// Examples per rayon task; fixed so the summation order never depends on
// the thread count.
const CHUNK: usize = 16;

/// Mean cross-entropy of a [`TextModel`] over a labeled batch.
pub struct BatchObjective<'a> {
    model: &'a TextModel,
    base: Vec<f64>,
    trainable: Vec<usize>,
    examples: Vec<Prepared>,
    head: LossHead,
    cache: Option<Vec<Vec<Vec<f64>>>>,
}

impl<'a> BatchObjective<'a> {
    pub fn new(model: &'a TextModel, params: &ParamStore, batch: &[(TokenSequence, u8)], head: Head) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let examples = batch
            .iter()
            .map(|(seq, label)| {
                Ok(Prepared {
                    toks: seq.tokens().to_vec(),
                    readouts: vec![Readout {
                        pos: seq.readout(head)?,
                        target: *label as u32,
                    }],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(model, params, examples, head.into())
    }

    /// Masked-token objective: each item is a token sequence (already carrying
    /// `[MASK]` at the masked slots) with `(position, original token)` targets.
    pub(crate) fn masked_lm(model: &'a TextModel, params: &ParamStore, items: Vec<(Vec<u32>, Vec<(usize, u32)>)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("masked-token batch"));
        }
        let examples = items
            .into_iter()
            .map(|(toks, targets)| Prepared {
                toks,
                readouts: targets.into_iter().map(|(pos, target)| Readout { pos, target }).collect(),
            })
            .collect();
        Self::build(model, params, examples, LossHead::Mlm)
    }

    fn build(model: &'a TextModel, params: &ParamStore, examples: Vec<Prepared>, head: LossHead) -> Result<Self> {
        if params.values.len() != model.num_params() {
            return Err(Error::Shape {
                expected: model.num_params(),
                got: params.values.len(),
            });
        }
        let cache = model.prefix_frozen(params).then(|| {
            examples
                .par_iter()
                .map(|ex| {
                    let pos: Vec<usize> = ex.readouts.iter().map(|r| r.pos).collect();
                    model.readout_features(&params.values, &ex.toks, &pos)
                })
                .collect()
        });
        Ok(Self {
            model,
            base: params.values.clone(),
            trainable: params.trainable_indices().to_vec(),
            examples,
            head,
            cache,
        })
    }

    fn full_point(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.trainable.len(), "theta dimension");
        let mut p = self.base.clone();
        for (&i, &t) in self.trainable.iter().zip(theta) {
            p[i] = t;
        }
        p
    }

    fn weight(&self, subset: &[usize]) -> f64 {
        let n: usize = subset.iter().map(|&i| self.examples[i].readouts.len()).sum();
        1.0 / n.max(1) as f64
    }

    fn accumulate<S: Scalar>(&self, p: &[S], subset: &[usize], with_grad: bool) -> (S, Vec<S>) {
        let w = self.weight(subset);
        let prefix_grad = self.cache.is_none();
        let parts: Vec<(S, Vec<S>)> = subset
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = if with_grad { vec![S::zero(); p.len()] } else { Vec::new() };
                let mut loss = S::zero();
                for &i in chunk {
                    let ex = &self.examples[i];
                    let cached = self.cache.as_ref().map(|c| c[i].as_slice());
                    let grad = with_grad.then_some(g.as_mut_slice());
                    loss += self.model.example_loss(p, &ex.toks, &ex.readouts, self.head, cached, w, grad, prefix_grad);
                }
                (loss, g)
            })
            .collect();
        let mut total = S::zero();
        let mut grad = if with_grad { vec![S::zero(); p.len()] } else { Vec::new() };
        for (l, g) in parts {
            total += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        (total, grad)
    }
}

impl Objective for BatchObjective<'_> {
    fn dim(&self) -> usize {
        self.trainable.len()
    }

    fn len(&self) -> usize {
        self.examples.len()
    }

    fn theta(&self) -> Vec<f64> {
        self.trainable.iter().map(|&i| self.base[i]).collect()
    }

    fn loss(&self, theta: &[f64], subset: &[usize]) -> f64 {
        self.accumulate(&self.full_point(theta), subset, false).0
    }

    fn grad(&self, theta: &[f64], subset: &[usize]) -> Vec<f64> {
        let (_, g) = self.accumulate(&self.full_point(theta), subset, true);
        self.trainable.iter().map(|&i| g[i]).collect()
    }

    fn hvp(&self, theta: &[f64], subset: &[usize], v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.trainable.len(), "direction dimension");
        let mut p: Vec<Dual> = self.full_point(theta).into_iter().map(Dual::from_f64).collect();
        for (&i, &vi) in self.trainable.iter().zip(v) {
            p[i].du = vi;
        }
        let (_, g) = self.accumulate(&p, subset, true);
        self.trainable.iter().map(|&i| g[i].du).collect()
    }
}

/// Dense row-major Hessian of `obj` at `theta` over `subset`, assembled from
/// one HVP per coordinate direction and symmetrized.
pub fn dense_hessian<O: Objective + ?Sized>(obj: &O, theta: &[f64], subset: &[usize]) -> Vec<f64> {
    let d = obj.dim();
    let mut h = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = obj.hvp(theta, subset, &e);
        e[j] = 0.0;
        for (i, c) in col.into_iter().enumerate() {
            h[i * d + j] = c;
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = s;
            h[j * d + i] = s;
        }
    }
    h
}

/// `½ Σ aᵢ θᵢ²` as a one-example objective; its Hessian is `diag(a)`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub diag: Vec<f64>,
    pub at: Vec<f64>,
}

impl Quadratic {
    pub fn diagonal(diag: Vec<f64>) -> Self {
        let at = vec![0.0; diag.len()];
        Self { diag, at }
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.diag.len()
    }
    fn len(&self) -> usize {
        1
    }
    fn theta(&self) -> Vec<f64> {
        self.at.clone()
    }
    fn loss(&self, theta: &[f64], _subset: &[usize]) -> f64 {
        0.5 * self.diag.iter().zip(theta).map(|(a, t)| a * t * t).sum::<f64>()
    }
    fn grad(&self, theta: &[f64], _subset: &[usize]) -> Vec<f64> {
        self.diag.iter().zip(theta).map(|(a, t)| a * t).collect()
    }
    fn hvp(&self, _theta: &[f64], _subset: &[usize], v: &[f64]) -> Vec<f64> {
        self.diag.iter().zip(v).map(|(a, x)| a * x).collect()
    }
}

pub fn batch_loss(model: &TextModel, params: &ParamStore, batch: &[(TokenSequence, u8)], head: Head) -> Result<f64> {
    let obj = BatchObjective::new(model, params, batch, head)?;
    Ok(obj.loss(&obj.theta(), &obj.all()))
}

pub fn batch_grad(model: &TextModel, params: &ParamStore, batch: &[(TokenSequence, u8)], head: Head) -> Result<GradVector> {
    let obj = BatchObjective::new(model, params, batch, head)?;
    Ok(GradVector(obj.grad(&obj.theta(), &obj.all())))
}

pub fn batch_hvp(model: &TextModel, params: &ParamStore, batch: &[(TokenSequence, u8)], v: &GradVector, head: Head) -> Result<GradVector> {
    if v.len() != params.trainable_dim() {
        return Err(Error::Shape {
            expected: params.trainable_dim(),
            got: v.len(),
        });
    }
    let obj = BatchObjective::new(model, params, batch, head)?;
    Ok(GradVector(obj.hvp(&obj.theta(), &obj.all(), &v.0)))
}

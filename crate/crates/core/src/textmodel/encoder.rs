//! A small from-scratch text encoder with two readout heads.
//!
//! Token embeddings optionally pass through one single-head self-attention
//! layer (with residual), after which a shared tanh feed-forward stack is
//! applied at the readout position only: position 0 (`[CLS]`) for the
//! classifier head, the `[MASK]` slot for the verbalizer head.
//!
//! Every pass is written once, generically over [`Scalar`], together with its
//! hand-derived backward pass. Gradients come from running the backward pass
//! on `f64`; exact Hessian-vector products from running the same code on
//! [`Dual`](super::scalar::Dual) values.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::vocab::{tokenize, Verbalizer, Vocab, CLS, MASK, PAD};
use crate::diffengine::{GroupSpec, ParamStore};
use crate::error::{Error, Result};

/// Pattern tokens appended after the input text in prompting mode.
pub const PROMPT_SUFFIX: [&str; 2] = ["that", "is"];
pub const PROMPT_END: &str = ".";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub attention: bool,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: vec![16],
            attention: true,
            max_len: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidSpec("encoder dimensions must be positive".into()));
        }
        if self.max_len < 6 {
            return Err(Error::InvalidSpec(
                "max_len must leave room for [CLS], one token and the prompt suffix".into(),
            ));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.embed_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Classifier,
    Verbalizer,
}

impl Head {
    pub fn label(self) -> &'static str {
        match self {
            Head::Classifier => "FT",
            Head::Verbalizer => "PT",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Classifier => "classifier",
            Head::Verbalizer => "verbalizer",
        })
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" | "ft" | "finetuning" => Ok(Head::Classifier),
            "verbalizer" | "pt" | "prompting" => Ok(Head::Verbalizer),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

/// Encoded text, padded to exactly `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask_pos: Option<usize>,
}

impl TokenSequence {
    pub const CLS_POS: usize = 0;

    /// The non-padding prefix.
    pub fn tokens(&self) -> &[u32] {
        let n = self.ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        &self.ids[..n]
    }

    pub fn readout(&self, head: Head) -> Result<usize> {
        match head {
            Head::Classifier => Ok(Self::CLS_POS),
            Head::Verbalizer => self.mask_pos.ok_or(Error::HeadMismatch),
        }
    }
}

pub fn encode_plain(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        tokenize(text)
            .iter()
            .take(max_len.saturating_sub(1))
            .map(|t| vocab.id_or_unk(t)),
    );
    ids.resize(max_len, PAD);
    TokenSequence {
        ids,
        mask_pos: None,
    }
}

/// Encodes `text that is [MASK] .`, truncating the text so the suffix fits.
pub fn encode_prompt(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let budget = max_len.saturating_sub(1 + PROMPT_SUFFIX.len() + 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokenize(text).iter().take(budget).map(|t| vocab.id_or_unk(t)));
    ids.extend(PROMPT_SUFFIX.iter().map(|t| vocab.id_or_unk(t)));
    let mask_pos = ids.len();
    ids.push(MASK);
    ids.push(vocab.id_or_unk(PROMPT_END));
    ids.resize(max_len, PAD);
    TokenSequence {
        ids,
        mask_pos: Some(mask_pos),
    }
}

/// Offsets of every parameter group inside the flat vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub vocab: usize,
    pub dim: usize,
    pub embed: usize,
    pub attn: Option<[usize; 3]>,
    /// (weight offset, bias offset, fan-in, fan-out)
    pub ff: Vec<(usize, usize, usize, usize)>,
    pub out_dim: usize,
    pub cls_w: usize,
    pub cls_b: usize,
    pub mlm_w: usize,
    pub mlm_b: usize,
    pub prefix_end: usize,
    pub groups: Vec<GroupSpec>,
}

impl Layout {
    fn new(cfg: &EncoderConfig, vocab: usize) -> Self {
        let d = cfg.embed_dim;
        let mut groups = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            groups.push(GroupSpec {
                name,
                offset,
                len,
                shape,
            });
            offset += len;
            offset - len
        };
        let embed = push("embed".into(), vec![vocab, d]);
        let attn = cfg.attention.then(|| {
            [
                push("attn.query".into(), vec![d, d]),
                push("attn.key".into(), vec![d, d]),
                push("attn.value".into(), vec![d, d]),
            ]
        });
        let mut ff = Vec::new();
        let mut fan_in = d;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            let w = push(format!("ff.{i}.weight"), vec![h, fan_in]);
            let b = push(format!("ff.{i}.bias"), vec![h]);
            ff.push((w, b, fan_in, h));
            fan_in = h;
        }
        let out_dim = fan_in;
        let cls_w = push("cls.weight".into(), vec![2, out_dim]);
        let cls_b = push("cls.bias".into(), vec![2]);
        let mlm_w = push("mlm.weight".into(), vec![vocab, out_dim]);
        let mlm_b = push("mlm.bias".into(), vec![vocab]);
        let prefix_end = groups
            .iter()
            .find(|g| g.name.starts_with("ff.") || g.name.starts_with("cls."))
            .map_or(cls_w, |g| g.offset);
        Layout {
            vocab,
            dim: d,
            embed,
            attn,
            ff,
            out_dim,
            cls_w,
            cls_b,
            mlm_w,
            mlm_b,
            prefix_end,
            groups,
        }
    }

    pub fn total(&self) -> usize {
        self.groups.last().map_or(0, |g| g.offset + g.len)
    }
}

/// Loss readout kind, including the full-vocabulary MLM objective used in
/// pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LossHead {
    Classifier,
    Verbalizer,
    Mlm,
}

impl From<Head> for LossHead {
    fn from(h: Head) -> Self {
        match h {
            Head::Classifier => LossHead::Classifier,
            Head::Verbalizer => LossHead::Verbalizer,
        }
    }
}

/// A readout position and its target (class label or token id).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Readout {
    pub pos: usize,
    pub target: u32,
}

struct QueryState<S> {
    q: Vec<S>,
    attn: Vec<S>,
    out: Vec<S>,
}

struct PrefixState<S> {
    x: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    queries: Vec<QueryState<S>>,
}

#[derive(Debug, Clone)]
pub struct TextModel {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub verbalizer: Verbalizer,
    /// `[negative, positive]` vocabulary ids.
    verbalizer_ids: [u32; 2],
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct ModelDescriptor {
    config: EncoderConfig,
    verbalizer: Verbalizer,
}

impl TextModel {
    pub fn new(config: EncoderConfig, vocab: Vocab, verbalizer: Verbalizer) -> Result<Self> {
        config.validate()?;
        let verbalizer_ids = verbalizer.ids(&vocab)?;
        let layout = Layout::new(&config, vocab.len());
        Ok(Self {
            config,
            vocab,
            verbalizer,
            verbalizer_ids,
            layout,
        })
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn verbalizer_ids(&self) -> [u32; 2] {
        self.verbalizer_ids
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    pub fn descriptor_json(&self) -> serde_json::Value {
        serde_json::to_value(ModelDescriptor {
            config: self.config.clone(),
            verbalizer: self.verbalizer.clone(),
        })
        .expect("descriptor serializes")
    }

    pub fn from_descriptor(value: &serde_json::Value, vocab: Vocab) -> Result<Self> {
        let d: ModelDescriptor = serde_json::from_value(value.clone())?;
        Self::new(d.config, vocab, d.verbalizer)
    }

    /// Seeded random initialization; everything trainable.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total()];
        for g in &self.layout.groups {
            let std = if g.name == "embed" {
                0.5
            } else if g.name.ends_with("bias") {
                0.0
            } else if g.name == "cls.weight" {
                0.1 / (g.shape[1] as f64).sqrt()
            } else {
                1.0 / (g.shape[1] as f64).sqrt()
            };
            if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("valid std");
                for v in &mut values[g.offset..g.offset + g.len] {
                    *v = dist.sample(&mut rng);
                }
            }
        }
        ParamStore::new(values, self.layout.groups.clone())
    }

    /// Re-draws the classifier head, leaving the encoder and MLM head as-is.
    pub fn reinit_classifier(&self, params: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let out = self.layout.out_dim;
        let dist = Normal::new(0.0, 0.1 / (out as f64).sqrt()).expect("valid std");
        let l = &self.layout;
        for v in &mut params.values[l.cls_w..l.cls_w + 2 * out] {
            *v = dist.sample(&mut rng);
        }
        for v in &mut params.values[l.cls_b..l.cls_b + 2] {
            *v = 0.0;
        }
    }

    pub fn encode_plain(&self, text: &str) -> TokenSequence {
        encode_plain(text, &self.vocab, self.config.max_len)
    }

    pub fn encode_prompt(&self, text: &str) -> TokenSequence {
        encode_prompt(text, &self.vocab, self.config.max_len)
    }

    /// The encoding a head expects: plain text for the classifier, the cloze
    /// pattern for the verbalizer.
    pub fn encode(&self, text: &str, head: Head) -> TokenSequence {
        match head {
            Head::Classifier => self.encode_plain(text),
            Head::Verbalizer => self.encode_prompt(text),
        }
    }

    /// Two logits in label order (index 1 = humorous).
    pub fn forward(&self, params: &ParamStore, seq: &TokenSequence, head: Head) -> Result<[f64; 2]> {
        self.check_params(params)?;
        let pos = seq.readout(head)?;
        let toks = seq.tokens();
        let x0 = self.readout_features(&params.values, toks, &[pos]).remove(0);
        let hs = self.suffix_forward(&params.values, x0);
        let z = self.head_logits(&params.values, hs.last().expect("non-empty"), head.into());
        Ok([z[0], z[1]])
    }

    /// Full-vocabulary MLM logits at `pos`.
    pub fn mlm_logits(&self, params: &ParamStore, seq: &TokenSequence, pos: usize) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let x0 = self.readout_features(&params.values, seq.tokens(), &[pos]).remove(0);
        let hs = self.suffix_forward(&params.values, x0);
        Ok(self.head_logits(&params.values, hs.last().expect("non-empty"), LossHead::Mlm))
    }

    /// Embedding + attention output at the readout position of `head`, the
    /// input to the feed-forward stack.
    pub fn readout_input(&self, params: &ParamStore, seq: &TokenSequence, head: Head) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let pos = seq.readout(head)?;
        Ok(self.readout_features(&params.values, seq.tokens(), &[pos]).remove(0))
    }

    pub fn predict(&self, params: &ParamStore, seq: &TokenSequence, head: Head) -> Result<u8> {
        Ok(predicted_label(self.forward(params, seq, head)?))
    }

    fn check_params(&self, params: &ParamStore) -> Result<()> {
        if params.values.len() != self.layout.total() {
            return Err(Error::Shape {
                expected: self.layout.total(),
                got: params.values.len(),
            });
        }
        Ok(())
    }

    /// Output of the embedding + attention prefix at each readout position.
    pub(crate) fn readout_features<S: Scalar>(&self, p: &[S], toks: &[u32], positions: &[usize]) -> Vec<Vec<S>> {
        self.prefix_forward(p, toks, positions)
            .queries
            .into_iter()
            .map(|q| q.out)
            .collect()
    }

    fn prefix_forward<S: Scalar>(&self, p: &[S], toks: &[u32], positions: &[usize]) -> PrefixState<S> {
        let l = &self.layout;
        let d = l.dim;
        let n = toks.len();
        let mut x = Vec::with_capacity(n * d);
        for &t in toks {
            let row = l.embed + t as usize * d;
            x.extend_from_slice(&p[row..row + d]);
        }
        let Some([wq, wk, wv]) = l.attn else {
            let queries = positions
                .iter()
                .map(|&pos| QueryState {
                    q: Vec::new(),
                    attn: Vec::new(),
                    out: x[pos * d..(pos + 1) * d].to_vec(),
                })
                .collect();
            return PrefixState {
                x,
                k: Vec::new(),
                v: Vec::new(),
                queries,
            };
        };
        let mut k = vec![S::zero(); n * d];
        let mut v = vec![S::zero(); n * d];
        for j in 0..n {
            let xj = &x[j * d..(j + 1) * d];
            matvec(&p[wk..wk + d * d], xj, &mut k[j * d..(j + 1) * d]);
            matvec(&p[wv..wv + d * d], xj, &mut v[j * d..(j + 1) * d]);
        }
        let c = 1.0 / (d as f64).sqrt();
        let queries = positions
            .iter()
            .map(|&pos| {
                let xp = &x[pos * d..(pos + 1) * d];
                let mut q = vec![S::zero(); d];
                matvec(&p[wq..wq + d * d], xp, &mut q);
                let scores: Vec<S> = (0..n).map(|j| dot(&q, &k[j * d..(j + 1) * d]).scale(c)).collect();
                let attn = softmax(&scores);
                let mut out = xp.to_vec();
                for j in 0..n {
                    for (o, &vj) in out.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                        *o += attn[j] * vj;
                    }
                }
                QueryState { q, attn, out }
            })
            .collect();
        PrefixState { x, k, v, queries }
    }

    fn prefix_backward<S: Scalar>(&self, p: &[S], toks: &[u32], positions: &[usize], st: &PrefixState<S>, g_outs: &[Vec<S>], grad: &mut [S]) {
        let l = &self.layout;
        let d = l.dim;
        let n = toks.len();
        let mut g_x = vec![S::zero(); n * d];
        match l.attn {
            None => {
                for (&pos, g) in positions.iter().zip(g_outs) {
                    add_into(&mut g_x[pos * d..(pos + 1) * d], g);
                }
            }
            Some([wq, wk, wv]) => {
                let c = 1.0 / (d as f64).sqrt();
                let mut g_k = vec![S::zero(); n * d];
                let mut g_v = vec![S::zero(); n * d];
                for ((&pos, qs), g_out) in positions.iter().zip(&st.queries).zip(g_outs) {
                    add_into(&mut g_x[pos * d..(pos + 1) * d], g_out);
                    let g_a: Vec<S> = (0..n).map(|j| dot(g_out, &st.v[j * d..(j + 1) * d])).collect();
                    let mut avg = S::zero();
                    for j in 0..n {
                        avg += qs.attn[j] * g_a[j];
                    }
                    let mut g_q = vec![S::zero(); d];
                    for j in 0..n {
                        let aj = qs.attn[j];
                        for (gv, &go) in g_v[j * d..(j + 1) * d].iter_mut().zip(g_out) {
                            *gv += aj * go;
                        }
                        let g_s = (aj * (g_a[j] - avg)).scale(c);
                        for (gq, &kj) in g_q.iter_mut().zip(&st.k[j * d..(j + 1) * d]) {
                            *gq += g_s * kj;
                        }
                        for (gk, &qv) in g_k[j * d..(j + 1) * d].iter_mut().zip(&qs.q) {
                            *gk += g_s * qv;
                        }
                    }
                    let xp = &st.x[pos * d..(pos + 1) * d];
                    outer_add(&mut grad[wq..wq + d * d], &g_q, xp);
                    matvec_t_add(&p[wq..wq + d * d], &g_q, &mut g_x[pos * d..(pos + 1) * d]);
                }
                for j in 0..n {
                    let xj = &st.x[j * d..(j + 1) * d];
                    let gkj = &g_k[j * d..(j + 1) * d];
                    let gvj = &g_v[j * d..(j + 1) * d];
                    outer_add(&mut grad[wk..wk + d * d], gkj, xj);
                    outer_add(&mut grad[wv..wv + d * d], gvj, xj);
                    matvec_t_add(&p[wk..wk + d * d], gkj, &mut g_x[j * d..(j + 1) * d]);
                    matvec_t_add(&p[wv..wv + d * d], gvj, &mut g_x[j * d..(j + 1) * d]);
                }
            }
        }
        for (j, &t) in toks.iter().enumerate() {
            let row = l.embed + t as usize * d;
            add_into(&mut grad[row..row + d], &g_x[j * d..(j + 1) * d]);
        }
    }

    /// Feed-forward activations; element 0 is the input.
    fn suffix_forward<S: Scalar>(&self, p: &[S], x0: Vec<S>) -> Vec<Vec<S>> {
        let mut hs = Vec::with_capacity(self.layout.ff.len() + 1);
        hs.push(x0);
        for &(w, b, fan_in, fan_out) in &self.layout.ff {
            let prev = hs.last().expect("non-empty");
            let mut z = p[b..b + fan_out].to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                *zo += dot(&p[w + o * fan_in..w + (o + 1) * fan_in], prev);
            }
            hs.push(z.into_iter().map(Scalar::tanh).collect());
        }
        hs
    }

    fn suffix_backward<S: Scalar>(&self, p: &[S], hs: &[Vec<S>], g_last: Vec<S>, grad: &mut [S]) -> Vec<S> {
        let mut g_h = g_last;
        for (layer, &(w, b, fan_in, fan_out)) in self.layout.ff.iter().enumerate().rev() {
            let h = &hs[layer + 1];
            let prev = &hs[layer];
            let g_z: Vec<S> = g_h
                .iter()
                .zip(h)
                .map(|(&g, &hv)| g * (S::from_f64(1.0) - hv * hv))
                .collect();
            add_into(&mut grad[b..b + fan_out], &g_z);
            outer_add(&mut grad[w..w + fan_out * fan_in], &g_z, prev);
            let mut g_prev = vec![S::zero(); fan_in];
            matvec_t_add(&p[w..w + fan_out * fan_in], &g_z, &mut g_prev);
            g_h = g_prev;
        }
        g_h
    }

    fn head_rows(&self, head: LossHead) -> (usize, usize, Vec<usize>) {
        let l = &self.layout;
        match head {
            LossHead::Classifier => (l.cls_w, l.cls_b, vec![0, 1]),
            LossHead::Verbalizer => (
                l.mlm_w,
                l.mlm_b,
                self.verbalizer_ids.iter().map(|&i| i as usize).collect(),
            ),
            LossHead::Mlm => (l.mlm_w, l.mlm_b, (0..l.vocab).collect()),
        }
    }

    fn head_logits<S: Scalar>(&self, p: &[S], h: &[S], head: LossHead) -> Vec<S> {
        let out = self.layout.out_dim;
        let (w, b, rows) = self.head_rows(head);
        rows.iter()
            .map(|&r| p[b + r] + dot(&p[w + r * out..w + (r + 1) * out], h))
            .collect()
    }

    fn head_backward<S: Scalar>(&self, p: &[S], h: &[S], head: LossHead, g_z: &[S], grad: &mut [S]) -> Vec<S> {
        let out = self.layout.out_dim;
        let (w, b, rows) = self.head_rows(head);
        let mut g_h = vec![S::zero(); out];
        for (&r, &g) in rows.iter().zip(g_z) {
            grad[b + r] += g;
            let row = w + r * out;
            for i in 0..out {
                grad[row + i] += g * h[i];
                g_h[i] += g * p[row + i];
            }
        }
        g_h
    }

    /// `weight * sum of cross-entropies` over `readouts`, accumulating the
    /// gradient into `grad` when given. `cached` replaces the prefix pass
    /// with precomputed features (valid only when the prefix is frozen);
    /// `prefix_grad = false` skips back-propagation into the prefix.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn example_loss<S: Scalar>(
        &self,
        p: &[S],
        toks: &[u32],
        readouts: &[Readout],
        head: LossHead,
        cached: Option<&[Vec<f64>]>,
        weight: f64,
        mut grad: Option<&mut [S]>,
        prefix_grad: bool,
    ) -> S {
        let positions: Vec<usize> = readouts.iter().map(|r| r.pos).collect();
        let (prefix, feats): (Option<PrefixState<S>>, Vec<Vec<S>>) = match cached {
            Some(c) => (
                None,
                c.iter()
                    .map(|f| f.iter().map(|&x| S::from_f64(x)).collect())
                    .collect(),
            ),
            None => {
                let st = self.prefix_forward(p, toks, &positions);
                let feats = st.queries.iter().map(|q| q.out.clone()).collect();
                (Some(st), feats)
            }
        };
        let mut total = S::zero();
        let mut g_outs = Vec::with_capacity(readouts.len());
        for (r, x0) in readouts.iter().zip(feats) {
            let hs = self.suffix_forward(p, x0);
            let h = hs.last().expect("non-empty");
            let z = self.head_logits(p, h, head);
            let (loss, probs) = cross_entropy(&z, r.target as usize);
            total += loss.scale(weight);
            if let Some(g) = grad.as_deref_mut() {
                let mut g_z = probs;
                g_z[r.target as usize] -= S::from_f64(1.0);
                for gz in &mut g_z {
                    *gz = gz.scale(weight);
                }
                let g_h = self.head_backward(p, h, head, &g_z, g);
                let g_x0 = self.suffix_backward(p, &hs, g_h, g);
                g_outs.push(g_x0);
            }
        }
        if prefix_grad {
            if let (Some(g), Some(st)) = (grad, prefix.as_ref()) {
                self.prefix_backward(p, toks, &positions, st, &g_outs, g);
            }
        }
        total
    }
}

/// Label 1 iff its logit is strictly larger; ties go to label 0.
pub fn predicted_label(logits: [f64; 2]) -> u8 {
    (logits[1] > logits[0]) as u8
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y = W x` with `W` row-major (rows = y.len()).
#[inline]
fn matvec<S: Scalar>(w: &[S], x: &[S], y: &mut [S]) {
    let n = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = dot(&w[o * n..(o + 1) * n], x);
    }
}

/// `y += Wᵀ g`.
#[inline]
fn matvec_t_add<S: Scalar>(w: &[S], g: &[S], y: &mut [S]) {
    let n = y.len();
    for (o, &go) in g.iter().enumerate() {
        for (yi, &wi) in y.iter_mut().zip(&w[o * n..(o + 1) * n]) {
            *yi += wi * go;
        }
    }
}

/// `G += a ⊗ b` (rows indexed by `a`).
#[inline]
fn outer_add<S: Scalar>(gm: &mut [S], a: &[S], b: &[S]) {
    let n = b.len();
    for (o, &ao) in a.iter().enumerate() {
        for (gi, &bi) in gm[o * n..(o + 1) * n].iter_mut().zip(b) {
            *gi += ao * bi;
        }
    }
}

#[inline]
fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax<S: Scalar>(z: &[S]) -> Vec<S> {
    let m = z.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = z.iter().map(|&v| (v - S::from_f64(m)).exp()).collect();
    let mut sum = S::zero();
    for &x in &e {
        sum += x;
    }
    e.into_iter().map(|x| x / sum).collect()
}

/// Returns the loss and the softmax probabilities.
fn cross_entropy<S: Scalar>(z: &[S], target: usize) -> (S, Vec<S>) {
    let m = z.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = S::zero();
    let e: Vec<S> = z.iter().map(|&v| (v - S::from_f64(m)).exp()).collect();
    for &x in &e {
        sum += x;
    }
    let lse = sum.ln() + S::from_f64(m);
    let probs = e.into_iter().map(|x| x / sum).collect();
    (lse - z[target], probs)
}

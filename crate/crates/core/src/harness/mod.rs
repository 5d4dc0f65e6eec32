//! Batch experiment runner behind the `humorlab` CLI.
//!
//! Every subcommand reads a [`Config`], works inside one output directory
//! and writes its artifacts atomically. Missing upstream artifacts (corpus,
//! splits, vocabulary, pretrained encoder, trained heads, influence reports)
//! are produced on demand, so any subcommand can be run first.

pub mod config;
pub mod io;
pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::corpus::{
    build_keyword_subset, cell_counts, few_shot_sample, generate_synthetic, load_jsonl, load_keywords, parse_jsonl,
    point_biserial, reference_offense, sample_examples, Dataset, SplitTag,
};
use crate::diffengine::{relative_error, BatchObjective, ParamStore};
use crate::error::{Error, Result};
use crate::influence::{z_normalize, DampedHessian, InfluenceEngine, InfluenceReport, LissaConfig, Method, RankMode};
use crate::oracle::{
    convex_fixture, grad_check, influence_loo_correlation, ConvexSpec, GradCheckReport, LooOracle, TestPoint,
};
use crate::textmodel::{Head, TextModel, Vocab};
use crate::trainer::{evaluate, expand_selectors, labeled, pretrain_mlm, repeat_runs, train_head, FewShotProtocol, RunMetrics, TrainConfig};

pub use config::Config;
use report::{format_fewshot_table, format_offense_table, offense_histogram, topk_offense_table, HistogramSpec, OffenseTableRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Subset,
    Pretrain,
    Train,
    Eval,
    Influence,
    Loo,
    Report,
    Check,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Synth,
        Command::Subset,
        Command::Pretrain,
        Command::Train,
        Command::Eval,
        Command::Influence,
        Command::Loo,
        Command::Report,
        Command::Check,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Subset => "subset",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Influence => "influence",
            Command::Loo => "loo",
            Command::Report => "report",
            Command::Check => "check",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

/// Command-line overrides layered on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub method: Option<Method>,
    pub head: Option<Head>,
    pub mode: Option<RankMode>,
    pub ks: Vec<usize>,
}

/// Process exit status for a failed run: 2 for configuration problems,
/// 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn resolve_config(opts: &RunOptions) -> Result<Config> {
    let mut config = match &opts.config {
        Some(path) => Config::load(path, opts.seed)?,
        None => Config::with_seed(opts.seed.unwrap_or(0)),
    };
    if let Some(m) = opts.method {
        config.influence.method = m;
        config.loo.method = Some(m);
    }
    if let Some(m) = opts.mode {
        config.influence.mode = m;
    }
    if let Some(h) = opts.head {
        config.heads = vec![h];
    }
    if !opts.ks.is_empty() {
        config.influence.ks = opts.ks.clone();
    }
    config.validate()?;
    Ok(config)
}

pub fn run(command: Command, opts: &RunOptions) -> Result<()> {
    let config = resolve_config(opts)?;
    let ws = Workspace::new(&opts.out, config)?;
    match command {
        Command::Synth => ws.synth().map(drop),
        Command::Subset => ws.subset().map(drop),
        Command::Pretrain => ws.pretrain().map(drop),
        Command::Train => ws.train_all(),
        Command::Eval => ws.eval(),
        Command::Influence => ws.influence_all(),
        Command::Loo => ws.loo(),
        Command::Report => ws.report(),
        Command::Check => ws.check(),
    }
}

fn head_tag(head: Head) -> &'static str {
    match head {
        Head::Classifier => "ft",
        Head::Verbalizer => "pt",
    }
}

/// An output directory bound to one resolved configuration.
pub struct Workspace {
    pub out: PathBuf,
    pub config: Config,
}

impl Workspace {
    pub fn new(out: &Path, config: Config) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            config,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn header(&self) -> Value {
        json!({ "seed": self.config.seed, "config": self.config.to_json() })
    }

    fn with_header(&self, body: Value) -> Value {
        let mut v = self.header();
        if let (Value::Object(m), Value::Object(b)) = (&mut v, body) {
            m.extend(b);
        }
        v
    }

    fn log(&self, msg: &str) {
        eprintln!("[humorlab] {msg}");
    }

    /// Writes rows as CSV preceded by `#` lines carrying the seed and the
    /// resolved config.
    fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut text = format!(
            "# seed: {}\n# config: {}\n",
            self.config.seed,
            serde_json::to_string(&self.config.to_json())?
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let body = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        text.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        io::write_atomic(&self.path(name), text.as_bytes())
    }

    fn update_metrics(&self, section: &str, value: Value) -> Result<()> {
        let path = self.path("metrics.json");
        let mut metrics = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => json!({}),
        };
        let header = self.header();
        let m = metrics.as_object_mut().ok_or_else(|| Error::Serde("metrics.json is not an object".into()))?;
        m.insert("seed".into(), header["seed"].clone());
        m.insert("config".into(), header["config"].clone());
        m.insert(section.into(), value);
        io::write_json(&path, &metrics)
    }

    // ---- data ----

    pub fn synth(&self) -> Result<Dataset> {
        let data = match &self.config.data.corpus {
            Some(path) => load_jsonl(path)?,
            None => generate_synthetic(&self.config.synthetic)?,
        };
        io::write_atomic(&self.path("corpus.jsonl"), data.to_jsonl().as_bytes())?;
        let (pos, neg) = data.class_counts();
        io::write_json(
            &self.path("corpus.json"),
            &self.with_header(json!({
                "examples": data.len(),
                "humorous": pos,
                "non_humorous": neg,
                "reference_offense": reference_offense(&data)?,
                "humor_offense_correlation": point_biserial(&data),
            })),
        )?;
        self.log(&format!("corpus: {} examples", data.len()));
        Ok(data)
    }

    fn corpus(&self) -> Result<Dataset> {
        match std::fs::read_to_string(self.path("corpus.jsonl")) {
            Ok(text) => parse_jsonl(&text),
            Err(_) => self.synth(),
        }
    }

    fn keywords(&self) -> Result<Vec<String>> {
        match &self.config.data.keywords {
            Some(path) => load_keywords(path),
            None => Ok(self.config.subset.keywords.clone()),
        }
    }

    pub fn subset(&self) -> Result<(Dataset, Dataset)> {
        let data = self.corpus()?;
        let spec = crate::corpus::SubsetSpec {
            keywords: self.keywords()?,
            ..self.config.subset.clone()
        };
        let (train, test) = build_keyword_subset(&data, &spec)?;
        io::write_atomic(&self.path("train.jsonl"), train.to_jsonl().as_bytes())?;
        io::write_atomic(&self.path("test.jsonl"), test.to_jsonl().as_bytes())?;
        let cells = |d: &Dataset| -> Value {
            cell_counts(d, &spec.keywords)
                .into_iter()
                .map(|((matched, humor), n)| {
                    (
                        format!("{}/humor={humor}", if matched { "matched" } else { "unmatched" }),
                        json!(n),
                    )
                })
                .collect::<serde_json::Map<_, _>>()
                .into()
        };
        io::write_json(
            &self.path("subset.json"),
            &self.with_header(json!({
                "train": train.len(),
                "test": test.len(),
                "train_cells": cells(&train),
                "test_cells": cells(&test),
                "reference_offense": reference_offense(&train)?,
            })),
        )?;
        self.log(&format!("subset: {} train, {} test", train.len(), test.len()));
        Ok((train, test))
    }

    fn split(&self, name: &str, tag: SplitTag) -> Result<Option<Dataset>> {
        match std::fs::read_to_string(self.path(name)) {
            Ok(text) => {
                let d = parse_jsonl(&text)?;
                Ok(Some(Dataset::new(d.examples, tag)?))
            }
            Err(_) => Ok(None),
        }
    }

    pub fn splits(&self) -> Result<(Dataset, Dataset)> {
        match (
            self.split("train.jsonl", SplitTag::Train)?,
            self.split("test.jsonl", SplitTag::Test)?,
        ) {
            (Some(train), Some(test)) => Ok((train, test)),
            _ => self.subset(),
        }
    }

    /// `n_test` test examples, half from each class (fewer when a class
    /// runs short), shared by both heads.
    pub fn test_sample(&self, test: &Dataset, n: usize) -> Result<Dataset> {
        let by_class = |class: u8| Dataset {
            examples: test.examples.iter().filter(|e| e.humor == class).cloned().collect(),
            split: SplitTag::Test,
        };
        let pos = sample_examples(&by_class(1), n / 2, self.config.seed);
        let neg = sample_examples(&by_class(0), n - n / 2, self.config.seed.wrapping_add(1));
        let keep: std::collections::BTreeSet<u64> = pos.examples.iter().chain(&neg.examples).map(|e| e.id).collect();
        Dataset::new(
            test.examples.iter().filter(|e| keep.contains(&e.id)).cloned().collect(),
            SplitTag::Test,
        )
    }

    // ---- model ----

    pub fn model(&self) -> Result<TextModel> {
        let vocab = match std::fs::read_to_string(self.path("vocab.json")) {
            Ok(text) => Vocab::from_json(&text)?,
            Err(_) => {
                let (train, _) = self.splits()?;
                let v = Vocab::build(&train, self.config.data.min_freq, &self.config.verbalizer);
                io::write_atomic(&self.path("vocab.json"), v.to_json().as_bytes())?;
                v
            }
        };
        let model = TextModel::new(self.config.encoder.clone(), vocab, self.config.verbalizer.clone())?;
        io::write_json(&self.path("model.json"), &self.with_header(model.descriptor_json()))?;
        Ok(model)
    }

    pub fn pretrain(&self) -> Result<ParamStore> {
        let model = self.model()?;
        let (train, _) = self.splits()?;
        let init = model.init_params(self.config.seed);
        let (params, losses) = if self.config.pretrain.enabled {
            let t = pretrain_mlm(&model, &init, &train, &self.config.pretrain.train, self.config.pretrain.mask_fraction)?;
            (t.params, t.losses)
        } else {
            (init, Vec::new())
        };
        params.save(&self.path("pretrained"), self.with_header(json!({ "losses": losses })))?;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            self.log(&format!("pretrain: masked-token loss {first:.4} -> {last:.4}"));
        }
        Ok(params)
    }

    fn pretrained(&self) -> Result<ParamStore> {
        match ParamStore::load(&self.path("pretrained")) {
            Ok((p, _)) => Ok(p),
            Err(_) => self.pretrain(),
        }
    }

    /// Starting point for supervised training: the pretrained encoder, with
    /// a freshly seeded classifier for the finetuning head.
    fn head_init(&self, model: &TextModel, head: Head, seed: u64) -> Result<ParamStore> {
        let mut p = self.pretrained()?;
        if head == Head::Classifier {
            model.reinit_classifier(&mut p, seed);
        }
        Ok(p)
    }

    fn stem(&self, head: Head, shots: Option<usize>) -> PathBuf {
        match shots {
            Some(n) => self.path(&format!("{}-{n}shot", head_tag(head))),
            None => self.path(head_tag(head)),
        }
    }

    /// Trains `head` on the full split (or on a class-balanced sample of
    /// `shots` examples) and saves it.
    pub fn train(&self, head: Head, shots: Option<usize>) -> Result<(ParamStore, Dataset)> {
        let model = self.model()?;
        let (full, test) = self.splits()?;
        let train = match shots {
            Some(n) => few_shot_sample(&full, n, self.config.seed)?,
            None => full,
        };
        let cfg = if shots.is_some() { self.config.fewshot_train() } else { &self.config.train };
        let init = self.head_init(&model, head, cfg.seed)?;
        let trained = train_head(&model, &init, &train, cfg, head)?;
        let scores = evaluate(&model, &trained.params, &test, head)?;
        trained.params.save(
            &self.stem(head, shots),
            self.with_header(json!({
                "head": head,
                "shots": shots,
                "train_ids": train.examples.iter().map(|e| e.id).collect::<Vec<_>>(),
                "losses": trained.losses,
                "test": scores,
            })),
        )?;
        self.log(&format!("train {head}: test accuracy {:.4}, F1 {:.4}", scores.accuracy, scores.f1));
        Ok((trained.params, train))
    }

    fn trained(&self, head: Head, shots: Option<usize>) -> Result<(ParamStore, Dataset)> {
        match ParamStore::load(&self.stem(head, shots)) {
            Ok((p, meta)) => {
                let (full, _) = self.splits()?;
                let ids: Vec<u64> = serde_json::from_value(meta["train_ids"].clone())?;
                let examples = ids
                    .iter()
                    .map(|id| full.get(*id).cloned().ok_or(Error::UnknownId(*id)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((p, Dataset::new(examples, SplitTag::Train)?))
            }
            Err(_) => self.train(head, shots),
        }
    }

    fn train_all(&self) -> Result<()> {
        let model = self.model()?;
        let (_, test) = self.splits()?;
        let mut section = serde_json::Map::new();
        for &head in &self.config.heads {
            let (params, _) = self.train(head, None)?;
            let s = evaluate(&model, &params, &test, head)?;
            section.insert(head.to_string(), json!({ "accuracy": s.accuracy, "f1": s.f1 }));
        }
        self.update_metrics("train", section.into())
    }

    fn eval(&self) -> Result<()> {
        let model = self.model()?;
        let (train, test) = self.splits()?;
        let mut section = serde_json::Map::new();
        for &head in &self.config.heads {
            let (params, source) = match ParamStore::load(&self.stem(head, None)) {
                Ok((p, _)) => (p, "trained"),
                Err(_) => (model.init_params(self.config.seed), "untrained"),
            };
            let s = evaluate(&model, &params, &test, head)?;
            self.log(&format!("eval {head} ({source}): accuracy {:.4}, F1 {:.4}", s.accuracy, s.f1));
            section.insert(head.to_string(), json!({ "params": source, "accuracy": s.accuracy, "f1": s.f1 }));
        }
        self.update_metrics("eval", section.into())?;

        let fs = &self.config.fewshot;
        if fs.shots.is_empty() || fs.repeats == 0 {
            return Ok(());
        }
        let pretrained = self.pretrained()?;
        let seeds: Vec<u64> = (0..fs.repeats as u64).map(|r| self.config.seed + r).collect();
        let mut table: Vec<(String, Vec<RunMetrics>)> = Vec::new();
        let mut rows = Vec::new();
        for &head in &self.config.heads {
            let mut per_shot = Vec::new();
            for &shots in &fs.shots {
                let protocol = FewShotProtocol {
                    model: &model,
                    init: &pretrained,
                    pool: &train,
                    test: &test,
                    shots: Some(shots),
                    head,
                };
                let m = repeat_runs(self.config.fewshot_train(), &seeds, &protocol)?;
                self.log(&format!(
                    "{}-shot {head}: accuracy {:.3} ({:.3})",
                    shots, m.accuracy.mean, m.accuracy.std
                ));
                for r in &m.runs {
                    rows.push(FewShotRow {
                        method: head.label().into(),
                        shots,
                        seed: r.seed,
                        accuracy: r.accuracy,
                        f1: r.f1,
                    });
                }
                per_shot.push(m);
            }
            table.push((head.label().to_string(), per_shot));
        }
        self.write_csv("fewshot.csv", &rows)?;
        io::write_atomic(
            &self.path("fewshot_table.txt"),
            format_fewshot_table(&fs.shots, &table).as_bytes(),
        )?;
        let summary: serde_json::Map<String, Value> = table
            .iter()
            .map(|(label, ms)| {
                let cells: serde_json::Map<String, Value> = fs
                    .shots
                    .iter()
                    .zip(ms)
                    .map(|(s, m)| (s.to_string(), json!({ "accuracy": m.accuracy, "f1": m.f1 })))
                    .collect();
                (label.clone(), cells.into())
            })
            .collect();
        self.update_metrics("fewshot", summary.into())
    }

    // ---- influence ----

    fn influence_dir(&self, head: Head) -> PathBuf {
        self.path("influence").join(head_tag(head))
    }

    /// Influence reports for every sampled test example under `head`.
    pub fn influence(&self, head: Head) -> Result<(Vec<InfluenceReport>, Dataset)> {
        let model = self.model()?;
        let shots = self.config.influence.shots;
        let (mut params, train) = self.trained(head, shots)?;
        if let Some(sel) = &self.config.influence.trainable {
            model.set_trainable(&mut params, &expand_selectors(sel, head))?;
        }
        let (_, test) = self.splits()?;
        let sample = self.test_sample(&test, self.config.influence.n_test)?;
        let engine = InfluenceEngine::new(&model, &params, &train, head, self.config.influence.method, &self.config.lissa)?;
        let mode = self.config.influence.mode;
        let extra = self.with_header(json!({
            "head": head,
            "shots": shots,
            "lissa": self.config.lissa,
            "trainable_dim": engine.dim(),
        }));
        let reports = sample
            .examples
            .par_iter()
            .map(|e| {
                let mut r = engine.report(e.id, &model.encode(&e.text, head), e.humor, mode)?;
                r.config = extra.clone();
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        let dir = self.influence_dir(head);
        for r in &reports {
            io::write_json(&dir.join(format!("{}.json", r.test_id)), &serde_json::to_value(r)?)?;
        }
        self.log(&format!("influence {head}: {} reports in {}", reports.len(), dir.display()));
        Ok((reports, train))
    }

    fn influence_all(&self) -> Result<()> {
        for &head in &self.config.heads {
            self.influence(head)?;
        }
        Ok(())
    }

    fn stored_reports(&self, head: Head) -> Result<Option<(Vec<InfluenceReport>, Dataset)>> {
        let (_, test) = self.splits()?;
        let sample = self.test_sample(&test, self.config.influence.n_test)?;
        let dir = self.influence_dir(head);
        let mut reports = Vec::new();
        for e in &sample.examples {
            let Ok(text) = std::fs::read_to_string(dir.join(format!("{}.json", e.id))) else {
                return Ok(None);
            };
            let r: InfluenceReport = serde_json::from_str(&text)?;
            if r.mode != self.config.influence.mode || r.method != self.config.influence.method {
                return Ok(None);
            }
            reports.push(r);
        }
        let (_, train) = self.trained(head, self.config.influence.shots)?;
        Ok(Some((reports, train)))
    }

    fn report(&self) -> Result<()> {
        let ic = &self.config.influence;
        let spec = HistogramSpec {
            bin_width: ic.bin_width,
            ..HistogramSpec::default()
        };
        let mut rows: Vec<OffenseTableRow> = Vec::new();
        let mut hist_rows = Vec::new();
        let mut hists = serde_json::Map::new();
        for &head in &self.config.heads {
            let (reports, train) = match self.stored_reports(head)? {
                Some(x) => x,
                None => self.influence(head)?,
            };
            rows.extend(topk_offense_table(head.label(), &reports, &train, &ic.ks, ic.mode)?);
            let h = offense_histogram(&reports, &train, ic.histogram_k, ic.mode, spec)?;
            for (series, counts) in [("pos", &h.pos), ("neg", &h.neg)] {
                for (bin, &count) in counts.iter().enumerate() {
                    let (lo, hi) = spec.edges(bin);
                    hist_rows.push(HistogramRow {
                        method: head.label().into(),
                        k: h.k,
                        series: series.into(),
                        bin_lo: lo,
                        bin_hi: hi,
                        count,
                    });
                }
            }
            hists.insert(head.label().into(), serde_json::to_value(&h)?);
        }
        self.write_csv("offense_table.csv", &rows)?;
        self.write_csv("histogram.csv", &hist_rows)?;
        let text = format_offense_table(&rows);
        io::write_atomic(&self.path("offense_table.txt"), text.as_bytes())?;
        io::write_json(
            &self.path("report.json"),
            &self.with_header(json!({ "offense_table": rows, "histograms": hists })),
        )?;
        print!("{text}");
        Ok(())
    }

    // ---- verification ----

    fn loo(&self) -> Result<()> {
        let head = self.config.heads[0];
        let model = self.model()?;
        let (full, test) = self.splits()?;
        let train = few_shot_sample(&full, self.config.loo.train_size, self.config.seed)?;
        let cfg = if self.config.loo.convex {
            TrainConfig::convex(self.config.lissa.damping, self.config.train.seed)
        } else {
            self.config.train.clone()
        };
        let init = self.head_init(&model, head, cfg.seed)?;
        let points: Vec<TestPoint> = TestPoint::from_dataset(&model, &self.test_sample(&test, self.config.influence.n_test)?, head)
            .into_iter()
            .take(self.config.loo.n_test)
            .collect();
        let oracle = LooOracle::new(&model, &init, &train, &cfg, head)?;
        let sweeps = oracle.sweep(&points)?;
        let method = self.config.loo.method.unwrap_or(self.config.influence.method);
        let engine = InfluenceEngine::new(&model, oracle.full_params(), &train, head, method, &self.config.lissa)?;
        let mut rows = Vec::new();
        let mut summary = Vec::new();
        for (p, loo) in points.iter().zip(&sweeps) {
            let r = engine.report(p.id, &p.seq, p.label, self.config.influence.mode)?;
            let c = influence_loo_correlation(&r, loo)?;
            for (s, l) in r.scores.iter().zip(loo) {
                rows.push(LooRow {
                    test_id: p.id,
                    train_id: s.train_id,
                    delta: l.delta,
                    raw_score: s.raw,
                    z_score: s.z,
                });
            }
            self.log(&format!("loo {head} test {}: pearson {:?}, spearman {:?}", p.id, c.pearson, c.spearman));
            summary.push(json!({ "test_id": p.id, "correlation": c }));
        }
        self.write_csv("loo.csv", &rows)?;
        io::write_json(
            &self.path("loo.json"),
            &self.with_header(json!({ "head": head, "method": method, "train_size": train.len(), "tests": summary })),
        )
    }

    fn check(&self) -> Result<()> {
        let model = self.model()?;
        let (train, _) = self.splits()?;
        let batch_data = sample_examples(&train, 16, self.config.seed);
        let init = model.init_params(self.config.seed);
        let mut checks: Vec<Value> = Vec::new();
        let mut ok = true;
        for &head in &self.config.heads {
            let mut p = init.clone();
            model.set_trainable(&mut p, &self.config.train.selectors(head))?;
            let batch = labeled(&model, &batch_data, head);
            let r: GradCheckReport = grad_check(&model, &p, &batch, head, 1e-5, self.config.seed)?;
            let pass = r.grad_error < 1e-4 && r.hvp_error < 1e-3;
            ok &= pass;
            self.log(&format!(
                "check {head}: gradient error {:.2e}, HVP error {:.2e} over {} trainable parameters",
                r.grad_error,
                r.hvp_error,
                p.trainable_dim()
            ));
            checks.push(json!({ "check": "derivatives", "head": head, "trainable": p.trainable_dim(), "report": r, "pass": pass }));

            let f = convex_fixture(
                &ConvexSpec {
                    seed: self.config.seed,
                    damping: self.config.lissa.damping,
                    ..ConvexSpec::default()
                },
                head,
            )?;
            let trained = train_head(&f.model, &f.init, &f.train, &f.cfg, head)?.params;
            let lissa_cfg = LissaConfig {
                damping: self.config.lissa.damping,
                hvp_batch_size: f.train.len(),
                seed: self.config.seed,
                ..LissaConfig::default()
            };
            let obj = BatchObjective::new(&f.model, &trained, &labeled(&f.model, &f.train, head), head)?;
            let dense = DampedHessian::assemble(&obj, lissa_cfg.damping)?;
            let engine = InfluenceEngine::new(&f.model, &trained, &f.train, head, Method::Lissa, &lissa_cfg)?;
            let (mut residual, mut lissa_err): (f64, f64) = (0.0, 0.0);
            for p in TestPoint::from_dataset(&f.model, &f.test, head) {
                let g = engine.test_gradient(&p.seq, p.label)?;
                let x = dense.solve(&g)?;
                residual = residual.max(dense.relative_residual(&x, &g));
                let y = engine.inverse_hvp(&g)?;
                lissa_err = lissa_err.max(relative_error(&y.0, &x.0, 0.0));
            }
            let pass = residual < 1e-8 && lissa_err < 0.05;
            ok &= pass;
            self.log(&format!("check {head}: exact residual {residual:.2e}, LiSSA relative error {lissa_err:.2e}"));
            checks.push(json!({ "check": "inverse_hvp", "head": head, "residual": residual, "lissa_error": lissa_err, "pass": pass }));
        }
        let z = z_normalize(&[1.0, 2.0, 3.0])?;
        let pass = (z.values[2] - 1.5f64.sqrt()).abs() < 1e-12;
        ok &= pass;
        checks.push(json!({ "check": "z_normalize", "pass": pass }));
        io::write_json(&self.path("check.json"), &self.with_header(json!({ "checks": checks, "pass": ok })))?;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec("verification suite failed; see check.json".into()))
        }
    }
}

#[derive(Debug, Serialize)]
struct FewShotRow {
    method: String,
    shots: usize,
    seed: u64,
    accuracy: f64,
    f1: f64,
}

#[derive(Debug, Serialize)]
struct HistogramRow {
    method: String,
    k: usize,
    series: String,
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
}

#[derive(Debug, Serialize)]
struct LooRow {
    test_id: u64,
    train_id: u64,
    delta: f64,
    raw_score: f64,
    z_score: f64,
}

/// Reads `offense_table.csv`, skipping the `#` header lines.
pub fn read_offense_table(path: &Path) -> Result<Vec<OffenseTableRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

//! Annotated humor corpora: JSONL ingestion, keyword-subset construction,
//! few-shot sampling and a synthetic generator with a tunable humor/offense
//! correlation.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textmodel::vocab::keyword_tokens;

pub const MAX_OFFENSE: f64 = 5.0;

/// Gender-related keywords used by default for subset construction.
pub const DEFAULT_KEYWORDS: &[&str] = &[
    "woman", "women", "girl", "girls", "girlfriend", "wife", "lady", "ladies", "mother", "sister",
    "man", "men", "boyfriend", "husband",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub text: String,
    pub humor: u8,
    pub offense: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Unsplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub split: SplitTag,
}

impl Dataset {
    /// Builds a dataset, checking id uniqueness and field ranges.
    pub fn new(examples: Vec<Example>, split: SplitTag) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            validate_fields(ex, i + 1)?;
            if !seen.insert(ex.id) {
                return Err(Error::DuplicateId(ex.id));
            }
        }
        Ok(Self { examples, split })
    }

    pub fn empty(split: SplitTag) -> Self {
        Self {
            examples: Vec::new(),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.examples.iter().filter(|e| e.humor == 1).count();
        (pos, self.examples.len() - pos)
    }

    /// Copy of this dataset without the example carrying `id`.
    pub fn without(&self, id: u64) -> Result<Dataset> {
        if self.get(id).is_none() {
            return Err(Error::UnknownId(id));
        }
        Ok(Dataset {
            examples: self.examples.iter().filter(|e| e.id != id).cloned().collect(),
            split: self.split,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }
}

fn validate_fields(ex: &Example, line: usize) -> Result<()> {
    if ex.humor > 1 {
        return Err(Error::Schema {
            line,
            message: format!("humor must be 0 or 1, got {}", ex.humor),
        });
    }
    if !(0.0..=MAX_OFFENSE).contains(&ex.offense) {
        return Err(Error::OffenseRange {
            line,
            value: ex.offense,
        });
    }
    Ok(())
}

pub fn parse_jsonl(content: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(line, line_no)?;
        if !seen.insert(ex.id) {
            return Err(Error::DuplicateId(ex.id));
        }
        examples.push(ex);
    }
    Ok(Dataset {
        examples,
        split: SplitTag::Unsplit,
    })
}

fn parse_line(line: &str, line_no: usize) -> Result<Example> {
    let schema = |message: String| Error::Schema {
        line: line_no,
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| schema(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema("expected a JSON object".into()))?;
    let field = |key: &str| {
        obj.get(key)
            .ok_or_else(|| schema(format!("missing key `{key}`")))
    };
    let id = field("id")?
        .as_u64()
        .ok_or_else(|| schema("`id` must be a non-negative integer".into()))?;
    let text = field("text")?
        .as_str()
        .ok_or_else(|| schema("`text` must be a string".into()))?
        .to_string();
    let humor = match field("humor")?.as_u64() {
        Some(h @ (0 | 1)) => h as u8,
        _ => return Err(schema("`humor` must be 0 or 1".into())),
    };
    let offense = field("offense")?
        .as_f64()
        .ok_or_else(|| schema("`offense` must be a number".into()))?;
    let ex = Example {
        id,
        text,
        humor,
        offense,
    };
    validate_fields(&ex, line_no)?;
    Ok(ex)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut content = String::new();
    for line in BufReader::new(file).lines() {
        content.push_str(&line.map_err(|e| Error::io(path, e))?);
        content.push('\n');
    }
    parse_jsonl(&content)
}

/// Reads a keyword list: one keyword per line, blank lines and `#` comments ignored.
pub fn load_keywords(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}

pub fn reference_offense(data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("reference_offense"));
    }
    Ok(data.examples.iter().map(|e| e.offense).sum::<f64>() / data.len() as f64)
}

/// Pearson correlation between the binary humor label and the offense score.
pub fn point_biserial(data: &Dataset) -> Option<f64> {
    let xs: Vec<f64> = data.examples.iter().map(|e| e.humor as f64).collect();
    let ys: Vec<f64> = data.examples.iter().map(|e| e.offense).collect();
    crate::stats::pearson(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetSpec {
    pub keywords: Vec<String>,
    pub train_fraction: f64,
    pub balance: bool,
    pub seed: u64,
}

impl Default for SubsetSpec {
    fn default() -> Self {
        Self {
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            train_fraction: 0.8,
            balance: true,
            seed: 0,
        }
    }
}

impl SubsetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keywords.is_empty() {
            return Err(Error::InvalidSpec("keyword list is empty".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

pub fn matches_keywords(text: &str, keywords: &HashSet<String>) -> bool {
    keyword_tokens(text).iter().any(|t| keywords.contains(t))
}

/// Splits `data` into keyword-matched and unmatched groups, balances humor
/// classes within each group by seeded downsampling, then splits every
/// (group, class) cell at `train_fraction`. Output keeps the input order.
pub fn build_keyword_subset(data: &Dataset, spec: &SubsetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("build_keyword_subset"));
    }
    let keywords: HashSet<String> = spec.keywords.iter().map(|k| k.to_lowercase()).collect();

    // cells[matched][humor] -> indices into data
    let mut cells: [[Vec<usize>; 2]; 2] = Default::default();
    for (i, ex) in data.examples.iter().enumerate() {
        let matched = matches_keywords(&ex.text, &keywords) as usize;
        cells[matched][ex.humor as usize].push(i);
    }
    for (matched, group) in cells.iter().enumerate() {
        for (humor, cell) in group.iter().enumerate() {
            if cell.is_empty() {
                let name = format!(
                    "{}/humor={}",
                    if matched == 1 { "matched" } else { "unmatched" },
                    humor
                );
                return Err(Error::EmptyCell(name));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for group in cells.iter_mut() {
        if spec.balance {
            let keep = group[0].len().min(group[1].len());
            for cell in group.iter_mut() {
                if cell.len() > keep {
                    let mut chosen = rand::seq::index::sample(&mut rng, cell.len(), keep).into_vec();
                    chosen.sort_unstable();
                    *cell = chosen.into_iter().map(|j| cell[j]).collect();
                }
            }
        }
        for cell in group.iter() {
            let mut shuffled = cell.clone();
            shuffled.shuffle(&mut rng);
            let n_train = ((cell.len() as f64) * spec.train_fraction).round() as usize;
            train_idx.extend_from_slice(&shuffled[..n_train]);
            test_idx.extend_from_slice(&shuffled[n_train..]);
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize], split| Dataset {
        examples: idx.iter().map(|&i| data.examples[i].clone()).collect(),
        split,
    };
    Ok((pick(&train_idx, SplitTag::Train), pick(&test_idx, SplitTag::Test)))
}

/// Class-balanced sample of `n` examples drawn without replacement.
pub fn few_shot_sample(train: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidSpec("few-shot size must be positive".into()));
    }
    if n % 2 != 0 {
        return Err(Error::OddShots(n));
    }
    let per_class = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for class in [1u8, 0u8] {
        let members: Vec<usize> = train
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.humor == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < per_class {
            return Err(Error::Capacity {
                class,
                needed: per_class,
                available: members.len(),
            });
        }
        let picks = rand::seq::index::sample(&mut rng, members.len(), per_class);
        chosen.extend(picks.into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    Ok(Dataset {
        examples: chosen.into_iter().map(|i| train.examples[i].clone()).collect(),
        split: train.split,
    })
}

/// Uniform sample of `n` examples (or all of them when `n >= len`), input order kept.
pub fn sample_examples(data: &Dataset, n: usize, seed: u64) -> Dataset {
    if n >= data.len() {
        return data.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, data.len(), n).into_vec();
    picks.sort_unstable();
    Dataset {
        examples: picks.into_iter().map(|i| data.examples[i].clone()).collect(),
        split: data.split,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    /// Target point-biserial correlation between humor and offense.
    pub humor_offense_correlation: f64,
    /// Number of neutral filler words.
    pub vocab_size: usize,
    pub setup_templates: usize,
    pub punchline_templates: usize,
    /// Fraction of texts mentioning one of the gender keywords.
    pub keyword_rate: f64,
    /// Fraction of texts closing with a reaction clause ("it is funny" or
    /// "it is normal") that agrees with the label 80% of the time.
    pub reaction_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            humor_offense_correlation: 0.8,
            vocab_size: 120,
            setup_templates: 40,
            punchline_templates: 24,
            keyword_rate: 0.35,
            reaction_rate: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::InvalidSpec("n_examples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.humor_offense_correlation) {
            return Err(Error::InvalidSpec(format!(
                "humor_offense_correlation {} outside [0, 1]",
                self.humor_offense_correlation
            )));
        }
        if self.vocab_size == 0 || self.setup_templates == 0 || self.punchline_templates == 0 {
            return Err(Error::InvalidSpec(
                "vocab_size and template counts must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.keyword_rate) || !(0.0..=1.0).contains(&self.reaction_rate) {
            return Err(Error::InvalidSpec("keyword_rate and reaction_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

const HUMOR_WORDS: &[&str] = &[
    "pun", "punchline", "silly", "banana", "chicken", "knock", "joke", "prank", "clown", "giggle",
    "goofy", "wacky",
];

// Stand-ins for offensive vocabulary; each occurrence marks one unit of offense.
const OFFENSIVE_WORDS: &[&str] = &[
    "crude", "vulgar", "nasty", "rude", "slur", "sleazy", "trashy", "lewd", "degrading", "insult",
];

const FUNCTION_WORDS: &[&str] = &["the", "a", "that", "is", "and", "to", "of", "it", "was", "my"];

const SYLLABLES: &[&str] = &[
    "ba", "ko", "mi", "ral", "den", "tu", "sor", "vi", "lan", "pe", "qui", "zo", "mar", "fen",
];

fn filler_word(i: usize) -> String {
    let n = SYLLABLES.len();
    format!("{}{}{}", SYLLABLES[i % n], SYLLABLES[(i / n) % n], SYLLABLES[(i * 7 + 3) % n])
}

/// Maps a standardized latent score to an offense level in [0, 5].
fn offense_from_latent(u: f64) -> f64 {
    let raw = 2.5 + 0.8 * u;
    (raw.clamp(0.0, MAX_OFFENSE) * 100.0).round() / 100.0
}

/// Generates a class-balanced synthetic corpus. Offense is drawn from a latent
/// score correlated with the humor label; offensive-lexicon tokens appear in
/// proportion to the offense level, so they co-occur with humor at the
/// requested rate.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_examples == 0 {
        return Err(Error::InvalidSpec("n_examples must be positive".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fillers: Vec<String> = (0..spec.vocab_size).map(filler_word).collect();
    let pick_filler = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n)
            .map(|_| {
                if rng.random_bool(0.35) {
                    FUNCTION_WORDS[rng.random_range(0..FUNCTION_WORDS.len())].to_string()
                } else {
                    fillers[rng.random_range(0..fillers.len())].clone()
                }
            })
            .collect()
    };
    let setups: Vec<Vec<String>> = (0..spec.setup_templates)
        .map(|_| {
            let len = rng.random_range(4..8);
            pick_filler(&mut rng, len)
        })
        .collect();
    let punchlines: Vec<Vec<String>> = (0..spec.punchline_templates)
        .map(|_| {
            let len = rng.random_range(3..6);
            pick_filler(&mut rng, len)
        })
        .collect();

    let n = spec.n_examples;
    let mut labels: Vec<u8> = (0..n).map(|i| (i < n / 2) as u8).collect();
    if n % 2 == 1 {
        labels[n - 1] = rng.random_range(0..2);
    }
    labels.shuffle(&mut rng);

    let rho = spec.humor_offense_correlation;
    let noise = (1.0 - rho * rho).sqrt();
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, humor)| {
            let sign = if humor == 1 { 1.0 } else { -1.0 };
            let eps: f64 = StandardNormal.sample(&mut rng);
            let offense = offense_from_latent(rho * sign + noise * eps);

            let mut words: Vec<String> = setups[rng.random_range(0..setups.len())].clone();
            if rng.random_bool(spec.keyword_rate) {
                let pos = rng.random_range(0..=words.len());
                let kw = DEFAULT_KEYWORDS[rng.random_range(0..DEFAULT_KEYWORDS.len())];
                words.insert(pos, kw.to_string());
            }
            let humor_word_rate = if humor == 1 { 0.75 } else { 0.15 };
            let mut punch = punchlines[rng.random_range(0..punchlines.len())].clone();
            if rng.random_bool(humor_word_rate) {
                let pos = rng.random_range(0..=punch.len());
                punch.insert(pos, HUMOR_WORDS[rng.random_range(0..HUMOR_WORDS.len())].into());
            }
            let n_offensive = (offense / 1.25).round() as usize;
            for _ in 0..n_offensive {
                let pos = rng.random_range(0..=punch.len());
                punch.insert(
                    pos,
                    OFFENSIVE_WORDS[rng.random_range(0..OFFENSIVE_WORDS.len())].into(),
                );
            }
            let sep = if rng.random_bool(0.5) { "?" } else { "," };
            let mut text = format!("{} {} {}", words.join(" "), sep, punch.join(" "));
            if rng.random_bool(spec.reaction_rate) {
                let agrees = rng.random_bool(0.8);
                let funny = (humor == 1) == agrees;
                text.push_str(if funny { " , it is funny" } else { " , it is normal" });
            }
            text.push_str(" .");
            Example {
                id: i as u64,
                text,
                humor,
                offense,
            }
        })
        .collect();
    Ok(Dataset {
        examples,
        split: SplitTag::Unsplit,
    })
}

/// Count of examples per (keyword-matched, humor) cell, for reporting.
pub fn cell_counts(data: &Dataset, keywords: &[String]) -> BTreeMap<(bool, u8), usize> {
    let kws: HashSet<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    let mut out = BTreeMap::new();
    for ex in &data.examples {
        *out.entry((matches_keywords(&ex.text, &kws), ex.humor)).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: u64, text: &str, humor: u8, offense: f64) -> Example {
        Example {
            id,
            text: text.into(),
            humor,
            offense,
        }
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let d = parse_jsonl("").unwrap();
        assert!(d.is_empty());
        assert_eq!(d.split, SplitTag::Unsplit);
    }

    #[test]
    fn single_line_maps_directly() {
        let d = parse_jsonl(r#"{"id":1,"text":"a b","humor":1,"offense":0.5}"#).unwrap();
        assert_eq!(d.examples, vec![ex(1, "a b", 1, 0.5)]);
    }

    #[test]
    fn offense_out_of_range_reports_line() {
        let err = parse_jsonl(r#"{"id":1,"text":"a","humor":1,"offense":5.1}"#).unwrap_err();
        assert!(matches!(err, Error::OffenseRange { line: 1, .. }), "{err}");
    }

    #[test]
    fn missing_key_names_line() {
        let content = "{\"id\":1,\"text\":\"a\",\"humor\":1,\"offense\":1}\n{\"id\":2,\"text\":\"b\",\"humor\":0}";
        match parse_jsonl(content).unwrap_err() {
            Error::Schema { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("offense"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let content = "{\"id\":1,\"text\":\"a\",\"humor\":1,\"offense\":1}\n{\"id\":1,\"text\":\"b\",\"humor\":0,\"offense\":0}";
        assert!(matches!(parse_jsonl(content), Err(Error::DuplicateId(1))));
    }

    #[test]
    fn synthetic_rejects_zero_examples() {
        let spec = SyntheticSpec {
            n_examples: 0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n_examples: 300,
            seed: 9,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn synthetic_correlation_tracks_spec() {
        for (rho, seed) in [(0.0, 1u64), (0.8, 2), (0.4, 3)] {
            let spec = SyntheticSpec {
                n_examples: 2000,
                humor_offense_correlation: rho,
                seed,
                ..Default::default()
            };
            let d = generate_synthetic(&spec).unwrap();
            let (pos, _) = d.class_counts();
            assert!((pos as f64 / 2000.0 - 0.5).abs() <= 0.02);
            let r = point_biserial(&d).unwrap();
            assert!((r - rho).abs() < 0.1, "rho {rho}: measured {r}");
        }
    }

    fn cell_dataset(sizes: [usize; 4]) -> Dataset {
        // sizes: matched humor=1, matched humor=0, unmatched humor=1, unmatched humor=0
        let mut examples = Vec::new();
        let mut id = 0;
        for (cell, &size) in sizes.iter().enumerate() {
            let text = if cell < 2 { "my wife said hi" } else { "the dog said hi" };
            let humor = if cell % 2 == 0 { 1 } else { 0 };
            for _ in 0..size {
                examples.push(ex(id, text, humor, 0.0));
                id += 1;
            }
        }
        Dataset::new(examples, SplitTag::Unsplit).unwrap()
    }

    #[test]
    fn keyword_subset_balances_matched_group() {
        let data = cell_dataset([10, 6, 8, 8]);
        let spec = SubsetSpec {
            keywords: vec!["wife".into()],
            ..Default::default()
        };
        let (train, test) = build_keyword_subset(&data, &spec).unwrap();
        let mut all = train.examples.clone();
        all.extend(test.examples.clone());
        let merged = Dataset::new(all, SplitTag::Unsplit).unwrap();
        let counts = cell_counts(&merged, &spec.keywords);
        assert_eq!(counts[&(true, 1)], 6);
        assert_eq!(counts[&(true, 0)], 6);
        assert_eq!(counts[&(false, 1)], 8);
        assert_eq!(counts[&(false, 0)], 8);
        assert_eq!(train.split, SplitTag::Train);
        assert_eq!(test.split, SplitTag::Test);
    }

    #[test]
    fn keyword_matching_ignores_case_and_punctuation() {
        let kws: HashSet<String> = ["wife".to_string()].into();
        assert!(matches_keywords("My WIFE, again!", &kws));
        assert!(matches_keywords("\"Wife.\"", &kws));
        assert!(!matches_keywords("midwifery", &kws));
    }

    #[test]
    fn keywords_matching_nothing_is_an_error() {
        let data = cell_dataset([4, 4, 4, 4]);
        let spec = SubsetSpec {
            keywords: vec!["zebra".into()],
            ..Default::default()
        };
        assert!(matches!(
            build_keyword_subset(&data, &spec),
            Err(Error::EmptyCell(_))
        ));
    }

    #[test]
    fn few_shot_errors() {
        let data = cell_dataset([2, 10, 2, 10]);
        assert!(matches!(few_shot_sample(&data, 7, 0), Err(Error::OddShots(7))));
        assert!(matches!(
            few_shot_sample(&data, 10, 0),
            Err(Error::Capacity { class: 1, .. })
        ));
    }

    #[test]
    fn few_shot_balanced_and_deterministic() {
        let data = cell_dataset([10, 10, 10, 10]);
        let a = few_shot_sample(&data, 16, 3).unwrap();
        assert_eq!(a.class_counts(), (8, 8));
        assert_eq!(a, few_shot_sample(&data, 16, 3).unwrap());
    }

    #[test]
    fn reference_offense_mean() {
        let d = Dataset::new(vec![ex(0, "", 0, 1.0), ex(1, "", 1, 3.0)], SplitTag::Train).unwrap();
        assert_eq!(reference_offense(&d).unwrap(), 2.0);
        assert!(reference_offense(&Dataset::empty(SplitTag::Train)).is_err());
    }
}

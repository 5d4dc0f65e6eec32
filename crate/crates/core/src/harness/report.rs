//! Top-K offense aggregation, offense histograms and text tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{reference_offense, Dataset, MAX_OFFENSE};
use crate::error::{Error, Result};
use crate::influence::{rank_top_k, InfluenceReport, RankMode};
use crate::trainer::{Aggregate, RunMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffenseTableRow {
    pub method: String,
    pub k: usize,
    pub mean_offense_pos: Option<f64>,
    pub std_offense_pos: Option<f64>,
    pub mean_offense_neg: Option<f64>,
    pub std_offense_neg: Option<f64>,
    pub reference: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn top_k_offense(report: &InfluenceReport, train: &Dataset, k: usize, mode: RankMode) -> Result<Vec<f64>> {
    rank_top_k(report, k, mode)?
        .into_iter()
        .map(|id| train.get(id).map(|e| e.offense).ok_or(Error::UnknownId(id)))
        .collect()
}

/// Mean offense of each test example's top-`k` training examples, in
/// ascending order so aggregates do not depend on test ordering.
fn per_test_means(reports: &[&InfluenceReport], train: &Dataset, k: usize, mode: RankMode) -> Result<Vec<f64>> {
    let mut means = reports
        .iter()
        .map(|r| {
            let xs = top_k_offense(r, train, k, mode)?;
            Ok(xs.iter().sum::<f64>() / xs.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    means.sort_by(f64::total_cmp);
    Ok(means)
}

/// One row per `k`: mean (± sample std across test examples) offense of the
/// top-`k` training examples, separately for humorous and non-humorous test
/// examples, against the mean offense of `train`.
pub fn topk_offense_table(
    method: &str,
    reports: &[InfluenceReport],
    train: &Dataset,
    ks: &[usize],
    mode: RankMode,
) -> Result<Vec<OffenseTableRow>> {
    let reference = reference_offense(train)?;
    let pos: Vec<&InfluenceReport> = reports.iter().filter(|r| r.test_label == 1).collect();
    let neg: Vec<&InfluenceReport> = reports.iter().filter(|r| r.test_label == 0).collect();
    ks.iter()
        .map(|&k| {
            if k > train.len() {
                return Err(Error::Bound {
                    k,
                    available: train.len(),
                });
            }
            let p = Aggregate::of(&per_test_means(&pos, train, k, mode)?);
            let n = Aggregate::of(&per_test_means(&neg, train, k, mode)?);
            Ok(OffenseTableRow {
                method: method.to_string(),
                k,
                mean_offense_pos: p.map(|a| a.mean),
                std_offense_pos: p.map(|a| a.std),
                mean_offense_neg: n.map(|a| a.mean),
                std_offense_neg: n.map(|a| a.std),
                reference,
                n_pos: pos.len(),
                n_neg: neg.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bin_width: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bin_width: 0.5,
            lo: 0.0,
            hi: MAX_OFFENSE,
        }
    }
}

impl HistogramSpec {
    pub fn bins(&self) -> Result<usize> {
        let n = (self.hi - self.lo) / self.bin_width;
        if !(self.bin_width > 0.0) || !(self.hi > self.lo) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "bin width {} does not partition [{}, {}]",
                self.bin_width, self.lo, self.hi
            )));
        }
        Ok(n.round() as usize)
    }

    /// Bins are half-open except the last, which includes `hi`.
    pub fn bin_of(&self, x: f64) -> Result<usize> {
        let n = self.bins()?;
        if !(self.lo..=self.hi).contains(&x) {
            return Err(Error::InvalidSpec(format!("value {x} outside histogram range")));
        }
        Ok((((x - self.lo) / self.bin_width).floor() as usize).min(n - 1))
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let lo = self.lo + bin as f64 * self.bin_width;
        (lo, lo + self.bin_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffenseHistogram {
    pub spec: HistogramSpec,
    pub k: usize,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// Pools the offense scores of every test example's top-`k` training
/// examples into one series per test label.
pub fn offense_histogram(
    reports: &[InfluenceReport],
    train: &Dataset,
    k: usize,
    mode: RankMode,
    spec: HistogramSpec,
) -> Result<OffenseHistogram> {
    let n = spec.bins()?;
    let mut pos = vec![0; n];
    let mut neg = vec![0; n];
    for r in reports {
        let series = if r.test_label == 1 { &mut pos } else { &mut neg };
        for x in top_k_offense(r, train, k, mode)? {
            series[spec.bin_of(x)?] += 1;
        }
    }
    Ok(OffenseHistogram { spec, k, pos, neg })
}

fn cell(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.2} (±{s:.2})"),
        _ => "-".into(),
    }
}

/// Plain-text rendering in the layout of a top-K offense table:
/// one line per (method, K) with "mean (±std)" cells.
pub fn format_offense_table(rows: &[OffenseTableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8}{:>6}  {:>16}  {:>16}  {:>9}", "Method", "TopK", "Humor (pos)", "Non-humor (neg)", "Reference");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8}{:>6}  {:>16}  {:>16}  {:>9.2}",
            r.method,
            r.k,
            cell(r.mean_offense_pos, r.std_offense_pos),
            cell(r.mean_offense_neg, r.std_offense_neg),
            r.reference
        );
    }
    out
}

/// Few-shot results: one column per shot count, Acc and F1 rows per method,
/// each cell "mean (std)".
pub fn format_fewshot_table(shots: &[usize], rows: &[(String, Vec<RunMetrics>)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}{:<6}", "Method", "Metric");
    for s in shots {
        let _ = write!(out, "{:>16}", format!("{s}-shot"));
    }
    out.push('\n');
    for (label, metrics) in rows {
        for (name, pick) in [("Acc", 0), ("F1", 1)] {
            let _ = write!(out, "{:<10}{:<6}", if pick == 0 { label.as_str() } else { "" }, name);
            for m in metrics {
                let a = if pick == 0 { m.accuracy } else { m.f1 };
                let _ = write!(out, "{:>16}", format!("{:.3} ({:.3})", a.mean, a.std));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Example, SplitTag};
    use crate::influence::{Method, ScoreEntry};

    fn train(offense: &[f64]) -> Dataset {
        Dataset::new(
            offense
                .iter()
                .enumerate()
                .map(|(i, &o)| Example {
                    id: i as u64,
                    text: format!("t{i}"),
                    humor: (i % 2) as u8,
                    offense: o,
                })
                .collect(),
            SplitTag::Train,
        )
        .unwrap()
    }

    fn report(test_id: u64, label: u8, raw: &[f64]) -> InfluenceReport {
        InfluenceReport {
            test_id,
            test_label: label,
            scores: raw
                .iter()
                .enumerate()
                .map(|(i, &raw)| ScoreEntry {
                    train_id: i as u64,
                    raw,
                    z: raw,
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
    fn constant_offense_table() {
        let t = train(&[0.0; 6]);
        let reports = vec![
            report(100, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            report(101, 0, &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]),
        ];
        let rows = topk_offense_table("FT", &reports, &t, &[2, 3], RankMode::Helpful).unwrap();
        for r in &rows {
            assert_eq!(r.mean_offense_pos, Some(0.0));
            assert_eq!(r.std_offense_pos, Some(0.0));
            assert_eq!(r.mean_offense_neg, Some(0.0));
            assert_eq!(r.reference, 0.0);
        }
        assert!(format_offense_table(&rows).contains("0.00 (±0.00)"));
        assert!(matches!(
            topk_offense_table("FT", &reports, &t, &[7], RankMode::Helpful),
            Err(Error::Bound { .. })
        ));
    }

    #[test]
    fn table_is_order_invariant() {
        let t = train(&[0.3, 1.7, 2.2, 4.9, 0.1, 3.3, 2.0, 1.1]);
        let reports: Vec<InfluenceReport> = (0..6)
            .map(|j| {
                let raw: Vec<f64> = (0..8).map(|i| ((i * 7 + j * 3) % 11) as f64 - 5.0).collect();
                report(j as u64, (j % 2) as u8, &raw)
            })
            .collect();
        let a = topk_offense_table("PT", &reports, &t, &[3], RankMode::Helpful).unwrap();
        let mut rev = reports.clone();
        rev.reverse();
        let b = topk_offense_table("PT", &rev, &t, &[3], RankMode::Helpful).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn helpful_examples_drive_the_means() {
        let t = train(&[4.0, 0.0, 4.0, 0.0]);
        let reports = vec![report(9, 1, &[-1.0, 1.0, -2.0, 2.0]), report(8, 0, &[1.0, -1.0, 2.0, -2.0])];
        let rows = topk_offense_table("FT", &reports, &t, &[2], RankMode::Helpful).unwrap();
        assert_eq!(rows[0].mean_offense_pos, Some(4.0));
        assert_eq!(rows[0].mean_offense_neg, Some(0.0));
        assert_eq!(rows[0].reference, 2.0);
    }

    #[test]
    fn point_mass_histogram() {
        let t = train(&[0.2; 5]);
        let reports = vec![report(1, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]), report(2, 1, &[4.0, 3.0, 2.0, 1.0, 0.0])];
        let h = offense_histogram(&reports, &t, 3, RankMode::Helpful, HistogramSpec::default()).unwrap();
        assert_eq!(h.pos.len(), 10);
        assert_eq!(h.pos[0], 6);
        assert_eq!(h.pos.iter().sum::<usize>(), 3 * 2);
        assert_eq!(h.neg.iter().sum::<usize>(), 0);
    }

    #[test]
    fn histogram_edges() {
        let s = HistogramSpec::default();
        assert_eq!(s.bin_of(0.0).unwrap(), 0);
        assert_eq!(s.bin_of(0.5).unwrap(), 1);
        assert_eq!(s.bin_of(4.99).unwrap(), 9);
        assert_eq!(s.bin_of(5.0).unwrap(), 9);
        assert!(s.bin_of(5.1).is_err());
        assert!(HistogramSpec {
            bin_width: 0.3,
            ..s
        }
        .bins()
        .is_err());
        assert_eq!(s.edges(3), (1.5, 2.0));
    }
}

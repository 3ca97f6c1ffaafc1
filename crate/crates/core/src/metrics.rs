//! Rank-based multi-label evaluation: macro mAP, one-error, ranking loss and
//! coverage over an `n × k` score matrix.
//!
//! Ties: within a class (mAP) instances rank by index ascending; within an
//! instance (one-error, coverage) labels rank by index ascending; ranking loss
//! counts a tied (relevant, irrelevant) pair as half an error.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{FullDataset, LabelVocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    k: usize,
    scores: Vec<f64>,
    truths: Vec<Vec<usize>>,
}

impl ScoreMatrix {
    /// `scores` is row-major `n × k`; truth sets are sorted and deduplicated.
    pub fn new(k: usize, scores: Vec<f64>, truths: Vec<Vec<usize>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Metric(
                "score matrix needs at least one class".into(),
            ));
        }
        let n = truths.len();
        if n == 0 {
            return Err(Error::Metric(
                "score matrix needs at least one instance".into(),
            ));
        }
        if scores.len() != n * k {
            return Err(Error::LengthMismatch {
                what: "score matrix",
                expected: n * k,
                found: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        let truths = truths
            .into_iter()
            .map(|mut t| {
                t.sort_unstable();
                t.dedup();
                match t.iter().find(|&&j| j >= k) {
                    Some(&index) => Err(Error::LabelOutOfRange { index, k }),
                    None => Ok(t),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            k,
            scores,
            truths,
        })
    }

    /// Pairs model scores with the label sets of `data`.
    pub fn from_dataset(data: &FullDataset, scores: Vec<f64>) -> Result<Self> {
        Self::new(
            data.k(),
            scores,
            data.instances()
                .iter()
                .map(|x| x.positives().to_vec())
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.k..(i + 1) * self.k]
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.k + j]
    }

    pub fn truth(&self, i: usize) -> &[usize] {
        &self.truths[i]
    }

    fn relevant(&self, i: usize, j: usize) -> bool {
        self.truths[i].binary_search(&j).is_ok()
    }

    /// Copy restricted to the given instances, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.k,
            rows.iter()
                .flat_map(|&i| self.row(i).iter().copied())
                .collect(),
            rows.iter().map(|&i| self.truths[i].clone()).collect(),
        )
    }
}

/// Descending by score, ties by index ascending.
fn descending(scores: impl Fn(usize) -> f64, a: usize, b: usize) -> Ordering {
    scores(b).total_cmp(&scores(a)).then(a.cmp(&b))
}

/// Average precision of every class; `None` for classes without positives.
pub fn class_average_precision(s: &ScoreMatrix) -> Vec<Option<f64>> {
    (0..s.k)
        .map(|j| {
            let mut order: Vec<usize> = (0..s.n).collect();
            order.sort_by(|&a, &b| descending(|i| s.score(i, j), a, b));
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                if s.relevant(i, j) {
                    hits += 1;
                    sum += hits as f64 / (rank + 1) as f64;
                }
            }
            (hits > 0).then(|| sum / hits as f64)
        })
        .collect()
}

/// Macro mean of per-class average precision over classes with at least one
/// positive instance.
pub fn mean_average_precision(s: &ScoreMatrix) -> Result<f64> {
    let aps: Vec<f64> = class_average_precision(s).into_iter().flatten().collect();
    if aps.is_empty() {
        return Err(Error::Metric("no class has a positive instance".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn require_nonempty_truths(s: &ScoreMatrix) -> Result<()> {
    match s.truths.iter().position(Vec::is_empty) {
        Some(i) => Err(Error::Metric(format!(
            "instance {i} has an empty label set"
        ))),
        None => Ok(()),
    }
}

fn top_label(row: &[f64]) -> usize {
    (0..row.len())
        .min_by(|&a, &b| descending(|j| row[j], a, b))
        .expect("k ≥ 1")
}

/// Fraction of instances whose top-scored label is irrelevant.
pub fn one_error(s: &ScoreMatrix) -> Result<f64> {
    require_nonempty_truths(s)?;
    let errors = (0..s.n)
        .filter(|&i| !s.relevant(i, top_label(s.row(i))))
        .count();
    Ok(errors as f64 / s.n as f64)
}

/// Mean fraction of misordered (relevant, irrelevant) label pairs.
pub fn ranking_loss(s: &ScoreMatrix) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..s.n {
        let relevant = s.truths[i].len();
        if relevant == 0 || relevant == s.k {
            return Err(Error::Metric(format!(
                "instance {i} has {relevant} of {} labels relevant; ranking loss needs both kinds",
                s.k
            )));
        }
        let row = s.row(i);
        let mut bad = 0.0;
        for &r in &s.truths[i] {
            for q in (0..s.k).filter(|&q| !s.relevant(i, q)) {
                match row[q].total_cmp(&row[r]) {
                    Ordering::Greater => bad += 1.0,
                    Ordering::Equal => bad += 0.5,
                    Ordering::Less => {}
                }
            }
        }
        total += bad / (relevant * (s.k - relevant)) as f64;
    }
    Ok(total / s.n as f64)
}

/// Mean of `(worst 1-based rank of a relevant label - 1) / k`.
pub fn coverage(s: &ScoreMatrix) -> Result<f64> {
    require_nonempty_truths(s)?;
    let mut total = 0.0;
    for i in 0..s.n {
        let row = s.row(i);
        let mut order: Vec<usize> = (0..s.k).collect();
        order.sort_by(|&a, &b| descending(|j| row[j], a, b));
        let worst = order
            .iter()
            .rposition(|&j| s.relevant(i, j))
            .expect("nonempty truth set");
        total += worst as f64 / s.k as f64;
    }
    Ok(total / s.n as f64)
}

/// All four criteria, each over the instances it is defined for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: Option<f64>,
    pub one_error: Option<f64>,
    pub ranking_loss: Option<f64>,
    pub coverage: Option<f64>,
    pub instances: usize,
    /// Instances with an empty label set (skipped by one-error and coverage).
    pub empty_truth_instances: usize,
    /// Instances with no or all labels relevant (skipped by ranking loss).
    pub unrankable_instances: usize,
    /// Classes without positives (skipped by mAP).
    pub skipped_classes: Vec<usize>,
    pub class_ap: Vec<Option<f64>>,
}

pub fn evaluate(s: &ScoreMatrix) -> Result<MetricsReport> {
    let class_ap = class_average_precision(s);
    let skipped_classes: Vec<usize> = (0..s.k).filter(|&j| class_ap[j].is_none()).collect();
    let map = mean_average_precision(s).ok();

    let labelled: Vec<usize> = (0..s.n).filter(|&i| !s.truths[i].is_empty()).collect();
    let (one_error, coverage) = if labelled.is_empty() {
        (None, None)
    } else {
        let sub = s.select(&labelled)?;
        (Some(one_error(&sub)?), Some(coverage(&sub)?))
    };
    let rankable: Vec<usize> = (0..s.n)
        .filter(|&i| !s.truths[i].is_empty() && s.truths[i].len() < s.k)
        .collect();
    let ranking_loss = if rankable.is_empty() {
        None
    } else {
        Some(ranking_loss(&s.select(&rankable)?)?)
    };
    Ok(MetricsReport {
        map,
        one_error,
        ranking_loss,
        coverage,
        instances: s.n,
        empty_truth_instances: s.n - labelled.len(),
        unrankable_instances: s.n - rankable.len(),
        skipped_classes,
        class_ap,
    })
}

/// `class,name,ap` rows; classes without positives have an empty `ap`.
pub fn class_ap_csv(report: &MetricsReport, vocabulary: &LabelVocabulary) -> String {
    let mut out = String::from("class,name,ap\n");
    for (j, ap) in report.class_ap.iter().enumerate() {
        let name = vocabulary.name(j).unwrap_or("");
        let ap = ap.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{j},{name},{ap}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(k: usize, scores: &[f64], truths: &[&[usize]]) -> ScoreMatrix {
        ScoreMatrix::new(
            k,
            scores.to_vec(),
            truths.iter().map(|t| t.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn average_precision_examples() {
        let s = matrix(1, &[0.9, 0.8, 0.1], &[&[], &[0], &[]]);
        assert_eq!(mean_average_precision(&s).unwrap(), 0.5);
        let perfect = matrix(2, &[0.9, 0.1, 0.2, 0.8], &[&[0], &[1]]);
        assert_eq!(mean_average_precision(&perfect).unwrap(), 1.0);
        // Equal scores: the lower index ranks first.
        let tied = matrix(1, &[0.5, 0.5], &[&[], &[0]]);
        assert_eq!(mean_average_precision(&tied).unwrap(), 0.5);
    }

    #[test]
    fn map_skips_classes_without_positives() {
        let s = matrix(2, &[0.9, 0.1, 0.2, 0.8], &[&[0], &[0]]);
        assert_eq!(class_average_precision(&s), vec![Some(1.0), None]);
        assert_eq!(mean_average_precision(&s).unwrap(), 1.0);
        let none = matrix(2, &[0.9, 0.1], &[&[]]);
        assert!(mean_average_precision(&none).is_err());
    }

    #[test]
    fn instance_metric_examples() {
        let s = matrix(3, &[0.2, 0.5, 0.1], &[&[0]]);
        assert_eq!(one_error(&s).unwrap(), 1.0);
        assert_eq!(ranking_loss(&s).unwrap(), 0.5);
        assert!((coverage(&s).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let good = matrix(3, &[0.9, 0.5, 0.1], &[&[0]]);
        assert_eq!(one_error(&good).unwrap(), 0.0);
        assert_eq!(ranking_loss(&good).unwrap(), 0.0);
        assert_eq!(coverage(&good).unwrap(), 0.0);

        let flat = matrix(4, &[0.3; 4], &[&[1, 3]]);
        assert_eq!(ranking_loss(&flat).unwrap(), 0.5);

        let best = matrix(5, &[5.0, 4.0, 3.0, 2.0, 1.0], &[&[0, 1, 2]]);
        assert!((coverage(&best).unwrap() - 2.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        let empty = matrix(2, &[0.1, 0.2], &[&[]]);
        assert!(one_error(&empty).is_err());
        assert!(coverage(&empty).is_err());
        assert!(ranking_loss(&empty).is_err());
        let full = matrix(2, &[0.1, 0.2], &[&[0, 1]]);
        assert!(ranking_loss(&full).is_err());
        assert!(ScoreMatrix::new(2, vec![0.1], vec![vec![0]]).is_err());
        assert!(ScoreMatrix::new(2, vec![0.1, f64::NAN], vec![vec![0]]).is_err());
        assert!(ScoreMatrix::new(2, vec![0.1, 0.2], vec![vec![2]]).is_err());
        assert!(ScoreMatrix::new(2, vec![], vec![]).is_err());
    }

    #[test]
    fn evaluate_filters_ineligible_instances() {
        let s = matrix(2, &[0.9, 0.1, 0.3, 0.2, 0.5, 0.6], &[&[0], &[], &[0, 1]]);
        let r = evaluate(&s).unwrap();
        assert_eq!(r.empty_truth_instances, 1);
        assert_eq!(r.unrankable_instances, 2);
        assert_eq!(r.one_error, Some(0.0));
        assert_eq!(r.ranking_loss, Some(0.0));
        assert_eq!(r.coverage, Some(0.25));
        assert!(r.skipped_classes.is_empty());
        let csv = class_ap_csv(&r, &LabelVocabulary::numbered("c", 2));
        assert!(csv.starts_with("class,name,ap\n0,c0,"));
    }
}

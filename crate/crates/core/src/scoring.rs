//! Anomaly scoring, the no-adaptation baseline, and AUROC.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::Axis;
use rayon::prelude::*;

use crate::bank::{l2_norm, FeatureSet, MemoryBank, NeighborSet, MIN_NORM};
use crate::error::{CapError, Result};
use crate::model::{forward, to_f64_matrix, to_f64_row, ModelParams};

/// A score in [0, 2]; `degenerate` marks vectors too short for a cosine,
/// in which case the score is pinned to 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyScore {
    pub score: f64,
    pub degenerate: bool,
}

impl AnomalyScore {
    const DEGENERATE: AnomalyScore = AnomalyScore {
        score: 2.0,
        degenerate: true,
    };

    fn from_pair(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> Self {
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if !(na > MIN_NORM && nb > MIN_NORM) {
            return Self::DEGENERATE;
        }
        Self {
            score: (1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0),
            degenerate: false,
        }
    }
}

/// Scores a query against precomputed neighbors with the adapted model.
pub fn score_with_neighbors(model: &ModelParams, query: &[f32], neighbors: &NeighborSet) -> Result<AnomalyScore> {
    if !(l2_norm(query) > MIN_NORM) {
        return Ok(AnomalyScore::DEGENERATE);
    }
    let out = forward(model, query, neighbors)?;
    Ok(AnomalyScore::from_pair(out.z_hat.view(), out.z_normal.view()))
}

/// Scores a query with the pretrained features only: one minus the cosine
/// between the query and the mean of its neighbors.
pub fn baseline_with_neighbors(query: &[f32], neighbors: &NeighborSet) -> AnomalyScore {
    let z = to_f64_row(query);
    let mean = to_f64_matrix(&neighbors.matrix)
        .mean_axis(Axis(0))
        .expect("non-empty neighbor set");
    AnomalyScore::from_pair(z.view(), mean.view())
}

/// Adapted-space anomaly score using the test-time rule (no self-exclusion).
pub fn anomaly_score(model: &ModelParams, bank: &MemoryBank, query: &[f32], k: usize) -> Result<AnomalyScore> {
    let neighbors = bank.top_k_neighbors(query, k, None)?;
    score_with_neighbors(model, query, &neighbors)
}

pub fn baseline_score_no_adaptation(bank: &MemoryBank, query: &[f32], k: usize) -> Result<AnomalyScore> {
    let neighbors = bank.top_k_neighbors(query, k, None)?;
    Ok(baseline_with_neighbors(query, &neighbors))
}

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(CapError::LengthMismatch {
            what: "labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if let Some(index) = labels.iter().position(|&l| l > 1) {
        return Err(CapError::BadLabel {
            index,
            label: labels[index],
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(CapError::NonFinite { what: "scores", index });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CapError::SingleClass);
    }
    Ok((positives, negatives))
}

/// Rank-based AUROC with midranks for ties. Label 1 (anomaly) is the positive
/// class and higher scores are more anomalous.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (positives, negatives) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let tied_positives = order[i..j].iter().filter(|&&o| labels[o] == 1).count();
        positive_rank_sum += midrank * tied_positives as f64;
        i = j;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

fn class_stats<'a>(values: impl Iterator<Item = &'a f64>) -> Option<ClassStats> {
    let v: Vec<f64> = values.copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(ClassStats {
        count: v.len(),
        mean,
        std: var.sqrt(),
    })
}

/// Per-sample scores with optional labels and summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub labels: Option<Vec<u8>>,
    /// Present when labels include both classes.
    pub auroc: Option<f64>,
    /// Label-0 samples, or every sample when unlabeled.
    pub normal: Option<ClassStats>,
    pub anomaly: Option<ClassStats>,
}

impl ScoreReport {
    pub fn new(ids: Vec<String>, scored: &[AnomalyScore], labels: Option<Vec<u8>>) -> Result<Self> {
        let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
        let degenerate = scored.iter().map(|s| s.degenerate).collect();
        let (normal, anomaly, auroc) = match &labels {
            Some(l) => {
                let auroc = match auroc(&scores, l) {
                    Ok(a) => Some(a),
                    Err(CapError::SingleClass) => None,
                    Err(e) => return Err(e),
                };
                let pick = |class: u8| {
                    class_stats(scores.iter().zip(l).filter(|(_, &y)| y == class).map(|(s, _)| s))
                };
                (pick(0), pick(1), auroc)
            }
            None => (class_stats(scores.iter()), None, None),
        };
        Ok(Self {
            ids,
            scores,
            degenerate,
            labels,
            auroc,
            normal,
            anomaly,
        })
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }

    /// Mean anomaly score minus mean normal score.
    pub fn gap(&self) -> Option<f64> {
        Some(self.anomaly?.mean - self.normal?.mean)
    }

    /// `id,score[,label]` rows followed by `#`-prefixed summary lines.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut out = String::new();
        match &self.labels {
            Some(_) => out.push_str("id,score,label\n"),
            None => out.push_str("id,score\n"),
        }
        for (i, (id, s)) in self.ids.iter().zip(&self.scores).enumerate() {
            match &self.labels {
                Some(l) => writeln!(out, "{id},{s},{}", l[i]).expect("string write"),
                None => writeln!(out, "{id},{s}").expect("string write"),
            }
        }
        for (key, value) in self.summary_pairs("") {
            writeln!(out, "# {key}={value}").expect("string write");
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    fn summary_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        let mut pairs = vec![
            (format!("{prefix}n"), self.scores.len().to_string()),
            (format!("{prefix}degenerate"), self.degenerate_count().to_string()),
        ];
        if let Some(a) = self.auroc {
            pairs.push((format!("{prefix}auroc"), a.to_string()));
        }
        for (name, stats) in [("normal", self.normal), ("anomaly", self.anomaly)] {
            if let Some(s) = stats {
                pairs.push((format!("{prefix}{name}_count"), s.count.to_string()));
                pairs.push((format!("{prefix}{name}_mean"), s.mean.to_string()));
                pairs.push((format!("{prefix}{name}_std"), s.std.to_string()));
            }
        }
        pairs
    }
}

/// Adapted scores alongside the no-adaptation baseline on the same queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub k: usize,
    pub adapted: ScoreReport,
    pub baseline: ScoreReport,
}

impl Evaluation {
    /// `key=value` lines; baseline keys carry a `baseline_` prefix.
    pub fn summary_text(&self) -> String {
        let mut out = format!("k={}\n", self.k);
        for (key, value) in self
            .adapted
            .summary_pairs("")
            .into_iter()
            .chain(self.baseline.summary_pairs("baseline_"))
        {
            writeln!(out, "{key}={value}").expect("string write");
        }
        out
    }
}

/// Test-rule neighbor sets for every row of `queries`, in row order.
/// Zero-norm queries yield `None`.
pub fn query_neighbors(bank: &MemoryBank, queries: &FeatureSet, k: usize) -> Result<Vec<Option<NeighborSet>>> {
    if queries.dim() != bank.dim() {
        return Err(CapError::DimensionMismatch {
            expected: bank.dim(),
            actual: queries.dim(),
        });
    }
    if k == 0 {
        return Err(CapError::KZero);
    }
    if k > bank.len() {
        return Err(CapError::KTooLarge {
            k,
            available: bank.len(),
        });
    }
    (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            if !(l2_norm(q) > MIN_NORM) {
                return Ok(None);
            }
            bank.top_k_neighbors(q, k, None).map(Some)
        })
        .collect()
}

/// Adapted scores for every query given precomputed neighbor sets.
pub fn score_all(model: &ModelParams, queries: &FeatureSet, neighbors: &[Option<NeighborSet>]) -> Result<Vec<AnomalyScore>> {
    (0..queries.len())
        .into_par_iter()
        .map(|i| match &neighbors[i] {
            Some(ns) => score_with_neighbors(model, queries.row(i), ns),
            None => Ok(AnomalyScore::DEGENERATE),
        })
        .collect()
}

fn baseline_all(queries: &FeatureSet, neighbors: &[Option<NeighborSet>]) -> Vec<AnomalyScore> {
    (0..queries.len())
        .into_par_iter()
        .map(|i| match &neighbors[i] {
            Some(ns) => baseline_with_neighbors(queries.row(i), ns),
            None => AnomalyScore::DEGENERATE,
        })
        .collect()
}

/// Scores a query set without computing the baseline.
pub fn score_set(model: &ModelParams, bank: &MemoryBank, queries: &FeatureSet, k: usize) -> Result<ScoreReport> {
    if queries.is_empty() {
        return Err(CapError::Empty("query set"));
    }
    let neighbors = query_neighbors(bank, queries, k)?;
    let scored = score_all(model, queries, &neighbors)?;
    ScoreReport::new(queries.ids.clone(), &scored, queries.labels.clone())
}

/// Scores every test sample with the model and with the baseline.
pub fn evaluate(model: &ModelParams, bank: &MemoryBank, test: &FeatureSet, k: usize) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(CapError::Empty("test set"));
    }
    let neighbors = query_neighbors(bank, test, k)?;
    let adapted = score_all(model, test, &neighbors)?;
    let baseline = baseline_all(test, &neighbors);
    Ok(Evaluation {
        k,
        adapted: ScoreReport::new(test.ids.clone(), &adapted, test.labels.clone())?,
        baseline: ScoreReport::new(test.ids.clone(), &baseline, test.labels.clone())?,
    })
}

//! Mini-batch training of the projection head and attention matrices.
//!
//! Neighbors are looked up once in the frozen pretrained space; every epoch
//! reuses the same table. Each training query excludes its own bank row.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{FeatureSet, MemoryBank, NeighborSet};
use crate::error::{CapError, Result};
use crate::model::{init_model, project, to_f64_matrix, HeadVariant, ModelParams};
use crate::objective::{evaluate_loss, gradients, ObjectiveConfig, QuerySample};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::scoring::{query_neighbors, score_all};

/// Head entries with magnitude below this count as zero in diagnostics.
pub const SPARSITY_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub k: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub head_variant: HeadVariant,
    pub attention_enabled: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Divide the constraint's squared distance by D.
    #[serde(default)]
    pub euclid_per_dim: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::cifar()
    }
}

impl TrainingConfig {
    /// Settings used for the natural-image benchmarks.
    pub fn cifar() -> Self {
        Self {
            k: 32,
            lambda: 2.0,
            learning_rate: 5e-4,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            head_variant: HeadVariant::Linear,
            attention_enabled: true,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            euclid_per_dim: false,
        }
    }

    /// Settings used for the industrial-inspection benchmark.
    pub fn mvtec() -> Self {
        Self {
            k: 4,
            lambda: 0.1,
            learning_rate: 1e-4,
            batch_size: 16,
            ..Self::cifar()
        }
    }

    /// Settings used for the standard synthetic suite.
    pub fn synthetic() -> Self {
        Self {
            k: 8,
            learning_rate: 2e-3,
            ..Self::cifar()
        }
    }

    pub const PRESETS: [&'static str; 3] = ["cifar", "mvtec", "synth"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar" => Ok(Self::cifar()),
            "mvtec" => Ok(Self::mvtec()),
            "synth" => Ok(Self::synthetic()),
            other => Err(CapError::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CapError::InvalidConfig(msg));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return fail("adam epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            euclid_per_dim: self.euclid_per_dim,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Loss and holdout statistics after one epoch (epoch 0 is the untrained model).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_s: f64,
    pub omega: f64,
    pub total: f64,
    pub head_frobenius: f64,
    pub holdout_normal_mean: Option<f64>,
    pub holdout_anomaly_mean: Option<f64>,
}

impl EpochRecord {
    pub fn holdout_gap(&self) -> Option<f64> {
        Some(self.holdout_anomaly_mean? - self.holdout_normal_mean?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    /// State before the first update, with the loss over the whole bank.
    pub initial: EpochRecord,
    /// One record per completed epoch; losses are sample-weighted means of
    /// the batch losses seen during the epoch.
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().unwrap_or(&self.initial)
    }

    pub const CSV_HEADER: &'static str =
        "epoch,l_s,omega,total,head_frobenius,holdout_normal_mean,holdout_anomaly_mean";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in std::iter::once(&self.initial).chain(&self.records) {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.l_s,
                r.omega,
                r.total,
                r.head_frobenius,
                opt(r.holdout_normal_mean),
                opt(r.holdout_anomaly_mean)
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Training-rule neighbor sets: for bank row `i`, its `k` nearest other rows.
pub fn precompute_neighbors(bank: &MemoryBank, k: usize) -> Result<Vec<NeighborSet>> {
    if k == 0 {
        return Err(CapError::KZero);
    }
    if k > bank.len().saturating_sub(1) {
        return Err(CapError::KTooLarge {
            k,
            available: bank.len().saturating_sub(1),
        });
    }
    (0..bank.len())
        .into_par_iter()
        .map(|i| bank.top_k_neighbors(bank.row(i), k, Some(i)))
        .collect()
}

/// Holdout queries with their neighbor sets fixed for the whole run.
struct Holdout<'a> {
    set: &'a FeatureSet,
    neighbors: Vec<Option<NeighborSet>>,
}

impl Holdout<'_> {
    fn class_means(&self, model: &ModelParams) -> Result<(Option<f64>, Option<f64>)> {
        let scores = score_all(model, self.set, &self.neighbors)?;
        let mean_of = |class: u8| {
            let picked: Vec<f64> = scores
                .iter()
                .enumerate()
                .filter(|(i, _)| self.set.labels.as_ref().map_or(0, |l| l[*i]) == class)
                .map(|(_, s)| s.score)
                .collect();
            (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
        };
        Ok((mean_of(0), mean_of(1)))
    }
}

/// Trains a model on the bank's normal features.
///
/// Initialization, shuffling and batch order are all derived from
/// `config.seed`. When a holdout set is given it is scored at the end of every
/// epoch; it never influences the updates.
pub fn train(
    bank: &MemoryBank,
    config: &TrainingConfig,
    holdout: Option<&FeatureSet>,
) -> Result<(ModelParams, TrainingTrace)> {
    config.validate()?;
    let table = precompute_neighbors(bank, config.k)?;
    let holdout = holdout
        .map(|set| {
            Ok::<_, CapError>(Holdout {
                set,
                neighbors: query_neighbors(bank, set, config.k)?,
            })
        })
        .transpose()?;

    let mut model = init_model(bank.dim(), config.head_variant, config.attention_enabled, config.seed);
    let objective = config.objective();
    let adam = config.adam();
    let mut state = OptimizerState::new(&model);

    let samples: Vec<QuerySample<'_>> = (0..bank.len())
        .map(|i| QuerySample {
            z: bank.row(i),
            neighbors: &table[i],
        })
        .collect();

    let record = |model: &ModelParams, epoch: usize, l_s: f64, omega: f64, total: f64| -> Result<EpochRecord> {
        let (normal, anomaly) = match &holdout {
            Some(h) => h.class_means(model)?,
            None => (None, None),
        };
        Ok(EpochRecord {
            epoch,
            l_s,
            omega,
            total,
            head_frobenius: model.head_frobenius(),
            holdout_normal_mean: normal,
            holdout_anomaly_mean: anomaly,
        })
    };

    let start = evaluate_loss(&model, &samples, objective)?;
    let initial = record(&model, 0, start.l_s, start.omega, start.total)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..bank.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut l_s, mut omega, mut total) = (0.0, 0.0, 0.0);
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<QuerySample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
            let (loss, grads) = gradients(&model, &batch, objective)?;
            if !loss.total.is_finite() {
                return Err(CapError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            adam_step(&mut state, &mut model, &grads, &adam);
            let w = chunk.len() as f64;
            l_s += loss.l_s * w;
            omega += loss.omega * w;
            total += loss.total * w;
        }
        let n = bank.len() as f64;
        records.push(record(&model, epoch, l_s / n, omega / n, total / n)?);
    }
    Ok((model, TrainingTrace { initial, records }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseReport {
    pub head_frobenius: f64,
    /// Fraction of head entries with magnitude below [`SPARSITY_THRESHOLD`].
    pub head_sparsity: f64,
    /// Share of the first head matrix's squared Frobenius norm carried by its
    /// largest singular value; near 1 when the head has collapsed to rank one.
    pub head_top_singular_share: f64,
    /// Mean and variance of adapted-feature norms over the bank rows.
    pub adapted_norm_mean: f64,
    pub adapted_norm_var: f64,
    pub holdout_normal_mean: Option<f64>,
    pub holdout_anomaly_mean: Option<f64>,
}

/// Measures how far a head has drifted toward the all-zero solution.
pub fn collapse_diagnostics(
    model: &ModelParams,
    bank: &MemoryBank,
    holdout: Option<&FeatureSet>,
    k: usize,
) -> Result<CollapseReport> {
    if model.dim() != bank.dim() {
        return Err(CapError::DimensionMismatch {
            expected: model.dim(),
            actual: bank.dim(),
        });
    }
    let head_entries: Vec<f64> = model
        .head
        .first
        .iter()
        .chain(model.head.second.iter().flat_map(|m| m.iter()))
        .copied()
        .collect();
    let sparse = head_entries.iter().filter(|v| v.abs() < SPARSITY_THRESHOLD).count();

    let adapted = project(&model.head, to_f64_matrix(&bank.items().to_owned()).view())?;
    let norms: Vec<f64> = adapted
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;

    let (holdout_normal_mean, holdout_anomaly_mean) = match holdout {
        Some(set) => Holdout {
            set,
            neighbors: query_neighbors(bank, set, k)?,
        }
        .class_means(model)?,
        None => (None, None),
    };
    Ok(CollapseReport {
        head_frobenius: model.head_frobenius(),
        head_sparsity: sparse as f64 / head_entries.len() as f64,
        head_top_singular_share: top_singular_share(&model.head.first),
        adapted_norm_mean: mean,
        adapted_norm_var: var,
        holdout_normal_mean,
        holdout_anomaly_mean,
    })
}

/// σ₁² / ‖W‖²_F by power iteration on WᵀW from a fixed start vector.
fn top_singular_share(w: &Array2<f64>) -> f64 {
    let frob2: f64 = w.iter().map(|x| x * x).sum();
    if frob2 == 0.0 {
        return 0.0;
    }
    let gram = w.t().dot(w);
    let mut v = Array1::from_elem(w.ncols(), 1.0 / (w.ncols() as f64).sqrt());
    let mut sigma2 = 0.0;
    for _ in 0..500 {
        let next = gram.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            break;
        }
        sigma2 = v.dot(&next);
        v = next / norm;
    }
    sigma2 / frob2
}

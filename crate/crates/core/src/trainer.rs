//! Training loop for the three embedding regimes: frozen (`fixed`),
//! unregularized (`finetune`) and L21-regularized (`delta`).
//!
//! All three share one loop. `finetune` updates delta rows with no penalty,
//! which is the same as fine-tuning the base vectors directly, but leaves the
//! pretrained matrix untouched.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use crate::delta::Mode;
use crate::delta::{
    l21_penalty, l21_subgradient, total_moving_distance, ComposedEmbedding, DeltaError, DeltaTable,
};
use crate::model::{self, ClassifierParams, Example, GradientBundle, ModelError};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no training examples")]
    NoData,
    #[error("no training example has an in-vocabulary token")]
    NoUsableData,
    #[error("non-finite gradient at epoch {epoch}, batch {batch}, parameter {parameter}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        parameter: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Delta(#[from] DeltaError),
}

/// How the L21 term is handled in `delta` mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegImpl {
    /// Gradient step on the task loss, then group soft-threshold.
    #[default]
    Proximal,
    /// Subgradient of the penalty added to the task gradient.
    Penalty,
}

impl fmt::Display for RegImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegImpl::Proximal => "proximal",
            RegImpl::Penalty => "penalty",
        })
    }
}

impl FromStr for RegImpl {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proximal" => Ok(RegImpl::Proximal),
            "penalty" => Ok(RegImpl::Penalty),
            other => Err(format!("unknown regularization impl {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Only used in `delta` mode.
    pub c: f64,
    pub reg_impl: RegImpl,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Delta,
            c: 1e-4,
            reg_impl: RegImpl::Proximal,
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 32,
            seed: 42,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return fail(format!("c must be finite and nonnegative, got {}", self.c));
        }
        if self.mode == Mode::Delta && self.c == 0.0 {
            return fail("delta mode needs c > 0; use finetune for c = 0".into());
        }
        Ok(())
    }

    /// Coefficient of the L21 term actually in force.
    pub fn effective_c(&self) -> f64 {
        match self.mode {
            Mode::Delta => self.c,
            Mode::Fixed | Mode::Finetune => 0.0,
        }
    }

    /// Short run name: `fixed`, `finetune` or `delta@1e-4`.
    pub fn label(&self) -> String {
        match self.mode {
            Mode::Delta => format!("delta@{:e}", self.c),
            m => m.to_string(),
        }
    }

    /// `fixed`, `finetune`, then one `delta` run per coefficient, all sharing
    /// the remaining settings of `self`.
    pub fn regime_grid(&self, cs: &[f64]) -> Vec<TrainConfig> {
        let mut out = vec![
            TrainConfig {
                mode: Mode::Fixed,
                ..self.clone()
            },
            TrainConfig {
                mode: Mode::Finetune,
                ..self.clone()
            },
        ];
        out.extend(cs.iter().map(|&c| TrainConfig {
            mode: Mode::Delta,
            c,
            ..self.clone()
        }));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f64,
    pub penalty: f64,
    pub total_loss: f64,
    pub dev_accuracy: Option<f64>,
    pub nonzero_rows: usize,
    pub moving_distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Training examples with no known token, per pass.
    pub skipped_examples: usize,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "epoch",
    "task_loss",
    "penalty",
    "total_loss",
    "dev_accuracy",
    "nonzero_rows",
    "moving_distance",
];

impl TrainReport {
    pub fn best(&self) -> Option<&EpochStats> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }

    /// One header line and one row per epoch. Floats use the shortest
    /// round-trip form so equal runs give equal bytes.
    pub fn to_tsv(&self) -> String {
        let mut out = REPORT_COLUMNS.join("\t");
        out.push('\n');
        for e in &self.epochs {
            let dev = fmt_acc(e.dev_accuracy);
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch,
                e.task_loss,
                e.penalty,
                e.total_loss,
                dev,
                e.nonzero_rows,
                e.moving_distance
            );
        }
        out
    }
}

/// Model state at the end of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub params: ClassifierParams,
    pub delta: DeltaTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Selected by dev accuracy, earliest epoch on ties.
    pub best: Snapshot,
    /// State after the final epoch.
    pub last: Snapshot,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn snapshot(&self, keep: Keep) -> &Snapshot {
        match keep {
            Keep::Best => &self.best,
            Keep::Last => &self.last,
        }
    }
}

/// Which snapshot to export.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Keep {
    #[default]
    Best,
    Last,
}

impl fmt::Display for Keep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Keep::Best => "best",
            Keep::Last => "last",
        })
    }
}

impl FromStr for Keep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "best" => Ok(Keep::Best),
            "last" => Ok(Keep::Last),
            other => Err(format!("unknown snapshot {other:?}")),
        }
    }
}

/// Position of a minibatch, for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepId {
    pub epoch: usize,
    pub batch: usize,
}

fn first_non_finite(grad: &GradientBundle) -> Option<String> {
    if let Some(i) = grad.weights.iter().position(|v| !v.is_finite()) {
        return Some(format!("weights[{i}]"));
    }
    if let Some(i) = grad.bias.iter().position(|v| !v.is_finite()) {
        return Some(format!("bias[{i}]"));
    }
    grad.delta
        .iter()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
        .map(|(id, _)| format!("delta[{id}]"))
}

/// Plain SGD on the classifier and the touched delta rows, followed by the
/// regime-specific handling of the L21 term.
pub fn sgd_step(
    params: &mut ClassifierParams,
    delta: &mut DeltaTable,
    grad: &GradientBundle,
    config: &TrainConfig,
    at: StepId,
) -> Result<(), TrainError> {
    if let Some(parameter) = first_non_finite(grad) {
        return Err(TrainError::NonFinite {
            epoch: at.epoch,
            batch: at.batch,
            parameter,
        });
    }
    let lr = config.learning_rate;
    params
        .weights
        .iter_mut()
        .zip(&grad.weights)
        .for_each(|(w, g)| *w -= lr * g);
    params
        .bias
        .iter_mut()
        .zip(&grad.bias)
        .for_each(|(b, g)| *b -= lr * g);

    match (config.mode, config.reg_impl) {
        (Mode::Fixed, _) => {}
        (Mode::Finetune, _) => {
            for (&id, g) in &grad.delta {
                let row = delta.row_mut(id);
                row.iter_mut().zip(g).for_each(|(r, g)| *r -= lr * g);
            }
        }
        (Mode::Delta, RegImpl::Penalty) => {
            for (&id, g) in &grad.delta {
                let row = delta.row_mut(id);
                let sub = l21_subgradient(row, config.c);
                row.iter_mut()
                    .zip(g.iter().zip(&sub))
                    .for_each(|(r, (g, s))| *r -= lr * (g + s));
            }
        }
        (Mode::Delta, RegImpl::Proximal) => {
            for (&id, g) in &grad.delta {
                let row = delta.row_mut(id);
                row.iter_mut().zip(g).for_each(|(r, g)| *r -= lr * g);
                delta.prox_row(id, lr, config.c);
            }
        }
    }
    Ok(())
}

/// Trains a classifier (and, outside `fixed` mode, a delta table) on top of
/// the frozen `base` embedding.
///
/// Deterministic for a given config: parameters are initialized and batches
/// shuffled from a single ChaCha8 stream seeded with `config.seed`. The best
/// snapshot is the epoch with the highest dev accuracy (earliest on ties), or
/// the last epoch when `dev` is empty.
pub fn train(
    config: &TrainConfig,
    train: &[Example],
    dev: &[Example],
    classes: usize,
    base: &EmbeddingMatrix,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::NoData);
    }
    if classes == 0 {
        return Err(TrainError::Config("need at least one class".into()));
    }
    for ex in train.iter().chain(dev) {
        if ex.label >= classes {
            return Err(ModelError::LabelOutOfRange {
                label: ex.label,
                classes,
            }
            .into());
        }
        if let Some(&id) = ex.ids.iter().find(|&&id| id >= base.rows()) {
            return Err(DeltaError::OutOfRange {
                id,
                len: base.rows(),
            }
            .into());
        }
    }
    let skipped = train.iter().filter(|e| e.ids.is_empty()).count();
    if skipped == train.len() {
        return Err(TrainError::NoUsableData);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ClassifierParams::init(classes, base.dim(), &mut rng);
    let mut delta = DeltaTable::new(base.dim());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let c = config.effective_c();

    let mut report = TrainReport {
        skipped_examples: skipped,
        ..TrainReport::default()
    };
    let mut best: Option<(f64, Snapshot)> = None;

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let emb = ComposedEmbedding::new(base, &delta)?;
            let (_, grad, _) =
                model::batch_backward(&params, &emb, chunk.iter().map(|&i| &train[i]))?;
            sgd_step(
                &mut params,
                &mut delta,
                &grad,
                config,
                StepId { epoch, batch },
            )?;
        }
        if config.mode == Mode::Delta && config.reg_impl == RegImpl::Proximal {
            delta.prox_sweep(config.learning_rate, c);
        }

        let emb = ComposedEmbedding::new(base, &delta)?;
        let task_loss = model::mean_loss(&params, &emb, train);
        let penalty = l21_penalty(&delta, c)?;
        let dev_accuracy = (!dev.is_empty()).then(|| model::accuracy(&params, &emb, dev));
        report.epochs.push(EpochStats {
            epoch,
            task_loss,
            penalty,
            total_loss: task_loss + penalty,
            dev_accuracy,
            nonzero_rows: delta.nonzero_count(),
            moving_distance: total_moving_distance(&delta),
        });

        let score = dev_accuracy.unwrap_or(f64::INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _)) => dev_accuracy.is_none() || score > *b,
        };
        if improved {
            let snap = Snapshot {
                epoch,
                params: params.clone(),
                delta: delta.clone(),
            };
            best = Some((score, snap));
            report.best_epoch = epoch;
        }
    }

    let (_, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        last: Snapshot {
            epoch: config.epochs,
            params,
            delta,
        },
        report,
    })
}

#[derive(Debug)]
pub struct SweepEntry {
    pub config: TrainConfig,
    pub result: Result<TrainOutcome, TrainError>,
}

/// Independent [`train`] runs over shared inputs. A failing run is recorded
/// in its entry and does not stop the others.
pub fn sweep(
    configs: &[TrainConfig],
    train_data: &[Example],
    dev: &[Example],
    classes: usize,
    base: &EmbeddingMatrix,
) -> Vec<SweepEntry> {
    configs
        .par_iter()
        .map(|config| SweepEntry {
            config: config.clone(),
            result: train(config, train_data, dev, classes, base),
        })
        .collect()
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "run",
    "mode",
    "c",
    "best_epoch",
    "best_dev_accuracy",
    "final_dev_accuracy",
    "final_task_loss",
    "final_penalty",
    "final_total_loss",
    "final_nonzero_rows",
    "final_nonzero_fraction",
    "final_moving_distance",
];

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "NA".to_owned(), |a| a.to_string())
}

/// One row per run: dev accuracy at the best epoch, then the final-epoch
/// statistics. Failed runs carry the error message in `best_dev_accuracy`.
pub fn sweep_table(entries: &[SweepEntry], vocab_size: usize) -> String {
    let mut out = SWEEP_COLUMNS.join("\t");
    out.push('\n');
    for entry in entries {
        let cfg = &entry.config;
        let c = cfg.effective_c();
        match &entry.result {
            Ok(outcome) => {
                let best = outcome.report.best();
                let Some(last) = outcome.report.epochs.last() else {
                    continue;
                };
                let fraction = if vocab_size == 0 {
                    0.0
                } else {
                    last.nonzero_rows as f64 / vocab_size as f64
                };
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    cfg.label(),
                    cfg.mode,
                    c,
                    outcome.report.best_epoch,
                    fmt_acc(best.and_then(|b| b.dev_accuracy)),
                    fmt_acc(last.dev_accuracy),
                    last.task_loss,
                    last.penalty,
                    last.total_loss,
                    last.nonzero_rows,
                    fraction,
                    last.moving_distance,
                );
            }
            Err(e) => {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\tNA\terror: {}{}",
                    cfg.label(),
                    cfg.mode,
                    c,
                    e,
                    "\tNA".repeat(7)
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (EmbeddingMatrix, Vec<Example>) {
        let base =
            EmbeddingMatrix::from_rows(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]], 2)
                .unwrap();
        let data = vec![
            Example {
                ids: vec![0, 2],
                label: 0,
            },
            Example {
                ids: vec![1, 2],
                label: 1,
            },
            Example {
                ids: vec![0],
                label: 0,
            },
            Example {
                ids: vec![1],
                label: 1,
            },
        ];
        (base, data)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                c: 0.0,
                ..Default::default()
            },
            TrainConfig {
                c: -1.0,
                mode: Mode::Finetune,
                ..Default::default()
            },
            TrainConfig {
                c: f64::INFINITY,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(TrainError::Config(_))),
                "{cfg:?}"
            );
        }
        assert!(TrainConfig {
            c: 0.0,
            mode: Mode::Finetune,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn labels_and_grid() {
        let grid = TrainConfig::default().regime_grid(&[1e-3, 1e-4, 1e-5]);
        let labels: Vec<_> = grid.iter().map(TrainConfig::label).collect();
        assert_eq!(
            labels,
            [
                "fixed",
                "finetune",
                "delta@1e-3",
                "delta@1e-4",
                "delta@1e-5"
            ]
        );
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = ClassifierParams::seeded(2, 2, 1);
        let before = params.clone();
        let mut delta = DeltaTable::new(2);
        let grad = GradientBundle::zeros(2, 2);
        let cfg = TrainConfig {
            mode: Mode::Finetune,
            ..Default::default()
        };
        sgd_step(&mut params, &mut delta, &grad, &cfg, StepId::default()).unwrap();
        assert_eq!(params, before);
        assert!(delta.is_empty());
    }

    #[test]
    fn scalar_step() {
        let mut params = ClassifierParams::zeros(1, 1);
        params.bias = vec![1.0];
        let mut grad = GradientBundle::zeros(1, 1);
        grad.bias = vec![2.0];
        let cfg = TrainConfig {
            mode: Mode::Fixed,
            learning_rate: 0.1,
            ..Default::default()
        };
        sgd_step(
            &mut params,
            &mut DeltaTable::new(1),
            &grad,
            &cfg,
            StepId::default(),
        )
        .unwrap();
        assert!((params.bias[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut grad = GradientBundle::zeros(2, 2);
        grad.delta.insert(5, vec![0.0, f64::NAN]);
        let err = sgd_step(
            &mut ClassifierParams::zeros(2, 2),
            &mut DeltaTable::new(2),
            &grad,
            &TrainConfig::default(),
            StepId { epoch: 3, batch: 7 },
        )
        .unwrap_err();
        match err {
            TrainError::NonFinite {
                epoch,
                batch,
                parameter,
            } => {
                assert_eq!((epoch, batch, parameter.as_str()), (3, 7, "delta[5]"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn fixed_mode_keeps_delta_empty() {
        let (base, data) = tiny();
        let cfg = TrainConfig {
            mode: Mode::Fixed,
            epochs: 5,
            batch_size: 2,
            ..Default::default()
        };
        let out = train(&cfg, &data, &data, 2, &base).unwrap();
        assert!(out.best.delta.is_empty() && out.last.delta.is_empty());
        assert!(out
            .report
            .epochs
            .iter()
            .all(|e| e.moving_distance == 0.0 && e.penalty == 0.0));
    }

    #[test]
    fn bookkeeping_identity_and_determinism() {
        let (base, data) = tiny();
        let cfg = TrainConfig {
            c: 1e-2,
            epochs: 6,
            batch_size: 2,
            ..Default::default()
        };
        let a = train(&cfg, &data, &data, 2, &base).unwrap();
        let b = train(&cfg, &data, &data, 2, &base).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.report.to_tsv(), b.report.to_tsv());
        for e in &a.report.epochs {
            assert_eq!(e.total_loss, e.task_loss + e.penalty);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (base, data) = tiny();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&cfg, &[], &[], 2, &base),
            Err(TrainError::NoData)
        ));
        let oov = vec![Example {
            ids: vec![],
            label: 0,
        }];
        assert!(matches!(
            train(&cfg, &oov, &[], 2, &base),
            Err(TrainError::NoUsableData)
        ));
        let bad_label = vec![Example {
            ids: vec![0],
            label: 4,
        }];
        assert!(train(&cfg, &bad_label, &[], 2, &base).is_err());
        let bad_cfg = TrainConfig {
            c: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            train(&bad_cfg, &data, &[], 2, &base),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn empty_dev_keeps_last_epoch() {
        let (base, data) = tiny();
        let cfg = TrainConfig {
            epochs: 4,
            ..Default::default()
        };
        let out = train(&cfg, &data, &[], 2, &base).unwrap();
        assert_eq!(out.report.best_epoch, 4);
        assert_eq!(out.best, out.last);
        assert!(out.report.epochs.iter().all(|e| e.dev_accuracy.is_none()));
        assert!(out
            .report
            .to_tsv()
            .lines()
            .nth(1)
            .unwrap()
            .contains("\tNA\t"));
    }

    #[test]
    fn sweep_of_one_equals_train() {
        let (base, data) = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let single = train(&cfg, &data, &data, 2, &base).unwrap();
        let swept = sweep(std::slice::from_ref(&cfg), &data, &data, 2, &base);
        assert_eq!(swept.len(), 1);
        assert_eq!(swept[0].result.as_ref().unwrap(), &single);
    }

    #[test]
    fn sweep_records_failures() {
        let (base, data) = tiny();
        let configs = vec![
            TrainConfig {
                c: 0.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 2,
                ..Default::default()
            },
        ];
        let entries = sweep(&configs, &data, &data, 2, &base);
        assert!(entries[0].result.is_err());
        assert!(entries[1].result.is_ok());
        let table = sweep_table(&entries, 3);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(1).unwrap().contains("error:"));
    }
}

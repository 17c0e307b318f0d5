//! Optimization loop: Adam on the EMD (or Chamfer) loss, per-epoch metric
//! history, evaluation and checkpoints.
//!
//! Every random stream (shuffle order, dropout masks, decoder seeds) is
//! derived from the master seed and the epoch/step counters, so a run
//! resumed from a checkpoint continues exactly like an uninterrupted one.

mod ablation;
mod checkpoint;
mod history;

pub use ablation::{
    cell_spec, run_ablation, run_cell, write_ablation_csv, AblationCell, AblationGrid, AblationRow, ABLATION_HEADER,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use history::{read_history_csv, write_history_csv, EpochRecord, HISTORY_HEADER};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, oracle_metrics, Dataset, PairSample, Split};
use crate::decoder::generate_seeds;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{
    chamfer, chamfer_loss_batch, emd_approx, emd_loss_batch, evaluate_pair, AuctionSettings, MetricReport,
    ObjectMetrics,
};
use crate::model::{Model, EVAL_SEED};
use crate::nn::{Forward, Mode, Params, DEFAULT_INIT_SIGMA};
use crate::tensor::Graph;

/// Batch size used when predicting for evaluation; it does not affect
/// results since evaluation-mode layers act on rows independently.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Emd,
    Chamfer,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Emd => "emd",
            LossKind::Chamfer => "chamfer",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emd" => Ok(LossKind::Emd),
            "chamfer" => Ok(LossKind::Chamfer),
            _ => Err(Error::InvalidArgument(format!("unknown loss {s:?} (expected emd or chamfer)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Auction tolerance of the training loss. Coarser than the metric
/// default: the assignment only steers gradients.
pub const TRAIN_AUCTION_EPS: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamSettings,
    /// Standard deviation of the Gaussian weight init.
    pub init_sigma: f64,
    /// Dropout rate inside the attention block; overrides the encoder spec.
    pub dropout: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Decoder seed stream used by evaluation.
    pub eval_seed: u64,
    pub auction: AuctionSettings,
    /// Validation is evaluated every this many epochs and after the last
    /// one; 0 evaluates only after the last epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            adam: AdamSettings::default(),
            init_sigma: DEFAULT_INIT_SIGMA,
            dropout: crate::encoder::DEFAULT_DROPOUT,
            loss: LossKind::Emd,
            seed: 0,
            eval_seed: EVAL_SEED,
            auction: AuctionSettings {
                eps: TRAIN_AUCTION_EPS,
                ..AuctionSettings::default()
            },
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config("init_sigma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.auction.eps > 0.0) || self.auction.max_rounds == 0 {
            return Err(Error::Config("auction eps and max_rounds must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(settings: AdamSettings) -> Self {
        Adam {
            settings,
            ..Adam::default()
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamSettings { beta1, beta2, eps } = self.settings;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?.data_mut();
            if p.len() != g.len() {
                return Err(Error::SizeMismatch {
                    left: p.len(),
                    right: g.len(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Train-mode metrics averaged over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub loss: f64,
    pub cd: f64,
    pub emd: f64,
}

/// Result of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub predictions: Vec<PointCloud>,
    /// Per-item matched distance when the loss is EMD.
    pub emd: Option<Vec<f64>>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Last completed epoch; 0 before training.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.spec.encoder.dropout_rate = config.dropout;
        let adam = Adam::new(config.adam);
        Ok(Trainer {
            model,
            config,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One forward/backward pass over `items` and an Adam update.
    ///
    /// `step` numbers the update globally and keys its dropout stream and
    /// decoder seeds.
    pub fn train_step(&mut self, items: &[&PairSample], step: u64) -> Result<StepOutcome> {
        let spec = &self.model.spec;
        let n = spec.input_points;
        let seed = self.config.seed;
        let mut flat = Vec::with_capacity(items.len() * n * 3);
        for p in items {
            flat.extend(crate::model::unify(&p.partial, n)?.flat());
        }
        let targets: Vec<PointCloud> = items.iter().map(|p| p.complete.clone()).collect();
        let seeds = (0..items.len())
            .map(|i| generate_seeds(&spec.decoder, derive_seed(seed, "seeds", step * items.len() as u64 + i as u64)))
            .collect::<Result<Vec<_>>>()?;

        let mut g = Graph::new();
        g.set_retain_grads(false);
        let mut f = Forward::new(
            &mut g,
            &self.model.params,
            &self.model.buffers,
            Mode::Train,
            derive_seed(seed, "dropout", step),
        );
        let x = f.graph.constant(vec![items.len() * n, 3], flat)?;
        let pred = Model::forward(spec, &mut f, x, n, &seeds)?;
        let (loss, plans) = match self.config.loss {
            LossKind::Emd => {
                let (l, plans) = emd_loss_batch(f.graph, pred, &targets, self.config.auction)?;
                (l, Some(plans))
            }
            LossKind::Chamfer => (chamfer_loss_batch(f.graph, pred, &targets)?, None),
        };
        let loss_value = f.graph.value(loss)[0];
        let out = spec.decoder.out_points();
        let predictions = f
            .graph
            .value(pred)
            .chunks(out * 3)
            .map(|c| PointCloud::from_flat(c, crate::geometry::Frame::Canonical))
            .collect::<Result<Vec<_>>>()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        f.graph.backward(loss)?;
        let grads = f.param_grads();
        let stats = f.take_batch_stats();
        drop(f);
        self.adam.update(&mut self.model.params, &grads, self.config.lr)?;
        self.model.buffers.apply(&stats)?;
        Ok(StepOutcome {
            loss: loss_value,
            predictions,
            emd: plans.map(|p| p.iter().map(|p| p.total_cost).collect()),
        })
    }

    /// One shuffled pass over `train`; records and returns the epoch's
    /// train-mode metrics.
    pub fn train_epoch(&mut self, train: &[PairSample]) -> Result<EpochSummary> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let epoch = self.epoch + 1;
        let batch = self.config.batch_size;
        let batches = train.len().div_ceil(batch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "shuffle", epoch as u64)));

        let (mut loss_sum, mut cd_sum, mut emd_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(batch).enumerate() {
            let items: Vec<&PairSample> = chunk.iter().map(|&i| &train[i]).collect();
            let step = ((epoch - 1) * batches + b) as u64;
            let outcome = match self.train_step(&items, step) {
                Err(Error::NonFinite(_)) => return Err(Error::NanLoss { epoch, batch: b }),
                other => other?,
            };
            loss_sum += outcome.loss * items.len() as f64;
            let item_metrics: Vec<(f64, f64)> = outcome
                .predictions
                .par_iter()
                .zip(&items)
                .enumerate()
                .map(|(i, (pred, pair))| {
                    let cd = chamfer(pred, &pair.complete)?;
                    let emd = match &outcome.emd {
                        Some(e) => e[i],
                        None => {
                            let a = self.config.auction;
                            emd_approx(pred, &pair.complete, a.eps, a.max_rounds)?.total_cost
                        }
                    };
                    Ok((cd, emd))
                })
                .collect::<Result<_>>()?;
            for (cd, emd) in item_metrics {
                cd_sum += cd;
                emd_sum += emd;
            }
        }
        self.epoch = epoch;
        let n = train.len() as f64;
        let summary = EpochSummary {
            loss: loss_sum / n,
            cd: cd_sum / n,
            emd: emd_sum / n,
        };
        self.history.push(EpochRecord {
            epoch,
            split: Split::Train,
            cd: summary.cd,
            emd: summary.emd,
        });
        Ok(summary)
    }

    /// Evaluates validation and records it at `self.epoch`.
    pub fn record_validation(&mut self, val: &[PairSample]) -> Result<MetricReport> {
        let report = evaluate(&self.model, val, self.config.eval_seed)?;
        self.history.push(EpochRecord {
            epoch: self.epoch,
            split: Split::Val,
            cd: report.cd,
            emd: report.emd,
        });
        Ok(report)
    }

    /// Trains up to `config.epochs`, starting after the last completed
    /// epoch. Validation at epoch 0 is recorded on a fresh run.
    /// `after_epoch` runs after every epoch, e.g. to write a checkpoint.
    pub fn run(&mut self, data: &Dataset, mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        let has_val = !data.val.is_empty();
        if self.epoch == 0 && self.history.is_empty() && has_val {
            self.record_validation(&data.val)?;
        }
        while self.epoch < self.config.epochs {
            let summary = self.train_epoch(&data.train)?;
            let last = self.epoch == self.config.epochs;
            let due = self.config.eval_every > 0 && self.epoch % self.config.eval_every == 0;
            let mut line = format!(
                "epoch {}/{}: loss {:.6} train cd {:.6} emd {:.6}",
                self.epoch, self.config.epochs, summary.loss, summary.cd, summary.emd
            );
            if has_val && (last || due) {
                let r = self.record_validation(&data.val)?;
                line.push_str(&format!(" | val cd {:.6} emd {:.6}", r.cd, r.emd));
            }
            log::info!("{line}");
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let adam = ckpt.adam.unwrap_or_else(|| Adam::new(ckpt.config.adam));
        Ok(Trainer {
            model: ckpt.model,
            config: ckpt.config,
            adam,
            epoch: ckpt.epoch,
            history: ckpt.history,
        })
    }
}

/// Per-item evaluation-mode predictions with a fixed decoder seed batch.
pub fn predict_all(model: &Model, pairs: &[PairSample], eval_seed: u64) -> Result<Vec<PointCloud>> {
    let seeds = generate_seeds(&model.spec.decoder, eval_seed)?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let inputs: Vec<&PointCloud> = chunk.iter().map(|p| &p.partial).collect();
        out.extend(model.predict(&inputs, &model.spec.decoder, &seeds)?);
    }
    Ok(out)
}

/// Evaluation-mode CD/EMD per item, averaged overall and per object.
pub fn evaluate(model: &Model, pairs: &[PairSample], eval_seed: u64) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let predictions = predict_all(model, pairs, eval_seed)?;
    let metrics: Vec<ObjectMetrics> = predictions
        .par_iter()
        .zip(pairs)
        .map(|(pred, pair)| evaluate_pair(pred, &pair.complete))
        .collect::<Result<_>>()?;
    Ok(MetricReport::from_items(
        pairs.iter().zip(metrics).map(|(p, m)| (p.object_name.as_str(), m)),
    ))
}

/// Mean resampling-oracle metrics over the pairs whose generating shape is
/// known; `None` when no pair carries one.
pub fn oracle_row(pairs: &[PairSample], seed: u64) -> Result<Option<ObjectMetrics>> {
    let rows: Vec<Option<ObjectMetrics>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| oracle_metrics(p, derive_seed(seed, "oracle", i as u64)))
        .collect::<Result<_>>()?;
    let known: Vec<ObjectMetrics> = rows.into_iter().flatten().collect();
    if known.is_empty() {
        return Ok(None);
    }
    let n = known.len() as f64;
    Ok(Some(ObjectMetrics {
        cd: known.iter().map(|m| m.cd).sum::<f64>() / n,
        emd: known.iter().map(|m| m.emd).sum::<f64>() / n,
    }))
}

/// [`evaluate`] plus the oracle row.
pub fn evaluate_with_oracle(model: &Model, pairs: &[PairSample], eval_seed: u64) -> Result<MetricReport> {
    let mut report = evaluate(model, pairs, eval_seed)?;
    report.oracle = oracle_row(pairs, eval_seed)?;
    Ok(report)
}

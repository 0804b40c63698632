//! Training loop with dev-set model selection.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::HyperConfig;
use crate::data::{batch_iter, BatchMode, Dataset, FeatureBatch};
use crate::eval::evaluate;
use crate::interaction::Pairs;
use crate::model::Model;
use crate::numerics::{clip_grad_norm, Graph, NumericsError, OptimState};
use crate::objective::total_loss;
use crate::Error;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    /// Mean total loss over the epoch's batches; `None` if none ran.
    pub loss: Option<f64>,
    pub dev_hit1: f64,
    pub dev_hit3: f64,
    pub dev_hit5: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunState {
    pub epoch: usize,
    pub step: u64,
    pub best_dev_hit1: f64,
    /// Shuffling for epoch `e` is drawn from `epoch_seed(seed, e)`, so the
    /// seed and epoch fully determine the sampler.
    pub seed: u64,
    pub config: HyperConfig,
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Gold columns of one in-batch grid. Mentions without a gold are dropped;
/// mentions sharing a gold share its column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchTargets {
    pub mentions: Vec<usize>,
    /// KB positions of the columns, in first-appearance order.
    pub columns: Vec<usize>,
    pub positives: Vec<usize>,
}

pub fn batch_targets(ds: &Dataset, batch: &[usize]) -> BatchTargets {
    let mut col_of: HashMap<usize, usize> = HashMap::new();
    let mut t = BatchTargets {
        mentions: Vec::with_capacity(batch.len()),
        columns: Vec::new(),
        positives: Vec::with_capacity(batch.len()),
    };
    for &mi in batch {
        let Some(kb) = ds.mentions[mi].gold.as_ref().and_then(|g| ds.kb.position(g)) else {
            continue;
        };
        let col = *col_of.entry(kb).or_insert_with(|| {
            t.columns.push(kb);
            t.columns.len() - 1
        });
        t.mentions.push(mi);
        t.positives.push(col);
    }
    t
}

/// Builds the loss graph for one batch. Returns `None` when fewer than two
/// distinct gold columns remain.
pub fn batch_loss_graph(
    model: &Model<f32>,
    ds: &Dataset,
    batch: &[usize],
) -> Result<Option<(Graph<f32>, crate::objective::LossParts)>, NumericsError> {
    let t = batch_targets(ds, batch);
    if t.columns.len() < 2 {
        return Ok(None);
    }
    let mf: Vec<_> = t.mentions.iter().map(|&i| &ds.mentions[i].features).collect();
    let ef: Vec<_> = t.columns.iter().map(|&i| &ds.kb.get(i).features).collect();
    let mb = FeatureBatch::assemble(&mf);
    let eb = FeatureBatch::assemble(&ef);
    let (b, c) = (mf.len(), ef.len());
    let mut g = Graph::new();
    let (_, _, s) = model.forward(&mut g, &mb, &eb, &Pairs::grid(b, c))?;
    let sv = g.reshape(s.s_v, &[b, c])?;
    let st = g.reshape(s.s_t, &[b, c])?;
    let sc = g.reshape(s.s_c, &[b, c])?;
    let cfg = &model.config;
    let parts = total_loss(&mut g, sv, st, sc, &t.positives, cfg.lambda, cfg.temperature)?;
    Ok(Some((g, parts)))
}

pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    pub state: TrainRunState,
    pub history: Vec<EpochMetrics>,
    train: &'a Dataset,
    dev: &'a Dataset,
    started: Instant,
}

fn norms_summary(model: &Model<f32>) -> String {
    model
        .params
        .value_norms()
        .iter()
        .map(|(k, v)| format!("{k}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl<'a> Trainer<'a> {
    pub fn new(config: &HyperConfig, train: &'a Dataset, dev: &'a Dataset) -> Result<Self, Error> {
        let model = Model::<f32>::init(config)?;
        model.check_dims(train.dims)?;
        model.check_dims(dev.dims)?;
        let optim = OptimState::new(config.optimizer(), &model.params);
        Ok(Trainer {
            model,
            optim,
            state: TrainRunState {
                epoch: 0,
                step: 0,
                best_dev_hit1: 0.0,
                seed: config.seed,
                config: config.clone(),
            },
            history: Vec::new(),
            train,
            dev,
            started: Instant::now(),
        })
    }

    fn non_finite(&self, batch: usize) -> Error {
        Error::NonFiniteLoss {
            epoch: self.state.epoch,
            batch,
            norms: norms_summary(&self.model),
        }
    }

    /// One optimizer step on `batch`; `None` if the batch was skipped.
    pub fn train_step(&mut self, batch_id: usize, batch: &[usize]) -> Result<Option<f64>, Error> {
        let Some((g, parts)) = batch_loss_graph(&self.model, self.train, batch)? else {
            log::debug!("epoch {} batch {batch_id}: fewer than two gold columns, skipped", self.state.epoch);
            return Ok(None);
        };
        let loss = g.value(parts.total).data()[0] as f64;
        if !loss.is_finite() {
            return Err(self.non_finite(batch_id));
        }
        g.backward_into(parts.total, &mut self.model.params)?;
        if let Some(max) = self.model.config.grad_clip {
            clip_grad_norm(&mut self.model.params, max);
        }
        match self.optim.step(&mut self.model.params) {
            Err(NumericsError::NonFiniteGradient(param)) => {
                return Err(Error::NonFiniteGradient {
                    epoch: self.state.epoch,
                    batch: batch_id,
                    param,
                    norms: norms_summary(&self.model),
                })
            }
            r => r?,
        }
        self.state.step = self.optim.step;
        Ok(Some(loss))
    }

    /// Trains one epoch and evaluates on the dev split.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, Error> {
        let cfg = &self.model.config;
        let batches = batch_iter(
            self.train.len(),
            cfg.batch_size,
            epoch_seed(cfg.seed, self.state.epoch),
            BatchMode::Train,
        );
        if batches.is_empty() {
            log::warn!(
                "training split has {} mentions, fewer than one batch of {}",
                self.train.len(),
                cfg.batch_size
            );
        }
        let mut total = 0.0;
        let mut ran = 0usize;
        for (i, b) in batches.iter().enumerate() {
            if let Some(l) = self.train_step(i, b)? {
                total += l;
                ran += 1;
            }
        }
        self.state.epoch += 1;
        let report = evaluate(&self.model, self.dev, &[1, 3, 5])?;
        let m = EpochMetrics {
            epoch: self.state.epoch,
            step: self.state.step,
            loss: (ran > 0).then(|| total / ran as f64),
            dev_hit1: report.hit(1),
            dev_hit3: report.hit(3),
            dev_hit5: report.hit(5),
            wall_ms: self.started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {} step {} loss {:?} dev hit@1 {:.4} hit@5 {:.4}",
            m.epoch,
            m.step,
            m.loss,
            m.dev_hit1,
            m.dev_hit5
        );
        self.history.push(m.clone());
        Ok(m)
    }

    pub fn checkpoint(&self, with_optim: bool) -> Checkpoint {
        Checkpoint::new(
            self.model.clone(),
            with_optim.then(|| self.optim.clone()),
            self.state.epoch,
            self.state.step,
            self.state.best_dev_hit1,
        )
    }
}

/// Output locations of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub state: TrainRunState,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs `config.epochs` epochs, writing `best.ckpt`, `last.ckpt` and
/// `metrics.jsonl` under `out_dir`. The best checkpoint is the one with
/// the highest dev Hit@1 seen so far, starting from the initialization.
pub fn train(config: &HyperConfig, train_set: &Dataset, dev_set: &Dataset, out_dir: impl AsRef<Path>) -> Result<TrainOutcome, Error> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let log_path = out_dir.join(METRICS_LOG);

    let mut trainer = Trainer::new(config, train_set, dev_set)?;
    let init = evaluate(&trainer.model, dev_set, &[1])?;
    trainer.state.best_dev_hit1 = init.hit(1);
    trainer.checkpoint(false).save(&best_path)?;

    let file = File::create(&log_path).map_err(io(&log_path))?;
    let mut log = BufWriter::new(file);
    for _ in 0..config.epochs {
        let m = trainer.run_epoch()?;
        writeln!(log, "{}", serde_json::to_string(&m).expect("metrics serialise")).map_err(io(&log_path))?;
        log.flush().map_err(io(&log_path))?;
        if m.dev_hit1 > trainer.state.best_dev_hit1 {
            trainer.state.best_dev_hit1 = m.dev_hit1;
            trainer.checkpoint(false).save(&best_path)?;
        }
    }
    trainer.checkpoint(true).save(&last_path)?;
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        metrics_log: log_path,
        history: trainer.history,
        state: trainer.state,
    })
}

//! Training loop: per-image tapes reduced in a fixed order, AdamW with two
//! learning-rate groups, a step learning-rate drop, and per-epoch metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::criterion::{set_prediction_loss, LossBreakdown};
use crate::data::{generate_dataset, generate_scene, normalize, Scene};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::model::{Deco, ParamGroup};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LR_DROP_FACTOR: f64 = 0.1;
pub const CHECKPOINT_FILE: &str = "checkpoint.deco";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,lr,lr_backbone,total,class,l1,giou,ap50";

/// Learning rate in effect during 0-based `epoch`.
pub fn lr_at(base: f64, epoch: usize, drop_epoch: usize) -> f64 {
    if epoch >= drop_epoch {
        base * LR_DROP_FACTOR
    } else {
        base
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub lr_backbone: f64,
    pub loss: LossBreakdown,
    /// AP50 on the held-out split; `None` when the split is empty.
    pub ap50: Option<f64>,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in rows {
        let ap = m.ap50.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:.6},{:.6},{:.6},{:.6},{}",
            m.epoch, m.lr, m.lr_backbone, m.loss.total, m.loss.class_loss, m.loss.l1_loss, m.loss.giou_loss, ap
        );
    }
    s
}

/// Number of parameters in each group; every parameter is in exactly one.
pub fn group_sizes(store: &ParamStore<f32>) -> (usize, usize) {
    let backbone = store.iter().filter(|(_, p)| ParamGroup::of(&p.name) == ParamGroup::Backbone).count();
    (backbone, store.len() - backbone)
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Deco,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    held_out: Vec<Scene>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Deco::new::<f32>(&config.model, config.train.seed)?;
        let (b, r) = group_sizes(&store);
        if b + r != store.len() || b == 0 {
            return Err(Error::invalid("train", "parameter groups must partition the model"));
        }
        let optimizer = AdamW::new(
            &store,
            AdamWConfig {
                betas: config.train.betas,
                eps: config.train.adam_eps,
                weight_decay: config.train.weight_decay,
            },
        );
        Ok(Trainer {
            held_out: generate_dataset(&config.data.held_out()),
            config: config.clone(),
            model,
            store,
            optimizer,
            epoch: 0,
        })
    }

    /// Continue from a checkpoint that carries optimizer state.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let config = ck.config()?;
        let mut t = Trainer::new(&config)?;
        ck.load_into(&mut t.store)?;
        let state = ck
            .optimizer_state::<f32>()
            .ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
        t.epoch = (state.step as usize) / t.steps_per_epoch();
        t.optimizer.state = state;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        let full = self.config.data.count.div_ceil(self.config.train.batch_size).max(1);
        match self.config.train.max_steps_per_epoch {
            0 => full,
            cap => cap.min(full),
        }
    }

    pub fn held_out(&self) -> &[Scene] {
        &self.held_out
    }

    fn lrs(&self, epoch: usize) -> (f64, f64) {
        let t = &self.config.train;
        (lr_at(t.lr, epoch, t.lr_drop_epoch), lr_at(t.lr_backbone, epoch, t.lr_drop_epoch))
    }

    /// Training scenes for one epoch, as `(scene index, flip)` in visiting order.
    fn epoch_plan(&self, epoch: usize) -> Vec<(u64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(epoch as u64 + 1);
        let n = self.config.data.count as u64;
        let mut order: Vec<u64> = (0..n).collect();
        if !self.config.train.overfit_batch {
            order.shuffle(&mut rng);
        }
        order
            .into_iter()
            .map(|i| (i, self.config.data.hflip && rng.random_bool(0.5)))
            .collect()
    }

    /// Forward, loss and backward for one scene; returns the gradient of
    /// every parameter in store order.
    pub fn scene_gradients(&self, scene: &Scene) -> Result<(Vec<Vec<f32>>, LossBreakdown)> {
        let spec = &self.config.data;
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &self.store, normalize(&scene.image, spec.mean, spec.std))?;
        let mut weights = self.config.loss;
        weights.aux &= self.config.model.aux_loss;
        let loss = set_prediction_loss(&mut tape, &out.per_layer, &scene.objects, &weights)?;
        let grads = tape.backward(loss.total)?;
        Ok((grads.param_grads(&self.store), loss.breakdown))
    }

    /// One optimizer step on the mean loss of `scenes`.
    pub fn train_step(&mut self, scenes: &[Scene], epoch: usize) -> Result<LossBreakdown> {
        let results: Vec<(Vec<Vec<f32>>, LossBreakdown)> =
            scenes.par_iter().map(|s| self.scene_gradients(s)).collect::<Result<_>>()?;
        let inv = 1.0 / scenes.len() as f32;
        for (k, (_, p)) in self.store.iter_mut().enumerate() {
            let g = p.grad.data_mut();
            g.iter_mut().for_each(|v| *v = 0.0);
            for (grads, _) in &results {
                for (acc, &v) in g.iter_mut().zip(&grads[k]) {
                    *acc += v;
                }
            }
            g.iter_mut().for_each(|v| *v *= inv);
        }
        let (lr, lr_backbone) = self.lrs(epoch);
        self.optimizer.step(&mut self.store, |name| match ParamGroup::of(name) {
            ParamGroup::Backbone => lr_backbone,
            ParamGroup::Rest => lr,
        })?;
        let breakdowns: Vec<LossBreakdown> = results.into_iter().map(|(_, b)| b).collect();
        Ok(LossBreakdown::mean(&breakdowns))
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let plan = self.epoch_plan(epoch);
        let bs = self.config.train.batch_size;
        let mut losses = Vec::new();
        for step in 0..self.steps_per_epoch() {
            let chunk = if self.config.train.overfit_batch {
                &plan[..bs.min(plan.len())]
            } else {
                let start = step * bs;
                &plan[start..(start + bs).min(plan.len())]
            };
            let spec = &self.config.data;
            let scenes: Vec<Scene> = chunk
                .par_iter()
                .map(|&(i, flip)| {
                    let s = generate_scene(spec, i);
                    if flip {
                        s.hflip()
                    } else {
                        s
                    }
                })
                .collect();
            losses.push(self.train_step(&scenes, epoch)?);
        }
        let ap50 = if self.held_out.is_empty() {
            None
        } else {
            Some(self.evaluate(&self.held_out)?.ap50)
        };
        let (lr, lr_backbone) = self.lrs(epoch);
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            lr,
            lr_backbone,
            loss: LossBreakdown::mean(&losses),
            ap50,
        })
    }

    pub fn evaluate(&self, scenes: &[Scene]) -> Result<EvalReport> {
        evaluate_model(&self.model, &self.store, scenes, &self.config.data)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.store, Some(&self.optimizer.state))
    }

    /// Final-layer predictions for a probe image, for persistence checks.
    pub fn probe(&self, image: &Tensor<f32>) -> Result<crate::decoder::DetectionSet> {
        let spec = &self.config.data;
        self.model.predict(&self.store, normalize(image, spec.mean, spec.std))
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
}

/// Run `train.epochs` epochs from scratch. With `out_dir`, the metrics CSV
/// is rewritten after every epoch and the checkpoint is written at the end.
pub fn train_run(
    config: &RunConfig,
    out_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    run_to_end(Trainer::new(config)?, String::new(), out_dir, on_epoch)
}

/// Continue a checkpointed run up to its `train.epochs`. Rows already in
/// `out_dir`'s metrics CSV for the completed epochs are kept.
pub fn resume_run(
    ck: &Checkpoint,
    out_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let trainer = Trainer::resume(ck)?;
    let mut prior = String::new();
    if let Some(dir) = out_dir {
        if let Ok(text) = fs::read_to_string(dir.join(METRICS_FILE)) {
            for line in text.lines().skip(1).take(trainer.epoch) {
                prior.push_str(line);
                prior.push('\n');
            }
        }
    }
    run_to_end(trainer, prior, out_dir, on_epoch)
}

fn run_to_end(
    mut trainer: Trainer,
    prior_rows: String,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let epochs = trainer.config.train.epochs;
    let mut metrics = Vec::with_capacity(epochs.saturating_sub(trainer.epoch));
    while trainer.epoch < epochs {
        let m = trainer.run_epoch()?;
        on_epoch(&m);
        metrics.push(m);
        if let Some(dir) = out_dir {
            let path = dir.join(METRICS_FILE);
            let csv = metrics_csv(&metrics);
            let (header, rows) = csv.split_once('\n').expect("header line");
            fs::write(&path, format!("{header}\n{prior_rows}{rows}")).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some(dir) = out_dir {
        trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { trainer, metrics })
}

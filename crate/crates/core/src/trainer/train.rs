use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::arch::{ForwardCtx, Graph};
use crate::autodiff::Tape;
use crate::data::{augment, stack, AugmentSpec, Sample};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::trainer::eval::evaluate;
use crate::trainer::loss::{class_weights, combo_loss, LossOptions};
use crate::trainer::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub loss_alpha: f64,
    pub dice_eps: f64,
    pub use_log_dice: bool,
    /// Median-frequency class weights from the training masks; uniform otherwise.
    pub class_weighting: bool,
    pub seed: u64,
    pub eval_every: usize,
    /// Monte Carlo passes per validation image.
    pub eval_samples: usize,
    pub ignore_index: u8,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            lr0: 1e-3,
            lr_decay: 0.996,
            batch_size: 2,
            weight_decay: 1e-3,
            loss_alpha: 0.5,
            dice_eps: 1.0,
            use_log_dice: false,
            class_weighting: true,
            seed: 0,
            eval_every: 1,
            eval_samples: 1,
            ignore_index: 255,
            augment: AugmentSpec { crop_size: Some(360), ..AugmentSpec::default() },
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(vec![format!("{origin}: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            errs.push(format!("lr0 = {} must be positive", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            errs.push(format!("lr_decay = {} must lie in (0, 1)", self.lr_decay));
        }
        for (field, v) in [("batch_size", self.batch_size), ("eval_every", self.eval_every), ("eval_samples", self.eval_samples)] {
            if v == 0 {
                errs.push(format!("{field} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay = {} must be non-negative", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.loss_alpha) {
            errs.push(format!("loss_alpha = {} outside [0, 1]", self.loss_alpha));
        }
        if !(self.dice_eps > 0.0) {
            errs.push(format!("dice_eps = {} must be positive", self.dice_eps));
        }
        if let Err(e) = self.augment.validate() {
            errs.push(format!("augment: {e}"));
        }
        let a = &self.augment;
        let rescales = a.scale_range[0] != a.scale_range[1] || a.aspect_range[0] != a.aspect_range[1];
        if self.batch_size > 1 && rescales && a.crop_size.is_none() {
            errs.push("augment.crop_size is required when batch_size > 1 and rescaling is enabled".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            alpha: self.loss_alpha,
            dice_eps: self.dice_eps,
            log_dice: self.use_log_dice,
            ignore_index: Some(self.ignore_index),
        }
    }
}

/// Learning rate of (0-based) epoch `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub wall_seconds: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// First epoch still to run.
    pub next_epoch: usize,
    pub adam: Adam,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(graph: &Graph) -> Self {
        TrainState { next_epoch: 0, adam: Adam::new(graph), best_miou: None, best_epoch: None }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Parameters at the best validation mIoU of this run, if it improved.
    pub best_params: Option<Vec<Tensor>>,
    pub state: TrainState,
    /// Set when the run stopped on a numeric failure. The graph and state
    /// then hold the last completed epoch.
    pub halted: Option<Error>,
}

pub enum TrainEvent<'a> {
    /// After every completed epoch; `state` is what a resumed run needs.
    Epoch { row: &'a LogRow, graph: &'a Graph, state: &'a TrainState },
    NewBest { epoch: usize, miou: f64, graph: &'a Graph },
}

fn snapshot(graph: &Graph) -> Vec<Tensor> {
    graph.params().iter().map(|p| p.tensor.clone()).collect()
}

pub fn restore(graph: &mut Graph, params: &[Tensor]) {
    for (p, t) in graph.params_mut().iter_mut().zip(params) {
        p.tensor = t.clone();
    }
}

fn run_batch(
    graph: &Graph,
    batch: &[&Sample],
    weights: &[f64],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let (x, masks) = stack(batch)?;
    let mut tape = Tape::new();
    let input = tape.leaf(x, false);
    let mut rng = substream(cfg.seed, "dropout", step);
    let mut ctx = ForwardCtx { rng: &mut rng, dropout: true, train: true };
    let out = graph.forward(&mut tape, input, &mut ctx)?;
    let (loss, grad) = combo_loss(tape.value(out.logits), &masks, weights, &cfg.loss_options())?;
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let l = tape.fused_scalar(out.logits, loss, grad)?;
    let mut grads = tape.backward(l)?;
    Ok((loss, out.params.iter().map(|&v| grads.take(v)).collect()))
}

/// Runs epochs `state.next_epoch..cfg.epochs`: seeded shuffle, augmentation,
/// dropout-active forward with batch statistics, combo loss, Adam. Validation
/// runs every `eval_every` epochs and after the last one.
pub fn train(
    graph: &mut Graph,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    state: Option<TrainState>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    let classes = graph.output_channels();
    let weights = if cfg.class_weighting {
        let masks: Vec<_> = train_set.iter().map(|s| s.mask.clone()).collect();
        class_weights(&masks, classes, Some(cfg.ignore_index))?
    } else {
        vec![1.0; classes]
    };
    let eval_spec = AugmentSpec { normalize: cfg.augment.normalize.clone(), ..AugmentSpec::identity() };
    let mut state = state.unwrap_or_else(|| TrainState::new(graph));
    let mut log = Vec::new();
    let mut best_params = None;
    let mut last_good = snapshot(graph);
    let mut last_good_adam = state.adam.clone();
    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    for epoch in state.next_epoch..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut failure = None;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&train_set[i], &cfg.augment, &mut substream(cfg.seed, "augment", (epoch * n + i) as u64)))
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = batch.iter().collect();
            let step = epoch as u64 * batches_per_epoch + b as u64;
            let (loss, grads) = run_batch(graph, &refs, &weights, cfg, step)?;
            if !loss.is_finite() {
                failure = Some(Error::NonFiniteLoss { epoch });
                break;
            }
            if let Err(e) = state.adam.step(graph, &grads, lr, cfg.weight_decay) {
                failure = Some(e);
                break;
            }
            loss_sum += loss;
        }
        if let Some(e) = failure {
            restore(graph, &last_good);
            state.adam = last_good_adam;
            return Ok(TrainOutcome { log, best_params, state, halted: Some(e) });
        }
        let evaluate_now = !val_set.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let val_miou = if evaluate_now {
            let seed = substream(cfg.seed, "eval-epoch", epoch as u64).next_u64();
            Some(evaluate(graph, val_set, cfg.eval_samples, seed, cfg.ignore_index, &eval_spec)?)
        } else {
            None
        };
        let row = LogRow {
            epoch,
            lr,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_miou,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        state.next_epoch = epoch + 1;
        last_good = snapshot(graph);
        last_good_adam = state.adam.clone();
        let improved = val_miou.filter(|&m| state.best_miou.is_none_or(|b| m > b));
        if let Some(m) = improved {
            state.best_miou = Some(m);
            state.best_epoch = Some(epoch);
            best_params = Some(last_good.clone());
        }
        observer(TrainEvent::Epoch { row: &row, graph, state: &state });
        if let Some(m) = improved {
            observer(TrainEvent::NewBest { epoch, miou: m, graph });
        }
        log.push(row);
    }
    Ok(TrainOutcome { log, best_params, state, halted: None })
}

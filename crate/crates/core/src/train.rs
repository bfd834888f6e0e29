//! Training loop, augmentation, evaluation and the branch ablation.
//!
//! Every epoch draws its randomness (shuffle, augmentation, dropout) from a
//! generator derived from `(seed, epoch)` alone, so a run resumed from a
//! checkpoint replays exactly the batches of an uninterrupted run.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Branches;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::layers::{commit_updates, Forward, Mode};
use crate::metrics::{argmax_rows, classification_metrics, instance_iou, segmentation_metrics, Metrics, SegInstance};
use crate::model::{branches_name, Network, NetworkSpec, Task};
use crate::optim::{store_grads, Adam, AdamConfig, StepSchedule};
use crate::param::Module;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Version of the per-epoch log record layout.
pub const LOG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Upper bound of the per-cloud point dropout ratio, in `[0, 1)`.
    pub dropout_max_ratio: f64,
    /// Inclusive range of the global scale factor.
    pub scale_range: (f64, f64),
    /// Per-axis shifts are drawn from `[-shift_range, shift_range]`.
    pub shift_range: f64,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig { dropout_max_ratio: 0.0, scale_range: (1.0, 1.0), shift_range: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(0.0..1.0).contains(&self.dropout_max_ratio) {
            return Err(Error::Config(format!("dropout_max_ratio {} outside [0, 1)", self.dropout_max_ratio)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale range [{lo}, {hi}] must be positive and ordered")));
        }
        if !(self.shift_range >= 0.0 && self.shift_range.is_finite()) {
            return Err(Error::Config(format!("shift range {} must be non-negative", self.shift_range)));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { dropout_max_ratio: 0.875, scale_range: (0.8, 1.25), shift_range: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub schedule: StepSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Stop once the eval-mode training-set score (accuracy or mean IoU)
    /// reaches this value, checked after every epoch.
    pub stop_at: Option<f64>,
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        let schedule = match task {
            Task::Classification => StepSchedule { lr0: 0.001, factor: 0.7, period: 20 },
            Task::Segmentation => StepSchedule { lr0: 0.0005, factor: 0.5, period: 20 },
        };
        Self {
            adam: AdamConfig::default(),
            schedule,
            batch_size: 16,
            epochs: match task {
                Task::Classification => 150,
                Task::Segmentation => 200,
            },
            augment: match task {
                Task::Classification => AugmentConfig::default(),
                Task::Segmentation => AugmentConfig { dropout_max_ratio: 0.0, ..AugmentConfig::default() },
            },
            seed: 0,
            stop_at: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for train-mode batch norm".into()));
        }
        if self.schedule.period == 0 || !(self.schedule.lr0 >= 0.0) || !(self.schedule.factor > 0.0) {
            return Err(Error::Config("learning rate schedule needs lr >= 0, factor > 0, period >= 1".into()));
        }
        Ok(())
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Generator used for parameter initialization.
    pub fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Point dropout (dropped points become copies of point 0, labels
/// included), then a global scale and a per-axis shift. `coords` is `[N, 3]`
/// row-major.
pub fn augment(coords: &mut [f64], labels: Option<&mut [usize]>, cfg: &AugmentConfig, rng: &mut impl Rng) {
    let n = coords.len() / 3;
    if cfg.dropout_max_ratio > 0.0 && n > 1 {
        let ratio = rng.gen_range(0.0..cfg.dropout_max_ratio);
        let count = ((ratio * n as f64).floor() as usize).min(n - 1);
        let picked = index::sample(rng, n - 1, count);
        let first = [coords[0], coords[1], coords[2]];
        for i in picked.iter().map(|i| i + 1) {
            coords[i * 3..i * 3 + 3].copy_from_slice(&first);
        }
        if let Some(l) = labels {
            let l0 = l[0];
            picked.iter().for_each(|i| l[i + 1] = l0);
        }
    }
    let (lo, hi) = cfg.scale_range;
    let s = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let shift: [f64; 3] = std::array::from_fn(|_| if cfg.shift_range > 0.0 { rng.gen_range(-cfg.shift_range..=cfg.shift_range) } else { 0.0 });
    for p in coords.chunks_mut(3) {
        for (v, d) in p.iter_mut().zip(shift) {
            *v = *v * s + d;
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema: u32,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Running accuracy over the augmented training batches.
    pub train_accuracy: f64,
    /// Running mean instance IoU over the training batches; segmentation only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_miou: Option<f64>,
    /// Eval-mode training-set metrics, when computed for early stopping.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<Metrics>,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// The score early stopping and the acceptance checks use: accuracy for
/// classification, mean IoU for segmentation.
pub fn headline(m: &Metrics) -> f64 {
    m.mean_iou.unwrap_or(m.overall_accuracy)
}

/// Splits `n` items into batches of `size`, folding a trailing singleton
/// into the previous batch so train-mode batch norm always sees two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - size - 1;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

fn check_examples(spec: &NetworkSpec, examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Input("no examples".into()));
    }
    for ex in examples {
        if ex.cloud.len() != spec.input_points {
            return Err(Error::Input(format!(
                "{} has {} points; the network expects {}",
                ex.file.display(),
                ex.cloud.len(),
                spec.input_points
            )));
        }
        match spec.task {
            Task::Classification if ex.class.is_none() => {
                return Err(Error::Input(format!("{} has no class label", ex.file.display())));
            }
            Task::Segmentation if ex.cloud.labels.is_none() => {
                return Err(Error::Input(format!("{} has no part labels", ex.file.display())));
            }
            _ => {}
        }
        let k = spec.classes;
        if ex.class.is_some_and(|c| c >= k) || ex.cloud.labels.iter().flatten().any(|&l| l >= k) {
            return Err(Error::Input(format!("{} has labels outside the network's {k} classes", ex.file.display())));
        }
    }
    Ok(())
}

/// A batch ready for the network: coordinates and one target per logit row.
struct Batch<T: Real> {
    coords: Tensor<T>,
    targets: Vec<usize>,
}

fn make_batch<T: Real>(
    examples: &[Example],
    ids: &[usize],
    task: Task,
    augment_with: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
) -> Batch<T> {
    let n = examples[ids[0]].cloud.len();
    let mut coords = Vec::with_capacity(ids.len() * n * 3);
    let mut targets = Vec::new();
    let mut aug = augment_with;
    for &i in ids {
        let ex = &examples[i];
        let mut c = ex.cloud.coords.data().to_vec();
        let mut l = ex.cloud.labels.clone();
        if let Some((cfg, rng)) = aug.as_mut() {
            augment(&mut c, l.as_deref_mut(), cfg, *rng);
        }
        coords.extend(c.into_iter().map(T::of));
        match task {
            Task::Classification => targets.push(ex.class.expect("checked")),
            Task::Segmentation => targets.extend(l.expect("checked")),
        }
    }
    Batch { coords: Tensor::new([ids.len(), n, 3], coords).expect("non-empty batch"), targets }
}

/// Model, optimizer state and progress; everything a checkpoint stores.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub model: Network<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(spec: NetworkSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Network::new(spec, &mut config.init_rng())?;
        Ok(Self { model, adam: Adam::new(config.adam), config, epoch: 0 })
    }

    pub fn task(&self) -> Task {
        self.model.task()
    }

    /// One pass over `examples` in a seeded random order.
    pub fn run_epoch(&mut self, examples: &[Example]) -> Result<EpochRecord> {
        check_examples(self.model.spec(), examples)?;
        if examples.len() < 2 {
            return Err(Error::Input("training needs at least 2 examples for batch norm".into()));
        }
        let task = self.task();
        let classes = self.model.classes();
        let epoch = self.epoch;
        let lr = self.config.schedule.at(epoch);
        let mut rng = self.config.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut rows, mut iou_sum) = (0.0, 0usize, 0usize, 0.0);
        let mut tape = Tape::new();
        for (b, ids) in batches(&order, self.config.batch_size).into_iter().enumerate() {
            let augment = self.config.augment;
            let batch: Batch<T> = make_batch(examples, ids, task, Some((&augment, &mut rng)));
            tape.reset();
            let fwd = Forward::new(&tape, Mode::Train, ChaCha8Rng::seed_from_u64(rng.gen()));
            let logits = self.model.forward(&fwd, &batch.coords)?;
            let loss = logits.cross_entropy(&batch.targets)?;
            let value = loss.value().item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss is {value} at epoch {epoch}, batch {b} (lr {lr})")));
            }
            tape.backward(loss)?;
            let preds = argmax_rows(logits.value().data(), classes);
            correct += preds.iter().zip(&batch.targets).filter(|(p, t)| p == t).count();
            rows += preds.len();
            if task == Task::Segmentation {
                let n = batch.targets.len() / ids.len();
                for (p, t) in preds.chunks(n).zip(batch.targets.chunks(n)) {
                    iou_sum += instance_iou(p, t, classes)?;
                }
            }
            loss_sum += value * ids.len() as f64;
            let updates = fwd.take_updates();
            drop(fwd);
            store_grads(&mut self.model, &tape);
            commit_updates(&mut self.model, &updates);
            self.adam.step(&mut self.model, lr);
        }
        self.epoch += 1;
        Ok(EpochRecord {
            schema: LOG_SCHEMA,
            epoch,
            lr,
            loss: loss_sum / examples.len() as f64,
            train_accuracy: correct as f64 / rows as f64,
            train_miou: (task == Task::Segmentation).then(|| iou_sum / examples.len() as f64),
            eval: None,
        })
    }

    /// Runs epochs until the configured count or the early-stop target is
    /// reached, handing each record to `log`.
    pub fn fit(&mut self, train: &[Example], log: &mut dyn FnMut(&EpochRecord) -> Result<()>) -> Result<()> {
        while self.epoch < self.config.epochs {
            let mut record = self.run_epoch(train)?;
            let mut done = false;
            if let Some(target) = self.config.stop_at {
                let m = evaluate(&self.model, train)?.metrics;
                done = headline(&m) >= target;
                record.eval = Some(m);
            }
            log(&record)?;
            if done {
                break;
            }
        }
        Ok(())
    }
}

/// Metrics and per-example predictions (one class, or one part per point).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Vec<usize>>,
}

/// Eval-mode inference used by every scoring path.
pub fn predict<T: Real>(model: &Network<T>, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
    check_examples(model.spec(), examples)?;
    let task = model.task();
    let ids: Vec<usize> = (0..examples.len()).collect();
    let mut out = Vec::with_capacity(examples.len());
    let mut tape = Tape::new();
    for chunk in ids.chunks(16) {
        let batch: Batch<T> = make_batch(examples, chunk, task, None);
        tape.reset();
        let logits = model.forward(&Forward::eval(&tape), &batch.coords)?;
        let preds = argmax_rows(logits.value().data(), model.classes());
        let per = preds.len() / chunk.len();
        out.extend(preds.chunks(per).map(<[usize]>::to_vec));
    }
    Ok(out)
}

pub fn evaluate<T: Real>(model: &Network<T>, examples: &[Example]) -> Result<Evaluation> {
    let predictions = predict(model, examples)?;
    let classes = model.classes();
    let metrics = match model.task() {
        Task::Classification => {
            let preds: Vec<usize> = predictions.iter().map(|p| p[0]).collect();
            let labels: Vec<usize> = examples.iter().map(|e| e.class.expect("checked")).collect();
            classification_metrics(&preds, &labels, classes)?
        }
        Task::Segmentation => {
            let inst: Vec<SegInstance<'_>> = predictions
                .iter()
                .zip(examples)
                .map(|(p, e)| SegInstance { category: 0, preds: p, labels: e.cloud.labels.as_deref().expect("checked") })
                .collect();
            segmentation_metrics(&inst, classes, 1)?
        }
    };
    Ok(Evaluation { metrics, predictions })
}

/// One row of the branch ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub branches: String,
    pub parameters: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub train: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<Metrics>,
}

/// Baseline, point-wise only, channel-wise only and both branches.
pub const ABLATION_VARIANTS: [(&str, Branches); 4] = [
    ("baseline", Branches::NONE),
    ("+PWSA", Branches { point_wise: true, channel_wise: false }),
    ("+CWSA", Branches { point_wise: false, channel_wise: true }),
    ("full", Branches::BOTH),
];

/// Trains every variant from the same seed and scores it.
pub fn ablate<T: Real>(spec: &NetworkSpec, config: &TrainConfig, train: &[Example], test: &[Example]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, branches) in ABLATION_VARIANTS {
        let mut trainer = Trainer::<T>::new(spec.clone().with_branches(branches), config.clone())?;
        let mut last = f64::NAN;
        trainer.fit(train, &mut |r| {
            last = r.loss;
            Ok(())
        })?;
        rows.push(AblationRow {
            variant: name.to_string(),
            branches: branches_name(branches).to_string(),
            parameters: trainer.model.num_trainable(),
            epochs: trainer.epoch,
            final_loss: last,
            train: evaluate(&trainer.model, train)?.metrics,
            test: if test.is_empty() { None } else { Some(evaluate(&trainer.model, test)?.metrics) },
        });
    }
    Ok(rows)
}

/// Fixed-width comparison table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<10} {:>10} {:>7} {:>10} {:>10} {:>10}\n", "variant", "params", "epochs", "loss", "train", "test");
    for r in rows {
        let test = r.test.as_ref().map_or("-".to_string(), |m| format!("{:.4}", headline(m)));
        out += &format!(
            "{:<10} {:>10} {:>7} {:>10.4} {:>10.4} {:>10}\n",
            r.variant,
            r.parameters,
            r.epochs,
            r.final_loss,
            headline(&r.train),
            test
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_never_end_in_a_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..8], 4).len(), 2);
        assert_eq!(batches(&order[..2], 4).len(), 1);
    }

    #[test]
    fn augment_identity_and_scale() {
        let base: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = base.clone();
        augment(&mut c, None, &AugmentConfig::NONE, &mut rng);
        assert_eq!(c, base);
        let double = AugmentConfig { scale_range: (2.0, 2.0), ..AugmentConfig::NONE };
        augment(&mut c, None, &double, &mut rng);
        assert!(c.iter().zip(&base).all(|(a, b)| *a == 2.0 * b));
    }

    #[test]
    fn augment_is_seeded() {
        let base: Vec<f64> = (0..300).map(|i| (i as f64).sin()).collect();
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let run = || {
            let mut c = base.clone();
            let mut l = labels.clone();
            augment(&mut c, Some(&mut l), &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
            (c, l)
        };
        assert_eq!(run(), run());
    }
}

//! Flat `key = value` run configuration covering the network spec and the
//! training settings. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{branches_name, format_stages, parse_branches, parse_stages, NetworkSpec, Task};
use crate::train::TrainConfig;

/// Every recognized key with its meaning; the first group describes the network.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "toy | large: base network before the overrides below (default toy)"),
    ("task", "cls | seg"),
    ("classes", "class or part count (default: label count of the dataset)"),
    ("points", "points per input cloud"),
    ("stages", "stage string, e.g. FDS(N=64,C=32,R=0.3,K=16)-DPCT(C=32,M=2)-GP(C=128)-FC(C=3)"),
    ("dropout", "dropout probability between classifier head stages"),
    ("branches", "attention branches in every DPCT stage: none | pw | cw | both"),
    ("lr", "initial learning rate"),
    ("lr_decay", "learning rate multiplier applied every lr_period epochs"),
    ("lr_period", "epochs between learning rate decays"),
    ("beta1", "Adam first moment decay"),
    ("beta2", "Adam second moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("weight_decay", "L2 coefficient added to gradients"),
    ("batch_size", "instances per batch (at least 2)"),
    ("epochs", "maximum number of epochs"),
    ("aug_dropout_max", "upper bound of the random point dropout ratio"),
    ("aug_scale_min", "lower bound of the random global scale"),
    ("aug_scale_max", "upper bound of the random global scale"),
    ("aug_shift", "per-axis shift range, symmetric"),
    ("seed", "seed for initialization, shuffling, augmentation and dropout"),
    ("stop_at", "stop when eval-mode train accuracy (cls) or mIoU (seg) reaches this; none disables"),
];

/// Network spec plus training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        let k = k.trim();
        if !KEYS.iter().any(|(key, _)| *key == k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

fn value<V: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<Option<V>> {
    pairs
        .get(key)
        .map(|v| v.parse::<V>().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))))
        .transpose()
}

impl RunConfig {
    /// Builds a config from `text`. `task` and `classes` fill in keys the
    /// text leaves out; a task given both ways must agree.
    pub fn parse(text: &str, task: Option<Task>, classes: Option<usize>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let task = match (value::<Task>(&pairs, "task")?, task) {
            (Some(a), Some(b)) if a != b => return Err(Error::Config(format!("config task {a} conflicts with requested task {b}"))),
            (Some(t), _) | (None, Some(t)) => t,
            (None, None) => return Err(Error::Config("no task given".into())),
        };
        let classes = value::<usize>(&pairs, "classes")?
            .or(classes)
            .ok_or_else(|| Error::Config("class count unknown: set `classes`".into()))?;
        let preset = pairs.get("preset").map(String::as_str).unwrap_or("toy");
        let mut net = match (preset, task) {
            ("toy", Task::Classification) => NetworkSpec::toy_classification(classes),
            ("toy", Task::Segmentation) => NetworkSpec::toy_segmentation(classes),
            ("large", Task::Classification) => NetworkSpec::large_classification(classes),
            ("large", Task::Segmentation) => NetworkSpec::large_segmentation(classes),
            (other, _) => return Err(Error::Config(format!("unknown preset {other:?}, expected toy or large"))),
        };
        if let Some(p) = value(&pairs, "points")? {
            net.input_points = p;
        }
        if let Some(s) = pairs.get("stages") {
            net.stages = parse_stages(s)?;
        }
        if let Some(d) = value(&pairs, "dropout")? {
            net.dropout = d;
        }
        if let Some(b) = pairs.get("branches") {
            net.branches = parse_branches(b)?;
        }
        net.validate()?;

        let mut t = TrainConfig::for_task(task);
        let set = |slot: &mut f64, key: &str| -> Result<()> {
            if let Some(v) = value(&pairs, key)? {
                *slot = v;
            }
            Ok(())
        };
        set(&mut t.schedule.lr0, "lr")?;
        set(&mut t.schedule.factor, "lr_decay")?;
        set(&mut t.adam.beta1, "beta1")?;
        set(&mut t.adam.beta2, "beta2")?;
        set(&mut t.adam.eps, "adam_eps")?;
        set(&mut t.adam.weight_decay, "weight_decay")?;
        set(&mut t.augment.dropout_max_ratio, "aug_dropout_max")?;
        set(&mut t.augment.scale_range.0, "aug_scale_min")?;
        set(&mut t.augment.scale_range.1, "aug_scale_max")?;
        set(&mut t.augment.shift_range, "aug_shift")?;
        if let Some(v) = value(&pairs, "lr_period")? {
            t.schedule.period = v;
        }
        if let Some(v) = value(&pairs, "batch_size")? {
            t.batch_size = v;
        }
        if let Some(v) = value(&pairs, "epochs")? {
            t.epochs = v;
        }
        if let Some(v) = value(&pairs, "seed")? {
            t.seed = v;
        }
        match pairs.get("stop_at").map(String::as_str) {
            None => {}
            Some("none") => t.stop_at = None,
            Some(_) => t.stop_at = value(&pairs, "stop_at")?,
        }
        t.validate()?;
        Ok(Self { network: net, train: t })
    }

    /// Every key, in a form [`RunConfig::parse`] reads back to an equal config.
    pub fn render(&self) -> String {
        let (n, t) = (&self.network, &self.train);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("task", n.task.to_string());
        kv("classes", n.classes.to_string());
        kv("points", n.input_points.to_string());
        kv("stages", format_stages(&n.stages));
        kv("dropout", n.dropout.to_string());
        kv("branches", branches_name(n.branches).to_string());
        kv("lr", t.schedule.lr0.to_string());
        kv("lr_decay", t.schedule.factor.to_string());
        kv("lr_period", t.schedule.period.to_string());
        kv("beta1", t.adam.beta1.to_string());
        kv("beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("weight_decay", t.adam.weight_decay.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("aug_dropout_max", t.augment.dropout_max_ratio.to_string());
        kv("aug_scale_min", t.augment.scale_range.0.to_string());
        kv("aug_scale_max", t.augment.scale_range.1.to_string());
        kv("aug_shift", t.augment.shift_range.to_string());
        kv("seed", t.seed.to_string());
        kv("stop_at", t.stop_at.map_or("none".to_string(), |v| v.to_string()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let text = "task = seg\nclasses = 4\nlr = 0.002 # faster\nseed = 9\nstop_at = 0.9\nbranches = cw\n";
        let cfg = RunConfig::parse(text, None, None).unwrap();
        assert_eq!(cfg.train.schedule.lr0, 0.002);
        assert_eq!(cfg.network.classes, 4);
        assert_eq!(RunConfig::parse(&cfg.render(), None, None).unwrap(), cfg);
    }

    #[test]
    fn defaults_follow_the_task() {
        let cls = RunConfig::parse("", Some(Task::Classification), Some(3)).unwrap();
        assert_eq!(cls.train.schedule.at(20), 0.001 * 0.7);
        assert_eq!(cls.train.adam.weight_decay, 1e-4);
        let seg = RunConfig::parse("", Some(Task::Segmentation), Some(2)).unwrap();
        assert_eq!(seg.train.schedule.at(20), 0.00025);
        let large = RunConfig::parse("preset = large", Some(Task::Classification), Some(40)).unwrap();
        assert_eq!(large.network, NetworkSpec::large_classification(40));
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["colour = red", "lr = fast", "lr 0.1", "batch_size = 1", "task = cls\ntask = cls", "aug_scale_min = 0"] {
            assert!(matches!(RunConfig::parse(text, Some(Task::Classification), Some(3)), Err(Error::Config(_))), "{text}");
        }
        assert!(RunConfig::parse("task = seg", Some(Task::Classification), Some(3)).is_err());
        assert!(RunConfig::parse("stages = GP(C=8)-FC(C=5)", Some(Task::Classification), Some(3)).is_err());
    }
}

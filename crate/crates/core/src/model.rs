//! Declarative network specs and the classification/segmentation networks
//! built from them.
//!
//! A spec is an ordered stage list. Encoder stages (`FDS`, `GP`) push a new
//! resolution level, `DPCT` transforms the current level in place, `FUS`
//! merges the current level into the one below it, and the trailing `FC`
//! stages form the head. Input features are the raw coordinates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{AttentionConfig, Branches, DpctLayer};
use crate::error::{Error, Result};
use crate::layers::{FcHead, FdsLayer, Forward, FusLayer, GlobalPool};
use crate::param::{join, Module, Param};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Neighbors used when interpolating onto a finer level.
pub const INTERP_NEIGHBORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "cls",
            Task::Segmentation => "seg",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "classification" => Ok(Task::Classification),
            "seg" | "segmentation" => Ok(Task::Segmentation),
            _ => Err(Error::Config(format!("unknown task {s:?}, expected cls or seg"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    Fds { points: usize, channels: usize, radius: f64, neighbors: usize },
    Dpct { channels: usize, heads: usize },
    GlobalPool { channels: usize },
    Fus { points: usize, channels: usize },
    Fc { channels: usize },
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Stage::Fds { points, channels, radius, neighbors } => write!(f, "FDS(N={points},C={channels},R={radius},K={neighbors})"),
            Stage::Dpct { channels, heads } => write!(f, "DPCT(C={channels},M={heads})"),
            Stage::GlobalPool { channels } => write!(f, "GP(C={channels})"),
            Stage::Fus { points, channels } => write!(f, "FUS(N={points},C={channels})"),
            Stage::Fc { channels } => write!(f, "FC(C={channels})"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Spec(format!("stage {s:?}: {msg}"));
        let s = s.trim();
        let (kind, rest) = s.split_once('(').ok_or_else(|| bad("expected NAME(KEY=VALUE,...)".into()))?;
        let body = rest.strip_suffix(')').ok_or_else(|| bad("missing closing parenthesis".into()))?;
        let mut fields: Vec<(String, String)> = Vec::new();
        for part in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("{part:?} is not KEY=VALUE")))?;
            fields.push((k.trim().to_ascii_uppercase(), v.trim().to_string()));
        }
        let allowed: &[&str] = match kind.trim() {
            "FDS" => &["N", "C", "R", "K"],
            "DPCT" => &["C", "M"],
            "GP" => &["C"],
            "FUS" => &["N", "C"],
            "FC" => &["C"],
            other => return Err(bad(format!("unknown stage kind {other:?}"))),
        };
        if let Some((k, _)) = fields.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            return Err(bad(format!("unknown key {k}")));
        }
        let get = |key: &str| -> Result<&str> {
            fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).ok_or_else(|| bad(format!("missing {key}")))
        };
        let int = |key: &str| -> Result<usize> { get(key)?.parse().map_err(|_| bad(format!("{key} must be a non-negative integer"))) };
        Ok(match kind.trim() {
            "FDS" => Stage::Fds {
                points: int("N")?,
                channels: int("C")?,
                radius: get("R")?.parse().map_err(|_| bad("R must be a number".into()))?,
                neighbors: int("K")?,
            },
            "DPCT" => Stage::Dpct { channels: int("C")?, heads: int("M")? },
            "GP" => Stage::GlobalPool { channels: int("C")? },
            "FUS" => Stage::Fus { points: int("N")?, channels: int("C")? },
            _ => Stage::Fc { channels: int("C")? },
        })
    }
}

/// Renders stages as `FDS(...)-DPCT(...)-...`.
pub fn format_stages(stages: &[Stage]) -> String {
    stages.iter().map(Stage::to_string).collect::<Vec<_>>().join("-")
}

/// Parses the `-`-joined stage string produced by [`format_stages`].
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    // Split on '-' only between stages, so negative numbers never appear inside.
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            '-' if depth == 0 => {
                out.push(s[start..i].parse()?);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !s[start..].trim().is_empty() {
        out.push(s[start..].parse()?);
    }
    if out.is_empty() {
        return Err(Error::Spec("empty stage list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub task: Task,
    /// Class count (classification) or part count (segmentation).
    pub classes: usize,
    pub input_points: usize,
    pub stages: Vec<Stage>,
    /// Dropout probability between classifier head stages.
    pub dropout: f64,
    /// Attention branches carried by every DPCT stage.
    pub branches: Branches,
}

/// Point count and channel width of one resolution level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Level {
    points: usize,
    channels: usize,
}

impl NetworkSpec {
    /// The classification network: three down-sampling stages each
    /// followed by a dual block, then FC(512)-FC(256)-FC(classes).
    pub fn large_classification(classes: usize) -> Self {
        Self {
            task: Task::Classification,
            classes,
            input_points: 1024,
            stages: vec![
                Stage::Fds { points: 512, channels: 320, radius: 0.2, neighbors: 32 },
                Stage::Dpct { channels: 320, heads: 4 },
                Stage::Fds { points: 128, channels: 640, radius: 0.4, neighbors: 32 },
                Stage::Dpct { channels: 640, heads: 4 },
                Stage::GlobalPool { channels: 1024 },
                Stage::Dpct { channels: 1024, heads: 4 },
                Stage::Fc { channels: 512 },
                Stage::Fc { channels: 256 },
                Stage::Fc { channels: classes },
            ],
            dropout: 0.4,
            branches: Branches::BOTH,
        }
    }

    /// The part segmentation network: the encoder above, three up-sampling
    /// stages each followed by a dual block, then FC(128)-FC(parts).
    pub fn large_segmentation(parts: usize) -> Self {
        Self {
            task: Task::Segmentation,
            classes: parts,
            input_points: 2048,
            stages: vec![
                Stage::Fds { points: 512, channels: 320, radius: 0.2, neighbors: 32 },
                Stage::Dpct { channels: 320, heads: 4 },
                Stage::Fds { points: 128, channels: 512, radius: 0.4, neighbors: 32 },
                Stage::Dpct { channels: 512, heads: 4 },
                Stage::GlobalPool { channels: 1024 },
                Stage::Dpct { channels: 1024, heads: 4 },
                Stage::Fus { points: 128, channels: 256 },
                Stage::Dpct { channels: 256, heads: 4 },
                Stage::Fus { points: 512, channels: 128 },
                Stage::Dpct { channels: 128, heads: 4 },
                Stage::Fus { points: 2048, channels: 128 },
                Stage::Dpct { channels: 128, heads: 4 },
                Stage::Fc { channels: 128 },
                Stage::Fc { channels: parts },
            ],
            dropout: 0.4,
            branches: Branches::BOTH,
        }
    }

    /// Desk-scale classification network used by the synthetic benchmarks.
    pub fn toy_classification(classes: usize) -> Self {
        Self {
            task: Task::Classification,
            classes,
            input_points: 256,
            stages: vec![
                Stage::Fds { points: 64, channels: 32, radius: 0.3, neighbors: 16 },
                Stage::Dpct { channels: 32, heads: 2 },
                Stage::Fds { points: 16, channels: 64, radius: 0.6, neighbors: 16 },
                Stage::Dpct { channels: 64, heads: 2 },
                Stage::GlobalPool { channels: 128 },
                Stage::Dpct { channels: 128, heads: 2 },
                Stage::Fc { channels: 64 },
                Stage::Fc { channels: classes },
            ],
            dropout: 0.4,
            branches: Branches::BOTH,
        }
    }

    /// Desk-scale two-level segmentation network.
    pub fn toy_segmentation(parts: usize) -> Self {
        Self {
            task: Task::Segmentation,
            classes: parts,
            input_points: 512,
            stages: vec![
                Stage::Fds { points: 128, channels: 32, radius: 0.3, neighbors: 16 },
                Stage::Dpct { channels: 32, heads: 2 },
                Stage::Fds { points: 32, channels: 64, radius: 0.6, neighbors: 16 },
                Stage::Dpct { channels: 64, heads: 2 },
                Stage::Fus { points: 128, channels: 32 },
                Stage::Dpct { channels: 32, heads: 2 },
                Stage::Fus { points: 512, channels: 32 },
                Stage::Fc { channels: 32 },
                Stage::Fc { channels: parts },
            ],
            dropout: 0.0,
            branches: Branches::BOTH,
        }
    }

    pub fn with_branches(mut self, branches: Branches) -> Self {
        self.branches = branches;
        self
    }

    /// Checks channel chaining, level pairing and head shape; returns the
    /// input width of the head.
    pub fn validate(&self) -> Result<usize> {
        let err = |i: usize, msg: String| Error::Spec(format!("stage {} ({}): {msg}", i + 1, self.stages[i]));
        if self.input_points == 0 {
            return Err(Error::Spec("input point count must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Spec(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let head_start = self.stages.iter().position(|s| matches!(s, Stage::Fc { .. })).unwrap_or(self.stages.len());
        if head_start == self.stages.len() {
            return Err(Error::Spec("spec has no FC stages".into()));
        }
        let mut levels = vec![Level { points: self.input_points, channels: 3 }];
        for (i, stage) in self.stages[..head_start].iter().enumerate() {
            let top = *levels.last().expect("level stack is never empty");
            match *stage {
                Stage::Fds { points, channels, radius, neighbors } => {
                    if points == 0 || points > top.points {
                        return Err(err(i, format!("cannot sample {points} of {} points", top.points)));
                    }
                    if !(radius > 0.0 && radius.is_finite()) || neighbors == 0 || channels == 0 {
                        return Err(err(i, "radius, K and C must be positive".into()));
                    }
                    levels.push(Level { points, channels });
                }
                Stage::GlobalPool { channels } => {
                    if channels == 0 {
                        return Err(err(i, "C must be positive".into()));
                    }
                    levels.push(Level { points: 1, channels });
                }
                Stage::Dpct { channels, heads } => {
                    if channels != top.channels {
                        return Err(err(i, format!("incoming width is {}", top.channels)));
                    }
                    AttentionConfig::new(channels, heads).map_err(|e| err(i, e.to_string()))?;
                }
                Stage::Fus { points, channels } => {
                    if levels.len() < 2 {
                        return Err(err(i, "no encoder level left to fuse into".into()));
                    }
                    levels.pop();
                    let skip = levels.last_mut().expect("checked above");
                    if points != skip.points {
                        return Err(err(i, format!("matching encoder level has {} points", skip.points)));
                    }
                    if channels == 0 {
                        return Err(err(i, "C must be positive".into()));
                    }
                    skip.channels = channels;
                }
                Stage::Fc { .. } => unreachable!("head stages start at {head_start}"),
            }
        }
        for (i, stage) in self.stages.iter().enumerate().skip(head_start) {
            match *stage {
                Stage::Fc { channels: 0 } => return Err(err(i, "C must be positive".into())),
                Stage::Fc { .. } => {}
                _ => return Err(err(i, "only FC stages may follow the first FC stage".into())),
            }
        }
        if let Some(&Stage::Fc { channels }) = self.stages.last() {
            if channels != self.classes {
                return Err(Error::Spec(format!("last FC width {channels} differs from class count {}", self.classes)));
            }
        }
        let top = *levels.last().expect("level stack is never empty");
        match self.task {
            Task::Classification if top.points != 1 => {
                Err(Error::Spec(format!("classification encoder must end in a single point, ends at {}", top.points)))
            }
            Task::Segmentation if levels.len() != 1 => {
                Err(Error::Spec(format!("segmentation decoder leaves {} unfused levels", levels.len() - 1)))
            }
            _ => Ok(top.channels),
        }
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let branch_count = self.branches.point_wise as usize + self.branches.channel_wise as usize;
        let mut widths = vec![3usize];
        let mut total = 0;
        let mlp = |cin: usize, cout: usize| cin * cout + 2 * cout;
        let mut head_in = None;
        for stage in &self.stages {
            let top = *widths.last().expect("non-empty");
            match *stage {
                Stage::Fds { channels, .. } | Stage::GlobalPool { channels } => {
                    total += mlp(top + 3, channels);
                    widths.push(channels);
                }
                Stage::Dpct { channels, .. } => total += branch_count * 3 * channels * channels,
                Stage::Fus { channels, .. } => {
                    widths.pop();
                    let skip = widths.last_mut().expect("validated");
                    total += mlp(*skip + top, channels);
                    *skip = channels;
                }
                Stage::Fc { channels } => {
                    let cin = *head_in.get_or_insert(top);
                    total += mlp(cin, channels);
                    head_in = Some(channels);
                }
            }
        }
        // The logits layer has a bias but no batch norm.
        Ok(total - self.classes)
    }

    /// Stable text form; used for checkpoint compatibility checks.
    pub fn canonical(&self) -> String {
        format!(
            "task={}\nclasses={}\npoints={}\nstages={}\ndropout={}\nbranches={}\n",
            self.task,
            self.classes,
            self.input_points,
            format_stages(&self.stages),
            self.dropout,
            branches_name(self.branches),
        )
    }
}

/// `none`, `pw`, `cw` or `both`.
pub fn branches_name(b: Branches) -> &'static str {
    match (b.point_wise, b.channel_wise) {
        (false, false) => "none",
        (true, false) => "pw",
        (false, true) => "cw",
        (true, true) => "both",
    }
}

pub fn parse_branches(s: &str) -> Result<Branches> {
    let (point_wise, channel_wise) = match s {
        "none" => (false, false),
        "pw" => (true, false),
        "cw" => (false, true),
        "both" => (true, true),
        _ => return Err(Error::Config(format!("unknown branch set {s:?}, expected none, pw, cw or both"))),
    };
    Ok(Branches { point_wise, channel_wise })
}

#[derive(Debug, Clone)]
enum Block<T: Real> {
    Fds(FdsLayer<T>),
    Pool(GlobalPool<T>),
    Dpct(DpctLayer<T>),
    Fus(FusLayer<T>),
}

/// A network assembled from a validated [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    spec: NetworkSpec,
    blocks: Vec<Block<T>>,
    head: FcHead<T>,
}

impl<T: Real> Network<T> {
    pub fn new(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let head_in = spec.validate()?;
        let mut levels = vec![Level { points: spec.input_points, channels: 3 }];
        let mut blocks = Vec::new();
        let mut head_widths = Vec::new();
        for stage in &spec.stages {
            let top = *levels.last().expect("validated");
            match *stage {
                Stage::Fds { points, channels, radius, neighbors } => {
                    blocks.push(Block::Fds(FdsLayer::new(top.channels, channels, points, radius, neighbors, rng)));
                    levels.push(Level { points, channels });
                }
                Stage::GlobalPool { channels } => {
                    blocks.push(Block::Pool(GlobalPool::new(top.channels, channels, rng)));
                    levels.push(Level { points: 1, channels });
                }
                Stage::Dpct { channels, heads } => {
                    let cfg = AttentionConfig::new(channels, heads)?;
                    blocks.push(Block::Dpct(DpctLayer::new(cfg, spec.branches, rng)));
                }
                Stage::Fus { channels, .. } => {
                    levels.pop();
                    let skip = levels.last_mut().expect("validated");
                    let k = INTERP_NEIGHBORS.min(top.points);
                    blocks.push(Block::Fus(FusLayer::new(skip.channels, top.channels, channels, k, rng)));
                    skip.channels = channels;
                }
                Stage::Fc { channels } => head_widths.push(channels),
            }
        }
        let head = FcHead::new(head_in, &head_widths, spec.dropout, rng);
        Ok(Self { spec, blocks, head })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// `coords[B, N, 3]` to logits: `[B, classes]` for classification,
    /// `[B * N, parts]` (instance-major) for segmentation.
    pub fn forward<'t>(&self, fwd: &Forward<'t, T>, coords: &Tensor<T>) -> Result<Var<'t, T>> {
        let shape = coords.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Input(format!("expected coords [B, N, 3], got {shape:?}")));
        }
        if shape[1] != self.spec.input_points {
            return Err(Error::Input(format!("network expects {} points, got {}", self.spec.input_points, shape[1])));
        }
        let b = shape[0];
        let mut levels = vec![(coords.clone(), fwd.tape.constant(coords.clone()))];
        for block in &self.blocks {
            let (c, f) = levels.last().cloned().expect("validated");
            match block {
                Block::Fds(l) => levels.push(l.forward(fwd, &c, f)?),
                Block::Pool(l) => levels.push(l.forward(fwd, &c, f)?),
                Block::Dpct(l) => levels.last_mut().expect("validated").1 = l.forward(f)?,
                Block::Fus(l) => {
                    levels.pop();
                    let (sc, sf) = levels.last_mut().expect("validated");
                    *sf = l.forward(fwd, sc, *sf, &c, f)?;
                }
            }
        }
        let (_, feats) = levels.pop().expect("validated");
        let s = feats.shape();
        let rows = feats.reshape(&[b * s[1], s[2]])?;
        Ok(self.head.forward(fwd, rows)?)
    }
}

impl<T: Real> Module<T> for Network<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("s{i}"));
            match block {
                Block::Fds(l) => l.visit(&join(&p, "fds"), f),
                Block::Pool(l) => l.visit(&join(&p, "gp"), f),
                Block::Dpct(l) => l.visit(&join(&p, "dpct"), f),
                Block::Fus(l) => l.visit(&join(&p, "fus"), f),
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("s{i}"));
            match block {
                Block::Fds(l) => l.visit_mut(&join(&p, "fds"), f),
                Block::Pool(l) => l.visit_mut(&join(&p, "gp"), f),
                Block::Dpct(l) => l.visit_mut(&join(&p, "dpct"), f),
                Block::Fus(l) => l.visit_mut(&join(&p, "fus"), f),
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

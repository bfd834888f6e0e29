//! Point files, dataset manifests and the synthetic shape generators.
//!
//! An xyz file holds one point per line: `x y z` or `x y z label`. A manifest
//! names the task, the label vocabulary and one line per example:
//!
//! ```text
//! task cls
//! labels sphere cube torus
//! train train/0000.xyz 0
//! test test/0000.xyz 2
//! ```
//!
//! Segmentation manifests omit the trailing class id; part labels live in
//! the point files. Paths are relative to the manifest's directory.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::model::Task;
use crate::tensor::Tensor;

/// Significant digits written by [`render_xyz`].
pub const RENDER_DIGITS: usize = 6;

/// Chi-square critical value for one degree of freedom at p = 0.001.
pub const CHI_SQUARE_CRITICAL_1DF: f64 = 10.83;

/// Parses xyz text. `path` is used only in error messages.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud<f64>> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut columns = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 3 && tokens.len() != 4 {
            return Err(err(line, format!("expected 3 or 4 columns, found {}", tokens.len())));
        }
        match columns {
            None => columns = Some(tokens.len()),
            Some(c) if c != tokens.len() => {
                return Err(err(line, format!("found {} columns after earlier lines had {c}", tokens.len())));
            }
            _ => {}
        }
        for t in &tokens[..3] {
            let v: f64 = t.parse().map_err(|_| err(line, format!("{t:?} is not a number")))?;
            if !v.is_finite() {
                return Err(err(line, format!("{t:?} is not finite")));
            }
            coords.push(v);
        }
        if let Some(t) = tokens.get(3) {
            labels.push(t.parse::<usize>().map_err(|_| err(line, format!("{t:?} is not a non-negative integer label")))?);
        }
    }
    if coords.is_empty() {
        return Err(err(0, "file contains no points".into()));
    }
    let n = coords.len() / 3;
    let labels = (columns == Some(4)).then_some(labels);
    Ok(PointCloud::new(Tensor::new([n, 3], coords)?, None, labels)?)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

/// Shortest decimal form of `v` rounded to [`RENDER_DIGITS`] significant digits.
pub fn render_number(v: f64) -> String {
    let rounded: f64 = format!("{:.*e}", RENDER_DIGITS - 1, v).parse().expect("formatted float parses");
    if rounded == 0.0 {
        "0".into()
    } else {
        rounded.to_string()
    }
}

/// Renders a cloud as xyz text, including labels when present.
pub fn render_xyz(cloud: &PointCloud<f64>) -> String {
    let mut out = String::new();
    for r in 0..cloud.len() {
        let p = cloud.coords.row(r);
        let _ = write!(out, "{} {} {}", render_number(p[0]), render_number(p[1]), render_number(p[2]));
        if let Some(l) = &cloud.labels {
            let _ = write!(out, " {}", l[r]);
        }
        out.push('\n');
    }
    out
}

pub fn write_xyz(path: &Path, cloud: &PointCloud<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, render_xyz(cloud)).map_err(|e| Error::io(path, e))
}

/// One labeled shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Path relative to the manifest directory.
    pub file: PathBuf,
    pub cloud: PointCloud<f64>,
    /// Class id; classification only.
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    /// Class names (classification) or part names (segmentation).
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Every label id lies in `[0, labels.len())` and carries the columns the task needs.
    pub fn validate(&self) -> Result<()> {
        let k = self.labels.len();
        if k < 2 {
            return Err(Error::Input(format!("need at least 2 labels, got {k}")));
        }
        for ex in self.train.iter().chain(&self.test) {
            let name = ex.file.display();
            match self.task {
                Task::Classification => match ex.class {
                    Some(c) if c < k => {}
                    Some(c) => return Err(Error::Input(format!("{name}: class {c} outside {k} labels"))),
                    None => return Err(Error::Input(format!("{name}: classification example without a class"))),
                },
                Task::Segmentation => match &ex.cloud.labels {
                    Some(l) => {
                        if let Some(&bad) = l.iter().find(|&&p| p >= k) {
                            return Err(Error::Input(format!("{name}: part {bad} outside {k} labels")));
                        }
                    }
                    None => return Err(Error::Input(format!("{name}: segmentation file without part labels"))),
                },
            }
        }
        Ok(())
    }

    /// Manifest text for this dataset.
    pub fn manifest(&self) -> String {
        let mut out = format!("task {}\nlabels {}\n", self.task, self.labels.join(" "));
        for split in [Split::Train, Split::Test] {
            for ex in self.split(split) {
                let _ = write!(out, "{} {}", split.as_str(), ex.file.display());
                if let Some(c) = ex.class {
                    let _ = write!(out, " {c}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Writes every point file plus `manifest.txt` under `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        for ex in self.train.iter().chain(&self.test) {
            write_xyz(&dir.join(&ex.file), &ex.cloud)?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loads a manifest and every file it lists.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut task = None;
    let mut labels = None;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let Some((&key, rest)) = tokens.split_first() else { continue };
        match key {
            "task" => {
                let [t] = rest else { return Err(err(line, "expected `task cls|seg`".into())) };
                task = Some(t.parse::<Task>().map_err(|e| err(line, e.to_string()))?);
            }
            "labels" => labels = Some(rest.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            "train" | "test" => {
                let task = task.ok_or_else(|| err(line, "examples must follow the task line".into()))?;
                let (file, class) = match (task, rest) {
                    (Task::Classification, [f, c]) => {
                        (*f, Some(c.parse::<usize>().map_err(|_| err(line, format!("{c:?} is not a class id")))?))
                    }
                    (Task::Segmentation, [f]) => (*f, None),
                    (Task::Classification, _) => return Err(err(line, format!("expected `{key} <file> <class>`"))),
                    (Task::Segmentation, _) => return Err(err(line, format!("expected `{key} <file>`"))),
                };
                let cloud = read_xyz(&root.join(file))?;
                let ex = Example { file: PathBuf::from(file), cloud, class };
                if key == "train" { train.push(ex) } else { test.push(ex) }
            }
            other => return Err(err(line, format!("unknown manifest key {other:?}"))),
        }
    }
    let ds = Dataset {
        task: task.ok_or_else(|| err(0, "missing task line".into()))?,
        labels: labels.ok_or_else(|| err(0, "missing labels line".into()))?,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

/// Synthetic dataset sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub points: usize,
    /// Per class for classification, total for segmentation.
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

pub const CLASS_NAMES: [&str; 3] = ["sphere", "cube", "torus"];
pub const PART_NAMES: [&str; 2] = ["body", "handle"];

fn normal3(rng: &mut impl Rng) -> [f64; 3] {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

fn unit3(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = normal3(rng);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniformly random rotation from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let g: [f64; 4] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = g.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Rotates, scales and then divides by the largest point norm, so the
/// result touches the unit sphere. No re-centering: shapes are generated
/// around the origin.
fn place(points: &mut [[f64; 3]], rng: &mut impl Rng) {
    let rot = random_rotation(rng);
    let scale = rng.gen_range(0.5..1.5);
    for p in points.iter_mut() {
        let q = [0, 1, 2].map(|r| scale * (rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2]));
        *p = q;
    }
    let max = points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
    for p in points.iter_mut() {
        p.iter_mut().for_each(|v| *v /= max);
    }
}

fn sample_sphere(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n).map(|_| unit3(rng)).collect()
}

/// Uniform over the surface of `[-1, 1]^3`: faces have equal area.
fn sample_cube(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let axis = rng.gen_range(0..3);
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let mut p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            p[axis] = side;
            p
        })
        .collect()
}

/// Uniform over a torus surface by rejection on the area element.
fn sample_torus(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let big = 1.0;
    let small = rng.gen_range(0.25..0.45);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let phi = rng.gen_range(0.0..2.0 * PI);
        if rng.gen::<f64>() * (big + small) > big + small * phi.cos() {
            continue;
        }
        let ring = big + small * phi.cos();
        out.push([ring * theta.cos(), ring * theta.sin(), small * phi.sin()]);
    }
    out
}

fn cloud_of(points: &[[f64; 3]], labels: Option<Vec<usize>>) -> PointCloud<f64> {
    let coords = Tensor::new([points.len(), 3], points.iter().flatten().copied().collect()).expect("non-empty shape");
    PointCloud::new(coords, None, labels).expect("generated clouds are finite")
}

/// Sphere, cube and torus surfaces, each randomly rotated and scaled, then
/// normalized into the unit ball.
pub fn synth_classification(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.points < 32 {
        return Err(Error::Input(format!("synthetic clouds need at least 32 points, got {}", cfg.points)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |split: Split, per_class: usize| {
        let mut out = Vec::with_capacity(per_class * CLASS_NAMES.len());
        for i in 0..per_class {
            for (class, name) in CLASS_NAMES.iter().enumerate() {
                let mut pts = match class {
                    0 => sample_sphere(cfg.points, &mut rng),
                    1 => sample_cube(cfg.points, &mut rng),
                    _ => sample_torus(cfg.points, &mut rng),
                };
                place(&mut pts, &mut rng);
                let file = PathBuf::from(format!("{}/{name}_{i:04}.xyz", split.as_str()));
                out.push(Example { file, cloud: cloud_of(&pts, None), class: Some(class) });
            }
        }
        out
    };
    let train = make(Split::Train, cfg.train);
    let test = make(Split::Test, cfg.test);
    Ok(Dataset { task: Task::Classification, labels: CLASS_NAMES.map(String::from).to_vec(), train, test })
}

/// Dimensions of one generated mug-like shape.
struct Handle {
    radius: f64,
    length: f64,
}

impl Handle {
    /// Lateral area of the handle over total area.
    fn probability(&self) -> f64 {
        let body = 4.0 * PI;
        let handle = 2.0 * PI * self.radius * self.length;
        handle / (body + handle)
    }
}

/// Unit sphere body (part 0) with a cylindrical handle (part 1) along +x,
/// starting inside the body. Each point picks its part with probability
/// proportional to surface area.
fn sample_mug(n: usize, rng: &mut impl Rng) -> (Vec<[f64; 3]>, Vec<usize>, f64) {
    let h = Handle { radius: rng.gen_range(0.2..0.3), length: rng.gen_range(0.9..1.3) };
    let p = h.probability();
    loop {
        let mut pts = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.gen::<f64>() < p {
                let a = rng.gen_range(0.0..2.0 * PI);
                pts.push([0.8 + rng.gen_range(0.0..h.length), h.radius * a.cos(), h.radius * a.sin()]);
                labels.push(1);
            } else {
                pts.push(unit3(rng));
                labels.push(0);
            }
        }
        if labels.contains(&0) && labels.contains(&1) {
            return (pts, labels, p);
        }
    }
}

/// Generation statistics for the segmentation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegSynthReport {
    pub handle_points: usize,
    pub expected_handle_points: f64,
    pub total_points: usize,
    /// Pearson statistic of the observed part counts against their sampling
    /// proportions, one degree of freedom.
    pub chi_square: f64,
}

/// Pearson chi-square of observed counts against expected counts.
pub fn chi_square(observed: &[f64], expected: &[f64]) -> f64 {
    observed.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum()
}

/// Two-part labeled shapes; rejects any generated set whose part counts
/// fail the chi-square sanity check.
pub fn synth_segmentation(cfg: &SynthConfig) -> Result<(Dataset, SegSynthReport)> {
    if cfg.points < 32 {
        return Err(Error::Input(format!("synthetic clouds need at least 32 points, got {}", cfg.points)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut handle, mut expected) = (0usize, 0.0);
    let mut make = |split: Split, count: usize| {
        (0..count)
            .map(|i| {
                let (mut pts, labels, p) = sample_mug(cfg.points, &mut rng);
                handle += labels.iter().filter(|&&l| l == 1).count();
                expected += p * cfg.points as f64;
                place(&mut pts, &mut rng);
                let file = PathBuf::from(format!("{}/mug_{i:04}.xyz", split.as_str()));
                Example { file, cloud: cloud_of(&pts, Some(labels)), class: None }
            })
            .collect::<Vec<_>>()
    };
    let train = make(Split::Train, cfg.train);
    let test = make(Split::Test, cfg.test);
    let total = (cfg.train + cfg.test) * cfg.points;
    let stat = chi_square(&[handle as f64, (total - handle) as f64], &[expected, total as f64 - expected]);
    let report = SegSynthReport { handle_points: handle, expected_handle_points: expected, total_points: total, chi_square: stat };
    if stat > CHI_SQUARE_CRITICAL_1DF {
        return Err(Error::Input(format!("part proportions fail the chi-square check: {stat:.2}")));
    }
    let ds = Dataset { task: Task::Segmentation, labels: PART_NAMES.map(String::from).to_vec(), train, test };
    Ok((ds, report))
}

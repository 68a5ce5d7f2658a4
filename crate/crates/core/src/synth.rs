//! Seeded few-shot classification tasks with a tunable domain gap.
//!
//! Tokens are drawn from an anisotropic Gaussian `x = Q·diag(√λ)·g`. A frozen
//! two-layer teacher labels each sequence from its source draw. The target
//! domain observes rotated tokens `Rᵀ(gap)·x`, where `R(gap)` rotates each
//! eigen-plane of the source covariance by `gap·θᵢ`, so `R(0) = I` and
//! `R(1)` is a fixed seeded orthogonal map. Because the rotation planes are
//! aligned with the covariance eigenbasis, the second-moment shift grows
//! monotonically with `gap`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::{roles, Tensor, WeightBundle};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::nn::Targets;

const TEACHER_HIDDEN: usize = 32;
const CALIBRATION_DRAWS: usize = 2000;
/// Draw budget of a rejection-sampled split, relative to its size.
const MAX_REJECTION_FACTOR: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    MultiClass,
    MultiLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub shots: usize,
    pub gap: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
    pub pretrain_size: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            seq_len: 16,
            num_classes: 4,
            shots: 10,
            gap: 1.0,
            label_mode: LabelMode::MultiClass,
            seed: 0,
            pretrain_size: 5000,
            val_per_class: 10,
            test_per_class: 25,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.seq_len == 0 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(
                "task needs input_dim >= 1, seq_len >= 1 and num_classes >= 2".into(),
            ));
        }
        if self.shots == 0 {
            return Err(Error::InvalidArgument("shots must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gap) {
            return Err(Error::InvalidArgument(format!("gap {} outside [0, 1]", self.gap)));
        }
        Ok(())
    }
}

/// Examples of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Each `seq_len × input_dim`.
    pub inputs: Vec<Matrix>,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Rows `idx` as a new dataset, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let inputs = idx.iter().map(|&i| self.inputs[i].clone()).collect();
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::MultiLabel(m) => Targets::MultiLabel(Matrix::from_fn(idx.len(), m.cols(), |r, j| m[(idx[r], j)])),
        };
        Dataset { inputs, targets }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    /// Source-domain pretraining examples.
    pub pretrain: Dataset,
    /// Target-domain few-shot training set (`shots` per class).
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// One `input`/`label` tensor pair per split; the layer slot carries the split index.
    pub fn to_bundle(&self) -> WeightBundle {
        let mut b = WeightBundle::new();
        b.config = Some(serde_json::to_value(&self.spec).expect("spec serializes"));
        for split in Split::ALL {
            let ds = self.split(split);
            if ds.is_empty() {
                continue;
            }
            let width = self.spec.seq_len * self.spec.input_dim;
            let data = ds.inputs.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
            b.push(Tensor::new(
                format!("{}.input", split.name()),
                Some(split.index()),
                roles::INPUT,
                vec![ds.len(), width],
                data,
            ))
            .expect("split keys are unique");
            let (shape, data) = match &ds.targets {
                Targets::Classes(c) => (vec![c.len(), 1], c.iter().map(|&v| v as f64).collect()),
                Targets::MultiLabel(m) => (vec![m.rows(), m.cols()], m.as_slice().to_vec()),
            };
            b.push(Tensor::new(
                format!("{}.label", split.name()),
                Some(split.index()),
                roles::LABEL,
                shape,
                data,
            ))
            .expect("split keys are unique");
        }
        b
    }

    pub fn from_bundle(bundle: &WeightBundle) -> Result<TaskData> {
        let spec: TaskSpec = match &bundle.config {
            Some(v) => {
                serde_json::from_value(v.clone()).map_err(|e| Error::ManifestParse(format!("task spec: {e}")))?
            }
            None => return Err(Error::ManifestParse("dataset bundle has no task spec".into())),
        };
        let load = |split: Split| -> Result<Dataset> {
            let Some(input) = bundle.get(Some(split.index()), roles::INPUT) else {
                return Ok(Dataset {
                    inputs: Vec::new(),
                    targets: Targets::Classes(Vec::new()),
                });
            };
            let label = bundle
                .get(Some(split.index()), roles::LABEL)
                .ok_or_else(|| Error::MissingWeight(format!("{}.label", split.name())))?;
            let width = spec.seq_len * spec.input_dim;
            if input.shape.len() != 2 || input.shape[1] != width {
                return Err(Error::ShapeMismatch(format!(
                    "'{}' has shape {:?}, expected [N, {width}]",
                    input.name, input.shape
                )));
            }
            let n = input.shape[0];
            let inputs = input
                .data
                .chunks_exact(width)
                .map(|c| Matrix::new(spec.seq_len, spec.input_dim, c.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let targets = match spec.label_mode {
                LabelMode::MultiClass => Targets::Classes(label.data.iter().map(|&v| v as usize).collect()),
                LabelMode::MultiLabel => Targets::MultiLabel(label.to_matrix()?),
            };
            if targets.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "'{}' does not match its inputs",
                    label.name
                )));
            }
            Ok(Dataset { inputs, targets })
        };
        Ok(TaskData {
            pretrain: load(Split::Pretrain)?,
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
            spec,
        })
    }
}

/// The fixed generative process shared by every gap value of a seed.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: TaskSpec,
    /// Orthonormal eigenbasis of the source covariance (columns).
    basis: Matrix,
    /// Covariance eigenvalues, one per basis column.
    eigenvalues: Vec<f64>,
    /// Rotation angle of each plane `(2i, 2i+1)` at `gap = 1`.
    angles: Vec<f64>,
    teacher_in: Matrix,
    teacher_out: Matrix,
    teacher_bias: Vec<f64>,
    /// Per-label thresholds for multi-label tasks.
    thresholds: Vec<f64>,
}

/// Per-split RNG stream derived from the task seed.
fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(1 + split.index() as u64),
    )
}

fn orthonormal_basis(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}

impl Generator {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let basis = orthonormal_basis(n, &mut rng);
        // geometric spectrum from 4 down to 0.25
        let eigenvalues = (0..n)
            .map(|i| {
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                4.0 * (1.0f64 / 16.0).powf(t)
            })
            .collect();
        let angles = (0..n / 2).map(|_| rng.random_range(PI / 4.0..=PI / 2.0)).collect();
        let teacher_in = Matrix::random_normal(TEACHER_HIDDEN, n, &mut rng).scale(1.0 / (n as f64).sqrt());
        let teacher_out = Matrix::random_normal(spec.num_classes, TEACHER_HIDDEN, &mut rng)
            .scale(3.0 / (TEACHER_HIDDEN as f64).sqrt());
        let mut gen = Generator {
            spec: spec.clone(),
            basis,
            eigenvalues,
            angles,
            teacher_in,
            teacher_out,
            teacher_bias: vec![0.0; spec.num_classes],
            thresholds: vec![0.0; spec.num_classes],
        };
        gen.calibrate(&mut rng);
        Ok(gen)
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// Centres teacher logits so every class is reachable in roughly equal measure.
    fn calibrate(&mut self, rng: &mut ChaCha8Rng) {
        let raw: Vec<Vec<f64>> = (0..CALIBRATION_DRAWS)
            .map(|_| {
                let x = self.source_sequence(rng);
                self.raw_logits(&x)
            })
            .collect();
        let c = self.spec.num_classes;
        match self.spec.label_mode {
            LabelMode::MultiLabel => {
                for j in 0..c {
                    let col: Vec<f64> = raw.iter().map(|r| r[j]).collect();
                    self.thresholds[j] = crate::linalg::median(&col).expect("non-empty calibration set");
                }
            }
            LabelMode::MultiClass => {
                let n = raw.len() as f64;
                let mut spread = 0.0;
                for j in 0..c {
                    let mean = raw.iter().map(|r| r[j]).sum::<f64>() / n;
                    let var = raw.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                    self.teacher_bias[j] = -mean;
                    spread += var.sqrt() / c as f64;
                }
                // damped frequency matching; each step moves biases by a fraction of the logit spread
                for t in 0..400 {
                    let mut counts = vec![0usize; c];
                    for r in &raw {
                        counts[argmax_with_bias(r, &self.teacher_bias)] += 1;
                    }
                    let step = 0.5 * spread / (1.0 + t as f64 / 50.0);
                    for (b, &cnt) in self.teacher_bias.iter_mut().zip(&counts) {
                        *b -= step * (cnt as f64 / n * c as f64 - 1.0);
                    }
                }
            }
        }
    }

    fn raw_logits(&self, x: &Matrix) -> Vec<f64> {
        let hidden = x.matmul_nt(&self.teacher_in).expect("teacher shape").map(f64::tanh);
        self.teacher_out.matvec(&hidden.mean_rows())
    }

    /// One source-domain token sequence (`seq_len × input_dim`).
    pub fn source_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix {
        let n = self.spec.input_dim;
        let scales: Vec<f64> = self.eigenvalues.iter().map(|v| v.sqrt()).collect();
        let g = Matrix::from_fn(self.spec.seq_len, n, |_, j| {
            let z: f64 = StandardNormal.sample(rng);
            z * scales[j]
        });
        // rows: xᵀ = (diag(√λ)·g)ᵀ·Qᵀ
        g.matmul_nt(&self.basis).expect("basis shape")
    }

    /// `R(gap) = Q·blockdiag(rot(gap·θᵢ))·Qᵀ`.
    pub fn rotation(&self, gap: f64) -> Matrix {
        let n = self.spec.input_dim;
        let mut block = Matrix::identity(n);
        for (i, &theta) in self.angles.iter().enumerate() {
            let (s, c) = (gap * theta).sin_cos();
            let (p, q) = (2 * i, 2 * i + 1);
            block[(p, p)] = c;
            block[(p, q)] = -s;
            block[(q, p)] = s;
            block[(q, q)] = c;
        }
        self.basis
            .matmul(&block)
            .and_then(|m| m.matmul_nt(&self.basis))
            .expect("rotation shapes")
    }

    /// Source covariance `Q·diag(λ)·Qᵀ`.
    pub fn source_covariance(&self) -> Matrix {
        let q = &self.basis;
        let scaled = Matrix::from_fn(q.rows(), q.cols(), |i, j| q[(i, j)] * self.eigenvalues[j]);
        scaled.matmul_nt(q).expect("covariance shape")
    }

    /// Maps source tokens into the target domain: each token row `xᵀ ↦ xᵀ·R`.
    pub fn to_target(&self, x: &Matrix, rotation: &Matrix) -> Matrix {
        x.matmul(rotation).expect("rotation shape")
    }

    fn label(&self, x: &Matrix) -> Label {
        let raw = self.raw_logits(x);
        match self.spec.label_mode {
            LabelMode::MultiClass => Label::Class(argmax_with_bias(&raw, &self.teacher_bias)),
            LabelMode::MultiLabel => Label::Multi(
                raw.iter()
                    .zip(&self.thresholds)
                    .map(|(v, t)| if v > t { 1.0 } else { 0.0 })
                    .collect(),
            ),
        }
    }

    /// Draws a split. Multi-class splits are filled class by class up to
    /// `per_class` each by rejection; multi-label splits take the first draws.
    /// A class the teacher almost never emits surfaces as an error rather than a hang.
    pub fn sample_split(&self, split: Split, per_class: usize, gap: f64) -> Result<Dataset> {
        let mut rng = split_rng(self.spec.seed, split);
        let c = self.spec.num_classes;
        let rotation = (gap != 0.0).then(|| self.rotation(gap));
        let mut inputs = Vec::with_capacity(per_class * c);
        match self.spec.label_mode {
            LabelMode::MultiClass => {
                let mut counts = vec![0usize; c];
                let mut classes = Vec::with_capacity(per_class * c);
                let budget = MAX_REJECTION_FACTOR * per_class * c;
                let mut drawn = 0usize;
                while classes.len() < per_class * c {
                    if drawn == budget {
                        let short = (0..c).find(|&k| counts[k] < per_class).unwrap_or(0);
                        return Err(Error::InvalidArgument(format!(
                            "{} split: class {short} reached {} of {per_class} examples after {budget} draws",
                            split.name(),
                            counts[short]
                        )));
                    }
                    drawn += 1;
                    let x = self.source_sequence(&mut rng);
                    let Label::Class(y) = self.label(&x) else {
                        unreachable!()
                    };
                    if counts[y] >= per_class {
                        continue;
                    }
                    counts[y] += 1;
                    classes.push(y);
                    inputs.push(match &rotation {
                        Some(r) => self.to_target(&x, r),
                        None => x,
                    });
                }
                Ok(Dataset {
                    inputs,
                    targets: Targets::Classes(classes),
                })
            }
            LabelMode::MultiLabel => {
                let n = per_class * c;
                let mut labels = Vec::with_capacity(n * c);
                for _ in 0..n {
                    let x = self.source_sequence(&mut rng);
                    let Label::Multi(y) = self.label(&x) else {
                        unreachable!()
                    };
                    labels.extend(y);
                    inputs.push(match &rotation {
                        Some(r) => self.to_target(&x, r),
                        None => x,
                    });
                }
                Ok(Dataset {
                    inputs,
                    targets: Targets::MultiLabel(Matrix::from_vec_unchecked(n, c, labels)),
                })
            }
        }
    }
}

enum Label {
    Class(usize),
    Multi(Vec<f64>),
}

fn argmax_with_bias(raw: &[f64], bias: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (r, b)) in raw.iter().zip(bias).enumerate() {
        if r + b > best_v {
            best_v = r + b;
            best = i;
        }
    }
    best
}

/// Builds every split of a task. The pretrain split always comes from the
/// source domain; train/val/test are drawn at `spec.gap`.
pub fn generate(spec: &TaskSpec) -> Result<TaskData> {
    let gen = Generator::new(spec)?;
    generate_with(&gen, spec.gap)
}

fn generate_with(gen: &Generator, gap: f64) -> Result<TaskData> {
    let spec = gen.spec();
    let c = spec.num_classes;
    let pretrain = if spec.pretrain_size == 0 {
        Dataset {
            inputs: Vec::new(),
            targets: Targets::Classes(Vec::new()),
        }
    } else {
        let per_class = spec.pretrain_size.div_ceil(c);
        let mut ds = gen.sample_split(Split::Pretrain, per_class, 0.0)?;
        // rejection fills classes in draw order; shuffle so truncation stays balanced
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut split_rng(spec.seed ^ 0xa5a5, Split::Pretrain));
        if let Targets::Classes(labels) = &ds.targets {
            // keep class quotas exact under truncation: round-robin over classes
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
            for &i in &idx {
                by_class[labels[i]].push(i);
            }
            let mut picked = Vec::with_capacity(spec.pretrain_size);
            let mut round = 0;
            while picked.len() < spec.pretrain_size {
                for list in &by_class {
                    if picked.len() < spec.pretrain_size && round < list.len() {
                        picked.push(list[round]);
                    }
                }
                round += 1;
            }
            idx = picked;
        } else {
            idx.truncate(spec.pretrain_size);
        }
        ds = ds.select(&idx);
        ds
    };
    let mut spec = spec.clone();
    spec.gap = gap;
    Ok(TaskData {
        pretrain,
        train: gen.sample_split(Split::Train, spec.shots, gap)?,
        val: gen.sample_split(Split::Val, spec.val_per_class, gap)?,
        test: gen.sample_split(Split::Test, spec.test_per_class, gap)?,
        spec,
    })
}

/// One task per gap, all sharing the source distribution and teacher.
pub fn gap_sweep(spec: &TaskSpec, gaps: &[f64]) -> Result<Vec<TaskData>> {
    if let Some(g) = gaps.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::InvalidArgument(format!("gap {g} outside [0, 1]")));
    }
    let gen = Generator::new(spec)?;
    gaps.iter().map(|&g| generate_with(&gen, g)).collect()
}

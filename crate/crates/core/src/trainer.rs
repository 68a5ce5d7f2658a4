//! AdamW + cosine-annealing training with per-iteration SPU sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adapter::{sample_active_rank, SpuSampler, UpdateMask};
use crate::error::{Error, Result};
use crate::linalg::{effective_rank, stable_rank, Matrix, DEFAULT_EFFECTIVE_RANK_THRESHOLD};
use crate::nn::{ParamId, Targets, ToyTransformer, Trainable};
use crate::planner::{AdaptedRole, RankPlan, Strategy, WeightKey};
use crate::synth::Dataset;

const EVAL_BATCH: usize = 64;
/// One optimizer step in this many gets a before/after SPU locality comparison.
const LOCALITY_CHECK_EVERY: usize = 100;

/// Which tensors a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FullFt,
    LinearProbe,
    LoraFixed(usize),
    SrLora,
    /// Stable-rank allocation without stochastic partial updating.
    SrLoraNoSpu,
}

impl Mode {
    pub fn uses_adapters(&self) -> bool {
        matches!(self, Mode::LoraFixed(_) | Mode::SrLora | Mode::SrLoraNoSpu)
    }

    pub fn trainable(&self) -> Trainable {
        match self {
            Mode::FullFt => Trainable {
                backbone: true,
                classifier: true,
                adapters: false,
            },
            Mode::LinearProbe => Trainable {
                backbone: false,
                classifier: true,
                adapters: false,
            },
            _ => Trainable {
                backbone: false,
                classifier: true,
                adapters: true,
            },
        }
    }

    /// The planner strategy an adapter mode expects.
    pub fn strategy(&self) -> Option<Strategy> {
        match self {
            Mode::LoraFixed(r) => Some(Strategy::Fixed(*r)),
            Mode::SrLora | Mode::SrLoraNoSpu => Some(Strategy::Stable),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::FullFt => f.write_str("full_ft"),
            Mode::LinearProbe => f.write_str("linear_probe"),
            Mode::LoraFixed(r) => write!(f, "lora_fixed:{r}"),
            Mode::SrLora => f.write_str("sr_lora"),
            Mode::SrLoraNoSpu => f.write_str("sr_lora_no_spu"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ft" => Ok(Mode::FullFt),
            "linear_probe" => Ok(Mode::LinearProbe),
            "sr_lora" => Ok(Mode::SrLora),
            "sr_lora_no_spu" => Ok(Mode::SrLoraNoSpu),
            _ => {
                let r = s
                    .strip_prefix("lora_fixed:")
                    .and_then(|r| r.parse::<usize>().ok())
                    .filter(|&r| r > 0)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown mode '{s}'")))?;
                Ok(Mode::LoraFixed(r))
            }
        }
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Only consulted by `lora_fixed`; `sr_lora` always samples, `sr_lora_no_spu` never does.
    pub spu: bool,
    pub spu_include_zero: bool,
    pub seed: u64,
    pub mode: Mode,
    pub effective_rank_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr0: 1e-3,
            lr_min: 0.0,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            spu: true,
            spu_include_zero: false,
            seed: 0,
            mode: Mode::SrLora,
            effective_rank_threshold: DEFAULT_EFFECTIVE_RANK_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) || !(0.0..=self.lr0).contains(&self.lr_min) {
            return Err(Error::InvalidArgument(format!(
                "learning rates need 0 < lr0 and 0 <= lr_min <= lr0 (got {}, {})",
                self.lr0, self.lr_min
            )));
        }
        Ok(())
    }

    pub fn spu_active(&self) -> bool {
        match self.mode {
            Mode::SrLora => true,
            Mode::LoraFixed(_) => self.spu,
            _ => false,
        }
    }

    fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if step == 0 {
        return lr0;
    }
    if step >= total_steps {
        return lr_min;
    }
    let t = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        TrainConfig::default().adamw()
    }
}

/// Moments and per-element step counts for one tensor. Elements skipped by a
/// mask keep their own count so their bias correction stays exact.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            steps: vec![0; rows * cols],
        }
    }
}

/// One AdamW step on the elements allowed by `mask`; everything else is left
/// bit-identical, including its moments. `decay = false` skips weight decay.
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    lr: f64,
    opt: &AdamW,
    mask: UpdateMask,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::ShapeMismatch(format!(
            "param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    let cols = param.cols();
    let wd = if decay { opt.weight_decay } else { 0.0 };
    let p = param.as_mut_slice();
    let g = grad.as_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for i in 0..p.len() {
        if !mask.allows(i / cols, i % cols) {
            continue;
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
        let m_hat = m[i] / (1.0 - opt.beta1.powi(t));
        let v_hat = v[i] / (1.0 - opt.beta2.powi(t));
        if wd != 0.0 {
            p[i] -= lr * wd * p[i];
        }
        p[i] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

/// Mean loss and metric (top-1 accuracy, or macro label accuracy for
/// multi-label targets) of a logit matrix.
pub fn loss_and_metric(logits: &Matrix, targets: &Targets) -> (f64, f64) {
    let n = logits.rows();
    match targets {
        Targets::Classes(labels) => {
            let mut loss = 0.0;
            let mut correct = 0usize;
            for (i, &y) in labels.iter().enumerate() {
                let r = logits.row(i);
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - r[y];
                let pred = r
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0;
                correct += usize::from(pred == y);
            }
            (loss / n as f64, correct as f64 / n as f64)
        }
        Targets::MultiLabel(y) => {
            let c = logits.cols();
            let mut loss = 0.0;
            let mut per_label = vec![0usize; c];
            for i in 0..n {
                for j in 0..c {
                    let z = logits[(i, j)];
                    let t = y[(i, j)];
                    // softplus(z) - t·z
                    let sp = if z > 0.0 {
                        z + (-z).exp().ln_1p()
                    } else {
                        z.exp().ln_1p()
                    };
                    loss += sp - t * z;
                    per_label[j] += usize::from((z > 0.0) == (t > 0.5));
                }
            }
            let macro_acc = per_label.iter().map(|&k| k as f64 / n as f64).sum::<f64>() / c as f64;
            (loss / (n * c) as f64, macro_acc)
        }
    }
}

/// Loss and metric over a whole split, evaluated in fixed-size chunks.
pub fn evaluate(model: &ToyTransformer, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    let (mut loss, mut metric) = (0.0, 0.0);
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let batch = data.select(&idx);
        let out = model.forward(&batch.inputs)?;
        let (l, m) = loss_and_metric(&out.logits, &batch.targets);
        loss += l * idx.len() as f64;
        metric += m * idx.len() as f64;
    }
    Ok((loss / n as f64, metric / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-split training loss at the end of the epoch (epoch 0: before training).
    pub train_loss: f64,
    pub val_metric: f64,
    pub test_metric: Option<f64>,
    /// Learning rate of the epoch's last step (epoch 0: `lr0`).
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Column order of `stable_ranks`.
    pub rank_keys: Vec<WeightKey>,
    /// `epochs + 1` rows of `srank(W₀ + ΔW)`, one column per key.
    pub stable_ranks: Vec<Vec<f64>>,
    pub selected_epoch: usize,
    pub selected_val_metric: f64,
    pub selected_test_metric: Option<f64>,
    pub total_steps: usize,
    pub trainable_params: usize,
    /// Mean effective rank of `W_final − W_initial` over the adapted weights.
    pub delta_effective_rank: f64,
    pub spu_locality_checks: usize,
    pub spu_locality_violations: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunReport {
    /// `epoch,layer,role,stable_rank`.
    pub fn write_ranks_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,layer,role,stable_rank")?;
        for (epoch, row) in self.stable_ranks.iter().enumerate() {
            for (key, v) in self.rank_keys.iter().zip(row) {
                writeln!(w, "{epoch},{},{},{v}", key.layer, key.role)?;
            }
        }
        Ok(())
    }

    /// `step,loss,lr`.
    pub fn write_loss_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,loss,lr")?;
        for s in &self.steps {
            writeln!(w, "{},{},{}", s.step, s.loss, s.lr)?;
        }
        Ok(())
    }

    pub fn save_csvs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, ranks) in [("ranks.csv", true), ("loss.csv", false)] {
            let path = dir.join(name);
            let mut buf = Vec::new();
            if ranks {
                self.write_ranks_csv(&mut buf)
            } else {
                self.write_loss_csv(&mut buf)
            }
            .map_err(|e| Error::io(&path, e))?;
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Drift {
    pub max_abs_drift: f64,
    pub series: Vec<f64>,
}

/// Per-key `max_t |srank_t − srank_0|` with the full series.
pub fn rank_drift(report: &RunReport) -> BTreeMap<WeightKey, Drift> {
    report
        .rank_keys
        .iter()
        .enumerate()
        .map(|(j, key)| {
            let series: Vec<f64> = report.stable_ranks.iter().map(|row| row[j]).collect();
            let s0 = series.first().copied().unwrap_or(0.0);
            let max_abs_drift = series.iter().map(|s| (s - s0).abs()).fold(0.0, f64::max);
            (*key, Drift { max_abs_drift, series })
        })
        .collect()
}

fn adapted_keys(model: &ToyTransformer) -> Vec<WeightKey> {
    (1..=model.config().layers)
        .flat_map(|l| AdaptedRole::ALL.map(|r| WeightKey::new(l, r)))
        .collect()
}

fn rank_row(model: &ToyTransformer, keys: &[WeightKey]) -> Result<Vec<f64>> {
    keys.iter()
        .map(|&k| {
            let w = model.effective_weight(k);
            if w.is_zero() {
                Ok(0.0)
            } else {
                stable_rank(&w)
            }
        })
        .collect()
}

fn update_mask(model: &ToyTransformer, id: ParamId) -> UpdateMask {
    match id {
        ParamId::LoraA(k) => model.adapter(k).map_or(UpdateMask::All, |a| a.a_mask()),
        ParamId::LoraB(k) => model.adapter(k).map_or(UpdateMask::All, |a| a.b_mask()),
        _ => UpdateMask::All,
    }
}

fn set_full_rank(model: &mut ToyTransformer) {
    for (_, a) in model.adapters_mut() {
        let r = a.rank();
        a.set_active_rank(r).expect("full rank is always valid");
    }
}

/// Factor entries outside the active region, per adapter.
fn inactive_regions(model: &ToyTransformer) -> Vec<Vec<f64>> {
    model
        .adapters()
        .values()
        .map(|a| {
            let s = a.active_rank();
            let b = a.b_factor();
            let mut out = Vec::new();
            for i in 0..b.rows() {
                out.extend_from_slice(&b.row(i)[s..]);
            }
            let af = a.a_factor();
            for i in s..af.rows() {
                out.extend_from_slice(af.row(i));
            }
            out
        })
        .collect()
}

fn bits_equal(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

/// Seeds for the shuffling and SPU streams of a run.
fn run_rngs(seed: u64, include_zero: bool) -> (ChaCha8Rng, SpuSampler) {
    (
        ChaCha8Rng::seed_from_u64(seed ^ 0x0005_4a4b_1e00_0001),
        SpuSampler::with_zero(seed ^ 0x0005_9e00_0000_0002, include_zero),
    )
}

/// Trains `model` on `task.train`, selecting the best epoch on `task.val`.
///
/// Adapter modes need a plan whose strategy matches the mode; the adapters are
/// freshly built from it. On return the model holds the selected epoch's weights.
pub fn train(
    model: &mut ToyTransformer,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: Option<&Dataset>,
    plan: Option<&RankPlan>,
    config: &TrainConfig,
) -> Result<RunReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let started = Instant::now();
    let mode = config.mode;

    model.clear_adapters();
    if let Some(expected) = mode.strategy() {
        let plan = plan.ok_or_else(|| Error::PlanMismatch(format!("mode {mode} needs a rank plan")))?;
        if plan.strategy != expected {
            return Err(Error::PlanMismatch(format!(
                "mode {mode} expects strategy {expected}, plan uses {}",
                plan.strategy
            )));
        }
        model.attach_plan(plan, config.seed)?;
        let spu = config.spu_active();
        for (_, a) in model.adapters_mut() {
            a.set_spu(spu);
        }
    }
    model.set_trainable(mode.trainable());

    let keys = adapted_keys(model);
    let initial: Vec<Matrix> = keys.iter().map(|&k| model.effective_weight(k)).collect();
    let ids = model.trainable_ids();
    let trainable_params = model.num_params(|id| model.trainable().includes(id));
    let opt = config.adamw();
    let mut states: BTreeMap<ParamId, AdamState> = ids
        .iter()
        .map(|&id| {
            let m = model.param(id).expect("trainable ids exist");
            (id, AdamState::new(m.rows(), m.cols()))
        })
        .collect();

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let last = total_steps.saturating_sub(1).max(1);
    let (mut shuffle_rng, mut sampler) = run_rngs(config.seed, config.spu_include_zero);
    let spu = mode.uses_adapters() && config.spu_active();

    let mut epochs = Vec::with_capacity(config.epochs + 1);
    let mut stable_ranks = Vec::with_capacity(config.epochs + 1);
    let mut steps = Vec::with_capacity(total_steps);
    let (l0, _) = evaluate(model, train_set)?;
    let (_, v0) = evaluate(model, val_set)?;
    epochs.push(EpochRecord {
        epoch: 0,
        train_loss: l0,
        val_metric: v0,
        test_metric: test_set.map(|t| evaluate(model, t).map(|r| r.1)).transpose()?,
        lr: config.lr0,
    });
    stable_ranks.push(rank_row(model, &keys)?);

    let mut best: Option<(usize, f64, ToyTransformer)> = None;
    let mut locality_checks = 0;
    let mut locality_violations = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut lr = config.lr0;
        for chunk in order.chunks(config.batch_size) {
            lr = cosine_lr(step, last, config.lr0, config.lr_min);
            if spu {
                for (_, a) in model.adapters_mut() {
                    sample_active_rank(&mut sampler, a)?;
                }
            }
            let batch = train_set.select(chunk);
            let (loss, grads) = {
                let (loss, mut tape) = model.forward_loss(&batch.inputs, &batch.targets)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                (loss, tape.backward()?)
            };
            let check = spu && step % LOCALITY_CHECK_EVERY == 0;
            let before = check.then(|| inactive_regions(model));
            for &id in &ids {
                let mask = update_mask(model, id);
                let zero;
                let g = match grads.get(&id) {
                    Some(g) => g,
                    None => {
                        let p = model.param(id).expect("trainable ids exist");
                        zero = Matrix::zeros(p.rows(), p.cols());
                        &zero
                    }
                };
                let state = states.get_mut(&id).expect("state per trainable id");
                let p = model.param_mut(id).expect("trainable ids exist");
                adamw_step(p, g, state, lr, &opt, mask, !id.is_norm())?;
            }
            if let Some(before) = before {
                locality_checks += 1;
                if !bits_equal(&before, &inactive_regions(model)) {
                    locality_violations += 1;
                }
            }
            steps.push(StepRecord { step, loss, lr });
            step += 1;
        }
        set_full_rank(model);
        let (train_loss, _) = evaluate(model, train_set)?;
        if !train_loss.is_finite() {
            // parameters blew up on the epoch's last update
            return Err(Error::NonFiniteLoss { step: step - 1 });
        }
        let (_, val_metric) = evaluate(model, val_set)?;
        let test_metric = test_set.map(|t| evaluate(model, t).map(|r| r.1)).transpose()?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            test_metric,
            lr,
        });
        stable_ranks.push(rank_row(model, &keys)?);
        if best.as_ref().is_none_or(|(_, v, _)| val_metric > *v) {
            best = Some((epoch, val_metric, model.clone()));
        }
    }

    let (selected_epoch, selected_val_metric, snapshot) = best.expect("epochs >= 1");
    *model = snapshot;
    let selected_test_metric = epochs[selected_epoch].test_metric;

    let mut er_sum = 0.0;
    for (&k, w0) in keys.iter().zip(&initial) {
        let delta = model.effective_weight(k).sub(w0)?;
        if !delta.is_zero() {
            er_sum += effective_rank(&delta, config.effective_rank_threshold)? as f64;
        }
    }

    Ok(RunReport {
        mode,
        config: config.clone(),
        epochs,
        steps,
        rank_keys: keys.clone(),
        stable_ranks,
        selected_epoch,
        selected_val_metric,
        selected_test_metric,
        total_steps,
        trainable_params,
        delta_effective_rank: er_sum / keys.len() as f64,
        spu_locality_checks: locality_checks,
        spu_locality_violations: locality_violations,
        wall_time: started.elapsed(),
    })
}

/// Hyper-parameters of source-domain pretraining (full fine-tuning from scratch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-2,
        }
    }
}

/// Trains every backbone tensor and the head on `data`; returns per-epoch mean step loss.
pub fn pretrain(model: &mut ToyTransformer, data: &Dataset, config: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidArgument(
            "pretrain needs epochs, batch_size >= 1 and lr > 0".into(),
        ));
    }
    model.clear_adapters();
    model.set_trainable(Mode::FullFt.trainable());
    let ids = model.trainable_ids();
    let opt = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let mut states: BTreeMap<ParamId, AdamState> = ids
        .iter()
        .map(|&id| {
            let m = model.param(id).expect("trainable ids exist");
            (id, AdamState::new(m.rows(), m.cols()))
        })
        .collect();
    let n = data.len();
    let total = n.div_ceil(config.batch_size) * config.epochs;
    let last = total.saturating_sub(1).max(1);
    let (mut rng, _) = run_rngs(seed ^ 0x7072_6574, false);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, last, config.lr, 0.0);
            let batch = data.select(chunk);
            let (loss, mut tape) = model.forward_loss(&batch.inputs, &batch.targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = tape.backward()?;
            for &id in &ids {
                if let Some(g) = grads.get(&id) {
                    let state = states.get_mut(&id).expect("state per trainable id");
                    let p = model.param_mut(id).expect("trainable ids exist");
                    adamw_step(p, g, state, lr, &opt, UpdateMask::All, !id.is_norm())?;
                }
            }
            sum += loss;
            count += 1;
            step += 1;
        }
        losses.push(sum / count as f64);
    }
    model.set_trainable(Trainable::FROZEN);
    Ok(losses)
}

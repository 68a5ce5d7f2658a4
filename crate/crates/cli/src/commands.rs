use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use srlora::bundle::{roles, WeightBundle};
use srlora::linalg::{effective_rank, frobenius_norm, median, pearson, spectral_norm, Matrix, PowerIteration};
use srlora::nn::{extract_feature_spectrum, ModelConfig, ToyTransformer};
use srlora::planner::{budget_report, plan as make_plan, RankPlan, Rounding, Strategy};
use srlora::synth::{generate, Split, TaskData, TaskSpec};
use srlora::trainer::{pretrain, rank_drift, train as run_training, Mode, PretrainConfig, RunReport, TrainConfig};

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_bundle(path: &Path) -> Result<WeightBundle> {
    WeightBundle::load(path).with_context(|| format!("loading bundle {}", path.display()))
}

/// `layer,role,d,k,frobenius,spectral,stable_rank,effective_rank` for every
/// 2-D non-adapter tensor, in manifest order. Zero tensors report zeros.
pub fn analyze_csv(bundle: &WeightBundle, threshold: f64) -> Result<String> {
    let targets: Vec<_> = bundle
        .tensors()
        .iter()
        .filter(|t| t.shape.len() == 2 && !roles::is_adapter(&t.role))
        .collect();
    let opts = PowerIteration::default();
    let rows: Vec<String> = targets
        .par_iter()
        .map(|t| -> Result<String> {
            let w = t.to_matrix()?;
            let layer = t.layer.map(|l| l.to_string()).unwrap_or_default();
            let (fro, spec, sr, er) = if w.is_zero() {
                (0.0, 0.0, 0.0, 0)
            } else {
                let fro = frobenius_norm(&w);
                let spec = spectral_norm(&w, &opts)?;
                let sr = srlora::linalg::stable_rank_with(&w, &opts)?;
                (fro, spec, sr, effective_rank(&w, threshold)?)
            };
            Ok(format!(
                "{layer},{},{},{},{fro},{spec},{sr},{er}\n",
                t.role,
                w.rows(),
                w.cols()
            ))
        })
        .enumerate()
        .map(|(i, r)| r.with_context(|| format!("tensor '{}'", targets[i].name)))
        .collect::<Result<_>>()?;
    let mut out = String::from("layer,role,d,k,frobenius,spectral,stable_rank,effective_rank\n");
    rows.iter().for_each(|r| out.push_str(r));
    Ok(out)
}

pub fn analyze(bundle: &Path, out: &Path, threshold: f64) -> Result<()> {
    let b = load_bundle(bundle)?;
    write_file(out, analyze_csv(&b, threshold)?)
}

pub fn budget_summary(plan: &RankPlan, backbone_total: u64) -> String {
    let report = budget_report(plan, backbone_total);
    let mut s = String::new();
    let _ = writeln!(s, "strategy: {}", plan.strategy);
    let _ = writeln!(s, "rounding: {}", plan.rounding);
    let _ = writeln!(s, "adapted_weights: {}", plan.entries.len());
    let _ = writeln!(s, "total_trainable: {}", report.total_trainable);
    let _ = writeln!(s, "backbone_total: {}", report.backbone_total);
    let _ = writeln!(s, "trainable_ratio: {:.4}%", 100.0 * report.trainable_ratio);
    let _ = writeln!(
        s,
        "trainable_ratio_without_head: {:.4}%",
        100.0 * report.trainable_ratio_without_head
    );
    let clamped: Vec<String> = report.clamped.iter().map(|k| k.to_string()).collect();
    let _ = writeln!(
        s,
        "clamped: {}",
        if clamped.is_empty() {
            "none".into()
        } else {
            clamped.join("; ")
        }
    );
    let _ = writeln!(
        s,
        "{:>5} {:>12} {:>6} {:>6} {:>6}",
        "layer", "trainable", "query", "value", "output"
    );
    for l in &report.per_layer {
        let r = |i: usize| l.ranks.get(i).map(|x| x.1.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{:>5} {:>12} {:>6} {:>6} {:>6}",
            l.layer,
            l.trainable,
            r(0),
            r(1),
            r(2)
        );
    }
    s
}

/// Writes the plan JSON and returns the printed budget summary.
pub fn plan(bundle: &Path, strategy: &str, rounding: &str, out: &Path) -> Result<String> {
    let strategy: Strategy = strategy.parse()?;
    let rounding: Rounding = rounding.parse()?;
    let b = load_bundle(bundle)?;
    let p = make_plan(&b, strategy, rounding)?;
    write_file(out, p.to_json())?;
    Ok(budget_summary(&p, b.backbone_total()))
}

/// Everything `train` needs; every section falls back to its defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rounding: Rounding,
    /// `null` skips pretraining and adapts the random initialization.
    pub pretrain: Option<PretrainConfig>,
    /// Extra modes trained from the same backbone for the comparison table.
    pub compare: Vec<Mode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rounding: Rounding::Ceil,
            pretrain: Some(PretrainConfig::default()),
            compare: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn apply_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    fn check(&self) -> Result<()> {
        for (field, m, t) in [
            ("input_dim", self.model.input_dim, self.task.input_dim),
            ("seq_len", self.model.seq_len, self.task.seq_len),
            ("num_classes", self.model.num_classes, self.task.num_classes),
        ] {
            if m != t {
                bail!("config mismatch: model.{field} = {m} but task.{field} = {t}");
            }
        }
        self.model.validate().context("model config")?;
        self.task.validate().context("task config")?;
        self.train.validate().context("train config")?;
        Ok(())
    }
}

struct ModeRun {
    report: RunReport,
    plan: Option<RankPlan>,
    model: ToyTransformer,
}

fn run_mode(backbone: &WeightBundle, task: &TaskData, cfg: &RunConfig, mode: Mode) -> Result<ModeRun> {
    let mut model = ToyTransformer::from_bundle(backbone)?;
    let plan = mode
        .strategy()
        .map(|s| make_plan(backbone, s, cfg.rounding))
        .transpose()
        .with_context(|| format!("planning for mode {mode}"))?;
    let tc = TrainConfig {
        mode,
        ..cfg.train.clone()
    };
    let report = run_training(&mut model, &task.train, &task.val, Some(&task.test), plan.as_ref(), &tc)
        .with_context(|| format!("training mode {mode}"))?;
    Ok(ModeRun { report, plan, model })
}

fn metric(r: &RunReport) -> f64 {
    r.selected_test_metric.unwrap_or(r.selected_val_metric)
}

fn comparison_row(r: &RunReport) -> Value {
    json!({
        "mode": r.mode,
        "trainable_params": r.trainable_params,
        "selected_epoch": r.selected_epoch,
        "val_metric": r.selected_val_metric,
        "test_metric": r.selected_test_metric,
        "final_train_loss": r.epochs.last().map(|e| e.train_loss),
        "delta_effective_rank": r.delta_effective_rank,
    })
}

/// `report.json`: config echo, final metrics, drift summary, comparison table.
pub fn report_json(
    cfg: &RunConfig,
    primary: &RunReport,
    backbone_total: u64,
    others: &[RunReport],
    pretrain_losses: &[f64],
) -> Value {
    let drift = rank_drift(primary);
    let maxes: Vec<f64> = drift.values().map(|d| d.max_abs_drift).collect();
    let per_key: Vec<Value> = drift
        .iter()
        .map(|(k, d)| json!({"layer": k.layer, "role": k.role, "max_abs_drift": d.max_abs_drift}))
        .collect();
    let baseline = others
        .iter()
        .find(|r| r.mode == Mode::FullFt && primary.mode != Mode::FullFt);
    let pair = baseline.map(|b| {
        json!({
            "delta_effective_rank": primary.delta_effective_rank,
            "metric_gain": metric(primary) - metric(b),
        })
    });
    let mut rows = vec![comparison_row(primary)];
    rows.extend(others.iter().map(comparison_row));
    json!({
        "mode": primary.mode,
        "config": cfg,
        "final": {
            "selected_epoch": primary.selected_epoch,
            "selected_val_metric": primary.selected_val_metric,
            "selected_test_metric": primary.selected_test_metric,
            "total_steps": primary.total_steps,
            "trainable_params": primary.trainable_params,
            "backbone_total": backbone_total,
            "trainable_ratio": primary.trainable_params as f64 / backbone_total as f64,
            "initial_train_loss": primary.epochs[0].train_loss,
            "final_train_loss": primary.epochs.last().map(|e| e.train_loss),
            "delta_effective_rank": primary.delta_effective_rank,
            "spu_locality_checks": primary.spu_locality_checks,
            "spu_locality_violations": primary.spu_locality_violations,
        },
        "pretrain_losses": pretrain_losses,
        "epochs": primary.epochs,
        "drift": {
            "median_max_abs_drift": median(&maxes).unwrap_or(0.0),
            "per_key": per_key,
        },
        "comparison": rows,
        "correlation_pair": pair,
    })
}

/// Runs the whole pipeline into `out_dir` and returns a printable summary.
pub fn train(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<String> {
    let text = std::fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing run config {}", config_path.display()))?;
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    cfg.check()?;
    let started = std::time::Instant::now();

    let task = generate(&cfg.task)?;
    let mut model = ToyTransformer::new(cfg.model.clone())?;
    let pretrain_losses = match &cfg.pretrain {
        Some(p) => pretrain(&mut model, &task.pretrain, p, cfg.model.seed).context("pretraining")?,
        None => Vec::new(),
    };
    let backbone = model.to_bundle();
    backbone.save(out_dir.join("backbone"))?;
    task.to_bundle().save(out_dir.join("data"))?;

    let primary = run_mode(&backbone, &task, &cfg, cfg.train.mode)?;
    let mut others = Vec::new();
    for &mode in &cfg.compare {
        others.push(run_mode(&backbone, &task, &cfg, mode)?.report);
    }

    if let Some(p) = &primary.plan {
        write_file(&out_dir.join("plan.json"), p.to_json())?;
    }
    primary.report.save_csvs(out_dir)?;
    primary.model.to_bundle().save(out_dir.join("model"))?;
    let report = report_json(
        &cfg,
        &primary.report,
        backbone.backbone_total(),
        &others,
        &pretrain_losses,
    );
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    write_file(&out_dir.join("report.json"), body)?;

    let r = &primary.report;
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}", r.mode);
    let _ = writeln!(s, "trainable_params: {}", r.trainable_params);
    let _ = writeln!(
        s,
        "train_loss: {} -> {}",
        r.epochs[0].train_loss,
        r.epochs.last().unwrap().train_loss
    );
    let _ = writeln!(
        s,
        "selected_epoch: {} (val {}, test {:?})",
        r.selected_epoch, r.selected_val_metric, r.selected_test_metric
    );
    for o in &others {
        let _ = writeln!(
            s,
            "compare {}: val {}, test {:?}",
            o.mode, o.selected_val_metric, o.selected_test_metric
        );
    }
    let _ = writeln!(s, "wall_time_s: {:.2}", started.elapsed().as_secs_f64());
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub report: PathBuf,
    pub delta_effective_rank: f64,
    pub metric_gain: f64,
}

/// Pearson coefficient over every matching report that carries a correlation pair.
pub fn correlate(pattern: &str, out: &Path) -> Result<f64> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .with_context(|| format!("bad glob '{pattern}'"))?
        .collect::<std::result::Result<_, _>>()?;
    paths.sort();
    let mut table = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let pair = &v["correlation_pair"];
        if let (Some(x), Some(y)) = (pair["delta_effective_rank"].as_f64(), pair["metric_gain"].as_f64()) {
            table.push(CorrelationRow {
                report: p,
                delta_effective_rank: x,
                metric_gain: y,
            });
        }
    }
    if table.len() < 2 {
        bail!(
            "need at least 2 reports with a correlation pair, found {} for '{pattern}'",
            table.len()
        );
    }
    let xs: Vec<f64> = table.iter().map(|r| r.delta_effective_rank).collect();
    let ys: Vec<f64> = table.iter().map(|r| r.metric_gain).collect();
    let r = pearson(&xs, &ys).with_context(|| format!("correlating {} reports", table.len()))?;
    let mut body = serde_json::to_string_pretty(&json!({"pearson": r, "n": table.len(), "table": table}))?;
    body.push('\n');
    write_file(out, body)?;
    Ok(r)
}

/// `rank,singular_value,relative,above_threshold`; returns the count above.
pub fn spectrum_csv(model: &ToyTransformer, inputs: &[Matrix], threshold: f64) -> Result<(String, usize)> {
    let s = extract_feature_spectrum(model, inputs, threshold)?;
    let top = s.singular_values.first().copied().unwrap_or(0.0);
    let mut out = String::from("rank,singular_value,relative,above_threshold\n");
    for (i, &v) in s.singular_values.iter().enumerate() {
        let rel = if top > 0.0 { v / top } else { 0.0 };
        let _ = writeln!(out, "{},{v},{rel},{}", i + 1, u8::from(i < s.above_threshold));
    }
    Ok((out, s.above_threshold))
}

pub fn spectrum(model_dir: &Path, dataset_dir: &Path, split: &str, out: &Path, threshold: f64) -> Result<usize> {
    let model = ToyTransformer::from_bundle(&load_bundle(model_dir)?)
        .with_context(|| format!("building model from {}", model_dir.display()))?;
    let data = TaskData::from_bundle(&load_bundle(dataset_dir)?)
        .with_context(|| format!("reading dataset {}", dataset_dir.display()))?;
    let cfg = model.config();
    if (data.spec.seq_len, data.spec.input_dim) != (cfg.seq_len, cfg.input_dim) {
        bail!(
            "shape mismatch: dataset {} holds {}x{} sequences, model {} expects {}x{}",
            dataset_dir.display(),
            data.spec.seq_len,
            data.spec.input_dim,
            model_dir.display(),
            cfg.seq_len,
            cfg.input_dim
        );
    }
    let split = Split::parse(split)?;
    let ds = data.split(split);
    if ds.is_empty() {
        return Err(anyhow!(
            "split '{}' of {} is empty",
            split.name(),
            dataset_dir.display()
        ));
    }
    let (csv, count) = spectrum_csv(&model, &ds.inputs, threshold)?;
    write_file(out, csv)?;
    Ok(count)
}

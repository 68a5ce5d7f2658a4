//! Per-layer adapter rank allocation.
//!
//! The stable strategy gives each adapted projection (query, value, output)
//! a rank equal to the rounded stable rank of its pretrained weight. The
//! fixed strategy assigns one rank everywhere and exists for ablations.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::trainable_params;
use crate::bundle::{roles, WeightBundle};
use crate::error::{Error, Result};
use crate::linalg::{effective_rank, stable_rank_with, Matrix, PowerIteration};

/// Stable-rank values within this distance of an integer snap to it before rounding.
pub const INTEGER_SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptedRole {
    Query,
    Value,
    Output,
}

impl AdaptedRole {
    pub const ALL: [AdaptedRole; 3] = [AdaptedRole::Query, AdaptedRole::Value, AdaptedRole::Output];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptedRole::Query => roles::QUERY,
            AdaptedRole::Value => roles::VALUE,
            AdaptedRole::Output => roles::OUTPUT,
        }
    }
}

impl fmt::Display for AdaptedRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptedRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(AdaptedRole::Query),
            "value" | "v" => Ok(AdaptedRole::Value),
            "output" | "o" => Ok(AdaptedRole::Output),
            other => Err(Error::InvalidArgument(format!("'{other}' is not an adapted role"))),
        }
    }
}

/// `(layer, role)` of an adapted projection; layers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightKey {
    pub layer: usize,
    pub role: AdaptedRole,
}

impl WeightKey {
    pub fn new(layer: usize, role: AdaptedRole) -> Self {
        Self { layer, role }
    }
}

impl fmt::Display for WeightKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} {}", self.layer, self.role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Ceil,
    Floor,
    Nearest,
}

impl Rounding {
    pub fn apply(&self, value: f64) -> usize {
        let snapped = if (value - value.round()).abs() <= INTEGER_SNAP_TOL {
            value.round()
        } else {
            value
        };
        let r = match self {
            Rounding::Ceil => snapped.ceil(),
            Rounding::Floor => snapped.floor(),
            Rounding::Nearest => snapped.round(),
        };
        r.max(0.0) as usize
    }
}

impl FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ceil" => Ok(Rounding::Ceil),
            "floor" => Ok(Rounding::Floor),
            "nearest" => Ok(Rounding::Nearest),
            other => Err(Error::InvalidArgument(format!("unknown rounding mode '{other}'"))),
        }
    }
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rounding::Ceil => "ceil",
            Rounding::Floor => "floor",
            Rounding::Nearest => "nearest",
        })
    }
}

/// Allocation strategy; serializes as `"stable"` or `"fixed:R"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Stable,
    Fixed(usize),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Stable => f.write_str("stable"),
            Strategy::Fixed(r) => write!(f, "fixed:{r}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "stable" {
            return Ok(Strategy::Stable);
        }
        if let Some(r) = s.strip_prefix("fixed:") {
            let r: usize = r
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad fixed rank in '{s}'")))?;
            if r == 0 {
                return Err(Error::InvalidArgument("fixed rank must be >= 1".into()));
            }
            return Ok(Strategy::Fixed(r));
        }
        Err(Error::InvalidArgument(format!(
            "unknown strategy '{s}' (expected 'stable' or 'fixed:R')"
        )))
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub role: AdaptedRole,
    pub d: usize,
    pub k: usize,
    /// `None` only in fixed plans over an all-zero weight.
    pub stable_rank: Option<f64>,
    pub rank: usize,
}

impl PlanEntry {
    pub fn key(&self) -> WeightKey {
        WeightKey::new(self.layer, self.role)
    }

    pub fn trainable(&self) -> usize {
        trainable_params(self.d, self.k, self.rank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub strategy: Strategy,
    pub rounding: Rounding,
    pub backbone_total: u64,
    pub entries: Vec<PlanEntry>,
    pub total_trainable: u64,
    pub trainable_ratio: f64,
    /// Entries whose requested rank was clamped into `[1, min(d, k)]`.
    #[serde(skip)]
    pub clamped: Vec<WeightKey>,
    /// Classifier element count in the source bundle (0 when absent).
    #[serde(skip)]
    pub head_total: u64,
}

impl RankPlan {
    pub fn entry(&self, key: WeightKey) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.key() == key)
    }

    pub fn rank_of(&self, key: WeightKey) -> Option<usize> {
        self.entry(key).map(|e| e.rank)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }

    fn finish(
        strategy: Strategy,
        rounding: Rounding,
        bundle: &WeightBundle,
        entries: Vec<PlanEntry>,
        clamped: Vec<WeightKey>,
    ) -> Self {
        let backbone_total = bundle.backbone_total();
        let total_trainable = entries.iter().map(|e| e.trainable() as u64).sum::<u64>();
        let head_total = bundle
            .get(None, roles::CLASSIFIER)
            .map(|t| t.numel() as u64)
            .unwrap_or(0);
        RankPlan {
            strategy,
            rounding,
            backbone_total,
            trainable_ratio: ratio(total_trainable, backbone_total),
            entries,
            total_trainable,
            clamped,
            head_total,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Collects every adapted weight of layers `1..=L`, in (layer, role) order.
pub fn adapted_weights(bundle: &WeightBundle) -> Result<Vec<(WeightKey, Matrix)>> {
    let layers = bundle
        .tensors()
        .iter()
        .filter(|t| !roles::is_adapter(&t.role))
        .filter(|t| AdaptedRole::from_str(&t.role).is_ok())
        .filter_map(|t| t.layer)
        .max()
        .unwrap_or(0);
    let mut out = Vec::with_capacity(3 * layers);
    for layer in 1..=layers {
        for role in AdaptedRole::ALL {
            let key = WeightKey::new(layer, role);
            let t = bundle
                .get(Some(layer), role.as_str())
                .ok_or_else(|| Error::MissingWeight(key.to_string()))?;
            out.push((key, t.to_matrix()?));
        }
    }
    Ok(out)
}

fn clamp_rank(requested: usize, d: usize, k: usize) -> (usize, bool) {
    let hi = d.min(k);
    let r = requested.clamp(1, hi);
    (r, r != requested)
}

pub fn plan_stable(bundle: &WeightBundle, rounding: Rounding) -> Result<RankPlan> {
    plan_stable_with(bundle, rounding, &PowerIteration::default())
}

pub fn plan_stable_with(bundle: &WeightBundle, rounding: Rounding, opts: &PowerIteration) -> Result<RankPlan> {
    let weights = adapted_weights(bundle)?;
    let ranks: Vec<f64> = weights
        .par_iter()
        .map(|(_, w)| stable_rank_with(w, opts))
        .collect::<Result<_>>()?;
    let mut entries = Vec::new();
    let mut clamped = Vec::new();
    for ((key, w), sr) in weights.into_iter().zip(ranks) {
        let (rank, was_clamped) = clamp_rank(rounding.apply(sr), w.rows(), w.cols());
        if was_clamped {
            clamped.push(key);
        }
        entries.push(PlanEntry {
            layer: key.layer,
            role: key.role,
            d: w.rows(),
            k: w.cols(),
            stable_rank: Some(sr),
            rank,
        });
    }
    Ok(RankPlan::finish(Strategy::Stable, rounding, bundle, entries, clamped))
}

pub fn plan_fixed(bundle: &WeightBundle, rank: usize) -> Result<RankPlan> {
    if rank == 0 {
        return Err(Error::InvalidArgument("fixed rank must be >= 1".into()));
    }
    let opts = PowerIteration::default();
    let weights = adapted_weights(bundle)?;
    let ranks: Vec<Option<f64>> = weights
        .par_iter()
        .map(|(_, w)| match stable_rank_with(w, &opts) {
            Ok(v) => Ok(Some(v)),
            Err(Error::ZeroMatrix) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::new();
    let mut clamped = Vec::new();
    for ((key, w), sr) in weights.into_iter().zip(ranks) {
        let (r, was_clamped) = clamp_rank(rank, w.rows(), w.cols());
        if was_clamped {
            clamped.push(key);
        }
        entries.push(PlanEntry {
            layer: key.layer,
            role: key.role,
            d: w.rows(),
            k: w.cols(),
            stable_rank: sr,
            rank: r,
        });
    }
    Ok(RankPlan::finish(
        Strategy::Fixed(rank),
        Rounding::Ceil,
        bundle,
        entries,
        clamped,
    ))
}

pub fn plan(bundle: &WeightBundle, strategy: Strategy, rounding: Rounding) -> Result<RankPlan> {
    match strategy {
        Strategy::Stable => plan_stable(bundle, rounding),
        Strategy::Fixed(r) => plan_fixed(bundle, r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBudget {
    pub layer: usize,
    pub trainable: u64,
    pub ranks: Vec<(AdaptedRole, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub strategy: Strategy,
    pub total_trainable: u64,
    pub backbone_total: u64,
    pub trainable_ratio: f64,
    /// Same ratio with the classifier head removed from the denominator.
    pub trainable_ratio_without_head: f64,
    pub per_layer: Vec<LayerBudget>,
    pub clamped: Vec<WeightKey>,
}

impl BudgetReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.trainable_ratio
    }
}

pub fn budget_report(plan: &RankPlan, backbone_total: u64) -> BudgetReport {
    let mut per_layer: Vec<LayerBudget> = Vec::new();
    for e in &plan.entries {
        match per_layer.last_mut() {
            Some(lb) if lb.layer == e.layer => {
                lb.trainable += e.trainable() as u64;
                lb.ranks.push((e.role, e.rank));
            }
            _ => per_layer.push(LayerBudget {
                layer: e.layer,
                trainable: e.trainable() as u64,
                ranks: vec![(e.role, e.rank)],
            }),
        }
    }
    BudgetReport {
        strategy: plan.strategy,
        total_trainable: plan.total_trainable,
        backbone_total,
        trainable_ratio: ratio(plan.total_trainable, backbone_total),
        trainable_ratio_without_head: ratio(plan.total_trainable, backbone_total.saturating_sub(plan.head_total)),
        per_layer,
        clamped: plan.clamped.clone(),
    }
}

/// Checks `srank(W) ≤ rank(W)` for every planned weight, with numerical
/// rank taken at a relative threshold of `1e-12`.
pub fn verify_lower_bound(plan: &RankPlan, bundle: &WeightBundle) -> Result<bool> {
    for e in &plan.entries {
        let key = e.key();
        let w = bundle
            .get(Some(e.layer), e.role.as_str())
            .ok_or_else(|| Error::MissingWeight(key.to_string()))?
            .to_matrix()?;
        let Some(sr) = e.stable_rank else { continue };
        let rank = effective_rank(&w, 1e-12)?;
        if sr > rank as f64 + 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

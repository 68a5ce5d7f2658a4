use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, LoraAdapter};
use crate::bundle::{roles, Tensor, WeightBundle};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::planner::{AdaptedRole, RankPlan, WeightKey};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub seq_len: usize,
    /// Width of the synthetic token features fed to the embedding.
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 64,
            heads: 4,
            mlp_dim: 128,
            seq_len: 16,
            input_dim: 16,
            num_classes: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.model_dim,
            self.heads,
            self.mlp_dim,
            self.seq_len,
            self.input_dim,
            self.num_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must all be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Per-layer tensor slots of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockParam {
    Query,
    Key,
    Value,
    Output,
    MlpIn,
    MlpOut,
    /// Rows: attention gain, attention bias, MLP gain, MLP bias.
    Norm,
}

impl BlockParam {
    pub const ALL: [BlockParam; 7] = [
        BlockParam::Query,
        BlockParam::Key,
        BlockParam::Value,
        BlockParam::Output,
        BlockParam::MlpIn,
        BlockParam::MlpOut,
        BlockParam::Norm,
    ];

    pub fn role(&self) -> &'static str {
        match self {
            BlockParam::Query => roles::QUERY,
            BlockParam::Key => roles::KEY,
            BlockParam::Value => roles::VALUE,
            BlockParam::Output => roles::OUTPUT,
            BlockParam::MlpIn => roles::MLP_IN,
            BlockParam::MlpOut => roles::MLP_OUT,
            BlockParam::Norm => roles::NORM,
        }
    }
}

/// Identifies one trainable tensor. Layers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Embed,
    Block(usize, BlockParam),
    FinalNorm,
    Classifier,
    LoraA(WeightKey),
    LoraB(WeightKey),
}

impl ParamId {
    pub fn is_backbone(&self) -> bool {
        matches!(self, ParamId::Embed | ParamId::Block(..) | ParamId::FinalNorm)
    }

    pub fn is_adapter(&self) -> bool {
        matches!(self, ParamId::LoraA(_) | ParamId::LoraB(_))
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, ParamId::FinalNorm | ParamId::Block(_, BlockParam::Norm))
    }
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::Embed => f.write_str("embed"),
            ParamId::Block(l, p) => write!(f, "blocks.{l}.{}", p.role()),
            ParamId::FinalNorm => f.write_str("final_norm"),
            ParamId::Classifier => f.write_str("classifier"),
            ParamId::LoraA(k) => write!(f, "blocks.{}.{}.lora_a", k.layer, k.role),
            ParamId::LoraB(k) => write!(f, "blocks.{}.{}.lora_b", k.layer, k.role),
        }
    }
}

/// Which tensor groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub classifier: bool,
    pub adapters: bool,
}

impl Trainable {
    pub const FROZEN: Trainable = Trainable {
        backbone: false,
        classifier: false,
        adapters: false,
    };

    pub fn includes(&self, id: &ParamId) -> bool {
        match id {
            ParamId::Classifier => self.classifier,
            id if id.is_adapter() => self.adapters,
            _ => self.backbone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    /// `mlp_dim × d`.
    pub mlp_in: Matrix,
    /// `d × mlp_dim`.
    pub mlp_out: Matrix,
    /// `4 × d`: attention gain/bias then MLP gain/bias.
    pub norm: Matrix,
}

impl Block {
    pub fn param(&self, p: BlockParam) -> &Matrix {
        match p {
            BlockParam::Query => &self.query,
            BlockParam::Key => &self.key,
            BlockParam::Value => &self.value,
            BlockParam::Output => &self.output,
            BlockParam::MlpIn => &self.mlp_in,
            BlockParam::MlpOut => &self.mlp_out,
            BlockParam::Norm => &self.norm,
        }
    }

    pub fn param_mut(&mut self, p: BlockParam) -> &mut Matrix {
        match p {
            BlockParam::Query => &mut self.query,
            BlockParam::Key => &mut self.key,
            BlockParam::Value => &mut self.value,
            BlockParam::Output => &mut self.output,
            BlockParam::MlpIn => &mut self.mlp_in,
            BlockParam::MlpOut => &mut self.mlp_out,
            BlockParam::Norm => &mut self.norm,
        }
    }

    pub fn adapted(&self, role: AdaptedRole) -> &Matrix {
        match role {
            AdaptedRole::Query => &self.query,
            AdaptedRole::Value => &self.value,
            AdaptedRole::Output => &self.output,
        }
    }

    fn adapted_mut(&mut self, role: AdaptedRole) -> &mut Matrix {
        match role {
            AdaptedRole::Query => &mut self.query,
            AdaptedRole::Value => &mut self.value,
            AdaptedRole::Output => &mut self.output,
        }
    }
}

/// Pre-norm transformer encoder with mean pooling and a linear classifier.
///
/// Only query, value and output projections can carry adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub(crate) config: ModelConfig,
    /// `d × input_dim`.
    pub(crate) embed: Matrix,
    pub(crate) blocks: Vec<Block>,
    /// `2 × d`: gain, bias.
    pub(crate) final_norm: Matrix,
    /// `num_classes × d`.
    pub(crate) classifier: Matrix,
    pub(crate) adapters: BTreeMap<WeightKey, LoraAdapter>,
    pub(crate) trainable: Trainable,
}

fn scaled_normal(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, rng).scale(1.0 / (fan_in as f64).sqrt())
}

fn norm_init(pairs: usize, d: usize) -> Matrix {
    Matrix::from_fn(2 * pairs, d, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 })
}

/// Seed for the adapter at `key`, derived from a run seed.
pub fn adapter_seed(seed: u64, key: WeightKey) -> u64 {
    let role = key.role as u64;
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((key.layer as u64) << 8 | role)
}

impl ToyTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = scaled_normal(d, config.input_dim, config.input_dim, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| Block {
                query: scaled_normal(d, d, d, &mut rng),
                key: scaled_normal(d, d, d, &mut rng),
                value: scaled_normal(d, d, d, &mut rng),
                output: scaled_normal(d, d, d, &mut rng),
                mlp_in: scaled_normal(config.mlp_dim, d, d, &mut rng),
                mlp_out: scaled_normal(d, config.mlp_dim, config.mlp_dim, &mut rng),
                norm: norm_init(2, d),
            })
            .collect();
        let classifier = scaled_normal(config.num_classes, d, d, &mut rng);
        Ok(Self {
            config,
            embed,
            blocks,
            final_norm: norm_init(1, d),
            classifier,
            adapters: BTreeMap::new(),
            trainable: Trainable {
                backbone: true,
                classifier: true,
                adapters: true,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    pub fn set_trainable(&mut self, t: Trainable) {
        self.trainable = t;
    }

    pub fn block(&self, layer: usize) -> &Block {
        &self.blocks[layer - 1]
    }

    pub fn classifier(&self) -> &Matrix {
        &self.classifier
    }

    /// Replaces the classification head with a fresh seeded one.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.classifier = scaled_normal(num_classes, self.config.model_dim, self.config.model_dim, &mut rng);
        self.config.num_classes = num_classes;
    }

    pub fn adapters(&self) -> &BTreeMap<WeightKey, LoraAdapter> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = (&WeightKey, &mut LoraAdapter)> {
        self.adapters.iter_mut()
    }

    pub fn adapter(&self, key: WeightKey) -> Option<&LoraAdapter> {
        self.adapters.get(&key)
    }

    pub fn adapter_mut(&mut self, key: WeightKey) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(&key)
    }

    pub fn pretrained(&self, key: WeightKey) -> &Matrix {
        self.block(key.layer).adapted(key.role)
    }

    /// `W₀ + B·A` for an adapted key (or `W₀` when no adapter is attached).
    pub fn effective_weight(&self, key: WeightKey) -> Matrix {
        let w0 = self.pretrained(key);
        match self.adapters.get(&key) {
            Some(a) => a.merge(w0).expect("adapter shape matches its weight"),
            None => w0.clone(),
        }
    }

    pub fn attach_adapter(&mut self, key: WeightKey, adapter: LoraAdapter) -> Result<()> {
        if key.layer == 0 || key.layer > self.config.layers {
            return Err(Error::PlanMismatch(format!(
                "{key} is outside 1..={}",
                self.config.layers
            )));
        }
        let d = self.config.model_dim;
        if adapter.d() != d || adapter.k() != d {
            return Err(Error::PlanMismatch(format!(
                "{key}: adapter is {}x{}, weight is {d}x{d}",
                adapter.d(),
                adapter.k()
            )));
        }
        self.adapters.insert(key, adapter);
        Ok(())
    }

    /// Builds one fresh adapter per plan entry.
    pub fn attach_plan(&mut self, plan: &RankPlan, seed: u64) -> Result<()> {
        let d = self.config.model_dim;
        let expected = 3 * self.config.layers;
        if plan.entries.len() != expected {
            return Err(Error::PlanMismatch(format!(
                "plan has {} entries, model has {expected} adapted weights",
                plan.entries.len()
            )));
        }
        for e in &plan.entries {
            if e.d != d || e.k != d {
                return Err(Error::PlanMismatch(format!(
                    "{}: plan expects {}x{}, model weight is {d}x{d}",
                    e.key(),
                    e.d,
                    e.k
                )));
            }
            let adapter = init_adapter(d, d, e.rank, adapter_seed(seed, e.key()))?;
            self.attach_adapter(e.key(), adapter)?;
        }
        Ok(())
    }

    pub fn clear_adapters(&mut self) {
        self.adapters.clear();
    }

    /// Folds every adapter into its base weight at full rank and drops it.
    pub fn merge_adapters(&mut self) {
        let adapters = std::mem::take(&mut self.adapters);
        for (key, a) in adapters {
            let w = self.blocks[key.layer - 1].adapted_mut(key.role);
            *w = a.merge(w).expect("adapter shape matches its weight");
        }
    }

    /// Every tensor id of the model, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Embed];
        for l in 1..=self.config.layers {
            ids.extend(BlockParam::ALL.iter().map(|&p| ParamId::Block(l, p)));
        }
        ids.push(ParamId::FinalNorm);
        ids.push(ParamId::Classifier);
        for key in self.adapters.keys() {
            ids.push(ParamId::LoraA(*key));
            ids.push(ParamId::LoraB(*key));
        }
        ids
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.param_ids()
            .into_iter()
            .filter(|id| self.trainable.includes(id))
            .collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        match id {
            ParamId::Embed => Some(&self.embed),
            ParamId::Block(l, p) => self.blocks.get(l.checked_sub(1)?).map(|b| b.param(p)),
            ParamId::FinalNorm => Some(&self.final_norm),
            ParamId::Classifier => Some(&self.classifier),
            ParamId::LoraA(k) => self.adapters.get(&k).map(|a| a.a_factor()),
            ParamId::LoraB(k) => self.adapters.get(&k).map(|a| a.b_factor()),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        match id {
            ParamId::Embed => Some(&mut self.embed),
            ParamId::Block(l, p) => self.blocks.get_mut(l.checked_sub(1)?).map(|b| b.param_mut(p)),
            ParamId::FinalNorm => Some(&mut self.final_norm),
            ParamId::Classifier => Some(&mut self.classifier),
            ParamId::LoraA(k) => self.adapters.get_mut(&k).map(|a| a.a_factor_mut()),
            ParamId::LoraB(k) => self.adapters.get_mut(&k).map(|a| a.b_factor_mut()),
        }
    }

    pub fn num_params(&self, filter: impl Fn(&ParamId) -> bool) -> usize {
        self.param_ids()
            .into_iter()
            .filter(|id| filter(id))
            .map(|id| {
                let m = self.param(id).expect("listed ids exist");
                m.rows() * m.cols()
            })
            .sum()
    }

    /// Serializes weights (and adapters, if any) into a bundle.
    pub fn to_bundle(&self) -> WeightBundle {
        let mut b = WeightBundle::new();
        b.config = Some(serde_json::to_value(&self.config).expect("config serializes"));
        let mut push = |t: Tensor| b.push(t).expect("model tensor keys are unique");
        push(Tensor::from_matrix("embed", None, roles::EMBED, &self.embed));
        for (i, block) in self.blocks.iter().enumerate() {
            let l = i + 1;
            for p in BlockParam::ALL {
                push(Tensor::from_matrix(
                    format!("blocks.{l}.{}", p.role()),
                    Some(l),
                    p.role(),
                    block.param(p),
                ));
            }
        }
        push(Tensor::from_matrix("final_norm", None, roles::NORM, &self.final_norm));
        push(Tensor::from_matrix(
            "classifier",
            None,
            roles::CLASSIFIER,
            &self.classifier,
        ));
        for (key, a) in &self.adapters {
            let base = format!("blocks.{}.{}", key.layer, key.role);
            push(
                Tensor::from_matrix(format!("{base}.lora_a"), Some(key.layer), roles::LORA_A, a.a_factor())
                    .with_target(key.role.as_str()),
            );
            push(
                Tensor::from_matrix(format!("{base}.lora_b"), Some(key.layer), roles::LORA_B, a.b_factor())
                    .with_target(key.role.as_str()),
            );
        }
        b
    }

    /// Rebuilds a model from a bundle written by [`ToyTransformer::to_bundle`].
    pub fn from_bundle(bundle: &WeightBundle) -> Result<Self> {
        let config: ModelConfig = match &bundle.config {
            Some(v) => {
                serde_json::from_value(v.clone()).map_err(|e| Error::ManifestParse(format!("model config: {e}")))?
            }
            None => return Err(Error::ManifestParse("bundle has no model config".into())),
        };
        let mut model = ToyTransformer::new(config)?;
        let expect_shape = |id: ParamId, m: &Matrix, have: &Matrix| -> Result<()> {
            if m.shape() != have.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{id}: bundle holds {}x{}, config implies {}x{}",
                    m.rows(),
                    m.cols(),
                    have.rows(),
                    have.cols()
                )));
            }
            Ok(())
        };
        let sources: Vec<(ParamId, Option<usize>, &str)> = std::iter::once((ParamId::Embed, None, roles::EMBED))
            .chain((1..=model.config.layers).flat_map(|l| {
                BlockParam::ALL
                    .iter()
                    .map(move |&p| (ParamId::Block(l, p), Some(l), p.role()))
            }))
            .chain([
                (ParamId::FinalNorm, None, roles::NORM),
                (ParamId::Classifier, None, roles::CLASSIFIER),
            ])
            .collect();
        for (id, layer, role) in sources {
            let m = bundle.matrix(layer, role)?;
            let slot = model.param_mut(id).expect("fresh model has every backbone id");
            expect_shape(id, &m, slot)?;
            *slot = m;
        }
        for l in 1..=model.config.layers {
            for role in AdaptedRole::ALL {
                let a = bundle.get_adapter(l, roles::LORA_A, role.as_str());
                let b = bundle.get_adapter(l, roles::LORA_B, role.as_str());
                match (a, b) {
                    (Some(a), Some(b)) => {
                        let adapter = LoraAdapter::from_factors(b.to_matrix()?, a.to_matrix()?)?;
                        model.attach_adapter(WeightKey::new(l, role), adapter)?;
                    }
                    (None, None) => {}
                    _ => {
                        return Err(Error::MissingWeight(format!(
                            "layer {l} {role} adapter is missing one factor"
                        )))
                    }
                }
            }
        }
        Ok(model)
    }
}

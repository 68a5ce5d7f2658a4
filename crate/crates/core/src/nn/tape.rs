//! Forward pass with recorded intermediates and the matching reverse pass.

use std::collections::BTreeMap;

use super::model::{BlockParam, ParamId, ToyTransformer};
use super::ops::{
    col_block, gelu, gelu_grad, layer_norm, layer_norm_backward, set_col_block, sigmoid, softmax, softmax_rows,
    softplus, LnCache,
};
use crate::adapter::LoraAdapter;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::planner::{AdaptedRole, WeightKey};

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One class index per example (softmax cross-entropy).
    Classes(Vec<usize>),
    /// `batch × num_classes` 0/1 matrix (per-label sigmoid cross-entropy).
    MultiLabel(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::MultiLabel(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `batch × num_classes`.
    pub logits: Matrix,
    /// Pooled pre-classifier features, `batch × d`.
    pub features: Matrix,
    /// Attention probabilities, ordered by sample, then layer, then head.
    pub attention: Vec<Matrix>,
}

/// Gradients keyed by trainable tensor.
pub type Gradients = BTreeMap<ParamId, Matrix>;

struct ProjCache {
    active: usize,
    /// `x · A_sᵀ`, present when the adapter contributes.
    low: Option<Matrix>,
}

struct LayerCache {
    ln1: LnCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    q_proj: ProjCache,
    v_proj: ProjCache,
    probs: Vec<Matrix>,
    ctx: Matrix,
    o_proj: ProjCache,
    ln2: LnCache,
    m: Matrix,
    u: Matrix,
    g: Matrix,
}

struct SampleCache {
    x: Matrix,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    features: Vec<f64>,
}

/// Record of one forward pass plus loss, consumed by [`GradTape::backward`].
pub struct GradTape<'m> {
    model: &'m ToyTransformer,
    samples: Option<Vec<SampleCache>>,
    dlogits: Vec<Vec<f64>>,
    loss: f64,
}

fn project(x: &Matrix, w: &Matrix, adapter: Option<&LoraAdapter>) -> (Matrix, ProjCache) {
    let mut y = x.matmul_nt(w).expect("projection shapes agree");
    let mut cache = ProjCache { active: 0, low: None };
    if let Some(ad) = adapter {
        let s = ad.active_rank();
        if s > 0 {
            let low = x.matmul_nt(&ad.active_a()).expect("adapter shapes agree");
            y.add_assign(&low.matmul_nt(&ad.active_b()).expect("adapter shapes agree"))
                .expect("adapter output shape");
            cache = ProjCache {
                active: s,
                low: Some(low),
            };
        }
    }
    (y, cache)
}

impl ToyTransformer {
    fn check_input(&self, x: &Matrix) -> Result<()> {
        let want = (self.config.seq_len, self.config.input_dim);
        if x.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "input is {}x{}, model expects {}x{}",
                x.rows(),
                x.cols(),
                want.0,
                want.1
            )));
        }
        Ok(())
    }

    fn forward_sample(&self, x: &Matrix) -> (Vec<f64>, SampleCache) {
        let cfg = &self.config;
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x.matmul_nt(&self.embed).expect("embed shape");
        let mut layers = Vec::with_capacity(cfg.layers);
        for (i, blk) in self.blocks.iter().enumerate() {
            let l = i + 1;
            let ad = |r| self.adapters.get(&WeightKey::new(l, r));
            let (a, ln1) = layer_norm(&h, blk.norm.row(0), blk.norm.row(1));
            let (q, q_proj) = project(&a, &blk.query, ad(AdaptedRole::Query));
            let k = a.matmul_nt(&blk.key).expect("key shape");
            let (v, v_proj) = project(&a, &blk.value, ad(AdaptedRole::Value));
            let mut ctx = Matrix::zeros(h.rows(), d);
            let mut probs = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let qh = col_block(&q, head * dh, dh);
                let kh = col_block(&k, head * dh, dh);
                let vh = col_block(&v, head * dh, dh);
                let mut s = qh.matmul_nt(&kh).expect("head shapes").scale(scale);
                softmax_rows(&mut s);
                set_col_block(&mut ctx, head * dh, &s.matmul(&vh).expect("head shapes"));
                probs.push(s);
            }
            let (o, o_proj) = project(&ctx, &blk.output, ad(AdaptedRole::Output));
            h.add_assign(&o).expect("residual shape");
            let (m, ln2) = layer_norm(&h, blk.norm.row(2), blk.norm.row(3));
            let u = m.matmul_nt(&blk.mlp_in).expect("mlp shape");
            let g = u.map(gelu);
            h.add_assign(&g.matmul_nt(&blk.mlp_out).expect("mlp shape"))
                .expect("residual shape");
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                q_proj,
                v_proj,
                probs,
                ctx,
                o_proj,
                ln2,
                m,
                u,
                g,
            });
        }
        let (z, ln_f) = layer_norm(&h, self.final_norm.row(0), self.final_norm.row(1));
        let features = z.mean_rows();
        let logits = self.classifier.matvec(&features);
        (
            logits,
            SampleCache {
                x: x.clone(),
                layers,
                ln_f,
                features,
            },
        )
    }

    /// Logits, pooled features and attention maps for a batch of token sequences.
    pub fn forward(&self, inputs: &[Matrix]) -> Result<ForwardOutput> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut logits = Matrix::zeros(inputs.len(), self.config.num_classes);
        let mut features = Matrix::zeros(inputs.len(), self.config.model_dim);
        let mut attention = Vec::new();
        for (i, x) in inputs.iter().enumerate() {
            self.check_input(x)?;
            let (lg, cache) = self.forward_sample(x);
            logits.row_mut(i).copy_from_slice(&lg);
            features.row_mut(i).copy_from_slice(&cache.features);
            for layer in cache.layers {
                attention.extend(layer.probs);
            }
        }
        Ok(ForwardOutput {
            logits,
            features,
            attention,
        })
    }

    /// Pooled features only.
    pub fn features(&self, inputs: &[Matrix]) -> Result<Matrix> {
        Ok(self.forward(inputs)?.features)
    }

    /// Mean loss over the batch together with a tape for the reverse pass.
    pub fn forward_loss(&self, inputs: &[Matrix], targets: &Targets) -> Result<(f64, GradTape<'_>)> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if targets.len() != inputs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let c = self.config.num_classes;
        let n = inputs.len() as f64;
        let mut loss = 0.0;
        let mut samples = Vec::with_capacity(inputs.len());
        let mut dlogits = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.iter().enumerate() {
            self.check_input(x)?;
            let (lg, cache) = self.forward_sample(x);
            let (l, dl) = match targets {
                Targets::Classes(ys) => {
                    let y = ys[i];
                    if y >= c {
                        return Err(Error::ShapeMismatch(format!("class {y} out of range 0..{c}")));
                    }
                    let p = softmax(&lg);
                    let mut dl = p.clone();
                    dl[y] -= 1.0;
                    (-p[y].max(f64::MIN_POSITIVE).ln(), dl)
                }
                Targets::MultiLabel(ys) => {
                    if ys.cols() != c {
                        return Err(Error::ShapeMismatch(format!(
                            "label matrix has {} columns, model has {c} classes",
                            ys.cols()
                        )));
                    }
                    let cf = c as f64;
                    let mut l = 0.0;
                    let mut dl = vec![0.0; c];
                    for j in 0..c {
                        let y = ys[(i, j)];
                        l += softplus(lg[j]) - y * lg[j];
                        dl[j] = (sigmoid(lg[j]) - y) / cf;
                    }
                    (l / cf, dl)
                }
            };
            loss += l / n;
            dlogits.push(dl.into_iter().map(|v| v / n).collect());
            samples.push(cache);
        }
        Ok((
            loss,
            GradTape {
                model: self,
                samples: Some(samples),
                dlogits,
                loss,
            },
        ))
    }
}

struct Accumulator<'a> {
    model: &'a ToyTransformer,
    grads: Gradients,
}

impl Accumulator<'_> {
    fn wants(&self, id: ParamId) -> bool {
        self.model.trainable.includes(&id) && self.model.param(id).is_some()
    }

    fn add(&mut self, id: ParamId, g: Matrix) {
        if !self.wants(id) {
            return;
        }
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    fn add_with(&mut self, id: ParamId, f: impl FnOnce() -> Matrix) {
        if self.wants(id) {
            self.add(id, f());
        }
    }

    fn add_norm(&mut self, id: ParamId, row: usize, values: &[f64]) {
        if !self.wants(id) {
            return;
        }
        let shape = self.model.param(id).expect("checked above").shape();
        let entry = self.grads.entry(id).or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        for (dst, v) in entry.row_mut(row).iter_mut().zip(values) {
            *dst += v;
        }
    }

    /// Reverse of [`project`]; returns the input gradient.
    fn project_back(&mut self, dy: &Matrix, x: &Matrix, w_id: ParamId, key: WeightKey, cache: &ProjCache) -> Matrix {
        let w = self.model.param(w_id).expect("block weight");
        self.add_with(w_id, || dy.matmul_tn(x).expect("grad shape"));
        let mut dx = dy.matmul(w).expect("grad shape");
        if let (Some(low), Some(ad)) = (&cache.low, self.model.adapters.get(&key)) {
            let s = cache.active;
            let b_s = ad.b_factor().leading_cols(s);
            let a_s = ad.a_factor().leading_rows(s);
            let dlow = dy.matmul(&b_s).expect("grad shape");
            if self.wants(ParamId::LoraB(key)) {
                let db_s = dy.matmul_tn(low).expect("grad shape");
                let mut db = Matrix::zeros(ad.d(), ad.rank());
                for i in 0..ad.d() {
                    db.row_mut(i)[..s].copy_from_slice(db_s.row(i));
                }
                self.add(ParamId::LoraB(key), db);
            }
            if self.wants(ParamId::LoraA(key)) {
                let da_s = dlow.matmul_tn(x).expect("grad shape");
                let mut da = Matrix::zeros(ad.rank(), ad.k());
                for i in 0..s {
                    da.row_mut(i).copy_from_slice(da_s.row(i));
                }
                self.add(ParamId::LoraA(key), da);
            }
            dx.add_assign(&dlow.matmul(&a_s).expect("grad shape"))
                .expect("grad shape");
        }
        dx
    }
}

impl GradTape<'_> {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Exact gradients of the recorded loss for every trainable tensor.
    /// A tape can be consumed once.
    pub fn backward(&mut self) -> Result<Gradients> {
        let samples = self.samples.take().ok_or(Error::TapeConsumed)?;
        let model = self.model;
        let cfg = &model.config;
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut acc = Accumulator {
            model,
            grads: Gradients::new(),
        };
        for (sample, dlogits) in samples.iter().zip(&self.dlogits) {
            acc.add_with(ParamId::Classifier, || Matrix::outer(dlogits, &sample.features));
            let dfeat = model.classifier.matvec_t(dlogits);
            let seq = sample.x.rows() as f64;
            let dz = Matrix::from_fn(sample.x.rows(), d, |_, j| dfeat[j] / seq);
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut dh_res = layer_norm_backward(&dz, model.final_norm.row(0), &sample.ln_f, &mut dgain, &mut dbias);
            acc.add_norm(ParamId::FinalNorm, 0, &dgain);
            acc.add_norm(ParamId::FinalNorm, 1, &dbias);

            for (i, (blk, c)) in model.blocks.iter().zip(&sample.layers).enumerate().rev() {
                let l = i + 1;
                let id = |p| ParamId::Block(l, p);

                // MLP branch
                let df = &dh_res;
                acc.add_with(id(BlockParam::MlpOut), || df.matmul_tn(&c.g).expect("grad shape"));
                let dg = df.matmul(&blk.mlp_out).expect("grad shape");
                let mut du = dg;
                for (v, &u) in du.as_mut_slice().iter_mut().zip(c.u.as_slice()) {
                    *v *= gelu_grad(u);
                }
                acc.add_with(id(BlockParam::MlpIn), || du.matmul_tn(&c.m).expect("grad shape"));
                let dm = du.matmul(&blk.mlp_in).expect("grad shape");
                let mut dg2 = vec![0.0; d];
                let mut db2 = vec![0.0; d];
                let dh_mid = layer_norm_backward(&dm, blk.norm.row(2), &c.ln2, &mut dg2, &mut db2);
                acc.add_norm(id(BlockParam::Norm), 2, &dg2);
                acc.add_norm(id(BlockParam::Norm), 3, &db2);
                dh_res.add_assign(&dh_mid).expect("grad shape");

                // attention branch
                let dctx = acc.project_back(
                    &dh_res,
                    &c.ctx,
                    id(BlockParam::Output),
                    WeightKey::new(l, AdaptedRole::Output),
                    &c.o_proj,
                );
                let rows = dctx.rows();
                let mut dq = Matrix::zeros(rows, d);
                let mut dk = Matrix::zeros(rows, d);
                let mut dv = Matrix::zeros(rows, d);
                for head in 0..cfg.heads {
                    let p = &c.probs[head];
                    let qh = col_block(&c.q, head * dh, dh);
                    let kh = col_block(&c.k, head * dh, dh);
                    let vh = col_block(&c.v, head * dh, dh);
                    let dctx_h = col_block(&dctx, head * dh, dh);
                    let dp = dctx_h.matmul_nt(&vh).expect("grad shape");
                    set_col_block(&mut dv, head * dh, &p.matmul_tn(&dctx_h).expect("grad shape"));
                    let mut ds = Matrix::zeros(rows, rows);
                    for r in 0..rows {
                        let pr = p.row(r);
                        let dpr = dp.row(r);
                        let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                        for (o, (&pv, &dpv)) in ds.row_mut(r).iter_mut().zip(pr.iter().zip(dpr)) {
                            *o = pv * (dpv - inner) * scale;
                        }
                    }
                    set_col_block(&mut dq, head * dh, &ds.matmul(&kh).expect("grad shape"));
                    set_col_block(&mut dk, head * dh, &ds.matmul_tn(&qh).expect("grad shape"));
                }
                let mut da = acc.project_back(
                    &dq,
                    &c.a,
                    id(BlockParam::Query),
                    WeightKey::new(l, AdaptedRole::Query),
                    &c.q_proj,
                );
                acc.add_with(id(BlockParam::Key), || dk.matmul_tn(&c.a).expect("grad shape"));
                da.add_assign(&dk.matmul(&blk.key).expect("grad shape"))
                    .expect("grad shape");
                let da_v = acc.project_back(
                    &dv,
                    &c.a,
                    id(BlockParam::Value),
                    WeightKey::new(l, AdaptedRole::Value),
                    &c.v_proj,
                );
                da.add_assign(&da_v).expect("grad shape");
                let mut dg1 = vec![0.0; d];
                let mut db1 = vec![0.0; d];
                let dh_in = layer_norm_backward(&da, blk.norm.row(0), &c.ln1, &mut dg1, &mut db1);
                acc.add_norm(id(BlockParam::Norm), 0, &dg1);
                acc.add_norm(id(BlockParam::Norm), 1, &db1);
                dh_res.add_assign(&dh_in).expect("grad shape");
            }
            acc.add_with(ParamId::Embed, || dh_res.matmul_tn(&sample.x).expect("grad shape"));
        }
        Ok(acc.grads)
    }
}

//! The dual conditions steering the denoiser.
//!
//! Two conditions are produced here: a per-point *semantic* feature field
//! from a small pretrained encoder, and a *local position* encoding of the
//! coordinate offset between each point and its neighbors. One set of
//! position-encoder parameters per resolution level is shared between the
//! conditional network and the denoising network, so both perceive point
//! positions identically; after pretraining, all condition parameters are
//! frozen.
//!
//! The built-in encoder is a stand-in behind [`SemanticBackbone`]: any map
//! from a cloud to per-point features can replace it without touching the
//! denoiser.

use std::rc::Rc;
use std::sync::Arc;

use crate::autodiff::{Graph, NodeId};
use crate::blocks::{dpn_graph, td_graph, tu_graph, DpnIds, DpnParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{IndexCache, LevelIndices, NeighborTable, PointCloud};
use crate::nn::{AdamW, Binder, Linear, LinearIds, Mlp2, Mlp2Ids, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Position condition
// ---------------------------------------------------------------------------

/// The position-condition map: a two-layer perceptron on coordinate
/// differences, `3 -> C -> C` with a ReLU between.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEncoder {
    pub mlp: Mlp2,
}

impl PosEncoder {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        PosEncoder {
            mlp: Mlp2::kaiming(3, c, c, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.mlp.l2.out_dim()
    }

    /// Evaluate on coordinate differences `[Q, K, 3]`.
    pub fn apply_plain(&self, diffs: &Tensor) -> Tensor {
        self.mlp.forward_plain(diffs)
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> PosEncoderIds {
        PosEncoderIds {
            mlp: self.mlp.bind(b),
        }
    }
}

impl Params for PosEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }
}

pub struct PosEncoderIds {
    pub mlp: Mlp2Ids,
}

impl PosEncoderIds {
    pub fn apply(&self, g: &mut Graph, diffs: NodeId) -> NodeId {
        self.mlp.apply(g, diffs)
    }
}

/// Per-neighbor position condition values aligned with a neighbor table.
#[derive(Debug, Clone)]
pub struct PositionCondition {
    values: Tensor,
}

impl PositionCondition {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Coordinate differences `ref[j] - query[i]` for every table entry.
pub fn coordinate_diffs(
    query: &[[f64; 3]],
    reference: &[[f64; 3]],
    table: &NeighborTable,
) -> Result<Tensor> {
    if table.query_count() != query.len() {
        return Err(Error::ShapeMismatch(format!(
            "table has {} rows for {} query points",
            table.query_count(),
            query.len()
        )));
    }
    if let Some(max) = table.max_index() {
        if max >= reference.len() {
            return Err(Error::InvalidArgument(format!(
                "neighbor index {max} out of range for {} reference points",
                reference.len()
            )));
        }
    }
    let k = table.k();
    let mut data = Vec::with_capacity(query.len() * k * 3);
    for (qi, qp) in query.iter().enumerate() {
        for &j in table.row(qi) {
            let rp = &reference[j];
            data.push(rp[0] - qp[0]);
            data.push(rp[1] - qp[1]);
            data.push(rp[2] - qp[2]);
        }
    }
    Ok(Tensor::from_vec(&[query.len(), k, 3], data))
}

/// Position condition over a self-neighborhood table: `P_ij = delta(I_j - I_i)`.
pub fn position_condition(
    positions: &[[f64; 3]],
    table: &NeighborTable,
    enc: &PosEncoder,
) -> Result<PositionCondition> {
    let diffs = coordinate_diffs(positions, positions, table)?;
    Ok(PositionCondition {
        values: enc.apply_plain(&diffs),
    })
}

/// Coordinate differences for a level's own block neighborhoods.
pub fn level_diffs(entry: &LevelIndices) -> Tensor {
    coordinate_diffs(
        entry.cloud.positions(),
        entry.cloud.positions(),
        &entry.block,
    )
    .expect("level entry is internally consistent")
}

// ---------------------------------------------------------------------------
// Conditional network
// ---------------------------------------------------------------------------

/// Everything the conditional network owns, including the position encoders
/// shared with the denoiser (one per resolution level of the full plan).
#[derive(Debug, Clone)]
pub struct ConditionParams {
    pub embed: Linear,
    pub stem_block: DpnParams,
    pub enc: Vec<CondEncLevel>,
    pub dec: Vec<Linear>,
    pub head: Linear,
    pub posenc: Arc<Vec<PosEncoder>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondEncLevel {
    pub td: Linear,
    pub block: DpnParams,
}

impl ConditionParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::from_seed(seed);
        let c0 = cfg.channels[0];
        let embed = Linear::kaiming(3 + cfg.feature_dim, c0, &mut rng);
        let stem_block = DpnParams::init(c0, &mut rng);
        let mut enc = Vec::new();
        for i in 1..=cfg.cond_levels {
            enc.push(CondEncLevel {
                td: Linear::kaiming(cfg.channels[i - 1], cfg.channels[i], &mut rng),
                block: DpnParams::init(cfg.channels[i], &mut rng),
            });
        }
        let mut dec = Vec::new();
        for i in (1..=cfg.cond_levels).rev() {
            dec.push(Linear::kaiming(cfg.channels[i], cfg.channels[i - 1], &mut rng));
        }
        let head = Linear::kaiming(c0, cfg.n_classes, &mut rng);
        let posenc = Arc::new(
            (0..=cfg.levels())
                .map(|i| PosEncoder::init(cfg.channels[i], &mut rng))
                .collect::<Vec<_>>(),
        );
        Ok(ConditionParams {
            embed,
            stem_block,
            enc,
            dec,
            head,
            posenc,
        })
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> CondIds {
        CondIds {
            embed: self.embed.bind(b),
            stem_block: self.stem_block.bind(b),
            enc: self
                .enc
                .iter()
                .map(|l| (l.td.bind(b), l.block.bind(b)))
                .collect(),
            dec: self.dec.iter().map(|l| l.bind(b)).collect(),
            head: self.head.bind(b),
            posenc: self.posenc.iter().map(|p| p.bind(b)).collect(),
        }
    }
}

impl Params for ConditionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.embed.visit(&format!("{prefix}.embed"), f);
        self.stem_block.visit(&format!("{prefix}.stem"), f);
        for (i, l) in self.enc.iter().enumerate() {
            l.td.visit(&format!("{prefix}.enc{}.td", i + 1), f);
            l.block.visit(&format!("{prefix}.enc{}.dpn", i + 1), f);
        }
        for (i, l) in self.dec.iter().enumerate() {
            l.visit(&format!("{prefix}.dec{}.tu", i + 1), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
        for (i, p) in self.posenc.iter().enumerate() {
            p.visit(&format!("{prefix}.pos{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.embed.visit_mut(&format!("{prefix}.embed"), f);
        self.stem_block.visit_mut(&format!("{prefix}.stem"), f);
        for (i, l) in self.enc.iter_mut().enumerate() {
            l.td.visit_mut(&format!("{prefix}.enc{}.td", i + 1), f);
            l.block.visit_mut(&format!("{prefix}.enc{}.dpn", i + 1), f);
        }
        for (i, l) in self.dec.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.dec{}.tu", i + 1), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
        let posenc = Arc::make_mut(&mut self.posenc);
        for (i, p) in posenc.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.pos{i}"), f);
        }
    }
}

pub struct CondIds {
    pub embed: LinearIds,
    pub stem_block: DpnIds,
    pub enc: Vec<(LinearIds, DpnIds)>,
    pub dec: Vec<LinearIds>,
    pub head: LinearIds,
    pub posenc: Vec<PosEncoderIds>,
}

fn encoder_input(cloud: &PointCloud, cfg: &ModelConfig) -> Result<Tensor> {
    let n = cloud.n_points();
    let width = 3 + cfg.feature_dim;
    let mut data = Vec::with_capacity(n * width);
    let feats = cloud.features();
    if cfg.feature_dim > 0 {
        match feats {
            Some(f) if f.last_dim() == cfg.feature_dim => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "configured feature width {} but cloud carries {:?}",
                    cfg.feature_dim,
                    feats.map(|f| f.shape().to_vec())
                )))
            }
        }
    }
    for (i, p) in cloud.positions().iter().enumerate() {
        data.extend_from_slice(p);
        if cfg.feature_dim > 0 {
            let f = feats.unwrap();
            data.extend_from_slice(&f.data()[i * cfg.feature_dim..(i + 1) * cfg.feature_dim]);
        }
    }
    Ok(Tensor::from_vec(&[n, width], data))
}

/// Build the conditional encoder graph; returns pre-head feature and logit
/// nodes at input resolution.
pub fn cond_forward_graph(
    g: &mut Graph,
    ids: &CondIds,
    cloud: &PointCloud,
    cache: &IndexCache,
    cfg: &ModelConfig,
) -> Result<(NodeId, NodeId)> {
    let input = encoder_input(cloud, cfg)?;
    let input = g.constant(input);
    let x0 = ids.embed.apply(g, input);

    let entry0 = cache.level(0, cloud, 1.0, cfg.k)?;
    let diffs0 = level_diffs(&entry0);
    let d0 = {
        let diffs = g.constant(diffs0);
        let p0 = ids.posenc[0].apply(g, diffs);
        dpn_graph(g, &ids.stem_block, x0, p0, &entry0.block)
    };

    let mut skips = vec![d0];
    let mut entries = vec![entry0];
    let mut cur = d0;
    for i in 1..=cfg.cond_levels {
        let parent = &entries[i - 1].cloud;
        let entry = cache.level(i, parent, cfg.ratios[i - 1], cfg.k)?;
        let (td_ids, block_ids) = &ids.enc[i - 1];
        let pooled = td_graph(g, td_ids, cur, &entry);
        let diffs = g.constant(level_diffs(&entry));
        let p = ids.posenc[i].apply(g, diffs);
        cur = dpn_graph(g, block_ids, pooled, p, &entry.block);
        skips.push(cur);
        entries.push(entry);
    }

    for (di, i) in (1..=cfg.cond_levels).rev().enumerate() {
        let stencil = Rc::new(
            entries[i]
                .interp
                .clone()
                .expect("levels above 0 carry interpolation data"),
        );
        cur = tu_graph(g, &ids.dec[di], cur, stencil, skips[i - 1]);
    }

    let logits = ids.head.apply(g, cur);
    Ok((cur, logits))
}

/// Deterministic per-point semantic features (pre-head) at input resolution.
pub fn encode_semantic(
    cloud: &PointCloud,
    params: &ConditionParams,
    cache: &IndexCache,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let ids = params.bind(&mut b);
    let (features, _) = cond_forward_graph(&mut g, &ids, cloud, cache, cfg)?;
    Ok(g.value(features).clone())
}

/// Where a bundle's semantic field came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    BuiltIn,
    External,
}

/// The dual conditions handed to the denoiser: a semantic field plus the
/// shared position encoders (one per resolution level).
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub semantic: Tensor,
    pub posenc: Arc<Vec<PosEncoder>>,
    pub source: ConditionSource,
}

impl ConditionBundle {
    pub fn n_points(&self) -> usize {
        self.semantic.shape()[0]
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic.shape()[1]
    }
}

/// Normalize each point's semantic vector to unit RMS. The raw encoder
/// features grow large during pretraining (cross-entropy pushes logits
/// apart); fed to the denoiser unscaled they drown the noisy-label signal
/// the denoiser exists to read.
pub fn normalize_semantic(semantic: &Tensor) -> Tensor {
    let c = semantic.last_dim();
    let mut out = semantic.clone();
    for row in 0..semantic.shape()[0] {
        let slice = &mut out.data_mut()[row * c..(row + 1) * c];
        let ms = slice.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for v in slice.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Build the bundle from the built-in encoder. With `use_logits` set the
/// semantic field is the post-head logits instead of pre-head features.
/// Either field is RMS-normalized per point.
pub fn condition_bundle(
    cloud: &PointCloud,
    params: &ConditionParams,
    cache: &IndexCache,
    cfg: &ModelConfig,
) -> Result<ConditionBundle> {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let ids = params.bind(&mut b);
    let (features, logits) = cond_forward_graph(&mut g, &ids, cloud, cache, cfg)?;
    let semantic = if cfg.use_logits {
        g.value(logits).clone()
    } else {
        g.value(features).clone()
    };
    Ok(ConditionBundle {
        semantic: normalize_semantic(&semantic),
        posenc: Arc::clone(&params.posenc),
        source: ConditionSource::BuiltIn,
    })
}

/// Any map from a cloud to per-point semantic features can stand in for the
/// built-in encoder.
pub trait SemanticBackbone {
    fn encode(&self, cloud: &PointCloud) -> Result<Tensor>;
}

/// Bundle built from an external backbone, still sharing the given position
/// encoders with the denoiser.
pub fn condition_bundle_external(
    cloud: &PointCloud,
    backbone: &dyn SemanticBackbone,
    posenc: Arc<Vec<PosEncoder>>,
) -> Result<ConditionBundle> {
    let semantic = backbone.encode(cloud)?;
    if semantic.rank() != 2 || semantic.shape()[0] != cloud.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "backbone produced {:?} for {} points",
            semantic.shape(),
            cloud.n_points()
        )));
    }
    Ok(ConditionBundle {
        semantic,
        posenc,
        source: ConditionSource::External,
    })
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 3e-3,
            weight_decay: 0.0,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// Final argmax accuracy over the training set.
    pub train_accuracy: f64,
}

/// Supervised segmentation fit of the built-in encoder with its linear class
/// head; the head is discarded at conditioning time. `epochs = 0` leaves the
/// parameters untouched and just reports accuracy.
pub fn pretrain_condition(
    dataset: &[(PointCloud, Vec<usize>)],
    params: &mut ConditionParams,
    cfg: &ModelConfig,
    pcfg: &PretrainConfig,
    cache: &IndexCache,
) -> Result<PretrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("pretraining dataset"));
    }
    for (cloud, labels) in dataset {
        if cloud.n_points() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.n_points()
            )));
        }
        if labels.iter().any(|&l| l >= cfg.n_classes) {
            return Err(Error::InvalidArgument("label out of class range".into()));
        }
    }
    let mut opt = AdamW::new(pcfg.lr, pcfg.weight_decay);
    let mut epoch_losses = Vec::with_capacity(pcfg.epochs);
    for _ in 0..pcfg.epochs {
        let mut epoch_loss = 0.0;
        for (cloud, labels) in dataset {
            let mut g = Graph::new();
            let mut b = Binder::new(&mut g, true);
            let ids = params.bind(&mut b);
            let leaves = b.into_leaves();
            let (_, logits) = cond_forward_graph(&mut g, &ids, cloud, cache, cfg)?;
            let loss = g.cross_entropy(logits, Rc::new(labels.clone()));
            epoch_loss += g.value(loss).item();
            let mut grads = g.backward(loss);
            opt.begin_step();
            let mut idx = 0;
            params.visit_mut("", &mut |_, t| {
                if let Some(grad) = grads.take(leaves[idx]) {
                    opt.update_one(idx, t, &grad);
                }
                idx += 1;
            });
        }
        epoch_losses.push(epoch_loss / dataset.len() as f64);
    }

    // Final accuracy with the trained parameters.
    let mut correct = 0usize;
    let mut total = 0usize;
    for (cloud, labels) in dataset {
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, false);
        let ids = params.bind(&mut b);
        let (_, logits) = cond_forward_graph(&mut g, &ids, cloud, cache, cfg)?;
        let lv = g.value(logits);
        let m = cfg.n_classes;
        for (i, &want) in labels.iter().enumerate() {
            let row = &lv.data()[i * m..(i + 1) * m];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == want {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(PretrainReport {
        epoch_losses,
        train_accuracy: correct as f64 / total as f64,
    })
}

//! The denoising U-Net and the reverse-diffusion sampler.
//!
//! One noisy-label-embedding stem, `L` encoder levels (the last carries the
//! frequency transformer, the rest the cheap PointNet block), `L` decoder
//! levels mirroring them (frequency transformer first), and a linear noise
//! head. Every level adds a projected sinusoidal time embedding and reads its
//! neighbor/sample indices from the shared cache, so blocks at the same
//! resolution never recompute a search.
//!
//! Sampling noise is keyed by point *position*, not point index: permuting a
//! cloud permutes its noise draws with it, which together with canonical
//! farthest-point starts makes the whole sampler permutation-equivariant.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

use crate::autodiff::{Graph, NodeId};
use crate::blocks::{
    dpn_graph, nle_graph, pft_graph, td_graph, tu_graph, DpnIds, DpnParams, NleIds, NleParams,
    PftIds, PftParams,
};
use crate::checkpoint;
use crate::condition::{level_diffs, ConditionBundle, ConditionParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{IndexCache, LevelIndices, PointCloud};
use crate::nn::{Binder, Linear, LinearIds, Params};
use crate::rng::{mix_seed, Rng};
use crate::schedule::{decode_labels, reverse_step, LabelEncoding, LabelField, NoiseSchedule};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Time embedding
// ---------------------------------------------------------------------------

/// Sinusoidal step embedding: interleaved `(sin(t w_k), cos(t w_k))` pairs
/// with `w_k = 10000^(-2k/dim)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "time embedding dimension {dim} must be positive and even"
        )));
    }
    let mut data = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let angle = t as f64 * omega;
        data.push(angle.sin());
        data.push(angle.cos());
    }
    Ok(Tensor::from_vec(&[dim], data))
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// A level's aggregation block: cheap PointNet or frequency transformer.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum BlockParams {
    Dpn(DpnParams),
    Pft(PftParams),
}

impl BlockParams {
    fn bind(&self, b: &mut Binder<'_>) -> BlockIds {
        match self {
            BlockParams::Dpn(p) => BlockIds::Dpn(p.bind(b)),
            BlockParams::Pft(p) => BlockIds::Pft(p.bind(b)),
        }
    }
}

impl Params for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            BlockParams::Dpn(p) => p.visit(&format!("{prefix}.dpn"), f),
            BlockParams::Pft(p) => p.visit(&format!("{prefix}.pft"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            BlockParams::Dpn(p) => p.visit_mut(&format!("{prefix}.dpn"), f),
            BlockParams::Pft(p) => p.visit_mut(&format!("{prefix}.pft"), f),
        }
    }
}

enum BlockIds {
    Dpn(DpnIds),
    Pft(PftIds),
}

impl BlockIds {
    /// Apply the block with a residual stream: the frequency transformer has
    /// its own residual; the PointNet block gets one here. The max-pooled
    /// block output alone is a neighborhood statistic, and the per-point
    /// noisy-label signal the head needs would only survive in the few
    /// channels where a point wins its own neighborhood max.
    fn apply(
        &self,
        g: &mut Graph,
        f: NodeId,
        pos_cond: NodeId,
        table: &crate::geometry::NeighborTable,
    ) -> NodeId {
        match self {
            BlockIds::Dpn(ids) => {
                let pooled = dpn_graph(g, ids, f, pos_cond, table);
                g.add(pooled, f)
            }
            BlockIds::Pft(ids) => pft_graph(g, ids, f, pos_cond, table),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncLevel {
    pub td: Linear,
    pub time: Linear,
    pub block: BlockParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecLevel {
    pub tu: Linear,
    pub time: Linear,
    pub block: BlockParams,
}

/// All denoising-network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseNetParams {
    pub stem: NleParams,
    pub stem_time: Linear,
    pub enc: Vec<EncLevel>,
    pub dec: Vec<DecLevel>,
    pub head: Linear,
}

impl DenoiseNetParams {
    pub fn bind(&self, b: &mut Binder<'_>) -> DenoiseIds {
        DenoiseIds {
            stem: self.stem.bind(b),
            stem_time: self.stem_time.bind(b),
            enc: self
                .enc
                .iter()
                .map(|l| (l.td.bind(b), l.time.bind(b), l.block.bind(b)))
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|l| (l.tu.bind(b), l.time.bind(b), l.block.bind(b)))
                .collect(),
            head: self.head.bind(b),
        }
    }
}

impl Params for DenoiseNetParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        self.stem_time.visit(&format!("{prefix}.stem_time"), f);
        for (i, l) in self.enc.iter().enumerate() {
            l.td.visit(&format!("{prefix}.enc{}.td", i + 1), f);
            l.time.visit(&format!("{prefix}.enc{}.time", i + 1), f);
            l.block.visit(&format!("{prefix}.enc{}", i + 1), f);
        }
        for (i, l) in self.dec.iter().enumerate() {
            l.tu.visit(&format!("{prefix}.dec{}.tu", i + 1), f);
            l.time.visit(&format!("{prefix}.dec{}.time", i + 1), f);
            l.block.visit(&format!("{prefix}.dec{}", i + 1), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        self.stem_time.visit_mut(&format!("{prefix}.stem_time"), f);
        for (i, l) in self.enc.iter_mut().enumerate() {
            l.td.visit_mut(&format!("{prefix}.enc{}.td", i + 1), f);
            l.time.visit_mut(&format!("{prefix}.enc{}.time", i + 1), f);
            l.block.visit_mut(&format!("{prefix}.enc{}", i + 1), f);
        }
        for (i, l) in self.dec.iter_mut().enumerate() {
            l.tu.visit_mut(&format!("{prefix}.dec{}.tu", i + 1), f);
            l.time.visit_mut(&format!("{prefix}.dec{}.time", i + 1), f);
            l.block.visit_mut(&format!("{prefix}.dec{}", i + 1), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

pub struct DenoiseIds {
    stem: NleIds,
    stem_time: LinearIds,
    enc: Vec<(LinearIds, LinearIds, BlockIds)>,
    dec: Vec<(LinearIds, LinearIds, BlockIds)>,
    head: LinearIds,
}

/// Kaiming initialization everywhere except the frequency-transformer output
/// projections and the noise head, which start at zero so a fresh network is
/// a near-zero noise predictor.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<DenoiseNetParams> {
    cfg.validate()?;
    let mut rng = Rng::from_seed(seed);
    let levels = cfg.levels();
    let c0 = cfg.channels[0];
    let stem = NleParams::init(cfg.n_classes, cfg.semantic_dim(), c0, &mut rng);
    let stem_time = Linear::kaiming(cfg.time_dim, c0, &mut rng);
    let mut enc = Vec::with_capacity(levels);
    for i in 1..=levels {
        let c = cfg.channels[i];
        enc.push(EncLevel {
            td: Linear::kaiming(cfg.channels[i - 1], c, &mut rng),
            time: Linear::kaiming(cfg.time_dim, c, &mut rng),
            block: if i == levels {
                BlockParams::Pft(PftParams::init(c, &mut rng))
            } else {
                BlockParams::Dpn(DpnParams::init(c, &mut rng))
            },
        });
    }
    let mut dec = Vec::with_capacity(levels);
    for step in 1..=levels {
        let level = levels - step;
        let c = cfg.channels[level];
        dec.push(DecLevel {
            tu: Linear::kaiming(cfg.channels[level + 1], c, &mut rng),
            time: Linear::kaiming(cfg.time_dim, c, &mut rng),
            block: if step == 1 {
                BlockParams::Pft(PftParams::init(c, &mut rng))
            } else {
                BlockParams::Dpn(DpnParams::init(c, &mut rng))
            },
        });
    }
    let head = Linear::zeros(c0, cfg.n_classes);
    Ok(DenoiseNetParams {
        stem,
        stem_time,
        enc,
        dec,
        head,
    })
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn resolution_chain(
    cloud: &PointCloud,
    cache: &IndexCache,
    cfg: &ModelConfig,
) -> Result<Vec<Arc<LevelIndices>>> {
    let mut entries = Vec::with_capacity(cfg.levels() + 1);
    entries.push(cache.level(0, cloud, 1.0, cfg.k)?);
    for i in 1..=cfg.levels() {
        let parent = entries[i - 1].cloud.clone();
        entries.push(cache.level(i, &parent, cfg.ratios[i - 1], cfg.k)?);
    }
    Ok(entries)
}

fn validate_bundle(bundle: &ConditionBundle, cloud: &PointCloud, cfg: &ModelConfig) -> Result<()> {
    if bundle.n_points() != cloud.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "bundle for {} points, cloud has {}",
            bundle.n_points(),
            cloud.n_points()
        )));
    }
    if bundle.posenc.len() < cfg.levels() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} position encoders for {} levels",
            bundle.posenc.len(),
            cfg.levels()
        )));
    }
    for (i, enc) in bundle.posenc.iter().take(cfg.levels() + 1).enumerate() {
        if enc.channels() != cfg.channels[i] {
            return Err(Error::ShapeMismatch(format!(
                "position encoder {i} width {} vs channel plan {}",
                enc.channels(),
                cfg.channels[i]
            )));
        }
    }
    Ok(())
}

/// Build the denoiser forward graph; returns the predicted-noise node.
#[allow(clippy::too_many_arguments)]
pub fn predict_noise_graph(
    g: &mut Graph,
    ids: &DenoiseIds,
    x_t: NodeId,
    t: usize,
    cloud: &PointCloud,
    bundle: &ConditionBundle,
    cache: &IndexCache,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    validate_bundle(bundle, cloud, cfg)?;
    let levels = cfg.levels();
    let entries = resolution_chain(cloud, cache, cfg)?;

    // Per-level position conditions from the frozen shared encoders.
    let pos: Vec<NodeId> = (0..=levels)
        .map(|i| {
            let p = bundle.posenc[i].apply_plain(&level_diffs(&entries[i]));
            g.constant(p)
        })
        .collect();

    let emb = g.constant(time_embedding(t, cfg.time_dim)?);
    let semantic = g.constant(bundle.semantic.clone());

    // Per-point feature RMS normalization at every level boundary keeps the
    // stack's activation scale flat through depth; without it each pooling
    // stage compounds a modest gain until attention softmaxes saturate.
    const NORM_EPS: f64 = 1e-6;

    // Stem at full resolution.
    let f0 = nle_graph(g, &ids.stem, x_t, semantic, pos[0], &entries[0].block);
    let t0 = ids.stem_time.apply(g, emb);
    let f0 = g.broadcast_rows_add(f0, t0);
    let mut cur = g.rms_norm_rows(f0, NORM_EPS);

    let mut skips = vec![cur];
    for i in 1..=levels {
        let (td, time, block) = &ids.enc[i - 1];
        let pooled = td_graph(g, td, cur, &entries[i]);
        let ti = time.apply(g, emb);
        let pooled = g.broadcast_rows_add(pooled, ti);
        let pooled = g.rms_norm_rows(pooled, NORM_EPS);
        cur = block.apply(g, pooled, pos[i], &entries[i].block);
        skips.push(cur);
    }

    for step in 1..=levels {
        let level = levels - step;
        let (tu, time, block) = &ids.dec[step - 1];
        let stencil = Rc::new(
            entries[level + 1]
                .interp
                .clone()
                .expect("levels above 0 carry interpolation data"),
        );
        let up = tu_graph(g, tu, cur, stencil, skips[level]);
        let ti = time.apply(g, emb);
        let up = g.broadcast_rows_add(up, ti);
        let up = g.rms_norm_rows(up, NORM_EPS);
        cur = block.apply(g, up, pos[level], &entries[level].block);
    }

    Ok(ids.head.apply(g, cur))
}

/// Predicted per-point noise for one reverse step (frozen parameters).
pub fn predict_noise(
    x_t: &LabelField,
    t: usize,
    cloud: &PointCloud,
    bundle: &ConditionBundle,
    params: &DenoiseNetParams,
    cache: &IndexCache,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    if x_t.n_points() != cloud.n_points() || x_t.n_classes() != cfg.n_classes {
        return Err(Error::ShapeMismatch(format!(
            "state {:?} for {} points and {} classes",
            x_t.values().shape(),
            cloud.n_points(),
            cfg.n_classes
        )));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let ids = params.bind(&mut b);
    let x = g.constant(x_t.values().clone());
    let out = predict_noise_graph(&mut g, &ids, x, t, cloud, bundle, cache, cfg)?;
    Ok(g.value(out).clone())
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Per-point noise streams keyed by position, so that reordering the points
/// reorders the noise with them.
pub struct PointNoise {
    rngs: Vec<Rng>,
}

fn position_key(p: &[f64; 3]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for c in p {
        for byte in c.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl PointNoise {
    pub fn new(cloud: &PointCloud, seed: u64) -> Self {
        PointNoise {
            rngs: cloud
                .positions()
                .iter()
                .map(|p| Rng::from_seed(mix_seed(seed, position_key(p))))
                .collect(),
        }
    }

    /// Draw an `[N, M]` field, one row per point from its own stream.
    pub fn draw(&mut self, m: usize) -> Tensor {
        let n = self.rngs.len();
        let mut out = Tensor::zeros(&[n, m]);
        for (i, rng) in self.rngs.iter_mut().enumerate() {
            rng.fill_normal(&mut out.data_mut()[i * m..(i + 1) * m]);
        }
        out
    }
}

/// Reverse-diffusion diagnostics.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    /// L2 norm of the predicted noise at each step, reverse order (t = T
    /// first); always exactly `T` entries.
    pub eps_norms: Vec<f64>,
    /// Bounded `(t, state)` snapshots when requested.
    pub snapshots: Vec<(usize, Tensor)>,
    pub seed: u64,
    pub steps: usize,
}

/// Run the full reverse process and decode per-point classes.
///
/// `max_snapshots` bounds how many intermediate states the trace keeps
/// (0 keeps none); snapshots are taken at evenly spaced steps.
#[allow(clippy::too_many_arguments)]
pub fn sample_labels(
    cloud: &PointCloud,
    bundle: &ConditionBundle,
    sched: &NoiseSchedule,
    seed: u64,
    params: &DenoiseNetParams,
    cache: &IndexCache,
    cfg: &ModelConfig,
    max_snapshots: usize,
) -> Result<(Vec<usize>, SampleTrace)> {
    let t_max = sched.t_max();
    let m = cfg.n_classes;
    let mut noise = PointNoise::new(cloud, seed);
    let mut x = LabelField::new(noise.draw(m), LabelEncoding::Continuous)?;
    let mut eps_norms = Vec::with_capacity(t_max);
    let mut snapshots = Vec::new();
    let snap_every = if max_snapshots == 0 {
        usize::MAX
    } else {
        t_max.div_ceil(max_snapshots)
    };
    for t in (1..=t_max).rev() {
        let eps_hat = predict_noise(&x, t, cloud, bundle, params, cache, cfg)?;
        eps_norms.push(eps_hat.norm_sq().sqrt());
        let z = if t > 1 {
            noise.draw(m)
        } else {
            Tensor::zeros(&[cloud.n_points(), m])
        };
        x = reverse_step(&x, &eps_hat, t, &z, sched)?;
        if max_snapshots > 0 && (t_max - t).is_multiple_of(snap_every) && snapshots.len() < max_snapshots {
            snapshots.push((t, x.values().clone()));
        }
    }
    let classes = decode_labels(&x);
    Ok((
        classes,
        SampleTrace {
            eps_norms,
            snapshots,
            seed,
            steps: t_max,
        },
    ))
}

// ---------------------------------------------------------------------------
// Model checkpointing
// ---------------------------------------------------------------------------

fn usize_entry(name: &str, values: &[usize]) -> (String, Tensor) {
    (
        name.to_string(),
        Tensor::from_vec(&[values.len()], values.iter().map(|&v| v as f64).collect()),
    )
}

fn config_entries(cfg: &ModelConfig) -> Vec<(String, Tensor)> {
    vec![
        usize_entry("meta.n_classes", &[cfg.n_classes]),
        usize_entry("meta.channels", &cfg.channels),
        usize_entry("meta.k", &[cfg.k]),
        (
            "meta.ratios".to_string(),
            Tensor::from_vec(&[cfg.ratios.len()], cfg.ratios.clone()),
        ),
        usize_entry("meta.time_dim", &[cfg.time_dim]),
        (
            "meta.label_scale".to_string(),
            Tensor::scalar(cfg.label_scale),
        ),
        usize_entry("meta.feature_dim", &[cfg.feature_dim]),
        usize_entry("meta.cond_levels", &[cfg.cond_levels]),
        usize_entry("meta.use_logits", &[cfg.use_logits as usize]),
    ]
}

fn config_from_entries(map: &HashMap<String, Tensor>) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<&Tensor> {
        map.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint missing {name}")))
    };
    let scalar = |name: &str| -> Result<f64> { Ok(get(name)?.data()[0]) };
    let cfg = ModelConfig {
        n_classes: scalar("meta.n_classes")? as usize,
        channels: get("meta.channels")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect(),
        k: scalar("meta.k")? as usize,
        ratios: get("meta.ratios")?.data().to_vec(),
        time_dim: scalar("meta.time_dim")? as usize,
        label_scale: scalar("meta.label_scale")?,
        feature_dim: scalar("meta.feature_dim")? as usize,
        cond_levels: scalar("meta.cond_levels")? as usize,
        use_logits: scalar("meta.use_logits")? as usize != 0,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn fill_from_map<P: Params>(params: &mut P, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
    let mut missing = None;
    let mut mismatch = None;
    params.visit_mut(prefix, &mut |name, t| {
        match map.get(&name) {
            Some(loaded) if loaded.shape() == t.shape() => {
                t.data_mut().copy_from_slice(loaded.data());
            }
            Some(loaded) => {
                mismatch.get_or_insert(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    loaded.shape(),
                    t.shape()
                ));
            }
            None => {
                missing.get_or_insert(name);
            }
        };
    });
    if let Some(name) = missing {
        return Err(Error::InvalidArgument(format!(
            "checkpoint missing tensor {name}"
        )));
    }
    if let Some(msg) = mismatch {
        return Err(Error::ShapeMismatch(msg));
    }
    Ok(())
}

/// A trained (or training) model: configuration, frozen conditional network,
/// and optionally the denoiser.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub condition: ConditionParams,
    pub denoiser: Option<DenoiseNetParams>,
}

/// Serialize config, condition parameters, and (if present) denoiser
/// parameters into one checkpoint byte stream.
pub fn encode_model(
    cfg: &ModelConfig,
    condition: &ConditionParams,
    denoiser: Option<&DenoiseNetParams>,
) -> Vec<u8> {
    let mut entries = config_entries(cfg);
    entries.extend(condition.named_tensors_with_prefix("cond"));
    if let Some(d) = denoiser {
        entries.extend(d.named_tensors_with_prefix("dnet"));
    }
    checkpoint::encode_entries(&entries)
}

/// Condition-parameter section bytes alone; the freeze contract compares
/// these before and after denoiser training.
pub fn encode_condition_section(condition: &ConditionParams) -> Vec<u8> {
    checkpoint::encode_entries(&condition.named_tensors_with_prefix("cond"))
}

trait NamedWithPrefix {
    fn named_tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)>;
}

impl<P: Params> NamedWithPrefix for P {
    fn named_tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name, t.clone())));
        out
    }
}

pub fn save_model(
    path: &Path,
    cfg: &ModelConfig,
    condition: &ConditionParams,
    denoiser: Option<&DenoiseNetParams>,
) -> Result<()> {
    std::fs::write(path, encode_model(cfg, condition, denoiser))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    let entries = checkpoint::load_named(path)?;
    let has_denoiser = entries.iter().any(|(n, _)| n.starts_with("dnet."));
    let map: HashMap<String, Tensor> = entries.into_iter().collect();
    let config = config_from_entries(&map)?;
    let mut condition = ConditionParams::init(&config, 0)?;
    fill_from_map(&mut condition, "cond", &map)?;
    let denoiser = if has_denoiser {
        let mut d = init_params(&config, 0)?;
        fill_from_map(&mut d, "dnet", &map)?;
        Some(d)
    } else {
        None
    };
    Ok(ModelCheckpoint {
        config,
        condition,
        denoiser,
    })
}

//! The denoising network's aggregation blocks.
//!
//! Three blocks do the per-step work of the denoiser:
//!
//! * **Noisy label embedding** projects the noisy label state onto features
//!   and aggregates each point's neighborhood with weights learned from
//!   semantic differences masked by the position condition, anchoring the
//!   noisy state to a stable semantic reference at full resolution.
//! * **Point frequency transformer** moves features (along the point axis)
//!   and position conditions (along the neighbor axis) into the frequency
//!   domain, applies vector attention there, and returns through an inverse
//!   transform with a residual connection.
//! * **Denoising PointNet** is the cheap block: a shared perceptron over
//!   grouped features plus position condition, max-pooled over neighbors.
//!
//! Each block exists as a graph builder (for training) and a plain entry
//! point that evaluates through a throwaway graph, so there is exactly one
//! implementation of the math.

use std::rc::Rc;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::fft::transform_axis;
use crate::geometry::NeighborTable;
use crate::nn::{Binder, Linear, LinearIds, Mlp2, Mlp2Ids, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Spectral fields
// ---------------------------------------------------------------------------

/// A complex field stored as paired real tensors, remembering which axis was
/// transformed so the inverse can undo it.
#[derive(Debug, Clone)]
pub struct SpectralField {
    pub re: Tensor,
    pub im: Tensor,
    pub axis: usize,
    pub original_len: usize,
}

/// Unnormalized forward DFT of a real tensor along `axis`.
pub fn fft_axis(values: &Tensor, axis: usize) -> SpectralField {
    assert!(axis < values.rank(), "axis out of range");
    let mut re = values.data().to_vec();
    let mut im = vec![0.0; re.len()];
    transform_axis(&mut re, &mut im, values.shape(), axis, false);
    SpectralField {
        re: Tensor::from_vec(values.shape(), re),
        im: Tensor::from_vec(values.shape(), im),
        axis,
        original_len: values.shape()[axis],
    }
}

/// Inverse DFT (scaled by `1/L`); returns the real part, which reproduces
/// the source exactly when the field came from [`fft_axis`].
pub fn ifft_axis(spec: &SpectralField) -> Tensor {
    let mut re = spec.re.data().to_vec();
    let mut im = spec.im.data().to_vec();
    transform_axis(&mut re, &mut im, spec.re.shape(), spec.axis, true);
    Tensor::from_vec(spec.re.shape(), re)
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Noisy label embedding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NleParams {
    /// Projects the raw noisy labels `[N, M]` onto `[N, C]` features.
    pub input_mlp: Mlp2,
    /// Weight function over semantic difference plus position condition.
    pub weight_mlp: Mlp2,
    /// Maps semantic features to the block width when the widths differ.
    pub adapter: Option<Linear>,
}

impl NleParams {
    pub fn init(n_classes: usize, c_semantic: usize, c: usize, rng: &mut Rng) -> Self {
        NleParams {
            input_mlp: Mlp2::kaiming(n_classes, c, c, rng),
            weight_mlp: Mlp2::kaiming(c, c, c, rng),
            adapter: (c_semantic != c).then(|| Linear::kaiming(c_semantic, c, rng)),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight_mlp.l2.out_dim()
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> NleIds {
        NleIds {
            input_mlp: self.input_mlp.bind(b),
            weight_mlp: self.weight_mlp.bind(b),
            adapter: self.adapter.as_ref().map(|a| a.bind(b)),
        }
    }
}

impl Params for NleParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.input_mlp.visit(&format!("{prefix}.input"), f);
        self.weight_mlp.visit(&format!("{prefix}.weight"), f);
        if let Some(a) = &self.adapter {
            a.visit(&format!("{prefix}.adapter"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.input_mlp.visit_mut(&format!("{prefix}.input"), f);
        self.weight_mlp.visit_mut(&format!("{prefix}.weight"), f);
        if let Some(a) = &mut self.adapter {
            a.visit_mut(&format!("{prefix}.adapter"), f);
        }
    }
}

pub struct NleIds {
    pub input_mlp: Mlp2Ids,
    pub weight_mlp: Mlp2Ids,
    pub adapter: Option<LinearIds>,
}

/// Point frequency transformer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PftParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// Attention weight function over the concatenated (re, im) difference.
    pub attn_mlp: Mlp2,
    /// Output projection; zero-initialized so a fresh block is the identity.
    pub wo: Linear,
}

impl PftParams {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        PftParams {
            wq: Linear::kaiming(c, c, rng),
            wk: Linear::kaiming(c, c, rng),
            wv: Linear::kaiming(c, c, rng),
            attn_mlp: Mlp2::kaiming(2 * c, c, c, rng),
            wo: Linear::zeros(c, c),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.in_dim()
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> PftIds {
        PftIds {
            wq: self.wq.bind(b),
            wk: self.wk.bind(b),
            wv: self.wv.bind(b),
            attn_mlp: self.attn_mlp.bind(b),
            wo: self.wo.bind(b),
        }
    }
}

impl Params for PftParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.attn_mlp.visit(&format!("{prefix}.attn"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.attn_mlp.visit_mut(&format!("{prefix}.attn"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

pub struct PftIds {
    pub wq: LinearIds,
    pub wk: LinearIds,
    pub wv: LinearIds,
    pub attn_mlp: Mlp2Ids,
    pub wo: LinearIds,
}

/// Denoising PointNet parameters: one shared perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct DpnParams {
    pub mlp: Mlp2,
}

impl DpnParams {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        DpnParams {
            mlp: Mlp2::kaiming(c, c, c, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.mlp.l2.out_dim()
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> DpnIds {
        DpnIds {
            mlp: self.mlp.bind(b),
        }
    }
}

impl Params for DpnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }
}

pub struct DpnIds {
    pub mlp: Mlp2Ids,
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

fn table_indices(table: &NeighborTable) -> Rc<Vec<usize>> {
    Rc::new(table.flat().to_vec())
}

/// Noisy label embedding:
/// `x = MLP(x_t)`, `y_i = sum_j W((s_ij - s_i) + p_ij) * (x_ij + p_ij)`,
/// output `f_i = y_i + x_i`.
pub fn nle_graph(
    g: &mut Graph,
    ids: &NleIds,
    x_t: NodeId,
    semantic: NodeId,
    pos_cond: NodeId,
    table: &NeighborTable,
) -> NodeId {
    let x = ids.input_mlp.apply(g, x_t);
    let s = match &ids.adapter {
        Some(a) => a.apply(g, semantic),
        None => semantic,
    };
    let idx = table_indices(table);
    let s_ij = g.gather_rows(s, Rc::clone(&idx), table.k());
    let s_diff = g.sub_expand(s_ij, s);
    let w_in = g.add(s_diff, pos_cond);
    let w = ids.weight_mlp.apply(g, w_in);
    let x_ij = g.gather_rows(x, idx, table.k());
    let v = g.add(x_ij, pos_cond);
    let weighted = g.mul(w, v);
    let y = g.sum_axis1(weighted);
    g.add(y, x)
}

/// Point frequency transformer: vector attention in the frequency domain
/// with a residual connection back in the spatial domain.
pub fn pft_graph(
    g: &mut Graph,
    ids: &PftIds,
    f: NodeId,
    pos_cond: NodeId,
    table: &NeighborTable,
) -> NodeId {
    let f_shape = g.value(f).shape().to_vec();
    let p_shape = g.value(pos_cond).shape().to_vec();
    let zero_f = g.constant(Tensor::zeros(&f_shape));
    let zero_p = g.constant(Tensor::zeros(&p_shape));

    // Features transform along the point axis, position conditions along the
    // neighbor axis. Inside the block the transform pair is scaled to be
    // norm-preserving (1/sqrt(L) forward, compensated inverse); the raw
    // convention would inflate spectral magnitudes by up to the axis length
    // and push the attention softmax into its saturated regime.
    let inv_sqrt_n = 1.0 / (f_shape[0] as f64).sqrt();
    let inv_sqrt_k = 1.0 / (p_shape[1] as f64).sqrt();
    let (xf_re, xf_im) = g.fft_axis(f, zero_f, 0, false);
    let xf_re = g.scale(xf_re, inv_sqrt_n);
    let xf_im = g.scale(xf_im, inv_sqrt_n);
    let (pf_re, pf_im) = g.fft_axis(pos_cond, zero_p, 1, false);
    let pf_re = g.scale(pf_re, inv_sqrt_k);
    let pf_im = g.scale(pf_im, inv_sqrt_k);

    // Projections apply channel-wise, identically to both components.
    let q_re = ids.wq.apply(g, xf_re);
    let q_im = ids.wq.apply(g, xf_im);
    let k_re = ids.wk.apply(g, xf_re);
    let k_im = ids.wk.apply(g, xf_im);
    let v_re = ids.wv.apply(g, xf_re);
    let v_im = ids.wv.apply(g, xf_im);

    // Spectral keys/values are grouped by the spatial neighbor indices.
    let idx = table_indices(table);
    let k_ij_re = g.gather_rows(k_re, Rc::clone(&idx), table.k());
    let k_ij_im = g.gather_rows(k_im, Rc::clone(&idx), table.k());
    let v_ij_re = g.gather_rows(v_re, Rc::clone(&idx), table.k());
    let v_ij_im = g.gather_rows(v_im, idx, table.k());

    let d_re = g.sub_expand(k_ij_re, q_re);
    let d_re = g.add(d_re, pf_re);
    let d_im = g.sub_expand(k_ij_im, q_im);
    let d_im = g.add(d_im, pf_im);

    // Real attention weights: scores come from the concatenated (re, im)
    // representation, the softmax runs over the K neighbors, and each weight
    // multiplies both components of its value.
    let scores_in = g.concat_last(d_re, d_im);
    let scores = ids.attn_mlp.apply(g, scores_in);
    let weights = g.softmax_axis1(scores);

    let val_re = g.add(v_ij_re, pf_re);
    let val_im = g.add(v_ij_im, pf_im);
    let z_re = g.mul(weights, val_re);
    let z_im = g.mul(weights, val_im);
    let z_re = g.sum_axis1(z_re);
    let z_im = g.sum_axis1(z_im);

    let (s_re, _s_im) = g.fft_axis(z_re, z_im, 0, true);
    let s_re = g.scale(s_re, (f_shape[0] as f64).sqrt());
    let out = ids.wo.apply(g, s_re);
    g.add(out, f)
}

/// Transition-down feature path: linear projection, gather each sampled
/// point's parent neighborhood, channel-wise max. Index data comes from a
/// cached [`crate::geometry::LevelIndices`].
pub fn td_graph(
    g: &mut Graph,
    proj: &LinearIds,
    feats: NodeId,
    entry: &crate::geometry::LevelIndices,
) -> NodeId {
    let projected = proj.apply(g, feats);
    let pool = entry.pool.as_ref().unwrap_or(&entry.block);
    let grouped = g.gather_rows(projected, table_indices(pool), pool.k());
    g.max_axis1(grouped)
}

/// Transition-up feature path: linear projection to the finer width,
/// inverse-distance interpolation, additive skip connection.
pub fn tu_graph(
    g: &mut Graph,
    proj: &LinearIds,
    coarse: NodeId,
    stencil: Rc<Vec<Vec<(usize, f64)>>>,
    skip: NodeId,
) -> NodeId {
    let projected = proj.apply(g, coarse);
    let up = g.weighted_gather_sum(projected, stencil);
    g.add(up, skip)
}

/// Denoising PointNet: shared perceptron on grouped features plus position
/// condition, channel-wise max over the neighborhood.
pub fn dpn_graph(
    g: &mut Graph,
    ids: &DpnIds,
    f: NodeId,
    pos_cond: NodeId,
    table: &NeighborTable,
) -> NodeId {
    let idx = table_indices(table);
    let f_ij = g.gather_rows(f, idx, table.k());
    let h = g.add(f_ij, pos_cond);
    let h = ids.mlp.apply(g, h);
    g.max_axis1(h)
}

// ---------------------------------------------------------------------------
// Plain entry points
// ---------------------------------------------------------------------------

fn check_block_shapes(
    f: &Tensor,
    pos_cond: &Tensor,
    table: &NeighborTable,
    c: usize,
) -> Result<()> {
    let q = table.query_count();
    if f.rank() != 2 || f.shape()[0] != q {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} for {q} queries",
            f.shape()
        )));
    }
    if pos_cond.shape() != [q, table.k(), c] {
        return Err(Error::ShapeMismatch(format!(
            "position condition {:?}, expected [{q}, {}, {c}]",
            pos_cond.shape(),
            table.k()
        )));
    }
    Ok(())
}

/// Plain noisy label embedding over tensors; see [`nle_graph`].
pub fn noisy_label_embedding(
    x_t: &Tensor,
    semantic: &Tensor,
    pos_cond: &Tensor,
    table: &NeighborTable,
    params: &NleParams,
) -> Result<Tensor> {
    let c = params.channels();
    check_block_shapes(semantic, pos_cond, table, c)?;
    if x_t.rank() != 2 || x_t.shape()[0] != table.query_count() {
        return Err(Error::ShapeMismatch(format!(
            "noisy labels {:?} for {} points",
            x_t.shape(),
            table.query_count()
        )));
    }
    let expected_cs = params.adapter.as_ref().map_or(c, |a| a.in_dim());
    if semantic.shape()[1] != expected_cs {
        return Err(Error::ShapeMismatch(format!(
            "semantic width {} vs expected {expected_cs}",
            semantic.shape()[1]
        )));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let ids = params.bind(&mut b);
    let x_t = g.constant(x_t.clone());
    let s = g.constant(semantic.clone());
    let p = g.constant(pos_cond.clone());
    let out = nle_graph(&mut g, &ids, x_t, s, p, table);
    Ok(g.value(out).clone())
}

/// Plain point frequency transformer over tensors; see [`pft_graph`].
pub fn point_frequency_transformer(
    f: &Tensor,
    pos_cond: &Tensor,
    table: &NeighborTable,
    params: &PftParams,
) -> Result<Tensor> {
    check_block_shapes(f, pos_cond, table, params.channels())?;
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let ids = params.bind(&mut b);
    let f = g.constant(f.clone());
    let p = g.constant(pos_cond.clone());
    let out = pft_graph(&mut g, &ids, f, p, table);
    Ok(g.value(out).clone())
}

/// Plain denoising PointNet over tensors; see [`dpn_graph`].
///
/// Unlike the other blocks, the value rows only need to cover the table's
/// indices; the query count alone fixes the output shape.
pub fn denoising_pointnet(
    f: &Tensor,
    pos_cond: &Tensor,
    table: &NeighborTable,
    params: &DpnParams,
) -> Result<Tensor> {
    let c = params.channels();
    if f.rank() != 2 || table.max_index().is_some_and(|m| m >= f.shape()[0]) {
        return Err(Error::ShapeMismatch(format!(
            "values {:?} do not cover the neighbor table",
            f.shape()
        )));
    }
    if pos_cond.shape() != [table.query_count(), table.k(), c] {
        return Err(Error::ShapeMismatch(format!(
            "position condition {:?}, expected [{}, {}, {c}]",
            pos_cond.shape(),
            table.query_count(),
            table.k()
        )));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let ids = params.bind(&mut b);
    let f = g.constant(f.clone());
    let p = g.constant(pos_cond.clone());
    let out = dpn_graph(&mut g, &ids, f, p, table);
    Ok(g.value(out).clone())
}

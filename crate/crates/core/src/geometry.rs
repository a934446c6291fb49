//! Point-set primitives: neighbor search, farthest-point sampling, grouping,
//! and the resolution-change blocks built on them.
//!
//! Resolution changes funnel through an [`IndexCache`] so that every block
//! operating at the same resolution of the same cloud reuses one set of
//! neighbor and sample indices instead of recomputing them. Cache hits return
//! bit-identical indices; hit/miss and search-invocation counters make the
//! reuse observable.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Tensor;

/// Fixed point positions with optional per-point features.
#[derive(Debug, Clone)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    features: Option<Tensor>,
    version: u64,
}

fn hash_positions(positions: &[[f64; 3]]) -> u64 {
    // FNV-1a over the raw coordinate bits plus the count; collisions are
    // astronomically unlikely at the sizes this crate handles.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    mix(positions.len() as u64);
    for p in positions {
        for c in p {
            mix(c.to_bits());
        }
    }
    h
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyInput("point cloud"));
        }
        if positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "point positions must be finite".into(),
            ));
        }
        let version = hash_positions(&positions);
        Ok(PointCloud {
            positions,
            features: None,
            version,
        })
    }

    pub fn with_features(positions: Vec<[f64; 3]>, features: Tensor) -> Result<Self> {
        let mut cloud = PointCloud::new(positions)?;
        if features.rank() != 2 || features.shape()[0] != cloud.n_points() {
            return Err(Error::ShapeMismatch(format!(
                "features {:?} for {} points",
                features.shape(),
                cloud.n_points()
            )));
        }
        if !features.all_finite() {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        cloud.features = Some(features);
        Ok(cloud)
    }

    pub fn n_points(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    /// Identity of the point set; derived clouds get their own version.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Positions flattened to an `[N, 3]` tensor.
    pub fn positions_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.positions.len() * 3);
        for p in &self.positions {
            data.extend_from_slice(p);
        }
        Tensor::from_vec(&[self.positions.len(), 3], data)
    }

    /// Subset of points by index, features carried along.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let positions: Vec<[f64; 3]> = indices.iter().map(|&i| self.positions[i]).collect();
        let mut cloud = PointCloud::new(positions)?;
        if let Some(f) = &self.features {
            let c = f.last_dim();
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                data.extend_from_slice(&f.data()[i * c..(i + 1) * c]);
            }
            cloud.features = Some(Tensor::from_vec(&[indices.len(), c], data));
        }
        Ok(cloud)
    }
}

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Cached k-nearest-neighbor indices: `Q` rows of `k` reference indices,
/// each row sorted by ascending distance, ties broken by lower index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    indices: Vec<usize>,
    k: usize,
    query_count: usize,
}

impl NeighborTable {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let q = rows.len();
        let k = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("ragged neighbor rows".into()));
        }
        Ok(NeighborTable {
            indices: rows.into_iter().flatten().collect(),
            k,
            query_count: q,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

/// Exact k-nearest neighbors by Euclidean distance, ties to the lower index.
/// When the query set is (a subset of) the reference set, each query's own
/// index lands in column 0, since its self-distance is zero.
pub fn knn(query: &[[f64; 3]], reference: &[[f64; 3]], k: usize) -> Result<NeighborTable> {
    if k > reference.len() {
        return Err(Error::InsufficientReference {
            requested: k,
            available: reference.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("knn with k = 0".into()));
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for qp in query {
        scratch.clear();
        scratch.extend(
            reference
                .iter()
                .enumerate()
                .map(|(i, rp)| (dist_sq(qp, rp), i)),
        );
        scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        indices.extend(scratch[..k].iter().map(|&(_, i)| i));
    }
    Ok(NeighborTable {
        indices,
        k,
        query_count: query.len(),
    })
}

/// Greedy farthest-point sampling: starts at `start`, then repeatedly picks
/// the point maximizing its distance to the chosen set (ties to lower index).
pub fn fps(positions: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "fps sample count {m} outside 1..={n}"
        )));
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "fps start {start} outside 0..{n}"
        )));
    }
    let mut chosen = Vec::with_capacity(m);
    chosen.push(start);
    let mut min_d: Vec<f64> = positions
        .iter()
        .map(|p| dist_sq(p, &positions[start]))
        .collect();
    while chosen.len() < m {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist_sq(&positions[i], &positions[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// Index of the lexicographically smallest position. Used as a canonical
/// fps start so derived resolutions are independent of point order.
pub fn canonical_start(positions: &[[f64; 3]]) -> usize {
    let mut best = 0;
    for (i, p) in positions.iter().enumerate().skip(1) {
        let b = &positions[best];
        if (p[0], p[1], p[2]) < (b[0], b[1], b[2]) {
            best = i;
        }
    }
    best
}

/// Gather `values: [R, C]` through a neighbor table into `[Q, K, C]`.
pub fn group(values: &Tensor, table: &NeighborTable) -> Result<Tensor> {
    if values.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "group expects [R, C] values, got {:?}",
            values.shape()
        )));
    }
    let r = values.shape()[0];
    if let Some(max) = table.max_index() {
        if max >= r {
            return Err(Error::InvalidArgument(format!(
                "neighbor index {max} out of range for {r} values"
            )));
        }
    }
    let c = values.shape()[1];
    let mut data = Vec::with_capacity(table.flat().len() * c);
    for &i in table.flat() {
        data.extend_from_slice(&values.data()[i * c..(i + 1) * c]);
    }
    Ok(Tensor::from_vec(
        &[table.query_count(), table.k(), c],
        data,
    ))
}

/// Inverse-distance interpolation stencil: for each fine point, up to 3
/// nearest coarse points with weights proportional to `1/(d + eps)`.
pub const INTERP_NEIGHBORS: usize = 3;
const INTERP_EPS: f64 = 1e-8;

pub fn interpolation_stencil(
    fine: &[[f64; 3]],
    coarse: &[[f64; 3]],
    table: &NeighborTable,
) -> Vec<Vec<(usize, f64)>> {
    let mut stencil = Vec::with_capacity(fine.len());
    for (i, fp) in fine.iter().enumerate() {
        let row = table.row(i);
        let mut weights: Vec<(usize, f64)> = row
            .iter()
            .map(|&ci| {
                let d = dist_sq(fp, &coarse[ci]).sqrt();
                (ci, 1.0 / (d + INTERP_EPS))
            })
            .collect();
        let total: f64 = weights.iter().map(|&(_, w)| w).sum();
        for w in weights.iter_mut() {
            w.1 /= total;
        }
        stencil.push(weights);
    }
    stencil
}

/// All index data tying one resolution level to its parent.
#[derive(Debug)]
pub struct LevelIndices {
    /// Points at this level's resolution (fps subset of the parent).
    pub cloud: PointCloud,
    /// Sample indices into the parent cloud (identity-free at level 0).
    pub samples: Vec<usize>,
    /// k-NN of each sampled point among the parent points (pooling); absent
    /// at level 0 where no resolution change happens.
    pub pool: Option<NeighborTable>,
    /// Self k-NN of this level's points (block neighborhoods).
    pub block: NeighborTable,
    /// For each parent point, its nearest coarse points with inverse-distance
    /// weights (upsampling); absent at level 0.
    pub interp: Option<Vec<Vec<(usize, f64)>>>,
}

/// Shared-index cache keyed by `(level id, point-set version)`.
///
/// Lookups may run concurrently; a miss builds the entry while holding the
/// write lock so each key is computed exactly once. With `enabled = false`
/// every lookup recomputes and nothing is stored, which is only useful for
/// measuring how much work the cache saves.
pub struct IndexCache {
    entries: RwLock<HashMap<(usize, u64), Arc<LevelIndices>>>,
    /// Upsampling stencils for fine/coarse pairs requested outside a level
    /// entry, keyed by `(level, fine version, coarse version)`.
    interp: RwLock<HashMap<(usize, u64, u64), Arc<Vec<Vec<(usize, f64)>>>>>,
    enabled: bool,
    hits: AtomicU64,
    misses: AtomicU64,
    knn_invocations: AtomicU64,
    fps_invocations: AtomicU64,
}

impl Default for IndexCache {
    fn default() -> Self {
        Self::new()
    }
}

impl IndexCache {
    pub fn new() -> Self {
        IndexCache {
            entries: RwLock::new(HashMap::new()),
            interp: RwLock::new(HashMap::new()),
            enabled: true,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            knn_invocations: AtomicU64::new(0),
            fps_invocations: AtomicU64::new(0),
        }
    }

    /// A cache that never stores anything: every lookup recomputes.
    pub fn disabled() -> Self {
        IndexCache {
            enabled: false,
            ..IndexCache::new()
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn knn_invocations(&self) -> u64 {
        self.knn_invocations.load(Ordering::Relaxed)
    }

    pub fn fps_invocations(&self) -> u64 {
        self.fps_invocations.load(Ordering::Relaxed)
    }

    /// Total neighbor/sample searches performed so far.
    pub fn search_invocations(&self) -> u64 {
        self.knn_invocations() + self.fps_invocations()
    }

    fn counted_knn(
        &self,
        query: &[[f64; 3]],
        reference: &[[f64; 3]],
        k: usize,
    ) -> Result<NeighborTable> {
        self.knn_invocations.fetch_add(1, Ordering::Relaxed);
        knn(query, reference, k)
    }

    fn counted_fps(&self, positions: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
        self.fps_invocations.fetch_add(1, Ordering::Relaxed);
        fps(positions, m, start)
    }

    fn build(
        &self,
        level: usize,
        parent: &PointCloud,
        ratio: f64,
        k: usize,
    ) -> Result<LevelIndices> {
        let n = parent.n_points();
        if level == 0 {
            let k_eff = k.min(n);
            let block = self.counted_knn(parent.positions(), parent.positions(), k_eff)?;
            return Ok(LevelIndices {
                cloud: parent.clone(),
                samples: Vec::new(),
                pool: None,
                block,
                interp: None,
            });
        }
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "downsample ratio {ratio} outside (0, 1]"
            )));
        }
        let m = ((ratio * n as f64).ceil() as usize).clamp(1, n);
        let start = canonical_start(parent.positions());
        let samples = self.counted_fps(parent.positions(), m, start)?;
        let coarse = parent.select(&samples)?;
        let pool = self.counted_knn(coarse.positions(), parent.positions(), k.min(n))?;
        let block = self.counted_knn(coarse.positions(), coarse.positions(), k.min(m))?;
        let interp_k = INTERP_NEIGHBORS.min(m);
        let interp_table = self.counted_knn(parent.positions(), coarse.positions(), interp_k)?;
        let interp = interpolation_stencil(parent.positions(), coarse.positions(), &interp_table);
        Ok(LevelIndices {
            cloud: coarse,
            samples,
            pool: Some(pool),
            block,
            interp: Some(interp),
        })
    }

    /// Return the entry for `(level, version)` only if it already exists.
    pub fn peek(&self, level: usize, version: u64) -> Option<Arc<LevelIndices>> {
        if !self.enabled {
            return None;
        }
        let found = self
            .entries
            .read()
            .expect("cache lock")
            .get(&(level, version))
            .map(Arc::clone);
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        found
    }

    /// Fetch (or build) the index data for `level`, where `parent` is the
    /// cloud at the previous resolution (the cloud itself for level 0).
    pub fn level(
        &self,
        level: usize,
        parent: &PointCloud,
        ratio: f64,
        k: usize,
    ) -> Result<Arc<LevelIndices>> {
        if !self.enabled {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::new(self.build(level, parent, ratio, k)?));
        }
        let key = (level, parent.version());
        if let Some(entry) = self.entries.read().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(entry));
        }
        let mut map = self.entries.write().expect("cache lock");
        // Single writer per key: re-check under the write lock so concurrent
        // misses build the entry exactly once.
        if let Some(entry) = map.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(entry));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let entry = Arc::new(self.build(level, parent, ratio, k)?);
        map.insert(key, Arc::clone(&entry));
        Ok(entry)
    }
}

/// Downsample by farthest-point sampling and pool features from each sampled
/// point's neighborhood: linear projection, then channel-wise max over the
/// k parent neighbors. Indices come from the cache.
pub fn transition_down(
    cloud: &PointCloud,
    feats: &Tensor,
    ratio: f64,
    k: usize,
    cache: &IndexCache,
    level: usize,
    proj: &Linear,
) -> Result<(PointCloud, Tensor, Vec<usize>)> {
    if cloud.n_points() == 0 {
        return Err(Error::EmptyInput("transition_down cloud"));
    }
    if feats.rank() != 2 || feats.shape()[0] != cloud.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} for {} points",
            feats.shape(),
            cloud.n_points()
        )));
    }
    let entry = cache.level(level, cloud, ratio, k)?;
    let projected = proj.forward_plain(feats);
    let pool = entry.pool.as_ref().unwrap_or(&entry.block);
    let grouped = group(&projected, pool)?;
    let (q, kk, c) = (
        grouped.shape()[0],
        grouped.shape()[1],
        grouped.shape()[2],
    );
    let mut out = vec![f64::NEG_INFINITY; q * c];
    for qi in 0..q {
        for ki in 0..kk {
            let off = (qi * kk + ki) * c;
            for ci in 0..c {
                let v = grouped.data()[off + ci];
                if v > out[qi * c + ci] {
                    out[qi * c + ci] = v;
                }
            }
        }
    }
    Ok((
        entry.cloud.clone(),
        Tensor::from_vec(&[q, c], out),
        entry.samples.clone(),
    ))
}

/// Upsample coarse features to the fine resolution by inverse-distance
/// interpolation over the 3 nearest coarse points, then add the skip
/// features. Interpolation indices come from the cache.
pub fn transition_up(
    coarse_feats: &Tensor,
    coarse_positions: &[[f64; 3]],
    fine: &PointCloud,
    skip_feats: &Tensor,
    cache: &IndexCache,
    level: usize,
) -> Result<Tensor> {
    if coarse_positions.is_empty() {
        return Err(Error::EmptyInput("transition_up coarse points"));
    }
    if coarse_feats.rank() != 2 || coarse_feats.shape()[0] != coarse_positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "coarse features {:?} for {} points",
            coarse_feats.shape(),
            coarse_positions.len()
        )));
    }
    let c = coarse_feats.shape()[1];
    if skip_feats.shape() != [fine.n_points(), c] {
        return Err(Error::ShapeMismatch(format!(
            "skip features {:?}, expected [{}, {}]",
            skip_feats.shape(),
            fine.n_points(),
            c
        )));
    }
    let stencil = upsample_stencil(cache, level, fine, coarse_positions)?;
    let mut out = skip_feats.clone();
    for (ni, entries) in stencil.iter().enumerate() {
        let dst = &mut out.data_mut()[ni * c..(ni + 1) * c];
        for &(idx, w) in entries {
            let src = &coarse_feats.data()[idx * c..(idx + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// Fetch the interpolation stencil for `fine -> coarse` at `level`. The
/// level entry's stencil is reused when the coarse cloud matches; any other
/// pairing is cached under its own `(level, fine, coarse)` key.
pub fn upsample_stencil(
    cache: &IndexCache,
    level: usize,
    fine: &PointCloud,
    coarse_positions: &[[f64; 3]],
) -> Result<Arc<Vec<Vec<(usize, f64)>>>> {
    if let Some(entry) = cache.peek(level, fine.version()) {
        if entry.cloud.positions() == coarse_positions {
            if let Some(interp) = &entry.interp {
                return Ok(Arc::new(interp.clone()));
            }
        }
    }
    let key = (level, fine.version(), hash_positions(coarse_positions));
    if cache.enabled {
        if let Some(found) = cache.interp.read().expect("cache lock").get(&key) {
            cache.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(found));
        }
    }
    let build = || -> Result<Arc<Vec<Vec<(usize, f64)>>>> {
        let interp_k = INTERP_NEIGHBORS.min(coarse_positions.len());
        let table = cache.counted_knn(fine.positions(), coarse_positions, interp_k)?;
        Ok(Arc::new(interpolation_stencil(
            fine.positions(),
            coarse_positions,
            &table,
        )))
    };
    if !cache.enabled {
        cache.misses.fetch_add(1, Ordering::Relaxed);
        return build();
    }
    let mut map = cache.interp.write().expect("cache lock");
    if let Some(found) = map.get(&key) {
        cache.hits.fetch_add(1, Ordering::Relaxed);
        return Ok(Arc::clone(found));
    }
    cache.misses.fetch_add(1, Ordering::Relaxed);
    let stencil = build()?;
    map.insert(key, Arc::clone(&stencil));
    Ok(stencil)
}

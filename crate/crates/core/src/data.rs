//! Synthetic labeled scenes, grid subsampling, augmentation, test-time
//! perturbations, and point-cloud file I/O.
//!
//! Scenes are generated at f32 coordinate precision so they survive the
//! interchange format bit-exactly. Every randomized operation is a pure
//! function of its inputs and a seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::Rng;

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

/// Shape primitive a class's points are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    /// Isotropic Gaussian blob.
    Blob,
    /// Thin square patch in the xy plane.
    PlanePatch,
    /// Points on the surface of an axis-aligned box.
    BoxShell,
}

#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub center: [f64; 3],
    pub spread: f64,
    pub count: usize,
    pub primitive: Primitive,
}

/// Deterministic synthetic scene description.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    /// Additive Gaussian noise applied to every point.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Well-separated clusters: a nearest-centroid classifier is perfect.
    pub fn separable(n_classes: usize, per_class: usize, seed: u64) -> Self {
        let primitives = [Primitive::Blob, Primitive::PlanePatch, Primitive::BoxShell];
        let classes = (0..n_classes)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
                ClassSpec {
                    center: [8.0 * angle.cos(), 8.0 * angle.sin(), 0.5 * c as f64],
                    spread: 0.6,
                    count: per_class,
                    primitive: primitives[c % primitives.len()],
                }
            })
            .collect();
        SceneSpec {
            classes,
            noise_sigma: 0.02,
            seed,
        }
    }

    /// Overlapping class boundaries to exercise boundary behavior.
    pub fn hard(n_classes: usize, per_class: usize, seed: u64) -> Self {
        let primitives = [Primitive::Blob, Primitive::PlanePatch, Primitive::BoxShell];
        let classes = (0..n_classes)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
                ClassSpec {
                    center: [1.2 * angle.cos(), 1.2 * angle.sin(), 0.0],
                    spread: 0.8,
                    count: per_class,
                    primitive: primitives[c % primitives.len()],
                }
            })
            .collect();
        SceneSpec {
            classes,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.classes.iter().any(|c| c.count == 0) {
            return Err(Error::InvalidArgument(
                "every class needs at least one point".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Generate a labeled scene; deterministic per seed, class histogram equal
/// to the per-class counts, coordinates rounded to f32 precision.
pub fn generate_scene(spec: &SceneSpec) -> Result<(PointCloud, Vec<usize>)> {
    spec.validate()?;
    let mut rng = Rng::from_seed(spec.seed);
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (class, cs) in spec.classes.iter().enumerate() {
        for _ in 0..cs.count {
            let local = match cs.primitive {
                Primitive::Blob => [
                    cs.spread * rng.normal(),
                    cs.spread * rng.normal(),
                    cs.spread * rng.normal(),
                ],
                Primitive::PlanePatch => [
                    cs.spread * rng.uniform_in(-1.0, 1.0),
                    cs.spread * rng.uniform_in(-1.0, 1.0),
                    0.02 * cs.spread * rng.normal(),
                ],
                Primitive::BoxShell => {
                    let mut p = [
                        cs.spread * rng.uniform_in(-1.0, 1.0),
                        cs.spread * rng.uniform_in(-1.0, 1.0),
                        cs.spread * rng.uniform_in(-1.0, 1.0),
                    ];
                    let face = rng.below(6);
                    p[face / 2] = if face.is_multiple_of(2) { cs.spread } else { -cs.spread };
                    p
                }
            };
            let p = [
                round_f32(cs.center[0] + local[0] + spec.noise_sigma * rng.normal()),
                round_f32(cs.center[1] + local[1] + spec.noise_sigma * rng.normal()),
                round_f32(cs.center[2] + local[2] + spec.noise_sigma * rng.normal()),
            ];
            positions.push(p);
            labels.push(class);
        }
    }
    Ok((PointCloud::new(positions)?, labels))
}

// ---------------------------------------------------------------------------
// Grid subsampling
// ---------------------------------------------------------------------------

/// Keep one point per occupied voxel: the one nearest the voxel center (ties
/// to the lower index), its label carried over. Output follows lexicographic
/// voxel-coordinate order.
pub fn grid_subsample(
    cloud: &PointCloud,
    labels: &[usize],
    cell: f64,
) -> Result<(PointCloud, Vec<usize>)> {
    if cell <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grid cell {cell} must be > 0"
        )));
    }
    if labels.len() != cloud.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.n_points()
        )));
    }
    let mut voxels: BTreeMap<(i64, i64, i64), usize> = BTreeMap::new();
    let center_dist = |p: &[f64; 3], key: &(i64, i64, i64)| -> f64 {
        let cx = (key.0 as f64 + 0.5) * cell;
        let cy = (key.1 as f64 + 0.5) * cell;
        let cz = (key.2 as f64 + 0.5) * cell;
        (p[0] - cx).powi(2) + (p[1] - cy).powi(2) + (p[2] - cz).powi(2)
    };
    for (i, p) in cloud.positions().iter().enumerate() {
        let key = (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        );
        match voxels.get_mut(&key) {
            None => {
                voxels.insert(key, i);
            }
            Some(best) => {
                let db = center_dist(&cloud.positions()[*best], &key);
                let di = center_dist(p, &key);
                if di < db {
                    *best = i;
                }
            }
        }
    }
    let survivors: Vec<usize> = voxels.into_values().collect();
    let out_labels = survivors.iter().map(|&i| labels[i]).collect();
    Ok((cloud.select(&survivors)?, out_labels))
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Training-time geometric augmentations. Labels never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    /// Random uniform scale in `[0.8, 1.2]`.
    Scale,
    /// Mirror across the yz plane.
    FlipX,
    /// Mirror across the xz plane.
    FlipY,
    /// Gaussian jitter, sigma 0.01, clipped to +/-0.05.
    Jitter,
}

impl AugmentOp {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "scale" => Ok(AugmentOp::Scale),
            "flip-x" => Ok(AugmentOp::FlipX),
            "flip-y" => Ok(AugmentOp::FlipY),
            "jitter" => Ok(AugmentOp::Jitter),
            other => Err(Error::InvalidArgument(format!(
                "unknown augmentation {other:?} (expected scale|flip-x|flip-y|jitter)"
            ))),
        }
    }
}

const JITTER_SIGMA: f64 = 0.01;
const JITTER_CLIP: f64 = 0.05;

/// Apply augmentations in order; deterministic per seed.
pub fn augment(
    cloud: &PointCloud,
    labels: &[usize],
    ops: &[AugmentOp],
    seed: u64,
) -> Result<(PointCloud, Vec<usize>)> {
    if labels.len() != cloud.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.n_points()
        )));
    }
    let mut rng = Rng::from_seed(seed);
    let mut positions = cloud.positions().to_vec();
    for op in ops {
        match op {
            AugmentOp::Scale => {
                let s = rng.uniform_in(0.8, 1.2);
                for p in positions.iter_mut() {
                    p[0] *= s;
                    p[1] *= s;
                    p[2] *= s;
                }
            }
            AugmentOp::FlipX => {
                for p in positions.iter_mut() {
                    p[0] = -p[0];
                }
            }
            AugmentOp::FlipY => {
                for p in positions.iter_mut() {
                    p[1] = -p[1];
                }
            }
            AugmentOp::Jitter => {
                for p in positions.iter_mut() {
                    for c in p.iter_mut() {
                        let d = (JITTER_SIGMA * rng.normal()).clamp(-JITTER_CLIP, JITTER_CLIP);
                        *c += d;
                    }
                }
            }
        }
    }
    Ok((PointCloud::new(positions)?, labels.to_vec()))
}

// ---------------------------------------------------------------------------
// Test-time perturbations
// ---------------------------------------------------------------------------

/// Test-time robustness perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// Random reorder of the points; labels follow their points.
    Permute { seed: u64 },
    /// Exact rotation about the z axis by `angle` radians.
    RotateZ { angle: f64 },
    /// Add `offset` to every coordinate.
    Shift { offset: f64 },
    /// Multiply every coordinate by `factor`.
    Scale { factor: f64 },
    /// Gaussian jitter with the given sigma.
    Jitter { sigma: f64, seed: u64 },
}

/// Apply one perturbation; labels are carried (and reordered for permute).
pub fn perturb(
    cloud: &PointCloud,
    labels: &[usize],
    kind: Perturbation,
) -> Result<(PointCloud, Vec<usize>)> {
    if labels.len() != cloud.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.n_points()
        )));
    }
    match kind {
        Perturbation::Permute { seed } => {
            let mut order: Vec<usize> = (0..cloud.n_points()).collect();
            let mut rng = Rng::from_seed(seed);
            rng.shuffle(&mut order);
            let new_labels = order.iter().map(|&i| labels[i]).collect();
            Ok((cloud.select(&order)?, new_labels))
        }
        Perturbation::RotateZ { angle } => {
            let (s, c) = angle.sin_cos();
            let positions = cloud
                .positions()
                .iter()
                .map(|p| [p[0] * c - p[1] * s, p[0] * s + p[1] * c, p[2]])
                .collect();
            Ok((PointCloud::new(positions)?, labels.to_vec()))
        }
        Perturbation::Shift { offset } => {
            let positions = cloud
                .positions()
                .iter()
                .map(|p| [p[0] + offset, p[1] + offset, p[2] + offset])
                .collect();
            Ok((PointCloud::new(positions)?, labels.to_vec()))
        }
        Perturbation::Scale { factor } => {
            if factor == 0.0 {
                return Err(Error::InvalidArgument("scale factor must be nonzero".into()));
            }
            let positions = cloud
                .positions()
                .iter()
                .map(|p| [p[0] * factor, p[1] * factor, p[2] * factor])
                .collect();
            Ok((PointCloud::new(positions)?, labels.to_vec()))
        }
        Perturbation::Jitter { sigma, seed } => {
            let mut rng = Rng::from_seed(seed);
            let positions = cloud
                .positions()
                .iter()
                .map(|p| {
                    [
                        p[0] + sigma * rng.normal(),
                        p[1] + sigma * rng.normal(),
                        p[2] + sigma * rng.normal(),
                    ]
                })
                .collect();
            Ok((PointCloud::new(positions)?, labels.to_vec()))
        }
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

pub const CLOUD_MAGIC: &[u8; 4] = b"PDPC";
pub const CLOUD_VERSION: u32 = 1;

/// A cloud as stored on disk, with optional labels and its class count.
#[derive(Debug, Clone)]
pub struct CloudFile {
    pub cloud: PointCloud,
    pub labels: Option<Vec<usize>>,
    pub n_classes: usize,
}

/// Serialize: magic, version u32, N u64, M u32, flags u32 (bit 0 = labels),
/// N*3 f32 positions, N u16 labels when flagged. All little-endian.
pub fn encode_cloud(
    cloud: &PointCloud,
    labels: Option<&[usize]>,
    n_classes: usize,
) -> Result<Vec<u8>> {
    if let Some(l) = labels {
        if l.len() != cloud.n_points() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} points",
                l.len(),
                cloud.n_points()
            )));
        }
        if l.iter().any(|&c| c >= n_classes || c > u16::MAX as usize) {
            return Err(Error::InvalidArgument(
                "label out of range for the file format".into(),
            ));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.n_points() as u64).to_le_bytes());
    out.extend_from_slice(&(n_classes as u32).to_le_bytes());
    out.extend_from_slice(&(labels.is_some() as u32).to_le_bytes());
    for p in cloud.positions() {
        for &c in p {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    if let Some(l) = labels {
        for &c in l {
            out.extend_from_slice(&(c as u16).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_cloud(bytes: &[u8]) -> Result<CloudFile> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload);
    }
    if &bytes[..4] != CLOUD_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic {
            expected: "PDPC",
            found,
        });
    }
    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::TruncatedPayload);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CLOUD_VERSION {
        return Err(Error::BadVersion {
            expected: CLOUD_VERSION,
            found: version,
        });
    }
    let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let flags = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0f64; 3];
        for c in p.iter_mut() {
            *c = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
        }
        positions.push(p);
    }
    let labels = if flags & 1 != 0 {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize);
        }
        Some(l)
    } else {
        None
    };
    Ok(CloudFile {
        cloud: PointCloud::new(positions)?,
        labels,
        n_classes: m,
    })
}

pub fn save_cloud(
    path: &Path,
    cloud: &PointCloud,
    labels: Option<&[usize]>,
    n_classes: usize,
) -> Result<()> {
    fs::write(path, encode_cloud(cloud, labels, n_classes)?)?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<CloudFile> {
    decode_cloud(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_seed_deterministic_with_exact_histogram() {
        let spec = SceneSpec::separable(3, 20, 9);
        let (a, la) = generate_scene(&spec).unwrap();
        let (b, lb) = generate_scene(&spec).unwrap();
        assert_eq!(a.positions(), b.positions());
        assert_eq!(la, lb);
        for c in 0..3 {
            assert_eq!(la.iter().filter(|&&l| l == c).count(), 20);
        }
        let (c_cloud, _) = generate_scene(&SceneSpec::separable(3, 20, 10)).unwrap();
        assert_ne!(a.positions(), c_cloud.positions());
    }

    #[test]
    fn separable_scene_is_nearest_centroid_perfect() {
        let spec = SceneSpec::separable(3, 86, 7);
        let (cloud, labels) = generate_scene(&spec).unwrap();
        assert_eq!(cloud.n_points(), 258);
        // Independent oracle: classify by nearest class centroid.
        let mut centroids = [[0.0f64; 3]; 3];
        let mut counts = vec![0usize; 3];
        for (p, &l) in cloud.positions().iter().zip(&labels) {
            for d in 0..3 {
                centroids[l][d] += p[d];
            }
            counts[l] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for d in c.iter_mut() {
                *d /= *n as f64;
            }
        }
        let mut correct = 0;
        for (p, &l) in cloud.positions().iter().zip(&labels) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d: f64 = (0..3).map(|i| (p[i] - centroid[i]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == l {
                correct += 1;
            }
        }
        assert_eq!(correct, cloud.n_points());
    }

    #[test]
    fn grid_subsample_hand_example() {
        // Points at 0, 0.03, 0.05 with cell 0.04: voxel 0 holds {0, 0.03} and
        // keeps 0.03 (nearest to the voxel center 0.02); 0.05 survives alone.
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [0.03, 0.0, 0.0],
            [0.05, 0.0, 0.0],
        ])
        .unwrap();
        let labels = vec![0, 1, 2];
        let (out, out_labels) = grid_subsample(&cloud, &labels, 0.04).unwrap();
        assert_eq!(out.n_points(), 2);
        assert!((out.positions()[0][0] - 0.03).abs() < 1e-12);
        assert!((out.positions()[1][0] - 0.05).abs() < 1e-12);
        assert_eq!(out_labels, vec![1, 2]);
    }

    #[test]
    fn grid_subsample_preserves_points_with_tiny_cells() {
        let (cloud, labels) = generate_scene(&SceneSpec::separable(2, 12, 3)).unwrap();
        let (out, out_labels) = grid_subsample(&cloud, &labels, 1e-6).unwrap();
        assert_eq!(out.n_points(), cloud.n_points());
        // Same point set (order may differ: voxel order is lexicographic).
        let mut orig: Vec<_> = cloud.positions().to_vec();
        let mut got: Vec<_> = out.positions().to_vec();
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(orig, got);
        assert_eq!(out_labels.len(), labels.len());
    }

    #[test]
    fn grid_subsample_output_is_a_subset() {
        let (cloud, labels) = generate_scene(&SceneSpec::hard(3, 30, 4)).unwrap();
        let (out, _) = grid_subsample(&cloud, &labels, 0.5).unwrap();
        assert!(out.n_points() <= cloud.n_points());
        for p in out.positions() {
            assert!(cloud.positions().contains(p));
        }
    }

    #[test]
    fn augment_identity_and_involution() {
        let (cloud, labels) = generate_scene(&SceneSpec::separable(2, 10, 5)).unwrap();
        let (same, same_labels) = augment(&cloud, &labels, &[], 1).unwrap();
        assert_eq!(same.positions(), cloud.positions());
        assert_eq!(same_labels, labels);

        let (flipped, _) = augment(&cloud, &labels, &[AugmentOp::FlipX], 1).unwrap();
        let (back, _) = augment(&flipped, &labels, &[AugmentOp::FlipX], 1).unwrap();
        assert_eq!(back.positions(), cloud.positions());
    }

    #[test]
    fn augment_scale_scales_pairwise_distances() {
        let (cloud, labels) = generate_scene(&SceneSpec::separable(2, 15, 6)).unwrap();
        let (scaled, _) = augment(&cloud, &labels, &[AugmentOp::Scale], 42).unwrap();
        // Recover the drawn factor from the first point and verify the mean
        // pairwise distance scales by exactly that factor.
        let s = scaled.positions()[0][0] / cloud.positions()[0][0];
        let mean_dist = |pts: &[[f64; 3]]| -> f64 {
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let d: f64 = (0..3)
                        .map(|k| (pts[i][k] - pts[j][k]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    total += d;
                    count += 1;
                }
            }
            total / count as f64
        };
        let ratio = mean_dist(scaled.positions()) / mean_dist(cloud.positions());
        assert!((ratio - s).abs() / s < 1e-6);
        assert!((0.8..=1.2).contains(&s));
    }

    #[test]
    fn perturb_rotation_full_turn_and_shift_inverse() {
        let (cloud, labels) = generate_scene(&SceneSpec::separable(2, 10, 8)).unwrap();
        let (turned, _) = perturb(
            &cloud,
            &labels,
            Perturbation::RotateZ {
                angle: 2.0 * std::f64::consts::PI,
            },
        )
        .unwrap();
        for (a, b) in cloud.positions().iter().zip(turned.positions()) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-6);
            }
        }

        let (shifted, _) =
            perturb(&cloud, &labels, Perturbation::Shift { offset: 0.2 }).unwrap();
        let (back, _) =
            perturb(&shifted, &labels, Perturbation::Shift { offset: -0.2 }).unwrap();
        for (a, b) in cloud.positions().iter().zip(back.positions()) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perturb_permute_round_trip() {
        let (cloud, labels) = generate_scene(&SceneSpec::separable(3, 12, 9)).unwrap();
        let (shuffled, shuffled_labels) =
            perturb(&cloud, &labels, Perturbation::Permute { seed: 4 }).unwrap();
        assert_ne!(shuffled.positions(), cloud.positions());
        // Labels follow their points.
        for (p, &l) in shuffled.positions().iter().zip(&shuffled_labels) {
            let orig = cloud.positions().iter().position(|q| q == p).unwrap();
            assert_eq!(labels[orig], l);
        }
        // Applying the inverse permutation restores everything.
        let mut order: Vec<usize> = (0..cloud.n_points()).collect();
        Rng::from_seed(4).shuffle(&mut order);
        let mut inverse = vec![0usize; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let restored = shuffled.select(&inverse).unwrap();
        assert_eq!(restored.positions(), cloud.positions());
        let restored_labels: Vec<usize> =
            inverse.iter().map(|&i| shuffled_labels[i]).collect();
        assert_eq!(restored_labels, labels);
    }

    #[test]
    fn perturb_jitter_zero_sigma_is_identity() {
        let (cloud, labels) = generate_scene(&SceneSpec::separable(2, 10, 11)).unwrap();
        let (same, _) = perturb(
            &cloud,
            &labels,
            Perturbation::Jitter { sigma: 0.0, seed: 1 },
        )
        .unwrap();
        assert_eq!(same.positions(), cloud.positions());
    }

    #[test]
    fn cloud_file_round_trip_is_bit_exact() {
        let (cloud, labels) = generate_scene(&SceneSpec::separable(3, 14, 12)).unwrap();
        let bytes = encode_cloud(&cloud, Some(&labels), 3).unwrap();
        let file = decode_cloud(&bytes).unwrap();
        assert_eq!(file.cloud.positions(), cloud.positions());
        assert_eq!(file.labels.as_deref(), Some(labels.as_slice()));
        assert_eq!(file.n_classes, 3);

        // Without labels.
        let bytes = encode_cloud(&cloud, None, 3).unwrap();
        let file = decode_cloud(&bytes).unwrap();
        assert!(file.labels.is_none());
    }

    #[test]
    fn cloud_file_error_paths_are_distinct() {
        let (cloud, labels) = generate_scene(&SceneSpec::separable(2, 5, 13)).unwrap();
        let bytes = encode_cloud(&cloud, Some(&labels), 2).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Q';
        assert!(matches!(
            decode_cloud(&bad_magic),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 7;
        assert!(matches!(
            decode_cloud(&bad_version),
            Err(Error::BadVersion { found: 7, .. })
        ));

        assert!(matches!(
            decode_cloud(&bytes[..bytes.len() - 3]),
            Err(Error::TruncatedPayload)
        ));
    }
}

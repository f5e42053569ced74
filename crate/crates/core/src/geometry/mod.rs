//! Point-cloud preprocessing: cropping, voxel downsampling, space-filling
//! curve serialization, disjoint windowing, hierarchical pooling, and the
//! gravity-axis rotation augmentation.

pub mod io;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{Elem, Linear, NnError, ParamStore, Tape, TensorId};

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("cropping removed every point (empty observation)")]
    EmptyObservation,
    #[error("invalid workspace box: min {min:?} must be strictly below max {max:?}")]
    InvalidBox { min: [f64; 3], max: [f64; 3] },
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("{0}")]
    Nn(#[from] NnError),
}

/// Colored 3D points in the robot-base frame (meters; colors in [0,1]).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self, GeomError> {
        if positions.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if positions.len() != colors.len() {
            return Err(GeomError::InvalidCloud(format!(
                "{} positions vs {} colors",
                positions.len(),
                colors.len()
            )));
        }
        for p in &positions {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(GeomError::InvalidCloud("non-finite position".into()));
            }
        }
        for c in &colors {
            if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(GeomError::InvalidCloud("color outside [0,1]".into()));
            }
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Axis-aligned workspace bounds, min strictly below max per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkspaceBox {
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
}

impl WorkspaceBox {
    pub fn new(min_corner: [f64; 3], max_corner: [f64; 3]) -> Result<Self, GeomError> {
        if (0..3).any(|i| min_corner[i] >= max_corner[i]) {
            return Err(GeomError::InvalidBox {
                min: min_corner,
                max: max_corner,
            });
        }
        Ok(Self {
            min_corner,
            max_corner,
        })
    }

    /// Tight bounding box of a point set, padded so min < max strictly.
    pub fn bounding(points: &[[f64; 3]], pad: f64) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        for i in 0..3 {
            min[i] -= pad;
            max[i] += pad;
        }
        Self::new(min, max)
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min_corner[i] && p[i] <= self.max_corner[i])
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min_corner[0] + self.max_corner[0]),
            0.5 * (self.min_corner[1] + self.max_corner[1]),
            0.5 * (self.min_corner[2] + self.max_corner[2]),
        ]
    }
}

/// A pose: position, per-axis Euler rotation, and gripper openness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub euler: [f64; 3],
    pub openness: f64,
}

impl Pose {
    pub fn at(position: [f64; 3]) -> Self {
        Self {
            position,
            euler: [0.0; 3],
            openness: 1.0,
        }
    }
}

/// Serialization result: a sort permutation plus the Morton code of every
/// point (indexed by original point index).
#[derive(Debug, Clone)]
pub struct SerializedOrder {
    pub permutation: Vec<usize>,
    pub codes: Vec<u64>,
}

/// One window: a contiguous run of serialized positions plus padding up
/// to the partition's window size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub valid_len: usize,
}

/// Disjoint fixed-size windows over a serialized order. Every window holds
/// exactly `window_size` slots; slots past `valid_len` are invalid padding.
#[derive(Debug, Clone)]
pub struct WindowPartition {
    pub window_size: usize,
    pub windows: Vec<Window>,
    pub n_points: usize,
}

impl WindowPartition {
    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    /// Serialized-position range of window k's valid slots.
    pub fn valid_range(&self, k: usize) -> std::ops::Range<usize> {
        let w = &self.windows[k];
        w.start..w.start + w.valid_len
    }

    /// Number of padded (invalid) slots in window k.
    pub fn padding(&self, k: usize) -> usize {
        self.window_size - self.windows[k].valid_len
    }

    /// Slot validity for window k, length `window_size`.
    pub fn validity(&self, k: usize) -> Vec<bool> {
        let valid = self.windows[k].valid_len;
        (0..self.window_size).map(|i| i < valid).collect()
    }
}

/// Per-stage point set: coordinates plus embeddings on the active tape.
/// `parent_map[i]` lists the previous-stage points pooled into point `i`
/// (empty at the first stage). `origin_members[i]` lists the original
/// cloud indices that ended up under point `i`.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub stage: usize,
    pub coords: Vec<[f64; 3]>,
    pub embeddings: TensorId,
    pub parent_map: Vec<Vec<usize>>,
    pub origin_members: Vec<Vec<usize>>,
}

/// Retain exactly the points inside the closed box, preserving order.
pub fn crop_workspace(cloud: &PointCloud, bbox: &WorkspaceBox) -> Result<PointCloud, GeomError> {
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        if bbox.contains(p) {
            positions.push(*p);
            colors.push(*c);
        }
    }
    if positions.is_empty() {
        return Err(GeomError::EmptyObservation);
    }
    Ok(PointCloud { positions, colors })
}

/// Default voxel edge for preprocessing, in meters.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.01;
/// Default cap on points after voxelization.
pub const DEFAULT_MAX_POINTS: usize = 4096;

/// Group points by voxel key (floor(p / voxel) per axis, world origin) in
/// first-occurrence order.
pub fn voxel_groups(positions: &[[f64; 3]], voxel_size: f64) -> Vec<Vec<usize>> {
    let mut key_to_group: HashMap<[i64; 3], usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let key = [
            (p[0] / voxel_size).floor() as i64,
            (p[1] / voxel_size).floor() as i64,
            (p[2] / voxel_size).floor() as i64,
        ];
        match key_to_group.get(&key) {
            Some(&g) => groups[g].push(i),
            None => {
                key_to_group.insert(key, groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// One point per occupied voxel: centroid position, mean color. If more
/// voxels than `max_points` survive, a seeded uniform subset is kept.
pub fn voxel_downsample(
    cloud: &PointCloud,
    voxel_size: f64,
    max_points: usize,
    seed: u64,
) -> Result<PointCloud, GeomError> {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    assert!(max_points >= 1, "max_points must be at least 1");
    if cloud.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let groups = voxel_groups(&cloud.positions, voxel_size);
    let mut positions = Vec::with_capacity(groups.len());
    let mut colors = Vec::with_capacity(groups.len());
    for members in &groups {
        let inv = 1.0 / members.len() as f64;
        let mut p = [0.0; 3];
        let mut c = [0.0; 3];
        for &m in members {
            for i in 0..3 {
                p[i] += cloud.positions[m][i];
                c[i] += cloud.colors[m][i];
            }
        }
        for i in 0..3 {
            p[i] *= inv;
            c[i] *= inv;
        }
        positions.push(p);
        colors.push(c);
    }
    if positions.len() > max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = rand::seq::index::sample(&mut rng, positions.len(), max_points);
        let mut keep: Vec<usize> = keep.into_iter().collect();
        keep.sort_unstable();
        positions = keep.iter().map(|&i| positions[i]).collect();
        colors = keep.iter().map(|&i| colors[i]).collect();
    }
    Ok(PointCloud { positions, colors })
}

/// Quantize a position inside `bbox` to `bits` cells per axis and
/// interleave the bits: code bit 3i = x_i, 3i+1 = y_i, 3i+2 = z_i.
pub fn morton_encode(position: &[f64; 3], bbox: &WorkspaceBox, bits_per_axis: u32) -> u64 {
    assert!(bits_per_axis <= 21, "bits_per_axis must be <= 21");
    let cells = (1u64 << bits_per_axis) as f64;
    let mut cell = [0u64; 3];
    for i in 0..3 {
        let extent = bbox.max_corner[i] - bbox.min_corner[i];
        let t = (position[i] - bbox.min_corner[i]) / extent;
        let q = (t * cells).floor();
        cell[i] = (q.max(0.0) as u64).min((1u64 << bits_per_axis) - 1);
    }
    split_bits(cell[0]) | (split_bits(cell[1]) << 1) | (split_bits(cell[2]) << 2)
}

/// Spread the low 21 bits of `v` so consecutive bits land 3 apart.
fn split_bits(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

pub const DEFAULT_MORTON_BITS: u32 = 10;

/// Stable sort of point indices by Morton code (ties keep original order).
pub fn serialize(
    positions: &[[f64; 3]],
    bbox: &WorkspaceBox,
    bits_per_axis: u32,
) -> Result<SerializedOrder, GeomError> {
    if positions.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let codes: Vec<u64> = positions
        .iter()
        .map(|p| morton_encode(p, bbox, bits_per_axis))
        .collect();
    let mut permutation: Vec<usize> = (0..positions.len()).collect();
    permutation.sort_by_key(|&i| codes[i]);
    Ok(SerializedOrder { permutation, codes })
}

/// Default points per window at paper scale.
pub const DEFAULT_WINDOW_SIZE: usize = 1024;

/// Consecutive runs of `window_size` serialized indices; the final window
/// is padded with invalid slots up to the full size.
pub fn partition_windows(order: &SerializedOrder, window_size: usize) -> WindowPartition {
    assert!(window_size >= 1, "window_size must be at least 1");
    let n = order.permutation.len();
    let windows = (0..n.div_ceil(window_size))
        .map(|k| Window {
            start: k * window_size,
            valid_len: ((k + 1) * window_size).min(n) - k * window_size,
        })
        .collect();
    WindowPartition {
        window_size,
        windows,
        n_points: n,
    }
}

/// Pool a stage into the next: group by a coarser voxel key, centroid
/// coordinates, elementwise-max embeddings, then a learned linear lift.
pub fn grid_pool<E: Elem>(
    tape: &mut Tape<E>,
    ps: &ParamStore<E>,
    stage: &StageFeatures,
    pool_voxel_size: f64,
    lift: &Linear,
) -> Result<StageFeatures, GeomError> {
    let groups = voxel_groups(&stage.coords, pool_voxel_size);
    let mut coords = Vec::with_capacity(groups.len());
    let mut origin_members = Vec::with_capacity(groups.len());
    for members in &groups {
        let inv = 1.0 / members.len() as f64;
        let mut c = [0.0; 3];
        let mut origins = Vec::new();
        for &m in members {
            for i in 0..3 {
                c[i] += stage.coords[m][i];
            }
            origins.extend_from_slice(&stage.origin_members[m]);
        }
        for v in &mut c {
            *v *= inv;
        }
        coords.push(c);
        origin_members.push(origins);
    }
    let pooled = tape.group_max_pool(stage.embeddings, &groups)?;
    let lifted = lift.forward(tape, ps, pooled)?;
    Ok(StageFeatures {
        stage: stage.stage + 1,
        coords,
        embeddings: lifted,
        parent_map: groups,
        origin_members,
    })
}

/// Rotate positions and the keypoint about the vertical axis through the
/// workspace center; the keypoint yaw shifts by `theta`. Colors unchanged.
pub fn rotate_z(
    cloud: &PointCloud,
    keypoint: &Pose,
    theta: f64,
    bbox: &WorkspaceBox,
) -> (PointCloud, Pose) {
    let c = bbox.center();
    let (sin, cos) = theta.sin_cos();
    let rot = |p: &[f64; 3]| -> [f64; 3] {
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        [c[0] + cos * dx - sin * dy, c[1] + sin * dx + cos * dy, p[2]]
    };
    let positions = cloud.positions.iter().map(rot).collect();
    let mut pose = *keypoint;
    pose.position = rot(&keypoint.position);
    pose.euler[2] = wrap_angle(keypoint.euler[2] + theta);
    (
        PointCloud {
            positions,
            colors: cloud.colors.clone(),
        },
        pose,
    )
}

/// Wrap an angle into [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = (a + std::f64::consts::PI) % two_pi;
    if x < 0.0 {
        x += two_pi;
    }
    x - std::f64::consts::PI
}

/// Index of the cloud point nearest to `p` (ties break to lowest index).
pub fn nearest_point(positions: &[[f64; 3]], p: &[f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, q) in positions.iter().enumerate() {
        let d = dist2(q, p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

//! Action prediction heads and losses: chunked regression and
//! point-anchored classification with binning/unbinning.

use std::f64::consts::PI;

use thiserror::Error;

use crate::expert::{ActionTokens, ACTION_DIM};
use crate::geometry::{dist2, PointCloud, Pose, StageFeatures};
use crate::nn::{Elem, Linear, NdArray, NnError, ParamStore, Tape, TensorId};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("bad bin config: {0}")]
    BadBinConfig(String),
    #[error("classification head requires action horizon H = 1, got {0}")]
    NeedsSingleKeypoint(usize),
    #[error("action chunk shape mismatch: predicted {pred:?}, target {target:?}")]
    ChunkShape { pred: Vec<usize>, target: Vec<usize> },
    #[error("bin index out of range: {0}")]
    BinOutOfRange(String),
    #[error("{0}")]
    Nn(#[from] NnError),
}

/// H future actions, each a full action vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<[f64; ACTION_DIM]>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn zeros(h: usize) -> Self {
        Self {
            actions: vec![[0.0; ACTION_DIM]; h],
        }
    }
}

/// Discretization layout for the classification head. Position bins are
/// per-axis around the anchor point; rotations are uniform over [-pi, pi);
/// openness is binary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinConfig {
    pub pos_bins_per_axis: usize,
    pub pos_extent: f64,
    pub rot_bins: usize,
}

pub const OPEN_BINS: usize = 2;

impl BinConfig {
    /// 17 bins of 1 cm per axis (matching the preprocessing voxel size),
    /// 5-degree rotation bins.
    pub fn default_bins() -> Self {
        Self {
            pos_bins_per_axis: 17,
            pos_extent: 0.085,
            rot_bins: 72,
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.pos_bins_per_axis % 2 == 0 || self.pos_bins_per_axis == 0 {
            return Err(HeadError::BadBinConfig(format!(
                "pos_bins_per_axis must be odd, got {}",
                self.pos_bins_per_axis
            )));
        }
        if self.pos_extent <= 0.0 {
            return Err(HeadError::BadBinConfig("pos_extent must be positive".into()));
        }
        if self.rot_bins < 2 {
            return Err(HeadError::BadBinConfig(format!(
                "rot_bins must be >= 2, got {}",
                self.rot_bins
            )));
        }
        Ok(())
    }

    pub fn pos_bin_width(&self) -> f64 {
        2.0 * self.pos_extent / self.pos_bins_per_axis as f64
    }

    pub fn rot_bin_width(&self) -> f64 {
        2.0 * PI / self.rot_bins as f64
    }

    /// Center offset of a position bin, exact zero at the middle bin.
    pub fn pos_bin_center(&self, bin: usize) -> f64 {
        let b = self.pos_bins_per_axis as f64;
        self.pos_extent * ((2 * bin + 1) as f64 - b) / b
    }

    /// Center angle of a rotation bin.
    pub fn rot_bin_center(&self, bin: usize) -> f64 {
        let n = self.rot_bins as f64;
        PI * ((2 * bin + 1) as f64 - n) / n
    }
}

/// Point-anchored discrete action: the anchor cloud point plus per-axis
/// position bins, per-axis rotation bins, and the openness bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteActionBins {
    pub anchor_index: usize,
    pub pos_bin: [usize; 3],
    pub rot_bin: [usize; 3],
    pub open_bin: usize,
}

// ── regression ───────────────────────────────────────────────────────

/// Two-layer MLP mapping each action-token row to an action vector.
pub struct RegressionHead {
    lin1: Linear,
    lin2: Linear,
}

impl RegressionHead {
    pub fn new<E: Elem>(ps: &mut ParamStore<E>, dim: usize) -> Self {
        Self {
            lin1: Linear::new(ps, "head.reg.lin1", dim, dim),
            lin2: Linear::new(ps, "head.reg.lin2", dim, ACTION_DIM),
        }
    }

    /// Map the H action rows (state token excluded) to an H x D_a chunk.
    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        ps: &ParamStore<E>,
        actions: ActionTokens,
    ) -> Result<TensorId, HeadError> {
        let rows = tape.slice_rows(actions.tokens, 0, actions.horizon)?;
        let h = self.lin1.forward(tape, ps, rows)?;
        let a = tape.gelu(h);
        Ok(self.lin2.forward(tape, ps, a)?)
    }
}

/// Decode a predicted chunk tensor into plain values.
pub fn chunk_from_tensor<E: Elem>(tape: &Tape<E>, pred: TensorId) -> ActionChunk {
    let v = tape.value(pred);
    let mut actions = Vec::with_capacity(v.rows());
    for i in 0..v.rows() {
        let mut a = [0.0; ACTION_DIM];
        for (j, slot) in a.iter_mut().enumerate() {
            *slot = v.at(i, j).as_f64();
        }
        actions.push(a);
    }
    ActionChunk { actions }
}

/// Mean over the chunk of squared L2 step errors: (1/H) sum_i |a_i - a*_i|^2.
pub fn loss_reg<E: Elem>(
    tape: &mut Tape<E>,
    pred: TensorId,
    target: &ActionChunk,
) -> Result<TensorId, HeadError> {
    let pv = tape.value(pred);
    if pv.rows() != target.horizon() || pv.cols() != ACTION_DIM {
        return Err(HeadError::ChunkShape {
            pred: pv.shape().to_vec(),
            target: vec![target.horizon(), ACTION_DIM],
        });
    }
    let h = target.horizon();
    let mut data = Vec::with_capacity(h * ACTION_DIM);
    for a in &target.actions {
        for v in a {
            data.push(E::lit(*v));
        }
    }
    let t = tape.leaf(NdArray::from_vec(vec![h, ACTION_DIM], data));
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / h as f64))
}

// ── binning ──────────────────────────────────────────────────────────

/// Discretize a keypoint pose relative to its nearest cloud point: the
/// anchor is the closest point (ties to lowest index), per-axis offsets
/// clamp into the extent, rotations bin uniformly over [-pi, pi), and
/// openness thresholds at 0.5.
pub fn bin_target(keypoint: &Pose, cloud: &PointCloud, cfg: &BinConfig) -> DiscreteActionBins {
    let anchor_index = crate::geometry::nearest_point(&cloud.positions, &keypoint.position);
    bin_relative_to(keypoint, &cloud.positions[anchor_index], anchor_index, cfg)
}

/// Binning with an explicit anchor point (shared by [`bin_target`] and the
/// classification-target builder that restricts anchors to candidates).
pub fn bin_relative_to(
    keypoint: &Pose,
    anchor_pos: &[f64; 3],
    anchor_index: usize,
    cfg: &BinConfig,
) -> DiscreteActionBins {
    let width = cfg.pos_bin_width();
    let mut pos_bin = [0usize; 3];
    for i in 0..3 {
        let offset = (keypoint.position[i] - anchor_pos[i]).clamp(-cfg.pos_extent, cfg.pos_extent);
        let b = ((offset + cfg.pos_extent) / width).floor() as i64;
        pos_bin[i] = b.clamp(0, cfg.pos_bins_per_axis as i64 - 1) as usize;
    }
    let rot_width = cfg.rot_bin_width();
    let mut rot_bin = [0usize; 3];
    for i in 0..3 {
        let a = crate::geometry::wrap_angle(keypoint.euler[i]);
        let b = ((a + PI) / rot_width).floor() as i64;
        rot_bin[i] = b.clamp(0, cfg.rot_bins as i64 - 1) as usize;
    }
    DiscreteActionBins {
        anchor_index,
        pos_bin,
        rot_bin,
        open_bin: usize::from(keypoint.openness >= 0.5),
    }
}

/// Invert the discretization: anchor position plus bin-center offsets,
/// bin-center Euler angles, and the openness bin.
pub fn unbin(bins: &DiscreteActionBins, cloud: &PointCloud, cfg: &BinConfig) -> Result<Pose, HeadError> {
    if bins.anchor_index >= cloud.len() {
        return Err(HeadError::BinOutOfRange(format!(
            "anchor {} out of range ({} points)",
            bins.anchor_index,
            cloud.len()
        )));
    }
    for (i, &b) in bins.pos_bin.iter().enumerate() {
        if b >= cfg.pos_bins_per_axis {
            return Err(HeadError::BinOutOfRange(format!("pos_bin[{i}] = {b}")));
        }
    }
    for (i, &b) in bins.rot_bin.iter().enumerate() {
        if b >= cfg.rot_bins {
            return Err(HeadError::BinOutOfRange(format!("rot_bin[{i}] = {b}")));
        }
    }
    if bins.open_bin >= OPEN_BINS {
        return Err(HeadError::BinOutOfRange(format!("open_bin = {}", bins.open_bin)));
    }
    let anchor = cloud.positions[bins.anchor_index];
    let mut position = [0.0; 3];
    for i in 0..3 {
        position[i] = anchor[i] + cfg.pos_bin_center(bins.pos_bin[i]);
    }
    let mut euler = [0.0; 3];
    for i in 0..3 {
        euler[i] = cfg.rot_bin_center(bins.rot_bin[i]);
    }
    Ok(Pose {
        position,
        euler,
        openness: bins.open_bin as f64,
    })
}

// ── anchor candidates for the classification head ────────────────────

/// For each final-stage point, the original cloud index of its
/// representative: the member closest to the pooled coordinate (ties to
/// lowest original index). These are the anchors the classification head
/// scores and the decoder reconstructs from.
pub fn anchor_candidates(cloud: &PointCloud, final_stage: &StageFeatures) -> Vec<usize> {
    final_stage
        .origin_members
        .iter()
        .zip(&final_stage.coords)
        .map(|(members, center)| {
            let mut best = members[0];
            let mut best_d = f64::INFINITY;
            for &m in members {
                let d = dist2(&cloud.positions[m], center);
                if d < best_d || (d == best_d && m < best) {
                    best_d = d;
                    best = m;
                }
            }
            best
        })
        .collect()
}

/// Classification target: nearest anchor candidate (by keypoint distance)
/// plus bins relative to that candidate. Returns the bins and the
/// candidate slot index used as the anchor-class target.
pub fn cls_target(
    keypoint: &Pose,
    cloud: &PointCloud,
    candidates: &[usize],
    cfg: &BinConfig,
) -> (DiscreteActionBins, usize) {
    let mut best_slot = 0;
    let mut best_d = f64::INFINITY;
    for (slot, &orig) in candidates.iter().enumerate() {
        let d = dist2(&cloud.positions[orig], &keypoint.position);
        if d < best_d {
            best_d = d;
            best_slot = slot;
        }
    }
    let orig = candidates[best_slot];
    (
        bin_relative_to(keypoint, &cloud.positions[orig], orig, cfg),
        best_slot,
    )
}

// ── classification head ──────────────────────────────────────────────

/// Per-component logits, each a tape tensor of shape [1 x bins] (the
/// anchor component is [N_final x 1]).
pub struct ClsLogits {
    pub pos: [TensorId; 3],
    pub rot: [TensorId; 3],
    pub open: TensorId,
    pub anchor: TensorId,
}

/// Keypoint classification head: anchor scores from a learned dot product
/// between the action token and every final-stage point embedding, and
/// component logits from an MLP over [action token; attention-pooled
/// point embedding].
pub struct ClassificationHead {
    cfg: BinConfig,
    anchor_key: Linear,
    pool_query: Linear,
    trunk: Linear,
    pos_heads: [Linear; 3],
    rot_heads: [Linear; 3],
    open_head: Linear,
    dim: usize,
}

impl ClassificationHead {
    pub fn new<E: Elem>(ps: &mut ParamStore<E>, dim: usize, cfg: BinConfig) -> Result<Self, HeadError> {
        cfg.validate()?;
        let b = cfg.pos_bins_per_axis;
        let r = cfg.rot_bins;
        Ok(Self {
            cfg,
            anchor_key: Linear::new(ps, "head.cls.anchor_key", dim, dim),
            pool_query: Linear::new(ps, "head.cls.pool_query", dim, dim),
            trunk: Linear::new(ps, "head.cls.trunk", 2 * dim, dim),
            pos_heads: [
                Linear::new(ps, "head.cls.pos_x", dim, b),
                Linear::new(ps, "head.cls.pos_y", dim, b),
                Linear::new(ps, "head.cls.pos_z", dim, b),
            ],
            rot_heads: [
                Linear::new(ps, "head.cls.rot_r", dim, r),
                Linear::new(ps, "head.cls.rot_p", dim, r),
                Linear::new(ps, "head.cls.rot_y", dim, r),
            ],
            open_head: Linear::new(ps, "head.cls.open", dim, OPEN_BINS),
            dim,
        })
    }

    pub fn bin_config(&self) -> &BinConfig {
        &self.cfg
    }

    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        ps: &ParamStore<E>,
        actions: ActionTokens,
        final_points: TensorId,
    ) -> Result<ClsLogits, HeadError> {
        if actions.horizon != 1 {
            return Err(HeadError::NeedsSingleKeypoint(actions.horizon));
        }
        // the single action query row (state token excluded)
        let a = tape.slice_rows(actions.tokens, 0, 1)?;

        // anchor scores: learned dot product against each point embedding
        let key = self.anchor_key.forward(tape, ps, a)?;
        let anchor = tape.matmul_t(final_points, key, false, true)?;

        // attention-pooled point embedding with the action token as query
        let q = self.pool_query.forward(tape, ps, a)?;
        let scores = tape.matmul_t(q, final_points, false, true)?;
        let scaled = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let probs = tape.softmax_rows(scaled, None)?;
        let pooled = tape.matmul(probs, final_points)?;

        let joint = tape.concat_cols(&[a, pooled])?;
        let hidden = self.trunk.forward(tape, ps, joint)?;
        let feats = tape.gelu(hidden);

        Ok(ClsLogits {
            pos: [
                self.pos_heads[0].forward(tape, ps, feats)?,
                self.pos_heads[1].forward(tape, ps, feats)?,
                self.pos_heads[2].forward(tape, ps, feats)?,
            ],
            rot: [
                self.rot_heads[0].forward(tape, ps, feats)?,
                self.rot_heads[1].forward(tape, ps, feats)?,
                self.rot_heads[2].forward(tape, ps, feats)?,
            ],
            open: self.open_head.forward(tape, ps, feats)?,
            anchor,
        })
    }
}

/// Sum of cross-entropies over all components (positions, rotations,
/// openness, anchor), equal weights.
pub fn loss_cls<E: Elem>(
    tape: &mut Tape<E>,
    logits: &ClsLogits,
    target: &DiscreteActionBins,
    anchor_slot: usize,
) -> Result<TensorId, HeadError> {
    let mut total = tape.cross_entropy(logits.anchor, anchor_slot)?;
    for i in 0..3 {
        let l = tape.cross_entropy(logits.pos[i], target.pos_bin[i])?;
        total = tape.add(total, l)?;
    }
    for i in 0..3 {
        let l = tape.cross_entropy(logits.rot[i], target.rot_bin[i])?;
        total = tape.add(total, l)?;
    }
    let l = tape.cross_entropy(logits.open, target.open_bin)?;
    Ok(tape.add(total, l)?)
}

/// Greedy decode: argmax every component, map the anchor slot back to its
/// original cloud index through the candidate list.
pub fn decode_cls<E: Elem>(
    tape: &Tape<E>,
    logits: &ClsLogits,
    candidates: &[usize],
) -> DiscreteActionBins {
    let argmax = |t: TensorId| -> usize {
        let v = tape.value(t);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, x) in v.data().iter().enumerate() {
            let xf = x.as_f64();
            if xf > best_v {
                best_v = xf;
                best = i;
            }
        }
        best
    };
    let slot = argmax(logits.anchor);
    DiscreteActionBins {
        anchor_index: candidates[slot],
        pos_bin: [
            argmax(logits.pos[0]),
            argmax(logits.pos[1]),
            argmax(logits.pos[2]),
        ],
        rot_bin: [
            argmax(logits.rot[0]),
            argmax(logits.rot[1]),
            argmax(logits.rot[2]),
        ],
        open_bin: argmax(logits.open),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud {
            positions: (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.0..0.6),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(0.0..0.4),
                    ]
                })
                .collect(),
            colors: vec![[0.5; 3]; n],
        }
    }

    #[test]
    fn loss_reg_zero_when_equal_and_unit_vector_case() {
        let mut tape = Tape::<f64>::new();
        let target = ActionChunk {
            actions: vec![[0.1; ACTION_DIM]; 4],
        };
        let mut data = Vec::new();
        for a in &target.actions {
            data.extend_from_slice(a);
        }
        let pred = tape.leaf(NdArray::from_vec(vec![4, ACTION_DIM], data.clone()));
        let l = loss_reg(&mut tape, pred, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // one step differs by a unit vector, H=4 -> 0.25
        let mut data2 = data.clone();
        data2[2 * ACTION_DIM] += 1.0;
        let pred2 = tape.leaf(NdArray::from_vec(vec![4, ACTION_DIM], data2));
        let l2 = loss_reg(&mut tape, pred2, &target).unwrap();
        assert!((tape.value(l2).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn loss_reg_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let h = rng.random_range(1..6usize);
            let target = ActionChunk {
                actions: (0..h)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                    .collect(),
            };
            let pred_vals: Vec<f64> = (0..h * ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::<f64>::new();
            let pred = tape.leaf(NdArray::from_vec(vec![h, ACTION_DIM], pred_vals.clone()));
            let l = loss_reg(&mut tape, pred, &target).unwrap();
            // independent scalar loop
            let mut expect = 0.0;
            for i in 0..h {
                let mut step = 0.0;
                for j in 0..ACTION_DIM {
                    let d = pred_vals[i * ACTION_DIM + j] - target.actions[i][j];
                    step += d * d;
                }
                expect += step;
            }
            expect /= h as f64;
            let got = tape.value(l).item();
            let rel = (got - expect).abs() / expect.abs().max(1e-12);
            assert!(rel <= 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn loss_reg_shape_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(NdArray::zeros(vec![3, ACTION_DIM]));
        let target = ActionChunk::zeros(4);
        assert!(matches!(
            loss_reg(&mut tape, pred, &target),
            Err(HeadError::ChunkShape { .. })
        ));
    }

    #[test]
    fn regression_head_shape_and_zero_final_layer() {
        let mut ps = ParamStore::<f64>::new(2);
        let head = RegressionHead::new(&mut ps, 16);
        for v in ps.get_mut(head.lin2.w).value.data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let toks = tape.leaf(NdArray::from_vec(
            vec![5, 16],
            (0..80).map(|i| (i as f64) * 0.01).collect(),
        ));
        let actions = ActionTokens { tokens: toks, horizon: 4 };
        let out = head.forward(&mut tape, &ps, actions).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, ACTION_DIM]);
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bin_target_at_cloud_point_gives_center_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = rand_cloud(&mut rng, 50);
        let cfg = BinConfig::default_bins();
        let kp = Pose::at(cloud.positions[17]);
        let bins = bin_target(&kp, &cloud, &cfg);
        assert_eq!(bins.anchor_index, 17);
        let center = (cfg.pos_bins_per_axis - 1) / 2;
        assert_eq!(bins.pos_bin, [center; 3]);
        // center bins decode back to the anchor exactly
        let pose = unbin(&bins, &cloud, &cfg).unwrap();
        assert_eq!(pose.position, cloud.positions[17]);
    }

    #[test]
    fn bin_target_clamps_to_edge_bin() {
        let cloud = PointCloud {
            positions: vec![[0.1, 0.1, 0.1]],
            colors: vec![[0.5; 3]],
        };
        let cfg = BinConfig::default_bins();
        let mut kp = Pose::at([0.1 + cfg.pos_extent, 0.1, 0.1]);
        let bins = bin_target(&kp, &cloud, &cfg);
        assert_eq!(bins.pos_bin[0], cfg.pos_bins_per_axis - 1);
        kp.position[0] = 0.1 + 2.0 * cfg.pos_extent; // far out of range
        let bins2 = bin_target(&kp, &cloud, &cfg);
        assert_eq!(bins2.pos_bin[0], cfg.pos_bins_per_axis - 1);
    }

    #[test]
    fn bin_target_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = BinConfig::default_bins();
        let cloud = rand_cloud(&mut rng, 200);
        for _ in 0..1000 {
            let kp = Pose {
                position: [
                    rng.random_range(0.0..0.6),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.0..0.4),
                ],
                euler: [
                    rng.random_range(-PI..PI),
                    rng.random_range(-PI..PI),
                    rng.random_range(-PI..PI),
                ],
                openness: rng.random_range(0.0..1.0),
            };
            let bins = bin_target(&kp, &cloud, &cfg);
            // oracle: explicit scan + scalar re-derivation
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, p) in cloud.positions.iter().enumerate() {
                let d = (p[0] - kp.position[0]).powi(2)
                    + (p[1] - kp.position[1]).powi(2)
                    + (p[2] - kp.position[2]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(bins.anchor_index, best);
            let width = 2.0 * cfg.pos_extent / cfg.pos_bins_per_axis as f64;
            for i in 0..3 {
                let mut off = kp.position[i] - cloud.positions[best][i];
                off = off.max(-cfg.pos_extent).min(cfg.pos_extent);
                let mut b = ((off + cfg.pos_extent) / width).floor() as i64;
                b = b.max(0).min(cfg.pos_bins_per_axis as i64 - 1);
                assert_eq!(bins.pos_bin[i], b as usize);
            }
        }
    }

    #[test]
    fn round_trip_within_half_bin_width() {
        // criterion-scale sample: 10^4 random unclamped keypoints
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BinConfig::default_bins();
        let cloud = rand_cloud(&mut rng, 300);
        let half = cfg.pos_bin_width() / 2.0;
        let rot_tol = PI / cfg.rot_bins as f64;
        for _ in 0..10_000 {
            // sample near a cloud point so offsets stay unclamped
            let base = cloud.positions[rng.random_range(0..cloud.len())];
            let kp = Pose {
                position: [
                    base[0] + rng.random_range(-0.02..0.02),
                    base[1] + rng.random_range(-0.02..0.02),
                    base[2] + rng.random_range(-0.02..0.02),
                ],
                euler: [
                    rng.random_range(-PI..PI),
                    rng.random_range(-PI..PI),
                    rng.random_range(-PI..PI),
                ],
                openness: if rng.random_range(0.0..1.0) > 0.5 { 1.0 } else { 0.0 },
            };
            let bins = bin_target(&kp, &cloud, &cfg);
            let pose = unbin(&bins, &cloud, &cfg).unwrap();
            // the offset to the TRUE anchor may exceed the sampled 2 cm
            // jitter only through clamping, which cannot happen here
            for i in 0..3 {
                assert!(
                    (pose.position[i] - kp.position[i]).abs() <= half + 1e-12,
                    "axis {i}"
                );
                assert!((pose.euler[i] - crate::geometry::wrap_angle(kp.euler[i])).abs() <= rot_tol + 1e-12);
            }
            assert_eq!(pose.openness >= 0.5, kp.openness >= 0.5);
        }
    }

    #[test]
    fn rotation_preserves_anchor_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bbox = crate::geometry::WorkspaceBox::new([0.0, -0.3, 0.0], [0.6, 0.3, 0.4]).unwrap();
        let cloud = rand_cloud(&mut rng, 100);
        let kp = Pose::at([0.3, 0.0, 0.2]);
        let before = bin_target(&kp, &cloud, &BinConfig::default_bins()).anchor_index;
        for _ in 0..20 {
            let theta = rng.random_range(-PI..PI);
            let (c2, k2) = crate::geometry::rotate_z(&cloud, &kp, theta, &bbox);
            let after = bin_target(&k2, &c2, &BinConfig::default_bins()).anchor_index;
            assert_eq!(before, after);
        }
    }

    #[test]
    fn unbin_rejects_out_of_range() {
        let cloud = PointCloud {
            positions: vec![[0.0; 3]],
            colors: vec![[0.0; 3]],
        };
        let cfg = BinConfig::default_bins();
        let mut bins = DiscreteActionBins {
            anchor_index: 0,
            pos_bin: [0; 3],
            rot_bin: [0; 3],
            open_bin: 0,
        };
        bins.pos_bin[1] = cfg.pos_bins_per_axis;
        assert!(unbin(&bins, &cloud, &cfg).is_err());
        bins.pos_bin[1] = 0;
        bins.anchor_index = 5;
        assert!(unbin(&bins, &cloud, &cfg).is_err());
    }

    #[test]
    fn cls_head_shapes_and_losses() {
        let cfg = BinConfig {
            pos_bins_per_axis: 5,
            pos_extent: 0.05,
            rot_bins: 8,
        };
        let mut ps = ParamStore::<f64>::new(7);
        let head = ClassificationHead::new(&mut ps, 12, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let toks = tape.leaf(NdArray::from_vec(
            vec![2, 12],
            (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let pts = tape.leaf(NdArray::from_vec(
            vec![6, 12],
            (0..72).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let actions = ActionTokens { tokens: toks, horizon: 1 };
        let logits = head.forward(&mut tape, &ps, actions, pts).unwrap();
        assert_eq!(tape.value(logits.anchor).shape(), &[6, 1]);
        assert_eq!(tape.value(logits.pos[0]).shape(), &[1, 5]);
        assert_eq!(tape.value(logits.rot[2]).shape(), &[1, 8]);
        assert_eq!(tape.value(logits.open).shape(), &[1, 2]);

        // uniform logits -> sum of ln(B_k) over components
        let mut tape2 = Tape::<f64>::new();
        let zero = |t: &mut Tape<f64>, r: usize, c: usize| t.leaf(NdArray::zeros(vec![r, c]));
        let logits2 = ClsLogits {
            pos: [zero(&mut tape2, 1, 5), zero(&mut tape2, 1, 5), zero(&mut tape2, 1, 5)],
            rot: [zero(&mut tape2, 1, 8), zero(&mut tape2, 1, 8), zero(&mut tape2, 1, 8)],
            open: zero(&mut tape2, 1, 2),
            anchor: zero(&mut tape2, 6, 1),
        };
        let target = DiscreteActionBins {
            anchor_index: 0,
            pos_bin: [2, 0, 4],
            rot_bin: [1, 7, 3],
            open_bin: 1,
        };
        let l = loss_cls(&mut tape2, &logits2, &target, 2).unwrap();
        let expect = 3.0 * 5.0f64.ln() + 3.0 * 8.0f64.ln() + 2.0f64.ln() + 6.0f64.ln();
        assert!((tape2.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_cls_matches_component_sum_and_perfect_logits() {
        let mut tape = Tape::<f64>::new();
        let onehot = |t: &mut Tape<f64>, n: usize, hot: usize| {
            let mut v = vec![-10.0; n];
            v[hot] = 10.0;
            t.leaf(NdArray::from_vec(vec![1, n], v))
        };
        let target = DiscreteActionBins {
            anchor_index: 1,
            pos_bin: [1, 2, 0],
            rot_bin: [3, 0, 2],
            open_bin: 0,
        };
        let mut anchor_v = vec![-10.0; 4];
        anchor_v[1] = 10.0;
        let anchor = tape.leaf(NdArray::from_vec(vec![4, 1], anchor_v));
        let logits = ClsLogits {
            pos: [
                onehot(&mut tape, 5, 1),
                onehot(&mut tape, 5, 2),
                onehot(&mut tape, 5, 0),
            ],
            rot: [
                onehot(&mut tape, 6, 3),
                onehot(&mut tape, 6, 0),
                onehot(&mut tape, 6, 2),
            ],
            open: onehot(&mut tape, 2, 0),
            anchor,
        };
        let l = loss_cls(&mut tape, &logits, &target, 1).unwrap();
        assert!(tape.value(l).item() < 0.01, "perfect one-hot logits");

        // decomposition oracle: sum the eight component CEs independently
        let mut total = 0.0;
        let ce = |vals: &[f64], t: usize| {
            let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vals.iter().map(|v| (v - mx).exp()).sum();
            mx + z.ln() - vals[t]
        };
        for (i, t) in target.pos_bin.iter().enumerate() {
            total += ce(tape.value(logits.pos[i]).data(), *t);
        }
        for (i, t) in target.rot_bin.iter().enumerate() {
            total += ce(tape.value(logits.rot[i]).data(), *t);
        }
        total += ce(tape.value(logits.open).data(), target.open_bin);
        total += ce(tape.value(logits.anchor).data(), 1);
        assert!((tape.value(l).item() - total).abs() < 1e-12);
    }

    #[test]
    fn anchor_argmax_invariant_to_constant_shift() {
        let mut tape = Tape::<f64>::new();
        let vals = vec![0.3, -0.1, 0.9, 0.2];
        let a1 = tape.leaf(NdArray::from_vec(vec![4, 1], vals.clone()));
        let shifted: Vec<f64> = vals.iter().map(|v| v + 5.0).collect();
        let a2 = tape.leaf(NdArray::from_vec(vec![4, 1], shifted));
        let dummy = tape.leaf(NdArray::zeros(vec![1, 2]));
        let mk = |anchor| ClsLogits {
            pos: [dummy, dummy, dummy],
            rot: [dummy, dummy, dummy],
            open: dummy,
            anchor,
        };
        let candidates = [10, 11, 12, 13];
        let d1 = decode_cls(&tape, &mk(a1), &candidates);
        let d2 = decode_cls(&tape, &mk(a2), &candidates);
        assert_eq!(d1.anchor_index, 12);
        assert_eq!(d1.anchor_index, d2.anchor_index);
    }

    #[test]
    fn cls_head_rejects_multi_step_horizon() {
        let cfg = BinConfig::default_bins();
        let mut ps = ParamStore::<f64>::new(9);
        let head = ClassificationHead::new(&mut ps, 8, cfg).unwrap();
        let mut tape = Tape::new();
        let toks = tape.leaf(NdArray::zeros(vec![5, 8]));
        let pts = tape.leaf(NdArray::zeros(vec![3, 8]));
        let actions = ActionTokens { tokens: toks, horizon: 4 };
        assert!(matches!(
            head.forward(&mut tape, &ps, actions, pts),
            Err(HeadError::NeedsSingleKeypoint(4))
        ));
    }

    #[test]
    fn cls_head_gradients_match_fd() {
        let cfg = BinConfig {
            pos_bins_per_axis: 5,
            pos_extent: 0.05,
            rot_bins: 6,
        };
        let mut ps = ParamStore::<f64>::new(10);
        let head = ClassificationHead::new(&mut ps, 8, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tok_vals: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts_vals: Vec<f64> = (0..16 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = DiscreteActionBins {
            anchor_index: 3,
            pos_bin: [1, 4, 2],
            rot_bin: [0, 5, 3],
            open_bin: 1,
        };

        let loss_of = |ps: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let toks = tape.leaf(NdArray::from_vec(vec![2, 8], tok_vals.clone()));
            let pts = tape.leaf(NdArray::from_vec(vec![16, 8], pts_vals.clone()));
            let actions = ActionTokens { tokens: toks, horizon: 1 };
            let logits = head.forward(&mut tape, ps, actions, pts).unwrap();
            let l = loss_cls(&mut tape, &logits, &target, 3).unwrap();
            tape.value(l).item()
        };
        {
            let mut tape = Tape::new();
            let toks = tape.leaf(NdArray::from_vec(vec![2, 8], tok_vals.clone()));
            let pts = tape.leaf(NdArray::from_vec(vec![16, 8], pts_vals.clone()));
            let actions = ActionTokens { tokens: toks, horizon: 1 };
            let logits = head.forward(&mut tape, &ps, actions, pts).unwrap();
            let l = loss_cls(&mut tape, &logits, &target, 3).unwrap();
            tape.backward(l).unwrap();
            tape.accumulate_param_grads(&mut ps);
        }
        let h = 1e-5;
        let ids: Vec<crate::nn::ParamId> = ps.iter().map(|(id, _)| id).collect();
        for id in ids {
            let grads = ps.grad(id).data().to_vec();
            let n = grads.len();
            for i in (0..n).step_by((n / 8).max(1)) {
                let orig = ps.value(id).data()[i];
                ps.get_mut(id).value.data_mut()[i] = orig + h;
                let hi = loss_of(&ps);
                ps.get_mut(id).value.data_mut()[i] = orig - h;
                let lo = loss_of(&ps);
                ps.get_mut(id).value.data_mut()[i] = orig;
                let fd = (hi - lo) / (2.0 * h);
                let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-3, "param {id:?} idx {i}: {} vs {fd}", grads[i]);
            }
        }
    }

    #[test]
    fn regression_head_gradients_match_fd() {
        let mut ps = ParamStore::<f64>::new(12);
        let head = RegressionHead::new(&mut ps, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tok_vals: Vec<f64> = (0..3 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = ActionChunk {
            actions: (0..2)
                .map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5)))
                .collect(),
        };
        let loss_of = |ps: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let toks = tape.leaf(NdArray::from_vec(vec![3, 8], tok_vals.clone()));
            let actions = ActionTokens { tokens: toks, horizon: 2 };
            let pred = head.forward(&mut tape, ps, actions).unwrap();
            let l = loss_reg(&mut tape, pred, &target).unwrap();
            tape.value(l).item()
        };
        {
            let mut tape = Tape::new();
            let toks = tape.leaf(NdArray::from_vec(vec![3, 8], tok_vals.clone()));
            let actions = ActionTokens { tokens: toks, horizon: 2 };
            let pred = head.forward(&mut tape, &ps, actions).unwrap();
            let l = loss_reg(&mut tape, pred, &target).unwrap();
            tape.backward(l).unwrap();
            tape.accumulate_param_grads(&mut ps);
        }
        let h = 1e-5;
        let ids: Vec<crate::nn::ParamId> = ps.iter().map(|(id, _)| id).collect();
        for id in ids {
            let grads = ps.grad(id).data().to_vec();
            for i in 0..grads.len() {
                let orig = ps.value(id).data()[i];
                ps.get_mut(id).value.data_mut()[i] = orig + h;
                let hi = loss_of(&ps);
                ps.get_mut(id).value.data_mut()[i] = orig - h;
                let lo = loss_of(&ps);
                ps.get_mut(id).value.data_mut()[i] = orig;
                let fd = (hi - lo) / (2.0 * h);
                let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4);
            }
        }
    }
}

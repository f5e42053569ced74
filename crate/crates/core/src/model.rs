//! Model assembly: expert + head + context table + parameter store, with
//! the per-sample loss and prediction paths shared by training, gradient
//! checking, and evaluation.

use thiserror::Error;

use crate::context::{ContextTable, InstructionId};
use crate::expert::{Expert, ExpertConfig, ExpertError, ForwardOutput, Variant, ACTION_DIM};
use crate::geometry::{PointCloud, Pose, WorkspaceBox};
use crate::heads::{
    anchor_candidates, chunk_from_tensor, cls_target, decode_cls, loss_cls, loss_reg, unbin,
    ActionChunk, BinConfig, ClassificationHead, DiscreteActionBins, HeadError, RegressionHead,
};
use crate::nn::{Elem, ParamStore, Tape, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0}")]
    Expert(#[from] ExpertError),
    #[error("{0}")]
    Head(#[from] HeadError),
    #[error("{0}")]
    Context(#[from] crate::context::ContextError),
    #[error("{0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("head/target mismatch: {0}")]
    TargetMismatch(String),
}

/// Which action head the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Regression,
    Classification,
}

impl HeadMode {
    pub fn name(&self) -> &'static str {
        match self {
            HeadMode::Regression => "regression",
            HeadMode::Classification => "classification",
        }
    }
}

pub enum HeadKind {
    Regression(RegressionHead),
    Classification(ClassificationHead),
}

/// Context-table settings (the table itself is rebuilt, never stored).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub tokens_per_instruction: usize,
}

impl ContextConfig {
    pub fn toy() -> Self {
        Self {
            seed: 1234,
            vocab_size: 8,
            tokens_per_instruction: 4,
        }
    }
}

/// One training/evaluation observation with its ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub cloud: PointCloud,
    pub state: Vec<f64>,
    pub instruction: InstructionId,
    pub target: SampleTarget,
    pub workspace: WorkspaceBox,
}

#[derive(Debug, Clone)]
pub enum SampleTarget {
    /// Long-horizon keypoint pose (classification head, or regression with
    /// H = 1 predicting the absolute pose).
    Keypoint(Pose),
    /// Delta-motion chunk toward the goal (regression head).
    Chunk { chunk: ActionChunk, goal: Pose },
}

impl SampleTarget {
    /// The ground-truth final gripper pose this sample drives toward.
    pub fn goal_pose(&self) -> &Pose {
        match self {
            SampleTarget::Keypoint(p) => p,
            SampleTarget::Chunk { goal, .. } => goal,
        }
    }
}

/// Per-sample training metrics, averaged over the batch by the trainer.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleMetrics {
    pub loss: f64,
    /// Classification: fraction of correct per-axis position bins.
    pub acc_pos: f64,
    pub acc_rot: f64,
    pub acc_open: f64,
    pub acc_anchor: f64,
    /// Regression: final-position Euclidean error in meters.
    pub l2_error: f64,
}

/// Decoded model output for one observation.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub pose: Pose,
    pub bins: Option<DiscreteActionBins>,
    pub chunk: Option<ActionChunk>,
}

pub struct Model<E: Elem> {
    pub store: ParamStore<E>,
    pub expert: Expert,
    pub table: ContextTable,
    pub head: HeadKind,
    pub variant: Variant,
}

impl<E: Elem> Model<E> {
    pub fn build(
        seed: u64,
        config: &ExpertConfig,
        bins: BinConfig,
        ctx: &ContextConfig,
        head_mode: HeadMode,
        variant: Variant,
    ) -> Result<Self, ModelError> {
        let mut store = ParamStore::new(seed);
        let expert = Expert::build(&mut store, config, variant)?;
        let table = ContextTable::new(
            ctx.seed,
            ctx.vocab_size,
            ctx.tokens_per_instruction,
            config.context_dim,
        );
        let head = match head_mode {
            HeadMode::Regression => HeadKind::Regression(RegressionHead::new(
                &mut store,
                config.final_dim(),
            )),
            HeadMode::Classification => HeadKind::Classification(ClassificationHead::new(
                &mut store,
                config.final_dim(),
                bins,
            )?),
        };
        Ok(Self {
            store,
            expert,
            table,
            head,
            variant,
        })
    }

    pub fn head_mode(&self) -> HeadMode {
        match self.head {
            HeadKind::Regression(_) => HeadMode::Regression,
            HeadKind::Classification(_) => HeadMode::Classification,
        }
    }

    fn run_expert(
        &self,
        tape: &mut Tape<E>,
        sample: &TrainSample,
    ) -> Result<ForwardOutput, ModelError> {
        let ctx = crate::context::provide(tape, &self.store, &self.table, &sample.instruction)?;
        let out = match self.variant {
            Variant::MultiScale => {
                self.expert
                    .forward(tape, &self.store, &sample.cloud, &sample.state, ctx)?
            }
            Variant::CoarseBaseline => self.expert.forward_coarse_baseline(
                tape,
                &self.store,
                &sample.cloud,
                &sample.state,
                ctx,
            )?,
        };
        Ok(out)
    }

    /// Forward plus loss for one sample; the tape is left ready for
    /// `backward(loss)`.
    pub fn sample_loss(
        &self,
        tape: &mut Tape<E>,
        sample: &TrainSample,
    ) -> Result<(TensorId, SampleMetrics), ModelError> {
        let out = self.run_expert(tape, sample)?;
        match (&self.head, &sample.target) {
            (HeadKind::Regression(head), target) => {
                let target_chunk = regression_target(target, self.expert.config.action_horizon)?;
                let pred = head.forward(tape, &self.store, out.actions)?;
                let loss = loss_reg(tape, pred, &target_chunk)?;
                let chunk = chunk_from_tensor(tape, pred);
                let final_pos = decode_final_position(sample, &chunk);
                let goal = sample.target.goal_pose().position;
                let l2 = crate::geometry::dist2(&final_pos, &goal).sqrt();
                Ok((
                    loss,
                    SampleMetrics {
                        loss: tape.value(loss).item().as_f64(),
                        l2_error: l2,
                        ..Default::default()
                    },
                ))
            }
            (HeadKind::Classification(head), SampleTarget::Keypoint(kp)) => {
                let candidates = anchor_candidates(&sample.cloud, &out.final_stage);
                let (bins, slot) = cls_target(kp, &sample.cloud, &candidates, head.bin_config());
                let logits = head.forward(tape, &self.store, out.actions, out.final_stage.embeddings)?;
                let loss = loss_cls(tape, &logits, &bins, slot)?;
                let decoded = decode_cls(tape, &logits, &candidates);
                let acc = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                let metrics = SampleMetrics {
                    loss: tape.value(loss).item().as_f64(),
                    acc_pos: (0..3)
                        .map(|i| acc(decoded.pos_bin[i], bins.pos_bin[i]))
                        .sum::<f64>()
                        / 3.0,
                    acc_rot: (0..3)
                        .map(|i| acc(decoded.rot_bin[i], bins.rot_bin[i]))
                        .sum::<f64>()
                        / 3.0,
                    acc_open: acc(decoded.open_bin, bins.open_bin),
                    acc_anchor: acc(decoded.anchor_index, bins.anchor_index),
                    ..Default::default()
                };
                Ok((loss, metrics))
            }
            (HeadKind::Classification(_), SampleTarget::Chunk { .. }) => {
                Err(ModelError::TargetMismatch(
                    "classification head cannot train on delta-chunk targets".into(),
                ))
            }
        }
    }

    /// Evaluation path: forward, decode, no gradients.
    pub fn predict(&self, sample: &TrainSample) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new();
        let out = self.run_expert(&mut tape, sample)?;
        match &self.head {
            HeadKind::Regression(head) => {
                let pred = head.forward(&mut tape, &self.store, out.actions)?;
                let chunk = chunk_from_tensor(&tape, pred);
                let pos = decode_final_position(sample, &chunk);
                let last = chunk.actions[chunk.horizon() - 1];
                let pose = Pose {
                    position: pos,
                    euler: [last[3], last[4], last[5]],
                    openness: if last[6] >= 0.5 { 1.0 } else { 0.0 },
                };
                Ok(Prediction {
                    pose,
                    bins: None,
                    chunk: Some(chunk),
                })
            }
            HeadKind::Classification(head) => {
                let candidates = anchor_candidates(&sample.cloud, &out.final_stage);
                let logits =
                    head.forward(&mut tape, &self.store, out.actions, out.final_stage.embeddings)?;
                let bins = decode_cls(&tape, &logits, &candidates);
                let pose = unbin(&bins, &sample.cloud, head.bin_config())?;
                Ok(Prediction {
                    pose,
                    bins: Some(bins),
                    chunk: None,
                })
            }
        }
    }

    /// Forward pass exposing structural counts (tokens per stage, window
    /// counts) for inspection.
    pub fn inspect_forward(&self, sample: &TrainSample) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::new();
        self.run_expert(&mut tape, sample)
    }
}

/// Build the H x D_a regression target for a sample.
fn regression_target(target: &SampleTarget, horizon: usize) -> Result<ActionChunk, ModelError> {
    match target {
        SampleTarget::Chunk { chunk, .. } => {
            if chunk.horizon() != horizon {
                return Err(ModelError::TargetMismatch(format!(
                    "chunk horizon {} vs configured {horizon}",
                    chunk.horizon()
                )));
            }
            Ok(chunk.clone())
        }
        SampleTarget::Keypoint(kp) => {
            if horizon != 1 {
                return Err(ModelError::TargetMismatch(format!(
                    "keypoint regression requires H = 1, configured H = {horizon}"
                )));
            }
            let mut a = [0.0; ACTION_DIM];
            a[..3].copy_from_slice(&kp.position);
            a[3..6].copy_from_slice(&kp.euler);
            a[6] = kp.openness;
            Ok(ActionChunk { actions: vec![a] })
        }
    }
}

/// Final gripper position a predicted chunk drives to: integrated deltas
/// from the state position for chunk targets, absolute for keypoints.
pub fn decode_final_position(sample: &TrainSample, chunk: &ActionChunk) -> [f64; 3] {
    match &sample.target {
        SampleTarget::Chunk { .. } => {
            let mut p = [sample.state[0], sample.state[1], sample.state[2]];
            for a in &chunk.actions {
                for i in 0..3 {
                    p[i] += a[i];
                }
            }
            p
        }
        SampleTarget::Keypoint(_) => {
            let last = chunk.actions[chunk.horizon() - 1];
            [last[0], last[1], last[2]]
        }
    }
}

/// Gravity-axis augmentation applied jointly to the observation and its
/// target, so recomputed bins stay valid after rotation.
pub fn augment_sample(sample: &TrainSample, theta: f64) -> TrainSample {
    let kp = match &sample.target {
        SampleTarget::Keypoint(p) => *p,
        SampleTarget::Chunk { goal, .. } => *goal,
    };
    let (cloud, kp_rot) = crate::geometry::rotate_z(&sample.cloud, &kp, theta, &sample.workspace);

    // the proprioceptive state holds a pose in the same frame
    let state_pose = Pose {
        position: [sample.state[0], sample.state[1], sample.state[2]],
        euler: [sample.state[3], sample.state[4], sample.state[5]],
        openness: sample.state[6],
    };
    let (_, state_rot) = crate::geometry::rotate_z(
        &PointCloud {
            positions: vec![state_pose.position],
            colors: vec![[0.0; 3]],
        },
        &state_pose,
        theta,
        &sample.workspace,
    );
    let mut state = sample.state.clone();
    state[..3].copy_from_slice(&state_rot.position);
    state[3..6].copy_from_slice(&state_rot.euler);

    let target = match &sample.target {
        SampleTarget::Keypoint(_) => SampleTarget::Keypoint(kp_rot),
        SampleTarget::Chunk { chunk, .. } => {
            let (sin, cos) = theta.sin_cos();
            let actions = chunk
                .actions
                .iter()
                .map(|a| {
                    let mut r = *a;
                    // delta positions rotate as vectors
                    r[0] = cos * a[0] - sin * a[1];
                    r[1] = sin * a[0] + cos * a[1];
                    r
                })
                .collect();
            SampleTarget::Chunk {
                chunk: ActionChunk { actions },
                goal: kp_rot,
            }
        }
    };
    TrainSample {
        cloud,
        state,
        instruction: sample.instruction.clone(),
        target,
        workspace: sample.workspace,
    }
}

/// Success rule shared by evaluation: final position within threshold and
/// openness correct.
pub fn is_success(pred: &Prediction, goal: &Pose, threshold: f64) -> bool {
    let err = crate::geometry::dist2(&pred.pose.position, &goal.position).sqrt();
    err <= threshold && (pred.pose.openness >= 0.5) == (goal.openness >= 0.5)
}

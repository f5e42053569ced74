//! Behavior-cloning optimization: decoupled-weight-decay Adam, cosine
//! learning-rate schedule with warmup, the deterministic training loop,
//! and the finite-difference gradient-check harness.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{augment_sample, Model, ModelError, SampleMetrics, TrainSample};
use crate::nn::{Elem, NdArray, ParamId, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (lr {lr:.3e})")]
    NonFiniteLoss { step: usize, lr: f64 },
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("gradient check failed for group '{group}': max rel err {max_rel_err:.3e} > {tolerance:.3e}")]
    GradCheckFailed {
        group: String,
        max_rel_err: f64,
        tolerance: f64,
    },
}

/// Adam moment buffers plus the decoupled weight-decay settings.
pub struct OptimState<E> {
    m: Vec<NdArray<E>>,
    v: Vec<NdArray<E>>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<E: Elem> OptimState<E> {
    pub fn new(ps: &crate::nn::ParamStore<E>) -> Self {
        Self {
            m: ps.iter().map(|(_, p)| NdArray::zeros(p.value.shape().to_vec())).collect(),
            v: ps.iter().map(|(_, p)| NdArray::zeros(p.value.shape().to_vec())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update over every trainable parameter: bias-corrected
/// moments, decay applied to the value (not the gradient).
pub fn optim_step<E: Elem>(
    ps: &mut crate::nn::ParamStore<E>,
    state: &mut OptimState<E>,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2) = (E::lit(state.beta1), E::lit(state.beta2));
    let one_m_b1 = E::lit(1.0 - state.beta1);
    let one_m_b2 = E::lit(1.0 - state.beta2);
    for (i, (_, p)) in ps.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (val, g)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .enumerate()
        {
            m[j] = b1 * m[j] + one_m_b1 * *g;
            v[j] = b2 * v[j] + one_m_b2 * *g * *g;
            let m_hat = m[j].as_f64() / bc1;
            let v_hat = v[j].as_f64() / bc2;
            let update = lr * m_hat / (v_hat.sqrt() + state.eps)
                + lr * state.weight_decay * val.as_f64();
            *val = *val - E::lit(update);
        }
    }
}

/// Cosine decay with linear warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_steps: usize) -> Self {
        assert!(warmup_steps < total_steps.max(1), "warmup must precede total");
        Self {
            base_lr,
            total_steps,
            warmup_steps,
        }
    }

    /// Paper-scale default learning rate.
    pub const DEFAULT_BASE_LR: f64 = 5e-5;
}

/// Learning rate at a step: linear warmup to base, then cosine to zero.
/// Steps past the end clamp to the final value.
pub fn lr_at(schedule: &Schedule, step: usize) -> f64 {
    let s = &schedule;
    if s.warmup_steps > 0 && step <= s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let step = step.min(s.total_steps);
    let span = (s.total_steps - s.warmup_steps).max(1);
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// A full training run description.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub augment: bool,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub threads: usize,
}

impl TrainRun {
    pub fn toy(seed: u64, steps: usize) -> Self {
        Self {
            seed,
            batch_size: 16,
            steps,
            augment: false,
            schedule: Schedule::new(1e-3, steps.max(1), 100.min(steps / 10)),
            weight_decay: 0.01,
            threads: 0,
        }
    }
}

/// One metrics row per optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub metrics: SampleMetrics,
}

/// Per-sample seed derivation: parallel batch assembly cannot reorder
/// randomness because every sample's seed is a pure function of
/// (run seed, step, batch index).
pub fn sample_seed(run_seed: u64, step: usize, batch_index: usize) -> u64 {
    let mut x = run_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((step as u64) << 20)
        .wrapping_add(batch_index as u64);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Run behavior cloning: per step, sample a batch, optionally rotate the
/// observations and targets around the gravity axis, average per-sample
/// gradients (merged in batch order for determinism), and apply AdamW at
/// the scheduled rate. Aborts on a non-finite loss.
pub fn train_loop<E, F>(
    run: &TrainRun,
    model: &mut Model<E>,
    sampler: F,
) -> Result<Vec<StepMetrics>, TrainError>
where
    E: Elem,
    F: Fn(u64) -> TrainSample + Sync,
{
    let mut optim = OptimState::new(&model.store);
    optim.weight_decay = run.weight_decay;
    let mut log = Vec::with_capacity(run.steps);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(if run.threads == 0 { 0 } else { run.threads })
        .build()
        .expect("thread pool");

    for step in 0..run.steps {
        let lr = lr_at(&run.schedule, step);
        let model_ref = &*model;
        let sampler_ref = &sampler;
        let results: Vec<Result<(Vec<(ParamId, NdArray<E>)>, SampleMetrics), ModelError>> = pool
            .install(|| {
                (0..run.batch_size)
                    .into_par_iter()
                    .map(|b| {
                        let seed = sample_seed(run.seed, step, b);
                        let mut sample = sampler_ref(seed);
                        if run.augment {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
                            let theta = rng
                                .random_range(-std::f64::consts::PI..std::f64::consts::PI);
                            sample = augment_sample(&sample, theta);
                        }
                        let mut tape = Tape::new();
                        let (loss, metrics) = model_ref.sample_loss(&mut tape, &sample)?;
                        tape.backward(loss).map_err(ModelError::from)?;
                        Ok((tape.param_grads(), metrics))
                    })
                    .collect()
            });

        model.store.reset_grads();
        let mut agg = SampleMetrics::default();
        let scale = E::lit(1.0 / run.batch_size as f64);
        for r in results {
            let (grads, metrics) = r?;
            for (pid, mut g) in grads {
                for v in g.data_mut() {
                    *v = *v * scale;
                }
                model.store.accumulate_grad(pid, &g);
            }
            agg.loss += metrics.loss;
            agg.acc_pos += metrics.acc_pos;
            agg.acc_rot += metrics.acc_rot;
            agg.acc_open += metrics.acc_open;
            agg.acc_anchor += metrics.acc_anchor;
            agg.l2_error += metrics.l2_error;
        }
        let inv = 1.0 / run.batch_size as f64;
        agg.loss *= inv;
        agg.acc_pos *= inv;
        agg.acc_rot *= inv;
        agg.acc_open *= inv;
        agg.acc_anchor *= inv;
        agg.l2_error *= inv;

        if !agg.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, lr });
        }
        optim_step(&mut model.store, &mut optim, lr);
        log.push(StepMetrics {
            step,
            lr,
            metrics: agg,
        });
    }
    Ok(log)
}

/// Result of checking one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub scalars_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err > self.tolerance)
            .collect()
    }
}

const FD_STEP: f64 = 1e-5;
/// Relative-error floor: gradients at or below this magnitude are
/// compared absolutely, since FD truncation dominates tiny values.
const REL_FLOOR: f64 = 1e-6;

/// Compare analytic gradients of the active loss against 64-bit central
/// finite differences on a random subset of each parameter group
/// (at least `scalars_per_group`, or the whole group if smaller).
///
/// `POINTACT_TEST_CORRUPT_GRAD=<name substring>` perturbs the analytic
/// gradient of matching groups before comparison; it exists only to prove
/// the harness actually detects broken backward passes.
pub fn grad_check(
    model: &mut Model<f64>,
    sample: &TrainSample,
    tolerance: f64,
    scalars_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    model.store.reset_grads();
    {
        let mut tape = Tape::new();
        let (loss, _) = model.sample_loss(&mut tape, sample)?;
        tape.backward(loss).map_err(ModelError::from)?;
        tape.accumulate_param_grads(&mut model.store);
    }
    let corrupt = std::env::var("POINTACT_TEST_CORRUPT_GRAD").ok();

    let ids: Vec<(ParamId, String, usize, bool)> = model
        .store
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value.len(), p.trainable))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for (id, name, len, trainable) in ids {
        if !trainable {
            continue;
        }
        let mut analytic = model.store.grad(id).data().to_vec();
        if let Some(pat) = &corrupt {
            if !pat.is_empty() && name.contains(pat.as_str()) {
                for g in &mut analytic {
                    *g += 1e-2;
                }
            }
        }
        let indices: Vec<usize> = if len <= scalars_per_group {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, scalars_per_group).into_iter().collect()
        };
        let mut max_rel: f64 = 0.0;
        for &i in &indices {
            let orig = model.store.value(id).data()[i];
            model.store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let hi = eval_loss(model, sample)?;
            model.store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let lo = eval_loss(model, sample)?;
            model.store.get_mut(id).value.data_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * FD_STEP);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
        }
        groups.push(GroupCheck {
            name,
            scalars_checked: indices.len(),
            max_rel_err: max_rel,
        });
    }
    let report = GradCheckReport { groups, tolerance };
    if let Some(worst) = report.failures().first() {
        return Err(TrainError::GradCheckFailed {
            group: worst.name.clone(),
            max_rel_err: worst.max_rel_err,
            tolerance,
        });
    }
    Ok(report)
}

fn eval_loss(model: &Model<f64>, sample: &TrainSample) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (loss, _) = model.sample_loss(&mut tape, sample)?;
    Ok(tape.value(loss).item())
}

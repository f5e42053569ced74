//! Frozen context-embedding provider standing in for a VLM backbone, plus
//! the proprioceptive-state projection.
//!
//! The table is a deterministic function of (seed, vocabulary, tokens per
//! instruction, dim). It is reconstructed from the config, never stored in
//! checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::nn::{Elem, Linear, NdArray, NnError, ParamStore, Tape, TensorId};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("instruction id {id} out of range (vocabulary size {vocab})")]
    BadInstruction { id: usize, vocab: usize },
    #[error("state length {got} does not match configured {expected}")]
    BadStateLength { got: usize, expected: usize },
    #[error("{0}")]
    Nn(#[from] NnError),
}

/// Task/instruction identifier with an optional human-readable label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionId {
    pub id: usize,
    pub label: Option<String>,
}

impl InstructionId {
    pub fn new(id: usize) -> Self {
        Self { id, label: None }
    }
}

/// Seeded embedding store: `vocab` instructions, `tokens` rows of `dim`
/// values each. Frozen unless explicitly configured trainable.
pub struct ContextTable {
    pub vocab: usize,
    pub tokens: usize,
    pub dim: usize,
    pub seed: u64,
    store: Vec<f64>,
    pub trainable: bool,
    /// Present only when trainable: the table lives in the param store.
    pub param: Option<crate::nn::ParamId>,
}

impl ContextTable {
    pub fn new(seed: u64, vocab: usize, tokens: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let store = (0..vocab * tokens * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            vocab,
            tokens,
            dim,
            seed,
            store,
            trainable: false,
            param: None,
        }
    }

    /// Register the table as one trainable parameter (vocab*tokens rows).
    pub fn make_trainable<E: Elem>(&mut self, ps: &mut ParamStore<E>) {
        let id = ps.add(
            "context.table",
            vec![self.vocab * self.tokens, self.dim],
            crate::nn::Init::Zeros,
            true,
        );
        let data: Vec<E> = self.store.iter().map(|v| E::lit(*v)).collect();
        ps.get_mut(id).value =
            NdArray::from_vec(vec![self.vocab * self.tokens, self.dim], data);
        self.trainable = true;
        self.param = Some(id);
    }

    /// Raw slice for an instruction (row-major tokens x dim).
    pub fn slice(&self, id: usize) -> Result<&[f64], ContextError> {
        if id >= self.vocab {
            return Err(ContextError::BadInstruction {
                id,
                vocab: self.vocab,
            });
        }
        let n = self.tokens * self.dim;
        Ok(&self.store[id * n..(id + 1) * n])
    }
}

/// Mount the instruction's context embeddings on the tape. Frozen tables
/// mount as constant leaves; trainable ones route through the parameter.
pub fn provide<E: Elem>(
    tape: &mut Tape<E>,
    ps: &ParamStore<E>,
    table: &ContextTable,
    id: &InstructionId,
) -> Result<TensorId, ContextError> {
    if id.id >= table.vocab {
        return Err(ContextError::BadInstruction {
            id: id.id,
            vocab: table.vocab,
        });
    }
    if let Some(pid) = table.param {
        let full = tape.param(ps, pid);
        let start = id.id * table.tokens;
        return Ok(tape.slice_rows(full, start, table.tokens)?);
    }
    let data: Vec<E> = table.slice(id.id)?.iter().map(|v| E::lit(*v)).collect();
    Ok(tape.leaf(NdArray::from_vec(vec![table.tokens, table.dim], data)))
}

/// Project the proprioceptive state vector to a single token row.
pub fn project_state<E: Elem>(
    tape: &mut Tape<E>,
    ps: &ParamStore<E>,
    proj: &Linear,
    state: &[f64],
) -> Result<TensorId, ContextError> {
    if state.len() != proj.in_dim {
        return Err(ContextError::BadStateLength {
            got: state.len(),
            expected: proj.in_dim,
        });
    }
    let row = tape.leaf(NdArray::from_vec(
        vec![1, state.len()],
        state.iter().map(|v| E::lit(*v)).collect(),
    ));
    Ok(proj.forward(tape, ps, row)?)
}

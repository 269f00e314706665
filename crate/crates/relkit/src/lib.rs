//! Linear-memory KL distillation for row-wise relation distributions.
//!
//! The crate provides a dense reference oracle, a two-pass tiled kernel
//! that computes the exact relation-KL loss and gradients in linear
//! auxiliary memory, the Q/Q, K/K, V/V self-relation objectives built on
//! top of it, and a desk-scale RoPE-restoration harness, all tied together
//! by the `relkit` binary.

pub mod budget;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod kernel;
pub mod ledger;
pub mod objectives;
pub mod oracle;
pub mod rope;
pub mod tensor;
pub mod toy;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use kernel::{kernel_backward, kernel_forward, kernel_lse, KernelResult, TileConfig};
pub use ledger::AllocationLedger;
pub use objectives::{overall_loss, self_relation_kl, HeadBatch, LossWeights, RelationTarget};
pub use oracle::{dense_attention_kl, dense_relation_kl, logit_kl, prop1_gradients, DenseKLReport};
pub use tensor::{MaskSpec, Precision, PrecisionPolicy, RowStats, Tensor2D};

//! Prefix-conditioned molecule generation.
//!
//! A decoder-only transformer is trained to emit SMILES strings token by
//! token. Chemistry and target context enter the model as a small block of
//! *prefix rows* prepended to the token embeddings: one row encodes a binding
//! pocket (via a geometric GNN over its atoms), the remaining rows encode
//! scalar properties (docking score, QED, synthetic accessibility, logP,
//! rule-of-five count). The prefix participates in every attention layer
//! under the causal mask, so conditions steer generation without any change
//! to the decoding loop.
//!
//! The crate is self-contained on purpose: tokenizer, molecular property
//! calculators, a small reverse-mode autodiff engine, the transformer,
//! attention diagnostics (gate decomposition, prefix relation maps), and a
//! training/evaluation pipeline with a synthetic corpus generator. The
//! `prefixgen` binary exposes all of it as subcommands.

pub mod analysis;
pub mod attention;
pub mod encoders;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod props;
pub mod smiles;
pub mod tensor;

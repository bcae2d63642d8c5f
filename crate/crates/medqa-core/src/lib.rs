//! Batch Arabic medical QA: prompt pipelines, majority-vote ensemble,
//! output canonicalization and an offline evaluation harness.

pub mod backend;
pub mod dataset;
pub mod ensemble;
pub mod eval;
pub mod pipelines;
pub mod prompting;
pub mod textnorm;

//! Learned repair of C vulnerabilities from token context diffs.
//!
//! The pipeline runs in file-based stages:
//!
//! 1. [`mining`] filters bug-fix commits and extracts changed function pairs.
//! 2. [`encoding`] turns pairs into samples: a CWE tag, the buggy function
//!    with its suspicious line marked, and the fix as a serialized
//!    [`diffcodec::TokenContextDiff`].
//! 3. [`micronet`] is a small encoder-decoder Transformer with a copy
//!    pathway, trained by [`training`] first on generic bug fixes and then
//!    tuned on vulnerability fixes.
//! 4. [`inference`] decodes diff hypotheses with beam search and expands
//!    each into every function it can be applied to.
//! 5. [`evalrep`] scores hypotheses and patches against gold fixes.

pub mod config;
pub mod ctok;
pub mod diffcodec;
pub mod encoding;
pub mod evalrep;
pub mod inference;
pub mod jsonl;
pub mod micronet;
pub mod mining;
pub mod synth;
pub mod training;

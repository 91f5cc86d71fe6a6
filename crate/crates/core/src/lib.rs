//! Augmentation of multi-turn counseling dialogues, guided by therapist
//! thought chains and knowledge-graph prompts.
//!
//! The pipeline runs three generators per source dialogue:
//!
//! 1. [`thought`]: keywords, a database of dialogue-thought combinations and
//!    a token-budgeted progressive-thought prompt.
//! 2. [`knowledge`]: k-shot knowledge-graph blocks, single-line knowledge
//!    generation, utterance clustering and labeling.
//! 3. [`augment`]: attention-ordered history and similarity-gated
//!    regeneration with keyword injection and a direct-rewrite fallback.
//!
//! [`metrics`] scores the result with corpus BLEU-1..4 and Distinct-1/2, and
//! [`pipeline`] wires the stages together with resumable run directories.
//! Every external capability sits behind a trait in [`providers`].

pub mod augment;
pub mod cli;
pub mod clustering;
pub mod dialogue;
pub mod knowledge;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod prompts;
pub mod providers;
pub mod text;
pub mod thought;

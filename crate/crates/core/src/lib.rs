//! Multi-agent needs elicitation engine.
//!
//! Five cooperating LLM roles elicit explicit, implicit and latent needs
//! into a shared [`needs_memo::NeedsMemo`], then draft a solution whose
//! sections cite memo entries by `Need ID`.

pub mod agents;
pub mod llm_backend;
pub mod needs_memo;
pub mod orchestrator;
pub mod protocol;

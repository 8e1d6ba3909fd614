//! Lemma mining pipeline: discovery, judging, formalization and proving of
//! folklore-style Lean 4 lemmas, plus benchmark export and evaluation.

pub mod bench;
pub mod extract;
pub mod lean;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod syntax;
pub mod util;

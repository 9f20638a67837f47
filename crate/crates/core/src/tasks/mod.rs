//! Synthetic ICL episodes, prompt layouts and a JSONL loader.
//!
//! Every episode draws a fresh class-to-label mapping, so labels carry no
//! information on their own: a model can only beat chance by reading the
//! demonstrations in its context.

pub mod episode;
pub mod format;
pub mod jsonl;

pub use episode::{episode_mapping, sample_episode, sample_episode_with_k, Demo, Episode, TaskConfig};
pub use format::{
    detokenize, format_demo, format_icl_prompt, format_zsl_prompt, parse_icl_prompt, test_span, tokenize,
};
pub use jsonl::load_jsonl;

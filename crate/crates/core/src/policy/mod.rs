//! Small autoregressive token policy conditioned on pair features.

mod grammar;
mod model;
mod record;
mod vocab;

pub use grammar::{Grammar, GrammarMask, GrammarState};
pub use model::{
    argmax, sample_row, Forward, PairFeatures, Policy, PolicyConfig, PolicyError, PolicyParams,
    ReferencePolicy, Rollout, SamplingConfig, PARAM_NAMES,
};
pub use record::{
    params_from_records, params_to_records, PolicyCheckpoint, TensorRecord, CHECKPOINT_VERSION,
};
pub use vocab::{answer_surface, answer_value, TokenId, Vocabulary, ANSWER_BINS};

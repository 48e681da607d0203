use serde::{Deserialize, Serialize};

use super::model::{Policy, PolicyConfig, PolicyError, PolicyParams, PARAM_NAMES};
use super::vocab::Vocabulary;
use crate::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn params_to_records<S: Scalar>(params: &PolicyParams<S>) -> Vec<TensorRecord> {
    let shapes = params.shapes();
    params
        .slices()
        .iter()
        .zip(shapes)
        .zip(PARAM_NAMES)
        .map(|((data, shape), name)| TensorRecord {
            name: name.to_string(),
            shape,
            data: data.iter().map(|x| x.as_f64()).collect(),
        })
        .collect()
}

/// Rebuilds parameters; shapes must match `(feature_dim, hidden, vocab)`.
pub fn params_from_records<S: Scalar>(
    records: &[TensorRecord],
    feature_dim: usize,
    hidden: usize,
    vocab: usize,
) -> Result<PolicyParams<S>, PolicyError> {
    let mut params = PolicyParams::zeros(feature_dim, hidden, vocab);
    let shapes = params.shapes();
    if records.len() != PARAM_NAMES.len() {
        return Err(PolicyError::Checkpoint(format!(
            "expected {} tensors, found {}",
            PARAM_NAMES.len(),
            records.len()
        )));
    }
    for (((slot, shape), name), rec) in params
        .slices_mut()
        .into_iter()
        .zip(shapes)
        .zip(PARAM_NAMES)
        .zip(records)
    {
        if rec.name != name {
            return Err(PolicyError::Checkpoint(format!(
                "expected tensor {name}, found {}",
                rec.name
            )));
        }
        if rec.shape != shape || rec.data.len() != slot.len() {
            return Err(PolicyError::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                rec.shape, shape
            )));
        }
        if rec.data.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::Checkpoint(format!(
                "tensor {name} holds non-finite values"
            )));
        }
        for (d, &x) in slot.iter_mut().zip(&rec.data) {
            *d = S::of(x);
        }
    }
    Ok(params)
}

/// Serialized policy: weights plus the hashes that pin the vocabulary and
/// run configuration they were trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub vocab_hash: String,
    pub config_hash: String,
    pub feature_dim: usize,
    pub think_levels: bool,
    pub policy: PolicyConfig,
    pub tensors: Vec<TensorRecord>,
}

impl PolicyCheckpoint {
    pub fn from_policy<S: Scalar>(
        policy: &Policy<S>,
        think_levels: bool,
        config_hash: &str,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            vocab_hash: policy.vocab().hash(),
            config_hash: config_hash.to_string(),
            feature_dim: policy.feature_dim(),
            think_levels,
            policy: policy.config().clone(),
            tensors: params_to_records(&policy.params),
        }
    }

    /// Restores the policy, refusing a different vocabulary or config.
    pub fn into_policy<S: Scalar>(
        self,
        vocab: Vocabulary,
        config_hash: &str,
    ) -> Result<Policy<S>, PolicyError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.vocab_hash != vocab.hash() {
            return Err(PolicyError::Checkpoint("vocabulary hash mismatch".into()));
        }
        if self.config_hash != config_hash {
            return Err(PolicyError::Checkpoint("config hash mismatch".into()));
        }
        let params = params_from_records(
            &self.tensors,
            self.feature_dim,
            self.policy.hidden,
            vocab.len(),
        )?;
        Policy::from_params(vocab, params, self.policy, self.think_levels)
    }
}

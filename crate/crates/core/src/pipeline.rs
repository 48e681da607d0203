//! Glue between generated datasets, the policy and the evaluation suite.

use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport, TraceRecord};
use crate::grpo::Prompt;
use crate::policy::{PairFeatures, Policy, PolicyConfig, PolicyError, Vocabulary};
use crate::reward::{GroundTruth, RewardConfig, RewardVariant};
use crate::rng::StreamRoot;
use crate::synthworld::{PairSample, Split};
use crate::taxonomy::{AttributeSchema, HierarchyKind};

pub fn schema_for(kind: HierarchyKind, reward: &RewardConfig) -> AttributeSchema {
    AttributeSchema::for_kind(kind, reward.mode)
}

/// Vocabulary over every taxon of the dataset, whatever its split.
pub fn build_vocab(dataset: &[PairSample], schema: &AttributeSchema) -> Vocabulary {
    Vocabulary::build(
        schema,
        dataset.iter().flat_map(|p| [&p.lineage_a, &p.lineage_b]),
    )
}

pub fn split_pairs(dataset: &[PairSample], split: Split) -> Vec<&PairSample> {
    dataset.iter().filter(|p| p.split == split).collect()
}

pub fn prompts(dataset: &[PairSample], split: Split, schema: &AttributeSchema) -> Vec<Prompt> {
    split_pairs(dataset, split)
        .into_iter()
        .map(|p| Prompt {
            id: p.id.clone(),
            features_a: p.features_a.clone(),
            features_b: p.features_b.clone(),
            truth: GroundTruth::from_lineages(&p.lineage_a, &p.lineage_b, p.label, schema),
        })
        .collect()
}

/// Seeded fresh policy; answer-only runs get a grammar without think levels.
pub fn new_policy(
    vocab: Vocabulary,
    feature_dim: usize,
    cfg: &PolicyConfig,
    variant: RewardVariant,
    seed: u64,
) -> Policy<f64> {
    let mut rng = StreamRoot::new(seed).stream("init", &[]);
    Policy::new(
        vocab,
        feature_dim,
        cfg.clone(),
        variant == RewardVariant::Intermediate,
        &mut rng,
    )
}

/// Greedy traces for every pair of `pairs`.
pub fn decode(
    policy: &Policy<f64>,
    pairs: &[&PairSample],
    max_tokens: usize,
) -> Result<Vec<TraceRecord>, PolicyError> {
    let feats: Vec<PairFeatures> = pairs
        .iter()
        .map(|p| PairFeatures {
            a: &p.features_a,
            b: &p.features_b,
        })
        .collect();
    let seqs = policy.greedy_decode(&feats, max_tokens)?;
    Ok(pairs
        .iter()
        .zip(seqs)
        .map(|(p, s)| TraceRecord {
            pair_id: p.id.clone(),
            trace: policy.vocab().detokenize(&s),
        })
        .collect())
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Greedy-decodes a split and evaluates it.
pub fn evaluate_policy(
    policy: &Policy<f64>,
    dataset: &[PairSample],
    split: Split,
    reward: &RewardConfig,
    eval: &EvalConfig,
    max_tokens: usize,
) -> Result<(Vec<TraceRecord>, EvalReport), PipelineError> {
    let pairs = split_pairs(dataset, split);
    let traces = decode(policy, &pairs, max_tokens)?;
    let owned: Vec<PairSample> = pairs.into_iter().cloned().collect();
    let report = evaluate(
        &traces,
        &owned,
        policy.vocab().schema(),
        reward.variant.level_requirement(),
        eval,
        policy.vocab(),
    )?;
    Ok((traces, report))
}

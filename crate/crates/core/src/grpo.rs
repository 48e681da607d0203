//! Group relative policy optimization: rollout groups, standardized
//! advantages, the clipped surrogate with an exact KL penalty, AdamW, and
//! the seeded training loop.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{
    params_from_records, params_to_records, Forward, PairFeatures, Policy, PolicyError,
    PolicyParams, ReferencePolicy, SamplingConfig, TensorRecord, TokenId,
};
use crate::reward::{score_trace, GroundTruth, RewardBreakdown, RewardConfig, RewardError};
use crate::rng::StreamRoot;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coef: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub prompts_per_step: usize,
    pub advantage_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            kl_coef: 1e-2,
            clip_epsilon: 0.2,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            epochs: 60,
            prompts_per_step: 8,
            advantage_epsilon: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            checkpoint_every: 100,
        }
    }
}

impl GrpoConfig {
    /// Hyperparameters of the full-size recipe (7B backbone).
    pub fn large_scale() -> Self {
        Self {
            learning_rate: 1e-6,
            prompts_per_step: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad("kl_coef must be finite and >= 0");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if self.epochs == 0 || self.prompts_per_step == 0 {
            return bad("epochs and prompts_per_step must be at least 1");
        }
        if !(self.advantage_epsilon >= 0.0) {
            return bad("advantage_epsilon must be >= 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_epsilon > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and adam_epsilon must be > 0");
        }
        Ok(())
    }
}

/// `(r_i - mean) / (std_pop + eps)`; all zeros when every reward is equal.
pub fn compute_advantages<S: Scalar>(rewards: &[S], eps: S) -> Vec<S> {
    let n = S::of(rewards.len() as f64);
    let mean = rewards.iter().copied().sum::<S>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![S::zero(); rewards.len()];
    }
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<S>() / n;
    let denom = var.sqrt() + eps;
    rewards.iter().map(|&r| (r - mean) / denom).collect()
}

/// One prompt of the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub id: String,
    pub features_a: Vec<f64>,
    pub features_b: Vec<f64>,
    pub truth: GroundTruth,
}

impl Prompt {
    pub fn features(&self) -> PairFeatures<'_> {
        PairFeatures {
            a: &self.features_a,
            b: &self.features_b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredRollout<S> {
    pub tokens: Vec<TokenId>,
    pub behavior_log_probs: Vec<S>,
    pub reward: RewardBreakdown<S>,
    pub advantage: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup<S> {
    pub prompt: usize,
    pub rollouts: Vec<ScoredRollout<S>>,
}

/// Loss value, its gradient with respect to every step's logits, and the
/// mean per-token KL to the reference.
pub struct LossOutput<S> {
    pub loss: S,
    pub mean_kl: S,
    pub dlogits: Vec<Array2<S>>,
}

/// Clipped surrogate plus exact KL penalty.
///
/// Per sequence `i` of length `L_i` and token `t`, with `ρ = exp(live -
/// behavior)`: `-(1/R) Σ_i (1/L_i) Σ_t [min(ρÂ_i, clip(ρ, 1±ε)Â_i) - β
/// KL(π(·|ctx) ‖ π_ref(·|ctx))]`. `live` and `reference` must come from
/// teacher-forced passes over `sequences`.
pub fn grpo_loss<S: Scalar>(
    live: &Forward<S>,
    reference: Option<&Forward<S>>,
    sequences: &[Vec<TokenId>],
    behavior: &[Vec<S>],
    advantages: &[S],
    clip_epsilon: f64,
    kl_coef: f64,
) -> Result<LossOutput<S>, GrpoError> {
    let r = sequences.len();
    if behavior.len() != r || advantages.len() != r || live.batch() != r {
        return Err(GrpoError::Config(
            "loss inputs disagree on the number of rollouts".into(),
        ));
    }
    let v = live.log_probs.first().map_or(0, |a| a.ncols());
    let beta = S::of(kl_coef);
    let lo = S::of(1.0 - clip_epsilon);
    let hi = S::of(1.0 + clip_epsilon);
    let mut dlogits: Vec<Array2<S>> = (0..live.steps()).map(|_| Array2::zeros((r, v))).collect();
    let mut loss = S::zero();
    let mut kl_sum = S::zero();
    let mut tokens = 0usize;
    let rf = S::of(r as f64);
    for (i, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            continue;
        }
        if behavior[i].len() != seq.len() {
            return Err(GrpoError::Config(format!(
                "rollout {i}: behavior log-probs do not cover the sequence"
            )));
        }
        let a = advantages[i];
        let w = S::one() / (rf * S::of(seq.len() as f64));
        for (t, &tok) in seq.iter().enumerate() {
            let row = live.log_probs[t].row(i);
            let lp = row[tok];
            let ratio = (lp - behavior[i][t]).exp();
            let unclipped = ratio * a;
            let clipped = ratio.max(lo).min(hi) * a;
            // d(-surrogate)/d(live log-prob) is -ρÂ on the unclipped branch, 0 when clipped.
            let coef = if unclipped <= clipped {
                -unclipped
            } else {
                S::zero()
            };
            loss -= w * unclipped.min(clipped);
            let mut grad = dlogits[t].row_mut(i);
            if coef != S::zero() {
                for j in 0..v {
                    grad[j] -= w * coef * row[j].exp();
                }
                grad[tok] += w * coef;
            }
            if let Some(reference) = reference {
                let q = reference.log_probs[t].row(i);
                let mut kl = S::zero();
                for j in 0..v {
                    let p = row[j].exp();
                    if p > S::zero() {
                        kl += p * (row[j] - q[j]);
                    }
                }
                kl_sum += kl;
                loss += w * beta * kl;
                if beta != S::zero() {
                    for j in 0..v {
                        let p = row[j].exp();
                        if p > S::zero() {
                            grad[j] += w * beta * p * ((row[j] - q[j]) - kl);
                        }
                    }
                }
            }
            tokens += 1;
        }
    }
    if !loss.is_finite() {
        return Err(GrpoError::Numeric(format!("loss is {loss}")));
    }
    let mean_kl = if tokens > 0 {
        kl_sum / S::of(tokens as f64)
    } else {
        S::zero()
    };
    Ok(LossOutput {
        loss,
        mean_kl,
        dlogits,
    })
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub m: PolicyParams<S>,
    pub v: PolicyParams<S>,
    pub t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(like: &PolicyParams<S>) -> Self {
        let z = PolicyParams::zeros(like.feature_dim(), like.hidden(), like.vocab_size());
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut PolicyParams<S>,
        grad: &PolicyParams<S>,
        lr: f64,
        cfg: &GrpoConfig,
    ) {
        self.t += 1;
        let (b1, b2) = (S::of(cfg.adam_beta1), S::of(cfg.adam_beta2));
        let c1 = S::one() - b1.powi(self.t as i32);
        let c2 = S::one() - b2.powi(self.t as i32);
        let lr = S::of(lr);
        let wd = S::of(cfg.weight_decay);
        let eps = S::of(cfg.adam_epsilon);
        let ps = params.slices_mut();
        let gs = grad.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (S::one() - b1) * g[k];
                v[k] = b2 * v[k] + (S::one() - b2) * g[k] * g[k];
                let step = (m[k] / c1) / ((v[k] / c2).sqrt() + eps) + wd * p[k];
                p[k] -= lr * step;
            }
        }
    }
}

/// Cosine decay from `base` to 0 over `total` steps, no warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Per-step training metrics; field order is the history line layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_r_struct: f64,
    pub mean_r_corr: f64,
    pub mean_r_attr: f64,
    pub mean_kl: f64,
    pub format_valid_frac: f64,
}

/// Samples `group_size` rollouts for each listed prompt and scores them.
pub fn collect_groups<S: Scalar>(
    policy: &Policy<S>,
    prompts: &[Prompt],
    batch: &[usize],
    step: usize,
    root: &StreamRoot,
    grpo: &GrpoConfig,
    reward: &RewardConfig,
    sampling: &SamplingConfig,
) -> Result<Vec<RolloutGroup<S>>, GrpoError> {
    let n = grpo.group_size;
    let mut feats = Vec::with_capacity(batch.len() * n);
    let mut rngs = Vec::with_capacity(batch.len() * n);
    for (slot, &p) in batch.iter().enumerate() {
        for k in 0..n {
            feats.push(prompts[p].features());
            rngs.push(root.stream("rollout", &[step as u64, slot as u64, k as u64]));
        }
    }
    let rollouts = policy.sample(&feats, sampling, &mut rngs)?;
    let schema = policy.vocab().schema();
    let mut groups = Vec::with_capacity(batch.len());
    let mut it = rollouts.into_iter();
    for &p in batch {
        let mut scored = Vec::with_capacity(n);
        for r in it.by_ref().take(n) {
            let text = policy.vocab().detokenize(&r.tokens);
            let (breakdown, _) = score_trace::<S>(&text, &prompts[p].truth, schema, reward)?;
            scored.push(ScoredRollout {
                tokens: r.tokens,
                behavior_log_probs: r.log_probs,
                reward: breakdown,
                advantage: S::zero(),
            });
        }
        let rewards: Vec<S> = scored.iter().map(|s| s.reward.r_total).collect();
        for (s, a) in scored
            .iter_mut()
            .zip(compute_advantages(&rewards, S::of(grpo.advantage_epsilon)))
        {
            s.advantage = a;
        }
        groups.push(RolloutGroup {
            prompt: p,
            rollouts: scored,
        });
    }
    Ok(groups)
}

/// Loss and parameter gradient of a batch of groups.
pub fn loss_and_gradient<S: Scalar>(
    policy: &Policy<S>,
    reference: &ReferencePolicy<S>,
    prompts: &[Prompt],
    groups: &[RolloutGroup<S>],
    cfg: &GrpoConfig,
) -> Result<(LossOutput<S>, PolicyParams<S>), GrpoError> {
    let mut feats = Vec::new();
    let mut seqs = Vec::new();
    let mut behavior = Vec::new();
    let mut adv = Vec::new();
    for g in groups {
        for r in &g.rollouts {
            feats.push(prompts[g.prompt].features());
            seqs.push(r.tokens.clone());
            behavior.push(r.behavior_log_probs.clone());
            adv.push(r.advantage);
        }
    }
    let live = policy.forward(&feats, &seqs)?;
    let reference_fwd = reference.forward(&feats, &seqs)?;
    let out = grpo_loss(
        &live,
        Some(&reference_fwd),
        &seqs,
        &behavior,
        &adv,
        cfg.clip_epsilon,
        cfg.kl_coef,
    )?;
    let grad = policy.backward(&live, &out.dlogits);
    Ok((out, grad))
}

/// One AdamW update on freshly sampled groups.
pub fn train_step<S: Scalar>(
    policy: &mut Policy<S>,
    reference: &ReferencePolicy<S>,
    prompts: &[Prompt],
    groups: &[RolloutGroup<S>],
    optimizer: &mut AdamW<S>,
    lr: f64,
    cfg: &GrpoConfig,
) -> Result<StepMetrics, GrpoError> {
    let (out, grad) = loss_and_gradient(policy, reference, prompts, groups, cfg)?;
    if !grad.all_finite() {
        return Err(GrpoError::Numeric("non-finite gradient".into()));
    }
    optimizer.update(&mut policy.params, &grad, lr, cfg);
    if !policy.params.all_finite() {
        return Err(GrpoError::Numeric(
            "non-finite parameters after update".into(),
        ));
    }
    let all: Vec<&ScoredRollout<S>> = groups.iter().flat_map(|g| &g.rollouts).collect();
    let count = all.len().max(1) as f64;
    let mean =
        |f: &dyn Fn(&ScoredRollout<S>) -> S| all.iter().map(|r| f(r).as_f64()).sum::<f64>() / count;
    Ok(StepMetrics {
        step: 0,
        epoch: 0,
        lr,
        loss: out.loss.as_f64(),
        mean_reward: mean(&|r| r.reward.r_total),
        mean_r_struct: mean(&|r| r.reward.r_struct),
        mean_r_corr: mean(&|r| r.reward.r_corr),
        mean_r_attr: mean(&|r| r.reward.r_attr),
        mean_kl: out.mean_kl.as_f64(),
        format_valid_frac: mean(&|r| r.reward.r_struct),
    })
}

/// Everything needed to continue a run exactly where it stopped.
pub struct TrainState<S> {
    pub policy: Policy<S>,
    pub reference: ReferencePolicy<S>,
    pub optimizer: AdamW<S>,
    /// Index of the next step to run.
    pub step: usize,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(policy: Policy<S>) -> Self {
        let reference = policy.snapshot_reference();
        let optimizer = AdamW::new(&policy.params);
        Self {
            policy,
            reference,
            optimizer,
            step: 0,
        }
    }
}

/// Serializable form of [`TrainState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRecord {
    pub step: usize,
    pub adam_t: u64,
    pub policy: Vec<TensorRecord>,
    pub reference: Vec<TensorRecord>,
    pub adam_m: Vec<TensorRecord>,
    pub adam_v: Vec<TensorRecord>,
}

impl<S: Scalar> TrainState<S> {
    pub fn to_record(&self) -> StateRecord {
        StateRecord {
            step: self.step,
            adam_t: self.optimizer.t,
            policy: params_to_records(&self.policy.params),
            reference: params_to_records(self.reference.params()),
            adam_m: params_to_records(&self.optimizer.m),
            adam_v: params_to_records(&self.optimizer.v),
        }
    }

    /// Restores a state onto the architecture of `like`.
    pub fn from_record(like: &Policy<S>, rec: &StateRecord) -> Result<Self, GrpoError> {
        let p = &like.params;
        let load = |r: &[TensorRecord]| {
            params_from_records::<S>(r, p.feature_dim(), p.hidden(), p.vocab_size())
        };
        let policy = like.with_params(load(&rec.policy)?);
        let reference = ReferencePolicy::from_params(like, load(&rec.reference)?);
        let optimizer = AdamW {
            m: load(&rec.adam_m)?,
            v: load(&rec.adam_v)?,
            t: rec.adam_t,
        };
        Ok(Self {
            policy,
            reference,
            optimizer,
            step: rec.step,
        })
    }
}

/// Seeded epoch/step schedule over the training prompts.
pub struct Trainer<'a, S> {
    pub prompts: &'a [Prompt],
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub sampling: SamplingConfig,
    pub state: TrainState<S>,
    root: StreamRoot,
    order: Option<(usize, Vec<usize>)>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(
        prompts: &'a [Prompt],
        grpo: GrpoConfig,
        reward: RewardConfig,
        sampling: SamplingConfig,
        state: TrainState<S>,
        seed: u64,
    ) -> Result<Self, GrpoError> {
        grpo.validate()?;
        reward.validate()?;
        sampling.validate()?;
        if prompts.is_empty() {
            return Err(GrpoError::Config("training split is empty".into()));
        }
        Ok(Self {
            prompts,
            grpo,
            reward,
            sampling,
            state,
            root: StreamRoot::new(seed),
            order: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.prompts.len().div_ceil(self.grpo.prompts_per_step)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.grpo.epochs
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn batch_for(&mut self, step: usize) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..self.prompts.len()).collect();
            perm.shuffle(&mut self.root.stream("epoch", &[epoch as u64]));
            self.order = Some((epoch, perm));
        }
        let perm = &self.order.as_ref().expect("just set").1;
        let k = step % spe;
        let end = ((k + 1) * self.grpo.prompts_per_step).min(perm.len());
        (epoch, perm[k * self.grpo.prompts_per_step..end].to_vec())
    }

    /// Runs the next step and returns its metrics.
    pub fn step(&mut self) -> Result<StepMetrics, GrpoError> {
        let step = self.state.step;
        let (epoch, batch) = self.batch_for(step);
        let lr = cosine_lr(self.grpo.learning_rate, step, self.total_steps());
        let groups = collect_groups(
            &self.state.policy,
            self.prompts,
            &batch,
            step,
            &self.root,
            &self.grpo,
            &self.reward,
            &self.sampling,
        )?;
        let TrainState {
            policy,
            reference,
            optimizer,
            ..
        } = &mut self.state;
        let mut metrics = train_step(
            policy,
            reference,
            self.prompts,
            &groups,
            optimizer,
            lr,
            &self.grpo,
        )
        .map_err(|e| match e {
            GrpoError::Numeric(m) => GrpoError::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        metrics.step = step;
        metrics.epoch = epoch;
        self.state.step += 1;
        Ok(metrics)
    }

    /// Runs to completion, handing every step's metrics to `on_step`.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepMetrics, &TrainState<S>),
    ) -> Result<(), GrpoError> {
        while !self.is_done() {
            let m = self.step()?;
            on_step(&m, &self.state);
        }
        Ok(())
    }
}

/// Mean greedy-decoding reward over `prompts`.
pub fn greedy_reward<S: Scalar>(
    policy: &Policy<S>,
    prompts: &[Prompt],
    reward: &RewardConfig,
    max_tokens: usize,
) -> Result<f64, GrpoError> {
    let feats: Vec<PairFeatures> = prompts.iter().map(Prompt::features).collect();
    let seqs = policy.greedy_decode(&feats, max_tokens)?;
    let mut total = 0.0;
    for (p, s) in prompts.iter().zip(&seqs) {
        let text = policy.vocab().detokenize(s);
        let (b, _) = score_trace::<f64>(&text, &p.truth, policy.vocab().schema(), reward)?;
        total += b.r_total;
    }
    Ok(total / prompts.len().max(1) as f64)
}

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grammar::{Grammar, GrammarMask, GrammarState};
use super::vocab::{TokenId, Vocabulary};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(TokenId),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid sampling config: {0}")]
    Sampling(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub grammar_mask: GrammarMask,
    /// Logit penalty for illegal tokens under the soft mask.
    pub mask_penalty: f64,
    /// Weights start uniform in `±init_scale / sqrt(fan_in)`.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            grammar_mask: GrammarMask::Off,
            mask_penalty: 5.0,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 32,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::Sampling(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PolicyError::Sampling(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(PolicyError::Sampling(
                "max_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Names of the parameter tensors, in storage order.
pub const PARAM_NAMES: [&str; 12] = [
    "encoder_w",
    "encoder_b",
    "diff_w",
    "diff_b",
    "embedding",
    "gate_a",
    "gate_b",
    "gate_d",
    "recurrent_w",
    "recurrent_b",
    "output_w",
    "output_b",
];

/// Weights of the pair-conditioned recurrent policy.
///
/// Each image is encoded as `tanh(f·W_enc + b_enc)` and the absolute feature
/// difference as `tanh(|f_a - f_b|·W_diff + b_diff)`. At every step the
/// previous token selects an embedding row plus three gating rows that scale
/// the three context vectors before they enter the tanh recurrence. Token
/// tables carry one extra row for the begin-of-sequence input.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<S> {
    pub encoder_w: Array2<S>,
    pub encoder_b: Array1<S>,
    pub diff_w: Array2<S>,
    pub diff_b: Array1<S>,
    pub embedding: Array2<S>,
    pub gate_a: Array2<S>,
    pub gate_b: Array2<S>,
    pub gate_d: Array2<S>,
    pub recurrent_w: Array2<S>,
    pub recurrent_b: Array1<S>,
    pub output_w: Array2<S>,
    pub output_b: Array1<S>,
}

impl<S: Scalar> PolicyParams<S> {
    pub fn zeros(feature_dim: usize, hidden: usize, vocab: usize) -> Self {
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Self {
            encoder_w: m(feature_dim, hidden),
            encoder_b: v(hidden),
            diff_w: m(feature_dim, hidden),
            diff_b: v(hidden),
            embedding: m(vocab + 1, hidden),
            gate_a: m(vocab + 1, hidden),
            gate_b: m(vocab + 1, hidden),
            gate_d: m(vocab + 1, hidden),
            recurrent_w: m(hidden, hidden),
            recurrent_b: v(hidden),
            output_w: m(hidden, vocab),
            output_b: v(vocab),
        }
    }

    /// Uniform `±scale/sqrt(fan_in)` weights, zero biases. Token tables have
    /// fan-in 1.
    pub fn init(
        feature_dim: usize,
        hidden: usize,
        vocab: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = Self::zeros(feature_dim, hidden, vocab);
        let mut fill = |a: &mut Array2<S>, fan_in: usize| {
            let r = scale / (fan_in as f64).sqrt();
            a.mapv_inplace(|_| S::of(rng.gen_range(-r..=r)));
        };
        fill(&mut p.encoder_w, feature_dim);
        fill(&mut p.diff_w, feature_dim);
        fill(&mut p.embedding, 1);
        fill(&mut p.gate_a, 1);
        fill(&mut p.gate_b, 1);
        fill(&mut p.gate_d, 1);
        fill(&mut p.recurrent_w, hidden);
        fill(&mut p.output_w, hidden);
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder_w.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_w.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.output_w.ncols()
    }

    pub fn shapes(&self) -> [Vec<usize>; 12] {
        [
            self.encoder_w.shape().to_vec(),
            self.encoder_b.shape().to_vec(),
            self.diff_w.shape().to_vec(),
            self.diff_b.shape().to_vec(),
            self.embedding.shape().to_vec(),
            self.gate_a.shape().to_vec(),
            self.gate_b.shape().to_vec(),
            self.gate_d.shape().to_vec(),
            self.recurrent_w.shape().to_vec(),
            self.recurrent_b.shape().to_vec(),
            self.output_w.shape().to_vec(),
            self.output_b.shape().to_vec(),
        ]
    }

    pub fn slices(&self) -> [&[S]; 12] {
        [
            s2(&self.encoder_w),
            s1(&self.encoder_b),
            s2(&self.diff_w),
            s1(&self.diff_b),
            s2(&self.embedding),
            s2(&self.gate_a),
            s2(&self.gate_b),
            s2(&self.gate_d),
            s2(&self.recurrent_w),
            s1(&self.recurrent_b),
            s2(&self.output_w),
            s1(&self.output_b),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [S]; 12] {
        [
            self.encoder_w.as_slice_mut().expect("standard layout"),
            self.encoder_b.as_slice_mut().expect("standard layout"),
            self.diff_w.as_slice_mut().expect("standard layout"),
            self.diff_b.as_slice_mut().expect("standard layout"),
            self.embedding.as_slice_mut().expect("standard layout"),
            self.gate_a.as_slice_mut().expect("standard layout"),
            self.gate_b.as_slice_mut().expect("standard layout"),
            self.gate_d.as_slice_mut().expect("standard layout"),
            self.recurrent_w.as_slice_mut().expect("standard layout"),
            self.recurrent_b.as_slice_mut().expect("standard layout"),
            self.output_w.as_slice_mut().expect("standard layout"),
            self.output_b.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar at flat index `i` (tensors concatenated in storage order).
    pub fn get(&self, mut i: usize) -> S {
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, value: S) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shapes() == other.shapes()
    }
}

/// Features of one prompt pair.
#[derive(Clone, Copy, Debug)]
pub struct PairFeatures<'a> {
    pub a: &'a [f64],
    pub b: &'a [f64],
}

/// A sampled token sequence with the policy's log-probability of each token.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<S> {
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<S>,
}

struct Context<S> {
    vocab: Vocabulary,
    grammar: Grammar,
    config: PolicyConfig,
    /// Logit offsets per grammar-table key; `None` when the mask is off.
    bias: Option<Array2<S>>,
}

/// Recurrent token policy over a trace vocabulary.
#[derive(Clone)]
pub struct Policy<S> {
    pub params: PolicyParams<S>,
    ctx: Arc<Context<S>>,
}

/// Activations of a teacher-forced pass, kept for the backward pass.
pub struct Forward<S> {
    fa: Array2<S>,
    fb: Array2<S>,
    fd: Array2<S>,
    ca: Array2<S>,
    cb: Array2<S>,
    cd: Array2<S>,
    inputs: Vec<Vec<usize>>,
    hidden: Vec<Array2<S>>,
    /// Per step, `(batch, vocab)` log-probabilities of the next token.
    pub log_probs: Vec<Array2<S>>,
    pub lengths: Vec<usize>,
}

impl<S: Scalar> Forward<S> {
    pub fn steps(&self) -> usize {
        self.log_probs.len()
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

fn s2<S>(a: &Array2<S>) -> &[S] {
    a.as_slice().expect("standard layout")
}

fn s1<S>(a: &Array1<S>) -> &[S] {
    a.as_slice().expect("standard layout")
}

fn log_softmax_row<S: Scalar>(row: &mut [S]) {
    let m = row
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&x| (x - m).exp()).sum();
    let lse = m + sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

impl<S: Scalar> Policy<S> {
    /// Fresh policy. `think_levels` selects the grammar: when false the
    /// think block must stay empty.
    pub fn new(
        vocab: Vocabulary,
        feature_dim: usize,
        config: PolicyConfig,
        think_levels: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let params = PolicyParams::init(
            feature_dim,
            config.hidden,
            vocab.len(),
            config.init_scale,
            rng,
        );
        Self::from_params(vocab, params, config, think_levels).expect("shapes built to match")
    }

    pub fn from_params(
        vocab: Vocabulary,
        params: PolicyParams<S>,
        config: PolicyConfig,
        think_levels: bool,
    ) -> Result<Self, PolicyError> {
        if params.vocab_size() != vocab.len() || params.embedding.nrows() != vocab.len() + 1 {
            return Err(PolicyError::Shape(format!(
                "parameters cover {} tokens, vocabulary has {}",
                params.vocab_size(),
                vocab.len()
            )));
        }
        if params.hidden() != config.hidden {
            return Err(PolicyError::Shape(format!(
                "hidden size {} != configured {}",
                params.hidden(),
                config.hidden
            )));
        }
        let grammar = Grammar::new(&vocab, think_levels);
        let bias = match config.grammar_mask {
            GrammarMask::Off => None,
            mask => {
                let off = match mask {
                    GrammarMask::Hard => S::neg_infinity(),
                    _ => S::of(-config.mask_penalty),
                };
                let mut b = Array2::zeros((grammar.key_count(), vocab.len()));
                for key in 0..grammar.key_count() {
                    for (t, &ok) in grammar.allowed_by_key(key).iter().enumerate() {
                        if !ok {
                            b[[key, t]] = off;
                        }
                    }
                }
                Some(b)
            }
        };
        Ok(Self {
            params,
            ctx: Arc::new(Context {
                vocab,
                grammar,
                config,
                bias,
            }),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.ctx.vocab
    }

    pub fn grammar(&self) -> &Grammar {
        &self.ctx.grammar
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.ctx.config
    }

    pub fn feature_dim(&self) -> usize {
        self.params.feature_dim()
    }

    /// Same architecture and vocabulary with other weights.
    pub fn with_params(&self, params: PolicyParams<S>) -> Self {
        assert!(params.same_shape(&self.params), "parameter shapes differ");
        Self {
            params,
            ctx: Arc::clone(&self.ctx),
        }
    }

    /// Frozen deep copy of the current weights.
    pub fn snapshot_reference(&self) -> ReferencePolicy<S> {
        ReferencePolicy(self.clone())
    }

    fn encode(&self, pairs: &[PairFeatures]) -> Result<[Array2<S>; 6], PolicyError> {
        let f = self.feature_dim();
        let n = pairs.len();
        let mut fa = Array2::zeros((n, f));
        let mut fb = Array2::zeros((n, f));
        for (i, p) in pairs.iter().enumerate() {
            if p.a.len() != f || p.b.len() != f {
                return Err(PolicyError::Shape(format!(
                    "pair features must have length {f}"
                )));
            }
            for d in 0..f {
                fa[[i, d]] = S::of(p.a[d]);
                fb[[i, d]] = S::of(p.b[d]);
            }
        }
        let fd = (&fa - &fb).mapv(|x| x.abs());
        let p = &self.params;
        let ca = (fa.dot(&p.encoder_w) + &p.encoder_b).mapv(|x| x.tanh());
        let cb = (fb.dot(&p.encoder_w) + &p.encoder_b).mapv(|x| x.tanh());
        let cd = (fd.dot(&p.diff_w) + &p.diff_b).mapv(|x| x.tanh());
        Ok([fa, fb, fd, ca, cb, cd])
    }

    /// One recurrence step: new hidden state and masked next-token
    /// log-probabilities.
    fn step(
        &self,
        h: &Array2<S>,
        inputs: &[usize],
        states: &[GrammarState],
        ctx: (&Array2<S>, &Array2<S>, &Array2<S>),
    ) -> (Array2<S>, Array2<S>) {
        let p = &self.params;
        let mut pre = h.dot(&p.recurrent_w) + &p.recurrent_b;
        for (i, mut row) in pre.axis_iter_mut(Axis(0)).enumerate() {
            let x = inputs[i];
            Zip::from(&mut row)
                .and(p.embedding.row(x))
                .and(p.gate_a.row(x))
                .and(ctx.0.row(i))
                .and(p.gate_b.row(x))
                .and(ctx.1.row(i))
                .for_each(|r, &e, &ga, &ca, &gb, &cb| *r += e + ga * ca + gb * cb);
            Zip::from(&mut row)
                .and(p.gate_d.row(x))
                .and(ctx.2.row(i))
                .for_each(|r, &gd, &cd| *r += gd * cd);
        }
        let h_new = pre.mapv(|x| x.tanh());
        let mut logits = h_new.dot(&p.output_w) + &p.output_b;
        for (i, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
            if let Some(bias) = &self.ctx.bias {
                row += &bias.row(self.ctx.grammar.key(states[i]));
            }
            log_softmax_row(row.as_slice_mut().expect("standard layout"));
        }
        (h_new, logits)
    }

    fn bos(&self) -> usize {
        self.ctx.vocab.len()
    }

    /// Teacher-forced pass over token sequences (each scored from the
    /// begin-of-sequence input).
    pub fn forward(
        &self,
        pairs: &[PairFeatures],
        sequences: &[Vec<TokenId>],
    ) -> Result<Forward<S>, PolicyError> {
        if pairs.len() != sequences.len() {
            return Err(PolicyError::Shape(format!(
                "{} pairs for {} sequences",
                pairs.len(),
                sequences.len()
            )));
        }
        let v = self.ctx.vocab.len();
        for seq in sequences {
            if let Some(&t) = seq.iter().find(|&&t| t >= v) {
                return Err(PolicyError::UnknownToken(t));
            }
        }
        let [fa, fb, fd, ca, cb, cd] = self.encode(pairs)?;
        let n = sequences.len();
        let steps = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let states: Vec<Vec<GrammarState>> = sequences
            .iter()
            .map(|s| self.ctx.grammar.states(s))
            .collect();
        let mut hidden = vec![Array2::zeros((n, self.params.hidden()))];
        let mut inputs = Vec::with_capacity(steps);
        let mut log_probs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x: Vec<usize> = sequences
                .iter()
                .map(|s| {
                    if t == 0 {
                        self.bos()
                    } else {
                        s.get(t - 1).copied().unwrap_or(self.ctx.vocab.eos)
                    }
                })
                .collect();
            let st: Vec<GrammarState> = states
                .iter()
                .map(|s| s.get(t).copied().unwrap_or(GrammarState::Done))
                .collect();
            let (h, lp) = self.step(&hidden[t], &x, &st, (&ca, &cb, &cd));
            hidden.push(h);
            inputs.push(x);
            log_probs.push(lp);
        }
        Ok(Forward {
            fa,
            fb,
            fd,
            ca,
            cb,
            cd,
            inputs,
            hidden,
            log_probs,
            lengths: sequences.iter().map(Vec::len).collect(),
        })
    }

    /// `log π(t_i | t_<i, features)` for every position of every sequence.
    pub fn log_probs(
        &self,
        pairs: &[PairFeatures],
        sequences: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<S>>, PolicyError> {
        let fwd = self.forward(pairs, sequences)?;
        Ok(sequences
            .iter()
            .enumerate()
            .map(|(i, seq)| {
                seq.iter()
                    .enumerate()
                    .map(|(t, &tok)| fwd.log_probs[t][[i, tok]])
                    .collect()
            })
            .collect())
    }

    /// Gradient of `Σ_t Σ_v dlogits[t][i, v] · z_t[i, v]` where `z` are the
    /// step logits; entries past a sequence's end must be zero.
    pub fn backward(&self, fwd: &Forward<S>, dlogits: &[Array2<S>]) -> PolicyParams<S> {
        let p = &self.params;
        let mut g = PolicyParams::zeros(p.feature_dim(), p.hidden(), p.vocab_size());
        let n = fwd.batch();
        let mut dca = Array2::<S>::zeros(fwd.ca.raw_dim());
        let mut dcb = Array2::<S>::zeros(fwd.cb.raw_dim());
        let mut dcd = Array2::<S>::zeros(fwd.cd.raw_dim());
        let mut dh_next = Array2::<S>::zeros((n, p.hidden()));
        for t in (0..fwd.steps()).rev() {
            let h = &fwd.hidden[t + 1];
            let dz = &dlogits[t];
            let dh = dz.dot(&p.output_w.t()) + &dh_next;
            g.output_w += &h.t().dot(dz);
            g.output_b += &dz.sum_axis(Axis(0));
            let dpre = Zip::from(&dh)
                .and(h)
                .map_collect(|&d, &h| d * (S::one() - h * h));
            g.recurrent_w += &fwd.hidden[t].t().dot(&dpre);
            g.recurrent_b += &dpre.sum_axis(Axis(0));
            for i in 0..n {
                let x = fwd.inputs[t][i];
                let d = dpre.row(i);
                g.embedding.row_mut(x).zip_mut_with(&d, |a, &b| *a += b);
                Zip::from(g.gate_a.row_mut(x))
                    .and(&d)
                    .and(fwd.ca.row(i))
                    .for_each(|a, &d, &c| *a += d * c);
                Zip::from(g.gate_b.row_mut(x))
                    .and(&d)
                    .and(fwd.cb.row(i))
                    .for_each(|a, &d, &c| *a += d * c);
                Zip::from(g.gate_d.row_mut(x))
                    .and(&d)
                    .and(fwd.cd.row(i))
                    .for_each(|a, &d, &c| *a += d * c);
                Zip::from(dca.row_mut(i))
                    .and(&d)
                    .and(p.gate_a.row(x))
                    .for_each(|a, &d, &w| *a += d * w);
                Zip::from(dcb.row_mut(i))
                    .and(&d)
                    .and(p.gate_b.row(x))
                    .for_each(|a, &d, &w| *a += d * w);
                Zip::from(dcd.row_mut(i))
                    .and(&d)
                    .and(p.gate_d.row(x))
                    .for_each(|a, &d, &w| *a += d * w);
            }
            dh_next = dpre.dot(&p.recurrent_w.t());
        }
        let through_tanh = |dc: Array2<S>, c: &Array2<S>| {
            Zip::from(&dc)
                .and(c)
                .map_collect(|&d, &c| d * (S::one() - c * c))
        };
        let da = through_tanh(dca, &fwd.ca);
        let db = through_tanh(dcb, &fwd.cb);
        let dd = through_tanh(dcd, &fwd.cd);
        g.encoder_w = fwd.fa.t().dot(&da) + fwd.fb.t().dot(&db);
        g.encoder_b = da.sum_axis(Axis(0)) + db.sum_axis(Axis(0));
        g.diff_w = fwd.fd.t().dot(&dd);
        g.diff_b = dd.sum_axis(Axis(0));
        g
    }

    /// Autoregressive sampling, one independent rng per pair. Cached
    /// log-probabilities are those of the untempered policy.
    pub fn sample<R: Rng>(
        &self,
        pairs: &[PairFeatures],
        cfg: &SamplingConfig,
        rngs: &mut [R],
    ) -> Result<Vec<Rollout<S>>, PolicyError> {
        cfg.validate()?;
        if rngs.len() != pairs.len() {
            return Err(PolicyError::Shape(format!(
                "{} rngs for {} pairs",
                rngs.len(),
                pairs.len()
            )));
        }
        self.decode(pairs, cfg, Some(rngs))
    }

    pub fn sample_rollout<R: Rng>(
        &self,
        pair: PairFeatures,
        cfg: &SamplingConfig,
        rng: &mut R,
    ) -> Result<Rollout<S>, PolicyError> {
        Ok(self
            .sample(&[pair], cfg, std::slice::from_mut(rng))?
            .remove(0))
    }

    /// Argmax decoding, ties to the lowest token id.
    pub fn greedy_decode(
        &self,
        pairs: &[PairFeatures],
        max_tokens: usize,
    ) -> Result<Vec<Vec<TokenId>>, PolicyError> {
        let cfg = SamplingConfig::greedy(max_tokens);
        cfg.validate()?;
        Ok(self
            .decode::<rand_chacha::ChaCha8Rng>(pairs, &cfg, None)?
            .into_iter()
            .map(|r| r.tokens)
            .collect())
    }

    fn decode<R: Rng>(
        &self,
        pairs: &[PairFeatures],
        cfg: &SamplingConfig,
        mut rngs: Option<&mut [R]>,
    ) -> Result<Vec<Rollout<S>>, PolicyError> {
        let [_, _, _, ca, cb, cd] = self.encode(pairs)?;
        let n = pairs.len();
        let grammar = &self.ctx.grammar;
        let eos = self.ctx.vocab.eos;
        let mut out: Vec<Rollout<S>> = (0..n)
            .map(|_| Rollout {
                tokens: Vec::new(),
                log_probs: Vec::new(),
            })
            .collect();
        let mut states = vec![grammar.start(); n];
        let mut done = vec![false; n];
        let mut h = Array2::zeros((n, self.params.hidden()));
        let mut inputs = vec![self.bos(); n];
        for _ in 0..cfg.max_tokens {
            if done.iter().all(|&d| d) {
                break;
            }
            let (h_new, lp) = self.step(&h, &inputs, &states, (&ca, &cb, &cd));
            h = h_new;
            for i in 0..n {
                if done[i] {
                    continue;
                }
                let row = lp.row(i);
                let row = row.as_slice().expect("standard layout");
                let tok = if cfg.temperature == 0.0 {
                    argmax(row)
                } else {
                    let rng = &mut rngs.as_deref_mut().expect("sampling needs rngs")[i];
                    sample_row(row, cfg.temperature, cfg.top_p, rng)
                };
                out[i].tokens.push(tok);
                out[i].log_probs.push(row[tok]);
                states[i] = grammar.advance(states[i], tok);
                inputs[i] = tok;
                if tok == eos {
                    done[i] = true;
                }
            }
        }
        Ok(out)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(log_probs / temperature)` restricted to the nucleus:
/// tokens sorted by probability (ties to the lowest id), smallest prefix
/// whose mass reaches `top_p`.
pub fn sample_row<S: Scalar, R: Rng>(
    log_probs: &[S],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> usize {
    let scaled: Vec<f64> = log_probs
        .iter()
        .map(|&x| x.as_f64() / temperature)
        .collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut order: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    let mut mass = total;
    if top_p < 1.0 {
        order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = 0;
        for &i in &order {
            cum += w[i];
            keep += 1;
            if cum >= top_p * total {
                break;
            }
        }
        order.truncate(keep);
        mass = cum;
    }
    let u = rng.gen::<f64>() * mass;
    let mut cum = 0.0;
    for &i in &order {
        cum += w[i];
        if u < cum {
            return i;
        }
    }
    *order.last().expect("at least one token has mass")
}

/// Immutable copy of a policy used as the KL anchor.
#[derive(Clone)]
pub struct ReferencePolicy<S>(Policy<S>);

impl<S: Scalar> ReferencePolicy<S> {
    pub fn policy(&self) -> &Policy<S> {
        &self.0
    }

    pub fn params(&self) -> &PolicyParams<S> {
        &self.0.params
    }

    pub fn forward(
        &self,
        pairs: &[PairFeatures],
        sequences: &[Vec<TokenId>],
    ) -> Result<Forward<S>, PolicyError> {
        self.0.forward(pairs, sequences)
    }

    pub fn log_probs(
        &self,
        pairs: &[PairFeatures],
        sequences: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<S>>, PolicyError> {
        self.0.log_probs(pairs, sequences)
    }

    pub fn from_params(policy: &Policy<S>, params: PolicyParams<S>) -> Self {
        Self(policy.with_params(params))
    }
}

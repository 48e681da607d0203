use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use crate::taxonomy::AttributeMode;

/// How the tag grammar constrains the policy's logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrammarMask {
    /// No constraint.
    #[default]
    Off,
    /// Illegal tokens have their logit lowered by a fixed penalty.
    Soft,
    /// Illegal tokens get probability zero.
    Hard,
}

/// Position in the trace grammar after a token prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrammarState {
    Start,
    Think {
        next: usize,
        may_close: bool,
    },
    First {
        level: usize,
    },
    Sep {
        level: usize,
        first: TokenId,
    },
    Second {
        level: usize,
        first: TokenId,
    },
    Close {
        level: usize,
        differs: bool,
    },
    AfterThink,
    Answer,
    AnswerClose,
    Done,
    /// An illegal token was emitted; nothing is constrained any more.
    Broken,
}

/// Legal-token tables for the trace grammar of one vocabulary.
///
/// With `levels` false the think block must stay empty (answer-only traces).
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    k: usize,
    binary: bool,
    levels: bool,
    think_open: TokenId,
    think_close: TokenId,
    answer_open: TokenId,
    answer_close: TokenId,
    separator: TokenId,
    same: TokenId,
    different: TokenId,
    eos: TokenId,
    level_open: Vec<TokenId>,
    level_close: Vec<TokenId>,
    allowed: Vec<Vec<bool>>,
}

impl Grammar {
    pub fn new(vocab: &Vocabulary, levels: bool) -> Self {
        let k = vocab.schema().len();
        let v = vocab.len();
        let mut g = Self {
            k,
            binary: vocab.schema().mode() == AttributeMode::Binary,
            levels,
            think_open: vocab.think_open,
            think_close: vocab.think_close,
            answer_open: vocab.answer_open,
            answer_close: vocab.answer_close,
            separator: vocab.separator,
            same: vocab.same,
            different: vocab.different,
            eos: vocab.eos,
            level_open: (0..k).map(|i| vocab.level_open(i)).collect(),
            level_close: (0..k).map(|i| vocab.level_close(i)).collect(),
            allowed: Vec::new(),
        };
        let only = |ids: &[TokenId]| {
            let mut row = vec![false; v];
            for &i in ids {
                row[i] = true;
            }
            row
        };
        let mut allowed = vec![only(&[g.think_open])];
        for next in 0..=k {
            for may_close in [false, true] {
                let mut ids = Vec::new();
                if levels && next < k {
                    ids.push(g.level_open[next]);
                }
                if may_close {
                    ids.push(g.think_close);
                }
                allowed.push(only(&ids));
            }
        }
        for level in 0..k {
            if g.binary {
                allowed.push(only(&[g.same, g.different]));
            } else {
                allowed.push(only(vocab.level_names(level)));
            }
        }
        allowed.push(only(&[g.separator]));
        for level in 0..k {
            allowed.push(only(vocab.level_names(level)));
        }
        for level in 0..k {
            allowed.push(only(&[g.level_close[level]]));
        }
        allowed.push(only(&[g.answer_open]));
        allowed.push(only(vocab.answers()));
        allowed.push(only(&[g.answer_close]));
        allowed.push(only(&[g.eos]));
        allowed.push(vec![true; v]);
        g.allowed = allowed;
        g
    }

    pub fn start(&self) -> GrammarState {
        GrammarState::Start
    }

    /// Number of distinct legal-token tables.
    pub fn key_count(&self) -> usize {
        self.allowed.len()
    }

    /// Index of the legal-token table for `state`.
    pub fn key(&self, state: GrammarState) -> usize {
        let k = self.k;
        let think = 1;
        let first = think + 2 * (k + 1);
        let sep = first + k;
        let second = sep + 1;
        let close = second + k;
        let tail = close + k;
        match state {
            GrammarState::Start => 0,
            GrammarState::Think { next, may_close } => think + 2 * next + may_close as usize,
            GrammarState::First { level } => first + level,
            GrammarState::Sep { .. } => sep,
            GrammarState::Second { level, .. } => second + level,
            GrammarState::Close { level, .. } => close + level,
            GrammarState::AfterThink => tail,
            GrammarState::Answer => tail + 1,
            GrammarState::AnswerClose => tail + 2,
            GrammarState::Done => tail + 3,
            GrammarState::Broken => tail + 4,
        }
    }

    pub fn allowed_by_key(&self, key: usize) -> &[bool] {
        &self.allowed[key]
    }

    pub fn allowed(&self, state: GrammarState) -> &[bool] {
        &self.allowed[self.key(state)]
    }

    pub fn advance(&self, state: GrammarState, tok: TokenId) -> GrammarState {
        use GrammarState::*;
        if !self.allowed(state).get(tok).copied().unwrap_or(false) {
            return Broken;
        }
        match state {
            Start => Think {
                next: 0,
                may_close: !self.levels,
            },
            Think { next, .. } => {
                if tok == self.think_close {
                    AfterThink
                } else {
                    First { level: next }
                }
            }
            First { level } => {
                if self.binary {
                    Close {
                        level,
                        differs: tok == self.different,
                    }
                } else {
                    Sep { level, first: tok }
                }
            }
            Sep { level, first } => Second { level, first },
            Second { level, first } => Close {
                level,
                differs: tok != first,
            },
            Close { level, differs } => Think {
                next: level + 1,
                may_close: differs || level + 1 == self.k,
            },
            AfterThink => Answer,
            Answer => AnswerClose,
            AnswerClose | Done => Done,
            Broken => Broken,
        }
    }

    /// States before each token of `tokens` (the state that scored it).
    pub fn states(&self, tokens: &[TokenId]) -> Vec<GrammarState> {
        let mut st = self.start();
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            out.push(st);
            st = self.advance(st, t);
        }
        out
    }

    pub fn is_complete(&self, tokens: &[TokenId]) -> bool {
        let mut st = self.start();
        for &t in tokens {
            if st == GrammarState::Done && t == self.eos {
                return true;
            }
            st = self.advance(st, t);
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardVariant;
    use crate::taxonomy::{AttributeSchema, Lineage};
    use crate::trace::parse_trace_with;
    use rand::{Rng, SeedableRng};

    fn vocab(mode: AttributeMode) -> Vocabulary {
        let l = [
            Lineage::taxonomy("Aves", "Coraciiformes", "Meropidae", "Merops", "apiaster").unwrap(),
            Lineage::taxonomy("Aves", "Passeriformes", "Corvidae", "Corvus", "corax").unwrap(),
        ];
        Vocabulary::build(&AttributeSchema::taxonomy(mode), l.iter())
    }

    // Random walks through legal tokens always produce parseable traces.
    #[test]
    fn legal_walks_parse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for mode in [AttributeMode::Concrete, AttributeMode::Binary] {
            let v = vocab(mode);
            for (levels, variant) in [
                (true, RewardVariant::Intermediate),
                (false, RewardVariant::AnswerOnly),
            ] {
                let g = Grammar::new(&v, levels);
                for _ in 0..500 {
                    let mut st = g.start();
                    let mut toks = Vec::new();
                    while st != GrammarState::Done || toks.last() != Some(&v.eos) {
                        let legal: Vec<usize> =
                            (0..v.len()).filter(|&t| g.allowed(st)[t]).collect();
                        let t = legal[rng.gen_range(0..legal.len())];
                        toks.push(t);
                        st = g.advance(st, t);
                        assert_ne!(st, GrammarState::Broken);
                        if t == v.eos {
                            break;
                        }
                    }
                    assert!(g.is_complete(&toks));
                    let text = v.detokenize(&toks);
                    parse_trace_with(&text, v.schema(), variant.level_requirement()).unwrap();
                }
            }
        }
    }

    #[test]
    fn illegal_token_breaks() {
        let v = vocab(AttributeMode::Concrete);
        let g = Grammar::new(&v, true);
        assert_eq!(g.advance(g.start(), v.answer_open), GrammarState::Broken);
        assert!(g.allowed(GrammarState::Broken).iter().all(|&b| b));
        assert_eq!(g.key(GrammarState::Broken) + 1, g.key_count());
    }
}

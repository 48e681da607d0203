use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::taxonomy::{distinct_names, normalize_name, AttributeSchema, HierarchyKind, Lineage};
use crate::trace::{LevelValue, Tokenizer, TraceDocument, Verdict};

pub type TokenId = usize;

/// Number of quantized answer tokens: 0.00, 0.05, ..., 1.00.
pub const ANSWER_BINS: usize = 21;

/// Trace vocabulary. Detokenizing is plain concatenation of surfaces, which
/// reproduces the canonical serialization of a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    schema: AttributeSchema,
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub answer_open: TokenId,
    pub answer_close: TokenId,
    pub separator: TokenId,
    pub same: TokenId,
    pub different: TokenId,
    pub eos: TokenId,
    level_open: Vec<TokenId>,
    level_close: Vec<TokenId>,
    level_names: Vec<Vec<TokenId>>,
    answers: Vec<TokenId>,
}

impl Vocabulary {
    /// Builds the vocabulary for `schema`, with one name token per distinct
    /// taxon (or type label) appearing in `lineages`.
    pub fn build<'a>(
        schema: &AttributeSchema,
        lineages: impl IntoIterator<Item = &'a Lineage> + Clone,
    ) -> Self {
        let mut v = Builder::default();
        let think_open = v.add("<think>");
        let think_close = v.add("</think>");
        let answer_open = v.add("<answer>");
        let answer_close = v.add("</answer>");
        let mut level_open = Vec::new();
        let mut level_close = Vec::new();
        for level in schema.levels() {
            level_open.push(v.add(&format!("<{}>", level.tag)));
            level_close.push(v.add(&format!("</{}>", level.tag)));
        }
        let separator = v.add("; ");
        let same = v.add(Verdict::Same.as_str());
        let different = v.add(Verdict::Different.as_str());
        let mut level_names = Vec::new();
        for level in schema.levels() {
            let mut names = level.labels.clone();
            if schema.kind() == HierarchyKind::Taxonomy || level.labels.is_empty() {
                names.extend(distinct_names(lineages.clone(), level.rank));
            }
            let mut ids = Vec::new();
            for n in names {
                let id = v.add(n.trim());
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            level_names.push(ids);
        }
        let answers = (0..ANSWER_BINS)
            .map(|i| v.add(&answer_surface(i)))
            .collect();
        let eos = v.add("");
        Self {
            schema: schema.clone(),
            surfaces: v.surfaces,
            index: v.index,
            think_open,
            think_close,
            answer_open,
            answer_close,
            separator,
            same,
            different,
            eos,
            level_open,
            level_close,
            level_names,
            answers,
        }
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn level_open(&self, k: usize) -> TokenId {
        self.level_open[k]
    }

    pub fn level_close(&self, k: usize) -> TokenId {
        self.level_close[k]
    }

    pub fn level_names(&self, k: usize) -> &[TokenId] {
        &self.level_names[k]
    }

    pub fn answers(&self) -> &[TokenId] {
        &self.answers
    }

    /// Bin index of an answer token.
    pub fn answer_bin(&self, id: TokenId) -> Option<usize> {
        self.answers.iter().position(|&a| a == id)
    }

    /// Concatenates surfaces up to (excluding) the first end-of-sequence.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != self.eos)
            .filter_map(|&t| self.surface(t))
            .collect()
    }

    /// Token sequence (terminated by end-of-sequence) whose detokenization is
    /// the canonical serialization of `doc`. `None` if a value has no token.
    pub fn encode(&self, doc: &TraceDocument) -> Option<Vec<TokenId>> {
        if !doc.free_text.is_empty() {
            return None;
        }
        let mut out = vec![self.think_open];
        for level in &doc.levels {
            let k = self.schema.level_index(&level.tag)?;
            out.push(self.level_open[k]);
            match &level.value {
                LevelValue::Concrete { a, b } => {
                    out.push(self.name_token(k, a)?);
                    out.push(self.separator);
                    out.push(self.name_token(k, b)?);
                }
                LevelValue::Binary(Verdict::Same) => out.push(self.same),
                LevelValue::Binary(Verdict::Different) => out.push(self.different),
            }
            out.push(self.level_close[k]);
        }
        out.push(self.think_close);
        out.push(self.answer_open);
        let bin = (doc.answer * (ANSWER_BINS - 1) as f64).round();
        if (bin / (ANSWER_BINS - 1) as f64 - doc.answer).abs() > 1e-9 {
            return None;
        }
        out.push(self.answers[bin as usize]);
        out.push(self.answer_close);
        out.push(self.eos);
        Some(out)
    }

    fn name_token(&self, k: usize, name: &str) -> Option<TokenId> {
        let norm = normalize_name(name);
        self.level_names[k]
            .iter()
            .copied()
            .find(|&id| normalize_name(&self.surfaces[id]) == norm)
    }

    /// Greedy longest-match tokenization; unknown text is consumed one
    /// chunk at a time (up to whitespace, `<` or `;`).
    pub fn tokenize(&self, text: &str) -> Vec<Option<TokenId>> {
        let mut keys: Vec<(&str, TokenId)> = self
            .surfaces
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.trim().is_empty())
            .map(|(i, s)| (s.trim_end(), i))
            .collect();
        keys.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        let mut out = Vec::new();
        let mut rest = text;
        loop {
            rest = rest.trim_start();
            if rest.is_empty() {
                break;
            }
            if let Some((k, id)) = keys.iter().find(|(k, _)| rest.starts_with(k)) {
                out.push(Some(*id));
                rest = &rest[k.len()..];
                continue;
            }
            let mut chars = rest.char_indices();
            let (_, first) = chars.next().expect("non-empty");
            let end = chars
                .find(|(_, c)| c.is_whitespace() || *c == '<' || *c == ';')
                .map_or(rest.len(), |(i, _)| i);
            let end = end.max(first.len_utf8());
            out.push(None);
            rest = &rest[end..];
        }
        out
    }

    /// Hex SHA-256 over the ordered surfaces and schema tags.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for level in self.schema.levels() {
            h.update(level.tag.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for s in &self.surfaces {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl Tokenizer for Vocabulary {
    fn count_tokens(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

pub fn answer_surface(bin: usize) -> String {
    format!("{:.4}", bin as f64 / (ANSWER_BINS - 1) as f64)
}

pub fn answer_value(bin: usize) -> f64 {
    bin as f64 / (ANSWER_BINS - 1) as f64
}

#[derive(Default)]
struct Builder {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Builder {
    fn add(&mut self, s: &str) -> TokenId {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.surfaces.len();
        self.surfaces.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }
}

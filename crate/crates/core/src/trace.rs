//! Tagged reasoning traces: strict parser, canonical serializer, token counts.
//!
//! Grammar (whitespace allowed around the two top-level blocks only):
//!
//! ```text
//! trace  := <think> (prose | level)* </think> <answer> decimal </answer>
//! level  := <tag> value "; " value </tag>      concrete mode
//!         | <tag> verdict [";" verdict] </tag>  binary mode
//! ```
//!
//! Levels follow schema order. Once a level's two values differ (or its
//! verdict is `different`) the remaining levels may be omitted.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{names_match, AttributeMode, AttributeSchema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Same,
    Different,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Same => "same",
            Verdict::Different => "different",
        }
    }

    fn parse(s: &str) -> Option<Verdict> {
        match s.trim().to_ascii_lowercase().as_str() {
            "same" => Some(Verdict::Same),
            "different" => Some(Verdict::Different),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LevelValue {
    /// Per-image predictions for images A and B.
    Concrete {
        a: String,
        b: String,
    },
    Binary(Verdict),
}

impl LevelValue {
    /// Whether the level's own content licenses early termination.
    pub fn differs(&self) -> bool {
        match self {
            LevelValue::Concrete { a, b } => !names_match(a, b),
            LevelValue::Binary(v) => *v == Verdict::Different,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceLevel {
    pub tag: String,
    pub value: LevelValue,
}

/// A parsed reasoning trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceDocument {
    pub levels: Vec<TraceLevel>,
    /// Final confidence that the two images match, in [0, 1].
    pub answer: f64,
    /// Prose found inside the think block, segments joined by newlines.
    pub free_text: String,
    /// Whitespace-delimited token count of the raw text.
    pub token_length: usize,
}

impl TraceDocument {
    /// Index of the last level present when the trace terminated early.
    pub fn terminated_after(&self, schema: &AttributeSchema) -> Option<usize> {
        if self.levels.len() < schema.len() && !self.levels.is_empty() {
            Some(self.levels.len() - 1)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    MissingThink,
    DuplicateThink,
    UnclosedTag(String),
    UnexpectedCloseTag(String),
    NestedTag(String),
    TextOutsideBlocks,
    LevelOutsideThink(String),
    DuplicateLevel(String),
    LevelOutOfOrder(String),
    MissingLevel(String),
    MalformedLevel(String),
    MissingAnswer,
    DuplicateAnswer,
    UnparseableAnswer(String),
    AnswerOutOfRange(String),
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ParseErrorKind::*;
        match self {
            MissingThink => write!(f, "missing <think> block"),
            DuplicateThink => write!(f, "more than one <think> block"),
            UnclosedTag(t) => write!(f, "unclosed <{t}>"),
            UnexpectedCloseTag(t) => write!(f, "unexpected </{t}>"),
            NestedTag(t) => write!(f, "tag <{t}> nested inside another tag"),
            TextOutsideBlocks => write!(f, "text outside <think>/<answer> blocks"),
            LevelOutsideThink(t) => write!(f, "<{t}> outside the think block"),
            DuplicateLevel(t) => write!(f, "duplicated <{t}>"),
            LevelOutOfOrder(t) => write!(f, "<{t}> out of schema order"),
            MissingLevel(t) => write!(f, "missing <{t}>"),
            MalformedLevel(t) => write!(f, "malformed content in <{t}>"),
            MissingAnswer => write!(f, "missing <answer> block"),
            DuplicateAnswer => write!(f, "more than one <answer> block"),
            UnparseableAnswer(s) => write!(f, "answer {s:?} is not a decimal"),
            AnswerOutOfRange(s) => write!(f, "answer {s} outside [0, 1]"),
        }
    }
}

/// Structured parse failure; `position` is a byte offset into the input.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{reason} at byte {position}")]
pub struct ParseError {
    pub position: usize,
    pub reason: ParseErrorKind,
}

/// Whether think-block levels are mandatory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LevelRequirement {
    /// Levels form a schema-ordered prefix ending at K or at a differing level.
    #[default]
    Hierarchical,
    /// As above, but an empty think block is also accepted (answer-only format).
    Optional,
}

pub type ParseOutcome = Result<TraceDocument, ParseError>;

#[derive(Debug)]
struct TagEvent<'a> {
    name: &'a str,
    close: bool,
    start: usize,
    end: usize,
}

fn known_tag<'s>(schema: &'s AttributeSchema, name: &str) -> Option<&'s str> {
    match name {
        "think" => Some("think"),
        "answer" => Some("answer"),
        _ => schema
            .levels()
            .iter()
            .find(|l| l.tag == name)
            .map(|l| l.tag.as_str()),
    }
}

fn lex<'s>(text: &str, schema: &'s AttributeSchema) -> Vec<TagEvent<'s>> {
    let bytes = text.as_bytes();
    let mut events = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('<') {
        let start = i + off;
        let mut j = start + 1;
        let close = bytes.get(j) == Some(&b'/');
        if close {
            j += 1;
        }
        let name_start = j;
        while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
            j += 1;
        }
        if j < bytes.len() && bytes[j] == b'>' && j > name_start {
            if let Some(name) = known_tag(schema, &text[name_start..j]) {
                events.push(TagEvent {
                    name,
                    close,
                    start,
                    end: j + 1,
                });
                i = j + 1;
                continue;
            }
        }
        i = start + 1;
    }
    events
}

fn err(position: usize, reason: ParseErrorKind) -> ParseError {
    ParseError { position, reason }
}

fn parse_level(
    content: &str,
    tag: &str,
    mode: AttributeMode,
    position: usize,
) -> Result<LevelValue, ParseError> {
    let malformed = || err(position, ParseErrorKind::MalformedLevel(tag.to_string()));
    if content.contains('<') || content.contains('>') {
        return Err(malformed());
    }
    let parts: Vec<&str> = content.split(';').collect();
    match mode {
        AttributeMode::Concrete => {
            if parts.len() != 2 {
                return Err(malformed());
            }
            let (a, b) = (parts[0].trim(), parts[1].trim());
            if a.is_empty() || b.is_empty() {
                return Err(malformed());
            }
            Ok(LevelValue::Concrete {
                a: a.to_string(),
                b: b.to_string(),
            })
        }
        AttributeMode::Binary => {
            let verdicts: Option<Vec<Verdict>> = parts.iter().map(|p| Verdict::parse(p)).collect();
            match verdicts.as_deref() {
                Some([v]) => Ok(LevelValue::Binary(*v)),
                Some([v, w]) if v == w => Ok(LevelValue::Binary(*v)),
                _ => Err(malformed()),
            }
        }
    }
}

fn parse_answer(content: &str, position: usize) -> Result<f64, ParseError> {
    let s = content.trim();
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    let digits = |x: &str| !x.is_empty() && x.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || !frac.is_none_or(digits) {
        return Err(err(
            position,
            ParseErrorKind::UnparseableAnswer(s.to_string()),
        ));
    }
    let value: f64 = s
        .parse()
        .map_err(|_| err(position, ParseErrorKind::UnparseableAnswer(s.to_string())))?;
    if !(0.0..=1.0).contains(&value) {
        return Err(err(
            position,
            ParseErrorKind::AnswerOutOfRange(s.to_string()),
        ));
    }
    Ok(value)
}

/// Parses a trace with mandatory hierarchical levels.
pub fn parse_trace(text: &str, schema: &AttributeSchema) -> ParseOutcome {
    parse_trace_with(text, schema, LevelRequirement::Hierarchical)
}

pub fn parse_trace_with(
    text: &str,
    schema: &AttributeSchema,
    requirement: LevelRequirement,
) -> ParseOutcome {
    let events = lex(text, schema);
    let outside_ok = |from: usize, to: usize| text[from..to].trim().is_empty();

    let mut cursor = 0usize;
    let mut think: Option<(usize, usize)> = None; // content span
    let mut answer: Option<(usize, usize)> = None;
    let mut levels: Vec<(usize, usize, usize, &str)> = Vec::new(); // (tag start, content start, content end, tag)
    let mut k = 0;
    while k < events.len() {
        let ev = &events[k];
        match (ev.name, ev.close) {
            ("think", false) => {
                if think.is_some() {
                    return Err(err(ev.start, ParseErrorKind::DuplicateThink));
                }
                if answer.is_some() {
                    return Err(err(ev.start, ParseErrorKind::TextOutsideBlocks));
                }
                if !outside_ok(cursor, ev.start) {
                    return Err(err(cursor, ParseErrorKind::TextOutsideBlocks));
                }
                // Collect levels until </think>.
                let body_start = ev.end;
                let mut m = k + 1;
                let close_at = loop {
                    let Some(inner) = events.get(m) else {
                        return Err(err(ev.start, ParseErrorKind::UnclosedTag("think".into())));
                    };
                    match (inner.name, inner.close) {
                        ("think", true) => break inner,
                        ("think", false) => {
                            return Err(err(inner.start, ParseErrorKind::NestedTag("think".into())))
                        }
                        ("answer", _) => {
                            return Err(err(ev.start, ParseErrorKind::UnclosedTag("think".into())))
                        }
                        (tag, false) => {
                            let Some(close) = events.get(m + 1) else {
                                return Err(err(
                                    inner.start,
                                    ParseErrorKind::UnclosedTag(tag.into()),
                                ));
                            };
                            if close.name != tag || !close.close {
                                if close.close {
                                    return Err(err(
                                        inner.start,
                                        ParseErrorKind::UnclosedTag(tag.into()),
                                    ));
                                }
                                return Err(err(
                                    close.start,
                                    ParseErrorKind::NestedTag(close.name.into()),
                                ));
                            }
                            levels.push((inner.start, inner.end, close.start, tag));
                            m += 2;
                        }
                        (tag, true) => {
                            return Err(err(
                                inner.start,
                                ParseErrorKind::UnexpectedCloseTag(tag.into()),
                            ))
                        }
                    }
                };
                think = Some((body_start, close_at.start));
                cursor = close_at.end;
                k = m + 1;
            }
            ("answer", false) => {
                if answer.is_some() {
                    return Err(err(ev.start, ParseErrorKind::DuplicateAnswer));
                }
                if think.is_none() {
                    return Err(err(ev.start, ParseErrorKind::MissingThink));
                }
                if !outside_ok(cursor, ev.start) {
                    return Err(err(cursor, ParseErrorKind::TextOutsideBlocks));
                }
                match events.get(k + 1) {
                    Some(close) if close.name == "answer" && close.close => {
                        answer = Some((ev.end, close.start));
                        cursor = close.end;
                        k += 2;
                    }
                    Some(other) if !other.close => {
                        return Err(err(
                            other.start,
                            ParseErrorKind::NestedTag(other.name.into()),
                        ))
                    }
                    _ => return Err(err(ev.start, ParseErrorKind::UnclosedTag("answer".into()))),
                }
            }
            ("think" | "answer", true) => {
                return Err(err(
                    ev.start,
                    ParseErrorKind::UnexpectedCloseTag(ev.name.into()),
                ));
            }
            (tag, _) => return Err(err(ev.start, ParseErrorKind::LevelOutsideThink(tag.into()))),
        }
    }
    let Some((think_start, think_end)) = think else {
        return Err(err(0, ParseErrorKind::MissingThink));
    };
    let Some((ans_start, ans_end)) = answer else {
        return Err(err(text.len(), ParseErrorKind::MissingAnswer));
    };
    if !outside_ok(cursor, text.len()) {
        return Err(err(cursor, ParseErrorKind::TextOutsideBlocks));
    }

    // Levels: schema-ordered prefix.
    let mut parsed = Vec::with_capacity(levels.len());
    for (i, &(tag_start, c_start, c_end, tag)) in levels.iter().enumerate() {
        let idx = schema
            .level_index(tag)
            .expect("lexer only yields schema tags");
        if idx != i {
            let kind = if idx < i {
                if levels[..i].iter().any(|l| l.3 == tag) {
                    ParseErrorKind::DuplicateLevel(tag.into())
                } else {
                    ParseErrorKind::LevelOutOfOrder(tag.into())
                }
            } else if i < schema.len()
                && levels[i + 1..]
                    .iter()
                    .any(|l| l.3 == schema.levels()[i].tag)
            {
                ParseErrorKind::LevelOutOfOrder(tag.into())
            } else {
                ParseErrorKind::MissingLevel(schema.levels()[i].tag.clone())
            };
            return Err(err(tag_start, kind));
        }
        let value = parse_level(&text[c_start..c_end], tag, schema.mode(), c_start)?;
        parsed.push(TraceLevel {
            tag: tag.to_string(),
            value,
        });
    }
    if parsed.len() < schema.len() {
        let licensed = match parsed.last() {
            Some(last) => last.value.differs(),
            None => requirement == LevelRequirement::Optional,
        };
        if !licensed {
            return Err(err(
                think_end,
                ParseErrorKind::MissingLevel(schema.levels()[parsed.len()].tag.clone()),
            ));
        }
    }

    // Prose between tags inside the think block.
    let mut segments = Vec::new();
    let mut pos = think_start;
    for &(tag_start, _, c_end, tag) in &levels {
        segments.push(&text[pos..tag_start]);
        pos = c_end + tag.len() + 3;
    }
    segments.push(&text[pos..think_end]);
    let free_text = segments
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n");

    let answer = parse_answer(&text[ans_start..ans_end], ans_start)?;
    Ok(TraceDocument {
        levels: parsed,
        answer,
        free_text,
        token_length: text.split_whitespace().count(),
    })
}

/// Canonical rendering: no whitespace between tags, `"; "` between values,
/// four-decimal answer.
pub fn serialize_trace(doc: &TraceDocument) -> String {
    let mut out = String::from("<think>");
    for level in &doc.levels {
        out.push('<');
        out.push_str(&level.tag);
        out.push('>');
        match &level.value {
            LevelValue::Concrete { a, b } => {
                out.push_str(a);
                out.push_str("; ");
                out.push_str(b);
            }
            LevelValue::Binary(v) => out.push_str(v.as_str()),
        }
        out.push_str("</");
        out.push_str(&level.tag);
        out.push('>');
    }
    out.push_str(&doc.free_text);
    out.push_str("</think><answer>");
    out.push_str(&format!("{:.4}", doc.answer));
    out.push_str("</answer>");
    out
}

/// Something that can count tokens in trace text.
pub trait Tokenizer {
    fn count_tokens(&self, text: &str) -> usize;
}

/// Fallback tokenizer for externally produced text.
#[derive(Clone, Copy, Debug, Default)]
pub struct Whitespace;

impl Tokenizer for Whitespace {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

pub fn token_length(text: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count_tokens(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::AttributeMode;

    fn tax() -> AttributeSchema {
        AttributeSchema::taxonomy(AttributeMode::Concrete)
    }

    const BEE_EATER: &str = "<think>
1. Order Analysis: ...in the same order.
   <order>Coraciiformes; Coraciiformes</order>
2. Family Analysis: ...in different families.
   <family>Meropidae; Alcedinidae</family>
...
</think><answer>0.0000</answer>";

    const SILVERBACK: &str = "<think>
<type>Silverback; Silverback</type>
Both images show a large gorilla with a prominent silverback mane, which is a characteristic feature of a Silverback gorilla... There are no visible differences... that would suggest these are two different gorillas.
</think>
<answer>1.0000</answer>";

    #[test]
    fn parses_early_terminated_trace() {
        let doc = parse_trace(BEE_EATER, &tax()).unwrap();
        assert_eq!(doc.levels.len(), 2);
        assert_eq!(
            doc.levels[1].value,
            LevelValue::Concrete {
                a: "Meropidae".into(),
                b: "Alcedinidae".into()
            }
        );
        assert_eq!(doc.answer, 0.0);
        assert!(doc.free_text.starts_with("1. Order Analysis"));
        assert_eq!(doc.terminated_after(&tax()), Some(1));
    }

    #[test]
    fn parses_identity_trace() {
        let schema = AttributeSchema::identity(AttributeMode::Concrete);
        let doc = parse_trace(SILVERBACK, &schema).unwrap();
        assert_eq!(doc.levels.len(), 1);
        assert_eq!(doc.answer, 1.0);
    }

    #[test]
    fn missing_answer_is_an_error() {
        let e = parse_trace("<think><order>A; B</order></think>", &tax()).unwrap_err();
        assert_eq!(e.reason, ParseErrorKind::MissingAnswer);
    }

    #[test]
    fn level_errors() {
        let s = tax();
        let cases = [
            (
                "<think><family>A; B</family><order>A; A</order></think><answer>0</answer>",
                "order",
            ),
            (
                "<think><order>A; A</order><order>A; A</order></think><answer>0</answer>",
                "dup",
            ),
            (
                "<think><order>A; A</order><genus>A; B</genus></think><answer>0</answer>",
                "missing",
            ),
            (
                "<think><order>A; A</order></think><answer>0</answer>",
                "missing",
            ),
            (
                "<think><order>A</order></think><answer>0</answer>",
                "malformed",
            ),
            (
                "<think><order>A; B; C</order></think><answer>0</answer>",
                "malformed",
            ),
            ("<think></think><answer>0</answer>", "missing"),
        ];
        for (text, expect) in cases {
            let e = parse_trace(text, &s).unwrap_err();
            let ok = match expect {
                "order" => matches!(e.reason, ParseErrorKind::LevelOutOfOrder(_)),
                "dup" => matches!(e.reason, ParseErrorKind::DuplicateLevel(_)),
                "missing" => matches!(e.reason, ParseErrorKind::MissingLevel(_)),
                "malformed" => matches!(e.reason, ParseErrorKind::MalformedLevel(_)),
                _ => unreachable!(),
            };
            assert!(ok, "{text}: {e:?}");
        }
    }

    #[test]
    fn answer_errors() {
        let s = tax();
        let wrap = |a: &str| format!("<think><order>A; B</order></think><answer>{a}</answer>");
        assert!(matches!(
            parse_trace(&wrap("1.5"), &s).unwrap_err().reason,
            ParseErrorKind::AnswerOutOfRange(_)
        ));
        assert!(matches!(
            parse_trace(&wrap("-0.1"), &s).unwrap_err().reason,
            ParseErrorKind::UnparseableAnswer(_)
        ));
        assert!(matches!(
            parse_trace(&wrap("abc"), &s).unwrap_err().reason,
            ParseErrorKind::UnparseableAnswer(_)
        ));
        assert!(matches!(
            parse_trace(&wrap("1e-1"), &s).unwrap_err().reason,
            ParseErrorKind::UnparseableAnswer(_)
        ));
        assert_eq!(parse_trace(&wrap(" 0.25 "), &s).unwrap().answer, 0.25);
        assert_eq!(parse_trace(&wrap("1"), &s).unwrap().answer, 1.0);
    }

    #[test]
    fn structural_errors() {
        let s = tax();
        let cases = [
            "prefix <think><order>A; B</order></think><answer>0</answer>",
            "<think><order>A; B</order></think><answer>0</answer> suffix",
            "<think><order>A; B</order></think>x<answer>0</answer>",
            "<think><order>A; B</order></think><answer>0</answer><answer>0</answer>",
            "<think><order>A; B</order></think><think></think><answer>0</answer>",
            "<think><order>A; B</order><answer>0</answer></think>",
            "<think><order>A; <family>B</order></think><answer>0</answer>",
            "<order>A; B</order><think></think><answer>0</answer>",
            "<answer>0</answer>",
            "<think><order>A; B</order></think><answer>0",
            "",
        ];
        for text in cases {
            assert!(parse_trace(text, &s).is_err(), "{text}");
        }
    }

    #[test]
    fn separator_without_space_and_binary_forms() {
        let doc = parse_trace(
            "<think><order>A;B</order></think><answer>0</answer>",
            &tax(),
        )
        .unwrap();
        assert_eq!(
            doc.levels[0].value,
            LevelValue::Concrete {
                a: "A".into(),
                b: "B".into()
            }
        );

        let bin = tax().with_mode(AttributeMode::Binary);
        for t in [
            "<think><order>same</order><family>different</family></think><answer>0.1000</answer>",
            "<think><order>same; same</order><family>different; different</family></think><answer>0.1000</answer>",
        ] {
            let doc = parse_trace(t, &bin).unwrap();
            assert_eq!(doc.levels[0].value, LevelValue::Binary(Verdict::Same));
            assert_eq!(doc.levels[1].value, LevelValue::Binary(Verdict::Different));
        }
        assert!(parse_trace(
            "<think><order>same; different</order></think><answer>0</answer>",
            &bin
        )
        .is_err());
    }

    #[test]
    fn optional_levels_accept_empty_think() {
        let text = "<think> The two birds are visually distinct. </think><answer>0.0000</answer>";
        assert!(parse_trace(text, &tax()).is_err());
        let doc = parse_trace_with(text, &tax(), LevelRequirement::Optional).unwrap();
        assert!(doc.levels.is_empty());
        assert_eq!(doc.free_text, "The two birds are visually distinct.");
    }

    #[test]
    fn serialize_formats() {
        let mut doc = parse_trace(BEE_EATER, &tax()).unwrap();
        doc.free_text.clear();
        doc.answer = 0.5;
        let text = serialize_trace(&doc);
        assert_eq!(
            text,
            "<think><order>Coraciiformes; Coraciiformes</order><family>Meropidae; Alcedinidae</family></think><answer>0.5000</answer>"
        );
        assert!(!text.contains("<genus>"));
    }

    #[test]
    fn whitespace_token_length() {
        assert_eq!(token_length("", &Whitespace), 0);
        assert_eq!(token_length("a b\n c\t", &Whitespace), 3);
    }

    #[test]
    fn unknown_angle_brackets_are_prose() {
        let t = "<think>wing < tail, <b>bold</b> <order>A; A</order><family>B; C</family></think><answer>0</answer>";
        let doc = parse_trace(t, &tax()).unwrap();
        assert!(doc.free_text.contains("<b>bold</b>"));
    }
}

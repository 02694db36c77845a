//! Mathematical text: tokens mixing words and math symbols, with formula and
//! sentence segmentation.
//!
//! Formulas are delimited by `$…$` in raw text. Inside a formula every
//! non-whitespace character is its own math symbol, except that a backslash
//! command such as `\frac` stays one token. Outside formulas, words split on
//! whitespace, punctuation is split off, and each CJK ideograph is a word.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const BOS: usize = 5;
pub const EOS: usize = 6;

const SPECIALS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"];

/// Number of reserved special ids; every id at or above this is ordinary text.
pub const NUM_SPECIAL: usize = SPECIALS.len();

const SENTENCE_END: [&str; 6] = [".", "!", "?", "。", "！", "？"];
const PUNCTUATION: &str = ".,;:!?()[]{}\"'。，；：！？（）、“”《》";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Word,
    MathSymbol,
    Special,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub kind: TokenKind,
    pub id: usize,
}

/// Bijective surface ↔ id mapping. Ids `0..NUM_SPECIAL` are the special
/// tokens; the rest are assigned in order of first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    kinds: Vec<TokenKind>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    surface: String,
    kind: TokenKind,
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<VocabEntry> = self
            .surfaces
            .iter()
            .zip(&self.kinds)
            .map(|(surface, &kind)| VocabEntry {
                surface: surface.clone(),
                kind,
            })
            .collect();
        entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<VocabEntry>::deserialize(d)?;
        let mut vocab = Vocabulary::new();
        for (i, e) in entries.into_iter().enumerate() {
            if i < NUM_SPECIAL {
                if e.surface != SPECIALS[i] {
                    return Err(serde::de::Error::custom(format!(
                        "entry {i} must be the special token {}",
                        SPECIALS[i]
                    )));
                }
                continue;
            }
            if vocab.index.contains_key(&e.surface) {
                return Err(serde::de::Error::custom(format!("duplicate surface `{}`", e.surface)));
            }
            vocab.insert(e.surface, e.kind);
        }
        Ok(vocab)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the special tokens.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            surfaces: Vec::new(),
            kinds: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s.to_string(), TokenKind::Special);
        }
        v
    }

    fn insert(&mut self, surface: String, kind: TokenKind) -> usize {
        let id = self.surfaces.len();
        self.index.insert(surface.clone(), id);
        self.surfaces.push(surface);
        self.kinds.push(kind);
        id
    }

    /// Id of `surface`, adding it with `kind` if unseen.
    pub fn add(&mut self, surface: &str, kind: TokenKind) -> usize {
        match self.index.get(surface) {
            Some(&id) => id,
            None => self.insert(surface.to_string(), kind),
        }
    }

    /// Adds every surface of `raw` in order of appearance.
    pub fn observe(&mut self, tokenizer: &Tokenizer, raw: &str) -> Result<()> {
        for lex in tokenizer.lex(raw)? {
            self.add(&lex.surface, lex.kind);
        }
        Ok(())
    }

    /// Id of `surface`, or [`UNK`].
    pub fn id(&self, surface: &str) -> usize {
        self.index.get(surface).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.index.contains_key(surface)
    }

    pub fn surface(&self, id: usize) -> &str {
        self.surfaces.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    /// Kind the surface was first seen with.
    pub fn kind(&self, id: usize) -> TokenKind {
        self.kinds.get(id).copied().unwrap_or(TokenKind::Special)
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Ids of all non-special entries.
    pub fn ordinary_ids(&self) -> Range<usize> {
        NUM_SPECIAL..self.len()
    }

    pub fn token(&self, id: usize) -> Token {
        Token {
            surface: self.surface(id).to_string(),
            kind: self.kind(id),
            id,
        }
    }
}

/// One lexed surface before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexeme {
    pub surface: String,
    pub kind: TokenKind,
    /// Index of the enclosing formula, if any.
    pub formula: Option<usize>,
}

/// Rule-based tokenizer with configurable formula delimiters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub open: char,
    pub close: char,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { open: '$', close: '$' }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF)
}

impl Tokenizer {
    /// Splits raw text into surfaces.
    pub fn lex(&self, raw: &str) -> Result<Vec<Lexeme>> {
        let mut out = Vec::new();
        let mut word = String::new();
        let mut formula: Option<usize> = None;
        let mut formulas = 0;
        let flush = |word: &mut String, out: &mut Vec<Lexeme>| {
            if !word.is_empty() {
                out.push(Lexeme {
                    surface: std::mem::take(word),
                    kind: TokenKind::Word,
                    formula: None,
                });
            }
        };
        let mut chars = raw.chars().peekable();
        while let Some(c) = chars.next() {
            if let Some(f) = formula {
                if c == self.close {
                    formula = None;
                } else if c.is_whitespace() {
                } else if c == '\\' {
                    let mut s = String::from('\\');
                    while let Some(&n) = chars.peek() {
                        if n.is_ascii_alphabetic() {
                            s.push(n);
                            chars.next();
                        } else {
                            break;
                        }
                    }
                    if s.len() == 1 {
                        if let Some(n) = chars.next_if(|n| !n.is_whitespace() && *n != self.close) {
                            s.push(n);
                        }
                    }
                    out.push(Lexeme {
                        surface: s,
                        kind: TokenKind::MathSymbol,
                        formula: Some(f),
                    });
                } else {
                    out.push(Lexeme {
                        surface: c.to_string(),
                        kind: TokenKind::MathSymbol,
                        formula: Some(f),
                    });
                }
                continue;
            }
            if c == self.open {
                flush(&mut word, &mut out);
                formula = Some(formulas);
                formulas += 1;
            } else if c.is_whitespace() {
                flush(&mut word, &mut out);
            } else if PUNCTUATION.contains(c) || is_cjk(c) {
                flush(&mut word, &mut out);
                out.push(Lexeme {
                    surface: c.to_string(),
                    kind: TokenKind::Word,
                    formula: None,
                });
            } else {
                word.push(c);
            }
        }
        if formula.is_some() {
            return Err(CoreError::InvalidText(format!(
                "unterminated formula (missing closing `{}`)",
                self.close
            )));
        }
        flush(&mut word, &mut out);
        Ok(out)
    }

    /// Tokenizes `raw` as a statement with no solution part.
    pub fn tokenize(&self, raw: &str, vocab: &Vocabulary) -> Result<MathText> {
        let lexed = self.lex(raw)?;
        if lexed.is_empty() {
            return Err(CoreError::EmptyText);
        }
        let n = lexed.len();
        Ok(MathText::from_lexemes(lexed, n, vocab))
    }

    /// Tokenizes a problem statement followed by its solution text; sentence
    /// spans of the solution are filled in.
    pub fn tokenize_problem(&self, statement: &str, solution: &str, vocab: &Vocabulary) -> Result<MathText> {
        let mut lexed = self.lex(statement)?;
        let statement_len = lexed.len();
        let offset = lexed.iter().filter_map(|l| l.formula).max().map_or(0, |m| m + 1);
        lexed.extend(self.lex(solution)?.into_iter().map(|mut l| {
            l.formula = l.formula.map(|f| f + offset);
            l
        }));
        if lexed.is_empty() {
            return Err(CoreError::EmptyText);
        }
        Ok(MathText::from_lexemes(lexed, statement_len, vocab).segment_sentences())
    }
}

/// Groups maximal runs of equal `Some(label)` into half-open spans.
pub(crate) fn spans_from_labels(labels: &[Option<usize>]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if let Some(l) = labels[i] {
            let start = i;
            while i < labels.len() && labels[i] == Some(l) {
                i += 1;
            }
            spans.push((start, i));
        } else {
            i += 1;
        }
    }
    spans
}

/// A tokenized problem: statement tokens `[0, statement_len)` followed by
/// solution tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MathText {
    pub tokens: Vec<Token>,
    pub formula_spans: Vec<(usize, usize)>,
    pub sentence_spans: Vec<(usize, usize)>,
    pub statement_len: usize,
}

impl MathText {
    fn from_lexemes(lexed: Vec<Lexeme>, statement_len: usize, vocab: &Vocabulary) -> Self {
        let labels: Vec<Option<usize>> = lexed.iter().map(|l| l.formula).collect();
        let tokens = lexed
            .into_iter()
            .map(|l| Token {
                id: vocab.id(&l.surface),
                surface: l.surface,
                kind: l.kind,
            })
            .collect();
        MathText {
            tokens,
            formula_spans: spans_from_labels(&labels),
            sentence_spans: Vec::new(),
            statement_len,
        }
    }

    /// Builds a text from ids using each id's default kind; formulas are the
    /// maximal runs of math symbols.
    pub fn from_ids(ids: &[usize], vocab: &Vocabulary, statement_len: usize) -> Self {
        let tokens: Vec<Token> = ids.iter().map(|&id| vocab.token(id)).collect();
        let labels: Vec<Option<usize>> = tokens
            .iter()
            .map(|t| (t.kind == TokenKind::MathSymbol).then_some(0))
            .collect();
        MathText {
            formula_spans: spans_from_labels(&labels),
            tokens,
            sentence_spans: Vec::new(),
            statement_len: statement_len.min(ids.len()),
        }
        .segment_sentences()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn solution_range(&self) -> Range<usize> {
        self.statement_len..self.tokens.len()
    }

    pub fn statement_ids(&self) -> Vec<usize> {
        self.tokens[..self.statement_len].iter().map(|t| t.id).collect()
    }

    pub fn solution_ids(&self) -> Vec<usize> {
        self.tokens[self.statement_len..].iter().map(|t| t.id).collect()
    }

    /// Formula spans lying entirely inside the solution region.
    pub fn solution_formulas(&self) -> Vec<(usize, usize)> {
        self.formula_spans
            .iter()
            .copied()
            .filter(|&(s, _)| s >= self.statement_len)
            .collect()
    }

    /// Recomputes sentence spans: the solution region is cut after every
    /// sentence-final punctuation word.
    pub fn segment_sentences(mut self) -> Self {
        let mut spans = Vec::new();
        let mut start = self.statement_len;
        for i in self.solution_range() {
            let t = &self.tokens[i];
            if t.kind == TokenKind::Word && SENTENCE_END.contains(&t.surface.as_str()) {
                spans.push((start, i + 1));
                start = i + 1;
            }
        }
        if start < self.tokens.len() {
            spans.push((start, self.tokens.len()));
        }
        self.sentence_spans = spans;
        self
    }

    /// Checks every structural invariant, describing the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if self.statement_len > n {
            return Err(format!("statement length {} exceeds {n} tokens", self.statement_len));
        }
        let check_list = |name: &str, spans: &[(usize, usize)]| -> std::result::Result<(), String> {
            let mut prev_end = 0;
            for (i, &(s, e)) in spans.iter().enumerate() {
                if s >= e || e > n {
                    return Err(format!("{name} span {i} ({s},{e}) is empty or out of bounds"));
                }
                if s < prev_end {
                    return Err(format!("{name} span {i} ({s},{e}) overlaps its predecessor"));
                }
                prev_end = e;
            }
            Ok(())
        };
        check_list("formula", &self.formula_spans)?;
        check_list("sentence", &self.sentence_spans)?;
        for &(s, e) in &self.formula_spans {
            if let Some(t) = self.tokens[s..e].iter().find(|t| t.kind != TokenKind::MathSymbol) {
                return Err(format!("formula span ({s},{e}) contains non-symbol `{}`", t.surface));
            }
        }
        let mut cursor = self.statement_len;
        for &(s, e) in &self.sentence_spans {
            if s != cursor {
                return Err(format!("sentence spans leave a gap at token {cursor}"));
            }
            cursor = e;
        }
        if cursor != n && !(self.sentence_spans.is_empty() && self.statement_len == n) {
            return Err("sentence spans do not cover the solution".to_string());
        }
        Ok(())
    }

    /// Renders tokens separated by single spaces, re-wrapping formulas in `$…$`.
    pub fn detokenize(&self) -> String {
        render(&self.tokens, &self.formula_spans)
    }

    pub fn render_statement(&self) -> String {
        let spans: Vec<_> = self
            .formula_spans
            .iter()
            .copied()
            .filter(|&(_, e)| e <= self.statement_len)
            .collect();
        render(&self.tokens[..self.statement_len], &spans)
    }

    pub fn render_solution(&self) -> String {
        let off = self.statement_len;
        let spans: Vec<_> = self
            .solution_formulas()
            .into_iter()
            .map(|(s, e)| (s - off, e - off))
            .collect();
        render(&self.tokens[off..], &spans)
    }
}

fn render(tokens: &[Token], formulas: &[(usize, usize)]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut spans = formulas.iter().peekable();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(&&(s, e)) = spans.peek() {
            if s == i {
                let inner: Vec<&str> = tokens[s..e].iter().map(|t| t.surface.as_str()).collect();
                parts.push(format!("${}$", inner.join(" ")));
                spans.next();
                i = e;
                continue;
            }
        }
        parts.push(tokens[i].surface.clone());
        i += 1;
    }
    parts.join(" ")
}

//! Closed word-level vocabulary with structural tags and waypoint slot tokens.
//!
//! Text is canonical: words are separated by single spaces, `,` and `.` attach
//! to the preceding word, and tags attach to both neighbours. The vocabulary
//! text dump has one `id<TAB>token` line per entry.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use thiserror::Error;

use crate::geometry::DiscreteAction;
use crate::lexicon::Lexicon;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const THINK_OPEN: u32 = 3;
pub const THINK_CLOSE: u32 = 4;
pub const ACTION_OPEN: u32 = 5;
pub const ACTION_CLOSE: u32 = 6;
pub const WP1: u32 = 7;
pub const WP2: u32 = 8;
pub const WP3: u32 = 9;

const SPECIALS: [&str; 10] = [
    "<pad>", "<bos>", "<eos>", "<think>", "</think>", "<action>", "</action>", "<wp1>", "<wp2>", "<wp3>",
];
const PUNCTUATION: [&str; 2] = [",", "."];
/// Largest integer with its own token (stage numbers).
const MAX_NUMBER: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("vocabulary line {line}: {reason}")]
    BadDump { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list; the first ten entries
    /// must be the special tokens in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::BadDump {
                    line: i + 1,
                    reason: format!("expected special token {s}"),
                });
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::BadDump {
                    line: i + 1,
                    reason: format!("invalid token `{t}`"),
                });
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::BadDump {
                    line: i + 1,
                    reason: format!("duplicate token `{t}`"),
                });
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Vocabulary covering every word the builtin lexicon can produce.
    pub fn builtin() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| Self::from_lexicon(Lexicon::builtin()))
    }

    pub fn from_lexicon(lex: &Lexicon) -> Self {
        let mut words = BTreeSet::new();
        let sections = [
            &lex.landmarks,
            &lex.single,
            &lex.opening,
            &lex.middle,
            &lex.closing,
            &lex.rationale,
        ];
        for line in sections.into_iter().flatten() {
            for w in split_words(&strip_placeholders(line)) {
                words.insert(w.to_string());
            }
        }
        for a in DiscreteAction::ALL {
            for w in a.phrase().split_whitespace() {
                words.insert(w.to_string());
            }
        }
        for p in PUNCTUATION {
            words.remove(p);
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(DiscreteAction::ALL.iter().map(|a| a.name().to_string()));
        tokens.extend(PUNCTUATION.iter().map(|s| s.to_string()));
        tokens.extend((0..=MAX_NUMBER).map(|n| n.to_string()));
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens).expect("lexicon words form a valid vocabulary")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn action_id(&self, action: DiscreteAction) -> u32 {
        self.id(action.name()).expect("action names are in every vocabulary")
    }

    /// Action named by a token id, if it is an action token.
    pub fn action_of(&self, id: u32) -> Option<DiscreteAction> {
        self.token(id).and_then(|t| DiscreteAction::from_str(t).ok())
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Encodes canonical text; tag spellings map to their special ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        pieces(text)
            .map(|p| self.id(p).ok_or_else(|| TokenizerError::OutOfVocabulary(p.to_string())))
            .collect()
    }

    /// Total inverse of [`encode`](Self::encode); unknown ids render as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in ids {
            let tok = self.token(id).unwrap_or("<unk>");
            let special = Self::is_special(id) || self.token(id).is_none();
            if special {
                out.push_str(tok);
                prev_word = false;
            } else if PUNCTUATION.contains(&tok) {
                out.push_str(tok);
                prev_word = true;
            } else {
                if prev_word {
                    out.push(' ');
                }
                out.push_str(tok);
                prev_word = true;
            }
        }
        out
    }

    /// One `id<TAB>token` line per entry.
    pub fn dump(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{i}\t{t}\n")).collect()
    }

    pub fn load(text: &str) -> Result<Self, TokenizerError> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| TokenizerError::BadDump {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (id, tok) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }
}

fn strip_placeholders(line: &str) -> String {
    let mut out = String::new();
    let mut rest = line;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        match rest[i..].find('}') {
            Some(j) => rest = &rest[i + j + 1..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Splits canonical text into word and punctuation pieces (tags kept whole).
pub fn split_words(text: &str) -> Vec<&str> {
    pieces(text).collect()
}

fn pieces(text: &str) -> impl Iterator<Item = &str> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            break;
        }
        if let Some(tag) = SPECIALS.iter().find(|s| rest.starts_with(*s)) {
            out.push(&rest[..tag.len()]);
            rest = &rest[tag.len()..];
            continue;
        }
        let end = rest
            .char_indices()
            .skip(1)
            .find(|&(_, c)| c.is_whitespace() || c == '<')
            .map_or(rest.len(), |(i, _)| i);
        let mut word = &rest[..end];
        rest = &rest[end..];
        let mut tail = Vec::new();
        while word.len() > 1 && (word.ends_with(',') || word.ends_with('.')) {
            tail.push(&word[word.len() - 1..]);
            word = &word[..word.len() - 1];
        }
        out.push(word);
        out.extend(tail.into_iter().rev());
    }
    out.into_iter()
}

/// Encoded training sequence.
///
/// Layout: BOS, instruction, history actions, `<think>`, rationale,
/// `</think>`, `<action>`, action, `</action>`, WP1, WP2, WP3, EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub tokens: Vec<u32>,
    /// Positions of WP1, WP2, WP3.
    pub slots: [usize; 3],
    /// Tokens before `<think>`; generation starts here.
    pub prompt_len: usize,
    /// Position of the action token.
    pub action_pos: usize,
}

impl EncodedSample {
    /// Positions whose next token is a training target: every position from
    /// the last prompt token up to the token before EOS.
    pub fn supervised_positions(&self) -> std::ops::Range<usize> {
        self.prompt_len - 1..self.tokens.len() - 1
    }
}

/// Encodes the prompt (BOS, instruction, history actions).
pub fn encode_prompt(
    vocab: &Vocabulary,
    instruction: &str,
    history: &[DiscreteAction],
) -> Result<Vec<u32>, TokenizerError> {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(instruction)?);
    tokens.extend(history.iter().map(|&a| vocab.action_id(a)));
    Ok(tokens)
}

/// Encodes a full sequence in the training layout.
pub fn encode_parts(
    vocab: &Vocabulary,
    instruction: &str,
    history: &[DiscreteAction],
    cot: &str,
    action: DiscreteAction,
) -> Result<EncodedSample, TokenizerError> {
    let mut tokens = encode_prompt(vocab, instruction, history)?;
    let prompt_len = tokens.len();
    tokens.push(THINK_OPEN);
    tokens.extend(vocab.encode(cot)?);
    tokens.extend([THINK_CLOSE, ACTION_OPEN]);
    let action_pos = tokens.len();
    tokens.extend([vocab.action_id(action), ACTION_CLOSE, WP1, WP2, WP3, EOS]);
    let n = tokens.len();
    Ok(EncodedSample {
        tokens,
        slots: [n - 4, n - 3, n - 2],
        prompt_len,
        action_pos,
    })
}

/// Why a model output failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParseFailure {
    MissingTag,
    DuplicateTag,
    BadAction,
    TrailingGarbage,
}

impl ParseFailure {
    pub fn code(self) -> &'static str {
        match self {
            ParseFailure::MissingTag => "missing-tag",
            ParseFailure::DuplicateTag => "duplicate-tag",
            ParseFailure::BadAction => "bad-action",
            ParseFailure::TrailingGarbage => "trailing-garbage",
        }
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub cot: String,
    pub action: DiscreteAction,
}

pub type ParseResult = Result<ParsedOutput, ParseFailure>;

/// Parses `<think>…</think><action>name</action>`, optionally followed by the
/// slot tokens, EOS and padding. Never panics.
pub fn parse_tagged_output(text: &str) -> ParseResult {
    const TAGS: [&str; 4] = ["<think>", "</think>", "<action>", "</action>"];
    let mut pos = [0usize; 4];
    for (k, tag) in TAGS.iter().enumerate() {
        let found: Vec<usize> = text.match_indices(tag).map(|(i, _)| i).collect();
        match found.len() {
            0 => return Err(ParseFailure::MissingTag),
            1 => pos[k] = found[0],
            _ => return Err(ParseFailure::DuplicateTag),
        }
    }
    if !(pos[0] < pos[1] && pos[1] < pos[2] && pos[2] < pos[3]) {
        return Err(ParseFailure::MissingTag);
    }
    let before = &text[..pos[0]];
    let between = &text[pos[1] + TAGS[1].len()..pos[2]];
    if !before.trim().is_empty() || !between.trim().is_empty() {
        return Err(ParseFailure::TrailingGarbage);
    }
    let mut after = text[pos[3] + TAGS[3].len()..].trim_start();
    after = after.strip_prefix("<wp1><wp2><wp3>").unwrap_or(after);
    after = after.strip_prefix("<eos>").unwrap_or(after);
    while let Some(rest) = after.strip_prefix("<pad>") {
        after = rest;
    }
    if !after.trim().is_empty() {
        return Err(ParseFailure::TrailingGarbage);
    }
    let cot = &text[pos[0] + TAGS[0].len()..pos[1]];
    let action = &text[pos[2] + TAGS[2].len()..pos[3]];
    if SPECIALS.iter().any(|s| cot.contains(s)) || cot.contains("<unk>") {
        return Err(ParseFailure::TrailingGarbage);
    }
    let action = DiscreteAction::from_str(action.trim()).map_err(|_| ParseFailure::BadAction)?;
    Ok(ParsedOutput {
        cot: cot.trim().to_string(),
        action,
    })
}

/// Token-level variant of [`parse_tagged_output`].
pub fn parse_tagged_tokens(vocab: &Vocabulary, ids: &[u32]) -> ParseResult {
    parse_tagged_output(&vocab.decode(ids))
}

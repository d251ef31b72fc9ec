//! Landmark labels and instruction templates, loaded from `data/lexicon.txt`.

use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use thiserror::Error;

const BUILTIN: &str = include_str!("../data/lexicon.txt");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: text outside of a section")]
    NoSection { line: usize },
    #[error("unknown section `{0}`")]
    UnknownSection(String),
    #[error("section `{0}` is empty")]
    EmptySection(&'static str),
    #[error("duplicate landmark label `{0}`")]
    DuplicateLandmark(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub landmarks: Vec<String>,
    pub single: Vec<String>,
    pub opening: Vec<String>,
    pub middle: Vec<String>,
    pub closing: Vec<String>,
    /// Reasoning-trace templates.
    pub rationale: Vec<String>,
    source_hash: String,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lex = Lexicon {
            landmarks: Vec::new(),
            single: Vec::new(),
            opening: Vec::new(),
            middle: Vec::new(),
            closing: Vec::new(),
            rationale: Vec::new(),
            source_hash: hex(&Sha256::digest(text.as_bytes())),
        };
        let mut section: Option<&mut Vec<String>> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(match name {
                    "landmarks" => &mut lex.landmarks,
                    "single" => &mut lex.single,
                    "opening" => &mut lex.opening,
                    "middle" => &mut lex.middle,
                    "closing" => &mut lex.closing,
                    "rationale" => &mut lex.rationale,
                    other => return Err(LexiconError::UnknownSection(other.to_string())),
                });
                continue;
            }
            match section.as_mut() {
                Some(s) => s.push(line.to_string()),
                None => return Err(LexiconError::NoSection { line: i + 1 }),
            }
        }
        for (name, s) in [
            ("landmarks", &lex.landmarks),
            ("single", &lex.single),
            ("opening", &lex.opening),
            ("middle", &lex.middle),
            ("closing", &lex.closing),
            ("rationale", &lex.rationale),
        ] {
            if s.is_empty() {
                return Err(LexiconError::EmptySection(name));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &lex.landmarks {
            if !seen.insert(l) {
                return Err(LexiconError::DuplicateLandmark(l.clone()));
            }
        }
        Ok(lex)
    }

    /// The lexicon compiled into the binary.
    pub fn builtin() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(|| Lexicon::parse(BUILTIN).expect("builtin lexicon is valid"))
    }

    /// SHA-256 of the source text, hex encoded.
    pub fn hash(&self) -> &str {
        &self.source_hash
    }

    pub fn template_count(&self) -> usize {
        self.single.len() + self.opening.len() + self.middle.len() + self.closing.len()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

//! Lexer, classifier and serializer for tablature token text.
//!
//! A song is a sequence of whitespace-separated tokens, normally one per
//! line. The vocabulary handled here:
//!
//! | token                               | kind          |
//! |-------------------------------------|---------------|
//! | `artist:..` `title:..` `downtune:..` `tempo:N` `timesig:N/D` `instrument:ID` | `Header` |
//! | `start` / `end`                     | `Start` / `End` |
//! | `new_measure`                       | `NewMeasure`  |
//! | `wait:N` (N >= 1)                   | `Wait`        |
//! | `repeat_open`, `measure:repeat_open`| `RepeatOpen`  |
//! | `repeat_close[:N]`, `measure:repeat_close[:N]` | `RepeatClose` |
//! | `nfx:..` `bfx:..` `measure:..`      | `Effect`      |
//! | `TRACK:note:DESC`                   | `NoteOn`      |
//! | anything else                       | `Unknown`     |
//!
//! Tokens keep their raw text, so rendering is always byte-exact.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::TimeSignature;

/// Prefixes that mark song-level metadata.
const HEADER_PREFIXES: &[&str] = &[
    "artist:",
    "title:",
    "downtune:",
    "tempo:",
    "timesig:",
    "instrument:",
];

const EFFECT_PREFIXES: &[&str] = &["nfx:", "bfx:", "measure:"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("input contains no tokens")]
    EmptyInput,
    #[error("malformed wait token `{raw}` at position {position}")]
    MalformedWait { raw: String, position: usize },
    #[error("header token `{raw}` at position {position} follows body tokens")]
    MisplacedHeader { raw: String, position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Header,
    NoteOn { track: String, descriptor: String },
    Wait { ticks: u64 },
    NewMeasure,
    RepeatOpen,
    RepeatClose { count: Option<u32> },
    Start,
    End,
    Effect,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    raw: String,
    kind: TokenKind,
}

impl Token {
    /// Lexes a single unit of text. Fails only on malformed `wait:` tokens.
    pub fn parse(raw: &str) -> Result<Token, TokenError> {
        let kind = classify(raw).ok_or_else(|| TokenError::MalformedWait {
            raw: raw.to_string(),
            position: 0,
        })?;
        Ok(Token {
            raw: raw.to_string(),
            kind,
        })
    }

    pub fn wait(ticks: u64) -> Token {
        assert!(ticks > 0, "wait ticks must be positive");
        Token {
            raw: format!("wait:{ticks}"),
            kind: TokenKind::Wait { ticks },
        }
    }

    pub fn note(track: &str, descriptor: &str) -> Token {
        Token {
            raw: format!("{track}:note:{descriptor}"),
            kind: TokenKind::NoteOn {
                track: track.to_string(),
                descriptor: descriptor.to_string(),
            },
        }
    }

    pub fn new_measure() -> Token {
        Token::keyword("new_measure", TokenKind::NewMeasure)
    }

    pub fn repeat_open() -> Token {
        Token::keyword("repeat_open", TokenKind::RepeatOpen)
    }

    pub fn repeat_close() -> Token {
        Token::keyword("repeat_close", TokenKind::RepeatClose { count: None })
    }

    pub fn start() -> Token {
        Token::keyword("start", TokenKind::Start)
    }

    pub fn end() -> Token {
        Token::keyword("end", TokenKind::End)
    }

    pub fn tempo(bpm: u32) -> Token {
        Token::keyword(&format!("tempo:{bpm}"), TokenKind::Header)
    }

    pub fn time_signature(sig: TimeSignature) -> Token {
        Token::keyword(
            &format!("timesig:{}/{}", sig.numerator, sig.denominator),
            TokenKind::Header,
        )
    }

    pub fn instrument(track: &str) -> Token {
        Token::keyword(&format!("instrument:{track}"), TokenKind::Header)
    }

    fn keyword(raw: &str, kind: TokenKind) -> Token {
        Token {
            raw: raw.to_string(),
            kind,
        }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn kind(&self) -> &TokenKind {
        &self.kind
    }

    pub fn is_header(&self) -> bool {
        matches!(self.kind, TokenKind::Header)
    }

    pub fn wait_ticks(&self) -> Option<u64> {
        match self.kind {
            TokenKind::Wait { ticks } => Some(ticks),
            _ => None,
        }
    }

    /// Key/value view of a header token, e.g. `("tempo", "120")`.
    pub fn header_field(&self) -> Option<(&str, &str)> {
        if !self.is_header() {
            return None;
        }
        self.raw.split_once(':')
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Returns `None` only for malformed waits.
fn classify(raw: &str) -> Option<TokenKind> {
    let kind = match raw {
        "start" => TokenKind::Start,
        "end" => TokenKind::End,
        "new_measure" => TokenKind::NewMeasure,
        "repeat_open" | "measure:repeat_open" => TokenKind::RepeatOpen,
        "repeat_close" | "measure:repeat_close" => TokenKind::RepeatClose { count: None },
        _ => {
            if let Some(ticks) = raw.strip_prefix("wait:") {
                return match ticks.parse::<u64>() {
                    Ok(t) if t > 0 && !ticks.starts_with('+') => Some(TokenKind::Wait { ticks: t }),
                    _ => None,
                };
            }
            if let Some(count) = raw
                .strip_prefix("repeat_close:")
                .or_else(|| raw.strip_prefix("measure:repeat_close:"))
            {
                if let Some(n) = parse_canonical_u32(count) {
                    return Some(TokenKind::RepeatClose { count: Some(n) });
                }
            }
            if HEADER_PREFIXES.iter().any(|p| raw.starts_with(p)) {
                TokenKind::Header
            } else if EFFECT_PREFIXES.iter().any(|p| raw.starts_with(p)) {
                TokenKind::Effect
            } else if let Some((track, descriptor)) = raw.split_once(":note:") {
                if track.is_empty() || descriptor.is_empty() || track.contains(':') {
                    TokenKind::Unknown
                } else {
                    TokenKind::NoteOn {
                        track: track.to_string(),
                        descriptor: descriptor.to_string(),
                    }
                }
            } else {
                TokenKind::Unknown
            }
        }
    };
    Some(kind)
}

// Rejects forms like "+2" or "02" so a count always renders back to the same text.
fn parse_canonical_u32(s: &str) -> Option<u32> {
    if s.is_empty() || s.starts_with('+') || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

/// A song: leading metadata tokens followed by the musical body.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub header: Vec<Token>,
    pub body: Vec<Token>,
}

impl TokenStream {
    pub fn new(header: Vec<Token>, body: Vec<Token>) -> TokenStream {
        debug_assert!(header.iter().all(Token::is_header));
        debug_assert!(!body.iter().any(Token::is_header));
        TokenStream { header, body }
    }

    pub fn len(&self) -> usize {
        self.header.len() + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.header.is_empty() && self.body.is_empty()
    }

    pub fn total_ticks(&self) -> u64 {
        self.body.iter().filter_map(Token::wait_ticks).sum()
    }

    fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .filter_map(Token::header_field)
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    pub fn tempo(&self) -> Option<u32> {
        self.header_value("tempo").and_then(|v| v.parse().ok())
    }

    pub fn time_signature(&self) -> Option<TimeSignature> {
        self.header_value("timesig").and_then(|v| v.parse().ok())
    }

    /// Track ids declared with `instrument:` header tokens, in header order.
    pub fn declared_instruments(&self) -> Vec<&str> {
        self.header
            .iter()
            .filter_map(Token::header_field)
            .filter(|(k, _)| *k == "instrument")
            .map(|(_, v)| v)
            .collect()
    }
}

pub fn tokenize(text: &str) -> Result<TokenStream, TokenError> {
    let mut header = Vec::new();
    let mut body = Vec::new();
    for (position, unit) in text.split_whitespace().enumerate() {
        let kind = classify(unit).ok_or_else(|| TokenError::MalformedWait {
            raw: unit.to_string(),
            position,
        })?;
        let token = Token {
            raw: unit.to_string(),
            kind,
        };
        if token.is_header() {
            if !body.is_empty() {
                return Err(TokenError::MisplacedHeader {
                    raw: token.raw,
                    position,
                });
            }
            header.push(token);
        } else {
            body.push(token);
        }
    }
    if header.is_empty() && body.is_empty() {
        return Err(TokenError::EmptyInput);
    }
    Ok(TokenStream { header, body })
}

/// Newline-separated text, header first. No trailing newline.
pub fn render(stream: &TokenStream) -> String {
    render_tokens(stream.header.iter().chain(stream.body.iter()))
}

pub fn render_tokens<'a>(tokens: impl IntoIterator<Item = &'a Token>) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(tok.raw());
    }
    out
}

//! Loop extraction and loop-aware generation for multi-track tablature
//! token streams.
//!
//! * [`tokens`]: lexer and serializer for token text files.
//! * [`score`]: flattening a song into a tick-accurate event list.
//! * [`loopfind`]: correlative-matrix repetition detection and loop filters.
//! * [`dataset`]: loop corpus formats, statistics and parameter sweeps.
//! * [`genkit`]: token sources, an n-gram reference model and the
//!   bar-enforcing decoder.

pub mod dataset;
pub mod genkit;
pub mod loopfind;
pub mod score;
pub mod tokens;

pub use loopfind::{extract_loops, ExtractedLoop, ExtractionParams, LoopCandidate, LoopSource};
pub use score::{build_melody_line, MelodyLine, NoteSet, TimeSignature, PPQ};
pub use tokens::{render, tokenize, Token, TokenKind, TokenStream};

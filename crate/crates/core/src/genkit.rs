//! Bar-constrained generation.
//!
//! A [`TokenSource`] proposes the next token; [`generate_constrained`] wraps
//! it and owns the musical clock. It sums `wait` ticks, cuts any wait that
//! would cross a bar line, inserts `new_measure` at every bar line and ends
//! the stream with `end` in place of the final bar line. [`NgramModel`] is a
//! small back-off model that satisfies the source contract.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{list_songs, read_song, DatasetError};
use crate::loopfind::{ExtractError, ExtractedLoop, ExtractionParams, SongAnalysis};
use crate::score::{bar_duration, TimeSignature, PPQ, TIME_SIGNATURE_CHANGE_PREFIX};
use crate::tokens::{Token, TokenKind, TokenStream};

/// Weight applied per back-off step.
pub const BACKOFF_FACTOR: f64 = 0.4;

pub const MODEL_FORMAT: &str = "tabloop-ngram";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("token source failed: {0}")]
pub struct SourceError(pub String);

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("token budget of {budget} exhausted after {bars_done} of {bars_requested} bars")]
    TruncatedBudget {
        budget: usize,
        bars_done: u32,
        bars_requested: u32,
    },
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("invalid generation constraints: {0}")]
    InvalidConstraints(String),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(String),
}

/// Anything that can propose the next token of a song body.
///
/// Implementations must be deterministic for a given `rng` state, must
/// return lexically valid tokens and must never return header tokens.
pub trait TokenSource {
    fn next_token(&mut self, context: &[Token], temperature: f64, rng: &mut dyn RngCore) -> Result<Token, SourceError>;

    /// A draw that is not a bar line, `start`, `end` or a time signature
    /// change. The default redraws
    /// from [`Self::next_token`] up to [`MAX_REDRAWS`] times; sources that
    /// expose their distribution should sample it with those tokens masked,
    /// which is the same distribution without the retries.
    fn next_content_token(
        &mut self,
        context: &[Token],
        temperature: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Token, SourceError> {
        for _ in 0..MAX_REDRAWS {
            let t = self.next_token(context, temperature, rng)?;
            if !is_structural(&t) {
                return Ok(t);
            }
        }
        Err(SourceError(format!("{MAX_REDRAWS} draws in a row were structural tokens")))
    }
}

pub const MAX_REDRAWS: usize = 256;

/// Tokens the decoder owns: bar lines, stream framing and time signature
/// changes, which would contradict the enforced bar length.
pub fn is_structural(t: &Token) -> bool {
    matches!(t.kind(), TokenKind::NewMeasure | TokenKind::Start | TokenKind::End)
        || t.raw().starts_with(TIME_SIGNATURE_CHANGE_PREFIX)
}

macro_rules! forward_source {
    ($($ty:ty),*) => {$(
        impl<S: TokenSource + ?Sized> TokenSource for $ty {
            fn next_token(&mut self, context: &[Token], temperature: f64, rng: &mut dyn RngCore) -> Result<Token, SourceError> {
                (**self).next_token(context, temperature, rng)
            }

            fn next_content_token(&mut self, context: &[Token], temperature: f64, rng: &mut dyn RngCore) -> Result<Token, SourceError> {
                (**self).next_content_token(context, temperature, rng)
            }
        }
    )*};
}

forward_source!(&mut S, Box<S>);

/// Cycles through a fixed token list, ignoring context and randomness.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    tokens: Vec<Token>,
    position: usize,
}

impl ReplaySource {
    pub fn new(tokens: Vec<Token>) -> ReplaySource {
        assert!(!tokens.is_empty(), "nothing to replay");
        ReplaySource { tokens, position: 0 }
    }
}

impl TokenSource for ReplaySource {
    fn next_token(&mut self, _: &[Token], _: f64, _: &mut dyn RngCore) -> Result<Token, SourceError> {
        let t = self.tokens[self.position % self.tokens.len()].clone();
        self.position += 1;
        Ok(t)
    }
}

// Context tokens missing from the vocabulary map here; no table uses it.
const UNSEEN: u32 = u32::MAX;

#[derive(Debug, Clone, Default, PartialEq)]
struct Continuations {
    total: u64,
    counts: Vec<(u32, u64)>,
}

/// Back-off n-gram model over body tokens.
///
/// `order` is the context length: order 0 is a unigram model, order 1
/// conditions on the previous token.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab: Vec<Token>,
    index: HashMap<String, u32>,
    /// `tables[n]` maps n-token contexts to continuation counts.
    tables: Vec<HashMap<Vec<u32>, Continuations>>,
}

impl NgramModel {
    /// Counts every context of length `0..=order` in each stream's body.
    /// A trailing `end` is appended to bodies that lack one, so the model
    /// learns where songs stop.
    pub fn train<'a>(streams: impl IntoIterator<Item = &'a TokenStream>, order: usize) -> Result<NgramModel, ModelError> {
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut vocab = Vec::new();
        let mut raw_tables: Vec<HashMap<Vec<u32>, HashMap<u32, u64>>> = vec![HashMap::new(); order + 1];

        for stream in streams {
            if stream.body.is_empty() {
                continue;
            }
            let mut ids: Vec<u32> = stream
                .body
                .iter()
                .map(|t| {
                    *index.entry(t.raw().to_string()).or_insert_with(|| {
                        vocab.push(t.clone());
                        vocab.len() as u32 - 1
                    })
                })
                .collect();
            if stream.body.last().map(Token::kind) != Some(&TokenKind::End) {
                let end = Token::end();
                ids.push(*index.entry(end.raw().to_string()).or_insert_with(|| {
                    vocab.push(end);
                    vocab.len() as u32 - 1
                }));
            }
            for p in 0..ids.len() {
                for (n, table) in raw_tables.iter_mut().enumerate().take(p.min(order) + 1) {
                    *table.entry(ids[p - n..p].to_vec()).or_default().entry(ids[p]).or_default() += 1;
                }
            }
        }
        if vocab.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }

        let tables = raw_tables
            .into_iter()
            .map(|t| {
                t.into_iter()
                    .map(|(ctx, next)| {
                        let mut counts: Vec<(u32, u64)> = next.into_iter().collect();
                        counts.sort_unstable();
                        let total = counts.iter().map(|(_, c)| c).sum();
                        (ctx, Continuations { total, counts })
                    })
                    .collect()
            })
            .collect();
        Ok(NgramModel {
            order,
            vocab,
            index,
            tables,
        })
    }

    pub fn train_dir(dir: &Path, order: usize) -> Result<NgramModel, ModelError> {
        let songs = list_songs(dir)?;
        let streams = songs.iter().map(|p| read_song(p)).collect::<Result<Vec<_>, _>>()?;
        NgramModel::train(&streams, order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[Token] {
        &self.vocab
    }

    /// Next-token distribution after `context`, indexed like [`Self::vocab`].
    ///
    /// Stupid back-off: a token seen after the longest matching context
    /// scores its relative frequency there; otherwise it inherits
    /// `BACKOFF_FACTOR` times its score under the next shorter context. The
    /// scores are normalised to sum to one.
    pub fn distribution(&self, context: &[Token]) -> Vec<f64> {
        let tail = &context[context.len().saturating_sub(self.order)..];
        let ids: Vec<u32> = tail
            .iter()
            .map(|t| self.index.get(t.raw()).copied().unwrap_or(UNSEEN))
            .collect();

        let mut scores = vec![0.0; self.vocab.len()];
        let mut assigned = vec![false; self.vocab.len()];
        let mut weight = 1.0;
        for n in (0..=ids.len()).rev() {
            if let Some(cont) = self.tables[n].get(&ids[ids.len() - n..]) {
                for &(id, count) in &cont.counts {
                    let id = id as usize;
                    if !assigned[id] {
                        assigned[id] = true;
                        scores[id] = weight * count as f64 / cont.total as f64;
                    }
                }
                weight *= BACKOFF_FACTOR;
            }
        }
        let sum: f64 = scores.iter().sum();
        scores.iter_mut().for_each(|s| *s /= sum);
        scores
    }

    /// Relative frequency of `next` after exactly `context` (its last
    /// `order` tokens) in the training data, without back-off. `None` when
    /// that context was never seen.
    pub fn conditional_frequency(&self, context: &[Token], next: &str) -> Option<f64> {
        let tail = &context[context.len().saturating_sub(self.order)..];
        let ids: Option<Vec<u32>> = tail.iter().map(|t| self.index.get(t.raw()).copied()).collect();
        let cont = self.tables[tail.len()].get(&ids?)?;
        let id = self.index.get(next).copied();
        let count = cont.counts.iter().find(|(i, _)| Some(*i) == id).map_or(0, |(_, c)| *c);
        Some(count as f64 / cont.total as f64)
    }

    /// Probability of `next` under [`Self::distribution`].
    pub fn probability(&self, context: &[Token], next: &str) -> f64 {
        match self.index.get(next) {
            Some(&id) => self.distribution(context)[id as usize],
            None => 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let tables = self
            .tables
            .iter()
            .map(|t| {
                let mut rows: Vec<ModelRow> = t
                    .iter()
                    .map(|(ctx, cont)| ModelRow {
                        context: ctx.clone(),
                        next: cont.counts.clone(),
                    })
                    .collect();
                rows.sort_by(|a, b| a.context.cmp(&b.context));
                rows
            })
            .collect();
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            order: self.order,
            vocab: self.vocab.iter().map(|t| t.raw().to_string()).collect(),
            tables,
        };
        serde_json::to_string(&file).map_err(|e| ModelError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<NgramModel, ModelError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(ModelError::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        if file.tables.len() != file.order + 1 || file.vocab.is_empty() {
            return Err(ModelError::Format("table count does not match order".into()));
        }
        let mut vocab = Vec::with_capacity(file.vocab.len());
        let mut index = HashMap::new();
        for (i, raw) in file.vocab.iter().enumerate() {
            let t = Token::parse(raw).map_err(|e| ModelError::Format(e.to_string()))?;
            if t.is_header() {
                return Err(ModelError::Format(format!("header token `{raw}` in vocabulary")));
            }
            index.insert(raw.clone(), i as u32);
            vocab.push(t);
        }
        let v = vocab.len() as u32;
        let mut tables = Vec::with_capacity(file.tables.len());
        for (n, rows) in file.tables.into_iter().enumerate() {
            let mut table = HashMap::with_capacity(rows.len());
            for row in rows {
                let valid = row.context.len() == n
                    && row.context.iter().all(|&id| id < v)
                    && !row.next.is_empty()
                    && row.next.iter().all(|&(id, c)| id < v && c > 0);
                if !valid {
                    return Err(ModelError::Format(format!("malformed order-{n} row")));
                }
                let total = row.next.iter().map(|(_, c)| c).sum();
                table.insert(row.context, Continuations { total, counts: row.next });
            }
            tables.push(table);
        }
        if tables[0].is_empty() {
            return Err(ModelError::Format("missing unigram table".into()));
        }
        Ok(NgramModel {
            order: file.order,
            vocab,
            index,
            tables,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NgramModel, ModelError> {
        NgramModel::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRow {
    context: Vec<u32>,
    next: Vec<(u32, u64)>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    order: usize,
    vocab: Vec<String>,
    tables: Vec<Vec<ModelRow>>,
}

/// Index drawn from `probs` after temperature scaling. Temperatures at or
/// below 1e-6 pick the most likely index.
pub fn sample_with_temperature(probs: &[f64], temperature: f64, rng: &mut dyn RngCore) -> usize {
    let argmax = || {
        probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    };
    if temperature <= 1e-6 {
        return argmax();
    }
    let max = probs.iter().cloned().fold(0.0, f64::max);
    let weights: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { ((p.ln() - max.ln()) / temperature).exp() } else { 0.0 })
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => argmax(),
    }
}

impl TokenSource for &NgramModel {
    fn next_token(&mut self, context: &[Token], temperature: f64, rng: &mut dyn RngCore) -> Result<Token, SourceError> {
        let probs = self.distribution(context);
        Ok(self.vocab[sample_with_temperature(&probs, temperature, rng)].clone())
    }

    fn next_content_token(&mut self, context: &[Token], temperature: f64, rng: &mut dyn RngCore) -> Result<Token, SourceError> {
        let mut probs = self.distribution(context);
        for (p, t) in probs.iter_mut().zip(&self.vocab) {
            if is_structural(t) {
                *p = 0.0;
            }
        }
        if probs.iter().all(|&p| p == 0.0) {
            return Err(SourceError("vocabulary holds only structural tokens".into()));
        }
        Ok(self.vocab[sample_with_temperature(&probs, temperature, rng)].clone())
    }
}

impl TokenSource for NgramModel {
    fn next_token(&mut self, context: &[Token], temperature: f64, rng: &mut dyn RngCore) -> Result<Token, SourceError> {
        (&*self).next_token(context, temperature, rng)
    }

    fn next_content_token(&mut self, context: &[Token], temperature: f64, rng: &mut dyn RngCore) -> Result<Token, SourceError> {
        (&*self).next_content_token(context, temperature, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentRoot {
    pub track: String,
    /// Note descriptor as it appears after `:note:`, e.g. `s3:f2` or `36`.
    pub root: String,
}

impl InstrumentRoot {
    pub fn new(track: &str, root: &str) -> InstrumentRoot {
        InstrumentRoot {
            track: track.into(),
            root: root.into(),
        }
    }
}

pub const EIGHTH_NOTE: u64 = PPQ / 2;

/// Tempo and instrument header, one root note per instrument struck
/// together, then a single wait.
pub fn build_primer(tempo: u32, instruments: &[InstrumentRoot], duration_ticks: u64) -> Result<TokenStream, GenerateError> {
    if instruments.is_empty() {
        return Err(GenerateError::InvalidConstraints("primer needs at least one instrument".into()));
    }
    if duration_ticks == 0 {
        return Err(GenerateError::InvalidConstraints("primer duration must be positive".into()));
    }
    let mut header = vec![Token::tempo(tempo)];
    header.extend(instruments.iter().map(|i| Token::instrument(&i.track)));
    let mut body = vec![Token::start()];
    body.extend(instruments.iter().map(|i| Token::note(&i.track, &i.root)));
    body.push(Token::wait(duration_ticks));
    Ok(TokenStream::new(header, body))
}

/// Drums, distorted guitar on A3 and bass on A2 for an eighth note at 120 BPM.
pub fn a_minor_rock_primer() -> TokenStream {
    build_primer(
        120,
        &[
            InstrumentRoot::new("drums", "36"),
            InstrumentRoot::new("distorted0", "s3:f2"),
            InstrumentRoot::new("bass", "s1:f2"),
        ],
        EIGHTH_NOTE,
    )
    .expect("static primer is valid")
}

/// Primer built from a song: its tempo, its instruments and the first note
/// each instrument plays.
pub fn primer_from_song(song: &TokenStream, duration_ticks: u64) -> Option<TokenStream> {
    let mut tracks: Vec<String> = song.declared_instruments().iter().map(|s| s.to_string()).collect();
    let mut firsts: HashMap<&str, &str> = HashMap::new();
    for t in &song.body {
        if let TokenKind::NoteOn { track, descriptor } = t.kind() {
            if !tracks.contains(track) {
                tracks.push(track.clone());
            }
            firsts.entry(track).or_insert(descriptor);
        }
    }
    let roots: Vec<InstrumentRoot> = tracks
        .iter()
        .filter_map(|tr| firsts.get(tr.as_str()).map(|d| InstrumentRoot::new(tr, d)))
        .collect();
    build_primer(song.tempo().unwrap_or(crate::score::DEFAULT_TEMPO), &roots, duration_ticks).ok()
}

/// Smallest-denominator signature (4, 8, 16 or 32) whose bar lasts
/// `ticks` at the standard resolution. 3/4 and 6/8 both give 2880 ticks;
/// this returns 3/4.
pub fn signature_for_bar_ticks(ticks: u64) -> Option<TimeSignature> {
    [4u32, 8, 16, 32].into_iter().find_map(|den| {
        let whole = ticks * den as u64;
        let quarter_units = 4 * PPQ;
        (ticks > 0 && whole % quarter_units == 0).then(|| TimeSignature::new((whole / quarter_units) as u32, den))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConstraints {
    pub bars: u32,
    pub time_signature: TimeSignature,
    pub primer: TokenStream,
    /// Ceiling on sampling steps and on output body length.
    pub max_tokens: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl GenerationConstraints {
    pub fn new(bars: u32, time_signature: TimeSignature, primer: TokenStream) -> GenerationConstraints {
        GenerationConstraints {
            bars,
            time_signature,
            primer,
            max_tokens: 4096,
            seed: 0,
            temperature: 1.0,
        }
    }

    pub fn ticks_per_bar(&self) -> u64 {
        bar_duration(self.time_signature, PPQ).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: String| Err(GenerateError::InvalidConstraints(m));
        if self.bars < 1 {
            return bad("bars must be at least 1".into());
        }
        if let Err(e) = bar_duration(self.time_signature, PPQ) {
            return bad(e.to_string());
        }
        if self.max_tokens < self.bars as usize {
            return bad(format!("max tokens {} is below the bar count {}", self.max_tokens, self.bars));
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        let primer_ticks = self.primer.total_ticks();
        if primer_ticks >= self.ticks_per_bar() {
            return bad(format!(
                "primer lasts {primer_ticks} ticks, which does not fit inside a {}-tick bar",
                self.ticks_per_bar()
            ));
        }
        Ok(())
    }
}

/// Samples from `source` until `constraints.bars` full bars exist.
///
/// The output starts with the primer. Every sampled wait that would cross
/// the bar line is shortened to end on it and the remainder is discarded.
/// Bar lines are emitted only by this function: the source is asked for
/// content tokens through [`TokenSource::next_content_token`], so its own
/// `new_measure`, `end`, `start` and time signature changes never reach the
/// output, and the last bar line becomes `end`. Emitted tokens, including inserted bar lines, are
/// appended to the context the source sees.
pub fn generate_constrained<S: TokenSource>(mut source: S, constraints: &GenerationConstraints) -> Result<TokenStream, GenerateError> {
    constraints.validate()?;
    let bar_ticks = constraints.ticks_per_bar();
    let budget = constraints.max_tokens;
    let mut rng = ChaCha8Rng::seed_from_u64(constraints.seed);

    let mut header: Vec<Token> = constraints
        .primer
        .header
        .iter()
        .filter(|t| !matches!(t.header_field(), Some(("timesig", _))))
        .cloned()
        .collect();
    header.push(Token::time_signature(constraints.time_signature));

    let mut body: Vec<Token> = constraints
        .primer
        .body
        .iter()
        .filter(|t| !is_structural(t) || t.kind() == &TokenKind::Start)
        .cloned()
        .collect();
    if body.len() > budget {
        return Err(GenerateError::TruncatedBudget {
            budget,
            bars_done: 0,
            bars_requested: constraints.bars,
        });
    }
    let mut in_bar = constraints.primer.total_ticks();
    let mut bars_done = 0u32;

    for _ in 0..budget {
        if body.len() + 2 > budget {
            break;
        }
        let tok = source.next_content_token(&body, constraints.temperature, &mut rng)?;
        match tok.kind() {
            TokenKind::Header => {
                return Err(SourceError(format!("source produced header token `{tok}` inside the body")).into());
            }
            _ if is_structural(&tok) => continue,
            TokenKind::Wait { ticks } => {
                let room = bar_ticks - in_bar;
                if *ticks < room {
                    in_bar += ticks;
                    body.push(tok);
                    continue;
                }
                body.push(if *ticks == room { tok } else { Token::wait(room) });
                in_bar = 0;
                bars_done += 1;
                if bars_done == constraints.bars {
                    body.push(Token::end());
                    return Ok(TokenStream::new(header, body));
                }
                body.push(Token::new_measure());
            }
            _ => body.push(tok),
        }
    }
    Err(GenerateError::TruncatedBudget {
        budget,
        bars_done,
        bars_requested: constraints.bars,
    })
}

/// Generates under `constraints`, then extracts loops whose length is
/// exactly `params.min_bars` bars. The bar bounds must be equal.
pub fn generate_and_extract<S: TokenSource>(
    source: S,
    constraints: &GenerationConstraints,
    params: &ExtractionParams,
) -> Result<(TokenStream, Vec<ExtractedLoop>), GenerateError> {
    if params.min_bars != params.max_bars {
        return Err(GenerateError::InvalidConstraints(format!(
            "exact-length extraction needs equal bar bounds, got {}-{}",
            params.min_bars, params.max_bars
        )));
    }
    let stream = generate_constrained(source, constraints)?;
    let analysis = SongAnalysis::prepare(stream, params)?;
    let loops = analysis.loops(params);
    Ok((analysis.stream, loops))
}

/// Bar-by-bar wait totals of a generated body: the ticks between
/// consecutive bar lines, with the segment closed by `end` last. `None`
/// when the body does not finish with `end` or has tokens after it.
pub fn bar_tick_sums(stream: &TokenStream) -> Option<Vec<u64>> {
    let mut sums = Vec::new();
    let mut current = 0u64;
    let mut ended = false;
    for t in &stream.body {
        if ended {
            return None;
        }
        match t.kind() {
            TokenKind::Wait { ticks } => current += ticks,
            TokenKind::NewMeasure => {
                sums.push(current);
                current = 0;
            }
            TokenKind::End => {
                sums.push(current);
                ended = true;
            }
            _ => {}
        }
    }
    ended.then_some(sums)
}

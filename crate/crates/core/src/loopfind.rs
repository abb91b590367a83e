//! Loop detection.
//!
//! Repetitions are found with a correlative matrix over the melody line:
//! `C[i][j] = C[i-1][j-1] + 1` when events `i` and `j` are equal, else 0.
//! Only the upper triangle matters and every non-zero cell lies on a
//! maximal run of matches along a diagonal, so the matrix is stored as a
//! list of [`DiagonalRun`]s. The duration twin `D` is recovered from a
//! prefix sum of event durations.
//!
//! A run starting at `(s_i, s_j)` with length at least `L_min` makes a loop
//! candidate: the body `M[s_i..s_j]` is bookended by the repeated phrase
//! that opens both `s_i` and `s_j`. Candidates are then filtered by bar
//! length, bookend duration and note density. Loops delimited by explicit
//! repeat signs are collected separately and merged in.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{build_melody_line, MelodyLine, Note, ScoreError};
use crate::tokens::{render_tokens, tokenize, Token, TokenError, TokenKind, TokenStream};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("invalid extraction parameters: {0}")]
    InvalidParams(String),
}

/// Maximal run of matches on diagonal `offset = j - i`, covering cells
/// `(start + n, start + offset + n)` for `n < len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiagonalRun {
    pub offset: usize,
    pub start: usize,
    pub len: usize,
}

impl DiagonalRun {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Sparse representation of the match-count and tick-duration matrices.
#[derive(Debug, Clone)]
pub struct CorrMatrices {
    size: usize,
    // sorted by (offset, start)
    runs: Vec<DiagonalRun>,
    prefix_ticks: Vec<u64>,
}

impl CorrMatrices {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn runs(&self) -> &[DiagonalRun] {
        &self.runs
    }

    /// Number of non-zero cells.
    pub fn matched_cells(&self) -> usize {
        self.runs.iter().map(|r| r.len).sum()
    }

    fn run_containing(&self, i: usize, j: usize) -> Option<&DiagonalRun> {
        if j <= i || j >= self.size {
            return None;
        }
        let offset = j - i;
        let idx = self
            .runs
            .partition_point(|r| (r.offset, r.start) <= (offset, i));
        let run = self.runs[..idx].last()?;
        (run.offset == offset && i < run.end()).then_some(run)
    }

    /// `C[i][j]` for `i < j`; zero elsewhere.
    pub fn count(&self, i: usize, j: usize) -> usize {
        self.run_containing(i, j).map_or(0, |r| i - r.start + 1)
    }

    /// `D[i][j]`: ticks of the repeated segment ending at `i` and `j`.
    pub fn ticks(&self, i: usize, j: usize) -> u64 {
        self.run_containing(i, j)
            .map_or(0, |r| self.prefix_ticks[i + 1] - self.prefix_ticks[r.start])
    }
}

/// Dense ids so equality checks in the O(L²) scan are integer compares.
fn intern_events(m: &MelodyLine) -> Vec<u32> {
    let mut ids: HashMap<(u64, &[Note]), u32> = HashMap::new();
    m.events
        .iter()
        .map(|e| {
            let next = ids.len() as u32;
            *ids.entry((e.duration, e.notes())).or_insert(next)
        })
        .collect()
}

pub fn build_correlation(m: &MelodyLine) -> CorrMatrices {
    let ids = intern_events(m);
    let size = ids.len();
    let mut prefix_ticks = Vec::with_capacity(size + 1);
    prefix_ticks.push(0);
    for e in &m.events {
        prefix_ticks.push(prefix_ticks.last().unwrap() + e.duration);
    }

    let runs = (1..size.max(1))
        .into_par_iter()
        .flat_map_iter(|offset| {
            let ids = &ids;
            let mut runs = Vec::new();
            let mut start = None;
            for i in 0..size - offset {
                match (ids[i] == ids[i + offset], start) {
                    (true, None) => start = Some(i),
                    (false, Some(s)) => {
                        runs.push(DiagonalRun { offset, start: s, len: i - s });
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = start {
                runs.push(DiagonalRun { offset, start: s, len: size - offset - s });
            }
            runs
        })
        .collect();

    CorrMatrices {
        size,
        runs,
        prefix_ticks,
    }
}

/// Body start pairs `(s_i, s_j)` for every run reaching `min_notes`.
///
/// The cell where a run first reaches `min_notes` sits at
/// `run.start + min_notes - 1`, so the half-open body starts at the run
/// start on both sides.
pub fn find_candidates(c: &CorrMatrices, min_notes: usize) -> Vec<(usize, usize)> {
    assert!(min_notes >= 1);
    c.runs
        .iter()
        .filter(|r| r.len >= min_notes)
        .map(|r| {
            let anchor = r.start + min_notes - 1;
            let body_start = anchor + 1 - min_notes;
            (body_start, body_start + r.offset)
        })
        .collect()
}

/// `(n_end, D_ticks)` for a candidate: how many events the bookend repeats
/// before the diagonal value drops, and the tick length of that run.
pub fn bookend_extent(c: &CorrMatrices, candidate: (usize, usize)) -> (usize, u64) {
    let (s_i, s_j) = candidate;
    match c.run_containing(s_i, s_j) {
        None => (0, 0),
        Some(run) => {
            let n_end = run.end() - s_i;
            (n_end, c.ticks(s_i + n_end - 1, s_j + n_end - 1))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityMode {
    /// `events * tracks / bars`
    #[default]
    Literal,
    /// `events / (tracks * bars)`
    PerTrack,
}

pub fn note_density(event_count: usize, tracks: usize, bars: u64, mode: DensityMode) -> f64 {
    assert!(tracks >= 1 && bars >= 1);
    let (count, t, b) = (event_count as f64, tracks as f64, bars as f64);
    match mode {
        DensityMode::Literal => count * t / b,
        DensityMode::PerTrack => count / (t * b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionParams {
    /// Minimum bookend length in events.
    #[serde(rename = "l_min")]
    pub min_bookend_notes: usize,
    /// Minimum bookend length in beats (quarter notes).
    #[serde(rename = "rd_min")]
    pub min_bookend_beats: f64,
    #[serde(rename = "bars_min")]
    pub min_bars: u64,
    #[serde(rename = "bars_max")]
    pub max_bars: u64,
    #[serde(rename = "density")]
    pub min_density: f64,
    #[serde(default)]
    pub density_mode: DensityMode,
}

impl Default for ExtractionParams {
    /// 4-8 bars, density 3, four-note and two-beat bookends.
    fn default() -> Self {
        ExtractionParams {
            min_bookend_notes: 4,
            min_bookend_beats: 2.0,
            min_bars: 4,
            max_bars: 8,
            min_density: 3.0,
            density_mode: DensityMode::Literal,
        }
    }
}

impl ExtractionParams {
    pub fn validate(&self) -> Result<(), ExtractError> {
        let bad = |m: &str| Err(ExtractError::InvalidParams(m.to_string()));
        if self.min_bookend_notes < 1 {
            return bad("l_min must be at least 1");
        }
        if !(self.min_bookend_beats >= 0.0) {
            return bad("rd_min must be non-negative");
        }
        if !(self.min_density >= 0.0) {
            return bad("density must be non-negative");
        }
        if self.min_bars < 1 || self.min_bars > self.max_bars {
            return bad("bar bounds must satisfy 1 <= bars_min <= bars_max");
        }
        Ok(())
    }

    /// The loosest settings admitting every loop that any of `grid` admits.
    /// Panics on an empty grid or mixed density modes.
    pub fn loosest(grid: &[ExtractionParams]) -> ExtractionParams {
        let first = grid.first().expect("empty parameter grid");
        assert!(grid.iter().all(|p| p.density_mode == first.density_mode));
        grid.iter().fold(*first, |acc, p| ExtractionParams {
            min_bookend_notes: acc.min_bookend_notes.min(p.min_bookend_notes),
            min_bookend_beats: acc.min_bookend_beats.min(p.min_bookend_beats),
            min_bars: acc.min_bars.min(p.min_bars),
            max_bars: acc.max_bars.max(p.max_bars),
            min_density: acc.min_density.min(p.min_density),
            density_mode: acc.density_mode,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopSource {
    Extracted,
    BuiltIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    /// First body event.
    pub s_i: usize,
    /// One past the last body event; the second bookend starts here.
    pub s_j: usize,
    pub bookend_events: usize,
    pub bookend_ticks: u64,
    pub start_tick: u64,
    pub body_ticks: u64,
    pub body_bars: u64,
    pub density: f64,
    pub source: LoopSource,
}

impl LoopCandidate {
    fn admitted_by(&self, params: &ExtractionParams, ppq: u64) -> bool {
        let bars_ok = (params.min_bars..=params.max_bars).contains(&self.body_bars);
        let density_ok = self.density >= params.min_density;
        let bookend_ok = match self.source {
            LoopSource::Extracted => {
                self.bookend_events >= params.min_bookend_notes
                    && self.bookend_ticks as f64 >= params.min_bookend_beats * ppq as f64
            }
            // repeat signs need no bookend
            LoopSource::BuiltIn => true,
        };
        bars_ok && density_ok && bookend_ok
    }
}

/// Bar length of `[s_i, s_j)` when it is a whole number of bars.
fn whole_bars(m: &MelodyLine, s_i: usize, s_j: usize) -> Option<u64> {
    let bars = m.bar_map.bars_between(m.onset(s_i), m.onset(s_j));
    bars.is_integer().then(|| bars.to_integer())
}

fn measure_candidate(
    m: &MelodyLine,
    s_i: usize,
    s_j: usize,
    bookend: (usize, u64),
    source: LoopSource,
    mode: DensityMode,
) -> Option<LoopCandidate> {
    let body_bars = whole_bars(m, s_i, s_j).filter(|&b| b >= 1)?;
    let start_tick = m.onset(s_i);
    Some(LoopCandidate {
        s_i,
        s_j,
        bookend_events: bookend.0,
        bookend_ticks: bookend.1,
        start_tick,
        body_ticks: m.onset(s_j) - start_tick,
        body_bars,
        density: note_density(s_j - s_i, m.track_count, body_bars, mode),
        source,
    })
}

/// Applies the bar, bookend and density filters to raw candidates.
pub fn filter_candidates(
    c: &CorrMatrices,
    candidates: &[(usize, usize)],
    params: &ExtractionParams,
    m: &MelodyLine,
) -> Vec<LoopCandidate> {
    candidates
        .iter()
        .filter_map(|&(s_i, s_j)| {
            let bookend = bookend_extent(c, (s_i, s_j));
            measure_candidate(m, s_i, s_j, bookend, LoopSource::Extracted, params.density_mode)
        })
        .filter(|cand| cand.admitted_by(params, m.ppq))
        .collect()
}

/// Start tick of every body token.
pub fn token_ticks(stream: &TokenStream) -> Vec<u64> {
    let mut tick = 0;
    stream
        .body
        .iter()
        .map(|t| {
            let at = tick;
            tick += t.wait_ticks().unwrap_or(0);
            at
        })
        .collect()
}

/// Loops marked by balanced repeat signs. Unbalanced signs are reported in
/// the returned warnings and skipped.
pub fn find_builtin_loops(
    stream: &TokenStream,
    m: &MelodyLine,
    params: &ExtractionParams,
) -> (Vec<LoopCandidate>, Vec<String>) {
    let ticks = token_ticks(stream);
    let mut open: Vec<u64> = Vec::new();
    let mut spans = Vec::new();
    let mut warnings = Vec::new();
    for (pos, tok) in stream.body.iter().enumerate() {
        match tok.kind() {
            TokenKind::RepeatOpen => open.push(ticks[pos]),
            TokenKind::RepeatClose { .. } => match open.pop() {
                Some(from) => spans.push((from, ticks[pos])),
                None => warnings.push(format!("repeat close at body token {pos} has no matching open")),
            },
            _ => {}
        }
    }
    for from in open {
        warnings.push(format!("repeat open at tick {from} is never closed"));
    }

    let loops = spans
        .into_iter()
        .filter_map(|(from, to)| {
            let s_i = m.event_index_at(from);
            let s_j = m.event_index_at(to);
            if s_i >= s_j {
                return None;
            }
            measure_candidate(m, s_i, s_j, (0, 0), LoopSource::BuiltIn, params.density_mode)
        })
        .filter(|cand| cand.admitted_by(params, m.ppq))
        .collect();
    (loops, warnings)
}

/// Event-level check that both bookends really hold the same phrase.
pub fn bookends_match(m: &MelodyLine, cand: &LoopCandidate) -> bool {
    let n = cand.bookend_events;
    cand.s_j + n <= m.len() && m.events[cand.s_i..cand.s_i + n] == m.events[cand.s_j..cand.s_j + n]
}

/// A loop cut out of its song as a standalone token stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractedLoop {
    pub candidate: LoopCandidate,
    /// Body token range of the source song.
    pub token_range: Range<usize>,
    pub stream: TokenStream,
}

impl ExtractedLoop {
    /// The loop's musical content, without the start/end framing.
    pub fn content(&self) -> &[Token] {
        let body = &self.stream.body;
        &body[1..body.len() - 1]
    }

    pub fn content_text(&self) -> String {
        render_tokens(self.content())
    }
}

/// Per-song state shared between extraction runs with different settings.
#[derive(Debug, Clone)]
pub struct SongAnalysis {
    pub stream: TokenStream,
    pub line: MelodyLine,
    /// Candidates admitted by the preparation parameters, in song order.
    candidates: Vec<(LoopCandidate, Range<usize>, String)>,
    pub warnings: Vec<String>,
}

impl SongAnalysis {
    /// Runs detection once, keeping every candidate `loosest` admits.
    pub fn prepare(stream: TokenStream, loosest: &ExtractionParams) -> Result<SongAnalysis, ExtractError> {
        loosest.validate()?;
        let line = build_melody_line(&stream)?;
        let mut warnings = line.warnings.clone();

        let mut found = if line.len() >= 2 {
            let corr = build_correlation(&line);
            let pairs = find_candidates(&corr, loosest.min_bookend_notes);
            filter_candidates(&corr, &pairs, loosest, &line)
        } else {
            Vec::new()
        };
        let (builtin, builtin_warnings) = find_builtin_loops(&stream, &line, loosest);
        for w in &builtin_warnings {
            log::warn!("{w}");
        }
        warnings.extend(builtin_warnings);
        found.extend(builtin);
        found.sort_by_key(|c| (c.start_tick, c.s_j, c.source == LoopSource::BuiltIn));

        let ticks = token_ticks(&stream);
        let candidates = found
            .into_iter()
            .map(|cand| {
                let end_tick = cand.start_tick + cand.body_ticks;
                let lo = ticks.partition_point(|&t| t < cand.start_tick);
                let hi = ticks.partition_point(|&t| t < end_tick);
                let text = render_tokens(stream.body[lo..hi].iter().filter(|t| is_loop_content(t)));
                (cand, lo..hi, text)
            })
            .collect();

        Ok(SongAnalysis {
            stream,
            line,
            candidates,
            warnings,
        })
    }

    /// Admitted candidates, deduplicated on body text keeping the earliest.
    fn selected<'a>(&'a self, params: &'a ExtractionParams) -> impl Iterator<Item = &'a (LoopCandidate, Range<usize>, String)> {
        let mut seen = HashSet::new();
        self.candidates
            .iter()
            .filter(move |(c, _, _)| c.admitted_by(params, self.line.ppq))
            .filter(move |(_, _, text)| seen.insert(text.as_str()))
    }

    pub fn count(&self, params: &ExtractionParams) -> usize {
        self.selected(params).count()
    }

    pub fn loops(&self, params: &ExtractionParams) -> Vec<ExtractedLoop> {
        self.selected(params)
            .map(|(cand, range, _)| self.materialize(cand, range.clone()))
            .collect()
    }

    fn materialize(&self, cand: &LoopCandidate, range: Range<usize>) -> ExtractedLoop {
        let mut header = self.stream.header.clone();
        let sig = self.line.bar_map.signature_at(cand.start_tick);
        if self.stream.time_signature().unwrap_or_default() != sig {
            header.retain(|t| !matches!(t.header_field(), Some(("timesig", _))));
            header.push(Token::time_signature(sig));
        }
        let mut body = Vec::with_capacity(range.len() + 2);
        body.push(Token::start());
        body.extend(self.stream.body[range.clone()].iter().filter(|t| is_loop_content(t)).cloned());
        body.push(Token::end());
        ExtractedLoop {
            candidate: cand.clone(),
            token_range: range,
            stream: TokenStream::new(header, body),
        }
    }
}

// Framing and repeat signs are dropped from loop bodies so a loop can be
// re-wrapped or repeated without unbalanced signs.
fn is_loop_content(t: &Token) -> bool {
    !matches!(
        t.kind(),
        TokenKind::Start | TokenKind::End | TokenKind::RepeatOpen | TokenKind::RepeatClose { .. }
    )
}

/// All loops of a song: correlative-matrix loops plus repeat-sign loops,
/// deduplicated on identical body tokens.
pub fn extract_loops(stream: &TokenStream, params: &ExtractionParams) -> Result<Vec<ExtractedLoop>, ExtractError> {
    let analysis = SongAnalysis::prepare(stream.clone(), params)?;
    Ok(analysis.loops(params))
}

pub fn extract_loops_from_text(text: &str, params: &ExtractionParams) -> Result<Vec<ExtractedLoop>, ExtractError> {
    extract_loops(&tokenize(text)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{NoteSet, TimeSignature, PPQ};
    use crate::tokens::render;

    fn line_of(symbols: &[(u32, u64)]) -> MelodyLine {
        let mut onset = 0;
        let events = symbols
            .iter()
            .map(|&(s, d)| {
                let e = NoteSet::new(
                    onset,
                    d,
                    [Note {
                        track: "g".into(),
                        descriptor: s.to_string(),
                    }],
                );
                onset += d;
                e
            })
            .collect();
        MelodyLine {
            events,
            bar_map: crate::score::BarMap::uniform(TimeSignature::COMMON, PPQ).unwrap(),
            track_count: 1,
            ppq: PPQ,
            tempo: 120,
            warnings: vec![],
        }
    }

    #[test]
    fn abab_matrix() {
        let m = line_of(&[(0, 960), (1, 960), (0, 960), (1, 960)]);
        let c = build_correlation(&m);
        assert_eq!(c.runs(), &[DiagonalRun { offset: 2, start: 0, len: 2 }]);
        assert_eq!(c.count(0, 2), 1);
        assert_eq!(c.count(1, 3), 2);
        assert_eq!(c.count(0, 1), 0);
        assert_eq!(c.count(2, 0), 0);
        assert_eq!(c.ticks(1, 3), 1920);
        assert_eq!(c.matched_cells(), 2);

        assert_eq!(find_candidates(&c, 2), vec![(0, 2)]);
        assert_eq!(find_candidates(&c, 3), vec![]);
        assert_eq!(bookend_extent(&c, (0, 2)), (2, 1920));
    }

    #[test]
    fn distinct_events_have_no_runs() {
        let m = line_of(&[(0, 1), (1, 1), (2, 1), (3, 1)]);
        assert!(build_correlation(&m).runs().is_empty());
        // same symbol, different duration: not equal
        let m = line_of(&[(0, 480), (0, 960)]);
        assert!(build_correlation(&m).runs().is_empty());
    }

    #[test]
    fn bookend_ticks_sum_durations() {
        let m = line_of(&[(0, 480), (1, 480), (2, 960), (3, 960), (9, 5), (0, 480), (1, 480), (2, 960), (3, 960)]);
        let c = build_correlation(&m);
        assert_eq!(find_candidates(&c, 4), vec![(0, 5)]);
        assert_eq!(bookend_extent(&c, (0, 5)), (4, 2880));
    }

    #[test]
    fn run_touching_the_end() {
        let m = line_of(&[(0, 1), (0, 1), (0, 1)]);
        let c = build_correlation(&m);
        assert_eq!(
            c.runs(),
            &[
                DiagonalRun { offset: 1, start: 0, len: 2 },
                DiagonalRun { offset: 2, start: 0, len: 1 }
            ]
        );
        assert_eq!(bookend_extent(&c, (0, 1)), (2, 2));
    }

    #[test]
    fn density_examples() {
        assert_eq!(note_density(16, 1, 4, DensityMode::Literal), 4.0);
        assert_eq!(note_density(0, 1, 4, DensityMode::Literal), 0.0);
        assert_eq!(note_density(16, 2, 4, DensityMode::Literal), 8.0);
        assert_eq!(note_density(16, 2, 4, DensityMode::PerTrack), 2.0);
    }

    #[test]
    fn params_validation() {
        assert!(ExtractionParams::default().validate().is_ok());
        let p = ExtractionParams { min_bars: 5, max_bars: 4, ..Default::default() };
        assert!(p.validate().is_err());
        let p = ExtractionParams { min_bookend_notes: 0, ..Default::default() };
        assert!(p.validate().is_err());
        let p = ExtractionParams { min_density: f64::NAN, ..Default::default() };
        assert!(p.validate().is_err());
    }

    /// 16 quarter-note events per 4 bars; symbols offset by `base`.
    fn phrase(base: u32, bars: u32) -> Vec<String> {
        let mut out = Vec::new();
        for b in 0..bars {
            out.push("new_measure".to_string());
            for q in 0..4 {
                out.push(format!("g:note:{}", base + b * 4 + q));
                out.push("wait:960".to_string());
            }
        }
        out
    }

    fn song(parts: &[Vec<String>]) -> TokenStream {
        let mut text = vec!["tempo:120".to_string(), "timesig:4/4".into(), "start".into()];
        for p in parts {
            text.extend(p.iter().cloned());
        }
        text.push("end".into());
        tokenize(&text.join("\n")).unwrap()
    }

    #[test]
    fn filter_keeps_whole_bar_loops_in_range() {
        let p = phrase(0, 4);
        let s = song(&[p.clone(), p.clone(), phrase(100, 1)]);
        let m = build_melody_line(&s).unwrap();
        let c = build_correlation(&m);
        let pairs = find_candidates(&c, 4);
        let params = ExtractionParams { min_bars: 4, max_bars: 4, ..Default::default() };
        let kept = filter_candidates(&c, &pairs, &params, &m);
        assert_eq!(kept.len(), 1);
        let k = &kept[0];
        assert_eq!((k.s_i, k.s_j), (0, 16));
        assert_eq!(k.body_ticks, 15360);
        assert_eq!(k.body_bars, 4);
        assert_eq!(k.density, 4.0);
        assert!(bookends_match(&m, k));

        let strict = ExtractionParams { min_density: 4.5, ..params };
        assert!(filter_candidates(&c, &pairs, &strict, &m).is_empty());
        let too_long = ExtractionParams { min_bars: 5, max_bars: 8, ..params };
        assert!(filter_candidates(&c, &pairs, &too_long, &m).is_empty());
    }

    #[test]
    fn half_bar_spans_are_rejected() {
        // two-beat phrase repeated: the body spans half a bar
        let s = tokenize("timesig:4/4 g:note:1 wait:960 g:note:2 wait:960 g:note:1 wait:960 g:note:2 wait:960").unwrap();
        let m = build_melody_line(&s).unwrap();
        let c = build_correlation(&m);
        let pairs = find_candidates(&c, 2);
        assert_eq!(pairs, vec![(0, 2)]);
        let p = ExtractionParams { min_bookend_notes: 2, min_bars: 1, max_bars: 8, min_density: 0.0, ..Default::default() };
        assert!(filter_candidates(&c, &pairs, &p, &m).is_empty());
    }

    #[test]
    fn short_bookends_are_rejected() {
        // bookend of four sixteenth notes = one beat
        let mut parts = Vec::new();
        for rep in 0..2 {
            let mut p = vec!["new_measure".to_string()];
            for q in 0..4 {
                p.push(format!("g:note:{q}"));
                p.push("wait:240".into());
            }
            p.push(format!("g:note:{}", 50 + rep));
            p.push("wait:2880".into());
            for b in 0..3 {
                p.push("new_measure".into());
                p.push(format!("g:note:{}", 60 + rep * 10 + b));
                p.push("wait:3840".into());
            }
            parts.push(p);
        }
        parts.push(phrase(0, 1)[..3].to_vec());
        let s = song(&parts);
        let m = build_melody_line(&s).unwrap();
        let c = build_correlation(&m);
        let pairs = find_candidates(&c, 4);
        assert!(pairs.contains(&(0, 8)));
        let loose = ExtractionParams { min_bookend_beats: 1.0, min_density: 0.0, ..Default::default() };
        assert_eq!(filter_candidates(&c, &pairs, &loose, &m).len(), 1);
        let strict = ExtractionParams { min_bookend_beats: 2.0, ..loose };
        assert!(filter_candidates(&c, &pairs, &strict, &m).is_empty());
    }

    #[test]
    fn builtin_repeat_signs() {
        let mut body = vec!["repeat_open".to_string()];
        body.extend(phrase(0, 4));
        body.push("repeat_close:2".into());
        let s = song(&[body]);
        let m = build_melody_line(&s).unwrap();
        let (loops, warnings) = find_builtin_loops(&s, &m, &ExtractionParams::default());
        assert!(warnings.is_empty());
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].source, LoopSource::BuiltIn);
        assert_eq!(loops[0].body_bars, 4);
        assert_eq!((loops[0].s_i, loops[0].s_j), (0, 16));
    }

    #[test]
    fn nested_repeats_are_each_evaluated() {
        let mut body = vec!["repeat_open".to_string()];
        body.extend(phrase(0, 2));
        body.push("repeat_open".into());
        body.extend(phrase(10, 4));
        body.push("repeat_close".into());
        body.extend(phrase(20, 2));
        body.push("repeat_close".into());
        let s = song(&[body]);
        let m = build_melody_line(&s).unwrap();
        let (loops, _) = find_builtin_loops(&s, &m, &ExtractionParams::default());
        let bars: Vec<u64> = loops.iter().map(|l| l.body_bars).collect();
        assert_eq!(bars, vec![4, 8]);
    }

    #[test]
    fn unbalanced_close_is_skipped_with_warning() {
        let mut body = phrase(0, 4);
        body.push("repeat_close".into());
        body.push("repeat_open".into());
        let s = song(&[body]);
        let m = build_melody_line(&s).unwrap();
        let (loops, warnings) = find_builtin_loops(&s, &m, &ExtractionParams::default());
        assert!(loops.is_empty());
        assert_eq!(warnings.len(), 2);
    }

    #[test]
    fn extract_materializes_with_header() {
        let p = phrase(0, 4);
        let s = song(&[p.clone(), p.clone(), phrase(100, 1)]);
        let loops = extract_loops(&s, &ExtractionParams::default()).unwrap();
        assert_eq!(loops.len(), 1);
        let l = &loops[0];
        assert_eq!(l.stream.header, s.header);
        assert_eq!(l.content_text(), p.join("\n"));
        let r = render(&l.stream);
        assert!(r.starts_with("tempo:120\ntimesig:4/4\nstart\nnew_measure\n"));
        assert!(r.ends_with("wait:960\nend"));
    }

    #[test]
    fn duplicate_bodies_collapse_to_the_earliest() {
        // P X P Z P X P: bodies PX, PZ, PX on the same diagonal
        let p = phrase(0, 2);
        let x = phrase(50, 2);
        let z = phrase(80, 2);
        let s = song(&[p.clone(), x.clone(), p.clone(), z, p.clone(), x, p.clone()]);
        let params = ExtractionParams { min_bars: 4, max_bars: 4, ..Default::default() };
        let analysis = SongAnalysis::prepare(s, &params).unwrap();
        assert_eq!(analysis.candidates.len(), 3);
        let loops = analysis.loops(&params);
        assert_eq!(loops.len(), 2);
        assert_eq!(loops[0].candidate.start_tick, 0);
        assert_eq!(loops[1].candidate.start_tick, 4 * 3840);
        assert_ne!(loops[0].content_text(), loops[1].content_text());
    }

    #[test]
    fn builtin_and_extracted_with_same_body_collapse() {
        let p = phrase(0, 4);
        let mut signed = vec!["repeat_open".to_string()];
        signed.extend(p.clone());
        signed.push("repeat_close".into());
        let s = song(&[signed, p.clone(), phrase(100, 1)]);
        let analysis = SongAnalysis::prepare(s, &ExtractionParams::default()).unwrap();
        assert_eq!(analysis.candidates.len(), 2);
        let loops = analysis.loops(&ExtractionParams::default());
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].candidate.source, LoopSource::Extracted);
        assert_eq!(loops[0].content_text(), p.join("\n"));
    }

    #[test]
    fn no_repetition_no_loops() {
        let s = song(&[phrase(0, 16)]);
        assert!(extract_loops(&s, &ExtractionParams::default()).unwrap().is_empty());
        let one = tokenize("wait:960").unwrap();
        assert!(extract_loops(&one, &ExtractionParams::default()).unwrap().is_empty());
    }

    #[test]
    fn loop_after_signature_change_carries_new_signature() {
        let mut p = Vec::new();
        for b in 0..4 {
            p.push("new_measure".to_string());
            for q in 0..3 {
                p.push(format!("g:note:{}", b * 3 + q));
                p.push("wait:960".into());
            }
        }
        let intro = vec!["g:note:99".to_string(), "wait:3840".into(), "measure:timesig:3/4".into()];
        let s = song(&[intro, p.clone(), p.clone(), vec!["g:note:98".into(), "wait:960".into()]]);
        let params = ExtractionParams { min_bars: 4, max_bars: 4, min_density: 0.0, ..Default::default() };
        let loops = extract_loops(&s, &params).unwrap();
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].stream.time_signature(), Some(TimeSignature::new(3, 4)));
        assert_eq!(loops[0].candidate.body_ticks, 4 * 2880);
    }
}

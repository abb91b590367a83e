//! Tick-accurate event timeline of a song.
//!
//! All tracks are flattened into one list of [`NoteSet`]s. Each `wait:N`
//! token closes the current set (the notes struck since the previous wait)
//! and gives it a duration of `N` ticks, so onsets chain exactly:
//! `onset[n] = onset[n-1] + duration[n-1]`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::{TokenKind, TokenStream};

/// Ticks per quarter note.
pub const PPQ: u64 = 960;

pub const DEFAULT_TEMPO: u32 = 120;

/// Body effect token that switches the time signature from its onset on.
pub const TIME_SIGNATURE_CHANGE_PREFIX: &str = "measure:timesig:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("song has no wait tokens, so it carries no timing information")]
    NoTimingInfo,
    #[error("unsupported time signature denominator {0}")]
    UnsupportedDenominator(u32),
    #[error("time signature numerator must be at least 1")]
    ZeroNumerator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeSignature {
    pub numerator: u32,
    pub denominator: u32,
}

impl TimeSignature {
    pub const COMMON: TimeSignature = TimeSignature {
        numerator: 4,
        denominator: 4,
    };

    pub const fn new(numerator: u32, denominator: u32) -> TimeSignature {
        TimeSignature {
            numerator,
            denominator,
        }
    }

    pub fn bar_ticks(self, ppq: u64) -> Result<u64, ScoreError> {
        bar_duration(self, ppq)
    }
}

impl Default for TimeSignature {
    fn default() -> Self {
        TimeSignature::COMMON
    }
}

impl fmt::Display for TimeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

impl FromStr for TimeSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, d) = s
            .split_once('/')
            .ok_or_else(|| format!("expected N/D, got `{s}`"))?;
        let numerator = n.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?;
        let denominator = d.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?;
        Ok(TimeSignature {
            numerator,
            denominator,
        })
    }
}

/// Ticks in one bar: `numerator * (4 / denominator) * ppq`.
pub fn bar_duration(sig: TimeSignature, ppq: u64) -> Result<u64, ScoreError> {
    if !matches!(sig.denominator, 1 | 2 | 4 | 8 | 16 | 32) {
        return Err(ScoreError::UnsupportedDenominator(sig.denominator));
    }
    if sig.numerator == 0 {
        return Err(ScoreError::ZeroNumerator);
    }
    // Exact for every allowed denominator when ppq is a multiple of 8.
    Ok(sig.numerator as u64 * 4 * ppq / sig.denominator as u64)
}

/// Exact bar count of a tick span under a fixed bar length.
pub fn ticks_to_bars(span_ticks: u64, ticks_per_bar: u64) -> Ratio<u64> {
    Ratio::new(span_ticks, ticks_per_bar)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Note {
    pub track: String,
    pub descriptor: String,
}

/// Notes struck together at `onset`, lasting `duration` ticks.
///
/// Equality compares the note set and the duration; the onset is position,
/// not content.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoteSet {
    pub onset: u64,
    pub duration: u64,
    notes: Vec<Note>,
}

impl NoteSet {
    pub fn new(onset: u64, duration: u64, notes: impl IntoIterator<Item = Note>) -> NoteSet {
        let notes: BTreeSet<Note> = notes.into_iter().collect();
        NoteSet {
            onset,
            duration,
            notes: notes.into_iter().collect(),
        }
    }

    /// Sorted and deduplicated.
    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn is_rest(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn same_content(&self, other: &NoteSet) -> bool {
        self.duration == other.duration && self.notes == other.notes
    }
}

impl PartialEq for NoteSet {
    fn eq(&self, other: &Self) -> bool {
        self.same_content(other)
    }
}

impl Eq for NoteSet {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarSegment {
    pub start_tick: u64,
    pub ticks_per_bar: u64,
    pub signature: TimeSignature,
    /// Index of the bar that begins at `start_tick`.
    pub first_bar: u64,
}

/// Piecewise-constant bar grid. Bars are counted from tick 0; a signature
/// change opens a new bar at its tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarMap {
    segments: Vec<BarSegment>,
}

impl BarMap {
    pub fn uniform(signature: TimeSignature, ppq: u64) -> Result<BarMap, ScoreError> {
        BarMap::from_changes(&[(0, signature)], ppq)
    }

    /// `changes` must be sorted by tick and start at tick 0. Repeated ticks
    /// keep the last signature.
    pub fn from_changes(changes: &[(u64, TimeSignature)], ppq: u64) -> Result<BarMap, ScoreError> {
        let mut segments: Vec<BarSegment> = Vec::with_capacity(changes.len());
        for &(tick, signature) in changes {
            let ticks_per_bar = bar_duration(signature, ppq)?;
            let first_bar = match segments.last() {
                None => 0,
                Some(prev) => {
                    let span = tick - prev.start_tick;
                    prev.first_bar + span.div_ceil(prev.ticks_per_bar)
                }
            };
            let seg = BarSegment {
                start_tick: tick,
                ticks_per_bar,
                signature,
                first_bar,
            };
            match segments.last_mut() {
                Some(prev) if prev.start_tick == tick => *prev = BarSegment { first_bar: prev.first_bar, ..seg },
                _ => segments.push(seg),
            }
        }
        assert!(
            segments.first().is_some_and(|s| s.start_tick == 0),
            "bar map must start at tick 0"
        );
        Ok(BarMap { segments })
    }

    pub fn segments(&self) -> &[BarSegment] {
        &self.segments
    }

    fn segment_at(&self, tick: u64) -> &BarSegment {
        let idx = self.segments.partition_point(|s| s.start_tick <= tick);
        &self.segments[idx.saturating_sub(1)]
    }

    /// `(bar index, ticks per bar)` at `tick`.
    pub fn bar_at(&self, tick: u64) -> (u64, u64) {
        let seg = self.segment_at(tick);
        (
            seg.first_bar + (tick - seg.start_tick) / seg.ticks_per_bar,
            seg.ticks_per_bar,
        )
    }

    pub fn signature_at(&self, tick: u64) -> TimeSignature {
        self.segment_at(tick).signature
    }

    /// Bar count of `[from, to)`, measured piecewise through signature
    /// changes.
    pub fn bars_between(&self, from: u64, to: u64) -> Ratio<u64> {
        assert!(from <= to);
        let mut total = Ratio::from_integer(0);
        for (i, seg) in self.segments.iter().enumerate() {
            let seg_end = self.segments.get(i + 1).map_or(u64::MAX, |s| s.start_tick);
            let lo = from.max(seg.start_tick);
            let hi = to.min(seg_end);
            if lo < hi {
                total += ticks_to_bars(hi - lo, seg.ticks_per_bar);
            }
        }
        total
    }
}

/// The flattened event list of one song plus its bar grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelodyLine {
    pub events: Vec<NoteSet>,
    pub bar_map: BarMap,
    /// Number of instrument tracks, always at least 1.
    pub track_count: usize,
    pub ppq: u64,
    pub tempo: u32,
    pub warnings: Vec<String>,
}

impl MelodyLine {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn total_ticks(&self) -> u64 {
        self.events.last().map_or(0, |e| e.onset + e.duration)
    }

    /// Onset of event `index`, or the end of the song for `index == len`.
    pub fn onset(&self, index: usize) -> u64 {
        self.events.get(index).map_or_else(|| self.total_ticks(), |e| e.onset)
    }

    /// First event whose onset is at or after `tick`.
    pub fn event_index_at(&self, tick: u64) -> usize {
        self.events.partition_point(|e| e.onset < tick)
    }
}

pub fn build_melody_line(stream: &TokenStream) -> Result<MelodyLine, ScoreError> {
    let mut warnings = Vec::new();

    let tempo = stream.tempo().unwrap_or_else(|| {
        warnings.push(format!("no tempo in header, assuming {DEFAULT_TEMPO} BPM"));
        DEFAULT_TEMPO
    });
    let initial_sig = stream.time_signature().unwrap_or_else(|| {
        warnings.push(format!("no time signature in header, assuming {}", TimeSignature::COMMON));
        TimeSignature::COMMON
    });

    let mut tracks: BTreeSet<&str> = stream.declared_instruments().into_iter().collect();
    let mut changes = vec![(0u64, initial_sig)];
    let mut events = Vec::new();
    let mut pending: Vec<Note> = Vec::new();
    let mut tick = 0u64;
    let mut saw_wait = false;

    for token in &stream.body {
        match token.kind() {
            TokenKind::NoteOn { track, descriptor } => {
                tracks.insert(track);
                pending.push(Note {
                    track: track.clone(),
                    descriptor: descriptor.clone(),
                });
            }
            TokenKind::Wait { ticks } => {
                saw_wait = true;
                events.push(NoteSet::new(tick, *ticks, pending.drain(..)));
                tick += ticks;
            }
            TokenKind::Effect => {
                if let Some(sig) = token.raw().strip_prefix(TIME_SIGNATURE_CHANGE_PREFIX) {
                    match sig.parse::<TimeSignature>() {
                        Ok(sig) => changes.push((tick, sig)),
                        Err(e) => warnings.push(format!("ignoring time signature change: {e}")),
                    }
                }
            }
            _ => {}
        }
    }
    if !saw_wait {
        return Err(ScoreError::NoTimingInfo);
    }
    if !pending.is_empty() {
        warnings.push(format!(
            "{} note(s) after the final wait have no duration and were dropped",
            pending.len()
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    Ok(MelodyLine {
        events,
        bar_map: BarMap::from_changes(&changes, PPQ)?,
        track_count: tracks.len().max(1),
        ppq: PPQ,
        tempo,
        warnings,
    })
}

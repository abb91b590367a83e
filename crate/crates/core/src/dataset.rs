//! Loop training corpora.
//!
//! Two layouts are produced from a directory of songs:
//!
//! * **Barred**: one file per song; every loop is wrapped in
//!   `repeat_open` / `repeat_close` and the wrapped loops are concatenated
//!   after a single copy of the song header.
//! * **Hard**: one file per loop; the loop body is written out several
//!   times in a row with no repeat signs.
//!
//! Also here: corpus statistics, parameter sweeps and a hash-based
//! train/validation split.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loopfind::{ExtractError, ExtractedLoop, ExtractionParams, LoopCandidate, SongAnalysis};
use crate::tokens::{render, tokenize, Token, TokenKind, TokenStream};

pub const SONG_EXTENSION: &str = ".tokens.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_HARD_REPETITIONS: usize = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Song {
        path: PathBuf,
        #[source]
        source: ExtractError,
    },
    #[error("hard repeats need at least 2 repetitions, got {0}")]
    TooFewRepetitions(usize),
    #[error("parameter grid is empty")]
    EmptyGrid,
    #[error("no songs given")]
    NoSongs,
    #[error("failed to write CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum CorpusFormat {
    Barred,
    Hard { repetitions: usize },
}

impl CorpusFormat {
    pub fn hard() -> CorpusFormat {
        CorpusFormat::Hard {
            repetitions: DEFAULT_HARD_REPETITIONS,
        }
    }
}

/// All `*.tokens.txt` files below `dir`, sorted by path.
pub fn list_songs(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                pending.push(path);
            } else if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(SONG_EXTENSION))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// File name without the `.tokens.txt` suffix.
pub fn song_stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("song");
    name.strip_suffix(SONG_EXTENSION).unwrap_or(name).to_string()
}

pub fn read_song(path: &Path) -> Result<TokenStream, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    tokenize(&text).map_err(|e| DatasetError::Song {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

pub fn analyze_song(path: &Path, params: &ExtractionParams) -> Result<SongAnalysis, DatasetError> {
    let stream = read_song(path)?;
    SongAnalysis::prepare(stream, params).map_err(|source| DatasetError::Song {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs `f` on a pool of `jobs` threads, or the global pool for `None`.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("failed to start worker pool")
            .install(f),
    }
}

/// Loops of one song as extracted for corpus building.
#[derive(Debug, Clone)]
pub struct SongLoops {
    pub source: PathBuf,
    pub header: Vec<Token>,
    pub loops: Vec<ExtractedLoop>,
}

/// Extracts every song in parallel. Results keep the input order; failed
/// songs are returned separately.
pub fn extract_corpus(
    songs: &[PathBuf],
    params: &ExtractionParams,
) -> (Vec<SongLoops>, Vec<(PathBuf, String)>) {
    let results: Vec<_> = songs
        .par_iter()
        .map(|path| {
            analyze_song(path, params).map(|a| SongLoops {
                source: path.clone(),
                header: a.stream.header.clone(),
                loops: a.loops(params),
            })
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (path, r) in songs.iter().zip(results) {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failed.push((path.clone(), e.to_string()));
            }
        }
    }
    (ok, failed)
}

/// Header, then each loop body between repeat signs, then `end`.
/// `None` when there are no loops.
pub fn barred_stream(header: &[Token], loops: &[ExtractedLoop]) -> Option<TokenStream> {
    if loops.is_empty() {
        return None;
    }
    let mut ordered: Vec<&ExtractedLoop> = loops.iter().collect();
    ordered.sort_by_key(|l| (l.candidate.start_tick, l.candidate.s_j));
    let mut body = vec![Token::start()];
    for l in ordered {
        body.push(Token::repeat_open());
        body.extend(l.content().iter().cloned());
        body.push(Token::repeat_close());
    }
    body.push(Token::end());
    Some(TokenStream::new(header.to_vec(), body))
}

/// Loop header, then the body `repetitions` times, then `end`.
pub fn hard_stream(l: &ExtractedLoop, repetitions: usize) -> Result<TokenStream, DatasetError> {
    if repetitions < 2 {
        return Err(DatasetError::TooFewRepetitions(repetitions));
    }
    let content = l.content();
    let mut body = Vec::with_capacity(content.len() * repetitions + 2);
    body.push(Token::start());
    for _ in 0..repetitions {
        body.extend(content.iter().cloned());
    }
    body.push(Token::end());
    Ok(TokenStream::new(l.stream.header.clone(), body))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub output: String,
    pub source: PathBuf,
    /// Positions in the song's loop list.
    pub loop_indices: Vec<usize>,
    pub loops: Vec<LoopCandidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: CorpusFormat,
    pub params: ExtractionParams,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub songs: usize,
    pub songs_with_loops: usize,
    pub files_written: usize,
    pub failures: Vec<(PathBuf, String)>,
}

/// Extracts loops from `songs` and writes them to `out_dir` in `format`,
/// together with a `manifest.json`. Per-song failures are reported, not
/// fatal.
pub fn build_corpus(
    songs: &[PathBuf],
    params: &ExtractionParams,
    format: CorpusFormat,
    out_dir: &Path,
) -> Result<BuildReport, DatasetError> {
    if let CorpusFormat::Hard { repetitions } = format {
        if repetitions < 2 {
            return Err(DatasetError::TooFewRepetitions(repetitions));
        }
    }
    if songs.is_empty() {
        return Err(DatasetError::NoSongs);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (extracted, failures) = extract_corpus(songs, params);

    let mut outputs: Vec<(String, TokenStream, ManifestEntry)> = Vec::new();
    for song in &extracted {
        let stem = song_stem(&song.source);
        match format {
            CorpusFormat::Barred => {
                if let Some(stream) = barred_stream(&song.header, &song.loops) {
                    let output = format!("{stem}.barred{SONG_EXTENSION}");
                    let entry = ManifestEntry {
                        output: output.clone(),
                        source: song.source.clone(),
                        loop_indices: (0..song.loops.len()).collect(),
                        loops: song.loops.iter().map(|l| l.candidate.clone()).collect(),
                    };
                    outputs.push((output, stream, entry));
                }
            }
            CorpusFormat::Hard { repetitions } => {
                for (n, l) in song.loops.iter().enumerate() {
                    let output = format!("{stem}.loop{n}{SONG_EXTENSION}");
                    let entry = ManifestEntry {
                        output: output.clone(),
                        source: song.source.clone(),
                        loop_indices: vec![n],
                        loops: vec![l.candidate.clone()],
                    };
                    outputs.push((output, hard_stream(l, repetitions)?, entry));
                }
            }
        }
    }

    outputs
        .par_iter()
        .map(|(name, stream, _)| {
            let path = out_dir.join(name);
            fs::write(&path, render(stream) + "\n").map_err(io_err(&path))
        })
        .collect::<Result<Vec<()>, _>>()?;

    let manifest = Manifest {
        format,
        params: *params,
        entries: outputs.iter().map(|(_, _, e)| e.clone()).collect(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&manifest_path))?;

    Ok(BuildReport {
        songs: songs.len(),
        songs_with_loops: extracted.iter().filter(|s| !s.loops.is_empty()).count(),
        files_written: outputs.len(),
        failures,
    })
}

pub fn build_barred_corpus(
    songs: &[PathBuf],
    params: &ExtractionParams,
    out_dir: &Path,
) -> Result<BuildReport, DatasetError> {
    build_corpus(songs, params, CorpusFormat::Barred, out_dir)
}

pub fn build_hard_corpus(
    songs: &[PathBuf],
    params: &ExtractionParams,
    out_dir: &Path,
    repetitions: usize,
) -> Result<BuildReport, DatasetError> {
    build_corpus(songs, params, CorpusFormat::Hard { repetitions }, out_dir)
}

/// True when every repeat close pairs with an earlier open and none stay open.
pub fn repeats_balanced(stream: &TokenStream) -> bool {
    let mut depth = 0usize;
    for t in &stream.body {
        match t.kind() {
            TokenKind::RepeatOpen => depth += 1,
            TokenKind::RepeatClose { .. } => match depth.checked_sub(1) {
                Some(d) => depth = d,
                None => return false,
            },
            _ => {}
        }
    }
    depth == 0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub file_count: usize,
    pub max_tokens: usize,
    pub avg_tokens: f64,
    pub total_bytes: u64,
    /// Files that could not be read or tokenized.
    pub unreadable: Vec<PathBuf>,
}

/// Token counts include header tokens.
pub fn corpus_stats(dir: &Path) -> Result<CorpusStats, DatasetError> {
    let files = list_songs(dir)?;
    let counted: Vec<Result<(usize, u64), PathBuf>> = files
        .par_iter()
        .map(|path| {
            let text = fs::read_to_string(path).map_err(|_| path.clone())?;
            let stream = tokenize(&text).map_err(|_| path.clone())?;
            Ok((stream.len(), text.len() as u64))
        })
        .collect();

    let mut stats = CorpusStats::default();
    let mut total_tokens = 0usize;
    for r in counted {
        match r {
            Ok((tokens, bytes)) => {
                stats.file_count += 1;
                stats.max_tokens = stats.max_tokens.max(tokens);
                total_tokens += tokens;
                stats.total_bytes += bytes;
            }
            Err(path) => {
                log::warn!("unreadable corpus file {}", path.display());
                stats.unreadable.push(path);
            }
        }
    }
    if stats.file_count > 0 {
        stats.avg_tokens = total_tokens as f64 / stats.file_count as f64;
    }
    Ok(stats)
}

/// The sixteen combinations of bars {4-8, 4-16}, density {3, 4},
/// bookend notes {2, 4} and bookend beats {2, 4}.
pub fn standard_grid() -> Vec<ExtractionParams> {
    let mut grid = Vec::with_capacity(16);
    for max_bars in [8, 16] {
        for min_density in [3.0, 4.0] {
            for min_bookend_notes in [2, 4] {
                for min_bookend_beats in [2.0, 4.0] {
                    grid.push(ExtractionParams {
                        min_bookend_notes,
                        min_bookend_beats,
                        min_bars: 4,
                        max_bars,
                        min_density,
                        ..Default::default()
                    });
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bars_min: u64,
    pub bars_max: u64,
    pub density: f64,
    pub l_min: usize,
    pub rd_min: f64,
    pub loops: usize,
    pub avg_loops_per_song: f64,
}

impl SweepRow {
    pub fn params(&self, base: &ExtractionParams) -> ExtractionParams {
        ExtractionParams {
            min_bookend_notes: self.l_min,
            min_bookend_beats: self.rd_min,
            min_bars: self.bars_min,
            max_bars: self.bars_max,
            min_density: self.density,
            density_mode: base.density_mode,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    /// Sorted by loop count, ascending.
    pub rows: Vec<SweepRow>,
    pub songs: usize,
    pub failures: Vec<(PathBuf, String)>,
}

/// Loop counts for each parameter combination. Each song is analysed once
/// under the loosest combination and re-filtered per row.
pub fn param_sweep(songs: &[PathBuf], grid: &[ExtractionParams]) -> Result<SweepResult, DatasetError> {
    if grid.is_empty() {
        return Err(DatasetError::EmptyGrid);
    }
    for p in grid {
        p.validate().map_err(|source| DatasetError::Song {
            path: PathBuf::from("<grid>"),
            source,
        })?;
    }
    let loosest = ExtractionParams::loosest(grid);
    let per_song: Vec<Result<Vec<usize>, DatasetError>> = songs
        .par_iter()
        .map(|path| {
            let a = analyze_song(path, &loosest)?;
            Ok(grid.iter().map(|p| a.count(p)).collect())
        })
        .collect();

    let mut totals = vec![0usize; grid.len()];
    let mut ok_songs = 0usize;
    let mut failures = Vec::new();
    for (path, r) in songs.iter().zip(per_song) {
        match r {
            Ok(counts) => {
                ok_songs += 1;
                for (t, c) in totals.iter_mut().zip(counts) {
                    *t += c;
                }
            }
            Err(e) => failures.push((path.clone(), e.to_string())),
        }
    }

    let mut rows: Vec<SweepRow> = grid
        .iter()
        .zip(totals)
        .map(|(p, loops)| SweepRow {
            bars_min: p.min_bars,
            bars_max: p.max_bars,
            density: p.min_density,
            l_min: p.min_bookend_notes,
            rd_min: p.min_bookend_beats,
            loops,
            avg_loops_per_song: if ok_songs == 0 { 0.0 } else { loops as f64 / ok_songs as f64 },
        })
        .collect();
    rows.sort_by_key(|r| r.loops);
    Ok(SweepResult {
        rows,
        songs: ok_songs,
        failures,
    })
}

pub fn write_sweep_csv<W: io::Write>(rows: &[SweepRow], out: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: PathBuf::from("<csv>"),
        source,
    })?;
    Ok(())
}

/// Deterministic train/validation assignment from a hash of the file name.
pub fn is_validation(path: &Path, validation_fraction: f64) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let digest = Sha256::digest(name.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    let unit = u64::from_be_bytes(head) as f64 / u64::MAX as f64;
    unit < validation_fraction
}

/// 85/15 by default; order within each side follows the input.
pub fn train_validation_split(paths: &[PathBuf], validation_fraction: f64) -> (Vec<PathBuf>, Vec<PathBuf>) {
    paths
        .iter()
        .cloned()
        .partition(|p| !is_validation(p, validation_fraction))
}

//! Loop-yield evaluation of a token source: generate fixed-length excerpts
//! from sampled primers and count the exact-length loops inside them.

use std::path::Path;

use anyhow::{bail, Context};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tabloop::dataset::{list_songs, read_song};
use tabloop::genkit::{generate_and_extract, primer_from_song, GenerationConstraints, TokenSource, EIGHTH_NOTE};
use tabloop::{ExtractionParams, TimeSignature, TokenStream};

use crate::table::{num, Table};
use crate::RunInfo;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub excerpts: usize,
    pub bars: u32,
    pub time_signature: TimeSignature,
    /// `min_bars` and `max_bars` must be equal.
    pub params: ExtractionParams,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    /// 25 excerpts of 16 bars in 4/4, scanned for 4-bar loops with
    /// four-event, two-beat bookends.
    fn default() -> Self {
        EvalSettings {
            excerpts: 25,
            bars: 16,
            time_signature: TimeSignature::COMMON,
            params: ExtractionParams {
                min_bars: 4,
                max_bars: 4,
                min_bookend_notes: 4,
                min_bookend_beats: 2.0,
                ..Default::default()
            },
            temperature: 1.0,
            max_tokens: 8192,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcerptResult {
    pub index: usize,
    pub seed: u64,
    pub tempo: Option<u32>,
    pub instruments: Vec<String>,
    pub loops: usize,
    pub densities: Vec<f64>,
    pub tokens: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: RunInfo,
    pub settings: EvalSettings,
    pub excerpt_count: usize,
    pub failed_excerpts: usize,
    pub loops_found: usize,
    /// `loops_found / excerpt_count`; failed excerpts count as zero loops.
    pub avg_loops: f64,
    /// Mean density over all found loops; absent when none were found.
    pub avg_density: Option<f64>,
    pub excerpts: Vec<ExcerptResult>,
}

impl EvalReport {
    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(["excerpts", "failed", "loops_found", "avg_loops", "avg_density"]);
        t.push(vec![
            self.excerpt_count.to_string(),
            self.failed_excerpts.to_string(),
            self.loops_found.to_string(),
            num(self.avg_loops),
            self.avg_density.map_or("-".into(), num),
        ]);
        t
    }

    pub fn excerpt_table(&self) -> Table {
        let mut t = Table::new(["index", "seed", "tempo", "instruments", "loops", "avg_density", "tokens", "error"]);
        for e in &self.excerpts {
            let avg = (!e.densities.is_empty()).then(|| e.densities.iter().sum::<f64>() / e.densities.len() as f64);
            t.push(vec![
                e.index.to_string(),
                e.seed.to_string(),
                e.tempo.map_or("-".into(), |v| v.to_string()),
                e.instruments.join(" "),
                e.loops.to_string(),
                avg.map_or("-".into(), num),
                e.tokens.to_string(),
                e.error.clone().unwrap_or_default(),
            ]);
        }
        t
    }
}

/// Primers built from every song in a loop corpus: each keeps its song's
/// tempo and instruments.
pub fn primer_pool(dir: &Path) -> anyhow::Result<Vec<TokenStream>> {
    let songs = list_songs(dir).with_context(|| format!("reading primer corpus {}", dir.display()))?;
    let mut pool = Vec::new();
    for path in songs {
        match read_song(&path) {
            Ok(song) => pool.extend(primer_from_song(&song, EIGHTH_NOTE)),
            Err(e) => log::warn!("skipping primer source {}: {e}", path.display()),
        }
    }
    if pool.is_empty() {
        bail!("no usable primer in {}", dir.display());
    }
    Ok(pool)
}

/// Runs `settings.excerpts` generations in parallel. Excerpt `i` uses seed
/// `settings.seed + i` both for its primer draw and for decoding, so the
/// report does not depend on scheduling.
pub fn evaluate<S, F>(make_source: F, primers: &[TokenStream], settings: &EvalSettings, run: RunInfo) -> anyhow::Result<EvalReport>
where
    S: TokenSource,
    F: Fn(usize) -> S + Sync,
{
    if settings.excerpts == 0 {
        bail!("at least one excerpt is required");
    }
    if primers.is_empty() {
        bail!("primer pool is empty");
    }
    if settings.params.min_bars != settings.params.max_bars {
        bail!("evaluation needs equal loop bar bounds");
    }
    let excerpts: Vec<ExcerptResult> = (0..settings.excerpts)
        .into_par_iter()
        .map(|index| {
            let seed = settings.seed.wrapping_add(index as u64);
            let primer = primers.choose(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap().clone();
            let tempo = primer.tempo();
            let instruments = primer.declared_instruments().iter().map(|s| s.to_string()).collect();
            let mut c = GenerationConstraints::new(settings.bars, settings.time_signature, primer);
            c.seed = seed;
            c.temperature = settings.temperature;
            c.max_tokens = settings.max_tokens;
            let mut result = ExcerptResult {
                index,
                seed,
                tempo,
                instruments,
                loops: 0,
                densities: Vec::new(),
                tokens: 0,
                error: None,
            };
            match generate_and_extract(make_source(index), &c, &settings.params) {
                Ok((stream, loops)) => {
                    result.loops = loops.len();
                    result.densities = loops.iter().map(|l| l.candidate.density).collect();
                    result.tokens = stream.len();
                }
                Err(e) => {
                    log::warn!("excerpt {index}: {e}");
                    result.error = Some(e.to_string());
                }
            }
            result
        })
        .collect();

    let loops_found: usize = excerpts.iter().map(|e| e.loops).sum();
    let all: Vec<f64> = excerpts.iter().flat_map(|e| e.densities.iter().copied()).collect();
    Ok(EvalReport {
        run,
        settings: settings.clone(),
        excerpt_count: excerpts.len(),
        failed_excerpts: excerpts.iter().filter(|e| e.error.is_some()).count(),
        loops_found,
        avg_loops: loops_found as f64 / excerpts.len() as f64,
        avg_density: (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64),
        excerpts,
    })
}

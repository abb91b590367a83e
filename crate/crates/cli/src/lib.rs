//! The `tabloop` command line: loop extraction, parameter sweeps, loop
//! corpus building, corpus statistics, n-gram training, bar-constrained
//! generation and loop-yield evaluation.

pub mod evaluate;
pub mod table;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tabloop::dataset::{
    build_corpus, corpus_stats, extract_corpus, list_songs, param_sweep, read_song, song_stem, train_validation_split,
    with_jobs, write_sweep_csv, CorpusFormat, SweepRow, DEFAULT_HARD_REPETITIONS,
};
use tabloop::genkit::{
    a_minor_rock_primer, generate_and_extract, generate_constrained, signature_for_bar_ticks, GenerationConstraints,
    NgramModel,
};
use tabloop::loopfind::DensityMode;
use tabloop::{render, ExtractedLoop, ExtractionParams, LoopSource, TimeSignature};

use crate::evaluate::{evaluate, primer_pool, EvalSettings};
use crate::table::{num, Table};

pub const LOOP_METADATA_FILE: &str = "loops.jsonl";

/// How a successful run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Finished, but some inputs were skipped.
    Partial,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::Partial => 1,
        }
    }
}

/// Exit code for a run that failed outright.
pub const FAILURE_CODE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tabloop", version, about = "Loop extraction and loop-aware generation for tablature token corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract loops from every song in a directory.
    Extract(ExtractArgs),
    /// Count loops for every combination of a parameter grid.
    Sweep(SweepArgs),
    /// Write a barred or hard-repeat loop corpus.
    BuildDataset(BuildArgs),
    /// Token and size statistics of a corpus directory.
    Stats(StatsArgs),
    /// Deterministic train/validation split by file name hash.
    Split(SplitArgs),
    /// Train an n-gram model on a corpus directory.
    Train(TrainArgs),
    /// Generate a fixed number of bars from a model.
    Generate(GenerateArgs),
    /// Generate excerpts and report how many exact-length loops they hold.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DensityArg {
    /// Event count times track count over bars.
    Literal,
    /// Event count over track count times bars.
    PerTrack,
}

impl From<DensityArg> for DensityMode {
    fn from(d: DensityArg) -> DensityMode {
        match d {
            DensityArg::Literal => DensityMode::Literal,
            DensityArg::PerTrack => DensityMode::PerTrack,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ParamArgs {
    /// Shortest loop in bars.
    #[arg(long, default_value_t = ExtractionParams::default().min_bars)]
    pub bars_min: u64,
    /// Longest loop in bars.
    #[arg(long, default_value_t = ExtractionParams::default().max_bars)]
    pub bars_max: u64,
    /// Minimum note density.
    #[arg(long, default_value_t = ExtractionParams::default().min_density)]
    pub density: f64,
    /// Minimum bookend length in events.
    #[arg(long, default_value_t = ExtractionParams::default().min_bookend_notes)]
    pub l_min: usize,
    /// Minimum bookend length in beats.
    #[arg(long, default_value_t = ExtractionParams::default().min_bookend_beats)]
    pub rd_min: f64,
    #[arg(long, value_enum, default_value_t = DensityArg::Literal)]
    pub density_mode: DensityArg,
}

impl ParamArgs {
    pub fn params(&self) -> anyhow::Result<ExtractionParams> {
        let p = ExtractionParams {
            min_bookend_notes: self.l_min,
            min_bookend_beats: self.rd_min,
            min_bars: self.bars_min,
            max_bars: self.bars_max,
            min_density: self.density,
            density_mode: self.density_mode.into(),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    /// Directory of `.tokens.txt` songs, searched recursively.
    pub corpus: PathBuf,
    /// Output directory for loop files and `loops.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub params: ParamArgs,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    pub corpus: PathBuf,
    /// Directory for `sweep.csv` and `sweep.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Bar ranges such as `4-8,4-16`; defaults to the standard grid.
    #[arg(long, value_delimiter = ',')]
    pub bar_ranges: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub densities: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub l_mins: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub rd_mins: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = DensityArg::Literal)]
    pub density_mode: DensityArg,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Barred,
    Hard,
}

#[derive(Debug, Clone, Args)]
pub struct BuildArgs {
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub format: FormatArg,
    /// Repetitions per loop for the hard format.
    #[arg(long, default_value_t = DEFAULT_HARD_REPETITIONS)]
    pub reps: usize,
    #[command(flatten)]
    pub params: ParamArgs,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    pub corpus: PathBuf,
    /// Directory for `stats.csv`, `stats.txt` and `stats.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    pub corpus: PathBuf,
    /// Directory for `train.txt` and `validation.txt` path lists.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    pub validation: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    pub corpus: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Context length; 0 trains a unigram model.
    #[arg(long, default_value_t = 3)]
    pub order: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Bars to generate.
    #[arg(long, default_value_t = 16)]
    pub bars: u32,
    /// Time signature, e.g. `4/4` or `7/8`.
    #[arg(long, conflicts_with = "ticks_per_bar")]
    pub time_sig: Option<TimeSignature>,
    /// Bar length in ticks at 960 per quarter note, instead of --time-sig.
    #[arg(long)]
    pub ticks_per_bar: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Cap on sampling steps and output body tokens.
    #[arg(long, default_value_t = 8192)]
    pub max_tokens: usize,
}

impl DecodeArgs {
    pub fn time_signature(&self) -> anyhow::Result<TimeSignature> {
        match (self.time_sig, self.ticks_per_bar) {
            (Some(sig), _) => Ok(sig),
            (None, Some(ticks)) => signature_for_bar_ticks(ticks)
                .with_context(|| format!("{ticks} ticks is not a whole number of 32nd notes")),
            (None, None) => Ok(TimeSignature::COMMON),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output token file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Primer token file; a drums, guitar and bass eighth note otherwise.
    #[arg(long)]
    pub primer_file: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Also extract loops of exactly this many bars.
    #[arg(long)]
    pub loop_bars: Option<u64>,
    #[arg(long, default_value_t = 4)]
    pub l_min: usize,
    #[arg(long, default_value_t = 2.0)]
    pub rd_min: f64,
    #[arg(long, default_value_t = ExtractionParams::default().min_density)]
    pub density: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Loop corpus whose headers supply tempo and instrumentation primers.
    #[arg(long)]
    pub primers: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub excerpts: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Exact loop length in bars.
    #[arg(long, default_value_t = 4)]
    pub loop_bars: u64,
    #[arg(long, default_value_t = 4)]
    pub l_min: usize,
    #[arg(long, default_value_t = 2.0)]
    pub rd_min: f64,
    #[arg(long, default_value_t = ExtractionParams::default().min_density)]
    pub density: f64,
    /// Directory for `eval.json`, `eval.csv`, `eval.txt` and the excerpt table.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Provenance echoed into every JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool: String,
    pub version: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
}

impl RunInfo {
    pub fn new(argv: &[String], seed: Option<u64>) -> RunInfo {
        RunInfo {
            tool: "tabloop".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            argv: argv.to_vec(),
            seed,
        }
    }
}

/// One line of `loops.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub song: String,
    pub file: String,
    pub index: usize,
    pub s_i: usize,
    pub s_j: usize,
    pub start_tick: u64,
    pub bars: u64,
    pub ticks: u64,
    pub bookend_events: usize,
    pub bookend_ticks: u64,
    pub density: f64,
    pub source: LoopSource,
    pub params: ExtractionParams,
    pub run: RunInfo,
}

impl LoopRecord {
    pub fn new(song: &Path, file: String, index: usize, l: &ExtractedLoop, params: &ExtractionParams, run: &RunInfo) -> LoopRecord {
        let c = &l.candidate;
        LoopRecord {
            song: song.display().to_string(),
            file,
            index,
            s_i: c.s_i,
            s_j: c.s_j,
            start_tick: c.start_tick,
            bars: c.body_bars,
            ticks: c.body_ticks,
            bookend_events: c.bookend_events,
            bookend_ticks: c.bookend_ticks,
            density: c.density,
            source: c.source,
            params: *params,
            run: run.clone(),
        }
    }
}

/// Side file of `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub run: RunInfo,
    pub model: String,
    pub bars: u32,
    pub time_signature: String,
    pub ticks_per_bar: u64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub tokens: usize,
    pub loops: Vec<LoopRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub run: RunInfo,
    pub corpus: String,
    pub file_count: usize,
    pub max_tokens: usize,
    pub avg_tokens: f64,
    pub total_bytes: u64,
    pub unreadable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub run: RunInfo,
    pub corpus: String,
    pub songs: usize,
    pub failures: Vec<String>,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub run: RunInfo,
    pub corpus: String,
    pub format: CorpusFormat,
    pub params: ExtractionParams,
    pub songs: usize,
    pub songs_with_loops: usize,
    pub files_written: usize,
    pub failures: Vec<String>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr.
pub fn run_from(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { FAILURE_CODE } else { 0 };
        }
    };
    match run(cli, &argv) {
        Ok(status) => status.code(),
        Err(e) => {
            eprintln!("error: {e:#}");
            FAILURE_CODE
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> anyhow::Result<Status> {
    match cli.command {
        Command::Extract(a) => {
            let jobs = a.jobs;
            with_jobs(jobs, || cmd_extract(&a, argv))
        }
        Command::Sweep(a) => {
            let jobs = a.jobs;
            with_jobs(jobs, || cmd_sweep(&a, argv))
        }
        Command::BuildDataset(a) => {
            let jobs = a.jobs;
            with_jobs(jobs, || cmd_build(&a, argv))
        }
        Command::Stats(a) => {
            let jobs = a.jobs;
            with_jobs(jobs, || cmd_stats(&a, argv))
        }
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a, argv),
        Command::Evaluate(a) => {
            let jobs = a.jobs;
            with_jobs(jobs, || cmd_evaluate(&a, argv))
        }
    }
}

fn songs_in(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("corpus directory {} does not exist", dir.display());
    }
    let songs = list_songs(dir)?;
    if songs.is_empty() {
        bail!("no .tokens.txt files under {}", dir.display());
    }
    Ok(songs)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn status_for(failures: usize, total: usize) -> anyhow::Result<Status> {
    match failures {
        0 => Ok(Status::Success),
        f if f == total => bail!("all {total} songs failed"),
        _ => Ok(Status::Partial),
    }
}

pub fn cmd_extract(a: &ExtractArgs, argv: &[String]) -> anyhow::Result<Status> {
    let params = a.params.params()?;
    let songs = songs_in(&a.corpus)?;
    let run = RunInfo::new(argv, None);
    let (extracted, failures) = extract_corpus(&songs, &params);
    for (path, e) in &failures {
        eprintln!("warning: skipped {}: {e}", path.display());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut jsonl = String::new();
    let mut table = Table::new(["song", "loops", "extracted", "built_in"]);
    for song in &extracted {
        let stem = song_stem(&song.source);
        for (n, l) in song.loops.iter().enumerate() {
            let file = format!("{stem}.loop{n}.tokens.txt");
            fs::write(a.out.join(&file), render(&l.stream) + "\n")?;
            jsonl.push_str(&serde_json::to_string(&LoopRecord::new(&song.source, file, n, l, &params, &run))?);
            jsonl.push('\n');
        }
        let built_in = song.loops.iter().filter(|l| l.candidate.source == LoopSource::BuiltIn).count();
        table.push(vec![
            stem,
            song.loops.len().to_string(),
            (song.loops.len() - built_in).to_string(),
            built_in.to_string(),
        ]);
    }
    fs::write(a.out.join(LOOP_METADATA_FILE), jsonl)?;
    table.write(&a.out, "loops_per_song")?;

    let total: usize = extracted.iter().map(|s| s.loops.len()).sum();
    println!(
        "{} songs, {} loops ({:.2} per song), {} skipped",
        extracted.len(),
        total,
        total as f64 / extracted.len().max(1) as f64,
        failures.len()
    );
    status_for(failures.len(), songs.len())
}

/// The standard sixteen-row grid, with any list given on the command line
/// replacing that axis.
fn sweep_grid(a: &SweepArgs) -> anyhow::Result<Vec<ExtractionParams>> {
    let ranges: Vec<(u64, u64)> = match &a.bar_ranges {
        None => vec![(4, 8), (4, 16)],
        Some(list) => list
            .iter()
            .map(|s| {
                let (lo, hi) = s.split_once('-').with_context(|| format!("bar range `{s}` is not MIN-MAX"))?;
                Ok((lo.trim().parse()?, hi.trim().parse()?))
            })
            .collect::<anyhow::Result<_>>()?,
    };
    let densities = a.densities.clone().unwrap_or_else(|| vec![3.0, 4.0]);
    let l_mins = a.l_mins.clone().unwrap_or_else(|| vec![2, 4]);
    let rd_mins = a.rd_mins.clone().unwrap_or_else(|| vec![2.0, 4.0]);
    let mut grid = Vec::new();
    for &(min_bars, max_bars) in &ranges {
        for &min_density in &densities {
            for &min_bookend_notes in &l_mins {
                for &min_bookend_beats in &rd_mins {
                    let p = ExtractionParams {
                        min_bookend_notes,
                        min_bookend_beats,
                        min_bars,
                        max_bars,
                        min_density,
                        density_mode: a.density_mode.into(),
                    };
                    p.validate()?;
                    grid.push(p);
                }
            }
        }
    }
    Ok(grid)
}

pub fn cmd_sweep(a: &SweepArgs, argv: &[String]) -> anyhow::Result<Status> {
    let grid = sweep_grid(a)?;
    let songs = songs_in(&a.corpus)?;
    let result = param_sweep(&songs, &grid)?;
    for (path, e) in &result.failures {
        eprintln!("warning: skipped {}: {e}", path.display());
    }
    let mut table = Table::new(["bars_min", "bars_max", "density", "l_min", "rd_min", "loops", "avg_loops_per_song"]);
    for r in &result.rows {
        table.push(vec![
            r.bars_min.to_string(),
            r.bars_max.to_string(),
            r.density.to_string(),
            r.l_min.to_string(),
            r.rd_min.to_string(),
            r.loops.to_string(),
            num(r.avg_loops_per_song),
        ]);
    }
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        let file = fs::File::create(out.join("sweep.csv"))?;
        write_sweep_csv(&result.rows, file)?;
        fs::write(out.join("sweep.txt"), table.to_text())?;
        let record = SweepRecord {
            run: RunInfo::new(argv, None),
            corpus: a.corpus.display().to_string(),
            songs: result.songs,
            failures: result.failures.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect(),
            rows: result.rows.clone(),
        };
        write_json(&out.join("sweep.json"), &record)?;
    }
    status_for(result.failures.len(), songs.len())
}

pub fn cmd_build(a: &BuildArgs, argv: &[String]) -> anyhow::Result<Status> {
    let params = a.params.params()?;
    let songs = songs_in(&a.corpus)?;
    let format = match a.format {
        FormatArg::Barred => CorpusFormat::Barred,
        FormatArg::Hard => CorpusFormat::Hard { repetitions: a.reps },
    };
    let report = build_corpus(&songs, &params, format, &a.out)?;
    for (path, e) in &report.failures {
        eprintln!("warning: skipped {}: {e}", path.display());
    }
    let record = BuildRecord {
        run: RunInfo::new(argv, None),
        corpus: a.corpus.display().to_string(),
        format,
        params,
        songs: report.songs,
        songs_with_loops: report.songs_with_loops,
        files_written: report.files_written,
        failures: report.failures.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect(),
    };
    write_json(&a.out.join("build.json"), &record)?;
    println!(
        "{} songs, {} with loops, {} files written to {}",
        report.songs,
        report.songs_with_loops,
        report.files_written,
        a.out.display()
    );
    status_for(report.failures.len(), songs.len())
}

pub fn cmd_stats(a: &StatsArgs, argv: &[String]) -> anyhow::Result<Status> {
    if !a.corpus.is_dir() {
        bail!("corpus directory {} does not exist", a.corpus.display());
    }
    let stats = corpus_stats(&a.corpus)?;
    let mut table = Table::new(["files", "max_tokens", "avg_tokens", "total_bytes", "unreadable"]);
    table.push(vec![
        stats.file_count.to_string(),
        stats.max_tokens.to_string(),
        num(stats.avg_tokens),
        stats.total_bytes.to_string(),
        stats.unreadable.len().to_string(),
    ]);
    print!("{}", table.to_text());
    for p in &stats.unreadable {
        eprintln!("warning: unreadable {}", p.display());
    }
    if let Some(out) = &a.out {
        table.write(out, "stats")?;
        let record = StatsRecord {
            run: RunInfo::new(argv, None),
            corpus: a.corpus.display().to_string(),
            file_count: stats.file_count,
            max_tokens: stats.max_tokens,
            avg_tokens: stats.avg_tokens,
            total_bytes: stats.total_bytes,
            unreadable: stats.unreadable.iter().map(|p| p.display().to_string()).collect(),
        };
        write_json(&out.join("stats.json"), &record)?;
    }
    Ok(if stats.unreadable.is_empty() { Status::Success } else { Status::Partial })
}

pub fn cmd_split(a: &SplitArgs) -> anyhow::Result<Status> {
    if !(0.0..=1.0).contains(&a.validation) {
        bail!("validation fraction must lie in [0, 1]");
    }
    let songs = songs_in(&a.corpus)?;
    let (train, val) = train_validation_split(&songs, a.validation);
    fs::create_dir_all(&a.out)?;
    let list = |paths: &[PathBuf]| paths.iter().map(|p| format!("{}\n", p.display())).collect::<String>();
    fs::write(a.out.join("train.txt"), list(&train))?;
    fs::write(a.out.join("validation.txt"), list(&val))?;
    println!("{} training, {} validation", train.len(), val.len());
    Ok(Status::Success)
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<Status> {
    if !a.corpus.is_dir() {
        bail!("corpus directory {} does not exist", a.corpus.display());
    }
    let model = NgramModel::train_dir(&a.corpus, a.order)?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("order {} model, {} token types, written to {}", model.order(), model.vocab().len(), a.out.display());
    Ok(Status::Success)
}

fn load_model(path: &Path) -> anyhow::Result<NgramModel> {
    NgramModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn cmd_generate(a: &GenerateArgs, argv: &[String]) -> anyhow::Result<Status> {
    let model = load_model(&a.model)?;
    let primer = match &a.primer_file {
        Some(p) => read_song(p)?,
        None => a_minor_rock_primer(),
    };
    let sig = a.decode.time_signature()?;
    let mut c = GenerationConstraints::new(a.decode.bars, sig, primer);
    c.seed = a.decode.seed;
    c.temperature = a.decode.temperature;
    c.max_tokens = a.decode.max_tokens;

    let (stream, loops, params) = match a.loop_bars {
        Some(bars) => {
            let params = ExtractionParams {
                min_bars: bars,
                max_bars: bars,
                min_bookend_notes: a.l_min,
                min_bookend_beats: a.rd_min,
                min_density: a.density,
                ..Default::default()
            };
            let (s, l) = generate_and_extract(&model, &c, &params)?;
            (s, l, Some(params))
        }
        None => (generate_constrained(&model, &c)?, Vec::new(), None),
    };
    let text = render(&stream) + "\n";
    let run = RunInfo::new(argv, Some(a.decode.seed));
    match &a.out {
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            if !loops.is_empty() {
                eprintln!("{} loops found; use --out to write them", loops.len());
            }
        }
        Some(out) => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
            let stem = song_stem(out);
            let dir = out.parent().unwrap_or(Path::new("."));
            let mut records = Vec::new();
            for (n, l) in loops.iter().enumerate() {
                let file = format!("{stem}.loop{n}.tokens.txt");
                fs::write(dir.join(&file), render(&l.stream) + "\n")?;
                records.push(LoopRecord::new(out, file, n, l, params.as_ref().unwrap(), &run));
            }
            let record = GenerationRecord {
                run,
                model: a.model.display().to_string(),
                bars: c.bars,
                time_signature: sig.to_string(),
                ticks_per_bar: c.ticks_per_bar(),
                temperature: c.temperature,
                max_tokens: c.max_tokens,
                tokens: stream.len(),
                loops: records,
            };
            write_json(&dir.join(format!("{stem}.json")), &record)?;
            eprintln!("{} bars of {sig} written to {}, {} loops", c.bars, out.display(), loops.len());
        }
    }
    Ok(Status::Success)
}

pub fn cmd_evaluate(a: &EvaluateArgs, argv: &[String]) -> anyhow::Result<Status> {
    let model = load_model(&a.model)?;
    let primers = primer_pool(&a.primers)?;
    let settings = EvalSettings {
        excerpts: a.excerpts,
        bars: a.decode.bars,
        time_signature: a.decode.time_signature()?,
        params: ExtractionParams {
            min_bars: a.loop_bars,
            max_bars: a.loop_bars,
            min_bookend_notes: a.l_min,
            min_bookend_beats: a.rd_min,
            min_density: a.density,
            ..Default::default()
        },
        temperature: a.decode.temperature,
        max_tokens: a.decode.max_tokens,
        seed: a.decode.seed,
    };
    settings.params.validate()?;
    let report = evaluate(|_| &model, &primers, &settings, RunInfo::new(argv, Some(a.decode.seed)))?;
    let summary = report.summary_table();
    print!("{}", summary.to_text());
    if let Some(out) = &a.out {
        write_json(&out.join("eval.json"), &report)?;
        summary.write(out, "eval")?;
        report.excerpt_table().write(out, "eval_excerpts")?;
    }
    Ok(if report.failed_excerpts == 0 { Status::Success } else { Status::Partial })
}

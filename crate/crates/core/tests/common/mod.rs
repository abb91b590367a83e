//! Shared test support: a brute-force repetition oracle, random melodies
//! and a synthetic corpus with planted loops of known shape.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tabloop::{ExtractionParams, TimeSignature, Token, TokenStream, PPQ};

/// One melody event as the oracle sees it: a symbol id standing for a
/// note set, plus its duration. Two events are equal iff both match.
pub type Sym = (u32, u64);

/// Naive enumeration of the repetition structure of `m`.
pub struct Oracle {
    pub m: Vec<Sym>,
    /// `c[i][j]` for `i < j`, counted by walking backwards.
    pub c: Vec<Vec<usize>>,
    pub d: Vec<Vec<u64>>,
}

impl Oracle {
    pub fn new(m: &[Sym]) -> Oracle {
        let l = m.len();
        let mut c = vec![vec![0; l]; l];
        let mut d = vec![vec![0; l]; l];
        for i in 0..l {
            for j in i + 1..l {
                let mut k = 0;
                let mut ticks = 0;
                while k <= i && m[i - k] == m[j - k] {
                    ticks += m[i - k].1;
                    k += 1;
                }
                c[i][j] = k;
                d[i][j] = ticks;
            }
        }
        Oracle { m: m.to_vec(), c, d }
    }

    /// Every cell holding exactly `l_min` marks the point a repetition first
    /// reaches the bookend length; the body starts `l_min - 1` cells back.
    pub fn candidates(&self, l_min: usize) -> Vec<(usize, usize)> {
        let l = self.m.len();
        let mut out = Vec::new();
        for i in 0..l {
            for j in i + 1..l {
                if self.c[i][j] == l_min {
                    out.push((i + 1 - l_min, j + 1 - l_min));
                }
            }
        }
        out.sort();
        out
    }

    pub fn extent(&self, (s_i, s_j): (usize, usize)) -> (usize, u64) {
        let mut n = 0;
        while s_j + n < self.m.len() && self.m[s_i + n] == self.m[s_j + n] {
            n += 1;
        }
        if n == 0 {
            return (0, 0);
        }
        (n, self.d[s_i + n - 1][s_j + n - 1])
    }

    pub fn matching_cells(&self) -> usize {
        self.c.iter().flatten().filter(|&&v| v > 0).count()
    }
}

/// Renders symbols as a single-track song: symbol `p` becomes
/// `lead:note:s1:f<p>`, symbol 0 is a rest.
pub fn melody_stream(m: &[Sym]) -> TokenStream {
    let mut body = vec![Token::start()];
    for &(p, dur) in m {
        if p > 0 {
            body.push(Token::note("lead", &format!("s1:f{p}")));
            if p % 3 == 0 {
                body.push(Token::note("bass", &format!("s2:f{p}")));
            }
        }
        body.push(Token::wait(dur));
    }
    body.push(Token::end());
    TokenStream::new(
        vec![Token::tempo(120), Token::time_signature(TimeSignature::COMMON)],
        body,
    )
}

/// Random melody of length 2..=max_len over an alphabet of 2 to 20 symbols
/// with random durations, sometimes with a copied segment.
pub fn random_melody(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<Sym> {
    let alphabet_size = rng.gen_range(2..=20);
    let durations = [120u64, 240, 480, 960, 1440];
    let alphabet: Vec<Sym> = (0..alphabet_size)
        .map(|k| (k as u32 % (alphabet_size / 2 + 1) as u32, *durations.choose(rng).unwrap()))
        .collect();
    let len = rng.gen_range(2..=max_len);
    let mut m: Vec<Sym> = (0..len).map(|_| *alphabet.choose(rng).unwrap()).collect();
    if len >= 8 && rng.gen_bool(0.5) {
        let n = rng.gen_range(2..=len / 2);
        let from = rng.gen_range(0..=len - n);
        let to = rng.gen_range(0..=len - n);
        let seg = m[from..from + n].to_vec();
        m[to..to + n].copy_from_slice(&seg);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marking {
    /// Body followed by a copy of its first `events` events.
    Bookended { events: usize, ticks: u64 },
    RepeatSigns,
}

/// A loop-shaped region written into a synthetic song, with the attributes
/// any correct extractor must measure for it.
#[derive(Debug, Clone)]
pub struct Structure {
    pub marking: Marking,
    pub start_tick: u64,
    pub body_ticks: u64,
    pub body_events: usize,
    /// `None` when the body ends off a bar line.
    pub bars: Option<u64>,
    /// Built to pass the default settings.
    pub planted: bool,
}

impl Structure {
    pub fn density(&self, tracks: usize) -> Option<f64> {
        self.bars.map(|b| self.body_events as f64 * tracks as f64 / b as f64)
    }

    pub fn admitted(&self, p: &ExtractionParams, tracks: usize) -> bool {
        let Some(bars) = self.bars else { return false };
        let shape = (p.min_bars..=p.max_bars).contains(&bars) && self.density(tracks).unwrap() >= p.min_density;
        shape
            && match self.marking {
                Marking::Bookended { events, ticks } => {
                    events >= p.min_bookend_notes && ticks as f64 >= p.min_bookend_beats * PPQ as f64
                }
                Marking::RepeatSigns => true,
            }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSong {
    pub name: String,
    pub text: String,
    pub tracks: usize,
    pub structures: Vec<Structure>,
}

impl SynthSong {
    pub fn expected(&self, p: &ExtractionParams) -> Vec<&Structure> {
        self.structures.iter().filter(|s| s.admitted(p, self.tracks)).collect()
    }
}

const TRACK_NAMES: [&str; 4] = ["distorted0", "bass", "drums", "clean0"];
const UNIT: u64 = 240;

#[derive(Clone)]
struct Event {
    notes: Vec<Token>,
    dur: u64,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    tracks: Vec<&'static str>,
    body: Vec<Token>,
    tick: u64,
    in_bar: u64,
    bar_ticks: u64,
    next_id: u32,
}

impl Builder<'_> {
    fn unique(&mut self, dur: u64) -> Event {
        let n = self.rng.gen_range(1..=self.tracks.len());
        let mut chosen = self.tracks.clone();
        chosen.shuffle(self.rng);
        let notes = chosen[..n]
            .iter()
            .map(|t| {
                self.next_id += 1;
                Token::note(t, &format!("s{}:f{}", 1 + self.next_id % 6, self.next_id))
            })
            .collect();
        Event { notes, dur }
    }

    fn emit(&mut self, e: &Event) {
        if self.in_bar == 0 {
            self.body.push(Token::new_measure());
        }
        self.body.extend(e.notes.iter().cloned());
        self.body.push(Token::wait(e.dur));
        self.tick += e.dur;
        self.in_bar = (self.in_bar + e.dur) % self.bar_ticks;
    }

    /// Random split of `ticks` into `n` positive multiples of `UNIT`.
    fn split(&mut self, ticks: u64, n: usize) -> Vec<u64> {
        let units = (ticks / UNIT) as usize;
        let n = n.clamp(1, units);
        let mut cuts: Vec<usize> = (1..units).collect();
        cuts.shuffle(self.rng);
        let mut cuts: Vec<usize> = cuts[..n - 1].to_vec();
        cuts.push(0);
        cuts.push(units);
        cuts.sort();
        cuts.windows(2).map(|w| (w[1] - w[0]) as u64 * UNIT).collect()
    }

    fn unique_events(&mut self, ticks: u64, n: usize) -> Vec<Event> {
        self.split(ticks, n).into_iter().map(|d| self.unique(d)).collect()
    }

    fn fill_to_bar_line(&mut self) {
        if self.in_bar != 0 {
            let n = self.rng.gen_range(1..=3);
            for e in self.unique_events(self.bar_ticks - self.in_bar, n) {
                self.emit(&e);
            }
        }
    }

    fn filler_bars(&mut self, bars: usize) {
        for _ in 0..bars {
            let n = self.rng.gen_range(1..=6);
            for e in self.unique_events(self.bar_ticks, n) {
                self.emit(&e);
            }
        }
    }

    /// Body of `bars` bars with `per_bar` events each (fewer if the bar is
    /// too short), plus an optional trailing partial bar.
    fn body(&mut self, bars: u64, per_bar: (usize, usize), partial: bool) -> Vec<Event> {
        let mut events = Vec::new();
        for _ in 0..bars {
            let n = self.rng.gen_range(per_bar.0..=per_bar.1);
            events.extend(self.unique_events(self.bar_ticks, n));
        }
        if partial {
            let units = self.bar_ticks / UNIT;
            let part = self.rng.gen_range(1..units) * UNIT;
            let n = self.rng.gen_range(1..=3);
            events.extend(self.unique_events(part, n));
        }
        events
    }

    fn bookended(&mut self, bars: u64, per_bar: (usize, usize), partial: bool, bookend: impl FnOnce(&[Event], &mut ChaCha8Rng) -> usize, planted: bool) -> Structure {
        debug_assert_eq!(self.in_bar, 0);
        let start_tick = self.tick;
        let p = self.body(bars, per_bar, partial);
        let e = bookend(&p, self.rng).clamp(1, p.len());
        for ev in &p {
            self.emit(ev);
        }
        let body_ticks = self.tick - start_tick;
        for ev in &p[..e] {
            self.emit(ev);
        }
        let ticks = p[..e].iter().map(|ev| ev.dur).sum();
        self.fill_to_bar_line();
        Structure {
            marking: Marking::Bookended { events: e, ticks },
            start_tick,
            body_ticks,
            body_events: p.len(),
            bars: (!partial).then_some(bars),
            planted,
        }
    }

    fn repeat_signs(&mut self, bars: u64, per_bar: (usize, usize), planted: bool) -> Structure {
        debug_assert_eq!(self.in_bar, 0);
        let start_tick = self.tick;
        let p = self.body(bars, per_bar, false);
        self.body.push(Token::repeat_open());
        for ev in &p {
            self.emit(ev);
        }
        self.body.push(Token::parse("repeat_close:2").unwrap());
        Structure {
            marking: Marking::RepeatSigns,
            start_tick,
            body_ticks: self.tick - start_tick,
            body_events: p.len(),
            bars: Some(bars),
            planted,
        }
    }
}

/// Smallest bookend of at least four events lasting at least two beats,
/// plus up to three extra events.
fn default_bookend(p: &[Event], rng: &mut ChaCha8Rng) -> usize {
    let mut e = 4;
    while e < p.len() && p[..e].iter().map(|x| x.dur).sum::<u64>() < 2 * PPQ {
        e += 1;
    }
    (e + rng.gen_range(0..=3)).min(p.len())
}

fn signature() -> [(TimeSignature, u32); 3] {
    [
        (TimeSignature::new(4, 4), 70),
        (TimeSignature::new(3, 4), 20),
        (TimeSignature::new(7, 8), 10),
    ]
}

fn pick_signature(rng: &mut ChaCha8Rng) -> TimeSignature {
    signature().choose_weighted(rng, |s| s.1).unwrap().0
}

/// One song with 1 to 5 planted loops (4 to 8 bars, density at least 3,
/// bookends of at least four events and two beats) and up to four decoys
/// whose bar count, density or bookend vary at random.
pub fn planted_song(rng: &mut ChaCha8Rng, name: String) -> SynthSong {
    let n_tracks = rng.gen_range(1..=3);
    let tracks: Vec<&'static str> = TRACK_NAMES[..n_tracks].to_vec();
    let sig = pick_signature(rng);
    let mut header = vec![Token::parse(&format!("title:{name}")).unwrap(), Token::tempo(rng.gen_range(60..=200))];
    header.push(Token::time_signature(sig));
    header.extend(tracks.iter().map(|t| Token::instrument(t)));

    let mut b = Builder {
        rng,
        tracks,
        body: vec![Token::start()],
        tick: 0,
        in_bar: 0,
        bar_ticks: sig.bar_ticks(PPQ).unwrap(),
        next_id: 0,
    };
    let n_planted = b.rng.gen_range(1..=5);
    let n_decoys = b.rng.gen_range(0..=4);
    let mut kinds: Vec<bool> = std::iter::repeat(true)
        .take(n_planted)
        .chain(std::iter::repeat(false).take(n_decoys))
        .collect();
    kinds.shuffle(b.rng);

    let mut structures = Vec::new();
    let lead = b.rng.gen_range(0..=2);
    b.filler_bars(lead);
    for planted in kinds {
        if b.rng.gen_bool(0.1) {
            let new_sig = pick_signature(b.rng);
            b.body.push(Token::parse(&format!("measure:timesig:{new_sig}")).unwrap());
            b.bar_ticks = new_sig.bar_ticks(PPQ).unwrap();
        }
        let builtin = b.rng.gen_bool(0.25);
        let s = match (planted, builtin) {
            (true, false) => {
                let bars = b.rng.gen_range(4..=8);
                b.bookended(bars, (3, 6), false, default_bookend, true)
            }
            (true, true) => {
                let bars = b.rng.gen_range(4..=8);
                b.repeat_signs(bars, (3, 6), true)
            }
            (false, false) => {
                let bars = *[1u64, 2, 3, 4, 5, 6, 8, 9, 12, 16].choose(b.rng).unwrap();
                let partial = b.rng.gen_bool(0.2);
                let lo = b.rng.gen_range(1..=5);
                b.bookended(bars, (lo, 5), partial, |p, rng| rng.gen_range(1..=p.len().min(8)), false)
            }
            (false, true) => {
                let bars = *[2u64, 3, 4, 6, 10, 12].choose(b.rng).unwrap();
                let lo = b.rng.gen_range(1..=4);
                b.repeat_signs(bars, (lo, 4), false)
            }
        };
        structures.push(s);
        let gap = b.rng.gen_range(0..=2);
        b.filler_bars(gap);
    }
    b.body.push(Token::end());
    let tracks = b.tracks.len();
    let stream = TokenStream::new(header, b.body);
    SynthSong {
        name,
        text: tabloop::render(&stream),
        tracks,
        structures,
    }
}

pub fn planted_corpus(rng: &mut ChaCha8Rng, songs: usize) -> Vec<SynthSong> {
    (0..songs).map(|i| planted_song(rng, format!("song{i:03}"))).collect()
}

pub fn write_corpus(dir: &Path, songs: &[SynthSong]) -> Vec<PathBuf> {
    fs::create_dir_all(dir).unwrap();
    songs
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.tokens.txt", s.name));
            fs::write(&path, &s.text).unwrap();
            path
        })
        .collect()
}

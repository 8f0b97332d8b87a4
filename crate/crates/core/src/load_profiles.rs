//! Piecewise-constant load demands, the deterministic benchmarks and a seeded sampler.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Triangular, Uniform};

/// Times closer than this to a segment boundary are treated as lying on it.
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error("segment {index}: duration {duration} must be positive and finite")]
    BadDuration { index: usize, duration: f64 },
    #[error("segment {index}: current {current} must be non-negative and finite")]
    BadCurrent { index: usize, current: f64 },
    #[error("a repeating profile needs at least one segment")]
    EmptyRepeating,
    #[error("time {t} lies beyond the profile end {end}")]
    BeyondHorizon { t: f64, end: f64 },
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("unknown benchmark '{0}'")]
    UnknownBenchmark(String),
    #[error("profile line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid load model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub current: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    segments: Vec<Segment>,
    repeat: bool,
    starts: Vec<f64>,
    period: f64,
}

impl LoadProfile {
    pub fn new(segments: Vec<(f64, f64)>, repeat: bool) -> Result<Self, ProfileError> {
        let segments: Vec<Segment> =
            segments.into_iter().map(|(duration, current)| Segment { duration, current }).collect();
        Self::from_segments(segments, repeat)
    }

    pub fn from_segments(segments: Vec<Segment>, repeat: bool) -> Result<Self, ProfileError> {
        for (index, s) in segments.iter().enumerate() {
            if !(s.duration.is_finite() && s.duration > 0.0) {
                return Err(ProfileError::BadDuration { index, duration: s.duration });
            }
            if !(s.current.is_finite() && s.current >= 0.0) {
                return Err(ProfileError::BadCurrent { index, current: s.current });
            }
        }
        if repeat && segments.is_empty() {
            return Err(ProfileError::EmptyRepeating);
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in &segments {
            starts.push(acc);
            acc += s.duration;
        }
        Ok(Self { segments, repeat, starts, period: acc })
    }

    /// Repeating single-segment profile drawing `current` forever.
    pub fn constant(current: f64) -> Result<Self, ProfileError> {
        Self::new(vec![(1.0, current)], true)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn repeats(&self) -> bool {
        self.repeat
    }

    /// Length of one pass through the segments.
    pub fn period(&self) -> f64 {
        self.period
    }

    /// End time of a finite profile; `None` when it repeats.
    pub fn horizon(&self) -> Option<f64> {
        if self.repeat {
            None
        } else {
            Some(self.period)
        }
    }

    /// Charge drawn by one pass through the segments.
    pub fn charge_per_period(&self) -> f64 {
        self.segments.iter().map(|s| s.duration * s.current).sum()
    }

    pub fn is_idle(&self) -> bool {
        self.segments.iter().all(|s| s.current == 0.0)
    }

    /// Current and absolute end time of the segment containing `t` (right-continuous).
    pub fn segment_at(&self, t: f64) -> Result<(f64, f64), ProfileError> {
        let (idx, cycle_start) = self.locate(t)?;
        let s = &self.segments[idx];
        Ok((s.current, cycle_start + self.starts[idx] + s.duration))
    }

    fn locate(&self, t: f64) -> Result<(usize, f64), ProfileError> {
        if t.is_nan() || t < -BOUNDARY_EPS {
            return Err(ProfileError::NegativeTime(t));
        }
        let t = t.max(0.0);
        let (local, cycle_start) = if self.repeat {
            let k = ((t + BOUNDARY_EPS) / self.period).floor();
            ((t - k * self.period).max(0.0), k * self.period)
        } else {
            if t >= self.period - BOUNDARY_EPS {
                return Err(ProfileError::BeyondHorizon { t, end: self.period });
            }
            (t, 0.0)
        };
        // Last segment whose start is at or before local time (with snapping).
        let idx = self.starts.partition_point(|&s| s <= local + BOUNDARY_EPS).saturating_sub(1);
        Ok((idx, cycle_start))
    }

    pub fn current_at(&self, t: f64) -> Result<f64, ProfileError> {
        Ok(self.segment_at(t)?.0)
    }

    /// Next segment boundary strictly after `t`, or the profile end.
    pub fn next_change_after(&self, t: f64) -> Result<f64, ProfileError> {
        if let Some(end) = self.horizon() {
            if t >= end - BOUNDARY_EPS {
                if t <= end + BOUNDARY_EPS {
                    return Ok(end);
                }
                return Err(ProfileError::BeyondHorizon { t, end });
            }
        }
        Ok(self.segment_at(t)?.1)
    }

    /// True when the current changes value at `t`.
    pub fn load_changes_at(&self, t: f64) -> bool {
        if t <= BOUNDARY_EPS {
            return false;
        }
        let (Ok(before), Ok(after)) = (self.current_at(t - 10.0 * BOUNDARY_EPS), self.current_at(t)) else {
            return false;
        };
        if before == after {
            return false;
        }
        // Only a genuine boundary counts; both lookups can disagree only near one.
        matches!(self.segment_at(t - 10.0 * BOUNDARY_EPS), Ok((_, end)) if (end - t).abs() <= 10.0 * BOUNDARY_EPS)
    }

    /// Constant-current pieces covering [t0, t1), split at segment boundaries.
    pub fn pieces(&self, t0: f64, t1: f64) -> Result<Vec<(f64, f64, f64)>, ProfileError> {
        let mut out = Vec::new();
        let mut t = t0;
        while t < t1 - BOUNDARY_EPS {
            let (current, end) = self.segment_at(t)?;
            let end = if end >= t1 - BOUNDARY_EPS { t1 } else { end };
            out.push((t, end, current));
            t = end;
        }
        Ok(out)
    }

    /// Text form: `#repeat=true|false` then one `duration,current` line per segment.
    pub fn render(&self) -> String {
        let mut out = format!("#repeat={}\n", self.repeat);
        for s in &self.segments {
            let _ = writeln!(out, "{},{}", fmt_decimal(s.duration), fmt_decimal(s.current));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ProfileError> {
        let mut repeat = None;
        let mut segments = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("repeat=") {
                    repeat = Some(match v.trim() {
                        "true" => true,
                        "false" => false,
                        other => {
                            return Err(ProfileError::Parse { line: i + 1, msg: format!("bad repeat flag '{other}'") })
                        }
                    });
                }
                continue;
            }
            let (d, c) = line
                .split_once(',')
                .ok_or_else(|| ProfileError::Parse { line: i + 1, msg: "expected 'duration,current'".into() })?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| ProfileError::Parse { line: i + 1, msg: format!("'{}': {e}", s.trim()) })
            };
            segments.push((num(d)?, num(c)?));
        }
        // Headerless files are plain finite `duration,current` lists.
        Self::new(segments, repeat.unwrap_or(false))
    }
}

/// Shortest round-trip decimal with at least one fractional digit.
fn fmt_decimal(x: f64) -> String {
    let s = format!("{x}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Benchmark {
    Cl250,
    Cl500,
    ClAlt,
    Ils250,
    Ils500,
    IlsAlt,
    Ill250,
    Ill500,
}

impl Benchmark {
    pub const ALL: [Benchmark; 8] = [
        Benchmark::Cl250,
        Benchmark::Cl500,
        Benchmark::ClAlt,
        Benchmark::Ils250,
        Benchmark::Ils500,
        Benchmark::IlsAlt,
        Benchmark::Ill250,
        Benchmark::Ill500,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Cl250 => "CL_250",
            Benchmark::Cl500 => "CL_500",
            Benchmark::ClAlt => "CL_alt",
            Benchmark::Ils250 => "ILs_250",
            Benchmark::Ils500 => "ILs_500",
            Benchmark::IlsAlt => "ILs_alt",
            Benchmark::Ill250 => "ILl_250",
            Benchmark::Ill500 => "ILl_500",
        }
    }

    /// Jobs last one minute; short idles one minute, long idles two.
    pub fn profile(self) -> LoadProfile {
        let segs: Vec<(f64, f64)> = match self {
            Benchmark::Cl250 => vec![(1.0, 0.25)],
            Benchmark::Cl500 => vec![(1.0, 0.5)],
            Benchmark::ClAlt => vec![(1.0, 0.25), (1.0, 0.5)],
            Benchmark::Ils250 => vec![(1.0, 0.25), (1.0, 0.0)],
            Benchmark::Ils500 => vec![(1.0, 0.5), (1.0, 0.0)],
            // The 0.5 A job comes first in the alternating idle benchmark.
            Benchmark::IlsAlt => vec![(1.0, 0.5), (1.0, 0.0), (1.0, 0.25), (1.0, 0.0)],
            Benchmark::Ill250 => vec![(1.0, 0.25), (2.0, 0.0)],
            Benchmark::Ill500 => vec![(1.0, 0.5), (2.0, 0.0)],
        };
        LoadProfile::new(segs, true).expect("benchmark layouts are valid")
    }
}

impl FromStr for Benchmark {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ProfileError::UnknownBenchmark(s.to_string()))
    }
}

pub fn make_benchmark(name: &str) -> Result<LoadProfile, ProfileError> {
    Ok(name.parse::<Benchmark>()?.profile())
}

/// One-dimensional sampling distribution for amplitudes or durations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Triangular { min: f64, max: f64, mode: f64 },
    Uniform { min: f64, max: f64 },
    Point(f64),
}

impl Dist {
    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Triangular { min, max, mode } => (min + max + mode) / 3.0,
            Dist::Uniform { min, max } => 0.5 * (min + max),
            Dist::Point(v) => v,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Dist::Triangular { min: a, max: b, mode: c } => (a * a + b * b + c * c - a * b - a * c - b * c) / 18.0,
            Dist::Uniform { min, max } => (max - min).powi(2) / 12.0,
            Dist::Point(_) => 0.0,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            Dist::Triangular { min, max, .. } | Dist::Uniform { min, max } => (min, max),
            Dist::Point(v) => (v, v),
        }
    }

    fn validate(&self, what: &str) -> Result<(), ProfileError> {
        let ok = match *self {
            Dist::Triangular { min, max, mode } => min < max && (min..=max).contains(&mode),
            Dist::Uniform { min, max } => min < max,
            Dist::Point(v) => v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ProfileError::InvalidModel(format!("{what} distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Triangular { min, max, mode } => {
                Triangular::new(min, max, mode).expect("validated triangular").sample(rng)
            }
            Dist::Uniform { min, max } => Uniform::new(min, max).expect("validated uniform").sample(rng),
            Dist::Point(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticLoadModel {
    pub amplitude: Dist,
    pub duration: Dist,
    pub load_prob: f64,
    pub seed: u64,
    /// Sampled durations are rounded to this grid (minutes); 0 disables rounding.
    pub quantum: f64,
}

impl Default for StochasticLoadModel {
    fn default() -> Self {
        Self {
            amplitude: Dist::Triangular { min: 0.1, max: 0.75, mode: 0.425 },
            duration: Dist::Triangular { min: 0.1, max: 5.0, mode: 0.5 },
            load_prob: 0.5,
            seed: 0,
            quantum: 0.01,
        }
    }
}

impl StochasticLoadModel {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Variant with the amplitude mode moved to `mode` amperes (R100 … R750 families).
    pub fn with_amplitude_mode(mut self, mode: f64) -> Self {
        if let Dist::Triangular { min, max, .. } = self.amplitude {
            self.amplitude = Dist::Triangular { min, max, mode };
        }
        self
    }

    /// Named amplitude families: `R100`, `R250`, `R500`, `R750`.
    pub fn named(name: &str) -> Result<Self, ProfileError> {
        let mode = match name.to_ascii_uppercase().as_str() {
            "R100" => 0.1,
            "R250" => 0.25,
            "R500" => 0.5,
            "R750" => 0.75,
            "DEFAULT" => return Ok(Self::default()),
            _ => return Err(ProfileError::InvalidModel(format!("unknown load family '{name}'"))),
        };
        Ok(Self::default().with_amplitude_mode(mode))
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        self.amplitude.validate("amplitude")?;
        self.duration.validate("duration")?;
        if !(0.0..=1.0).contains(&self.load_prob) {
            return Err(ProfileError::InvalidModel(format!("load_prob {} outside [0, 1]", self.load_prob)));
        }
        if self.amplitude.support().0 < 0.0 {
            return Err(ProfileError::InvalidModel("negative amplitudes".into()));
        }
        if self.duration.support().0 <= 0.0 && self.quantum <= 0.0 {
            return Err(ProfileError::InvalidModel("durations must be positive".into()));
        }
        if !(self.quantum >= 0.0 && self.quantum.is_finite()) {
            return Err(ProfileError::InvalidModel(format!("quantum {}", self.quantum)));
        }
        Ok(())
    }
}

/// Generator for a given seed and stream. Streams let callers split one seed across tasks.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws periods until `horizon` is covered, truncating the last one to end at `horizon`.
/// Each period is load with probability `load_prob`; adjacent equal currents merge.
pub fn sample_profile(model: &StochasticLoadModel, horizon: f64) -> Result<LoadProfile, ProfileError> {
    model.validate()?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(ProfileError::InvalidModel(format!("horizon {horizon} must be positive")));
    }
    let mut rng = seeded_rng(model.seed, 0);
    let mut draw = || {
        let is_load = rng.random_bool(model.load_prob);
        let current = if is_load { model.amplitude.sample(&mut rng) } else { 0.0 };
        (current, model.duration.sample(&mut rng))
    };
    let mut raw: Vec<(f64, f64)> = Vec::new();
    if model.quantum > 0.0 {
        // Whole-tick accounting keeps the total exactly on the grid.
        let per_minute = 1.0 / model.quantum;
        let to_minutes = |ticks: i64| {
            if (per_minute - per_minute.round()).abs() < 1e-9 {
                ticks as f64 / per_minute.round()
            } else {
                ticks as f64 * model.quantum
            }
        };
        let horizon_ticks = ((horizon / model.quantum).ceil() as i64).max(1);
        let mut total = 0i64;
        let mut ticks_raw: Vec<(i64, f64)> = Vec::new();
        while total < horizon_ticks {
            let (current, d) = draw();
            let ticks = ((d / model.quantum).round() as i64).max(1).min(horizon_ticks - total);
            total += ticks;
            match ticks_raw.last_mut() {
                Some(last) if last.1 == current => last.0 += ticks,
                _ => ticks_raw.push((ticks, current)),
            }
        }
        raw.extend(ticks_raw.into_iter().map(|(t, c)| (to_minutes(t), c)));
    } else {
        let mut total = 0.0;
        while total < horizon {
            let (current, d) = draw();
            let d = d.min(horizon - total);
            total += d;
            match raw.last_mut() {
                Some(last) if last.1 == current => last.0 += d,
                _ => raw.push((d, current)),
            }
        }
    }
    LoadProfile::new(raw, false)
}

//! Signal-pair spectrum environments.
//!
//! An [`EnvSpec`] is a population model: integer ranges for the number of
//! interacting signal pairs and for each pair's width, period, duty cycle,
//! lower frequency and start time. [`sample_environment`] draws a concrete
//! [`EnvironmentInstance`] whose hidden state evolves deterministically,
//! optionally with mid-episode re-draws (non-stationary mode).
//!
//! A pair occupies only its two endpoint bands, `freq_lo` and
//! `freq_lo + width - 1`. Once started, the lower band is active for the
//! first `duty_cycle` steps of each period and the upper band for the rest,
//! so exactly one of the two is active at every step.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_N_BANDS: usize = 20;
pub const DEFAULT_EPISODE_LEN: usize = 100;

const CHANGE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Inclusive integer range `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: usize) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: usize) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// Number of integers in the range (0 when `lo > hi`).
    pub fn len(&self) -> usize {
        if self.hi < self.lo {
            0
        } else {
            self.hi - self.lo + 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.lo..=self.hi)
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }

    /// Smallest range covering both.
    pub fn union(&self, other: &IntRange) -> IntRange {
        IntRange::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }
}

impl fmt::Display for IntRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "[{}, {}]", self.lo, self.hi)
        }
    }
}

/// Placement rule for the lower band of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqSpec {
    /// Uniform over every placement that keeps the pair inside the spectrum.
    Random,
    Range(IntRange),
}

impl FreqSpec {
    /// Feasible lower-band indices for a pair of the given width.
    pub fn placements(&self, width: usize, n_bands: usize) -> IntRange {
        let max_lo = n_bands.saturating_sub(width);
        match self {
            FreqSpec::Random => IntRange::new(0, max_lo),
            FreqSpec::Range(r) => IntRange::new(r.lo, r.hi.min(max_lo)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub number: IntRange,
    pub width: IntRange,
    pub period: IntRange,
    pub duty_cycle: IntRange,
    pub freq: FreqSpec,
    pub start: IntRange,
    pub n_bands: usize,
    pub n_classes: usize,
    pub change_prob: f64,
    /// Optional per-class period ranges (multi-class mode). Empty means every
    /// class uses `period`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_periods: Vec<IntRange>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        presets::spec_a()
    }
}

/// One validation failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecViolation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl EnvSpec {
    pub fn is_stationary(&self) -> bool {
        self.change_prob == 0.0
    }

    pub fn period_for_class(&self, class_id: u8) -> IntRange {
        if self.class_periods.is_empty() || class_id == 0 {
            self.period
        } else {
            self.class_periods[(class_id as usize - 1).min(self.class_periods.len() - 1)]
        }
    }

    /// Every period range a pair can draw from.
    fn period_ranges(&self) -> Vec<IntRange> {
        if self.class_periods.is_empty() {
            vec![self.period]
        } else {
            self.class_periods.clone()
        }
    }

    /// Checks every structural invariant; an empty list means the spec is usable.
    pub fn validate(&self) -> Vec<SpecViolation> {
        let mut out = Vec::new();
        let mut push = |field: &'static str, message: String| out.push(SpecViolation { field, message });

        let ranges: [(&'static str, IntRange); 5] = [
            ("number", self.number),
            ("width", self.width),
            ("period", self.period),
            ("duty_cycle", self.duty_cycle),
            ("start", self.start),
        ];
        for (name, r) in ranges {
            if r.lo > r.hi {
                push(name, format!("range lo {} exceeds hi {}", r.lo, r.hi));
            }
        }
        if let FreqSpec::Range(r) = self.freq {
            if r.lo > r.hi {
                push("freq", format!("range lo {} exceeds hi {}", r.lo, r.hi));
            }
            if r.hi + self.width.hi > self.n_bands {
                push(
                    "freq",
                    format!(
                        "freq {} with width {} leaves the {}-band spectrum",
                        r.hi, self.width.hi, self.n_bands
                    ),
                );
            }
        }
        if self.n_bands == 0 {
            push("n_bands", "must be at least 1".into());
        }
        if self.n_classes == 0 {
            push("n_classes", "must be at least 1".into());
        }
        if self.n_classes > u8::MAX as usize - 1 {
            push("n_classes", "at most 254 classes".into());
        }
        if self.width.lo < 2 {
            push("width", "a pair spans at least 2 bands".into());
        }
        if self.width.hi > self.n_bands {
            push(
                "width",
                format!("width {} exceeds n_bands {}", self.width.hi, self.n_bands),
            );
        }
        if self.duty_cycle.lo < 1 {
            push("duty_cycle", "must be at least 1".into());
        }
        for p in self.period_ranges() {
            if p.lo > p.hi {
                push("period", format!("range lo {} exceeds hi {}", p.lo, p.hi));
            }
            if self.duty_cycle.lo >= p.lo {
                push(
                    "duty_cycle",
                    "duty_cycle must be < period for all feasible draws".into(),
                );
            }
        }
        if !self.class_periods.is_empty() && self.class_periods.len() != self.n_classes {
            push(
                "class_periods",
                format!(
                    "{} entries for {} classes",
                    self.class_periods.len(),
                    self.n_classes
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.change_prob) || self.change_prob.is_nan() {
            push("change_prob", format!("{} is not a probability", self.change_prob));
        }
        out
    }

    pub fn validated(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(v))
        }
    }

    /// Parses the `key = value` spec file format.
    ///
    /// Values are integers, `[lo, hi]` pairs, floats (`change_prob`) or the
    /// literal `random` (`freq`). `#` starts a comment. `n_bands`,
    /// `n_classes` and `change_prob` default to 20, 1 and 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut number = None;
        let mut width = None;
        let mut period = None;
        let mut duty = None;
        let mut freq = None;
        let mut start = None;
        let mut n_bands = DEFAULT_N_BANDS;
        let mut n_classes = 1;
        let mut change_prob = 0.0;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::SpecParse { line: line_no, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            match key {
                "number" => number = Some(parse_range(value).map_err(err)?),
                "width" => width = Some(parse_range(value).map_err(err)?),
                "period" => period = Some(parse_range(value).map_err(err)?),
                "duty_cycle" => duty = Some(parse_range(value).map_err(err)?),
                "start" => start = Some(parse_range(value).map_err(err)?),
                "freq" => {
                    freq = Some(if value.eq_ignore_ascii_case("random") || value.eq_ignore_ascii_case("rand") {
                        FreqSpec::Random
                    } else {
                        FreqSpec::Range(parse_range(value).map_err(err)?)
                    })
                }
                "n_bands" => n_bands = parse_scalar(value).map_err(err)?,
                "n_classes" => n_classes = parse_scalar(value).map_err(err)?,
                "change_prob" => {
                    change_prob = value
                        .parse::<f64>()
                        .map_err(|e| err(format!("change_prob: {e}")))?
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |name: &str| Error::SpecParse {
            line: 0,
            message: format!("missing key `{name}`"),
        };
        let spec = EnvSpec {
            number: number.ok_or_else(|| missing("number"))?,
            width: width.ok_or_else(|| missing("width"))?,
            period: period.ok_or_else(|| missing("period"))?,
            duty_cycle: duty.ok_or_else(|| missing("duty_cycle"))?,
            freq: freq.ok_or_else(|| missing("freq"))?,
            start: start.ok_or_else(|| missing("start"))?,
            n_bands,
            n_classes,
            change_prob,
            class_periods: Vec::new(),
        };
        spec.validated()?;
        Ok(spec)
    }

    /// Renders the spec in the file format accepted by [`EnvSpec::parse`].
    pub fn to_file_string(&self) -> String {
        let freq = match self.freq {
            FreqSpec::Random => "random".to_string(),
            FreqSpec::Range(r) => range_literal(r),
        };
        format!(
            "number = {}\nwidth = {}\nperiod = {}\nduty_cycle = {}\nfreq = {}\nstart = {}\nn_bands = {}\nn_classes = {}\nchange_prob = {}\n",
            range_literal(self.number),
            range_literal(self.width),
            range_literal(self.period),
            range_literal(self.duty_cycle),
            freq,
            range_literal(self.start),
            self.n_bands,
            self.n_classes,
            self.change_prob
        )
    }
}

fn range_literal(r: IntRange) -> String {
    if r.lo == r.hi {
        r.lo.to_string()
    } else {
        format!("[{}, {}]", r.lo, r.hi)
    }
}

fn parse_scalar(value: &str) -> std::result::Result<usize, String> {
    value
        .parse::<usize>()
        .map_err(|e| format!("`{value}`: {e}"))
}

fn parse_range(value: &str) -> std::result::Result<IntRange, String> {
    if let Some(inner) = value.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| format!("unterminated range `{value}`"))?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(format!("range needs exactly two bounds, got `{value}`"));
        }
        Ok(IntRange::new(parse_scalar(parts[0])?, parse_scalar(parts[1])?))
    } else {
        parse_scalar(value).map(IntRange::fixed)
    }
}

/// Concrete parameters of one interacting pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignalPair {
    pub freq_lo: usize,
    pub width: usize,
    pub period: usize,
    pub duty_cycle: usize,
    pub start: usize,
    pub class_id: u8,
}

impl SignalPair {
    pub fn freq_hi(&self) -> usize {
        self.freq_lo + self.width - 1
    }

    /// Band active at `t`, or `None` before the pair starts.
    pub fn active_band(&self, t: usize) -> Option<usize> {
        if t < self.start {
            return None;
        }
        let phase = (t - self.start) % self.period;
        Some(if phase < self.duty_cycle {
            self.freq_lo
        } else {
            self.freq_hi()
        })
    }

    pub fn is_active(&self, t: usize, band: usize) -> bool {
        self.active_band(t) == Some(band)
    }

    pub fn covers(&self, band: usize) -> bool {
        band == self.freq_lo || band == self.freq_hi()
    }
}

/// Noiseless (by default) single-band detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Observation {
    /// 1 when a signal is present at the sampled band.
    pub detection: u8,
    /// Class of the detected signal, 0 when none. Equals `detection` in
    /// single-class mode.
    pub class_id: u8,
}

impl Observation {
    pub fn from_label(label: u8) -> Self {
        Self {
            detection: u8::from(label > 0),
            class_id: label,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }
}

/// Anything that can serve as an episode's hidden world: simulated
/// instances, or stored full-state grids replayed as scripts.
pub trait Environment {
    fn n_bands(&self) -> usize;
    fn n_classes(&self) -> usize;
    /// Called once at the top of every step before truth or observations are read.
    fn begin_step(&mut self, _t: usize) {}
    /// Per-band class labels at `t` (0 = inactive).
    fn truth(&self, t: usize) -> Vec<u8>;
    fn observe(&mut self, t: usize, band: usize) -> Result<Observation>;
}

#[derive(Clone, Debug)]
pub struct EnvironmentInstance {
    pub spec: EnvSpec,
    pub pairs: Vec<SignalPair>,
    pub seed: u64,
    change_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    noise_prob: f64,
    redraws: usize,
}

/// Draws a concrete environment; identical `(spec, seed)` give identical instances.
pub fn sample_environment(spec: &EnvSpec, seed: u64) -> Result<EnvironmentInstance> {
    spec.validated()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.number.sample(&mut rng);
    let pairs = (0..n).map(|_| draw_pair(spec, &mut rng)).collect();
    let mut change_rng = ChaCha8Rng::seed_from_u64(seed);
    change_rng.set_stream(CHANGE_STREAM);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(NOISE_STREAM);
    Ok(EnvironmentInstance {
        spec: spec.clone(),
        pairs,
        seed,
        change_rng,
        noise_rng,
        noise_prob: 0.0,
        redraws: 0,
    })
}

fn draw_pair<R: Rng>(spec: &EnvSpec, rng: &mut R) -> SignalPair {
    let width = spec.width.sample(rng);
    let class_id = if spec.n_classes > 1 {
        rng.gen_range(1..=spec.n_classes) as u8
    } else {
        1
    };
    let (freq_lo, period, duty_cycle) = draw_dynamics(spec, width, class_id, rng);
    let start = spec.start.sample(rng);
    SignalPair {
        freq_lo,
        width,
        period,
        duty_cycle,
        start,
        class_id,
    }
}

/// Draws `(freq_lo, period, duty_cycle)`; the duty range is truncated below
/// the drawn period.
fn draw_dynamics<R: Rng>(spec: &EnvSpec, width: usize, class_id: u8, rng: &mut R) -> (usize, usize, usize) {
    let period = spec.period_for_class(class_id).sample(rng);
    let duty = IntRange::new(spec.duty_cycle.lo, spec.duty_cycle.hi.min(period - 1)).sample(rng);
    let freq_lo = spec.freq.placements(width, spec.n_bands).sample(rng);
    (freq_lo, period, duty)
}

impl EnvironmentInstance {
    /// Builds an instance from explicit pairs (tests, scripted scenarios).
    pub fn from_pairs(spec: &EnvSpec, pairs: Vec<SignalPair>, seed: u64) -> Self {
        let mut change_rng = ChaCha8Rng::seed_from_u64(seed);
        change_rng.set_stream(CHANGE_STREAM);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(NOISE_STREAM);
        Self {
            spec: spec.clone(),
            pairs,
            seed,
            change_rng,
            noise_rng,
            noise_prob: 0.0,
            redraws: 0,
        }
    }

    /// Flips each observation with probability `p`. Defaults to 0 (noiseless).
    pub fn with_detection_noise(mut self, p: f64) -> Self {
        self.noise_prob = p;
        self
    }

    pub fn n_bands(&self) -> usize {
        self.spec.n_bands
    }

    /// Number of mid-episode re-draws performed so far.
    pub fn redraws(&self) -> usize {
        self.redraws
    }

    /// Per-band class labels at `t`; overlapping pairs OR their activity and
    /// the lowest-index pair names the class.
    pub fn labels_at(&self, t: usize) -> Vec<u8> {
        let mut row = vec![0u8; self.spec.n_bands];
        for p in &self.pairs {
            if let Some(b) = p.active_band(t) {
                if row[b] == 0 {
                    row[b] = p.class_id;
                }
            }
        }
        row
    }

    pub fn state_at(&self, t: usize) -> BandVector {
        let row = self.labels_at(t);
        if self.spec.n_classes > 1 {
            BandVector::Labels(row)
        } else {
            BandVector::Binary(row)
        }
    }

    /// Non-stationary dynamics: each pair independently re-draws its
    /// frequency, period and duty cycle with probability `change_prob` and
    /// restarts its phase at `t`. Returns the number of re-draws.
    pub fn advance_nonstationary(&mut self, t: usize) -> usize {
        if self.spec.change_prob <= 0.0 {
            return 0;
        }
        let mut n = 0;
        for i in 0..self.pairs.len() {
            if self.change_rng.gen_bool(self.spec.change_prob) {
                let p = self.pairs[i];
                let (freq_lo, period, duty_cycle) =
                    draw_dynamics(&self.spec, p.width, p.class_id, &mut self.change_rng);
                self.pairs[i] = SignalPair {
                    freq_lo,
                    period,
                    duty_cycle,
                    start: t,
                    ..p
                };
                n += 1;
            }
        }
        self.redraws += n;
        n
    }

    pub fn observe(&mut self, t: usize, band: usize) -> Result<Observation> {
        if band >= self.spec.n_bands {
            return Err(Error::BandOutOfRange {
                band,
                n_bands: self.spec.n_bands,
            });
        }
        let mut label = 0u8;
        for p in &self.pairs {
            if p.is_active(t, band) {
                label = p.class_id;
                break;
            }
        }
        if self.noise_prob > 0.0 && self.noise_rng.gen_bool(self.noise_prob) {
            label = if label > 0 { 0 } else { 1 };
        }
        Ok(Observation::from_label(label))
    }

    /// Full truth grid for `t_steps` steps, advancing non-stationary dynamics.
    pub fn truth_grid(&mut self, t_steps: usize) -> LabelGrid {
        let rows = (0..t_steps)
            .map(|t| {
                self.advance_nonstationary(t);
                self.labels_at(t)
            })
            .collect();
        LabelGrid {
            n_bands: self.spec.n_bands,
            rows,
        }
    }
}

impl Environment for EnvironmentInstance {
    fn n_bands(&self) -> usize {
        self.spec.n_bands
    }

    fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    fn begin_step(&mut self, t: usize) {
        self.advance_nonstationary(t);
    }

    fn truth(&self, t: usize) -> Vec<u8> {
        self.labels_at(t)
    }

    fn observe(&mut self, t: usize, band: usize) -> Result<Observation> {
        EnvironmentInstance::observe(self, t, band)
    }
}

/// Per-band activity vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BandVector {
    /// Ground truth, values in {0, 1}.
    Binary(Vec<u8>),
    /// Multi-class ground truth, values are class ids (0 = none).
    Labels(Vec<u8>),
    /// Per-band signal probability.
    Probability(Vec<f64>),
    /// Row-major `n_bands x (n_classes + 1)` distributions; column 0 is "none".
    ClassDistribution { n_classes: usize, rows: Vec<f64> },
}

impl BandVector {
    pub fn zeros(n_bands: usize) -> Self {
        BandVector::Binary(vec![0; n_bands])
    }

    pub fn len(&self) -> usize {
        match self {
            BandVector::Binary(v) | BandVector::Labels(v) => v.len(),
            BandVector::Probability(v) => v.len(),
            BandVector::ClassDistribution { n_classes, rows } => rows.len() / (n_classes + 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Probability that band `b` holds a signal (objectness).
    pub fn objectness(&self, b: usize) -> f64 {
        match self {
            BandVector::Binary(v) | BandVector::Labels(v) => f64::from(u8::from(v[b] > 0)),
            BandVector::Probability(v) => v[b],
            BandVector::ClassDistribution { n_classes, rows } => 1.0 - rows[b * (n_classes + 1)],
        }
    }

    pub fn objectness_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|b| self.objectness(b)).collect()
    }

    /// Active mask after thresholding objectness.
    pub fn active_mask(&self, threshold: f64) -> Vec<bool> {
        (0..self.len()).map(|b| self.objectness(b) >= threshold).collect()
    }

    /// Class label per band: argmax for distributions, thresholded objectness
    /// for binary probabilities.
    pub fn labels(&self, threshold: f64) -> Vec<u8> {
        match self {
            BandVector::Binary(v) | BandVector::Labels(v) => v.clone(),
            BandVector::Probability(v) => v.iter().map(|&p| u8::from(p >= threshold)).collect(),
            BandVector::ClassDistribution { n_classes, rows } => rows
                .chunks(n_classes + 1)
                .map(|r| {
                    if 1.0 - r[0] < threshold {
                        0
                    } else {
                        let (k, _) = r[1..]
                            .iter()
                            .enumerate()
                            .fold((0, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                        (k + 1) as u8
                    }
                })
                .collect(),
        }
    }

    /// Checks the per-mode value invariants.
    pub fn is_well_formed(&self) -> bool {
        match self {
            BandVector::Binary(v) => v.iter().all(|&x| x <= 1),
            BandVector::Labels(_) => true,
            BandVector::Probability(v) => v.iter().all(|p| (0.0..=1.0).contains(p)),
            BandVector::ClassDistribution { n_classes, rows } => {
                rows.len() % (n_classes + 1) == 0
                    && rows
                        .chunks(n_classes + 1)
                        .all(|r| r.iter().all(|&p| p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-6)
            }
        }
    }
}

/// Full-state grid (`T x n_bands` class labels), the ground-truth export and
/// state-database format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub n_bands: usize,
    pub rows: Vec<Vec<u8>>,
}

impl LabelGrid {
    pub fn new(n_bands: usize) -> Self {
        Self {
            n_bands,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.rows.iter().flatten().all(|&v| v <= 1)
    }

    /// CSV with header `t,band_0,...,band_{n-1}`; cells are class ids.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for b in 0..self.n_bands {
            s.push_str(&format!(",band_{b}"));
        }
        s.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            s.push_str(&t.to_string());
            for v in row {
                s.push(',');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Config("empty grid CSV".into()))?;
        let n_bands = header.split(',').count().saturating_sub(1);
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != n_bands + 1 {
                return Err(Error::LengthMismatch {
                    expected: n_bands + 1,
                    got: cells.len(),
                });
            }
            let row = cells[1..]
                .iter()
                .map(|c| {
                    c.trim()
                        .parse::<u8>()
                        .map_err(|e| Error::Config(format!("grid row {i}: {e}")))
                })
                .collect::<Result<Vec<u8>>>()?;
            rows.push(row);
        }
        Ok(Self { n_bands, rows })
    }
}

/// Replays a stored grid as an environment with known truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedEnvironment {
    pub grid: LabelGrid,
    pub n_classes: usize,
}

impl ScriptedEnvironment {
    pub fn new(grid: LabelGrid, n_classes: usize) -> Self {
        Self { grid, n_classes }
    }
}

impl Environment for ScriptedEnvironment {
    fn n_bands(&self) -> usize {
        self.grid.n_bands
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Rows past the end of the grid are empty.
    fn truth(&self, t: usize) -> Vec<u8> {
        self.grid
            .rows
            .get(t)
            .cloned()
            .unwrap_or_else(|| vec![0; self.grid.n_bands])
    }

    fn observe(&mut self, t: usize, band: usize) -> Result<Observation> {
        if band >= self.grid.n_bands {
            return Err(Error::BandOutOfRange {
                band,
                n_bands: self.grid.n_bands,
            });
        }
        Ok(Observation::from_label(self.truth(t)[band]))
    }
}

/// Mixes a base seed and a stream index into an independent seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Environment specs used throughout the experiments.
pub mod presets {
    use super::*;

    fn base(number: IntRange, width: IntRange, period: IntRange, duty: IntRange, start: IntRange) -> EnvSpec {
        EnvSpec {
            number,
            width,
            period,
            duty_cycle: duty,
            freq: FreqSpec::Random,
            start,
            n_bands: DEFAULT_N_BANDS,
            n_classes: 1,
            change_prob: 0.0,
            class_periods: Vec::new(),
        }
    }

    pub fn spec_a() -> EnvSpec {
        base(IntRange::fixed(2), IntRange::fixed(2), IntRange::new(8, 9), IntRange::fixed(4), IntRange::fixed(0))
    }

    pub fn spec_b1() -> EnvSpec {
        base(IntRange::new(1, 2), IntRange::new(2, 3), IntRange::new(8, 9), IntRange::new(4, 5), IntRange::fixed(0))
    }

    pub fn spec_b2() -> EnvSpec {
        base(IntRange::new(1, 2), IntRange::new(2, 3), IntRange::new(8, 9), IntRange::new(4, 5), IntRange::new(0, 10))
    }

    pub fn spec_c1() -> EnvSpec {
        base(IntRange::new(1, 2), IntRange::fixed(3), IntRange::new(8, 9), IntRange::fixed(4), IntRange::fixed(0))
    }

    pub fn spec_c2() -> EnvSpec {
        base(IntRange::fixed(2), IntRange::fixed(2), IntRange::new(6, 9), IntRange::new(2, 5), IntRange::fixed(0))
    }

    pub fn spec_f1() -> EnvSpec {
        base(IntRange::fixed(1), IntRange::fixed(3), IntRange::new(8, 9), IntRange::fixed(4), IntRange::fixed(0))
    }

    pub fn spec_f2() -> EnvSpec {
        base(IntRange::fixed(2), IntRange::fixed(2), IntRange::new(8, 9), IntRange::fixed(7), IntRange::new(5, 10))
    }

    pub fn spec_f3() -> EnvSpec {
        base(IntRange::new(1, 2), IntRange::new(2, 3), IntRange::new(6, 7), IntRange::new(3, 4), IntRange::new(0, 5))
    }

    /// Stationary environment with a broad range of patterns and 1-3 pairs.
    pub fn stationary() -> EnvSpec {
        base(IntRange::new(1, 3), IntRange::new(2, 3), IntRange::new(6, 10), IntRange::new(2, 5), IntRange::fixed(0))
    }

    /// Narrower patterns that re-draw mid-episode.
    pub fn nonstationary() -> EnvSpec {
        EnvSpec {
            change_prob: 0.02,
            ..base(IntRange::new(1, 2), IntRange::fixed(2), IntRange::new(6, 8), IntRange::new(3, 4), IntRange::fixed(0))
        }
    }

    /// Wide-spectrum multi-class environment: 100 bands, three classes with
    /// distinct period ranges.
    pub fn multi_class() -> EnvSpec {
        EnvSpec {
            n_bands: 100,
            n_classes: 3,
            class_periods: vec![IntRange::new(4, 6), IntRange::new(8, 10), IntRange::new(12, 16)],
            ..base(IntRange::new(2, 6), IntRange::new(2, 4), IntRange::new(4, 16), IntRange::new(1, 3), IntRange::new(0, 10))
        }
    }

    /// Ranges wide enough to contain every field spec above; used as the
    /// estimation prior in the feedback loops.
    pub fn estimation_prior() -> EnvSpec {
        base(IntRange::new(1, 2), IntRange::new(2, 3), IntRange::new(6, 9), IntRange::new(2, 7), IntRange::new(0, 10))
    }

    pub fn by_name(name: &str) -> Option<EnvSpec> {
        Some(match name.to_ascii_lowercase().as_str() {
            "a" | "spec_a" | "speca" => spec_a(),
            "b1" | "spec_b1" | "specb1" => spec_b1(),
            "b2" | "spec_b2" | "specb2" => spec_b2(),
            "c1" | "spec_c1" | "specc1" => spec_c1(),
            "c2" | "spec_c2" | "specc2" => spec_c2(),
            "f1" | "spec_f1" | "specf1" => spec_f1(),
            "f2" | "spec_f2" | "specf2" => spec_f2(),
            "f3" | "spec_f3" | "specf3" => spec_f3(),
            "estimation_prior" => estimation_prior(),
            "stationary" => stationary(),
            "nonstationary" | "non_stationary" => nonstationary(),
            "multi" | "multi_class" => multi_class(),
            _ => return None,
        })
    }
}

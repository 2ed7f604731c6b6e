//! Hand-coded controllers and the hypothesis-elimination engine.
//!
//! Random and Scan predict with a persistent state: every band holds its
//! last observed value, starting inactive. Scan-and-Dwell and Expert track
//! candidate parameter tuples per discovered signal pair and discard every
//! tuple that contradicts an observation.
//!
//! Elimination has to stay sound when pairs overlap, because activity is
//! OR-ed and a detection does not say which pair produced it:
//!
//! - a non-detection removes, from every tracked pair and from the pool of
//!   undiscovered candidates, each tuple active at that position;
//! - a detection nobody explains opens a new tracked pair from the
//!   undiscovered candidates active there;
//! - a detection removes tuples only when exactly one tracked pair can
//!   explain it and no undiscovered pair could have produced it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env_sim::{BandVector, EnvSpec, IntRange, Observation, SignalPair};
use crate::error::{Error, Result};
use crate::harness::{Controller, History};

/// Default cap on enumerated tuples per pair.
pub const DEFAULT_PRIOR_CAP: u128 = 10_000_000;

/// Compact candidate parameter tuple for one signal pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairTuple {
    pub freq_lo: u16,
    pub width: u16,
    pub period: u16,
    pub duty_cycle: u16,
    pub start: u16,
}

impl PairTuple {
    #[inline]
    pub fn active_band(&self, t: usize) -> Option<usize> {
        let start = self.start as usize;
        if t < start {
            return None;
        }
        let phase = (t - start) % self.period as usize;
        Some(if phase < self.duty_cycle as usize {
            self.freq_lo as usize
        } else {
            (self.freq_lo + self.width - 1) as usize
        })
    }

    #[inline]
    pub fn is_active(&self, t: usize, band: usize) -> bool {
        self.active_band(t) == Some(band)
    }

    /// Whether the two tuples produce identical activity at every step from `t` on.
    pub fn future_equivalent(&self, other: &PairTuple, t: usize) -> bool {
        if self.freq_lo != other.freq_lo || self.width != other.width {
            return false;
        }
        let from = t.max(self.start as usize).max(other.start as usize);
        let horizon = from + lcm(self.period as usize, other.period as usize);
        (t..horizon).all(|s| self.active_band(s) == other.active_band(s))
    }
}

impl From<&SignalPair> for PairTuple {
    fn from(p: &SignalPair) -> Self {
        PairTuple {
            freq_lo: p.freq_lo as u16,
            width: p.width as u16,
            period: p.period as u16,
            duty_cycle: p.duty_cycle as u16,
            start: p.start as u16,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn duty_range(prior: &EnvSpec, period: usize) -> IntRange {
    IntRange::new(prior.duty_cycle.lo, prior.duty_cycle.hi.min(period - 1))
}

/// Number of tuples per pair the prior enumerates.
pub fn prior_size(prior: &EnvSpec) -> u128 {
    let placements: u128 = prior
        .width
        .iter()
        .map(|w| prior.freq.placements(w, prior.n_bands).len() as u128)
        .sum();
    let dynamics: u128 = prior
        .period
        .iter()
        .map(|p| duty_range(prior, p).len() as u128)
        .sum();
    placements * dynamics * prior.start.len() as u128
}

/// Every tuple allowed by the prior's ranges.
pub fn enumerate_prior(prior: &EnvSpec, cap: u128) -> Result<Vec<PairTuple>> {
    prior.validated()?;
    let size = prior_size(prior);
    if size > cap {
        return Err(Error::PriorTooLarge { size, cap });
    }
    let mut out = Vec::with_capacity(size as usize);
    for width in prior.width.iter() {
        for freq_lo in prior.freq.placements(width, prior.n_bands).iter() {
            for period in prior.period.iter() {
                for duty in duty_range(prior, period).iter() {
                    for start in prior.start.iter() {
                        out.push(PairTuple {
                            freq_lo: freq_lo as u16,
                            width: width as u16,
                            period: period as u16,
                            duty_cycle: duty as u16,
                            start: start as u16,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Candidate tuples of one discovered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedPair {
    pub candidates: Vec<PairTuple>,
    /// `(t, band)` of the latest detection this pair explained.
    pub last_detection: (usize, usize),
}

impl TrackedPair {
    pub fn is_singleton(&self) -> bool {
        self.candidates.len() == 1
    }

    /// Every surviving tuple predicts the same activity from `t` on.
    pub fn is_resolved(&self, t: usize) -> bool {
        let first = &self.candidates[0];
        self.candidates[1..].iter().all(|c| c.future_equivalent(first, t))
    }

    fn fraction_active(&self, t: usize, n_bands: usize) -> Vec<f64> {
        fraction_active(&self.candidates, t, n_bands)
    }
}

fn fraction_active(tuples: &[PairTuple], t: usize, n_bands: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_bands];
    for c in tuples {
        if let Some(b) = c.active_band(t) {
            counts[b] += 1;
        }
    }
    let n = tuples.len().max(1) as f64;
    counts.into_iter().map(|k| k as f64 / n).collect()
}

/// Per-band output of [`HypothesisSet::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisPrediction {
    /// Probability that the band is active.
    pub probability: Vec<f64>,
    /// `1 - |2p - 1|` of the detection probability.
    pub uncertainty: Vec<f64>,
    /// Expected fraction of candidate tuples a sample of the band removes.
    pub expected_elimination: Vec<f64>,
}

/// Surviving candidate tuples for every tracked pair, plus the candidates
/// still available to pairs that have not been detected yet.
#[derive(Clone, Debug)]
pub struct HypothesisSet {
    pub n_bands: usize,
    pub number: IntRange,
    pub tracked: Vec<TrackedPair>,
    pub undiscovered: Vec<PairTuple>,
    inconsistent: bool,
}

impl HypothesisSet {
    pub fn init(prior: &EnvSpec) -> Result<Self> {
        Self::init_with_cap(prior, DEFAULT_PRIOR_CAP)
    }

    pub fn init_with_cap(prior: &EnvSpec, cap: u128) -> Result<Self> {
        Ok(Self::from_tuples(prior, enumerate_prior(prior, cap)?))
    }

    /// Builds a fresh set from an already-enumerated prior.
    pub fn from_tuples(prior: &EnvSpec, tuples: Vec<PairTuple>) -> Self {
        Self {
            n_bands: prior.n_bands,
            number: prior.number,
            tracked: Vec::new(),
            undiscovered: tuples,
            inconsistent: false,
        }
    }

    pub fn is_inconsistent(&self) -> bool {
        self.inconsistent
    }

    /// Tuple counts per tracked pair.
    pub fn sizes(&self) -> Vec<usize> {
        self.tracked.iter().map(|p| p.candidates.len()).collect()
    }

    /// Candidate pair counts still compatible with what has been tracked.
    pub fn number_candidates(&self) -> IntRange {
        IntRange::new(self.number.lo.max(self.tracked.len()), self.number.hi)
    }

    /// Expected number of pairs not yet discovered, under a uniform prior
    /// on the pair count.
    pub fn expected_undiscovered(&self) -> f64 {
        let k = self.tracked.len();
        let c = self.number_candidates();
        if c.hi <= k {
            0.0
        } else {
            (c.lo + c.hi) as f64 / 2.0 - k as f64
        }
    }

    fn fail(&mut self) -> Result<()> {
        self.inconsistent = true;
        Err(Error::InconsistentPrior)
    }

    /// Removes every tuple that contradicts the observation at `(t, band)`.
    pub fn eliminate(&mut self, t: usize, band: usize, detection: bool) -> Result<()> {
        if self.inconsistent {
            return Err(Error::InconsistentPrior);
        }
        if band >= self.n_bands {
            return Err(Error::BandOutOfRange {
                band,
                n_bands: self.n_bands,
            });
        }
        if !detection {
            self.undiscovered.retain(|c| !c.is_active(t, band));
            for p in &mut self.tracked {
                p.candidates.retain(|c| !c.is_active(t, band));
            }
            if self.tracked.iter().any(|p| p.candidates.is_empty()) {
                return self.fail();
            }
            return Ok(());
        }

        let explainers: Vec<usize> = self
            .tracked
            .iter()
            .enumerate()
            .filter(|(_, p)| p.candidates.iter().any(|c| c.is_active(t, band)))
            .map(|(i, _)| i)
            .collect();
        match explainers.as_slice() {
            [] => {
                if self.tracked.len() >= self.number.hi {
                    return self.fail();
                }
                let candidates: Vec<PairTuple> = self
                    .undiscovered
                    .iter()
                    .copied()
                    .filter(|c| c.is_active(t, band))
                    .collect();
                if candidates.is_empty() {
                    return self.fail();
                }
                self.tracked.push(TrackedPair {
                    candidates,
                    last_detection: (t, band),
                });
            }
            &[only] => {
                let sole_source = self.tracked.len() >= self.number.hi
                    || !self.undiscovered.iter().any(|c| c.is_active(t, band));
                let p = &mut self.tracked[only];
                if sole_source {
                    p.candidates.retain(|c| c.is_active(t, band));
                }
                p.last_detection = (t, band);
            }
            many => {
                for &i in many {
                    self.tracked[i].last_detection = (t, band);
                }
            }
        }
        Ok(())
    }

    /// Per-band activity probability, uncertainty and expected elimination at `t`.
    ///
    /// Tracked pairs contribute the fraction of their tuples active at each
    /// band; undiscovered pairs contribute the fraction of still-consistent
    /// prior tuples, compounded over the expected number of missing pairs.
    /// Pairs combine as independent OR.
    pub fn predict(&self, t: usize) -> HypothesisPrediction {
        let n = self.n_bands;
        let fractions: Vec<Vec<f64>> = self.tracked.iter().map(|p| p.fraction_active(t, n)).collect();
        let missing = self.expected_undiscovered();
        let q = if missing > 0.0 && !self.undiscovered.is_empty() {
            fraction_active(&self.undiscovered, t, n)
        } else {
            vec![0.0; n]
        };
        let mut probability = Vec::with_capacity(n);
        let mut uncertainty = Vec::with_capacity(n);
        let mut expected_elimination = Vec::with_capacity(n);
        for b in 0..n {
            let p_und = 1.0 - (1.0 - q[b]).powf(missing);
            let p_none = fractions.iter().map(|f| 1.0 - f[b]).product::<f64>() * (1.0 - p_und);
            let p1 = 1.0 - p_none;
            probability.push(p1);
            uncertainty.push(1.0 - (2.0 * p1 - 1.0).abs());

            // A miss removes every tuple active here.
            let on_miss = fractions.iter().map(|f| f[b]).sum::<f64>() + q[b];
            // A hit prunes only when its source is unambiguous.
            let explainers: Vec<f64> = fractions.iter().map(|f| f[b]).filter(|&v| v > 0.0).collect();
            let on_hit = match (explainers.as_slice(), q[b] > 0.0) {
                ([], true) => 1.0 - q[b],
                ([only], false) => 1.0 - only,
                _ => 0.0,
            };
            expected_elimination.push(p_none * on_miss + p1 * on_hit);
        }
        HypothesisPrediction {
            probability,
            uncertainty,
            expected_elimination,
        }
    }
}

/// Last observed value per band.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PersistentState {
    pub last_obs: Vec<u8>,
    pub last_t: Vec<Option<usize>>,
    n_classes: usize,
}

impl PersistentState {
    pub fn new(n_bands: usize, n_classes: usize) -> Self {
        Self {
            last_obs: vec![0; n_bands],
            last_t: vec![None; n_bands],
            n_classes,
        }
    }

    pub fn update(&mut self, t: usize, band: usize, obs: Observation) {
        self.last_obs[band] = obs.class_id;
        self.last_t[band] = Some(t);
    }

    /// Bands never sampled are predicted inactive.
    pub fn predict(&self) -> BandVector {
        if self.n_classes > 1 {
            BandVector::Labels(self.last_obs.clone())
        } else {
            BandVector::Binary(self.last_obs.iter().map(|&v| u8::from(v > 0)).collect())
        }
    }
}

/// Free-function form of [`PersistentState::predict`].
pub fn persistent_predict(state: &PersistentState) -> BandVector {
    state.predict()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Scan,
    ScanDwell,
    Expert,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Scan => "scan",
            BaselineKind::ScanDwell => "scan_dwell",
            BaselineKind::Expert => "expert",
        }
    }

    pub fn needs_prior(&self) -> bool {
        matches!(self, BaselineKind::ScanDwell | BaselineKind::Expert)
    }
}

/// Sequential scan position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanState {
    next: usize,
}

impl ScanState {
    pub fn next_band(&mut self, n_bands: usize) -> usize {
        let b = self.next % n_bands;
        self.next = (b + 1) % n_bands;
        b
    }
}

/// Band choice of the two prior-free baselines.
pub fn baseline_select_band<R: Rng>(kind: BaselineKind, scan: &mut ScanState, n_bands: usize, rng: &mut R) -> usize {
    match kind {
        BaselineKind::Random => rng.gen_range(0..n_bands),
        _ => scan.next_band(n_bands),
    }
}

fn episode_rng(seed: u64, episode_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ episode_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Random or Scan band selection with persistent-state prediction.
#[derive(Clone, Debug)]
pub struct PersistentController {
    kind: BaselineKind,
    seed: u64,
    rng: ChaCha8Rng,
    scan: ScanState,
    state: PersistentState,
}

impl PersistentController {
    pub fn new(kind: BaselineKind, seed: u64) -> Self {
        assert!(!kind.needs_prior(), "{kind:?} needs a prior");
        Self {
            kind,
            seed,
            rng: episode_rng(seed, 0),
            scan: ScanState::default(),
            state: PersistentState::default(),
        }
    }
}

impl Controller for PersistentController {
    fn id(&self) -> String {
        self.kind.name().to_string()
    }

    fn reset(&mut self, n_bands: usize, n_classes: usize, episode_seed: u64) {
        self.rng = episode_rng(self.seed, episode_seed);
        self.scan = ScanState::default();
        self.state = PersistentState::new(n_bands, n_classes);
    }

    fn select_band(&mut self, history: &History) -> usize {
        baseline_select_band(self.kind, &mut self.scan, history.n_bands, &mut self.rng)
    }

    fn predict(&mut self, history: &History) -> BandVector {
        if let Some(&(band, obs)) = history.last() {
            self.state.update(history.len() - 1, band, obs);
        }
        self.state.predict()
    }
}

/// Scan-and-Dwell or Expert: hypothesis elimination against a given prior.
///
/// When the observations contradict the prior the controller falls back to
/// scanning with persistent-state prediction for the rest of the episode.
#[derive(Clone, Debug)]
pub struct HypothesisController {
    kind: BaselineKind,
    prior: EnvSpec,
    tuples: Arc<Vec<PairTuple>>,
    hyps: HypothesisSet,
    state: PersistentState,
    scan: ScanState,
    /// Consecutive dwell steps without shrinking, per tracked pair.
    stall: Vec<usize>,
    dwell_target: Option<usize>,
    fallback: bool,
}

impl HypothesisController {
    pub fn new(kind: BaselineKind, prior: &EnvSpec) -> Result<Self> {
        assert!(kind.needs_prior(), "{kind:?} does not use a prior");
        let tuples = Arc::new(enumerate_prior(prior, DEFAULT_PRIOR_CAP)?);
        let hyps = HypothesisSet::from_tuples(prior, tuples.to_vec());
        Ok(Self {
            kind,
            prior: prior.clone(),
            tuples,
            hyps,
            state: PersistentState::default(),
            scan: ScanState::default(),
            stall: Vec::new(),
            dwell_target: None,
            fallback: false,
        })
    }

    pub fn hypotheses(&self) -> &HypothesisSet {
        &self.hyps
    }

    pub fn in_fallback(&self) -> bool {
        self.fallback
    }

    /// Dwell budget before an unresolvable pair is left alone.
    fn stall_limit(&self) -> usize {
        2 * self.prior.period.hi
    }

    fn dwell_band(&self, t: usize) -> Option<(usize, usize)> {
        self.hyps
            .tracked
            .iter()
            .enumerate()
            .filter(|(i, p)| !p.is_resolved(t) && self.stall[*i] < self.stall_limit())
            .max_by_key(|(i, p)| (p.last_detection.0, *i))
            .map(|(i, p)| (i, p.last_detection.1))
    }
}

/// Band whose sample is expected to remove the largest share of the
/// remaining hypotheses; lowest index on ties.
pub fn expert_select(hyps: &HypothesisSet, t: usize) -> usize {
    let u = hyps.predict(t).expected_elimination;
    let mut best = 0;
    for (b, &v) in u.iter().enumerate() {
        if v > u[best] {
            best = b;
        }
    }
    best
}

impl Controller for HypothesisController {
    fn id(&self) -> String {
        self.kind.name().to_string()
    }

    fn reset(&mut self, n_bands: usize, n_classes: usize, _episode_seed: u64) {
        let mut prior = self.prior.clone();
        if prior.n_bands != n_bands {
            // The prior describes a different spectrum size; re-enumerate.
            prior.n_bands = n_bands;
            self.tuples = Arc::new(enumerate_prior(&prior, DEFAULT_PRIOR_CAP).unwrap_or_default());
            self.prior = prior;
        }
        self.hyps = HypothesisSet::from_tuples(&self.prior, self.tuples.to_vec());
        self.state = PersistentState::new(n_bands, n_classes);
        self.scan = ScanState::default();
        self.stall.clear();
        self.dwell_target = None;
        self.fallback = false;
    }

    fn select_band(&mut self, history: &History) -> usize {
        let t = history.len();
        if self.fallback {
            return self.scan.next_band(history.n_bands);
        }
        match self.kind {
            BaselineKind::Expert => expert_select(&self.hyps, t),
            _ => match self.dwell_band(t) {
                Some((pair, band)) => {
                    self.dwell_target = Some(pair);
                    band
                }
                None => {
                    self.dwell_target = None;
                    self.scan.next_band(history.n_bands)
                }
            },
        }
    }

    fn predict(&mut self, history: &History) -> BandVector {
        let Some(&(band, obs)) = history.last() else {
            return BandVector::zeros(history.n_bands);
        };
        let t = history.len() - 1;
        self.state.update(t, band, obs);
        if !self.fallback {
            let before = self.hyps.sizes();
            if self.hyps.eliminate(t, band, obs.detection > 0).is_err() {
                self.fallback = true;
            } else {
                let after = self.hyps.sizes();
                self.stall.resize(after.len(), 0);
                for i in 0..before.len() {
                    if after[i] < before[i] {
                        self.stall[i] = 0;
                    } else if self.dwell_target == Some(i) {
                        self.stall[i] += 1;
                    }
                }
            }
        }
        if self.fallback {
            self.state.predict()
        } else {
            BandVector::Probability(self.hyps.predict(t).probability)
        }
    }
}

/// Builds any of the four hand-coded controllers.
pub fn make_baseline(kind: BaselineKind, prior: Option<&EnvSpec>, seed: u64) -> Result<Box<dyn Controller + Send>> {
    Ok(match kind {
        BaselineKind::Random | BaselineKind::Scan => Box::new(PersistentController::new(kind, seed)),
        _ => {
            let prior = prior.ok_or_else(|| Error::Config(format!("{} needs a prior spec", kind.name())))?;
            Box::new(HypothesisController::new(kind, prior)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_sim::{presets, sample_environment, EnvironmentInstance, FreqSpec};
    use crate::harness::{run_episode, RewardKind};

    fn obs(d: u8) -> Observation {
        Observation::from_label(d)
    }

    #[test]
    fn persistent_state_rules() {
        let mut s = PersistentState::new(20, 1);
        assert_eq!(s.predict(), BandVector::Binary(vec![0; 20]));
        s.update(0, 3, obs(1));
        let mut expect = vec![0; 20];
        expect[3] = 1;
        assert_eq!(persistent_predict(&s), BandVector::Binary(expect.clone()));
        s.update(1, 7, obs(0));
        assert_eq!(s.predict(), BandVector::Binary(expect));
        s.update(2, 3, obs(0));
        assert_eq!(s.predict(), BandVector::Binary(vec![0; 20]));
    }

    #[test]
    fn scan_cycles_through_bands() {
        let mut scan = ScanState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq: Vec<usize> = (0..45)
            .map(|_| baseline_select_band(BaselineKind::Scan, &mut scan, 20, &mut rng))
            .collect();
        let expect: Vec<usize> = (0..45).map(|i| i % 20).collect();
        assert_eq!(seq, expect);
    }

    #[test]
    fn random_is_reproducible() {
        let run = || {
            let mut c = PersistentController::new(BaselineKind::Random, 42);
            c.reset(20, 1, 7);
            let h = History::new(20, 1);
            (0..50).map(|_| c.select_band(&h)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scan_misses_short_bursts() {
        // Period 10 with a single-step burst at band 5 that the scan never visits in phase.
        let spec = EnvSpec {
            number: IntRange::fixed(1),
            period: IntRange::fixed(10),
            duty_cycle: IntRange::fixed(9),
            ..presets::spec_a()
        };
        let pair = SignalPair {
            freq_lo: 4,
            width: 2,
            period: 10,
            duty_cycle: 9,
            start: 0,
            class_id: 1,
        };
        // Band 5 is active at t = 9, 19, 29, ...; scan reaches band 5 at t = 5, 25, 45, ...
        let mut env = EnvironmentInstance::from_pairs(&spec, vec![pair], 0);
        let mut c = PersistentController::new(BaselineKind::Scan, 0);
        let log = run_episode(&mut c, &mut env, 200, RewardKind::InIou, "burst", 0).unwrap();
        assert!(log.steps.iter().filter(|s| s.action == 5).all(|s| s.observation.detection == 0));
        assert!(log.steps.iter().any(|s| s.truth.objectness(5) == 1.0));
    }

    #[test]
    fn prior_sizes() {
        assert_eq!(prior_size(&presets::spec_a()), 38);
        assert_eq!(enumerate_prior(&presets::spec_a(), DEFAULT_PRIOR_CAP).unwrap().len(), 38);
        assert!(prior_size(&presets::spec_b1()) > prior_size(&presets::spec_a()));
        let degenerate = EnvSpec {
            period: IntRange::fixed(8),
            freq: FreqSpec::Range(IntRange::fixed(4)),
            ..presets::spec_a()
        };
        assert_eq!(enumerate_prior(&degenerate, DEFAULT_PRIOR_CAP).unwrap().len(), 1);
        assert!(matches!(
            HypothesisSet::init_with_cap(&presets::spec_b2(), 100),
            Err(Error::PriorTooLarge { .. })
        ));
    }

    #[test]
    fn first_detection_opens_pair_with_matching_tuples() {
        let mut h = HypothesisSet::init(&presets::spec_a()).unwrap();
        h.eliminate(0, 3, true).unwrap();
        assert_eq!(h.tracked.len(), 1);
        // Lower band 3 active at t=0 (both periods); band 3 as upper band needs phase >= 4, impossible at t=0.
        let survivors = &h.tracked[0].candidates;
        assert_eq!(survivors.len(), 2);
        assert!(survivors.iter().all(|c| c.freq_lo == 3));
    }

    #[test]
    fn two_disagreeing_tuples_give_half_probability() {
        let spec = presets::spec_a();
        let mut h = HypothesisSet::from_tuples(&spec, Vec::new());
        let a = PairTuple { freq_lo: 3, width: 2, period: 8, duty_cycle: 4, start: 0 };
        let b = PairTuple { period: 9, ..a };
        h.tracked.push(TrackedPair { candidates: vec![a, b], last_detection: (0, 3) });
        h.number = IntRange::fixed(1);
        // t = 8: period 8 restarts on band 3, period 9 is still on band 4.
        let p = h.predict(8);
        assert_eq!(p.probability[3], 0.5);
        assert_eq!(p.probability[4], 0.5);
        assert_eq!(p.uncertainty[3], 1.0);
        assert_eq!(p.probability[0], 0.0);
    }

    #[test]
    fn expert_breaks_ties_low_and_targets_ambiguity() {
        let spec = presets::spec_a();
        let mut h = HypothesisSet::from_tuples(&spec, Vec::new());
        h.number = IntRange::fixed(1);
        assert_eq!(expert_select(&h, 0), 0);
        let a = PairTuple { freq_lo: 10, width: 2, period: 8, duty_cycle: 4, start: 0 };
        let b = PairTuple { period: 9, ..a };
        h.tracked.push(TrackedPair { candidates: vec![a, b], last_detection: (0, 10) });
        assert_eq!(expert_select(&h, 8), 10);
    }

    #[test]
    fn inconsistent_observation_is_signalled() {
        let mut h = HypothesisSet::init(&presets::spec_a()).unwrap();
        h.eliminate(0, 3, true).unwrap();
        // Both candidates have band 3 active at t = 1.
        assert!(matches!(h.eliminate(1, 3, false), Err(Error::InconsistentPrior)));
        assert!(h.is_inconsistent());
    }

    #[test]
    fn scan_dwell_without_detections_behaves_as_scan() {
        let spec = EnvSpec {
            number: IntRange::fixed(0),
            ..presets::spec_a()
        };
        let mut env = EnvironmentInstance::from_pairs(&spec, Vec::new(), 0);
        let mut c = HypothesisController::new(BaselineKind::ScanDwell, &presets::spec_a()).unwrap();
        let log = run_episode(&mut c, &mut env, 45, RewardKind::InIou, "empty", 0).unwrap();
        let actions: Vec<usize> = log.steps.iter().map(|s| s.action).collect();
        assert_eq!(actions, (0..45).map(|i| i % 20).collect::<Vec<_>>());
    }

    #[test]
    fn scan_dwell_dwells_after_detection_until_resolved() {
        let spec = presets::spec_a();
        let mut env = sample_environment(&spec, 3).unwrap();
        let mut c = HypothesisController::new(BaselineKind::ScanDwell, &spec).unwrap();
        let log = run_episode(&mut c, &mut env, 100, RewardKind::InIou, "A", 3).unwrap();
        let first = log.steps.iter().position(|s| s.observation.detection == 1).unwrap();
        let band = log.steps[first].action;
        assert_eq!(log.steps[first + 1].action, band);
        assert!(!c.in_fallback());
    }

    #[test]
    fn singleton_set_predicts_exactly() {
        let spec = presets::spec_a();
        for seed in 0..50 {
            let mut env = sample_environment(&spec, seed).unwrap();
            let truth = env.clone().truth_grid(200);
            let mut c = HypothesisController::new(BaselineKind::Expert, &spec).unwrap();
            let log = run_episode(&mut c, &mut env, 200, RewardKind::InIou, "A", seed).unwrap();
            let h = c.hypotheses();
            if h.tracked.len() == 2 && h.tracked.iter().all(|p| p.is_resolved(200)) {
                for t in 200..260 {
                    let p = h.predict(t).probability;
                    let labels = env.labels_at(t);
                    for b in 0..20 {
                        assert_eq!(p[b] >= 0.5, labels[b] > 0, "seed {seed} t {t} b {b}");
                    }
                }
            }
            assert_eq!(log.steps.len(), truth.len());
        }
    }
}

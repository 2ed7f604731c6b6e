//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use specmon::baselines::{expert_select, HypothesisSet, PairTuple};
use specmon::env_sim::{sample_environment, EnvSpec, FreqSpec, IntRange, SignalPair};

/// A random spec that satisfies every structural invariant.
pub fn random_spec<R: Rng>(rng: &mut R) -> EnvSpec {
    let n_bands = rng.gen_range(3..=24);
    let w_lo = rng.gen_range(2..=n_bands.min(4));
    let w_hi = rng.gen_range(w_lo..=n_bands.min(w_lo + 2));
    let p_lo = rng.gen_range(2..=10);
    let p_hi = rng.gen_range(p_lo..=p_lo + 3);
    let d_lo = rng.gen_range(1..p_lo);
    let d_hi = rng.gen_range(d_lo..=p_hi);
    let s_lo = rng.gen_range(0..=5);
    let freq = if rng.gen_bool(0.5) {
        FreqSpec::Random
    } else {
        let max_lo = n_bands - w_hi;
        let lo = rng.gen_range(0..=max_lo);
        FreqSpec::Range(IntRange::new(lo, rng.gen_range(lo..=max_lo)))
    };
    let n_lo = rng.gen_range(1..=3);
    EnvSpec {
        number: IntRange::new(n_lo, rng.gen_range(n_lo..=3)),
        width: IntRange::new(w_lo, w_hi),
        period: IntRange::new(p_lo, p_hi),
        duty_cycle: IntRange::new(d_lo, d_hi),
        freq,
        start: IntRange::new(s_lo, s_lo + rng.gen_range(0..=5)),
        n_bands,
        n_classes: rng.gen_range(1..=2),
        change_prob: if rng.gen_bool(0.25) { 0.05 } else { 0.0 },
        class_periods: Vec::new(),
    }
}

/// Straight-line re-statement of the activity rule for one pair.
pub fn oracle_band(p: &SignalPair, t: usize) -> Option<usize> {
    if t < p.start {
        None
    } else if (t - p.start) % p.period < p.duty_cycle {
        Some(p.freq_lo)
    } else {
        Some(p.freq_lo + p.width - 1)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Invariant violations of one `(spec, seed)` draw over `t_steps` steps.
pub fn simulator_violations(spec: &EnvSpec, seed: u64, t_steps: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut env = sample_environment(spec, seed).expect("valid spec");
    let mut twin = sample_environment(spec, seed).expect("valid spec");
    if env.pairs != twin.pairs {
        out.push("pairs differ between identical draws".into());
    }
    let grid = env.clone().truth_grid(t_steps);
    if grid != twin.truth_grid(t_steps) {
        out.push("truth grids differ between identical draws".into());
    }
    for p in &env.pairs {
        let drawn_period = spec.period_for_class(p.class_id);
        if p.duty_cycle >= p.period || p.duty_cycle < 1 || !drawn_period.contains(p.period) {
            out.push(format!("pair {p:?} has an infeasible period/duty"));
        }
        if p.freq_lo + p.width > spec.n_bands || !spec.width.contains(p.width) || !spec.start.contains(p.start) {
            out.push(format!("pair {p:?} is outside the spec"));
        }
    }
    if !(spec.number.contains(env.pairs.len())) {
        out.push(format!("{} pairs outside {}", env.pairs.len(), spec.number));
    }
    let min_start = env.pairs.iter().map(|p| p.start).min().unwrap_or(usize::MAX);
    for t in 0..t_steps {
        env.advance_nonstationary(t);
        let row = env.labels_at(t);
        if row != grid.rows[t] {
            out.push(format!("t={t}: stepping and truth_grid disagree"));
        }
        let mut expect = vec![0u8; spec.n_bands];
        for p in &env.pairs {
            if let Some(b) = oracle_band(p, t) {
                if expect[b] == 0 {
                    expect[b] = p.class_id;
                }
                let lo_on = t >= p.start && (t - p.start) % p.period < p.duty_cycle;
                let hi_on = t >= p.start && !lo_on;
                if lo_on == hi_on || row[p.freq_lo] == 0 && row[p.freq_lo + p.width - 1] == 0 {
                    out.push(format!("t={t}: pair {p:?} is not exclusive"));
                }
            }
        }
        if row != expect {
            out.push(format!("t={t}: row {row:?} != oracle {expect:?}"));
        }
        if spec.is_stationary() && t < min_start && row.iter().any(|&v| v != 0) {
            out.push(format!("t={t}: activity before start"));
        }
    }
    if spec.is_stationary() && !env.pairs.is_empty() {
        let lcm = env.pairs.iter().fold(1, |acc, p| acc / gcd(acc, p.period) * p.period);
        let from = env.pairs.iter().map(|p| p.start).max().unwrap_or(0);
        for t in from..from + 2 * lcm {
            if env.labels_at(t) != env.labels_at(t + lcm) {
                out.push(format!("t={t}: grid not periodic with {lcm}"));
                break;
            }
        }
    }
    out
}

/// Brute-force IoU over sets of active `(time, band)` cells.
pub fn oracle_iou(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> f64 {
    let cells = |g: &[Vec<bool>]| -> std::collections::BTreeSet<(usize, usize)> {
        g.iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().filter(|(_, &v)| v).map(move |(b, _)| (t, b)))
            .collect()
    };
    let (p, y) = (cells(pred), cells(truth));
    let union = p.union(&y).count();
    if union == 0 {
        1.0
    } else {
        p.intersection(&y).count() as f64 / union as f64
    }
}

/// Drives a hypothesis set with the given band picker and reports whether
/// any true pair was lost and whether a fully resolved set mispredicted.
pub struct SoundnessOutcome {
    pub lost_true_tuple: bool,
    pub resolved: bool,
    pub mispredicted: bool,
}

pub fn soundness_run<R: Rng>(prior: &EnvSpec, tuples: &[PairTuple], seed: u64, t_steps: usize, expert: bool, rng: &mut R) -> SoundnessOutcome {
    let env = sample_environment(prior, seed).expect("valid prior");
    let mut set = HypothesisSet::from_tuples(prior, tuples.to_vec());
    for t in 0..t_steps {
        let band = if expert { expert_select(&set, t) } else { rng.gen_range(0..prior.n_bands) };
        let hit = env.labels_at(t)[band] > 0;
        set.eliminate(t, band, hit).expect("in-prior observations are consistent");
    }
    let lost = env.pairs.iter().any(|p| {
        let tuple = PairTuple::from(p);
        !set.undiscovered.contains(&tuple) && !set.tracked.iter().any(|tp| tp.candidates.contains(&tuple))
    });
    let resolved = set.tracked.len() == set.number.hi && set.tracked.iter().all(|p| p.is_singleton());
    let mut mispredicted = false;
    if resolved {
        for t in t_steps..t_steps + 30 {
            let p = set.predict(t).probability;
            let truth = env.labels_at(t);
            mispredicted |= p.iter().zip(&truth).any(|(&p, &y)| (p >= 0.5) != (y > 0) || (p != 0.0 && p != 1.0));
        }
    }
    SoundnessOutcome {
        lost_true_tuple: lost,
        resolved,
        mispredicted,
    }
}

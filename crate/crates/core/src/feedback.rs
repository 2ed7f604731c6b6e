//! Experience feedback: retraining from field deployments that never reveal
//! the full spectrum state.
//!
//! Two loops live here. Spec estimation replays field samples through
//! hypothesis elimination, widens a spec around every surviving tuple and
//! retrains on a weighted pool of specs. State estimation reconstructs full
//! grids from the samples with a bidirectional ConvLSTM, can extend them with
//! a generator, and retrains on the stored grids replayed as scripts.
//!
//! Field truth never enters this module: a [`FieldExperience`] only holds
//! `(action, observation)` pairs.

use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{enumerate_prior, HypothesisSet, DEFAULT_PRIOR_CAP};
use crate::dan::{
    held_out_seeds, CurvePoint, DanAgent, EpisodeSource, EvalSet, Losses, StoredEpisode, TrainConfig,
};
use crate::env_sim::{
    derive_seed, sample_environment, EnvSpec, Environment, FreqSpec, IntRange, LabelGrid, Observation,
    ScriptedEnvironment,
};
use crate::error::{Error, Result};
use crate::harness::{encode_step, input_channels, Controller, History};
use crate::neural::{
    relu, relu_backward, sigmoid, wbce_logits, Adam, Conv1d, ConvLstm, HasParams, LstmCache, Param, Scalar,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub episodes: usize,
    pub t_steps: usize,
}

/// Sampled band and observation of every step of one field episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialEpisode {
    pub steps: Vec<(usize, Observation)>,
}

impl PartialEpisode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One sample per step, in the form the reconstructor consumes.
    pub fn samples(&self) -> Vec<Vec<(usize, Observation)>> {
        self.steps.iter().map(|&s| vec![s]).collect()
    }
}

/// What a budget-limited field deployment brings back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldExperience {
    pub n_bands: usize,
    pub n_classes: usize,
    pub budget: Budget,
    episodes: Vec<PartialEpisode>,
}

impl FieldExperience {
    pub fn new(n_bands: usize, n_classes: usize, budget: Budget, episodes: Vec<PartialEpisode>) -> Result<Self> {
        if episodes.len() > budget.episodes {
            return Err(Error::Config(format!(
                "{} episodes exceed the budget of {}",
                episodes.len(),
                budget.episodes
            )));
        }
        for ep in &episodes {
            if ep.len() > budget.t_steps {
                return Err(Error::Config(format!(
                    "episode of {} steps exceeds the budget of {}",
                    ep.len(),
                    budget.t_steps
                )));
            }
            if let Some(&(band, _)) = ep.steps.iter().find(|(b, _)| *b >= n_bands) {
                return Err(Error::BandOutOfRange { band, n_bands });
            }
        }
        Ok(Self {
            n_bands,
            n_classes,
            budget,
            episodes,
        })
    }

    pub fn episodes(&self) -> &[PartialEpisode] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

/// Runs `controller` for one episode, keeping only what it sampled. The
/// environment's truth is never read.
pub fn deploy_episode<C, E>(controller: &mut C, env: &mut E, t_steps: usize, seed: u64) -> Result<PartialEpisode>
where
    C: Controller + ?Sized,
    E: Environment + ?Sized,
{
    let n_bands = env.n_bands();
    controller.reset(n_bands, env.n_classes(), seed);
    let mut history = History::new(n_bands, env.n_classes());
    for t in 0..t_steps {
        env.begin_step(t);
        let band = controller.select_band(&history);
        if band >= n_bands {
            return Err(Error::ControllerAction { t, band, n_bands });
        }
        let obs = env.observe(t, band)?;
        history.push(band, obs);
        controller.predict(&history);
    }
    Ok(PartialEpisode {
        steps: history.steps().to_vec(),
    })
}

/// Deploys `controller` on fresh field environments. Episode `i` uses
/// environment seed `derive_seed(seed, i)`.
pub fn collect_field_experience<C: Controller + ?Sized>(
    controller: &mut C,
    field: &EnvSpec,
    budget: Budget,
    seed: u64,
) -> Result<FieldExperience> {
    let mut episodes = Vec::with_capacity(budget.episodes);
    for i in 0..budget.episodes as u64 {
        let env_seed = derive_seed(seed, i);
        let mut env = sample_environment(field, env_seed)?;
        episodes.push(deploy_episode(controller, &mut env, budget.t_steps, env_seed)?);
    }
    FieldExperience::new(field.n_bands, field.n_classes, budget, episodes)
}

/// Lab episodes with their binary truth, for reconstructor training.
pub fn simulate_lab_pairs<C: Controller + ?Sized>(
    controller: &mut C,
    lab: &EnvSpec,
    budget: Budget,
    seed: u64,
) -> Result<Vec<(PartialEpisode, LabelGrid)>> {
    let mut out = Vec::with_capacity(budget.episodes);
    for i in 0..budget.episodes as u64 {
        let env_seed = derive_seed(seed, i);
        let mut env = sample_environment(lab, env_seed)?;
        let partial = deploy_episode(controller, &mut env, budget.t_steps, env_seed)?;
        let mut truth = LabelGrid::new(lab.n_bands);
        for t in 0..budget.t_steps {
            truth.rows.push(env.labels_at(t).into_iter().map(|v| u8::from(v > 0)).collect());
        }
        out.push((partial, truth));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct Hull {
    lo: usize,
    hi: usize,
}

impl Hull {
    fn point(v: usize) -> Self {
        Self { lo: v, hi: v }
    }

    fn add(&mut self, v: usize) {
        self.lo = self.lo.min(v);
        self.hi = self.hi.max(v);
    }

    fn range(self) -> IntRange {
        IntRange::new(self.lo, self.hi)
    }
}

fn widen(h: &mut Option<Hull>, v: usize) {
    match h {
        Some(h) => h.add(v),
        None => *h = Some(Hull::point(v)),
    }
}

/// Replays every episode through hypothesis elimination under `prior` and
/// returns the smallest spec containing every surviving tuple.
///
/// The pair count range spans the number of pairs discovered per episode.
/// An episode that contradicts the prior stops contributing at the
/// contradiction.
pub fn estimate_field_spec(exp: &FieldExperience, prior: &EnvSpec) -> Result<EnvSpec> {
    let tuples = enumerate_prior(prior, DEFAULT_PRIOR_CAP)?;
    if !exp.episodes().iter().flat_map(|e| &e.steps).any(|(_, o)| o.detection > 0) {
        return Err(Error::InsufficientEvidence);
    }
    let (mut number, mut width, mut period, mut duty, mut start, mut freq) = (None, None, None, None, None, None);
    for (i, ep) in exp.episodes().iter().enumerate() {
        let mut hyps = HypothesisSet::from_tuples(prior, tuples.clone());
        for (t, &(band, obs)) in ep.steps.iter().enumerate() {
            if hyps.eliminate(t, band, obs.detection > 0).is_err() {
                warn!("field episode {i} contradicts the estimation prior at t={t}");
                break;
            }
        }
        widen(&mut number, hyps.tracked.len());
        for c in hyps.tracked.iter().flat_map(|p| &p.candidates) {
            widen(&mut width, c.width as usize);
            widen(&mut period, c.period as usize);
            widen(&mut duty, c.duty_cycle as usize);
            widen(&mut start, c.start as usize);
            widen(&mut freq, c.freq_lo as usize);
        }
    }
    let (Some(width), Some(period), Some(duty), Some(start), Some(freq), Some(number)) =
        (width, period, duty, start, freq, number)
    else {
        return Err(Error::InsufficientEvidence);
    };
    let width = width.range();
    let max_lo = exp.n_bands.saturating_sub(width.hi);
    let freq = if freq.lo <= max_lo {
        FreqSpec::Range(IntRange::new(freq.lo, freq.hi.min(max_lo)))
    } else {
        FreqSpec::Random
    };
    let spec = EnvSpec {
        number: number.range(),
        width,
        period: period.range(),
        duty_cycle: duty.range(),
        freq,
        start: start.range(),
        n_bands: exp.n_bands,
        n_classes: exp.n_classes,
        change_prob: prior.change_prob,
        class_periods: prior.class_periods.clone(),
    };
    spec.validated()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub name: String,
    pub spec: EnvSpec,
    pub weight: f64,
}

/// Specs with normalized sampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecPool {
    entries: Vec<PoolEntry>,
}

impl SpecPool {
    /// Normalizes the weights; rejects negative, non-finite or all-zero weights.
    pub fn new(entries: Vec<(String, EnvSpec, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("spec pool is empty".into()));
        }
        if entries.iter().any(|(_, _, w)| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("pool weights must be finite and non-negative".into()));
        }
        let total: f64 = entries.iter().map(|(_, _, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::Config("pool weights sum to zero".into()));
        }
        for (_, spec, _) in &entries {
            spec.validated()?;
        }
        Ok(Self {
            entries: entries
                .into_iter()
                .map(|(name, spec, w)| PoolEntry {
                    name,
                    spec,
                    weight: w / total,
                })
                .collect(),
        })
    }

    /// `estimate_weight` split evenly over the estimates, the rest on the lab
    /// spec. Without estimates the lab spec gets everything.
    pub fn lab_and_estimates(lab: (&str, &EnvSpec), estimates: &[(String, EnvSpec)], estimate_weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&estimate_weight) {
            return Err(Error::Config(format!("estimate weight {estimate_weight} is not in [0, 1]")));
        }
        if estimates.is_empty() {
            return Self::new(vec![(lab.0.to_string(), lab.1.clone(), 1.0)]);
        }
        let each = estimate_weight / estimates.len() as f64;
        let mut entries: Vec<_> = estimates.iter().map(|(n, s)| (n.clone(), s.clone(), each)).collect();
        entries.push((lab.0.to_string(), lab.1.clone(), 1.0 - estimate_weight));
        Self::new(entries)
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    fn distribution(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.weights()).expect("weights validated on construction")
    }

    pub fn sample_index<R: Rng>(&self, rng: &mut R) -> usize {
        self.distribution().sample(rng)
    }
}

/// Training environments drawn from a spec pool. The environment seed of
/// episode `i` is `derive_seed(seed, i)` whichever spec is drawn.
#[derive(Clone, Debug)]
pub struct PoolSource {
    pub pool: SpecPool,
    pub seed: u64,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    pub draws: Vec<usize>,
}

impl PoolSource {
    pub fn new(pool: SpecPool, seed: u64) -> Self {
        Self {
            dist: pool.distribution(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xB001)),
            pool,
            seed,
            draws: Vec::new(),
        }
    }
}

impl EpisodeSource for PoolSource {
    fn sample(&mut self, episode: usize) -> Result<Box<dyn Environment + Send>> {
        let i = self.dist.sample(&mut self.rng);
        self.draws.push(i);
        let spec = &self.pool.entries[i].spec;
        Ok(Box::new(sample_environment(spec, derive_seed(self.seed, episode as u64))?))
    }
}

/// Trains `agent` for `agent.config.episodes` episodes drawn from the pool.
pub fn retrain_pooled(agent: &mut DanAgent, pool: &SpecPool, seed: u64, eval: Option<&EvalSet>) -> Result<Vec<CurvePoint>> {
    let mut source = PoolSource::new(pool.clone(), seed);
    agent.train(&mut source, eval)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Every estimate so far plus the lab spec.
    AllEstimates,
    /// Only the newest estimate plus the lab spec.
    CurrentOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub budget: Budget,
    pub retrain: TrainConfig,
    pub mode: PoolMode,
    pub estimate_weight: f64,
    pub eval_episodes: usize,
    pub eval_t_steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub field: String,
    /// `None` when estimation failed and retraining was skipped.
    pub estimated: Option<EnvSpec>,
    /// Mean cumulative IoU on the lab spec and every field spec, in that order.
    pub scores: Vec<(String, f64)>,
}

/// Scores the greedy policy on held-out environments of every spec.
pub fn evaluate_on_specs(agent: &DanAgent, specs: &[(String, EnvSpec)], episodes: usize, t_steps: usize) -> Result<Vec<(String, f64)>> {
    specs
        .iter()
        .map(|(name, spec)| {
            let set = EvalSet::from_spec(spec, held_out_seeds(episodes), t_steps);
            Ok((name.clone(), set.score(&mut agent.policy())?))
        })
        .collect()
}

/// Deploy, estimate, pool, retrain; once per field spec.
pub fn bootstrap(
    agent: &mut DanAgent,
    lab: (&str, &EnvSpec),
    fields: &[(String, EnvSpec)],
    prior: &EnvSpec,
    config: &BootstrapConfig,
) -> Result<Vec<IterationReport>> {
    if fields.is_empty() {
        return Err(Error::Config("bootstrap needs at least one field spec".into()));
    }
    let mut all_specs = vec![(lab.0.to_string(), lab.1.clone())];
    all_specs.extend(fields.iter().cloned());
    let mut estimates: Vec<(String, EnvSpec)> = Vec::new();
    let mut reports = Vec::with_capacity(fields.len());
    for (i, (name, field)) in fields.iter().enumerate() {
        let iter_seed = derive_seed(config.seed, i as u64);
        let mut deployed = agent.policy();
        let exp = collect_field_experience(&mut deployed, field, config.budget, derive_seed(iter_seed, 1))?;
        let estimated = match estimate_field_spec(&exp, prior) {
            Ok(spec) => Some(spec),
            Err(e) => {
                warn!("iteration {}: estimating {name} failed ({e}); skipping retraining", i + 1);
                None
            }
        };
        if let Some(spec) = &estimated {
            let est = (format!("est_{name}"), spec.clone());
            match config.mode {
                PoolMode::AllEstimates => estimates.push(est),
                PoolMode::CurrentOnly => estimates = vec![est],
            }
            let pool = SpecPool::lab_and_estimates(lab, &estimates, config.estimate_weight)?;
            agent.config = config.retrain.clone();
            retrain_pooled(agent, &pool, derive_seed(iter_seed, 2), None)?;
        }
        let scores = evaluate_on_specs(agent, &all_specs, config.eval_episodes, config.eval_t_steps)?;
        info!("bootstrap iteration {} ({name}): {:?}", i + 1, scores);
        reports.push(IterationReport {
            iteration: i + 1,
            field: name.clone(),
            estimated,
            scores,
        });
    }
    Ok(reports)
}

/// Input row with every sample of the step marked.
pub fn encode_samples(n_bands: usize, n_classes: usize, samples: &[(usize, Observation)]) -> Vec<f32> {
    let c = input_channels(n_classes);
    let mut row = vec![0.0f32; n_bands * c];
    for &s in samples {
        let one = encode_step(n_bands, n_classes, Some(s));
        let at = s.0 * c;
        row[at..at + c].copy_from_slice(&one[at..at + c]);
    }
    row
}

fn to_scalar<F: Scalar>(row: &[f32]) -> Vec<F> {
    row.iter().map(|&v| F::from_f32(v).expect("f32 fits")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructorConfig {
    pub feature_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub w_neg: f64,
    pub seed: u64,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        Self {
            feature_channels: 8,
            hidden: 8,
            kernel: 3,
            epochs: 10,
            learning_rate: 3e-3,
            w_neg: 1.0,
            seed: 0,
        }
    }
}

/// Forward pass of the reconstructor, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ReconTrace<F> {
    xs: Vec<Vec<F>>,
    feat_pre: Vec<Vec<F>>,
    fwd: Vec<LstmCache<F>>,
    bwd: Vec<LstmCache<F>>,
    joined: Vec<Vec<F>>,
    pub logits: Vec<Vec<F>>,
}

/// Bidirectional ConvLSTM over time on conv-in-frequency features, decoded
/// per band into one signal logit per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructor<F = f32> {
    pub n_bands: usize,
    pub n_classes: usize,
    pub feature: Conv1d<F>,
    pub forward_cell: ConvLstm<F>,
    pub backward_cell: ConvLstm<F>,
    pub decode: Conv1d<F>,
    trained: bool,
}

impl<F: Scalar> Reconstructor<F> {
    pub fn new(n_bands: usize, n_classes: usize, config: &ReconstructorConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x4EC0));
        let (fc, h, k) = (config.feature_channels, config.hidden, config.kernel);
        Ok(Self {
            n_bands,
            n_classes,
            feature: Conv1d::new("recon.feature", input_channels(n_classes), fc, k, &mut rng)?,
            forward_cell: ConvLstm::new("recon.forward", fc, h, k, &mut rng)?,
            backward_cell: ConvLstm::new("recon.backward", fc, h, k, &mut rng)?,
            decode: Conv1d::new("recon.decode", 2 * h, 1, k, &mut rng)?,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn forward(&self, xs: &[Vec<F>]) -> Result<ReconTrace<F>> {
        let n = self.n_bands;
        let h = self.forward_cell.hidden;
        let t_len = xs.len();
        let feat_pre = xs
            .iter()
            .map(|x| self.feature.forward(x, n))
            .collect::<Result<Vec<_>>>()?;
        let feats: Vec<Vec<F>> = feat_pre.iter().map(|p| relu(p)).collect();
        let zeros = vec![F::zero(); n * h];

        let mut fwd = Vec::with_capacity(t_len);
        let mut hf = Vec::with_capacity(t_len);
        let (mut hs, mut cs) = (zeros.clone(), zeros.clone());
        for f in &feats {
            let (h2, c2, cache) = self.forward_cell.step(f, &hs, &cs, n)?;
            hf.push(h2.clone());
            fwd.push(cache);
            hs = h2;
            cs = c2;
        }
        let mut bwd: Vec<Option<LstmCache<F>>> = vec![None; t_len];
        let mut hb = vec![Vec::new(); t_len];
        let (mut hs, mut cs) = (zeros.clone(), zeros);
        for t in (0..t_len).rev() {
            let (h2, c2, cache) = self.backward_cell.step(&feats[t], &hs, &cs, n)?;
            hb[t] = h2.clone();
            bwd[t] = Some(cache);
            hs = h2;
            cs = c2;
        }
        let mut joined = Vec::with_capacity(t_len);
        let mut logits = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut j = Vec::with_capacity(n * 2 * h);
            for b in 0..n {
                j.extend_from_slice(&hf[t][b * h..(b + 1) * h]);
                j.extend_from_slice(&hb[t][b * h..(b + 1) * h]);
            }
            logits.push(self.decode.forward(&j, n)?);
            joined.push(j);
        }
        Ok(ReconTrace {
            xs: xs.to_vec(),
            feat_pre,
            fwd,
            bwd: bwd.into_iter().map(|c| c.expect("filled above")).collect(),
            joined,
            logits,
        })
    }

    /// Accumulates parameter gradients given `dlogits[t]` for every step.
    pub fn backward(&mut self, trace: &ReconTrace<F>, dlogits: &[Vec<F>]) -> Result<()> {
        let n = self.n_bands;
        let h = self.forward_cell.hidden;
        let t_len = trace.logits.len();
        if dlogits.len() != t_len {
            return Err(Error::LengthMismatch {
                expected: t_len,
                got: dlogits.len(),
            });
        }
        let mut dhf = Vec::with_capacity(t_len);
        let mut dhb = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut dj = vec![F::zero(); n * 2 * h];
            self.decode.backward(&trace.joined[t], n, &dlogits[t], Some(&mut dj))?;
            let (mut f, mut b) = (Vec::with_capacity(n * h), Vec::with_capacity(n * h));
            for band in 0..n {
                f.extend_from_slice(&dj[band * 2 * h..band * 2 * h + h]);
                b.extend_from_slice(&dj[band * 2 * h + h..(band + 1) * 2 * h]);
            }
            dhf.push(f);
            dhb.push(b);
        }
        let fc = self.feature.out_channels;
        let mut dfeat = vec![vec![F::zero(); n * fc]; t_len];
        let add = |acc: &mut Vec<F>, d: &[F]| acc.iter_mut().zip(d).for_each(|(a, &v)| *a = *a + v);

        let (mut dh_next, mut dc_next) = (vec![F::zero(); n * h], vec![F::zero(); n * h]);
        for t in (0..t_len).rev() {
            let mut dh = dhf[t].clone();
            add(&mut dh, &dh_next);
            let (dx, dhp, dcp) = self.forward_cell.step_backward(&trace.fwd[t], n, &dh, &dc_next)?;
            add(&mut dfeat[t], &dx);
            dh_next = dhp;
            dc_next = dcp;
        }
        let (mut dh_next, mut dc_next) = (vec![F::zero(); n * h], vec![F::zero(); n * h]);
        for t in 0..t_len {
            let mut dh = dhb[t].clone();
            add(&mut dh, &dh_next);
            let (dx, dhp, dcp) = self.backward_cell.step_backward(&trace.bwd[t], n, &dh, &dc_next)?;
            add(&mut dfeat[t], &dx);
            dh_next = dhp;
            dc_next = dcp;
        }
        for t in 0..t_len {
            let dpre = relu_backward(&trace.feat_pre[t], &dfeat[t]);
            self.feature.backward(&trace.xs[t], n, &dpre, None)?;
        }
        Ok(())
    }

    fn encode(&self, samples: &[Vec<(usize, Observation)>]) -> Result<Vec<Vec<F>>> {
        samples
            .iter()
            .map(|s| {
                if let Some(&(band, _)) = s.iter().find(|(b, _)| *b >= self.n_bands) {
                    return Err(Error::BandOutOfRange {
                        band,
                        n_bands: self.n_bands,
                    });
                }
                Ok(to_scalar(&encode_samples(self.n_bands, self.n_classes, s)))
            })
            .collect()
    }

    /// Mean weighted BCE of one episode against its binary truth; fills the
    /// gradients when `backward` is set.
    pub fn episode_loss(
        &mut self,
        samples: &[Vec<(usize, Observation)>],
        truth: &LabelGrid,
        w_neg: F,
        backward: bool,
    ) -> Result<F> {
        if truth.len() < samples.len() || truth.n_bands != self.n_bands {
            return Err(Error::Shape(format!(
                "truth grid {}x{} does not cover {} steps of {} bands",
                truth.len(),
                truth.n_bands,
                samples.len(),
                self.n_bands
            )));
        }
        let trace = self.forward(&self.encode(samples)?)?;
        let t_len = samples.len().max(1);
        let inv = F::one() / F::from_usize(t_len).expect("step count fits");
        let mut loss = F::zero();
        let mut dl = Vec::with_capacity(samples.len());
        for (t, logits) in trace.logits.iter().enumerate() {
            let labels: Vec<u8> = truth.rows[t].iter().map(|&v| u8::from(v > 0)).collect();
            let (l, g) = wbce_logits(logits, 1, &labels, None, w_neg);
            loss = loss + l * inv;
            dl.push(g.into_iter().map(|v| v * inv).collect());
        }
        if backward {
            self.backward(&trace, &dl)?;
        }
        Ok(loss)
    }

    /// Per-cell signal probabilities.
    pub fn probabilities(&self, samples: &[Vec<(usize, Observation)>]) -> Result<Vec<Vec<F>>> {
        let trace = self.forward(&self.encode(samples)?)?;
        Ok(trace
            .logits
            .into_iter()
            .map(|row| row.into_iter().map(sigmoid).collect())
            .collect())
    }

    /// Thresholded reconstruction with every observed cell set to its
    /// observed value.
    pub fn reconstruct_observed(&self, samples: &[Vec<(usize, Observation)>]) -> Result<LabelGrid> {
        if !self.trained {
            return Err(Error::Untrained("reconstructor"));
        }
        let half = F::from_f64(0.5).expect("constant fits");
        let mut grid = LabelGrid::new(self.n_bands);
        for (probs, step) in self.probabilities(samples)?.into_iter().zip(samples) {
            let mut row: Vec<u8> = probs.into_iter().map(|p| u8::from(p >= half)).collect();
            for &(band, obs) in step {
                row[band] = obs.detection;
            }
            grid.rows.push(row);
        }
        Ok(grid)
    }

    pub fn reconstruct_states(&self, episode: &PartialEpisode) -> Result<LabelGrid> {
        self.reconstruct_observed(&episode.samples())
    }
}

impl<F: Scalar> HasParams<F> for Reconstructor<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.feature.params();
        v.extend(self.forward_cell.params());
        v.extend(self.backward_cell.params());
        v.extend(self.decode.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.feature.params_mut();
        v.extend(self.forward_cell.params_mut());
        v.extend(self.backward_cell.params_mut());
        v.extend(self.decode.params_mut());
        v
    }
}

impl Reconstructor<f32> {
    /// Trains on lab `(partial, truth)` pairs, one episode per Adam step.
    /// Returns the mean loss of each epoch.
    pub fn fit(&mut self, pairs: &[(PartialEpisode, LabelGrid)], config: &ReconstructorConfig) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(Error::Config("no reconstructor training pairs".into()));
        }
        let mut opt = Adam::new(config.learning_rate as f32);
        opt.clip_norm = Some(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xF17));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut curve = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let (partial, truth) = &pairs[i];
                self.zero_grad();
                let l = self.episode_loss(&partial.samples(), truth, config.w_neg as f32, true)?;
                if !l.is_finite() {
                    return Err(Error::Divergence(format!("reconstructor loss {l} in epoch {epoch}")));
                }
                opt.step(self.params_mut())?;
                total += l as f64;
            }
            curve.push(total / pairs.len() as f64);
            info!("reconstructor epoch {}: loss {:.4}", epoch + 1, curve[epoch]);
        }
        self.trained = true;
        Ok(curve)
    }
}

/// Fraction of cells where `pred` and `truth` agree on activity.
pub fn cell_accuracy(pred: &LabelGrid, truth: &LabelGrid) -> Result<f64> {
    if pred.n_bands != truth.n_bands || pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len() * truth.n_bands,
            got: pred.len() * pred.n_bands,
        });
    }
    let cells = pred.len() * pred.n_bands;
    if cells == 0 {
        return Ok(1.0);
    }
    let hits = pred
        .rows
        .iter()
        .flatten()
        .zip(truth.rows.iter().flatten())
        .filter(|(&p, &t)| (p > 0) == (t > 0))
        .count();
    Ok(hits as f64 / cells as f64)
}

/// Grid that holds each band at its last observed value (0 before any
/// observation).
pub fn persistent_grid(n_bands: usize, episode: &PartialEpisode) -> LabelGrid {
    let mut grid = LabelGrid::new(n_bands);
    let mut row = vec![0u8; n_bands];
    for &(band, obs) in &episode.steps {
        row[band] = obs.detection;
        grid.rows.push(row.clone());
    }
    grid
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Reconstructed,
    Generated,
    LabSimulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub grid: LabelGrid,
    pub provenance: Provenance,
}

/// Binary full-state grids of uniform size with provenance tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateDatabase {
    entries: Vec<StateEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    provenance: Provenance,
    steps: usize,
    n_bands: usize,
}

const MANIFEST: &str = "manifest.json";

impl StateDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, grid: LabelGrid, provenance: Provenance) -> Result<()> {
        if !grid.is_binary() {
            return Err(Error::Config("state grids must be binary".into()));
        }
        if grid.rows.iter().any(|r| r.len() != grid.n_bands) {
            return Err(Error::Shape("ragged state grid".into()));
        }
        if let Some(first) = self.entries.first() {
            if first.grid.n_bands != grid.n_bands || first.grid.len() != grid.len() {
                return Err(Error::Shape(format!(
                    "grid {}x{} differs from the database's {}x{}",
                    grid.len(),
                    grid.n_bands,
                    first.grid.len(),
                    first.grid.n_bands
                )));
            }
        }
        self.entries.push(StateEntry { grid, provenance });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StateEntry] {
        &self.entries
    }

    /// Up to `limit` grids with the given provenance (all when `None`), in
    /// insertion order.
    pub fn select(&self, provenance: Option<Provenance>, limit: usize) -> Vec<LabelGrid> {
        self.entries
            .iter()
            .filter(|e| provenance.is_none_or(|p| e.provenance == p))
            .take(limit)
            .map(|e| e.grid.clone())
            .collect()
    }

    /// Writes `grid_NNNN.csv` files and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("grid_{i:04}.csv");
            fs::write(dir.join(&file), e.grid.to_csv())?;
            manifest.push(ManifestEntry {
                file,
                provenance: e.provenance,
                steps: e.grid.len(),
                n_bands: e.grid.n_bands,
            });
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut db = Self::new();
        for m in manifest {
            let grid = LabelGrid::from_csv(&fs::read_to_string(dir.join(&m.file))?)?;
            if grid.len() != m.steps || grid.n_bands != m.n_bands {
                return Err(Error::Shape(format!("{} does not match its manifest entry", m.file)));
            }
            db.push(grid, m.provenance)?;
        }
        Ok(db)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub prefix: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            kernel: 3,
            epochs: 200,
            learning_rate: 1e-2,
            prefix: 10,
            seed: 0,
        }
    }
}

/// ConvLSTM that predicts the next grid row from the rows so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<F = f32> {
    pub n_bands: usize,
    pub prefix: usize,
    pub cell: ConvLstm<F>,
    pub decode: Conv1d<F>,
    trained: bool,
}

impl<F: Scalar> Generator<F> {
    pub fn new(n_bands: usize, config: &GeneratorConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x6E4));
        Ok(Self {
            n_bands,
            prefix: config.prefix,
            cell: ConvLstm::new("gen.cell", 1, config.hidden, config.kernel, &mut rng)?,
            decode: Conv1d::new("gen.decode", config.hidden, 1, config.kernel, &mut rng)?,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn row_input(row: &[u8]) -> Vec<F> {
        row.iter().map(|&v| if v > 0 { F::one() } else { F::zero() }).collect()
    }

    /// Mean next-row BCE over one grid; fills gradients when `backward` is set.
    pub fn sequence_loss(&mut self, grid: &LabelGrid, backward: bool) -> Result<F> {
        if grid.n_bands != self.n_bands {
            return Err(Error::LengthMismatch {
                expected: self.n_bands,
                got: grid.n_bands,
            });
        }
        let n = self.n_bands;
        let hd = self.cell.hidden;
        let steps = grid.len().saturating_sub(1);
        if steps == 0 {
            return Ok(F::zero());
        }
        let inv = F::one() / F::from_usize(steps).expect("step count fits");
        let (mut h, mut c) = (vec![F::zero(); n * hd], vec![F::zero(); n * hd]);
        let mut caches = Vec::with_capacity(steps);
        let mut hs = Vec::with_capacity(steps);
        let mut dlogits = Vec::with_capacity(steps);
        let mut loss = F::zero();
        for t in 0..steps {
            let (h2, c2, cache) = self.cell.step(&Self::row_input(&grid.rows[t]), &h, &c, n)?;
            let logits = self.decode.forward(&h2, n)?;
            let labels: Vec<u8> = grid.rows[t + 1].iter().map(|&v| u8::from(v > 0)).collect();
            let (l, g) = wbce_logits(&logits, 1, &labels, None, F::one());
            loss = loss + l * inv;
            dlogits.push(g.into_iter().map(|v| v * inv).collect::<Vec<F>>());
            caches.push(cache);
            hs.push(h2.clone());
            h = h2;
            c = c2;
        }
        if backward {
            let (mut dh_next, mut dc_next) = (vec![F::zero(); n * hd], vec![F::zero(); n * hd]);
            for t in (0..steps).rev() {
                let mut dh = dh_next.clone();
                self.decode.backward(&hs[t], n, &dlogits[t], Some(&mut dh))?;
                let (_, dhp, dcp) = self.cell.step_backward(&caches[t], n, &dh, &dc_next)?;
                dh_next = dhp;
                dc_next = dcp;
            }
        }
        Ok(loss)
    }

    /// Teacher-forces `prefix` rows of `seed_grid`, then samples each further
    /// cell from its predicted probability until `t_out` rows exist.
    pub fn rollout<R: Rng>(&self, seed_grid: &LabelGrid, t_out: usize, rng: &mut R) -> Result<LabelGrid> {
        if !self.trained {
            return Err(Error::Untrained("generator"));
        }
        let n = self.n_bands;
        let hd = self.cell.hidden;
        let mut out = LabelGrid::new(n);
        let (mut h, mut c) = (vec![F::zero(); n * hd], vec![F::zero(); n * hd]);
        let mut probs: Vec<f64> = Vec::new();
        let prefix = self.prefix.min(seed_grid.len()).max(1).min(t_out);
        while out.len() < t_out {
            let row: Vec<u8> = if out.len() < prefix {
                seed_grid.rows[out.len()].iter().map(|&v| u8::from(v > 0)).collect()
            } else {
                probs.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect()
            };
            let (h2, c2, _) = self.cell.step(&Self::row_input(&row), &h, &c, n)?;
            probs = self
                .decode
                .forward(&h2, n)?
                .into_iter()
                .map(|l| sigmoid(l).to_f64().expect("finite"))
                .collect();
            h = h2;
            c = c2;
            out.rows.push(row);
        }
        Ok(out)
    }

    /// `count` rollouts seeded by entry `seed_episode` of `db`; rollout `i`
    /// samples with seed `derive_seed(seed, i)`.
    pub fn generate_episodes(
        &self,
        db: &StateDatabase,
        seed_episode: usize,
        count: usize,
        t_out: usize,
        seed: u64,
    ) -> Result<Vec<LabelGrid>> {
        if db.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let entry = db.entries().get(seed_episode).ok_or_else(|| {
            Error::Config(format!("seed episode {seed_episode} not in a database of {}", db.len()))
        })?;
        (0..count as u64)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
                self.rollout(&entry.grid, t_out, &mut rng)
            })
            .collect()
    }
}

impl<F: Scalar> HasParams<F> for Generator<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.cell.params();
        v.extend(self.decode.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.cell.params_mut();
        v.extend(self.decode.params_mut());
        v
    }
}

impl Generator<f32> {
    /// Trains on every grid of the database, one grid per Adam step.
    pub fn fit(&mut self, db: &StateDatabase, config: &GeneratorConfig) -> Result<Vec<f64>> {
        if db.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let mut opt = Adam::new(config.learning_rate as f32);
        opt.clip_norm = Some(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xF17));
        let mut order: Vec<usize> = (0..db.len()).collect();
        let mut curve = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                self.zero_grad();
                let l = self.sequence_loss(&db.entries()[i].grid, true)?;
                if !l.is_finite() {
                    return Err(Error::Divergence(format!("generator loss {l} in epoch {epoch}")));
                }
                opt.step(self.params_mut())?;
                total += l as f64;
            }
            curve.push(total / db.len() as f64);
        }
        self.trained = true;
        Ok(curve)
    }
}

/// Episodes alternating between stored grids (even indices) and fresh lab
/// environments (odd indices).
#[derive(Clone, Debug)]
pub struct StateMixSource {
    pub grids: Vec<LabelGrid>,
    pub lab: EnvSpec,
    pub seed: u64,
}

impl EpisodeSource for StateMixSource {
    fn sample(&mut self, episode: usize) -> Result<Box<dyn Environment + Send>> {
        if episode % 2 == 0 {
            let grid = self.grids[(episode / 2) % self.grids.len()].clone();
            Ok(Box::new(ScriptedEnvironment::new(grid, 1)))
        } else {
            Ok(Box::new(sample_environment(&self.lab, derive_seed(self.seed, episode as u64))?))
        }
    }
}

/// Trains on stored grids mixed 1:1 with lab episodes for
/// `agent.config.episodes` episodes.
pub fn retrain_on_states(
    agent: &mut DanAgent,
    grids: &[LabelGrid],
    lab: &EnvSpec,
    seed: u64,
    eval: Option<&EvalSet>,
) -> Result<Vec<CurvePoint>> {
    if grids.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let mut source = StateMixSource {
        grids: grids.to_vec(),
        lab: lab.clone(),
        seed,
    };
    agent.train(&mut source, eval)
}

/// Reward of a partially observed step: how well the M prediction of the
/// sampled band matched what was observed there.
pub fn restricted_reward(m_pred: f64, detection: u8) -> f64 {
    1.0 - (m_pred.clamp(0.0, 1.0) - f64::from(detection.min(1))).abs()
}

/// Replay form of a partial episode under the current network: targets and
/// losses only at the sampled band, rewards from [`restricted_reward`].
pub fn partial_to_stored(agent: &DanAgent, episode: &PartialEpisode, n_classes: usize) -> Result<StoredEpisode> {
    let n = agent.net.config.n_bands;
    let inputs: Vec<Vec<f32>> = episode
        .steps
        .iter()
        .map(|&s| encode_step(n, n_classes, Some(s)))
        .collect();
    let trace = agent.net.forward_sequence(&inputs)?;
    let k = agent.net.config.m_outputs;
    let mut rewards = Vec::with_capacity(episode.len());
    let mut targets = Vec::with_capacity(episode.len());
    for (t, &(band, obs)) in episode.steps.iter().enumerate() {
        let probs = crate::neural::head_probs(&trace.heads[t + 1].m, k);
        let m_obj = crate::neural::objectness(&probs, k)[band] as f64;
        rewards.push(restricted_reward(m_obj, obs.detection) as f32);
        let mut row = vec![0u8; n];
        row[band] = obs.class_id;
        targets.push(row);
    }
    Ok(StoredEpisode {
        inputs,
        actions: episode.steps.iter().map(|&(b, _)| b).collect(),
        rewards,
        targets,
        partial: true,
        infomax: None,
    })
}

/// Fine-tunes on partial field episodes only, cycling through them for
/// `agent.config.episodes` episodes. The replay store is cleared first so
/// no fully supervised episode takes part.
pub fn finetune_partial(agent: &mut DanAgent, exp: &FieldExperience) -> Result<Vec<Losses>> {
    if exp.is_empty() {
        return Err(Error::Config("no field episodes to fine-tune on".into()));
    }
    agent.clear_replay();
    let mut losses = Vec::new();
    for i in 0..agent.config.episodes {
        let ep = &exp.episodes()[i % exp.len()];
        let stored = partial_to_stored(agent, ep, exp.n_classes)?;
        agent.push_episode(stored);
        if let Some(l) = agent.update_from_replay()? {
            losses.push(l);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{make_baseline, BaselineKind};
    use crate::dan::{AgentKind, NetworkShape, SpecSource};
    use crate::env_sim::presets;
    use crate::neural::{grad_check, GRAD_CHECK_FLOOR};

    fn budget(episodes: usize, t_steps: usize) -> Budget {
        Budget { episodes, t_steps }
    }

    fn scan() -> Box<dyn Controller + Send> {
        make_baseline(BaselineKind::Scan, None, 0).unwrap()
    }

    #[test]
    fn collection_respects_budget_and_replays() {
        let spec = presets::spec_a();
        let a = collect_field_experience(scan().as_mut(), &spec, budget(5, 30), 9).unwrap();
        let b = collect_field_experience(scan().as_mut(), &spec, budget(5, 30), 9).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.episodes().iter().all(|e| e.len() == 30));
        assert_eq!(a, b);
    }

    #[test]
    fn scan_experience_covers_every_band() {
        let spec = presets::spec_a();
        let exp = collect_field_experience(scan().as_mut(), &spec, budget(2, 50), 1).unwrap();
        for ep in exp.episodes() {
            let mut hits = vec![0usize; spec.n_bands];
            for &(b, _) in &ep.steps {
                hits[b] += 1;
            }
            assert!(hits.iter().all(|&h| h >= 50 / spec.n_bands));
        }
    }

    #[test]
    fn experience_over_budget_is_rejected() {
        let eps = vec![PartialEpisode::default(); 3];
        assert!(FieldExperience::new(20, 1, budget(2, 10), eps).is_err());
    }

    #[test]
    fn degenerate_field_is_recovered_exactly() {
        let mut field = presets::spec_f1();
        field.freq = FreqSpec::Range(IntRange::fixed(6));
        field.period = IntRange::fixed(8);
        let exp = collect_field_experience(scan().as_mut(), &field, budget(3, 100), 4).unwrap();
        assert_eq!(estimate_field_spec(&exp, &field).unwrap(), field);
    }

    #[test]
    fn empty_field_has_no_evidence() {
        let mut field = presets::spec_a();
        field.number = IntRange::fixed(0);
        let exp = collect_field_experience(scan().as_mut(), &field, budget(3, 40), 0).unwrap();
        assert!(matches!(
            estimate_field_spec(&exp, &presets::estimation_prior()),
            Err(Error::InsufficientEvidence)
        ));
    }

    #[test]
    fn pool_normalizes_and_rejects_bad_weights() {
        let a = presets::spec_a();
        let pool = SpecPool::new(vec![("x".into(), a.clone(), 7.0), ("y".into(), a.clone(), 3.0)]).unwrap();
        assert!((pool.weights()[0] - 0.7).abs() < 1e-12);
        assert!(SpecPool::new(vec![("x".into(), a.clone(), -1.0)]).is_err());
        assert!(SpecPool::new(vec![("x".into(), a.clone(), 0.0)]).is_err());
        assert!(SpecPool::new(Vec::new()).is_err());
        let lab_only = SpecPool::lab_and_estimates(("lab", &a), &[], 0.7).unwrap();
        assert_eq!(lab_only.weights(), vec![1.0]);
        let two = SpecPool::lab_and_estimates(("lab", &a), &[("e1".into(), a.clone()), ("e2".into(), a.clone())], 0.7).unwrap();
        let w = two.weights();
        assert!((w[0] - 0.35).abs() < 1e-12 && (w[2] - 0.3).abs() < 1e-12);
    }

    fn tiny_agent(seed: u64) -> DanAgent {
        let config = TrainConfig {
            episodes: 4,
            t_steps: 12,
            batch_episodes: 2,
            updates_per_episode: 1,
            eval_every: 100,
            seed,
            ..TrainConfig::default()
        };
        let shape = NetworkShape {
            feature_channels: 4,
            hidden: 4,
            ..NetworkShape::default()
        };
        DanAgent::new(AgentKind::ConvlstmDan, shape.network_config(AgentKind::ConvlstmDan, 20, 1), config).unwrap()
    }

    #[test]
    fn single_spec_pool_trains_like_the_spec() {
        let spec = presets::spec_b1();
        let pool = SpecPool::new(vec![("est".into(), spec.clone(), 1.0)]).unwrap();
        let mut a = tiny_agent(3);
        let mut b = tiny_agent(3);
        retrain_pooled(&mut a, &pool, 11, None).unwrap();
        b.train(&mut SpecSource { spec, seed: 11 }, None).unwrap();
        assert_eq!(a.net, b.net);
    }

    fn tiny_recon_config() -> ReconstructorConfig {
        ReconstructorConfig {
            feature_channels: 3,
            hidden: 2,
            ..ReconstructorConfig::default()
        }
    }

    #[test]
    fn reconstructor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = Reconstructor::<f64>::new(4, 1, &tiny_recon_config()).unwrap();
        for p in r.feature.b.value.iter_mut() {
            *p = 0.1 + rng.gen::<f64>() * 0.1;
        }
        let samples: Vec<Vec<(usize, Observation)>> = vec![
            vec![(1, Observation::from_label(1))],
            vec![(2, Observation::none())],
            vec![(0, Observation::from_label(1))],
        ];
        let mut truth = LabelGrid::new(4);
        truth.rows = vec![vec![0, 1, 0, 0], vec![0, 0, 1, 1], vec![1, 0, 0, 0]];
        let report = grad_check(&mut r, |m| {
            m.zero_grad();
            m.episode_loss(&samples, &truth, 0.3, true).unwrap()
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
        assert!(report.checked > 0 && GRAD_CHECK_FLOOR > 0.0);
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let config = GeneratorConfig {
            hidden: 2,
            ..GeneratorConfig::default()
        };
        let mut g = Generator::<f64>::new(4, &config).unwrap();
        let mut grid = LabelGrid::new(4);
        grid.rows = vec![vec![1, 0, 0, 0], vec![0, 1, 0, 0], vec![0, 0, 1, 1], vec![1, 0, 0, 1]];
        let report = grad_check(&mut g, |m| {
            m.zero_grad();
            m.sequence_loss(&grid, true).unwrap()
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn untrained_networks_refuse_to_run() {
        let r = Reconstructor::<f32>::new(20, 1, &tiny_recon_config()).unwrap();
        let ep = PartialEpisode {
            steps: vec![(0, Observation::none())],
        };
        assert!(matches!(r.reconstruct_states(&ep), Err(Error::Untrained(_))));
        let g = Generator::<f32>::new(20, &GeneratorConfig::default()).unwrap();
        let mut db = StateDatabase::new();
        assert!(matches!(g.generate_episodes(&db, 0, 1, 10, 0), Err(Error::EmptyDatabase)));
        db.push(LabelGrid { n_bands: 20, rows: vec![vec![0; 20]; 12] }, Provenance::LabSimulated).unwrap();
        assert!(matches!(g.generate_episodes(&db, 0, 1, 10, 0), Err(Error::Untrained(_))));
    }

    #[test]
    fn fully_observed_grid_reconstructs_to_observations() {
        let spec = presets::spec_a();
        let mut env = sample_environment(&spec, 2).unwrap();
        let mut r = Reconstructor::<f32>::new(20, 1, &tiny_recon_config()).unwrap();
        let pairs = simulate_lab_pairs(scan().as_mut(), &spec, budget(2, 10), 0).unwrap();
        r.fit(&pairs, &ReconstructorConfig { epochs: 1, ..tiny_recon_config() }).unwrap();
        let samples: Vec<Vec<(usize, Observation)>> = (0..10)
            .map(|t| {
                (0..20)
                    .map(|b| (b, env.observe(t, b).unwrap()))
                    .collect()
            })
            .collect();
        let grid = r.reconstruct_observed(&samples).unwrap();
        assert!(grid.is_binary());
        for t in 0..10 {
            let truth: Vec<u8> = env.labels_at(t).into_iter().map(|v| u8::from(v > 0)).collect();
            assert_eq!(grid.rows[t], truth);
        }
    }

    #[test]
    fn generator_output_shape_and_empty_count() {
        let mut db = StateDatabase::new();
        let mut grid = LabelGrid::new(6);
        for t in 0..16 {
            grid.rows.push((0..6).map(|b| u8::from((t + b) % 4 == 0)).collect());
        }
        db.push(grid, Provenance::Reconstructed).unwrap();
        let mut g = Generator::<f32>::new(6, &GeneratorConfig { hidden: 4, epochs: 2, ..GeneratorConfig::default() }).unwrap();
        g.fit(&db, &GeneratorConfig { hidden: 4, epochs: 2, ..GeneratorConfig::default() }).unwrap();
        assert!(g.generate_episodes(&db, 0, 0, 30, 1).unwrap().is_empty());
        let out = g.generate_episodes(&db, 0, 3, 30, 1).unwrap();
        assert_eq!(out.len(), 3);
        for grid in &out {
            assert_eq!((grid.len(), grid.n_bands), (30, 6));
            assert!(grid.is_binary());
            assert_eq!(grid.rows[..10], db.entries()[0].grid.rows[..10]);
        }
    }

    #[test]
    fn database_roundtrips_and_checks_grids() {
        let dir = tempfile::tempdir().unwrap();
        let mut db = StateDatabase::new();
        let g1 = LabelGrid { n_bands: 3, rows: vec![vec![0, 1, 0], vec![1, 0, 0]] };
        db.push(g1.clone(), Provenance::Reconstructed).unwrap();
        db.push(g1.clone(), Provenance::Generated).unwrap();
        assert!(db.push(LabelGrid { n_bands: 3, rows: vec![vec![0, 2, 0], vec![0; 3]] }, Provenance::Generated).is_err());
        assert!(db.push(LabelGrid { n_bands: 3, rows: vec![vec![0; 3]] }, Provenance::Generated).is_err());
        db.save(dir.path()).unwrap();
        let back = StateDatabase::load(dir.path()).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.select(Some(Provenance::Generated), 10).len(), 1);
    }

    #[test]
    fn restricted_reward_bounds() {
        assert_eq!(restricted_reward(1.0, 1), 1.0);
        assert_eq!(restricted_reward(0.0, 0), 1.0);
        assert_eq!(restricted_reward(0.0, 1), 0.0);
        for i in 0..=10 {
            let r = restricted_reward(i as f64 / 10.0, (i % 2) as u8);
            assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn partial_episodes_supervise_only_the_sampled_band() {
        let agent = tiny_agent(0);
        let exp = collect_field_experience(scan().as_mut(), &presets::spec_a(), budget(1, 12), 3).unwrap();
        let stored = partial_to_stored(&agent, &exp.episodes()[0], 1).unwrap();
        assert!(stored.partial);
        for (t, &(band, obs)) in exp.episodes()[0].steps.iter().enumerate() {
            assert_eq!(stored.targets[t].iter().map(|&v| v as usize).sum::<usize>(), obs.class_id as usize);
            assert_eq!(stored.targets[t][band], obs.class_id);
            assert!((0.0..=1.0).contains(&stored.rewards[t]));
        }
    }

    #[test]
    fn finetuning_uses_only_partial_episodes() {
        let mut agent = tiny_agent(1);
        agent.train(&mut SpecSource { spec: presets::spec_a(), seed: 0 }, None).unwrap();
        let exp = collect_field_experience(scan().as_mut(), &presets::spec_c2(), budget(3, 12), 3).unwrap();
        let losses = finetune_partial(&mut agent, &exp).unwrap();
        assert!(!losses.is_empty());
        assert!(agent.replay().all(|e| e.partial));
    }

    #[test]
    fn state_mix_alternates_grids_and_lab() {
        let grid = LabelGrid { n_bands: 20, rows: vec![vec![1; 20]; 5] };
        let mut src = StateMixSource { grids: vec![grid], lab: presets::spec_a(), seed: 0 };
        let e0 = src.sample(0).unwrap();
        let e1 = src.sample(1).unwrap();
        assert_eq!(e0.truth(3), vec![1; 20]);
        assert_ne!(e1.truth(3), vec![1; 20]);
    }
}

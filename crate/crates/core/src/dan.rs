//! Deep anticipatory networks: one recurrent trunk with a Q head that
//! picks the band to sample and an M head that predicts the full state.
//!
//! Q is trained only by its own objective (temporal difference, or
//! regression onto information-gain labels for InfoMax) and M only by
//! weighted BCE against the truth. Predictive and InfoMax agents carry a
//! P head predicting the state of the step about to be sampled; the
//! information gain of an action is the mean absolute change between that
//! prediction and M's prediction once the observation is in.

use std::collections::VecDeque;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env_sim::{derive_seed, sample_environment, BandVector, EnvSpec, Environment, LabelGrid, Observation, ScriptedEnvironment};
use crate::error::{Error, Result};
use crate::harness::{encode_step, input_channels, run_episode, Controller, History, RewardKind};
use crate::metrics::{IouCounts, DEFAULT_THRESHOLD};
use crate::neural::{
    head_probs, objectness, probs_to_band_vector, wbce_logits, Adam, HasParams, HeadGrad, HeadOut, Layout, Network,
    NetworkConfig, RecurrentState, Scalar,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    ConvlstmDan,
    PredictiveDan,
    InfomaxDan,
}

impl AgentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::ConvlstmDan => "convlstm_dan",
            AgentKind::PredictiveDan => "predictive_dan",
            AgentKind::InfomaxDan => "infomax_dan",
        }
    }

    pub fn has_p_head(&self) -> bool {
        !matches!(self, AgentKind::ConvlstmDan)
    }
}

/// Trunk and head sizes of an agent's network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkShape {
    pub layout: Layout,
    pub feature_channels: usize,
    pub feature_kernel: usize,
    pub hidden: usize,
    pub lstm_kernel: usize,
    pub dueling: bool,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            layout: Layout::Conv,
            feature_channels: 16,
            feature_kernel: 5,
            hidden: 32,
            lstm_kernel: 3,
            dueling: true,
        }
    }
}

impl NetworkShape {
    pub fn network_config(&self, kind: AgentKind, n_bands: usize, n_classes: usize) -> NetworkConfig {
        let base = match self.layout {
            Layout::Conv => NetworkConfig::conv(n_bands, input_channels(n_classes), n_classes),
            Layout::Dense => NetworkConfig::dense(n_bands, input_channels(n_classes), n_classes),
        };
        NetworkConfig {
            feature_channels: self.feature_channels,
            feature_kernel: self.feature_kernel,
            hidden: self.hidden,
            lstm_kernel: self.lstm_kernel,
            dueling: self.dueling,
            p_head: kind.has_p_head(),
            q_head: true,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub t_steps: usize,
    pub batch_episodes: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episodes over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub target_sync: usize,
    pub updates_per_episode: usize,
    pub infogain_weight: f64,
    /// Reward of ConvLSTM-DAN; Predictive-DAN adds the weighted infogain
    /// to the instantaneous IoU.
    pub reward: RewardKind,
    pub eval_every: usize,
    pub learning_rate: f64,
    pub w_neg: f64,
    pub replay_capacity: usize,
    pub clip_norm: f64,
    /// Restore the network with the best evaluation score when training ends.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            t_steps: 100,
            batch_episodes: 8,
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            target_sync: 100,
            updates_per_episode: 4,
            infogain_weight: 10.0,
            reward: RewardKind::InIou,
            eval_every: 50,
            learning_rate: 1e-3,
            w_neg: crate::metrics::DEFAULT_W_NEG,
            replay_capacity: 1000,
            clip_norm: 10.0,
            keep_best: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_steps", self.t_steps),
            ("batch_episodes", self.batch_episodes),
            ("target_sync", self.target_sync),
            ("eval_every", self.eval_every),
            ("replay_capacity", self.replay_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1)".into()));
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0 && self.w_neg > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("learning_rate, w_neg and clip_norm must be positive".into()));
        }
        if self.replay_capacity < self.batch_episodes {
            return Err(Error::Config("replay_capacity must hold at least one batch".into()));
        }
        Ok(())
    }

    /// Linear decay from start to end over the first fraction of training.
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let span = (self.epsilon_decay_fraction * self.episodes as f64).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    pub fn reward_for(&self, kind: AgentKind) -> RewardKind {
        match kind {
            AgentKind::PredictiveDan => RewardKind::Predictive {
                weight: self.infogain_weight,
            },
            _ => self.reward,
        }
    }
}

/// Epsilon-greedy choice over Q values; ties go to the lowest band.
pub fn q_select_action<R: Rng>(q: &[f32], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..q.len());
    }
    let mut best = 0;
    for (b, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = b;
        }
    }
    best
}

/// Mean absolute difference between the prediction made before acting and
/// M's prediction after observing. Both are per-band objectness.
pub fn compute_infogain(p_before: Option<&[f64]>, m_after: &[f64]) -> Result<f64> {
    let p = p_before.ok_or(Error::MissingHead("P"))?;
    if p.len() != m_after.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: m_after.len(),
        });
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    Ok(p.iter().zip(m_after).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Step reward from the per-step IoU counts so far.
pub fn compute_reward(kind: &RewardKind, counts: &[IouCounts], t: usize, infogain: Option<f64>) -> Result<f64> {
    kind.reward(counts, t, infogain)
}

/// Information gain of sampling each band, given the prediction before
/// acting and a way to get M's prediction after observing band `b`.
pub fn infomax_labels_with(p_before: &[f64], mut m_after: impl FnMut(usize) -> Vec<f64>) -> Vec<f64> {
    (0..p_before.len())
        .map(|b| compute_infogain(Some(p_before), &m_after(b)).unwrap_or(0.0))
        .collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// A network acting as a [`Controller`]: Q picks the band, M predicts.
#[derive(Clone, Debug)]
pub struct DanPolicy {
    pub net: Network<f32>,
    pub kind: AgentKind,
    pub epsilon: f64,
    seed: u64,
    rng: ChaCha8Rng,
    n_classes: usize,
    state: RecurrentState<f32>,
    heads: Option<HeadOut<f32>>,
    last_q: Option<Vec<f64>>,
    infogain: Option<f64>,
}

impl DanPolicy {
    pub fn new(net: Network<f32>, kind: AgentKind, epsilon: f64, seed: u64) -> Self {
        let state = net.initial_state();
        Self {
            net,
            kind,
            epsilon,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            n_classes: 1,
            state,
            heads: None,
            last_q: None,
            infogain: None,
        }
    }

    fn k(&self) -> usize {
        self.net.config.m_outputs
    }

    fn current_heads(&mut self) -> &HeadOut<f32> {
        if self.heads.is_none() {
            self.heads = Some(self.net.heads(&self.state.h).expect("state matches network"));
        }
        self.heads.as_ref().unwrap()
    }

    /// Objectness of the P head at the current state.
    pub fn p_objectness(&mut self) -> Option<Vec<f64>> {
        let k = self.k();
        let p = self.current_heads().p.clone()?;
        Some(to_f64(&objectness(&head_probs(&p, k), k)))
    }

    fn m_objectness_of(&self, out: &HeadOut<f32>) -> Vec<f64> {
        let k = self.k();
        to_f64(&objectness(&head_probs(&out.m, k), k))
    }

    /// M-head prediction at the current state.
    pub fn m_prediction(&mut self) -> BandVector {
        let k = self.k();
        let m = self.current_heads().m.clone();
        probs_to_band_vector(&head_probs(&m, k), k)
    }

    /// Feeds one observed step, updating state, heads and infogain.
    pub fn advance(&mut self, band: usize, obs: Observation) {
        let p_before = self.p_objectness();
        let x = encode_step(self.net.config.n_bands, self.n_classes, Some((band, obs)));
        self.state = self.net.step(&self.state, &x).expect("input matches network");
        self.heads = None;
        let out = self.current_heads().clone();
        let m_after = self.m_objectness_of(&out);
        self.infogain = p_before.and_then(|p| compute_infogain(Some(&p), &m_after).ok());
    }

    /// Information gain of every band at the current state, observing
    /// `truth_row` counterfactually.
    pub fn infomax_labels(&mut self, truth_row: &[u8]) -> Vec<f64> {
        let Some(p) = self.p_objectness() else {
            return vec![0.0; truth_row.len()];
        };
        let n = self.net.config.n_bands;
        infomax_labels_with(&p, |b| {
            let x = encode_step(n, self.n_classes, Some((b, Observation::from_label(truth_row[b]))));
            let s = self.net.step(&self.state, &x).expect("input matches network");
            let out = self.net.heads(&s.h).expect("state matches network");
            self.m_objectness_of(&out)
        })
    }
}

impl Controller for DanPolicy {
    fn id(&self) -> String {
        self.kind.name().to_string()
    }

    fn reset(&mut self, n_bands: usize, n_classes: usize, episode_seed: u64) {
        if n_bands != self.net.config.n_bands {
            assert_eq!(
                self.net.config.layout,
                Layout::Conv,
                "a dense network is tied to its band count"
            );
            self.net.config.n_bands = n_bands;
        }
        self.n_classes = n_classes;
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, episode_seed));
        self.state = self.net.initial_state();
        self.heads = None;
        self.last_q = None;
        self.infogain = None;
    }

    fn select_band(&mut self, _history: &History) -> usize {
        let q = self.current_heads().q.clone().expect("DAN networks have a Q head");
        self.last_q = Some(to_f64(&q));
        let eps = self.epsilon;
        q_select_action(&q, eps, &mut self.rng)
    }

    fn predict(&mut self, history: &History) -> BandVector {
        if let Some(&(band, obs)) = history.last() {
            self.advance(band, obs);
        }
        self.m_prediction()
    }

    fn q_values(&self) -> Option<Vec<f64>> {
        self.last_q.clone()
    }

    fn infogain(&self) -> Option<f64> {
        self.infogain
    }
}

/// M-head prediction after feeding a whole history from the initial state.
pub fn m_predict(net: &Network<f32>, history: &History) -> Result<BandVector> {
    let mut state = net.initial_state();
    for &s in history.steps() {
        state = net.step(&state, &encode_step(net.config.n_bands, history.n_classes, Some(s)))?;
    }
    let k = net.config.m_outputs;
    Ok(probs_to_band_vector(&head_probs(&net.heads(&state.h)?.m, k), k))
}

/// One episode as stored for replay.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredEpisode {
    pub inputs: Vec<Vec<f32>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    /// Per-step class labels the M and P heads are trained against.
    pub targets: Vec<Vec<u8>>,
    /// When set, supervision and the M loss use only the sampled band.
    pub partial: bool,
    /// Per-step, per-band information gain (InfoMax only).
    pub infomax: Option<Vec<Vec<f32>>>,
}

impl StoredEpisode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub q: f64,
    pub m: f64,
    pub p: f64,
}

/// A point of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub eval_score: f64,
    pub train_reward: f64,
    pub losses: Losses,
}

/// Something to draw training environments from.
pub trait EpisodeSource {
    fn sample(&mut self, episode: usize) -> Result<Box<dyn Environment + Send>>;
}

impl<F> EpisodeSource for F
where
    F: FnMut(usize) -> Result<Box<dyn Environment + Send>>,
{
    fn sample(&mut self, episode: usize) -> Result<Box<dyn Environment + Send>> {
        self(episode)
    }
}

/// Fresh environments from one spec, seeded per episode.
#[derive(Clone, Debug)]
pub struct SpecSource {
    pub spec: EnvSpec,
    pub seed: u64,
}

impl EpisodeSource for SpecSource {
    fn sample(&mut self, episode: usize) -> Result<Box<dyn Environment + Send>> {
        Ok(Box::new(sample_environment(&self.spec, derive_seed(self.seed, episode as u64))?))
    }
}

/// A fixed environment, rebuilt on demand.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvTemplate {
    Spec { spec: EnvSpec, seed: u64 },
    Grid { grid: LabelGrid, n_classes: usize },
}

impl EnvTemplate {
    pub fn instantiate(&self) -> Result<Box<dyn Environment + Send>> {
        Ok(match self {
            EnvTemplate::Spec { spec, seed } => Box::new(sample_environment(spec, *seed)?),
            EnvTemplate::Grid { grid, n_classes } => Box::new(ScriptedEnvironment::new(grid.clone(), *n_classes)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalMetric {
    Cumulative,
    /// Block IoU over the final `n` steps.
    FinalBlock { n: usize },
}

/// Held-out environments scored during and after training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub envs: Vec<EnvTemplate>,
    pub t_steps: usize,
    pub metric: EvalMetric,
}

impl EvalSet {
    pub fn from_spec(spec: &EnvSpec, seeds: impl IntoIterator<Item = u64>, t_steps: usize) -> Self {
        Self {
            envs: seeds
                .into_iter()
                .map(|seed| EnvTemplate::Spec {
                    spec: spec.clone(),
                    seed,
                })
                .collect(),
            t_steps,
            metric: EvalMetric::Cumulative,
        }
    }

    /// Mean score of a controller over every environment.
    pub fn score<C: Controller + ?Sized>(&self, controller: &mut C) -> Result<f64> {
        let mut total = 0.0;
        for (i, tpl) in self.envs.iter().enumerate() {
            let mut env = tpl.instantiate()?;
            let log = run_episode(controller, env.as_mut(), self.t_steps, RewardKind::InIou, "eval", i as u64)?;
            total += match self.metric {
                EvalMetric::Cumulative => log.cumulative_iou(),
                EvalMetric::FinalBlock { n } => log.final_block_iou(n),
            };
        }
        Ok(total / self.envs.len().max(1) as f64)
    }
}

/// Seeds reserved for held-out evaluation; training seeds come from
/// [`derive_seed`] and do not collide in practice.
pub fn held_out_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| 1_000_000_000 + i).collect()
}

/// Seeds for model selection during training, disjoint from [`held_out_seeds`].
pub fn validation_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| 2_000_000_000 + i).collect()
}

/// A trainable DAN with its target network, optimizer and replay store.
#[derive(Clone, Debug)]
pub struct DanAgent {
    pub kind: AgentKind,
    pub net: Network<f32>,
    pub target: Network<f32>,
    pub config: TrainConfig,
    opt: Adam<f32>,
    replay: VecDeque<StoredEpisode>,
    updates: usize,
    episodes_seen: usize,
    rng: ChaCha8Rng,
}

impl DanAgent {
    pub fn new(kind: AgentKind, net_config: NetworkConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !net_config.q_head {
            return Err(Error::MissingHead("Q"));
        }
        if kind.has_p_head() && !net_config.p_head {
            return Err(Error::MissingHead("P"));
        }
        let net = Network::new(net_config, derive_seed(config.seed, 0xA11CE))?;
        Ok(Self::from_network(kind, net, config))
    }

    pub fn from_network(kind: AgentKind, net: Network<f32>, config: TrainConfig) -> Self {
        let mut opt = Adam::new(config.learning_rate as f32);
        opt.clip_norm = Some(config.clip_norm as f32);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5EED));
        Self {
            kind,
            target: net.clone(),
            net,
            config,
            opt,
            replay: VecDeque::new(),
            updates: 0,
            episodes_seen: 0,
            rng,
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn replay(&self) -> impl Iterator<Item = &StoredEpisode> {
        self.replay.iter()
    }

    /// Greedy evaluation policy.
    pub fn policy(&self) -> DanPolicy {
        DanPolicy::new(self.net.clone(), self.kind, 0.0, derive_seed(self.config.seed, 0xE7A1))
    }

    pub fn clear_replay(&mut self) {
        self.replay.clear();
    }

    pub fn push_episode(&mut self, ep: StoredEpisode) {
        if self.replay.len() == self.config.replay_capacity {
            self.replay.pop_front();
        }
        self.replay.push_back(ep);
    }

    /// One epsilon-greedy episode; returns the stored episode and its mean reward.
    pub fn rollout(&mut self, env: &mut dyn Environment, epsilon: f64) -> Result<(StoredEpisode, f64)> {
        let n = env.n_bands();
        let nc = env.n_classes();
        let seed = self.rng.gen();
        let mut policy = DanPolicy::new(self.net.clone(), self.kind, epsilon, seed);
        policy.reset(n, nc, seed);
        let reward_kind = self.config.reward_for(self.kind);
        let t_steps = self.config.t_steps;
        let mut history = History::new(n, nc);
        let mut counts = Vec::with_capacity(t_steps);
        let mut ep = StoredEpisode {
            inputs: Vec::with_capacity(t_steps),
            actions: Vec::with_capacity(t_steps),
            rewards: Vec::with_capacity(t_steps),
            targets: Vec::with_capacity(t_steps),
            partial: false,
            infomax: (self.kind == AgentKind::InfomaxDan).then(Vec::new),
        };
        for t in 0..t_steps {
            env.begin_step(t);
            let truth = env.truth(t);
            if let Some(labels) = ep.infomax.as_mut() {
                labels.push(policy.infomax_labels(&truth).into_iter().map(|v| v as f32).collect());
            }
            let action = policy.select_band(&history);
            let obs = env.observe(t, action)?;
            history.push(action, obs);
            let pred = policy.predict(&history);
            let truth_vec = BandVector::Labels(truth.clone());
            counts.push(IouCounts::between(&pred, &truth_vec, DEFAULT_THRESHOLD)?);
            let r = compute_reward(&reward_kind, &counts, t, policy.infogain())?;
            ep.inputs.push(encode_step(n, nc, Some((action, obs))));
            ep.actions.push(action);
            ep.rewards.push(r as f32);
            ep.targets.push(truth);
        }
        let mean = ep.rewards.iter().map(|&r| r as f64).sum::<f64>() / t_steps.max(1) as f64;
        Ok((ep, mean))
    }

    /// Accumulates the gradients of one episode's losses, scaled by `scale`.
    fn episode_gradients(&mut self, ep: &StoredEpisode, scale: f32) -> Result<Losses> {
        let losses = episode_loss(
            &mut self.net,
            &self.target,
            ep,
            self.config.gamma as f32,
            self.config.w_neg as f32,
            scale,
        )?;
        if !(losses.q.is_finite() && losses.m.is_finite() && losses.p.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite loss after {} updates (q {}, m {}, p {})",
                self.updates, losses.q, losses.m, losses.p
            )));
        }
        Ok(losses)
    }

    /// One optimizer step on a batch of episodes; syncs the target network
    /// every `target_sync` updates.
    pub fn dqn_update(&mut self, batch: &[StoredEpisode]) -> Result<Losses> {
        if batch.is_empty() {
            return Err(Error::Config("empty update batch".into()));
        }
        self.net.zero_grad();
        let scale = 1.0 / batch.len() as f32;
        let mut total = Losses::default();
        for ep in batch {
            let l = self.episode_gradients(ep, scale)?;
            total.q += l.q / batch.len() as f64;
            total.m += l.m / batch.len() as f64;
            total.p += l.p / batch.len() as f64;
        }
        self.opt
            .step(self.net.params_mut())
            .map_err(|e| Error::Divergence(format!("{e} at update {}", self.updates)))?;
        self.updates += 1;
        if self.updates % self.config.target_sync == 0 {
            self.target.copy_from(&self.net);
        }
        Ok(total)
    }

    /// Draws a batch from the replay store, without replacement.
    pub fn sample_batch(&mut self) -> Option<Vec<StoredEpisode>> {
        let n = self.config.batch_episodes;
        if self.replay.len() < n {
            return None;
        }
        let idx = rand::seq::index::sample(&mut self.rng, self.replay.len(), n);
        Some(idx.iter().map(|i| self.replay[i].clone()).collect())
    }

    /// Runs the configured number of update steps if the replay is full enough.
    pub fn update_from_replay(&mut self) -> Result<Option<Losses>> {
        let mut last = None;
        for _ in 0..self.config.updates_per_episode {
            let Some(batch) = self.sample_batch() else {
                break;
            };
            last = Some(self.dqn_update(&batch)?);
        }
        Ok(last)
    }

    /// Full training run. Evaluates every `eval_every` episodes and at the end.
    pub fn train(&mut self, source: &mut dyn EpisodeSource, eval: Option<&EvalSet>) -> Result<Vec<CurvePoint>> {
        let mut curve = Vec::new();
        let mut losses = Losses::default();
        let mut reward_acc = 0.0;
        let mut reward_n = 0usize;
        let mut best: Option<(f64, Network<f32>)> = None;
        for ep_idx in 0..self.config.episodes {
            let mut env = source.sample(ep_idx)?;
            let eps = self.config.epsilon_at(ep_idx);
            let (ep, mean_reward) = self.rollout(env.as_mut(), eps)?;
            reward_acc += mean_reward;
            reward_n += 1;
            self.push_episode(ep);
            self.episodes_seen += 1;
            if let Some(l) = self.update_from_replay()? {
                losses = l;
            }
            let done = ep_idx + 1 == self.config.episodes;
            if (ep_idx + 1) % self.config.eval_every == 0 || done {
                let score = match eval {
                    Some(set) => set.score(&mut self.policy())?,
                    None => f64::NAN,
                };
                let point = CurvePoint {
                    episode: ep_idx + 1,
                    eval_score: score,
                    train_reward: reward_acc / reward_n.max(1) as f64,
                    losses,
                };
                debug!("{} episode {}: eval {:.4} reward {:.4}", self.kind.name(), point.episode, score, point.train_reward);
                if self.config.keep_best && eval.is_some() && best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, self.net.clone()));
                }
                curve.push(point);
                reward_acc = 0.0;
                reward_n = 0;
            }
        }
        if let Some((score, net)) = best {
            info!("{}: keeping the network scoring {score:.4}", self.kind.name());
            self.net = net;
            self.target.copy_from(&self.net);
        }
        info!(
            "{} trained for {} episodes ({} updates)",
            self.kind.name(),
            self.config.episodes,
            self.updates
        );
        Ok(curve)
    }
}

/// Combined loss of one episode: WBCE of M(s_{t+1}) and P(s_t) against the
/// step's labels, plus the TD (or InfoMax regression) loss of Q with targets
/// from `target`. Gradients scaled by `scale` are accumulated into `net`.
pub fn episode_loss<F: Scalar>(
    net: &mut Network<F>,
    target: &Network<F>,
    ep: &StoredEpisode,
    gamma: F,
    w_neg: F,
    scale: F,
) -> Result<Losses> {
    let t_len = ep.len();
    if t_len == 0 {
        return Ok(Losses::default());
    }
    let xs: Vec<Vec<F>> = ep
        .inputs
        .iter()
        .map(|r| r.iter().map(|&v| F::from_f32(v).expect("input")).collect())
        .collect();
    let trace = net.forward_sequence(&xs)?;
    let k = net.config.m_outputs;
    let inv_t = scale / F::from_usize(t_len).expect("length");
    let mut grads: Vec<HeadGrad<F>> = vec![HeadGrad::default(); t_len + 1];
    let mut losses = Losses::default();

    // M(s_{t+1}) predicts the state of step t.
    for t in 0..t_len {
        let mask = ep.partial.then(|| one_hot_mask(ep.targets[t].len(), ep.actions[t]));
        let (l, g) = wbce_logits(&trace.heads[t + 1].m, k, &ep.targets[t], mask.as_deref(), w_neg);
        losses.m += l.to_f64().unwrap_or(f64::NAN) / t_len as f64;
        grads[t + 1].m = Some(g.into_iter().map(|v| v * inv_t).collect());
    }

    // P(s_t) predicts the same step before its observation arrives.
    if net.p_head.is_some() {
        for t in 0..t_len {
            let p = trace.heads[t].p.as_ref().ok_or(Error::MissingHead("P"))?;
            let mask = ep.partial.then(|| one_hot_mask(ep.targets[t].len(), ep.actions[t]));
            let (l, g) = wbce_logits(p, k, &ep.targets[t], mask.as_deref(), w_neg);
            losses.p += l.to_f64().unwrap_or(f64::NAN) / t_len as f64;
            grads[t].p = Some(g.into_iter().map(|v| v * inv_t).collect());
        }
    }

    if let Some(labels) = &ep.infomax {
        for t in 0..t_len {
            let q = trace.heads[t].q.as_ref().ok_or(Error::MissingHead("Q"))?;
            let nb = F::from_usize(q.len()).expect("bands");
            let two = F::from_f64(2.0).expect("two");
            let mut dq = vec![F::zero(); q.len()];
            for b in 0..q.len() {
                let d = q[b] - F::from_f32(labels[t][b]).expect("label");
                losses.q += (d * d / nb).to_f64().unwrap_or(f64::NAN) / t_len as f64;
                dq[b] = two * d / nb * inv_t;
            }
            grads[t].q = Some(dq);
        }
    } else {
        let target_trace = target.forward_sequence(&xs)?;
        for t in 0..t_len {
            let q = trace.heads[t].q.as_ref().ok_or(Error::MissingHead("Q"))?;
            let a = ep.actions[t];
            let r = F::from_f32(ep.rewards[t]).expect("reward");
            let y = if t + 1 == t_len {
                r
            } else {
                let next = target_trace.heads[t + 1].q.as_ref().ok_or(Error::MissingHead("Q"))?;
                r + gamma * next.iter().fold(F::neg_infinity(), |m, &v| m.max(v))
            };
            let d = q[a] - y;
            losses.q += (d * d).to_f64().unwrap_or(f64::NAN) / t_len as f64;
            let mut dq = vec![F::zero(); q.len()];
            dq[a] = F::from_f64(2.0).expect("two") * d * inv_t;
            grads[t].q = Some(dq);
        }
    }
    net.backward_sequence(&trace, &grads)?;
    Ok(losses)
}

fn one_hot_mask(n: usize, band: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    m[band] = true;
    m
}

/// Training curve as CSV: `episode,eval_score,train_reward,q_loss,m_loss,p_loss`.
pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("episode,eval_score,train_reward,q_loss,m_loss,p_loss\n");
    for p in curve {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            p.episode, p.eval_score, p.train_reward, p.losses.q, p.losses.m, p.losses.p
        ));
    }
    s
}

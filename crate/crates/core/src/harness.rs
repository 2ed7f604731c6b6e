//! Controller/environment episode loop.
//!
//! Each step is act, observe, predict: the controller picks a band from the
//! history so far, the environment reports the detection at that band, the
//! observation is appended to the history, and only then does the
//! controller predict the full state for the same step. Controllers see the
//! [`History`] and nothing else.

use serde::{Deserialize, Serialize};

use crate::env_sim::{BandVector, Environment, Observation};
use crate::error::{Error, Result};
use crate::metrics::{self, IouCounts, DEFAULT_THRESHOLD};

/// Actions and observations so far.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub n_bands: usize,
    pub n_classes: usize,
    steps: Vec<(usize, Observation)>,
}

impl History {
    pub fn new(n_bands: usize, n_classes: usize) -> Self {
        Self {
            n_bands,
            n_classes,
            steps: Vec::new(),
        }
    }

    pub fn from_steps(n_bands: usize, n_classes: usize, steps: Vec<(usize, Observation)>) -> Self {
        Self {
            n_bands,
            n_classes,
            steps,
        }
    }

    pub fn push(&mut self, band: usize, obs: Observation) {
        self.steps.push((band, obs));
    }

    pub fn steps(&self) -> &[(usize, Observation)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<&(usize, Observation)> {
        self.steps.last()
    }

    pub fn encode(&self) -> EncodedGrid {
        encode_history(self, self.n_bands, self.n_classes)
    }
}

/// Input channels per band: sampled-band one-hot, detection, and one-hot
/// class channels in multi-class mode.
pub fn input_channels(n_classes: usize) -> usize {
    if n_classes > 1 {
        2 + n_classes
    } else {
        2
    }
}

/// Frequency-time input grid, layout `[step][band][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGrid {
    pub n_steps: usize,
    pub n_bands: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl EncodedGrid {
    pub fn row(&self, step: usize) -> &[f32] {
        let w = self.n_bands * self.channels;
        &self.data[step * w..(step + 1) * w]
    }

    pub fn at(&self, step: usize, band: usize, channel: usize) -> f32 {
        self.data[(step * self.n_bands + band) * self.channels + channel]
    }
}

/// Encodes one step into a `n_bands x channels` row. `None` gives the
/// all-zero row used before the first action.
pub fn encode_step(n_bands: usize, n_classes: usize, step: Option<(usize, Observation)>) -> Vec<f32> {
    let c = input_channels(n_classes);
    let mut row = vec![0.0f32; n_bands * c];
    if let Some((band, obs)) = step {
        row[band * c] = 1.0;
        row[band * c + 1] = f32::from(obs.detection);
        if n_classes > 1 && obs.class_id > 0 {
            row[band * c + 1 + obs.class_id as usize] = 1.0;
        }
    }
    row
}

pub fn encode_history(history: &History, n_bands: usize, n_classes: usize) -> EncodedGrid {
    let channels = input_channels(n_classes);
    let mut data = Vec::with_capacity(history.len() * n_bands * channels);
    for &s in history.steps() {
        data.extend(encode_step(n_bands, n_classes, Some(s)));
    }
    EncodedGrid {
        n_steps: history.len(),
        n_bands,
        channels,
        data,
    }
}

/// Inverse of [`encode_history`].
pub fn decode_history(grid: &EncodedGrid) -> Result<Vec<(usize, Observation)>> {
    let n_classes = if grid.channels > 2 { grid.channels - 2 } else { 1 };
    (0..grid.n_steps)
        .map(|s| {
            let band = (0..grid.n_bands)
                .find(|&b| grid.at(s, b, 0) == 1.0)
                .ok_or_else(|| Error::Shape(format!("step {s} has no sampled band")))?;
            let detection = grid.at(s, band, 1) as u8;
            let class_id = if n_classes > 1 {
                (0..n_classes)
                    .find(|&k| grid.at(s, band, 2 + k) == 1.0)
                    .map_or(0, |k| k as u8 + 1)
            } else {
                detection
            };
            Ok((band, Observation { detection, class_id }))
        })
        .collect()
}

/// A partially observing band-selection policy with a state predictor.
pub trait Controller {
    fn id(&self) -> String;

    /// Clears all per-episode state.
    fn reset(&mut self, n_bands: usize, n_classes: usize, episode_seed: u64);

    fn select_band(&mut self, history: &History) -> usize;

    /// Predicts the full state for the step whose observation is the last
    /// entry of `history`.
    fn predict(&mut self, history: &History) -> BandVector;

    /// Action values behind the last selection, when the controller has them.
    fn q_values(&self) -> Option<Vec<f64>> {
        None
    }

    /// Information gain of the last action, for controllers with a
    /// next-state predictor.
    fn infogain(&self) -> Option<f64> {
        None
    }
}

impl<C: Controller + ?Sized> Controller for Box<C> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn reset(&mut self, n_bands: usize, n_classes: usize, episode_seed: u64) {
        (**self).reset(n_bands, n_classes, episode_seed)
    }
    fn select_band(&mut self, history: &History) -> usize {
        (**self).select_band(history)
    }
    fn predict(&mut self, history: &History) -> BandVector {
        (**self).predict(history)
    }
    fn q_values(&self) -> Option<Vec<f64>> {
        (**self).q_values()
    }
    fn infogain(&self) -> Option<f64> {
        (**self).infogain()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RewardKind {
    /// Instantaneous IoU of the step.
    InIou,
    /// Differential block IoU with blocks of `n`; 0 while `t < n`.
    DbIou { n: usize },
    /// Instantaneous IoU plus `weight` times the action's information gain.
    Predictive { weight: f64 },
}

impl Default for RewardKind {
    fn default() -> Self {
        RewardKind::InIou
    }
}

impl RewardKind {
    pub fn predictive() -> Self {
        RewardKind::Predictive { weight: 10.0 }
    }

    /// Reward of step `t` given the per-step IoU counts up to and including `t`.
    pub fn reward(&self, counts: &[IouCounts], t: usize, infogain: Option<f64>) -> Result<f64> {
        let instant = counts[t].score();
        match *self {
            RewardKind::InIou => Ok(instant),
            RewardKind::DbIou { n } => {
                if t < n {
                    Ok(0.0)
                } else {
                    metrics::diff_block_from_counts(counts, t, n)
                }
            }
            RewardKind::Predictive { weight } => {
                let gain = infogain.ok_or(Error::MissingHead("P"))?;
                Ok(instant + weight * gain)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub action: usize,
    pub observation: Observation,
    pub prediction: BandVector,
    pub truth: BandVector,
    pub reward: f64,
    pub q_values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub spec_id: String,
    pub controller_id: String,
    pub n_bands: usize,
    pub n_classes: usize,
    pub reward_kind: RewardKind,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn counts(&self) -> Vec<IouCounts> {
        self.steps
            .iter()
            .map(|s| IouCounts::between(&s.prediction, &s.truth, DEFAULT_THRESHOLD).expect("log rows share n_bands"))
            .collect()
    }

    pub fn instant_iou_curve(&self) -> Vec<f64> {
        self.counts().iter().map(IouCounts::score).collect()
    }

    /// Cumulative IoU at every step.
    pub fn cumulative_iou_curve(&self) -> Vec<f64> {
        let mut acc = IouCounts::default();
        self.counts()
            .into_iter()
            .map(|c| {
                acc += c;
                acc.score()
            })
            .collect()
    }

    /// Block IoU (window `n`) at every step.
    pub fn block_iou_curve(&self, n: usize) -> Vec<f64> {
        let counts = self.counts();
        (0..counts.len())
            .map(|t| metrics::block_from_counts(&counts[..=t], n).expect("non-empty"))
            .collect()
    }

    pub fn cumulative_iou(&self) -> f64 {
        self.counts().into_iter().sum::<IouCounts>().score()
    }

    /// Pooled IoU over the final `n` steps.
    pub fn final_block_iou(&self, n: usize) -> f64 {
        metrics::block_from_counts(&self.counts(), n).unwrap_or(1.0)
    }

    /// Recomputes every reward from logged predictions and truth. Rewards
    /// that depend on an information gain are not recomputable.
    pub fn recompute_rewards(&self) -> Result<Vec<f64>> {
        let counts = self.counts();
        (0..counts.len())
            .map(|t| self.reward_kind.reward(&counts, t, Some(0.0)))
            .collect()
    }

    /// CSV: `t,action,obs,reward,pred_0..,truth_0..`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,action,obs,reward");
        for b in 0..self.n_bands {
            s.push_str(&format!(",pred_{b}"));
        }
        for b in 0..self.n_bands {
            s.push_str(&format!(",truth_{b}"));
        }
        s.push('\n');
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{:.6}", r.t, r.action, r.observation.class_id, r.reward));
            for p in r.prediction.objectness_vec() {
                s.push_str(&format!(",{p:.6}"));
            }
            for v in r.truth.labels(DEFAULT_THRESHOLD) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn truth_vector(labels: Vec<u8>, n_classes: usize) -> BandVector {
    if n_classes > 1 {
        BandVector::Labels(labels)
    } else {
        BandVector::Binary(labels)
    }
}

/// Runs one episode of `t_steps` steps. The controller is reset first.
pub fn run_episode<C, E>(
    controller: &mut C,
    env: &mut E,
    t_steps: usize,
    reward_kind: RewardKind,
    spec_id: &str,
    seed: u64,
) -> Result<EpisodeLog>
where
    C: Controller + ?Sized,
    E: Environment + ?Sized,
{
    let n_bands = env.n_bands();
    let n_classes = env.n_classes();
    controller.reset(n_bands, n_classes, seed);
    let mut history = History::new(n_bands, n_classes);
    let mut counts = Vec::with_capacity(t_steps);
    let mut steps = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        env.begin_step(t);
        let action = controller.select_band(&history);
        if action >= n_bands {
            return Err(Error::ControllerAction { t, band: action, n_bands });
        }
        let q_values = controller.q_values();
        let observation = env.observe(t, action)?;
        history.push(action, observation);
        let prediction = controller.predict(&history);
        if prediction.len() != n_bands {
            return Err(Error::LengthMismatch {
                expected: n_bands,
                got: prediction.len(),
            });
        }
        let truth = truth_vector(env.truth(t), n_classes);
        counts.push(IouCounts::between(&prediction, &truth, DEFAULT_THRESHOLD)?);
        let reward = reward_kind.reward(&counts, t, controller.infogain())?;
        steps.push(StepRecord {
            t,
            action,
            observation,
            prediction,
            truth,
            reward,
            q_values,
        });
    }
    Ok(EpisodeLog {
        seed,
        spec_id: spec_id.to_string(),
        controller_id: controller.id(),
        n_bands,
        n_classes,
        reward_kind,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_sim::{presets, sample_environment, EnvironmentInstance};

    /// Reads the truth it is handed before each episode; stands in for a
    /// perfect predictor.
    struct Oracle {
        grid: Vec<Vec<u8>>,
    }

    impl Controller for Oracle {
        fn id(&self) -> String {
            "oracle".into()
        }
        fn reset(&mut self, _: usize, _: usize, _: u64) {}
        fn select_band(&mut self, _: &History) -> usize {
            0
        }
        fn predict(&mut self, h: &History) -> BandVector {
            BandVector::Binary(self.grid[h.len() - 1].clone())
        }
    }

    struct Empty;

    impl Controller for Empty {
        fn id(&self) -> String {
            "empty".into()
        }
        fn reset(&mut self, _: usize, _: usize, _: u64) {}
        fn select_band(&mut self, h: &History) -> usize {
            h.len() % h.n_bands
        }
        fn predict(&mut self, h: &History) -> BandVector {
            BandVector::zeros(h.n_bands)
        }
    }

    struct OutOfRange;

    impl Controller for OutOfRange {
        fn id(&self) -> String {
            "bad".into()
        }
        fn reset(&mut self, _: usize, _: usize, _: u64) {}
        fn select_band(&mut self, h: &History) -> usize {
            h.n_bands
        }
        fn predict(&mut self, h: &History) -> BandVector {
            BandVector::zeros(h.n_bands)
        }
    }

    #[test]
    fn oracle_scores_one_everywhere() {
        let spec = presets::spec_b2();
        let mut env = sample_environment(&spec, 5).unwrap();
        let grid = env.clone().truth_grid(100).rows;
        let mut c = Oracle { grid };
        let log = run_episode(&mut c, &mut env, 100, RewardKind::InIou, "B2", 5).unwrap();
        assert!(log.instant_iou_curve().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_predictor_scores_zero_on_spec_a() {
        let mut env = sample_environment(&presets::spec_a(), 9).unwrap();
        let log = run_episode(&mut Empty, &mut env, 100, RewardKind::InIou, "A", 9).unwrap();
        assert!(log.steps.iter().all(|s| s.reward == 0.0));
        assert_eq!(log.cumulative_iou(), 0.0);
    }

    #[test]
    fn out_of_range_action_aborts() {
        let mut env = sample_environment(&presets::spec_a(), 1).unwrap();
        let err = run_episode(&mut OutOfRange, &mut env, 10, RewardKind::InIou, "A", 1).unwrap_err();
        assert!(matches!(err, Error::ControllerAction { t: 0, band: 20, .. }));
    }

    #[test]
    fn predictive_reward_needs_infogain() {
        let mut env = sample_environment(&presets::spec_a(), 1).unwrap();
        assert!(run_episode(&mut Empty, &mut env, 3, RewardKind::predictive(), "A", 1).is_err());
    }

    #[test]
    fn encoding_single_step() {
        let mut h = History::new(20, 1);
        h.push(5, Observation { detection: 1, class_id: 1 });
        let g = h.encode();
        assert_eq!((g.n_steps, g.n_bands, g.channels), (1, 20, 2));
        for b in 0..20 {
            assert_eq!(g.at(0, b, 0), if b == 5 { 1.0 } else { 0.0 });
            assert_eq!(g.at(0, b, 1), if b == 5 { 1.0 } else { 0.0 });
        }
        assert_eq!(History::new(20, 1).encode().data.len(), 0);
        assert!(encode_step(20, 1, None).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_round_trips_multiclass() {
        let steps = vec![
            (3, Observation { detection: 1, class_id: 2 }),
            (0, Observation::none()),
            (7, Observation { detection: 1, class_id: 3 }),
        ];
        let h = History::from_steps(10, 3, steps.clone());
        assert_eq!(decode_history(&h.encode()).unwrap(), steps);
    }

    #[test]
    fn db_iou_is_zero_during_warmup_and_for_perfect_runs() {
        let spec = presets::spec_a();
        let env0 = EnvironmentInstance::from_pairs(&spec, sample_environment(&spec, 2).unwrap().pairs, 2);
        let grid = env0.clone().truth_grid(40).rows;
        let mut env = env0;
        let log = run_episode(&mut Oracle { grid }, &mut env, 40, RewardKind::DbIou { n: 5 }, "A", 2).unwrap();
        assert!(log.steps.iter().all(|s| s.reward == 0.0));
        assert_eq!(log.recompute_rewards().unwrap(), log.steps.iter().map(|s| s.reward).collect::<Vec<_>>());
    }
}

//! Config-driven experiment runner.
//!
//! An experiment is a TOML file naming its specs, controllers, seeds and
//! budgets. Running it writes a manifest, CSV tables and curves, and agent
//! checkpoints into an output directory. Every random draw derives from the
//! configured seed, so a rerun reproduces every file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{make_baseline, BaselineKind};
use crate::dan::{
    curve_to_csv, held_out_seeds, validation_seeds, AgentKind, DanAgent, EnvTemplate, EvalMetric, EvalSet,
    NetworkShape, SpecSource, TrainConfig,
};
use crate::env_sim::{derive_seed, presets, EnvSpec, LabelGrid};
use crate::error::{Error, Result};
use crate::feedback::{
    bootstrap, cell_accuracy, collect_field_experience, estimate_field_spec, finetune_partial, persistent_grid,
    retrain_on_states, retrain_pooled, simulate_lab_pairs, BootstrapConfig, Budget, Generator, GeneratorConfig,
    PoolMode, Provenance, Reconstructor, ReconstructorConfig, SpecPool, StateDatabase,
};
use crate::harness::{run_episode, Controller, EpisodeLog, RewardKind};
use crate::metrics::{iou_instant, IouConfig};
use crate::neural::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    Evaluate,
    CompareBaselines,
    FeedbackSpec,
    FeedbackBootstrap,
    FeedbackState,
    FinetunePartial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    ConvlstmDan,
    PredictiveDan,
    InfomaxDan,
    Random,
    Scan,
    ScanDwell,
    Expert,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::ConvlstmDan => "convlstm_dan",
            ControllerKind::PredictiveDan => "predictive_dan",
            ControllerKind::InfomaxDan => "infomax_dan",
            ControllerKind::Random => "random",
            ControllerKind::Scan => "scan",
            ControllerKind::ScanDwell => "scan_dwell",
            ControllerKind::Expert => "expert",
        }
    }

    pub fn agent(&self) -> Option<AgentKind> {
        match self {
            ControllerKind::ConvlstmDan => Some(AgentKind::ConvlstmDan),
            ControllerKind::PredictiveDan => Some(AgentKind::PredictiveDan),
            ControllerKind::InfomaxDan => Some(AgentKind::InfomaxDan),
            _ => None,
        }
    }

    pub fn baseline(&self) -> Option<BaselineKind> {
        match self {
            ControllerKind::Random => Some(BaselineKind::Random),
            ControllerKind::Scan => Some(BaselineKind::Scan),
            ControllerKind::ScanDwell => Some(BaselineKind::ScanDwell),
            ControllerKind::Expert => Some(BaselineKind::Expert),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub t_steps: usize,
    pub iou: IouConfig,
    /// Window of the final Block-IoU column.
    pub final_block: usize,
    /// Validation episodes for model selection while training (0 disables).
    pub validation_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            t_steps: 100,
            iou: IouConfig::default(),
            final_block: 33,
            validation_episodes: 0,
        }
    }
}

fn default_retrain() -> TrainConfig {
    TrainConfig {
        episodes: 200,
        epsilon_start: 0.3,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub budget_episodes: usize,
    pub budget_t_steps: usize,
    /// Controller deployed in the field. Unset: the trained agent.
    pub deploy: Option<ControllerKind>,
    /// Spec whose ranges bound spec estimation. Unset: the built-in
    /// estimation prior.
    pub estimation_prior: Option<String>,
    pub estimate_weight: f64,
    /// Also run the newest-estimate-only pool in bootstrapping.
    pub ablation: bool,
    pub retrain: TrainConfig,
    /// Numbers of stored grids to retrain on, one arm each.
    pub state_counts: Vec<usize>,
    pub lab_pairs: usize,
    /// Spec simulated for reconstructor training pairs. Unset: the lab spec.
    pub reconstructor_spec: Option<String>,
    pub reconstructor: ReconstructorConfig,
    /// Extra generated grids added to the state database.
    pub generate: usize,
    pub generator: GeneratorConfig,
    pub finetune: TrainConfig,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            budget_episodes: 100,
            budget_t_steps: 100,
            deploy: None,
            estimation_prior: None,
            estimate_weight: 0.7,
            ablation: false,
            retrain: default_retrain(),
            state_counts: vec![100],
            lab_pairs: 100,
            reconstructor_spec: None,
            reconstructor: ReconstructorConfig::default(),
            generate: 0,
            generator: GeneratorConfig::default(),
            finetune: default_retrain(),
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_lab() -> String {
    "lab".into()
}

fn default_agent() -> ControllerKind {
    ControllerKind::ConvlstmDan
}

/// Parsed experiment file. `seed` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Spec name to `preset:NAME` or a spec file path (relative to the
    /// config file).
    pub specs: BTreeMap<String, String>,
    #[serde(default = "default_lab")]
    pub lab: String,
    #[serde(default)]
    pub field: Option<String>,
    /// Field specs of bootstrapping, in deployment order.
    #[serde(default)]
    pub fields: Vec<String>,
    /// Prior of the hypothesis controllers. Unset: the lab spec.
    #[serde(default)]
    pub prior: Option<String>,
    /// Specs to evaluate on. Unset: the field spec if any, else the lab spec
    /// (every spec for `compare_baselines`).
    #[serde(default)]
    pub eval_specs: Vec<String>,
    #[serde(default)]
    pub controllers: Vec<ControllerKind>,
    #[serde(default = "default_agent")]
    pub agent: ControllerKind,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkShape,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub feedback: FeedbackConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn spec_names(&self) -> Vec<&String> {
        let mut names = vec![&self.lab];
        names.extend(self.field.iter());
        names.extend(self.fields.iter());
        names.extend(self.prior.iter());
        names.extend(self.feedback.estimation_prior.iter());
        names.extend(self.feedback.reconstructor_spec.iter());
        names.extend(self.eval_specs.iter());
        names
    }

    /// Loads and validates every referenced spec.
    pub fn resolve(&self, base_dir: &Path) -> Result<BTreeMap<String, EnvSpec>> {
        let mut out = BTreeMap::new();
        for (name, source) in &self.specs {
            let spec = match source.strip_prefix("preset:") {
                Some(preset) => presets::by_name(preset)
                    .ok_or_else(|| Error::Config(format!("spec {name}: unknown preset {preset:?}")))?,
                None => {
                    let path = base_dir.join(source);
                    let text = fs::read_to_string(&path)
                        .map_err(|e| Error::Config(format!("spec {name}: {}: {e}", path.display())))?;
                    EnvSpec::parse(&text)?
                }
            };
            spec.validated()?;
            out.insert(name.clone(), spec);
        }
        for name in self.spec_names() {
            if !out.contains_key(name) {
                return Err(Error::Config(format!("spec {name:?} is referenced but not defined in [specs]")));
            }
        }
        self.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.iou.validate()?;
        if self.eval.episodes == 0 || self.eval.t_steps == 0 || self.eval.final_block == 0 {
            return Err(Error::Config("eval episodes, t_steps and final_block must be positive".into()));
        }
        if self.agent.agent().is_none() {
            return Err(Error::Config(format!("agent must be a DAN kind, not {}", self.agent.name())));
        }
        let needs_field = matches!(
            self.kind,
            ExperimentKind::FeedbackSpec | ExperimentKind::FeedbackState | ExperimentKind::FinetunePartial
        );
        if needs_field && self.field.is_none() {
            return Err(Error::Config(format!("{:?} needs a field spec", self.kind)));
        }
        if self.kind == ExperimentKind::FeedbackBootstrap && self.fields.is_empty() {
            return Err(Error::Config("feedback_bootstrap needs at least one entry in fields".into()));
        }
        if !(0.0..=1.0).contains(&self.feedback.estimate_weight) {
            return Err(Error::Config("feedback.estimate_weight must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-episode result of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub seed: u64,
    pub cumulative_iou: f64,
    pub final_block_iou: f64,
}

/// Evaluation of one controller on one environment set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub controller: String,
    pub spec: String,
    pub block_n: usize,
    pub final_block: usize,
    pub episodes: Vec<EpisodeScore>,
    pub instant_mean: Vec<f64>,
    pub instant_std: Vec<f64>,
    pub block_mean: Vec<f64>,
    pub block_std: Vec<f64>,
    pub cumulative_mean: Vec<f64>,
    pub cumulative_std: Vec<f64>,
}

fn mean_std(columns: &[Vec<f64>], t: usize) -> (f64, f64) {
    let n = columns.len().max(1) as f64;
    let mean = columns.iter().map(|c| c[t]).sum::<f64>() / n;
    let var = columns.iter().map(|c| (c[t] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalSummary {
    fn from_logs(controller: &str, spec: &str, logs: &[EpisodeLog], block_n: usize, final_block: usize) -> Self {
        let t_len = logs.iter().map(|l| l.steps.len()).min().unwrap_or(0);
        let instant: Vec<Vec<f64>> = logs.iter().map(|l| l.instant_iou_curve()).collect();
        let block: Vec<Vec<f64>> = logs.iter().map(|l| l.block_iou_curve(block_n)).collect();
        let cumulative: Vec<Vec<f64>> = logs.iter().map(|l| l.cumulative_iou_curve()).collect();
        let stats = |cols: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) { (0..t_len).map(|t| mean_std(cols, t)).unzip() };
        let (instant_mean, instant_std) = stats(&instant);
        let (block_mean, block_std) = stats(&block);
        let (cumulative_mean, cumulative_std) = stats(&cumulative);
        Self {
            controller: controller.to_string(),
            spec: spec.to_string(),
            block_n,
            final_block,
            episodes: logs
                .iter()
                .map(|l| EpisodeScore {
                    seed: l.seed,
                    cumulative_iou: l.cumulative_iou(),
                    final_block_iou: l.final_block_iou(final_block),
                })
                .collect(),
            instant_mean,
            instant_std,
            block_mean,
            block_std,
            cumulative_mean,
            cumulative_std,
        }
    }

    pub fn mean_cumulative(&self) -> f64 {
        self.episodes.iter().map(|e| e.cumulative_iou).sum::<f64>() / self.episodes.len().max(1) as f64
    }

    pub fn mean_final_block(&self) -> f64 {
        self.episodes.iter().map(|e| e.final_block_iou).sum::<f64>() / self.episodes.len().max(1) as f64
    }
}

/// Builds a fresh controller for one evaluation episode.
pub type ControllerFactory<'a> = dyn Fn() -> Result<Box<dyn Controller + Send>> + Sync + 'a;

/// Runs a controller on every environment, episode-parallel. Episode `i`
/// resets the controller with the environment's seed (grids use `i`).
pub fn evaluate_envs(
    make: &ControllerFactory<'_>,
    envs: &[EnvTemplate],
    t_steps: usize,
    spec_name: &str,
) -> Result<Vec<EpisodeLog>> {
    envs.par_iter()
        .enumerate()
        .map(|(i, tpl)| {
            let seed = match tpl {
                EnvTemplate::Spec { seed, .. } => *seed,
                EnvTemplate::Grid { .. } => i as u64,
            };
            let mut controller = make()?;
            let mut env = tpl.instantiate()?;
            run_episode(controller.as_mut(), env.as_mut(), t_steps, RewardKind::InIou, spec_name, seed)
        })
        .collect()
}

/// Evaluates a controller on one spec over a fixed seed list.
pub fn evaluate_controller(
    make: &ControllerFactory<'_>,
    spec: &EnvSpec,
    spec_name: &str,
    seeds: &[u64],
    t_steps: usize,
    iou: &IouConfig,
    final_block: usize,
) -> Result<(EvalSummary, Vec<EpisodeLog>)> {
    let envs: Vec<EnvTemplate> = seeds
        .iter()
        .map(|&seed| EnvTemplate::Spec {
            spec: spec.clone(),
            seed,
        })
        .collect();
    let logs = evaluate_envs(make, &envs, t_steps, spec_name)?;
    let name = logs.first().map(|l| l.controller_id.clone()).unwrap_or_default();
    Ok((EvalSummary::from_logs(&name, spec_name, &logs, iou.block_n, final_block), logs))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// One CSV per spec: `t`, then mean/std instantaneous IoU, mean/std block
/// IoU and mean cumulative IoU of every controller.
pub fn curves_to_csv(summaries: &[&EvalSummary]) -> String {
    let mut s = String::from("t");
    for e in summaries {
        let c = &e.controller;
        s.push_str(&format!(
            ",{c}_iou_mean,{c}_iou_std,{c}_block_mean,{c}_block_std,{c}_cumulative_mean,{c}_cumulative_std"
        ));
    }
    s.push('\n');
    let t_len = summaries.iter().map(|e| e.instant_mean.len()).min().unwrap_or(0);
    for t in 0..t_len {
        s.push_str(&t.to_string());
        for e in summaries {
            for v in [
                e.instant_mean[t],
                e.instant_std[t],
                e.block_mean[t],
                e.block_std[t],
                e.cumulative_mean[t],
                e.cumulative_std[t],
            ] {
                s.push(',');
                s.push_str(&fmt(v));
            }
        }
        s.push('\n');
    }
    s
}

/// Per-episode scores of several summaries.
pub fn episodes_to_csv(summaries: &[&EvalSummary]) -> String {
    let mut s = String::from("controller,spec,seed,cumulative_iou,final_block_iou\n");
    for e in summaries {
        for ep in &e.episodes {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.controller,
                e.spec,
                ep.seed,
                fmt(ep.cumulative_iou),
                fmt(ep.final_block_iou)
            ));
        }
    }
    s
}

/// Aligned truth, prediction, Q-value and reward blocks of one episode.
pub fn export_episode_render(log: &EpisodeLog) -> String {
    let mut header = String::from("t");
    for b in 0..log.n_bands {
        header.push_str(&format!(",band_{b}"));
    }
    let mut s = String::new();
    let mut block = |title: &str, rows: &mut dyn Iterator<Item = (usize, Vec<String>)>| {
        s.push_str(&format!("# {title}\n{header}\n"));
        for (t, cells) in rows {
            s.push_str(&t.to_string());
            for c in cells {
                s.push(',');
                s.push_str(&c);
            }
            s.push('\n');
        }
    };
    let n = log.n_bands;
    block(
        "truth",
        &mut log.steps.iter().map(|r| (r.t, r.truth.labels(0.5).iter().map(|v| v.to_string()).collect())),
    );
    block(
        "prediction",
        &mut log.steps.iter().map(|r| (r.t, r.prediction.objectness_vec().into_iter().map(fmt).collect())),
    );
    block(
        "q_values",
        &mut log.steps.iter().map(|r| {
            let cells = match &r.q_values {
                Some(q) => q.iter().copied().map(fmt).collect(),
                None => vec![String::new(); n],
            };
            (r.t, cells)
        }),
    );
    s.push_str("# reward\nt,action,reward\n");
    for r in &log.steps {
        s.push_str(&format!("{},{},{}\n", r.t, r.action, fmt(r.reward)));
    }
    s
}

/// Parses the truth and prediction blocks of a render and recomputes the
/// instantaneous-IoU reward of every step.
pub fn recompute_render_rewards(render: &str) -> Result<Vec<f64>> {
    let mut blocks: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut current = String::new();
    for line in render.lines() {
        if let Some(title) = line.strip_prefix("# ") {
            current = title.to_string();
            blocks.insert(current.clone(), Vec::new());
        } else if line.starts_with('t') || (current != "truth" && current != "prediction") {
            continue;
        } else if let Some(rows) = blocks.get_mut(&current) {
            let row = line
                .split(',')
                .skip(1)
                .map(|c| c.parse::<f64>().map_err(|e| Error::Config(format!("render cell {c:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
    }
    let truth = blocks.get("truth").cloned().unwrap_or_default();
    let pred = blocks.get("prediction").cloned().unwrap_or_default();
    truth
        .iter()
        .zip(&pred)
        .map(|(t, p)| {
            let t = crate::env_sim::BandVector::Probability(t.clone());
            let p = crate::env_sim::BandVector::Probability(p.clone());
            iou_instant(&p, &t)
        })
        .collect()
}

/// Options that come from the command line rather than the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub log_episodes: bool,
    pub threads: Option<usize>,
}

/// Headline numbers of a run: one row per (arm, spec).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub arm: String,
    pub spec: String,
    pub mean_cumulative_iou: f64,
    pub mean_final_block_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub scores: Vec<ScoreRow>,
}

impl RunReport {
    pub fn score(&self, arm: &str, spec: &str) -> Option<&ScoreRow> {
        self.scores.iter().find(|r| r.arm == arm && r.spec == spec)
    }
}

pub fn scores_to_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("arm,spec,mean_cumulative_iou,mean_final_block_iou\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.arm,
            r.spec,
            fmt(r.mean_cumulative_iou),
            fmt(r.mean_final_block_iou)
        ));
    }
    s
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    kind: ExperimentKind,
    version: &'a str,
    seed: u64,
    options: ManifestOptions,
    config: &'a ExperimentConfig,
    specs: BTreeMap<&'a str, String>,
    outputs: &'a [String],
}

#[derive(Serialize)]
struct ManifestOptions {
    seed_override: Option<u64>,
    log_episodes: bool,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    specs: &'a BTreeMap<String, EnvSpec>,
    base_dir: &'a Path,
    out: &'a Path,
    files: Vec<String>,
    scores: Vec<ScoreRow>,
    log_episodes: bool,
}

impl Ctx<'_> {
    fn spec(&self, name: &str) -> &EnvSpec {
        &self.specs[name]
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, contents)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.cfg.seed, stream)
    }

    fn eval_seeds(&self) -> Vec<u64> {
        held_out_seeds(self.cfg.eval.episodes)
    }

    fn prior(&self) -> &EnvSpec {
        self.spec(self.cfg.prior.as_deref().unwrap_or(&self.cfg.lab))
    }

    fn estimation_prior(&self) -> EnvSpec {
        match &self.cfg.feedback.estimation_prior {
            Some(name) => self.spec(name).clone(),
            None => presets::estimation_prior(),
        }
    }

    fn eval_spec_names(&self) -> Vec<String> {
        if !self.cfg.eval_specs.is_empty() {
            return self.cfg.eval_specs.clone();
        }
        if self.cfg.kind == ExperimentKind::CompareBaselines {
            return self.specs.keys().cloned().collect();
        }
        vec![self.cfg.field.clone().unwrap_or_else(|| self.cfg.lab.clone())]
    }

    fn new_agent(&self, kind: AgentKind, spec: &EnvSpec, train: TrainConfig) -> Result<DanAgent> {
        DanAgent::new(kind, self.cfg.network.network_config(kind, spec.n_bands, spec.n_classes), train)
    }

    /// Loads the configured checkpoint, or trains on the lab spec and
    /// writes `<prefix>train_curve.csv` and `<prefix>agent.ckpt`.
    fn lab_agent(&mut self, kind: AgentKind, prefix: &str) -> Result<DanAgent> {
        let mut train = self.cfg.train.clone();
        train.seed = self.seed(0x7EA1);
        if let Some(path) = &self.cfg.checkpoint {
            let net = Network::<f32>::load(&self.base_dir.join(path))?;
            return Ok(DanAgent::from_network(kind, net, train));
        }
        let lab = self.spec(&self.cfg.lab).clone();
        let mut agent = self.new_agent(kind, &lab, train)?;
        let validation = (self.cfg.eval.validation_episodes > 0).then(|| {
            EvalSet::from_spec(&lab, validation_seeds(self.cfg.eval.validation_episodes), self.cfg.eval.t_steps)
        });
        let curve = agent.train(
            &mut SpecSource {
                spec: lab,
                seed: self.seed(0x7EA2),
            },
            validation.as_ref(),
        )?;
        self.write(&format!("{prefix}train_curve.csv"), curve_to_csv(&curve))?;
        self.write(&format!("{prefix}agent.ckpt"), agent.net.to_bytes()?)?;
        Ok(agent)
    }

    fn evaluate(&mut self, arm: &str, make: &ControllerFactory<'_>, spec_name: &str) -> Result<EvalSummary> {
        let spec = self.spec(spec_name).clone();
        let (mut summary, logs) = evaluate_controller(
            make,
            &spec,
            spec_name,
            &self.eval_seeds(),
            self.cfg.eval.t_steps,
            &self.cfg.eval.iou,
            self.cfg.eval.final_block,
        )?;
        summary.controller = arm.to_string();
        if self.log_episodes {
            for log in &logs {
                self.write(&format!("logs/{arm}_{spec_name}_{}.csv", log.seed), log.to_csv())?;
            }
            if let Some(first) = logs.first() {
                self.write(&format!("renders/{arm}_{spec_name}.csv"), export_episode_render(first))?;
            }
        }
        self.scores.push(ScoreRow {
            arm: arm.to_string(),
            spec: spec_name.to_string(),
            mean_cumulative_iou: summary.mean_cumulative(),
            mean_final_block_iou: summary.mean_final_block(),
        });
        Ok(summary)
    }

    fn evaluate_agent(&mut self, arm: &str, agent: &DanAgent, spec_name: &str) -> Result<EvalSummary> {
        let policy = agent.policy();
        let make = move || -> Result<Box<dyn Controller + Send>> { Ok(Box::new(policy.clone())) };
        self.evaluate(arm, &make, spec_name)
    }

    fn baseline_factory(&self, kind: BaselineKind) -> impl Fn() -> Result<Box<dyn Controller + Send>> + Sync {
        let prior = self.prior().clone();
        let seed = self.seed(0xBA5E);
        move || make_baseline(kind, Some(&prior), seed)
    }

    fn write_evaluations(&mut self, summaries: &[EvalSummary]) -> Result<()> {
        let mut by_spec: BTreeMap<&str, Vec<&EvalSummary>> = BTreeMap::new();
        for s in summaries {
            by_spec.entry(&s.spec).or_default().push(s);
        }
        let files: Vec<(String, String)> = by_spec
            .iter()
            .map(|(spec, list)| (format!("curves_{spec}.csv"), curves_to_csv(list)))
            .collect();
        for (name, body) in files {
            self.write(&name, body)?;
        }
        let all: Vec<&EvalSummary> = summaries.iter().collect();
        self.write("episodes.csv", episodes_to_csv(&all))
    }

    fn run_controllers(&mut self) -> Result<()> {
        let controllers = if self.cfg.controllers.is_empty() {
            match self.cfg.kind {
                ExperimentKind::CompareBaselines => vec![
                    ControllerKind::Random,
                    ControllerKind::Scan,
                    ControllerKind::ScanDwell,
                    ControllerKind::Expert,
                ],
                _ => vec![self.cfg.agent],
            }
        } else {
            self.cfg.controllers.clone()
        };
        let mut agents: BTreeMap<AgentKind, DanAgent> = BTreeMap::new();
        for c in &controllers {
            if let Some(kind) = c.agent() {
                if !agents.contains_key(&kind) {
                    let agent = self.lab_agent(kind, &format!("{}_", c.name()))?;
                    agents.insert(kind, agent);
                }
            }
        }
        let mut summaries = Vec::new();
        for spec_name in self.eval_spec_names() {
            for c in &controllers {
                let summary = match (c.agent(), c.baseline()) {
                    (Some(kind), _) => {
                        let agent = agents[&kind].clone();
                        self.evaluate_agent(c.name(), &agent, &spec_name)?
                    }
                    (None, Some(kind)) => {
                        let make = self.baseline_factory(kind);
                        self.evaluate(c.name(), &make, &spec_name)?
                    }
                    (None, None) => unreachable!("every controller kind is an agent or a baseline"),
                };
                summaries.push(summary);
            }
        }
        self.write_evaluations(&summaries)
    }

    fn run_train(&mut self) -> Result<()> {
        let kind = self.cfg.agent.agent().expect("validated");
        let agent = self.lab_agent(kind, "")?;
        let mut summaries = Vec::new();
        for spec_name in self.eval_spec_names() {
            summaries.push(self.evaluate_agent(kind.name(), &agent, &spec_name)?);
        }
        self.write_evaluations(&summaries)
    }

    fn deploy_controller(&self, agent: &DanAgent, default: Option<ControllerKind>) -> Result<Box<dyn Controller + Send>> {
        match self.cfg.feedback.deploy.or(default) {
            Some(c) if c.baseline().is_some() => {
                make_baseline(c.baseline().expect("checked"), Some(self.prior()), self.seed(0xDE91))
            }
            _ => Ok(Box::new(agent.policy())),
        }
    }

    fn budget(&self) -> Budget {
        Budget {
            episodes: self.cfg.feedback.budget_episodes,
            t_steps: self.cfg.feedback.budget_t_steps,
        }
    }

    fn retrain_config(&self, base: &TrainConfig, stream: u64) -> TrainConfig {
        let mut c = base.clone();
        c.seed = self.seed(stream);
        c
    }

    fn run_feedback_spec(&mut self) -> Result<()> {
        let kind = self.cfg.agent.agent().expect("validated");
        let lab_name = self.cfg.lab.clone();
        let field_name = self.cfg.field.clone().expect("validated");
        let agent = self.lab_agent(kind, "")?;
        let mut deployed = self.deploy_controller(&agent, Some(ControllerKind::Expert))?;
        let field = self.spec(&field_name).clone();
        let exp = collect_field_experience(deployed.as_mut(), &field, self.budget(), self.seed(0xF1E1))?;
        let estimated = estimate_field_spec(&exp, &self.estimation_prior())?;
        self.write("estimated.spec", estimated.to_file_string())?;

        let lab = self.spec(&lab_name).clone();
        let est = vec![("estimated".to_string(), estimated.clone())];
        let arms = [
            ("pooled", SpecPool::lab_and_estimates((&lab_name, &lab), &est, self.cfg.feedback.estimate_weight)?),
            ("estimate_only", SpecPool::new(vec![("estimated".into(), estimated, 1.0)])?),
        ];
        let mut summaries = Vec::new();
        for spec_name in [&lab_name, &field_name] {
            summaries.push(self.evaluate_agent("lab_only", &agent, spec_name)?);
        }
        for (i, (arm, pool)) in arms.iter().enumerate() {
            let mut a = agent.clone();
            a.config = self.retrain_config(&self.cfg.feedback.retrain, 0x5EC0 + i as u64);
            let curve = retrain_pooled(&mut a, pool, self.seed(0x5EC8 + i as u64), None)?;
            self.write(&format!("{arm}_retrain_curve.csv"), curve_to_csv(&curve))?;
            for spec_name in [&lab_name, &field_name] {
                summaries.push(self.evaluate_agent(arm, &a, spec_name)?);
            }
        }
        self.write_evaluations(&summaries)
    }

    fn run_bootstrap(&mut self) -> Result<()> {
        let kind = self.cfg.agent.agent().expect("validated");
        let lab_name = self.cfg.lab.clone();
        let lab = self.spec(&lab_name).clone();
        let fields: Vec<(String, EnvSpec)> = self
            .cfg
            .fields
            .iter()
            .map(|n| (n.clone(), self.spec(n).clone()))
            .collect();
        let agent = self.lab_agent(kind, "")?;
        let mut modes = vec![PoolMode::AllEstimates];
        if self.cfg.feedback.ablation {
            modes.push(PoolMode::CurrentOnly);
        }
        let mut table = String::from("mode,iteration,field,spec,mean_cumulative_iou\n");
        for mode in modes {
            let mode_name = match mode {
                PoolMode::AllEstimates => "all_estimates",
                PoolMode::CurrentOnly => "current_only",
            };
            let config = BootstrapConfig {
                budget: self.budget(),
                retrain: self.retrain_config(&self.cfg.feedback.retrain, 0xB007),
                mode,
                estimate_weight: self.cfg.feedback.estimate_weight,
                eval_episodes: self.cfg.eval.episodes,
                eval_t_steps: self.cfg.eval.t_steps,
                seed: self.seed(0xB008),
            };
            let mut a = agent.clone();
            let reports = bootstrap(&mut a, (&lab_name, &lab), &fields, &self.estimation_prior(), &config)?;
            for r in &reports {
                if let Some(spec) = &r.estimated {
                    self.write(&format!("{mode_name}_iter{}_estimated.spec", r.iteration), spec.to_file_string())?;
                }
                for (spec, score) in &r.scores {
                    table.push_str(&format!("{mode_name},{},{},{spec},{}\n", r.iteration, r.field, fmt(*score)));
                    self.scores.push(ScoreRow {
                        arm: format!("{mode_name}_iter{}", r.iteration),
                        spec: spec.clone(),
                        mean_cumulative_iou: *score,
                        mean_final_block_iou: f64::NAN,
                    });
                }
            }
        }
        self.write("bootstrap.csv", table)
    }

    fn run_feedback_state(&mut self) -> Result<()> {
        let kind = self.cfg.agent.agent().expect("validated");
        let fb = self.cfg.feedback.clone();
        let lab_name = self.cfg.lab.clone();
        let field_name = self.cfg.field.clone().expect("validated");
        let lab = self.spec(&lab_name).clone();
        let field = self.spec(&field_name).clone();
        let agent = self.lab_agent(kind, "")?;

        let mut deployed = self.deploy_controller(&agent, None)?;
        let exp = collect_field_experience(deployed.as_mut(), &field, self.budget(), self.seed(0xF1E1))?;
        let t_steps = fb.budget_t_steps;
        let recon_spec = match &fb.reconstructor_spec {
            Some(name) => self.spec(name).clone(),
            None => lab.clone(),
        };
        let pairs = simulate_lab_pairs(
            deployed.as_mut(),
            &recon_spec,
            Budget {
                episodes: fb.lab_pairs,
                t_steps,
            },
            self.seed(0x1AB),
        )?;
        let mut rc = fb.reconstructor;
        rc.seed = self.seed(0x4EC);
        let mut recon = Reconstructor::<f32>::new(lab.n_bands, lab.n_classes, &rc)?;
        let loss = recon.fit(&pairs, &rc)?;
        let mut loss_csv = String::from("epoch,loss\n");
        for (i, l) in loss.iter().enumerate() {
            loss_csv.push_str(&format!("{},{}\n", i + 1, fmt(*l)));
        }
        self.write("reconstructor_loss.csv", loss_csv)?;

        let held = simulate_lab_pairs(
            deployed.as_mut(),
            &recon_spec,
            Budget {
                episodes: 20,
                t_steps,
            },
            self.seed(0x1AC),
        )?;
        let (mut acc_r, mut acc_p) = (0.0, 0.0);
        for (partial, truth) in &held {
            acc_r += cell_accuracy(&recon.reconstruct_states(partial)?, truth)?;
            acc_p += cell_accuracy(&persistent_grid(lab.n_bands, partial), truth)?;
        }
        let n_held = held.len().max(1) as f64;
        self.write(
            "reconstruction.csv",
            format!(
                "method,cell_accuracy\nreconstructor,{}\npersistent,{}\n",
                fmt(acc_r / n_held),
                fmt(acc_p / n_held)
            ),
        )?;

        let mut db = StateDatabase::new();
        for ep in exp.episodes() {
            db.push(recon.reconstruct_states(ep)?, Provenance::Reconstructed)?;
        }
        if fb.generate > 0 {
            let mut gc = fb.generator;
            gc.seed = self.seed(0x6E4);
            let mut generator = Generator::<f32>::new(field.n_bands, &gc)?;
            generator.fit(&db, &gc)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed(0x6E5));
            let mut generated: Vec<LabelGrid> = Vec::with_capacity(fb.generate);
            let reconstructed = db.len();
            for i in 0..fb.generate {
                let seed_ep = rng.gen_range(0..reconstructed);
                generated.extend(generator.generate_episodes(&db, seed_ep, 1, t_steps, self.seed(0x6E6 + i as u64))?);
            }
            for g in generated {
                db.push(g, Provenance::Generated)?;
            }
        }
        db.save(&self.out.join("state_db"))?;
        self.files.push("state_db/manifest.json".into());
        for i in 0..db.len() {
            self.files.push(format!("state_db/grid_{i:04}.csv"));
        }

        let mut summaries = vec![self.evaluate_agent("lab_only", &agent, &field_name)?];
        for &count in &fb.state_counts {
            let grids = db.select(None, count);
            if grids.is_empty() {
                continue;
            }
            let mut a = agent.clone();
            a.config = self.retrain_config(&fb.retrain, 0x57A7 + count as u64);
            let curve = retrain_on_states(&mut a, &grids, &lab, self.seed(0x57A8 + count as u64), None)?;
            let arm = format!("retrain_states_{count}");
            self.write(&format!("{arm}_curve.csv"), curve_to_csv(&curve))?;
            summaries.push(self.evaluate_agent(&arm, &a, &field_name)?);
        }
        let mut a = agent.clone();
        a.config = self.retrain_config(&fb.finetune, 0xF17E);
        finetune_partial(&mut a, &exp)?;
        summaries.push(self.evaluate_agent("finetune_partial", &a, &field_name)?);
        self.write_evaluations(&summaries)
    }

    fn run_finetune(&mut self) -> Result<()> {
        let kind = self.cfg.agent.agent().expect("validated");
        let field_name = self.cfg.field.clone().expect("validated");
        let field = self.spec(&field_name).clone();
        let agent = self.lab_agent(kind, "")?;
        let mut deployed = self.deploy_controller(&agent, None)?;
        let exp = collect_field_experience(deployed.as_mut(), &field, self.budget(), self.seed(0xF1E1))?;
        let mut a = agent.clone();
        a.config = self.retrain_config(&self.cfg.feedback.finetune, 0xF17E);
        let losses = finetune_partial(&mut a, &exp)?;
        let mut csv = String::from("update,q_loss,m_loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{},{},{}\n", i + 1, fmt(l.q), fmt(l.m)));
        }
        self.write("finetune_losses.csv", csv)?;
        let summaries = vec![
            self.evaluate_agent("lab_only", &agent, &field_name)?,
            self.evaluate_agent("finetune_partial", &a, &field_name)?,
        ];
        self.write_evaluations(&summaries)
    }
}

/// Resolves `config` against `base_dir` and runs it into `out`.
pub fn run_config(mut cfg: ExperimentConfig, base_dir: &Path, out: &Path, options: &RunOptions) -> Result<RunReport> {
    if let Some(seed) = options.seed_override {
        cfg.seed = seed;
    }
    let specs = cfg.resolve(base_dir)?;
    let run = || -> Result<RunReport> {
        fs::create_dir_all(out)?;
        let mut ctx = Ctx {
            cfg: &cfg,
            specs: &specs,
            base_dir,
            out,
            files: Vec::new(),
            scores: Vec::new(),
            log_episodes: options.log_episodes,
        };
        info!("running {:?} experiment {:?} into {}", cfg.kind, cfg.name, out.display());
        match cfg.kind {
            ExperimentKind::Train => ctx.run_train()?,
            ExperimentKind::Evaluate | ExperimentKind::CompareBaselines => ctx.run_controllers()?,
            ExperimentKind::FeedbackSpec => ctx.run_feedback_spec()?,
            ExperimentKind::FeedbackBootstrap => ctx.run_bootstrap()?,
            ExperimentKind::FeedbackState => ctx.run_feedback_state()?,
            ExperimentKind::FinetunePartial => ctx.run_finetune()?,
        }
        let scores = std::mem::take(&mut ctx.scores);
        ctx.write("scores.csv", scores_to_csv(&scores))?;
        let mut files = std::mem::take(&mut ctx.files);
        files.push("manifest.json".into());
        files.sort();
        let manifest = Manifest {
            name: &cfg.name,
            kind: cfg.kind,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            options: ManifestOptions {
                seed_override: options.seed_override,
                log_episodes: options.log_episodes,
            },
            config: &cfg,
            specs: specs.iter().map(|(k, v)| (k.as_str(), v.to_file_string())).collect(),
            outputs: &files,
        };
        fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(RunReport {
            out_dir: out.to_path_buf(),
            files,
            scores,
        })
    };
    match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Loads the config at `path` and runs it. Relative spec paths resolve
/// against the config's directory.
pub fn run_experiment(path: &Path, out: &Path, options: &RunOptions) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    run_config(cfg, &base, out, options)
}

/// Evaluation set of a spec scored by final Block-IoU.
pub fn final_block_eval(spec: &EnvSpec, seeds: Vec<u64>, t_steps: usize, n: usize) -> EvalSet {
    EvalSet {
        metric: EvalMetric::FinalBlock { n },
        ..EvalSet::from_spec(spec, seeds, t_steps)
    }
}

//! Meta-training loop: every episode runs on a freshly sampled environment,
//! the recurrent policy is rolled out for a full horizon, and an
//! advantage actor-critic update (optionally with whole-episode replay and
//! truncated importance weights) is applied. The best policy on a held-out
//! validation set is kept.

use std::collections::{HashSet, VecDeque};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{fmt_f64, Action, EnvConfig, MetaEnv, Observation, TraceRow};
use crate::error::{Error, Result};
use crate::graph::{self, random_dag, DiGraph};
use crate::policy::{
    self, sample_action, EpisodeLoss, HiddenState, OutputGrad, PolicyOutput, PolicyParams, SampleMode,
};
use crate::scm::{generate_linear_scm, Scm, ScmGenConfig};
use crate::stats::{summarize, StatSummary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    /// Capacity in step records.
    pub buffer_size: usize,
    /// Replayed batches per on-policy batch.
    pub replay_ratio: usize,
    /// Truncation of the importance weight `pi / mu`.
    pub truncation: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            buffer_size: 500_000,
            replay_ratio: 1,
            truncation: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    /// Environment steps to train for.
    pub total_steps: u64,
    /// Episodes collected per update.
    pub n_parallel_envs: usize,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Environment steps between validation runs.
    pub eval_interval: u64,
    /// Number of validation environments.
    pub eval_episodes: usize,
    /// Stop after this many validation runs without improvement (0 disables).
    pub patience: usize,
    /// Stop as soon as the validation mean dSHD is at or below this value.
    pub target_dshd: Option<f64>,
    /// Greedy action selection during validation.
    pub greedy_eval: bool,
    pub replay: Option<ReplayConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            learning_rate: 1e-3,
            total_steps: 5_000_000,
            n_parallel_envs: 16,
            value_loss_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            eval_interval: 50_000,
            eval_episodes: 20,
            patience: 10,
            target_dshd: None,
            greedy_eval: true,
            replay: Some(ReplayConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if [self.value_loss_coef, self.entropy_coef, self.max_grad_norm]
            .iter()
            .any(|c| !(*c >= 0.0))
        {
            return bad("coefficients must be >= 0");
        }
        if self.n_parallel_envs == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("batch size, eval interval and eval episodes must be positive");
        }
        if let Some(r) = &self.replay {
            if r.buffer_size == 0 || !(r.truncation > 0.0) {
                return bad("replay buffer size and truncation must be positive");
            }
        }
        Ok(())
    }
}

/// What the policy saw and did at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub observation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub mask: Vec<bool>,
    pub final_estimate: DiGraph,
    pub truth: DiGraph,
    pub final_dshd: usize,
    /// Interventions per variable.
    pub interventions: Vec<usize>,
    /// Wall-clock time spent running the episode.
    pub elapsed_secs: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.observation.clone()).collect()
    }
}

/// Runs one episode on `scm`. The hidden state starts at zero and is
/// discarded afterwards. With `trace`, every step is also logged.
pub fn rollout<R: Rng + ?Sized>(
    env: &mut MetaEnv,
    params: &PolicyParams,
    scm: Scm,
    rng: &mut R,
    mode: SampleMode,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Trajectory> {
    let start = Instant::now();
    let n = env.n();
    let horizon = env.config().horizon;
    let mask = env.legal_mask().to_vec();
    let mut obs: Observation = env.reset(scm, rng)?;
    let mut hidden = HiddenState::zeros(params.architecture().lstm_width);
    let mut steps = Vec::with_capacity(horizon);
    let mut interventions = vec![0usize; n];
    for t in 0..horizon {
        let flat = obs.flat();
        let (out, next) = params.forward(&flat, &hidden, &mask)?;
        hidden = next;
        let action = sample_action(&out.action_probs, rng, mode);
        let outcome = env.step(action, rng)?;
        let act = env.action_space().get(action)?;
        if let Action::Intervene { node, .. } = act {
            interventions[node] += 1;
        }
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                step: t,
                action_index: action,
                action_kind: act.kind_name(),
                intervened_node: match act {
                    Action::Intervene { node, .. } => Some(node),
                    _ => None,
                },
                reward: outcome.reward,
                dshd_after_step: env.state().map_or(0, |s| s.dshd()),
                observation: outcome.observation.flat(),
            });
        }
        steps.push(StepRecord {
            observation: flat,
            action,
            reward: outcome.reward,
            log_prob: out.log_prob(action),
            value: out.value,
            terminal: outcome.done,
        });
        obs = outcome.observation;
    }
    let state = env.state().expect("episode was reset");
    Ok(Trajectory {
        steps,
        mask,
        final_estimate: state.epistemic.clone(),
        truth: state.truth.as_graph().clone(),
        final_dshd: state.dshd(),
        interventions,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Finite-horizon discounted returns `sum_{k>=t} gamma^(k-t) r_k`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Per-step `(return, advantage)` with `advantage = return - value`.
pub fn compute_advantages(traj: &Trajectory, gamma: f64) -> Vec<(f64, f64)> {
    let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
    discounted_returns(&rewards, gamma)
        .into_iter()
        .zip(&traj.steps)
        .map(|(ret, s)| (ret, ret - s.value))
        .collect()
}

/// Actor-critic loss of one episode, normalised by `scale` steps:
/// `-rho_t A_t ln pi(a_t) + c_v (R_t - V_t)^2 - c_e H(pi_t)`, where the
/// advantage uses the current critic and is held constant, and `rho_t` is
/// the truncated importance weight (1 for on-policy data).
#[derive(Debug, Clone)]
pub struct ActorCriticLoss {
    pub actions: Vec<usize>,
    pub returns: Vec<f64>,
    /// Behaviour log-probabilities; `None` for on-policy data.
    pub behaviour_log_probs: Option<Vec<f64>>,
    pub truncation: f64,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub scale: f64,
}

/// Loss components summed over steps (before scaling).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

impl ActorCriticLoss {
    pub fn for_trajectory(traj: &Trajectory, cfg: &TrainConfig, off_policy: bool, scale: f64) -> Self {
        let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
        ActorCriticLoss {
            actions: traj.actions(),
            returns: discounted_returns(&rewards, cfg.gamma),
            behaviour_log_probs: off_policy.then(|| traj.steps.iter().map(|s| s.log_prob).collect()),
            truncation: cfg.replay.map_or(10.0, |r| r.truncation),
            value_loss_coef: cfg.value_loss_coef,
            entropy_coef: cfg.entropy_coef,
            scale,
        }
    }

    pub fn parts(&self, outputs: &[PolicyOutput]) -> LossParts {
        let mut parts = LossParts::default();
        for (t, out) in outputs.iter().enumerate() {
            let adv = self.returns[t] - out.value;
            parts.policy -= self.weight(t, out) * adv * out.log_prob(self.actions[t]);
            parts.value += (self.returns[t] - out.value).powi(2);
            parts.entropy += out.entropy();
        }
        parts
    }

    fn weight(&self, t: usize, out: &PolicyOutput) -> f64 {
        match &self.behaviour_log_probs {
            None => 1.0,
            Some(mu) => (out.log_prob(self.actions[t]) - mu[t]).exp().min(self.truncation),
        }
    }
}

impl EpisodeLoss for ActorCriticLoss {
    fn evaluate(&self, outputs: &[PolicyOutput]) -> (f64, Vec<OutputGrad>) {
        let parts = self.parts(outputs);
        let loss = (parts.policy + self.value_loss_coef * parts.value - self.entropy_coef * parts.entropy)
            / self.scale;
        let grads = outputs
            .iter()
            .enumerate()
            .map(|(t, out)| {
                let a = self.actions[t];
                let adv = self.returns[t] - out.value;
                let pg = self.weight(t, out) * adv;
                let entropy = out.entropy();
                let d_logits = out
                    .action_probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        if p == 0.0 {
                            return 0.0;
                        }
                        let onehot = if j == a { 1.0 } else { 0.0 };
                        let d_policy = -pg * (onehot - p);
                        let d_entropy = self.entropy_coef * p * (p.ln() + entropy);
                        (d_policy + d_entropy) / self.scale
                    })
                    .collect();
                OutputGrad {
                    d_logits,
                    d_value: -2.0 * self.value_loss_coef * adv / self.scale,
                }
            })
            .collect();
        (loss, grads)
    }
}

/// Adam with a constant step size.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Parameters plus optimiser state.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub params: PolicyParams,
    optimizer: Adam,
}

impl ActorCritic {
    pub fn new(params: PolicyParams, learning_rate: f64) -> Self {
        let optimizer = Adam::new(params.len(), learning_rate);
        ActorCritic { params, optimizer }
    }

    /// One clipped gradient step on the mean per-step loss of `batch`.
    pub fn update(&mut self, batch: &[Trajectory], cfg: &TrainConfig, off_policy: bool) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        let steps: usize = batch.iter().map(|t| t.len()).sum();
        let scale = steps as f64;
        let mut grad = PolicyParams::zeros(self.params.architecture())?;
        let mut stats = UpdateStats::default();
        for traj in batch {
            let loss = ActorCriticLoss::for_trajectory(traj, cfg, off_policy, scale);
            let masks = vec![traj.mask.clone(); traj.len()];
            let tape = self.params.unroll(&traj.observations(), &masks)?;
            let (value, grads) = loss.evaluate(&tape.outputs);
            let parts = loss.parts(&tape.outputs);
            stats.loss += value;
            stats.policy_loss += parts.policy / scale;
            stats.value_loss += parts.value / scale;
            stats.entropy += parts.entropy / scale;
            self.params.backward_into(&tape, &grads, &mut grad)?;
        }
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let norm = grad.l2_norm();
        stats.grad_norm = norm;
        if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            let k = cfg.max_grad_norm / norm;
            grad.as_mut_slice().iter_mut().for_each(|g| *g *= k);
        }
        self.optimizer.step(self.params.as_mut_slice(), grad.as_slice());
        if !self.params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(stats)
    }
}

/// Rejection-samples a random DAG outside `excluded` and builds a linear SCM on it.
pub fn sample_training_scm<R: Rng + ?Sized>(
    n: usize,
    excluded: &HashSet<DiGraph>,
    cfg: &ScmGenConfig,
    rng: &mut R,
    max_attempts: usize,
) -> Result<Scm> {
    for _ in 0..max_attempts {
        let dag = random_dag(n, rng);
        if !excluded.contains(dag.as_graph()) {
            return Ok(generate_linear_scm(&dag, cfg, rng));
        }
    }
    Err(Error::RejectionBudget(max_attempts))
}

pub const DEFAULT_REJECTION_ATTEMPTS: usize = 100_000;

/// Where training environments come from.
#[derive(Debug, Clone)]
pub enum ScmSource {
    /// A fixed list, one chosen uniformly per episode.
    Fixed(Vec<Scm>),
    /// Random linear SCMs over DAGs not in `excluded`.
    Random {
        n: usize,
        excluded: HashSet<DiGraph>,
        gen: ScmGenConfig,
    },
}

impl ScmSource {
    pub fn n(&self) -> usize {
        match self {
            ScmSource::Fixed(scms) => scms[0].n(),
            ScmSource::Random { n, .. } => *n,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Scm> {
        match self {
            ScmSource::Fixed(scms) => scms.choose(rng).cloned().ok_or(Error::EmptyInput),
            ScmSource::Random { n, excluded, gen } => {
                sample_training_scm(*n, excluded, gen, rng, DEFAULT_REJECTION_ATTEMPTS)
            }
        }
    }

    /// Validation environments: every fixed SCM `per_fixed` times, or `count`
    /// fresh random ones.
    pub fn validation_set<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Scm>> {
        match self {
            ScmSource::Fixed(scms) => {
                let per = count.div_ceil(scms.len()).max(1);
                Ok(scms.iter().flat_map(|s| std::iter::repeat_n(s.clone(), per)).collect())
            }
            ScmSource::Random { .. } => (0..count).map(|_| self.sample(rng)).collect(),
        }
    }
}

/// Outcome of one evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub scm_index: usize,
    pub dshd: usize,
    pub actions: Vec<usize>,
    pub interventions: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dshd: Vec<usize>,
    pub summary: StatSummary,
    pub mean_interventions: f64,
    pub interventions_per_variable: Vec<usize>,
    pub total_interventions: usize,
    pub mean_latency_ms: f64,
    pub episodes: Vec<EpisodeResult>,
}

impl EvalReport {
    fn from_episodes(episodes: Vec<EpisodeResult>, interventions_per_variable: Vec<usize>) -> Result<Self> {
        let dshd: Vec<usize> = episodes.iter().map(|e| e.dshd).collect();
        let summary = summarize(&dshd.iter().map(|&d| d as f64).collect::<Vec<_>>())?;
        let total_interventions = interventions_per_variable.iter().sum();
        let count = episodes.len() as f64;
        Ok(EvalReport {
            summary,
            mean_interventions: total_interventions as f64 / count,
            mean_latency_ms: episodes.iter().map(|e| e.latency_ms).sum::<f64>() / count,
            dshd,
            interventions_per_variable,
            total_interventions,
            episodes,
        })
    }

    /// Fraction of interventions on each variable; all zeros without interventions.
    pub fn intervention_shares(&self) -> Vec<f64> {
        let total = self.total_interventions as f64;
        self.interventions_per_variable
            .iter()
            .map(|&c| if total > 0.0 { c as f64 / total } else { 0.0 })
            .collect()
    }
}

/// Runs the frozen policy `episodes_per_scm` times on every SCM.
pub fn evaluate<R: Rng + ?Sized>(
    params: &PolicyParams,
    env_cfg: &EnvConfig,
    scms: &[Scm],
    episodes_per_scm: usize,
    rng: &mut R,
    greedy: bool,
    mut traces: Option<&mut Vec<Vec<TraceRow>>>,
) -> Result<EvalReport> {
    if scms.is_empty() || episodes_per_scm == 0 {
        return Err(Error::EmptyInput);
    }
    let n = scms[0].n();
    let mut env = MetaEnv::new(env_cfg.clone(), n)?;
    check_architecture(params, &env)?;
    let mode = if greedy { SampleMode::Greedy } else { SampleMode::Stochastic };
    let mut per_variable = vec![0usize; n];
    let mut episodes = Vec::with_capacity(scms.len() * episodes_per_scm);
    for (scm_index, scm) in scms.iter().enumerate() {
        for _ in 0..episodes_per_scm {
            let mut rows = Vec::new();
            let traj = rollout(
                &mut env,
                params,
                scm.clone(),
                rng,
                mode,
                traces.is_some().then_some(&mut rows),
            )?;
            if let Some(t) = traces.as_deref_mut() {
                t.push(rows);
            }
            for (acc, c) in per_variable.iter_mut().zip(&traj.interventions) {
                *acc += c;
            }
            episodes.push(EpisodeResult {
                scm_index,
                dshd: traj.final_dshd,
                actions: traj.actions(),
                interventions: traj.interventions.iter().sum(),
                latency_ms: traj.elapsed_secs * 1e3,
            });
        }
    }
    EvalReport::from_episodes(episodes, per_variable)
}

pub fn check_architecture(params: &PolicyParams, env: &MetaEnv) -> Result<()> {
    let arch = params.architecture();
    if arch.input_dim != env.observation_len() || arch.n_actions() != env.action_space().len() {
        return Err(Error::ArchitectureMismatch(format!(
            "policy expects {} inputs and {} actions, environment has {} and {}",
            arch.input_dim,
            arch.n_actions(),
            env.observation_len(),
            env.action_space().len()
        )));
    }
    Ok(())
}

/// One uniformly-ordered random DAG per SCM, scored against its graph.
pub fn random_baseline<R: Rng + ?Sized>(scms: &[Scm], rng: &mut R) -> Result<EvalReport> {
    if scms.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = scms[0].n();
    let episodes = scms
        .iter()
        .enumerate()
        .map(|(scm_index, scm)| {
            let start = Instant::now();
            let guess = random_dag(scm.n(), rng);
            let dshd = graph::dshd(&guess, &scm.induced_dag())?;
            Ok(EpisodeResult {
                scm_index,
                dshd,
                actions: Vec::new(),
                interventions: 0,
                latency_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_episodes(episodes, vec![0; n])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_episode_return: f64,
    pub eval_mean_dshd: f64,
    pub eval_median_dshd: f64,
    pub policy_entropy: f64,
    pub value_loss: f64,
}

pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "step,mean_episode_return,eval_mean_dshd,eval_median_dshd,policy_entropy,value_loss")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            fmt_f64(r.mean_episode_return),
            fmt_f64(r.eval_mean_dshd),
            fmt_f64(r.eval_median_dshd),
            fmt_f64(r.policy_entropy),
            fmt_f64(r.value_loss)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainRunState {
    pub params: PolicyParams,
    pub best_params: PolicyParams,
    /// Best validation mean dSHD so far (lower is better).
    pub best_score: f64,
    pub step: u64,
    pub history: Vec<MetricsRow>,
    /// Ground-truth graphs of every training episode, when requested.
    pub training_graphs: Option<HashSet<DiGraph>>,
}

/// Optional side outputs of [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Directory for `best` / `latest` checkpoints and `metrics.csv`.
    pub dir: Option<PathBuf>,
    /// Record the set of graphs trained on.
    pub record_graphs: bool,
}

struct ReplayBuffer {
    episodes: VecDeque<Trajectory>,
    records: usize,
    capacity: usize,
}

impl ReplayBuffer {
    fn push(&mut self, traj: Trajectory) {
        self.records += traj.len();
        self.episodes.push_back(traj);
        while self.records > self.capacity {
            match self.episodes.pop_front() {
                Some(old) => self.records -= old.len(),
                None => break,
            }
        }
    }
}

/// The meta-training loop. Deterministic for a fixed `cfg.seed`.
pub fn train(
    source: &ScmSource,
    env_cfg: &EnvConfig,
    arch: &policy::Architecture,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainRunState> {
    cfg.validate()?;
    let n = source.n();
    let mut env = MetaEnv::new(env_cfg.clone(), n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E_ED0F_7A11);
    let params = PolicyParams::init(arch, &mut rng)?;
    check_architecture(&params, &env)?;
    let validation = source.validation_set(cfg.eval_episodes, &mut val_rng)?;
    if let Some(dir) = &outputs.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut agent = ActorCritic::new(params, cfg.learning_rate);
    let mut replay = cfg.replay.map(|r| ReplayBuffer {
        episodes: VecDeque::new(),
        records: 0,
        capacity: r.buffer_size,
    });
    let mut state = TrainRunState {
        params: agent.params.clone(),
        best_params: agent.params.clone(),
        best_score: f64::INFINITY,
        step: 0,
        history: Vec::new(),
        training_graphs: outputs.record_graphs.then(HashSet::new),
    };
    let mut next_eval = cfg.eval_interval;
    let mut since_improvement = 0usize;
    let mut window_returns = Vec::new();
    let mut window_stats = Vec::new();

    while state.step < cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.n_parallel_envs);
        for _ in 0..cfg.n_parallel_envs {
            let scm = source.sample(&mut rng)?;
            if let Some(graphs) = state.training_graphs.as_mut() {
                graphs.insert(scm.induced_dag().into_graph());
            }
            let traj = rollout(&mut env, &agent.params, scm, &mut rng, SampleMode::Stochastic, None)?;
            state.step += traj.len() as u64;
            window_returns.push(traj.total_reward());
            batch.push(traj);
        }
        window_stats.push(agent.update(&batch, cfg, false)?);

        if let (Some(buffer), Some(rc)) = (replay.as_mut(), cfg.replay) {
            for traj in batch {
                buffer.push(traj);
            }
            for _ in 0..rc.replay_ratio {
                let picked: Vec<Trajectory> = (0..cfg.n_parallel_envs)
                    .map(|_| buffer.episodes[rng.gen_range(0..buffer.episodes.len())].clone())
                    .collect();
                agent.update(&picked, cfg, true)?;
            }
        }

        if state.step >= next_eval || state.step >= cfg.total_steps {
            next_eval += cfg.eval_interval;
            let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(state.step));
            let report = evaluate(&agent.params, env_cfg, &validation, 1, &mut eval_rng, cfg.greedy_eval, None)?;
            let mean_ret = window_returns.iter().sum::<f64>() / window_returns.len().max(1) as f64;
            let k = window_stats.len().max(1) as f64;
            let row = MetricsRow {
                step: state.step,
                mean_episode_return: mean_ret,
                eval_mean_dshd: report.summary.mean,
                eval_median_dshd: report.summary.median,
                policy_entropy: window_stats.iter().map(|s| s.entropy).sum::<f64>() / k,
                value_loss: window_stats.iter().map(|s| s.value_loss).sum::<f64>() / k,
            };
            log::info!(
                "step {} return {:.3} val dSHD {:.3} entropy {:.3}",
                row.step,
                row.mean_episode_return,
                row.eval_mean_dshd,
                row.policy_entropy
            );
            window_returns.clear();
            window_stats.clear();
            state.history.push(row);

            if report.summary.mean < state.best_score {
                state.best_score = report.summary.mean;
                state.best_params = agent.params.clone();
                since_improvement = 0;
                if let Some(dir) = &outputs.dir {
                    policy::save_params(&dir.join("best.ckpt"), &state.best_params)?;
                }
            } else {
                since_improvement += 1;
            }
            if let Some(dir) = &outputs.dir {
                policy::save_params(&dir.join("latest.ckpt"), &agent.params)?;
                let path = dir.join("metrics.csv");
                let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                write_metrics_csv(&mut f, &state.history).map_err(|e| Error::io(&path, e))?;
            }
            let reached = cfg.target_dshd.is_some_and(|t| state.best_score <= t);
            let plateaued = cfg.patience > 0 && since_improvement >= cfg.patience;
            if reached || plateaued {
                break;
            }
        }
    }
    state.params = agent.params;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::all_dags;
    use crate::policy::Architecture;
    use crate::scm::toy_pair;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn traj_with(rewards: &[f64], values: &[f64]) -> Trajectory {
        Trajectory {
            steps: rewards
                .iter()
                .zip(values)
                .enumerate()
                .map(|(t, (&reward, &value))| StepRecord {
                    observation: vec![],
                    action: 0,
                    reward,
                    log_prob: 0.0,
                    value,
                    terminal: t + 1 == rewards.len(),
                })
                .collect(),
            mask: vec![true],
            final_estimate: DiGraph::empty(2),
            truth: DiGraph::empty(2),
            final_dshd: 0,
            interventions: vec![0, 0],
            elapsed_secs: 0.0,
        }
    }

    #[test]
    fn advantages_examples() {
        let t = traj_with(&[0.0, 0.0], &[0.5, -1.0]);
        assert_eq!(compute_advantages(&t, 0.9), vec![(0.0, -0.5), (0.0, 1.0)]);
        let t = traj_with(&[0.0, 0.0, -3.0], &[0.0; 3]);
        assert!(compute_advantages(&t, 1.0).iter().all(|&(r, _)| r == -3.0));
        let t = traj_with(&[0.1, 0.0, -2.0], &[0.0; 3]);
        let got: Vec<f64> = compute_advantages(&t, 0.99).iter().map(|x| x.0).collect();
        for (g, e) in got.iter().zip([-1.8602, -1.98, -2.0]) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn rejection_sampling() {
        let mut r = rng(1);
        let all: Vec<DiGraph> = all_dags(3).unwrap().into_iter().map(|d| d.into_graph()).collect();
        let cfg = ScmGenConfig::default();
        // empty exclusion: first draw accepted
        let first = sample_training_scm(3, &HashSet::new(), &cfg, &mut rng(2), 1).unwrap();
        assert_eq!(first.n(), 3);
        let keep = all[11].clone();
        let excluded: HashSet<DiGraph> = all.iter().filter(|g| **g != keep).cloned().collect();
        for _ in 0..50 {
            let scm = sample_training_scm(3, &excluded, &cfg, &mut r, 10_000).unwrap();
            assert_eq!(*scm.induced_dag(), keep);
        }
        let everything: HashSet<DiGraph> = all.into_iter().collect();
        assert!(matches!(
            sample_training_scm(3, &everything, &cfg, &mut r, 100),
            Err(Error::RejectionBudget(100))
        ));
    }

    fn toy_setup() -> (EnvConfig, Architecture, ScmSource) {
        let env_cfg = EnvConfig {
            horizon: 10,
            intervention_values: vec![0.0, 5.0],
            intervention_bonus: 0.0,
            ..EnvConfig::default()
        };
        let space = env_cfg.action_space(3).unwrap();
        let arch = Architecture::new(crate::env::observation_len(3), &[30], 30, &[30], &[10], space.len()).unwrap();
        let (a, b) = toy_pair();
        (env_cfg, arch, ScmSource::Fixed(vec![a, b]))
    }

    #[test]
    fn rollout_records_full_horizon() {
        let (env_cfg, arch, _) = toy_setup();
        let params = PolicyParams::init(&arch, &mut rng(3)).unwrap();
        let mut env = MetaEnv::new(env_cfg, 3).unwrap();
        let traj = rollout(&mut env, &params, toy_pair().0, &mut rng(4), SampleMode::Stochastic, None).unwrap();
        assert_eq!(traj.len(), 10);
        assert_eq!(traj.steps.iter().filter(|s| s.terminal).count(), 1);
        assert!(traj.steps.last().unwrap().terminal);
        let final_dshd = graph::dshd(&traj.final_estimate, &traj.truth).unwrap();
        assert_eq!(traj.steps.last().unwrap().reward, -(final_dshd as f64));
    }

    #[test]
    fn rollout_without_interventions() {
        let (mut env_cfg, arch, _) = toy_setup();
        env_cfg.allow_interventions = false;
        let params = PolicyParams::init(&arch, &mut rng(5)).unwrap();
        let mut env = MetaEnv::new(env_cfg, 3).unwrap();
        for seed in 0..20 {
            let traj = rollout(&mut env, &params, toy_pair().1, &mut rng(seed), SampleMode::Stochastic, None).unwrap();
            assert_eq!(traj.interventions.iter().sum::<usize>(), 0);
        }
    }

    #[test]
    fn zero_advantage_leaves_only_entropy_gradient() {
        let loss = ActorCriticLoss {
            actions: vec![1],
            returns: vec![0.25],
            behaviour_log_probs: None,
            truncation: 10.0,
            value_loss_coef: 0.5,
            entropy_coef: 0.0,
            scale: 1.0,
        };
        let out = PolicyOutput {
            logits: vec![0.1, 0.2, 0.3],
            action_probs: vec![0.2, 0.3, 0.5],
            value: 0.25,
        };
        let (_, g) = loss.evaluate(std::slice::from_ref(&out));
        assert!(g[0].d_logits.iter().all(|&v| v == 0.0));
        assert_eq!(g[0].d_value, 0.0);
        let with_entropy = ActorCriticLoss { entropy_coef: 0.1, ..loss };
        let (_, g) = with_entropy.evaluate(std::slice::from_ref(&out));
        assert!(g[0].d_logits.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn entropy_ascent_increases_entropy() {
        let (env_cfg, arch, source) = toy_setup();
        let cfg = TrainConfig {
            value_loss_coef: 0.0,
            entropy_coef: 1.0,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut r = rng(6);
        let params = PolicyParams::init(&arch, &mut r).unwrap();
        let mut env = MetaEnv::new(env_cfg, 3).unwrap();
        let traj = rollout(&mut env, &params, source.sample(&mut r).unwrap(), &mut r, SampleMode::Stochastic, None).unwrap();
        // freeze the advantage at zero by making returns equal current values
        let mean_entropy = |p: &PolicyParams| {
            let masks = vec![traj.mask.clone(); traj.len()];
            let tape = p.unroll(&traj.observations(), &masks).unwrap();
            tape.outputs.iter().map(|o| o.entropy()).sum::<f64>() / tape.len() as f64
        };
        let before = mean_entropy(&params);
        let mut agent = ActorCritic::new(params, cfg.learning_rate);
        for _ in 0..100 {
            let masks = vec![traj.mask.clone(); traj.len()];
            let tape = agent.params.unroll(&traj.observations(), &masks).unwrap();
            let loss = ActorCriticLoss {
                actions: traj.actions(),
                returns: tape.outputs.iter().map(|o| o.value).collect(),
                behaviour_log_probs: None,
                truncation: 10.0,
                value_loss_coef: 0.0,
                entropy_coef: 1.0,
                scale: traj.len() as f64,
            };
            let (_, grads) = loss.evaluate(&tape.outputs);
            let g = agent.params.backward(&tape, &grads).unwrap();
            agent.optimizer.step(agent.params.as_mut_slice(), g.as_slice());
        }
        assert!(mean_entropy(&agent.params) > before);
    }

    #[test]
    fn full_loss_passes_gradient_check() {
        let (env_cfg, arch, source) = toy_setup();
        let cfg = TrainConfig::default();
        let mut r = rng(7);
        let params = PolicyParams::init(&arch, &mut r).unwrap();
        let mut env = MetaEnv::new(env_cfg, 3).unwrap();
        let traj = rollout(&mut env, &params, source.sample(&mut r).unwrap(), &mut r, SampleMode::Stochastic, None).unwrap();
        let inputs = policy::EpisodeInputs {
            observations: traj.observations(),
            masks: vec![traj.mask.clone(); traj.len()],
        };
        for off_policy in [false, true] {
            let loss = ActorCriticLoss::for_trajectory(&traj, &cfg, off_policy, traj.len() as f64);
            // The advantage and importance weight are constants of the loss, so
            // check against a loss whose advantage is frozen at the current values.
            let frozen = FrozenAdvantage::new(&params, &inputs, loss);
            let err = policy::grad_check(&params, &inputs, &frozen, 1e-3, 300, &mut r).unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    /// The actor-critic loss with its stop-gradient terms evaluated once at
    /// the reference parameters, so finite differences see the same function
    /// the analytic gradient differentiates.
    struct FrozenAdvantage {
        inner: ActorCriticLoss,
        advantages: Vec<f64>,
        weights: Vec<f64>,
    }

    impl FrozenAdvantage {
        fn new(params: &PolicyParams, inputs: &policy::EpisodeInputs, inner: ActorCriticLoss) -> Self {
            let tape = params.unroll(&inputs.observations, &inputs.masks).unwrap();
            let advantages = tape.outputs.iter().zip(&inner.returns).map(|(o, r)| r - o.value).collect();
            let weights = tape.outputs.iter().enumerate().map(|(t, o)| inner.weight(t, o)).collect();
            FrozenAdvantage { inner, advantages, weights }
        }
    }

    impl EpisodeLoss for FrozenAdvantage {
        fn evaluate(&self, outputs: &[PolicyOutput]) -> (f64, Vec<OutputGrad>) {
            let l = &self.inner;
            let mut loss = 0.0;
            for (t, o) in outputs.iter().enumerate() {
                loss -= self.weights[t] * self.advantages[t] * o.log_prob(l.actions[t]);
                loss += l.value_loss_coef * (l.returns[t] - o.value).powi(2);
                loss -= l.entropy_coef * o.entropy();
            }
            // gradients only hold at the reference point, which is where grad_check takes them
            (loss / l.scale, l.evaluate(outputs).1)
        }
    }

    #[test]
    fn evaluation_leaves_parameters_untouched() {
        let (env_cfg, arch, _) = toy_setup();
        let params = PolicyParams::init(&arch, &mut rng(8)).unwrap();
        let before = params.checksum();
        let (a, b) = toy_pair();
        let report = evaluate(&params, &env_cfg, &[a, b], 3, &mut rng(9), false, None).unwrap();
        assert_eq!(params.checksum(), before);
        assert_eq!(report.dshd.len(), 6);
        let per_episode: usize = report.episodes.iter().map(|e| e.interventions).sum();
        assert_eq!(per_episode, report.total_interventions);
        assert_eq!(report.interventions_per_variable.iter().sum::<usize>(), report.total_interventions);
    }

    #[test]
    fn evaluation_rejects_mismatched_architecture() {
        let (env_cfg, _, _) = toy_setup();
        let wrong = Architecture::new(10, &[4], 4, &[4], &[4], 22).unwrap();
        let params = PolicyParams::init(&wrong, &mut rng(10)).unwrap();
        let err = evaluate(&params, &env_cfg, &[toy_pair().0], 1, &mut rng(11), true, None);
        assert!(matches!(err, Err(Error::ArchitectureMismatch(_))));
    }

    #[test]
    fn random_baseline_scores_against_truth() {
        let (a, b) = toy_pair();
        let report = random_baseline(&[a, b], &mut rng(12)).unwrap();
        assert_eq!(report.dshd.len(), 2);
        assert!(report.dshd.iter().all(|&d| d <= 6));
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_monotonically() {
        let (env_cfg, arch, source) = toy_setup();
        let cfg = TrainConfig {
            total_steps: 4_000,
            n_parallel_envs: 4,
            eval_interval: 800,
            eval_episodes: 4,
            patience: 0,
            replay: Some(ReplayConfig {
                buffer_size: 2_000,
                replay_ratio: 1,
                truncation: 10.0,
            }),
            seed: 13,
            ..TrainConfig::default()
        };
        let a = train(&source, &env_cfg, &arch, &cfg, &TrainOutputs::default()).unwrap();
        let b = train(&source, &env_cfg, &arch, &cfg, &TrainOutputs::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_params, b.best_params);
        assert!(a.step >= cfg.total_steps);
        let mut best = f64::INFINITY;
        for row in &a.history {
            best = best.min(row.eval_mean_dshd);
        }
        assert_eq!(best, a.best_score);
    }

    #[test]
    fn checkpoints_and_metrics_are_written() {
        let (env_cfg, arch, source) = toy_setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            total_steps: 400,
            n_parallel_envs: 2,
            eval_interval: 200,
            eval_episodes: 2,
            seed: 14,
            ..TrainConfig::default()
        };
        let outputs = TrainOutputs {
            dir: Some(dir.path().to_path_buf()),
            record_graphs: true,
        };
        let state = train(&source, &env_cfg, &arch, &cfg, &outputs).unwrap();
        let best = policy::load_params(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best, state.best_params);
        assert!(dir.path().join("latest.ckpt").exists());
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), state.history.len() + 1);
        assert!(state.training_graphs.unwrap().len() <= 2);
    }
}

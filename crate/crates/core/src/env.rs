//! The episodic causal-discovery environment: the agent either chooses
//! which distribution to sample from next (intervene on one variable or
//! observe passively) or edits its current graph estimate, and is scored by
//! the directed SHD between the estimate and the true graph at the end of
//! the episode.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, random_dag, Dag, DiGraph, StructureKind};
use crate::scm::{Intervention, Scm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Intervene { node: usize, value: f64 },
    NonAction,
    Structure { kind: StructureKind, from: usize, to: usize },
}

impl Action {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Action::Intervene { .. } => "intervene",
            Action::NonAction => "none",
            Action::Structure { kind, .. } => kind.name(),
        }
    }

    pub fn is_intervention(&self) -> bool {
        matches!(self, Action::Intervene { .. })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Intervene { node, value } => write!(f, "do(X{node}={value})"),
            Action::NonAction => write!(f, "observe"),
            Action::Structure { kind, from, to } => write!(f, "{} X{from}->X{to}", kind.name()),
        }
    }
}

/// Indexed discrete action set. Layout: interventions grouped by node then
/// value, the non-action, then structure actions grouped by kind
/// (add, delete, reverse) with ordered pairs `(i, j)`, `i != j`, in
/// lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    n: usize,
    actions: Vec<Action>,
    non_action: usize,
}

impl ActionSpace {
    pub fn new(n: usize, values: &[Vec<f64>]) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("action space needs at least 2 nodes, got {n}")));
        }
        if values.len() != n {
            return Err(Error::Dimension {
                what: "intervention values",
                got: values.len(),
                expected: n,
            });
        }
        let mut actions = Vec::new();
        for (node, vals) in values.iter().enumerate() {
            for &value in vals {
                actions.push(Action::Intervene { node, value });
            }
        }
        let non_action = actions.len();
        actions.push(Action::NonAction);
        for kind in StructureKind::ALL {
            for from in 0..n {
                for to in (0..n).filter(|&to| to != from) {
                    actions.push(Action::Structure { kind, from, to });
                }
            }
        }
        Ok(ActionSpace {
            n,
            actions,
            non_action,
        })
    }

    /// The same intervention values for every node.
    pub fn uniform(n: usize, values: &[f64]) -> Result<Self> {
        ActionSpace::new(n, &vec![values.to_vec(); n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<Action> {
        self.actions.get(index).copied().ok_or(Error::ActionOutOfRange {
            index,
            size: self.actions.len(),
        })
    }

    pub fn index_of(&self, action: &Action) -> Option<usize> {
        self.actions.iter().position(|a| a == action)
    }

    pub fn non_action_index(&self) -> usize {
        self.non_action
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }
}

/// Size of the action space with `k` intervention values per node.
pub fn action_space_size(n: usize, k: usize) -> usize {
    k * n + 1 + 3 * n * (n - 1)
}

/// Flat observation length `2n + n(n-1)/2 + 1`.
pub fn observation_len(n: usize) -> usize {
    2 * n + graph::pair_count(n) + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub horizon: usize,
    /// Intervention values offered for every node.
    pub intervention_values: Vec<f64>,
    pub intervention_bonus: f64,
    /// Also pay the bonus for the non-action (the pseudocode's reading).
    pub bonus_on_non_action: bool,
    pub allow_interventions: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 20,
            intervention_values: vec![5.0],
            intervention_bonus: 0.1,
            bonus_on_non_action: false,
            allow_interventions: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.intervention_bonus >= 0.0) {
            return Err(Error::Config("intervention bonus must be >= 0".into()));
        }
        if self.intervention_values.is_empty() || self.intervention_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("intervention values must be finite and nonempty".into()));
        }
        Ok(())
    }

    pub fn action_space(&self, n: usize) -> Result<ActionSpace> {
        ActionSpace::uniform(n, &self.intervention_values)
    }
}

/// Which actions may be chosen; interventions are masked out when disabled.
pub fn legal_action_mask(cfg: &EnvConfig, space: &ActionSpace) -> Vec<bool> {
    space
        .actions()
        .iter()
        .map(|a| cfg.allow_interventions || !a.is_intervention())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub target_onehot: Vec<f64>,
    pub graph: Vec<f64>,
    pub time: f64,
}

impl Observation {
    pub fn flat(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.values.len() + self.target_onehot.len() + self.graph.len() + 1);
        out.extend_from_slice(&self.values);
        out.extend_from_slice(&self.target_onehot);
        out.extend_from_slice(&self.graph);
        out.push(self.time);
        out
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub scm: Scm,
    pub truth: Dag,
    pub epistemic: DiGraph,
    pub t: usize,
    pub current_intervention: Intervention,
}

impl EpisodeState {
    pub fn is_done(&self, horizon: usize) -> bool {
        self.t >= horizon
    }

    pub fn dshd(&self) -> usize {
        graph::dshd(&self.epistemic, &self.truth).expect("same node count")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// One environment instance. Owns the current episode.
#[derive(Debug, Clone)]
pub struct MetaEnv {
    cfg: EnvConfig,
    space: ActionSpace,
    mask: Vec<bool>,
    state: Option<EpisodeState>,
}

impl MetaEnv {
    pub fn new(cfg: EnvConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let space = cfg.action_space(n)?;
        let mask = legal_action_mask(&cfg, &space);
        Ok(MetaEnv {
            cfg,
            space,
            mask,
            state: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn legal_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n(&self) -> usize {
        self.space.n()
    }

    pub fn observation_len(&self) -> usize {
        observation_len(self.n())
    }

    pub fn state(&self) -> Option<&EpisodeState> {
        self.state.as_ref()
    }

    /// Starts an episode on `scm` with a random epistemic DAG.
    pub fn reset<R: Rng + ?Sized>(&mut self, scm: Scm, rng: &mut R) -> Result<Observation> {
        let epistemic = random_dag(self.n(), rng).into_graph();
        self.reset_with_estimate(scm, epistemic, rng)
    }

    /// Like [`MetaEnv::reset`] but with a caller-chosen starting estimate.
    pub fn reset_with_estimate<R: Rng + ?Sized>(
        &mut self,
        scm: Scm,
        epistemic: DiGraph,
        rng: &mut R,
    ) -> Result<Observation> {
        let n = self.n();
        for got in [scm.n(), epistemic.n()] {
            if got != n {
                return Err(Error::NodeCountMismatch { left: got, right: n });
            }
        }
        let truth = scm.induced_dag();
        let state = EpisodeState {
            scm,
            truth,
            epistemic,
            t: 0,
            current_intervention: Intervention::NONE,
        };
        let obs = self.observe(&state, rng);
        self.state = Some(state);
        Ok(obs)
    }

    fn observe<R: Rng + ?Sized>(&self, state: &EpisodeState, rng: &mut R) -> Observation {
        let n = self.n();
        let mut values = vec![0.0; n];
        state.scm.sample_into(&state.current_intervention, rng, &mut values);
        let mut target_onehot = vec![0.0; n];
        if let Some(node) = state.current_intervention.node() {
            target_onehot[node] = 1.0;
        }
        let mut graph_enc = Vec::with_capacity(graph::pair_count(n));
        graph::encode_into(&state.epistemic, &mut graph_enc);
        Observation {
            values,
            target_onehot,
            graph: graph_enc,
            time: state.t as f64 / self.cfg.horizon as f64,
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action_index: usize, rng: &mut R) -> Result<StepOutcome> {
        let action = self.space.get(action_index)?;
        if !self.mask[action_index] {
            return Err(Error::IllegalAction(action_index));
        }
        let horizon = self.cfg.horizon;
        let mut state = self.state.take().ok_or(Error::EpisodeFinished)?;
        if state.is_done(horizon) {
            self.state = Some(state);
            return Err(Error::EpisodeFinished);
        }

        let mut reward = 0.0;
        match action {
            Action::Structure { kind, from, to } => {
                state.epistemic.apply(kind, from, to)?;
                state.current_intervention = Intervention::NONE;
            }
            Action::Intervene { node, value } => {
                state.current_intervention = Intervention::on(node, value);
                reward += self.cfg.intervention_bonus;
            }
            Action::NonAction => {
                state.current_intervention = Intervention::NONE;
                if self.cfg.bonus_on_non_action {
                    reward += self.cfg.intervention_bonus;
                }
            }
        }

        let last = state.t + 1 == horizon;
        state.t += 1;
        let observation = self.observe(&state, rng);
        if last {
            reward -= state.dshd() as f64;
        }
        self.state = Some(state);
        Ok(StepOutcome {
            observation,
            reward,
            done: last,
        })
    }
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards
        .iter()
        .rev()
        .fold(0.0, |acc, &r| r + gamma * acc)
}

/// One row of a per-episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub action_index: usize,
    pub action_kind: &'static str,
    pub intervened_node: Option<usize>,
    pub reward: f64,
    pub dshd_after_step: usize,
    pub observation: Vec<f64>,
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trace_csv<W: Write>(out: &mut W, rows: &[TraceRow]) -> std::io::Result<()> {
    let obs_len = rows.first().map_or(0, |r| r.observation.len());
    write!(out, "step,action_index,action_kind,intervened_node,reward,dshd_after_step")?;
    for i in 0..obs_len {
        write!(out, ",obs_{i}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            r.action_index,
            r.action_kind,
            r.intervened_node.map(|v| v.to_string()).unwrap_or_default(),
            fmt_f64(r.reward),
            r.dshd_after_step
        )?;
        for v in &r.observation {
            write!(out, ",{}", fmt_f64(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

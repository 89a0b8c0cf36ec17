//! Experiment pipelines: test-set generation, the toy pair, meta-training,
//! the no-intervention ablation and the intervention budget study. Every run
//! writes a manifest with its configuration and the content hashes of its
//! inputs.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{fmt_f64, observation_len, EnvConfig, MetaEnv, TraceRow};
use crate::error::{Error, Result};
use crate::graph::{all_dags, random_dag, DiGraph, MAX_ENUMERATION_NODES};
use crate::policy::{self, Architecture, PolicyParams};
use crate::scm::{generate_linear_scm, read_scms, toy_pair, write_scms, Scm, ScmGenConfig};
use crate::stats::{summarize, wilcoxon_signed_rank, Alternative, StatSummary, WilcoxonResult};
use crate::trainer::{
    self, check_architecture, evaluate, random_baseline, EvalReport, ScmSource, TrainConfig, TrainOutputs,
    TrainRunState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Toy,
    Meta,
    Ablation,
    Budget,
}

/// Hidden layer widths; input and output widths follow from the environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub feature_layers: Vec<usize>,
    pub lstm_width: usize,
    pub actor_layers: Vec<usize>,
    pub critic_layers: Vec<usize>,
}

impl ArchitectureSpec {
    /// 30 / LSTM 30 / actor 30 / critic 10 for up to three nodes, otherwise
    /// 64-64 / LSTM 128 / actor 32 / critic 32.
    pub fn for_nodes(n: usize) -> Self {
        if n <= 3 {
            ArchitectureSpec {
                feature_layers: vec![30],
                lstm_width: 30,
                actor_layers: vec![30],
                critic_layers: vec![10],
            }
        } else {
            ArchitectureSpec {
                feature_layers: vec![64, 64],
                lstm_width: 128,
                actor_layers: vec![32],
                critic_layers: vec![32],
            }
        }
    }

    pub fn build(&self, n: usize, env: &EnvConfig) -> Result<Architecture> {
        let space = env.action_space(n)?;
        Architecture::new(
            observation_len(n),
            &self.feature_layers,
            self.lstm_width,
            &self.actor_layers,
            &self.critic_layers,
            space.len(),
        )
    }
}

/// Environment settings of the toy experiment: horizon 10, `do(X_i=0)` and
/// `do(X_i=5)`, no intervention bonus.
pub fn toy_env_config() -> EnvConfig {
    EnvConfig {
        horizon: 10,
        intervention_values: vec![0.0, 5.0],
        intervention_bonus: 0.0,
        ..EnvConfig::default()
    }
}

fn default_test_scms() -> usize {
    50
}

fn default_monte_carlo() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub n: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Test-set file; required for everything except the toy experiment.
    #[serde(default)]
    pub test_set: Option<PathBuf>,
    /// Leading test SCMs used for evaluation.
    #[serde(default = "default_test_scms")]
    pub test_scms: usize,
    /// Evaluation episodes per SCM; defaults to 10 for the toy pair and 1 otherwise.
    #[serde(default)]
    pub episodes_per_scm: Option<usize>,
    #[serde(default = "default_true")]
    pub greedy: bool,
    /// Repetitions of the random-graph baseline.
    #[serde(default = "default_monte_carlo")]
    pub baseline_repetitions: usize,
    /// Defaults to [`toy_env_config`] for the toy experiment and to
    /// [`EnvConfig::default`] otherwise.
    #[serde(default)]
    pub env: Option<EnvConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scm: ScmGenConfig,
    #[serde(default)]
    pub architecture: Option<ArchitectureSpec>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths are resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = dir.join(&cfg.output_dir);
        }
        if let Some(ts) = cfg.test_set.as_mut().filter(|ts| ts.is_relative()) {
            *ts = dir.join(&*ts);
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        if self.kind == ExperimentKind::Toy && self.n != 3 {
            return Err(Error::Config("the toy experiment has exactly 3 nodes".into()));
        }
        if self.kind != ExperimentKind::Toy && self.test_set.is_none() {
            return Err(Error::Config("test_set is required".into()));
        }
        if self.test_scms == 0 || self.episodes_per_scm == Some(0) || self.baseline_repetitions == 0 {
            return Err(Error::Config("evaluation counts must be positive".into()));
        }
        self.env_config().validate()?;
        self.train.validate()?;
        self.scm.validate()?;
        self.architecture().build(self.n, &self.env_config())?;
        Ok(())
    }

    /// Fails if an input file is missing.
    pub fn check_paths(&self) -> Result<()> {
        if let Some(ts) = &self.test_set {
            if !ts.is_file() {
                return Err(Error::Config(format!("test set {} does not exist", ts.display())));
            }
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        self.env.clone().unwrap_or_else(|| match self.kind {
            ExperimentKind::Toy => toy_env_config(),
            _ => EnvConfig::default(),
        })
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        self.architecture.clone().unwrap_or_else(|| ArchitectureSpec::for_nodes(self.n))
    }

    pub fn episodes_per_scm(&self) -> usize {
        self.episodes_per_scm.unwrap_or(match self.kind {
            ExperimentKind::Toy => 10,
            _ => 1,
        })
    }

    /// The training configuration with the experiment seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Distinct graphs in first-appearance order.
pub fn distinct_graphs(scms: &[Scm]) -> Vec<DiGraph> {
    let mut seen = HashSet::new();
    scms.iter()
        .map(|s| s.induced_dag().into_graph())
        .filter(|g| seen.insert(g.clone()))
        .collect()
}

/// `graph_count` distinct random DAGs, each with `scms_per_graph` linear
/// SCMs, grouped by graph.
pub fn gen_testset(
    n: usize,
    graph_count: usize,
    scms_per_graph: usize,
    cfg: &ScmGenConfig,
    seed: u64,
) -> Result<Vec<Scm>> {
    cfg.validate()?;
    if n <= MAX_ENUMERATION_NODES {
        let available = all_dags(n)?.len();
        if graph_count > available {
            return Err(Error::Config(format!(
                "{graph_count} graphs requested but only {available} DAGs exist on {n} nodes"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut graphs = Vec::with_capacity(graph_count);
    let mut attempts = 0usize;
    while graphs.len() < graph_count {
        attempts += 1;
        if attempts > trainer::DEFAULT_REJECTION_ATTEMPTS * graph_count.max(1) {
            return Err(Error::RejectionBudget(attempts));
        }
        let dag = random_dag(n, &mut rng);
        if seen.insert(dag.as_graph().clone()) {
            graphs.push(dag);
        }
    }
    let mut scms = Vec::with_capacity(graph_count * scms_per_graph);
    for dag in &graphs {
        for _ in 0..scms_per_graph {
            scms.push(generate_linear_scm(dag, cfg, &mut rng));
        }
    }
    Ok(scms)
}

pub fn save_scms(path: &Path, scms: &[Scm]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_scms(&mut f, scms).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Git-style blob hash (SHA-256 over `blob <len>\0<content>`), hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<C: Serialize>(config: &C, seed: u64, inputs: &[&Path]) -> Result<Self> {
        let mut input_hashes = BTreeMap::new();
        for &p in inputs {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            input_hashes.insert(p.display().to_string(), content_hash(&bytes));
        }
        Ok(Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            input_hashes,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Config(e.to_string()))?;
    f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let inputs: Vec<&Path> = cfg.test_set.iter().map(|p| p.as_path()).collect();
    write_json(&cfg.output_dir.join("manifest.json"), &Manifest::new(cfg, cfg.seed, &inputs)?)
}

/// File stored next to checkpoints so a model can be evaluated without its
/// experiment config.
pub const ENV_FILE: &str = "env.json";

pub fn save_env_config(dir: &Path, env: &EnvConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(ENV_FILE), env)
}

/// The environment a checkpoint was trained in: `explicit` if given,
/// otherwise `env.json` beside the checkpoint.
pub fn env_for_model(model: &Path, explicit: Option<&Path>) -> Result<EnvConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => model.parent().unwrap_or(Path::new(".")).join(ENV_FILE),
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let env: EnvConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    env.validate()?;
    Ok(env)
}

pub fn write_episodes_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "episode,scm_index,dshd,interventions,latency_ms")?;
        for (i, e) in report.episodes.iter().enumerate() {
            writeln!(f, "{i},{},{},{},{}", e.scm_index, e.dshd, e.interventions, fmt_f64(e.latency_ms))?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Writes one trace CSV per episode into `dir`.
pub fn write_traces(dir: &Path, traces: &[Vec<TraceRow>]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, rows) in traces.iter().enumerate() {
        let path = dir.join(format!("episode_{i:04}.csv"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        crate::env::write_trace_csv(&mut f, rows)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Mean dSHD of the random-graph baseline over `repetitions` passes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineReport {
    pub repetitions: usize,
    pub mean_dshd: f64,
    /// Statistics of the first pass, comparable to a single policy evaluation.
    pub single_pass: StatSummary,
    pub single_pass_dshd: Vec<usize>,
}

pub fn random_baseline_mc(scms: &[Scm], repetitions: usize, seed: u64) -> Result<BaselineReport> {
    if repetitions == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = random_baseline(scms, &mut rng)?;
    let mut total = first.summary.mean;
    for _ in 1..repetitions {
        total += random_baseline(scms, &mut rng)?.summary.mean;
    }
    Ok(BaselineReport {
        repetitions,
        mean_dshd: total / repetitions as f64,
        single_pass: first.summary,
        single_pass_dshd: first.dshd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub steps: u64,
    pub best_validation_dshd: f64,
    pub evaluations: usize,
}

impl From<&TrainRunState> for TrainingSummary {
    fn from(s: &TrainRunState) -> Self {
        TrainingSummary {
            steps: s.step,
            best_validation_dshd: s.best_score,
            evaluations: s.history.len(),
        }
    }
}

/// A toy evaluation episode, labelled by environment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyEpisode {
    /// `fork` (X0 -> X1, X0 -> X2) or `chain` (X0 -> X1 -> X2).
    pub environment: &'static str,
    pub dshd: usize,
    pub intervened_on_x1: bool,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub training: TrainingSummary,
    pub untrained: StatSummary,
    pub evaluation: StatSummary,
    pub episodes: Vec<ToyEpisode>,
}

impl ToyReport {
    /// Every chain episode that ended with the exact graph intervened on X1.
    pub fn correct_chain_episodes_intervene_on_x1(&self) -> bool {
        self.episodes
            .iter()
            .filter(|e| e.environment == "chain" && e.dshd == 0)
            .all(|e| e.intervened_on_x1)
    }
}

fn toy_episodes(report: &EvalReport, env: &EnvConfig) -> Result<Vec<ToyEpisode>> {
    let space = env.action_space(3)?;
    report
        .episodes
        .iter()
        .map(|e| {
            let actions = e.actions.iter().map(|&a| space.get(a)).collect::<Result<Vec<_>>>()?;
            Ok(ToyEpisode {
                environment: if e.scm_index == 0 { "fork" } else { "chain" },
                dshd: e.dshd,
                intervened_on_x1: actions
                    .iter()
                    .any(|a| matches!(a, crate::env::Action::Intervene { node: 1, .. })),
                actions: actions.iter().map(|a| a.to_string()).collect(),
            })
        })
        .collect()
}

fn train_into(
    dir: &Path,
    source: &ScmSource,
    env: &EnvConfig,
    arch: &Architecture,
    train: &TrainConfig,
    record_graphs: bool,
) -> Result<TrainRunState> {
    save_env_config(dir, env)?;
    let outputs = TrainOutputs {
        dir: Some(dir.to_path_buf()),
        record_graphs,
    };
    trainer::train(source, env, arch, train, &outputs)
}

/// Trains on the toy pair, then evaluates the best model
/// `episodes_per_scm` times on each of the two SCMs.
pub fn run_toy(cfg: &ExperimentConfig) -> Result<ToyReport> {
    cfg.validate()?;
    write_manifest(cfg)?;
    let env = cfg.env_config();
    let arch = cfg.architecture().build(3, &env)?;
    let (fork, chain) = toy_pair();
    let scms = vec![fork, chain];
    let train = cfg.train_config();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let untrained = PolicyParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let untrained = evaluate(&untrained, &env, &scms, cfg.episodes_per_scm(), &mut eval_rng, cfg.greedy, None)?;

    let state = train_into(
        &cfg.output_dir.join("model"),
        &ScmSource::Fixed(scms.clone()),
        &env,
        &arch,
        &train,
        false,
    )?;
    let report = evaluate(&state.best_params, &env, &scms, cfg.episodes_per_scm(), &mut eval_rng, cfg.greedy, None)?;
    write_episodes_csv(&cfg.output_dir.join("episodes.csv"), &report)?;
    let out = ToyReport {
        training: TrainingSummary::from(&state),
        untrained: untrained.summary,
        evaluation: report.summary,
        episodes: toy_episodes(&report, &env)?,
    };
    write_json(&cfg.output_dir.join("report.json"), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaReport {
    pub n: usize,
    pub allow_interventions: bool,
    pub training: TrainingSummary,
    pub evaluation: StatSummary,
    pub dshd: Vec<usize>,
    pub mean_interventions: f64,
    pub intervention_shares: Vec<f64>,
    pub mean_latency_ms: f64,
    pub baseline: BaselineReport,
    /// Training graphs that also occur in the test set; always zero.
    pub test_graphs_seen_in_training: usize,
}

/// Loads the test set and the graphs that must be excluded from training.
pub fn load_test_set(path: &Path, n: usize) -> Result<(Vec<Scm>, HashSet<DiGraph>)> {
    let scms = read_scms(path)?;
    if scms.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(bad) = scms.iter().find(|s| s.n() != n) {
        return Err(Error::NodeCountMismatch {
            left: n,
            right: bad.n(),
        });
    }
    let graphs = distinct_graphs(&scms).into_iter().collect();
    Ok((scms, graphs))
}

fn run_meta_variant(cfg: &ExperimentConfig, allow_interventions: bool, subdir: &str) -> Result<(MetaReport, EvalReport)> {
    let test_path = cfg.test_set.as_deref().ok_or_else(|| Error::Config("test_set is required".into()))?;
    let (scms, test_graphs) = load_test_set(test_path, cfg.n)?;
    let eval_scms = &scms[..cfg.test_scms.min(scms.len())];
    let env = EnvConfig {
        allow_interventions,
        ..cfg.env_config()
    };
    let arch = cfg.architecture().build(cfg.n, &env)?;
    let source = ScmSource::Random {
        n: cfg.n,
        excluded: test_graphs.clone(),
        gen: cfg.scm,
    };
    let dir = cfg.output_dir.join(subdir);
    let state = train_into(&dir, &source, &env, &arch, &cfg.train_config(), true)?;
    let seen = state
        .training_graphs
        .as_ref()
        .map_or(0, |g| g.intersection(&test_graphs).count());
    if seen > 0 {
        return Err(Error::Config(format!("{seen} test graphs were used for training")));
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let report = evaluate(&state.best_params, &env, eval_scms, cfg.episodes_per_scm(), &mut eval_rng, cfg.greedy, None)?;
    write_episodes_csv(&dir.join("episodes.csv"), &report)?;
    let baseline = random_baseline_mc(eval_scms, cfg.baseline_repetitions, cfg.seed.wrapping_add(2))?;
    let out = MetaReport {
        n: cfg.n,
        allow_interventions,
        training: TrainingSummary::from(&state),
        evaluation: report.summary,
        dshd: report.dshd.clone(),
        mean_interventions: report.mean_interventions,
        intervention_shares: report.intervention_shares(),
        mean_latency_ms: report.mean_latency_ms,
        baseline,
        test_graphs_seen_in_training: seen,
    };
    write_json(&dir.join("report.json"), &out)?;
    Ok((out, report))
}

/// Meta-training on random SCMs whose graphs are outside the test set,
/// then frozen evaluation on the leading test SCMs.
pub fn run_meta(cfg: &ExperimentConfig) -> Result<MetaReport> {
    cfg.validate()?;
    cfg.check_paths()?;
    write_manifest(cfg)?;
    let allow = cfg.env_config().allow_interventions;
    Ok(run_meta_variant(cfg, allow, "mcd")?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub with_interventions: MetaReport,
    pub without_interventions: MetaReport,
    /// One-sided test that the dSHDs with interventions are lower;
    /// absent when fewer than five pairs differ.
    pub wilcoxon: Option<WilcoxonResult>,
    pub significance_level: f64,
}

/// Trains the full model and the no-intervention variant with the same
/// seed and budget and compares them on the same test SCMs.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    cfg.check_paths()?;
    write_manifest(cfg)?;
    let (with, _) = run_meta_variant(cfg, true, "mcd")?;
    let (without, _) = run_meta_variant(cfg, false, "mcd_o")?;
    let a: Vec<f64> = with.dshd.iter().map(|&d| d as f64).collect();
    let b: Vec<f64> = without.dshd.iter().map(|&d| d as f64).collect();
    let wilcoxon = match wilcoxon_signed_rank(&a, &b, Alternative::Less) {
        Ok(w) => Some(w),
        Err(e) => {
            log::warn!("paired test skipped: {e}");
            None
        }
    };
    let out = AblationReport {
        with_interventions: with,
        without_interventions: without,
        wilcoxon,
        significance_level: 0.025,
    };
    write_json(&cfg.output_dir.join("ablation.json"), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub horizon: usize,
    pub episodes: usize,
    pub mean_interventions: f64,
    pub max_interventions: usize,
    pub interventions_per_variable: Vec<usize>,
    /// Fraction of interventions per variable; sums to 1 unless no
    /// intervention happened.
    pub shares: Vec<f64>,
    pub evaluation: StatSummary,
}

/// Intervention usage of a frozen model.
pub fn run_budget(
    params: &PolicyParams,
    env: &EnvConfig,
    scms: &[Scm],
    episodes_per_scm: usize,
    greedy: bool,
    seed: u64,
) -> Result<BudgetReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = evaluate(params, env, scms, episodes_per_scm, &mut rng, greedy, None)?;
    Ok(BudgetReport {
        horizon: env.horizon,
        episodes: report.episodes.len(),
        mean_interventions: report.mean_interventions,
        max_interventions: report.episodes.iter().map(|e| e.interventions).max().unwrap_or(0),
        shares: report.intervention_shares(),
        interventions_per_variable: report.interventions_per_variable.clone(),
        evaluation: report.summary,
    })
}

/// Budget experiment from a config: trains like [`run_meta`] and studies
/// the resulting best model.
pub fn run_budget_experiment(cfg: &ExperimentConfig) -> Result<BudgetReport> {
    let meta = run_meta(cfg)?;
    let dir = cfg.output_dir.join("mcd");
    let params = policy::load_params(&dir.join("best.ckpt"))?;
    let (scms, _) = load_test_set(cfg.test_set.as_deref().expect("validated"), cfg.n)?;
    let eval_scms = &scms[..cfg.test_scms.min(scms.len())];
    let out = run_budget(&params, &cfg.env_config(), eval_scms, cfg.episodes_per_scm(), cfg.greedy, cfg.seed.wrapping_add(1))?;
    log::info!("meta evaluation mean dSHD {:.3}", meta.evaluation.mean);
    write_json(&cfg.output_dir.join("budget.json"), &out)?;
    Ok(out)
}

/// Result of any experiment kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentReport {
    Toy(ToyReport),
    Meta(MetaReport),
    Ablation(AblationReport),
    Budget(BudgetReport),
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(match cfg.kind {
        ExperimentKind::Toy => ExperimentReport::Toy(run_toy(cfg)?),
        ExperimentKind::Meta => ExperimentReport::Meta(run_meta(cfg)?),
        ExperimentKind::Ablation => ExperimentReport::Ablation(run_ablation(cfg)?),
        ExperimentKind::Budget => ExperimentReport::Budget(run_budget_experiment(cfg)?),
    })
}

/// Evaluates a checkpoint on an SCM file, optionally writing traces.
pub fn eval_model(
    model: &Path,
    env: &EnvConfig,
    scms: &[Scm],
    episodes_per_scm: usize,
    greedy: bool,
    seed: u64,
    trace_dir: Option<&Path>,
) -> Result<EvalReport> {
    let params = policy::load_params(model)?;
    let n = scms.first().ok_or(Error::EmptyInput)?.n();
    check_architecture(&params, &MetaEnv::new(env.clone(), n)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::new();
    let report = evaluate(
        &params,
        env,
        scms,
        episodes_per_scm,
        &mut rng,
        greedy,
        trace_dir.is_some().then_some(&mut traces),
    )?;
    if let Some(dir) = trace_dir {
        write_traces(dir, &traces)?;
    }
    Ok(report)
}

/// Reads one numeric column from a CSV file: the `dshd` column if the file
/// has a header containing it, otherwise the first column.
pub fn read_value_column(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut column = 0;
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if i == 0 && rec.get(0).is_some_and(|f| f.trim().parse::<f64>().is_err()) {
            column = rec.iter().position(|h| h.trim() == "dshd").unwrap_or(0);
            continue;
        }
        let field = rec.get(column).unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        values.push(field.parse::<f64>().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub a: StatSummary,
    pub b: StatSummary,
    pub wilcoxon: WilcoxonResult,
}

pub fn compare_samples(a: &[f64], b: &[f64], alternative: Alternative) -> Result<ComparisonReport> {
    Ok(ComparisonReport {
        a: summarize(a)?,
        b: summarize(b)?,
        wilcoxon: wilcoxon_signed_rank(a, b, alternative)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn testset_sizes() {
        let cfg = ScmGenConfig::default();
        let scms = gen_testset(3, 7, 10, &cfg, 1).unwrap();
        assert_eq!(scms.len(), 70);
        assert_eq!(distinct_graphs(&scms).len(), 7);
        let scms = gen_testset(4, 200, 1, &cfg, 1).unwrap();
        assert_eq!(distinct_graphs(&scms).len(), 200);
        assert!(gen_testset(3, 26, 1, &cfg, 1).is_err());
        assert_eq!(gen_testset(3, 25, 1, &cfg, 2).unwrap().len(), 25);
    }

    #[test]
    fn testset_is_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScmGenConfig::default();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        save_scms(&p1, &gen_testset(3, 7, 10, &cfg, 42).unwrap()).unwrap();
        save_scms(&p2, &gen_testset(3, 7, 10, &cfg, 42).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (scms, graphs) = load_test_set(&p1, 3).unwrap();
        assert_eq!((scms.len(), graphs.len()), (70, 7));
        assert!(load_test_set(&p1, 4).is_err());
    }

    #[test]
    fn config_parsing() {
        let text = r#"
kind = "meta"
n = 3
seed = 7
output_dir = "out"
test_set = "tests.jsonl"

[train]
total_steps = 1000
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Meta);
        assert_eq!(cfg.train.total_steps, 1000);
        assert_eq!(cfg.train_config().seed, 7);
        assert_eq!(cfg.env_config(), EnvConfig::default());
        assert_eq!(cfg.architecture(), ArchitectureSpec::for_nodes(3));

        let unknown = format!("{text}\nbogus = 1\n");
        assert!(ExperimentConfig::from_toml(&unknown).is_err());
        let no_seed = text.replace("seed = 7\n", "");
        assert!(ExperimentConfig::from_toml(&no_seed).is_err());
        let no_test = text.replace("test_set = \"tests.jsonl\"\n", "");
        assert!(ExperimentConfig::from_toml(&no_test).is_err());

        let toy = ExperimentConfig::from_toml("kind = \"toy\"\nn = 3\nseed = 1\noutput_dir = \"o\"\n").unwrap();
        assert_eq!(toy.env_config(), toy_env_config());
        assert_eq!(toy.episodes_per_scm(), 10);
    }

    #[test]
    fn missing_test_set_fails_at_launch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "kind = \"meta\"\nn = 3\nseed = 1\noutput_dir = \"o\"\ntest_set = \"none.jsonl\"\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn content_hash_matches_git_style_layout() {
        let h = content_hash(b"abc");
        let mut d = Sha256::new();
        d.update(b"blob 3\0abc");
        assert_eq!(h, format!("{:x}", d.finalize()));
        assert_ne!(h, content_hash(b"abd"));
    }

    #[test]
    fn value_columns() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("plain.csv");
        std::fs::write(&plain, "1\n2\n\n3.5\n").unwrap();
        assert_eq!(read_value_column(&plain).unwrap(), vec![1.0, 2.0, 3.5]);
        let headed = dir.path().join("headed.csv");
        std::fs::write(&headed, "episode,dshd\n0,4\n1,2\n").unwrap();
        assert_eq!(read_value_column(&headed).unwrap(), vec![4.0, 2.0]);
    }

    #[test]
    fn budget_shares_sum_to_one() {
        let env = toy_env_config();
        let arch = ArchitectureSpec::for_nodes(3).build(3, &env).unwrap();
        let params = PolicyParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, b) = toy_pair();
        let r = run_budget(&params, &env, &[a, b], 10, false, 4).unwrap();
        assert!(r.max_interventions <= env.horizon);
        assert!(r.mean_interventions > 0.0);
        assert!((r.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_toy_run_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml("kind = \"toy\"\nn = 3\nseed = 5\noutput_dir = \"o\"\n").unwrap();
        cfg.output_dir = dir.path().to_path_buf();
        cfg.train.total_steps = 2_000;
        cfg.train.eval_interval = 1_000;
        let report = run_toy(&cfg).unwrap();
        assert_eq!(report.episodes.len(), 20);
        for f in ["manifest.json", "report.json", "episodes.csv", "model/best.ckpt", "model/env.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let env = env_for_model(&dir.path().join("model/best.ckpt"), None).unwrap();
        assert_eq!(env, toy_env_config());
    }

    #[test]
    fn small_ablation_never_trains_on_test_graphs() {
        let dir = tempfile::tempdir().unwrap();
        let test = dir.path().join("test.jsonl");
        save_scms(&test, &gen_testset(3, 7, 10, &ScmGenConfig::default(), 9).unwrap()).unwrap();
        let text = format!(
            "kind = \"ablation\"\nn = 3\nseed = 2\noutput_dir = {:?}\ntest_set = {:?}\n[train]\ntotal_steps = 2000\neval_interval = 1000\neval_episodes = 4\n",
            dir.path().join("out"),
            test
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let r = run_ablation(&cfg).unwrap();
        assert_eq!(r.with_interventions.test_graphs_seen_in_training, 0);
        assert_eq!(r.without_interventions.mean_interventions, 0.0);
        assert_eq!(r.with_interventions.dshd.len(), 50);
        assert!(dir.path().join("out/manifest.json").exists());
    }
}

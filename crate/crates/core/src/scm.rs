//! Linear-Gaussian structural causal models with hard single-variable
//! interventions.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dag, DiGraph};

/// Zero-mean Gaussian noise; `std_dev` is a standard deviation, not a variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std_dev: f64,
}

impl NoiseSpec {
    pub fn gaussian(std_dev: f64) -> Self {
        NoiseSpec { mean: 0.0, std_dev }
    }

    pub fn variance(&self) -> f64 {
        self.std_dev * self.std_dev
    }
}

/// `x_i = sum_k weights[k] * x[parents[k]] + u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralEq {
    pub parents: Vec<usize>,
    pub weights: Vec<f64>,
    pub noise: NoiseSpec,
}

impl StructuralEq {
    pub fn root(noise: NoiseSpec) -> Self {
        StructuralEq {
            parents: Vec::new(),
            weights: Vec::new(),
            noise,
        }
    }
}

/// A hard intervention `do(X_node = value)` on at most one variable.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Intervention {
    pub target: Option<(usize, f64)>,
}

impl Intervention {
    pub const NONE: Intervention = Intervention { target: None };

    pub fn on(node: usize, value: f64) -> Self {
        Intervention {
            target: Some((node, value)),
        }
    }

    pub fn node(&self) -> Option<usize> {
        self.target.map(|(node, _)| node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    equations: Vec<StructuralEq>,
    order: Vec<usize>,
}

impl Scm {
    pub fn new(equations: Vec<StructuralEq>) -> Result<Self> {
        let n = equations.len();
        let mut graph = DiGraph::empty(n);
        for (child, eq) in equations.iter().enumerate() {
            if eq.parents.len() != eq.weights.len() {
                return Err(Error::Dimension {
                    what: "weights",
                    got: eq.weights.len(),
                    expected: eq.parents.len(),
                });
            }
            if !(eq.noise.std_dev >= 0.0) || !eq.noise.std_dev.is_finite() {
                return Err(Error::Config(format!(
                    "noise std-dev of X{child} must be finite and >= 0"
                )));
            }
            for &p in &eq.parents {
                if graph.has_edge(p, child) {
                    return Err(Error::Config(format!("duplicate parent {p} of X{child}")));
                }
                graph.apply(crate::graph::StructureKind::Add, p, child)?;
                if !graph.has_edge(p, child) {
                    return Err(Error::Cyclic);
                }
            }
        }
        let order = graph.topological_order().ok_or(Error::Cyclic)?;
        Ok(Scm { equations, order })
    }

    pub fn n(&self) -> usize {
        self.equations.len()
    }

    pub fn equations(&self) -> &[StructuralEq] {
        &self.equations
    }

    /// The endogenous part of the induced graph: `p -> c` for every parent
    /// `p` listed in `c`'s equation.
    pub fn induced_dag(&self) -> Dag {
        let edges = self
            .equations
            .iter()
            .enumerate()
            .flat_map(|(c, eq)| eq.parents.iter().map(move |&p| (p, c)));
        Dag::from_edges(self.n(), edges).expect("Scm invariant: induced graph is acyclic")
    }

    /// Draws one joint sample. All exogenous noise terms are drawn in index
    /// order on every call, so an intervention changes only the values that
    /// depend on the intervened variable.
    pub fn sample<R: Rng + ?Sized>(&self, iv: &Intervention, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.sample_into(iv, rng, &mut out);
        out
    }

    pub(crate) fn sample_into<R: Rng + ?Sized>(&self, iv: &Intervention, rng: &mut R, out: &mut [f64]) {
        let n = self.n();
        debug_assert_eq!(out.len(), n);
        let mut noise = [0.0f64; 16];
        let mut noise_heap = Vec::new();
        let noise: &mut [f64] = if n <= noise.len() {
            &mut noise[..n]
        } else {
            noise_heap.resize(n, 0.0);
            &mut noise_heap
        };
        for (u, eq) in noise.iter_mut().zip(&self.equations) {
            let z: f64 = rng.sample(StandardNormal);
            *u = eq.noise.mean + eq.noise.std_dev * z;
        }
        for &i in &self.order {
            if let Some((node, value)) = iv.target {
                if node == i {
                    out[i] = value;
                    continue;
                }
            }
            let eq = &self.equations[i];
            let mut acc = noise[i];
            for (&p, &w) in eq.parents.iter().zip(&eq.weights) {
                acc += w * out[p];
            }
            out[i] = acc;
        }
    }

    /// Weighted adjacency `a[p][c]` with the incoming weights of an
    /// intervened node removed.
    fn adjacency(&self, iv: &Intervention) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut a = vec![vec![0.0; n]; n];
        for (c, eq) in self.equations.iter().enumerate() {
            if iv.node() == Some(c) {
                continue;
            }
            for (&p, &w) in eq.parents.iter().zip(&eq.weights) {
                a[p][c] = w;
            }
        }
        a
    }

    /// `M = (I - A^T)^{-1}` via the finite Neumann series (A is nilpotent).
    fn total_effects(&self, iv: &Intervention) -> Vec<Vec<f64>> {
        let n = self.n();
        let a = self.adjacency(iv);
        let mut m = identity(n);
        let mut power = identity(n);
        for _ in 1..n {
            // power <- power * A^T
            let mut next = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    next[i][j] = (0..n).map(|k| power[i][k] * a[j][k]).sum();
                }
            }
            power = next;
            for i in 0..n {
                for j in 0..n {
                    m[i][j] += power[i][j];
                }
            }
        }
        m
    }

    /// Exact covariance `M D M^T` of the (post-interventional) distribution,
    /// where the intervened coordinate is deterministic.
    pub fn closed_form_covariance(&self, iv: &Intervention) -> Vec<Vec<f64>> {
        let n = self.n();
        let m = self.total_effects(iv);
        let d: Vec<f64> = self
            .equations
            .iter()
            .enumerate()
            .map(|(i, eq)| if iv.node() == Some(i) { 0.0 } else { eq.noise.variance() })
            .collect();
        let mut cov = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                cov[i][j] = (0..n).map(|k| m[i][k] * d[k] * m[j][k]).sum();
            }
        }
        cov
    }

    /// Exact mean vector; nonzero only downstream of an intervention.
    pub fn closed_form_mean(&self, iv: &Intervention) -> Vec<f64> {
        let n = self.n();
        let m = self.total_effects(iv);
        let shift: Vec<f64> = (0..n)
            .map(|i| match iv.target {
                Some((node, value)) if node == i => value,
                _ => self.equations[i].noise.mean,
            })
            .collect();
        (0..n)
            .map(|i| (0..n).map(|k| m[i][k] * shift[k]).sum())
            .collect()
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Ranges for randomly generated linear SCMs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmGenConfig {
    pub weight_low: f64,
    pub weight_high: f64,
    pub sigma_low: f64,
    pub sigma_high: f64,
}

impl Default for ScmGenConfig {
    fn default() -> Self {
        ScmGenConfig {
            weight_low: -1.0,
            weight_high: 1.0,
            sigma_low: 0.0,
            sigma_high: 0.5,
        }
    }
}

impl ScmGenConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.weight_low <= self.weight_high
            && self.sigma_low <= self.sigma_high
            && self.sigma_low >= 0.0
            && [self.weight_low, self.weight_high, self.sigma_low, self.sigma_high]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SCM generator ranges: {self:?}")))
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> f64 {
    low + (high - low) * rng.gen::<f64>()
}

/// Linear additive SCM over `dag`: one uniform weight per edge and one
/// uniform noise standard deviation per variable.
pub fn generate_linear_scm<R: Rng + ?Sized>(dag: &Dag, cfg: &ScmGenConfig, rng: &mut R) -> Scm {
    let equations = (0..dag.n())
        .map(|c| {
            let parents: Vec<usize> = dag.parents(c).collect();
            let weights = parents
                .iter()
                .map(|_| uniform(rng, cfg.weight_low, cfg.weight_high))
                .collect();
            let sigma = uniform(rng, cfg.sigma_low, cfg.sigma_high);
            StructuralEq {
                parents,
                weights,
                noise: NoiseSpec::gaussian(sigma),
            }
        })
        .collect();
    Scm::new(equations).expect("equations mirror an acyclic graph")
}

/// The two observationally equivalent three-variable models
/// `X1 <- X0 -> X2` and `X0 -> X1 -> X2`: the root is `N(0, 0.1)` and every
/// other variable copies its parent.
pub fn toy_pair() -> (Scm, Scm) {
    let root = StructuralEq::root(NoiseSpec::gaussian(0.1));
    let copy = |p: usize| StructuralEq {
        parents: vec![p],
        weights: vec![1.0],
        noise: NoiseSpec::gaussian(0.0),
    };
    let fork = Scm::new(vec![root.clone(), copy(0), copy(0)]).expect("fork is acyclic");
    let chain = Scm::new(vec![root, copy(0), copy(1)]).expect("chain is acyclic");
    (fork, chain)
}

/// One line of an SCM JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmRecord {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub weights: Vec<(usize, usize, f64)>,
    pub sigmas: Vec<f64>,
}

impl From<&Scm> for ScmRecord {
    fn from(scm: &Scm) -> Self {
        let mut edges = Vec::new();
        let mut weights = Vec::new();
        for (c, eq) in scm.equations.iter().enumerate() {
            for (&p, &w) in eq.parents.iter().zip(&eq.weights) {
                edges.push([p, c]);
                weights.push((p, c, w));
            }
        }
        ScmRecord {
            n: scm.n(),
            edges,
            weights,
            sigmas: scm.equations.iter().map(|eq| eq.noise.std_dev).collect(),
        }
    }
}

impl ScmRecord {
    pub fn to_scm(&self) -> Result<Scm> {
        if self.sigmas.len() != self.n {
            return Err(Error::Dimension {
                what: "sigmas",
                got: self.sigmas.len(),
                expected: self.n,
            });
        }
        let mut equations: Vec<StructuralEq> = self
            .sigmas
            .iter()
            .map(|&s| StructuralEq::root(NoiseSpec::gaussian(s)))
            .collect();
        for &(p, c, w) in &self.weights {
            if p >= self.n || c >= self.n {
                return Err(Error::NodeOutOfRange {
                    node: p.max(c),
                    n: self.n,
                });
            }
            if !self.edges.contains(&[p, c]) {
                return Err(Error::Config(format!("weight for {p}->{c} has no matching edge")));
            }
            equations[c].parents.push(p);
            equations[c].weights.push(w);
        }
        let scm = Scm::new(equations)?;
        if scm.induced_dag().edge_count() != self.edges.len() {
            return Err(Error::Config("every edge needs exactly one weight".into()));
        }
        Ok(scm)
    }
}

pub fn write_scms<W: Write>(out: &mut W, scms: &[Scm]) -> std::io::Result<()> {
    for scm in scms {
        serde_json::to_writer(&mut *out, &ScmRecord::from(scm))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scms(path: &Path) -> Result<Vec<Scm>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scms = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let rec: ScmRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        scms.push(rec.to_scm().map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(scms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::all_dags;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn toy_fork_copies_root() {
        let (fork, _) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = fork.sample(&Intervention::NONE, &mut rng);
            assert_eq!(x[0], x[1]);
            assert_eq!(x[0], x[2]);
        }
    }

    #[test]
    fn toy_interventions_on_middle_variable() {
        let (fork, chain) = toy_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let iv = Intervention::on(1, 5.0);
        for _ in 0..100 {
            let x = chain.sample(&iv, &mut rng);
            assert_eq!((x[1], x[2]), (5.0, 5.0));
            let y = fork.sample(&iv, &mut rng);
            assert_eq!(y[1], 5.0);
            assert_eq!(y[2], y[0]);
        }
    }

    #[test]
    fn toy_induced_graphs() {
        let (fork, chain) = toy_pair();
        assert_eq!(*fork.induced_dag(), DiGraph::from_edges(3, [(0, 1), (0, 2)]).unwrap());
        assert_eq!(*chain.induced_dag(), DiGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap());
    }

    #[test]
    fn toy_covariance_is_uniform() {
        let (fork, chain) = toy_pair();
        for scm in [fork, chain] {
            for row in scm.closed_form_covariance(&Intervention::NONE) {
                for v in row {
                    assert!(close(v, 0.01));
                }
            }
        }
    }

    #[test]
    fn covariance_of_single_root() {
        let scm = Scm::new(vec![StructuralEq::root(NoiseSpec::gaussian(0.3))]).unwrap();
        let cov = scm.closed_form_covariance(&Intervention::NONE);
        assert!(close(cov[0][0], 0.09));
    }

    #[test]
    fn covariance_of_weighted_pair() {
        let (w, s0, s1) = (-0.7, 0.4, 0.25);
        let scm = Scm::new(vec![
            StructuralEq::root(NoiseSpec::gaussian(s0)),
            StructuralEq {
                parents: vec![0],
                weights: vec![w],
                noise: NoiseSpec::gaussian(s1),
            },
        ])
        .unwrap();
        let cov = scm.closed_form_covariance(&Intervention::NONE);
        assert!(close(cov[1][1], w * w * s0 * s0 + s1 * s1));
        assert!(close(cov[0][1], w * s0 * s0));
        let cut = scm.closed_form_covariance(&Intervention::on(1, 5.0));
        assert!(close(cut[1][1], 0.0));
        assert!(close(cut[0][0], s0 * s0));
        let mean = scm.closed_form_mean(&Intervention::on(0, 5.0));
        assert!(close(mean[1], 5.0 * w));
    }

    #[test]
    fn empty_dag_gives_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scm = generate_linear_scm(&Dag::empty(3), &ScmGenConfig::default(), &mut rng);
        assert!(scm.equations().iter().all(|eq| eq.parents.is_empty()));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let chain = Dag::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let cfg = ScmGenConfig::default();
        let a = generate_linear_scm(&chain, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = generate_linear_scm(&chain, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn generated_parameters_stay_in_range() {
        let full = Dag::from_edges(3, [(0, 1), (0, 2), (1, 2)]).unwrap();
        let cfg = ScmGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let scm = generate_linear_scm(&full, &cfg, &mut rng);
            for eq in scm.equations() {
                assert!(eq.weights.iter().all(|w| (-1.0..=1.0).contains(w)));
                assert!((0.0..=0.5).contains(&eq.noise.std_dev));
            }
        }
    }

    #[test]
    fn induced_dag_round_trips_all_three_node_dags() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dag in all_dags(3).unwrap() {
            let scm = generate_linear_scm(&dag, &ScmGenConfig::default(), &mut rng);
            assert_eq!(scm.induced_dag(), dag);
        }
    }

    #[test]
    fn rejects_cyclic_equations() {
        let eq = |p: usize| StructuralEq {
            parents: vec![p],
            weights: vec![1.0],
            noise: NoiseSpec::gaussian(0.1),
        };
        assert!(matches!(Scm::new(vec![eq(2), eq(0), eq(1)]), Err(Error::Cyclic)));
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dag = Dag::from_edges(4, [(0, 1), (2, 1), (1, 3)]).unwrap();
        let scm = generate_linear_scm(&dag, &ScmGenConfig::default(), &mut rng);
        let mut buf = Vec::new();
        write_scms(&mut buf, std::slice::from_ref(&scm)).unwrap();
        let rec: ScmRecord = serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(rec.to_scm().unwrap(), scm);
    }
}

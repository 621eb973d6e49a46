//! Acyclic linear structural causal models with interventions on the
//! response assignment.
//!
//! Nodes are indexed `0..d` for the predictors `X_1..X_d` and `d` for the
//! response `Y`. In every environment the predictor assignments
//! `X = gamma * Y + B X + eps_X` are shared, while the response assignment
//! `Y = (alpha_e + beta)^T X + mu_e + eps_Y` carries environment-specific
//! coefficient perturbations `alpha_e` (supported on the set `PE` of
//! perturbed parents) and a mean shift `mu_e`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Attempts allowed when searching for a graph with a valid response node.
pub const GENERATION_BUDGET: usize = 1000;

/// Means and variances of the exogenous noise terms, shared by all environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub x_mean: Vec<f64>,
    pub x_var: Vec<f64>,
    pub y_mean: f64,
    pub y_var: f64,
}

impl NoiseSpec {
    pub fn standard(d: usize) -> Self {
        NoiseSpec {
            x_mean: vec![0.0; d],
            x_var: vec![1.0; d],
            y_mean: 0.0,
            y_var: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScmModelDoc {
    d: usize,
    b_matrix: Vec<Vec<f64>>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    #[serde(default)]
    response_parents: Vec<usize>,
    #[serde(default)]
    pe_set: Vec<usize>,
    noise: NoiseSpec,
    #[serde(default)]
    topo_order: Vec<usize>,
}

/// A validated linear SCM over `(X_1..X_d, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmModelDoc", into = "ScmModelDoc")]
pub struct ScmModel {
    d: usize,
    /// `b_matrix[j][i]`: coefficient of `X_i` in the assignment of `X_j`.
    b_matrix: Vec<Vec<f64>>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    response_parents: Vec<usize>,
    pe_set: Vec<usize>,
    noise: NoiseSpec,
    topo_order: Vec<usize>,
}

impl TryFrom<ScmModelDoc> for ScmModel {
    type Error = Error;

    fn try_from(doc: ScmModelDoc) -> Result<Self> {
        let model = ScmModel::new(doc.b_matrix, doc.gamma, doc.beta, doc.noise)?;
        if model.d != doc.d {
            return Err(Error::InvalidModel(format!(
                "declared d = {} but coefficients have {} predictors",
                doc.d, model.d
            )));
        }
        if !doc.response_parents.is_empty() && doc.response_parents != model.response_parents {
            return Err(Error::InvalidModel(
                "response_parents disagrees with the nonzero entries of beta".into(),
            ));
        }
        model.with_pe_set(doc.pe_set)
    }
}

impl From<ScmModel> for ScmModelDoc {
    fn from(m: ScmModel) -> Self {
        ScmModelDoc {
            d: m.d,
            b_matrix: m.b_matrix,
            gamma: m.gamma,
            beta: m.beta,
            response_parents: m.response_parents,
            pe_set: m.pe_set,
            noise: m.noise,
            topo_order: m.topo_order,
        }
    }
}

/// Per-environment intervention on the response assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub env_id: String,
    /// Coefficient perturbation; zero outside the model's `pe_set`.
    pub alpha: Vec<f64>,
    /// Deterministic shift of the response noise mean.
    pub mu: f64,
}

impl EnvParams {
    /// An environment without intervention.
    pub fn baseline(env_id: impl Into<String>, d: usize) -> Self {
        EnvParams {
            env_id: env_id.into(),
            alpha: vec![0.0; d],
            mu: 0.0,
        }
    }
}

/// Response transform `f(x) = sign(x) |x|^b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    pub exponent: f64,
    pub enabled: bool,
}

impl Default for NonlinearitySpec {
    fn default() -> Self {
        NonlinearitySpec {
            exponent: 1.0,
            enabled: false,
        }
    }
}

impl NonlinearitySpec {
    pub fn power(exponent: f64) -> Result<Self> {
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(Error::Config(format!("exponent must be positive, got {exponent}")));
        }
        Ok(NonlinearitySpec {
            exponent,
            enabled: true,
        })
    }

    pub fn is_identity(&self) -> bool {
        !self.enabled || self.exponent == 1.0
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.is_identity() {
            x
        } else {
            x.signum() * x.abs().powf(self.exponent)
        }
    }
}

/// Additive Gaussian measurement error on the emitted variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementErrorSpec {
    pub variance: f64,
    /// Leave the response of test environments uncorrupted.
    pub exclude_test_response: bool,
}

impl Default for MeasurementErrorSpec {
    fn default() -> Self {
        MeasurementErrorSpec {
            variance: 0.0,
            exclude_test_response: true,
        }
    }
}

impl MeasurementErrorSpec {
    pub fn gaussian(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("variance must be >= 0, got {variance}")));
        }
        Ok(MeasurementErrorSpec {
            variance,
            exclude_test_response: true,
        })
    }
}

/// Exact first and second moments of `(X_1..X_d, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    /// Moments of the observed variables under independent measurement error
    /// of variance `variance` on every predictor, and on the response when
    /// `include_response` is set.
    pub fn with_measurement_error(&self, variance: f64, include_response: bool) -> Moments {
        let mut cov = self.cov.clone();
        let last = cov.nrows() - 1;
        for i in 0..last {
            cov[(i, i)] += variance;
        }
        if include_response {
            cov[(last, last)] += variance;
        }
        Moments {
            mean: self.mean.clone(),
            cov,
        }
    }
}

impl ScmModel {
    /// Builds a model from its coefficients; the parent set of `Y` is read
    /// off `beta` and `pe_set` starts empty.
    pub fn new(
        b_matrix: Vec<Vec<f64>>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        noise: NoiseSpec,
    ) -> Result<Self> {
        let d = gamma.len();
        if d == 0 {
            return Err(Error::InvalidModel("model needs at least one predictor".into()));
        }
        if beta.len() != d || b_matrix.len() != d || b_matrix.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidModel(format!(
                "expected B {d}x{d}, gamma and beta of length {d}"
            )));
        }
        if noise.x_mean.len() != d || noise.x_var.len() != d {
            return Err(Error::InvalidModel(format!("noise spec must cover {d} predictors")));
        }
        let all_finite = b_matrix.iter().flatten().chain(&gamma).chain(&beta).all(|v| v.is_finite())
            && noise.x_mean.iter().chain(&noise.x_var).all(|v| v.is_finite())
            && noise.y_mean.is_finite()
            && noise.y_var.is_finite();
        if !all_finite {
            return Err(Error::InvalidModel("coefficients must be finite".into()));
        }
        if noise.x_var.iter().any(|&v| v < 0.0) || noise.y_var < 0.0 {
            return Err(Error::InvalidModel("noise variances must be >= 0".into()));
        }
        for j in 0..d {
            if b_matrix[j][j] != 0.0 {
                return Err(Error::InvalidModel(format!("self loop on X_{}", j + 1)));
            }
            if gamma[j] != 0.0 && beta[j] != 0.0 {
                return Err(Error::InvalidModel(format!(
                    "X_{} is both parent and child of Y",
                    j + 1
                )));
            }
        }
        let response_parents = (0..d).filter(|&j| beta[j] != 0.0).collect();
        let mut model = ScmModel {
            d,
            b_matrix,
            gamma,
            beta,
            response_parents,
            pe_set: Vec::new(),
            noise,
            topo_order: Vec::new(),
        };
        model.topo_order = model.topological_order()?;
        Ok(model)
    }

    /// Returns a copy with the set of perturbed parents replaced.
    pub fn with_pe_set(mut self, mut pe_set: Vec<usize>) -> Result<Self> {
        pe_set.sort_unstable();
        pe_set.dedup();
        if let Some(&j) = pe_set.iter().find(|j| !self.response_parents.contains(j)) {
            return Err(Error::InvalidModel(format!(
                "X_{} is in PE but is not a parent of Y",
                j + 1
            )));
        }
        self.pe_set = pe_set;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn b_matrix(&self) -> &[Vec<f64>] {
        &self.b_matrix
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn response_parents(&self) -> &[usize] {
        &self.response_parents
    }

    pub fn pe_set(&self) -> &[usize] {
        &self.pe_set
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Index of the response node in joint `(X, Y)` indexing.
    pub fn response_node(&self) -> usize {
        self.d
    }

    /// Predictors that `Y` points to.
    pub fn response_children(&self) -> Vec<usize> {
        (0..self.d).filter(|&j| self.gamma[j] != 0.0).collect()
    }

    /// Parents of `X_k` among the predictors (excluding `Y`).
    pub fn predictor_parents(&self, k: usize) -> Vec<usize> {
        (0..self.d).filter(|&i| self.b_matrix[k][i] != 0.0).collect()
    }

    /// Nodes reachable from `Y` along directed edges, `Y` excluded.
    pub fn response_descendants(&self) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = self.response_children();
        while let Some(j) = stack.pop() {
            if seen.insert(j) {
                stack.extend((0..self.d).filter(|&c| self.b_matrix[c][j] != 0.0));
            }
        }
        seen
    }

    /// Joint coefficient matrix `A` over `(X, Y)` in environment `env`:
    /// entry `(child, parent)` is the coefficient of `parent` in `child`'s assignment.
    pub fn joint_coefficients(&self, env: &EnvParams) -> DMatrix<f64> {
        let d = self.d;
        let mut a = DMatrix::zeros(d + 1, d + 1);
        for j in 0..d {
            for i in 0..d {
                a[(j, i)] = self.b_matrix[j][i];
            }
            a[(j, d)] = self.gamma[j];
            a[(d, j)] = self.beta[j] + env.alpha[j];
        }
        a
    }

    /// Kahn's algorithm, lowest index first among ready nodes.
    fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.d + 1;
        let parent = |child: usize, p: usize| -> bool {
            let d = self.d;
            match (child == d, p == d) {
                (true, true) => false,
                (true, false) => self.beta[p] != 0.0,
                (false, true) => self.gamma[child] != 0.0,
                (false, false) => self.b_matrix[child][p] != 0.0,
            }
        };
        let mut indegree: Vec<usize> = (0..n)
            .map(|c| (0..n).filter(|&p| p != c && parent(c, p)).count())
            .collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&c| indegree[c] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&node) = ready.iter().next() {
            ready.remove(&node);
            order.push(node);
            for c in 0..n {
                if c != node && parent(c, node) {
                    indegree[c] -= 1;
                    if indegree[c] == 0 {
                        ready.insert(c);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidModel("graph contains a directed cycle".into()));
        }
        Ok(order)
    }

    /// Checks that `env` fits this model.
    pub fn check_env(&self, env: &EnvParams) -> Result<()> {
        if env.alpha.len() != self.d {
            return Err(Error::InvalidModel(format!(
                "environment {} has alpha of length {}, expected {}",
                env.env_id,
                env.alpha.len(),
                self.d
            )));
        }
        if !env.mu.is_finite() || env.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "environment {} has non-finite parameters",
                env.env_id
            )));
        }
        for (j, &a) in env.alpha.iter().enumerate() {
            if a != 0.0 && !self.pe_set.contains(&j) {
                return Err(Error::InvalidModel(format!(
                    "environment {} perturbs X_{} outside PE",
                    env.env_id,
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

/// Draws `n` rows from environment `env` by ancestral sampling.
///
/// The response transform acts on the completed response assignment,
/// noise and shift included. Children of `Y` see the transformed latent
/// response; measurement error is added to the emitted values only.
#[allow(clippy::too_many_arguments)]
pub fn sample_environment(
    model: &ScmModel,
    env: &EnvParams,
    n: usize,
    rng: &mut Rng,
    nl: &NonlinearitySpec,
    me: &MeasurementErrorSpec,
    is_test: bool,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    model.check_env(env)?;
    let d = model.d;
    let a = model.joint_coefficients(env);
    let noise = &model.noise;
    let x_sd: Vec<f64> = noise.x_var.iter().map(|v| v.sqrt()).collect();
    let y_sd = noise.y_var.sqrt();
    let me_sd = me.variance.sqrt();
    let corrupt_y = !(is_test && me.exclude_test_response);

    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut latent = vec![0.0; d + 1];
    for row in 0..n {
        for &node in &model.topo_order {
            let mut v = 0.0;
            for (p, &lv) in latent.iter().enumerate() {
                let c = a[(node, p)];
                if c != 0.0 {
                    v += c * lv;
                }
            }
            let z: f64 = StandardNormal.sample(rng);
            if node == d {
                v += env.mu + noise.y_mean + y_sd * z;
                v = nl.apply(v);
            } else {
                v += noise.x_mean[node] + x_sd[node] * z;
            }
            latent[node] = v;
        }
        for j in 0..d {
            x[(row, j)] = latent[j];
        }
        y[row] = latent[d];
        if me.variance > 0.0 {
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                x[(row, j)] += me_sd * z;
            }
            if corrupt_y {
                let z: f64 = StandardNormal.sample(rng);
                y[row] += me_sd * z;
            }
        }
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled data"));
    }
    Ok((x, y))
}

/// Exact mean and covariance of `(X, Y)` in environment `env` for the linear model.
pub fn population_moments(
    model: &ScmModel,
    env: &EnvParams,
    nl: &NonlinearitySpec,
) -> Result<Moments> {
    if !nl.is_identity() {
        return Err(Error::Config(
            "population moments are only available for the linear model".into(),
        ));
    }
    model.check_env(env)?;
    let d = model.d;
    let a = model.joint_coefficients(env);
    let i_minus_a = DMatrix::identity(d + 1, d + 1) - a;
    let inv = i_minus_a
        .try_inverse()
        .ok_or_else(|| Error::InvalidModel("I - A is singular; model is not acyclic".into()))?;
    let noise = &model.noise;
    let mut shift = DVector::zeros(d + 1);
    let mut omega = DMatrix::zeros(d + 1, d + 1);
    for j in 0..d {
        shift[j] = noise.x_mean[j];
        omega[(j, j)] = noise.x_var[j];
    }
    shift[d] = noise.y_mean + env.mu;
    omega[(d, d)] = noise.y_var;
    let mean = &inv * shift;
    let cov = &inv * omega * inv.transpose();
    // symmetrize away rounding
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(Moments { mean, cov })
}

fn draw_coefficient(rng: &mut Rng) -> f64 {
    let magnitude = rng.random_range(0.5..=1.5);
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Random DAG over `d + 1` nodes from a strictly lower-triangular
/// Bernoulli(1/2) adjacency, with the response chosen uniformly among the
/// nodes that have both a parent and a child.
pub fn random_model(rng: &mut Rng, d: usize) -> Result<ScmModel> {
    if d < 3 {
        return Err(Error::Config(format!("random models need d >= 3, got {d}")));
    }
    let nodes = d + 1;
    for _ in 0..GENERATION_BUDGET {
        // edges[i] lists the parents j < i of generation node i
        let edges: Vec<Vec<usize>> = (0..nodes)
            .map(|i| (0..i).filter(|_| rng.random_bool(0.5)).collect())
            .collect();
        let has_child = |j: usize| edges.iter().any(|ps| ps.contains(&j));
        let candidates: Vec<usize> = (0..nodes)
            .filter(|&i| !edges[i].is_empty() && has_child(i))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let y = candidates[rng.random_range(0..candidates.len())];
        let xi = |node: usize| if node < y { node } else { node - 1 };

        let mut b = vec![vec![0.0; d]; d];
        let mut gamma = vec![0.0; d];
        let mut beta = vec![0.0; d];
        for (child, parents) in edges.iter().enumerate() {
            for &p in parents {
                let c = draw_coefficient(rng);
                if child == y {
                    beta[xi(p)] = c;
                } else if p == y {
                    gamma[xi(child)] = c;
                } else {
                    b[xi(child)][xi(p)] = c;
                }
            }
        }
        return ScmModel::new(b, gamma, beta, NoiseSpec::standard(d));
    }
    Err(Error::Generation {
        attempts: GENERATION_BUDGET,
    })
}

fn uniform_symmetric(rng: &mut Rng, scale: f64) -> f64 {
    scale * (2.0 * rng.random::<f64>() - 1.0)
}

/// Chooses the perturbed parent set and draws per-environment intervention
/// parameters. The first `n_train` environments use scale `a_train`, the
/// remaining `n_test` use `a_test`. Environment ids are `e1, e2, ...`.
pub fn perturb_environments(
    model: &ScmModel,
    rng: &mut Rng,
    n_train: usize,
    n_test: usize,
    a_train: f64,
    a_test: f64,
) -> Result<(ScmModel, Vec<EnvParams>)> {
    let parents = model.response_parents();
    if parents.is_empty() {
        return Err(Error::Config("Y has no parents to perturb".into()));
    }
    if !(a_train >= 0.0 && a_test >= 0.0) {
        return Err(Error::Config("perturbation scales must be >= 0".into()));
    }
    let n_p = rng.random_range(1..=parents.len());
    let mut pe: Vec<usize> = rand::seq::index::sample(rng, parents.len(), n_p)
        .into_iter()
        .map(|i| parents[i])
        .collect();
    pe.sort_unstable();
    let model = model.clone().with_pe_set(pe)?;

    let d = model.d();
    let envs = (0..n_train + n_test)
        .map(|e| {
            let a = if e < n_train { a_train } else { a_test };
            let mut alpha = vec![0.0; d];
            for &j in model.pe_set() {
                alpha[j] = uniform_symmetric(rng, a);
            }
            let mu = uniform_symmetric(rng, a);
            EnvParams {
                env_id: format!("e{}", e + 1),
                alpha,
                mu,
            }
        })
        .collect();
    Ok((model, envs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;

    fn degenerate_model() -> ScmModel {
        let noise = NoiseSpec {
            x_mean: vec![2.0],
            x_var: vec![0.0],
            y_mean: 0.0,
            y_var: 0.0,
        };
        ScmModel::new(vec![vec![0.0]], vec![0.0], vec![1.0], noise).unwrap()
    }

    /// X1 = e1, Y = 2 X1 + eY, X2 = Y + e2.
    fn chain_2() -> ScmModel {
        ScmModel::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![0.0, 1.0],
            vec![2.0, 0.0],
            NoiseSpec::standard(2),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_sampler_is_deterministic() {
        let m = degenerate_model();
        let mut rng = SeedStream::new(1).rng();
        let env = EnvParams::baseline("e", 1);
        let (x, y) = sample_environment(
            &m,
            &env,
            4,
            &mut rng,
            &NonlinearitySpec::default(),
            &MeasurementErrorSpec::default(),
            false,
        )
        .unwrap();
        assert!(x.iter().all(|&v| v == 2.0));
        assert!(y.iter().all(|&v| v == 2.0));

        let shifted = EnvParams { mu: 3.0, ..env };
        let (_, y) = sample_environment(
            &m,
            &shifted,
            4,
            &mut rng,
            &NonlinearitySpec::default(),
            &MeasurementErrorSpec::default(),
            false,
        )
        .unwrap();
        assert!(y.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn chain_moments_by_hand() {
        let m = chain_2();
        let mom = population_moments(&m, &EnvParams::baseline("e", 2), &NonlinearitySpec::default())
            .unwrap();
        // index order: X1, X2, Y
        assert_relative_eq!(mom.cov[(2, 2)], 5.0, epsilon = 1e-12);
        assert_relative_eq!(mom.cov[(0, 2)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(mom.cov[(1, 1)], 6.0, epsilon = 1e-12);
        assert_relative_eq!(mom.cov[(1, 2)], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_coefficients_give_noise_moments() {
        let noise = NoiseSpec {
            x_mean: vec![1.0, -1.0],
            x_var: vec![2.0, 3.0],
            y_mean: 0.5,
            y_var: 4.0,
        };
        let m = ScmModel::new(vec![vec![0.0; 2]; 2], vec![0.0; 2], vec![0.0; 2], noise).unwrap();
        let mom =
            population_moments(&m, &EnvParams::baseline("e", 2), &NonlinearitySpec::default())
                .unwrap();
        assert_eq!(mom.mean.as_slice(), &[1.0, -1.0, 0.5]);
        assert_eq!(mom.cov, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 4.0])));
    }

    #[test]
    fn mean_shift_moves_only_the_mean() {
        let m = chain_2().with_pe_set(vec![0]).unwrap();
        let base = EnvParams::baseline("a", 2);
        let shifted = EnvParams { mu: 1.5, ..base.clone() };
        let nl = NonlinearitySpec::default();
        let m0 = population_moments(&m, &base, &nl).unwrap();
        let m1 = population_moments(&m, &shifted, &nl).unwrap();
        assert_relative_eq!(m1.mean[2] - m0.mean[2], 1.5, epsilon = 1e-12);
        assert_relative_eq!(m1.cov, m0.cov, epsilon = 1e-12);
    }

    #[test]
    fn cycles_are_rejected() {
        // X1 -> X2 -> X1
        let b = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let err = ScmModel::new(b, vec![0.0; 2], vec![1.0, 0.0], NoiseSpec::standard(2));
        assert!(matches!(err, Err(Error::InvalidModel(_))));
        // Y -> X1 -> Y
        let err = ScmModel::new(vec![vec![0.0]], vec![1.0], vec![1.0], NoiseSpec::standard(1));
        assert!(matches!(err, Err(Error::InvalidModel(_))));
        // Y -> X2 -> X1 -> Y
        let b = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let err = ScmModel::new(b, vec![0.0, 1.0], vec![1.0, 0.0], NoiseSpec::standard(2));
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn alpha_outside_pe_is_rejected() {
        let m = chain_2();
        let env = EnvParams {
            env_id: "e".into(),
            alpha: vec![1.0, 0.0],
            mu: 0.0,
        };
        assert!(m.check_env(&env).is_err());
        assert!(m.clone().with_pe_set(vec![1]).is_err());
        assert!(m.with_pe_set(vec![0]).unwrap().check_env(&env).is_ok());
    }

    #[test]
    fn random_model_properties() {
        for seed in 0..50 {
            let m = random_model(&mut SeedStream::new(seed).rng(), 9).unwrap();
            assert_eq!(m.d(), 9);
            assert!(!m.response_parents().is_empty());
            assert!(!m.response_children().is_empty());
            assert_eq!(m.topo_order().len(), 10);
            let again = random_model(&mut SeedStream::new(seed).rng(), 9).unwrap();
            assert_eq!(m, again);
            for &c in m.b_matrix().iter().flatten().chain(m.gamma()).chain(m.beta()) {
                assert!(c == 0.0 || (0.5..=1.5).contains(&c.abs()));
            }
        }
        assert!(random_model(&mut SeedStream::new(0).rng(), 2).is_err());
    }

    #[test]
    fn perturbation_bounds_and_support() {
        let m = random_model(&mut SeedStream::new(3).rng(), 9).unwrap();
        let (m, envs) = perturb_environments(&m, &mut SeedStream::new(4).rng(), 5, 5, 2.0, 10.0)
            .unwrap();
        assert_eq!(envs.len(), 10);
        assert!(!m.pe_set().is_empty());
        for (i, env) in envs.iter().enumerate() {
            let bound = if i < 5 { 2.0 } else { 10.0 };
            assert!(env.alpha.iter().all(|a| a.abs() <= bound));
            assert!(env.mu.abs() <= bound);
            m.check_env(env).unwrap();
        }
        let (_, zero) = perturb_environments(&m, &mut SeedStream::new(4).rng(), 2, 2, 0.0, 0.0)
            .unwrap();
        assert!(zero.iter().all(|e| e.mu == 0.0 && e.alpha.iter().all(|&a| a == 0.0)));

        let (_, again) = perturb_environments(&m, &mut SeedStream::new(4).rng(), 5, 5, 2.0, 10.0)
            .unwrap();
        assert_eq!(envs, again);
    }

    #[test]
    fn model_roundtrips_through_json() {
        let m = random_model(&mut SeedStream::new(11).rng(), 5).unwrap();
        let m = m.clone().with_pe_set(vec![m.response_parents()[0]]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: ScmModel = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn identity_transform_and_zero_error_reproduce_the_linear_sampler() {
        let m = random_model(&mut SeedStream::new(5).rng(), 4).unwrap();
        let env = EnvParams::baseline("e", 4);
        let plain = sample_environment(
            &m,
            &env,
            50,
            &mut SeedStream::new(9).rng(),
            &NonlinearitySpec::default(),
            &MeasurementErrorSpec::default(),
            false,
        )
        .unwrap();
        let wrapped = sample_environment(
            &m,
            &env,
            50,
            &mut SeedStream::new(9).rng(),
            &NonlinearitySpec::power(1.0).unwrap(),
            &MeasurementErrorSpec::gaussian(0.0).unwrap(),
            false,
        )
        .unwrap();
        assert_eq!(plain, wrapped);
    }
}

//! Coupled two-dimensional Dirichlet-process mixture of Gaussians.
//!
//! Dimension 1 holds component means, dimension 2 holds covariances. The
//! pair `(z1, z2)` of every point is resampled jointly from the coupled
//! Chinese-restaurant conditional (see [`joint_conditional_weights`]) times
//! the Gaussian likelihood, with a few auxiliary components per dimension
//! standing in for the unoccupied ones. Component parameters are then
//! redrawn from their conditionals.
//!
//! With share weights `(1, 0, 0)` and a diagonal initialization the sampler is
//! a standard single-dimension DPMM.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::gaussian::{
    sample_cov_posterior_scatter, sample_mean_posterior_grouped, MeanGroup, NiwPrior, PdMatrix,
};
use crate::par;
use crate::rng::{stream_rng, M3Rng};
use crate::special::log_sum_exp;
use crate::types::{Assignment2D, Concentration, JointCounts, ShareWeights};

pub const DEFAULT_AUX_COUNT: usize = 3;

/// Prior weight of every `(c, d)` pair for the point being resampled.
///
/// `counts` must exclude that point. The returned matrix is
/// `(K1 + aux) x (K2 + aux)`: the leading `K1 x K2` block covers existing
/// pairs, rows `K1..` are auxiliary (new) mean components and columns `K2..`
/// auxiliary covariance components. With `N' = counts.total()`:
///
/// * existing pair: `((1 - w) n_c. n_.d + w n_cd N') / (N' (N' + a))`
/// * new c, existing d: `w1 a n_.d / (N' (N' + a))`, split over the aux rows
/// * existing c, new d: `w2 a n_c. / (N' (N' + a))`, split over the aux columns
/// * both new: `w a / (N' + a)`, split over the aux block
///
/// The four cases sum to one. When `N' = 0` only the both-new case can
/// occur and it receives all the mass.
pub fn joint_conditional_weights(
    counts: &JointCounts,
    alpha: Concentration,
    weights: ShareWeights,
    aux_count: usize,
) -> Result<DMatrix<f64>> {
    if aux_count == 0 {
        return Err(M3Error::InvalidParameter("aux_count must be at least 1".into()));
    }
    let (k1, k2) = (counts.k1(), counts.k2());
    let m = aux_count as f64;
    let mut p = DMatrix::zeros(k1 + aux_count, k2 + aux_count);
    if counts.total() == 0 {
        p.view_mut((k1, k2), (aux_count, aux_count)).fill(1.0 / (m * m));
        return Ok(p);
    }
    let n = counts.total() as f64;
    let a = alpha.value();
    let (w, w1, w2) = (weights.omega(), weights.omega1(), weights.omega2());
    let denom = n * (n + a);
    let rows = counts.row_marginals();
    let cols = counts.col_marginals();
    for c in 0..k1 {
        let nc = rows[c] as f64;
        for d in 0..k2 {
            let nd = cols[d] as f64;
            p[(c, d)] = ((1.0 - w) * nc * nd + w * counts.get(c, d) as f64 * n) / denom;
        }
        let v = w2 * a * nc / denom / m;
        for s in 0..aux_count {
            p[(c, k2 + s)] = v;
        }
    }
    for d in 0..k2 {
        let v = w1 * a * cols[d] as f64 / denom / m;
        for s in 0..aux_count {
            p[(k1 + s, d)] = v;
        }
    }
    p.view_mut((k1, k2), (aux_count, aux_count))
        .fill(w * a / (n + a) / (m * m));
    Ok(p)
}

/// Single-dimension CRP weights over `K` existing components followed by
/// `aux_count` auxiliary slots sharing the new-component mass.
pub fn crp_weights(marginals: &[usize], alpha: Concentration, aux_count: usize) -> Vec<f64> {
    let n: usize = marginals.iter().sum();
    let m = aux_count as f64;
    if n == 0 {
        return marginals
            .iter()
            .map(|_| 0.0)
            .chain((0..aux_count).map(|_| 1.0 / m))
            .collect();
    }
    let denom = n as f64 + alpha.value();
    marginals
        .iter()
        .map(|&c| c as f64 / denom)
        .chain((0..aux_count).map(|_| alpha.value() / denom / m))
        .collect()
}

/// Samples an index proportional to `exp(logw)`. Entries of `-inf` are never
/// chosen.
pub(crate) fn sample_log_weights<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> usize {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logw.iter().map(|l| (l - max).exp()).sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, l) in logw.iter().enumerate() {
        if *l == f64::NEG_INFINITY {
            continue;
        }
        last = i;
        u -= (l - max).exp();
        if u <= 0.0 {
            return i;
        }
    }
    last
}

/// How memberships are set before the first sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Init {
    /// Every point in cell (0, 0).
    SingleCell,
    /// Independent uniform labels in `k1` rows and `k2` columns.
    RandomCells { k1: usize, k2: usize },
    /// Uniform labels in `k` components with `z1 == z2`.
    RandomDiagonal { k: usize },
    /// `k` distinct data points drawn as seeds; every point joins the
    /// component of its nearest seed, with `z1 == z2`.
    NearestSeed { k: usize },
    /// `z1` from `k1` nearest seeds as above; `z2` uniform in `k2` columns.
    SeedRows { k1: usize, k2: usize },
}

impl Init {
    /// The same layout restricted to `z1 == z2`, for coupled samplers.
    pub fn diagonal(self) -> Self {
        match self {
            Init::RandomCells { k1, .. } => Init::RandomDiagonal { k: k1 },
            Init::SeedRows { k1, .. } => Init::NearestSeed { k: k1 },
            other => other,
        }
    }
}

pub(crate) fn initial_assignments<R: Rng + ?Sized>(data: &[DVector<f64>], init: Init, rng: &mut R) -> Vec<Assignment2D> {
    let n = data.len();
    let raw: Vec<Assignment2D> = match init {
        Init::SingleCell => vec![Assignment2D::new(0, 0); n],
        Init::RandomCells { k1, k2 } => (0..n)
            .map(|_| Assignment2D::new(rng.gen_range(0..k1.max(1)), rng.gen_range(0..k2.max(1))))
            .collect(),
        Init::RandomDiagonal { k } => (0..n)
            .map(|_| {
                let z = rng.gen_range(0..k.max(1));
                Assignment2D::new(z, z)
            })
            .collect(),
        Init::NearestSeed { k } => nearest_seed(data, k, rng).into_iter().map(|z| Assignment2D::new(z, z)).collect(),
        Init::SeedRows { k1, k2 } => nearest_seed(data, k1, rng)
            .into_iter()
            .map(|z| Assignment2D::new(z, rng.gen_range(0..k2.max(1))))
            .collect(),
    };
    compact_labels(raw)
}

fn nearest_seed<R: Rng + ?Sized>(data: &[DVector<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = data.len();
    let seeds = rand::seq::index::sample(rng, n, k.clamp(1, n.max(1)));
    data.iter()
        .map(|x| {
            seeds
                .iter()
                .enumerate()
                .map(|(c, s)| (c, (x - &data[s]).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(c, _)| c)
        })
        .collect()
}

/// Relabels both dimensions densely in order of first appearance.
pub(crate) fn compact_labels(mut a: Vec<Assignment2D>) -> Vec<Assignment2D> {
    let mut map1 = std::collections::HashMap::new();
    let mut map2 = std::collections::HashMap::new();
    for x in a.iter_mut() {
        let n1 = map1.len();
        x.z1 = *map1.entry(x.z1).or_insert(n1);
        let n2 = map2.len();
        x.z2 = *map2.entry(x.z2).or_insert(n2);
    }
    a
}

/// Joint labels `(z1, z2)` flattened into one integer per point.
pub fn joint_labels(assignments: &[Assignment2D], k2: usize) -> Vec<usize> {
    assignments.iter().map(|a| a.z1 * k2.max(1) + a.z2).collect()
}

/// A posterior draw of a factored Gaussian mixture: cell weights `n_cd / N`
/// over means and covariances.
pub trait PosteriorMixture {
    fn means(&self) -> &[DVector<f64>];
    fn covs(&self) -> &[PdMatrix];
    fn counts(&self) -> &JointCounts;

    /// log of `sum_cd (n_cd / N) N(x; mu_c, Sigma_d)`.
    fn mixture_log_density(&self, x: &DVector<f64>) -> f64 {
        let counts = self.counts();
        let n = counts.total() as f64;
        let mut terms = Vec::new();
        for (c, row) in counts.rows().iter().enumerate() {
            for (d, &ncd) in row.iter().enumerate() {
                if ncd > 0 {
                    terms.push((ncd as f64 / n).ln() + self.covs()[d].log_density(x, &self.means()[c]));
                }
            }
        }
        log_sum_exp(&terms)
    }
}

/// Average of the per-sample mixture densities at `x`.
pub fn predictive_density<S: PosteriorMixture>(samples: &[S], x: &DVector<f64>) -> Result<f64> {
    if samples.is_empty() {
        return Err(M3Error::Empty("posterior samples"));
    }
    let logs: Vec<f64> = samples.iter().map(|s| s.mixture_log_density(x)).collect();
    Ok((log_sum_exp(&logs) - (samples.len() as f64).ln()).exp())
}

/// Serializable parameters and memberships of one posterior sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSnapshot {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<PdMatrix>,
    pub counts: JointCounts,
    pub assignments: Vec<Assignment2D>,
}

impl PosteriorMixture for MixtureSnapshot {
    fn means(&self) -> &[DVector<f64>] {
        &self.means
    }
    fn covs(&self) -> &[PdMatrix] {
        &self.covs
    }
    fn counts(&self) -> &JointCounts {
        &self.counts
    }
}

/// Sampler state: data, memberships, counts, and component parameters.
#[derive(Debug, Clone)]
pub struct InfiniteM3State {
    data: Arc<Vec<DVector<f64>>>,
    pub assignments: Vec<Assignment2D>,
    pub counts: JointCounts,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<PdMatrix>,
    pub prior: NiwPrior,
    pub alpha: Concentration,
    pub weights: ShareWeights,
    pub aux_count: usize,
}

impl PosteriorMixture for InfiniteM3State {
    fn means(&self) -> &[DVector<f64>] {
        &self.means
    }
    fn covs(&self) -> &[PdMatrix] {
        &self.covs
    }
    fn counts(&self) -> &JointCounts {
        &self.counts
    }
}

pub(crate) fn check_data(data: &[DVector<f64>]) -> Result<usize> {
    let dim = data.first().ok_or(M3Error::Empty("data"))?.len();
    if dim == 0 {
        return Err(M3Error::InvalidParameter("points must have at least one coordinate".into()));
    }
    if let Some(x) = data.iter().find(|x| x.len() != dim) {
        return Err(M3Error::Dimension {
            expected: dim,
            got: x.len(),
        });
    }
    Ok(dim)
}

impl InfiniteM3State {
    /// Builds a state from given memberships, then draws initial component
    /// parameters: covariances start at the prior expectation, means are
    /// drawn given those, then covariances given the means.
    pub fn new<R: Rng + ?Sized>(
        data: Arc<Vec<DVector<f64>>>,
        assignments: Vec<Assignment2D>,
        prior: NiwPrior,
        alpha: Concentration,
        weights: ShareWeights,
        aux_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = check_data(&data)?;
        if prior.dim() != dim {
            return Err(M3Error::Dimension {
                expected: dim,
                got: prior.dim(),
            });
        }
        if assignments.len() != data.len() {
            return Err(M3Error::Dimension {
                expected: data.len(),
                got: assignments.len(),
            });
        }
        if aux_count == 0 {
            return Err(M3Error::InvalidParameter("aux_count must be at least 1".into()));
        }
        let counts = JointCounts::from_assignments(&assignments, None)?;
        let start_cov = PdMatrix::new(prior.expected_cov())?;
        let mut state = Self {
            data,
            assignments,
            means: vec![prior.mu0().clone(); counts.k1()],
            covs: vec![start_cov; counts.k2()],
            counts,
            prior,
            alpha,
            weights,
            aux_count,
        };
        state.resample_parameters(rng);
        Ok(state)
    }

    pub fn data(&self) -> &[DVector<f64>] {
        &self.data
    }

    pub fn k1(&self) -> usize {
        self.counts.k1()
    }

    pub fn k2(&self) -> usize {
        self.counts.k2()
    }

    pub fn joint_labels(&self) -> Vec<usize> {
        joint_labels(&self.assignments, self.k2())
    }

    pub fn snapshot(&self) -> MixtureSnapshot {
        MixtureSnapshot {
            means: self.means.clone(),
            covs: self.covs.clone(),
            counts: self.counts.clone(),
            assignments: self.assignments.clone(),
        }
    }

    /// `sum_i log N(x_i; mu_{z1_i}, Sigma_{z2_i})`.
    pub fn complete_log_likelihood(&self) -> f64 {
        self.data
            .iter()
            .zip(&self.assignments)
            .map(|(x, a)| self.covs[a.z2].log_density(x, &self.means[a.z1]))
            .sum()
    }

    /// One Gibbs sweep: every membership pair in index order, then every
    /// component parameter.
    pub fn gibbs_sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let m = self.aux_count;
        let mut logw = Vec::new();
        for i in 0..self.data.len() {
            let a = self.assignments[i];
            let relabel = self
                .counts
                .decrement(a.z1, a.z2)
                .expect("counts track assignments");
            let freed_mean = relabel.removed_row.map(|c| self.means.remove(c));
            let freed_cov = relabel.removed_col.map(|d| self.covs.remove(d));
            relabel.apply(&mut self.assignments);

            // a component the point just vacated becomes the first auxiliary
            // slot of its dimension
            let mut freed_mean = freed_mean;
            let mut freed_cov = freed_cov;
            let aux_means: Vec<DVector<f64>> = (0..m)
                .map(|_| freed_mean.take().unwrap_or_else(|| self.prior.sample_mean_prior(rng)))
                .collect();
            let aux_covs: Vec<PdMatrix> = (0..m)
                .map(|_| freed_cov.take().unwrap_or_else(|| self.prior.sample_cov_prior(rng)))
                .collect();

            let prior_w = joint_conditional_weights(&self.counts, self.alpha, self.weights, m)
                .expect("aux_count validated at construction");
            let (k1, k2) = (self.means.len(), self.covs.len());
            let (rows, cols) = (k1 + m, k2 + m);
            let x = &self.data[i];
            logw.clear();
            logw.resize(rows * cols, f64::NEG_INFINITY);
            for c in 0..rows {
                let mean = if c < k1 { &self.means[c] } else { &aux_means[c - k1] };
                for d in 0..cols {
                    let w = prior_w[(c, d)];
                    if w > 0.0 {
                        let cov = if d < k2 { &self.covs[d] } else { &aux_covs[d - k2] };
                        logw[c * cols + d] = w.ln() + cov.log_density(x, mean);
                    }
                }
            }
            let pick = sample_log_weights(&logw, rng);
            let (mut c, mut d) = (pick / cols, pick % cols);
            if c >= k1 {
                self.means.push(aux_means[c - k1].clone());
                c = k1;
            }
            if d >= k2 {
                self.covs.push(aux_covs[d - k2].clone());
                d = k2;
            }
            self.counts.increment(c, d).expect("new index is one past the end");
            self.assignments[i] = Assignment2D::new(c, d);
        }
        self.resample_parameters(rng);
    }

    /// Gibbs step for the parameters: each mean given the points assigned to
    /// it (and their covariances), then each covariance given its points and
    /// their freshly drawn means.
    pub fn resample_parameters<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (k1, k2) = (self.counts.k1(), self.counts.k2());
        let dim = self.prior.dim();
        let mut sums = vec![vec![DVector::<f64>::zeros(dim); k2]; k1];
        for (x, a) in self.data.iter().zip(&self.assignments) {
            sums[a.z1][a.z2] += x;
        }
        for c in 0..k1 {
            let groups: Vec<MeanGroup<'_>> = (0..k2)
                .filter(|&d| self.counts.get(c, d) > 0)
                .map(|d| MeanGroup {
                    sum: std::mem::replace(&mut sums[c][d], DVector::zeros(0)),
                    count: self.counts.get(c, d),
                    cov: &self.covs[d],
                })
                .collect();
            self.means[c] = sample_mean_posterior_grouped(&self.prior, &groups, rng);
        }
        let mut scatter = vec![DMatrix::<f64>::zeros(dim, dim); k2];
        for (x, a) in self.data.iter().zip(&self.assignments) {
            let r = x - &self.means[a.z1];
            scatter[a.z2] += &r * r.transpose();
        }
        let cols = self.counts.col_marginals().to_vec();
        for d in 0..k2 {
            self.covs[d] = sample_cov_posterior_scatter(&self.prior, &scatter[d], cols[d], rng);
        }
    }
}

/// Chain settings. `prior: None` derives the default prior from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub alpha: Concentration,
    pub weights: ShareWeights,
    pub prior: Option<NiwPrior>,
    pub aux_count: usize,
    pub init: Init,
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub stream: u64,
}

impl ChainConfig {
    pub fn new(weights: ShareWeights) -> Self {
        Self {
            alpha: Concentration::new(1.0).expect("positive"),
            weights,
            prior: None,
            aux_count: DEFAULT_AUX_COUNT,
            init: Init::SingleCell,
            sweeps: 200,
            burn_in: 100,
            thin: 1,
            seed: 0,
            stream: 0,
        }
    }

    /// One-dimensional DPMM: fully coupled weights and single-cell (diagonal)
    /// initialization.
    pub fn dpmm() -> Self {
        Self::new(ShareWeights::coupled())
    }

    fn validate(&self) -> Result<()> {
        if self.sweeps <= self.burn_in {
            return Err(M3Error::InvalidParameter(format!(
                "sweeps ({}) must exceed burn-in ({})",
                self.sweeps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(M3Error::InvalidParameter("thin must be at least 1".into()));
        }
        if self.aux_count == 0 {
            return Err(M3Error::InvalidParameter("aux_count must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn keeps(&self, sweep: usize) -> bool {
        sweep > self.burn_in && (sweep - self.burn_in) % self.thin == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sweep: usize,
    pub k1: usize,
    pub k2: usize,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct ChainOutput<S> {
    /// Thinned post-burn-in states.
    pub samples: Vec<S>,
    /// One row per sweep, burn-in included.
    pub trace: Vec<TraceRow>,
}

/// Saved result of a chain: its settings, prior, thinned samples and trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfinitePosterior {
    pub config: ChainConfig,
    pub prior: NiwPrior,
    pub samples: Vec<MixtureSnapshot>,
    pub trace: Vec<TraceRow>,
}

impl InfinitePosterior {
    pub fn from_chain(config: &ChainConfig, output: &ChainOutput<InfiniteM3State>) -> Result<Self> {
        let last = output.samples.last().ok_or(M3Error::Empty("posterior samples"))?;
        Ok(Self {
            config: config.clone(),
            prior: last.prior.clone(),
            samples: output.samples.iter().map(InfiniteM3State::snapshot).collect(),
            trace: output.trace.clone(),
        })
    }
}

/// Runs one chain. Deterministic in `(config.seed, config.stream)`.
pub fn run_chain(data: &[DVector<f64>], config: &ChainConfig) -> Result<ChainOutput<InfiniteM3State>> {
    run_chain_shared(Arc::new(data.to_vec()), config)
}

pub fn run_chain_shared(
    data: Arc<Vec<DVector<f64>>>,
    config: &ChainConfig,
) -> Result<ChainOutput<InfiniteM3State>> {
    check_data(&data)?;
    config.validate()?;
    let mut rng: M3Rng = stream_rng(config.seed, config.stream);
    let prior = match &config.prior {
        Some(p) => p.clone(),
        None => NiwPrior::from_data(&data)?,
    };
    let assignments = initial_assignments(&data, config.init, &mut rng);
    let mut state = InfiniteM3State::new(
        data,
        assignments,
        prior,
        config.alpha,
        config.weights,
        config.aux_count,
        &mut rng,
    )?;
    let mut samples = Vec::new();
    let mut trace = Vec::with_capacity(config.sweeps);
    for sweep in 1..=config.sweeps {
        state.gibbs_sweep(&mut rng);
        trace.push(TraceRow {
            sweep,
            k1: state.k1(),
            k2: state.k2(),
            log_likelihood: state.complete_log_likelihood(),
        });
        if config.keeps(sweep) {
            samples.push(state.clone());
        }
    }
    Ok(ChainOutput { samples, trace })
}

/// Independent chains in parallel; chain `i` uses stream `config.stream + i`.
/// Output order follows the chain index.
pub fn run_chains(
    data: &[DVector<f64>],
    config: &ChainConfig,
    chains: usize,
) -> Result<Vec<ChainOutput<InfiniteM3State>>> {
    let shared = Arc::new(data.to_vec());
    par::map_indexed(chains, |i| {
        let cfg = ChainConfig {
            stream: config.stream + i as u64,
            ..config.clone()
        };
        run_chain_shared(shared.clone(), &cfg)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(cells: &[(usize, usize, usize)]) -> JointCounts {
        let mut t = JointCounts::new();
        for &(c, d, n) in cells {
            for _ in 0..n {
                t.increment(c, d).unwrap();
            }
        }
        t
    }

    fn alpha(a: f64) -> Concentration {
        Concentration::new(a).unwrap()
    }

    #[test]
    fn single_cell_worked_example() {
        let t = table(&[(0, 0, 2)]);
        let w = ShareWeights::new(0.5, 0.25, 0.25).unwrap();
        let p = joint_conditional_weights(&t, alpha(1.0), w, 1).unwrap();
        assert!((p[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[(1, 0)] - 1.0 / 12.0).abs() < 1e-15);
        assert!((p[(0, 1)] - 1.0 / 12.0).abs() < 1e-15);
        assert!((p[(1, 1)] - 1.0 / 6.0).abs() < 1e-15);
        assert!((p.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn aux_slots_split_new_mass() {
        let t = table(&[(0, 0, 2)]);
        let w = ShareWeights::new(0.5, 0.25, 0.25).unwrap();
        let p = joint_conditional_weights(&t, alpha(1.0), w, 3).unwrap();
        assert_eq!(p.shape(), (4, 4));
        let new_c: f64 = (1..4).map(|c| p[(c, 0)]).sum();
        let both: f64 = p.view((1, 1), (3, 3)).sum();
        assert!((new_c - 1.0 / 12.0).abs() < 1e-15);
        assert!((both - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn empty_table_puts_all_mass_on_both_new() {
        let p = joint_conditional_weights(&JointCounts::new(), alpha(1.0), ShareWeights::new(0.0, 0.5, 0.5).unwrap(), 2).unwrap();
        assert_eq!(p.shape(), (2, 2));
        assert!((p.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_coupled_zeroes_unused_pairs() {
        let t = table(&[(0, 0, 3), (1, 1, 2)]);
        let p = joint_conditional_weights(&t, alpha(0.7), ShareWeights::coupled(), 3).unwrap();
        assert_eq!(p[(0, 1)], 0.0);
        assert_eq!(p[(1, 0)], 0.0);
        for c in 0..2 {
            for s in 0..3 {
                assert_eq!(p[(2 + s, c)], 0.0);
                assert_eq!(p[(c, 2 + s)], 0.0);
            }
        }
    }

    fn random_table(cells: &[(usize, usize, usize)]) -> JointCounts {
        // cells with possibly sparse labels; compact by replaying increments
        let mut a = Vec::new();
        for &(c, d, n) in cells {
            for _ in 0..n {
                a.push(Assignment2D::new(c, d));
            }
        }
        JointCounts::from_assignments(&compact_labels(a), None).unwrap()
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(
            cells in proptest::collection::vec((0usize..5, 0usize..5, 1usize..6), 0..12),
            w in (0.0f64..1.0, 0.0f64..1.0),
            a in 0.01f64..10.0,
            aux in 1usize..5,
        ) {
            let t = random_table(&cells);
            let omega = w.0;
            let omega1 = (1.0 - omega) * w.1;
            let omega2 = 1.0 - omega - omega1;
            let sw = ShareWeights::new(omega, omega1, omega2).unwrap();
            let p = joint_conditional_weights(&t, alpha(a), sw, aux).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn decoupled_block_is_rank_one(
            cells in proptest::collection::vec((0usize..4, 0usize..4, 1usize..6), 1..10),
        ) {
            let t = random_table(&cells);
            let p = joint_conditional_weights(&t, alpha(1.0), ShareWeights::new(0.0, 0.5, 0.5).unwrap(), 2).unwrap();
            for c in 0..t.k1() { for c2 in 0..t.k1() { for d in 0..t.k2() { for d2 in 0..t.k2() {
                let minor = p[(c, d)] * p[(c2, d2)] - p[(c, d2)] * p[(c2, d)];
                prop_assert!(minor.abs() < 1e-12);
            }}}}
        }

        #[test]
        fn coupled_marginal_is_crp(
            sizes in proptest::collection::vec(1usize..8, 1..6),
            a in 0.05f64..5.0,
            aux in 1usize..4,
        ) {
            let cells: Vec<_> = sizes.iter().enumerate().map(|(k, &n)| (k, k, n)).collect();
            let t = table(&cells);
            let p = joint_conditional_weights(&t, alpha(a), ShareWeights::coupled(), aux).unwrap();
            let crp = crp_weights(t.row_marginals(), alpha(a), aux);
            let k = sizes.len();
            for c in 0..k {
                prop_assert!((p.row(c).sum() - crp[c]).abs() < 1e-12);
            }
            let new_mass: f64 = (k..k + aux).map(|c| p.row(c).sum()).sum();
            let crp_new: f64 = crp[k..].iter().sum();
            prop_assert!((new_mass - crp_new).abs() < 1e-12);
        }
    }

    fn two_blobs() -> Vec<DVector<f64>> {
        (0..20).map(|i| DVector::from_element(1, if i < 10 { i as f64 * 0.01 } else { 100.0 + i as f64 * 0.01 })).collect()
    }

    #[test]
    fn nearest_seed_cells_are_intervals() {
        // on sorted 1-D data a nearest-seed partition changes label at most
        // k - 1 times
        let data = two_blobs();
        for seed in 0..20 {
            let a = initial_assignments(&data, Init::NearestSeed { k: 2 }, &mut stream_rng(seed, 0));
            assert!(a.iter().all(|x| x.z1 == x.z2));
            assert_eq!(a.windows(2).filter(|w| w[0].z1 != w[1].z1).count(), 1);
        }
    }

    #[test]
    fn seed_rows_draws_columns_independently() {
        let data = two_blobs();
        let a = initial_assignments(&data, Init::SeedRows { k1: 20, k2: 3 }, &mut stream_rng(4, 0));
        // every point is its own seed
        let mut rows: Vec<usize> = a.iter().map(|x| x.z1).collect();
        rows.sort_unstable();
        rows.dedup();
        assert_eq!(rows.len(), 20);
        assert!(a.iter().all(|x| x.z2 < 3));
        assert!(a.iter().any(|x| x.z2 > 0));
    }

    #[test]
    fn diagonal_init_counterparts() {
        assert_eq!(Init::SeedRows { k1: 7, k2: 2 }.diagonal(), Init::NearestSeed { k: 7 });
        assert_eq!(Init::RandomCells { k1: 4, k2: 9 }.diagonal(), Init::RandomDiagonal { k: 4 });
        assert_eq!(Init::SingleCell.diagonal(), Init::SingleCell);
    }

    #[test]
    fn log_weight_sampler_skips_impossible() {
        let mut rng = stream_rng(0, 0);
        for _ in 0..1000 {
            let i = sample_log_weights(&[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY], &mut rng);
            assert_eq!(i, 1);
        }
    }

    fn one_d(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|&x| DVector::from_element(1, x)).collect()
    }

    #[test]
    fn single_point_sweep() {
        let data = Arc::new(one_d(&[0.4]));
        let mut rng = stream_rng(5, 0);
        let prior = NiwPrior::from_data(&data).unwrap();
        let mut s = InfiniteM3State::new(
            data,
            vec![Assignment2D::new(0, 0)],
            prior,
            alpha(1.0),
            ShareWeights::new(0.3, 0.3, 0.4).unwrap(),
            3,
            &mut rng,
        )
        .unwrap();
        s.gibbs_sweep(&mut rng);
        assert_eq!((s.means.len(), s.covs.len()), (1, 1));
        assert_eq!(s.counts.rows(), &[vec![1]]);
    }

    #[test]
    fn predictive_density_single_cell_is_component_density() {
        let data = Arc::new(one_d(&[0.0, 1.0]));
        let mut rng = stream_rng(1, 0);
        let prior = NiwPrior::from_data(&data).unwrap();
        let s = InfiniteM3State::new(
            data,
            vec![Assignment2D::new(0, 0); 2],
            prior,
            alpha(1.0),
            ShareWeights::coupled(),
            1,
            &mut rng,
        )
        .unwrap();
        let x = DVector::from_element(1, 0.3);
        let direct = s.covs[0].log_density(&x, &s.means[0]).exp();
        let p = predictive_density(std::slice::from_ref(&s), &x).unwrap();
        assert!((p - direct).abs() < 1e-14 * direct.max(1.0));
        assert!(predictive_density::<InfiniteM3State>(&[], &x).is_err());
    }

    #[test]
    fn run_chain_rejects_bad_config() {
        let data = one_d(&[0.0, 1.0]);
        let mut cfg = ChainConfig::dpmm();
        cfg.sweeps = 5;
        cfg.burn_in = 5;
        assert!(run_chain(&data, &cfg).is_err());
        assert!(run_chain(&[], &ChainConfig::dpmm()).is_err());
    }
}

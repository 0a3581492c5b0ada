//! Hybrid M3 on Gaussian data: means follow a Dirichlet-process mixture,
//! covariances a finite mixture of `K2` components.
//!
//! A sweep (a) resamples each mean membership from the CRP times the
//! likelihood under the point's covariance, (b) moves each point to the
//! covariance under which it is most likely, (c) resamples the means and
//! (d) re-estimates every covariance by maximum likelihood, falling back to
//! the MAP form `(Lambda0 + S) / (nu0 + n + dim + 1)` for components with
//! fewer than `dim + 1` points.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::gaussian::{data_covariance, data_mean, sample_mean_posterior_grouped, MeanGroup, NiwPrior, PdMatrix};
use crate::infinite::{
    check_data, crp_weights, initial_assignments, joint_labels, sample_log_weights, Init, MixtureSnapshot,
    PosteriorMixture, DEFAULT_AUX_COUNT,
};
use crate::par;
use crate::rng::{stream_rng, M3Rng};
use crate::types::{Assignment2D, Concentration, JointCounts};

#[derive(Debug, Clone)]
pub struct HybridState {
    data: Arc<Vec<DVector<f64>>>,
    pub assignments: Vec<Assignment2D>,
    pub counts: JointCounts,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<PdMatrix>,
    pub prior: NiwPrior,
    pub alpha: Concentration,
    pub aux_count: usize,
}

impl PosteriorMixture for HybridState {
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

/// Complete-data log-likelihood around each step of one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub before_b: f64,
    pub after_b: f64,
    pub before_d: f64,
    pub after_d: f64,
}

fn argmax_cov(covs: &[PdMatrix], x: &DVector<f64>, mean: &DVector<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (d, c) in covs.iter().enumerate() {
        let v = c.log_density(x, mean);
        if v > best_v {
            best = d;
            best_v = v;
        }
    }
    best
}

impl HybridState {
    /// Means start at the empirical mean of their points, covariances at the
    /// data covariance scaled by `0.5 * 2^d`, and every point takes its most
    /// likely covariance.
    pub fn new(
        data: Arc<Vec<DVector<f64>>>,
        z1: Vec<usize>,
        k2: usize,
        prior: NiwPrior,
        alpha: Concentration,
        aux_count: usize,
    ) -> Result<Self> {
        let dim = check_data(&data)?;
        if k2 < 1 {
            return Err(M3Error::InvalidParameter("K2 must be at least 1".into()));
        }
        if aux_count == 0 {
            return Err(M3Error::InvalidParameter("aux_count must be at least 1".into()));
        }
        if prior.dim() != dim {
            return Err(M3Error::Dimension {
                expected: dim,
                got: prior.dim(),
            });
        }
        if z1.len() != data.len() {
            return Err(M3Error::Dimension {
                expected: data.len(),
                got: z1.len(),
            });
        }
        let global = data_covariance(&data, &data_mean(&data))
            .filter(|c| PdMatrix::new(c.clone()).is_ok())
            .unwrap_or_else(|| prior.lambda0().matrix().clone());
        let covs = (0..k2)
            .map(|d| PdMatrix::new(&global * (0.5 * 2f64.powi(d as i32))))
            .collect::<Result<Vec<_>>>()?;
        let k1 = z1.iter().max().map_or(0, |m| m + 1);
        let mut sums = vec![DVector::zeros(dim); k1];
        let mut sizes = vec![0usize; k1];
        for (x, &c) in data.iter().zip(&z1) {
            sums[c] += x;
            sizes[c] += 1;
        }
        if sizes.iter().any(|&n| n == 0) {
            return Err(M3Error::InvalidParameter("mean labels must be dense".into()));
        }
        let means: Vec<DVector<f64>> = sums.into_iter().zip(&sizes).map(|(s, &n)| s / n as f64).collect();
        let assignments: Vec<Assignment2D> = data
            .iter()
            .zip(&z1)
            .map(|(x, &c)| Assignment2D::new(c, argmax_cov(&covs, x, &means[c])))
            .collect();
        let counts = JointCounts::from_assignments(&assignments, Some(k2))?;
        Ok(Self {
            data,
            assignments,
            counts,
            means,
            covs,
            prior,
            alpha,
            aux_count,
        })
    }

    pub fn data(&self) -> &[DVector<f64>] {
        &self.data
    }

    pub fn k1(&self) -> usize {
        self.means.len()
    }

    pub fn k2(&self) -> usize {
        self.covs.len()
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

    /// `sum_i log N(x_i; mu_{z1_i}, Sigma_{z2_i})`, summed in point order.
    pub fn complete_log_likelihood(&self) -> f64 {
        self.data
            .iter()
            .zip(&self.assignments)
            .map(|(x, a)| self.covs[a.z2].log_density(x, &self.means[a.z1]))
            .sum()
    }

    fn log_likelihood_with(&self, d: usize, cov: &PdMatrix) -> f64 {
        self.data
            .iter()
            .zip(&self.assignments)
            .map(|(x, a)| {
                let c = if a.z2 == d { cov } else { &self.covs[a.z2] };
                c.log_density(x, &self.means[a.z1])
            })
            .sum()
    }

    /// Step (a): mean memberships from the CRP over row marginals times the
    /// likelihood under each point's covariance, with auxiliary means.
    pub fn sample_mean_memberships<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let m = self.aux_count;
        let mut logw = Vec::new();
        for i in 0..self.data.len() {
            let a = self.assignments[i];
            let relabel = self.counts.decrement(a.z1, a.z2).expect("counts track assignments");
            let mut freed = relabel.removed_row.map(|c| self.means.remove(c));
            relabel.apply(&mut self.assignments);
            let aux: Vec<DVector<f64>> = (0..m)
                .map(|_| freed.take().unwrap_or_else(|| self.prior.sample_mean_prior(rng)))
                .collect();
            let w = crp_weights(self.counts.row_marginals(), self.alpha, m);
            let k1 = self.means.len();
            let (x, cov) = (&self.data[i], &self.covs[a.z2]);
            logw.clear();
            logw.extend(w.iter().enumerate().map(|(c, &wc)| {
                if wc > 0.0 {
                    let mean = if c < k1 { &self.means[c] } else { &aux[c - k1] };
                    wc.ln() + cov.log_density(x, mean)
                } else {
                    f64::NEG_INFINITY
                }
            }));
            let mut c = sample_log_weights(&logw, rng);
            if c >= k1 {
                self.means.push(aux[c - k1].clone());
                c = k1;
            }
            self.counts.increment(c, a.z2).expect("new row is one past the end");
            self.assignments[i] = Assignment2D::new(c, a.z2);
        }
    }

    /// Step (b): each point moves to its most likely covariance; ties go to
    /// the lowest index.
    pub fn assign_covariances(&mut self) {
        for i in 0..self.data.len() {
            let a = self.assignments[i];
            let d = argmax_cov(&self.covs, &self.data[i], &self.means[a.z1]);
            if d != a.z2 {
                self.counts.increment(a.z1, d).expect("existing cell");
                self.counts.decrement(a.z1, a.z2).expect("counts track assignments");
                self.assignments[i].z2 = d;
            }
        }
    }

    /// Step (c): means from their conditional posterior.
    pub fn resample_means<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (k1, k2) = (self.k1(), self.k2());
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
    }

    /// Step (d): covariance re-estimation. Empty components, singular
    /// estimates and estimates that would lower the complete-data
    /// log-likelihood keep their previous value.
    pub fn estimate_covariances(&mut self) {
        let dim = self.prior.dim();
        let k2 = self.k2();
        let mut scatter = vec![DMatrix::<f64>::zeros(dim, dim); k2];
        for (x, a) in self.data.iter().zip(&self.assignments) {
            let r = x - &self.means[a.z1];
            scatter[a.z2] += &r * r.transpose();
        }
        let sizes = self.counts.col_marginals().to_vec();
        let mut current = self.complete_log_likelihood();
        for d in 0..k2 {
            let n = sizes[d];
            if n == 0 {
                continue;
            }
            let estimate = if n > dim {
                &scatter[d] / n as f64
            } else {
                (self.prior.lambda0().matrix() + &scatter[d]) / (self.prior.nu0() + (n + dim + 1) as f64)
            };
            let Ok(candidate) = PdMatrix::new(estimate) else {
                continue;
            };
            let ll = self.log_likelihood_with(d, &candidate);
            if ll >= current {
                self.covs[d] = candidate;
                current = ll;
            }
        }
    }

    /// One sweep of steps (a) to (d).
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> SweepReport {
        self.sample_mean_memberships(rng);
        let before_b = self.complete_log_likelihood();
        self.assign_covariances();
        let after_b = self.complete_log_likelihood();
        self.resample_means(rng);
        let before_d = self.complete_log_likelihood();
        self.estimate_covariances();
        let after_d = self.complete_log_likelihood();
        SweepReport {
            before_b,
            after_b,
            before_d,
            after_d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub k2: usize,
    pub alpha: Concentration,
    pub prior: Option<NiwPrior>,
    pub aux_count: usize,
    /// Initial mean memberships; only the row part of the layout is used.
    pub init: Init,
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub stream: u64,
}

impl HybridConfig {
    pub fn new(k2: usize) -> Self {
        Self {
            k2,
            alpha: Concentration::new(1.0).expect("positive"),
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

    fn validate(&self) -> Result<()> {
        if self.k2 < 1 {
            return Err(M3Error::InvalidParameter("K2 must be at least 1".into()));
        }
        if self.sweeps <= self.burn_in {
            return Err(M3Error::InvalidParameter(format!(
                "sweeps ({}) must exceed burn-in ({})",
                self.sweeps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(M3Error::InvalidParameter("thin must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridTraceRow {
    pub sweep: usize,
    pub k1: usize,
    #[serde(flatten)]
    pub report: SweepReport,
}

#[derive(Debug, Clone)]
pub struct HybridOutput {
    pub samples: Vec<HybridState>,
    pub trace: Vec<HybridTraceRow>,
    /// State after the last sweep.
    pub last: HybridState,
}

/// Runs the hybrid sampler. Deterministic in `(config.seed, config.stream)`.
pub fn hybrid_fit(data: &[DVector<f64>], config: &HybridConfig) -> Result<HybridOutput> {
    hybrid_fit_shared(Arc::new(data.to_vec()), config)
}

pub fn hybrid_fit_shared(data: Arc<Vec<DVector<f64>>>, config: &HybridConfig) -> Result<HybridOutput> {
    config.validate()?;
    check_data(&data)?;
    let mut rng: M3Rng = stream_rng(config.seed, config.stream);
    let prior = match &config.prior {
        Some(p) => p.clone(),
        None => NiwPrior::from_data(&data)?,
    };
    let z1 = initial_assignments(&data, config.init, &mut rng)
        .into_iter()
        .map(|a| a.z1)
        .collect();
    let mut state = HybridState::new(data, z1, config.k2, prior, config.alpha, config.aux_count)?;
    let mut samples = Vec::new();
    let mut trace = Vec::with_capacity(config.sweeps);
    for sweep in 1..=config.sweeps {
        let report = state.sweep(&mut rng);
        trace.push(HybridTraceRow {
            sweep,
            k1: state.k1(),
            report,
        });
        if sweep > config.burn_in && (sweep - config.burn_in) % config.thin == 0 {
            samples.push(state.clone());
        }
    }
    Ok(HybridOutput {
        samples,
        trace,
        last: state,
    })
}

/// Independent hybrid chains in parallel; chain `i` uses stream
/// `config.stream + i`.
pub fn hybrid_fit_chains(data: &[DVector<f64>], config: &HybridConfig, chains: usize) -> Result<Vec<HybridOutput>> {
    let shared = Arc::new(data.to_vec());
    par::map_indexed(chains, |i| {
        let cfg = HybridConfig {
            stream: config.stream + i as u64,
            ..config.clone()
        };
        hybrid_fit_shared(shared.clone(), &cfg)
    })
    .into_iter()
    .collect()
}

/// Saved result of a hybrid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPosterior {
    pub config: HybridConfig,
    pub prior: NiwPrior,
    pub samples: Vec<MixtureSnapshot>,
    /// Covariances after the last sweep.
    pub covs: Vec<PdMatrix>,
    pub trace: Vec<HybridTraceRow>,
}

impl HybridPosterior {
    pub fn from_output(config: &HybridConfig, output: &HybridOutput) -> Self {
        Self {
            config: config.clone(),
            prior: output.last.prior.clone(),
            samples: output.samples.iter().map(HybridState::snapshot).collect(),
            covs: output.last.covs.clone(),
            trace: output.trace.clone(),
        }
    }
}

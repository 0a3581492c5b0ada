//! Gaussian likelihoods and Normal-Inverse-Wishart conjugate updates.
//!
//! The mean and covariance of a component live in different mixture
//! dimensions, so their conditionals are sampled separately: the mean given a
//! set of points that each carry their own covariance, and the covariance
//! given a set of points that each carry their own mean.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Symmetric positive-definite matrix with its Cholesky factor, inverse and
/// log-determinant cached.
#[derive(Debug, Clone)]
pub struct PdMatrix {
    matrix: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    inverse: DMatrix<f64>,
    log_det: f64,
}

impl PdMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(M3Error::Dimension {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let chol = Cholesky::new(sym.clone()).ok_or(M3Error::NotPositiveDefinite)?;
        let chol_l = chol.l();
        let log_det = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(M3Error::NotPositiveDefinite);
        }
        let inverse = chol.inverse();
        Ok(Self {
            matrix: sym,
            chol_l,
            inverse,
            log_det,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is PD")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Multivariate normal log-density at `x` with this covariance.
    pub fn log_density(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let diff = x - mean;
        let y = self
            .chol_l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + y.norm_squared())
    }

    /// Draw from N(mean, self).
    pub fn sample<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(self.dim(), rng);
        mean + &self.chol_l * z
    }
}

impl PartialEq for PdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

impl Serialize for PdMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_rows(&self.matrix).serialize(s)
    }
}

impl<'de> Deserialize<'de> for PdMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let m = rows_to_matrix(&rows).map_err(serde::de::Error::custom)?;
        PdMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(M3Error::InvalidParameter("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Exact multivariate normal log-density. Fails if `cov` is not positive
/// definite.
pub fn log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    check_dim(mean.len(), x.len())?;
    check_dim(cov.nrows(), x.len())?;
    Ok(PdMatrix::new(cov.clone())?.log_density(x, mean))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(M3Error::Dimension { expected, got })
    }
}

/// A mean/covariance pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub covariance: PdMatrix,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim(covariance.nrows(), mean.len())?;
        Ok(Self {
            mean,
            covariance: PdMatrix::new(covariance)?,
        })
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.covariance.log_density(x, &self.mean)
    }
}

/// Normal-Inverse-Wishart base distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NiwPriorFields", into = "NiwPriorFields")]
pub struct NiwPrior {
    mu0: DVector<f64>,
    kappa0: f64,
    nu0: f64,
    lambda0: PdMatrix,
    mean_prior: PdMatrix,
}

#[derive(Serialize, Deserialize)]
struct NiwPriorFields {
    mu0: Vec<f64>,
    kappa0: f64,
    nu0: f64,
    lambda0: Vec<Vec<f64>>,
}

impl TryFrom<NiwPriorFields> for NiwPrior {
    type Error = M3Error;

    fn try_from(f: NiwPriorFields) -> Result<Self> {
        NiwPrior::new(DVector::from_vec(f.mu0), f.kappa0, f.nu0, rows_to_matrix(&f.lambda0)?)
    }
}

impl From<NiwPrior> for NiwPriorFields {
    fn from(p: NiwPrior) -> Self {
        NiwPriorFields {
            mu0: p.mu0.iter().copied().collect(),
            kappa0: p.kappa0,
            nu0: p.nu0,
            lambda0: matrix_to_rows(p.lambda0.matrix()),
        }
    }
}

impl NiwPrior {
    pub fn new(mu0: DVector<f64>, kappa0: f64, nu0: f64, lambda0: DMatrix<f64>) -> Result<Self> {
        let dim = mu0.len();
        check_dim(dim, lambda0.nrows())?;
        if !(kappa0 > 0.0) {
            return Err(M3Error::InvalidParameter(format!("kappa0 must be positive, got {kappa0}")));
        }
        if !(nu0 > dim as f64 - 1.0) {
            return Err(M3Error::InvalidParameter(format!(
                "nu0 must exceed dim - 1 = {}, got {nu0}",
                dim as f64 - 1.0
            )));
        }
        let lambda0 = PdMatrix::new(lambda0)?;
        let denom = nu0 - dim as f64 - 1.0;
        // E[Sigma] = Lambda0 / (nu0 - dim - 1); when that expectation does not
        // exist the scale matrix itself stands in
        let expected = if denom > 0.0 {
            lambda0.matrix() / denom
        } else {
            lambda0.matrix().clone()
        };
        let mean_prior = PdMatrix::new(expected / kappa0)?;
        Ok(Self {
            mu0,
            kappa0,
            nu0,
            lambda0,
            mean_prior,
        })
    }

    /// Weakly informative defaults: data mean, kappa0 = 0.01, nu0 = dim + 2,
    /// data covariance as scale (identity when the data covariance is
    /// singular or there is a single point).
    pub fn from_data(data: &[DVector<f64>]) -> Result<Self> {
        let first = data.first().ok_or(M3Error::Empty("data"))?;
        let dim = first.len();
        let mean = data_mean(data);
        let scale = data_covariance(data, &mean)
            .filter(|c| PdMatrix::new(c.clone()).is_ok())
            .unwrap_or_else(|| DMatrix::identity(dim, dim));
        Self::new(mean, 0.01, dim as f64 + 2.0, scale)
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn mu0(&self) -> &DVector<f64> {
        &self.mu0
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn nu0(&self) -> f64 {
        self.nu0
    }

    pub fn lambda0(&self) -> &PdMatrix {
        &self.lambda0
    }

    pub fn expected_cov(&self) -> DMatrix<f64> {
        self.mean_prior.matrix() * self.kappa0
    }

    /// Prior covariance of a mean component, E[Sigma] / kappa0.
    pub fn mean_prior_cov(&self) -> &PdMatrix {
        &self.mean_prior
    }

    pub fn sample_mean_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.mean_prior_cov().sample(&self.mu0, rng)
    }

    pub fn sample_cov_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> PdMatrix {
        sample_inverse_wishart(self.nu0, &self.lambda0, rng)
    }
}

pub(crate) fn data_mean(data: &[DVector<f64>]) -> DVector<f64> {
    let dim = data[0].len();
    let mut m = DVector::zeros(dim);
    for x in data {
        m += x;
    }
    m / data.len() as f64
}

/// Maximum-likelihood (1/N) covariance; `None` for fewer than two points.
pub(crate) fn data_covariance(data: &[DVector<f64>], mean: &DVector<f64>) -> Option<DMatrix<f64>> {
    if data.len() < 2 {
        return None;
    }
    let dim = mean.len();
    let mut s = DMatrix::zeros(dim, dim);
    for x in data {
        let d = x - mean;
        s += &d * d.transpose();
    }
    Some(s / data.len() as f64)
}

/// Draw from Inverse-Wishart(nu, scale) via the Bartlett decomposition.
///
/// With scale = U U^T and A the Bartlett factor of a standard Wishart draw,
/// Sigma = (U A^{-T}) (U A^{-T})^T.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(nu: f64, scale: &PdMatrix, rng: &mut R) -> PdMatrix {
    let dim = scale.dim();
    loop {
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            let chi = ChiSquared::new(nu - i as f64).expect("nu > dim - 1");
            a[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let a_inv = match a.solve_lower_triangular(&DMatrix::identity(dim, dim)) {
            Some(inv) => inv,
            None => continue,
        };
        let m = scale.chol_l() * a_inv.transpose();
        // underflow of a chi-square draw can make the result numerically
        // singular; redraw in that case
        if let Ok(pd) = PdMatrix::new(&m * m.transpose()) {
            return pd;
        }
    }
}

/// Sufficient statistics of the points sharing one covariance component:
/// sum of points and count.
pub struct MeanGroup<'a> {
    pub sum: DVector<f64>,
    pub count: usize,
    pub cov: &'a PdMatrix,
}

/// Conditional Gaussian posterior of a mean shared by points whose
/// covariances differ.
///
/// Precision `P = S0^{-1} + sum_i Sigma_i^{-1}`, mean
/// `P^{-1} (S0^{-1} mu0 + sum_i Sigma_i^{-1} x_i)`, where `S0` is the prior
/// mean covariance `E[Sigma] / kappa0`. Returns (mean, covariance).
pub fn mean_posterior(prior: &NiwPrior, groups: &[MeanGroup<'_>]) -> (DVector<f64>, PdMatrix) {
    let prior_cov = prior.mean_prior_cov();
    let mut precision = prior_cov.inverse().clone();
    let mut rhs = prior_cov.inverse() * &prior.mu0;
    for g in groups {
        if g.count == 0 {
            continue;
        }
        precision += g.cov.inverse() * g.count as f64;
        rhs += g.cov.inverse() * &g.sum;
    }
    let precision = PdMatrix::new(precision).expect("sum of PD matrices is PD");
    let mean = precision.inverse() * rhs;
    let cov = PdMatrix::new(precision.inverse().clone()).expect("inverse of PD is PD");
    (mean, cov)
}

pub fn sample_mean_posterior_grouped<R: Rng + ?Sized>(
    prior: &NiwPrior,
    groups: &[MeanGroup<'_>],
    rng: &mut R,
) -> DVector<f64> {
    let (mean, cov) = mean_posterior(prior, groups);
    cov.sample(&mean, rng)
}

/// Draws a mean component given its points, each paired with the covariance
/// of the component it is assigned to in the other dimension. With no points
/// this is a draw from the prior marginal of the mean.
pub fn sample_mean_posterior<R: Rng + ?Sized>(
    prior: &NiwPrior,
    points: &[(&DVector<f64>, &PdMatrix)],
    rng: &mut R,
) -> DVector<f64> {
    let groups: Vec<MeanGroup<'_>> = points
        .iter()
        .map(|&(x, cov)| MeanGroup {
            sum: x.clone(),
            count: 1,
            cov,
        })
        .collect();
    sample_mean_posterior_grouped(prior, &groups, rng)
}

/// Draws a covariance component from Inverse-Wishart(nu0 + n, Lambda0 + S)
/// given the scatter `S` of its points around their assigned means.
pub fn sample_cov_posterior_scatter<R: Rng + ?Sized>(
    prior: &NiwPrior,
    scatter: &DMatrix<f64>,
    count: usize,
    rng: &mut R,
) -> PdMatrix {
    if count == 0 {
        return prior.sample_cov_prior(rng);
    }
    let scale = PdMatrix::new(prior.lambda0.matrix() + scatter).expect("PD plus PSD is PD");
    sample_inverse_wishart(prior.nu0 + count as f64, &scale, rng)
}

pub fn sample_cov_posterior<R: Rng + ?Sized>(
    prior: &NiwPrior,
    points: &[(&DVector<f64>, &DVector<f64>)],
    rng: &mut R,
) -> PdMatrix {
    let dim = prior.dim();
    let mut scatter = DMatrix::zeros(dim, dim);
    for (x, mean) in points {
        let d = *x - *mean;
        scatter += &d * d.transpose();
    }
    sample_cov_posterior_scatter(prior, &scatter, points.len(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn standard_normal_at_mode() {
        let l = log_density(&v(&[0.0]), &v(&[0.0]), &DMatrix::identity(1, 1)).unwrap();
        assert!((l + 0.918_938_533_204_672_7).abs() < 1e-12);
        let l = log_density(&v(&[1.0]), &v(&[0.0]), &DMatrix::identity(1, 1)).unwrap();
        assert!((l + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn diagonal_2d_matches_direct_formula() {
        let cov = DMatrix::from_diagonal(&v(&[1.0, 4.0]));
        let l = log_density(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), &cov).unwrap();
        // direct: -log(2 pi) - 0.5 log(det) - 0.5 (1/1 + 1/4)
        let direct = -(2.0 * std::f64::consts::PI).ln() - 0.5 * 4f64.ln() - 0.5 * 1.25;
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn non_pd_covariance_is_an_error() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            log_density(&v(&[0.0, 0.0]), &v(&[0.0, 0.0]), &cov),
            Err(M3Error::NotPositiveDefinite)
        ));
        assert!(log_density(&v(&[0.0]), &v(&[0.0, 0.0]), &cov).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let sigma = 1.7_f64;
        let cov = PdMatrix::new(DMatrix::from_element(1, 1, sigma * sigma)).unwrap();
        let mean = v(&[0.3]);
        let n = 10_000;
        let (lo, hi) = (0.3 - 5.0 * sigma, 0.3 + 5.0 * sigma);
        let h = (hi - lo) / (n - 1) as f64;
        let f: Vec<f64> = (0..n)
            .map(|i| cov.log_density(&v(&[lo + i as f64 * h]), &mean).exp())
            .collect();
        let integral = h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n - 1]));
        // +-5 sigma holds 1 - 5.7e-7 of the mass
        assert!((integral - 1.0).abs() < 1e-4, "{integral}");
    }

    fn unit_prior_1d() -> NiwPrior {
        // kappa0 = 1, nu0 = 3, Lambda0 = 1  =>  E[Sigma] = 1, mean prior N(0, 1)
        NiwPrior::new(v(&[0.0]), 1.0, 3.0, DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn mean_posterior_prior_fallback() {
        let prior = unit_prior_1d();
        let mut rng = stream_rng(1, 0);
        let n = 10_000;
        let m: f64 = (0..n).map(|_| sample_mean_posterior(&prior, &[], &mut rng)[0]).sum::<f64>() / n as f64;
        assert!(m.abs() < 3.0 * (1.0 / n as f64).sqrt(), "{m}");
    }

    #[test]
    fn mean_posterior_single_point() {
        let prior = unit_prior_1d();
        let x = v(&[2.0]);
        let cov = PdMatrix::identity(1);
        let (mean, pcov) = mean_posterior(
            &prior,
            &[MeanGroup {
                sum: x.clone(),
                count: 1,
                cov: &cov,
            }],
        );
        assert!((mean[0] - 1.0).abs() < 1e-12);
        assert!((pcov.matrix()[(0, 0)] - 0.5).abs() < 1e-12);
        let mut rng = stream_rng(2, 0);
        let n = 10_000;
        let draws: f64 = (0..n)
            .map(|_| sample_mean_posterior(&prior, &[(&x, &cov)], &mut rng)[0])
            .sum::<f64>()
            / n as f64;
        assert!((draws - 1.0).abs() < 3.0 * (0.5 / n as f64).sqrt(), "{draws}");
    }

    #[test]
    fn mean_posterior_symmetric_points() {
        let prior = NiwPrior::new(v(&[0.0, 0.0]), 0.5, 5.0, DMatrix::identity(2, 2)).unwrap();
        let cov = PdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let (a, b) = (v(&[3.0, -1.0]), v(&[-3.0, 1.0]));
        let (mean, _) = mean_posterior(
            &prior,
            &[
                MeanGroup { sum: a, count: 1, cov: &cov },
                MeanGroup { sum: b, count: 1, cov: &cov },
            ],
        );
        assert!(mean.norm() < 1e-12);
    }

    #[test]
    fn cov_posterior_matches_inverse_gamma_mean() {
        // nu0 = 3, Lambda0 = 1, scatter 4 from n = 2 => IG(2.5, 2.5), mean 2.5 / 1.5
        let prior = NiwPrior::new(v(&[0.0]), 1.0, 3.0, DMatrix::identity(1, 1)).unwrap();
        let m = v(&[0.0]);
        let (a, b) = (v(&[2f64.sqrt()]), v(&[-(2f64.sqrt())]));
        let pts_scatter4 = [(&a, &m), (&b, &m)];
        let mut rng = stream_rng(3, 0);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let d = sample_cov_posterior(&prior, &pts_scatter4, &mut rng);
            assert!(d.matrix()[(0, 0)] > 0.0);
            sum += d.matrix()[(0, 0)];
        }
        let mean = sum / n as f64;
        let target = 2.5 / 1.5;
        assert!((mean - target).abs() / target < 0.05, "{mean}");
    }

    #[test]
    fn cov_prior_draws_are_pd() {
        let prior = NiwPrior::new(
            v(&[0.0, 0.0, 0.0]),
            0.01,
            5.0,
            DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.5]),
        )
        .unwrap();
        let mut rng = stream_rng(4, 0);
        for _ in 0..10_000 {
            let s = sample_cov_posterior(&prior, &[], &mut rng);
            assert!(Cholesky::new(s.matrix().clone()).is_some());
        }
    }
}

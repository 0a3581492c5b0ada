//! Synthetic data: factorial Gaussian mixtures and two-factor corpora.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::data::{Corpus, PointCloud};
use crate::error::{M3Error, Result};
use crate::finite::{dirichlet_rows, Document, FiniteM3Model};
use crate::gaussian::PdMatrix;
use crate::rng::stream_rng;

/// `per_cell` points from `N(mu_m, Sigma_c)` for every pair `(m, c)`,
/// labelled `m * C + c`, in label order.
pub fn gen_factorial_gaussians(
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
    per_cell: usize,
    seed: u64,
) -> Result<PointCloud> {
    if means.is_empty() || covs.is_empty() {
        return Err(M3Error::InvalidParameter("at least one mean and one covariance are required".into()));
    }
    let pairs: Vec<(DVector<f64>, DMatrix<f64>)> = means
        .iter()
        .flat_map(|m| covs.iter().map(move |c| (m.clone(), c.clone())))
        .collect();
    gen_paired_gaussians(&pairs, per_cell, seed)
}

/// `per_cell` points from each listed Gaussian, labelled by its position.
pub fn gen_paired_gaussians(pairs: &[(DVector<f64>, DMatrix<f64>)], per_cell: usize, seed: u64) -> Result<PointCloud> {
    let Some((first, _)) = pairs.first() else {
        return Err(M3Error::InvalidParameter("at least one Gaussian is required".into()));
    };
    let dim = first.len();
    let mut rng = stream_rng(seed, 0);
    let mut points = Vec::with_capacity(pairs.len() * per_cell);
    let mut labels = Vec::with_capacity(pairs.len() * per_cell);
    for (label, (mean, cov)) in pairs.iter().enumerate() {
        if mean.len() != dim || cov.shape() != (dim, dim) {
            return Err(M3Error::Dimension {
                expected: dim,
                got: if mean.len() != dim { mean.len() } else { cov.nrows() },
            });
        }
        let pd = PdMatrix::new(cov.clone())?;
        for _ in 0..per_cell {
            points.push(pd.sample(mean, &mut rng));
            labels.push(label);
        }
    }
    PointCloud::new(points, Some(labels))
}

fn rotated_diag(a: f64, b: f64, angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    &r * DMatrix::from_diagonal(&DVector::from_vec(vec![a, b])) * r.transpose()
}

/// `(-4, -4), (-4, 4), (4, -4), (4, 4), (0, 0)`.
pub fn default_factorial_means() -> Vec<DVector<f64>> {
    [[-4.0, -4.0], [-4.0, 4.0], [4.0, -4.0], [4.0, 4.0], [0.0, 0.0]]
        .iter()
        .map(|p| DVector::from_row_slice(p))
        .collect()
}

/// A tight blob `0.02 I` and a long thin ellipse `diag(4, 0.02)` rotated by
/// 30 degrees.
pub fn default_factorial_covs() -> Vec<DMatrix<f64>> {
    vec![DMatrix::identity(2, 2) * 0.02, rotated_diag(4.0, 0.02, PI / 6.0)]
}

/// Ten Gaussians with distinct means and distinct covariances: means on a
/// circle of radius 9, covariances with varying scales and orientations.
pub fn default_unshared_pairs() -> Vec<(DVector<f64>, DMatrix<f64>)> {
    (0..10)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / 10.0;
            let mean = DVector::from_vec(vec![9.0 * t.cos(), 9.0 * t.sin()]);
            let a = 0.2 + 0.12 * k as f64;
            let b = 0.15 + 0.04 * (9 - k) as f64;
            (mean, rotated_diag(a, b, PI * k as f64 / 10.0))
        })
        .collect()
}

/// Settings of a two-factor corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoFactorSpec {
    pub k1: usize,
    pub k2: usize,
    pub vocab_size: usize,
    pub docs: usize,
    pub doc_len: usize,
    pub omega: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub seed: u64,
}

/// Topic rows from a symmetric Dirichlet(0.1), then documents sampled from
/// the resulting model. Returns the corpus and its generating model.
pub fn gen_two_factor_corpus(spec: &TwoFactorSpec) -> Result<(Corpus, FiniteM3Model)> {
    if spec.vocab_size < spec.k1 + spec.k2 {
        return Err(M3Error::InvalidParameter(format!(
            "vocabulary size {} must be at least K1 + K2 = {}",
            spec.vocab_size,
            spec.k1 + spec.k2
        )));
    }
    if spec.k1 == 0 || spec.k2 == 0 {
        return Err(M3Error::InvalidParameter("K1 and K2 must be at least 1".into()));
    }
    let theta1 = dirichlet_rows(spec.k1, spec.vocab_size, 0.1, &mut stream_rng(spec.seed, 0));
    let theta2 = dirichlet_rows(spec.k2, spec.vocab_size, 0.1, &mut stream_rng(spec.seed, 1));
    let model = FiniteM3Model::new(theta1, theta2, spec.alpha1, spec.alpha2, spec.omega)?;
    let corpus = sample_corpus(&model, spec.docs, spec.doc_len, spec.seed)?;
    Ok((corpus, model))
}

fn row_sampler(m: &DMatrix<f64>, i: usize) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(m.row(i).iter().copied()).map_err(|e| M3Error::InvalidParameter(e.to_string()))
}

/// Documents of `doc_len` tokens: per document, topic proportions from the
/// model's Dirichlet priors; per token, a topic from each dimension and a
/// word from `theta1[z1]` with probability `(1 + w)/2`, else from
/// `theta2[z2]`. `theta2` is never consulted when `w = 1`.
pub fn sample_corpus(model: &FiniteM3Model, docs: usize, doc_len: usize, seed: u64) -> Result<Corpus> {
    let words1 = (0..model.k1()).map(|i| row_sampler(model.theta1(), i)).collect::<Result<Vec<_>>>()?;
    let words2 = (0..model.k2()).map(|j| row_sampler(model.theta2(), j)).collect::<Result<Vec<_>>>()?;
    let first = (1.0 + model.omega()) / 2.0;
    let mut rng = stream_rng(seed, 2);
    let mut out = Vec::with_capacity(docs);
    for _ in 0..docs {
        let pi1 = dirichlet_rows(1, model.k1(), model.alpha1, &mut rng);
        let pi2 = dirichlet_rows(1, model.k2(), model.alpha2, &mut rng);
        let topics1 = row_sampler(&pi1, 0)?;
        let topics2 = row_sampler(&pi2, 0)?;
        let tokens = (0..doc_len)
            .map(|_| {
                let z1 = topics1.sample(&mut rng);
                let z2 = topics2.sample(&mut rng);
                if rng.gen::<f64>() < first {
                    words1[z1].sample(&mut rng)
                } else {
                    words2[z2].sample(&mut rng)
                }
            })
            .collect();
        out.push(Document::new(tokens));
    }
    Corpus::with_anonymous_vocab(out, model.vocab_size())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite::bound_perplexity;

    #[test]
    fn single_gaussian_sample_mean() {
        let mu = DVector::from_vec(vec![1.0, -2.0]);
        let c = gen_factorial_gaussians(&[mu.clone()], &[DMatrix::identity(2, 2)], 2000, 4).unwrap();
        let mean = c.points.iter().fold(DVector::zeros(2), |a, p| a + p) / 2000.0;
        assert!((mean - mu).amax() < 4.0 / 2000f64.sqrt());
    }

    #[test]
    fn default_factorial_layout() {
        let c = gen_factorial_gaussians(&default_factorial_means(), &default_factorial_covs(), 100, 7).unwrap();
        assert_eq!(c.len(), 1000);
        let mut labels = c.labels.clone().unwrap();
        labels.dedup();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
        let again = gen_factorial_gaussians(&default_factorial_means(), &default_factorial_covs(), 100, 7).unwrap();
        assert_eq!(c, again);
        let other = gen_factorial_gaussians(&default_factorial_means(), &default_factorial_covs(), 100, 8).unwrap();
        assert_ne!(c.points, other.points);
    }

    #[test]
    fn non_pd_covariance_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(gen_factorial_gaussians(&default_factorial_means(), &[bad], 5, 0).is_err());
    }

    #[test]
    fn unshared_pairs_are_distinct() {
        let p = default_unshared_pairs();
        for i in 0..p.len() {
            PdMatrix::new(p[i].1.clone()).unwrap();
            for j in 0..i {
                assert!((&p[i].0 - &p[j].0).norm() > 5.0);
                assert!((&p[i].1 - &p[j].1).amax() > 1e-3);
            }
        }
    }

    fn spec() -> TwoFactorSpec {
        TwoFactorSpec {
            k1: 3,
            k2: 2,
            vocab_size: 30,
            docs: 20,
            doc_len: 40,
            omega: 0.5,
            alpha1: 0.5,
            alpha2: 0.5,
            seed: 9,
        }
    }

    #[test]
    fn fully_coupled_corpus_ignores_second_topics() {
        let (_, model) = gen_two_factor_corpus(&TwoFactorSpec { omega: 1.0, ..spec() }).unwrap();
        let mut shuffled = model.theta2().clone();
        shuffled.swap_columns(0, 7);
        shuffled.swap_columns(3, 12);
        let m2 = FiniteM3Model::new(model.theta1().clone(), shuffled, 0.5, 0.5, 1.0).unwrap();
        assert_eq!(sample_corpus(&model, 10, 20, 5).unwrap(), sample_corpus(&m2, 10, 20, 5).unwrap());
    }

    #[test]
    fn vocabulary_too_small() {
        assert!(gen_two_factor_corpus(&TwoFactorSpec { vocab_size: 4, ..spec() }).is_err());
    }

    #[test]
    fn generating_model_beats_uniform() {
        let (corpus, model) = gen_two_factor_corpus(&spec()).unwrap();
        assert_eq!(corpus.num_tokens(), 800);
        let p = bound_perplexity(&model, &corpus.docs).unwrap();
        assert!(p < 30.0, "{p}");
    }
}

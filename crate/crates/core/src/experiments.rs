//! Seeded experiment pipelines shared by the acceptance suite and the CLI:
//! factorial Gaussians, Iris, and two-factor topic corpora.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{read_points_csv, PointCloud};
use crate::error::{M3Error, Result};
use crate::eval::nmi;
use crate::finite::{bound_perplexity, fit, FitConfig};
use crate::hybrid::{hybrid_fit, HybridConfig, HybridState};
use crate::infinite::{run_chain, ChainConfig, Init, InfiniteM3State};
use crate::par;
use crate::synth::{
    default_factorial_covs, default_factorial_means, default_unshared_pairs, gen_factorial_gaussians,
    gen_paired_gaussians, gen_two_factor_corpus, TwoFactorSpec,
};
use crate::types::{Concentration, ShareWeights};

/// Average NMI between the joint labels of every retained sample and the
/// ground truth.
pub fn chain_nmi(samples: &[InfiniteM3State], truth: &[usize]) -> Result<f64> {
    mean_nmi(samples.iter().map(InfiniteM3State::joint_labels), samples.len(), truth)
}

pub fn hybrid_nmi(samples: &[HybridState], truth: &[usize]) -> Result<f64> {
    mean_nmi(samples.iter().map(HybridState::joint_labels), samples.len(), truth)
}

fn mean_nmi(labels: impl Iterator<Item = Vec<usize>>, n: usize, truth: &[usize]) -> Result<f64> {
    if n == 0 {
        return Err(M3Error::Empty("posterior samples"));
    }
    let mut total = 0.0;
    for l in labels {
        total += nmi(&l, truth)?;
    }
    Ok(total / n as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// One named check of an experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Sampler settings shared by the M3 and DPMM arms of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSettings {
    pub m3_weights: ShareWeights,
    pub alpha: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub init: Init,
    pub seeds: Vec<u64>,
}

impl ChainSettings {
    fn config(&self, weights: ShareWeights, seed: u64) -> Result<ChainConfig> {
        let mut c = ChainConfig::new(weights);
        c.alpha = Concentration::new(self.alpha)?;
        c.sweeps = self.sweeps;
        c.burn_in = self.burn_in;
        c.thin = self.thin;
        c.init = self.init;
        c.seed = seed;
        Ok(c)
    }
}

/// Per-seed NMI of M3 and of the DPMM on one data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub m3: Vec<f64>,
    pub dpmm: Vec<f64>,
    pub m3_mean: f64,
    pub dpmm_mean: f64,
    pub seconds: f64,
}

/// Runs both samplers for every seed, all chains in parallel.
pub fn compare_m3_dpmm(data: &PointCloud, settings: &ChainSettings) -> Result<Comparison> {
    let truth = data.labels.as_ref().ok_or(M3Error::Empty("ground-truth labels"))?;
    let start = Instant::now();
    let n = settings.seeds.len();
    let jobs: Vec<(bool, u64)> = settings
        .seeds
        .iter()
        .flat_map(|&s| [(true, s), (false, s)])
        .collect();
    let scores: Vec<f64> = par::map(&jobs, |&(m3, seed)| {
        let weights = if m3 { settings.m3_weights } else { ShareWeights::coupled() };
        let mut cfg = settings.config(weights, seed)?;
        if !m3 {
            cfg.init = cfg.init.diagonal();
        }
        let out = run_chain(&data.points, &cfg)?;
        chain_nmi(&out.samples, truth)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let m3: Vec<f64> = (0..n).map(|k| scores[2 * k]).collect();
    let dpmm: Vec<f64> = (0..n).map(|k| scores[2 * k + 1]).collect();
    Ok(Comparison {
        seeds: settings.seeds.clone(),
        m3_mean: mean(&m3),
        dpmm_mean: mean(&dpmm),
        m3,
        dpmm,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSettings {
    /// Points per (mean, covariance) cell of the sharing data.
    pub per_cell: usize,
    /// Points per Gaussian of the unshared data. The DPMM needs more points
    /// per component to split the ten clusters reliably.
    pub unshared_per_cell: usize,
    pub data_seed: u64,
    pub chains: ChainSettings,
}

impl Default for GaussianSettings {
    fn default() -> Self {
        Self {
            per_cell: 30,
            unshared_per_cell: 100,
            data_seed: 7,
            chains: ChainSettings {
                m3_weights: ShareWeights::new(0.1, 0.45, 0.45).expect("valid"),
                alpha: 1.0,
                sweeps: 300,
                burn_in: 200,
                thin: 5,
                init: Init::SeedRows { k1: 30, k2: 2 },
                seeds: DEFAULT_SEEDS.to_vec(),
            },
        }
    }
}

/// Factorial data with shared parameters (5 means x 2 covariances).
pub fn sharing_data(s: &GaussianSettings) -> Result<PointCloud> {
    gen_factorial_gaussians(&default_factorial_means(), &default_factorial_covs(), s.per_cell, s.data_seed)
}

/// Ten Gaussians without shared parameters.
pub fn unshared_data(s: &GaussianSettings) -> Result<PointCloud> {
    gen_paired_gaussians(&default_unshared_pairs(), s.unshared_per_cell, s.data_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianReport {
    pub settings: GaussianSettings,
    pub sharing: Comparison,
    pub unshared: Comparison,
    pub checks: Vec<Check>,
}

pub fn gaussian_checks(sharing: &Comparison, unshared: &Comparison) -> Vec<Check> {
    vec![
        Check::new(
            "sharing: M3 mean NMI >= DPMM mean NMI",
            sharing.m3_mean >= sharing.dpmm_mean,
            format!("{:.4} vs {:.4}", sharing.m3_mean, sharing.dpmm_mean),
        ),
        Check::new(
            "sharing: M3 mean NMI >= 0.65",
            sharing.m3_mean >= 0.65,
            format!("{:.4}", sharing.m3_mean),
        ),
        Check::new(
            "unshared: |M3 - DPMM| mean NMI <= 0.05",
            (unshared.m3_mean - unshared.dpmm_mean).abs() <= 0.05,
            format!("{:.4} vs {:.4}", unshared.m3_mean, unshared.dpmm_mean),
        ),
        Check::new(
            "runtime < 300 s per case",
            sharing.seconds < 300.0 && unshared.seconds < 300.0,
            format!("{:.1} s, {:.1} s", sharing.seconds, unshared.seconds),
        ),
    ]
}

pub fn gaussian_experiment(s: &GaussianSettings) -> Result<GaussianReport> {
    let sharing = compare_m3_dpmm(&sharing_data(s)?, &s.chains)?;
    let unshared = compare_m3_dpmm(&unshared_data(s)?, &s.chains)?;
    Ok(GaussianReport {
        checks: gaussian_checks(&sharing, &unshared),
        settings: s.clone(),
        sharing,
        unshared,
    })
}

/// Location of the bundled Iris file relative to the workspace root.
pub const IRIS_RELATIVE_PATH: &str = "crates/core/data/iris.csv";

/// Reads Iris (four features, species in the fifth column).
pub fn load_iris(path: &Path) -> Result<PointCloud> {
    if !path.exists() {
        return Err(M3Error::InvalidParameter(format!(
            "Iris data not found at {}; expected a CSV with four numeric columns and the species in the fifth \
             (bundled at {IRIS_RELATIVE_PATH}), pass --iris <path>",
            path.display()
        )));
    }
    let cloud = read_points_csv(path, Some(4))?;
    if cloud.len() != 150 || cloud.dim() != 4 {
        return Err(M3Error::InvalidParameter(format!(
            "expected 150 rows with 4 features, found {} rows with {}",
            cloud.len(),
            cloud.dim()
        )));
    }
    Ok(cloud)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrisReport {
    pub settings: ChainSettings,
    pub comparison: Comparison,
    pub checks: Vec<Check>,
}

pub fn default_iris_settings() -> ChainSettings {
    ChainSettings {
        m3_weights: ShareWeights::new(0.1, 0.45, 0.45).expect("valid"),
        alpha: 1.0,
        sweeps: 300,
        burn_in: 200,
        thin: 5,
        init: Init::SeedRows { k1: 10, k2: 2 },
        seeds: DEFAULT_SEEDS.to_vec(),
    }
}

pub fn iris_checks(c: &Comparison) -> Vec<Check> {
    vec![
        Check::new(
            "M3 mean NMI in [0.62, 0.82]",
            (0.62..=0.82).contains(&c.m3_mean),
            format!("{:.4}", c.m3_mean),
        ),
        Check::new(
            "M3 mean NMI >= DPMM mean NMI - 0.02",
            c.m3_mean >= c.dpmm_mean - 0.02,
            format!("{:.4} vs {:.4}", c.m3_mean, c.dpmm_mean),
        ),
        Check::new("runtime < 120 s", c.seconds < 120.0, format!("{:.1} s", c.seconds)),
    ]
}

pub fn iris_experiment(data: &PointCloud, settings: &ChainSettings) -> Result<IrisReport> {
    let comparison = compare_m3_dpmm(data, settings)?;
    Ok(IrisReport {
        checks: iris_checks(&comparison),
        settings: settings.clone(),
        comparison,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSettings {
    pub k1: usize,
    pub k2: usize,
    pub vocab_size: usize,
    pub train_docs: usize,
    pub test_docs: usize,
    pub doc_len: usize,
    pub omega: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub data_seed: u64,
    pub lda_topics: usize,
    pub em_iters: usize,
    pub warmup: usize,
    pub seeds: Vec<u64>,
}

impl Default for TopicSettings {
    fn default() -> Self {
        Self {
            k1: 10,
            k2: 2,
            vocab_size: 500,
            train_docs: 200,
            test_docs: 50,
            doc_len: 50,
            omega: 0.5,
            alpha1: 0.05,
            alpha2: 2.0,
            data_seed: 11,
            lda_topics: 12,
            em_iters: 40,
            warmup: 10,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicRun {
    pub seed: u64,
    pub m3_perplexity: f64,
    pub lda_perplexity: f64,
    /// Largest relative drop of the training bound between EM iterations.
    pub m3_worst_drop: f64,
    pub lda_worst_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub settings: TopicSettings,
    pub truth_perplexity: f64,
    pub runs: Vec<TopicRun>,
    pub m3_wins: usize,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

/// Largest `(prev - next) / |prev|` over consecutive entries; non-positive
/// when the trace never decreases.
pub fn worst_relative_drop(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[0].abs())
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn topic_experiment(s: &TopicSettings) -> Result<TopicReport> {
    let start = Instant::now();
    let (corpus, truth) = gen_two_factor_corpus(&TwoFactorSpec {
        k1: s.k1,
        k2: s.k2,
        vocab_size: s.vocab_size,
        docs: s.train_docs + s.test_docs,
        doc_len: s.doc_len,
        omega: s.omega,
        alpha1: s.alpha1,
        alpha2: s.alpha2,
        seed: s.data_seed,
    })?;
    let (train, test) = corpus.split_at(s.train_docs);
    let truth_perplexity = bound_perplexity(&truth, &test.docs)?;
    let jobs: Vec<(bool, u64)> = s.seeds.iter().flat_map(|&seed| [(true, seed), (false, seed)]).collect();
    let fits: Vec<(f64, f64)> = par::map(&jobs, |&(m3, seed)| {
        let mut cfg = if m3 { FitConfig::default() } else { FitConfig::lda() };
        cfg.em_iters = s.em_iters;
        cfg.warmup = s.warmup;
        cfg.seed = seed;
        let (k1, k2) = if m3 { (s.k1, s.k2) } else { (s.lda_topics, 1) };
        let r = fit(&train.docs, train.vocab_size, k1, k2, &cfg)?;
        Ok((bound_perplexity(&r.model, &test.docs)?, worst_relative_drop(&r.elbo_trace)))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let runs: Vec<TopicRun> = s
        .seeds
        .iter()
        .enumerate()
        .map(|(k, &seed)| TopicRun {
            seed,
            m3_perplexity: fits[2 * k].0,
            m3_worst_drop: fits[2 * k].1,
            lda_perplexity: fits[2 * k + 1].0,
            lda_worst_drop: fits[2 * k + 1].1,
        })
        .collect();
    let m3_wins = runs.iter().filter(|r| r.m3_perplexity < r.lda_perplexity).count();
    let worst = runs
        .iter()
        .flat_map(|r| [r.m3_worst_drop, r.lda_worst_drop])
        .fold(f64::NEG_INFINITY, f64::max);
    let seconds = start.elapsed().as_secs_f64();
    let needed = (4 * s.seeds.len()).div_ceil(5);
    let checks = vec![
        Check::new(
            &format!("M3 held-out perplexity below LDA on >= {needed} of {} seeds", s.seeds.len()),
            m3_wins >= needed,
            format!("{m3_wins} wins"),
        ),
        Check::new(
            "training bound non-decreasing (1e-6 relative)",
            worst <= 1e-6,
            format!("worst relative drop {worst:.3e}"),
        ),
        Check::new("runtime < 600 s", seconds < 600.0, format!("{seconds:.1} s")),
    ];
    Ok(TopicReport {
        settings: s.clone(),
        truth_perplexity,
        runs,
        m3_wins,
        seconds,
        checks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridComparison {
    pub seeds: Vec<u64>,
    pub hybrid: Vec<f64>,
    pub ablation: Vec<f64>,
    pub hybrid_mean: f64,
    pub ablation_mean: f64,
    /// Every sweep kept the complete-data log-likelihood from dropping in
    /// the two maximization steps.
    pub monotone: bool,
}

/// Hybrid M3 with `k2` covariances against the single-covariance ablation
/// on the same data and seeds.
pub fn hybrid_ablation(data: &PointCloud, k2: usize, base: &HybridConfig, seeds: &[u64]) -> Result<HybridComparison> {
    let truth = data.labels.as_ref().ok_or(M3Error::Empty("ground-truth labels"))?;
    let jobs: Vec<(usize, u64)> = seeds.iter().flat_map(|&s| [(k2, s), (1, s)]).collect();
    let out: Vec<(f64, bool)> = par::map(&jobs, |&(k, seed)| {
        let cfg = HybridConfig {
            k2: k,
            seed,
            ..base.clone()
        };
        let r = hybrid_fit(&data.points, &cfg)?;
        let ok = r
            .trace
            .iter()
            .all(|t| t.report.after_b >= t.report.before_b && t.report.after_d >= t.report.before_d);
        Ok((hybrid_nmi(&r.samples, truth)?, ok))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let hybrid: Vec<f64> = out.iter().step_by(2).map(|o| o.0).collect();
    let ablation: Vec<f64> = out.iter().skip(1).step_by(2).map(|o| o.0).collect();
    Ok(HybridComparison {
        seeds: seeds.to_vec(),
        hybrid_mean: mean(&hybrid),
        ablation_mean: mean(&ablation),
        hybrid,
        ablation,
        monotone: out.iter().all(|o| o.1),
    })
}

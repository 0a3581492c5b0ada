//! `m3mix`: generate data, train M3 models and baselines, evaluate them, and
//! reproduce the reference experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use m3mix::data::{
    load_model, read_bag_of_words, read_labels, read_points_csv, save_model, write_bag_of_words, write_labels,
    write_points_csv, Corpus, PointCloud,
};
use m3mix::eval::{co_cluster_matrix, density_grid, nmi, perplexity};
use m3mix::experiments::{
    self, gaussian_experiment, iris_experiment, load_iris, topic_experiment, Check, GaussianSettings, TopicSettings,
};
use m3mix::finite::{document_bounds, fit, FiniteM3Model, FitConfig};
use m3mix::gaussian::NiwPrior;
use m3mix::hybrid::{hybrid_fit_chains, HybridConfig, HybridPosterior};
use m3mix::infinite::{run_chains, ChainConfig, InfinitePosterior, Init, MixtureSnapshot};
use m3mix::synth::{
    default_factorial_covs, default_factorial_means, default_unshared_pairs, gen_factorial_gaussians,
    gen_paired_gaussians, gen_two_factor_corpus, TwoFactorSpec,
};
use m3mix::types::{Concentration, ShareWeights};

#[derive(Parser)]
#[command(name = "m3mix", version, about = "Multidimensional membership mixture models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Factorial Gaussian point cloud (CSV with a label column).
    GenGaussian(GenGaussianArgs),
    /// Two-factor bag-of-words corpus and its generating model.
    GenCorpus(GenCorpusArgs),
    /// Infinite M3 (coupled DP mixtures) by Gibbs sampling.
    FitInfinite(FitInfiniteArgs),
    /// DP mixture: fit-infinite with omega = 1 and diagonal initialization.
    FitDpmm(FitDpmmArgs),
    /// Finite two-dimensional topic model by variational EM.
    FitFinite(FitFiniteArgs),
    /// LDA: fit-finite with omega = 1 and K2 = 1.
    FitLda(FitLdaArgs),
    /// Hybrid M3: DP mixture of means, finite mixture of covariances.
    FitHybrid(FitHybridArgs),
    /// Held-out perplexity of a finite model (or the uniform baseline).
    EvalPerplexity(EvalPerplexityArgs),
    /// Normalized mutual information between two label files.
    EvalNmi(EvalNmiArgs),
    /// Posterior predictive density of an infinite or hybrid model on a grid.
    EvalDensity(EvalDensityArgs),
    /// Pairwise co-clustering frequencies over several label files.
    EvalConfusion(EvalConfusionArgs),
    /// Runs a reference experiment and checks it against its target bands.
    Repro(ReproArgs),
}

#[derive(Args, Serialize, Clone)]
struct GenGaussianArgs {
    /// Number of distinct means (at most 5).
    #[arg(long, default_value_t = 5)]
    means: usize,
    /// Number of distinct covariances (at most 2).
    #[arg(long, default_value_t = 2)]
    covs: usize,
    #[arg(long, default_value_t = 100)]
    per_cell: usize,
    /// Ten Gaussians with distinct means and covariances instead.
    #[arg(long)]
    unshared: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct GenCorpusArgs {
    #[arg(long)]
    k1: usize,
    #[arg(long)]
    k2: usize,
    /// Vocabulary size.
    #[arg(long)]
    v: usize,
    #[arg(long)]
    docs: usize,
    /// Tokens per document.
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 0.5)]
    omega: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha1: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct PointsArgs {
    /// Numeric CSV; a non-numeric first row is treated as a header.
    #[arg(long)]
    data: PathBuf,
    /// Zero-based column holding ground-truth labels (excluded from features).
    #[arg(long)]
    label_column: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum InitKind {
    /// Every point in one component.
    Single,
    /// Uniform random labels over --init-k components per dimension.
    Random,
    /// --init-k data points as seeds, each point joins its nearest seed;
    /// the second dimension is uniform over --init-k2 columns.
    Seed,
}

#[derive(Args, Serialize, Clone)]
struct ChainArgs {
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 200)]
    sweeps: usize,
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Auxiliary components per dimension.
    #[arg(long, default_value_t = 3)]
    aux: usize,
    #[arg(long, value_enum, default_value_t = InitKind::Seed)]
    init: InitKind,
    #[arg(long, default_value_t = 10)]
    init_k: usize,
    #[arg(long, default_value_t = 2)]
    init_k2: usize,
    /// Multiplier on the data covariance used as the inverse-Wishart scale.
    #[arg(long, default_value_t = 1.0)]
    prior_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent chains run in parallel (streams seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    chains: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct FitInfiniteArgs {
    #[command(flatten)]
    points: PointsArgs,
    #[command(flatten)]
    chain: ChainArgs,
    /// Weight of the coupled term; omega + omega1 + omega2 = 1.
    #[arg(long, default_value_t = 0.1)]
    omega: f64,
    /// Defaults to an even split of 1 - omega with --omega2.
    #[arg(long)]
    omega1: Option<f64>,
    #[arg(long)]
    omega2: Option<f64>,
    /// Random initialization with z1 = z2.
    #[arg(long)]
    diag_init: bool,
}

#[derive(Args, Serialize, Clone)]
struct FitDpmmArgs {
    #[command(flatten)]
    points: PointsArgs,
    #[command(flatten)]
    chain: ChainArgs,
}

#[derive(Args, Serialize, Clone)]
struct FiniteTrainArgs {
    /// UCI docword file.
    #[arg(long)]
    corpus: PathBuf,
    /// UCI vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    em_iters: usize,
    #[arg(long, default_value_t = 100)]
    e_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    e_tol: f64,
    /// Relative change of the training bound that ends EM early; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    em_tol: f64,
    /// Leading EM iterations with alpha and omega held at their initial values.
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Random starts screened over the warm-up; the best one continues.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct FitFiniteArgs {
    #[command(flatten)]
    train: FiniteTrainArgs,
    #[arg(long)]
    k1: usize,
    #[arg(long)]
    k2: usize,
    /// Holds the sharing weight fixed; estimated when omitted.
    #[arg(long)]
    omega: Option<f64>,
}

#[derive(Args, Serialize, Clone)]
struct FitLdaArgs {
    #[command(flatten)]
    train: FiniteTrainArgs,
    /// Number of topics.
    #[arg(long)]
    k: usize,
}

#[derive(Args, Serialize, Clone)]
struct FitHybridArgs {
    #[command(flatten)]
    points: PointsArgs,
    #[command(flatten)]
    chain: ChainArgs,
    /// Number of covariance components.
    #[arg(long)]
    k2: usize,
}

#[derive(Args, Serialize, Clone)]
struct EvalPerplexityArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Finite model JSON.
    #[arg(long, required_unless_present = "uniform")]
    model: Option<PathBuf>,
    /// Score with the uniform distribution over the vocabulary.
    #[arg(long, conflicts_with = "model")]
    uniform: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
struct EvalNmiArgs {
    /// Label file, one integer per line.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
struct EvalDensityArgs {
    /// Infinite or hybrid model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Per-axis bounds, e.g. "-8:8,-8:8".
    #[arg(long, allow_hyphen_values = true)]
    bounds: String,
    #[arg(long, default_value_t = 100)]
    resolution: usize,
    /// Relative height below which grid maxima are ignored.
    #[arg(long, default_value_t = 0.01)]
    peak_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct EvalConfusionArgs {
    /// Label files, one per run.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Ground truth used to order rows and columns.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Experiment {
    Gaussian,
    Iris,
    Topics,
}

#[derive(Args, Serialize, Clone)]
struct ReproArgs {
    #[arg(long, value_enum)]
    experiment: Experiment,
    /// Iris CSV (four features, species in the fifth column).
    #[arg(long, default_value = experiments::IRIS_RELATIVE_PATH)]
    iris: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a Command,
    outputs: Vec<String>,
}

fn write_manifest(out: &Path, command: &Command, outputs: &[String]) -> Result<()> {
    let m = Manifest {
        tool: "m3mix",
        version: env!("CARGO_PKG_VERSION"),
        command,
        outputs: outputs.to_vec(),
    };
    write(&out.join("manifest.json"), &serde_json::to_string_pretty(&m)?)
}

fn load_points(p: &PointsArgs) -> Result<PointCloud> {
    let cloud = read_points_csv(&p.data, p.label_column)?;
    if cloud.is_empty() {
        bail!("{} holds no points", p.data.display());
    }
    Ok(cloud)
}

fn load_corpus(corpus: &Path, vocab: Option<&Path>) -> Result<Corpus> {
    let read = read_bag_of_words(corpus, vocab)?;
    if read.dropped_empty > 0 {
        log::warn!("{} empty documents dropped", read.dropped_empty);
    }
    Ok(read.corpus)
}

impl ChainArgs {
    fn prior(&self, cloud: &PointCloud) -> Result<NiwPrior> {
        let base = NiwPrior::from_data(&cloud.points)?;
        if !(self.prior_scale > 0.0) {
            bail!("--prior-scale must be positive");
        }
        Ok(NiwPrior::new(
            base.mu0().clone(),
            base.kappa0(),
            base.nu0(),
            base.lambda0().matrix() * self.prior_scale,
        )?)
    }

    fn init(&self, diagonal: bool) -> Init {
        match (self.init, diagonal) {
            (InitKind::Single, _) => Init::SingleCell,
            (InitKind::Random, true) => Init::RandomDiagonal { k: self.init_k },
            (InitKind::Random, false) => Init::RandomCells {
                k1: self.init_k,
                k2: self.init_k,
            },
            (InitKind::Seed, true) => Init::NearestSeed { k: self.init_k },
            (InitKind::Seed, false) => Init::SeedRows {
                k1: self.init_k,
                k2: self.init_k2,
            },
        }
    }

    fn chain_dirs(&self) -> Result<Vec<PathBuf>> {
        if self.chains == 0 {
            bail!("--chains must be at least 1");
        }
        create_dir(&self.out)?;
        let dirs: Vec<PathBuf> = if self.chains == 1 {
            vec![self.out.clone()]
        } else {
            (0..self.chains).map(|i| self.out.join(format!("chain-{i}"))).collect()
        };
        dirs.iter().try_for_each(|d| create_dir(d))?;
        Ok(dirs)
    }
}

fn relative(out: &Path, file: &Path) -> String {
    file.strip_prefix(out).unwrap_or(file).display().to_string()
}

fn report_nmi(cloud: &PointCloud, chain: usize, labels: &[Vec<usize>]) -> Result<()> {
    if let Some(truth) = &cloud.labels {
        let mut total = 0.0;
        for l in labels {
            total += nmi(l, truth)?;
        }
        println!("chain {chain}: mean NMI over {} samples = {:.4}", labels.len(), total / labels.len() as f64);
    }
    Ok(())
}

fn gen_gaussian(a: &GenGaussianArgs) -> Result<Vec<String>> {
    let cloud = if a.unshared {
        gen_paired_gaussians(&default_unshared_pairs(), a.per_cell, a.seed)?
    } else {
        let means = default_factorial_means();
        let covs = default_factorial_covs();
        if a.means == 0 || a.means > means.len() || a.covs == 0 || a.covs > covs.len() {
            bail!("--means must be in 1..={} and --covs in 1..={}", means.len(), covs.len());
        }
        gen_factorial_gaussians(&means[..a.means], &covs[..a.covs], a.per_cell, a.seed)?
    };
    create_dir(&a.out)?;
    write_points_csv(&cloud, &a.out.join("points.csv"))?;
    write_labels(cloud.labels.as_deref().unwrap_or_default(), &a.out.join("labels.txt"))?;
    println!("{} points in {} dimensions", cloud.len(), cloud.dim());
    Ok(vec!["points.csv".into(), "labels.txt".into()])
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<Vec<String>> {
    let (corpus, model) = gen_two_factor_corpus(&TwoFactorSpec {
        k1: a.k1,
        k2: a.k2,
        vocab_size: a.v,
        docs: a.docs,
        doc_len: a.len,
        omega: a.omega,
        alpha1: a.alpha1,
        alpha2: a.alpha2,
        seed: a.seed,
    })?;
    create_dir(&a.out)?;
    write_bag_of_words(&corpus, &a.out.join("docword.txt"), &a.out.join("vocab.txt"))?;
    save_model(&model, &a.out.join("generator.json"))?;
    println!("{} documents, {} tokens", corpus.docs.len(), corpus.num_tokens());
    Ok(vec!["docword.txt".into(), "vocab.txt".into(), "generator.json".into()])
}

fn share_weights(omega: f64, omega1: Option<f64>, omega2: Option<f64>) -> Result<ShareWeights> {
    let (w1, w2) = match (omega1, omega2) {
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => (a, 1.0 - omega - a),
        (None, Some(b)) => (1.0 - omega - b, b),
        (None, None) => ((1.0 - omega) / 2.0, (1.0 - omega) / 2.0),
    };
    Ok(ShareWeights::new(omega, w1, w2)?)
}

fn trace_csv<T>(header: &str, rows: &[T], fmt: impl Fn(&T) -> String) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&fmt(r));
        s.push('\n');
    }
    s
}

fn fit_infinite(a: &FitInfiniteArgs) -> Result<Vec<String>> {
    let weights = share_weights(a.omega, a.omega1, a.omega2)?;
    let cloud = load_points(&a.points)?;
    let c = &a.chain;
    let config = ChainConfig {
        alpha: Concentration::new(c.alpha)?,
        prior: Some(c.prior(&cloud)?),
        aux_count: c.aux,
        init: c.init(a.diag_init),
        sweeps: c.sweeps,
        burn_in: c.burn_in,
        thin: c.thin,
        seed: c.seed,
        stream: 0,
        ..ChainConfig::new(weights)
    };
    let dirs = c.chain_dirs()?;
    let outputs = run_chains(&cloud.points, &config, c.chains)?;
    let mut files = Vec::new();
    for (i, (out, dir)) in outputs.iter().zip(&dirs).enumerate() {
        let cfg = ChainConfig {
            stream: i as u64,
            ..config.clone()
        };
        let posterior = InfinitePosterior::from_chain(&cfg, out)?;
        save_model(&posterior, &dir.join("model.json"))?;
        write(
            &dir.join("trace.csv"),
            &trace_csv("sweep,k1,k2,log_likelihood", &out.trace, |t| {
                format!("{},{},{},{:?}", t.sweep, t.k1, t.k2, t.log_likelihood)
            }),
        )?;
        let last = out.samples.last().expect("validated sweeps > burn-in");
        write_labels(&last.joint_labels(), &dir.join("labels.txt"))?;
        for f in ["model.json", "trace.csv", "labels.txt"] {
            files.push(relative(&c.out, &dir.join(f)));
        }
        let labels: Vec<Vec<usize>> = out.samples.iter().map(|s| s.joint_labels()).collect();
        report_nmi(&cloud, i, &labels)?;
        println!("chain {i}: K1 = {}, K2 = {} after {} sweeps", last.k1(), last.k2(), c.sweeps);
    }
    Ok(files)
}

fn fit_dpmm_as_infinite(a: &FitDpmmArgs) -> FitInfiniteArgs {
    FitInfiniteArgs {
        points: a.points.clone(),
        chain: a.chain.clone(),
        omega: 1.0,
        omega1: Some(0.0),
        omega2: Some(0.0),
        diag_init: true,
    }
}

fn fit_finite(a: &FitFiniteArgs) -> Result<Vec<String>> {
    let t = &a.train;
    let corpus = load_corpus(&t.corpus, t.vocab.as_deref())?;
    let cfg = FitConfig {
        em_iters: t.em_iters,
        e_iters: t.e_iters,
        e_tol: t.e_tol,
        em_tol: t.em_tol,
        fix_omega: a.omega,
        warmup: t.warmup,
        restarts: t.restarts,
        seed: t.seed,
        ..FitConfig::default()
    };
    let result = fit(&corpus.docs, corpus.vocab_size, a.k1, a.k2, &cfg)?;
    create_dir(&t.out)?;
    save_model(&result.model, &t.out.join("model.json"))?;
    let rows: Vec<(usize, f64)> = result.elbo_trace.iter().copied().enumerate().collect();
    write(
        &t.out.join("trace.csv"),
        &trace_csv("iteration,elbo", &rows, |(i, e)| format!("{i},{e:?}")),
    )?;
    let d = &result.diagnostics;
    if d.infeasible_msteps + d.alpha_backtrack_failures + d.clamped_documents > 0 {
        log::warn!("{d:?}");
    }
    println!(
        "training bound {:.6e}, omega {:.4}, alpha1 {:.4}, alpha2 {:.4}",
        result.elbo_trace.last().copied().unwrap_or(f64::NAN),
        result.model.omega(),
        result.model.alpha1,
        result.model.alpha2
    );
    Ok(vec!["model.json".into(), "trace.csv".into()])
}

fn fit_lda_as_finite(a: &FitLdaArgs) -> FitFiniteArgs {
    FitFiniteArgs {
        train: a.train.clone(),
        k1: a.k,
        k2: 1,
        omega: Some(1.0),
    }
}

fn fit_hybrid(a: &FitHybridArgs) -> Result<Vec<String>> {
    let cloud = load_points(&a.points)?;
    let c = &a.chain;
    let config = HybridConfig {
        alpha: Concentration::new(c.alpha)?,
        prior: Some(c.prior(&cloud)?),
        aux_count: c.aux,
        init: c.init(true),
        sweeps: c.sweeps,
        burn_in: c.burn_in,
        thin: c.thin,
        seed: c.seed,
        stream: 0,
        ..HybridConfig::new(a.k2)
    };
    let dirs = c.chain_dirs()?;
    let outputs = hybrid_fit_chains(&cloud.points, &config, c.chains)?;
    let mut files = Vec::new();
    for (i, (out, dir)) in outputs.iter().zip(&dirs).enumerate() {
        let cfg = HybridConfig {
            stream: i as u64,
            ..config.clone()
        };
        save_model(&HybridPosterior::from_output(&cfg, out), &dir.join("model.json"))?;
        write(
            &dir.join("trace.csv"),
            &trace_csv("sweep,k1,before_b,after_b,before_d,after_d", &out.trace, |t| {
                let r = &t.report;
                format!("{},{},{:?},{:?},{:?},{:?}", t.sweep, t.k1, r.before_b, r.after_b, r.before_d, r.after_d)
            }),
        )?;
        write_labels(&out.last.joint_labels(), &dir.join("labels.txt"))?;
        for f in ["model.json", "trace.csv", "labels.txt"] {
            files.push(relative(&c.out, &dir.join(f)));
        }
        let labels: Vec<Vec<usize>> = out.samples.iter().map(|s| s.joint_labels()).collect();
        report_nmi(&cloud, i, &labels)?;
        println!("chain {i}: K1 = {}, K2 = {}", out.last.k1(), out.last.k2());
    }
    Ok(files)
}

fn eval_perplexity(a: &EvalPerplexityArgs) -> Result<Vec<String>> {
    let corpus = load_corpus(&a.corpus, a.vocab.as_deref())?;
    let docs: Vec<_> = corpus.docs.iter().filter(|d| !d.is_empty()).cloned().collect();
    let lengths: Vec<usize> = docs.iter().map(|d| d.len()).collect();
    let (name, logs) = match &a.model {
        Some(path) => {
            let model: FiniteM3Model = load_model(path)?;
            if model.vocab_size() != corpus.vocab_size {
                bail!(
                    "model vocabulary has {} words but the corpus has {}",
                    model.vocab_size(),
                    corpus.vocab_size
                );
            }
            (path.display().to_string(), document_bounds(&model, &docs)?)
        }
        None => {
            let lp = -(corpus.vocab_size as f64).ln();
            ("uniform".to_string(), lengths.iter().map(|&n| n as f64 * lp).collect())
        }
    };
    let p = perplexity(&logs, &lengths)?;
    println!("perplexity {p:.6}");
    let mut files = Vec::new();
    if let Some(out) = &a.out {
        create_dir(out)?;
        let tokens: usize = lengths.iter().sum();
        write(
            &out.join("perplexity.csv"),
            &format!("model,perplexity,documents,tokens\n{name},{p:?},{},{tokens}\n", docs.len()),
        )?;
        files.push("perplexity.csv".into());
    }
    Ok(files)
}

fn eval_nmi(a: &EvalNmiArgs) -> Result<Vec<String>> {
    let value = nmi(&read_labels(&a.labels)?, &read_labels(&a.truth)?)?;
    println!("nmi {value:.6}");
    let mut files = Vec::new();
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("nmi.csv"), &format!("nmi\n{value:?}\n"))?;
        files.push("nmi.csv".into());
    }
    Ok(files)
}

fn parse_bounds(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|axis| {
            let (lo, hi) = axis
                .split_once(':')
                .with_context(|| format!("bound {axis:?} is not of the form lo:hi"))?;
            let (lo, hi): (f64, f64) = (lo.trim().parse()?, hi.trim().parse()?);
            if !(lo < hi) {
                bail!("bound {axis:?} must have lo < hi");
            }
            Ok((lo, hi))
        })
        .collect()
}

fn mixture_samples(path: &Path) -> Result<Vec<MixtureSnapshot>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let kind = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
        .unwrap_or_default();
    Ok(match kind.as_str() {
        "hybrid-m3" => load_model::<HybridPosterior>(path)?.samples,
        _ => load_model::<InfinitePosterior>(path)?.samples,
    })
}

fn eval_density(a: &EvalDensityArgs) -> Result<Vec<String>> {
    let samples = mixture_samples(&a.model)?;
    let bounds = parse_bounds(&a.bounds)?;
    let grid = density_grid(&samples, &bounds, a.resolution)?;
    create_dir(&a.out)?;
    write(&a.out.join("density.csv"), &grid.to_csv())?;
    println!(
        "integral {:.4}, peaks {}, argmax {:?}",
        grid.integral(),
        grid.count_peaks(a.peak_threshold),
        grid.argmax()
    );
    Ok(vec!["density.csv".into()])
}

fn eval_confusion(a: &EvalConfusionArgs) -> Result<Vec<String>> {
    let runs = a.runs.iter().map(|p| read_labels(p)).collect::<m3mix::Result<Vec<_>>>()?;
    let m = co_cluster_matrix(&runs, &read_labels(&a.truth)?)?;
    create_dir(&a.out)?;
    write(&a.out.join("confusion.csv"), &m.to_csv())?;
    println!("{0}x{0} co-clustering matrix over {1} runs", m.order.len(), runs.len());
    Ok(vec!["confusion.csv".into()])
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn repro(a: &ReproArgs) -> Result<(Vec<String>, bool)> {
    create_dir(&a.out)?;
    let path = a.out.join("report.json");
    let passed = match a.experiment {
        Experiment::Gaussian => {
            let r = gaussian_experiment(&GaussianSettings::default())?;
            for (name, c) in [("sharing", &r.sharing), ("unshared", &r.unshared)] {
                println!("{name}: M3 NMI {:.4} {:?}", c.m3_mean, c.m3);
                println!("{name}: DPMM NMI {:.4} {:?}", c.dpmm_mean, c.dpmm);
            }
            write(&path, &serde_json::to_string_pretty(&r)?)?;
            print_checks(&r.checks)
        }
        Experiment::Iris => {
            let data = load_iris(&a.iris)?;
            let r = iris_experiment(&data, &experiments::default_iris_settings())?;
            println!("M3 NMI {:.4} versus DPMM {:.4}", r.comparison.m3_mean, r.comparison.dpmm_mean);
            write(&path, &serde_json::to_string_pretty(&r)?)?;
            print_checks(&r.checks)
        }
        Experiment::Topics => {
            let r = topic_experiment(&TopicSettings::default())?;
            println!("seed  M3({},{})  LDA({})", r.settings.k1, r.settings.k2, r.settings.lda_topics);
            for run in &r.runs {
                println!("{:>4}  {:>9.3}  {:>9.3}", run.seed, run.m3_perplexity, run.lda_perplexity);
            }
            println!("generating model: {:.3}", r.truth_perplexity);
            write(&path, &serde_json::to_string_pretty(&r)?)?;
            print_checks(&r.checks)
        }
    };
    Ok((vec!["report.json".into()], passed))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("M3MIX_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("M3MIX_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    configure_threads()?;
    let cmd = &cli.command;
    let (out, files, passed): (Option<&Path>, Vec<String>, bool) = match cmd {
        Command::GenGaussian(a) => (Some(&a.out), gen_gaussian(a)?, true),
        Command::GenCorpus(a) => (Some(&a.out), gen_corpus(a)?, true),
        Command::FitInfinite(a) => (Some(&a.chain.out), fit_infinite(a)?, true),
        Command::FitDpmm(a) => (Some(&a.chain.out), fit_infinite(&fit_dpmm_as_infinite(a))?, true),
        Command::FitFinite(a) => (Some(&a.train.out), fit_finite(a)?, true),
        Command::FitLda(a) => (Some(&a.train.out), fit_finite(&fit_lda_as_finite(a))?, true),
        Command::FitHybrid(a) => (Some(&a.chain.out), fit_hybrid(a)?, true),
        Command::EvalPerplexity(a) => (a.out.as_deref(), eval_perplexity(a)?, true),
        Command::EvalNmi(a) => (a.out.as_deref(), eval_nmi(a)?, true),
        Command::EvalDensity(a) => (Some(&a.out), eval_density(a)?, true),
        Command::EvalConfusion(a) => (Some(&a.out), eval_confusion(a)?, true),
        Command::Repro(a) => {
            let (files, passed) = repro(a)?;
            (Some(&a.out), files, passed)
        }
    };
    if let Some(out) = out {
        write_manifest(out, cmd, &files)?;
    }
    Ok(passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

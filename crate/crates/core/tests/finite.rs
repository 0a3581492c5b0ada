use m3mix::finite::{
    e_step, elbo, fit, fit_from, infer_document, theta_omega_bound, update_theta_omega, Document, FiniteM3Model, FitConfig,
    MStepConfig, PairStats, Penalties, PenalizedThetaObjective,
};
use m3mix::optim::grad_check;
use m3mix::rng::stream_rng;
use m3mix::synth::{gen_two_factor_corpus, TwoFactorSpec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use statrs::function::gamma::{digamma, ln_gamma};

fn random_doc<R: Rng>(len: usize, vocab: usize, rng: &mut R) -> Document {
    Document::new((0..len).map(|_| rng.gen_range(0..vocab)).collect())
}

/// Monte-Carlo estimate of p(doc) with topic proportions integrated out:
/// mean over draws of prod_n sum_ij pi1_i pi2_j p(x_n | i, j).
fn mc_likelihood<R: Rng>(model: &FiniteM3Model, doc: &Document, draws: usize, rng: &mut R) -> (f64, f64) {
    let d1 = Dirichlet::new(&vec![model.alpha1; model.k1()]).unwrap();
    let d2 = Dirichlet::new(&vec![model.alpha2; model.k2()]).unwrap();
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..draws {
        let p1 = d1.sample(rng);
        let p2 = d2.sample(rng);
        let mut like = 1.0;
        for &w in &doc.tokens {
            let mut p = 0.0;
            for (i, a) in p1.iter().enumerate() {
                for (j, b) in p2.iter().enumerate() {
                    p += a * b * model.word_prob(i, j, w);
                }
            }
            like *= p;
        }
        sum += like;
        sq += like * like;
    }
    let n = draws as f64;
    let mean = sum / n;
    let se = ((sq / n - mean * mean).max(0.0) / n).sqrt();
    (mean, se)
}

#[test]
fn elbo_is_below_monte_carlo_likelihood() {
    let mut rng = stream_rng(10, 0);
    for case in 0..40 {
        let vocab = rng.gen_range(2..=5);
        let omega = rng.gen_range(0.0..1.0);
        let mut model = FiniteM3Model::random(2, 2, vocab, omega, &mut rng).unwrap();
        model.alpha1 = rng.gen_range(0.2..3.0);
        model.alpha2 = rng.gen_range(0.2..3.0);
        let doc = random_doc(rng.gen_range(1..=3), vocab, &mut rng);
        let bound = infer_document(&model, &doc).unwrap().elbo;
        let (mean, se) = mc_likelihood(&model, &doc, 200_000, &mut rng);
        assert!(bound.exp() <= mean + 3.0 * se, "case {case}: exp(elbo) {} vs {mean} +- {se}", bound.exp());
    }
}

#[test]
fn estep_bound_never_decreases() {
    let mut rng = stream_rng(11, 0);
    for case in 0..100 {
        let k1 = rng.gen_range(1..=5);
        let k2 = rng.gen_range(1..=4);
        let vocab = rng.gen_range(2..=30);
        let mut model = FiniteM3Model::random(k1, k2, vocab, rng.gen_range(0.0..=1.0), &mut rng).unwrap();
        model.alpha1 = rng.gen_range(0.05..5.0);
        model.alpha2 = rng.gen_range(0.05..5.0);
        let doc = random_doc(rng.gen_range(1..=60), vocab, &mut rng);
        let r = e_step(&model, &doc, 100, 0.0).unwrap();
        for w in r.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "case {case}: {} -> {}", w[0], w[1]);
        }
        let direct = elbo(&model, &doc, &r.state).unwrap().value;
        assert!((direct - r.elbo).abs() < 1e-8 * direct.abs().max(1.0));
    }
}

#[test]
fn mstep_gradient_matches_finite_differences() {
    let mut rng = stream_rng(12, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k1 = rng.gen_range(1..=3);
        let k2 = rng.gen_range(1..=3);
        let vocab = rng.gen_range(2..=6);
        let dense: Vec<f64> = (0..vocab * k1 * k2)
            .map(|_| if rng.gen_bool(0.8) { rng.gen_range(0.0..5.0) } else { 0.0 })
            .collect();
        let stats = PairStats::from_dense(k1, k2, vocab, &dense).unwrap();
        let lambda: Vec<f64> = (0..k1).map(|_| rng.gen_range(0.1..100.0)).collect();
        let eta: Vec<f64> = (0..k2).map(|_| rng.gen_range(0.1..100.0)).collect();
        let fixed_omega = if rng.gen_bool(0.3) { Some(rng.gen_range(0.0..1.0)) } else { None };
        let obj = PenalizedThetaObjective { stats: &stats, lambda: &lambda, eta: &eta, fixed_omega };
        let x: Vec<f64> = (0..obj.dim()).map(|_| rng.gen_range(-3.0..0.5)).collect();
        worst = worst.max(grad_check(&obj, &x, 1e-5).unwrap());
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

/// Textbook LDA variational E-step for one document.
fn lda_estep(beta: &DMatrix<f64>, alpha: f64, doc: &Document, iters: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = beta.nrows();
    let mut gamma = vec![alpha + doc.len() as f64 / k as f64; k];
    let mut phi = vec![vec![1.0 / k as f64; k]; doc.len()];
    for _ in 0..iters {
        for (n, &w) in doc.tokens.iter().enumerate() {
            let raw: Vec<f64> = (0..k).map(|i| beta[(i, w)] * digamma(gamma[i]).exp()).collect();
            let s: f64 = raw.iter().sum();
            phi[n] = raw.iter().map(|r| r / s).collect();
        }
        for i in 0..k {
            gamma[i] = alpha + phi.iter().map(|p| p[i]).sum::<f64>();
        }
    }
    (gamma, phi)
}

fn lda_bound(beta: &DMatrix<f64>, alpha: f64, doc: &Document, gamma: &[f64], phi: &[Vec<f64>]) -> f64 {
    let k = gamma.len() as f64;
    let g0: f64 = gamma.iter().sum();
    let elog: Vec<f64> = gamma.iter().map(|g| digamma(*g) - digamma(g0)).collect();
    let mut l = ln_gamma(k * alpha) - k * ln_gamma(alpha) + (alpha - 1.0) * elog.iter().sum::<f64>();
    l -= ln_gamma(g0) - gamma.iter().map(|g| ln_gamma(*g)).sum::<f64>()
        + gamma.iter().zip(&elog).map(|(g, e)| (g - 1.0) * e).sum::<f64>();
    for (n, &w) in doc.tokens.iter().enumerate() {
        for (i, p) in phi[n].iter().enumerate() {
            if *p > 0.0 {
                l += p * (elog[i] + beta[(i, w)].ln() - p.ln());
            }
        }
    }
    l
}

#[test]
fn fully_coupled_estep_matches_textbook_lda() {
    let mut rng = stream_rng(13, 0);
    for _ in 0..20 {
        let k = rng.gen_range(2..=6);
        let vocab = rng.gen_range(5..=20);
        let mut model = FiniteM3Model::random(k, 1, vocab, 1.0, &mut rng).unwrap();
        model.alpha1 = rng.gen_range(0.1..2.0);
        let doc = random_doc(rng.gen_range(1..=40), vocab, &mut rng);
        // same start and update order, so the iterates agree step by step
        let ours = e_step(&model, &doc, 30, 0.0).unwrap();
        let iters = ours.elbo_trace.len() - 1;
        let (gamma, phi) = lda_estep(model.theta1(), model.alpha1, &doc, iters);
        for (a, b) in ours.state.gamma1.iter().zip(&gamma) {
            assert!((a - b).abs() < 1e-9 * b, "{:?} vs {gamma:?}", ours.state.gamma1);
        }
        for (a, b) in ours.state.phi1.iter().flatten().zip(phi.iter().flatten()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let reference = lda_bound(model.theta1(), model.alpha1, &doc, &gamma, &phi);
        assert!((ours.elbo - reference).abs() < 1e-9 * reference.abs(), "{} vs {reference}", ours.elbo);
    }
}

#[test]
fn fully_coupled_mstep_matches_normalized_counts() {
    let mut rng = stream_rng(14, 0);
    let (k, vocab) = (3, 8);
    let dense: Vec<f64> = (0..vocab * k).map(|_| rng.gen_range(0.5..10.0)).collect();
    let stats = PairStats::from_dense(k, 1, vocab, &dense).unwrap();
    let model = FiniteM3Model::random(k, 1, vocab, 1.0, &mut rng).unwrap();
    // at any penalty weight the stationary rows are proportional to the
    // counts, and the final renormalization makes them sum to one
    let mut cfg = MStepConfig::default();
    cfg.lbfgs.f_rel_tol = 0.0;
    cfg.lbfgs.grad_tol = 1e-10;
    cfg.lbfgs.max_iters = 5000;
    cfg.schedule.max_rounds = 20;
    cfg.schedule.cap = 1e12;
    let out = update_theta_omega(
        &stats,
        model.theta1(),
        model.theta2(),
        1.0,
        true,
        &Penalties::new(k, 1, 1.0),
        &cfg,
    )
    .unwrap();
    // dense is laid out word-major, then (i, j)
    for i in 0..k {
        let total: f64 = (0..vocab).map(|v| dense[v * k + i]).sum();
        for v in 0..vocab {
            let expected = dense[v * k + i] / total;
            assert!((out.theta1[(i, v)] - expected).abs() < 1e-6, "row {i} word {v}: {} vs {expected}", out.theta1[(i, v)]);
        }
    }
    assert_eq!(out.omega, 1.0);
    assert!(
        theta_omega_bound(&stats, &out.theta1, &out.theta2, 1.0)
            >= theta_omega_bound(&stats, model.theta1(), model.theta2(), 1.0)
    );
}

#[test]
fn corpus_bound_trace_is_monotone() {
    let (corpus, _) = gen_two_factor_corpus(&TwoFactorSpec {
        k1: 4,
        k2: 2,
        vocab_size: 60,
        docs: 40,
        doc_len: 40,
        omega: 0.5,
        alpha1: 0.5,
        alpha2: 0.5,
        seed: 3,
    })
    .unwrap();
    let cfg = FitConfig { em_iters: 15, seed: 4, ..FitConfig::default() };
    let r = fit(&corpus.docs, corpus.vocab_size, 4, 2, &cfg).unwrap();
    for w in r.elbo_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
    assert!(r.model.omega() >= 0.0 && r.model.omega() <= 1.0);
}

#[test]
fn identical_single_word_documents_concentrate_topics() {
    let docs = vec![Document::new(vec![3]); 30];
    let cfg = FitConfig { em_iters: 20, ..FitConfig::default() };
    let r = fit(&docs, 6, 2, 2, &cfg).unwrap();
    for i in 0..2 {
        assert!(r.model.theta1()[(i, 3)] > 0.99 || r.model.theta2()[(0, 3)] > 0.99);
    }
    let best = (0..2).map(|i| r.model.theta1()[(i, 3)]).fold(0.0, f64::max);
    assert!(best > 0.99, "{}", r.model.theta1());
}

fn small_corpus() -> m3mix::data::Corpus {
    gen_two_factor_corpus(&TwoFactorSpec {
        k1: 3,
        k2: 2,
        vocab_size: 40,
        docs: 30,
        doc_len: 30,
        omega: 0.5,
        alpha1: 0.5,
        alpha2: 0.5,
        seed: 8,
    })
    .unwrap()
    .0
}

#[test]
fn single_restart_matches_fit_from_the_same_start() {
    let corpus = small_corpus();
    let cfg = FitConfig { em_iters: 8, seed: 6, ..FitConfig::default() };
    let a = fit(&corpus.docs, corpus.vocab_size, 3, 2, &cfg).unwrap();
    let start = FiniteM3Model::random(3, 2, corpus.vocab_size, 0.5, &mut stream_rng(6, 0)).unwrap();
    let b = fit_from(start, &corpus.docs, &cfg).unwrap();
    assert_eq!(a.elbo_trace, b.elbo_trace);
    assert_eq!(a.model.theta1(), b.model.theta1());
    assert_eq!(a.restart, 0);
}

#[test]
fn warmup_holds_alpha_and_omega() {
    let corpus = small_corpus();
    let cfg = FitConfig { em_iters: 3, warmup: 3, seed: 2, ..FitConfig::default() };
    let r = fit(&corpus.docs, corpus.vocab_size, 3, 2, &cfg).unwrap();
    assert_eq!(r.model.omega(), 0.5);
    assert_eq!((r.model.alpha1, r.model.alpha2), (1.0, 1.0));
    let free = fit(&corpus.docs, corpus.vocab_size, 3, 2, &FitConfig { warmup: 0, ..cfg }).unwrap();
    assert_ne!(free.model.omega(), 0.5);
}

#[test]
fn restarts_keep_the_best_screened_run() {
    let corpus = small_corpus();
    let cfg = FitConfig { em_iters: 6, warmup: 2, restarts: 3, seed: 1, ..FitConfig::default() };
    let r = fit(&corpus.docs, corpus.vocab_size, 3, 2, &cfg).unwrap();
    assert!(r.restart < 3);
    assert!(r.elbo_trace.len() <= cfg.em_iters + 1);
    for w in r.elbo_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-6 * w[0].abs());
    }
}

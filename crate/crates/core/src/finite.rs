//! Two-dimensional finite M3 topic model.
//!
//! Each token picks a topic from each of two topic spaces and is emitted by
//! the blend `(1 + w)/2 * theta1[z1] + (1 - w)/2 * theta2[z2]`. Training is
//! variational EM under the mean-field family
//! `q(pi1) q(pi2) prod_n q(z1_n) q(z2_n)`:
//!
//! * E-step, per document: `phi1_n ∝ exp(E[log pi1] + sum_j phi2_nj log p(x_n | i, j))`,
//!   then the symmetric `phi2` update, then `gamma = alpha + sum_n phi`.
//!   Each update is the exact coordinate optimum so the bound never drops.
//! * M-step: Newton updates of the symmetric Dirichlet priors, then the topic
//!   matrices and `w` by L-BFGS on a log/logit reparameterization with
//!   quadratic row-sum penalties.
//!
//! With `w = 1` and `K2 = 1` the model is LDA.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::gaussian::{matrix_to_rows, rows_to_matrix};
use crate::optim::{penalty_loop, LbfgsConfig, Objective, PenaltySchedule};
use crate::par;
use crate::rng::stream_rng;
use crate::special::{digamma, ln_gamma, trigamma};

const THETA_FLOOR: f64 = 1e-12;
const LOG_FLOOR: f64 = 1e-300;
const ROW_TOL: f64 = 1e-8;

/// A document as a sequence of vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<usize>,
}

impl Document {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Distinct words of a document with their multiplicities. Tokens of the same
/// word share their variational parameters at every coordinate-ascent
/// iterate, so the E-step runs on distinct words.
#[derive(Debug, Clone)]
pub(crate) struct Bag {
    words: Vec<usize>,
    counts: Vec<f64>,
    /// Position in `words` of every token.
    slot: Vec<usize>,
}

impl Bag {
    pub(crate) fn new(doc: &Document) -> Self {
        let mut index: BTreeMap<usize, usize> = BTreeMap::new();
        for &w in &doc.tokens {
            *index.entry(w).or_default() += 1;
        }
        let words: Vec<usize> = index.keys().copied().collect();
        let counts = index.values().map(|&c| c as f64).collect();
        let pos: BTreeMap<usize, usize> = words.iter().enumerate().map(|(k, &w)| (w, k)).collect();
        let slot = doc.tokens.iter().map(|w| pos[w]).collect();
        Self { words, counts, slot }
    }

    fn tokens(&self) -> f64 {
        self.counts.iter().sum()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFields {
    theta1: Vec<Vec<f64>>,
    theta2: Vec<Vec<f64>>,
    alpha1: f64,
    alpha2: f64,
    omega: f64,
    vocab_size: usize,
}

/// Topic matrices `theta1` (K1 x V), `theta2` (K2 x V), symmetric Dirichlet
/// priors and the sharing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFields", into = "ModelFields")]
pub struct FiniteM3Model {
    theta1: DMatrix<f64>,
    theta2: DMatrix<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    omega: f64,
}

impl TryFrom<ModelFields> for FiniteM3Model {
    type Error = M3Error;

    fn try_from(f: ModelFields) -> Result<Self> {
        let m = FiniteM3Model::new(
            rows_to_matrix(&f.theta1)?,
            rows_to_matrix(&f.theta2)?,
            f.alpha1,
            f.alpha2,
            f.omega,
        )?;
        if m.vocab_size() != f.vocab_size {
            return Err(M3Error::Dimension {
                expected: f.vocab_size,
                got: m.vocab_size(),
            });
        }
        Ok(m)
    }
}

impl From<FiniteM3Model> for ModelFields {
    fn from(m: FiniteM3Model) -> Self {
        ModelFields {
            vocab_size: m.vocab_size(),
            theta1: matrix_to_rows(&m.theta1),
            theta2: matrix_to_rows(&m.theta2),
            alpha1: m.alpha1,
            alpha2: m.alpha2,
            omega: m.omega,
        }
    }
}

fn check_stochastic(name: &str, m: &DMatrix<f64>) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(M3Error::InvalidParameter(format!("{name} row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOL {
            return Err(M3Error::InvalidParameter(format!("{name} row {i} sums to {s}")));
        }
    }
    Ok(())
}

impl FiniteM3Model {
    pub fn new(theta1: DMatrix<f64>, theta2: DMatrix<f64>, alpha1: f64, alpha2: f64, omega: f64) -> Result<Self> {
        if theta1.ncols() != theta2.ncols() {
            return Err(M3Error::Dimension {
                expected: theta1.ncols(),
                got: theta2.ncols(),
            });
        }
        if theta1.nrows() == 0 || theta2.nrows() == 0 || theta1.ncols() == 0 {
            return Err(M3Error::InvalidParameter("topic matrices must be non-empty".into()));
        }
        check_stochastic("theta1", &theta1)?;
        check_stochastic("theta2", &theta2)?;
        if !(alpha1 > 0.0 && alpha2 > 0.0) {
            return Err(M3Error::InvalidParameter("Dirichlet priors must be positive".into()));
        }
        if !(0.0..=1.0).contains(&omega) {
            return Err(M3Error::InvalidParameter(format!("omega must lie in [0, 1], got {omega}")));
        }
        Ok(Self {
            theta1,
            theta2,
            alpha1,
            alpha2,
            omega,
        })
    }

    /// Rows of both topic matrices drawn from a symmetric Dirichlet(1).
    pub fn random<R: Rng + ?Sized>(k1: usize, k2: usize, vocab_size: usize, omega: f64, rng: &mut R) -> Result<Self> {
        if k1 == 0 || k2 == 0 || vocab_size == 0 {
            return Err(M3Error::InvalidParameter("K1, K2 and V must be at least 1".into()));
        }
        let theta1 = dirichlet_rows(k1, vocab_size, 1.0, rng);
        let theta2 = dirichlet_rows(k2, vocab_size, 1.0, rng);
        Self::new(theta1, theta2, 1.0, 1.0, omega)
    }

    pub fn k1(&self) -> usize {
        self.theta1.nrows()
    }

    pub fn k2(&self) -> usize {
        self.theta2.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.theta1.ncols()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn theta1(&self) -> &DMatrix<f64> {
        &self.theta1
    }

    pub fn theta2(&self) -> &DMatrix<f64> {
        &self.theta2
    }

    fn blend(&self) -> (f64, f64) {
        ((1.0 + self.omega) / 2.0, (1.0 - self.omega) / 2.0)
    }

    /// `(1 + w)/2 * theta1[z1][v] + (1 - w)/2 * theta2[z2][v]`.
    pub fn word_prob(&self, z1: usize, z2: usize, v: usize) -> f64 {
        let (a, b) = self.blend();
        a * self.theta1[(z1, v)] + b * self.theta2[(z2, v)]
    }

    /// Word distribution of a document under the variational posterior mean
    /// topic proportions.
    pub fn predictive_distribution(&self, vs: &VariationalState) -> Vec<f64> {
        let s1: f64 = vs.gamma1.iter().sum();
        let s2: f64 = vs.gamma2.iter().sum();
        let (a, b) = self.blend();
        (0..self.vocab_size())
            .map(|v| {
                let p1: f64 = (0..self.k1()).map(|i| vs.gamma1[i] / s1 * self.theta1[(i, v)]).sum();
                let p2: f64 = (0..self.k2()).map(|j| vs.gamma2[j] / s2 * self.theta2[(j, v)]).sum();
                a * p1 + b * p2
            })
            .collect()
    }

    fn check_doc(&self, doc: &Document) -> Result<()> {
        match doc.tokens.iter().find(|&&w| w >= self.vocab_size()) {
            Some(&w) => Err(M3Error::InvalidParameter(format!(
                "token {w} outside vocabulary of size {}",
                self.vocab_size()
            ))),
            None => Ok(()),
        }
    }
}

pub(crate) fn dirichlet_rows<R: Rng + ?Sized>(rows: usize, cols: usize, conc: f64, rng: &mut R) -> DMatrix<f64> {
    let gamma = Gamma::new(conc, 1.0).expect("positive concentration");
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let mut s = 0.0;
        while s == 0.0 {
            for v in 0..cols {
                m[(i, v)] = gamma.sample(rng);
            }
            s = m.row(i).sum();
        }
        for v in 0..cols {
            m[(i, v)] /= s;
        }
    }
    m
}

/// Per-document variational parameters. `phi1`/`phi2` have one row per
/// token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub phi1: Vec<Vec<f64>>,
    pub phi2: Vec<Vec<f64>>,
}

/// Variational parameters over the distinct words of a bag.
#[derive(Debug, Clone)]
pub(crate) struct BagState {
    gamma1: Vec<f64>,
    gamma2: Vec<f64>,
    /// U x K1 row-major.
    phi1: Vec<f64>,
    /// U x K2 row-major.
    phi2: Vec<f64>,
}

impl BagState {
    fn fresh(model: &FiniteM3Model, bag: &Bag) -> Self {
        let (k1, k2, u) = (model.k1(), model.k2(), bag.words.len());
        let n = bag.tokens();
        Self {
            gamma1: vec![model.alpha1 + n / k1 as f64; k1],
            gamma2: vec![model.alpha2 + n / k2 as f64; k2],
            phi1: vec![1.0 / k1 as f64; u * k1],
            phi2: vec![1.0 / k2 as f64; u * k2],
        }
    }

    fn expand(&self, bag: &Bag, k1: usize, k2: usize) -> VariationalState {
        VariationalState {
            gamma1: self.gamma1.clone(),
            gamma2: self.gamma2.clone(),
            phi1: bag.slot.iter().map(|&s| self.phi1[s * k1..(s + 1) * k1].to_vec()).collect(),
            phi2: bag.slot.iter().map(|&s| self.phi2[s * k2..(s + 1) * k2].to_vec()).collect(),
        }
    }
}

/// `log p(word | i, j)` for every distinct word, floored at 1e-300.
struct LogWordProbs {
    values: Vec<f64>,
    clamped: bool,
}

impl LogWordProbs {
    fn new(model: &FiniteM3Model, bag: &Bag) -> Self {
        let (k1, k2) = (model.k1(), model.k2());
        let mut clamped = false;
        let mut values = Vec::with_capacity(bag.words.len() * k1 * k2);
        for &w in &bag.words {
            for i in 0..k1 {
                for j in 0..k2 {
                    let p = model.word_prob(i, j, w);
                    if p < LOG_FLOOR {
                        clamped = true;
                    }
                    values.push(p.max(LOG_FLOOR).ln());
                }
            }
        }
        Self { values, clamped }
    }
}

fn expected_log(gamma: &[f64]) -> Vec<f64> {
    let total = digamma(gamma.iter().sum());
    gamma.iter().map(|&g| digamma(g) - total).collect()
}

/// E[log p(pi | alpha)] - E[log q(pi | gamma)] for one symmetric Dirichlet.
fn dirichlet_terms(alpha: f64, gamma: &[f64], elog: &[f64]) -> f64 {
    let k = gamma.len() as f64;
    let prior = ln_gamma(k * alpha) - k * ln_gamma(alpha) + (alpha - 1.0) * elog.iter().sum::<f64>();
    let q = ln_gamma(gamma.iter().sum()) - gamma.iter().map(|&g| ln_gamma(g)).sum::<f64>()
        + gamma.iter().zip(elog).map(|(&g, &e)| (g - 1.0) * e).sum::<f64>();
    prior - q
}

fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

fn bag_elbo(model: &FiniteM3Model, bag: &Bag, st: &BagState, lw: &LogWordProbs) -> f64 {
    let (k1, k2) = (model.k1(), model.k2());
    let e1 = expected_log(&st.gamma1);
    let e2 = expected_log(&st.gamma2);
    let mut total = dirichlet_terms(model.alpha1, &st.gamma1, &e1) + dirichlet_terms(model.alpha2, &st.gamma2, &e2);
    for (u, &c) in bag.counts.iter().enumerate() {
        let p1 = &st.phi1[u * k1..(u + 1) * k1];
        let p2 = &st.phi2[u * k2..(u + 1) * k2];
        let lv = &lw.values[u * k1 * k2..(u + 1) * k1 * k2];
        let mut t = 0.0;
        for i in 0..k1 {
            t += p1[i] * e1[i];
            for j in 0..k2 {
                t += p1[i] * p2[j] * lv[i * k2 + j];
            }
        }
        t += p2.iter().zip(&e2).map(|(p, e)| p * e).sum::<f64>();
        t -= neg_entropy(p1) + neg_entropy(p2);
        total += c * t;
    }
    total
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(scores) {
        *o = (x - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Coordinate ascent on one bag from `st`. Returns the bound after each
/// iteration (the first entry is the bound at the start point).
fn bag_estep(
    model: &FiniteM3Model,
    bag: &Bag,
    st: &mut BagState,
    max_iters: usize,
    tol: f64,
) -> (Vec<f64>, bool) {
    let (k1, k2) = (model.k1(), model.k2());
    let lw = LogWordProbs::new(model, bag);
    let mut trace = vec![bag_elbo(model, bag, st, &lw)];
    let mut scores1 = vec![0.0; k1];
    let mut scores2 = vec![0.0; k2];
    for _ in 0..max_iters {
        let e1 = expected_log(&st.gamma1);
        for u in 0..bag.words.len() {
            let lv = &lw.values[u * k1 * k2..(u + 1) * k1 * k2];
            let p2 = &st.phi2[u * k2..(u + 1) * k2];
            for i in 0..k1 {
                scores1[i] = e1[i] + (0..k2).map(|j| p2[j] * lv[i * k2 + j]).sum::<f64>();
            }
            softmax_into(&scores1, &mut st.phi1[u * k1..(u + 1) * k1]);
        }
        let e2 = expected_log(&st.gamma2);
        for u in 0..bag.words.len() {
            let lv = &lw.values[u * k1 * k2..(u + 1) * k1 * k2];
            let p1 = &st.phi1[u * k1..(u + 1) * k1];
            for j in 0..k2 {
                scores2[j] = e2[j] + (0..k1).map(|i| p1[i] * lv[i * k2 + j]).sum::<f64>();
            }
            softmax_into(&scores2, &mut st.phi2[u * k2..(u + 1) * k2]);
        }
        st.gamma1.iter_mut().for_each(|g| *g = model.alpha1);
        st.gamma2.iter_mut().for_each(|g| *g = model.alpha2);
        for (u, &c) in bag.counts.iter().enumerate() {
            for i in 0..k1 {
                st.gamma1[i] += c * st.phi1[u * k1 + i];
            }
            for j in 0..k2 {
                st.gamma2[j] += c * st.phi2[u * k2 + j];
            }
        }
        let prev = *trace.last().expect("non-empty");
        let cur = bag_elbo(model, bag, st, &lw);
        trace.push(cur);
        if (cur - prev).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    (trace, lw.clamped)
}

#[derive(Debug, Clone)]
pub struct EStepResult {
    pub state: VariationalState,
    pub elbo: f64,
    /// Bound at the start point and after every iteration.
    pub elbo_trace: Vec<f64>,
    /// Some word probability fell below 1e-300 and was clamped inside a log.
    pub clamped: bool,
}

/// Mean-field coordinate ascent for one document from the uniform start,
/// stopping when the relative change of the bound drops below `tol` or after
/// `max_iters` iterations.
pub fn e_step(model: &FiniteM3Model, doc: &Document, max_iters: usize, tol: f64) -> Result<EStepResult> {
    model.check_doc(doc)?;
    let bag = Bag::new(doc);
    let mut st = BagState::fresh(model, &bag);
    let (elbo_trace, clamped) = bag_estep(model, &bag, &mut st, max_iters, tol);
    Ok(EStepResult {
        state: st.expand(&bag, model.k1(), model.k2()),
        elbo: *elbo_trace.last().expect("non-empty"),
        elbo_trace,
        clamped,
    })
}

pub const INFER_MAX_ITERS: usize = 200;
pub const INFER_TOL: f64 = 1e-10;

/// E-step with a frozen model and default iteration settings.
pub fn infer_document(model: &FiniteM3Model, doc: &Document) -> Result<EStepResult> {
    e_step(model, doc, INFER_MAX_ITERS, INFER_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboReport {
    pub value: f64,
    pub clamped: bool,
}

/// Evidence lower bound of a document under per-token variational
/// parameters.
pub fn elbo(model: &FiniteM3Model, doc: &Document, vs: &VariationalState) -> Result<ElboReport> {
    model.check_doc(doc)?;
    let (k1, k2) = (model.k1(), model.k2());
    let n = doc.len();
    if vs.gamma1.len() != k1 || vs.gamma2.len() != k2 || vs.phi1.len() != n || vs.phi2.len() != n {
        return Err(M3Error::InvalidParameter("variational state shape does not match model and document".into()));
    }
    let e1 = expected_log(&vs.gamma1);
    let e2 = expected_log(&vs.gamma2);
    let mut total = dirichlet_terms(model.alpha1, &vs.gamma1, &e1) + dirichlet_terms(model.alpha2, &vs.gamma2, &e2);
    let mut clamped = false;
    for (t, &w) in doc.tokens.iter().enumerate() {
        let (p1, p2) = (&vs.phi1[t], &vs.phi2[t]);
        for i in 0..k1 {
            total += p1[i] * e1[i];
            for j in 0..k2 {
                let mass = p1[i] * p2[j];
                if mass == 0.0 {
                    continue;
                }
                let p = model.word_prob(i, j, w);
                if p < LOG_FLOOR {
                    clamped = true;
                }
                total += mass * p.max(LOG_FLOOR).ln();
            }
        }
        total += p2.iter().zip(&e2).map(|(p, e)| p * e).sum::<f64>();
        total -= neg_entropy(p1) + neg_entropy(p2);
    }
    Ok(ElboReport { value: total, clamped })
}

/// Outcome of a Dirichlet prior update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaUpdate {
    pub alpha: f64,
    /// Backtracking gave up; `alpha` is the last accepted value.
    pub backtrack_failed: bool,
}

/// The part of the bound that depends on a symmetric Dirichlet prior,
/// summed over documents.
pub fn alpha_objective(gammas: &[Vec<f64>], alpha: f64) -> f64 {
    let (d, s) = alpha_stats(gammas);
    let k = gammas.first().map_or(0, Vec::len) as f64;
    d * (ln_gamma(k * alpha) - k * ln_gamma(alpha)) + (alpha - 1.0) * s
}

fn alpha_stats(gammas: &[Vec<f64>]) -> (f64, f64) {
    let s: f64 = gammas.iter().map(|g| expected_log(g).iter().sum::<f64>()).sum();
    (gammas.len() as f64, s)
}

/// Newton-Raphson ascent on the symmetric Dirichlet parameter of one
/// dimension. Steps that leave the positive axis or lower the objective are
/// halved, at most 50 times.
pub fn update_alpha(gammas: &[Vec<f64>], k: usize, current: f64) -> Result<AlphaUpdate> {
    if !(current > 0.0) {
        return Err(M3Error::InvalidParameter("alpha must be positive".into()));
    }
    if let Some(g) = gammas.iter().find(|g| g.len() != k || g.iter().any(|&v| !(v > 0.0))) {
        return Err(M3Error::InvalidParameter(format!(
            "gamma vectors must have {k} positive entries, got {g:?}"
        )));
    }
    if k <= 1 || gammas.is_empty() {
        return Ok(AlphaUpdate {
            alpha: current,
            backtrack_failed: false,
        });
    }
    let (d, s) = alpha_stats(gammas);
    let kf = k as f64;
    let obj = |a: f64| d * (ln_gamma(kf * a) - kf * ln_gamma(a)) + (a - 1.0) * s;
    let mut alpha = current;
    let mut f = obj(alpha);
    for _ in 0..100 {
        let g = d * kf * (digamma(kf * alpha) - digamma(alpha)) + s;
        let h = d * kf * (kf * trigamma(kf * alpha) - trigamma(alpha));
        let mut step = -g / h;
        if !step.is_finite() || step == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..50 {
            let cand = alpha + step;
            if cand > 0.0 {
                let fc = obj(cand);
                if fc >= f {
                    alpha = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok(AlphaUpdate {
                alpha,
                backtrack_failed: true,
            });
        }
        if step.abs() <= 1e-12 * alpha {
            break;
        }
    }
    Ok(AlphaUpdate {
        alpha,
        backtrack_failed: false,
    })
}

/// Expected word-topic-pair counts `S[v][i][j] = sum_{d,n: x_dn = v} phi1_dni phi2_dnj`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    k1: usize,
    k2: usize,
    vocab_size: usize,
    /// Words with any mass, ascending.
    active: Vec<usize>,
    /// `active.len() x K1 x K2`.
    values: Vec<f64>,
}

impl PairStats {
    pub fn new(k1: usize, k2: usize, vocab_size: usize) -> Self {
        Self {
            k1,
            k2,
            vocab_size,
            active: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds the statistics from a dense `V x K1 x K2` table.
    pub fn from_dense(k1: usize, k2: usize, vocab_size: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != vocab_size * k1 * k2 {
            return Err(M3Error::Dimension {
                expected: vocab_size * k1 * k2,
                got: dense.len(),
            });
        }
        let block = k1 * k2;
        let mut s = Self::new(k1, k2, vocab_size);
        for v in 0..vocab_size {
            let b = &dense[v * block..(v + 1) * block];
            if b.iter().any(|&x| x > 0.0) {
                s.active.push(v);
                s.values.extend_from_slice(b);
            }
        }
        Ok(s)
    }

    /// Accumulates per-token variational parameters of one document.
    pub fn add_document(&mut self, doc: &Document, vs: &VariationalState) {
        let mut dense: BTreeMap<usize, Vec<f64>> = self.dense_map();
        for (t, &w) in doc.tokens.iter().enumerate() {
            let e = dense.entry(w).or_insert_with(|| vec![0.0; self.k1 * self.k2]);
            for i in 0..self.k1 {
                for j in 0..self.k2 {
                    e[i * self.k2 + j] += vs.phi1[t][i] * vs.phi2[t][j];
                }
            }
        }
        self.set_from_map(dense);
    }

    fn dense_map(&self) -> BTreeMap<usize, Vec<f64>> {
        let block = self.k1 * self.k2;
        self.active
            .iter()
            .enumerate()
            .map(|(k, &v)| (v, self.values[k * block..(k + 1) * block].to_vec()))
            .collect()
    }

    fn set_from_map(&mut self, m: BTreeMap<usize, Vec<f64>>) {
        self.active = m.keys().copied().collect();
        self.values = m.into_values().flatten().collect();
    }

    fn from_bags(k1: usize, k2: usize, vocab_size: usize, bags: &[Bag], states: &[BagState]) -> Self {
        let block = k1 * k2;
        let mut dense = vec![0.0; vocab_size * block];
        for (bag, st) in bags.iter().zip(states) {
            for (u, (&w, &c)) in bag.words.iter().zip(&bag.counts).enumerate() {
                let p1 = &st.phi1[u * k1..(u + 1) * k1];
                let p2 = &st.phi2[u * k2..(u + 1) * k2];
                let out = &mut dense[w * block..(w + 1) * block];
                for i in 0..k1 {
                    for j in 0..k2 {
                        out[i * k2 + j] += c * p1[i] * p2[j];
                    }
                }
            }
        }
        Self::from_dense(k1, k2, vocab_size, &dense).expect("sized above")
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// `sum_v sum_ij S[v][i][j] log((1 + w)/2 theta1[i][v] + (1 - w)/2 theta2[j][v])`.
pub fn theta_omega_bound(stats: &PairStats, theta1: &DMatrix<f64>, theta2: &DMatrix<f64>, omega: f64) -> f64 {
    let (a, b) = ((1.0 + omega) / 2.0, (1.0 - omega) / 2.0);
    let (k1, k2) = (stats.k1, stats.k2);
    let mut total = 0.0;
    for (k, &v) in stats.active.iter().enumerate() {
        let block = &stats.values[k * k1 * k2..(k + 1) * k1 * k2];
        for i in 0..k1 {
            for j in 0..k2 {
                let s = block[i * k2 + j];
                if s > 0.0 {
                    total += s * (a * theta1[(i, v)] + b * theta2[(j, v)]).max(LOG_FLOOR).ln();
                }
            }
        }
    }
    total
}

/// Penalized M-step objective over unconstrained variables
/// `x = [u1 (K1 x V), u2 (K2 x V), s]` with `theta = exp(u)` and
/// `w = 1 / (1 + exp(-s))`; `s` is absent when `w` is held fixed:
///
/// `-bound(theta, w) + 1/2 sum_i lambda_i (sum_v theta1_iv - 1)^2
///                   + 1/2 sum_j eta_j (sum_v theta2_jv - 1)^2`.
pub struct PenalizedThetaObjective<'a> {
    pub stats: &'a PairStats,
    pub lambda: &'a [f64],
    pub eta: &'a [f64],
    /// `Some(w)` holds the sharing weight fixed.
    pub fixed_omega: Option<f64>,
}

impl PenalizedThetaObjective<'_> {
    pub fn dim(&self) -> usize {
        let base = (self.stats.k1 + self.stats.k2) * self.stats.vocab_size;
        base + usize::from(self.fixed_omega.is_none())
    }

    /// Row sums minus one, theta1 rows first.
    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let (k1, k2, v) = (self.stats.k1, self.stats.k2, self.stats.vocab_size);
        (0..k1 + k2)
            .map(|r| x[r * v..(r + 1) * v].iter().map(|u| u.exp()).sum::<f64>() - 1.0)
            .collect()
    }

    pub fn omega_of(&self, x: &[f64]) -> f64 {
        match self.fixed_omega {
            Some(w) => w,
            None => logistic(x[x.len() - 1]),
        }
    }
}

fn logistic(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn logit(w: f64) -> f64 {
    let w = w.clamp(1e-9, 1.0 - 1e-9);
    (w / (1.0 - w)).ln()
}

impl Objective for PenalizedThetaObjective<'_> {
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (k1, k2, nv) = (self.stats.k1, self.stats.k2, self.stats.vocab_size);
        let off2 = k1 * nv;
        let omega = self.omega_of(x);
        let (a, b) = ((1.0 + omega) / 2.0, (1.0 - omega) / 2.0);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut f = 0.0;
        let mut d_omega = 0.0;
        // grad accumulates d/dtheta first; converted to d/du below
        for (k, &v) in self.stats.active.iter().enumerate() {
            let block = &self.stats.values[k * k1 * k2..(k + 1) * k1 * k2];
            for i in 0..k1 {
                let t1 = x[i * nv + v].exp();
                for j in 0..k2 {
                    let s = block[i * k2 + j];
                    if s <= 0.0 {
                        continue;
                    }
                    let t2 = x[off2 + j * nv + v].exp();
                    let den = a * t1 + b * t2;
                    f -= s * den.ln();
                    let q = s / den;
                    grad[i * nv + v] -= a * q;
                    grad[off2 + j * nv + v] -= b * q;
                    d_omega -= 0.5 * q * (t1 - t2);
                }
            }
        }
        for r in 0..k1 + k2 {
            let weight = if r < k1 { self.lambda[r] } else { self.eta[r - k1] };
            let row = &x[r * nv..(r + 1) * nv];
            let excess = row.iter().map(|u| u.exp()).sum::<f64>() - 1.0;
            f += 0.5 * weight * excess * excess;
            for (c, u) in row.iter().enumerate() {
                let t = u.exp();
                let g = &mut grad[r * nv + c];
                *g = (*g + weight * excess) * t;
            }
        }
        if self.fixed_omega.is_none() {
            grad[x.len() - 1] = d_omega * omega * (1.0 - omega);
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepConfig {
    pub lbfgs: LbfgsConfig,
    pub schedule: PenaltySchedule,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self {
            lbfgs: LbfgsConfig {
                max_iters: 500,
                f_rel_tol: 1e-13,
                ..Default::default()
            },
            schedule: PenaltySchedule::default(),
        }
    }
}

/// Row-sum penalty weights for the two topic matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
}

impl Penalties {
    pub fn new(k1: usize, k2: usize, init: f64) -> Self {
        Self {
            lambda: vec![init; k1],
            eta: vec![init; k2],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub theta1: DMatrix<f64>,
    pub theta2: DMatrix<f64>,
    pub omega: f64,
    pub penalties: Penalties,
    /// `-bound` at the input and at the returned parameters.
    pub objective_before: f64,
    pub objective_after: f64,
    /// Row sums met the tolerance before renormalization.
    pub feasible: bool,
    pub line_search_failures: usize,
    /// The solve did not improve on the input, which is returned unchanged.
    pub kept_input: bool,
}

fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        row.iter_mut().for_each(|v| *v = v.max(THETA_FLOOR));
        let s = row.sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Joint update of both topic matrices and the sharing weight by the
/// penalty loop over L-BFGS solves. `fix_omega` keeps `omega` at its input
/// value. Rows are renormalized exactly at the end and the input is returned
/// if the solve failed to lower `-bound`.
pub fn update_theta_omega(
    stats: &PairStats,
    theta1: &DMatrix<f64>,
    theta2: &DMatrix<f64>,
    omega: f64,
    fix_omega: bool,
    penalties: &Penalties,
    cfg: &MStepConfig,
) -> Result<MStepOutcome> {
    let (k1, k2, nv) = (stats.k1, stats.k2, stats.vocab_size);
    if theta1.shape() != (k1, nv) || theta2.shape() != (k2, nv) {
        return Err(M3Error::InvalidParameter("topic matrices do not match the statistics".into()));
    }
    if penalties.lambda.len() != k1 || penalties.eta.len() != k2 {
        return Err(M3Error::InvalidParameter("one penalty weight per topic row is required".into()));
    }
    let fixed = fix_omega.then_some(omega);
    let mut x0: Vec<f64> = Vec::with_capacity((k1 + k2) * nv + 1);
    for m in [theta1, theta2] {
        for i in 0..m.nrows() {
            x0.extend(m.row(i).iter().map(|t| t.max(THETA_FLOOR).ln()));
        }
    }
    if !fix_omega {
        x0.push(logit(omega));
    }
    let start: Vec<f64> = penalties.lambda.iter().chain(&penalties.eta).copied().collect();
    let probe = PenalizedThetaObjective {
        stats,
        lambda: &penalties.lambda,
        eta: &penalties.eta,
        fixed_omega: fixed,
    };
    let result = penalty_loop(
        |p: &[f64]| {
            let (lambda, eta) = p.split_at(k1);
            OwnedPenalized {
                stats,
                lambda: lambda.to_vec(),
                eta: eta.to_vec(),
                fixed_omega: fixed,
            }
        },
        |x: &[f64]| probe.residuals(x),
        &x0,
        Some(start),
        &cfg.schedule,
        &cfg.lbfgs,
    )?;
    let x = &result.x;
    let mut t1 = DMatrix::from_fn(k1, nv, |i, v| x[i * nv + v].exp());
    let mut t2 = DMatrix::from_fn(k2, nv, |j, v| x[(k1 + j) * nv + v].exp());
    normalize_rows(&mut t1);
    normalize_rows(&mut t2);
    let new_omega = probe.omega_of(x).clamp(0.0, 1.0);
    let before = -theta_omega_bound(stats, theta1, theta2, omega);
    let after = -theta_omega_bound(stats, &t1, &t2, new_omega);
    let penalties = Penalties {
        lambda: result.penalties[..k1].to_vec(),
        eta: result.penalties[k1..].to_vec(),
    };
    let kept_input = !(after <= before);
    let (theta1, theta2, omega, objective_after) = if kept_input {
        (theta1.clone(), theta2.clone(), omega, before)
    } else {
        (t1, t2, new_omega, after)
    };
    Ok(MStepOutcome {
        theta1,
        theta2,
        omega,
        penalties,
        objective_before: before,
        objective_after,
        feasible: result.feasible,
        line_search_failures: result.line_search_failures,
        kept_input,
    })
}

struct OwnedPenalized<'a> {
    stats: &'a PairStats,
    lambda: Vec<f64>,
    eta: Vec<f64>,
    fixed_omega: Option<f64>,
}

impl Objective for OwnedPenalized<'_> {
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        PenalizedThetaObjective {
            stats: self.stats,
            lambda: &self.lambda,
            eta: &self.eta,
            fixed_omega: self.fixed_omega,
        }
        .evaluate(x, grad)
    }
}

/// Variational EM settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub em_iters: usize,
    pub e_iters: usize,
    pub e_tol: f64,
    /// Stop once the relative change of the corpus bound falls below this;
    /// zero runs all `em_iters`.
    pub em_tol: f64,
    pub fix_omega: Option<f64>,
    /// Keep both Dirichlet priors at 1.
    pub fix_alpha: bool,
    /// Number of leading EM iterations that hold `alpha` and `omega` at
    /// their initial values. From a random start the first E-steps see
    /// nearly uniform topics: a free `omega` then runs to 0 or 1, where the
    /// logit parameterization cannot bring it back, and `alpha` grows until
    /// documents can no longer specialize.
    pub warmup: usize,
    /// Random starts screened over the warm-up; see [`fit`].
    pub restarts: usize,
    pub seed: u64,
    pub mstep: MStepConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            em_iters: 50,
            e_iters: 100,
            e_tol: 1e-8,
            em_tol: 0.0,
            fix_omega: None,
            fix_alpha: false,
            warmup: 10,
            restarts: 1,
            seed: 0,
            mstep: MStepConfig::default(),
        }
    }
}

impl FitConfig {
    /// LDA: `omega` fixed at 1 (use with `K2 = 1`).
    pub fn lda() -> Self {
        Self {
            fix_omega: Some(1.0),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    pub clamped_documents: usize,
    pub alpha_backtrack_failures: usize,
    pub infeasible_msteps: usize,
    pub line_search_failures: usize,
    pub kept_input_msteps: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: FiniteM3Model,
    /// Corpus bound after each E-step, including a final E-step after the
    /// last M-step.
    pub elbo_trace: Vec<f64>,
    pub penalties: Penalties,
    pub diagnostics: FitDiagnostics,
    /// Index of the restart that was kept.
    pub restart: usize,
}

/// Variational EM on `docs`. Each E-step resumes from the previous
/// variational parameters, so the corpus bound is non-decreasing.
///
/// With `restarts > 1`, that many random starts run through the warm-up
/// (at least one iteration) and only the one with the highest bound
/// continues. Restart `r` draws its topics from stream `r` of `seed`, so a
/// single restart is the plain fit.
pub fn fit(docs: &[Document], vocab_size: usize, k1: usize, k2: usize, cfg: &FitConfig) -> Result<FitResult> {
    if docs.is_empty() {
        return Err(M3Error::Empty("corpus"));
    }
    if let Some(w) = cfg.fix_omega {
        if !(0.0..=1.0).contains(&w) {
            return Err(M3Error::InvalidParameter(format!("omega must lie in [0, 1], got {w}")));
        }
    }
    let bags: Vec<Bag> = docs.iter().map(Bag::new).collect();
    let mut runs = (0..cfg.restarts.max(1))
        .map(|r| {
            let mut rng = stream_rng(cfg.seed, r as u64);
            let model = FiniteM3Model::random(k1, k2, vocab_size, cfg.fix_omega.unwrap_or(0.5), &mut rng)?;
            EmRun::new(model, docs, &bags, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let screen = cfg.warmup.max(1).min(cfg.em_iters);
    if runs.len() > 1 {
        for run in &mut runs {
            run.advance(screen)?;
        }
    }
    let best = runs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.latest().total_cmp(&b.1.latest()))
        .map_or(0, |(k, _)| k);
    let mut run = runs.swap_remove(best);
    run.advance(cfg.em_iters - run.iterations)?;
    let mut out = run.finish();
    out.restart = best;
    Ok(out)
}

/// Variational EM starting from `model` instead of a random draw; `alpha`
/// and `omega` are taken from it as well (a fixed `omega` in `cfg` wins).
pub fn fit_from(model: FiniteM3Model, docs: &[Document], cfg: &FitConfig) -> Result<FitResult> {
    if docs.is_empty() {
        return Err(M3Error::Empty("corpus"));
    }
    let bags: Vec<Bag> = docs.iter().map(Bag::new).collect();
    let mut run = EmRun::new(model, docs, &bags, cfg)?;
    run.advance(cfg.em_iters)?;
    Ok(run.finish())
}

/// One EM chain that can be advanced a few iterations at a time.
struct EmRun<'a> {
    cfg: &'a FitConfig,
    bags: &'a [Bag],
    model: FiniteM3Model,
    work: Vec<BagState>,
    penalties: Penalties,
    diagnostics: FitDiagnostics,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

impl<'a> EmRun<'a> {
    fn new(mut model: FiniteM3Model, docs: &[Document], bags: &'a [Bag], cfg: &'a FitConfig) -> Result<Self> {
        if let Some(w) = cfg.fix_omega {
            model.omega = w;
        }
        for d in docs {
            model.check_doc(d)?;
        }
        let work = bags.iter().map(|b| BagState::fresh(&model, b)).collect();
        let penalties = Penalties::new(model.k1(), model.k2(), cfg.mstep.schedule.init);
        Ok(Self {
            cfg,
            bags,
            model,
            work,
            penalties,
            diagnostics: FitDiagnostics::default(),
            trace: Vec::with_capacity(cfg.em_iters + 1),
            iterations: 0,
            converged: false,
        })
    }

    fn latest(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    fn e_step(&mut self) -> f64 {
        let (model, bags, cfg) = (&self.model, self.bags, self.cfg);
        let mut jobs: Vec<(usize, &mut BagState)> = self.work.iter_mut().enumerate().collect();
        let out = par::map_mut(&mut jobs, |(k, st)| {
            let (t, clamped) = bag_estep(model, &bags[*k], st, cfg.e_iters, cfg.e_tol);
            (*t.last().expect("non-empty"), clamped)
        });
        self.diagnostics.clamped_documents += out.iter().filter(|o| o.1).count();
        out.iter().map(|o| o.0).sum()
    }

    /// Runs up to `n` more EM iterations, stopping early on convergence.
    fn advance(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.converged {
                break;
            }
            self.iterate()?;
        }
        Ok(())
    }

    fn iterate(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let (k1, k2, vocab_size) = (self.model.k1(), self.model.k2(), self.model.vocab_size());
        let bound = self.e_step();
        let converged = self
            .trace
            .last()
            .is_some_and(|&prev: &f64| cfg.em_tol > 0.0 && (bound - prev).abs() <= cfg.em_tol * prev.abs());
        self.trace.push(bound);
        if converged {
            self.converged = true;
            return Ok(());
        }
        self.iterations += 1;

        let warming = self.iterations <= cfg.warmup;
        if !cfg.fix_alpha && !warming {
            let g1: Vec<Vec<f64>> = self.work.iter().map(|s| s.gamma1.clone()).collect();
            let g2: Vec<Vec<f64>> = self.work.iter().map(|s| s.gamma2.clone()).collect();
            let u1 = update_alpha(&g1, k1, self.model.alpha1)?;
            let u2 = update_alpha(&g2, k2, self.model.alpha2)?;
            self.diagnostics.alpha_backtrack_failures += usize::from(u1.backtrack_failed) + usize::from(u2.backtrack_failed);
            self.model.alpha1 = u1.alpha;
            self.model.alpha2 = u2.alpha;
        }

        let stats = PairStats::from_bags(k1, k2, vocab_size, self.bags, &self.work);
        let out = update_theta_omega(
            &stats,
            &self.model.theta1,
            &self.model.theta2,
            self.model.omega,
            cfg.fix_omega.is_some() || warming,
            &self.penalties,
            &cfg.mstep,
        )?;
        self.diagnostics.infeasible_msteps += usize::from(!out.feasible);
        self.diagnostics.line_search_failures += out.line_search_failures;
        self.diagnostics.kept_input_msteps += usize::from(out.kept_input);
        self.penalties = out.penalties;
        self.model.theta1 = out.theta1;
        self.model.theta2 = out.theta2;
        self.model.omega = out.omega;
        Ok(())
    }

    /// Closes the trace with an E-step under the last M-step's parameters.
    fn finish(mut self) -> FitResult {
        if !self.converged {
            let bound = self.e_step();
            self.trace.push(bound);
        }
        FitResult {
            model: self.model,
            elbo_trace: self.trace,
            penalties: self.penalties,
            diagnostics: self.diagnostics,
            restart: 0,
        }
    }
}

/// Per-document bounds under a frozen model (parallel over documents).
pub fn document_bounds(model: &FiniteM3Model, docs: &[Document]) -> Result<Vec<f64>> {
    par::map(docs, |d| infer_document(model, d).map(|r| r.elbo))
        .into_iter()
        .collect()
}

/// Held-out perplexity using the per-document bound as the log-likelihood.
/// Empty documents are skipped.
pub fn bound_perplexity(model: &FiniteM3Model, docs: &[Document]) -> Result<f64> {
    let kept: Vec<Document> = docs.iter().filter(|d| !d.is_empty()).cloned().collect();
    let bounds = document_bounds(model, &kept)?;
    let lengths: Vec<usize> = kept.iter().map(Document::len).collect();
    crate::eval::perplexity(&bounds, &lengths)
}

//! Evaluation metrics: held-out perplexity, normalized mutual information,
//! co-clustering frequency matrices and predictive density grids.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{M3Error, Result};
use crate::infinite::{predictive_density, PosteriorMixture};
use crate::par;

/// `exp(-sum log p(w_d) / sum N_d)`.
pub fn perplexity(log_likelihoods: &[f64], lengths: &[usize]) -> Result<f64> {
    if log_likelihoods.is_empty() {
        return Err(M3Error::Empty("documents"));
    }
    if log_likelihoods.len() != lengths.len() {
        return Err(M3Error::Dimension {
            expected: log_likelihoods.len(),
            got: lengths.len(),
        });
    }
    if lengths.iter().any(|&n| n == 0) {
        return Err(M3Error::InvalidParameter("document lengths must be positive".into()));
    }
    let total: f64 = log_likelihoods.iter().sum();
    let tokens: usize = lengths.iter().sum();
    Ok((-total / tokens as f64).exp())
}

/// Sums in ascending order so the result does not depend on label order.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    sorted_sum(
        counts
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .collect(),
    )
}

/// Normalized mutual information `MI(A; B) / sqrt(H(A) H(B))`.
///
/// Two single-cluster labelings score 1; a single-cluster labeling against a
/// multi-cluster one scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(M3Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(M3Error::Empty("labelings"));
    }
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ca.len() == 1 && cb.len() == 1 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi = sorted_sum(
        joint
            .iter()
            .map(|(&(x, y), &c)| {
                let pxy = c as f64 / n;
                let px = ca[&x] as f64 / n;
                let py = cb[&y] as f64 / n;
                pxy * (pxy / (px * py)).ln()
            })
            .collect(),
    );
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Pairwise co-clustering frequencies across runs, with points reordered so
/// that ground-truth classes are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct CoClusterMatrix {
    /// `order[k]` is the original index of the point in row/column `k`.
    pub order: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

impl CoClusterMatrix {
    /// Row-major CSV with a `# rows,cols` header line.
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.matrix)
    }
}

pub(crate) fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = format!("# {},{}\n", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn co_cluster_matrix(runs: &[Vec<usize>], ground_truth: &[usize]) -> Result<CoClusterMatrix> {
    if runs.is_empty() {
        return Err(M3Error::Empty("runs"));
    }
    let n = ground_truth.len();
    if let Some(r) = runs.iter().find(|r| r.len() != n) {
        return Err(M3Error::Dimension {
            expected: n,
            got: r.len(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ground_truth[i]);
    let scale = 1.0 / runs.len() as f64;
    let mut matrix = DMatrix::zeros(n, n);
    for run in runs {
        for (r, &i) in order.iter().enumerate() {
            for (c, &j) in order.iter().enumerate() {
                if run[i] == run[j] {
                    matrix[(r, c)] += scale;
                }
            }
        }
    }
    Ok(CoClusterMatrix { order, matrix })
}

/// Predictive density on a regular 1-D or 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    /// Grid coordinates per axis (one or two axes).
    pub axes: Vec<Vec<f64>>,
    /// Densities; for 2-D grids row-major with the first axis slowest.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    fn spacing(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64
    }

    /// Riemann sum of the density over the grid.
    pub fn integral(&self) -> f64 {
        let cell: f64 = (0..self.dims()).map(|k| self.spacing(k)).product();
        self.values.iter().sum::<f64>() * cell
    }

    /// Coordinates of the highest grid value.
    pub fn argmax(&self) -> Vec<f64> {
        let (best, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.coords(best)
    }

    fn coords(&self, flat: usize) -> Vec<f64> {
        match self.dims() {
            1 => vec![self.axes[0][flat]],
            _ => {
                let ny = self.axes[1].len();
                vec![self.axes[0][flat / ny], self.axes[1][flat % ny]]
            }
        }
    }

    /// Number of strict local maxima (2 neighbours in 1-D, 8 in 2-D) whose
    /// value exceeds `rel_threshold` times the global maximum.
    pub fn count_peaks(&self, rel_threshold: f64) -> usize {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let floor = rel_threshold * max;
        match self.dims() {
            1 => {
                let v = &self.values;
                (0..v.len())
                    .filter(|&i| {
                        v[i] > floor
                            && (i == 0 || v[i] > v[i - 1])
                            && (i + 1 == v.len() || v[i] > v[i + 1])
                    })
                    .count()
            }
            _ => {
                let (nx, ny) = (self.axes[0].len(), self.axes[1].len());
                let at = |i: usize, j: usize| self.values[i * ny + j];
                let mut peaks = 0;
                for i in 0..nx {
                    for j in 0..ny {
                        let v = at(i, j);
                        if v <= floor {
                            continue;
                        }
                        let mut is_peak = true;
                        for di in -1i64..=1 {
                            for dj in -1i64..=1 {
                                if di == 0 && dj == 0 {
                                    continue;
                                }
                                let (a, b) = (i as i64 + di, j as i64 + dj);
                                if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
                                    continue;
                                }
                                if at(a as usize, b as usize) >= v {
                                    is_peak = false;
                                }
                            }
                        }
                        if is_peak {
                            peaks += 1;
                        }
                    }
                }
                peaks
            }
        }
    }

    /// `x[,y],density` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.dims() == 1 {
            out.push_str("x,density\n");
        } else {
            out.push_str("x,y,density\n");
        }
        for (k, v) in self.values.iter().enumerate() {
            let c = self.coords(k);
            let coords: Vec<String> = c.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{},{}", coords.join(","), v);
        }
        out
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Evaluates the posterior predictive density of `samples` on a regular grid
/// spanning `bounds` (one `(lo, hi)` pair per axis) with `resolution` points
/// per axis.
pub fn density_grid<S: PosteriorMixture + Sync>(
    samples: &[S],
    bounds: &[(f64, f64)],
    resolution: usize,
) -> Result<DensityGrid> {
    if samples.is_empty() {
        return Err(M3Error::Empty("posterior samples"));
    }
    if resolution < 2 {
        return Err(M3Error::InvalidParameter("grid resolution must be at least 2 per axis".into()));
    }
    let dim = samples[0].means().first().map_or(0, |m| m.len());
    if !(bounds.len() == 1 || bounds.len() == 2) || bounds.len() != dim {
        return Err(M3Error::Dimension {
            expected: dim,
            got: bounds.len(),
        });
    }
    let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| linspace(lo, hi, resolution)).collect();
    let points: Vec<DVector<f64>> = if dim == 1 {
        axes[0].iter().map(|&x| DVector::from_element(1, x)).collect()
    } else {
        axes[0]
            .iter()
            .flat_map(|&x| axes[1].iter().map(move |&y| DVector::from_vec(vec![x, y])))
            .collect()
    };
    let values = par::map(&points, |p| predictive_density(samples, p).expect("samples nonempty"));
    Ok(DensityGrid { axes, values })
}

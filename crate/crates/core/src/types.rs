//! Membership, co-occurrence count, and coupling-weight types shared by the
//! infinite, finite, and hybrid models.

use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};

/// Two-dimensional membership of one data point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment2D {
    pub z1: usize,
    pub z2: usize,
}

impl Assignment2D {
    pub fn new(z1: usize, z2: usize) -> Self {
        Self { z1, z2 }
    }
}

/// Index changes caused by a decrement that emptied a row and/or column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Relabel {
    pub removed_row: Option<usize>,
    pub removed_col: Option<usize>,
}

impl Relabel {
    pub fn is_identity(&self) -> bool {
        self.removed_row.is_none() && self.removed_col.is_none()
    }

    /// New index of an old row, `None` for the removed row itself.
    pub fn map_row(&self, c: usize) -> Option<usize> {
        shift(self.removed_row, c)
    }

    pub fn map_col(&self, d: usize) -> Option<usize> {
        shift(self.removed_col, d)
    }

    /// Rewrites stored assignments after compaction. Assignments pointing at a
    /// removed index are left untouched; callers only hold such an assignment
    /// for the point being moved.
    pub fn apply(&self, assignments: &mut [Assignment2D]) {
        if self.is_identity() {
            return;
        }
        for a in assignments.iter_mut() {
            if let Some(c) = self.map_row(a.z1) {
                a.z1 = c;
            }
            if let Some(d) = self.map_col(a.z2) {
                a.z2 = d;
            }
        }
    }
}

fn shift(removed: Option<usize>, i: usize) -> Option<usize> {
    match removed {
        Some(r) if i == r => None,
        Some(r) if i > r => Some(i - 1),
        _ => Some(i),
    }
}

/// Dense K1 x K2 co-occurrence table `n_cd` with cached marginals.
///
/// Rows (dimension 1) are always compacted when they empty. Columns are
/// compacted too unless the table was built with [`JointCounts::with_fixed_cols`],
/// which the hybrid model uses for its finite dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointCounts {
    counts: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    total: usize,
    fixed_cols: bool,
}

impl Default for JointCounts {
    fn default() -> Self {
        Self::new()
    }
}

impl JointCounts {
    pub fn new() -> Self {
        Self {
            counts: Vec::new(),
            rows: Vec::new(),
            cols: Vec::new(),
            total: 0,
            fixed_cols: false,
        }
    }

    pub fn with_fixed_cols(k2: usize) -> Self {
        Self {
            counts: Vec::new(),
            rows: Vec::new(),
            cols: vec![0; k2],
            total: 0,
            fixed_cols: true,
        }
    }

    /// Histogram of a list of assignments. Labels must be dense (every row and
    /// column index below the maximum is used) unless `fixed_cols` is given.
    pub fn from_assignments(assignments: &[Assignment2D], fixed_cols: Option<usize>) -> Result<Self> {
        let mut t = match fixed_cols {
            Some(k2) => Self::with_fixed_cols(k2),
            None => Self::new(),
        };
        let k1 = assignments.iter().map(|a| a.z1 + 1).max().unwrap_or(0);
        let k2 = match fixed_cols {
            Some(k2) => k2,
            None => assignments.iter().map(|a| a.z2 + 1).max().unwrap_or(0),
        };
        t.counts = vec![vec![0; k2]; k1];
        t.rows = vec![0; k1];
        t.cols = vec![0; k2];
        for a in assignments {
            if a.z2 >= k2 {
                return Err(M3Error::Bounds {
                    row: a.z1,
                    col: a.z2,
                    rows: k1,
                    cols: k2,
                });
            }
            t.counts[a.z1][a.z2] += 1;
            t.rows[a.z1] += 1;
            t.cols[a.z2] += 1;
            t.total += 1;
        }
        if t.rows.iter().any(|&r| r == 0) || (!t.fixed_cols && t.cols.iter().any(|&c| c == 0)) {
            return Err(M3Error::InvalidParameter(
                "assignment labels are not dense".into(),
            ));
        }
        Ok(t)
    }

    pub fn k1(&self) -> usize {
        self.rows.len()
    }

    pub fn k2(&self) -> usize {
        self.cols.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, c: usize, d: usize) -> usize {
        self.counts[c][d]
    }

    pub fn row_marginals(&self) -> &[usize] {
        &self.rows
    }

    pub fn col_marginals(&self) -> &[usize] {
        &self.cols
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn has_fixed_cols(&self) -> bool {
        self.fixed_cols
    }

    /// Adds one point to cell `(c, d)`. `c == k1` (and `d == k2` for dynamic
    /// columns) opens a new component.
    pub fn increment(&mut self, c: usize, d: usize) -> Result<()> {
        let (k1, k2) = (self.k1(), self.k2());
        let col_limit = if self.fixed_cols { k2 } else { k2 + 1 };
        if c > k1 || d >= col_limit {
            return Err(M3Error::Bounds {
                row: c,
                col: d,
                rows: k1,
                cols: k2,
            });
        }
        if c == k1 {
            self.counts.push(vec![0; k2]);
            self.rows.push(0);
        }
        if d == k2 && !self.fixed_cols {
            for row in &mut self.counts {
                row.push(0);
            }
            self.cols.push(0);
        }
        self.counts[c][d] += 1;
        self.rows[c] += 1;
        self.cols[d] += 1;
        self.total += 1;
        Ok(())
    }

    /// Removes one point from `(c, d)`, dropping any row (or dynamic column)
    /// whose marginal reaches zero.
    pub fn decrement(&mut self, c: usize, d: usize) -> Result<Relabel> {
        if c >= self.k1() || d >= self.k2() {
            return Err(M3Error::Bounds {
                row: c,
                col: d,
                rows: self.k1(),
                cols: self.k2(),
            });
        }
        if self.counts[c][d] == 0 {
            return Err(M3Error::EmptyCell(c, d));
        }
        self.counts[c][d] -= 1;
        self.rows[c] -= 1;
        self.cols[d] -= 1;
        self.total -= 1;
        let mut relabel = Relabel::default();
        if self.rows[c] == 0 {
            self.counts.remove(c);
            self.rows.remove(c);
            relabel.removed_row = Some(c);
        }
        if self.cols[d] == 0 && !self.fixed_cols {
            for row in &mut self.counts {
                row.remove(d);
            }
            self.cols.remove(d);
            relabel.removed_col = Some(d);
        }
        Ok(relabel)
    }

    /// Checks that the cached marginals agree with the cell table.
    pub fn is_consistent(&self) -> bool {
        let k2 = self.k2();
        if self.counts.len() != self.rows.len() || self.counts.iter().any(|r| r.len() != k2) {
            return false;
        }
        let rows_ok = self
            .counts
            .iter()
            .zip(&self.rows)
            .all(|(r, &m)| r.iter().sum::<usize>() == m);
        let cols_ok = (0..k2).all(|d| self.counts.iter().map(|r| r[d]).sum::<usize>() == self.cols[d]);
        rows_ok && cols_ok && self.rows.iter().sum::<usize>() == self.total
    }
}

/// Sharing weights `(omega, omega1, omega2)` of the coupled CRP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct ShareWeights {
    omega: f64,
    omega1: f64,
    omega2: f64,
}

impl ShareWeights {
    pub fn new(omega: f64, omega1: f64, omega2: f64) -> Result<Self> {
        let in_unit = |w: f64| (0.0..=1.0).contains(&w);
        if !(in_unit(omega) && in_unit(omega1) && in_unit(omega2))
            || (omega + omega1 + omega2 - 1.0).abs() > 1e-12
        {
            return Err(M3Error::ShareWeights(omega, omega1, omega2));
        }
        Ok(Self {
            omega,
            omega1,
            omega2,
        })
    }

    /// Fully coupled weights (1, 0, 0): the sampler collapses to a single DPMM.
    pub fn coupled() -> Self {
        Self {
            omega: 1.0,
            omega1: 0.0,
            omega2: 0.0,
        }
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn omega1(&self) -> f64 {
        self.omega1
    }

    pub fn omega2(&self) -> f64 {
        self.omega2
    }
}

impl TryFrom<[f64; 3]> for ShareWeights {
    type Error = M3Error;

    fn try_from(w: [f64; 3]) -> Result<Self> {
        Self::new(w[0], w[1], w[2])
    }
}

impl From<ShareWeights> for [f64; 3] {
    fn from(w: ShareWeights) -> Self {
        [w.omega, w.omega1, w.omega2]
    }
}

/// DP concentration parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Concentration(f64);

impl Concentration {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(Self(alpha))
        } else {
            Err(M3Error::InvalidParameter(format!(
                "concentration must be positive, got {alpha}"
            )))
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Concentration {
    type Error = M3Error;

    fn try_from(a: f64) -> Result<Self> {
        Self::new(a)
    }
}

impl From<Concentration> for f64 {
    fn from(a: Concentration) -> Self {
        a.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn increment_single_cell() {
        let mut t = JointCounts::new();
        t.increment(0, 0).unwrap();
        assert_eq!(t.get(0, 0), 1);
        assert_eq!(t.total(), 1);
    }

    #[test]
    fn increment_grows_column() {
        let mut t = JointCounts::new();
        t.increment(0, 0).unwrap();
        t.increment(0, 0).unwrap();
        t.increment(0, 1).unwrap();
        assert_eq!((t.k1(), t.k2()), (1, 2));
        assert_eq!(t.get(0, 1), 1);
        assert_eq!(t.col_marginals(), &[2, 1]);
    }

    #[test]
    fn increment_past_end_errors() {
        let mut t = JointCounts::new();
        assert!(matches!(t.increment(1, 0), Err(M3Error::Bounds { .. })));
        assert!(matches!(t.increment(0, 2), Err(M3Error::Bounds { .. })));
    }

    #[test]
    fn increment_then_decrement_restores() {
        let mut t = JointCounts::new();
        for (c, d) in [(0, 0), (0, 1), (1, 1)] {
            t.increment(c, d).unwrap();
        }
        let before = t.clone();
        t.increment(1, 0).unwrap();
        let r = t.decrement(1, 0).unwrap();
        assert!(r.is_identity());
        assert_eq!(t, before);
    }

    #[test]
    fn decrement_to_empty() {
        let mut t = JointCounts::new();
        t.increment(0, 0).unwrap();
        let r = t.decrement(0, 0).unwrap();
        assert_eq!((t.k1(), t.k2(), t.total()), (0, 0, 0));
        assert_eq!(r.removed_row, Some(0));
        assert_eq!(r.removed_col, Some(0));
    }

    #[test]
    fn decrement_compacts_column() {
        let mut t = JointCounts::new();
        t.increment(0, 0).unwrap();
        t.increment(0, 1).unwrap();
        t.increment(0, 1).unwrap();
        let r = t.decrement(0, 0).unwrap();
        assert_eq!(t.rows(), &[vec![2]]);
        assert_eq!(r.removed_row, None);
        assert_eq!(r.map_col(1), Some(0));
        assert_eq!(r.map_col(0), None);
    }

    #[test]
    fn decrement_zero_cell_errors() {
        let mut t = JointCounts::new();
        t.increment(0, 0).unwrap();
        t.increment(1, 1).unwrap();
        assert!(matches!(t.decrement(0, 1), Err(M3Error::EmptyCell(0, 1))));
    }

    #[test]
    fn fixed_columns_never_compact() {
        let mut t = JointCounts::with_fixed_cols(3);
        t.increment(0, 2).unwrap();
        assert!(t.increment(0, 3).is_err());
        let r = t.decrement(0, 2).unwrap();
        assert_eq!(r.removed_col, None);
        assert_eq!((t.k1(), t.k2()), (0, 3));
    }

    #[test]
    fn share_weights_validation() {
        assert!(ShareWeights::new(0.5, 0.25, 0.25).is_ok());
        assert!(ShareWeights::new(0.5, 0.25, 0.2).is_err());
        assert!(ShareWeights::new(1.2, -0.1, -0.1).is_err());
        let w: ShareWeights = serde_json::from_str("[0.2,0.3,0.5]").unwrap();
        assert_eq!(w.omega1(), 0.3);
        assert!(serde_json::from_str::<ShareWeights>("[0.2,0.3,0.6]").is_err());
    }

    #[test]
    fn concentration_must_be_positive() {
        assert!(Concentration::new(0.0).is_err());
        assert!(Concentration::new(f64::NAN).is_err());
        assert_eq!(Concentration::new(2.0).unwrap().value(), 2.0);
    }

    proptest! {
        #[test]
        fn marginals_stay_consistent(ops in proptest::collection::vec((0usize..6, 0usize..6, any::<bool>()), 1..200)) {
            let mut t = JointCounts::new();
            let mut points: Vec<Assignment2D> = Vec::new();
            for (c, d, add) in ops {
                if add || points.is_empty() {
                    let c = c.min(t.k1());
                    let d = d.min(t.k2());
                    t.increment(c, d).unwrap();
                    points.push(Assignment2D::new(c, d));
                } else {
                    let idx = (c * 7 + d) % points.len();
                    let a = points.swap_remove(idx);
                    let r = t.decrement(a.z1, a.z2).unwrap();
                    r.apply(&mut points);
                }
                prop_assert!(t.is_consistent());
                prop_assert_eq!(&t, &JointCounts::from_assignments(&points, None).unwrap());
            }
        }
    }
}

//! Signed adjacency matrices over {-1, 0, +1}: project–freelancer relations
//! from labelled interactions, transitive freelancer–freelancer relations via
//! shared project pivots, and category-based weak negatives.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::{Interaction, Label};

/// Errors from adjacency construction.
#[derive(Debug, Error)]
pub enum AdjacencyError {
    #[error("freelancer \"{0}\" has no category")]
    MissingCategory(String),
    #[error("expected a square freelancer matrix with matching id lists, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("expected {expected} entries for a {rows}×{cols} matrix, got {got}")]
    WrongEntryCount { expected: usize, rows: usize, cols: usize, got: usize },
    #[error("adjacency entries must lie in -1..=1, got {0}")]
    EntryOutOfRange(i8),
}

/// A signed relation matrix between two ordered id lists. Entries are always
/// in {-1, 0, +1}; freelancer–freelancer matrices are strictly
/// upper-triangular.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedAdjacency {
    rows: Vec<String>,
    cols: Vec<String>,
    values: Vec<i8>,
}

impl SignedAdjacency {
    /// All-zero matrix over the given id lists.
    pub fn zero(rows: Vec<String>, cols: Vec<String>) -> Self {
        let values = vec![0i8; rows.len() * cols.len()];
        SignedAdjacency { rows, cols, values }
    }

    /// Matrix from explicit row-major entries, validated to lie in -1..=1.
    pub fn from_entries(rows: Vec<String>, cols: Vec<String>, values: Vec<i8>) -> Result<Self, AdjacencyError> {
        let expected = rows.len() * cols.len();
        if values.len() != expected {
            return Err(AdjacencyError::WrongEntryCount {
                expected,
                rows: rows.len(),
                cols: cols.len(),
                got: values.len(),
            });
        }
        if let Some(&bad) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(AdjacencyError::EntryOutOfRange(bad));
        }
        Ok(SignedAdjacency { rows, cols, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn row_ids(&self) -> &[String] {
        &self.rows
    }

    pub fn col_ids(&self) -> &[String] {
        &self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.values[i * self.cols.len() + j]
    }

    fn set(&mut self, i: usize, j: usize, v: i8) {
        debug_assert!((-1..=1).contains(&v));
        self.values[i * self.cols.len() + j] = v;
    }

    /// Number of strictly positive entries.
    pub fn count_positives(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0).count()
    }

    /// Number of strictly negative entries.
    pub fn count_negatives(&self) -> usize {
        self.values.iter().filter(|&&v| v < 0).count()
    }

    /// Number of (anchor, positive, negative) index triples the matrix
    /// licenses: for each row, positives × negatives.
    pub fn count_valid_triplets(&self) -> usize {
        let (n, m) = self.shape();
        let mut total = 0;
        for i in 0..n {
            let pos = (0..m).filter(|&j| self.get(i, j) > 0).count();
            let neg = (0..m).filter(|&j| self.get(i, j) < 0).count();
            total += pos * neg;
        }
        total
    }

    /// True if rows and cols are the same id list and only entries strictly
    /// above the diagonal are nonzero.
    pub fn is_strictly_upper_triangular(&self) -> bool {
        let (n, m) = self.shape();
        if n != m || self.rows != self.cols {
            return false;
        }
        for i in 0..n {
            for j in 0..=i {
                if self.get(i, j) != 0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Reflects a square upper-triangular matrix into a full symmetric one with
/// a zero diagonal, so an anchor on either side of a pair sees the relation.
pub fn mirror_upper(a: &SignedAdjacency) -> Result<SignedAdjacency, AdjacencyError> {
    let (n, m) = a.shape();
    if n != m || a.rows != a.cols {
        return Err(AdjacencyError::NotSquare { rows: n, cols: m });
    }
    let mut out = a.clone();
    for i in 0..n {
        for j in i + 1..n {
            out.set(j, i, a.get(i, j));
        }
    }
    Ok(out)
}

/// Builds the project×freelancer matrix: +1 for a positive interaction, −1
/// for a negative one, 0 otherwise. Interactions mentioning ids outside the
/// given lists are ignored, so batch-level sub-matrices can be built from the
/// same history.
pub fn build_interaction_adjacency(
    interactions: &[Interaction],
    projects: &[String],
    freelancers: &[String],
) -> SignedAdjacency {
    let row_index: BTreeMap<&str, usize> = projects.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let col_index: BTreeMap<&str, usize> = freelancers.iter().enumerate().map(|(j, f)| (f.as_str(), j)).collect();
    let mut a = SignedAdjacency::zero(projects.to_vec(), freelancers.to_vec());
    for it in interactions {
        let (Some(&i), Some(&j)) = (row_index.get(it.project_id.as_str()), col_index.get(it.freelancer_id.as_str()))
        else {
            continue;
        };
        let v = match it.label {
            Label::Positive => 1,
            Label::Negative => -1,
        };
        a.set(i, j, v);
    }
    a
}

/// Transitive freelancer–freelancer adjacency through project pivots.
///
/// With `G = AᵀA` (Gram over pivots) and `N = (A<0)ᵀ(A<0)` counting shared
/// negatives, the result holds `sign(G[f,f′])` strictly above the diagonal,
/// forced to 0 wherever `N[f,f′] > 0`: two freelancers rejected by the same
/// project never become related through it.
pub fn transitive_freelancer_adjacency(a: &SignedAdjacency) -> SignedAdjacency {
    let (n_projects, n_freelancers) = a.shape();
    let mut out = SignedAdjacency::zero(a.cols.clone(), a.cols.clone());
    for f in 0..n_freelancers {
        for f2 in f + 1..n_freelancers {
            let mut gram = 0i64;
            let mut shared_negative = false;
            for p in 0..n_projects {
                let x = a.get(p, f);
                let y = a.get(p, f2);
                if x == -1 && y == -1 {
                    shared_negative = true;
                }
                gram += x as i64 * y as i64;
            }
            let v = if shared_negative { 0 } else { gram.signum() as i8 };
            out.set(f, f2, v);
        }
    }
    out
}

/// Adds weak negatives to an upper-triangular freelancer matrix: every pair
/// with differing categories gets −1 added to its entry, clamped back to
/// {-1, 0, +1}. Same-category pairs are untouched, so the shared-negative
/// zeros coming out of [`transitive_freelancer_adjacency`] survive.
pub fn add_weak_negatives(
    a_ff: &SignedAdjacency,
    categories: &BTreeMap<String, String>,
) -> Result<SignedAdjacency, AdjacencyError> {
    let (n, m) = a_ff.shape();
    if n != m || a_ff.rows != a_ff.cols {
        return Err(AdjacencyError::NotSquare { rows: n, cols: m });
    }
    let mut cat = Vec::with_capacity(n);
    for id in &a_ff.rows {
        match categories.get(id) {
            Some(c) if !c.is_empty() => cat.push(c.as_str()),
            _ => return Err(AdjacencyError::MissingCategory(id.clone())),
        }
    }
    let mut out = a_ff.clone();
    for i in 0..n {
        for j in i + 1..n {
            if cat[i] != cat[j] {
                let v = (a_ff.get(i, j) as i16 - 1).clamp(-1, 1) as i8;
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

//! Sign synchronization within one row class: fix the ±1 signs of the
//! per-pair rank-1 blocks so the stacked block matrix is rank 1, then factor
//! out the row vectors.
//!
//! Three steps per class:
//! 1. robust self products v_i^T v_i by averaging B_ij B_ij^T over j (the
//!    pair signs square away) and projecting to the nearest unit-trace rank-1;
//! 2. per anchor n, flip each block's sign to satisfy the rank-1 cycle
//!    condition through n, factor the resulting matrix, and keep the N row
//!    estimates;
//! 3. compare row estimates across anchors via dot products at shared
//!    indices, build a signed pair matrix whose leading eigenvector gives the
//!    per-pair correction signs, apply them, and factor the final matrix.
//!
//! The output rows carry one unresolved ±1 per image; those signs combine
//! across the three classes into the per-image symmetry factor fixed at
//! assembly.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;

use crate::eigen::{power_iteration, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::pairs::{pair_count, pairs, PairVec};
use crate::{Error, Result};

/// Dot products below this magnitude give a 0 entry in the sign matrix
/// instead of an unreliable ±1.
const DEGENERATE_DOT: f64 = 1e-6;

/// Block (i, j) of the class for arbitrary index order.
fn block(
    set: &PairVec<Matrix3<f64>>,
    self_products: &[Matrix3<f64>],
    i: usize,
    j: usize,
) -> Matrix3<f64> {
    use std::cmp::Ordering;
    match i.cmp(&j) {
        Ordering::Less => *set.get(i, j),
        Ordering::Greater => set.get(j, i).transpose(),
        Ordering::Equal => self_products[i],
    }
}

/// Robust estimates of v_i^T v_i: averaging the squared blocks over the
/// other index removes the unknown pair signs; the average is then projected
/// to its dominant eigendirection and normalized to unit trace.
pub fn estimate_self_products(set: &PairVec<Matrix3<f64>>) -> Vec<Matrix3<f64>> {
    let n = set.n();
    (0..n)
        .map(|i| {
            let mut acc = Matrix3::zeros();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let b = if i < j {
                    *set.get(i, j)
                } else {
                    set.get(j, i).transpose()
                };
                acc += b * b.transpose();
            }
            acc /= (n - 1) as f64;
            // dominant eigendirection of a symmetric PSD 3x3
            let m = DMatrix::from_fn(3, 3, |r, c| acc[(r, c)]);
            let (_, v) = power_iteration(&m, DEFAULT_TOL, DEFAULT_MAX_ITERS)
                .expect("3x3 PSD power iteration converges");
            let w = Vector3::new(v[0], v[1], v[2]);
            w * w.transpose()
        })
        .collect()
}

/// The anchored block matrix: every (i, j) block's sign is flipped when the
/// product of the (i, n) and (n, j) blocks disagrees with it, making the
/// result rank 1 whenever the inputs are clean. Diagonal blocks are the self
/// products.
pub fn build_hn(
    set: &PairVec<Matrix3<f64>>,
    self_products: &[Matrix3<f64>],
    n_anchor: usize,
) -> DMatrix<f64> {
    let n = set.n();
    let mut h = DMatrix::zeros(3 * n, 3 * n);
    for (i, j) in pairs(n) {
        let through =
            block(set, self_products, i, n_anchor) * block(set, self_products, n_anchor, j);
        let direct = *set.get(i, j);
        let flip = (through - direct).norm() > (through + direct).norm();
        let b = if flip { -direct } else { direct };
        for r in 0..3 {
            for c in 0..3 {
                h[(3 * i + r, 3 * j + c)] = b[(r, c)];
                h[(3 * j + c, 3 * i + r)] = b[(r, c)];
            }
        }
    }
    for i in 0..n {
        for r in 0..3 {
            for c in 0..3 {
                h[(3 * i + r, 3 * i + c)] = self_products[i][(r, c)];
            }
        }
    }
    h
}

fn factor_rows(h: &DMatrix<f64>, n: usize) -> Result<Vec<Vector3<f64>>> {
    let (_, v) = power_iteration(h, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    Ok((0..n)
        .map(|i| {
            let b = Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
            let norm = b.norm();
            if norm == 0.0 {
                b
            } else {
                b / norm
            }
        })
        .collect())
}

/// Signed pair-comparison matrix built from the anchored row estimates.
#[derive(Clone, Debug)]
pub struct SignMatrixS {
    pub n: usize,
    pub mat: DMatrix<f64>,
    /// Number of entries zeroed because the dot product was too small.
    pub degenerate_dots: usize,
}

/// Entry ((i,j),(k,l)) compares the shared-index row estimate from the two
/// non-shared anchors; its sign is the product of the two pair correction
/// signs.
pub fn build_s(row_estimates: &[Vec<Vector3<f64>>]) -> SignMatrixS {
    let n = row_estimates.len();
    let c = pair_count(n);
    let mut mat = DMatrix::zeros(c, c);
    let mut degenerate = 0usize;
    let plist: Vec<(usize, usize)> = pairs(n).collect();
    for a in 0..c {
        let (i, j) = plist[a];
        for b in (a + 1)..c {
            let (k, l) = plist[b];
            let shared = if k == i || k == j {
                Some(k)
            } else if l == i || l == j {
                Some(l)
            } else {
                None
            };
            let Some(sh) = shared else { continue };
            // skip pairs sharing both indices (identical pairs are a == b)
            let other_1 = if i == sh { j } else { i };
            let other_2 = if k == sh { l } else { k };
            if other_1 == other_2 {
                continue;
            }
            let d = row_estimates[other_1][sh].dot(&row_estimates[other_2][sh]);
            let v = if d.abs() < DEGENERATE_DOT {
                degenerate += 1;
                0.0
            } else {
                d.signum()
            };
            mat[(a, b)] = v;
            mat[(b, a)] = v;
        }
    }
    SignMatrixS {
        n,
        mat,
        degenerate_dots: degenerate,
    }
}

/// Synchronized unit rows, one per image, each ±v_i.
#[derive(Clone, Debug)]
pub struct RowField {
    pub rows: Vec<Vector3<f64>>,
}

/// Diagnostics of one class synchronization.
#[derive(Clone, Debug)]
pub struct SignSyncReport {
    /// Leading eigenvalue of the sign matrix; 2(N−2) on clean data.
    pub s_eigenvalue: f64,
    /// Leading eigenvalue of the corrected block matrix; N on clean data.
    pub h_tilde_eigenvalue: f64,
    /// |second|/first eigenvalue magnitude ratio of the corrected matrix.
    pub h_tilde_gap: f64,
    /// Anchors disagreeing with the majority flip decision, summed over
    /// pairs.
    pub flip_disagreements: usize,
    pub degenerate_dots: usize,
    /// Global sign applied to the eigenvector of the sign matrix.
    pub global_sign: f64,
}

/// Full sign adjustment of one class; returns the synchronized rows.
pub fn adjust_signs(set: &PairVec<Matrix3<f64>>) -> Result<(RowField, SignSyncReport)> {
    let n = set.n();
    if n < 4 {
        return Err(Error::InvalidParam(format!(
            "sign synchronization needs at least 4 images, got {n}"
        )));
    }
    let self_products = estimate_self_products(set);

    // step 2: anchored factorizations
    let row_estimates: Vec<Vec<Vector3<f64>>> = (0..n)
        .into_par_iter()
        .map(|anchor| {
            let h = build_hn(set, &self_products, anchor);
            factor_rows(&h, n)
        })
        .collect::<Result<_>>()?;

    // flip-disagreement diagnostic: how often anchors disagree about the
    // sign of a block
    let plist: Vec<(usize, usize)> = pairs(n).collect();
    let flip_disagreements: usize = plist
        .par_iter()
        .map(|&(i, j)| {
            let mut flips = 0usize;
            for anchor in 0..n {
                let through =
                    block(set, &self_products, i, anchor) * block(set, &self_products, anchor, j);
                let direct = *set.get(i, j);
                if (through - direct).norm() > (through + direct).norm() {
                    flips += 1;
                }
            }
            flips.min(n - flips)
        })
        .sum();

    // step 3: pairwise sign matrix and its leading eigenvector
    let s = build_s(&row_estimates);
    let (s_eigenvalue, u_s) = power_iteration(&s.mat, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;

    // the eigenvector determines the correction signs only up to one global
    // sign, and exactly one choice makes the corrected matrix rank 1; build
    // both and keep the dominant one
    let build_h_tilde = |global: f64| {
        let mut h = DMatrix::zeros(3 * n, 3 * n);
        for (a, &(i, j)) in plist.iter().enumerate() {
            let sign = if global * u_s[a] < 0.0 { -1.0 } else { 1.0 };
            let b = *set.get(i, j) * sign;
            for r in 0..3 {
                for c in 0..3 {
                    h[(3 * i + r, 3 * j + c)] = b[(r, c)];
                    h[(3 * j + c, 3 * i + r)] = b[(r, c)];
                }
            }
        }
        for i in 0..n {
            for r in 0..3 {
                for c in 0..3 {
                    h[(3 * i + r, 3 * i + c)] = self_products[i][(r, c)];
                }
            }
        }
        h
    };
    let h_plus = build_h_tilde(1.0);
    let h_minus = build_h_tilde(-1.0);
    let (lam_plus, v_plus) = power_iteration(&h_plus, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    let (lam_minus, v_minus) = power_iteration(&h_minus, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    let (global_sign, h_tilde, lam, v) = if lam_plus >= lam_minus {
        (1.0, h_plus, lam_plus, v_plus)
    } else {
        (-1.0, h_minus, lam_minus, v_minus)
    };

    // second singular value by deflation, for the rank-1 gap report; the
    // squared deflated matrix is PSD so power iteration is sign-stable
    let deflated = &h_tilde - &v * v.transpose() * lam;
    let deflated_sq = &deflated * &deflated;
    let lam2 = power_iteration(&deflated_sq, DEFAULT_TOL, DEFAULT_MAX_ITERS)
        .map(|(l2sq, _)| l2sq.max(0.0).sqrt())
        .unwrap_or(f64::NAN);

    let rows = (0..n)
        .map(|i| {
            let b = Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
            let norm = b.norm();
            if norm == 0.0 {
                b
            } else {
                b / norm
            }
        })
        .collect();
    Ok((
        RowField { rows },
        SignSyncReport {
            s_eigenvalue,
            h_tilde_eigenvalue: lam,
            h_tilde_gap: lam2 / lam.abs().max(f64::MIN_POSITIVE),
            flip_disagreements,
            degenerate_dots: s.degenerate_dots,
            global_sign,
        },
    ))
}

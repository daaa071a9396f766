//! Row synchronization: sort the per-pair rank-1 row outer products into
//! three classes, one per rotation row.
//!
//! Summing the first member of a hand-consistent quadruple with each of the
//! other three yields ±(v_i^m)^T v_j^m for the three rows m in some unknown
//! per-pair order. Which slot holds which row is recovered as a graph
//! 3-coloring: vertices are the 3·C(N,2) stored matrices, edges connect
//! vertices whose pairs share one image index, with weight +1 when a triangle
//! alignment places them in the same column and −1 otherwise. The clean
//! adjacency matrix has a two-dimensional leading eigenspace containing a
//! vector whose entries take the three values {+α, 0, −α} according to the
//! coloring; it is found by rotating an orthonormal basis of the eigenspace
//! until a per-block max/mid/min functional vanishes, then thresholding.

use nalgebra::{DMatrix, DVector, Matrix3};
use rayon::prelude::*;

use crate::commonlines::RelRotQuadruple;
use crate::eigen::{orthogonal_iteration_2, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::pairs::{pair_index, triangles, PairVec};
use crate::{Error, Result};

/// The three rank-1 matrices ±(v_i^m)^T v_j^m of one pair, in unknown slot
/// order with unknown signs.
#[derive(Clone, Debug)]
pub struct Rank1Triple {
    pub mats: [Matrix3<f64>; 3],
}

/// Collapse a hand-consistent quadruple to its rank-1 triple:
/// slot m−1 holds `(mats[0] + mats[m]) / 2` for m = 1..3.
pub fn quadruple_to_rank1_triple(q: &RelRotQuadruple) -> Rank1Triple {
    let base = q.mats[0].matrix();
    Rank1Triple {
        mats: [1, 2, 3].map(|m| (base + q.mats[m].matrix()) * 0.5),
    }
}

/// Best rank-1 approximation via the largest singular triplet.
pub fn rank1_project(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let s = svd.singular_values[0];
    u.column(0) * vt.row(0) * s
}

/// Ratio of second to first singular value; the rank-1 residual diagnostic.
pub fn rank1_residual(m: &Matrix3<f64>) -> f64 {
    let sv = m.svd(false, false).singular_values;
    if sv[0] == 0.0 {
        0.0
    } else {
        sv[1] / sv[0]
    }
}

/// Triples for all pairs, optionally replacing each matrix by its best
/// rank-1 approximation (noise hygiene; exact on clean data).
pub fn rank1_triples(
    quads: &PairVec<RelRotQuadruple>,
    enforce_rank1: bool,
) -> PairVec<Rank1Triple> {
    quads.map(|_, _, q| {
        let mut t = quadruple_to_rank1_triple(q);
        if enforce_rank1 {
            for m in t.mats.iter_mut() {
                *m = rank1_project(m);
            }
        }
        t
    })
}

/// The six permutations of {0, 1, 2} in lexicographic order.
pub const S3: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Alignment cost of one (γ, δ) candidate: sum over columns of the smaller
/// of ‖t_ij t_jk t_ik^T ∓ t_ij t_ij^T‖.
pub fn triangle_alignment_cost(
    tij: &Rank1Triple,
    tjk: &Rank1Triple,
    tik: &Rank1Triple,
    gamma: [usize; 3],
    delta: [usize; 3],
) -> f64 {
    let mut f = 0.0;
    for m in 0..3 {
        let p = tij.mats[m] * tjk.mats[gamma[m]] * tik.mats[delta[m]].transpose();
        let q = tij.mats[m] * tij.mats[m].transpose();
        f += (p + q).norm().min((p - q).norm());
    }
    f
}

/// Align the slots of a pair triangle.
///
/// Searches the 36 permutation pairs (γ, δ) for the one minimizing the sum
/// over columns of the smaller of ‖t_ij t_jk t_ik^T ∓ t_ij t_ij^T‖, i.e. the
/// triple products must reproduce the pair's own self outer product up to
/// sign. Returns (γ*, δ*, f_min); ties resolve to the lexicographically
/// smallest (γ, δ).
pub fn triangle_permutations(
    tij: &Rank1Triple,
    tjk: &Rank1Triple,
    tik: &Rank1Triple,
) -> ([usize; 3], [usize; 3], f64) {
    let mut best = (S3[0], S3[0], f64::INFINITY);
    for gamma in S3 {
        for delta in S3 {
            let f = triangle_alignment_cost(tij, tjk, tik, gamma, delta);
            if f < best.2 {
                best = (gamma, delta, f);
            }
        }
    }
    best
}

/// Signed vertex-adjacency matrix of the coloring graph; rows and columns
/// are (pair, slot) vertices at index 3·pair + slot.
#[derive(Clone, Debug)]
pub struct OmegaMatrix {
    pub n: usize,
    pub mat: DMatrix<f64>,
}

/// Assemble the coloring graph from all pair triples.
///
/// Every triangle contributes nine entries to each of its three block pairs
/// (+1 on aligned slots, −1 elsewhere) plus the three mirrored transposes;
/// each nonzero block is written by exactly one triangle.
pub fn build_omega(triples: &PairVec<Rank1Triple>) -> Result<OmegaMatrix> {
    let n = triples.n();
    if n < 3 {
        return Err(Error::InvalidParam(format!(
            "row synchronization needs at least 3 images, got {n}"
        )));
    }
    let c = crate::pairs::pair_count(n);
    let tri: Vec<(usize, usize, usize)> = triangles(n).collect();
    let aligned: Vec<([usize; 3], [usize; 3])> = tri
        .par_iter()
        .map(|&(i, j, k)| {
            let (g, d, _) =
                triangle_permutations(triples.get(i, j), triples.get(j, k), triples.get(i, k));
            (g, d)
        })
        .collect();
    let mut mat = DMatrix::zeros(3 * c, 3 * c);
    for (&(i, j, k), &(gamma, delta)) in tri.iter().zip(&aligned) {
        let pij = pair_index(n, i, j);
        let pjk = pair_index(n, j, k);
        let pik = pair_index(n, i, k);
        // blocks (ij, jk), (ij, ik), (jk, ik): -1 everywhere except the
        // aligned slot pairs
        for a in 0..3 {
            for b in 0..3 {
                let w_ij_jk = if gamma[a] == b { 1.0 } else { -1.0 };
                let w_ij_ik = if delta[a] == b { 1.0 } else { -1.0 };
                mat[(3 * pij + a, 3 * pjk + b)] = w_ij_jk;
                mat[(3 * pjk + b, 3 * pij + a)] = w_ij_jk;
                mat[(3 * pij + a, 3 * pik + b)] = w_ij_ik;
                mat[(3 * pik + b, 3 * pij + a)] = w_ij_ik;
            }
        }
        for m in 0..3 {
            for b in 0..3 {
                let w = if delta[m] == b { 1.0 } else { -1.0 };
                mat[(3 * pjk + gamma[m], 3 * pik + b)] = w;
                mat[(3 * pik + b, 3 * pjk + gamma[m])] = w;
            }
        }
    }
    Ok(OmegaMatrix { n, mat })
}

/// Thresholded coloring vector: each pair block holds exactly
/// {+α, 0, −α} with α = (2·C(N,2))^(−1/2).
#[derive(Clone, Debug)]
pub struct ColorVector {
    pub n: usize,
    pub values: Vec<f64>,
}

impl ColorVector {
    pub fn alpha(&self) -> f64 {
        (2.0 * crate::pairs::pair_count(self.n) as f64).powf(-0.5)
    }

    /// Slot colors of one pair: 0 where +α, 1 where 0, 2 where −α.
    pub fn pair_colors(&self, p: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for s in 0..3 {
            let v = self.values[3 * p + s];
            out[s] = if v > 0.0 {
                0
            } else if v < 0.0 {
                2
            } else {
                1
            };
        }
        out
    }
}

/// Diagnostics of the eigenvector unmixing.
#[derive(Clone, Debug)]
pub struct UnmixReport {
    pub theta: f64,
    pub f_min: f64,
    /// Rayleigh quotient of the thresholded vector; 4(N−2) on clean data.
    pub rayleigh: f64,
    /// Two near-equal grid minima led to genuinely different partitions.
    pub ambiguous: bool,
}

const THETA_GRID: usize = 3600;

fn fc_value(va: &DVector<f64>, vb: &DVector<f64>, c: usize, theta: f64) -> f64 {
    let (s, co) = theta.sin_cos();
    let mut total = 0.0;
    for p in 0..c {
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        for t in 0..3 {
            a[t] = co * va[3 * p + t] + s * vb[3 * p + t];
            b[t] = -s * va[3 * p + t] + co * vb[3 * p + t];
        }
        let (amax, amid, amin) = sort3(a);
        let (bmax, bmid, bmin) = sort3(b);
        total += (amax + amin) * (amax + amin) + amid * amid;
        total += (bmin + 2.0 * bmax) * (bmin + 2.0 * bmax)
            + (bmin + 2.0 * bmid) * (bmin + 2.0 * bmid)
            + (bmax - bmid) * (bmax - bmid);
    }
    total
}

fn sort3(v: [f64; 3]) -> (f64, f64, f64) {
    let mut s = v;
    s.sort_by(|x, y| x.partial_cmp(y).unwrap());
    (s[2], s[1], s[0])
}

fn threshold(va: &DVector<f64>, vb: &DVector<f64>, c: usize, theta: f64, n: usize) -> ColorVector {
    let (s, co) = theta.sin_cos();
    let alpha = (2.0 * c as f64).powf(-0.5);
    let mut values = vec![0.0; 3 * c];
    for p in 0..c {
        let mut a = [0.0; 3];
        for t in 0..3 {
            a[t] = co * va[3 * p + t] + s * vb[3 * p + t];
        }
        // max -> +alpha, middle (by value) -> 0, min -> -alpha
        let mut order = [0usize, 1, 2];
        order.sort_by(|&x, &y| a[x].partial_cmp(&a[y]).unwrap());
        values[3 * p + order[2]] = alpha;
        values[3 * p + order[0]] = -alpha;
    }
    ColorVector { n, values }
}

fn partitions_equivalent(a: &ColorVector, b: &ColorVector, c: usize) -> bool {
    // equal up to a global permutation of the three colors
    'perm: for perm in S3 {
        for p in 0..c {
            let ca = a.pair_colors(p);
            let cb = b.pair_colors(p);
            for s in 0..3 {
                if perm[ca[s]] != cb[s] {
                    continue 'perm;
                }
            }
        }
        return true;
    }
    false
}

/// Recover the thresholded coloring vector from the leading eigenspace.
///
/// Computes an orthonormal basis (v_a, v_b) of the two-dimensional leading
/// eigenspace, scans a 3600-point angle grid for the minimum of the
/// unmixing functional, refines by golden section to 1e-10, and thresholds
/// the rotated v_a per block.
pub fn unmix_u_alpha(omega: &OmegaMatrix) -> Result<(ColorVector, UnmixReport)> {
    let n = omega.n;
    if n < 4 {
        return Err(Error::InvalidParam(format!(
            "unmixing needs at least 4 images for a strict top eigenvalue, got {n}"
        )));
    }
    let c = crate::pairs::pair_count(n);
    let (_, [va, vb]) = orthogonal_iteration_2(&omega.mat, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;

    let step = std::f64::consts::TAU / THETA_GRID as f64;
    let fs: Vec<f64> = (0..THETA_GRID)
        .into_par_iter()
        .map(|t| fc_value(&va, &vb, c, t as f64 * step))
        .collect();
    let mut t0 = 0;
    for t in 1..THETA_GRID {
        if fs[t] < fs[t0] {
            t0 = t;
        }
    }

    // ambiguity check: another grid-local minimum at the same functional
    // value but a different partition
    let mut ambiguous = false;
    let mut second: Option<usize> = None;
    for t in 0..THETA_GRID {
        let prev = fs[(t + THETA_GRID - 1) % THETA_GRID];
        let next = fs[(t + 1) % THETA_GRID];
        if t != t0 && fs[t] <= prev && fs[t] <= next && second.is_none_or(|s| fs[t] < fs[s]) {
            second = Some(t);
        }
    }
    if let Some(s) = second {
        if (fs[s] - fs[t0]).abs() < 1e-12 {
            let pa = threshold(&va, &vb, c, t0 as f64 * step, n);
            let pb = threshold(&va, &vb, c, s as f64 * step, n);
            if !partitions_equivalent(&pa, &pb, c) {
                ambiguous = true;
            }
        }
    }

    // golden-section refinement around the grid minimum
    let golden = 0.5 * (3.0 - 5.0f64.sqrt());
    let (mut lo, mut hi) = ((t0 as f64 - 1.0) * step, (t0 as f64 + 1.0) * step);
    let mut x1 = lo + golden * (hi - lo);
    let mut x2 = hi - golden * (hi - lo);
    let mut f1 = fc_value(&va, &vb, c, x1);
    let mut f2 = fc_value(&va, &vb, c, x2);
    while hi - lo > 1e-10 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = lo + golden * (hi - lo);
            f1 = fc_value(&va, &vb, c, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = hi - golden * (hi - lo);
            f2 = fc_value(&va, &vb, c, x2);
        }
    }
    let theta = 0.5 * (lo + hi);
    let f_min = fc_value(&va, &vb, c, theta);
    let color = threshold(&va, &vb, c, theta, n);

    let u = DVector::from_vec(color.values.clone());
    let rayleigh = u.dot(&(&omega.mat * &u)) / u.dot(&u);
    Ok((
        color,
        UnmixReport {
            theta,
            f_min,
            rayleigh,
            ambiguous,
        },
    ))
}

/// Split the stored matrices into the three color sets.
///
/// Within each returned set, every pair contributes the single slot matrix
/// of that color; set labels are arbitrary up to a global color permutation.
pub fn partition_rows(
    u: &ColorVector,
    triples: &PairVec<Rank1Triple>,
) -> [PairVec<Matrix3<f64>>; 3] {
    let n = triples.n();
    let pick = |color: usize| {
        PairVec::from_fn(n, |i, j| {
            let p = pair_index(n, i, j);
            let colors = u.pair_colors(p);
            let slot = (0..3)
                .find(|&s| colors[s] == color)
                .expect("block holds all three colors");
            triples.get(i, j).mats[slot]
        })
    };
    [pick(0), pick(1), pick(2)]
}

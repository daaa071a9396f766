//! Handedness synchronization: decide per pair whether the estimated
//! quadruple is mirror-conjugated, and un-conjugate the flipped ones.
//!
//! For each triangle of pairs, exactly 16 of the 64 triple products
//! R_ij^m R_jk^l R_ki^r equal the identity when the three tuples share a
//! mirror class; testing the four flip hypotheses (none / flip one tuple)
//! by summing the 16 smallest deviations from the identity classifies the
//! triangle. The per-pair classes are then read off the leading eigenvector
//! of a signed pair-adjacency matrix whose entries say "same class" (+1) or
//! "different class" (−1) for pairs sharing one image index.

use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;

use crate::commonlines::RelRotQuadruple;
use crate::eigen::{power_iteration, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::geom::j_conjugate_matrix;
use crate::pairs::{pair_index, triangle_count, triangles, PairVec};
use crate::{Error, Result};

/// Which member of a pair triangle is in the minority mirror class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletConfig {
    /// All three tuples in the same class.
    C0,
    /// The (i,j) tuple differs from the other two.
    C1,
    /// The (j,k) tuple differs.
    C2,
    /// The (k,i) tuple differs.
    C3,
}

impl TripletConfig {
    pub fn from_index(p: usize) -> TripletConfig {
        match p {
            0 => TripletConfig::C0,
            1 => TripletConfig::C1,
            2 => TripletConfig::C2,
            _ => TripletConfig::C3,
        }
    }

    /// Flags (d1, d2, d3): which of the three tuples is the odd one out.
    pub fn flags(&self) -> (bool, bool, bool) {
        match self {
            TripletConfig::C0 => (false, false, false),
            TripletConfig::C1 => (true, false, false),
            TripletConfig::C2 => (false, true, false),
            TripletConfig::C3 => (false, false, true),
        }
    }
}

/// Sum of the 16 smallest identity deviations for each flip hypothesis.
///
/// Index p corresponds to conjugating tuple p (0 = none, 1 = R_ij,
/// 2 = R_jk, 3 = R_ki) before taking the 64 triple products.
pub fn triplet_scores(
    rij: &RelRotQuadruple,
    rjk: &RelRotQuadruple,
    rki: &RelRotQuadruple,
) -> [f64; 4] {
    let a: [&Matrix3<f64>; 4] = [0, 1, 2, 3].map(|m| rij.mats[m].matrix());
    let b: [&Matrix3<f64>; 4] = [0, 1, 2, 3].map(|m| rjk.mats[m].matrix());
    let c: [&Matrix3<f64>; 4] = [0, 1, 2, 3].map(|m| rki.mats[m].matrix());
    let aj: [Matrix3<f64>; 4] = [0, 1, 2, 3].map(|m| j_conjugate_matrix(a[m]));
    let bj: [Matrix3<f64>; 4] = [0, 1, 2, 3].map(|m| j_conjugate_matrix(b[m]));
    let cj: [Matrix3<f64>; 4] = [0, 1, 2, 3].map(|m| j_conjugate_matrix(c[m]));

    let mut scores = [0.0; 4];
    let eye = Matrix3::identity();
    let mut norms = [[0.0f64; 64]; 4];
    let mut idx = 0;
    for m in 0..4 {
        for l in 0..4 {
            let ab0 = a[m] * b[l];
            let ab1 = aj[m] * b[l];
            let ab2 = a[m] * bj[l];
            for r in 0..4 {
                norms[0][idx] = (ab0 * c[r] - eye).norm();
                norms[1][idx] = (ab1 * c[r] - eye).norm();
                norms[2][idx] = (ab2 * c[r] - eye).norm();
                norms[3][idx] = (ab0 * cj[r] - eye).norm();
                idx += 1;
            }
        }
    }
    for p in 0..4 {
        norms[p].sort_by(|x, y| x.partial_cmp(y).unwrap());
        scores[p] = norms[p][..16].iter().sum();
    }
    scores
}

/// Classify a pair triangle; ties resolve toward the lowest hypothesis
/// index.
///
/// `rki` must be the element-wise transpose of the stored (i,k) estimate.
pub fn triplet_config(
    rij: &RelRotQuadruple,
    rjk: &RelRotQuadruple,
    rki: &RelRotQuadruple,
) -> TripletConfig {
    let scores = triplet_scores(rij, rjk, rki);
    let mut best = 0;
    for p in 1..4 {
        if scores[p] < scores[best] {
            best = p;
        }
    }
    TripletConfig::from_index(best)
}

/// Signed pair-adjacency matrix; entry ((i,j),(k,l)) is ±1 when the pairs
/// share exactly one index and 0 otherwise.
#[derive(Clone, Debug)]
pub struct SigmaMatrix {
    pub n: usize,
    pub mat: DMatrix<f64>,
}

/// Assemble the signed adjacency matrix from all triangle configurations
/// (lexicographic triangle order).
pub fn build_sigma(n: usize, configs: &[TripletConfig]) -> Result<SigmaMatrix> {
    if configs.len() != triangle_count(n) {
        // report the first missing triangle index for diagnosis
        let (i, j, k) = triangles(n).nth(configs.len()).unwrap_or((0, 0, 0));
        return Err(Error::MissingTriangle { i, j, k });
    }
    let c = crate::pairs::pair_count(n);
    let mut mat = DMatrix::zeros(c, c);
    for ((i, j, k), cfg) in triangles(n).zip(configs) {
        let (f_ij, f_jk, f_ki) = cfg.flags();
        let pij = pair_index(n, i, j);
        let pjk = pair_index(n, j, k);
        let pik = pair_index(n, i, k);
        let edges = [
            (pij, pjk, f_ij == f_jk),
            (pjk, pik, f_jk == f_ki),
            (pik, pij, f_ki == f_ij),
        ];
        for (a, b, same) in edges {
            let w = if same { 1.0 } else { -1.0 };
            mat[(a, b)] = w;
            mat[(b, a)] = w;
        }
    }
    Ok(SigmaMatrix { n, mat })
}

/// Outcome diagnostics of hand synchronization.
#[derive(Clone, Debug)]
pub struct HandSyncReport {
    pub leading_eigenvalue: f64,
    pub flipped_pairs: usize,
}

/// Resolve the per-pair mirror classes and conjugate the minority class.
///
/// The output is hand-consistent: either every tuple is in the true class or
/// every tuple is mirror-conjugated; which of the two is arbitrary.
pub fn synchronize_hands(
    quads: &PairVec<RelRotQuadruple>,
) -> Result<(PairVec<RelRotQuadruple>, HandSyncReport)> {
    let n = quads.n();
    if n < 3 {
        return Err(Error::InvalidParam(format!(
            "hand synchronization needs at least 3 images, got {n}"
        )));
    }
    let tri: Vec<(usize, usize, usize)> = triangles(n).collect();
    let configs: Vec<TripletConfig> = tri
        .par_iter()
        .map(|&(i, j, k)| {
            let rki = quads.get(i, k).transposed();
            triplet_config(quads.get(i, j), quads.get(j, k), &rki)
        })
        .collect();
    let sigma = build_sigma(n, &configs)?;
    let (lambda, u) = power_iteration(&sigma.mat, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    let mut flipped = 0usize;
    let out = quads.map(|i, j, q| {
        if u[pair_index(n, i, j)] < 0.0 {
            flipped += 1;
            q.conjugated_by_j()
        } else {
            q.clone()
        }
    });
    Ok((
        out,
        HandSyncReport {
            leading_eigenvalue: lambda,
            flipped_pairs: flipped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{random_rotations, synth_quadruples, true_quadruple, CorruptionSpec};

    fn count_identity_products(
        rij: &RelRotQuadruple,
        rjk: &RelRotQuadruple,
        rki: &RelRotQuadruple,
        tol: f64,
    ) -> usize {
        let mut count = 0;
        for m in 0..4 {
            for l in 0..4 {
                for r in 0..4 {
                    let p = rij.mats[m].matrix() * rjk.mats[l].matrix() * rki.mats[r].matrix();
                    if (p - Matrix3::identity()).norm() < tol {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn sixteen_products_hit_identity_on_clean_triangles() {
        let rots = random_rotations(5, 17);
        let synth = synth_quadruples(
            &rots,
            &CorruptionSpec {
                permute: true,
                ..CorruptionSpec::clean()
            },
            0,
        )
        .unwrap();
        for (i, j, k) in triangles(5) {
            let rki = synth.quadruples.get(i, k).transposed();
            let count = count_identity_products(
                synth.quadruples.get(i, j),
                synth.quadruples.get(j, k),
                &rki,
                1e-8,
            );
            assert_eq!(count, 16);
        }
    }

    #[test]
    fn targeted_flip_is_detected() {
        let rots = random_rotations(4, 23);
        let q01 = true_quadruple(&rots[0], &rots[1]);
        let q12 = true_quadruple(&rots[1], &rots[2]);
        let q02 = true_quadruple(&rots[0], &rots[2]);

        let same = triplet_config(&q01, &q12, &q02.transposed());
        assert_eq!(same, TripletConfig::C0);

        let flipped = triplet_config(&q01.conjugated_by_j(), &q12, &q02.transposed());
        assert_eq!(flipped, TripletConfig::C1);
        let flipped = triplet_config(&q01, &q12.conjugated_by_j(), &q02.transposed());
        assert_eq!(flipped, TripletConfig::C2);
        let flipped = triplet_config(&q01, &q12, &q02.conjugated_by_j().transposed());
        assert_eq!(flipped, TripletConfig::C3);
    }

    #[test]
    fn scores_positive_off_triangle() {
        // tuples that do not close a triangle give four strictly positive
        // hypothesis scores
        let rots = random_rotations(6, 31);
        let a = true_quadruple(&rots[0], &rots[1]);
        let b = true_quadruple(&rots[2], &rots[3]);
        let c = true_quadruple(&rots[4], &rots[5]);
        for s in triplet_scores(&a, &b, &c) {
            assert!(s > 1.0);
        }
    }

    #[test]
    fn sigma_structure_for_single_triangle() {
        let sigma = build_sigma(3, &[TripletConfig::C1]).unwrap();
        let m = &sigma.mat;
        // pairs: (0,1)=0, (0,2)=1, (1,2)=2; config C1: tuple (0,1) differs
        assert_eq!(m[(0, 2)], -1.0); // (0,1) vs (1,2)
        assert_eq!(m[(2, 0)], -1.0);
        assert_eq!(m[(1, 0)], -1.0); // (0,2) vs (0,1)
        assert_eq!(m[(2, 1)], 1.0); // (1,2) vs (0,2) share index 2, same class
        for a in 0..3 {
            assert_eq!(m[(a, a)], 0.0);
        }
    }

    #[test]
    fn all_same_class_gives_all_positive_entries() {
        let n = 5;
        let configs = vec![TripletConfig::C0; triangle_count(n)];
        let sigma = build_sigma(n, &configs).unwrap();
        for a in 0..sigma.mat.nrows() {
            for b in 0..sigma.mat.ncols() {
                let v = sigma.mat[(a, b)];
                assert!(v == 0.0 || v == 1.0);
            }
        }
        assert!(matches!(
            build_sigma(n, &configs[..triangle_count(n) - 1]),
            Err(Error::MissingTriangle { .. })
        ));
    }

    #[test]
    fn zero_pattern_matches_index_overlap() {
        let n = 6;
        let configs = vec![TripletConfig::C0; triangle_count(n)];
        let sigma = build_sigma(n, &configs).unwrap();
        for (pi, (i, j)) in crate::pairs::pairs(n).enumerate() {
            for (pk, (k, l)) in crate::pairs::pairs(n).enumerate() {
                let overlap = [i, j].iter().filter(|x| [k, l].contains(x)).count();
                let v = sigma.mat[(pi, pk)];
                if overlap == 1 {
                    assert_ne!(v, 0.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn all_same_class_spectrum_and_eigenvector() {
        // the all-same-class matrix is the plain one-index-overlap pattern:
        // spectrum {2(N-2) x1, (N-4) x(N-1), -2 x(C-N)}, leading eigenvector
        // of constant sign
        for n in [6usize, 9] {
            let configs = vec![TripletConfig::C0; triangle_count(n)];
            let sigma = build_sigma(n, &configs).unwrap();
            let c = crate::pairs::pair_count(n);
            let eig = sigma.mat.clone().symmetric_eigen();
            let count = |x: f64| {
                eig.eigenvalues
                    .iter()
                    .filter(|&&e| (e - x).abs() < 1e-8)
                    .count()
            };
            assert_eq!(count(2.0 * (n as f64 - 2.0)), 1);
            assert_eq!(count(n as f64 - 4.0), n - 1);
            assert_eq!(count(-2.0), c - n);

            let (lam, u) = power_iteration(&sigma.mat, 1e-12, 10_000).unwrap();
            assert!((lam - 2.0 * (n as f64 - 2.0)).abs() < 1e-8);
            let sign = u[0].signum();
            assert!(u.iter().all(|&v| v.signum() == sign));
        }
    }

    #[test]
    fn global_mirror_conjugation_fixes_sigma() {
        // J-conjugating every tuple changes no triangle configuration, so
        // the signed matrix (and hence the partition) is a fixed point under
        // a global hand change
        let n = 6;
        let rots = random_rotations(n, 77);
        let synth = synth_quadruples(
            &rots,
            &CorruptionSpec {
                permute: true,
                jflip_prob: 0.4,
                outlier_prob: 0.0,
                noise_sigma: 0.0,
            },
            5,
        )
        .unwrap();
        let configs_of = |quads: &crate::pairs::PairVec<RelRotQuadruple>| -> Vec<TripletConfig> {
            triangles(n)
                .map(|(i, j, k)| {
                    let rki = quads.get(i, k).transposed();
                    triplet_config(quads.get(i, j), quads.get(j, k), &rki)
                })
                .collect()
        };
        let base = configs_of(&synth.quadruples);
        let mirrored = synth.quadruples.map(|_, _, q| q.conjugated_by_j());
        let flipped = configs_of(&mirrored);
        assert_eq!(base, flipped);
        let sa = build_sigma(n, &base).unwrap();
        let sb = build_sigma(n, &flipped).unwrap();
        assert_eq!(sa.mat, sb.mat);
    }

    #[test]
    fn planted_flips_are_recovered() {
        let n = 10;
        let rots = random_rotations(n, 41);
        for (seed, rate) in [(1u64, 0.1), (2, 0.3), (3, 0.5)] {
            let synth = synth_quadruples(
                &rots,
                &CorruptionSpec {
                    permute: true,
                    jflip_prob: rate,
                    outlier_prob: 0.0,
                    noise_sigma: 0.0,
                },
                seed,
            )
            .unwrap();
            let (fixed, _report) = synchronize_hands(&synth.quadruples).unwrap();
            // after synchronization every tuple is in one common class
            let truth: Vec<bool> = fixed
                .iter_pairs()
                .map(|(i, j, q)| {
                    let t = true_quadruple(&rots[i], &rots[j]);
                    if q.set_matches(&t, 1e-9) {
                        false
                    } else {
                        assert!(q.set_matches(&t.conjugated_by_j(), 1e-9));
                        true
                    }
                })
                .collect();
            assert!(
                truth.iter().all(|&x| x) || truth.iter().all(|&x| !x),
                "output not hand-consistent at flip rate {rate}"
            );
        }
    }

    #[test]
    fn no_flips_is_a_fixed_point_up_to_global_hand() {
        let n = 6;
        let rots = random_rotations(n, 47);
        let synth = synth_quadruples(&rots, &CorruptionSpec::clean(), 0).unwrap();
        let (fixed, report) = synchronize_hands(&synth.quadruples).unwrap();
        assert!(report.flipped_pairs == 0 || report.flipped_pairs == fixed.len());
        for (i, j, q) in fixed.iter_pairs() {
            let t = true_quadruple(&rots[i], &rots[j]);
            let direct = q.set_matches(&t, 1e-9);
            let mirrored = q.set_matches(&t.conjugated_by_j(), 1e-9);
            assert!(direct || mirrored);
        }
    }
}

//! Exact common-line geometry for D2-symmetric objects.
//!
//! The rotational symmetry group is the Klein four-group {g1, g2, g3, g4}:
//! the identity and the 180° rotations about the x, y and z axes. A pair of
//! views (R_i, R_j) of a D2-symmetric object shares four common lines in
//! Fourier space, one per symmetry element, with directions
//!
//!   q_ij^m = normalize(R_i^(3) × g_m R_j^(3)),   m = 1..4,
//!
//! where R^(3) is the beaming direction (third column). Each view also has up
//! to three self common lines q_ii^m for m = 2..4. This module computes those
//! directions and their in-plane angles on both projection planes; everything
//! is pure and allocation-free, safe to call concurrently.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

/// Default tolerance on the cosine gap 1 - |<z_i, z_j>| below which a view
/// pair is treated as degenerate in exact-geometry computations.
pub const EPS_ALIGN_EXACT: f64 = 1e-6;

const ROT_TOL: f64 = 1e-12;

/// A 3×3 rotation matrix (orthonormal columns, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    /// Validate orthonormality and determinant to 1e-12.
    pub fn try_new(m: Matrix3<f64>) -> Result<Self> {
        let gram = m.transpose() * m;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ROT_TOL {
            return Err(Error::NotARotation(format!(
                "columns not orthonormal (max deviation {dev:.3e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROT_TOL {
            return Err(Error::NotARotation(format!("determinant {det} != +1")));
        }
        Ok(Rotation(m))
    }

    /// Wrap a matrix already known to be a rotation (products of validated
    /// rotations, symmetry conjugations, and the like).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Column `i` (0-based); column 2 is the beaming direction.
    pub fn col(&self, i: usize) -> Vector3<f64> {
        self.0.column(i).into_owned()
    }

    /// Row `i` (0-based) as a vector.
    pub fn row(&self, i: usize) -> Vector3<f64> {
        self.0.row(i).transpose()
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn rot_x(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Geodesic distance to another rotation, in radians.
    ///
    /// Uses ‖A − B‖_F = 2√2·sin(φ/2), which stays well conditioned near
    /// zero where the trace formula loses half the significant digits.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let half_sin = (self.0 - other.0).norm() / (2.0 * std::f64::consts::SQRT_2);
        2.0 * half_sin.clamp(0.0, 1.0).asin()
    }

    pub fn mul(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

/// An element of the Klein four-group {g1 = I, g2, g3, g4}: the identity and
/// the 180° rotations about x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KleinElement(u8);

impl KleinElement {
    pub const G1: KleinElement = KleinElement(1);
    pub const G2: KleinElement = KleinElement(2);
    pub const G3: KleinElement = KleinElement(3);
    pub const G4: KleinElement = KleinElement(4);

    pub const ALL: [KleinElement; 4] = [Self::G1, Self::G2, Self::G3, Self::G4];

    pub fn new(index: usize) -> Result<Self> {
        if (1..=4).contains(&index) {
            Ok(KleinElement(index as u8))
        } else {
            Err(Error::InvalidParam(format!(
                "Klein element index must be 1..=4, got {index}"
            )))
        }
    }

    /// 1-based index m of g_m.
    pub fn index(&self) -> usize {
        self.0 as usize
    }

    /// Diagonal of g_m.
    pub fn diag(&self) -> [f64; 3] {
        match self.0 {
            1 => [1.0, 1.0, 1.0],
            2 => [1.0, -1.0, -1.0],
            3 => [-1.0, 1.0, -1.0],
            _ => [-1.0, -1.0, 1.0],
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let d = self.diag();
        Matrix3::from_diagonal(&Vector3::new(d[0], d[1], d[2]))
    }

    /// Apply g_m to a vector without building the matrix.
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let d = self.diag();
        Vector3::new(d[0] * v.x, d[1] * v.y, d[2] * v.z)
    }
}

/// Group product in the Klein four-group.
///
/// The group is isomorphic to Z2 × Z2; with elements coded by index − 1 the
/// product is a bitwise XOR.
pub fn klein_mul(a: KleinElement, b: KleinElement) -> KleinElement {
    KleinElement(((a.0 - 1) ^ (b.0 - 1)) + 1)
}

/// The reflection through the xy-plane, J = diag(1, 1, −1).
pub fn j_matrix() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))
}

/// Conjugate a 3×3 matrix by J in place-free form: J M J flips the sign of
/// the (0,2), (1,2), (2,0) and (2,1) entries.
pub fn j_conjugate_matrix(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut out = *m;
    out[(0, 2)] = -out[(0, 2)];
    out[(1, 2)] = -out[(1, 2)];
    out[(2, 0)] = -out[(2, 0)];
    out[(2, 1)] = -out[(2, 1)];
    out
}

/// J R J; a rotation again since J enters twice.
pub fn conjugate_by_j(r: &Rotation) -> Rotation {
    Rotation::from_matrix_unchecked(j_conjugate_matrix(r.matrix()))
}

/// In-plane angles of one common line on the two projection planes involved.
///
/// `alpha_ij` is the angle of the line on the plane of the first view,
/// measured from that view's local x-axis; `alpha_ji` likewise on the second
/// view's plane. Both lie in [0, 2π).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommonLineCoords {
    pub alpha_ij: f64,
    pub alpha_ji: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a < 0.0 {
        a += two_pi;
    }
    a
}

fn angle_in_plane(r: &Rotation, g: KleinElement, q: &Vector3<f64>) -> f64 {
    let c = g.apply(&r.col(0)).dot(q);
    let s = g.apply(&r.col(1)).dot(q);
    wrap_angle(s.atan2(c))
}

/// Directions of the four common lines between a view pair, one per symmetry
/// element: q_ij^m = normalize(R_i^(3) × g_m R_j^(3)).
///
/// Fails with `DegenerateViewPair` if any of the four beaming-direction pairs
/// is within `eps_align` (cosine gap) of coincidence.
pub fn common_line_directions(
    ri: &Rotation,
    rj: &Rotation,
    eps_align: f64,
) -> Result<[Vector3<f64>; 4]> {
    let zi = ri.col(2);
    let zj = rj.col(2);
    let mut out = [Vector3::zeros(); 4];
    for g in KleinElement::ALL {
        let gz = g.apply(&zj);
        if zi.dot(&gz).abs() >= 1.0 - eps_align {
            return Err(Error::DegenerateViewPair { m: g.index() });
        }
        out[g.index() - 1] = zi.cross(&gz).normalize();
    }
    Ok(out)
}

/// In-plane coordinates of the four common lines of a view pair.
///
/// Entry m−1 holds (α_ij^m, α_ji^m): the angle of q_ij^m on the plane of
/// R_i and on the plane of g_m R_j respectively.
pub fn common_line_coords(
    ri: &Rotation,
    rj: &Rotation,
    eps_align: f64,
) -> Result<[CommonLineCoords; 4]> {
    let dirs = common_line_directions(ri, rj, eps_align)?;
    let mut out = [CommonLineCoords {
        alpha_ij: 0.0,
        alpha_ji: 0.0,
    }; 4];
    for g in KleinElement::ALL {
        let q = &dirs[g.index() - 1];
        out[g.index() - 1] = CommonLineCoords {
            alpha_ij: angle_in_plane(ri, KleinElement::G1, q),
            alpha_ji: angle_in_plane(rj, g, q),
        };
    }
    Ok(out)
}

/// In-plane coordinates of the self common lines of a single view, for
/// m = 2, 3, 4 (slots 0..2).
///
/// A slot is `None` when the beaming direction is (anti)parallel to its image
/// under g_m, in which case that self line does not exist; if all three are
/// degenerate (beaming direction on a symmetry axis) the whole call fails
/// with `AllDegenerate`.
pub fn self_common_line_coords(
    ri: &Rotation,
    eps_align: f64,
) -> Result<[Option<CommonLineCoords>; 3]> {
    let z = ri.col(2);
    let mut out = [None; 3];
    let mut any = false;
    for g in [KleinElement::G2, KleinElement::G3, KleinElement::G4] {
        let gz = g.apply(&z);
        if z.dot(&gz).abs() >= 1.0 - eps_align {
            continue;
        }
        let q = z.cross(&gz).normalize();
        out[g.index() - 2] = Some(CommonLineCoords {
            alpha_ij: angle_in_plane(ri, KleinElement::G1, &q),
            alpha_ji: angle_in_plane(ri, g, &q),
        });
        any = true;
    }
    if !any {
        return Err(Error::AllDegenerate);
    }
    Ok(out)
}

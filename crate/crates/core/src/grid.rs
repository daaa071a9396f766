//! SO(3) discretization and the precomputed common-line candidate table.
//!
//! Rotations are sampled as beaming directions from a Saff–Kuijlaars spiral
//! on the sphere crossed with L in-plane angles. For every admissible pair of
//! grid rotations the table stores the four common-line angle pairs quantized
//! to a shared ray grid, and for every grid rotation its (up to three)
//! quantized self-common-line angle pairs, so candidate scoring is pure
//! lookup into precomputed ray-correlation matrices.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::geom::{common_line_coords, self_common_line_coords, Rotation};
use crate::{Error, Result};

/// Default cosine-gap tolerance used to filter near-degenerate grid pairs.
pub const EPS_ALIGN_GRID: f64 = 0.017;

/// Beaming directions sampled pseudo-uniformly on the unit sphere.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    pub points: Vec<Vector3<f64>>,
}

/// Saff–Kuijlaars spiral of `k` points.
///
/// Points run from the south to the north pole along a spiral whose azimuth
/// increment is 3.6/√(k(1−h²)); the two poles are the endpoints. Deterministic
/// for fixed `k`.
pub fn sphere_grid(k: usize) -> Result<SphereGrid> {
    if k < 2 {
        return Err(Error::InvalidParam(format!(
            "sphere grid needs k >= 2, got {k}"
        )));
    }
    let mut points = Vec::with_capacity(k);
    let mut phi: f64 = 0.0;
    for i in 1..=k {
        let h = -1.0 + 2.0 * (i as f64 - 1.0) / (k as f64 - 1.0);
        let theta = h.clamp(-1.0, 1.0).acos();
        if i == 1 || i == k {
            phi = 0.0;
        } else {
            phi = (phi + 3.6 / (k as f64 * (1.0 - h * h)).sqrt()) % std::f64::consts::TAU;
        }
        points.push(Vector3::new(
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        ));
    }
    Ok(SphereGrid { points })
}

/// The `l` rotations whose beaming direction is `z`, at in-plane angles
/// 2πl/L.
///
/// The in-plane frame is u = normalize(−z_y, z_x, 0), w = z × u; at the poles
/// u is undefined and falls back to the x-axis. Every returned matrix has
/// determinant +1 and `z` as its third column.
pub fn inplane_rotations(z: &Vector3<f64>, l: usize) -> Vec<Rotation> {
    assert!(l >= 1);
    let planar = Vector3::new(-z.y, z.x, 0.0);
    let u = if planar.norm() < 1e-12 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        planar.normalize()
    };
    let w = z.cross(&u);
    (0..l)
        .map(|li| {
            let th = std::f64::consts::TAU * li as f64 / l as f64;
            let (s, c) = th.sin_cos();
            let c1 = u * c + w * s;
            let c2 = -u * s + w * c;
            Rotation::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[c1, c2, *z]))
        })
        .collect()
}

/// Sentinel marking an absent (degenerate) self-line entry.
pub const ABSENT_RAY: u16 = u16::MAX;

/// One admissible candidate pair: grid rotation indices and the quantized
/// ray-index pairs of its four common lines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub l: u32,
    pub r: u32,
    /// `rays[m]` = \[ray index on view l, ray index on view r\] for g_{m+1}.
    pub rays: [[u16; 2]; 4],
}

/// Quantized self-common-line ray pairs of one grid rotation, slots m = 2..4;
/// `ABSENT_RAY` marks degenerate slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfEntry {
    pub rays: [[u16; 2]; 3],
}

/// The full candidate table for Algorithm-style grid search.
#[derive(Clone, Debug)]
pub struct CandidateTable {
    pub k: usize,
    pub l: usize,
    pub l_rays: usize,
    pub eps_align: f64,
    /// K·L rotations, index = sphere index · L + in-plane index.
    pub rotations: Vec<Rotation>,
    pub pairs: Vec<PairEntry>,
    pub selfs: Vec<SelfEntry>,
}

fn quantize(alpha: f64, l_rays: usize) -> u16 {
    let step = std::f64::consts::TAU / l_rays as f64;
    ((alpha / step).round() as i64).rem_euclid(l_rays as i64) as u16
}

/// Build the table for a K×L grid with ray quantization to `l_rays` angles.
///
/// A grid pair is admissible when all four beaming-direction pairs pass the
/// `eps_align` cosine-gap filter; degenerate pairs are omitted and degenerate
/// self slots are marked absent.
pub fn build_candidate_tables(
    k: usize,
    l: usize,
    l_rays: usize,
    eps_align: f64,
) -> Result<CandidateTable> {
    if l == 0 || l_rays == 0 {
        return Err(Error::InvalidParam("l and l_rays must be positive".into()));
    }
    if !l_rays.is_multiple_of(2) {
        return Err(Error::InvalidParam(format!(
            "l_rays must be even, got {l_rays}"
        )));
    }
    let sphere = sphere_grid(k)?;
    let mut rotations = Vec::with_capacity(k * l);
    for z in &sphere.points {
        rotations.extend(inplane_rotations(z, l));
    }

    let selfs: Vec<SelfEntry> = rotations
        .par_iter()
        .map(|rot| {
            let mut entry = SelfEntry {
                rays: [[ABSENT_RAY, ABSENT_RAY]; 3],
            };
            if let Ok(lines) = self_common_line_coords(rot, eps_align) {
                for (slot, line) in lines.iter().enumerate() {
                    if let Some(c) = line {
                        entry.rays[slot] =
                            [quantize(c.alpha_ij, l_rays), quantize(c.alpha_ji, l_rays)];
                    }
                }
            }
            entry
        })
        .collect();

    let total = rotations.len();
    let pairs: Vec<PairEntry> = (0..total)
        .into_par_iter()
        .flat_map_iter(|a| {
            let rotations = &rotations;
            (a + 1..total).filter_map(move |b| {
                let coords = common_line_coords(&rotations[a], &rotations[b], eps_align).ok()?;
                let mut rays = [[0u16; 2]; 4];
                for m in 0..4 {
                    rays[m] = [
                        quantize(coords[m].alpha_ij, l_rays),
                        quantize(coords[m].alpha_ji, l_rays),
                    ];
                }
                Some(PairEntry {
                    l: a as u32,
                    r: b as u32,
                    rays,
                })
            })
        })
        .collect();

    Ok(CandidateTable {
        k,
        l,
        l_rays,
        eps_align,
        rotations,
        pairs,
        selfs,
    })
}

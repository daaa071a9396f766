//! Ground-truth data generation: D2-symmetric Gaussian-blob phantoms,
//! analytic projections, polar Fourier rays, and corrupted relative-rotation
//! quadruples for stage-isolated testing.
//!
//! Projections are computed in closed form (a line integral of an isotropic
//! Gaussian is again a Gaussian), so geometric identities hold to floating
//! point accuracy with no voxelization or interpolation error in the way.

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::commonlines::{QuadrupleSource, RelRotQuadruple};
use crate::geom::{KleinElement, Rotation};
use crate::pairs::PairVec;
use crate::{Error, Result};

/// One isotropic Gaussian density bump.
#[derive(Clone, Copy, Debug)]
pub struct GaussianBlob {
    pub center: Vector3<f64>,
    pub sigma: f64,
    pub amplitude: f64,
}

/// A D2-symmetric density: the input blobs plus their g2, g3, g4 copies.
#[derive(Clone, Debug)]
pub struct Phantom {
    blobs: Vec<GaussianBlob>,
}

/// Symmetrize a blob list into a D2-invariant phantom.
///
/// Each input blob is expanded to its four-element orbit, so the density
/// satisfies φ(g_m r) = φ(r) exactly by construction.
pub fn d2_phantom(blobs: &[GaussianBlob]) -> Result<Phantom> {
    if blobs.is_empty() {
        return Err(Error::InvalidParam(
            "phantom needs at least one blob".into(),
        ));
    }
    if let Some(b) = blobs.iter().find(|b| b.sigma <= 0.0) {
        return Err(Error::InvalidParam(format!(
            "blob sigma must be positive, got {}",
            b.sigma
        )));
    }
    let mut orbit = Vec::with_capacity(blobs.len() * 4);
    for b in blobs {
        for g in KleinElement::ALL {
            orbit.push(GaussianBlob {
                center: g.apply(&b.center),
                sigma: b.sigma,
                amplitude: b.amplitude,
            });
        }
    }
    Ok(Phantom { blobs: orbit })
}

impl Phantom {
    /// All blobs after symmetrization (4 per input blob).
    pub fn blobs(&self) -> &[GaussianBlob] {
        &self.blobs
    }

    /// Density value at a point.
    pub fn density(&self, r: &Vector3<f64>) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let d2 = (r - b.center).norm_squared();
                b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum()
    }

    /// Mirror phantom: every blob center reflected through the xy-plane.
    pub fn mirrored(&self) -> Phantom {
        Phantom {
            blobs: self
                .blobs
                .iter()
                .map(|b| GaussianBlob {
                    center: Vector3::new(b.center.x, b.center.y, -b.center.z),
                    ..*b
                })
                .collect(),
        }
    }

    /// A generic asymmetric-in-the-fundamental-domain phantom used by the
    /// simulator and tests. Blob scale assumes a ~64-pixel field of view at
    /// unit pixel size.
    pub fn default_test_phantom() -> Phantom {
        d2_phantom(&[
            GaussianBlob {
                center: Vector3::new(9.0, 3.5, 6.0),
                sigma: 1.4,
                amplitude: 1.0,
            },
            GaussianBlob {
                center: Vector3::new(-4.0, 8.0, 2.0),
                sigma: 1.7,
                amplitude: 0.9,
            },
            GaussianBlob {
                center: Vector3::new(5.0, -7.0, -9.5),
                sigma: 1.5,
                amplitude: 1.1,
            },
            GaussianBlob {
                center: Vector3::new(11.0, -2.0, 3.0),
                sigma: 1.2,
                amplitude: 0.8,
            },
        ])
        .expect("static blob list is valid")
    }
}

/// A square projection image, row-major pixels.
#[derive(Clone, Debug)]
pub struct Image {
    pub side: usize,
    pub pixel_size: f64,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    /// Physical coordinate of a pixel center along one axis.
    pub fn coord(&self, idx: usize) -> f64 {
        (idx as f64 - (self.side as f64 - 1.0) / 2.0) * self.pixel_size
    }

    pub fn variance(&self) -> f64 {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        self.pixels
            .iter()
            .map(|p| (p - mean) * (p - mean))
            .sum::<f64>()
            / n
    }
}

/// Project a phantom along the beaming direction of `r`.
///
/// The image x-axis is the first column of `r`, the y-axis the second; the
/// line integral of each Gaussian blob evaluates in closed form to
/// amplitude·σ·√(2π)·exp(−ρ²/2σ²) with ρ the in-plane distance to the blob
/// center's projection.
pub fn project(phantom: &Phantom, r: &Rotation, side: usize, pixel_size: f64) -> Image {
    assert!(side >= 8, "image side must be at least 8 pixels");
    let u1 = r.col(0);
    let u2 = r.col(1);
    let c0 = (side as f64 - 1.0) / 2.0;
    let mut pixels = vec![0.0; side * side];
    let projected: Vec<(f64, f64, f64, f64)> = phantom
        .blobs
        .iter()
        .map(|b| {
            (
                b.center.dot(&u1),
                b.center.dot(&u2),
                2.0 * b.sigma * b.sigma,
                b.amplitude * b.sigma * (2.0 * std::f64::consts::PI).sqrt(),
            )
        })
        .collect();
    for row in 0..side {
        let y = (row as f64 - c0) * pixel_size;
        for col in 0..side {
            let x = (col as f64 - c0) * pixel_size;
            let mut v = 0.0;
            for &(cx, cy, two_sig2, amp) in &projected {
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                v += amp * (-d2 / two_sig2).exp();
            }
            pixels[row * side + col] = v;
        }
    }
    Image {
        side,
        pixel_size,
        pixels,
    }
}

/// Add white Gaussian pixel noise at the given SNR (signal variance divided
/// by noise variance).
pub fn add_noise(img: &mut Image, snr: f64, rng: &mut impl Rng) {
    assert!(snr > 0.0);
    let sigma = (img.variance() / snr).sqrt();
    for p in img.pixels.iter_mut() {
        *p += sigma * sample_standard_normal(rng);
    }
}

fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; avoids a rand_distr dependency for one distribution.
    loop {
        let u1: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Polar Fourier rays of one image.
///
/// Ray `r` samples the 2D Fourier transform along the direction at angle
/// 2πr/L_rays from the image x-axis, at radii ξ_s = s·2π/(side·pixel_size)
/// for s = 1..n_rad (consecutive DFT bins, DC excluded). For real images the
/// antipodal ray is the complex conjugate.
#[derive(Clone, Debug)]
pub struct PolarImage {
    pub l_rays: usize,
    pub n_rad: usize,
    rays: Vec<Complex64>,
}

impl PolarImage {
    pub fn ray(&self, r: usize) -> &[Complex64] {
        &self.rays[r * self.n_rad..(r + 1) * self.n_rad]
    }

    pub fn ray_norm(&self, r: usize) -> f64 {
        self.ray(r).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Radial step of the polar sampling for a given image geometry.
pub fn radial_step(side: usize, pixel_size: f64) -> f64 {
    std::f64::consts::TAU / (side as f64 * pixel_size)
}

/// Default radial sample count: outermost node at roughly one third of the
/// Nyquist radius.
pub fn default_n_rad(side: usize) -> usize {
    (side / 6).max(2)
}

/// Direct nonuniform DFT of the pixel grid at the polar nodes.
///
/// Rays in the upper half circle are computed by direct summation with a
/// per-pixel phase recurrence over the radial index; antipodal rays are their
/// exact conjugates.
pub fn polar_fourier(img: &Image, l_rays: usize, n_rad: usize) -> PolarImage {
    assert!(
        l_rays >= 2 && l_rays.is_multiple_of(2),
        "l_rays must be even"
    );
    assert!(n_rad >= 2, "need at least two radial samples");
    let side = img.side;
    let dxi = radial_step(side, img.pixel_size);
    let area = img.pixel_size * img.pixel_size;
    let half = l_rays / 2;
    let mut rays = vec![Complex64::new(0.0, 0.0); l_rays * n_rad];

    let coords: Vec<f64> = (0..side).map(|i| img.coord(i)).collect();
    for r in 0..half {
        let theta = std::f64::consts::TAU * r as f64 / l_rays as f64;
        let (dir_x, dir_y) = (theta.cos(), theta.sin());
        let mut acc = vec![Complex64::new(0.0, 0.0); n_rad];
        for row in 0..side {
            let y = coords[row];
            for col in 0..side {
                let x = coords[col];
                let p = img.pixels[row * side + col];
                if p == 0.0 {
                    continue;
                }
                let phase = -dxi * (x * dir_x + y * dir_y);
                let base = Complex64::new(phase.cos(), phase.sin());
                let mut w = base;
                for s in 0..n_rad {
                    acc[s] += p * w;
                    w *= base;
                }
            }
        }
        for s in 0..n_rad {
            rays[r * n_rad + s] = acc[s] * area;
            rays[(r + half) * n_rad + s] = acc[s].conj() * area;
        }
    }
    PolarImage {
        l_rays,
        n_rad,
        rays,
    }
}

/// Parallel projection of a batch of views, with optional seeded noise.
pub fn project_images(
    phantom: &Phantom,
    rotations: &[Rotation],
    side: usize,
    pixel_size: f64,
    snr: Option<f64>,
    seed: u64,
) -> Vec<Image> {
    rotations
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut img = project(phantom, r, side, pixel_size);
            if let Some(snr) = snr {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x517cc1b7 + i as u64));
                add_noise(&mut img, snr, &mut rng);
            }
            img
        })
        .collect()
}

/// Parallel projection + polar transform of a batch of views.
pub fn polar_images(
    phantom: &Phantom,
    rotations: &[Rotation],
    side: usize,
    pixel_size: f64,
    l_rays: usize,
    n_rad: usize,
    snr: Option<f64>,
    seed: u64,
) -> Vec<PolarImage> {
    rotations
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut img = project(phantom, r, side, pixel_size);
            if let Some(snr) = snr {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x517cc1b7 + i as u64));
                add_noise(&mut img, snr, &mut rng);
            }
            polar_fourier(&img, l_rays, n_rad)
        })
        .collect()
}

/// How synthetic relative-rotation quadruples are corrupted.
#[derive(Clone, Copy, Debug)]
pub struct CorruptionSpec {
    /// Shuffle each quadruple by a random permutation of its four members.
    pub permute: bool,
    /// Probability of replacing a quadruple by its J-conjugate.
    pub jflip_prob: f64,
    /// Probability of replacing a quadruple by one from random rotations.
    pub outlier_prob: f64,
    /// Std-dev (radians) of a random rotation applied to each member.
    pub noise_sigma: f64,
}

impl CorruptionSpec {
    pub fn clean() -> Self {
        CorruptionSpec {
            permute: false,
            jflip_prob: 0.0,
            outlier_prob: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("jflip_prob", self.jflip_prob),
            ("outlier_prob", self.outlier_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!(
                    "{name} must be in [0,1], got {p}"
                )));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParam(
                "noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Synthetic quadruples plus the per-pair corruption record.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub quadruples: PairVec<RelRotQuadruple>,
    pub jflipped: PairVec<bool>,
    pub outlier: PairVec<bool>,
}

/// Uniform random rotation (Haar measure) via normalized quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
    loop {
        let q: [f64; 4] = [
            sample_standard_normal(rng),
            sample_standard_normal(rng),
            sample_standard_normal(rng),
            sample_standard_normal(rng),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-6 {
            continue;
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let m = nalgebra::Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        return Rotation::from_matrix_unchecked(m);
    }
}

/// `n` seeded uniform random rotations.
pub fn random_rotations(n: usize, seed: u64) -> Vec<Rotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_rotation(&mut rng)).collect()
}

fn small_rotation(sigma: f64, rng: &mut impl Rng) -> Rotation {
    let axis = Vector3::new(
        sample_standard_normal(rng),
        sample_standard_normal(rng),
        sample_standard_normal(rng),
    );
    let angle = sigma * axis.norm();
    if angle < 1e-15 {
        return Rotation::identity();
    }
    let a = axis.normalize();
    let k = nalgebra::Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    let m = nalgebra::Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
    Rotation::from_matrix_unchecked(m)
}

/// Exact relative-rotation quadruple of a view pair, in natural element
/// order.
pub fn true_quadruple(ri: &Rotation, rj: &Rotation) -> RelRotQuadruple {
    let rit = ri.transpose();
    let mats = KleinElement::ALL
        .map(|g| Rotation::from_matrix_unchecked(rit.matrix() * g.matrix() * rj.matrix()));
    RelRotQuadruple {
        mats,
        source: QuadrupleSource::Synthetic,
    }
}

/// Generate the quadruple for every pair of the given rotations, then apply
/// the requested corruption. Deterministic for a fixed seed.
pub fn synth_quadruples(
    rotations: &[Rotation],
    corruption: &CorruptionSpec,
    seed: u64,
) -> Result<SynthOutput> {
    let n = rotations.len();
    if n < 3 {
        return Err(Error::InvalidParam(format!(
            "need at least 3 rotations, got {n}"
        )));
    }
    corruption.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jflipped_v = Vec::new();
    let mut outlier_v = Vec::new();
    let quadruples = PairVec::from_fn(n, |i, j| {
        let is_outlier = rng.gen::<f64>() < corruption.outlier_prob;
        let mut quad = if is_outlier {
            let qa = random_rotation(&mut rng);
            let qb = random_rotation(&mut rng);
            true_quadruple(&qa, &qb)
        } else {
            true_quadruple(&rotations[i], &rotations[j])
        };
        let flip = rng.gen::<f64>() < corruption.jflip_prob;
        if flip {
            quad = quad.conjugated_by_j();
        }
        if corruption.permute {
            // Fisher-Yates over the four members
            for a in (1..4).rev() {
                let b = rng.gen_range(0..=a);
                quad.mats.swap(a, b);
            }
        }
        if corruption.noise_sigma > 0.0 {
            for m in quad.mats.iter_mut() {
                let jitter = small_rotation(corruption.noise_sigma, &mut rng);
                *m = Rotation::from_matrix_unchecked(jitter.matrix() * m.matrix());
            }
        }
        jflipped_v.push(flip);
        outlier_v.push(is_outlier);
        quad
    });
    Ok(SynthOutput {
        quadruples,
        jflipped: PairVec::from_vec(n, jflipped_v)?,
        outlier: PairVec::from_vec(n, outlier_v)?,
    })
}

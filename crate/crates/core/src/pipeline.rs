//! End-to-end orchestration: simulate or load inputs, estimate quadruples,
//! synchronize handedness, rows and signs, assemble rotations, and score
//! against ground truth when available.

use std::time::Instant;

use crate::assemble::{align_and_score, assemble_rotations, AlignmentReport, OrientationEstimate};
use crate::commonlines::{estimate_all, RelRotQuadruple};
use crate::geom::Rotation;
use crate::grid::{build_candidate_tables, CandidateTable, EPS_ALIGN_GRID};
use crate::handsync::{synchronize_hands, HandSyncReport};
use crate::pairs::PairVec;
use crate::rowsync::{
    build_omega, partition_rows, rank1_project, rank1_residual, rank1_triples, unmix_u_alpha,
    ColorVector, Rank1Triple, UnmixReport,
};
use crate::signsync::{adjust_signs, RowField, SignSyncReport};
use crate::simulate::{
    polar_images, random_rotations, true_quadruple, CorruptionSpec, Image, Phantom,
};
use crate::{Error, Result};

/// Fraction of pairs whose relative quadruple from the final estimates
/// matches the stage-1 quadruple within `tol` (geodesic, per member), under
/// the better of the two global hand branches. A consistency diagnostic, not
/// an invariant: outlier pair estimates lower it without harming the
/// synchronized solution.
pub fn pairwise_consistency(
    estimate: &OrientationEstimate,
    quadruples: &PairVec<RelRotQuadruple>,
    tol: f64,
) -> f64 {
    let n = quadruples.n();
    if estimate.rotations.len() != n || n < 2 {
        return 0.0;
    }
    let mut best = 0.0f64;
    for mirror in [false, true] {
        let rots: Vec<Rotation> = if mirror {
            estimate
                .rotations
                .iter()
                .map(crate::geom::conjugate_by_j)
                .collect()
        } else {
            estimate.rotations.clone()
        };
        let mut hits = 0usize;
        for (i, j, quad) in quadruples.iter_pairs() {
            let est_quad = true_quadruple(&rots[i], &rots[j]);
            let ok = quad
                .mats
                .iter()
                .all(|m| est_quad.mats.iter().any(|e| m.angle_to(e) < tol));
            if ok {
                hits += 1;
            }
        }
        best = best.max(hits as f64 / quadruples.len() as f64);
    }
    best
}

/// Every tunable of the pipeline; `Default` gives the desk-scale test
/// configuration.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub n_images: usize,
    pub side: usize,
    pub pixel_size: f64,
    /// Sphere grid size (beaming directions).
    pub k: usize,
    /// In-plane angles per beaming direction.
    pub l: usize,
    /// Ray count of the polar Fourier sampling and table quantization.
    pub l_rays: usize,
    /// Radial samples per ray.
    pub n_rad: usize,
    /// Cosine-gap filter for grid candidate pairs.
    pub eps_align_grid: f64,
    /// Additive pixel noise level (signal variance / noise variance);
    /// `None` means clean images.
    pub snr: Option<f64>,
    pub seed: u64,
    /// Corruption applied when synthesizing quadruples directly.
    pub corruption: CorruptionSpec,
    /// Replace each summed block with its best rank-1 approximation.
    pub rank1_enforce: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_images: 20,
            side: 64,
            pixel_size: 1.0,
            k: 200,
            l: 24,
            l_rays: 360,
            n_rad: 32,
            eps_align_grid: EPS_ALIGN_GRID,
            snr: None,
            seed: 0,
            corruption: CorruptionSpec::clean(),
            rank1_enforce: true,
        }
    }
}

/// What the pipeline starts from.
pub enum PipelineInput {
    /// Simulate `n_images` seeded views of the built-in phantom.
    Simulate,
    /// Caller-provided images, optionally with ground truth.
    Images {
        images: Vec<Image>,
        truth: Option<Vec<Rotation>>,
    },
    /// Skip estimation: start from relative-rotation quadruples.
    Quadruples {
        quadruples: PairVec<RelRotQuadruple>,
        truth: Option<Vec<Rotation>>,
    },
}

/// Stage diagnostics of one run.
#[derive(Clone, Debug, Default)]
pub struct StageTimings {
    pub table_s: f64,
    pub transform_s: f64,
    pub estimate_s: f64,
    pub handsync_s: f64,
    pub rowsync_s: f64,
    pub signsync_s: f64,
    pub assemble_s: f64,
}

/// Rank-1 quality of the summed blocks before enforcement: second-to-first
/// singular value ratios. Near zero on clean hand-consistent input; large
/// values flag residual hand errors or outlier pairs.
#[derive(Clone, Debug, Default)]
pub struct Rank1Diagnostics {
    pub max_residual: f64,
    pub mean_residual: f64,
}

/// Outputs and diagnostics of one run.
pub struct PipelineOutput {
    pub estimate: OrientationEstimate,
    pub truth: Option<Vec<Rotation>>,
    pub report: Option<AlignmentReport>,
    /// Fraction of stage-1 quadruples reproduced by the final estimates
    /// within the grid resolution.
    pub pairwise_consistency: f64,
    pub quadruples: PairVec<RelRotQuadruple>,
    pub hand_fixed: PairVec<RelRotQuadruple>,
    pub triples: PairVec<Rank1Triple>,
    pub colors: ColorVector,
    pub rank1: Rank1Diagnostics,
    pub hand_report: Option<HandSyncReport>,
    pub unmix_report: UnmixReport,
    pub sign_reports: [SignSyncReport; 3],
    pub row_fields: [RowField; 3],
    pub timings: StageTimings,
}

/// Synchronization back end shared by the pipeline and the stage CLIs:
/// hand sync, row sync, sign sync per class, assembly.
pub struct SyncOutput {
    pub estimate: OrientationEstimate,
    pub hand_fixed: PairVec<RelRotQuadruple>,
    pub triples: PairVec<Rank1Triple>,
    pub colors: ColorVector,
    pub hand_report: HandSyncReport,
    pub unmix_report: UnmixReport,
    pub sign_reports: [SignSyncReport; 3],
    pub row_fields: [RowField; 3],
    pub rank1: Rank1Diagnostics,
    pub handsync_s: f64,
    pub rowsync_s: f64,
    pub signsync_s: f64,
    pub assemble_s: f64,
}

pub fn run_sync_stages(
    quadruples: &PairVec<RelRotQuadruple>,
    rank1_enforce: bool,
) -> Result<SyncOutput> {
    let t = Instant::now();
    let (hand_fixed, hand_report) =
        synchronize_hands(quadruples).map_err(|e| e.in_stage("handsync"))?;
    let handsync_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let raw = rank1_triples(&hand_fixed, false);
    let mut residuals = raw
        .as_slice()
        .iter()
        .flat_map(|t| t.mats.iter().map(rank1_residual));
    let mut max_residual = 0.0f64;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for r in residuals.by_ref() {
        max_residual = max_residual.max(r);
        sum += r;
        count += 1;
    }
    let rank1 = Rank1Diagnostics {
        max_residual,
        mean_residual: sum / count.max(1) as f64,
    };
    let triples = if rank1_enforce {
        raw.map(|_, _, t| Rank1Triple {
            mats: [0, 1, 2].map(|m| rank1_project(&t.mats[m])),
        })
    } else {
        raw
    };
    let omega = build_omega(&triples).map_err(|e| e.in_stage("rowsync"))?;
    let (colors, unmix_report) = unmix_u_alpha(&omega).map_err(|e| e.in_stage("rowsync"))?;
    let sets = partition_rows(&colors, &triples);
    let rowsync_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut fields = Vec::with_capacity(3);
    let mut reports = Vec::with_capacity(3);
    for set in &sets {
        let (field, report) = adjust_signs(set).map_err(|e| e.in_stage("signsync"))?;
        fields.push(field);
        reports.push(report);
    }
    let fields: [RowField; 3] = fields.try_into().expect("three classes");
    let reports: [SignSyncReport; 3] = reports.try_into().expect("three classes");
    let signsync_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let estimate = assemble_rotations([&fields[0], &fields[1], &fields[2]])
        .map_err(|e| e.in_stage("assemble"))?;
    let assemble_s = t.elapsed().as_secs_f64();
    Ok(SyncOutput {
        estimate,
        hand_fixed,
        triples,
        colors,
        hand_report,
        unmix_report,
        sign_reports: reports,
        row_fields: fields,
        rank1,
        handsync_s,
        rowsync_s,
        signsync_s,
        assemble_s,
    })
}

/// Run the configured pipeline on the given input.
pub fn run_pipeline(cfg: &PipelineConfig, input: PipelineInput) -> Result<PipelineOutput> {
    let mut timings = StageTimings::default();
    let (quadruples, truth) = match input {
        PipelineInput::Quadruples { quadruples, truth } => (quadruples, truth),
        PipelineInput::Simulate => {
            let truth = random_rotations(cfg.n_images, cfg.seed);
            let quads = estimate_stage(cfg, None, &truth, &mut timings)?;
            (quads, Some(truth))
        }
        PipelineInput::Images { images, truth } => {
            if images.len() < 3 {
                return Err(Error::InvalidParam(format!(
                    "pipeline needs at least 3 images, got {}",
                    images.len()
                )));
            }
            let quads = estimate_stage_images(cfg, &images, &mut timings)?;
            (quads, truth)
        }
    };

    let sync = run_sync_stages(&quadruples, cfg.rank1_enforce)?;
    timings.handsync_s = sync.handsync_s;
    timings.rowsync_s = sync.rowsync_s;
    timings.signsync_s = sync.signsync_s;
    timings.assemble_s = sync.assemble_s;

    let report = truth.as_ref().map(|tr| align_and_score(&sync.estimate, tr));
    let resolution =
        (4.0 * std::f64::consts::PI / cfg.k as f64).sqrt() + std::f64::consts::TAU / cfg.l as f64;
    let consistency = pairwise_consistency(&sync.estimate, &quadruples, 2.0 * resolution);
    Ok(PipelineOutput {
        estimate: sync.estimate,
        truth,
        report,
        pairwise_consistency: consistency,
        quadruples,
        hand_fixed: sync.hand_fixed,
        triples: sync.triples,
        colors: sync.colors,
        rank1: sync.rank1,
        hand_report: Some(sync.hand_report),
        unmix_report: sync.unmix_report,
        sign_reports: sync.sign_reports,
        row_fields: sync.row_fields,
        timings,
    })
}

/// Build (or reuse) the candidate table for a config.
pub fn build_table(cfg: &PipelineConfig) -> Result<CandidateTable> {
    build_candidate_tables(cfg.k, cfg.l, cfg.l_rays, cfg.eps_align_grid)
}

fn estimate_stage(
    cfg: &PipelineConfig,
    table: Option<&CandidateTable>,
    truth: &[Rotation],
    timings: &mut StageTimings,
) -> Result<PairVec<RelRotQuadruple>> {
    let phantom = Phantom::default_test_phantom();
    let t = Instant::now();
    let polars = polar_images(
        &phantom,
        truth,
        cfg.side,
        cfg.pixel_size,
        cfg.l_rays,
        cfg.n_rad,
        cfg.snr,
        cfg.seed,
    );
    timings.transform_s = t.elapsed().as_secs_f64();

    let owned;
    let table = match table {
        Some(t) => t,
        None => {
            let t0 = Instant::now();
            owned = build_table(cfg)?;
            timings.table_s = t0.elapsed().as_secs_f64();
            &owned
        }
    };
    let t = Instant::now();
    let quads = estimate_all(&polars, table).map_err(|e| e.in_stage("estimate"))?;
    timings.estimate_s = t.elapsed().as_secs_f64();
    Ok(quads)
}

fn estimate_stage_images(
    cfg: &PipelineConfig,
    images: &[Image],
    timings: &mut StageTimings,
) -> Result<PairVec<RelRotQuadruple>> {
    use crate::simulate::polar_fourier;
    use rayon::prelude::*;
    let t = Instant::now();
    let polars: Vec<_> = images
        .par_iter()
        .map(|img| polar_fourier(img, cfg.l_rays, cfg.n_rad))
        .collect();
    timings.transform_s = t.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let table = build_table(cfg)?;
    timings.table_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let quads = estimate_all(&polars, &table).map_err(|e| e.in_stage("estimate"))?;
    timings.estimate_s = t1.elapsed().as_secs_f64();
    Ok(quads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::synth_quadruples;

    #[test]
    fn sync_stages_recover_planted_rotations() {
        let n = 12;
        let truth = random_rotations(n, 5);
        let synth = synth_quadruples(
            &truth,
            &CorruptionSpec {
                permute: true,
                jflip_prob: 0.3,
                outlier_prob: 0.0,
                noise_sigma: 0.0,
            },
            9,
        )
        .unwrap();
        let sync = run_sync_stages(&synth.quadruples, true).unwrap();
        let report = align_and_score(&sync.estimate, &truth);
        assert!(
            report.mean_error < 1e-7,
            "mean error {} rad",
            report.mean_error
        );
    }

    #[test]
    fn quadruple_input_runs_all_downstream_stages() {
        let n = 8;
        let truth = random_rotations(n, 6);
        let synth = synth_quadruples(
            &truth,
            &CorruptionSpec {
                permute: true,
                jflip_prob: 0.5,
                outlier_prob: 0.0,
                noise_sigma: 0.0,
            },
            3,
        )
        .unwrap();
        let cfg = PipelineConfig::default();
        let out = run_pipeline(
            &cfg,
            PipelineInput::Quadruples {
                quadruples: synth.quadruples,
                truth: Some(truth),
            },
        )
        .unwrap();
        let report = out.report.unwrap();
        assert!(report.mean_error < 1e-7, "mean {}", report.mean_error);
    }
}

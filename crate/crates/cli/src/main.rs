//! d2orient: estimate imaging rotations of D2-symmetric projection images
//! via common lines, with stage-level subcommands for testing each piece of
//! the pipeline in isolation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use d2orient_core::pipeline::{build_table, run_pipeline, PipelineConfig, PipelineInput};
use d2orient_core::rowsync::{build_omega, rank1_triples, unmix_u_alpha};
use d2orient_core::simulate::{
    polar_fourier, project_images, random_rotations, synth_quadruples, CorruptionSpec, Phantom,
};
use d2orient_core::{align_and_score, assemble_rotations, estimate_all, io, synchronize_hands};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "d2orient", version, about)]
struct Cli {
    /// Worker threads (default: available parallelism, or D2ORIENT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config file with key=value lines; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded ground-truth rotations, projection images, and
    /// optionally corrupted relative-rotation quadruples.
    Simulate(SimulateArgs),
    /// Estimate the relative-rotation quadruple of every image pair by grid
    /// search.
    Estimate(EstimateArgs),
    /// Resolve the per-pair mirror ambiguity of a quadruple dump.
    Handsync(InOutArgs),
    /// Collapse quadruples to rank-1 triples and recover the row coloring.
    Rowsync(RowsyncArgs),
    /// Synchronize block signs per color class and extract the row fields.
    Signsync(InOutArgs),
    /// Stack synchronized row fields into rotations.
    Assemble(InOutArgs),
    /// Score estimated rotations against ground truth.
    Eval(EvalArgs),
    /// Run all stages end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonParams,
    /// Output image stack path.
    #[arg(long)]
    out_images: Option<PathBuf>,
    /// Output ground-truth rotations path.
    #[arg(long)]
    out_rotations: Option<PathBuf>,
    /// Also synthesize (optionally corrupted) quadruples to this path.
    #[arg(long)]
    emit_quadruples: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonParams,
    /// Input image stack.
    #[arg(long)]
    images: PathBuf,
    /// Output quadruple dump.
    #[arg(long)]
    out: PathBuf,
    /// Candidate table cache: loaded when present and matching, written
    /// otherwise.
    #[arg(long)]
    table_cache: Option<PathBuf>,
}

#[derive(Args)]
struct InOutArgs {
    /// Input path (quadruples for handsync, triples for signsync, row
    /// fields for assemble).
    #[arg(long, alias = "quadruples", alias = "triples", alias = "rows")]
    input: PathBuf,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RowsyncArgs {
    /// Input quadruple dump (hand-consistent).
    #[arg(long, alias = "quadruples")]
    input: PathBuf,
    /// Output triple dump with color assignment.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonParams,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated rotations (text format).
    #[arg(long)]
    estimate: PathBuf,
    /// Ground-truth rotations (text format).
    #[arg(long)]
    truth: PathBuf,
    /// Write the report to this path as well as stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: CommonParams,
    /// Simulate the input images (default when no input is given).
    #[arg(long)]
    simulate: bool,
    /// Input image stack (skips simulation).
    #[arg(long)]
    images: Option<PathBuf>,
    /// Input quadruple dump (skips simulation and estimation).
    #[arg(long)]
    quadruples: Option<PathBuf>,
    /// Ground-truth rotations for scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write estimated rotations here.
    #[arg(long)]
    out_rotations: Option<PathBuf>,
    /// Write the alignment report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Dump intermediate artifacts into this directory.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

/// Numeric knobs shared by several subcommands; unset flags fall back to the
/// config file, then to the built-in defaults.
#[derive(Args, Clone, Default)]
struct CommonParams {
    /// Number of simulated images.
    #[arg(long)]
    n: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    side: Option<usize>,
    /// Pixel size (arbitrary length units).
    #[arg(long)]
    pixel_size: Option<f64>,
    /// Sphere grid size (beaming directions).
    #[arg(long)]
    k: Option<usize>,
    /// In-plane angles per beaming direction.
    #[arg(long)]
    l: Option<usize>,
    /// Fourier rays per image (even).
    #[arg(long)]
    l_rays: Option<usize>,
    /// Radial samples per ray.
    #[arg(long)]
    n_rad: Option<usize>,
    /// Cosine-gap filter for candidate pairs.
    #[arg(long)]
    eps_align: Option<f64>,
    /// Pixel noise level as signal/noise variance ratio; omit for clean.
    #[arg(long)]
    snr: Option<f64>,
    /// Seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Randomly permute synthesized quadruple members.
    #[arg(long)]
    permute: bool,
    /// Probability of mirror-conjugating a synthesized quadruple.
    #[arg(long)]
    jflip_prob: Option<f64>,
    /// Probability of replacing a synthesized quadruple by an outlier.
    #[arg(long)]
    outlier_prob: Option<f64>,
    /// Angular jitter (radians) on synthesized quadruple members.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Disable the rank-1 projection of summed blocks.
    #[arg(long)]
    no_rank1_enforce: bool,
}

/// Parsed key=value config file.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    bail!("config line {}: expected key=value, got {line:?}", ln + 1);
                };
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key {key}: {e}")),
        }
    }

    fn get_bool(&self, key: &str) -> Result<bool> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }
}

fn resolve_config(common: &CommonParams, file: &FileConfig) -> Result<PipelineConfig> {
    let d = PipelineConfig::default();
    Ok(PipelineConfig {
        n_images: common.n.or(file.get("n_images")?).unwrap_or(d.n_images),
        side: common.side.or(file.get("side")?).unwrap_or(d.side),
        pixel_size: common
            .pixel_size
            .or(file.get("pixel_size")?)
            .unwrap_or(d.pixel_size),
        k: common.k.or(file.get("k")?).unwrap_or(d.k),
        l: common.l.or(file.get("l")?).unwrap_or(d.l),
        l_rays: common.l_rays.or(file.get("l_rays")?).unwrap_or(d.l_rays),
        n_rad: common.n_rad.or(file.get("n_rad")?).unwrap_or(d.n_rad),
        eps_align_grid: common
            .eps_align
            .or(file.get("eps_align")?)
            .unwrap_or(d.eps_align_grid),
        snr: common.snr.or(file.get("snr")?),
        seed: common.seed.or(file.get("seed")?).unwrap_or(d.seed),
        corruption: CorruptionSpec {
            permute: common.permute || file.get_bool("permute")?,
            jflip_prob: common.jflip_prob.or(file.get("jflip_prob")?).unwrap_or(0.0),
            outlier_prob: common
                .outlier_prob
                .or(file.get("outlier_prob")?)
                .unwrap_or(0.0),
            noise_sigma: common
                .noise_sigma
                .or(file.get("noise_sigma")?)
                .unwrap_or(0.0),
        },
        rank1_enforce: !(common.no_rank1_enforce || file.get_bool("no_rank1_enforce")?),
    })
}

fn init_threads(threads: Option<usize>, file: &FileConfig) -> Result<()> {
    let from_env = std::env::var("D2ORIENT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let n = threads.or(from_env).or(file.get("threads")?);
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing thread pool")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = FileConfig::load(cli.config.as_deref())?;
    init_threads(cli.threads, &file)?;
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, &file),
        Command::Estimate(args) => cmd_estimate(args, &file),
        Command::Handsync(args) => cmd_handsync(args),
        Command::Rowsync(args) => cmd_rowsync(args, &file),
        Command::Signsync(args) => cmd_signsync(args),
        Command::Assemble(args) => cmd_assemble(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Pipeline(args) => cmd_pipeline(args, &file),
    }
}

fn cmd_simulate(args: SimulateArgs, file: &FileConfig) -> Result<()> {
    let cfg = resolve_config(&args.common, file)?;
    let truth = random_rotations(cfg.n_images, cfg.seed);
    if let Some(path) = &args.out_rotations {
        io::write_rotations(path, &truth)?;
        println!("wrote {} rotations to {}", truth.len(), path.display());
    }
    if let Some(path) = &args.out_images {
        let phantom = Phantom::default_test_phantom();
        let images = project_images(
            &phantom,
            &truth,
            cfg.side,
            cfg.pixel_size,
            cfg.snr,
            cfg.seed,
        );
        io::write_image_stack(path, &images)?;
        println!(
            "wrote {} images ({}x{}) to {}",
            images.len(),
            cfg.side,
            cfg.side,
            path.display()
        );
    }
    if let Some(path) = &args.emit_quadruples {
        let synth = synth_quadruples(&truth, &cfg.corruption, cfg.seed)?;
        io::write_quadruples(path, &synth.quadruples)?;
        println!(
            "wrote {} quadruples to {} (jflips: {}, outliers: {})",
            synth.quadruples.len(),
            path.display(),
            synth.jflipped.iter_pairs().filter(|(_, _, &f)| f).count(),
            synth.outlier.iter_pairs().filter(|(_, _, &f)| f).count(),
        );
    }
    if args.out_rotations.is_none() && args.out_images.is_none() && args.emit_quadruples.is_none() {
        bail!("simulate: nothing to do; pass --out-images, --out-rotations or --emit-quadruples");
    }
    Ok(())
}

fn load_or_build_table(
    cfg: &PipelineConfig,
    cache: Option<&Path>,
) -> Result<d2orient_core::CandidateTable> {
    if let Some(path) = cache {
        if path.exists() {
            match io::read_table_cache(path, cfg.k, cfg.l, cfg.l_rays, cfg.eps_align_grid) {
                Ok(t) => {
                    eprintln!("loaded candidate table from {}", path.display());
                    return Ok(t);
                }
                Err(e) => eprintln!("table cache unusable ({e}); rebuilding"),
            }
        }
    }
    let table = build_table(cfg)?;
    if let Some(path) = cache {
        io::write_table_cache(path, &table)?;
        eprintln!("cached candidate table at {}", path.display());
    }
    Ok(table)
}

fn cmd_estimate(args: EstimateArgs, file: &FileConfig) -> Result<()> {
    let cfg = resolve_config(&args.common, file)?;
    let images = io::read_image_stack(&args.images)?;
    let table = load_or_build_table(&cfg, args.table_cache.as_deref())?;
    let polars: Vec<_> = images
        .par_iter()
        .map(|img| polar_fourier(img, cfg.l_rays, cfg.n_rad))
        .collect();
    let quads = estimate_all(&polars, &table)?;
    io::write_quadruples(&args.out, &quads)?;
    println!(
        "estimated {} pair quadruples from {} images -> {}",
        quads.len(),
        images.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_handsync(args: InOutArgs) -> Result<()> {
    let quads = io::read_quadruples(&args.input)?;
    let (fixed, report) = synchronize_hands(&quads)?;
    io::write_quadruples(&args.out, &fixed)?;
    println!(
        "hand-synchronized {} pairs (leading eigenvalue {:.4}, flipped {}) -> {}",
        fixed.len(),
        report.leading_eigenvalue,
        report.flipped_pairs,
        args.out.display()
    );
    Ok(())
}

fn cmd_rowsync(args: RowsyncArgs, file: &FileConfig) -> Result<()> {
    let cfg = resolve_config(&args.common, file)?;
    let quads = io::read_quadruples(&args.input)?;
    let triples = rank1_triples(&quads, cfg.rank1_enforce);
    let omega = build_omega(&triples)?;
    let (colors, report) = unmix_u_alpha(&omega)?;
    let color_list: Vec<[usize; 3]> = (0..triples.len()).map(|p| colors.pair_colors(p)).collect();
    io::write_triples(&args.out, &triples, &color_list)?;
    println!(
        "row-synchronized {} pairs (rayleigh {:.4}, ambiguous: {}) -> {}",
        triples.len(),
        report.rayleigh,
        report.ambiguous,
        args.out.display()
    );
    Ok(())
}

fn cmd_signsync(args: InOutArgs) -> Result<()> {
    let (triples, colors) = io::read_triples(&args.input)?;
    // regroup the stored slot matrices by their color assignment
    let pick = |color: usize| {
        d2orient_core::PairVec::from_fn(triples.n(), |i, j| {
            let p = d2orient_core::pairs::pair_index(triples.n(), i, j);
            let slot = (0..3)
                .find(|&s| colors[p][s] == color)
                .expect("color assignment covers all slots");
            triples.get(i, j).mats[slot]
        })
    };
    let mut fields = Vec::new();
    for color in 0..3 {
        let set = pick(color);
        let (field, report) = d2orient_core::adjust_signs(&set)?;
        println!(
            "class {color}: sign eigenvalue {:.4}, rank-1 gap {:.2e}, degenerate dots {}",
            report.s_eigenvalue, report.h_tilde_gap, report.degenerate_dots
        );
        fields.push(field);
    }
    let fields: [d2orient_core::RowField; 3] = match fields.try_into() {
        Ok(f) => f,
        Err(_) => unreachable!("three classes"),
    };
    io::write_row_fields(&args.out, &fields)?;
    println!("wrote row fields -> {}", args.out.display());
    Ok(())
}

fn cmd_assemble(args: InOutArgs) -> Result<()> {
    let fields = io::read_row_fields(&args.input)?;
    let est = assemble_rotations([&fields[0], &fields[1], &fields[2]])?;
    io::write_rotations(&args.out, &est.rotations)?;
    println!(
        "assembled {} rotations -> {}",
        est.rotations.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let est = io::read_rotations(&args.estimate)?;
    let truth = io::read_rotations(&args.truth)?;
    if est.len() != truth.len() {
        bail!(
            "estimate has {} rotations, truth has {}",
            est.len(),
            truth.len()
        );
    }
    let report = align_and_score(
        &d2orient_core::OrientationEstimate { rotations: est },
        &truth,
    );
    let text = format!("{}\n{}", report.text_table(), report.summary_kv());
    println!("{text}");
    if let Some(path) = &args.report {
        std::fs::write(path, &text)?;
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs, file: &FileConfig) -> Result<()> {
    let cfg = resolve_config(&args.common, file)?;
    let input = if let Some(qpath) = &args.quadruples {
        let quadruples = io::read_quadruples(qpath)?;
        let truth = args.truth.as_deref().map(io::read_rotations).transpose()?;
        PipelineInput::Quadruples { quadruples, truth }
    } else if let Some(ipath) = &args.images {
        let images = io::read_image_stack(ipath)?;
        let truth = args.truth.as_deref().map(io::read_rotations).transpose()?;
        PipelineInput::Images { images, truth }
    } else {
        PipelineInput::Simulate
    };
    let out = run_pipeline(&cfg, input)?;

    if let Some(dir) = &args.dump_dir {
        std::fs::create_dir_all(dir)?;
        io::write_quadruples(&dir.join("quadruples.d2quad"), &out.quadruples)?;
        io::write_quadruples(&dir.join("handfixed.d2quad"), &out.hand_fixed)?;
        let color_list: Vec<[usize; 3]> = (0..out.triples.len())
            .map(|p| out.colors.pair_colors(p))
            .collect();
        io::write_triples(&dir.join("triples.d2trip"), &out.triples, &color_list)?;
        io::write_row_fields(&dir.join("rows.d2rows"), &out.row_fields)?;
        if let Some(truth) = &out.truth {
            io::write_rotations(&dir.join("truth.txt"), truth)?;
        }
    }
    if let Some(path) = &args.out_rotations {
        io::write_rotations(path, &out.estimate.rotations)?;
    }

    println!(
        "pipeline finished: {} rotations estimated",
        out.estimate.rotations.len()
    );
    println!(
        "timings: table {:.1}s, transform {:.1}s, estimate {:.1}s, handsync {:.1}s, rowsync {:.1}s, signsync {:.1}s, assemble {:.1}s",
        out.timings.table_s,
        out.timings.transform_s,
        out.timings.estimate_s,
        out.timings.handsync_s,
        out.timings.rowsync_s,
        out.timings.signsync_s,
        out.timings.assemble_s
    );
    println!(
        "rank-1 residuals of summed blocks: max {:.2e}, mean {:.2e}",
        out.rank1.max_residual, out.rank1.mean_residual
    );
    if let Some(hand) = &out.hand_report {
        println!(
            "handsync: eigenvalue {:.4}, flipped {}",
            hand.leading_eigenvalue, hand.flipped_pairs
        );
    }
    println!(
        "rowsync: rayleigh {:.4}, ambiguous {}",
        out.unmix_report.rayleigh, out.unmix_report.ambiguous
    );
    println!(
        "pairwise consistency: {:.1}% of stage-1 quadruples reproduced",
        100.0 * out.pairwise_consistency
    );
    for (c, r) in out.sign_reports.iter().enumerate() {
        println!(
            "signsync class {c}: eigenvalue {:.4}, rank-1 gap {:.2e}",
            r.s_eigenvalue, r.h_tilde_gap
        );
    }
    if let Some(report) = &out.report {
        let text = format!("{}\n{}", report.text_table(), report.summary_kv());
        println!("{text}");
        if let Some(path) = &args.report {
            std::fs::write(path, &text)?;
        }
    } else if args.report.is_some() {
        bail!("--report requires ground truth (simulated input or --truth)");
    }
    Ok(())
}

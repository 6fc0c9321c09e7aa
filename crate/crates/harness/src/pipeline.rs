//! Object in, images and report out.

use std::fs;
use std::path::{Path, PathBuf};

use mgi_core::correlation::{
    build_covariance, build_measurement_operator, CovarianceBlocks, Detectors, GhostSource,
    MeasurementModel, NoiseOptions, ObjectImage, N_REFERENCE,
};
use mgi_core::metrics::{correlation_matrix, image_covariance, mse, snr, SnrReport};
use mgi_core::optics::{converter_matrix, Grid};
use mgi_core::reduction::{iterate_reduction, ReductionResult};
use nalgebra::{DMatrix, Matrix3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::acquisition::{sample_acquisition, AcquisitionRecord};
use crate::config::{DetectorModel, ExperimentConfig, ObjectSource};
use crate::error::{HarnessError, Result};
use crate::image_io::{builtin_object, load_object, write_csv, write_pgm16, write_png8, GLYPH_PGM};
use crate::report::{IterationRecord, ReportDoc};

/// Everything computed by one run, before anything is written.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub truth: ObjectImage,
    pub source: GhostSource,
    pub model: MeasurementModel,
    pub covariance: CovarianceBlocks,
    pub acquisition: AcquisitionRecord,
    /// Grid of the displayed ghost images (the bin grid for binned detectors).
    pub image_grid: Grid,
    /// De-inverted ghost images of arms 2, 3, 4.
    pub ghost_images: [Vec<f64>; N_REFERENCE],
    pub sum_image: Vec<f64>,
    pub reduction: ReductionResult,
    pub report: ReportDoc,
}

fn binning_matrix(grid: Grid, b: usize) -> DMatrix<f64> {
    let bins = Grid {
        rows: grid.rows / b,
        cols: grid.cols / b,
    };
    let mut m = DMatrix::zeros(bins.n_pixels(), grid.n_pixels());
    for d in 0..grid.n_pixels() {
        let (r, c) = (d / grid.cols, d % grid.cols);
        m[((r / b) * bins.cols + c / b, d)] = 1.0;
    }
    m
}

fn detectors(cfg: &ExperimentConfig) -> (Detectors, Grid) {
    let grid = cfg.params.grid;
    match cfg.detectors {
        DetectorModel::Ideal => (Detectors::Ideal, grid),
        DetectorModel::Binned(b) => {
            let m = binning_matrix(grid, b);
            (
                Detectors::Matrices([m.clone(), m.clone(), m]),
                Grid {
                    rows: grid.rows / b,
                    cols: grid.cols / b,
                },
            )
        }
    }
}

/// Loads the configured object and returns it with its raw bytes.
pub fn load_configured_object(cfg: &ExperimentConfig) -> Result<(ObjectImage, Vec<u8>)> {
    match &cfg.object {
        ObjectSource::Builtin => Ok((builtin_object(cfg.params.grid)?, GLYPH_PGM.to_vec())),
        ObjectSource::Path(p) => {
            let f = load_object(p, Some(cfg.params.grid))?;
            let bytes = fs::read(p).map_err(|e| HarnessError::io(p, e))?;
            Ok((f, bytes))
        }
    }
}

/// Mean over `b x b` bins of an object-grid image.
fn bin_image(grid: Grid, values: &[f64], b: usize) -> Vec<f64> {
    let m = binning_matrix(grid, b);
    let v = &m * nalgebra::DVector::from_column_slice(values) / (b * b) as f64;
    v.as_slice().to_vec()
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let (truth, object_bytes) = load_configured_object(cfg)?;
    let fingerprint = cfg.fingerprint(&object_bytes);
    let grid = cfg.params.grid;

    let source = GhostSource::new(converter_matrix(&cfg.params)?)?;
    let (dets, image_grid) = detectors(cfg);
    let model = build_measurement_operator(grid, source.coefficients(), dets)?;
    let options = NoiseOptions {
        n_frames: cfg.params.n_frames,
        white_noise: cfg.white_noise,
        block_diagonal: cfg.block_diagonal,
    };
    let covariance = build_covariance(&truth, &source, options, model.detectors())?;

    let acquisition = if cfg.noise {
        sample_acquisition(&model, &covariance, &truth, cfg.seed, cfg.params.n_frames, &fingerprint)?
    } else {
        AcquisitionRecord {
            xi: model.apply(truth.values())?.as_slice().to_vec(),
            seed: cfg.seed,
            n_frames: cfg.params.n_frames,
            fingerprint: fingerprint.clone(),
        }
    };

    let m = image_grid.n_pixels();
    let ghost_images: [Vec<f64>; N_REFERENCE] = std::array::from_fn(|k| {
        let block = &acquisition.xi[k * m..(k + 1) * m];
        (0..m).map(|p| block[image_grid.invert(p)]).collect()
    });
    let sum_image: Vec<f64> = (0..m)
        .map(|p| ghost_images[0][p] + ghost_images[1][p] + ghost_images[2][p])
        .collect();

    let xi = nalgebra::DVector::from_column_slice(&acquisition.xi);
    let reduction = iterate_reduction(&xi, &model, &source, options, &cfg.reduction)?;

    let image_truth = match cfg.detectors {
        DetectorModel::Ideal => truth.clone(),
        DetectorModel::Binned(b) => ObjectImage::new(image_grid, bin_image(grid, truth.values(), b))?,
    };
    let snr_arm: [Option<f64>; N_REFERENCE] =
        std::array::from_fn(|k| snr(&ghost_images[k], &image_truth).ok());
    let snr_sum = snr(&sum_image, &image_truth).ok();
    let snr_reduced = snr(reduction.estimate.values(), &truth).ok();
    let c = source.coefficients();
    let cov = image_covariance(&covariance);
    let corr = correlation_matrix(&cov);
    let as_rows = |m: &Matrix3<f64>| -> [[f64; 3]; 3] { std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])) };

    let full = match (snr_arm, snr_sum, snr_reduced) {
        ([Some(a), Some(b), Some(d)], Some(s), Some(r)) => Some(SnrReport::new(c, cov, [a, b, d], s, r)),
        _ => None,
    };
    let report = ReportDoc {
        grid: grid.to_string(),
        seed: cfg.seed,
        n_frames: cfg.params.n_frames,
        noise: cfg.noise,
        fingerprint: fingerprint.clone(),
        c_coeffs: c,
        image_cov: as_rows(&cov),
        image_corr: as_rows(&corr),
        snr_arm,
        snr_sum,
        snr_reduced,
        best_arm: full.as_ref().map(|r| r.best_arm as u8 + 2),
        reduced_over_best: full.as_ref().and_then(|r| r.reduced_over_best),
        reduced_over_sum: full.as_ref().and_then(|r| r.reduced_over_sum),
        sum_over_best: full.as_ref().and_then(|r| r.sum_over_best),
        theoretical_sum_ratio: full.as_ref().and_then(|r| r.theoretical_sum_ratio),
        mse_reduced: mse(reduction.estimate.values(), truth.values())?,
        iterations: reduction.iterations,
        converged: reduction.converged,
        trajectory: reduction
            .diagnostics
            .iter()
            .map(|d| IterationRecord {
                iteration: d.iteration,
                residual: d.residual,
                change: d.change,
                kappa: d.kappa,
            })
            .collect(),
    };

    Ok(Simulation {
        truth,
        source,
        model,
        covariance,
        acquisition,
        image_grid,
        ghost_images,
        sum_image,
        reduction,
        report,
    })
}

#[derive(Debug, Serialize)]
struct ManifestFile {
    name: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: String,
    seed: u64,
    fingerprint: &'a str,
    config: String,
    files: Vec<ManifestFile>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Files written, manifest last.
    pub files: Vec<PathBuf>,
    pub report: ReportDoc,
}

fn write_image(dir: &Path, stem: &str, grid: Grid, values: &[f64], files: &mut Vec<PathBuf>) -> Result<()> {
    for (ext, writer) in [
        ("pgm", write_pgm16 as fn(&Path, Grid, &[f64]) -> Result<()>),
        ("png", write_png8),
        ("csv", write_csv),
    ] {
        let path = dir.join(format!("{stem}.{ext}"));
        writer(&path, grid, values)?;
        files.push(path);
    }
    Ok(())
}

fn write_text(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    files.push(path);
    Ok(())
}

pub const MANIFEST: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Runs the experiment and writes its artifacts into `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let sim = simulate(cfg)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let mut files = Vec::new();

    write_image(&dir, "object", sim.truth.grid(), sim.truth.values(), &mut files)?;
    if cfg.emit.ghost_images {
        for (k, img) in sim.ghost_images.iter().enumerate() {
            write_image(&dir, &format!("ghost_arm{}", k + 2), sim.image_grid, img, &mut files)?;
        }
    }
    if cfg.emit.sum {
        write_image(&dir, "ghost_sum", sim.image_grid, &sim.sum_image, &mut files)?;
    }
    if cfg.emit.reduced {
        write_image(&dir, "reduced", sim.truth.grid(), sim.reduction.estimate.values(), &mut files)?;
    }
    if cfg.emit.report {
        write_text(dir.join(REPORT_TEXT), &sim.report.to_text(), &mut files)?;
        write_text(dir.join(REPORT_JSON), &sim.report.to_json(), &mut files)?;
    }

    let mut listed = Vec::new();
    for path in &files {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        listed.push(ManifestFile {
            name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        tool: format!("mgi {}", env!("CARGO_PKG_VERSION")),
        seed: cfg.seed,
        fingerprint: &sim.report.fingerprint,
        config: cfg.canonical(),
        files: listed,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    text.push('\n');
    write_text(dir.join(MANIFEST), &text, &mut files)?;

    Ok(RunOutput {
        dir,
        files,
        report: sim.report,
    })
}

/// Reads `report.json` from a run directory.
pub fn read_report(dir: &Path) -> Result<ReportDoc> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

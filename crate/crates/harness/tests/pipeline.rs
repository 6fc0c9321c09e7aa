use std::fs;
use std::path::Path;
use std::time::Instant;

use mgi_core::correlation::{
    build_measurement_operator, ghost_image_mean, CovarianceBlocks, Detectors, ObjectImage,
};
use mgi_core::optics::Grid;
use mgi_harness::acquisition::sample_acquisition;
use mgi_harness::config::{DetectorModel, ExperimentConfig, ObjectSource};
use mgi_harness::image_io::{decode_csv, load_object};
use mgi_harness::pipeline::{read_report, run_pipeline, simulate};
use mgi_harness::HarnessError;
use nalgebra::DMatrix;

fn grid(r: usize, c: usize) -> Grid {
    Grid::new(r, c).unwrap()
}

fn write_pgm(path: &Path, rows: usize, cols: usize, value: u8) {
    let mut bytes = format!("P5\n# test\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(std::iter::repeat_n(value, rows * cols));
    fs::write(path, bytes).unwrap();
}

fn write_csv(path: &Path, rows: usize, cols: usize, value: &str) {
    let line = vec![value; cols].join(",");
    fs::write(path, vec![line; rows].join("\n")).unwrap();
}

fn config_for(object: &Path, g: Grid, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.params.grid = g;
    cfg.object = ObjectSource::Path(object.to_path_buf());
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn load_object_handles_extremes_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let white = dir.path().join("white.pgm");
    let black = dir.path().join("black.pgm");
    let quarter = dir.path().join("quarter.csv");
    write_pgm(&white, 3, 5, 255);
    write_pgm(&black, 3, 5, 0);
    write_csv(&quarter, 4, 2, "0.25");

    let f = load_object(&white, Some(grid(3, 5))).unwrap();
    assert!(f.values().iter().all(|&v| v == 1.0));
    let f = load_object(&black, None).unwrap();
    assert!(f.values().iter().all(|&v| v == 0.0));
    let f = load_object(&quarter, Some(grid(4, 2))).unwrap();
    assert_eq!(f.grid(), grid(4, 2));
    assert!(f.values().iter().all(|&v| v == 0.25));
}

#[test]
fn load_object_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let white = dir.path().join("white.pgm");
    write_pgm(&white, 3, 5, 255);
    let err = load_object(&white, Some(grid(5, 3))).unwrap_err();
    assert!(matches!(err, HarnessError::Image { .. }));
    assert_eq!(err.exit_code(), 2);

    let over = dir.path().join("over.csv");
    write_csv(&over, 2, 2, "1.5");
    assert!(matches!(load_object(&over, None), Err(HarnessError::Image { .. })));

    let ragged = dir.path().join("ragged.csv");
    fs::write(&ragged, "0,1\n1\n").unwrap();
    assert!(load_object(&ragged, None).is_err());

    assert!(matches!(
        load_object(&dir.path().join("missing.pgm"), None),
        Err(HarnessError::Io { .. })
    ));
}

#[test]
fn transparent_object_without_noise() {
    let dir = tempfile::tempdir().unwrap();
    let obj = dir.path().join("ones.csv");
    write_csv(&obj, 4, 4, "1");
    let mut cfg = config_for(&obj, grid(4, 4), &dir.path().join("run"));
    cfg.noise = false;
    let sim = simulate(&cfg).unwrap();
    let c = sim.source.coefficients();
    for (k, img) in sim.ghost_images.iter().enumerate() {
        for &v in img {
            assert!((v - c[k]).abs() <= 1e-15 * c[k], "arm {}: {v} vs {}", k + 2, c[k]);
        }
    }
    for (p, &s) in sim.sum_image.iter().enumerate() {
        assert_eq!(s, sim.ghost_images[0][p] + sim.ghost_images[1][p] + sim.ghost_images[2][p]);
    }
    for &v in sim.reduction.estimate.values() {
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }
}

#[test]
fn noiseless_ghost_images_are_the_means() {
    let mut cfg = ExperimentConfig::default();
    cfg.params.grid = grid(8, 6);
    cfg.noise = false;
    let sim = simulate(&cfg).unwrap();
    let c = sim.source.coefficients();
    for k in 0..3 {
        // The displayed image is de-inverted, so it equals the mean map read back through the inversion.
        let mean = ghost_image_mean(&sim.truth, c[k]);
        let g = sim.image_grid;
        for p in 0..g.n_pixels() {
            let want = mean[g.invert(p)];
            assert!((sim.ghost_images[k][p] - want).abs() <= 1e-12 * c[k]);
        }
    }
}

#[test]
fn sum_image_is_the_sum_of_ghost_images() {
    let mut cfg = ExperimentConfig::default();
    cfg.params.grid = grid(8, 8);
    cfg.seed = 3;
    let sim = simulate(&cfg).unwrap();
    for (p, &s) in sim.sum_image.iter().enumerate() {
        assert_eq!(s, sim.ghost_images[0][p] + sim.ghost_images[1][p] + sim.ghost_images[2][p]);
    }
}

#[test]
fn zero_covariance_gives_the_exact_means() {
    let g = grid(2, 3);
    let model = build_measurement_operator(g, [1.0, 2.0, 3.0], Detectors::Ideal).unwrap();
    let f = ObjectImage::new(g, vec![0.0, 0.5, 1.0, 1.0, 0.25, 0.0]).unwrap();
    let sigma = CovarianceBlocks::Dense {
        matrix: DMatrix::zeros(18, 18),
        block_rows: [6, 6, 6],
    };
    let rec = sample_acquisition(&model, &sigma, &f, 11, 1, "x").unwrap();
    assert_eq!(rec.xi, model.apply(f.values()).unwrap().as_slice());
}

#[test]
fn fixed_seed_is_bitwise_reproducible() {
    let mut cfg = ExperimentConfig::default();
    cfg.params.grid = grid(8, 8);
    cfg.seed = 42;
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.acquisition.xi), bits(&b.acquisition.xi));
    assert_eq!(a.acquisition.fingerprint, b.acquisition.fingerprint);
    cfg.seed = 43;
    let c = simulate(&cfg).unwrap();
    assert_ne!(bits(&a.acquisition.xi), bits(&c.acquisition.xi));
}

#[test]
fn smoke_run_writes_everything_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.params.grid = grid(8, 8);
    cfg.seed = 7;
    cfg.output_dir = dir.path().join("smoke");
    let start = Instant::now();
    let out = run_pipeline(&cfg).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);

    let names: Vec<String> = out
        .files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for stem in ["object", "ghost_arm2", "ghost_arm3", "ghost_arm4", "ghost_sum", "reduced"] {
        for ext in ["pgm", "png", "csv"] {
            assert!(names.contains(&format!("{stem}.{ext}")), "{stem}.{ext}");
        }
    }
    assert_eq!(names.last().map(String::as_str), Some("manifest.json"));

    let back = read_report(&out.dir).unwrap();
    assert_eq!(back, out.report);
    assert_eq!(back.grid, "8x8");

    // CSV output round-trips exactly.
    let text = fs::read_to_string(out.dir.join("reduced.csv")).unwrap();
    let raster = decode_csv(&text, Path::new("reduced.csv")).unwrap();
    let sim = simulate(&cfg).unwrap();
    assert_eq!(raster.values, sim.reduction.estimate.values());
}

#[test]
fn emit_flags_limit_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.params.grid = grid(4, 4);
    cfg.output_dir = dir.path().to_path_buf();
    cfg.emit.ghost_images = false;
    cfg.emit.sum = false;
    let out = run_pipeline(&cfg).unwrap();
    assert!(!dir.path().join("ghost_arm2.pgm").exists());
    assert!(!dir.path().join("ghost_sum.csv").exists());
    assert!(dir.path().join("reduced.png").exists());
    assert_eq!(out.files.len(), 3 + 3 + 2 + 1);
}

#[test]
fn binned_detectors_shrink_the_ghost_images() {
    let mut cfg = ExperimentConfig::default();
    cfg.params.grid = grid(8, 8);
    cfg.detectors = DetectorModel::Binned(2);
    cfg.noise = false;
    let sim = simulate(&cfg).unwrap();
    assert_eq!(sim.image_grid, grid(4, 4));
    assert_eq!(sim.ghost_images[0].len(), 16);
    assert_eq!(sim.reduction.estimate.grid(), grid(8, 8));
}

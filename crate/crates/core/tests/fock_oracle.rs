use mgi_core::correlation::{
    covariance_block, mean_intensity, GhostSource, NoiseOptions, ObjectImage,
};
use mgi_core::optics::{converter_matrix, Arm, Grid, PhysicalParams};
use mgi_fock_oracle::{ghost_covariance, PixelDistribution};

use std::sync::OnceLock;

const TOL: f64 = 1e-6;

const CASES: [(f64, f64); 5] = [(0.3, 0.4), (0.5, 0.0), (0.5, 0.4), (1.0, 0.4), (1.0, 1.0)];

fn oracle(case: usize) -> &'static PixelDistribution {
    static CACHE: OnceLock<Vec<PixelDistribution>> = OnceLock::new();
    &CACHE.get_or_init(|| {
        CASES
            .iter()
            .map(|&(z, x)| PixelDistribution::new(z, x))
            .collect()
    })[case]
}

fn close(a: f64, b: f64, what: &str) {
    let scale = a.abs().max(b.abs());
    assert!(
        (a - b).abs() <= TOL * scale + 1e-12,
        "{what}: model {a:e}, oracle {b:e}"
    );
}

fn source(zeta: f64, ratio: f64) -> GhostSource {
    let p = PhysicalParams {
        zeta,
        coupling_ratio: ratio,
        ..PhysicalParams::reference()
    };
    GhostSource::new(converter_matrix(&p).unwrap()).unwrap()
}

#[test]
fn means_and_coefficients() {
    for (case, &(zeta, ratio)) in CASES.iter().enumerate() {
        let s = source(zeta, ratio);
        let oracle = oracle(case);
        assert!(oracle.edge_mass < 1e-14);
        let mut p = [0u32; 4];
        for arm in Arm::ALL {
            p[arm.index()] = 1;
            let m = oracle.moment(p);
            p[arm.index()] = 0;
            close(mean_intensity(s.converter(), arm).unwrap(), m, "mean");
        }
        let n1 = oracle.moment([1, 0, 0, 0]);
        for (k, arm) in Arm::REFERENCE.iter().enumerate() {
            let mut joint = [1u32, 0, 0, 0];
            let mut single = [0u32; 4];
            joint[arm.index()] += 1;
            single[arm.index()] = 1;
            let cov = oracle.moment(joint) - n1 * oracle.moment(single);
            close(s.coefficients()[k], cov, "ghost coefficient");
        }
    }
}

#[test]
fn same_pixel_cumulants() {
    for (case, &(zeta, ratio)) in CASES.iter().enumerate() {
        let st = source(zeta, ratio).cumulants().clone();
        let o = oracle(case);
        let e = |arms: &[usize]| {
            let mut p = [0u32; 4];
            for &a in arms {
                p[a] += 1;
            }
            o.moment(p)
        };
        for i in 1..4 {
            let k3 = e(&[0, 0, i]) - 2.0 * e(&[0]) * e(&[0, i]) - e(&[i]) * e(&[0, 0])
                + 2.0 * e(&[0]).powi(2) * e(&[i]);
            close(st.k3_11j[i - 1], k3, "third cumulant");
        }
    }
}

fn check_blocks(grid: Grid, f: Vec<f64>, case: usize) {
    let (zeta, ratio) = CASES[case];
    let s = source(zeta, ratio);
    let oracle = oracle(case);
    let image = ObjectImage::new(grid, f.clone()).unwrap();
    let n = grid.n_pixels();
    for (bi, ai) in Arm::REFERENCE.iter().enumerate() {
        for (bj, aj) in Arm::REFERENCE.iter().enumerate() {
            let block = covariance_block(&image, &s, *ai, *aj, NoiseOptions::frames(1)).unwrap();
            for d in 0..n {
                for e in 0..n {
                    let expected = ghost_covariance(
                        oracle,
                        &f,
                        |p| grid.invert(p),
                        (ai.number() as usize, d),
                        (aj.number() as usize, e),
                    );
                    close(
                        block[(d, e)],
                        expected,
                        &format!("block {bi}{bj} entry ({d},{e}) at zeta {zeta}, ratio {ratio}"),
                    );
                }
            }
        }
    }
}

#[test]
fn covariance_blocks_single_pixel() {
    for case in 0..CASES.len() {
        check_blocks(Grid::new(1, 1).unwrap(), vec![1.0], case);
        check_blocks(Grid::new(1, 1).unwrap(), vec![0.35], case);
    }
}

#[test]
fn covariance_blocks_two_pixels() {
    for case in 0..CASES.len() {
        check_blocks(Grid::new(1, 2).unwrap(), vec![1.0, 0.6], case);
        check_blocks(Grid::new(2, 1).unwrap(), vec![0.0, 1.0], case);
    }
}

#[test]
fn frame_averaging_divides_the_covariance() {
    let grid = Grid::new(1, 2).unwrap();
    let f = vec![1.0, 0.25];
    let s = source(0.5, 0.4);
    let oracle = oracle(2);
    let image = ObjectImage::new(grid, f.clone()).unwrap();
    let frames = 400;
    let block = covariance_block(&image, &s, Arm::REFERENCE[0], Arm::REFERENCE[2], NoiseOptions::frames(frames)).unwrap();
    let expected = ghost_covariance(oracle, &f, |p| grid.invert(p), (2, 0), (4, 1)) / frames as f64;
    close(block[(0, 1)], expected, "averaged block");
}

//! Simulates photon counting frame by frame and compares the empirical
//! covariance of the correlator products with the analytic one.

use mgi_core::correlation::{structured_covariance, GhostSource, NoiseOptions, ObjectImage};
use mgi_core::optics::{converter_matrix, Grid, PhysicalParams};
use mgi_fock_oracle::PixelDistribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn correlator_covariance_matches_counting_statistics() {
    // Strong conversion keeps arms 3 and 4 bright enough for counting statistics.
    let (zeta, ratio) = (0.7, 1.0);
    let grid = Grid::new(2, 2).unwrap();
    let f = vec![1.0, 0.5, 0.0, 1.0];
    let n = grid.n_pixels();
    let source = GhostSource::new(
        converter_matrix(&PhysicalParams {
            zeta,
            coupling_ratio: ratio,
            ..PhysicalParams::reference()
        })
        .unwrap(),
    )
    .unwrap();
    let sigma = structured_covariance(&ObjectImage::new(grid, f.clone()).unwrap(), &source, NoiseOptions::frames(1))
        .unwrap()
        .dense();

    let sampler = PixelDistribution::new(zeta, ratio).sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let frames = 1_000_000;
    let dim = 3 * n;
    let mut samples = vec![0.0; frames * dim];
    for frame in samples.chunks_mut(dim) {
        let counts: Vec<[u32; 4]> = (0..n).map(|_| sampler.sample(rng.random::<f64>())).collect();
        let bucket: f64 = (0..n).map(|p| f[p] * counts[p][0] as f64).sum();
        for arm in 0..3 {
            for d in 0..n {
                frame[arm * n + d] = bucket * counts[grid.invert(d)][arm + 1] as f64;
            }
        }
    }
    let mut mean = vec![0.0; dim];
    for frame in samples.chunks(dim) {
        for k in 0..dim {
            mean[k] += frame[k] / frames as f64;
        }
    }
    let mut worst: f64 = 0.0;
    for a in 0..dim {
        for b in a..dim {
            let (mut s1, mut s2) = (0.0, 0.0);
            for frame in samples.chunks(dim) {
                let p = (frame[a] - mean[a]) * (frame[b] - mean[b]);
                s1 += p;
                s2 += p * p;
            }
            let cov = s1 / frames as f64;
            let se = ((s2 / frames as f64 - cov * cov) / frames as f64).sqrt();
            let z = if se > 0.0 {
                (cov - sigma[(a, b)]).abs() / se
            } else {
                assert!((cov - sigma[(a, b)]).abs() < 1e-12, "entry ({a},{b})");
                0.0
            };
            assert!(z < 5.0, "entry ({a},{b}): empirical {cov}, analytic {}, se {se}", sigma[(a, b)]);
            worst = worst.max(z);
        }
    }
    assert!(worst > 0.0);
}

//! Noisy correlator outputs `xi = A f + L z`.

use mgi_core::correlation::{CovarianceBlocks, CovarianceFactor, MeasurementModel, ObjectImage};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionRecord {
    /// Correlator outputs, arm 2 block first.
    pub xi: Vec<f64>,
    pub seed: u64,
    pub n_frames: u64,
    /// Hash of the configuration that produced the record.
    pub fingerprint: String,
}

/// Draws zero-mean Gaussian vectors with a given covariance.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    factor: CovarianceFactor,
}

impl NoiseGenerator {
    /// Fails when the covariance is not positive semidefinite.
    pub fn new(sigma: &CovarianceBlocks) -> Result<Self> {
        Ok(NoiseGenerator {
            factor: sigma.factor()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        self.factor.colour(&z)
    }
}

/// One acquisition with noise seeded from `seed`.
pub fn sample_acquisition(
    model: &MeasurementModel,
    sigma: &CovarianceBlocks,
    f: &ObjectImage,
    seed: u64,
    n_frames: u64,
    fingerprint: &str,
) -> Result<AcquisitionRecord> {
    let mean = model.apply(f.values())?;
    let generator = NoiseGenerator::new(sigma)?;
    if generator.dim() != mean.len() {
        return Err(mgi_core::Error::Consistency(format!(
            "noise covariance has dimension {}, measurements {}",
            generator.dim(),
            mean.len()
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = mean + generator.draw(&mut rng);
    Ok(AcquisitionRecord {
        xi: xi.as_slice().to_vec(),
        seed,
        n_frames,
        fingerprint: fingerprint.to_string(),
    })
}

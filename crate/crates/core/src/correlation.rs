//! Ghost-image means, the measurement operator and the correlator noise covariance.
//!
//! Geometry: reference arm `j` images crystal pixel `s` onto detector pixel
//! `-s` (point inversion); the object arm passes the object and is collected
//! by a bucket detector, `I1 = sum_p f(p) n1(p)`. The correlator for arm `j`
//! outputs `G_j(d) = I1 I_j(d) - <I1><I_j(d)>` averaged over `n_frames` frames.
//!
//! All number operators commute, so their joint statistics are those of
//! classical random variables. Pixels are independent, so joint cumulants
//! vanish unless every variable sits in the same pixel. Expanding
//! `Cov(I1 n_i(s), I1 n_j(s'))` in cumulants therefore leaves two kinds of
//! terms: same-pixel terms (`s = s'`) and terms that factor into a function of
//! `s` times a function of `s'`. The noise covariance is a per-pixel 3x3 block
//! diagonal plus a rank-3 matrix, and it is stored in that form.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::optics::{build_pair_moment_table, Arm, ConverterMatrix, Grid, PixelModeSet, N_ARMS};
use crate::wick::{gaussian_moment, number_op, LadderOp};

/// Number of correlator outputs per detector pixel (arms 2, 3, 4).
pub const N_REFERENCE: usize = 3;

/// Relative tolerance of the closed-form vs. Wick cross-check of `c_j`.
pub const COEFFICIENT_CHECK_TOLERANCE: f64 = 1e-8;

/// Tolerance, relative to the largest eigenvalue, below which negative
/// eigenvalues of a covariance are treated as round-off.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Piecewise-constant transparency map `f = |T|^2`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectImage {
    grid: Grid,
    values: Vec<f64>,
}

impl ObjectImage {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_pixels() {
            return Err(Error::mismatch("object image", grid.n_pixels(), values.len()));
        }
        if let Some((pixel, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::TransparencyOutOfRange { pixel, value });
        }
        Ok(ObjectImage { grid, values })
    }

    pub fn uniform(grid: Grid, level: f64) -> Result<Self> {
        Self::new(grid, vec![level; grid.n_pixels()])
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.cols + col]
    }

    /// Values as seen through the inverting imager: `out[d] = f(-d)`.
    pub fn inverted(&self) -> Vec<f64> {
        (0..self.values.len())
            .map(|d| self.values[self.grid.invert(d)])
            .collect()
    }
}

/// Same-pixel statistics of the four number operators.
///
/// Arms are indexed 0..4 for arms 1..=4.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelCumulants {
    pub mean: [f64; N_ARMS],
    pub k2: [[f64; N_ARMS]; N_ARMS],
    /// `kappa(n1, n1, n_j)` for reference arms.
    pub k3_11j: [f64; N_REFERENCE],
    /// `kappa(n1, n_i, n_j)` for reference arms.
    pub k3_1ij: [[f64; N_REFERENCE]; N_REFERENCE],
    /// `kappa(n1, n_i, n1, n_j)` for reference arms.
    pub k4_1i1j: [[f64; N_REFERENCE]; N_REFERENCE],
}

/// All set partitions of `0..n`.
fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for item in 0..n {
        let mut next = Vec::new();
        for p in &out {
            for b in 0..p.len() {
                let mut q = p.clone();
                q[b].push(item);
                next.push(q);
            }
            let mut q = p.clone();
            q.push(vec![item]);
            next.push(q);
        }
        out = next;
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl PixelCumulants {
    /// Evaluates moments of up to four number operators (eight ladder
    /// operators) by Wick contraction and converts them to joint cumulants.
    pub fn from_converter(q: &ConverterMatrix) -> Result<Self> {
        let modes = PixelModeSet::new(Grid { rows: 1, cols: 1 });
        let table = build_pair_moment_table(q, modes);
        let moment = |arms: &[usize]| -> Result<f64> {
            let ops: Vec<LadderOp> = arms.iter().flat_map(|&a| number_op(a)).collect();
            Ok(gaussian_moment(&ops, &table)?.re)
        };
        let cumulant = |arms: &[usize]| -> Result<f64> {
            let mut total = 0.0;
            for partition in set_partitions(arms.len()) {
                let k = partition.len();
                let mut prod = 1.0;
                for block in &partition {
                    let sub: Vec<usize> = block.iter().map(|&i| arms[i]).collect();
                    prod *= moment(&sub)?;
                }
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                total += sign * factorial(k - 1) * prod;
            }
            Ok(total)
        };

        let mut mean = [0.0; N_ARMS];
        let mut k2 = [[0.0; N_ARMS]; N_ARMS];
        for a in 0..N_ARMS {
            mean[a] = moment(&[a])?;
            for b in 0..N_ARMS {
                k2[a][b] = cumulant(&[a, b])?;
            }
        }
        let mut k3_11j = [0.0; N_REFERENCE];
        let mut k3_1ij = [[0.0; N_REFERENCE]; N_REFERENCE];
        let mut k4_1i1j = [[0.0; N_REFERENCE]; N_REFERENCE];
        for i in 0..N_REFERENCE {
            k3_11j[i] = cumulant(&[0, 0, i + 1])?;
            for j in 0..N_REFERENCE {
                k3_1ij[i][j] = cumulant(&[0, i + 1, j + 1])?;
                k4_1i1j[i][j] = cumulant(&[0, i + 1, 0, j + 1])?;
            }
        }
        Ok(PixelCumulants {
            mean,
            k2,
            k3_11j,
            k3_1ij,
            k4_1i1j,
        })
    }
}

/// `<n_arm>` per pixel. Uniform across pixels.
pub fn mean_intensity(q: &ConverterMatrix, arm: Arm) -> Result<f64> {
    let table = build_pair_moment_table(q, PixelModeSet::new(Grid { rows: 1, cols: 1 }));
    Ok(gaussian_moment(&number_op(arm.index()), &table)?.re)
}

/// Mean object-arm intensity per crystal pixel behind the object, `f(p) <n1>`.
pub fn object_arm_mean(f: &ObjectImage, q: &ConverterMatrix) -> Result<Vec<f64>> {
    let n1 = mean_intensity(q, Arm::OBJECT)?;
    Ok(f.values().iter().map(|v| v * n1).collect())
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Ghost-image coefficient `c_j = |Q11 Q*_j1 + Q13 Q*_j3|^2`.
///
/// Cross-checked against the Wick-evaluated same-pixel `Cov(n1, n_j)`.
pub fn gi_coefficient(q: &ConverterMatrix, j: Arm) -> Result<f64> {
    if j == Arm::OBJECT {
        return Err(Error::invalid("arm", "ghost images exist for reference arms 2..=4"));
    }
    let closed = q.ghost_transfer(j).norm_sqr();
    let table = build_pair_moment_table(q, PixelModeSet::new(Grid { rows: 1, cols: 1 }));
    let n1 = number_op(Arm::OBJECT.index());
    let nj = number_op(j.index());
    let joint: Vec<LadderOp> = n1.iter().chain(nj.iter()).copied().collect();
    let cov = gaussian_moment(&joint, &table)?.re
        - gaussian_moment(&n1, &table)?.re * gaussian_moment(&nj, &table)?.re;
    let gap = relative_gap(closed, cov);
    if gap > COEFFICIENT_CHECK_TOLERANCE {
        return Err(Error::Consistency(format!(
            "ghost coefficient of arm {}: transfer product {closed:e} vs covariance {cov:e}",
            j.number()
        )));
    }
    Ok(closed)
}

/// `c_j f(-d)` on the detector grid.
pub fn ghost_image_mean(f: &ObjectImage, c_j: f64) -> Vec<f64> {
    f.inverted().into_iter().map(|v| c_j * v).collect()
}

/// The converter plus everything derived from it that the correlation model needs.
#[derive(Debug, Clone)]
pub struct GhostSource {
    q: ConverterMatrix,
    stats: PixelCumulants,
    coefficients: [f64; N_REFERENCE],
}

impl GhostSource {
    pub fn new(q: ConverterMatrix) -> Result<Self> {
        let stats = PixelCumulants::from_converter(&q)?;
        let mut coefficients = [0.0; N_REFERENCE];
        for (k, arm) in Arm::REFERENCE.iter().enumerate() {
            coefficients[k] = gi_coefficient(&q, *arm)?;
        }
        Ok(GhostSource {
            q,
            stats,
            coefficients,
        })
    }

    pub fn converter(&self) -> &ConverterMatrix {
        &self.q
    }

    pub fn cumulants(&self) -> &PixelCumulants {
        &self.stats
    }

    pub fn coefficients(&self) -> [f64; N_REFERENCE] {
        self.coefficients
    }
}

/// Detector response of the reference arms.
#[derive(Debug, Clone, PartialEq)]
pub enum Detectors {
    /// `B_j = I` in every reference arm.
    Ideal,
    /// Explicit `B_2, B_3, B_4`, each with one column per pixel.
    Matrices([DMatrix<f64>; N_REFERENCE]),
}

/// Block operator `A = [B2 C2; B3 C3; B4 C4]` with `C_j = c_j P`, `P` the inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    grid: Grid,
    coefficients: [f64; N_REFERENCE],
    detectors: Detectors,
}

pub fn build_measurement_operator(
    grid: Grid,
    coefficients: [f64; N_REFERENCE],
    detectors: Detectors,
) -> Result<MeasurementModel> {
    if let Detectors::Matrices(bs) = &detectors {
        for b in bs {
            if b.ncols() != grid.n_pixels() {
                return Err(Error::mismatch("detector matrix columns", grid.n_pixels(), b.ncols()));
            }
        }
    }
    Ok(MeasurementModel {
        grid,
        coefficients,
        detectors,
    })
}

impl MeasurementModel {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn coefficients(&self) -> [f64; N_REFERENCE] {
        self.coefficients
    }

    pub fn detectors(&self) -> &Detectors {
        &self.detectors
    }

    pub fn is_ideal(&self) -> bool {
        matches!(self.detectors, Detectors::Ideal)
    }

    /// Rows of each arm block.
    pub fn block_rows(&self) -> [usize; N_REFERENCE] {
        match &self.detectors {
            Detectors::Ideal => [self.grid.n_pixels(); N_REFERENCE],
            Detectors::Matrices(bs) => [bs[0].nrows(), bs[1].nrows(), bs[2].nrows()],
        }
    }

    pub fn n_measurements(&self) -> usize {
        self.block_rows().iter().sum()
    }

    /// `A f`, stacked arm by arm.
    pub fn apply(&self, f: &[f64]) -> Result<DVector<f64>> {
        let n = self.grid.n_pixels();
        if f.len() != n {
            return Err(Error::mismatch("measurement operator input", n, f.len()));
        }
        let mut out = Vec::with_capacity(self.n_measurements());
        for k in 0..N_REFERENCE {
            let img: Vec<f64> = (0..n)
                .map(|d| self.coefficients[k] * f[self.grid.invert(d)])
                .collect();
            match &self.detectors {
                Detectors::Ideal => out.extend(img),
                Detectors::Matrices(bs) => out.extend((&bs[k] * DVector::from_vec(img)).iter()),
            }
        }
        Ok(DVector::from_vec(out))
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.grid.n_pixels();
        let mut a = DMatrix::zeros(self.n_measurements(), n);
        let mut row0 = 0;
        for k in 0..N_REFERENCE {
            let mut ck = DMatrix::zeros(n, n);
            for d in 0..n {
                ck[(d, self.grid.invert(d))] = self.coefficients[k];
            }
            let block = match &self.detectors {
                Detectors::Ideal => ck,
                Detectors::Matrices(bs) => &bs[k] * ck,
            };
            a.view_mut((row0, 0), (block.nrows(), n)).copy_from(&block);
            row0 += block.nrows();
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseOptions {
    pub n_frames: u64,
    /// Additive white-noise variance per correlator output.
    pub white_noise: f64,
    /// Keep only same-pixel covariance, dropping the rank-3 cross-pixel part.
    pub block_diagonal: bool,
}

impl NoiseOptions {
    pub fn frames(n_frames: u64) -> Self {
        NoiseOptions {
            n_frames,
            white_noise: 0.0,
            block_diagonal: false,
        }
    }
}

/// Ideal-detector noise covariance `D + W S W^T` over detector pixels.
///
/// `D` is block diagonal with one 3x3 block per detector pixel coupling the
/// three arms; `W` has one row per correlator output, stacked arm by arm.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredCovariance {
    grid: Grid,
    blocks: Vec<Matrix3<f64>>,
    w: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl StructuredCovariance {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        N_REFERENCE * self.grid.n_pixels()
    }

    pub fn pixel_blocks(&self) -> &[Matrix3<f64>] {
        &self.blocks
    }

    pub fn low_rank_factor(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn low_rank_core(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// Row of `W` for one pixel and arm slot.
    pub(crate) fn w_row(&self, arm: usize, pixel: usize) -> usize {
        arm * self.grid.n_pixels() + pixel
    }

    /// One `N x N` block `Sigma_ij` (arm slots 0..3).
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.grid.n_pixels();
        let wi = self.w.rows(i * n, n);
        let wj = self.w.rows(j * n, n);
        let mut out = &wi * &self.s * wj.transpose();
        for d in 0..n {
            out[(d, d)] += self.blocks[d][(i, j)];
        }
        out
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.grid.n_pixels();
        let mut out = &self.w * &self.s * self.w.transpose();
        for d in 0..n {
            for i in 0..N_REFERENCE {
                for j in 0..N_REFERENCE {
                    out[(i * n + d, j * n + d)] += self.blocks[d][(i, j)];
                }
            }
        }
        out
    }

    /// Per-pixel 3x3 covariance of the three images, averaged over pixels.
    pub fn mean_pixel_covariance(&self) -> Matrix3<f64> {
        let n = self.grid.n_pixels();
        let mut acc = Matrix3::zeros();
        for d in 0..n {
            let mut blk = self.blocks[d];
            for i in 0..N_REFERENCE {
                for j in 0..N_REFERENCE {
                    let wi = self.w.row(self.w_row(i, d));
                    let wj = self.w.row(self.w_row(j, d));
                    blk[(i, j)] += (wi * &self.s * wj.transpose())[(0, 0)];
                }
            }
            acc += blk;
        }
        acc / n as f64
    }

    fn max_abs(&self) -> f64 {
        let b = self
            .blocks
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let ws = self.w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let ss = self.s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        b.max(ws * ws * ss)
    }

    /// Factor `L` with `L L^T = Sigma`, or a consistency error when Sigma is
    /// not positive semidefinite.
    ///
    /// Requires positive-definite pixel blocks; falls back to a dense
    /// eigendecomposition otherwise.
    pub fn factor(&self) -> Result<CovarianceFactor> {
        if self.max_abs() == 0.0 {
            return Ok(CovarianceFactor::Zero { dim: self.dim() });
        }
        let mut sqrt_blocks = Vec::with_capacity(self.blocks.len());
        let mut inv_sqrt_blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let eig = SymmetricEigen::new(*blk);
            let lo = eig.eigenvalues.min();
            if !(lo > PSD_TOLERANCE * eig.eigenvalues.max()) {
                return dense_factor(&self.dense());
            }
            let sq = eig.eigenvalues.map(f64::sqrt);
            let v = eig.eigenvectors;
            sqrt_blocks.push(v * Matrix3::from_diagonal(&sq) * v.transpose());
            inv_sqrt_blocks.push(v * Matrix3::from_diagonal(&sq.map(|x| 1.0 / x)) * v.transpose());
        }
        let r = self.w.ncols();
        if r == 0 {
            return Ok(CovarianceFactor::Structured(StructuredFactor {
                grid: self.grid,
                sqrt_blocks,
                basis: DMatrix::zeros(self.dim(), 0),
                core: DMatrix::zeros(0, 0),
            }));
        }
        // V = D^{-1/2} W, V = Qr R, T = I + R S R^T, Sigma = D^{1/2} (I + Qr (T - I) Qr^T) D^{1/2}.
        let mut v = DMatrix::zeros(self.dim(), r);
        for d in 0..self.grid.n_pixels() {
            for c in 0..r {
                let col = nalgebra::Vector3::new(
                    self.w[(self.w_row(0, d), c)],
                    self.w[(self.w_row(1, d), c)],
                    self.w[(self.w_row(2, d), c)],
                );
                let t = inv_sqrt_blocks[d] * col;
                for a in 0..N_REFERENCE {
                    v[(self.w_row(a, d), c)] = t[a];
                }
            }
        }
        let qr = v.qr();
        let basis = qr.q();
        let rr = qr.r();
        let t = DMatrix::identity(r, r) + &rr * &self.s * rr.transpose();
        let t = (&t + t.transpose()) * 0.5;
        let eig = SymmetricEigen::new(t);
        let top = eig.eigenvalues.max().max(1.0);
        if eig.eigenvalues.min() < -PSD_TOLERANCE * top {
            return Err(Error::Consistency(format!(
                "noise covariance is not positive semidefinite (eigenvalue {:e})",
                eig.eigenvalues.min()
            )));
        }
        let sqrt_t = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        let core = sqrt_t - DMatrix::identity(r, r);
        Ok(CovarianceFactor::Structured(StructuredFactor {
            grid: self.grid,
            sqrt_blocks,
            basis,
            core,
        }))
    }
}

/// A square root of a noise covariance, used to colour white noise.
#[derive(Debug, Clone)]
pub enum CovarianceFactor {
    Zero { dim: usize },
    Dense(DMatrix<f64>),
    Structured(StructuredFactor),
}

#[derive(Debug, Clone)]
pub struct StructuredFactor {
    grid: Grid,
    sqrt_blocks: Vec<Matrix3<f64>>,
    basis: DMatrix<f64>,
    core: DMatrix<f64>,
}

impl CovarianceFactor {
    pub fn dim(&self) -> usize {
        match self {
            CovarianceFactor::Zero { dim } => *dim,
            CovarianceFactor::Dense(l) => l.nrows(),
            CovarianceFactor::Structured(s) => s.basis.nrows(),
        }
    }

    /// `L z` for a white vector `z` of length [`Self::dim`].
    pub fn colour(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            CovarianceFactor::Zero { dim } => DVector::zeros(*dim),
            CovarianceFactor::Dense(l) => l * z,
            CovarianceFactor::Structured(s) => {
                let y = if s.basis.ncols() == 0 {
                    z.clone()
                } else {
                    z + &s.basis * (&s.core * (s.basis.transpose() * z))
                };
                let n = s.grid.n_pixels();
                let mut out = DVector::zeros(y.len());
                for d in 0..n {
                    let v = s.sqrt_blocks[d] * nalgebra::Vector3::new(y[d], y[n + d], y[2 * n + d]);
                    out[d] = v[0];
                    out[n + d] = v[1];
                    out[2 * n + d] = v[2];
                }
                out
            }
        }
    }
}

/// `L = V sqrt(max(lambda, 0))` from the symmetric eigendecomposition.
///
/// Eigenvalues below `-PSD_TOLERANCE * lambda_max` are rejected.
pub fn dense_factor(sigma: &DMatrix<f64>) -> Result<CovarianceFactor> {
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if top == 0.0 {
        return Ok(CovarianceFactor::Zero { dim: sigma.nrows() });
    }
    let lo = eig.eigenvalues.min();
    if lo < -PSD_TOLERANCE * top {
        return Err(Error::Consistency(format!(
            "noise covariance is not positive semidefinite (eigenvalue {lo:e} vs {top:e})"
        )));
    }
    let scale = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    Ok(CovarianceFactor::Dense(
        &eig.eigenvectors * DMatrix::from_diagonal(&scale),
    ))
}

/// The assembled noise covariance `Sigma_nu`.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceBlocks {
    /// Ideal detectors; exact structured form.
    Structured(StructuredCovariance),
    /// Any detector model; `block_rows` gives the arm partition.
    Dense {
        matrix: DMatrix<f64>,
        block_rows: [usize; N_REFERENCE],
    },
}

impl CovarianceBlocks {
    pub fn dim(&self) -> usize {
        match self {
            CovarianceBlocks::Structured(s) => s.dim(),
            CovarianceBlocks::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            CovarianceBlocks::Structured(s) => s.dense(),
            CovarianceBlocks::Dense { matrix, .. } => matrix.clone(),
        }
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        match self {
            CovarianceBlocks::Structured(s) => s.block(i, j),
            CovarianceBlocks::Dense { matrix, block_rows } => {
                let r0: usize = block_rows[..i].iter().sum();
                let c0: usize = block_rows[..j].iter().sum();
                matrix.view((r0, c0), (block_rows[i], block_rows[j])).into_owned()
            }
        }
    }

    pub fn factor(&self) -> Result<CovarianceFactor> {
        match self {
            CovarianceBlocks::Structured(s) => s.factor(),
            CovarianceBlocks::Dense { matrix, .. } => dense_factor(matrix),
        }
    }

    /// Multiplies the whole covariance by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            CovarianceBlocks::Structured(s) => CovarianceBlocks::Structured(StructuredCovariance {
                grid: s.grid,
                blocks: s.blocks.iter().map(|b| b * factor).collect(),
                w: s.w.clone(),
                s: &s.s * factor,
            }),
            CovarianceBlocks::Dense { matrix, block_rows } => CovarianceBlocks::Dense {
                matrix: matrix * factor,
                block_rows: *block_rows,
            },
        }
    }
}

/// Ideal-detector covariance of all correlator outputs for object `f`.
pub fn structured_covariance(
    f: &ObjectImage,
    source: &GhostSource,
    options: NoiseOptions,
) -> Result<StructuredCovariance> {
    if options.n_frames == 0 {
        return Err(Error::invalid("n_frames", "must be >= 1"));
    }
    if !(options.white_noise.is_finite() && options.white_noise >= 0.0) {
        return Err(Error::invalid("white_noise", "must be finite and >= 0"));
    }
    let grid = f.grid();
    let n = grid.n_pixels();
    let st = source.cumulants();
    let inv_frames = 1.0 / options.n_frames as f64;
    // g(d): transparency at the crystal pixel imaged onto detector pixel d.
    let g = f.inverted();
    let f1: f64 = g.iter().sum();
    let f2: f64 = g.iter().map(|v| v * v).sum();
    let mu1 = st.mean[0];
    let bucket = f1 * mu1;
    let var1 = st.k2[0][0];

    let mut ref_k2 = Matrix3::zeros();
    let mut k3 = Matrix3::zeros();
    let mut k4 = Matrix3::zeros();
    for i in 0..N_REFERENCE {
        for j in 0..N_REFERENCE {
            ref_k2[(i, j)] = st.k2[i + 1][j + 1];
            k3[(i, j)] = 0.5 * (st.k3_1ij[i][j] + st.k3_1ij[j][i]);
            k4[(i, j)] = 0.5 * (st.k4_1i1j[i][j] + st.k4_1i1j[j][i]);
        }
    }
    let mut blocks: Vec<Matrix3<f64>> = g
        .iter()
        .map(|&gd| {
            (k4 * (gd * gd) + ref_k2 * (f2 * var1 + bucket * bucket) + k3 * (2.0 * bucket * gd))
                * inv_frames
                + Matrix3::identity() * options.white_noise
        })
        .collect();

    // Columns: a = g kappa(n1, n_i), b = g^2 kappa(n1, n1, n_i), m = <n_i>.
    let mut w = DMatrix::zeros(N_REFERENCE * n, 3);
    for i in 0..N_REFERENCE {
        for d in 0..n {
            let row = i * n + d;
            w[(row, 0)] = g[d] * st.k2[0][i + 1];
            w[(row, 1)] = g[d] * g[d] * st.k3_11j[i];
            w[(row, 2)] = st.mean[i + 1];
        }
    }
    let s = DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.0, bucket, 0.0, 0.0, 1.0, bucket, 1.0, f2 * var1],
    ) * inv_frames;

    if options.block_diagonal {
        for d in 0..n {
            for i in 0..N_REFERENCE {
                for j in 0..N_REFERENCE {
                    let wi = w.row(i * n + d);
                    let wj = w.row(j * n + d);
                    blocks[d][(i, j)] += (wi * &s * wj.transpose())[(0, 0)];
                }
            }
        }
        return Ok(StructuredCovariance {
            grid,
            blocks,
            w: DMatrix::zeros(N_REFERENCE * n, 0),
            s: DMatrix::zeros(0, 0),
        });
    }
    Ok(StructuredCovariance { grid, blocks, w, s })
}

/// `Sigma_ij` for reference arms `i`, `j`, as a dense `N x N` block.
pub fn covariance_block(
    f: &ObjectImage,
    source: &GhostSource,
    i: Arm,
    j: Arm,
    options: NoiseOptions,
) -> Result<DMatrix<f64>> {
    if i == Arm::OBJECT || j == Arm::OBJECT {
        return Err(Error::invalid("arm", "covariance blocks are indexed by arms 2..=4"));
    }
    Ok(structured_covariance(f, source, options)?.block(i.index() - 1, j.index() - 1))
}

/// Full `Sigma_nu`, conjugated by the detector matrices.
pub fn build_covariance(
    f: &ObjectImage,
    source: &GhostSource,
    options: NoiseOptions,
    detectors: &Detectors,
) -> Result<CovarianceBlocks> {
    let base = structured_covariance(f, source, options)?;
    let cov = match detectors {
        Detectors::Ideal => CovarianceBlocks::Structured(base),
        Detectors::Matrices(bs) => {
            let n = f.grid().n_pixels();
            for b in bs {
                if b.ncols() != n {
                    return Err(Error::mismatch("detector matrix columns", n, b.ncols()));
                }
            }
            let rows = [bs[0].nrows(), bs[1].nrows(), bs[2].nrows()];
            let total: usize = rows.iter().sum();
            let mut m = DMatrix::zeros(total, total);
            let mut r0 = 0;
            for i in 0..N_REFERENCE {
                let mut c0 = 0;
                for j in 0..N_REFERENCE {
                    let blk = &bs[i] * base.block(i, j) * bs[j].transpose();
                    m.view_mut((r0, c0), (rows[i], rows[j])).copy_from(&blk);
                    c0 += rows[j];
                }
                r0 += rows[i];
            }
            CovarianceBlocks::Dense {
                matrix: (&m + m.transpose()) * 0.5,
                block_rows: rows,
            }
        }
    };
    // Positive semidefiniteness is verified through the factorisation.
    cov.factor()?;
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{converter_matrix, PhysicalParams};

    fn source(zeta: f64, ratio: f64) -> GhostSource {
        let p = PhysicalParams {
            zeta,
            coupling_ratio: ratio,
            ..PhysicalParams::reference()
        };
        GhostSource::new(converter_matrix(&p).unwrap()).unwrap()
    }

    fn grid(r: usize, c: usize) -> Grid {
        Grid::new(r, c).unwrap()
    }

    #[test]
    fn set_partition_counts_are_bell_numbers() {
        let counts: Vec<usize> = (0..=5).map(|n| set_partitions(n).len()).collect();
        assert_eq!(counts, vec![1, 1, 2, 5, 15, 52]);
    }

    #[test]
    fn object_image_validation() {
        assert!(ObjectImage::new(grid(1, 2), vec![0.0, 1.2]).is_err());
        assert!(ObjectImage::new(grid(1, 2), vec![0.0]).is_err());
        let f = ObjectImage::new(grid(2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(f.inverted(), vec![0.4, 0.3, 0.2, 0.1]);
        assert_eq!(f.get(1, 0), 0.3);
    }

    #[test]
    fn means_vanish_without_coupling() {
        let s0 = source(0.0, 0.4);
        for arm in Arm::ALL {
            assert_eq!(mean_intensity(s0.converter(), arm).unwrap(), 0.0);
        }
        let s = source(1.0, 0.0);
        assert_eq!(mean_intensity(s.converter(), Arm::REFERENCE[1]).unwrap(), 0.0);
        assert_eq!(mean_intensity(s.converter(), Arm::REFERENCE[2]).unwrap(), 0.0);
        let n1 = mean_intensity(s.converter(), Arm::OBJECT).unwrap();
        assert!((n1 - 1f64.sinh().powi(2)).abs() < 1e-13);
    }

    #[test]
    fn coefficients_of_a_pure_squeezer() {
        assert_eq!(source(0.0, 0.4).coefficients(), [0.0; 3]);
        let z: f64 = 0.5;
        let s = source(z, 0.0);
        let c = s.coefficients();
        // Cov(n1, n2) = nbar (nbar + 1) for a two-mode squeezed vacuum.
        let expected = z.sinh().powi(2) * z.cosh().powi(2);
        assert!((c[0] - expected).abs() < 1e-14);
        assert_eq!(c[1], 0.0);
        assert_eq!(c[2], 0.0);
    }

    #[test]
    fn coefficients_at_reference_parameters_are_positive() {
        let s = source(6.0, 0.4);
        assert!(s.coefficients().iter().all(|&c| c > 0.0));
        let st = s.cumulants();
        for k in 0..3 {
            assert!(relative_gap(s.coefficients()[k], st.k2[0][k + 1]) < 1e-8);
        }
    }

    #[test]
    fn ghost_mean_inverts_and_scales() {
        let g = grid(3, 3);
        assert_eq!(ghost_image_mean(&ObjectImage::uniform(g, 1.0).unwrap(), 2.5), vec![2.5; 9]);
        let mut v = vec![0.0; 9];
        v[1] = 1.0;
        let out = ghost_image_mean(&ObjectImage::new(g, v).unwrap(), 1.0);
        assert_eq!(out.iter().position(|&x| x == 1.0), Some(g.invert(1)));
        assert_eq!(out.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn checkerboard_ghost_image() {
        let g = grid(4, 4);
        let board: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let out = ghost_image_mean(&ObjectImage::new(g, board.clone()).unwrap(), 3.0);
        for d in 0..16 {
            assert_eq!(out[d], 3.0 * board[15 - d]);
        }
    }

    #[test]
    fn measurement_operator_matches_ghost_means() {
        let g = grid(2, 3);
        let f = ObjectImage::new(g, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let c = [1.5, 2.0, 0.5];
        let model = build_measurement_operator(g, c, Detectors::Ideal).unwrap();
        let af = model.apply(f.values()).unwrap();
        let dense = model.dense() * DVector::from_column_slice(f.values());
        for k in 0..3 {
            let expected = ghost_image_mean(&f, c[k]);
            for d in 0..6 {
                assert_eq!(af[k * 6 + d], expected[d]);
                assert_eq!(dense[k * 6 + d], expected[d]);
            }
        }
        let unit = build_measurement_operator(g, [1.0; 3], Detectors::Ideal).unwrap().dense();
        assert_eq!(unit.rank(1e-12), 6);
    }

    #[test]
    fn binned_detectors_sum_pixel_quadruples() {
        let g = grid(4, 4);
        let mut bin = DMatrix::zeros(4, 16);
        for r in 0..4 {
            for c in 0..4 {
                bin[((r / 2) * 2 + c / 2, r * 4 + c)] = 1.0;
            }
        }
        let model = build_measurement_operator(
            g,
            [1.0; 3],
            Detectors::Matrices([bin.clone(), bin.clone(), bin]),
        )
        .unwrap();
        let f: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let out = model.apply(&f).unwrap();
        assert_eq!(out.len(), 12);
        // Detector quadrant 0 sees inverted pixels 15, 14, 11, 10.
        let expected = (15.0 + 14.0 + 11.0 + 10.0) / 15.0;
        assert!((out[0] - expected).abs() < 1e-15);
        assert!(build_measurement_operator(
            g,
            [1.0; 3],
            Detectors::Matrices([DMatrix::zeros(2, 3), DMatrix::zeros(2, 16), DMatrix::zeros(2, 16)])
        )
        .is_err());
    }

    #[test]
    fn covariance_vanishes_in_the_trivial_limits() {
        let g = grid(2, 2);
        let ones = ObjectImage::uniform(g, 1.0).unwrap();
        let zeros = ObjectImage::uniform(g, 0.0).unwrap();
        let opts = NoiseOptions::frames(1);
        let vacuum = source(0.0, 0.4);
        assert_eq!(structured_covariance(&ones, &vacuum, opts).unwrap().dense().abs().max(), 0.0);
        let s = source(1.0, 0.4);
        assert_eq!(structured_covariance(&zeros, &s, opts).unwrap().dense().abs().max(), 0.0);
    }

    #[test]
    fn covariance_is_symmetric_and_scales_with_frames() {
        let g = grid(2, 3);
        let f = ObjectImage::new(g, vec![0.0, 0.3, 1.0, 1.0, 0.5, 0.0]).unwrap();
        let s = source(1.0, 0.4);
        let one = build_covariance(&f, &s, NoiseOptions::frames(1), &Detectors::Ideal).unwrap();
        let many = build_covariance(&f, &s, NoiseOptions::frames(250), &Detectors::Ideal).unwrap();
        let d1 = one.dense();
        let d250 = many.dense();
        let scale = d1.abs().max();
        assert!((&d1 - d1.transpose()).abs().max() < 1e-10 * scale);
        assert!((&d1 / 250.0 - d250).abs().max() < 1e-14 * scale);
    }

    #[test]
    fn no_conversion_leaves_arms_three_and_four_silent() {
        let g = grid(2, 2);
        let f = ObjectImage::new(g, vec![1.0, 0.0, 0.5, 1.0]).unwrap();
        let s = source(1.0, 0.0);
        let opts = NoiseOptions::frames(1);
        for (i, j) in [(0, 1), (1, 1), (2, 2), (0, 2), (1, 2)] {
            let b = covariance_block(&f, &s, Arm::REFERENCE[i], Arm::REFERENCE[j], opts).unwrap();
            assert_eq!(b.abs().max(), 0.0, "block {i}{j}");
        }
        let b22 = covariance_block(&f, &s, Arm::REFERENCE[0], Arm::REFERENCE[0], opts).unwrap();
        assert!(b22.abs().max() > 0.0);
    }

    #[test]
    fn detector_conjugation() {
        let g = grid(2, 2);
        let f = ObjectImage::new(g, vec![1.0, 0.0, 0.5, 1.0]).unwrap();
        let s = source(1.0, 0.4);
        let zero = Detectors::Matrices([DMatrix::zeros(4, 4), DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)]);
        let c = build_covariance(&f, &s, NoiseOptions::frames(1), &zero).unwrap();
        assert_eq!(c.dense().abs().max(), 0.0);
        let id = Detectors::Matrices([DMatrix::identity(4, 4), DMatrix::identity(4, 4), DMatrix::identity(4, 4)]);
        let ci = build_covariance(&f, &s, NoiseOptions::frames(1), &id).unwrap().dense();
        let cs = build_covariance(&f, &s, NoiseOptions::frames(1), &Detectors::Ideal).unwrap().dense();
        assert!((ci - &cs).abs().max() < 1e-12 * cs.abs().max());
    }

    #[test]
    fn block_diagonal_keeps_same_pixel_entries() {
        let g = grid(2, 2);
        let f = ObjectImage::new(g, vec![1.0, 0.0, 0.5, 1.0]).unwrap();
        let s = source(1.0, 0.4);
        let exact = structured_covariance(&f, &s, NoiseOptions::frames(1)).unwrap().dense();
        let approx = structured_covariance(
            &f,
            &s,
            NoiseOptions {
                block_diagonal: true,
                ..NoiseOptions::frames(1)
            },
        )
        .unwrap()
        .dense();
        for r in 0..12 {
            for c in 0..12 {
                if r % 4 == c % 4 {
                    assert!((exact[(r, c)] - approx[(r, c)]).abs() < 1e-12 * exact.abs().max());
                } else {
                    assert_eq!(approx[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn structured_factor_reproduces_the_covariance() {
        let g = grid(2, 3);
        let f = ObjectImage::new(g, vec![1.0, 0.0, 0.5, 1.0, 1.0, 0.2]).unwrap();
        let s = source(6.0, 0.4);
        let cov = structured_covariance(&f, &s, NoiseOptions::frames(1)).unwrap();
        let dense = cov.dense();
        let factor = cov.factor().unwrap();
        assert!(matches!(factor, CovarianceFactor::Structured(_)));
        let dim = cov.dim();
        let mut l = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            let mut e = DVector::zeros(dim);
            e[k] = 1.0;
            l.set_column(k, &factor.colour(&e));
        }
        let rebuilt = &l * l.transpose();
        let gap = (rebuilt - &dense).abs().max() / dense.abs().max();
        assert!(gap < 1e-9, "relative gap {gap:e}");
    }

    #[test]
    fn single_pixel_covariance_is_the_image_covariance() {
        let g = grid(1, 1);
        let f = ObjectImage::uniform(g, 1.0).unwrap();
        let s = source(1.0, 0.4);
        let cov = structured_covariance(&f, &s, NoiseOptions::frames(1)).unwrap();
        let dense = cov.dense();
        let mean = cov.mean_pixel_covariance();
        for i in 0..3 {
            for j in 0..3 {
                assert!((dense[(i, j)] - mean[(i, j)]).abs() < 1e-14 * dense.abs().max());
            }
        }
    }
}

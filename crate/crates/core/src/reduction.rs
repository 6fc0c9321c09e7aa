//! Measurement reduction: the minimum-MSE linear estimate of what an ideal
//! instrument `U` would have shown, given data `xi = A f + nu` from the real one.
//!
//! `R xi = U (A^T S^- A)^- A^T S^- xi`, with `S` the noise covariance and `^-`
//! the Moore-Penrose pseudoinverse. The iterative variant projects onto the
//! box `[0, 1]`, re-estimates the noise covariance from the projected estimate
//! and feeds the previous estimate back as a pseudo-measurement with
//! covariance `kappa I`.
//!
//! With ideal detectors the covariance is block diagonal plus rank 3 (see
//! [`crate::correlation`]), and all solves go through the Woodbury identity in
//! `O(N)`. Other detector models use dense SVD.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::correlation::{
    build_covariance, CovarianceBlocks, Detectors, GhostSource, MeasurementModel, NoiseOptions,
    ObjectImage, StructuredCovariance, N_REFERENCE,
};
use crate::error::{Error, Result};
use crate::optics::Grid;

pub const DEFAULT_PINV_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 20;
pub const DEFAULT_CONV_TOL: f64 = 1e-4;
/// Pseudo-measurement variance as a multiple of the estimate variance; the
/// previous estimate then carries 1% of the data's weight.
pub const DEFAULT_KAPPA_FACTOR: f64 = 100.0;

/// Largest system solved densely when the structured path is unavailable.
pub const DENSE_LIMIT: usize = 6000;

/// Moore-Penrose pseudoinverse; singular values below `tol * sigma_max` are dropped.
pub fn pseudoinverse(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(cols, rows);
    }
    let cutoff = tol * smax;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let inv = svd
        .singular_values
        .map(|s| if s > cutoff { 1.0 / s } else { 0.0 });
    vt.transpose() * DMatrix::from_diagonal(&inv) * u.transpose()
}

/// `U (A^T S^- A)^- A^T S^- xi`.
pub fn reduce_linear(
    xi: &DVector<f64>,
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    u: &DMatrix<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if xi.len() != m {
        return Err(Error::mismatch("measurement vector", m, xi.len()));
    }
    if sigma.shape() != (m, m) {
        return Err(Error::mismatch("noise covariance rows", m, sigma.nrows()));
    }
    if u.ncols() != n {
        return Err(Error::mismatch("ideal-device columns", n, u.ncols()));
    }
    let sp = pseudoinverse(sigma, tol);
    let at_sp = a.transpose() * sp;
    let h = &at_sp * a;
    Ok(u * (pseudoinverse(&h, tol) * (at_sp * xi)))
}

/// Elementwise clamp to `[0, 1]`.
pub fn project_unit_box(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.clamp(0.0, 1.0))
}

/// Noise covariance of the correlator outputs for a hypothesised object.
pub fn estimate_noise_covariance(
    f_hat: &ObjectImage,
    source: &GhostSource,
    options: NoiseOptions,
    detectors: &Detectors,
) -> Result<CovarianceBlocks> {
    build_covariance(f_hat, source, options, detectors)
}

/// Covariance of the pseudo-measurement that carries the previous estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kappa {
    /// A fixed variance in image units.
    Absolute(f64),
    /// A multiple of the mean per-pixel variance of the current estimate,
    /// the mean diagonal of `(A^T S^- A)^-`.
    Relative(f64),
}

impl Default for Kappa {
    fn default() -> Self {
        Kappa::Relative(DEFAULT_KAPPA_FACTOR)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionConfig {
    /// Ideal-device matrix; `None` is the identity.
    pub u: Option<DMatrix<f64>>,
    pub kappa: Kappa,
    pub pinv_tol: f64,
    pub max_iters: usize,
    pub conv_tol: f64,
    /// Transparency of the constant image whose covariance seeds iteration 1.
    pub initial_level: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            u: None,
            kappa: Kappa::default(),
            pinv_tol: DEFAULT_PINV_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            conv_tol: DEFAULT_CONV_TOL,
            initial_level: 1.0,
        }
    }
}

impl ReductionConfig {
    pub fn validate(&self) -> Result<()> {
        let k = match self.kappa {
            Kappa::Absolute(k) | Kappa::Relative(k) => k,
        };
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::invalid("kappa", "must be a positive finite number"));
        }
        if !(self.pinv_tol > 0.0 && self.pinv_tol < 1.0) {
            return Err(Error::invalid("pinv_tol", "must lie in (0, 1)"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be >= 1"));
        }
        if !(self.conv_tol.is_finite() && self.conv_tol >= 0.0) {
            return Err(Error::invalid("conv_tol", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.initial_level) {
            return Err(Error::invalid("initial_level", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Source of `Sigma_nu` for a hypothesised object.
pub trait CovarianceProvider {
    fn covariance(&self, f: &ObjectImage) -> Result<CovarianceBlocks>;
}

impl<F> CovarianceProvider for F
where
    F: Fn(&ObjectImage) -> Result<CovarianceBlocks>,
{
    fn covariance(&self, f: &ObjectImage) -> Result<CovarianceBlocks> {
        self(f)
    }
}

/// The physical noise model.
#[derive(Debug, Clone)]
pub struct PhysicsCovariance<'a> {
    pub source: &'a GhostSource,
    pub options: NoiseOptions,
    pub detectors: &'a Detectors,
}

impl CovarianceProvider for PhysicsCovariance<'_> {
    fn covariance(&self, f: &ObjectImage) -> Result<CovarianceBlocks> {
        estimate_noise_covariance(f, self.source, self.options, self.detectors)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// `||xi - A f|| / ||xi||` for the projected estimate.
    pub residual: f64,
    /// Relative L2 change from the previous projected estimate; `None` on iteration 1.
    pub change: Option<f64>,
    /// Pseudo-measurement variance; `None` on iteration 1.
    pub kappa: Option<f64>,
    /// Estimate before projection.
    pub unprojected: Vec<f64>,
    pub estimate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReductionResult {
    pub estimate: ObjectImage,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Covariance re-estimated from the final estimate.
    pub covariance: CovarianceBlocks,
}

/// Normal equations of one covariance, in object coordinates.
enum GlsSystem {
    Structured(StructuredSystem),
    Dense(DenseSystem),
}

struct DenseSystem {
    /// `A^T S^-`.
    at_sp: DMatrix<f64>,
    h: DMatrix<f64>,
    tol: f64,
}

/// Woodbury form of the normal equations for ideal detectors, in detector
/// coordinates `x[d] = f(-d)`.
///
/// `S^-1 = D^-1 - D^-1 W M W^T D^-1` with `M = (I + S0 G)^-1 S0`,
/// `G = W^T D^-1 W`. Then `A^T S^-1 A = diag(h) - Y M Y^T`.
struct StructuredSystem {
    grid: Grid,
    c: Vector3<f64>,
    d_inv: Vec<Matrix3<f64>>,
    w: DMatrix<f64>,
    m: DMatrix<f64>,
    y: DMatrix<f64>,
    h: DVector<f64>,
}

impl StructuredSystem {
    fn new(cov: &StructuredCovariance, c: [f64; N_REFERENCE]) -> Option<Self> {
        let grid = cov.grid();
        let n = grid.n_pixels();
        let c = Vector3::from(c);
        let mut d_inv = Vec::with_capacity(n);
        for blk in cov.pixel_blocks() {
            let inv = blk.cholesky()?.inverse();
            if !inv.iter().all(|v| v.is_finite()) {
                return None;
            }
            d_inv.push(inv);
        }
        let w = cov.low_rank_factor().clone();
        let s0 = cov.low_rank_core();
        let r = w.ncols();
        let mut g = DMatrix::zeros(r, r);
        let mut y = DMatrix::zeros(n, r);
        let mut h = DVector::zeros(n);
        for d in 0..n {
            let wd = pixel_rows(&w, n, d);
            let dw = d_inv[d] * &wd;
            g += wd.transpose() * &dw;
            let cd = d_inv[d] * c;
            h[d] = c.dot(&cd);
            y.set_row(d, &(cd.transpose() * &wd));
        }
        let m = if r == 0 {
            DMatrix::zeros(0, 0)
        } else {
            (DMatrix::identity(r, r) + s0 * &g).lu().solve(s0)?
        };
        Some(StructuredSystem {
            grid,
            c,
            d_inv,
            w,
            m,
            y,
            h,
        })
    }

    fn rhs(&self, xi: &DVector<f64>) -> DVector<f64> {
        let n = self.grid.n_pixels();
        let r = self.w.ncols();
        let mut wt = DVector::zeros(r);
        let mut out = DVector::zeros(n);
        for d in 0..n {
            let xd = Vector3::new(xi[d], xi[n + d], xi[2 * n + d]);
            let dx = self.d_inv[d] * xd;
            out[d] = self.c.dot(&dx);
            if r > 0 {
                wt += pixel_rows(&self.w, n, d).transpose() * dx;
            }
        }
        if r > 0 {
            out -= &self.y * (&self.m * wt);
        }
        out
    }

    /// `Z = (I - M Y^T E^-1 Y)^-1 M` for `E = diag(h + lambda)`.
    fn woodbury_core(&self, lambda: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let e_inv = self.h.map(|h| 1.0 / (h + lambda));
        if !e_inv.iter().all(|v| v.is_finite()) {
            return None;
        }
        let r = self.w.ncols();
        if r == 0 {
            return Some((e_inv, DMatrix::zeros(0, 0)));
        }
        let ey = DMatrix::from_fn(self.y.nrows(), r, |i, j| e_inv[i] * self.y[(i, j)]);
        let gp = self.y.transpose() * ey;
        let z = (DMatrix::identity(r, r) - &self.m * gp).lu().solve(&self.m)?;
        Some((e_inv, z))
    }

    fn solve(&self, b: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
        let (e_inv, z) = self.woodbury_core(lambda)?;
        let eb = b.component_mul(&e_inv);
        if z.nrows() == 0 {
            return Some(eb);
        }
        let corr = &self.y * (&z * (self.y.transpose() * &eb));
        Some(eb + corr.component_mul(&e_inv))
    }

    /// Mean diagonal of `(A^T S^-1 A)^-1`.
    fn mean_variance(&self) -> Option<f64> {
        let (e_inv, z) = self.woodbury_core(0.0)?;
        let mut tr = e_inv.sum();
        if z.nrows() > 0 {
            let e2y = DMatrix::from_fn(self.y.nrows(), self.y.ncols(), |i, j| {
                e_inv[i] * e_inv[i] * self.y[(i, j)]
            });
            tr += (&z * (self.y.transpose() * e2y)).trace();
        }
        Some(tr / self.grid.n_pixels() as f64)
    }
}

fn pixel_rows(w: &DMatrix<f64>, n: usize, d: usize) -> DMatrix<f64> {
    let r = w.ncols();
    DMatrix::from_fn(N_REFERENCE, r, |a, k| w[(a * n + d, k)])
}

fn invert_vector(grid: Grid, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |p, _| v[grid.invert(p)])
}

impl GlsSystem {
    fn new(model: &MeasurementModel, cov: &CovarianceBlocks, tol: f64) -> Result<Self> {
        if cov.dim() != model.n_measurements() {
            return Err(Error::mismatch("noise covariance", model.n_measurements(), cov.dim()));
        }
        if let (true, CovarianceBlocks::Structured(s)) = (model.is_ideal(), cov) {
            if s.grid() != model.grid() {
                return Err(Error::mismatch("covariance grid", model.grid().n_pixels(), s.grid().n_pixels()));
            }
            if let Some(sys) = StructuredSystem::new(s, model.coefficients()) {
                return Ok(GlsSystem::Structured(sys));
            }
        }
        if cov.dim() > DENSE_LIMIT {
            return Err(Error::Singular(
                "noise covariance has no structured inverse and is too large for the dense solver",
            ));
        }
        let a = model.dense();
        let sp = pseudoinverse(&cov.dense(), tol);
        let at_sp = a.transpose() * sp;
        let h = &at_sp * &a;
        Ok(GlsSystem::Dense(DenseSystem { at_sp, h, tol }))
    }

    /// `A^T S^- xi` in object coordinates.
    fn rhs(&self, xi: &DVector<f64>) -> DVector<f64> {
        match self {
            GlsSystem::Structured(s) => invert_vector(s.grid, &s.rhs(xi)),
            GlsSystem::Dense(d) => &d.at_sp * xi,
        }
    }

    /// `(A^T S^- A + lambda I)^- b` in object coordinates.
    fn solve(&self, b: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
        match self {
            GlsSystem::Structured(s) => {
                let x = s
                    .solve(&invert_vector(s.grid, b), lambda)
                    .ok_or(Error::Singular("normal equations"))?;
                Ok(invert_vector(s.grid, &x))
            }
            GlsSystem::Dense(d) => {
                let n = d.h.nrows();
                let m = &d.h + DMatrix::identity(n, n) * lambda;
                Ok(pseudoinverse(&m, d.tol) * b)
            }
        }
    }

    fn mean_variance(&self) -> Result<f64> {
        match self {
            GlsSystem::Structured(s) => s.mean_variance().ok_or(Error::Singular("normal equations")),
            GlsSystem::Dense(d) => {
                let p = pseudoinverse(&d.h, d.tol);
                Ok(p.trace() / p.nrows() as f64)
            }
        }
    }
}

/// One generalised-least-squares estimate without projection, `U (A^T S^- A)^- A^T S^- xi`.
pub fn reduce_model(
    xi: &DVector<f64>,
    model: &MeasurementModel,
    cov: &CovarianceBlocks,
    u: Option<&DMatrix<f64>>,
    tol: f64,
) -> Result<DVector<f64>> {
    if xi.len() != model.n_measurements() {
        return Err(Error::mismatch("measurement vector", model.n_measurements(), xi.len()));
    }
    let sys = GlsSystem::new(model, cov, tol)?;
    let est = sys.solve(&sys.rhs(xi), 0.0)?;
    Ok(match u {
        Some(u) => u * est,
        None => est,
    })
}

/// Mean per-pixel variance of the unconstrained estimate, the mean diagonal of `(A^T S^- A)^-`.
pub fn estimate_variance(model: &MeasurementModel, cov: &CovarianceBlocks, tol: f64) -> Result<f64> {
    GlsSystem::new(model, cov, tol)?.mean_variance()
}

fn check_finite(v: &DVector<f64>, iteration: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { iteration })
    }
}

/// Iterative reduction with the physical noise model.
pub fn iterate_reduction(
    xi: &DVector<f64>,
    model: &MeasurementModel,
    source: &GhostSource,
    options: NoiseOptions,
    config: &ReductionConfig,
) -> Result<ReductionResult> {
    let provider = PhysicsCovariance {
        source,
        options,
        detectors: model.detectors(),
    };
    iterate_reduction_with(xi, model, &provider, config)
}

/// Iterative reduction with any covariance model.
///
/// Iteration 1 solves the plain system with the covariance of a constant
/// image. Every later iteration appends the previous projected estimate as a
/// pseudo-measurement with covariance `kappa I`, re-using the covariance
/// re-estimated from that estimate. Cross-covariance between the
/// pseudo-measurement and `xi` is not modelled.
pub fn iterate_reduction_with<P: CovarianceProvider + ?Sized>(
    xi: &DVector<f64>,
    model: &MeasurementModel,
    provider: &P,
    config: &ReductionConfig,
) -> Result<ReductionResult> {
    config.validate()?;
    let grid = model.grid();
    let n = grid.n_pixels();
    if xi.len() != model.n_measurements() {
        return Err(Error::mismatch("measurement vector", model.n_measurements(), xi.len()));
    }
    if let Some(u) = &config.u {
        if u.shape() != (n, n) {
            return Err(Error::mismatch("ideal-device matrix for iteration", n, u.nrows()));
        }
    }
    let xi_norm = xi.norm();
    let apply_u = |v: DVector<f64>| match &config.u {
        Some(u) => u * v,
        None => v,
    };

    let mut cov = provider.covariance(&ObjectImage::uniform(grid, config.initial_level)?)?;
    let mut previous: Option<DVector<f64>> = None;
    let mut diagnostics = Vec::new();
    let mut converged = false;

    for iteration in 1..=config.max_iters {
        let sys = GlsSystem::new(model, &cov, config.pinv_tol)?;
        let mut rhs = sys.rhs(xi);
        check_finite(&rhs, iteration)?;
        let (raw, kappa) = match &previous {
            None => (sys.solve(&rhs, 0.0)?, None),
            Some(prev) => {
                let kappa = match config.kappa {
                    Kappa::Absolute(k) => k,
                    Kappa::Relative(factor) => factor * sys.mean_variance()?,
                };
                if !(kappa.is_finite() && kappa > 0.0) {
                    return Err(Error::NonFinite { iteration });
                }
                rhs += prev / kappa;
                (sys.solve(&rhs, 1.0 / kappa)?, Some(kappa))
            }
        };
        let raw = apply_u(raw);
        check_finite(&raw, iteration)?;
        let projected = project_unit_box(&raw);

        let fitted = model.apply(projected.as_slice())?;
        let residual = if xi_norm > 0.0 {
            (xi - fitted).norm() / xi_norm
        } else {
            fitted.norm()
        };
        let change = previous.as_ref().map(|prev| {
            let scale = prev.norm();
            let diff = (&projected - prev).norm();
            if scale > 0.0 {
                diff / scale
            } else {
                diff
            }
        });
        diagnostics.push(IterationDiagnostics {
            iteration,
            residual,
            change,
            kappa,
            unprojected: raw.as_slice().to_vec(),
            estimate: projected.as_slice().to_vec(),
        });

        let image = ObjectImage::new(grid, projected.as_slice().to_vec())?;
        cov = provider.covariance(&image)?;
        previous = Some(projected);
        if change.is_some_and(|c| c < config.conv_tol) {
            converged = true;
            break;
        }
    }

    let estimate = ObjectImage::new(grid, previous.expect("at least one iteration").as_slice().to_vec())?;
    Ok(ReductionResult {
        estimate,
        iterations: diagnostics.len(),
        converged,
        diagnostics,
        covariance: cov,
    })
}

/// Orthogonal projector onto images that are constant on `b x b` blocks.
pub fn binning_projector(grid: Grid, b: usize) -> Result<DMatrix<f64>> {
    if b == 0 || grid.rows % b != 0 || grid.cols % b != 0 {
        return Err(Error::invalid("binning", "must divide both grid dimensions"));
    }
    let n = grid.n_pixels();
    let w = 1.0 / (b * b) as f64;
    Ok(DMatrix::from_fn(n, n, |p, q| {
        let (pr, pc) = (p / grid.cols, p % grid.cols);
        let (qr, qc) = (q / grid.cols, q % grid.cols);
        if pr / b == qr / b && pc / b == qc / b {
            w
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionLevel {
    pub binning: usize,
    /// Rank of the binned ideal device, `N / b^2`.
    pub rank: usize,
    /// Trace of the estimate covariance; `None` when `U (I - A^- A) != 0`.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionPoint {
    pub budget: f64,
    /// Finest admissible level, `None` when no level fits the budget.
    pub level: Option<ResolutionLevel>,
}

/// MSE of the reduction for every power-of-two binning that divides the grid.
pub fn resolution_levels(
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    grid: Grid,
    tol: f64,
) -> Result<Vec<ResolutionLevel>> {
    let n = grid.n_pixels();
    if a.ncols() != n {
        return Err(Error::mismatch("measurement operator columns", n, a.ncols()));
    }
    if sigma.shape() != (a.nrows(), a.nrows()) {
        return Err(Error::mismatch("noise covariance rows", a.nrows(), sigma.nrows()));
    }
    let a_pinv = pseudoinverse(a, tol);
    let null_part = DMatrix::identity(n, n) - &a_pinv * a;
    let sp = pseudoinverse(sigma, tol);
    let h_pinv = pseudoinverse(&(a.transpose() * sp * a), tol);
    let mut levels = Vec::new();
    let mut b = 1;
    while grid.rows % b == 0 && grid.cols % b == 0 {
        let u = binning_projector(grid, b)?;
        let synth = (&u * &null_part).abs().max() <= 1e-8;
        let mse = synth.then(|| (&u * &h_pinv * u.transpose()).trace());
        levels.push(ResolutionLevel {
            binning: b,
            rank: n / (b * b),
            mse,
        });
        b *= 2;
    }
    Ok(levels)
}

/// For each MSE budget, the finest binning whose reduction MSE fits it.
pub fn effective_resolution_curve(
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    grid: Grid,
    budgets: &[f64],
) -> Result<Vec<ResolutionPoint>> {
    let levels = resolution_levels(a, sigma, grid, DEFAULT_PINV_TOL)?;
    Ok(budgets
        .iter()
        .map(|&budget| ResolutionPoint {
            budget,
            level: levels
                .iter()
                .find(|l| l.mse.is_some_and(|m| m <= budget))
                .cloned(),
        })
        .collect())
}

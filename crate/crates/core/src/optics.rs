//! Four-mode parametric converter and the discrete pixel mode model.
//!
//! The converter acts on the column `(a1, a2†, a3, a4†)` of exit operators:
//! `v_out = Q v_in`. Three processes are coupled: pair generation into arms
//! 1 and 2, and frequency conversion 1 <-> 3 and 2 <-> 4. Distinct pixels are
//! independent groups of four modes sharing the same `Q`.

use nalgebra::Matrix4;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::wick::{vacuum_pair_moment, LadderOp, OpKind, PairMoments};

/// Number of frequency arms (object arm plus three reference arms).
pub const N_ARMS: usize = 4;

/// Accepted deviation of `Q K Q†` from `K` when constructing a converter.
pub const METRIC_TOLERANCE: f64 = 1e-8;

/// One of the four frequency arms, numbered 1..=4. Arm 1 illuminates the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Arm(u8);

impl Arm {
    pub const OBJECT: Arm = Arm(1);
    pub const REFERENCE: [Arm; 3] = [Arm(2), Arm(3), Arm(4)];
    pub const ALL: [Arm; 4] = [Arm(1), Arm(2), Arm(3), Arm(4)];

    pub fn new(number: u8) -> Result<Self> {
        if (1..=4).contains(&number) {
            Ok(Arm(number))
        } else {
            Err(Error::invalid("arm", format!("{number} is not in 1..=4")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// Zero-based position in the `(a1, a2†, a3, a4†)` column.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    /// Arms 2 and 4 enter the converter column as creation operators.
    pub fn is_conjugated(self) -> bool {
        self.0 % 2 == 0
    }
}

/// Pixel array shape. Pixels are stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("grid", format!("{rows}x{cols} has an empty side")));
        }
        Ok(Grid { rows, cols })
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Point inversion through the grid centre, `r -> -r`.
    ///
    /// In row-major order this is index reversal.
    pub fn invert(&self, pixel: usize) -> usize {
        self.n_pixels() - 1 - pixel
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalParams {
    /// Object-arm wave number, 1/cm.
    pub k1: f64,
    /// Arm-3 wave number, 1/cm.
    pub k3: f64,
    /// Pair-generation coupling, 1/cm.
    pub beta: f64,
    /// Conversion-to-generation coupling ratio `gamma / beta`.
    pub coupling_ratio: f64,
    /// Normalised crystal thickness `beta * l`.
    pub zeta: f64,
    /// Lens focal length, cm.
    pub focal_length: f64,
    pub grid: Grid,
    /// Pixel pitch, cm.
    pub pixel_pitch: f64,
    /// Frames accumulated per correlator output.
    pub n_frames: u64,
}

impl PhysicalParams {
    /// Beam and converter parameters of the published simulation on a 64x64 array.
    pub fn reference() -> Self {
        PhysicalParams {
            k1: 6.0e4,
            k3: 1.7e5,
            beta: 10.0,
            coupling_ratio: 0.4,
            zeta: 6.0,
            focal_length: 10.0,
            grid: Grid { rows: 64, cols: 64 },
            pixel_pitch: 1.0e-3,
            n_frames: DEFAULT_N_FRAMES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k1", self.k1),
            ("k3", self.k3),
            ("beta", self.beta),
            ("focal_length", self.focal_length),
            ("pixel_pitch", self.pixel_pitch),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("{v} must be finite and > 0")));
            }
        }
        if !(self.zeta.is_finite() && self.zeta >= 0.0) {
            return Err(Error::invalid("zeta", format!("{} must be finite and >= 0", self.zeta)));
        }
        if !(self.coupling_ratio.is_finite() && self.coupling_ratio >= 0.0) {
            return Err(Error::invalid(
                "coupling_ratio",
                format!("{} must be finite and >= 0", self.coupling_ratio),
            ));
        }
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return Err(Error::invalid("grid", "empty grid"));
        }
        if self.n_frames == 0 {
            return Err(Error::invalid("n_frames", "must be >= 1"));
        }
        Ok(())
    }

    /// Crystal length in cm.
    pub fn crystal_length(&self) -> f64 {
        self.zeta / self.beta
    }

    /// Conversion coupling `gamma`, 1/cm.
    pub fn gamma(&self) -> f64 {
        self.coupling_ratio * self.beta
    }

    /// The `(k1 / 2 pi f)^2` factor of the ghost-image mean, times the squared
    /// pixel area. Reported only; the model works in units where it is 1.
    pub fn ghost_image_prefactor(&self) -> f64 {
        let k = self.k1 / (2.0 * std::f64::consts::PI * self.focal_length);
        let area = self.pixel_pitch * self.pixel_pitch;
        k * k * area * area
    }
}

/// Frames per correlator output unless configured otherwise.
pub const DEFAULT_N_FRAMES: u64 = 10_000_000;

/// `K = diag(1, -1, 1, -1)`, the commutator metric of `(a1, a2†, a3, a4†)`.
pub fn metric() -> Matrix4<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    Matrix4::from_diagonal(&nalgebra::Vector4::new(one, -one, one, -one))
}

/// Generator `M` with `dv/dz = M v` in units of `beta`.
///
/// The annihilation-operator equations all carry `+i` couplings: strength 1
/// between `a1` and `a2†`, strength `coupling_ratio` for `a1 <-> a3` and
/// `a2 <-> a4`. Rows of the conjugated arms pick up the complex conjugate.
pub fn build_generator(params: &PhysicalParams) -> Matrix4<Complex64> {
    let i = Complex64::new(0.0, 1.0);
    let x = params.coupling_ratio;
    let mut m = Matrix4::<Complex64>::zeros();
    // da1/dz = i a2†, d(a2†)/dz = -i a1
    m[(0, 1)] = i;
    m[(1, 0)] = -i;
    if x != 0.0 {
        // da1/dz += i x a3, da3/dz = i x a1
        m[(0, 2)] = i * x;
        m[(2, 0)] = i * x;
        // da2/dz = i x a4  =>  d(a2†)/dz = -i x a4†, and symmetrically for a4†
        m[(1, 3)] = -i * x;
        m[(3, 1)] = -i * x;
    }
    m
}

/// The 4x4 Bogoliubov matrix acting on `(a1, a2†, a3, a4†)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConverterMatrix {
    q: Matrix4<Complex64>,
}

impl ConverterMatrix {
    /// Wraps `q` after checking `Q K Q† = K`.
    pub fn from_matrix(q: Matrix4<Complex64>) -> Result<Self> {
        let c = ConverterMatrix { q };
        let r = c.metric_residual();
        if !(r <= METRIC_TOLERANCE) {
            return Err(Error::Consistency(format!(
                "converter matrix violates the bosonic metric by {r:e}"
            )));
        }
        Ok(c)
    }

    pub fn identity() -> Self {
        ConverterMatrix {
            q: Matrix4::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.q
    }

    pub fn get(&self, row: Arm, col: Arm) -> Complex64 {
        self.q[(row.index(), col.index())]
    }

    /// `max |Q K Q† - K|` over all entries.
    pub fn metric_residual(&self) -> f64 {
        let k = metric();
        (self.q * k * self.q.adjoint() - k)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Closed-form `⟨n⟩` of one arm from the rows of `Q` (vacuum input).
    pub fn mean_photon_number(&self, arm: Arm) -> f64 {
        let row = arm.index();
        // Only input operators that appear as creation operators in a_arm
        // contribute: a_arm† holds conj(Q) on v_in† for unconjugated arms.
        (0..N_ARMS)
            .filter(|&n| (n % 2 == 1) != arm.is_conjugated())
            .map(|n| self.q[(row, n)].norm_sqr())
            .sum()
    }

    /// `Q11 Q*_j1 + Q13 Q*_j3`, the transfer product behind the ghost-image mean.
    pub fn ghost_transfer(&self, j: Arm) -> Complex64 {
        let q = &self.q;
        let r = j.index();
        q[(0, 0)] * q[(r, 0)].conj() + q[(0, 2)] * q[(r, 2)].conj()
    }
}

/// `Q = exp(M zeta)` for the configured couplings.
pub fn converter_matrix(params: &PhysicalParams) -> Result<ConverterMatrix> {
    params.validate()?;
    let m = build_generator(params) * Complex64::new(params.zeta, 0.0);
    ConverterMatrix::from_matrix(m.exp())
}

/// Maps `(pixel, arm)` to mode ids `4 * pixel + (arm - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelModeSet {
    grid: Grid,
}

impl PixelModeSet {
    pub fn new(grid: Grid) -> Self {
        PixelModeSet { grid }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn n_modes(&self) -> usize {
        N_ARMS * self.grid.n_pixels()
    }

    pub fn mode(&self, pixel: usize, arm: Arm) -> usize {
        N_ARMS * pixel + arm.index()
    }

    pub fn pixel_of(&self, mode: usize) -> usize {
        mode / N_ARMS
    }

    pub fn arm_of(&self, mode: usize) -> Arm {
        Arm((mode % N_ARMS) as u8 + 1)
    }

    pub fn mirror(&self, pixel: usize) -> usize {
        self.grid.invert(pixel)
    }
}

fn split_mode(mode: usize) -> (usize, usize) {
    (mode / N_ARMS, mode % N_ARMS)
}

/// Input operator sitting at slot `n` of the column `(a1, a2†, a3, a4†)` of one pixel.
fn column_op(base: usize, n: usize) -> LadderOp {
    if n % 2 == 0 {
        LadderOp::annihilate(base + n)
    } else {
        LadderOp::create(base + n)
    }
}

/// Expands an exit operator as a combination of input operators of its pixel.
pub fn expand_exit_op(op: LadderOp, q: &ConverterMatrix) -> [(Complex64, LadderOp); N_ARMS] {
    let (pixel, k) = split_mode(op.mode);
    let base = N_ARMS * pixel;
    // Column slot k holds an annihilator for even k and a creator for odd k.
    let is_column_form = (k % 2 == 0) == (op.kind == OpKind::Annihilation);
    std::array::from_fn(|n| {
        let c = q.q[(k, n)];
        if is_column_form {
            (c, column_op(base, n))
        } else {
            (c.conj(), column_op(base, n).dagger())
        }
    })
}

/// `⟨X Y⟩` for exit-field operators, with vacuum at the crystal input.
///
/// Operators of different pixels are uncorrelated.
pub fn exit_pair_moment(x: LadderOp, y: LadderOp, q: &ConverterMatrix) -> Complex64 {
    if split_mode(x.mode).0 != split_mode(y.mode).0 {
        return Complex64::new(0.0, 0.0);
    }
    let ex = expand_exit_op(x, q);
    let ey = expand_exit_op(y, q);
    let mut acc = Complex64::new(0.0, 0.0);
    for &(cx, ox) in &ex {
        for &(cy, oy) in &ey {
            acc += cx * cy * vacuum_pair_moment(ox, oy);
        }
    }
    acc
}

/// Exit-field pair moments over a pixel array: the same 8x8 block in every
/// pixel, zero between pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMomentTable {
    modes: PixelModeSet,
    block: [[Complex64; 2 * N_ARMS]; 2 * N_ARMS],
}

fn local_slot(op: LadderOp) -> usize {
    let (_, k) = split_mode(op.mode);
    2 * k + usize::from(op.kind == OpKind::Annihilation)
}

pub fn build_pair_moment_table(q: &ConverterMatrix, modes: PixelModeSet) -> PairMomentTable {
    let ops: Vec<LadderOp> = (0..N_ARMS)
        .flat_map(|k| [LadderOp::create(k), LadderOp::annihilate(k)])
        .collect();
    let mut block = [[Complex64::new(0.0, 0.0); 2 * N_ARMS]; 2 * N_ARMS];
    for &x in &ops {
        for &y in &ops {
            block[local_slot(x)][local_slot(y)] = exit_pair_moment(x, y, q);
        }
    }
    PairMomentTable { modes, block }
}

impl PairMomentTable {
    pub fn modes(&self) -> PixelModeSet {
        self.modes
    }

    /// Largest violation of `⟨X Y⟩ = conj⟨Y† X†⟩` in the per-pixel block.
    pub fn hermiticity_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..N_ARMS {
            for l in 0..N_ARMS {
                for x in [LadderOp::create(k), LadderOp::annihilate(k)] {
                    for y in [LadderOp::create(l), LadderOp::annihilate(l)] {
                        let v = self.block[local_slot(x)][local_slot(y)];
                        let w = self.block[local_slot(y.dagger())][local_slot(x.dagger())];
                        worst = worst.max((v - w.conj()).norm());
                    }
                }
            }
        }
        worst
    }
}

impl PairMoments for PairMomentTable {
    fn pair_moment(&self, x: LadderOp, y: LadderOp) -> Option<Complex64> {
        let n = self.modes.n_modes();
        if x.mode >= n || y.mode >= n {
            return None;
        }
        if split_mode(x.mode).0 != split_mode(y.mode).0 {
            return Some(Complex64::new(0.0, 0.0));
        }
        Some(self.block[local_slot(x)][local_slot(y)])
    }
}

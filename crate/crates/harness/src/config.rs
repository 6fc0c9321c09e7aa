//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `k1`, `k3` | 6e4, 1.7e5 | wave numbers, 1/cm |
//! | `beta` | 10 | pair-generation coupling, 1/cm |
//! | `coupling_ratio` | 0.4 | conversion-to-generation coupling ratio |
//! | `zeta` | 6 | normalised crystal thickness |
//! | `focal_length` | 10 | cm |
//! | `pixel_pitch` | 1e-3 | cm |
//! | `grid` | 64x64 | rows x cols |
//! | `n_frames` | 10000000 | frames per correlator output |
//! | `object` | builtin | PGM/CSV path (relative to the config file) or `builtin` |
//! | `output_dir` | out | relative to the config file |
//! | `seed` | 0 | noise generator seed |
//! | `noise` | true | add sampled correlator noise |
//! | `white_noise` | 0 | extra variance per correlator output |
//! | `block_diagonal` | false | drop cross-pixel noise covariance |
//! | `detectors` | ideal | `ideal` or `binned:B` |
//! | `kappa` | relative:100 | `relative:F` or `absolute:V` |
//! | `pinv_tol`, `max_iters`, `conv_tol` | 1e-10, 20, 1e-4 | reduction controls |
//! | `initial_level` | 1 | constant transparency seeding iteration 1 |
//! | `emit_ghost_images`, `emit_sum`, `emit_reduced`, `emit_report` | true | outputs |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mgi_core::optics::{Grid, PhysicalParams};
use mgi_core::reduction::{Kappa, ReductionConfig};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectSource {
    Builtin,
    Path(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorModel {
    Ideal,
    /// Each reference detector sums `b x b` pixel blocks.
    Binned(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitFlags {
    pub ghost_images: bool,
    pub sum: bool,
    pub reduced: bool,
    pub report: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub params: PhysicalParams,
    pub object: ObjectSource,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub noise: bool,
    pub white_noise: f64,
    pub block_diagonal: bool,
    pub detectors: DetectorModel,
    pub reduction: ReductionConfig,
    pub emit: EmitFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            params: PhysicalParams::reference(),
            object: ObjectSource::Builtin,
            output_dir: PathBuf::from("out"),
            seed: 0,
            noise: true,
            white_noise: 0.0,
            block_diagonal: false,
            detectors: DetectorModel::Ideal,
            reduction: ReductionConfig::default(),
            emit: EmitFlags {
                ghost_images: true,
                sum: true,
                reduced: true,
                report: true,
            },
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> HarnessError {
    HarnessError::Config(format!("{key} = {value}: {why}"))
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

pub fn parse_grid(value: &str) -> Result<Grid> {
    let (r, c) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| bad("grid", value, "expected RxC"))?;
    let rows = number("grid", r.trim())?;
    let cols = number("grid", c.trim())?;
    Grid::new(rows, cols).map_err(|e| bad("grid", value, &e.to_string()))
}

fn parse_kappa(value: &str) -> Result<Kappa> {
    let (kind, v) = value
        .split_once(':')
        .ok_or_else(|| bad("kappa", value, "expected relative:F or absolute:V"))?;
    let v: f64 = number("kappa", v.trim())?;
    match kind.trim() {
        "relative" => Ok(Kappa::Relative(v)),
        "absolute" => Ok(Kappa::Absolute(v)),
        _ => Err(bad("kappa", value, "expected relative:F or absolute:V")),
    }
}

fn parse_detectors(value: &str) -> Result<DetectorModel> {
    if value == "ideal" {
        return Ok(DetectorModel::Ideal);
    }
    match value.split_once(':') {
        Some(("binned", b)) => {
            let b: usize = number("detectors", b.trim())?;
            if b == 0 {
                return Err(bad("detectors", value, "bin size must be >= 1"));
            }
            Ok(DetectorModel::Binned(b))
        }
        _ => Err(bad("detectors", value, "expected ideal or binned:B")),
    }
}

impl ExperimentConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            output_dir: base.join("out"),
            ..Default::default()
        };
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), lineno + 1).is_some() {
                return Err(HarnessError::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            let p = &mut cfg.params;
            match key {
                "k1" => p.k1 = number(key, value)?,
                "k3" => p.k3 = number(key, value)?,
                "beta" => p.beta = number(key, value)?,
                "coupling_ratio" => p.coupling_ratio = number(key, value)?,
                "zeta" => p.zeta = number(key, value)?,
                "focal_length" => p.focal_length = number(key, value)?,
                "pixel_pitch" => p.pixel_pitch = number(key, value)?,
                "grid" => p.grid = parse_grid(value)?,
                "n_frames" => p.n_frames = number::<f64>(key, value).and_then(|v| {
                    if v.fract() == 0.0 && v >= 1.0 && v <= u64::MAX as f64 {
                        Ok(v as u64)
                    } else {
                        Err(bad(key, value, "must be a positive integer"))
                    }
                })?,
                "object" => {
                    cfg.object = if value == "builtin" {
                        ObjectSource::Builtin
                    } else {
                        ObjectSource::Path(base.join(value))
                    }
                }
                "output_dir" => cfg.output_dir = base.join(value),
                "seed" => cfg.seed = number(key, value)?,
                "noise" => cfg.noise = flag(key, value)?,
                "white_noise" => cfg.white_noise = number(key, value)?,
                "block_diagonal" => cfg.block_diagonal = flag(key, value)?,
                "detectors" => cfg.detectors = parse_detectors(value)?,
                "kappa" => cfg.reduction.kappa = parse_kappa(value)?,
                "pinv_tol" => cfg.reduction.pinv_tol = number(key, value)?,
                "max_iters" => cfg.reduction.max_iters = number(key, value)?,
                "conv_tol" => cfg.reduction.conv_tol = number(key, value)?,
                "initial_level" => cfg.reduction.initial_level = number(key, value)?,
                "emit_ghost_images" => cfg.emit.ghost_images = flag(key, value)?,
                "emit_sum" => cfg.emit.sum = flag(key, value)?,
                "emit_reduced" => cfg.emit.reduced = flag(key, value)?,
                "emit_report" => cfg.emit.report = flag(key, value)?,
                _ => return Err(HarnessError::Config(format!("line {}: unknown key {key}", lineno + 1))),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: mgi_core::Error| HarnessError::Config(e.to_string());
        self.params.validate().map_err(wrap)?;
        self.reduction.validate().map_err(wrap)?;
        if !(self.white_noise.is_finite() && self.white_noise >= 0.0) {
            return Err(HarnessError::Config("white_noise must be finite and >= 0".into()));
        }
        if let DetectorModel::Binned(b) = self.detectors {
            let g = self.params.grid;
            if g.rows % b != 0 || g.cols % b != 0 {
                return Err(HarnessError::Config(format!("binned:{b} does not divide grid {g}")));
            }
        }
        if let ObjectSource::Path(p) = &self.object {
            if !p.is_file() {
                return Err(HarnessError::Config(format!("object {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Every setting that affects the artifacts, one `key = value` per line.
    ///
    /// The output directory is left out so that runs into different
    /// directories can be compared.
    pub fn canonical(&self) -> String {
        let p = &self.params;
        let r = &self.reduction;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("k1", format!("{:e}", p.k1));
        put("k3", format!("{:e}", p.k3));
        put("beta", format!("{:e}", p.beta));
        put("coupling_ratio", format!("{:e}", p.coupling_ratio));
        put("zeta", format!("{:e}", p.zeta));
        put("focal_length", format!("{:e}", p.focal_length));
        put("pixel_pitch", format!("{:e}", p.pixel_pitch));
        put("grid", p.grid.to_string());
        put("n_frames", p.n_frames.to_string());
        put(
            "object",
            match &self.object {
                ObjectSource::Builtin => "builtin".into(),
                ObjectSource::Path(path) => path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            },
        );
        put("seed", self.seed.to_string());
        put("noise", self.noise.to_string());
        put("white_noise", format!("{:e}", self.white_noise));
        put("block_diagonal", self.block_diagonal.to_string());
        put(
            "detectors",
            match self.detectors {
                DetectorModel::Ideal => "ideal".into(),
                DetectorModel::Binned(b) => format!("binned:{b}"),
            },
        );
        put(
            "kappa",
            match r.kappa {
                Kappa::Relative(v) => format!("relative:{v:e}"),
                Kappa::Absolute(v) => format!("absolute:{v:e}"),
            },
        );
        put("pinv_tol", format!("{:e}", r.pinv_tol));
        put("max_iters", r.max_iters.to_string());
        put("conv_tol", format!("{:e}", r.conv_tol));
        put("initial_level", format!("{:e}", r.initial_level));
        put("emit_ghost_images", self.emit.ghost_images.to_string());
        put("emit_sum", self.emit.sum.to_string());
        put("emit_reduced", self.emit.reduced.to_string());
        put("emit_report", self.emit.report.to_string());
        s
    }

    /// SHA-256 of [`Self::canonical`] followed by the object bytes.
    pub fn fingerprint(&self, object_bytes: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.update(object_bytes);
        hex::encode(h.finalize())
    }
}

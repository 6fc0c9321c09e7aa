//! Brute-force reference for one pixel of the four-mode converter.
//!
//! The pixel state is `exp(i z H)|0>` with
//! `H = a1+ a2+ + a1 a2 + x (a1+ a3 + a3+ a1) + x (a2+ a4 + a4+ a2)`,
//! evolved by Taylor steps in the number basis. `H` conserves
//! `n1 + n3 - n2 - n4`, so starting from vacuum only states with
//! `n1 + n3 = n2 + n4 = k` are reached, and the basis is truncated at `k <= kmax`.
//!
//! Nothing here shares code with the Gaussian implementation. Pixels are
//! independent and identically distributed, so multi-pixel moments are
//! products of single-pixel ones.

use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq)]
struct C {
    re: f64,
    im: f64,
}

impl C {
    const ZERO: C = C { re: 0.0, im: 0.0 };
    fn scale(self, s: f64) -> C {
        C { re: self.re * s, im: self.im * s }
    }
    fn times_i(self) -> C {
        C { re: -self.im, im: self.re }
    }
    fn add(self, o: C) -> C {
        C { re: self.re + o.re, im: self.im + o.im }
    }
    fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

struct Basis {
    kmax: usize,
}

impl Basis {
    fn offset(k: usize) -> usize {
        k * (k + 1) * (2 * k + 1) / 6
    }
    fn len(&self) -> usize {
        Self::offset(self.kmax + 1)
    }
    fn index(&self, k: usize, n1: usize, n2: usize) -> usize {
        Self::offset(k) + n1 * (k + 1) + n2
    }
    fn states(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..=self.kmax).flat_map(|k| (0..=k).flat_map(move |n1| (0..=k).map(move |n2| (k, n1, n2))))
    }
}

fn apply_h(basis: &Basis, x: f64, psi: &[C], out: &mut [C]) {
    out.iter_mut().for_each(|v| *v = C::ZERO);
    for (k, n1, n2) in basis.states() {
        let amp = psi[basis.index(k, n1, n2)];
        if amp == C::ZERO {
            continue;
        }
        let n3 = k - n1;
        let n4 = k - n2;
        let (f1, f2, f3, f4) = (n1 as f64, n2 as f64, n3 as f64, n4 as f64);
        let mut push = |k2: usize, m1: usize, m2: usize, c: f64| {
            let t = basis.index(k2, m1, m2);
            out[t] = out[t].add(amp.scale(c));
        };
        if k < basis.kmax {
            push(k + 1, n1 + 1, n2 + 1, ((f1 + 1.0) * (f2 + 1.0)).sqrt());
        }
        if n1 > 0 && n2 > 0 {
            push(k - 1, n1 - 1, n2 - 1, (f1 * f2).sqrt());
        }
        if x != 0.0 {
            if n3 > 0 {
                push(k, n1 + 1, n2, x * ((f1 + 1.0) * f3).sqrt());
            }
            if n1 > 0 {
                push(k, n1 - 1, n2, x * (f1 * (f3 + 1.0)).sqrt());
            }
            if n4 > 0 {
                push(k, n1, n2 + 1, x * ((f2 + 1.0) * f4).sqrt());
            }
            if n2 > 0 {
                push(k, n1, n2 - 1, x * (f2 * (f4 + 1.0)).sqrt());
            }
        }
    }
}

/// Joint photon-number distribution `P(n1, n2, n3, n4)` of one pixel.
#[derive(Debug, Clone)]
pub struct PixelDistribution {
    pub kmax: usize,
    /// Probability carried by the outermost shells `k > kmax - 10`.
    pub edge_mass: f64,
    /// Total probability; deviates from 1 only by integration error.
    pub norm: f64,
    states: Vec<[u32; 4]>,
    probs: Vec<f64>,
}

impl PixelDistribution {
    /// Evolves with a fixed cutoff.
    pub fn with_cutoff(zeta: f64, x: f64, kmax: usize) -> Self {
        let basis = Basis { kmax };
        let mut psi = vec![C::ZERO; basis.len()];
        psi[0] = C { re: 1.0, im: 0.0 };
        let steps = ((zeta.abs() * kmax as f64 * (1.0 + 2.0 * x.abs())) / 2.0).ceil().max(1.0) as usize;
        let h = zeta / steps as f64;
        let mut term = vec![C::ZERO; psi.len()];
        let mut next = vec![C::ZERO; psi.len()];
        for _ in 0..steps {
            term.copy_from_slice(&psi);
            let mut m = 1;
            loop {
                apply_h(&basis, x, &term, &mut next);
                let s = h / m as f64;
                let mut size = 0.0;
                for (t, v) in term.iter_mut().zip(&next) {
                    *t = v.times_i().scale(s);
                    size += t.norm_sqr();
                }
                for (p, t) in psi.iter_mut().zip(&term) {
                    *p = p.add(*t);
                }
                m += 1;
                if size < 1e-36 || m > 200 {
                    break;
                }
            }
        }
        let mut states = Vec::new();
        let mut probs = Vec::new();
        let mut edge_mass = 0.0;
        let mut norm = 0.0;
        for (k, n1, n2) in basis.states() {
            let p = psi[basis.index(k, n1, n2)].norm_sqr();
            norm += p;
            if k + 10 > kmax {
                edge_mass += p;
            }
            if p > 0.0 {
                states.push([n1 as u32, n2 as u32, (k - n1) as u32, (k - n2) as u32]);
                probs.push(p);
            }
        }
        PixelDistribution {
            kmax,
            edge_mass,
            norm,
            states,
            probs,
        }
    }

    /// Raises the cutoff until the outer shells hold less than `1e-14`.
    pub fn new(zeta: f64, x: f64) -> Self {
        let mut kmax = 40;
        loop {
            let d = Self::with_cutoff(zeta, x, kmax);
            if d.edge_mass < 1e-14 || kmax >= 200 {
                return d;
            }
            kmax += 40;
        }
    }

    /// `E[n1^p1 n2^p2 n3^p3 n4^p4]`.
    pub fn moment(&self, powers: [u32; 4]) -> f64 {
        self.states
            .iter()
            .zip(&self.probs)
            .map(|(s, p)| {
                p * (0..4)
                    .map(|a| (s[a] as f64).powi(powers[a] as i32))
                    .product::<f64>()
            })
            .sum()
    }

    /// `E[prod n_arm(pixel)]` over independent identical pixels.
    ///
    /// `ops` holds `(pixel, arm)` with arms numbered 1..=4.
    pub fn joint_moment(&self, ops: &[(usize, usize)]) -> f64 {
        let mut by_pixel: BTreeMap<usize, [u32; 4]> = BTreeMap::new();
        for &(pixel, arm) in ops {
            by_pixel.entry(pixel).or_insert([0; 4])[arm - 1] += 1;
        }
        by_pixel.values().map(|p| self.moment(*p)).product()
    }

    /// Inverse-CDF sampler.
    pub fn sampler(&self) -> Sampler {
        let mut acc = 0.0;
        let cdf = self
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Sampler {
            cdf,
            states: self.states.clone(),
        }
    }
}

pub struct Sampler {
    cdf: Vec<f64>,
    states: Vec<[u32; 4]>,
}

impl Sampler {
    /// Photon numbers for a uniform draw `u` in `[0, 1)`.
    pub fn sample(&self, u: f64) -> [u32; 4] {
        let target = u * self.cdf.last().copied().unwrap_or(1.0);
        let i = self.cdf.partition_point(|&c| c <= target);
        self.states[i.min(self.states.len() - 1)]
    }
}

/// `(arm, detector pixel)` of one correlator output, arm in 2..=4.
pub type Output = (usize, usize);

/// Single-frame covariance of two correlator outputs.
///
/// The object arm is collected by a bucket, `I1 = sum_p f[p] n1(p)`. The
/// reference arm images crystal pixel `invert(d)` onto detector pixel `d`,
/// and the output is `I1 * n_j(invert(d))`.
pub fn ghost_covariance(
    dist: &PixelDistribution,
    f: &[f64],
    invert: impl Fn(usize) -> usize,
    a: Output,
    b: Output,
) -> f64 {
    let (ia, sa) = (a.0, invert(a.1));
    let (ib, sb) = (b.0, invert(b.1));
    let mut second = 0.0;
    let mut first_a = 0.0;
    let mut first_b = 0.0;
    for (p, &fp) in f.iter().enumerate() {
        if fp == 0.0 {
            continue;
        }
        first_a += fp * dist.joint_moment(&[(p, 1), (sa, ia)]);
        first_b += fp * dist.joint_moment(&[(p, 1), (sb, ib)]);
        for (q, &fq) in f.iter().enumerate() {
            if fq != 0.0 {
                second += fp * fq * dist.joint_moment(&[(p, 1), (q, 1), (sa, ia), (sb, ib)]);
            }
        }
    }
    second - first_a * first_b
}

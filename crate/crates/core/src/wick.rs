//! Wick contractions of bosonic ladder-operator strings.
//!
//! For a zero-mean Gaussian state the expectation of a string of creation and
//! annihilation operators is the sum, over every way of splitting the string
//! into ordered pairs, of the product of the pair expectations. Each pair keeps
//! the order its two operators have in the original string.

use std::collections::HashMap;
use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Default upper bound on operator string length (10395 pairings).
pub const DEFAULT_PAIRING_CAP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Creation,
    Annihilation,
}

/// A creation or annihilation operator acting on one mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LadderOp {
    pub mode: usize,
    pub kind: OpKind,
}

impl LadderOp {
    pub const fn create(mode: usize) -> Self {
        LadderOp {
            mode,
            kind: OpKind::Creation,
        }
    }

    pub const fn annihilate(mode: usize) -> Self {
        LadderOp {
            mode,
            kind: OpKind::Annihilation,
        }
    }

    /// Hermitian conjugate: same mode, opposite kind.
    pub const fn dagger(self) -> Self {
        LadderOp {
            mode: self.mode,
            kind: match self.kind {
                OpKind::Creation => OpKind::Annihilation,
                OpKind::Annihilation => OpKind::Creation,
            },
        }
    }

    pub fn is_creation(self) -> bool {
        self.kind == OpKind::Creation
    }
}

impl fmt::Display for LadderOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            OpKind::Creation => write!(f, "a{}\u{2020}", self.mode),
            OpKind::Annihilation => write!(f, "a{}", self.mode),
        }
    }
}

/// Number operator `a† a` of one mode as a two-operator string.
pub fn number_op(mode: usize) -> [LadderOp; 2] {
    [LadderOp::create(mode), LadderOp::annihilate(mode)]
}

/// A complete pairing of positions `0..2n`.
///
/// Pairs are stored with `i < j`, and the first elements strictly increase from
/// pair to pair, so every contraction has exactly one representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pairing {
    pairs: Vec<(usize, usize)>,
}

impl Pairing {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks both ordering conditions and that every position is used once.
    pub fn is_canonical(&self) -> bool {
        let n = 2 * self.pairs.len();
        let mut seen = vec![false; n];
        for &(i, j) in &self.pairs {
            if i >= j || j >= n || seen[i] || seen[j] {
                return false;
            }
            seen[i] = true;
            seen[j] = true;
        }
        self.pairs.windows(2).all(|w| w[0].0 < w[1].0)
    }

    fn shifted(&self, offset: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(move |&(i, j)| (i + offset, j + offset))
    }
}

/// Enumerates every pairing of `n_ops` positions, capped at [`DEFAULT_PAIRING_CAP`].
pub fn enumerate_pairings(n_ops: usize) -> Result<Vec<Pairing>> {
    enumerate_pairings_with_cap(n_ops, DEFAULT_PAIRING_CAP)
}

/// Enumerates the `(n_ops - 1)!!` pairings of `n_ops` positions.
///
/// The smallest unpaired position is always paired next, which yields the
/// canonical form directly instead of filtering all `n_ops!` permutations.
/// Output order is lexicographic in the pair list.
pub fn enumerate_pairings_with_cap(n_ops: usize, cap: usize) -> Result<Vec<Pairing>> {
    if n_ops % 2 != 0 {
        return Err(Error::OddOperatorCount(n_ops));
    }
    if n_ops > cap {
        return Err(Error::PairingCapExceeded { len: n_ops, cap });
    }
    let mut out = Vec::with_capacity(double_factorial(n_ops.saturating_sub(1)));
    let mut free: Vec<usize> = (0..n_ops).collect();
    let mut current = Vec::with_capacity(n_ops / 2);
    extend_pairings(&mut free, &mut current, &mut out);
    Ok(out)
}

fn extend_pairings(
    free: &mut Vec<usize>,
    current: &mut Vec<(usize, usize)>,
    out: &mut Vec<Pairing>,
) {
    if free.is_empty() {
        out.push(Pairing {
            pairs: current.clone(),
        });
        return;
    }
    let first = free.remove(0);
    for k in 0..free.len() {
        let partner = free.remove(k);
        current.push((first, partner));
        extend_pairings(free, current, out);
        current.pop();
        free.insert(k, partner);
    }
    free.insert(0, first);
}

/// Pairings of a concatenation of strings in which no pair crosses a string
/// boundary, i.e. the expansion of a product of separate averages.
pub fn enumerate_factorized_pairings(group_sizes: &[usize]) -> Result<Vec<Pairing>> {
    let mut acc = vec![Pairing { pairs: Vec::new() }];
    let mut offset = 0;
    for &size in group_sizes {
        let group = enumerate_pairings(size)?;
        acc = acc
            .iter()
            .flat_map(|head| {
                group.iter().map(move |tail| Pairing {
                    pairs: head.pairs.iter().copied().chain(tail.shifted(offset)).collect(),
                })
            })
            .collect();
        offset += size;
    }
    Ok(acc)
}

/// `(n)!!` for odd or even `n`; `(-1)!! = 0!! = 1`.
pub fn double_factorial(n: usize) -> usize {
    (1..=n).rev().step_by(2).product()
}

/// Second moment of two input-field operators in the vacuum.
///
/// Only `⟨a_m a_m†⟩ = 1` survives.
pub fn vacuum_pair_moment(x: LadderOp, y: LadderOp) -> Complex64 {
    if x.kind == OpKind::Annihilation && y.kind == OpKind::Creation && x.mode == y.mode {
        Complex64::new(1.0, 0.0)
    } else {
        Complex64::new(0.0, 0.0)
    }
}

/// Source of ordered pair moments `⟨X Y⟩`.
///
/// Returns `None` when the pair is outside the table's domain.
pub trait PairMoments {
    fn pair_moment(&self, x: LadderOp, y: LadderOp) -> Option<Complex64>;
}

/// The input vacuum itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vacuum;

impl PairMoments for Vacuum {
    fn pair_moment(&self, x: LadderOp, y: LadderOp) -> Option<Complex64> {
        Some(vacuum_pair_moment(x, y))
    }
}

/// Explicit lookup table of ordered pair moments.
#[derive(Debug, Clone, Default)]
pub struct PairTable {
    entries: HashMap<(LadderOp, LadderOp), Complex64>,
}

impl PairTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, x: LadderOp, y: LadderOp, value: Complex64) {
        self.entries.insert((x, y), value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest violation of `⟨X Y⟩ = conj⟨Y† X†⟩` over pairs whose partner is present.
    pub fn hermiticity_residual(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(&(x, y), &v)| {
                self.entries
                    .get(&(y.dagger(), x.dagger()))
                    .map(|w| (v - w.conj()).norm())
            })
            .fold(0.0, f64::max)
    }
}

impl PairMoments for PairTable {
    fn pair_moment(&self, x: LadderOp, y: LadderOp) -> Option<Complex64> {
        self.entries.get(&(x, y)).copied()
    }
}

impl<T: PairMoments + ?Sized> PairMoments for &T {
    fn pair_moment(&self, x: LadderOp, y: LadderOp) -> Option<Complex64> {
        (**self).pair_moment(x, y)
    }
}

/// Gaussian moment `⟨ops[0] ops[1] ... ops[n-1]⟩` by Wick's theorem.
///
/// Empty strings give 1 and odd strings give 0. Every pair that appears in some
/// contraction must be present in `table`.
pub fn gaussian_moment<T: PairMoments + ?Sized>(ops: &[LadderOp], table: &T) -> Result<Complex64> {
    gaussian_moment_with_cap(ops, table, DEFAULT_PAIRING_CAP)
}

pub fn gaussian_moment_with_cap<T: PairMoments + ?Sized>(
    ops: &[LadderOp],
    table: &T,
    cap: usize,
) -> Result<Complex64> {
    if ops.len() % 2 != 0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let n = ops.len();
    // All pair moments up front; each ordered pair is looked up once.
    let mut pm = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            pm[i * n + j] = table
                .pair_moment(ops[i], ops[j])
                .ok_or(Error::MissingPairMoment(ops[i], ops[j]))?;
        }
    }
    let pairings = enumerate_pairings_with_cap(n, cap)?;
    Ok(pairings
        .iter()
        .map(|p| {
            p.pairs()
                .iter()
                .fold(Complex64::new(1.0, 0.0), |acc, &(i, j)| acc * pm[i * n + j])
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Filters all permutations of `0..n` by the two ordering conditions.
    fn brute_force_pairings(n: usize) -> Vec<Vec<(usize, usize)>> {
        fn permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
            if k == items.len() {
                out.push(items.clone());
                return;
            }
            for i in k..items.len() {
                items.swap(k, i);
                permute(items, k + 1, out);
                items.swap(k, i);
            }
        }
        let mut perms = Vec::new();
        permute(&mut (0..n).collect(), 0, &mut perms);
        let mut kept: Vec<Vec<(usize, usize)>> = perms
            .into_iter()
            .filter(|p| {
                let each_pair_ordered = p.chunks(2).all(|c| c[0] < c[1]);
                let firsts_ordered = p.chunks(2).collect::<Vec<_>>().windows(2).all(|w| w[0][0] < w[1][0]);
                each_pair_ordered && firsts_ordered
            })
            .map(|p| p.chunks(2).map(|c| (c[0], c[1])).collect())
            .collect();
        kept.sort();
        kept
    }

    #[test]
    fn two_operators_have_a_single_pairing() {
        let p = enumerate_pairings(2).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].pairs(), &[(0, 1)]);
    }

    #[test]
    fn four_operators_match_the_permutation_filter() {
        let got: Vec<Vec<(usize, usize)>> = enumerate_pairings(4)
            .unwrap()
            .into_iter()
            .map(|p| p.pairs().to_vec())
            .collect();
        assert_eq!(got, vec![vec![(0, 1), (2, 3)], vec![(0, 2), (1, 3)], vec![(0, 3), (1, 2)]]);
        assert_eq!(got, brute_force_pairings(4));
    }

    #[test]
    fn six_and_eight_operators_match_the_permutation_filter() {
        for n in [6, 8] {
            let got: Vec<Vec<(usize, usize)>> = enumerate_pairings(n)
                .unwrap()
                .into_iter()
                .map(|p| p.pairs().to_vec())
                .collect();
            assert_eq!(got, brute_force_pairings(n), "n = {n}");
        }
        assert_eq!(enumerate_pairings(8).unwrap().len(), 105);
    }

    #[test]
    fn counts_are_double_factorials() {
        for n in 1..=5 {
            let p = enumerate_pairings(2 * n).unwrap();
            assert_eq!(p.len(), double_factorial(2 * n - 1));
            assert!(p.iter().all(Pairing::is_canonical));
            let unique: std::collections::HashSet<_> = p.iter().collect();
            assert_eq!(unique.len(), p.len());
        }
        assert_eq!(enumerate_pairings(12).unwrap().len(), 10395);
    }

    #[test]
    fn rejects_odd_and_oversized_strings() {
        assert!(matches!(enumerate_pairings(3), Err(Error::OddOperatorCount(3))));
        assert!(matches!(
            enumerate_pairings(14),
            Err(Error::PairingCapExceeded { len: 14, cap: 12 })
        ));
        assert_eq!(enumerate_pairings_with_cap(14, 14).unwrap().len(), 135135);
    }

    #[test]
    fn product_of_two_four_operator_averages_has_nine_terms() {
        let p = enumerate_factorized_pairings(&[4, 4]).unwrap();
        assert_eq!(p.len(), 9);
        assert!(p.iter().all(|q| q.pairs().iter().all(|&(i, j)| (i < 4) == (j < 4))));
        assert!(p.iter().all(Pairing::is_canonical));
    }

    #[test]
    fn vacuum_pairs() {
        let a0 = LadderOp::annihilate(0);
        assert_eq!(vacuum_pair_moment(a0, a0.dagger()), Complex64::new(1.0, 0.0));
        assert_eq!(vacuum_pair_moment(a0.dagger(), a0), Complex64::new(0.0, 0.0));
        assert_eq!(
            vacuum_pair_moment(a0, LadderOp::create(1)),
            Complex64::new(0.0, 0.0)
        );
    }

    #[test]
    fn empty_and_odd_strings() {
        assert_eq!(gaussian_moment(&[], &Vacuum).unwrap(), Complex64::new(1.0, 0.0));
        let odd = [LadderOp::annihilate(0), LadderOp::create(0), LadderOp::create(0)];
        assert_eq!(gaussian_moment(&odd, &Vacuum).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn vacuum_moment_of_a_a_adag_adag_is_two() {
        // ⟨a a a† a†⟩ = 2 in the vacuum.
        let a = LadderOp::annihilate(0);
        let ops = [a, a, a.dagger(), a.dagger()];
        assert!((gaussian_moment(&ops, &Vacuum).unwrap() - 2.0).norm() < 1e-15);
    }

    #[test]
    fn missing_entry_names_the_pair() {
        let mut t = PairTable::new();
        let a = LadderOp::annihilate(0);
        t.insert(a.dagger(), a, Complex64::new(1.0, 0.0));
        let err = gaussian_moment(&[a, a.dagger()], &t).unwrap_err();
        match err {
            Error::MissingPairMoment(x, y) => {
                assert_eq!((x, y), (a, a.dagger()));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    /// Thermal-like single-mode table: ⟨a†a⟩ = n, ⟨a a†⟩ = n + 1.
    fn thermal_table(modes: &[(usize, f64)]) -> PairTable {
        let mut t = PairTable::new();
        for &(m, n) in modes {
            for &(m2, _) in modes {
                let a = LadderOp::annihilate(m);
                let b = LadderOp::annihilate(m2);
                let same = m == m2;
                let z = Complex64::new(0.0, 0.0);
                t.insert(a.dagger(), b, if same { Complex64::new(n, 0.0) } else { z });
                t.insert(a, b.dagger(), if same { Complex64::new(n + 1.0, 0.0) } else { z });
                t.insert(a, b, z);
                t.insert(a.dagger(), b.dagger(), z);
            }
        }
        t
    }

    #[test]
    fn thermal_second_factorial_moment() {
        // ⟨a†a†a a⟩ = 2 n² for a thermal mode.
        let t = thermal_table(&[(0, 1.7)]);
        let a = LadderOp::annihilate(0);
        let v = gaussian_moment(&[a.dagger(), a.dagger(), a, a], &t).unwrap();
        assert!((v.re - 2.0 * 1.7 * 1.7).abs() < 1e-12);
        assert!(t.hermiticity_residual() < 1e-15);
    }

    #[test]
    fn multilinear_in_a_single_entry() {
        let a = LadderOp::annihilate(0);
        let ops = [a.dagger(), a, a.dagger(), a];
        let base = thermal_table(&[(0, 0.8)]);
        let m0 = gaussian_moment(&ops, &base).unwrap();
        // Terms: ⟨a†a⟩⟨a†a⟩ + ⟨a†a†⟩⟨a a⟩ + ⟨a†a⟩⟨a a†⟩ -> n² + 0 + n(n+1).
        assert!((m0.re - (0.64 + 0.8 * 1.8)).abs() < 1e-12);
        // Scale ⟨a a†⟩ (appears in one term, once) by λ.
        let lambda = 3.0;
        let mut scaled = base.clone();
        scaled.insert(a, a.dagger(), Complex64::new(1.8 * lambda, 0.0));
        let m1 = gaussian_moment(&ops, &scaled).unwrap();
        assert!((m1.re - (0.64 + lambda * 0.8 * 1.8)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn independent_groups_factorize(
            n0 in 0.0f64..3.0,
            n1 in 0.0f64..3.0,
            left in proptest::collection::vec((0usize..1, any::<bool>()), 0..3),
            right in proptest::collection::vec((1usize..2, any::<bool>()), 0..3),
        ) {
            let t = thermal_table(&[(0, n0), (1, n1)]);
            let to_ops = |v: &[(usize, bool)]| -> Vec<LadderOp> {
                v.iter().flat_map(|&(m, normal)| {
                    let a = LadderOp::annihilate(m);
                    if normal { [a.dagger(), a] } else { [a, a.dagger()] }
                }).collect()
            };
            let l = to_ops(&left);
            let r = to_ops(&right);
            let joint: Vec<LadderOp> = l.iter().chain(r.iter()).copied().collect();
            let whole = gaussian_moment(&joint, &t).unwrap();
            let prod = gaussian_moment(&l, &t).unwrap() * gaussian_moment(&r, &t).unwrap();
            prop_assert!((whole - prod).norm() <= 1e-9 * (1.0 + prod.norm()));
        }
    }
}

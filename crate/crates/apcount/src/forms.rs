//! Integral form systems and their multilinear structure.
//!
//! A system F = (F_1, ..., F_r) of homogeneous degree-k forms in n variables
//! is stored both as a sparse monomial list and as symmetric coefficient
//! tensors a^i indexed by k-tuples, normalized so that k!·a^i is integral.
//! The symmetric representation makes the multilinear differencing forms
//!
//!   Φ_j^i(h^1, ..., h^{k-1}) = k! Σ a^i_{j_1..j_{k-1}, j} h^1_{j_1} ··· h^{k-1}_{j_{k-1}}
//!
//! exact integer matrices, tied to the iterated difference identity
//!
//!   D_{h^{k-1}} ··· D_{h^1} F(x) = Σ_j x_j Φ_j(h^1..h^{k-1}) + (constant in x),
//!
//! which underlies Weyl differencing in the circle-method layer.
//!
//! Linear families L = (l_1, ..., l_m) are integer matrices with a pairwise
//! independence test via 2×2 minors.

use std::collections::BTreeMap;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{BigUint, Integer, One, ToPrimitive, Zero};

use crate::budget::{product_cost, Budget};
use crate::error::{Error, Result};

/// One term c·x_1^{e_1}···x_n^{e_n} of a form, in the sparse input format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomial {
    pub exponents: Vec<u32>,
    pub coefficient: BigRational,
}

impl Monomial {
    pub fn new(exponents: Vec<u32>, coefficient: BigRational) -> Self {
        Monomial {
            exponents,
            coefficient,
        }
    }

    /// Integer-coefficient convenience constructor.
    pub fn integral(exponents: Vec<u32>, coefficient: i64) -> Self {
        Monomial {
            exponents,
            coefficient: BigRational::from_integer(coefficient.into()),
        }
    }
}

/// Target vector v for the system F(x) = v; length must equal r.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetVector {
    components: Vec<i64>,
}

impl TargetVector {
    pub fn new(components: Vec<i64>, r: usize) -> Result<Self> {
        if components.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: components.len(),
            });
        }
        Ok(TargetVector { components })
    }

    pub fn components(&self) -> &[i64] {
        &self.components
    }
}

/// Family of integral linear forms given by the rows of an m×n matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearFamily {
    n: usize,
    rows: Vec<Vec<i64>>,
}

impl LinearFamily {
    /// `n` is the ambient variable count; rows may be empty (m = 0).
    pub fn new(n: usize, rows: Vec<Vec<i64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            if row.iter().all(|&c| c == 0) {
                return Err(Error::Structure(format!(
                    "linear form {} is identically zero",
                    i + 1
                )));
            }
        }
        Ok(LinearFamily { n, rows })
    }

    /// The empty family (m = 0); unit restrictions built on it are vacuous.
    pub fn empty(n: usize) -> Self {
        LinearFamily {
            n,
            rows: Vec::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[Vec<i64>] {
        &self.rows
    }

    /// Exact values (l_1(x), ..., l_m(x)).
    pub fn evaluate(&self, x: &[i64]) -> Result<Vec<i64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        self.rows
            .iter()
            .map(|row| {
                let mut acc: i128 = 0;
                for (c, &xi) in row.iter().zip(x) {
                    acc += *c as i128 * xi as i128;
                }
                i64::try_from(acc)
                    .map_err(|_| Error::Structure("linear form value overflows i64".into()))
            })
            .collect()
    }

    /// Values l_i(x) mod m for x given by residues.
    pub fn evaluate_mod(&self, x: &[u64], modulus: u64) -> Result<Vec<u64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let m = modulus as u128;
        Ok(self
            .rows
            .iter()
            .map(|row| {
                let mut acc: u128 = 0;
                for (c, &xi) in row.iter().zip(x) {
                    let c = (c.rem_euclid(modulus as i64)) as u128;
                    acc = (acc + c * xi as u128) % m;
                }
                acc as u64
            })
            .collect())
    }

    /// True iff every pair of rows has a nonzero 2×2 minor, i.e. no row is a
    /// rational multiple of another.
    pub fn pairwise_independent(&self) -> bool {
        for a in 0..self.rows.len() {
            for b in (a + 1)..self.rows.len() {
                let (u, v) = (&self.rows[a], &self.rows[b]);
                let mut independent = false;
                'outer: for i in 0..self.n {
                    for j in (i + 1)..self.n {
                        let minor = u[i] as i128 * v[j] as i128 - u[j] as i128 * v[i] as i128;
                        if minor != 0 {
                            independent = true;
                            break 'outer;
                        }
                    }
                }
                if !independent {
                    return false;
                }
            }
        }
        true
    }
}

/// A system of r integral forms of common degree k in n variables.
///
/// Construction normalizes the monomial input into symmetric tensors, checks
/// that k!·a is integral, and verifies integer-valuedness on the box
/// {0..k}^n (finite differences make that box decisive for total degree k)
/// whenever the box is small enough to enumerate; otherwise all monomial
/// coefficients must be integers, which is sufficient.
#[derive(Debug, Clone)]
pub struct FormSystem {
    n: usize,
    r: usize,
    k: u32,
    /// Canonical monomials per form: sorted exponent vector -> coefficient.
    monomials: Vec<Vec<(Vec<u32>, BigRational)>>,
    /// Symmetric tensor per form: sorted index k-tuple -> common entry value.
    tensors: Vec<BTreeMap<Vec<usize>, BigRational>>,
    /// lcm of all coefficient denominators; divides k!.
    denominator: BigUint,
    declared_rank: Option<usize>,
}

const VALUE_CHECK_ENUM_LIMIT: u128 = 1_000_000;

impl FormSystem {
    pub fn from_monomials(
        n: usize,
        k: u32,
        forms: &[Vec<Monomial>],
        declared_rank: Option<usize>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "variable count n must be positive".into(),
            ));
        }
        if k < 2 {
            return Err(Error::InvalidParameter(format!(
                "degree k must be at least 2, got {}",
                k
            )));
        }
        if forms.is_empty() {
            return Err(Error::InvalidParameter(
                "form system must contain at least one form".into(),
            ));
        }
        if let Some(rank) = declared_rank {
            if rank > n {
                return Err(Error::InvalidParameter(format!(
                    "declared rank {} exceeds variable count {}",
                    rank, n
                )));
            }
        }

        let k_factorial = factorial(k);
        let mut monomials = Vec::with_capacity(forms.len());
        let mut tensors = Vec::with_capacity(forms.len());
        let mut denominator = BigUint::one();

        for (i, form) in forms.iter().enumerate() {
            let mut canon: BTreeMap<Vec<u32>, BigRational> = BTreeMap::new();
            for mono in form {
                if mono.exponents.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: mono.exponents.len(),
                    });
                }
                let total: u32 = mono.exponents.iter().sum();
                if total != k {
                    return Err(Error::Structure(format!(
                        "form {} has a monomial of degree {}, expected {}",
                        i + 1,
                        total,
                        k
                    )));
                }
                let entry = canon
                    .entry(mono.exponents.clone())
                    .or_insert_with(BigRational::zero);
                *entry += &mono.coefficient;
            }
            canon.retain(|_, c| !c.is_zero());

            let mut tensor: BTreeMap<Vec<usize>, BigRational> = BTreeMap::new();
            for (exps, coeff) in &canon {
                // Sorted index tuple [j repeated e_j times]; the symmetric entry
                // shared by all its permutations is c·∏ e_j! / k!.
                let mut tuple = Vec::with_capacity(k as usize);
                let mut perm_factor = BigUint::one();
                for (j, &e) in exps.iter().enumerate() {
                    for _ in 0..e {
                        tuple.push(j);
                    }
                    perm_factor *= factorial(e);
                }
                let entry = coeff * BigRational::from_integer(perm_factor.into())
                    / BigRational::from_integer(k_factorial.clone().into());
                // k!·a must be integral.
                let scaled = &entry * BigRational::from_integer(k_factorial.clone().into());
                if !scaled.is_integer() {
                    return Err(Error::Structure(format!(
                        "form {}: {}·(tensor entry) is not integral for monomial with exponents {:?}",
                        i + 1,
                        k_factorial,
                        exps
                    )));
                }
                denominator = denominator.lcm(entry.denom().magnitude());
                tensor.insert(tuple, entry);
            }

            monomials.push(canon.into_iter().collect::<Vec<_>>());
            tensors.push(tensor);
        }

        let system = FormSystem {
            n,
            r: forms.len(),
            k,
            monomials,
            tensors,
            denominator,
            declared_rank,
        };
        system.check_integer_valued()?;
        Ok(system)
    }

    /// Convenience constructor for systems given by integer monomials.
    pub fn from_integral_monomials(
        n: usize,
        k: u32,
        forms: &[Vec<(Vec<u32>, i64)>],
        declared_rank: Option<usize>,
    ) -> Result<Self> {
        let forms: Vec<Vec<Monomial>> = forms
            .iter()
            .map(|f| {
                f.iter()
                    .map(|(e, c)| Monomial::integral(e.clone(), *c))
                    .collect()
            })
            .collect();
        Self::from_monomials(n, k, &forms, declared_rank)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn declared_rank(&self) -> Option<usize> {
        self.declared_rank
    }

    /// lcm of the monomial-coefficient denominators (divides k!).
    pub fn denominator(&self) -> &BigUint {
        &self.denominator
    }

    pub fn monomials(&self, form: usize) -> &[(Vec<u32>, BigRational)] {
        &self.monomials[form]
    }

    fn check_integer_valued(&self) -> Result<()> {
        let side = self.k as u128 + 1;
        let cost = product_cost((0..self.n).map(|_| side));
        if cost <= VALUE_CHECK_ENUM_LIMIT {
            let mut x = vec![0i64; self.n];
            loop {
                let values = self.evaluate_rational(&x)?;
                if let Some(bad) = values.iter().find(|value| !value.is_integer()) {
                    return Err(Error::Structure(format!(
                        "form system is not integer-valued: value {} at {:?}",
                        bad, x
                    )));
                }
                // odometer over {0..k}^n
                let mut carry = true;
                for slot in x.iter_mut() {
                    if *slot < self.k as i64 {
                        *slot += 1;
                        carry = false;
                        break;
                    }
                    *slot = 0;
                }
                if carry {
                    break;
                }
            }
            Ok(())
        } else if self.denominator.is_one() {
            Ok(())
        } else {
            Err(Error::Structure(
                "cannot verify integer-valuedness: box too large and coefficients non-integral"
                    .into(),
            ))
        }
    }

    fn evaluate_rational(&self, x: &[i64]) -> Result<Vec<BigRational>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let bigs: Vec<BigInt> = x.iter().map(|&v| BigInt::from(v)).collect();
        Ok(self
            .monomials
            .iter()
            .map(|form| {
                let mut acc = BigRational::zero();
                for (exps, coeff) in form {
                    let mut term = BigInt::one();
                    for (j, &e) in exps.iter().enumerate() {
                        for _ in 0..e {
                            term *= &bigs[j];
                        }
                    }
                    acc += coeff * BigRational::from_integer(term);
                }
                acc
            })
            .collect())
    }

    /// Exact values (F_1(x), ..., F_r(x)).
    pub fn evaluate(&self, x: &[i64]) -> Result<Vec<BigInt>> {
        self.evaluate_rational(x)?
            .into_iter()
            .map(|value| {
                if value.is_integer() {
                    Ok(value.to_integer())
                } else {
                    Err(Error::Structure(format!(
                        "non-integer form value {}",
                        value
                    )))
                }
            })
            .collect()
    }

    /// Values F_i(x) mod `modulus`.
    pub fn evaluate_mod(&self, x: &[i64], modulus: u64) -> Result<Vec<u64>> {
        let evaluator = ModularEvaluator::new(self, modulus)?;
        let m = modulus as i128;
        let residues: Vec<u64> = x
            .iter()
            .map(|&v| (v as i128).rem_euclid(m) as u64)
            .collect();
        Ok(evaluator.evaluate(&residues))
    }

    /// Matrix of partials ∂F_i/∂x_j at s over Z_p, together with its rank.
    pub fn jacobian_mod_p(&self, s: &[i64], p: u64) -> Result<(Vec<Vec<u64>>, usize)> {
        if s.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: s.len(),
            });
        }
        if !crate::arith::is_prime(p) {
            return Err(Error::NotPrime(p));
        }
        let bigs: Vec<BigInt> = s.iter().map(|&v| BigInt::from(v)).collect();
        let mut matrix = vec![vec![0u64; self.n]; self.r];
        for (i, form) in self.monomials.iter().enumerate() {
            for j in 0..self.n {
                let mut acc = BigRational::zero();
                for (exps, coeff) in form {
                    if exps[j] == 0 {
                        continue;
                    }
                    let mut term = BigInt::from(exps[j]);
                    for (idx, &e) in exps.iter().enumerate() {
                        let e = if idx == j { e - 1 } else { e };
                        for _ in 0..e {
                            term *= &bigs[idx];
                        }
                    }
                    acc += coeff * BigRational::from_integer(term);
                }
                matrix[i][j] = reduce_rational_mod_p(&acc, p)?;
            }
        }
        let rank = rank_mod_p(&matrix, p);
        Ok((matrix, rank))
    }

    /// The r×n integer matrix with entries Φ_j^i(h^1, ..., h^{k-1}).
    pub fn multilinear_phi(&self, hs: &[Vec<i64>]) -> Result<Vec<Vec<BigInt>>> {
        if hs.len() != (self.k - 1) as usize {
            return Err(Error::DimensionMismatch {
                expected: (self.k - 1) as usize,
                got: hs.len(),
            });
        }
        for h in hs {
            if h.len() != self.n {
                return Err(Error::DimensionMismatch {
                    expected: self.n,
                    got: h.len(),
                });
            }
        }
        let k_factorial = BigInt::from(factorial(self.k));
        let mut out = vec![vec![BigInt::zero(); self.n]; self.r];
        for (i, tensor) in self.tensors.iter().enumerate() {
            let mut acc = vec![BigRational::zero(); self.n];
            for (tuple, entry) in tensor {
                for perm in MultisetPermutations::new(tuple) {
                    // perm = (j_1, ..., j_k); the free index is j_k, the first
                    // k-1 indices contract with h^1, ..., h^{k-1}.
                    let mut weight = BigInt::one();
                    for (slot, &j) in perm[..perm.len() - 1].iter().enumerate() {
                        weight *= BigInt::from(hs[slot][j]);
                        if weight.is_zero() {
                            break;
                        }
                    }
                    if weight.is_zero() {
                        continue;
                    }
                    acc[perm[perm.len() - 1]] += entry * BigRational::from_integer(weight);
                }
            }
            for (j, value) in acc.into_iter().enumerate() {
                let scaled = value * BigRational::from_integer(k_factorial.clone());
                if !scaled.is_integer() {
                    return Err(Error::Structure(format!(
                        "multilinear form entry ({}, {}) is not integral",
                        i + 1,
                        j + 1
                    )));
                }
                out[i][j] = scaled.to_integer();
            }
        }
        Ok(out)
    }

    /// Checks the difference identity: the x-linear part of the iterated
    /// difference D_{h^{k-1}}···D_{h^1}F at x equals Σ_j x_j Φ_j(h).
    pub fn difference_identity_check(&self, hs: &[Vec<i64>], x: &[i64]) -> Result<bool> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let phi = self.multilinear_phi(hs)?;
        let delta_x = self.iterated_difference(hs, x)?;
        let delta_0 = self.iterated_difference(hs, &vec![0i64; self.n])?;
        for i in 0..self.r {
            let mut rhs = BigInt::zero();
            for j in 0..self.n {
                rhs += &phi[i][j] * BigInt::from(x[j]);
            }
            if &delta_x[i] - &delta_0[i] != rhs {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn iterated_difference(&self, hs: &[Vec<i64>], x: &[i64]) -> Result<Vec<BigInt>> {
        // D_{h^{k-1}}···D_{h^1}F(x) = Σ_{S ⊆ {1..k-1}} (-1)^{k-1-|S|} F(x + Σ_{i∈S} h^i)
        let levels = hs.len();
        let mut acc = vec![BigInt::zero(); self.r];
        for mask in 0u32..(1 << levels) {
            let mut point = x.to_vec();
            for (i, h) in hs.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    for (slot, &hi) in point.iter_mut().zip(h) {
                        *slot = slot.checked_add(hi).ok_or_else(|| {
                            Error::Structure("difference point overflows i64".into())
                        })?;
                    }
                }
            }
            let values = self.evaluate(&point)?;
            let sign_positive = (levels as u32 - mask.count_ones()).is_multiple_of(2);
            for (slot, value) in acc.iter_mut().zip(values) {
                if sign_positive {
                    *slot += value;
                } else {
                    *slot -= value;
                }
            }
        }
        Ok(acc)
    }

    /// Rank over Q of the symmetric matrix of a single quadratic form.
    pub fn rank_quadratic(&self) -> Result<usize> {
        if self.r != 1 || self.k != 2 {
            return Err(Error::Structure(format!(
                "rank computation requires a single quadratic form (r=1, k=2), got r={}, k={}",
                self.r, self.k
            )));
        }
        // The degree-2 tensor is the symmetric matrix A with F(x) = Ax·x.
        let mut a = vec![vec![BigRational::zero(); self.n]; self.n];
        for (tuple, entry) in &self.tensors[0] {
            let (i, j) = (tuple[0], tuple[1]);
            a[i][j] = entry.clone();
            a[j][i] = entry.clone();
        }
        Ok(rank_rational(&mut a))
    }

    /// Number of s in Z_p^n with F(s) ≡ v (mod p) and Jacobian rank < r.
    pub fn count_singular_points_mod_p(
        &self,
        v: &TargetVector,
        p: u64,
        budget: &Budget,
    ) -> Result<u64> {
        if v.components().len() != self.r {
            return Err(Error::DimensionMismatch {
                expected: self.r,
                got: v.components().len(),
            });
        }
        if !crate::arith::is_prime(p) {
            return Err(Error::NotPrime(p));
        }
        budget.admit(product_cost((0..self.n).map(|_| p as u128)))?;

        let evaluator = ModularEvaluator::new(self, p)?;
        let jacobian = JacobianModEvaluator::new(self, p)?;
        let target: Vec<u64> = v
            .components()
            .iter()
            .map(|&c| (c as i128).rem_euclid(p as i128) as u64)
            .collect();

        use rayon::prelude::*;
        let counts: Vec<u64> = (0..p)
            .into_par_iter()
            .map(|first| {
                let mut count = 0u64;
                let mut x = vec![0u64; self.n];
                x[0] = first;
                loop {
                    if evaluator.evaluate(&x) == target && jacobian.rank_at(&x) < self.r {
                        count += 1;
                    }
                    // odometer over the trailing n-1 coordinates
                    let mut carry = true;
                    for slot in x.iter_mut().skip(1) {
                        *slot += 1;
                        if *slot < p {
                            carry = false;
                            break;
                        }
                        *slot = 0;
                    }
                    if carry {
                        break;
                    }
                }
                count
            })
            .collect();
        Ok(counts.iter().sum())
    }
}

/// Precomputed reduction of a form system modulo a fixed modulus.
///
/// Coefficients are scaled by the common denominator `den`, reduced once
/// mod den·M, and each evaluation divides back out: the scaled sum is
/// den·F(x) mod den·M, and F(x) being an integer makes the division exact.
pub struct ModularEvaluator {
    n: usize,
    work_modulus: u64,
    modulus: u64,
    den: u64,
    // per form: (exponents, scaled coefficient mod den·M)
    terms: Vec<Vec<(Vec<u32>, u64)>>,
}

impl ModularEvaluator {
    pub fn new(system: &FormSystem, modulus: u64) -> Result<Self> {
        if modulus == 0 {
            return Err(Error::InvalidParameter("modulus must be positive".into()));
        }
        let den = system
            .denominator
            .to_u64()
            .ok_or_else(|| Error::Structure("coefficient denominator too large".into()))?;
        let work_modulus = den.checked_mul(modulus).ok_or_else(|| {
            Error::InvalidParameter("modulus too large for scaled reduction".into())
        })?;
        let den_big = BigInt::from(den);
        let work_big = BigInt::from(work_modulus);
        let terms = system
            .monomials
            .iter()
            .map(|form| {
                form.iter()
                    .map(|(exps, coeff)| {
                        let scaled =
                            (coeff * BigRational::from_integer(den_big.clone())).to_integer();
                        let reduced = scaled
                            .mod_floor(&work_big)
                            .to_u64()
                            .expect("reduced below modulus");
                        (exps.clone(), reduced)
                    })
                    .collect()
            })
            .collect();
        Ok(ModularEvaluator {
            n: system.n,
            work_modulus,
            modulus,
            den,
            terms,
        })
    }

    /// F_i(x) mod M for residue coordinates x (each < the working modulus).
    pub fn evaluate(&self, x: &[u64]) -> Vec<u64> {
        debug_assert_eq!(x.len(), self.n);
        let wm = self.work_modulus as u128;
        self.terms
            .iter()
            .map(|form| {
                let mut acc: u128 = 0;
                for (exps, coeff) in form {
                    let mut term = *coeff as u128;
                    for (j, &e) in exps.iter().enumerate() {
                        for _ in 0..e {
                            term = term * (x[j] as u128) % wm;
                        }
                        if term == 0 {
                            break;
                        }
                    }
                    acc = (acc + term) % wm;
                }
                // acc = den·F(x) mod den·M with F(x) integral, so den divides acc.
                debug_assert_eq!(acc % self.den as u128, 0);
                ((acc / self.den as u128) % self.modulus as u128) as u64
            })
            .collect()
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }
}

/// Precomputed integer evaluation in i128, for enumeration over boxes.
///
/// Coefficients are scaled by the common denominator so each term is an
/// integer; the accumulated value den·F(x) is divided back out exactly.
/// All arithmetic is checked: desk-scale boxes never overflow, and a
/// pathological input fails loudly instead of wrapping.
pub struct IntegerEvaluator {
    n: usize,
    den: i128,
    terms: Vec<Vec<(Vec<u32>, i128)>>,
}

impl IntegerEvaluator {
    pub fn new(system: &FormSystem) -> Result<Self> {
        let den: i128 = system
            .denominator
            .to_u64()
            .ok_or_else(|| Error::Structure("coefficient denominator too large".into()))?
            as i128;
        let den_big = BigInt::from(den);
        let terms = system
            .monomials
            .iter()
            .map(|form| {
                form.iter()
                    .map(|(exps, coeff)| {
                        let scaled =
                            (coeff * BigRational::from_integer(den_big.clone())).to_integer();
                        let c = scaled.to_i128().ok_or_else(|| {
                            Error::Structure("scaled coefficient exceeds i128".into())
                        })?;
                        Ok((exps.clone(), c))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IntegerEvaluator {
            n: system.n,
            den,
            terms,
        })
    }

    /// (F_1(x), ..., F_r(x)) as i128; errors on intermediate overflow.
    pub fn evaluate(&self, x: &[i64]) -> Result<Vec<i128>> {
        debug_assert_eq!(x.len(), self.n);
        self.terms
            .iter()
            .map(|form| {
                let mut acc: i128 = 0;
                for (exps, coeff) in form {
                    let mut term = *coeff;
                    for (j, &e) in exps.iter().enumerate() {
                        for _ in 0..e {
                            term = term.checked_mul(x[j] as i128).ok_or_else(|| {
                                Error::Structure("form value overflows i128".into())
                            })?;
                        }
                        if term == 0 {
                            break;
                        }
                    }
                    acc = acc
                        .checked_add(term)
                        .ok_or_else(|| Error::Structure("form value overflows i128".into()))?;
                }
                // acc = den·F(x) with F(x) integral
                debug_assert_eq!(acc % self.den, 0);
                Ok(acc / self.den)
            })
            .collect()
    }
}

/// Precomputed Jacobian evaluation mod a prime, for enumeration loops.
///
/// Fast path requires p coprime to the coefficient denominator; the partials
/// of an integer-valued form are then p-integral and reduce via den^{-1}.
pub struct JacobianModEvaluator {
    n: usize,
    r: usize,
    p: u64,
    // per form, per variable: (exponents, coefficient mod p), pre-multiplied by den^{-1}
    partials: Vec<Vec<Vec<(Vec<u32>, u64)>>>,
}

impl JacobianModEvaluator {
    pub fn new(system: &FormSystem, p: u64) -> Result<Self> {
        if !crate::arith::is_prime(p) {
            return Err(Error::NotPrime(p));
        }
        let den = system
            .denominator
            .to_u64()
            .ok_or_else(|| Error::Structure("coefficient denominator too large".into()))?;
        if den % p == 0 {
            // Rare: fall back to exact per-point reduction through jacobian_mod_p.
            return Err(Error::Structure(format!(
                "jacobian fast path unavailable: prime {} divides coefficient denominator {}",
                p, den
            )));
        }
        let den_inv = mod_inverse(den % p, p)
            .ok_or_else(|| Error::Structure("denominator not invertible".into()))?;
        let p_big = BigInt::from(p);
        let partials = system
            .monomials
            .iter()
            .map(|form| {
                (0..system.n)
                    .map(|j| {
                        form.iter()
                            .filter(|(exps, _)| exps[j] > 0)
                            .map(|(exps, coeff)| {
                                let scaled = (coeff
                                    * BigRational::from_integer(BigInt::from(
                                        system.denominator.clone(),
                                    ))
                                    * BigRational::from_integer(BigInt::from(exps[j])))
                                .to_integer();
                                let mut c = scaled.mod_floor(&p_big).to_u64().expect("below p");
                                c = (c as u128 * den_inv as u128 % p as u128) as u64;
                                let mut e = exps.clone();
                                e[j] -= 1;
                                (e, c)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(JacobianModEvaluator {
            n: system.n,
            r: system.r,
            p,
            partials,
        })
    }

    /// Rank over Z_p of the Jacobian at residue point x.
    pub fn rank_at(&self, x: &[u64]) -> usize {
        debug_assert_eq!(x.len(), self.n);
        let p = self.p as u128;
        let matrix: Vec<Vec<u64>> = self
            .partials
            .iter()
            .map(|row| {
                row.iter()
                    .map(|terms| {
                        let mut acc: u128 = 0;
                        for (exps, coeff) in terms {
                            let mut term = *coeff as u128;
                            for (j, &e) in exps.iter().enumerate() {
                                for _ in 0..e {
                                    term = term * (x[j] as u128) % p;
                                }
                                if term == 0 {
                                    break;
                                }
                            }
                            acc = (acc + term) % p;
                        }
                        acc as u64
                    })
                    .collect()
            })
            .collect();
        debug_assert_eq!(matrix.len(), self.r);
        rank_mod_p(&matrix, self.p)
    }
}

/// Gaussian elimination rank of a matrix over Z_p.
pub fn rank_mod_p(matrix: &[Vec<u64>], p: u64) -> usize {
    let mut m: Vec<Vec<u64>> = matrix
        .iter()
        .map(|row| row.iter().map(|&v| v % p).collect())
        .collect();
    let rows = m.len();
    let cols = if rows == 0 { 0 } else { m[0].len() };
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows).find(|&i| m[i][col] != 0);
        let Some(pivot) = pivot else { continue };
        m.swap(rank, pivot);
        let inv = mod_inverse(m[rank][col], p).expect("nonzero residue invertible mod prime");
        for j in col..cols {
            m[rank][j] = (m[rank][j] as u128 * inv as u128 % p as u128) as u64;
        }
        for i in 0..rows {
            if i != rank && m[i][col] != 0 {
                let factor = m[i][col];
                for j in col..cols {
                    let sub = factor as u128 * m[rank][j] as u128 % p as u128;
                    m[i][j] = ((m[i][j] as u128 + p as u128 - sub) % p as u128) as u64;
                }
            }
        }
        rank += 1;
    }
    rank
}

fn rank_rational(m: &mut [Vec<BigRational>]) -> usize {
    let rows = m.len();
    let cols = if rows == 0 { 0 } else { m[0].len() };
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows).find(|&i| !m[i][col].is_zero());
        let Some(pivot) = pivot else { continue };
        m.swap(rank, pivot);
        let inv = m[rank][col].clone();
        for j in col..cols {
            let value = &m[rank][j] / &inv;
            m[rank][j] = value;
        }
        for i in 0..rows {
            if i != rank && !m[i][col].is_zero() {
                let factor = m[i][col].clone();
                for j in col..cols {
                    let sub = &factor * &m[rank][j];
                    m[i][j] -= sub;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Modular inverse by extended Euclid; None when gcd(a, m) > 1.
pub fn mod_inverse(a: u64, m: u64) -> Option<u64> {
    let (mut old_r, mut r) = (a as i128, m as i128);
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
    }
    if old_r != 1 {
        return None;
    }
    Some(old_s.rem_euclid(m as i128) as u64)
}

fn reduce_rational_mod_p(value: &BigRational, p: u64) -> Result<u64> {
    let p_big = BigInt::from(p);
    let den = value.denom();
    let den_red = den.mod_floor(&p_big).to_u64().expect("below p");
    if den_red == 0 {
        return Err(Error::Structure(format!(
            "value {} is not p-integral at p={}",
            value, p
        )));
    }
    let inv = mod_inverse(den_red, p)
        .ok_or_else(|| Error::Structure("denominator not invertible".into()))?;
    let num = value.numer().mod_floor(&p_big).to_u64().expect("below p");
    Ok((num as u128 * inv as u128 % p as u128) as u64)
}

fn factorial(k: u32) -> BigUint {
    (1..=k as u64)
        .map(BigUint::from)
        .fold(BigUint::one(), |acc, v| acc * v)
}

/// Iterator over the distinct permutations of a sorted multiset.
struct MultisetPermutations {
    current: Vec<usize>,
    done: bool,
}

impl MultisetPermutations {
    fn new(sorted: &[usize]) -> Self {
        MultisetPermutations {
            current: sorted.to_vec(),
            done: sorted.is_empty(),
        }
    }
}

impl Iterator for MultisetPermutations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        // Classic next-permutation step; wraps to None after the last one.
        let v = &mut self.current;
        let mut i = v.len() as isize - 2;
        while i >= 0 && v[i as usize] >= v[i as usize + 1] {
            i -= 1;
        }
        if i < 0 {
            self.done = true;
        } else {
            let i = i as usize;
            let mut j = v.len() - 1;
            while v[j] <= v[i] {
                j -= 1;
            }
            v.swap(i, j);
            v[i + 1..].reverse();
        }
        Some(out)
    }
}

//! Local solution densities at a prime and the Euler factors built from them.
//!
//! The central quantity is the level-l density
//! σ_p^l(D,s,v) = p^{−l(n−r)} · |{x ∈ Z_{p^l}^n : F(Dx+s) ≡ v (mod p^l)}|,
//! together with its stabilized limit, the unit-restricted variant
//! σ*_p(v) = (p/(p−1))^m · p^{−l(n−r)} · |{x : F(x) ≡ v, (l_i(x),p)=1 ∀i}|,
//! and the Euler factor
//! γ_p(v) = p^{−n}/σ_p(v) · Σ_{s ∈ Z_p^n} 1_{p | l_1(s)···l_m(s)} · σ_p(p,s,v).
//!
//! Everything here is an exact rational; no floating point enters. Counts
//! come from either brute enumeration of Z_{p^l}^n (parallel over the
//! leading residue coordinate, integer merge) or, when every monomial of
//! every form touches at most one variable, a per-variable convolution
//! whose cost is O(n · p^{l(r+1)}) instead of p^{ln}.
//!
//! Two exact structural identities get first-class checks: the dilation
//! reduction σ_p^l(DW,t,v) = σ_p^l(1,0,v) / σ_p^l(p,s,v) / σ_p^l(p,b,v)
//! according to the p-part of the squarefree modulus DW, and the
//! aggregation identity expressing σ*_p at level l as a normalized sum of
//! σ_p^l(p,b,v) over unit-admissible residues b mod p.

use num::integer::gcd;
use num::{BigInt, BigRational, One, ToPrimitive, Zero};
use rayon::prelude::*;

use crate::arith::{is_prime, Factorization};
use crate::budget::Budget;
use crate::error::{Error, Result};
use crate::forms::{FormSystem, LinearFamily, ModularEvaluator, TargetVector};

/// Dense convolution tables are refused above this many entries.
const DENSE_TABLE_LIMIT: usize = 1 << 22;

/// An exact local density value at prime `p`, truncated at `level`.
/// `stabilized` is `Some(true)` when two consecutive levels agreed,
/// `Some(false)` when the level cap was hit first, and `None` when a single
/// fixed level was requested and no stabilization evidence exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalDensity {
    pub value: BigRational,
    pub p: u64,
    pub level: u32,
    pub stabilized: Option<bool>,
}

/// An exact Euler factor value at prime `p`; `level` is the truncation used
/// for the inner densities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EulerFactor {
    pub value: BigRational,
    pub p: u64,
    pub level: u32,
}

/// How the inner densities of an Euler factor are evaluated: `Hybrid` takes
/// the rank shortcut at nonsingular points and counts only singular fibers;
/// `Brute` forces full enumeration everywhere and serves as the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerEvaluation {
    Hybrid,
    Brute,
}

/// Outcome of the dilation reduction check. Exactly one field is `Some`,
/// matching which of the three cases (p coprime to DW, p | D, p | W)
/// applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DilationReductionOutcome {
    pub coprime_case: Option<bool>,
    pub d_case: Option<bool>,
    pub w_case: Option<bool>,
}

fn checked_modulus(p: u64, l: u32) -> Result<u64> {
    p.checked_pow(l)
        .ok_or_else(|| Error::InvalidParameter(format!("p^l = {}^{} overflows u64", p, l)))
}

/// Budget check for a base^exp-point enumeration, refusing on overflow too.
fn admit_power(budget: &Budget, base: u64, exp: u32) -> Result<()> {
    let estimated = (base as u128)
        .checked_pow(exp)
        .ok_or(Error::BudgetExceeded {
            estimated: u128::MAX,
            ceiling: budget.ceiling(),
        })?;
    budget.admit(estimated)
}

fn reduce_point(point: &[i64], m: u64) -> Vec<u64> {
    point
        .iter()
        .map(|&x| (x as i128).rem_euclid(m as i128) as u64)
        .collect()
}

fn encode_point(point: &[u64], m: u64) -> usize {
    let mut idx = 0usize;
    for &digit in point.iter().rev() {
        idx = idx * m as usize + digit as usize;
    }
    idx
}

fn mod_pow(base: u64, exp: u32, m: u64) -> u64 {
    let mut result = 1u128;
    let mut base = base as u128 % m as u128;
    let mut exp = exp;
    while exp > 0 {
        if exp & 1 == 1 {
            result = result * base % m as u128;
        }
        base = base * base % m as u128;
        exp >>= 1;
    }
    result as u64
}

/// Integer-coefficient view of a system in which every monomial touches at
/// most one variable: form i is Σ_j coeffs[i][j]·x_j^k.
struct SeparableSystem {
    k: u32,
    /// coeffs[form][variable]
    coeffs: Vec<Vec<i64>>,
}

fn separable_view(system: &FormSystem) -> Option<SeparableSystem> {
    if !system.denominator().is_one() {
        return None;
    }
    let mut coeffs = vec![vec![0i64; system.n()]; system.r()];
    for i in 0..system.r() {
        for (exps, coeff) in system.monomials(i) {
            let mut support = exps.iter().enumerate().filter(|(_, &e)| e > 0);
            let (j, _) = support.next()?;
            if support.next().is_some() {
                return None;
            }
            coeffs[i][j] = coeff.to_integer().to_i64()?;
        }
    }
    Some(SeparableSystem {
        k: system.k(),
        coeffs,
    })
}

/// Unit restriction in per-variable form: rows of the family must each
/// touch a single variable. Returns, per variable, (some row forces a unit,
/// some row is identically ≡ 0 mod p).
fn singleton_rows(family: &LinearFamily, p: u64) -> Option<(Vec<bool>, bool)> {
    let mut must_unit = vec![false; family.n()];
    for row in family.rows() {
        let mut support = row.iter().enumerate().filter(|(_, &c)| c != 0);
        let (j, &c) = support.next()?;
        if support.next().is_some() {
            return None;
        }
        if (c as i128).rem_euclid(p as i128) == 0 {
            // l_i(x) ≡ 0 mod p for every x: nothing is admissible.
            return Some((must_unit, true));
        }
        must_unit[j] = true;
    }
    Some((must_unit, false))
}

/// |{x ∈ Z_m^n : F(dx+s) ≡ v (mod m), unit conditions}| by per-variable
/// convolution; `None` when the system or the unit family is not separable
/// or the value-space table would be too large.
fn count_separable(
    system: &FormSystem,
    v_res: &[u64],
    m: u64,
    d: u64,
    s: &[i64],
    units: Option<(&LinearFamily, u64)>,
    budget: &Budget,
) -> Result<Option<u128>> {
    let sep = match separable_view(system) {
        Some(sep) => sep,
        None => return Ok(None),
    };
    let unit_info = match units {
        Some((family, p)) => match singleton_rows(family, p) {
            Some((must_unit, impossible)) => {
                if impossible {
                    return Ok(Some(0));
                }
                Some((must_unit, p))
            }
            None => return Ok(None),
        },
        None => None,
    };
    let n = system.n();
    let r = system.r();
    let mut size = 1usize;
    for _ in 0..r {
        size = match size.checked_mul(m as usize) {
            Some(next) if next <= DENSE_TABLE_LIMIT => next,
            _ => return Ok(None),
        };
    }
    budget.admit(n as u128 * size as u128 * m as u128)?;

    let s_res = reduce_point(s, m);
    let d_res = d % m;
    let overflow = || Error::Structure("residue count exceeds u128".into());

    let mut acc = vec![0u128; size];
    acc[0] = 1;
    let mut digits_buf = vec![0u64; r];
    for j in 0..n {
        // Value distribution of variable j over its admissible residues.
        let mut var_dense = vec![0u64; size];
        for x in 0..m {
            if let Some((must_unit, p)) = &unit_info {
                if must_unit[j] && x % *p == 0 {
                    continue;
                }
            }
            let y = (d_res as u128 * x as u128 + s_res[j] as u128) % m as u128;
            let power = mod_pow(y as u64, sep.k, m);
            for i in 0..r {
                let c = (sep.coeffs[i][j] as i128).rem_euclid(m as i128) as u64;
                digits_buf[i] = (c as u128 * power as u128 % m as u128) as u64;
            }
            var_dense[encode_point(&digits_buf, m)] += 1;
        }
        let entries: Vec<(Vec<u64>, u64)> = var_dense
            .iter()
            .enumerate()
            .filter(|(_, &count)| count > 0)
            .map(|(idx, &count)| {
                let mut digits = vec![0u64; r];
                let mut rest = idx;
                for digit in digits.iter_mut() {
                    *digit = (rest % m as usize) as u64;
                    rest /= m as usize;
                }
                (digits, count)
            })
            .collect();

        let mut next = vec![0u128; size];
        let mut u_digits = vec![0u64; r];
        for (u, &count_u) in acc.iter().enumerate() {
            if count_u == 0 {
                continue;
            }
            let mut rest = u;
            for digit in u_digits.iter_mut() {
                *digit = (rest % m as usize) as u64;
                rest /= m as usize;
            }
            for (t_digits, count_t) in &entries {
                for i in 0..r {
                    digits_buf[i] = (u_digits[i] + t_digits[i]) % m;
                }
                let w = encode_point(&digits_buf, m);
                let term = count_u.checked_mul(*count_t as u128).ok_or_else(overflow)?;
                next[w] = next[w].checked_add(term).ok_or_else(overflow)?;
            }
        }
        acc = next;
    }
    Ok(Some(acc[encode_point(v_res, m)]))
}

/// Same count by full enumeration of Z_m^n, parallel over the leading
/// coordinate.
fn count_brute(
    system: &FormSystem,
    v_res: &[u64],
    m: u64,
    d: u64,
    s: &[i64],
    units: Option<(&LinearFamily, u64)>,
    budget: &Budget,
) -> Result<u128> {
    let n = system.n();
    admit_power(budget, m, n as u32)?;
    let evaluator = ModularEvaluator::new(system, m)?;
    let s_res = reduce_point(s, m);
    let d_res = d % m;

    let partials: Result<Vec<u128>> = (0..m)
        .into_par_iter()
        .map(|x0| {
            let mut x = vec![0u64; n];
            x[0] = x0;
            let mut y = vec![0u64; n];
            let mut xp = vec![0u64; n];
            let mut count = 0u128;
            'points: loop {
                let admissible = match units {
                    Some((family, p)) => {
                        for j in 0..n {
                            xp[j] = x[j] % p;
                        }
                        family.evaluate_mod(&xp, p)?.iter().all(|&value| value != 0)
                    }
                    None => true,
                };
                if admissible {
                    for j in 0..n {
                        y[j] =
                            ((d_res as u128 * x[j] as u128 + s_res[j] as u128) % m as u128) as u64;
                    }
                    if evaluator.evaluate(&y) == v_res {
                        count += 1;
                    }
                }
                let mut j = n - 1;
                loop {
                    if j == 0 {
                        break 'points;
                    }
                    x[j] += 1;
                    if x[j] < m {
                        break;
                    }
                    x[j] = 0;
                    j -= 1;
                }
            }
            Ok(count)
        })
        .collect();
    Ok(partials?.iter().sum())
}

/// Raw solution count behind every density here; picks the convolution
/// path when it applies, else enumerates.
#[allow(clippy::too_many_arguments)]
fn residue_count(
    system: &FormSystem,
    v: &TargetVector,
    m: u64,
    d: u64,
    s: &[i64],
    units: Option<(&LinearFamily, u64)>,
    force_brute: bool,
    budget: &Budget,
) -> Result<u128> {
    if s.len() != system.n() {
        return Err(Error::DimensionMismatch {
            expected: system.n(),
            got: s.len(),
        });
    }
    if v.components().len() != system.r() {
        return Err(Error::DimensionMismatch {
            expected: system.r(),
            got: v.components().len(),
        });
    }
    let v_res = reduce_point(v.components(), m);
    if !force_brute {
        if let Some(count) = count_separable(system, &v_res, m, d, s, units, budget)? {
            return Ok(count);
        }
    }
    count_brute(system, &v_res, m, d, s, units, budget)
}

/// p^{−l(n−r)} · count as an exact rational.
fn normalize(count: u128, p: u64, l: u32, n: usize, r: usize) -> BigRational {
    let count = BigInt::from(count);
    let exponent = l as i64 * (n as i64 - r as i64);
    let scale = BigInt::from(p).pow(exponent.unsigned_abs() as u32);
    if exponent >= 0 {
        BigRational::new(count, scale)
    } else {
        BigRational::from_integer(count * scale)
    }
}

fn validate_prime_level(p: u64, l: u32) -> Result<()> {
    if !is_prime(p) {
        return Err(Error::NotPrime(p));
    }
    if l == 0 {
        return Err(Error::InvalidParameter(
            "truncation level must be at least 1".into(),
        ));
    }
    Ok(())
}

/// σ_p^l(D,s,v) = p^{−l(n−r)} · |{x ∈ Z_{p^l}^n : F(Dx+s) ≡ v (mod p^l)}|.
pub fn sigma_p_l(
    system: &FormSystem,
    v: &TargetVector,
    p: u64,
    l: u32,
    d: u64,
    s: &[i64],
    budget: &Budget,
) -> Result<LocalDensity> {
    validate_prime_level(p, l)?;
    if d == 0 {
        return Err(Error::InvalidParameter("dilation must be positive".into()));
    }
    let m = checked_modulus(p, l)?;
    let count = residue_count(system, v, m, d, s, None, false, budget)?;
    Ok(LocalDensity {
        value: normalize(count, p, l, system.n(), system.r()),
        p,
        level: l,
        stabilized: None,
    })
}

/// Computes σ_p^l(D,s,v) for l = 1, 2, … until two consecutive levels
/// agree or `l_max` is reached; the flag records which happened.
pub fn sigma_p_stabilized(
    system: &FormSystem,
    v: &TargetVector,
    p: u64,
    d: u64,
    s: &[i64],
    l_max: u32,
    budget: &Budget,
) -> Result<LocalDensity> {
    validate_prime_level(p, 1)?;
    if l_max == 0 {
        return Err(Error::InvalidParameter(
            "level cap must be at least 1".into(),
        ));
    }
    let mut previous = sigma_p_l(system, v, p, 1, d, s, budget)?;
    for l in 2..=l_max {
        let current = sigma_p_l(system, v, p, l, d, s, budget)?;
        if current.value == previous.value {
            return Ok(LocalDensity {
                stabilized: Some(true),
                ..current
            });
        }
        previous = current;
    }
    Ok(LocalDensity {
        stabilized: Some(false),
        ..previous
    })
}

/// Unit-restricted density: (p/(p−1))^m · p^{−l(n−r)} ·
/// |{x ∈ Z_{p^l}^n : F(x) ≡ v (mod p^l), (l_i(x), p) = 1 for all i}|.
pub fn sigma_star_p(
    system: &FormSystem,
    family: &LinearFamily,
    v: &TargetVector,
    p: u64,
    l: u32,
    budget: &Budget,
) -> Result<LocalDensity> {
    validate_prime_level(p, l)?;
    if family.n() != system.n() {
        return Err(Error::DimensionMismatch {
            expected: system.n(),
            got: family.n(),
        });
    }
    let m = checked_modulus(p, l)?;
    let zeros = vec![0i64; system.n()];
    let count = residue_count(system, v, m, 1, &zeros, Some((family, p)), false, budget)?;
    let unit_weight = BigRational::new(
        BigInt::from(p).pow(family.m() as u32),
        BigInt::from(p - 1).pow(family.m() as u32),
    );
    Ok(LocalDensity {
        value: unit_weight * normalize(count, p, l, system.n(), system.r()),
        p,
        level: l,
        stabilized: None,
    })
}

/// Fiber density over s: p^r immediately when the Jacobian at s has full
/// rank r (the nonsingular stabilization), otherwise the stabilization loop
/// on σ_p^l(p,s,v). Requires F(s) ≡ v (mod p).
pub fn hybrid_sigma(
    system: &FormSystem,
    v: &TargetVector,
    p: u64,
    s: &[i64],
    l_max: u32,
    budget: &Budget,
) -> Result<LocalDensity> {
    validate_prime_level(p, 1)?;
    let fs = system.evaluate_mod(s, p)?;
    let v_res = reduce_point(v.components(), p);
    if fs != v_res {
        return Err(Error::InvalidParameter(
            "hybrid density requires F(s) ≡ v (mod p)".into(),
        ));
    }
    let (_, rank) = system.jacobian_mod_p(s, p)?;
    if rank == system.r() {
        return Ok(LocalDensity {
            value: BigRational::from_integer(BigInt::from(p).pow(system.r() as u32)),
            p,
            level: l_max,
            stabilized: Some(true),
        });
    }
    sigma_p_stabilized(system, v, p, p, s, l_max, budget)
}

/// γ_p(v) = p^{−n}/σ_p(v) · Σ_{s ∈ Z_p^n, F(s)≡v (p)} 1_{p | l_1(s)···l_m(s)}
/// · σ_p(p,s,v), with inner densities truncated at `level` (nonsingular
/// fibers contribute p^r exactly). Errors when σ_p(v) vanishes at `level`.
pub fn gamma_p(
    system: &FormSystem,
    family: &LinearFamily,
    v: &TargetVector,
    p: u64,
    level: u32,
    mode: InnerEvaluation,
    budget: &Budget,
) -> Result<EulerFactor> {
    validate_prime_level(p, level)?;
    let n = system.n();
    let r = system.r();
    if family.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: family.n(),
        });
    }
    let zeros = vec![0i64; n];
    let normalizer = sigma_p_l(system, v, p, level, 1, &zeros, budget)?;
    if normalizer.value.is_zero() {
        return Err(Error::Structure(format!(
            "local density vanishes at p = {}; Euler factor undefined",
            p
        )));
    }

    // Outer scan of Z_p^n for residues on the fiber with p | l_1···l_m.
    admit_power(budget, p, n as u32)?;
    let evaluator = ModularEvaluator::new(system, p)?;
    let v_res = reduce_point(v.components(), p);
    let mut candidates: Vec<Vec<i64>> = Vec::new();
    let mut s = vec![0u64; n];
    'points: loop {
        if evaluator.evaluate(&s) == v_res && family.evaluate_mod(&s, p)?.contains(&0) {
            candidates.push(s.iter().map(|&c| c as i64).collect());
        }
        let mut j = 0;
        loop {
            if j == n {
                break 'points;
            }
            s[j] += 1;
            if s[j] < p {
                break;
            }
            s[j] = 0;
            j += 1;
        }
    }

    let m_level = checked_modulus(p, level)?;
    let fiber_sum = candidates
        .par_iter()
        .map(|s| -> Result<BigRational> {
            let shortcut = match mode {
                InnerEvaluation::Hybrid => {
                    let (_, rank) = system.jacobian_mod_p(s, p)?;
                    rank == r
                }
                InnerEvaluation::Brute => false,
            };
            if shortcut {
                return Ok(BigRational::from_integer(BigInt::from(p).pow(r as u32)));
            }
            let force_brute = matches!(mode, InnerEvaluation::Brute);
            let count = residue_count(system, v, m_level, p, s, None, force_brute, budget)?;
            Ok(normalize(count, p, level, n, r))
        })
        .try_reduce(BigRational::zero, |a, b| Ok(a + b))?;

    let scale = BigRational::from_integer(BigInt::from(p).pow(n as u32)) * normalizer.value;
    Ok(EulerFactor {
        value: fiber_sum / scale,
        p,
        level,
    })
}

/// γ_D(v) for squarefree D as the product of γ_p(v) over p | D, inner
/// densities at `level`, hybrid evaluation.
pub fn gamma_d(
    system: &FormSystem,
    family: &LinearFamily,
    v: &TargetVector,
    d: u64,
    level: u32,
    budget: &Budget,
) -> Result<BigRational> {
    let factorization = Factorization::of(d)?;
    if !factorization.is_squarefree() {
        return Err(Error::NotSquarefree(d));
    }
    let mut product = BigRational::one();
    for p in factorization.distinct_primes() {
        product *= gamma_p(system, family, v, p, level, InnerEvaluation::Hybrid, budget)?.value;
    }
    Ok(product)
}

/// γ_D(v) evaluated directly as D^{−n}/∏σ_p(v) · Σ_{s ∈ Z_D^n}
/// 1_{D | l_1(s)···l_m(s)} · ∏_{p|D} σ_p^level(p,s,v): the independent
/// cross-check for the product formula.
pub fn gamma_d_direct(
    system: &FormSystem,
    family: &LinearFamily,
    v: &TargetVector,
    d: u64,
    level: u32,
    budget: &Budget,
) -> Result<BigRational> {
    let factorization = Factorization::of(d)?;
    if !factorization.is_squarefree() {
        return Err(Error::NotSquarefree(d));
    }
    let n = system.n();
    if family.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: family.n(),
        });
    }
    let primes: Vec<u64> = factorization.distinct_primes().collect();
    let zeros = vec![0i64; n];

    // Per-prime normalizers and fiber-density tables over Z_p^n.
    let mut normalizers = Vec::with_capacity(primes.len());
    let mut tables: Vec<Vec<BigRational>> = Vec::with_capacity(primes.len());
    for &p in &primes {
        let normalizer = sigma_p_l(system, v, p, level, 1, &zeros, budget)?;
        if normalizer.value.is_zero() {
            return Err(Error::Structure(format!(
                "local density vanishes at p = {}; Euler factor undefined",
                p
            )));
        }
        normalizers.push(normalizer.value);
        let size = (p as usize).pow(n as u32);
        budget.admit(size as u128)?;
        let mut table = Vec::with_capacity(size);
        let mut s = vec![0u64; n];
        'table: loop {
            let s_signed: Vec<i64> = s.iter().map(|&c| c as i64).collect();
            table.push(sigma_p_l(system, v, p, level, p, &s_signed, budget)?.value);
            let mut j = 0;
            loop {
                if j == n {
                    break 'table;
                }
                s[j] += 1;
                if s[j] < p {
                    break;
                }
                s[j] = 0;
                j += 1;
            }
        }
        tables.push(table);
    }

    admit_power(budget, d, n as u32)?;
    let mut sum = BigRational::zero();
    let mut s = vec![0u64; n];
    'outer: loop {
        let mut term = BigRational::one();
        let mut admissible = true;
        for (i, &p) in primes.iter().enumerate() {
            let sp: Vec<u64> = s.iter().map(|&c| c % p).collect();
            if family.evaluate_mod(&sp, p)?.iter().all(|&t| t != 0) {
                admissible = false;
                break;
            }
            term *= tables[i][encode_point(&sp, p)].clone();
        }
        if admissible {
            sum += term;
        }
        let mut j = 0;
        loop {
            if j == n {
                break 'outer;
            }
            s[j] += 1;
            if s[j] < d {
                break;
            }
            s[j] = 0;
            j += 1;
        }
    }

    let mut scale = BigRational::from_integer(BigInt::from(d).pow(n as u32));
    for normalizer in normalizers {
        scale *= normalizer;
    }
    Ok(sum / scale)
}

/// Verifies, at truncation `level`, that σ_p^l(DW,t,v) reduces to the
/// p-local data: σ_p^l(1,0,v) when p ∤ DW, σ_p^l(p,s,v) when p | D, and
/// σ_p^l(p,b,v) when p | W. Requires D, W squarefree and coprime with
/// t ≡ s (mod D) and t ≡ b (mod W).
#[allow(clippy::too_many_arguments)]
pub fn dilation_reduction_check(
    system: &FormSystem,
    v: &TargetVector,
    p: u64,
    d: u64,
    w: u64,
    t: &[i64],
    s: &[i64],
    b: &[i64],
    level: u32,
    budget: &Budget,
) -> Result<DilationReductionOutcome> {
    validate_prime_level(p, level)?;
    for (modulus, name) in [(d, "D"), (w, "W")] {
        if !Factorization::of(modulus)?.is_squarefree() {
            return Err(Error::NotSquarefree(modulus));
        }
        if modulus == 0 {
            return Err(Error::InvalidParameter(format!(
                "{} must be positive",
                name
            )));
        }
    }
    if gcd(d, w) != 1 {
        return Err(Error::InvalidParameter(format!(
            "D = {} and W = {} are not coprime",
            d, w
        )));
    }
    let n = system.n();
    for (point, name) in [(t, "t"), (s, "s"), (b, "b")] {
        if point.len() != n {
            return Err(Error::InvalidParameter(format!(
                "shift {} has length {}, expected {}",
                name,
                point.len(),
                n
            )));
        }
    }
    for j in 0..n {
        if (t[j] - s[j]).rem_euclid(d as i64) != 0 {
            return Err(Error::InvalidParameter("t ≢ s (mod D)".into()));
        }
        if (t[j] - b[j]).rem_euclid(w as i64) != 0 {
            return Err(Error::InvalidParameter("t ≢ b (mod W)".into()));
        }
    }

    let left = sigma_p_l(system, v, p, level, d * w, t, budget)?.value;
    let mut outcome = DilationReductionOutcome {
        coprime_case: None,
        d_case: None,
        w_case: None,
    };
    if !(d * w).is_multiple_of(p) {
        let zeros = vec![0i64; n];
        let right = sigma_p_l(system, v, p, level, 1, &zeros, budget)?.value;
        outcome.coprime_case = Some(left == right);
    } else if d.is_multiple_of(p) {
        let right = sigma_p_l(system, v, p, level, p, s, budget)?.value;
        outcome.d_case = Some(left == right);
    } else {
        let right = sigma_p_l(system, v, p, level, p, b, budget)?.value;
        outcome.w_case = Some(left == right);
    }
    Ok(outcome)
}

/// Both sides of the exact aggregation identity at level l:
/// σ*_p(v) = (p/(p−1))^m · p^{−n} · Σ_{b ∈ Z_p^n, (l_i(b),p)=1 ∀i} σ_p^l(p,b,v).
/// Returned as (unit-restricted side, aggregated side).
pub fn aggregation_identity_sides(
    system: &FormSystem,
    family: &LinearFamily,
    v: &TargetVector,
    p: u64,
    l: u32,
    budget: &Budget,
) -> Result<(BigRational, BigRational)> {
    let star = sigma_star_p(system, family, v, p, l, budget)?;
    let n = system.n();
    admit_power(budget, p, n as u32)?;
    let mut sum = BigRational::zero();
    let mut b = vec![0u64; n];
    'points: loop {
        if family.evaluate_mod(&b, p)?.iter().all(|&t| t != 0) {
            let b_signed: Vec<i64> = b.iter().map(|&c| c as i64).collect();
            sum += sigma_p_l(system, v, p, l, p, &b_signed, budget)?.value;
        }
        let mut j = 0;
        loop {
            if j == n {
                break 'points;
            }
            b[j] += 1;
            if b[j] < p {
                break;
            }
            b[j] = 0;
            j += 1;
        }
    }
    let unit_weight = BigRational::new(
        BigInt::from(p).pow(family.m() as u32),
        BigInt::from(p - 1).pow(family.m() as u32),
    );
    let scale = BigRational::new(BigInt::one(), BigInt::from(p).pow(n as u32));
    Ok((star.value, unit_weight * scale * sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::Signed;

    fn product_form() -> FormSystem {
        FormSystem::from_integral_monomials(2, 2, &[vec![(vec![1, 1], 1)]], None).unwrap()
    }

    fn two_squares() -> FormSystem {
        FormSystem::from_integral_monomials(2, 2, &[vec![(vec![2, 0], 1), (vec![0, 2], 1)]], None)
            .unwrap()
    }

    fn three_squares() -> FormSystem {
        FormSystem::from_integral_monomials(
            3,
            2,
            &[vec![
                (vec![2, 0, 0], 1),
                (vec![0, 2, 0], 1),
                (vec![0, 0, 2], 1),
            ]],
            None,
        )
        .unwrap()
    }

    fn five_squares() -> FormSystem {
        let monos: Vec<(Vec<u32>, i64)> = (0..5)
            .map(|j| {
                let mut e = vec![0u32; 5];
                e[j] = 2;
                (e, 1)
            })
            .collect();
        FormSystem::from_integral_monomials(5, 2, &[monos], None).unwrap()
    }

    fn hyperbolic_pair() -> FormSystem {
        FormSystem::from_integral_monomials(
            4,
            2,
            &[vec![(vec![1, 1, 0, 0], 1), (vec![0, 0, 1, 1], 1)]],
            None,
        )
        .unwrap()
    }

    fn single_square() -> FormSystem {
        FormSystem::from_integral_monomials(1, 2, &[vec![(vec![2], 1)]], None).unwrap()
    }

    fn rational(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn product_form_density_examples() {
        let budget = Budget::default();
        let f = product_form();
        let v = TargetVector::new(vec![1], 1).unwrap();
        for l in [1, 2] {
            let density = sigma_p_l(&f, &v, 3, l, 1, &[0, 0], &budget).unwrap();
            assert_eq!(density.value, rational(2, 3), "level {}", l);
            assert_eq!(density.level, l);
            assert_eq!(density.stabilized, None);
        }
    }

    #[test]
    fn nonsingular_shift_gives_p_to_r() {
        let budget = Budget::default();
        let f = product_form();
        let v = TargetVector::new(vec![0], 1).unwrap();
        for l in [1, 2, 3] {
            let density = sigma_p_l(&f, &v, 5, l, 5, &[0, 1], &budget).unwrap();
            assert_eq!(density.value, rational(5, 1), "level {}", l);
        }
        let g = three_squares();
        let v1 = TargetVector::new(vec![1], 1).unwrap();
        for p in [3u64, 5] {
            for l in [1, 2] {
                let density = sigma_p_l(&g, &v1, p, l, p, &[1, 0, 0], &budget).unwrap();
                assert_eq!(density.value, BigRational::from_integer(BigInt::from(p)));
            }
        }
    }

    #[test]
    fn stabilization_detects_smooth_and_singular_fibers() {
        let budget = Budget::default();
        let f = product_form();
        let v = TargetVector::new(vec![1], 1).unwrap();
        let density = sigma_p_stabilized(&f, &v, 3, 1, &[0, 0], 3, &budget).unwrap();
        assert_eq!(density.value, rational(2, 3));
        assert_eq!(density.stabilized, Some(true));
        assert_eq!(density.level, 2);

        // x² ≡ 0: the count of x mod 3^l with x² ≡ 0 grows with l.
        let g = single_square();
        let v0 = TargetVector::new(vec![0], 1).unwrap();
        let density = sigma_p_stabilized(&g, &v0, 3, 1, &[0], 2, &budget).unwrap();
        assert_eq!(density.stabilized, Some(false));
        assert_eq!(density.level, 2);

        let h = three_squares();
        let v1 = TargetVector::new(vec![1], 1).unwrap();
        let density = sigma_p_stabilized(&h, &v1, 5, 1, &[0, 0, 0], 2, &budget).unwrap();
        assert_eq!(density.stabilized, Some(true));
    }

    #[test]
    fn unit_restricted_density_examples() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let v2 = TargetVector::new(vec![2], 1).unwrap();
        let density = sigma_star_p(&f, &family, &v2, 3, 1, &budget).unwrap();
        assert_eq!(density.value, rational(3, 1));

        let v1 = TargetVector::new(vec![1], 1).unwrap();
        let density = sigma_star_p(&f, &family, &v1, 3, 1, &budget).unwrap();
        assert!(density.value.is_zero());

        // Empty family: the unit restriction is vacuous.
        let empty = LinearFamily::empty(2);
        for l in [1, 2] {
            let star = sigma_star_p(&f, &empty, &v1, 3, l, &budget).unwrap();
            let plain = sigma_p_l(&f, &v1, 3, l, 1, &[0, 0], &budget).unwrap();
            assert_eq!(star.value, plain.value);
        }
    }

    #[test]
    fn hybrid_shortcut_and_singular_fallback() {
        let budget = Budget::default();
        let f = product_form();
        let v0 = TargetVector::new(vec![0], 1).unwrap();
        let shortcut = hybrid_sigma(&f, &v0, 5, &[0, 1], 2, &budget).unwrap();
        assert_eq!(shortcut.value, rational(5, 1));
        assert_eq!(shortcut.stabilized, Some(true));

        // Σx_i² at s = 0, v = 0: singular fiber; σ^l(3,0,0) is 3, 9, 9 at
        // l = 1, 2, 3, so the loop stabilizes at level 3 with value 9.
        let g = three_squares();
        let fallback = hybrid_sigma(&g, &v0, 3, &[0, 0, 0], 3, &budget).unwrap();
        assert_eq!(fallback.value, rational(9, 1));
        assert_eq!(fallback.stabilized, Some(true));
        assert_eq!(fallback.level, 3);

        let direct = sigma_p_stabilized(&g, &v0, 3, 3, &[0, 0, 0], 3, &budget).unwrap();
        assert_eq!(fallback.value, direct.value);

        // Precondition: F(s) ≢ v (mod p) is refused.
        let bad = hybrid_sigma(&g, &v0, 3, &[1, 0, 0], 2, &budget);
        assert!(matches!(bad, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn euler_factor_empty_sum_is_zero() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        // x1²+x2² ≡ 2 (mod 3) forces both coordinates to be units.
        let v = TargetVector::new(vec![2], 1).unwrap();
        let factor = gamma_p(&f, &family, &v, 3, 2, InnerEvaluation::Hybrid, &budget).unwrap();
        assert!(factor.value.is_zero());
    }

    #[test]
    fn euler_factor_five_squares_fixture() {
        let budget = Budget::default();
        let f = five_squares();
        let family = LinearFamily::new(5, vec![vec![1, 0, 0, 0, 0], vec![0, 1, 0, 0, 0]]).unwrap();
        let v = TargetVector::new(vec![1], 1).unwrap();
        let hybrid = gamma_p(&f, &family, &v, 3, 2, InnerEvaluation::Hybrid, &budget).unwrap();
        // Hand count mod 3: 90 points on the fiber, 42 with x1x2 ≡ 0, all
        // nonsingular, σ_3(v) = 10/9, so γ_3 = (3^{−5}·9/10)·(42·3) = 7/15.
        assert_eq!(hybrid.value, rational(7, 15));
        let brute = gamma_p(&f, &family, &v, 3, 2, InnerEvaluation::Brute, &budget).unwrap();
        assert_eq!(hybrid.value, brute.value);

        let deviation = (hybrid.value - rational(2, 3)).abs();
        assert!(deviation <= rational(10, 9));
    }

    #[test]
    fn euler_factor_hyperbolic_fixture() {
        let budget = Budget::default();
        let f = hyperbolic_pair();
        let family = LinearFamily::new(4, vec![vec![1, 0, 0, 0]]).unwrap();
        let v = TargetVector::new(vec![1], 1).unwrap();
        let hybrid = gamma_p(&f, &family, &v, 5, 2, InnerEvaluation::Hybrid, &budget).unwrap();
        // 20 fiber points with 5 | x1, all nonsingular, σ_5(v) = 24/25:
        // γ_5 = (5^{−4}·25/24)·(20·5) = 1/6.
        assert_eq!(hybrid.value, rational(1, 6));
        let brute = gamma_p(&f, &family, &v, 5, 2, InnerEvaluation::Brute, &budget).unwrap();
        assert_eq!(hybrid.value, brute.value);
        let deviation = (hybrid.value - rational(1, 5)).abs();
        assert!(deviation <= rational(10, 25));
    }

    #[test]
    fn euler_product_matches_direct_enumeration() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let v = TargetVector::new(vec![1], 1).unwrap();
        for level in [1, 2] {
            let product = gamma_d(&f, &family, &v, 15, level, &budget).unwrap();
            let direct = gamma_d_direct(&f, &family, &v, 15, level, &budget).unwrap();
            assert_eq!(product, direct, "level {}", level);
        }

        let g = three_squares();
        let single = LinearFamily::new(3, vec![vec![1, 0, 0]]).unwrap();
        let product = gamma_d(&g, &single, &v, 15, 1, &budget).unwrap();
        let direct = gamma_d_direct(&g, &single, &v, 15, 1, &budget).unwrap();
        assert_eq!(product, direct);

        assert_eq!(
            gamma_d(&f, &family, &v, 1, 2, &budget).unwrap(),
            BigRational::one()
        );
        assert!(matches!(
            gamma_d(&f, &family, &v, 12, 2, &budget),
            Err(Error::NotSquarefree(12))
        ));
    }

    #[test]
    fn euler_product_multiplicativity() {
        let budget = Budget::default();
        let f = three_squares();
        let family = LinearFamily::new(3, vec![vec![1, 0, 0]]).unwrap();
        let v = TargetVector::new(vec![1], 1).unwrap();
        let g15 = gamma_d(&f, &family, &v, 15, 2, &budget).unwrap();
        let g3 = gamma_d(&f, &family, &v, 3, 2, &budget).unwrap();
        let g5 = gamma_d(&f, &family, &v, 5, 2, &budget).unwrap();
        assert_eq!(g15, g3 * g5);
    }

    #[test]
    fn dilation_reduction_triples() {
        let budget = Budget::default();
        let f = product_form();
        let v = TargetVector::new(vec![1], 1).unwrap();
        // t ≡ s (mod 3), t ≡ b (mod 2).
        let s = [1i64, 2];
        let b = [1i64, 1];
        let t = [1i64, 5];
        for p in [2u64, 3, 5, 7] {
            for level in [1u32, 2] {
                let outcome =
                    dilation_reduction_check(&f, &v, p, 3, 2, &t, &s, &b, level, &budget).unwrap();
                match p {
                    3 => assert_eq!(outcome.d_case, Some(true), "p = {}, level = {}", p, level),
                    2 => assert_eq!(outcome.w_case, Some(true), "p = {}, level = {}", p, level),
                    _ => assert_eq!(
                        outcome.coprime_case,
                        Some(true),
                        "p = {}, level = {}",
                        p,
                        level
                    ),
                }
            }
        }

        // Violated congruence precondition.
        let bad = dilation_reduction_check(&f, &v, 3, 3, 2, &[1, 4], &s, &b, 1, &budget);
        assert!(matches!(bad, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn aggregation_identity_exact() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        for (v_value, p, l) in [
            (2i64, 3u64, 1u32),
            (2, 3, 2),
            (1, 5, 1),
            (1, 5, 2),
            (2, 5, 2),
        ] {
            let v = TargetVector::new(vec![v_value], 1).unwrap();
            let (star, aggregated) =
                aggregation_identity_sides(&f, &family, &v, p, l, &budget).unwrap();
            assert_eq!(star, aggregated, "v = {}, p = {}, l = {}", v_value, p, l);
        }
    }

    #[test]
    fn separable_count_matches_brute_enumeration() {
        let budget = Budget::default();
        let f = FormSystem::from_integral_monomials(
            3,
            2,
            &[vec![
                (vec![2, 0, 0], 1),
                (vec![0, 2, 0], 2),
                (vec![0, 0, 2], 3),
            ]],
            None,
        )
        .unwrap();
        for p in [2u64, 3, 5] {
            for l in [1u32, 2] {
                let m = p.pow(l);
                for d in [1u64, p] {
                    for v_value in [0i64, 1, 2] {
                        let v = TargetVector::new(vec![v_value], 1).unwrap();
                        let v_res = reduce_point(v.components(), m);
                        let s = [1i64, 0, 2];
                        let fast = count_separable(&f, &v_res, m, d, &s, None, &budget)
                            .unwrap()
                            .expect("diagonal system is separable");
                        let slow = count_brute(&f, &v_res, m, d, &s, None, &budget).unwrap();
                        assert_eq!(fast, slow, "p={} l={} d={} v={}", p, l, d, v_value);
                    }
                }
            }
        }

        // Unit-restricted variant on singleton rows.
        let family = LinearFamily::new(3, vec![vec![1, 0, 0], vec![0, 0, 2]]).unwrap();
        let v = TargetVector::new(vec![1], 1).unwrap();
        for p in [3u64, 5] {
            let m = p * p;
            let v_res = reduce_point(v.components(), m);
            let fast = count_separable(&f, &v_res, m, 1, &[0, 0, 0], Some((&family, p)), &budget)
                .unwrap()
                .expect("separable with singleton unit rows");
            let slow =
                count_brute(&f, &v_res, m, 1, &[0, 0, 0], Some((&family, p)), &budget).unwrap();
            assert_eq!(fast, slow, "p={}", p);
        }
    }

    #[test]
    fn smooth_quadric_density_approaches_one() {
        let budget = Budget::default();
        let f = three_squares();
        let v = TargetVector::new(vec![1], 1).unwrap();
        let mut fitted = 0.0f64;
        let table = crate::arith::PrimeTable::up_to(50);
        for &p in table.primes() {
            if p == 2 {
                continue;
            }
            let density = sigma_p_l(&f, &v, p, 1, 1, &[0, 0, 0], &budget).unwrap();
            let gap = (density.value - BigRational::one()).abs().to_f64().unwrap();
            fitted = fitted.max(p as f64 * gap);
        }
        println!("fitted constant in |sigma_p - 1| <= C/p: {:.3}", fitted);
        assert!(fitted <= 3.0, "fitted constant {}", fitted);
    }

    #[test]
    fn budget_refusal_is_structured() {
        let budget = Budget::new(10);
        let f = product_form();
        let v = TargetVector::new(vec![1], 1).unwrap();
        let out = sigma_p_l(&f, &v, 3, 2, 1, &[0, 0], &budget);
        assert!(matches!(out, Err(Error::BudgetExceeded { .. })));
    }
}

//! Elementary multiplicative arithmetic: prime sieving, trial-division
//! factorization, the Möbius function, primorials, and roughness tests.
//!
//! Everything here targets desk-scale inputs (factored values up to ~10^12);
//! products that can outgrow machine words (primorials) use unbounded
//! integers.

use num::BigUint;
use num::One;

use crate::error::{Error, Result};

/// Primes up to a fixed limit, produced once by a sieve of Eratosthenes and
/// then shared by the counting loops.
#[derive(Debug, Clone)]
pub struct PrimeTable {
    limit: u64,
    primes: Vec<u64>,
}

impl PrimeTable {
    pub fn up_to(limit: u64) -> Self {
        let n = limit as usize;
        let mut composite = vec![false; n + 1];
        let mut primes = Vec::new();
        for p in 2..=n {
            if !composite[p] {
                primes.push(p as u64);
                let mut q = p * p;
                while q <= n {
                    composite[q] = true;
                    q += p;
                }
            }
        }
        PrimeTable { limit, primes }
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn primes(&self) -> &[u64] {
        &self.primes
    }

    /// Primes p with lo < p < hi.
    pub fn primes_strictly_between(&self, lo: u64, hi: u64) -> &[u64] {
        let start = self.primes.partition_point(|&p| p <= lo);
        let end = self.primes.partition_point(|&p| p < hi);
        &self.primes[start..end]
    }

    pub fn is_prime(&self, n: u64) -> bool {
        if n <= self.limit {
            self.primes.binary_search(&n).is_ok()
        } else {
            is_prime(n)
        }
    }
}

/// Deterministic trial-division primality test; adequate for desk-scale n.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n.is_multiple_of(2) {
        return n == 2;
    }
    let mut d = 3u64;
    while d.saturating_mul(d) <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 2;
    }
    true
}

/// Prime factorization `value = ∏ p_i^{e_i}` with the p_i strictly
/// increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factorization {
    value: u64,
    factors: Vec<(u64, u32)>,
}

impl Factorization {
    /// Factors n ≥ 1 by trial division.
    pub fn of(n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "factorization of 0 is undefined".into(),
            ));
        }
        let mut rest = n;
        let mut factors = Vec::new();
        let mut push = |p: u64, rest: &mut u64| {
            let mut e = 0u32;
            while (*rest).is_multiple_of(p) {
                *rest /= p;
                e += 1;
            }
            if e > 0 {
                factors.push((p, e));
            }
        };
        push(2, &mut rest);
        let mut d = 3u64;
        while d.saturating_mul(d) <= rest {
            push(d, &mut rest);
            d += 2;
        }
        if rest > 1 {
            factors.push((rest, 1));
        }
        Ok(Factorization { value: n, factors })
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn factors(&self) -> &[(u64, u32)] {
        &self.factors
    }

    pub fn distinct_primes(&self) -> impl Iterator<Item = u64> + '_ {
        self.factors.iter().map(|&(p, _)| p)
    }

    pub fn least_prime(&self) -> Option<u64> {
        self.factors.first().map(|&(p, _)| p)
    }

    pub fn is_squarefree(&self) -> bool {
        self.factors.iter().all(|&(_, e)| e == 1)
    }

    /// rad(value): the product of the distinct primes.
    pub fn radical(&self) -> u64 {
        self.factors.iter().map(|&(p, _)| p).product()
    }

    /// All 2^ν squarefree divisors, in no particular order.
    pub fn squarefree_divisors(&self) -> Vec<u64> {
        let mut divisors = vec![1u64];
        for &(p, _) in &self.factors {
            let len = divisors.len();
            for i in 0..len {
                divisors.push(divisors[i] * p);
            }
        }
        divisors
    }
}

/// Möbius function: (-1)^ν on squarefree n with ν prime factors, 0 otherwise.
pub fn mobius(n: u64) -> Result<i32> {
    let f = Factorization::of(n)?;
    if !f.is_squarefree() {
        return Ok(0);
    }
    Ok(if f.factors().len() % 2 == 0 { 1 } else { -1 })
}

/// Product of all primes ≤ omega, as an unbounded integer (empty product
/// for omega < 2).
pub fn primorial(omega: u64) -> BigUint {
    let mut acc = BigUint::one();
    if omega >= 2 {
        for &p in PrimeTable::up_to(omega).primes() {
            acc *= BigUint::from(p);
        }
    }
    acc
}

/// primorial(omega) when it fits a machine word (omega ≤ 52); the W used by
/// sieve plans.
pub fn primorial_u64(omega: u64) -> Result<u64> {
    let big = primorial(omega);
    u64::try_from(&big)
        .map_err(|_| Error::InvalidParameter(format!("primorial({omega}) exceeds 64 bits")))
}

/// True when every prime divisor of x is ≥ bound. x = 1 has no prime
/// divisors and is rough for every bound.
pub fn is_rough(x: u64, bound: f64) -> Result<bool> {
    if x == 0 {
        return Err(Error::InvalidParameter(
            "roughness of 0 is undefined".into(),
        ));
    }
    match Factorization::of(x)?.least_prime() {
        None => Ok(true),
        Some(p) => Ok((p as f64) >= bound),
    }
}

/// True when gcd(|value|, w) = 1 for every entry. gcd(0, w) = w, so a zero
/// entry fails for every w > 1.
pub fn coprime_to_w(values: &[i64], w: u64) -> Result<bool> {
    if w == 0 {
        return Err(Error::InvalidParameter("modulus w must be positive".into()));
    }
    Ok(values
        .iter()
        .all(|&v| num::integer::gcd(v.unsigned_abs() % w, w) == 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mobius_small_values() {
        assert_eq!(mobius(1).unwrap(), 1);
        assert_eq!(mobius(30).unwrap(), -1);
        assert_eq!(mobius(12).unwrap(), 0);
        assert_eq!(mobius(2).unwrap(), -1);
        assert_eq!(mobius(6).unwrap(), 1);
        assert!(mobius(0).is_err());
    }

    #[test]
    fn mobius_sum_over_divisors_is_unit_indicator() {
        for n in 1u64..=10_000 {
            let mut total = 0i64;
            let f = Factorization::of(n).unwrap();
            for d in f.squarefree_divisors() {
                total += i64::from(mobius(d).unwrap());
            }
            // non-squarefree divisors contribute 0, so the squarefree ones
            // carry the whole sum Σ_{d|n} μ(d)
            assert_eq!(total, i64::from(n == 1), "n = {n}");
        }
    }

    #[test]
    fn primorial_examples() {
        assert_eq!(primorial(10), BigUint::from(210u32));
        assert_eq!(primorial(2), BigUint::from(2u32));
        assert_eq!(primorial(1), BigUint::one());
        assert_eq!(primorial_u64(10).unwrap(), 210);
        assert!(primorial_u64(100).is_err());
    }

    #[test]
    fn roughness_examples() {
        assert!(is_rough(7, 3.0).unwrap());
        assert!(!is_rough(10, 3.0).unwrap());
        assert!(is_rough(1, 100.0).unwrap());
        assert!(is_rough(49, 7.0).unwrap());
        assert!(!is_rough(49, 7.5).unwrap());
        assert!(is_rough(0, 2.0).is_err());
    }

    #[test]
    fn coprimality_examples() {
        assert!(coprime_to_w(&[5, 7], 6).unwrap());
        assert!(!coprime_to_w(&[4, 9], 6).unwrap());
        assert!(coprime_to_w(&[1], 1).unwrap());
        assert!(coprime_to_w(&[0], 1).unwrap());
        assert!(!coprime_to_w(&[0], 2).unwrap());
        assert!(coprime_to_w(&[-5], 6).unwrap());
        assert!(!coprime_to_w(&[-4], 6).unwrap());
        assert!(coprime_to_w(&[], 6).unwrap());
    }

    #[test]
    fn factorization_structure() {
        let f = Factorization::of(360).unwrap();
        assert_eq!(f.factors(), &[(2, 3), (3, 2), (5, 1)]);
        assert_eq!(f.radical(), 30);
        assert!(!f.is_squarefree());
        let mut divs = f.squarefree_divisors();
        divs.sort_unstable();
        assert_eq!(divs, vec![1, 2, 3, 5, 6, 10, 15, 30]);
        assert_eq!(f.least_prime(), Some(2));

        let one = Factorization::of(1).unwrap();
        assert_eq!(one.factors(), &[]);
        assert_eq!(one.radical(), 1);
        assert!(one.is_squarefree());
    }

    #[test]
    fn prime_table_queries() {
        let t = PrimeTable::up_to(100);
        assert_eq!(t.primes().len(), 25);
        assert!(t.is_prime(97));
        assert!(!t.is_prime(91));
        assert!(t.is_prime(101));
        assert!(!t.is_prime(1_000_001));
        assert_eq!(t.primes_strictly_between(7, 20), &[11, 13, 17, 19]);
        assert_eq!(t.primes_strictly_between(0, 3), &[2]);
    }

    #[test]
    fn trial_division_primality() {
        assert!(!is_prime(0));
        assert!(!is_prime(1));
        assert!(is_prime(2));
        assert!(is_prime(999_999_937));
        assert!(!is_prime(999_999_938));
    }
}

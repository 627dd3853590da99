//! Exhaustive and accelerated counting of integer solutions in boxes.
//!
//! The box is always the positive cube {1,…,N}^n. Three counting modes:
//! plain congruent counts |{x : x ≡ s (mod D), F(x) = v}|, almost-prime
//! filtered counts (every linear form value free of primes up to N^eps),
//! and sieve-weighted sums Σ Λ_R(l_1(x)···l_m(x))² over admissible points.
//!
//! Cost is estimated upfront ((N/D)^n points, or one dimension fewer on the
//! accelerated path) and refused above the budget ceiling. Enumeration
//! parallelizes by static partition of the first coordinate; integer counts
//! merge associatively and weighted partial sums merge in coordinate order
//! through compensated accumulators, so results do not depend on the worker
//! count or schedule.
//!
//! Linear form values can be zero or negative in a general box. Weights and
//! roughness filters act on |l_i(x)|; the almost-prime counter excludes any
//! solution with some l_i(x) ≤ 0, the weighted sums exclude only exact
//! zeros. Both exclusions increment warning counters surfaced in the
//! outcome.

use rayon::prelude::*;

use crate::accum::Kahan;
use crate::arith::{coprime_to_w, is_rough};
use crate::budget::{product_cost, Budget};
use crate::error::{Error, Result};
use crate::forms::{FormSystem, IntegerEvaluator, LinearFamily, TargetVector};
use crate::sieve::{lambda_r, SievePlan, WeightFunction};

/// The integer cube {1,…,N}^n.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxSpec {
    side: u64,
    dim: usize,
}

impl BoxSpec {
    pub fn new(side: u64, dim: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidParameter("box side must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "box dimension must be positive".into(),
            ));
        }
        Ok(BoxSpec { side, dim })
    }

    pub fn side(&self) -> u64 {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Coordinatewise congruence x ≡ s (mod D).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CongruenceRestriction {
    modulus: u64,
    rep: Vec<i64>,
}

impl CongruenceRestriction {
    pub fn new(modulus: u64, rep: Vec<i64>) -> Result<Self> {
        if modulus == 0 {
            return Err(Error::InvalidParameter(
                "congruence modulus must be positive".into(),
            ));
        }
        Ok(CongruenceRestriction { modulus, rep })
    }

    /// The trivial restriction D = 1.
    pub fn trivial(dim: usize) -> Self {
        CongruenceRestriction {
            modulus: 1,
            rep: vec![0; dim],
        }
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn rep(&self) -> &[i64] {
        &self.rep
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if self.rep.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.rep.len(),
            });
        }
        Ok(())
    }
}

/// Result of an exact count, with the number of lattice points examined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountOutcome {
    pub count: u64,
    pub points_scanned: u128,
}

/// Result of an almost-prime count; solutions with a nonpositive linear
/// form value are excluded and tallied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlmostPrimeOutcome {
    pub count: u64,
    pub points_scanned: u128,
    pub nonpositive_excluded: u64,
}

/// Result of a weighted sum; solutions with a vanishing linear form value
/// are excluded from the weight and tallied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSumOutcome {
    pub value: f64,
    pub points_scanned: u128,
    pub zero_excluded: u64,
}

/// Whether the weighted sum applies Λ_R² or the constant weight 1. The
/// constant mode is the degenerate-truncation path used to tie the weighted
/// sum back to plain counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    LambdaSquared,
    Unweighted,
}

/// Arithmetic progression of the x_j values inside {1..N} meeting the
/// congruence class: first value, value count, common step.
pub(crate) fn coordinate_progression(side: u64, modulus: u64, rep: i64) -> (i64, u64) {
    let m = modulus as i128;
    let mut first = (rep as i128).rem_euclid(m);
    if first == 0 {
        first = m;
    }
    if first > side as i128 {
        return (first as i64, 0);
    }
    let count = ((side as i128 - first) / m + 1) as u64;
    (first as i64, count)
}

/// In-place odometer over a product of arithmetic progressions.
pub(crate) struct PointWalker {
    firsts: Vec<i64>,
    counts: Vec<u64>,
    idx: Vec<u64>,
    point: Vec<i64>,
    step: i64,
}

impl PointWalker {
    pub(crate) fn new(firsts: Vec<i64>, counts: Vec<u64>, step: i64) -> Self {
        let point = firsts.clone();
        let idx = vec![0; firsts.len()];
        PointWalker {
            firsts,
            counts,
            idx,
            point,
            step,
        }
    }

    pub(crate) fn point(&self) -> &[i64] {
        &self.point
    }

    /// Advances to the next point; false once the range is exhausted.
    pub(crate) fn advance(&mut self) -> bool {
        for j in (0..self.idx.len()).rev() {
            self.idx[j] += 1;
            if self.idx[j] < self.counts[j] {
                self.point[j] += self.step;
                return true;
            }
            self.idx[j] = 0;
            self.point[j] = self.firsts[j];
        }
        false
    }
}

/// Common setup: progressions per coordinate, total point count, budget check.
fn progressions(
    box_spec: &BoxSpec,
    restriction: &CongruenceRestriction,
    budget: &Budget,
) -> Result<(Vec<i64>, Vec<u64>, u128)> {
    restriction.check_dim(box_spec.dim())?;
    let mut firsts = Vec::with_capacity(box_spec.dim());
    let mut counts = Vec::with_capacity(box_spec.dim());
    for j in 0..box_spec.dim() {
        let (first, count) =
            coordinate_progression(box_spec.side(), restriction.modulus(), restriction.rep()[j]);
        firsts.push(first);
        counts.push(count);
    }
    let total = product_cost(counts.iter().map(|&c| c as u128));
    budget.admit(total)?;
    Ok((firsts, counts, total))
}

/// Runs `body` over every lattice point, parallel over the first coordinate.
/// Partial results arrive in first-coordinate order for deterministic merges.
fn scan<T, B>(firsts: &[i64], counts: &[u64], step: i64, body: B) -> Result<Vec<T>>
where
    T: Send,
    B: Fn(&mut PointWalker) -> Result<T> + Sync,
{
    if counts.contains(&0) {
        return Ok(Vec::new());
    }
    (0..counts[0])
        .into_par_iter()
        .map(|i0| {
            let mut firsts = firsts.to_vec();
            let mut counts = counts.to_vec();
            firsts[0] += i0 as i64 * step;
            counts[0] = 1;
            let mut walker = PointWalker::new(firsts, counts, step);
            body(&mut walker)
        })
        .collect()
}

fn check_system_box(system: &FormSystem, v: &TargetVector, box_spec: &BoxSpec) -> Result<()> {
    if system.n() != box_spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: system.n(),
            got: box_spec.dim(),
        });
    }
    if v.components().len() != system.r() {
        return Err(Error::DimensionMismatch {
            expected: system.r(),
            got: v.components().len(),
        });
    }
    Ok(())
}

/// |{x ∈ {1..N}^n : x ≡ s (mod D), F(x) = v}| by full enumeration.
pub fn count_congruent_solutions(
    system: &FormSystem,
    v: &TargetVector,
    box_spec: &BoxSpec,
    restriction: &CongruenceRestriction,
    budget: &Budget,
) -> Result<CountOutcome> {
    check_system_box(system, v, box_spec)?;
    let (firsts, counts, total) = progressions(box_spec, restriction, budget)?;
    let evaluator = IntegerEvaluator::new(system)?;
    let target: Vec<i128> = v.components().iter().map(|&c| c as i128).collect();

    let partials = scan(&firsts, &counts, restriction.modulus() as i64, |walker| {
        let mut count = 0u64;
        loop {
            if evaluator.evaluate(walker.point())? == target {
                count += 1;
            }
            if !walker.advance() {
                break;
            }
        }
        Ok(count)
    })?;
    Ok(CountOutcome {
        count: partials.iter().sum(),
        points_scanned: total,
    })
}

/// Count of solutions whose linear form values are all N^eps-rough.
/// Solutions with some l_i(x) ≤ 0 are excluded and tallied.
pub fn count_almost_prime_solutions(
    system: &FormSystem,
    family: &LinearFamily,
    v: &TargetVector,
    box_spec: &BoxSpec,
    eps: f64,
    budget: &Budget,
) -> Result<AlmostPrimeOutcome> {
    check_system_box(system, v, box_spec)?;
    if family.n() != box_spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: box_spec.dim(),
            got: family.n(),
        });
    }
    if !(0.0 < eps && eps < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "eps must lie in (0,1), got {}",
            eps
        )));
    }
    let restriction = CongruenceRestriction::trivial(box_spec.dim());
    let (firsts, counts, total) = progressions(box_spec, &restriction, budget)?;
    let evaluator = IntegerEvaluator::new(system)?;
    let target: Vec<i128> = v.components().iter().map(|&c| c as i128).collect();
    let bound = (box_spec.side() as f64).powf(eps);

    let partials = scan(&firsts, &counts, 1, |walker| {
        let mut count = 0u64;
        let mut excluded = 0u64;
        'points: loop {
            if evaluator.evaluate(walker.point())? == target {
                let values = family.evaluate(walker.point())?;
                let mut ok = true;
                for &value in &values {
                    if value <= 0 {
                        excluded += 1;
                        ok = false;
                        break;
                    }
                    if !is_rough(value as u64, bound)? {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    count += 1;
                }
            }
            if !walker.advance() {
                break 'points;
            }
        }
        Ok((count, excluded))
    })?;
    let count = partials.iter().map(|p| p.0).sum();
    let nonpositive_excluded = partials.iter().map(|p| p.1).sum();
    Ok(AlmostPrimeOutcome {
        count,
        points_scanned: total,
        nonpositive_excluded,
    })
}

/// Σ Λ_R(|l_1(x)···l_m(x)|)² over solutions of F(x) = v in the box, either
/// restricted to x ≡ b (mod W) for an admissible residue b, or aggregated
/// over all x with (L(x), W) = 1 when b is absent. With `q` set, only
/// solutions with q | l_1(x)···l_m(x) contribute. `Unweighted` mode replaces
/// Λ_R² by 1 (and then skips the zero-value exclusion, since the constant
/// weight needs no positive argument).
#[allow(clippy::too_many_arguments)]
pub fn sieve_weighted_sum(
    system: &FormSystem,
    family: &LinearFamily,
    v: &TargetVector,
    box_spec: &BoxSpec,
    plan: &SievePlan,
    b: Option<&[i64]>,
    q: Option<u64>,
    mode: WeightMode,
    budget: &Budget,
) -> Result<WeightedSumOutcome> {
    check_system_box(system, v, box_spec)?;
    if family.n() != box_spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: box_spec.dim(),
            got: family.n(),
        });
    }
    if plan.m() as usize != family.m() {
        return Err(Error::InvalidParameter(format!(
            "plan multiplicity {} does not match the family size {}",
            plan.m(),
            family.m()
        )));
    }
    if let Some(q) = q {
        if !crate::arith::is_prime(q) {
            return Err(Error::NotPrime(q));
        }
    }
    let w = plan.w();
    let restriction = match b {
        Some(b) => {
            if b.len() != box_spec.dim() {
                return Err(Error::DimensionMismatch {
                    expected: box_spec.dim(),
                    got: b.len(),
                });
            }
            let l_of_b = family.evaluate(b)?;
            if !coprime_to_w(&l_of_b, w)? {
                return Err(Error::InadmissibleResidue(format!(
                    "residue {:?} has (L(b), W) > 1 for W = {}",
                    b, w
                )));
            }
            CongruenceRestriction::new(w, b.to_vec())?
        }
        None => CongruenceRestriction::trivial(box_spec.dim()),
    };
    let aggregate = b.is_none();
    let (firsts, counts, total) = progressions(box_spec, &restriction, budget)?;
    let evaluator = IntegerEvaluator::new(system)?;
    let target: Vec<i128> = v.components().iter().map(|&c| c as i128).collect();
    let f = WeightFunction::new(plan.m())?;
    let r = plan.r();

    let partials = scan(&firsts, &counts, restriction.modulus() as i64, |walker| {
        let mut acc = Kahan::default();
        let mut excluded = 0u64;
        loop {
            'point: {
                if evaluator.evaluate(walker.point())? != target {
                    break 'point;
                }
                let values = family.evaluate(walker.point())?;
                if aggregate && !coprime_to_w(&values, w)? {
                    break 'point;
                }
                let mut product: u128 = 1;
                let mut has_zero = false;
                for &value in &values {
                    has_zero |= value == 0;
                    product = product.saturating_mul(value.unsigned_abs() as u128);
                }
                if let Some(q) = q {
                    // q | l_1(x)···l_m(x); a zero value makes the product 0,
                    // which every q divides.
                    if !has_zero && !product.is_multiple_of(q as u128) {
                        break 'point;
                    }
                }
                match mode {
                    WeightMode::Unweighted => acc.add(1.0),
                    WeightMode::LambdaSquared => {
                        if has_zero {
                            excluded += 1;
                            break 'point;
                        }
                        let product = u64::try_from(product).map_err(|_| {
                            Error::Structure("linear form product exceeds u64".into())
                        })?;
                        let lambda = lambda_r(product, &f, r)?;
                        acc.add(lambda * lambda);
                    }
                }
            }
            if !walker.advance() {
                break;
            }
        }
        Ok((acc, excluded))
    })?;

    let mut value = Kahan::default();
    let mut zero_excluded = 0u64;
    for (part, excluded) in partials {
        value.merge(part);
        zero_excluded += excluded;
    }
    Ok(WeightedSumOutcome {
        value: value.value(),
        points_scanned: total,
        zero_excluded,
    })
}

/// Congruent count computed by enumerating the first n-1 coordinates and
/// solving for the last. Requires every form to contain the last variable
/// only through a pure square term c_i·x_n² with integer c_i, at least one
/// nonzero; refuses otherwise so the caller can fall back to the full scan.
pub fn last_variable_accelerated_count(
    system: &FormSystem,
    v: &TargetVector,
    box_spec: &BoxSpec,
    restriction: &CongruenceRestriction,
    budget: &Budget,
) -> Result<CountOutcome> {
    use num::ToPrimitive;

    check_system_box(system, v, box_spec)?;
    restriction.check_dim(box_spec.dim())?;
    let n = box_spec.dim();
    let last = n - 1;

    // c_i: coefficient of x_n² in F_i; any other appearance of x_n refuses.
    let mut square_coeffs: Vec<i128> = Vec::with_capacity(system.r());
    for i in 0..system.r() {
        let mut c: i128 = 0;
        for (exps, coeff) in system.monomials(i) {
            if exps[last] == 0 {
                continue;
            }
            let pure_square = exps[last] == 2 && exps.iter().take(last).all(|&e| e == 0);
            if !pure_square {
                return Err(Error::Structure(
                    "last variable appears outside a pure square term; use full enumeration".into(),
                ));
            }
            if !coeff.is_integer() {
                return Err(Error::Structure(
                    "last-variable square coefficient is not an integer; use full enumeration"
                        .into(),
                ));
            }
            c = coeff
                .to_integer()
                .to_i128()
                .ok_or_else(|| Error::Structure("square coefficient exceeds i128".into()))?;
        }
        square_coeffs.push(c);
    }
    let pivot = square_coeffs.iter().position(|&c| c != 0).ok_or_else(|| {
        Error::Structure("no form contains the last variable; use full enumeration".into())
    })?;

    // Progressions over the leading coordinates only.
    let mut firsts = Vec::with_capacity(last);
    let mut counts = Vec::with_capacity(last);
    for j in 0..last {
        let (first, count) =
            coordinate_progression(box_spec.side(), restriction.modulus(), restriction.rep()[j]);
        firsts.push(first);
        counts.push(count);
    }
    let total = product_cost(counts.iter().map(|&c| c as u128));
    budget.admit(total)?;

    let evaluator = IntegerEvaluator::new(system)?;
    let target: Vec<i128> = v.components().iter().map(|&c| c as i128).collect();
    let side = box_spec.side() as i128;
    let modulus = restriction.modulus() as i128;
    let last_rep = (restriction.rep()[last] as i128).rem_euclid(modulus);

    let solve = |walker: &mut PointWalker| -> Result<u64> {
        let mut count = 0u64;
        let mut full = vec![0i64; n];
        loop {
            full[..last].copy_from_slice(walker.point());
            full[last] = 0;
            // G_i(x') = F_i(x', 0); the pivot equation c·x_n² = v - G fixes x_n.
            let g = evaluator.evaluate(&full)?;
            let numerator = target[pivot] - g[pivot];
            let c = square_coeffs[pivot];
            'candidate: {
                if numerator % c != 0 {
                    break 'candidate;
                }
                let t = numerator / c;
                if t < 1 || t > side * side {
                    break 'candidate;
                }
                let root = (t as u128).isqrt() as i128;
                if root * root != t || root < 1 || root > side {
                    break 'candidate;
                }
                if root.rem_euclid(modulus) != last_rep {
                    break 'candidate;
                }
                full[last] = root as i64;
                if evaluator.evaluate(&full)? == target {
                    count += 1;
                }
            }
            if !walker.advance() {
                break;
            }
        }
        Ok(count)
    };

    if last == 0 {
        // Single-variable system: one candidate altogether.
        let mut walker = PointWalker::new(Vec::new(), Vec::new(), modulus as i64);
        let count = solve(&mut walker)?;
        return Ok(CountOutcome {
            count,
            points_scanned: 1,
        });
    }

    let partials = scan(&firsts, &counts, restriction.modulus() as i64, |walker| {
        solve(walker)
    })?;
    Ok(CountOutcome {
        count: partials.iter().sum(),
        points_scanned: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::FormSystem;

    fn two_squares() -> FormSystem {
        FormSystem::from_integral_monomials(2, 2, &[vec![(vec![2, 0], 1), (vec![0, 2], 1)]], None)
            .unwrap()
    }

    fn signature_form() -> FormSystem {
        // x1² + x2² + x3² - x4² - x5²
        FormSystem::from_integral_monomials(
            5,
            2,
            &[vec![
                (vec![2, 0, 0, 0, 0], 1),
                (vec![0, 2, 0, 0, 0], 1),
                (vec![0, 0, 2, 0, 0], 1),
                (vec![0, 0, 0, 2, 0], -1),
                (vec![0, 0, 0, 0, 2], -1),
            ]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn congruent_count_examples() {
        let budget = Budget::default();
        let f = two_squares();
        let v25 = TargetVector::new(vec![25], 1).unwrap();
        let out = count_congruent_solutions(
            &f,
            &v25,
            &BoxSpec::new(25, 2).unwrap(),
            &CongruenceRestriction::trivial(2),
            &budget,
        )
        .unwrap();
        assert_eq!(out.count, 2);
        assert_eq!(out.points_scanned, 625);

        let v3 = TargetVector::new(vec![3], 1).unwrap();
        let out = count_congruent_solutions(
            &f,
            &v3,
            &BoxSpec::new(10, 2).unwrap(),
            &CongruenceRestriction::trivial(2),
            &budget,
        )
        .unwrap();
        assert_eq!(out.count, 0);

        let v8 = TargetVector::new(vec![8], 1).unwrap();
        let out = count_congruent_solutions(
            &f,
            &v8,
            &BoxSpec::new(10, 2).unwrap(),
            &CongruenceRestriction::new(2, vec![0, 0]).unwrap(),
            &budget,
        )
        .unwrap();
        assert_eq!(out.count, 1);
    }

    #[test]
    fn budget_refusal_names_cost() {
        let budget = Budget::new(100);
        let f = two_squares();
        let v = TargetVector::new(vec![25], 1).unwrap();
        let out = count_congruent_solutions(
            &f,
            &v,
            &BoxSpec::new(25, 2).unwrap(),
            &CongruenceRestriction::trivial(2),
            &budget,
        );
        match out {
            Err(Error::BudgetExceeded { estimated, ceiling }) => {
                assert_eq!(estimated, 625);
                assert_eq!(ceiling, 100);
            }
            other => panic!("expected budget refusal, got {:?}", other),
        }
    }

    #[test]
    fn partition_invariance() {
        // Counting over {1..N} equals the sum over a split of the first
        // coordinate's range, expressed through congruence classes mod 3.
        let budget = Budget::default();
        let f = two_squares();
        let v = TargetVector::new(vec![25], 1).unwrap();
        let box_spec = BoxSpec::new(25, 2).unwrap();
        let whole = count_congruent_solutions(
            &f,
            &v,
            &box_spec,
            &CongruenceRestriction::trivial(2),
            &budget,
        )
        .unwrap()
        .count;
        let mut split = 0;
        for r0 in 0..3 {
            for r1 in 0..3 {
                split += count_congruent_solutions(
                    &f,
                    &v,
                    &box_spec,
                    &CongruenceRestriction::new(3, vec![r0, r1]).unwrap(),
                    &budget,
                )
                .unwrap()
                .count;
            }
        }
        assert_eq!(whole, split);
    }

    #[test]
    fn almost_prime_examples() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let v = TargetVector::new(vec![25], 1).unwrap();
        let box_spec = BoxSpec::new(25, 2).unwrap();
        let loose = count_almost_prime_solutions(&f, &family, &v, &box_spec, 0.2, &budget).unwrap();
        assert_eq!(loose.count, 2);
        assert_eq!(loose.nonpositive_excluded, 0);
        // N^0.3 ≈ 2.63 forbids the factor 2 of the coordinate 4
        let tight = count_almost_prime_solutions(&f, &family, &v, &box_spec, 0.3, &budget).unwrap();
        assert_eq!(tight.count, 0);

        let v3 = TargetVector::new(vec![3], 1).unwrap();
        let none = count_almost_prime_solutions(
            &f,
            &family,
            &v3,
            &BoxSpec::new(10, 2).unwrap(),
            0.2,
            &budget,
        )
        .unwrap();
        assert_eq!(none.count, 0);
    }

    #[test]
    fn almost_prime_monotone_in_eps() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let v = TargetVector::new(vec![325], 1).unwrap();
        let box_spec = BoxSpec::new(18, 2).unwrap();
        let mut last = u64::MAX;
        for eps in [0.05, 0.15, 0.25, 0.35, 0.5, 0.7, 0.9] {
            let out =
                count_almost_prime_solutions(&f, &family, &v, &box_spec, eps, &budget).unwrap();
            assert!(
                out.count <= last,
                "eps={} count={} last={}",
                eps,
                out.count,
                last
            );
            last = out.count;
        }
    }

    #[test]
    fn weighted_sum_examples() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();

        // empty solution set
        let v3 = TargetVector::new(vec![3], 1).unwrap();
        let plan = SievePlan::with_explicit_r(2, 10, 16.0, 0.2, 1).unwrap();
        let out = sieve_weighted_sum(
            &f,
            &family,
            &v3,
            &BoxSpec::new(10, 2).unwrap(),
            &plan,
            None,
            None,
            WeightMode::LambdaSquared,
            &budget,
        )
        .unwrap();
        assert_eq!(out.value, 0.0);

        // W = 2: both solutions of x1²+x2²=25 have an even coordinate
        let v25 = TargetVector::new(vec![25], 1).unwrap();
        let plan = SievePlan::with_explicit_r(2, 25, 26.0, 0.2, 2).unwrap();
        assert_eq!(plan.w(), 2);
        let out = sieve_weighted_sum(
            &f,
            &family,
            &v25,
            &BoxSpec::new(25, 2).unwrap(),
            &plan,
            None,
            None,
            WeightMode::LambdaSquared,
            &budget,
        )
        .unwrap();
        assert_eq!(out.value, 0.0);

        // W = 1, v = 13, N = 13, R = 169: solutions (2,3) and (3,2), both
        // weighted by Λ_R(6)².
        let v13 = TargetVector::new(vec![13], 1).unwrap();
        let plan = SievePlan::with_explicit_r(2, 13, 169.0, 0.2, 1).unwrap();
        let out = sieve_weighted_sum(
            &f,
            &family,
            &v13,
            &BoxSpec::new(13, 2).unwrap(),
            &plan,
            None,
            None,
            WeightMode::LambdaSquared,
            &budget,
        )
        .unwrap();
        let weight = WeightFunction::new(2).unwrap();
        let lambda6 = lambda_r(6, &weight, 169.0).unwrap();
        assert!((out.value - 2.0 * lambda6 * lambda6).abs() <= 1e-12 * out.value.abs());
    }

    #[test]
    fn weighted_sum_admissibility() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let v = TargetVector::new(vec![25], 1).unwrap();
        let plan = SievePlan::with_explicit_r(2, 25, 26.0, 0.2, 2).unwrap();
        // (L(b), 2) = 2 for b = (2, 1): refused
        let out = sieve_weighted_sum(
            &f,
            &family,
            &v,
            &BoxSpec::new(25, 2).unwrap(),
            &plan,
            Some(&[2, 1]),
            None,
            WeightMode::LambdaSquared,
            &budget,
        );
        assert!(matches!(out, Err(Error::InadmissibleResidue(_))));
    }

    #[test]
    fn weighted_sum_aggregates_over_admissible_residues() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let v = TargetVector::new(vec![325], 1).unwrap();
        let box_spec = BoxSpec::new(18, 2).unwrap();
        let plan = SievePlan::with_explicit_r(2, 18, 20.0, 0.2, 3).unwrap();
        let w = plan.w();
        assert_eq!(w, 6);

        let aggregate = sieve_weighted_sum(
            &f,
            &family,
            &v,
            &box_spec,
            &plan,
            None,
            None,
            WeightMode::LambdaSquared,
            &budget,
        )
        .unwrap();

        let mut total = 0.0;
        let mut rep = [0i64; 2];
        for b0 in 0..w as i64 {
            for b1 in 0..w as i64 {
                rep[0] = b0;
                rep[1] = b1;
                let l_of_b = family.evaluate(&rep).unwrap();
                if !coprime_to_w(&l_of_b, w).unwrap() {
                    continue;
                }
                total += sieve_weighted_sum(
                    &f,
                    &family,
                    &v,
                    &box_spec,
                    &plan,
                    Some(&rep),
                    None,
                    WeightMode::LambdaSquared,
                    &budget,
                )
                .unwrap()
                .value;
            }
        }
        assert!((aggregate.value - total).abs() <= 1e-12 * aggregate.value.abs().max(1.0));
    }

    #[test]
    fn unweighted_mode_equals_plain_count() {
        let budget = Budget::default();
        let f = two_squares();
        let family = LinearFamily::new(2, vec![vec![1, 0], vec![0, 1]]).unwrap();
        let v = TargetVector::new(vec![25], 1).unwrap();
        let box_spec = BoxSpec::new(25, 2).unwrap();
        let plan = SievePlan::with_explicit_r(2, 25, 100.0, 0.2, 1).unwrap();
        let weighted = sieve_weighted_sum(
            &f,
            &family,
            &v,
            &box_spec,
            &plan,
            None,
            None,
            WeightMode::Unweighted,
            &budget,
        )
        .unwrap();
        let plain = count_congruent_solutions(
            &f,
            &v,
            &box_spec,
            &CongruenceRestriction::trivial(2),
            &budget,
        )
        .unwrap();
        assert_eq!(weighted.value, plain.count as f64);
    }

    #[test]
    fn accelerated_count_examples() {
        let budget = Budget::default();
        let f = two_squares();
        let v25 = TargetVector::new(vec![25], 1).unwrap();
        let out = last_variable_accelerated_count(
            &f,
            &v25,
            &BoxSpec::new(25, 2).unwrap(),
            &CongruenceRestriction::trivial(2),
            &budget,
        )
        .unwrap();
        assert_eq!(out.count, 2);

        let v3 = TargetVector::new(vec![3], 1).unwrap();
        let out = last_variable_accelerated_count(
            &f,
            &v3,
            &BoxSpec::new(10, 2).unwrap(),
            &CongruenceRestriction::trivial(2),
            &budget,
        )
        .unwrap();
        assert_eq!(out.count, 0);

        let sig = signature_form();
        let v0 = TargetVector::new(vec![0], 1).unwrap();
        let fast = last_variable_accelerated_count(
            &sig,
            &v0,
            &BoxSpec::new(12, 5).unwrap(),
            &CongruenceRestriction::trivial(5),
            &budget,
        )
        .unwrap();
        let slow = count_congruent_solutions(
            &sig,
            &v0,
            &BoxSpec::new(12, 5).unwrap(),
            &CongruenceRestriction::trivial(5),
            &budget,
        )
        .unwrap();
        assert_eq!(fast.count, slow.count);
    }

    #[test]
    fn accelerated_count_matches_brute_force_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let budget = Budget::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xacce1);
        for trial in 0..50 {
            let n = rng.gen_range(2..=4);
            // diagonal-ish quadratic with a pure square in the last variable
            let mut monos: Vec<(Vec<u32>, i64)> = Vec::new();
            for j in 0..n {
                let mut e = vec![0u32; n];
                e[j] = 2;
                let c = if j == n - 1 {
                    [-2i64, -1, 1, 2][rng.gen_range(0..4)]
                } else {
                    rng.gen_range(-2i64..=2)
                };
                if c != 0 {
                    monos.push((e, c));
                }
            }
            if n >= 3 && rng.gen_bool(0.5) {
                // cross term among the leading variables only
                let mut e = vec![0u32; n];
                e[0] = 1;
                e[1] = 1;
                monos.push((e, rng.gen_range(-2i64..=2)));
            }
            monos.retain(|(_, c)| *c != 0);
            if !monos.iter().any(|(e, _)| e[n - 1] == 2) {
                let mut e = vec![0u32; n];
                e[n - 1] = 2;
                monos.push((e, 1));
            }
            let system = FormSystem::from_integral_monomials(n, 2, &[monos], None).unwrap();
            let side = rng.gen_range(3..=10u64);
            let v = TargetVector::new(vec![rng.gen_range(-20i64..=60)], 1).unwrap();
            let modulus = rng.gen_range(1..=3u64);
            let rep: Vec<i64> = (0..n).map(|_| rng.gen_range(0..modulus as i64)).collect();
            let restriction = CongruenceRestriction::new(modulus, rep).unwrap();
            let box_spec = BoxSpec::new(side, n).unwrap();
            let fast =
                last_variable_accelerated_count(&system, &v, &box_spec, &restriction, &budget)
                    .unwrap();
            let slow =
                count_congruent_solutions(&system, &v, &box_spec, &restriction, &budget).unwrap();
            assert_eq!(fast.count, slow.count, "trial {} mismatch", trial);
        }
    }

    #[test]
    fn accelerated_count_refuses_unsuitable_systems() {
        let budget = Budget::default();
        // x1·x2: the last variable appears in a cross term
        let xy = FormSystem::from_integral_monomials(2, 2, &[vec![(vec![1, 1], 1)]], None).unwrap();
        let v = TargetVector::new(vec![6], 1).unwrap();
        let out = last_variable_accelerated_count(
            &xy,
            &v,
            &BoxSpec::new(10, 2).unwrap(),
            &CongruenceRestriction::trivial(2),
            &budget,
        );
        assert!(matches!(out, Err(Error::Structure(_))));
    }
}

//! Circle-method numerics: exponential sums, Gauss sums, the Weyl-type
//! difference bound, major-arc membership, truncated singular series, the
//! singular integral, and the main-term prediction assembled from them.
//!
//! Conventions. The exponential sum is Σ e^{2πi α·F(dx+s)} over the box
//! fiber {x : dx+s ∈ {1..N}^n}. Gauss sums are S_{a,q}(d,s) =
//! Σ_{x ∈ Z_q^n} e^{2πi a·F(dx+s)/q} with a an integer vector of length r.
//! The level-l local factor is recovered from Gauss sums as
//! Σ_{t=0}^{l} p^{−tn} Σ_{(a,p^t)=1} e^{−2πi a·v/p^t} S_{a,p^t}(d,s),
//! which agrees exactly with the counting definition of σ_p^l(d,s,v).
//!
//! Rational phases (Gauss sums, singular series) use exact integer
//! arithmetic mod q and a q-element table of roots of unity, so their only
//! floating error is the final accumulation. Irrational phases reduce the
//! argument mod 1 in double precision, which keeps desk-scale sums accurate
//! to ~10⁻⁸ absolute. All enumerations parallelize by the leading
//! coordinate and merge compensated partial sums in a fixed order; the
//! Monte Carlo integral derives each sample from (seed, sample index), so
//! every result is independent of scheduling and worker count.

use num::complex::Complex64;
use num::integer::gcd;
use num::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::accum::{Kahan, KahanComplex};
use crate::budget::{product_cost, Budget};
use crate::counter::{coordinate_progression, BoxSpec, PointWalker};
use crate::error::{Error, Result};
use crate::forms::{FormSystem, IntegerEvaluator, ModularEvaluator, TargetVector};
use crate::quad::gauss_legendre;

const TAU: f64 = std::f64::consts::TAU;

/// e^{2πi j/q} for j = 0..q.
fn roots_of_unity(q: u64) -> Vec<Complex64> {
    (0..q)
        .map(|j| {
            let (sin, cos) = (TAU * j as f64 / q as f64).sin_cos();
            Complex64::new(cos, sin)
        })
        .collect()
}

/// Histogram over Z_q^r of the value vectors F(dx+s) mod q, x ∈ Z_q^n,
/// indexed little-endian base q. The one q^n enumeration every rational
/// phase sum here shares.
fn value_histogram(
    system: &FormSystem,
    d: u64,
    s: &[i64],
    q: u64,
    budget: &Budget,
) -> Result<Vec<u64>> {
    let n = system.n();
    let r = system.r();
    if s.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: s.len(),
        });
    }
    let points = (q as u128)
        .checked_pow(n as u32)
        .ok_or(Error::BudgetExceeded {
            estimated: u128::MAX,
            ceiling: budget.ceiling(),
        })?;
    budget.admit(points)?;
    let size = (q as usize)
        .checked_pow(r as u32)
        .filter(|&size| size <= 1 << 26)
        .ok_or_else(|| Error::Structure(format!("value space q^r = {}^{} too large", q, r)))?;

    let evaluator = ModularEvaluator::new(system, q)?;
    let d_res = d % q;
    let s_res: Vec<u64> = s
        .iter()
        .map(|&c| (c as i128).rem_euclid(q as i128) as u64)
        .collect();

    let partials: Vec<Vec<u64>> = (0..q)
        .into_par_iter()
        .map(|x0| {
            let mut hist = vec![0u64; size];
            let mut x = vec![0u64; n];
            x[0] = x0;
            let mut y = vec![0u64; n];
            'points: loop {
                for j in 0..n {
                    y[j] = ((d_res as u128 * x[j] as u128 + s_res[j] as u128) % q as u128) as u64;
                }
                let values = evaluator.evaluate(&y);
                let mut idx = 0usize;
                for &w in values.iter().rev() {
                    idx = idx * q as usize + w as usize;
                }
                hist[idx] += 1;
                let mut j = n - 1;
                loop {
                    if j == 0 {
                        break 'points;
                    }
                    x[j] += 1;
                    if x[j] < q {
                        break;
                    }
                    x[j] = 0;
                    j -= 1;
                }
            }
            hist
        })
        .collect();

    let mut hist = vec![0u64; size];
    for partial in partials {
        for (total, part) in hist.iter_mut().zip(partial) {
            *total += part;
        }
    }
    Ok(hist)
}

/// Σ_{x ∈ Z_q^n} e^{2πi a·F(dx+s)/q}.
pub fn gauss_sum(
    system: &FormSystem,
    a: &[i64],
    q: u64,
    d: u64,
    s: &[i64],
    budget: &Budget,
) -> Result<Complex64> {
    if q == 0 {
        return Err(Error::InvalidParameter("modulus must be positive".into()));
    }
    if a.len() != system.r() {
        return Err(Error::DimensionMismatch {
            expected: system.r(),
            got: a.len(),
        });
    }
    let hist = value_histogram(system, d, s, q, budget)?;
    let roots = roots_of_unity(q);
    let a_res: Vec<u64> = a
        .iter()
        .map(|&c| (c as i128).rem_euclid(q as i128) as u64)
        .collect();
    let r = system.r();
    let mut acc = KahanComplex::default();
    let mut digits = vec![0u64; r];
    for (idx, &count) in hist.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let mut rest = idx;
        for digit in digits.iter_mut() {
            *digit = (rest % q as usize) as u64;
            rest /= q as usize;
        }
        let mut phase = 0u64;
        for i in 0..r {
            let term = ((a_res[i] as u128 * digits[i] as u128) % q as u128) as u64;
            phase = (phase + term) % q;
        }
        acc.add(roots[phase as usize] * count as f64);
    }
    Ok(acc.value())
}

/// Σ e^{2πi α·F(dx+s)} over {x : dx+s ∈ {1..N}^n}, one α_i per form.
pub fn exp_sum(
    system: &FormSystem,
    d: u64,
    s: &[i64],
    alpha: &[f64],
    box_spec: &BoxSpec,
    budget: &Budget,
) -> Result<Complex64> {
    let n = system.n();
    if box_spec.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: box_spec.dim(),
        });
    }
    if s.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: s.len(),
        });
    }
    if alpha.len() != system.r() {
        return Err(Error::DimensionMismatch {
            expected: system.r(),
            got: alpha.len(),
        });
    }
    if d == 0 {
        return Err(Error::InvalidParameter("dilation must be positive".into()));
    }
    let mut firsts = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for j in 0..n {
        let (first, count) = coordinate_progression(box_spec.side(), d, s[j]);
        firsts.push(first);
        counts.push(count);
    }
    budget.admit(product_cost(counts.iter().map(|&c| c as u128)))?;
    if counts.contains(&0) {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let evaluator = IntegerEvaluator::new(system)?;

    let partials: Result<Vec<KahanComplex>> = (0..counts[0])
        .into_par_iter()
        .map(|i0| {
            let mut firsts = firsts.clone();
            let mut counts = counts.clone();
            firsts[0] += i0 as i64 * d as i64;
            counts[0] = 1;
            let mut walker = PointWalker::new(firsts, counts, d as i64);
            let mut acc = KahanComplex::default();
            loop {
                let values = evaluator.evaluate(walker.point())?;
                let mut t = 0.0f64;
                for (alpha_i, value) in alpha.iter().zip(&values) {
                    t += alpha_i * (*value as f64);
                }
                t -= t.round();
                let (sin, cos) = (TAU * t).sin_cos();
                acc.add(Complex64::new(cos, sin));
                if !walker.advance() {
                    break;
                }
            }
            Ok(acc)
        })
        .collect();

    let mut total = KahanComplex::default();
    for partial in partials? {
        total.merge(partial);
    }
    Ok(total.value())
}

/// Right side of the Weyl-type differencing bound:
/// N1^{−kn} Σ_{h ∈ [−⌊N1⌋,⌊N1⌋]^{n(k−1)}} ∏_j min{N1, ‖d^k α·Φ_j(h)‖^{−1}},
/// where Φ_j are the multilinear forms of the difference expansion and
/// ‖·‖ is the distance to the nearest integer.
pub fn weyl_rhs(
    system: &FormSystem,
    d: u64,
    alpha: &[f64],
    n1: f64,
    budget: &Budget,
) -> Result<f64> {
    let n = system.n();
    let k = system.k();
    if alpha.len() != system.r() {
        return Err(Error::DimensionMismatch {
            expected: system.r(),
            got: alpha.len(),
        });
    }
    if !(n1 >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "N1 must be at least 1, got {}",
            n1
        )));
    }
    let h_bound = n1.floor() as i64;
    let width = (2 * h_bound + 1) as u128;
    let slots = n * (k as usize - 1);
    budget.admit(
        width
            .checked_pow(slots as u32)
            .ok_or(Error::BudgetExceeded {
                estimated: u128::MAX,
                ceiling: budget.ceiling(),
            })?,
    )?;

    let d_pow = (d as f64).powi(k as i32);
    let mut acc = Kahan::default();
    let mut h_flat = vec![-h_bound; slots];
    let mut hs = vec![vec![0i64; n]; k as usize - 1];
    'tuples: loop {
        for (slot, value) in h_flat.iter().enumerate() {
            hs[slot / n][slot % n] = *value;
        }
        let phi = system.multilinear_phi(&hs)?;
        let mut product = 1.0f64;
        for j in 0..n {
            let mut t = 0.0f64;
            for (i, alpha_i) in alpha.iter().enumerate() {
                t += alpha_i * phi[i][j].to_f64().unwrap_or(f64::INFINITY);
            }
            t *= d_pow;
            let dist = (t - t.round()).abs();
            let factor = if dist < 1.0 / n1 { n1 } else { 1.0 / dist };
            product *= factor;
        }
        acc.add(product);
        let mut slot = slots;
        loop {
            if slot == 0 {
                break 'tuples;
            }
            slot -= 1;
            h_flat[slot] += 1;
            if h_flat[slot] <= h_bound {
                break;
            }
            h_flat[slot] = -h_bound;
        }
    }
    Ok(acc.value() * n1.powi(-(k as i32) * n as i32))
}

/// Dissection parameters: the arcs at level θ for a system of r forms of
/// degree k in a box of side N1, with κ = r(k−1)θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MajorArcParams {
    theta: f64,
    n1: f64,
    r: usize,
    k: u32,
}

impl MajorArcParams {
    pub fn new(theta: f64, n1: f64, r: usize, k: u32) -> Result<Self> {
        if !(0.0 < theta && theta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "theta must lie in (0,1), got {}",
                theta
            )));
        }
        if !(n1 >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "N1 must be at least 1, got {}",
                n1
            )));
        }
        if r == 0 || k < 2 {
            return Err(Error::InvalidParameter(
                "need r ≥ 1 forms of degree k ≥ 2".into(),
            ));
        }
        let params = MajorArcParams { theta, n1, r, k };
        if params.kappa() >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "kappa = r(k-1)theta = {} is not < 1",
                params.kappa()
            )));
        }
        Ok(params)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn n1(&self) -> f64 {
        self.n1
    }

    pub fn kappa(&self) -> f64 {
        self.r as f64 * (self.k as f64 - 1.0) * self.theta
    }
}

/// The (a, q) with q ≤ N1^κ, vector-gcd(a, q) = 1 and
/// |α_i − a_i/q| ≤ q^{−1} N1^{−k+κ} for all i, smallest q first; `None`
/// when α lies on no major arc.
pub fn major_arc_membership(alpha: &[f64], params: &MajorArcParams) -> Option<(Vec<i64>, u64)> {
    if alpha.len() != params.r {
        return None;
    }
    let kappa = params.kappa();
    let q_cap = (params.n1.powf(kappa).floor() as u64).max(1);
    let window_scale = params.n1.powf(-(params.k as f64) + kappa);
    for q in 1..=q_cap {
        let numerators: Vec<i64> = alpha
            .iter()
            .map(|&a| (a * q as f64).round() as i64)
            .collect();
        let mut common = q;
        for &num in &numerators {
            common = gcd(common, num.unsigned_abs());
        }
        if common != 1 {
            continue;
        }
        let window = window_scale / q as f64;
        let inside = alpha
            .iter()
            .zip(&numerators)
            .all(|(&a, &num)| (a - num as f64 / q as f64).abs() <= window);
        if inside {
            return Some((numerators, q));
        }
    }
    None
}

/// Truncation of the singular series at q ≤ Q_max, with per-q partial terms
/// and the magnitude of the last-decade block (q ∈ (Q_max/10, Q_max]) as
/// the tail proxy.
#[derive(Debug, Clone)]
pub struct SingularSeriesTruncation {
    pub value: Complex64,
    pub q_max: u64,
    pub per_q: Vec<(u64, Complex64)>,
    pub tail_proxy: f64,
}

/// A(q) = q^{−n} Σ_{a ∈ Z_q^r, (gcd(a),q)=1} e^{−2πi a·v/q} S_{a,q}(d,s),
/// sharing one histogram per q.
fn series_term(
    system: &FormSystem,
    v: &TargetVector,
    d: u64,
    s: &[i64],
    q: u64,
    budget: &Budget,
) -> Result<Complex64> {
    let n = system.n();
    let r = system.r();
    let hist = value_histogram(system, d, s, q, budget)?;
    let roots = roots_of_unity(q);
    let v_res: Vec<u64> = v
        .components()
        .iter()
        .map(|&c| (c as i128).rem_euclid(q as i128) as u64)
        .collect();

    // Decode hist indices once.
    let mut decoded: Vec<(Vec<u64>, u64)> = Vec::new();
    for (idx, &count) in hist.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let mut digits = vec![0u64; r];
        let mut rest = idx;
        for digit in digits.iter_mut() {
            *digit = (rest % q as usize) as u64;
            rest /= q as usize;
        }
        decoded.push((digits, count));
    }

    let mut acc = KahanComplex::default();
    let mut a = vec![0u64; r];
    'avectors: loop {
        let mut common = q;
        for &ai in &a {
            common = gcd(common, ai);
        }
        if common == 1 {
            // e(−a·v/q) · S_{a,q}
            let mut inner = KahanComplex::default();
            for (digits, count) in &decoded {
                let mut phase = 0u64;
                for i in 0..r {
                    let term = ((a[i] as u128 * digits[i] as u128) % q as u128) as u64;
                    phase = (phase + term) % q;
                }
                inner.add(roots[phase as usize] * *count as f64);
            }
            let mut v_phase = 0u64;
            for i in 0..r {
                let term = ((a[i] as u128 * v_res[i] as u128) % q as u128) as u64;
                v_phase = (v_phase + term) % q;
            }
            // e(−θ) = conjugate of e(θ)
            acc.add(roots[v_phase as usize].conj() * inner.value());
        }
        let mut i = 0;
        loop {
            if i == r {
                break 'avectors;
            }
            a[i] += 1;
            if a[i] < q {
                break;
            }
            a[i] = 0;
            i += 1;
        }
    }
    Ok(acc.value() / (q as f64).powi(n as i32))
}

/// Σ_{q ≤ Q_max} A(q) with per-q terms retained.
pub fn singular_series(
    system: &FormSystem,
    v: &TargetVector,
    d: u64,
    s: &[i64],
    q_max: u64,
    budget: &Budget,
) -> Result<SingularSeriesTruncation> {
    if q_max == 0 {
        return Err(Error::InvalidParameter("Q_max must be positive".into()));
    }
    if v.components().len() != system.r() {
        return Err(Error::DimensionMismatch {
            expected: system.r(),
            got: v.components().len(),
        });
    }
    let mut per_q = Vec::with_capacity(q_max as usize);
    let mut total = KahanComplex::default();
    for q in 1..=q_max {
        let term = series_term(system, v, d, s, q, budget)?;
        total.add(term);
        per_q.push((q, term));
    }
    let decade_floor = q_max / 10;
    let mut tail = KahanComplex::default();
    for &(q, term) in &per_q {
        if q > decade_floor {
            tail.add(term);
        }
    }
    Ok(SingularSeriesTruncation {
        value: total.value(),
        q_max,
        per_q,
        tail_proxy: tail.value().norm(),
    })
}

/// Level-l local factor from Gauss sums:
/// Σ_{t=0}^{l} p^{−tn} Σ_{(a,p^t)=1} e^{−2πi a·v/p^t} S_{a,p^t}(d,s).
/// Agrees with the counting density σ_p^l(d,s,v) to accumulation error.
pub fn local_factor_via_gauss(
    system: &FormSystem,
    v: &TargetVector,
    p: u64,
    l: u32,
    d: u64,
    s: &[i64],
    budget: &Budget,
) -> Result<f64> {
    if !crate::arith::is_prime(p) {
        return Err(Error::NotPrime(p));
    }
    let mut total = Kahan::default();
    total.add(1.0); // t = 0
    for t in 1..=l {
        let q = p
            .checked_pow(t)
            .ok_or_else(|| Error::InvalidParameter(format!("p^t = {}^{} overflows u64", p, t)))?;
        // Coprimality (a, p^t) = 1 asks that not every a_i be divisible by
        // p, which is exactly the vector-gcd condition series_term imposes
        // at modulus q = p^t; the term already carries the q^{-n} weight.
        let term = series_term(system, v, d, s, q, budget)?;
        total.add(term.re);
    }
    Ok(total.value())
}

/// How a singular-integral estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegralMethod {
    SlabMonteCarlo,
    OscillatoryQuadrature,
}

/// Controls for the Monte Carlo slab density.
#[derive(Debug, Clone, Copy)]
pub struct IntegralControls {
    /// Slab half-width is delta_scale · max(1, |u|_∞).
    pub delta_scale: f64,
    pub samples: u64,
    pub seed: u64,
    /// Also estimate at δ/2 for a discretization diagnostic.
    pub halving_check: bool,
}

impl Default for IntegralControls {
    fn default() -> Self {
        IntegralControls {
            delta_scale: 0.02,
            samples: 1_000_000,
            seed: 1,
            halving_check: false,
        }
    }
}

/// A singular-integral estimate with its uncertainty diagnostics.
#[derive(Debug, Clone)]
pub struct SingularIntegralEstimate {
    pub value: f64,
    pub method: IntegralMethod,
    pub samples: u64,
    pub seed: u64,
    pub delta: f64,
    pub standard_error: f64,
    pub halved_delta_value: Option<f64>,
}

/// f64 view of the system for real-point evaluation.
struct RealEvaluator {
    n: usize,
    terms: Vec<Vec<(Vec<u32>, f64)>>,
}

impl RealEvaluator {
    fn new(system: &FormSystem) -> Result<Self> {
        let mut terms = Vec::with_capacity(system.r());
        for i in 0..system.r() {
            let form: Vec<(Vec<u32>, f64)> = system
                .monomials(i)
                .iter()
                .map(|(exps, coeff)| {
                    coeff
                        .to_f64()
                        .map(|c| (exps.clone(), c))
                        .ok_or_else(|| Error::Structure("coefficient exceeds f64 range".into()))
                })
                .collect::<Result<_>>()?;
            terms.push(form);
        }
        Ok(RealEvaluator {
            n: system.n(),
            terms,
        })
    }

    fn evaluate_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (slot, form) in out.iter_mut().zip(&self.terms) {
            let mut acc = 0.0;
            for (exps, coeff) in form {
                let mut term = *coeff;
                for (j, &e) in exps.iter().enumerate() {
                    for _ in 0..e {
                        term *= x[j];
                    }
                }
                acc += term;
            }
            *slot = acc;
        }
    }
}

fn slab_density(
    evaluator: &RealEvaluator,
    r: usize,
    u: &[f64],
    delta: f64,
    samples: u64,
    seed: u64,
    stream_offset: u64,
) -> (f64, f64) {
    let n = evaluator.n;
    let hits: u64 = (0..samples)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_offset + index);
            let mut point = vec![0.0f64; n];
            for coordinate in point.iter_mut() {
                *coordinate = rng.gen::<f64>();
            }
            let mut values = vec![0.0f64; r];
            evaluator.evaluate_into(&point, &mut values);
            let inside = values
                .iter()
                .zip(u)
                .all(|(value, target)| (value - target).abs() <= delta);
            inside as u64
        })
        .sum();
    let p_hat = hits as f64 / samples as f64;
    let volume_scale = (2.0 * delta).powi(-(r as i32));
    let value = p_hat * volume_scale;
    let se = (p_hat * (1.0 - p_hat) / samples as f64).sqrt() * volume_scale;
    (value, se)
}

/// Monte Carlo slab density for the singular integral:
/// vol{y ∈ [0,1]^n : |F_i(y) − u_i| ≤ δ ∀i} / (2δ)^r.
pub fn singular_integral_j(
    system: &FormSystem,
    u: &[f64],
    controls: &IntegralControls,
) -> Result<SingularIntegralEstimate> {
    let r = system.r();
    if u.len() != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            got: u.len(),
        });
    }
    if controls.samples == 0 {
        return Err(Error::InvalidParameter(
            "sample count must be positive".into(),
        ));
    }
    if !(controls.delta_scale > 0.0) {
        return Err(Error::InvalidParameter(
            "delta scale must be positive".into(),
        ));
    }
    let evaluator = RealEvaluator::new(system)?;
    let u_norm = u.iter().fold(0.0f64, |acc, &t| acc.max(t.abs()));
    let delta = controls.delta_scale * u_norm.max(1.0);
    let (value, se) = slab_density(&evaluator, r, u, delta, controls.samples, controls.seed, 0);
    let halved = if controls.halving_check {
        let (half_value, _) = slab_density(
            &evaluator,
            r,
            u,
            delta / 2.0,
            controls.samples,
            controls.seed,
            controls.samples,
        );
        Some(half_value)
    } else {
        None
    };
    Ok(SingularIntegralEstimate {
        value,
        method: IntegralMethod::SlabMonteCarlo,
        samples: controls.samples,
        seed: controls.seed,
        delta,
        standard_error: se,
        halved_delta_value: halved,
    })
}

/// I(γ) = ∫_{[0,1]^n} e^{2πi γ·F(y)} dy by tensor-product Gauss-Legendre
/// quadrature (single-form systems; diagnostic use).
pub fn oscillatory_integral_i(
    system: &FormSystem,
    gamma: f64,
    nodes_per_dim: usize,
    budget: &Budget,
) -> Result<Complex64> {
    if system.r() != 1 {
        return Err(Error::Structure(
            "oscillatory quadrature is implemented for a single form".into(),
        ));
    }
    if nodes_per_dim == 0 {
        return Err(Error::InvalidParameter(
            "need at least one node per dimension".into(),
        ));
    }
    let n = system.n();
    budget.admit((nodes_per_dim as u128).checked_pow(n as u32).ok_or(
        Error::BudgetExceeded {
            estimated: u128::MAX,
            ceiling: budget.ceiling(),
        },
    )?)?;
    let (nodes, weights) = gauss_legendre(nodes_per_dim);
    // Map from [-1,1] to [0,1].
    let nodes: Vec<f64> = nodes.iter().map(|t| (t + 1.0) / 2.0).collect();
    let weights: Vec<f64> = weights.iter().map(|w| w / 2.0).collect();
    let evaluator = RealEvaluator::new(system)?;

    let mut acc = KahanComplex::default();
    let mut idx = vec![0usize; n];
    let mut point = vec![0.0f64; n];
    let mut value = [0.0f64; 1];
    'grid: loop {
        let mut weight = 1.0f64;
        for j in 0..n {
            point[j] = nodes[idx[j]];
            weight *= weights[idx[j]];
        }
        evaluator.evaluate_into(&point, &mut value);
        let (sin, cos) = (TAU * gamma * value[0]).sin_cos();
        acc.add(Complex64::new(cos, sin) * weight);
        let mut j = 0;
        loop {
            if j == n {
                break 'grid;
            }
            idx[j] += 1;
            if idx[j] < nodes_per_dim {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
    Ok(acc.value())
}

/// J(u; Φ) = ∫_{−Φ}^{Φ} I(γ) e^{−2πi γ u} dγ, the oscillatory route to the
/// singular integral (diagnostic cross-check, single form).
pub fn oscillatory_integral_j(
    system: &FormSystem,
    u: f64,
    phi: f64,
    gamma_nodes: usize,
    cube_nodes: usize,
    budget: &Budget,
) -> Result<f64> {
    if !(phi > 0.0) {
        return Err(Error::InvalidParameter("Phi must be positive".into()));
    }
    let (nodes, weights) = gauss_legendre(gamma_nodes);
    let mut acc = Kahan::default();
    for (node, weight) in nodes.iter().zip(&weights) {
        let gamma = node * phi;
        let i_gamma = oscillatory_integral_i(system, gamma, cube_nodes, budget)?;
        let (sin, cos) = (-TAU * gamma * u).sin_cos();
        let integrand = i_gamma * Complex64::new(cos, sin);
        acc.add(integrand.re * weight * phi);
    }
    Ok(acc.value())
}

/// The assembled main-term prediction
/// N^{n−rk} · D^{−n} · (singular series truncation) · J(N^{−k} v).
#[derive(Debug, Clone)]
pub struct BirchPrediction {
    pub value: f64,
    pub series: SingularSeriesTruncation,
    pub integral: SingularIntegralEstimate,
}

#[allow(clippy::too_many_arguments)]
pub fn birch_prediction(
    system: &FormSystem,
    v: &TargetVector,
    n_side: u64,
    d: u64,
    s: &[i64],
    q_max: u64,
    controls: &IntegralControls,
    budget: &Budget,
) -> Result<BirchPrediction> {
    if n_side == 0 || d == 0 {
        return Err(Error::InvalidParameter(
            "box side and dilation must be positive".into(),
        ));
    }
    let n = system.n();
    let r = system.r();
    let k = system.k();
    let series = singular_series(system, v, d, s, q_max, budget)?;
    let n_f = n_side as f64;
    let u: Vec<f64> = v
        .components()
        .iter()
        .map(|&c| c as f64 * n_f.powi(-(k as i32)))
        .collect();
    let integral = singular_integral_j(system, &u, controls)?;
    let exponent = n as i32 - (r as i32) * (k as i32);
    let value =
        n_f.powi(exponent) * (d as f64).powi(-(n as i32)) * series.value.re * integral.value;
    Ok(BirchPrediction {
        value,
        series,
        integral,
    })
}

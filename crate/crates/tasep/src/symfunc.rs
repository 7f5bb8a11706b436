//! Symmetric-function machinery encoding the initial condition: the
//! bialternant ratio `G_lambda`, its power-sum expansion, the two-variable
//! specialization `chi_lambda`, and the kernel `kess` built from them.

use crate::quadrature::{adaptive_integrate, CircleContour};
use crate::{Complex64, Error, Result};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

/// Strictly decreasing particle positions, rightmost first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticleConfig {
    positions: Vec<i64>,
}

impl ParticleConfig {
    pub fn new(positions: Vec<i64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Invalid("particle configuration must be nonempty".into()));
        }
        if positions.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid(format!(
                "positions must be strictly decreasing, got {positions:?}"
            )));
        }
        Ok(Self { positions })
    }

    /// Step initial condition `(-1, ..., -N)`.
    pub fn step(n: usize) -> Self {
        Self { positions: (1..=n as i64).map(|i| -i).collect() }
    }

    /// Flat initial condition `(-2, ..., -2N)`.
    pub fn flat(n: usize) -> Self {
        Self { positions: (1..=n as i64).map(|i| -2 * i).collect() }
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[i64] {
        &self.positions
    }

    pub fn position(&self, k: usize) -> i64 {
        self.positions[k - 1]
    }

    /// `y_N + N`, the exponent base point of the configuration.
    pub fn base_exponent(&self) -> i64 {
        *self.positions.last().unwrap() + self.positions.len() as i64
    }

    /// The partition `lambda_i = (y_i + i) - (y_N + N)`.
    pub fn partition(&self) -> Partition {
        let base = self.base_exponent();
        let parts = self
            .positions
            .iter()
            .enumerate()
            .map(|(i0, &y)| y + (i0 as i64 + 1) - base)
            .collect();
        Partition::new(parts).expect("strictly decreasing positions give a valid partition")
    }

    /// Shift every position by `c`.
    pub fn shifted(&self, c: i64) -> Self {
        Self { positions: self.positions.iter().map(|y| y + c).collect() }
    }
}

/// Weakly decreasing nonnegative integer parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    parts: Vec<i64>,
}

impl Partition {
    pub fn new(parts: Vec<i64>) -> Result<Self> {
        if parts.iter().any(|&p| p < 0) || parts.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Invalid(format!(
                "parts must be weakly decreasing and nonnegative, got {parts:?}"
            )));
        }
        Ok(Self { parts })
    }

    pub fn weight(&self) -> i64 {
        self.parts.iter().sum()
    }

    /// 1-indexed part, zero beyond the stored length.
    pub fn part(&self, j: usize) -> i64 {
        if j >= 1 && j <= self.parts.len() {
            self.parts[j - 1]
        } else {
            0
        }
    }

    /// Number of nonzero parts.
    pub fn effective_len(&self) -> usize {
        self.parts.iter().filter(|&&p| p > 0).count()
    }

    pub fn parts(&self) -> &[i64] {
        &self.parts
    }
}

const COLLISION_TOL: f64 = 1e-12;

fn check_distinct(w: &[Complex64]) -> Result<()> {
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            if (w[i] - w[j]).norm() < COLLISION_TOL {
                return Err(Error::Degenerate(format!(
                    "variables {i} and {j} collide ({} vs {}); perturb the inputs",
                    w[i], w[j]
                )));
            }
        }
    }
    Ok(())
}

/// Determinant of a row-rescaled matrix, returned as `(unit, ln_scale)` with
/// `det = unit * exp(ln_scale)`. Row rescaling by the max modulus tames the
/// conditioning when variables cluster.
fn scaled_det(mut m: DMatrix<Complex64>) -> (Complex64, f64) {
    let n = m.nrows();
    let mut ln_scale = 0.0;
    for r in 0..n {
        let mx = (0..n).map(|c| m[(r, c)].norm()).fold(0.0, f64::max);
        if mx > 0.0 {
            for c in 0..n {
                m[(r, c)] /= mx;
            }
            ln_scale += mx.ln();
        }
    }
    (m.lu().determinant(), ln_scale)
}

/// `prod_{i<j} (w_i - w_j) = det[w_i^{M-j}]` as `(unit, ln_scale)`.
fn vandermonde_ln(w: &[Complex64]) -> Result<(Complex64, f64)> {
    let mut unit = Complex64::new(1.0, 0.0);
    let mut ln = 0.0;
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            let d = w[i] - w[j];
            let m = d.norm();
            if m == 0.0 {
                return Err(Error::Degenerate("coincident variables in Vandermonde".into()));
            }
            unit *= d / m;
            ln += m.ln();
        }
    }
    Ok((unit, ln))
}

/// The symmetric polynomial
/// `G_lambda(W) = det[w_i^{M-j} (w_i+1)^{lambda_j}] / det[w_i^{M-j}]`.
pub fn g_lambda(lambda: &Partition, w: &[Complex64]) -> Result<Complex64> {
    let m = w.len();
    let n_eff = lambda.effective_len();
    if m < n_eff {
        return Err(Error::Invalid(format!(
            "need at least {n_eff} variables for this partition, got {m}"
        )));
    }
    if m == 0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    check_distinct(w)?;
    let one = Complex64::new(1.0, 0.0);
    let mat = DMatrix::from_fn(m, m, |i, j| {
        let lam = lambda.part(j + 1) as i32;
        w[i].powi((m - 1 - j) as i32) * (w[i] + one).powi(lam)
    });
    let (num_unit, num_ln) = scaled_det(mat);
    let (den_unit, den_ln) = vandermonde_ln(w)?;
    let val = (num_unit / den_unit) * (num_ln - den_ln).exp();
    if !val.re.is_finite() || !val.im.is_finite() {
        return Err(Error::Conditioning("G_lambda evaluation lost all precision".into()));
    }
    Ok(val)
}

/// Power-sum expansion `G_lambda = 1 + sum_mu c_mu p_mu`, fitted numerically.
/// Exists as a cross-check oracle for `chi_lambda`, not as the compute route.
#[derive(Debug, Clone)]
pub struct PowerSumExpansion {
    /// `(mu parts, coefficient)`, mu weakly decreasing with positive parts.
    pub terms: Vec<(Vec<i64>, f64)>,
    /// Max residual of the least-squares fit at the sample points.
    pub fit_residual: f64,
}

impl PowerSumExpansion {
    pub fn evaluate_g(&self, w: &[Complex64]) -> Complex64 {
        let mut acc = Complex64::new(1.0, 0.0);
        for (mu, c) in &self.terms {
            let mut term = Complex64::new(*c, 0.0);
            for &mk in mu {
                let p: Complex64 = w.iter().map(|wi| wi.powi(mk as i32)).sum();
                term *= p;
            }
            acc += term;
        }
        acc
    }

    /// `1 + sum_mu c_mu prod_k (u^{mu_k} - v^{mu_k})`.
    pub fn evaluate_chi(&self, v: Complex64, u: Complex64) -> Complex64 {
        let mut acc = Complex64::new(1.0, 0.0);
        for (mu, c) in &self.terms {
            let mut term = Complex64::new(*c, 0.0);
            for &mk in mu {
                term *= u.powi(mk as i32) - v.powi(mk as i32);
            }
            acc += term;
        }
        acc
    }
}

fn partitions_up_to(max_weight: i64) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    fn rec(remaining: i64, max_part: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        for p in (1..=max_part.min(remaining)).rev() {
            cur.push(p);
            rec(remaining - p, p, cur, out);
            cur.pop();
        }
    }
    let mut cur = Vec::new();
    rec(max_weight, max_weight, &mut cur, &mut out);
    out
}

/// Fits the coefficients `c_{lambda,mu}` by sampling `G_lambda` at generic
/// points with `M = |lambda| + 1` variables and solving in the power-sum basis.
pub fn power_sum_coeffs(lambda: &Partition) -> Result<PowerSumExpansion> {
    let wt = lambda.weight();
    if wt > 8 {
        return Err(Error::Unsupported(format!(
            "power-sum fit supported for |lambda| <= 8, got {wt}"
        )));
    }
    if wt == 0 {
        return Ok(PowerSumExpansion { terms: Vec::new(), fit_residual: 0.0 });
    }
    let mus = partitions_up_to(wt);
    let m_vars = (wt + 1) as usize;
    // complex sample points on a few circles decorrelate the power-sum
    // monomials far better than real draws
    let n_points = 3 * mus.len() + 8;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5ca1ab1e);
    let radii = [0.35, 0.6, 0.95];
    let mut a = DMatrix::<f64>::zeros(2 * n_points, mus.len());
    let mut b = nalgebra::DVector::<f64>::zeros(2 * n_points);
    for r in 0..n_points {
        let w: Vec<Complex64> = (0..m_vars)
            .map(|_| {
                let th = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                radii[rng.gen_range(0..radii.len())] * Complex64::new(th.cos(), th.sin())
            })
            .collect();
        if check_distinct(&w).is_err() {
            continue;
        }
        let g = g_lambda(lambda, &w)?;
        b[2 * r] = g.re - 1.0;
        b[2 * r + 1] = g.im;
        for (ci, mu) in mus.iter().enumerate() {
            let mut term = Complex64::new(1.0, 0.0);
            for &mk in mu {
                let p: Complex64 = w.iter().map(|wi| wi.powi(mk as i32)).sum();
                term *= p;
            }
            a[(2 * r, ci)] = term.re;
            a[(2 * r + 1, ci)] = term.im;
        }
    }
    let svd = a.clone().svd(true, true);
    let c = svd
        .solve(&b, 1e-13)
        .map_err(|e| Error::Conditioning(format!("power-sum fit solve failed: {e}")))?;
    let resid = (&a * &c - &b).amax();
    if resid > 1e-9 {
        return Err(Error::Conditioning(format!(
            "power-sum fit residual {resid:.3e} exceeds 1e-9"
        )));
    }
    let terms = mus
        .into_iter()
        .zip(c.iter())
        .map(|(mu, &cv)| (mu, cv))
        .filter(|(_, cv)| cv.abs() > 1e-11)
        .collect();
    Ok(PowerSumExpansion { terms, fit_residual: resid })
}

/// `chi_lambda(v, u) = G_lambda(u, v*xi, ..., v*xi^{M-1})` with `xi` the M-th
/// root of unity and `M = |lambda| + 1`, bumping `M` while `u` collides with
/// a rotated copy of `v`.
pub fn chi_lambda(lambda: &Partition, v: Complex64, u: Complex64) -> Result<Complex64> {
    if v.norm() < COLLISION_TOL {
        return Err(Error::Degenerate("chi_lambda requires v != 0".into()));
    }
    let mut m = (lambda.weight() + 1) as usize;
    'outer: for _ in 0..64 {
        let mut w = Vec::with_capacity(m);
        w.push(u);
        for j in 1..m {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            let wj = v * Complex64::new(theta.cos(), theta.sin());
            if (wj - u).norm() < COLLISION_TOL {
                m += 1;
                continue 'outer;
            }
            w.push(wj);
        }
        return g_lambda(lambda, &w);
    }
    Err(Error::Degenerate("could not separate u from the rotated v grid".into()))
}

/// The essential kernel
/// `kess(v, u) = ((u+1)/(v+1))^{y_N+N} * chi_{lambda(Y)}(v, u) / (v - u)`.
pub fn kess(y: &ParticleConfig, v: Complex64, u: Complex64) -> Result<Complex64> {
    if (v - u).norm() < COLLISION_TOL {
        return Err(Error::Degenerate("kess requires v != u".into()));
    }
    let base = y.base_exponent() as i32;
    let one = Complex64::new(1.0, 0.0);
    if (u + one).norm() < COLLISION_TOL && base < 0 {
        return Err(Error::Degenerate("kess has a pole at u = -1 for this configuration".into()));
    }
    if (v + one).norm() < COLLISION_TOL {
        return Err(Error::Degenerate("kess requires v != -1".into()));
    }
    let chi = chi_lambda(&y.partition(), v, u)?;
    Ok(((u + one) / (v + one)).powi(base) * chi / (v - u))
}

/// Closed-form flat kernel `(2v+1) / ((v-u)(u+v+1))`, the leading part of
/// `kess` for the flat configuration when `|v| < 1/2` and `|v| < |u+1|`.
pub fn kess_flat_reduced(v: Complex64, u: Complex64) -> Result<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    let d1 = v - u;
    let d2 = u + v + one;
    if d1.norm() < COLLISION_TOL || d2.norm() < COLLISION_TOL {
        return Err(Error::Degenerate("kess_flat_reduced pole: v = u or u + v = -1".into()));
    }
    Ok((2.0 * v + one) / (d1 * d2))
}

/// `| (1/2*pi*i) \oint_0 v^{-i}(v+1)^{y_i+i} kess(v,u) dv + u^{-i}(u+1)^{y_i+i} |`.
///
/// Vanishes for every `1 <= i <= N`; this is the defining property of `kess`.
pub fn orthogonality_residual(y: &ParticleConfig, u: Complex64, i: usize) -> Result<f64> {
    if i < 1 || i > y.n() {
        return Err(Error::Invalid(format!("index i = {i} outside 1..={}", y.n())));
    }
    let radius = 0.4 * u.norm().min(1.0);
    if radius < 1e-3 {
        return Err(Error::Invalid("u too close to 0 for the orthogonality contour".into()));
    }
    let exp_i = (y.position(i) + i as i64) as i32;
    let contour = CircleContour::new(Complex64::new(0.0, 0.0), radius, 64)?;
    let f = |v: Complex64| {
        let one = Complex64::new(1.0, 0.0);
        v.powi(-(i as i32))
            * (v + one).powi(exp_i)
            * kess(y, v, u).unwrap_or(Complex64::new(f64::NAN, f64::NAN))
    };
    let (integral, _) = adaptive_integrate(f, &contour, 1e-13)?;
    let one = Complex64::new(1.0, 0.0);
    let target = -u.powi(-(i as i32)) * (u + one).powi(exp_i);
    Ok((integral - target).norm())
}

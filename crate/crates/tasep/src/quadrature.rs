//! Closed-contour and ray-contour quadrature for analytic integrands.
//!
//! Circles use the trapezoid rule, which converges exponentially for
//! integrands analytic in an annulus around the contour. Rays use composite
//! Gauss-Legendre panels truncated where the integrand has decayed below the
//! truncation tolerance.
//!
//! All weights produced here already contain the contour differential and the
//! 1/(2*pi*i) normalization, so a contour integral is a plain weighted sum of
//! integrand values.

use crate::{pairwise_sum, Complex64, Error, Result};

/// Hard cap for adaptive node doubling.
pub const NODE_CAP: usize = 1 << 14;

/// A circle contour traversed counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleContour {
    pub center: Complex64,
    pub radius: f64,
    pub nodes: usize,
    /// Rotation of the node grid; node j sits at angle `2*pi*j/nodes + phase`.
    pub phase: f64,
}

impl CircleContour {
    pub fn new(center: Complex64, radius: f64, nodes: usize) -> Result<Self> {
        Self::with_phase(center, radius, nodes, 0.0)
    }

    pub fn with_phase(center: Complex64, radius: f64, nodes: usize, phase: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Invalid(format!("circle radius must be positive, got {radius}")));
        }
        if nodes < 8 || !nodes.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "node count must be a power of two >= 8, got {nodes}"
            )));
        }
        Ok(Self { center, radius, nodes, phase })
    }

    /// Node points `center + radius * exp(i theta_j)`.
    pub fn points(&self) -> Vec<Complex64> {
        (0..self.nodes).map(|j| self.point(j)).collect()
    }

    pub fn point(&self, j: usize) -> Complex64 {
        let theta = 2.0 * std::f64::consts::PI * (j as f64) / (self.nodes as f64) + self.phase;
        self.center + self.radius * Complex64::new(theta.cos(), theta.sin())
    }

    /// Weight of node j for the measure `dw/(2*pi*i)`.
    pub fn weight(&self, j: usize) -> Complex64 {
        let theta = 2.0 * std::f64::consts::PI * (j as f64) / (self.nodes as f64) + self.phase;
        self.radius * Complex64::new(theta.cos(), theta.sin()) / self.nodes as f64
    }

    pub fn nodes_weights(&self) -> Vec<MeasuredNode> {
        (0..self.nodes)
            .map(|j| MeasuredNode { point: self.point(j), weight: self.weight(j) })
            .collect()
    }

    pub fn doubled(&self) -> Self {
        Self { nodes: self.nodes * 2, ..*self }
    }

    /// True if `p` lies strictly inside the circle.
    pub fn encloses(&self, p: Complex64) -> bool {
        (p - self.center).norm() < self.radius
    }
}

/// A quadrature node with its complex weight. The weight carries the contour
/// differential, the 1/(2*pi*i), and (where applicable) the signed measure
/// prefactor attached by the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredNode {
    pub point: Complex64,
    pub weight: Complex64,
}

/// `(1/2*pi*i) \oint f dw` over a circle, trapezoid rule, pairwise-summed.
pub fn integrate_circle(f: impl Fn(Complex64) -> Complex64, c: &CircleContour) -> Result<Complex64> {
    let mut terms = Vec::with_capacity(c.nodes);
    for j in 0..c.nodes {
        let v = f(c.point(j));
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(Error::NumericalDomain(format!(
                "integrand non-finite at node {} ({})",
                j,
                c.point(j)
            )));
        }
        terms.push(c.weight(j) * v);
    }
    Ok(pairwise_sum(&terms))
}

/// Doubles the node count until successive values differ by less than `tol`.
/// Returns the last value and the last difference as an error estimate.
pub fn adaptive_integrate(
    f: impl Fn(Complex64) -> Complex64,
    c: &CircleContour,
    tol: f64,
) -> Result<(Complex64, f64)> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    let mut contour = *c;
    let mut prev = integrate_circle(&f, &contour)?;
    loop {
        if contour.nodes * 2 > NODE_CAP {
            return Err(Error::Convergence {
                message: format!("node cap {NODE_CAP} reached without meeting tol {tol:.1e}"),
                best: prev,
            });
        }
        contour = contour.doubled();
        let next = integrate_circle(&f, &contour)?;
        let diff = (next - prev).norm();
        if diff < tol {
            return Ok((next, diff));
        }
        prev = next;
    }
}

/// Tensor-product trapezoid value of the iterated integral
/// `\oint ... \oint g(z_1,...,z_d) \prod dz_l/(2*pi*i*z_l)`
/// over circles centered at the origin with the given radii.
///
/// With the log-derivative measure every node carries the uniform weight
/// `1/nodes`, so the rule is a plain average over the node grid.
pub fn z_polydisc_integrate(
    g: impl Fn(&[Complex64]) -> Complex64,
    radii: &[f64],
    nodes: usize,
) -> Result<Complex64> {
    if radii.is_empty() {
        let v = g(&[]);
        return if v.re.is_finite() && v.im.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericalDomain("integrand non-finite at empty z".into()))
        };
    }
    for &r in radii {
        if !(r > 0.0) {
            return Err(Error::Invalid(format!("z-circle radius must be positive, got {r}")));
        }
    }
    let d = radii.len();
    let mut idx = vec![0usize; d];
    let mut z = vec![Complex64::new(0.0, 0.0); d];
    let total = nodes.pow(d as u32);
    let w = 1.0 / total as f64;
    let mut terms = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        for l in 0..d {
            idx[l] = rem % nodes;
            rem /= nodes;
        }
        for l in 0..d {
            let theta = 2.0 * std::f64::consts::PI * (idx[l] as f64) / (nodes as f64);
            z[l] = radii[l] * Complex64::new(theta.cos(), theta.sin());
        }
        let v = g(&z);
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(Error::NumericalDomain(format!("integrand non-finite at z = {z:?}")));
        }
        terms.push(w * v);
    }
    Ok(pairwise_sum(&terms))
}

/// The signed measure prefactor attached to one ring of a nested system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingKind {
    /// The middle (level 1) contour: plain `dw/(2*pi*i)`.
    Level1,
    /// An outer ring of level `l >= 2`: prefactor `-z_{l-1}/(1-z_{l-1})`.
    Outer,
    /// An inner ring of level `l >= 2`: prefactor `1/(1-z_{l-1})`.
    Inner,
}

/// Prefactor of the measure on a ring, given the z-variable of its level.
pub fn dmu_prefactor(kind: RingKind, z: Complex64) -> Complex64 {
    let one = Complex64::new(1.0, 0.0);
    match kind {
        RingKind::Level1 => one,
        RingKind::Outer => -z / (one - z),
        RingKind::Inner => one / (one - z),
    }
}

/// The two families of `2m-1` nested circles around -1 and 0.
///
/// Circles are listed from outside to inside: levels `m, ..., 2` (outer
/// rings), level 1 (middle), levels `2, ..., m` (inner rings).
#[derive(Debug, Clone)]
pub struct NestedCircleSystem {
    pub left: Vec<CircleContour>,
    pub right: Vec<CircleContour>,
    pub m: usize,
}

impl NestedCircleSystem {
    /// Geometric radius ladder in `[r_min, r_max]` about -1 and 0.
    pub fn symmetric(m: usize, r_min: f64, r_max: f64, nodes: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Invalid("level count m must be >= 1".into()));
        }
        let count = 2 * m - 1;
        let radii: Vec<f64> = if count == 1 {
            vec![(r_min * r_max).sqrt()]
        } else {
            // outermost first
            (0..count)
                .map(|i| r_max * (r_min / r_max).powf(i as f64 / (count - 1) as f64))
                .collect()
        };
        let left = radii
            .iter()
            .map(|&r| CircleContour::new(Complex64::new(-1.0, 0.0), r, nodes))
            .collect::<Result<Vec<_>>>()?;
        let right = radii
            .iter()
            .map(|&r| CircleContour::new(Complex64::new(0.0, 0.0), r, nodes))
            .collect::<Result<Vec<_>>>()?;
        let sys = Self { left, right, m };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let count = 2 * self.m - 1;
        if self.left.len() != count || self.right.len() != count {
            return Err(Error::Invalid(format!(
                "expected {count} circles per family, got {} left / {} right",
                self.left.len(),
                self.right.len()
            )));
        }
        for fam in [&self.left, &self.right] {
            for w in fam.windows(2) {
                if w[1].radius >= w[0].radius {
                    return Err(Error::Invalid(
                        "family radii must strictly decrease from outside to inside".into(),
                    ));
                }
            }
        }
        let minus_one = Complex64::new(-1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        for c in &self.left {
            if !c.encloses(minus_one) {
                return Err(Error::Invalid("left circle does not enclose -1".into()));
            }
            if c.encloses(zero) {
                return Err(Error::Invalid("left circle must not enclose 0".into()));
            }
        }
        for c in &self.right {
            if !c.encloses(zero) {
                return Err(Error::Invalid("right circle does not enclose 0".into()));
            }
            if c.encloses(minus_one) {
                return Err(Error::Invalid("right circle must not enclose -1".into()));
            }
        }
        for l in &self.left {
            for r in &self.right {
                if (l.center - r.center).norm() <= l.radius + r.radius {
                    return Err(Error::Invalid("left and right families intersect".into()));
                }
            }
        }
        Ok(())
    }

    /// Index of the level-1 (middle) circle in the out-to-in list.
    pub fn middle_index(&self) -> usize {
        self.m - 1
    }

    /// Indices of the outer and inner circles of level `l >= 2`.
    pub fn ring_indices(&self, level: usize) -> (usize, usize) {
        debug_assert!(level >= 2 && level <= self.m);
        (self.m - level, self.m - 2 + level)
    }
}

/// Gauss-Legendre nodes and weights on (-1, 1), by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut xs = vec![0.0f64; n];
    let mut ws = vec![0.0f64; n];
    for k in 0..n {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        xs[n - 1 - k] = x;
        ws[n - 1 - k] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// An unbounded V-shaped contour from `infinity * e^{-i*angle}` through the
/// vertex to `infinity * e^{+i*angle}`, truncated at arc parameter `s_max`.
#[derive(Debug, Clone)]
pub struct RaySegmentContour {
    pub vertex: Complex64,
    pub angle: f64,
    pub s_max: f64,
    /// Panel edges in [0, s_max]; each panel carries a Gauss-Legendre rule.
    pub panel_edges: Vec<f64>,
    pub gl_order: usize,
}

impl RaySegmentContour {
    pub fn new(vertex: Complex64, angle: f64, s_max: f64, panels: usize, gl_order: usize) -> Self {
        // graded edges: finer near the vertex where the kernels vary fastest
        let edges: Vec<f64> = (0..=panels)
            .map(|i| s_max * ((i as f64 / panels as f64).powf(1.5)))
            .collect();
        Self { vertex, angle, s_max, panel_edges: edges, gl_order }
    }

    pub fn nodes_per_ray(&self) -> usize {
        (self.panel_edges.len() - 1) * self.gl_order
    }

    /// Nodes and weights for `d zeta/(2*pi*i)` along the whole contour.
    pub fn nodes_weights(&self) -> Vec<MeasuredNode> {
        let (gx, gw) = gauss_legendre(self.gl_order);
        let dir_up = Complex64::new(self.angle.cos(), self.angle.sin());
        let dir_dn = Complex64::new(self.angle.cos(), -self.angle.sin());
        let two_pi_i = Complex64::new(0.0, 2.0 * std::f64::consts::PI);
        let mut out = Vec::with_capacity(2 * self.nodes_per_ray());
        // lower ray contributes with a minus sign: traversal runs toward the vertex
        for edge in self.panel_edges.windows(2) {
            let (a, b) = (edge[0], edge[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in gx.iter().zip(gw.iter()) {
                let s = mid + half * x;
                let wq = half * w;
                out.push(MeasuredNode {
                    point: self.vertex + s * dir_dn,
                    weight: -wq * dir_dn / two_pi_i,
                });
                out.push(MeasuredNode {
                    point: self.vertex + s * dir_up,
                    weight: wq * dir_up / two_pi_i,
                });
            }
        }
        out
    }

    /// Checks the caller-supplied decay majorant at the truncation points.
    pub fn check_decay(&self, majorant: impl Fn(Complex64) -> f64, tol: f64) -> Result<()> {
        let dir_up = Complex64::new(self.angle.cos(), self.angle.sin());
        let dir_dn = Complex64::new(self.angle.cos(), -self.angle.sin());
        for end in [self.vertex + self.s_max * dir_up, self.vertex + self.s_max * dir_dn] {
            let v = majorant(end);
            if !(v < tol) {
                return Err(Error::Invalid(format!(
                    "decay majorant {v:.3e} at contour end {end} exceeds truncation tolerance {tol:.1e}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn residue_of_simple_pole() {
        let c = CircleContour::new(c64(0.0, 0.0), 0.3, 64).unwrap();
        let v = integrate_circle(|w| 1.0 / w, &c).unwrap();
        assert!((v - c64(1.0, 0.0)).norm() < 1e-13);
    }

    #[test]
    fn analytic_integrand_vanishes() {
        let c = CircleContour::new(c64(0.4, -0.2), 0.7, 64).unwrap();
        let v = integrate_circle(|_| c64(1.0, 0.0), &c).unwrap();
        assert!(v.norm() < 1e-14);
    }

    #[test]
    fn two_pole_residue() {
        let c = CircleContour::new(c64(0.0, 0.0), 0.3, 128).unwrap();
        let v = integrate_circle(|w| 1.0 / (w * (w - 0.9)), &c).unwrap();
        assert!((v - c64(-1.0 / 0.9, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn adaptive_exp_over_w() {
        let c = CircleContour::new(c64(0.0, 0.0), 0.5, 8).unwrap();
        let (v, err) = adaptive_integrate(|w| w.exp() / w, &c, 1e-12).unwrap();
        assert!((v - c64(1.0, 0.0)).norm() < 1e-12);
        assert!(err < 1e-12);
    }

    #[test]
    fn adaptive_pole_outside() {
        let c = CircleContour::new(c64(0.0, 0.0), 1.0, 8).unwrap();
        let (v, _) = adaptive_integrate(|w| 1.0 / (w - 2.0), &c, 1e-12).unwrap();
        assert!(v.norm() < 1e-12);
    }

    #[test]
    fn adaptive_reports_cap() {
        // pole just outside the contour: convergence rate (1/1.0001)^n is far
        // too slow to reach 1e-16 before the node cap
        let c = CircleContour::new(c64(0.0, 0.0), 1.0, 8).unwrap();
        let r = adaptive_integrate(|w| 1.0 / (w - 1.0001), &c, 1e-16);
        match r {
            Err(Error::Convergence { best, .. }) => {
                assert!(best.re.is_finite());
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn adaptive_matches_fixed_high_node_count_on_kernel_trace() {
        // the trace integrand of the one-point operator product: the inner
        // contour integral is evaluated by residues up front, leaving an
        // analytic integrand on the outer circle
        use crate::multipoint::{f_level, ObservationSet, Side};
        let obs = ObservationSet::single(1, 0, 1.0);
        let inner_circle = CircleContour::new(c64(0.0, 0.0), 0.2, 256).unwrap();
        let f = move |u: Complex64| {
            let inner = integrate_circle(
                |v| {
                    f_level(1, v, Side::Right, &obs).unwrap() / ((u - v) * (v - u))
                },
                &inner_circle,
            )
            .unwrap();
            f_level(1, u, Side::Left, &obs).unwrap() * inner
        };
        let outer = CircleContour::new(c64(-1.0, 0.0), 0.25, 32).unwrap();
        let (adaptive, _) = adaptive_integrate(&f, &outer, 1e-12).unwrap();
        let direct =
            integrate_circle(&f, &CircleContour::new(c64(-1.0, 0.0), 0.25, NODE_CAP).unwrap())
                .unwrap();
        assert!((adaptive - direct).norm() < 1e-10, "{adaptive} vs {direct}");
    }

    #[test]
    fn rotation_invariance() {
        let f = |w: Complex64| (w.exp() + 1.0) / (w * (w - 2.0));
        let a = CircleContour::new(c64(0.0, 0.0), 0.7, 128).unwrap();
        let b = CircleContour::with_phase(c64(0.0, 0.0), 0.7, 128, 1.2345).unwrap();
        let va = integrate_circle(f, &a).unwrap();
        let vb = integrate_circle(f, &b).unwrap();
        assert!((va - vb).norm() <= 1e-12 * va.norm().max(1.0));
    }

    #[test]
    fn laurent_exactness() {
        // f = sum c_k (w - c)^k for |k| <= K < n/2 integrates to c_{-1}
        let c = c64(0.3, -0.1);
        let coeffs: Vec<(i32, Complex64)> =
            vec![(-3, c64(0.2, 0.5)), (-1, c64(1.7, -0.3)), (0, c64(3.0, 0.0)), (4, c64(-0.2, 0.9))];
        let f = |w: Complex64| {
            coeffs.iter().map(|&(k, a)| a * (w - c).powi(k)).sum::<Complex64>()
        };
        let circ = CircleContour::new(c, 0.8, 16).unwrap();
        let v = integrate_circle(f, &circ).unwrap();
        assert!((v - c64(1.7, -0.3)).norm() < 1e-13);
    }

    #[test]
    fn polydisc_inside_and_outside() {
        let one = |z: &[Complex64]| 1.0 / (1.0 - z[0]);
        let inside = z_polydisc_integrate(one, &[0.5], 256).unwrap();
        assert!((inside - c64(1.0, 0.0)).norm() < 1e-12);
        // residues at 0 and 1 cancel under dz/(2*pi*i*z)
        let outside = z_polydisc_integrate(one, &[2.0], 4096).unwrap();
        assert!(outside.norm() < 1e-10);
    }

    #[test]
    fn polydisc_two_dims_no_constant_term() {
        let g = |z: &[Complex64]| z[0] * z[1];
        let v = z_polydisc_integrate(g, &[0.5, 0.3], 32).unwrap();
        assert!(v.norm() < 1e-14);
    }

    #[test]
    fn nested_system_validates_and_rejects() {
        let sys = NestedCircleSystem::symmetric(2, 0.08, 0.42, 16).unwrap();
        assert_eq!(sys.left.len(), 3);
        assert_eq!(sys.middle_index(), 1);
        assert_eq!(sys.ring_indices(2), (0, 2));

        let mut bad = sys.clone();
        bad.left.swap(0, 2);
        assert!(bad.validate().is_err());

        let mut overlapping = sys;
        overlapping.right[0].radius = 0.95;
        assert!(overlapping.validate().is_err());
    }

    #[test]
    fn gauss_legendre_exactness() {
        let (x, w) = gauss_legendre(12);
        for k in [0usize, 1, 2, 7, 22] {
            let approx: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(k as i32)).sum();
            let exact = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
            assert!((approx - exact).abs() < 1e-13, "k={k}: {approx} vs {exact}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn laurent_exactness_random(
            c_re in -0.5f64..0.5,
            c_im in -0.5f64..0.5,
            radius in 0.2f64..1.5,
            coeffs in proptest::collection::vec((-4i32..=4, -1.0f64..1.0, -1.0f64..1.0), 1..6),
        ) {
            let center = c64(c_re, c_im);
            let f = |w: Complex64| {
                coeffs
                    .iter()
                    .map(|&(k, re, im)| c64(re, im) * (w - center).powi(k))
                    .sum::<Complex64>()
            };
            let expected: Complex64 =
                coeffs.iter().filter(|&&(k, _, _)| k == -1).map(|&(_, re, im)| c64(re, im)).sum();
            let circ = CircleContour::new(center, radius, 16).unwrap();
            let v = integrate_circle(f, &circ).unwrap();
            let scale = coeffs.iter().map(|&(k, re, im)| c64(re, im).norm() * radius.powi(k)).sum::<f64>();
            proptest::prop_assert!((v - expected).norm() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn ray_contour_catches_residue() {
        // f(z) = e^{z^3}/(z - 1) decays along the +-pi/3 rays; the V-contour
        // through 0.5 minus the one through 1.5 encircles z = 1 once
        // clockwise, so the difference is minus the residue e.
        let inner = RaySegmentContour::new(c64(0.5, 0.0), std::f64::consts::FRAC_PI_3, 14.0, 10, 14);
        let outer = RaySegmentContour::new(c64(1.5, 0.0), std::f64::consts::FRAC_PI_3, 14.0, 10, 14);
        let f = |z: Complex64| (z * z * z).exp() / (z - 1.0);
        let sum = |c: &RaySegmentContour| -> Complex64 {
            c.nodes_weights().iter().map(|n| n.weight * f(n.point)).sum()
        };
        let diff = sum(&inner) - sum(&outer);
        let expect = Complex64::new(-(1.0f64.exp()), 0.0);
        assert!((diff - expect).norm() < 1e-9, "diff {diff} expect {expect}");
    }

    #[test]
    fn ray_decay_check() {
        // at s_max = 8 the ray ends sit at Re z = 4.5 and |z| = 8.2
        let c = RaySegmentContour::new(c64(0.5, 0.0), std::f64::consts::FRAC_PI_3, 8.0, 8, 12);
        c.check_decay(|z| (-(z.re)).exp(), 1e-3).unwrap_err();
        c.check_decay(|z| (-z.norm()).exp(), 1e-3).unwrap();
    }
}

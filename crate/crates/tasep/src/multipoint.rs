//! Finite-time multi-point distributions: Nystrom discretization of the
//! operator product on the two nested contour families, the equivalent series
//! expansion, and the outer z-circle integrals assembling joint probabilities.

use crate::quadrature::{dmu_prefactor, NestedCircleSystem, RingKind};
use crate::symfunc::{kess, kess_flat_reduced, ParticleConfig};
use crate::{Complex64, Error, ProbabilityResult, Provenance, Result};
use nalgebra::DMatrix;

/// One observation: particle index `k`, threshold site `a`, time `t`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Observation {
    pub k: usize,
    pub a: i64,
    pub t: f64,
}

/// Observations sorted by time; `(k, t)` pairs must be distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    obs: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(mut obs: Vec<Observation>) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::Invalid("observation set must be nonempty".into()));
        }
        obs.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        for o in &obs {
            if o.k < 1 {
                return Err(Error::Invalid("particle index k must be >= 1".into()));
            }
            if !(o.t >= 0.0) {
                return Err(Error::Invalid("times must be nonnegative".into()));
            }
        }
        for i in 0..obs.len() {
            for j in i + 1..obs.len() {
                if obs[i].k == obs[j].k && obs[i].t == obs[j].t {
                    return Err(Error::Invalid(format!(
                        "duplicate observation point (k={}, t={})",
                        obs[i].k, obs[i].t
                    )));
                }
            }
        }
        Ok(Self { obs })
    }

    pub fn single(k: usize, a: i64, t: f64) -> Self {
        Self::new(vec![Observation { k, a, t }]).unwrap()
    }

    pub fn m(&self) -> usize {
        self.obs.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    /// 1-based accessor.
    pub fn at(&self, l: usize) -> &Observation {
        &self.obs[l - 1]
    }

    pub fn max_k(&self) -> usize {
        self.obs.iter().map(|o| o.k).max().unwrap()
    }

    pub fn max_ak(&self) -> i64 {
        self.obs.iter().map(|o| o.a + o.k as i64).max().unwrap()
    }

    pub fn min_ak(&self) -> i64 {
        self.obs.iter().map(|o| o.a + o.k as i64).min().unwrap()
    }

    pub fn validate_for(&self, n: usize) -> Result<()> {
        if self.max_k() > n {
            return Err(Error::Invalid(format!(
                "observation references particle {} but the configuration has {n}",
                self.max_k()
            )));
        }
        Ok(())
    }

    /// Relabeling `(a, k) -> (a - 2c, k + c)`, which leaves the infinite flat
    /// initial condition invariant.
    pub fn translated(&self, c: i64) -> Result<Self> {
        let obs = self
            .obs
            .iter()
            .map(|o| {
                let k = o.k as i64 + c;
                if k < 1 {
                    return Err(Error::Invalid("translation makes a particle index < 1".into()));
                }
                Ok(Observation { k: k as usize, a: o.a - 2 * c, t: o.t })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(obs)
    }

    /// Removes the 1-based observation `l`.
    pub fn without(&self, l: usize) -> Result<Self> {
        let mut obs = self.obs.clone();
        obs.remove(l - 1);
        Self::new(obs)
    }
}

/// The z-variables of the outer integrals, none equal to 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ZVector {
    values: Vec<Complex64>,
}

impl ZVector {
    pub fn new(values: Vec<Complex64>) -> Result<Self> {
        for z in &values {
            if z.norm() < 1e-14 || (z - Complex64::new(1.0, 0.0)).norm() < 1e-14 {
                return Err(Error::Invalid(format!("z value {z} too close to 0 or 1")));
            }
        }
        Ok(Self { values })
    }

    pub fn empty() -> Self {
        Self { values: Vec::new() }
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
}

/// Contour radii and node counts for one evaluation.
#[derive(Debug, Clone)]
pub struct ContourPlan {
    pub system: NestedCircleSystem,
    /// Radii of the outer z-circles (m-1 entries; may be empty for m = 1).
    pub z_radii: Vec<f64>,
    pub z_nodes: usize,
    /// Double all node counts once and report the difference as the error
    /// estimate of the probability.
    pub error_probe: bool,
}

impl ContourPlan {
    /// Radius ladder in [0.08, 0.42] about -1 and 0, |z| = 0.5, 64 nodes.
    pub fn default_for(m: usize) -> Result<Self> {
        Self::with_nodes(m, 64, 64)
    }

    pub fn with_nodes(m: usize, contour_nodes: usize, z_nodes: usize) -> Result<Self> {
        Self::with_radii(m, 0.08, 0.42, contour_nodes, z_nodes)
    }

    /// Same ladder but with radii in [r_min, r_max]; useful near the scaling
    /// regime where the kernels concentrate near -1/2.
    pub fn with_radii(
        m: usize,
        r_min: f64,
        r_max: f64,
        contour_nodes: usize,
        z_nodes: usize,
    ) -> Result<Self> {
        Ok(Self {
            system: NestedCircleSystem::symmetric(m, r_min, r_max, contour_nodes)?,
            z_radii: vec![0.5; m.saturating_sub(1)],
            z_nodes,
            error_probe: true,
        })
    }

    pub fn m(&self) -> usize {
        self.system.m
    }

    fn doubled(&self) -> Self {
        let mut p = self.clone();
        for c in p.system.left.iter_mut().chain(p.system.right.iter_mut()) {
            c.nodes *= 2;
        }
        p.z_nodes *= 2;
        p
    }

    fn reduced_for(&self, m: usize) -> Result<Self> {
        Ok(Self {
            system: NestedCircleSystem::symmetric(
                m,
                self.system.left.last().unwrap().radius,
                self.system.left.first().unwrap().radius,
                self.system.left[0].nodes,
            )?,
            z_radii: vec![0.5; m.saturating_sub(1)],
            z_nodes: self.z_nodes,
            error_probe: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// The ratio `f_l = F_l/F_{l-1}` on the left region and `F_{l-1}/F_l` on the
/// right region, with `F_l(w) = w^{k_l} (w+1)^{-a_l-k_l} e^{t_l w}`, `F_0 = 1`.
pub fn f_level(l: usize, w: Complex64, side: Side, obs: &ObservationSet) -> Result<Complex64> {
    f_level_opts(l, w, side, obs, false, None)
}

/// `normalize` divides each `F_l` by `F_l(-1/2)`, which leaves the Fredholm
/// determinant unchanged but keeps kernel entries near unit scale for large
/// times. `scales` optionally multiplies each `F_l` by a caller constant,
/// another determinant-preserving change.
fn f_level_opts(
    l: usize,
    w: Complex64,
    side: Side,
    obs: &ObservationSet,
    normalize: bool,
    scales: Option<&[Complex64]>,
) -> Result<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    if side == Side::Right && w.norm() < 1e-14 {
        return Err(Error::Degenerate("f_level pole at w = 0".into()));
    }
    if side == Side::Left && (w + one).norm() < 1e-14 {
        return Err(Error::Degenerate("f_level pole at w = -1".into()));
    }
    let cur = obs.at(l);
    let (dk, dak, dt) = if l == 1 {
        (cur.k as i64, cur.a + cur.k as i64, cur.t)
    } else {
        let prev = obs.at(l - 1);
        (
            cur.k as i64 - prev.k as i64,
            (cur.a + cur.k as i64) - (prev.a + prev.k as i64),
            cur.t - prev.t,
        )
    };
    // F_{l-1}(-1/2) / F_l(-1/2)
    let norm_factor = if normalize {
        (-0.5f64).powi(-dk as i32) * 0.5f64.powi(dak as i32) * (dt / 2.0).exp()
    } else {
        1.0
    };
    let scale_factor = match scales {
        Some(c) => {
            let prev = if l == 1 { one } else { c[l - 2] };
            c[l - 1] / prev
        }
        None => one,
    };
    let val = match side {
        Side::Left => {
            w.powi(dk as i32) * (w + one).powi(-dak as i32) * (dt * w).exp()
                * norm_factor
                * scale_factor
        }
        Side::Right => {
            w.powi(-dk as i32) * (w + one).powi(dak as i32) * (-dt * w).exp()
                / norm_factor
                / scale_factor
        }
    };
    if !val.re.is_finite() || !val.im.is_finite() {
        return Err(Error::NumericalDomain(format!("f_level non-finite at w = {w}")));
    }
    Ok(val)
}

/// The level-1 kernel coupling the two middle contours.
pub enum EssKernel<'a> {
    /// General initial condition through `symfunc::kess`.
    Config(&'a ParticleConfig),
    /// Step shortcut `1/(v-u)`.
    Step,
    /// Flat reduced kernel `(2v+1)/((v-u)(u+v+1))`.
    FlatReduced,
    /// Flat delta kernel: pairs each level-1 right node `v` with the exact
    /// reflection `-1-v` on the left.
    FlatDelta,
    /// Arbitrary kernel `(v, u) -> value`.
    Custom(&'a dyn Fn(Complex64, Complex64) -> Result<Complex64>),
}

impl<'a> EssKernel<'a> {
    fn eval(&self, v: Complex64, u: Complex64) -> Result<Complex64> {
        match self {
            EssKernel::Config(y) => kess(y, v, u),
            EssKernel::Step => Ok(1.0 / (v - u)),
            EssKernel::FlatReduced => kess_flat_reduced(v, u),
            EssKernel::FlatDelta => {
                Err(Error::Invalid("delta kernel has no pointwise value".into()))
            }
            EssKernel::Custom(f) => f(v, u),
        }
    }

    fn is_delta(&self) -> bool {
        matches!(self, EssKernel::FlatDelta)
    }
}

/// Nesting order of one contour family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FamilyLayout {
    /// Levels `m..2` outside, level 1 in the middle, levels `2..m` inside.
    #[default]
    Standard,
    /// Levels `1..m-1` outside, level `m` in the middle, levels `m-1..1`
    /// inside, with the measure adjusted accordingly.
    Reversed,
}

/// Evaluation options for the Fredholm determinant.
pub struct DyOptions<'a> {
    pub kernel: EssKernel<'a>,
    pub normalize: bool,
    /// Optional constants multiplying each `F_l`.
    pub scales: Option<Vec<Complex64>>,
    pub left_layout: FamilyLayout,
    pub right_layout: FamilyLayout,
}

impl<'a> DyOptions<'a> {
    pub fn for_config(y: &'a ParticleConfig) -> Self {
        Self::with_kernel(EssKernel::Config(y))
    }

    pub fn with_kernel(kernel: EssKernel<'a>) -> Self {
        Self {
            kernel,
            normalize: true,
            scales: None,
            left_layout: FamilyLayout::Standard,
            right_layout: FamilyLayout::Standard,
        }
    }
}

struct ENode {
    point: Complex64,
    level: usize,
    ring: RingKind,
    /// Index into the z-vector for the measure prefactor, if any.
    z_index: Option<usize>,
    /// Contour weight `dw/(2*pi*i)` without the measure prefactor.
    circle_w: Complex64,
    f: Complex64,
}

/// Precomputed Nystrom data. Everything z-independent is assembled once, so
/// the outer z-integrals only rescale columns and redo the determinant.
pub struct DyEvaluator {
    m: usize,
    s1: Vec<ENode>,
    s2: Vec<ENode>,
    k1_raw: DMatrix<Complex64>,
    ky_raw: DMatrix<Complex64>,
    delta: bool,
}

pub(crate) fn k1_present(i: usize, j: usize) -> bool {
    j == i || (i % 2 == 0 && j + 1 == i) || (i % 2 == 1 && j == i + 1)
}

pub(crate) fn ky_present(j: usize, i: usize) -> bool {
    if i == 1 {
        j == 1
    } else {
        j == i || (j % 2 == 0 && i == j + 1) || (j % 2 == 1 && i + 1 == j)
    }
}

pub(crate) fn q1_factor(j: usize, m: usize, z: &[Complex64]) -> Complex64 {
    let one = Complex64::new(1.0, 0.0);
    if j % 2 == 0 {
        one - one / z[j - 2]
    } else if j < m {
        one - z[j - 1]
    } else {
        one
    }
}

pub(crate) fn q2_factor(i: usize, m: usize, z: &[Complex64]) -> Complex64 {
    let one = Complex64::new(1.0, 0.0);
    if i == 1 {
        one
    } else if i % 2 == 0 {
        if i < m {
            one - z[i - 1]
        } else {
            one
        }
    } else {
        one - one / z[i - 2]
    }
}

impl DyEvaluator {
    pub fn new(obs: &ObservationSet, plan: &ContourPlan, opts: &DyOptions) -> Result<Self> {
        let m = obs.m();
        if plan.m() != m {
            return Err(Error::Invalid(format!(
                "plan built for m = {} but observation set has m = {m}",
                plan.m()
            )));
        }
        plan.system.validate()?;
        let delta = opts.kernel.is_delta();

        let mut s1: Vec<ENode> = Vec::new();
        let mut s2: Vec<ENode> = Vec::new();
        let mut s1_level1_start = usize::MAX;
        let mut s2_level1_start = usize::MAX;

        for (side, layout) in [(Side::Left, opts.left_layout), (Side::Right, opts.right_layout)] {
            let circles = match side {
                Side::Left => &plan.system.left,
                Side::Right => &plan.system.right,
            };
            // (level, ring kind, z index, circle index in the out-to-in list)
            let mut rings: Vec<(usize, RingKind, Option<usize>, usize)> = Vec::new();
            match layout {
                FamilyLayout::Standard => {
                    rings.push((1, RingKind::Level1, None, plan.system.middle_index()));
                    for level in 2..=m {
                        let (out, inn) = plan.system.ring_indices(level);
                        rings.push((level, RingKind::Outer, Some(level - 2), out));
                        rings.push((level, RingKind::Inner, Some(level - 2), inn));
                    }
                }
                FamilyLayout::Reversed => {
                    rings.push((m, RingKind::Level1, None, plan.system.middle_index()));
                    for level in 1..m {
                        // the measure swaps: the outer ring carries 1/(1-z_l)
                        rings.push((level, RingKind::Inner, Some(level - 1), level - 1));
                        rings.push((level, RingKind::Outer, Some(level - 1), 2 * m - 1 - level));
                    }
                }
            }
            for (level, ring, z_index, ci) in rings {
                let in_s1 = (level % 2 == 1) == (side == Side::Left);
                let circle = &circles[ci];
                if level == 1 && ring == RingKind::Level1 {
                    if in_s1 {
                        s1_level1_start = s1.len();
                    } else {
                        s2_level1_start = s2.len();
                    }
                }
                for j in 0..circle.nodes {
                    let (point, circle_w) = if delta && level == 1 && side == Side::Left {
                        // exact reflection of the right middle circle
                        let rc = &plan.system.right[plan.system.middle_index()];
                        if (rc.radius - circle.radius).abs() > 1e-14 || rc.nodes != circle.nodes {
                            return Err(Error::Invalid(
                                "delta kernel needs matching middle-circle radii and node counts"
                                    .into(),
                            ));
                        }
                        (-1.0 - rc.point(j), -rc.weight(j))
                    } else {
                        (circle.point(j), circle.weight(j))
                    };
                    let f = f_level_opts(
                        level,
                        point,
                        side,
                        obs,
                        opts.normalize,
                        opts.scales.as_deref(),
                    )?;
                    let node = ENode { point, level, ring, z_index, circle_w, f };
                    if in_s1 {
                        s1.push(node);
                    } else {
                        s2.push(node);
                    }
                }
            }
        }

        // raw kernels without measure weights and z factors
        let n1 = s1.len();
        let n2 = s2.len();
        let mut k1_raw = DMatrix::<Complex64>::zeros(n1, n2);
        for (p, row) in s1.iter().enumerate() {
            for (q, col) in s2.iter().enumerate() {
                if k1_present(row.level, col.level) {
                    let d = row.point - col.point;
                    if d.norm() < 1e-14 {
                        return Err(Error::Degenerate("coincident nodes across spaces".into()));
                    }
                    k1_raw[(p, q)] = row.f / d;
                }
            }
        }
        let mut ky_raw = DMatrix::<Complex64>::zeros(n2, n1);
        for (q, row) in s2.iter().enumerate() {
            for (p, col) in s1.iter().enumerate() {
                if !ky_present(row.level, col.level) {
                    continue;
                }
                if col.level == 1 && row.level == 1 {
                    if delta {
                        // node-matched selection column; no quadrature weight
                        if p == s1_level1_start + (q - s2_level1_start) {
                            ky_raw[(q, p)] = row.f;
                        }
                    } else {
                        ky_raw[(q, p)] = row.f * opts.kernel.eval(row.point, col.point)?;
                    }
                } else {
                    let d = row.point - col.point;
                    if d.norm() < 1e-14 {
                        return Err(Error::Degenerate("coincident nodes across spaces".into()));
                    }
                    ky_raw[(q, p)] = row.f / d;
                }
            }
        }
        Ok(Self { m, s1, s2, k1_raw, ky_raw, delta })
    }

    fn node_weight(node: &ENode, z: &[Complex64]) -> Complex64 {
        let pre = match node.z_index {
            Some(i) => dmu_prefactor(node.ring, z[i]),
            None => Complex64::new(1.0, 0.0),
        };
        node.circle_w * pre
    }

    /// `det(I - K1 KY)` at the given z-point.
    pub fn eval(&self, z: &[Complex64]) -> Result<Complex64> {
        if z.len() + 1 != self.m {
            return Err(Error::Invalid(format!(
                "expected {} z values, got {}",
                self.m - 1,
                z.len()
            )));
        }
        let n1 = self.s1.len();
        let n2 = self.s2.len();
        let mut k1 = self.k1_raw.clone();
        for (q, col) in self.s2.iter().enumerate() {
            let w = Self::node_weight(col, z) * q1_factor(col.level, self.m, z);
            for p in 0..n1 {
                k1[(p, q)] *= w;
            }
        }
        let mut ky = self.ky_raw.clone();
        for (p, col) in self.s1.iter().enumerate() {
            let q2 = q2_factor(col.level, self.m, z);
            let w = if self.delta && col.level == 1 {
                q2
            } else {
                Self::node_weight(col, z) * q2
            };
            for q in 0..n2 {
                ky[(q, p)] *= w;
            }
        }
        let prod = &k1 * &ky;
        let mut a = DMatrix::<Complex64>::identity(n1, n1);
        a -= prod;
        let det = a.lu().determinant();
        if !det.re.is_finite() || !det.im.is_finite() {
            return Err(Error::NumericalDomain("determinant non-finite".into()));
        }
        Ok(det)
    }
}

/// Fredholm-determinant value of the multi-point generating function at `z`.
pub fn dy_fredholm(
    y: &ParticleConfig,
    obs: &ObservationSet,
    z: &ZVector,
    plan: &ContourPlan,
) -> Result<Complex64> {
    obs.validate_for(y.n())?;
    let opts = DyOptions::for_config(y);
    DyEvaluator::new(obs, plan, &opts)?.eval(z.values())
}

pub fn dy_fredholm_opts(
    obs: &ObservationSet,
    z: &ZVector,
    plan: &ContourPlan,
    opts: &DyOptions,
) -> Result<Complex64> {
    DyEvaluator::new(obs, plan, opts)?.eval(z.values())
}

// ---------------------------------------------------------------------------
// series expansion route
// ---------------------------------------------------------------------------

fn delta_prod(w: &[Complex64]) -> Complex64 {
    let mut acc = Complex64::new(1.0, 0.0);
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            acc *= w[j] - w[i];
        }
    }
    acc
}

fn cross_prod(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let mut acc = Complex64::new(1.0, 0.0);
    for &x in a {
        for &y in b {
            acc *= x - y;
        }
    }
    acc
}

/// Truncated series-expansion value of the same function; a bounded-cost
/// cross-check for the Fredholm route, exact once `n_cap >= N`.
pub fn dy_series(
    y: &ParticleConfig,
    obs: &ObservationSet,
    z: &ZVector,
    plan: &ContourPlan,
    n_cap: usize,
) -> Result<Complex64> {
    obs.validate_for(y.n())?;
    let m = obs.m();
    let cap = n_cap.min(y.n());
    if 2 * cap * m > 8 {
        return Err(Error::Unsupported(format!(
            "series quadrature dimension 2*{cap}*{m} exceeds the cost guard of 8"
        )));
    }
    let zv = z.values();

    // node menus per level and side: (point, weight with measure prefactor, f)
    let build_menu = |side: Side| -> Result<Vec<Vec<(Complex64, Complex64, Complex64)>>> {
        let circles = match side {
            Side::Left => &plan.system.left,
            Side::Right => &plan.system.right,
        };
        let mut menus = Vec::with_capacity(m);
        for level in 1..=m {
            let mut menu = Vec::new();
            if level == 1 {
                let c = &circles[plan.system.middle_index()];
                for j in 0..c.nodes {
                    let f = f_level_opts(level, c.point(j), side, obs, true, None)?;
                    menu.push((c.point(j), c.weight(j), f));
                }
            } else {
                let (out, inn) = plan.system.ring_indices(level);
                for (ci, ring) in [(inn, RingKind::Inner), (out, RingKind::Outer)] {
                    let c = &circles[ci];
                    let pre = dmu_prefactor(ring, zv[level - 2]);
                    for j in 0..c.nodes {
                        let f = f_level_opts(level, c.point(j), side, obs, true, None)?;
                        menu.push((c.point(j), c.weight(j) * pre, f));
                    }
                }
            }
            menus.push(menu);
        }
        Ok(menus)
    };
    let left_menu = build_menu(Side::Left)?;
    let right_menu = build_menu(Side::Right)?;

    let mut total = Complex64::new(0.0, 0.0);
    let mut nvec = vec![0usize; m];
    loop {
        total += series_term(y, obs, zv, &nvec, &left_menu, &right_menu)?;
        let mut l = 0;
        loop {
            if l == m {
                break;
            }
            nvec[l] += 1;
            if nvec[l] <= cap {
                break;
            }
            nvec[l] = 0;
            l += 1;
        }
        if l == m {
            break;
        }
    }
    Ok(total)
}

fn series_term(
    y: &ParticleConfig,
    obs: &ObservationSet,
    z: &[Complex64],
    nvec: &[usize],
    left_menu: &[Vec<(Complex64, Complex64, Complex64)>],
    right_menu: &[Vec<(Complex64, Complex64, Complex64)>],
) -> Result<Complex64> {
    let m = obs.m();
    let one = Complex64::new(1.0, 0.0);
    let dims: usize = nvec.iter().sum::<usize>() * 2;
    if dims == 0 {
        return Ok(one);
    }
    // flattened integration variables: all u's level by level, then all v's
    let mut var_menu: Vec<&[(Complex64, Complex64, Complex64)]> = Vec::new();
    for (l, &nl) in nvec.iter().enumerate() {
        for _ in 0..nl {
            var_menu.push(&left_menu[l]);
        }
    }
    for (l, &nl) in nvec.iter().enumerate() {
        for _ in 0..nl {
            var_menu.push(&right_menu[l]);
        }
    }
    let n1 = nvec[0];
    let sign = if (n1 * (n1 + 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let mut fact2 = 1.0f64;
    for &nl in nvec {
        for k in 1..=nl {
            fact2 *= (k * k) as f64;
        }
    }
    let mut zfac = one;
    for l in 1..m {
        zfac *= (one - z[l - 1]).powi(nvec[l - 1] as i32)
            * (one - one / z[l - 1]).powi(nvec[l] as i32);
    }

    let mut idx = vec![0usize; dims];
    let mut total = Complex64::new(0.0, 0.0);
    let mut u_groups: Vec<Vec<Complex64>> = vec![Vec::new(); m];
    let mut v_groups: Vec<Vec<Complex64>> = vec![Vec::new(); m];
    'grid: loop {
        let mut wq = one;
        let mut fprod = one;
        {
            let mut cursor = 0;
            for (l, &nl) in nvec.iter().enumerate() {
                u_groups[l].clear();
                for _ in 0..nl {
                    let (pt, w, f) = var_menu[cursor][idx[cursor]];
                    u_groups[l].push(pt);
                    wq *= w;
                    fprod *= f;
                    cursor += 1;
                }
            }
            for (l, &nl) in nvec.iter().enumerate() {
                v_groups[l].clear();
                for _ in 0..nl {
                    let (pt, w, f) = var_menu[cursor][idx[cursor]];
                    v_groups[l].push(pt);
                    wq *= w;
                    fprod *= f;
                    cursor += 1;
                }
            }
        }
        // level-1 block folded with its squared Vandermonde factors: the net
        // power is Delta(U1) Delta(V1) det[kess(v_i, u_j)] / Delta(U1; V1),
        // so coincident level-1 nodes contribute zero instead of 0/0
        let mut level1 = one;
        if nvec[0] > 0 {
            let u1 = &u_groups[0];
            let v1 = &v_groups[0];
            let k = DMatrix::from_fn(nvec[0], nvec[0], |i, j| {
                kess(y, v1[i], u1[j]).unwrap_or(Complex64::new(f64::NAN, f64::NAN))
            });
            let detk = k.lu().determinant();
            if !detk.re.is_finite() {
                return Err(Error::NumericalDomain("kess determinant non-finite".into()));
            }
            level1 = delta_prod(u1) * delta_prod(v1) * detk / cross_prod(u1, v1);
        }
        let mut same = one;
        for l in 1..m {
            if nvec[l] == 0 {
                continue;
            }
            let (du, dv) = (delta_prod(&u_groups[l]), delta_prod(&v_groups[l]));
            let cx = cross_prod(&u_groups[l], &v_groups[l]);
            same *= du * du * dv * dv / (cx * cx);
        }
        let mut adj = one;
        for l in 0..m - 1 {
            if nvec[l] == 0 && nvec[l + 1] == 0 {
                continue;
            }
            adj *= cross_prod(&u_groups[l], &v_groups[l + 1])
                * cross_prod(&v_groups[l], &u_groups[l + 1])
                / (cross_prod(&u_groups[l], &u_groups[l + 1])
                    * cross_prod(&v_groups[l], &v_groups[l + 1]));
        }
        total += wq * level1 * same * adj * fprod;

        let mut d = 0;
        loop {
            if d == dims {
                break 'grid;
            }
            idx[d] += 1;
            if idx[d] < var_menu[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
    Ok(total * sign * zfac / fact2)
}

// ---------------------------------------------------------------------------
// probabilities
// ---------------------------------------------------------------------------

fn z_point(radius: f64, j: usize, nodes: usize) -> Complex64 {
    let theta = 2.0 * std::f64::consts::PI * j as f64 / nodes as f64;
    radius * Complex64::new(theta.cos(), theta.sin())
}

fn integrate_over_z(evaluator: &DyEvaluator, radii: &[f64], nodes: usize) -> Result<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    if radii.is_empty() {
        return evaluator.eval(&[]);
    }
    let d = radii.len();
    let total = nodes.pow(d as u32);
    let mut sum = Complex64::new(0.0, 0.0);
    let mut z = vec![Complex64::new(0.0, 0.0); d];
    for flat in 0..total {
        let mut rem = flat;
        for l in 0..d {
            z[l] = z_point(radii[l], rem % nodes, nodes);
            rem /= nodes;
        }
        let mut weight = one;
        for zl in &z {
            weight *= one / (one - zl);
        }
        sum += weight * evaluator.eval(&z)?;
    }
    Ok(sum / total as f64)
}

fn probability_with_kernel(
    obs: &ObservationSet,
    plan: &ContourPlan,
    opts: &DyOptions,
    radii: &[f64],
    sign: f64,
) -> Result<ProbabilityResult> {
    let evaluator = DyEvaluator::new(obs, plan, opts)?;
    let raw = integrate_over_z(&evaluator, radii, plan.z_nodes)? * sign;
    let err = if plan.error_probe {
        let doubled = plan.doubled();
        let ev2 = DyEvaluator::new(obs, &doubled, opts)?;
        let raw2 = integrate_over_z(&ev2, radii, doubled.z_nodes)? * sign;
        (raw2 - raw).norm()
    } else {
        0.0
    };
    Ok(ProbabilityResult::from_raw(raw, err, Provenance::Fredholm))
}

/// `P(all x_{k_l}(t_l) >= a_l)` via the z-circle integrals of the
/// determinant; for `m = 1` the determinant itself is the probability.
pub fn joint_probability(
    y: &ParticleConfig,
    obs: &ObservationSet,
    plan: &ContourPlan,
) -> Result<ProbabilityResult> {
    obs.validate_for(y.n())?;
    let opts = DyOptions::for_config(y);
    probability_with_kernel(obs, plan, &opts, &plan.z_radii, 1.0)
}

/// Mixed-inequality probability: events `x_{k_l}(t_l) < a_l` for `l` in the
/// outside set are realized by pushing those z-circles outside the unit
/// circle and attaching the sign `(-1)^{|I|}`.
pub fn signed_probability(
    y: &ParticleConfig,
    obs: &ObservationSet,
    plan: &ContourPlan,
    outside: &[usize],
) -> Result<ProbabilityResult> {
    obs.validate_for(y.n())?;
    let m = obs.m();
    for &l in outside {
        if l < 1 || l >= m {
            return Err(Error::Invalid(format!("outside index {l} not in 1..={}", m - 1)));
        }
    }
    let mut radii = plan.z_radii.clone();
    for &l in outside {
        radii[l - 1] = 2.0;
    }
    let sign = if outside.len() % 2 == 0 { 1.0 } else { -1.0 };
    let opts = DyOptions::for_config(y);
    probability_with_kernel(obs, plan, &opts, &radii, sign)
}

/// Probability for the infinite flat initial condition via the delta-kernel
/// determinant. The observation set is first translated by
/// `(a, k) -> (a - 2c, k + c)` until `max(a_l + k_l) <= 0`, which leaves the
/// probability unchanged and makes the delta form applicable.
pub fn flat_probability(obs: &ObservationSet, plan: &ContourPlan) -> Result<ProbabilityResult> {
    let c = obs.max_ak().max(0);
    let shifted = obs.translated(c)?;
    let opts = DyOptions::with_kernel(EssKernel::FlatDelta);
    probability_with_kernel(&shifted, plan, &opts, &plan.z_radii, 1.0)
}

/// Height-function coordinates to particle coordinates:
/// `H(n, t) >= a  <=>  x_{(a-n)/2}(t) >= n`, requiring matching parity.
pub fn height_to_particle(site: i64, height: i64) -> Result<(i64, i64)> {
    if (height - site).rem_euclid(2) != 0 {
        return Err(Error::Invalid(format!(
            "height {height} and site {site} must have the same parity"
        )));
    }
    Ok(((height - site) / 2, site))
}

// ---------------------------------------------------------------------------
// identity checks
// ---------------------------------------------------------------------------

fn weighted_z_circle(
    evaluator: &DyEvaluator,
    others: &[Complex64],
    s: usize,
    radius: f64,
    nodes: usize,
) -> Result<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    let mut sum = Complex64::new(0.0, 0.0);
    for j in 0..nodes {
        let zs = z_point(radius, j, nodes);
        let mut z = others.to_vec();
        z.insert(s - 1, zs);
        sum += evaluator.eval(&z)? / (one - zs);
    }
    Ok(sum / nodes as f64)
}

/// Residual of the z-reduction identity: integrating `(1-z_s)^{-1} D` over an
/// inside circle minus an outside circle in `z_s` removes observation `s`.
pub fn reduction_identity_residual(
    y: &ParticleConfig,
    obs: &ObservationSet,
    plan: &ContourPlan,
    s: usize,
    others: &[Complex64],
) -> Result<f64> {
    let m = obs.m();
    if s < 1 || s > m - 1 {
        return Err(Error::Invalid(format!("s = {s} not in 1..={}", m - 1)));
    }
    if others.len() != m - 2 {
        return Err(Error::Invalid("need fixed z values for the other levels".into()));
    }
    let opts = DyOptions::for_config(y);
    let evaluator = DyEvaluator::new(obs, plan, &opts)?;
    let lhs = weighted_z_circle(&evaluator, others, s, 0.5, plan.z_nodes)?
        - weighted_z_circle(&evaluator, others, s, 2.0, plan.z_nodes)?;

    let reduced = DyEvaluator::new(&obs.without(s)?, &plan.reduced_for(m - 1)?, &opts)?;
    let rhs = reduced.eval(others)?;
    Ok((lhs - rhs).norm())
}

/// Residual of the inside-circle-only reduction, valid when observation `s`
/// attains `min(a_l + k_l) < y_N + N` (that event is almost sure). `s = m`
/// integrates out the last z-variable.
pub fn reduction_inside_residual(
    y: &ParticleConfig,
    obs: &ObservationSet,
    plan: &ContourPlan,
    s: usize,
    others: &[Complex64],
) -> Result<f64> {
    let m = obs.m();
    let o = obs.at(s);
    let ak = o.a + o.k as i64;
    if ak != obs.min_ak() || ak >= y.base_exponent() {
        return Err(Error::Invalid(
            "inside-only reduction needs a_s + k_s = min(a_l + k_l) < y_N + N".into(),
        ));
    }
    if others.len() != m - 2 {
        return Err(Error::Invalid("need fixed z values for the other levels".into()));
    }
    let opts = DyOptions::for_config(y);
    let evaluator = DyEvaluator::new(obs, plan, &opts)?;
    let z_slot = if s == m { m - 1 } else { s };
    let lhs = weighted_z_circle(&evaluator, others, z_slot, 0.5, plan.z_nodes)?;

    let reduced = DyEvaluator::new(&obs.without(s)?, &plan.reduced_for(m - 1)?, &opts)?;
    let rhs = reduced.eval(others)?;
    Ok((lhs - rhs).norm())
}

/// Residuals of the structural invariances of the determinant.
#[derive(Debug, Clone, serde::Serialize)]
pub struct InvarianceReport {
    /// Reversed nesting order of the left family with the adjusted measure.
    pub reorder_left: f64,
    /// Reversed nesting order of the right family.
    pub reorder_right: f64,
    /// Random rescaling of each `F_l`.
    pub scaling: f64,
    /// Global shift of all `y_i` and `a_l`.
    pub shift: f64,
    /// Adding a null kernel `v^{max k} g(u)` to the level-1 kernel.
    pub null_kernel: f64,
}

impl InvarianceReport {
    pub fn max_residual(&self) -> f64 {
        self.reorder_left
            .max(self.reorder_right)
            .max(self.scaling)
            .max(self.shift)
            .max(self.null_kernel)
    }
}

pub fn invariance_suite(
    y: &ParticleConfig,
    obs: &ObservationSet,
    plan: &ContourPlan,
    z: &ZVector,
) -> Result<InvarianceReport> {
    obs.validate_for(y.n())?;
    let base = dy_fredholm(y, obs, z, plan)?;
    let scale_ref = base.norm().max(1.0);

    let mut opts = DyOptions::for_config(y);
    opts.left_layout = FamilyLayout::Reversed;
    let reorder_left = (dy_fredholm_opts(obs, z, plan, &opts)? - base).norm() / scale_ref;

    let mut opts = DyOptions::for_config(y);
    opts.right_layout = FamilyLayout::Reversed;
    let reorder_right = (dy_fredholm_opts(obs, z, plan, &opts)? - base).norm() / scale_ref;

    let mut opts = DyOptions::for_config(y);
    opts.scales = Some(
        (0..obs.m())
            .map(|i| Complex64::new(0.6 + 0.37 * i as f64, 0.21 - 0.11 * i as f64))
            .collect(),
    );
    let scaling = (dy_fredholm_opts(obs, z, plan, &opts)? - base).norm() / scale_ref;

    let shift_c = 3i64;
    let y_shift = y.shifted(shift_c);
    let obs_shift = ObservationSet::new(
        obs.observations()
            .iter()
            .map(|o| Observation { k: o.k, a: o.a + shift_c, t: o.t })
            .collect(),
    )?;
    let shift = (dy_fredholm(&y_shift, &obs_shift, z, plan)? - base).norm() / scale_ref;

    let max_k = obs.max_k() as i32;
    let null_fn = move |v: Complex64, u: Complex64| -> Result<Complex64> {
        Ok(kess(y, v, u)? + v.powi(max_k) * u.exp())
    };
    let opts = DyOptions::with_kernel(EssKernel::Custom(&null_fn));
    let null_kernel = (dy_fredholm_opts(obs, z, plan, &opts)? - base).norm() / scale_ref;

    Ok(InvarianceReport { reorder_left, reorder_right, scaling, shift, null_kernel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{poisson_joint, poisson_tail};

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn observation_set_validation() {
        assert!(ObservationSet::new(vec![]).is_err());
        let dup = vec![Observation { k: 1, a: 0, t: 1.0 }, Observation { k: 1, a: 2, t: 1.0 }];
        assert!(ObservationSet::new(dup).is_err());
        // equal times with distinct particles are allowed
        let ok = vec![Observation { k: 1, a: 0, t: 1.0 }, Observation { k: 2, a: 0, t: 1.0 }];
        assert!(ObservationSet::new(ok).is_ok());
        let o = ObservationSet::new(vec![
            Observation { k: 1, a: 1, t: 2.0 },
            Observation { k: 1, a: 0, t: 1.0 },
        ])
        .unwrap();
        assert_eq!(o.at(1).t, 1.0);
    }

    #[test]
    fn zvector_rejects_poles() {
        assert!(ZVector::new(vec![c64(1.0, 0.0)]).is_err());
        assert!(ZVector::new(vec![c64(0.0, 0.0)]).is_err());
        assert!(ZVector::new(vec![c64(0.5, 0.2)]).is_ok());
    }

    #[test]
    fn f_level_examples() {
        let obs = ObservationSet::new(vec![
            Observation { k: 1, a: 0, t: 1.0 },
            Observation { k: 2, a: 1, t: 2.0 },
        ])
        .unwrap();
        // level 1 on the right: v^{-k1} (v+1)^{a1+k1} e^{-t1 v}
        let v = c64(0.3, 0.1);
        let f1 = f_level(1, v, Side::Right, &obs).unwrap();
        let expect = v.powi(-1) * (v + 1.0).powi(1) * (-v).exp();
        assert!((f1 - expect).norm() < 1e-14);

        // telescoping on the left: f1 f2 = F2
        let u = c64(-1.2, 0.3);
        let f1l = f_level(1, u, Side::Left, &obs).unwrap();
        let f2l = f_level(2, u, Side::Left, &obs).unwrap();
        let big_f2 = u.powi(2) * (u + 1.0).powi(-3) * (2.0 * u).exp();
        assert!((f1l * f2l - big_f2).norm() < 1e-13 * big_f2.norm());
    }

    #[test]
    fn one_point_single_particle_is_poisson() {
        // D itself is the probability when m = 1
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::single(1, 0, 1.0);
        let plan = ContourPlan::default_for(1).unwrap();
        let d = dy_fredholm(&y, &obs, &ZVector::empty(), &plan).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        assert!((d - c64(expect, 0.0)).norm() < 1e-12, "{d} vs {expect}");
    }

    #[test]
    fn one_point_poisson_grid() {
        let y = ParticleConfig::step(1);
        let plan = ContourPlan::default_for(1).unwrap();
        for t in [0.5, 1.0, 2.0] {
            for a in [-1i64, 0, 2] {
                let obs = ObservationSet::single(1, a, t);
                let d = dy_fredholm(&y, &obs, &ZVector::empty(), &plan).unwrap();
                let expect = poisson_tail(t, a + 1);
                assert!(
                    (d.re - expect).abs() < 1e-10 && d.im.abs() < 1e-12,
                    "t={t} a={a}: {d} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn two_time_single_particle_matches_poisson_joint() {
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::new(vec![
            Observation { k: 1, a: 0, t: 1.0 },
            Observation { k: 1, a: 1, t: 2.0 },
        ])
        .unwrap();
        let mut plan = ContourPlan::with_nodes(2, 32, 32).unwrap();
        plan.error_probe = false;
        let p = joint_probability(&y, &obs, &plan).unwrap();
        let expect = poisson_joint(&[1, 2], &[1.0, 2.0]).unwrap();
        assert!((p.value - expect).abs() < 1e-8, "{} vs {expect}", p.value);
        assert!(p.imag_residue < 1e-9);
    }

    #[test]
    fn series_matches_fredholm_single_particle() {
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::single(1, 0, 1.0);
        let plan = ContourPlan::with_nodes(1, 32, 16).unwrap();
        let series = dy_series(&y, &obs, &ZVector::empty(), &plan, 1).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        assert!((series - c64(expect, 0.0)).norm() < 1e-8, "{series} vs {expect}");
    }

    #[test]
    fn series_cost_guard() {
        let y = ParticleConfig::step(3);
        let obs = ObservationSet::new(vec![
            Observation { k: 1, a: 0, t: 1.0 },
            Observation { k: 2, a: 0, t: 2.0 },
        ])
        .unwrap();
        let plan = ContourPlan::with_nodes(2, 32, 16).unwrap();
        assert!(matches!(
            dy_series(&y, &obs, &ZVector::new(vec![c64(0.5, 0.0)]).unwrap(), &plan, 3),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn height_to_particle_bijection() {
        assert_eq!(height_to_particle(0, 2).unwrap(), (1, 0));
        assert_eq!(height_to_particle(-2, 0).unwrap(), (1, -2));
        assert!(height_to_particle(0, 1).is_err());
    }

    #[test]
    fn flat_delta_requires_matching_plan() {
        let obs = ObservationSet::single(1, -1, 1.0);
        let mut plan = ContourPlan::default_for(1).unwrap();
        plan.system.left[0].radius *= 1.01;
        let opts = DyOptions::with_kernel(EssKernel::FlatDelta);
        assert!(DyEvaluator::new(&obs, &plan, &opts).is_err());
    }

    #[test]
    fn flat_delta_matches_general_kernel_m1() {
        // admissible parameters: max(a+k) <= 0 and k <= N
        let y = ParticleConfig::flat(2);
        let obs = ObservationSet::single(2, -2, 1.0);
        let plan = ContourPlan::default_for(1).unwrap();
        let general = dy_fredholm(&y, &obs, &ZVector::empty(), &plan).unwrap();
        let opts = DyOptions::with_kernel(EssKernel::FlatDelta);
        let delta = dy_fredholm_opts(&obs, &ZVector::empty(), &plan, &opts).unwrap();
        assert!((general - delta).norm() < 1e-8, "general {general} vs delta {delta}");
    }

    #[test]
    fn flat_probability_matches_exact_chain() {
        use crate::simulate::ctmc_exact;
        let plan = ContourPlan::default_for(1).unwrap();
        // threshold below the start position: the sure event
        let sure = flat_probability(&ObservationSet::single(1, -2, 1.0), &plan).unwrap();
        assert!((sure.value - 1.0).abs() < 1e-9, "{}", sure.value);

        // a blocked second particle; the finite chain with one extra particle
        // already carries the full infinite-flat law for these parameters
        let obs = ObservationSet::single(2, -3, 1.0);
        let delta_route = flat_probability(&obs, &plan).unwrap();
        let chain = ctmc_exact(&ParticleConfig::flat(3), &obs, 1e-8).unwrap();
        assert!(
            (delta_route.value - chain.value).abs() < 1e-5,
            "delta {} vs chain {}",
            delta_route.value,
            chain.value
        );
    }

    #[test]
    fn probability_monotone_in_threshold() {
        let y = ParticleConfig::step(2);
        let plan = ContourPlan::default_for(1).unwrap();
        let values: Vec<f64> = [-2i64, 0, 2]
            .iter()
            .map(|&a| {
                joint_probability(&y, &ObservationSet::single(2, a, 1.5), &plan).unwrap().value
            })
            .collect();
        assert!(values[0] >= values[1] && values[1] >= values[2], "not monotone: {values:?}");
        assert!(values.iter().all(|v| (-1e-6..=1.0 + 1e-6).contains(v)));
    }

    #[test]
    fn flat_translation_invariance() {
        let obs = ObservationSet::single(1, -2, 1.0);
        let plan = ContourPlan::default_for(1).unwrap();
        let a = flat_probability(&obs, &plan).unwrap();
        let b = flat_probability(&obs.translated(2).unwrap(), &plan).unwrap();
        assert!((a.value - b.value).abs() < 1e-10);
    }
}

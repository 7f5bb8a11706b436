//! Toy-scale Cauchy-type summations over nested root sets of an analytic
//! function `q`, and their `z_0 -> 0` limit as a nested contour integral.
//! The limit is independent of `q` as long as `q` dominates the summand's
//! poles at the origin; both facts are exercised numerically here, at small
//! dimension, as an executable witness for the analytic-continuation step
//! used by the ring formulas.

use crate::periodic::{bethe_roots, PeriodicParams};
use crate::quadrature::CircleContour;
use crate::{Complex64, Error, Result};

/// `C(W; W') = Delta(W) Delta(W') / Delta(W; W')`, empty products being 1.
pub fn cauchy_factor(w: &[Complex64], wp: &[Complex64]) -> Result<Complex64> {
    let mut num = Complex64::new(1.0, 0.0);
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            num *= w[j] - w[i];
        }
    }
    for i in 0..wp.len() {
        for j in i + 1..wp.len() {
            num *= wp[j] - wp[i];
        }
    }
    let mut den = Complex64::new(1.0, 0.0);
    for &x in w {
        for &y in wp {
            let d = x - y;
            if d.norm() == 0.0 {
                return Err(Error::Degenerate("cauchy_factor pole: coordinates collide".into()));
            }
            den *= d;
        }
    }
    Ok(num / den)
}

/// Index sets selecting which coordinates couple across consecutive levels.
#[derive(Debug, Clone)]
pub struct ChainSpec {
    pub sizes: Vec<usize>,
    /// `I^(l)` as 0-based indices into level `l`, for `l = 1..m-1`.
    pub i_sets: Vec<Vec<usize>>,
    /// `J^(l+1)` as 0-based indices into level `l+1`.
    pub j_sets: Vec<Vec<usize>>,
}

impl ChainSpec {
    pub fn new(
        sizes: Vec<usize>,
        i_sets: Vec<Vec<usize>>,
        j_sets: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let m = sizes.len();
        if m == 0 {
            return Err(Error::Invalid("need at least one level".into()));
        }
        if i_sets.len() != m - 1 || j_sets.len() != m - 1 {
            return Err(Error::Invalid("need m-1 index set pairs".into()));
        }
        for l in 0..m - 1 {
            if i_sets[l].iter().any(|&i| i >= sizes[l]) {
                return Err(Error::Invalid(format!("I^({}) index out of range", l + 1)));
            }
            if j_sets[l].iter().any(|&j| j >= sizes[l + 1]) {
                return Err(Error::Invalid(format!("J^({}) index out of range", l + 2)));
            }
        }
        Ok(Self { sizes, i_sets, j_sets })
    }

    pub fn m(&self) -> usize {
        self.sizes.len()
    }

    /// All Cauchy chains as lists of `(level, index)`, including singletons.
    fn chains(&self) -> Vec<Vec<(usize, usize)>> {
        let m = self.m();
        let mut out: Vec<Vec<(usize, usize)>> = Vec::new();
        for l in 0..m {
            for i in 0..self.sizes[l] {
                let mut stack = vec![vec![(l, i)]];
                while let Some(chain) = stack.pop() {
                    out.push(chain.clone());
                    let (cl, ci) = *chain.last().unwrap();
                    if cl + 1 < m && self.i_sets[cl].contains(&ci) {
                        for &j in &self.j_sets[cl] {
                            let mut ext = chain.clone();
                            ext.push((cl + 1, j));
                            stack.push(ext);
                        }
                    }
                }
            }
        }
        out
    }
}

/// The nesting function `q`: either a pure power or the Bethe polynomial
/// restricted to its right region.
#[derive(Debug, Clone)]
pub enum ToyQ {
    /// `q(w) = w^p` on the unit disk.
    Monomial { p: u32 },
    /// `q(w) = w^N (w+1)^{L-N}` on the region around 0.
    Bethe(PeriodicParams),
}

impl ToyQ {
    fn order_at_zero(&self) -> u32 {
        match self {
            ToyQ::Monomial { p } => *p,
            ToyQ::Bethe(params) => params.n as u32,
        }
    }

    pub fn r_max(&self) -> f64 {
        match self {
            ToyQ::Monomial { .. } => 0.9,
            ToyQ::Bethe(params) => 0.95 * params.r_c(),
        }
    }

    fn j(&self, w: Complex64) -> Complex64 {
        match self {
            ToyQ::Monomial { p } => w / *p as f64,
            ToyQ::Bethe(params) => params.j(w),
        }
    }

    fn roots(&self, zhat: Complex64) -> Result<Vec<Complex64>> {
        match self {
            ToyQ::Monomial { p } => {
                let p = *p;
                let r = zhat.norm().powf(1.0 / p as f64);
                let base = zhat.arg() / p as f64;
                Ok((0..p)
                    .map(|j| {
                        let th = base + 2.0 * std::f64::consts::PI * j as f64 / p as f64;
                        r * Complex64::new(th.cos(), th.sin())
                    })
                    .collect())
            }
            ToyQ::Bethe(params) => Ok(bethe_roots(params, zhat)?.right),
        }
    }
}

type AFn = dyn Fn(&[Vec<Complex64>], &[Complex64]) -> Complex64;

/// A summand `A` with its declared pole orders at each variable's origin,
/// paired with a `q` whose vanishing order dominates every Cauchy chain.
pub struct ToyProblem {
    pub q: ToyQ,
    a: Box<AFn>,
    pole_orders: Vec<Vec<u32>>,
}

impl ToyProblem {
    /// Rejects the problem at construction if some Cauchy chain accumulates
    /// more pole order than `q` vanishes to at the origin.
    pub fn new(
        q: ToyQ,
        spec: &ChainSpec,
        pole_orders: Vec<Vec<u32>>,
        a: Box<AFn>,
    ) -> Result<Self> {
        if pole_orders.len() != spec.m()
            || pole_orders.iter().zip(&spec.sizes).any(|(po, &n)| po.len() != n)
        {
            return Err(Error::Invalid("pole order table must mirror the level sizes".into()));
        }
        let ord = q.order_at_zero();
        for chain in spec.chains() {
            let total: u32 = chain.iter().map(|&(l, i)| pole_orders[l][i]).sum();
            if total > ord {
                return Err(Error::Invalid(format!(
                    "dominance violated: chain {chain:?} has pole order {total} > {ord}"
                )));
            }
        }
        Ok(Self { q, a, pole_orders })
    }

    pub fn pole_orders(&self) -> &[Vec<u32>] {
        &self.pole_orders
    }
}

fn h_value(
    spec: &ChainSpec,
    problem: &ToyProblem,
    w: &[Vec<Complex64>],
    z: &[Complex64],
) -> Result<Complex64> {
    let mut acc = Complex64::new(1.0, 0.0);
    for l in 0..spec.m() - 1 {
        let wi: Vec<Complex64> = spec.i_sets[l].iter().map(|&i| w[l][i]).collect();
        let wj: Vec<Complex64> = spec.j_sets[l].iter().map(|&j| w[l + 1][j]).collect();
        acc *= cauchy_factor(&wi, &wj)?;
    }
    Ok(acc * (problem.a)(w, z))
}

/// The exact finite sum over all root-vector assignments
/// `W^(l) in R_{zhat_l}^{n_l}` with weights `J = q/q'`.
pub fn g_sum(problem: &ToyProblem, spec: &ChainSpec, z: &[Complex64]) -> Result<Complex64> {
    let m = spec.m();
    if z.len() != m {
        return Err(Error::Invalid("need z_0, ..., z_{m-1}".into()));
    }
    if !(z[0].norm() > 0.0 && z[0].norm() < problem.q.r_max()) {
        return Err(Error::Invalid("need 0 < |z_0| < r_max".into()));
    }
    for zl in &z[1..] {
        if !(zl.norm() > 0.0 && zl.norm() < 1.0) {
            return Err(Error::Invalid("need 0 < |z_l| < 1 for l >= 1".into()));
        }
    }
    // zhat_l = z_0 z_1 ... z_{l-1}
    let mut zhat = Vec::with_capacity(m);
    let mut acc = Complex64::new(1.0, 0.0);
    for zl in z {
        acc *= zl;
        zhat.push(acc);
    }
    let roots: Vec<Vec<Complex64>> =
        zhat.iter().map(|&zh| problem.q.roots(zh)).collect::<Result<Vec<_>>>()?;

    let dims: usize = spec.sizes.iter().sum();
    if dims == 0 {
        return (problem.a)(&vec![Vec::new(); m], z).re.is_finite().then(|| (problem.a)(&vec![Vec::new(); m], z)).ok_or_else(|| Error::NumericalDomain("summand non-finite".into()));
    }
    let mut idx = vec![0usize; dims];
    let mut total = Complex64::new(0.0, 0.0);
    'grid: loop {
        let mut w: Vec<Vec<Complex64>> = Vec::with_capacity(m);
        let mut jw = Complex64::new(1.0, 0.0);
        {
            let mut cursor = 0;
            for l in 0..m {
                let mut level = Vec::with_capacity(spec.sizes[l]);
                for _ in 0..spec.sizes[l] {
                    let root = roots[l][idx[cursor]];
                    level.push(root);
                    jw *= problem.q.j(root);
                    cursor += 1;
                }
                w.push(level);
            }
        }
        total += jw * h_value(spec, problem, &w, z)?;

        let mut d = 0;
        loop {
            if d == dims {
                break 'grid;
            }
            idx[d] += 1;
            let level = level_of(spec, d);
            if idx[d] < roots[level].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
    Ok(total)
}

fn level_of(spec: &ChainSpec, flat: usize) -> usize {
    let mut cursor = flat;
    for (l, &n) in spec.sizes.iter().enumerate() {
        if cursor < n {
            return l;
        }
        cursor -= n;
    }
    unreachable!()
}

/// The `z_0 -> 0` limit of `g_sum` as the nested contour integral with the
/// signed two-circle weights on levels 2..m and a plain middle circle for
/// level 1. Independent of `q` by construction.
pub fn g_zero_contour(
    problem: &ToyProblem,
    spec: &ChainSpec,
    z_tail: &[Complex64],
    r_inner: f64,
    r_outer: f64,
    nodes: usize,
) -> Result<Complex64> {
    let m = spec.m();
    if z_tail.len() != m - 1 {
        return Err(Error::Invalid("need z_1, ..., z_{m-1}".into()));
    }
    let count = 2 * m - 1;
    let radii: Vec<f64> = if count == 1 {
        vec![(r_inner * r_outer).sqrt()]
    } else {
        (0..count)
            .map(|i| r_outer * (r_inner / r_outer).powf(i as f64 / (count - 1) as f64))
            .collect()
    };
    let circle = |i: usize| CircleContour::new(Complex64::new(0.0, 0.0), radii[i], nodes);
    let one = Complex64::new(1.0, 0.0);

    // per-level node menus: (point, weight including the signed prefactor)
    let mut menus: Vec<Vec<(Complex64, Complex64)>> = Vec::with_capacity(m);
    for level in 1..=m {
        let mut menu = Vec::new();
        if level == 1 {
            let c = circle(m - 1)?;
            for j in 0..c.nodes {
                menu.push((c.point(j), c.weight(j)));
            }
        } else {
            let zl = z_tail[level - 2];
            let c_out = circle(m - level)?;
            let c_in = circle(m - 2 + level)?;
            for j in 0..c_in.nodes {
                menu.push((c_in.point(j), c_in.weight(j) / (one - zl)));
            }
            for j in 0..c_out.nodes {
                menu.push((c_out.point(j), -c_out.weight(j) * zl / (one - zl)));
            }
        }
        menus.push(menu);
    }

    // z vector seen by A: z_0 = 0 with the tail appended
    let mut z_full = vec![Complex64::new(0.0, 0.0)];
    z_full.extend_from_slice(z_tail);

    let dims: usize = spec.sizes.iter().sum();
    if dims == 0 {
        return Ok((problem.a)(&vec![Vec::new(); m], &z_full));
    }
    let mut idx = vec![0usize; dims];
    let mut total = Complex64::new(0.0, 0.0);
    'grid: loop {
        let mut w: Vec<Vec<Complex64>> = Vec::with_capacity(m);
        let mut wq = one;
        {
            let mut cursor = 0;
            for l in 0..m {
                let mut level = Vec::with_capacity(spec.sizes[l]);
                for _ in 0..spec.sizes[l] {
                    let (pt, wt) = menus[l][idx[cursor]];
                    level.push(pt);
                    wq *= wt;
                    cursor += 1;
                }
                w.push(level);
            }
        }
        total += wq * h_value(spec, problem, &w, &z_full)?;

        let mut d = 0;
        loop {
            if d == dims {
                break 'grid;
            }
            idx[d] += 1;
            let level = level_of(spec, d);
            if idx[d] < menus[level].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
    Ok(total)
}

//! Periodic (ring) TASEP: Bethe roots of `w^N (w+1)^{L-N} = z`, the spectral
//! functions built from them, and the multi-point probability as an m-fold
//! integral of `C_Y * D_Y` over nested circles. For periods past a finite
//! threshold this reproduces the infinite-lattice value, which is the main
//! cross-check exercised by the tests.

use crate::multipoint::{f_level, joint_probability, ContourPlan, ObservationSet, Side};
use crate::symfunc::{g_lambda, ParticleConfig, Partition};
use crate::{Complex64, Error, ProbabilityResult, Provenance, Result};

/// Ring period `L` and particle count `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodicParams {
    pub l: i64,
    pub n: usize,
}

impl PeriodicParams {
    pub fn new(l: i64, n: usize) -> Result<Self> {
        if n < 1 || l <= n as i64 {
            return Err(Error::Invalid(format!("need L > N >= 1, got L={l}, N={n}")));
        }
        Ok(Self { l, n })
    }

    /// Radius below which the level curves of `q` split into two loops.
    pub fn r_c(&self) -> f64 {
        let n = self.n as f64;
        let l = self.l as f64;
        n.powf(n) * (l - n).powf(l - n) / l.powf(l)
    }

    /// Self-intersection point of the critical level curve.
    pub fn w_c(&self) -> f64 {
        -(self.n as f64) / self.l as f64
    }

    pub fn q(&self, w: Complex64) -> Complex64 {
        let one = Complex64::new(1.0, 0.0);
        w.powi(self.n as i32) * (w + one).powi((self.l - self.n as i64) as i32)
    }

    fn q_prime(&self, w: Complex64) -> Complex64 {
        let one = Complex64::new(1.0, 0.0);
        let n = self.n as i64;
        w.powi((n - 1) as i32)
            * (w + one).powi((self.l - n - 1) as i32)
            * (self.l as f64 * w + n as f64)
    }

    /// `J(w) = q(w)/q'(w) = w(w+1)/(Lw+N)`.
    pub fn j(&self, w: Complex64) -> Complex64 {
        let one = Complex64::new(1.0, 0.0);
        w * (w + one) / (self.l as f64 * w + self.n as f64)
    }
}

/// All `L` roots of `w^N (w+1)^{L-N} = z`, split into the cluster near -1
/// (left) and the cluster near 0 (right).
#[derive(Debug, Clone)]
pub struct BetheRootSet {
    pub z: Complex64,
    pub left: Vec<Complex64>,
    pub right: Vec<Complex64>,
    pub max_residual: f64,
}

const ROOT_RESIDUAL_TOL: f64 = 1e-11;

/// Simultaneous Aberth iteration seeded from the small-z asymptotic clusters,
/// then polished by Newton on each root.
pub fn bethe_roots(params: &PeriodicParams, z: Complex64) -> Result<BetheRootSet> {
    let r_c = params.r_c();
    if !(z.norm() > 0.0) {
        return Err(Error::Invalid("bethe_roots needs z != 0".into()));
    }
    if z.norm() >= r_c {
        return Err(Error::Unsupported(format!(
            "|z| = {} >= r_c = {r_c}: left/right classification undefined",
            z.norm()
        )));
    }
    let n = params.n;
    let ln = (params.l - n as i64) as usize;
    let degree = params.l as usize;

    let mut w = Vec::with_capacity(degree);
    // right cluster: N-th roots of z
    let rr = z.norm().powf(1.0 / n as f64);
    let phase_r = z.arg() / n as f64;
    for j in 0..n {
        let th = phase_r + 2.0 * std::f64::consts::PI * j as f64 / n as f64;
        w.push(rr * Complex64::new(th.cos(), th.sin()));
    }
    // left cluster: -1 plus the (L-N)-th roots of (-1)^N z
    let zl = z * if n % 2 == 0 { 1.0 } else { -1.0 };
    let rl = zl.norm().powf(1.0 / ln as f64);
    let phase_l = zl.arg() / ln as f64;
    for j in 0..ln {
        let th = phase_l + 2.0 * std::f64::consts::PI * j as f64 / ln as f64;
        w.push(Complex64::new(-1.0, 0.0) + rl * Complex64::new(th.cos(), th.sin()));
    }

    let p = |w: Complex64| params.q(w) - z;
    for _ in 0..200 {
        let mut max_step = 0.0f64;
        let snapshot = w.clone();
        for i in 0..degree {
            let wi = snapshot[i];
            let pi = p(wi);
            let dpi = params.q_prime(wi);
            if dpi.norm() == 0.0 {
                continue;
            }
            let newton = pi / dpi;
            let mut sum = Complex64::new(0.0, 0.0);
            for (j, &wj) in snapshot.iter().enumerate() {
                if j != i {
                    sum += 1.0 / (wi - wj);
                }
            }
            let step = newton / (1.0 - newton * sum);
            w[i] = wi - step;
            max_step = max_step.max(step.norm());
        }
        if max_step < 1e-14 {
            break;
        }
    }
    for wi in w.iter_mut() {
        for _ in 0..3 {
            let dpi = params.q_prime(*wi);
            if dpi.norm() == 0.0 {
                break;
            }
            *wi -= p(*wi) / dpi;
        }
    }

    let mut max_residual = 0.0f64;
    for &wi in &w {
        max_residual = max_residual.max(p(wi).norm());
    }
    if max_residual > ROOT_RESIDUAL_TOL {
        return Err(Error::Convergence {
            message: format!("root residual {max_residual:.3e} exceeds {ROOT_RESIDUAL_TOL:.1e}"),
            best: w[0],
        });
    }

    let w_c = params.w_c();
    let (left, right): (Vec<_>, Vec<_>) = w.into_iter().partition(|wi| wi.re < w_c);
    if left.len() != ln || right.len() != n {
        return Err(Error::Convergence {
            message: format!(
                "root classification found {} left / {} right, expected {ln}/{n}",
                left.len(),
                right.len()
            ),
            best: Complex64::new(0.0, 0.0),
        });
    }
    Ok(BetheRootSet { z, left, right, max_residual })
}

/// The normalized partial Bethe products: at `w` in the left region the
/// product runs over the right roots, `prod (w - v) / w^N`, and vice versa;
/// equals 1 identically at `z = 0`.
pub fn frak_h(params: &PeriodicParams, z: Complex64, w: Complex64) -> Result<Complex64> {
    if z.norm() == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let roots = bethe_roots(params, z)?;
    frak_h_with(params, &roots, w)
}

pub(crate) fn frak_h_with(
    params: &PeriodicParams,
    roots: &BetheRootSet,
    w: Complex64,
) -> Result<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    if w.norm() < 1e-14 || (w + one).norm() < 1e-14 {
        return Err(Error::Degenerate("frak_h pole at w in {0, -1}".into()));
    }
    let val = if w.re < params.w_c() {
        let mut prod = one;
        for &v in &roots.right {
            prod *= w - v;
        }
        prod / w.powi(params.n as i32)
    } else {
        let mut prod = one;
        for &u in &roots.left {
            prod *= w - u;
        }
        prod / (w + one).powi((params.l - params.n as i64) as i32)
    };
    Ok(val)
}

/// `E_Y(z) = prod_{v in right} (v+1)^{y_N+N} * G_{lambda(Y)}(right roots)`,
/// with `E_Y(0) = 1`.
pub fn energy(y: &ParticleConfig, params: &PeriodicParams, z: Complex64) -> Result<Complex64> {
    if y.n() != params.n {
        return Err(Error::Invalid("configuration size must match params.n".into()));
    }
    if z.norm() == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let roots = bethe_roots(params, z)?;
    energy_with(y, &roots)
}

pub(crate) fn energy_with(y: &ParticleConfig, roots: &BetheRootSet) -> Result<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    let base = y.base_exponent() as i32;
    let mut pref = one;
    for &v in &roots.right {
        pref *= (v + one).powi(base);
    }
    Ok(pref * g_lambda(&y.partition(), &roots.right)?)
}

/// Largest radius from the trial ladder `{0.9, 0.8, ...} * r_c` on which
/// `|E_Y|` stays above 1e-8 along a 64-point circle scan. A numerical
/// surrogate for the abstract nonvanishing radius; failure is reported, not
/// silently patched.
pub fn r_max_probe(y: &ParticleConfig, params: &PeriodicParams) -> Result<f64> {
    let r_c = params.r_c();
    for step in (1..=9).rev() {
        let r = 0.1 * step as f64 * r_c;
        let mut ok = true;
        for j in 0..64 {
            let th = 2.0 * std::f64::consts::PI * j as f64 / 64.0;
            let z = r * Complex64::new(th.cos(), th.sin());
            match energy(y, params, z) {
                Ok(e) if e.norm() > 1e-8 => {}
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(r);
        }
    }
    Err(Error::Unsupported("no trial radius kept the energy function away from zero".into()))
}

/// `ch(v, u; z) = ((u+1)/(v+1))^{y_N+N} G_lambda((R \ {v}) + {u}) / G_lambda(R)`
/// for `v` a right Bethe root, given by its index in the set.
fn ch_with(
    y: &ParticleConfig,
    lambda: &Partition,
    roots: &BetheRootSet,
    g_full: Complex64,
    v_index: usize,
    u: Complex64,
) -> Result<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    let v = roots.right[v_index];
    let mut vars: Vec<Complex64> = Vec::with_capacity(roots.right.len());
    vars.push(u);
    for (i, &r) in roots.right.iter().enumerate() {
        if i != v_index {
            vars.push(r);
        }
    }
    let g_swap = g_lambda(lambda, &vars)?;
    Ok(((u + one) / (v + one)).powi(y.base_exponent() as i32) * g_swap / g_full)
}

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

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    rec(0, n, k, &mut cur, &mut out);
    out
}

fn root_refs(roots: &[BetheRootSet]) -> Vec<&BetheRootSet> {
    roots.iter().collect()
}

fn solve_levels(params: &PeriodicParams, zhat: &[Complex64]) -> Result<Vec<BetheRootSet>> {
    for w in zhat.windows(2) {
        if w[1].norm() >= w[0].norm() {
            return Err(Error::Invalid("|z_1| > ... > |z_m| ordering violated".into()));
        }
    }
    zhat.iter().map(|&z| bethe_roots(params, z)).collect()
}

/// The prefactor-and-product function multiplying the determinant series:
/// `[prod z_{l-1}/(z_{l-1} - z_l)] * E_Y(z_1) * A1 * A2 * A3`.
pub fn script_c(
    y: &ParticleConfig,
    params: &PeriodicParams,
    obs: &ObservationSet,
    zhat: &[Complex64],
) -> Result<Complex64> {
    let roots = solve_levels(params, zhat)?;
    script_c_with(y, params, obs, zhat, &root_refs(&roots))
}

pub(crate) fn script_c_with(
    y: &ParticleConfig,
    params: &PeriodicParams,
    obs: &ObservationSet,
    zhat: &[Complex64],
    roots: &[&BetheRootSet],
) -> Result<Complex64> {
    let m = obs.m();
    if zhat.len() != m || roots.len() != m {
        return Err(Error::Invalid("need one z-hat value and root set per level".into()));
    }
    let one = Complex64::new(1.0, 0.0);
    let n = params.n as i32;
    let ln = (params.l - params.n as i64) as i32;

    let mut pref = one;
    for l in 2..=m {
        pref *= zhat[l - 2] / (zhat[l - 2] - zhat[l - 1]);
    }
    let e1 = energy_with(y, roots[0])?;

    let mut a1 = one;
    let mut a2 = one;
    let mut a3 = one;
    for l in 1..=m {
        let cur = obs.at(l);
        let (k_prev, ak_prev, t_prev) = if l == 1 {
            (0i64, 0i64, 0.0)
        } else {
            let p = obs.at(l - 1);
            (p.k as i64, p.a + p.k as i64, p.t)
        };
        let dk = (k_prev - cur.k as i64) as i32;
        let dak = (ak_prev - (cur.a + cur.k as i64)) as i32;
        let dt = cur.t - t_prev;
        for &u in &roots[l - 1].left {
            a1 *= (-u).powi(dk);
        }
        for &v in &roots[l - 1].right {
            a1 *= (v + one).powi(dak) * (dt * v).exp();
        }
        let mut num = one;
        for &u in &roots[l - 1].left {
            num *= (-u).powi(n);
        }
        for &v in &roots[l - 1].right {
            num *= (v + one).powi(ln);
        }
        let mut den = one;
        for &u in &roots[l - 1].left {
            for &v in &roots[l - 1].right {
                den *= v - u;
            }
        }
        a2 *= num / den;
        if l >= 2 {
            let mut num3 = one;
            for &u in &roots[l - 2].left {
                for &v in &roots[l - 1].right {
                    num3 *= v - u;
                }
            }
            let mut den3 = one;
            for &u in &roots[l - 2].left {
                den3 *= (-u).powi(n);
            }
            for &v in &roots[l - 1].right {
                den3 *= (v + one).powi(ln);
            }
            a3 *= num3 / den3;
        }
    }
    Ok(pref * e1 * a1 * a2 * a3)
}

/// The finite Bethe-root series for the determinant factor.
pub fn script_d(
    y: &ParticleConfig,
    params: &PeriodicParams,
    obs: &ObservationSet,
    zhat: &[Complex64],
) -> Result<Complex64> {
    let roots = solve_levels(params, zhat)?;
    script_d_with(y, params, obs, zhat, &root_refs(&roots))
}

pub(crate) fn script_d_with(
    y: &ParticleConfig,
    params: &PeriodicParams,
    obs: &ObservationSet,
    zhat: &[Complex64],
    roots: &[&BetheRootSet],
) -> Result<Complex64> {
    let m = obs.m();
    if zhat.len() != m || roots.len() != m {
        return Err(Error::Invalid("need one z-hat value and root set per level".into()));
    }
    let n = params.n;
    let ln = (params.l - params.n as i64) as usize;
    let cap = n.min(ln);
    let lambda = y.partition();
    let g_full: Vec<Complex64> =
        roots.iter().map(|r| g_lambda(&lambda, &r.right)).collect::<Result<Vec<_>>>()?;

    let mut total = Complex64::new(0.0, 0.0);
    let mut nvec = vec![0usize; m];
    'sum: loop {
        let u_choices: Vec<Vec<Vec<usize>>> = nvec.iter().map(|&nl| subsets(ln, nl)).collect();
        let v_choices: Vec<Vec<Vec<usize>>> = nvec.iter().map(|&nl| subsets(n, nl)).collect();
        let mut sel = vec![(0usize, 0usize); m];
        'assign: loop {
            let mut us: Vec<Vec<Complex64>> = Vec::with_capacity(m);
            let mut vs: Vec<Vec<Complex64>> = Vec::with_capacity(m);
            let mut v_idx: Vec<&[usize]> = Vec::with_capacity(m);
            for l in 0..m {
                let ui = &u_choices[l][sel[l].0];
                let vi = &v_choices[l][sel[l].1];
                us.push(ui.iter().map(|&i| roots[l].left[i]).collect());
                vs.push(vi.iter().map(|&i| roots[l].right[i]).collect());
                v_idx.push(vi);
            }
            total += periodic_series_term(
                y, params, obs, zhat, roots, &lambda, &g_full, &nvec, &us, &vs, &v_idx,
            )?;

            let mut l = 0;
            loop {
                if l == m {
                    break 'assign;
                }
                sel[l].1 += 1;
                if sel[l].1 < v_choices[l].len() {
                    break;
                }
                sel[l].1 = 0;
                sel[l].0 += 1;
                if sel[l].0 < u_choices[l].len() {
                    break;
                }
                sel[l].0 = 0;
                l += 1;
            }
        }
        let mut l = 0;
        loop {
            if l == m {
                break 'sum;
            }
            nvec[l] += 1;
            if nvec[l] <= cap {
                break;
            }
            nvec[l] = 0;
            l += 1;
        }
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn periodic_series_term(
    y: &ParticleConfig,
    params: &PeriodicParams,
    obs: &ObservationSet,
    zhat: &[Complex64],
    roots: &[&BetheRootSet],
    lambda: &Partition,
    g_full: &[Complex64],
    nvec: &[usize],
    us: &[Vec<Complex64>],
    vs: &[Vec<Complex64>],
    v_idx: &[&[usize]],
) -> Result<Complex64> {
    let m = obs.m();
    let one = Complex64::new(1.0, 0.0);
    if nvec.iter().all(|&nl| nl == 0) {
        return Ok(one);
    }
    let n1 = nvec[0];
    let sign = if (n1 * (n1 + 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let h_at =
        |w: Complex64, level: usize| -> Result<Complex64> { frak_h_with(params, roots[level], w) };

    // level-1 determinant block with one Vandermonde power folded in
    let mut level1 = one;
    if n1 > 0 {
        let u1 = &us[0];
        let mut kmat = nalgebra::DMatrix::<Complex64>::zeros(n1, n1);
        for i in 0..n1 {
            for j in 0..n1 {
                let ch = ch_with(y, lambda, roots[0], g_full[0], v_idx[0][i], u1[j])?;
                kmat[(i, j)] = ch / (vs[0][i] - u1[j]);
            }
        }
        let detk = kmat.lu().determinant();
        level1 = cross_prod(&us[0], &vs[0]) / (delta_prod(&us[0]) * delta_prod(&vs[0])) * detk;
    }

    let mut body = one;
    for l in 0..m {
        if nvec[l] == 0 {
            continue;
        }
        let (du, dv) = (delta_prod(&us[l]), delta_prod(&vs[l]));
        let cx = cross_prod(&us[l], &vs[l]);
        body *= du * du * dv * dv / (cx * cx);
        for &u in &us[l] {
            body *= f_level(l + 1, u, Side::Left, obs)? * h_at(u, l)?.powi(2) * params.j(u);
        }
        for &v in &vs[l] {
            body *= f_level(l + 1, v, Side::Right, obs)? * h_at(v, l)?.powi(2) * params.j(v);
        }
    }

    let mut adj = one;
    for l in 0..m - 1 {
        adj *= cross_prod(&us[l], &vs[l + 1]) * cross_prod(&vs[l], &us[l + 1])
            / (cross_prod(&us[l], &us[l + 1]) * cross_prod(&vs[l], &vs[l + 1]));
        adj *= (one - zhat[l + 1] / zhat[l]).powi(nvec[l] as i32)
            * (one - zhat[l] / zhat[l + 1]).powi(nvec[l + 1] as i32);
        let mut hdiv = one;
        for &u in &us[l] {
            hdiv *= h_at(u, l + 1)?;
        }
        for &v in &vs[l] {
            hdiv *= h_at(v, l + 1)?;
        }
        for &u in &us[l + 1] {
            hdiv *= h_at(u, l)?;
        }
        for &v in &vs[l + 1] {
            hdiv *= h_at(v, l)?;
        }
        adj /= hdiv;
    }
    Ok(sign * level1 * body * adj)
}

/// Configuration of the nested z-hat circles.
#[derive(Debug, Clone)]
pub struct PeriodicPlan {
    /// Outermost circle radius; defaults to the probe result.
    pub r_outer: Option<f64>,
    /// Geometric decay between consecutive circles.
    pub ratio: f64,
    pub z_nodes: usize,
}

impl Default for PeriodicPlan {
    fn default() -> Self {
        Self { r_outer: None, ratio: 0.6, z_nodes: 64 }
    }
}

/// Multi-point probability of the ring system: the m-fold tensor quadrature
/// of `C_Y * D_Y` over nested circles of decreasing radii.
pub fn periodic_probability(
    y: &ParticleConfig,
    params: &PeriodicParams,
    obs: &ObservationSet,
    plan: &PeriodicPlan,
) -> Result<ProbabilityResult> {
    obs.validate_for(y.n())?;
    if y.n() != params.n {
        return Err(Error::Invalid("params.n must equal the particle count".into()));
    }
    let span = y.positions()[0] - y.positions()[y.n() - 1];
    if params.l <= span {
        return Err(Error::Invalid(format!(
            "period {} too small for a configuration spanning {span}",
            params.l
        )));
    }
    let m = obs.m();
    let r_sel = match plan.r_outer {
        Some(r) => r,
        None => r_max_probe(y, params)?,
    };
    let radii: Vec<f64> = (0..m).map(|l| r_sel * plan.ratio.powi(l as i32)).collect();

    let eval = |nodes: usize| -> Result<Complex64> {
        // root sets per circle node, solved once
        let mut level_roots: Vec<Vec<BetheRootSet>> = Vec::with_capacity(m);
        for &r in &radii {
            let mut ring = Vec::with_capacity(nodes);
            for j in 0..nodes {
                let th = 2.0 * std::f64::consts::PI * j as f64 / nodes as f64;
                ring.push(bethe_roots(params, r * Complex64::new(th.cos(), th.sin()))?);
            }
            level_roots.push(ring);
        }
        let total = nodes.pow(m as u32);
        let mut sum = Complex64::new(0.0, 0.0);
        let mut idx = vec![0usize; m];
        for flat in 0..total {
            let mut rem = flat;
            for l in 0..m {
                idx[l] = rem % nodes;
                rem /= nodes;
            }
            let zhat: Vec<Complex64> = (0..m).map(|l| level_roots[l][idx[l]].z).collect();
            let refs: Vec<&BetheRootSet> = (0..m).map(|l| &level_roots[l][idx[l]]).collect();
            let c = script_c_with(y, params, obs, &zhat, &refs)?;
            let d = script_d_with(y, params, obs, &zhat, &refs)?;
            sum += c * d;
        }
        Ok(sum / total as f64)
    };
    let raw = eval(plan.z_nodes)?;
    let probe = eval(plan.z_nodes * 2)?;
    let mut result = ProbabilityResult::from_raw(raw, (probe - raw).norm(), Provenance::Periodic);
    if raw.im.abs() > 1e-5 {
        result
            .warnings
            .push(format!("imaginary residue {:.3e} exceeds the 1e-5 quality bar", raw.im.abs()));
    }
    Ok(result)
}

/// `|periodic_probability - joint_probability|` for a period satisfying the
/// equality threshold `L >= max(a_l + k_l) - y_N`.
pub fn large_period_residual(
    y: &ParticleConfig,
    params: &PeriodicParams,
    obs: &ObservationSet,
    plan: &PeriodicPlan,
    finite_plan: &ContourPlan,
) -> Result<f64> {
    let threshold = obs.max_ak() - y.positions()[y.n() - 1];
    if params.l < threshold {
        return Err(Error::Invalid(format!(
            "period {} below the equality threshold {threshold}",
            params.l
        )));
    }
    let ring = periodic_probability(y, params, obs, plan)?;
    let line = joint_probability(y, obs, finite_plan)?;
    Ok((ring.value - line.value).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multipoint::Observation;

    fn c64(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn critical_constants() {
        let p = PeriodicParams::new(2, 1).unwrap();
        assert!((p.r_c() - 0.25).abs() < 1e-15);
        assert!((p.w_c() + 0.5).abs() < 1e-15);
        assert!(PeriodicParams::new(2, 2).is_err());
    }

    #[test]
    fn quadratic_bethe_roots() {
        let p = PeriodicParams::new(2, 1).unwrap();
        let roots = bethe_roots(&p, c64(0.1, 0.0)).unwrap();
        let s = 1.4f64.sqrt();
        assert_eq!(roots.right.len(), 1);
        assert_eq!(roots.left.len(), 1);
        assert!((roots.right[0] - c64((-1.0 + s) / 2.0, 0.0)).norm() < 1e-12);
        assert!((roots.left[0] - c64((-1.0 - s) / 2.0, 0.0)).norm() < 1e-12);
        assert!(roots.max_residual < 1e-11);
    }

    #[test]
    fn roots_cluster_as_z_shrinks() {
        let p = PeriodicParams::new(5, 2).unwrap();
        let mut prev_right: f64 = f64::INFINITY;
        let mut prev_left: f64 = f64::INFINITY;
        for j in 0..6 {
            let z = c64(0.1 * 0.5f64.powi(j) * p.r_c(), 0.0);
            let roots = bethe_roots(&p, z).unwrap();
            let max_r = roots.right.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let max_l = roots.left.iter().map(|u| (u + 1.0).norm()).fold(0.0, f64::max);
            assert!(max_r < prev_right && max_l < prev_left);
            // cluster radii track the leading-order scales
            assert!(max_r < 2.0 * z.norm().powf(1.0 / p.n as f64), "right cluster too wide");
            assert!(
                max_l < 2.0 * z.norm().powf(1.0 / (p.l - p.n as i64) as f64),
                "left cluster too wide"
            );
            prev_right = max_r;
            prev_left = max_l;
        }
    }

    #[test]
    fn roots_and_counts_near_critical_radius() {
        for (l, n) in [(3i64, 1usize), (5, 2), (7, 3), (12, 5)] {
            let p = PeriodicParams::new(l, n).unwrap();
            for j in 0..8 {
                let th = 2.0 * std::f64::consts::PI * j as f64 / 8.0 + 0.1;
                let z = 0.95 * p.r_c() * c64(th.cos(), th.sin());
                let roots = bethe_roots(&p, z).unwrap();
                assert_eq!(roots.left.len(), (l - n as i64) as usize);
                assert_eq!(roots.right.len(), n);
                assert!(roots.max_residual < 1e-11);
            }
        }
    }

    #[test]
    fn frak_h_values() {
        let p = PeriodicParams::new(2, 1).unwrap();
        assert!((frak_h(&p, c64(0.0, 0.0), c64(-1.2, 0.0)).unwrap() - 1.0).norm() < 1e-15);
        let v = frak_h(&p, c64(0.1, 0.0), c64(-1.2, 0.0)).unwrap();
        let root = (-1.0 + 1.4f64.sqrt()) / 2.0;
        let expect = (-1.2 - root) / -1.2;
        assert!((v - c64(expect, 0.0)).norm() < 1e-12);

        // approaches 1 as z -> 0, monotonically on a small grid
        let w = c64(0.21, 0.13);
        let mut prev = f64::INFINITY;
        for j in 0..5 {
            let z = c64(0.1 * 0.5f64.powi(j) * p.r_c(), 0.0);
            let gap = (frak_h(&p, z, w).unwrap() - 1.0).norm();
            assert!(gap < prev);
            prev = gap;
        }
    }

    #[test]
    fn frak_h_nonvanishing_on_plan_grid() {
        let p = PeriodicParams::new(5, 2).unwrap();
        let y = ParticleConfig::step(2);
        let r = r_max_probe(&y, &p).unwrap();
        for j in 0..32 {
            let th = 2.0 * std::f64::consts::PI * j as f64 / 32.0;
            let z = r * c64(th.cos(), th.sin());
            let roots = bethe_roots(&p, z).unwrap();
            for &u in &roots.left {
                assert!(frak_h_with(&p, &roots, u).unwrap().norm() > 0.0);
            }
            for &v in &roots.right {
                assert!(frak_h_with(&p, &roots, v).unwrap().norm() > 0.0);
            }
        }
    }

    #[test]
    fn energy_examples() {
        // step: G = 1, so E is the bare prefactor over right roots
        let p = PeriodicParams::new(5, 2).unwrap();
        let y = ParticleConfig::step(2);
        let z = c64(0.3 * p.r_c(), 0.2 * p.r_c());
        let roots = bethe_roots(&p, z).unwrap();
        let e = energy(&y, &p, z).unwrap();
        let mut expect = c64(1.0, 0.0);
        for &v in &roots.right {
            expect *= (v + 1.0).powi(y.base_exponent() as i32);
        }
        assert!((e - expect).norm() < 1e-12 * expect.norm());

        // flat N=2, L=4: G_lambda(v1, v2) = v1 + v2 + 1
        let p4 = PeriodicParams::new(4, 2).unwrap();
        let yf = ParticleConfig::flat(2);
        let zf = c64(0.05, 0.0);
        let rf = bethe_roots(&p4, zf).unwrap();
        let ef = energy(&yf, &p4, zf).unwrap();
        let (v1, v2) = (rf.right[0], rf.right[1]);
        let expect_f = (v1 + 1.0).powi(-2) * (v2 + 1.0).powi(-2) * (v1 + v2 + 1.0);
        assert!((ef - expect_f).norm() < 1e-11 * expect_f.norm(), "{ef} vs {expect_f}");

        // E(0) = 1 exactly, and the limit is approached continuously
        assert_eq!(energy(&yf, &p4, c64(0.0, 0.0)).unwrap(), c64(1.0, 0.0));
        let near = energy(&yf, &p4, c64(1e-9, 0.0)).unwrap();
        assert!((near - 1.0).norm() < 1e-5);
    }

    #[test]
    fn r_max_probe_accepts_step() {
        let p = PeriodicParams::new(3, 1).unwrap();
        let y = ParticleConfig::step(1);
        let r = r_max_probe(&y, &p).unwrap();
        assert!((r - 0.9 * p.r_c()).abs() < 1e-12);
    }

    #[test]
    fn script_c_limits() {
        // m = 1: C = E(z) * A1 * A2; approaches 1 as z -> 0
        let p = PeriodicParams::new(3, 1).unwrap();
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::single(1, 0, 1.0);
        let mut prev = f64::INFINITY;
        for j in 1..5 {
            let z = c64(0.1f64.powi(j) * p.r_c(), 0.0);
            let c = script_c(&y, &p, &obs, &[z]).unwrap();
            let gap = (c - 1.0).norm();
            assert!(gap < prev, "gap {gap} at z = {z}");
            prev = gap;
        }
    }

    #[test]
    fn script_c_richardson_matches_geometric_weight() {
        // as z0 -> 0 with z1 fixed, C(z0, z0 z1) approaches 1/(1-z1)
        let p = PeriodicParams::new(3, 1).unwrap();
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::new(vec![
            Observation { k: 1, a: 0, t: 0.5 },
            Observation { k: 1, a: 1, t: 1.5 },
        ])
        .unwrap();
        let z1 = c64(0.4, 0.1);
        let c_at = |z0: f64| -> Complex64 {
            let zhat = [c64(z0, 0.0), z0 * z1];
            script_c(&y, &p, &obs, &zhat).unwrap()
        };
        let extr = 2.0 * c_at(1e-3) - c_at(2e-3);
        let expect = 1.0 / (1.0 - z1);
        assert!((extr - expect).norm() < 1e-3, "{extr} vs {expect}");
    }

    #[test]
    fn script_d_trivial_term_and_step_ch() {
        let p = PeriodicParams::new(3, 1).unwrap();
        let y = ParticleConfig::step(1);
        let lambda = y.partition();
        let z = c64(0.05, 0.02);
        let roots = bethe_roots(&p, z).unwrap();
        let g_full = g_lambda(&lambda, &roots.right).unwrap();
        // step: ch reduces to the bare exponent ratio
        let u = c64(-1.3, 0.2);
        let ch = ch_with(&y, &lambda, &roots, g_full, 0, u).unwrap();
        let expect = ((u + 1.0) / (roots.right[0] + 1.0)).powi(y.base_exponent() as i32);
        assert!((ch - expect).norm() < 1e-12);
    }

    #[test]
    fn single_ring_particle_is_poisson() {
        let p = PeriodicParams::new(2, 1).unwrap();
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::single(1, 0, 1.0);
        let plan = PeriodicPlan { z_nodes: 32, ..Default::default() };
        let prob = periodic_probability(&y, &p, &obs, &plan).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        assert!((prob.value - expect).abs() < 1e-9, "{} vs {expect}", prob.value);
        assert!(prob.imag_residue < 1e-10);
    }

    #[test]
    fn integrand_invariant_under_root_relabeling() {
        let p = PeriodicParams::new(5, 2).unwrap();
        let y = ParticleConfig::new(vec![-1, -3]).unwrap();
        let obs = ObservationSet::single(2, -1, 1.0);
        let z = c64(0.4 * p.r_c(), 0.1 * p.r_c());
        let mut roots = bethe_roots(&p, z).unwrap();
        let zhat = [z];
        let c1 = script_c_with(&y, &p, &obs, &zhat, &[&roots]).unwrap();
        let d1 = script_d_with(&y, &p, &obs, &zhat, &[&roots]).unwrap();
        roots.left.reverse();
        roots.right.reverse();
        let c2 = script_c_with(&y, &p, &obs, &zhat, &[&roots]).unwrap();
        let d2 = script_d_with(&y, &p, &obs, &zhat, &[&roots]).unwrap();
        assert!((c1 * d1 - c2 * d2).norm() < 1e-12 * (c1 * d1).norm().max(1e-30));
    }

    #[test]
    fn large_period_matches_infinite_lattice_small_case() {
        let p = PeriodicParams::new(3, 1).unwrap();
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::single(1, 0, 1.0);
        let plan = PeriodicPlan { z_nodes: 32, ..Default::default() };
        let mut fp = ContourPlan::default_for(1).unwrap();
        fp.error_probe = false;
        let resid = large_period_residual(&y, &p, &obs, &plan, &fp).unwrap();
        assert!(resid < 1e-7, "residual {resid}");
    }
}

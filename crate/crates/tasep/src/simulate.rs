//! Independent oracles: event-driven Monte Carlo TASEP (infinite lattice and
//! ring), an exact uniformized Markov-chain evolution on a certified truncated
//! state space, and closed-form Poisson formulas for a single particle.

use crate::multipoint::ObservationSet;
use crate::symfunc::ParticleConfig;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Monte Carlo sampling configuration. Identical `(seed, samples)` gives a
/// bit-identical estimate in serial mode: each sample runs on its own
/// counter-indexed RNG stream.
#[derive(Debug, Clone, Copy)]
pub struct MCConfig {
    pub seed: u64,
    pub samples: u64,
}

impl MCConfig {
    pub fn new(seed: u64, samples: u64) -> Self {
        Self { seed, samples }
    }
}

/// Runs TASEP with the global-clock construction: exponential clock of rate N,
/// uniform particle choice, rejection when the chosen particle is blocked.
/// This is distribution-identical to per-particle independent clocks.
fn sample_path_satisfies(
    y: &ParticleConfig,
    obs: &ObservationSet,
    periodic: Option<i64>,
    rng: &mut ChaCha8Rng,
) -> bool {
    let n = y.n();
    let mut x: Vec<i64> = y.positions().to_vec();
    let rate = n as f64;
    let mut time = 0.0f64;
    let mut next_obs = 0;
    let events = obs.observations();
    loop {
        let dt = -rng.gen::<f64>().ln() / rate;
        let event_time = time + dt;
        while next_obs < events.len() && events[next_obs].t < event_time {
            let o = &events[next_obs];
            if x[o.k - 1] < o.a {
                return false;
            }
            next_obs += 1;
        }
        if next_obs == events.len() {
            return true;
        }
        time = event_time;
        let i = rng.gen_range(0..n);
        let free = if i == 0 {
            match periodic {
                Some(l) => x[0] - x[n - 1] < l - 1,
                None => true,
            }
        } else {
            x[i - 1] - x[i] > 1
        };
        if free {
            x[i] += 1;
        }
    }
}

/// Monte Carlo estimate of `P(all x_{k_l}(t_l) >= a_l)` with its standard
/// error. `periodic = Some(L)` runs the ring dynamics with period `L`.
pub fn mc_joint(
    y: &ParticleConfig,
    obs: &ObservationSet,
    cfg: &MCConfig,
    periodic: Option<i64>,
) -> Result<(f64, f64)> {
    obs.validate_for(y.n())?;
    if let Some(l) = periodic {
        let span = y.positions()[0] - y.positions()[y.n() - 1];
        if l <= span {
            return Err(Error::Invalid(format!(
                "period {l} too small for initial configuration spanning {span}"
            )));
        }
    }
    let mut hits = 0u64;
    for s in 0..cfg.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        if sample_path_satisfies(y, obs, periodic, &mut rng) {
            hits += 1;
        }
    }
    let p = hits as f64 / cfg.samples as f64;
    let stderr = (p * (1.0 - p) / cfg.samples as f64).sqrt();
    Ok((p, stderr))
}

/// Certified error budget of a truncated uniformized evolution.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TruncationCertificate {
    /// Max displacement allowed for particle 1.
    pub k_max: i64,
    /// `P(Poisson(t_max) >= k_max)`: probability the truncation is ever hit.
    pub spatial_tail: f64,
    /// Uniformization rate (the particle count).
    pub uniformization_rate: f64,
    /// Poisson series terms kept per propagation segment.
    pub steps: Vec<usize>,
    /// Sum of the discarded Poisson series tails.
    pub series_tail: f64,
}

impl TruncationCertificate {
    pub fn total_error(&self) -> f64 {
        self.spatial_tail + self.series_tail
    }
}

#[derive(Debug, Clone)]
pub struct CtmcValue {
    pub value: f64,
    pub certificate: TruncationCertificate,
}

/// Poisson upper tail `P(Po(lambda) >= k)` via the always-positive series
/// `pmf(k) * (1 + lambda/(k+1) + ...)`; no cancellation.
pub fn poisson_tail(lambda: f64, k: i64) -> f64 {
    if k <= 0 {
        return 1.0;
    }
    if lambda == 0.0 {
        return 0.0;
    }
    let k = k as u64;
    let mut pmf = (-lambda).exp();
    for j in 1..=k {
        pmf *= lambda / j as f64;
    }
    let mut term = pmf;
    let mut sum = 0.0;
    let mut j = k;
    while term > sum * 1e-18 + 1e-320 {
        sum += term;
        j += 1;
        term *= lambda / j as f64;
    }
    sum.min(1.0)
}

fn poisson_pmf_upto(lambda: f64, jmax: usize) -> Vec<f64> {
    let mut p = vec![0.0; jmax + 1];
    p[0] = (-lambda).exp();
    for j in 1..=jmax {
        p[j] = p[j - 1] * lambda / j as f64;
    }
    p
}

/// `P(Po(t_1) >= b_1, ..., Po(t_m) >= b_m)` for one free particle, by dynamic
/// programming over the independent increments.
pub fn poisson_joint(thresholds: &[i64], times: &[f64]) -> Result<f64> {
    if thresholds.len() != times.len() || times.is_empty() {
        return Err(Error::Invalid("thresholds and times must have equal nonzero length".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times[0] < 0.0 {
        return Err(Error::Invalid("times must be sorted and nonnegative".into()));
    }
    let t_last = *times.last().unwrap();
    // support large enough that the discarded tail is ~1e-16
    let mut jmax = 32usize;
    while poisson_tail(t_last, jmax as i64) > 1e-16 {
        jmax *= 2;
    }
    let mut dist = poisson_pmf_upto(times[0], jmax);
    let mut prev_t = times[0];
    for l in 0..times.len() {
        if l > 0 {
            let dt = times[l] - prev_t;
            prev_t = times[l];
            if dt > 0.0 {
                let inc = poisson_pmf_upto(dt, jmax);
                let mut next = vec![0.0; jmax + 1];
                for j in 0..=jmax {
                    if dist[j] == 0.0 {
                        continue;
                    }
                    for dj in 0..=(jmax - j) {
                        next[j + dj] += dist[j] * inc[dj];
                    }
                }
                dist = next;
            }
        }
        let b = thresholds[l];
        if b > 0 {
            for j in 0..(b as usize).min(jmax + 1) {
                dist[j] = 0.0;
            }
        }
    }
    Ok(dist.iter().sum::<f64>().min(1.0))
}

struct TruncatedChain {
    states: Vec<Vec<i64>>,
    index: HashMap<Vec<i64>, usize>,
    /// per state: allowed jump targets (state indices)
    moves: Vec<Vec<usize>>,
    n: usize,
}

impl TruncatedChain {
    fn build(y: &ParticleConfig, k_max: i64) -> Result<Self> {
        let n = y.n();
        let ys = y.positions();
        let cap = ys[0] + k_max;
        let mut states = Vec::new();
        let mut stack: Vec<Vec<i64>> = vec![Vec::new()];
        while let Some(partial) = stack.pop() {
            let i = partial.len();
            if i == n {
                states.push(partial);
                continue;
            }
            let lo = ys[i];
            let hi = if i == 0 { cap } else { partial[i - 1] - 1 };
            for x in lo..=hi {
                let mut next = partial.clone();
                next.push(x);
                stack.push(next);
            }
        }
        if states.len() > 5_000_000 {
            return Err(Error::Unsupported(format!(
                "truncated state space has {} states (> 5e6)",
                states.len()
            )));
        }
        states.sort();
        let index: HashMap<Vec<i64>, usize> =
            states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut moves = Vec::with_capacity(states.len());
        for s in &states {
            let mut out = Vec::new();
            for i in 0..n {
                let free = if i == 0 { s[0] < cap } else { s[i - 1] - s[i] > 1 };
                if free {
                    let mut t = s.clone();
                    t[i] += 1;
                    out.push(index[&t]);
                }
            }
            moves.push(out);
        }
        Ok(Self { states, index, moves, n })
    }

    /// One uniformized step `pi <- pi P` at rate `Lambda = n`.
    fn step(&self, pi: &[f64]) -> Vec<f64> {
        let lam = self.n as f64;
        let mut next = vec![0.0; pi.len()];
        for (s, &mass) in pi.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let d = self.moves[s].len() as f64;
            next[s] += mass * (1.0 - d / lam);
            for &t in &self.moves[s] {
                next[t] += mass / lam;
            }
        }
        next
    }

    /// Propagates `pi` over a time interval `dt`, returning the series length
    /// used and the discarded Poisson tail.
    fn propagate(&self, pi: &mut Vec<f64>, dt: f64, tail_budget: f64) -> (usize, f64) {
        if dt == 0.0 {
            return (0, 0.0);
        }
        let lam_t = self.n as f64 * dt;
        let mut steps = 8usize;
        while poisson_tail(lam_t, steps as i64) > tail_budget {
            steps *= 2;
        }
        let weights = poisson_pmf_upto(lam_t, steps);
        let mut acc = vec![0.0; pi.len()];
        let mut v = pi.clone();
        for (j, &wj) in weights.iter().enumerate() {
            for (a, &b) in acc.iter_mut().zip(v.iter()) {
                *a += wj * b;
            }
            if j + 1 < weights.len() {
                v = self.step(&v);
            }
        }
        let tail = poisson_tail(lam_t, steps as i64 + 1);
        *pi = acc;
        (steps, tail)
    }
}

/// Exact (to a certified tolerance) joint probability by uniformization on a
/// truncated state space: propagate to each observation time, zero out the
/// states violating that observation, and sum the surviving mass.
pub fn ctmc_exact(y: &ParticleConfig, obs: &ObservationSet, tol: f64) -> Result<CtmcValue> {
    obs.validate_for(y.n())?;
    if y.n() > 4 {
        return Err(Error::Unsupported("ctmc_exact supports N <= 4".into()));
    }
    let t_max = obs.observations().last().map(|o| o.t).unwrap_or(0.0);
    if t_max > 4.0 {
        return Err(Error::Unsupported("ctmc_exact supports t_max <= 4".into()));
    }
    if tol < 1e-8 {
        return Err(Error::Invalid("ctmc_exact tolerance must be >= 1e-8".into()));
    }
    let mut k_max = 8i64;
    while poisson_tail(t_max, k_max) > tol / 2.0 {
        k_max += 4;
    }
    let spatial_tail = poisson_tail(t_max, k_max);
    let chain = TruncatedChain::build(y, k_max)?;
    let mut pi = vec![0.0; chain.states.len()];
    pi[chain.index[&y.positions().to_vec()]] = 1.0;

    let m = obs.m();
    let budget = tol / (2.0 * m as f64);
    let mut prev_t = 0.0;
    let mut steps = Vec::new();
    let mut series_tail = 0.0;
    for o in obs.observations() {
        let (st, tail) = chain.propagate(&mut pi, o.t - prev_t, budget);
        steps.push(st);
        series_tail += tail;
        prev_t = o.t;
        for (s, mass) in pi.iter_mut().enumerate() {
            if chain.states[s][o.k - 1] < o.a {
                *mass = 0.0;
            }
        }
    }
    let value: f64 = pi.iter().sum();
    let certificate = TruncationCertificate {
        k_max,
        spatial_tail,
        uniformization_rate: y.n() as f64,
        steps,
        series_tail,
    };
    if certificate.total_error() >= tol {
        return Err(Error::Conditioning(format!(
            "certificate error {:.3e} not below requested tolerance {tol:.1e}",
            certificate.total_error()
        )));
    }
    Ok(CtmcValue { value, certificate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multipoint::Observation;

    fn obs1(k: usize, a: i64, t: f64) -> ObservationSet {
        ObservationSet::new(vec![Observation { k, a, t }]).unwrap()
    }

    #[test]
    fn poisson_tail_basics() {
        assert_eq!(poisson_tail(1.0, 0), 1.0);
        assert!((poisson_tail(1.0, 1) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!(poisson_tail(1.0, 40) < 1e-40);
    }

    #[test]
    fn poisson_joint_examples() {
        let p = poisson_joint(&[1], &[1.0]).unwrap();
        assert!((p - (1.0 - (-1.0f64).exp())).abs() < 1e-14);

        let p2 = poisson_joint(&[1, 2], &[1.0, 2.0]).unwrap();
        let expect = 1.0 - (-1.0f64).exp() - (-2.0f64).exp();
        assert!((p2 - expect).abs() < 1e-13, "{p2} vs {expect}");

        let sure = poisson_joint(&[0, -3], &[1.0, 2.0]).unwrap();
        assert!((sure - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ctmc_single_particle_matches_poisson() {
        let y = ParticleConfig::step(1);
        let v = ctmc_exact(&y, &obs1(1, 0, 1.0), 1e-8).unwrap();
        let expect = poisson_tail(1.0, 1);
        assert!(
            (v.value - expect).abs() < v.certificate.total_error() + 1e-12,
            "{} vs {expect}",
            v.value
        );
    }

    #[test]
    fn ctmc_multi_time_matches_poisson_joint() {
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::new(vec![
            Observation { k: 1, a: 0, t: 1.0 },
            Observation { k: 1, a: 1, t: 2.0 },
        ])
        .unwrap();
        let v = ctmc_exact(&y, &obs, 1e-8).unwrap();
        let expect = 1.0 - (-1.0f64).exp() - (-2.0f64).exp();
        assert!((v.value - expect).abs() < 1e-8, "{} vs {expect}", v.value);
    }

    #[test]
    fn ctmc_truncation_stability() {
        // raising K by 5 changes the value by less than the certificate error
        let y = ParticleConfig::step(2);
        let obs = obs1(2, -1, 1.0);
        let a = ctmc_exact(&y, &obs, 1e-8).unwrap();
        let chain = TruncatedChain::build(&y, a.certificate.k_max + 5).unwrap();
        let mut pi = vec![0.0; chain.states.len()];
        pi[chain.index[&y.positions().to_vec()]] = 1.0;
        chain.propagate(&mut pi, 1.0, 1e-12);
        let value: f64 = pi
            .iter()
            .enumerate()
            .filter(|(s, _)| chain.states[*s][1] >= -1)
            .map(|(_, &m)| m)
            .sum();
        assert!((a.value - value).abs() < a.certificate.total_error() + 1e-10);
    }

    #[test]
    fn mc_free_particle_window() {
        let y = ParticleConfig::step(1);
        let cfg = MCConfig::new(42, 200_000);
        let (p, se) = mc_joint(&y, &obs1(1, 0, 1.0), &cfg, None).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        assert!((p - expect).abs() < 4.0 * se, "{p} vs {expect} (se {se})");
    }

    #[test]
    fn mc_agrees_with_ctmc_when_blocked() {
        let y = ParticleConfig::step(2);
        let obs = obs1(2, 0, 1.5);
        let cfg = MCConfig::new(7, 200_000);
        let (p, se) = mc_joint(&y, &obs, &cfg, None).unwrap();
        let exact = ctmc_exact(&y, &obs, 1e-8).unwrap().value;
        assert!((p - exact).abs() < 4.0 * se, "{p} vs {exact} (se {se})");
    }

    #[test]
    fn mc_periodic_free_particle_equals_infinite() {
        // a single particle on a ring of period 2 is never blocked
        let y = ParticleConfig::step(1);
        let cfg = MCConfig::new(3, 200_000);
        let (p_ring, se) = mc_joint(&y, &obs1(1, 0, 1.0), &cfg, Some(2)).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        assert!((p_ring - expect).abs() < 4.0 * se);
    }

    #[test]
    fn mc_is_deterministic_for_fixed_seed() {
        let y = ParticleConfig::step(2);
        let obs = obs1(1, 0, 1.0);
        let cfg = MCConfig::new(99, 20_000);
        let a = mc_joint(&y, &obs, &cfg, None).unwrap();
        let b = mc_joint(&y, &obs, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracles_return_one_for_very_negative_thresholds() {
        let y = ParticleConfig::step(3);
        let obs = obs1(2, -100, 2.0);
        let v = ctmc_exact(&y, &obs, 1e-8).unwrap();
        assert!((v.value - 1.0).abs() < 1e-10);
        let (p, _) = mc_joint(&y, &obs, &MCConfig::new(1, 10_000), None).unwrap();
        assert_eq!(p, 1.0);
    }
}

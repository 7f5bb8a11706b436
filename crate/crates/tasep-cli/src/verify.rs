//! The `verify` subcommand: a condensed identity and cross-validation suite
//! emitting a residual table. Deterministic for a fixed seed; exits 0 when
//! every residual is below its threshold and 3 otherwise.

use rand::{Rng, SeedableRng};
use serde::Serialize;

use tasep::cauchysum::{g_sum, g_zero_contour, ChainSpec, ToyProblem, ToyQ};
use tasep::multipoint::{
    dy_fredholm, dy_series, flat_probability, invariance_suite, joint_probability,
    reduction_identity_residual, ContourPlan, Observation, ObservationSet, ZVector,
};
use tasep::periodic::{large_period_residual, PeriodicParams, PeriodicPlan};
use tasep::simulate::poisson_tail;
use tasep::symfunc::{orthogonality_residual, ParticleConfig};
use tasep::Complex64;

#[derive(Serialize)]
struct Check {
    name: String,
    residual: f64,
    threshold: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    config_hash: String,
    seed: u64,
    checks: Vec<Check>,
    pass: bool,
}

fn obs2(a: (usize, i64, f64), b: (usize, i64, f64)) -> ObservationSet {
    ObservationSet::new(vec![
        Observation { k: a.0, a: a.1, t: a.2 },
        Observation { k: b.0, a: b.1, t: b.2 },
    ])
    .unwrap()
}

pub fn run_verify(config_hash: &str, seed: u64, cli: &super::Cli) -> i32 {
    let mut checks: Vec<Check> = Vec::new();
    let push = |name: &str, residual: f64, threshold: f64, checks: &mut Vec<Check>| {
        checks.push(Check {
            name: name.into(),
            residual,
            threshold,
            pass: residual < threshold,
        });
    };

    // free-particle exactness
    {
        let y = ParticleConfig::step(1);
        let plan = ContourPlan::default_for(1).unwrap();
        let obs = ObservationSet::single(1, 0, 1.0);
        let p = joint_probability(&y, &obs, &plan).unwrap();
        push("poisson-exactness", (p.value - poisson_tail(1.0, 1)).abs(), 1e-8, &mut checks);
    }

    // kernel orthogonality on seeded draws
    {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let n = rng.gen_range(1..=3usize);
            let mut pos = Vec::new();
            let mut cur = rng.gen_range(-2..3i64);
            for _ in 0..n {
                pos.push(cur);
                cur -= rng.gen_range(1..4i64);
            }
            let y = ParticleConfig::new(pos).unwrap();
            let u = Complex64::new(rng.gen_range(-1.8..-1.3), rng.gen_range(-0.3..0.3));
            for i in 1..=n {
                worst = worst.max(orthogonality_residual(&y, u, i).unwrap());
            }
        }
        push("orthogonality", worst, 1e-10, &mut checks);
    }

    // determinant invariances and the z-reduction identity
    {
        let y = ParticleConfig::step(1);
        let obs = obs2((1, 0, 1.0), (1, 1, 2.0));
        let mut plan = ContourPlan::default_for(2).unwrap();
        plan.error_probe = false;
        let z = ZVector::new(vec![Complex64::new(0.4, 0.2)]).unwrap();
        let rep = invariance_suite(&y, &obs, &plan, &z).unwrap();
        push("contour-reorder", rep.reorder_left.max(rep.reorder_right), 1e-8, &mut checks);
        push("weight-scaling", rep.scaling, 1e-10, &mut checks);
        push("global-shift", rep.shift, 1e-10, &mut checks);
        push("null-kernel", rep.null_kernel, 1e-8, &mut checks);
        let red = reduction_identity_residual(&y, &obs, &plan, 1, &[]).unwrap();
        push("z-reduction", red, 1e-8, &mut checks);
    }

    // flat delta kernel vs the general kernel
    {
        let yf = ParticleConfig::flat(2);
        let of = ObservationSet::single(2, -2, 1.0);
        let mut plan = ContourPlan::default_for(1).unwrap();
        plan.error_probe = false;
        let general = joint_probability(&yf, &of, &plan).unwrap();
        let delta = flat_probability(&of, &plan).unwrap();
        push("flat-delta", (general.value - delta.value).abs(), 1e-8, &mut checks);
    }

    // determinant route vs series route
    {
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::single(1, 0, 1.0);
        let plan = ContourPlan::with_nodes(1, 64, 16).unwrap();
        let f = dy_fredholm(&y, &obs, &ZVector::empty(), &plan).unwrap();
        let s = dy_series(&y, &obs, &ZVector::empty(), &plan, 1).unwrap();
        push("determinant-vs-series", (f - s).norm(), 1e-6, &mut checks);
    }

    // ring route collapses to the infinite lattice for a large enough period
    {
        let y = ParticleConfig::step(1);
        let obs = ObservationSet::single(1, 0, 1.0);
        let pplan = PeriodicPlan { z_nodes: 32, ..Default::default() };
        let mut fplan = ContourPlan::default_for(1).unwrap();
        fplan.error_probe = false;
        let r = large_period_residual(
            &y,
            &PeriodicParams::new(3, 1).unwrap(),
            &obs,
            &pplan,
            &fplan,
        )
        .unwrap();
        push("periodic-collapse", r, 1e-6, &mut checks);
    }

    // root-sum limit equals the nested contour integral
    {
        let spec = ChainSpec::new(vec![1, 1], vec![vec![0]], vec![vec![0]]).unwrap();
        let problem = ToyProblem::new(
            ToyQ::Bethe(PeriodicParams::new(3, 1).unwrap()),
            &spec,
            vec![vec![1], vec![0]],
            Box::new(|w, _z| 1e-3 / w[0][0]),
        )
        .unwrap();
        let z1 = Complex64::new(0.35, 0.15);
        let limit = g_zero_contour(&problem, &spec, &[z1], 0.03, 0.09, 128).unwrap();
        let g = g_sum(&problem, &spec, &[Complex64::new(1e-4, 0.0), z1]).unwrap();
        push("root-sum-limit", (g - limit).norm(), 1e-6, &mut checks);
    }

    let pass = checks.iter().all(|c| c.pass);
    let report = VerifyReport { config_hash: config_hash.into(), seed, checks, pass };
    let text = serde_json::to_string_pretty(&report).unwrap() + "\n";
    let write_result = match &cli.out {
        Some(path) => std::fs::write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    };
    if write_result.is_err() {
        return super::EXIT_CONFIG;
    }
    if pass {
        0
    } else {
        super::EXIT_QUALITY
    }
}

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use skloc::anneal::median;
use skloc::diagnostics::conditioned_instance;
use skloc::dynamics::{step_noise, Integrator, TrajectoryState};
use skloc::oracle::{restricted_product_log_z, Oracle, SpinConfig, Wedge};
use skloc::pipeline::{pack_bits, unpack_bits, InstanceSource, PipelineConfig};
use skloc::rejection::Calibration;
use skloc::rng::{derive_seed, substream};
use skloc::solver::{solve_from, solve_tap, SolverConfig};
use skloc::tap::{tap_free_energy, tap_gradient, tap_resolvent, Magnetization};
use skloc::walk::{walk_step, Target, WalkState};
use skloc::SkInstance;

fn interior(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.95f64..0.95, n)
}

fn tilt(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn goe_is_reproducible_and_symmetric(n in 1usize..40, seed in any::<u64>()) {
        let a = SkInstance::generate(n, 0.2, seed).unwrap();
        let b = SkInstance::generate(n, 0.2, seed).unwrap();
        prop_assert_eq!(a.couplings(), b.couplings());
        let c = a.couplings();
        prop_assert_eq!((c - c.transpose()).amax(), 0.0);
    }

    #[test]
    fn wedge_log_z_is_monotone_in_radius(seed in any::<u64>(), y in tilt(7), beta in 0.0f64..0.45) {
        let inst = SkInstance::generate(7, beta, seed).unwrap();
        let y = DVector::from_vec(y);
        let oracle = Oracle::default();
        let center = SpinConfig::sign_of(y.as_slice());
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=7 {
            let v = oracle.log_partition(&inst, &y, Some(&Wedge::new(center.clone(), k).unwrap())).unwrap();
            prop_assert!(v >= prev - 1e-12);
            prev = v;
        }
        let full = oracle.log_partition(&inst, &y, None).unwrap();
        prop_assert!((prev - full).abs() < 1e-12);
    }

    #[test]
    fn product_wedge_matches_enumeration(n in 1usize..=10, y in tilt(10), flips in any::<u16>(), k in 0usize..=10) {
        let y = DVector::from_iterator(n, y.into_iter().take(n));
        let k = k.min(n);
        let center = SpinConfig::from_index(flips as u64 & ((1u64 << n) - 1), n);
        let wedge = Wedge::new(center, k).unwrap();
        let inst = SkInstance::generate(n, 0.0, 1).unwrap();
        let brute = Oracle::default().log_partition(&inst, &y, Some(&wedge)).unwrap();
        prop_assert!((restricted_product_log_z(&y, &wedge).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_free_energy_differences(seed in any::<u64>(), m in interior(8), y in tilt(8)) {
        let inst = SkInstance::generate(8, 0.3, seed).unwrap();
        let y = DVector::from_vec(y);
        let mag = Magnetization::from_values(DVector::from_vec(m.clone())).unwrap();
        let g = tap_gradient(&inst, &mag, &y).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let mut p = m.clone();
            let mut q = m.clone();
            p[i] += h;
            q[i] -= h;
            let fp = tap_free_energy(&inst, &Magnetization::from_values(DVector::from_vec(p)).unwrap(), &y).unwrap();
            let fq = tap_free_energy(&inst, &Magnetization::from_values(DVector::from_vec(q)).unwrap(), &y).unwrap();
            let fd = (fp - fq) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * g.amax().max(1.0));
        }
    }

    #[test]
    fn resolvent_bounds_under_the_event(seed in any::<u64>(), n in 4usize..24, scale in 0.0f64..0.99) {
        let inst = conditioned_instance(n, 0.3, seed).unwrap();
        let mut rng = substream(seed, 1);
        let m = DVector::from_fn(n, |_, _| scale * (2.0 * rand::Rng::gen::<f64>(&mut rng) - 1.0));
        let mag = Magnetization::from_values(m).unwrap();
        let q = tap_resolvent(&inst, &mag).unwrap();
        let gamma = inst.gamma();
        let ev = q.clone().symmetric_eigenvalues();
        prop_assert!(ev.max() <= 1.0 / gamma + 1e-12);
        let d = mag.d_diag().map(f64::sqrt);
        let s = DMatrix::from_fn(n, n, |i, j| d[i] * q[(i, j)] * d[j]);
        let se = s.symmetric_eigenvalues();
        prop_assert!(se.min() >= 0.25 && se.max() <= 2.0 / gamma);
    }

    #[test]
    fn solver_output_is_stationary_idempotent_and_unique(seed in any::<u64>(), y in tilt(12), far in -20.0f64..20.0) {
        let inst = conditioned_instance(12, 0.3, seed).unwrap();
        let y = DVector::from_vec(y);
        let cfg = SolverConfig { tol: 1e-10, ..SolverConfig::default() };
        let r = solve_tap(&inst, &y, &cfg).unwrap();
        prop_assert!(r.converged);
        prop_assert!(tap_gradient(&inst, &r.m, &y).unwrap().amax() <= cfg.tol);
        let again = solve_from(&inst, &y, r.m.dual().clone(), &cfg).unwrap();
        prop_assert!((again.m.values() - r.m.values()).amax() <= cfg.tol);
        let other = solve_from(&inst, &y, DVector::from_element(12, far), &cfg).unwrap();
        prop_assert!((other.m.values() - r.m.values()).amax() <= 10.0 * cfg.tol);
    }

    #[test]
    fn trajectories_stay_inside_the_cube(seed in any::<u64>(), noise in any::<u64>()) {
        let inst = SkInstance::generate(6, 0.4, seed).unwrap();
        let mut integ = Integrator::new(&inst, SolverConfig::default()).unwrap();
        let mut state = TrajectoryState::initial(6);
        for k in 0..60 {
            let xi = step_noise(noise, k, 6);
            integ.step(&mut state, 0.1, &xi).unwrap();
            prop_assert!(state.min_gap() > 0.0);
            prop_assert!(state.m.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn walk_stays_in_wedge_with_exact_cache(seed in any::<u64>(), y in tilt(9), k in 0usize..=9, flips in any::<u16>()) {
        let inst = SkInstance::generate(9, 0.35, seed).unwrap();
        let y = DVector::from_vec(y);
        let center = SpinConfig::from_index(flips as u64 & 0x1ff, 9);
        let wedge = Wedge::new(center, k).unwrap();
        let target = Target::from_instance(&inst, &y).unwrap();
        let mut state = WalkState::at_center(&target, &wedge).unwrap();
        let mut rng = substream(seed, 2);
        for _ in 0..10_000 {
            walk_step(&target, &mut state, &mut rng);
            prop_assert!(state.flipped_count() <= k);
        }
        prop_assert!(wedge.contains(&state.config()));
        prop_assert!(state.refresh(&target) <= 1e-8);
    }

    #[test]
    fn median_resists_a_quarter_of_outliers(mut v in prop::collection::vec(-5.0f64..5.0, 8..64), junk in prop::collection::vec(prop_oneof![Just(-1e9f64), Just(1e9f64)], 16)) {
        let before = median(&v);
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let r = v.len();
        let iqr = sorted[(3 * (r - 1)).div_ceil(4)] - sorted[(r - 1) / 4];
        for (slot, j) in v.iter_mut().take(r / 4).zip(junk) {
            *slot = j;
        }
        prop_assert!((median(&v) - before).abs() <= iqr + 1e-12);
    }

    #[test]
    fn acceptance_monotone_and_truncated(lw in -20.0f64..20.0, r0 in -10.0f64..10.0, c3 in 8.0f64..1e3, bump in 0.0f64..5.0) {
        let cal = |log_r0: f64| Calibration { c1: 1.0, c2: c3 / 8.0, c3, p: 0.5, log_r0, draws: 1 };
        let a = cal(r0).acceptance_probability(lw);
        let b = cal(r0 + bump).acceptance_probability(lw);
        prop_assert!(b <= a);
        if lw >= cal(r0).log_threshold() {
            prop_assert_eq!(a, 1.0);
        }
    }

    #[test]
    fn pipeline_config_round_trip(n in 1usize..50, beta in 0.0f64..0.5, seed in any::<u64>(), eps in 0.01f64..1.0, samples in 0usize..1000, walk in prop::option::of(1usize..10_000)) {
        let cfg = PipelineConfig {
            walk_steps: walk,
            wedge_eps: eps,
            ..PipelineConfig::from_json(&format!(
                r#"{{"instance": {{"kind": "generate", "n": {n}, "beta": {beta:e}, "seed": {seed}}}, "num_samples": {samples}, "seed": {}}}"#,
                seed / 2
            )).unwrap()
        };
        let a = cfg.to_json().unwrap();
        let back = PipelineConfig::from_json(&a).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json().unwrap(), a);
        let generated = matches!(back.instance, InstanceSource::Generate { .. });
        prop_assert!(generated);
    }

    #[test]
    fn packed_bits_round_trip(n in 1usize..200, seed in any::<u64>()) {
        let mut rng = substream(seed, 0);
        let s = SpinConfig::new((0..n).map(|_| if rand::Rng::gen::<bool>(&mut rng) { 1 } else { -1 }).collect()).unwrap();
        prop_assert_eq!(unpack_bits(&pack_bits(&s), n).unwrap(), s);
    }
}

#[test]
fn spectral_event_is_typical_at_large_n() {
    let hits = (0..100u64)
        .filter(|&s| SkInstance::generate(500, 0.45, derive_seed(77, s)).unwrap().check_spectral_event().unwrap())
        .count();
    assert!(hits >= 90, "{hits}/100");
}

#[test]
fn resolvent_lipschitz_constant_does_not_grow_with_n() {
    let worst = |n: usize| {
        let inst = conditioned_instance(n, 0.3, n as u64).unwrap();
        let mut rng = substream(n as u64, 3);
        let mut l = 0.0f64;
        for _ in 0..10 {
            let m = DVector::from_fn(n, |_, _| 0.9 * (2.0 * rand::Rng::gen::<f64>(&mut rng) - 1.0));
            let w = DVector::from_fn(n, |_, _| 0.9 * (2.0 * rand::Rng::gen::<f64>(&mut rng) - 1.0));
            let qm = tap_resolvent(&inst, &Magnetization::from_values(m.clone()).unwrap()).unwrap();
            let qw = tap_resolvent(&inst, &Magnetization::from_values(w.clone()).unwrap()).unwrap();
            l = l.max((qm - qw).norm() / (m - w).norm());
        }
        l
    };
    let (small, large) = (worst(25), worst(200));
    assert!(large <= 2.0 * small, "{small} {large}");
}

/// Euler paths at `eta` and `eta / 2` driven by the same Brownian increments.
fn coupled_gap(inst: &SkInstance, eta: f64, paths: u64) -> f64 {
    let n = inst.n();
    let steps = (1.0 / eta).round() as usize;
    let mut total = 0.0;
    for p in 0..paths {
        let mut coarse = TrajectoryState::initial(n);
        let mut fine = TrajectoryState::initial(n);
        let mut ic = Integrator::new(inst, SolverConfig::default()).unwrap();
        let mut ifn = Integrator::new(inst, SolverConfig::default()).unwrap();
        for k in 0..steps {
            let a = step_noise(p, 2 * k, n);
            let b = step_noise(p, 2 * k + 1, n);
            ifn.step(&mut fine, eta / 2.0, &a).unwrap();
            ifn.step(&mut fine, eta / 2.0, &b).unwrap();
            ic.step(&mut coarse, eta, &((a + b) / 2f64.sqrt())).unwrap();
        }
        total += (coarse.y - fine.y).norm();
    }
    total / paths as f64
}

#[test]
fn halving_the_step_shrinks_the_coupled_gap() {
    let inst = SkInstance::generate(4, 0.3, 5).unwrap();
    let d1 = coupled_gap(&inst, 0.1, 40);
    let d2 = coupled_gap(&inst, 0.05, 40);
    let d3 = coupled_gap(&inst, 0.025, 40);
    assert!(d2 < 0.75 * d1 && d3 < 0.75 * d2, "{d1} {d2} {d3}");
}

#[test]
fn fixed_seeds_reproduce_trajectories() {
    let inst = SkInstance::generate(5, 0.3, 8).unwrap();
    let cfg = skloc::dynamics::DynamicsConfig::fitted(1.0, 0.05, SolverConfig::default(), 4).unwrap();
    let a = skloc::dynamics::run_trajectory(&inst, &cfg).unwrap();
    let b = skloc::dynamics::run_trajectory(&inst, &cfg).unwrap();
    assert_eq!(a, b);
}

mod common;

use common::{one_server, random_instance};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use stallbound::analysis::{pk_waiting_mgf, sdtp_bound, shifted_exp_mgf};
use stallbound::model::{closest_feasible, ControlPoint};
use stallbound::simulator::{
    dispersion_index, empirical_sdtp, playback, run_sim, second_queue_arrival_check, SimConfig, SimTrace,
};
use stallbound::workload::{generate_catalog, reference_topology, WorkloadSpec};

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Single cached stream with exponential service of rate `alpha`.
fn mm1(lambda: f64, alpha: f64, horizon: f64, seed: u64) -> SimTrace {
    let inst = one_server((alpha, 2.0 * alpha, 0.0), vec![1], vec![lambda], vec![1], vec![1.0], vec![0.5], vec![0.5], 0.1);
    run_sim(&SimConfig::new(inst.topology, inst.catalog, inst.point, horizon, seed)).unwrap()
}

/// Second-order forward difference of the waiting transform at 0.
fn pk_mean(lambda: f64, alpha: f64) -> f64 {
    let w = |t: f64| pk_waiting_mgf(lambda, lambda / alpha, shifted_exp_mgf(alpha, 0.0, t).value, t).unwrap().value;
    let h = 1e-4;
    (-3.0 * w(0.0) + 4.0 * w(h) - w(2.0 * h)) / (2.0 * h)
}

#[test]
fn lone_fast_cached_request_plays_on_schedule() {
    let mut inst = one_server((1e9, 2e9, 0.0), vec![2], vec![1e-3], vec![2], vec![1.0], vec![0.5], vec![0.5], 0.1);
    inst.catalog.d_s = 2.0;
    let mut cfg = SimConfig::new(inst.topology, inst.catalog, inst.point, 2e4, 3);
    cfg.warmup = 0.0;
    let trace = run_sim(&cfg).unwrap();
    assert!(!trace.requests.is_empty());
    for r in &trace.requests {
        assert_eq!(r.play[0], 2.0);
        assert!(r.gamma < 1e-6, "{}", r.gamma);
    }
}

#[test]
fn overload_is_reported_and_the_queue_grows() {
    let trace = mm1(3.0, 2.0, 2e4, 5);
    assert_eq!(trace.saturated.len(), 1);
    let half = trace.requests.len() / 2;
    let early = mean(trace.requests[..half].iter().map(|r| r.queue_wait));
    let late = mean(trace.requests[half..].iter().map(|r| r.queue_wait));
    assert!(late > 1.5 * early, "{early} then {late}");
}

#[test]
fn zero_rate_stream_receiving_traffic_is_an_error() {
    let inst = one_server((5.0, 10.0, 0.0), vec![1], vec![0.5], vec![1], vec![1.0], vec![0.5], vec![0.0], 0.1);
    assert!(run_sim(&SimConfig::new(inst.topology, inst.catalog, inst.point, 100.0, 1)).is_err());
}

#[test]
fn single_stream_wait_matches_the_textbook_mean() {
    let (lambda, alpha) = (0.5, 2.0);
    let trace = mm1(lambda, alpha, 1.25e6, 17);
    assert!(trace.requests.len() >= 100_000);
    let rho = lambda / alpha;
    // λE[S²] / 2(1-ρ) with E[S²] = 2/α²
    let want = lambda * (2.0 / (alpha * alpha)) / (2.0 * (1.0 - rho));
    let got = mean(trace.requests.iter().map(|r| r.queue_wait));
    assert!((got - want).abs() <= 0.05 * want, "{got} vs {want}");
}

#[test]
fn transform_slope_matches_simulated_time_in_system() {
    let (lambda, alpha) = (0.5, 2.0);
    let trace = mm1(lambda, alpha, 1.25e6, 17);
    let want = pk_mean(lambda, alpha);
    let got = mean(trace.requests.iter().map(|r| r.download[0]));
    assert!((got - want).abs() <= 0.05 * want, "{got} vs {want}");
}

// The waiting transform includes the batch-service factor, so its slope at
// 0 is the mean time in system, not the mean wait.
#[test]
#[ignore = "transform slope is wait plus service; exceeds the simulated wait"]
fn transform_slope_matches_simulated_wait() {
    let (lambda, alpha) = (0.5, 2.0);
    let trace = mm1(lambda, alpha, 1.25e6, 17);
    let want = pk_mean(lambda, alpha);
    let got = mean(trace.requests.iter().map(|r| r.queue_wait));
    assert!((got - want).abs() <= 0.05 * want, "{got} vs {want}");
}

#[test]
fn sigma_zero_counts_every_request() {
    let trace = mm1(0.5, 2.0, 1e4, 2);
    let emp = empirical_sdtp(&trace, 1, &[0.0, 1e9]);
    assert_eq!(emp.points[0].p_hat, 1.0);
    assert_eq!(emp.points[1].p_hat, 0.0);
}

#[test]
fn files_without_requests_are_flagged() {
    let trace = mm1(0.5, 2.0, 1e3, 2);
    let emp = empirical_sdtp(&trace, 2, &[1.0]);
    assert_eq!(emp.empty_files, vec![1]);
    assert!(emp.points.iter().all(|p| p.file == 0));
}

#[test]
fn poisson_epochs_have_unit_dispersion() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gap = Exp::new(2.0).unwrap();
    let mut t = 0.0;
    let mut epochs = Vec::new();
    while t < 2e5 {
        t += gap.sample(&mut rng);
        epochs.push(t);
    }
    // 10⁴ windows of 20 s
    let d = dispersion_index(&epochs, 0.0, 2e5, 20.0).unwrap();
    assert_eq!(d.windows, 10_000);
    assert!((0.9..=1.1).contains(&d.index), "{}", d.index);
}

#[test]
fn regular_epochs_are_underdispersed() {
    let epochs: Vec<f64> = (0..100_000).map(|k| k as f64 * 0.5).collect();
    let d = dispersion_index(&epochs, 0.0, 5e4, 5.0).unwrap();
    assert!(d.index < 0.05, "{}", d.index);
}

#[test]
fn too_few_windows_are_inconclusive() {
    assert!(dispersion_index(&[1.0, 2.0], 0.0, 10.0, 1.0).is_none());
}

#[test]
fn tandem_arrivals_look_poisson_at_moderate_load() {
    // d stream at ρ = 0.5 feeding its d̄ partner.
    let inst = one_server((4.0, 8.0, 0.0), vec![2], vec![1.0], vec![0], vec![1.0], vec![0.5], vec![0.5], 0.1);
    let trace = run_sim(&SimConfig::new(inst.topology, inst.catalog, inst.point, 1e5, 21)).unwrap();
    let check = second_queue_arrival_check(&trace);
    let pooled = check.pooled.unwrap();
    assert!((0.8..=1.2).contains(&pooled), "{pooled}");
}

fn desk() -> (stallbound::model::SystemTopology, stallbound::model::VideoCatalog, ControlPoint) {
    let topology = reference_topology(4, 20, 40).unwrap();
    let catalog = generate_catalog(&WorkloadSpec::reference(50, 7)).unwrap();
    let point = closest_feasible(&ControlPoint::uniform(&topology, &catalog), &topology, &catalog).unwrap();
    (topology, catalog, point)
}

#[test]
fn desk_instance_stays_under_its_bound() {
    let (topology, catalog, point) = desk();
    let sigmas = [0.0, 2.0, 5.0, 10.0, 20.0, 40.0];
    let trace = run_sim(&SimConfig::new(topology.clone(), catalog.clone(), point.clone(), 5e4, 7)).unwrap();
    assert!(trace.saturated.is_empty());
    let emp = empirical_sdtp(&trace, catalog.r(), &sigmas);
    for p in &emp.points {
        let bound = sdtp_bound(p.file, p.sigma, &topology, &catalog, &point).unwrap().clipped;
        assert!(p.p_hat <= bound + 3.0 * p.stderr, "file {} σ {}: {} > {bound}", p.file, p.sigma, p.p_hat);
    }
}

#[test]
fn dispatch_frequencies_follow_the_schedule() {
    let (topology, catalog, point) = desk();
    let trace = run_sim(&SimConfig::new(topology.clone(), catalog.clone(), point.clone(), 5e4, 13)).unwrap();
    let hot = (0..catalog.r()).max_by(|&a, &b| catalog.lambda[a].total_cmp(&catalog.lambda[b])).unwrap();
    let reqs: Vec<_> = trace.requests.iter().filter(|r| r.file == hot).collect();
    let n = reqs.len() as f64;
    for j in 0..topology.m() {
        let pi = point.schedule.pi[hot][j];
        let got = reqs.iter().filter(|r| r.server == j).count() as f64 / n;
        let se = (pi * (1.0 - pi) / n).sqrt();
        assert!((got - pi).abs() <= 3.0 * se + 1e-12, "server {j}: {got} vs {pi}");
    }
}

#[test]
fn same_seed_gives_identical_traces() {
    let inst = random_instance(4, 3, 5, 6, 3, 0.8);
    let cfg = SimConfig::new(inst.topology, inst.catalog, inst.point, 2e3, 99);
    assert_eq!(run_sim(&cfg).unwrap(), run_sim(&cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn traces_satisfy_the_playback_recursion(seed in any::<u64>(), sim_seed in any::<u64>()) {
        let inst = random_instance(seed, 3, 5, 6, 3, 0.8);
        let (tau, d_s) = (inst.catalog.tau, inst.catalog.d_s);
        let cache = inst.point.placement.segments.clone();
        let trace = run_sim(&SimConfig::new(inst.topology, inst.catalog.clone(), inst.point, 500.0, sim_seed)).unwrap();
        for r in &trace.requests {
            prop_assert_eq!(r.download.len(), inst.catalog.lengths[r.file] as usize);
            // the cache and the datacenter path download in parallel
            let (cached, fetched) = r.download.split_at(cache[r.server][r.file] as usize);
            prop_assert!(cached.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(fetched.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.gamma >= 0.0);
            prop_assert_eq!(r.play[0], d_s.max(r.download[0]));
            for g in 1..r.play.len() {
                prop_assert_eq!(r.play[g], (r.play[g - 1] + tau).max(r.download[g]));
            }
            let (play, gamma) = playback(&r.download, tau, d_s);
            prop_assert_eq!(&play, &r.play);
            prop_assert_eq!(gamma, r.gamma);
        }
    }

    #[test]
    fn cached_batches_leave_each_stream_in_arrival_order(seed in any::<u64>()) {
        let inst = random_instance(seed, 2, 4, 5, 2, 0.8);
        let point = inst.point.clone();
        let trace = run_sim(&SimConfig::new(inst.topology, inst.catalog, inst.point, 500.0, seed)).unwrap();
        let mut last: std::collections::HashMap<(usize, usize), f64> = Default::default();
        for r in &trace.requests {
            let c = point.placement.segments[r.server][r.file] as usize;
            if c == 0 {
                continue;
            }
            let done = r.arrival + r.download[c - 1];
            let prev = last.insert((r.server, r.nu), done);
            prop_assert!(prev.is_none_or(|p| p <= done));
            // work conserving: service starts at arrival when the stream is idle
            prop_assert!(r.queue_wait >= 0.0);
            if let Some(p) = prev {
                if p <= r.arrival {
                    prop_assert_eq!(r.queue_wait, 0.0);
                }
            }
        }
    }
}

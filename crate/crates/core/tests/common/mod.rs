#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stallbound::analysis::QueueSnapshot;
use stallbound::model::{
    closest_feasible, AuxVars, BandwidthWeights, CachePlacement, ControlPoint, ScheduleMatrices, SystemTopology,
    VideoCatalog,
};

pub struct Instance {
    pub topology: SystemTopology,
    pub catalog: VideoCatalog,
    pub point: ControlPoint,
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Random small feasible instance with every load below `max_rho`.
pub fn random_instance(seed: u64, max_m: usize, max_r: usize, max_l: u32, max_streams: usize, max_rho: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=max_m);
    let r = rng.random_range(1..=max_r);
    let d: Vec<usize> = (0..m).map(|_| rng.random_range(1..=max_streams)).collect();
    let e: Vec<usize> = (0..m).map(|_| rng.random_range(1..=max_streams)).collect();
    let topology = SystemTopology {
        d: d.clone(),
        e: e.clone(),
        alpha_d_base: (0..m).map(|_| rng.random_range(5.0..40.0)).collect(),
        alpha_f_base: (0..m).map(|_| rng.random_range(5.0..40.0)).collect(),
        eta_d: (0..m).map(|_| rng.random_range(0.0..0.05)).collect(),
        eta_dbar: (0..m).map(|_| rng.random_range(0.0..0.05)).collect(),
        eta_e: (0..m).map(|_| rng.random_range(0.0..0.05)).collect(),
    };
    let lengths: Vec<u32> = (0..r).map(|_| rng.random_range(1..=max_l)).collect();
    let mut catalog = VideoCatalog {
        lambda: (0..r).map(|_| rng.random_range(0.05..0.5)).collect(),
        weight: (0..r).map(|_| rng.random_range(0.1..1.0)).collect(),
        lengths,
        tau: rng.random_range(0.5..2.0),
        d_s: rng.random_range(0.0..2.0),
        sigma: 1.0,
    };
    let schedule = ScheduleMatrices {
        pi: (0..r).map(|_| random_simplex(&mut rng, m)).collect(),
        p: (0..r).map(|_| (0..m).map(|j| random_simplex(&mut rng, e[j])).collect()).collect(),
        q: (0..r).map(|_| (0..m).map(|j| random_simplex(&mut rng, d[j])).collect()).collect(),
    };
    let mut w_dbar = Vec::new();
    let mut w_e = Vec::new();
    for j in 0..m {
        let joint = random_simplex(&mut rng, d[j] + e[j]);
        w_dbar.push(joint[..d[j]].to_vec());
        w_e.push(joint[d[j]..].to_vec());
    }
    let bandwidth = BandwidthWeights {
        w_d: (0..m).map(|j| random_simplex(&mut rng, d[j])).collect(),
        w_dbar,
        w_e,
    };
    let capacity = catalog.default_capacity();
    let mut segments = vec![vec![0u32; r]; m];
    for row in segments.iter_mut() {
        let mut used = 0u32;
        for (i, c) in row.iter_mut().enumerate() {
            let want = rng.random_range(0..=catalog.lengths[i]);
            if (used + want) as f64 <= capacity {
                *c = want;
                used += want;
            }
        }
    }
    let t: Vec<f64> = (0..r).map(|_| rng.random_range(0.05..1.0)).collect();
    let mut point = ControlPoint {
        schedule,
        bandwidth,
        placement: CachePlacement {
            segments,
            capacity: vec![capacity; m],
        },
        aux: AuxVars { t },
    };
    loop {
        let snap = QueueSnapshot::build(&topology, &catalog, &point.to_vars());
        let worst = snap.streams().iter().map(|s| s.rho).fold(0.0, f64::max);
        if worst < max_rho {
            break;
        }
        for l in catalog.lambda.iter_mut() {
            *l *= 0.5 * max_rho / worst;
        }
    }
    point = closest_feasible(&point, &topology, &catalog).expect("feasible after load scaling");
    Instance { topology, catalog, point }
}

/// One server, uniform routing over its streams, explicit bandwidth split
/// and cache row.
#[allow(clippy::too_many_arguments)]
pub fn one_server(
    (alpha_d, alpha_f, eta): (f64, f64, f64),
    lengths: Vec<u32>,
    lambda: Vec<f64>,
    cache: Vec<u32>,
    w_d: Vec<f64>,
    w_dbar: Vec<f64>,
    w_e: Vec<f64>,
    t: f64,
) -> Instance {
    let topology = SystemTopology {
        d: vec![w_d.len()],
        e: vec![w_e.len()],
        alpha_d_base: vec![alpha_d],
        alpha_f_base: vec![alpha_f],
        eta_d: vec![eta],
        eta_dbar: vec![eta],
        eta_e: vec![eta],
    };
    let r = lengths.len();
    let catalog = VideoCatalog {
        weight: vec![1.0; r],
        lengths,
        lambda,
        tau: 1.0,
        d_s: 0.0,
        sigma: 1.0,
    };
    let capacity = cache.iter().map(|&c| c as f64).sum::<f64>().max(1.0);
    let point = ControlPoint {
        schedule: ScheduleMatrices::uniform(&topology, r),
        bandwidth: BandwidthWeights { w_d: vec![w_d], w_dbar: vec![w_dbar], w_e: vec![w_e] },
        placement: CachePlacement { segments: vec![cache], capacity: vec![capacity] },
        aux: AuxVars { t: vec![t; r] },
    };
    Instance { topology, catalog, point }
}

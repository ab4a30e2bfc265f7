//! Discrete-event ground truth for the bound.
//!
//! Every stream is FIFO at request granularity and a `d` stream feeds its
//! `d̄` partner in the same order, so each stream can be advanced with a
//! Lindley-type recursion over requests sorted by arrival time. That is an
//! exact replay of the event-driven system: no stream ever needs to look
//! ahead of the request it is serving.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;

use crate::analysis::{QueueClass, QueueSnapshot};
use crate::error::{Error, Result};
use crate::model::{ControlPoint, SystemTopology, VideoCatalog};

/// Default fraction of the horizon discarded as warmup.
pub const WARMUP_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub topology: SystemTopology,
    pub catalog: VideoCatalog,
    pub point: ControlPoint,
    /// Arrivals are generated on `[0, horizon)`; every one of them is served
    /// to completion.
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(topology: SystemTopology, catalog: VideoCatalog, point: ControlPoint, horizon: f64, seed: u64) -> Self {
        Self {
            topology,
            catalog,
            point,
            horizon,
            warmup: WARMUP_FRACTION * horizon,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RequestRecord {
    pub id: u64,
    pub file: usize,
    pub server: usize,
    pub beta: usize,
    pub nu: usize,
    /// Absolute arrival time.
    pub arrival: f64,
    /// Segment download completions `D^(g)`, relative to arrival.
    pub download: Vec<f64>,
    /// Segment play starts `T^(g)`, relative to arrival.
    pub play: Vec<f64>,
    /// Total stall duration.
    pub gamma: f64,
    /// Time from arrival until the first stream the request joins starts
    /// serving it.
    pub queue_wait: f64,
    /// Absolute time the request's first segment joined its `d̄` stream.
    pub dbar_entry: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    /// Post-warmup requests in arrival order.
    pub requests: Vec<RequestRecord>,
    pub warmup: f64,
    pub horizon: f64,
    /// Streams with `ρ ≥ 1` under the simulated point.
    pub saturated: Vec<String>,
}

/// Stream identity used to derive independent random streams.
fn rng_for(seed: u64, purpose: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 60) | (a << 40) | (b << 20) | c);
    rng
}

const PURPOSE_ARRIVAL: u64 = 1;
const PURPOSE_DISPATCH: u64 = 2;
const PURPOSE_SERVICE: u64 = 3;

fn class_code(c: QueueClass) -> u64 {
    match c {
        QueueClass::E => 0,
        QueueClass::D => 1,
        QueueClass::Dbar => 2,
    }
}

struct Server {
    free: f64,
    exp: Option<Exp<f64>>,
    eta: f64,
    rng: ChaCha8Rng,
    label: String,
}

impl Server {
    fn draw(&mut self) -> Result<f64> {
        match &self.exp {
            Some(e) => Ok(self.eta + e.sample(&mut self.rng)),
            None => Err(Error::InfeasibleStream(format!("request dispatched to zero-rate stream {}", self.label))),
        }
    }
}

/// Playback recursion: `T1 = max(d_s, D1)`, `Tg = max(T(g-1) + τ, Dg)`, and
/// the stall `Γ = T_L - d_s - (L-1)τ`.
pub fn playback(download: &[f64], tau: f64, d_s: f64) -> (Vec<f64>, f64) {
    let mut play = Vec::with_capacity(download.len());
    let mut prev = f64::NAN;
    for (g, &d) in download.iter().enumerate() {
        let t = if g == 0 { d_s.max(d) } else { (prev + tau).max(d) };
        play.push(t);
        prev = t;
    }
    let l = download.len();
    let gamma = (prev - d_s - (l as f64 - 1.0) * tau).max(0.0);
    (play, gamma)
}

/// Simulates every request arriving on `[0, horizon)` and returns those
/// arriving after the warmup.
pub fn run_sim(config: &SimConfig) -> Result<SimTrace> {
    let (topo, cat, point) = (&config.topology, &config.catalog, &config.point);
    topo.validate()?;
    cat.validate()?;
    point.check_dims(topo, cat)?;
    if !(config.horizon > config.warmup) || !(config.warmup >= 0.0) {
        return Err(Error::InvalidInput("need horizon > warmup >= 0".into()));
    }
    let snap = QueueSnapshot::build(topo, cat, &point.to_vars());
    let saturated: Vec<String> = snap.streams().iter().filter(|s| s.lambda > 0.0 && !(s.rho < 1.0)).map(|s| s.label()).collect();

    let mut servers: Vec<Server> = snap
        .streams()
        .iter()
        .map(|s| Server {
            free: 0.0,
            exp: (s.alpha > 0.0).then(|| Exp::new(s.alpha).expect("positive rate")),
            eta: s.eta,
            rng: rng_for(config.seed, PURPOSE_SERVICE, class_code(s.class), s.server as u64, s.index as u64),
            label: s.label(),
        })
        .collect();

    let mut arrivals: Vec<(f64, usize)> = Vec::new();
    for i in 0..cat.r() {
        let mut rng = rng_for(config.seed, PURPOSE_ARRIVAL, i as u64, 0, 0);
        let gap = Exp::new(cat.lambda[i]).expect("positive rate");
        let mut t = gap.sample(&mut rng);
        while t < config.horizon {
            arrivals.push((t, i));
            t += gap.sample(&mut rng);
        }
    }
    arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let dispatch = |i: usize| -> Result<(ChaCha8Rng, WeightedIndex<f64>, Vec<WeightedIndex<f64>>, Vec<WeightedIndex<f64>>)> {
        let bad = |e| Error::InvalidInput(format!("file {i}: bad routing weights ({e})"));
        let pi = WeightedIndex::new(&point.schedule.pi[i]).map_err(bad)?;
        let p = point.schedule.p[i].iter().map(|w| WeightedIndex::new(w).map_err(bad)).collect::<Result<Vec<_>>>()?;
        let q = point.schedule.q[i].iter().map(|w| WeightedIndex::new(w).map_err(bad)).collect::<Result<Vec<_>>>()?;
        Ok((rng_for(config.seed, PURPOSE_DISPATCH, i as u64, 0, 0), pi, p, q))
    };
    let mut routers = (0..cat.r()).map(dispatch).collect::<Result<Vec<_>>>()?;

    let mut requests = Vec::new();
    for (id, &(arrival, i)) in arrivals.iter().enumerate() {
        let (rng, pi, p, q) = &mut routers[i];
        let j = pi.sample(rng);
        let nu = p[j].sample(rng);
        let beta = q[j].sample(rng);
        let l = cat.lengths[i] as usize;
        let c = point.placement.segments[j][i] as usize;
        let mut download = Vec::with_capacity(l);
        let mut queue_wait = f64::NAN;

        if c > 0 {
            let s = &mut servers[snap.id(QueueClass::E, j, nu)];
            let mut now = arrival.max(s.free);
            queue_wait = now - arrival;
            for _ in 0..c {
                now += s.draw()?;
                download.push(now - arrival);
            }
            s.free = now;
        }
        let mut dbar_entry = None;
        if c < l {
            let idd = snap.id(QueueClass::D, j, beta);
            let idb = snap.id(QueueClass::Dbar, j, beta);
            let mut e_dep = Vec::with_capacity(l - c);
            {
                let s = &mut servers[idd];
                let mut now = arrival.max(s.free);
                if c == 0 {
                    queue_wait = now - arrival;
                }
                for _ in c..l {
                    now += s.draw()?;
                    e_dep.push(now);
                }
                s.free = now;
            }
            dbar_entry = Some(e_dep[0]);
            let s = &mut servers[idb];
            let mut cur = s.free;
            for &e in &e_dep {
                cur = cur.max(e) + s.draw()?;
                download.push(cur - arrival);
            }
            s.free = cur;
        }

        if arrival < config.warmup {
            continue;
        }
        let (play, gamma) = playback(&download, cat.tau, cat.d_s);
        requests.push(RequestRecord {
            id: id as u64,
            file: i,
            server: j,
            beta,
            nu,
            arrival,
            download,
            play,
            gamma,
            queue_wait,
            dbar_entry,
        });
    }
    Ok(SimTrace {
        requests,
        warmup: config.warmup,
        horizon: config.horizon,
        saturated,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalPoint {
    pub file: usize,
    pub sigma: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalSdtp {
    /// File-major, then by `sigma`.
    pub points: Vec<EmpiricalPoint>,
    /// Files without any post-warmup request.
    pub empty_files: Vec<usize>,
}

/// Fraction of each file's requests with `Γ ≥ σ`, with its binomial standard
/// error.
pub fn empirical_sdtp(trace: &SimTrace, files: usize, sigma_grid: &[f64]) -> EmpiricalSdtp {
    let mut gammas: Vec<Vec<f64>> = vec![Vec::new(); files];
    for r in &trace.requests {
        if r.file < files {
            gammas[r.file].push(r.gamma);
        }
    }
    let mut points = Vec::new();
    let mut empty_files = Vec::new();
    for (i, g) in gammas.iter_mut().enumerate() {
        if g.is_empty() {
            empty_files.push(i);
            continue;
        }
        g.sort_by(f64::total_cmp);
        let n = g.len();
        for &sigma in sigma_grid {
            let below = g.partition_point(|&x| x < sigma);
            let p_hat = (n - below) as f64 / n as f64;
            points.push(EmpiricalPoint {
                file: i,
                sigma,
                p_hat,
                stderr: (p_hat * (1.0 - p_hat) / n as f64).sqrt(),
                n,
            });
        }
    }
    EmpiricalSdtp { points, empty_files }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dispersion {
    /// Variance over mean of window counts.
    pub index: f64,
    pub windows: usize,
    pub mean_count: f64,
}

/// Minimum number of windows for a dispersion index to be conclusive.
pub const MIN_WINDOWS: usize = 100;

/// Index of dispersion of the epochs falling in `[start, end)`, counted in
/// consecutive windows of the given width. `None` when fewer than
/// [`MIN_WINDOWS`] windows fit or no epoch falls in range.
pub fn dispersion_index(epochs: &[f64], start: f64, end: f64, width: f64) -> Option<Dispersion> {
    if !(width > 0.0) || !(end > start) {
        return None;
    }
    let windows = ((end - start) / width).floor() as usize;
    if windows < MIN_WINDOWS {
        return None;
    }
    let mut counts = vec![0u64; windows];
    for &e in epochs {
        if e >= start {
            let k = ((e - start) / width) as usize;
            if k < windows {
                counts[k] += 1;
            }
        }
    }
    let n = windows as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    if mean <= 0.0 {
        return None;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some(Dispersion {
        index: var / mean,
        windows,
        mean_count: mean,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrivalCheck {
    /// Window-weighted mean of the per-stream indices; `None` when no stream
    /// is conclusive.
    pub pooled: Option<f64>,
    /// `(server, beta, dispersion)` per conclusive `d̄` stream.
    pub streams: Vec<(usize, usize, Dispersion)>,
    /// Streams with traffic but too few windows.
    pub inconclusive: Vec<(usize, usize)>,
}

/// Expected arrivals per counting window in [`second_queue_arrival_check`].
pub const WINDOW_COUNT: f64 = 30.0;

/// Dispersion of request arrivals at every `d̄` stream, with windows sized
/// for about [`WINDOW_COUNT`] arrivals each.
pub fn second_queue_arrival_check(trace: &SimTrace) -> ArrivalCheck {
    let mut by_stream: std::collections::BTreeMap<(usize, usize), Vec<f64>> = Default::default();
    for r in &trace.requests {
        if let Some(e) = r.dbar_entry {
            by_stream.entry((r.server, r.beta)).or_default().push(e);
        }
    }
    let (start, end) = (trace.warmup, trace.horizon);
    let mut streams = Vec::new();
    let mut inconclusive = Vec::new();
    for (key, epochs) in by_stream {
        let rate = epochs.iter().filter(|&&e| e >= start && e < end).count() as f64 / (end - start);
        let d = (rate > 0.0).then(|| dispersion_index(&epochs, start, end, WINDOW_COUNT / rate)).flatten();
        match d {
            Some(d) => streams.push((key.0, key.1, d)),
            None => inconclusive.push(key),
        }
    }
    let total: usize = streams.iter().map(|s| s.2.windows).sum();
    let pooled = (total > 0).then(|| streams.iter().map(|s| s.2.index * s.2.windows as f64).sum::<f64>() / total as f64);
    ArrivalCheck {
        pooled,
        streams,
        inconclusive,
    }
}

/// Request-level trace CSV.
pub fn write_trace_csv<W: Write>(trace: &SimTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["request_id", "file_id", "server", "beta", "nu", "arrival_s", "gamma_s"]).map_err(io)?;
    for r in &trace.requests {
        w.write_record([
            r.id.to_string(),
            r.file.to_string(),
            r.server.to_string(),
            r.beta.to_string(),
            r.nu.to_string(),
            format!("{:.9}", r.arrival),
            format!("{:.9}", r.gamma),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

/// Per-segment long-format trace CSV.
pub fn write_segments_csv<W: Write>(trace: &SimTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["request_id", "segment", "download_s", "play_s"]).map_err(io)?;
    for r in &trace.requests {
        for (g, (d, p)) in r.download.iter().zip(&r.play).enumerate() {
            w.write_record([r.id.to_string(), (g + 1).to_string(), format!("{d:.9}"), format!("{p:.9}")]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

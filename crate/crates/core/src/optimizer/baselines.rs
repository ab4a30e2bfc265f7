//! The full optimizer and the comparison strategies that pin one block.

use super::{alternate, Block, Frozen, OptimizationTrace, OptimizerSettings, Problem};
use crate::error::{Error, Result};
pub use crate::model::equal_share_placement;
use crate::model::{check_feasibility, closest_feasible, ControlPoint, SystemTopology, VideoCatalog, INITIAL_T};
use crate::workload::{sweep, Instance, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Baseline {
    /// Every block free.
    Opt,
    /// Uniform server and stream selection.
    Pea,
    /// Equal bandwidth split.
    Peb,
    /// Server selection proportional to the server's total base rate, stream
    /// selection uniform.
    Psp,
    /// Equal per-file cache shares.
    Pec,
    /// Most requested files cached first.
    Chf,
    /// `t = 0.01` throughout.
    FixedT,
}

impl Baseline {
    pub const ALL: [Baseline; 7] = [Baseline::Opt, Baseline::Pea, Baseline::Peb, Baseline::Psp, Baseline::Pec, Baseline::Chf, Baseline::FixedT];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Opt => "OPT",
            Baseline::Pea => "PEA",
            Baseline::Peb => "PEB",
            Baseline::Psp => "PSP",
            Baseline::Pec => "PEC",
            Baseline::Chf => "CHF",
            Baseline::FixedT => "FIXED_T",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownBaseline(name.to_string()))
    }

    fn frozen(self) -> Frozen {
        let mut f = Frozen::default();
        match self {
            Baseline::Opt => {}
            Baseline::Pea | Baseline::Psp => {
                f.pi = true;
                f.pq = true;
            }
            Baseline::Peb => f.w = true,
            Baseline::Pec | Baseline::Chf => f.placement = true,
            Baseline::FixedT => f.t = true,
        }
        f
    }
}

/// Whole files in decreasing request rate (ties to the lower index) until
/// the capacity runs out; the first file that does not fit gets the rest.
pub fn hottest_first_placement(lengths: &[u32], lambda: &[f64], capacity: f64) -> Vec<u32> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]).then(a.cmp(&b)));
    let mut left = capacity.max(0.0).floor() as u64;
    let mut out = vec![0u32; lengths.len()];
    for i in order {
        let take = (lengths[i] as u64).min(left);
        out[i] = take as u32;
        left -= take;
    }
    out
}

/// Starting point of a strategy: the uniform point with the strategy's
/// pinned block applied, repaired to feasibility.
pub fn initial_point(which: Baseline, topology: &SystemTopology, catalog: &VideoCatalog) -> Result<ControlPoint> {
    let mut p = closest_feasible(&ControlPoint::uniform(topology, catalog), topology, catalog)?;
    match which {
        Baseline::Opt | Baseline::Pea | Baseline::Peb => {}
        Baseline::Psp => {
            let mu: Vec<f64> = (0..topology.m()).map(|j| topology.alpha_d_base[j] + topology.alpha_f_base[j]).collect();
            let total: f64 = mu.iter().sum();
            for row in p.schedule.pi.iter_mut() {
                *row = mu.iter().map(|x| x / total).collect();
            }
        }
        Baseline::Pec => {
            for j in 0..topology.m() {
                p.placement.segments[j] = equal_share_placement(&catalog.lengths, p.placement.capacity[j]);
            }
        }
        Baseline::Chf => {
            for j in 0..topology.m() {
                p.placement.segments[j] = hottest_first_placement(&catalog.lengths, &catalog.lambda, p.placement.capacity[j]);
            }
        }
        Baseline::FixedT => p.aux.t = vec![INITIAL_T; catalog.r()],
    }
    closest_feasible(&p, topology, catalog)
}

/// Runs a strategy from its initial point, optimizing only the blocks it
/// leaves free.
pub fn solve(which: Baseline, topology: &SystemTopology, catalog: &VideoCatalog, settings: &OptimizerSettings) -> Result<(ControlPoint, f64, OptimizationTrace)> {
    let start = initial_point(which, topology, catalog)?;
    solve_from(which, &start, topology, catalog, settings)
}

/// As [`solve`] from a given feasible point.
pub fn solve_from(which: Baseline, start: &ControlPoint, topology: &SystemTopology, catalog: &VideoCatalog, settings: &OptimizerSettings) -> Result<(ControlPoint, f64, OptimizationTrace)> {
    let mut s = settings.clone();
    s.frozen = which.frozen();
    let problem = Problem::new(topology, catalog);
    let (p, trace) = alternate(&problem, start, &s, &Block::DEFAULT_ORDER)?;
    let f = trace.final_objective();
    Ok((p, f, trace))
}

/// The full optimizer restarted from the best of several feasible points
/// (typically its own endpoint and the restricted strategies' endpoints).
/// The problem is not convex, so a single start can stall in a worse basin
/// than a restricted strategy reaches; restarting from the best candidate
/// keeps the full optimizer at least as good as every candidate.
pub fn solve_multistart(candidates: &[ControlPoint], topology: &SystemTopology, catalog: &VideoCatalog, settings: &OptimizerSettings) -> Result<(ControlPoint, f64, OptimizationTrace)> {
    let problem = Problem::new(topology, catalog);
    let mut best: Option<(f64, &ControlPoint)> = None;
    for c in candidates {
        let f = problem.objective(&c.to_vars(), &c.placement.capacity);
        if f.is_finite() && best.is_none_or(|(b, _)| f < b) {
            best = Some((f, c));
        }
    }
    let Some((_, start)) = best else {
        return Err(Error::InfeasibleInstance("no feasible starting candidate".into()));
    };
    solve_from(Baseline::Opt, start, topology, catalog, settings)
}

/// Named comparison strategy.
pub fn baseline(name: &str, topology: &SystemTopology, catalog: &VideoCatalog, settings: &OptimizerSettings) -> Result<(ControlPoint, f64)> {
    let which = Baseline::parse(name)?;
    let (p, f, _) = solve(which, topology, catalog, settings)?;
    Ok((p, f))
}

/// `point` on a topology with at least as many streams per server. New
/// streams carry no traffic and take `share` of each link, taken
/// proportionally from the old streams so that they have a usable rate.
pub fn embed_point(point: &ControlPoint, to: &SystemTopology, share: f64) -> Result<ControlPoint> {
    let m = to.m();
    let old_d: Vec<usize> = point.bandwidth.w_d.iter().map(Vec::len).collect();
    let old_e: Vec<usize> = point.bandwidth.w_e.iter().map(Vec::len).collect();
    if old_d.len() != m || (0..m).any(|j| to.d[j] < old_d[j] || to.e[j] < old_e[j]) {
        return Err(Error::DimensionMismatch("embedding needs the same servers and no fewer streams".into()));
    }
    let grow = |w: &[f64], n: usize, add: f64| -> Vec<f64> {
        let extra = n - w.len();
        if extra == 0 {
            return w.to_vec();
        }
        let mut out: Vec<f64> = w.iter().map(|x| x * (1.0 - add)).collect();
        let total: f64 = w.iter().sum();
        out.resize(n, add * total / extra as f64);
        out
    };
    let mut p = point.clone();
    for j in 0..m {
        p.bandwidth.w_d[j] = grow(&point.bandwidth.w_d[j], to.d[j], share);
        // d̄ and e split one link, so both give up the same fraction
        let any_new = to.d[j] > old_d[j] || to.e[j] > old_e[j];
        let s = if any_new { share } else { 0.0 };
        let mut dbar = grow(&point.bandwidth.w_dbar[j], to.d[j], s);
        let mut e = grow(&point.bandwidth.w_e[j], to.e[j], s);
        if to.d[j] == old_d[j] {
            dbar.iter_mut().for_each(|x| *x *= 1.0 - s);
        }
        if to.e[j] == old_e[j] {
            e.iter_mut().for_each(|x| *x *= 1.0 - s);
        }
        p.bandwidth.w_dbar[j] = dbar;
        p.bandwidth.w_e[j] = e;
        for i in 0..point.schedule.p.len() {
            p.schedule.p[i][j].resize(to.e[j], 0.0);
            p.schedule.q[i][j].resize(to.d[j], 0.0);
        }
    }
    Ok(p)
}

/// Link share handed to added streams when a sweep point is warm-started.
const EMBED_SHARE: f64 = 1e-3;

/// Solves every instance of a sweep with the full optimizer. Points are
/// visited along the direction in which the previous optimum stays feasible
/// (decreasing load, increasing rates or stream counts), and each starts
/// from the better of that optimum and the usual initial point. With more
/// streams the previous optimum, given zero bandwidth and traffic on the new
/// streams, is itself feasible at the same objective; it is kept when the
/// solve ends above it.
pub fn solve_sweep(scenario: Scenario, topology: &SystemTopology, catalog: &VideoCatalog, factors: &[f64], settings: &OptimizerSettings) -> Result<Vec<(Instance, ControlPoint, f64)>> {
    let instances = sweep(scenario, topology, catalog, factors)?;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    match scenario {
        Scenario::ArrivalScale | Scenario::FileCount => order.sort_by(|&a, &b| factors[b].total_cmp(&factors[a])),
        Scenario::RateScale | Scenario::StreamScale => order.sort_by(|&a, &b| factors[a].total_cmp(&factors[b])),
    }
    let mut solved: Vec<Option<(ControlPoint, f64)>> = vec![None; instances.len()];
    let mut prev: Option<ControlPoint> = None;
    for k in order {
        let inst = &instances[k];
        let mut candidates = vec![initial_point(Baseline::Opt, &inst.topology, &inst.catalog)?];
        let warm = match (&prev, scenario) {
            (Some(p), Scenario::StreamScale) => Some(embed_point(p, &inst.topology, EMBED_SHARE)?),
            (Some(p), Scenario::ArrivalScale | Scenario::RateScale) => Some(p.clone()),
            _ => None,
        };
        if let Some(w) = warm {
            if check_feasibility(&inst.topology, &inst.catalog, &w)?.feasible {
                candidates.push(w);
            }
        }
        let (mut p, mut f, _) = solve_multistart(&candidates, &inst.topology, &inst.catalog, settings)?;
        if let (Some(old), Scenario::StreamScale) = (&prev, scenario) {
            let same = embed_point(old, &inst.topology, 0.0)?;
            let fs = Problem::new(&inst.topology, &inst.catalog).objective(&same.to_vars(), &same.placement.capacity);
            if fs < f && check_feasibility(&inst.topology, &inst.catalog, &same)?.feasible {
                (p, f) = (same, fs);
            }
        }
        prev = Some(p.clone());
        solved[k] = Some((p, f));
    }
    Ok(instances.into_iter().zip(solved).map(|(inst, s)| {
        let (p, f) = s.expect("every sweep point solved");
        (inst, p, f)
    }).collect())
}

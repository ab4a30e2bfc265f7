//! Domain types shared by every other module, plus feasibility checking and
//! the closest-feasible repair used before optimization.
//!
//! Indices are zero-based throughout: servers `j`, files `i`, datacenter
//! streams `beta` and cached streams `nu`.

use serde::{Deserialize, Serialize};

use crate::analysis::queues::QueueSnapshot;
use crate::error::{Error, Result};
use crate::optimizer::projection::{project_box_capacity, project_capped_simplex, project_simplex};

/// Absolute tolerance on simplex sums and weight sums.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Safety margin on the strict inequalities (stability, rate, P-K denominator).
pub const MARGIN: f64 = 1e-6;
/// Default cache capacity as a fraction of all segments in the catalog.
pub const CAPACITY_FRACTION: f64 = 0.35;
/// Maximum number of halvings of `t` tried by [`closest_feasible`].
pub const MAX_T_SHRINK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemTopology {
    /// Datacenter-to-cache streams per server.
    pub d: Vec<usize>,
    /// Cache-to-edge streams reserved for cached content per server.
    pub e: Vec<usize>,
    pub alpha_d_base: Vec<f64>,
    pub alpha_f_base: Vec<f64>,
    pub eta_d: Vec<f64>,
    pub eta_dbar: Vec<f64>,
    pub eta_e: Vec<f64>,
}

impl SystemTopology {
    /// Every server gets the same stream counts and shifts; rates are per server.
    pub fn homogeneous(d: usize, e: usize, alpha: &[f64], eta: f64) -> Result<Self> {
        let m = alpha.len();
        let t = Self {
            d: vec![d; m],
            e: vec![e; m],
            alpha_d_base: alpha.to_vec(),
            alpha_f_base: alpha.to_vec(),
            eta_d: vec![eta; m],
            eta_dbar: vec![eta; m],
            eta_e: vec![eta; m],
        };
        t.validate()?;
        Ok(t)
    }

    pub fn m(&self) -> usize {
        self.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.d.len();
        if m == 0 {
            return Err(Error::InvalidInput("topology needs at least one server".into()));
        }
        let lens = [
            self.e.len(),
            self.alpha_d_base.len(),
            self.alpha_f_base.len(),
            self.eta_d.len(),
            self.eta_dbar.len(),
            self.eta_e.len(),
        ];
        if lens.iter().any(|&l| l != m) {
            return Err(Error::DimensionMismatch(format!("topology arrays must all have length m={m}")));
        }
        for j in 0..m {
            if self.d[j] == 0 || self.e[j] == 0 {
                return Err(Error::InvalidInput(format!("server {j} needs d_j >= 1 and e_j >= 1")));
            }
            if !(self.alpha_d_base[j] > 0.0 && self.alpha_f_base[j] > 0.0)
                || !self.alpha_d_base[j].is_finite()
                || !self.alpha_f_base[j].is_finite()
            {
                return Err(Error::InvalidInput(format!("server {j} base rates must be positive")));
            }
            for eta in [self.eta_d[j], self.eta_dbar[j], self.eta_e[j]] {
                if !(eta >= 0.0) || !eta.is_finite() {
                    return Err(Error::InvalidInput(format!("server {j} shifts must be nonnegative")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoCatalog {
    /// Segment count `L_i` per file.
    pub lengths: Vec<u32>,
    /// Poisson request rate per file (1/s).
    pub lambda: Vec<f64>,
    pub weight: Vec<f64>,
    /// Segment playback length (s).
    pub tau: f64,
    /// Startup delay (s).
    pub d_s: f64,
    /// Stall threshold (s).
    pub sigma: f64,
}

impl VideoCatalog {
    pub fn r(&self) -> usize {
        self.lengths.len()
    }

    pub fn total_segments(&self) -> u64 {
        self.lengths.iter().map(|&l| l as u64).sum()
    }

    pub fn default_capacity(&self) -> f64 {
        CAPACITY_FRACTION * self.total_segments() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.lengths.len();
        if r == 0 {
            return Err(Error::InvalidInput("catalog needs at least one file".into()));
        }
        if self.lambda.len() != r || self.weight.len() != r {
            return Err(Error::DimensionMismatch(format!("catalog arrays must all have length r={r}")));
        }
        for i in 0..r {
            if self.lengths[i] == 0 {
                return Err(Error::InvalidInput(format!("file {i} has no segments")));
            }
            if !(self.lambda[i] > 0.0) || !self.lambda[i].is_finite() {
                return Err(Error::InvalidInput(format!("file {i} needs lambda > 0")));
            }
            if !(self.weight[i] >= 0.0) || !self.weight[i].is_finite() {
                return Err(Error::InvalidInput(format!("file {i} needs weight >= 0")));
            }
        }
        if !(self.weight.iter().sum::<f64>() > 0.0) {
            return Err(Error::InvalidInput("weights must have a positive sum".into()));
        }
        if !(self.tau > 0.0) || !(self.d_s >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidInput("need tau > 0, d_s >= 0, sigma >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachePlacement {
    /// `segments[j][i]`: leading segments of file `i` stored at server `j`.
    pub segments: Vec<Vec<u32>>,
    /// Per-server segment capacity.
    pub capacity: Vec<f64>,
}

impl CachePlacement {
    pub fn empty(m: usize, r: usize, capacity: f64) -> Self {
        Self {
            segments: vec![vec![0; r]; m],
            capacity: vec![capacity; m],
        }
    }

    /// Every server holds the same water-filled per-file prefix shares.
    pub fn equal_shares(m: usize, catalog: &VideoCatalog, capacity: f64) -> Self {
        let row = equal_share_placement(&catalog.lengths, capacity);
        Self {
            segments: vec![row; m],
            capacity: vec![capacity; m],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMatrices {
    /// `pi[i][j]`
    pub pi: Vec<Vec<f64>>,
    /// `p[i][j][nu]`
    pub p: Vec<Vec<Vec<f64>>>,
    /// `q[i][j][beta]`
    pub q: Vec<Vec<Vec<f64>>>,
}

impl ScheduleMatrices {
    pub fn uniform(topology: &SystemTopology, r: usize) -> Self {
        let m = topology.m();
        let pi = vec![vec![1.0 / m as f64; m]; r];
        let p = (0..r)
            .map(|_| (0..m).map(|j| vec![1.0 / topology.e[j] as f64; topology.e[j]]).collect())
            .collect();
        let q = (0..r)
            .map(|_| (0..m).map(|j| vec![1.0 / topology.d[j] as f64; topology.d[j]]).collect())
            .collect();
        Self { pi, p, q }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthWeights {
    /// `w_d[j][beta]`
    pub w_d: Vec<Vec<f64>>,
    /// `w_dbar[j][beta]`
    pub w_dbar: Vec<Vec<f64>>,
    /// `w_e[j][nu]`
    pub w_e: Vec<Vec<f64>>,
}

impl BandwidthWeights {
    /// `1/d_j` on every datacenter-side stream and `1/e_j` on every cached
    /// stream. The cache-to-edge budget is oversubscribed by this rule and
    /// must be repaired with [`closest_feasible`].
    pub fn equal_split(topology: &SystemTopology) -> Self {
        let m = topology.m();
        Self {
            w_d: (0..m).map(|j| vec![1.0 / topology.d[j] as f64; topology.d[j]]).collect(),
            w_dbar: (0..m).map(|j| vec![1.0 / topology.d[j] as f64; topology.d[j]]).collect(),
            w_e: (0..m).map(|j| vec![1.0 / topology.e[j] as f64; topology.e[j]]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxVars {
    pub t: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub schedule: ScheduleMatrices,
    pub bandwidth: BandwidthWeights,
    pub placement: CachePlacement,
    pub aux: AuxVars,
}

/// Initial `t` of the uniform starting point.
pub const INITIAL_T: f64 = 0.01;

impl ControlPoint {
    /// Uniform starting point: `pi = 1/m`, `p = 1/e_j`, `q = 1/d_j`, equal
    /// bandwidth split, equal cache shares at default capacity, `t = 0.01`.
    /// Not necessarily feasible.
    pub fn uniform(topology: &SystemTopology, catalog: &VideoCatalog) -> Self {
        let r = catalog.r();
        Self {
            schedule: ScheduleMatrices::uniform(topology, r),
            bandwidth: BandwidthWeights::equal_split(topology),
            placement: CachePlacement::equal_shares(topology.m(), catalog, catalog.default_capacity()),
            aux: AuxVars { t: vec![INITIAL_T; r] },
        }
    }

    pub fn to_vars(&self) -> DecisionVars {
        DecisionVars {
            pi: self.schedule.pi.clone(),
            p: self.schedule.p.clone(),
            q: self.schedule.q.clone(),
            w_d: self.bandwidth.w_d.clone(),
            w_dbar: self.bandwidth.w_dbar.clone(),
            w_e: self.bandwidth.w_e.clone(),
            cache: self
                .placement
                .segments
                .iter()
                .map(|row| row.iter().map(|&c| c as f64).collect())
                .collect(),
            t: self.aux.t.clone(),
        }
    }

    /// Checks that every array has the shape implied by topology and catalog.
    pub fn check_dims(&self, topology: &SystemTopology, catalog: &VideoCatalog) -> Result<()> {
        let (m, r) = (topology.m(), catalog.r());
        let s = &self.schedule;
        let bad = |what: &str| Err(Error::DimensionMismatch(what.to_string()));
        if s.pi.len() != r || s.p.len() != r || s.q.len() != r {
            return bad("schedule must have one row per file");
        }
        for i in 0..r {
            if s.pi[i].len() != m || s.p[i].len() != m || s.q[i].len() != m {
                return bad("schedule rows must have one entry per server");
            }
            for j in 0..m {
                if s.p[i][j].len() != topology.e[j] || s.q[i][j].len() != topology.d[j] {
                    return bad("p/q must have e_j/d_j entries per server");
                }
            }
        }
        let b = &self.bandwidth;
        if b.w_d.len() != m || b.w_dbar.len() != m || b.w_e.len() != m {
            return bad("bandwidth weights must have one row per server");
        }
        for j in 0..m {
            if b.w_d[j].len() != topology.d[j] || b.w_dbar[j].len() != topology.d[j] || b.w_e[j].len() != topology.e[j] {
                return bad("bandwidth rows must have d_j/e_j entries");
            }
        }
        let pl = &self.placement;
        if pl.segments.len() != m || pl.capacity.len() != m || pl.segments.iter().any(|row| row.len() != r) {
            return bad("placement must be m x r with m capacities");
        }
        if self.aux.t.len() != r {
            return bad("t must have one entry per file");
        }
        Ok(())
    }
}

/// Flat numeric view of a control point with a real-valued (relaxed) cache
/// placement. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionVars {
    pub pi: Vec<Vec<f64>>,
    pub p: Vec<Vec<Vec<f64>>>,
    pub q: Vec<Vec<Vec<f64>>>,
    pub w_d: Vec<Vec<f64>>,
    pub w_dbar: Vec<Vec<f64>>,
    pub w_e: Vec<Vec<f64>>,
    /// `cache[j][i]`
    pub cache: Vec<Vec<f64>>,
    pub t: Vec<f64>,
}

impl DecisionVars {
    pub fn zeros_like(o: &Self) -> Self {
        let z2 = |a: &Vec<Vec<f64>>| a.iter().map(|r| vec![0.0; r.len()]).collect::<Vec<_>>();
        let z3 = |a: &Vec<Vec<Vec<f64>>>| a.iter().map(z2).collect::<Vec<_>>();
        Self {
            pi: z2(&o.pi),
            p: z3(&o.p),
            q: z3(&o.q),
            w_d: z2(&o.w_d),
            w_dbar: z2(&o.w_dbar),
            w_e: z2(&o.w_e),
            cache: z2(&o.cache),
            t: vec![0.0; o.t.len()],
        }
    }

    /// Rounds the placement to the nearest integers (callers guarantee the
    /// values are already integral or have been rounded by the optimizer).
    pub fn to_point(&self, capacity: &[f64]) -> ControlPoint {
        ControlPoint {
            schedule: ScheduleMatrices {
                pi: self.pi.clone(),
                p: self.p.clone(),
                q: self.q.clone(),
            },
            bandwidth: BandwidthWeights {
                w_d: self.w_d.clone(),
                w_dbar: self.w_dbar.clone(),
                w_e: self.w_e.clone(),
            },
            placement: CachePlacement {
                segments: self
                    .cache
                    .iter()
                    .map(|row| row.iter().map(|&c| c.round().max(0.0) as u32).collect())
                    .collect(),
                capacity: capacity.to_vec(),
            },
            aux: AuxVars { t: self.t.clone() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRates {
    pub alpha_d: Vec<Vec<f64>>,
    pub alpha_dbar: Vec<Vec<f64>>,
    pub alpha_e: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateArrivals {
    pub lambda_d: Vec<Vec<f64>>,
    pub lambda_dbar: Vec<Vec<f64>>,
    pub lambda_e: Vec<Vec<f64>>,
}

pub mod family {
    pub const NONNEGATIVE: &str = "nonnegative";
    pub const PI_SIMPLEX: &str = "pi_simplex";
    pub const P_SIMPLEX: &str = "p_simplex";
    pub const Q_SIMPLEX: &str = "q_simplex";
    pub const WEIGHT_SUM_D: &str = "weight_sum_d";
    pub const WEIGHT_SUM_F: &str = "weight_sum_f";
    pub const PLACEMENT_BOUNDS: &str = "placement_bounds";
    pub const CAPACITY: &str = "capacity";
    pub const T_POSITIVE: &str = "t_positive";
    pub const STABILITY: &str = "stability";
    pub const T_EXCEEDS_RATE: &str = "t_exceeds_rate";
    pub const PK_DENOMINATOR: &str = "pk_denominator";

    pub const ALL: [&str; 12] = [
        NONNEGATIVE,
        PI_SIMPLEX,
        P_SIMPLEX,
        Q_SIMPLEX,
        WEIGHT_SUM_D,
        WEIGHT_SUM_F,
        PLACEMENT_BOUNDS,
        CAPACITY,
        T_POSITIVE,
        STABILITY,
        T_EXCEEDS_RATE,
        PK_DENOMINATOR,
    ];

    /// Families that depend on `t` only through MGF existence.
    pub const MGF: [&str; 2] = [T_EXCEEDS_RATE, PK_DENOMINATOR];
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyMargin {
    pub name: &'static str,
    /// Smallest slack over the family; negative means violated. `+inf` when
    /// the family has no active member.
    pub worst_margin: f64,
    pub worst_at: String,
}

impl FamilyMargin {
    pub fn ok(&self) -> bool {
        self.worst_margin >= 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub families: Vec<FamilyMargin>,
}

impl FeasibilityReport {
    pub fn family(&self, name: &str) -> &FamilyMargin {
        self.families.iter().find(|f| f.name == name).expect("known family")
    }

    pub fn violated(&self) -> Vec<&FamilyMargin> {
        self.families.iter().filter(|f| !f.ok()).collect()
    }

    /// Largest violation over all families (0 when feasible).
    pub fn max_violation(&self) -> f64 {
        self.families.iter().map(|f| (-f.worst_margin).max(0.0)).fold(0.0, f64::max)
    }

    /// First violated family with its location, for error messages.
    pub fn describe_violation(&self) -> Option<String> {
        self.violated()
            .first()
            .map(|f| format!("{} violated at {} (margin {:e})", f.name, f.worst_at, f.worst_margin))
    }
}

struct Tracker {
    fams: Vec<FamilyMargin>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            fams: family::ALL
                .iter()
                .map(|&name| FamilyMargin {
                    name,
                    worst_margin: f64::INFINITY,
                    worst_at: String::new(),
                })
                .collect(),
        }
    }

    fn note(&mut self, name: &'static str, margin: f64, at: impl FnOnce() -> String) {
        let f = self.fams.iter_mut().find(|f| f.name == name).expect("known family");
        let margin = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
        if margin < f.worst_margin {
            f.worst_margin = margin;
            f.worst_at = at();
        }
    }
}

/// Feasibility of a numeric point, including relaxed placements.
pub fn feasibility_of_vars(
    topology: &SystemTopology,
    catalog: &VideoCatalog,
    vars: &DecisionVars,
    capacity: &[f64],
) -> FeasibilityReport {
    let mut tr = Tracker::new();
    let (m, r) = (topology.m(), catalog.r());
    for i in 0..r {
        let s: f64 = vars.pi[i].iter().sum();
        tr.note(family::PI_SIMPLEX, SIMPLEX_TOL - (s - 1.0).abs(), || format!("pi[{i}]"));
        for j in 0..m {
            tr.note(family::NONNEGATIVE, vars.pi[i][j], || format!("pi[{i}][{j}]"));
            let sp: f64 = vars.p[i][j].iter().sum();
            tr.note(family::P_SIMPLEX, SIMPLEX_TOL - (sp - 1.0).abs(), || format!("p[{i}][{j}]"));
            let sq: f64 = vars.q[i][j].iter().sum();
            tr.note(family::Q_SIMPLEX, SIMPLEX_TOL - (sq - 1.0).abs(), || format!("q[{i}][{j}]"));
            for (nu, &x) in vars.p[i][j].iter().enumerate() {
                tr.note(family::NONNEGATIVE, x, || format!("p[{i}][{j}][{nu}]"));
            }
            for (b, &x) in vars.q[i][j].iter().enumerate() {
                tr.note(family::NONNEGATIVE, x, || format!("q[{i}][{j}][{b}]"));
            }
        }
        tr.note(family::T_POSITIVE, vars.t[i], || format!("t[{i}]"));
    }
    for j in 0..m {
        let sd: f64 = vars.w_d[j].iter().sum();
        tr.note(family::WEIGHT_SUM_D, 1.0 + SIMPLEX_TOL - sd, || format!("w_d[{j}]"));
        let sf: f64 = vars.w_dbar[j].iter().sum::<f64>() + vars.w_e[j].iter().sum::<f64>();
        tr.note(family::WEIGHT_SUM_F, 1.0 + SIMPLEX_TOL - sf, || format!("w_dbar[{j}]+w_e[{j}]"));
        for (k, &x) in vars.w_d[j].iter().enumerate() {
            tr.note(family::NONNEGATIVE, x, || format!("w_d[{j}][{k}]"));
        }
        for (k, &x) in vars.w_dbar[j].iter().enumerate() {
            tr.note(family::NONNEGATIVE, x, || format!("w_dbar[{j}][{k}]"));
        }
        for (k, &x) in vars.w_e[j].iter().enumerate() {
            tr.note(family::NONNEGATIVE, x, || format!("w_e[{j}][{k}]"));
        }
        let mut used = 0.0;
        for i in 0..r {
            let c = vars.cache[j][i];
            used += c;
            let slack = c.min(catalog.lengths[i] as f64 - c);
            tr.note(family::PLACEMENT_BOUNDS, slack, || format!("L_cache[{j}][{i}]"));
        }
        tr.note(family::CAPACITY, capacity[j] - used, || format!("server {j}"));
    }

    let snap = QueueSnapshot::build(topology, catalog, vars);
    for (id, s) in snap.streams().iter().enumerate() {
        if s.lambda <= 0.0 || snap.rep(id) != id {
            continue;
        }
        tr.note(family::STABILITY, 1.0 - s.rho - MARGIN, || s.label());
        // A user with no segments on this stream never needs its MGF.
        for u in s.users.iter().filter(|u| u.a > 0.0 && u.n > 0.0) {
            let t = vars.t[u.file];
            tr.note(family::T_EXCEEDS_RATE, s.alpha - t - MARGIN, || format!("t[{}] vs {}", u.file, s.label()));
            if t < s.alpha && t > 0.0 {
                let b = s.batch_mgf(t);
                let den = t - s.lambda * (b - 1.0);
                tr.note(family::PK_DENOMINATOR, den / t - MARGIN, || {
                    format!("t[{}] at {}", u.file, s.label())
                });
            }
        }
    }
    let feasible = tr.fams.iter().all(|f| f.ok());
    FeasibilityReport { feasible, families: tr.fams }
}

/// Per-constraint-family feasibility of a control point.
pub fn check_feasibility(
    topology: &SystemTopology,
    catalog: &VideoCatalog,
    point: &ControlPoint,
) -> Result<FeasibilityReport> {
    topology.validate()?;
    catalog.validate()?;
    point.check_dims(topology, catalog)?;
    let vars = point.to_vars();
    Ok(feasibility_of_vars(topology, catalog, &vars, &point.placement.capacity))
}

/// Euclidean projection onto the linear constraint sets with `t` fixed.
/// Each block is a product of independent simplices, capped simplices and
/// capacity boxes, so projecting block by block is exact.
pub fn project_linear(topology: &SystemTopology, catalog: &VideoCatalog, vars: &DecisionVars, capacity: &[f64]) -> DecisionVars {
    let mut out = vars.clone();
    for i in 0..catalog.r() {
        out.pi[i] = project_simplex(&vars.pi[i]);
        for j in 0..topology.m() {
            out.p[i][j] = project_simplex(&vars.p[i][j]);
            out.q[i][j] = project_simplex(&vars.q[i][j]);
        }
    }
    for j in 0..topology.m() {
        out.w_d[j] = project_capped_simplex(&vars.w_d[j]);
        let d = vars.w_dbar[j].len();
        let joint: Vec<f64> = vars.w_dbar[j].iter().chain(vars.w_e[j].iter()).copied().collect();
        let pj = project_capped_simplex(&joint);
        out.w_dbar[j] = pj[..d].to_vec();
        out.w_e[j] = pj[d..].to_vec();
        let upper: Vec<f64> = catalog.lengths.iter().map(|&l| l as f64).collect();
        out.cache[j] = project_box_capacity(&vars.cache[j], &upper, capacity[j]);
    }
    out
}

/// Largest equal share `s` with `Σ min(L_i, s) ≤ capacity`, leftover units
/// to the lowest-indexed files with room.
pub fn equal_share_placement(lengths: &[u32], capacity: f64) -> Vec<u32> {
    let cap = capacity.max(0.0).floor() as u64;
    let fill = |s: u32| lengths.iter().map(|&l| l.min(s) as u64).sum::<u64>();
    let max_l = lengths.iter().copied().max().unwrap_or(0);
    let (mut lo, mut hi) = (0u32, max_l);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fill(mid) <= cap {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut out: Vec<u32> = lengths.iter().map(|&l| l.min(lo)).collect();
    let mut left = cap - fill(lo);
    for (c, &l) in out.iter_mut().zip(lengths) {
        if left == 0 {
            break;
        }
        if *c < l {
            *c += 1;
            left -= 1;
        }
    }
    out
}

/// Integer placement closest to `relaxed` within bounds and capacity: the
/// continuous projection is floored, then units go back to the entries with
/// the largest fractional parts (ties to the lowest file index).
pub fn round_placement(relaxed: &[f64], lengths: &[u32], capacity: f64) -> Vec<u32> {
    let upper: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    let proj = project_box_capacity(relaxed, &upper, capacity);
    let mut out: Vec<u32> = proj.iter().map(|&x| (x + 1e-9).floor().max(0.0) as u32).collect();
    let mut used: f64 = out.iter().map(|&x| x as f64).sum();
    let frac: Vec<f64> = proj.iter().zip(&out).map(|(&p, &o)| p - o as f64).collect();
    let mut order: Vec<usize> = (0..relaxed.len()).collect();
    order.sort_by(|&a, &b| frac[b].partial_cmp(&frac[a]).unwrap().then(a.cmp(&b)));
    for k in order {
        if frac[k] > 1e-9 && used + 1.0 <= capacity + 1e-9 && out[k] < lengths[k] {
            out[k] += 1;
            used += 1.0;
        }
    }
    out
}

/// Closest feasible point: linear projection with `t` fixed, then `t` halved
/// until every MGF exists. Returns the input unchanged when it is feasible.
///
/// Stability is not a linear constraint. When the linear projection leaves
/// a stream overloaded, the point moves along the segment towards
/// [`load_balanced_anchor`] to the first stable point (bisection), which
/// keeps every linear constraint satisfied.
pub fn closest_feasible(
    point: &ControlPoint,
    topology: &SystemTopology,
    catalog: &VideoCatalog,
) -> Result<ControlPoint> {
    let report = check_feasibility(topology, catalog, point)?;
    if report.feasible {
        return Ok(point.clone());
    }
    let capacity = &point.placement.capacity;
    let mut vars = project_linear(topology, catalog, &point.to_vars(), capacity);
    for j in 0..topology.m() {
        vars.cache[j] = round_placement(&vars.cache[j], &catalog.lengths, capacity[j])
            .into_iter()
            .map(|c| c as f64)
            .collect();
    }
    for t in vars.t.iter_mut() {
        if !(*t > 0.0) {
            *t = INITIAL_T;
        }
    }
    if !ok_ignoring_t(&feasibility_of_vars(topology, catalog, &vars, capacity)) {
        let anchor = load_balanced_anchor(topology, catalog, &vars);
        if !ok_ignoring_t(&feasibility_of_vars(topology, catalog, &anchor, capacity)) {
            return Err(Error::InfeasibleInstance(format!(
                "even load-balanced routing is unstable: {}",
                feasibility_of_vars(topology, catalog, &anchor, capacity).describe_violation().unwrap_or_default()
            )));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..BLEND_STEPS {
            let mid = 0.5 * (lo + hi);
            if ok_ignoring_t(&feasibility_of_vars(topology, catalog, &blend(&vars, &anchor, mid), capacity)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        vars = blend(&vars, &anchor, hi);
    }
    let snap = QueueSnapshot::build(topology, catalog, &vars);
    for i in 0..catalog.r() {
        let mut k = 0;
        while !snap.mgf_exists_for(i, vars.t[i]) && k < MAX_T_SHRINK {
            vars.t[i] *= 0.5;
            k += 1;
        }
    }
    let rep = feasibility_of_vars(topology, catalog, &vars, capacity);
    if rep.feasible {
        return Ok(vars.to_point(capacity));
    }
    Err(Error::InfeasibleInstance(
        rep.describe_violation().unwrap_or_else(|| "no feasible point found".into()),
    ))
}

const BLEND_STEPS: usize = 30;

fn ok_ignoring_t(rep: &FeasibilityReport) -> bool {
    rep.families
        .iter()
        .filter(|f| ![family::T_POSITIVE, family::T_EXCEEDS_RATE, family::PK_DENOMINATOR].contains(&f.name))
        .all(|f| f.ok())
}

/// `(1 - theta)·a + theta·b`; placement and `t` come from `a`.
fn blend(a: &DecisionVars, b: &DecisionVars, theta: f64) -> DecisionVars {
    let mix = |x: &f64, y: &f64| (1.0 - theta) * x + theta * y;
    let mix2 = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        x.iter().zip(y).map(|(u, v)| u.iter().zip(v).map(|(p, q)| mix(p, q)).collect()).collect()
    };
    DecisionVars {
        pi: mix2(&a.pi, &b.pi),
        p: a.p.iter().zip(&b.p).map(|(x, y)| mix2(x, y)).collect(),
        q: a.q.iter().zip(&b.q).map(|(x, y)| mix2(x, y)).collect(),
        w_d: mix2(&a.w_d, &b.w_d),
        w_dbar: mix2(&a.w_dbar, &b.w_dbar),
        w_e: mix2(&a.w_e, &b.w_e),
        cache: a.cache.clone(),
        t: a.t.clone(),
    }
}

/// Routing that spreads load in proportion to link capacity, for the
/// placement in `vars`: servers chosen in proportion to their cache-to-edge
/// rate, streams uniformly, and each cache-to-edge link split between its
/// two stream classes in proportion to the segment traffic each carries.
pub fn load_balanced_anchor(topology: &SystemTopology, catalog: &VideoCatalog, vars: &DecisionVars) -> DecisionVars {
    let m = topology.m();
    let total_f: f64 = topology.alpha_f_base.iter().sum();
    let mut out = vars.clone();
    for i in 0..catalog.r() {
        out.pi[i] = topology.alpha_f_base.iter().map(|a| a / total_f).collect();
        for j in 0..m {
            out.p[i][j] = vec![1.0 / topology.e[j] as f64; topology.e[j]];
            out.q[i][j] = vec![1.0 / topology.d[j] as f64; topology.d[j]];
        }
    }
    let demand: f64 = (0..catalog.r()).map(|i| catalog.lambda[i] * catalog.lengths[i] as f64).sum();
    for j in 0..m {
        let cached: f64 = (0..catalog.r()).map(|i| catalog.lambda[i] * vars.cache[j][i]).sum();
        let c = if demand > 0.0 { (cached / demand).clamp(1e-3, 1.0 - 1e-3) } else { 0.5 };
        let (d, e) = (topology.d[j] as f64, topology.e[j] as f64);
        out.w_d[j] = vec![1.0 / d; topology.d[j]];
        out.w_dbar[j] = vec![(1.0 - c) / d; topology.d[j]];
        out.w_e[j] = vec![c / e; topology.e[j]];
    }
    out
}

//! Block-alternating minimization of the normalized weighted bound.
//!
//! Each block update is a NOVA iteration: minimize the proximal
//! linearization `f(x⁰) + ⟨∇f(x⁰), x - x⁰⟩ + (τ/2)‖x - x⁰‖²` over the block's
//! linear constraint set (one Euclidean projection), then move a fraction
//! `γ` of the way to that minimizer. Steps that break feasibility or raise
//! the objective are halved until they do neither.

pub mod baselines;
pub mod projection;

use std::io::Write;

use crate::analysis::{evaluate, file_raws};
use crate::analysis::queues::QueueSnapshot;
use crate::error::{Error, Result};
use crate::model::{feasibility_of_vars, ControlPoint, DecisionVars, SystemTopology, VideoCatalog};
use projection::{project_box_capacity, project_capped_simplex, project_simplex};

pub use baselines::{baseline, Baseline};

/// Smallest `t` the aux block may propose.
pub const T_FLOOR: f64 = 1e-9;
/// Step halvings tried before a block gives up on the current direction.
pub const MAX_BACKOFF: usize = 40;
/// Placement rounding passes.
const ROUNDING_PASSES: usize = 3;
const INITIAL_RADIUS: f64 = 0.25;
const MIN_RADIUS: f64 = 1e-12;
const MAX_RADIUS: f64 = 1.0;
/// `t` repair after another block's move: geometric shrink steps.
const T_REPAIR_FACTOR: f64 = 0.9;
const T_REPAIR_STEPS: usize = 400;
/// Routing probabilities below this are zeroed after a scheduling visit
/// when that does not raise the objective.
const SNAP_BELOW: f64 = 1e-6;
/// Golden-section steps of the per-file `t` search, on `ln t`.
const T_SEARCH_STEPS: usize = 80;
/// Doublings tried when bracketing the largest admissible `t`.
const T_BRACKET_STEPS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Scheduling,
    Aux,
    Bandwidth,
    Placement,
}

impl Block {
    pub const DEFAULT_ORDER: [Block; 4] = [Block::Scheduling, Block::Aux, Block::Bandwidth, Block::Placement];

    pub fn tag(self) -> &'static str {
        match self {
            Block::Scheduling => "schedule",
            Block::Aux => "t",
            Block::Bandwidth => "w",
            Block::Placement => "placement",
        }
    }
}

/// Variables held fixed at their initial values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Frozen {
    pub pi: bool,
    /// Stream selection `p` and `q`.
    pub pq: bool,
    pub t: bool,
    pub w: bool,
    pub placement: bool,
}

impl Frozen {
    fn block(&self, b: Block) -> bool {
        match b {
            Block::Scheduling => self.pi && self.pq,
            Block::Aux => self.t,
            Block::Bandwidth => self.w,
            Block::Placement => self.placement,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSettings {
    /// Relative objective decrease below which a block or cycle stops.
    pub epsilon: f64,
    pub gamma0: f64,
    /// `γ_ν = γ0 / (1 + decay·ν)`; ignored with `constant_step`.
    pub gamma_decay: f64,
    pub constant_step: bool,
    /// Block visits.
    pub max_outer: usize,
    /// NOVA iterations per block visit.
    pub max_inner: usize,
    /// Proximal weight relative to the block's gradient scale; `τ` is this
    /// times `‖∇_B f‖∞ / (radius · scale)`.
    pub prox_weight: f64,
    /// Central differences (relative step 1e-6) instead of the analytic
    /// gradient.
    pub finite_difference: bool,
    pub frozen: Frozen,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            gamma0: 1.0,
            gamma_decay: 0.01,
            constant_step: false,
            max_outer: 300,
            max_inner: 20,
            prox_weight: 1.0,
            finite_difference: false,
            frozen: Frozen::default(),
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.gamma0 > 0.0 && self.gamma0 <= 1.0) || !(self.gamma_decay >= 0.0) {
            return Err(Error::InvalidInput("need epsilon > 0, gamma0 in (0,1], decay >= 0".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 || !(self.prox_weight > 0.0) {
            return Err(Error::InvalidInput("iteration caps must be >= 1 and prox_weight > 0".into()));
        }
        Ok(())
    }

    fn gamma(&self, nu: usize) -> f64 {
        if self.constant_step {
            self.gamma0
        } else {
            self.gamma0 / (1.0 + self.gamma_decay * nu as f64)
        }
    }
}

/// The fixed data of one optimization problem.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub topology: &'a SystemTopology,
    pub catalog: &'a VideoCatalog,
    pub sigma: f64,
}

impl<'a> Problem<'a> {
    pub fn new(topology: &'a SystemTopology, catalog: &'a VideoCatalog) -> Self {
        Self {
            topology,
            catalog,
            sigma: catalog.sigma,
        }
    }

    /// Normalized weighted raw bound; `+inf` off the feasible set.
    pub fn objective(&self, vars: &DecisionVars, capacity: &[f64]) -> f64 {
        if !feasibility_of_vars(self.topology, self.catalog, vars, capacity).feasible {
            return f64::INFINITY;
        }
        evaluate(self.topology, self.catalog, vars, self.sigma, false).objective
    }

    pub fn gradient(&self, vars: &DecisionVars, finite_difference: bool) -> Option<DecisionVars> {
        if finite_difference {
            return fd_gradient(self, vars);
        }
        evaluate(self.topology, self.catalog, vars, self.sigma, true).gradient
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub block: Block,
    pub objective: f64,
    pub inner_iterations: usize,
    pub max_violation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizationTrace {
    /// Row 0 is the initial point.
    pub rows: Vec<TraceRow>,
    pub converged: bool,
}

impl OptimizationTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    pub fn final_objective(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.objective)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["iteration", "block", "objective", "max_constraint_violation"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([r.iteration.to_string(), r.block.tag().to_string(), format!("{:.12e}", r.objective), format!("{:.3e}", r.max_violation)])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

/// The proximal linearization minimized by each NOVA step.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub f0: f64,
    pub x0: DecisionVars,
    pub grad: DecisionVars,
    pub prox: f64,
}

impl Surrogate {
    pub fn value(&self, x: &DecisionVars) -> f64 {
        let mut lin = 0.0;
        let mut sq = 0.0;
        for_each3(x, &self.x0, &self.grad, |a, b, g| {
            lin += g * (a - b);
            sq += (a - b) * (a - b);
        });
        self.f0 + lin + 0.5 * self.prox * sq
    }

    pub fn gradient(&self, x: &DecisionVars) -> DecisionVars {
        let mut out = self.grad.clone();
        let d = combine(x, &self.x0, |a, b| a - b);
        axpy(&mut out, self.prox, &d);
        out
    }
}

fn flat(v: &DecisionVars) -> Vec<f64> {
    let mut out = Vec::new();
    v.pi.iter().for_each(|r| out.extend(r));
    v.p.iter().flatten().for_each(|r| out.extend(r));
    v.q.iter().flatten().for_each(|r| out.extend(r));
    v.w_d.iter().for_each(|r| out.extend(r));
    v.w_dbar.iter().for_each(|r| out.extend(r));
    v.w_e.iter().for_each(|r| out.extend(r));
    v.cache.iter().for_each(|r| out.extend(r));
    out.extend(&v.t);
    out
}

fn map_mut(v: &mut DecisionVars, mut f: impl FnMut(&mut f64)) {
    v.pi.iter_mut().flatten().for_each(&mut f);
    v.p.iter_mut().flatten().flatten().for_each(&mut f);
    v.q.iter_mut().flatten().flatten().for_each(&mut f);
    v.w_d.iter_mut().flatten().for_each(&mut f);
    v.w_dbar.iter_mut().flatten().for_each(&mut f);
    v.w_e.iter_mut().flatten().for_each(&mut f);
    v.cache.iter_mut().flatten().for_each(&mut f);
    v.t.iter_mut().for_each(&mut f);
}

fn for_each3(a: &DecisionVars, b: &DecisionVars, c: &DecisionVars, mut f: impl FnMut(f64, f64, f64)) {
    for ((x, y), z) in flat(a).into_iter().zip(flat(b)).zip(flat(c)) {
        f(x, y, z);
    }
}

fn combine(a: &DecisionVars, b: &DecisionVars, f: impl Fn(f64, f64) -> f64) -> DecisionVars {
    let fb = flat(b);
    let mut out = a.clone();
    let mut k = 0;
    map_mut(&mut out, |x| {
        *x = f(*x, fb[k]);
        k += 1;
    });
    out
}

fn axpy(y: &mut DecisionVars, a: f64, x: &DecisionVars) {
    let fx = flat(x);
    let mut k = 0;
    map_mut(y, |v| {
        *v += a * fx[k];
        k += 1;
    });
}

/// Euclidean distance between two points.
pub fn distance(a: &DecisionVars, b: &DecisionVars) -> f64 {
    flat(a).iter().zip(flat(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn fd_gradient(problem: &Problem, vars: &DecisionVars) -> Option<DecisionVars> {
    let base = evaluate(problem.topology, problem.catalog, vars, problem.sigma, false);
    if !base.feasible {
        return None;
    }
    let n = flat(vars).len();
    let mut grad = DecisionVars::zeros_like(vars);
    let mut gflat = vec![0.0; n];
    for (k, g) in gflat.iter_mut().enumerate() {
        let probe = |delta: f64| {
            let mut v = vars.clone();
            let mut idx = 0;
            map_mut(&mut v, |x| {
                if idx == k {
                    *x += delta;
                }
                idx += 1;
            });
            evaluate(problem.topology, problem.catalog, &v, problem.sigma, false).objective
        };
        let x = flat(vars)[k];
        let h = 1e-6 * x.abs().max(1e-3);
        *g = (probe(h) - probe(-h)) / (2.0 * h);
    }
    let mut idx = 0;
    map_mut(&mut grad, |x| {
        *x = gflat[idx];
        idx += 1;
    });
    Some(grad)
}

/// Minimizer of the proximal linearization over the block's linear set;
/// every variable outside the block (or frozen) is copied from `x`.
fn block_target(problem: &Problem, x: &DecisionVars, g: &DecisionVars, prox: f64, block: Block, frozen: &Frozen, capacity: &[f64]) -> DecisionVars {
    let mut out = x.clone();
    let step = |v: &[f64], gv: &[f64]| -> Vec<f64> { v.iter().zip(gv).map(|(a, b)| a - b / prox).collect() };
    let (topo, cat) = (problem.topology, problem.catalog);
    match block {
        Block::Scheduling => {
            for i in 0..cat.r() {
                if !frozen.pi {
                    out.pi[i] = project_simplex(&step(&x.pi[i], &g.pi[i]));
                }
                if !frozen.pq {
                    for j in 0..topo.m() {
                        out.p[i][j] = project_simplex(&step(&x.p[i][j], &g.p[i][j]));
                        out.q[i][j] = project_simplex(&step(&x.q[i][j], &g.q[i][j]));
                    }
                }
            }
        }
        Block::Aux => {
            if !frozen.t {
                out.t = step(&x.t, &g.t).into_iter().map(|t| t.max(T_FLOOR)).collect();
            }
        }
        Block::Bandwidth => {
            if !frozen.w {
                for j in 0..topo.m() {
                    out.w_d[j] = project_capped_simplex(&step(&x.w_d[j], &g.w_d[j]));
                    let d = x.w_dbar[j].len();
                    let mut joint = step(&x.w_dbar[j], &g.w_dbar[j]);
                    joint.extend(step(&x.w_e[j], &g.w_e[j]));
                    let pj = project_capped_simplex(&joint);
                    out.w_dbar[j] = pj[..d].to_vec();
                    out.w_e[j] = pj[d..].to_vec();
                }
            }
        }
        Block::Placement => {
            if !frozen.placement {
                let upper: Vec<f64> = cat.lengths.iter().map(|&l| l as f64).collect();
                for j in 0..topo.m() {
                    out.cache[j] = project_box_capacity(&step(&x.cache[j], &g.cache[j]), &upper, capacity[j]);
                }
            }
        }
    }
    out
}

/// Result of one block visit.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutcome {
    pub objective: f64,
    pub inner_iterations: usize,
}

/// Persistent per-block step state across visits. `radius` is the largest
/// coordinate move of a full step, relative to the block's scale.
#[derive(Clone, Debug)]
struct StepState {
    nu: usize,
    radius: f64,
    /// Per-file radii of the separable `t` block.
    t_radius: Vec<f64>,
}

/// Typical magnitude of the block's variables.
fn block_scale(x: &DecisionVars, block: Block, catalog: &VideoCatalog) -> f64 {
    match block {
        Block::Scheduling | Block::Bandwidth => 1.0,
        Block::Aux => x.t.iter().fold(0.0f64, |a, &b| a.max(b)).max(T_FLOOR),
        Block::Placement => catalog.lengths.iter().copied().max().unwrap_or(1) as f64,
    }
}

/// Largest gradient magnitude inside the free part of the block.
fn block_grad_norm(g: &DecisionVars, block: Block, frozen: &Frozen) -> f64 {
    let max = |v: &mut dyn Iterator<Item = &f64>| v.fold(0.0f64, |a, &b| a.max(b.abs()));
    match block {
        Block::Scheduling => {
            let a = if frozen.pi { 0.0 } else { max(&mut g.pi.iter().flatten()) };
            let b = if frozen.pq { 0.0 } else { max(&mut g.p.iter().flatten().flatten().chain(g.q.iter().flatten().flatten())) };
            a.max(b)
        }
        Block::Aux => max(&mut g.t.iter()),
        Block::Bandwidth => max(&mut g.w_d.iter().flatten().chain(g.w_dbar.iter().flatten()).chain(g.w_e.iter().flatten())),
        Block::Placement => max(&mut g.cache.iter().flatten()),
    }
}

/// Shrinks each `t_i` whose MGFs stopped existing after a move of another
/// block, so the move can still be scored. `None` if that is not enough.
fn repair_t(problem: &Problem, x: &DecisionVars, capacity: &[f64]) -> Option<DecisionVars> {
    let snap = QueueSnapshot::build(problem.topology, problem.catalog, x);
    let mut out = x.clone();
    for (i, t) in out.t.iter_mut().enumerate() {
        let mut k = 0;
        while !snap.mgf_exists_for(i, *t) && k < T_REPAIR_STEPS {
            *t *= T_REPAIR_FACTOR;
            k += 1;
        }
    }
    feasibility_of_vars(problem.topology, problem.catalog, &out, capacity).feasible.then_some(out)
}

/// Objective of a trial point; moves of other blocks may pull `t` back.
fn score(problem: &Problem, trial: DecisionVars, block: Block, frozen: &Frozen, capacity: &[f64]) -> (DecisionVars, f64) {
    let f = problem.objective(&trial, capacity);
    if f.is_finite() || block == Block::Aux || frozen.t {
        return (trial, f);
    }
    match repair_t(problem, &trial, capacity) {
        Some(fixed) => {
            let f = problem.objective(&fixed, capacity);
            (fixed, f)
        }
        None => (trial, f64::INFINITY),
    }
}

/// NOVA iterations on one block starting at the feasible `x` with value `f`.
/// The proximal weight is set so that a full step moves no coordinate by
/// more than `radius · scale`; the radius shrinks with every halving the
/// backoff needed and grows after full steps. Returns the last accepted
/// iterate.
fn nova_block(problem: &Problem, x: DecisionVars, f: f64, block: Block, settings: &OptimizerSettings, state: &mut StepState, capacity: &[f64]) -> (DecisionVars, f64, usize) {
    let mut x = x;
    let mut f = f;
    let mut used = 0;
    for _ in 0..settings.max_inner {
        let Some(g) = problem.gradient(&x, settings.finite_difference) else { break };
        used += 1;
        let gn = block_grad_norm(&g, block, &settings.frozen);
        if !(gn > 0.0) || !gn.is_finite() {
            break;
        }
        let prox = settings.prox_weight * gn / (state.radius * block_scale(&x, block, problem.catalog));
        let hat = block_target(problem, &x, &g, prox, block, &settings.frozen, capacity);
        if distance(&hat, &x) == 0.0 {
            break;
        }
        let mut gamma = settings.gamma(state.nu);
        state.nu += 1;
        let mut accepted = None;
        for halvings in 0..MAX_BACKOFF {
            let trial = combine(&x, &hat, |a, b| a + gamma * (b - a));
            let (trial, ft) = score(problem, trial, block, &settings.frozen, capacity);
            if ft <= f {
                accepted = Some((trial, ft, halvings));
                break;
            }
            gamma *= 0.5;
        }
        let Some((trial, ft, halvings)) = accepted else {
            state.radius = (state.radius * 0.5).max(MIN_RADIUS);
            break;
        };
        state.radius = if halvings > 0 {
            (state.radius * 0.5f64.powi(halvings as i32)).max(MIN_RADIUS)
        } else {
            (state.radius * 2.0).min(MAX_RADIUS)
        };
        let rel = (f - ft) / f.abs().max(f64::MIN_POSITIVE);
        x = trial;
        f = ft;
        if rel < settings.epsilon && halvings == 0 {
            break;
        }
    }
    (x, f, used)
}

/// NOVA iterations on the `t` block. File `i`'s bound depends on `t_i` alone
/// (the stream loads do not involve `t`), so the block splits into `r`
/// one-dimensional problems: each file gets its own proximal weight, step
/// radius (relative to `t_i`) and backoff.
fn nova_aux(problem: &Problem, x: DecisionVars, f: f64, settings: &OptimizerSettings, state: &mut StepState, capacity: &[f64]) -> (DecisionVars, f64, usize) {
    let (topo, cat) = (problem.topology, problem.catalog);
    let r = cat.r();
    if state.t_radius.len() != r {
        state.t_radius = vec![INITIAL_RADIUS; r];
    }
    let snap = QueueSnapshot::build(topo, cat, &x);
    let mut x = x;
    let mut f = f;
    let mut used = 0;
    for _ in 0..settings.max_inner {
        let cur = evaluate(topo, cat, &x, problem.sigma, true);
        let Some(g) = cur.gradient.as_ref() else { break };
        used += 1;
        let hat: Vec<f64> = (0..r)
            .map(|i| {
                let gi = g.t[i];
                if gi == 0.0 || !gi.is_finite() {
                    return x.t[i];
                }
                let prox = settings.prox_weight * gi.abs() / (state.t_radius[i] * x.t[i]);
                (x.t[i] - gi / prox).max(T_FLOOR)
            })
            .collect();
        let gamma0 = settings.gamma(state.nu);
        state.nu += 1;
        let mut gamma = vec![gamma0; r];
        let mut pending: Vec<bool> = (0..r).map(|i| hat[i] != x.t[i]).collect();
        let mut halvings = vec![0usize; r];
        let mut next = x.clone();
        for h in 0..MAX_BACKOFF {
            if !pending.iter().any(|&p| p) {
                break;
            }
            let mut trial = next.clone();
            let idx: Vec<usize> = (0..r).filter(|&i| pending[i]).collect();
            for &i in &idx {
                trial.t[i] = x.t[i] + gamma[i] * (hat[i] - x.t[i]);
            }
            let raws = file_raws(topo, cat, &snap, &trial, problem.sigma, &idx);
            for (&i, raw) in idx.iter().zip(raws) {
                let ok = trial.t[i] > 0.0 && snap.mgf_exists_for(i, trial.t[i]) && raw <= cur.files[i].raw;
                if ok {
                    next.t[i] = trial.t[i];
                    pending[i] = false;
                    halvings[i] = h;
                } else {
                    gamma[i] *= 0.5;
                }
            }
        }
        for i in 0..r {
            state.t_radius[i] = if pending[i] {
                (state.t_radius[i] * 0.5).max(MIN_RADIUS)
            } else if halvings[i] > 0 {
                (state.t_radius[i] * 0.5f64.powi(halvings[i] as i32)).max(MIN_RADIUS)
            } else if next.t[i] != x.t[i] {
                (state.t_radius[i] * 2.0).min(MAX_RADIUS)
            } else {
                state.t_radius[i]
            };
        }
        let fn_ = problem.objective(&next, capacity);
        if !(fn_ <= f) {
            break;
        }
        let rel = (f - fn_) / f.abs().max(f64::MIN_POSITIVE);
        let full = halvings.iter().zip(&pending).all(|(&h, &p)| h == 0 && !p);
        x = next;
        f = fn_;
        if rel < settings.epsilon && full {
            break;
        }
    }
    (x, f, used)
}

/// Largest `t` (up to bisection accuracy) whose MGFs exist for file `i`,
/// given that they exist at `t0`. The admissible set is an interval because
/// `(B(t) - 1)/t` grows with `t`.
fn t_supremum(snap: &QueueSnapshot, i: usize, t0: f64) -> f64 {
    let (mut lo, mut hi) = (t0, t0);
    let mut k = 0;
    while snap.mgf_exists_for(i, hi) {
        lo = hi;
        hi *= 2.0;
        k += 1;
        if k == T_BRACKET_STEPS {
            return lo;
        }
    }
    for _ in 0..T_SEARCH_STEPS {
        let mid = 0.5 * (lo + hi);
        if snap.mgf_exists_for(i, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Exact minimization of every file's raw bound over its own `t_i`. Each raw
/// bound is a sum of log-convex terms in `t_i`, hence unimodal, so a golden
/// section on `ln t` finds the minimizer; a file keeps its old value unless
/// the search does strictly better.
fn exact_aux(problem: &Problem, x: &DecisionVars, f: f64, capacity: &[f64]) -> (DecisionVars, f64) {
    let (topo, cat) = (problem.topology, problem.catalog);
    let r = cat.r();
    let snap = QueueSnapshot::build(topo, cat, x);
    let all: Vec<usize> = (0..r).collect();
    let raws = |t: &[f64]| {
        let mut v = x.clone();
        v.t = t.to_vec();
        file_raws(topo, cat, &snap, &v, problem.sigma, &all)
            .into_iter()
            .map(|y| if y.is_nan() { f64::INFINITY } else { y })
            .collect::<Vec<f64>>()
    };
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    let mut lo: Vec<f64> = vec![T_FLOOR.ln(); r];
    let mut hi: Vec<f64> = (0..r).map(|i| t_supremum(&snap, i, x.t[i]).max(T_FLOOR).ln()).collect();
    let mut a: Vec<f64> = (0..r).map(|i| hi[i] - golden * (hi[i] - lo[i])).collect();
    let mut b: Vec<f64> = (0..r).map(|i| lo[i] + golden * (hi[i] - lo[i])).collect();
    let exp = |v: &[f64]| v.iter().map(|s| s.exp()).collect::<Vec<f64>>();
    let mut fa = raws(&exp(&a));
    let mut fb = raws(&exp(&b));
    for _ in 0..T_SEARCH_STEPS {
        let mut probe = vec![0.0; r];
        let mut left = vec![false; r];
        for i in 0..r {
            if fa[i] <= fb[i] {
                hi[i] = b[i];
                b[i] = a[i];
                fb[i] = fa[i];
                a[i] = hi[i] - golden * (hi[i] - lo[i]);
                probe[i] = a[i];
                left[i] = true;
            } else {
                lo[i] = a[i];
                a[i] = b[i];
                fa[i] = fb[i];
                b[i] = lo[i] + golden * (hi[i] - lo[i]);
                probe[i] = b[i];
            }
        }
        let fp = raws(&exp(&probe));
        for i in 0..r {
            if left[i] {
                fa[i] = fp[i];
            } else {
                fb[i] = fp[i];
            }
        }
    }
    let current = raws(&x.t);
    let mut out = x.clone();
    for i in 0..r {
        let (s, fs) = if fa[i] <= fb[i] { (a[i], fa[i]) } else { (b[i], fb[i]) };
        if fs < current[i] {
            out.t[i] = s.exp();
        }
    }
    let fo = problem.objective(&out, capacity);
    if fo <= f && feasibility_of_vars(topo, cat, &out, capacity).feasible {
        (out, fo)
    } else {
        (x.clone(), f)
    }
}

fn start(problem: &Problem, point: &ControlPoint, settings: &OptimizerSettings) -> Result<(DecisionVars, f64)> {
    settings.validate()?;
    problem.topology.validate()?;
    problem.catalog.validate()?;
    point.check_dims(problem.topology, problem.catalog)?;
    let vars = point.to_vars();
    let rep = feasibility_of_vars(problem.topology, problem.catalog, &vars, &point.placement.capacity);
    if !rep.feasible {
        return Err(Error::InfeasibleInstance(rep.describe_violation().unwrap_or_default()));
    }
    let f = problem.objective(&vars, &point.placement.capacity);
    if !f.is_finite() {
        return Err(Error::BoundUndefined("objective undefined at the initial point".into()));
    }
    Ok((vars, f))
}

fn fresh_state() -> StepState {
    StepState {
        nu: 0,
        radius: INITIAL_RADIUS,
        t_radius: Vec::new(),
    }
}

fn run_block(problem: &Problem, point: &ControlPoint, block: Block, settings: &OptimizerSettings, state: &mut StepState) -> Result<(ControlPoint, BlockOutcome)> {
    let (vars, f) = start(problem, point, settings)?;
    let capacity = &point.placement.capacity;
    if settings.frozen.block(block) {
        return Ok((point.clone(), BlockOutcome { objective: f, inner_iterations: 0 }));
    }
    let (mut x, mut fx, used) = if block == Block::Aux {
        let (y, fy) = exact_aux(problem, &vars, f, capacity);
        nova_aux(problem, y, fy, settings, state, capacity)
    } else {
        nova_block(problem, vars.clone(), f, block, settings, state, capacity)
    };
    if block == Block::Scheduling {
        let y = snap_small_routing(&x, &settings.frozen);
        let fy = problem.objective(&y, capacity);
        if fy <= fx {
            x = y;
            fx = fy;
        }
    }
    if block != Block::Placement {
        return Ok((x.to_point(capacity), BlockOutcome { objective: fx, inner_iterations: used }));
    }
    let (rounded, fr) = round_relaxed(problem, &x, capacity);
    if fr <= f {
        Ok((rounded.to_point(capacity), BlockOutcome { objective: fr, inner_iterations: used }))
    } else {
        Ok((point.clone(), BlockOutcome { objective: f, inner_iterations: used }))
    }
}

/// Zeroes routing probabilities below [`SNAP_BELOW`] and renormalizes. Damped
/// steps only shrink such entries geometrically, yet each one keeps the
/// stream's MGF constraint on the file's `t` alive.
fn snap_small_routing(x: &DecisionVars, frozen: &Frozen) -> DecisionVars {
    let snap = |row: &mut Vec<f64>| {
        let kept: f64 = row.iter().filter(|&&v| v >= SNAP_BELOW).sum();
        if kept > 0.0 {
            for v in row.iter_mut() {
                *v = if *v >= SNAP_BELOW { *v / kept } else { 0.0 };
            }
        }
    };
    let mut out = x.clone();
    for i in 0..out.pi.len() {
        if !frozen.pi {
            snap(&mut out.pi[i]);
        }
        if !frozen.pq {
            out.p[i].iter_mut().for_each(snap);
            out.q[i].iter_mut().for_each(snap);
        }
    }
    out
}

/// Integer placement from a relaxed one: floor, then re-add single units in
/// order of most negative objective gradient, keeping each unit only if it
/// lowers the objective. The fractional-part rounding is tried as well and
/// the better of the two is returned.
fn round_relaxed(problem: &Problem, relaxed: &DecisionVars, capacity: &[f64]) -> (DecisionVars, f64) {
    let (topo, cat) = (problem.topology, problem.catalog);
    let mut x = relaxed.clone();
    for row in x.cache.iter_mut() {
        for c in row.iter_mut() {
            *c = (*c + 1e-9).floor().max(0.0);
        }
    }
    let mut f = problem.objective(&x, capacity);
    for _ in 0..ROUNDING_PASSES {
        let Some(g) = problem.gradient(&x, false) else { break };
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for j in 0..topo.m() {
            for i in 0..cat.r() {
                if g.cache[j][i] < 0.0 && x.cache[j][i] < cat.lengths[i] as f64 {
                    cands.push((g.cache[j][i], j, i));
                }
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut improved = false;
        for (_, j, i) in cands {
            let used: f64 = x.cache[j].iter().sum();
            if used + 1.0 > capacity[j] {
                continue;
            }
            x.cache[j][i] += 1.0;
            let ft = problem.objective(&x, capacity);
            if ft < f {
                f = ft;
                improved = true;
            } else {
                x.cache[j][i] -= 1.0;
            }
        }
        if !improved {
            break;
        }
    }
    let mut y = relaxed.clone();
    for j in 0..topo.m() {
        y.cache[j] = crate::model::round_placement(&relaxed.cache[j], &cat.lengths, capacity[j]).into_iter().map(|c| c as f64).collect();
    }
    let fy = problem.objective(&y, capacity);
    if fy < f {
        (y, fy)
    } else {
        (x, f)
    }
}

/// Scheduling block `(π, p, q)`.
pub fn optimize_scheduling(problem: &Problem, point: &ControlPoint, settings: &OptimizerSettings) -> Result<(ControlPoint, BlockOutcome)> {
    run_block(problem, point, Block::Scheduling, settings, &mut fresh_state())
}

/// Chernoff parameters `t`.
pub fn optimize_aux(problem: &Problem, point: &ControlPoint, settings: &OptimizerSettings) -> Result<(ControlPoint, BlockOutcome)> {
    run_block(problem, point, Block::Aux, settings, &mut fresh_state())
}

/// Bandwidth weights `w`.
pub fn optimize_bandwidth(problem: &Problem, point: &ControlPoint, settings: &OptimizerSettings) -> Result<(ControlPoint, BlockOutcome)> {
    run_block(problem, point, Block::Bandwidth, settings, &mut fresh_state())
}

/// Cache placement, relaxed then rounded; never worse than the input.
pub fn optimize_placement(problem: &Problem, point: &ControlPoint, settings: &OptimizerSettings) -> Result<(ControlPoint, BlockOutcome)> {
    let total: f64 = problem.catalog.total_segments() as f64;
    if point.placement.capacity.iter().any(|&c| !(c >= 0.0)) {
        return Err(Error::Capacity("capacity must be nonnegative".into()));
    }
    if point.placement.capacity.iter().any(|&c| c > total) {
        // Everything fits: the unconstrained optimum caches every segment.
        let mut full = point.clone();
        for row in full.placement.segments.iter_mut() {
            row.copy_from_slice(&problem.catalog.lengths);
        }
        let (vars, f) = start(problem, point, settings)?;
        let ff = problem.objective(&full.to_vars(), &point.placement.capacity);
        if ff <= f {
            return Ok((full, BlockOutcome { objective: ff, inner_iterations: 0 }));
        }
        return Ok((vars.to_point(&point.placement.capacity), BlockOutcome { objective: f, inner_iterations: 0 }));
    }
    run_block(problem, point, Block::Placement, settings, &mut fresh_state())
}

/// Cycles through `order` until a full cycle lowers the objective by less
/// than `epsilon` (relative) or `max_outer` block visits have run.
pub fn alternate(problem: &Problem, point: &ControlPoint, settings: &OptimizerSettings, order: &[Block]) -> Result<(ControlPoint, OptimizationTrace)> {
    let (vars, f0) = start(problem, point, settings)?;
    let order: Vec<Block> = order.iter().copied().filter(|b| !settings.frozen.block(*b)).collect();
    let capacity = point.placement.capacity.clone();
    let violation = |p: &ControlPoint| feasibility_of_vars(problem.topology, problem.catalog, &p.to_vars(), &capacity).max_violation();
    let mut cur = vars.to_point(&capacity);
    let mut trace = OptimizationTrace {
        rows: vec![TraceRow {
            iteration: 0,
            block: order.first().copied().unwrap_or(Block::Scheduling),
            objective: f0,
            inner_iterations: 0,
            max_violation: violation(&cur),
        }],
        converged: false,
    };
    if order.is_empty() {
        trace.converged = true;
        return Ok((cur, trace));
    }
    let mut states: Vec<StepState> = order.iter().map(|_| fresh_state()).collect();
    let mut cycle_start = f0;
    let mut f = f0;
    let mut restarted = false;
    for k in 0..settings.max_outer {
        let slot = k % order.len();
        let (next, out) = run_block(problem, &cur, order[slot], settings, &mut states[slot])?;
        if out.objective <= f {
            cur = next;
            f = out.objective;
        }
        trace.rows.push(TraceRow {
            iteration: k + 1,
            block: order[slot],
            objective: f,
            inner_iterations: out.inner_iterations,
            max_violation: violation(&cur),
        });
        if slot + 1 == order.len() {
            let rel = (cycle_start - f) / cycle_start.abs().max(f64::MIN_POSITIVE);
            if rel < settings.epsilon {
                if restarted {
                    trace.converged = true;
                    break;
                }
                // Shrunken trust radii can stall a block that still has room;
                // only a stall from fresh radii counts as convergence.
                states.iter_mut().for_each(|s| *s = fresh_state());
                restarted = true;
            } else {
                restarted = false;
            }
            cycle_start = f;
        }
    }
    Ok((cur, trace))
}

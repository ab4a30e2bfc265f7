//! Closed-form queueing quantities and the stall-duration tail bound.
//!
//! Stream service times are shifted exponentials, each stream is an M/G/1
//! queue whose customers are whole requests (batches of segments), and the
//! bound combines P-K waiting-time MGFs with a Chernoff/union argument over
//! segments.

pub mod delta;
pub mod dual;
pub mod engine;
pub mod queues;
pub mod series;

use crate::error::{Error, Result};
use crate::model::{
    AggregateArrivals, BandwidthWeights, CachePlacement, ControlPoint, ScheduleMatrices, StreamRates, SystemTopology,
    VideoCatalog,
};
use dual::Dual;
pub use engine::{evaluate, file_raws, Evaluation, FileBound, ServerTerms};
pub use queues::{QueueClass, QueueSnapshot, StreamState};

/// An MGF value with its existence flag; `value` is meaningless when
/// `defined` is false.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MgfValue {
    pub value: f64,
    pub defined: bool,
}

impl MgfValue {
    pub fn of(value: f64) -> Self {
        Self { value, defined: true }
    }

    pub fn undefined() -> Self {
        Self {
            value: f64::NAN,
            defined: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueueStats {
    pub rho: f64,
    pub b_at_t: MgfValue,
    pub pk_at_t: MgfValue,
}

/// `α e^{ηt} / (α - t)`, defined iff `t < α`.
pub fn shifted_exp_mgf(alpha: f64, eta: f64, t: f64) -> MgfValue {
    if t < alpha {
        MgfValue::of(alpha * (eta * t).exp() / (alpha - t))
    } else {
        MgfValue::undefined()
    }
}

/// Effective stream rates: bandwidth weight times the link's base rate.
pub fn stream_rates(topology: &SystemTopology, bandwidth: &BandwidthWeights) -> StreamRates {
    let scale = |w: &Vec<Vec<f64>>, base: &Vec<f64>| -> Vec<Vec<f64>> {
        w.iter().zip(base).map(|(row, b)| row.iter().map(|x| x * b).collect()).collect()
    };
    StreamRates {
        alpha_d: scale(&bandwidth.w_d, &topology.alpha_d_base),
        alpha_dbar: scale(&bandwidth.w_dbar, &topology.alpha_f_base),
        alpha_e: scale(&bandwidth.w_e, &topology.alpha_f_base),
    }
}

/// Per-stream Poisson arrival rates after two-stage splitting.
pub fn aggregate_arrivals(catalog: &VideoCatalog, schedule: &ScheduleMatrices) -> AggregateArrivals {
    let r = catalog.r();
    let m = schedule.pi.first().map_or(0, |row| row.len());
    let mut lambda_e: Vec<Vec<f64>> = (0..m).map(|j| vec![0.0; schedule.p[0][j].len()]).collect();
    let mut lambda_d: Vec<Vec<f64>> = (0..m).map(|j| vec![0.0; schedule.q[0][j].len()]).collect();
    for i in 0..r {
        for j in 0..m {
            let base = catalog.lambda[i] * schedule.pi[i][j];
            for (nu, p) in schedule.p[i][j].iter().enumerate() {
                lambda_e[j][nu] += base * p;
            }
            for (b, q) in schedule.q[i][j].iter().enumerate() {
                lambda_d[j][b] += base * q;
            }
        }
    }
    AggregateArrivals {
        lambda_dbar: lambda_d.clone(),
        lambda_d,
        lambda_e,
    }
}

fn segments_on(class: QueueClass, catalog: &VideoCatalog, placement: &CachePlacement, j: usize, i: usize) -> f64 {
    let c = placement.segments[j][i] as f64;
    match class {
        QueueClass::E => c,
        QueueClass::D | QueueClass::Dbar => catalog.lengths[i] as f64 - c,
    }
}

fn route(class: QueueClass, schedule: &ScheduleMatrices, i: usize, j: usize, k: usize) -> f64 {
    match class {
        QueueClass::E => schedule.p[i][j][k],
        QueueClass::D | QueueClass::Dbar => schedule.q[i][j][k],
    }
}

fn rate_and_shift(class: QueueClass, topology: &SystemTopology, rates: &StreamRates, j: usize, k: usize) -> (f64, f64) {
    match class {
        QueueClass::E => (rates.alpha_e[j][k], topology.eta_e[j]),
        QueueClass::D => (rates.alpha_d[j][k], topology.eta_d[j]),
        QueueClass::Dbar => (rates.alpha_dbar[j][k], topology.eta_dbar[j]),
    }
}

/// Load `Σ_i λ_i π_ij (p|q) n_i (η + 1/α)` of stream `k` of the given class
/// at server `j`, where `n_i` is the cached prefix (class `E`) or the
/// non-cached remainder (classes `D`, `Dbar`).
#[allow(clippy::too_many_arguments)]
pub fn load_intensity(
    class: QueueClass,
    topology: &SystemTopology,
    catalog: &VideoCatalog,
    placement: &CachePlacement,
    schedule: &ScheduleMatrices,
    rates: &StreamRates,
    j: usize,
    k: usize,
) -> Result<f64> {
    let (alpha, eta) = rate_and_shift(class, topology, rates, j, k);
    let mut work = 0.0;
    for i in 0..catalog.r() {
        work += catalog.lambda[i] * schedule.pi[i][j] * route(class, schedule, i, j, k) * segments_on(class, catalog, placement, j, i);
    }
    if work <= 0.0 {
        return Ok(0.0);
    }
    if !(alpha > 0.0) {
        return Err(Error::InfeasibleStream(format!("{}[{j}][{k}] carries traffic at zero rate", class.tag())));
    }
    Ok(work * (eta + 1.0 / alpha))
}

/// Batch-service MGF of stream `k` of the given class at server `j`: the
/// traffic-weighted mixture of `M(t)^{n_i}`.
#[allow(clippy::too_many_arguments)]
pub fn batch_service_mgf(
    class: QueueClass,
    topology: &SystemTopology,
    catalog: &VideoCatalog,
    placement: &CachePlacement,
    schedule: &ScheduleMatrices,
    rates: &StreamRates,
    j: usize,
    k: usize,
    t: f64,
) -> Result<MgfValue> {
    let (alpha, eta) = rate_and_shift(class, topology, rates, j, k);
    let mut lambda = 0.0;
    for i in 0..catalog.r() {
        lambda += catalog.lambda[i] * schedule.pi[i][j] * route(class, schedule, i, j, k);
    }
    if lambda <= 0.0 {
        return Err(Error::UndefinedMixture(format!("{}[{j}][{k}]", class.tag())));
    }
    let m = shifted_exp_mgf(alpha, eta, t);
    if !m.defined {
        return Ok(m);
    }
    let mut b = 0.0;
    for i in 0..catalog.r() {
        let a = catalog.lambda[i] * schedule.pi[i][j] * route(class, schedule, i, j, k);
        if a > 0.0 {
            b += a / lambda * m.value.powf(segments_on(class, catalog, placement, j, i));
        }
    }
    Ok(MgfValue::of(b))
}

/// Pollaczek-Khinchine transform `(1-ρ) t B(t) / (t - Λ(B(t) - 1))`.
pub fn pk_waiting_mgf(lambda: f64, rho: f64, b_at_t: f64, t: f64) -> Result<MgfValue> {
    if !(rho < 1.0) {
        return Err(Error::Unstable {
            rho,
            at: "pk_waiting_mgf".into(),
        });
    }
    if t == 0.0 {
        return Ok(MgfValue::of(b_at_t));
    }
    let den = t - lambda * (b_at_t - 1.0);
    if !(den > 0.0) || !b_at_t.is_finite() {
        return Ok(MgfValue::undefined());
    }
    Ok(MgfValue::of((1.0 - rho) * t * b_at_t / den))
}

/// `δ1..δ4` of one path, each already summed over its segments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaTerms {
    pub delta: [f64; 4],
    pub defined: bool,
}

impl DeltaTerms {
    pub fn sum(&self) -> f64 {
        self.delta.iter().sum()
    }
}

/// Precomputed queue state of one control point, for per-path queries.
#[derive(Clone, Debug)]
pub struct BoundContext<'a> {
    pub topology: &'a SystemTopology,
    pub catalog: &'a VideoCatalog,
    pub point: &'a ControlPoint,
    pub sigma: f64,
    snap: QueueSnapshot,
}

impl<'a> BoundContext<'a> {
    pub fn new(topology: &'a SystemTopology, catalog: &'a VideoCatalog, point: &'a ControlPoint, sigma: f64) -> Result<Self> {
        topology.validate()?;
        catalog.validate()?;
        point.check_dims(topology, catalog)?;
        let snap = QueueSnapshot::build(topology, catalog, &point.to_vars());
        Ok(Self {
            topology,
            catalog,
            point,
            sigma,
            snap,
        })
    }

    pub fn snapshot(&self) -> &QueueSnapshot {
        &self.snap
    }

    pub fn queue_stats(&self, class: QueueClass, j: usize, k: usize, t: f64) -> Result<QueueStats> {
        let s = self.snap.stream(class, j, k);
        let b = if s.lambda > 0.0 {
            match s.ln_mgf(t) {
                Some(l) => MgfValue::of(s.mixture(l) / s.lambda),
                None => MgfValue::undefined(),
            }
        } else {
            MgfValue::of(1.0)
        };
        let pk = if b.defined {
            pk_waiting_mgf(s.lambda, s.rho, b.value, t)?
        } else {
            MgfValue::undefined()
        };
        Ok(QueueStats {
            rho: s.rho,
            b_at_t: b,
            pk_at_t: pk,
        })
    }

    /// `(ln W, ln M)` of a stream as seen by file `i` at `t`. An empty stream
    /// waits as if file `i` were its only customer.
    fn waiting(&self, class: QueueClass, j: usize, k: usize, i: usize, t: f64) -> Option<(f64, f64)> {
        let s = self.snap.stream(class, j, k);
        let ln_m = s.ln_mgf(t)?;
        if s.lambda <= 0.0 {
            return Some((s.users[i].n * ln_m, ln_m));
        }
        if !(s.rho < 1.0) {
            return None;
        }
        if t == 0.0 {
            return Some((0.0, ln_m));
        }
        let z = s.mixture(ln_m);
        let den = t - z + s.lambda;
        if !(den > 0.0) {
            return None;
        }
        Some(((1.0 - s.rho).ln() + t.ln() + z.ln() - s.lambda.ln() - den.ln(), ln_m))
    }

    fn cache(&self, j: usize, i: usize) -> u32 {
        self.point.placement.segments[j][i]
    }

    fn check_path(&self, i: usize, j: usize, beta: usize, nu: usize) -> Result<()> {
        if i >= self.catalog.r() || j >= self.topology.m() || beta >= self.topology.d[j] || nu >= self.topology.e[j] {
            return Err(Error::DimensionMismatch(format!("path ({i},{j},{beta},{nu}) out of range")));
        }
        Ok(())
    }

    /// MGF of the download time of cached segment `g` (`1 ≤ g ≤ L_cache`):
    /// `W_e(t) M_e(t)^g`.
    pub fn cached_download_mgf(&self, i: usize, j: usize, nu: usize, g: u32, t: f64) -> Result<MgfValue> {
        self.check_path(i, j, 0, nu)?;
        if g == 0 || g > self.cache(j, i) {
            return Err(Error::InvalidInput(format!("segment {g} of file {i} is not cached at server {j}")));
        }
        Ok(self.cached_download_mgf_raw(i, j, nu, g, t))
    }

    /// As [`Self::cached_download_mgf`] but also accepts `g = 0`, the waiting
    /// MGF alone.
    pub(crate) fn cached_download_mgf_raw(&self, i: usize, j: usize, nu: usize, g: u32, t: f64) -> MgfValue {
        match self.waiting(QueueClass::E, j, nu, i, t) {
            Some((lw, lm)) => MgfValue::of((lw + g as f64 * lm).exp()),
            None => MgfValue::undefined(),
        }
    }

    /// Union-bound MGF of the download time of non-cached segment `v`:
    /// the sum over `y = L_cache..=v` of the MGFs of the candidate
    /// completion paths, evaluated term by term.
    pub fn noncached_download_mgf_bruteforce(&self, i: usize, j: usize, beta: usize, v: u32, t: f64) -> Result<MgfValue> {
        self.check_path(i, j, beta, 0)?;
        let c = self.cache(j, i);
        if v <= c || v > self.catalog.lengths[i] {
            return Err(Error::InvalidInput(format!("segment {v} of file {i} is not served from the datacenter at server {j}")));
        }
        let (Some((lwd, lmd)), Some((lwb, lmb))) = (self.waiting(QueueClass::D, j, beta, i, t), self.waiting(QueueClass::Dbar, j, beta, i, t)) else {
            return Ok(MgfValue::undefined());
        };
        let (wd, md, wb, mb) = (lwd.exp(), lmd.exp(), lwb.exp(), lmb.exp());
        let mut total = wb * mb.powi((v - c) as i32);
        for y in (c + 1)..=v {
            total += wd * md.powi((y - c - 1) as i32) * mb.powi((v - y + 1) as i32);
        }
        Ok(MgfValue::of(total))
    }

    /// Term-by-term sum `Σ_{v=1}^{upto} e^{-t(σ + d_s + (v-1)τ)} E[e^{tD(v)}]`
    /// for one path, using the per-segment MGFs above.
    pub fn path_sum_bruteforce(&self, i: usize, j: usize, beta: usize, nu: usize, t: f64, upto: u32) -> Result<MgfValue> {
        self.check_path(i, j, beta, nu)?;
        let c = self.cache(j, i);
        let cat = self.catalog;
        let mut total = 0.0;
        for v in 1..=upto.min(cat.lengths[i]) {
            let mgf = if v <= c {
                self.cached_download_mgf_raw(i, j, nu, v, t)
            } else {
                self.noncached_download_mgf_bruteforce(i, j, beta, v, t)?
            };
            if !mgf.defined {
                return Ok(MgfValue::undefined());
            }
            total += (-t * (self.sigma + cat.d_s + (v - 1) as f64 * cat.tau)).exp() * mgf.value;
        }
        Ok(MgfValue::of(total))
    }

    /// Closed-form `δ1..δ4` of path `(j, beta, nu)` for file `i`, summed over
    /// segments `1..=upto` (`upto = L_i` gives the full bound terms).
    pub fn delta_terms(&self, i: usize, j: usize, beta: usize, nu: usize, t: f64, upto: u32) -> Result<DeltaTerms> {
        self.check_path(i, j, beta, nu)?;
        if upto > self.catalog.lengths[i] {
            return Err(Error::InvalidInput(format!("upto={upto} exceeds L_{i}")));
        }
        let cat = self.catalog;
        let c = self.cache(j, i) as f64;
        let upto = upto as f64;
        let k = |x: f64| Dual::<0>::cst(x);
        let ln_a = k(-t * (self.sigma + cat.d_s));
        let lx = k(-t * cat.tau);
        let mut out = [0.0; 4];
        if c > 0.0 {
            let Some((lw, lm)) = self.waiting(QueueClass::E, j, nu, i, t) else {
                return Ok(DeltaTerms { delta: [f64::NAN; 4], defined: false });
            };
            out[0] = delta::delta1(ln_a, lx, k(lw), k(lm), k(c), upto).v;
        }
        if upto > c {
            let (Some((lwd, lmd)), Some((lwb, lmb))) = (self.waiting(QueueClass::D, j, beta, i, t), self.waiting(QueueClass::Dbar, j, beta, i, t)) else {
                return Ok(DeltaTerms { delta: [f64::NAN; 4], defined: false });
            };
            let r = delta::delta_noncached(ln_a, lx, k(lwd), k(lmd), k(lwb), k(lmb), k(c), upto);
            out[1] = r[0].v;
            out[2] = r[1].v;
            out[3] = r[2].v;
        }
        Ok(DeltaTerms { delta: out, defined: true })
    }
}

/// One file's bound.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    pub file: usize,
    pub raw: f64,
    /// `min(raw, 1)`.
    pub clipped: f64,
    /// Routing-weighted `δ1..δ4`.
    pub deltas: [f64; 4],
    pub terms: Vec<ServerTerms>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub sigma: f64,
    pub rows: Vec<BoundRow>,
    /// `Σ_i w_i · clipped_i`.
    pub objective: f64,
    /// `Σ_i w_i · raw_i / Σ_i w_i`, the quantity the optimizer minimizes.
    pub weighted_raw: f64,
    pub feasible: bool,
}

fn row_of(f: FileBound) -> BoundRow {
    BoundRow {
        file: f.file,
        raw: f.raw,
        clipped: f.raw.min(1.0),
        deltas: f.deltas,
        terms: f.servers,
    }
}

fn validated(topology: &SystemTopology, catalog: &VideoCatalog, point: &ControlPoint, sigma: f64) -> Result<()> {
    topology.validate()?;
    catalog.validate()?;
    point.check_dims(topology, catalog)?;
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput("sigma must be nonnegative".into()));
    }
    Ok(())
}

/// Stall-duration tail bound of file `i` at threshold `sigma`.
pub fn sdtp_bound(i: usize, sigma: f64, topology: &SystemTopology, catalog: &VideoCatalog, point: &ControlPoint) -> Result<BoundRow> {
    validated(topology, catalog, point, sigma)?;
    if i >= catalog.r() {
        return Err(Error::DimensionMismatch(format!("file {i} out of range")));
    }
    let ev = engine::evaluate(topology, catalog, &point.to_vars(), sigma, false);
    let f = ev.files.into_iter().nth(i).expect("file in range");
    if !f.raw.is_finite() {
        return Err(Error::BoundUndefined(f.violation.unwrap_or_else(|| format!("file {i}"))));
    }
    Ok(row_of(f))
}

/// Bounds of every file. Infeasible files keep `raw = +inf`.
pub fn bound_report(sigma: f64, topology: &SystemTopology, catalog: &VideoCatalog, point: &ControlPoint) -> Result<BoundReport> {
    validated(topology, catalog, point, sigma)?;
    let ev = engine::evaluate(topology, catalog, &point.to_vars(), sigma, false);
    let rows: Vec<BoundRow> = ev.files.into_iter().map(row_of).collect();
    let objective = rows.iter().zip(&catalog.weight).map(|(r, w)| w * r.clipped).sum();
    Ok(BoundReport {
        sigma,
        rows,
        objective,
        weighted_raw: ev.objective,
        feasible: ev.feasible,
    })
}

/// Normalized weighted sum of raw bounds.
pub fn weighted_objective(sigma: f64, topology: &SystemTopology, catalog: &VideoCatalog, point: &ControlPoint) -> Result<f64> {
    validated(topology, catalog, point, sigma)?;
    let ev = engine::evaluate(topology, catalog, &point.to_vars(), sigma, false);
    if !ev.feasible {
        let why = ev.files.iter().find_map(|f| f.violation.clone()).unwrap_or_else(|| "infeasible point".into());
        return Err(Error::BoundUndefined(why));
    }
    Ok(ev.objective)
}

/// Axis along which a queue-existence constraint is probed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CurvatureAxis {
    /// `E(t) = Σ a_f M(t)^{n_f} - (Λ + t)` as a function of `t`.
    T,
    /// The same expression as a function of the stream rate `α` at fixed `t`.
    Alpha { t: f64 },
}

/// Minimum second difference `f(x_{k-1}) - 2 f(x_k) + f(x_{k+1})` of a
/// stream's existence constraint along a uniform grid. Convexity of the
/// constraint makes every second difference nonnegative.
pub fn constraint_curvature_probe(ctx: &BoundContext, class: QueueClass, j: usize, k: usize, axis: CurvatureAxis, grid: &[f64]) -> Result<f64> {
    if grid.len() < 3 {
        return Err(Error::Domain("grid needs at least three points".into()));
    }
    let h = grid[1] - grid[0];
    if !(h > 0.0) || grid.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(w[1].abs())) {
        return Err(Error::Domain("grid must be uniform and increasing".into()));
    }
    let s = ctx.snap.stream(class, j, k);
    let f = |x: f64| -> Result<f64> {
        let (alpha, t) = match axis {
            CurvatureAxis::T => (s.alpha, x),
            CurvatureAxis::Alpha { t } => (x, t),
        };
        if !(t < alpha) || !(alpha > 0.0) {
            return Err(Error::Domain(format!("grid point {x} leaves t < alpha")));
        }
        let lm = queues::ln_shifted_exp_mgf(alpha, s.eta, t).expect("t < alpha");
        Ok(s.mixture(lm) - (s.lambda + t))
    };
    let vals = grid.iter().map(|&x| f(x)).collect::<Result<Vec<f64>>>()?;
    Ok(vals.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).fold(f64::INFINITY, f64::min))
}

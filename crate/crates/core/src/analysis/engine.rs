//! Whole-catalog bound evaluation with an optional reverse-mode gradient.
//!
//! The forward pass runs per file: stream MGFs and P-K waiting MGFs at
//! `t_i`, then the closed-form path terms. The reverse pass seeds per-stream
//! adjoints from every file and then pushes them through the batch-service
//! mixtures stream by stream. Both passes are data-parallel and reduce in a
//! fixed order, so results are bit-reproducible.

use rayon::prelude::*;

use super::delta::{delta1, delta_noncached};
use super::dual::Dual;
use super::queues::{QueueClass, QueueSnapshot, StreamState};
use crate::model::{DecisionVars, SystemTopology, VideoCatalog};

#[derive(Clone, Debug, PartialEq)]
pub struct ServerTerms {
    pub server: usize,
    /// `e^{-tσ} + Σ_ν p Σ_β q (δ1 + δ2 + δ3 + δ4)`; `+inf` when undefined.
    pub bracket: f64,
    /// `δ1` per cached stream `nu`.
    pub delta1: Vec<f64>,
    /// `(δ2, δ3, δ4)` per datacenter stream `beta`.
    pub delta_nc: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileBound {
    pub file: usize,
    /// Unclipped bound; `+inf` when some routed path has no MGF.
    pub raw: f64,
    /// Routing-weighted `δ1..δ4`.
    pub deltas: [f64; 4],
    pub servers: Vec<ServerTerms>,
    pub violation: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub files: Vec<FileBound>,
    /// `Σ w_i raw_i / Σ w_i`.
    pub objective: f64,
    pub feasible: bool,
    pub gradient: Option<DecisionVars>,
}

/// Per-stream quantities at one file's `t`.
#[derive(Clone, Copy, Debug)]
struct AtT {
    ln_m: f64,
    ln_w: f64,
    z: f64,
    zn: f64,
    den: f64,
}

fn at_t(s: &StreamState, file: usize, t: f64) -> Option<AtT> {
    if !(s.alpha > 0.0) {
        return None;
    }
    let ln_m = s.ln_mgf(t)?;
    if s.lambda <= 0.0 {
        let n = s.users[file].n;
        return Some(AtT { ln_m, ln_w: n * ln_m, z: 0.0, zn: 0.0, den: t });
    }
    if !(s.rho < 1.0) {
        return None;
    }
    let (mut z, mut zn) = (0.0, 0.0);
    for u in s.users.iter().filter(|u| u.a > 0.0) {
        let e = u.a * (u.n * ln_m).exp();
        z += e;
        zn += e * u.n;
    }
    let den = t - z + s.lambda;
    if !(den > 0.0) || !z.is_finite() {
        return None;
    }
    let ln_w = (1.0 - s.rho).ln() + t.ln() + z.ln() - s.lambda.ln() - den.ln();
    Some(AtT { ln_m, ln_w, z, zn, den })
}

/// Adjoint seeds produced by one file.
struct FileGrad {
    /// Per stream: `∂/∂Z`, `∂/∂Λ`, `∂/∂ρ`, `∂/∂α`, and the `ln M` used.
    z_bar: Vec<f64>,
    lam_bar: Vec<f64>,
    rho_bar: Vec<f64>,
    alpha_bar: Vec<f64>,
    ln_m: Vec<f64>,
    t_bar: f64,
    pi_bar: Vec<f64>,
    p_bar: Vec<Vec<f64>>,
    q_bar: Vec<Vec<f64>>,
    /// `∂/∂cache[j][i]` from this file's own terms.
    c_bar: Vec<f64>,
}

struct Ctx<'a> {
    topo: &'a SystemTopology,
    cat: &'a VideoCatalog,
    vars: &'a DecisionVars,
    snap: &'a QueueSnapshot,
    sigma: f64,
    omega: Vec<f64>,
}

fn file_pass(ctx: &Ctx, i: usize, want_grad: bool) -> (FileBound, Option<FileGrad>) {
    let (topo, cat, vars, snap) = (ctx.topo, ctx.cat, ctx.vars, ctx.snap);
    let t = vars.t[i];
    let m = topo.m();
    let ns = snap.streams().len();
    let upto = cat.lengths[i] as f64;
    let ln_a = -t * (ctx.sigma + cat.d_s);
    let lx = -t * cat.tau;
    let head = (-t * ctx.sigma).exp();

    let mut at: Vec<Option<AtT>> = vec![None; ns];
    if t > 0.0 {
        for (id, s) in snap.streams().iter().enumerate() {
            let rep = snap.rep(id);
            at[id] = if rep == id { at_t(s, i, t) } else { at[rep] };
        }
    }

    let mut g = want_grad.then(|| FileGrad {
        z_bar: vec![0.0; ns],
        lam_bar: vec![0.0; ns],
        rho_bar: vec![0.0; ns],
        alpha_bar: vec![0.0; ns],
        ln_m: at.iter().map(|a| a.map_or(f64::NAN, |a| a.ln_m)).collect(),
        t_bar: 0.0,
        pi_bar: vec![0.0; m],
        p_bar: (0..m).map(|j| vec![0.0; topo.e[j]]).collect(),
        q_bar: (0..m).map(|j| vec![0.0; topo.d[j]]).collect(),
        c_bar: vec![0.0; m],
    });
    // Adjoint of ln W and (direct) ln M per stream, filled by the δ terms.
    let mut lnw_bar = vec![0.0; ns];
    let mut lm_bar = vec![0.0; ns];

    let mut raw = 0.0;
    let mut deltas = [0.0; 4];
    let mut servers = Vec::with_capacity(m);
    let mut violation = None;

    for j in 0..m {
        let pi = vars.pi[i][j];
        let c = vars.cache[j][i];
        let p = &vars.p[i][j];
        let q = &vars.q[i][j];
        let psum: f64 = p.iter().sum();
        let qsum: f64 = q.iter().sum();
        let mut ok = true;

        let mut d1 = vec![f64::NAN; topo.e[j]];
        for nu in 0..topo.e[j] {
            let id = snap.id(QueueClass::E, j, nu);
            match at[id] {
                Some(a) => {
                    d1[nu] = delta1::<0>(Dual::cst(ln_a), Dual::cst(lx), Dual::cst(a.ln_w), Dual::cst(a.ln_m), Dual::cst(c), upto).v;
                }
                None if p[nu] > 0.0 && c > 0.0 => ok = false,
                None => d1[nu] = 0.0,
            }
            if at[id].is_none() && p[nu] > 0.0 && c > 0.0 && pi > 0.0 && violation.is_none() {
                violation = Some(format!("no MGF for t[{i}] at {}", snap.streams()[id].label()));
            }
        }
        let mut dn = vec![[f64::NAN; 3]; topo.d[j]];
        let noncached = c < upto;
        for beta in 0..topo.d[j] {
            let idd = snap.id(QueueClass::D, j, beta);
            let idb = snap.id(QueueClass::Dbar, j, beta);
            match (at[idd], at[idb]) {
                (Some(ad), Some(ab)) => {
                    let r = delta_noncached::<0>(
                        Dual::cst(ln_a),
                        Dual::cst(lx),
                        Dual::cst(ad.ln_w),
                        Dual::cst(ad.ln_m),
                        Dual::cst(ab.ln_w),
                        Dual::cst(ab.ln_m),
                        Dual::cst(c),
                        upto,
                    );
                    dn[beta] = [r[0].v, r[1].v, r[2].v];
                }
                _ if q[beta] > 0.0 && noncached => {
                    ok = false;
                    if pi > 0.0 && violation.is_none() {
                        let id = if at[idd].is_none() { idd } else { idb };
                        violation = Some(format!("no MGF for t[{i}] at {}", snap.streams()[id].label()));
                    }
                }
                _ => dn[beta] = [0.0; 3],
            }
        }

        let bracket = if ok {
            let pd1: f64 = p.iter().zip(&d1).map(|(&pv, &d)| if pv > 0.0 { pv * d } else { 0.0 }).sum();
            let qd: f64 = q
                .iter()
                .zip(&dn)
                .map(|(&qv, d)| if qv > 0.0 { qv * (d[0] + d[1] + d[2]) } else { 0.0 })
                .sum();
            head + qsum * pd1 + psum * qd
        } else {
            f64::INFINITY
        };
        if pi > 0.0 {
            raw += pi * bracket;
            if ok {
                for nu in 0..topo.e[j] {
                    if p[nu] > 0.0 {
                        deltas[0] += pi * qsum * p[nu] * d1[nu];
                    }
                }
                for beta in 0..topo.d[j] {
                    if q[beta] > 0.0 {
                        for k in 0..3 {
                            deltas[k + 1] += pi * psum * q[beta] * dn[beta][k];
                        }
                    }
                }
            }
        }

        if let Some(g) = g.as_mut() {
            if ok {
                let br = ctx.omega[i] * pi;
                g.pi_bar[j] += ctx.omega[i] * bracket;
                g.t_bar += br * (-ctx.sigma) * head;
                let pd1: f64 = p.iter().zip(&d1).map(|(&pv, &d)| pv * d).sum();
                let qd: f64 = q.iter().zip(&dn).map(|(&qv, d)| qv * (d[0] + d[1] + d[2])).sum();
                for nu in 0..topo.e[j] {
                    g.p_bar[j][nu] += br * (qsum * d1[nu] + qd);
                }
                for beta in 0..topo.d[j] {
                    g.q_bar[j][beta] += br * (pd1 + psum * (dn[beta][0] + dn[beta][1] + dn[beta][2]));
                }
                if br != 0.0 {
                    for nu in 0..topo.e[j] {
                        let id = snap.id(QueueClass::E, j, nu);
                        let Some(a) = at[id] else { continue };
                        let coef = br * qsum * p[nu];
                        if coef == 0.0 {
                            continue;
                        }
                        let r = delta1::<5>(
                            Dual::var(ln_a, 0),
                            Dual::var(lx, 1),
                            Dual::var(a.ln_w, 2),
                            Dual::var(a.ln_m, 3),
                            Dual::var(c, 4),
                            upto,
                        );
                        g.t_bar += coef * (r.d[0] * -(ctx.sigma + cat.d_s) + r.d[1] * -cat.tau);
                        lnw_bar[id] += coef * r.d[2];
                        lm_bar[id] += coef * r.d[3];
                        g.c_bar[j] += coef * r.d[4];
                    }
                    for beta in 0..topo.d[j] {
                        let idd = snap.id(QueueClass::D, j, beta);
                        let idb = snap.id(QueueClass::Dbar, j, beta);
                        let (Some(ad), Some(ab)) = (at[idd], at[idb]) else { continue };
                        let coef = br * psum * q[beta];
                        if coef == 0.0 {
                            continue;
                        }
                        let r = delta_noncached::<7>(
                            Dual::var(ln_a, 0),
                            Dual::var(lx, 1),
                            Dual::var(ad.ln_w, 2),
                            Dual::var(ad.ln_m, 3),
                            Dual::var(ab.ln_w, 4),
                            Dual::var(ab.ln_m, 5),
                            Dual::var(c, 6),
                            upto,
                        );
                        let s = r[0] + r[1] + r[2];
                        g.t_bar += coef * (s.d[0] * -(ctx.sigma + cat.d_s) + s.d[1] * -cat.tau);
                        lnw_bar[idd] += coef * s.d[2];
                        lm_bar[idd] += coef * s.d[3];
                        lnw_bar[idb] += coef * s.d[4];
                        lm_bar[idb] += coef * s.d[5];
                        g.c_bar[j] += coef * s.d[6];
                    }
                }
            }
        }
        servers.push(ServerTerms { server: j, bracket, delta1: d1, delta_nc: dn });
    }

    // ln W and ln M adjoints down to Z, Λ, ρ, α, t and this file's own n.
    if let Some(g) = g.as_mut() {
        for (id, s) in snap.streams().iter().enumerate() {
            let Some(a) = at[id] else { continue };
            let wb = lnw_bar[id];
            let mut lb = lm_bar[id];
            if wb != 0.0 {
                if s.lambda > 0.0 {
                    let zb = wb * (1.0 / a.z + 1.0 / a.den);
                    g.z_bar[id] += zb;
                    lb += zb * a.zn;
                    g.lam_bar[id] += wb * (-1.0 / s.lambda - 1.0 / a.den);
                    g.rho_bar[id] += wb * (-1.0 / (1.0 - s.rho));
                    g.t_bar += wb * (1.0 / t - 1.0 / a.den);
                } else {
                    // Empty stream: ln W = n_i ln M.
                    lb += wb * s.users[i].n;
                    let sign = if s.class == QueueClass::E { 1.0 } else { -1.0 };
                    g.c_bar[s.server] += sign * wb * a.ln_m;
                }
            }
            if lb != 0.0 {
                g.t_bar += lb * (s.eta + 1.0 / (s.alpha - t));
                g.alpha_bar[id] += lb * (1.0 / s.alpha - 1.0 / (s.alpha - t));
            }
        }
    }

    let fb = FileBound { file: i, raw, deltas, servers, violation };
    (fb, g)
}

/// Evaluates every file's raw bound at threshold `sigma`, the normalized
/// weighted objective, and optionally its gradient with respect to all
/// decision variables (placement treated as real-valued).
pub fn evaluate(topology: &SystemTopology, catalog: &VideoCatalog, vars: &DecisionVars, sigma: f64, want_grad: bool) -> Evaluation {
    let snap = QueueSnapshot::build(topology, catalog, vars);
    let wsum: f64 = catalog.weight.iter().sum();
    let ctx = Ctx {
        topo: topology,
        cat: catalog,
        vars,
        snap: &snap,
        sigma,
        omega: catalog.weight.iter().map(|w| w / wsum).collect(),
    };
    let passes: Vec<(FileBound, Option<FileGrad>)> = (0..catalog.r()).into_par_iter().map(|i| file_pass(&ctx, i, want_grad)).collect();
    let objective: f64 = passes.iter().map(|(f, _)| ctx.omega[f.file] * f.raw).sum();
    let feasible = objective.is_finite() && passes.iter().all(|(f, _)| f.raw.is_finite());
    let gradient = (want_grad && feasible).then(|| backward(&ctx, &passes));
    Evaluation {
        files: passes.into_iter().map(|(f, _)| f).collect(),
        objective: if feasible { objective } else { f64::INFINITY },
        feasible,
        gradient,
    }
}

/// Raw bounds of the selected files only, reusing a prebuilt snapshot; `t`
/// does not enter the snapshot, so it stays valid across `t` changes.
pub fn file_raws(topology: &SystemTopology, catalog: &VideoCatalog, snap: &QueueSnapshot, vars: &DecisionVars, sigma: f64, files: &[usize]) -> Vec<f64> {
    let ctx = Ctx {
        topo: topology,
        cat: catalog,
        vars,
        snap,
        sigma,
        omega: Vec::new(),
    };
    files.par_iter().map(|&i| file_pass(&ctx, i, false).0.raw).collect()
}

fn backward(ctx: &Ctx, passes: &[(FileBound, Option<FileGrad>)]) -> DecisionVars {
    let (topo, cat, vars, snap) = (ctx.topo, ctx.cat, ctx.vars, ctx.snap);
    let mut grad = DecisionVars::zeros_like(vars);
    let grads: Vec<&FileGrad> = passes.iter().map(|(_, g)| g.as_ref().expect("gradient requested")).collect();

    for (i, g) in grads.iter().enumerate() {
        grad.t[i] += g.t_bar;
        for j in 0..topo.m() {
            grad.pi[i][j] += g.pi_bar[j];
            for (nu, v) in g.p_bar[j].iter().enumerate() {
                grad.p[i][j][nu] += v;
            }
            for (b, v) in g.q_bar[j].iter().enumerate() {
                grad.q[i][j][b] += v;
            }
            grad.cache[j][i] += g.c_bar[j];
        }
    }

    // `M^{n_k}` at every file's `t`, once per symmetry class.
    let r = cat.r();
    let powers: Vec<Option<Vec<f64>>> = snap
        .streams()
        .par_iter()
        .enumerate()
        .map(|(id, s)| {
            if snap.rep(id) != id {
                return None;
            }
            let mut table = vec![0.0; r * r];
            for (f, g) in grads.iter().enumerate() {
                let lm = g.ln_m[id];
                if lm.is_finite() {
                    for (k, u) in s.users.iter().enumerate() {
                        table[f * r + k] = (u.n * lm).exp();
                    }
                }
            }
            Some(table)
        })
        .collect();

    // Per stream: adjoints of each user's routed rate `a` and segment count `n`, plus `α`.
    let per_stream: Vec<(Vec<f64>, Vec<f64>, f64)> = snap
        .streams()
        .par_iter()
        .enumerate()
        .map(|(id, s)| {
            let r = s.users.len();
            let lam_bar: f64 = grads.iter().map(|g| g.lam_bar[id]).sum();
            let rho_bar: f64 = grads.iter().map(|g| g.rho_bar[id]).sum();
            let mut alpha_bar: f64 = grads.iter().map(|g| g.alpha_bar[id]).sum();
            let mut a_bar = vec![lam_bar; r];
            let mut n_bar = vec![0.0; r];
            if rho_bar != 0.0 && s.alpha > 0.0 {
                let mu = s.mean_service();
                let mut work = 0.0;
                for (k, u) in s.users.iter().enumerate() {
                    a_bar[k] += rho_bar * mu * u.n;
                    n_bar[k] += rho_bar * mu * u.a;
                    work += u.a * u.n;
                }
                alpha_bar += rho_bar * work * (-1.0 / (s.alpha * s.alpha));
            }
            let table = powers[snap.rep(id)].as_ref().expect("representative table");
            for (f, g) in grads.iter().enumerate() {
                let zb = g.z_bar[id];
                if zb == 0.0 {
                    continue;
                }
                let lm = g.ln_m[id];
                for (k, u) in s.users.iter().enumerate() {
                    let e = table[f * r + k];
                    a_bar[k] += zb * e;
                    if u.a > 0.0 {
                        n_bar[k] += zb * u.a * lm * e;
                    }
                }
            }
            (a_bar, n_bar, alpha_bar)
        })
        .collect();

    for (s, (a_bar, n_bar, alpha_bar)) in snap.streams().iter().zip(per_stream) {
        let j = s.server;
        for k in 0..cat.r() {
            let lam = cat.lambda[k];
            let route = match s.class {
                QueueClass::E => vars.p[k][j][s.index],
                _ => vars.q[k][j][s.index],
            };
            grad.pi[k][j] += a_bar[k] * lam * route;
            let dr = a_bar[k] * lam * vars.pi[k][j];
            match s.class {
                QueueClass::E => {
                    grad.p[k][j][s.index] += dr;
                    grad.cache[j][k] += n_bar[k];
                }
                _ => {
                    grad.q[k][j][s.index] += dr;
                    grad.cache[j][k] -= n_bar[k];
                }
            }
        }
        match s.class {
            QueueClass::E => grad.w_e[j][s.index] += alpha_bar * topo.alpha_f_base[j],
            QueueClass::D => grad.w_d[j][s.index] += alpha_bar * topo.alpha_d_base[j],
            QueueClass::Dbar => grad.w_dbar[j][s.index] += alpha_bar * topo.alpha_f_base[j],
        }
    }
    grad
}

mod common;

use common::random_instance;
use stallbound::analysis::{BoundContext, evaluate};
use stallbound::model::check_feasibility;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn closed_form_terms_match_segment_by_segment_sums() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let inst = random_instance(seed, 3, 6, 8, 3, 0.8);
        assert!(check_feasibility(&inst.topology, &inst.catalog, &inst.point).unwrap().feasible);
        let ctx = BoundContext::new(&inst.topology, &inst.catalog, &inst.point, 0.7).unwrap();
        for i in 0..inst.catalog.r() {
            let t = inst.point.aux.t[i];
            for j in 0..inst.topology.m() {
                for beta in 0..inst.topology.d[j] {
                    for nu in 0..inst.topology.e[j] {
                        for upto in 1..=inst.catalog.lengths[i] {
                            let closed = ctx.delta_terms(i, j, beta, nu, t, upto).unwrap();
                            let brute = ctx.path_sum_bruteforce(i, j, beta, nu, t, upto).unwrap();
                            assert!(closed.defined && brute.defined);
                            worst = worst.max(rel(closed.sum(), brute.value));
                        }
                    }
                }
            }
        }
    }
    assert!(worst < 1e-9, "worst relative gap {worst}");
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..10 {
        let inst = random_instance(1000 + seed, 2, 4, 6, 2, 0.6);
        let vars = inst.point.to_vars();
        let sigma = 1.3;
        let ev = evaluate(&inst.topology, &inst.catalog, &vars, sigma, true);
        let g = ev.gradient.expect("feasible");
        let f = |v: &stallbound::model::DecisionVars| evaluate(&inst.topology, &inst.catalog, v, sigma, false).objective;
        let check = |get: &dyn Fn(&mut stallbound::model::DecisionVars) -> &mut f64, analytic: f64, what: &str| {
            let mut vp = vars.clone();
            let mut vm = vars.clone();
            let x = *get(&mut vp);
            let h = 1e-6 * x.abs().max(1e-3);
            *get(&mut vp) = x + h;
            *get(&mut vm) = x - h;
            let fd = (f(&vp) - f(&vm)) / (2.0 * h);
            let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(err < 1e-4, "seed {seed} {what}: fd {fd} analytic {analytic}");
        };
        let r = inst.catalog.r();
        let m = inst.topology.m();
        for i in 0..r {
            check(&|v| &mut v.t[i], g.t[i], &format!("t[{i}]"));
            for j in 0..m {
                check(&|v| &mut v.pi[i][j], g.pi[i][j], &format!("pi[{i}][{j}]"));
                for k in 0..inst.topology.e[j] {
                    check(&|v| &mut v.p[i][j][k], g.p[i][j][k], &format!("p[{i}][{j}][{k}]"));
                }
                for k in 0..inst.topology.d[j] {
                    check(&|v| &mut v.q[i][j][k], g.q[i][j][k], &format!("q[{i}][{j}][{k}]"));
                }
                let c = vars.cache[j][i];
                if c > 0.5 && c < inst.catalog.lengths[i] as f64 - 0.5 {
                    check(&|v| &mut v.cache[j][i], g.cache[j][i], &format!("cache[{j}][{i}]"));
                }
            }
        }
        for j in 0..m {
            for k in 0..inst.topology.d[j] {
                check(&|v| &mut v.w_d[j][k], g.w_d[j][k], &format!("w_d[{j}][{k}]"));
                check(&|v| &mut v.w_dbar[j][k], g.w_dbar[j][k], &format!("w_dbar[{j}][{k}]"));
            }
            for k in 0..inst.topology.e[j] {
                check(&|v| &mut v.w_e[j][k], g.w_e[j][k], &format!("w_e[{j}][{k}]"));
            }
        }
    }
}

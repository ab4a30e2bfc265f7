//! Closed forms of the per-path bound terms.
//!
//! For a request served on cached stream `nu` and datacenter stream `beta`
//! of one server, segment `v` contributes `A x^{v-1} E[e^{tD(v)}]` with
//! `A = e^{-t(σ + d_s)}` and `x = e^{-tτ}`. Summing over `v` collapses into
//! four geometric-type sums:
//!
//! ```text
//! δ1 = A W_e M_e G(x M_e, c)                      cached segments
//! δ2 = A x^c W_b M_b G(x M_b, n)                  wait at the edge stream
//! δ3 = A x^c W_d M_b G(x M_d, n)                  wait at the origin, y = v
//! δ4 = A x^c W_d M_b H(x M_b, x M_d, n - 1)       wait at the origin, y < v
//! ```
//!
//! where `c` is the cached prefix, `n` the non-cached remainder,
//! `G(z, n) = Σ_{k<n} z^k` and `H` is the triangular double sum of
//! [`super::series::tri`]. All inputs are in log space.

use super::dual::Dual;
use super::series::{geo, tri};

/// Cached-segment term over segments `1..=min(c, upto)`.
pub fn delta1<const K: usize>(ln_a: Dual<K>, lx: Dual<K>, ln_w: Dual<K>, ln_m: Dual<K>, c: Dual<K>, upto: f64) -> Dual<K> {
    let n = if c.v <= upto { c } else { Dual::cst(upto) };
    if n.v < 0.0 {
        return Dual::cst(0.0);
    }
    (ln_a + ln_w + ln_m).exp() * geo(lx + ln_m, n)
}

/// Non-cached terms `(δ2, δ3, δ4)` over segments `c+1..=upto`.
#[allow(clippy::too_many_arguments)]
pub fn delta_noncached<const K: usize>(
    ln_a: Dual<K>,
    lx: Dual<K>,
    ln_wd: Dual<K>,
    ln_md: Dual<K>,
    ln_wb: Dual<K>,
    ln_mb: Dual<K>,
    c: Dual<K>,
    upto: f64,
) -> [Dual<K>; 3] {
    let n = -c + upto;
    if n.v < 0.0 {
        return [Dual::cst(0.0); 3];
    }
    let pre = (ln_a + c * lx + ln_mb).exp();
    let us = lx + ln_mb;
    let up = lx + ln_md;
    let wd = ln_wd.exp();
    [
        pre * ln_wb.exp() * geo(us, n),
        pre * wd * geo(up, n),
        pre * wd * tri(us, up, n - 1.0),
    ]
}

//! Geometric and triangular exponential sums in log-ratio form, extended to
//! real segment counts so that relaxed cache placements stay evaluable.
//!
//! Both sums are removable-singular at unit ratio. Near that point a short
//! power series in the log-ratio replaces the quotient form; the switch radius
//! is scaled by the term count so the truncation error stays below 1e-12.

use super::dual::Dual;

const SERIES_RADIUS: f64 = 1e-4;

/// `Σ_{k=0}^{n-1} e^{k u}` for real `n ≥ 0`; zero for `n < 0`.
pub fn geo<const K: usize>(u: Dual<K>, n: Dual<K>) -> Dual<K> {
    if n.v < 0.0 {
        return Dual::cst(0.0);
    }
    geo_any(u, n)
}

/// Analytic continuation of [`geo`] to every real `n`.
fn geo_any<const K: usize>(u: Dual<K>, n: Dual<K>) -> Dual<K> {
    if u.v.abs() * n.v.abs().max(1.0) < SERIES_RADIUS {
        // Power sums Σ k^p over k < n.
        let nm1 = n - 1.0;
        let s1 = n * nm1 * 0.5;
        let s2 = n * nm1 * (n * 2.0 - 1.0) * (1.0 / 6.0);
        let s3 = s1 * s1;
        let u2 = u * u;
        return n + u * s1 + u2 * s2 * 0.5 + u2 * u * s3 * (1.0 / 6.0);
    }
    (n * u).exp_m1() / u.exp_m1()
}

/// `Σ_{j=1}^{N} Σ_{l=0}^{N-j} e^{l·up + j·us}`, continued analytically to
/// real `N > -1` (it vanishes at `N = -1` and `N = 0`); zero for `N ≤ -1`.
pub fn tri<const K: usize>(us: Dual<K>, up: Dual<K>, nn: Dual<K>) -> Dual<K> {
    if nn.v <= -1.0 {
        return Dual::cst(0.0);
    }
    let scale = nn.v.abs().max(1.0);
    if us.v.abs() * scale >= SERIES_RADIUS {
        let bracket = geo_any(up, nn) - (nn * us).exp() * geo_any(up - us, nn);
        return us.exp() * bracket / (-us.exp_m1());
    }
    if up.v.abs() * scale >= SERIES_RADIUS {
        let bracket = geo_any(us, nn) - (nn * up).exp() * geo_any(us - up, nn);
        return us.exp() * bracket / (-up.exp_m1());
    }
    // Lattice moments over the triangle {l ≥ 0, j ≥ 1, l + j ≤ N}.
    let n1 = nn + 1.0;
    let nm1 = nn - 1.0;
    let n2 = nn + 2.0;
    let c0 = nn * n1 * 0.5;
    let ml = nn * nm1 * n1 * (1.0 / 6.0);
    let mj = nn * n1 * n2 * (1.0 / 6.0);
    let mll = nn * nn * nm1 * n1 * (1.0 / 12.0);
    let mlj = nn * nm1 * n1 * n2 * (1.0 / 24.0);
    let mjj = nn * n1 * n1 * n2 * (1.0 / 12.0);
    c0 + up * ml + us * mj + (up * up * mll + up * us * mlj * 2.0 + us * us * mjj) * 0.5
}

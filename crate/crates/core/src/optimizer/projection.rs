//! Euclidean projections onto the linear constraint sets of each block.

/// Projection onto `{x ≥ 0, Σx = 1}` by the sort-and-threshold rule.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let th = (cum - 1.0) / (k + 1) as f64;
        if x - th > 0.0 {
            theta = th;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Projection onto `{x ≥ 0, Σx ≤ 1}`.
pub fn project_capped_simplex(v: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= 1.0 {
        clipped
    } else {
        project_simplex(v)
    }
}

/// Projection onto `{0 ≤ x ≤ upper, Σx ≤ cap}`. The result never exceeds
/// `cap` in floating point.
pub fn project_box_capacity(v: &[f64], upper: &[f64], cap: f64) -> Vec<f64> {
    let at = |theta: f64| -> Vec<f64> { v.iter().zip(upper).map(|(&x, &u)| (x - theta).clamp(0.0, u)).collect() };
    let sum = |x: &[f64]| x.iter().sum::<f64>();
    let base = at(0.0);
    if sum(&base) <= cap {
        return base;
    }
    let cap = cap.max(0.0);
    let (mut lo, mut hi) = (0.0, v.iter().fold(0.0f64, |a, &x| a.max(x)));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sum(&at(mid)) > cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut out = at(hi);
    // Bisection can land a rounding error above the cap.
    let mut excess = sum(&out) - cap;
    for x in out.iter_mut().rev() {
        if excess <= 0.0 {
            break;
        }
        let take = x.min(excess);
        *x -= take;
        excess -= take;
    }
    out
}

#![allow(dead_code)]

//! Independent numerical oracles shared by the integration tests.

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Nested adaptive Simpson over a rectangle.
pub fn simpson_2d(f: &dyn Fn(f64, f64) -> f64, x: (f64, f64), y: (f64, f64), tol: f64) -> f64 {
    let inner = |u: f64| simpson(&|v| f(u, v), y.0, y.1, tol / (x.1 - x.0));
    simpson(&inner, x.0, x.1, tol)
}

/// Tensor-product midpoint rule on an `n x n` grid.
pub fn midpoint_2d(f: &dyn Fn(f64, f64) -> f64, x: (f64, f64), y: (f64, f64), n: usize) -> f64 {
    let (hx, hy) = ((x.1 - x.0) / n as f64, (y.1 - y.0) / n as f64);
    let mut sum = 0.0;
    for i in 0..n {
        let u = x.0 + (i as f64 + 0.5) * hx;
        for j in 0..n {
            sum += f(u, y.0 + (j as f64 + 0.5) * hy);
        }
    }
    sum * hx * hy
}

pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Mass, mean and variance of `N(mu, sigma^2)` restricted to `[a, b]`.
pub fn truncated_1d(mu: f64, sigma: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let tol = 1e-13;
    let z = simpson(&|x| normal_pdf(x, mu, sigma), a, b, tol);
    let m1 = simpson(&|x| x * normal_pdf(x, mu, sigma), a, b, tol) / z;
    let m2 = simpson(&|x| (x - m1).powi(2) * normal_pdf(x, mu, sigma), a, b, tol) / z;
    (z, m1, m2)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic two-sample KS rejection threshold at level `alpha`.
pub fn ks_critical(alpha: f64, na: usize, nb: usize) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((na + nb) as f64 / (na as f64 * nb as f64)).sqrt()
}

/// The permutation of fitted components that minimises the summed squared
/// standardised mean distance to the true components.
pub fn match_components(truth: &[Vec<f64>], fitted: &[Vec<f64>], scale: &[Vec<f64>]) -> Vec<usize> {
    let k = truth.len();
    let mut best = (f64::INFINITY, Vec::new());
    let mut perm: Vec<usize> = (0..fitted.len()).collect();
    permute(&mut perm, 0, &mut |p| {
        let cost: f64 = (0..k)
            .map(|t| {
                truth[t]
                    .iter()
                    .zip(&fitted[p[t]])
                    .zip(&scale[t])
                    .map(|((a, b), s)| ((a - b) / s).powi(2))
                    .sum::<f64>()
            })
            .sum();
        if cost < best.0 {
            best = (cost, p[..k].to_vec());
        }
    });
    best.1
}

fn permute(p: &mut Vec<usize>, i: usize, visit: &mut dyn FnMut(&[usize])) {
    if i == p.len() {
        visit(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, visit);
        p.swap(i, j);
    }
}

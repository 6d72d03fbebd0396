//! Classical fixed-step fourth-order Runge-Kutta.

use nalgebra::DVector;

/// One RK4 step of `y' = f(s, y)` from `s` with step `h` (which may be negative).
pub fn rk4_step<F>(f: F, s: f64, y: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let half = 0.5 * h;
    let k1 = f(s, y);
    let k2 = f(s + half, &(y + &k1 * half));
    let k3 = f(s + half, &(y + &k2 * half));
    let k4 = f(s + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates `steps` RK4 steps and returns every node, including `y0`.
pub fn rk4_trajectory<F>(
    f: F,
    s0: f64,
    y0: &DVector<f64>,
    h: f64,
    steps: usize,
) -> Vec<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut out = Vec::with_capacity(steps + 1);
    out.push(y0.clone());
    for k in 0..steps {
        let next = rk4_step(&f, s0 + k as f64 * h, &out[k], h);
        out.push(next);
    }
    out
}

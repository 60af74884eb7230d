/// Magnitude below which gradient comparisons switch from relative to
/// absolute error. Central differences with `h = 1e-5` carry roughly `1e-10`
/// of truncation and round-off noise, so tiny gradients are compared against
/// this floor instead of their own magnitude.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

/// Central differences `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, GRAD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
    (analytic - numeric).abs() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_form_with_identity() {
        let q = [[1.0, 0.0], [0.0, 1.0]];
        let f = |x: &[f64]| {
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    s += x[i] * q[i][j] * x[j];
                }
            }
            s
        };
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 2e-12) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}

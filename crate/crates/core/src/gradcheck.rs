//! Central finite differences and the relative-error measure used by every
//! gradient comparison in the crate.

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, with a tiny floor so two zero vectors compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central-difference gradient of `f` at `x` for the listed coordinates.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Evenly spread coordinate subset of at most `max` entries out of `n`.
pub fn spread_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|i| i * n / max + (i * 7919) % (n / max).max(1)).collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = [1.0, -2.0, 0.5];
        let g = numeric_gradient(|v| v.iter().map(|a| a * a).sum(), &x, &[0, 1, 2], FD_STEP);
        let exact: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        assert!(relative_error(&exact, &g) < 1e-9);
    }

    #[test]
    fn spread_stays_in_range() {
        let c = spread_coords(1000, 16);
        assert!(c.len() <= 16 && c.iter().all(|&i| i < 1000));
        assert_eq!(spread_coords(5, 16), vec![0, 1, 2, 3, 4]);
    }
}

//! Small statistics helpers: two-sample Kolmogorov-Smirnov test and moment
//! summaries used by the marginal-matching check.

/// Two-sample KS statistic: sup over x of |F1(x) - F2(x)|.
pub fn ks_statistic(xs: &[f64], ys: &[f64]) -> f64 {
    assert!(!xs.is_empty() && !ys.is_empty());
    let mut xs = xs.to_vec();
    let mut ys = ys.to_vec();
    xs.sort_unstable_by(|a, b| a.total_cmp(b));
    ys.sort_unstable_by(|a, b| a.total_cmp(b));

    let (nx, ny) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < nx && j < ny {
        let x = xs[i];
        let y = ys[j];
        let v = x.min(y);
        while i < nx && xs[i] <= v {
            i += 1;
        }
        while j < ny && ys[j] <= v {
            j += 1;
        }
        let diff = (i as f64 / nx as f64 - j as f64 / ny as f64).abs();
        if diff > d {
            d = diff;
        }
    }
    d
}

/// Asymptotic two-sided p-value for the two-sample KS statistic, via the
/// Kolmogorov distribution `Q(lambda) = 2 sum_k (-1)^(k-1) exp(-2 k^2 lambda^2)`
/// with the small-sample correction `lambda = (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) d`.
pub fn ks_p_value(d: f64, nx: usize, ny: usize) -> f64 {
    let ne = (nx as f64 * ny as f64) / (nx + ny) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    kolmogorov_q(lambda)
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-9 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += term;
        sign = -sign;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Convenience: statistic and p-value in one call.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let d = ks_statistic(xs, ys);
    (d, ks_p_value(d, xs.len(), ys.len()))
}

/// Per-dimension means of row-major samples.
pub fn mean_vector(samples: &[Vec<f64>]) -> Vec<f64> {
    let dim = samples[0].len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= samples.len() as f64;
    }
    mean
}

/// Dense covariance matrix (population normalization), row-major.
pub fn covariance(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = samples[0].len();
    let mean = mean_vector(samples);
    let mut cov = vec![vec![0.0; dim]; dim];
    for s in samples {
        for a in 0..dim {
            for b in 0..dim {
                cov[a][b] += (s[a] - mean[a]) * (s[b] - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= samples.len() as f64;
        }
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn identical_samples_have_zero_statistic() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        let ys = vec![4.0, 3.0, 2.0, 1.0];
        assert_eq!(ks_statistic(&xs, &ys), 0.0);
    }

    #[test]
    fn simple_hand_values() {
        // One of four mass points differs: D = 1/4.
        let xs = vec![1.0, 1.0, 4.0, 4.0];
        let ys = vec![1.0, 1.0, 1.0, 4.0];
        assert!((ks_statistic(&xs, &ys) - 0.25).abs() < 1e-12);

        let xs = vec![0.42, 0.24, 0.86, 0.85, 0.82, 0.82, 0.25, 0.78, 0.13, 0.27];
        let ys = vec![0.24, 0.27, 0.87, 0.29, 0.57, 0.44, 0.5, 0.0, 0.56, 0.03];
        assert!((ks_statistic(&xs, &ys) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn handles_ties_across_samples() {
        let xs = vec![1.0, 2.0, 2.0, 3.0];
        let ys = vec![2.0, 2.0, 2.0, 2.0];
        // After x <= 2: F1 = 3/4, F2 = 1. Before 2: F1 = 1/4, F2 = 0.
        assert!((ks_statistic(&xs, &ys) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn same_distribution_rarely_rejected() {
        let mut rng = StreamKey::new(13).rng();
        let xs: Vec<f64> = (0..2000).map(|_| rng.standard_normal()).collect();
        let ys: Vec<f64> = (0..2000).map(|_| rng.standard_normal()).collect();
        let (_, p) = ks_two_sample(&xs, &ys);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn shifted_distribution_is_rejected() {
        let mut rng = StreamKey::new(14).rng();
        let xs: Vec<f64> = (0..2000).map(|_| rng.standard_normal()).collect();
        let ys: Vec<f64> = (0..2000).map(|_| rng.standard_normal() + 0.3).collect();
        let (_, p) = ks_two_sample(&xs, &ys);
        assert!(p < 1e-4, "p = {p}");
    }

    #[test]
    fn moments_of_known_samples() {
        let samples = vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![1.0, 2.0], vec![3.0, 2.0]];
        let mean = mean_vector(&samples);
        assert_eq!(mean, vec![2.0, 1.0]);
        let cov = covariance(&samples);
        assert!((cov[0][0] - 1.0).abs() < 1e-12);
        assert!((cov[1][1] - 1.0).abs() < 1e-12);
        assert!(cov[0][1].abs() < 1e-12);
    }
}

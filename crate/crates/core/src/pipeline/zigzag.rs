//! Executable diagnostic for why Wasserstein convergence of a generated
//! distribution need not imply convergence of its conditionals: uniform
//! distributions on zigzag graphs converge to the uniform square in sliced
//! Wasserstein distance while their conditionals stay degenerate.

use rand::Rng;
use serde::Serialize;

/// Generator for the zigzag family: `xi ~ U(0,1)` maps to
/// `(xi, arccos(cos(n pi xi)) / pi)`.
pub fn zigzag_sample(n: usize, xi: f64) -> (f64, f64) {
    let y = (n as f64 * std::f64::consts::PI * xi).cos().acos() / std::f64::consts::PI;
    (xi, y)
}

/// Exact Wasserstein-1 distance between an empirical sample and U(0, 1):
/// integral of |F_hat(t) - t| over [0, 1], piecewise analytic between order
/// statistics.
pub fn w1_to_uniform(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = samples.len();
    let mut total = 0.0;
    // segment integral of |c - t| for t in [a, b]
    let seg = |c: f64, a: f64, b: f64| -> f64 {
        if b <= a {
            return 0.0;
        }
        if c <= a {
            0.5 * ((b - c) * (b - c) - (a - c) * (a - c))
        } else if c >= b {
            0.5 * ((c - a) * (c - a) - (c - b) * (c - b))
        } else {
            0.5 * ((c - a) * (c - a) + (b - c) * (b - c))
        }
    };
    let mut prev = 0.0f64;
    for (i, &s) in samples.iter().enumerate() {
        let c = i as f64 / m as f64; // F_hat on [prev, s)
        total += seg(c, prev.clamp(0.0, 1.0), s.clamp(0.0, 1.0));
        prev = s;
    }
    total += seg(1.0, prev.clamp(0.0, 1.0), 1.0);
    total
}

/// Empirical two-sample Wasserstein-1 in one dimension (equal sizes).
pub fn w1_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Kolmogorov-Smirnov statistic of a sample against U(0, 1).
pub fn ks_to_uniform(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &s) in samples.iter().enumerate() {
        d = d.max((s - i as f64 / m).abs());
        d = d.max(((i + 1) as f64 / m - s).abs());
    }
    d
}

#[derive(Clone, Debug, Serialize)]
pub struct ZigzagRow {
    pub n: usize,
    /// Mean W1 of oblique 1-D projections against the projected square.
    pub sliced_w1: f64,
    /// W1 of the y marginal to U(0, 1) (the marginal is exactly uniform).
    pub y_w1: f64,
    /// KS statistic of the x marginal against U(0, 1).
    pub x_ks: f64,
    /// Mean conditional std of y within fine x bins.
    pub cond_std: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZigzagReport {
    pub rows: Vec<ZigzagRow>,
    /// 1/sqrt(12): conditional std of the target's y given any x.
    pub target_cond_std: f64,
    /// Empirical binned conditional std of uniform square samples.
    pub uniform_cond_std: f64,
    pub samples: usize,
    /// 1% critical value for the x-marginal KS check.
    pub ks_critical_1pct: f64,
}

const BINS: usize = 512;

fn binned_conditional_std(points: &[(f64, f64)]) -> f64 {
    let mut count = vec![0usize; BINS];
    let mut sum = vec![0.0f64; BINS];
    let mut sumsq = vec![0.0f64; BINS];
    for &(x, y) in points {
        let b = ((x * BINS as f64) as usize).min(BINS - 1);
        count[b] += 1;
        sum[b] += y;
        sumsq[b] += y * y;
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    for b in 0..BINS {
        if count[b] >= 2 {
            let n = count[b] as f64;
            let mean = sum[b] / n;
            let var = (sumsq[b] - n * mean * mean) / (n - 1.0);
            acc += var.max(0.0).sqrt();
            used += 1;
        }
    }
    acc / used.max(1) as f64
}

/// Run the diagnostic for each fold count in `n_list`.
pub fn zigzag_demo(n_list: &[usize], samples: usize, seed: u64) -> ZigzagReport {
    let mut rng = crate::seeded_rng(seed, "zigzag");
    // oblique projection directions (axis-aligned ones are uniform exactly)
    let dirs: Vec<f64> = [1, 2, 3, 5, 6, 7]
        .iter()
        .map(|k| *k as f64 * std::f64::consts::PI / 8.0)
        .collect();

    // reference draws from the uniform square, shared across n
    let square: Vec<(f64, f64)> = (0..samples)
        .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
        .collect();
    let uniform_cond_std = binned_conditional_std(&square);

    let mut rows = Vec::new();
    for &n in n_list {
        let pts: Vec<(f64, f64)> = (0..samples)
            .map(|_| zigzag_sample(n, rng.gen_range(0.0..1.0)))
            .collect();
        let mut sliced = 0.0;
        for &theta in &dirs {
            let (c, s) = (theta.cos(), theta.sin());
            let mut a: Vec<f64> = pts.iter().map(|(x, y)| c * x + s * y).collect();
            let mut b: Vec<f64> = square.iter().map(|(x, y)| c * x + s * y).collect();
            sliced += w1_two_sample(&mut a, &mut b);
        }
        sliced /= dirs.len() as f64;

        let mut ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let y_w1 = w1_to_uniform(&mut ys);
        let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let x_ks = ks_to_uniform(&mut xs);
        let cond_std = binned_conditional_std(&pts);
        rows.push(ZigzagRow {
            n,
            sliced_w1: sliced,
            y_w1,
            x_ks,
            cond_std,
        });
    }
    ZigzagReport {
        rows,
        target_cond_std: 1.0 / 12f64.sqrt(),
        uniform_cond_std,
        samples,
        ks_critical_1pct: 1.63 / (samples as f64).sqrt(),
    }
}

impl ZigzagReport {
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "n,sliced_w1,y_w1,x_ks,cond_std")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.n, r.sliced_w1, r.y_w1, r.x_ks, r.cond_std
            )?;
        }
        writeln!(f, "target,,,,{}", self.target_cond_std)?;
        writeln!(f, "uniform_binned,,,,{}", self.uniform_cond_std)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_maps_onto_the_graph() {
        for n in [1usize, 2, 5, 20] {
            for k in 0..50 {
                let xi = k as f64 / 49.0;
                let (x, y) = zigzag_sample(n, xi);
                assert_eq!(x, xi);
                assert!((0.0..=1.0).contains(&y));
                // folding identity: y agrees with the triangular wave
                let t = (n as f64 * xi) % 2.0;
                let expect = if t <= 1.0 { t } else { 2.0 - t };
                assert!((y - expect).abs() < 1e-9, "n {n}, xi {xi}: {y} vs {expect}");
            }
        }
    }

    #[test]
    fn w1_of_exact_uniform_grid_is_small() {
        let m = 10_000;
        let mut s: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect();
        let w = w1_to_uniform(&mut s);
        assert!(w < 1e-4, "grid W1 {w}");
    }

    #[test]
    fn w1_of_shifted_mass_matches_shift() {
        // all mass at 0.5 vs uniform: W1 = mean |t - 0.5| = 0.25
        let mut s = vec![0.5; 20_000];
        let w = w1_to_uniform(&mut s);
        assert!((w - 0.25).abs() < 1e-6, "{w}");
    }

    #[test]
    fn target_conditional_std_is_uniform_std() {
        let r = zigzag_demo(&[2], 50_000, 9);
        assert!((r.target_cond_std - 0.2887).abs() < 1e-4);
        assert!(
            (r.uniform_cond_std - r.target_cond_std).abs() < 0.02,
            "binned {} vs {}",
            r.uniform_cond_std,
            r.target_cond_std
        );
    }

    #[test]
    fn x_marginal_is_uniform_and_y_w1_small() {
        let r = zigzag_demo(&[50], 100_000, 4);
        assert!(r.rows[0].x_ks < r.ks_critical_1pct, "ks {}", r.rows[0].x_ks);
        assert!(r.rows[0].y_w1 < 0.02, "y W1 {}", r.rows[0].y_w1);
    }

    #[test]
    fn sliced_w1_decreases_and_conditionals_stay_degenerate() {
        let r = zigzag_demo(&[2, 5, 20, 50], 200_000, 11);
        for w in r.rows.windows(2) {
            assert!(
                w[0].sliced_w1 > w[1].sliced_w1,
                "not decreasing: {} -> {}",
                w[0].sliced_w1,
                w[1].sliced_w1
            );
        }
        for row in &r.rows {
            assert!(
                row.cond_std < 0.06,
                "n = {}: conditional std {}",
                row.n,
                row.cond_std
            );
        }
    }
}

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gauss::RngStream;

/// Pixel-averaged ensemble statistics.
///
/// `bias` is measured against the ground-truth image (how published tables
/// report it); `bias_posterior`, when an exact posterior mean is supplied,
/// is measured against that mean and isolates estimator error from
/// posterior spread.
#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub samples: usize,
    pub bias: f64,
    pub std: f64,
    pub bias_posterior: Option<f64>,
    pub wall_time: f64,
    #[serde(skip)]
    pub per_pixel_bias: Vec<f64>,
    #[serde(skip)]
    pub per_pixel_std: Vec<f64>,
    #[serde(skip)]
    pub per_pixel_bias_posterior: Option<Vec<f64>>,
}

/// Per-pixel mean and unbiased standard deviation, accumulated in sample
/// order so the result does not depend on how the ensemble was produced.
pub fn ensemble_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidParameter("empty ensemble".into()))?;
    let n = first.len();
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::Dimension("ensemble members have different lengths".into()));
    }
    // Welford, one pass.
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for (k, s) in samples.iter().enumerate() {
        let w = 1.0 / (k + 1) as f64;
        for i in 0..n {
            let d = s[i] - mean[i];
            mean[i] += d * w;
            m2[i] += d * (s[i] - mean[i]);
        }
    }
    let denom = (samples.len().max(2) - 1) as f64;
    let std = m2.iter().map(|v| (v / denom).max(0.0).sqrt()).collect();
    Ok((mean, std))
}

fn average(v: &[f64]) -> f64 {
    // Pairwise summation keeps the average reproducible and accurate.
    fn sum(v: &[f64]) -> f64 {
        if v.len() <= 32 {
            v.iter().sum()
        } else {
            let (a, b) = v.split_at(v.len() / 2);
            sum(a) + sum(b)
        }
    }
    sum(v) / v.len() as f64
}

pub fn ensemble_stats(
    samples: &[Vec<f64>],
    wall_time: f64,
    truth: &[f64],
    posterior_mean: Option<&[f64]>,
) -> Result<StatsReport> {
    let (mean, std) = ensemble_moments(samples)?;
    if truth.len() != mean.len() || posterior_mean.is_some_and(|m| m.len() != mean.len()) {
        return Err(Error::Dimension("reference image does not match the ensemble".into()));
    }
    let bias_to = |r: &[f64]| mean.iter().zip(r).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>();
    let per_pixel_bias = bias_to(truth);
    let per_pixel_bias_posterior = posterior_mean.map(bias_to);
    Ok(StatsReport {
        samples: samples.len(),
        bias: average(&per_pixel_bias),
        std: average(&std),
        bias_posterior: per_pixel_bias_posterior.as_deref().map(average),
        wall_time,
        per_pixel_bias,
        per_pixel_std: std,
        per_pixel_bias_posterior,
    })
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic form).
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let d = distances(&pooled);
    let labels: Vec<bool> = (0..pooled.len()).map(|i| i < x.len()).collect();
    statistic(&d, pooled.len(), &labels)
}

fn distances(p: &[&Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = p[i].iter().zip(p[j].iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn statistic(d: &[f64], n: usize, in_x: &[bool]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = d[i * n + j];
            match (in_x[i], in_x[j]) {
                (true, true) => xx += v,
                (false, false) => yy += v,
                _ => xy += v,
            }
        }
    }
    let nx = in_x.iter().filter(|&&b| b).count() as f64;
    let ny = n as f64 - nx;
    xy / (nx * ny) - xx / (nx * nx) - yy / (ny * ny)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Two-sample permutation test on the energy distance.
pub fn energy_permutation_test(x: &[Vec<f64>], y: &[Vec<f64>], permutations: usize, rng: &mut RngStream) -> Result<EnergyTest> {
    if x.is_empty() || y.is_empty() || permutations == 0 {
        return Err(Error::InvalidParameter("energy test needs two nonempty samples and ≥1 permutation".into()));
    }
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let n = pooled.len();
    let d = distances(&pooled);
    let mut labels: Vec<bool> = (0..n).map(|i| i < x.len()).collect();
    let observed = statistic(&d, n, &labels);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        // Fisher–Yates on the labels.
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            labels.swap(i, j);
        }
        if statistic(&d, n, &labels) >= observed {
            exceed += 1;
        }
    }
    Ok(EnergyTest { statistic: observed, p_value: (exceed + 1) as f64 / (permutations + 1) as f64, permutations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_copies_have_no_bias_or_spread() {
        let truth = vec![0.5, -1.0, 2.0];
        let s = vec![truth.clone(); 10];
        let r = ensemble_stats(&s, 0.0, &truth, Some(&truth)).unwrap();
        assert_eq!(r.bias, 0.0);
        assert!(r.std < 1e-15);
        assert_eq!(r.bias_posterior, Some(0.0));
    }

    #[test]
    fn moments_match_two_pass() {
        let mut rng = RngStream::new(0, 0);
        let s: Vec<Vec<f64>> = (0..50).map(|_| rng.normals(4)).collect();
        let (m, sd) = ensemble_moments(&s).unwrap();
        for i in 0..4 {
            let mean = s.iter().map(|v| v[i]).sum::<f64>() / 50.0;
            let var = s.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / 49.0;
            assert!((m[i] - mean).abs() < 1e-14 && (sd[i] - var.sqrt()).abs() < 1e-13);
        }
        assert!(ensemble_moments(&[]).is_err());
    }

    #[test]
    fn energy_test_detects_shift_only_when_present() {
        let mut rng = RngStream::new(3, 0);
        let a: Vec<Vec<f64>> = (0..150).map(|_| rng.normals(2)).collect();
        let b: Vec<Vec<f64>> = (0..150).map(|_| rng.normals(2)).collect();
        let c: Vec<Vec<f64>> = (0..150).map(|_| rng.normals(2).iter().map(|v| v + 0.6).collect()).collect();
        let same = energy_permutation_test(&a, &b, 200, &mut rng).unwrap();
        let diff = energy_permutation_test(&a, &c, 200, &mut rng).unwrap();
        assert!(same.p_value > 0.01, "{same:?}");
        assert!(diff.p_value < 0.01, "{diff:?}");
        assert!(energy_distance(&a, &a) .abs() < 1e-12);
    }
}

use serde::{Deserialize, Serialize};

/// Sample mean and standard error of the mean.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `100 · (baseline − policy) / baseline`: positive when the policy has the
/// lower cost.
pub fn percent_difference(policy_mean: f64, baseline_mean: f64) -> f64 {
    if baseline_mean == 0.0 {
        return if policy_mean == 0.0 { 0.0 } else { f64::NAN };
    }
    100.0 * (baseline_mean - policy_mean) / baseline_mean
}

/// Box-plot summary with 1.5 IQR whiskers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = s.iter().copied().filter(|&v| v >= lo_fence && v <= hi_fence);
        let whisker_low = inside.clone().fold(f64::INFINITY, f64::min);
        let whisker_high = inside.fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            n: s.len(),
            min: s[0],
            q1,
            median,
            q3,
            max: s[s.len() - 1],
            mean: s.iter().sum::<f64>() / s.len() as f64,
            whisker_low,
            whisker_high,
            outliers: s.iter().copied().filter(|&v| v < lo_fence || v > hi_fence).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub timestep: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-step mean ± 1.96 standard errors across equally long traces.
pub fn confidence_band(traces: &[&[f64]]) -> Vec<BandPoint> {
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    (0..len)
        .map(|t| {
            let col: Vec<f64> = traces.iter().map(|tr| tr[t]).collect();
            let (mean, se) = mean_stderr(&col);
            BandPoint { timestep: t, mean, lower: mean - 1.96 * se, upper: mean + 1.96 * se }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_difference_hand_values() {
        assert!((percent_difference(0.40, 0.50) - 20.0).abs() < 1e-12);
        assert_eq!(percent_difference(0.3, 0.3), 0.0);
    }

    #[test]
    fn box_stats_with_outlier() {
        let b = BoxStats::of(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 4.0));
        assert!(BoxStats::of(&[]).is_none());
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[2.0; 5]), (2.0, 0.0));
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}

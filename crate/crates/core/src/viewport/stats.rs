use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub entropy_bits: f64,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Equal-width histogram over the observed range. Bins are right-open
/// except the last. A constant input yields a single bin.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        return Histogram {
            edges: vec![0.0, 0.0],
            counts: vec![0],
            entropy_bits: 0.0,
        };
    }
    if min == max {
        let counts = vec![values.len()];
        return Histogram {
            edges: vec![min, max],
            entropy_bits: entropy_bits(&counts),
            counts,
        };
    }
    let width = (max - min) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|k| if k == bins { max } else { min + width * k as f64 })
        .collect();
    let counts = bin_counts(values, &edges);
    Histogram {
        entropy_bits: entropy_bits(&counts),
        edges,
        counts,
    }
}

/// Counts `values` into the bins described by `edges`; values outside the
/// range are clamped into the end bins.
pub fn bin_counts(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (min, max) = (edges[0], edges[bins]);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = if max > min {
            let pos = ((v - min) / (max - min) * bins as f64).floor();
            (pos.max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    counts
}

/// Shannon entropy (bits) of the empirical distribution given by counts.
pub fn entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    // exact zero for a single occupied bin
    h.max(0.0)
}

/// Per-dimension mean and population standard deviation (Welford).
pub fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for (k, row) in rows.iter().enumerate() {
        let n = (k + 1) as f64;
        for j in 0..d {
            let delta = row[j] - mean[j];
            mean[j] += delta / n;
            m2[j] += delta * (row[j] - mean[j]);
        }
    }
    let n = rows.len().max(1) as f64;
    let std = m2.iter().map(|v| (v / n).max(0.0).sqrt()).collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_values_single_bin() {
        let h = histogram(&[2.5; 7], 10);
        assert_eq!(h.counts, vec![7]);
        assert_eq!(h.entropy_bits, 0.0);
        assert_eq!(h.edges, vec![2.5, 2.5]);
    }

    #[test]
    fn last_bin_is_closed() {
        let h = histogram(&[0.0, 0.5, 1.0], 2);
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.entropy_bits, -(1.0 / 3f64) * (1.0 / 3f64).log2() - (2.0 / 3f64) * (2.0 / 3f64).log2());
    }

    #[test]
    fn population_std() {
        let (mean, std) = column_stats(&[vec![0.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(mean, vec![0.0, 1.0]);
        assert_eq!(std, vec![0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn histogram_invariants(values in prop::collection::vec(-100.0f64..100.0, 1..200), bins in 1usize..40) {
            let h = histogram(&values, bins);
            prop_assert_eq!(h.total(), values.len());
            prop_assert!(h.entropy_bits >= 0.0);
            prop_assert!(h.entropy_bits <= (h.counts.len() as f64).log2() + 1e-12);
            let occupied = h.counts.iter().filter(|&&c| c > 0).count();
            prop_assert_eq!(h.entropy_bits == 0.0, occupied == 1);
        }
    }
}

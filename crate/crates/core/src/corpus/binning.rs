use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// One non-empty frequency bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveBin {
    /// Position of this bin among all `edges` intervals.
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub geo_mean: f64,
    pub geo_std: f64,
    /// Input indices that fell into this bin.
    #[serde(skip)]
    pub members: Vec<usize>,
}

/// Prediction probabilities summarized per corpus-frequency bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedCurve {
    pub edges: Vec<f64>,
    /// Non-empty bins only, in ascending frequency order.
    pub bins: Vec<CurveBin>,
    /// Items excluded for zero frequency (or falling outside explicit edges).
    pub dropped: usize,
}

impl BinnedCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin", "freq_lower", "freq_upper", "count", "geo_mean", "geo_std"])?;
        for b in &self.bins {
            w.write_record([
                b.index.to_string(),
                format!("{:e}", b.lower),
                format!("{:e}", b.upper),
                b.count.to_string(),
                format!("{:e}", b.geo_mean),
                format!("{:e}", b.geo_std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bin items by frequency on `num_bins` log-spaced intervals spanning the
/// positive frequencies, and summarize each bin's `probs` by geometric mean
/// and geometric standard deviation. Zero-frequency items are dropped.
pub fn bin_curve(freqs: &[f64], probs: &[f64], num_bins: usize) -> Result<BinnedCurve> {
    if freqs.len() != probs.len() {
        return Err(Error::shape("bin_curve", freqs.len(), probs.len()));
    }
    if num_bins == 0 {
        return Err(Error::invalid("num_bins must be positive"));
    }
    let positive = freqs.iter().copied().filter(|&f| f > 0.0);
    let (lo, hi) = positive.fold((f64::INFINITY, 0.0f64), |(lo, hi), f| (lo.min(f), hi.max(f)));
    if hi <= 0.0 {
        return Err(Error::NothingToBin);
    }
    let (mut log_lo, mut log_hi) = (lo.ln(), hi.ln());
    if log_hi - log_lo < 1e-12 {
        log_lo -= 0.5;
        log_hi += 0.5;
    }
    let step = (log_hi - log_lo) / num_bins as f64;
    let mut edges: Vec<f64> = (0..=num_bins)
        .map(|k| (log_lo + step * k as f64).exp())
        .collect();
    if hi > lo {
        edges[0] = lo;
        edges[num_bins] = hi;
    }
    bin_curve_with_edges(freqs, probs, &edges)
}

/// Bin items against explicit, strictly increasing `edges`. Interval `k` is
/// `[edges[k], edges[k+1])`; the last interval also includes its upper edge.
pub fn bin_curve_with_edges(freqs: &[f64], probs: &[f64], edges: &[f64]) -> Result<BinnedCurve> {
    if freqs.len() != probs.len() {
        return Err(Error::shape("bin_curve", freqs.len(), probs.len()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("bin edges must be strictly increasing"));
    }
    let num_bins = edges.len() - 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_bins];
    let mut dropped = 0;
    for (i, &f) in freqs.iter().enumerate() {
        if !(f > 0.0) {
            dropped += 1;
            continue;
        }
        match bin_index(edges, f) {
            Some(k) => members[k].push(i),
            None => dropped += 1,
        }
    }
    if members.iter().all(Vec::is_empty) {
        return Err(Error::NothingToBin);
    }
    let mut bins = Vec::new();
    for (k, idx) in members.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut logs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let p = probs[i];
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::invalid(format!(
                    "probability at index {i} must be positive and finite, got {p}"
                )));
            }
            logs.push(p.ln());
        }
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        bins.push(CurveBin {
            index: k,
            lower: edges[k],
            upper: edges[k + 1],
            count: idx.len(),
            geo_mean: mean.exp(),
            geo_std: var.sqrt().exp(),
            members: idx,
        });
    }
    Ok(BinnedCurve {
        edges: edges.to_vec(),
        bins,
        dropped,
    })
}

fn bin_index(edges: &[f64], f: f64) -> Option<usize> {
    let last = edges.len() - 1;
    if f < edges[0] || f > edges[last] {
        return None;
    }
    let k = edges.partition_point(|&e| e <= f);
    Some(k.saturating_sub(1).min(last - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear_scan(edges: &[f64], f: f64) -> Option<usize> {
        let nb = edges.len() - 1;
        for k in 0..nb {
            let upper_ok = if k == nb - 1 {
                f <= edges[k + 1]
            } else {
                f < edges[k + 1]
            };
            if edges[k] <= f && upper_ok {
                return Some(k);
            }
        }
        None
    }

    #[test]
    fn geometric_mean_of_pair() {
        let c = bin_curve(&[0.5, 0.5], &[1e-2, 1e-4], 1).unwrap();
        assert_eq!(c.bins.len(), 1);
        assert!((c.bins[0].geo_mean - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn identical_probs_have_unit_geo_std() {
        let c = bin_curve(&[0.1, 0.2, 0.3], &[0.25, 0.25, 0.25], 1).unwrap();
        assert_eq!(c.bins[0].geo_std, 1.0);
        assert!((c.bins[0].geo_mean - 0.25).abs() < 1e-15);
    }

    #[test]
    fn hand_placed_edges_match_scan() {
        let freqs = [0.05, 0.2, 0.7];
        let probs = [0.1, 0.3, 0.6];
        let edges = [0.01, 0.1, 1.0];
        let c = bin_curve_with_edges(&freqs, &probs, &edges).unwrap();
        for bin in &c.bins {
            for &m in &bin.members {
                assert_eq!(linear_scan(&edges, freqs[m]), Some(bin.index));
            }
        }
        assert_eq!(c.bins[0].members, vec![0]);
        assert_eq!(c.bins[1].members, vec![1, 2]);
    }

    #[test]
    fn zero_frequencies_are_dropped() {
        let c = bin_curve(&[0.0, 0.1, 0.9], &[0.3, 0.3, 0.4], 2).unwrap();
        assert_eq!(c.dropped, 1);
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 2);
    }

    #[test]
    fn all_zero_is_nothing_to_bin() {
        assert!(matches!(
            bin_curve(&[0.0, 0.0], &[0.5, 0.5], 3),
            Err(Error::NothingToBin)
        ));
    }

    #[test]
    fn single_frequency_still_bins() {
        let c = bin_curve(&[0.2, 0.2], &[0.1, 0.4], 3).unwrap();
        assert_eq!(c.bins.len(), 1);
        assert_eq!(c.bins[0].count, 2);
        assert!(c.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn csv_export() {
        let c = bin_curve(&[0.1, 0.9], &[0.2, 0.8], 2).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("bin,freq_lower,freq_upper,count,geo_mean,geo_std\n"));
        assert_eq!(s.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn bins_partition_the_positive_items(
            items in prop::collection::vec((0.0f64..1.0, 1e-6f64..1.0), 1..60),
            num_bins in 1usize..12,
        ) {
            let freqs: Vec<f64> = items.iter().map(|x| if x.0 < 0.1 { 0.0 } else { x.0 }).collect();
            let probs: Vec<f64> = items.iter().map(|x| x.1).collect();
            prop_assume!(freqs.iter().any(|&f| f > 0.0));
            let c = bin_curve(&freqs, &probs, num_bins).unwrap();
            let mut seen: Vec<usize> = c.bins.iter().flat_map(|b| b.members.clone()).collect();
            let total = seen.len();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), total);
            let expected: Vec<usize> = (0..freqs.len()).filter(|&i| freqs[i] > 0.0).collect();
            prop_assert_eq!(seen, expected);
            prop_assert_eq!(c.dropped, freqs.len() - total);
            prop_assert!(c.edges.windows(2).all(|w| w[0] < w[1]));
            for b in &c.bins {
                prop_assert!(b.count >= 1);
                let lo = b.members.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
                let hi = b.members.iter().map(|&i| probs[i]).fold(0.0, f64::max);
                prop_assert!(b.geo_mean >= lo * (1.0 - 1e-12) && b.geo_mean <= hi * (1.0 + 1e-12));
                for &m in &b.members {
                    prop_assert_eq!(linear_scan(&c.edges, freqs[m]), Some(b.index));
                }
            }
        }
    }
}

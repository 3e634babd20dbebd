//! Feature divergence, accuracy metrics and rank correlation.
//!
//! Divergence between two datasets at a layer: fit a Gaussian per channel to
//! the per-image spatial means of the activations, take the symmetric KL per
//! channel, and average over channels.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::train::predict;

pub const VARIANCE_FLOOR: f64 = 1e-8;

/// ½[KL(a‖b) + KL(b‖a)] for univariate Gaussians.
pub fn sym_kl_gaussian(mu_a: f64, var_a: f64, mu_b: f64, var_b: f64) -> Result<f64> {
    if !(var_a > 0.0 && var_b > 0.0) {
        return Err(Error::param("variance", "must be > 0"));
    }
    let kl = |ma: f64, va: f64, mb: f64, vb: f64| {
        0.5 * (vb / va).ln() + (va + (ma - mb).powi(2)) / (2.0 * vb) - 0.5
    };
    let d = 0.5 * (kl(mu_a, var_a, mu_b, var_b) + kl(mu_b, var_b, mu_a, var_a));
    // Rounding can leave identical Gaussians a hair below zero.
    Ok(d.max(0.0))
}

/// Streaming per-channel mean and population variance (Chan et al. merge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelGaussianSummary {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    m2: Vec<f64>,
}

impl ChannelGaussianSummary {
    pub fn new(channels: usize) -> Self {
        ChannelGaussianSummary {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    /// Summary of an N×C feature matrix.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (_, c) = features.dims2()?;
        let mut s = Self::new(c);
        for row in features.data().chunks_exact(c) {
            s.push(row)?;
        }
        Ok(s)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.channels() {
            return Err(Error::shape("summary", format!("{} values for {} channels", row.len(), self.channels())));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(row) {
            let d = x - *m;
            *m += d / n;
            *m2 += d * (x - *m);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.channels() != self.channels() {
            return Err(Error::shape("summary", "channel counts differ"));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.channels() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|v| (v / n).max(0.0)).collect()
    }
}

/// Channel-mean symmetric KL between two summaries, variances floored.
pub fn summary_divergence(a: &ChannelGaussianSummary, b: &ChannelGaussianSummary) -> Result<f64> {
    if a.count == 0 || b.count == 0 {
        return Err(Error::Empty("divergence needs non-empty datasets".into()));
    }
    if a.channels() != b.channels() || a.channels() == 0 {
        return Err(Error::shape("divergence", "channel counts differ"));
    }
    let (va, vb) = (a.variance(), b.variance());
    let mut total = 0.0;
    for i in 0..a.channels() {
        total += sym_kl_gaussian(
            a.mean[i],
            va[i].max(VARIANCE_FLOOR),
            b.mean[i],
            vb[i].max(VARIANCE_FLOOR),
        )?;
    }
    Ok(total / a.channels() as f64)
}

/// Divergence at block `block` between datasets `a` and `b`.
pub fn feature_divergence(net: &Network, block: usize, a: &Dataset, b: &Dataset, batch_size: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("divergence needs non-empty datasets".into()));
    }
    let fa = predict(net, a, batch_size, Some(block))?.1.expect("features requested");
    let fb = predict(net, b, batch_size, Some(block))?.1.expect("features requested");
    summary_divergence(
        &ChannelGaussianSummary::from_features(&fa)?,
        &ChannelGaussianSummary::from_features(&fb)?,
    )
}

/// Whether `label` ranks among the `k` largest entries of `row`; ties go
/// to the lower class index.
fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    ahead < k
}

pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, c) = logits.dims2()?;
    if k == 0 || k > c {
        return Err(Error::param("k", format!("{k} outside [1, {c}]")));
    }
    if labels.len() != n {
        return Err(Error::shape("topk_accuracy", format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::Empty("no predictions".into()));
    }
    let mut hits = 0usize;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        hits += in_top_k(row, label, k) as usize;
    }
    Ok(hits as f64 / n as f64)
}

/// The `k` presets with the largest accuracy drop from `baseline`, ties
/// broken alphabetically.
pub fn hard_k(accuracies: &[(String, f64)], baseline: f64, k: usize) -> Vec<String> {
    let mut sorted: Vec<&(String, f64)> = accuracies.iter().collect();
    sorted.sort_by(|a, b| {
        let (da, db) = (baseline - a.1, baseline - b.1);
        db.total_cmp(&da).then_with(|| a.0.cmp(&b.0))
    });
    sorted.into_iter().take(k).map(|(n, _)| n.clone()).collect()
}

/// 1-based ranks with ties averaged.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. Errors when either input has no rank spread.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("spearman", format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::param("xs", "need at least 3 pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::param("xs", "constant input has no rank correlation"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_kl_closed_forms() {
        assert_eq!(sym_kl_gaussian(0.3, 2.0, 0.3, 2.0).unwrap(), 0.0);
        assert!((sym_kl_gaussian(0.0, 1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let (a, b) = (sym_kl_gaussian(0.1, 0.5, -2.0, 3.0).unwrap(), sym_kl_gaussian(-2.0, 3.0, 0.1, 0.5).unwrap());
        assert_eq!(a, b);
        assert!(sym_kl_gaussian(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn topk_hand_cases() {
        let l = Tensor::new(vec![1, 3], vec![0.2, 0.9, 0.5]).unwrap();
        assert_eq!(topk_accuracy(&l, &[2], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&l, &[2], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&l, &[0], 3).unwrap(), 1.0);
        assert!(topk_accuracy(&l, &[0], 4).is_err());
        let tie = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(topk_accuracy(&tie, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&tie, &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn hard_k_orders_by_drop() {
        let accs = vec![("A".to_string(), 0.85), ("B".to_string(), 0.70), ("C".to_string(), 0.89)];
        assert_eq!(hard_k(&accs, 0.90, 1), vec!["B"]);
        assert_eq!(hard_k(&accs, 0.90, 3), vec!["B", "A", "C"]);
        let tied = vec![("z".to_string(), 0.5), ("a".to_string(), 0.5)];
        assert_eq!(hard_k(&tied, 0.9, 1), vec!["a"]);
    }

    #[test]
    fn spearman_hand_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&xs, &xs).unwrap(), 1.0);
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        assert_eq!(spearman(&xs, &neg).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]).unwrap(), -1.0);
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn summaries_merge_like_one_pass() {
        let rows: Vec<[f64; 2]> = (0..9).map(|i| [i as f64, (i * i) as f64 * 0.1]).collect();
        let mut whole = ChannelGaussianSummary::new(2);
        let mut a = ChannelGaussianSummary::new(2);
        let mut b = ChannelGaussianSummary::new(2);
        for (i, r) in rows.iter().enumerate() {
            whole.push(r).unwrap();
            if i < 4 { a.push(r).unwrap() } else { b.push(r).unwrap() }
        }
        a.merge(&b).unwrap();
        for (x, y) in a.variance().iter().zip(whole.variance()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(summary_divergence(&whole, &whole).unwrap(), 0.0);
    }
}

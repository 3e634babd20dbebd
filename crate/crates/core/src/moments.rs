use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// Which axes per-channel moments are reduced over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentScope {
    /// Over H×W, separately for every (instance, channel).
    PerInstance,
    /// Over N×H×W for every channel.
    PerBatch,
}

/// Per-channel mean and population variance.
///
/// For [`MomentScope::PerInstance`] the vectors hold `N·C` entries laid out
/// instance-major; for [`MomentScope::PerBatch`] they hold `C` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl ChannelMoments {
    pub fn std(&self, eps: f64) -> Vec<f64> {
        self.variance.iter().map(|v| (v + eps).sqrt()).collect()
    }
}

pub fn channel_moments(input: &Tensor, scope: MomentScope) -> Result<ChannelMoments> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let data = input.data();
    match scope {
        MomentScope::PerInstance => {
            let mut mean = Vec::with_capacity(n * c);
            let mut variance = Vec::with_capacity(n * c);
            for group in data.chunks_exact(hw) {
                let (m, v) = mean_var(group.iter().copied(), hw);
                mean.push(m);
                variance.push(v);
            }
            Ok(ChannelMoments { mean, variance })
        }
        MomentScope::PerBatch => {
            let mut mean = Vec::with_capacity(c);
            let mut variance = Vec::with_capacity(c);
            for ch in 0..c {
                let values = (0..n).flat_map(|i| {
                    let off = (i * c + ch) * hw;
                    data[off..off + hw].iter().copied()
                });
                let (m, v) = mean_var(values, n * hw);
                mean.push(m);
                variance.push(v);
            }
            Ok(ChannelMoments { mean, variance })
        }
    }
}

/// Two-pass mean and population variance.
pub(crate) fn mean_var<I: Iterator<Item = f64> + Clone>(values: I, count: usize) -> (f64, f64) {
    let inv = 1.0 / count as f64;
    let mean = values.clone().sum::<f64>() * inv;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv;
    (mean, var.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_has_zero_variance() {
        let t = Tensor::full(&[1, 1, 2, 2], 5.0);
        let m = channel_moments(&t, MomentScope::PerInstance).unwrap();
        assert_eq!(m.mean, vec![5.0]);
        assert_eq!(m.variance, vec![0.0]);
    }

    #[test]
    fn hand_computed_moments() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = channel_moments(&t, MomentScope::PerInstance).unwrap();
        assert_eq!(m.mean, vec![2.5]);
        assert!((m.variance[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn batch_of_identical_instances_matches_instance_moments() {
        let one = Tensor::new(vec![1, 2, 1, 3], vec![1.0, 4.0, -2.0, 0.5, 0.5, 7.0]).unwrap();
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 2, 1, 3], data).unwrap();
        let inst = channel_moments(&one, MomentScope::PerInstance).unwrap();
        let batch = channel_moments(&two, MomentScope::PerBatch).unwrap();
        for c in 0..2 {
            assert!((inst.mean[c] - batch.mean[c]).abs() < 1e-15);
            assert!((inst.variance[c] - batch.variance[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_nchw() {
        let t = Tensor::zeros(&[3, 4]);
        assert!(channel_moments(&t, MomentScope::PerBatch).is_err());
    }
}

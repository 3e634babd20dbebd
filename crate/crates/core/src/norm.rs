//! Instance, batch and adaptive instance normalization.
//!
//! The `*_var` functions record onto a [`Tape`] and are what the networks
//! use; the tensor-level wrappers evaluate a single layer in isolation.
//! Standard deviations are `sqrt(var + eps)` with population variance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::moments::{channel_moments, ChannelMoments, MomentScope};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with batch moments and update the running averages.
    Train,
    /// Normalize with the stored running averages.
    Eval,
}

fn check_pair(what: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("norm", format!("{what}: {} vs {} entries", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("norm parameters"));
    }
    Ok(())
}

/// Per-channel scale and shift of a normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        check_pair("gamma/beta", &gamma, &beta)?;
        Ok(AffineParams { gamma, beta })
    }

    /// γ = 1, β = 0.
    pub fn identity(channels: usize) -> Self {
        AffineParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Externally supplied per-channel scale (z_m) and shift (z_v).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl StyleCode {
    pub fn new(scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        check_pair("scale/shift", &scale, &shift)?;
        Ok(StyleCode { scale, shift })
    }

    pub fn zeros(channels: usize) -> Self {
        StyleCode {
            scale: vec![0.0; channels],
            shift: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn is_zero(&self) -> bool {
        self.scale.iter().chain(&self.shift).all(|v| *v == 0.0)
    }
}

/// Running per-channel moments of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    /// Number of batches folded into the running averages.
    pub updates: u64,
}

impl BatchStats {
    pub fn new(channels: usize) -> Self {
        BatchStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPS,
            updates: 0,
        }
    }

    pub fn with_momentum(channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::param("momentum", format!("{momentum} outside (0, 1]")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be > 0"));
        }
        Ok(BatchStats {
            momentum,
            epsilon,
            ..BatchStats::new(channels)
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_recorded(&self) -> bool {
        self.updates > 0
    }

    /// Folds one batch's moments into the exponential moving average.
    pub fn update(&mut self, batch: &ChannelMoments) -> Result<()> {
        if batch.mean.len() != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("{} batch channels vs {} running", batch.mean.len(), self.channels()),
            ));
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = if m == 1.0 { *b } else { (1.0 - m) * *r + m * b };
        }
        for (r, b) in self.running_var.iter_mut().zip(&batch.variance) {
            *r = if m == 1.0 { *b } else { (1.0 - m) * *r + m * b };
        }
        self.updates += 1;
        Ok(())
    }

    /// Replaces the running moments outright.
    pub fn set(&mut self, moments: &ChannelMoments) -> Result<()> {
        if moments.mean.len() != self.channels() {
            return Err(Error::shape("batch_norm", "channel count changed"));
        }
        self.running_mean = moments.mean.clone();
        self.running_var = moments.variance.clone();
        self.updates = self.updates.max(1);
        Ok(())
    }
}

pub fn instance_norm_var(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let s = tape.standardize(x, MomentScope::PerInstance, eps)?;
    tape.channel_affine(s, gamma, beta)
}

/// Batch normalization. In train mode the batch moments are returned so the
/// caller can fold them into `stats`.
pub fn batch_norm_var(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &BatchStats,
    mode: BnMode,
) -> Result<(Var, Option<ChannelMoments>)> {
    let c = tape.value(x).dims4()?.1;
    if stats.channels() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("{} running channels for {c}-channel input", stats.channels()),
        ));
    }
    match mode {
        BnMode::Train => {
            let moments = channel_moments(tape.value(x), MomentScope::PerBatch)?;
            let s = tape.standardize(x, MomentScope::PerBatch, stats.epsilon)?;
            Ok((tape.channel_affine(s, gamma, beta)?, Some(moments)))
        }
        BnMode::Eval => {
            if !stats.is_recorded() {
                return Err(Error::NoStats("batch_norm".into()));
            }
            let inv: Vec<f64> = stats
                .running_var
                .iter()
                .map(|v| 1.0 / (v + stats.epsilon).sqrt())
                .collect();
            let off: Vec<f64> = stats.running_mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
            let a = tape.constant(Tensor::from_parts(vec![c], inv));
            let b = tape.constant(Tensor::from_parts(vec![c], off));
            let s = tape.channel_affine(x, a, b)?;
            Ok((tape.channel_affine(s, gamma, beta)?, None))
        }
    }
}

/// AdaIN with one code per instance: `scale` and `shift` are N×C.
pub fn adain_var(tape: &mut Tape, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
    let s = tape.standardize(x, MomentScope::PerInstance, eps)?;
    tape.instance_affine(s, scale, shift)
}

fn channel_vec(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::from_parts(vec![v.len()], v.to_vec()))
}

pub fn instance_norm(x: &Tensor, p: &AffineParams, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = channel_vec(&mut tape, &p.gamma);
    let b = channel_vec(&mut tape, &p.beta);
    let y = instance_norm_var(&mut tape, xv, g, b, eps)?;
    Ok(tape.value(y).clone())
}

/// Tensor-level batch normalization; train mode updates `stats` in place.
pub fn batch_norm(x: &Tensor, p: &AffineParams, stats: &mut BatchStats, mode: BnMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = channel_vec(&mut tape, &p.gamma);
    let b = channel_vec(&mut tape, &p.beta);
    let (y, moments) = batch_norm_var(&mut tape, xv, g, b, stats, mode)?;
    if let Some(m) = moments {
        stats.update(&m)?;
    }
    Ok(tape.value(y).clone())
}

/// Expands codes into N×C scale and shift tensors. A single code is shared
/// by every instance.
pub fn code_tensors(codes: &[StyleCode], n: usize, c: usize) -> Result<(Tensor, Tensor)> {
    if codes.len() != 1 && codes.len() != n {
        return Err(Error::shape("adain", format!("{} codes for {n} instances", codes.len())));
    }
    let mut scale = Vec::with_capacity(n * c);
    let mut shift = Vec::with_capacity(n * c);
    for i in 0..n {
        let code = &codes[if codes.len() == 1 { 0 } else { i }];
        if code.channels() != c || code.shift.len() != c {
            return Err(Error::shape(
                "adain",
                format!("code of length {} for {c} channels", code.channels()),
            ));
        }
        scale.extend_from_slice(&code.scale);
        shift.extend_from_slice(&code.shift);
    }
    Ok((Tensor::from_parts(vec![n, c], scale), Tensor::from_parts(vec![n, c], shift)))
}

pub fn adain(x: &Tensor, codes: &[StyleCode], eps: f64) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    let (scale, shift) = code_tensors(codes, n, c)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = tape.constant(scale);
    let t = tape.constant(shift);
    let y = adain_var(&mut tape, xv, s, t, eps)?;
    Ok(tape.value(y).clone())
}

/// The code that makes AdaIN reproduce instance `n` of `x`: (σ(x), μ(x)).
pub fn identity_code(x: &Tensor, n: usize, eps: f64) -> Result<StyleCode> {
    let (batch, c, _, _) = x.dims4()?;
    if n >= batch {
        return Err(Error::shape("identity_code", format!("instance {n} of {batch}")));
    }
    let m = channel_moments(x, MomentScope::PerInstance)?;
    let range = n * c..(n + 1) * c;
    let std = m.std(eps);
    StyleCode::new(std[range.clone()].to_vec(), m.mean[range].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn instance_norm_hand_values() {
        let x = row(&[1.0, 2.0, 3.0, 4.0]);
        let y = instance_norm(&x, &AffineParams::identity(1), 0.0).unwrap();
        close(y.data(), &[-1.3416, -0.4472, 0.4472, 1.3416], 1e-4);
        let p = AffineParams::new(vec![2.0], vec![1.0]).unwrap();
        let y = instance_norm(&x, &p, 0.0).unwrap();
        close(y.data(), &[-1.6833, 0.1056, 1.8944, 3.6833], 1e-4);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::full(&[2, 3, 4, 4], 5.0);
        let y = instance_norm(&x, &AffineParams::identity(3), DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adain_hand_values_and_degenerate_codes() {
        let x = row(&[1.0, 2.0, 3.0, 4.0]);
        let code = StyleCode::new(vec![2.0], vec![-1.0]).unwrap();
        let y = adain(&x, &[code], 0.0).unwrap();
        close(y.data(), &[-3.6833, -1.8944, -0.1056, 1.6833], 1e-4);
        let flat = StyleCode::new(vec![0.0], vec![0.7]).unwrap();
        let y = adain(&x, &[flat], 0.0).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.7));
        let id = identity_code(&x, 0, 0.0).unwrap();
        close(adain(&x, &[id], 0.0).unwrap().data(), x.data(), 1e-12);
        assert!(adain(&x, &[StyleCode::zeros(2)], 0.0).is_err());
    }

    #[test]
    fn batch_norm_train_then_eval() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut stats = BatchStats::with_momentum(1, 1.0, 1e-5).unwrap();
        let p = AffineParams::identity(1);
        assert!(matches!(
            batch_norm(&x, &p, &mut stats, BnMode::Eval),
            Err(Error::NoStats(_))
        ));
        batch_norm(&x, &p, &mut stats, BnMode::Train).unwrap();
        assert_eq!(stats.running_mean, vec![4.0]);
        assert_eq!(stats.running_var, vec![5.0]);

        let p = AffineParams::new(vec![2.0], vec![0.5]).unwrap();
        let probe = row(&[0.0, 4.0, 9.0, -1.0]);
        let y = batch_norm(&probe, &p, &mut stats, BnMode::Eval).unwrap();
        let sd = (5.0f64 + 1e-5).sqrt();
        let want: Vec<f64> = probe.data().iter().map(|v| 2.0 * (v - 4.0) / sd + 0.5).collect();
        close(y.data(), &want, 1e-12);
    }

    #[test]
    fn ema_blends_with_momentum() {
        let mut stats = BatchStats::new(1);
        let m = ChannelMoments {
            mean: vec![10.0],
            variance: vec![3.0],
        };
        stats.update(&m).unwrap();
        close(&stats.running_mean, &[1.0], 1e-12);
        close(&stats.running_var, &[1.2], 1e-12);
        assert!(BatchStats::with_momentum(1, 0.0, 1e-5).is_err());
    }

    #[test]
    fn standardized_batch_passes_through() {
        let x = Tensor::new(vec![4, 1, 1, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut stats = BatchStats::new(1);
        let y = batch_norm(&x, &AffineParams::identity(1), &mut stats, BnMode::Train).unwrap();
        close(y.data(), x.data(), 1e-5);
    }
}

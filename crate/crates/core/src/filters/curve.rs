//! Monotone cubic tone curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Control points `(x, y)` in `[0, 1]²` with strictly increasing `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CurvePoints(pub Vec<[f64; 2]>);

impl CurvePoints {
    pub fn identity() -> Self {
        CurvePoints(vec![[0.0, 0.0], [1.0, 1.0]])
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let pts = &self.0;
        if pts.len() < 2 {
            return Err(Error::param(field, "needs at least two control points"));
        }
        for p in pts {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::param(field, format!("point {p:?} outside [0, 1]²")));
            }
        }
        if pts.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(Error::param(field, "x coordinates must be strictly increasing"));
        }
        Ok(())
    }
}

/// Per-channel curves followed by an optional master curve applied to all
/// three channels. Missing curves are the identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToneCurve {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub red: Option<CurvePoints>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub green: Option<CurvePoints>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blue: Option<CurvePoints>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master: Option<CurvePoints>,
}

impl ToneCurve {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in self.named() {
            if let Some(c) = c {
                c.validate(name)?;
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, &Option<CurvePoints>); 4] {
        [
            ("red", &self.red),
            ("green", &self.green),
            ("blue", &self.blue),
            ("master", &self.master),
        ]
    }

    pub(crate) fn compile(&self) -> Result<CompiledCurve> {
        self.validate()?;
        let build = |c: &Option<CurvePoints>| c.as_ref().map(MonotoneSpline::new);
        Ok(CompiledCurve {
            channels: [build(&self.red), build(&self.green), build(&self.blue)],
            master: build(&self.master),
        })
    }
}

pub(crate) struct CompiledCurve {
    channels: [Option<MonotoneSpline>; 3],
    master: Option<MonotoneSpline>,
}

impl CompiledCurve {
    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let mut out = rgb;
        for (v, curve) in out.iter_mut().zip(&self.channels) {
            if let Some(c) = curve {
                *v = c.eval(*v);
            }
            if let Some(m) = &self.master {
                *v = m.eval(*v);
            }
        }
        out
    }
}

/// Fritsch–Carlson monotone piecewise cubic Hermite interpolant.
#[derive(Clone, Debug)]
pub struct MonotoneSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
    tangents: Vec<f64>,
}

impl MonotoneSpline {
    /// Points must already satisfy [`CurvePoints::validate`].
    pub fn new(points: &CurvePoints) -> Self {
        let xs: Vec<f64> = points.0.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = points.0.iter().map(|p| p[1]).collect();
        let n = xs.len();
        let slopes: Vec<f64> = (0..n - 1)
            .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
            .collect();
        let mut tangents = vec![0.0; n];
        tangents[0] = slopes[0];
        tangents[n - 1] = slopes[n - 2];
        for i in 1..n - 1 {
            tangents[i] = if slopes[i - 1] * slopes[i] <= 0.0 {
                0.0
            } else {
                (slopes[i - 1] + slopes[i]) / 2.0
            };
        }
        for i in 0..n - 1 {
            if slopes[i] == 0.0 {
                tangents[i] = 0.0;
                tangents[i + 1] = 0.0;
                continue;
            }
            let a = tangents[i] / slopes[i];
            let b = tangents[i + 1] / slopes[i];
            let s = a * a + b * b;
            if s > 9.0 {
                let tau = 3.0 / s.sqrt();
                tangents[i] = tau * a * slopes[i];
                tangents[i + 1] = tau * b * slopes[i];
            }
        }
        MonotoneSpline {
            xs,
            ys,
            slopes,
            tangents,
        }
    }

    /// Evaluates the curve, holding the end values outside the control range
    /// and clamping to `[0, 1]`.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0].clamp(0.0, 1.0);
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1].clamp(0.0, 1.0);
        }
        let i = self.xs.partition_point(|&v| v <= x) - 1;
        let h = self.xs[i + 1] - self.xs[i];
        let dx = x - self.xs[i];
        let t = dx / h;
        let d = self.slopes[i];
        // Linear term plus a Hermite correction that vanishes when both
        // tangents equal the secant, so straight segments are reproduced exactly.
        let correction =
            h * t * (1.0 - t) * ((self.tangents[i] - d) * (1.0 - t) - (self.tangents[i + 1] - d) * t);
        (self.ys[i] + d * dx + correction).clamp(0.0, 1.0)
    }
}

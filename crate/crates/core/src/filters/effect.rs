//! Primitive image effects.
//!
//! All colour math works on linear `[0, 1]` channel values and clamps after
//! every effect. Luma uses Rec.601 weights; blend modes follow the W3C
//! compositing formulas with the image as backdrop and the tint as source.

use serde::{Deserialize, Serialize};

use super::curve::ToneCurve;
use crate::error::{Error, Result};
use crate::image::Image;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luma(rgb: [f64; 3]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    Normal,
    Multiply,
    Screen,
    Overlay,
    SoftLight,
}

impl BlendMode {
    /// Blends source `s` onto backdrop `b` for a single channel.
    pub fn blend(self, b: f64, s: f64) -> f64 {
        match self {
            BlendMode::Normal => s,
            BlendMode::Multiply => b * s,
            BlendMode::Screen => 1.0 - (1.0 - b) * (1.0 - s),
            BlendMode::Overlay => {
                if b <= 0.5 {
                    2.0 * b * s
                } else {
                    1.0 - 2.0 * (1.0 - b) * (1.0 - s)
                }
            }
            BlendMode::SoftLight => {
                if s <= 0.5 {
                    b - (1.0 - 2.0 * s) * b * (1.0 - b)
                } else {
                    let d = if b <= 0.25 {
                        ((16.0 * b - 12.0) * b + 4.0) * b
                    } else {
                        b.sqrt()
                    };
                    b + (2.0 * s - 1.0) * (d - b)
                }
            }
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    /// Multiplies every channel by `factor` (1 = identity).
    Brightness { factor: f64 },
    /// Scales distance from mid-grey by `factor` (1 = identity).
    Contrast { factor: f64 },
    /// Scales distance from luma by `factor` (0 = grey, 1 = identity).
    Saturation { factor: f64 },
    Grayscale {
        #[serde(default = "one")]
        amount: f64,
    },
    Sepia {
        #[serde(default = "one")]
        amount: f64,
    },
    HueRotate { degrees: f64 },
    ToneCurve(ToneCurve),
    TintBlend {
        color: [f64; 3],
        mode: BlendMode,
        opacity: f64,
    },
    /// Darkens towards the corners: `1 − strength · smoothstep(radius, 1, d)`
    /// with `d` the distance from the centre, 1 at the corners.
    Vignette { strength: f64, radius: f64 },
}

fn check_range(field: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::param(field, format!("{v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl Effect {
    pub fn kind(&self) -> &'static str {
        match self {
            Effect::Brightness { .. } => "brightness",
            Effect::Contrast { .. } => "contrast",
            Effect::Saturation { .. } => "saturation",
            Effect::Grayscale { .. } => "grayscale",
            Effect::Sepia { .. } => "sepia",
            Effect::HueRotate { .. } => "hue_rotate",
            Effect::ToneCurve(_) => "tone_curve",
            Effect::TintBlend { .. } => "tint_blend",
            Effect::Vignette { .. } => "vignette",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Effect::Brightness { factor } => check_range("factor", *factor, 0.0, 4.0),
            Effect::Contrast { factor } => check_range("factor", *factor, 0.0, 4.0),
            Effect::Saturation { factor } => check_range("factor", *factor, 0.0, 4.0),
            Effect::Grayscale { amount } | Effect::Sepia { amount } => {
                check_range("amount", *amount, 0.0, 1.0)
            }
            Effect::HueRotate { degrees } => check_range("degrees", *degrees, -360.0, 360.0),
            Effect::ToneCurve(c) => c.validate(),
            Effect::TintBlend { color, opacity, .. } => {
                for v in color {
                    check_range("color", *v, 0.0, 1.0)?;
                }
                check_range("opacity", *opacity, 0.0, 1.0)
            }
            Effect::Vignette { strength, radius } => {
                check_range("strength", *strength, 0.0, 1.0)?;
                if !(0.0..1.0).contains(radius) {
                    return Err(Error::param("radius", format!("{radius} outside [0, 1)")));
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.validate()?;
        let out = match self {
            Effect::Brightness { factor } => img.map_pixels(|_, _, p| p.map(|v| v * factor)),
            Effect::Contrast { factor } => {
                img.map_pixels(|_, _, p| p.map(|v| (v - 0.5) * factor + 0.5))
            }
            Effect::Saturation { factor } => img.map_pixels(|_, _, p| {
                let l = luma(p);
                p.map(|v| l + (v - l) * factor)
            }),
            Effect::Grayscale { amount } => img.map_pixels(|_, _, p| {
                let l = luma(p);
                p.map(|v| v * (1.0 - amount) + l * amount)
            }),
            Effect::Sepia { amount } => img.map_pixels(|_, _, p| {
                let s = mat3(&SEPIA, p);
                [0, 1, 2].map(|c| p[c] * (1.0 - amount) + s[c] * amount)
            }),
            Effect::HueRotate { degrees } => {
                let m = hue_matrix(*degrees);
                img.map_pixels(|_, _, p| mat3(&m, p))
            }
            Effect::ToneCurve(curve) => {
                let compiled = curve.compile()?;
                img.map_pixels(|_, _, p| compiled.apply(p))
            }
            Effect::TintBlend {
                color,
                mode,
                opacity,
            } => img.map_pixels(|_, _, p| {
                [0, 1, 2].map(|c| {
                    let blended = mode.blend(p[c], color[c]);
                    p[c] + (blended - p[c]) * opacity
                })
            }),
            Effect::Vignette { strength, radius } => {
                let (w, h) = (img.width() as f64, img.height() as f64);
                img.map_pixels(|x, y, p| {
                    let f = vignette_factor(x, y, w, h, *strength, *radius);
                    p.map(|v| v * f)
                })
            }
        };
        Ok(out)
    }
}

const SEPIA: [[f64; 3]; 3] = [
    [0.393, 0.769, 0.189],
    [0.349, 0.686, 0.168],
    [0.272, 0.534, 0.131],
];

fn mat3(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

/// Luminance-preserving hue rotation matrix.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    [
        [
            0.213 + c * 0.787 - s * 0.213,
            0.715 - c * 0.715 - s * 0.715,
            0.072 - c * 0.072 + s * 0.928,
        ],
        [
            0.213 - c * 0.213 + s * 0.143,
            0.715 + c * 0.285 + s * 0.140,
            0.072 - c * 0.072 - s * 0.283,
        ],
        [
            0.213 - c * 0.213 - s * 0.787,
            0.715 - c * 0.715 + s * 0.715,
            0.072 + c * 0.928 + s * 0.072,
        ],
    ]
}

pub(crate) fn vignette_factor(x: usize, y: usize, w: f64, h: f64, strength: f64, radius: f64) -> f64 {
    let dx = ((x as f64 + 0.5) / w - 0.5) * 2.0;
    let dy = ((y as f64 + 0.5) / h - 0.5) * 2.0;
    let d = ((dx * dx + dy * dy) / 2.0).sqrt();
    let t = ((d - radius) / (1.0 - radius)).clamp(0.0, 1.0);
    1.0 - strength * t * t * (3.0 - 2.0 * t)
}

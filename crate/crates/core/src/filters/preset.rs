//! Named filter presets and the built-in registry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::curve::{CurvePoints, ToneCurve};
use super::effect::{BlendMode, Effect};
use crate::error::{Error, Result};
use crate::image::Image;

fn full_intensity() -> f64 {
    1.0
}

fn is_full(v: &f64) -> bool {
    *v == 1.0
}

/// An ordered chain of effects. `intensity` blends the filtered result with
/// the input (0 = identity, 1 = full effect).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPreset {
    pub name: String,
    #[serde(default = "full_intensity", skip_serializing_if = "is_full")]
    pub intensity: f64,
    pub effects: Vec<Effect>,
}

impl FilterPreset {
    pub fn new(name: impl Into<String>, effects: Vec<Effect>) -> Self {
        FilterPreset {
            name: name.into(),
            intensity: 1.0,
            effects,
        }
    }

    pub fn with_intensity(&self, intensity: f64) -> Self {
        FilterPreset {
            intensity,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::param("name", "must not be empty"));
        }
        if self.effects.is_empty() {
            return Err(Error::param("effects", format!("preset `{}` has no effects", self.name)));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::param("intensity", format!("{} outside [0, 1]", self.intensity)));
        }
        self.effects.iter().try_for_each(Effect::validate)
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.validate()?;
        if self.intensity == 0.0 {
            return Ok(img.clone());
        }
        let mut out = img.clone();
        for e in &self.effects {
            out = e.apply(&out)?;
        }
        if self.intensity == 1.0 {
            return Ok(out);
        }
        let t = self.intensity;
        let pixels = img
            .pixels()
            .iter()
            .zip(out.pixels())
            .map(|(a, b)| (a + (b - a) * t).clamp(0.0, 1.0))
            .collect();
        Image::new(img.width(), img.height(), pixels)
    }

    /// Directory-safe form of the name.
    pub fn slug(&self) -> String {
        slug(&self.name)
    }
}

pub fn slug(name: &str) -> String {
    let mut s = String::with_capacity(name.len());
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            s.push(ch.to_ascii_lowercase());
        } else if !s.ends_with('-') {
            s.push('-');
        }
    }
    s.trim_matches('-').to_string()
}

/// A set of uniquely named presets, kept in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetRegistry {
    presets: Vec<FilterPreset>,
}

impl PresetRegistry {
    pub fn new(presets: Vec<FilterPreset>) -> Result<Self> {
        if presets.is_empty() {
            return Err(Error::Empty("preset registry".into()));
        }
        for (i, p) in presets.iter().enumerate() {
            p.validate()?;
            if presets[..i].iter().any(|q| q.name == p.name || q.slug() == p.slug()) {
                return Err(Error::param("name", format!("duplicate preset `{}`", p.name)));
            }
        }
        Ok(PresetRegistry { presets })
    }

    /// The 20 built-in Instagram-style presets.
    pub fn builtin() -> Self {
        PresetRegistry::new(builtin_presets()).expect("built-in presets are valid")
    }

    pub fn presets(&self) -> &[FilterPreset] {
        &self.presets
    }

    pub fn names(&self) -> Vec<&str> {
        self.presets.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.presets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presets.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&FilterPreset> {
        self.presets
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownPreset {
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    /// Every preset rescaled to the same global intensity.
    pub fn with_intensity(&self, intensity: f64) -> Result<Self> {
        PresetRegistry::new(self.presets.iter().map(|p| p.with_intensity(intensity)).collect())
    }

    pub fn apply(&self, name: &str, img: &Image) -> Result<Image> {
        self.get(name)?.apply(img)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.presets).expect("presets serialize")
    }

    /// Parses either a single preset object or an array of presets.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let presets = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        PresetRegistry::new(presets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn curve(points: &[[f64; 2]]) -> Option<CurvePoints> {
    Some(CurvePoints(points.to_vec()))
}

fn tint(color: [f64; 3], mode: BlendMode, opacity: f64) -> Effect {
    Effect::TintBlend {
        color,
        mode,
        opacity,
    }
}

fn vignette(strength: f64, radius: f64) -> Effect {
    Effect::Vignette { strength, radius }
}

fn brightness(factor: f64) -> Effect {
    Effect::Brightness { factor }
}

fn contrast(factor: f64) -> Effect {
    Effect::Contrast { factor }
}

fn saturation(factor: f64) -> Effect {
    Effect::Saturation { factor }
}

fn sepia(amount: f64) -> Effect {
    Effect::Sepia { amount }
}

/// Approximations assembled from the primitive effects. Mild presets
/// (1977, Hefe, Rise, ...) stay close to the input; Gotham, Willow and
/// Inkwell drop colour; Toaster, Sutro and Lord Kelvin combine heavy tints
/// with vignetting.
fn builtin_presets() -> Vec<FilterPreset> {
    use BlendMode::*;
    vec![
        FilterPreset::new(
            "1977",
            vec![
                contrast(1.1),
                Effect::ToneCurve(ToneCurve {
                    master: curve(&[[0.0, 0.04], [0.5, 0.52], [1.0, 1.0]]),
                    ..Default::default()
                }),
                tint([0.95, 0.42, 0.6], Screen, 0.12),
            ],
        ),
        FilterPreset::new(
            "Amaro",
            vec![brightness(1.1), saturation(1.3), contrast(0.9), vignette(0.35, 0.45)],
        ),
        FilterPreset::new(
            "Brannan",
            vec![sepia(0.5), contrast(1.4), tint([0.63, 0.17, 0.78], Screen, 0.25)],
        ),
        FilterPreset::new(
            "Clarendon",
            vec![contrast(1.2), saturation(1.35), tint([0.5, 0.73, 0.87], Overlay, 0.2)],
        ),
        FilterPreset::new(
            "Earlybird",
            vec![
                contrast(0.9),
                sepia(0.2),
                tint([0.82, 0.73, 0.62], Overlay, 0.6),
                vignette(0.45, 0.4),
            ],
        ),
        FilterPreset::new(
            "Gotham",
            vec![
                Effect::Grayscale { amount: 1.0 },
                contrast(1.4),
                Effect::ToneCurve(ToneCurve {
                    master: curve(&[[0.0, 0.0], [0.3, 0.15], [0.7, 0.75], [1.0, 0.95]]),
                    ..Default::default()
                }),
                tint([0.8, 0.88, 1.0], Multiply, 0.5),
            ],
        ),
        FilterPreset::new(
            "Hefe",
            vec![
                contrast(1.15),
                saturation(1.1),
                Effect::ToneCurve(ToneCurve {
                    master: curve(&[[0.0, 0.0], [0.25, 0.22], [0.75, 0.8], [1.0, 1.0]]),
                    ..Default::default()
                }),
                vignette(0.15, 0.5),
            ],
        ),
        FilterPreset::new(
            "Hudson",
            vec![
                brightness(1.2),
                contrast(0.9),
                saturation(1.1),
                tint([0.65, 0.8, 1.0], Multiply, 0.35),
            ],
        ),
        FilterPreset::new(
            "Inkwell",
            vec![Effect::Grayscale { amount: 1.0 }, contrast(1.1), brightness(1.1)],
        ),
        FilterPreset::new(
            "Lo-Fi",
            vec![saturation(1.1), contrast(1.5), vignette(0.5, 0.35)],
        ),
        FilterPreset::new(
            "Lord Kelvin",
            vec![
                Effect::ToneCurve(ToneCurve {
                    red: curve(&[[0.0, 0.2], [0.5, 0.8], [1.0, 1.0]]),
                    green: curve(&[[0.0, 0.1], [0.5, 0.55], [1.0, 0.9]]),
                    blue: curve(&[[0.0, 0.0], [0.5, 0.2], [1.0, 0.45]]),
                    master: None,
                }),
                tint([1.0, 0.6, 0.15], Overlay, 0.6),
                vignette(0.5, 0.35),
            ],
        ),
        FilterPreset::new(
            "Mayfair",
            vec![
                contrast(1.1),
                saturation(1.1),
                tint([1.0, 0.95, 0.9], SoftLight, 0.3),
                vignette(0.15, 0.5),
            ],
        ),
        FilterPreset::new(
            "Nashville",
            vec![
                sepia(0.2),
                contrast(1.2),
                brightness(1.05),
                saturation(1.2),
                tint([0.97, 0.69, 0.6], Multiply, 0.55),
                tint([0.0, 0.27, 0.6], Screen, 0.3),
            ],
        ),
        FilterPreset::new(
            "Rise",
            vec![
                brightness(1.05),
                sepia(0.2),
                contrast(0.9),
                saturation(0.9),
                tint([0.93, 0.77, 0.56], SoftLight, 0.3),
            ],
        ),
        FilterPreset::new(
            "Sutro",
            vec![
                sepia(0.4),
                contrast(1.2),
                brightness(0.9),
                saturation(1.4),
                Effect::HueRotate { degrees: -10.0 },
                tint([0.5, 0.3, 0.5], Multiply, 0.65),
                vignette(0.7, 0.25),
            ],
        ),
        FilterPreset::new(
            "Toaster",
            vec![
                contrast(1.5),
                brightness(0.9),
                tint([1.0, 0.55, 0.3], Multiply, 0.85),
                tint([0.5, 0.1, 0.0], Screen, 0.5),
                vignette(0.6, 0.3),
            ],
        ),
        FilterPreset::new(
            "Valencia",
            vec![
                contrast(1.08),
                brightness(1.08),
                sepia(0.08),
                tint([0.96, 0.75, 0.6], SoftLight, 0.3),
            ],
        ),
        FilterPreset::new(
            "Walden",
            vec![
                brightness(1.1),
                Effect::HueRotate { degrees: -10.0 },
                sepia(0.3),
                saturation(1.6),
                tint([0.8, 0.8, 0.0], Screen, 0.3),
            ],
        ),
        FilterPreset::new(
            "Willow",
            vec![
                Effect::Grayscale { amount: 1.0 },
                contrast(0.85),
                brightness(0.9),
                tint([0.83, 0.78, 0.76], Overlay, 0.5),
            ],
        ),
        FilterPreset::new(
            "X-Pro II",
            vec![
                sepia(0.3),
                Effect::ToneCurve(ToneCurve {
                    red: curve(&[[0.0, 0.0], [0.3, 0.2], [0.7, 0.85], [1.0, 1.0]]),
                    green: curve(&[[0.0, 0.0], [0.3, 0.22], [0.7, 0.82], [1.0, 1.0]]),
                    blue: curve(&[[0.0, 0.13], [1.0, 0.85]]),
                    master: None,
                }),
                vignette(0.6, 0.3),
            ],
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn registry_has_twenty_unique_presets_including_named_ones() {
        let r = PresetRegistry::builtin();
        assert_eq!(r.len(), 20);
        for name in ["1977", "Amaro", "Gotham", "Hefe", "Lord Kelvin", "Sutro", "Toaster", "Willow"] {
            r.get(name).unwrap();
        }
    }

    #[test]
    fn unknown_preset_lists_available() {
        let msg = PresetRegistry::builtin().get("Nope").unwrap_err().to_string();
        assert!(msg.contains("Toaster") && msg.contains("1977"), "{msg}");
    }

    #[test]
    fn identity_curve_preset_is_a_no_op() {
        let p = FilterPreset::new("id", vec![Effect::ToneCurve(ToneCurve::default())]);
        let img = Image::from_fn(6, 4, |x, y| [x as f64 / 5.0, y as f64 / 3.0, 0.5]);
        assert_eq!(p.apply(&img).unwrap(), img);
    }

    #[test]
    fn grayscale_plus_contrast_equalizes_channels() {
        let p = FilterPreset::new(
            "inkwell-like",
            vec![Effect::Grayscale { amount: 1.0 }, Effect::Contrast { factor: 1.3 }],
        );
        let img = Image::from_fn(8, 8, |x, y| [x as f64 / 7.0, y as f64 / 7.0, 0.3]);
        let out = p.apply(&img).unwrap();
        for px in out.pixels().chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn intensity_zero_is_identity_for_every_preset() {
        let img = Image::from_fn(9, 7, |x, y| [x as f64 / 8.0, 0.4, y as f64 / 6.0]);
        for p in PresetRegistry::builtin().with_intensity(0.0).unwrap().presets() {
            assert_eq!(p.apply(&img).unwrap(), img, "{}", p.name);
        }
    }

    #[test]
    fn distance_to_original_grows_with_intensity() {
        let img = Image::from_fn(12, 12, |x, y| {
            [x as f64 / 11.0, y as f64 / 11.0, ((x + y) % 5) as f64 / 4.0]
        });
        for p in PresetRegistry::builtin().presets() {
            let mut last = -1.0;
            for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let d = p.with_intensity(t).apply(&img).unwrap().mean_abs_diff(&img);
                assert!(d >= last, "{} at {t}: {d} < {last}", p.name);
                last = d;
            }
            assert!(last > 0.0, "{} changes nothing", p.name);
        }
    }

    #[test]
    fn json_round_trip_and_rejections() {
        let r = PresetRegistry::builtin();
        assert_eq!(PresetRegistry::from_json(&r.to_json()).unwrap(), r);

        let single = r#"{"name": "warm", "intensity": 0.5, "effects": [{"kind": "brightness", "factor": 1.2}]}"#;
        let one = PresetRegistry::from_json(single).unwrap();
        assert_eq!(one.presets()[0].intensity, 0.5);

        let empty = r#"{"name": "x", "effects": []}"#;
        assert!(PresetRegistry::from_json(empty).is_err());
        let dup = r#"[{"name": "x", "effects": [{"kind": "grayscale"}]}, {"name": "x", "effects": [{"kind": "grayscale"}]}]"#;
        assert!(PresetRegistry::from_json(dup).is_err());
        let bad_kind = r#"{"name": "x", "effects": [{"kind": "posterize"}]}"#;
        assert!(PresetRegistry::from_json(bad_kind).is_err());
    }

    #[test]
    fn slugs_are_directory_safe() {
        assert_eq!(slug("Lord Kelvin"), "lord-kelvin");
        assert_eq!(slug("X-Pro II"), "x-pro-ii");
        assert_eq!(slug("1977"), "1977");
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0.0f64..=1.0, w * h * 3)
                .prop_map(move |px| Image::new(w, h, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_range(img in arb_image(), idx in 0usize..20, t in 0.0f64..=1.0) {
            let r = PresetRegistry::builtin();
            let out = r.presets()[idx].with_intensity(t).apply(&img).unwrap();
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!((out.width(), out.height()), (img.width(), img.height()));
        }

        #[test]
        fn grayscale_presets_preserve_luma_order(a in proptest::array::uniform3(0.0f64..=1.0), b in proptest::array::uniform3(0.0f64..=1.0)) {
            use super::super::effect::luma;
            let r = PresetRegistry::builtin();
            let img = Image::new(2, 1, vec![a[0], a[1], a[2], b[0], b[1], b[2]]).unwrap();
            for name in ["Gotham", "Willow", "Inkwell"] {
                let out = r.apply(name, &img).unwrap();
                let (la, lb) = (luma(a), luma(b));
                let (oa, ob) = (luma(out.pixel(0, 0)), luma(out.pixel(1, 0)));
                if la <= lb {
                    prop_assert!(oa <= ob + 1e-12, "{name}: {la} <= {lb} but {oa} > {ob}");
                }
            }
        }

        #[test]
        fn presets_survive_serialization(idx in 0usize..20, t in 0.0f64..=1.0) {
            let p = PresetRegistry::builtin().presets()[idx].with_intensity(t);
            let back: FilterPreset = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}

//! Procedural 10-class shape corpus, so experiments need no downloads.
//!
//! Each image is one anti-aliased geometric shape over a striped, noisy
//! background. The class is the shape; position, size, rotation and colours
//! are random.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, CLEAN};
use crate::filters::luma;
use crate::image::Image;

/// Class names, in sorted order so folder loading reproduces the indices.
pub const SHAPES: [&str; 10] = [
    "cross", "diamond", "disk", "frame", "half_disk", "plus", "ring", "square", "triangle",
    "two_dots",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSpec {
    pub size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

impl Default for DeskSpec {
    fn default() -> Self {
        DeskSpec {
            size: 32,
            train_per_class: 200,
            val_per_class: 50,
            seed: 0,
        }
    }
}

/// splitmix64 step, used to derive independent per-image seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train and validation splits, quantized to 8 bits like PNG files.
pub fn desk_corpus(spec: &DeskSpec) -> (Dataset, Dataset) {
    let classes: Vec<String> = SHAPES.iter().map(|s| s.to_string()).collect();
    let make = |split: u64, per_class: usize| {
        let mut samples = Vec::with_capacity(per_class * SHAPES.len());
        for class in 0..SHAPES.len() {
            for i in 0..per_class {
                let salt = (split << 48) | ((class as u64) << 32) | i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, salt));
                samples.push(Sample {
                    image: render(class, spec.size, &mut rng).quantized(),
                    label: class,
                    preset: CLEAN.to_string(),
                });
            }
        }
        Dataset::new(classes.clone(), samples)
    };
    (make(1, spec.train_per_class), make(2, spec.val_per_class))
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Whether local coordinates `(u, v)` (shape radius = 1) fall inside `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    let plus = |u: f64, v: f64| (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95);
    match SHAPES[class] {
        "cross" => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            plus(s * (u - v), s * (u + v))
        }
        "diamond" => u.abs() + v.abs() <= 1.0,
        "disk" => r2 <= 0.8,
        "frame" => {
            let m = u.abs().max(v.abs());
            (0.5..=0.85).contains(&m)
        }
        "half_disk" => r2 <= 1.0 && v >= 0.1,
        "plus" => plus(u, v),
        "ring" => (0.35..=1.0).contains(&r2),
        "square" => u.abs().max(v.abs()) <= 0.75,
        "triangle" => v <= 0.65 && u.abs() <= (v + 0.95) * 0.6,
        "two_dots" => (u - 0.55).powi(2) + v * v <= 0.16 || (u + 0.55).powi(2) + v * v <= 0.16,
        _ => unreachable!("class index out of range"),
    }
}

pub fn render(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let bg = hsv(rng.gen(), rng.gen_range(0.15..0.7), rng.gen_range(0.3..0.85));
    let fg = loop {
        let c = hsv(rng.gen(), rng.gen_range(0.3..0.9), rng.gen_range(0.25..1.0));
        if (luma(c) - luma(bg)).abs() >= 0.1 {
            break c;
        }
    };
    let s = size as f64;
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let radius = rng.gen_range(0.24..0.34) * s;
    let angle: f64 = rng.gen_range(-0.35..0.35);
    let (sin, cos) = angle.sin_cos();
    let stripe_angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (ss, sc) = stripe_angle.sin_cos();
    let freq = rng.gen_range(0.3..1.2);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.03..0.12);
    let noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.03..0.03)).collect();

    const SUB: usize = 3;
    Image::from_fn(size, size, |x, y| {
        let mut cover = 0.0;
        for sy in 0..SUB {
            for sx in 0..SUB {
                let px = x as f64 + (sx as f64 + 0.5) / SUB as f64 - cx;
                let py = y as f64 + (sy as f64 + 0.5) / SUB as f64 - cy;
                let u = (cos * px + sin * py) / radius;
                let v = (-sin * px + cos * py) / radius;
                if inside(class, u, v) {
                    cover += 1.0;
                }
            }
        }
        let cover = cover / (SUB * SUB) as f64;
        let texture = amp * (freq * (sc * x as f64 + ss * y as f64) + phase).sin() + noise[y * size + x];
        [0, 1, 2].map(|c| {
            let b = (bg[c] + texture).clamp(0.0, 1.0);
            b + (fg[c] - b) * cover
        })
    })
}

use destyle_core::filters::{
    generate_corpus, luma, BlendMode, CorpusMode, CorpusOptions, Effect, FilterPreset, PresetRegistry,
};
use destyle_core::Image;
use proptest::prelude::*;

fn image_from(width: usize, height: usize, data: &[f64]) -> Image {
    Image::new(width, height, data.to_vec()).unwrap()
}

fn any_image() -> impl Strategy<Value = Image> {
    (1usize..7, 1usize..7).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f64..=1.0, w * h * 3).prop_map(move |d| image_from(w, h, &d))
    })
}

fn any_effect() -> impl Strategy<Value = Effect> {
    prop_oneof![
        (0.0f64..4.0).prop_map(|factor| Effect::Brightness { factor }),
        (0.0f64..4.0).prop_map(|factor| Effect::Contrast { factor }),
        (0.0f64..4.0).prop_map(|factor| Effect::Saturation { factor }),
        (0.0f64..=1.0).prop_map(|amount| Effect::Grayscale { amount }),
        (0.0f64..=1.0).prop_map(|amount| Effect::Sepia { amount }),
        (-360.0f64..360.0).prop_map(|degrees| Effect::HueRotate { degrees }),
        (prop::array::uniform3(0.0f64..=1.0), 0.0f64..=1.0, 0usize..4).prop_map(|(color, opacity, m)| {
            let mode = [BlendMode::Normal, BlendMode::Multiply, BlendMode::Screen, BlendMode::Overlay][m];
            Effect::TintBlend { color, mode, opacity }
        }),
        (0.0f64..=1.0, 0.0f64..0.99).prop_map(|(strength, radius)| Effect::Vignette { strength, radius }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn presets_stay_in_unit_range(img in any_image()) {
        let reg = PresetRegistry::builtin();
        for p in reg.presets() {
            let out = p.apply(&img).unwrap();
            prop_assert_eq!((out.width(), out.height()), (img.width(), img.height()));
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)), "{}", p.name);
        }
    }

    #[test]
    fn effects_keep_size_range_and_serialize(effect in any_effect(), img in any_image()) {
        let out = effect.apply(&img).unwrap();
        prop_assert_eq!(out.pixels().len(), img.pixels().len());
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let text = serde_json::to_string(&effect).unwrap();
        prop_assert_eq!(serde_json::from_str::<Effect>(&text).unwrap(), effect);
    }

    #[test]
    fn grayscale_presets_keep_luma_order(a in prop::array::uniform3(0.0f64..=1.0), b in prop::array::uniform3(0.0f64..=1.0)) {
        let reg = PresetRegistry::builtin();
        let (lo, hi) = if luma(a) <= luma(b) { (a, b) } else { (b, a) };
        let (ilo, ihi) = (Image::filled(6, 6, lo), Image::filled(6, 6, hi));
        for name in ["Gotham", "Willow", "Inkwell"] {
            let (olo, ohi) = (reg.apply(name, &ilo).unwrap(), reg.apply(name, &ihi).unwrap());
            for y in 0..6 {
                for x in 0..6 {
                    prop_assert!(luma(olo.pixel(x, y)) <= luma(ohi.pixel(x, y)) + 1e-12, "{name} at ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn registry_round_trips_through_json() {
    let reg = PresetRegistry::builtin();
    let back = PresetRegistry::from_json(&reg.to_json()).unwrap();
    assert_eq!(back, reg);
    assert_eq!(back.to_json(), reg.to_json());
}

#[test]
fn registry_rejects_duplicates_and_empty() {
    let p = FilterPreset::new("x", vec![Effect::Grayscale { amount: 1.0 }]);
    assert!(PresetRegistry::new(vec![p.clone(), p]).is_err());
    assert!(PresetRegistry::new(vec![]).is_err());
}

fn write_tree(dir: &std::path::Path, classes: usize, per_class: usize) {
    for c in 0..classes {
        for i in 0..per_class {
            let img = Image::from_fn(8, 8, |x, y| {
                let v = ((x + y * 3 + i * 5 + c * 7) % 11) as f64 / 10.0;
                [v, 1.0 - v, (v * 0.5 + c as f64 * 0.1).min(1.0)]
            });
            img.save_png(&dir.join(format!("class{c}/img{i:02}.png"))).unwrap();
        }
    }
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_corpus_is_cartesian_and_worker_independent() {
    let src = tempfile::tempdir().unwrap();
    write_tree(src.path(), 2, 5);
    let reg = PresetRegistry::builtin();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = generate_corpus(src.path(), a.path(), &reg, &CorpusOptions { workers: 1, ..Default::default() }).unwrap();
    let m3 = generate_corpus(src.path(), b.path(), &reg, &CorpusOptions { workers: 3, ..Default::default() }).unwrap();
    assert_eq!(m1.entries.len(), 10 * 20);
    assert_eq!(m1, m3);
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
}

#[test]
fn mini_corpus_is_seeded() {
    let src = tempfile::tempdir().unwrap();
    write_tree(src.path(), 2, 30);
    let reg = PresetRegistry::builtin();
    let opts = CorpusOptions { mode: CorpusMode::Mini, seed: 4, fraction: 0.1, workers: 2 };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = generate_corpus(src.path(), a.path(), &reg, &opts).unwrap();
    let m2 = generate_corpus(src.path(), b.path(), &reg, &CorpusOptions { workers: 1, ..opts }).unwrap();
    assert_eq!(m1.entries.len(), 6);
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(m1, m2);
}

#[test]
fn empty_class_folder_is_an_error() {
    let src = tempfile::tempdir().unwrap();
    write_tree(src.path(), 1, 2);
    std::fs::create_dir_all(src.path().join("empty")).unwrap();
    let dst = tempfile::tempdir().unwrap();
    let err = generate_corpus(src.path(), dst.path(), &PresetRegistry::builtin(), &Default::default()).unwrap_err();
    assert_eq!(err.code(), "E_EMPTY");
}

#[test]
fn unreadable_images_are_skipped_with_a_warning() {
    let src = tempfile::tempdir().unwrap();
    write_tree(src.path(), 1, 2);
    std::fs::write(src.path().join("class0/broken.png"), b"not a png").unwrap();
    let dst = tempfile::tempdir().unwrap();
    let reg = PresetRegistry::new(vec![FilterPreset::new("g", vec![Effect::Grayscale { amount: 1.0 }])]).unwrap();
    let m = generate_corpus(src.path(), dst.path(), &reg, &Default::default()).unwrap();
    assert_eq!(m.entries.len(), 3);
    assert_eq!(m.entries.iter().filter(|e| e.warning.is_some()).count(), 1);
}

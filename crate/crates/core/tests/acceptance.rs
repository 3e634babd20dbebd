//! End-to-end acceptance run on the desk corpus. Prints one PASS/FAIL line
//! per criterion. Exits nonzero on a failure only when
//! `DESTYLE_ACCEPTANCE_STRICT=1`, so that measured shortfalls stay visible
//! without breaking the ordinary test run.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use destyle_core::analysis::{feature_divergence, hard_k};
use destyle_core::checkpoint::{self, Checkpoint};
use destyle_core::data::split_classes;
use destyle_core::desk::{desk_corpus, DeskSpec};
use destyle_core::destyle::{attach, gds_apply, DsMode};
use destyle_core::experiment::{
    evaluate, filtered_groups, run_with_inputs, ClassSplit, DataConfig, EvalConfig, ExperimentConfig, Half, OptimizerSpec,
    Regime, RunInputs, TrainSet,
};
use destyle_core::filters::{generate_corpus, CorpusMode, CorpusOptions, Effect, FilterPreset, PresetRegistry};
use destyle_core::network::Network;
use destyle_core::norm::{adain, identity_code, instance_norm, AffineParams, StyleCode};
use destyle_core::report::Report;
use destyle_core::train::OptimizerConfig;
use destyle_core::{channel_moments, MomentScope, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
/// The parametric preset swept over intensity.
const SWEEP: &str = "Lord Kelvin";

struct Line {
    pass: bool,
    text: String,
}

fn check(pass: bool, text: impl Into<String>) -> Line {
    Line { pass, text: text.into() }
}

fn pts(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn schedule(lr: f64, epochs: usize, weight_decay: f64) -> OptimizerSpec {
    OptimizerSpec::Explicit(OptimizerConfig {
        lr,
        epochs,
        decay_epoch: Some((epochs * 3 / 4).max(1)),
        weight_decay,
        ..OptimizerConfig::finetune_schedule()
    })
}

fn config(regime: Regime, seed: u64, optimizer: OptimizerSpec, init: Option<&Path>) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        regime,
        data: DataConfig {
            train_set: if regime == Regime::Scratch { TrainSet::Clean } else { TrainSet::Mini },
            mini_fraction: 1.0,
            ..Default::default()
        },
        presets: None,
        network: Default::default(),
        init_checkpoint: init.map(Path::to_path_buf),
        sites: None,
        ds_width: 48,
        optimizer,
        eval: EvalConfig::default(),
        out: None,
    }
}

fn split_half() -> ClassSplit {
    ClassSplit {
        fraction: 0.5,
        seed: 0,
        train_on: Half::A,
    }
}

fn top1(r: &Report, row: &str) -> f64 {
    r.row(row).map(|r| r.top1).unwrap_or(f64::NAN)
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Full grayscale or a heavy colour tint.
fn is_strong(p: &FilterPreset) -> bool {
    p.effects.iter().any(|e| match e {
        Effect::Grayscale { amount } => *amount >= 1.0,
        Effect::TintBlend { opacity, .. } => *opacity >= 0.5,
        _ => false,
    })
}

/// Only small global adjustments and tone curves.
fn is_mild_curve(p: &FilterPreset) -> bool {
    p.effects.iter().all(|e| match e {
        Effect::Brightness { factor } | Effect::Contrast { factor } | Effect::Saturation { factor } => {
            (0.9..=1.15).contains(factor)
        }
        Effect::ToneCurve(_) => true,
        Effect::TintBlend { opacity, .. } => *opacity <= 0.3,
        Effect::Sepia { amount } => *amount <= 0.2,
        Effect::Vignette { strength, .. } => *strength <= 0.2,
        Effect::Grayscale { .. } | Effect::HueRotate { .. } => false,
    })
}

fn numeric_core() -> Line {
    let mut worst = ("", 0.0f64);
    let mut cases = 0;
    for seed in 0..5 {
        for (name, err) in common::op_grad_errors(seed) {
            cases += 1;
            if !(err <= worst.1) {
                worst = (name, err);
            }
        }
    }
    check(
        worst.1 <= common::TOLERANCE,
        format!("{cases} op/seed gradient checks, worst rel. err {:.2e} ({})", worst.1, worst.0),
    )
}

fn normalization_identities() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut mean_err, mut std_err, mut adain_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut bitwise = true;
    for _ in 0..5 {
        let x = Tensor::randn(&[3, 4, 6, 6], 2.0, &mut rng);
        let g = Tensor::randn(&[4], 2.0, &mut rng).into_data();
        let b = Tensor::randn(&[4], 2.0, &mut rng).into_data();
        let y = instance_norm(&x, &AffineParams::new(g.clone(), b.clone()).unwrap(), 1e-12).unwrap();
        let m = channel_moments(&y, MomentScope::PerInstance).unwrap();
        for (i, (mu, var)) in m.mean.iter().zip(&m.variance).enumerate() {
            mean_err = mean_err.max((mu - b[i % 4]).abs());
            std_err = std_err.max((var.sqrt() - g[i % 4].abs()).abs());
        }
        let codes: Vec<StyleCode> = (0..3).map(|i| identity_code(&x, i, 0.0).unwrap()).collect();
        adain_err = adain_err.max(adain(&x, &codes, 0.0).unwrap().max_abs_diff(&x));
        let zero = vec![StyleCode::zeros(4); 3];
        bitwise &= gds_apply(&x, &zero).unwrap().data() == x.data();
    }
    check(
        mean_err <= 1e-9 && std_err <= 1e-6 && adain_err <= 1e-9 && bitwise,
        format!(
            "IN mean err {mean_err:.1e}, std err {std_err:.1e}; adain self-code err {adain_err:.1e}; zero-code skip bitwise {bitwise}"
        ),
    )
}

fn identity_at_init(base: &Network, inputs: &RunInputs) -> Line {
    let mut net = base.clone();
    attach(&mut net, &Regime::Gds.default_sites(), DsMode::Gds, 48, 0).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let (x, _) = inputs.val.batch(&idx).unwrap();
    let diff = net.logits(&x).unwrap().max_abs_diff(&base.logits(&x).unwrap());
    let ratio = net.trainable_param_count() as f64 / net.base_param_count() as f64;
    check(
        diff <= 1e-12 && ratio < 0.1,
        format!("max logit diff {diff:.1e}; trainable/base parameters {:.2}%", 100.0 * ratio),
    )
}

fn drop_reproduction(base: &Report, registry: &PresetRegistry) -> Line {
    let clean = top1(base, "clean");
    let filtered = top1(base, "mean");
    let accs: Vec<(String, f64)> = base.preset_rows().map(|r| (r.preset.clone(), r.top1)).collect();
    let hard = hard_k(&accs, clean, 10);
    let group = |pick: fn(&FilterPreset) -> bool| -> Vec<(String, f64)> {
        let names: Vec<&str> = registry.presets().iter().filter(|p| pick(p)).map(|p| p.name.as_str()).collect();
        accs.iter().filter(|(n, _)| names.contains(&n.as_str())).cloned().collect()
    };
    let (strong, mild) = (group(is_strong), group(is_mild_curve));
    // Every strong preset must lose strictly more accuracy than every mild one.
    let drops = |g: &[(String, f64)]| {
        let mut d: Vec<(f64, String)> = g.iter().map(|a| (clean - a.1, a.0.clone())).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        d
    };
    let (strong, mild) = (drops(&strong), drops(&mild));
    let ranked = match (strong.first(), mild.last()) {
        (Some(s), Some(m)) => s.0 > m.0,
        _ => false,
    };
    let list = |d: &[(f64, String)]| d.iter().map(|(v, n)| format!("{n} {}", pts(*v))).collect::<Vec<_>>().join(", ");
    check(
        clean >= 0.85 && clean - filtered >= 0.05 && ranked,
        format!(
            "clean {} filtered {} drop {} pts; strong drops [{}] must all exceed mild drops [{}]; hard-10 {:?}",
            pts(clean),
            pts(filtered),
            pts(clean - filtered),
            list(&strong),
            list(&mild),
            hard
        ),
    )
}

fn divergence_accuracy(base: &Report) -> Line {
    match base.spearman {
        Some(rho) => check(rho < -0.3, format!("Spearman(block5 divergence, top1) = {rho:.3} over {} presets", base.preset_rows().count())),
        None => check(false, "no rank correlation recorded"),
    }
}

fn divergence_monotonicity(base: &Network, inputs: &RunInputs) -> Line {
    let preset = inputs.registry.get(SWEEP).unwrap().clone();
    let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
    let divs: Vec<f64> = levels
        .iter()
        .map(|&t| {
            let reg = PresetRegistry::new(vec![preset.with_intensity(t)]).unwrap();
            let (_, filtered) = filtered_groups(&inputs.val, &reg).unwrap().remove(0);
            feature_divergence(base, 5, &inputs.val, &filtered, 64).unwrap()
        })
        .collect();
    let max = divs.iter().cloned().fold(0.0, f64::max);
    let inversions: Vec<f64> = divs.windows(2).filter(|w| w[1] < w[0]).map(|w| w[0] - w[1]).collect();
    let ok_inv = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 0.05 * max);
    let shown: Vec<String> = divs.iter().map(|d| format!("{d:.4}")).collect();
    check(
        divs[0] == 0.0 && ok_inv,
        format!("{SWEEP} at 0/.25/.5/.75/1: [{}]; inversions {}", shown.join(", "), inversions.len()),
    )
}

struct Trained {
    gds: Vec<Report>,
    resin: Vec<Report>,
}

fn gds_recovery(base: &Report, ckpt: &Path, inputs: &RunInputs) -> (Line, Trained) {
    let mut trained = Trained {
        gds: Vec::new(),
        resin: Vec::new(),
    };
    for &seed in &SEEDS {
        for regime in [Regime::Gds, Regime::Resin] {
            let cfg = config(regime, seed, schedule(0.03, 6, 0.0), Some(ckpt));
            let out = run_with_inputs(&cfg, inputs, None).unwrap();
            let rep = out.record.metrics["val"].clone();
            match regime {
                Regime::Gds => trained.gds.push(rep),
                _ => trained.resin.push(rep),
            }
        }
    }
    let (clean, filtered) = (top1(base, "clean"), top1(base, "mean"));
    let mean = |rs: &[Report], row: &str| rs.iter().map(|r| top1(r, row)).sum::<f64>() / rs.len() as f64;
    let (g_f, g_c) = (mean(&trained.gds, "mean"), mean(&trained.gds, "clean"));
    let recovery = (g_f - filtered) / (clean - filtered);
    let order_ok = trained.gds.iter().zip(&trained.resin).all(|(g, r)| {
        let (g, r) = (top1(g, "mean"), top1(r, "mean"));
        g - r >= -0.01 && r - filtered >= -0.01
    });
    let per_seed: Vec<String> = trained
        .gds
        .iter()
        .zip(&trained.resin)
        .map(|(g, r)| format!("{}/{}", pts(top1(g, "mean")), pts(top1(r, "mean"))))
        .collect();
    let line = check(
        recovery >= 0.5 && clean - g_c <= 0.02 && order_ok,
        format!(
            "gap recovered {:.0}%, clean {} -> {}; filtered gds/resin per seed [{}] vs base {}",
            100.0 * recovery,
            pts(clean),
            pts(g_c),
            per_seed.join(", "),
            pts(filtered)
        ),
    );
    (line, trained)
}

fn no_skip_destruction(base: &Report, ckpt: &Path, inputs: &RunInputs) -> Line {
    let untrained = |regime| {
        let cfg = config(regime, 0, schedule(0.03, 0, 0.0), Some(ckpt));
        top1(&run_with_inputs(&cfg, inputs, None).unwrap().record.metrics["val"], "mean")
    };
    let filtered = top1(base, "mean");
    let (noskip, skip) = (untrained(Regime::ResinNoskip), untrained(Regime::Resin));
    check(
        filtered - noskip >= 0.20 && skip == filtered,
        format!(
            "filtered base {} / no-skip {} / zero-init skip {}",
            pts(filtered),
            pts(noskip),
            pts(skip)
        ),
    )
}

fn unseen_classes(base: &Network, ckpt: &Path, inputs: &RunInputs) -> Line {
    let (_, unseen) = split_classes(inputs.val.num_classes(), 0.5, 0).unwrap();
    let held_out = inputs.val.filter_labels(&unseen);
    let before = top1(&evaluate(base, &held_out, &inputs.registry, &EvalConfig::default(), false).unwrap(), "mean");
    let gain = |regime, lr| {
        let mut cfg = config(regime, 0, schedule(lr, 6, 0.0), Some(ckpt));
        cfg.data.class_split = Some(split_half());
        top1(&run_with_inputs(&cfg, inputs, None).unwrap().record.metrics["val_unseen"], "mean") - before
    };
    let (g, f) = (gain(Regime::Gds, 0.03), gain(Regime::Ft, 0.01));
    check(
        g >= 0.02 && f < g,
        format!("held-out filtered gain: gds {} pts, ft {} pts (base {})", pts(g), pts(f), pts(before)),
    )
}

fn adabn_comparison(base: &Report, ckpt: &Path, inputs: &RunInputs, trained: &Trained) -> Line {
    let mut cfg = config(Regime::Adabn, 0, schedule(0.03, 0, 0.0), Some(ckpt));
    cfg.data.train_set = TrainSet::Clean;
    let adabn = top1(&run_with_inputs(&cfg, inputs, None).unwrap().record.metrics["val"], "mean");
    let gds = trained.gds.iter().map(|r| top1(r, "mean")).sum::<f64>() / trained.gds.len() as f64;
    let filtered = top1(base, "mean");
    check(
        filtered < adabn && adabn < gds,
        format!("filtered base {} < adabn {} < gds mean {}", pts(filtered), pts(adabn), pts(gds)),
    )
}

fn determinism(base: &Network, base_report: &Report, registry: &PresetRegistry) -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut notes = Vec::new();

    let spec = DeskSpec {
        train_per_class: 4,
        val_per_class: 2,
        ..DeskSpec::default()
    };
    let (train, _) = desk_corpus(&spec);
    train.save_folder(&root.join("src")).unwrap();
    let corpus = |workers, mode| {
        let dst = root.join(format!("corpus_{workers}_{mode:?}"));
        let opts = CorpusOptions {
            mode,
            seed: 3,
            fraction: 0.5,
            workers,
        };
        generate_corpus(&root.join("src"), &dst, registry, &opts).unwrap();
        files(&dst)
    };
    let corpus_ok = corpus(1, CorpusMode::Full) == corpus(4, CorpusMode::Full)
        && corpus(1, CorpusMode::Mini) == corpus(3, CorpusMode::Mini);
    notes.push(format!("corpus across workers {corpus_ok}"));

    let mut cfg = config(Regime::Scratch, 5, schedule(0.05, 2, 5e-4), None);
    cfg.data.source = destyle_core::experiment::DataSource::Desk {
        size: 32,
        train_per_class: 6,
        val_per_class: 2,
        seed: 1,
    };
    cfg.network.channels = vec![4, 4, 6, 6, 6];
    let inputs = RunInputs::load(&cfg).unwrap();
    let outputs = |name: &str| {
        let dir = root.join(name);
        run_with_inputs(&cfg, &inputs, Some(&dir)).unwrap();
        let mut f = files(&dir);
        let rec = f.remove(Path::new("run_record.json")).unwrap();
        let mut rec: serde_json::Value = serde_json::from_slice(&rec).unwrap();
        rec["wall_clock_secs"] = 0.0.into();
        (f, rec)
    };
    let training_ok = outputs("run_a") == outputs("run_b");
    notes.push(format!("training outputs {training_ok}"));

    let bytes = checkpoint::to_bytes(base);
    let again = checkpoint::to_bytes(&Checkpoint::from_bytes(&bytes).unwrap().into_network().unwrap());
    let ckpt_ok = bytes == again;
    notes.push(format!("checkpoint save/load/save {ckpt_ok}"));

    let presets_ok = PresetRegistry::from_json(&registry.to_json()).unwrap() == *registry;
    let csv = Report::from_csv(&base_report.to_csv()).unwrap();
    let json = Report::from_json(&base_report.to_json()).unwrap();
    let reports_ok = csv == *base_report && json == *base_report && csv.to_csv() == base_report.to_csv();
    notes.push(format!("preset parse {presets_ok}, report parse {reports_ok}"));

    check(corpus_ok && training_ok && ckpt_ok && presets_ok && reports_ok, notes.join("; "))
}

fn main() {
    let strict = std::env::var("DESTYLE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, t: Instant, line: Line| {
        let tag = if line.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!line.pass);
        println!("[{tag}] {n:>2} {name}: {} ({:.1} s)", line.text, t.elapsed().as_secs_f64());
    };

    let t = Instant::now();
    report(1, "numeric core", t, numeric_core());
    let t = Instant::now();
    report(2, "normalization identities", t, normalization_identities());

    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let scratch = config(Regime::Scratch, 0, schedule(0.05, 8, 5e-4), None);
    let inputs = RunInputs::load(&scratch).unwrap();
    let base_dir = tmp.path().join("base");
    let outcome = run_with_inputs(&scratch, &inputs, Some(&base_dir)).unwrap();
    let (base, base_report) = (outcome.network, outcome.record.metrics["val"].clone());
    let ckpt = base_dir.join("model.ckpt");
    let base_secs = t.elapsed().as_secs_f64();

    let t3 = Instant::now();
    report(3, "identity at init", t3, identity_at_init(&base, &inputs));
    println!("     base network trained and scored in {base_secs:.1} s");
    report(4, "filtered accuracy drop", t, drop_reproduction(&base_report, &inputs.registry));
    report(5, "divergence vs accuracy", t, divergence_accuracy(&base_report));
    let t = Instant::now();
    report(6, "divergence monotonicity", t, divergence_monotonicity(&base, &inputs));
    let t = Instant::now();
    let (line, trained) = gds_recovery(&base_report, &ckpt, &inputs);
    report(7, "gDS recovery and regime order", t, line);
    let t = Instant::now();
    report(8, "no-skip destruction", t, no_skip_destruction(&base_report, &ckpt, &inputs));
    let t = Instant::now();
    report(9, "unseen-class generalization", t, unseen_classes(&base, &ckpt, &inputs));
    let t = Instant::now();
    report(10, "AdaBN comparison", t, adabn_comparison(&base_report, &ckpt, &inputs, &trained));
    let t = Instant::now();
    report(11, "determinism and round trips", t, determinism(&base, &base_report, &inputs.registry));

    println!("{} of 11 criteria passed", 11 - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

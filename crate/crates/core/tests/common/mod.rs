#![allow(dead_code)]

use destyle_core::norm::{adain_var, batch_norm_var, instance_norm_var, BatchStats, BnMode};
use destyle_core::{grad_check, ChannelMoments, MomentScope, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-3;
const H: f64 = 1e-5;

/// Random values kept away from zero so ReLU kinks stay out of reach.
fn away(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar readout `Σ r ⊙ y` with fixed random weights.
fn readout(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let r = Tensor::randn(t.value(y).shape(), 1.0, &mut rng);
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    t.sum(p)
}

type Check = Box<dyn Fn(&mut Tape, Var, &mut ChaCha8Rng) -> Result<Var>>;

/// Builds each op around the checked input; the other operands are fixed
/// per seed by replaying the same generator.
fn cases() -> Vec<(&'static str, Vec<usize>, Check)> {
    let x4 = vec![2, 3, 4, 4];
    let mut v: Vec<(&'static str, Vec<usize>, Check)> = Vec::new();
    v.push(("conv2d/input", x4.clone(), Box::new(|t, x, r| {
        let k = t.constant(Tensor::randn(&[4, 3, 3, 3], 0.5, r));
        t.conv2d(x, k, 1, 1)
    })));
    v.push(("conv2d/kernel", vec![4, 3, 3, 3], Box::new(|t, k, r| {
        let x = t.constant(Tensor::randn(&[2, 3, 5, 5], 1.0, r));
        t.conv2d(x, k, 2, 0)
    })));
    v.push(("linear/input", vec![3, 5], Box::new(|t, x, r| {
        let w = t.constant(Tensor::randn(&[5, 4], 0.5, r));
        let b = t.constant(Tensor::randn(&[4], 0.5, r));
        t.linear(x, w, b)
    })));
    v.push(("linear/weight", vec![5, 4], Box::new(|t, w, r| {
        let x = t.constant(Tensor::randn(&[3, 5], 1.0, r));
        let b = t.constant(Tensor::randn(&[4], 0.5, r));
        t.linear(x, w, b)
    })));
    v.push(("linear/bias", vec![4], Box::new(|t, b, r| {
        let x = t.constant(Tensor::randn(&[3, 5], 1.0, r));
        let w = t.constant(Tensor::randn(&[5, 4], 0.5, r));
        t.linear(x, w, b)
    })));
    v.push(("relu", x4.clone(), Box::new(|t, x, _| t.relu(x))));
    v.push(("avg_pool2d", x4.clone(), Box::new(|t, x, _| t.avg_pool2d(x, 2))));
    v.push(("global_avg_pool", x4.clone(), Box::new(|t, x, _| t.global_avg_pool(x))));
    v.push(("reshape", x4.clone(), Box::new(|t, x, _| t.reshape(x, vec![6, 16]))));
    v.push(("flatten", x4.clone(), Box::new(|t, x, _| t.flatten(x))));
    v.push(("softmax_cross_entropy", vec![4, 5], Box::new(|t, x, r| {
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
        t.softmax_cross_entropy(x, &labels)
    })));
    v.push(("standardize/instance", x4.clone(), Box::new(|t, x, _| t.standardize(x, MomentScope::PerInstance, 1e-5))));
    v.push(("standardize/batch", x4.clone(), Box::new(|t, x, _| t.standardize(x, MomentScope::PerBatch, 1e-5))));
    v.push(("channel_affine/input", x4.clone(), Box::new(|t, x, r| {
        let g = t.constant(Tensor::randn(&[3], 1.0, r));
        let b = t.constant(Tensor::randn(&[3], 1.0, r));
        t.channel_affine(x, g, b)
    })));
    v.push(("channel_affine/gamma", vec![3], Box::new(|t, g, r| {
        let x = t.constant(Tensor::randn(&[2, 3, 4, 4], 1.0, r));
        let b = t.constant(Tensor::randn(&[3], 1.0, r));
        t.channel_affine(x, g, b)
    })));
    v.push(("channel_affine/beta", vec![3], Box::new(|t, b, r| {
        let x = t.constant(Tensor::randn(&[2, 3, 4, 4], 1.0, r));
        let g = t.constant(Tensor::randn(&[3], 1.0, r));
        t.channel_affine(x, g, b)
    })));
    v.push(("instance_affine/input", x4.clone(), Box::new(|t, x, r| {
        let s = t.constant(Tensor::randn(&[2, 3], 1.0, r));
        let b = t.constant(Tensor::randn(&[2, 3], 1.0, r));
        t.instance_affine(x, s, b)
    })));
    v.push(("instance_affine/scale", vec![2, 3], Box::new(|t, s, r| {
        let x = t.constant(Tensor::randn(&[2, 3, 4, 4], 1.0, r));
        let b = t.constant(Tensor::randn(&[2, 3], 1.0, r));
        t.instance_affine(x, s, b)
    })));
    v.push(("instance_affine/shift", vec![2, 3], Box::new(|t, b, r| {
        let x = t.constant(Tensor::randn(&[2, 3, 4, 4], 1.0, r));
        let s = t.constant(Tensor::randn(&[2, 3], 1.0, r));
        t.instance_affine(x, s, b)
    })));
    v.push(("add", x4.clone(), Box::new(|t, x, r| {
        let y = t.constant(Tensor::randn(&[2, 3, 4, 4], 1.0, r));
        let s = t.add(x, y)?;
        t.add(s, x)
    })));
    v.push(("mul", x4.clone(), Box::new(|t, x, r| {
        let y = t.constant(Tensor::randn(&[2, 3, 4, 4], 1.0, r));
        let p = t.mul(x, y)?;
        t.mul(p, x)
    })));
    v.push(("scale", x4.clone(), Box::new(|t, x, _| t.scale(x, -1.7))));
    v.push(("sum", x4.clone(), Box::new(|t, x, _| {
        let sq = t.mul(x, x)?;
        t.sum(sq)
    })));
    v.push(("slice_axis1", x4.clone(), Box::new(|t, x, _| t.slice_axis1(x, 1, 3))));
    v.push(("concat_axis1", x4.clone(), Box::new(|t, x, r| {
        let y = t.constant(Tensor::randn(&[2, 2, 4, 4], 1.0, r));
        let a = t.concat_axis1(x, y)?;
        let b = t.slice_axis1(x, 0, 1)?;
        t.concat_axis1(b, a)
    })));
    v.push(("instance_norm", x4.clone(), Box::new(|t, x, r| {
        let g = t.constant(Tensor::randn(&[3], 1.0, r));
        let b = t.constant(Tensor::randn(&[3], 1.0, r));
        instance_norm_var(t, x, g, b, 1e-5)
    })));
    v.push(("batch_norm/train", x4.clone(), Box::new(|t, x, r| {
        let g = t.constant(Tensor::randn(&[3], 1.0, r));
        let b = t.constant(Tensor::randn(&[3], 1.0, r));
        Ok(batch_norm_var(t, x, g, b, &BatchStats::new(3), BnMode::Train)?.0)
    })));
    v.push(("batch_norm/eval", x4.clone(), Box::new(|t, x, r| {
        let g = t.constant(Tensor::randn(&[3], 1.0, r));
        let b = t.constant(Tensor::randn(&[3], 1.0, r));
        let mut stats = BatchStats::new(3);
        stats
            .set(&ChannelMoments { mean: vec![0.1, -0.2, 0.3], variance: vec![0.5, 1.5, 2.0] })
            .unwrap();
        Ok(batch_norm_var(t, x, g, b, &stats, BnMode::Eval)?.0)
    })));
    v.push(("adain/input", x4.clone(), Box::new(|t, x, r| {
        let s = t.constant(Tensor::randn(&[2, 3], 1.0, r));
        let b = t.constant(Tensor::randn(&[2, 3], 1.0, r));
        adain_var(t, x, s, b, 1e-5)
    })));
    v
}

/// Worst relative gradient error of every differentiable op for one seed.
pub fn op_grad_errors(seed: u64) -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, build))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + i as u64);
            let point = away(&shape, &mut rng);
            let replay = rng.clone();
            let err = grad_check(
                |t, x| {
                    let mut r = replay.clone();
                    let y = build(t, x, &mut r)?;
                    readout(t, y, seed)
                },
                &point,
                H,
            )
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, err)
        })
        .collect()
}

use destyle_core::destyle::{attach, DsMode};
use destyle_core::network::{Arch, Mode, NetSpec, Network, Site};

/// A tiny network with recorded BN statistics.
pub fn tiny_net(arch: Arch, seed: u64) -> Network {
    let mut net = Network::new(NetSpec {
        arch,
        channels: vec![4, 4, 6, 6, 6],
        num_classes: 3,
        input_size: 32,
        seed,
    })
    .unwrap();
    let x = tiny_batch(4, seed + 100);
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, &x, Mode::Train).unwrap();
    net.apply_bn(&f.bn).unwrap();
    net
}

pub fn tiny_batch(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, 3, 32, 32], 0.0, 1.0, &mut rng)
}

fn loss_of(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, x, Mode::Train).unwrap();
    let l = tape.softmax_cross_entropy(f.logits, labels).unwrap();
    tape.value(l).data()[0]
}

/// Worst relative error of the whole-network loss gradient with respect
/// to every DS head weight, heads randomized first.
pub fn ds_head_grad_error(seed: u64) -> f64 {
    let mut net = tiny_net(Arch::Base, seed);
    attach(&mut net, &[Site::Block(1), Site::Block(2)], DsMode::Gds, 5, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let heads: Vec<String> = net
        .params()
        .names()
        .filter(|n| n.starts_with("ds/head") && n.ends_with("/weight"))
        .map(str::to_string)
        .collect();
    assert_eq!(heads.len(), 2);
    for name in &heads {
        let p = net.params_mut().param_mut(name).unwrap();
        p.value = Tensor::randn(p.value.shape(), 0.2, &mut rng);
    }
    let x = tiny_batch(2, seed + 200);
    let labels = [0, 2];

    let mut tape = Tape::new();
    let f = net.forward(&mut tape, &x, Mode::Train).unwrap();
    let l = tape.softmax_cross_entropy(f.logits, &labels).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for name in &heads {
        let var = f.bindings.iter().find(|(n, _)| n == name).unwrap().1;
        let analytic = grads.get_or_zeros(var);
        for i in 0..analytic.len() {
            let bumped = |delta: f64| {
                let mut n = net.clone();
                let p = n.params_mut().param_mut(name).unwrap();
                let mut d = p.value.data().to_vec();
                d[i] += delta;
                p.value = Tensor::new(p.value.shape().to_vec(), d).unwrap();
                loss_of(&n, &x, &labels)
            };
            let numeric = (bumped(H) - bumped(-H)) / (2.0 * H);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    worst
}

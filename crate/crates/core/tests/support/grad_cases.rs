//! Seeded finite-difference cases for every differentiable operation.

use canopy_core::enhance::{
    downsample_graph, loss_rec_graph, uncertainty_graph, upsample_graph, EnhancerArch, EnhancerParams,
};
use canopy_core::height_head::{head_forward_graph, masked_mse_graph, HeadArch, HeadParams, NormMode};
use canopy_core::numerics::gradcheck::{check_inputs, check_params, project, GradCheck};
use canopy_core::numerics::{ParamSet, ZERO_FILL};
use canopy_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

type Input = (Vec<usize>, Vec<f64>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero so kinks at the origin are never crossed.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    (shape.to_vec(), v)
}

fn positive(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Input {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect())
}

fn conv2d(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..=k / 2 + 1);
    let (h, w) = (r.gen_range(k..k + 4), r.gen_range(k..k + 4));
    let with_bias = r.gen_bool(0.5);
    let inputs = vec![
        uniform(&mut r, &[ci, h, w]),
        uniform(&mut r, &[co, ci, k, k]),
        uniform(&mut r, &[co]),
    ];
    check_inputs(&inputs, EPS, |g, v| {
        let y = g.conv2d(v[0], v[1], with_bias.then_some(v[2]), stride, pad)?;
        project(g, y, seed)
    })
}

fn depthwise(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let c = r.gen_range(1..=3);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..=3);
    let pad = r.gen_range(0..=k / 2);
    let (h, w) = (r.gen_range(k..k + 5), r.gen_range(k..k + 5));
    let kshape = if r.gen_bool(0.5) { vec![c, k, k] } else { vec![k, k] };
    let inputs = vec![uniform(&mut r, &[c, h, w]), uniform(&mut r, &kshape)];
    check_inputs(&inputs, EPS, |g, v| {
        let y = g.depthwise_conv(v[0], v[1], stride, pad)?;
        project(g, y, seed)
    })
}

fn softmax(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=3)];
    let axis = r.gen_range(0..3);
    let mut x = uniform(&mut r, &shape);
    x.1.iter_mut().for_each(|v| *v *= 3.0);
    check_inputs(&[x], EPS, |g, v| {
        let y = g.softmax(v[0], axis)?;
        project(g, y, seed)
    })
}

fn unary(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let shape = [2, r.gen_range(1..=4), r.gen_range(1..=4)];
    let inputs = vec![off_zero(&mut r, &shape), positive(&mut r, &shape, 0.2, 3.0)];
    check_inputs(&inputs, EPS, |g, v| {
        let a = g.relu(v[0])?;
        let b = g.sigmoid(v[0])?;
        let c = g.log(v[1])?;
        let d = g.square(v[0])?;
        let e = g.exp(v[0])?;
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        let s = g.add(ab, cd)?;
        let s = g.add(s, e)?;
        project(g, s, seed)
    })
}

fn clamp(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=3), r.gen_range(2..=5)];
    // Bounds at ±0.5 while inputs avoid a band around them.
    let n: usize = shape.iter().product();
    let x: Vec<f64> = (0..n)
        .map(|_| {
            let m = if r.gen_bool(0.5) {
                r.gen_range(0.0..0.45)
            } else {
                r.gen_range(0.55..1.5)
            };
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    check_inputs(&[(shape.to_vec(), x)], EPS, |g, v| {
        let y = g.clamp(v[0], -0.5, 0.5);
        project(g, y, seed)
    })
}

fn binary(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4)];
    let inputs = vec![
        uniform(&mut r, &shape),
        uniform(&mut r, &shape),
        positive(&mut r, &shape, 0.5, 2.0),
    ];
    let (f, o) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
    check_inputs(&inputs, EPS, |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(v[0], v[2])?;
        let m = g.mul(a, s)?;
        let d = g.div(m, v[2])?;
        let d = g.scale(d, f);
        let d = g.add_scalar(d, o);
        project(g, d, seed)
    })
}

fn reductions(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let (c, h, w) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
    let inputs = vec![uniform(&mut r, &[c, h, w])];
    check_inputs(&inputs, EPS, |g, v| {
        let sc = g.sum_channels(v[0])?;
        let flat = g.reshape(sc, &[h * w])?;
        let p = project(g, flat, seed)?;
        let sq = g.square(v[0])?;
        let m = g.mean(sq);
        let s = g.sum(v[0]);
        let t = g.add(p, m)?;
        let s2 = g.square(s)?;
        g.add(t, s2)
    })
}

fn gather(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let n = r.gen_range(2..=12);
    let m = r.gen_range(1..=20);
    let index: Vec<usize> = (0..m)
        .map(|_| if r.gen_bool(0.2) { ZERO_FILL } else { r.gen_range(0..n) })
        .collect();
    let inputs = vec![uniform(&mut r, &[n])];
    check_inputs(&inputs, EPS, |g, v| {
        let y = g.gather(v[0], &[m], index.clone())?;
        let y2 = g.square(y)?;
        project(g, y2, seed)
    })
}

fn concat(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let axis = r.gen_range(0..3);
    let mut base = [r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
    let parts = r.gen_range(1..=3);
    let inputs: Vec<Input> = (0..parts)
        .map(|_| {
            base[axis] = r.gen_range(1..=3);
            uniform(&mut r, &base)
        })
        .collect();
    check_inputs(&inputs, EPS, |g, v| {
        let y = g.concat(v, axis)?;
        project(g, y, seed)
    })
}

fn reassemble(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let (c, h, w) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
    let k = [1, 3, 5][r.gen_range(0..3)];
    let f = r.gen_range(1..=3);
    let inputs = vec![uniform(&mut r, &[c, h, w]), uniform(&mut r, &[f * f * k * k, h, w])];
    check_inputs(&inputs, EPS, |g, v| {
        let y = g.reassemble(v[0], v[1], k, f)?;
        project(g, y, seed)
    })
}

fn batch_norm(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let (c, h, w) = (r.gen_range(1..=3), r.gen_range(2..=4), r.gen_range(2..=4));
    let inputs = vec![
        uniform(&mut r, &[c, h, w]),
        uniform(&mut r, &[c]),
        uniform(&mut r, &[c]),
    ];
    check_inputs(&inputs, EPS, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
        project(g, y, seed)
    })
}

fn loss_rec(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let n = r.gen_range(1..=3);
    let mut inputs = Vec::new();
    for _ in 0..n {
        let (c, h, w) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
        inputs.push(uniform(&mut r, &[c, h, w]));
        inputs.push(uniform(&mut r, &[c, h, w]));
        inputs.push(positive(&mut r, &[1, h, w], 0.3, 3.0));
    }
    check_inputs(&inputs, EPS, |g, v| {
        let lf: Vec<_> = v.chunks(3).map(|t| t[0]).collect();
        let rec: Vec<_> = v.chunks(3).map(|t| t[1]).collect();
        let s: Vec<_> = v.chunks(3).map(|t| t[2]).collect();
        loss_rec_graph(g, &lf, &rec, &s)
    })
}

fn jitter(params: &mut ParamSet<f64>, r: &mut ChaCha8Rng, scale: f64) {
    for t in params.iter_mut().filter(|t| t.trainable) {
        t.values.iter_mut().for_each(|v| *v += r.gen_range(-scale..scale));
    }
}

/// The whole enhancer objective: upsample, downsample, uncertainty, loss.
fn enhancer_chain(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let c = r.gen_range(1..=2);
    let f = [2, 4][r.gen_range(0..2)];
    let arch = EnhancerArch {
        channels: c,
        stages: vec![f],
        k_up: 3,
        c_mid: 3,
        k_enc: 3,
    };
    let mut p = EnhancerParams::<f64>::init(arch, seed)?;
    jitter(&mut p.params, &mut r, 0.3);
    let (h, w) = (r.gen_range(2..=4), r.gen_range(2..=4));
    let lf = uniform(&mut r, &[c, h, w]);
    let view = uniform(&mut r, &[c, h, w]);
    let arch = p.arch.clone();
    check_params(&p.params, EPS, |g, params, bound| {
        let p = EnhancerParams {
            arch: arch.clone(),
            params: params.clone(),
        };
        let x = g.constant(&lf.0, lf.1.clone())?;
        let tgt = g.constant(&view.0, view.1.clone())?;
        let hf = upsample_graph(g, &p, bound, x)?;
        let rec = downsample_graph(g, &p, bound, hf)?;
        let s = uncertainty_graph(g, &p, bound, tgt)?;
        loss_rec_graph(g, &[tgt], &[rec], &[s])
    })
}

/// Masked MSE of a two-window batch through the head in training mode.
fn head_loss(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let c = r.gen_range(1..=3);
    let arch = HeadArch {
        channels: c,
        hidden1: 3,
        hidden2: 2,
        h_max: 30.0,
    };
    let mut p = HeadParams::<f64>::init(arch, seed)?;
    jitter(&mut p.params, &mut r, 0.2);
    let mut batch = Vec::new();
    for _ in 0..2 {
        let (h, w) = (r.gen_range(2..=4), r.gen_range(2..=4));
        let x = uniform(&mut r, &[c, h, w]);
        let t: Vec<f64> = (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        let mut m: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.7)).collect();
        m[0] = true;
        batch.push((x, t, m));
    }
    let arch = p.arch.clone();
    check_params(&p.params, EPS, |g, params, bound| {
        let p = HeadParams {
            arch: arch.clone(),
            params: params.clone(),
        };
        let xs = batch
            .iter()
            .map(|(x, _, _)| g.constant(&x.0, x.1.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = head_forward_graph(g, &p, bound, &xs, NormMode::Train)?;
        let items: Vec<_> = out
            .units
            .iter()
            .zip(&batch)
            .map(|(&u, (_, t, m))| (u, t.as_slice(), m.as_slice()))
            .collect();
        masked_mse_graph(g, &items)
    })
}

pub type Case = fn(u64) -> Result<GradCheck>;

pub fn all_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d as Case),
        ("depthwise_conv", depthwise),
        ("softmax", softmax),
        ("unary", unary),
        ("clamp", clamp),
        ("binary", binary),
        ("reductions", reductions),
        ("gather", gather),
        ("concat", concat),
        ("reassemble", reassemble),
        ("batch_norm", batch_norm),
        ("loss_rec", loss_rec),
        ("enhancer_chain", enhancer_chain),
        ("head_loss", head_loss),
    ]
}

/// Worst relative error of `case` over the seeded runs.
pub fn worst(case: Case) -> Result<GradCheck> {
    let mut acc = GradCheck {
        max_rel_err: 0.0,
        coords: 0,
    };
    for seed in 0..SEEDS {
        let g = case(seed)?;
        acc.max_rel_err = acc.max_rel_err.max(g.max_rel_err);
        acc.coords += g.coords;
    }
    Ok(acc)
}

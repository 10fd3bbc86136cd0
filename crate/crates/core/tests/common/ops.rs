//! Random-shape finite-difference cases, one entry per differentiable operation.

use rand::Rng;
use visrep::tensor::{Activation, NormMode};

use super::{gradcheck, rand_away_from_zero, randn, rng};

pub type Case = fn(u64) -> f64;

fn dim(r: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

pub fn add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 4), dim(&mut r, 1, 5)];
    let (a, b) = (randn(&s, &mut r), randn(&s, &mut r));
    gradcheck(&[a, b], seed, |_, v| v[0].add(&v[1]).unwrap())
}

pub fn sub(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 4), dim(&mut r, 1, 5)];
    let (a, b) = (randn(&s, &mut r), randn(&s, &mut r));
    gradcheck(&[a, b], seed, |_, v| v[0].sub(&v[1]).unwrap())
}

pub fn mul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 4), dim(&mut r, 1, 5), dim(&mut r, 1, 3)];
    let (a, b) = (randn(&s, &mut r), randn(&s, &mut r));
    gradcheck(&[a, b], seed, |_, v| v[0].mul(&v[1]).unwrap().mul(&v[0]).unwrap())
}

pub fn scale_and_shift(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 6)];
    let c: f64 = r.random_range(-2.0..2.0);
    let a = randn(&s, &mut r);
    gradcheck(&[a], seed, move |_, v| v[0].scale(c).add_scalar(0.3))
}

pub fn add_bias(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 4), dim(&mut r, 1, 3), dim(&mut r, 1, 5)];
    let x = randn(&s, &mut r);
    let b = randn(&s[1..], &mut r);
    gradcheck(&[x, b], seed, |_, v| v[0].add_bias(&v[1]).unwrap())
}

pub fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (dim(&mut r, 1, 5), dim(&mut r, 1, 5), dim(&mut r, 1, 5));
    let (a, b) = (randn(&[m, k], &mut r), randn(&[k, n], &mut r));
    gradcheck(&[a, b], seed, |_, v| v[0].matmul(&v[1]).unwrap())
}

pub fn bmm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (bt, h, m, k, n) =
        (dim(&mut r, 1, 3), dim(&mut r, 1, 2), dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let trans = seed.is_multiple_of(2);
    let a = randn(&[bt, h, m, k], &mut r);
    let b = if trans { randn(&[bt, h, n, k], &mut r) } else { randn(&[bt, h, k, n], &mut r) };
    gradcheck(&[a, b], seed, move |_, v| v[0].bmm(&v[1], trans).unwrap())
}

pub fn reshape_permute(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3)];
    let x = randn(&s, &mut r);
    let perms = [[0, 2, 1, 3], [3, 2, 1, 0], [1, 0, 3, 2], [0, 1, 3, 2]];
    let p = perms[(seed % 4) as usize];
    gradcheck(&[x], seed, move |_, v| {
        let y = v[0].permute(&p).unwrap();
        let n = y.value().len();
        y.reshape(&[n]).unwrap().mul(&y.reshape(&[n]).unwrap()).unwrap()
    })
}

pub fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c, o) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let (h, w) = (dim(&mut r, 3, 6), dim(&mut r, 3, 6));
    let k = [1, 2, 3][(seed % 3) as usize];
    let stride = dim(&mut r, 1, 2);
    let pad = dim(&mut r, 0, 1);
    let x = randn(&[b, c, h, w], &mut r);
    let kern = randn(&[o, c, k, k], &mut r);
    gradcheck(&[x, kern], seed, move |_, v| v[0].conv2d(&v[1], stride, pad).unwrap())
}

pub fn avg_pool2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 3, 6), dim(&mut r, 3, 6)];
    let (k, stride) = ([(3, 1), (2, 2), (3, 2)])[(seed % 3) as usize];
    let x = randn(&s, &mut r);
    gradcheck(&[x], seed, move |_, v| v[0].avg_pool2d(k, stride, k / 2).unwrap())
}

pub fn batch_norm_train(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c, sp) = (dim(&mut r, 2, 4), dim(&mut r, 1, 3), dim(&mut r, 1, 4));
    let x = randn(&[b, c, sp], &mut r);
    let g = randn(&[c], &mut r);
    let be = randn(&[c], &mut r);
    gradcheck(&[x, g, be], seed, |_, v| v[0].batch_norm(&v[1], &v[2], 1e-3, NormMode::Batch).unwrap().0)
}

pub fn batch_norm_infer(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let x = randn(&[b, c, 2, 2], &mut r);
    let g = randn(&[c], &mut r);
    let be = randn(&[c], &mut r);
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    gradcheck(&[x, g, be], seed, move |_, v| {
        v[0].batch_norm(&v[1], &v[2], 1e-3, NormMode::Running { mean: &mean, var: &var }).unwrap().0
    })
}

pub fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (dim(&mut r, 1, 4), dim(&mut r, 3, 6));
    // spread-out rows: a near-constant row makes the finite difference itself inaccurate
    let x = randn(&[n, d], &mut r).map(|v| v * 3.0);
    let g = randn(&[d], &mut r);
    let b = randn(&[d], &mut r);
    gradcheck(&[x, g, b], seed, |_, v| v[0].layer_norm(&v[1], &v[2], 1e-6).unwrap())
}

fn pointwise(seed: u64, kind: Activation) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 4), dim(&mut r, 1, 6)];
    let x = rand_away_from_zero(&s, &mut r).map(|v| v * 3.0);
    gradcheck(&[x], seed, move |_, v| v[0].activation(kind).unwrap())
}

pub fn swish(seed: u64) -> f64 {
    pointwise(seed, Activation::Swish)
}
pub fn relu(seed: u64) -> f64 {
    pointwise(seed, Activation::Relu)
}
pub fn gelu(seed: u64) -> f64 {
    pointwise(seed, Activation::Gelu)
}
pub fn sigmoid(seed: u64) -> f64 {
    pointwise(seed, Activation::Sigmoid)
}
pub fn softmax(seed: u64) -> f64 {
    pointwise(seed, Activation::Softmax)
}

pub fn reductions(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = [dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 3)];
    let axis = (seed % 3) as usize;
    let x = randn(&s, &mut r);
    gradcheck(&[x], seed, move |_, v| {
        let a = v[0].sum_axis(axis).unwrap();
        let b = v[0].mean_axis(axis).unwrap();
        a.mul(&b).unwrap()
    })
}

pub fn global_avg_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s: Vec<usize> = if seed.is_multiple_of(2) {
        vec![dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 4)]
    } else {
        vec![dim(&mut r, 1, 3), dim(&mut r, 1, 5), dim(&mut r, 1, 4)]
    };
    let x = randn(&s, &mut r);
    gradcheck(&[x], seed, |_, v| {
        let p = v[0].global_avg_pool().unwrap();
        p.mul(&p).unwrap()
    })
}

pub fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c) = (dim(&mut r, 1, 5), dim(&mut r, 2, 6));
    let x = randn(&[b, c], &mut r).map(|v| v * 3.0);
    let labels: Vec<Option<usize>> =
        (0..b).map(|i| if i > 0 && r.random_bool(0.3) { None } else { Some(r.random_range(0..c)) }).collect();
    gradcheck(&[x], seed, move |_, v| v[0].cross_entropy_masked(&labels).unwrap())
}

pub fn l2_normalize(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (dim(&mut r, 1, 4), dim(&mut r, 2, 6));
    let x = randn(&[n, d], &mut r).map(|v| v + 0.5);
    gradcheck(&[x], seed, |_, v| v[0].l2_normalize().unwrap())
}

pub fn gather_rows(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, m) = (dim(&mut r, 1, 5), dim(&mut r, 1, 4), dim(&mut r, 1, 7));
    let idx: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
    let x = randn(&[n, d], &mut r);
    gradcheck(&[x], seed, move |_, v| {
        let g = v[0].gather_rows(&idx).unwrap();
        g.mul(&g).unwrap()
    })
}

pub fn tokens(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, t, d) = (dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let x = randn(&[b, t, d], &mut r);
    let tok = randn(&[d], &mut r);
    let index = r.random_range(0..=t);
    gradcheck(&[x, tok], seed, move |_, v| {
        let seq = v[0].prepend_token(&v[1]).unwrap();
        let picked = seq.take_token(index).unwrap();
        let pooled = seq.global_avg_pool().unwrap();
        picked.mul(&pooled).unwrap()
    })
}

pub fn attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, t, h) = (dim(&mut r, 1, 2), dim(&mut r, 1, 4), dim(&mut r, 1, 2));
    let d = h * dim(&mut r, 1, 3);
    let x = randn(&[b, t, d], &mut r);
    let wq = randn(&[d, d], &mut r);
    let wk = randn(&[d, d], &mut r);
    let wv = randn(&[d, d], &mut r);
    gradcheck(&[x, wq, wk, wv], seed, move |_, v| {
        let proj = |w: usize| {
            v[0].reshape(&[b * t, d])
                .unwrap()
                .matmul(&v[w])
                .unwrap()
                .reshape(&[b, t, h, d / h])
                .unwrap()
                .permute(&[0, 2, 1, 3])
                .unwrap()
        };
        let (q, k, vv) = (proj(1), proj(2), proj(3));
        let attn = q.bmm(&k, true).unwrap().scale(1.0 / ((d / h) as f64).sqrt()).softmax().unwrap();
        attn.bmm(&vv, false).unwrap()
    })
}

pub fn triplet_hinge(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (dim(&mut r, 3, 6), dim(&mut r, 2, 5));
    let x = rand_away_from_zero(&[n, d], &mut r).map(|v| v * 2.0);
    let a: Vec<usize> = (0..4).map(|_| r.random_range(0..n)).collect();
    let p: Vec<usize> = (0..4).map(|_| r.random_range(0..n)).collect();
    let q: Vec<usize> = (0..4).map(|_| r.random_range(0..n)).collect();
    gradcheck(&[x], seed, move |_, v| {
        let e = v[0].l2_normalize().unwrap();
        let ga = e.gather_rows(&a).unwrap();
        let dp = ga.sub(&e.gather_rows(&p).unwrap()).unwrap();
        let dn = ga.sub(&e.gather_rows(&q).unwrap()).unwrap();
        let dap = dp.mul(&dp).unwrap().sum_axis(1).unwrap();
        let dan = dn.mul(&dn).unwrap().sum_axis(1).unwrap();
        // shift keeps the hinge safely active
        dap.sub(&dan).unwrap().add_scalar(5.0).relu().mean()
    })
}

pub const ALL: &[(&str, Case)] = &[
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("scale_and_shift", scale_and_shift),
    ("add_bias", add_bias),
    ("matmul", matmul),
    ("bmm", bmm),
    ("reshape_permute", reshape_permute),
    ("conv2d", conv2d),
    ("avg_pool2d", avg_pool2d),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_infer", batch_norm_infer),
    ("layer_norm", layer_norm),
    ("swish", swish),
    ("relu", relu),
    ("gelu", gelu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("reductions", reductions),
    ("global_avg_pool", global_avg_pool),
    ("cross_entropy", cross_entropy),
    ("l2_normalize", l2_normalize),
    ("gather_rows", gather_rows),
    ("tokens", tokens),
    ("attention", attention),
    ("triplet_hinge", triplet_hinge),
];

pub fn worst_over_shapes(case: Case, shapes: u64) -> f64 {
    (0..shapes).map(|s| case(1000 + s)).fold(0.0, f64::max)
}

//! Test-only helpers: a straightforward f64 re-implementation of the model
//! forward pass and losses, used as an oracle independent of the tape.

#![allow(dead_code)]

use std::collections::BTreeMap;

use freeadv::gradcheck::finite_diff_grad;
use freeadv::models::{init_params, Architecture, ConvLayer, LossKind, Model, ModelSpec, ParamSet};
use freeadv::{CostLedger, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameters as f64 arrays, keyed by name.
pub type Params64 = BTreeMap<String, Vec<f64>>;

pub fn params_to_f64(params: &ParamSet) -> Params64 {
    params
        .iter()
        .map(|p| (p.name.clone(), p.value.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Activation of one example: `[C, H, W]` or a flat vector (`c == 0`).
#[derive(Clone, Debug)]
struct Act {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

fn conv(a: &Act, w: &[f64], b: &[f64], out_c: usize, k: usize, stride: usize, pad: usize) -> Act {
    let oh = (a.h + 2 * pad - k) / stride + 1;
    let ow = (a.w + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = b[o];
                for ci in 0..a.c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (x * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= a.h as isize || ix >= a.w as isize {
                                continue;
                            }
                            let xv = a.v[(ci * a.h + iy as usize) * a.w + ix as usize];
                            s += xv * w[((o * a.c + ci) * k + dy) * k + dx];
                        }
                    }
                }
                v[(o * oh + y) * ow + x] = s;
            }
        }
    }
    Act { c: out_c, h: oh, w: ow, v }
}

fn maxpool(a: &Act, p: usize) -> Act {
    let oh = (a.h - p) / p + 1;
    let ow = (a.w - p) / p + 1;
    let mut v = vec![0.0; a.c * oh * ow];
    for c in 0..a.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..p {
                    for dx in 0..p {
                        m = m.max(a.v[(c * a.h + y * p + dy) * a.w + x * p + dx]);
                    }
                }
                v[(c * oh + y) * ow + x] = m;
            }
        }
    }
    Act { c: a.c, h: oh, w: ow, v }
}

fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut z = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..out {
            z[j] += xi * w[i * out + j];
        }
    }
    z
}

fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Logits of one example.
pub fn logits_one(spec: &ModelSpec, p: &Params64, x: &[f64]) -> Vec<f64> {
    let s = spec.input_scale as f64;
    let scaled: Vec<f64> = x.iter().map(|&v| v * s).collect();
    let (flat, hidden) = match &spec.arch {
        Architecture::Mlp { hidden } => (scaled, hidden),
        Architecture::ConvNet { convs, hidden } => {
            let mut a = Act {
                c: spec.input_shape[0],
                h: spec.input_shape[1],
                w: spec.input_shape[2],
                v: scaled,
            };
            for (i, layer) in convs.iter().enumerate() {
                let w = &p[&format!("conv{}.weight", i + 1)];
                let b = &p[&format!("conv{}.bias", i + 1)];
                a = conv(&a, w, b, layer.channels, layer.kernel, layer.stride, layer.padding);
                relu(&mut a.v);
                if let Some(ps) = layer.pool {
                    a = maxpool(&a, ps);
                }
            }
            (a.v, hidden)
        }
    };
    let mut h = flat;
    for i in 0..hidden.len() {
        h = dense(&h, &p[&format!("fc{}.weight", i + 1)], &p[&format!("fc{}.bias", i + 1)]);
        relu(&mut h);
    }
    dense(&h, &p["head.weight"], &p["head.bias"])
}

pub fn loss_one(z: &[f64], y: usize, loss: LossKind) -> f64 {
    match loss {
        LossKind::CrossEntropy => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y]
        }
        LossKind::CarliniWagner => {
            let other = z
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            other - z[y]
        }
    }
}

/// Mean loss over a batch `x` laid out `[B, ..input_shape]`.
pub fn reference_loss(spec: &ModelSpec, p: &Params64, x: &[f64], labels: &[usize], loss: LossKind) -> f64 {
    let row = spec.input_shape.iter().product::<usize>();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| loss_one(&logits_one(spec, p, &x[i * row..(i + 1) * row]), y, loss))
        .sum();
    total / labels.len() as f64
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `|a - b| <= atol + rtol * |b|`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * b.abs()
}

pub fn mlp_4_8_3() -> ModelSpec {
    ModelSpec {
        arch: Architecture::Mlp { hidden: vec![8] },
        input_shape: vec![4],
        classes: 3,
        input_scale: 1.0,
    }
}

/// Two conv layers (one pooled, one strided), one hidden dense layer.
pub fn small_convnet() -> ModelSpec {
    ModelSpec {
        arch: Architecture::ConvNet {
            convs: vec![
                ConvLayer { channels: 3, kernel: 3, stride: 1, padding: 1, pool: Some(2) },
                ConvLayer { channels: 4, kernel: 3, stride: 2, padding: 1, pool: None },
            ],
            hidden: vec![5],
        },
        input_shape: vec![2, 6, 6],
        classes: 3,
        input_scale: 0.5,
    }
}

/// Outcome of comparing tape gradients against finite differences.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub coordinates: usize,
    pub failures: Vec<String>,
    pub max_abs_err: f64,
}

/// Initialized parameters jittered so biases are non-zero, a random input
/// batch in `[0, 1]` and random labels, all from `seed`.
pub fn random_problem(spec: &ModelSpec, seed: u64, batch: usize) -> (ParamSet, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d2c_5680);
    let params = init_params(spec, seed).unwrap();
    let params = params.map_values(|_, t| {
        let data = t.data().iter().map(|v| v + rng.random_range(-0.1f32..0.1)).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    });
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input_shape);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
    let labels = (0..batch).map(|_| rng.random_range(0..spec.classes)).collect();
    (params, x, labels)
}

/// Compares every parameter and input coordinate of one dual backward pass
/// against central differences of the f64 reference loss.
pub fn check_gradients(spec: &ModelSpec, seed: u64, loss: LossKind, rtol: f64, atol: f64, h: f32) -> GradCheck {
    let model = Model::new(spec.clone()).unwrap();
    let (params, x, labels) = random_problem(spec, seed, 3);
    let ledger = CostLedger::new();
    let grads = model.record(&params, &x, &labels, loss, &ledger).unwrap().backward(&ledger).unwrap();
    let base = params_to_f64(&params);
    let x64 = to_f64(&x);

    let mut out = GradCheck::default();
    let mut compare = |what: &str, analytic: &Tensor, numeric: &Tensor| {
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            out.coordinates += 1;
            let err = (a as f64 - n as f64).abs();
            out.max_abs_err = out.max_abs_err.max(err);
            if !close(a as f64, n as f64, rtol, atol) {
                out.failures.push(format!("{what}[{i}]: tape {a} vs fd {n}"));
            }
        }
    };

    for p in params.iter() {
        let numeric = finite_diff_grad(
            |t| {
                let mut q = base.clone();
                q.insert(p.name.clone(), to_f64(t));
                Ok(reference_loss(spec, &q, &x64, &labels, loss))
            },
            &p.value,
            h,
        )
        .unwrap();
        compare(&p.name, &grads.params[&p.name], &numeric);
    }
    let numeric = finite_diff_grad(|t| Ok(reference_loss(spec, &base, &to_f64(t), &labels, loss)), &x, h).unwrap();
    compare("input", &grads.input, &numeric);
    out
}

/// Largest `f32` displacement from `x` in direction `s` (`+1` / `-1`) that
/// stays within `eps` of `x` in exact arithmetic and inside `[lo, hi]`.
pub fn extreme_coordinate(x: f32, s: f32, eps: f32, lo: f32, hi: f32) -> f32 {
    let target = x as f64 + s as f64 * eps as f64;
    let mut v = target as f32;
    while (v as f64 - x as f64).abs() > eps as f64 {
        v = if s > 0.0 { v.next_down() } else { v.next_up() };
    }
    v.clamp(lo, hi)
}

/// Maximum of the reference loss over all `2^d` corners of the clamped
/// l-inf ball around a single example `x`.
pub fn corner_max_loss(spec: &ModelSpec, p: &Params64, x: &[f32], y: usize, eps: f32, lo: f32, hi: f32, loss: LossKind) -> f64 {
    let d = x.len();
    assert!(d <= 16, "enumeration limited to small inputs");
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << d) {
        let corner: Vec<f64> = (0..d)
            .map(|i| {
                let s = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                extreme_coordinate(x[i], s, eps, lo, hi) as f64
            })
            .collect();
        best = best.max(reference_loss(spec, p, &corner, &[y], loss));
    }
    best
}

/// Binary linear classifier `head.weight: [d, 2]` with random weights.
pub fn random_linear(d: usize, seed: u64) -> (ModelSpec, Model, ParamSet) {
    let spec = ModelSpec {
        arch: Architecture::Mlp { hidden: vec![] },
        input_shape: vec![d],
        classes: 2,
        input_scale: 1.0,
    };
    let model = Model::new(spec.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&spec, seed)
        .unwrap()
        .map_values(|_, t| {
            let data = t.data().iter().map(|_| rng.random_range(-2.0f32..2.0)).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        });
    (spec, model, params)
}

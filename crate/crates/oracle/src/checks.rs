//! Reusable comparisons of the engine against the reference code. Each
//! check reports the worst error seen, or a message naming the first
//! failing case.

use fsq::model::{fire_backward, FireParams, Gradients};
use fsq::ops::{self, ConvSpec};
use fsq::train::cross_entropy;
use fsq::{FireSpec, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{self as oracle, max_relative_error, numeric_gradient, Arr};

/// Finite-difference step for single operators.
pub const OP_EPS: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-3;
/// The whole-model reference runs in f64, so a much smaller step is both
/// accurate and less likely to straddle a ReLU or max-pool kink.
pub const MODEL_EPS: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-2;
/// Denominator floor, so components that are zero analytically compare on
/// an absolute scale.
pub const FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Outcome {
    pub cases: usize,
    pub worst: f64,
}

impl Outcome {
    fn add(&mut self, err: f64) {
        self.cases += 1;
        self.worst = self.worst.max(err);
    }
}

pub type CheckResult = Result<Outcome, String>;

pub fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    random(rng, dims).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Distinct values at least 0.01 apart, so max-pool never sees a tie
/// within the finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - n as f32 * 0.005).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(dims, vals).unwrap()
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn dot(a: &Arr, r: &Arr) -> f64 {
    a.data.iter().zip(&r.data).map(|(x, y)| x * y).sum()
}

fn compare(
    out: &mut Outcome,
    what: &str,
    seed: u64,
    analytic: &Tensor,
    numeric: &[f64],
    floor: f64,
) -> Result<(), String> {
    let err = max_relative_error(&f64s(analytic), numeric, floor);
    out.add(err);
    if err < OP_TOL {
        Ok(())
    } else {
        Err(format!("{what}, seed {seed}: relative error {err:e}"))
    }
}

pub fn conv2d_gradients(seeds: u64) -> CheckResult {
    let mut out = Outcome::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = [1, 3][seed as usize % 2];
        let spec = ConvSpec::square(
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            k,
            1 + seed as usize % 2,
            (seed as usize / 2) % 2,
        );
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let x = random(&mut rng, &[2, spec.in_channels, h, w]);
        let wt = random(&mut rng, &spec.weight_dims());
        let b = random(&mut rng, &[spec.out_channels]);
        let y = ops::conv2d_forward(&x, &wt, &b, &spec).unwrap();
        let r = random(&mut rng, y.dims());
        let g = ops::conv2d_backward(&x, &wt, &spec, &r).unwrap();

        let (xa, wa, ba, ra) = (
            Arr::from_tensor(&x),
            Arr::from_tensor(&wt),
            Arr::from_tensor(&b),
            Arr::from_tensor(&r),
        );
        let (s, p) = (spec.stride, spec.pad);
        let nx = numeric_gradient(&xa, OP_EPS, |v| dot(&oracle::conv2d(v, &wa, &ba, s, p), &ra));
        let nw = numeric_gradient(&wa, OP_EPS, |v| dot(&oracle::conv2d(&xa, v, &ba, s, p), &ra));
        let nb = numeric_gradient(&ba, OP_EPS, |v| dot(&oracle::conv2d(&xa, &wa, v, s, p), &ra));
        compare(&mut out, "conv d_input", seed, &g.d_input, &nx, FLOOR)?;
        compare(
            &mut out,
            "conv d_weight",
            seed,
            g.d_weight.as_ref().unwrap(),
            &nw,
            FLOOR,
        )?;
        compare(&mut out, "conv d_bias", seed, g.d_bias.as_ref().unwrap(), &nb, FLOOR)?;
    }
    Ok(out)
}

pub fn relu_gradient(seeds: u64) -> CheckResult {
    let mut out = Outcome::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_zero(&mut rng, &[2, 3, 4, 4]);
        let r = random(&mut rng, x.dims());
        let analytic = ops::relu_backward(&x, &r).unwrap();
        let ra = Arr::from_tensor(&r);
        let numeric = numeric_gradient(&Arr::from_tensor(&x), OP_EPS, |v| dot(&oracle::relu(v), &ra));
        compare(&mut out, "relu", seed, &analytic, &numeric, FLOOR)?;
    }
    Ok(out)
}

pub fn maxpool_gradient(seeds: u64) -> CheckResult {
    let mut out = Outcome::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = rng.random_range(3..=8);
        let x = distinct(&mut rng, &[2, 2, side, side]);
        let y = ops::maxpool2d(&x, 3, 2).unwrap();
        let r = random(&mut rng, y.dims());
        let analytic = ops::maxpool2d_backward(&x, 3, 2, &r).unwrap();
        let ra = Arr::from_tensor(&r);
        let numeric = numeric_gradient(&Arr::from_tensor(&x), OP_EPS, |v| dot(&oracle::maxpool(v, 3, 2), &ra));
        compare(&mut out, "maxpool", seed, &analytic, &numeric, FLOOR)?;
    }
    Ok(out)
}

pub fn global_avg_pool_gradient(seeds: u64) -> CheckResult {
    let mut out = Outcome::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [
            2,
            rng.random_range(1..=4),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        ];
        let x = random(&mut rng, &dims);
        let r = random(&mut rng, &[2, dims[1]]);
        let analytic = ops::global_avg_pool_backward(&dims, &r).unwrap();
        let ra = Arr::from_tensor(&r);
        let numeric = numeric_gradient(&Arr::from_tensor(&x), OP_EPS, |v| dot(&oracle::global_avg_pool(v), &ra));
        compare(&mut out, "global_avg_pool", seed, &analytic, &numeric, FLOOR)?;
    }
    Ok(out)
}

pub fn dense_gradients(seeds: u64) -> CheckResult {
    let mut out = Outcome::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, f, u) = (
            rng.random_range(1..=4),
            rng.random_range(1..=6),
            rng.random_range(1..=5),
        );
        let x = random(&mut rng, &[n, f]);
        let w = random(&mut rng, &[f, u]);
        let b = random(&mut rng, &[u]);
        let r = random(&mut rng, &[n, u]);
        let g = ops::dense_backward(&x, &w, &r).unwrap();
        let (xa, wa, ba, ra) = (
            Arr::from_tensor(&x),
            Arr::from_tensor(&w),
            Arr::from_tensor(&b),
            Arr::from_tensor(&r),
        );
        let nx = numeric_gradient(&xa, OP_EPS, |v| dot(&oracle::dense(v, &wa, &ba), &ra));
        let nw = numeric_gradient(&wa, OP_EPS, |v| dot(&oracle::dense(&xa, v, &ba), &ra));
        let nb = numeric_gradient(&ba, OP_EPS, |v| dot(&oracle::dense(&xa, &wa, v), &ra));
        compare(&mut out, "dense d_input", seed, &g.d_input, &nx, FLOOR)?;
        compare(
            &mut out,
            "dense d_weight",
            seed,
            g.d_weight.as_ref().unwrap(),
            &nw,
            FLOOR,
        )?;
        compare(&mut out, "dense d_bias", seed, g.d_bias.as_ref().unwrap(), &nb, FLOOR)?;
    }
    Ok(out)
}

pub fn softmax_cross_entropy_gradient(seeds: u64) -> CheckResult {
    let mut out = Outcome::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (rng.random_range(1..=4), rng.random_range(2..=26));
        let z = random(&mut rng, &[n, m]).scale(3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let (_, d_logits) = cross_entropy(&ops::softmax(&z).unwrap(), &labels).unwrap();
        let numeric = numeric_gradient(&Arr::from_tensor(&z), OP_EPS, |v| {
            oracle::cross_entropy(&oracle::softmax(v), &labels)
        });
        compare(&mut out, "softmax+cross-entropy", seed, &d_logits, &numeric, FLOOR)?;
    }
    Ok(out)
}

pub fn dropout_gradient(seeds: u64) -> CheckResult {
    let mut out = Outcome::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rate = rng.random_range(0.0f32..0.9);
        let x = random(&mut rng, &[3, 7]);
        let r = random(&mut rng, x.dims());
        let analytic = ops::dropout_backward(&r, rate, seed).unwrap();
        let ra = Arr::from_tensor(&r);
        // Linear in x for a fixed mask, so the engine forward itself is the
        // function being differentiated. Surviving units scale by up to 10,
        // hence the absolute floor of 1.
        let numeric = numeric_gradient(&Arr::from_tensor(&x), OP_EPS, |v| {
            dot(
                &Arr::from_tensor(&ops::dropout(&v.to_tensor(), rate, seed, true).unwrap()),
                &ra,
            )
        });
        compare(&mut out, "dropout", seed, &analytic, &numeric, 1.0)?;
    }
    Ok(out)
}

pub fn concat_gradient(seeds: u64) -> CheckResult {
    let mut out = Outcome::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let a = random(&mut rng, &[2, ca, 3, 2]);
        let b = random(&mut rng, &[2, cb, 3, 2]);
        let r = random(&mut rng, &[2, ca + cb, 3, 2]);
        let (da, db) = ops::channel_split(&r, ca).unwrap();
        let (aa, ba, ra) = (Arr::from_tensor(&a), Arr::from_tensor(&b), Arr::from_tensor(&r));
        let na = numeric_gradient(&aa, OP_EPS, |v| dot(&oracle::concat(v, &ba), &ra));
        let nb = numeric_gradient(&ba, OP_EPS, |v| dot(&oracle::concat(&aa, v), &ra));
        compare(&mut out, "concat d_a", seed, &da, &na, FLOOR)?;
        compare(&mut out, "concat d_b", seed, &db, &nb, FLOOR)?;
    }
    Ok(out)
}

/// Smallest |pre-activation| inside the module, used to skip draws that sit
/// on a ReLU kink.
fn fire_margin(x: &Arr, p: &[Arr; 6]) -> f64 {
    let pre_s = oracle::conv2d(x, &p[0], &p[1], 1, 0);
    let s = oracle::relu(&pre_s);
    let pre_1 = oracle::conv2d(&s, &p[2], &p[3], 1, 0);
    let pre_3 = oracle::conv2d(&s, &p[4], &p[5], 1, 1);
    [pre_s, pre_1, pre_3]
        .iter()
        .flat_map(|a| a.data.iter())
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min)
}

/// Checks `seeds` accepted draws; draws within 10 steps of a kink are
/// replaced rather than counted.
pub fn fire_gradients(seeds: u64) -> CheckResult {
    let spec = FireSpec::new(2, 3, 2).unwrap();
    let mut out = Outcome::default();
    let mut checked = 0;
    let mut seed = 0;
    while checked < seeds {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = random(&mut rng, &[1, 3, 4, 4]);
        let dims = [
            spec.squeeze_conv(3).weight_dims().to_vec(),
            vec![2],
            spec.expand1x1_conv().weight_dims().to_vec(),
            vec![3],
            spec.expand3x3_conv().weight_dims().to_vec(),
            vec![2],
        ];
        let params: Vec<Tensor> = dims.iter().map(|d| random(&mut rng, d)).collect();
        let pa: [Arr; 6] = std::array::from_fn(|i| Arr::from_tensor(&params[i]));
        let xa = Arr::from_tensor(&x);
        if fire_margin(&xa, &pa) < 10.0 * OP_EPS {
            continue;
        }
        checked += 1;
        let fp = FireParams {
            squeeze_weight: &params[0],
            squeeze_bias: &params[1],
            expand1x1_weight: &params[2],
            expand1x1_bias: &params[3],
            expand3x3_weight: &params[4],
            expand3x3_bias: &params[5],
        };
        let r = random(&mut rng, &[1, 5, 4, 4]);
        let ra = Arr::from_tensor(&r);
        let g = fire_backward(&x, &spec, &fp, &r).unwrap();

        let loss = |x: &Arr, p: &[Arr; 6]| {
            let w = oracle::FireWeights {
                squeeze: (&p[0], &p[1]),
                expand1x1: (&p[2], &p[3]),
                expand3x3: (&p[4], &p[5]),
            };
            dot(&oracle::fire(x, &w), &ra)
        };
        let nx = numeric_gradient(&xa, OP_EPS, |v| loss(v, &pa));
        compare(&mut out, "fire d_input", seed, &g.d_input, &nx, FLOOR)?;
        for i in 0..6 {
            let numeric = numeric_gradient(&pa[i], OP_EPS, |v| {
                let mut p = pa.clone();
                p[i] = v.clone();
                loss(&xa, &p)
            });
            compare(
                &mut out,
                &format!("fire parameter {i}"),
                seed,
                &g.d_params[i],
                &numeric,
                FLOOR,
            )?;
        }
    }
    Ok(out)
}

/// Every operator check, in a fixed order.
pub fn operator_gradients(seeds: u64) -> Vec<(&'static str, CheckResult)> {
    vec![
        ("conv2d", conv2d_gradients(seeds)),
        ("relu", relu_gradient(seeds)),
        ("maxpool", maxpool_gradient(seeds)),
        ("global_avg_pool", global_avg_pool_gradient(seeds)),
        ("dense", dense_gradients(seeds)),
        ("softmax+cross_entropy", softmax_cross_entropy_gradient(seeds)),
        ("dropout", dropout_gradient(seeds)),
        ("concat", concat_gradient(seeds)),
        ("fire", fire_gradients(seeds)),
    ]
}

/// Tiny 3-class model with random non-zero biases, a 2-image batch and
/// labels. Zero-initialized biases put pre-activations exactly on the ReLU
/// kink wherever the incoming feature map is zero, where finite differences
/// and the subgradient disagree.
pub fn tiny_case(seed: u64) -> (Model, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(ModelConfig::tiny(3), seed).unwrap();
    for p in model.parameters_mut() {
        if p.name.ends_with("/bias") {
            p.value = random(&mut rng, p.value.dims()).scale(0.1);
        }
    }
    let x = random(&mut rng, &[2, 3, 32, 32]);
    let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
    (model, x, labels)
}

pub fn loss_and_grads(model: &mut Model, x: &Tensor, labels: &[usize]) -> (f64, Gradients) {
    let probs = model.forward_train(x, None).unwrap();
    let (loss, d) = cross_entropy(&probs, labels).unwrap();
    (loss, model.backward(&d).unwrap())
}

fn full_model_error(seed: u64) -> f64 {
    let (mut model, x, labels) = tiny_case(seed);
    let (_, grads) = loss_and_grads(&mut model, &x, &labels);
    let xa = Arr::from_tensor(&x);
    let base = oracle::model_params(&model);
    let cfg = model.config().clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, value) in &base {
        analytic.extend(f64s(grads.get(name).unwrap()));
        let mut params = base.clone();
        numeric.extend(numeric_gradient(value, MODEL_EPS, |v| {
            params.insert(name.clone(), v.clone());
            oracle::model_loss(&cfg, &params, &xa, &labels)
        }));
    }
    max_relative_error(&analytic, &numeric, FLOOR)
}

/// Every parameter gradient of the tiny model against finite differences of
/// the f64 reference network, one seed per rayon task.
pub fn full_model_gradient(seeds: u64) -> CheckResult {
    let errors: Vec<(u64, f64)> = (0..seeds).into_par_iter().map(|s| (s, full_model_error(s))).collect();
    let mut out = Outcome::default();
    for (seed, err) in errors {
        out.add(err);
        if err >= MODEL_TOL {
            return Err(format!("full model, seed {seed}: relative error {err:e}"));
        }
    }
    Ok(out)
}

fn uniform_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
}

/// Runs the engine convolution against the naive loops for every shape with
/// N, C, O <= 3, kernels 1 or 3 on each axis, stride 1 or 2, padding 0 or 1
/// and H, W <= 7. Returns the number of shapes compared.
pub fn conv_exhaustive() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for n in 1..=3 {
        for c in 1..=3 {
            for o in 1..=3 {
                for (kh, kw) in [(1, 1), (1, 3), (3, 1), (3, 3)] {
                    for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
                        for h in 1..=7 {
                            for w in 1..=7 {
                                if h + 2 * pad < kh || w + 2 * pad < kw {
                                    continue;
                                }
                                let spec = ConvSpec {
                                    out_channels: o,
                                    in_channels: c,
                                    kernel_h: kh,
                                    kernel_w: kw,
                                    stride,
                                    pad,
                                };
                                let x = uniform_tensor(&mut rng, &[n, c, h, w]);
                                let wt = uniform_tensor(&mut rng, &spec.weight_dims());
                                let b = uniform_tensor(&mut rng, &[o]);
                                let got =
                                    ops::conv2d_forward(&x, &wt, &b, &spec).map_err(|e| format!("{spec:?}: {e}"))?;
                                let want = oracle::conv2d_f32(&x, &wt, &b, stride, pad);
                                let same = got.dims() == want.dims()
                                    && got
                                        .data()
                                        .iter()
                                        .zip(want.data())
                                        .all(|(a, b)| a.to_bits() == b.to_bits());
                                if !same {
                                    return Err(format!("{spec:?} on {n}x{c}x{h}x{w} differs from the naive loops"));
                                }
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cases)
}

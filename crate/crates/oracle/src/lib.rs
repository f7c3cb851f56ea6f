//! Slow, straightforward reference implementations used as test oracles.
//!
//! The reference functions in this file never call into the engine's
//! numerical code. The engine crate is only used for its plain data types
//! (`Tensor`, `ModelConfig`, `Model` parameter lookup). [`checks`] runs the
//! engine against them.

use fsq::{Model, ModelConfig, Tensor};

pub mod checks;

/// Naive 7-loop convolution in `f32`. Each output sums in-bounds taps in
/// `(c, ky, kx)` order starting from `0.0`, then adds the bias.
pub fn conv2d_f32(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = dims4(x.dims());
    let [o, _, kh, kw] = dims4(w.dims());
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdt, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0f32;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = wdt[((oi * c + ci) * kh + ky) * kw + kx];
                                sum += wv * xv;
                            }
                        }
                    }
                    out.push(sum + bd[oi]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], out).unwrap()
}

/// Triple-loop matrix product in `f32`, summing over `k` from `0.0`.
pub fn matmul_f32(a: &Tensor, b: &Tensor) -> Tensor {
    let (&[m, k], &[_, n]) = (a.dims(), b.dims()) else {
        panic!("matmul_f32 needs matrices");
    };
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut sum = 0.0f32;
            for p in 0..k {
                sum += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out.push(sum);
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

fn dims4(d: &[usize]) -> [usize; 4] {
    d.try_into().expect("expected a rank-4 tensor")
}

/// Dense `f64` array used by the reference forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Arr {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        Arr {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Arr {
        Arr::new(t.dims(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.dims, self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }

    fn d4(&self) -> [usize; 4] {
        dims4(&self.dims)
    }
}

pub fn conv2d(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let [n, c, h, wd] = x.d4();
    let [o, _, kh, kw] = w.d4();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = b.data[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                                    sum += w.data[((oi * c + ci) * kh + ky) * kw + kx]
                                        * x.data[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + oy) * ow + ox] = sum;
                }
            }
        }
    }
    Arr::new(&[n, o, oh, ow], out)
}

pub fn relu(x: &Arr) -> Arr {
    Arr::new(&x.dims, x.data.iter().map(|&v| v.max(0.0)).collect())
}

/// Max-pool without padding, floor output size.
pub fn maxpool(x: &Arr, k: usize, s: usize) -> Arr {
    let [n, c, h, w] = x.d4();
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        best = best.max(x.data[(plane * h + oy * s + ky) * w + ox * s + kx]);
                    }
                }
                out.push(best);
            }
        }
    }
    Arr::new(&[n, c, oh, ow], out)
}

pub fn concat(a: &Arr, b: &Arr) -> Arr {
    let [n, ca, h, w] = a.d4();
    let cb = b.dims[1];
    let mut out = Vec::with_capacity(a.data.len() + b.data.len());
    for ni in 0..n {
        out.extend_from_slice(&a.data[ni * ca * h * w..][..ca * h * w]);
        out.extend_from_slice(&b.data[ni * cb * h * w..][..cb * h * w]);
    }
    Arr::new(&[n, ca + cb, h, w], out)
}

pub fn global_avg_pool(x: &Arr) -> Arr {
    let [n, c, h, w] = x.d4();
    let out = x
        .data
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
        .collect();
    Arr::new(&[n, c], out)
}

/// `x [N, F] . w [F, U] + b`.
pub fn dense(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, f, u) = (x.dims[0], x.dims[1], w.dims[1]);
    let mut out = Vec::with_capacity(n * u);
    for i in 0..n {
        for j in 0..u {
            let mut sum = b.data[j];
            for p in 0..f {
                sum += x.data[i * f + p] * w.data[p * u + j];
            }
            out.push(sum);
        }
    }
    Arr::new(&[n, u], out)
}

pub fn softmax(logits: &Arr) -> Arr {
    let m = logits.dims[1];
    let mut out = Vec::with_capacity(logits.data.len());
    for row in logits.data.chunks(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
        out.extend(row.iter().map(|z| (z - max).exp() / total));
    }
    Arr::new(&logits.dims, out)
}

/// Mean negative log-likelihood of the labelled classes.
pub fn cross_entropy(probs: &Arr, labels: &[usize]) -> f64 {
    let m = probs.dims[1];
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.data[i * m + y].max(1e-12).ln())
        .sum();
    total / labels.len() as f64
}

/// `(squeeze, expand 1x1, expand 3x3)` as `(weight, bias)` pairs.
pub struct FireWeights<'a> {
    pub squeeze: (&'a Arr, &'a Arr),
    pub expand1x1: (&'a Arr, &'a Arr),
    pub expand3x3: (&'a Arr, &'a Arr),
}

pub fn fire(x: &Arr, p: &FireWeights) -> Arr {
    let s = relu(&conv2d(x, p.squeeze.0, p.squeeze.1, 1, 0));
    let e1 = relu(&conv2d(&s, p.expand1x1.0, p.expand1x1.1, 1, 0));
    let e3 = relu(&conv2d(&s, p.expand3x3.0, p.expand3x3.1, 1, 1));
    concat(&e1, &e3)
}

/// Parameter source for [`model_logits`]: name to `f64` array.
pub type Params = std::collections::BTreeMap<String, Arr>;

pub fn model_params(model: &Model) -> Params {
    model
        .parameters()
        .iter()
        .map(|p| (p.name.clone(), Arr::from_tensor(&p.value)))
        .collect()
}

/// Inference-mode logits of the SqueezeNet v1.1 topology: 3x3/2 stem, max
/// pools (3/2) after the stem and after the second and fourth fire modules,
/// global average pool, two dense layers with a ReLU between them.
pub fn model_logits(config: &ModelConfig, params: &Params, input: &Arr) -> Arr {
    let get = |name: &str| params.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let mut x = relu(&conv2d(input, get("conv1/weight"), get("conv1/bias"), 2, 0));
    x = maxpool(&x, 3, 2);
    for i in 0..config.fire_specs.len() {
        let f = format!("fire{}", i + 2);
        let pair = |part: &str| (get(&format!("{f}.{part}/weight")), get(&format!("{f}.{part}/bias")));
        x = fire(
            &x,
            &FireWeights {
                squeeze: pair("squeeze1x1"),
                expand1x1: pair("expand1x1"),
                expand3x3: pair("expand3x3"),
            },
        );
        if i == 1 || i == 3 {
            x = maxpool(&x, 3, 2);
        }
    }
    let pooled = global_avg_pool(&x);
    let hidden = relu(&dense(&pooled, get("fc1/weight"), get("fc1/bias")));
    dense(&hidden, get("fc2/weight"), get("fc2/bias"))
}

pub fn model_loss(config: &ModelConfig, params: &Params, input: &Arr, labels: &[usize]) -> f64 {
    cross_entropy(&softmax(&model_logits(config, params, input)), labels)
}

/// Closed-form parameter count of the v1.1 layout, summed layer by layer.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let mut total = conv(3, config.stem_channels, 3);
    let mut channels = config.stem_channels;
    for f in &config.fire_specs {
        total += conv(channels, f.squeeze_1x1, 1)
            + conv(f.squeeze_1x1, f.expand_1x1, 1)
            + conv(f.squeeze_1x1, f.expand_3x3, 3);
        channels = f.expand_1x1 + f.expand_3x3;
    }
    total
        + channels * config.head_hidden
        + config.head_hidden
        + config.head_hidden * config.num_classes
        + config.num_classes
}

/// Central difference `(f(x + eps) - f(x - eps)) / 2 eps` for every element of `x`.
pub fn numeric_gradient(x: &Arr, eps: f64, mut f: impl FnMut(&Arr) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.data.len())
        .map(|i| {
            let orig = probe.data[i];
            probe.data[i] = orig + eps;
            let plus = f(&probe);
            probe.data[i] = orig - eps;
            let minus = f(&probe);
            probe.data[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over paired elements.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// Pearson correlation by the textbook two-pass formula.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}


/// Small labelled image sets for end-to-end tests.
pub mod synthetic {
    use std::path::Path;

    use fsq::data::{save_ppm, Dataset, ImageBuffer, Sample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const COLORS: [(&str, [u8; 3]); 4] = [
        ("blue", [30, 40, 220]),
        ("green", [40, 200, 50]),
        ("red", [220, 30, 40]),
        ("yellow", [230, 220, 40]),
    ];

    /// `side x side` image of the class colour with per-pixel noise and a
    /// grey square whose corner depends on the class.
    pub fn image(class: usize, side: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
        let base = COLORS[class].1;
        let q = side / 3;
        let (qx, qy) = ((class % 2) * (side - q), (class / 2) * (side - q));
        let mut px = Vec::with_capacity(3 * side * side);
        for y in 0..side {
            for x in 0..side {
                let in_square = (qx..qx + q).contains(&x) && (qy..qy + q).contains(&y);
                for &c in &base {
                    let v = if in_square { 128 } else { c as i32 };
                    px.push((v + rng.random_range(-12..=12)).clamp(0, 255) as u8);
                }
            }
        }
        ImageBuffer::new(side, side, px).unwrap()
    }

    /// Class names in label order for `classes` colours (at most 4).
    pub fn names(classes: usize) -> Vec<String> {
        COLORS[..classes].iter().map(|(n, _)| n.to_string()).collect()
    }

    pub fn dataset(classes: usize, per_class: usize, side: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for (label, (colour, _)) in COLORS[..classes].iter().enumerate() {
            for i in 0..per_class {
                samples.push(Sample {
                    image: image(label, side, &mut rng),
                    label,
                    source_path: format!("{colour}/{i}.ppm").into(),
                });
            }
        }
        Dataset::new(samples, names(classes)).unwrap()
    }

    /// Writes `<root>/<colour>/<i>.ppm`.
    pub fn write(root: &Path, classes: usize, per_class: usize, side: usize, seed: u64) {
        for s in dataset(classes, per_class, side, seed).samples {
            let path = root.join(&s.source_path);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            save_ppm(&s.image, &path).unwrap();
        }
    }
}

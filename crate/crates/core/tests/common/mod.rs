//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitae::tensor::ConvSpec;
use vitae::{ParamStore, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Direct cross-correlation written independently of the library kernel.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: ConvSpec) -> Vec<f64> {
    let (n, _cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let opg = cout / s.groups;
    let oh = (h + 2 * s.padding.0 - s.dilation.0 * (kh - 1) - 1) / s.stride.0 + 1;
    let ow = (wd + 2 * s.padding.1 - s.dilation.1 * (kw - 1) - 1) / s.stride.1 + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for oc in 0..cout {
            let g = oc / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ci in 0..cpg {
                        let ic = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s.stride.0 + ky * s.dilation.0) as isize - s.padding.0 as isize;
                                let ix = (ox * s.stride.1 + kx * s.dilation.1) as isize - s.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, ic, iy as usize, ix as usize]) * w.at(&[oc, ci, ky, kx]);
                            }
                        }
                    }
                    out[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}


/// Replaces every stored tensor with random values so that no identity
/// initialization (zero biases, unit gammas) hides a wiring mistake.
/// Running variances stay positive.
pub fn randomize(params: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, p) in params.iter_mut() {
        let var = name.ends_with("running_var");
        for v in p.tensor.data_mut() {
            let r: f64 = rng.random_range(-1.0..1.0);
            *v = if var { 0.5 + r.abs() } else { scale * r };
        }
    }
}

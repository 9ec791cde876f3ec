#![allow(dead_code)]

use harmonize_core::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values kept at least `gap` away from zero, so kinked ops stay differentiable
/// under a 1e-5 probe.
pub fn random_away_from_zero(shape: Shape, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.height + 2 * pad - ws.height) / stride + 1;
    let ow = (xs.width + 2 * pad - ws.width) / stride + 1;
    Tensor::from_fn(Shape::new(xs.batch, ws.batch, oh, ow), |[n, o, y, x_]| {
        let mut acc = b.data()[o];
        for c in 0..xs.channels {
            for ky in 0..ws.height {
                for kx in 0..ws.width {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (x_ * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.height && (ix as usize) < xs.width {
                        acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

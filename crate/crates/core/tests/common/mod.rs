//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use bift::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(seed: u64, shape: Shape) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

pub fn rmse_reference(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    (acc / a.len() as f64).sqrt()
}

/// Direct 2-D Gaussian weighting of every window, no separable filtering.
pub fn ssim_reference(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [n, c, h, w] = a.shape().0;
    let (k, sigma) = (11usize, 1.5f64);
    let mut win = vec![0.0; k * k];
    let mid = 5.0;
    for i in 0..k {
        for j in 0..k {
            win[i * k + j] = (-((i as f64 - mid).powi(2) + (j as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..=h - k {
                for ox in 0..=w - k {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = win[i * k + j];
                            mx += wt * a[[s, ch, oy + i, ox + j]];
                            my += wt * b[[s, ch, oy + i, ox + j]];
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = win[i * k + j];
                            let dx = a[[s, ch, oy + i, ox + j]] - mx;
                            let dy = b[[s, ch, oy + i, ox + j]] - my;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cov += wt * dx * dy;
                        }
                    }
                    total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1.0;
                }
            }
        }
    }
    total / count
}

//! Separable bicubic resampling (Catmull-Rom, a = -0.5) with half-pixel
//! centers and clamped borders. When shrinking, the kernel is stretched by the
//! reduction factor so every input pixel contributes (antialiased).

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

const CUBIC_A: f64 = -0.5;

/// Rational resize factor `num / den` applied to both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleFactor {
    pub num: u32,
    pub den: u32,
}

impl ScaleFactor {
    pub fn up(s: u32) -> Self {
        Self { num: s, den: 1 }
    }
    pub fn down(s: u32) -> Self {
        Self { num: 1, den: s }
    }
    pub fn identity() -> Self {
        Self { num: 1, den: 1 }
    }

    fn apply(&self, len: usize) -> Result<usize> {
        let scaled = len * self.num as usize;
        if self.num == 0 || self.den == 0 || scaled % self.den as usize != 0 || scaled == 0 {
            return Err(Error::InvalidDims(format!(
                "extent {len} cannot be resized by {}/{}",
                self.num, self.den
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Normalized `(source index, weight)` taps for every output coordinate.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let stretch = scale.min(1.0);
    let support = 2.0 / stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic((center - j as f64) * stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

pub fn resize_bicubic<T: Element>(x: &Tensor<T>, factor: ScaleFactor) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape().0;
    let (ho, wo) = (factor.apply(h)?, factor.apply(w)?);
    resize_to(x, ho, wo)
}

/// Bicubic resize to an explicit output size.
pub fn resize_to<T: Element>(x: &Tensor<T>, ho: usize, wo: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if ho == 0 || wo == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidDims(format!("resize {h}x{w} -> {ho}x{wo}")));
    }
    if (ho, wo) == (h, w) {
        return Ok(x.clone());
    }
    let row_taps = axis_taps(h, ho);
    let col_taps = axis_taps(w, wo);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut tmp = vec![0.0f64; h * wo];
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (ox, taps) in col_taps.iter().enumerate() {
                tmp[y * wo + ox] = taps.iter().map(|&(i, wt)| wt * row[i].as_f64()).sum();
            }
        }
        for taps in &row_taps {
            for ox in 0..wo {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * tmp[i * wo + ox]).sum();
                out.push(T::from_f64(v));
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, ho, wo), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rmse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
        (s / a.len() as f64).sqrt()
    }

    #[test]
    fn kernel_partition_of_unity() {
        for t in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (-2..=2).map(|k| cubic(t - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
    }

    #[test]
    fn identity_scale() {
        let x = Tensor::from_fn(Shape::new(1, 2, 8, 8), |[_, c, h, w]| (c * 31 + h * h + 3 * w) as f64);
        assert_eq!(resize_bicubic(&x, ScaleFactor::identity()).unwrap(), x);
    }

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::full(Shape::new(1, 1, 32, 32), 123.25f64);
        for s in [4, 8, 16] {
            let d = resize_bicubic(&x, ScaleFactor::down(s)).unwrap();
            let u = resize_bicubic(&d, ScaleFactor::up(s)).unwrap();
            assert!(d.data().iter().chain(u.data()).all(|v| (v - 123.25).abs() < 1e-6));
        }
    }

    #[test]
    fn ramp_downsample_matches_analytic() {
        // f(y, x) = 2 + 0.5 x - 0.25 y evaluated at half-pixel sample centers
        let f = |y: f64, x: f64| 2.0 + 0.5 * x - 0.25 * y;
        let x = Tensor::from_fn(Shape::new(1, 1, 16, 16), |[_, _, h, w]| f(h as f64, w as f64));
        let d = resize_bicubic(&x, ScaleFactor::down(2)).unwrap();
        // the stretched kernel reaches 4 input pixels out; clamping distorts the
        // ramp only within that border
        for oy in 2..6 {
            for ox in 2..6 {
                let cy = (oy as f64 + 0.5) * 2.0 - 0.5;
                let cx = (ox as f64 + 0.5) * 2.0 - 0.5;
                assert!((d[[0, 0, oy, ox]] - f(cy, cx)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_non_integer_output() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 10, 10));
        assert!(resize_bicubic(&x, ScaleFactor::down(4)).is_err());
        assert!(resize_bicubic(&x, ScaleFactor { num: 0, den: 1 }).is_err());
    }

    #[test]
    fn smooth_roundtrip_error_grows_with_scale() {
        let x = Tensor::from_fn(Shape::new(1, 1, 64, 64), |[_, _, h, w]| {
            let (y, x) = (h as f64 / 64.0, w as f64 / 64.0);
            250.0 + 80.0 * (6.0 * x).sin() * (4.0 * y).cos() + 40.0 * (11.0 * (x + y)).sin()
        });
        let errs: Vec<f64> = [4, 8, 16]
            .iter()
            .map(|&s| {
                let d = resize_bicubic(&x, ScaleFactor::down(s)).unwrap();
                rmse(&resize_bicubic(&d, ScaleFactor::up(s)).unwrap(), &x)
            })
            .collect();
        assert!(errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
    }
}

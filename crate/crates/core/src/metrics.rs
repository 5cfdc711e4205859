//! Reference image-quality metrics.
//!
//! All metrics are computed in `f64` regardless of the tensor scalar type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// BT.601 studio-swing luma coefficients on 8-bit scale, and the offset.
pub const Y_COEFFS: [f64; 3] = [65.481, 128.553, 24.966];
pub const Y_OFFSET: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Rgb,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    /// `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub channel_mode: ChannelMode,
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(sum / a.numel().max(1) as f64)
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two planes over all valid window positions.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Single-scale SSIM with peak 1, averaged over batch items and channels.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let s = a.shape();
    if s.h() < SSIM_WINDOW || s.w() < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s.h(), s.w()),
        ));
    }
    let plane = s.plane();
    let planes = s.n() * s.c();
    let to_f64 =
        |t: &Tensor<T>, p: usize| t.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let total: f64 = (0..planes).map(|p| ssim_plane(&to_f64(a, p), &to_f64(b, p), s.h(), s.w(), 1.0)).sum();
    Ok(total / planes as f64)
}

/// BT.601 luma on `[0, 1]` scale: `(65.481 R + 128.553 G + 24.966 B + 16) / 255`.
pub fn to_y_channel<T: Scalar>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let s = rgb.shape();
    if s.c() != 3 {
        return Err(Error::shape("to_y_channel", format!("expected 3 channels, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n(), 1, s.h(), s.w()), |[n, _, h, w]| {
        let y: f64 = (0..3).map(|c| Y_COEFFS[c] * rgb.at([n, c, h, w]).as_f64()).sum();
        T::lit((y + Y_OFFSET) / 255.0)
    }))
}

pub fn evaluate<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>, mode: ChannelMode) -> Result<MetricResult> {
    let (a, b) = match mode {
        ChannelMode::Rgb => (pred.clone(), reference.clone()),
        ChannelMode::Y => (to_y_channel(pred)?, to_y_channel(reference)?),
    };
    Ok(MetricResult { psnr: psnr(&a, &b, 1.0)?, ssim: ssim(&a, &b)?, channel_mode: mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &Tensor::zeros(Shape::new(1, 3, 4, 5)), 1.0).is_err());
    }

    #[test]
    fn ssim_of_constants() {
        let s = Shape::new(1, 1, 12, 12);
        let v = ssim(&Tensor::<f64>::zeros(s), &Tensor::ones(s)).unwrap();
        let c1 = SSIM_K1 * SSIM_K1;
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-15);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = Rng::new(1);
        let a: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 3, 16, 13), 0.0, 1.0);
        let b: Tensor<f64> = rng.uniform_tensor(a.shape(), 0.0, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));
        assert!(
            ssim(&Tensor::<f64>::zeros(Shape::new(1, 1, 10, 20)), &Tensor::zeros(Shape::new(1, 1, 10, 20))).is_err()
        );
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn luma_endpoints() {
        let s = Shape::new(1, 3, 1, 2);
        let img = Tensor::<f64>::from_fn(s, |[_, _, _, w]| if w == 0 { 1.0 } else { 0.0 });
        let y = to_y_channel(&img).unwrap();
        assert!((y.at([0, 0, 0, 0]) - 235.0 / 255.0).abs() < 1e-12);
        assert!((y.at([0, 0, 0, 1]) - 16.0 / 255.0).abs() < 1e-15);
        assert!(to_y_channel(&Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }

    #[test]
    fn luma_is_monotone_in_gray() {
        let s = Shape::new(1, 3, 1, 8);
        let img = Tensor::<f64>::from_fn(s, |[_, _, _, w]| w as f64 / 7.0);
        let y = to_y_channel(&img).unwrap();
        assert!(y.data().windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn y_mode_of_self_is_perfect() {
        let a: Tensor<f64> = Rng::new(2).uniform_tensor(Shape::new(1, 3, 12, 12), 0.0, 1.0);
        let r = evaluate(&a, &a, ChannelMode::Y).unwrap();
        let g = evaluate(&a, &a, ChannelMode::Rgb).unwrap();
        assert_eq!(r.psnr, g.psnr);
        assert!((r.ssim - 1.0).abs() < 1e-9 && (g.ssim - 1.0).abs() < 1e-9);
    }
}

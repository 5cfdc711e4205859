//! Procedural clean images, synthetic degradations and augmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Synthetic degradation applied to clean images in `[0, 1]`; outputs are clamped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradeSpec {
    /// Additive Gaussian noise.
    Noise { sigma: f64 },
    /// Bright oriented streaks: `count` per image, `length` pixels, angle from vertical.
    Rain { count: usize, length: usize, angle_deg: f64, intensity: f64 },
    /// Atmospheric scattering `I = J t + A (1 - t)`.
    Haze { transmission: f64, airlight: f64 },
    /// Bright discs of `radius` pixels, `density` flakes per 1000 pixels.
    Snow { density: f64, radius: usize, intensity: f64 },
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec::Noise { sigma: 0.1 }
    }
}

impl DegradeSpec {
    pub const KINDS: [&'static str; 4] = ["noise", "rain", "haze", "snow"];

    /// Default parameters for a degradation kind.
    pub fn preset(kind: &str) -> Result<Self> {
        Ok(match kind {
            "noise" => DegradeSpec::Noise { sigma: 0.1 },
            "rain" => DegradeSpec::Rain { count: 12, length: 8, angle_deg: 15.0, intensity: 0.6 },
            "haze" => DegradeSpec::Haze { transmission: 0.6, airlight: 0.9 },
            "snow" => DegradeSpec::Snow { density: 4.0, radius: 1, intensity: 0.8 },
            _ => {
                return Err(Error::config(format!("unknown degradation `{kind}` (expected noise, rain, haze or snow)")))
            }
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DegradeSpec::Noise { .. } => "noise",
            DegradeSpec::Rain { .. } => "rain",
            DegradeSpec::Haze { .. } => "haze",
            DegradeSpec::Snow { .. } => "snow",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |what: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{what} must lie in [0, 1], got {v}")))
            }
        };
        match *self {
            DegradeSpec::Noise { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::config(format!("noise sigma must be finite and non-negative, got {sigma}")));
                }
            }
            DegradeSpec::Rain { length, angle_deg, intensity, .. } => {
                unit("rain intensity", intensity)?;
                if length == 0 || !angle_deg.is_finite() {
                    return Err(Error::config("rain length must be positive and angle finite"));
                }
            }
            DegradeSpec::Haze { transmission, airlight } => {
                unit("haze transmission", transmission)?;
                unit("haze airlight", airlight)?;
            }
            DegradeSpec::Snow { density, intensity, .. } => {
                unit("snow intensity", intensity)?;
                if !(density >= 0.0 && density.is_finite()) {
                    return Err(Error::config(format!("snow density must be finite and non-negative, got {density}")));
                }
            }
        }
        Ok(())
    }
}

/// Degrades every batch item; item `n` draws from `rng.split_index("item", n)`.
pub fn degrade<T: Scalar>(clean: &Tensor<T>, spec: &DegradeSpec, rng: &Rng) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = clean.shape();
    let mut out = clean.to_vec();
    let plane = s.plane();
    for n in 0..s.n() {
        let mut r = rng.split_index("item", n as u64);
        let item = &mut out[n * s.c() * plane..(n + 1) * s.c() * plane];
        match *spec {
            DegradeSpec::Noise { sigma } => {
                for v in item.iter_mut() {
                    *v += T::lit(sigma * r.normal());
                }
            }
            DegradeSpec::Haze { transmission: t, airlight: a } => {
                for v in item.iter_mut() {
                    *v = T::lit(v.as_f64() * t + a * (1.0 - t));
                }
            }
            DegradeSpec::Rain { count, length, angle_deg, intensity } => {
                let mut mask = vec![0.0f64; plane];
                let (dy, dx) = (angle_deg.to_radians().cos(), angle_deg.to_radians().sin());
                for _ in 0..count {
                    let y0 = r.uniform() * s.h() as f64;
                    let x0 = r.uniform() * s.w() as f64;
                    for k in 0..length {
                        let y = (y0 + dy * k as f64).floor();
                        let x = (x0 + dx * k as f64).floor();
                        if y >= 0.0 && x >= 0.0 && (y as usize) < s.h() && (x as usize) < s.w() {
                            mask[y as usize * s.w() + x as usize] = intensity;
                        }
                    }
                }
                add_mask(item, &mask);
            }
            DegradeSpec::Snow { density, radius, intensity } => {
                let mut mask = vec![0.0f64; plane];
                let flakes = (density * plane as f64 / 1000.0).round() as usize;
                let rad = radius as isize;
                for _ in 0..flakes {
                    let cy = (r.uniform() * s.h() as f64) as isize;
                    let cx = (r.uniform() * s.w() as f64) as isize;
                    for y in cy - rad..=cy + rad {
                        for x in cx - rad..=cx + rad {
                            let inside = (y - cy).pow(2) + (x - cx).pow(2) <= rad * rad;
                            if inside && y >= 0 && x >= 0 && (y as usize) < s.h() && (x as usize) < s.w() {
                                mask[y as usize * s.w() + x as usize] = intensity;
                            }
                        }
                    }
                }
                add_mask(item, &mask);
            }
        }
    }
    let t = Tensor::from_vec(s, out)?;
    Ok(t.map(|v| v.max(T::zero()).min(T::one())))
}

/// Adds the same per-pixel mask to every channel of one item.
fn add_mask<T: Scalar>(item: &mut [T], mask: &[f64]) {
    for chunk in item.chunks_mut(mask.len()) {
        for (v, m) in chunk.iter_mut().zip(mask) {
            *v += T::lit(*m);
        }
    }
}

/// One procedural `(1, 3, size, size)` image: a colour gradient, a
/// checkerboard, or smooth value noise, chosen by `rng`.
pub fn procedural_image<T: Scalar>(size: usize, rng: &mut Rng) -> Tensor<T> {
    let color = |r: &mut Rng| [r.uniform(), r.uniform(), r.uniform()];
    let (a, b) = (color(rng), color(rng));
    let kind = rng.below(3);
    let shape = Shape::new(1, 3, size, size);
    let f = size as f64;
    match kind {
        0 => {
            let theta = rng.uniform() * std::f64::consts::TAU;
            let (cy, cx) = (theta.sin(), theta.cos());
            Tensor::from_fn(shape, |[_, c, h, w]| {
                let t = 0.5 + 0.5 * ((h as f64 / f - 0.5) * cy + (w as f64 / f - 0.5) * cx) * std::f64::consts::SQRT_2;
                T::lit(a[c] + (b[c] - a[c]) * t.clamp(0.0, 1.0))
            })
        }
        1 => {
            let period = 2 + rng.below((size / 2).max(1));
            Tensor::from_fn(shape, |[_, c, h, w]| {
                T::lit(if (h / period + w / period).is_multiple_of(2) { a[c] } else { b[c] })
            })
        }
        _ => {
            let g = 5;
            let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform()).collect();
            let at = |y: usize, x: usize| grid[y.min(g - 1) * g + x.min(g - 1)];
            Tensor::from_fn(shape, |[_, c, h, w]| {
                let fy = h as f64 / f * (g - 1) as f64;
                let fx = w as f64 / f * (g - 1) as f64;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                let t = top * (1.0 - ty) + bot * ty;
                T::lit(a[c] + (b[c] - a[c]) * t)
            })
        }
    }
}

pub fn flip_h<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.shape().w();
    Tensor::from_fn(x.shape(), |[n, c, h, j]| x.at([n, c, h, w - 1 - j]))
}

/// Counter-clockwise rotation by `k` quarter turns; square planes only for odd `k`.
pub fn rot90<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let k = k % 4;
    if k % 2 == 1 && s.h() != s.w() {
        return Err(Error::shape("rot90", format!("odd rotations need square planes, got {s}")));
    }
    let (h, w) = (s.h(), s.w());
    Ok(Tensor::from_fn(s, |[n, c, i, j]| match k {
        0 => x.at([n, c, i, j]),
        1 => x.at([n, c, j, w - 1 - i]),
        2 => x.at([n, c, h - 1 - i, w - 1 - j]),
        _ => x.at([n, c, h - 1 - j, i]),
    }))
}

/// Random horizontal flip and quarter-turn rotation, the same for a clean /
/// degraded pair.
pub fn augment_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    let flip = rng.bernoulli(0.5);
    let k = rng.below(4);
    let f = |x: &Tensor<T>| -> Result<Tensor<T>> { rot90(&if flip { flip_h(x) } else { x.clone() }, k) };
    Ok((f(a)?, f(b)?))
}

/// `(clean, degraded)` batch of `batch` square patches.
pub fn make_batch<T: Scalar>(
    batch: usize,
    size: usize,
    spec: &DegradeSpec,
    rng: &Rng,
    augment: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut cleans = Vec::with_capacity(batch);
    let mut noisy = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut r = rng.split_index("image", i as u64);
        let clean: Tensor<T> = procedural_image(size, &mut r);
        let deg = degrade(&clean, spec, &rng.split_index("degrade", i as u64))?;
        let (clean, deg) = if augment { augment_pair(&clean, &deg, &mut r)? } else { (clean, deg) };
        cleans.push(clean);
        noisy.push(deg);
    }
    Ok((Tensor::stack_batch(&cleans)?, Tensor::stack_batch(&noisy)?))
}

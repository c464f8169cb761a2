//! Procedural texture corpus and the degradations used to probe sub-band
//! sensitivity (blur removes high bands, a brightness shift moves only LL).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 → 1`, `n → n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// One texture: smooth Gaussian blobs over a mid-grey base, fine
/// horizontal and vertical line fields near the sampling limit, and a
/// unit-cell checkerboard patch. Values lie in `[0, 1]`.
///
/// The fine structure is deliberate: blurring removes it almost entirely,
/// so blur residuals concentrate in the high sub-bands while the smooth
/// blobs keep the low band populated.
pub fn texture(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (shape.height as f64, shape.width as f64);
    let side = h.min(w);

    struct Blob {
        cy: f64,
        cx: f64,
        inv2s2: f64,
        amp: Vec<f64>,
    }
    let n_blobs = rng.random_range(3..7);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let s: f64 = rng.random_range(side / 10.0..side / 5.0);
            let a: f64 =
                rng.random_range(0.08..0.22) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            Blob {
                cy: rng.random_range(0.0..h),
                cx: rng.random_range(0.0..w),
                inv2s2: 1.0 / (2.0 * s * s),
                amp: (0..shape.channels)
                    .map(|_| a * rng.random_range(0.6..1.0))
                    .collect(),
            }
        })
        .collect();

    // (angular frequency, phase, amplitude) for the row and column fields
    let mut field = || {
        let f: f64 = rng.random_range(0.44..0.5);
        (
            2.0 * PI * f,
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.03..0.07),
        )
    };
    let rows = field();
    let cols = field();

    // patch corners on even coordinates so every aligned 2×2 window holds a
    // full checker period
    let even = |v: usize| v & !1;
    let ph = even(rng.random_range(shape.height / 4..=shape.height / 2)).max(2);
    let pw = even(rng.random_range(shape.width / 4..=shape.width / 2)).max(2);
    let py = even(rng.random_range(0..=shape.height.saturating_sub(ph)));
    let px = even(rng.random_range(0..=shape.width.saturating_sub(pw)));
    let check_amp: f64 = rng.random_range(0.04..0.08);

    Tensor::from_fn(shape, |c, y, x| {
        let (fy, fx) = (y as f64, x as f64);
        let mut v = 0.5;
        for b in &blobs {
            let d2 = (fy - b.cy).powi(2) + (fx - b.cx).powi(2);
            v += b.amp[c] * (-d2 * b.inv2s2).exp();
        }
        v += rows.2 * (rows.0 * fy + rows.1).sin();
        v += cols.2 * (cols.0 * fx + cols.1).sin();
        if (py..py + ph).contains(&y) && (px..px + pw).contains(&x) {
            v += if (y + x) % 2 == 0 {
                check_amp
            } else {
                -check_amp
            };
        }
        v.clamp(0.0, 1.0)
    })
}

/// `n` textures; image `i` uses seed `seed + i`.
pub fn texture_corpus(n: usize, shape: Shape, seed: u64) -> Vec<Tensor> {
    par::map_indexed(n, |i| texture(shape, seed.wrapping_add(i as u64)))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflect borders, truncated at 3σ.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let planes = par::map_indexed(img.channels(), |c| {
        let src = img.channel(c);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * src[y * w + reflect_index(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect_index(y as isize + j as isize - r, h) * w + x])
                    .sum();
            }
        }
        out
    });
    Tensor::from_vec(img.shape(), planes.concat())
}

/// Adds `delta` to every pixel. No clipping, so the difference to the input
/// is exactly constant.
pub fn brightness_shift(img: &Tensor, delta: f64) -> Tensor {
    img.map(|v| v + delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::subband_loss;
    use crate::metrics::Norm;
    use crate::wavelet::{Filter, ScaleMode};

    #[test]
    fn reflect_matches_mirror_table() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-4, 1), 0);
    }

    #[test]
    fn textures_are_deterministic_and_bounded() {
        let s = Shape::new(3, 32, 32);
        let a = texture(s, 5);
        assert!(a.bit_eq(&texture(s, 5)));
        assert!(!a.bit_eq(&texture(s, 6)));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_preserves_constants() {
        let c = Tensor::filled(Shape::new(2, 9, 7), 0.3);
        let b = gaussian_blur(&c, 1.3).unwrap();
        assert!(b.max_abs_diff(&c).unwrap() < 1e-14);
        assert!(gaussian_blur(&c, 0.0).is_err());
    }

    #[test]
    fn brightness_moves_only_ll() {
        let t = texture(Shape::new(1, 16, 16), 1);
        let s = brightness_shift(&t, 0.1);
        for f in Filter::HIGH {
            let v = subband_loss(&t, &s, f, 0, Norm::L2, ScaleMode::Orthonormal).unwrap();
            assert!(v < 1e-28, "{f}: {v}");
        }
        let ll = subband_loss(&t, &s, Filter::LL, 0, Norm::L2, ScaleMode::Orthonormal).unwrap();
        assert!((ll - 0.04).abs() < 1e-12);
    }
}

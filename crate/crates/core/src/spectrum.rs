//! 2-D power spectra, the azimuthally averaged ("reduced") spectrum, and the
//! log-spectrum distance built on it.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Floor added inside every logarithm of a spectrum.
pub const LOG_FLOOR: f64 = 1e-12;

fn bit_reverse_permute(buf: &mut [Complex64]) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
}

/// In-place iterative radix-2 transform. `inverse` flips the twiddle sign
/// without normalizing.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) -> Result<()> {
    let n = buf.len();
    if !n.is_power_of_two() {
        return Err(Error::Argument(format!(
            "fft length {n} is not a power of two"
        )));
    }
    bit_reverse_permute(buf);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, ang * k as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * twiddles[k];
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Row-then-column transform of an `h×w` plane stored row-major.
pub fn fft2(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Argument(format!(
            "{h}×{w} is not a power-of-two size"
        )));
    }
    for row in plane.chunks_mut(w) {
        fft_in_place(row, inverse)?;
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        fft_in_place(&mut col, inverse)?;
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
    Ok(())
}

fn check_pow2(img: &Tensor) -> Result<()> {
    for (axis, n) in [
        (crate::error::Axis::Height, img.height()),
        (crate::error::Axis::Width, img.width()),
    ] {
        if !n.is_power_of_two() {
            return Err(Error::Dimension {
                axis,
                size: n,
                divisor: n.next_power_of_two(),
            });
        }
    }
    Ok(())
}

fn channel_spectra(img: &Tensor) -> Result<Vec<Vec<Complex64>>> {
    check_pow2(img)?;
    let (h, w) = (img.height(), img.width());
    par::map_indexed(img.channels(), |c| {
        let mut plane: Vec<Complex64> = img
            .channel(c)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        fft2(&mut plane, h, w, false)?;
        Ok(plane)
    })
    .into_iter()
    .collect()
}

// Unshifted frequency index -> position in the DC-centered layout.
#[inline]
fn centered(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// `|DFT|²` averaged over channels, DC moved to `(H/2, W/2)`. Output `1×H×W`.
pub fn power_spectrum(img: &Tensor) -> Result<Tensor> {
    let spectra = channel_spectra(img)?;
    Ok(power_from_spectra(&spectra, img.height(), img.width()))
}

fn power_from_spectra(spectra: &[Vec<Complex64>], h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(Shape::new(1, h, w));
    let inv_c = 1.0 / spectra.len() as f64;
    for ky in 0..h {
        for kx in 0..w {
            let p: f64 = spectra.iter().map(|s| s[ky * w + kx].norm_sqr()).sum();
            out.set(0, centered(ky, h), centered(kx, w), p * inv_c);
        }
    }
    out
}

/// Assignment of centered frequencies to annular bins.
#[derive(Debug, Clone)]
struct BinLayout {
    side: usize,
    bins: usize,
    // bin index for each centered position (row-major)
    assign: Vec<usize>,
    counts: Vec<usize>,
    // empty bin -> (lower bin, upper bin, weight of upper)
    fill: Vec<Option<(usize, usize, f64)>>,
}

impl BinLayout {
    fn new(side: usize) -> Self {
        let bins = ((side as f64) / std::f64::consts::SQRT_2).floor() as usize;
        let bins = bins.max(1);
        let half = (side / 2) as f64;
        let mut assign = Vec::with_capacity(side * side);
        let mut counts = vec![0usize; bins];
        for y in 0..side {
            for x in 0..side {
                let (fy, fx) = (y as f64 - half, x as f64 - half);
                // normalized radius times H/√2 is the raw radius in frequency units
                let k = ((fy * fy + fx * fx).sqrt().round() as usize).min(bins - 1);
                assign.push(k);
                counts[k] += 1;
            }
        }
        let filled: Vec<usize> = (0..bins).filter(|&k| counts[k] > 0).collect();
        let fill = (0..bins)
            .map(|k| {
                if counts[k] > 0 {
                    return None;
                }
                let lo = filled.iter().rev().find(|&&j| j < k).copied();
                let hi = filled.iter().find(|&&j| j > k).copied();
                Some(match (lo, hi) {
                    (Some(l), Some(h)) => (l, h, (k - l) as f64 / (h - l) as f64),
                    (Some(l), None) => (l, l, 0.0),
                    (None, Some(h)) => (h, h, 0.0),
                    (None, None) => unreachable!("DC bin is never empty"),
                })
            })
            .collect();
        BinLayout {
            side,
            bins,
            assign,
            counts,
            fill,
        }
    }

    fn reduce(&self, power: &Tensor) -> Vec<f64> {
        let mut sums = vec![0.0; self.bins];
        for (k, &p) in self.assign.iter().zip(power.data()) {
            sums[*k] += p;
        }
        let mut means: Vec<f64> = sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        for k in 0..self.bins {
            if let Some((lo, hi, t)) = self.fill[k] {
                means[k] = (1.0 - t) * means[lo] + t * means[hi];
            }
        }
        means
    }

    // Pulls a gradient over bin means back to the centered power raster.
    fn reduce_adjoint(&self, grad_bins: &[f64]) -> Vec<f64> {
        let mut g = grad_bins.to_vec();
        for k in 0..self.bins {
            if let Some((lo, hi, t)) = self.fill[k] {
                g[lo] += (1.0 - t) * grad_bins[k];
                g[hi] += t * grad_bins[k];
                g[k] = 0.0;
            }
        }
        self.assign
            .iter()
            .map(|&k| {
                if self.counts[k] > 0 {
                    g[k] / self.counts[k] as f64
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedSpectrum {
    pub bins: Vec<f64>,
    /// Normalized polar radius of each bin, in `[0, 1]`.
    pub bin_radii: Vec<f64>,
    /// `√(H² + W²)`.
    pub nyquist: f64,
}

impl ReducedSpectrum {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn log_bins(&self) -> Vec<f64> {
        self.bins.iter().map(|v| (v + LOG_FLOOR).ln()).collect()
    }

    /// CSV with columns `bin_index,radius,value,log_value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["bin_index", "radius", "value", "log_value"])?;
        for (k, (v, r)) in self.bins.iter().zip(&self.bin_radii).enumerate() {
            wtr.write_record([
                k.to_string(),
                format!("{r}"),
                format!("{v:e}"),
                format!("{}", (v + LOG_FLOOR).ln()),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_square(img: &Tensor) -> Result<()> {
    if img.height() != img.width() {
        return Err(Error::shape(
            format!("square image ({0}×{0})", img.height()),
            img.shape(),
        ));
    }
    check_pow2(img)
}

fn reduced_from_power(layout: &BinLayout, power: &Tensor) -> ReducedSpectrum {
    let side = layout.side as f64;
    let scale = side / std::f64::consts::SQRT_2;
    ReducedSpectrum {
        bins: layout.reduce(power),
        bin_radii: (0..layout.bins)
            .map(|k| (k as f64 / scale).min(1.0))
            .collect(),
        nyquist: (2.0 * side * side).sqrt(),
    }
}

/// Azimuthal mean of the centered power spectrum over `floor(H/√2)` annuli.
///
/// Bin `k` collects frequencies whose radius rounds to `k` (the last bin also
/// takes the corners beyond it). Empty annuli are linearly interpolated from
/// the nearest populated neighbors.
pub fn reduced_spectrum(img: &Tensor) -> Result<ReducedSpectrum> {
    check_square(img)?;
    let layout = BinLayout::new(img.height());
    let power = power_spectrum(img)?;
    Ok(reduced_from_power(&layout, &power))
}

/// Mean over bins of the squared difference of log reduced spectra.
pub fn spectral_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape())?;
    let la = reduced_spectrum(a)?.log_bins();
    let lb = reduced_spectrum(b)?.log_bins();
    Ok(log_distance(&la, &lb))
}

/// Mean squared difference between two log-spectra.
pub fn log_distance(la: &[f64], lb: &[f64]) -> f64 {
    la.iter()
        .zip(lb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / la.len() as f64
}

/// Spectral loss of `img` against a fixed target log-spectrum, with its
/// gradient with respect to every pixel of `img`.
pub fn spectral_loss_with_grad(img: &Tensor, target_log: &[f64]) -> Result<(f64, Tensor)> {
    check_square(img)?;
    let side = img.height();
    let layout = BinLayout::new(side);
    if target_log.len() != layout.bins {
        return Err(Error::shape(
            format!("{} target bins", layout.bins),
            format!("{} bins", target_log.len()),
        ));
    }
    let spectra = channel_spectra(img)?;
    let power = power_from_spectra(&spectra, side, side);
    let bins = layout.reduce(&power);
    let n = layout.bins as f64;
    let mut loss = 0.0;
    let grad_bins: Vec<f64> = bins
        .iter()
        .zip(target_log)
        .map(|(&s, &t)| {
            let d = (s + LOG_FLOOR).ln() - t;
            loss += d * d;
            2.0 * d / (n * (s + LOG_FLOOR))
        })
        .collect();
    loss /= n;
    let grad_power = layout.reduce_adjoint(&grad_bins);

    // dL/dx_c = (2/C)·Re(IDFT_unnormalized(G ⊙ X_c)), with G un-centered
    let inv_c = 1.0 / img.channels() as f64;
    let planes = par::map_indexed(img.channels(), |c| {
        let mut buf: Vec<Complex64> = Vec::with_capacity(side * side);
        for ky in 0..side {
            for kx in 0..side {
                let g = grad_power[centered(ky, side) * side + centered(kx, side)];
                buf.push(spectra[c][ky * side + kx] * g);
            }
        }
        fft2(&mut buf, side, side, true)?;
        Ok(buf.iter().map(|z| 2.0 * inv_c * z.re).collect::<Vec<f64>>())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((loss, Tensor::from_vec(img.shape(), planes.concat())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // O(N²) DFT oracle.
    fn dft(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
        let n = x.len();
        let sign = if inverse { 1.0 } else { -1.0 };
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v * Complex64::from_polar(
                            1.0,
                            sign * 2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64,
                        )
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn fft_matches_dft_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 4, 8, 16, 32, 64] {
            let t = Tensor::randn(Shape::new(2, 1, n), 1.0, &mut rng);
            let x: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new(t.data()[i], t.data()[n + i]))
                .collect();
            for inverse in [false, true] {
                let mut y = x.clone();
                fft_in_place(&mut y, inverse).unwrap();
                let want = dft(&x, inverse);
                for (a, b) in y.iter().zip(&want) {
                    assert!((a - b).norm() < 1e-10, "n={n}");
                }
            }
        }
        let mut bad = vec![Complex64::new(0.0, 0.0); 6];
        assert!(fft_in_place(&mut bad, false).is_err());
    }

    #[test]
    fn constant_image_energy_at_dc() {
        let img = Tensor::filled(Shape::new(3, 16, 16), 0.4);
        let p = power_spectrum(&img).unwrap();
        let dc = p.at(0, 8, 8);
        assert!(dc > 0.0);
        for (i, &v) in p.data().iter().enumerate() {
            if i != 8 * 16 + 8 {
                assert!(v <= 1e-9 * dc);
            }
        }
    }

    #[test]
    fn sinusoid_peaks() {
        let k = 3.0;
        let img = Tensor::from_fn(Shape::new(1, 16, 32), |_, _, x| {
            (2.0 * std::f64::consts::PI * k * x as f64 / 32.0).cos()
        });
        let p = power_spectrum(&img).unwrap();
        let peak = p.at(0, 8, 16 + 3);
        assert!((peak - p.at(0, 8, 16 - 3)).abs() < 1e-9 * peak);
        let max = p.data().iter().cloned().fold(0.0, f64::max);
        assert!((peak - max).abs() < 1e-9 * max);
        let others: f64 = p.sum() - 2.0 * peak;
        assert!(others < 1e-9 * peak);
    }

    #[test]
    fn parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = Tensor::randn(Shape::new(1, 32, 16), 1.0, &mut rng);
        let p = power_spectrum(&img).unwrap();
        let want = (32 * 16) as f64 * img.sum_squares();
        assert!(((p.sum() - want) / want).abs() < 1e-9);
        // channel averaging divides the total by C
        let img3 = Tensor::randn(Shape::new(3, 16, 16), 1.0, &mut rng);
        let p3 = power_spectrum(&img3).unwrap();
        let want3 = 256.0 * img3.sum_squares() / 3.0;
        assert!(((p3.sum() - want3) / want3).abs() < 1e-9);
    }

    #[test]
    fn power_spectrum_rejects_non_pow2() {
        let img = Tensor::zeros(Shape::new(1, 12, 16));
        assert!(matches!(power_spectrum(&img), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reduced_spectrum_shape_and_constant() {
        let img = Tensor::filled(Shape::new(1, 64, 64), 1.0);
        let r = reduced_spectrum(&img).unwrap();
        assert_eq!(r.len(), 45);
        assert!(r.bins[0] > 0.0);
        assert!(r.bins[1..].iter().all(|&v| v < 1e-9));
        assert!((r.nyquist - (2.0f64 * 64.0 * 64.0).sqrt()).abs() < 1e-12);
        assert!(r.bin_radii.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(reduced_spectrum(&Tensor::zeros(Shape::new(1, 16, 32))).is_err());
    }

    #[test]
    fn reduced_spectrum_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = Tensor::randn(Shape::new(2, 32, 32), 1.0, &mut rng);
        let rot = Tensor::from_fn(img.shape(), |c, y, x| img.at(c, x, 31 - y));
        let (a, b) = (
            reduced_spectrum(&img).unwrap(),
            reduced_spectrum(&rot).unwrap(),
        );
        for (x, y) in a.bins.iter().zip(&b.bins) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn spectral_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = Tensor::uniform(Shape::new(3, 32, 32), 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(Shape::new(3, 32, 32), 0.0, 1.0, &mut rng);
        assert_eq!(spectral_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(
            spectral_loss(&a, &b).unwrap(),
            spectral_loss(&b, &a).unwrap()
        );
        let l = spectral_loss(&a, &a.scale(2.0)).unwrap();
        let want = 4f64.ln().powi(2);
        assert!((l - want).abs() < 1e-9);
        assert!(spectral_loss(&a, &Tensor::zeros(Shape::new(3, 16, 16))).is_err());
    }

    #[test]
    fn spectral_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let img = Tensor::uniform(Shape::new(2, 8, 8), 0.0, 1.0, &mut rng);
        let target = Tensor::uniform(Shape::new(2, 8, 8), 0.0, 1.0, &mut rng);
        let tlog = reduced_spectrum(&target).unwrap().log_bins();
        let (l0, g) = spectral_loss_with_grad(&img, &tlog).unwrap();
        assert!((l0 - spectral_loss(&img, &target).unwrap()).abs() < 1e-12);
        let h = 1e-5;
        for i in 0..img.len() {
            let mut p = img.clone();
            p.data_mut()[i] += h;
            let mut m = img.clone();
            m.data_mut()[i] -= h;
            let fd = (spectral_loss(&p, &target).unwrap() - spectral_loss(&m, &target).unwrap())
                / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(1e-3),
                "i={i} fd={fd} an={an}"
            );
        }
    }
}

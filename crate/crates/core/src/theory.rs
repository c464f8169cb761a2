//! Executable checks of the sub-band decomposition identities.
//!
//! * The quad identity `Σ_f L_{2,f} = 16·L_2` (raw bank) and its orthonormal
//!   form `Σ_f ¼·L_{2,f} = L_2`.
//! * The half-normal mean `E|p|` for `p ~ N(μ, σ²)`.
//! * A Monte Carlo estimate of the constant `C` relating `log E[L_1]` to the
//!   quarter-weighted sum of `log E[L_{1,f}]` when pixel differences are
//!   i.i.d. Gaussian.

use std::f64::consts::{FRAC_2_PI, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::metrics::{pixel_loss, subband_loss, Norm};
use crate::par;
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{Filter, ScaleMode};

pub const MIN_LEMMA_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub l2: f64,
    pub subband_sum_raw: f64,
    pub subband_sum_orthonormal_quarter: f64,
    /// `subband_sum_raw / l2`; NaN when `l2 == 0`.
    pub ratio_raw: f64,
}

pub fn verify_theorem1(a: &Tensor, b: &Tensor) -> Result<Theorem1Report> {
    let l2 = pixel_loss(a, b, Norm::L2)?;
    let mut raw = 0.0;
    let mut ortho = 0.0;
    for f in Filter::ALL {
        raw += subband_loss(a, b, f, 0, Norm::L2, ScaleMode::Raw)?;
        ortho += 0.25 * subband_loss(a, b, f, 0, Norm::L2, ScaleMode::Orthonormal)?;
    }
    let ratio_raw = if l2 == 0.0 { f64::NAN } else { raw / l2 };
    Ok(Theorem1Report {
        l2,
        subband_sum_raw: raw,
        subband_sum_orthonormal_quarter: ortho,
        ratio_raw,
    })
}

/// `E|p|` for `p ~ N(mu, sigma²)`:
/// `σ·√(2/π)·exp(−μ²/2σ²) + μ·erf(μ/√(2σ²))`.
pub fn half_normal_mean(mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!("sigma must be > 0, got {sigma}")));
    }
    let z = mu / sigma;
    Ok(sigma * FRAC_2_PI.sqrt() * (-0.5 * z * z).exp()
        + mu * erf(mu / (2.0 * sigma * sigma).sqrt()))
}

/// Composite-Simpson evaluation of `∫ |μ + σz| φ(z) dz` over `|z| ≤ 12`,
/// split at the kink `z = −μ/σ`.
pub fn half_normal_mean_quadrature(mu: f64, sigma: f64) -> f64 {
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    let f = |z: f64| (mu + sigma * z).abs() * phi(z);
    let (lo, hi) = (-12.0, 12.0);
    let kink = (-mu / sigma).clamp(lo, hi);
    simpson(&f, lo, kink, 40_000) + simpson(&f, kink, hi, 40_000)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiffSpec {
    pub mu: f64,
    pub sigma: f64,
    /// Number of i.i.d. pixel differences drawn.
    pub samples: usize,
    pub seed: u64,
}

impl GaussianDiffSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Argument(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::Argument("mu must be finite".into()));
        }
        if self.samples < 1 {
            return Err(Error::Argument("samples must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub spec: GaussianDiffSpec,
    pub image_size: usize,
    pub images: usize,
    pub windows: usize,
    /// `log E[L1]` with mean-normalized `L1 = mean|c|`.
    pub lhs_log_e_l1: f64,
    /// `Σ_f ¼·log E[L_{1,f}]` over raw-bank bands.
    pub rhs_quarter_sum: f64,
    /// `rhs − lhs` under mean-normalized losses (`log 2` at μ = 0).
    pub c_estimate: f64,
    /// Standard error of `c_estimate` (delta method over i.i.d. windows).
    pub stderr: f64,
    /// Same constant under the printed `4/(m'n')` prefactor of `L1`, which
    /// inflates `E[L1]` by 16 (`−log 8` at μ = 0).
    pub c_estimate_printed_prefactor: f64,
    pub l1_mean: f64,
    pub l1_stderr: f64,
    /// `E|band|` estimates in `[LL, LH, HL, HH]` order.
    pub per_band_means: [f64; 4],
    pub per_band_stderr: [f64; 4],
    /// Closed forms for `l1_mean` and `per_band_means`.
    pub expected_l1: f64,
    pub expected_bands: [f64; 4],
    pub expected_c: f64,
}

impl LemmaReport {
    /// Largest deviation of any estimate from its closed form, in standard
    /// errors.
    pub fn max_z_score(&self) -> f64 {
        let mut z = ((self.l1_mean - self.expected_l1) / self.l1_stderr).abs();
        for i in 0..4 {
            z = z.max(
                ((self.per_band_means[i] - self.expected_bands[i]) / self.per_band_stderr[i]).abs(),
            );
        }
        z
    }
}

// Per-chunk running sums of the window statistic vector
// [mean|c| over the window, |LL|, |LH|, |HL|, |HH|] and its outer product.
struct Moments {
    n: usize,
    sum: [f64; 5],
    outer: [[f64; 5]; 5],
}

impl Moments {
    fn new() -> Self {
        Moments {
            n: 0,
            sum: [0.0; 5],
            outer: [[0.0; 5]; 5],
        }
    }

    fn push(&mut self, v: [f64; 5]) {
        self.n += 1;
        for i in 0..5 {
            self.sum[i] += v[i];
            for j in 0..5 {
                self.outer[i][j] += v[i] * v[j];
            }
        }
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        for i in 0..5 {
            self.sum[i] += o.sum[i];
            for j in 0..5 {
                self.outer[i][j] += o.outer[i][j];
            }
        }
    }
}

/// Draws `ceil(samples / size²)` images of i.i.d. `N(μ, σ²)` differences and
/// estimates `E[L1]`, each raw-bank `E[L_{1,f}]`, and the constant `C`.
///
/// Image `i` uses ChaCha stream `i` of `seed`, so the result does not depend
/// on how many worker threads run the chunks.
pub fn lemma1_montecarlo(spec: &GaussianDiffSpec, size: usize) -> Result<LemmaReport> {
    spec.validate()?;
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "image size must be even and > 0, got {size}"
        )));
    }
    if spec.samples < MIN_LEMMA_SAMPLES {
        return Err(Error::Argument(format!(
            "insufficient samples: {} < {MIN_LEMMA_SAMPLES}",
            spec.samples
        )));
    }
    let per_image = size * size;
    let images = spec.samples.div_ceil(per_image);
    let chunks = par::map_indexed(images, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let c: Vec<f64> = (0..per_image)
            .map(|_| {
                spec.mu
                    + spec.sigma
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
            .collect();
        let mut m = Moments::new();
        for y in (0..size).step_by(2) {
            for x in (0..size).step_by(2) {
                let c00 = c[y * size + x];
                let c01 = c[y * size + x + 1];
                let c10 = c[(y + 1) * size + x];
                let c11 = c[(y + 1) * size + x + 1];
                m.push([
                    (c00.abs() + c01.abs() + c10.abs() + c11.abs()) / 4.0,
                    (c00 + c01 + c10 + c11).abs(),
                    (c00 + c01 - c10 - c11).abs(),
                    (c00 - c01 + c10 - c11).abs(),
                    (c00 - c01 - c10 + c11).abs(),
                ]);
            }
        }
        m
    });
    let mut total = Moments::new();
    for m in &chunks {
        total.merge(m);
    }

    let n = total.n as f64;
    let mean: [f64; 5] = std::array::from_fn(|i| total.sum[i] / n);
    let cov: [[f64; 5]; 5] = std::array::from_fn(|i| {
        std::array::from_fn(|j| (total.outer[i][j] / n - mean[i] * mean[j]) * n / (n - 1.0))
    });
    let se = |i: usize| (cov[i][i] / n).sqrt();

    let lhs = mean[0].ln();
    let rhs: f64 = (1..5).map(|i| 0.25 * mean[i].ln()).sum();
    // gradient of C = Σ¼·log m_f − log m_0
    let grad: [f64; 5] = std::array::from_fn(|i| {
        if i == 0 {
            -1.0 / mean[0]
        } else {
            0.25 / mean[i]
        }
    });
    let mut var_c = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            var_c += grad[i] * cov[i][j] * grad[j];
        }
    }
    let stderr = (var_c / n).sqrt();

    let expected_l1 = half_normal_mean(spec.mu, spec.sigma)?;
    let high = half_normal_mean(0.0, 2.0 * spec.sigma)?;
    let expected_bands = [
        half_normal_mean(4.0 * spec.mu, 2.0 * spec.sigma)?,
        high,
        high,
        high,
    ];
    let expected_c = expected_bands.iter().map(|v| 0.25 * v.ln()).sum::<f64>() - expected_l1.ln();

    Ok(LemmaReport {
        spec: *spec,
        image_size: size,
        images,
        windows: total.n,
        lhs_log_e_l1: lhs,
        rhs_quarter_sum: rhs,
        c_estimate: rhs - lhs,
        stderr,
        c_estimate_printed_prefactor: rhs - lhs - 16f64.ln(),
        l1_mean: mean[0],
        l1_stderr: se(0),
        per_band_means: [mean[1], mean[2], mean[3], mean[4]],
        per_band_stderr: [se(1), se(2), se(3), se(4)],
        expected_l1,
        expected_bands,
        expected_c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub mu_over_sigma: f64,
    pub c_estimate: f64,
    pub stderr: f64,
    pub closed_form: f64,
}

/// `C` as a function of `μ/σ`, reported rather than thresholded.
pub fn c_drift(ratios: &[f64], sigma: f64, samples: usize, seed: u64) -> Result<Vec<DriftPoint>> {
    ratios
        .iter()
        .map(|&r| {
            let spec = GaussianDiffSpec {
                mu: r * sigma,
                sigma,
                samples,
                seed,
            };
            let rep = lemma1_montecarlo(&spec, 64)?;
            Ok(DriftPoint {
                mu_over_sigma: r,
                c_estimate: rep.c_estimate,
                stderr: rep.stderr,
                closed_form: rep.expected_c,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    InsufficientSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub status: Status,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySuite {
    pub seed: u64,
    pub samples: usize,
    pub verdicts: Vec<Verdict>,
    pub drift: Vec<DriftPoint>,
}

impl VerifySuite {
    /// No check failed; insufficient-sample checks do not count as failures.
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.status != Status::Fail)
    }
}

fn pass_if(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

/// Runs every identity check with a fixed seed.
pub fn run_verification(samples: usize, seed: u64) -> Result<VerifySuite> {
    let mut verdicts = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_ortho: f64 = 0.0;
    for i in 0..20 {
        let s = Shape::new(1 + i % 3, 2 * (1 + i % 7), 2 * (1 + (i * 3) % 11));
        let a = Tensor::randn(s, 1.0, &mut rng);
        let b = Tensor::randn(s, 1.0, &mut rng);
        let r = verify_theorem1(&a, &b)?;
        worst_ratio = worst_ratio.max(((r.ratio_raw - 16.0) / 16.0).abs());
        worst_ortho = worst_ortho.max(((r.subband_sum_orthonormal_quarter - r.l2) / r.l2).abs());
    }
    verdicts.push(Verdict {
        check: "quad_identity_raw_ratio_16".into(),
        status: pass_if(worst_ratio <= 1e-9),
        detail: serde_json::json!({ "pairs": 20, "max_rel_err": worst_ratio, "tol": 1e-9 }),
    });
    verdicts.push(Verdict {
        check: "quad_identity_orthonormal_quarter_sum".into(),
        status: pass_if(worst_ortho <= 1e-9),
        detail: serde_json::json!({ "pairs": 20, "max_rel_err": worst_ortho, "tol": 1e-9 }),
    });

    let mut worst_q: f64 = 0.0;
    for i in 0..=40 {
        let ratio = -5.0 + 0.25 * i as f64;
        let q = half_normal_mean_quadrature(ratio, 1.0);
        worst_q = worst_q.max((half_normal_mean(ratio, 1.0)? - q).abs());
    }
    verdicts.push(Verdict {
        check: "half_normal_mean_vs_quadrature".into(),
        status: pass_if(worst_q <= 1e-8),
        detail: serde_json::json!({ "max_abs_err": worst_q, "tol": 1e-8, "mu_over_sigma": [-5.0, 5.0] }),
    });

    let mut drift = Vec::new();
    if samples < MIN_LEMMA_SAMPLES {
        for check in ["lemma_band_means", "lemma_c_sigma_invariance"] {
            verdicts.push(Verdict {
                check: check.into(),
                status: Status::InsufficientSamples,
                detail: serde_json::json!({ "samples": samples, "required": MIN_LEMMA_SAMPLES }),
            });
        }
    } else {
        let spec = |sigma: f64, seed: u64| GaussianDiffSpec {
            mu: 0.0,
            sigma,
            samples,
            seed,
        };
        let lo = lemma1_montecarlo(&spec(0.5, seed), 64)?;
        let hi = lemma1_montecarlo(&spec(2.0, seed.wrapping_add(1)), 64)?;
        let z = lo.max_z_score().max(hi.max_z_score());
        verdicts.push(Verdict {
            check: "lemma_band_means".into(),
            status: pass_if(z <= 4.0),
            detail: serde_json::json!({
                "max_z": z,
                "sigma_0.5": { "means": lo.per_band_means, "expected": lo.expected_bands, "l1": lo.l1_mean },
                "sigma_2.0": { "means": hi.per_band_means, "expected": hi.expected_bands, "l1": hi.l1_mean },
            }),
        });
        let band = 4.0 * (lo.stderr.powi(2) + hi.stderr.powi(2)).sqrt();
        let gap = (lo.c_estimate - hi.c_estimate).abs();
        verdicts.push(Verdict {
            check: "lemma_c_sigma_invariance".into(),
            status: pass_if(gap <= band),
            detail: serde_json::json!({
                "c_sigma_0.5": lo.c_estimate,
                "c_sigma_2.0": hi.c_estimate,
                "gap": gap,
                "band_4sigma": band,
                "c_mean_normalized_expected": 2f64.ln(),
                "c_printed_prefactor": [lo.c_estimate_printed_prefactor, hi.c_estimate_printed_prefactor],
            }),
        });
        drift = c_drift(&[0.0, 0.1, 0.25, 0.5, 1.0], 1.0, samples.min(200_000), seed)?;
    }

    Ok(VerifySuite {
        seed,
        samples,
        verdicts,
        drift,
    })
}

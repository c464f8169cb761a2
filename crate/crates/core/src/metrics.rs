//! Pixel-space and sub-band losses, SSIM, and corpus-level loss reports.
//!
//! Every `L_p` here is mean-normalized: `mean(|a - b|^p)` over all entries of
//! the compared tensors (or bands). Sub-band losses decompose the difference
//! `a - b`, which equals the difference of the two decompositions because the
//! transform is linear.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;
use crate::wavelet::{self, Filter, FilterBank, ScaleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn p(self) -> u8 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }

    fn apply(self, d: f64) -> f64 {
        match self {
            Norm::L1 => d.abs(),
            Norm::L2 => d * d,
        }
    }
}

fn mean_norm(values: &[f64], norm: Norm) -> f64 {
    let s: f64 = values.iter().map(|&d| norm.apply(d)).sum();
    s / values.len() as f64
}

/// `mean(|a - b|^p)`.
pub fn pixel_loss(a: &Tensor, b: &Tensor, norm: Norm) -> Result<f64> {
    a.expect_shape(b.shape())?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| norm.apply(x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// Loss between band `filter` of `LL^(level)(a)` and of `LL^(level)(b)`.
pub fn subband_loss(
    a: &Tensor,
    b: &Tensor,
    filter: Filter,
    level: usize,
    norm: Norm,
    mode: ScaleMode,
) -> Result<f64> {
    let diff = a.sub(b)?;
    let quad = wavelet::quad_at_level(&diff, level, &FilterBank::new(mode))?;
    Ok(mean_norm(quad.band(filter).data(), norm))
}

/// Sum of the three level-0 high-band L2 losses.
pub fn wavelet_loss(a: &Tensor, b: &Tensor, mode: ScaleMode) -> Result<f64> {
    wavelet_loss_k(a, b, 0, mode)
}

/// Multi-level wavelet loss: `Σ_{i=0..=k} Σ_{f∈{LH,HL,HH}} L_{2,f}(LL^(i)a, LL^(i)b)`.
pub fn wavelet_loss_k(a: &Tensor, b: &Tensor, k: usize, mode: ScaleMode) -> Result<f64> {
    let diff = a.sub(b)?;
    diff.expect_divisible(1 << (k + 1))?;
    let pyr = wavelet::decompose(&diff, k + 1, &FilterBank::new(mode))?;
    Ok(pyr
        .levels
        .iter()
        .map(|lvl| {
            mean_norm(lvl.lh.data(), Norm::L2)
                + mean_norm(lvl.hl.data(), Norm::L2)
                + mean_norm(lvl.hh.data(), Norm::L2)
        })
        .sum())
}

/// Weights of the total training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    pub lambda_id: f64,
    /// Not given a value by the source method; 0.1 mirrors `lambda_wave_ada`.
    pub lambda_wave: f64,
    pub lambda_wave_ada: f64,
    pub k: usize,
    #[serde(default)]
    pub mode: ScaleMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l2: 1.0,
            lambda_lpips: 0.8,
            lambda_id: 0.1,
            lambda_wave: 0.1,
            lambda_wave_ada: 0.1,
            k: 2,
            mode: ScaleMode::Orthonormal,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_l2", self.lambda_l2),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_id", self.lambda_id),
            ("lambda_wave", self.lambda_wave),
            ("lambda_wave_ada", self.lambda_wave_ada),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Argument(format!(
                    "{name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        if self.k == 0 {
            return Err(Error::Argument("k must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Alignment objective: `L1(Δ, Δ̂) + λ_wave,ADA · L^K_wave(Δ, Δ̂)`.
pub fn ada_loss(delta: &Tensor, delta_hat: &Tensor, w: &LossWeights) -> Result<f64> {
    let l1 = pixel_loss(delta, delta_hat, Norm::L1)?;
    if w.lambda_wave_ada == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + w.lambda_wave_ada * wavelet_loss_k(delta, delta_hat, w.k, w.mode)?)
}

/// An externally supplied image metric, e.g. a learned perceptual distance.
pub type MetricSlot<'a> = &'a (dyn Fn(&Tensor, &Tensor) -> Result<f64> + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageLossParts {
    pub l2: f64,
    pub perceptual: Option<f64>,
    pub identity: Option<f64>,
    pub total: f64,
}

pub fn image_loss_parts(
    x: &Tensor,
    x_hat: &Tensor,
    w: &LossWeights,
    perceptual: Option<MetricSlot<'_>>,
    identity: Option<MetricSlot<'_>>,
) -> Result<ImageLossParts> {
    let l2 = pixel_loss(x, x_hat, Norm::L2)?;
    let perceptual = perceptual.map(|m| m(x, x_hat)).transpose()?;
    let identity = identity.map(|m| m(x, x_hat)).transpose()?;
    let total = w.lambda_l2 * l2
        + w.lambda_lpips * perceptual.unwrap_or(0.0)
        + w.lambda_id * identity.unwrap_or(0.0);
    Ok(ImageLossParts {
        l2,
        perceptual,
        identity,
        total,
    })
}

/// `λ_L2·L2 + λ_LPIPS·perceptual + λ_id·identity`; absent slots contribute 0.
pub fn image_loss(
    x: &Tensor,
    x_hat: &Tensor,
    w: &LossWeights,
    perceptual: Option<MetricSlot<'_>>,
    identity: Option<MetricSlot<'_>>,
) -> Result<f64> {
    Ok(image_loss_parts(x, x_hat, w, perceptual, identity)?.total)
}

/// Decomposition of the total objective into its three summands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLoss {
    pub ada: f64,
    pub image: f64,
    /// Already multiplied by `lambda_wave`.
    pub wave: f64,
    pub total: f64,
}

pub fn total_loss(
    delta: &Tensor,
    delta_hat: &Tensor,
    x: &Tensor,
    x_hat: &Tensor,
    w: &LossWeights,
    perceptual: Option<MetricSlot<'_>>,
    identity: Option<MetricSlot<'_>>,
) -> Result<TotalLoss> {
    let ada = ada_loss(delta, delta_hat, w)?;
    let image = image_loss(x, x_hat, w, perceptual, identity)?;
    let wave = w.lambda_wave * wavelet_loss_k(x, x_hat, w.k, w.mode)?;
    Ok(TotalLoss {
        ada,
        image,
        wave,
        total: ada + image + wave,
    })
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOutcome {
    pub value: f64,
    /// Some entry of either input fell outside `[0, 1]`.
    pub out_of_range: bool,
}

/// Mean SSIM over all 8×8 windows (stride 1), averaged over channels.
///
/// Inputs smaller than the window use a single window covering the smaller
/// side.
pub fn ssim_checked(a: &Tensor, b: &Tensor) -> Result<SsimOutcome> {
    a.expect_shape(b.shape())?;
    if a.is_empty() {
        return Err(Error::Argument("ssim of empty image".into()));
    }
    let out_of_range = a
        .data()
        .iter()
        .chain(b.data())
        .any(|v| !(0.0..=1.0).contains(v));
    let (h, w) = (a.height(), a.width());
    let win = SSIM_WINDOW.min(h).min(w);
    let n = (win * win) as f64;
    let per_channel = par::map_indexed(a.channels(), |c| {
        let (pa, pb) = (a.channel(c), b.channel(c));
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..=h - win {
            for x in 0..=w - win {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    let row = (y + dy) * w + x;
                    for k in row..row + win {
                        let (va, vb) = (pa[k], pb[k]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        acc / count as f64
    });
    let value = per_channel.iter().sum::<f64>() / per_channel.len() as f64;
    Ok(SsimOutcome {
        value,
        out_of_range,
    })
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(ssim_checked(a, b)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubbandLoss {
    pub filter: Filter,
    pub level: usize,
    pub p: u8,
    pub value: f64,
    pub scale_mode: ScaleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pair_count: usize,
    pub k: usize,
    pub scale_mode: ScaleMode,
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
    pub wavelet_k: f64,
    /// One entry per (filter, level, p) for levels `0..=k`.
    pub subbands: Vec<SubbandLoss>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl LossReport {
    pub fn subband(&self, filter: Filter, level: usize, norm: Norm) -> Option<f64> {
        self.subbands
            .iter()
            .find(|s| s.filter == filter && s.level == level && s.p == norm.p())
            .map(|s| s.value)
    }

    /// CSV with columns `filter,level,p,scale_mode,value,log10_value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["filter", "level", "p", "scale_mode", "value", "log10_value"])?;
        for s in &self.subbands {
            wtr.write_record([
                s.filter.name().to_string(),
                s.level.to_string(),
                s.p.to_string(),
                s.scale_mode.to_string(),
                format!("{:e}", s.value),
                format!("{:e}", s.value.log10()),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct PairStats {
    l1: f64,
    l2: f64,
    ssim: f64,
    wavelet_k: f64,
    out_of_range: bool,
    // indexed [level][filter][norm]
    bands: Vec<[[f64; 2]; 4]>,
}

fn pair_stats(a: &Tensor, b: &Tensor, k: usize, mode: ScaleMode) -> Result<PairStats> {
    let diff = a.sub(b)?;
    diff.expect_divisible(1 << (k + 1))?;
    let bank = FilterBank::new(mode);
    let mut bands = Vec::with_capacity(k + 1);
    let mut current = diff.clone();
    let mut wavelet_k = 0.0;
    for _ in 0..=k {
        let quad = wavelet::haar_forward(&current, &bank)?;
        let mut row = [[0.0; 2]; 4];
        for (fi, f) in Filter::ALL.iter().enumerate() {
            let data = quad.band(*f).data();
            row[fi] = [mean_norm(data, Norm::L1), mean_norm(data, Norm::L2)];
        }
        wavelet_k += row[1][1] + row[2][1] + row[3][1];
        bands.push(row);
        current = quad.ll;
    }
    let s = ssim_checked(a, b)?;
    Ok(PairStats {
        l1: mean_norm(diff.data(), Norm::L1),
        l2: mean_norm(diff.data(), Norm::L2),
        ssim: s.value,
        wavelet_k,
        out_of_range: s.out_of_range,
        bands,
    })
}

/// Per-sub-band and aggregate losses averaged over `pairs`, for levels `0..=k`.
///
/// Pairs are evaluated in parallel and reduced in input order.
pub fn corpus_report(pairs: &[(Tensor, Tensor)], k: usize, mode: ScaleMode) -> Result<LossReport> {
    if pairs.is_empty() {
        return Err(Error::Argument(
            "corpus report needs at least one pair".into(),
        ));
    }
    let stats = par::map_indexed(pairs.len(), |i| {
        pair_stats(&pairs[i].0, &pairs[i].1, k, mode)
    });
    let stats = stats.into_iter().collect::<Result<Vec<_>>>()?;
    let n = stats.len() as f64;
    let mean = |f: &dyn Fn(&PairStats) -> f64| stats.iter().map(f).sum::<f64>() / n;

    let mut subbands = Vec::with_capacity((k + 1) * 8);
    for level in 0..=k {
        for (fi, filter) in Filter::ALL.iter().enumerate() {
            for (ni, norm) in [Norm::L1, Norm::L2].iter().enumerate() {
                subbands.push(SubbandLoss {
                    filter: *filter,
                    level,
                    p: norm.p(),
                    value: mean(&|s| s.bands[level][fi][ni]),
                    scale_mode: mode,
                });
            }
        }
    }
    let mut warnings = Vec::new();
    let flagged: Vec<usize> = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.out_of_range)
        .map(|(i, _)| i)
        .collect();
    if !flagged.is_empty() {
        warnings.push(format!("ssim inputs outside [0,1] for pair(s) {flagged:?}"));
    }
    Ok(LossReport {
        pair_count: stats.len(),
        k,
        scale_mode: mode,
        l1: mean(&|s| s.l1),
        l2: mean(&|s| s.l2),
        ssim: mean(&|s| s.ssim),
        wavelet_k: mean(&|s| s.wavelet_k),
        subbands,
        warnings,
    })
}

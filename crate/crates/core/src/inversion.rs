//! Latent-optimization regression, the residual alignment network and its
//! random-distortion augmentation, and the full fusion inversion pipeline.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Var};
use crate::corpus::reflect_index;
use crate::error::{Error, Result};
use crate::metrics::{self, LossWeights, Norm, TotalLoss};
use crate::par;
use crate::spectrum::{self, ReducedSpectrum};
use crate::synthesis::{
    self, FusionExtractor, FusionParams, FusionVars, Generator, GeneratorKind, LatentStack,
    SynthConfig,
};
use crate::tensor::{Shape, Tensor};
use crate::wavelet::ScaleMode;

/// One summand of the regression objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossTerm {
    L2,
    Wavelet { k: usize, weight: f64 },
    Spectral { weight: f64 },
}

impl LossTerm {
    pub fn name(&self) -> String {
        match self {
            LossTerm::L2 => "l2".into(),
            LossTerm::Wavelet { k, .. } => format!("wavelet{k}"),
            LossTerm::Spectral { .. } => "spectral".into(),
        }
    }

    pub fn weight(&self) -> f64 {
        match *self {
            LossTerm::L2 => 1.0,
            LossTerm::Wavelet { weight, .. } | LossTerm::Spectral { weight } => weight,
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossTerm::L2 => f.write_str("l2"),
            LossTerm::Wavelet { k, weight } => write!(f, "wavelet:{k}:{weight}"),
            LossTerm::Spectral { weight } => write!(f, "spectral:{weight}"),
        }
    }
}

impl FromStr for LossTerm {
    type Err = Error;
    /// `l2`, `wavelet:K[:W]` (W defaults to 0.1), `spectral:W`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|w| w.is_finite() && *w >= 0.0)
                .ok_or_else(|| Error::Argument(format!("bad weight '{v}' in '{s}'")))
        };
        match parts.as_slice() {
            ["l2"] => Ok(LossTerm::L2),
            ["wavelet", k] | ["wavelet", k, _] => {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad level count in '{s}'")))?;
                let weight = match parts.get(2) {
                    Some(w) => num(w)?,
                    None => 0.1,
                };
                Ok(LossTerm::Wavelet { k, weight })
            }
            ["spectral", w] => Ok(LossTerm::Spectral { weight: num(w)? }),
            _ => Err(Error::Argument(format!("unknown loss term '{s}'"))),
        }
    }
}

/// Parses a comma-separated list of [`LossTerm`]s.
pub fn parse_loss_terms(s: &str) -> Result<Vec<LossTerm>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionJob {
    pub target: Tensor,
    pub generator: GeneratorKind,
    pub synth: SynthConfig,
    pub loss_terms: Vec<LossTerm>,
    pub steps: usize,
    pub lr: f64,
    /// Seeds the initial latents.
    pub seed: u64,
    /// Also optimize generator weights.
    pub joint: bool,
}

impl RegressionJob {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.loss_terms.is_empty() {
            return Err(Error::Argument("at least one loss term is required".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        let s = self.target.shape();
        if s.height != s.width || !s.height.is_power_of_two() || s.height > 128 {
            return Err(Error::Argument(format!(
                "target must be square, power-of-two and at most 128, got {s}"
            )));
        }
        self.target.expect_shape(self.synth.output_shape())?;
        for t in &self.loss_terms {
            if let LossTerm::Wavelet { k, .. } = t {
                self.target.expect_divisible(1 << (k + 1))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Unweighted term values, in job order.
    pub terms: Vec<f64>,
    /// `Σ weight·term`.
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RegressionResult {
    pub latents: LatentStack,
    pub generator: Generator,
    pub initial_image: Tensor,
    pub final_image: Tensor,
    pub term_names: Vec<String>,
    pub trace: Vec<TraceRow>,
    pub target_spectrum: ReducedSpectrum,
    pub final_spectrum: ReducedSpectrum,
}

impl RegressionResult {
    pub fn final_l2(&self, target: &Tensor) -> Result<f64> {
        metrics::pixel_loss(&self.final_image, target, Norm::L2)
    }

    /// Squared distance between log reduced spectra of target and result.
    pub fn spectrum_distance(&self) -> f64 {
        spectrum::log_distance(
            &self.target_spectrum.log_bins(),
            &self.final_spectrum.log_bins(),
        )
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend(self.term_names.iter().cloned());
        header.push("total".into());
        w.write_record(&header)?;
        for r in &self.trace {
            let mut rec = vec![r.step.to_string()];
            rec.extend(r.terms.iter().map(|v| format!("{v:e}")));
            rec.push(format!("{:e}", r.total));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean shortfall `max(0, log target − log result)` over the top `frac` of
/// radial bins.
pub fn high_bin_deficit(target: &ReducedSpectrum, result: &ReducedSpectrum, frac: f64) -> f64 {
    let (t, r) = (target.log_bins(), result.log_bins());
    let n = t.len().min(r.len());
    let m = ((n as f64 * frac).ceil() as usize).clamp(1, n);
    (n - m..n).map(|i| (t[i] - r[i]).max(0.0)).sum::<f64>() / m as f64
}

fn record_objective(
    g: &mut Graph,
    image: Var,
    target: Var,
    terms: &[LossTerm],
    target_log: &[f64],
) -> Result<(Vec<Var>, Var)> {
    let mut vals = Vec::with_capacity(terms.len());
    let mut total: Option<Var> = None;
    for t in terms {
        let v = match *t {
            LossTerm::L2 => {
                let d = g.sub(image, target)?;
                g.mean_square(d)
            }
            LossTerm::Wavelet { k, .. } => {
                g.wavelet_loss_k(image, target, k, ScaleMode::Orthonormal)?
            }
            LossTerm::Spectral { .. } => g.spectral_loss(image, target_log)?,
        };
        vals.push(v);
        let wv = g.scalar_mul(v, t.weight());
        total = Some(match total {
            Some(acc) => g.add(acc, wv)?,
            None => wv,
        });
    }
    Ok((vals, total.expect("at least one term")))
}

/// Adam over the latent stack (and, with `joint`, the generator weights).
/// Deterministic for a given job.
pub fn latent_optimize(job: &RegressionJob) -> Result<RegressionResult> {
    job.validate()?;
    let mut gen = Generator::new(job.synth.clone(), job.generator)?;
    let mut latents = LatentStack::random(&job.synth, job.seed);
    let target_spectrum = spectrum::reduced_spectrum(&job.target)?;
    let target_log = target_spectrum.log_bins();
    let initial_image = synthesis::synthesize(&gen, &latents, None)?.image;

    let mut shapes: Vec<Shape> = latents.vectors.iter().map(Tensor::shape).collect();
    if job.joint {
        shapes.extend(gen.params.shapes());
    }
    let mut adam = AdamState::new(shapes);
    let acfg = AdamConfig {
        lr: job.lr,
        ..AdamConfig::default()
    };
    let mut trace = Vec::with_capacity(job.steps);
    for step in 0..job.steps {
        let mut g = Graph::new();
        let pv = gen.params.bind(&mut g, job.joint);
        let lv = latents.bind(&mut g, true);
        let tr = synthesis::build(&mut g, &gen, &pv, &lv, &[])?;
        let tv = g.constant(job.target.clone());
        let (vals, total) = record_objective(&mut g, tr.image, tv, &job.loss_terms, &target_log)?;
        trace.push(TraceRow {
            step,
            terms: vals.iter().map(|&v| g.scalar(v)).collect(),
            total: g.scalar(total),
        });
        let grads = g.backward(total)?;
        let mut gs: Vec<Tensor> = lv
            .iter()
            .zip(&latents.vectors)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        let mut refs: Vec<&mut Tensor> = latents.vectors.iter_mut().collect();
        if job.joint {
            gs.extend(
                pv.iter()
                    .zip(&gen.params.tensors)
                    .map(|(&v, t)| grads.get_or_zeros(v, t.shape())),
            );
            refs.extend(gen.params.tensors.iter_mut());
        }
        adam_step(&mut refs, &gs, &mut adam, &acfg)?;
    }
    let final_image = synthesis::synthesize(&gen, &latents, None)?.image;
    let final_spectrum = spectrum::reduced_spectrum(&final_image)?;
    Ok(RegressionResult {
        latents,
        generator: gen,
        initial_image,
        final_image,
        term_names: job.loss_terms.iter().map(LossTerm::name).collect(),
        trace,
        target_spectrum,
        final_spectrum,
    })
}

/// Outcome of the best-so-far envelope check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeVerdict {
    pub ok: bool,
    /// First window start whose envelope did not drop enough.
    pub violation: Option<usize>,
    /// First step at which the envelope reached the convergence level.
    pub converged_at: Option<usize>,
}

/// The running minimum of `totals` must fall by at least `min_rel_drop`
/// across every `window`-step span that starts before it reaches
/// `converged`. The raw trace may oscillate.
pub fn envelope_check(
    totals: &[f64],
    window: usize,
    min_rel_drop: f64,
    converged: f64,
) -> EnvelopeVerdict {
    let mut env = Vec::with_capacity(totals.len());
    let mut best = f64::INFINITY;
    for &t in totals {
        best = best.min(t);
        env.push(best);
    }
    let converged_at = env.iter().position(|&e| e <= converged);
    let stop = converged_at.unwrap_or(env.len());
    let violation = (0..stop)
        .filter(|i| i + window < env.len())
        .find(|&i| env[i + window] > (1.0 - min_rel_drop) * env[i]);
    EnvelopeVerdict {
        ok: violation.is_none(),
        violation,
        converged_at,
    }
}

/// Parameters of the random similarity warp plus erase patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub max_translate_frac: f64,
    pub max_rotate_deg: f64,
    pub scale_range: (f64, f64),
    pub erase_patches: usize,
    /// Patch side as a fraction of the image side.
    pub erase_size_frac: (f64, f64),
    pub seed: u64,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        DistortionSpec {
            max_translate_frac: 0.05,
            max_rotate_deg: 5.0,
            scale_range: (0.95, 1.05),
            erase_patches: 1,
            erase_size_frac: (0.1, 0.25),
            seed: 0,
        }
    }
}

impl DistortionSpec {
    pub fn identity() -> Self {
        DistortionSpec {
            max_translate_frac: 0.0,
            max_rotate_deg: 0.0,
            scale_range: (1.0, 1.0),
            erase_patches: 0,
            erase_size_frac: (0.0, 0.0),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_translate_frac >= 0.0
            && self.max_rotate_deg >= 0.0
            && self.scale_range.0 > 0.0
            && self.scale_range.0 <= self.scale_range.1
            && self.erase_size_frac.0 >= 0.0
            && self.erase_size_frac.0 <= self.erase_size_frac.1
            && self.erase_size_frac.1 <= 1.0
            && [
                self.max_translate_frac,
                self.max_rotate_deg,
                self.scale_range.1,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid distortion spec {self:?}")))
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Similarity warp about the image centre with bilinear sampling and
/// reflect borders. Output pixel `p` samples the input at
/// `c + R(−θ)(p − c − t)/s`, so content moves by `+t`.
pub fn warp_similarity(img: &Tensor, ty: f64, tx: f64, theta: f64, scale: f64) -> Tensor {
    if ty == 0.0 && tx == 0.0 && theta == 0.0 && scale == 1.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sn, cs) = theta.sin_cos();
    let planes = par::map_indexed(img.channels(), |c| {
        let src = img.channel(c);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy - ty;
                let dx = x as f64 - cx - tx;
                let sy = cy + (cs * dy - sn * dx) / scale;
                let sx = cx + (sn * dy + cs * dx) / scale;
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let at = |yy: f64, xx: f64| {
                    src[reflect_index(yy as isize, h) * w + reflect_index(xx as isize, w)]
                };
                out[y * w + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
            }
        }
        out
    });
    Tensor::from_vec(img.shape(), planes.concat()).expect("warp keeps shape")
}

/// Random similarity warp followed by zeroed rectangles; deterministic per
/// `spec.seed`.
pub fn random_distort(delta: &Tensor, spec: &DistortionSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (delta.height(), delta.width());
    let mt = spec.max_translate_frac;
    let ty = draw(&mut rng, -mt, mt) * h as f64;
    let tx = draw(&mut rng, -mt, mt) * w as f64;
    let md = spec.max_rotate_deg;
    let theta = draw(&mut rng, -md, md) * PI / 180.0;
    let scale = draw(&mut rng, spec.scale_range.0, spec.scale_range.1);
    let mut out = warp_similarity(delta, ty, tx, theta, scale);
    for _ in 0..spec.erase_patches {
        let fh = draw(&mut rng, spec.erase_size_frac.0, spec.erase_size_frac.1);
        let fw = draw(&mut rng, spec.erase_size_frac.0, spec.erase_size_frac.1);
        let ph = ((fh * h as f64).round() as usize).min(h);
        let pw = ((fw * w as f64).round() as usize).min(w);
        let y0 = rng.random_range(0..=h - ph);
        let x0 = rng.random_range(0..=w - pw);
        for c in 0..out.channels() {
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    out.set(c, y, x, 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Three 3×3 conv layers on `concat(X̂₀, Δ̃)` with a residual connection:
/// `Δ̂ = Δ̃ + net(X̂₀, Δ̃)`. The last layer starts at zero, so an untrained
/// model passes `Δ̃` through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaModel {
    pub image_channels: usize,
    pub hidden: usize,
    pub params: synthesis::ParamSet,
}

impl AdaModel {
    pub fn new(image_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ic = image_channels;
        let g = |s: Shape, fan: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(s, 1.0 / (fan as f64).sqrt(), rng)
        };
        let params = synthesis::ParamSet {
            names: ["c1.w", "c1.b", "c2.w", "c2.b", "c3.w", "c3.b"]
                .map(String::from)
                .to_vec(),
            tensors: vec![
                g(Shape::new(hidden, 2 * ic, 9), 18 * ic, &mut rng),
                Tensor::zeros(Shape::new(hidden, 1, 1)),
                g(Shape::new(hidden, hidden, 9), 9 * hidden, &mut rng),
                Tensor::zeros(Shape::new(hidden, 1, 1)),
                Tensor::zeros(Shape::new(ic, hidden, 9)),
                Tensor::zeros(Shape::new(ic, 1, 1)),
            ],
        };
        AdaModel {
            image_channels,
            hidden,
            params,
        }
    }

    pub fn build(&self, g: &mut Graph, pv: &[Var], x0: Var, delta_tilde: Var) -> Result<Var> {
        let ic = self.image_channels;
        if g.shape(x0).channels != ic {
            return Err(Error::shape(format!("{ic} image channels"), g.shape(x0)));
        }
        let inp = g.concat_channels(&[x0, delta_tilde])?;
        let mut h = inp;
        for (i, act) in [(0, true), (2, true), (4, false)] {
            let c = g.conv2d(h, pv[i])?;
            let c = g.add_bias(c, pv[i + 1])?;
            h = if act { g.leaky_relu(c) } else { c };
        }
        g.add(delta_tilde, h)
    }

    pub fn apply(&self, x0: &Tensor, delta_tilde: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let a = g.constant(x0.clone());
        let b = g.constant(delta_tilde.clone());
        let out = self.build(&mut g, &pv, a, b)?;
        Ok(g.value(out).clone())
    }
}

fn record_ada_loss(g: &mut Graph, delta_hat: Var, delta: Var, w: &LossWeights) -> Result<Var> {
    let d = g.sub(delta_hat, delta)?;
    let l1 = g.mean_abs(d);
    if w.lambda_wave_ada == 0.0 {
        return Ok(l1);
    }
    let wave = g.wavelet_loss_k(delta_hat, delta, w.k, w.mode)?;
    let wave = g.scalar_mul(wave, w.lambda_wave_ada);
    g.add(l1, wave)
}

/// `(X̂₀, Δ)` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaSample {
    pub x0: Tensor,
    pub delta: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaMetrics {
    /// `L1(Δ, Δ̂)`.
    pub l1: f64,
    /// `L^K_wave(Δ, Δ̂)`.
    pub wave: f64,
    /// `L1(Δ, Δ̃)`, the do-nothing baseline.
    pub l1_noop: f64,
    pub wave_noop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub spec: DistortionSpec,
}

impl Default for AdaTrainConfig {
    fn default() -> Self {
        AdaTrainConfig {
            epochs: 40,
            lr: 2e-3,
            hidden: 16,
            seed: 0,
            weights: LossWeights::default(),
            spec: DistortionSpec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaOutcome {
    pub model: AdaModel,
    /// Mean objective per epoch.
    pub epoch_loss: Vec<f64>,
    pub heldout: AdaMetrics,
}

// Distortion seed for (run seed, epoch, sample); held-out uses epoch u64::MAX.
fn distortion_seed(seed: u64, epoch: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_mul(0x1000_0000_01b3))
        .wrapping_add(i as u64)
}

/// Held-out metrics of `model` on fixed distortions of `heldout`.
pub fn ada_evaluate(
    model: &AdaModel,
    heldout: &[AdaSample],
    cfg: &AdaTrainConfig,
) -> Result<AdaMetrics> {
    if heldout.is_empty() {
        return Err(Error::Argument("empty held-out set".into()));
    }
    let w = &cfg.weights;
    let per = par::map_indexed(heldout.len(), |i| -> Result<[f64; 4]> {
        let s = &heldout[i];
        let spec = cfg.spec.with_seed(distortion_seed(cfg.seed, u64::MAX, i));
        let dt = random_distort(&s.delta, &spec)?;
        let dh = model.apply(&s.x0, &dt)?;
        Ok([
            metrics::pixel_loss(&s.delta, &dh, Norm::L1)?,
            metrics::wavelet_loss_k(&s.delta, &dh, w.k, w.mode)?,
            metrics::pixel_loss(&s.delta, &dt, Norm::L1)?,
            metrics::wavelet_loss_k(&s.delta, &dt, w.k, w.mode)?,
        ])
    });
    let mut acc = [0.0; 4];
    for r in per {
        for (a, v) in acc.iter_mut().zip(r?) {
            *a += v;
        }
    }
    let n = heldout.len() as f64;
    Ok(AdaMetrics {
        l1: acc[0] / n,
        wave: acc[1] / n,
        l1_noop: acc[2] / n,
        wave_noop: acc[3] / n,
    })
}

/// Trains the alignment network with a fresh distortion of `Δ` per sample
/// and epoch. Samples are visited in a seed-determined order.
pub fn ada_train(
    dataset: &[AdaSample],
    heldout: &[AdaSample],
    cfg: &AdaTrainConfig,
) -> Result<AdaOutcome> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty ADA dataset".into()));
    }
    cfg.weights.validate()?;
    let shape = dataset[0].x0.shape();
    for s in dataset.iter().chain(heldout) {
        s.x0.expect_shape(shape)?;
        s.delta.expect_shape(shape)?;
    }
    let mut model = AdaModel::new(shape.channels, cfg.hidden, cfg.seed);
    let mut adam = AdamState::new(model.params.shapes());
    let acfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xADA);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, order_rng.random_range(0..=i));
        }
        let mut sum = 0.0;
        for &i in &order {
            let s = &dataset[i];
            let spec = cfg
                .spec
                .with_seed(distortion_seed(cfg.seed, epoch as u64, i));
            let dt = random_distort(&s.delta, &spec)?;
            let mut g = Graph::new();
            let pv = model.params.bind(&mut g, true);
            let x0 = g.constant(s.x0.clone());
            let dtv = g.constant(dt);
            let dv = g.constant(s.delta.clone());
            let dh = model.build(&mut g, &pv, x0, dtv)?;
            let loss = record_ada_loss(&mut g, dh, dv, &cfg.weights)?;
            sum += g.scalar(loss);
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = pv
                .iter()
                .zip(&model.params.tensors)
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect();
            let mut refs: Vec<&mut Tensor> = model.params.tensors.iter_mut().collect();
            adam_step(&mut refs, &gs, &mut adam, &acfg)?;
        }
        epoch_loss.push(sum / dataset.len() as f64);
    }
    let heldout = if heldout.is_empty() {
        ada_evaluate(&model, dataset, cfg)?
    } else {
        ada_evaluate(&model, heldout, cfg)?
    };
    Ok(AdaOutcome {
        model,
        epoch_loss,
        heldout,
    })
}

/// Intermediate tensors and the loss decomposition of one fused inversion.
#[derive(Debug, Clone)]
pub struct FusionOutcome {
    pub x0: Tensor,
    pub delta: Tensor,
    pub delta_tilde: Tensor,
    pub delta_hat: Tensor,
    pub fusion: Vec<FusionParams>,
    pub x_hat: Tensor,
    pub loss: TotalLoss,
}

/// `X̂₀ = G(w)`, `Δ = X − X̂₀`, `Δ̂ = ADA(X̂₀, distort(Δ))`, fusion maps from
/// `Δ̂`, then `X̂ = G(w; fusion)`. `fusion_override` replaces the extracted
/// maps when given.
pub fn invert_with_fusion(
    target: &Tensor,
    base_latents: &LatentStack,
    gen: &Generator,
    ada: &AdaModel,
    extractor: &FusionExtractor,
    spec: &DistortionSpec,
    weights: &LossWeights,
    fusion_override: Option<&[FusionParams]>,
) -> Result<FusionOutcome> {
    target.expect_shape(gen.cfg.output_shape())?;
    let x0 = synthesis::synthesize(gen, base_latents, None)?.image;
    let delta = target.sub(&x0)?;
    let delta_tilde = random_distort(&delta, spec)?;
    let delta_hat = ada.apply(&x0, &delta_tilde)?;
    let fusion = match fusion_override {
        Some(f) => f.to_vec(),
        None => synthesis::fusion_extract(&gen.cfg, extractor, &delta_hat)?,
    };
    let x_hat = synthesis::synthesize(gen, base_latents, Some(&fusion))?.image;
    let loss = metrics::total_loss(&delta, &delta_hat, target, &x_hat, weights, None, None)?;
    Ok(FusionOutcome {
        x0,
        delta,
        delta_tilde,
        delta_hat,
        fusion,
        x_hat,
        loss,
    })
}

/// One row of the ablation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub config: String,
    /// Held-out `L1(Δ, Δ̂)`.
    pub l1_delta: f64,
    /// Held-out `L^K_wave(Δ, Δ̂)`.
    pub wave_delta: f64,
    /// Held-out `L2(X, X̂)`.
    pub l2_image: f64,
    /// Held-out `SSIM(X, X̂)`.
    pub ssim_image: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    pub synth: SynthConfig,
    pub images: usize,
    pub heldout: usize,
    /// Latent-fit steps that produce the low-rate inversion `X̂₀`.
    pub fit_steps: usize,
    pub fit_lr: f64,
    pub ada: AdaTrainConfig,
    /// Joint ADA + extractor training epochs for the fusion row.
    pub fusion_epochs: usize,
    pub extractor_hidden: usize,
    /// Replace the trained fusion maps with `g ≡ 1, h ≡ 0`.
    pub identity_fusion: bool,
    pub seed: u64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            synth: SynthConfig {
                levels: 3,
                channels: vec![16, 16, 8],
                style_dim: 16,
                fusion_feature_levels: [1].into_iter().collect(),
                fusion_wavelet_level: 2,
                ..SynthConfig::default()
            },
            images: 20,
            heldout: 4,
            fit_steps: 150,
            fit_lr: 0.05,
            ada: AdaTrainConfig {
                epochs: 30,
                ..AdaTrainConfig::default()
            },
            fusion_epochs: 30,
            extractor_hidden: 8,
            identity_fusion: false,
            seed: 0,
        }
    }
}

/// Procedural targets, their low-rate latent fits `X̂₀`, and the latents.
pub struct InversionCorpus {
    pub targets: Vec<Tensor>,
    pub latents: Vec<LatentStack>,
    pub x0: Vec<Tensor>,
}

/// Fits every texture briefly with an L2 latent optimization; the short
/// budget leaves the high-frequency residual the ladder works on.
pub fn inversion_corpus(gen: &Generator, cfg: &LadderConfig) -> Result<InversionCorpus> {
    let targets = crate::corpus::texture_corpus(cfg.images, gen.cfg.output_shape(), cfg.seed);
    let fits = par::map_indexed(targets.len(), |i| -> Result<(LatentStack, Tensor)> {
        let job = RegressionJob {
            target: targets[i].clone(),
            generator: gen.kind,
            synth: gen.cfg.clone(),
            loss_terms: vec![LossTerm::L2],
            steps: cfg.fit_steps,
            lr: cfg.fit_lr,
            seed: cfg.seed.wrapping_add(1000 + i as u64),
            joint: false,
        };
        let r = latent_optimize(&job)?;
        Ok((r.latents, r.final_image))
    });
    let mut latents = Vec::with_capacity(targets.len());
    let mut x0 = Vec::with_capacity(targets.len());
    for f in fits {
        let (l, x) = f?;
        latents.push(l);
        x0.push(x);
    }
    Ok(InversionCorpus {
        targets,
        latents,
        x0,
    })
}

fn image_metrics(
    gen: &Generator,
    corpus: &InversionCorpus,
    idx: &[usize],
    ada: &AdaModel,
    extractor: Option<&FusionExtractor>,
    cfg: &LadderConfig,
) -> Result<(f64, f64)> {
    let ident: Vec<FusionParams> = FusionExtractor::targets_for(&gen.cfg, gen.kind)
        .into_iter()
        .map(|t| FusionParams::identity(t, &gen.cfg))
        .collect();
    let per = par::map_indexed(idx.len(), |j| -> Result<(f64, f64)> {
        let i = idx[j];
        let x_hat = match extractor {
            None => corpus.x0[i].clone(),
            Some(ex) => {
                let spec = cfg
                    .ada
                    .spec
                    .with_seed(distortion_seed(cfg.ada.seed, u64::MAX, j));
                invert_with_fusion(
                    &corpus.targets[i],
                    &corpus.latents[i],
                    gen,
                    ada,
                    ex,
                    &spec,
                    &cfg.ada.weights,
                    cfg.identity_fusion.then_some(ident.as_slice()),
                )?
                .x_hat
            }
        };
        Ok((
            metrics::pixel_loss(&corpus.targets[i], &x_hat, Norm::L2)?,
            metrics::ssim(&corpus.targets[i], &x_hat)?,
        ))
    });
    let (mut l2, mut ss) = (0.0, 0.0);
    for r in per {
        let (a, b) = r?;
        l2 += a;
        ss += b;
    }
    Ok((l2 / idx.len() as f64, ss / idx.len() as f64))
}

/// Joint training of ADA and the fusion extractor on the image objective
/// `L_ADA + L2(X, X̂) + λ_wave·L^K_wave(X, X̂)` with one optimizer.
pub fn fusion_train(
    gen: &Generator,
    corpus: &InversionCorpus,
    train: &[usize],
    ada: &mut AdaModel,
    extractor: &mut FusionExtractor,
    cfg: &LadderConfig,
) -> Result<Vec<f64>> {
    let w = cfg.ada.weights;
    let mut shapes = ada.params.shapes();
    shapes.extend(extractor.params.shapes());
    let mut adam = AdamState::new(shapes);
    let acfg = AdamConfig {
        lr: cfg.ada.lr,
        ..AdamConfig::default()
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF05E);
    let mut losses = Vec::with_capacity(cfg.fusion_epochs);
    for epoch in 0..cfg.fusion_epochs {
        let mut order = train.to_vec();
        for i in (1..order.len()).rev() {
            order.swap(i, order_rng.random_range(0..=i));
        }
        let mut sum = 0.0;
        for &i in &order {
            let delta = corpus.targets[i].sub(&corpus.x0[i])?;
            let spec = cfg
                .ada
                .spec
                .with_seed(distortion_seed(cfg.ada.seed, epoch as u64, i));
            let dt = random_distort(&delta, &spec)?;
            let mut g = Graph::new();
            let av = ada.params.bind(&mut g, true);
            let ev = extractor.params.bind(&mut g, true);
            let gv = gen.params.bind(&mut g, false);
            let lv = corpus.latents[i].bind(&mut g, false);
            let x0 = g.constant(corpus.x0[i].clone());
            let dtv = g.constant(dt);
            let dv = g.constant(delta);
            let xv = g.constant(corpus.targets[i].clone());
            let dh = ada.build(&mut g, &av, x0, dtv)?;
            let l_ada = record_ada_loss(&mut g, dh, dv, &w)?;
            let sites: Vec<FusionVars> =
                synthesis::build_extractor(&mut g, &gen.cfg, extractor, &ev, dh)?;
            let tr = synthesis::build(&mut g, gen, &gv, &lv, &sites)?;
            let diff = g.sub(tr.image, xv)?;
            let l2 = g.mean_square(diff);
            let l2 = g.scalar_mul(l2, w.lambda_l2);
            let wave = g.wavelet_loss_k(tr.image, xv, w.k, w.mode)?;
            let wave = g.scalar_mul(wave, w.lambda_wave);
            let img = g.add(l2, wave)?;
            let total = g.add(l_ada, img)?;
            sum += g.scalar(total);
            let grads = g.backward(total)?;
            let mut gs: Vec<Tensor> = av
                .iter()
                .zip(&ada.params.tensors)
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect();
            gs.extend(
                ev.iter()
                    .zip(&extractor.params.tensors)
                    .map(|(&v, t)| grads.get_or_zeros(v, t.shape())),
            );
            let mut refs: Vec<&mut Tensor> = ada.params.tensors.iter_mut().collect();
            refs.extend(extractor.params.tensors.iter_mut());
            adam_step(&mut refs, &gs, &mut adam, &acfg)?;
        }
        losses.push(sum / train.len() as f64);
    }
    Ok(losses)
}

/// The three-row ladder: ADA without wavelet loss, ADA with it, and the
/// latter plus trained fusion. The first two rows report `X̂ = X̂₀`. With
/// `include_fusion` off only the first two rows are produced.
pub fn ablation_ladder(cfg: &LadderConfig, include_fusion: bool) -> Result<Vec<LadderRow>> {
    if cfg.heldout == 0 || cfg.heldout >= cfg.images {
        return Err(Error::Argument("need 0 < heldout < images".into()));
    }
    let gen = Generator::new(cfg.synth.clone(), GeneratorKind::Wavelet)?;
    let corpus = inversion_corpus(&gen, cfg)?;
    let n_train = cfg.images - cfg.heldout;
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..cfg.images).collect();
    let sample = |i: usize| -> Result<AdaSample> {
        Ok(AdaSample {
            x0: corpus.x0[i].clone(),
            delta: corpus.targets[i].sub(&corpus.x0[i])?,
        })
    };
    let train_s = train
        .iter()
        .map(|&i| sample(i))
        .collect::<Result<Vec<_>>>()?;
    let test_s = test
        .iter()
        .map(|&i| sample(i))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(3);
    let mut plain = cfg.ada.clone();
    plain.weights.lambda_wave_ada = 0.0;
    let base = ada_train(&train_s, &test_s, &plain)?;
    let (l2, ss) = image_metrics(&gen, &corpus, &test, &base.model, None, cfg)?;
    rows.push(LadderRow {
        config: "ada_l1".into(),
        l1_delta: base.heldout.l1,
        wave_delta: base.heldout.wave,
        l2_image: l2,
        ssim_image: ss,
    });

    let waved = ada_train(&train_s, &test_s, &cfg.ada)?;
    rows.push(LadderRow {
        config: "ada_l1_wavelet".into(),
        l1_delta: waved.heldout.l1,
        wave_delta: waved.heldout.wave,
        l2_image: l2,
        ssim_image: ss,
    });

    if !include_fusion {
        return Ok(rows);
    }
    let mut ada = waved.model.clone();
    let mut ex = FusionExtractor::new(&gen.cfg, gen.kind, cfg.extractor_hidden, cfg.seed ^ 0xE7)?;
    if !cfg.identity_fusion {
        fusion_train(&gen, &corpus, &train, &mut ada, &mut ex, cfg)?;
    }
    let m = ada_evaluate(&ada, &test_s, &cfg.ada)?;
    let (l2, ss) = image_metrics(&gen, &corpus, &test, &ada, Some(&ex), cfg)?;
    rows.push(LadderRow {
        config: "ada_l1_wavelet_fusion".into(),
        l1_delta: m.l1,
        wave_delta: m.wave,
        l2_image: l2,
        ssim_image: ss,
    });
    Ok(rows)
}

pub fn write_ladder_csv<W: Write>(rows: &[LadderRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config", "l1_delta", "wave_delta", "l2_image", "ssim_image"])?;
    for r in rows {
        w.write_record([
            r.config.clone(),
            format!("{:e}", r.l1_delta),
            format!("{:e}", r.wave_delta),
            format!("{:e}", r.l2_image),
            format!("{:e}", r.ssim_image),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            levels: 2,
            channels: vec![6, 4],
            style_dim: 8,
            fusion_feature_levels: [0].into_iter().collect(),
            fusion_wavelet_level: 1,
            ..SynthConfig::default()
        }
    }

    fn tiny_job(steps: usize, terms: Vec<LossTerm>) -> RegressionJob {
        let cfg = tiny_cfg();
        let gen = Generator::new(cfg.clone(), GeneratorKind::Wavelet).unwrap();
        let target = synthesis::synthesize(&gen, &LatentStack::random(&cfg, 99), None)
            .unwrap()
            .image;
        RegressionJob {
            target,
            generator: GeneratorKind::Wavelet,
            synth: cfg,
            loss_terms: terms,
            steps,
            lr: 0.05,
            seed: 1,
            joint: false,
        }
    }

    #[test]
    fn parse_terms() {
        let t = parse_loss_terms("l2,wavelet:2,spectral:0.1").unwrap();
        assert_eq!(
            t,
            vec![
                LossTerm::L2,
                LossTerm::Wavelet { k: 2, weight: 0.1 },
                LossTerm::Spectral { weight: 0.1 }
            ]
        );
        assert!(parse_loss_terms("l3").is_err());
        assert!(parse_loss_terms("spectral:-1").is_err());
    }

    #[test]
    fn zero_steps_echo_init() {
        let r = latent_optimize(&tiny_job(0, vec![LossTerm::L2])).unwrap();
        assert!(r.trace.is_empty());
        assert!(r.final_image.bit_eq(&r.initial_image));
        assert_eq!(r.latents, LatentStack::random(&tiny_cfg(), 1));
    }

    #[test]
    fn optimization_is_deterministic_and_descends() {
        let job = tiny_job(60, vec![LossTerm::L2]);
        let a = latent_optimize(&job).unwrap();
        let b = latent_optimize(&job).unwrap();
        assert!(a.final_image.bit_eq(&b.final_image));
        assert!(a.trace.last().unwrap().total < 0.5 * a.trace[0].total);
    }

    #[test]
    fn spectral_term_keeps_schema() {
        let a = latent_optimize(&tiny_job(3, vec![LossTerm::L2])).unwrap();
        let b = latent_optimize(&tiny_job(
            3,
            vec![LossTerm::L2, LossTerm::Spectral { weight: 0.1 }],
        ))
        .unwrap();
        assert_eq!(a.latents.vectors.len(), b.latents.vectors.len());
        assert_eq!(b.term_names, vec!["l2", "spectral"]);
        let r = &b.trace[1];
        assert_eq!(r.total, r.terms[0] + 0.1 * r.terms[1]);
    }

    #[test]
    fn job_validation() {
        assert!(latent_optimize(&tiny_job(1, vec![])).is_err());
        let mut j = tiny_job(1, vec![LossTerm::L2]);
        j.target = Tensor::zeros(Shape::new(3, 12, 12));
        assert!(latent_optimize(&j).is_err());
    }

    #[test]
    fn envelope() {
        let t: Vec<f64> = (0..100)
            .map(|i| 1.0 / (1.0 + i as f64) + if i % 2 == 0 { 0.5 } else { 0.0 })
            .collect();
        assert!(envelope_check(&t, 10, 0.01, 0.0).ok);
        let flat = vec![1.0; 50];
        let v = envelope_check(&flat, 10, 0.01, 0.0);
        assert_eq!(v.violation, Some(0));
        assert!(envelope_check(&flat, 10, 0.01, 1.0).ok);
    }

    #[test]
    fn identity_distortion_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::randn(Shape::new(2, 9, 11), 1.0, &mut rng);
        assert!(random_distort(&t, &DistortionSpec::identity())
            .unwrap()
            .bit_eq(&t));
    }

    #[test]
    fn translation_moves_impulse() {
        let mut t = Tensor::zeros(Shape::new(1, 9, 9));
        t.set(0, 4, 3, 1.0);
        let w = warp_similarity(&t, 0.0, 2.0, 0.0, 1.0);
        assert_eq!(w.at(0, 4, 5), 1.0);
        assert_eq!(w.sum(), 1.0);
        let w = warp_similarity(&t, 2.0, 0.0, 0.0, 1.0);
        assert_eq!(w.at(0, 6, 3), 1.0);
    }

    #[test]
    fn distortion_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(Shape::new(3, 16, 16), 1.0, &mut rng);
        let s = DistortionSpec::default().with_seed(4);
        let a = random_distort(&t, &s).unwrap();
        assert!(a.bit_eq(&random_distort(&t, &s).unwrap()));
        assert!(!a.bit_eq(&random_distort(&t, &s.with_seed(5)).unwrap()));
        assert!(!a.bit_eq(&t));
    }

    #[test]
    fn untrained_ada_passes_residual_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = AdaModel::new(3, 4, 0);
        let x0 = Tensor::randn(Shape::new(3, 8, 8), 1.0, &mut rng);
        let d = Tensor::randn(Shape::new(3, 8, 8), 1.0, &mut rng);
        assert!(m.apply(&x0, &d).unwrap().bit_eq(&d));
    }

    #[test]
    fn plain_l1_objective_matches_pixel_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(Shape::new(3, 8, 8), 1.0, &mut rng);
        let b = Tensor::randn(Shape::new(3, 8, 8), 1.0, &mut rng);
        let w = LossWeights {
            lambda_wave_ada: 0.0,
            ..LossWeights::default()
        };
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = record_ada_loss(&mut g, av, bv, &w).unwrap();
        assert_eq!(g.scalar(l), metrics::pixel_loss(&a, &b, Norm::L1).unwrap());
        let w = LossWeights::default();
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = record_ada_loss(&mut g, av, bv, &w).unwrap();
        assert!((g.scalar(l) - metrics::ada_loss(&b, &a, &w).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ada_train_rejects_empty() {
        assert!(ada_train(&[], &[], &AdaTrainConfig::default()).is_err());
    }

    #[test]
    fn identity_fusion_pipeline_reproduces_x0() {
        let cfg = tiny_cfg();
        let gen = Generator::new(cfg.clone(), GeneratorKind::Wavelet).unwrap();
        let z = LatentStack::random(&cfg, 3);
        let target = crate::corpus::texture(cfg.output_shape(), 1);
        let ada = AdaModel::new(3, 4, 0);
        let ex = FusionExtractor::new(&cfg, gen.kind, 4, 0).unwrap();
        let ident: Vec<FusionParams> = FusionExtractor::targets_for(&cfg, gen.kind)
            .into_iter()
            .map(|t| FusionParams::identity(t, &cfg))
            .collect();
        let w = LossWeights::default();
        let o = invert_with_fusion(
            &target,
            &z,
            &gen,
            &ada,
            &ex,
            &DistortionSpec::default(),
            &w,
            Some(&ident),
        )
        .unwrap();
        assert!(o.x_hat.bit_eq(&o.x0));
        let parts = o.loss;
        assert_eq!(parts.total, parts.ada + parts.image + parts.wave);
        let want_image = metrics::pixel_loss(&target, &o.x_hat, Norm::L2).unwrap();
        assert_eq!(parts.image, want_image);
        let want_ada = metrics::ada_loss(&o.delta, &o.delta_hat, &w).unwrap();
        assert_eq!(parts.ada, want_ada);
    }
}

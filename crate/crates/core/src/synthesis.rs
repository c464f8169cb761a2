//! Desk-scale style generator that grows its image through predicted Haar
//! coefficients, a pixel-skip baseline with the same skeleton, and the
//! gated scale-and-shift fusion sites fed from a residual extractor.
//!
//! Everything is expressed as [`Graph`] builders so the same code serves
//! plain synthesis, latent optimization and joint training.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imageio::ByteReader;
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{BandQuad, FilterBank};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub base_resolution: usize,
    pub levels: usize,
    pub channels: Vec<usize>,
    pub image_channels: usize,
    pub style_dim: usize,
    pub seed: u64,
    pub fusion_feature_levels: BTreeSet<usize>,
    pub fusion_wavelet_level: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_resolution: 4,
            levels: 5,
            channels: vec![64, 64, 32, 16, 8],
            image_channels: 3,
            style_dim: 64,
            seed: 0,
            fusion_feature_levels: [2, 3].into_iter().collect(),
            fusion_wavelet_level: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.channels.len() != self.levels {
            return bad(format!(
                "{} channel widths for {} levels",
                self.channels.len(),
                self.levels
            ));
        }
        if self.base_resolution == 0
            || self.image_channels == 0
            || self.style_dim == 0
            || self.channels.contains(&0)
        {
            return bad("sizes must be positive".into());
        }
        if self.fusion_wavelet_level >= self.levels {
            return bad(format!(
                "wavelet fusion level {} out of range 0..{}",
                self.fusion_wavelet_level, self.levels
            ));
        }
        if let Some(&m) = self.fusion_feature_levels.iter().next_back() {
            if m >= self.fusion_wavelet_level {
                return bad(format!(
                    "feature fusion level {m} must precede wavelet fusion level {}",
                    self.fusion_wavelet_level
                ));
            }
        }
        Ok(())
    }

    /// Side of level-`l` features (and of the coefficients predicted there).
    pub fn resolution(&self, level: usize) -> usize {
        self.base_resolution << level
    }

    pub fn output_resolution(&self) -> usize {
        self.base_resolution << self.levels
    }

    pub fn output_shape(&self) -> Shape {
        let r = self.output_resolution();
        Shape::new(self.image_channels, r, r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Wavelet,
    Pixel,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorKind::Wavelet => "wavelet",
            GeneratorKind::Pixel => "pixel",
        })
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wavelet" => Ok(GeneratorKind::Wavelet),
            "pixel" => Ok(GeneratorKind::Pixel),
            _ => Err(Error::Argument(format!("unknown generator '{s}'"))),
        }
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Argument(format!("missing parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn shapes(&self) -> Vec<Shape> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    /// Puts every tensor on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn gaussian(shape: Shape, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Generator weights plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub cfg: SynthConfig,
    pub kind: GeneratorKind,
    pub params: ParamSet,
}

impl Generator {
    /// Random initialization from `cfg.seed`: Gaussian weights scaled by
    /// `1/√fan_in`, affine biases at one, other biases at zero, constant
    /// input at one.
    pub fn new(cfg: SynthConfig, kind: GeneratorKind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamSet::default();
        let b = cfg.base_resolution;
        p.push(
            "const".into(),
            Tensor::filled(Shape::new(cfg.channels[0], b, b), 1.0),
        );
        let ic = cfg.image_channels;
        let d = cfg.style_dim;
        for l in 0..cfg.levels {
            let c = cfg.channels[l];
            p.push(
                format!("l{l}.affine.w"),
                gaussian(Shape::new(c, 1, d), d, &mut rng),
            );
            p.push(
                format!("l{l}.affine.b"),
                Tensor::filled(Shape::new(c, 1, 1), 1.0),
            );
            p.push(
                format!("l{l}.conv.w"),
                gaussian(Shape::new(c, c, 9), 9 * c, &mut rng),
            );
            p.push(format!("l{l}.conv.b"), Tensor::zeros(Shape::new(c, 1, 1)));
            match kind {
                GeneratorKind::Wavelet => {
                    p.push(
                        format!("l{l}.twav.w"),
                        gaussian(Shape::new(4 * ic, c, 1), c, &mut rng),
                    );
                }
                GeneratorKind::Pixel => {
                    p.push(
                        format!("l{l}.rgb.w"),
                        gaussian(Shape::new(ic, c, 9), 9 * c, &mut rng),
                    );
                    p.push(format!("l{l}.rgb.b"), Tensor::zeros(Shape::new(ic, 1, 1)));
                }
            }
            if l + 1 < cfg.levels {
                let n = cfg.channels[l + 1];
                p.push(
                    format!("l{l}.up.w"),
                    gaussian(Shape::new(n, c, 9), 9 * c, &mut rng),
                );
                p.push(format!("l{l}.up.b"), Tensor::zeros(Shape::new(n, 1, 1)));
            }
        }
        Ok(Generator {
            cfg,
            kind,
            params: p,
        })
    }

    pub fn check_params(&self) -> Result<()> {
        let fresh = Generator::new(self.cfg.clone(), self.kind)?;
        if fresh.params.names != self.params.names {
            return Err(Error::Argument(
                "parameter names do not match the config".into(),
            ));
        }
        for (t, f) in self.params.tensors.iter().zip(&fresh.params.tensors) {
            t.expect_shape(f.shape())?;
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> Shape {
        Shape::new(1, 1, self.cfg.style_dim)
    }
}

/// One style vector per level, each `1×1×D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStack {
    pub vectors: Vec<Tensor>,
}

impl LatentStack {
    pub fn random(cfg: &SynthConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentStack {
            vectors: (0..cfg.levels)
                .map(|_| Tensor::randn(Shape::new(1, 1, cfg.style_dim), 1.0, &mut rng))
                .collect(),
        }
    }

    pub fn validate(&self, cfg: &SynthConfig) -> Result<()> {
        if self.vectors.len() != cfg.levels {
            return Err(Error::Argument(format!(
                "{} latents for {} levels",
                self.vectors.len(),
                cfg.levels
            )));
        }
        for v in &self.vectors {
            v.expect_shape(Shape::new(1, 1, cfg.style_dim))?;
            if !v.is_finite() {
                return Err(Error::Argument("latent contains non-finite values".into()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.vectors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionTarget {
    /// Post-ModConv feature of the given level.
    Feature(usize),
    /// Stacked coefficient maps predicted at the given level.
    Wavelet(usize),
}

impl FusionTarget {
    pub fn level(self) -> usize {
        match self {
            FusionTarget::Feature(l) | FusionTarget::Wavelet(l) => l,
        }
    }

    /// Shape of the tensor fused at this site.
    pub fn shape(self, cfg: &SynthConfig) -> Shape {
        let r = cfg.resolution(self.level());
        match self {
            FusionTarget::Feature(l) => Shape::new(cfg.channels[l], r, r),
            FusionTarget::Wavelet(_) => Shape::new(4 * cfg.image_channels, r, r),
        }
    }
}

/// `x ← g ⊙ x + h` at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub g: Tensor,
    pub h: Tensor,
    pub target: FusionTarget,
}

impl FusionParams {
    /// `g ≡ 1, h ≡ 0`.
    pub fn identity(target: FusionTarget, cfg: &SynthConfig) -> Self {
        let s = target.shape(cfg);
        FusionParams {
            g: Tensor::filled(s, 1.0),
            h: Tensor::zeros(s),
            target,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> FusionVars {
        FusionVars {
            g: g.leaf(self.g.clone(), trainable),
            h: g.leaf(self.h.clone(), trainable),
            target: self.target,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub g: Var,
    pub h: Var,
    pub target: FusionTarget,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    /// `F′_ℓ` after fusion.
    pub features: Vec<Var>,
    /// Stacked `[LL, LH, HL, HH]` coefficients after fusion (wavelet
    /// generator only).
    pub wavelets: Vec<Var>,
    /// Running image after each level.
    pub images: Vec<Var>,
    pub image: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrace {
    pub features: Vec<Tensor>,
    pub wavelets: Vec<BandQuad>,
    pub images: Vec<Tensor>,
    pub image: Tensor,
}

fn fusion_for(fusion: &[FusionVars], target: FusionTarget) -> impl Iterator<Item = &FusionVars> {
    fusion.iter().filter(move |f| f.target == target)
}

/// Records one forward pass on `g`. `pv` are the bound generator parameters
/// (in [`ParamSet`] order) and `latents` the bound style vectors.
pub fn build(
    g: &mut Graph,
    gen: &Generator,
    pv: &[Var],
    latents: &[Var],
    fusion: &[FusionVars],
) -> Result<GraphTrace> {
    let cfg = &gen.cfg;
    if latents.len() != cfg.levels {
        return Err(Error::Argument(format!(
            "{} latents for {} levels",
            latents.len(),
            cfg.levels
        )));
    }
    if pv.len() != gen.params.len() {
        return Err(Error::Argument("bound parameter count mismatch".into()));
    }
    for f in fusion {
        if f.target.level() >= cfg.levels {
            return Err(Error::Argument(format!(
                "fusion level {} out of range 0..{}",
                f.target.level(),
                cfg.levels
            )));
        }
        if gen.kind == GeneratorKind::Pixel && matches!(f.target, FusionTarget::Wavelet(_)) {
            return Err(Error::Argument(
                "pixel generator has no wavelet fusion site".into(),
            ));
        }
    }
    let p = |name: String| -> Result<Var> { Ok(pv[gen.params.position(&name)?]) };
    let bank = FilterBank::orthonormal();
    let ic = cfg.image_channels;

    let mut feat = p("const".into())?;
    let mut image: Option<Var> = None;
    let mut trace = GraphTrace {
        features: vec![],
        wavelets: vec![],
        images: vec![],
        image: feat,
    };
    for l in 0..cfg.levels {
        let style = g.linear(
            latents[l],
            p(format!("l{l}.affine.w"))?,
            p(format!("l{l}.affine.b"))?,
        )?;
        let conv = g.modulated_conv2d(feat, p(format!("l{l}.conv.w"))?, style, true)?;
        let conv = g.add_bias(conv, p(format!("l{l}.conv.b"))?)?;
        let mut fprime = g.leaky_relu(conv);
        for f in fusion_for(fusion, FusionTarget::Feature(l)) {
            fprime = g.scale_shift(fprime, f.g, f.h)?;
        }
        trace.features.push(fprime);

        let up_feat = if l + 1 < cfg.levels || gen.kind == GeneratorKind::Pixel {
            Some(g.nearest_upsample(fprime))
        } else {
            None
        };

        let next = match gen.kind {
            GeneratorKind::Wavelet => {
                let mut coeffs = g.conv2d(fprime, p(format!("l{l}.twav.w"))?)?;
                for f in fusion_for(fusion, FusionTarget::Wavelet(l)) {
                    coeffs = g.scale_shift(coeffs, f.g, f.h)?;
                }
                trace.wavelets.push(coeffs);
                let mut ll = g.slice_channels(coeffs, 0, ic)?;
                if let Some(prev) = image {
                    // the doubled running image makes LL-only growth an
                    // exact nearest-neighbour upsample
                    let prev2 = g.scalar_mul(prev, 2.0);
                    ll = g.add(prev2, ll)?;
                }
                let lh = g.slice_channels(coeffs, ic, ic)?;
                let hl = g.slice_channels(coeffs, 2 * ic, ic)?;
                let hh = g.slice_channels(coeffs, 3 * ic, ic)?;
                g.haar_inverse([ll, lh, hl, hh], bank)?
            }
            GeneratorKind::Pixel => {
                let uf = up_feat.expect("pixel path upsamples");
                let rgb = g.conv2d(uf, p(format!("l{l}.rgb.w"))?)?;
                let rgb = g.add_bias(rgb, p(format!("l{l}.rgb.b"))?)?;
                match image {
                    Some(prev) => {
                        let up = g.nearest_upsample(prev);
                        g.add(up, rgb)?
                    }
                    None => rgb,
                }
            }
        };
        image = Some(next);
        trace.images.push(next);

        if l + 1 < cfg.levels {
            let uf = up_feat.expect("inner levels upsample");
            let c = g.conv2d(uf, p(format!("l{l}.up.w"))?)?;
            feat = g.add_bias(c, p(format!("l{l}.up.b"))?)?;
        }
    }
    trace.image = image.expect("levels ≥ 2");
    Ok(trace)
}

/// Plain forward pass.
pub fn synthesize(
    gen: &Generator,
    latents: &LatentStack,
    fusion: Option<&[FusionParams]>,
) -> Result<SynthTrace> {
    latents.validate(&gen.cfg)?;
    let mut g = Graph::new();
    let pv = gen.params.bind(&mut g, false);
    let lv = latents.bind(&mut g, false);
    let fv: Vec<FusionVars> = fusion
        .unwrap_or_default()
        .iter()
        .map(|f| f.bind(&mut g, false))
        .collect();
    let t = build(&mut g, gen, &pv, &lv, &fv)?;
    let wavelets = t
        .wavelets
        .iter()
        .map(|&w| BandQuad::from_stacked(g.value(w)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthTrace {
        features: t.features.iter().map(|&v| g.value(v).clone()).collect(),
        wavelets,
        images: t.images.iter().map(|&v| g.value(v).clone()).collect(),
        image: g.value(t.image).clone(),
    })
}

/// Pixel-baseline output image.
pub fn pixel_synthesize(gen: &Generator, latents: &LatentStack) -> Result<Tensor> {
    if gen.kind != GeneratorKind::Pixel {
        return Err(Error::Argument(
            "pixel_synthesize needs a pixel generator".into(),
        ));
    }
    Ok(synthesize(gen, latents, None)?.image)
}

/// 1×1 convolution of a feature map into `4·C_img` coefficient maps.
pub fn t_wavelets(feature: &Tensor, weights: &Tensor) -> Result<BandQuad> {
    if weights.width() != 1 {
        return Err(Error::Argument("tWavelets weights must be 1×1".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(feature.clone());
    let w = g.constant(weights.clone());
    let y = g.conv2d(x, w)?;
    BandQuad::from_stacked(g.value(y))
}

/// Gated residual extractor: a shared 3×3 trunk, then per fusion site
/// average pooling down to the site's resolution, one more 3×3 layer and a
/// 3×3 head that emits `[gate logits, shift]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionExtractor {
    pub targets: Vec<FusionTarget>,
    pub hidden: usize,
    pub params: ParamSet,
}

impl FusionExtractor {
    /// Sites: every feature-fusion level, then the wavelet-fusion level.
    pub fn targets_for(cfg: &SynthConfig, kind: GeneratorKind) -> Vec<FusionTarget> {
        let mut t: Vec<FusionTarget> = cfg
            .fusion_feature_levels
            .iter()
            .map(|&l| FusionTarget::Feature(l))
            .collect();
        if kind == GeneratorKind::Wavelet {
            t.push(FusionTarget::Wavelet(cfg.fusion_wavelet_level));
        }
        t
    }

    /// Random trunk, zero heads: the initial gates are exactly 0.5 and the
    /// shifts exactly 0, while gradients still reach the heads.
    pub fn new(cfg: &SynthConfig, kind: GeneratorKind, hidden: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ic = cfg.image_channels;
        let mut p = ParamSet::default();
        p.push(
            "trunk.w".into(),
            gaussian(Shape::new(hidden, ic, 9), 9 * ic, &mut rng),
        );
        p.push("trunk.b".into(), Tensor::zeros(Shape::new(hidden, 1, 1)));
        let targets = Self::targets_for(cfg, kind);
        for (i, t) in targets.iter().enumerate() {
            let c = t.shape(cfg).channels;
            p.push(
                format!("mid{i}.w"),
                gaussian(Shape::new(hidden, hidden, 9), 9 * hidden, &mut rng),
            );
            p.push(format!("mid{i}.b"), Tensor::zeros(Shape::new(hidden, 1, 1)));
            p.push(
                format!("head{i}.w"),
                Tensor::zeros(Shape::new(2 * c, hidden, 9)),
            );
            p.push(format!("head{i}.b"), Tensor::zeros(Shape::new(2 * c, 1, 1)));
        }
        Ok(FusionExtractor {
            targets,
            hidden,
            params: p,
        })
    }

    pub fn randomize_heads(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (n, t) in self.params.names.iter().zip(self.params.tensors.iter_mut()) {
            if n.starts_with("head") {
                *t = Tensor::randn(t.shape(), std, &mut rng);
            }
        }
    }
}

/// Records the extractor on `g`; returns one fusion site per target.
pub fn build_extractor(
    g: &mut Graph,
    cfg: &SynthConfig,
    ex: &FusionExtractor,
    ev: &[Var],
    delta_hat: Var,
) -> Result<Vec<FusionVars>> {
    let out = cfg.output_shape();
    g.value(delta_hat).expect_shape(out)?;
    let p = |name: &str| -> Result<Var> { Ok(ev[ex.params.position(name)?]) };
    let t = g.conv2d(delta_hat, p("trunk.w")?)?;
    let t = g.add_bias(t, p("trunk.b")?)?;
    let trunk = g.leaky_relu(t);
    let mut sites = Vec::with_capacity(ex.targets.len());
    for (i, target) in ex.targets.iter().enumerate() {
        let s = target.shape(cfg);
        let mut x = trunk;
        let mut r = out.height;
        while r > s.height {
            if !r.is_multiple_of(2) {
                break;
            }
            x = g.avg_pool2(x)?;
            r /= 2;
        }
        if r != s.height {
            return Err(Error::Argument(format!(
                "resolution {} does not reduce to {} by factor-2 strides",
                out.height, s.height
            )));
        }
        let m = g.conv2d(x, p(&format!("mid{i}.w"))?)?;
        let m = g.add_bias(m, p(&format!("mid{i}.b"))?)?;
        let x = g.leaky_relu(m);
        let hw = g.conv2d(x, p(&format!("head{i}.w"))?)?;
        let hw = g.add_bias(hw, p(&format!("head{i}.b"))?)?;
        let logits = g.slice_channels(hw, 0, s.channels)?;
        let gate = g.sigmoid(logits);
        let shift = g.slice_channels(hw, s.channels, s.channels)?;
        sites.push(FusionVars {
            g: gate,
            h: shift,
            target: *target,
        });
    }
    Ok(sites)
}

pub fn fusion_extract(
    cfg: &SynthConfig,
    ex: &FusionExtractor,
    delta_hat: &Tensor,
) -> Result<Vec<FusionParams>> {
    let mut g = Graph::new();
    let ev = ex.params.bind(&mut g, false);
    let d = g.constant(delta_hat.clone());
    let sites = build_extractor(&mut g, cfg, ex, &ev, d)?;
    Ok(sites
        .into_iter()
        .map(|s| FusionParams {
            g: g.value(s.g).clone(),
            h: g.value(s.h).clone(),
            target: s.target,
        })
        .collect())
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME: usize = 256;
const MAX_TENSORS: usize = 1 << 16;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimOverflow(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes config and weights; layout documented in `docs/formats.md`.
pub fn write_checkpoint(gen: &Generator) -> Result<Vec<u8>> {
    let c = &gen.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(
        &mut out,
        match gen.kind {
            GeneratorKind::Wavelet => 0,
            GeneratorKind::Pixel => 1,
        },
    )?;
    for v in [c.base_resolution, c.levels, c.image_channels, c.style_dim] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    put_u32(&mut out, c.channels.len())?;
    for &ch in &c.channels {
        put_u32(&mut out, ch)?;
    }
    put_u32(&mut out, c.fusion_feature_levels.len())?;
    for &l in &c.fusion_feature_levels {
        put_u32(&mut out, l)?;
    }
    put_u32(&mut out, c.fusion_wavelet_level)?;
    put_u32(&mut out, gen.params.len())?;
    for (name, t) in gen.params.names.iter().zip(&gen.params.tensors) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        let s = t.shape();
        for d in [s.channels, s.height, s.width] {
            put_u32(&mut out, d)?;
        }
    }
    for t in &gen.params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Generator> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "checkpoint version {version}"
        )));
    }
    let kind = match r.u32()? {
        0 => GeneratorKind::Wavelet,
        1 => GeneratorKind::Pixel,
        k => return Err(Error::MalformedHeader(format!("generator kind {k}"))),
    };
    let base_resolution = r.u32()? as usize;
    let levels = r.u32()? as usize;
    let image_channels = r.u32()? as usize;
    let style_dim = r.u32()? as usize;
    let seed = r.u64()?;
    let n = r.count(64)?;
    let channels = (0..n)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = r.count(64)?;
    let fusion_feature_levels = (0..n)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<BTreeSet<_>>>()?;
    let fusion_wavelet_level = r.u32()? as usize;
    let cfg = SynthConfig {
        base_resolution,
        levels,
        channels,
        image_channels,
        style_dim,
        seed,
        fusion_feature_levels,
        fusion_wavelet_level,
    };
    cfg.validate()
        .map_err(|e| Error::MalformedHeader(format!("config: {e}")))?;
    if levels > 16 || base_resolution > 1 << 12 {
        return Err(Error::DimOverflow("checkpoint resolution too large".into()));
    }

    let count = r.count(MAX_TENSORS)?;
    let mut names = Vec::with_capacity(count);
    let mut shapes = Vec::with_capacity(count);
    let mut total: usize = 0;
    for _ in 0..count {
        let len = r.count(MAX_NAME)?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::MalformedHeader("parameter name is not UTF-8".into()))?
            .to_string();
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::DimOverflow(format!("{name}: {dims:?}")))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::DimOverflow("payload size".into()))?;
        names.push(name);
        shapes.push(Shape::new(dims[0], dims[1], dims[2]));
    }
    let need = total
        .checked_mul(8)
        .ok_or_else(|| Error::DimOverflow("payload size".into()))?;
    if r.remaining() != need {
        return Err(Error::Truncated {
            expected: need,
            found: r.remaining(),
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for s in shapes {
        let data = r
            .take(8 * s.len())?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::from_vec(s, data)?);
    }
    let gen = Generator {
        cfg,
        kind,
        params: ParamSet { names, tensors },
    };
    gen.check_params()?;
    Ok(gen)
}

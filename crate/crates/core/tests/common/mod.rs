// Central-difference gradient checks shared by the gradcheck and acceptance
// targets.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subband_core::autodiff::{Graph, Var};
use subband_core::metrics::Norm;
use subband_core::spectrum;
use subband_core::synthesis::{
    build, build_extractor, FusionExtractor, Generator, GeneratorKind, LatentStack, SynthConfig,
};
use subband_core::wavelet::{Filter, FilterBank, ScaleMode};
use subband_core::{Shape, Tensor};

const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn eval(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars);
    g.scalar(root)
}

// Worst relative error over all coordinates of all inputs.
fn check(inputs: Vec<Tensor>, build: &Build<'_>, h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], t.shape());
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Worst error of one op over all seeds.
pub struct OpReport {
    pub name: String,
    pub worst: f64,
    pub worst_seed: u64,
}

impl OpReport {
    pub fn ok(&self) -> bool {
        self.worst <= TOL
    }
}

#[derive(Default)]
pub struct Suite {
    pub reports: Vec<OpReport>,
}

impl Suite {
    fn run(
        &mut self,
        name: &str,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
        build: &Build<'_>,
    ) {
        self.run_with_step(name, H, make, build)
    }

    fn run_with_step(
        &mut self,
        name: &str,
        h: f64,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
        build: &Build<'_>,
    ) {
        let mut r = OpReport {
            name: name.into(),
            worst: 0.0,
            worst_seed: 0,
        };
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let err = check(make(&mut rng), build, h);
            if err > r.worst || err.is_nan() {
                r.worst = err;
                r.worst_seed = seed;
            }
        }
        self.reports.push(r);
    }
}

// Reduces any tensor to a scalar through a fixed random projection so that
// every coordinate of the upstream gradient differs.
fn project(g: &mut Graph, v: Var) -> Var {
    let s = g.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let w = g.constant(Tensor::randn(s, 1.0, &mut rng));
    let p = g.hadamard(v, w).unwrap();
    let one = g.constant(Tensor::filled(s, 0.5));
    let q = g.add(p, one).unwrap();
    g.mean_square(q)
}

const S: Shape = Shape {
    channels: 2,
    height: 8,
    width: 8,
};

pub fn elementwise_ops(s: &mut Suite) {
    s.run("add", |r| vec![rand(S, r), rand(S, r)], &|g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y)
    });
    s.run("sub", |r| vec![rand(S, r), rand(S, r)], &|g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        project(g, y)
    });
    s.run("scalar_mul", |r| vec![rand(S, r)], &|g, v| {
        let y = g.scalar_mul(v[0], -1.7);
        project(g, y)
    });
    s.run("hadamard", |r| vec![rand(S, r), rand(S, r)], &|g, v| {
        let y = g.hadamard(v[0], v[1]).unwrap();
        project(g, y)
    });
    s.run("leaky_relu", |r| vec![rand(S, r)], &|g, v| {
        let y = g.leaky_relu(v[0]);
        project(g, y)
    });
    s.run("sigmoid", |r| vec![rand(S, r)], &|g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y)
    });
    s.run("mean_abs", |r| vec![rand(S, r)], &|g, v| g.mean_abs(v[0]));
    s.run("mean_square", |r| vec![rand(S, r)], &|g, v| {
        g.mean_square(v[0])
    });
    s.run(
        "scale_shift",
        |r| vec![rand(S, r), rand(S, r), rand(S, r)],
        &|g, v| {
            let y = g.scale_shift(v[0], v[1], v[2]).unwrap();
            project(g, y)
        },
    );
    s.run(
        "add_bias",
        |r| vec![rand(S, r), rand(Shape::new(2, 1, 1), r)],
        &|g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            project(g, y)
        },
    );
}

pub fn convolutions(s: &mut Suite) {
    for taps in [1, 9] {
        s.run(
            &format!("conv2d_{taps}tap"),
            |r| vec![rand(S, r), rand(Shape::new(3, 2, taps), r)],
            &|g, v| {
                let y = g.conv2d(v[0], v[1]).unwrap();
                project(g, y)
            },
        );
    }
    for demod in [false, true] {
        s.run(
            &format!("modulated_conv2d_demod_{demod}"),
            |r| {
                vec![
                    rand(S, r),
                    rand(Shape::new(2, 2, 9), r),
                    rand(Shape::new(2, 1, 1), r),
                ]
            },
            &move |g, v| {
                let y = g.modulated_conv2d(v[0], v[1], v[2], demod).unwrap();
                project(g, y)
            },
        );
    }
    s.run(
        "linear",
        |r| {
            vec![
                rand(Shape::new(1, 1, 5), r),
                rand(Shape::new(3, 1, 5), r),
                rand(Shape::new(3, 1, 1), r),
            ]
        },
        &|g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            project(g, y)
        },
    );
}

pub fn resampling_and_channels(s: &mut Suite) {
    s.run(
        "nearest_upsample",
        |r| vec![rand(Shape::new(2, 4, 4), r)],
        &|g, v| {
            let y = g.nearest_upsample(v[0]);
            project(g, y)
        },
    );
    s.run("avg_pool2", |r| vec![rand(S, r)], &|g, v| {
        let y = g.avg_pool2(v[0]).unwrap();
        project(g, y)
    });
    s.run(
        "concat",
        |r| vec![rand(S, r), rand(Shape::new(1, 8, 8), r)],
        &|g, v| {
            let y = g.concat_channels(&[v[0], v[1]]).unwrap();
            project(g, y)
        },
    );
    s.run("slice", |r| vec![rand(S, r)], &|g, v| {
        let y = g.slice_channels(v[0], 1, 1).unwrap();
        project(g, y)
    });
    for (tag, bank) in [
        ("raw", FilterBank::raw()),
        ("orthonormal", FilterBank::orthonormal()),
    ] {
        s.run(
            &format!("haar_inverse_{tag}"),
            |r| (0..4).map(|_| rand(Shape::new(2, 4, 4), r)).collect(),
            &move |g, v| {
                let y = g.haar_inverse([v[0], v[1], v[2], v[3]], bank).unwrap();
                project(g, y)
            },
        );
    }
}

pub fn loss_nodes(s: &mut Suite) {
    for mode in [ScaleMode::Raw, ScaleMode::Orthonormal] {
        for filter in Filter::ALL {
            for norm in [Norm::L1, Norm::L2] {
                for level in [0, 1] {
                    s.run(
                        &format!("subband_loss_{filter}_{level}_{norm:?}_{mode:?}"),
                        |r| vec![rand(S, r), rand(S, r)],
                        &move |g, v| {
                            g.subband_loss(v[0], v[1], filter, level, norm, mode)
                                .unwrap()
                        },
                    );
                }
            }
        }
        s.run(
            &format!("wavelet_loss_k_{mode:?}"),
            |r| vec![rand(S, r), rand(S, r)],
            &move |g, v| g.wavelet_loss_k(v[0], v[1], 1, mode).unwrap(),
        );
    }
    s.run("spectral_loss", |r| vec![rand(S, r)], &|g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = Tensor::randn(S, 1.0, &mut rng);
        let tl = spectrum::reduced_spectrum(&target).unwrap().log_bins();
        g.spectral_loss(v[0], &tl).unwrap()
    });
}

// The fusion extractor end to end, with randomized heads so that every
// parameter carries gradient.
pub fn composites(s: &mut Suite) {
    let cfg = SynthConfig {
        levels: 2,
        channels: vec![4, 4],
        style_dim: 4,
        fusion_feature_levels: [0].into(),
        fusion_wavelet_level: 1,
        ..SynthConfig::default()
    };
    let mut ex = FusionExtractor::new(&cfg, GeneratorKind::Wavelet, 3, 0).unwrap();
    ex.randomize_heads(0.3, 1);
    let shapes = ex.params.shapes();
    let out = cfg.output_shape();
    // stacked leaky ReLUs put some pre-activation within a 1e-4 stencil of
    // its kink now and then, so this one uses a finer step
    s.run_with_step(
        "fusion_extractor",
        1e-6,
        |r| {
            let mut v = vec![rand(out, r)];
            v.extend(shapes.iter().map(|&sh| Tensor::randn(sh, 0.3, r)));
            v
        },
        &|g, v| {
            let sites = build_extractor(g, &cfg, &ex, &v[1..], v[0]).unwrap();
            let mut acc = None;
            for site in sites {
                for t in [site.g, site.h] {
                    let p = project(g, t);
                    acc = Some(match acc {
                        None => p,
                        Some(a) => g.add(a, p).unwrap(),
                    });
                }
            }
            acc.unwrap()
        },
    );
}

pub fn all_ops() -> Suite {
    let mut s = Suite::default();
    composites(&mut s);
    elementwise_ops(&mut s);
    convolutions(&mut s);
    resampling_and_channels(&mut s);
    loss_nodes(&mut s);
    s
}

/// Worst relative error of d(loss)/d(latent entry) through a whole small
/// wavelet generator, over `entries` latent coordinates spread across levels.
pub fn pipeline_check(entries: usize, seed: u64) -> f64 {
    let cfg = SynthConfig {
        levels: 3,
        channels: vec![8, 8, 8],
        style_dim: 8,
        seed,
        fusion_feature_levels: [1].into(),
        fusion_wavelet_level: 2,
        ..SynthConfig::default()
    };
    let gen = Generator::new(cfg.clone(), GeneratorKind::Wavelet).unwrap();
    let latents = LatentStack::random(&cfg, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let target = Tensor::randn(cfg.output_shape(), 0.5, &mut rng);

    let loss_of = |lat: &LatentStack, grads: bool| -> (f64, Option<Vec<Tensor>>) {
        let mut g = Graph::new();
        let pv = gen.params.bind(&mut g, false);
        let lv = lat.bind(&mut g, grads);
        let t = build(&mut g, &gen, &pv, &lv, &[]).unwrap();
        let tv = g.constant(target.clone());
        let d = g.sub(t.image, tv).unwrap();
        let l2 = g.mean_square(d);
        let wave = g
            .wavelet_loss_k(t.image, tv, 1, ScaleMode::Orthonormal)
            .unwrap();
        let wave = g.scalar_mul(wave, 0.1);
        let root = g.add(l2, wave).unwrap();
        let value = g.scalar(root);
        let gr = grads.then(|| {
            let gs = g.backward(root).unwrap();
            lv.iter()
                .zip(&lat.vectors)
                .map(|(v, t)| gs.get_or_zeros(*v, t.shape()))
                .collect()
        });
        (value, gr)
    };
    let (_, grads) = loss_of(&latents, true);
    let grads = grads.unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for e in 0..entries {
        let l = e % cfg.levels;
        let j = (e * 7 + 3) % cfg.style_dim;
        let mut plus = latents.clone();
        plus.vectors[l].data_mut()[j] += h;
        let mut minus = latents.clone();
        minus.vectors[l].data_mut()[j] -= h;
        let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * h);
        let a = grads[l].data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

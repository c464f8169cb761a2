//! `subband`: reproducible sub-band loss, spectrum and inversion experiments.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use subband_core::imageio;
use subband_core::inversion::{self, LadderConfig, LossTerm, RegressionJob};
use subband_core::metrics;
use subband_core::spectrum;
use subband_core::synthesis::{GeneratorKind, SynthConfig};
use subband_core::theory;
use subband_core::wavelet::ScaleMode;
use subband_core::{Error, Tensor};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "subband",
    version,
    about = "Haar sub-band loss and inversion experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-sub-band losses over a manifest of image pairs.
    Analyze(AnalyzeArgs),
    /// Reduced (azimuthally averaged) power spectrum of one image.
    Spectrum(SpectrumArgs),
    /// Numerical checks of the sub-band identities and half-normal constants.
    Verify(VerifyArgs),
    /// Latent-optimization regression against a target image.
    Regress(RegressArgs),
    /// Alignment-network ladder without and with wavelet loss.
    AdaDemo(LadderArgs),
    /// Full ladder including trained fusion.
    FuseDemo(FuseArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Raw,
    Orthonormal,
}

impl From<ModeArg> for ScaleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Raw => ScaleMode::Raw,
            ModeArg::Orthonormal => ScaleMode::Orthonormal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum GenArg {
    Wavelet,
    Pixel,
}

impl From<GenArg> for GeneratorKind {
    fn from(g: GenArg) -> Self {
        match g {
            GenArg::Wavelet => GeneratorKind::Wavelet,
            GenArg::Pixel => GeneratorKind::Pixel,
        }
    }
}

#[derive(Args, Serialize)]
struct AnalyzeArgs {
    /// Newline-separated `pathA<TAB>pathB` pairs; relative paths resolve
    /// against the manifest's directory.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, value_enum, default_value = "orthonormal")]
    mode: ModeArg,
    /// `.csv` or `.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SpectrumArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the verdict JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct RegressArgs {
    /// Key-value job file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum)]
    gen: Option<GenArg>,
    /// Comma list of `l2`, `wavelet:K[:W]`, `spectral:W`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-level feature widths; the level count follows from the target size.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    style_dim: Option<usize>,
    /// Seed of the generator weights.
    #[arg(long)]
    gen_seed: Option<u64>,
    /// Optimize generator weights together with the latents.
    #[arg(long)]
    joint: bool,
    #[arg(long, default_value = "regress-out")]
    out_dir: PathBuf,
}

/// Contents of a `--config` job file.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct JobFile {
    gen: Option<GenArg>,
    loss: Option<String>,
    steps: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    channels: Option<Vec<usize>>,
    style_dim: Option<usize>,
    gen_seed: Option<u64>,
    joint: Option<bool>,
}

#[derive(Args, Serialize)]
struct LadderArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 4)]
    heldout: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value = "ladder.csv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FuseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    ladder: LadderArgs,
    /// Use `g ≡ 1, h ≡ 0` instead of trained fusion maps.
    #[arg(long)]
    identity_fusion: bool,
}

/// Failure classes, one per exit code.
enum Failure {
    Check(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_)
            | Error::MalformedHeader(_)
            | Error::Truncated { .. }
            | Error::UnsupportedMaxval(_)
            | Error::UnsupportedFormat(_)
            | Error::BadMagic(_)
            | Error::DimOverflow(_)
            | Error::Serialize(_) => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

type Outcome = std::result::Result<(), Failure>;

/// `# subband <version> <command> <config json>`, the first line of every
/// text artifact.
fn header_line<T: Serialize>(command: &str, cfg: &T) -> String {
    let json = serde_json::to_string(cfg).unwrap_or_else(|_| "{}".into());
    format!("# subband {VERSION} {command} {json}\n")
}

fn announce<T: Serialize>(command: &str, cfg: &T) {
    let json = serde_json::to_string(cfg).unwrap_or_else(|_| "{}".into());
    println!("subband {VERSION} {command} config {json}");
}

fn write_with_header(path: &Path, header: &str, body: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut out = Vec::with_capacity(header.len() + body.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(body);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn load(path: &Path) -> std::result::Result<Tensor, Failure> {
    imageio::load(path).map_err(|e| io_err(path, e))
}

fn parse_manifest(path: &Path) -> std::result::Result<Vec<(PathBuf, PathBuf)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 || cols.iter().any(|c| c.trim().is_empty()) {
            return Err(Failure::Usage(format!(
                "{}:{}: expected `pathA<TAB>pathB`",
                path.display(),
                n + 1
            )));
        }
        let resolve = |p: &str| {
            let p = Path::new(p.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        pairs.push((resolve(cols[0]), resolve(cols[1])));
    }
    if pairs.is_empty() {
        return Err(Failure::Usage(format!(
            "{}: manifest lists no pairs",
            path.display()
        )));
    }
    Ok(pairs)
}

fn analyze(a: &AnalyzeArgs) -> Outcome {
    announce("analyze", a);
    let entries = parse_manifest(&a.pairs)?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (pa, pb) in &entries {
        let loaded = load(pa).and_then(|x| load(pb).map(|y| (x, y)));
        match loaded {
            Ok((x, y)) if x.shape() == y.shape() => pairs.push((x, y)),
            Ok((x, y)) => skipped.push(format!(
                "{} vs {}: shape {} vs {}",
                pa.display(),
                pb.display(),
                x.shape(),
                y.shape()
            )),
            Err(f) => skipped.push(f.message().to_string()),
        }
    }
    for s in &skipped {
        eprintln!("skipped pair: {s}");
    }
    if pairs.is_empty() {
        return Err(Failure::Check("every pair was skipped".into()));
    }
    // pairs of different sizes are fine as long as each is decomposable
    let mut report = metrics::corpus_report(&pairs, a.levels, a.mode.into())?;
    report
        .warnings
        .extend(skipped.into_iter().map(|s| format!("skipped {s}")));
    let is_json = a.out.extension().and_then(|e| e.to_str()) == Some("json");
    if is_json {
        let mut v: serde_json::Value =
            serde_json::from_str(&report.to_json()?).map_err(|e| Failure::Io(e.to_string()))?;
        v["version"] = VERSION.into();
        v["config"] = serde_json::to_value(a).map_err(|e| Failure::Io(e.to_string()))?;
        let body = serde_json::to_vec_pretty(&v).map_err(|e| Failure::Io(e.to_string()))?;
        write_with_header(&a.out, "", &body)?;
    } else {
        let mut body = Vec::new();
        report.write_csv(&mut body)?;
        write_with_header(&a.out, &header_line("analyze", a), &body)?;
    }
    println!(
        "{} pairs analyzed, report written to {}",
        report.pair_count,
        a.out.display()
    );
    Ok(())
}

fn spectrum_cmd(a: &SpectrumArgs) -> Outcome {
    announce("spectrum", a);
    let img = load(&a.image)?;
    let s = spectrum::reduced_spectrum(&img)?;
    let mut body = Vec::new();
    s.write_csv(&mut body)?;
    write_with_header(&a.out, &header_line("spectrum", a), &body)?;
    println!("{} bins written to {}", s.bins.len(), a.out.display());
    Ok(())
}

fn verify(a: &VerifyArgs) -> Outcome {
    announce("verify", a);
    let suite = theory::run_verification(a.samples, a.seed)?;
    let json = serde_json::to_string_pretty(&suite).map_err(|e| Failure::Io(e.to_string()))?;
    println!("{json}");
    if let Some(out) = &a.out {
        write_with_header(out, "", json.as_bytes())?;
    }
    if suite.passed() {
        Ok(())
    } else {
        Err(Failure::Check("verification failed".into()))
    }
}

/// Resolved regression settings, echoed and stored with every artifact.
#[derive(Serialize)]
struct RegressResolved {
    target: PathBuf,
    gen: GenArg,
    loss: Vec<String>,
    steps: usize,
    lr: f64,
    seed: u64,
    gen_seed: u64,
    channels: Vec<usize>,
    style_dim: usize,
    joint: bool,
}

fn default_widths(levels: usize) -> Vec<usize> {
    (0..levels)
        .map(|l| (32usize >> l.saturating_sub(1)).max(8))
        .collect()
}

fn regress(a: &RegressArgs) -> Outcome {
    let file: JobFile = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => JobFile::default(),
    };
    let target = load(&a.target)?;
    let res = target.height();
    if target.width() != res || !res.is_power_of_two() || !(16..=128).contains(&res) {
        return Err(Failure::Usage(format!(
            "target must be square with power-of-two side in 16..=128, got {}",
            target.shape()
        )));
    }
    let levels = (res / 4).trailing_zeros() as usize;
    let r = RegressResolved {
        target: a.target.clone(),
        gen: a.gen.or(file.gen).unwrap_or(GenArg::Wavelet),
        loss: a
            .loss
            .clone()
            .or(file.loss)
            .unwrap_or_else(|| "l2".into())
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        steps: a.steps.or(file.steps).unwrap_or(2000),
        lr: a.lr.or(file.lr).unwrap_or(0.05),
        seed: a.seed.or(file.seed).unwrap_or(0),
        gen_seed: a.gen_seed.or(file.gen_seed).unwrap_or(0),
        channels: a
            .channels
            .clone()
            .or(file.channels)
            .unwrap_or_else(|| default_widths(levels)),
        style_dim: a.style_dim.or(file.style_dim).unwrap_or(32),
        joint: a.joint || file.joint.unwrap_or(false),
    };
    announce("regress", &r);
    let loss_terms = r
        .loss
        .iter()
        .map(|s| s.parse::<LossTerm>())
        .collect::<subband_core::Result<Vec<_>>>()?;
    let synth = SynthConfig {
        levels,
        channels: r.channels.clone(),
        image_channels: target.channels(),
        style_dim: r.style_dim,
        seed: r.gen_seed,
        fusion_feature_levels: (levels.saturating_sub(3)..levels - 1).collect(),
        fusion_wavelet_level: levels - 1,
        ..SynthConfig::default()
    };
    let job = RegressionJob {
        target: target.clone(),
        generator: r.gen.into(),
        synth,
        loss_terms,
        steps: r.steps,
        lr: r.lr,
        seed: r.seed,
        joint: r.joint,
    };
    let result = inversion::latent_optimize(&job)?;
    let head = header_line("regress", &r);
    let dir = &a.out_dir;

    let mut body = Vec::new();
    result.write_trace_csv(&mut body)?;
    write_with_header(&dir.join("trace.csv"), &head, &body)?;
    for (name, s) in [
        ("target_spectrum.csv", &result.target_spectrum),
        ("result_spectrum.csv", &result.final_spectrum),
    ] {
        let mut body = Vec::new();
        s.write_csv(&mut body)?;
        write_with_header(&dir.join(name), &head, &body)?;
    }
    let ext = if target.channels() == 1 { "pgm" } else { "ppm" };
    let pnm = imageio::write_pnm(&result.final_image, 255)?;
    write_with_header(
        &dir.join(format!("final.{ext}")),
        "",
        &with_pnm_comment(&pnm, head.trim_end()),
    )?;
    let raw = imageio::write_raw(&result.final_image, imageio::DTYPE_F64)?;
    write_with_header(&dir.join("final.wgt"), "", &raw)?;

    let l2 = result.final_l2(&target)?;
    let dist = result.spectrum_distance();
    let deficit =
        inversion::high_bin_deficit(&result.target_spectrum, &result.final_spectrum, 0.25);
    let summary = serde_json::json!({
        "version": VERSION,
        "config": r,
        "final_l2": l2,
        "spectrum_distance": dist,
        "high_bin_deficit": deficit,
        "final_total": result.trace.last().map(|t| t.total),
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Io(e.to_string()))?;
    write_with_header(&dir.join("summary.json"), "", text.as_bytes())?;
    println!(
        "final L2 {l2:e}, log-spectrum distance {dist:.6}, artifacts in {}",
        dir.display()
    );
    Ok(())
}

/// Inserts a `#` comment line after the PNM magic.
fn with_pnm_comment(pnm: &[u8], comment: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(pnm.len() + comment.len() + 2);
    out.extend_from_slice(&pnm[..3]);
    let line = if comment.starts_with('#') {
        comment.to_string()
    } else {
        format!("# {comment}")
    };
    out.extend_from_slice(line.replace('\n', " ").as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&pnm[3..]);
    out
}

fn ladder_config(
    a: &LadderArgs,
    identity_fusion: bool,
) -> std::result::Result<LadderConfig, Failure> {
    if a.heldout == 0 || a.heldout >= a.images {
        return Err(Failure::Usage("need 0 < --heldout < --images".into()));
    }
    let mut cfg = LadderConfig {
        images: a.images,
        heldout: a.heldout,
        identity_fusion,
        seed: a.seed,
        fusion_epochs: a.epochs,
        ..LadderConfig::default()
    };
    cfg.ada.epochs = a.epochs;
    cfg.ada.seed = a.seed;
    cfg.synth.seed = a.seed;
    Ok(cfg)
}

fn run_ladder(command: &str, cfg: &LadderConfig, fusion: bool, out: &Path) -> Outcome {
    announce(command, cfg);
    let rows = inversion::ablation_ladder(cfg, fusion)?;
    let mut body = Vec::new();
    inversion::write_ladder_csv(&rows, &mut body)?;
    write_with_header(out, &header_line(command, cfg), &body)?;
    io::stdout()
        .write_all(&body)
        .map_err(|e| Failure::Io(e.to_string()))?;
    if rows.iter().any(|r| {
        ![r.l1_delta, r.wave_delta, r.l2_image, r.ssim_image]
            .iter()
            .all(|v| v.is_finite())
    }) {
        return Err(Failure::Check("non-finite ladder metric".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Spectrum(a) => spectrum_cmd(a),
        Command::Verify(a) => verify(a),
        Command::Regress(a) => regress(a),
        Command::AdaDemo(a) => {
            ladder_config(a, false).and_then(|c| run_ladder("ada-demo", &c, false, &a.out))
        }
        Command::FuseDemo(a) => ladder_config(&a.ladder, a.identity_fusion)
            .and_then(|c| run_ladder("fuse-demo", &c, true, &a.ladder.out)),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

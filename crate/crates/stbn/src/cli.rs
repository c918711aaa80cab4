//! Command-line verbs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use stbn_core::blindspot::{center_finite_difference, probe_dependency, ProbeLocation};
use stbn_core::metrics;
use stbn_core::model::StbnModel;
use stbn_core::train::{
    run_ablation, verify_risk_gap, AblationSettings, LogRecord, ProbeClip, StepStats, Trainer,
};
use stbn_core::videodata::{add_awgn, NoiseModel, TranslatingTexture, VideoSequence};
use stbn_core::warp::{audit_noise_statistics, FlowField, Interpolation};
use stbn_core::Tensor;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::external::ExternalFlowAdapter;
use crate::io::{load_sequence, save_sequence};
use crate::plot;
use crate::report::{write_json, EvalReport};

#[derive(Debug, Parser)]
#[command(name = "stbn", version, about = "Self-supervised video denoising with spatiotemporal blind spots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML run configuration; the desk preset is used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed for initialisation, cropping and synthetic noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl Common {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let cfg = RunConfig::load_or_default(self.config.as_deref())?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a translating-texture clip and its noisy version.
    Synth(SynthArgs),
    /// Train on noisy clips (including the clip to be denoised itself).
    Train(TrainArgs),
    /// Denoise a clip with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// PSNR / SSIM of an estimate against a reference.
    Eval(EvalArgs),
    /// Gradient dependency maps of one output pixel.
    Probe(ProbeArgs),
    /// Statistics of i.i.d. noise after warping.
    AuditWarp(AuditWarpArgs),
    /// Monte-Carlo check that the self-supervised risk gap equals sigma^2.
    VerifyProof(VerifyProofArgs),
    /// Train and score the four cumulative component configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Where the clean clip goes (`.stbnvid` file or PNG directory).
    #[arg(long)]
    pub clean: PathBuf,
    /// Where the noisy clip goes; needs a known sigma.
    #[arg(long)]
    pub noisy: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Defaults to the model's channel count.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Pixels per frame as `dx,dy`.
    #[arg(long, default_value = "1,0.5", value_parser = parse_pair)]
    pub velocity: (f64, f64),
    /// Highest spatial frequency in cycles per frame width.
    #[arg(long, default_value_t = 4)]
    pub max_cycles: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Noisy training clips.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Final checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// JSON-lines metrics log, one record every `train.log_interval` steps.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Write `<out stem>.iter<N>.stbnckp` every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Clean reference of the first input; enables `psnr_probe` in the log.
    #[arg(long)]
    pub probe_clean: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Noise sigma on the 0-255 scale; defaults to the config's.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// JSON report; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained model; a freshly initialised one from the config otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// Output pixel as `t,y,x`.
    #[arg(long, value_parser = parse_pixel)]
    pub pixel: ProbeLocation,
    /// Directory for `dependency.png` and `probe.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub zoom: u32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FlowKind {
    Zero,
    /// Uniform sub-pixel shift `(0.5, 0.25)`.
    Fractional,
    /// Independent uniform vectors in `[-2, 2]^2`.
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InterpArg {
    Nearest,
    Bilinear,
}

impl From<InterpArg> for Interpolation {
    fn from(i: InterpArg) -> Self {
        match i {
            InterpArg::Nearest => Interpolation::Nearest,
            InterpArg::Bilinear => Interpolation::Bilinear,
        }
    }
}

#[derive(Debug, Args)]
pub struct AuditWarpArgs {
    #[command(flatten)]
    pub common: Common,
    /// Noise sigma on the 0-255 scale.
    #[arg(long, default_value_t = 30.0)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value = "nearest")]
    pub interp: InterpArg,
    #[arg(long, value_enum, default_value = "fractional")]
    pub flow: FlowKind,
    /// Side of the square noise field.
    #[arg(long, default_value_t = 1024)]
    pub size: usize,
    /// Directory for `report.json`, `histogram.png`, `autocorrelation.png`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyProofArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Clean clip; a synthetic texture otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Defaults to the config's sigma.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Pixel samples to average.
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Clean training clips; noise is synthesised from the config.
    #[arg(long = "train", required = true)]
    pub train: Vec<PathBuf>,
    /// Clean evaluation clips.
    #[arg(long = "eval", required = true)]
    pub eval: Vec<PathBuf>,
    /// Model seeds, comma separated.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Directory for `ablation.json` and `ablation.md`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `a,b`")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
        b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
    ))
}

fn parse_pixel(s: &str) -> Result<ProbeLocation, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [t, y, x] => Ok(ProbeLocation::new(t, y, x)),
        _ => Err("expected `t,y,x`".into()),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
        Command::AuditWarp(a) => audit_warp(a),
        Command::VerifyProof(a) => verify_proof(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn attach_external(model: &mut StbnModel, cfg: &RunConfig) -> anyhow::Result<()> {
    if let Some(cmd) = &cfg.external_flow_command {
        model.set_external_flow(Rc::new(ExternalFlowAdapter::new(cmd)?));
    }
    Ok(())
}

fn fresh_model(cfg: &RunConfig) -> anyhow::Result<StbnModel> {
    let mut m = StbnModel::new(cfg.model.clone(), cfg.seed).context("building model")?;
    attach_external(&mut m, cfg)?;
    Ok(m)
}

fn model_from(checkpoint: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<StbnModel> {
    match checkpoint {
        Some(p) => {
            let mut m = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.model;
            attach_external(&mut m, cfg)?;
            Ok(m)
        }
        None => fresh_model(cfg),
    }
}

fn load(path: &Path) -> anyhow::Result<VideoSequence> {
    load_sequence(path).with_context(|| format!("reading {}", path.display()))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = a.common.run_config()?;
    let c = a.channels.unwrap_or(cfg.model.image_channels);
    let clean = TranslatingTexture::new(a.height, a.width, c, a.velocity, a.max_cycles, cfg.seed)
        .render(a.frames)?
        .with_id("synthetic");
    save_sequence(&clean, &a.clean)?;
    if let Some(path) = &a.noisy {
        let noise = cfg.noise.model()?;
        if noise.sigma.is_none() {
            bail!("--noisy needs a known noise sigma in the config");
        }
        save_sequence(&add_awgn(&clean, &noise)?, path)?;
    }
    Ok(())
}

fn periodic_path(out: &Path, iter: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    out.with_file_name(format!("{stem}.iter{iter}.stbnckp"))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = a.common.run_config()?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let noise = cfg.noise.model()?;
    let clips = a.inputs.iter().map(|p| load(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let probe = match &a.probe_clean {
        Some(p) => Some(ProbeClip {
            noisy: clips[0].clone(),
            clean: load(p)?,
        }),
        None => None,
    };
    let model = fresh_model(&cfg)?;
    let mut trainer = Trainer::new(model, clips, noise, cfg.train.clone())?;
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let interval = cfg.train.log_interval.max(1);
    let total = cfg.train.iterations;
    let mut failure: Option<anyhow::Error> = None;
    let result = trainer.run(|s: &StepStats, m: &StbnModel| {
        let done = s.iteration + 1;
        if done.is_multiple_of(interval) || done == total {
            let psnr_probe = match &probe {
                Some(p) => Some(p.psnr(m, &noise)?),
                None => None,
            };
            let rec = LogRecord {
                iter: done,
                loss: s.loss,
                psnr_probe,
                alpha_active: s.alpha_active(),
            };
            eprintln!(
                "iter {done:>6}  loss {:+.5}{}",
                s.loss,
                psnr_probe.map(|p| format!("  probe {p:.2} dB")).unwrap_or_default()
            );
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("plain record");
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    failure.get_or_insert(e.into());
                }
            }
        }
        if let Some(every) = a.checkpoint_every.filter(|&n| n > 0) {
            if done.is_multiple_of(every) && done != total {
                if let Err(e) = save_checkpoint(&periodic_path(&a.out, done), m, cfg.seed, Some(&cfg.train), done) {
                    failure.get_or_insert(e.into());
                }
            }
        }
        Ok(())
    });
    result?;
    if let Some(e) = failure {
        return Err(e);
    }
    save_checkpoint(&a.out, trainer.model(), cfg.seed, Some(&cfg.train), trainer.iteration())?;
    Ok(())
}

fn denoise(a: DenoiseArgs) -> anyhow::Result<()> {
    let cfg = a.common.run_config()?;
    let model = model_from(Some(&a.checkpoint), &cfg)?;
    let noisy = load(&a.input)?;
    let noise = match a.sigma {
        Some(s) => NoiseModel::gaussian(s, cfg.noise.seed)?,
        None => cfg.noise.model()?,
    };
    save_sequence(&model.denoise(&noisy, &noise)?, &a.out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = a.common.run_config()?;
    let estimate = load(&a.estimate)?;
    let reference = load(&a.reference)?;
    let report = EvalReport {
        estimate: a.estimate.display().to_string(),
        reference: a.reference.display().to_string(),
        metrics: metrics::evaluate(&estimate.clipped(), &reference)?,
        config: serde_json::to_value(&cfg)?,
    };
    match &a.out {
        Some(p) => write_json(&report, p)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let cfg = a.common.run_config()?;
    let model = model_from(a.checkpoint.as_deref(), &cfg)?;
    let input = load(&a.input)?;
    let maps = probe_dependency(&model, &input, a.pixel)?;
    let fd = center_finite_difference(&model, &input, a.pixel, 1e-3)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    plot::dependency_heatmap(&maps, a.zoom, &a.out_dir.join("dependency.png"))?;
    let center = maps[a.pixel.t].at(a.pixel.y, a.pixel.x);
    let summary = json!({
        "pixel": a.pixel,
        "center_gradient": center,
        "center_finite_difference": fd,
        "blind": center == 0.0,
        "per_frame": maps.iter().map(|m| json!({
            "frame": m.source_frame,
            "total": m.total(),
            "support": m.support(),
        })).collect::<Vec<_>>(),
        "maps": maps,
    });
    write_json(&summary, &a.out_dir.join("probe.json"))?;
    println!(
        "pixel {:?}: centre gradient {center:.3e}, finite difference {fd:.3e}, {}",
        a.pixel,
        if center == 0.0 { "blind" } else { "NOT blind" }
    );
    Ok(())
}

fn audit_warp(a: AuditWarpArgs) -> anyhow::Result<()> {
    let cfg = a.common.run_config()?;
    let s = a.size;
    let sigma = a.sigma / 255.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise_model = NoiseModel::gaussian(a.sigma, cfg.seed)?;
    let zeros = VideoSequence::new(1, s, s, 1, vec![0.0; s * s])?;
    let field = add_awgn(&zeros, &noise_model)?;
    let noise = Tensor::from_vec([1, 1, s, s], field.data().iter().map(|&v| v as f64).collect())?;
    let flow = match a.flow {
        FlowKind::Zero => FlowField::zeros(s, s),
        FlowKind::Fractional => FlowField::uniform(s, s, 0.5, 0.25),
        FlowKind::Random => FlowField::new(s, s, (0..2 * s * s).map(|_| 4.0 * unit(&mut rng) - 2.0).collect())?,
    };
    let interp: Interpolation = a.interp.into();
    let report = audit_noise_statistics(&noise, &flow, interp, sigma)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_json(&report, &a.out_dir.join("report.json"))?;
    plot::histogram_plot(&report, &a.out_dir.join("histogram.png"))?;
    let warped = stbn_core::warp::warp(&noise, &flow, interp)?;
    plot::autocorrelation_plot(&warped, 3, 24, &a.out_dir.join("autocorrelation.png"))?;
    println!(
        "{:?}: variance ratio {:.4}, lag-1 autocorrelation x {:+.4} y {:+.4}, KS {:.4}",
        report.interpolation, report.variance_ratio, report.lag1_autocorr_x, report.lag1_autocorr_y, report.ks_statistic
    );
    Ok(())
}

/// Uniform on `[0, 1)` from the top 53 bits.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn verify_proof(a: VerifyProofArgs) -> anyhow::Result<()> {
    let cfg = a.common.run_config()?;
    let model = model_from(a.checkpoint.as_deref(), &cfg)?;
    let sigma = match a.sigma.or(cfg.noise.sigma) {
        Some(s) => s,
        None => bail!("verify-proof needs a noise sigma"),
    };
    let clean = match &a.input {
        Some(p) => load(p)?,
        None => TranslatingTexture::new(32, 32, model.image_channels(), (1.0, 0.5), 4, cfg.seed).render(4)?,
    };
    let report = verify_risk_gap(&model, &clean, sigma, a.draws, cfg.seed)?;
    println!(
        "gap {:.6e}, sigma^2 {:.6e}, relative error {:.2}% over {} samples",
        report.gap_estimate,
        report.expected_constant,
        100.0 * report.relative_error,
        report.pixel_draws
    );
    if let Some(p) = &a.out {
        write_json(&report, p)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let cfg = a.common.run_config()?;
    let noise = cfg.noise.model()?;
    if noise.sigma.is_none() {
        bail!("ablation synthesises noise and needs a known sigma");
    }
    let noisy = |clean: &VideoSequence, k: u64| -> anyhow::Result<VideoSequence> {
        Ok(add_awgn(clean, &NoiseModel { seed: noise.seed.wrapping_add(k), ..noise })?)
    };
    let train = a
        .train
        .iter()
        .enumerate()
        .map(|(k, p)| noisy(&load(p)?, k as u64))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let eval = a
        .eval
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let clean = load(p)?;
            Ok(ProbeClip {
                noisy: noisy(&clean, 1000 + k as u64)?,
                clean,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let settings = AblationSettings {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seeds: a.seeds.clone(),
    };
    let table = run_ablation(&settings, &train, &noise, &eval, |e| {
        eprintln!("{:<14} seed {:<3} {:.3} dB", e.row, e.seed, e.psnr)
    })?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_json(&table, &a.out_dir.join("ablation.json"))?;
    fs::write(a.out_dir.join("ablation.md"), table.to_markdown())?;
    print!("{}", table.to_markdown());
    Ok(())
}

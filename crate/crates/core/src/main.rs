use std::fs;
use std::io::{self, BufReader, BufWriter};
use std::os::unix::net::UnixListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use smfd::bridge::{serve_echo, BridgeDenoiser};
use smfd::config::{ClipManifest, DenoiserKind, RunConfig, WarpConfig};
use smfd::fusion::{build_candidates, fuse_semantic, propagate_anchor, Correspondences, PairTable};
use smfd::io::{load_any, load_flow, load_mask, save_frame, save_mask, save_raw};
use smfd::metrics::{estimate_flow_hs, ConsistencyReport, FlowEstimatorConfig};
use smfd::poisson::{poisson_blend, BlendRegion, SolverConfig};
use smfd::sampler::{run, Denoiser, IdentityDenoiser, ToyDenoiser};
use smfd::synth::{generate, write_clip, Scenario};
use smfd::warp::backward_warp;
use smfd::FrameF32;

#[derive(Parser)]
#[command(
    name = "smfd",
    version,
    about = "Temporally consistent multi-frame diffusion sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepMode {
    Semantic,
    Detail,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthScenario {
    Translate,
    Flicker,
    Car3,
}

#[derive(Subcommand)]
enum Cmd {
    /// Backward-warp one frame by a `.flo` field.
    Warp {
        #[arg(long)]
        source: PathBuf,
        /// Flow on the output grid pointing into the source.
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the out-of-image mask [default: <out>.validity.png].
        #[arg(long)]
        validity: Option<PathBuf>,
    },
    /// Poisson-blend the current frame's gradients into the masked region of
    /// the warped frame.
    Blend {
        #[arg(long)]
        current: PathBuf,
        #[arg(long)]
        warped: PathBuf,
        /// Region to rebuild; nonzero pixels are inside.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Relative residual tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// One fusion round over the frames of a manifest.
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        step_mode: StepMode,
        /// Anchor frame for the detail mode.
        #[arg(long, default_value_t = 0)]
        anchor: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run config supplying solver and occlusion settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Full synchronized sampling.
    Run {
        #[arg(long, required_unless_present = "print_defaults")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_defaults")]
        out_dir: Option<PathBuf>,
        /// Print the default configuration and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Mont-MSE and warped-overlap consistency of an edited clip.
    Metrics {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        /// Key-value report destination.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        smoothness: f64,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
    },
    /// Write a synthetic clip with exact flows and masks.
    Synth {
        #[arg(long, value_enum)]
        scenario: SynthScenario,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reference bridge responder that echoes every request.
    BridgeEcho {
        /// Listen on a Unix socket instead of stdin/stdout.
        #[arg(long)]
        socket: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Warp {
            source,
            flow,
            out,
            validity,
        } => {
            let src: FrameF32 = load_any(&source)?;
            let (flow, _) = load_flow(&flow)?;
            let w = backward_warp(&src, &flow)?;
            write_frame(&w.warped, &out)?;
            let vpath = validity.unwrap_or_else(|| out.with_extension("validity.png"));
            save_mask(&w.validity, &vpath)?;
        }
        Cmd::Blend {
            current,
            warped,
            mask,
            out,
            tol,
            max_iters,
        } => {
            let current: FrameF32 = load_any(&current)?;
            let warped: FrameF32 = load_any(&warped)?;
            let mask = load_mask(&mask)?;
            let mut cfg = SolverConfig {
                max_iterations: max_iters,
                ..Default::default()
            };
            if let Some(t) = tol {
                cfg.residual_tolerance = t;
            }
            let outcome = poisson_blend(&current, &warped, &BlendRegion::new(mask), &cfg)?;
            if !outcome.converged {
                eprintln!(
                    "warning: solver stopped at {} iterations with relative residual {:.3e}",
                    outcome.iterations, outcome.max_relative_residual
                );
            }
            write_frame(&outcome.frame, &out)?;
        }
        Cmd::Fuse {
            manifest,
            step_mode,
            anchor,
            out_dir,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (m, frames) = load_clip(&manifest)?;
            let corr = correspondences(&m, &frames, &cfg.warp)?;
            let fused = match step_mode {
                StepMode::Semantic => {
                    build_candidates(&frames, &corr, &cfg.solver, cfg.fusion.parallel)?
                        .iter()
                        .map(fuse_semantic)
                        .collect::<smfd::Result<Vec<_>>>()?
                }
                StepMode::Detail => {
                    propagate_anchor(&frames, &corr, anchor, &cfg.solver, cfg.fusion.parallel)?
                }
            };
            write_frames(&fused, &out_dir, cfg.emit_raw)?;
        }
        Cmd::Run {
            print_defaults: true,
            ..
        } => {
            println!(
                "# solver.max_iterations is unset: 10 * sqrt(n) + 1000 per region of n pixels"
            );
            println!("# x0_clip is unset: denoiser predictions are not clamped");
            println!("# denoiser.command / denoiser.socket select an external denoiser (kind = \"external\")");
            println!();
            print!("{}", RunConfig::default().to_toml());
        }
        Cmd::Run {
            manifest,
            config,
            out_dir,
            ..
        } => {
            let (manifest, out_dir) = (manifest.expect("required"), out_dir.expect("required"));
            let cfg = load_config(config.as_deref())?;
            let (m, frames) = load_clip(&manifest)?;
            let corr = if cfg.fusion.enabled && frames.len() > 1 {
                correspondences(&m, &frames, &cfg.warp)?
            } else {
                empty_correspondences(frames.len())
            };
            let mut denoiser: Box<dyn Denoiser<f32>> = match cfg.denoiser.kind {
                DenoiserKind::Toy => Box::new(ToyDenoiser::from_inputs(
                    &frames,
                    cfg.seed,
                    &cfg.denoiser.toy(),
                )),
                DenoiserKind::Identity => Box::new(IdentityDenoiser),
                DenoiserKind::External => Box::new(BridgeDenoiser::connect(
                    &cfg.denoiser.transport()?,
                    cfg.denoiser.conditioning.clone().into_bytes(),
                    cfg.denoiser.timeout(),
                )?),
            };
            let out = run(&frames, &corr, denoiser.as_mut(), &cfg.sampler())?;
            write_frames(&out.frames, &out_dir, cfg.emit_raw)?;
            let mut trace = String::new();
            for s in &out.trace {
                let stage = s
                    .stage
                    .map(|s| format!("{s:?}").to_lowercase())
                    .unwrap_or_else(|| "none".into());
                let anchor = s
                    .anchor
                    .map(|a| a.to_string())
                    .unwrap_or_else(|| "-".into());
                trace += &format!(
                    "step={} timestep={} stage={} anchor={}\n",
                    s.t_index, s.timestep, stage, anchor
                );
            }
            let p = out_dir.join("trace.txt");
            fs::write(&p, trace).with_context(|| format!("writing {}", p.display()))?;
        }
        Cmd::Metrics {
            original,
            edited,
            report,
            smoothness,
            iterations,
        } => {
            let est = FlowEstimatorConfig {
                smoothness,
                iterations,
                ..Default::default()
            };
            est.validate()?;
            let (mo, orig) = load_clip(&original)?;
            let (me, edit) = load_clip(&edited)?;
            if orig.len() != edit.len() {
                bail!(
                    "original has {} frames, edited has {}",
                    orig.len(),
                    edit.len()
                );
            }
            let warp = WarpConfig::default();
            let corr = if me.has_flows() {
                correspondences(&me, &edit, &warp)?
            } else if mo.has_flows() {
                correspondences(&mo, &edit, &warp)?
            } else {
                estimated_correspondences(&orig, &est, &warp)?
            };
            let r = ConsistencyReport::compute(&orig, &edit, &corr, &est)?;
            fs::write(&report, r.to_key_value())
                .with_context(|| format!("writing {}", report.display()))?;
            print!("{r}");
        }
        Cmd::Synth {
            scenario,
            out_dir,
            seed,
        } => {
            let scenario = match scenario {
                SynthScenario::Translate => Scenario::Translate,
                SynthScenario::Flicker => Scenario::Flicker,
                SynthScenario::Car3 => Scenario::Car3,
            };
            let clip = generate::<f32>(scenario, seed)?;
            let path = write_clip(&clip, &out_dir)?;
            println!("{}", path.display());
        }
        Cmd::BridgeEcho { socket: None } => {
            let mut r = BufReader::new(io::stdin().lock());
            let mut w = BufWriter::new(io::stdout().lock());
            serve_echo(&mut r, &mut w)?;
        }
        Cmd::BridgeEcho { socket: Some(path) } => {
            let listener =
                UnixListener::bind(&path).with_context(|| format!("binding {}", path.display()))?;
            for stream in listener.incoming() {
                let stream = stream?;
                let mut r = BufReader::new(stream.try_clone()?);
                let mut w = BufWriter::new(stream);
                if let Err(e) = serve_echo(&mut r, &mut w) {
                    eprintln!("warning: connection ended: {e}");
                }
            }
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn load_clip(manifest: &Path) -> anyhow::Result<(ClipManifest, Vec<FrameF32>)> {
    let m = ClipManifest::load(manifest)?;
    let frames = m.load_frames()?;
    Ok((m, frames))
}

fn correspondences(
    m: &ClipManifest,
    frames: &[FrameF32],
    warp: &WarpConfig,
) -> anyhow::Result<Correspondences<f32>> {
    if !m.has_flows() {
        bail!("manifest lists no flows; fusion needs them");
    }
    warp.validate()?;
    Ok(m.load_correspondences(frames[0].width(), frames[0].height(), warp)?)
}

fn empty_correspondences(n: usize) -> Correspondences<f32> {
    Correspondences {
        flows: PairTable::new(n, "flows"),
        occlusions: PairTable::new(n, "occlusions"),
    }
}

/// Every ordered pair estimated directly from the original frames.
fn estimated_correspondences(
    frames: &[FrameF32],
    est: &FlowEstimatorConfig,
    warp: &WarpConfig,
) -> anyhow::Result<Correspondences<f32>> {
    let n = frames.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|j| (0..n).filter(move |&i| i != j).map(move |i| (j, i)))
        .collect();
    let flows: Vec<_> = pairs
        .par_iter()
        .map(|&(j, i)| estimate_flow_hs(&frames[i], &frames[j], est))
        .collect::<smfd::Result<_>>()?;
    let mut table = PairTable::new(n, "flows");
    for (&(j, i), f) in pairs.iter().zip(flows) {
        table.insert(j, i, f);
    }
    Ok(Correspondences::from_flows(
        table,
        warp.occlusion_tolerance_px as f32,
        warp.dilation_radius,
    )?)
}

fn write_frame(frame: &FrameF32, path: &Path) -> anyhow::Result<()> {
    if path.extension().is_some_and(|e| e == "f32") {
        save_raw(frame, path)?;
    } else {
        save_frame(frame, path)?;
    }
    Ok(())
}

fn write_frames(frames: &[FrameF32], dir: &Path, raw: bool) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (k, f) in frames.iter().enumerate() {
        save_frame(f, &dir.join(format!("frame_{k:03}.png")))?;
        if raw {
            save_raw(f, &dir.join(format!("frame_{k:03}.f32")))?;
        }
    }
    Ok(())
}

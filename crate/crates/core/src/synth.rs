//! Synthetic clips with exact analytic flows.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Correspondences, PairTable};
use crate::io::{save_flow, save_frame, save_mask};
use crate::raster::{FlowField, Frame};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::warp::DEFAULT_OCCLUSION_TOLERANCE_PX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Translate,
    Flicker,
    Car3,
    Texture,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Translate => "translate",
            Scenario::Flicker => "flicker",
            Scenario::Car3 => "car3",
            Scenario::Texture => "texture",
        }
    }
}

/// Frames plus their exact correspondences.
#[derive(Clone, Debug)]
pub struct SynthClip<T: Scalar = f32> {
    pub frames: Vec<Frame<T>>,
    pub corr: Correspondences<T>,
}

/// Smooth three-channel pattern in roughly `[0.2, 0.8]`.
fn texture_value(x: f64, y: f64, c: usize, phase: f64) -> f64 {
    let pc = phase + c as f64 * 2.1;
    0.5 + 0.14 * (0.23 * x + 0.11 * y + pc).sin()
        + 0.1 * (0.09 * x - 0.19 * y + 1.7 * pc).cos()
        + 0.06 * (0.31 * x + 0.27 * y - pc).sin()
}

fn translation_corr<T: Scalar>(
    n: usize,
    w: usize,
    h: usize,
    d: (f64, f64),
) -> Result<Correspondences<T>> {
    // Pixel p of frame i shows what frame j shows at p + (j - i) d.
    let flows = PairTable::try_from_fn(n, "flows", |j, i| {
        let k = j as f64 - i as f64;
        Ok(FlowField::uniform(w, h, T::lit(k * d.0), T::lit(k * d.1)))
    })?;
    Correspondences::from_flows(flows, T::lit(DEFAULT_OCCLUSION_TOLERANCE_PX), 0)
}

/// A textured scene panning by `d` pixels per frame.
pub fn translate<T: Scalar>(
    n: usize,
    w: usize,
    h: usize,
    d: (f64, f64),
    seed: u64,
) -> Result<SynthClip<T>> {
    let phase = stream_rng(seed, Stream::Synth, &[0]).random_range(0.0..std::f64::consts::TAU);
    let frames = (0..n)
        .map(|k| {
            Frame::from_fn(w, h, 3, |x, y, c| {
                T::lit(texture_value(
                    x as f64 - k as f64 * d.0,
                    y as f64 - k as f64 * d.1,
                    c,
                    phase,
                ))
            })
        })
        .collect();
    Ok(SynthClip {
        frames,
        corr: translation_corr(n, w, h, d)?,
    })
}

/// Panning texture where every frame also carries its own random color cast.
pub fn flicker<T: Scalar>(n: usize, w: usize, h: usize, seed: u64) -> Result<SynthClip<T>> {
    let mut clip = translate::<T>(n, w, h, (1.0, 0.0), seed)?;
    for (k, f) in clip.frames.iter_mut().enumerate() {
        let mut rng = stream_rng(seed, Stream::Synth, &[1, k as u64]);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
        let (fw, fh, fc) = f.dims();
        *f = Frame::from_fn(fw, fh, fc, |x, y, c| f.get(x, y, c) + T::lit(tint[c]));
    }
    Ok(clip)
}

pub const CAR_SIZE: usize = 16;
pub const CAR_X: [usize; 3] = [4, 24, 44];
pub const CAR_Y: usize = 24;

/// A constant-color square moving over a static background whose color
/// changes from frame to frame, on a 64x64 canvas.
pub fn car3<T: Scalar>(seed: u64) -> Result<SynthClip<T>> {
    let (w, h) = (64, 64);
    let mut rng = stream_rng(seed, Stream::Synth, &[2]);
    let car: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..0.95));
    let backgrounds: Vec<[f64; 3]> = (0..3)
        .map(|k| {
            std::array::from_fn(|c| {
                0.15 + 0.2 * k as f64 + 0.05 * c as f64 + rng.random_range(0.0..0.05)
            })
        })
        .collect();
    let inside = |k: usize, x: usize, y: usize| {
        (CAR_X[k]..CAR_X[k] + CAR_SIZE).contains(&x) && (CAR_Y..CAR_Y + CAR_SIZE).contains(&y)
    };
    let frames = (0..3)
        .map(|k| {
            Frame::from_fn(w, h, 3, |x, y, c| {
                T::lit(if inside(k, x, y) {
                    car[c]
                } else {
                    backgrounds[k][c]
                })
            })
        })
        .collect();
    let flows = PairTable::try_from_fn(3, "flows", |j, i| {
        let dx = T::lit(CAR_X[j] as f64 - CAR_X[i] as f64);
        Ok(FlowField::from_fn(w, h, |x, y| {
            if inside(i, x, y) {
                (dx, T::zero())
            } else {
                (T::zero(), T::zero())
            }
        }))
    })?;
    let corr = Correspondences::from_flows(flows, T::lit(DEFAULT_OCCLUSION_TOLERANCE_PX), 0)?;
    Ok(SynthClip { frames, corr })
}

/// Period of the planted fine texture, in pixels.
pub const FINE_PERIOD: f64 = 4.0;

/// Panning smooth scene carrying a fine sinusoidal texture whose phase is
/// jittered per frame by a sub-pixel amount, so that warping with the exact
/// integer flow misaligns the fine detail between frames.
pub fn texture<T: Scalar>(n: usize, w: usize, h: usize, seed: u64) -> Result<SynthClip<T>> {
    let d = (1.0, 0.0);
    let mut rng = stream_rng(seed, Stream::Synth, &[3]);
    // Evenly spread jitters in (-1, 1) px, shuffled.
    let mut jitter: Vec<f64> = (0..n)
        .map(|k| -1.0 + (2 * k + 1) as f64 / n as f64)
        .collect();
    jitter.shuffle(&mut rng);
    let tau = std::f64::consts::TAU;
    let frames = (0..n)
        .map(|k| {
            Frame::from_fn(w, h, 3, |x, y, c| {
                let (sx, sy) = (x as f64 - k as f64 * d.0, y as f64);
                let smooth =
                    0.5 + 0.1 * (tau * sx / 37.0 + c as f64).sin() + 0.08 * (tau * sy / 29.0).cos();
                let fine = 0.12
                    * (tau * (sx + jitter[k]) / FINE_PERIOD).sin()
                    * (tau * sy / FINE_PERIOD).cos();
                T::lit(smooth + fine)
            })
        })
        .collect();
    Ok(SynthClip {
        frames,
        corr: translation_corr(n, w, h, d)?,
    })
}

/// The scenario with the sizes the acceptance suite uses.
pub fn generate<T: Scalar>(scenario: Scenario, seed: u64) -> Result<SynthClip<T>> {
    match scenario {
        Scenario::Translate => translate(8, 64, 64, (2.0, 1.0), seed),
        Scenario::Flicker => flicker(8, 128, 128, seed),
        Scenario::Car3 => car3(seed),
        Scenario::Texture => texture(8, 64, 64, seed),
    }
}

/// Writes frames, every ordered-pair flow and mask, and a `clip.toml`
/// manifest into `dir`. Returns the manifest path.
pub fn write_clip<T: Scalar>(clip: &SynthClip<T>, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let n = clip.frames.len();
    let mut manifest = String::from("frames = [\n");
    for (k, f) in clip.frames.iter().enumerate() {
        let name = format!("frame_{k:03}.png");
        save_frame(f, &dir.join(&name))?;
        let _ = writeln!(manifest, "  \"{name}\",");
    }
    manifest.push_str("]\nflow_mode = \"all-pairs\"\n");
    for from in 0..n {
        for to in 0..n {
            if from == to {
                continue;
            }
            // Table entry (to, from) lives on `from` and points into `to`.
            let flow_name = format!("flow_{from:03}_{to:03}.flo");
            let mask_name = format!("mask_{from:03}_{to:03}.png");
            save_flow(clip.corr.flows.get(to, from)?, &dir.join(&flow_name))?;
            save_mask(clip.corr.occlusions.get(to, from)?, &dir.join(&mask_name))?;
            let _ = write!(
                manifest,
                "\n[[flows]]\nfrom = {from}\nto = {to}\npath = \"{flow_name}\"\n"
            );
            let _ = write!(
                manifest,
                "\n[[masks]]\nfrom = {from}\nto = {to}\npath = \"{mask_name}\"\n"
            );
        }
    }
    let path = dir.join("clip.toml");
    fs::write(&path, manifest).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

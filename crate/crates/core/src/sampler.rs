//! The synchronized denoising loop.
//!
//! Each frame carries its own noisy state `x_t`. At every step the denoiser
//! predicts clean frames `x0_hat`, the predictions are fused across frames,
//! and each state is re-noised to the next timestep with the DDIM update.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_round, Correspondences, FusionConfig, Stage};
use crate::poisson::SolverConfig;
use crate::raster::Frame;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of sampling steps.
    pub steps: usize,
    /// Length of the underlying training schedule the steps are strided from.
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// 0 is deterministic DDIM, 1 is ancestral sampling.
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            train_steps: 1000,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
            eta: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("schedule.steps", "must be >= 1"));
        }
        if self.train_steps < self.steps {
            return Err(Error::config(
                "schedule.train_steps",
                format!(
                    "must be >= schedule.steps ({}), got {}",
                    self.steps, self.train_steps
                ),
            ));
        }
        for (field, b) in [
            ("schedule.beta_start", self.beta_start),
            ("schedule.beta_end", self.beta_end),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(field, format!("must lie in (0, 1), got {b}")));
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(
                "schedule.eta",
                format!("must lie in [0, 1], got {}", self.eta),
            ));
        }
        Ok(())
    }
}

/// Noise schedule resolved to the sampling steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSchedule {
    /// `ᾱ` at each sampling step, noisiest first.
    alpha_bars: Vec<f64>,
    /// Training-schedule timestep of each sampling step, descending.
    timesteps: Vec<usize>,
    /// Per-step `β` of the training schedule.
    betas: Vec<f64>,
}

impl SamplerSchedule {
    /// Linear `β` over the training schedule, strided down to `cfg.steps`.
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.train_steps;
        let betas: Vec<f64> = (0..n)
            .map(|k| {
                if n == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * k as f64 / (n - 1) as f64
                }
            })
            .collect();
        let mut train_alpha_bars = Vec::with_capacity(n);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            train_alpha_bars.push(acc);
        }
        let ratio = n / cfg.steps;
        let timesteps: Vec<usize> = (0..cfg.steps).rev().map(|k| k * ratio).collect();
        let alpha_bars = timesteps.iter().map(|&t| train_alpha_bars[t]).collect();
        Ok(Self {
            alpha_bars,
            timesteps,
            betas,
        })
    }

    /// Schedule given directly by its per-step `ᾱ` values (noisiest first).
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::Schedule("empty schedule".into()));
        }
        for (k, &a) in alpha_bars.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Schedule(format!(
                    "alpha_bar[{k}] = {a} outside (0, 1]"
                )));
            }
        }
        let n = alpha_bars.len();
        Ok(Self {
            timesteps: (0..n).rev().collect(),
            betas: Vec::new(),
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bars.is_empty()
    }

    pub fn alpha_bar(&self, t_index: usize) -> f64 {
        self.alpha_bars[t_index]
    }

    /// `ᾱ` of the step after `t_index`, or `None` at the final step.
    pub fn alpha_bar_prev(&self, t_index: usize) -> Option<f64> {
        self.alpha_bars.get(t_index + 1).copied()
    }

    pub fn timestep(&self, t_index: usize) -> usize {
        self.timesteps[t_index]
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn is_final(&self, t_index: usize) -> bool {
        t_index + 1 == self.len()
    }
}

/// Coefficients of `x_prev = c_x0 * x0_hat + c_eps * eps_hat + sigma * z`,
/// with `eps_hat = (x_t - sqrt(ᾱ_t) x0_hat) / sqrt(1 - ᾱ_t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdimCoefficients {
    pub sqrt_alpha_bar: f64,
    pub sqrt_one_minus_alpha_bar: f64,
    pub c_x0: f64,
    pub c_eps: f64,
    pub sigma: f64,
}

impl DdimCoefficients {
    pub fn new(alpha_bar: f64, alpha_bar_prev: f64, eta: f64) -> Result<Self> {
        if alpha_bar >= 1.0 {
            return Err(Error::Schedule(format!(
                "alpha_bar = {alpha_bar} at a non-final step leaves no noise to remove"
            )));
        }
        let sigma = eta
            * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).sqrt()
            * (1.0 - alpha_bar / alpha_bar_prev).max(0.0).sqrt();
        Ok(Self {
            sqrt_alpha_bar: alpha_bar.sqrt(),
            sqrt_one_minus_alpha_bar: (1.0 - alpha_bar).sqrt(),
            c_x0: alpha_bar_prev.sqrt(),
            c_eps: (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt(),
            sigma,
        })
    }

    #[inline]
    pub fn apply(&self, x_t: f64, x0_hat: f64, z: f64) -> f64 {
        let eps = (x_t - self.sqrt_alpha_bar * x0_hat) / self.sqrt_one_minus_alpha_bar;
        self.c_x0 * x0_hat + self.c_eps * eps + self.sigma * z
    }
}

/// One DDIM update from step `t_index` to the next. At the final step the
/// prediction itself is returned. `rng` is only drawn from when `eta > 0`.
pub fn ddim_step<T: Scalar>(
    x_t: &Frame<T>,
    x0_hat: &Frame<T>,
    t_index: usize,
    schedule: &SamplerSchedule,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<Frame<T>> {
    x_t.check_dims(x0_hat, "ddim_step")?;
    if t_index >= schedule.len() {
        return Err(Error::Schedule(format!(
            "step {t_index} outside a {}-step schedule",
            schedule.len()
        )));
    }
    let Some(prev) = schedule.alpha_bar_prev(t_index) else {
        return Ok(x0_hat.clone());
    };
    let coef = DdimCoefficients::new(schedule.alpha_bar(t_index), prev, eta)?;
    if coef.sigma == 0.0 {
        return x_t.zip_map(x0_hat, |x, x0| {
            T::lit(coef.apply(x.as_f64(), x0.as_f64(), 0.0))
        });
    }
    let mut out = x_t.clone();
    for (o, &x0) in out.data_mut().iter_mut().zip(x0_hat.data()) {
        let z: f64 = rng.sample(StandardNormal);
        *o = T::lit(coef.apply(o.as_f64(), x0.as_f64(), z));
    }
    Ok(out)
}

/// Noisy states of all frames at one point of the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState<T: Scalar = f32> {
    pub frames: Vec<Frame<T>>,
    pub t_index: usize,
    pub seed: u64,
}

/// Standard normal noise for `n_frames` frames; frame `k` draws from a
/// sub-seed of `(seed, frame_offset + k)`.
pub fn init_noise<T: Scalar>(
    n_frames: usize,
    (width, height, channels): (usize, usize, usize),
    seed: u64,
    frame_offset: usize,
) -> DiffusionState<T> {
    let frames = (0..n_frames)
        .map(|k| {
            let mut rng = stream_rng(seed, Stream::InitialNoise, &[(frame_offset + k) as u64]);
            Frame::from_fn(width, height, channels, |_, _, _| {
                T::lit(rng.sample(StandardNormal))
            })
        })
        .collect();
    DiffusionState {
        frames,
        t_index: 0,
        seed,
    }
}

/// What the engine hands a denoiser at each step.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseRequest<'a, T: Scalar> {
    pub run_token: u64,
    pub t_index: usize,
    /// Training-schedule timestep.
    pub timestep: usize,
    pub alpha_bar: f64,
    /// Clip-global index of each frame in the batch.
    pub frame_indices: &'a [usize],
    pub frames: &'a [Frame<T>],
}

/// Predicts clean frames `x0_hat` from noisy frames `x_t`.
pub trait Denoiser<T: Scalar> {
    fn predict(&mut self, request: &DenoiseRequest<'_, T>) -> Result<Vec<Frame<T>>>;
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityDenoiser;

impl<T: Scalar> Denoiser<T> for IdentityDenoiser {
    fn predict(&mut self, request: &DenoiseRequest<'_, T>) -> Result<Vec<Frame<T>>> {
        Ok(request.frames.to_vec())
    }
}

/// Always predicts the same frames, indexed by clip-global frame index.
#[derive(Clone, Debug)]
pub struct FixedDenoiser<T: Scalar = f32> {
    pub frames: Vec<Frame<T>>,
}

impl<T: Scalar> Denoiser<T> for FixedDenoiser<T> {
    fn predict(&mut self, request: &DenoiseRequest<'_, T>) -> Result<Vec<Frame<T>>> {
        pick(&self.frames, request.frame_indices)
    }
}

fn pick<T: Scalar>(frames: &[Frame<T>], indices: &[usize]) -> Result<Vec<Frame<T>>> {
    indices
        .iter()
        .map(|&i| {
            frames
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Denoiser(format!("no planted frame for index {i}")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Strength of the pull toward the noisy input; the actual weight at a
    /// step is `(1 - ᾱ_t) * lambda0`.
    pub lambda0: f64,
    /// Weight of the per-frame random tint in the planted targets.
    pub tint_strength: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.3,
            tint_strength: 0.3,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda0) {
            return Err(Error::config(
                "denoiser.lambda0",
                format!("must lie in [0, 1], got {}", self.lambda0),
            ));
        }
        if !(0.0..=1.0).contains(&self.tint_strength) {
            return Err(Error::config(
                "denoiser.tint_strength",
                format!("must lie in [0, 1], got {}", self.tint_strength),
            ));
        }
        Ok(())
    }
}

/// Closed-form stand-in for a learned denoiser.
///
/// Frame `i` has a planted target `P_i`: the input frame with its channels
/// rotated, mixed with a random tint drawn from a frame-indexed seed, so that
/// independent sampling flickers. The prediction is
/// `P_i + λ(t) (x_t / sqrt(ᾱ_t) - P_i)` with `λ(t) = (1 - ᾱ_t) λ0`.
#[derive(Clone, Debug)]
pub struct ToyDenoiser<T: Scalar = f32> {
    pub targets: Vec<Frame<T>>,
    pub lambda0: f64,
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn new(targets: Vec<Frame<T>>, lambda0: f64) -> Self {
        Self { targets, lambda0 }
    }

    pub fn from_inputs(inputs: &[Frame<T>], seed: u64, cfg: &ToyConfig) -> Self {
        let targets = inputs
            .iter()
            .enumerate()
            .map(|(i, f)| planted_target(f, i, seed, cfg.tint_strength))
            .collect();
        Self::new(targets, cfg.lambda0)
    }

    /// The closed form for a single value.
    #[inline]
    pub fn formula(target: f64, x_t: f64, alpha_bar: f64, lambda0: f64) -> f64 {
        let lambda = (1.0 - alpha_bar) * lambda0;
        target + lambda * (x_t / alpha_bar.sqrt() - target)
    }
}

/// Channel-rotated input mixed with a frame-seeded random tint.
pub fn planted_target<T: Scalar>(
    input: &Frame<T>,
    frame_index: usize,
    seed: u64,
    tint_strength: f64,
) -> Frame<T> {
    let (w, h, ch) = input.dims();
    let mut rng = stream_rng(seed, Stream::Tint, &[frame_index as u64]);
    let tint: Vec<f64> = (0..ch).map(|_| rng.random::<f64>()).collect();
    Frame::from_fn(w, h, ch, |x, y, c| {
        let v = input.get(x, y, (c + 1) % ch).as_f64();
        T::lit((1.0 - tint_strength) * v + tint_strength * tint[c])
    })
}

impl<T: Scalar> Denoiser<T> for ToyDenoiser<T> {
    fn predict(&mut self, request: &DenoiseRequest<'_, T>) -> Result<Vec<Frame<T>>> {
        let targets = pick(&self.targets, request.frame_indices)?;
        targets
            .iter()
            .zip(request.frames)
            .map(|(p, x)| {
                p.zip_map(x, |p, x| {
                    T::lit(Self::formula(
                        p.as_f64(),
                        x.as_f64(),
                        request.alpha_bar,
                        self.lambda0,
                    ))
                })
            })
            .collect()
    }
}

/// Queries the denoiser for the current state and validates its answer.
pub fn predict_x0<T: Scalar>(
    state: &DiffusionState<T>,
    denoiser: &mut dyn Denoiser<T>,
    schedule: &SamplerSchedule,
    frame_indices: &[usize],
    run_token: u64,
    clip: Option<[f64; 2]>,
) -> Result<Vec<Frame<T>>> {
    let request = DenoiseRequest {
        run_token,
        t_index: state.t_index,
        timestep: schedule.timestep(state.t_index),
        alpha_bar: schedule.alpha_bar(state.t_index),
        frame_indices,
        frames: &state.frames,
    };
    let out = denoiser.predict(&request)?;
    if out.len() != state.frames.len() {
        return Err(Error::Denoiser(format!(
            "expected {} predictions, got {}",
            state.frames.len(),
            out.len()
        )));
    }
    for (k, (p, x)) in out.iter().zip(&state.frames).enumerate() {
        if !x.same_dims(p) {
            return Err(Error::Denoiser(format!(
                "prediction for frame {k} has dimensions {}, expected {}",
                crate::raster::fmt_dims(p.dims()),
                crate::raster::fmt_dims(x.dims())
            )));
        }
        if !p.is_finite() {
            return Err(Error::Denoiser(format!(
                "non-finite prediction for frame {k}"
            )));
        }
    }
    Ok(match clip {
        Some([lo, hi]) => out
            .iter()
            .map(|f| f.clamp(T::lit(lo), T::lit(hi)))
            .collect(),
        None => out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SamplerConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub fusion: FusionConfig,
    pub solver: SolverConfig,
    /// Clamp window applied to denoiser predictions before fusion.
    pub x0_clip: Option<[f64; 2]>,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.fusion.validate()?;
        self.solver.validate()?;
        if let Some([lo, hi]) = self.x0_clip {
            if !(lo < hi) {
                return Err(Error::config(
                    "x0_clip",
                    format!("lower bound {lo} must be below upper bound {hi}"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-step record of what the loop did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub t_index: usize,
    pub timestep: usize,
    pub stage: Option<Stage>,
    pub anchor: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutput<T: Scalar = f32> {
    /// Final fused predictions clamped to `[0, 1]`.
    pub frames: Vec<Frame<T>>,
    pub trace: Vec<StepTrace>,
}

/// Synchronized sampling over one clip.
///
/// `pinned[k] = Some(f)` replaces frame `k`'s prediction with `f` at every
/// step; windowed runs use it to carry a frame over from the previous window.
fn run_window<T: Scalar>(
    inputs: &[Frame<T>],
    corr: &Correspondences<T>,
    denoiser: &mut dyn Denoiser<T>,
    cfg: &SamplerConfig,
    frame_offset: usize,
    pinned: &[Option<Frame<T>>],
) -> Result<RunOutput<T>> {
    let n = inputs.len();
    let schedule = SamplerSchedule::new(&cfg.schedule)?;
    let dims = inputs[0].dims();
    let frame_indices: Vec<usize> = (frame_offset..frame_offset + n).collect();
    let run_token = derive_seed(
        cfg.seed,
        Stream::StepNoise,
        &[u64::MAX, frame_offset as u64],
    );
    let mut state = init_noise::<T>(n, dims, cfg.seed, frame_offset);
    let mut trace = Vec::with_capacity(schedule.len());

    for k in 0..schedule.len() {
        state.t_index = k;
        let mut x0 = predict_x0(
            &state,
            denoiser,
            &schedule,
            &frame_indices,
            run_token,
            cfg.x0_clip,
        )
        .map_err(|e| e.at_step(k, None))?;
        for (slot, pin) in x0.iter_mut().zip(pinned) {
            if let Some(p) = pin {
                *slot = p.clone();
            }
        }
        let mut step = StepTrace {
            t_index: k,
            timestep: schedule.timestep(k),
            stage: None,
            anchor: None,
        };
        if cfg.fusion.enabled && n > 1 {
            let round = fuse_round(&x0, corr, &cfg.fusion, &cfg.solver, k, schedule.len())
                .map_err(|e| e.at_step(k, None))?;
            step.stage = Some(round.stage);
            step.anchor = round.anchor;
            x0 = round.frames;
        }
        trace.push(step);

        if schedule.is_final(k) {
            let frames = x0.iter().map(|f| f.clamp(T::zero(), T::one())).collect();
            return Ok(RunOutput { frames, trace });
        }
        for (i, (x, x0)) in state.frames.iter_mut().zip(&x0).enumerate() {
            let mut rng = stream_rng(
                cfg.seed,
                Stream::StepNoise,
                &[k as u64, (frame_offset + i) as u64],
            );
            *x = ddim_step(x, x0, k, &schedule, cfg.schedule.eta, &mut rng)
                .map_err(|e| e.at_step(k, Some(i)))?;
        }
    }
    unreachable!("schedule has at least one step")
}

/// Runs synchronized sampling over a whole clip.
///
/// Clips longer than `fusion.max_clip_len` are split into windows that
/// overlap by one frame; the shared frame's result from one window is pinned
/// as that frame's prediction throughout the next.
pub fn run<T: Scalar>(
    inputs: &[Frame<T>],
    corr: &Correspondences<T>,
    denoiser: &mut dyn Denoiser<T>,
    cfg: &SamplerConfig,
) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let first = inputs.first().ok_or(Error::Empty("input video"))?;
    for f in inputs {
        first.check_dims(f, "input video")?;
    }
    if cfg.fusion.enabled {
        if corr.n_frames() != inputs.len() {
            return Err(Error::DimensionMismatch {
                context: "correspondence tables",
                expected: format!("{} frames", inputs.len()),
                found: format!("{} frames", corr.n_frames()),
            });
        }
        corr.check_complete()?;
    }

    let n = inputs.len();
    let cap = cfg.fusion.max_clip_len;
    if n <= cap {
        return run_window(inputs, corr, denoiser, cfg, 0, &vec![None; n]);
    }

    let mut frames: Vec<Frame<T>> = Vec::with_capacity(n);
    let mut trace = Vec::new();
    let mut start = 0;
    loop {
        let len = cap.min(n - start);
        let mut pinned = vec![None; len];
        if start > 0 {
            pinned[0] = frames.last().cloned();
        }
        let sub = corr.window(start, len);
        let out = run_window(
            &inputs[start..start + len],
            &sub,
            denoiser,
            cfg,
            start,
            &pinned,
        )?;
        let skip = usize::from(start > 0);
        frames.extend(out.frames.into_iter().skip(skip));
        trace.extend(out.trace);
        if start + len >= n {
            break;
        }
        start += len - 1;
    }
    Ok(RunOutput { frames, trace })
}

//! Per-timestep information sharing between frames.
//!
//! For every target frame `i` the candidate set holds one frame per source
//! `j`: the source prediction warped to pose `i` and seam-repaired with
//! [`poisson::candidate`]; the `j == i` entry is the prediction itself.
//! Semantic steps average the set, detail steps overwrite every frame with
//! one anchor frame's candidate.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poisson::{self, SolverConfig};
use crate::raster::{FlowField, Frame, OcclusionMask};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::warp::backward_warp;

/// Default clip length; longer inputs are processed in overlapping windows.
pub const DEFAULT_MAX_CLIP_LEN: usize = 8;

/// Dense table indexed by ordered frame pairs `(source, target)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTable<V> {
    n: usize,
    entries: Vec<Option<V>>,
    name: &'static str,
}

impl<V> PairTable<V> {
    pub fn new(n: usize, name: &'static str) -> Self {
        Self {
            n,
            entries: (0..n * n).map(|_| None).collect(),
            name,
        }
    }

    /// Fills every off-diagonal entry from `f(source, target)`.
    pub fn try_from_fn(
        n: usize,
        name: &'static str,
        mut f: impl FnMut(usize, usize) -> Result<V>,
    ) -> Result<Self> {
        let mut t = Self::new(n, name);
        for source in 0..n {
            for target in 0..n {
                if source != target {
                    t.insert(source, target, f(source, target)?);
                }
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn insert(&mut self, source: usize, target: usize, value: V) {
        self.entries[source * self.n + target] = Some(value);
    }

    pub fn get(&self, source: usize, target: usize) -> Result<&V> {
        self.entries
            .get(source * self.n + target)
            .and_then(Option::as_ref)
            .filter(|_| source < self.n && target < self.n)
            .ok_or(Error::MissingPair {
                table: self.name,
                source_index: source,
                target_index: target,
            })
    }

    pub fn contains(&self, source: usize, target: usize) -> bool {
        self.get(source, target).is_ok()
    }

    /// Checks that every ordered pair with `source != target` is present.
    pub fn check_complete(&self) -> Result<()> {
        for source in 0..self.n {
            for target in 0..self.n {
                if source != target {
                    self.get(source, target)?;
                }
            }
        }
        Ok(())
    }

    pub fn map<U>(&self, name: &'static str, mut f: impl FnMut(&V) -> U) -> PairTable<U> {
        PairTable {
            n: self.n,
            entries: self
                .entries
                .iter()
                .map(|e| e.as_ref().map(&mut f))
                .collect(),
            name,
        }
    }

    /// Sub-table over the frames `range`, re-indexed from zero.
    pub fn window(&self, start: usize, len: usize) -> PairTable<V>
    where
        V: Clone,
    {
        let mut t = PairTable::new(len, self.name);
        for s in 0..len {
            for d in 0..len {
                if let Some(v) = &self.entries[(start + s) * self.n + start + d] {
                    t.insert(s, d, v.clone());
                }
            }
        }
        t
    }
}

/// Flow and occlusion data for every ordered frame pair. The flow stored at
/// `(j, i)` lives on frame `i`'s grid and points into frame `j`, and the
/// occlusion mask at `(j, i)` marks pixels of frame `i` with no reliable
/// match in frame `j`.
#[derive(Clone, Debug)]
pub struct Correspondences<T: Scalar = f32> {
    pub flows: PairTable<FlowField<T>>,
    pub occlusions: PairTable<OcclusionMask>,
}

impl<T: Scalar> Correspondences<T> {
    pub fn n_frames(&self) -> usize {
        self.flows.len()
    }

    /// Derives occlusions from the flows by forward-backward checking.
    pub fn from_flows(
        flows: PairTable<FlowField<T>>,
        tolerance_px: T,
        dilation: usize,
    ) -> Result<Self> {
        let n = flows.len();
        let occlusions = PairTable::try_from_fn(n, "occlusion", |j, i| {
            crate::warp::occlusion_mask_dilated(
                flows.get(j, i)?,
                flows.get(i, j)?,
                tolerance_px,
                dilation,
            )
        })?;
        Ok(Self { flows, occlusions })
    }

    pub fn check_complete(&self) -> Result<()> {
        self.flows.check_complete()?;
        self.occlusions.check_complete()?;
        if self.occlusions.len() != self.flows.len() {
            return Err(Error::DimensionMismatch {
                context: "correspondence tables",
                expected: format!("{} frames", self.flows.len()),
                found: format!("{} frames", self.occlusions.len()),
            });
        }
        Ok(())
    }

    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            flows: self.flows.window(start, len),
            occlusions: self.occlusions.window(start, len),
        }
    }
}

/// All `N` candidates for one target frame, indexed by source frame.
#[derive(Clone, Debug)]
pub struct CandidateSet<T: Scalar = f32> {
    pub target_index: usize,
    pub candidates: Vec<Frame<T>>,
    /// Sources whose Poisson solve stopped at the iteration cap.
    pub unconverged: Vec<usize>,
    /// Sources with no valid correspondence at all (candidate is the
    /// target's own prediction).
    pub no_overlap: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorPolicy {
    UniformRandom,
    RoundRobin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Candidates are averaged.
    Semantic,
    /// One anchor frame overwrites the others.
    Detail,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// With fusion off every frame samples independently.
    pub enabled: bool,
    /// Fraction of the schedule, from the noisy end, run as semantic steps.
    pub stage_boundary_fraction: f64,
    pub rng_seed: u64,
    pub anchor_policy: AnchorPolicy,
    /// Build candidates on the rayon pool; results are identical either way.
    pub parallel: bool,
    /// Clips longer than this run in windows overlapping by one frame.
    pub max_clip_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stage_boundary_fraction: 0.5,
            rng_seed: 0,
            anchor_policy: AnchorPolicy::UniformRandom,
            parallel: true,
            max_clip_len: DEFAULT_MAX_CLIP_LEN,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.stage_boundary_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(
                "fusion.stage_boundary_fraction",
                format!("must lie in (0, 1], got {f}"),
            ));
        }
        if self.max_clip_len < 2 {
            return Err(Error::config("fusion.max_clip_len", "must be >= 2"));
        }
        Ok(())
    }

    /// Stage of denoising step `step_index` (0 = noisiest) in a schedule of
    /// `total_steps`: the first `fraction * total_steps` steps are semantic.
    pub fn stage_for(&self, step_index: usize, total_steps: usize) -> Stage {
        if (step_index as f64) < self.stage_boundary_fraction * total_steps as f64 {
            Stage::Semantic
        } else {
            Stage::Detail
        }
    }
}

/// Anchor frame for a detail step; a pure function of the seed and step.
pub fn select_anchor(cfg: &FusionConfig, timestep_index: usize, n_frames: usize) -> usize {
    assert!(n_frames >= 1, "select_anchor needs at least one frame");
    match cfg.anchor_policy {
        AnchorPolicy::RoundRobin => timestep_index % n_frames,
        AnchorPolicy::UniformRandom => {
            stream_rng(cfg.rng_seed, Stream::Anchor, &[timestep_index as u64])
                .random_range(0..n_frames)
        }
    }
}

fn check_inputs<T: Scalar>(predictions: &[Frame<T>], corr: &Correspondences<T>) -> Result<()> {
    let first = predictions.first().ok_or(Error::Empty("predictions"))?;
    for p in predictions {
        first.check_dims(p, "predictions")?;
    }
    if corr.n_frames() != predictions.len() {
        return Err(Error::DimensionMismatch {
            context: "correspondence table size",
            expected: format!("{} frames", predictions.len()),
            found: format!("{} frames", corr.n_frames()),
        });
    }
    Ok(())
}

/// Candidate from `source` at the pose of `target`.
fn one_candidate<T: Scalar>(
    predictions: &[Frame<T>],
    corr: &Correspondences<T>,
    source: usize,
    target: usize,
    cfg: &SolverConfig,
) -> Result<poisson::BlendOutcome<T>> {
    let flow = corr.flows.get(source, target)?;
    let occlusion = corr.occlusions.get(source, target)?;
    let warped = backward_warp(&predictions[source], flow)?;
    poisson::candidate(&predictions[target], &warped, occlusion, cfg)
}

fn collect_pairs<T: Scalar>(
    pairs: Vec<(usize, usize)>,
    parallel: bool,
    f: impl Fn(usize, usize) -> Result<poisson::BlendOutcome<T>> + Sync,
) -> Result<Vec<poisson::BlendOutcome<T>>> {
    if parallel {
        pairs.into_par_iter().map(|(j, i)| f(j, i)).collect()
    } else {
        pairs.into_iter().map(|(j, i)| f(j, i)).collect()
    }
}

/// Builds the `N x N` candidate table.
pub fn build_candidates<T: Scalar>(
    predictions: &[Frame<T>],
    corr: &Correspondences<T>,
    cfg: &SolverConfig,
    parallel: bool,
) -> Result<Vec<CandidateSet<T>>> {
    check_inputs(predictions, corr)?;
    let n = predictions.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (j, i)))
        .collect();
    let mut outcomes = collect_pairs(pairs, parallel, |j, i| {
        one_candidate(predictions, corr, j, i, cfg)
    })?
    .into_iter();

    let mut sets = Vec::with_capacity(n);
    for i in 0..n {
        let mut set = CandidateSet {
            target_index: i,
            candidates: Vec::with_capacity(n),
            unconverged: Vec::new(),
            no_overlap: Vec::new(),
        };
        for j in 0..n {
            if j == i {
                set.candidates.push(predictions[i].clone());
                continue;
            }
            let o = outcomes.next().expect("one outcome per ordered pair");
            if !o.converged {
                set.unconverged.push(j);
            }
            if o.whole_frame {
                set.no_overlap.push(j);
            }
            set.candidates.push(o.frame);
        }
        sets.push(set);
    }
    Ok(sets)
}

/// Pixelwise mean over the candidates.
pub fn fuse_semantic<T: Scalar>(set: &CandidateSet<T>) -> Result<Frame<T>> {
    mean_frame(&set.candidates)
}

pub(crate) fn mean_frame<T: Scalar>(frames: &[Frame<T>]) -> Result<Frame<T>> {
    let first = frames.first().ok_or(Error::Empty("candidate set"))?;
    let mut acc = vec![0.0f64; first.data().len()];
    for f in frames {
        first.check_dims(f, "fuse_semantic")?;
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v.as_f64();
        }
    }
    let n = frames.len() as f64;
    let (w, h, c) = first.dims();
    Frame::from_vec(w, h, c, acc.into_iter().map(|a| T::lit(a / n)).collect())
}

/// Detail-stage overwrite: the anchor keeps its prediction, every other frame
/// becomes the anchor's candidate at its pose.
pub fn fuse_detail<T: Scalar>(sets: &[CandidateSet<T>], anchor: usize) -> Result<Vec<Frame<T>>> {
    if anchor >= sets.len() {
        return Err(Error::AnchorOutOfRange {
            anchor,
            n_frames: sets.len(),
        });
    }
    sets.iter()
        .map(|s| {
            s.candidates
                .get(anchor)
                .cloned()
                .ok_or(Error::AnchorOutOfRange {
                    anchor,
                    n_frames: s.candidates.len(),
                })
        })
        .collect()
}

/// Same result as `fuse_detail(build_candidates(..), anchor)` while building
/// only the anchor's `N - 1` candidates.
pub fn propagate_anchor<T: Scalar>(
    predictions: &[Frame<T>],
    corr: &Correspondences<T>,
    anchor: usize,
    cfg: &SolverConfig,
    parallel: bool,
) -> Result<Vec<Frame<T>>> {
    check_inputs(predictions, corr)?;
    let n = predictions.len();
    if anchor >= n {
        return Err(Error::AnchorOutOfRange {
            anchor,
            n_frames: n,
        });
    }
    let pairs = (0..n)
        .filter(|&i| i != anchor)
        .map(|i| (anchor, i))
        .collect();
    let mut outcomes = collect_pairs(pairs, parallel, |j, i| {
        one_candidate(predictions, corr, j, i, cfg)
    })?
    .into_iter();
    Ok((0..n)
        .map(|i| {
            if i == anchor {
                predictions[i].clone()
            } else {
                outcomes.next().expect("one outcome per target").frame
            }
        })
        .collect())
}

/// Outcome of one fusion round.
#[derive(Clone, Debug)]
pub struct FusionRound<T: Scalar = f32> {
    pub frames: Vec<Frame<T>>,
    pub stage: Stage,
    /// Anchor used in a detail round.
    pub anchor: Option<usize>,
}

/// Runs the fusion appropriate for `step_index` of `total_steps`.
pub fn fuse_round<T: Scalar>(
    predictions: &[Frame<T>],
    corr: &Correspondences<T>,
    fusion: &FusionConfig,
    solver: &SolverConfig,
    step_index: usize,
    total_steps: usize,
) -> Result<FusionRound<T>> {
    let stage = fusion.stage_for(step_index, total_steps);
    match stage {
        Stage::Semantic => {
            let sets = build_candidates(predictions, corr, solver, fusion.parallel)?;
            let frames = sets.iter().map(fuse_semantic).collect::<Result<_>>()?;
            Ok(FusionRound {
                frames,
                stage,
                anchor: None,
            })
        }
        Stage::Detail => {
            let anchor = select_anchor(fusion, step_index, predictions.len());
            let frames = propagate_anchor(predictions, corr, anchor, solver, fusion.parallel)?;
            Ok(FusionRound {
                frames,
                stage,
                anchor: Some(anchor),
            })
        }
    }
}

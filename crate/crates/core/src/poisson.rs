//! Gradient-domain blending.
//!
//! Inside the region `Ω` the output solves the discrete Poisson equation
//! `Δf = div(∇g)` for a guidance frame `g`, with Dirichlet values taken from a
//! target frame on the pixels bordering `Ω`. Neighbors outside the image are
//! simply absent (reflecting borders). With forward-difference gradients and
//! backward-difference divergence this is the 5-point stencil
//!
//! ```text
//! |N_p| f_p - Σ_{q ∈ N_p ∩ Ω} f_q = Σ_{q ∈ N_p} (g_p - g_q) + Σ_{q ∈ N_p \ Ω} f*_q
//! ```
//!
//! which is symmetric positive definite on every connected component of `Ω`
//! that does not cover the whole image. Each component and channel is solved
//! on its own, in `f64` regardless of the frame scalar.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Frame, OcclusionMask};
use crate::scalar::Scalar;
use crate::warp::WarpResult;

/// Largest system the dense path accepts.
pub const DENSE_MAX_UNKNOWNS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    ConjugateGradient,
    /// Cholesky factorization; small regions only.
    DirectDense,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// `None` picks `10 * sqrt(n) + 1000` for a component of `n` unknowns.
    pub max_iterations: Option<usize>,
    /// Stop once `|b - Ax| / |b|` falls to this value.
    pub residual_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::ConjugateGradient,
            max_iterations: None,
            residual_tolerance: 1e-7,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tolerance > 0.0 && self.residual_tolerance.is_finite()) {
            return Err(Error::config(
                "solver.residual_tolerance",
                format!(
                    "must be a finite value > 0, got {}",
                    self.residual_tolerance
                ),
            ));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::config("solver.max_iterations", "must be >= 1"));
        }
        Ok(())
    }

    fn iteration_cap(&self, unknowns: usize) -> usize {
        self.max_iterations
            .unwrap_or_else(|| 10 * (unknowns as f64).sqrt().ceil() as usize + 1000)
    }
}

/// The region `Ω` to reconstruct; its boundary is implicit (the 4-connected
/// pixels adjacent to `Ω` outside it).
#[derive(Clone, Debug, PartialEq)]
pub struct BlendRegion {
    pub mask: OcclusionMask,
}

impl BlendRegion {
    pub fn new(mask: OcclusionMask) -> Self {
        Self { mask }
    }

    /// 4-connected components of `Ω`, each a list of pixel indices in scan order
    /// of discovery.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let (w, h) = (self.mask.width(), self.mask.height());
        let bits = self.mask.bits();
        let mut seen = vec![false; bits.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..bits.len() {
            if !bits[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            seen[start] = true;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                comp.push(p);
                for q in neighbors(p, w, h).into_iter().flatten() {
                    if bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
            out.push(comp);
        }
        out
    }
}

#[inline]
fn neighbors(p: usize, w: usize, h: usize) -> [Option<usize>; 4] {
    let (x, y) = (p % w, p / w);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
    ]
}

/// Result of a blend, with solver diagnostics.
#[derive(Clone, Debug)]
pub struct BlendOutcome<T: Scalar = f32> {
    pub frame: Frame<T>,
    /// `false` if any solve stopped at its iteration cap above tolerance; the
    /// frame then holds the best iterate.
    pub converged: bool,
    /// `Ω` covered the whole image, so nothing could be solved.
    pub whole_frame: bool,
    /// Worst relative residual over all component/channel solves.
    pub max_relative_residual: f64,
    /// Largest iteration count over all solves (0 for direct solves).
    pub iterations: usize,
}

/// Sparse SPD system for one connected component.
struct ComponentSystem {
    pixels: Vec<usize>,
    diag: Vec<f64>,
    /// Up to four in-region neighbor unknowns per row; `u32::MAX` is empty.
    links: Vec<[u32; 4]>,
}

const NO_LINK: u32 = u32::MAX;

impl ComponentSystem {
    fn new(pixels: Vec<usize>, unknown_of: &mut [u32], w: usize, h: usize) -> Self {
        for (k, &p) in pixels.iter().enumerate() {
            unknown_of[p] = k as u32;
        }
        let mut diag = Vec::with_capacity(pixels.len());
        let mut links = Vec::with_capacity(pixels.len());
        for &p in &pixels {
            let mut deg = 0.0;
            let mut row = [NO_LINK; 4];
            for (slot, q) in neighbors(p, w, h).into_iter().enumerate() {
                if let Some(q) = q {
                    deg += 1.0;
                    row[slot] = unknown_of[q];
                }
            }
            diag.push(deg);
            links.push(row);
        }
        Self {
            pixels,
            diag,
            links,
        }
    }

    fn len(&self) -> usize {
        self.pixels.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (k, row) in self.links.iter().enumerate() {
            let mut s = self.diag[k] * x[k];
            for &q in row {
                if q != NO_LINK {
                    s -= x[q as usize];
                }
            }
            out[k] = s;
        }
    }

    /// Right-hand side for one channel: guidance Laplacian plus Dirichlet
    /// boundary contributions.
    fn rhs<T: Scalar>(
        &self,
        guidance: &Frame<T>,
        target: &Frame<T>,
        in_region: &[bool],
        channel: usize,
    ) -> Vec<f64> {
        let (w, h, ch) = guidance.dims();
        let g = guidance.data();
        let f = target.data();
        self.pixels
            .iter()
            .map(|&p| {
                let gp = g[p * ch + channel].as_f64();
                let mut b = 0.0;
                for q in neighbors(p, w, h).into_iter().flatten() {
                    b += gp - g[q * ch + channel].as_f64();
                    if !in_region[q] {
                        b += f[q * ch + channel].as_f64();
                    }
                }
                b
            })
            .collect()
    }

    fn dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut a = vec![0.0; n * n];
        for (k, row) in self.links.iter().enumerate() {
            a[k * n + k] = self.diag[k];
            for &q in row {
                if q != NO_LINK {
                    a[k * n + q as usize] = -1.0;
                }
            }
        }
        a
    }
}

struct SolveStats {
    iterations: usize,
    relative_residual: f64,
    converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients from the initial guess in `x`.
fn conjugate_gradient(
    sys: &ComponentSystem,
    b: &[f64],
    x: &mut [f64],
    tolerance: f64,
    max_iterations: usize,
) -> SolveStats {
    let n = sys.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return SolveStats {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut ax = vec![0.0; n];
    sys.apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let target = tolerance * b_norm;
    let mut iterations = 0;
    while rr.sqrt() > target && iterations < max_iterations {
        sys.apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_next;
        iterations += 1;
    }
    // Report the true residual, not the recurrence.
    sys.apply(x, &mut ax);
    let true_res = b
        .iter()
        .zip(&ax)
        .map(|(bi, ai)| (bi - ai).powi(2))
        .sum::<f64>()
        .sqrt()
        / b_norm;
    SolveStats {
        iterations,
        relative_residual: true_res,
        converged: true_res <= tolerance,
    }
}

/// In-place Cholesky factorization of a row-major SPD matrix (lower triangle).
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 {
            return Err(Error::Solver(format!(
                "Poisson system not positive definite at row {j}"
            )));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Solves the Poisson blend of `guidance_source` into `dirichlet_target` over
/// `region`. Outside `Ω` the output is a bit-exact copy of `dirichlet_target`.
pub fn poisson_blend<T: Scalar>(
    guidance_source: &Frame<T>,
    dirichlet_target: &Frame<T>,
    region: &BlendRegion,
    cfg: &SolverConfig,
) -> Result<BlendOutcome<T>> {
    cfg.validate()?;
    guidance_source.check_dims(dirichlet_target, "poisson_blend")?;
    let (w, h, ch) = guidance_source.dims();
    region.mask.check_grid(w, h, "poisson_blend region")?;

    let mut out = dirichlet_target.clone();
    let mut outcome = BlendOutcome {
        frame: Frame::new(0, 0, ch),
        converged: true,
        whole_frame: false,
        max_relative_residual: 0.0,
        iterations: 0,
    };
    if region.mask.none() {
        outcome.frame = out;
        return Ok(outcome);
    }
    if region.mask.all() {
        // Pure Neumann problem: defined only up to a constant.
        outcome.frame = guidance_source.clone();
        outcome.whole_frame = true;
        return Ok(outcome);
    }

    let in_region = region.mask.bits();
    let mut unknown_of = vec![NO_LINK; w * h];
    for pixels in region.components() {
        let sys = ComponentSystem::new(pixels, &mut unknown_of, w, h);
        let factor = match cfg.method {
            SolverMethod::DirectDense => {
                if sys.len() > DENSE_MAX_UNKNOWNS {
                    return Err(Error::config(
                        "solver.method",
                        format!(
                            "direct-dense supports at most {DENSE_MAX_UNKNOWNS} unknowns per region, got {}",
                            sys.len()
                        ),
                    ));
                }
                let mut a = sys.dense();
                cholesky(&mut a, sys.len())?;
                Some(a)
            }
            SolverMethod::ConjugateGradient => None,
        };
        for c in 0..ch {
            let b = sys.rhs(guidance_source, dirichlet_target, in_region, c);
            let x = match &factor {
                Some(l) => {
                    let x = cholesky_solve(l, sys.len(), &b);
                    let mut ax = vec![0.0; x.len()];
                    sys.apply(&x, &mut ax);
                    let bn = norm(&b);
                    let res = if bn == 0.0 {
                        0.0
                    } else {
                        b.iter()
                            .zip(&ax)
                            .map(|(p, q)| (p - q).powi(2))
                            .sum::<f64>()
                            .sqrt()
                            / bn
                    };
                    outcome.max_relative_residual = outcome.max_relative_residual.max(res);
                    x
                }
                None => {
                    let mut x: Vec<f64> = sys
                        .pixels
                        .iter()
                        .map(|&p| guidance_source.data()[p * ch + c].as_f64())
                        .collect();
                    let stats = conjugate_gradient(
                        &sys,
                        &b,
                        &mut x,
                        cfg.residual_tolerance,
                        cfg.iteration_cap(sys.len()),
                    );
                    outcome.converged &= stats.converged;
                    outcome.iterations = outcome.iterations.max(stats.iterations);
                    outcome.max_relative_residual =
                        outcome.max_relative_residual.max(stats.relative_residual);
                    x
                }
            };
            let data = out.data_mut();
            for (&p, &v) in sys.pixels.iter().zip(&x) {
                data[p * ch + c] = T::lit(v);
            }
        }
    }
    outcome.frame = out;
    Ok(outcome)
}

/// Candidate frame for target `i` from source `j`: the warped source content
/// is kept wherever the correspondence is valid, and the remaining region
/// (occlusions plus off-image samples) is reconstructed from the current
/// frame's gradients with the warped content as boundary values.
pub fn candidate<T: Scalar>(
    current: &Frame<T>,
    warped: &WarpResult<T>,
    occlusion: &OcclusionMask,
    cfg: &SolverConfig,
) -> Result<BlendOutcome<T>> {
    current.check_dims(&warped.warped, "candidate")?;
    let omega = occlusion.union(&warped.validity)?;
    if omega.all() {
        return Ok(BlendOutcome {
            frame: current.clone(),
            converged: true,
            whole_frame: true,
            max_relative_residual: 0.0,
            iterations: 0,
        });
    }
    poisson_blend(current, &warped.warped, &BlendRegion::new(omega), cfg)
}

/// The naive alternative to blending: `dirichlet_target` outside `Ω`,
/// `inside` pasted verbatim within it.
pub fn copy_paste<T: Scalar>(
    inside: &Frame<T>,
    dirichlet_target: &Frame<T>,
    region: &BlendRegion,
) -> Result<Frame<T>> {
    inside.check_dims(dirichlet_target, "copy_paste")?;
    let ch = inside.channels();
    let mut out = dirichlet_target.clone();
    let bits = region.mask.bits();
    let src = inside.data();
    for (p, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out.data_mut()[p * ch..(p + 1) * ch].copy_from_slice(&src[p * ch..(p + 1) * ch]);
    }
    Ok(out)
}

/// Mean absolute intensity step across `∂Ω`: averaged over every
/// 4-neighbor pair with one pixel inside `Ω` and one outside, and over
/// channels. Zero when `Ω` has no boundary.
pub fn boundary_jump<T: Scalar>(frame: &Frame<T>, region: &BlendRegion) -> f64 {
    let (w, h, ch) = frame.dims();
    let bits = region.mask.bits();
    let data = frame.data();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for p in 0..w * h {
        // Each pair is visited once, from its left/top member.
        let right = (p % w + 1 < w).then(|| p + 1);
        let down = (p / w + 1 < h).then(|| p + w);
        for q in [right, down].into_iter().flatten() {
            if bits[p] != bits[q] {
                for c in 0..ch {
                    sum += (data[p * ch + c].as_f64() - data[q * ch + c].as_f64()).abs();
                }
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / (pairs * ch) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> OcclusionMask {
        OcclusionMask::from_fn(w, h, |x, y| {
            x >= x0 && x < x0 + side && y >= y0 && y < y0 + side
        })
    }

    fn textured(w: usize, h: usize, ch: usize, phase: f64) -> Frame<f64> {
        Frame::from_fn(w, h, ch, |x, y, c| {
            0.5 + 0.3 * ((x as f64 * 0.7 + phase + c as f64).sin() * (y as f64 * 0.45).cos())
        })
    }

    #[test]
    fn empty_region_returns_target_exactly() {
        let g = textured(8, 8, 3, 0.0);
        let f = textured(8, 8, 3, 1.0);
        let out = poisson_blend(
            &g,
            &f,
            &BlendRegion::new(OcclusionMask::new(8, 8)),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(out.frame, f);
        assert!(out.converged);
    }

    #[test]
    fn consistent_inputs_reproduce_the_frame() {
        let g = textured(16, 12, 3, 0.3);
        let region = BlendRegion::new(square_mask(16, 12, 3, 2, 7));
        let out = poisson_blend(&g, &g, &region, &SolverConfig::default()).unwrap();
        assert!(out.frame.max_abs_diff(&g).unwrap() < 1e-6);
    }

    #[test]
    fn flat_membrane_takes_boundary_value() {
        let g = Frame::<f64>::filled(4, 4, 1, 0.1);
        let f = Frame::<f64>::filled(4, 4, 1, 0.8);
        let region = BlendRegion::new(square_mask(4, 4, 1, 1, 2));
        for method in [SolverMethod::ConjugateGradient, SolverMethod::DirectDense] {
            let cfg = SolverConfig {
                method,
                ..Default::default()
            };
            let out = poisson_blend(&g, &f, &region, &cfg).unwrap();
            for y in 1..3 {
                for x in 1..3 {
                    assert!((out.frame.get(x, y, 0) - 0.8).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_offset_lifts_the_region() {
        let current = textured(16, 16, 1, 0.0);
        let warped = current.map(|v| v + 0.1);
        let region = BlendRegion::new(square_mask(16, 16, 5, 5, 6));
        let out = poisson_blend(&current, &warped, &region, &SolverConfig::default()).unwrap();
        for y in 5..11 {
            for x in 5..11 {
                let expect = current.get(x, y, 0) + 0.1;
                assert!((out.frame.get(x, y, 0) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn region_touching_image_border() {
        let g = textured(10, 6, 1, 0.2);
        let f = g.map(|v| v - 0.05);
        let region = BlendRegion::new(OcclusionMask::from_fn(10, 6, |x, _| x < 3));
        let out = poisson_blend(&g, &f, &region, &SolverConfig::default()).unwrap();
        assert!(out.converged);
        assert!(out.frame.max_abs_diff(&f).unwrap() < 1e-6);
    }

    #[test]
    fn whole_frame_region_is_flagged() {
        let g = textured(6, 6, 1, 0.0);
        let f = Frame::filled(6, 6, 1, 0.2);
        let out = poisson_blend(
            &g,
            &f,
            &BlendRegion::new(OcclusionMask::filled(6, 6, true)),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(out.whole_frame);
        assert_eq!(out.frame, g);

        let warped = WarpResult {
            warped: f.clone(),
            validity: OcclusionMask::filled(6, 6, true),
        };
        let c = candidate(
            &g,
            &warped,
            &OcclusionMask::new(6, 6),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(c.whole_frame);
        assert_eq!(c.frame, g);
    }

    #[test]
    fn candidate_passthrough_without_occlusion() {
        let current = textured(8, 8, 3, 0.0);
        let warped = WarpResult {
            warped: textured(8, 8, 3, 2.0),
            validity: OcclusionMask::new(8, 8),
        };
        let c = candidate(
            &current,
            &warped,
            &OcclusionMask::new(8, 8),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(c.frame, warped.warped);
    }

    #[test]
    fn candidate_merges_occlusion_and_validity() {
        let current = textured(12, 12, 1, 0.0);
        let mut validity = OcclusionMask::new(12, 12);
        for y in 0..12 {
            validity.set(11, y, true);
        }
        let warped = WarpResult {
            warped: current.map(|v| v + 0.2),
            validity,
        };
        let occ = square_mask(12, 12, 4, 4, 3);
        let c = candidate(&current, &warped, &occ, &SolverConfig::default()).unwrap();
        assert!(c.frame.max_abs_diff(&warped.warped).unwrap() < 1e-6);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let g = textured(20, 20, 1, 0.0);
        let f = Frame::filled(20, 20, 1, 0.9);
        let region = BlendRegion::new(square_mask(20, 20, 2, 2, 16));
        let cfg = SolverConfig {
            max_iterations: Some(2),
            residual_tolerance: 1e-12,
            ..Default::default()
        };
        let out = poisson_blend(&g, &f, &region, &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
        assert!(out.frame.is_finite());
    }

    #[test]
    fn disconnected_components_are_found() {
        let mut m = square_mask(10, 10, 1, 1, 2);
        m.set(7, 7, true);
        m.set(8, 7, true);
        let comps = BlendRegion::new(m).components();
        assert_eq!(comps.len(), 2);
        assert_eq!(comps.iter().map(Vec::len).sum::<usize>(), 6);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig {
            residual_tolerance: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            max_iterations: Some(0),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Frame::<f32>::new(4, 4, 1);
        let b = Frame::<f32>::new(5, 4, 1);
        assert!(poisson_blend(
            &a,
            &b,
            &BlendRegion::new(OcclusionMask::new(4, 4)),
            &SolverConfig::default()
        )
        .is_err());
    }

    #[test]
    fn copy_paste_leaves_a_seam_that_blending_removes() {
        let current = textured(16, 16, 1, 0.0);
        let warped = current.map(|v| v + 0.2);
        let region = BlendRegion::new(square_mask(16, 16, 4, 4, 8));
        let pasted = copy_paste(&current, &warped, &region).unwrap();
        let blended = poisson_blend(&current, &warped, &region, &SolverConfig::default()).unwrap();
        let seam_paste = boundary_jump(&pasted, &region);
        let seam_blend = boundary_jump(&blended.frame, &region);
        let own = boundary_jump(&current, &region);
        assert!((seam_blend - own).abs() < 1e-6, "{seam_blend} vs {own}");
        assert!(seam_paste > own + 0.1, "{seam_paste} vs {own}");
    }

    fn region_strategy(w: usize, h: usize) -> impl Strategy<Value = OcclusionMask> {
        proptest::collection::vec(proptest::bool::weighted(0.3), w * h)
            .prop_map(move |bits| OcclusionMask::from_vec(w, h, bits).unwrap())
            .prop_filter("needs a boundary", |m| !m.all())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn outside_region_is_bit_identical(
            g in proptest::collection::vec(0.0f64..1.0, 100),
            f in proptest::collection::vec(0.0f64..1.0, 100),
            mask in region_strategy(10, 10),
        ) {
            let g = Frame::from_vec(10, 10, 1, g).unwrap();
            let f = Frame::from_vec(10, 10, 1, f).unwrap();
            let out = poisson_blend(&g, &f, &BlendRegion::new(mask.clone()), &SolverConfig::default()).unwrap();
            for (p, &inside) in mask.bits().iter().enumerate() {
                if !inside {
                    prop_assert_eq!(out.frame.data()[p].to_bits(), f.data()[p].to_bits());
                }
            }
        }

        #[test]
        fn offset_equivariance(
            g in proptest::collection::vec(0.0f64..1.0, 100),
            f in proptest::collection::vec(0.0f64..1.0, 100),
            c in -0.5f64..0.5,
            mask in region_strategy(10, 10),
        ) {
            let g = Frame::from_vec(10, 10, 1, g).unwrap();
            let f = Frame::from_vec(10, 10, 1, f).unwrap();
            let region = BlendRegion::new(mask.clone());
            let cfg = SolverConfig { method: SolverMethod::DirectDense, ..Default::default() };
            let base = poisson_blend(&g, &f, &region, &cfg).unwrap().frame;
            let lifted = poisson_blend(&g, &f.map(|v| v + c), &region, &cfg).unwrap().frame;
            for (p, &inside) in mask.bits().iter().enumerate() {
                if inside {
                    prop_assert!((lifted.data()[p] - base.data()[p] - c).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn no_seam_beyond_the_guidance_own_steps(
            g in proptest::collection::vec(0.0f64..1.0, 144),
            c in -0.5f64..0.5,
            mask in region_strategy(12, 12),
        ) {
            let g = Frame::from_vec(12, 12, 1, g).unwrap();
            let f = g.map(|v| v + c);
            let region = BlendRegion::new(mask);
            let cfg = SolverConfig::default();
            let out = poisson_blend(&g, &f, &region, &cfg).unwrap();
            let seam = boundary_jump(&out.frame, &region);
            prop_assert!(seam <= boundary_jump(&g, &region) + cfg.residual_tolerance);
        }

        #[test]
        fn cg_agrees_with_dense(
            g in proptest::collection::vec(0.0f64..1.0, 144),
            f in proptest::collection::vec(0.0f64..1.0, 144),
            mask in region_strategy(12, 12),
        ) {
            let g = Frame::from_vec(12, 12, 1, g).unwrap();
            let f = Frame::from_vec(12, 12, 1, f).unwrap();
            let region = BlendRegion::new(mask);
            let cg = poisson_blend(&g, &f, &region, &SolverConfig::default()).unwrap();
            let dense = poisson_blend(&g, &f, &region, &SolverConfig { method: SolverMethod::DirectDense, ..Default::default() }).unwrap();
            prop_assert!(cg.converged);
            prop_assert!(cg.frame.max_abs_diff(&dense.frame).unwrap() < 1e-5);
        }
    }
}

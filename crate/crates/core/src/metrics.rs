//! Temporal-consistency metrics and the dense-flow estimator behind them.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Correspondences;
use crate::raster::{FlowField, Frame};
use crate::scalar::Scalar;
use crate::warp::backward_warp;

/// Horn–Schunck settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowEstimatorConfig {
    /// Smoothness weight, in 0..255 intensity units.
    pub smoothness: f64,
    /// Iterations per pyramid level.
    pub iterations: usize,
    pub levels: usize,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        Self {
            smoothness: 15.0,
            iterations: 200,
            levels: 3,
        }
    }
}

impl FlowEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(Error::config(
                "estimator.smoothness",
                "must be finite and > 0",
            ));
        }
        if self.levels == 0 {
            return Err(Error::config("estimator.levels", "must be >= 1"));
        }
        Ok(())
    }
}

/// Single-channel f64 plane.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x0 + 1, y0) * fx;
        let bot = self.at(x0, y0 + 1) * (1.0 - fx) + self.at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// 2x2 box average, rounding odd sizes up.
    fn downsample(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (2 * x as isize, 2 * y as isize);
                v.push(
                    0.25 * (self.at(sx, sy)
                        + self.at(sx + 1, sy)
                        + self.at(sx, sy + 1)
                        + self.at(sx + 1, sy + 1)),
                );
            }
        }
        Plane { w, h, v }
    }
}

fn luma_plane<T: Scalar>(f: &Frame<T>) -> Plane {
    let l = f.luma();
    Plane {
        w: l.width(),
        h: l.height(),
        v: l.data().iter().map(|v| v.as_f64() * 255.0).collect(),
    }
}

/// Refines `(u, v)` on one pyramid level.
fn hs_level(a: &Plane, b: &Plane, u: &mut [f64], v: &mut [f64], alpha2: f64, iterations: usize) {
    let (w, h) = (a.w, a.h);
    let n = w * h;
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    let mut it = vec![0.0; n];
    let bw = Plane {
        w,
        h,
        v: (0..n)
            .map(|p| b.sample((p % w) as f64 + u[p], (p / w) as f64 + v[p]))
            .collect(),
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = y as usize * w + x as usize;
            let gx = |img: &Plane| 0.5 * (img.at(x + 1, y) - img.at(x - 1, y));
            let gy = |img: &Plane| 0.5 * (img.at(x, y + 1) - img.at(x, y - 1));
            ix[p] = 0.5 * (gx(a) + gx(&bw));
            iy[p] = 0.5 * (gy(a) + gy(&bw));
            // Linearized about the incoming flow.
            it[p] = bw.v[p] - a.v[p] - ix[p] * u[p] - iy[p] * v[p];
        }
    }
    let avg = |f: &[f64], x: usize, y: usize| {
        let at = |xx: isize, yy: isize| {
            f[yy.clamp(0, h as isize - 1) as usize * w + xx.clamp(0, w as isize - 1) as usize]
        };
        let (x, y) = (x as isize, y as isize);
        (at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1)) / 6.0
            + (at(x - 1, y - 1) + at(x + 1, y - 1) + at(x - 1, y + 1) + at(x + 1, y + 1)) / 12.0
    };
    let mut nu = vec![0.0; n];
    let mut nv = vec![0.0; n];
    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (ub, vb) = (avg(u, x, y), avg(v, x, y));
                let r =
                    (ix[p] * ub + iy[p] * vb + it[p]) / (alpha2 + ix[p] * ix[p] + iy[p] * iy[p]);
                nu[p] = ub - ix[p] * r;
                nv[p] = vb - iy[p] * r;
            }
        }
        u.copy_from_slice(&nu);
        v.copy_from_slice(&nv);
    }
}

/// Coarse-to-fine Horn–Schunck flow from `a` to `b`: the result lives on
/// `a`'s grid and `b(p + flow(p)) ≈ a(p)`.
pub fn estimate_flow_hs<T: Scalar>(
    a: &Frame<T>,
    b: &Frame<T>,
    cfg: &FlowEstimatorConfig,
) -> Result<FlowField<T>> {
    a.check_dims(b, "flow estimation")?;
    cfg.validate()?;
    let mut pyr_a = vec![luma_plane(a)];
    let mut pyr_b = vec![luma_plane(b)];
    while pyr_a.len() < cfg.levels {
        let last = pyr_a.last().unwrap();
        if last.w < 16 || last.h < 16 {
            break;
        }
        let (da, db) = (last.downsample(), pyr_b.last().unwrap().downsample());
        pyr_a.push(da);
        pyr_b.push(db);
    }
    let alpha2 = cfg.smoothness * cfg.smoothness;
    let top = pyr_a.last().unwrap();
    let mut u = vec![0.0; top.w * top.h];
    let mut v = vec![0.0; top.w * top.h];
    let mut prev_w = top.w;
    for level in (0..pyr_a.len()).rev() {
        let (la, lb) = (&pyr_a[level], &pyr_b[level]);
        if la.w != prev_w || u.len() != la.w * la.h {
            let pu = Plane {
                w: prev_w,
                h: u.len() / prev_w,
                v: u,
            };
            let pv = Plane {
                w: prev_w,
                h: v.len() / prev_w,
                v,
            };
            let sx = pu.w as f64 / la.w as f64;
            let sy = pu.h as f64 / la.h as f64;
            let up = |p: &Plane, scale: f64| -> Vec<f64> {
                (0..la.w * la.h)
                    .map(|k| {
                        let (x, y) = ((k % la.w) as f64, (k / la.w) as f64);
                        p.sample((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5) * scale
                    })
                    .collect()
            };
            u = up(&pu, 1.0 / sx);
            v = up(&pv, 1.0 / sy);
        }
        hs_level(la, lb, &mut u, &mut v, alpha2, cfg.iterations);
        prev_w = la.w;
    }
    Ok(FlowField::from_fn(a.width(), a.height(), |x, y| {
        let p = y * a.width() + x;
        (T::lit(u[p]), T::lit(v[p]))
    }))
}

/// Mean over consecutive pairs and pixels of the squared distance between
/// the original's and the edited video's estimated flows.
pub fn mont_mse<T: Scalar>(
    original: &[Frame<T>],
    edited: &[Frame<T>],
    cfg: &FlowEstimatorConfig,
) -> Result<f64> {
    Ok(mont_mse_pairs(original, edited, cfg)?.iter().sum::<f64>() / (original.len() - 1) as f64)
}

/// Per consecutive pair `(k, k+1)` Mont-MSE contributions.
pub fn mont_mse_pairs<T: Scalar>(
    original: &[Frame<T>],
    edited: &[Frame<T>],
    cfg: &FlowEstimatorConfig,
) -> Result<Vec<f64>> {
    if original.len() != edited.len() {
        return Err(Error::DimensionMismatch {
            context: "mont_mse video length",
            expected: original.len().to_string(),
            found: edited.len().to_string(),
        });
    }
    if original.len() < 2 {
        return Err(Error::config("frames", "mont_mse needs at least 2 frames"));
    }
    for (o, e) in original.iter().zip(edited) {
        original[0].check_dims(o, "mont_mse original")?;
        original[0].check_dims(e, "mont_mse edited")?;
    }
    (0..original.len() - 1)
        .into_par_iter()
        .map(|k| {
            let fo = estimate_flow_hs(&original[k], &original[k + 1], cfg)?;
            let fe = estimate_flow_hs(&edited[k], &edited[k + 1], cfg)?;
            Ok(flow_mse(&fo, &fe))
        })
        .collect()
}

/// Mean squared vector distance between two flows on the same grid.
pub fn flow_mse<T: Scalar>(a: &FlowField<T>, b: &FlowField<T>) -> f64 {
    let n = (a.width() * a.height()).max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
        .sum::<f64>()
        / n
}

/// Agreement of one ordered pair `(source -> target)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairDisagreement {
    pub source: usize,
    pub target: usize,
    /// `None` when no pixel is both visible and in bounds.
    pub mad: Option<f64>,
    pub valid_pixels: usize,
}

/// Mean absolute difference between `frames[source]` warped onto `target`
/// and `frames[target]`, over non-occluded in-bounds pixels.
pub fn pair_disagreement<T: Scalar>(
    frames: &[Frame<T>],
    corr: &Correspondences<T>,
    source: usize,
    target: usize,
) -> Result<PairDisagreement> {
    let flow = corr.flows.get(source, target)?;
    let occ = corr.occlusions.get(source, target)?;
    let tgt = &frames[target];
    let warped = backward_warp(&frames[source], flow)?;
    occ.check_grid(tgt.width(), tgt.height(), "overlap occlusion")?;
    let c = tgt.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..tgt.height() {
        for x in 0..tgt.width() {
            if occ.get(x, y) || warped.validity.get(x, y) {
                continue;
            }
            for ch in 0..c {
                sum += (warped.warped.get(x, y, ch).as_f64() - tgt.get(x, y, ch).as_f64()).abs();
            }
            count += 1;
        }
    }
    Ok(PairDisagreement {
        source,
        target,
        mad: (count > 0).then(|| sum / (count * c) as f64),
        valid_pixels: count,
    })
}

/// Every ordered pair's disagreement, in `(source, target)` row-major order.
pub fn overlap_pairs<T: Scalar>(
    frames: &[Frame<T>],
    corr: &Correspondences<T>,
) -> Result<Vec<PairDisagreement>> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::config(
            "frames",
            "overlap_mad needs at least 2 frames",
        ));
    }
    if corr.n_frames() != n {
        return Err(Error::DimensionMismatch {
            context: "overlap_mad correspondences",
            expected: n.to_string(),
            found: corr.n_frames().to_string(),
        });
    }
    for f in frames {
        frames[0].check_dims(f, "overlap_mad frames")?;
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|j| (0..n).filter(move |&i| i != j).map(move |i| (j, i)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(j, i)| pair_disagreement(frames, corr, j, i))
        .collect()
}

fn mean_defined(pairs: &[PairDisagreement]) -> Result<f64> {
    let vals: Vec<f64> = pairs.iter().filter_map(|p| p.mad).collect();
    if vals.is_empty() {
        return Err(Error::MetricUndefined(
            "every pair is fully occluded".into(),
        ));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean over ordered pairs of the warped-overlap disagreement. Pairs with no
/// visible overlap are left out of the mean.
pub fn overlap_mad<T: Scalar>(frames: &[Frame<T>], corr: &Correspondences<T>) -> Result<f64> {
    mean_defined(&overlap_pairs(frames, corr)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapRow {
    pub a: usize,
    pub b: usize,
    /// Mean of the defined directions, `None` if neither is.
    pub mad: Option<f64>,
    pub valid_pixels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub mont_mse: f64,
    pub overlap_mad: f64,
    /// One entry per consecutive pair `(k, k+1)`.
    pub mont_pairs: Vec<f64>,
    /// One row per unordered pair `a < b`.
    pub overlap_rows: Vec<OverlapRow>,
}

impl ConsistencyReport {
    pub fn compute<T: Scalar>(
        original: &[Frame<T>],
        edited: &[Frame<T>],
        corr: &Correspondences<T>,
        cfg: &FlowEstimatorConfig,
    ) -> Result<Self> {
        let mont_pairs = mont_mse_pairs(original, edited, cfg)?;
        let ordered = overlap_pairs(edited, corr)?;
        let overlap_mad = mean_defined(&ordered)?;
        let n = edited.len();
        let find = |s: usize, t: usize| {
            ordered
                .iter()
                .find(|p| p.source == s && p.target == t)
                .copied()
        };
        let mut overlap_rows = Vec::with_capacity(n * (n - 1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                let (ab, ba) = (find(a, b).unwrap(), find(b, a).unwrap());
                let defined: Vec<f64> = [ab.mad, ba.mad].into_iter().flatten().collect();
                overlap_rows.push(OverlapRow {
                    a,
                    b,
                    mad: (!defined.is_empty())
                        .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                    valid_pixels: ab.valid_pixels + ba.valid_pixels,
                });
            }
        }
        Ok(Self {
            mont_mse: mont_pairs.iter().sum::<f64>() / mont_pairs.len() as f64,
            overlap_mad,
            mont_pairs,
            overlap_rows,
        })
    }

    /// `metric=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mont_mse={}", sig6(self.mont_mse));
        let _ = writeln!(s, "overlap_mad={}", sig6(self.overlap_mad));
        for (k, v) in self.mont_pairs.iter().enumerate() {
            let _ = writeln!(s, "mont_mse.{}_{}={}", k, k + 1, sig6(*v));
        }
        for r in &self.overlap_rows {
            match r.mad {
                Some(v) => {
                    let _ = writeln!(s, "overlap_mad.{}_{}={}", r.a, r.b, sig6(v));
                }
                None => {
                    let _ = writeln!(s, "overlap_mad.{}_{}=nan", r.a, r.b);
                }
            }
        }
        s
    }
}

impl fmt::Display for ConsistencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mont_mse     {:>14}", sig6(self.mont_mse))?;
        writeln!(f, "overlap_mad  {:>14}", sig6(self.overlap_mad))?;
        writeln!(f)?;
        writeln!(f, "{:<10} {:>14}", "pair", "mont_mse")?;
        for (k, v) in self.mont_pairs.iter().enumerate() {
            writeln!(f, "{:<10} {:>14}", format!("{}->{}", k, k + 1), sig6(*v))?;
        }
        writeln!(f)?;
        writeln!(f, "{:<10} {:>14} {:>12}", "pair", "overlap_mad", "pixels")?;
        for r in &self.overlap_rows {
            let mad = r.mad.map(sig6).unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<10} {:>14} {:>12}",
                format!("{}<->{}", r.a, r.b),
                mad,
                r.valid_pixels
            )?;
        }
        Ok(())
    }
}

/// Decimal rendering with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let mag = v.abs().log10().floor() as i32;
    if mag >= 5 {
        let scale = 10f64.powi(mag - 5);
        return format!("{:.0}", (v / scale).round() * scale);
    }
    let decimals = (5 - mag) as usize;
    let s = format!("{:.*}", decimals, v);
    // Rounding can carry into a new leading digit, e.g. 9.999995.
    let t = s.trim_start_matches('-').replace('.', "");
    let digits = t.trim_start_matches('0').len();
    if digits > 6 && decimals > 0 {
        format!("{:.*}", decimals - 1, v)
    } else {
        s
    }
}

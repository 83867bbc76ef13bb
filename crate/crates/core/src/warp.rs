//! Flow-guided backward warping and forward-backward occlusion detection.

use crate::error::Result;
use crate::raster::{in_bounds, sample_bilinear, FlowField, Frame, OcclusionMask};
use crate::scalar::Scalar;

/// Default forward-backward consistency threshold, in pixels.
pub const DEFAULT_OCCLUSION_TOLERANCE_PX: f64 = 1.0;

/// A source frame resampled onto the target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult<T: Scalar = f32> {
    pub warped: Frame<T>,
    /// `true` where the sample point fell outside the source rectangle.
    pub validity: OcclusionMask,
}

/// Resamples `source` onto the flow's grid: `out(p) = source(p + flow(p))`.
///
/// Out-of-image sample points are clamped to the border for the pixel value
/// and flagged in `validity`.
pub fn backward_warp<T: Scalar>(source: &Frame<T>, flow: &FlowField<T>) -> Result<WarpResult<T>> {
    flow.check_grid(source.width(), source.height(), "backward_warp")?;
    let (w, h, ch) = source.dims();
    let mut warped = Frame::new(w, h, ch);
    let mut validity = OcclusionMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            let sx = T::lit(x as f64) + u;
            let sy = T::lit(y as f64) + v;
            if !in_bounds(w, h, sx, sy) {
                validity.set(x, y, true);
            }
            for c in 0..ch {
                warped.set(x, y, c, sample_bilinear(source, sx, sy, c));
            }
        }
    }
    Ok(WarpResult { warped, validity })
}

/// Forward-backward consistency check.
///
/// `flow_fwd` lives on grid A and points into B; `flow_bwd` lives on B and
/// points back into A. Pixel `p` of A is occluded when
/// `|flow_fwd(p) + flow_bwd(p + flow_fwd(p))| > tolerance_px` or when
/// `p + flow_fwd(p)` leaves the image.
pub fn occlusion_mask<T: Scalar>(
    flow_fwd: &FlowField<T>,
    flow_bwd: &FlowField<T>,
    tolerance_px: T,
) -> Result<OcclusionMask> {
    flow_bwd.check_grid(flow_fwd.width(), flow_fwd.height(), "occlusion_mask")?;
    let (w, h) = (flow_fwd.width(), flow_fwd.height());
    let tol2 = tolerance_px * tolerance_px;
    Ok(OcclusionMask::from_fn(w, h, |x, y| {
        let (u, v) = flow_fwd.get(x, y);
        let mx = T::lit(x as f64) + u;
        let my = T::lit(y as f64) + v;
        if !in_bounds(w, h, mx, my) {
            return true;
        }
        let (bu, bv) = flow_bwd.sample(mx, my);
        let (ru, rv) = (u + bu, v + bv);
        ru * ru + rv * rv > tol2
    }))
}

/// [`occlusion_mask`] followed by a square dilation of `dilation_radius`.
pub fn occlusion_mask_dilated<T: Scalar>(
    flow_fwd: &FlowField<T>,
    flow_bwd: &FlowField<T>,
    tolerance_px: T,
    dilation_radius: usize,
) -> Result<OcclusionMask> {
    Ok(occlusion_mask(flow_fwd, flow_bwd, tolerance_px)?.dilate(dilation_radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp4() -> Frame<f64> {
        Frame::from_vec(4, 1, 1, vec![0.0, 0.25, 0.5, 0.75]).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let src = Frame::<f32>::from_fn(5, 4, 3, |x, y, c| (x + 2 * y + c) as f32 / 20.0);
        let r = backward_warp(&src, &FlowField::zeros(5, 4)).unwrap();
        assert_eq!(r.warped, src);
        assert!(r.validity.none());
    }

    #[test]
    fn unit_shift_of_ramp() {
        let r = backward_warp(&ramp4(), &FlowField::uniform(4, 1, 1.0, 0.0)).unwrap();
        // out(x) = src(x + 1); the last column samples past the edge and clamps.
        assert_eq!(r.warped.data(), &[0.25, 0.5, 0.75, 0.75]);
        assert_eq!(r.validity.bits(), &[false, false, false, true]);
    }

    #[test]
    fn off_image_flow_is_fully_invalid() {
        let r = backward_warp(&ramp4(), &FlowField::uniform(4, 1, 10.0, 0.0)).unwrap();
        assert!(r.validity.all());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = backward_warp(&ramp4(), &FlowField::zeros(3, 1)).unwrap_err();
        assert!(err.to_string().contains("backward_warp"));
        assert!(
            occlusion_mask(&FlowField::<f32>::zeros(3, 1), &FlowField::zeros(4, 1), 1.0).is_err()
        );
    }

    #[test]
    fn consistent_zero_flows_have_no_occlusion() {
        let z = FlowField::<f64>::zeros(8, 8);
        assert!(occlusion_mask(&z, &z, 0.5).unwrap().none());
    }

    #[test]
    fn opposite_translations_are_consistent_in_the_interior() {
        let fwd = FlowField::<f64>::uniform(8, 8, 2.0, 0.0);
        let bwd = FlowField::<f64>::uniform(8, 8, -2.0, 0.0);
        let m = occlusion_mask(&fwd, &bwd, 0.5).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                // x + 2 stays inside for x <= 5.
                assert_eq!(m.get(x, y), x > 5, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn inconsistent_flows_are_fully_occluded() {
        let fwd = FlowField::<f64>::uniform(8, 8, 2.0, 0.0);
        let bwd = FlowField::<f64>::zeros(8, 8);
        assert!(occlusion_mask(&fwd, &bwd, 0.5).unwrap().all());
    }

    #[test]
    fn dilation_grows_occlusion() {
        let fwd = FlowField::<f64>::uniform(8, 8, 2.0, 0.0);
        let bwd = FlowField::<f64>::uniform(8, 8, -2.0, 0.0);
        let plain = occlusion_mask(&fwd, &bwd, 0.5).unwrap();
        let grown = occlusion_mask_dilated(&fwd, &bwd, 0.5, 1).unwrap();
        assert_eq!(plain.count(), 16);
        assert_eq!(grown.count(), 24);
    }

    proptest! {
        #[test]
        fn warping_constant_yields_constant_where_valid(
            c in 0.0f64..1.0,
            us in proptest::collection::vec(-3.0f64..3.0, 2 * 36),
        ) {
            let src = Frame::filled(6, 6, 1, c);
            let flow = FlowField::from_vec(6, 6, us).unwrap();
            let r = backward_warp(&src, &flow).unwrap();
            for y in 0..6 {
                for x in 0..6 {
                    if !r.validity.get(x, y) {
                        prop_assert!((r.warped.get(x, y, 0) - c).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn translation_pairs_are_symmetric(
            u in -4.0f64..4.0, v in -4.0f64..4.0, tol in 0.0f64..2.0,
        ) {
            let a = FlowField::<f64>::uniform(9, 7, u, v);
            let b = FlowField::<f64>::uniform(9, 7, -u, -v);
            let ab = occlusion_mask(&a, &b, tol).unwrap();
            let ba = occlusion_mask(&b, &a, tol).unwrap();
            // Mirror images of each other: the off-image strips swap sides.
            prop_assert_eq!(ab.count(), ba.count());
            let mirrored = OcclusionMask::from_fn(9, 7, |x, y| ba.get(8 - x, 6 - y));
            prop_assert_eq!(ab, mirrored);
        }

        #[test]
        fn larger_tolerance_never_adds_occlusion(
            us in proptest::collection::vec(-2.0f64..2.0, 2 * 25),
            vs in proptest::collection::vec(-2.0f64..2.0, 2 * 25),
            t0 in 0.0f64..2.0,
            dt in 0.0f64..2.0,
        ) {
            let fwd = FlowField::from_vec(5, 5, us).unwrap();
            let bwd = FlowField::from_vec(5, 5, vs).unwrap();
            let tight = occlusion_mask(&fwd, &bwd, t0).unwrap();
            let loose = occlusion_mask(&fwd, &bwd, t0 + dt).unwrap();
            for (l, t) in loose.bits().iter().zip(tight.bits()) {
                prop_assert!(!l || *t);
            }
        }
    }
}

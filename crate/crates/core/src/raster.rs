//! Raster and flow containers plus the sampling and difference operators the
//! rest of the engine is built on.
//!
//! Frames are stored row-major with channels interleaved: the value of channel
//! `c` at pixel `(x, y)` lives at `(y * width + x) * channels + c`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An `H x W x C` raster of intensities, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T: Scalar = f32> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                context: "frame data",
                expected: format!("{} values", width * height * channels),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a frame by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Channel values of the pixel at `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Frame<T>) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_dims(&self, other: &Frame<T>, context: &'static str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected: fmt_dims(self.dims()),
                found: fmt_dims(other.dims()),
            })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Frame<T> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Frame<T>, f: impl Fn(T, T) -> T) -> Result<Frame<T>> {
        self.check_dims(other, "zip_map")?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    fn with_data(&self, data: Vec<T>) -> Frame<T> {
        debug_assert_eq!(data.len(), self.data.len());
        Frame {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    pub fn clamp(&self, lo: T, hi: T) -> Frame<T> {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Frame<T>) -> Result<T> {
        self.check_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sum: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        T::lit(sum / self.data.len() as f64)
    }

    /// Converts the scalar type, e.g. `Frame<f64>` to `Frame<f32>`.
    pub fn cast<U: Scalar>(&self) -> Frame<U> {
        Frame {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Single-channel luma (Rec. 601 weights) of a 3-channel frame; other
    /// channel counts are averaged.
    pub fn luma(&self) -> Frame<T> {
        if self.channels == 1 {
            return self.clone();
        }
        let weights: Vec<T> = if self.channels == 3 {
            [0.299, 0.587, 0.114].iter().map(|&w| T::lit(w)).collect()
        } else {
            vec![T::one() / T::lit(self.channels as f64); self.channels]
        };
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().zip(&weights).map(|(&v, &w)| v * w).sum())
            .collect();
        Frame {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Single channel `c` extracted as a 1-channel frame.
    pub fn channel(&self, c: usize) -> Frame<T> {
        Frame {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .copied()
                .collect(),
        }
    }

    /// Bilinear sample of channel `c` at a real-valued position. Coordinates
    /// outside the pixel-center rectangle clamp to the border pixel.
    pub fn sample_bilinear(&self, x: T, y: T, c: usize) -> T {
        sample_bilinear(self, x, y, c)
    }
}

pub(crate) fn fmt_dims((w, h, c): (usize, usize, usize)) -> String {
    format!("{w}x{h}x{c}")
}

/// Splits a coordinate into a clamped lattice cell and its fractional weight.
#[inline]
fn cell<T: Scalar>(p: T, len: usize) -> (usize, usize, T) {
    let max = T::lit((len - 1) as f64);
    let p = p.max(T::zero()).min(max);
    let p0 = p.floor();
    let i0 = p0.to_usize().unwrap_or(0);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - p0)
}

/// Bilinear interpolation of one channel with clamp-to-edge borders.
pub fn sample_bilinear<T: Scalar>(frame: &Frame<T>, x: T, y: T, c: usize) -> T {
    let (x0, x1, fx) = cell(x, frame.width);
    let (y0, y1, fy) = cell(y, frame.height);
    let one = T::one();
    let top = frame.get(x0, y0, c) * (one - fx) + frame.get(x1, y0, c) * fx;
    let bottom = frame.get(x0, y1, c) * (one - fx) + frame.get(x1, y1, c) * fx;
    top * (one - fy) + bottom * fy
}

/// Forward differences `f(x+1,y) - f(x,y)` and `f(x,y+1) - f(x,y)`, zero on
/// the last column (for `gx`) and last row (for `gy`).
pub fn gradient<T: Scalar>(frame: &Frame<T>) -> (Frame<T>, Frame<T>) {
    let (w, h, ch) = frame.dims();
    let mut gx = Frame::new(w, h, ch);
    let mut gy = Frame::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = frame.get(x, y, c);
                if x + 1 < w {
                    gx.set(x, y, c, frame.get(x + 1, y, c) - v);
                }
                if y + 1 < h {
                    gy.set(x, y, c, frame.get(x, y + 1, c) - v);
                }
            }
        }
    }
    (gx, gy)
}

/// Divergence of a vector field by backward differences, the adjoint
/// partner of [`gradient`]: `div(gradient(f))` is the 5-point Laplacian with
/// reflecting borders.
pub fn divergence<T: Scalar>(gx: &Frame<T>, gy: &Frame<T>) -> Result<Frame<T>> {
    gx.check_dims(gy, "divergence")?;
    let (w, h, ch) = gx.dims();
    Ok(Frame::from_fn(w, h, ch, |x, y, c| {
        let mut d = gx.get(x, y, c) + gy.get(x, y, c);
        if x > 0 {
            d -= gx.get(x - 1, y, c);
        }
        if y > 0 {
            d -= gy.get(x, y - 1, c);
        }
        d
    }))
}

/// Separable box blur of side `2 * radius + 1` with clamp-to-edge borders.
pub fn box_blur<T: Scalar>(frame: &Frame<T>, radius: usize) -> Frame<T> {
    let (w, h, ch) = frame.dims();
    let norm = T::lit((2 * radius + 1) as f64);
    let clampi = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let r = radius as isize;
    let horiz = Frame::from_fn(w, h, ch, |x, y, c| {
        let s: T = (-r..=r)
            .map(|d| frame.get(clampi(x as isize + d, w), y, c))
            .sum();
        s / norm
    });
    Frame::from_fn(w, h, ch, |x, y, c| {
        let s: T = (-r..=r)
            .map(|d| horiz.get(x, clampi(y as isize + d, h), c))
            .sum();
        s / norm
    })
}

/// A dense displacement field in pixels.
///
/// Entry `(x, y)` of a field relating source frame `j` to target frame `i`
/// lives on the target grid and points at the corresponding position in the
/// source: target pixel `p` shows source content at `p + flow(p)`. This is
/// exactly the field [`crate::warp::backward_warp`] consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T: Scalar = f32> {
    width: usize,
    height: usize,
    /// Interleaved `(u, v)` pairs, row-major.
    data: Vec<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::uniform(width, height, T::zero(), T::zero())
    }

    pub fn uniform(width: usize, height: usize, u: T, v: T) -> Self {
        Self::from_fn(width, height, |_, _| (u, v))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let mut data = Vec::with_capacity(width * height * 2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                data.push(u);
                data.push(v);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * 2 {
            return Err(Error::DimensionMismatch {
                context: "flow data",
                expected: format!("{} values", width * height * 2),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (T, T) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: T, v: T) {
        let i = 2 * (y * self.width + x);
        self.data[i] = u;
        self.data[i + 1] = v;
    }

    /// Bilinear sample of both components with clamp-to-edge borders.
    pub fn sample(&self, x: T, y: T) -> (T, T) {
        let (x0, x1, fx) = cell(x, self.width);
        let (y0, y1, fy) = cell(y, self.height);
        let one = T::one();
        let lerp2 =
            |a: (T, T), b: (T, T), t: T| (a.0 * (one - t) + b.0 * t, a.1 * (one - t) + b.1 * t);
        let top = lerp2(self.get(x0, y0), self.get(x1, y0), fx);
        let bottom = lerp2(self.get(x0, y1), self.get(x1, y1), fx);
        lerp2(top, bottom, fy)
    }

    /// True when `(x + u, y + v)` lies inside the pixel-center rectangle.
    #[inline]
    pub fn maps_inside(&self, x: usize, y: usize) -> bool {
        let (u, v) = self.get(x, y);
        in_bounds(
            self.width,
            self.height,
            T::lit(x as f64) + u,
            T::lit(y as f64) + v,
        )
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_grid(
        &self,
        width: usize,
        height: usize,
        context: &'static str,
    ) -> Result<()> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected: format!("{width}x{height}"),
                found: format!("{}x{}", self.width, self.height),
            })
        }
    }
}

#[inline]
pub(crate) fn in_bounds<T: Scalar>(width: usize, height: usize, x: T, y: T) -> bool {
    x >= T::zero()
        && y >= T::zero()
        && x <= T::lit((width - 1) as f64)
        && y <= T::lit((height - 1) as f64)
}

/// Per-pixel flags; `true` marks a pixel without a reliable correspondence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn from_vec(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "mask data",
                expected: format!("{} bits", width * height),
                found: format!("{} bits", bits.len()),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn none(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn all(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn union(&self, other: &OcclusionMask) -> Result<OcclusionMask> {
        self.check_grid(other.width, other.height, "mask union")?;
        Ok(OcclusionMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    /// Grows every set pixel to its `(2r+1) x (2r+1)` neighborhood.
    pub fn dilate(&self, radius: usize) -> OcclusionMask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        OcclusionMask::from_fn(w, h, |x, y| {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| self.get(xx, yy)))
        })
    }

    pub(crate) fn check_grid(
        &self,
        width: usize,
        height: usize,
        context: &'static str,
    ) -> Result<()> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected: format!("{width}x{height}"),
                found: format!("{}x{}", self.width, self.height),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Frame<f64> {
        Frame::from_fn(w, h, 1, |x, _, _| x as f64 / w as f64)
    }

    #[test]
    fn lattice_points_are_exact() {
        let f = Frame::<f64>::from_fn(5, 5, 2, |x, y, c| (x * 7 + y * 3 + c) as f64 / 40.0);
        assert_eq!(f.sample_bilinear(2.0, 3.0, 1), f.get(2, 3, 1));
    }

    #[test]
    fn constant_frame_samples_constant() {
        let f = Frame::<f32>::filled(4, 3, 3, 0.5);
        for &(x, y) in &[(0.3, 1.7), (-4.0, 10.0), (2.5, 0.5)] {
            assert_eq!(f.sample_bilinear(x, y, 2), 0.5);
        }
    }

    #[test]
    fn midpoint_of_two_pixels() {
        let f = Frame::<f64>::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(f.sample_bilinear(0.5, 0.0, 0), 0.5);
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let f = Frame::<f64>::from_vec(2, 1, 1, vec![0.25, 1.0]).unwrap();
        assert_eq!(f.sample_bilinear(-3.0, 0.0, 0), 0.25);
        assert_eq!(f.sample_bilinear(9.0, 5.0, 0), 1.0);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let f = Frame::<f32>::filled(6, 4, 3, 0.7);
        let (gx, gy) = gradient(&f);
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_ramp() {
        let w = 8;
        let (gx, gy) = gradient(&ramp(w, 3));
        for y in 0..3 {
            for x in 0..w {
                let expect = if x + 1 < w { 1.0 / w as f64 } else { 0.0 };
                assert!((gx.get(x, y, 0) - expect).abs() < 1e-12);
                assert_eq!(gy.get(x, y, 0), 0.0);
            }
        }
    }

    #[test]
    fn gradient_of_single_pixel() {
        let (gx, gy) = gradient(&Frame::<f64>::filled(1, 1, 1, 0.3));
        assert_eq!((gx.get(0, 0, 0), gy.get(0, 0, 0)), (0.0, 0.0));
    }

    #[test]
    fn divergence_of_gradient_is_five_point_laplacian() {
        let f = Frame::<f64>::from_fn(5, 4, 1, |x, y, _| ((x * x + 3 * y) % 7) as f64 / 7.0);
        let (gx, gy) = gradient(&f);
        let lap = divergence(&gx, &gy).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                let mut expect = 0.0;
                let v = f.get(x, y, 0);
                if x > 0 {
                    expect += f.get(x - 1, y, 0) - v;
                }
                if x < 4 {
                    expect += f.get(x + 1, y, 0) - v;
                }
                if y > 0 {
                    expect += f.get(x, y - 1, 0) - v;
                }
                if y < 3 {
                    expect += f.get(x, y + 1, 0) - v;
                }
                assert!((lap.get(x, y, 0) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn box_blur_preserves_constants() {
        let f = Frame::<f64>::filled(7, 5, 1, 0.4);
        let b = box_blur(&f, 2);
        assert!(b.max_abs_diff(&f).unwrap() < 1e-12);
    }

    #[test]
    fn mask_dilation() {
        let mut m = OcclusionMask::new(5, 5);
        m.set(2, 2, true);
        assert_eq!(m.dilate(1).count(), 9);
        assert_eq!(m.dilate(0), m);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Frame::<f32>::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(FlowField::<f32>::from_vec(2, 2, vec![0.0; 7]).is_err());
    }

    proptest! {
        #[test]
        fn gradient_is_affine_equivariant(
            vals in proptest::collection::vec(0.0f64..1.0, 30),
            a in -3.0f64..3.0,
            b in -1.0f64..1.0,
        ) {
            let f = Frame::from_vec(6, 5, 1, vals).unwrap();
            let g = f.map(|v| a * v + b);
            let (fx, fy) = gradient(&f);
            let (gx, gy) = gradient(&g);
            prop_assert!(gx.max_abs_diff(&fx.map(|v| a * v)).unwrap() < 1e-12);
            prop_assert!(gy.max_abs_diff(&fy.map(|v| a * v)).unwrap() < 1e-12);
        }

        #[test]
        fn bilinear_is_linear_between_lattice_points(
            vals in proptest::collection::vec(0.0f64..1.0, 12),
            x in 0usize..3,
            y in 0usize..3,
            t in 0.0f64..1.0,
        ) {
            let f = Frame::from_vec(4, 3, 1, vals).unwrap();
            let xf = x as f64;
            let yf = y as f64;
            let s = f.sample_bilinear(xf + t, yf, 0);
            let expect = (1.0 - t) * f.get(x, y, 0) + t * f.get(x + 1, y, 0);
            prop_assert!((s - expect).abs() < 1e-12);
        }
    }
}

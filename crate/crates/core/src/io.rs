//! Frame, mask, flow and raw-tensor files.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::raster::{in_bounds, FlowField, Frame, OcclusionMask};
use crate::scalar::Scalar;

/// Middlebury `.flo` magic, stored as a little-endian f32.
pub const FLO_MAGIC: f32 = 202021.25;
/// Flow components above this magnitude mark unknown vectors.
pub const FLO_UNKNOWN: f32 = 1e9;
pub const RAW_MAGIC: [u8; 4] = *b"SMFF";

/// Loads an 8-bit PNG or binary PPM/PGM. Grayscale files give one channel,
/// everything else is converted to RGB. Values are scaled to `[0, 1]`.
pub fn load_frame<T: Scalar>(path: &Path) -> Result<Frame<T>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::file(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::file(path, e))?
        .decode()
        .map_err(|e| Error::file(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = if img.color().has_color() {
        (3, img.into_rgb8().into_raw())
    } else {
        (1, img.into_luma8().into_raw())
    };
    Frame::from_vec(
        w,
        h,
        channels,
        bytes.iter().map(|&b| T::lit(b as f64 / 255.0)).collect(),
    )
}

/// Loads every frame and rejects the first whose size differs from frame 0.
pub fn load_frames<T: Scalar>(paths: &[impl AsRef<Path>]) -> Result<Vec<Frame<T>>> {
    let mut frames: Vec<Frame<T>> = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let f = load_frame(p)?;
        if let Some(first) = frames.first() {
            if !first.same_dims(&f) {
                return Err(Error::file(
                    p,
                    format!(
                        "size {}x{}x{} differs from the first frame's {}x{}x{}",
                        f.width(),
                        f.height(),
                        f.channels(),
                        first.width(),
                        first.height(),
                        first.channels()
                    ),
                ));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantizes to 8 bits and writes a PNG (1 or 3 channels).
pub fn save_frame<T: Scalar>(frame: &Frame<T>, path: &Path) -> Result<()> {
    let (w, h, c) = frame.dims();
    let bytes: Vec<u8> = frame.data().iter().map(|&v| to_u8(v)).collect();
    let img = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer"),
        ),
        3 => DynamicImage::ImageRgb8(
            RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer"),
        ),
        _ => {
            return Err(Error::file(
                path,
                format!("cannot encode a {c}-channel frame as PNG"),
            ))
        }
    };
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::file(path, e))
}

/// Mask PNG: 255 where set.
pub fn save_mask(mask: &OcclusionMask, path: &Path) -> Result<()> {
    let bytes = mask
        .bits()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("sized buffer")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::file(path, e))
}

/// Any nonzero sample marks the pixel.
pub fn load_mask(path: &Path) -> Result<OcclusionMask> {
    let f: Frame<f64> = load_frame(path)?;
    let c = f.channels();
    Ok(OcclusionMask::from_fn(f.width(), f.height(), |x, y| {
        (0..c).any(|ch| f.get(x, y, ch) > 0.0)
    }))
}

/// Parses `.flo` bytes. Unknown vectors become zero flow and are set in the
/// returned mask.
pub fn parse_flo<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(FlowField<T>, OcclusionMask)> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 12 {
        return Err(err(
            bytes.len(),
            format!("header needs 12 bytes, file has {}", bytes.len()),
        ));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(err(0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(err(4, format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!(
                "expected {expected} bytes for a {w}x{h} field, found {}",
                bytes.len()
            ),
        ));
    }
    let mut unknown = OcclusionMask::new(w, h);
    let mut data = Vec::with_capacity(w * h * 2);
    for (k, pair) in bytes[12..].chunks_exact(8).enumerate() {
        let u = f32::from_le_bytes(pair[0..4].try_into().unwrap());
        let v = f32::from_le_bytes(pair[4..8].try_into().unwrap());
        if !(u.abs() <= FLO_UNKNOWN && v.abs() <= FLO_UNKNOWN) {
            unknown.set(k % w, k / w, true);
            data.extend([T::zero(), T::zero()]);
        } else {
            data.extend([T::lit(u as f64), T::lit(v as f64)]);
        }
    }
    Ok((FlowField::from_vec(w, h, data)?, unknown))
}

pub fn load_flow<T: Scalar>(path: &Path) -> Result<(FlowField<T>, OcclusionMask)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_flo(&bytes, path)
}

pub fn encode_flo<T: Scalar>(flow: &FlowField<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    out
}

pub fn save_flow<T: Scalar>(flow: &FlowField<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_flo(flow)).map_err(|e| Error::file(path, e))
}

/// Chains `flow_ab` (on A, into B) with `flow_bc` (on B, into C) into a flow
/// on A pointing into C. Pixels whose intermediate point leaves B are set in
/// the returned mask.
pub fn compose_flows<T: Scalar>(
    flow_ab: &FlowField<T>,
    flow_bc: &FlowField<T>,
) -> Result<(FlowField<T>, OcclusionMask)> {
    flow_bc.check_grid(flow_ab.width(), flow_ab.height(), "compose_flows")?;
    let (w, h) = (flow_ab.width(), flow_ab.height());
    let mut off = OcclusionMask::new(w, h);
    let flow = FlowField::from_fn(w, h, |x, y| {
        let (u, v) = flow_ab.get(x, y);
        let (sx, sy) = (T::lit(x as f64) + u, T::lit(y as f64) + v);
        if !in_bounds(w, h, sx, sy) {
            off.set(x, y, true);
        }
        let (u2, v2) = flow_bc.sample(sx, sy);
        (u + u2, v + v2)
    });
    Ok((flow, off))
}

/// Lossless float dump: `"SMFF" | width u32 | height u32 | channels u32 |`
/// little-endian f32 samples.
pub fn encode_raw<T: Scalar>(frame: &Frame<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + frame.data().len() * 4);
    out.extend_from_slice(&RAW_MAGIC);
    for d in [frame.width(), frame.height(), frame.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in frame.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    out
}

pub fn parse_raw<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Frame<T>> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 16 {
        return Err(err(
            bytes.len(),
            format!("header needs 16 bytes, file has {}", bytes.len()),
        ));
    }
    if bytes[0..4] != RAW_MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let dim =
        |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let expected = 16 + w * h * c * 4;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!(
                "expected {expected} bytes for {w}x{h}x{c}, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    Frame::from_vec(w, h, c, data)
}

pub fn save_raw<T: Scalar>(frame: &Frame<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(frame)).map_err(|e| Error::file(path, e))
}

pub fn load_raw<T: Scalar>(path: &Path) -> Result<Frame<T>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_raw(&bytes, path)
}

/// Loads a `.f32` raw dump or an image, by extension.
pub fn load_any<T: Scalar>(path: &Path) -> Result<Frame<T>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => load_raw(path),
        _ => load_frame(path),
    }
}

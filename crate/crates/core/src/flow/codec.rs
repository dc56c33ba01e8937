use crate::error::{Error, Result};
use crate::flow::{FlowField, Mask, RgbImage};

/// Pre-quantization colour: hue in degrees `[0, 360)`, saturation and value
/// in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hsv {
    pub h: f32,
    pub s: f32,
    pub v: f32,
}

/// Direction to hue, normalized magnitude to saturation and value.
///
/// The magnitude is normalized by `sigma * sqrt(H^2 + W^2)` and clamped to 1.
pub fn flow_to_hsv(flow: &FlowField, sigma: f32) -> Result<Vec<Hsv>> {
    if !(sigma > 0.0) {
        return Err(Error::usage(format!("sigma must be positive, got {sigma}")));
    }
    if !flow.is_finite() {
        return Err(Error::NonFinite("flow_to_rgb input".into()));
    }
    let diag = ((flow.height * flow.height + flow.width * flow.width) as f64).sqrt();
    let scale = sigma as f64 * diag;
    Ok(flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| {
            let (u, v) = (u as f64, v as f64);
            let mut h = v.atan2(u).to_degrees();
            if h < 0.0 {
                h += 360.0;
            }
            if h >= 360.0 {
                h -= 360.0;
            }
            let m = (u * u + v * v).sqrt();
            let m_norm = (m / scale).min(1.0);
            Hsv {
                h: h as f32,
                s: m_norm as f32,
                v: m_norm as f32,
            }
        })
        .collect())
}

fn quantize(x: f64) -> u8 {
    // round half up
    (x * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Sector-based HSV to RGB conversion with round-half-up quantization.
pub fn hsv_to_rgb(c: Hsv) -> [u8; 3] {
    let (h, s, v) = (c.h as f64, c.s as f64, c.v as f64);
    let chroma = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = chroma * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    [quantize(r + m), quantize(g + m), quantize(b + m)]
}

/// RGB-formatted flow for use as an image-like supervision signal.
pub fn flow_to_rgb(flow: &FlowField, sigma: f32) -> Result<RgbImage> {
    let hsv = flow_to_hsv(flow, sigma)?;
    let mut data = Vec::with_capacity(hsv.len() * 3);
    for c in hsv {
        data.extend_from_slice(&hsv_to_rgb(c));
    }
    RgbImage::from_raw(flow.width, flow.height, data)
}

/// Keeps flow colours inside the mask and blacks out everything else.
pub fn mask_flow(flow_rgb: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    if flow_rgb.width != mask.width || flow_rgb.height != mask.height {
        return Err(Error::usage(format!(
            "mask {}x{} does not match flow image {}x{}",
            mask.width, mask.height, flow_rgb.width, flow_rgb.height
        )));
    }
    let mut out = flow_rgb.clone();
    for (px, &m) in out.data.chunks_exact_mut(3).zip(&mask.data) {
        if m == 0 {
            px.fill(0);
        }
    }
    Ok(out)
}

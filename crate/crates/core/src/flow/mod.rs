//! Optical flow fields, the flow-to-RGB codec, object-centric masking,
//! Horn–Schunck estimation, forward warping and Middlebury `.flo` files.

mod codec;
mod flo;
mod horn_schunck;
mod warp;

pub use codec::{flow_to_hsv, flow_to_rgb, hsv_to_rgb, mask_flow, Hsv};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use horn_schunck::{estimate_flow_hs, estimate_flow_hs_traced, luma, smooth_pattern};
pub use warp::{warp, warp_layered};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel `(u, v)` displacement, row-major. `u` is horizontal (positive
/// right), `v` vertical (positive down).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Interleaved `u0, v0, u1, v1, ...`.
    pub fn interleaved(&self) -> Vec<f32> {
        self.u.iter().zip(&self.v).flat_map(|(&u, &v)| [u, v]).collect()
    }

    pub fn from_interleaved(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        if data.len() != 2 * width * height {
            return Err(Error::usage(format!(
                "{} values for a {width}x{height} flow field",
                data.len()
            )));
        }
        let (u, v) = data.chunks_exact(2).map(|c| (c[0], c[1])).unzip();
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    /// Mean Euclidean distance between corresponding vectors.
    pub fn mean_endpoint_error(&self, other: &FlowField) -> f32 {
        let n = self.len().max(1);
        let s: f64 = (0..self.len())
            .map(|i| {
                let du = (self.u[i] - other.u[i]) as f64;
                let dv = (self.v[i] - other.v[i]) as f64;
                (du * du + dv * dv).sqrt()
            })
            .sum();
        (s / n as f64) as f32
    }
}

/// `height x width x 3` byte image, row-major, RGB interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::usage(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn same_dims(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Binary `height x width` map; 1 marks agent pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m != 0).count()
    }
}

/// Where training flow pseudo-labels come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FlowSource {
    Oracle,
    HornSchunck { alpha: f32, iterations: usize },
    OracleNoisy { noise_std: f32 },
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::Oracle
    }
}

/// Default Horn–Schunck smoothness weight and iteration count.
pub const HS_ALPHA: f32 = 1.0;
pub const HS_ITERATIONS: usize = 200;

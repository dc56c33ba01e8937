use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::PATCH;
use crate::error::{Error, Result};
use crate::math::Tensor;

pub const DIMS_PER_PATCH: usize = 16;

/// Frozen patch encoder: every `PATCH x PATCH` RGB patch (scaled to
/// `[0, 1]`) is projected by one fixed matrix with orthonormal rows, and the
/// per-patch codes are concatenated in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub width: usize,
    pub height: usize,
    /// `DIMS_PER_PATCH x (PATCH * PATCH * 3)`, row-major.
    pub projection: Tensor,
}

impl Encoder {
    pub fn new(width: usize, height: usize, seed: u64) -> Result<Self> {
        if width % PATCH != 0 || height % PATCH != 0 || width == 0 || height == 0 {
            return Err(Error::usage(format!(
                "{width}x{height} is not divisible into {PATCH}x{PATCH} patches"
            )));
        }
        Ok(Self {
            width,
            height,
            projection: orthonormal_rows(DIMS_PER_PATCH, PATCH * PATCH * 3, seed),
        })
    }

    pub fn from_projection(width: usize, height: usize, projection: Tensor) -> Result<Self> {
        if projection.shape() != [DIMS_PER_PATCH, PATCH * PATCH * 3] {
            return Err(Error::usage(format!("bad projection shape {:?}", projection.shape())));
        }
        let mut e = Self::new(width, height, 0)?;
        e.projection = projection;
        Ok(e)
    }

    pub fn n_patches(&self) -> usize {
        (self.width / PATCH) * (self.height / PATCH)
    }

    pub fn state_dim(&self) -> usize {
        self.n_patches() * DIMS_PER_PATCH
    }

    /// Encodes one `height x width x 3` byte image into `out`.
    pub fn encode_into(&self, image: &[u8], out: &mut [f32]) -> Result<()> {
        if image.len() != self.width * self.height * 3 || out.len() != self.state_dim() {
            return Err(Error::usage(format!(
                "encoder expects a {}x{} RGB image ({} bytes), got {} bytes",
                self.width,
                self.height,
                self.width * self.height * 3,
                image.len()
            )));
        }
        let p = self.projection.data();
        let plen = PATCH * PATCH * 3;
        let mut patch = vec![0.0f32; plen];
        let tiles_x = self.width / PATCH;
        for ty in 0..self.height / PATCH {
            for tx in 0..tiles_x {
                for dy in 0..PATCH {
                    let row = ((ty * PATCH + dy) * self.width + tx * PATCH) * 3;
                    for (k, &b) in image[row..row + PATCH * 3].iter().enumerate() {
                        patch[dy * PATCH * 3 + k] = b as f32 / 255.0;
                    }
                }
                let o = (ty * tiles_x + tx) * DIMS_PER_PATCH;
                for (r, slot) in out[o..o + DIMS_PER_PATCH].iter_mut().enumerate() {
                    let w = &p[r * plen..(r + 1) * plen];
                    *slot = w.iter().zip(&patch).map(|(a, b)| a * b).sum();
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, image: &[u8]) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.state_dim()];
        self.encode_into(image, &mut out)?;
        Ok(out)
    }
}

/// Gaussian rows orthonormalized by modified Gram-Schmidt in f64.
pub fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    assert!(rows <= cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for i in 0..rows {
        for j in 0..i {
            let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            let prev = m[j].clone();
            for (a, b) in m[i].iter_mut().zip(&prev) {
                *a -= d * b;
            }
        }
        let n = m[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        m[i].iter_mut().for_each(|a| *a /= n);
    }
    let data = m.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

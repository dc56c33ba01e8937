use crate::flow::{FlowField, RgbImage};

/// Forward warp: every source pixel moves by its rounded flow vector.
/// Targets outside the frame are dropped; when several pixels land on the
/// same target the last one in raster order wins. Untouched targets keep the
/// source colour.
pub fn warp(image: &RgbImage, flow: &FlowField) -> RgbImage {
    splat(image, flow, None)
}

/// Forward warp where collisions go to the pixel with the highest `depth`
/// (draw order); equal depths fall back to last-writer.
pub fn warp_layered(image: &RgbImage, flow: &FlowField, depth: &[u8]) -> RgbImage {
    splat(image, flow, Some(depth))
}

fn splat(image: &RgbImage, flow: &FlowField, depth: Option<&[u8]>) -> RgbImage {
    let (w, h) = (image.width, image.height);
    let mut out = image.clone();
    let mut owner: Vec<Option<u8>> = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let tx = x as f32 + flow.u[i];
            let ty = y as f32 + flow.v[i];
            let (tx, ty) = (tx.round(), ty.round());
            if tx < 0.0 || ty < 0.0 || tx >= w as f32 || ty >= h as f32 {
                continue;
            }
            let t = ty as usize * w + tx as usize;
            let d = depth.map_or(0, |d| d[i]);
            if matches!(owner[t], Some(prev) if prev > d) {
                continue;
            }
            owner[t] = Some(d);
            out.put(tx as usize, ty as usize, image.get(x, y));
        }
    }
    out
}

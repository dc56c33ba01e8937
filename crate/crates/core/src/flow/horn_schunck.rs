use crate::error::{Error, Result};
use crate::flow::{FlowField, RgbImage};

/// Rec. 601 luma, `0.299 R + 0.587 G + 0.114 B`, in the 0..255 range.
pub fn luma(img: &RgbImage) -> Vec<f32> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
        .collect()
}

/// Dense Horn–Schunck flow from `img1` to `img2`.
pub fn estimate_flow_hs(
    img1: &RgbImage,
    img2: &RgbImage,
    alpha: f32,
    iterations: usize,
) -> Result<FlowField> {
    estimate_flow_hs_traced(img1, img2, alpha, iterations).map(|(f, _)| f)
}

/// Like [`estimate_flow_hs`], also returning the mean update magnitude
/// `|du| + |dv|` of every iteration.
pub fn estimate_flow_hs_traced(
    img1: &RgbImage,
    img2: &RgbImage,
    alpha: f32,
    iterations: usize,
) -> Result<(FlowField, Vec<f32>)> {
    if !img1.same_dims(img2) {
        return Err(Error::usage(format!(
            "image sizes differ: {}x{} vs {}x{}",
            img1.width, img1.height, img2.width, img2.height
        )));
    }
    let (w, h) = (img1.width, img1.height);
    if w < 2 || h < 2 {
        return Err(Error::usage(format!(
            "Horn-Schunck needs at least 2x2 pixels, got {w}x{h}"
        )));
    }
    if !(alpha > 0.0) || iterations == 0 {
        return Err(Error::usage("alpha must be positive and iterations >= 1"));
    }
    let e1 = luma(img1);
    let e2 = luma(img2);
    let at = |e: &[f32], x: usize, y: usize| e[y * w + x];

    // derivatives from the 2x2x2 cube anchored at (x, y); the last row and
    // column reuse the cube before them so every stencil stays inside
    let n = w * h;
    let mut ex = vec![0.0f32; n];
    let mut ey = vec![0.0f32; n];
    let mut et = vec![0.0f32; n];
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            let (x, y) = (px.min(w - 2), py.min(h - 2));
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut st = 0.0;
            for e in [&e1, &e2] {
                sx += at(e, x + 1, y) - at(e, x, y) + at(e, x + 1, y + 1) - at(e, x, y + 1);
                sy += at(e, x, y + 1) - at(e, x, y) + at(e, x + 1, y + 1) - at(e, x + 1, y);
            }
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                st += at(&e2, x + dx, y + dy) - at(&e1, x + dx, y + dy);
            }
            ex[i] = sx / 4.0;
            ey[i] = sy / 4.0;
            et[i] = st / 4.0;
        }
    }

    let a2 = alpha * alpha;
    let mut u = vec![0.0f32; n];
    let mut v = vec![0.0f32; n];
    let mut ubar = vec![0.0f32; n];
    let mut vbar = vec![0.0f32; n];
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        neighbourhood_average(&u, w, h, &mut ubar);
        neighbourhood_average(&v, w, h, &mut vbar);
        let mut delta = 0.0f64;
        for i in 0..n {
            let t = (ex[i] * ubar[i] + ey[i] * vbar[i] + et[i])
                / (a2 + ex[i] * ex[i] + ey[i] * ey[i]);
            let nu = ubar[i] - ex[i] * t;
            let nv = vbar[i] - ey[i] * t;
            delta += ((nu - u[i]).abs() + (nv - v[i]).abs()) as f64;
            u[i] = nu;
            v[i] = nv;
        }
        trace.push((delta / n as f64) as f32);
    }
    let flow = FlowField {
        width: w,
        height: h,
        u,
        v,
    };
    if !flow.is_finite() {
        return Err(Error::NonFinite("Horn-Schunck".into()));
    }
    Ok((flow, trace))
}

/// Weighted 3x3 average: 1/6 for edge neighbours, 1/12 for corners,
/// borders replicated.
fn neighbourhood_average(f: &[f32], w: usize, h: usize, out: &mut [f32]) {
    let idx = |x: isize, y: isize| -> usize {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        y * w + x
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let edge = f[idx(x - 1, y)] + f[idx(x + 1, y)] + f[idx(x, y - 1)] + f[idx(x, y + 1)];
            let corner = f[idx(x - 1, y - 1)]
                + f[idx(x + 1, y - 1)]
                + f[idx(x - 1, y + 1)]
                + f[idx(x + 1, y + 1)];
            out[y as usize * w + x as usize] = edge / 6.0 + corner / 12.0;
        }
    }
}

/// Smooth periodic grey pattern from a few low-frequency sinusoids with
/// seeded phases, translated by `(dx, dy)` with wraparound.
pub fn smooth_pattern(w: usize, h: usize, seed: u64, dx: f32, dy: f32) -> RgbImage {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // fixed non-parallel wave vectors; only amplitudes and phases are random
    let waves = [(1.0, 2.0), (2.0, 1.0), (2.0, -1.0)].map(|(fx, fy)| {
        let amp = rng.random_range(30.0..50.0f32);
        (fx, fy, amp, rng.random_range(0.0..std::f32::consts::TAU))
    });
    let tau = std::f32::consts::TAU;
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f32 - dx, y as f32 - dy);
            let g: f32 = waves
                .iter()
                .map(|&(fx, fy, amp, p)| amp * (tau * (fx * xf / w as f32 + fy * yf / h as f32) + p).sin())
                .sum();
            let c = (127.5 + g).round().clamp(0.0, 255.0) as u8;
            img.put(x, y, [c, c, c]);
        }
    }
    img
}

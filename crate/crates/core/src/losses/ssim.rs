//! Structural similarity with an 11x11 Gaussian window (sigma 1.5),
//! reflect-padded borders and constants `C1 = 0.01^2`, `C2 = 0.03^2`.
//!
//! Pixels whose window sees only zeros in both images have SSIM exactly 1,
//! so the map is only evaluated on the bounding box of the joint support
//! dilated by the window radius. The result is identical to a full-image
//! evaluation.

const RADIUS: usize = 5;
const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub(crate) fn window() -> [f64; 2 * RADIUS + 1] {
    let mut w = [0.0; 2 * RADIUS + 1];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

#[derive(Clone, Copy, Debug)]
struct Region {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    /// Rows feeding the vertical pass.
    e0: usize,
    e1: usize,
}

impl Region {
    fn cols(&self) -> usize {
        self.c1 - self.c0
    }

    fn len(&self) -> usize {
        (self.r1 - self.r0) * self.cols()
    }
}

fn support_region(x: &[f64], y: &[f64], h: usize, w: usize) -> Option<Region> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if x[i] != 0.0 || y[i] != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r + 1);
                c0 = c0.min(c);
                c1 = c1.max(c + 1);
            }
        }
    }
    if r0 == usize::MAX {
        return None;
    }
    let r0 = r0.saturating_sub(RADIUS);
    let r1 = (r1 + RADIUS).min(h);
    Some(Region {
        r0,
        r1,
        c0: c0.saturating_sub(RADIUS),
        c1: (c1 + RADIUS).min(w),
        e0: r0.saturating_sub(RADIUS),
        e1: (r1 + RADIUS).min(h),
    })
}

/// Separable blur restricted to the output pixels of `reg`.
fn blur(img: &[f64], h: usize, w: usize, reg: &Region, win: &[f64]) -> Vec<f64> {
    let cw = reg.cols();
    let mut tmp = vec![0.0; (reg.e1 - reg.e0) * cw];
    for row in reg.e0..reg.e1 {
        let src = &img[row * w..(row + 1) * w];
        let dst = &mut tmp[(row - reg.e0) * cw..(row - reg.e0 + 1) * cw];
        for (jj, out) in dst.iter_mut().enumerate() {
            let j = (reg.c0 + jj) as isize;
            let mut acc = 0.0;
            for (b, wb) in win.iter().enumerate() {
                acc += wb * src[reflect(j + b as isize - RADIUS as isize, w)];
            }
            *out = acc;
        }
    }
    let mut out = vec![0.0; reg.len()];
    for i in reg.r0..reg.r1 {
        let dst = &mut out[(i - reg.r0) * cw..(i - reg.r0 + 1) * cw];
        for (a, wa) in win.iter().enumerate() {
            let src_row = reflect(i as isize + a as isize - RADIUS as isize, h);
            let src = &tmp[(src_row - reg.e0) * cw..(src_row - reg.e0 + 1) * cw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wa * s;
            }
        }
    }
    out
}

/// Adjoint of [`blur`]: scatters region-shaped gradients back onto the full
/// image.
fn blur_adjoint(g: &[f64], h: usize, w: usize, reg: &Region, win: &[f64], out: &mut [f64]) {
    let cw = reg.cols();
    let mut tmp = vec![0.0; (reg.e1 - reg.e0) * cw];
    for i in reg.r0..reg.r1 {
        let src = &g[(i - reg.r0) * cw..(i - reg.r0 + 1) * cw];
        for (a, wa) in win.iter().enumerate() {
            let dst_row = reflect(i as isize + a as isize - RADIUS as isize, h);
            let dst = &mut tmp[(dst_row - reg.e0) * cw..(dst_row - reg.e0 + 1) * cw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wa * s;
            }
        }
    }
    for row in reg.e0..reg.e1 {
        let src = &tmp[(row - reg.e0) * cw..(row - reg.e0 + 1) * cw];
        let dst = &mut out[row * w..(row + 1) * w];
        for (jj, s) in src.iter().enumerate() {
            let j = (reg.c0 + jj) as isize;
            for (b, wb) in win.iter().enumerate() {
                dst[reflect(j + b as isize - RADIUS as isize, w)] += wb * s;
            }
        }
    }
}

struct Moments {
    reg: Region,
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], h: usize, w: usize) -> Option<Moments> {
    let reg = support_region(x, y, h, w)?;
    let win = window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    Some(Moments {
        mx: blur(x, h, w, &reg, &win),
        my: blur(y, h, w, &reg, &win),
        exx: blur(&xx, h, w, &reg, &win),
        eyy: blur(&yy, h, w, &reg, &win),
        exy: blur(&xy, h, w, &reg, &win),
        reg,
    })
}

/// Mean SSIM over the whole image.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    if x == y {
        return 1.0;
    }
    let total = (h * w) as f64;
    let Some(m) = moments(x, y, h, w) else {
        return 1.0;
    };
    let mut acc = 0.0;
    for k in 0..m.reg.len() {
        let (mx, my) = (m.mx[k], m.my[k]);
        let sxx = m.exx[k] - mx * mx;
        let syy = m.eyy[k] - my * my;
        let sxy = m.exy[k] - mx * my;
        acc +=
            (2.0 * mx * my + C1) * (2.0 * sxy + C2) / ((mx * mx + my * my + C1) * (sxx + syy + C2));
    }
    (acc + (total - m.reg.len() as f64)) / total
}

/// Mean SSIM and its gradient with respect to `x`. Identical images sit at
/// the maximum and get an exactly zero gradient.
pub fn ssim_with_grad(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, Vec<f64>) {
    let total = (h * w) as f64;
    let mut grad = vec![0.0; h * w];
    if x == y {
        return (1.0, grad);
    }
    let Some(m) = moments(x, y, h, w) else {
        return (1.0, grad);
    };
    let n = m.reg.len();
    let mut d_mx = vec![0.0; n];
    let mut d_exx = vec![0.0; n];
    let mut d_exy = vec![0.0; n];
    let mut acc = 0.0;
    for k in 0..n {
        let (mx, my) = (m.mx[k], m.my[k]);
        let sxx = m.exx[k] - mx * mx;
        let syy = m.eyy[k] - my * my;
        let sxy = m.exy[k] - mx * my;
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * sxy + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = sxx + syy + C2;
        let s = a1 * a2 / (b1 * b2);
        acc += s;
        let ds_dmx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
        let ds_dsxx = -s / b2;
        let ds_dsxy = 2.0 * a1 / (b1 * b2);
        d_mx[k] = (ds_dmx - 2.0 * mx * ds_dsxx - my * ds_dsxy) / total;
        d_exx[k] = ds_dsxx / total;
        d_exy[k] = ds_dsxy / total;
    }
    let win = window();
    let mut g_exx = vec![0.0; h * w];
    let mut g_exy = vec![0.0; h * w];
    blur_adjoint(&d_mx, h, w, &m.reg, &win, &mut grad);
    blur_adjoint(&d_exx, h, w, &m.reg, &win, &mut g_exx);
    blur_adjoint(&d_exy, h, w, &m.reg, &win, &mut g_exy);
    for k in 0..h * w {
        grad[k] += 2.0 * x[k] * g_exx[k] + y[k] * g_exy[k];
    }
    ((acc + (total - n as f64)) / total, grad)
}

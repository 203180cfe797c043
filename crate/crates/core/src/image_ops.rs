//! Differentiable image primitives on `[H, W, C]` tensors.
//!
//! Coordinates follow one convention everywhere: `x` grows to the right,
//! `y` grows downwards, the origin is the top-left pixel and pixel centres sit
//! on integer coordinates.

use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, Var};
use crate::tensor::Tensor;

/// Slack allowed past the outermost pixel centre before a sample is
/// considered out of bounds.
pub const BOUNDS_TOLERANCE: f64 = 1e-6;

fn as_hwc(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::invalid(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// Bilinear stencil for one sample: base indices, fractional offsets and
/// whether each coordinate axis is live (not clamped to the border).
#[derive(Clone, Copy)]
struct Stencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    live_x: f64,
    live_y: f64,
    inside: bool,
}

/// Border-padded stencil: coordinates outside the image are clamped to the
/// outermost pixel centres. `None` only for non-finite coordinates.
fn stencil(x: f64, y: f64, w: usize, h: usize) -> Option<Stencil> {
    if !(x.is_finite() && y.is_finite()) {
        return None;
    }
    let inside = |v: f64, n: usize| v >= -BOUNDS_TOLERANCE && v <= (n - 1) as f64 + BOUNDS_TOLERANCE;
    let axis = |v: f64, n: usize| {
        let live = if v >= 0.0 && v <= (n - 1) as f64 { 1.0 } else { 0.0 };
        let v = v.clamp(0.0, (n - 1) as f64);
        // The upper sample shares the lower cell so all four taps stay inside.
        let i0 = (v.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, v - i0 as f64, live)
    };
    let (x0, x1, fx, live_x) = axis(x, w);
    let (y0, y1, fy, live_y) = axis(y, h);
    Some(Stencil {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        live_x,
        live_y,
        inside: inside(x, w) && inside(y, h),
    })
}

/// Bilinear sample of a plain `[H, W, C]` tensor at `(x, y)`; `None` when
/// out of bounds.
pub(crate) fn sample_value(img: &Tensor, x: f64, y: f64) -> Option<Vec<f64>> {
    let (h, w, c) = img.hwc().ok()?;
    let s = stencil(x, y, w, h).filter(|s| s.inside)?;
    let d = img.data();
    Some(
        (0..c)
            .map(|ch| {
                let at = |yy: usize, xx: usize| d[(yy * w + xx) * c + ch];
                (1.0 - s.fx) * (1.0 - s.fy) * at(s.y0, s.x0)
                    + s.fx * (1.0 - s.fy) * at(s.y0, s.x1)
                    + (1.0 - s.fx) * s.fy * at(s.y1, s.x0)
                    + s.fx * s.fy * at(s.y1, s.x1)
            })
            .collect(),
    )
}

impl<'t> Var<'t> {
    /// Samples `self` (`[H, W, C]`) at pixel coordinates `coords`
    /// (`[H', W', 2]`, channel 0 = x, channel 1 = y).
    ///
    /// Returns the sampled image and a `[H', W']` mask that is 1 where the
    /// sample lies inside the image and 0 elsewhere. Outside samples repeat
    /// the nearest border value, so they do not drag neighbouring window
    /// statistics towards 0; their coordinate gradient is 0 along clamped
    /// axes. Non-finite coordinates read 0. Differentiable with respect to
    /// both the image and the coordinates.
    pub fn bilinear_sample(self, coords: Var<'t>) -> Result<(Var<'t>, Tensor)> {
        let img = self.value();
        let cv = coords.value();
        let (h, w, c) = as_hwc(&img, "bilinear_sample")?;
        let (ho, wo, two) = as_hwc(&cv, "bilinear_sample")?;
        if two != 2 {
            return Err(Error::shape("bilinear_sample", img.shape(), cv.shape()));
        }
        let n = ho * wo;
        let stencils: Vec<Option<Stencil>> = (0..n)
            .map(|p| stencil(cv.data()[2 * p], cv.data()[2 * p + 1], w, h))
            .collect();
        let id = img.data();
        let mut out = vec![0.0; n * c];
        let mut mask = vec![0.0; n];
        for (p, s) in stencils.iter().enumerate() {
            let Some(s) = s else { continue };
            mask[p] = if s.inside { 1.0 } else { 0.0 };
            let (w00, w10) = ((1.0 - s.fx) * (1.0 - s.fy), s.fx * (1.0 - s.fy));
            let (w01, w11) = ((1.0 - s.fx) * s.fy, s.fx * s.fy);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| id[(yy * w + xx) * c + ch];
                out[p * c + ch] = w00 * at(s.y0, s.x0)
                    + w10 * at(s.y0, s.x1)
                    + w01 * at(s.y1, s.x0)
                    + w11 * at(s.y1, s.x1);
            }
        }
        let value = Tensor::new(&[ho, wo, c], out)?;
        let mask = Tensor::new(&[ho, wo], mask)?;
        let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
            let id = ctx.inputs[0].data();
            let g = ctx.grad.data();
            let mut gi = ctx.needs[0].then(|| vec![0.0; h * w * c]);
            let mut gc = ctx.needs[1].then(|| vec![0.0; n * 2]);
            for (p, s) in stencils.iter().enumerate() {
                let Some(s) = s else { continue };
                let (w00, w10) = ((1.0 - s.fx) * (1.0 - s.fy), s.fx * (1.0 - s.fy));
                let (w01, w11) = ((1.0 - s.fx) * s.fy, s.fx * s.fy);
                let i00 = (s.y0 * w + s.x0) * c;
                let i10 = (s.y0 * w + s.x1) * c;
                let i01 = (s.y1 * w + s.x0) * c;
                let i11 = (s.y1 * w + s.x1) * c;
                for ch in 0..c {
                    let go = g[p * c + ch];
                    if let Some(gi) = gi.as_mut() {
                        gi[i00 + ch] += w00 * go;
                        gi[i10 + ch] += w10 * go;
                        gi[i01 + ch] += w01 * go;
                        gi[i11 + ch] += w11 * go;
                    }
                    if let Some(gc) = gc.as_mut() {
                        let (v00, v10, v01, v11) =
                            (id[i00 + ch], id[i10 + ch], id[i01 + ch], id[i11 + ch]);
                        gc[2 * p] += s.live_x * go * ((1.0 - s.fy) * (v10 - v00) + s.fy * (v11 - v01));
                        gc[2 * p + 1] += s.live_y * go * ((1.0 - s.fx) * (v01 - v00) + s.fx * (v11 - v10));
                    }
                }
            }
            vec![
                gi.map(|d| Tensor::new(&[h, w, c], d).expect("shape")),
                gc.map(|d| Tensor::new(&[ho, wo, 2], d).expect("shape")),
            ]
        });
        Ok((self.tape().push(value, &[self, coords], backward), mask))
    }

    /// Forward differences along x and y. The last column of `dx` and the
    /// last row of `dy` are zero so both keep the input shape.
    pub fn spatial_gradient(self) -> Result<(Var<'t>, Var<'t>)> {
        let img = self.value();
        let (h, w, c) = as_hwc(&img, "spatial_gradient")?;
        if h < 2 || w < 2 {
            return Err(Error::invalid(
                "spatial_gradient",
                format!("image must be at least 2x2, got {h}x{w}"),
            ));
        }
        let d = img.data();
        let mut dx = vec![0.0; h * w * c];
        let mut dy = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    if x + 1 < w {
                        dx[i] = d[i + c] - d[i];
                    }
                    if y + 1 < h {
                        dy[i] = d[i + w * c] - d[i];
                    }
                }
            }
        }
        let shape = [h, w, c];
        let make = |data: Vec<f64>, horizontal: bool| {
            let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad.data();
                let mut gi = vec![0.0; h * w * c];
                let step = if horizontal { c } else { w * c };
                for y in 0..h {
                    for x in 0..w {
                        let valid = if horizontal { x + 1 < w } else { y + 1 < h };
                        if !valid {
                            continue;
                        }
                        for ch in 0..c {
                            let i = (y * w + x) * c + ch;
                            gi[i + step] += g[i];
                            gi[i] -= g[i];
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, gi).expect("shape"))]
            });
            self.tape()
                .push(Tensor::new(&shape, data).expect("shape"), &[self], backward)
        };
        Ok((make(dx, true), make(dy, false)))
    }

    /// 3×3 box filter with replicate padding.
    pub fn avg_pool3x3(self) -> Result<Var<'t>> {
        let img = self.value();
        let (h, w, c) = as_hwc(&img, "avg_pool3x3")?;
        if h < 3 || w < 3 {
            return Err(Error::invalid(
                "avg_pool3x3",
                format!("image {h}x{w} is smaller than the 3x3 window"),
            ));
        }
        let d = img.data();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut s = 0.0;
                    for yy in neighbours(y, h) {
                        for xx in neighbours(x, w) {
                            s += d[(yy * w + xx) * c + ch];
                        }
                    }
                    out[(y * w + x) * c + ch] = s / 9.0;
                }
            }
        }
        let shape = [h, w, c];
        let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
            let g = ctx.grad.data();
            let mut gi = vec![0.0; h * w * c];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let go = g[(y * w + x) * c + ch] / 9.0;
                        for yy in neighbours(y, h) {
                            for xx in neighbours(x, w) {
                                gi[(yy * w + xx) * c + ch] += go;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gi).expect("shape"))]
        });
        Ok(self
            .tape()
            .push(Tensor::new(&shape, out)?, &[self], backward))
    }
}

/// Row/column indices of a 3-tap window around `i` with replicate padding.
fn neighbours(i: usize, n: usize) -> [usize; 3] {
    [i.saturating_sub(1), i, (i + 1).min(n - 1)]
}

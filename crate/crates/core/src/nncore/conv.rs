//! 3x3 convolutions (stride 1 or 2, zero padding 1) and exact 2x bilinear
//! upsampling on channel-major images, with hand-written backward passes.

use super::{ParamSource, ParamTensor};
use rand_chacha::ChaCha8Rng;

/// Channel-major image tensor: index (c, y, x) -> ((c * h) + y) * w + x.
#[derive(Clone, Debug, PartialEq)]
pub struct Img {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Img {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Img { c, h, w, data: vec![0.0; c * h * w] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn row(&self, c: usize, y: usize) -> &[f64] {
        let base = (c * self.h + y) * self.w;
        &self.data[base..base + self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, y: usize) -> &mut [f64] {
        let base = (c * self.h + y) * self.w;
        &mut self.data[base..base + self.w]
    }
}

/// 3x3 conv layer; output spatial size is ceil(in/stride).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamTensor, // shape [out, in, 3, 3]
    pub b: ParamTensor,
    pub stride: usize,
    cache_x: Option<Img>,
}

impl Conv2d {
    pub fn new(name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(stride == 1 || stride == 2);
        Conv2d {
            w: ParamTensor::he_uniform(format!("{name}.w"), &[out_c, in_c, 3, 3], in_c * 9, 1.0, rng),
            b: ParamTensor::zeros(format!("{name}.b"), &[out_c]),
            stride,
            cache_x: None,
        }
    }

    pub fn in_c(&self) -> usize {
        self.w.shape[1]
    }

    pub fn out_c(&self) -> usize {
        self.w.shape[0]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + self.stride - 1) / self.stride, (w + self.stride - 1) / self.stride)
    }

    pub fn forward(&mut self, x: &Img, keep: bool) -> Img {
        assert_eq!(x.c, self.in_c());
        let (oh, ow) = self.out_size(x.h, x.w);
        let mut y = Img::zeros(self.out_c(), oh, ow);
        for oc in 0..self.out_c() {
            let bias = self.b.value[oc];
            for yy in 0..oh {
                y.row_mut(oc, yy).iter_mut().for_each(|v| *v = bias);
            }
            for ic in 0..x.c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w.value[((oc * x.c + ic) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        self.accumulate_tap(x, &mut y, oc, ic, ky, kx, wv);
                    }
                }
            }
        }
        self.cache_x = if keep { Some(x.clone()) } else { None };
        y
    }

    /// One (ky, kx) kernel tap added over all valid output positions.
    fn accumulate_tap(&self, x: &Img, y: &mut Img, oc: usize, ic: usize, ky: usize, kx: usize, wv: f64) {
        let (oh, ow) = (y.h, y.w);
        let s = self.stride;
        for oy in 0..oh {
            let iy = (oy * s + ky) as isize - 1;
            if iy < 0 || iy >= x.h as isize {
                continue;
            }
            let xr = x.row(ic, iy as usize);
            let yr = y.row_mut(oc, oy);
            if s == 1 {
                // ix = ox + kx - 1 must stay within [0, w)
                let (ox0, ox1) = tap_range(ow, x.w, kx);
                let off = kx as isize - 1;
                for ox in ox0..ox1 {
                    yr[ox] += wv * xr[(ox as isize + off) as usize];
                }
            } else {
                for ox in 0..ow {
                    let ix = (ox * s + kx) as isize - 1;
                    if ix >= 0 && ix < x.w as isize {
                        yr[ox] += wv * xr[ix as usize];
                    }
                }
            }
        }
    }

    /// Accumulates dW/db and returns dX.
    pub fn backward(&mut self, dy: &Img) -> Img {
        let x = self.cache_x.as_ref().expect("forward(keep=true) before backward").clone();
        let (oh, ow) = self.out_size(x.h, x.w);
        assert_eq!((dy.c, dy.h, dy.w), (self.out_c(), oh, ow));
        let s = self.stride;
        let mut dx = Img::zeros(x.c, x.h, x.w);
        for oc in 0..self.out_c() {
            let mut db = 0.0;
            for oy in 0..oh {
                db += dy.row(oc, oy).iter().sum::<f64>();
            }
            self.b.grad[oc] += db;
            for ic in 0..x.c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((oc * x.c + ic) * 3 + ky) * 3 + kx;
                        let wv = self.w.value[widx];
                        let mut dw = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - 1;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let xr = x.row(ic, iy as usize);
                            let dxr = dx.row_mut(ic, iy as usize);
                            let dyr = dy.row(oc, oy);
                            if s == 1 {
                                let (ox0, ox1) = tap_range(ow, x.w, kx);
                                let off = kx as isize - 1;
                                for ox in ox0..ox1 {
                                    let ix = (ox as isize + off) as usize;
                                    dw += dyr[ox] * xr[ix];
                                    dxr[ix] += dyr[ox] * wv;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * s + kx) as isize - 1;
                                    if ix >= 0 && ix < x.w as isize {
                                        dw += dyr[ox] * xr[ix as usize];
                                        dxr[ix as usize] += dyr[ox] * wv;
                                    }
                                }
                            }
                        }
                        self.w.grad[widx] += dw;
                    }
                }
            }
        }
        dx
    }
}

/// Valid output-x range for stride 1 so that ix = ox + kx - 1 is in bounds.
fn tap_range(ow: usize, iw: usize, kx: usize) -> (usize, usize) {
    let off = kx as isize - 1;
    let ox0 = (-off).max(0) as usize;
    let ox1 = ((iw as isize - off).min(ow as isize)).max(0) as usize;
    (ox0, ox1)
}

impl ParamSource for Conv2d {
    fn visit(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Exact 2x bilinear upsampling (half-pixel centers, clamped borders).
#[derive(Clone, Debug, Default)]
pub struct Upsample2x {
    in_shape: (usize, usize, usize),
}

impl Upsample2x {
    pub fn new() -> Self {
        Upsample2x::default()
    }

    pub fn forward(&mut self, x: &Img) -> Img {
        self.in_shape = (x.c, x.h, x.w);
        let mut y = Img::zeros(x.c, x.h * 2, x.w * 2);
        for c in 0..x.c {
            for oy in 0..y.h {
                let (y0, y1, wy) = split_coord(oy, x.h);
                for ox in 0..y.w {
                    let (x0, x1, wx) = split_coord(ox, x.w);
                    let v = x.at(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                        + x.at(c, y0, x1) * (1.0 - wy) * wx
                        + x.at(c, y1, x0) * wy * (1.0 - wx)
                        + x.at(c, y1, x1) * wy * wx;
                    *y.at_mut(c, oy, ox) = v;
                }
            }
        }
        y
    }

    pub fn backward(&self, dy: &Img) -> Img {
        let (c, h, w) = self.in_shape;
        assert_eq!((dy.c, dy.h, dy.w), (c, h * 2, w * 2));
        let mut dx = Img::zeros(c, h, w);
        for ch in 0..c {
            for oy in 0..dy.h {
                let (y0, y1, wy) = split_coord(oy, h);
                for ox in 0..dy.w {
                    let (x0, x1, wx) = split_coord(ox, w);
                    let g = dy.at(ch, oy, ox);
                    *dx.at_mut(ch, y0, x0) += g * (1.0 - wy) * (1.0 - wx);
                    *dx.at_mut(ch, y0, x1) += g * (1.0 - wy) * wx;
                    *dx.at_mut(ch, y1, x0) += g * wy * (1.0 - wx);
                    *dx.at_mut(ch, y1, x1) += g * wy * wx;
                }
            }
        }
        dx
    }
}

/// Source interpolation pair for output index `o` at scale 2:
/// f = (o + 0.5)/2 - 0.5, clamped to the input range.
fn split_coord(o: usize, in_len: usize) -> (usize, usize, f64) {
    let f = (o as f64 + 0.5) / 2.0 - 0.5;
    if f <= 0.0 {
        return (0, 0, 0.0);
    }
    let i0 = f.floor() as usize;
    if i0 + 1 >= in_len {
        return (in_len - 1, in_len - 1, 0.0);
    }
    (i0, i0 + 1, f - i0 as f64)
}

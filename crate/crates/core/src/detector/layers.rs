//! Dense CHW feature maps and the handful of layers the detector needs, each
//! with an explicit backward pass.

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }
}

/// Valid output range along one axis for kernel offset `k` (0..3) under
/// "same" padding of 1: output `o` reads input `o + k - 1`.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n - 1 } else { n };
    (lo, hi)
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `[out][in][3][3]`.
pub fn conv3x3_forward(input: &FeatureMap, weight: &[f64], bias: &[f64], out_c: usize) -> FeatureMap {
    let (h, w) = (input.h, input.w);
    let mut out = FeatureMap::zeros(out_c, h, w);
    for o in 0..out_c {
        let plane = out.plane_mut(o);
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..input.c {
            let src = input.plane(i);
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let wv = weight[((o * input.c + i) * 3 + ky) * 3 + kx];
                    let (x0, x1) = valid_range(kx, w);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a 3x3 conv. Accumulates into `grad_w`/`grad_b`; returns the
/// input gradient only when `need_input` is set.
pub fn conv3x3_backward(
    input: &FeatureMap,
    weight: &[f64],
    grad_out: &FeatureMap,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input: bool,
) -> Option<FeatureMap> {
    let (h, w) = (input.h, input.w);
    let out_c = grad_out.c;
    let mut grad_in = need_input.then(|| FeatureMap::zeros(input.c, h, w));
    for o in 0..out_c {
        let go = grad_out.plane(o);
        grad_b[o] += go.iter().sum::<f64>();
        for i in 0..input.c {
            let src = input.plane(i);
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let widx = ((o * input.c + i) * 3 + ky) * 3 + kx;
                    let (x0, x1) = valid_range(kx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let g = &go[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_w[widx] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let wv = weight[widx];
                        let dst = gi.plane_mut(i);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let g = &go[y * w + x0..y * w + x1];
                            let d = &mut dst[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU `x * sigmoid(x)`; smooth, so finite differences behave everywhere.
pub fn silu_forward(pre: &FeatureMap) -> FeatureMap {
    FeatureMap {
        c: pre.c,
        h: pre.h,
        w: pre.w,
        data: pre.data.iter().map(|&x| x * sigmoid(x)).collect(),
    }
}

pub fn silu_backward(pre: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    let data = pre
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (1.0 + x * (1.0 - s))
        })
        .collect();
    FeatureMap {
        c: pre.c,
        h: pre.h,
        w: pre.w,
        data,
    }
}

/// Average pooling with window = stride = `k`; partial windows at the border
/// average over the pixels they cover.
pub fn avgpool_forward(input: &FeatureMap, k: usize) -> FeatureMap {
    let (oh, ow) = (input.h.div_ceil(k), input.w.div_ceil(k));
    let mut out = FeatureMap::zeros(input.c, oh, ow);
    for c in 0..input.c {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for oy in 0..oh {
            let (y0, y1) = (oy * k, ((oy + 1) * k).min(input.h));
            for ox in 0..ow {
                let (x0, x1) = (ox * k, ((ox + 1) * k).min(input.w));
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += src[y * input.w + x0..y * input.w + x1].iter().sum::<f64>();
                }
                dst[oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn avgpool_backward(grad_out: &FeatureMap, k: usize, in_h: usize, in_w: usize) -> FeatureMap {
    let mut grad_in = FeatureMap::zeros(grad_out.c, in_h, in_w);
    for c in 0..grad_out.c {
        let go = grad_out.plane(c);
        let dst = grad_in.plane_mut(c);
        for oy in 0..grad_out.h {
            let (y0, y1) = (oy * k, ((oy + 1) * k).min(in_h));
            for ox in 0..grad_out.w {
                let (x0, x1) = (ox * k, ((ox + 1) * k).min(in_w));
                let g = go[oy * grad_out.w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    dst[y * in_w + x0..y * in_w + x1].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    grad_in
}

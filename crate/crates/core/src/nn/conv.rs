//! Same-size 2-D convolution and ×2 upsampling as tape primitives.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, MatRef, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Border handling of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Circular,
}

/// Source index along one axis for every `(tap, output)` pair, `None` where
/// the tap falls into zero padding.
fn tap_map(n: usize, k: usize, dilation: usize, padding: Padding) -> Vec<Option<usize>> {
    let half = (k / 2) as i64;
    let mut map = Vec::with_capacity(k * n);
    for tap in 0..k as i64 {
        let shift = (tap - half) * dilation as i64;
        for o in 0..n as i64 {
            let s = o + shift;
            map.push(match padding {
                Padding::Circular => Some(s.rem_euclid(n as i64) as usize),
                Padding::Zero => (0..n as i64).contains(&s).then_some(s as usize),
            });
        }
    }
    map
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ymap: Vec<Option<usize>>,
    xmap: Vec<Option<usize>>,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, dilation: usize, padding: Padding) -> Self {
        Geometry { c, h, w, k, ymap: tap_map(h, k, dilation, padding), xmap: tap_map(w, k, dilation, padding) }
    }

    /// `[C·k·k, H·W]` patch matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (h, w, k) = (self.h, self.w, self.k);
        let hw = h * w;
        let mut cols = vec![T::zero(); self.c * k * k * hw];
        for c in 0..self.c {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let xm = &self.xmap[kx * w..(kx + 1) * w];
                    for y in 0..h {
                        let Some(sy) = self.ymap[ky * h + y] else { continue };
                        let src = &plane[sy * w..(sy + 1) * w];
                        for (dst, sx) in row[y * w..(y + 1) * w].iter_mut().zip(xm) {
                            if let Some(sx) = sx {
                                *dst = src[*sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Geometry::im2col`].
    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let (h, w, k) = (self.h, self.w, self.k);
        let hw = h * w;
        let mut x = vec![T::zero(); self.c * hw];
        for c in 0..self.c {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let xm = &self.xmap[kx * w..(kx + 1) * w];
                    for y in 0..h {
                        let Some(sy) = self.ymap[ky * h + y] else { continue };
                        let dst = &mut plane[sy * w..(sy + 1) * w];
                        for (v, sx) in row[y * w..(y + 1) * w].iter().zip(xm) {
                            if let Some(sx) = sx {
                                dst[*sx] += *v;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Same-size cross-correlation of a `[C, H, W]` input with `[O, C, k, k]`
/// weights and an `[O]` bias. `k` must be odd.
pub fn conv2d<'t, T: Real>(
    input: &Var<'t, T>,
    weights: &Var<'t, T>,
    bias: &Var<'t, T>,
    dilation: usize,
    padding: Padding,
) -> Result<Var<'t, T>> {
    let [c, h, w] = match input.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape("conv2d", format!("input must be [C, H, W], got {s:?}"))),
    };
    let [o, wc, k] = match weights.shape() {
        [o, wc, k, k2] if k == k2 && k % 2 == 1 => [*o, *wc, *k],
        s => return Err(Error::shape("conv2d", format!("weights must be [O, C, k, k] with odd k, got {s:?}"))),
    };
    if wc != c {
        return Err(Error::shape("conv2d", format!("input has {c} channels, layer expects {wc}")));
    }
    if bias.shape() != [o] {
        return Err(Error::shape("conv2d", format!("bias {:?} for {o} output channels", bias.shape())));
    }
    if dilation == 0 {
        return Err(Error::shape("conv2d", "dilation must be at least 1"));
    }
    let geo = Geometry::new(c, h, w, k, dilation, padding);
    let hw = h * w;
    let ckk = c * k * k;
    let cols = geo.im2col(input.data());
    let mut out = Vec::with_capacity(o * hw);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, hw));
    }
    gemm(
        T::one(),
        MatRef::row_major(weights.data(), o, ckk),
        MatRef::row_major(&cols, ckk, hw),
        T::one(),
        &mut out,
    );
    let value = Tensor::from_parts(vec![o, h, w], out);
    let cols = Arc::new(cols);
    let wv = weights.value().clone();
    Ok(input.tape().op("conv2d", &[input, weights, bias], value, move |g, need| {
        let gx = need[0].then(|| {
            let mut dcols = vec![T::zero(); ckk * hw];
            gemm(T::one(), MatRef::row_major(wv.data(), o, ckk).t(), MatRef::row_major(g, o, hw), T::zero(), &mut dcols);
            geo.col2im(&dcols)
        });
        let gw = need[1].then(|| {
            let mut dw = vec![T::zero(); o * ckk];
            gemm(T::one(), MatRef::row_major(g, o, hw), MatRef::row_major(&cols, ckk, hw).t(), T::zero(), &mut dw);
            dw
        });
        let gb = need[2].then(|| g.chunks(hw).map(|r| r.iter().copied().sum()).collect());
        vec![gx, gw, gb]
    }))
}

/// One axis of ×2 linear upsampling at cell centers: output `2i` sits a
/// quarter cell left of input `i`, output `2i + 1` a quarter cell right.
fn neighbours(n: usize, wrap: bool) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|q| {
            let i = q / 2;
            let other = if q % 2 == 0 {
                if i > 0 { i - 1 } else if wrap { n - 1 } else { 0 }
            } else if i + 1 < n {
                i + 1
            } else if wrap {
                0
            } else {
                n - 1
            };
            [(i, 0.75), (other, 0.25)]
        })
        .collect()
}

fn upsample_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, wrap: bool) -> Vec<T> {
    let (ny, nx) = (neighbours(h, wrap), neighbours(w, wrap));
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (y2, wy) in ny.iter().enumerate() {
            for (x2, wx) in nx.iter().enumerate() {
                let mut acc = T::zero();
                for &(sy, a) in wy {
                    for &(sx, b) in wx {
                        acc += T::cast(a * b) * src[sy * w + sx];
                    }
                }
                dst[y2 * w2 + x2] = acc;
            }
        }
    }
    out
}

fn upsample_adjoint<T: Real>(g: &[T], c: usize, h: usize, w: usize, wrap: bool) -> Vec<T> {
    let (ny, nx) = (neighbours(h, wrap), neighbours(w, wrap));
    let (h2, w2) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &g[ch * h2 * w2..(ch + 1) * h2 * w2];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (y2, wy) in ny.iter().enumerate() {
            for (x2, wx) in nx.iter().enumerate() {
                let v = src[y2 * w2 + x2];
                for &(sy, a) in wy {
                    for &(sx, b) in wx {
                        dst[sy * w + sx] += T::cast(a * b) * v;
                    }
                }
            }
        }
    }
    gx
}

/// Bilinear ×2 upsampling of a `[C, H, W]` value. Circular padding wraps at
/// the border, zero padding clamps to the edge cell.
pub fn upsample2<'t, T: Real>(input: &Var<'t, T>, padding: Padding) -> Result<Var<'t, T>> {
    let [c, h, w] = match input.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape("upsample2", format!("input must be [C, H, W], got {s:?}"))),
    };
    let wrap = padding == Padding::Circular;
    let value = Tensor::from_parts(vec![c, 2 * h, 2 * w], upsample_forward(input.data(), c, h, w, wrap));
    Ok(input.tape().op("upsample2", &[input], value, move |g, _| vec![Some(upsample_adjoint(g, c, h, w, wrap))]))
}

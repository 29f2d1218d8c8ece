//! Stride-1 zero-padded cross-correlation in one and two dimensions.
//!
//! `conv2d` lowers each (sample, group, kernel tap) to a matrix product over a
//! shifted view of the zero-padded input; all products and sums are carried
//! out in `f64`.

use super::gemm::{gemm_strided, MatRef};
use super::{axis_split, check_axis, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Zero padding applied to each spatial side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub padding: Padding,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            padding: Padding::default(),
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dConfig {
    /// Padding that keeps the spatial size for an odd `k x k` kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        Conv2dConfig {
            padding: Padding::uniform(dilation * (k - 1) / 2),
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], cfg: &Conv2dConfig) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: input.to_vec(),
                reason: "input must be [N,C,H,W]".into(),
            });
        }
        if weight.len() != 4 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: weight.to_vec(),
                reason: "weight must be [Cout,Cin/groups,kh,kw]".into(),
            });
        }
        if cfg.groups == 0 || cfg.dilation == 0 {
            return Err(Error::InvalidArgument(
                "conv2d groups and dilation must be positive".into(),
            ));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if cin % cfg.groups != 0 || cout % cfg.groups != 0 || wc * cfg.groups != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels/groups",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        let p = cfg.padding;
        let span_h = cfg.dilation * (kh - 1);
        let span_w = cfg.dilation * (kw - 1);
        if h + p.top + p.bottom <= span_h || w + p.left + p.right <= span_w {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: input.to_vec(),
                reason: "kernel extent exceeds padded input".into(),
            });
        }
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: h + p.top + p.bottom - span_h,
            wo: w + p.left + p.right - span_w,
            cin_g: wc,
            cout_g: cout / cfg.groups,
        })
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Zero-padded `f64` copy of one group's input channels for the whole batch.
///
/// Channel `ci` of sample `s` starts at `ci * row_stride + s * plane_stride`.
/// Each plane slot holds the padded `hp x wp` plane plus slack, so a shifted
/// view of `cols` elements starting in channel `ci` never leaves its row.
struct Padded {
    wp: usize,
    plane_stride: usize,
    row_stride: usize,
    /// Columns of the extended output grid: every sample's `ho x wp` block,
    /// `plane_stride` apart.
    cols: usize,
}

impl Padded {
    fn new(geo: &Geometry, cfg: &Conv2dConfig) -> Self {
        let p = cfg.padding;
        let (hp, wp) = (geo.h + p.top + p.bottom, geo.w + p.left + p.right);
        let plane_stride = hp * wp + (geo.kw - 1) * cfg.dilation;
        Padded {
            wp,
            plane_stride,
            row_stride: geo.n * plane_stride,
            cols: (geo.n - 1) * plane_stride + geo.ho * wp,
        }
    }

    fn len(&self, channels: usize) -> usize {
        channels * self.row_stride
    }

    /// Offset of tap `(ky, kx)` within a padded plane.
    fn tap(&self, ky: usize, kx: usize, d: usize) -> usize {
        ky * d * self.wp + kx * d
    }

    /// Column of output pixel `(oy, 0)` of sample `s` on the extended grid.
    fn out_col(&self, s: usize, oy: usize) -> usize {
        s * self.plane_stride + oy * self.wp
    }

    /// Writes the interior of every plane of group `grp`. The border is never
    /// written, so a zeroed buffer stays valid across calls.
    fn fill<E: Element>(&self, input: &[E], geo: &Geometry, cfg: &Conv2dConfig, grp: usize, buf: &mut [f64]) {
        let (pt, pl) = (cfg.padding.top, cfg.padding.left);
        let plane = geo.h * geo.w;
        for s in 0..geo.n {
            for ci in 0..geo.cin_g {
                let c = s * geo.cin + grp * geo.cin_g + ci;
                let src = &input[c * plane..(c + 1) * plane];
                let dst = &mut buf[ci * self.row_stride + s * self.plane_stride..];
                for y in 0..geo.h {
                    let row = &mut dst[(y + pt) * self.wp + pl..][..geo.w];
                    for (d, &v) in row.iter_mut().zip(&src[y * geo.w..(y + 1) * geo.w]) {
                        *d = v.as_f64();
                    }
                }
            }
        }
    }

    /// Columns of one sample's extended output block.
    fn sample_cols(&self) -> usize {
        self.cols - (self.row_stride / self.plane_stride - 1) * self.plane_stride
    }

    /// Shifted view of sample `s` alone: `channels x sample_cols`.
    fn sample_view<'a>(&self, buf: &'a [f64], channels: usize, s: usize, off: usize) -> MatRef<'a> {
        MatRef::strided(&buf[s * self.plane_stride + off..], channels, self.sample_cols(), self.row_stride, 1)
    }

    /// Shifted view for tap offset `off`: `channels x cols`.
    fn view<'a>(&self, buf: &'a [f64], channels: usize, off: usize) -> MatRef<'a> {
        MatRef::strided(&buf[off..], channels, self.cols, self.row_stride, 1)
    }
}

/// Weight slice of one tap for one group: `cout_g x cin_g`.
fn tap_weights<'a>(w: &'a [f64], geo: &Geometry, grp: usize, ky: usize, kx: usize) -> MatRef<'a> {
    let kk = geo.kh * geo.kw;
    let base = grp * geo.cout_g * geo.cin_g * kk + ky * geo.kw + kx;
    MatRef::strided(&w[base..], geo.cout_g, geo.cin_g, geo.cin_g * kk, kk)
}

fn to_f64<E: Element>(xs: &[E]) -> Vec<f64> {
    xs.iter().map(|&v| v.as_f64()).collect()
}

// Each tap of the kernel is one matrix product between the tap's weights and
// a shifted view of the padded input. Outputs are computed on the padded
// grid and the extra columns discarded, which keeps every view strided.
fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    cfg: &Conv2dConfig,
) -> Result<Tensor<E>> {
    let geo = Geometry::new(input.shape(), weight.shape(), cfg)?;
    if let Some(b) = bias {
        if b.shape() != [geo.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![geo.cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let pad = Padded::new(&geo, cfg);
    let nc = pad.cols;
    let p = geo.p();
    let w64 = to_f64(weight.data());
    let mut xp = vec![0.0f64; pad.len(geo.cin_g)];
    let mut acc = vec![0.0f64; geo.cout_g * nc];
    let mut out = vec![E::zero(); geo.n * geo.cout * p];
    for g in 0..cfg.groups {
        pad.fill(input.data(), &geo, cfg, g, &mut xp);
        // One sample at a time keeps the accumulator in cache across taps.
        for s in 0..geo.n {
            let base = pad.out_col(s, 0);
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let beta = if ky == 0 && kx == 0 { 0.0 } else { 1.0 };
                    let view = pad.sample_view(&xp, geo.cin_g, s, pad.tap(ky, kx, cfg.dilation));
                    gemm_strided(
                        tap_weights(&w64, &geo, g, ky, kx),
                        view,
                        beta,
                        &mut acc[base..],
                        nc,
                        1,
                    );
                }
            }
        }
        for s in 0..geo.n {
            for co in 0..geo.cout_g {
                let oc = g * geo.cout_g + co;
                let b = bias.map_or(0.0, |b| b.data()[oc].as_f64());
                let dst = &mut out[(s * geo.cout + oc) * p..][..p];
                for oy in 0..geo.ho {
                    let src = &acc[co * nc + pad.out_col(s, oy)..][..geo.wo];
                    for (o, &a) in dst[oy * geo.wo..(oy + 1) * geo.wo].iter_mut().zip(src) {
                        *o = E::of(a + b);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![geo.n, geo.cout, geo.ho, geo.wo], out))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    out_shape: &[usize],
    g: &[E],
    cfg: &Conv2dConfig,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>) {
    let geo = Geometry::new(input.shape(), weight.shape(), cfg).expect("validated in forward");
    debug_assert_eq!(out_shape, [geo.n, geo.cout, geo.ho, geo.wo]);
    let pad = Padded::new(&geo, cfg);
    let nc = pad.cols;
    let p = geo.p();
    let in_plane = geo.h * geo.w;
    let (pt, pl) = (cfg.padding.top, cfg.padding.left);
    let w64 = to_f64(weight.data());
    let kk = geo.kh * geo.kw;

    let mut gin = need_input.then(|| vec![E::zero(); input.numel()]);
    let mut gw = need_weight.then(|| vec![0.0f64; weight.numel()]);
    let gb = need_bias.then(|| {
        (0..geo.cout)
            .map(|oc| {
                (0..geo.n)
                    .flat_map(|n| &g[(n * geo.cout + oc) * p..(n * geo.cout + oc + 1) * p])
                    .map(|&v| v.as_f64())
                    .sum::<f64>()
            })
            .map(E::of)
            .collect()
    });
    if !need_input && !need_weight {
        return (None, None, gb);
    }

    let mut xp = vec![0.0f64; if need_weight { pad.len(geo.cin_g) } else { 0 }];
    let mut gxp = vec![0.0f64; if need_input { pad.len(geo.cin_g) } else { 0 }];
    // Output gradient on the extended grid; the discarded columns stay zero,
    // so they contribute nothing to either product.
    let mut gext = vec![0.0f64; geo.cout_g * nc];
    for grp in 0..cfg.groups {
        for s in 0..geo.n {
            for co in 0..geo.cout_g {
                let src = &g[(s * geo.cout + grp * geo.cout_g + co) * p..][..p];
                for oy in 0..geo.ho {
                    let dst = &mut gext[co * nc + pad.out_col(s, oy)..][..geo.wo];
                    for (d, &v) in dst.iter_mut().zip(&src[oy * geo.wo..(oy + 1) * geo.wo]) {
                        *d = v.as_f64();
                    }
                }
            }
        }
        if let Some(gw) = gw.as_mut() {
            pad.fill(input.data(), &geo, cfg, grp, &mut xp);
            let gw_g = &mut gw[grp * geo.cout_g * geo.cin_g * kk..][..geo.cout_g * geo.cin_g * kk];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let view = pad.view(&xp, geo.cin_g, pad.tap(ky, kx, cfg.dilation));
                    gemm_strided(
                        MatRef::new(&gext, geo.cout_g, nc),
                        view.t(),
                        1.0,
                        &mut gw_g[ky * geo.kw + kx..],
                        geo.cin_g * kk,
                        kk,
                    );
                }
            }
        }
        if let Some(gin) = gin.as_mut() {
            gxp.fill(0.0);
            let sc = pad.sample_cols();
            for s in 0..geo.n {
                let base = pad.out_col(s, 0);
                let gs = MatRef::strided(&gext[base..], geo.cout_g, sc, nc, 1);
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let off = pad.tap(ky, kx, cfg.dilation);
                        gemm_strided(
                            tap_weights(&w64, &geo, grp, ky, kx).t(),
                            gs,
                            1.0,
                            &mut gxp[base + off..],
                            pad.row_stride,
                            1,
                        );
                    }
                }
            }
            for s in 0..geo.n {
                for ci in 0..geo.cin_g {
                    let c = s * geo.cin + grp * geo.cin_g + ci;
                    let dst = &mut gin[c * in_plane..(c + 1) * in_plane];
                    let src = &gxp[ci * pad.row_stride + s * pad.plane_stride..];
                    for y in 0..geo.h {
                        let row = &src[(y + pt) * pad.wp + pl..][..geo.w];
                        for (d, &v) in dst[y * geo.w..(y + 1) * geo.w].iter_mut().zip(row) {
                            *d = E::of(v);
                        }
                    }
                }
            }
        }
    }
    (gin, gw.map(|v| v.into_iter().map(E::of).collect()), gb)
}

fn conv1d_check(input: &[usize], weight: &[usize], axis: usize, pad: usize) -> Result<usize> {
    check_axis(axis, input.len())?;
    if weight.len() != 1 {
        return Err(Error::InvalidShape {
            op: "conv1d",
            shape: weight.to_vec(),
            reason: "kernel must be one-dimensional".into(),
        });
    }
    let k = weight[0];
    if k.is_multiple_of(2) {
        return Err(Error::InvalidShape {
            op: "conv1d",
            shape: weight.to_vec(),
            reason: "kernel length must be odd".into(),
        });
    }
    let len = input[axis];
    if len + 2 * pad < k {
        return Err(Error::InvalidShape {
            op: "conv1d",
            shape: input.to_vec(),
            reason: format!("kernel of length {k} exceeds padded extent"),
        });
    }
    Ok(len + 2 * pad - k + 1)
}

/// Output index range `i` for which tap `t` reads inside the input.
fn valid_range(t: usize, pad: usize, li: usize, lo: usize) -> std::ops::Range<usize> {
    // Input index is i + t - pad, which must lie in [0, li).
    let start = pad.saturating_sub(t).min(lo);
    let end = (li + pad).saturating_sub(t).min(lo);
    start..end.max(start)
}

fn conv1d_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    axis: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let lo = conv1d_check(input.shape(), weight.shape(), axis, pad)?;
    let (outer, li, inner) = axis_split(input.shape(), axis);
    let w = to_f64(weight.data());
    let x = input.data();
    let mut out = Vec::with_capacity(outer * lo * inner);
    let mut acc = vec![0.0f64; lo * inner];
    for o in 0..outer {
        acc.fill(0.0);
        let line = &x[o * li * inner..(o + 1) * li * inner];
        for (t, &wt) in w.iter().enumerate() {
            let r = valid_range(t, pad, li, lo);
            if r.is_empty() {
                continue;
            }
            let src = &line[(r.start + t - pad) * inner..(r.end + t - pad) * inner];
            for (a, &v) in acc[r.start * inner..r.end * inner].iter_mut().zip(src) {
                *a += wt * v.as_f64();
            }
        }
        out.extend(acc.iter().map(|&a| E::of(a)));
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = lo;
    Ok(Tensor::from_parts(shape, out))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv1d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    out_shape: &[usize],
    g: &[E],
    axis: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let (outer, li, inner) = axis_split(input.shape(), axis);
    let lo = out_shape[axis];
    let w = to_f64(weight.data());
    let x = input.data();
    let gin = need_input.then(|| {
        let mut gin = Vec::with_capacity(input.numel());
        let mut acc = vec![0.0f64; li * inner];
        for o in 0..outer {
            acc.fill(0.0);
            let gl = &g[o * lo * inner..(o + 1) * lo * inner];
            for (t, &wt) in w.iter().enumerate() {
                let r = valid_range(t, pad, li, lo);
                if r.is_empty() {
                    continue;
                }
                let dst = &mut acc[(r.start + t - pad) * inner..(r.end + t - pad) * inner];
                for (d, &gv) in dst.iter_mut().zip(&gl[r.start * inner..r.end * inner]) {
                    *d += wt * gv.as_f64();
                }
            }
            gin.extend(acc.iter().map(|&a| E::of(a)));
        }
        gin
    });
    let gw = need_weight.then(|| {
        let mut gw = vec![0.0f64; w.len()];
        for o in 0..outer {
            let gl = &g[o * lo * inner..(o + 1) * lo * inner];
            let line = &x[o * li * inner..(o + 1) * li * inner];
            for (t, acc) in gw.iter_mut().enumerate() {
                let r = valid_range(t, pad, li, lo);
                if r.is_empty() {
                    continue;
                }
                let src = &line[(r.start + t - pad) * inner..(r.end + t - pad) * inner];
                *acc += src
                    .iter()
                    .zip(&gl[r.start * inner..r.end * inner])
                    .map(|(&a, &b)| a.as_f64() * b.as_f64())
                    .sum::<f64>();
            }
        }
        gw.into_iter().map(E::of).collect()
    });
    (gin, gw)
}

impl<E: Element> Tape<E> {
    /// 2-D cross-correlation at stride 1 with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        cfg: Conv2dConfig,
    ) -> Result<Var> {
        let value = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &cfg,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                cfg,
            },
            &inputs,
        ))
    }

    /// 1-D cross-correlation of every line along `axis` with one shared odd
    /// kernel, zero padded by `pad` on both ends.
    pub fn conv1d(&mut self, input: Var, weight: Var, axis: usize, pad: usize) -> Result<Var> {
        let value = conv1d_forward(self.value(input), self.value(weight), axis, pad)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                axis,
                pad,
            },
            &[input, weight],
        ))
    }

    /// [`Tape::conv1d`] along `axis` with output length equal to input length.
    pub fn conv1d_same(&mut self, input: Var, weight: Var, axis: usize) -> Result<Var> {
        let k = self.shape(weight).first().copied().unwrap_or(0);
        self.conv1d(input, weight, axis, k.saturating_sub(1) / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct loop evaluation of the same cross-correlation.
    fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, cfg: &Conv2dConfig) -> Tensor {
        let geo = Geometry::new(x.shape(), w.shape(), cfg).unwrap();
        let mut out = Tensor::zeros([geo.n, geo.cout, geo.ho, geo.wo]);
        let d = cfg.dilation as isize;
        for n in 0..geo.n {
            for oc in 0..geo.cout {
                let grp = oc / geo.cout_g;
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc] as f64);
                        for ci in 0..geo.cin_g {
                            let ic = grp * geo.cin_g + ci;
                            for ky in 0..geo.kh {
                                for kx in 0..geo.kw {
                                    let iy = oy as isize + ky as isize * d - cfg.padding.top as isize;
                                    let ix = ox as isize + kx as isize * d - cfg.padding.left as isize;
                                    if iy < 0 || ix < 0 || iy >= geo.h as isize || ix >= geo.w as isize {
                                        continue;
                                    }
                                    let wv = w.data()[((oc * geo.cin_g + ci) * geo.kh + ky) * geo.kw + kx];
                                    acc += wv as f64 * x.at4(n, ic, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                        let idx = ((n * geo.cout + oc) * geo.ho + oy) * geo.wo + ox;
                        out.data_mut()[idx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_scaling() {
        let mut t: Tape = Tape::new();
        let x = t.constant(Tensor::ones([1, 1, 3, 3]));
        let w = t.constant(Tensor::full([1, 1, 1, 1], 2.0));
        let y = t.conv2d(x, w, None, Conv2dConfig::default()).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert!(t.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::uniform([2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let mut kernel = Tensor::zeros([3, 1, 3, 3]);
        for c in 0..3 {
            kernel.data_mut()[c * 9 + 4] = 1.0;
        }
        let mut t: Tape = Tape::new();
        let x = t.constant(xv.clone());
        let w = t.constant(kernel);
        let y = t.conv2d(x, w, None, Conv2dConfig::same(3, 1).with_groups(3)).unwrap();
        assert_eq!(t.value(y), &xv);
    }

    #[test]
    fn output_extent_formula() {
        let mut t: Tape = Tape::new();
        let x = t.constant(Tensor::ones([1, 2, 9, 7]));
        let w = t.constant(Tensor::ones([4, 2, 3, 3]));
        let cfg = Conv2dConfig {
            padding: Padding {
                top: 1,
                bottom: 0,
                left: 2,
                right: 3,
            },
            dilation: 2,
            groups: 1,
        };
        let y = t.conv2d(x, w, None, cfg).unwrap();
        assert_eq!(t.shape(y), &[1, 4, 9 + 1 - 4, 7 + 5 - 4]);
    }

    #[test]
    fn group_mismatch_is_error() {
        let mut t: Tape = Tape::new();
        let x = t.constant(Tensor::ones([1, 3, 4, 4]));
        let w = t.constant(Tensor::ones([2, 1, 3, 3]));
        assert!(t.conv2d(x, w, None, Conv2dConfig::same(3, 1).with_groups(2)).is_err());
        let b = t.constant(Tensor::ones([5]));
        let w = t.constant(Tensor::ones([2, 3, 3, 3]));
        assert!(t.conv2d(x, w, Some(b), Conv2dConfig::same(3, 1)).is_err());
    }

    #[test]
    fn matches_loop_oracle_forward_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (cfg, cin, cout, groups) in [
            (Conv2dConfig::default(), 2, 3, 1),
            (Conv2dConfig::same(3, 1), 2, 3, 1),
            (Conv2dConfig::same(3, 2), 4, 4, 2),
            (Conv2dConfig::same(3, 1), 3, 3, 3),
        ] {
            let cfg = cfg.with_groups(groups);
            let xv = Tensor::uniform([1, cin, 5, 5], -1.0, 1.0, &mut rng);
            let wv = Tensor::uniform([cout, cin / groups, 3, 3], -1.0, 1.0, &mut rng);
            let bv = Tensor::uniform([cout], -1.0, 1.0, &mut rng);
            let expect = naive_conv2d(&xv, &wv, Some(&bv), &cfg);

            let mut t: Tape = Tape::new();
            let x = t.param(xv.clone());
            let w = t.param(wv.clone());
            let b = t.param(bv.clone());
            let y = t.conv2d(x, w, Some(b), cfg).unwrap();
            assert!(t.value(y).max_abs_diff(&expect) < 1e-5);

            // Loss = sum(y * r) for a random r: dL/dy = r.
            let rv = Tensor::uniform(t.shape(y).to_vec(), -1.0, 1.0, &mut rng);
            let r = t.constant(rv.clone());
            let yr = t.mul(y, r).unwrap();
            let l = t.sum(yr);
            t.backward(l).unwrap();

            // Oracle gradients by linearity: dL/dx[i] = sum(naive(e_i) * r).
            let dot = |a: &Tensor| -> f64 {
                a.data().iter().zip(rv.data()).map(|(&p, &q)| p as f64 * q as f64).sum()
            };
            for i in 0..xv.numel() {
                let mut e = Tensor::zeros(xv.shape().to_vec());
                e.data_mut()[i] = 1.0;
                let want = dot(&naive_conv2d(&e, &wv, None, &cfg));
                let got = t.grad(x).unwrap().data()[i] as f64;
                assert!((want - got).abs() < 1e-5, "dx[{i}] {want} vs {got}");
            }
            for i in 0..wv.numel() {
                let mut e = Tensor::zeros(wv.shape().to_vec());
                e.data_mut()[i] = 1.0;
                let want = dot(&naive_conv2d(&xv, &e, None, &cfg));
                let got = t.grad(w).unwrap().data()[i] as f64;
                assert!((want - got).abs() < 1e-5, "dw[{i}] {want} vs {got}");
            }
            let per_channel = rv.numel() / cout;
            for (oc, &gb) in t.grad(b).unwrap().data().iter().enumerate() {
                let want: f64 = rv.data()[oc * per_channel..(oc + 1) * per_channel]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                assert!((want - gb as f64).abs() < 1e-5);
            }
        }
    }

    fn conv1d_values(x: &[f32], w: &[f32], pad: usize) -> Vec<f32> {
        let mut t: Tape = Tape::new();
        let xv = t.constant(Tensor::from_vec(x.to_vec()));
        let wv = t.constant(Tensor::from_vec(w.to_vec()));
        let y = t.conv1d(xv, wv, 0, pad).unwrap();
        t.value(y).data().to_vec()
    }

    #[test]
    fn conv1d_hand_examples() {
        assert_eq!(conv1d_values(&[1.0, 2.0, 3.0], &[1.0], 0), vec![1.0, 2.0, 3.0]);
        assert_eq!(conv1d_values(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 1), vec![3.0, 6.0, 5.0]);
        assert_eq!(conv1d_values(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 0), vec![6.0]);
        // Cross-correlation: no flip.
        assert_eq!(conv1d_values(&[0.0, 1.0, 0.0], &[1.0, 2.0, 3.0], 1), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut t: Tape = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let w = t.constant(Tensor::from_vec(vec![1.0, 1.0]));
        assert!(t.conv1d(x, w, 0, 1).is_err());
        assert!(t.conv1d(x, w, 3, 1).is_err());
    }

    #[test]
    fn conv1d_along_inner_axis() {
        // [2, 3] along axis 0 with kernel [1, 1, 1] same padding.
        let mut t: Tape = Tape::new();
        let x = t.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap());
        let w = t.constant(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
        let y = t.conv1d_same(x, w, 0).unwrap();
        assert_eq!(t.value(y).data(), &[11.0, 22.0, 33.0, 11.0, 22.0, 33.0]);
    }
}

//! Shape-moving operations: cumulative sum, flip, concat, slice, pooling.

use super::{axis_split, check_axis, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn cumsum_data<E: Element>(shape: &[usize], axis: usize, x: &[E], reverse: bool) -> Vec<E> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![E::zero(); x.len()];
    let mut acc = vec![0.0f64; inner];
    for o in 0..outer {
        acc.fill(0.0);
        for step in 0..len {
            let i = if reverse { len - 1 - step } else { step };
            let base = (o * len + i) * inner;
            for (j, a) in acc.iter_mut().enumerate() {
                *a += x[base + j].as_f64();
                out[base + j] = E::of(*a);
            }
        }
    }
    out
}

pub(super) fn reverse_cumsum<E: Element>(shape: &[usize], axis: usize, g: &[E]) -> Vec<E> {
    cumsum_data(shape, axis, g, true)
}

pub(super) fn flip_data<E: Element>(shape: &[usize], axis: usize, x: &[E]) -> Vec<E> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        for i in (0..len).rev() {
            out.extend_from_slice(&x[(o * len + i) * inner..(o * len + i + 1) * inner]);
        }
    }
    out
}

pub(super) fn split_grad<E: Element>(shapes: &[&[usize]], axis: usize, g: &[E]) -> Vec<Vec<E>> {
    let (outer, _, inner) = axis_split(shapes[0], axis);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut parts: Vec<Vec<E>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    for o in 0..outer {
        let mut off = 0;
        for (part, s) in parts.iter_mut().zip(shapes) {
            let len = s[axis] * inner;
            let base = (o * total) * inner + off;
            part.extend_from_slice(&g[base..base + len]);
            off += len;
        }
    }
    parts
}

pub(super) fn slice_backward<E: Element>(
    in_shape: &[usize],
    out_shape: &[usize],
    axis: usize,
    start: usize,
    g: &[E],
) -> Vec<E> {
    let (outer, len, inner) = axis_split(in_shape, axis);
    let take = out_shape[axis];
    let mut out = vec![E::zero(); in_shape.iter().product()];
    for o in 0..outer {
        let dst = (o * len + start) * inner;
        let src = o * take * inner;
        out[dst..dst + take * inner].copy_from_slice(&g[src..src + take * inner]);
    }
    out
}

pub(super) fn gap_backward<E: Element>(in_shape: &[usize], g: &[E]) -> Vec<E> {
    let plane = in_shape[2] * in_shape[3];
    let scale = 1.0 / plane as f64;
    g.iter()
        .flat_map(|&v| std::iter::repeat_n(E::of(v.as_f64() * scale), plane))
        .collect()
}

pub(super) fn scale_channels_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &[E],
) -> (Vec<E>, Vec<E>) {
    let plane = x.shape()[2] * x.shape()[3];
    let mut gx = vec![E::zero(); x.numel()];
    let mut gw = vec![E::zero(); w.numel()];
    for (nc, &wv) in w.data().iter().enumerate() {
        let xs = &x.data()[nc * plane..(nc + 1) * plane];
        let gs = &g[nc * plane..(nc + 1) * plane];
        let mut acc = 0.0f64;
        for ((dst, &xv), &gv) in gx[nc * plane..(nc + 1) * plane].iter_mut().zip(xs).zip(gs) {
            *dst = gv * wv;
            acc += gv.as_f64() * xv.as_f64();
        }
        gw[nc] = E::of(acc);
    }
    (gx, gw)
}

fn require_4d(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() == 4 {
        Ok(())
    } else {
        Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected [N,C,H,W]".into(),
        })
    }
}

impl<E: Element> Tape<E> {
    /// Inclusive cumulative sum along `axis`.
    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis(axis, x.rank())?;
        let value = Tensor::from_parts(x.shape().to_vec(), cumsum_data(x.shape(), axis, x.data(), false));
        Ok(self.push(value, Op::Cumsum { a, axis }, &[a]))
    }

    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis(axis, x.rank())?;
        let value = Tensor::from_parts(x.shape().to_vec(), flip_data(x.shape(), axis, x.data()));
        Ok(self.push(value, Op::Flip { a, axis }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        check_axis(axis, base.len())?;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis(axis, x.rank())?;
        let (outer, extent, inner) = axis_split(x.shape(), axis);
        if len == 0 || start + len > extent {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of bounds for extent {extent}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * extent + start) * inner;
            data.extend_from_slice(&x.data()[b..b + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        require_4d("global_avg_pool", x.shape())?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let data = x
            .data()
            .chunks_exact(plane)
            .map(|p| E::of(p.iter().map(|&v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let value = Tensor::from_parts(vec![n, c], data);
        Ok(self.push(value, Op::GlobalAvgPool(a), &[a]))
    }

    /// Multiplies channel `c` of sample `n` by `w[n, c]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        require_4d("scale_channels", xt.shape())?;
        if wt.shape() != &xt.shape()[..2] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: xt.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        let plane = xt.shape()[2] * xt.shape()[3];
        let mut data = xt.data().to_vec();
        for (chunk, &s) in data.chunks_exact_mut(plane).zip(wt.data()) {
            for v in chunk {
                *v = *v * s;
            }
        }
        let value = Tensor::from_parts(xt.shape().to_vec(), data);
        Ok(self.push(value, Op::ScaleChannels { x, w }, &[x, w]))
    }
}
